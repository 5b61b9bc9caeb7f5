//! Planar flocking environment.
//!
//! Double-integrator agents exchange messages over a proximity graph. A
//! centralized expert drives all velocities to a common value while a
//! pairwise potential keeps agents apart. The quality of any controller is
//! measured by the velocity spread of the team.

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::gsp::{build_disk_graph, GraphSignal, Permutation, ShiftOperator};

/// Distance below which two agents count as collided.
pub const COLLISION_DISTANCE: f64 = 1e-9;

/// Consecutive rejected draws before initial-condition sampling gives up.
pub const MAX_REJECTIONS: usize = 10_000;

/// Single-agent moves per agent when mixing an initial layout.
pub const MIXING_SWEEPS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlockingConfig {
    pub agents: usize,
    /// Sampling time in seconds.
    pub sampling_time: f64,
    /// Trajectory duration in seconds.
    pub duration: f64,
    pub comm_radius: f64,
    pub ca_radius: f64,
    pub max_accel: f64,
    pub init_velocity_max: f64,
    pub bias_max: f64,
    pub min_init_distance: f64,
}

impl Default for FlockingConfig {
    fn default() -> Self {
        Self {
            agents: 50,
            sampling_time: 0.01,
            duration: 2.0,
            comm_radius: 2.0,
            ca_radius: 1.0,
            max_accel: 10.0,
            init_velocity_max: 3.0,
            bias_max: 3.0,
            min_init_distance: 0.1,
        }
    }
}

impl FlockingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sampling_time", self.sampling_time),
            ("duration", self.duration),
            ("comm_radius", self.comm_radius),
            ("ca_radius", self.ca_radius),
            ("max_accel", self.max_accel),
            ("init_velocity_max", self.init_velocity_max),
            ("bias_max", self.bias_max),
            ("min_init_distance", self.min_init_distance),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.agents == 0 {
            return Err(Error::Config("agents must be positive".into()));
        }
        if self.ca_radius >= self.comm_radius {
            return Err(Error::Config(format!(
                "collision radius {} must be below the communication radius {}",
                self.ca_radius, self.comm_radius
            )));
        }
        Ok(())
    }

    /// Number of control steps `T`.
    pub fn steps(&self) -> usize {
        (self.duration / self.sampling_time).round() as usize
    }

    /// Radius of the disc initial positions are drawn from.
    ///
    /// Grows as `sqrt(N)` so the agent density, and with it the expected
    /// neighborhood size, does not depend on the team size.
    pub fn init_disc_radius(&self) -> f64 {
        (self.agents as f64).sqrt() * self.comm_radius / 2.0
    }

    /// Canonical `key=value` rendering; the basis of [`FlockingConfig::hash`].
    pub fn canonical(&self) -> String {
        format!(
            "agents={}\nsampling_time={:?}\nduration={:?}\ncomm_radius={:?}\nca_radius={:?}\n\
             max_accel={:?}\ninit_velocity_max={:?}\nbias_max={:?}\nmin_init_distance={:?}\n",
            self.agents,
            self.sampling_time,
            self.duration,
            self.comm_radius,
            self.ca_radius,
            self.max_accel,
            self.init_velocity_max,
            self.bias_max,
            self.min_init_distance
        )
    }

    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.canonical().as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }
}

/// Positions (m) and velocities (m/s) of a planar team.
#[derive(Debug, Clone, PartialEq)]
pub struct SwarmState {
    pub positions: Array2<f64>,
    pub velocities: Array2<f64>,
    pub time_index: usize,
}

impl SwarmState {
    pub fn new(positions: Array2<f64>, velocities: Array2<f64>) -> Result<Self> {
        if positions.ncols() != 2 || velocities.dim() != positions.dim() {
            return invalid(format!(
                "positions {:?} and velocities {:?} must both be N x 2",
                positions.dim(),
                velocities.dim()
            ));
        }
        if positions.iter().chain(velocities.iter()).any(|v| !v.is_finite()) {
            return invalid("swarm state has non-finite entries");
        }
        Ok(Self {
            positions,
            velocities,
            time_index: 0,
        })
    }

    pub fn agents(&self) -> usize {
        self.positions.nrows()
    }

    pub fn permuted(&self, p: &Permutation) -> Self {
        Self {
            positions: p.rows(&self.positions),
            velocities: p.rows(&self.velocities),
            time_index: self.time_index,
        }
    }
}

/// Draws positions uniformly in a disc, conditioned on a minimum pairwise
/// distance and a connected communication graph, and velocities uniformly
/// in a box around a shared random bias.
///
/// A connected start is built by placing agents one at a time, each within
/// `comm_radius` of an earlier one. That layout is clustered, so it is then
/// mixed by [`MIXING_SWEEPS`] sweeps of single-agent moves: a random agent
/// gets a fresh uniform position in the disc and the move is kept only if
/// the constraints still hold. The uniform distribution over valid layouts
/// is stationary for these moves.
pub fn sample_initial_conditions(cfg: &FlockingConfig, seed: u64) -> Result<SwarmState> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.agents;
    let disc = cfg.init_disc_radius();
    let min_d2 = cfg.min_init_distance * cfg.min_init_distance;
    let link2 = cfg.comm_radius * cfg.comm_radius;

    let mut positions = Array2::zeros((n, 2));
    for i in 0..n {
        let mut rejections = 0;
        loop {
            let rho = disc * rng.random::<f64>().sqrt();
            let theta = std::f64::consts::TAU * rng.random::<f64>();
            let (x, y) = (rho * theta.cos(), rho * theta.sin());
            let mut clear = true;
            let mut linked = i == 0;
            for j in 0..i {
                let dx = x - positions[[j, 0]];
                let dy = y - positions[[j, 1]];
                let d2 = dx * dx + dy * dy;
                clear &= d2 >= min_d2;
                linked |= d2 <= link2;
            }
            if clear && linked {
                positions[[i, 0]] = x;
                positions[[i, 1]] = y;
                break;
            }
            rejections += 1;
            if rejections >= MAX_REJECTIONS {
                return Err(Error::Config(format!(
                    "cannot place agent {i} within {} m of the others and at least {} m from all of them",
                    cfg.comm_radius, cfg.min_init_distance
                )));
            }
        }
    }

    for _ in 0..MIXING_SWEEPS * n {
        let i = rng.random_range(0..n);
        let rho = disc * rng.random::<f64>().sqrt();
        let theta = std::f64::consts::TAU * rng.random::<f64>();
        let (x, y) = (rho * theta.cos(), rho * theta.sin());
        let clear = (0..n).filter(|&j| j != i).all(|j| {
            let dx = x - positions[[j, 0]];
            let dy = y - positions[[j, 1]];
            dx * dx + dy * dy >= min_d2
        });
        if !clear {
            continue;
        }
        let old = (positions[[i, 0]], positions[[i, 1]]);
        positions[[i, 0]] = x;
        positions[[i, 1]] = y;
        if !disk_graph_connected(positions.view(), link2) {
            positions[[i, 0]] = old.0;
            positions[[i, 1]] = old.1;
        }
    }
    debug_assert!(build_disk_graph(positions.view(), cfg.comm_radius)?.is_connected());

    let vmax = cfg.init_velocity_max;
    let mut velocities = Array2::from_shape_fn((n, 2), |_| rng.random_range(-vmax..=vmax));
    let bias = [
        rng.random_range(-cfg.bias_max..=cfg.bias_max),
        rng.random_range(-cfg.bias_max..=cfg.bias_max),
    ];
    for mut row in velocities.rows_mut() {
        row[0] += bias[0];
        row[1] += bias[1];
    }
    SwarmState::new(positions, velocities)
}

fn disk_graph_connected(positions: ArrayView2<'_, f64>, radius2: f64) -> bool {
    let n = positions.nrows();
    if n == 0 {
        return true;
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = stack.pop() {
        for v in 0..n {
            if seen[v] {
                continue;
            }
            let dx = positions[[u, 0]] - positions[[v, 0]];
            let dy = positions[[u, 1]] - positions[[v, 1]];
            if dx * dx + dy * dy <= radius2 {
                seen[v] = true;
                count += 1;
                stack.push(v);
            }
        }
    }
    count == n
}

/// Zero-order-hold double integrator over one sampling interval.
pub fn step_dynamics(state: &SwarmState, u: &GraphSignal, cfg: &FlockingConfig) -> Result<SwarmState> {
    if u.nodes() != state.agents() || u.features() != 2 {
        return invalid(format!(
            "actions must be {} x 2, got {} x {}",
            state.agents(),
            u.nodes(),
            u.features()
        ));
    }
    let ts = cfg.sampling_time;
    let u = u.data();
    let positions = u * (ts * ts / 2.0) + &state.velocities * ts + &state.positions;
    let velocities = u * ts + &state.velocities;
    Ok(SwarmState {
        positions,
        velocities,
        time_index: state.time_index + 1,
    })
}

/// Rescales every row whose norm exceeds `u_max` onto the ball boundary.
pub fn clip_acceleration(u: &GraphSignal, u_max: f64) -> GraphSignal {
    let mut data = u.data().clone();
    for mut row in data.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > u_max {
            row *= u_max / norm;
        }
    }
    GraphSignal::from_trusted(data)
}

/// Collision-avoidance potential between two agents.
pub fn ca_potential(ri: [f64; 2], rj: [f64; 2], ca_radius: f64) -> f64 {
    let d2 = (ri[0] - rj[0]).powi(2) + (ri[1] - rj[1]).powi(2);
    if d2.sqrt() <= ca_radius {
        1.0 / d2 - d2.ln()
    } else {
        let r2 = ca_radius * ca_radius;
        1.0 / r2 - r2.ln()
    }
}

/// Gradient of [`ca_potential`] with respect to `ri`.
pub fn ca_potential_gradient(ri: [f64; 2], rj: [f64; 2], ca_radius: f64) -> Result<[f64; 2]> {
    let rij = [ri[0] - rj[0], ri[1] - rj[1]];
    let d2 = rij[0] * rij[0] + rij[1] * rij[1];
    let d = d2.sqrt();
    if d < COLLISION_DISTANCE {
        return Err(Error::Singularity(format!("agents {d:e} m apart")));
    }
    if d > ca_radius {
        return Ok([0.0, 0.0]);
    }
    let scale = -2.0 / (d2 * d2) - 2.0 / d2;
    Ok([scale * rij[0], scale * rij[1]])
}

fn position(state: &SwarmState, i: usize) -> [f64; 2] {
    [state.positions[[i, 0]], state.positions[[i, 1]]]
}

/// Centralized flocking controller with global state access (unclipped).
pub fn expert_action(state: &SwarmState, cfg: &FlockingConfig) -> Result<GraphSignal> {
    let n = state.agents();
    let v = &state.velocities;
    let total = v.sum_axis(Axis(0));
    let mut u = Array2::zeros((n, 2));
    for i in 0..n {
        // sum_j (v_i - v_j) = N v_i - sum_j v_j
        u[[i, 0]] = -(n as f64 * v[[i, 0]] - total[0]);
        u[[i, 1]] = -(n as f64 * v[[i, 1]] - total[1]);
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let g = ca_potential_gradient(position(state, i), position(state, j), cfg.ca_radius)
                .map_err(|_| Error::Singularity(format!("agents {i} and {j} collided")))?;
            // the potential is symmetric, so grad_rj = -grad_ri
            u[[i, 0]] -= g[0];
            u[[i, 1]] -= g[1];
            u[[j, 0]] += g[0];
            u[[j, 1]] += g[1];
        }
    }
    GraphSignal::new(u).map_err(|_| Error::Numeric {
        step: state.time_index,
        what: "expert action".into(),
    })
}

/// Local message of every agent: relative velocity sum and two inverse
/// distance moments over its neighbors, six features per agent.
pub fn compute_state_features(state: &SwarmState, s: &ShiftOperator) -> Result<GraphSignal> {
    let n = state.agents();
    if s.nodes() != n {
        return invalid("shift operator does not match the swarm size");
    }
    let mut x = Array2::zeros((n, 6));
    for i in 0..n {
        for j in s.neighbors(i) {
            let rx = state.positions[[i, 0]] - state.positions[[j, 0]];
            let ry = state.positions[[i, 1]] - state.positions[[j, 1]];
            let d2 = rx * rx + ry * ry;
            if d2.sqrt() < COLLISION_DISTANCE {
                return Err(Error::Singularity(format!("agents {i} and {j} collided")));
            }
            let d4 = d2 * d2;
            x[[i, 0]] += state.velocities[[i, 0]] - state.velocities[[j, 0]];
            x[[i, 1]] += state.velocities[[i, 1]] - state.velocities[[j, 1]];
            x[[i, 2]] += rx / d4;
            x[[i, 3]] += ry / d4;
            x[[i, 4]] += rx / d2;
            x[[i, 5]] += ry / d2;
        }
    }
    GraphSignal::new(x).map_err(|_| Error::Numeric {
        step: state.time_index,
        what: "state features".into(),
    })
}

/// Mean squared deviation of the velocities from the team average.
pub fn velocity_variation_cost(velocities: ArrayView2<'_, f64>) -> f64 {
    let n = velocities.nrows();
    if n == 0 {
        return 0.0;
    }
    let mean = velocities.sum_axis(Axis(0)) / n as f64;
    let mut total = 0.0;
    for row in velocities.rows() {
        let dx = row[0] - mean[0];
        let dy = row[1] - mean[1];
        total += dx * dx + dy * dy;
    }
    total / n as f64
}

/// What a controller sees at one step.
pub struct Observation<'a> {
    pub state: &'a SwarmState,
    pub shift: &'a ShiftOperator,
    pub features: &'a GraphSignal,
}

/// A (possibly stateful) controller driven by [`rollout`].
pub trait Policy {
    /// Called once before the first step of every trajectory.
    fn reset(&mut self) {}

    fn act(&mut self, obs: &Observation<'_>) -> Result<GraphSignal>;
}

#[derive(Debug, Clone)]
pub struct ExpertPolicy {
    cfg: FlockingConfig,
}

impl ExpertPolicy {
    pub fn new(cfg: &FlockingConfig) -> Self {
        Self { cfg: cfg.clone() }
    }
}

impl Policy for ExpertPolicy {
    fn act(&mut self, obs: &Observation<'_>) -> Result<GraphSignal> {
        expert_action(obs.state, &self.cfg)
    }
}

/// Applies no acceleration.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    fn act(&mut self, obs: &Observation<'_>) -> Result<GraphSignal> {
        Ok(GraphSignal::zeros(obs.state.agents(), 2))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub state: SwarmState,
    /// Undirected edges `(i, j)`, `i < j`, of the binary support `S(t)`.
    pub edges: Vec<(u32, u32)>,
    pub features: GraphSignal,
    /// Clipped action actually applied.
    pub actions: GraphSignal,
    pub cost: f64,
}

impl TrajectoryStep {
    pub fn shift(&self) -> ShiftOperator {
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|&(i, j)| (i as usize, j as usize)).collect();
        ShiftOperator::from_edges(self.state.agents(), &edges).expect("stored edges are valid")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub time: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub sampling_time: f64,
    pub steps: Vec<TrajectoryStep>,
    pub final_state: SwarmState,
    pub failure: Option<Failure>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn agents(&self) -> usize {
        self.final_state.agents()
    }

    pub fn initial_state(&self) -> &SwarmState {
        self.steps.first().map_or(&self.final_state, |s| &s.state)
    }

    /// `sum_t c(V(t))` over the recorded steps.
    pub fn cumulative_cost(&self) -> f64 {
        self.steps.iter().map(|s| s.cost).sum()
    }

    /// `c(V(T))` after the last step.
    pub fn terminal_cost(&self) -> f64 {
        velocity_variation_cost(self.final_state.velocities.view())
    }

    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    /// Relabels every agent-indexed quantity consistently.
    pub fn permuted(&self, p: &Permutation) -> Self {
        let inv = p.inverse();
        let relabel = |edges: &[(u32, u32)]| {
            let mut out: Vec<(u32, u32)> = edges
                .iter()
                .map(|&(a, b)| {
                    let (a, b) = (inv.as_slice()[a as usize] as u32, inv.as_slice()[b as usize] as u32);
                    (a.min(b), a.max(b))
                })
                .collect();
            out.sort_unstable();
            out
        };
        Self {
            sampling_time: self.sampling_time,
            steps: self
                .steps
                .iter()
                .map(|s| TrajectoryStep {
                    state: s.state.permuted(p),
                    edges: relabel(&s.edges),
                    features: GraphSignal::from_trusted(p.rows(s.features.data())),
                    actions: GraphSignal::from_trusted(p.rows(s.actions.data())),
                    cost: s.cost,
                })
                .collect(),
            final_state: self.final_state.permuted(p),
            failure: self.failure.clone(),
        }
    }
}

pub(crate) fn edge_list(s: &ShiftOperator) -> Vec<(u32, u32)> {
    s.edges().into_iter().map(|(i, j)| (i as u32, j as u32)).collect()
}

/// Closed-loop simulation: graph, features, policy, clip, integrate.
///
/// A collision or a non-finite action ends the trajectory early and is
/// recorded in [`Trajectory::failure`].
pub fn rollout(policy: &mut dyn Policy, init: &SwarmState, cfg: &FlockingConfig) -> Trajectory {
    policy.reset();
    let horizon = cfg.steps();
    let mut steps = Vec::with_capacity(horizon);
    let mut state = init.clone();
    let mut failure = None;
    for t in 0..horizon {
        let outcome = (|| -> Result<(ShiftOperator, GraphSignal, GraphSignal)> {
            let s = build_disk_graph(state.positions.view(), cfg.comm_radius)?;
            let x = compute_state_features(&state, &s)?;
            let raw = policy.act(&Observation {
                state: &state,
                shift: &s,
                features: &x,
            })?;
            if raw.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    step: t,
                    what: "policy output".into(),
                });
            }
            let u = clip_acceleration(&raw, cfg.max_accel);
            Ok((s, x, u))
        })();
        let (s, x, u) = match outcome {
            Ok(v) => v,
            Err(e) => {
                failure = Some(Failure {
                    time: t,
                    reason: e.to_string(),
                });
                break;
            }
        };
        let next = step_dynamics(&state, &u, cfg).expect("action shape checked by clip");
        steps.push(TrajectoryStep {
            cost: velocity_variation_cost(state.velocities.view()),
            state,
            edges: edge_list(&s),
            features: x,
            actions: u,
        });
        state = next;
    }
    Trajectory {
        sampling_time: cfg.sampling_time,
        steps,
        final_state: state,
        failure,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn state(pos: Array2<f64>, vel: Array2<f64>) -> SwarmState {
        SwarmState::new(pos, vel).unwrap()
    }

    #[test]
    fn default_config_matches_experiment() {
        let cfg = FlockingConfig::default();
        assert_eq!(cfg.steps(), 200);
        cfg.validate().unwrap();
        let bad = FlockingConfig {
            ca_radius: 3.0,
            ..FlockingConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn initial_conditions_respect_bounds() {
        let cfg = FlockingConfig::default();
        for seed in 0..5 {
            let s = sample_initial_conditions(&cfg, seed).unwrap();
            assert_eq!(s.agents(), 50);
            for i in 0..50 {
                for j in (i + 1)..50 {
                    let d = ((s.positions[[i, 0]] - s.positions[[j, 0]]).powi(2)
                        + (s.positions[[i, 1]] - s.positions[[j, 1]]).powi(2))
                    .sqrt();
                    assert!(d >= 0.1);
                }
                let r = (s.positions[[i, 0]].powi(2) + s.positions[[i, 1]].powi(2)).sqrt();
                assert!(r <= cfg.init_disc_radius());
            }
            assert!(s.velocities.iter().all(|v| v.abs() <= 6.0));
            assert!(build_disk_graph(s.positions.view(), 2.0).unwrap().is_connected());
        }
        assert_eq!(
            sample_initial_conditions(&cfg, 9).unwrap(),
            sample_initial_conditions(&cfg, 9).unwrap()
        );
        assert_ne!(
            sample_initial_conditions(&cfg, 9).unwrap(),
            sample_initial_conditions(&cfg, 10).unwrap()
        );
    }

    #[test]
    fn infeasible_density_is_a_config_error() {
        let cfg = FlockingConfig {
            agents: 30,
            min_init_distance: 5.0,
            ..FlockingConfig::default()
        };
        assert!(matches!(sample_initial_conditions(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn dynamics_examples() {
        let cfg = FlockingConfig::default();
        let rest = state(array![[1.0, 2.0]], array![[0.0, 0.0]]);
        let next = step_dynamics(&rest, &GraphSignal::zeros(1, 2), &cfg).unwrap();
        assert_eq!(next.positions, rest.positions);
        assert_eq!(next.time_index, 1);

        let s = state(array![[0.0, 0.0]], array![[1.0, 0.0]]);
        let u = GraphSignal::new(array![[2.0, 0.0]]).unwrap();
        let next = step_dynamics(&s, &u, &cfg).unwrap();
        assert!((next.positions[[0, 0]] - 0.0101).abs() < 1e-15);
        assert_eq!(next.positions[[0, 1]], 0.0);
        assert!((next.velocities[[0, 0]] - 1.02).abs() < 1e-15);

        let s = state(array![[0.0, 0.0], [3.0, 1.0]], array![[1.0, -2.0], [0.5, 0.0]]);
        let zero = GraphSignal::zeros(2, 2);
        let two = step_dynamics(&step_dynamics(&s, &zero, &cfg).unwrap(), &zero, &cfg).unwrap();
        let expected = &s.positions + &(&s.velocities * 0.02);
        for (a, b) in two.positions.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(two.velocities, s.velocities);
    }

    #[test]
    fn clip_examples() {
        let inside = GraphSignal::new(array![[3.0, 4.0]]).unwrap();
        assert_eq!(clip_acceleration(&inside, 10.0), inside);
        let outside = GraphSignal::new(array![[30.0, 40.0]]).unwrap();
        let clipped = clip_acceleration(&outside, 10.0);
        assert!((clipped.data()[[0, 0]] - 6.0).abs() < 1e-14);
        assert!((clipped.data()[[0, 1]] - 8.0).abs() < 1e-14);
        let zero = GraphSignal::zeros(3, 2);
        assert_eq!(clip_acceleration(&zero, 10.0), zero);
    }

    #[test]
    fn potential_gradient_examples() {
        assert_eq!(ca_potential_gradient([1.5, 0.0], [0.0, 0.0], 1.0).unwrap(), [0.0, 0.0]);
        let g = ca_potential_gradient([0.5, 0.0], [0.0, 0.0], 1.0).unwrap();
        assert!((g[0] + 20.0).abs() < 1e-12 && g[1] == 0.0);
        assert!(matches!(
            ca_potential_gradient([0.0, 0.0], [0.0, 0.0], 1.0),
            Err(Error::Singularity(_))
        ));
    }

    #[test]
    fn potential_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-6;
        for _ in 0..20 {
            let rj = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let d = rng.random_range(0.2..0.95);
            let th = rng.random_range(0.0..std::f64::consts::TAU);
            let ri = [rj[0] + d * th.cos(), rj[1] + d * th.sin()];
            let g = ca_potential_gradient(ri, rj, 1.0).unwrap();
            for axis in 0..2 {
                let mut plus = ri;
                let mut minus = ri;
                plus[axis] += h;
                minus[axis] -= h;
                let fd = (ca_potential(plus, rj, 1.0) - ca_potential(minus, rj, 1.0)) / (2.0 * h);
                assert!((fd - g[axis]).abs() <= 1e-5 * g[axis].abs().max(fd.abs()));
            }
        }
    }

    #[test]
    fn expert_examples() {
        let cfg = FlockingConfig::default();
        let flock = state(
            array![[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]],
            array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]],
        );
        assert!(expert_action(&flock, &cfg).unwrap().data().iter().all(|&v| v == 0.0));

        let pair = state(array![[0.0, 0.0], [1.5, 0.0]], array![[1.0, 0.0], [0.0, 0.0]]);
        let u = expert_action(&pair, &cfg).unwrap();
        assert_eq!(u.data(), &array![[-1.0, 0.0], [1.0, 0.0]]);

        let crowd = state(
            array![[0.0, 0.0], [0.5, 0.1], [0.2, 0.7], [3.0, 3.0]],
            array![[1.0, 0.0], [-2.0, 0.5], [0.3, 0.3], [0.0, 4.0]],
        );
        // the consensus term alone cancels across the team
        let u = expert_action(
            &crowd,
            &FlockingConfig {
                ca_radius: 1e-3,
                ..cfg.clone()
            },
        )
        .unwrap();
        let sum = u.data().sum_axis(Axis(0));
        assert!(sum.iter().all(|v| v.abs() < 1e-12));

        let coincident = state(array![[0.0, 0.0], [0.0, 0.0]], array![[0.0, 0.0], [0.0, 0.0]]);
        assert!(expert_action(&coincident, &cfg).is_err());
    }

    #[test]
    fn feature_examples() {
        let lonely = state(array![[0.0, 0.0], [10.0, 0.0]], array![[1.0, 0.0], [0.0, 3.0]]);
        let s = build_disk_graph(lonely.positions.view(), 2.0).unwrap();
        let x = compute_state_features(&lonely, &s).unwrap();
        assert!(x.data().iter().all(|&v| v == 0.0));

        let pair = state(array![[1.0, 0.0], [0.0, 0.0]], array![[2.0, 1.0], [2.0, 1.0]]);
        let s = build_disk_graph(pair.positions.view(), 2.0).unwrap();
        let x = compute_state_features(&pair, &s).unwrap();
        assert_eq!(x.data().row(0).to_vec(), vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn features_ignore_non_neighbors() {
        let a = state(
            array![[0.0, 0.0], [1.0, 0.5], [8.0, 8.0]],
            array![[1.0, 0.0], [0.0, 1.0], [5.0, 5.0]],
        );
        let mut b = a.clone();
        b.positions[[2, 0]] = -9.0;
        b.velocities[[2, 1]] = -4.0;
        let xa = compute_state_features(&a, &build_disk_graph(a.positions.view(), 2.0).unwrap()).unwrap();
        let xb = compute_state_features(&b, &build_disk_graph(b.positions.view(), 2.0).unwrap()).unwrap();
        assert_eq!(xa.data().row(0), xb.data().row(0));
        assert_eq!(xa.data().row(1), xb.data().row(1));
    }

    #[test]
    fn cost_examples() {
        assert_eq!(velocity_variation_cost(array![[1.0, 1.0], [1.0, 1.0]].view()), 0.0);
        assert_eq!(velocity_variation_cost(array![[1.0, 0.0], [-1.0, 0.0]].view()), 1.0);
        let v = array![[0.3, -1.0], [2.0, 0.5], [-0.7, 0.1]];
        let shifted = &v + &array![[5.0, -2.0]];
        assert!((velocity_variation_cost(v.view()) - velocity_variation_cost(shifted.view())).abs() < 1e-12);
    }

    #[test]
    fn zero_policy_keeps_velocities() {
        let cfg = FlockingConfig {
            agents: 12,
            duration: 0.2,
            ..FlockingConfig::default()
        };
        let init = sample_initial_conditions(&cfg, 1).unwrap();
        let traj = rollout(&mut ZeroPolicy, &init, &cfg);
        assert_eq!(traj.len(), 20);
        assert!(!traj.failed());
        let c0 = traj.steps[0].cost;
        assert!(traj.steps.iter().all(|s| s.cost == c0));
        assert_eq!(traj.final_state.velocities, init.velocities);
    }

    #[test]
    fn expert_rollout_stores_clipped_actions() {
        let cfg = FlockingConfig {
            agents: 20,
            duration: 0.5,
            ..FlockingConfig::default()
        };
        let init = sample_initial_conditions(&cfg, 4).unwrap();
        let traj = rollout(&mut ExpertPolicy::new(&cfg), &init, &cfg);
        assert!(!traj.failed());
        for step in &traj.steps {
            for row in step.actions.data().rows() {
                assert!(row.dot(&row).sqrt() <= 10.0 + 1e-12);
            }
            assert_eq!(
                step.shift(),
                build_disk_graph(step.state.positions.view(), 2.0).unwrap()
            );
        }
        assert!(traj.terminal_cost() < traj.steps[0].cost);
    }

    #[test]
    fn permuted_trajectory_relabels_graphs() {
        let cfg = FlockingConfig {
            agents: 8,
            duration: 0.05,
            ..FlockingConfig::default()
        };
        let init = sample_initial_conditions(&cfg, 2).unwrap();
        let traj = rollout(&mut ExpertPolicy::new(&cfg), &init, &cfg);
        let p = Permutation::new(vec![3, 0, 7, 1, 6, 2, 5, 4]).unwrap();
        let permuted = traj.permuted(&p);
        for (a, b) in traj.steps.iter().zip(&permuted.steps) {
            assert_eq!(b.shift(), p.shift_operator(&a.shift()).unwrap());
        }
    }
}
