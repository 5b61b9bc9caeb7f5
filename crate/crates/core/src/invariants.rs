//! Randomized invariant checks runnable from the command line.
//!
//! Each check draws random graphs, signals and parameters and compares two
//! computations that must agree: a relabeled run against the original, the
//! per-node message passing against the matrix form, a perturbation outside
//! the delayed neighborhood against the unperturbed output, and the exact
//! gradient against central differences.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::arch::{init_params, ArchHyper, ArchKind, GnnPolicy, ModelParams};
use crate::error::Result;
use crate::gsp::{
    apply_delayed_filter, apply_filter, apply_filter_message_passing, build_disk_graph, delayed_reach, FilterTaps,
    GraphHistory, GraphSignal, Permutation, ShiftOperator,
};
use crate::sim::{
    expert_action, rollout, sample_initial_conditions, velocity_variation_cost, ExpertPolicy, FlockingConfig,
    Observation, Policy, Trajectory,
};
use crate::train::{compute_gradients, dataset_loss, predict_along};

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub name: &'static str,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckReport {
    fn new(name: &'static str, tolerance: f64, errors: &[f64]) -> Self {
        let max_error = errors.iter().copied().fold(0.0, f64::max);
        Self {
            name,
            cases: errors.len(),
            max_error,
            tolerance,
            passed: errors.iter().all(|e| e.is_finite()) && max_error <= tolerance,
        }
    }
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> Result<ShiftOperator> {
    let side = (n as f64).sqrt() * 1.2;
    let pos = Array2::from_shape_fn((n, 2), |_| rng.random_range(0.0..side));
    build_disk_graph(pos.view(), 1.5)
}

fn random_signal(rng: &mut ChaCha8Rng, n: usize, f: usize) -> GraphSignal {
    GraphSignal::new(Array2::from_shape_fn((n, f), |_| rng.random_range(-1.0..1.0))).expect("finite")
}

fn random_taps(rng: &mut ChaCha8Rng, order: usize, f_in: usize, f_out: usize) -> FilterTaps {
    FilterTaps::new(
        (0..=order)
            .map(|_| Array2::from_shape_fn((f_in, f_out), |_| rng.random_range(-1.0..1.0)))
            .collect(),
    )
    .expect("valid taps")
}

fn random_history(rng: &mut ChaCha8Rng, n: usize, f: usize, len: usize, depth: usize) -> Result<GraphHistory> {
    let mut hist = GraphHistory::new(depth);
    for _ in 0..len {
        hist.push(random_graph(rng, n)?, random_signal(rng, n, f))?;
    }
    Ok(hist)
}

/// Static and unit-delay filters commute with node relabeling.
pub fn filter_equivariance(cases: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut fixed, mut delayed) = (Vec::new(), Vec::new());
    for _ in 0..cases {
        let n = rng.random_range(2..16);
        let order = rng.random_range(0..5);
        let (fi, fo) = (rng.random_range(1..5), rng.random_range(1..5));
        let h = random_taps(&mut rng, order, fi, fo);
        let p = Permutation::random(n, &mut rng);

        let s = random_graph(&mut rng, n)?;
        let x = random_signal(&mut rng, n, fi);
        let lhs = apply_filter(&p.shift_operator(&s)?, &p.signal(&x)?, &h)?;
        let rhs = p.signal(&apply_filter(&s, &x, &h)?)?;
        fixed.push(max_abs_diff(lhs.data(), rhs.data()));

        let len = rng.random_range(1..order + 3);
        let hist = random_history(&mut rng, n, fi, len, order + 1)?;
        let lhs = apply_delayed_filter(&p.history(&hist)?, &h)?;
        let rhs = p.signal(&apply_delayed_filter(&hist, &h)?)?;
        delayed.push(max_abs_diff(lhs.data(), rhs.data()));
    }
    Ok(vec![
        CheckReport::new("static filter permutation equivariance", 1e-10, &fixed),
        CheckReport::new("delayed filter permutation equivariance", 1e-10, &delayed),
    ])
}

/// Every architecture run along relabeled graphs gives relabeled outputs.
pub fn architecture_equivariance(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = Vec::new();
    for c in 0..cases {
        let kind = ArchKind::ALL[c % 3];
        let n = rng.random_range(2..12);
        let params = init_params(
            &ArchHyper::flocking(kind, rng.random_range(1..6), rng.random_range(0..4)),
            rng.random(),
        )?;
        let p = Permutation::random(n, &mut rng);
        let (mut a, mut b) = (GnnPolicy::new(params.clone()), GnnPolicy::new(params));
        let mut worst: f64 = 0.0;
        for _ in 0..rng.random_range(1..8) {
            let s = random_graph(&mut rng, n)?;
            let x = random_signal(&mut rng, n, 6);
            let state = crate::sim::SwarmState::new(Array2::zeros((n, 2)), Array2::zeros((n, 2)))?;
            let u = a.act(&Observation {
                state: &state,
                shift: &s,
                features: &x,
            })?;
            let up = b.act(&Observation {
                state: &state,
                shift: &p.shift_operator(&s)?,
                features: &p.signal(&x)?,
            })?;
            worst = worst.max(max_abs_diff(up.data(), p.signal(&u)?.data()));
        }
        errors.push(worst);
    }
    Ok(CheckReport::new(
        "architecture permutation equivariance",
        1e-10,
        &errors,
    ))
}

/// Per-node exchanges reproduce the matrix form of the filter.
pub fn distributed_equivalence(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = Vec::new();
    for _ in 0..cases {
        let n = rng.random_range(1..16);
        let (fi, fo) = (rng.random_range(1..5), rng.random_range(1..5));
        let order = rng.random_range(0..5);
        let h = random_taps(&mut rng, order, fi, fo);
        let s = random_graph(&mut rng, n)?;
        let x = random_signal(&mut rng, n, fi);
        let a = apply_filter(&s, &x, &h)?;
        let b = apply_filter_message_passing(&s, &x, &h)?;
        errors.push(max_abs_diff(a.data(), b.data()));
    }
    Ok(CheckReport::new("distributed filter equivalence", 1e-10, &errors))
}

/// Inputs outside the delayed neighborhood of a node leave its output
/// bit-for-bit unchanged.
pub fn locality(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = Vec::new();
    for _ in 0..cases {
        let n = rng.random_range(3..16);
        let order = rng.random_range(0..4);
        let h = random_taps(&mut rng, order, 3, 2);
        let len = rng.random_range(1..order + 3);
        let hist = random_history(&mut rng, n, 3, len, order + 1)?;
        let i = rng.random_range(0..n);
        let reach = delayed_reach(&hist, i, order)?;
        let mut entries: Vec<(ShiftOperator, GraphSignal)> = hist.iter().map(|(s, x)| (s.clone(), x.clone())).collect();
        for (k, (_, x)) in entries.iter_mut().enumerate() {
            let mut data = x.data().clone();
            for node in 0..n {
                if reach.get(k).is_none_or(|set| !set.contains(&node)) {
                    data.row_mut(node).fill(1e3);
                }
            }
            *x = GraphSignal::new(data)?;
        }
        let mut perturbed = GraphHistory::new(order + 1);
        for (s, x) in entries.into_iter().rev() {
            perturbed.push(s, x)?;
        }
        let a = apply_delayed_filter(&hist, &h)?;
        let b = apply_delayed_filter(&perturbed, &h)?;
        let diff = a
            .data()
            .row(i)
            .iter()
            .zip(b.data().row(i))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        errors.push(diff);
    }
    Ok(CheckReport::new("delayed filter locality", 0.0, &errors))
}

fn short_trajectories(rng: &mut ChaCha8Rng, count: usize) -> Result<Vec<Trajectory>> {
    let cfg = FlockingConfig {
        agents: 6,
        duration: 0.06,
        ..FlockingConfig::default()
    };
    (0..count)
        .map(|_| {
            let init = sample_initial_conditions(&cfg, rng.random())?;
            Ok(rollout(&mut ExpertPolicy::new(&cfg), &init, &cfg))
        })
        .collect()
}

/// Relative error of the exact gradient against central differences.
pub fn gradient_check(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = Vec::new();
    for c in 0..cases {
        let kind = ArchKind::ALL[c % 3];
        let hyper = ArchHyper::flocking(kind, rng.random_range(1..4), rng.random_range(0..3));
        let params = init_params(&hyper, rng.random())?;
        let trajs = short_trajectories(&mut rng, 2)?;
        let batch: Vec<&Trajectory> = trajs.iter().collect();
        let (_, grad) = compute_gradients(&params, &batch)?;
        let flat = params.flatten();
        let eps = 1e-6;
        let mut num = vec![0.0; flat.len()];
        for (j, slot) in num.iter_mut().enumerate() {
            let mut plus = flat.clone();
            plus[j] += eps;
            let mut minus = flat.clone();
            minus[j] -= eps;
            let lp = dataset_loss(&ModelParams::from_flat(hyper, &plus)?, &trajs)?;
            let lm = dataset_loss(&ModelParams::from_flat(hyper, &minus)?, &trajs)?;
            *slot = (lp - lm) / (2.0 * eps);
        }
        let diff: f64 = grad
            .iter()
            .zip(&num)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        errors.push(diff / scale);
    }
    Ok(CheckReport::new("gradient against finite differences", 1e-5, &errors))
}

/// The cost ignores labels and the expert relabels with the team.
pub fn flocking_symmetries(cases: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut cost, mut expert, mut open_loop) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..cases {
        let cfg = FlockingConfig {
            agents: rng.random_range(2..20),
            ..FlockingConfig::default()
        };
        let state = sample_initial_conditions(&cfg, rng.random())?;
        let p = Permutation::random(cfg.agents, &mut rng);
        let moved = state.permuted(&p);
        let c0 = velocity_variation_cost(state.velocities.view());
        let c1 = velocity_variation_cost(moved.velocities.view());
        cost.push((c0 - c1).abs() / c0.max(1e-12));
        let u = expert_action(&state, &cfg)?;
        let up = expert_action(&moved, &cfg)?;
        expert.push(max_abs_diff(up.data(), p.signal(&u)?.data()));

        let trajs = short_trajectories(&mut rng, 1)?;
        let p = Permutation::random(trajs[0].agents(), &mut rng);
        let params = init_params(&ArchHyper::flocking(ArchKind::Grnn, 3, 2), rng.random())?;
        let a = predict_along(&params, &trajs[0])?;
        let b = predict_along(&params, &trajs[0].permuted(&p))?;
        let worst = a
            .iter()
            .zip(&b)
            .map(|(u, v)| Ok(max_abs_diff(v.data(), p.signal(u)?.data())))
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        open_loop.push(worst);
    }
    Ok(vec![
        CheckReport::new("cost permutation invariance", 1e-12, &cost),
        CheckReport::new("expert permutation equivariance", 1e-10, &expert),
        CheckReport::new("trajectory relabeling equivariance", 1e-10, &open_loop),
    ])
}

/// All suites with `cases` random instances each.
pub fn run_all(cases: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut out = filter_equivariance(cases, seed)?;
    out.push(architecture_equivariance(cases, seed.wrapping_add(1))?);
    out.push(distributed_equivalence(cases, seed.wrapping_add(2))?);
    out.push(locality(cases, seed.wrapping_add(3))?);
    out.push(gradient_check(cases.min(6), seed.wrapping_add(4))?);
    out.extend(flocking_symmetries(cases, seed.wrapping_add(5))?);
    Ok(out)
}
