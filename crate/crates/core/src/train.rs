//! Behavior cloning of the expert with exact gradients and ADAM.
//!
//! Gradients are derived by hand for the unit-delay architectures. The
//! forward pass keeps the diffused signals
//!
//! ```text
//! D_k(t) = S(t) D_{k-1}(t-1),  D_0(t) = X(t)
//! M_k(t) = S(t-1) M_{k-1}(t-1),  M_0(t) = Z(t-1)
//! ```
//!
//! so the `k`-hop delayed term of the input filter is `D_k(t) A_k` and that
//! of the hidden filter is `M_k(t) B_k`. The backward pass walks time in
//! reverse and pushes `dM_k(t)` through `S(t-1)^T` into `dM_{k-1}(t-1)`,
//! ending in `dZ(t-1)`. Graphs are data; only taps receive gradients.

use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::{gcnn_forward, grnn_step, init_params, ArchHyper, ArchKind, GnnPolicy, HiddenState, ModelParams};
use crate::error::{invalid, Error, Result};
use crate::gsp::{GraphHistory, GraphSignal, Permutation};
use crate::sim::{rollout, FlockingConfig, Trajectory, TrajectoryStep};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Training steps between validation rollouts.
    pub validate_every: usize,
    pub seed: u64,
    /// Loss above which a run is considered diverged.
    pub max_loss: f64,
    /// Stop after this many seconds, keeping the best checkpoint so far.
    pub wall_budget: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 20,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            validate_every: 5,
            seed: 0,
            max_loss: 1e6,
            wall_budget: Some(7200.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.validate_every == 0 {
            return Err(Error::Config("batch_size and validate_every must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("ADAM forgetting factors must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Expert trajectories split for training, model selection and testing.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub flocking: FlockingConfig,
    pub train: Vec<Trajectory>,
    pub validation: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
}

impl Dataset {
    /// Relabels agents in every trajectory of every split.
    pub fn permuted(&self, p: &Permutation) -> Self {
        let map = |v: &[Trajectory]| v.iter().map(|t| t.permuted(p)).collect();
        Self {
            flocking: self.flocking.clone(),
            train: map(&self.train),
            validation: map(&self.validation),
            test: map(&self.test),
        }
    }
}

/// Per-entry mean squared error between predicted and expert actions.
pub fn imitation_loss(pred: &GraphSignal, expert: &GraphSignal) -> Result<f64> {
    if pred.data().dim() != expert.data().dim() {
        return invalid(format!(
            "prediction is {:?} but expert is {:?}",
            pred.data().dim(),
            expert.data().dim()
        ));
    }
    let n = pred.data().len();
    if n == 0 {
        return Ok(0.0);
    }
    let sq: f64 = pred
        .data()
        .iter()
        .zip(expert.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / n as f64)
}

/// Sum over features of the Euclidean norm of each feature column.
pub fn graph_signal_norm(x: &GraphSignal) -> f64 {
    x.data().axis_iter(Axis(1)).map(|col| col.dot(&col).sqrt()).sum()
}

/// Mixed `L_{2,1}` imitation error, reported alongside the training loss.
pub fn l21_error(pred: &GraphSignal, expert: &GraphSignal) -> Result<f64> {
    if pred.data().dim() != expert.data().dim() {
        return invalid("shape mismatch");
    }
    Ok(graph_signal_norm(&GraphSignal::from_trusted(
        pred.data() - expert.data(),
    )))
}

/// Open-loop outputs of a model along the recorded graphs and features.
pub fn predict_along(params: &ModelParams, traj: &Trajectory) -> Result<Vec<GraphSignal>> {
    let hyper = params.hyper();
    let mut hist = GraphHistory::for_order(hyper.k);
    let mut hidden = None;
    let mut out = Vec::with_capacity(traj.len());
    for step in &traj.steps {
        hist.push(step.shift(), step.features.clone())?;
        let u = match hyper.kind {
            ArchKind::Gf | ArchKind::Gcnn => gcnn_forward(params, &hist)?,
            ArchKind::Grnn => {
                let state = hidden
                    .take()
                    .unwrap_or_else(|| HiddenState::new(step.state.agents(), hyper));
                let (next, u) = grnn_step(params, &hist, &state)?;
                hidden = Some(next);
                u
            }
        };
        out.push(u);
    }
    Ok(out)
}

/// Mean over time of the per-step imitation loss.
pub fn trajectory_loss(params: &ModelParams, traj: &Trajectory) -> Result<f64> {
    if traj.is_empty() {
        return invalid("empty trajectory");
    }
    let preds = predict_along(params, traj)?;
    let mut total = 0.0;
    for (u, step) in preds.iter().zip(&traj.steps) {
        total += imitation_loss(u, &step.actions)?;
    }
    Ok(total / traj.len() as f64)
}

/// Mean trajectory loss over a set of trajectories.
pub fn dataset_loss(params: &ModelParams, trajs: &[Trajectory]) -> Result<f64> {
    if trajs.is_empty() {
        return invalid("no trajectories");
    }
    let losses: Result<Vec<f64>> = trajs.par_iter().map(|t| trajectory_loss(params, t)).collect();
    Ok(losses?.iter().sum::<f64>() / trajs.len() as f64)
}

/// Replaces the expert actions of a trajectory with a model's outputs.
pub fn relabel_targets(teacher: &ModelParams, traj: &Trajectory) -> Result<Trajectory> {
    let preds = predict_along(teacher, traj)?;
    let steps = traj
        .steps
        .iter()
        .zip(preds)
        .map(|(s, u)| TrajectoryStep {
            actions: u,
            ..s.clone()
        })
        .collect();
    Ok(Trajectory { steps, ..traj.clone() })
}

fn check_finite(a: &Array2<f64>, step: usize, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            step,
            what: what.into(),
        })
    }
}

/// Applies `S^T` `times` times.
fn shift_t(s: &Array2<f64>, x: Array2<f64>, times: usize) -> Array2<f64> {
    (0..times).fold(x, |acc, _| s.t().dot(&acc))
}

/// Gradient buffers shaped like a parameter set.
struct Grads {
    filters: Vec<Vec<Array2<f64>>>,
}

impl Grads {
    fn zeros(params: &ModelParams) -> Self {
        Self {
            filters: params
                .filters()
                .iter()
                .map(|f| f.taps().iter().map(|t| Array2::zeros(t.dim())).collect())
                .collect(),
        }
    }

    fn flatten(&self) -> Vec<f64> {
        self.filters
            .iter()
            .flat_map(|f| f.iter().flat_map(|t| t.iter().copied()))
            .collect()
    }
}

/// Loss and gradient of one trajectory (mean over its steps).
fn trajectory_gradient(params: &ModelParams, traj: &Trajectory) -> Result<(f64, Vec<f64>)> {
    let hyper = *params.hyper();
    let horizon = traj.len();
    if horizon == 0 {
        return invalid("empty trajectory");
    }
    let n = traj.agents();
    let shifts: Vec<Array2<f64>> = traj.steps.iter().map(|s| s.shift().matrix().clone()).collect();
    let recurrent = hyper.kind == ArchKind::Grnn;
    let input = params.filter(0);
    let readout = params.filter(if recurrent { 2 } else { 1 });
    let k = hyper.k;

    // forward
    let mut diffused: Vec<Vec<Array2<f64>>> = Vec::with_capacity(horizon);
    let mut memory: Vec<Vec<Array2<f64>>> = Vec::with_capacity(horizon);
    let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(horizon);
    let mut readout_inputs: Vec<Vec<Array2<f64>>> = Vec::with_capacity(horizon);
    let mut d_out: Vec<Array2<f64>> = Vec::with_capacity(horizon);
    let mut loss = 0.0;
    let scale = 1.0 / (horizon * n * hyper.f_out) as f64;

    for t in 0..horizon {
        let s = &shifts[t];
        let x = traj.steps[t].features.data();
        let mut d_t = Vec::with_capacity(k + 1);
        d_t.push(x.clone());
        for kk in 1..=k {
            d_t.push(if t == 0 {
                Array2::zeros((n, hyper.f_in))
            } else {
                s.dot(&diffused[t - 1][kk - 1])
            });
        }
        let mut pre = Array2::zeros((n, hyper.hidden));
        for (kk, d) in d_t.iter().enumerate() {
            pre += &d.dot(input.tap(kk));
        }
        if recurrent {
            let mut m_t = Vec::with_capacity(k + 1);
            m_t.push(if t == 0 {
                Array2::zeros((n, hyper.hidden))
            } else {
                hidden[t - 1].clone()
            });
            for kk in 1..=k {
                m_t.push(if t == 0 {
                    Array2::zeros((n, hyper.hidden))
                } else {
                    shifts[t - 1].dot(&memory[t - 1][kk - 1])
                });
            }
            let b = params.filter(1);
            for (kk, m) in m_t.iter().enumerate() {
                pre += &m.dot(b.tap(kk));
            }
            memory.push(m_t);
        }
        check_finite(&pre, t, "hidden pre-activation")?;
        let z = hyper.sigma.apply(pre);
        let mut e_t = Vec::with_capacity(hyper.k_out + 1);
        e_t.push(z.clone());
        for j in 1..=hyper.k_out {
            let prev = &e_t[j - 1];
            e_t.push(s.dot(prev));
        }
        let mut out = Array2::zeros((n, hyper.f_out));
        for (j, e) in e_t.iter().enumerate() {
            out += &e.dot(readout.tap(j));
        }
        let u = hyper.rho.apply(out);
        check_finite(&u, t, "network output")?;
        let err = &u - traj.steps[t].actions.data();
        loss += err.iter().map(|v| v * v).sum::<f64>() * scale;
        d_out.push(err * (2.0 * scale) * &hyper.rho.derivative_from_output(&u));
        diffused.push(d_t);
        hidden.push(z);
        readout_inputs.push(e_t);
    }

    // backward
    let mut grads = Grads::zeros(params);
    let readout_idx = if recurrent { 2 } else { 1 };
    // carry[kk] holds S(t)^T dM_{kk+1}(t+1) for the step being processed
    let mut carry: Vec<Array2<f64>> = vec![Array2::zeros((n, hyper.hidden)); k + 1];
    let mut dz_future: Array2<f64> = Array2::zeros((n, hyper.hidden));
    for t in (0..horizon).rev() {
        let s = &shifts[t];
        let dout = &d_out[t];
        let mut dz = dz_future;
        for j in 0..=hyper.k_out {
            grads.filters[readout_idx][j] += &readout_inputs[t][j].t().dot(dout);
            dz += &shift_t(s, dout.dot(&readout.tap(j).t()), j);
        }
        let dpre = dz * &hyper.sigma.derivative_from_output(&hidden[t]);
        check_finite(&dpre, t, "hidden gradient")?;
        for kk in 0..=k {
            grads.filters[0][kk] += &diffused[t][kk].t().dot(&dpre);
        }
        dz_future = Array2::zeros((n, hyper.hidden));
        if recurrent {
            let b = params.filter(1);
            let mut dm: Vec<Array2<f64>> = Vec::with_capacity(k + 1);
            for kk in 0..=k {
                grads.filters[1][kk] += &memory[t][kk].t().dot(&dpre);
                dm.push(dpre.dot(&b.tap(kk).t()) + &carry[kk]);
            }
            if t > 0 {
                let s_prev = &shifts[t - 1];
                dz_future = dm[0].clone();
                let mut next_carry = Vec::with_capacity(k + 1);
                for kk in 0..k {
                    next_carry.push(s_prev.t().dot(&dm[kk + 1]));
                }
                next_carry.push(Array2::zeros((n, hyper.hidden)));
                carry = next_carry;
            }
        }
    }
    Ok((loss, grads.flatten()))
}

/// Exact gradient of the mean batch loss with respect to every tap.
///
/// Returns `(loss, gradient)`. Trajectories are differentiated in parallel
/// and reduced in batch order so the result does not depend on scheduling.
pub fn compute_gradients(params: &ModelParams, batch: &[&Trajectory]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    let horizon = batch[0].len();
    if batch.iter().any(|t| t.len() != horizon) {
        return invalid("trajectories in a batch must share one length");
    }
    let parts: Result<Vec<(f64, Vec<f64>)>> = batch.par_iter().map(|t| trajectory_gradient(params, t)).collect();
    let parts = parts?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    for (l, g) in &parts {
        loss += l;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((loss * inv, grad))
}

/// First and second moment estimates of ADAM.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected ADAM update.
pub fn adam_step(
    state: &AdamState,
    params: &ModelParams,
    grad: &[f64],
    cfg: &TrainConfig,
) -> Result<(AdamState, ModelParams)> {
    let theta = params.flatten();
    if grad.len() != theta.len() || state.m.len() != theta.len() || state.v.len() != theta.len() {
        return invalid(format!(
            "gradient has {} entries, optimizer {}, parameters {}",
            grad.len(),
            state.m.len(),
            theta.len()
        ));
    }
    let t = state.t + 1;
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    let mut m = state.m.clone();
    let mut v = state.v.clone();
    let mut updated = theta;
    for i in 0..updated.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        updated[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    let params = ModelParams::from_flat(*params.hyper(), &updated)?;
    Ok((AdamState { m, v, t }, params))
}

/// Mean cumulative rollout cost of a controller from the initial states of
/// `trajs`; a failed rollout counts as infinite cost.
pub fn rollout_cost(params: &ModelParams, trajs: &[Trajectory], cfg: &FlockingConfig) -> f64 {
    let costs: Vec<f64> = trajs
        .par_iter()
        .map(|t| {
            let mut policy = GnnPolicy::new(params.clone());
            let run = rollout(&mut policy, t.initial_state(), cfg);
            if run.failed() {
                f64::INFINITY
            } else {
                run.cumulative_cost()
            }
        })
        .collect();
    costs.iter().sum::<f64>() / costs.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub train_mse: f64,
    pub val_cost: Option<f64>,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation cost.
    pub best: ModelParams,
    pub best_step: usize,
    pub best_val_cost: f64,
    /// Parameters after the last completed step.
    pub last: ModelParams,
    pub log: Vec<LogRow>,
    /// Set when training stopped early.
    pub error: Option<String>,
}

/// Imitation learning loop with periodic validation and model selection.
pub fn train_imitation(dataset: &Dataset, hyper: &ArchHyper, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let init = init_params(hyper, cfg.seed)?;
    train_from(dataset, init, cfg)
}

/// Same as [`train_imitation`] starting from given parameters.
pub fn train_from(dataset: &Dataset, init: ModelParams, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            best: init.clone(),
            best_step: 0,
            best_val_cost: f64::NAN,
            last: init,
            log: Vec::new(),
            error: None,
        });
    }
    if dataset.train.is_empty() || dataset.validation.is_empty() {
        return invalid("training and validation splits must be nonempty");
    }
    let started = Instant::now();
    let steps_per_epoch = dataset.train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_ba7c4);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();

    let mut params = init;
    let mut adam = AdamState::new(params.len());
    let mut best = params.clone();
    let mut best_step = 0;
    let mut best_val_cost = f64::INFINITY;
    let mut log = Vec::new();
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<&Trajectory> = chunk.iter().map(|&i| &dataset.train[i]).collect();
            let (loss, grad) = match compute_gradients(&params, &batch) {
                Ok(v) => v,
                Err(e) => return Ok(aborted(best, best_step, best_val_cost, params, log, e.to_string())),
            };
            if !loss.is_finite() || loss > cfg.max_loss {
                let msg = format!("training diverged at step {step}: loss {loss:e}");
                return Ok(aborted(best, best_step, best_val_cost, params, log, msg));
            }
            (adam, params) = adam_step(&adam, &params, &grad, cfg)?;
            let val_cost = if step % cfg.validate_every == 0 || step == total_steps {
                let cost = rollout_cost(&params, &dataset.validation, &dataset.flocking);
                if cost < best_val_cost || best_val_cost.is_infinite() && best_step == 0 {
                    best_val_cost = cost;
                    best = params.clone();
                    best_step = step;
                }
                Some(cost)
            } else {
                None
            };
            let elapsed = started.elapsed().as_secs_f64();
            log.push(LogRow {
                step,
                epoch,
                train_mse: loss,
                val_cost,
                wall_time: elapsed,
            });
            if cfg.wall_budget.is_some_and(|b| elapsed > b) {
                let msg = format!("wall-clock budget exhausted after step {step}");
                return Ok(aborted(best, best_step, best_val_cost, params, log, msg));
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_step,
        best_val_cost,
        last: params,
        log,
        error: None,
    })
}

fn aborted(
    best: ModelParams,
    best_step: usize,
    best_val_cost: f64,
    last: ModelParams,
    log: Vec<LogRow>,
    error: String,
) -> TrainOutcome {
    TrainOutcome {
        best,
        best_step,
        best_val_cost,
        last,
        log,
        error: Some(error),
    }
}
