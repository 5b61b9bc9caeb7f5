//! Decentralized controller architectures built from unit-delay filters.
//!
//! * GF: two stacked linear filters.
//! * GCNN: a filter followed by a pointwise nonlinearity, then a readout.
//! * GRNN: a hidden graph signal `Z(t) = sigma(A(X) + B(Z))` with readout `C`.
//!
//! None of the taps depend on the number of agents, so a parameter set
//! trained on one team size runs unchanged on any other.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gsp::{apply_delayed_filter, apply_filter, FilterTaps, GraphHistory, GraphSignal};
use crate::sim::{Observation, Policy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArchKind {
    Gf,
    Gcnn,
    Grnn,
}

impl ArchKind {
    pub const ALL: [ArchKind; 3] = [ArchKind::Gf, ArchKind::Gcnn, ArchKind::Grnn];

    pub fn code(self) -> u8 {
        match self {
            ArchKind::Gf => 0,
            ArchKind::Gcnn => 1,
            ArchKind::Grnn => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ArchKind::Gf),
            1 => Ok(ArchKind::Gcnn),
            2 => Ok(ArchKind::Grnn),
            _ => Err(Error::Format(format!("unknown architecture code {code}"))),
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchKind::Gf => "GF",
            ArchKind::Gcnn => "GCNN",
            ArchKind::Grnn => "GRNN",
        })
    }
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gf" => Ok(ArchKind::Gf),
            "gcnn" => Ok(ArchKind::Gcnn),
            "grnn" => Ok(ArchKind::Grnn),
            _ => invalid(format!("unknown architecture `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Tanh),
            _ => Err(Error::Format(format!("unknown activation code {code}"))),
        }
    }

    pub fn apply(self, x: Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.mapv_into(f64::tanh),
        }
    }

    /// Derivative expressed through the activation output `y`.
    pub fn derivative_from_output(self, y: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => Array2::ones(y.dim()),
            Activation::Tanh => y.mapv(|v| 1.0 - v * v),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchHyper {
    pub kind: ArchKind,
    pub f_in: usize,
    /// Hidden features `G`.
    pub hidden: usize,
    /// Hop order of the hidden filters.
    pub k: usize,
    pub f_out: usize,
    /// Hop order of the readout.
    pub k_out: usize,
    pub sigma: Activation,
    pub rho: Activation,
}

impl ArchHyper {
    /// Six flocking features in, two accelerations out, per-node readout.
    pub fn flocking(kind: ArchKind, hidden: usize, k: usize) -> Self {
        Self {
            kind,
            f_in: 6,
            hidden,
            k,
            f_out: 2,
            k_out: 0,
            sigma: match kind {
                ArchKind::Gf => Activation::Identity,
                ArchKind::Gcnn | ArchKind::Grnn => Activation::Tanh,
            },
            rho: Activation::Identity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.f_in == 0 || self.f_out == 0 {
            return invalid("feature counts must be positive");
        }
        if self.kind == ArchKind::Gf && self.sigma != Activation::Identity {
            return invalid("a graph filter has no hidden nonlinearity");
        }
        Ok(())
    }

    /// `(f_in, f_out, order)` of each filter bank, in parameter order.
    pub fn filter_shapes(&self) -> Vec<(usize, usize, usize)> {
        match self.kind {
            ArchKind::Gf | ArchKind::Gcnn => {
                vec![(self.f_in, self.hidden, self.k), (self.hidden, self.f_out, self.k_out)]
            }
            ArchKind::Grnn => vec![
                (self.f_in, self.hidden, self.k),
                (self.hidden, self.hidden, self.k),
                (self.hidden, self.f_out, self.k_out),
            ],
        }
    }
}

/// Number of learnable scalars.
pub fn param_count(hyper: &ArchHyper) -> usize {
    let readout = hyper.hidden * hyper.f_out * (hyper.k_out + 1);
    match hyper.kind {
        ArchKind::Gf | ArchKind::Gcnn => hyper.f_in * hyper.hidden * (hyper.k + 1) + readout,
        ArchKind::Grnn => (hyper.f_in * hyper.hidden + hyper.hidden * hyper.hidden) * (hyper.k + 1) + readout,
    }
}

/// Filter taps of one controller.
///
/// GF and GCNN hold `[layer1, readout]`; GRNN holds `[A, B, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    hyper: ArchHyper,
    filters: Vec<FilterTaps>,
}

impl ModelParams {
    pub fn new(hyper: ArchHyper, filters: Vec<FilterTaps>) -> Result<Self> {
        hyper.validate()?;
        let shapes = hyper.filter_shapes();
        if shapes.len() != filters.len() {
            return invalid(format!(
                "{} expects {} filters, got {}",
                hyper.kind,
                shapes.len(),
                filters.len()
            ));
        }
        for (i, (&(fi, fo, k), f)) in shapes.iter().zip(&filters).enumerate() {
            if f.f_in() != fi || f.f_out() != fo || f.order() != k {
                return invalid(format!(
                    "filter {i} is {}x{} of order {}, expected {fi}x{fo} of order {k}",
                    f.f_in(),
                    f.f_out(),
                    f.order()
                ));
            }
        }
        Ok(Self { hyper, filters })
    }

    pub fn zeros(hyper: ArchHyper) -> Result<Self> {
        hyper.validate()?;
        let filters = hyper
            .filter_shapes()
            .into_iter()
            .map(|(fi, fo, k)| FilterTaps::zeros(k, fi, fo))
            .collect();
        Ok(Self { hyper, filters })
    }

    pub fn hyper(&self) -> &ArchHyper {
        &self.hyper
    }

    pub fn filters(&self) -> &[FilterTaps] {
        &self.filters
    }

    pub fn filter(&self, i: usize) -> &FilterTaps {
        &self.filters[i]
    }

    pub fn len(&self) -> usize {
        self.filters.iter().map(FilterTaps::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All taps, filter by filter, tap by tap, row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for f in &self.filters {
            for tap in f.taps() {
                out.extend(tap.iter().copied());
            }
        }
        out
    }

    pub fn from_flat(hyper: ArchHyper, flat: &[f64]) -> Result<Self> {
        let mut params = Self::zeros(hyper)?;
        params.assign_flat(flat)?;
        Ok(params)
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return invalid(format!("expected {} parameters, got {}", self.len(), flat.len()));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return invalid("parameters must be finite");
        }
        let mut offset = 0;
        for f in &mut self.filters {
            for tap in f.taps_mut() {
                for v in tap.iter_mut() {
                    *v = flat[offset];
                    offset += 1;
                }
            }
        }
        Ok(())
    }
}

/// Extra factor on the initial GRNN hidden-to-hidden taps. Shifts by an
/// unnormalized adjacency grow like `degree^k`, so full-size recurrent taps
/// start the hidden state deep in saturation.
pub const RECURRENT_INIT_SCALE: f64 = 0.1;

/// Uniform fan-in scaled initialization, reproducible from `seed`.
///
/// A tap bank with `F` inputs and order `K` draws from
/// `U[-1/sqrt(F (K+1)), 1/sqrt(F (K+1))]`; the GRNN hidden-to-hidden bank
/// is further scaled by [`RECURRENT_INIT_SCALE`].
pub fn init_params(hyper: &ArchHyper, seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(*hyper)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (i, f) in params.filters.iter_mut().enumerate() {
        let scale = if hyper.kind == ArchKind::Grnn && i == 1 {
            RECURRENT_INIT_SCALE
        } else {
            1.0
        };
        let bound = scale / ((f.f_in() * (f.order() + 1)) as f64).sqrt();
        for tap in f.taps_mut() {
            tap.mapv_inplace(|_| rng.random_range(-bound..=bound));
        }
    }
    Ok(params)
}

fn check_kind(params: &ModelParams, allowed: &[ArchKind]) -> Result<()> {
    if !allowed.contains(&params.hyper.kind) {
        return invalid(format!("operation not defined for {}", params.hyper.kind));
    }
    Ok(())
}

/// Unit-delay GF/GCNN output `rho(C(sigma(H(X))))` at the newest time.
pub fn gcnn_forward(params: &ModelParams, hist: &GraphHistory) -> Result<GraphSignal> {
    check_kind(params, &[ArchKind::Gf, ArchKind::Gcnn])?;
    let Some((s_now, _)) = hist.latest() else {
        return invalid("empty input history");
    };
    let hyper = params.hyper;
    let hidden = apply_delayed_filter(hist, params.filter(0))?;
    let hidden = GraphSignal::from_trusted(hyper.sigma.apply(hidden.into_inner()));
    let out = apply_filter(s_now, &hidden, params.filter(1))?;
    Ok(GraphSignal::from_trusted(hyper.rho.apply(out.into_inner())))
}

/// Hidden state of a GRNN rollout.
#[derive(Debug, Clone)]
pub struct HiddenState {
    pub z: GraphSignal,
    /// `(S(tau), Z(tau))` for the most recent times.
    pub z_history: GraphHistory,
}

impl HiddenState {
    /// `Z(-1) = 0` with nothing communicated yet.
    pub fn new(nodes: usize, hyper: &ArchHyper) -> Self {
        Self {
            z: GraphSignal::zeros(nodes, hyper.hidden),
            z_history: GraphHistory::for_order(hyper.k),
        }
    }
}

/// One GRNN update: `Z(t) = sigma(A(X hist) + B(Z hist))`, `U(t) = rho(C(Z(t)))`.
///
/// `x_hist` must end at time `t` and `state.z_history` at `t - 1`; the `B`
/// filter runs on the hidden history with its own graphs
/// `S(t-1), S(t-2), ...`.
pub fn grnn_step(
    params: &ModelParams,
    x_hist: &GraphHistory,
    state: &HiddenState,
) -> Result<(HiddenState, GraphSignal)> {
    check_kind(params, &[ArchKind::Grnn])?;
    let Some((s_now, x_now)) = x_hist.latest() else {
        return invalid("empty input history");
    };
    if x_hist.clock() != state.z_history.clock() + 1 {
        return invalid(format!(
            "input history is at step {} but hidden history at step {}",
            x_hist.clock() as i64 - 1,
            state.z_history.clock() as i64 - 1
        ));
    }
    if state.z.nodes() != x_now.nodes() {
        return invalid("hidden state and input disagree on the number of nodes");
    }
    let hyper = params.hyper;
    let mut pre = apply_delayed_filter(x_hist, params.filter(0))?.into_inner();
    if !state.z_history.is_empty() {
        pre += apply_delayed_filter(&state.z_history, params.filter(1))?.data();
    }
    let z = GraphSignal::from_trusted(hyper.sigma.apply(pre));
    let out = apply_filter(s_now, &z, params.filter(2))?;
    let u = GraphSignal::from_trusted(hyper.rho.apply(out.into_inner()));
    let mut z_history = state.z_history.clone();
    z_history.push(s_now.clone(), z.clone())?;
    Ok((HiddenState { z, z_history }, u))
}

/// A trained controller run inside a simulation.
///
/// Each call to `act` is one exchange: the current graph and features join
/// the delayed history and the network output is returned.
#[derive(Debug, Clone)]
pub struct GnnPolicy {
    params: ModelParams,
    x_hist: GraphHistory,
    hidden: Option<HiddenState>,
}

impl GnnPolicy {
    pub fn new(params: ModelParams) -> Self {
        let x_hist = GraphHistory::for_order(params.hyper.k);
        Self {
            params,
            x_hist,
            hidden: None,
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }
}

impl Policy for GnnPolicy {
    fn reset(&mut self) {
        self.x_hist = GraphHistory::for_order(self.params.hyper.k);
        self.hidden = None;
    }

    fn act(&mut self, obs: &Observation<'_>) -> Result<GraphSignal> {
        self.x_hist.push(obs.shift.clone(), obs.features.clone())?;
        match self.params.hyper.kind {
            ArchKind::Gf | ArchKind::Gcnn => gcnn_forward(&self.params, &self.x_hist),
            ArchKind::Grnn => {
                let state = self
                    .hidden
                    .take()
                    .unwrap_or_else(|| HiddenState::new(obs.state.agents(), &self.params.hyper));
                let (next, u) = grnn_step(&self.params, &self.x_hist, &state)?;
                self.hidden = Some(next);
                Ok(u)
            }
        }
    }
}
