//! Test-side reference implementations.
//!
//! Everything here is written from the definitions with explicit loops and
//! dense matrix products, without the library's shift recursions, so it can
//! serve as an oracle for the library.

#![allow(dead_code)]

use gnnflock::arch::Activation;
use gnnflock::gsp::{build_disk_graph, GraphSignal};
use gnnflock::sim::{SwarmState, TrajectoryStep};
use gnnflock::{ArchKind, ModelParams, Trajectory};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

pub fn identity(n: usize) -> Mat {
    let mut m = zeros(n, n);
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b.first().map_or(0, Vec::len));
    let mut out = zeros(n, m);
    for i in 0..n {
        assert_eq!(a[i].len(), k);
        for j in 0..m {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[i][l] * b[l][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    let cols = a.first().map_or(0, Vec::len);
    (0..cols).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn to_mat(a: &Array2<f64>) -> Mat {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(r, s)| {
            assert_eq!(r.len(), s.len());
            r.iter().zip(s).map(|(x, y)| (x - y).abs())
        })
        .fold(0.0, f64::max)
}

/// `P` with `P[perm[i]][i] = 1`, so `(P^T X)` has row `i` equal to row
/// `perm[i]` of `X`.
pub fn perm_matrix(perm: &[usize]) -> Mat {
    let n = perm.len();
    let mut p = zeros(n, n);
    for (i, &pi) in perm.iter().enumerate() {
        p[pi][i] = 1.0;
    }
    p
}

fn activate(a: Activation, m: Mat) -> Mat {
    match a {
        Activation::Identity => m,
        Activation::Tanh => m.into_iter().map(|r| r.into_iter().map(f64::tanh).collect()).collect(),
    }
}

/// `S(t) S(t-1) ... S(t-k+1)`, the identity for `k = 0`.
fn shift_product(graphs: &[Mat], t: usize, k: usize) -> Mat {
    let n = graphs[t].len();
    let mut p = identity(n);
    for j in 0..k {
        p = matmul(&p, &graphs[t - j]);
    }
    p
}

/// `sum_k S(t)...S(t-k+1) X(t-k) H_k` with terms before time zero dropped.
pub fn delayed_filter(graphs: &[Mat], xs: &[Mat], taps: &[Mat], t: usize) -> Mat {
    let n = xs[t].len();
    let f_out = taps[0][0].len();
    let mut out = zeros(n, f_out);
    for (k, h) in taps.iter().enumerate() {
        if k > t {
            break;
        }
        let term = matmul(&matmul(&shift_product(graphs, t, k), &xs[t - k]), h);
        out = add(&out, &term);
    }
    out
}

/// Static filter `sum_k S^k X H_k`.
pub fn static_filter(s: &Mat, x: &Mat, taps: &[Mat]) -> Mat {
    let mut out = zeros(x.len(), taps[0][0].len());
    let mut sk = identity(s.len());
    for h in taps {
        out = add(&out, &matmul(&matmul(&sk, x), h));
        sk = matmul(&sk, s);
    }
    out
}

fn taps_of(params: &ModelParams, i: usize) -> Vec<Mat> {
    params.filter(i).taps().iter().map(to_mat).collect()
}

/// Outputs of a model along a sequence of graphs and inputs.
pub fn oracle_outputs(params: &ModelParams, graphs: &[Mat], xs: &[Mat]) -> Vec<Mat> {
    let hyper = *params.hyper();
    let horizon = xs.len();
    match hyper.kind {
        ArchKind::Gf | ArchKind::Gcnn => {
            let (h, c) = (taps_of(params, 0), taps_of(params, 1));
            (0..horizon)
                .map(|t| {
                    let hidden = activate(hyper.sigma, delayed_filter(graphs, xs, &h, t));
                    activate(hyper.rho, static_filter(&graphs[t], &hidden, &c))
                })
                .collect()
        }
        ArchKind::Grnn => {
            let (a, b, c) = (taps_of(params, 0), taps_of(params, 1), taps_of(params, 2));
            let n = xs[0].len();
            let mut zs: Vec<Mat> = Vec::new();
            let mut out = Vec::new();
            for t in 0..horizon {
                let mut pre = delayed_filter(graphs, xs, &a, t);
                // hidden filter: sum_k S(t-1)...S(t-k) Z(t-1-k) B_k
                for (k, bk) in b.iter().enumerate() {
                    if k + 1 > t {
                        break;
                    }
                    let mut p = identity(n);
                    for j in 1..=k {
                        p = matmul(&p, &graphs[t - j]);
                    }
                    pre = add(&pre, &matmul(&matmul(&p, &zs[t - 1 - k]), bk));
                }
                let z = activate(hyper.sigma, pre);
                out.push(activate(hyper.rho, static_filter(&graphs[t], &z, &c)));
                zs.push(z);
            }
            out
        }
    }
}

/// Per-entry squared error averaged over entries, steps and trajectories.
pub fn oracle_loss(params: &ModelParams, trajs: &[Trajectory]) -> f64 {
    let mut total = 0.0;
    for traj in trajs {
        let graphs: Vec<Mat> = traj.steps.iter().map(|s| to_mat(s.shift().matrix())).collect();
        let xs: Vec<Mat> = traj.steps.iter().map(|s| to_mat(s.features.data())).collect();
        let preds = oracle_outputs(params, &graphs, &xs);
        let mut per_traj = 0.0;
        for (u, step) in preds.iter().zip(&traj.steps) {
            let target = to_mat(step.actions.data());
            let mut sq = 0.0;
            let mut count = 0;
            for (r, s) in u.iter().zip(&target) {
                for (x, y) in r.iter().zip(s) {
                    sq += (x - y) * (x - y);
                    count += 1;
                }
            }
            per_traj += sq / count as f64;
        }
        total += per_traj / traj.len() as f64;
    }
    total / trajs.len() as f64
}

/// Random positions in a square, dense enough for a few neighbors each.
pub fn random_positions(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    let side = (n as f64).sqrt() * 1.3;
    Array2::from_shape_fn((n, 2), |_| rng.random_range(0.0..side))
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-scale..scale))
}

/// Synthetic trajectory with a fresh random graph per step, random inputs
/// and random targets.
pub fn synthetic_trajectory(seed: u64, n: usize, horizon: usize, f_in: usize) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut steps = Vec::with_capacity(horizon);
    let mut last = None;
    for _ in 0..horizon {
        let positions = random_positions(&mut rng, n);
        let s = build_disk_graph(positions.view(), 2.0).unwrap();
        let edges = s.edges().into_iter().map(|(i, j)| (i as u32, j as u32)).collect();
        let state = SwarmState::new(positions, random_matrix(&mut rng, n, 2, 1.0)).unwrap();
        steps.push(TrajectoryStep {
            state: state.clone(),
            edges,
            features: GraphSignal::new(random_matrix(&mut rng, n, f_in, 1.0)).unwrap(),
            actions: GraphSignal::new(random_matrix(&mut rng, n, 2, 1.0)).unwrap(),
            cost: 0.0,
        });
        last = Some(state);
    }
    Trajectory {
        sampling_time: 0.01,
        steps,
        final_state: last.unwrap(),
        failure: None,
    }
}

/// Central differences of `f` at `theta`.
pub fn central_differences(theta: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(theta.len());
    let mut work = theta.to_vec();
    for j in 0..theta.len() {
        work[j] = theta[j] + h;
        let plus = f(&work);
        work[j] = theta[j] - h;
        let minus = f(&work);
        work[j] = theta[j];
        out.push((plus - minus) / (2.0 * h));
    }
    out
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(b).max(1e-12)
}
