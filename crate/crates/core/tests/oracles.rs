mod common;

use common::*;
use gnnflock::arch::{grnn_step, HiddenState};
use gnnflock::gsp::{
    apply_delayed_filter, apply_filter, apply_filter_message_passing, build_disk_graph, khop_mask, shift, FilterTaps,
    GraphHistory, GraphSignal, Permutation, ShiftOperator,
};
use gnnflock::sim::{
    ca_potential, ca_potential_gradient, clip_acceleration, compute_state_features, expert_action, step_dynamics,
    velocity_variation_cost, FlockingConfig, SwarmState,
};
use gnnflock::train::{adam_step, compute_gradients, imitation_loss, predict_along, AdamState};
use gnnflock::{init_params, param_count, ArchHyper, ArchKind, ModelParams, TrainConfig, Trajectory};
use ndarray::{array, Array2};

fn sig(rows: &[&[f64]]) -> GraphSignal {
    GraphSignal::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn scalar_taps(values: &[f64]) -> FilterTaps {
    FilterTaps::new(values.iter().map(|&v| array![[v]]).collect()).unwrap()
}

#[test]
fn disk_graph_worked_example() {
    let s = build_disk_graph(array![[0.0, 0.0], [1.0, 0.0], [2.5, 0.0]].view(), 2.0).unwrap();
    assert_eq!(s.edges(), vec![(0, 1), (1, 2)]);
    assert_eq!(s.matrix(), &array![[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]]);
}

#[test]
fn one_shift_on_a_path_moves_mass_to_the_neighbor() {
    let path = ShiftOperator::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
    let y = shift(&path, &sig(&[&[1.0], &[0.0], &[0.0]])).unwrap();
    assert_eq!(y.data(), &array![[0.0], [1.0], [0.0]]);
    let swap = ShiftOperator::from_edges(2, &[(0, 1)]).unwrap();
    assert_eq!(
        shift(&swap, &sig(&[&[1.0], &[0.0]])).unwrap().data(),
        &array![[0.0], [1.0]]
    );
}

#[test]
fn first_order_filter_on_a_path() {
    let path = ShiftOperator::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
    let y = apply_filter(&path, &sig(&[&[1.0], &[0.0], &[0.0]]), &scalar_taps(&[1.0, 1.0])).unwrap();
    assert_eq!(y.data(), &array![[1.0], [1.0], [0.0]]);
}

#[test]
fn delayed_term_is_shifted_by_the_newest_graph_only() {
    let mut hist = GraphHistory::for_order(1);
    hist.push(ShiftOperator::zeros(2), sig(&[&[1.0], &[0.0]])).unwrap();
    hist.push(ShiftOperator::from_edges(2, &[(0, 1)]).unwrap(), sig(&[&[0.0], &[0.0]]))
        .unwrap();
    let y = apply_delayed_filter(&hist, &scalar_taps(&[0.0, 1.0])).unwrap();
    assert_eq!(y.data(), &array![[0.0], [1.0]]);
}

#[test]
fn cyclic_relabeling_matches_dense_products() {
    let perm = vec![1, 2, 0];
    let p = Permutation::new(perm.clone()).unwrap();
    let x = sig(&[&[1.0], &[2.0], &[3.0]]);
    let s = ShiftOperator::from_edges(3, &[(0, 1)]).unwrap();
    let pm = perm_matrix(&perm);
    let ptx = matmul(&transpose(&pm), &to_mat(x.data()));
    let ptsp = matmul(&matmul(&transpose(&pm), &to_mat(s.matrix())), &pm);
    assert_eq!(ptx, vec![vec![2.0], vec![3.0], vec![1.0]]);
    assert_eq!(to_mat(p.signal(&x).unwrap().data()), ptx);
    assert_eq!(to_mat(p.shift_operator(&s).unwrap().matrix()), ptsp);
}

#[test]
fn khop_neighborhoods_on_a_path() {
    let path = ShiftOperator::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
    assert_eq!(khop_mask(&path, 0, 0).unwrap().into_iter().collect::<Vec<_>>(), vec![0]);
    assert_eq!(
        khop_mask(&path, 0, 1).unwrap().into_iter().collect::<Vec<_>>(),
        vec![0, 1]
    );
    assert_eq!(
        khop_mask(&path, 0, 5).unwrap().into_iter().collect::<Vec<_>>(),
        vec![0, 1, 2]
    );
}

#[test]
fn parameter_counts() {
    let gf = ArchHyper::flocking(ArchKind::Gf, 32, 3);
    assert_eq!(param_count(&gf), 6 * 32 * 4 + 32 * 2);
    assert_eq!(init_params(&gf, 0).unwrap().flatten().len(), 832);
    assert_eq!(param_count(&ArchHyper::flocking(ArchKind::Grnn, 32, 3)), 4928);
}

#[test]
fn loss_hand_arithmetic() {
    let l = imitation_loss(&sig(&[&[0.0, 0.0]]), &sig(&[&[3.0, 4.0]])).unwrap();
    assert_eq!(l, 12.5);
}

#[test]
fn first_adam_step_moves_by_the_learning_rate() {
    let hyper = ArchHyper::flocking(ArchKind::Gf, 1, 0);
    let params = ModelParams::zeros(hyper).unwrap();
    let grad = vec![2.0; params.len()];
    let (state, next) = adam_step(&AdamState::new(params.len()), &params, &grad, &TrainConfig::default()).unwrap();
    assert_eq!(state.t, 1);
    for v in next.flatten() {
        assert!((v + 5e-4).abs() < 1e-10, "{v}");
    }
}

#[test]
fn double_integrator_step() {
    let cfg = FlockingConfig {
        agents: 1,
        ..FlockingConfig::default()
    };
    let state = SwarmState::new(array![[0.0, 0.0]], array![[1.0, 0.0]]).unwrap();
    let next = step_dynamics(&state, &sig(&[&[2.0, 0.0]]), &cfg).unwrap();
    assert!((next.positions[[0, 0]] - 0.0101).abs() < 1e-15);
    assert_eq!(next.positions[[0, 1]], 0.0);
    assert!((next.velocities[[0, 0]] - 1.02).abs() < 1e-15);
}

#[test]
fn clipping_rescales_the_norm() {
    let u = clip_acceleration(&sig(&[&[30.0, 40.0], &[3.0, 4.0]]), 10.0);
    assert!((u.data()[[0, 0]] - 6.0).abs() < 1e-12);
    assert!((u.data()[[0, 1]] - 8.0).abs() < 1e-12);
    assert_eq!(u.data().row(1).to_vec(), vec![3.0, 4.0]);
}

#[test]
fn collision_gradient_value_and_finite_differences() {
    let g = ca_potential_gradient([0.5, 0.0], [0.0, 0.0], 1.0).unwrap();
    assert!((g[0] + 20.0).abs() < 1e-12 && g[1] == 0.0, "{g:?}");
    assert_eq!(ca_potential_gradient([1.5, 0.0], [0.0, 0.0], 1.0).unwrap(), [0.0, 0.0]);

    let h = 1e-6;
    for ri in [[0.5, 0.0], [0.3, -0.4], [-0.2, 0.7]] {
        let g = ca_potential_gradient(ri, [0.0, 0.0], 1.0).unwrap();
        for axis in 0..2 {
            let (mut p, mut m) = (ri, ri);
            p[axis] += h;
            m[axis] -= h;
            let fd = (ca_potential(p, [0.0, 0.0], 1.0) - ca_potential(m, [0.0, 0.0], 1.0)) / (2.0 * h);
            assert!(
                (fd - g[axis]).abs() < 1e-5 * g[axis].abs().max(1.0),
                "{fd} vs {}",
                g[axis]
            );
        }
    }
}

#[test]
fn expert_on_two_agents_out_of_collision_range() {
    let cfg = FlockingConfig {
        agents: 2,
        ..FlockingConfig::default()
    };
    let state = SwarmState::new(array![[0.0, 0.0], [1.5, 0.0]], array![[1.0, 0.0], [0.0, 0.0]]).unwrap();
    let u = expert_action(&state, &cfg).unwrap();
    assert_eq!(u.data(), &array![[-1.0, 0.0], [1.0, 0.0]]);
}

#[test]
fn features_at_unit_distance() {
    let state = SwarmState::new(array![[1.0, 0.0], [0.0, 0.0]], array![[0.5, 0.5], [0.5, 0.5]]).unwrap();
    let s = build_disk_graph(state.positions.view(), 2.0).unwrap();
    let x = compute_state_features(&state, &s).unwrap();
    assert_eq!(x.data().row(0).to_vec(), vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
}

#[test]
fn cost_of_opposite_velocities() {
    assert_eq!(velocity_variation_cost(array![[1.0, 0.0], [-1.0, 0.0]].view()), 1.0);
}

#[test]
fn dense_filter_matches_both_library_routes() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
    for n in [1, 4, 9, 17] {
        let s = build_disk_graph(random_positions(&mut rng, n).view(), 2.0).unwrap();
        let x = random_matrix(&mut rng, n, 3, 1.0);
        let taps: Vec<Array2<f64>> = (0..4).map(|_| random_matrix(&mut rng, 3, 2, 1.0)).collect();
        let h = FilterTaps::new(taps.clone()).unwrap();
        let want = static_filter(
            &to_mat(s.matrix()),
            &to_mat(&x),
            &taps.iter().map(to_mat).collect::<Vec<_>>(),
        );
        let x = GraphSignal::new(x).unwrap();
        assert!(max_abs_diff(&to_mat(apply_filter(&s, &x, &h).unwrap().data()), &want) < 1e-12);
        assert!(max_abs_diff(&to_mat(apply_filter_message_passing(&s, &x, &h).unwrap().data()), &want) < 1e-12);
    }
}

#[test]
fn brute_force_forward_matches_library() {
    for (c, kind) in ArchKind::ALL.into_iter().enumerate() {
        for k in 0..4 {
            let params = init_params(&ArchHyper::flocking(kind, 5, k), 40 + k as u64).unwrap();
            let traj = synthetic_trajectory(c as u64 * 10 + k as u64, 7, 8, 6);
            let graphs: Vec<Mat> = traj.steps.iter().map(|s| to_mat(s.shift().matrix())).collect();
            let xs: Vec<Mat> = traj.steps.iter().map(|s| to_mat(s.features.data())).collect();
            let want = oracle_outputs(&params, &graphs, &xs);
            let got = predict_along(&params, &traj).unwrap();
            for (t, (w, g)) in want.iter().zip(&got).enumerate() {
                let err = max_abs_diff(w, &to_mat(g.data()));
                assert!(err < 1e-10, "{kind} K={k} t={t}: {err}");
            }
        }
    }
}

#[test]
fn grnn_without_recurrence_is_memoryless() {
    let hyper = ArchHyper::flocking(ArchKind::Grnn, 4, 2);
    let mut params = init_params(&hyper, 8).unwrap();
    let mut flat = params.flatten();
    let a_len = 6 * 4 * 3;
    let b_len = 4 * 4 * 3;
    flat[a_len..a_len + b_len].iter_mut().for_each(|v| *v = 0.0);
    params.assign_flat(&flat).unwrap();
    let traj = synthetic_trajectory(5, 6, 6, 6);
    let graphs: Vec<Mat> = traj.steps.iter().map(|s| to_mat(s.shift().matrix())).collect();
    let xs: Vec<Mat> = traj.steps.iter().map(|s| to_mat(s.features.data())).collect();
    let a: Vec<Mat> = params.filter(0).taps().iter().map(to_mat).collect();
    let c: Vec<Mat> = params.filter(2).taps().iter().map(to_mat).collect();

    let mut hist = GraphHistory::for_order(2);
    let mut state = HiddenState::new(6, &hyper);
    for (t, step) in traj.steps.iter().enumerate() {
        hist.push(step.shift(), step.features.clone()).unwrap();
        let (next, u) = grnn_step(&params, &hist, &state).unwrap();
        let z: Mat = delayed_filter(&graphs, &xs, &a, t)
            .into_iter()
            .map(|r| r.into_iter().map(f64::tanh).collect())
            .collect();
        assert!(max_abs_diff(&to_mat(u.data()), &matmul(&z, &c[0])) < 1e-12);
        state = next;
    }
}

#[test]
fn closed_form_gradient_of_the_zero_hop_linear_filter() {
    // K = 0 graph filter: U = X H C, a two-factor linear regression
    let hyper = ArchHyper::flocking(ArchKind::Gf, 3, 0);
    let params = init_params(&hyper, 2).unwrap();
    let trajs: Vec<Trajectory> = (0..3).map(|i| synthetic_trajectory(100 + i, 5, 4, 6)).collect();
    let h = to_mat(params.filter(0).tap(0));
    let c = to_mat(params.filter(1).tap(0));
    let (mut gh, mut gc) = (zeros(6, 3), zeros(3, 2));
    let scale = 2.0 / (trajs.len() as f64 * 4.0 * 5.0 * 2.0);
    for traj in &trajs {
        for step in &traj.steps {
            let x = to_mat(step.features.data());
            let xh = matmul(&x, &h);
            let resid: Mat = add(&matmul(&xh, &c), &to_mat(&(-step.actions.data())));
            gc = add(&gc, &matmul(&transpose(&xh), &resid));
            gh = add(&gh, &matmul(&matmul(&transpose(&x), &resid), &transpose(&c)));
        }
    }
    let want: Vec<f64> = gh.iter().chain(&gc).flatten().map(|v| v * scale).collect();
    let refs: Vec<&Trajectory> = trajs.iter().collect();
    let (_, got) = compute_gradients(&params, &refs).unwrap();
    assert!(relative_error(&got, &want) < 1e-12, "{:?}\n{:?}", got, want);
}

#[test]
fn exact_gradient_matches_differences_of_the_oracle_loss() {
    for kind in ArchKind::ALL {
        let hyper = ArchHyper::flocking(kind, 3, 2);
        let params = init_params(&hyper, 9).unwrap();
        let trajs: Vec<Trajectory> = (0..2).map(|i| synthetic_trajectory(200 + i, 5, 6, 6)).collect();
        let refs: Vec<&Trajectory> = trajs.iter().collect();
        let (loss, grad) = compute_gradients(&params, &refs).unwrap();
        assert!((loss - oracle_loss(&params, &trajs)).abs() < 1e-12);
        let fd = central_differences(&params.flatten(), 1e-5, |theta| {
            oracle_loss(&ModelParams::from_flat(hyper, theta).unwrap(), &trajs)
        });
        let err = relative_error(&grad, &fd);
        assert!(err < 1e-6, "{kind}: {err}");
    }
}
