//! Acceptance suite: one test per shipped guarantee, each printing a
//! PASS/FAIL line. The heavyweight learning criteria live at the bottom and
//! train real models; expect the full suite to take a while.

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use stiffnode::autodiff::{finite_diff_check, ParamStore, Tape};
use stiffnode::expmv::{self, ExpmvOptions, MatrixOp};
use stiffnode::integrators::{self, TimeGrid};
use stiffnode::linalg;
use stiffnode::models::{
    empirical_lipschitz, AeSpec, HurwitzLinear, LipschitzMlp, ModelConfig, NodeModel, NonlinSpec,
    Nonlinearity,
};
use stiffnode::problems::{self, transient_diagnostics};
use stiffnode::training::{self, IntegratorKind};

fn random_matrix_with_norm(rng: &mut ChaCha8Rng, n: usize, norm: f64) -> Array2<f64> {
    let mut a = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
    let est = linalg::spectral_norm_exact(&a);
    a.mapv_inplace(|x| x * norm / est);
    a
}

#[test]
fn criterion_01_expmv_matches_dense_oracle() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for case in 0..500 {
        let n = rng.gen_range(2..=16);
        let norm = rng.gen_range(0.1..=10.0);
        let a = random_matrix_with_norm(&mut rng, n, norm);
        let b = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
        let t = rng.gen_range(0.01..=10.0);

        let mut tape: Tape<f64> = Tape::new();
        let av = tape.constant_matrix(a.clone());
        let bv = tape.constant_vector(b.clone());
        let op = MatrixOp { a: av };
        let cfg = expmv::select_s_m(t, linalg::spectral_norm_estimate(&a, 20), &ExpmvOptions::default());
        let out = expmv::expmv(&mut tape, &op, bv, t, &cfg).unwrap();
        let got = tape.value(out).as_vector().unwrap().clone();

        let want = expmv::phi_dense(0, &a.mapv(|x| x * t)).unwrap().dot(&b);
        let rel = (&got - &want).mapv(f64::abs).sum() / want.mapv(f64::abs).sum().max(1e-300);
        worst = worst.max(rel);
        assert!(rel < 1e-9, "case {case}: n={n} norm={norm:.2} t={t:.2} rel err {rel:.2e}");
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "runtime {elapsed:.1}s exceeds 10s");
    println!("ACCEPTANCE 1 PASS: 500 exponential actions within 1e-9 of the dense oracle (worst {worst:.2e}, {elapsed:.2}s)");
}

#[test]
fn criterion_02_augmented_step_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let n = rng.gen_range(2..=16);
        let norm = rng.gen_range(0.1..=3.0);
        let a = random_matrix_with_norm(&mut rng, n, norm);
        let u0 = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
        let g0 = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
        let h = rng.gen_range(0.1..=1.2);

        let mut tape: Tape<f64> = Tape::new();
        let av = tape.constant_matrix(a.clone());
        let uv = tape.constant_vector(u0.clone());
        let gv = tape.constant_vector(g0.clone());
        let op = MatrixOp { a: av };
        let cfg = expmv::select_s_m(h, linalg::spectral_norm_estimate(&a, 20), &ExpmvOptions::default());
        let out = expmv::etd1_augmented_step(&mut tape, &op, gv, uv, h, &cfg).unwrap();
        let got = tape.value(out).as_vector().unwrap().clone();

        let ha = a.mapv(|x| x * h);
        let want = expmv::phi_dense(0, &ha).unwrap().dot(&u0)
            + expmv::phi_dense(1, &ha).unwrap().dot(&g0).mapv(|x| x * h);
        let rel = (&got - &want).mapv(f64::abs).sum() / want.mapv(f64::abs).sum().max(1e-300);
        worst = worst.max(rel);
        assert!(rel < 1e-9, "case {case}: rel err {rel:.2e}");
    }
    println!("ACCEPTANCE 2 PASS: 200 augmented steps equal e^(hA)u + h phi1(hA)g within 1e-9 (worst {worst:.2e})");
}

#[test]
fn criterion_03_hurwitz_spectral_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst_margin = f64::NEG_INFINITY;
    for draw in 0..1000 {
        let n = rng.gen_range(2..=10);
        let mu = [-1.0, 0.0, 0.3][draw % 3];
        let h = HurwitzLinear::new(n, mu, "h");
        let mut store: ParamStore<f64> = ParamStore::new();
        h.init(&mut store, 0.7, &mut rng).unwrap();
        for name in h.param_names() {
            let e = store.get_mut(&name).unwrap();
            if let stiffnode::tensor::Value::Vector(v) = &mut e.value {
                v.mapv_inplace(|_| rng.gen_range(-3.0..3.0));
            }
        }
        let a = h.assemble_plain(&store).unwrap();
        let max_re = linalg::max_real_eigenvalue(&a).unwrap();
        worst_margin = worst_margin.max(max_re - mu);
        assert!(max_re <= mu + 1e-8, "draw {draw}: n={n} mu={mu} max Re = {max_re}");
    }
    println!("ACCEPTANCE 3 PASS: 1000 draws keep max Re(lambda) <= mu + 1e-8 (worst margin {worst_margin:.2e})");
}

#[test]
fn criterion_04_lipschitz_guarantee() {
    let mut worst_ratio = 0.0f64;
    for (pi, p) in [1usize, 2, 3].iter().enumerate() {
        for (li, l) in [0.5f64, 1.0, 2.0].iter().enumerate() {
            for (si, scale) in [1e-3f64, 1e-2, 1e-1, 1.0, 10.0].iter().enumerate() {
                let lip = LipschitzMlp::new(4, 100, *p, *l, "g");
                let mut store: ParamStore<f64> = ParamStore::new();
                let mut rng =
                    ChaCha8Rng::seed_from_u64(404 + (pi * 100 + li * 10 + si) as u64);
                lip.mlp.init(&mut store, *scale, &mut rng).unwrap();
                let model = NodeModel {
                    linear: HurwitzLinear::new(4, 0.0, "h"),
                    nonlinear: Nonlinearity::Lipschitz(lip),
                    autoencoder: None,
                };
                let f = model.nonlinear_fn(&store);
                let est = empirical_lipschitz(f, 4, 10_000, 2.0, 77).unwrap();
                worst_ratio = worst_ratio.max(est / l);
                assert!(
                    est <= l * (1.0 + 1e-9),
                    "p={p} L={l} scale={scale}: empirical {est} exceeds bound"
                );
            }
        }
    }
    println!("ACCEPTANCE 4 PASS: empirical Lipschitz <= L(1+1e-9) across 45 configurations (worst ratio {worst_ratio:.6})");
}

#[test]
fn criterion_05_rollout_gradients() {
    let cfg = ModelConfig {
        state_dim: 2,
        latent_dim: 2,
        mu: 0.0,
        nonlin: NonlinSpec::Lipschitz { lipschitz: 1.0, width: 8, layers: 2 },
        autoencoder: Some(AeSpec { hidden: 0, layers: 1 }),
        init_scale: 0.3,
        hurwitz_init_diag: 0.7,
        seed: 505,
    };
    let (model, store) = cfg.build::<f64>().unwrap();
    let grid = TimeGrid::uniform(0.0, 0.9, 4).unwrap();
    let opts = ExpmvOptions::default();
    let truth =
        integrators::etd1_rollout(&model, &store, &ndarray::arr1(&[0.7, -0.4]), &grid, &opts)
            .unwrap();
    let mut data = truth.states.clone();
    data.mapv_inplace(|x| x + 0.05);
    let report = finite_diff_check(
        &store,
        |tape, store| {
            training::batch_loss_sum_tape(
                tape,
                &model,
                store,
                &grid,
                &[&data],
                IntegratorKind::Etd1,
                &opts,
            )
        },
        1e-6,
        1e-5,
    )
    .unwrap();
    assert!(report.all_ok(), "worst relative error {}", report.max_rel_err);
    println!(
        "ACCEPTANCE 5 PASS: rollout-loss gradients match central differences for all {} parameters (worst {:.2e})",
        report.per_param.len(),
        report.max_rel_err
    );
}

#[test]
fn criterion_06_transient_growth_figure() {
    let start = std::time::Instant::now();
    let a_bump = problems::a_bump::<f64>();
    let a_decay = problems::a_decay::<f64>();

    let (alpha_b, gamma_b) = transient_diagnostics(&a_bump).unwrap();
    let (alpha_d, gamma_d) = transient_diagnostics(&a_decay).unwrap();
    assert!((alpha_b + 2.0).abs() < 1e-9, "alpha(bump) = {alpha_b}");
    assert!((alpha_d + 2.0).abs() < 1e-9, "alpha(decay) = {alpha_d}");
    assert!((gamma_b - 3.0).abs() < 1e-12, "gamma(bump) = {gamma_b}");
    assert!((gamma_d + 1.5).abs() < 1e-12, "gamma(decay) = {gamma_d}");

    let mut bump_max = 0.0f64;
    let mut decay_max = 0.0f64;
    for k in 1..=100 {
        let t = 2.0 * k as f64 / 100.0;
        let eb = linalg::expm_dense(&a_bump.mapv(|x| x * t)).unwrap();
        let ed = linalg::expm_dense(&a_decay.mapv(|x| x * t)).unwrap();
        bump_max = bump_max.max(linalg::spectral_norm_exact(&eb));
        decay_max = decay_max.max(linalg::spectral_norm_exact(&ed));
    }
    assert!(bump_max > 1.0, "||e^(t A_bump)|| never exceeded 1 (max {bump_max})");
    assert!(decay_max <= 1.0 + 1e-12, "||e^(t A_decay)|| grew to {decay_max}");
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 1.0, "runtime {elapsed:.2}s exceeds 1s");
    println!("ACCEPTANCE 6 PASS: transient growth signature reproduced (bump max {bump_max:.3}, decay max {decay_max:.3}, {elapsed:.2}s)");
}

#[test]
fn criterion_12_gronwall_diagnostic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1212);
    for pair in 0..50 {
        let n = rng.gen_range(2..=6);
        let norm_a = rng.gen_range(0.3..1.5);
        let norm_da = rng.gen_range(0.01..0.2);
        let a = random_matrix_with_norm(&mut rng, n, norm_a);
        let da = random_matrix_with_norm(&mut rng, n, norm_da);
        let a2 = &a + &da;
        let u0 = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));

        let a_ref = a.clone();
        let u = integrators::rkf45_solve(|x: &Array1<f64>| a_ref.dot(x), &u0, (0.0, 2.0), 1e-10)
            .unwrap();
        let a2_ref = a2.clone();
        let v = integrators::rkf45_solve(|x: &Array1<f64>| a2_ref.dot(x), &u0, (0.0, 2.0), 1e-10)
            .unwrap();

        let a_norm = linalg::spectral_norm_exact(&a);
        let da_norm = linalg::spectral_norm_exact(&da);
        // resample both onto a shared grid and bound ||v|| along the way
        let sample = TimeGrid::uniform(0.0, 2.0, 41).unwrap();
        let rhs_u = |x: &Array1<f64>| a.dot(x);
        let rhs_v = |x: &Array1<f64>| a2.dot(x);
        let us = resample(&u, &sample, &rhs_u);
        let vs = resample(&v, &sample, &rhs_v);
        let v_bound = vs
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0f64, f64::max);

        for (k, &t) in sample.times().iter().enumerate() {
            let diff: f64 = (0..n).map(|j| (us[(k, j)] - vs[(k, j)]).powi(2)).sum::<f64>().sqrt();
            let bound = training::gronwall_bound(0.0, a_norm, da_norm, 0.0, 0.0, v_bound, t, 0.0);
            assert!(
                diff <= bound + 1e-12,
                "pair {pair} at t={t}: divergence {diff} exceeds bound {bound}"
            );
        }
    }
    println!("ACCEPTANCE 12 PASS: measured divergence below the a-priori bound for 50 perturbed pairs");
}

fn resample(
    traj: &integrators::Trajectory<f64>,
    target: &TimeGrid<f64>,
    rhs: &impl Fn(&Array1<f64>) -> Array1<f64>,
) -> Array2<f64> {
    let src = traj.grid.times();
    let mut out = Array2::zeros((target.len(), traj.dim()));
    let mut k = 0usize;
    for (row, &t) in target.times().iter().enumerate() {
        while k + 1 < src.len() - 1 && src[k + 1] < t {
            k += 1;
        }
        let (t0, t1) = (src[k], src[k + 1]);
        let y0 = traj.state(k);
        let y1 = traj.state(k + 1);
        let yi = if t <= t0 {
            y0
        } else if t >= t1 {
            y1
        } else {
            integrators::hermite_interp(t0, &y0, &rhs(&y0), t1, &y1, &rhs(&y1), t)
        };
        out.row_mut(row).assign(&yi);
    }
    out
}

#[test]
fn criterion_13_lyapunov_stability() {
    // mu = -0.5, zero-bias Lipschitz nets with L below the numerically
    // estimated bound |mu| / cond(T)
    let mut rng = ChaCha8Rng::seed_from_u64(1313);
    let n = 4;
    let mut checked = 0;
    let mut attempts = 0;
    while checked < 4 && attempts < 40 {
        attempts += 1;
        let h = HurwitzLinear::new(n, -0.5, "hurwitz");
        let mut store: ParamStore<f64> = ParamStore::new();
        h.init(&mut store, 0.7, &mut rng).unwrap();
        let a = h.assemble_plain(&store).unwrap();
        let Ok(kappa) = linalg::eigenbasis_condition(&a) else { continue };
        if kappa > 8.0 {
            continue;
        }
        let l_bound = 0.5 / kappa;
        let l_use = 0.5 * l_bound;

        let lip = LipschitzMlp::new(n, 16, 2, l_use, "g");
        lip.mlp.init(&mut store, 1.0, &mut rng).unwrap(); // zero biases by construction
        let model =
            NodeModel { linear: h, nonlinear: Nonlinearity::Lipschitz(lip), autoencoder: None };

        let grid = TimeGrid::uniform(0.0, 10.0, 41).unwrap();
        let opts = ExpmvOptions::default();
        for ic_case in 0..25 {
            let u0 = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
            let traj = integrators::etd1_rollout(&model, &store, &u0, &grid, &opts).unwrap();
            let n0 = traj.state(0).mapv(|x: f64| x * x).sum().sqrt();
            let n1 = traj.state(40).mapv(|x: f64| x * x).sum().sqrt();
            assert!(
                n1 < n0,
                "model {checked} ic {ic_case}: ||u(10)|| = {n1} not below ||u(0)|| = {n0} (kappa {kappa:.2}, L {l_use:.3})"
            );
        }
        checked += 1;
    }
    assert_eq!(checked, 4, "not enough well-conditioned draws");
    println!("ACCEPTANCE 13 PASS: 100 perturbed rollouts contract below their initial norm under the estimated Lipschitz budget");
}

// ---- learning criteria -----------------------------------------------------

use stiffnode::problems::{weakly_nonlinear_dataset, WeaklyNonlinearOptions};
use stiffnode::training::TrainConfig;

/// Mean over initial conditions of the trajectory-RMS deviation between a
/// model rollout and the resampled ground truth on a shared grid.
fn mean_rollout_error(
    model: &NodeModel,
    store: &ParamStore<f64>,
    integrator: IntegratorKind,
    opts: &ExpmvOptions<f64>,
    truth: &[Array2<f64>],
    grid: &TimeGrid<f64>,
) -> f64 {
    use rayon::prelude::*;
    let total: f64 = truth
        .par_iter()
        .map(|block| {
            let ic = block.row(0).to_owned();
            let pred = match integrator {
                IntegratorKind::Etd1 => {
                    integrators::etd1_rollout(model, store, &ic, grid, opts).unwrap()
                }
                IntegratorKind::ImexSsp2 => {
                    training::imex_model_rollout(model, store, &ic, grid).unwrap()
                }
            };
            let mut ss = 0.0;
            for k in 0..grid.len() {
                for j in 0..block.ncols() {
                    ss += (pred.states[(k, j)] - block[(k, j)]).powi(2);
                }
            }
            (ss / (grid.len() * block.ncols()) as f64).sqrt()
        })
        .sum();
    total / truth.len() as f64
}

#[test]
fn criterion_07_exponential_beats_imex_on_transient_growth() {
    let eval_grid = TimeGrid::uniform(0.0, 10.0, 51).unwrap();

    for &epsilon in &[0.0f64, 1.0] {
        let data_opts = WeaklyNonlinearOptions { epsilon, ..Default::default() };
        let ds = weakly_nonlinear_dataset::<f64>(1000, &data_opts, 0.0, 7).unwrap();

        // ground truth resampled onto the uniform deployment grid
        let a = problems::a_bump::<f64>();
        let rhs = |x: &Array1<f64>| problems::weakly_nonlinear_rhs(x, epsilon, &a);
        let truth: Vec<Array2<f64>> = (0..ds.n_traj())
            .map(|i| {
                let traj = ds.trajectory(i).unwrap();
                resample(&traj, &eval_grid, &rhs)
            })
            .collect();

        let train_indices = if epsilon == 0.0 {
            vec![0usize, 50]
        } else {
            vec![0usize, 10, 20, 30, 40, 50]
        };
        let nonlin = if epsilon == 0.0 {
            NonlinSpec::Bilinear { rank: 2 }
        } else {
            NonlinSpec::Lipschitz { lipschitz: 2.0, width: 100, layers: 2 }
        };

        let mut wins = 0;
        for seed in 0..5u64 {
            let mut errs = [0.0f64; 2];
            for (slot, integrator) in [IntegratorKind::Etd1, IntegratorKind::ImexSsp2]
                .into_iter()
                .enumerate()
            {
                let model_cfg = ModelConfig {
                    state_dim: 2,
                    latent_dim: 2,
                    mu: 0.0,
                    nonlin: nonlin.clone(),
                    autoencoder: None,
                    init_scale: 0.1,
                    hurwitz_init_diag: 0.7,
                    seed,
                };
                let (model, mut store) = model_cfg.build::<f64>().unwrap();
                let cfg = TrainConfig {
                    learning_rate: 0.01,
                    lr_decay: 1.0,
                    decay_every: 1,
                    batch_size: 1000,
                    iterations: 1000,
                    integrator,
                    expmv_tol: 1e-10,
                    expmv_s_rule_c: 1.0,
                    seed,
                    train_indices: Some(train_indices.clone()),
                    chunk_size: 500,
                };
                training::train(&ds, &model, &mut store, &cfg).unwrap();
                let opts = cfg.expmv_options::<f64>();
                errs[slot] =
                    mean_rollout_error(&model, &store, integrator, &opts, &truth, &eval_grid);
            }
            println!(
                "  epsilon {epsilon} seed {seed}: exponential {:.4e} vs imex {:.4e}",
                errs[0], errs[1]
            );
            if errs[0] < errs[1] {
                wins += 1;
            }
        }
        assert!(wins >= 4, "epsilon {epsilon}: exponential training won only {wins}/5 seeds");
        println!("ACCEPTANCE 7 ({epsilon}): exponential-integrator training beat the implicit-explicit baseline in {wins}/5 seeds");
    }
    println!("ACCEPTANCE 7 PASS");
}
