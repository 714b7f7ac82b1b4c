//! End-to-end acceptance suite. Each test prints one `PASS`/`FAIL` line
//! so the whole run can be skimmed from the captured output
//! (`cargo test --test acceptance -- --nocapture`).
//!
//! Heavyweight fixtures (the 5000-scenario dataset and the four trained
//! surrogates) are shared across tests through lazy statics.

mod common;

use std::panic::AssertUnwindSafe;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use icnn_opf::apps::{
    before_after_csv, before_after_table, config_echo, emit_report, run_mse_comparison,
    solve_coordinated_pq, synthesize_violation_context, train_from_dataset, verify_profile,
    ExperimentReport,
};
use icnn_opf::dataset::{
    build_dataset, sample_scenarios, save_dataset, LabeledDataset, SampleRanges, TargetKind,
};
use icnn_opf::icnn::{
    augment_input, embed_plain_in_augmented, save_model, IcnnModel, TrainConfig,
};
use icnn_opf::network::{parse_case, NetworkCase};
use icnn_opf::opf::{case_bounds, devices_from_case, Context, ObjectiveKind, OpfProblem, QuadraticCost};
use icnn_opf::powerflow::{newton_power_flow, Injection, DEFAULT_TOL};
use icnn_opf::saddle::{
    phi_eval, regularization_sweep, solve_saddle_observed, ConstraintEval, SaddleProblem,
    SolverConfig,
};

fn criterion<F: FnOnce()>(name: &str, f: F) {
    let start = Instant::now();
    let result = std::panic::catch_unwind(AssertUnwindSafe(f));
    let secs = start.elapsed().as_secs_f64();
    match result {
        Ok(()) => println!("acceptance {name}: PASS ({secs:.1}s)"),
        Err(e) => {
            println!("acceptance {name}: FAIL ({secs:.1}s)");
            std::panic::resume_unwind(e);
        }
    }
}

static CASE: Lazy<NetworkCase> =
    Lazy::new(|| parse_case(include_str!("../../../cases/ieee33.case")).unwrap());

static DATASET: Lazy<LabeledDataset> = Lazy::new(|| {
    let set = sample_scenarios(&CASE, 5000, &SampleRanges::default(), 42).unwrap();
    build_dataset(&CASE, &set, DEFAULT_TOL).unwrap()
});

struct Surrogates {
    icnn_v: IcnnModel,
    icnn_p: IcnnModel,
    mlp_v: IcnnModel,
    mlp_p: IcnnModel,
}

fn vdev_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        lr_decay: 0.9975,
        momentum: 0.9,
        epochs: 1200,
        batch_size: 64,
        seed: 1,
        validation_fraction: 0.1,
    }
}

fn pdev_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        lr_decay: 0.997,
        momentum: 0.9,
        epochs: 1000,
        batch_size: 64,
        seed: 2,
        validation_fraction: 0.1,
    }
}

static SURROGATES: Lazy<Surrogates> = Lazy::new(|| {
    let ds = &*DATASET;
    let train = |target, convex, cfg: &TrainConfig| {
        train_from_dataset(ds, target, &[64, 64], 5.0, convex, cfg)
            .unwrap()
            .0
    };
    Surrogates {
        icnn_v: train(TargetKind::VoltageDeviation, true, &vdev_train_config()),
        icnn_p: train(TargetKind::FlowDeviation, true, &pdev_train_config()),
        mlp_v: train(TargetKind::VoltageDeviation, false, &vdev_train_config()),
        mlp_p: train(TargetKind::FlowDeviation, false, &pdev_train_config()),
    }
});

/// min x^2 subject to 1 - x <= 0 on the box [-10, 10]. The regularized
/// saddle is x* = 1 / (1 + epsilon (2 + upsilon)), lambda* = (2 + upsilon) x*.
struct OneD;

impl SaddleProblem for OneD {
    fn dim_x(&self) -> usize {
        1
    }
    fn n_constraints_v(&self) -> usize {
        1
    }
    fn n_constraints_p(&self) -> usize {
        0
    }
    fn objective(&self, x: &DVector<f64>) -> f64 {
        x[0] * x[0]
    }
    fn objective_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![2.0 * x[0]])
    }
    fn constraints(&self, x: &DVector<f64>) -> ConstraintEval {
        ConstraintEval {
            f_v: DVector::from_vec(vec![1.0 - x[0]]),
            j_v: DMatrix::from_row_slice(1, 1, &[-1.0]),
            f_p: DVector::zeros(0),
            j_p: DMatrix::zeros(0, 1),
        }
    }
    fn delta_v(&self) -> DVector<f64> {
        DVector::zeros(1)
    }
    fn delta_p(&self) -> DVector<f64> {
        DVector::zeros(0)
    }
    fn project(&self, x: &mut DVector<f64>) {
        x[0] = x[0].clamp(-10.0, 10.0);
    }
}

fn one_d_saddle(upsilon: f64, epsilon: f64) -> (f64, f64) {
    let x = 1.0 / (1.0 + epsilon * (2.0 + upsilon));
    (x, (2.0 + upsilon) * x)
}

/// Spectral norm of the 2x2 monotone-map matrix [[2+u, -1], [1, e]].
fn one_d_lipschitz(upsilon: f64, epsilon: f64) -> f64 {
    let m = [2.0 + upsilon, -1.0, 1.0, epsilon];
    let a = m[0] * m[0] + m[2] * m[2];
    let b = m[0] * m[1] + m[2] * m[3];
    let c = m[1] * m[1] + m[3] * m[3];
    let lam = (a + c) / 2.0 + (((a - c) / 2.0).powi(2) + b * b).sqrt();
    lam.sqrt()
}

fn opf_solver_config() -> SolverConfig {
    SolverConfig {
        mu: Some(0.2),
        ..SolverConfig::default()
    }
}

fn zero_control_injection(ctx: &Context) -> Injection {
    Injection {
        p: ctx.p_u.iter().map(|v| -v).collect(),
        q: ctx.q_u.iter().map(|v| -v).collect(),
    }
}

#[test]
fn acceptance_01_convexity() {
    criterion("01 convexity", || {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let hidden_options: [&[usize]; 5] = [&[8], &[16], &[8, 8], &[16, 8], &[24, 16]];
        for k in 0..20u64 {
            let hidden = hidden_options[(k as usize) % hidden_options.len()];
            let mut widths = vec![6];
            widths.extend_from_slice(hidden);
            widths.push(2);
            let mut model = IcnnModel::new(&widths, 5.0, true, 3, false, 1000 + k).unwrap();
            // Fit a smooth convex target so the weights move away from
            // their initialization before the convexity check.
            let inputs = DMatrix::from_fn(6, 200, |_, _| rng.gen_range(-1.0..1.0));
            let targets = DMatrix::from_fn(2, 200, |r, c| {
                let col = inputs.column(c);
                if r == 0 {
                    col.norm_squared()
                } else {
                    col.iter().fold(0.0f64, |a, v| a.max(*v))
                }
            });
            let cfg = TrainConfig {
                learning_rate: 0.05,
                epochs: 40,
                seed: k,
                ..TrainConfig::default()
            };
            model.train(&inputs, &targets, &cfg).unwrap();
            assert!(model.min_wy() >= 0.0);

            for _ in 0..1000 {
                let a = DVector::from_fn(6, |_, _| rng.gen_range(-2.0..2.0));
                let b = DVector::from_fn(6, |_, _| rng.gen_range(-2.0..2.0));
                let mid = (&a + &b) * 0.5;
                let fa = model.predict(&a).unwrap();
                let fb = model.predict(&b).unwrap();
                let fm = model.predict(&mid).unwrap();
                for i in 0..2 {
                    assert!(
                        fm[i] <= 0.5 * (fa[i] + fb[i]) + 1e-9,
                        "midpoint convexity violated by {:e}",
                        fm[i] - 0.5 * (fa[i] + fb[i])
                    );
                }
            }
        }
    });
}

#[test]
fn acceptance_02_jacobian() {
    criterion("02 jacobian", || {
        let mut rng = ChaCha8Rng::seed_from_u64(202);
        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);

        for k in 0..100u64 {
            let d_in = 3 + (k as usize) % 4;
            let d_out = 1 + (k as usize) % 3;
            let widths = [d_in, 10, d_out];
            let model = IcnnModel::new(&widths, 3.0, k % 2 == 0, d_in, false, 300 + k).unwrap();
            let x = DVector::from_fn(d_in, |_, _| rng.gen_range(-1.5..1.5));
            let jac = model.input_jacobian(&x).unwrap();
            for i in 0..d_in {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fp = model.forward(&xp).unwrap();
                let fm = model.forward(&xm).unwrap();
                for r in 0..d_out {
                    let fd = (fp[r] - fm[r]) / (2.0 * h);
                    assert!(
                        rel(jac[(r, i)], fd) <= 1e-5,
                        "jacobian entry ({r},{i}) off: {} vs fd {}",
                        jac[(r, i)],
                        fd
                    );
                }
            }
        }

        // Reduced Jacobian through the [x; -x; context] augmentation.
        for k in 0..100u64 {
            let c = 2 + (k as usize) % 3;
            let ctx_dim = 4;
            let d_in = 2 * c + ctx_dim;
            let model = IcnnModel::new(&[d_in, 12, 2], 4.0, true, c, true, 400 + k).unwrap();
            let x_tilde: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ctx: Vec<f64> = (0..ctx_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let assemble = |xt: &[f64]| {
                let mut full = augment_input(xt);
                full.extend_from_slice(&ctx);
                DVector::from_vec(full)
            };
            let dirs = DMatrix::from_fn(d_in, c, |row, col| {
                if row == col {
                    1.0
                } else if row == col + c {
                    -1.0
                } else {
                    0.0
                }
            });
            let (_, reduced) = model.jacobian_directions(&assemble(&x_tilde), &dirs).unwrap();
            for i in 0..c {
                let mut xp = x_tilde.clone();
                let mut xm = x_tilde.clone();
                xp[i] += h;
                xm[i] -= h;
                let fp = model.forward(&assemble(&xp)).unwrap();
                let fm = model.forward(&assemble(&xm)).unwrap();
                for r in 0..2 {
                    let fd = (fp[r] - fm[r]) / (2.0 * h);
                    assert!(
                        rel(reduced[(r, i)], fd) <= 1e-5,
                        "reduced jacobian ({r},{i}) off: {} vs fd {}",
                        reduced[(r, i)],
                        fd
                    );
                }
            }
        }
    });
}

#[test]
fn acceptance_03_powerflow_oracle() {
    criterion("03 powerflow-oracle", || {
        let case = &*CASE;
        let nominal = Injection::from_case_loads(case);
        for scale in [1.0, 1.4] {
            let inj = Injection {
                p: nominal.p.iter().map(|v| v * scale).collect(),
                q: nominal.q.iter().map(|v| v * scale).collect(),
            };
            let newton = newton_power_flow(case, &inj, 1e-12, 100).unwrap();
            assert!(newton.converged);
            let (v_sweep, p_sweep) = common::bf_sweep(case, &inj, 1e-12, 500);
            for i in 0..case.n_buses() {
                assert!(
                    (newton.v_mag[i] - v_sweep[i]).abs() <= 1e-6,
                    "voltage mismatch {:e} at bus {} (scale {scale})",
                    (newton.v_mag[i] - v_sweep[i]).abs(),
                    case.buses[i].id
                );
            }
            for k in 0..case.n_branches() {
                assert!(
                    (newton.branch_p[k] - p_sweep[k]).abs() <= 1e-6,
                    "flow mismatch {:e} on branch {k} (scale {scale})",
                    (newton.branch_p[k] - p_sweep[k]).abs()
                );
            }
        }

        let flat = newton_power_flow(case, &Injection::zeros(case.n_buses()), 1e-12, 100).unwrap();
        let (v_sweep, p_sweep) = common::bf_sweep(case, &Injection::zeros(case.n_buses()), 1e-12, 500);
        for i in 0..case.n_buses() {
            assert_eq!(flat.v_mag[i], 1.0);
            assert_eq!(v_sweep[i], 1.0);
        }
        for k in 0..case.n_branches() {
            assert!(flat.branch_p[k].abs() <= 1e-12);
            assert_eq!(p_sweep[k], 0.0);
        }
    });
}

#[test]
fn acceptance_04_surrogate_accuracy() {
    criterion("04 surrogate-accuracy", || {
        let s = &*SURROGATES;
        let rows =
            run_mse_comparison(&CASE, &DATASET, &s.icnn_v, &s.icnn_p, &s.mlp_v, &s.mlp_p).unwrap();
        let a2_v = rows[1].mse_v.unwrap();
        let a2_p = rows[1].mse_p.unwrap();
        let a3_v = rows[2].mse_v.unwrap();
        let a3_p = rows[2].mse_p.unwrap();
        let a4_v = rows[3].mse_v.unwrap();
        let a4_p = rows[3].mse_p.unwrap();

        assert!(a4_v <= 1e-4, "voltage-deviation MSE {a4_v:e} above 1e-4");
        assert!(a4_p <= 1e-2, "flow-deviation MSE {a4_p:e} above 1e-2");
        // Baseline ordering: the unconstrained net is at worst comparable
        // to the convex one and both beat the linearization.
        assert!(a3_v <= 10.0 * a4_v && a3_p <= 10.0 * a4_p);
        assert!(a3_v <= a2_v && a4_v <= a2_v);
        assert!(a3_p <= a2_p && a4_p <= a2_p);
    });
}

#[test]
fn acceptance_05_saddle_contraction() {
    criterion("05 saddle-contraction", || {
        let (upsilon, epsilon) = (0.01, 0.01);
        let mu = 0.003;
        let l = one_d_lipschitz(upsilon, epsilon);
        let eta = upsilon.min(epsilon);
        assert!(mu < 2.0 * eta / (l * l), "step size outside contraction range");
        let rho = (1.0 - 2.0 * mu * eta + mu * mu * l * l).sqrt();

        let cfg = SolverConfig {
            upsilon,
            epsilon,
            mu: Some(mu),
            stop_tol: 1e-9,
            history_every: 1000,
            ..SolverConfig::default()
        };
        let (x_star, l_star) = one_d_saddle(upsilon, epsilon);
        let mut dist = Vec::new();
        let state = solve_saddle_observed(&OneD, &cfg, None, |_, x, lv, _| {
            dist.push(((x[0] - x_star).powi(2) + (lv[0] - l_star).powi(2)).sqrt());
        })
        .unwrap();
        assert!(state.converged);
        assert!(
            (state.x_tilde[0] - x_star).abs() <= 1e-6,
            "final x {} vs closed form {x_star}",
            state.x_tilde[0]
        );
        for w in dist.windows(2) {
            if w[0] <= 1e-12 {
                continue;
            }
            assert!(
                w[1] / w[0] <= rho + 1e-6,
                "per-step ratio {} exceeds rho {}",
                w[1] / w[0],
                rho
            );
        }
    });
}

#[test]
fn acceptance_06_regularization_bias() {
    criterion("06 regularization-bias", || {
        let cfg = SolverConfig {
            upsilon: 0.01,
            epsilon: 0.01,
            mu: Some(0.5),
            stop_tol: 1e-9,
            history_every: 1000,
            ..SolverConfig::default()
        };
        let rows = regularization_sweep(&OneD, &cfg, 3).unwrap();
        assert_eq!(rows.len(), 4);
        let mut prev_x = 0.0;
        for row in &rows {
            // objective is x^2 and the saddle sits at positive x.
            let x = row.objective.sqrt();
            let (closed, _) = one_d_saddle(row.upsilon, row.epsilon);
            assert!(
                (x - closed).abs() <= 1e-6,
                "x {x} vs closed form {closed} at eps {}",
                row.epsilon
            );
            assert!(x > prev_x, "x must increase as regularization halves");
            prev_x = x;
        }
        let last = rows.last().unwrap();
        let gap = (prev_x - 1.0).abs();
        assert!(
            gap <= 2.0 * last.epsilon * (2.0 + last.upsilon),
            "final gap {gap} above first-order bound"
        );
    });
}

#[test]
fn acceptance_07_end_to_end_opf() {
    criterion("07 end-to-end-opf", || {
        let case = &*CASE;
        let s = &*SURROGATES;
        let (ctx, _factor) = synthesize_violation_context(case, 3, 1.05, 4.0).unwrap();
        let pre = verify_profile(case, &zero_control_injection(&ctx), 0.0).unwrap();
        assert!(pre.violated_buses.len() >= 3, "context must violate at 3+ buses");

        let devices = devices_from_case(case, 0.5, 0.6);
        let cost = QuadraticCost::uniform(devices.len(), 0.1, 0.1);
        let outcome = solve_coordinated_pq(
            case,
            ctx,
            s.icnn_v.clone(),
            s.icnn_p.clone(),
            cost,
            devices,
            &opf_solver_config(),
            0.005,
        )
        .unwrap();
        assert!(outcome.state.converged);

        // Feasibility claim comes from the nonlinear oracle, not the model.
        let (delta_v, _) = case_bounds(case);
        for i in 0..case.n_buses() {
            assert!(
                outcome.post.v_dev[i] <= delta_v[i] + 0.005,
                "bus {} deviates {} past bound {} + allowance",
                case.buses[i].id,
                outcome.post.v_dev[i],
                delta_v[i]
            );
        }
        assert!(outcome.post.violated_buses.is_empty());

        let table = before_after_table(case, &outcome);
        assert_eq!(table.len(), case.n_buses());
        assert!(table.iter().all(|r| r.oracle == "newton"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("before_after.csv");
        std::fs::write(&path, before_after_csv(&table)).unwrap();
        let emitted = std::fs::read_to_string(&path).unwrap();
        assert_eq!(emitted.lines().count(), case.n_buses() + 1);
    });
}

#[test]
fn acceptance_08_iterate_invariants() {
    criterion("08 iterate-invariants", || {
        let case = &*CASE;
        let s = &*SURROGATES;
        let (ctx, _) = synthesize_violation_context(case, 3, 1.05, 4.0).unwrap();
        let devices = devices_from_case(case, 0.5, 0.6);
        let prob = OpfProblem::new(
            case,
            ctx,
            s.icnn_v.clone(),
            s.icnn_p.clone(),
            QuadraticCost::uniform(devices.len(), 0.1, 0.1),
            devices.clone(),
            ObjectiveKind::CoordinatedPq,
        )
        .unwrap();
        let cfg = opf_solver_config();
        let nd = devices.len();
        let state = solve_saddle_observed(&prob, &cfg, None, |iter, x, lv, lp| {
            for v in lv.iter().chain(lp.iter()) {
                assert!(*v >= 0.0, "negative dual at iteration {iter}");
            }
            for (d, dev) in devices.iter().enumerate() {
                let (p, q) = (x[d], x[nd + d]);
                assert!(
                    p >= -1e-12 && p <= dev.p_max + 1e-12,
                    "device {d} active power {p} outside box at iteration {iter}"
                );
                assert!(
                    p * p + q * q <= dev.s_max * dev.s_max + 1e-9,
                    "device {d} outside disk at iteration {iter}"
                );
            }
        })
        .unwrap();
        assert!(state.converged);

        // Fixed-point residual of the projected iteration at convergence.
        let (gx, gv, gp) = phi_eval(&prob, &cfg, &state.x_tilde, &state.lambda_v, &state.lambda_p);
        let mut x_next = &state.x_tilde - gx * state.mu;
        prob.project(&mut x_next);
        let lv_next = (&state.lambda_v + gv * state.mu).map(|v| v.max(0.0));
        let lp_next = (&state.lambda_p + gp * state.mu).map(|v| v.max(0.0));
        let residual = (x_next - &state.x_tilde)
            .amax()
            .max((lv_next - &state.lambda_v).amax())
            .max((lp_next - &state.lambda_p).amax());
        assert!(
            residual <= 10.0 * cfg.stop_tol,
            "fixed-point residual {residual:e} above 10 * stop_tol"
        );

        // Same invariants on the closed-form problem.
        let cfg1 = SolverConfig {
            upsilon: 0.01,
            epsilon: 0.01,
            mu: Some(0.003),
            stop_tol: 1e-9,
            history_every: 1000,
            ..SolverConfig::default()
        };
        let state1 = solve_saddle_observed(&OneD, &cfg1, None, |iter, x, lv, _| {
            assert!(lv[0] >= 0.0, "negative dual at iteration {iter}");
            assert!((-10.0..=10.0).contains(&x[0]));
        })
        .unwrap();
        assert!(state1.converged);
        let (gx, gv, _) = phi_eval(&OneD, &cfg1, &state1.x_tilde, &state1.lambda_v, &state1.lambda_p);
        let mut x_next = &state1.x_tilde - gx * state1.mu;
        OneD.project(&mut x_next);
        let lv_next = (&state1.lambda_v + gv * state1.mu).map(|v| v.max(0.0));
        let residual1 = (x_next - &state1.x_tilde)
            .amax()
            .max((lv_next - &state1.lambda_v).amax());
        assert!(residual1 <= 10.0 * cfg1.stop_tol);
    });
}

#[test]
fn acceptance_09_augmentation_embedding() {
    criterion("09 augmentation-embedding", || {
        let mut rng = ChaCha8Rng::seed_from_u64(909);
        for k in 0..10u64 {
            let c = 2 + (k as usize) % 3;
            let ctx_dim = 3;
            let plain = IcnnModel::new(&[c + ctx_dim, 9, 2], 5.0, true, c, false, 900 + k).unwrap();
            let embedded = embed_plain_in_augmented(&plain).unwrap();
            for _ in 0..10 {
                let x_tilde: Vec<f64> = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let ctx: Vec<f64> = (0..ctx_dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let mut plain_in = x_tilde.clone();
                plain_in.extend_from_slice(&ctx);
                let mut aug_in = augment_input(&x_tilde);
                aug_in.extend_from_slice(&ctx);
                let a = plain.forward(&DVector::from_vec(plain_in)).unwrap();
                let b = embedded.forward(&DVector::from_vec(aug_in)).unwrap();
                for i in 0..2 {
                    assert!(
                        (a[i] - b[i]).abs() <= 1e-12,
                        "embedding differs by {:e}",
                        (a[i] - b[i]).abs()
                    );
                }
            }
        }
    });
}

#[test]
fn acceptance_10_determinism() {
    criterion("10 determinism", || {
        let case = &*CASE;
        let train_cfg = TrainConfig {
            learning_rate: 0.02,
            lr_decay: 1.0,
            momentum: 0.9,
            epochs: 25,
            batch_size: 64,
            seed: 5,
            validation_fraction: 0.1,
        };
        let solver_cfg = SolverConfig {
            max_iter: 500,
            ..SolverConfig::default()
        };

        let run = |dir: &std::path::Path| {
            let set = sample_scenarios(case, 400, &SampleRanges::default(), 9).unwrap();
            let ds = build_dataset(case, &set, DEFAULT_TOL).unwrap();
            std::fs::write(dir.join("dataset.json"), save_dataset(&ds)).unwrap();

            let (mv, _) =
                train_from_dataset(&ds, TargetKind::VoltageDeviation, &[16], 5.0, true, &train_cfg)
                    .unwrap();
            let (mp, _) =
                train_from_dataset(&ds, TargetKind::FlowDeviation, &[16], 5.0, true, &train_cfg)
                    .unwrap();
            std::fs::write(dir.join("model_v.json"), save_model(&mv)).unwrap();
            std::fs::write(dir.join("model_p.json"), save_model(&mp)).unwrap();

            let (ctx, factor) = synthesize_violation_context(case, 3, 1.05, 4.0).unwrap();
            let devices = devices_from_case(case, 0.5, 0.6);
            let cost = QuadraticCost::uniform(devices.len(), 0.1, 0.1);
            let outcome = solve_coordinated_pq(
                case,
                ctx,
                mv.clone(),
                mp.clone(),
                cost,
                devices,
                &solver_cfg,
                0.005,
            )
            .unwrap();

            let mse = run_mse_comparison(case, &ds, &mv, &mp, &mv, &mp).unwrap();
            let report = ExperimentReport {
                mse_table: mse,
                before_after: before_after_table(case, &outcome),
                convergence_trace: outcome.trace.clone(),
                config_echo: config_echo(
                    case,
                    &[("data", 9), ("train", 5)],
                    Some(&solver_cfg),
                    Some(&train_cfg),
                    0.005,
                ),
                summary_lines: vec![format!("violation context load factor: {factor}")],
            };
            emit_report(&report, dir).unwrap();
        };

        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        run(d1.path());
        run(d2.path());
        for name in [
            "dataset.json",
            "model_v.json",
            "model_p.json",
            "mse_table.csv",
            "before_after.csv",
            "convergence_trace.csv",
            "summary.txt",
        ] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert!(a == b, "{name} differs between identical runs");
        }
    });
}
