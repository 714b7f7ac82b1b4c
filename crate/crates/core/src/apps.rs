//! Experiment harness: surrogate training from datasets, accuracy
//! comparisons against the nonlinear oracle, the two OPF applications,
//! and CSV report emission.
//!
//! Model labels used throughout the reports:
//!
//! * A1 — Newton-Raphson power flow, the ground-truth oracle;
//! * A2 — LinDistFlow linearization (radial cases only);
//! * A3 — plain MLP surrogate (same architecture, unconstrained weights);
//! * A4 — convex surrogate (nonnegative inter-layer weights).
//!
//! Every feasibility claim is verified with an A1 Newton solve at the
//! returned controls; surrogate predictions are reported alongside but
//! never substitute for verification.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, LabeledDataset, TargetKind};
use crate::icnn::{IcnnError, IcnnModel, TrainConfig, TrainReport};
use crate::network::{NetworkCase, Topology};
use crate::opf::{
    Context, Device, ObjectiveKind, OpfError, OpfProblem, QuadraticCost,
};
use crate::powerflow::{
    deviation_targets, lindistflow, newton_power_flow, Injection, PowerFlowError,
    DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use crate::saddle::{
    solve_saddle_observed, HistoryRecord, SaddleError, SaddleState, SolverConfig,
};

/// Default tolerance added to the verified deviation bound to absorb
/// surrogate model error (pu).
pub const DEFAULT_KAPPA: f64 = 0.005;

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Icnn(#[from] IcnnError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Opf(#[from] OpfError),
    #[error(transparent)]
    Saddle(#[from] SaddleError),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error("dataset was built for a different case (dataset {dataset:x}, case {case:x})")]
    CaseMismatch { dataset: u64, case: u64 },
    #[error("verification power flow did not converge")]
    VerificationFailed,
    #[error("could not induce >= {want} violated buses within scale factor {max}")]
    NoViolation { want: usize, max: f64 },
    #[error("io error writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Trains one surrogate on a dataset target using the dataset's own
/// train/validation split.
pub fn train_from_dataset(
    ds: &LabeledDataset,
    target: TargetKind,
    hidden: &[usize],
    beta: f64,
    convex: bool,
    cfg: &TrainConfig,
) -> Result<(IcnnModel, TrainReport), AppError> {
    let (train_in, train_tg) = ds.matrices(&ds.split.train, target);
    let (val_in, val_tg) = ds.matrices(&ds.split.val, target);
    let mut widths = vec![ds.input_dim()];
    widths.extend_from_slice(hidden);
    widths.push(train_tg.nrows());
    let mut model = IcnnModel::new(&widths, beta, convex, ds.control_dim, true, cfg.seed)?;
    let report = model.fit(&train_in, &train_tg, &val_in, &val_tg, cfg)?;
    Ok((model, report))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MseRow {
    pub model: String,
    /// `None` renders as the table dash (model not applicable).
    pub mse_v: Option<f64>,
    pub mse_p: Option<f64>,
}

/// Held-out test-split MSE of each model against the A1 labels.
pub fn run_mse_comparison(
    case: &NetworkCase,
    ds: &LabeledDataset,
    icnn_v: &IcnnModel,
    icnn_p: &IcnnModel,
    mlp_v: &IcnnModel,
    mlp_p: &IcnnModel,
) -> Result<Vec<MseRow>, AppError> {
    if ds.case_fingerprint != case.fingerprint() {
        return Err(AppError::CaseMismatch {
            dataset: ds.case_fingerprint,
            case: case.fingerprint(),
        });
    }
    let (test_in, test_v) = ds.matrices(&ds.split.test, TargetKind::VoltageDeviation);
    let (_, test_p) = ds.matrices(&ds.split.test, TargetKind::FlowDeviation);

    let (a2_v, a2_p) = if case.topology == Topology::Radial {
        let (mv, mp) = lindistflow_mse(case, ds)?;
        (Some(mv), Some(mp))
    } else {
        (None, None)
    };

    Ok(vec![
        MseRow {
            model: "A1".into(),
            mse_v: Some(0.0),
            mse_p: Some(0.0),
        },
        MseRow {
            model: "A2".into(),
            mse_v: a2_v,
            mse_p: a2_p,
        },
        MseRow {
            model: "A3".into(),
            mse_v: Some(mlp_v.mse_raw(&test_in, &test_v)),
            mse_p: Some(mlp_p.mse_raw(&test_in, &test_p)),
        },
        MseRow {
            model: "A4".into(),
            mse_v: Some(icnn_v.mse_raw(&test_in, &test_v)),
            mse_p: Some(icnn_p.mse_raw(&test_in, &test_p)),
        },
    ])
}

fn lindistflow_mse(case: &NetworkCase, ds: &LabeledDataset) -> Result<(f64, f64), AppError> {
    let controls = case.control_indices();
    let nd = controls.len();
    let n = case.n_buses();
    let mut acc_v = 0.0;
    let mut acc_p = 0.0;
    let mut cnt_v = 0usize;
    let mut cnt_p = 0usize;
    for &row in &ds.split.test {
        let x = &ds.inputs[row];
        let ctx = &ds.context[row];
        let mut inj = Injection {
            p: (0..n).map(|i| -ctx[i]).collect(),
            q: (0..n).map(|i| -ctx[n + i]).collect(),
        };
        for (d, &bus) in controls.iter().enumerate() {
            inj.p[bus] += x[d];
            inj.q[bus] += x[nd + d];
        }
        let sol = lindistflow(case, &inj)?;
        let dev = deviation_targets(case, &sol)?;
        for (pred, label) in dev.v_dev.iter().zip(&ds.targets_v[row]) {
            acc_v += (pred - label).powi(2);
            cnt_v += 1;
        }
        for (pred, label) in dev.p_dev.iter().zip(&ds.targets_p[row]) {
            acc_p += (pred - label).powi(2);
            cnt_p += 1;
        }
    }
    Ok((acc_v / cnt_v.max(1) as f64, acc_p / cnt_p.max(1) as f64))
}

/// Newton-verified operating profile at an injection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifiedProfile {
    pub v_mag: Vec<f64>,
    pub v_dev: Vec<f64>,
    /// Buses whose deviation exceeds its bound plus the allowance.
    pub violated_buses: Vec<usize>,
    pub max_excess: f64,
}

pub fn verify_profile(
    case: &NetworkCase,
    inj: &Injection,
    kappa: f64,
) -> Result<VerifiedProfile, AppError> {
    let sol = newton_power_flow(case, inj, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    if !sol.converged {
        return Err(AppError::VerificationFailed);
    }
    let dev = deviation_targets(case, &sol)?;
    let mut violated = Vec::new();
    let mut max_excess = f64::NEG_INFINITY;
    for i in 0..case.n_buses() {
        let excess = dev.v_dev[i] - dev.delta_v[i];
        max_excess = max_excess.max(excess);
        if excess > kappa {
            violated.push(i);
        }
    }
    Ok(VerifiedProfile {
        v_mag: sol.v_mag,
        v_dev: dev.v_dev,
        violated_buses: violated,
        max_excess,
    })
}

/// Scales the nominal loads until the Newton-verified zero-control
/// profile violates the voltage bound (no allowance) at `min_buses`
/// buses; returns the context and the factor used.
pub fn synthesize_violation_context(
    case: &NetworkCase,
    min_buses: usize,
    scale_step: f64,
    max_factor: f64,
) -> Result<(Context, f64), AppError> {
    let mut factor = 1.0;
    while factor <= max_factor {
        let ctx = Context {
            p_u: case.buses.iter().map(|b| factor * b.p_load).collect(),
            q_u: case.buses.iter().map(|b| factor * b.q_load).collect(),
        };
        let inj = Injection {
            p: ctx.p_u.iter().map(|v| -v).collect(),
            q: ctx.q_u.iter().map(|v| -v).collect(),
        };
        if let Ok(profile) = verify_profile(case, &inj, 0.0) {
            if profile.violated_buses.len() >= min_buses {
                return Ok((ctx, factor));
            }
        }
        factor *= scale_step;
    }
    Err(AppError::NoViolation {
        want: min_buses,
        max: max_factor,
    })
}

/// One row of the convergence trace: solver diagnostics plus the control
/// vector at the recorded iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub objective: f64,
    pub max_surrogate_violation: f64,
    pub step_norm: f64,
    pub lambda_max: f64,
    pub controls: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OpfOutcome {
    pub state: SaddleState,
    pub controls: DVector<f64>,
    /// Newton-verified profile at zero controls.
    pub pre: VerifiedProfile,
    /// Newton-verified profile at the returned controls.
    pub post: VerifiedProfile,
    /// Surrogate-predicted deviations at the returned controls.
    pub predicted_v_dev: Vec<f64>,
    pub trace: Vec<TraceRow>,
}

/// Solves the surrogate OPF and verifies pre/post profiles with the
/// Newton oracle.
pub fn solve_opf(
    prob: &OpfProblem,
    cfg: &SolverConfig,
    kappa: f64,
) -> Result<OpfOutcome, AppError> {
    let mut controls_at: Vec<(usize, Vec<f64>)> = Vec::new();
    let state = solve_saddle_observed(prob, cfg, None, |iter, x, _, _| {
        controls_at.push((iter, x.as_slice().to_vec()));
    })?;
    let trace = state
        .history
        .iter()
        .map(|rec: &HistoryRecord| TraceRow {
            iter: rec.iter,
            objective: rec.objective,
            max_surrogate_violation: rec.max_surrogate_violation,
            step_norm: rec.step_norm,
            lambda_max: rec.lambda_max,
            controls: controls_at[rec.iter].1.clone(),
        })
        .collect();
    let zero = DVector::zeros(2 * prob.n_devices());
    let pre = verify_profile(&prob.case, &prob.injection(&zero), kappa)?;
    let post = verify_profile(&prob.case, &prob.injection(&state.x_tilde), kappa)?;
    let predicted = {
        use crate::saddle::SaddleProblem;
        prob.constraints(&state.x_tilde).f_v.as_slice().to_vec()
    };
    Ok(OpfOutcome {
        controls: state.x_tilde.clone(),
        state,
        pre,
        post,
        predicted_v_dev: predicted,
        trace,
    })
}

/// Coordinated active/reactive dispatch: builds the problem and solves it.
#[allow(clippy::too_many_arguments)]
pub fn solve_coordinated_pq(
    case: &NetworkCase,
    context: Context,
    model_v: IcnnModel,
    model_p: IcnnModel,
    cost: QuadraticCost,
    devices: Vec<Device>,
    cfg: &SolverConfig,
    kappa: f64,
) -> Result<OpfOutcome, AppError> {
    let prob = OpfProblem::new(
        case,
        context,
        model_v,
        model_p,
        cost,
        devices,
        ObjectiveKind::CoordinatedPq,
    )?;
    solve_opf(&prob, cfg, kappa)
}

/// Volt/VAr optimization: active power pinned at zero.
#[allow(clippy::too_many_arguments)]
pub fn solve_vvo(
    case: &NetworkCase,
    context: Context,
    model_v: IcnnModel,
    model_p: IcnnModel,
    cost: QuadraticCost,
    devices: Vec<Device>,
    cfg: &SolverConfig,
    kappa: f64,
) -> Result<OpfOutcome, AppError> {
    let prob = OpfProblem::new(
        case,
        context,
        model_v,
        model_p,
        cost,
        devices,
        ObjectiveKind::Vvo,
    )?;
    solve_opf(&prob, cfg, kappa)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BeforeAfterRow {
    pub bus_id: usize,
    pub delta_v: f64,
    pub v_dev_before: f64,
    pub v_dev_predicted: f64,
    pub v_dev_after: f64,
    /// Provenance of the before/after columns; always the Newton oracle.
    pub oracle: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub mse_table: Vec<MseRow>,
    pub before_after: Vec<BeforeAfterRow>,
    pub convergence_trace: Vec<TraceRow>,
    /// Everything needed to reproduce the report bit-identically.
    pub config_echo: String,
    pub summary_lines: Vec<String>,
}

/// Assembles the per-bus before/after table from an OPF outcome.
pub fn before_after_table(case: &NetworkCase, outcome: &OpfOutcome) -> Vec<BeforeAfterRow> {
    let (delta_v, _) = crate::opf::case_bounds(case);
    (0..case.n_buses())
        .map(|i| BeforeAfterRow {
            bus_id: case.buses[i].id,
            delta_v: delta_v[i],
            v_dev_before: outcome.pre.v_dev[i],
            v_dev_predicted: outcome.predicted_v_dev[i],
            v_dev_after: outcome.post.v_dev[i],
            oracle: "newton".into(),
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v}"),
        None => "--".into(),
    }
}

pub fn mse_table_csv(rows: &[MseRow]) -> String {
    let mut out = String::from("model,mse_v_dev,mse_p_dev\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.model, fmt_opt(r.mse_v), fmt_opt(r.mse_p));
    }
    out
}

pub fn before_after_csv(rows: &[BeforeAfterRow]) -> String {
    let mut out =
        String::from("bus_id,delta_v,v_dev_before,v_dev_predicted,v_dev_after,oracle\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.bus_id, r.delta_v, r.v_dev_before, r.v_dev_predicted, r.v_dev_after, r.oracle
        );
    }
    out
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let n_controls = rows.first().map(|r| r.controls.len()).unwrap_or(0);
    let mut out = String::from("iter,objective,max_surrogate_violation,step_norm,lambda_max");
    for i in 0..n_controls {
        let _ = write!(out, ",x{i}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            r.iter, r.objective, r.max_surrogate_violation, r.step_norm, r.lambda_max
        );
        for c in &r.controls {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
    }
    out
}

/// Writes the report tables and a summary into `out_dir`; returns the
/// written paths. Output bytes are a pure function of the report.
pub fn emit_report(report: &ExperimentReport, out_dir: &Path) -> Result<Vec<PathBuf>, AppError> {
    let write = |name: &str, content: String| -> Result<PathBuf, AppError> {
        let path = out_dir.join(name);
        std::fs::write(&path, content).map_err(|source| AppError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(path)
    };
    let mut summary = String::new();
    for line in &report.summary_lines {
        let _ = writeln!(summary, "{line}");
    }
    let _ = writeln!(summary, "config: {}", report.config_echo);
    Ok(vec![
        write("mse_table.csv", mse_table_csv(&report.mse_table))?,
        write("before_after.csv", before_after_csv(&report.before_after))?,
        write(
            "convergence_trace.csv",
            trace_csv(&report.convergence_trace),
        )?,
        write("summary.txt", summary)?,
    ])
}

/// Reproducibility record: case hash plus every seed and hyperparameter
/// that influenced the run, serialized as one JSON line.
pub fn config_echo(
    case: &NetworkCase,
    seeds: &[(&str, u64)],
    solver: Option<&SolverConfig>,
    train: Option<&TrainConfig>,
    kappa: f64,
) -> String {
    #[derive(Serialize)]
    struct Echo<'a> {
        case_fingerprint: String,
        seeds: Vec<(&'a str, u64)>,
        solver: Option<&'a SolverConfig>,
        train: Option<&'a TrainConfig>,
        kappa: f64,
    }
    serde_json::to_string(&Echo {
        case_fingerprint: format!("{:x}", case.fingerprint()),
        seeds: seeds.to_vec(),
        solver,
        train,
        kappa,
    })
    .expect("echo serialization is infallible")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, sample_scenarios, SampleRanges};
    use crate::network::parse_case;

    fn ieee33() -> NetworkCase {
        let text = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../cases/ieee33.case"
        ))
        .unwrap();
        parse_case(&text).unwrap()
    }

    fn two_bus() -> NetworkCase {
        parse_case(
            "[header]\ns_base_kva 100.0\nv_base_kv 1.0\nper_unit true\n\
             [buses]\n1 slack 0.0 0.0 0.9 1.1 0\n2 load 0.05 0.02 0.9 1.1 1\n\
             [branches]\n1 2 0.01 0.01\n",
        )
        .unwrap()
    }

    fn small_dataset(case: &NetworkCase) -> LabeledDataset {
        let set = sample_scenarios(case, 60, &SampleRanges::default(), 7).unwrap();
        build_dataset(case, &set, DEFAULT_TOL).unwrap()
    }

    fn quick_train(ds: &LabeledDataset, convex: bool) -> (IcnnModel, IcnnModel) {
        let cfg = TrainConfig {
            learning_rate: 0.02,
            lr_decay: 1.0,
            momentum: 0.0,
            epochs: 15,
            batch_size: 16,
            seed: 3,
            validation_fraction: 0.1,
        };
        let (mv, _) =
            train_from_dataset(ds, TargetKind::VoltageDeviation, &[16], 5.0, convex, &cfg)
                .unwrap();
        let (mp, _) =
            train_from_dataset(ds, TargetKind::FlowDeviation, &[16], 5.0, convex, &cfg).unwrap();
        (mv, mp)
    }

    #[test]
    fn mse_table_shape_and_a1_zero() {
        let case = two_bus();
        let ds = small_dataset(&case);
        let (iv, ip) = quick_train(&ds, true);
        let (pv, pp) = quick_train(&ds, false);
        let rows = run_mse_comparison(&case, &ds, &iv, &ip, &pv, &pp).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].mse_v, Some(0.0));
        assert_eq!(rows[0].mse_p, Some(0.0));
        // Radial case: the linearization row is populated and small.
        let a2 = rows[1].mse_v.unwrap();
        assert!(a2 > 0.0 && a2 < 1e-3, "A2 voltage MSE {a2}");
        assert!(rows[3].mse_v.unwrap() >= 0.0);
    }

    #[test]
    fn mse_table_dashes_on_meshed() {
        let text = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../cases/ieee33_meshed.case"
        ))
        .unwrap();
        let case = parse_case(&text).unwrap();
        let set = sample_scenarios(&case, 30, &SampleRanges::default(), 8).unwrap();
        let ds = build_dataset(&case, &set, DEFAULT_TOL).unwrap();
        let (iv, ip) = quick_train(&ds, true);
        let rows = run_mse_comparison(&case, &ds, &iv, &ip, &iv, &ip).unwrap();
        assert_eq!(rows[1].mse_v, None);
        assert_eq!(rows[1].mse_p, None);
        let csv = mse_table_csv(&rows);
        assert!(csv.contains("A2,--,--"));
    }

    #[test]
    fn mse_rejects_case_mismatch() {
        let case = two_bus();
        let ds = small_dataset(&case);
        let (iv, ip) = quick_train(&ds, true);
        let other = ieee33();
        assert!(matches!(
            run_mse_comparison(&other, &ds, &iv, &ip, &iv, &ip),
            Err(AppError::CaseMismatch { .. })
        ));
    }

    #[test]
    fn violation_context_synthesis_on_33_bus() {
        let case = ieee33();
        let (ctx, factor) = synthesize_violation_context(&case, 3, 1.05, 4.0).unwrap();
        assert!(factor > 1.0 && factor <= 4.0);
        let inj = Injection {
            p: ctx.p_u.iter().map(|v| -v).collect(),
            q: ctx.q_u.iter().map(|v| -v).collect(),
        };
        let profile = verify_profile(&case, &inj, 0.0).unwrap();
        assert!(profile.violated_buses.len() >= 3);
        // Nominal load should be violation-free.
        let nominal = Injection::from_case_loads(&case);
        let base = verify_profile(&case, &nominal, 0.0).unwrap();
        assert!(base.violated_buses.is_empty());
    }

    #[test]
    fn report_emission_is_deterministic() {
        let report = ExperimentReport {
            mse_table: vec![MseRow {
                model: "A1".into(),
                mse_v: Some(0.0),
                mse_p: None,
            }],
            before_after: vec![BeforeAfterRow {
                bus_id: 1,
                delta_v: 0.1,
                v_dev_before: 0.12,
                v_dev_predicted: 0.09,
                v_dev_after: 0.08,
                oracle: "newton".into(),
            }],
            convergence_trace: vec![],
            config_echo: "{}".into(),
            summary_lines: vec!["run ok".into()],
        };
        let dir = tempfile::tempdir().unwrap();
        let paths = emit_report(&report, dir.path()).unwrap();
        assert_eq!(paths.len(), 4);
        let first: Vec<Vec<u8>> = paths.iter().map(|p| std::fs::read(p).unwrap()).collect();
        // Empty trace renders as a header-only CSV.
        let trace = std::fs::read_to_string(dir.path().join("convergence_trace.csv")).unwrap();
        assert_eq!(
            trace,
            "iter,objective,max_surrogate_violation,step_norm,lambda_max\n"
        );
        let ba = std::fs::read_to_string(dir.path().join("before_after.csv")).unwrap();
        assert!(ba.contains(",newton"));
        let again = emit_report(&report, dir.path()).unwrap();
        let second: Vec<Vec<u8>> = again.iter().map(|p| std::fs::read(p).unwrap()).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn config_echo_round_trips_as_json() {
        let case = two_bus();
        let echo = config_echo(
            &case,
            &[("data", 1), ("train", 2)],
            Some(&SolverConfig::default()),
            None,
            DEFAULT_KAPPA,
        );
        let parsed: serde_json::Value = serde_json::from_str(&echo).unwrap();
        assert_eq!(
            parsed["case_fingerprint"].as_str().unwrap(),
            format!("{:x}", case.fingerprint())
        );
        assert_eq!(parsed["kappa"].as_f64().unwrap(), DEFAULT_KAPPA);
    }
}
