//! Scenario sampling, oracle labeling, and dataset files.
//!
//! A scenario is one realization of the uncontrollable injections
//! `(p^u, q^u)` together with candidate controls `(p^c, q^c)` at the
//! controllable buses. Labels come from the nonlinear power flow: each
//! scenario is solved by Newton-Raphson and reduced to voltage-deviation
//! and flow-deviation targets.
//!
//! Uncontrollable loads are sampled as a global load factor times a
//! per-bus jitter. A shared factor keeps coordinated heavy- and
//! light-load system states inside the training distribution; fully
//! independent per-bus draws would concentrate the total load near its
//! mean and leave system-wide stress states unseen.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::icnn::augment_input;
use crate::network::NetworkCase;
use crate::powerflow::{deviation_targets, newton_power_flow, Injection};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("count must be positive")]
    EmptyCount,
    #[error("invalid ranges: {0}")]
    InvalidRanges(String),
    #[error("case has no controllable buses but control ranges are nonzero")]
    NoControllableBuses,
    #[error("scenario set was sampled for a different case (fingerprint {set:x} vs {case:x})")]
    CaseMismatch { set: u64, case: u64 },
    #[error(
        "{dropped} of {total} scenarios failed to converge (> 5%); sampling ranges too aggressive"
    )]
    TooManyFailures { dropped: usize, total: usize },
    #[error("not enough convergent scenarios to split ({0})")]
    TooFew(usize),
    #[error("dataset version {got}, expected {expected}")]
    VersionMismatch { got: u32, expected: u32 },
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
}

/// Sampling law for scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRanges {
    /// Global load factor bounds applied to every bus in a scenario.
    pub load_factor_lo: f64,
    pub load_factor_hi: f64,
    /// Per-bus multiplicative jitter bounds around the global factor.
    pub bus_jitter_lo: f64,
    pub bus_jitter_hi: f64,
    /// Device active-power cap: `p^c` drawn in `[0, p_c_max]` (pu).
    pub p_c_max: f64,
    /// Device apparent-power cap: `q^c` drawn in `[-s_max, s_max]` and
    /// clipped onto the disk `p^2 + q^2 <= s_max^2` (pu).
    pub s_max: f64,
}

impl Default for SampleRanges {
    fn default() -> Self {
        SampleRanges {
            load_factor_lo: 0.6,
            load_factor_hi: 1.4,
            bus_jitter_lo: 0.8,
            bus_jitter_hi: 1.2,
            p_c_max: 0.5,
            s_max: 0.6,
        }
    }
}

impl SampleRanges {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let pairs = [
            (self.load_factor_lo, self.load_factor_hi, "load_factor"),
            (self.bus_jitter_lo, self.bus_jitter_hi, "bus_jitter"),
        ];
        for (lo, hi, name) in pairs {
            if !(lo <= hi) || lo < 0.0 {
                return Err(DatasetError::InvalidRanges(format!(
                    "{name} bounds [{lo}, {hi}]"
                )));
            }
        }
        if self.p_c_max < 0.0 || self.s_max < 0.0 {
            return Err(DatasetError::InvalidRanges(
                "device caps must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    fn has_control_range(&self) -> bool {
        self.p_c_max > 0.0 || self.s_max > 0.0
    }
}

/// One sampled system state: per-bus uncontrollable consumption (positive,
/// pu) and per-device candidate controls (generation positive, pu).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub p_u: Vec<f64>,
    pub q_u: Vec<f64>,
    pub p_c: Vec<f64>,
    pub q_c: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub case_fingerprint: u64,
    pub seed: u64,
    pub ranges: SampleRanges,
    pub scenarios: Vec<Scenario>,
}

/// Uniform seeded draws: a global load factor and per-bus jitters scale
/// the nominal loads; controls are drawn per device inside the box/disk
/// capability set.
pub fn sample_scenarios(
    case: &NetworkCase,
    count: usize,
    ranges: &SampleRanges,
    seed: u64,
) -> Result<ScenarioSet, DatasetError> {
    if count == 0 {
        return Err(DatasetError::EmptyCount);
    }
    ranges.validate()?;
    let controls = case.control_indices();
    if controls.is_empty() && ranges.has_control_range() {
        return Err(DatasetError::NoControllableBuses);
    }
    let n = case.n_buses();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        if lo == hi {
            lo
        } else {
            rng.gen_range(lo..hi)
        }
    };
    let mut scenarios = Vec::with_capacity(count);
    for _ in 0..count {
        let factor = draw(&mut rng, ranges.load_factor_lo, ranges.load_factor_hi);
        let mut p_u = Vec::with_capacity(n);
        let mut q_u = Vec::with_capacity(n);
        for bus in &case.buses {
            let jitter = draw(&mut rng, ranges.bus_jitter_lo, ranges.bus_jitter_hi);
            p_u.push(factor * jitter * bus.p_load);
            q_u.push(factor * jitter * bus.q_load);
        }
        let mut p_c = Vec::with_capacity(controls.len());
        let mut q_c = Vec::with_capacity(controls.len());
        for _ in &controls {
            let p = draw(&mut rng, 0.0, ranges.p_c_max);
            let mut q = draw(&mut rng, -ranges.s_max, ranges.s_max);
            let head = (ranges.s_max * ranges.s_max - p * p).max(0.0).sqrt();
            q = q.clamp(-head, head);
            p_c.push(p);
            q_c.push(q);
        }
        scenarios.push(Scenario { p_u, q_u, p_c, q_c });
    }
    Ok(ScenarioSet {
        case_fingerprint: case.fingerprint(),
        seed,
        ranges: ranges.clone(),
        scenarios,
    })
}

/// Net injection for a scenario: consumption enters negative, device
/// output positive at its bus.
pub fn scenario_injection(case: &NetworkCase, sc: &Scenario) -> Injection {
    let n = case.n_buses();
    let controls = case.control_indices();
    let mut inj = Injection {
        p: vec![0.0; n],
        q: vec![0.0; n],
    };
    for i in 0..n {
        inj.p[i] = -sc.p_u[i];
        inj.q[i] = -sc.q_u[i];
    }
    for (d, &bus) in controls.iter().enumerate() {
        inj.p[bus] += sc.p_c[d];
        inj.q[bus] += sc.q_c[d];
    }
    inj
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Normalization statistics over the training split of the assembled
/// model inputs `[x; -x; p^u; q^u]`, plus per-target max-abs scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetNorm {
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub target_scale_v: Vec<f64>,
    pub target_scale_p: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub version: u32,
    pub case_fingerprint: u64,
    pub seed: u64,
    pub ranges: SampleRanges,
    pub control_dim: usize,
    /// Augmented control rows `[x~; -x~]`, `x~ = [p^c; q^c]`.
    pub inputs: Vec<Vec<f64>>,
    /// Per-row uncontrollable context `[p^u; q^u]` over all buses.
    pub context: Vec<Vec<f64>>,
    /// Per-row voltage-deviation targets, one entry per bus.
    pub targets_v: Vec<Vec<f64>>,
    /// Per-row flow-deviation targets, one entry per branch.
    pub targets_p: Vec<Vec<f64>>,
    pub split: SplitIndices,
    pub dropped: usize,
    pub norm: DatasetNorm,
}

impl LabeledDataset {
    pub fn n_rows(&self) -> usize {
        self.inputs.len()
    }

    /// Full model input for a row: augmented controls followed by context.
    pub fn model_input(&self, row: usize) -> Vec<f64> {
        let mut out = self.inputs[row].clone();
        out.extend_from_slice(&self.context[row]);
        out
    }

    pub fn input_dim(&self) -> usize {
        self.inputs[0].len() + self.context[0].len()
    }

    /// `(inputs, targets)` sample-per-column matrices for a split.
    pub fn matrices(&self, rows: &[usize], target: TargetKind) -> (DMatrix<f64>, DMatrix<f64>) {
        let d = self.input_dim();
        let tg = match target {
            TargetKind::VoltageDeviation => &self.targets_v,
            TargetKind::FlowDeviation => &self.targets_p,
        };
        let o = tg[0].len();
        let mut x = DMatrix::zeros(d, rows.len());
        let mut t = DMatrix::zeros(o, rows.len());
        for (c, &row) in rows.iter().enumerate() {
            let xin = self.model_input(row);
            for r in 0..d {
                x[(r, c)] = xin[r];
            }
            for r in 0..o {
                t[(r, c)] = tg[row][r];
            }
        }
        (x, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    VoltageDeviation,
    FlowDeviation,
}

/// Labels every scenario with the Newton power flow and splits 80/10/10
/// by a seeded shuffle. Non-convergent scenarios are dropped; more than
/// 5% of them aborts the build.
pub fn build_dataset(
    case: &NetworkCase,
    set: &ScenarioSet,
    pf_tol: f64,
) -> Result<LabeledDataset, DatasetError> {
    if set.case_fingerprint != case.fingerprint() {
        return Err(DatasetError::CaseMismatch {
            set: set.case_fingerprint,
            case: case.fingerprint(),
        });
    }
    let total = set.scenarios.len();
    let mut inputs = Vec::with_capacity(total);
    let mut context = Vec::with_capacity(total);
    let mut targets_v = Vec::with_capacity(total);
    let mut targets_p = Vec::with_capacity(total);
    let mut dropped = 0usize;
    for sc in &set.scenarios {
        let inj = scenario_injection(case, sc);
        let sol = match newton_power_flow(case, &inj, pf_tol, crate::powerflow::DEFAULT_MAX_ITER) {
            Ok(sol) if sol.converged => sol,
            _ => {
                dropped += 1;
                continue;
            }
        };
        let dev = match deviation_targets(case, &sol) {
            Ok(dev) => dev,
            Err(_) => {
                dropped += 1;
                continue;
            }
        };
        let mut x_tilde = sc.p_c.clone();
        x_tilde.extend_from_slice(&sc.q_c);
        inputs.push(augment_input(&x_tilde));
        let mut ctx = sc.p_u.clone();
        ctx.extend_from_slice(&sc.q_u);
        context.push(ctx);
        targets_v.push(dev.v_dev);
        targets_p.push(dev.p_dev);
    }
    if dropped * 20 > total {
        return Err(DatasetError::TooManyFailures { dropped, total });
    }
    let kept = inputs.len();
    if kept == 0 {
        return Err(DatasetError::TooFew(kept));
    }

    let mut order: Vec<usize> = (0..kept).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(set.seed ^ 0x517a_b1e5);
    for i in (1..kept).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    // 80/10/10, degenerating gracefully on tiny sets (train never empty).
    let n_train = (((kept as f64) * 0.8).round() as usize).clamp(1, kept);
    let n_val = (((kept as f64) * 0.1).round() as usize).min(kept - n_train);
    let split = SplitIndices {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    };

    let control_dim = case.control_indices().len() * 2;
    let mut ds = LabeledDataset {
        version: DATASET_VERSION,
        case_fingerprint: set.case_fingerprint,
        seed: set.seed,
        ranges: set.ranges.clone(),
        control_dim,
        inputs,
        context,
        targets_v,
        targets_p,
        split,
        dropped,
        norm: DatasetNorm {
            input_shift: vec![],
            input_scale: vec![],
            target_scale_v: vec![],
            target_scale_p: vec![],
        },
    };
    ds.norm = fit_norm(&ds);
    Ok(ds)
}

fn fit_norm(ds: &LabeledDataset) -> DatasetNorm {
    let (x, tv) = ds.matrices(&ds.split.train, TargetKind::VoltageDeviation);
    let (_, tp) = ds.matrices(&ds.split.train, TargetKind::FlowDeviation);
    let nv = crate::icnn::NormStats::fit(&x, &tv);
    let np = crate::icnn::NormStats::fit(&x, &tp);
    DatasetNorm {
        input_shift: nv.input_shift,
        input_scale: nv.input_scale,
        target_scale_v: nv.target_scale,
        target_scale_p: np.target_scale,
    }
}

pub fn save_dataset(ds: &LabeledDataset) -> String {
    serde_json::to_string(ds).expect("dataset serialization is infallible")
}

pub fn load_dataset(text: &str) -> Result<LabeledDataset, DatasetError> {
    let ds: LabeledDataset =
        serde_json::from_str(text).map_err(|e| DatasetError::Corrupt(e.to_string()))?;
    if ds.version != DATASET_VERSION {
        return Err(DatasetError::VersionMismatch {
            got: ds.version,
            expected: DATASET_VERSION,
        });
    }
    let rows = ds.inputs.len();
    if ds.context.len() != rows || ds.targets_v.len() != rows || ds.targets_p.len() != rows {
        return Err(DatasetError::Corrupt("row block lengths differ".into()));
    }
    let mut seen = vec![false; rows];
    for idx in ds
        .split
        .train
        .iter()
        .chain(&ds.split.val)
        .chain(&ds.split.test)
    {
        if *idx >= rows || seen[*idx] {
            return Err(DatasetError::Corrupt("split is not a partition".into()));
        }
        seen[*idx] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(DatasetError::Corrupt("split does not cover all rows".into()));
    }
    Ok(ds)
}
