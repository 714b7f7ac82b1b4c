//! Optimal power flow assembled from trained convex surrogates.
//!
//! The decision vector is `x~ = [p^c_1..p^c_nd, q^c_1..q^c_nd]` over the
//! controllable devices. Voltage- and flow-deviation constraints are
//! evaluated through two trained networks whose input is the augmented
//! control vector followed by the uncontrollable context, so the same
//! checkpoint serves every context realization. The resulting problem
//! plugs into the saddle solver through [`SaddleProblem`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::icnn::IcnnModel;
use crate::network::{NetworkCase, Topology};
use crate::powerflow::{lindistflow, Injection, PowerFlowError};
use crate::saddle::{project_box_disk, ConstraintEval, SaddleProblem};

#[derive(Debug, Error)]
pub enum OpfError {
    #[error("model for {role} is not convex_mode")]
    NotConvex { role: &'static str },
    #[error("model for {role} expects {expected} {what}, case provides {got}")]
    ModelShape {
        role: &'static str,
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("context has {got} entries, case has {expected} buses")]
    ContextShape { got: usize, expected: usize },
    #[error("cost vectors must have one entry per device and be nonnegative")]
    BadCost,
    #[error("device {0}: apparent-power cap must be positive, active cap nonnegative")]
    BadDevice(usize),
    #[error("bound vector entry {0} is not positive")]
    BadDelta(usize),
    #[error("affine baseline requires a radial case")]
    NotRadial,
    #[error("power flow failed while building affine baseline: {0}")]
    PowerFlow(#[from] PowerFlowError),
}

/// Controllable inverter: bus index into the case, active-power cap, and
/// apparent-power capacity (both pu).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub bus: usize,
    pub p_max: f64,
    pub s_max: f64,
}

/// One device per controllable bus with uniform caps.
pub fn devices_from_case(case: &NetworkCase, p_max: f64, s_max: f64) -> Vec<Device> {
    case.control_indices()
        .into_iter()
        .map(|bus| Device { bus, p_max, s_max })
        .collect()
}

/// Diagonal quadratic cost `sum_i (d_p_i/2) p_i^2 + l_p_i p_i + ...`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticCost {
    pub d_p: Vec<f64>,
    pub d_q: Vec<f64>,
    pub l_p: Vec<f64>,
    pub l_q: Vec<f64>,
}

impl QuadraticCost {
    pub fn uniform(n_devices: usize, d_p: f64, d_q: f64) -> Self {
        QuadraticCost {
            d_p: vec![d_p; n_devices],
            d_q: vec![d_q; n_devices],
            l_p: vec![0.0; n_devices],
            l_q: vec![0.0; n_devices],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectiveKind {
    /// Simultaneous active-power curtailment and reactive dispatch.
    CoordinatedPq,
    /// Volt/VAr: active power pinned at zero, reactive only.
    Vvo,
}

/// Uncontrollable consumption realization, per bus (positive, pu).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub p_u: Vec<f64>,
    pub q_u: Vec<f64>,
}

pub struct OpfProblem {
    pub case: NetworkCase,
    pub context: Context,
    pub model_v: IcnnModel,
    pub model_p: IcnnModel,
    pub delta_v: DVector<f64>,
    pub delta_p: DVector<f64>,
    pub cost: QuadraticCost,
    pub devices: Vec<Device>,
    pub objective_kind: ObjectiveKind,
    /// Jacobian reduction directions per model: d(normalized input)/d(x~).
    dirs_v: DMatrix<f64>,
    dirs_p: DMatrix<f64>,
}

/// Half-width bounds from the case limits: `delta_v = (v_max - v_min)/2`
/// per bus, `delta_p = (p_max - p_min)/2` per branch.
pub fn case_bounds(case: &NetworkCase) -> (DVector<f64>, DVector<f64>) {
    let dv = DVector::from_iterator(
        case.n_buses(),
        case.buses.iter().map(|b| (b.v_max - b.v_min) / 2.0),
    );
    let dp = DVector::from_iterator(
        case.n_branches(),
        case.branches.iter().map(|b| (b.p_max - b.p_min) / 2.0),
    );
    (dv, dp)
}

/// Chain-rule directions from `x~` into the model's normalized input
/// space: identity on the `x~` block, negated identity on the `-x~`
/// block, zero on the context block, each row divided by its input scale.
fn reduction_directions(model: &IcnnModel) -> DMatrix<f64> {
    let c = model.control_dim;
    DMatrix::from_fn(model.input_dim(), c, |row, col| {
        let sign = if row == col {
            1.0
        } else if model.augmented && row == col + c {
            -1.0
        } else {
            0.0
        };
        sign / model.norm.input_scale[row]
    })
}

impl OpfProblem {
    pub fn new(
        case: &NetworkCase,
        context: Context,
        model_v: IcnnModel,
        model_p: IcnnModel,
        cost: QuadraticCost,
        devices: Vec<Device>,
        objective_kind: ObjectiveKind,
    ) -> Result<OpfProblem, OpfError> {
        let n = case.n_buses();
        if context.p_u.len() != n || context.q_u.len() != n {
            return Err(OpfError::ContextShape {
                got: context.p_u.len(),
                expected: n,
            });
        }
        let nd = devices.len();
        for (role, model, outputs) in [
            ("voltage deviation", &model_v, n),
            ("flow deviation", &model_p, case.n_branches()),
        ] {
            if !model.convex_mode {
                return Err(OpfError::NotConvex { role });
            }
            if model.output_dim() != outputs {
                return Err(OpfError::ModelShape {
                    role,
                    what: "outputs",
                    expected: model.output_dim(),
                    got: outputs,
                });
            }
            if model.control_dim != 2 * nd {
                return Err(OpfError::ModelShape {
                    role,
                    what: "controls",
                    expected: model.control_dim,
                    got: 2 * nd,
                });
            }
            if model.context_dim() != 2 * n {
                return Err(OpfError::ModelShape {
                    role,
                    what: "context entries",
                    expected: model.context_dim(),
                    got: 2 * n,
                });
            }
        }
        if cost.d_p.len() != nd
            || cost.d_q.len() != nd
            || cost.l_p.len() != nd
            || cost.l_q.len() != nd
            || cost.d_p.iter().chain(&cost.d_q).any(|d| *d < 0.0)
        {
            return Err(OpfError::BadCost);
        }
        for (i, d) in devices.iter().enumerate() {
            if d.s_max <= 0.0 || d.p_max < 0.0 {
                return Err(OpfError::BadDevice(i));
            }
        }
        let (delta_v, delta_p) = case_bounds(case);
        if let Some(i) = delta_v.iter().position(|d| *d <= 0.0) {
            return Err(OpfError::BadDelta(i));
        }
        if let Some(i) = delta_p.iter().position(|d| *d <= 0.0) {
            return Err(OpfError::BadDelta(i));
        }
        let dirs_v = reduction_directions(&model_v);
        let dirs_p = reduction_directions(&model_p);
        Ok(OpfProblem {
            case: case.clone(),
            context,
            model_v,
            model_p,
            delta_v,
            delta_p,
            cost,
            devices,
            objective_kind,
            dirs_v,
            dirs_p,
        })
    }

    pub fn n_devices(&self) -> usize {
        self.devices.len()
    }

    /// Raw model input `[x~; -x~; p^u; q^u]` for a control vector.
    pub fn model_input(&self, x_tilde: &DVector<f64>) -> DVector<f64> {
        let c = x_tilde.len();
        let n = self.case.n_buses();
        let mut input = DVector::zeros(2 * c + 2 * n);
        for i in 0..c {
            input[i] = x_tilde[i];
            input[c + i] = -x_tilde[i];
        }
        for i in 0..n {
            input[2 * c + i] = self.context.p_u[i];
            input[2 * c + n + i] = self.context.q_u[i];
        }
        input
    }

    fn surrogate(
        &self,
        model: &IcnnModel,
        dirs: &DMatrix<f64>,
        x_tilde: &DVector<f64>,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let raw = self.model_input(x_tilde);
        let norm = model.normalize_input(&raw).expect("layout checked at build");
        let (mut y, mut jac) = model
            .jacobian_directions(&norm, dirs)
            .expect("layout checked at build");
        for (r, s) in model.norm.target_scale.iter().enumerate() {
            y[r] *= *s;
            for c in 0..jac.ncols() {
                jac[(r, c)] *= *s;
            }
        }
        (y, jac)
    }

    /// Newton-verifiable injection for a control vector: context
    /// consumption plus device output.
    pub fn injection(&self, x_tilde: &DVector<f64>) -> Injection {
        let nd = self.n_devices();
        let mut inj = Injection {
            p: self.context.p_u.iter().map(|v| -v).collect(),
            q: self.context.q_u.iter().map(|v| -v).collect(),
        };
        for (d, dev) in self.devices.iter().enumerate() {
            inj.p[dev.bus] += x_tilde[d];
            inj.q[dev.bus] += x_tilde[nd + d];
        }
        inj
    }
}

impl SaddleProblem for OpfProblem {
    fn dim_x(&self) -> usize {
        2 * self.n_devices()
    }

    fn n_constraints_v(&self) -> usize {
        self.case.n_buses()
    }

    fn n_constraints_p(&self) -> usize {
        self.case.n_branches()
    }

    fn objective(&self, x: &DVector<f64>) -> f64 {
        let nd = self.n_devices();
        let mut h = 0.0;
        for i in 0..nd {
            let (p, q) = (x[i], x[nd + i]);
            h += 0.5 * self.cost.d_p[i] * p * p + self.cost.l_p[i] * p;
            h += 0.5 * self.cost.d_q[i] * q * q + self.cost.l_q[i] * q;
        }
        h
    }

    fn objective_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        let nd = self.n_devices();
        DVector::from_fn(2 * nd, |i, _| {
            if i < nd {
                self.cost.d_p[i] * x[i] + self.cost.l_p[i]
            } else {
                self.cost.d_q[i - nd] * x[i] + self.cost.l_q[i - nd]
            }
        })
    }

    fn constraints(&self, x: &DVector<f64>) -> ConstraintEval {
        let (f_v, j_v) = self.surrogate(&self.model_v, &self.dirs_v, x);
        let (f_p, j_p) = self.surrogate(&self.model_p, &self.dirs_p, x);
        ConstraintEval { f_v, j_v, f_p, j_p }
    }

    fn delta_v(&self) -> DVector<f64> {
        self.delta_v.clone()
    }

    fn delta_p(&self) -> DVector<f64> {
        self.delta_p.clone()
    }

    fn project(&self, x: &mut DVector<f64>) {
        let nd = self.n_devices();
        for (i, dev) in self.devices.iter().enumerate() {
            match self.objective_kind {
                ObjectiveKind::CoordinatedPq => {
                    let (p, q) = project_box_disk(x[i], x[nd + i], dev.p_max, dev.s_max)
                        .expect("device caps validated at build");
                    x[i] = p;
                    x[nd + i] = q;
                }
                ObjectiveKind::Vvo => {
                    x[i] = 0.0;
                    x[nd + i] = x[nd + i].clamp(-dev.s_max, dev.s_max);
                }
            }
        }
    }

    /// Augmented-pair convention: the regularizer is `upsilon |[x; -x]|^2 / 2
    /// = upsilon |x~|^2`.
    fn primal_reg_weight(&self) -> f64 {
        2.0
    }

    fn sample_x(&self, rng: &mut rand_chacha::ChaCha8Rng) -> DVector<f64> {
        use rand::Rng;
        let nd = self.n_devices();
        let mut x = DVector::from_fn(2 * nd, |i, _| {
            let cap = if i < nd {
                self.devices[i].p_max.max(1e-6)
            } else {
                self.devices[i - nd].s_max
            };
            rng.gen_range(-cap..cap)
        });
        self.project(&mut x);
        x
    }
}

/// Linearized-power-flow baseline for radial cases: affine voltage and
/// flow models around the context, with deviation constraints
/// `|affine(x~) - mid|`. Reuses the saddle solver; Jacobians use the sign
/// subgradient of the absolute value.
pub struct AffineOpfProblem {
    pub delta_v: DVector<f64>,
    pub delta_p: DVector<f64>,
    pub cost: QuadraticCost,
    pub devices: Vec<Device>,
    pub objective_kind: ObjectiveKind,
    v_mid: DVector<f64>,
    p_mid: DVector<f64>,
    v0: DVector<f64>,
    p0: DVector<f64>,
    v_sens: DMatrix<f64>,
    p_sens: DMatrix<f64>,
}

impl AffineOpfProblem {
    /// Builds the affine model by exact differencing of the linearized
    /// power flow: squared bus voltages and branch flows are linear in
    /// the injections, so unit-injection columns recover the
    /// sensitivities without truncation error.
    pub fn new(
        case: &NetworkCase,
        context: &Context,
        cost: QuadraticCost,
        devices: Vec<Device>,
        objective_kind: ObjectiveKind,
    ) -> Result<AffineOpfProblem, OpfError> {
        if case.topology != Topology::Radial {
            return Err(OpfError::NotRadial);
        }
        let n = case.n_buses();
        let nb = case.n_branches();
        let nd = devices.len();
        let (delta_v, delta_p) = case_bounds(case);
        let v_mid = DVector::from_iterator(
            n,
            case.buses.iter().map(|b| (b.v_min + b.v_max) / 2.0),
        );
        let p_mid = DVector::from_iterator(
            nb,
            case.branches.iter().map(|b| (b.p_min + b.p_max) / 2.0),
        );
        let base_inj = Injection {
            p: context.p_u.iter().map(|v| -v).collect(),
            q: context.q_u.iter().map(|v| -v).collect(),
        };
        let base = lindistflow(case, &base_inj)?;
        let v0 = DVector::from_vec(base.v_mag.clone());
        let p0 = DVector::from_vec(base.branch_p.clone());
        let mut v_sens = DMatrix::zeros(n, 2 * nd);
        let mut p_sens = DMatrix::zeros(nb, 2 * nd);
        for (d, dev) in devices.iter().enumerate() {
            for (col, reactive) in [(d, false), (nd + d, true)] {
                let mut inj = base_inj.clone();
                if reactive {
                    inj.q[dev.bus] += 1.0;
                } else {
                    inj.p[dev.bus] += 1.0;
                }
                let sol = lindistflow(case, &inj)?;
                for i in 0..n {
                    // d sqrt(u) = du / (2 sqrt(u)); u = V^2 is exactly linear.
                    let du = sol.v_mag[i] * sol.v_mag[i] - v0[i] * v0[i];
                    v_sens[(i, col)] = du / (2.0 * v0[i]);
                }
                for b in 0..nb {
                    p_sens[(b, col)] = sol.branch_p[b] - p0[b];
                }
            }
        }
        Ok(AffineOpfProblem {
            delta_v,
            delta_p,
            cost,
            devices,
            objective_kind,
            v_mid,
            p_mid,
            v0,
            p0,
            v_sens,
            p_sens,
        })
    }
}

impl SaddleProblem for AffineOpfProblem {
    fn dim_x(&self) -> usize {
        2 * self.devices.len()
    }

    fn n_constraints_v(&self) -> usize {
        self.v0.len()
    }

    fn n_constraints_p(&self) -> usize {
        self.p0.len()
    }

    fn objective(&self, x: &DVector<f64>) -> f64 {
        let nd = self.devices.len();
        let mut h = 0.0;
        for i in 0..nd {
            h += 0.5 * self.cost.d_p[i] * x[i] * x[i] + self.cost.l_p[i] * x[i];
            h += 0.5 * self.cost.d_q[i] * x[nd + i] * x[nd + i] + self.cost.l_q[i] * x[nd + i];
        }
        h
    }

    fn objective_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        let nd = self.devices.len();
        DVector::from_fn(2 * nd, |i, _| {
            if i < nd {
                self.cost.d_p[i] * x[i] + self.cost.l_p[i]
            } else {
                self.cost.d_q[i - nd] * x[i] + self.cost.l_q[i - nd]
            }
        })
    }

    fn constraints(&self, x: &DVector<f64>) -> ConstraintEval {
        let v = &self.v0 + &self.v_sens * x;
        let p = &self.p0 + &self.p_sens * x;
        let mut f_v = DVector::zeros(v.len());
        let mut j_v = DMatrix::zeros(v.len(), x.len());
        for i in 0..v.len() {
            let diff = v[i] - self.v_mid[i];
            f_v[i] = diff.abs();
            let s = if diff >= 0.0 { 1.0 } else { -1.0 };
            for c in 0..x.len() {
                j_v[(i, c)] = s * self.v_sens[(i, c)];
            }
        }
        let mut f_p = DVector::zeros(p.len());
        let mut j_p = DMatrix::zeros(p.len(), x.len());
        for i in 0..p.len() {
            let diff = p[i] - self.p_mid[i];
            f_p[i] = diff.abs();
            let s = if diff >= 0.0 { 1.0 } else { -1.0 };
            for c in 0..x.len() {
                j_p[(i, c)] = s * self.p_sens[(i, c)];
            }
        }
        ConstraintEval { f_v, j_v, f_p, j_p }
    }

    fn delta_v(&self) -> DVector<f64> {
        self.delta_v.clone()
    }

    fn delta_p(&self) -> DVector<f64> {
        self.delta_p.clone()
    }

    fn project(&self, x: &mut DVector<f64>) {
        let nd = self.devices.len();
        for (i, dev) in self.devices.iter().enumerate() {
            match self.objective_kind {
                ObjectiveKind::CoordinatedPq => {
                    let (p, q) = project_box_disk(x[i], x[nd + i], dev.p_max, dev.s_max)
                        .expect("device caps validated at build");
                    x[i] = p;
                    x[nd + i] = q;
                }
                ObjectiveKind::Vvo => {
                    x[i] = 0.0;
                    x[nd + i] = x[nd + i].clamp(-dev.s_max, dev.s_max);
                }
            }
        }
    }

    fn primal_reg_weight(&self) -> f64 {
        2.0
    }
}
