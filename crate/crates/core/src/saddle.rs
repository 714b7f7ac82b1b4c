//! Regularized-Lagrangian primal-dual gradient solver.
//!
//! For a convex objective `h` and convex surrogate constraints
//! `F(x) <= dv`, `G(x) <= dp`, the regularized Lagrangian is
//!
//! ```text
//! L(x, l_v, l_p) = h(x) + l_v' (F(x) - dv) + l_p' (G(x) - dp)
//!                  + (upsilon/2) w |x|^2 - (epsilon/2) (|l_v|^2 + |l_p|^2)
//! ```
//!
//! where `w` is the problem's primal regularization weight (`2` when `x`
//! stands for half of an augmented pair `[x; -x]`, so the augmented-norm
//! regularizer is preserved exactly). The saddle point is found by
//! projected primal-dual gradient iteration:
//!
//! ```text
//! x   <- Proj_X (x - mu * grad_x L)
//! l   <- max(0, l + mu * grad_l L)
//! ```
//!
//! With both regularizers positive, the monotone map
//! `z = (x, l) -> (grad_x L, -grad_l L)` is strongly monotone with
//! constant `eta = min(upsilon, epsilon)`, and the iteration contracts
//! with factor `rho(mu) = sqrt(1 - 2 mu eta + mu^2 L^2)` for
//! `mu < 2 eta / L^2` where `L` bounds the map's Lipschitz constant.
//! `L` is estimated by sampling since no computable expression exists;
//! a manual `mu` override is supported for tuning.
//!
//! The solver iterates directly in the reduced `x` coordinates, so the
//! augmentation coupling `w = -x` can never be violated and the feasible
//! set projection is separable per device.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SaddleError {
    #[error("regularization parameters must be positive (upsilon {upsilon}, epsilon {epsilon})")]
    NonPositiveRegularization { upsilon: f64, epsilon: f64 },
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
    #[error("disk radius must be positive, got {0}")]
    EmptyDisk(f64),
    #[error("active-power cap must be nonnegative, got {0}")]
    NegativeCap(f64),
    #[error("non-finite iterate at iteration {0}: step size too large")]
    NonFinite(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Constraint values and reduced Jacobians at a point.
pub struct ConstraintEval {
    pub f_v: DVector<f64>,
    pub j_v: DMatrix<f64>,
    pub f_p: DVector<f64>,
    pub j_p: DMatrix<f64>,
}

/// A saddle-point problem instance: convex objective, two families of
/// convex surrogate constraints with bound vectors, and a feasible-set
/// projection for the primal variable.
pub trait SaddleProblem {
    fn dim_x(&self) -> usize;
    fn n_constraints_v(&self) -> usize;
    fn n_constraints_p(&self) -> usize;
    fn objective(&self, x: &DVector<f64>) -> f64;
    fn objective_grad(&self, x: &DVector<f64>) -> DVector<f64>;
    fn constraints(&self, x: &DVector<f64>) -> ConstraintEval;
    fn delta_v(&self) -> DVector<f64>;
    fn delta_p(&self) -> DVector<f64>;
    fn project(&self, x: &mut DVector<f64>);
    /// Weight on `upsilon |x|^2` in the regularizer; `2.0` when the
    /// iterate is half of an augmented pair.
    fn primal_reg_weight(&self) -> f64 {
        1.0
    }
    /// Random feasible primal point for Lipschitz estimation.
    fn sample_x(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let mut x = DVector::from_fn(self.dim_x(), |_, _| rng.gen_range(-1.0..1.0));
        self.project(&mut x);
        x
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub upsilon: f64,
    pub epsilon: f64,
    /// Explicit step size; `None` selects it from the contraction bound.
    pub mu: Option<f64>,
    pub max_iter: usize,
    /// Infinity-norm iterate-change stopping threshold.
    pub stop_tol: f64,
    pub lipschitz_samples: usize,
    /// Step-size safety factor in (0, 1].
    pub safety: f64,
    /// Dual sampling cap for Lipschitz estimation.
    pub lambda_cap: f64,
    pub seed: u64,
    /// History record stride (1 = every iteration).
    pub history_every: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            upsilon: 1e-3,
            epsilon: 1e-3,
            mu: None,
            max_iter: 20_000,
            stop_tol: 1e-6,
            lipschitz_samples: 200,
            safety: 0.9,
            lambda_cap: 100.0,
            seed: 0,
            history_every: 1,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SaddleError> {
        if self.upsilon <= 0.0 || self.epsilon <= 0.0 {
            return Err(SaddleError::NonPositiveRegularization {
                upsilon: self.upsilon,
                epsilon: self.epsilon,
            });
        }
        if let Some(mu) = self.mu {
            if mu <= 0.0 {
                return Err(SaddleError::InvalidConfig("mu must be positive".into()));
            }
        }
        if !(self.safety > 0.0 && self.safety <= 1.0) {
            return Err(SaddleError::InvalidConfig("safety must be in (0, 1]".into()));
        }
        if self.stop_tol <= 0.0 || self.max_iter == 0 || self.history_every == 0 {
            return Err(SaddleError::InvalidConfig(
                "stop_tol, max_iter, history_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iter: usize,
    pub objective: f64,
    /// Signed max over all surrogate constraint margins; positive means
    /// a surrogate constraint is violated at the iterate.
    pub max_surrogate_violation: f64,
    pub step_norm: f64,
    pub lambda_max: f64,
}

#[derive(Debug, Clone)]
pub struct SaddleState {
    pub x_tilde: DVector<f64>,
    pub lambda_v: DVector<f64>,
    pub lambda_p: DVector<f64>,
    pub iter: usize,
    pub converged: bool,
    pub mu: f64,
    pub history: Vec<HistoryRecord>,
}

/// Regularized Lagrangian value at `(x, lambda)`.
pub fn lagrangian_value<P: SaddleProblem>(
    prob: &P,
    cfg: &SolverConfig,
    x: &DVector<f64>,
    lambda_v: &DVector<f64>,
    lambda_p: &DVector<f64>,
) -> f64 {
    let ce = prob.constraints(x);
    let margin_v = ce.f_v - prob.delta_v();
    let margin_p = ce.f_p - prob.delta_p();
    prob.objective(x)
        + lambda_v.dot(&margin_v)
        + lambda_p.dot(&margin_p)
        + 0.5 * cfg.upsilon * prob.primal_reg_weight() * x.norm_squared()
        - 0.5 * cfg.epsilon * (lambda_v.norm_squared() + lambda_p.norm_squared())
}

/// Gradient triple `(grad_x L, grad_lv L, grad_lp L)`.
pub fn phi_eval<P: SaddleProblem>(
    prob: &P,
    cfg: &SolverConfig,
    x: &DVector<f64>,
    lambda_v: &DVector<f64>,
    lambda_p: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let ce = prob.constraints(x);
    let gx = prob.objective_grad(x)
        + ce.j_v.transpose() * lambda_v
        + ce.j_p.transpose() * lambda_p
        + x * (cfg.upsilon * prob.primal_reg_weight());
    let gv = ce.f_v - prob.delta_v() - lambda_v * cfg.epsilon;
    let gp = ce.f_p - prob.delta_p() - lambda_p * cfg.epsilon;
    (gx, gv, gp)
}

/// The monotone map `(grad_x L, -grad_lv L, -grad_lp L)` stacked into one
/// vector, for Lipschitz and monotonicity estimation.
pub fn phi_monotone<P: SaddleProblem>(
    prob: &P,
    cfg: &SolverConfig,
    z: &DVector<f64>,
) -> DVector<f64> {
    let (x, lv, lp) = split_z(prob, z);
    let (gx, gv, gp) = phi_eval(prob, cfg, &x, &lv, &lp);
    stack(&[&gx, &(-gv), &(-gp)])
}

fn split_z<P: SaddleProblem>(
    prob: &P,
    z: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let (nx, nv, np) = (prob.dim_x(), prob.n_constraints_v(), prob.n_constraints_p());
    (
        z.rows(0, nx).into(),
        z.rows(nx, nv).into(),
        z.rows(nx + nv, np).into(),
    )
}

fn stack(parts: &[&DVector<f64>]) -> DVector<f64> {
    let n = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(n);
    let mut at = 0;
    for p in parts {
        out.rows_mut(at, p.len()).copy_from(*p);
        at += p.len();
    }
    out
}

/// Euclidean projection of `(p, q)` onto `{0 <= p <= p_bar} ∩ {p^2 + q^2 <= s_bar^2}`.
///
/// Candidate enumeration: box clamp, radial disk scaling, and the two
/// box-boundary arcs; the closest feasible candidate is the projection
/// because the set is the intersection of a box and a disk and every
/// projection lies on one of those candidate loci.
pub fn project_box_disk(
    p: f64,
    q: f64,
    p_bar: f64,
    s_bar: f64,
) -> Result<(f64, f64), SaddleError> {
    if s_bar <= 0.0 {
        return Err(SaddleError::EmptyDisk(s_bar));
    }
    if p_bar < 0.0 {
        return Err(SaddleError::NegativeCap(p_bar));
    }
    let s2 = s_bar * s_bar;
    let feasible = |cp: f64, cq: f64| cp >= 0.0 && cp <= p_bar && cp * cp + cq * cq <= s2 + 1e-15;
    if feasible(p, q) {
        return Ok((p, q));
    }
    let mut candidates: Vec<(f64, f64)> = Vec::with_capacity(4);
    let pc = p.clamp(0.0, p_bar);
    candidates.push((pc, q));
    let r = (p * p + q * q).sqrt();
    if r > s_bar {
        candidates.push((p * s_bar / r, q * s_bar / r));
    }
    for pb in [0.0, p_bar.min(s_bar)] {
        let head = (s2 - pb * pb).max(0.0).sqrt();
        candidates.push((pb, q.clamp(-head, head)));
    }
    let mut best = None;
    let mut best_d = f64::INFINITY;
    for (cp, cq) in candidates {
        if !feasible(cp, cq) {
            continue;
        }
        let d = (cp - p).powi(2) + (cq - q).powi(2);
        if d < best_d {
            best_d = d;
            best = Some((cp, cq));
        }
    }
    Ok(best.expect("set is nonempty: (0, 0) is always feasible"))
}

pub struct StepSizeEstimate {
    pub mu: f64,
    pub l_hat: f64,
    pub eta: f64,
    /// True when the raw formula fell below the 1e-8 floor.
    pub capped: bool,
}

/// Step size from the contraction bound `mu = safety * 2 eta / L^2`, with
/// the Lipschitz constant of the monotone map estimated as the max
/// difference quotient over sampled pairs, inflated by 2x.
pub fn estimate_step_size<P: SaddleProblem>(
    prob: &P,
    cfg: &SolverConfig,
) -> Result<StepSizeEstimate, SaddleError> {
    cfg.validate()?;
    let eta = cfg.upsilon.min(cfg.epsilon);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x11b5_c417);
    let nl = prob.n_constraints_v() + prob.n_constraints_p();
    let sample_z = |rng: &mut ChaCha8Rng, prob: &P| {
        let x = prob.sample_x(rng);
        let l = DVector::from_fn(nl, |_, _| rng.gen_range(0.0..cfg.lambda_cap));
        stack(&[&x, &l])
    };
    let mut l_max = 0.0f64;
    for _ in 0..cfg.lipschitz_samples.max(1) {
        let z1 = sample_z(&mut rng, prob);
        let z2 = sample_z(&mut rng, prob);
        let dz = (&z1 - &z2).norm();
        if dz < 1e-12 {
            continue;
        }
        let dphi = (phi_monotone(prob, cfg, &z1) - phi_monotone(prob, cfg, &z2)).norm();
        l_max = l_max.max(dphi / dz);
    }
    let l_hat = 2.0 * l_max.max(1e-12);
    let raw = cfg.safety * 2.0 * eta / (l_hat * l_hat);
    let capped = raw < 1e-8;
    Ok(StepSizeEstimate {
        mu: raw.max(1e-8),
        l_hat,
        eta,
        capped,
    })
}

/// One projected primal-dual iteration in place; returns the
/// infinity-norm iterate change.
pub fn step<P: SaddleProblem>(
    prob: &P,
    cfg: &SolverConfig,
    mu: f64,
    x: &mut DVector<f64>,
    lambda_v: &mut DVector<f64>,
    lambda_p: &mut DVector<f64>,
) -> f64 {
    let (gx, gv, gp) = phi_eval(prob, cfg, x, lambda_v, lambda_p);
    let mut x_new = &*x - gx * mu;
    prob.project(&mut x_new);
    let lv_new = (&*lambda_v + gv * mu).map(|v| v.max(0.0));
    let lp_new = (&*lambda_p + gp * mu).map(|v| v.max(0.0));
    let mut delta = (&x_new - &*x).amax();
    delta = delta.max((&lv_new - &*lambda_v).amax());
    delta = delta.max((&lp_new - &*lambda_p).amax());
    *x = x_new;
    *lambda_v = lv_new;
    *lambda_p = lp_new;
    delta
}

/// Runs the projected primal-dual iteration from `x0` (projected; zero
/// duals) until the iterate change drops below `stop_tol` or `max_iter`.
pub fn solve_saddle<P: SaddleProblem>(
    prob: &P,
    cfg: &SolverConfig,
    x0: Option<DVector<f64>>,
) -> Result<SaddleState, SaddleError> {
    solve_saddle_observed(prob, cfg, x0, |_, _, _, _| {})
}

/// [`solve_saddle`] with a per-iteration observer
/// `(iter, x, lambda_v, lambda_p)`, called at iteration 0 and after every
/// step.
pub fn solve_saddle_observed<P, F>(
    prob: &P,
    cfg: &SolverConfig,
    x0: Option<DVector<f64>>,
    mut observe: F,
) -> Result<SaddleState, SaddleError>
where
    P: SaddleProblem,
    F: FnMut(usize, &DVector<f64>, &DVector<f64>, &DVector<f64>),
{
    cfg.validate()?;
    let mu = match cfg.mu {
        Some(mu) => mu,
        None => estimate_step_size(prob, cfg)?.mu,
    };
    let mut x = x0.unwrap_or_else(|| DVector::zeros(prob.dim_x()));
    if x.len() != prob.dim_x() {
        return Err(SaddleError::Dimension(format!(
            "x0 has {} entries, problem has {}",
            x.len(),
            prob.dim_x()
        )));
    }
    prob.project(&mut x);
    let mut lv = DVector::zeros(prob.n_constraints_v());
    let mut lp = DVector::zeros(prob.n_constraints_p());

    let mut history = Vec::new();
    let mut converged = false;
    let mut iter = 0;
    let record =
        |history: &mut Vec<HistoryRecord>, prob: &P, iter, x: &DVector<f64>, lv: &DVector<f64>, lp: &DVector<f64>, step_norm| {
            let ce = prob.constraints(x);
            let mv = (ce.f_v - prob.delta_v())
                .iter()
                .chain((ce.f_p - prob.delta_p()).iter())
                .fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let lmax = lv.iter().chain(lp.iter()).fold(0.0f64, |a, &v| a.max(v));
            history.push(HistoryRecord {
                iter,
                objective: prob.objective(x),
                max_surrogate_violation: mv,
                step_norm,
                lambda_max: lmax,
            });
        };
    record(&mut history, prob, 0, &x, &lv, &lp, f64::NAN);
    observe(0, &x, &lv, &lp);
    while iter < cfg.max_iter {
        let delta = step(prob, cfg, mu, &mut x, &mut lv, &mut lp);
        iter += 1;
        if !delta.is_finite() || !x.iter().all(|v| v.is_finite()) {
            return Err(SaddleError::NonFinite(iter));
        }
        observe(iter, &x, &lv, &lp);
        if iter % cfg.history_every == 0 || delta <= cfg.stop_tol || iter == cfg.max_iter {
            record(&mut history, prob, iter, &x, &lv, &lp, delta);
        }
        if delta <= cfg.stop_tol {
            converged = true;
            break;
        }
    }
    Ok(SaddleState {
        x_tilde: x,
        lambda_v: lv,
        lambda_p: lp,
        iter,
        converged,
        mu,
        history,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub upsilon: f64,
    pub epsilon: f64,
    pub objective: f64,
    pub max_violation: f64,
}

/// Re-solves with `(upsilon, epsilon)` halved `halvings` times to expose
/// the regularization bias trend.
pub fn regularization_sweep<P: SaddleProblem>(
    prob: &P,
    cfg: &SolverConfig,
    halvings: usize,
) -> Result<Vec<SweepRow>, SaddleError> {
    let mut rows = Vec::with_capacity(halvings + 1);
    let mut c = cfg.clone();
    for _ in 0..=halvings {
        let state = solve_saddle(prob, &c, None)?;
        let last = state.history.last().expect("history never empty");
        rows.push(SweepRow {
            upsilon: c.upsilon,
            epsilon: c.epsilon,
            objective: last.objective,
            max_violation: last.max_surrogate_violation,
        });
        c.upsilon /= 2.0;
        c.epsilon /= 2.0;
    }
    Ok(rows)
}
