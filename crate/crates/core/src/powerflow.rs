//! Ground-truth AC power flow and the LinDistFlow linearization.
//!
//! Sign convention: injections are generation-positive, so a pure load bus
//! has a negative net injection. Branch flows are sending-end real power,
//! measured at the `from` side of each branch as listed in the case.

use crate::network::{NetworkCase, Topology};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 50;

#[derive(Debug, Error)]
pub enum PowerFlowError {
    #[error("injection dimension {got} does not match bus count {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("Jacobian singular at iteration {0}")]
    SingularJacobian(usize),
    #[error("LinDistFlow requires radial topology")]
    RequiresRadial,
    #[error("power flow solution did not converge")]
    Unconverged,
    #[error("tolerance must be positive")]
    BadTolerance,
}

/// Per-bus net injections in per-unit, indexed like `case.buses`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl Injection {
    pub fn zeros(n: usize) -> Self {
        Injection {
            p: vec![0.0; n],
            q: vec![0.0; n],
        }
    }

    /// Nominal operating point: the negated case loads.
    pub fn from_case_loads(case: &NetworkCase) -> Self {
        Injection {
            p: case.buses.iter().map(|b| -b.p_load).collect(),
            q: case.buses.iter().map(|b| -b.q_load).collect(),
        }
    }

    pub fn check_dims(&self, case: &NetworkCase) -> Result<(), PowerFlowError> {
        if self.p.len() != case.n_buses() || self.q.len() != case.n_buses() {
            return Err(PowerFlowError::DimensionMismatch {
                got: self.p.len(),
                expected: case.n_buses(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    pub v_mag: Vec<f64>,
    pub v_ang: Vec<f64>,
    /// Sending-end real power per branch, case branch order.
    pub branch_p: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub max_mismatch: f64,
}

/// Deviation magnitudes relative to bound midpoints: a bound
/// `lo <= y <= hi` holds iff `|y - (lo+hi)/2| <= (hi-lo)/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationTargets {
    pub v_dev: Vec<f64>,
    pub p_dev: Vec<f64>,
    pub delta_v: Vec<f64>,
    pub delta_p: Vec<f64>,
}

/// Dense bus admittance matrix (series elements only; no shunts modeled).
fn admittance(case: &NetworkCase) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = case.n_buses();
    let mut g = vec![vec![0.0; n]; n];
    let mut b = vec![vec![0.0; n]; n];
    for br in &case.branches {
        let i = case.bus_index(br.from).expect("validated branch endpoint");
        let j = case.bus_index(br.to).expect("validated branch endpoint");
        let denom = br.r * br.r + br.x * br.x;
        let (gs, bs) = (br.r / denom, -br.x / denom);
        g[i][i] += gs;
        g[j][j] += gs;
        g[i][j] -= gs;
        g[j][i] -= gs;
        b[i][i] += bs;
        b[j][j] += bs;
        b[i][j] -= bs;
        b[j][i] -= bs;
    }
    (g, b)
}

fn calc_pq(
    g: &[Vec<f64>],
    b: &[Vec<f64>],
    v: &[f64],
    th: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = v.len();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            if g[i][j] == 0.0 && b[i][j] == 0.0 {
                continue;
            }
            let d = th[i] - th[j];
            let (s, c) = d.sin_cos();
            p[i] += v[i] * v[j] * (g[i][j] * c + b[i][j] * s);
            q[i] += v[i] * v[j] * (g[i][j] * s - b[i][j] * c);
        }
    }
    (p, q)
}

fn branch_flows(case: &NetworkCase, v: &[f64], th: &[f64]) -> Vec<f64> {
    case.branches
        .iter()
        .map(|br| {
            let i = case.bus_index(br.from).unwrap();
            let j = case.bus_index(br.to).unwrap();
            let denom = br.r * br.r + br.x * br.x;
            let (gs, bs) = (br.r / denom, -br.x / denom);
            let d = th[i] - th[j];
            v[i] * v[i] * gs - v[i] * v[j] * (gs * d.cos() + bs * d.sin())
        })
        .collect()
}

/// Full Newton-Raphson power flow in polar coordinates with flat start.
/// Works identically on radial and meshed cases. The slack bus holds
/// 1.0 pu at angle zero and balances the system.
pub fn newton_power_flow(
    case: &NetworkCase,
    inj: &Injection,
    tol: f64,
    max_iter: usize,
) -> Result<PowerFlowSolution, PowerFlowError> {
    if tol <= 0.0 {
        return Err(PowerFlowError::BadTolerance);
    }
    inj.check_dims(case)?;
    let n = case.n_buses();
    let slack = case.slack_index();
    let pq: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let m = pq.len();
    let (g, b) = admittance(case);

    let mut v = vec![1.0; n];
    let mut th = vec![0.0; n];
    let mut iterations = 0;
    let mut max_mismatch = f64::INFINITY;
    let mut converged = false;

    for iter in 0..=max_iter {
        let (p_calc, q_calc) = calc_pq(&g, &b, &v, &th);
        let mut mismatch = nalgebra::DVector::<f64>::zeros(2 * m);
        for (k, &i) in pq.iter().enumerate() {
            mismatch[k] = inj.p[i] - p_calc[i];
            mismatch[m + k] = inj.q[i] - q_calc[i];
        }
        max_mismatch = mismatch.amax();
        if max_mismatch <= tol {
            converged = true;
            iterations = iter;
            break;
        }
        if iter == max_iter {
            iterations = iter;
            break;
        }

        let mut jac = nalgebra::DMatrix::<f64>::zeros(2 * m, 2 * m);
        for (ki, &i) in pq.iter().enumerate() {
            for (kj, &j) in pq.iter().enumerate() {
                if i == j {
                    jac[(ki, kj)] = -q_calc[i] - b[i][i] * v[i] * v[i];
                    jac[(ki, m + kj)] = p_calc[i] / v[i] + g[i][i] * v[i];
                    jac[(m + ki, kj)] = p_calc[i] - g[i][i] * v[i] * v[i];
                    jac[(m + ki, m + kj)] = q_calc[i] / v[i] - b[i][i] * v[i];
                } else {
                    let d = th[i] - th[j];
                    let (s, c) = d.sin_cos();
                    let gij = g[i][j];
                    let bij = b[i][j];
                    jac[(ki, kj)] = v[i] * v[j] * (gij * s - bij * c);
                    jac[(ki, m + kj)] = v[i] * (gij * c + bij * s);
                    jac[(m + ki, kj)] = -v[i] * v[j] * (gij * c + bij * s);
                    jac[(m + ki, m + kj)] = v[i] * (gij * s - bij * c);
                }
            }
        }

        let step = jac
            .lu()
            .solve(&mismatch)
            .ok_or(PowerFlowError::SingularJacobian(iter))?;
        for (k, &i) in pq.iter().enumerate() {
            th[i] += step[k];
            v[i] += step[m + k];
        }
        iterations = iter + 1;
    }

    let branch_p = branch_flows(case, &v, &th);
    Ok(PowerFlowSolution {
        v_mag: v,
        v_ang: th,
        branch_p,
        converged,
        iterations,
        max_mismatch,
    })
}

/// Rooted tree view of a radial case: `order` is BFS from the slack,
/// `parent_branch[i]` the branch index connecting bus `i` to its parent,
/// and `toward_child[k]` whether branch `k`'s listed `from` side is the
/// parent side.
struct RadialTree {
    order: Vec<usize>,
    parent: Vec<Option<usize>>,
    parent_branch: Vec<Option<usize>>,
    toward_child: Vec<bool>,
}

fn radial_tree(case: &NetworkCase) -> RadialTree {
    let n = case.n_buses();
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (k, br) in case.branches.iter().enumerate() {
        let i = case.bus_index(br.from).unwrap();
        let j = case.bus_index(br.to).unwrap();
        adj[i].push((j, k));
        adj[j].push((i, k));
    }
    let root = case.slack_index();
    let mut parent = vec![None; n];
    let mut parent_branch = vec![None; n];
    let mut toward_child = vec![true; case.n_branches()];
    let mut order = vec![root];
    let mut visited = vec![false; n];
    visited[root] = true;
    let mut head = 0;
    while head < order.len() {
        let u = order[head];
        head += 1;
        for &(w, k) in &adj[u] {
            if !visited[w] {
                visited[w] = true;
                parent[w] = Some(u);
                parent_branch[w] = Some(k);
                let br = &case.branches[k];
                toward_child[k] = case.bus_index(br.from).unwrap() == u;
                order.push(w);
            }
        }
    }
    RadialTree {
        order,
        parent,
        parent_branch,
        toward_child,
    }
}

/// Linearized DistFlow for radial feeders: losses neglected, squared
/// voltages fall linearly with accumulated downstream flows. Angles are
/// reported as zero.
pub fn lindistflow(case: &NetworkCase, inj: &Injection) -> Result<PowerFlowSolution, PowerFlowError> {
    if case.topology != Topology::Radial {
        return Err(PowerFlowError::RequiresRadial);
    }
    inj.check_dims(case)?;
    let n = case.n_buses();
    let tree = radial_tree(case);

    // Downstream accumulation of consumption (= negated injection).
    let mut sub_p: Vec<f64> = inj.p.iter().map(|v| -v).collect();
    let mut sub_q: Vec<f64> = inj.q.iter().map(|v| -v).collect();
    for &u in tree.order.iter().rev() {
        if let Some(par) = tree.parent[u] {
            sub_p[par] += sub_p[u];
            sub_q[par] += sub_q[u];
        }
    }

    // Flow on the branch above bus u (parent -> u direction).
    let mut v_sq = vec![1.0; n];
    let mut branch_p = vec![0.0; case.n_branches()];
    for &u in &tree.order {
        let (Some(par), Some(k)) = (tree.parent[u], tree.parent_branch[u]) else {
            continue;
        };
        let br = &case.branches[k];
        v_sq[u] = v_sq[par] - 2.0 * (br.r * sub_p[u] + br.x * sub_q[u]);
        branch_p[k] = if tree.toward_child[k] { sub_p[u] } else { -sub_p[u] };
    }

    Ok(PowerFlowSolution {
        v_mag: v_sq.iter().map(|s| s.max(0.0).sqrt()).collect(),
        v_ang: vec![0.0; n],
        branch_p,
        converged: true,
        iterations: 0,
        max_mismatch: 0.0,
    })
}

/// Deviation magnitudes of a converged solution relative to the case
/// bound midpoints.
pub fn deviation_targets(
    case: &NetworkCase,
    sol: &PowerFlowSolution,
) -> Result<DeviationTargets, PowerFlowError> {
    if !sol.converged {
        return Err(PowerFlowError::Unconverged);
    }
    let v_dev = case
        .buses
        .iter()
        .zip(&sol.v_mag)
        .map(|(b, v)| (v - 0.5 * (b.v_min + b.v_max)).abs())
        .collect();
    let delta_v = case
        .buses
        .iter()
        .map(|b| 0.5 * (b.v_max - b.v_min))
        .collect();
    let p_dev = case
        .branches
        .iter()
        .zip(&sol.branch_p)
        .map(|(br, p)| (p - 0.5 * (br.p_min + br.p_max)).abs())
        .collect();
    let delta_p = case
        .branches
        .iter()
        .map(|br| 0.5 * (br.p_max - br.p_min))
        .collect();
    Ok(DeviationTargets {
        v_dev,
        p_dev,
        delta_v,
        delta_p,
    })
}
