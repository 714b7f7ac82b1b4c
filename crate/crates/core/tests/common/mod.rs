//! Test-only reference implementations shared by the integration suites.

use icnn_opf::network::{NetworkCase, Topology};
use icnn_opf::powerflow::Injection;
use num_complex::Complex64;

/// Backward/forward sweep power flow for radial cases.
///
/// Independent of the Newton solver: complex phasor arithmetic on the
/// rooted tree, iterated until the largest voltage update falls below
/// `tol`. Returns per-bus voltage magnitudes and sending-end real power
/// per branch in case branch order (measured at the listed `from` bus).
pub fn bf_sweep(
    case: &NetworkCase,
    inj: &Injection,
    tol: f64,
    max_iter: usize,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(case.topology, Topology::Radial, "sweep needs a radial case");
    let n = case.n_buses();
    let slack = case.slack_index();

    // Orient the tree away from the slack.
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (k, br) in case.branches.iter().enumerate() {
        let i = case.bus_index(br.from).unwrap();
        let j = case.bus_index(br.to).unwrap();
        adj[i].push((j, k));
        adj[j].push((i, k));
    }
    let mut order = vec![slack];
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; n]; // (parent bus, branch)
    let mut seen = vec![false; n];
    seen[slack] = true;
    let mut head = 0;
    while head < order.len() {
        let u = order[head];
        head += 1;
        for &(w, k) in &adj[u] {
            if !seen[w] {
                seen[w] = true;
                parent[w] = Some((u, k));
                order.push(w);
            }
        }
    }
    assert!(seen.iter().all(|s| *s), "case is connected");

    let z: Vec<Complex64> = case
        .branches
        .iter()
        .map(|br| Complex64::new(br.r, br.x))
        .collect();
    // Load convention: positive power drawn from the network.
    let s_load: Vec<Complex64> = (0..n)
        .map(|i| Complex64::new(-inj.p[i], -inj.q[i]))
        .collect();

    let mut v = vec![Complex64::new(1.0, 0.0); n];
    let mut i_br = vec![Complex64::new(0.0, 0.0); case.n_branches()];
    for _ in 0..max_iter {
        // Backward: accumulate branch currents from the leaves up.
        let mut down = vec![Complex64::new(0.0, 0.0); n];
        for &u in order.iter().rev() {
            let Some((par, k)) = parent[u] else { continue };
            let load_i = (s_load[u] / v[u]).conj();
            i_br[k] = load_i + down[u];
            down[par] += i_br[k];
        }
        // Forward: update voltages from the root down.
        let mut max_dv = 0.0f64;
        for &u in &order {
            let Some((par, k)) = parent[u] else { continue };
            let v_new = v[par] - z[k] * i_br[k];
            max_dv = max_dv.max((v_new - v[u]).norm());
            v[u] = v_new;
        }
        if max_dv < tol {
            break;
        }
    }

    let v_mag: Vec<f64> = v.iter().map(|c| c.norm()).collect();
    let branch_p: Vec<f64> = case
        .branches
        .iter()
        .enumerate()
        .map(|(k, br)| {
            let i = case.bus_index(br.from).unwrap();
            let j = case.bus_index(br.to).unwrap();
            // Current in the listed from -> to direction.
            let current = if parent[j] == Some((i, k)) {
                i_br[k]
            } else {
                -i_br[k]
            };
            (v[i] * current.conj()).re
        })
        .collect();
    (v_mag, branch_p)
}
