//! Convex-surrogate optimal power flow for balanced distribution networks.
//!
//! The crate is organized around the pipeline it implements:
//!
//! 1. [`network`] — bus/branch case model, case-file parsing, per-unit conversion.
//! 2. [`powerflow`] — nonlinear Newton-Raphson power flow (the ground-truth
//!    oracle), the LinDistFlow linearization for radial feeders, and the
//!    deviation targets `|V - mid(V_min, V_max)|` / `|P - mid(P_min, P_max)|`
//!    used as learning labels.
//! 3. [`icnn`] — input convex neural networks: Softplus activations, forward
//!    evaluation, input Jacobians by forward-mode chain rule, mini-batch
//!    gradient-descent training with nonnegative-weight projection, input
//!    augmentation `[x; -x]`, and checkpoint serialization.
//! 4. [`dataset`] — scenario sampling, oracle labeling, and dataset files.
//! 5. [`saddle`] — regularized-Lagrangian primal-dual gradient solver with
//!    projection onto box/disk device feasible sets and an empirically
//!    estimated contraction step size.
//! 6. [`opf`] — the OPF problem assembled from two trained surrogates.
//! 7. [`apps`] — experiment harness: MSE comparisons, coordinated P/Q
//!    optimization, Volt/VAr optimization, and CSV report emission.

pub mod apps;
pub mod dataset;
pub mod icnn;
pub mod network;
pub mod opf;
pub mod powerflow;
pub mod saddle;

pub use network::{parse_case, Branch, Bus, BusKind, CaseDocument, NetworkCase, Topology};
pub use powerflow::{
    deviation_targets, lindistflow, newton_power_flow, DeviationTargets, Injection,
    PowerFlowSolution,
};
