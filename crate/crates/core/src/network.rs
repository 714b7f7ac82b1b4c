//! Balanced distribution-network case model and case-file ingestion.
//!
//! A case document is a UTF-8 text file with three sections:
//!
//! ```text
//! [header]
//! s_base_kva 100.0
//! v_base_kv 12.66
//! per_unit false
//!
//! [buses]
//! # id kind p_load q_load v_min v_max has_control
//! 1 slack 0.0 0.0 0.90 1.10 0
//!
//! [branches]
//! # from to r x p_min p_max
//! 1 2 0.0922 0.0470 -5000.0 5000.0
//! ```
//!
//! Field order is fixed; `#` starts a comment. Documents flagged
//! `per_unit false` carry loads in kW/kvar, impedances in ohms and flow
//! limits in kW, and must pass through [`to_per_unit`] before a
//! [`NetworkCase`] can be built.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default branch flow limit (pu) when a document omits one: effectively
/// unconstrained for desk-scale feeders.
pub const DEFAULT_FLOW_LIMIT_PU: f64 = 10.0;

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("duplicate bus id {0}")]
    DuplicateBus(usize),
    #[error("multiple slack buses")]
    MultipleSlack,
    #[error("no slack bus")]
    NoSlack,
    #[error("graph is disconnected")]
    Disconnected,
    #[error("branch {from}-{to} references unknown bus {unknown}")]
    UnknownBus { from: usize, to: usize, unknown: usize },
    #[error("non-physical impedance on branch {from}-{to} (r={r}, x={x})")]
    NonPhysicalImpedance { from: usize, to: usize, r: f64, x: f64 },
    #[error("non-positive base (s_base_kva={s_base_kva}, v_base_kv={v_base_kv})")]
    BadBase { s_base_kva: f64, v_base_kv: f64 },
    #[error("case is not in per-unit; call to_per_unit first")]
    NotPerUnit,
    #[error("invalid bounds: {0}")]
    BadBounds(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Load,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    pub p_load: f64,
    pub q_load: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub has_control: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    pub p_min: f64,
    pub p_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Radial,
    Meshed,
}

/// Syntactic representation of a case file, before invariant validation.
/// Units depend on the `per_unit` flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseDocument {
    pub s_base_kva: f64,
    pub v_base_kv: f64,
    pub per_unit: bool,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
}

/// A validated, per-unit, connected network case. Immutable after
/// construction and safe to share read-only across workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCase {
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub s_base_kva: f64,
    pub v_base_kv: f64,
    pub topology: Topology,
}

/// One validation finding, keyed to the offending bus or branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub subject: String,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.subject, self.message)
    }
}

impl CaseDocument {
    pub fn parse(text: &str) -> Result<CaseDocument, CaseError> {
        #[derive(PartialEq)]
        enum Section {
            None,
            Header,
            Buses,
            Branches,
        }
        let mut section = Section::None;
        let mut s_base_kva = None;
        let mut v_base_kv = None;
        let mut per_unit = None;
        let mut buses = Vec::new();
        let mut branches = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            match content {
                "[header]" => {
                    section = Section::Header;
                    continue;
                }
                "[buses]" => {
                    section = Section::Buses;
                    continue;
                }
                "[branches]" => {
                    section = Section::Branches;
                    continue;
                }
                _ => {}
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            let malformed = |msg: &str| CaseError::Malformed {
                line,
                msg: msg.to_string(),
            };
            match section {
                Section::None => return Err(malformed("content before any section")),
                Section::Header => {
                    if fields.len() != 2 {
                        return Err(malformed("header entries are `key value`"));
                    }
                    match fields[0] {
                        "s_base_kva" => s_base_kva = Some(parse_f64(fields[1], line)?),
                        "v_base_kv" => v_base_kv = Some(parse_f64(fields[1], line)?),
                        "per_unit" => {
                            per_unit = Some(match fields[1] {
                                "true" => true,
                                "false" => false,
                                other => {
                                    return Err(malformed(&format!(
                                        "per_unit must be true or false, got `{other}`"
                                    )))
                                }
                            })
                        }
                        other => return Err(malformed(&format!("unknown header key `{other}`"))),
                    }
                }
                Section::Buses => {
                    if fields.len() != 7 {
                        return Err(malformed(
                            "bus rows are `id kind p_load q_load v_min v_max has_control`",
                        ));
                    }
                    buses.push(Bus {
                        id: parse_usize(fields[0], line)?,
                        kind: match fields[1] {
                            "slack" => BusKind::Slack,
                            "load" => BusKind::Load,
                            other => {
                                return Err(malformed(&format!("unknown bus kind `{other}`")))
                            }
                        },
                        p_load: parse_f64(fields[2], line)?,
                        q_load: parse_f64(fields[3], line)?,
                        v_min: parse_f64(fields[4], line)?,
                        v_max: parse_f64(fields[5], line)?,
                        has_control: match fields[6] {
                            "0" => false,
                            "1" => true,
                            other => {
                                return Err(malformed(&format!(
                                    "has_control must be 0 or 1, got `{other}`"
                                )))
                            }
                        },
                    });
                }
                Section::Branches => {
                    if fields.len() != 4 && fields.len() != 6 {
                        return Err(malformed(
                            "branch rows are `from to r x [p_min p_max]`",
                        ));
                    }
                    let (p_min, p_max) = if fields.len() == 6 {
                        (parse_f64(fields[4], line)?, parse_f64(fields[5], line)?)
                    } else {
                        (-DEFAULT_FLOW_LIMIT_PU, DEFAULT_FLOW_LIMIT_PU)
                    };
                    branches.push(Branch {
                        from: parse_usize(fields[0], line)?,
                        to: parse_usize(fields[1], line)?,
                        r: parse_f64(fields[2], line)?,
                        x: parse_f64(fields[3], line)?,
                        p_min,
                        p_max,
                    });
                }
            }
        }

        let missing = |key: &str| CaseError::Malformed {
            line: 0,
            msg: format!("missing header key `{key}`"),
        };
        Ok(CaseDocument {
            s_base_kva: s_base_kva.ok_or_else(|| missing("s_base_kva"))?,
            v_base_kv: v_base_kv.ok_or_else(|| missing("v_base_kv"))?,
            per_unit: per_unit.ok_or_else(|| missing("per_unit"))?,
            buses,
            branches,
        })
    }

    /// Renders the canonical text form; `parse` of the result round-trips.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        out.push_str("[header]\n");
        out.push_str(&format!("s_base_kva {}\n", self.s_base_kva));
        out.push_str(&format!("v_base_kv {}\n", self.v_base_kv));
        out.push_str(&format!("per_unit {}\n\n", self.per_unit));
        out.push_str("[buses]\n");
        for b in &self.buses {
            let kind = match b.kind {
                BusKind::Slack => "slack",
                BusKind::Load => "load",
            };
            out.push_str(&format!(
                "{} {} {} {} {} {} {}\n",
                b.id,
                kind,
                b.p_load,
                b.q_load,
                b.v_min,
                b.v_max,
                u8::from(b.has_control)
            ));
        }
        out.push_str("\n[branches]\n");
        for br in &self.branches {
            out.push_str(&format!(
                "{} {} {} {} {} {}\n",
                br.from, br.to, br.r, br.x, br.p_min, br.p_max
            ));
        }
        out
    }
}

fn parse_f64(s: &str, line: usize) -> Result<f64, CaseError> {
    s.parse().map_err(|_| CaseError::Malformed {
        line,
        msg: format!("expected a number, got `{s}`"),
    })
}

fn parse_usize(s: &str, line: usize) -> Result<usize, CaseError> {
    s.parse().map_err(|_| CaseError::Malformed {
        line,
        msg: format!("expected an integer id, got `{s}`"),
    })
}

/// Converts a physical-unit document to per-unit. Idempotent on documents
/// already flagged `per_unit`.
pub fn to_per_unit(doc: &CaseDocument) -> Result<CaseDocument, CaseError> {
    if doc.s_base_kva <= 0.0 || doc.v_base_kv <= 0.0 {
        return Err(CaseError::BadBase {
            s_base_kva: doc.s_base_kva,
            v_base_kv: doc.v_base_kv,
        });
    }
    if doc.per_unit {
        return Ok(doc.clone());
    }
    // Z_base in ohms: (V_base)^2 / S_base with V in volts and S in VA.
    let z_base = (doc.v_base_kv * 1e3).powi(2) / (doc.s_base_kva * 1e3);
    let s_base = doc.s_base_kva;
    let mut out = doc.clone();
    out.per_unit = true;
    for b in &mut out.buses {
        b.p_load /= s_base;
        b.q_load /= s_base;
    }
    for br in &mut out.branches {
        if br.r == 0.0 && br.x == 0.0 {
            return Err(CaseError::NonPhysicalImpedance {
                from: br.from,
                to: br.to,
                r: br.r,
                x: br.x,
            });
        }
        br.r /= z_base;
        br.x /= z_base;
        br.p_min /= s_base;
        br.p_max /= s_base;
    }
    Ok(out)
}

/// Checks every bound and connectivity invariant, one diagnostic per
/// violation. An empty list means the document can become a `NetworkCase`.
pub fn validate_bounds(doc: &CaseDocument) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let push = |diags: &mut Vec<Diagnostic>, subject: String, message: String| {
        diags.push(Diagnostic { subject, message })
    };

    if doc.s_base_kva <= 0.0 || doc.v_base_kv <= 0.0 {
        push(
            &mut diags,
            "header".into(),
            "bases must be positive".into(),
        );
    }

    let mut seen = std::collections::BTreeSet::new();
    let mut slack_count = 0;
    for b in &doc.buses {
        let subject = format!("bus {}", b.id);
        if !seen.insert(b.id) {
            push(&mut diags, subject.clone(), "duplicate bus id".into());
        }
        if b.kind == BusKind::Slack {
            slack_count += 1;
        }
        if !(b.v_min > 0.0 && b.v_min < b.v_max) {
            push(
                &mut diags,
                subject.clone(),
                format!("voltage bounds must satisfy 0 < v_min < v_max (got [{}, {}])", b.v_min, b.v_max),
            );
        }
        if !b.p_load.is_finite() || !b.q_load.is_finite() {
            push(&mut diags, subject, "loads must be finite".into());
        }
    }
    match slack_count {
        0 => push(&mut diags, "case".into(), "no slack bus".into()),
        1 => {}
        _ => push(&mut diags, "case".into(), "multiple slack buses".into()),
    }

    for (i, br) in doc.branches.iter().enumerate() {
        let subject = format!("branch {} ({}-{})", i, br.from, br.to);
        if br.from == br.to {
            push(&mut diags, subject.clone(), "self-loop branch".into());
        }
        for end in [br.from, br.to] {
            if !seen.contains(&end) {
                push(
                    &mut diags,
                    subject.clone(),
                    format!("references unknown bus {end}"),
                );
            }
        }
        if !(br.r >= 0.0 && br.x > 0.0) {
            push(
                &mut diags,
                subject.clone(),
                format!("impedance must satisfy r >= 0, x > 0 (got r={}, x={})", br.r, br.x),
            );
        }
        if !(br.p_min < br.p_max) {
            push(&mut diags, subject, "flow bounds must satisfy p_min < p_max".into());
        }
    }

    if diags.is_empty() && !is_connected(doc) {
        push(&mut diags, "case".into(), "graph is disconnected".into());
    }
    diags
}

/// Union-find over bus ids.
struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }
    fn find(&mut self, i: usize) -> usize {
        if self.parent[i] != i {
            let root = self.find(self.parent[i]);
            self.parent[i] = root;
        }
        self.parent[i]
    }
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        self.parent[ra] = rb;
        ra != rb
    }
}

fn is_connected(doc: &CaseDocument) -> bool {
    if doc.buses.is_empty() {
        return false;
    }
    let index: std::collections::BTreeMap<usize, usize> = doc
        .buses
        .iter()
        .enumerate()
        .map(|(i, b)| (b.id, i))
        .collect();
    let mut uf = UnionFind::new(doc.buses.len());
    let mut components = doc.buses.len();
    for br in &doc.branches {
        if let (Some(&a), Some(&b)) = (index.get(&br.from), index.get(&br.to)) {
            if uf.union(a, b) {
                components -= 1;
            }
        }
    }
    components == 1
}

impl NetworkCase {
    /// Validates a per-unit document and derives the topology kind.
    pub fn from_document(doc: &CaseDocument) -> Result<NetworkCase, CaseError> {
        if !doc.per_unit {
            return Err(CaseError::NotPerUnit);
        }
        let diags = validate_bounds(doc);
        if let Some(first) = diags.first() {
            // Map the most common failures onto their dedicated variants.
            let msg = first.message.as_str();
            if msg == "multiple slack buses" {
                return Err(CaseError::MultipleSlack);
            }
            if msg == "no slack bus" {
                return Err(CaseError::NoSlack);
            }
            if msg == "graph is disconnected" {
                return Err(CaseError::Disconnected);
            }
            return Err(CaseError::BadBounds(
                diags
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join("; "),
            ));
        }
        let topology = if doc.branches.len() == doc.buses.len() - 1 {
            Topology::Radial
        } else {
            Topology::Meshed
        };
        Ok(NetworkCase {
            buses: doc.buses.clone(),
            branches: doc.branches.clone(),
            s_base_kva: doc.s_base_kva,
            v_base_kv: doc.v_base_kv,
            topology,
        })
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    /// Position of a bus id in the bus list.
    pub fn bus_index(&self, id: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn slack_index(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated case has a slack bus")
    }

    /// Indices of buses hosting controllable injections, in bus-list order.
    pub fn control_indices(&self) -> Vec<usize> {
        self.buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.has_control)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_document(&self) -> CaseDocument {
        CaseDocument {
            s_base_kva: self.s_base_kva,
            v_base_kv: self.v_base_kv,
            per_unit: true,
            buses: self.buses.clone(),
            branches: self.branches.clone(),
        }
    }

    /// Stable fingerprint of the case contents, used to tie datasets and
    /// reports to the case they were generated from.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        self.to_document().serialize().hash(&mut hasher);
        hasher.finish()
    }
}

/// Full ingestion pipeline: parse, convert to per-unit, validate.
pub fn parse_case(text: &str) -> Result<NetworkCase, CaseError> {
    let doc = CaseDocument::parse(text)?;
    let doc = to_per_unit(&doc)?;
    NetworkCase::from_document(&doc)
}
