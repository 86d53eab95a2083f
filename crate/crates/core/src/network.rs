//! Radial feeder data model and feeder-file ingestion.
//!
//! All electrical quantities are per-unit on the bases declared in the file
//! header. Voltages are written to and read from files as magnitudes; the
//! model exposes squared magnitudes (`*_sq` accessors) because every equation
//! downstream works in squared voltage.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type BusId = u32;

/// Flat-start voltage magnitude used when a bus does not declare one.
pub const DEFAULT_V_INIT: f64 = 1.02;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    #[error("parse error")]
    Parse(#[from] serde_json::Error),
    #[error("validation error: multiple roots ({0} and {1})")]
    MultipleRoots(BusId, BusId),
    #[error("validation error: no root bus")]
    NoRoot,
    #[error("validation error: duplicate bus id {0}")]
    DuplicateBus(BusId),
    #[error("unknown bus id {0}")]
    UnknownBus(BusId),
    #[error("validation error: not a tree ({0})")]
    NotATree(String),
    #[error("validation error: bus {bus}: DER output {p_out} exceeds rating {s_rating}")]
    DerOverRated { bus: BusId, p_out: f64, s_rating: f64 },
    #[error("validation error: {0}")]
    InvalidValue(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerSpec {
    pub s_rating: f64,
    pub p_out: f64,
}

impl DerSpec {
    /// Half-width of the reactive capability interval, `sqrt(S^2 - p^2)`.
    pub fn q_headroom(&self) -> f64 {
        (self.s_rating * self.s_rating - self.p_out * self.p_out)
            .max(0.0)
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: BusId,
    pub parent: Option<BusId>,
    pub p_load: f64,
    pub q_load: f64,
    pub der: Option<DerSpec>,
    /// Initial voltage magnitude (pu).
    pub v_init: f64,
}

impl Bus {
    pub fn v_squared_init(&self) -> f64 {
        self.v_init * self.v_init
    }

    /// Active DER injection, zero without a DER.
    pub fn p_der(&self) -> f64 {
        self.der.map_or(0.0, |d| d.p_out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub from_bus: BusId,
    pub to_bus: BusId,
    pub r: f64,
    pub x: f64,
    pub i_rated: f64,
}

impl Line {
    /// `r^2 + x^2`
    pub fn z_sq(&self) -> f64 {
        self.r * self.r + self.x * self.x
    }

    /// Zero-impedance jumper.
    pub fn is_jumper(&self) -> bool {
        self.r == 0.0 && self.x == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub base_kva: f64,
    pub base_kv: f64,
    #[serde(default = "default_v_min")]
    pub v_min: f64,
    #[serde(default = "default_v_max")]
    pub v_max: f64,
    #[serde(default = "default_v_ref")]
    pub v_ref: f64,
}

fn default_v_min() -> f64 {
    0.95
}
fn default_v_max() -> f64 {
    1.05
}
fn default_v_ref() -> f64 {
    1.0
}

impl Default for Header {
    fn default() -> Self {
        Header {
            base_kva: 1000.0,
            base_kv: 4.16,
            v_min: default_v_min(),
            v_max: default_v_max(),
            v_ref: default_v_ref(),
        }
    }
}

/// Validated, immutable radial feeder.
#[derive(Debug, Clone, PartialEq)]
pub struct FeederModel {
    header: Header,
    buses: Vec<Bus>,
    lines: Vec<Line>,
    root: BusId,
    index: BTreeMap<BusId, usize>,
    children: Vec<Vec<BusId>>,
    line_into: Vec<Option<usize>>,
    bfs: Vec<BusId>,
    depth: Vec<usize>,
}

impl FeederModel {
    /// Validates the tree invariants and builds the lookup tables.
    pub fn new(header: Header, mut buses: Vec<Bus>, lines: Vec<Line>) -> Result<Self, NetworkError> {
        check_header(&header)?;
        buses.sort_by_key(|b| b.id);
        let mut index = BTreeMap::new();
        for (k, b) in buses.iter().enumerate() {
            if index.insert(b.id, k).is_some() {
                return Err(NetworkError::DuplicateBus(b.id));
            }
            check_bus(b)?;
        }

        let mut root = None;
        for b in &buses {
            if b.parent.is_none() {
                if let Some(r) = root {
                    return Err(NetworkError::MultipleRoots(r, b.id));
                }
                root = Some(b.id);
            }
        }
        let root = root.ok_or(NetworkError::NoRoot)?;

        if lines.len() + 1 != buses.len() {
            return Err(NetworkError::NotATree(format!(
                "{} lines for {} buses",
                lines.len(),
                buses.len()
            )));
        }

        let mut line_into = vec![None; buses.len()];
        let mut children = vec![Vec::new(); buses.len()];
        for (k, l) in lines.iter().enumerate() {
            check_line(l)?;
            let to = *index.get(&l.to_bus).ok_or(NetworkError::UnknownBus(l.to_bus))?;
            let from = *index
                .get(&l.from_bus)
                .ok_or(NetworkError::UnknownBus(l.from_bus))?;
            if buses[to].parent != Some(l.from_bus) {
                return Err(NetworkError::NotATree(format!(
                    "line {}->{} disagrees with parent of bus {}",
                    l.from_bus, l.to_bus, l.to_bus
                )));
            }
            if line_into[to].replace(k).is_some() {
                return Err(NetworkError::NotATree(format!(
                    "bus {} fed by more than one line",
                    l.to_bus
                )));
            }
            children[from].push(l.to_bus);
        }
        for b in &buses {
            if let Some(p) = b.parent {
                if !index.contains_key(&p) {
                    return Err(NetworkError::UnknownBus(p));
                }
            }
        }
        for c in &mut children {
            c.sort_unstable();
        }

        let mut depth = vec![usize::MAX; buses.len()];
        let mut bfs = Vec::with_capacity(buses.len());
        let mut queue = VecDeque::from([root]);
        depth[index[&root]] = 0;
        while let Some(id) = queue.pop_front() {
            bfs.push(id);
            let k = index[&id];
            for &c in &children[k] {
                let ck = index[&c];
                if depth[ck] != usize::MAX {
                    return Err(NetworkError::NotATree(format!("bus {c} reached twice")));
                }
                depth[ck] = depth[k] + 1;
                queue.push_back(c);
            }
        }
        if bfs.len() != buses.len() {
            let missing = buses
                .iter()
                .find(|b| depth[index[&b.id]] == usize::MAX)
                .map(|b| b.id)
                .unwrap_or_default();
            return Err(NetworkError::NotATree(format!(
                "bus {missing} not connected to root {root}"
            )));
        }

        Ok(FeederModel {
            header,
            buses,
            lines,
            root,
            index,
            children,
            line_into,
            bfs,
            depth,
        })
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    pub fn root(&self) -> BusId {
        self.root
    }

    /// Buses in ascending id order.
    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn bus(&self, id: BusId) -> Result<&Bus, NetworkError> {
        self.index
            .get(&id)
            .map(|&k| &self.buses[k])
            .ok_or(NetworkError::UnknownBus(id))
    }

    pub fn contains(&self, id: BusId) -> bool {
        self.index.contains_key(&id)
    }

    /// Children of `bus` in ascending id order.
    pub fn children_of(&self, bus: BusId) -> Result<&[BusId], NetworkError> {
        self.index
            .get(&bus)
            .map(|&k| self.children[k].as_slice())
            .ok_or(NetworkError::UnknownBus(bus))
    }

    /// The line feeding `bus` from its parent; `None` for the root.
    pub fn line_into(&self, bus: BusId) -> Result<Option<&Line>, NetworkError> {
        self.index
            .get(&bus)
            .map(|&k| self.line_into[k].map(|l| &self.lines[l]))
            .ok_or(NetworkError::UnknownBus(bus))
    }

    pub fn depth(&self, bus: BusId) -> Result<usize, NetworkError> {
        self.index
            .get(&bus)
            .map(|&k| self.depth[k])
            .ok_or(NetworkError::UnknownBus(bus))
    }

    /// Breadth-first order from the root, children visited in ascending id.
    pub fn bfs_order(&self) -> &[BusId] {
        &self.bfs
    }

    /// Every bus except the root, ascending id. Each owns exactly one line.
    pub fn non_root_buses(&self) -> impl Iterator<Item = &Bus> + '_ {
        self.buses.iter().filter(move |b| b.id != self.root)
    }

    pub fn der_buses(&self) -> Vec<BusId> {
        self.buses
            .iter()
            .filter(|b| b.der.is_some())
            .map(|b| b.id)
            .collect()
    }

    /// Path graph rooted at one end.
    pub fn is_line_network(&self) -> bool {
        self.children.iter().all(|c| c.len() <= 1)
    }

    pub fn jumpers(&self) -> Vec<BusId> {
        self.lines
            .iter()
            .filter(|l| l.is_jumper())
            .map(|l| l.to_bus)
            .collect()
    }

    pub fn v_min_sq(&self) -> f64 {
        self.header.v_min * self.header.v_min
    }

    pub fn v_max_sq(&self) -> f64 {
        self.header.v_max * self.header.v_max
    }

    pub fn v_ref_sq(&self) -> f64 {
        self.header.v_ref * self.header.v_ref
    }

    pub fn len(&self) -> usize {
        self.buses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buses.is_empty()
    }

    /// Serializes to the feeder document format.
    pub fn to_document(&self) -> FeederDocument {
        FeederDocument {
            header: self.header,
            buses: self
                .buses
                .iter()
                .map(|b| BusRecord {
                    id: b.id,
                    parent: b.parent,
                    p_load: b.p_load,
                    q_load: b.q_load,
                    der: b.der,
                    v_init: Some(b.v_init),
                })
                .collect(),
            lines: self
                .lines
                .iter()
                .map(|l| LineRecord {
                    from: l.from_bus,
                    to: l.to_bus,
                    r: l.r,
                    x: l.x,
                    i_rated: l.i_rated,
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("feeder serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NetworkError> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}

fn check_finite(what: &str, v: f64) -> Result<(), NetworkError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(NetworkError::InvalidValue(format!("{what} is not finite")))
    }
}

fn check_header(h: &Header) -> Result<(), NetworkError> {
    for (name, v) in [
        ("base_kva", h.base_kva),
        ("base_kv", h.base_kv),
        ("v_min", h.v_min),
        ("v_max", h.v_max),
        ("v_ref", h.v_ref),
    ] {
        check_finite(name, v)?;
        if v <= 0.0 {
            return Err(NetworkError::InvalidValue(format!("{name} must be positive")));
        }
    }
    if h.v_min > h.v_max {
        return Err(NetworkError::InvalidValue("v_min exceeds v_max".into()));
    }
    Ok(())
}

fn check_bus(b: &Bus) -> Result<(), NetworkError> {
    check_finite("p_load", b.p_load)?;
    check_finite("q_load", b.q_load)?;
    check_finite("v_init", b.v_init)?;
    if b.v_init <= 0.0 {
        return Err(NetworkError::InvalidValue(format!(
            "bus {}: v_init must be positive",
            b.id
        )));
    }
    if b.parent == Some(b.id) {
        return Err(NetworkError::NotATree(format!("bus {} is its own parent", b.id)));
    }
    if let Some(d) = b.der {
        check_finite("s_rating", d.s_rating)?;
        check_finite("p_out", d.p_out)?;
        if d.s_rating <= 0.0 || d.p_out < 0.0 {
            return Err(NetworkError::InvalidValue(format!(
                "bus {}: DER needs s_rating > 0 and p_out >= 0",
                b.id
            )));
        }
        if d.p_out > d.s_rating {
            return Err(NetworkError::DerOverRated {
                bus: b.id,
                p_out: d.p_out,
                s_rating: d.s_rating,
            });
        }
    }
    Ok(())
}

fn check_line(l: &Line) -> Result<(), NetworkError> {
    check_finite("r", l.r)?;
    check_finite("x", l.x)?;
    check_finite("i_rated", l.i_rated)?;
    if l.r < 0.0 || l.x < 0.0 {
        return Err(NetworkError::InvalidValue(format!(
            "line {}->{}: negative impedance",
            l.from_bus, l.to_bus
        )));
    }
    if l.i_rated <= 0.0 {
        return Err(NetworkError::InvalidValue(format!(
            "line {}->{}: i_rated must be positive",
            l.from_bus, l.to_bus
        )));
    }
    Ok(())
}

// ---- file format ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeederDocument {
    pub header: Header,
    pub buses: Vec<BusRecord>,
    pub lines: Vec<LineRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusRecord {
    pub id: BusId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<BusId>,
    pub p_load: f64,
    pub q_load: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub der: Option<DerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_init: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineRecord {
    pub from: BusId,
    pub to: BusId,
    pub r: f64,
    pub x: f64,
    pub i_rated: f64,
}

impl TryFrom<FeederDocument> for FeederModel {
    type Error = NetworkError;

    fn try_from(doc: FeederDocument) -> Result<Self, NetworkError> {
        let buses = doc
            .buses
            .into_iter()
            .map(|b| Bus {
                id: b.id,
                parent: b.parent,
                p_load: b.p_load,
                q_load: b.q_load,
                der: b.der,
                v_init: b.v_init.unwrap_or(DEFAULT_V_INIT),
            })
            .collect();
        let lines = doc
            .lines
            .into_iter()
            .map(|l| Line {
                from_bus: l.from,
                to_bus: l.to,
                r: l.r,
                x: l.x,
                i_rated: l.i_rated,
            })
            .collect();
        FeederModel::new(doc.header, buses, lines)
    }
}

/// Parses and validates a feeder document. Never panics on arbitrary input.
pub fn parse_feeder(text: &str) -> Result<FeederModel, NetworkError> {
    let doc: FeederDocument = serde_json::from_str(text)?;
    FeederModel::try_from(doc)
}

pub fn load_feeder(path: impl AsRef<Path>) -> Result<FeederModel, NetworkError> {
    let text = std::fs::read_to_string(path)?;
    parse_feeder(&text)
}

// ---- synthetic feeders ----

/// Electrical parameters for generated feeders.
///
/// With `spread > 0` every per-bus value is multiplied by an independent
/// factor drawn uniformly from `[1 - spread, 1 + spread]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub r: f64,
    pub x: f64,
    pub p_load: f64,
    pub q_load: f64,
    /// Fraction of non-root buses carrying a DER, in `[0, 1]`.
    pub der_density: f64,
    pub s_rating: f64,
    pub p_out: f64,
    pub i_rated: f64,
    pub spread: f64,
    pub seed: u64,
    pub header: Header,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            r: 0.01,
            x: 0.02,
            p_load: 0.1,
            q_load: 0.05,
            der_density: 1.0,
            s_rating: 0.2,
            p_out: 0.05,
            i_rated: 5.0,
            spread: 0.0,
            seed: 0,
            header: Header::default(),
        }
    }
}

impl GeneratorConfig {
    fn validate(&self) -> Result<(), NetworkError> {
        for (name, v) in [
            ("r", self.r),
            ("x", self.x),
            ("p_load", self.p_load),
            ("q_load", self.q_load),
            ("der_density", self.der_density),
            ("s_rating", self.s_rating),
            ("p_out", self.p_out),
            ("i_rated", self.i_rated),
            ("spread", self.spread),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(NetworkError::InvalidValue(format!(
                    "generator parameter {name} must be finite and nonnegative"
                )));
            }
        }
        if self.der_density > 1.0 {
            return Err(NetworkError::InvalidValue("der_density must be in [0, 1]".into()));
        }
        if self.spread >= 1.0 {
            return Err(NetworkError::InvalidValue("spread must be below 1".into()));
        }
        if self.i_rated == 0.0 {
            return Err(NetworkError::InvalidValue("i_rated must be positive".into()));
        }
        if self.der_density > 0.0 && (self.s_rating == 0.0 || self.p_out > self.s_rating) {
            return Err(NetworkError::InvalidValue(
                "DER parameters need 0 <= p_out <= s_rating, s_rating > 0".into(),
            ));
        }
        check_header(&self.header)
    }
}

/// Tree shapes for [`generate_tree_feeder`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TreeShape {
    /// Complete tree: `levels` levels including the root, every interior bus
    /// has `branching` children.
    Full { branching: usize, levels: usize },
    /// `buses` buses; each new bus attaches to a uniformly chosen earlier one.
    Random { buses: usize },
}

struct Sampler {
    rng: ChaCha8Rng,
    spread: f64,
}

impl Sampler {
    fn jitter(&mut self, v: f64) -> f64 {
        if self.spread == 0.0 {
            v
        } else {
            v * self.rng.gen_range(1.0 - self.spread..=1.0 + self.spread)
        }
    }
}

fn build_from_parents(parents: &[Option<BusId>], cfg: &GeneratorConfig) -> Result<FeederModel, NetworkError> {
    let mut s = Sampler {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        spread: cfg.spread,
    };
    let n_non_root = parents.len().saturating_sub(1);
    let n_der = (cfg.der_density * n_non_root as f64).round() as usize;
    // DERs go to evenly spaced buses so density sweeps stay comparable.
    let der_slots: Vec<bool> = (0..n_non_root)
        .map(|k| n_der > 0 && (k * n_der) / n_non_root != ((k + 1) * n_der) / n_non_root)
        .collect();

    let mut buses = Vec::with_capacity(parents.len());
    let mut lines = Vec::with_capacity(n_non_root);
    for (k, parent) in parents.iter().enumerate() {
        let id = k as BusId + 1;
        let Some(parent) = *parent else {
            buses.push(Bus {
                id,
                parent: None,
                p_load: 0.0,
                q_load: 0.0,
                der: None,
                v_init: DEFAULT_V_INIT,
            });
            continue;
        };
        let p_load = s.jitter(cfg.p_load);
        let q_load = s.jitter(cfg.q_load);
        let r = s.jitter(cfg.r);
        let x = s.jitter(cfg.x);
        let der = if der_slots[k - 1] {
            let s_rating = s.jitter(cfg.s_rating);
            let p_out = s.jitter(cfg.p_out).min(s_rating);
            Some(DerSpec { s_rating, p_out })
        } else {
            None
        };
        buses.push(Bus {
            id,
            parent: Some(parent),
            p_load,
            q_load,
            der,
            v_init: DEFAULT_V_INIT,
        });
        lines.push(Line {
            from_bus: parent,
            to_bus: id,
            r,
            x,
            i_rated: cfg.i_rated,
        });
    }
    FeederModel::new(cfg.header, buses, lines)
}

/// Path feeder `1 - 2 - ... - n` rooted at bus 1.
pub fn generate_line_feeder(n: usize, cfg: &GeneratorConfig) -> Result<FeederModel, NetworkError> {
    if n < 2 {
        return Err(NetworkError::InvalidValue("line feeder needs n >= 2".into()));
    }
    cfg.validate()?;
    let parents: Vec<Option<BusId>> = (0..n)
        .map(|k| if k == 0 { None } else { Some(k as BusId) })
        .collect();
    build_from_parents(&parents, cfg)
}

pub fn generate_tree_feeder(shape: TreeShape, cfg: &GeneratorConfig) -> Result<FeederModel, NetworkError> {
    cfg.validate()?;
    let parents: Vec<Option<BusId>> = match shape {
        TreeShape::Full { branching, levels } => {
            if branching == 0 || levels < 2 {
                return Err(NetworkError::InvalidValue(
                    "full tree needs branching >= 1 and levels >= 2".into(),
                ));
            }
            let total: usize = (0..levels).map(|d| branching.pow(d as u32)).sum();
            if total > 100_000 {
                return Err(NetworkError::InvalidValue("tree too large".into()));
            }
            (0..total)
                .map(|k| {
                    if k == 0 {
                        None
                    } else {
                        Some(((k - 1) / branching) as BusId + 1)
                    }
                })
                .collect()
        }
        TreeShape::Random { buses } => {
            if buses < 2 {
                return Err(NetworkError::InvalidValue("tree needs at least 2 buses".into()));
            }
            // Topology uses its own stream so it does not shift with `spread`.
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
            (0..buses)
                .map(|k| {
                    if k == 0 {
                        None
                    } else {
                        Some(rng.gen_range(0..k) as BusId + 1)
                    }
                })
                .collect()
        }
    };
    build_from_parents(&parents, cfg)
}

impl fmt::Display for FeederModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "feeder: {} buses, root {}, {} DERs",
            self.buses.len(),
            self.root,
            self.der_buses().len()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_BUS: &str = r#"{
        "header": {"base_kva": 1000, "base_kv": 4.16},
        "buses": [
            {"id": 1, "p_load": 0, "q_load": 0},
            {"id": 2, "parent": 1, "p_load": 0.1, "q_load": 0.05}
        ],
        "lines": [{"from": 1, "to": 2, "r": 0.01, "x": 0.02, "i_rated": 2}]
    }"#;

    #[test]
    fn minimal_tree_loads() {
        let m = parse_feeder(TWO_BUS).unwrap();
        assert_eq!(m.lines().len(), 1);
        assert_eq!(m.root(), 1);
        assert_eq!(m.bus(2).unwrap().v_squared_init(), 1.02 * 1.02);
        assert!((m.v_min_sq() - 0.9025).abs() < 1e-15);
    }

    #[test]
    fn multiple_roots_rejected() {
        let doc = r#"{"header": {"base_kva": 1, "base_kv": 1},
            "buses": [{"id": 1, "p_load": 0, "q_load": 0}, {"id": 2, "p_load": 0, "q_load": 0}],
            "lines": [{"from": 1, "to": 2, "r": 0.01, "x": 0.01, "i_rated": 1}]}"#;
        let err = parse_feeder(doc).unwrap_err();
        assert!(err.to_string().contains("multiple roots"), "{err}");
    }

    #[test]
    fn cycle_rejected() {
        let doc = r#"{"header": {"base_kva": 1, "base_kv": 1},
            "buses": [{"id": 1, "p_load": 0, "q_load": 0},
                      {"id": 2, "parent": 1, "p_load": 0, "q_load": 0},
                      {"id": 3, "parent": 2, "p_load": 0, "q_load": 0}],
            "lines": [{"from": 1, "to": 2, "r": 0.01, "x": 0.01, "i_rated": 1},
                      {"from": 2, "to": 3, "r": 0.01, "x": 0.01, "i_rated": 1},
                      {"from": 3, "to": 1, "r": 0.01, "x": 0.01, "i_rated": 1}]}"#;
        let err = parse_feeder(doc).unwrap_err();
        assert!(err.to_string().contains("not a tree"), "{err}");
    }

    #[test]
    fn parent_cycle_detached_from_root_rejected() {
        let doc = r#"{"header": {"base_kva": 1, "base_kv": 1},
            "buses": [{"id": 1, "p_load": 0, "q_load": 0},
                      {"id": 2, "parent": 3, "p_load": 0, "q_load": 0},
                      {"id": 3, "parent": 2, "p_load": 0, "q_load": 0}],
            "lines": [{"from": 3, "to": 2, "r": 0.01, "x": 0.01, "i_rated": 1},
                      {"from": 2, "to": 3, "r": 0.01, "x": 0.01, "i_rated": 1}]}"#;
        assert!(matches!(parse_feeder(doc), Err(NetworkError::NotATree(_))));
    }

    #[test]
    fn duplicate_and_der_errors() {
        let dup = r#"{"header": {"base_kva": 1, "base_kv": 1},
            "buses": [{"id": 1, "p_load": 0, "q_load": 0}, {"id": 1, "p_load": 0, "q_load": 0}],
            "lines": [{"from": 1, "to": 1, "r": 0.01, "x": 0.01, "i_rated": 1}]}"#;
        assert!(matches!(parse_feeder(dup), Err(NetworkError::DuplicateBus(1))));

        let der = r#"{"header": {"base_kva": 1, "base_kv": 1},
            "buses": [{"id": 1, "p_load": 0, "q_load": 0},
                      {"id": 2, "parent": 1, "p_load": 0, "q_load": 0, "der": {"s_rating": 0.1, "p_out": 0.2}}],
            "lines": [{"from": 1, "to": 2, "r": 0.01, "x": 0.01, "i_rated": 1}]}"#;
        assert!(matches!(parse_feeder(der), Err(NetworkError::DerOverRated { bus: 2, .. })));
    }

    #[test]
    fn malformed_document_is_parse_error() {
        assert!(matches!(parse_feeder("{\"header\": 3"), Err(NetworkError::Parse(_))));
        assert!(matches!(parse_feeder("[]"), Err(NetworkError::Parse(_))));
    }

    #[test]
    fn zero_impedance_line_is_flagged() {
        let doc = TWO_BUS.replace("\"r\": 0.01, \"x\": 0.02", "\"r\": 0, \"x\": 0");
        let m = parse_feeder(&doc).unwrap();
        assert_eq!(m.jumpers(), vec![2]);
    }

    #[test]
    fn children_ordering() {
        let line = generate_line_feeder(3, &GeneratorConfig::default()).unwrap();
        assert_eq!(line.children_of(2).unwrap(), &[3]);
        assert!(line.children_of(3).unwrap().is_empty());
        assert!(line.children_of(9).is_err());

        // star: root 1 with children declared out of order
        let buses = [1, 4, 2, 3]
            .into_iter()
            .map(|id| Bus {
                id,
                parent: (id != 1).then_some(1),
                p_load: 0.0,
                q_load: 0.0,
                der: None,
                v_init: 1.0,
            })
            .collect();
        let lines = [4, 3, 2]
            .into_iter()
            .map(|to| Line { from_bus: 1, to_bus: to, r: 0.01, x: 0.01, i_rated: 1.0 })
            .collect();
        let star = FeederModel::new(Header::default(), buses, lines).unwrap();
        assert_eq!(star.children_of(1).unwrap(), &[2, 3, 4]);
        assert!(!star.is_line_network());
    }

    #[test]
    fn generators() {
        let cfg = GeneratorConfig::default();
        let m = generate_line_feeder(4, &cfg).unwrap();
        assert_eq!(m.len(), 4);
        assert_eq!(m.der_buses(), vec![2, 3, 4]);
        assert!(m.is_line_network());
        assert_eq!(generate_line_feeder(2, &cfg).unwrap().lines().len(), 1);
        assert!(generate_line_feeder(1, &cfg).is_err());

        let full = generate_tree_feeder(TreeShape::Full { branching: 3, levels: 3 }, &cfg).unwrap();
        assert_eq!(full.len(), 13);
        assert_eq!(full.depth(13).unwrap(), 2);

        let bad = GeneratorConfig { r: -1.0, ..cfg.clone() };
        assert!(generate_line_feeder(4, &bad).is_err());
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = GeneratorConfig { spread: 0.3, seed: 42, ..Default::default() };
        let a = generate_line_feeder(6, &cfg).unwrap().to_json();
        let b = generate_line_feeder(6, &cfg).unwrap().to_json();
        assert_eq!(a, b);
        let t1 = generate_tree_feeder(TreeShape::Random { buses: 12 }, &cfg).unwrap();
        let t2 = generate_tree_feeder(TreeShape::Random { buses: 12 }, &cfg).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn der_density_places_expected_count() {
        for (density, expected) in [(0.0, 0), (0.1, 1), (0.5, 5), (1.0, 10)] {
            let cfg = GeneratorConfig { der_density: density, ..Default::default() };
            let m = generate_line_feeder(11, &cfg).unwrap();
            assert_eq!(m.der_buses().len(), expected, "density {density}");
        }
    }
}
