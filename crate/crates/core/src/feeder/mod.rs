//! Three-phase unbalanced radial feeder model.
//!
//! A feeder is read from a JSON file ([`FeederData`], engineering units) and
//! validated into a [`Feeder`] whose quantities are all per-unit on a single
//! system-wide base. Every electrical node is one phase of one bus (a
//! "node-phase"); [`NodeIndex`] fixes the ordering used by every state vector
//! in the crate.

mod admittance;
mod validate;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use nalgebra::Complex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use admittance::{build_admittance, AdmittanceMatrix};
pub use validate::{validate_feeder, Diagnostic, DiagnosticKind};

use crate::error::{Error, Result};

pub type Complex64 = Complex<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Balanced positive-sequence angle of this phase, in degrees.
    pub fn nominal_angle_deg(self) -> f64 {
        match self {
            Phase::A => 0.0,
            Phase::B => -120.0,
            Phase::C => 120.0,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Phase::A => 'A',
            Phase::B => 'B',
            Phase::C => 'C',
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Subset of {A, B, C}, iterated in phase order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Vec<Phase>", into = "Vec<Phase>")]
pub struct PhaseSet(u8);

impl PhaseSet {
    pub const ABC: PhaseSet = PhaseSet(0b111);

    pub fn single(phase: Phase) -> Self {
        PhaseSet(1 << phase.index())
    }

    pub fn contains(self, phase: Phase) -> bool {
        self.0 & (1 << phase.index()) != 0
    }

    pub fn insert(&mut self, phase: Phase) {
        self.0 |= 1 << phase.index();
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset_of(self, other: PhaseSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Phase> {
        Phase::ALL.into_iter().filter(move |p| self.contains(*p))
    }
}

impl From<Vec<Phase>> for PhaseSet {
    fn from(phases: Vec<Phase>) -> Self {
        let mut set = PhaseSet::default();
        for p in phases {
            set.insert(p);
        }
        set
    }
}

impl From<PhaseSet> for Vec<Phase> {
    fn from(set: PhaseSet) -> Self {
        set.iter().collect()
    }
}

/// `{re, im}` pair as written in feeder files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexValue {
    pub re: f64,
    pub im: f64,
}

impl From<ComplexValue> for Complex64 {
    fn from(v: ComplexValue) -> Self {
        Complex64::new(v.re, v.im)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BusData {
    pub id: String,
    pub phases: PhaseSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineData {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub from_bus: String,
    pub to_bus: String,
    /// Phase impedance matrix in ohms, rows/columns over the phases of `to_bus`.
    pub impedance: Vec<Vec<ComplexValue>>,
}

impl LineData {
    pub fn label(&self) -> String {
        match &self.id {
            Some(id) => id.clone(),
            None => format!("{}->{}", self.from_bus, self.to_bus),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadData {
    pub bus_id: String,
    pub phase: Phase,
    pub p_kw: f64,
    pub q_kvar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PvData {
    pub bus_id: String,
    pub phase: Phase,
    pub s_rated_kva: f64,
    pub p_rated_kw: f64,
    /// Defaults to `sqrt(s_rated² - p_rated²)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_rated_kvar: Option<f64>,
}

fn default_source_voltage() -> f64 {
    1.0
}

/// Feeder as written on disk, in engineering units (ohm, kW, kvar, kVA).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeederData {
    pub source_bus_id: String,
    /// Line-to-neutral base voltage (kV).
    pub base_voltage_kv: f64,
    /// Per-phase base power (kVA).
    pub base_power_kva: f64,
    /// Substation voltage magnitude held at the source bus (p.u.).
    #[serde(default = "default_source_voltage")]
    pub source_voltage_pu: f64,
    pub buses: Vec<BusData>,
    pub lines: Vec<LineData>,
    #[serde(default)]
    pub loads: Vec<LoadData>,
    #[serde(default)]
    pub pv_units: Vec<PvData>,
}

impl FeederData {
    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::schema_from_json(&e))
    }
}

/// Single system-wide per-unit base.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerUnitBase {
    pub voltage_kv: f64,
    pub power_kva: f64,
}

impl PerUnitBase {
    pub fn impedance_ohm(&self) -> f64 {
        self.voltage_kv * self.voltage_kv * 1000.0 / self.power_kva
    }

    pub fn power_to_pu(&self, kw: f64) -> f64 {
        kw / self.power_kva
    }

    pub fn power_from_pu(&self, pu: f64) -> f64 {
        pu * self.power_kva
    }

    pub fn impedance_to_pu(&self, ohm: Complex64) -> Complex64 {
        ohm / self.impedance_ohm()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bus {
    pub id: String,
    pub phases: PhaseSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Line {
    pub label: String,
    pub from_bus: usize,
    pub to_bus: usize,
    pub phases: PhaseSet,
    /// Per-unit phase impedance matrix over `phases`.
    pub impedance: Vec<Vec<Complex64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadPoint {
    pub bus: usize,
    pub phase: Phase,
    pub p_nominal: f64,
    pub q_nominal: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PvUnit {
    pub bus: usize,
    pub phase: Phase,
    pub s_rated: f64,
    pub p_rated: f64,
    pub q_rated: f64,
}

impl PvUnit {
    /// Builds a unit with `q_rated` derived from the apparent-power rating.
    pub fn new(bus: usize, phase: Phase, s_rated: f64, p_rated: f64) -> Self {
        PvUnit {
            bus,
            phase,
            s_rated,
            p_rated,
            q_rated: (s_rated * s_rated - p_rated * p_rated).max(0.0).sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodePhase {
    pub bus: usize,
    pub phase: Phase,
}

/// Ordering of node-phases: buses in file order, phases A, B, C within a bus.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeIndex {
    entries: Vec<NodePhase>,
    lookup: HashMap<NodePhase, usize>,
    bus_offsets: Vec<usize>,
}

impl NodeIndex {
    fn new(buses: &[Bus]) -> Self {
        let mut entries = Vec::new();
        let mut bus_offsets = Vec::with_capacity(buses.len());
        for (b, bus) in buses.iter().enumerate() {
            bus_offsets.push(entries.len());
            for phase in bus.phases.iter() {
                entries.push(NodePhase { bus: b, phase });
            }
        }
        let lookup = entries.iter().enumerate().map(|(i, np)| (*np, i)).collect();
        NodeIndex {
            entries,
            lookup,
            bus_offsets,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, bus: usize, phase: Phase) -> Option<usize> {
        self.lookup.get(&NodePhase { bus, phase }).copied()
    }

    pub fn entry(&self, i: usize) -> NodePhase {
        self.entries[i]
    }

    pub fn entries(&self) -> &[NodePhase] {
        &self.entries
    }

    /// Rows of one bus are contiguous; this is the first of them.
    pub fn bus_offset(&self, bus: usize) -> usize {
        self.bus_offsets[bus]
    }
}

/// Parent/child structure of the radial network rooted at the source bus.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    pub parent: Vec<Option<usize>>,
    /// Index of the line feeding each bus (`None` for the source).
    pub parent_line: Vec<Option<usize>>,
    pub children: Vec<Vec<usize>>,
    /// Breadth-first order from the source.
    pub order: Vec<usize>,
}

/// Validated feeder, all quantities in per-unit.
#[derive(Clone, Debug)]
pub struct Feeder {
    data: FeederData,
    base: PerUnitBase,
    buses: Vec<Bus>,
    lines: Vec<Line>,
    loads: Vec<LoadPoint>,
    pv_units: Vec<PvUnit>,
    source: usize,
    index: NodeIndex,
    topology: Topology,
    fingerprint: String,
}

impl Feeder {
    pub fn from_data(data: FeederData) -> Result<Self> {
        let diagnostics = validate_feeder(&data);
        if !diagnostics.is_empty() {
            return Err(validate::diagnostics_to_error(&diagnostics));
        }

        let base = PerUnitBase {
            voltage_kv: data.base_voltage_kv,
            power_kva: data.base_power_kva,
        };
        let bus_pos: HashMap<&str, usize> = data.buses.iter().enumerate().map(|(i, b)| (b.id.as_str(), i)).collect();
        let buses: Vec<Bus> = data
            .buses
            .iter()
            .map(|b| Bus {
                id: b.id.clone(),
                phases: b.phases,
            })
            .collect();
        let lines = data
            .lines
            .iter()
            .map(|l| {
                let to_bus = bus_pos[l.to_bus.as_str()];
                Line {
                    label: l.label(),
                    from_bus: bus_pos[l.from_bus.as_str()],
                    to_bus,
                    phases: buses[to_bus].phases,
                    impedance: l
                        .impedance
                        .iter()
                        .map(|row| row.iter().map(|z| base.impedance_to_pu((*z).into())).collect())
                        .collect(),
                }
            })
            .collect::<Vec<_>>();
        let loads = data
            .loads
            .iter()
            .map(|l| LoadPoint {
                bus: bus_pos[l.bus_id.as_str()],
                phase: l.phase,
                p_nominal: base.power_to_pu(l.p_kw),
                q_nominal: base.power_to_pu(l.q_kvar),
            })
            .collect();
        let pv_units = data
            .pv_units
            .iter()
            .map(|pv| {
                let bus = bus_pos[pv.bus_id.as_str()];
                let mut unit = PvUnit::new(
                    bus,
                    pv.phase,
                    base.power_to_pu(pv.s_rated_kva),
                    base.power_to_pu(pv.p_rated_kw),
                );
                if let Some(q) = pv.q_rated_kvar {
                    unit.q_rated = base.power_to_pu(q);
                }
                unit
            })
            .collect();
        let source = bus_pos[data.source_bus_id.as_str()];
        let index = NodeIndex::new(&buses);
        let topology = build_topology(&buses, &lines, source)?;
        let fingerprint = fingerprint_of(&data);

        Ok(Feeder {
            data,
            base,
            buses,
            lines,
            loads,
            pv_units,
            source,
            index,
            topology,
            fingerprint,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Feeder::from_data(FeederData::from_json_str(text)?)
    }

    pub fn data(&self) -> &FeederData {
        &self.data
    }

    pub fn base(&self) -> PerUnitBase {
        self.base
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn loads(&self) -> &[LoadPoint] {
        &self.loads
    }

    pub fn pv_units(&self) -> &[PvUnit] {
        &self.pv_units
    }

    pub fn source_bus(&self) -> usize {
        self.source
    }

    pub fn node_index(&self) -> &NodeIndex {
        &self.index
    }

    pub fn node_phase_count(&self) -> usize {
        self.index.len()
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    /// SHA-256 of the canonical serialization of the feeder data.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn bus_position(&self, id: &str) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    /// Source voltage phasors for phases A, B, C at the configured magnitude.
    pub fn slack_voltage(&self) -> [Complex64; 3] {
        balanced_phasors(self.data.source_voltage_pu)
    }

    /// Returns `true` when `node` is one of the source bus phases.
    pub fn is_slack(&self, node: usize) -> bool {
        self.index.entry(node).bus == self.source
    }
}

pub fn balanced_phasors(magnitude: f64) -> [Complex64; 3] {
    Phase::ALL.map(|p| Complex64::from_polar(magnitude, p.nominal_angle_deg().to_radians()))
}

pub fn load_feeder(path: impl AsRef<Path>) -> Result<Feeder> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Feeder::from_json_str(&text)
}

fn fingerprint_of(data: &FeederData) -> String {
    let bytes = serde_json::to_vec(data).expect("feeder data serializes");
    let digest = Sha256::digest(&bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn build_topology(buses: &[Bus], lines: &[Line], source: usize) -> Result<Topology> {
    let n = buses.len();
    let mut parent = vec![None; n];
    let mut parent_line = vec![None; n];
    let mut children = vec![Vec::new(); n];
    for (l, line) in lines.iter().enumerate() {
        parent[line.to_bus] = Some(line.from_bus);
        parent_line[line.to_bus] = Some(l);
        children[line.from_bus].push(line.to_bus);
    }
    let mut order = Vec::with_capacity(n);
    let mut queue = std::collections::VecDeque::from([source]);
    while let Some(b) = queue.pop_front() {
        order.push(b);
        queue.extend(children[b].iter().copied());
    }
    if order.len() != n {
        return Err(Error::Topology(format!(
            "{} of {} buses reachable from the source",
            order.len(),
            n
        )));
    }
    Ok(Topology {
        parent,
        parent_line,
        children,
        order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn two_bus_json() -> &'static str {
        r#"{
            "source_bus_id": "s",
            "base_voltage_kv": 2.4,
            "base_power_kva": 100.0,
            "buses": [{"id": "s", "phases": ["A"]}, {"id": "r", "phases": ["A"]}],
            "lines": [{"from_bus": "s", "to_bus": "r", "impedance": [[{"re": 0.5, "im": 1.0}]]}],
            "loads": [{"bus_id": "r", "phase": "A", "p_kw": 50.0, "q_kvar": 10.0}],
            "pv_units": [{"bus_id": "r", "phase": "A", "s_rated_kva": 50.0, "p_rated_kw": 30.0}]
        }"#
    }

    #[test]
    fn smallest_feeder_loads() {
        let f = Feeder::from_json_str(two_bus_json()).unwrap();
        assert_eq!(f.buses().len(), 2);
        assert_eq!(f.node_phase_count(), 2);
        assert_eq!(f.topology().order, vec![0, 1]);
        // 2.4² · 1000 / 100 = 57.6 Ω base
        let z = f.lines()[0].impedance[0][0];
        assert!((z.re - 0.5 / 57.6).abs() < 1e-15);
        assert!((f.loads()[0].p_nominal - 0.5).abs() < 1e-15);
        let pv = &f.pv_units()[0];
        assert!((pv.q_rated - 0.4).abs() < 1e-12);
    }

    #[test]
    fn dangling_line_is_reference_error() {
        let text = two_bus_json().replace(r#""to_bus": "r""#, r#""to_bus": "nowhere""#);
        match Feeder::from_json_str(&text) {
            Err(Error::Reference(msg)) => assert!(msg.contains("nowhere")),
            other => panic!("expected reference error, got {other:?}"),
        }
    }

    #[test]
    fn parse_failure_reports_position() {
        let text = two_bus_json().replace(r#""p_kw": 50.0,"#, "");
        match Feeder::from_json_str(&text) {
            Err(Error::Schema { line, message, .. }) => {
                assert!(line > 1);
                assert!(message.contains("p_kw"));
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn mesh_is_topology_error() {
        let text = r#"{
            "source_bus_id": "s", "base_voltage_kv": 1.0, "base_power_kva": 1.0,
            "buses": [{"id": "s", "phases": ["A"]}, {"id": "a", "phases": ["A"]}, {"id": "b", "phases": ["A"]}],
            "lines": [
                {"from_bus": "s", "to_bus": "a", "impedance": [[{"re": 0.1, "im": 0.1}]]},
                {"from_bus": "s", "to_bus": "b", "impedance": [[{"re": 0.1, "im": 0.1}]]},
                {"from_bus": "a", "to_bus": "b", "impedance": [[{"re": 0.1, "im": 0.1}]]}
            ]
        }"#;
        assert!(matches!(Feeder::from_json_str(text), Err(Error::Topology(_))));
    }

    #[test]
    fn per_unit_round_trip() {
        let base = PerUnitBase {
            voltage_kv: 14.376,
            power_kva: 333.0,
        };
        for kw in [0.0, 1e-3, 1.0, 57.25, 1234.5678, 9.87e6] {
            let back = base.power_from_pu(base.power_to_pu(kw));
            assert!((back - kw).abs() <= 1e-12 * kw.abs().max(1e-300));
        }
    }

    #[test]
    fn phase_set_serializes_as_list() {
        let set: PhaseSet = serde_json::from_str(r#"["C","A"]"#).unwrap();
        assert_eq!(set.iter().collect::<Vec<_>>(), vec![Phase::A, Phase::C]);
        assert_eq!(serde_json::to_string(&set).unwrap(), r#"["A","C"]"#);
    }
}
