use std::collections::{HashMap, HashSet};
use std::fmt;

use super::{FeederData, PhaseSet};
use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiagnosticKind {
    /// Non-positive base quantity.
    Base,
    /// Missing or duplicate identifier.
    Reference,
    /// Not a single radial tree rooted at the source.
    Topology,
    /// Phase not available where it is used.
    Phase,
    /// Malformed line impedance matrix.
    Impedance,
    /// Load or PV rating outside its admissible range.
    Rating,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub entity: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} [{}]: {}", self.kind, self.entity, self.message)
    }
}

/// Checks every feeder invariant; an empty list means the data is valid.
pub fn validate_feeder(data: &FeederData) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut push = |kind, entity: &str, message: String| {
        out.push(Diagnostic {
            kind,
            entity: entity.to_string(),
            message,
        })
    };

    if !(data.base_voltage_kv > 0.0) {
        push(DiagnosticKind::Base, "base_voltage_kv", "must be > 0".into());
    }
    if !(data.base_power_kva > 0.0) {
        push(DiagnosticKind::Base, "base_power_kva", "must be > 0".into());
    }
    if !(data.source_voltage_pu > 0.5 && data.source_voltage_pu < 1.5) {
        push(
            DiagnosticKind::Base,
            "source_voltage_pu",
            format!("{} outside (0.5, 1.5)", data.source_voltage_pu),
        );
    }

    let mut phases: HashMap<&str, PhaseSet> = HashMap::new();
    for bus in &data.buses {
        if bus.phases.is_empty() {
            push(DiagnosticKind::Phase, &bus.id, "bus has no phases".into());
        }
        if phases.insert(bus.id.as_str(), bus.phases).is_some() {
            push(DiagnosticKind::Reference, &bus.id, "duplicate bus id".into());
        }
    }
    if !phases.contains_key(data.source_bus_id.as_str()) {
        push(
            DiagnosticKind::Reference,
            &data.source_bus_id,
            "source bus does not exist".into(),
        );
    }

    let mut incoming: HashMap<&str, usize> = HashMap::new();
    let mut children: HashMap<&str, Vec<&str>> = HashMap::new();
    for line in &data.lines {
        let label = line.label();
        let from = phases.get(line.from_bus.as_str()).copied();
        let to = phases.get(line.to_bus.as_str()).copied();
        if from.is_none() {
            push(
                DiagnosticKind::Reference,
                &label,
                format!("from_bus '{}' does not exist", line.from_bus),
            );
        }
        if to.is_none() {
            push(
                DiagnosticKind::Reference,
                &label,
                format!("to_bus '{}' does not exist", line.to_bus),
            );
        }
        let (Some(from), Some(to)) = (from, to) else {
            continue;
        };
        *incoming.entry(line.to_bus.as_str()).or_default() += 1;
        children
            .entry(line.from_bus.as_str())
            .or_default()
            .push(line.to_bus.as_str());
        if !to.is_subset_of(from) {
            push(
                DiagnosticKind::Phase,
                &label,
                format!("phases of '{}' are not available at '{}'", line.to_bus, line.from_bus),
            );
        }

        let k = to.len();
        let z = &line.impedance;
        if z.len() != k || z.iter().any(|row| row.len() != k) {
            push(
                DiagnosticKind::Impedance,
                &label,
                format!("impedance must be {k}x{k} (phases of '{}')", line.to_bus),
            );
            continue;
        }
        let mut symmetric = true;
        for i in 0..k {
            if z[i][i].re < 0.0 {
                push(
                    DiagnosticKind::Impedance,
                    &label,
                    format!("negative resistance on diagonal entry {i}"),
                );
            }
            for j in 0..i {
                if z[i][j] != z[j][i] {
                    symmetric = false;
                }
            }
        }
        if !symmetric {
            push(
                DiagnosticKind::Impedance,
                &label,
                "impedance matrix not symmetric".into(),
            );
        }
        if z.iter().flatten().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            push(DiagnosticKind::Impedance, &label, "non-finite impedance".into());
        }
    }

    // Radial: the source has no feeding line, every other bus exactly one,
    // and all buses hang off the source.
    let mut reachable: HashSet<&str> = HashSet::new();
    if phases.contains_key(data.source_bus_id.as_str()) {
        let mut stack = vec![data.source_bus_id.as_str()];
        while let Some(b) = stack.pop() {
            if reachable.insert(b) {
                if let Some(ch) = children.get(b) {
                    stack.extend(ch.iter().copied());
                }
            }
        }
    }
    for bus in &data.buses {
        let n_in = incoming.get(bus.id.as_str()).copied().unwrap_or(0);
        if bus.id == data.source_bus_id {
            if n_in > 0 {
                push(DiagnosticKind::Topology, &bus.id, "source bus is fed by a line".into());
            }
        } else if n_in == 0 {
            push(
                DiagnosticKind::Topology,
                &bus.id,
                "bus is disconnected (no feeding line)".into(),
            );
        } else if n_in > 1 {
            push(
                DiagnosticKind::Topology,
                &bus.id,
                format!("bus is fed by {n_in} lines (meshed)"),
            );
        } else if !reachable.contains(bus.id.as_str()) {
            push(
                DiagnosticKind::Topology,
                &bus.id,
                "bus not reachable from the source".into(),
            );
        }
    }

    for (i, load) in data.loads.iter().enumerate() {
        let entity = format!("load[{i}]@{}", load.bus_id);
        match phases.get(load.bus_id.as_str()) {
            None => push(
                DiagnosticKind::Reference,
                &entity,
                format!("bus '{}' does not exist", load.bus_id),
            ),
            Some(set) if !set.contains(load.phase) => push(
                DiagnosticKind::Phase,
                &entity,
                format!("phase {} not present at bus", load.phase),
            ),
            _ => {}
        }
        if !(load.p_kw >= 0.0) || !load.q_kvar.is_finite() {
            push(
                DiagnosticKind::Rating,
                &entity,
                "p_kw must be >= 0 and q_kvar finite".into(),
            );
        }
    }

    for (i, pv) in data.pv_units.iter().enumerate() {
        let entity = format!("pv[{i}]@{}", pv.bus_id);
        match phases.get(pv.bus_id.as_str()) {
            None => push(
                DiagnosticKind::Reference,
                &entity,
                format!("bus '{}' does not exist", pv.bus_id),
            ),
            Some(set) if !set.contains(pv.phase) => push(
                DiagnosticKind::Phase,
                &entity,
                format!("phase {} not present at bus", pv.phase),
            ),
            _ => {}
        }
        if !(pv.p_rated_kw > 0.0 && pv.p_rated_kw <= pv.s_rated_kva) {
            push(
                DiagnosticKind::Rating,
                &entity,
                format!("need 0 < p_rated ({}) <= s_rated ({})", pv.p_rated_kw, pv.s_rated_kva),
            );
        }
        if let Some(q) = pv.q_rated_kvar {
            if !(q >= 0.0 && q <= pv.s_rated_kva) {
                push(
                    DiagnosticKind::Rating,
                    &entity,
                    format!("need 0 <= q_rated ({q}) <= s_rated ({})", pv.s_rated_kva),
                );
            }
        }
    }

    out
}

/// Collapses diagnostics into the error class of the most fundamental one.
pub(crate) fn diagnostics_to_error(diagnostics: &[Diagnostic]) -> Error {
    let joined = |kind: DiagnosticKind| {
        diagnostics
            .iter()
            .filter(|d| d.kind == kind)
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; ")
    };
    if diagnostics.iter().any(|d| d.kind == DiagnosticKind::Reference) {
        Error::Reference(joined(DiagnosticKind::Reference))
    } else if diagnostics.iter().any(|d| d.kind == DiagnosticKind::Topology) {
        Error::Topology(joined(DiagnosticKind::Topology))
    } else {
        Error::InvalidFeeder(
            diagnostics
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; "),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::{BusData, FeederData};

    fn two_bus() -> FeederData {
        FeederData::from_json_str(crate::feeder::tests::two_bus_json()).unwrap()
    }

    #[test]
    fn valid_feeder_has_no_diagnostics() {
        assert!(validate_feeder(&two_bus()).is_empty());
    }

    #[test]
    fn pv_over_rated_is_one_diagnostic() {
        let mut data = two_bus();
        data.pv_units[0].p_rated_kw = 60.0;
        let d = validate_feeder(&data);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].kind, DiagnosticKind::Rating);
        assert_eq!(d[0].entity, "pv[0]@r");
    }

    #[test]
    fn disconnected_bus_is_one_diagnostic() {
        let mut data = two_bus();
        data.buses.push(BusData {
            id: "island".into(),
            phases: PhaseSet::ABC,
        });
        let d = validate_feeder(&data);
        assert_eq!(d.len(), 1, "{d:?}");
        assert_eq!(d[0].kind, DiagnosticKind::Topology);
        assert_eq!(d[0].entity, "island");
    }

    #[test]
    fn load_on_missing_phase() {
        let mut data = two_bus();
        data.loads[0].phase = crate::feeder::Phase::B;
        let d = validate_feeder(&data);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].kind, DiagnosticKind::Phase);
    }

    #[test]
    fn asymmetric_impedance() {
        let mut data = two_bus();
        data.buses[0].phases = PhaseSet::ABC;
        data.buses[1].phases = PhaseSet::from(vec![crate::feeder::Phase::A, crate::feeder::Phase::B]);
        let z = |re, im| crate::feeder::ComplexValue { re, im };
        data.lines[0].impedance = vec![vec![z(1.0, 1.0), z(0.1, 0.2)], vec![z(0.1, 0.3), z(1.0, 1.0)]];
        let d = validate_feeder(&data);
        assert_eq!(d.len(), 1, "{d:?}");
        assert_eq!(d[0].kind, DiagnosticKind::Impedance);
    }
}
