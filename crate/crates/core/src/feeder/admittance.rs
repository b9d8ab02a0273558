use nalgebra::DMatrix;

use super::{Complex64, Feeder, NodeIndex};
use crate::error::{Error, Result};

/// Nodal admittance `Y = G + jB` over node-phases (per-unit).
#[derive(Clone, Debug)]
pub struct AdmittanceMatrix {
    pub g: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub index_map: NodeIndex,
    /// Series admittance `Z⁻¹` of each line, over the line's phases.
    pub primitives: Vec<DMatrix<Complex64>>,
    /// Node-phase rows of each line's sending and receiving ends.
    pub line_nodes: Vec<(Vec<usize>, Vec<usize>)>,
}

impl AdmittanceMatrix {
    pub fn dim(&self) -> usize {
        self.g.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        Complex64::new(self.g[(i, j)], self.b[(i, j)])
    }

    /// Nodal current injections `I = Y V`.
    pub fn injection_currents(&self, v: &[Complex64]) -> Vec<Complex64> {
        let n = self.dim();
        (0..n)
            .map(|i| {
                let mut acc = Complex64::new(0.0, 0.0);
                for j in 0..n {
                    let (g, b) = (self.g[(i, j)], self.b[(i, j)]);
                    if g != 0.0 || b != 0.0 {
                        acc += Complex64::new(g, b) * v[j];
                    }
                }
                acc
            })
            .collect()
    }

    /// Current flowing from the sending to the receiving end of `line`, per phase.
    pub fn branch_current(&self, line: usize, v: &[Complex64]) -> Vec<Complex64> {
        let (from, to) = &self.line_nodes[line];
        let y = &self.primitives[line];
        let k = from.len();
        (0..k)
            .map(|p| (0..k).map(|q| y[(p, q)] * (v[from[q]] - v[to[q]])).sum::<Complex64>())
            .collect()
    }

    /// Complex series loss `Σ ΔVᵀ conj(I)` on `line`.
    pub fn branch_loss(&self, line: usize, v: &[Complex64]) -> Complex64 {
        let (from, to) = &self.line_nodes[line];
        let current = self.branch_current(line, v);
        from.iter()
            .zip(to)
            .zip(current)
            .map(|((&f, &t), i)| (v[f] - v[t]) * i.conj())
            .sum()
    }
}

pub fn build_admittance(feeder: &Feeder) -> Result<AdmittanceMatrix> {
    let index = feeder.node_index().clone();
    let n = index.len();
    let mut g = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, n);
    let mut primitives = Vec::with_capacity(feeder.lines().len());
    let mut line_nodes = Vec::with_capacity(feeder.lines().len());

    for line in feeder.lines() {
        let k = line.phases.len();
        let z = DMatrix::from_fn(k, k, |r, c| line.impedance[r][c]);
        let y = z
            .clone()
            .try_inverse()
            .filter(|y| y.iter().all(|c| c.re.is_finite() && c.im.is_finite()))
            .ok_or_else(|| Error::Numerical(format!("line {} has a singular impedance matrix", line.label)))?;
        let from: Vec<usize> = line
            .phases
            .iter()
            .map(|p| index.get(line.from_bus, p).expect("validated phase"))
            .collect();
        let to: Vec<usize> = line
            .phases
            .iter()
            .map(|p| index.get(line.to_bus, p).expect("validated phase"))
            .collect();
        for r in 0..k {
            for c in 0..k {
                let yrc = y[(r, c)];
                for (i, j, sign) in [
                    (from[r], from[c], 1.0),
                    (to[r], to[c], 1.0),
                    (from[r], to[c], -1.0),
                    (to[r], from[c], -1.0),
                ] {
                    g[(i, j)] += sign * yrc.re;
                    b[(i, j)] += sign * yrc.im;
                }
            }
        }
        primitives.push(y);
        line_nodes.push((from, to));
    }

    Ok(AdmittanceMatrix {
        g,
        b,
        index_map: index,
        primitives,
        line_nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::Feeder;

    fn series_feeder(n_lines: usize, z: (f64, f64)) -> Feeder {
        let buses: Vec<String> = (0..=n_lines)
            .map(|i| format!(r#"{{"id": "b{i}", "phases": ["A"]}}"#))
            .collect();
        let lines: Vec<String> = (0..n_lines)
            .map(|i| {
                format!(
                    r#"{{"from_bus": "b{i}", "to_bus": "b{}", "impedance": [[{{"re": {}, "im": {}}}]]}}"#,
                    i + 1,
                    z.0,
                    z.1
                )
            })
            .collect();
        let text = format!(
            r#"{{"source_bus_id": "b0", "base_voltage_kv": 1.0, "base_power_kva": 1000.0,
                "buses": [{}], "lines": [{}]}}"#,
            buses.join(","),
            lines.join(",")
        );
        Feeder::from_json_str(&text).unwrap()
    }

    #[test]
    fn pure_reactance_line() {
        // z = j1.0 p.u. → y = -j1.0; off-diagonal entries are -y.
        let y = build_admittance(&series_feeder(1, (0.0, 1.0))).unwrap();
        assert_eq!(y.dim(), 2);
        assert_eq!(y.b[(0, 1)], 1.0);
        assert_eq!(y.b[(1, 0)], 1.0);
        assert_eq!(y.b[(0, 0)], -1.0);
        assert!(y.g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn series_lines_sum_at_middle_node() {
        let y = build_admittance(&series_feeder(2, (0.3, 0.4))).unwrap();
        let branch = Complex64::new(1.0, 0.0) / Complex64::new(0.3, 0.4);
        let mid = y.get(1, 1);
        assert!((mid - 2.0 * branch).norm() < 1e-14);
        assert!((y.get(0, 0) - branch).norm() < 1e-14);
    }

    #[test]
    fn zero_impedance_names_line() {
        let err = build_admittance(&series_feeder(1, (0.0, 0.0))).unwrap_err();
        assert!(matches!(&err, Error::Numerical(m) if m.contains("b0->b1")), "{err}");
    }

    #[test]
    fn matrix_is_symmetric() {
        let y = build_admittance(&series_feeder(4, (0.2, 0.7))).unwrap();
        assert_eq!(y.g, y.g.transpose());
        assert_eq!(y.b, y.b.transpose());
    }
}
