//! Per-phase power flow on the radial feeder.
//!
//! Full Newton-Raphson in rectangular coordinates. The mismatch at every
//! non-slack node-phase `i` is the power-balance pair
//!
//! ```text
//! V_R,i Σ_m (G_im V_R,m − B_im V_I,m) + V_I,i Σ_m (G_im V_I,m + B_im V_R,m) + P_i = 0
//! V_I,i Σ_m (G_im V_R,m − B_im V_I,m) − V_R,i Σ_m (G_im V_I,m + B_im V_R,m) + Q_i = 0
//! ```
//!
//! with `P_i`, `Q_i` the net load (load minus PV) at the node-phase. Because
//! the network is a tree of buses, the Jacobian is block-tree structured and
//! is factorized leaf-to-root without fill-in.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feeder::{AdmittanceMatrix, Complex64, Feeder, Phase};

pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_MAX_ITERATIONS: usize = 50;

/// Net per-unit demand at each node-phase (load minus generation).
#[derive(Clone, Debug, PartialEq)]
pub struct InjectionSet {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl InjectionSet {
    pub fn zeros(n: usize) -> Self {
        InjectionSet {
            p: vec![0.0; n],
            q: vec![0.0; n],
        }
    }

    /// Assembles net demand from per-load and per-PV-unit quantities.
    /// Anything attached to the source bus is absorbed by the slack.
    pub fn from_parts(feeder: &Feeder, p_load: &[f64], q_load: &[f64], p_pv: &[f64], q_pv: &[f64]) -> Result<Self> {
        if p_load.len() != feeder.loads().len() || q_load.len() != feeder.loads().len() {
            return Err(Error::Shape(format!(
                "expected {} load entries, got {}/{}",
                feeder.loads().len(),
                p_load.len(),
                q_load.len()
            )));
        }
        if p_pv.len() != feeder.pv_units().len() || q_pv.len() != feeder.pv_units().len() {
            return Err(Error::Shape(format!(
                "expected {} PV entries, got {}/{}",
                feeder.pv_units().len(),
                p_pv.len(),
                q_pv.len()
            )));
        }
        let index = feeder.node_index();
        let mut inj = InjectionSet::zeros(index.len());
        for (k, load) in feeder.loads().iter().enumerate() {
            let i = index.get(load.bus, load.phase).expect("validated load");
            inj.p[i] += p_load[k];
            inj.q[i] += q_load[k];
        }
        for (k, pv) in feeder.pv_units().iter().enumerate() {
            let i = index.get(pv.bus, pv.phase).expect("validated pv");
            inj.p[i] -= p_pv[k];
            inj.q[i] -= q_pv[k];
        }
        for i in 0..index.len() {
            if feeder.is_slack(i) {
                inj.p[i] = 0.0;
                inj.q[i] = 0.0;
            }
        }
        Ok(inj)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    pub v_real: Vec<f64>,
    pub v_imag: Vec<f64>,
    pub v_mag: Vec<f64>,
    /// Active power drawn from the feeder head, summed over phases.
    pub feeder_head_p: f64,
    pub feeder_head_q: f64,
    pub iterations: usize,
    pub converged: bool,
    pub residual: f64,
}

impl PowerFlowSolution {
    pub fn voltages(&self) -> Vec<Complex64> {
        self.v_real
            .iter()
            .zip(&self.v_imag)
            .map(|(&re, &im)| Complex64::new(re, im))
            .collect()
    }

    pub fn angle_deg(&self, i: usize) -> f64 {
        self.v_imag[i].atan2(self.v_real[i]).to_degrees()
    }

    pub fn max_v(&self) -> f64 {
        self.v_mag.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_v(&self) -> f64 {
        self.v_mag.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tolerance: DEFAULT_TOLERANCE,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }
}

pub fn solve_power_flow(
    feeder: &Feeder,
    y: &AdmittanceMatrix,
    inj: &InjectionSet,
    slack_voltage: [Complex64; 3],
) -> Result<PowerFlowSolution> {
    solve_power_flow_with(feeder, y, inj, slack_voltage, NewtonOptions::default())
}

pub fn solve_power_flow_with(
    feeder: &Feeder,
    y: &AdmittanceMatrix,
    inj: &InjectionSet,
    slack_voltage: [Complex64; 3],
    opts: NewtonOptions,
) -> Result<PowerFlowSolution> {
    let n = feeder.node_phase_count();
    if y.dim() != n || inj.p.len() != n || inj.q.len() != n {
        return Err(Error::Shape(format!(
            "feeder has {n} node-phases, admittance {} and injections {}/{}",
            y.dim(),
            inj.p.len(),
            inj.q.len()
        )));
    }
    for v in slack_voltage {
        if !(v.norm() > 0.5 && v.norm() < 1.5) {
            return Err(Error::Domain(format!(
                "slack voltage magnitude {} outside (0.5, 1.5)",
                v.norm()
            )));
        }
    }

    let index = feeder.node_index();
    let mut v: Vec<Complex64> = index
        .entries()
        .iter()
        .map(|np| slack_voltage[np.phase.index()])
        .collect();
    let structure = BlockStructure::new(feeder);

    let mut iterations = 0;
    let residual = loop {
        let current = y.injection_currents(&v);
        let mismatch = mismatches(feeder, &v, &current, inj);
        let residual = max_abs_nonslack(feeder, &mismatch);
        if !residual.is_finite() {
            return Err(Error::Diverged { iterations, residual });
        }
        if residual <= opts.tolerance {
            break residual;
        }
        if iterations == opts.max_iterations {
            return Err(Error::Diverged { iterations, residual });
        }
        let step = structure.newton_step(y, &v, &current, &mismatch)?;
        for (bus, dx) in step {
            let offset = index.bus_offset(bus);
            let k = dx.len() / 2;
            for p in 0..k {
                v[offset + p] += Complex64::new(dx[p], dx[k + p]);
            }
        }
        iterations += 1;
    };

    let current = y.injection_currents(&v);
    let (mut head_p, mut head_q) = (0.0, 0.0);
    for i in 0..n {
        if feeder.is_slack(i) {
            let s = v[i] * current[i].conj();
            head_p += s.re;
            head_q += s.im;
        }
    }

    Ok(PowerFlowSolution {
        v_real: v.iter().map(|c| c.re).collect(),
        v_imag: v.iter().map(|c| c.im).collect(),
        v_mag: v.iter().map(|c| c.norm()).collect(),
        feeder_head_p: head_p,
        feeder_head_q: head_q,
        iterations,
        converged: true,
        residual,
    })
}

/// Power-balance residuals `(P_calc + P, Q_calc + Q)` for every node-phase.
fn mismatches(feeder: &Feeder, v: &[Complex64], current: &[Complex64], inj: &InjectionSet) -> Vec<(f64, f64)> {
    (0..v.len())
        .map(|i| {
            if feeder.is_slack(i) {
                return (0.0, 0.0);
            }
            let (vr, vi) = (v[i].re, v[i].im);
            let (ir, ii) = (current[i].re, current[i].im);
            (vr * ir + vi * ii + inj.p[i], vi * ir - vr * ii + inj.q[i])
        })
        .collect()
}

fn max_abs_nonslack(feeder: &Feeder, mismatch: &[(f64, f64)]) -> f64 {
    mismatch
        .iter()
        .enumerate()
        .filter(|(i, _)| !feeder.is_slack(*i))
        .map(|(_, (p, q))| p.abs().max(q.abs()))
        .fold(0.0, |acc, x| if x.is_nan() { f64::NAN } else { acc.max(x) })
}

/// Maximum absolute power-balance residual over non-slack node-phases,
/// evaluated from the solution's rectangular voltages.
pub fn residual_norm(feeder: &Feeder, y: &AdmittanceMatrix, solution: &PowerFlowSolution, inj: &InjectionSet) -> f64 {
    let n = feeder.node_phase_count();
    let (vr, vi) = (&solution.v_real, &solution.v_imag);
    let mut worst = 0.0f64;
    for i in 0..n {
        if feeder.is_slack(i) {
            continue;
        }
        let (mut a, mut c) = (0.0, 0.0);
        for m in 0..n {
            let (g, b) = (y.g[(i, m)], y.b[(i, m)]);
            a += g * vr[m] - b * vi[m];
            c += g * vi[m] + b * vr[m];
        }
        let p_res = vr[i] * a + vi[i] * c + inj.p[i];
        let q_res = vi[i] * a - vr[i] * c + inj.q[i];
        worst = worst.max(p_res.abs()).max(q_res.abs());
    }
    worst
}

/// Bus-level elimination order for the block-tree Jacobian.
struct BlockStructure<'a> {
    feeder: &'a Feeder,
    /// Non-slack buses in breadth-first order.
    order: Vec<usize>,
}

impl<'a> BlockStructure<'a> {
    fn new(feeder: &'a Feeder) -> Self {
        let source = feeder.source_bus();
        let order = feeder
            .topology()
            .order
            .iter()
            .copied()
            .filter(|&b| b != source)
            .collect();
        BlockStructure { feeder, order }
    }

    fn nodes(&self, bus: usize) -> std::ops::Range<usize> {
        let start = self.feeder.node_index().bus_offset(bus);
        start..start + self.feeder.buses()[bus].phases.len()
    }

    /// Jacobian block `∂(P,Q at rows of bus a) / ∂(V_R,V_I at bus c)`.
    fn block(&self, y: &AdmittanceMatrix, v: &[Complex64], current: &[Complex64], a: usize, c: usize) -> DMatrix<f64> {
        let rows = self.nodes(a);
        let cols = self.nodes(c);
        let (ka, kc) = (rows.len(), cols.len());
        let mut m = DMatrix::zeros(2 * ka, 2 * kc);
        for (r, i) in rows.clone().enumerate() {
            let (vr, vi) = (v[i].re, v[i].im);
            for (s, j) in cols.clone().enumerate() {
                let (g, b) = (y.g[(i, j)], y.b[(i, j)]);
                let mut dp_dvr = vr * g + vi * b;
                let mut dp_dvi = -vr * b + vi * g;
                let mut dq_dvr = vi * g - vr * b;
                let mut dq_dvi = -vi * b - vr * g;
                if i == j {
                    dp_dvr += current[i].re;
                    dp_dvi += current[i].im;
                    dq_dvr -= current[i].im;
                    dq_dvi += current[i].re;
                }
                m[(r, s)] = dp_dvr;
                m[(r, kc + s)] = dp_dvi;
                m[(ka + r, s)] = dq_dvr;
                m[(ka + r, kc + s)] = dq_dvi;
            }
        }
        m
    }

    /// Solves `J dx = -f`, returning the correction for each non-slack bus.
    fn newton_step(
        &self,
        y: &AdmittanceMatrix,
        v: &[Complex64],
        current: &[Complex64],
        mismatch: &[(f64, f64)],
    ) -> Result<Vec<(usize, DVector<f64>)>> {
        let topo = self.feeder.topology();
        let source = self.feeder.source_bus();
        let nb = self.feeder.buses().len();

        let mut diag: Vec<Option<DMatrix<f64>>> = vec![None; nb];
        let mut rhs: Vec<Option<DVector<f64>>> = vec![None; nb];
        for &a in &self.order {
            diag[a] = Some(self.block(y, v, current, a, a));
            let rows = self.nodes(a);
            let k = rows.len();
            let mut f = DVector::zeros(2 * k);
            for (r, i) in rows.enumerate() {
                f[r] = -mismatch[i].0;
                f[k + r] = -mismatch[i].1;
            }
            rhs[a] = Some(f);
        }

        // Leaf-to-root elimination.
        let mut factors = vec![None; nb];
        let mut upper: Vec<Option<DMatrix<f64>>> = vec![None; nb];
        for &a in self.order.iter().rev() {
            let lu = diag[a].take().expect("diag block").lu();
            let parent = topo.parent[a].expect("non-source bus has a parent");
            if parent != source {
                let up = self.block(y, v, current, a, parent);
                let low = self.block(y, v, current, parent, a);
                let x = lu.solve(&up).ok_or_else(|| singular(self.feeder, a))?;
                let z = lu
                    .solve(rhs[a].as_ref().expect("rhs"))
                    .ok_or_else(|| singular(self.feeder, a))?;
                let d = diag[parent].as_mut().expect("parent diag");
                *d -= &low * x;
                let f = rhs[parent].as_mut().expect("parent rhs");
                *f -= &low * z;
                upper[a] = Some(up);
            }
            factors[a] = Some(lu);
        }

        // Root-to-leaf substitution.
        let mut dx: Vec<Option<DVector<f64>>> = vec![None; nb];
        for &a in &self.order {
            let parent = topo.parent[a].expect("parent");
            let mut f = rhs[a].take().expect("rhs");
            if let Some(up) = &upper[a] {
                f -= up * dx[parent].as_ref().expect("parent solved first");
            }
            let sol = factors[a]
                .as_ref()
                .expect("factor")
                .solve(&f)
                .ok_or_else(|| singular(self.feeder, a))?;
            if sol.iter().any(|x| !x.is_finite()) {
                return Err(singular(self.feeder, a));
            }
            dx[a] = Some(sol);
        }

        Ok(self.order.iter().map(|&a| (a, dx[a].take().expect("solved"))).collect())
    }
}

fn singular(feeder: &Feeder, bus: usize) -> Error {
    Error::Numerical(format!("singular Jacobian block at bus {}", feeder.buses()[bus].id))
}

/// Rectangular components of the three source-bus voltage phasors followed
/// by the three feeder-head current phasors:
/// `[V_A re, V_A im, V_B re, V_B im, V_C re, V_C im, I_A re, ..., I_C im]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementVector {
    pub values: [f64; 12],
}

impl MeasurementVector {
    pub const LEN: usize = 12;
}

/// Feeder-head phasor measurement with multiplicative Gaussian noise of
/// standard deviation `noise_pct / 100` on every component. Phases absent
/// at the source bus read zero.
pub fn feeder_head_measurement<R: Rng + ?Sized>(
    solution: &PowerFlowSolution,
    feeder: &Feeder,
    y: &AdmittanceMatrix,
    noise_pct: f64,
    rng: &mut R,
) -> Result<MeasurementVector> {
    if !solution.converged {
        return Err(Error::Usage("measurement of a non-converged solution".into()));
    }
    if !(noise_pct >= 0.0) {
        return Err(Error::Domain(format!("noise_pct {noise_pct} must be >= 0")));
    }
    let v = solution.voltages();
    let index = feeder.node_index();
    let source = feeder.source_bus();
    let mut values = [0.0; 12];
    for phase in Phase::ALL {
        let Some(i) = index.get(source, phase) else {
            continue;
        };
        let current: Complex64 = (0..v.len()).map(|m| y.get(i, m) * v[m]).sum();
        let p = phase.index();
        values[2 * p] = v[i].re;
        values[2 * p + 1] = v[i].im;
        values[6 + 2 * p] = current.re;
        values[6 + 2 * p + 1] = current.im;
    }
    if noise_pct > 0.0 {
        let normal =
            Normal::new(0.0, noise_pct / 100.0).map_err(|e| Error::Domain(format!("noise distribution: {e}")))?;
        for x in values.iter_mut() {
            *x *= 1.0 + normal.sample(rng);
        }
    }
    Ok(MeasurementVector { values })
}
