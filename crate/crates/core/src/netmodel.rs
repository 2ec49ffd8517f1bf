//! Network model: buses, branches, and the polar bus-admittance matrix.
//!
//! Cases are immutable after construction. Bus ids are 1-based and arbitrary
//! as they appear in case files; a dense 0-based index is built at
//! construction time and used everywhere internally.

use std::collections::HashMap;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// External bus identifier as written in case files (1-based, arbitrary).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BusId(pub usize);

impl std::fmt::Display for BusId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusKind {
    Pq,
    Pv,
    Der,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: BusId,
    pub kind: BusKind,
    /// Real power demand, p.u. PV-bus generation is modeled as negative load.
    pub p_load: f64,
    /// Reactive power demand, p.u.
    pub q_load: f64,
    /// Rated voltage magnitude V*, p.u.
    pub v_rated: f64,
    /// Fixed magnitude for PV buses, p.u. (unused otherwise).
    pub v_set: f64,
    /// Angle reference flag; valid only on a DER bus.
    pub is_reference: bool,
}

impl Bus {
    pub fn pq(id: usize, p_load: f64, q_load: f64) -> Self {
        Bus {
            id: BusId(id),
            kind: BusKind::Pq,
            p_load,
            q_load,
            v_rated: 1.0,
            v_set: 1.0,
            is_reference: false,
        }
    }

    pub fn der(id: usize, p_load: f64, q_load: f64, is_reference: bool) -> Self {
        Bus {
            id: BusId(id),
            kind: BusKind::Der,
            p_load,
            q_load,
            v_rated: 1.0,
            v_set: 1.0,
            is_reference,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: BusId,
    pub to: BusId,
    /// Series resistance, p.u.
    pub r: f64,
    /// Series reactance, p.u.
    pub x: f64,
    pub is_switch: bool,
    /// Always true when `is_switch` is false.
    pub closed: bool,
}

impl Branch {
    pub fn line(from: usize, to: usize, r: f64, x: f64) -> Self {
        Branch {
            from: BusId(from),
            to: BusId(to),
            r,
            x,
            is_switch: false,
            closed: true,
        }
    }

    pub fn switch(from: usize, to: usize, r: f64, x: f64, closed: bool) -> Self {
        Branch {
            from: BusId(from),
            to: BusId(to),
            r,
            x,
            is_switch: true,
            closed,
        }
    }

    pub fn impedance(&self) -> Complex64 {
        Complex64::new(self.r, self.x)
    }
}

/// Immutable description of the microgrid network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkCase {
    pub name: String,
    /// System power base, MVA.
    pub base_mva: f64,
    /// Voltage base, kV.
    pub base_kv: f64,
    /// Nominal frequency, Hz.
    pub f_nominal: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    index: HashMap<BusId, usize>,
}

impl NetworkCase {
    /// Builds a case and checks the structural invariants: unique bus ids,
    /// existing branch endpoints, nonzero impedances, exactly one reference
    /// bus and it must be a DER bus.
    pub fn new(
        name: impl Into<String>,
        base_mva: f64,
        base_kv: f64,
        f_nominal: f64,
        buses: Vec<Bus>,
        branches: Vec<Branch>,
    ) -> Result<Self> {
        if base_mva <= 0.0 || base_kv <= 0.0 || f_nominal <= 0.0 {
            return Err(Error::validation(
                "bases",
                "base_mva, base_kv and f_nominal must be positive",
            ));
        }
        let mut index = HashMap::with_capacity(buses.len());
        for (i, bus) in buses.iter().enumerate() {
            if index.insert(bus.id, i).is_some() {
                return Err(Error::validation(
                    "duplicate-bus",
                    format!("bus id {} appears twice", bus.id),
                ));
            }
            if bus.v_rated <= 0.0 {
                return Err(Error::validation(
                    "bus-voltage",
                    format!("bus {} has non-positive v_rated", bus.id),
                ));
            }
            if !bus.p_load.is_finite() || !bus.q_load.is_finite() {
                return Err(Error::validation(
                    "bus-load",
                    format!("bus {} has a non-finite load", bus.id),
                ));
            }
            if bus.kind == BusKind::Pv && bus.v_set <= 0.0 {
                return Err(Error::validation(
                    "pv-setpoint",
                    format!("PV bus {} has non-positive v_set", bus.id),
                ));
            }
        }
        let refs: Vec<&Bus> = buses.iter().filter(|b| b.is_reference).collect();
        match refs.as_slice() {
            [single] if single.kind == BusKind::Der => {}
            [single] => {
                return Err(Error::validation(
                    "reference-kind",
                    format!("reference bus {} is not a DER bus", single.id),
                ))
            }
            [] => return Err(Error::validation("reference", "no bus marked as reference")),
            _ => {
                return Err(Error::validation(
                    "reference",
                    format!("{} buses marked as reference, expected one", refs.len()),
                ))
            }
        }
        for (bi, br) in branches.iter().enumerate() {
            if br.from == br.to {
                return Err(Error::InvalidBranch {
                    index: bi,
                    from: br.from.0,
                    to: br.to.0,
                    reason: "self-loop".into(),
                });
            }
            if !index.contains_key(&br.from) || !index.contains_key(&br.to) {
                return Err(Error::validation(
                    "dangling-branch",
                    format!("branch {} references a missing bus ({}-{})", bi, br.from, br.to),
                ));
            }
            if br.r == 0.0 && br.x == 0.0 {
                return Err(Error::InvalidBranch {
                    index: bi,
                    from: br.from.0,
                    to: br.to.0,
                    reason: "zero impedance".into(),
                });
            }
            if !br.is_switch && !br.closed {
                return Err(Error::validation(
                    "open-line",
                    format!("non-switch branch {} marked open", bi),
                ));
            }
        }
        Ok(NetworkCase {
            name: name.into(),
            base_mva,
            base_kv,
            f_nominal,
            buses,
            branches,
            index,
        })
    }

    pub fn n(&self) -> usize {
        self.buses.len()
    }

    /// Dense 0-based index of a bus id.
    pub fn bus_index(&self, id: BusId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn reference_index(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.is_reference)
            .expect("validated case has a reference bus")
    }

    pub fn der_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.buses[i].kind == BusKind::Der).collect()
    }

    pub fn pv_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.buses[i].kind == BusKind::Pv).collect()
    }

    pub fn closed_branches(&self) -> impl Iterator<Item = (usize, &Branch)> {
        self.branches.iter().enumerate().filter(|(_, b)| b.closed)
    }

    pub fn closed_branch_count(&self) -> usize {
        self.closed_branches().count()
    }

    pub fn total_load(&self) -> (f64, f64) {
        self.buses
            .iter()
            .fold((0.0, 0.0), |(p, q), b| (p + b.p_load, q + b.q_load))
    }

    /// Returns a new case with the switch state changed; `self` is untouched.
    pub fn toggle_switch(&self, branch_index: usize, closed: bool) -> Result<NetworkCase> {
        let branch = self
            .branches
            .get(branch_index)
            .ok_or(Error::NotASwitch { index: branch_index })?;
        if !branch.is_switch {
            return Err(Error::NotASwitch { index: branch_index });
        }
        let mut out = self.clone();
        out.branches[branch_index].closed = closed;
        Ok(out)
    }
}

/// N x N bus admittance in polar form: entry magnitudes and angles.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    pub n: usize,
    /// |Y_ij|, p.u.
    pub mag: DMatrix<f64>,
    /// alpha_ij, radians.
    pub ang: DMatrix<f64>,
}

impl AdmittanceMatrix {
    /// All-zero matrix; used for degenerate-topology checks.
    pub fn zero(n: usize) -> Self {
        AdmittanceMatrix {
            n,
            mag: DMatrix::zeros(n, n),
            ang: DMatrix::zeros(n, n),
        }
    }

    /// Rectangular reconstruction of an entry, for oracles and flows.
    pub fn complex_entry(&self, i: usize, j: usize) -> Complex64 {
        Complex64::from_polar(self.mag[(i, j)], self.ang[(i, j)])
    }
}

/// Standard bus-admittance construction from series impedances of closed
/// branches, stored in polar form. Open switches contribute nothing.
pub fn build_admittance(case: &NetworkCase) -> Result<AdmittanceMatrix> {
    let n = case.n();
    let mut y = DMatrix::<Complex64>::zeros(n, n);
    for (bi, br) in case.closed_branches() {
        let z = br.impedance();
        if z.norm() == 0.0 {
            return Err(Error::InvalidBranch {
                index: bi,
                from: br.from.0,
                to: br.to.0,
                reason: "zero impedance".into(),
            });
        }
        let yb = z.inv();
        let i = case.bus_index(br.from).expect("validated endpoint");
        let j = case.bus_index(br.to).expect("validated endpoint");
        y[(i, j)] -= yb;
        y[(j, i)] -= yb;
        y[(i, i)] += yb;
        y[(j, j)] += yb;
    }

    check_connected(case)?;

    let mut mag = DMatrix::zeros(n, n);
    let mut ang = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let e = y[(i, j)];
            if e.norm() > 0.0 {
                mag[(i, j)] = e.norm();
                ang[(i, j)] = e.arg();
            }
        }
    }
    Ok(AdmittanceMatrix { n, mag, ang })
}

fn check_connected(case: &NetworkCase) -> Result<()> {
    let n = case.n();
    let mut adj = vec![Vec::new(); n];
    for (_, br) in case.closed_branches() {
        let i = case.bus_index(br.from).unwrap();
        let j = case.bus_index(br.to).unwrap();
        adj[i].push(j);
        adj[j].push(i);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![case.reference_index()];
    seen[case.reference_index()] = true;
    while let Some(i) = stack.pop() {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    match seen.iter().position(|&s| !s) {
        Some(i) => Err(Error::DisconnectedNetwork { bus: case.buses[i].id.0 }),
        None => Ok(()),
    }
}

/// Network-absorbed injections at every bus:
/// P_i = V_i sum_j V_j |Y_ij| cos(theta_i - theta_j - alpha_ij),
/// Q_i = V_i sum_j V_j |Y_ij| sin(theta_i - theta_j - alpha_ij).
pub fn network_injections(
    y: &AdmittanceMatrix,
    theta: &[f64],
    v: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = y.n;
    if theta.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: theta.len() });
    }
    if v.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: v.len() });
    }
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        let mut pi = 0.0;
        let mut qi = 0.0;
        for j in 0..n {
            let m = y.mag[(i, j)];
            if m == 0.0 {
                continue;
            }
            let a = theta[i] - theta[j] - y.ang[(i, j)];
            pi += v[j] * m * a.cos();
            qi += v[j] * m * a.sin();
        }
        p[i] = v[i] * pi;
        q[i] = v[i] * qi;
    }
    Ok((p, q))
}

/// Complex power flow over one closed branch, both directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchFlow {
    pub from: BusId,
    pub to: BusId,
    /// Complex power leaving `from` into the branch, p.u.
    pub s_send: Complex64,
    /// Complex power leaving `to` into the branch, p.u.
    pub s_recv: Complex64,
}

impl BranchFlow {
    /// Real power dissipated in the branch (s_send + s_recv, real part).
    pub fn loss(&self) -> f64 {
        (self.s_send + self.s_recv).re
    }
}

/// Per-branch sending/receiving complex power at the given state.
/// Open switches are skipped.
pub fn branch_flows(case: &NetworkCase, theta: &[f64], v: &[f64]) -> Vec<BranchFlow> {
    let mut flows = Vec::new();
    for (_, br) in case.closed_branches() {
        let i = case.bus_index(br.from).unwrap();
        let j = case.bus_index(br.to).unwrap();
        let vi = Complex64::from_polar(v[i], theta[i]);
        let vj = Complex64::from_polar(v[j], theta[j]);
        let y = br.impedance().inv();
        let current = (vi - vj) * y;
        flows.push(BranchFlow {
            from: br.from,
            to: br.to,
            s_send: vi * current.conj(),
            s_recv: vj * (-current).conj(),
        });
    }
    flows
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_bus(r: f64, x: f64) -> NetworkCase {
        NetworkCase::new(
            "two-bus",
            1.0,
            1.0,
            60.0,
            vec![Bus::der(1, 0.0, 0.0, true), Bus::pq(2, 0.0, 0.0)],
            vec![Branch::line(1, 2, r, x)],
        )
        .unwrap()
    }

    #[test]
    fn single_branch_admittance_polar() {
        // -(1/j0.1) = j10 off the diagonal
        let y = build_admittance(&two_bus(0.0, 0.1)).unwrap();
        assert_abs_diff_eq!(y.mag[(0, 1)], 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y.ang[(0, 1)], std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
        assert_abs_diff_eq!(y.mag[(0, 0)], 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y.ang[(0, 0)], -std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn injections_match_frozen_complex_oracle() {
        // Frozen from S_i = V_i * conj(sum_j Y_ij V_j) with z = 0.01 + j0.1,
        // V = (1.0, 0.95), theta = (0, -0.05).
        let case = two_bus(0.01, 0.1);
        let y = build_admittance(&case).unwrap();
        let (p, q) = network_injections(&y, &[0.0, -0.05], &[1.0, 0.95]).unwrap();
        assert_abs_diff_eq!(p[0], 0.5207815452437883, epsilon = 1e-12);
        assert_abs_diff_eq!(q[0], 0.45979437172344184, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], -0.5159553024224376, epsilon = 1e-12);
        assert_abs_diff_eq!(q[1], -0.41153194350993555, epsilon = 1e-12);
    }

    #[test]
    fn flat_start_lossless_injections_vanish() {
        let case = two_bus(0.0, 0.1);
        let y = build_admittance(&case).unwrap();
        let (p, q) = network_injections(&y, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(p[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn injection_sum_equals_branch_current_loss() {
        let case = two_bus(0.01, 0.1);
        let y = build_admittance(&case).unwrap();
        let theta = [0.0, -0.05];
        let v = [1.0, 0.95];
        let (p, _) = network_injections(&y, &theta, &v).unwrap();
        // |I|^2 r oracle
        let vi = Complex64::from_polar(v[0], theta[0]);
        let vj = Complex64::from_polar(v[1], theta[1]);
        let i12 = (vi - vj) / Complex64::new(0.01, 0.1);
        let loss = i12.norm_sqr() * 0.01;
        assert_abs_diff_eq!(p.iter().sum::<f64>(), loss, epsilon = 1e-12);
        assert!(loss >= 0.0);
    }

    #[test]
    fn branch_flow_loss_identities() {
        let case = two_bus(0.01, 0.1);
        let theta = [0.0, -0.05];
        let v = [1.0, 0.95];
        let flows = branch_flows(&case, &theta, &v);
        assert_eq!(flows.len(), 1);
        let f = flows[0];
        let vi = Complex64::from_polar(v[0], theta[0]);
        let vj = Complex64::from_polar(v[1], theta[1]);
        let z = Complex64::new(0.01, 0.1);
        let expected = (vi - vj).norm_sqr() / z.norm_sqr() * 0.01;
        assert_abs_diff_eq!(f.loss(), expected, epsilon = 1e-10);
        assert!(f.loss() > 0.0);
    }

    #[test]
    fn zero_admittance_injections_are_zero() {
        let y = AdmittanceMatrix::zero(4);
        let (p, q) = network_injections(&y, &[0.0; 4], &[1.0; 4]).unwrap();
        assert!(p.iter().chain(q.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let y = AdmittanceMatrix::zero(3);
        assert!(matches!(
            network_injections(&y, &[0.0; 2], &[1.0; 3]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn toggle_switch_is_an_involution() {
        let case = NetworkCase::new(
            "sw",
            1.0,
            1.0,
            60.0,
            vec![
                Bus::der(1, 0.0, 0.0, true),
                Bus::pq(2, 0.1, 0.05),
                Bus::pq(3, 0.1, 0.05),
            ],
            vec![
                Branch::line(1, 2, 0.01, 0.1),
                Branch::line(2, 3, 0.01, 0.1),
                Branch::switch(1, 3, 0.02, 0.2, false),
            ],
        )
        .unwrap();
        let toggled = case.toggle_switch(2, true).unwrap();
        assert_eq!(toggled.closed_branch_count(), 3);
        assert_eq!(case.closed_branch_count(), 2);
        let back = toggled.toggle_switch(2, false).unwrap();
        assert_eq!(back, case);
        assert!(matches!(
            case.toggle_switch(0, false),
            Err(Error::NotASwitch { index: 0 })
        ));
    }

    #[test]
    fn disconnected_network_detected() {
        let case = NetworkCase::new(
            "disc",
            1.0,
            1.0,
            60.0,
            vec![
                Bus::der(1, 0.0, 0.0, true),
                Bus::pq(2, 0.1, 0.0),
                Bus::pq(3, 0.1, 0.0),
            ],
            vec![
                Branch::line(1, 2, 0.01, 0.1),
                Branch::switch(2, 3, 0.01, 0.1, false),
            ],
        )
        .unwrap();
        assert!(matches!(
            build_admittance(&case),
            Err(Error::DisconnectedNetwork { bus: 3 })
        ));
    }

    #[test]
    fn zero_impedance_branch_rejected() {
        let err = NetworkCase::new(
            "bad",
            1.0,
            1.0,
            60.0,
            vec![Bus::der(1, 0.0, 0.0, true), Bus::pq(2, 0.0, 0.0)],
            vec![Branch::line(1, 2, 0.0, 0.0)],
        );
        assert!(matches!(err, Err(Error::InvalidBranch { .. })));
    }
}
