//! Independent verification machinery: finite-difference Jacobians, a
//! brute-force two-bus solver, and residual auditing.
//!
//! Everything here is test/diagnostic support. The production solve path
//! never calls into this module; agreement between the two is evidence, not
//! tautology.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::controls::{droop_reactive_power, ControlMode, ControlState, DroopParams};
use crate::error::{Error, Result};
use crate::netmodel::{AdmittanceMatrix, BusId, BusKind, NetworkCase};
use crate::solver::{assemble_mismatch, PowerFlowSolution, StateVector, VarLayout};

#[derive(Debug, Clone, Copy)]
pub struct FdConfig {
    /// Central-difference step.
    pub h: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig { h: 1e-6 }
    }
}

/// Central-difference Jacobian of the mismatch vector over the unknowns
/// [theta, V, f]. rho and the dummy voltages are frozen: the mismatch is
/// evaluated against the same `ControlState` on both sides of every
/// perturbation.
pub fn fd_jacobian(
    case: &NetworkCase,
    y: &AdmittanceMatrix,
    control: &ControlState,
    ders: &[DroopParams],
    x: &StateVector,
    cfg: FdConfig,
) -> Result<DMatrix<f64>> {
    let layout = VarLayout::new(case);
    let dim = layout.dim();
    let nth = layout.theta_vars.len();
    let mut jac = DMatrix::zeros(dim, dim);
    for col in 0..dim {
        let mut plus = x.clone();
        let mut minus = x.clone();
        perturb(&mut plus, &layout, col, nth, cfg.h);
        perturb(&mut minus, &layout, col, nth, -cfg.h);
        let fp = assemble_mismatch(case, y, control, ders, &plus)?;
        let fm = assemble_mismatch(case, y, control, ders, &minus)?;
        for row in 0..dim {
            jac[(row, col)] = (fp[row] - fm[row]) / (2.0 * cfg.h);
        }
    }
    Ok(jac)
}

fn perturb(x: &mut StateVector, layout: &VarLayout, col: usize, nth: usize, h: f64) {
    if col < nth {
        x.theta[layout.theta_vars[col]] += h;
    } else if col < nth + layout.v_vars.len() {
        x.v[layout.v_vars[col - nth]] += h;
    } else {
        x.f += h;
    }
}

/// Injections recomputed from scratch in rectangular complex arithmetic,
/// assembling its own admittance from the branch list.
pub fn rect_injections(case: &NetworkCase, theta: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = case.n();
    let mut y = vec![vec![Complex64::ZERO; n]; n];
    for (_, br) in case.closed_branches() {
        let yb = br.impedance().inv();
        let i = case.bus_index(br.from).unwrap();
        let j = case.bus_index(br.to).unwrap();
        y[i][j] -= yb;
        y[j][i] -= yb;
        y[i][i] += yb;
        y[j][j] += yb;
    }
    let vc: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(v[i], theta[i])).collect();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        let current: Complex64 = (0..n).map(|j| y[i][j] * vc[j]).sum();
        let s = vc[i] * current.conj();
        p[i] = s.re;
        q[i] = s.im;
    }
    (p, q)
}

/// Solution of the two-bus system: droop DER at bus 1 (angle reference),
/// PQ load at bus 2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoBusSolution {
    pub v1: f64,
    pub v2: f64,
    pub theta2: f64,
    /// Frequency, p.u.
    pub f: f64,
    /// DER injections implied by the converged state.
    pub p1: f64,
    pub q1: f64,
}

/// Solves the two-bus case by nested bisection, deliberately structured
/// unlike the Newton path: an outer bisection on V2 drives the bus-1 Q/V
/// droop residual to zero, while theta2 and V1 come from the closed-form
/// bus-2 load equation and f from the total real balance.
///
/// Scans V2 in [0.5, 1.1] from the top so the bracketing lands on the
/// high-voltage operating solution; returns `NoSolution` when the residual
/// never changes sign (load beyond deliverability).
pub fn brute_force_2bus(
    der: &DroopParams,
    load: (f64, f64),
    branch: (f64, f64),
) -> Result<TwoBusSolution> {
    let z = Complex64::new(branch.0, branch.1);
    let s_load = Complex64::new(load.0, load.1);
    let y = z.inv();

    // Given V2, bus-2 complex power balance fixes theta2 and V1:
    //   V1 * conj(V2_phasor) = V2^2 + S_load * conj(z)
    let state_for = |v2: f64| -> (f64, f64) {
        let w = Complex64::new(v2 * v2, 0.0) + s_load * z.conj();
        (w.arg(), w.norm() / v2)
    };
    let residual = |v2: f64| -> f64 {
        let (theta2, v1) = state_for(v2);
        let v1c = Complex64::new(v1, 0.0);
        let v2c = Complex64::from_polar(v2, theta2);
        let q1_net = (v1c * (y * (v1c - v2c)).conj()).im;
        droop_reactive_power(der, v1) - q1_net
    };

    const SCAN: usize = 600;
    let (lo, hi) = (0.5, 1.1);
    let grid = |k: usize| hi - (hi - lo) * (k as f64) / (SCAN as f64);
    let mut bracket = None;
    let mut prev = residual(grid(0));
    for k in 1..=SCAN {
        let next = residual(grid(k));
        if prev == 0.0 || prev * next < 0.0 {
            bracket = Some((grid(k), grid(k - 1)));
            break;
        }
        prev = next;
    }
    let (mut a, mut b) = bracket.ok_or(Error::NoSolution)?;
    let mut fa = residual(a);
    while b - a > 1e-10 {
        let mid = 0.5 * (a + b);
        let fm = residual(mid);
        if fa * fm <= 0.0 {
            b = mid;
        } else {
            a = mid;
            fa = fm;
        }
    }
    let v2 = 0.5 * (a + b);
    let (theta2, v1) = state_for(v2);
    let v1c = Complex64::new(v1, 0.0);
    let v2c = Complex64::from_polar(v2, theta2);
    let s1 = v1c * (y * (v1c - v2c)).conj();
    // P balance: droop output covers load plus loss.
    let f = der.f0 + der.m * (der.p_set - s1.re);
    Ok(TwoBusSolution { v1, v2, theta2, f, p1: s1.re, q1: s1.im })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    /// Worst-case magnitude observed.
    pub worst: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AuditReport {
    pub checks: Vec<CheckResult>,
}

impl AuditReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    fn push(&mut self, name: &str, worst: f64, threshold: f64) {
        self.checks.push(CheckResult {
            name: name.to_string(),
            pass: worst < threshold,
            worst,
            threshold,
        });
    }
}

/// Re-derives every converged-state invariant from scratch: power balance
/// via the rectangular injection path, the droop frequency law, sharing
/// ratios and voltage recovery as applicable to the mode. Report-only.
pub fn audit_solution(
    case: &NetworkCase,
    ders: &[DroopParams],
    mode: ControlMode,
    leader: Option<BusId>,
    sol: &PowerFlowSolution,
) -> AuditReport {
    audit_state(
        case,
        ders,
        mode,
        leader,
        &sol.state.theta,
        &sol.state.v,
        sol.state.f,
        &sol.der_injections.iter().map(|d| (d.bus, d.p, d.q)).collect::<Vec<_>>(),
    )
}

/// Audit over raw state arrays (case bus order), as reconstructed from a
/// saved result file.
#[allow(clippy::too_many_arguments)]
pub fn audit_state(
    case: &NetworkCase,
    ders: &[DroopParams],
    mode: ControlMode,
    leader: Option<BusId>,
    theta: &[f64],
    v: &[f64],
    f: f64,
    der_injections: &[(BusId, f64, f64)],
) -> AuditReport {
    let mut report = AuditReport::default();
    let (p_rect, q_rect) = rect_injections(case, theta, v);

    // Per-bus balance against the reported injections.
    let mut worst = 0.0f64;
    for (i, bus) in case.buses.iter().enumerate() {
        let (pg, qg) = der_injections
            .iter()
            .find(|(b, _, _)| *b == bus.id)
            .map(|&(_, p, q)| (p, q))
            .unwrap_or((0.0, 0.0));
        worst = worst.max((pg - bus.p_load - p_rect[i]).abs());
        if bus.kind != BusKind::Pv {
            worst = worst.max((qg - bus.q_load - q_rect[i]).abs());
        }
    }
    report.push("power-balance", worst, 1e-5);

    // System balance: generation covers loads plus losses.
    let total_gen: f64 = der_injections.iter().map(|&(_, p, _)| p).sum();
    let losses: f64 = p_rect.iter().sum();
    report.push(
        "system-balance",
        (total_gen - case.total_load().0 - losses).abs(),
        1e-5,
    );

    // Droop frequency law on network-derived generation.
    let mut law = Vec::new();
    for d in ders {
        let i = case.bus_index(d.bus).unwrap();
        let pg_net = p_rect[i] + case.buses[i].p_load;
        law.push(d.m * (pg_net - d.p_set));
    }
    let spread = law.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - law.iter().cloned().fold(f64::INFINITY, f64::min);
    report.push("droop-frequency-law", spread.max(0.0), 1e-8);
    let _ = f;

    match mode {
        ControlMode::Droop => {
            let mut worst = 0.0f64;
            for d in ders {
                let i = case.bus_index(d.bus).unwrap();
                let qg_net = q_rect[i] + case.buses[i].q_load;
                worst = worst.max((qg_net - droop_reactive_power(d, v[i])).abs());
            }
            report.push("qv-droop-law", worst, 1e-5);
        }
        ControlMode::ReactiveSharing | ControlMode::SmartTuning => {
            let mut ratios = Vec::new();
            for d in ders {
                let i = case.bus_index(d.bus).unwrap();
                ratios.push((q_rect[i] + case.buses[i].q_load) / d.q_star);
            }
            let spread = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - ratios.iter().cloned().fold(f64::INFINITY, f64::min);
            report.push("sharing-ratio", spread.max(0.0), 1e-3);
            if mode == ControlMode::SmartTuning {
                let mut worst = 0.0f64;
                if let Some(lb) = leader {
                    let i = case.bus_index(lb).unwrap();
                    worst = (v[i] - case.buses[i].v_rated).abs();
                }
                report.push("leader-voltage-recovery", worst, 1e-4);
            }
        }
        ControlMode::VoltageRegulation => {
            let mut worst = 0.0f64;
            for d in ders {
                let i = case.bus_index(d.bus).unwrap();
                worst = worst.max((v[i] - case.buses[i].v_rated).abs());
            }
            report.push("voltage-recovery", worst, 1e-4);
        }
    }
    report
}
