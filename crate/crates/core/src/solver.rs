//! Augmented Newton solver with system frequency as a solution variable.
//!
//! The mismatch vector stacks per-bus real-power rows (reference bus
//! excluded), per-bus reactive rows (PV buses excluded) and one system-wide
//! real-power balance row. The Jacobian column blocks are ordered
//! [theta, V, f]; generation terms from the active control mode are added on
//! the Q-row diagonals and the f column. The balance row is zero in the theta
//! and V blocks and carries the droop column sum in f.
//!
//! A full solve runs two stages: a droop-only Newton from flat start, then
//! the requested secondary mode re-using the droop solution as its starting
//! point, refreshing rho and the dummy voltages between iterations.

use nalgebra::{DMatrix, DVector};

use crate::controls::{
    der_reactive_power, dq_dv_diagonal, droop_real_power, droop_reactive_power, ControlConfig,
    ControlMode, ControlState, DroopParams,
};
use crate::error::{Error, Result};
use crate::netmodel::{
    branch_flows, build_admittance, network_injections, AdmittanceMatrix, BranchFlow, BusId,
    BusKind, NetworkCase,
};

/// Full network state. The reference angle stays pinned at zero and PV
/// magnitudes at their setpoints; only the entries listed in [`VarLayout`]
/// are Newton unknowns.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    /// Bus voltage angles, radians, one per bus.
    pub theta: Vec<f64>,
    /// Bus voltage magnitudes, p.u., one per bus.
    pub v: Vec<f64>,
    /// System frequency, p.u. of nominal.
    pub f: f64,
}

impl StateVector {
    /// Flat start: rated magnitudes (PV setpoints), zero angles, nominal
    /// frequency.
    pub fn flat_start(case: &NetworkCase) -> Self {
        let v = case
            .buses
            .iter()
            .map(|b| match b.kind {
                BusKind::Pv => b.v_set,
                _ => b.v_rated,
            })
            .collect();
        StateVector {
            theta: vec![0.0; case.n()],
            v,
            f: 1.0,
        }
    }
}

/// Maps Newton unknowns and mismatch rows onto bus indices.
#[derive(Debug, Clone)]
pub struct VarLayout {
    /// Buses with an angle unknown (all but the reference bus).
    pub theta_vars: Vec<usize>,
    /// Buses with a magnitude unknown (all but PV buses).
    pub v_vars: Vec<usize>,
    /// Buses with a real-power mismatch row (all but the reference bus).
    pub p_rows: Vec<usize>,
    /// Buses with a reactive mismatch row (all but PV buses).
    pub q_rows: Vec<usize>,
}

impl VarLayout {
    pub fn new(case: &NetworkCase) -> Self {
        let reference = case.reference_index();
        let theta_vars: Vec<usize> = (0..case.n()).filter(|&i| i != reference).collect();
        let v_vars: Vec<usize> = (0..case.n())
            .filter(|&i| case.buses[i].kind != BusKind::Pv)
            .collect();
        VarLayout {
            p_rows: theta_vars.clone(),
            q_rows: v_vars.clone(),
            theta_vars,
            v_vars,
        }
    }

    /// Unknown count: (N-1) angles + (N - n_pv) magnitudes + frequency.
    pub fn dim(&self) -> usize {
        self.theta_vars.len() + self.v_vars.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    /// Convergence tolerance on the voltage/angle steps.
    pub tol_vtheta: f64,
    /// Convergence tolerance on the frequency step and the rho refresh.
    pub tol_f_rho: f64,
    /// Convergence tolerance (and update deadband) on the dummy voltages.
    pub tol_vd: f64,
    pub max_iter: usize,
    /// Gain on the dummy-voltage update.
    pub vd_gain: f64,
    /// Per-iteration clamp on |dV|, active while the residual is large.
    pub step_limit: f64,
    /// Add the true loss sensitivities to the balance row instead of the
    /// zero blocks. Off by default.
    pub exact_loss_jacobian: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol_vtheta: 1e-5,
            tol_f_rho: 1e-3,
            tol_vd: 1e-4,
            max_iter: 100,
            vd_gain: 1.0,
            step_limit: 0.2,
            exact_loss_jacobian: false,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if self.tol_vtheta <= 0.0 || self.tol_f_rho <= 0.0 || self.tol_vd <= 0.0 {
            return Err(Error::validation("tolerances", "tolerances must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::validation("max-iter", "max_iter must be at least 1"));
        }
        if self.step_limit <= 0.0 || self.vd_gain <= 0.0 {
            return Err(Error::validation(
                "step-limit",
                "step_limit and vd_gain must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerInjection {
    pub bus: BusId,
    pub p: f64,
    pub q: f64,
}

/// Capability-limit violation; reported, never enforced.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitFlag {
    pub bus: BusId,
    pub quantity: &'static str,
    pub value: f64,
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    pub state: StateVector,
    /// Bus ids in case order, parallel to the state vectors.
    pub bus_ids: Vec<BusId>,
    pub der_injections: Vec<DerInjection>,
    pub branch_flows: Vec<BranchFlow>,
    /// Total network real loss, p.u.
    pub losses: f64,
    pub f_hz: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Max |F| at the final state.
    pub max_residual: f64,
    /// Max |F| at the start of each iteration.
    pub residual_history: Vec<f64>,
    pub limit_flags: Vec<LimitFlag>,
}

/// Assembles the mismatch vector F at state `x`. rho and the dummy voltages
/// inside `control` are treated as constants.
pub fn assemble_mismatch(
    case: &NetworkCase,
    y: &AdmittanceMatrix,
    control: &ControlState,
    ders: &[DroopParams],
    x: &StateVector,
) -> Result<DVector<f64>> {
    let layout = VarLayout::new(case);
    assemble_mismatch_with(case, y, control, ders, x, &layout)
}

fn der_lookup(case: &NetworkCase, ders: &[DroopParams]) -> Result<Vec<Option<usize>>> {
    let mut map = vec![None; case.n()];
    for (di, d) in ders.iter().enumerate() {
        let i = d.bus.0;
        let idx = case
            .bus_index(d.bus)
            .ok_or_else(|| Error::validation("der-bus", format!("DER bus {i} not in case")))?;
        if case.buses[idx].kind != BusKind::Der {
            return Err(Error::validation(
                "der-bus",
                format!("bus {i} carries droop parameters but is not a DER bus"),
            ));
        }
        if map[idx].replace(di).is_some() {
            return Err(Error::validation(
                "der-bus",
                format!("bus {i} has two sets of droop parameters"),
            ));
        }
    }
    Ok(map)
}

fn assemble_mismatch_with(
    case: &NetworkCase,
    y: &AdmittanceMatrix,
    control: &ControlState,
    ders: &[DroopParams],
    x: &StateVector,
    layout: &VarLayout,
) -> Result<DVector<f64>> {
    if x.theta.len() != case.n() || x.v.len() != case.n() {
        return Err(Error::DimensionMismatch {
            expected: case.n(),
            got: x.theta.len().min(x.v.len()),
        });
    }
    let der_at = der_lookup(case, ders)?;
    let (p_inj, q_inj) = network_injections(y, &x.theta, &x.v)?;

    let dim = layout.dim();
    let mut f = DVector::zeros(dim);
    let mut row = 0;
    for &i in &layout.p_rows {
        let bus = &case.buses[i];
        let pg = match der_at[i] {
            Some(di) => droop_real_power(&ders[di], x.f),
            None => 0.0,
        };
        f[row] = pg - bus.p_load - p_inj[i];
        row += 1;
    }
    for &i in &layout.q_rows {
        let bus = &case.buses[i];
        let qg = match der_at[i] {
            Some(di) => der_reactive_power(control, di, &ders[di], x.v[i], bus.v_rated),
            None => 0.0,
        };
        f[row] = qg - bus.q_load - q_inj[i];
        row += 1;
    }
    // System balance: total droop generation against loads plus losses.
    let pgs: f64 = ders.iter().map(|d| droop_real_power(d, x.f)).sum();
    let p_sum = case.total_load().0 + p_inj.iter().sum::<f64>();
    f[dim - 1] = pgs - p_sum;
    Ok(f)
}

/// Assembles the Jacobian dF/dx in block-column order [theta, V, f].
pub fn assemble_jacobian(
    case: &NetworkCase,
    y: &AdmittanceMatrix,
    control: &ControlState,
    ders: &[DroopParams],
    x: &StateVector,
    opts: &SolverOptions,
) -> Result<DMatrix<f64>> {
    let layout = VarLayout::new(case);
    assemble_jacobian_with(case, y, control, ders, x, &layout, opts)
}

fn assemble_jacobian_with(
    case: &NetworkCase,
    y: &AdmittanceMatrix,
    control: &ControlState,
    ders: &[DroopParams],
    x: &StateVector,
    layout: &VarLayout,
    opts: &SolverOptions,
) -> Result<DMatrix<f64>> {
    let n = case.n();
    if x.theta.len() != n || x.v.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: x.theta.len().min(x.v.len()) });
    }
    let der_at = der_lookup(case, ders)?;
    let (p_inj, q_inj) = network_injections(y, &x.theta, &x.v)?;
    let v = &x.v;
    let th = &x.theta;

    // Injection partials in polar form.
    let dp_dth = |i: usize, j: usize| -> f64 {
        if i == j {
            let b_ii = y.mag[(i, i)] * y.ang[(i, i)].sin();
            -q_inj[i] - v[i] * v[i] * b_ii
        } else {
            let m = y.mag[(i, j)];
            if m == 0.0 {
                0.0
            } else {
                v[i] * v[j] * m * (th[i] - th[j] - y.ang[(i, j)]).sin()
            }
        }
    };
    let dp_dv = |i: usize, j: usize| -> f64 {
        if i == j {
            let g_ii = y.mag[(i, i)] * y.ang[(i, i)].cos();
            p_inj[i] / v[i] + v[i] * g_ii
        } else {
            let m = y.mag[(i, j)];
            if m == 0.0 {
                0.0
            } else {
                v[i] * m * (th[i] - th[j] - y.ang[(i, j)]).cos()
            }
        }
    };
    let dq_dth = |i: usize, j: usize| -> f64 {
        if i == j {
            let g_ii = y.mag[(i, i)] * y.ang[(i, i)].cos();
            p_inj[i] - v[i] * v[i] * g_ii
        } else {
            let m = y.mag[(i, j)];
            if m == 0.0 {
                0.0
            } else {
                -v[i] * v[j] * m * (th[i] - th[j] - y.ang[(i, j)]).cos()
            }
        }
    };
    let dq_dv = |i: usize, j: usize| -> f64 {
        if i == j {
            let b_ii = y.mag[(i, i)] * y.ang[(i, i)].sin();
            q_inj[i] / v[i] - v[i] * b_ii
        } else {
            let m = y.mag[(i, j)];
            if m == 0.0 {
                0.0
            } else {
                v[i] * m * (th[i] - th[j] - y.ang[(i, j)]).sin()
            }
        }
    };

    let dim = layout.dim();
    let nth = layout.theta_vars.len();
    let nv = layout.v_vars.len();
    let mut jac = DMatrix::zeros(dim, dim);

    let mut row = 0;
    for &i in &layout.p_rows {
        for (c, &j) in layout.theta_vars.iter().enumerate() {
            jac[(row, c)] = -dp_dth(i, j);
        }
        for (c, &j) in layout.v_vars.iter().enumerate() {
            jac[(row, nth + c)] = -dp_dv(i, j);
        }
        if let Some(di) = der_at[i] {
            jac[(row, dim - 1)] = -1.0 / ders[di].m;
        }
        row += 1;
    }
    for &i in &layout.q_rows {
        for (c, &j) in layout.theta_vars.iter().enumerate() {
            jac[(row, c)] = -dq_dth(i, j);
        }
        for (c, &j) in layout.v_vars.iter().enumerate() {
            let mut entry = -dq_dv(i, j);
            if i == j {
                if let Some(di) = der_at[i] {
                    entry +=
                        dq_dv_diagonal(control, di, &ders[di], v[i], case.buses[i].v_rated);
                }
            }
            jac[(row, nth + c)] = entry;
        }
        row += 1;
    }

    // Balance row: zero theta/V blocks, droop column sum in f.
    debug_assert_eq!(row, dim - 1);
    if opts.exact_loss_jacobian {
        for (c, &j) in layout.theta_vars.iter().enumerate() {
            jac[(row, c)] = -(0..n).map(|i| dp_dth(i, j)).sum::<f64>();
        }
        for (c, &j) in layout.v_vars.iter().enumerate() {
            jac[(row, nth + c)] = -(0..n).map(|i| dp_dv(i, j)).sum::<f64>();
        }
    }
    jac[(row, dim - 1)] = ders.iter().map(|d| -1.0 / d.m).sum();
    let _ = nv;
    Ok(jac)
}

/// Solves the dense linear system J * dx = rhs by LU with partial pivoting.
pub fn newton_step(jac: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if jac.nrows() != jac.ncols() || jac.nrows() != rhs.len() {
        return Err(Error::DimensionMismatch { expected: jac.nrows(), got: rhs.len() });
    }
    let lu = jac.clone().lu();
    let diag = lu.u().diagonal();
    let max_pivot = diag.iter().fold(0.0f64, |a, &p| a.max(p.abs()));
    let min_pivot = diag.iter().fold(f64::INFINITY, |a, &p| a.min(p.abs()));
    if max_pivot == 0.0 || min_pivot <= 1e-13 * max_pivot {
        return Err(Error::SingularJacobian { iteration: 0 });
    }
    lu.solve(rhs).ok_or(Error::SingularJacobian { iteration: 0 })
}

struct StepNorms {
    d_theta: f64,
    d_v: f64,
    d_f: f64,
}

/// Applies dx to the state, clamping |dV| to the step limit while the
/// residual is large and keeping magnitudes positive.
fn apply_step(
    x: &mut StateVector,
    layout: &VarLayout,
    dx: &DVector<f64>,
    opts: &SolverOptions,
    limit_active: bool,
) -> StepNorms {
    let nth = layout.theta_vars.len();
    let mut norms = StepNorms { d_theta: 0.0, d_v: 0.0, d_f: 0.0 };
    for (c, &i) in layout.theta_vars.iter().enumerate() {
        x.theta[i] += dx[c];
        norms.d_theta = norms.d_theta.max(dx[c].abs());
    }
    for (c, &i) in layout.v_vars.iter().enumerate() {
        let mut dv = dx[nth + c];
        if limit_active {
            dv = dv.clamp(-opts.step_limit, opts.step_limit);
        }
        let old = x.v[i];
        let mut new = old + dv;
        if new <= 0.0 {
            new = 0.5 * old;
            dv = new - old;
        }
        x.v[i] = new;
        norms.d_v = norms.d_v.max(dv.abs());
    }
    let df = dx[dx.len() - 1];
    x.f += df;
    norms.d_f = df.abs();
    norms
}

struct LoopOutcome {
    converged: bool,
    iterations: usize,
    history: Vec<f64>,
}

/// One Newton loop. When `secondary` is set, rho and the dummy voltages are
/// refreshed at the top of every iteration and their changes join the
/// convergence test.
#[allow(clippy::too_many_arguments)]
fn newton_loop(
    case: &NetworkCase,
    y: &AdmittanceMatrix,
    ders: &[DroopParams],
    control: &mut ControlState,
    x: &mut StateVector,
    layout: &VarLayout,
    opts: &SolverOptions,
    secondary: bool,
) -> Result<LoopOutcome> {
    let der_v: Vec<usize> = ders.iter().map(|d| case.bus_index(d.bus).unwrap()).collect();
    let v_rated: Vec<f64> = der_v.iter().map(|&i| case.buses[i].v_rated).collect();

    let mut history = Vec::new();
    for k in 1..=opts.max_iter {
        let mut d_rho = 0.0;
        let mut d_vd = 0.0;
        if secondary {
            if control.leader.is_some() {
                // The ratio is refreshed through its aggregate form
                // total delivered DER vars / total rated vars. The fixed
                // point is the leader definition Q_1 / Q*_1 (the leader's
                // own Q row pins it there), but the aggregate iterates with
                // gain near zero, whereas reading the leader bus alone feeds
                // back with gain -sum(Q*_F)/Q*_1 through the var balance and
                // diverges once followers outweigh the leader.
                let (_, q_inj) = network_injections(y, &x.theta, &x.v)?;
                let q_total: f64 = der_v.iter().map(|&i| q_inj[i] + case.buses[i].q_load).sum();
                let q_star_total: f64 = ders.iter().map(|d| d.q_star).sum();
                d_rho = control.update_rho(q_total, q_star_total);
            }
            let v_now: Vec<f64> = der_v.iter().map(|&i| x.v[i]).collect();
            d_vd = control.update_dummy_voltage(&v_now, &v_rated, opts.vd_gain, opts.tol_vd);
        }

        let f = assemble_mismatch_with(case, y, control, ders, x, layout)?;
        let residual = f.amax();
        history.push(residual);

        let jac = assemble_jacobian_with(case, y, control, ders, x, layout, opts)?;
        let dx = newton_step(&jac, &(-&f)).map_err(|e| match e {
            Error::SingularJacobian { .. } => Error::SingularJacobian { iteration: k },
            other => other,
        })?;
        let norms = apply_step(x, layout, &dx, opts, residual >= 1e-2);

        let steps_ok = norms.d_theta < opts.tol_vtheta
            && norms.d_v < opts.tol_vtheta
            && norms.d_f < opts.tol_f_rho;
        let refresh_ok = !secondary || (d_rho.abs() < opts.tol_f_rho && d_vd < opts.tol_vd);
        if steps_ok && refresh_ok {
            return Ok(LoopOutcome { converged: true, iterations: k, history });
        }
    }
    Ok(LoopOutcome { converged: false, iterations: opts.max_iter, history })
}

fn build_solution(
    case: &NetworkCase,
    y: &AdmittanceMatrix,
    ders: &[DroopParams],
    control: &ControlState,
    x: StateVector,
    iterations: usize,
    converged: bool,
    history: Vec<f64>,
) -> Result<PowerFlowSolution> {
    let der_injections: Vec<DerInjection> = ders
        .iter()
        .enumerate()
        .map(|(di, d)| {
            let i = case.bus_index(d.bus).unwrap();
            DerInjection {
                bus: d.bus,
                p: droop_real_power(d, x.f),
                q: der_reactive_power(control, di, d, x.v[i], case.buses[i].v_rated),
            }
        })
        .collect();

    let mut limit_flags = Vec::new();
    for (inj, d) in der_injections.iter().zip(ders) {
        if let Some(p_max) = d.p_max {
            if inj.p.abs() > p_max {
                limit_flags.push(LimitFlag { bus: d.bus, quantity: "p", value: inj.p, limit: p_max });
            }
        }
        if let Some(q_max) = d.q_max {
            if inj.q.abs() > q_max {
                limit_flags.push(LimitFlag { bus: d.bus, quantity: "q", value: inj.q, limit: q_max });
            }
        }
    }

    let flows = branch_flows(case, &x.theta, &x.v);
    let (p_inj, _) = network_injections(y, &x.theta, &x.v)?;
    let losses = p_inj.iter().sum();
    let max_residual = assemble_mismatch(case, y, control, ders, &x)?.amax();
    Ok(PowerFlowSolution {
        f_hz: x.f * case.f_nominal,
        state: x,
        bus_ids: case.buses.iter().map(|b| b.id).collect(),
        der_injections,
        branch_flows: flows,
        losses,
        iterations,
        converged,
        max_residual,
        residual_history: history,
        limit_flags,
    })
}

/// Droop-only power flow from a flat start.
pub fn solve_droop(
    case: &NetworkCase,
    ders: &[DroopParams],
    opts: &SolverOptions,
) -> Result<PowerFlowSolution> {
    opts.validate()?;
    if ders.is_empty() {
        return Err(Error::NoDer);
    }
    for d in ders {
        d.validate()?;
    }
    let y = build_admittance(case)?;
    let layout = VarLayout::new(case);
    let mut control = ControlState::new(ControlMode::Droop, None, 1.0, ders.len())?;
    let mut x = StateVector::flat_start(case);
    let out = newton_loop(case, &y, ders, &mut control, &mut x, &layout, opts, false)?;
    let solution = build_solution(
        case, &y, ders, &control, x, out.iterations, out.converged, out.history,
    )?;
    if !solution.converged {
        return Err(Error::NotConverged(Box::new(solution)));
    }
    Ok(solution)
}

/// Full two-stage solve: droop bootstrap, then the requested secondary mode.
pub fn solve(
    case: &NetworkCase,
    ders: &[DroopParams],
    config: &ControlConfig,
    opts: &SolverOptions,
) -> Result<PowerFlowSolution> {
    if config.mode == ControlMode::Droop {
        return solve_droop(case, ders, opts);
    }
    opts.validate()?;
    if ders.is_empty() {
        return Err(Error::NoDer);
    }

    let leader = match config.leader {
        Some(bus) => match ders.iter().position(|d| d.bus == bus) {
            Some(li) => Some(li),
            None => {
                return Err(Error::validation(
                    "leader",
                    format!("leader bus {bus} carries no droop parameters"),
                ))
            }
        },
        None if config.mode.needs_leader() => return Err(Error::NoLeader),
        None => None,
    };

    let bootstrap = solve_droop(case, ders, opts)?;
    let y = build_admittance(case)?;
    let layout = VarLayout::new(case);

    let mut control = ControlState::new(config.mode, leader, config.z_d, ders.len())?;
    let mut x = bootstrap.state.clone();
    for (di, d) in ders.iter().enumerate() {
        let i = case.bus_index(d.bus).unwrap();
        let v_dp = x.v[i];
        // Baseline the VR law on the droop solution so the handoff starts
        // from a consistent operating point.
        control.q0[di] = droop_reactive_power(d, v_dp);
        control.v_d[di] = 2.0 * v_dp - case.buses[i].v_rated;
    }
    if leader.is_some() {
        // Seed the ratio from the droop solution's delivered vars, matching
        // the aggregate refresh used inside the loop.
        let q_total: f64 = ders
            .iter()
            .map(|d| droop_reactive_power(d, x.v[case.bus_index(d.bus).unwrap()]))
            .sum();
        control.rho = q_total / ders.iter().map(|d| d.q_star).sum::<f64>();
    }

    let out = newton_loop(case, &y, ders, &mut control, &mut x, &layout, opts, true)?;
    let mut history = bootstrap.residual_history;
    history.extend(out.history);
    let solution = build_solution(
        case,
        &y,
        ders,
        &control,
        x,
        bootstrap.iterations + out.iterations,
        out.converged,
        history,
    )?;
    if !solution.converged {
        return Err(Error::NotConverged(Box::new(solution)));
    }
    Ok(solution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use crate::netmodel::{Branch, Bus};

    fn der_params(bus: usize, m: f64, n: f64) -> DroopParams {
        DroopParams {
            bus: BusId(bus),
            m,
            n,
            f0: 1.0,
            v0: 1.0,
            p_set: 0.0,
            q_set: 0.0,
            q_star: 1.0,
            p_max: None,
            q_max: None,
        }
    }

    fn three_bus(load: (f64, f64), lossless: bool) -> (NetworkCase, Vec<DroopParams>) {
        let r = if lossless { 0.0 } else { 0.01 };
        let case = NetworkCase::new(
            "three-bus",
            1.0,
            1.0,
            60.0,
            vec![
                Bus::der(1, 0.0, 0.0, true),
                Bus::pq(2, load.0, load.1),
                Bus::der(3, 0.0, 0.0, false),
            ],
            vec![Branch::line(1, 2, r, 0.1), Branch::line(2, 3, r, 0.1)],
        )
        .unwrap();
        let ders = vec![der_params(1, 0.01, 0.05), der_params(3, 0.01, 0.05)];
        (case, ders)
    }

    #[test]
    fn newton_step_identity() {
        let jac = DMatrix::<f64>::identity(4, 4);
        let mut rhs = DVector::zeros(4);
        rhs[2] = 1.0;
        let dx = newton_step(&jac, &rhs).unwrap();
        assert_eq!(dx, rhs);
    }

    #[test]
    fn newton_step_backward_error() {
        // Fixed ill-ordered but well-conditioned system.
        let jac = DMatrix::from_row_slice(
            3,
            3,
            &[1e-8, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 10.0],
        );
        let rhs = DVector::from_row_slice(&[1.0, -2.0, 0.5]);
        let dx = newton_step(&jac, &rhs).unwrap();
        let back = &jac * &dx - &rhs;
        assert!(back.amax() < 1e-10 * rhs.amax());
    }

    #[test]
    fn newton_step_detects_singular() {
        let jac = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let rhs = DVector::from_row_slice(&[1.0, 1.0]);
        assert!(matches!(
            newton_step(&jac, &rhs),
            Err(Error::SingularJacobian { .. })
        ));
    }

    #[test]
    fn zero_load_flat_start_is_equilibrium() {
        let (case, ders) = three_bus((0.0, 0.0), false);
        let y = build_admittance(&case).unwrap();
        let control = ControlState::new(ControlMode::Droop, None, 0.001, 2).unwrap();
        let x = StateVector::flat_start(&case);
        let f = assemble_mismatch(&case, &y, &control, &ders, &x).unwrap();
        // zero up to the polar-form representation error of the admittance
        assert!(f.amax() < 1e-12, "residual {}", f.amax());
    }

    #[test]
    fn balance_row_equals_sum_of_all_p_mismatches() {
        let (case, ders) = three_bus((0.4, 0.2), false);
        let y = build_admittance(&case).unwrap();
        let control = ControlState::new(ControlMode::Droop, None, 0.001, 2).unwrap();
        // off-equilibrium state
        let x = StateVector {
            theta: vec![0.0, -0.03, 0.01],
            v: vec![1.01, 0.97, 1.0],
            f: 0.999,
        };
        let f = assemble_mismatch(&case, &y, &control, &ders, &x).unwrap();
        // Rebuild every per-bus P mismatch, including the reference bus.
        let (p_inj, _) = network_injections(&y, &x.theta, &x.v).unwrap();
        let mut sum = 0.0;
        for (i, bus) in case.buses.iter().enumerate() {
            let pg = ders
                .iter()
                .find(|d| d.bus == bus.id)
                .map(|d| droop_real_power(d, x.f))
                .unwrap_or(0.0);
            sum += pg - bus.p_load - p_inj[i];
        }
        assert_abs_diff_eq!(f[f.len() - 1], sum, epsilon = 1e-12);
    }

    #[test]
    fn droop_sharing_inverse_to_m_lossless() {
        // m2 = 2 m1 on a lossless network: DER 1 supplies two thirds.
        let case = NetworkCase::new(
            "two-der",
            1.0,
            1.0,
            60.0,
            vec![
                Bus::der(1, 0.0, 0.0, true),
                Bus::pq(2, 0.9, 0.3),
                Bus::der(3, 0.0, 0.0, false),
            ],
            vec![Branch::line(1, 2, 0.0, 0.1), Branch::line(2, 3, 0.0, 0.1)],
        )
        .unwrap();
        let ders = vec![der_params(1, 0.005, 0.05), der_params(3, 0.01, 0.05)];
        let sol = solve_droop(&case, &ders, &SolverOptions::default()).unwrap();
        assert!(sol.converged);
        assert_abs_diff_eq!(sol.der_injections[0].p, 0.6, epsilon = 1e-8);
        assert_abs_diff_eq!(sol.der_injections[1].p, 0.3, epsilon = 1e-8);
        assert_abs_diff_eq!(
            sol.der_injections[0].p,
            2.0 * sol.der_injections[1].p,
            epsilon = 1e-8
        );
    }

    #[test]
    fn symmetric_case_solves_symmetric() {
        let (case, ders) = three_bus((0.8, 0.4), false);
        let sol = solve_droop(&case, &ders, &SolverOptions::default()).unwrap();
        assert!(sol.converged);
        assert_abs_diff_eq!(sol.state.v[0], sol.state.v[2], epsilon = 1e-9);
        assert_abs_diff_eq!(sol.der_injections[0].p, sol.der_injections[1].p, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.der_injections[0].q, sol.der_injections[1].q, epsilon = 1e-9);
        // power balance at the converged point
        assert!(sol.max_residual < 1e-5);
    }

    #[test]
    fn first_frequency_step_opposes_load_excess() {
        let (case, ders) = three_bus((0.6, 0.2), false);
        let y = build_admittance(&case).unwrap();
        let layout = VarLayout::new(&case);
        let control = ControlState::new(ControlMode::Droop, None, 0.001, 2).unwrap();
        let x = StateVector::flat_start(&case);
        let f = assemble_mismatch(&case, &y, &control, &ders, &x).unwrap();
        let jac = assemble_jacobian(&case, &y, &control, &ders, &x, &SolverOptions::default())
            .unwrap();
        let dx = newton_step(&jac, &(-&f)).unwrap();
        let load_excess = 0.6; // loads minus zero generation at flat start
        assert!(dx[layout.dim() - 1] * load_excess < 0.0);
    }

    #[test]
    fn dp_via_solve_identical_to_solve_droop() {
        let (case, ders) = three_bus((0.5, 0.25), false);
        let opts = SolverOptions::default();
        let a = solve_droop(&case, &ders, &opts).unwrap();
        let cfg = ControlConfig { mode: ControlMode::Droop, leader: None, z_d: 0.001 };
        let b = solve(&case, &ders, &cfg, &opts).unwrap();
        assert_eq!(a.state.v, b.state.v);
        assert_eq!(a.state.theta, b.state.theta);
        assert_eq!(a.state.f.to_bits(), b.state.f.to_bits());
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn no_der_case_is_rejected() {
        let (case, _) = three_bus((0.1, 0.0), false);
        assert!(matches!(
            solve_droop(&case, &[], &SolverOptions::default()),
            Err(Error::NoDer)
        ));
    }

    #[test]
    fn missing_leader_is_rejected() {
        let (case, ders) = three_bus((0.5, 0.2), false);
        let cfg = ControlConfig {
            mode: ControlMode::ReactiveSharing,
            leader: None,
            z_d: 0.001,
        };
        assert!(matches!(
            solve(&case, &ders, &cfg, &SolverOptions::default()),
            Err(Error::NoLeader)
        ));
    }

    #[test]
    fn secondary_modes_converge_on_small_case() {
        let (case, ders) = three_bus((0.8, 0.5), false);
        for mode in [
            ControlMode::ReactiveSharing,
            ControlMode::VoltageRegulation,
            ControlMode::SmartTuning,
        ] {
            let cfg = ControlConfig { mode, leader: Some(BusId(1)), z_d: 0.001 };
            let sol = solve(&case, &ders, &cfg, &SolverOptions::default()).unwrap();
            assert!(sol.converged, "{mode} did not converge");
            assert!(sol.max_residual < 1e-5, "{mode} residual {}", sol.max_residual);
            match mode {
                ControlMode::ReactiveSharing => {
                    let r0 = sol.der_injections[0].q / ders[0].q_star;
                    let r1 = sol.der_injections[1].q / ders[1].q_star;
                    assert!((r0 - r1).abs() < 1e-3);
                }
                ControlMode::VoltageRegulation => {
                    assert!((sol.state.v[0] - 1.0).abs() < 1e-4);
                    assert!((sol.state.v[2] - 1.0).abs() < 1e-4);
                }
                ControlMode::SmartTuning => {
                    assert!((sol.state.v[0] - 1.0).abs() < 1e-4);
                }
                _ => {}
            }
        }
    }
}
