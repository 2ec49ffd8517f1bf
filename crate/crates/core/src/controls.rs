//! DER behavior under droop primary control and the secondary control modes.
//!
//! All quantities here are per-unit; frequency is per-unit of nominal.
//! Conversion from the Hz values found in case files happens in `caseio`.

use crate::error::{Error, Result};
use crate::netmodel::BusId;

/// Droop parameters of one DER, per-unit throughout (frequency quantities in
/// p.u. of nominal frequency).
#[derive(Debug, Clone, PartialEq)]
pub struct DroopParams {
    pub bus: BusId,
    /// P/F droop coefficient, p.u. frequency per p.u. W (> 0).
    pub m: f64,
    /// Q/V droop coefficient, p.u. V per p.u. var (> 0).
    pub n: f64,
    /// Nominal frequency setpoint, p.u.
    pub f0: f64,
    /// Nominal voltage setpoint, p.u.
    pub v0: f64,
    /// Real power setpoint, p.u.
    pub p_set: f64,
    /// Reactive power setpoint, p.u.
    pub q_set: f64,
    /// Rated reactive output Q*, p.u. (> 0).
    pub q_star: f64,
    /// Capability limits, p.u.; report-only, never enforced.
    pub p_max: Option<f64>,
    pub q_max: Option<f64>,
}

impl DroopParams {
    pub fn validate(&self) -> Result<()> {
        if self.m <= 0.0 || self.n <= 0.0 {
            return Err(Error::validation(
                "droop-coefficient",
                format!("DER at bus {} has non-positive droop coefficient", self.bus),
            ));
        }
        if self.q_star <= 0.0 {
            return Err(Error::validation(
                "q-star",
                format!("DER at bus {} has non-positive q_star", self.bus),
            ));
        }
        Ok(())
    }
}

/// P/F droop: P_G = p_set - (f - f0)/m.
pub fn droop_real_power(params: &DroopParams, f: f64) -> f64 {
    params.p_set - (f - params.f0) / params.m
}

/// Q/V droop: Q_G = q_set - (v - v0)/n. Used for every DER in droop mode and
/// for the leader in rps/st.
pub fn droop_reactive_power(params: &DroopParams, v: f64) -> f64 {
    params.q_set - (v - params.v0) / params.n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlMode {
    /// Droop primary control only.
    Droop,
    /// Reactive power sharing: leader on Q/V droop, followers at rho * Q*.
    ReactiveSharing,
    /// Voltage regulation: every DER drives its bus voltage to rated.
    VoltageRegulation,
    /// Smart tuning: leader regulates voltage, followers share reactively.
    SmartTuning,
}

impl ControlMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ControlMode::Droop => "dp",
            ControlMode::ReactiveSharing => "rps",
            ControlMode::VoltageRegulation => "vr",
            ControlMode::SmartTuning => "st",
        }
    }

    pub fn needs_leader(&self) -> bool {
        matches!(self, ControlMode::ReactiveSharing | ControlMode::SmartTuning)
    }
}

impl std::str::FromStr for ControlMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dp" | "droop" => Ok(ControlMode::Droop),
            "rps" => Ok(ControlMode::ReactiveSharing),
            "vr" => Ok(ControlMode::VoltageRegulation),
            "st" => Ok(ControlMode::SmartTuning),
            other => Err(Error::validation(
                "mode",
                format!("unknown control mode '{other}' (expected dp|rps|vr|st)"),
            )),
        }
    }
}

impl std::fmt::Display for ControlMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Case/CLI-level control selection.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlConfig {
    pub mode: ControlMode,
    pub leader: Option<BusId>,
    /// Dummy-bus sensitivity, p.u. V per p.u. var (> 0), shared by all
    /// VR-governed DERs.
    pub z_d: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            mode: ControlMode::Droop,
            leader: None,
            z_d: 0.001,
        }
    }
}

/// Mutable secondary-loop quantities, owned by a single solver run. Vectors
/// are indexed by DER position (the order of the `DroopParams` slice).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlState {
    pub mode: ControlMode,
    /// Index into the DER list, not a bus id.
    pub leader: Option<usize>,
    /// Reactive power ratio rho = Q_leader / Q*_leader.
    pub rho: f64,
    /// Dummy bus voltages V_d, one per DER (meaningful for VR-governed ones).
    pub v_d: Vec<f64>,
    /// Sensitivities Z_d, p.u. V per p.u. var.
    pub z_d: Vec<f64>,
    /// Baseline var injections Q0 for the VR law.
    pub q0: Vec<f64>,
}

impl ControlState {
    pub fn new(mode: ControlMode, leader: Option<usize>, z_d: f64, n_ders: usize) -> Result<Self> {
        if z_d <= 0.0 {
            return Err(Error::validation("z-d", "z_d must be positive"));
        }
        if mode.needs_leader() && leader.is_none() {
            return Err(Error::NoLeader);
        }
        Ok(ControlState {
            mode,
            leader,
            rho: 0.0,
            v_d: vec![1.0; n_ders],
            z_d: vec![z_d; n_ders],
            q0: vec![0.0; n_ders],
        })
    }

    /// True when DER `i` runs the voltage-regulation law in this mode.
    pub fn governs_vr(&self, i: usize) -> bool {
        match self.mode {
            ControlMode::VoltageRegulation => true,
            ControlMode::SmartTuning => Some(i) == self.leader,
            _ => false,
        }
    }

    /// True when DER `i` is an rps-style follower in this mode.
    pub fn is_follower(&self, i: usize) -> bool {
        match self.mode {
            ControlMode::ReactiveSharing | ControlMode::SmartTuning => Some(i) != self.leader,
            _ => false,
        }
    }

    /// rho <- q_leader / q_leader_star; returns the change.
    pub fn update_rho(&mut self, q_leader: f64, q_leader_star: f64) -> f64 {
        let new = q_leader / q_leader_star;
        let delta = new - self.rho;
        self.rho = new;
        delta
    }

    /// v_d <- v_d + gain * (v_rated - v_der) for each VR-governed DER whose
    /// voltage error exceeds the deadband; returns the largest |change|.
    pub fn update_dummy_voltage(
        &mut self,
        v_der: &[f64],
        v_rated: &[f64],
        gain: f64,
        deadband: f64,
    ) -> f64 {
        let mut max_delta: f64 = 0.0;
        for i in 0..self.v_d.len() {
            if !self.governs_vr(i) {
                continue;
            }
            let err = v_rated[i] - v_der[i];
            if err.abs() < deadband {
                continue;
            }
            let step = gain * err;
            self.v_d[i] += step;
            max_delta = max_delta.max(step.abs());
        }
        max_delta
    }
}

/// Follower var injection under rps/st: rho * Q*, constant within a Newton
/// iteration.
pub fn rps_follower_q(state: &ControlState, params: &DroopParams) -> f64 {
    state.rho * params.q_star
}

/// Voltage-regulation var injection:
/// Q = v * (1/z_d) * (v_d + v_rated - 2 v) + q0.
pub fn vr_q(state: &ControlState, der_index: usize, v: f64, v_rated: f64) -> f64 {
    let zd = state.z_d[der_index];
    let vd = state.v_d[der_index];
    v * (vd + v_rated - 2.0 * v) / zd + state.q0[der_index]
}

/// Var injection of DER `der_index` at voltage `v` under the current mode.
pub fn der_reactive_power(
    state: &ControlState,
    der_index: usize,
    params: &DroopParams,
    v: f64,
    v_rated: f64,
) -> f64 {
    match state.mode {
        ControlMode::Droop => droop_reactive_power(params, v),
        ControlMode::ReactiveSharing => {
            if Some(der_index) == state.leader {
                droop_reactive_power(params, v)
            } else {
                rps_follower_q(state, params)
            }
        }
        ControlMode::VoltageRegulation => vr_q(state, der_index, v, v_rated),
        ControlMode::SmartTuning => {
            if Some(der_index) == state.leader {
                vr_q(state, der_index, v, v_rated)
            } else {
                rps_follower_q(state, params)
            }
        }
    }
}

/// dQ_G/dV of DER `der_index` at voltage `v`; the generation term added to
/// the Q-row diagonal of the Jacobian. Followers contribute zero.
pub fn dq_dv_diagonal(
    state: &ControlState,
    der_index: usize,
    params: &DroopParams,
    v: f64,
    v_rated: f64,
) -> f64 {
    match state.mode {
        ControlMode::Droop => -1.0 / params.n,
        ControlMode::ReactiveSharing => {
            if Some(der_index) == state.leader {
                -1.0 / params.n
            } else {
                0.0
            }
        }
        ControlMode::VoltageRegulation => {
            (state.v_d[der_index] + v_rated - 4.0 * v) / state.z_d[der_index]
        }
        ControlMode::SmartTuning => {
            if Some(der_index) == state.leader {
                (state.v_d[der_index] + v_rated - 4.0 * v) / state.z_d[der_index]
            } else {
                0.0
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn params(m: f64, n: f64) -> DroopParams {
        DroopParams {
            bus: BusId(1),
            m,
            n,
            f0: 1.0,
            v0: 1.0,
            p_set: 0.5,
            q_set: 0.2,
            q_star: 1.0,
            p_max: None,
            q_max: None,
        }
    }

    #[test]
    fn droop_at_setpoints_returns_setpoints() {
        let p = params(0.005, 0.05);
        assert_abs_diff_eq!(droop_real_power(&p, 1.0), 0.5);
        assert_abs_diff_eq!(droop_reactive_power(&p, 1.0), 0.2);
    }

    #[test]
    fn halving_n_doubles_var_response() {
        let sag = 0.02;
        let a = params(0.005, 0.05);
        let b = params(0.005, 0.025);
        let da = droop_reactive_power(&a, 1.0 - sag) - a.q_set;
        let db = droop_reactive_power(&b, 1.0 - sag) - b.q_set;
        assert_abs_diff_eq!(db, 2.0 * da, epsilon = 1e-12);
    }

    #[test]
    fn rho_update_and_follower_injection() {
        let mut st = ControlState::new(ControlMode::ReactiveSharing, Some(0), 0.001, 3).unwrap();
        st.update_rho(0.93, 1.0);
        assert_abs_diff_eq!(st.rho, 0.93);
        let p = params(0.005, 0.05);
        assert_abs_diff_eq!(rps_follower_q(&st, &p), 0.93);
        st.update_rho(1.0, 1.0);
        assert_abs_diff_eq!(st.rho, 1.0);
        assert_abs_diff_eq!(rps_follower_q(&st, &p), p.q_star);
        st.update_rho(0.0, 1.0);
        assert_abs_diff_eq!(rps_follower_q(&st, &p), 0.0);
    }

    #[test]
    fn vr_q_at_recovered_voltage_is_baseline() {
        let mut st = ControlState::new(ControlMode::VoltageRegulation, None, 0.001, 1).unwrap();
        st.q0[0] = 0.7;
        st.v_d[0] = 1.0;
        assert_abs_diff_eq!(vr_q(&st, 0, 1.0, 1.0), 0.7, epsilon = 1e-12);
    }

    #[test]
    fn vr_jacobian_diagonal_matches_finite_difference() {
        let mut st = ControlState::new(ControlMode::VoltageRegulation, None, 0.001, 1).unwrap();
        st.q0[0] = 0.5;
        st.v_d[0] = 0.98;
        let p = params(0.005, 0.05);
        let v = 0.97;
        let h = 1e-7;
        let fd = (vr_q(&st, 0, v + h, 1.0) - vr_q(&st, 0, v - h, 1.0)) / (2.0 * h);
        let analytic = dq_dv_diagonal(&st, 0, &p, v, 1.0);
        assert!((fd - analytic).abs() / analytic.abs() < 1e-6);
    }

    #[test]
    fn dq_dv_by_mode() {
        let p = params(0.005, 0.05);
        let dp = ControlState::new(ControlMode::Droop, None, 0.001, 2).unwrap();
        assert_abs_diff_eq!(dq_dv_diagonal(&dp, 0, &p, 1.0, 1.0), -20.0);

        let rps = ControlState::new(ControlMode::ReactiveSharing, Some(0), 0.001, 2).unwrap();
        assert_abs_diff_eq!(dq_dv_diagonal(&rps, 1, &p, 1.0, 1.0), 0.0);
        assert_abs_diff_eq!(dq_dv_diagonal(&rps, 0, &p, 1.0, 1.0), -20.0);

        // (1/0.001)(1 + 1 - 4) = -2000 at v = v_d = v_rated = 1
        let vr = ControlState::new(ControlMode::VoltageRegulation, None, 0.001, 2).unwrap();
        assert_abs_diff_eq!(dq_dv_diagonal(&vr, 0, &p, 1.0, 1.0), -2000.0);

        let st = ControlState::new(ControlMode::SmartTuning, Some(0), 0.001, 2).unwrap();
        assert_abs_diff_eq!(dq_dv_diagonal(&st, 0, &p, 1.0, 1.0), -2000.0);
        assert_abs_diff_eq!(dq_dv_diagonal(&st, 1, &p, 1.0, 1.0), 0.0);
    }

    #[test]
    fn dummy_voltage_update_fixed_point_and_sign() {
        let mut st = ControlState::new(ControlMode::VoltageRegulation, None, 0.001, 2).unwrap();
        st.v_d = vec![0.98, 0.99];
        // at rated: no movement
        let d = st.update_dummy_voltage(&[1.0, 1.0], &[1.0, 1.0], 1.0, 1e-4);
        assert_eq!(d, 0.0);
        assert_eq!(st.v_d, vec![0.98, 0.99]);
        // sagged voltage raises v_d, which raises vr_q at fixed v
        let q_before = vr_q(&st, 0, 0.97, 1.0);
        let d = st.update_dummy_voltage(&[0.97, 1.0], &[1.0, 1.0], 1.0, 1e-4);
        assert_abs_diff_eq!(d, 0.03, epsilon = 1e-12);
        assert!(vr_q(&st, 0, 0.97, 1.0) > q_before);
        // deadband skips tiny errors componentwise
        let d = st.update_dummy_voltage(&[1.0 - 5e-5, 1.0], &[1.0, 1.0], 1.0, 1e-4);
        assert_eq!(d, 0.0);
    }

    #[test]
    fn leader_required_for_sharing_modes() {
        assert!(matches!(
            ControlState::new(ControlMode::ReactiveSharing, None, 0.001, 2),
            Err(Error::NoLeader)
        ));
        assert!(matches!(
            ControlState::new(ControlMode::SmartTuning, None, 0.001, 2),
            Err(Error::NoLeader)
        ));
    }
}
