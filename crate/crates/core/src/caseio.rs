//! Case-file ingestion/validation, the bundled 33-bus reference case, and
//! result serialization.
//!
//! Case files are TOML with explicit per-unit bases; results are JSON (full
//! fidelity, round-trips losslessly) or CSV (bus table plus branch table).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controls::{ControlConfig, ControlMode, DroopParams};
use crate::error::{Error, Result};
use crate::netmodel::{Branch, Bus, BusId, BusKind, NetworkCase};
use crate::solver::PowerFlowSolution;

pub const FORMAT_VERSION: u32 = 1;

/// A parsed and validated case: network, DER parameters (per-unit), and the
/// default control configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCase {
    pub case: NetworkCase,
    pub ders: Vec<DroopParams>,
    pub control: ControlConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Topology {
    Radial,
    Meshed,
}

impl std::str::FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "radial" => Ok(Topology::Radial),
            "meshed" => Ok(Topology::Meshed),
            other => Err(Error::validation(
                "topology",
                format!("unknown topology '{other}' (expected radial|meshed)"),
            )),
        }
    }
}

impl std::fmt::Display for Topology {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Topology::Radial => "radial",
            Topology::Meshed => "meshed",
        })
    }
}

// ---------------------------------------------------------------------------
// Case file schema (serde view of the TOML file)
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CaseFile {
    format_version: u32,
    name: String,
    /// System power base, MVA.
    base_mva: f64,
    /// Voltage base, kV.
    base_kv: f64,
    /// Nominal frequency, Hz.
    f_nominal: f64,
    buses: Vec<BusRecord>,
    branches: Vec<BranchRecord>,
    ders: Vec<DerRecord>,
    control: ControlRecord,
}

#[derive(Debug, Serialize, Deserialize)]
struct BusRecord {
    id: usize,
    /// "pq" | "pv" | "der"
    kind: String,
    #[serde(default)]
    p_load: f64,
    #[serde(default)]
    q_load: f64,
    #[serde(default = "one")]
    v_rated: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    v_set: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    is_reference: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct BranchRecord {
    from: usize,
    to: usize,
    r_pu: f64,
    x_pu: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    is_switch: bool,
    #[serde(default = "yes")]
    closed: bool,
}

/// DER droop record. Frequency quantities are in Hz in the file and are
/// normalized by `f_nominal` at load time.
#[derive(Debug, Serialize, Deserialize)]
struct DerRecord {
    bus: usize,
    /// P/F droop, Hz per p.u. W.
    m: f64,
    /// Q/V droop, p.u. V per p.u. var.
    n: f64,
    /// Nominal frequency setpoint, Hz.
    f0: f64,
    /// Nominal voltage setpoint, p.u.
    v0: f64,
    p_set: f64,
    q_set: f64,
    q_star: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    q_max: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ControlRecord {
    mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    leader: Option<usize>,
    #[serde(default = "default_zd")]
    z_d: f64,
}

fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn default_zd() -> f64 {
    0.001
}

fn bus_kind_from_str(s: &str, id: usize) -> Result<BusKind> {
    match s.to_ascii_lowercase().as_str() {
        "pq" => Ok(BusKind::Pq),
        "pv" => Ok(BusKind::Pv),
        "der" => Ok(BusKind::Der),
        other => Err(Error::validation(
            "bus-kind",
            format!("bus {id}: unknown kind '{other}' (expected pq|pv|der)"),
        )),
    }
}

fn bus_kind_to_str(kind: BusKind) -> &'static str {
    match kind {
        BusKind::Pq => "pq",
        BusKind::Pv => "pv",
        BusKind::Der => "der",
    }
}

fn case_from_file(cf: CaseFile, path: &str) -> Result<LoadedCase> {
    if cf.format_version != FORMAT_VERSION {
        return Err(Error::Parse {
            path: path.to_string(),
            detail: format!(
                "unsupported format_version {} (expected {})",
                cf.format_version, FORMAT_VERSION
            ),
        });
    }
    let mut buses = Vec::with_capacity(cf.buses.len());
    for b in &cf.buses {
        let kind = bus_kind_from_str(&b.kind, b.id)?;
        buses.push(Bus {
            id: BusId(b.id),
            kind,
            p_load: b.p_load,
            q_load: b.q_load,
            v_rated: b.v_rated,
            v_set: b.v_set.unwrap_or(b.v_rated),
            is_reference: b.is_reference,
        });
    }
    let branches = cf
        .branches
        .iter()
        .map(|br| Branch {
            from: BusId(br.from),
            to: BusId(br.to),
            r: br.r_pu,
            x: br.x_pu,
            is_switch: br.is_switch,
            closed: br.closed,
        })
        .collect();
    let case = NetworkCase::new(cf.name, cf.base_mva, cf.base_kv, cf.f_nominal, buses, branches)?;

    let mut ders = Vec::with_capacity(cf.ders.len());
    for d in &cf.ders {
        let params = DroopParams {
            bus: BusId(d.bus),
            m: d.m / cf.f_nominal,
            n: d.n,
            f0: d.f0 / cf.f_nominal,
            v0: d.v0,
            p_set: d.p_set,
            q_set: d.q_set,
            q_star: d.q_star,
            p_max: d.p_max,
            q_max: d.q_max,
        };
        params.validate()?;
        ders.push(params);
    }
    let mode: ControlMode = cf.control.mode.parse()?;
    let control = ControlConfig {
        mode,
        leader: cf.control.leader.map(BusId),
        z_d: cf.control.z_d,
    };
    let loaded = LoadedCase { case, ders, control };
    validate_loaded(&loaded)?;
    Ok(loaded)
}

fn validate_loaded(loaded: &LoadedCase) -> Result<()> {
    let case = &loaded.case;
    for d in &loaded.ders {
        match case.bus_index(d.bus) {
            Some(i) if case.buses[i].kind == BusKind::Der => {}
            Some(_) => {
                return Err(Error::validation(
                    "der-bus",
                    format!("bus {} carries droop parameters but is not a DER bus", d.bus),
                ))
            }
            None => {
                return Err(Error::validation(
                    "der-bus",
                    format!("DER record references missing bus {}", d.bus),
                ))
            }
        }
    }
    for i in case.der_indices() {
        let id = case.buses[i].id;
        let count = loaded.ders.iter().filter(|d| d.bus == id).count();
        if count != 1 {
            return Err(Error::validation(
                "der-params",
                format!("DER bus {id} has {count} droop records, expected exactly 1"),
            ));
        }
    }
    if loaded.control.z_d <= 0.0 {
        return Err(Error::validation("z-d", "control.z_d must be positive"));
    }
    if loaded.control.mode.needs_leader() {
        match loaded.control.leader {
            None => return Err(Error::NoLeader),
            Some(bus) if !loaded.ders.iter().any(|d| d.bus == bus) => {
                return Err(Error::validation(
                    "leader",
                    format!("leader bus {bus} carries no droop parameters"),
                ))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

fn file_from_case(loaded: &LoadedCase) -> CaseFile {
    let case = &loaded.case;
    CaseFile {
        format_version: FORMAT_VERSION,
        name: case.name.clone(),
        base_mva: case.base_mva,
        base_kv: case.base_kv,
        f_nominal: case.f_nominal,
        buses: case
            .buses
            .iter()
            .map(|b| BusRecord {
                id: b.id.0,
                kind: bus_kind_to_str(b.kind).to_string(),
                p_load: b.p_load,
                q_load: b.q_load,
                v_rated: b.v_rated,
                v_set: (b.kind == BusKind::Pv).then_some(b.v_set),
                is_reference: b.is_reference,
            })
            .collect(),
        branches: case
            .branches
            .iter()
            .map(|br| BranchRecord {
                from: br.from.0,
                to: br.to.0,
                r_pu: br.r,
                x_pu: br.x,
                is_switch: br.is_switch,
                closed: br.closed,
            })
            .collect(),
        ders: loaded
            .ders
            .iter()
            .map(|d| DerRecord {
                bus: d.bus.0,
                m: d.m * case.f_nominal,
                n: d.n,
                f0: d.f0 * case.f_nominal,
                v0: d.v0,
                p_set: d.p_set,
                q_set: d.q_set,
                q_star: d.q_star,
                p_max: d.p_max,
                q_max: d.q_max,
            })
            .collect(),
        control: ControlRecord {
            mode: loaded.control.mode.as_str().to_string(),
            leader: loaded.control.leader.map(|b| b.0),
            z_d: loaded.control.z_d,
        },
    }
}

/// Loads and validates a TOML case file.
pub fn load_case(path: impl AsRef<Path>) -> Result<LoadedCase> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let cf: CaseFile = toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    case_from_file(cf, &path.display().to_string())
}

/// Writes a case back out as TOML.
pub fn save_case(loaded: &LoadedCase, path: impl AsRef<Path>) -> Result<()> {
    let cf = file_from_case(loaded);
    let text = toml::to_string(&cf).map_err(|e| Error::Parse {
        path: path.as_ref().display().to_string(),
        detail: format!("serialization failed: {e}"),
    })?;
    fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Bundled 33-bus case
// ---------------------------------------------------------------------------

// Standard 33-bus distribution test feeder (Baran & Wu 1989): branch series
// impedances in ohms and receiving-bus loads in kW/kvar, 12.66 kV. Here the
// feeder runs islanded on a 500 kVA power base with five DERs.
const FEEDER_BRANCHES_OHM: [(usize, usize, f64, f64); 32] = [
    (1, 2, 0.0922, 0.0470),
    (2, 3, 0.4930, 0.2511),
    (3, 4, 0.3660, 0.1864),
    (4, 5, 0.3811, 0.1941),
    (5, 6, 0.8190, 0.7070),
    (6, 7, 0.1872, 0.6188),
    (7, 8, 0.7114, 0.2351),
    (8, 9, 1.0300, 0.7400),
    (9, 10, 1.0440, 0.7400),
    (10, 11, 0.1966, 0.0650),
    (11, 12, 0.3744, 0.1238),
    (12, 13, 1.4680, 1.1550),
    (13, 14, 0.5416, 0.7129),
    (14, 15, 0.5910, 0.5260),
    (15, 16, 0.7463, 0.5450),
    (16, 17, 1.2890, 1.7210),
    (17, 18, 0.7320, 0.5740),
    (2, 19, 0.1640, 0.1565),
    (19, 20, 1.5042, 1.3554),
    (20, 21, 0.4095, 0.4784),
    (21, 22, 0.7089, 0.9373),
    (3, 23, 0.4512, 0.3083),
    (23, 24, 0.8980, 0.7091),
    (24, 25, 0.8960, 0.7011),
    (6, 26, 0.2030, 0.1034),
    (26, 27, 0.2842, 0.1447),
    (27, 28, 1.0590, 0.9337),
    (28, 29, 0.8042, 0.7006),
    (29, 30, 0.5075, 0.2585),
    (30, 31, 0.9744, 0.9630),
    (31, 32, 0.3105, 0.3619),
    (32, 33, 0.3410, 0.5302),
];

/// Normally-open tie switches of the same feeder, ohms.
const TIE_SWITCHES_OHM: [(usize, usize, f64, f64); 5] = [
    (8, 21, 2.0, 2.0),
    (9, 15, 2.0, 2.0),
    (12, 22, 2.0, 2.0),
    (18, 33, 0.5, 0.5),
    (25, 29, 0.5, 0.5),
];

/// Receiving-bus loads, kW / kvar (bus 1 carries none).
const FEEDER_LOADS_KW: [(usize, f64, f64); 32] = [
    (2, 100.0, 60.0),
    (3, 90.0, 40.0),
    (4, 120.0, 80.0),
    (5, 60.0, 30.0),
    (6, 60.0, 20.0),
    (7, 200.0, 100.0),
    (8, 200.0, 100.0),
    (9, 60.0, 20.0),
    (10, 60.0, 20.0),
    (11, 45.0, 30.0),
    (12, 60.0, 35.0),
    (13, 60.0, 35.0),
    (14, 120.0, 80.0),
    (15, 60.0, 10.0),
    (16, 60.0, 20.0),
    (17, 60.0, 20.0),
    (18, 90.0, 40.0),
    (19, 90.0, 40.0),
    (20, 90.0, 40.0),
    (21, 90.0, 40.0),
    (22, 90.0, 40.0),
    (23, 90.0, 50.0),
    (24, 420.0, 200.0),
    (25, 420.0, 200.0),
    (26, 60.0, 25.0),
    (27, 60.0, 25.0),
    (28, 60.0, 20.0),
    (29, 120.0, 70.0),
    (30, 200.0, 600.0),
    (31, 150.0, 70.0),
    (32, 210.0, 100.0),
    (33, 60.0, 40.0),
];

const CASE33_BASE_MVA: f64 = 0.5;
const CASE33_BASE_KV: f64 = 12.66;
const CASE33_F_NOMINAL: f64 = 60.0;

/// DER placements with the real-power dispatch each droop slope is sized
/// for. Slopes follow m_i ∝ 1/P_target so droop sharing lands on the
/// dispatch ratios; var setpoints sit near the droop-mode operating point.
const CASE33_DERS: [(usize, f64, f64); 5] = [
    (1, 2.50, 0.97),
    (6, 0.98, 0.91),
    (13, 1.70, 0.89),
    (25, 0.98, 0.91),
    (33, 1.30, 0.95),
];

/// Frequency sag at dispatch output, Hz.
const CASE33_DROOP_SAG_HZ: f64 = 0.3;
/// Q/V droop slope, p.u. V per p.u. var.
const CASE33_N: f64 = 0.1;
/// Rated reactive output Q*, p.u., identical for the five DERs.
const CASE33_Q_STAR: f64 = 1.0;
const CASE33_Z_D: f64 = 0.001;

/// The bundled 33-bus case with five DERs at buses 1, 6, 13, 25 and 33.
/// `Radial` keeps the five tie switches open; `Meshed` closes them all.
pub fn builtin_case33(topology: Topology) -> LoadedCase {
    let z_base = CASE33_BASE_KV * CASE33_BASE_KV / CASE33_BASE_MVA;
    let s_base_kw = CASE33_BASE_MVA * 1000.0;

    let der_buses: Vec<usize> = CASE33_DERS.iter().map(|&(b, _, _)| b).collect();
    let mut buses = vec![Bus {
        id: BusId(1),
        kind: BusKind::Der,
        p_load: 0.0,
        q_load: 0.0,
        v_rated: 1.0,
        v_set: 1.0,
        is_reference: true,
    }];
    for &(id, kw, kvar) in &FEEDER_LOADS_KW {
        let kind = if der_buses.contains(&id) { BusKind::Der } else { BusKind::Pq };
        buses.push(Bus {
            id: BusId(id),
            kind,
            p_load: kw / s_base_kw,
            q_load: kvar / s_base_kw,
            v_rated: 1.0,
            v_set: 1.0,
            is_reference: false,
        });
    }

    let mut branches: Vec<Branch> = FEEDER_BRANCHES_OHM
        .iter()
        .map(|&(f, t, r, x)| Branch::line(f, t, r / z_base, x / z_base))
        .collect();
    let closed = topology == Topology::Meshed;
    branches.extend(
        TIE_SWITCHES_OHM
            .iter()
            .map(|&(f, t, r, x)| Branch::switch(f, t, r / z_base, x / z_base, closed)),
    );

    let ders: Vec<DroopParams> = CASE33_DERS
        .iter()
        .map(|&(bus, p_target, q_set)| DroopParams {
            bus: BusId(bus),
            m: CASE33_DROOP_SAG_HZ / p_target / CASE33_F_NOMINAL,
            n: CASE33_N,
            f0: 1.0,
            v0: 1.0,
            p_set: 0.0,
            q_set,
            q_star: CASE33_Q_STAR,
            p_max: None,
            q_max: None,
        })
        .collect();

    let name = match topology {
        Topology::Radial => "case33-radial",
        Topology::Meshed => "case33-meshed",
    };
    let case = NetworkCase::new(
        name,
        CASE33_BASE_MVA,
        CASE33_BASE_KV,
        CASE33_F_NOMINAL,
        buses,
        branches,
    )
    .expect("bundled case is structurally valid");
    LoadedCase {
        case,
        ders,
        control: ControlConfig {
            mode: ControlMode::Droop,
            leader: Some(BusId(1)),
            z_d: CASE33_Z_D,
        },
    }
}

// ---------------------------------------------------------------------------
// Result files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Json,
    Csv,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(OutputFormat::Json),
            "csv" => Ok(OutputFormat::Csv),
            other => Err(Error::validation(
                "format",
                format!("unknown output format '{other}' (expected json|csv)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BusResult {
    pub id: usize,
    pub v_pu: f64,
    pub theta_rad: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DerResult {
    pub bus: usize,
    pub p_pu: f64,
    pub q_pu: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BranchResult {
    pub from: usize,
    pub to: usize,
    pub p_send_pu: f64,
    pub q_send_pu: f64,
    pub p_recv_pu: f64,
    pub q_recv_pu: f64,
    pub loss_pu: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ResultFile {
    pub format_version: u32,
    pub case: String,
    pub mode: String,
    pub converged: bool,
    pub iterations: usize,
    pub f_hz: f64,
    pub losses_pu: f64,
    pub max_residual: f64,
    pub buses: Vec<BusResult>,
    pub ders: Vec<DerResult>,
    pub branches: Vec<BranchResult>,
    pub residual_history: Vec<f64>,
}

impl ResultFile {
    pub fn from_solution(sol: &PowerFlowSolution, case_name: &str, mode: ControlMode) -> Self {
        ResultFile {
            format_version: FORMAT_VERSION,
            case: case_name.to_string(),
            mode: mode.as_str().to_string(),
            converged: sol.converged,
            iterations: sol.iterations,
            f_hz: sol.f_hz,
            losses_pu: sol.losses,
            max_residual: sol.max_residual,
            buses: sol
                .bus_ids
                .iter()
                .enumerate()
                .map(|(i, id)| BusResult {
                    id: id.0,
                    v_pu: sol.state.v[i],
                    theta_rad: sol.state.theta[i],
                })
                .collect(),
            ders: sol
                .der_injections
                .iter()
                .map(|d| DerResult { bus: d.bus.0, p_pu: d.p, q_pu: d.q })
                .collect(),
            branches: sol
                .branch_flows
                .iter()
                .map(|f| BranchResult {
                    from: f.from.0,
                    to: f.to.0,
                    p_send_pu: f.s_send.re,
                    q_send_pu: f.s_send.im,
                    p_recv_pu: f.s_recv.re,
                    q_recv_pu: f.s_recv.im,
                    loss_pu: f.loss(),
                })
                .collect(),
            residual_history: sol.residual_history.clone(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# case,{},mode,{},converged,{},iterations,{},f_hz,{},losses_pu,{},max_residual,{}\n",
            self.case,
            self.mode,
            self.converged,
            self.iterations,
            self.f_hz,
            self.losses_pu,
            self.max_residual
        ));
        out.push_str("bus_id,v_pu,theta_rad\n");
        for b in &self.buses {
            out.push_str(&format!("{},{},{}\n", b.id, b.v_pu, b.theta_rad));
        }
        out.push('\n');
        out.push_str("from,to,p_send_pu,q_send_pu,p_recv_pu,q_recv_pu,loss_pu\n");
        for br in &self.branches {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                br.from, br.to, br.p_send_pu, br.q_send_pu, br.p_recv_pu, br.q_recv_pu, br.loss_pu
            ));
        }
        out
    }
}

/// Writes a result file; telemetry is saved whether or not the run
/// converged.
pub fn save_results(rf: &ResultFile, path: impl AsRef<Path>, format: OutputFormat) -> Result<()> {
    let text = match format {
        OutputFormat::Json => {
            let mut s = serde_json::to_string_pretty(rf).expect("result serializes");
            s.push('\n');
            s
        }
        OutputFormat::Csv => rf.to_csv(),
    };
    fs::write(path, text)?;
    Ok(())
}

/// Reads a JSON result file back.
pub fn load_results(path: impl AsRef<Path>) -> Result<ResultFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn builtin_radial_shape() {
        let loaded = builtin_case33(Topology::Radial);
        assert_eq!(loaded.case.n(), 33);
        assert_eq!(loaded.case.closed_branch_count(), 32);
        assert_eq!(loaded.case.branches.len(), 37);
        assert_eq!(
            loaded.case.branches.iter().filter(|b| b.is_switch).count(),
            5
        );
        let der_ids: Vec<usize> =
            loaded.case.der_indices().iter().map(|&i| loaded.case.buses[i].id.0).collect();
        assert_eq!(der_ids, vec![1, 6, 13, 25, 33]);
        assert!(loaded.case.buses[0].is_reference);
        // 3.715 MW / 2.3 Mvar on the 500 kVA base
        let (p, q) = loaded.case.total_load();
        assert_abs_diff_eq!(p, 7.43, epsilon = 1e-9);
        assert_abs_diff_eq!(q, 4.6, epsilon = 1e-9);
    }

    #[test]
    fn builtin_meshed_closes_all_ties() {
        let loaded = builtin_case33(Topology::Meshed);
        assert_eq!(loaded.case.closed_branch_count(), 37);
        // meshed = radial + 5 closed switches, same impedances
        let radial = builtin_case33(Topology::Radial);
        for (a, b) in loaded.case.branches.iter().zip(&radial.case.branches) {
            assert_eq!((a.from, a.to, a.r, a.x), (b.from, b.to, b.r, b.x));
            if !a.is_switch {
                assert!(a.closed && b.closed);
            } else {
                assert!(a.closed && !b.closed);
            }
        }
    }

    #[test]
    fn case_roundtrip_through_toml() {
        let loaded = builtin_case33(Topology::Radial);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("case33.toml");
        save_case(&loaded, &path).unwrap();
        let back = load_case(&path).unwrap();
        assert_eq!(back, loaded);
    }

    #[test]
    fn closing_one_switch_changes_count() {
        let loaded = builtin_case33(Topology::Radial);
        // branch 36 is the 25-29 tie
        let sw = loaded
            .case
            .branches
            .iter()
            .position(|b| b.is_switch && b.from.0 == 25 && b.to.0 == 29)
            .unwrap();
        let toggled = loaded.case.toggle_switch(sw, true).unwrap();
        assert_eq!(toggled.closed_branch_count(), 33);
    }

    #[test]
    fn missing_reference_rejected() {
        let mut cf = file_from_case(&builtin_case33(Topology::Radial));
        for b in &mut cf.buses {
            b.is_reference = false;
        }
        let err = case_from_file(cf, "inline").unwrap_err();
        assert!(matches!(err, Error::Validation { ref rule, .. } if rule == "reference"));
    }

    #[test]
    fn rps_without_leader_rejected() {
        let mut cf = file_from_case(&builtin_case33(Topology::Radial));
        cf.control.mode = "rps".into();
        cf.control.leader = None;
        assert!(matches!(case_from_file(cf, "inline"), Err(Error::NoLeader)));
    }

    #[test]
    fn nonpositive_droop_rejected() {
        let mut cf = file_from_case(&builtin_case33(Topology::Radial));
        cf.ders[2].n = 0.0;
        assert!(matches!(
            case_from_file(cf, "inline"),
            Err(Error::Validation { ref rule, .. }) if rule == "droop-coefficient"
        ));
    }

    #[test]
    fn parse_error_carries_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.toml");
        fs::write(&path, "format_version = 1\nname = \"x\"\nbase_mva = !!\n").unwrap();
        match load_case(&path) {
            Err(Error::Parse { detail, .. }) => {
                assert!(detail.contains("line 3"), "no position in: {detail}")
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn result_file_csv_has_both_tables() {
        let loaded = builtin_case33(Topology::Radial);
        let sol = crate::solver::solve_droop(
            &loaded.case,
            &loaded.ders,
            &crate::solver::SolverOptions::default(),
        )
        .unwrap();
        let rf = ResultFile::from_solution(&sol, &loaded.case.name, ControlMode::Droop);
        let csv = rf.to_csv();
        let bus_rows = csv
            .lines()
            .skip_while(|l| !l.starts_with("bus_id"))
            .skip(1)
            .take_while(|l| !l.is_empty())
            .count();
        assert_eq!(bus_rows, 33);
        assert!(csv.contains("from,to,"));
    }
}
