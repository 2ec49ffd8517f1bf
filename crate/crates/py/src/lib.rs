//! Python bindings: `Case`, `Solution`, `solve`, `solve_droop` and `audit`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mgpf::caseio::{self, OutputFormat, ResultFile, Topology};
use mgpf::controls::{ControlConfig, ControlMode};
use mgpf::error::Error;
use mgpf::netmodel::BusId;
use mgpf::oracle;
use mgpf::solver::{self, PowerFlowSolution, SolverOptions};

fn to_py_err(err: Error) -> PyErr {
    match err {
        Error::Parse { .. } | Error::Validation { .. } | Error::NoLeader | Error::NoDer => {
            PyValueError::new_err(err.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// An immutable microgrid case: network, DER droop parameters and the
/// default control configuration.
#[pyclass(frozen)]
struct Case {
    loaded: caseio::LoadedCase,
}

#[pymethods]
impl Case {
    /// Load a bundled case, e.g. Case.builtin("case33", "meshed").
    #[staticmethod]
    #[pyo3(signature = (name, topology = "radial"))]
    fn builtin(name: &str, topology: &str) -> PyResult<Self> {
        if name != "case33" {
            return Err(PyValueError::new_err(format!("unknown builtin case '{name}'")));
        }
        let topo: Topology = topology.parse().map_err(to_py_err)?;
        Ok(Case { loaded: caseio::builtin_case33(topo) })
    }

    /// Load and validate a TOML case file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Case { loaded: caseio::load_case(path).map_err(to_py_err)? })
    }

    /// Write the case back out as TOML.
    fn save(&self, path: &str) -> PyResult<()> {
        caseio::save_case(&self.loaded, path).map_err(to_py_err)
    }

    /// New case with one switch toggled; the original is unchanged.
    fn toggle_switch(&self, branch_index: usize, closed: bool) -> PyResult<Self> {
        let case = self.loaded.case.toggle_switch(branch_index, closed).map_err(to_py_err)?;
        Ok(Case { loaded: caseio::LoadedCase { case, ..self.loaded.clone() } })
    }

    #[getter]
    fn name(&self) -> String {
        self.loaded.case.name.clone()
    }

    #[getter]
    fn n_buses(&self) -> usize {
        self.loaded.case.n()
    }

    #[getter]
    fn bus_ids(&self) -> Vec<usize> {
        self.loaded.case.buses.iter().map(|b| b.id.0).collect()
    }

    #[getter]
    fn der_buses(&self) -> Vec<usize> {
        self.loaded.ders.iter().map(|d| d.bus.0).collect()
    }

    #[getter]
    fn closed_branch_count(&self) -> usize {
        self.loaded.case.closed_branch_count()
    }

    #[getter]
    fn total_load(&self) -> (f64, f64) {
        self.loaded.case.total_load()
    }

    fn __repr__(&self) -> String {
        format!(
            "Case('{}', {} buses, {} closed branches, {} DERs)",
            self.loaded.case.name,
            self.loaded.case.n(),
            self.loaded.case.closed_branch_count(),
            self.loaded.ders.len()
        )
    }
}

/// A converged (or failed) power-flow result.
#[pyclass(frozen)]
struct Solution {
    sol: PowerFlowSolution,
    case_name: String,
    mode: ControlMode,
}

#[pymethods]
impl Solution {
    #[getter]
    fn converged(&self) -> bool {
        self.sol.converged
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.sol.iterations
    }

    #[getter]
    fn f_hz(&self) -> f64 {
        self.sol.f_hz
    }

    #[getter]
    fn losses(&self) -> f64 {
        self.sol.losses
    }

    #[getter]
    fn max_residual(&self) -> f64 {
        self.sol.max_residual
    }

    #[getter]
    fn residual_history(&self) -> Vec<f64> {
        self.sol.residual_history.clone()
    }

    #[getter]
    fn mode(&self) -> String {
        self.mode.as_str().to_string()
    }

    /// Bus voltage magnitudes, p.u., in case order.
    #[getter]
    fn voltages(&self) -> Vec<f64> {
        self.sol.state.v.clone()
    }

    /// Bus voltage angles, radians, in case order.
    #[getter]
    fn angles(&self) -> Vec<f64> {
        self.sol.state.theta.clone()
    }

    #[getter]
    fn bus_ids(&self) -> Vec<usize> {
        self.sol.bus_ids.iter().map(|b| b.0).collect()
    }

    /// List of (bus, p_pu, q_pu) per DER.
    #[getter]
    fn der_injections(&self) -> Vec<(usize, f64, f64)> {
        self.sol.der_injections.iter().map(|d| (d.bus.0, d.p, d.q)).collect()
    }

    /// Write a result file ("json" or "csv").
    #[pyo3(signature = (path, format = "json"))]
    fn save(&self, path: &str, format: &str) -> PyResult<()> {
        let fmt: OutputFormat = format.parse().map_err(to_py_err)?;
        let rf = ResultFile::from_solution(&self.sol, &self.case_name, self.mode);
        caseio::save_results(&rf, path, fmt).map_err(to_py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Solution(mode='{}', converged={}, iterations={}, f_hz={:.4})",
            self.mode,
            self.sol.converged,
            self.sol.iterations,
            self.sol.f_hz
        )
    }
}

fn solver_options(
    tol_vtheta: Option<f64>,
    tol_f_rho: Option<f64>,
    tol_vd: Option<f64>,
    max_iter: Option<usize>,
) -> SolverOptions {
    let mut opts = SolverOptions::default();
    if let Some(t) = tol_vtheta {
        opts.tol_vtheta = t;
    }
    if let Some(t) = tol_f_rho {
        opts.tol_f_rho = t;
    }
    if let Some(t) = tol_vd {
        opts.tol_vd = t;
    }
    if let Some(m) = max_iter {
        opts.max_iter = m;
    }
    opts
}

/// Full two-stage solve under the requested control mode.
#[pyfunction]
#[pyo3(signature = (case, mode = None, leader = None, tol_vtheta = None, tol_f_rho = None,
                    tol_vd = None, max_iter = None))]
#[allow(clippy::too_many_arguments)]
fn solve(
    case: &Case,
    mode: Option<&str>,
    leader: Option<usize>,
    tol_vtheta: Option<f64>,
    tol_f_rho: Option<f64>,
    tol_vd: Option<f64>,
    max_iter: Option<usize>,
) -> PyResult<Solution> {
    let loaded = &case.loaded;
    let mut cfg: ControlConfig = loaded.control.clone();
    if let Some(m) = mode {
        cfg.mode = m.parse().map_err(to_py_err)?;
    }
    if let Some(l) = leader {
        cfg.leader = Some(BusId(l));
    }
    let opts = solver_options(tol_vtheta, tol_f_rho, tol_vd, max_iter);
    let sol = solver::solve(&loaded.case, &loaded.ders, &cfg, &opts).map_err(to_py_err)?;
    Ok(Solution { sol, case_name: loaded.case.name.clone(), mode: cfg.mode })
}

/// Droop-only power flow from a flat start.
#[pyfunction]
#[pyo3(signature = (case, tol_vtheta = None, tol_f_rho = None, tol_vd = None, max_iter = None))]
fn solve_droop(
    case: &Case,
    tol_vtheta: Option<f64>,
    tol_f_rho: Option<f64>,
    tol_vd: Option<f64>,
    max_iter: Option<usize>,
) -> PyResult<Solution> {
    let loaded = &case.loaded;
    let opts = solver_options(tol_vtheta, tol_f_rho, tol_vd, max_iter);
    let sol = solver::solve_droop(&loaded.case, &loaded.ders, &opts).map_err(to_py_err)?;
    Ok(Solution {
        sol,
        case_name: loaded.case.name.clone(),
        mode: ControlMode::Droop,
    })
}

/// Recheck a solution against the converged-state invariants; returns
/// {check_name: (pass, worst_magnitude)}.
#[pyfunction]
fn audit<'py>(py: Python<'py>, case: &Case, solution: &Solution) -> PyResult<Bound<'py, PyDict>> {
    let loaded = &case.loaded;
    let report = oracle::audit_solution(
        &loaded.case,
        &loaded.ders,
        solution.mode,
        loaded.control.leader,
        &solution.sol,
    );
    let dict = PyDict::new(py);
    for check in &report.checks {
        dict.set_item(&check.name, (check.pass, check.worst))?;
    }
    Ok(dict)
}

#[pymodule]
fn mgpf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Case>()?;
    m.add_class::<Solution>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(solve_droop, m)?)?;
    m.add_function(wrap_pyfunction!(audit, m)?)?;
    Ok(())
}
