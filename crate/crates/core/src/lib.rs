//! Power-flow solver for islanded microgrids under hierarchical control.
//!
//! Frequency is a solution variable: no slack bus exists, and DER buses
//! inject power according to droop laws plus one of three secondary control
//! modes (reactive power sharing, voltage regulation, smart tuning). The
//! solver is an augmented Newton iteration over [theta, V, f] that works on
//! radial and meshed topologies alike, bootstrapped from a droop-only run.
//!
//! Quick start:
//!
//! ```
//! use mgpf::caseio::{builtin_case33, Topology};
//! use mgpf::solver::{solve, SolverOptions};
//!
//! let loaded = builtin_case33(Topology::Radial);
//! let sol = solve(&loaded.case, &loaded.ders, &loaded.control, &SolverOptions::default())
//!     .expect("droop power flow converges");
//! assert!(sol.converged);
//! ```

pub mod caseio;
pub mod cli;
pub mod controls;
pub mod error;
pub mod netmodel;
pub mod oracle;
pub mod solver;

pub use error::{Error, Result};
