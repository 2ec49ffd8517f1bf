use mgpf::caseio::{builtin_case33, Topology};
use mgpf::controls::*;
use mgpf::solver::*;
use mgpf::netmodel::BusId;
use std::time::Instant;

fn main() {
    let loaded = builtin_case33(Topology::Radial);
    let tight = SolverOptions { tol_vtheta: 1e-9, tol_f_rho: 1e-7, tol_vd: 1e-8, max_iter: 30000, ..Default::default() };
    let mut base: Option<Vec<f64>> = None;
    for zd in [1e-4, 1e-3, 1e-2, 1e-1] {
        let cfg = ControlConfig { mode: ControlMode::VoltageRegulation, leader: Some(BusId(1)), z_d: zd };
        let t0 = Instant::now();
        match solve(&loaded.case, &loaded.ders, &cfg, &tight) {
            Ok(sol) => {
                let dev = match &base {
                    None => { base = Some(sol.state.v.clone()); 0.0 }
                    Some(b) => sol.state.v.iter().zip(b).map(|(a,b)|(a-b).abs()).fold(0.0,f64::max),
                };
                println!("zd={zd:.0e}: it={} res={:.1e} dev={:.2e} t={:.2}s", sol.iterations, sol.max_residual, dev, t0.elapsed().as_secs_f64());
            }
            Err(mgpf::Error::NotConverged(sol)) => println!("zd={zd:.0e}: NOT CONVERGED {} res={:.2e}", sol.iterations, sol.residual_history.last().unwrap()),
            Err(e) => println!("zd={zd:.0e}: {e}"),
        }
    }
}
