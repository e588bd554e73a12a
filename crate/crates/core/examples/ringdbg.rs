use cavks::eigensolver::EigenOptions;
use cavks::hamiltonian::{ExternalPotential, PhotonMode, SpinConfig};
use cavks::photon_xc::XcMethod;
use cavks::realspace::{Grid, UnitSystem};
use cavks::scf_driver::{run_ground_state, Interaction, KsProblem, ScfOptions};
use cavks::sternheimer::SternheimerOptions;
use std::time::Instant;

fn main() {
    let n = 63;
    let dx = 0.7052 * 127.0 / 63.0;
    let grid = Grid::new_2d(n, n, dx, dx).unwrap();
    let problem = KsProblem {
        grid,
        units: UnitSystem::mev_nm(0.067).unwrap(),
        stencil_order: 8,
        potential: ExternalPotential::QuantumRing { homega0: 10.0, v0: 200.0, d: 10.0 },
        spin: SpinConfig::single_electron(),
        modes: vec![PhotonMode::new(1.41, vec![0.0034, 0.0034], 10).unwrap()],
        interaction: Interaction::None,
    };
    let c: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5.0);
    let st_tol: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1e-9);
    let t0 = Instant::now();
    let opts = ScfOptions {
        method: XcMethod::Oep,
        tol_density: 1e-9,
        tol_s: 4e-8,
        max_outer: 400,
        c_step: c,
        kli_init_iters: std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(25),
        eig: EigenOptions { tol: 1e-10, ..Default::default() },
        sternheimer: SternheimerOptions { tol: st_tol, ..Default::default() },
        ..Default::default()
    };
    match run_ground_state(&problem, &opts) {
        Ok(out) => {
            let npt = cavks::observables::photon_number(&out.shifts, &out.ks, &problem.modes[0], 0);
            let e_tot = cavks::scf_driver::total_energy(&out.ks, &out.xc);
            println!(
                "c={c} st={st_tol:.0e}: conv={} iters={} e_tot={:.6} npt={:.7e} wall={:.1}s",
                out.converged, out.iterations, e_tot, npt, t0.elapsed().as_secs_f64()
            );
            for r in out.log.iter().filter(|r| r.iter % 60 == 0 || r.iter + 1 == out.iterations) {
                println!("  it={} smax={:.3e} dn={:.3e} etot={:.7}", r.iter, r.s_max, r.density_change, r.e_tot);
            }
        }
        Err(e) => println!("c={c}: ERROR {e}"),
    }
}
