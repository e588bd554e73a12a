use cavks::eigensolver::EigenOptions;
use cavks::hamiltonian::{ExternalPotential, PhotonMode, SpinConfig};
use cavks::photon_xc::XcMethod;
use cavks::realspace::{Grid, UnitSystem};
use cavks::scf_driver::{run_ground_state, Interaction, KsProblem, ScfOptions};
use std::time::Instant;

fn chain_problem(n_c: usize, lam: f64, omega: f64) -> KsProblem {
    let sep: f64 = std::env::var("SEP").ok().and_then(|s| s.parse().ok()).unwrap_or(15.0);
    let bond = 5.78;
    let margin = 15.0;
    let spacing = 0.5;
    let half = (n_c as f64 - 1.0) * sep / 2.0 + margin;
    let n = (2.0 * half / spacing).round() as usize + 1;
    let grid = Grid::new_1d(n, spacing).unwrap();
    let mut centers = Vec::new();
    for c in 0..n_c {
        let cen = (c as f64 - (n_c as f64 - 1.0) / 2.0) * sep;
        centers.push((cen - bond / 2.0, -1.0));
        centers.push((cen + bond / 2.0, -1.0));
    }
    KsProblem {
        grid,
        units: UnitSystem::hartree(),
        stencil_order: 8,
        potential: ExternalPotential::SoftCoulombChain { centers, softening: 1.0 },
        spin: SpinConfig::closed_shell(2 * n_c).unwrap(),
        modes: vec![PhotonMode::new(omega, vec![lam], 8).unwrap()],
        interaction: Interaction::SoftCoulomb1d { softening: 1.0, hartree: true, fock: true },
    }
}

fn main() {
    let method = std::env::args().nth(1).unwrap_or_else(|| "kli".into());
    let omega = 0.0772;
    for n_c in 1..=4usize {
        let problem = chain_problem(n_c, 0.006, omega);
        let t0 = Instant::now();
        let opts = ScfOptions {
            method: if method == "kli" { XcMethod::Kli } else { XcMethod::Oep },
            tol_density: 1e-9,
            tol_s: if method == "kli" { 1e-10 } else { 1e-9 },
            max_outer: if method == "kli" { 1200 } else { 2500 },
            mixing: std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.05),
            c_step: std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(20.0),
            kli_mixing: std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.05),
            kli_init_iters: if method == "oep" { 250 } else { 0 },
            eig: EigenOptions { tol: 1e-10, ..Default::default() },
            ..Default::default()
        };
        match run_ground_state(&problem, &opts) {
            Ok(out) => {
                if std::env::var("TRAJ").is_ok() && n_c == 1 {
                    for r in out.log.iter().skip(20).step_by(12).take(30) {
                        println!("  it={} etot={:.8} smax={:.3e} dn={:.3e}", r.iter, r.e_tot, r.s_max, r.density_change);
                    }
                }
                let npt = cavks::observables::photon_number(&out.shifts, &out.ks, &problem.modes[0], 0);
                let e_tot = cavks::scf_driver::total_energy(&out.ks, &out.xc);
                let last = out.log.last().unwrap();
                println!(
                    "{method} N={n_c}: conv={} it={} e_tot={:.6} npt={:.6e} e_xee={:.5} e_xpt={:.3e} smax={:.2e} wall={:.1}s",
                    out.converged, out.iterations, e_tot, npt, out.xc.e_x_electron,
                    out.xc.e_x_photon[0], last.s_max, t0.elapsed().as_secs_f64()
                );
            }
            Err(e) => println!("{method} N={n_c}: ERROR {e}"),
        }
    }
}
