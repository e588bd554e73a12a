use cavks::eigensolver::EigenOptions;
use cavks::hamiltonian::{ExternalPotential, PhotonMode, SpinConfig};
use cavks::photon_xc::XcMethod;
use cavks::realspace::{Grid, UnitSystem};
use cavks::scf_driver::{run_ground_state, Interaction, KsProblem, ScfOptions};

fn chain_problem(n_c: usize, sep: f64, lam: f64, omega: f64) -> KsProblem {
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

fn run_one(n_c: usize, sep: f64, omega: f64, method: XcMethod, mix: f64) -> (f64, f64, f64) {
    let problem = chain_problem(n_c, sep, 0.006, omega);
    let opts = ScfOptions {
        method,
        tol_density: 1e-11,
        tol_s: if method == XcMethod::Kli { 5e-10 } else { 5e-8 },
        max_outer: 4000,
        mixing: mix,
        c_step: 5.0,
        kli_mixing: mix,
        kli_init_iters: if method == XcMethod::Oep { 400 } else { 0 },
        eig: EigenOptions { tol: 1e-10, ..Default::default() },
        ..Default::default()
    };
    let out = run_ground_state(&problem, &opts).unwrap();
    let npt = cavks::observables::photon_number(&out.shifts, &out.ks, &problem.modes[0], 0);
    let e = cavks::scf_driver::total_energy(&out.ks, &out.xc);
    let last = out.log.last().unwrap();
    (e, npt, last.s_max)
}

fn main() {
    for (sep, omega, mix) in [(15.0, 0.0325, 0.05), (15.0, 0.02, 0.05), (15.0, 0.06, 0.05), (12.0, 0.0325, 0.03)] {
        for n_c in [1usize, 2] {
            let (ek, nk, sk) = run_one(n_c, sep, omega, XcMethod::Kli, mix);
            let (eo, no, so) = run_one(n_c, sep, omega, XcMethod::Oep, mix);
            println!(
                "sep={sep} w={omega} N={n_c}: KLI npt={nk:.7e} (s={sk:.1e})  OEP npt={no:.7e} (s={so:.1e})  KLI>=OEP: {}  dE={:+.2e}",
                nk >= no, ek - eo
            );
        }
    }
}
