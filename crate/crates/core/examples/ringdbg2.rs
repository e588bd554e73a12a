use cavks::hamiltonian::{ExternalPotential, PhotonMode, SpinConfig};
use cavks::photon_xc::{build_shifts, kli_solve};
use cavks::realspace::{Grid, UnitSystem};
use cavks::scf_driver::{initial_state, Interaction, KsProblem, ScfOptions};

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
    let opts = ScfOptions::default();
    let ks = initial_state(&problem, &opts).unwrap();
    println!("orb finite: {}", ks.orbitals[0].values().iter().all(|v| v.is_finite()));
    println!("e0 = {:.6}, eig tol {:.1e}", ks.energies[0], opts.eig.tol);
    let shifts = build_shifts(&ks, &problem.modes, &opts, None).unwrap();
    println!("phi1 finite: {}, norm2={:.6e}", shifts.phi1[0][0].values().iter().all(|v| v.is_finite()), shifts.phi1[0][0].inner(&shifts.phi1[0][0]).unwrap());
    let vx = kli_solve(&ks, &problem.modes, &shifts, None, false).unwrap();
    println!("vx finite: {} max {:.3e}", vx.values().iter().all(|v| v.is_finite()), vx.max_abs());
}
