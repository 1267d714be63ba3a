use rcm_core::density::DensityGrid;
use rcm_core::ensemble::{mix_a, Ensemble};
use rcm_core::maps::CircleMap;
use rcm_core::trajectory::{occupation_histogram, one_step_histogram};
use rcm_core::transfer::{compute_stationary, stationary_residual, OperatorSet};

const N: usize = 1024;

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

#[test]
fn stationary_density_matches_long_run_occupation() {
    let e = mix_a();
    let ops = OperatorSet::new(&e, N).unwrap();
    let st = compute_stationary(&e, &ops, 1e-10, 20000).unwrap();
    assert!(st.residual <= 1e-10, "{}", st.residual);
    assert!(stationary_residual(&ops, &st.phi).unwrap() <= 1e-9);
    assert!((st.phi.mass() - 1.0).abs() < 1e-12);
    assert!(st.inf_phi >= st.moment_lower_bound);
    let rep = occupation_histogram(&e, &st.phi, 2_000_000, 16, 200, 3).unwrap();
    assert!(rep.within(4.5), "max z {}", rep.max_abs_z);
}

#[test]
fn one_step_law_is_the_annealed_pushforward() {
    let e = Ensemble::finite(vec![
        (0.5, CircleMap::diffeo(0.5, 0.0).unwrap()),
        (0.5, CircleMap::linear(3, 0.1).unwrap()),
    ])
    .unwrap();
    let ops = OperatorSet::new(&e, N).unwrap();
    let psi = DensityGrid::from_fn(N, |x| 1.0 + 0.5 * (2.0 * std::f64::consts::PI * x).sin())
        .unwrap()
        .normalized()
        .unwrap();
    let target = DensityGrid::new(ops.annealed(psi.values())).unwrap();
    let rep = one_step_histogram(&e, &psi, &target, 400_000, 32, 100, 9).unwrap();
    assert!(rep.within(4.5), "max z {}", rep.max_abs_z);
}

#[test]
fn monte_carlo_is_independent_of_thread_count() {
    let e = mix_a();
    let psi = DensityGrid::uniform(N).unwrap();
    let run = || one_step_histogram(&e, &psi, &psi, 50_000, 16, 37, 4).unwrap();
    let one = in_pool(1, run);
    let many = in_pool(4, run);
    assert_eq!(one, many);
}
