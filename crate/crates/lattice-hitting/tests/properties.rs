use lattice_hitting::base::BaseSystem;
use lattice_hitting::exactpotential::{gram_from_transition, potential_gram_iid, reconstruct_transition_matrix, QuadratureGrid};
use lattice_hitting::harness::consistency_main_theorem;
use lattice_hitting::lmatrix::{
    bil_from_potential, has_l_spectrum, is_irreducible_potential, potential_from_l, sample_irreducible_bil, SquareMatrix, ZeroSumBasis,
};
use lattice_hitting::montecarlo::{estimate_transition_matrix, SimConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn distinct_sites(max: usize) -> impl Strategy<Value = Vec<i64>> {
    prop::collection::btree_set(-30i64..30, 2..=max).prop_map(|s| s.into_iter().collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampled_bil_matrices_satisfy_lemmas(seed in any::<u64>(), n in 2usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = sample_irreducible_bil(n, &mut rng);
        prop_assert!(has_l_spectrum(r.matrix(), 1e-8));
        let s = potential_from_l(&r).unwrap();
        prop_assert!(is_irreducible_potential(&s, 1e-10));
        let back = bil_from_potential(&s, 1e-10).unwrap();
        prop_assert!(back.matrix().max_abs_diff(r.matrix()) <= 1e-10);
    }

    #[test]
    fn csv_round_trip_is_exact(values in prop::collection::vec(-1e300f64..1e300, 9)) {
        let m = SquareMatrix::new(3, values).unwrap();
        prop_assert_eq!(SquareMatrix::from_csv(&m.to_csv()).unwrap(), m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn reconstructed_matrices_are_bistochastic(sites in distinct_sites(4)) {
        let b = BaseSystem::simple_walk(1);
        let sites: Vec<Vec<i64>> = sites.into_iter().map(|x| vec![x]).collect();
        let basis = ZeroSumBasis::pivot(sites.len());
        let g = potential_gram_iid(&b, &sites, &basis, &QuadratureGrid::default_for(1)).unwrap();
        let p = reconstruct_transition_matrix(&g).unwrap();
        prop_assert!(p.is_bistochastic());
        let m = p.matrix();
        for (r, c) in m.row_sums().iter().zip(m.col_sums()) {
            prop_assert!((r - 1.0).abs() < 1e-9 && (c - 1.0).abs() < 1e-9);
        }
        // Gram table and transition matrix determine each other.
        let back = gram_from_transition(&p, &basis).unwrap();
        prop_assert!(back.max_abs_diff(&g) <= 1e-7 * g.entries.iter().flatten().fold(1.0f64, |a, x| a.max(x.abs())));
        prop_assert!(consistency_main_theorem(&p, &g.potential().unwrap()).unwrap() < 1e-8);
    }

    #[test]
    fn simulation_is_deterministic_across_thread_counts(seed in any::<u64>(), far in 2i64..12) {
        let b = BaseSystem::simple_walk(1);
        let sites = vec![vec![0], vec![far]];
        let one = SimConfig { seed, n_traj: 3000, parallel_batches: 1, ..Default::default() };
        let many = SimConfig { parallel_batches: 4, ..one.clone() };
        let a = estimate_transition_matrix(&b, &sites, &one).unwrap();
        let c = estimate_transition_matrix(&b, &sites, &many).unwrap();
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&c).unwrap());
        for p in 0..2 {
            prop_assert_eq!(a.counts[p].iter().sum::<u64>() + a.censored[p], a.n_traj);
        }
    }
}
