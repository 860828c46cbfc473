//! Randomised invariants of the geometry, phantom, estimator and stats layers.

use nalgebra::Rotation3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qspace::calibration::{NullCalibration, NullModel, NullSpec};
use qspace::estimator::SphericalInterpolator;
use qspace::geometry::{beta_point, build_grid, perp_point, random_rotation, rotate_frame, Direction, Frame};
use qspace::harness::{parse_fraction, ExperimentConfig};
use qspace::phantom::{dawson, electrostatic_scheme, PaperModel};
use qspace::stats::{asymmetry_profile, gfa, summaries, tau, tau_tilde, AnalysisParams, Statistic};

fn frame(seed: u64) -> Frame {
    Frame::from_rotation(&random_rotation(&mut ChaCha8Rng::seed_from_u64(seed)))
}

fn direction() -> impl Strategy<Value = Direction> {
    (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
        .prop_filter("away from the origin", |(x, y, z)| x * x + y * y + z * z > 1e-2)
        .prop_map(|(x, y, z)| Direction::new(x, y, z).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn beta_points_lie_on_the_dominant_circle(seed in any::<u64>(), beta in -2.0f64..2.0) {
        let f = frame(seed);
        let p = beta_point(beta, &f).unwrap();
        prop_assert!((p.vector().norm() - 1.0).abs() < 1e-10);
        prop_assert!(p.dot(f.u1()).abs() < 1e-10);
    }

    #[test]
    fn perp_points_are_unit(seed in any::<u64>(), alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let p = perp_point(alpha, beta, &frame(seed)).unwrap();
        prop_assert!((p.vector().norm() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn grid_is_rotation_equivariant(seed in any::<u64>(), rot in any::<u64>()) {
        let f = frame(seed);
        let r = random_rotation(&mut ChaCha8Rng::seed_from_u64(rot));
        let g = build_grid(&f, 16).unwrap();
        let h = build_grid(&rotate_frame(&f, r.matrix()).unwrap(), 16).unwrap();
        for (a, b) in g.perp_points().iter().zip(h.perp_points()) {
            prop_assert!((a.rotated(&r).vector() - b.vector()).norm() < 1e-10);
        }
    }

    #[test]
    fn models_are_antipodal_and_equivariant(q in direction(), rot in any::<u64>(), which in 0usize..6) {
        let m = PaperModel::ALL[which].model();
        let r = random_rotation(&mut ChaCha8Rng::seed_from_u64(rot));
        prop_assert!((m.eval(&q) - m.eval(&q.antipode())).abs() < 1e-12);
        prop_assert!((m.rotated(&r).eval(&q.rotated(&r)) - m.eval(&q)).abs() < 1e-12);
    }

    #[test]
    fn interpolant_stays_within_its_nodes(values in prop::collection::vec(0.01f64..1.0, 30), q in direction()) {
        let scheme = electrostatic_scheme(30).unwrap();
        let dirs = scheme.directions();
        let mut points = Vec::new();
        let mut vals = Vec::new();
        for (d, v) in dirs.iter().zip(&values) {
            points.extend([*d.vector(), *d.antipode().vector()]);
            vals.extend([*v, *v]);
        }
        let interp = SphericalInterpolator::new(points, vals).unwrap();
        let lo = values.iter().cloned().fold(f64::MAX, f64::min);
        let hi = values.iter().cloned().fold(f64::MIN, f64::max);
        let v = interp.eval(&q);
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        prop_assert!((v - interp.eval(&q.antipode())).abs() < 1e-12);
        for (d, want) in dirs.iter().zip(&values) {
            prop_assert!((interp.eval(d) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn power_of_two_scaling_leaves_ratios_unchanged(
        values in prop::collection::vec(0.05f64..1.0, 16 + 16 * 16),
        e in -6i32..6,
    ) {
        let mut g = build_grid(&Frame::canonical(), 16).unwrap();
        g.set_values(values[..16].to_vec(), values[16..].to_vec()).unwrap();
        let before = (tau(&g), tau_tilde(&g), asymmetry_profile(&g), summaries(&g).gfa);
        let s = 2f64.powi(e);
        g.set_values(values[..16].iter().map(|v| v * s).collect(), values[16..].iter().map(|v| v * s).collect()).unwrap();
        let after = (tau(&g), tau_tilde(&g), asymmetry_profile(&g), summaries(&g).gfa);
        prop_assert_eq!(before, after);
    }

    #[test]
    fn quarter_turn_symmetry_gives_zero_asymmetry(values in prop::collection::vec(0.05f64..1.0, 4 * 16)) {
        let n = 16;
        let mut g = build_grid(&Frame::canonical(), n).unwrap();
        // perp value depends on j only through j mod N/4.
        let perp: Vec<f64> = (0..n * n).map(|i| values[(i / n) % 4 * n + i % n]).collect();
        g.set_values(vec![0.5; n], perp).unwrap();
        for p in asymmetry_profile(&g).unwrap() {
            prop_assert_eq!(p, 0.0);
        }
    }

    #[test]
    fn gfa_is_a_fraction(values in prop::collection::vec(0.0f64..10.0, 2..50)) {
        if let Some(g) = gfa(&values) {
            prop_assert!((0.0..=1.0).contains(&g));
        }
    }

    #[test]
    fn dawson_is_odd(x in -10.0f64..10.0) {
        prop_assert_eq!(dawson(-x), -dawson(x));
    }

    #[test]
    fn fractions_parse(num in 1u32..100, den in 1u32..100) {
        let v = parse_fraction(&format!("{num}/{den}")).unwrap();
        prop_assert!((v - num as f64 / den as f64).abs() < 1e-15);
    }

    #[test]
    fn config_text_round_trips(reps in 1usize..5000, seed in any::<u64>(), rho in 0.5f64..5.0) {
        let mut cfg = ExperimentConfig::default();
        cfg.set("reps", &reps.to_string()).unwrap();
        cfg.set("seed", &seed.to_string()).unwrap();
        cfg.set("rho", &rho.to_string()).unwrap();
        let back = ExperimentConfig::parse(&cfg.canonical_text(), "round trip").unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn calibration_quantiles_are_monotone(samples in prop::collection::vec(-5.0f64..5.0, 1000)) {
        let spec = NullSpec {
            model: NullModel::Prolate,
            noise_sigma: 0.05,
            scheme: electrostatic_scheme(12).unwrap(),
            params: AnalysisParams::default(),
            rotation: Rotation3::identity(),
        };
        let table = NullCalibration::from_samples(Statistic::V, &spec, &samples, 7).unwrap();
        let mut last = f64::MIN;
        for i in 1..100 {
            let q = table.quantile(i as f64 / 100.0);
            prop_assert!(q >= last);
            last = q;
        }
    }
}
