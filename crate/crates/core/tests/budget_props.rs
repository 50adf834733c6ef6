use cavity_array::budget::*;
use proptest::prelude::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

proptest! {
    #[test]
    fn finesse_roundtrip(f in 5.0f64..500.0) {
        let back = finesse_from_loss(loss_from_finesse(f).unwrap()).unwrap();
        prop_assert!(close(back, f, 1e-12 * f), "{} vs {}", back, f);
    }

    #[test]
    fn outcoupling_monotone(pm in 0.01f64..0.98, pi in 0.01f64..0.98, d in 0.001f64..0.01) {
        let l = outcoupling_fraction(pm, pi).unwrap();
        prop_assert!(l > 0.0 && l <= 1.0);
        prop_assert!(outcoupling_fraction(pm + d, pi).unwrap() > l);
        prop_assert!(outcoupling_fraction(pm, pi + d).unwrap() < l);
    }

    #[test]
    fn quarter_loss_identity(rho0 in 0.0f64..0.99) {
        let p = quarter_trip_loss(rho0).unwrap();
        prop_assert!((0.0..1.0).contains(&p));
        prop_assert!(close((1.0 - p).powi(4), 1.0 - rho0, 1e-12));
    }

    #[test]
    fn internal_total_inverse(rho0 in 0.0f64..0.9, r in 0.5f64..1.0, passes in 1u32..4) {
        let rho = total_loss(rho0, r, passes).unwrap();
        prop_assert!(close(internal_loss(rho, r, passes).unwrap(), rho0, 1e-12));
    }

    #[test]
    fn chain_total_in_unit_interval(
        rho0 in 0.01f64..0.8,
        r in 0.5f64..0.999,
        w in 0.5f64..20.0,
        kappa in 0.1f64..1.0,
        eff in proptest::collection::vec(0.05f64..1.0, 0..5),
        thermal in any::<bool>(),
        order in any::<bool>(),
    ) {
        let chain = CollectionChain {
            internal_loss: rho0,
            outcoupler_reflectivity: r,
            outcoupler_passes: 2,
            waist_um: w,
            wavelength_nm: 780.0,
            thermal: thermal.then_some(ThermalModel { temperature_uk: 25.0, trap_frequency_khz: 280.0, mass_kg: RB87_MASS_KG }),
            polarization: kappa,
            correction_order: if order { CorrectionOrder::ThermalOnCollection } else { CorrectionOrder::ThermalOnCooperativity },
            stages: eff.iter().enumerate().map(|(i, &e)| Stage::new(&format!("s{i}"), e)).collect(),
        };
        let b = chain.evaluate().unwrap();
        prop_assert!(b.total > 0.0 && b.total <= 1.0);
        prop_assert!(close(internal_loss(b.total_loss, r, 2).unwrap(), rho0, 1e-12));
        prop_assert_eq!(b.cooperativity, cooperativity(b.finesse, w * 1e-6, 780e-9));
    }

    #[test]
    fn thermal_factor_decreasing(t in 0.0f64..100.0, dt in 0.1f64..10.0) {
        let a = thermal_axial_factor(t * 1e-6, 280e3, 780e-9, RB87_MASS_KG);
        let b = thermal_axial_factor((t + dt) * 1e-6, 280e3, 780e-9, RB87_MASS_KG);
        prop_assert!(a > 0.0 && a <= 1.0);
        prop_assert!(b < a);
    }
}

#[test]
fn montecarlo_agrees_on_grid() {
    let values = [0.05, 0.2, 0.4, 0.6, 0.85];
    for (i, &pm) in values.iter().enumerate() {
        for (j, &pi) in values.iter().enumerate() {
            let mc = montecarlo_outcoupling(pm, pi, 100_000, (i * 5 + j) as u64).unwrap();
            let exact = outcoupling_fraction(pm, pi).unwrap();
            let sigma = (exact * (1.0 - exact) / 100_000.0).sqrt();
            assert!((mc.estimate - exact).abs() < 3.0 * sigma.max(1e-9), "{pm} {pi}: {mc:?} vs {exact}");
        }
    }
}
