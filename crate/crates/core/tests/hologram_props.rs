use cavity_array::hologram::{
    simulate_farfield, spot_report, square_array, synthesize_phase_mask, wgs_homogenize, FarField, HologramSpec, Target,
};
use proptest::prelude::*;
use std::f64::consts::PI;

fn small_spec(targets: Vec<Target>) -> HologramSpec {
    let mut spec = HologramSpec::new(targets);
    spec.pixels = (128, 128);
    spec.pitch_um = 60.0;
    spec
}

/// Local maxima above `fraction` of the global maximum, separated by at least `radius` pixels.
fn bright_peaks(far: &FarField, fraction: f64, radius: usize) -> usize {
    let max = far.intensity.iter().cloned().fold(0.0, f64::max);
    let (nx, ny) = (far.nx, far.ny);
    let mut count = 0;
    for y in 0..ny {
        for x in 0..nx {
            let v = far.intensity[y * nx + x];
            if v < fraction * max {
                continue;
            }
            let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(nx - 1));
            let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(ny - 1));
            let is_peak = (y0..=y1).all(|j| (x0..=x1).all(|i| far.intensity[j * nx + i] <= v || (i, j) == (x, y)));
            if is_peak {
                count += 1;
            }
        }
    }
    count
}

fn separated(targets: &[(f64, f64)], min: f64) -> bool {
    targets
        .iter()
        .enumerate()
        .all(|(i, a)| targets[i + 1..].iter().all(|b| (a.0 - b.0).hypot(a.1 - b.1) > min))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mask_phases_lie_in_half_open_interval(
        targets in proptest::collection::vec((-15.0f64..15.0, -15.0f64..15.0, 0.2f64..1.0, -PI..PI), 1..6),
    ) {
        let t = targets.iter().map(|&(x, y, amplitude, phase)| Target { amplitude, phase, ..Target::at(x, y) }).collect();
        let mask = synthesize_phase_mask(&small_spec(t)).unwrap();
        prop_assert!(mask.phase.iter().all(|p| (-PI..PI).contains(p)));
    }

    #[test]
    fn far_field_has_one_spot_per_target(
        targets in proptest::collection::vec((-12.0f64..12.0, -12.0f64..12.0), 1..5),
    ) {
        let spec = small_spec(targets.iter().map(|&(x, y)| Target::at(x, y)).collect());
        let width_um = spec.spot_waist_um();
        prop_assume!(separated(&targets, 3.0 * 2.0 * width_um));
        let mask = synthesize_phase_mask(&spec).unwrap();
        let far = simulate_farfield(&mask, &spec.input_intensity(), spec.padding).unwrap();
        let radius = (width_um / spec.atom_pixel_um().0).ceil() as usize + 1;
        prop_assert_eq!(bright_peaks(&far, 0.3, radius), targets.len());
    }
}

#[test]
fn wgs_balances_five_by_five_array() {
    let spec = HologramSpec::new(square_array(5, 5.0));
    let wgs = wgs_homogenize(&spec, 30).unwrap();
    let far = simulate_farfield(&wgs.mask, &spec.input_intensity(), spec.padding).unwrap();
    let powers: Vec<f64> = spot_report(&spec, &far).iter().map(|s| s.power).collect();
    let max = powers.iter().cloned().fold(f64::MIN, f64::max);
    let min = powers.iter().cloned().fold(f64::MAX, f64::min);
    assert!(max / min < 1.05, "{}", max / min);
}
