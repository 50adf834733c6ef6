use cavity_array::optics::OpticalSystem;
use cavity_array::paraxial::{eigen_mode, prescription_matrix, round_trip_matrix, surface_matrix, Abcd, ReferencePlane};
use cavity_array::prescription::reference_prescription;
use num_complex::Complex64;
use proptest::prelude::*;

fn two_mirror(l: f64, r1: f64, r2: f64) -> Abcd<f64> {
    let p = Abcd::propagation(l);
    Abcd::mirror(r1) * p * Abcd::mirror(r2) * p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composed_matrices_are_unimodular(
        parts in proptest::collection::vec((0u8..3, 1e-3f64..1.0), 1..12),
    ) {
        let m = parts.iter().fold(Abcd::identity(), |acc, &(kind, v)| {
            let e = match kind {
                0 => Abcd::propagation(v),
                1 => Abcd::thin_lens(v),
                _ => Abcd::mirror(-v),
            };
            e * acc
        });
        let scale = m.entries().iter().fold(1.0f64, |s, x| s.max(x.abs()));
        prop_assert!((m.det() - 1.0).abs() <= 1e-12 * scale * scale, "{}", m.det());
    }

    #[test]
    fn displaced_reference_cavity_is_unimodular(dz in -0.05f64..0.05, which in 0usize..4) {
        let base = reference_prescription();
        let name = ["asphere", "spherical", "mla", "window"][which];
        let p = base.with_displacement(base.element_index(name).unwrap(), dz).unwrap();
        let at_atoms = prescription_matrix(&p).unwrap();
        let scale = (at_atoms.a * at_atoms.d).abs() + (at_atoms.b * at_atoms.c).abs();
        prop_assert!((at_atoms.det() - 1.0).abs() <= 1e-12 * scale, "det {} with |AD| + |BC| = {scale}", at_atoms.det());

        let sys = OpticalSystem::<f64>::from_prescription(&p).unwrap();
        let l = sys.total_length;
        let mut partial = Abcd::identity();
        let mut z = sys.launch_z;
        let mut peak: f64 = 1.0;
        for step in &sys.path {
            let s = &sys.surfaces[step.surface];
            partial = surface_matrix(s, step.forward) * Abcd::propagation((s.z - z).abs()) * partial;
            z = s.z;
            peak = peak.max([partial.a, partial.b / l, partial.c * l, partial.d].iter().fold(0.0f64, |m, v| m.max(v.abs())).powi(2));
        }
        let at_launch = round_trip_matrix(&sys, ReferencePlane::Launch).unwrap();
        let bound = f64::EPSILON * sys.path.len() as f64 * peak;
        prop_assert!((at_launch.det() - 1.0).abs() <= bound, "det {} vs rounding bound {bound}", at_launch.det());
    }

    #[test]
    fn eigen_mode_is_fixed_point(l in 0.01f64..1.0, g1 in 0.05f64..0.95, g2 in 0.05f64..0.95, wl in 4e-7f64..1.1e-6) {
        let (r1, r2) = (l / (1.0 - g1), l / (1.0 - g2));
        let m = two_mirror(l, r1, r2);
        let mode = eigen_mode(&m, wl).unwrap();
        let q: Complex64 = mode.q;
        let back = m.apply_q(q);
        prop_assert!((back - q).norm() <= 1e-12 * q.norm(), "{back} vs {q}");
    }
}
