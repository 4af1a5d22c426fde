use aerorom::cnn::{checkpoint, Architecture, CnnModel, Normalization, Target};
use aerorom::dataset::latin_hypercube;
use aerorom::exec::Exec;
use aerorom::geometry::{decode_design, design_bounds, encode_design, loft_design, DesignVector, N_DESIGN};
use aerorom::levelset::{distance_field_brute, distance_field_of, GridSpec};
use aerorom::optimizer::{fd_gradient, sqp_minimize, Evaluation, OptStatus, Problem, SqpOptions};
use proptest::prelude::*;

fn design_from_unit(t: &[f64]) -> DesignVector {
    let (lo, hi) = design_bounds();
    DesignVector::new(
        t.iter()
            .zip(lo.as_slice().iter().zip(hi.as_slice()))
            .map(|(t, (l, h))| l + t * (h - l))
            .collect(),
    )
    .unwrap()
}

fn small_grid() -> GridSpec {
    GridSpec {
        dims: [10, 5, 7],
        lower: [-1.0, 0.0, -0.5],
        upper: [3.0, 2.0, 0.5],
    }
}

struct Projection {
    target: [f64; 2],
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Problem for Projection {
    fn lower(&self) -> &[f64] {
        &self.lower
    }
    fn upper(&self) -> &[f64] {
        &self.upper
    }
    fn n_constraints(&self) -> usize {
        1
    }
    fn evaluate(&self, x: &[f64]) -> aerorom::Result<Evaluation> {
        Ok(Evaluation {
            objective: (x[0] - self.target[0]).powi(2) + (x[1] - self.target[1]).powi(2),
            constraints: vec![x[0] + x[1] - 1.0],
        })
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn design_encode_decode_is_identity(t in prop::collection::vec(0.0f64..=1.0, N_DESIGN)) {
        let u = design_from_unit(&t);
        let (sections, inc) = decode_design(&u).unwrap();
        prop_assert_eq!(encode_design(&sections, inc).unwrap(), u.clone());
        let back = DesignVector::from_json(&u.to_json()).unwrap();
        for (a, b) in back.as_slice().iter().zip(u.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn latin_hypercube_has_one_sample_per_bin(n in 1usize..60, d in 1usize..8, seed in any::<u64>()) {
        let lower = vec![-1.0; d];
        let upper = vec![3.0; d];
        let s = latin_hypercube(n, &lower, &upper, seed).unwrap();
        for j in 0..d {
            let mut seen = vec![false; n];
            for row in &s {
                let b = (((row[j] + 1.0) / 4.0 * n as f64).floor() as usize).min(n - 1);
                prop_assert!(!seen[b]);
                seen[b] = true;
            }
        }
    }

    #[test]
    fn fd_gradient_is_exact_on_quadratics(a in prop::collection::vec(-3.0f64..3.0, 4), x in prop::collection::vec(-1.0f64..1.0, 4)) {
        let lo = [-2.0; 4];
        let hi = [2.0; 4];
        let f = |u: &[f64]| Ok(u.iter().zip(&a).map(|(u, a)| a * u * u + u).sum::<f64>());
        let g = fd_gradient(f, &x, &lo, &hi, 1e-3).unwrap();
        for i in 0..4 {
            prop_assert!((g[i] - (2.0 * a[i] * x[i] + 1.0)).abs() < 1e-8);
        }
    }

    #[test]
    fn sqp_projects_onto_the_half_plane(tx in -3.0f64..3.0, ty in -3.0f64..3.0, sx in -4.0f64..4.0, sy in -4.0f64..4.0) {
        let p = Projection { target: [tx, ty], lower: vec![-5.0; 2], upper: vec![5.0; 2] };
        let r = sqp_minimize(&p, &[sx, sy], &SqpOptions::default(), Exec::Sequential).unwrap();
        prop_assert_eq!(r.status, OptStatus::Converged);
        let excess = (tx + ty - 1.0).max(0.0) / 2.0;
        prop_assert!((r.x_final[0] - (tx - excess)).abs() < 1e-6);
        prop_assert!((r.x_final[1] - (ty - excess)).abs() < 1e-6);
        for h in &r.history {
            prop_assert!(h.x.iter().all(|v| (-5.0..=5.0).contains(v)));
        }
        prop_assert!(r.kkt_residual <= 1e-6);
    }

    #[test]
    fn normalization_round_trips(mean in -1.0f64..1.0, std in 1e-4f64..10.0, y in -5.0f64..5.0) {
        let n = Normalization { mean, std };
        prop_assert!((n.decode(n.encode(y)) - y).abs() < 1e-9 * y.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    #[test]
    fn wing_distance_field_matches_brute_force_and_is_lipschitz(t in prop::collection::vec(0.0f64..=1.0, N_DESIGN)) {
        let wing = loft_design(&design_from_unit(&t)).unwrap();
        let spec = small_grid();
        let fast = distance_field_of(&wing, &spec, Exec::Parallel).unwrap();
        let brute = distance_field_brute(&wing, &spec).unwrap();
        prop_assert_eq!(&fast.phi, &brute.phi);
        let [_, n, p] = spec.dims;
        for a in 0..fast.phi.len() {
            for b in (a + 1..fast.phi.len()).step_by(7) {
                let (ia, ib) = ([a / (n * p), (a / p) % n, a % p], [b / (n * p), (b / p) % n, b % p]);
                let pa = spec.point(ia[0], ia[1], ia[2]);
                let pb = spec.point(ib[0], ib[1], ib[2]);
                let d = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2) + (pa[2] - pb[2]).powi(2)).sqrt();
                prop_assert!((fast.phi[a] - fast.phi[b]).abs() <= d + 1e-12);
            }
        }
    }

    #[test]
    fn checkpoints_round_trip_bit_identically(seed in any::<u64>()) {
        let arch = Architecture { kernels: vec![3, 2], channels: vec![2, 3] };
        let m = CnnModel::new(&arch, [6, 5, 6], Target::Cl, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        checkpoint::save(&path, &m, None).unwrap();
        let (back, _) = checkpoint::load(&path).unwrap();
        prop_assert_eq!(&back, &m);
    }
}
