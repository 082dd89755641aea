use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn cloud_strategy(min: usize, max: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec(prop::array::uniform3(-1.0f32..1.0), min..=max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chamfer_is_symmetric_and_nonnegative(p in cloud_strategy(1, 40), g in cloud_strategy(1, 40)) {
        for f in [chamfer_l1::<f32>, chamfer_l2::<f32>] {
            let a = f(&p, &g).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - f(&g, &p).unwrap()).abs() <= 1e-12 * (1.0 + a));
        }
    }

    #[test]
    fn chamfer_ignores_point_order(p in cloud_strategy(2, 40), g in cloud_strategy(2, 40), k in 1usize..39) {
        let mut q = p.clone();
        q.rotate_left(k % p.len());
        prop_assert_eq!(chamfer_l1(&p, &g).unwrap(), chamfer_l1(&q, &g).unwrap());
        prop_assert_eq!(chamfer_l2(&p, &g).unwrap(), chamfer_l2(&q, &g).unwrap());
    }

    #[test]
    fn f_score_is_a_fraction(p in cloud_strategy(1, 30), g in cloud_strategy(1, 30), tau in 1e-3f64..2.0) {
        let f = f_score(&p, &g, tau).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(f_score(&g, &g, tau).unwrap(), 1.0);
    }

    #[test]
    fn fps_returns_distinct_indices(pts in cloud_strategy(1, 60), frac in 0.0f64..=1.0, s in any::<u64>()) {
        let cloud = PointCloud::new(pts, None).unwrap();
        let n_s = ((frac * cloud.len() as f64) as usize).max(1);
        let mut idx = fps(&cloud, n_s, FpsStart::Seeded(s)).unwrap();
        prop_assert_eq!(idx.len(), n_s);
        idx.sort_unstable();
        idx.dedup();
        prop_assert_eq!(idx.len(), n_s);
        prop_assert!(idx.iter().all(|&i| i < cloud.len()));
    }

    #[test]
    fn groups_reassemble_their_source(pts in cloud_strategy(8, 60), n_s in 1usize..8, k in 1usize..8) {
        let cloud = PointCloud::new(pts, None).unwrap();
        let ps = group(&cloud, n_s, k, FpsStart::FirstIndex).unwrap();
        prop_assert_eq!(ps.n_groups(), n_s);
        for i in 0..n_s {
            let abs = ps.absolute(i);
            prop_assert_eq!(abs.len(), k);
            for (j, p) in abs.iter().enumerate() {
                let src = cloud.points()[ps.neighbor_indices[i * k + j]];
                for c in 0..3 {
                    prop_assert!((p[c] - src[c]).abs() <= 1e-5);
                }
            }
        }
    }

    #[test]
    fn rotation_preserves_pairwise_distances(pts in cloud_strategy(2, 30), s in any::<u64>(), z in any::<bool>()) {
        let cloud = PointCloud::new(pts, None).unwrap();
        let kind = if z { Rotation::ZAxis } else { Rotation::Full };
        let out = augment(&cloud, &mut ChaCha8Rng::seed_from_u64(s), Augmentation::Rotate(kind));
        let (a, b) = (cloud.points(), out.points());
        for i in 0..a.len() {
            for j in 0..i {
                let d0 = cloud::dist(&a[i], &a[j]);
                let d1 = cloud::dist(&b[i], &b[j]);
                prop_assert!((d0 - d1).abs() <= 1e-5);
            }
        }
    }
}
