use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::{check_gradients, Graph, ParamStore, Tensor};
use crate::backbone::{Pass, PromptKind, StackConfig};
use crate::data::{make_batch, BatchSpec, PatchBatch};
use crate::dvae::{DvaeConfig, DvaeModel, TuningMode};
use crate::geometry::{gen_shape, PointCloud, ShapeKind};

const N_S: usize = 8;
const K: usize = 8;

fn teacher() -> (DvaeModel, ParamStore) {
    let cfg = DvaeConfig {
        stack: StackConfig::new(16, 2, 2),
        tuning: TuningMode::Prompt,
        prompt_kind: PromptKind::Deep,
        prompt_count: 2,
        vocab: 16,
        grid: 2,
        decoder_hidden: 8,
        edge_k: 3,
        n_groups: N_S,
        group_size: K,
        ..DvaeConfig::default()
    };
    let mut store = ParamStore::new();
    let m = DvaeModel::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(100)).unwrap();
    m.freeze_all(&mut store).unwrap();
    (m, store)
}

fn student(objective: Objective, teacher_width: usize, seed: u64) -> (Student, ParamStore) {
    let cfg = StudentConfig {
        encoder: StackConfig { drop_path: 0.1, ..StackConfig::new(12, 2, 2) },
        decoder_depth: 1,
        n_groups: N_S,
        group_size: K,
        teacher_width,
        vocab: 16,
        objective,
        ..StudentConfig::default()
    };
    let mut store = ParamStore::new();
    let s = Student::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (s, store)
}

fn clouds(n: usize, seed: u64) -> Vec<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| gen_shape(ShapeKind::ALL[i % 8], 48, &mut rng).unwrap()).collect()
}

fn batch(n: usize, seed: u64) -> PatchBatch {
    let cs = clouds(n, seed);
    let refs: Vec<_> = cs.iter().collect();
    make_batch(&refs, &BatchSpec::eval(N_S, K), seed).unwrap()
}

fn masks(pb: &PatchBatch, ratio: f64, seed: u64) -> Vec<MaskSpec> {
    MaskConfig { strategy: MaskStrategy::Random, ratio }
        .draw(&pb.centroids(), &mut ChaCha8Rng::seed_from_u64(seed))
        .unwrap()
}

#[test]
fn mask_edge_ratios() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for strategy in [MaskStrategy::Random, MaskStrategy::Block] {
        let c = vec![[0.0f32; 3]; 5];
        assert_eq!(gen_mask(5, strategy, 0.0, Some(&c), &mut rng).unwrap().count(), 0);
        assert_eq!(gen_mask(5, strategy, 1.0, Some(&c), &mut rng).unwrap().count(), 5);
    }
    assert!(matches!(gen_mask(4, MaskStrategy::Block, 0.5, None, &mut rng), Err(crate::Error::Argument(_))));
    assert!(gen_mask(4, MaskStrategy::Random, 1.5, None, &mut rng).is_err());
}

#[test]
fn block_mask_on_a_line() {
    let c: Vec<[f32; 3]> = (0..4).map(|i| [i as f32, 0.0, 0.0]).collect();
    assert_eq!(&nearest_to(&c, 0)[..2], &[0, 1]);
    assert_eq!(&nearest_to(&c, 3)[..2], &[3, 2]);
    // 1 and 3 tie around anchor 2
    assert_eq!(&nearest_to(&c, 2)[..2], &[2, 1]);
    let allowed = [vec![true, true, false, false], vec![false, true, true, false], vec![false, false, true, true]];
    for seed in 0..20 {
        let m = gen_mask(4, MaskStrategy::Block, 0.5, Some(&c), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert!(allowed.contains(&m.mask), "{:?}", m.mask);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn mask_counts_are_exact(n_s in 1usize..=128, r in 0usize..5, seed in any::<u64>(), block in any::<bool>()) {
        let ratio = [0.0, 0.25, 0.6, 0.75, 1.0][r];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c: Vec<[f32; 3]> = (0..n_s).map(|i| [(i as f32 * 0.37).sin(), (i as f32).cos(), 0.0]).collect();
        let strategy = if block { MaskStrategy::Block } else { MaskStrategy::Random };
        let m = gen_mask(n_s, strategy, ratio, Some(&c), &mut rng).unwrap();
        prop_assert_eq!(m.count(), (ratio * n_s as f64).round() as usize);
    }
}

#[test]
fn corrupt_places_rows() {
    let mut g = Graph::<f64>::new();
    let mk = |bits: &[bool]| MaskSpec { mask: bits.to_vec(), strategy: MaskStrategy::Random, ratio: 0.5 };
    let vis = g.constant(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let mt = g.constant(Tensor::new([1, 2], vec![9.0, 9.0]).unwrap());
    let pos = g.constant(Tensor::new([4, 2], vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]).unwrap());
    let ms = [mk(&[true, false]), mk(&[false, true])];
    let z = corrupt(&mut g, Some(vis), &ms, mt, pos).unwrap();
    assert_eq!(g.value(z).data(), &[9.0, 9.1, 1.2, 2.3, 3.4, 4.5, 9.6, 9.7]);

    let all = [mk(&[true, true]), mk(&[true, true])];
    let z = corrupt(&mut g, None, &all, mt, pos).unwrap();
    for r in 0..4 {
        assert_eq!(g.value(z).row(r), &[9.0 + g.value(pos).row(r)[0], 9.0 + g.value(pos).row(r)[1]]);
    }
    let vis4 = g.constant(Tensor::new([4, 2], vec![1.0; 8]).unwrap());
    let none = [mk(&[false, false]), mk(&[false, false])];
    let z = corrupt(&mut g, Some(vis4), &none, mt, pos).unwrap();
    assert!(g.value(z).data().iter().all(|&v| v < 2.0));
    assert!(corrupt(&mut g, Some(vis), &all, mt, pos).is_err());
}

#[test]
fn corrupt_gradients_match_finite_differences() {
    let mk = |bits: &[bool]| MaskSpec { mask: bits.to_vec(), strategy: MaskStrategy::Random, ratio: 0.5 };
    let ms = [mk(&[true, false, true]), mk(&[false, true, true])];
    let vis = Tensor::new([2, 2], vec![0.3, -0.2, 0.5, 0.9]).unwrap();
    let mt = Tensor::new([1, 2], vec![0.7, -0.4]).unwrap();
    let pos = Tensor::new([6, 2], (0..12).map(|i| (i as f64).sin()).collect()).unwrap();
    let r = check_gradients(&[vis, mt, pos], 1e-5, |g, v| {
        let z = corrupt(g, Some(v[0]), &ms, v[1], v[2])?;
        let sq = g.mul(z, z)?;
        Ok(g.sum(sq))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn cosine_distance_limits() {
    let mut g = Graph::<f64>::new();
    let t = Tensor::new([3, 4], (0..12).map(|i| (i as f64 * 1.3).sin()).collect()).unwrap();
    let neg = Tensor::new([3, 4], t.data().iter().map(|v| -v).collect()).unwrap();
    let scaled = Tensor::new([3, 4], t.data().iter().map(|v| 3.5 * v).collect()).unwrap();
    let tv = g.constant(t.clone());
    let rows = [0, 1, 2];
    for (s, want) in [(t, 0.0), (neg, 2.0), (scaled, 0.0)] {
        let sv = g.constant(s);
        let l = cosine_distance(&mut g, sv, tv, &rows).unwrap();
        assert!((g.value(l).item() - want).abs() < 1e-12);
    }
    let x = Tensor::new([3, 4], (0..12).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
    let t2 = Tensor::new([3, 4], (0..12).map(|i| (i as f64 * 0.2).sin()).collect()).unwrap();
    let r = check_gradients(&[x], 1e-5, |g, v| {
        let t = g.constant(t2.clone());
        cosine_distance(g, v[0], t, &[0, 2])
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn loss_rows_fall_back_to_all_tokens() {
    let mk = |bits: &[bool]| MaskSpec { mask: bits.to_vec(), strategy: MaskStrategy::Random, ratio: 0.0 };
    assert_eq!(loss_rows(&[mk(&[false, true]), mk(&[true, false])]), vec![1, 2]);
    assert_eq!(loss_rows(&[mk(&[false, false]), mk(&[false, false])]), vec![0, 1, 2, 3]);
}

#[test]
fn teacher_must_be_frozen() {
    let (t, mut ts) = teacher();
    let pb = batch(2, 1);
    assert!(teacher_targets(&t, &ts, &pb, true).is_ok());
    ts.thaw("dvae.codebook").unwrap();
    assert!(matches!(teacher_targets(&t, &ts, &pb, true), Err(crate::Error::Contract(_))));
}

#[test]
fn distillation_loss_is_bounded_scale_free_and_trains_only_the_student() {
    let (t, ts) = teacher();
    let (s, ss) = student(Objective::DISTILL, 16, 1);
    let pb = batch(3, 2);
    let targets = teacher_targets(&t, &ts, &pb, true).unwrap();
    let ms = masks(&pb, 0.5, 3);
    let mut g = Graph::<f32>::new();
    let parts = mpm_loss(&mut g, &s, &ss, &pb, &ms, &targets, &mut Pass::Eval).unwrap();
    let l = g.value(parts.loss).item();
    assert!((0.0..=2.0).contains(&l));
    assert_eq!(parts.loss_cos, l as f64);
    g.backward(parts.loss).unwrap();
    let grads = g.param_grads();
    assert!(grads.iter().all(|(n, _)| n.starts_with("student.")));
    let head = grads.iter().find(|(n, _)| n == "student.head.w").unwrap();
    assert!(head.1.iter().any(|&v| v != 0.0));

    let scaled = TeacherTargets {
        features: Tensor::new(
            targets.features.shape().to_vec(),
            targets.features.data().iter().map(|v| v * 7.0).collect(),
        )
        .unwrap(),
        tokens: targets.tokens.clone(),
    };
    let mut g2 = Graph::<f32>::new();
    let p2 = mpm_loss(&mut g2, &s, &ss, &pb, &ms, &scaled, &mut Pass::Eval).unwrap();
    assert!((g2.value(p2.loss).item() - l).abs() < 1e-5);
}

#[test]
fn generic_cosine_cell_is_the_distillation_loss() {
    let (t, ts) = teacher();
    let (s, ss) = student(Objective::DISTILL, 16, 4);
    for seed in 0..5 {
        let pb = batch(2, seed);
        let targets = teacher_targets(&t, &ts, &pb, seed % 2 == 0).unwrap();
        let ms = masks(&pb, 0.75, seed);
        let run = |generic: bool| {
            let mut g = Graph::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pass = Pass::Train(&mut rng);
            let p = if generic {
                mpm_loss_generic(&mut g, &s, &ss, &pb, &ms, &targets, Target::Feature, Metric::Cosine, &mut pass)
            } else {
                mpm_loss(&mut g, &s, &ss, &pb, &ms, &targets, &mut pass)
            }
            .unwrap();
            g.value(p.loss).item().to_bits()
        };
        assert_eq!(run(true), run(false));
    }
}

#[test]
fn incompatible_pairings_are_config_errors() {
    for (target, metric) in [
        (Target::Feature, Metric::CrossEntropy),
        (Target::Token, Metric::Cosine),
        (Target::Coords, Metric::Cosine),
        (Target::Feature, Metric::ChamferL1),
    ] {
        let o = Objective::Masked { target, metric };
        assert!(matches!(o.validate(), Err(crate::Error::Config(_))), "{o:?}");
    }
    assert!(Objective::AuxKd { lambda: -1.0 }.validate().is_err());
    let (t, ts) = teacher();
    let (s, ss) = student(Objective::DISTILL, 16, 5);
    let pb = batch(2, 6);
    let targets = teacher_targets(&t, &ts, &pb, true).unwrap();
    let ms = masks(&pb, 0.5, 6);
    let mut g = Graph::<f32>::new();
    let r = mpm_loss_generic(&mut g, &s, &ss, &pb, &ms, &targets, Target::Token, Metric::Cosine, &mut Pass::Eval);
    assert!(matches!(r, Err(crate::Error::Config(_))));
}

#[test]
fn width_mismatch_is_a_shape_error() {
    let (t, ts) = teacher();
    let (s, ss) = student(Objective::DISTILL, 12, 7);
    let pb = batch(2, 8);
    let targets = teacher_targets(&t, &ts, &pb, true).unwrap();
    let ms = masks(&pb, 0.5, 8);
    let mut g = Graph::<f32>::new();
    let r = mpm_loss(&mut g, &s, &ss, &pb, &ms, &targets, &mut Pass::Eval);
    assert!(matches!(r, Err(crate::Error::Shape(_))));
}

#[test]
fn one_hot_logits_give_zero_cross_entropy() {
    let mut g = Graph::<f64>::new();
    let labels = [3usize, 0, 7];
    let mut data = vec![0.0; 3 * 16];
    for (r, &l) in labels.iter().enumerate() {
        data[r * 16 + l] = 60.0;
    }
    let x = g.constant(Tensor::new([3, 16], data).unwrap());
    let ce = g.cross_entropy_rows(x, &labels).unwrap();
    let m = g.mean(ce);
    assert!(g.value(m).item() < 1e-20);
}

#[test]
fn perfect_patch_prediction_has_zero_chamfer() {
    let pb = batch(2, 9);
    let rows: Vec<usize> = (0..2 * N_S).collect();
    let data: Vec<f64> = rows
        .iter()
        .flat_map(|&r| pb.patches[r / N_S].neighborhood(r % N_S).to_vec())
        .flatten()
        .map(|v| v as f64)
        .collect();
    let mut g = Graph::<f64>::new();
    let pred = g.constant(Tensor::new([2 * N_S, 3 * K], data).unwrap());
    let cd = patch_chamfer(&mut g, pred, &pb, &rows).unwrap();
    assert_eq!(g.value(cd).item(), 0.0);
}

#[test]
fn token_and_coordinate_targets_train_their_heads() {
    let (t, ts) = teacher();
    let pb = batch(2, 10);
    let targets = teacher_targets(&t, &ts, &pb, true).unwrap();
    let ms = masks(&pb, 0.5, 10);
    for target in [Target::Token, Target::Coords] {
        let (s, ss) = student(Objective::Masked { target, metric: target.metric() }, 16, 11);
        let mut g = Graph::<f32>::new();
        let p = objective_loss(&mut g, &s, &ss, &pb, &ms, &targets, &mut Pass::Eval).unwrap();
        assert!(g.value(p.loss).item() > 0.0);
        g.backward(p.loss).unwrap();
        let grads = g.param_grads();
        let head = grads.iter().find(|(n, _)| n == "student.head.w").unwrap();
        assert!(head.1.iter().any(|&v| v != 0.0), "{target:?}");
    }
}

#[test]
fn visible_encoding_never_reads_masked_patches() {
    let (s, ss) = student(Objective::DISTILL, 16, 12);
    let pb = batch(2, 13);
    let ms = masks(&pb, 0.6, 14);
    let mut zeroed = pb.clone();
    for (p, m) in zeroed.patches.iter_mut().zip(&ms) {
        for i in m.masked() {
            for q in &mut p.neighborhoods[i * K..(i + 1) * K] {
                *q = [0.0; 3];
            }
            p.centroids[i] = [0.0; 3];
        }
    }
    let enc = |pb: &PatchBatch| {
        let mut g = Graph::<f32>::new();
        let v = s.encode_visible(&mut g, &ss, pb, &ms, &mut Pass::Eval).unwrap();
        g.value(v.tokens.unwrap()).data().to_vec()
    };
    assert_eq!(enc(&pb), enc(&zeroed));
}

#[test]
fn fully_masked_batches_still_decode() {
    let (t, ts) = teacher();
    let (s, ss) = student(Objective::DISTILL, 16, 15);
    let pb = batch(2, 16);
    let targets = teacher_targets(&t, &ts, &pb, true).unwrap();
    let ms = masks(&pb, 1.0, 16);
    let mut g = Graph::<f32>::new();
    let p = mpm_loss(&mut g, &s, &ss, &pb, &ms, &targets, &mut Pass::Eval).unwrap();
    assert!((0.0..=2.0).contains(&g.value(p.loss).item()));
}

#[test]
fn aux_kd_accounting() {
    let (t, ts) = teacher();
    let (s, ss) = student(Objective::AuxKd { lambda: 0.5 }, 16, 17);
    for seed in 0..4 {
        let pb = batch(2, 20 + seed);
        let targets = teacher_targets(&t, &ts, &pb, true).unwrap();
        let ms = masks(&pb, 0.5, seed);
        let loss_bits = |lambda: Option<f64>| {
            let mut g = Graph::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pass = Pass::Train(&mut rng);
            let p = match lambda {
                Some(l) => aux_kd_loss(&mut g, &s, &ss, &pb, &ms, &targets, l, &mut pass),
                None => mpm_loss_generic(&mut g, &s, &ss, &pb, &ms, &targets, Target::Coords, Metric::ChamferL1, &mut pass),
            }
            .unwrap();
            (g.value(p.loss).item(), p)
        };
        let (base, _) = loss_bits(None);
        let (zero, _) = loss_bits(Some(0.0));
        assert_eq!(base.to_bits(), zero.to_bits());
        let (l, p) = loss_bits(Some(0.5));
        assert!(p.loss_cos >= 0.0 && p.loss_cd >= 0.0);
        assert!((l as f64 - (p.loss_cos + p.loss_cd)).abs() < 1e-6);
        assert!(p.loss_cos > 0.0);
    }
}

#[test]
fn training_keeps_the_teacher_frozen_and_is_reproducible() {
    let (t, ts) = teacher();
    let before = ts.clone();
    let train = clouds(16, 30);
    let cfg = MpmTrainConfig { steps: 40, batch: 4, lr: 2e-3, ..MpmTrainConfig::default() };
    let run = |seed: u64| {
        let (s, mut ss) = student(Objective::DISTILL, 16, seed);
        let r = train_mpm(&s, &mut ss, &t, &ts, &cfg, &train).unwrap();
        (r, ss)
    };
    let (r1, s1) = run(31);
    let (r2, s2) = run(31);
    assert_eq!(r1.metrics, r2.metrics);
    assert_eq!(s1, s2);
    assert_eq!(ts, before);
    assert!(r1.metrics.iter().all(|m| (0.0..=2.0).contains(&m.loss_cos)));
    let first: f64 = r1.metrics[..10].iter().map(|m| m.loss).sum::<f64>() / 10.0;
    let last = r1.metrics.last().unwrap().loss;
    assert!(last < first, "{first} -> {last}");
    assert_eq!(r1.metrics[0].csv_row().split(',').count(), MPM_CSV_HEADER.split(',').count());
}

#[test]
fn probe_features_have_twice_the_width() {
    let (s, ss) = student(Objective::DISTILL, 16, 40);
    let pb = batch(3, 41);
    let mut g = Graph::<f32>::new();
    let f = s.global_features(&mut g, &ss, &pb, &mut Pass::Eval).unwrap();
    assert_eq!(g.shape(f), &[3, 24]);
}
