//! Algebraic invariants of attention, data handling, training utilities and checkpoints.

use parn::attention::{
    cross_attention_map, distribute_cross, self_attention_map, AttentionVariant, NORM_EPS,
};
use parn::checkpoint::{decode_model, encode};
use parn::data::{augment_rotations, rotate_quarter, synthetic, SyntheticSpec};
use parn::episode::sample_plan;
use parn::model::{ExtractorKind, Model, ModelConfig};
use parn::train::{argmax, mse_episode_loss, EvalResult, MetricsRow};
use parn::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fill(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn t(data: Vec<f64>, shape: &[usize]) -> Tensor<f64> {
    Tensor::new(data, shape).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn permute_rows(v: &[f64], cols: usize, perm: &[usize]) -> Vec<f64> {
    perm.iter()
        .flat_map(|&r| v[r * cols..(r + 1) * cols].to_vec())
        .collect()
}

fn tiny(extractor: ExtractorKind, attention: AttentionVariant) -> ModelConfig {
    ModelConfig {
        input_size: 16,
        channels: 4,
        relation_hidden: 3,
        ..ModelConfig::omniglot(extractor, attention)
    }
}

fn extractor() -> impl Strategy<Value = ExtractorKind> {
    prop::sample::select(ExtractorKind::ALL.to_vec())
}

fn variant() -> impl Strategy<Value = AttentionVariant> {
    prop::sample::select(AttentionVariant::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn attention_entries_are_cosines(p1 in 1..10usize, p2 in 1..10usize, c in 1..8usize, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = t(fill(&mut rng, p1 * c), &[p1, c]);
        let b = t(fill(&mut rng, p2 * c), &[p2, c]);
        let m = cross_attention_map(&a, &b).unwrap();
        prop_assert_eq!(m.values.shape(), &[p1, p2]);
        prop_assert!(m.values.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn self_map_is_symmetric_with_unit_diagonal(p in 1..10usize, c in 1..8usize, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = t(fill(&mut rng, p * c), &[p, c]);
        let s = self_attention_map(&x).unwrap();
        let v = s.values.data();
        for i in 0..p {
            let norm2: f64 = x.data()[i * c..(i + 1) * c].iter().map(|a| a * a).sum();
            // Diagonal is n/(n+eps) for squared row norm n.
            let want = norm2 / (norm2 + NORM_EPS);
            prop_assert!((v[i * p + i] - want).abs() < 1e-12);
            prop_assert!(norm2 < 1e-3 || (v[i * p + i] - 1.0).abs() < 1e-9);
            for j in 0..p {
                prop_assert_eq!(v[i * p + j], v[j * p + i]);
            }
        }
        let cross = cross_attention_map(&x, &x).unwrap();
        prop_assert_eq!(cross.values.data(), s.values.data());
    }

    #[test]
    fn query_permutation_moves_only_one_output(
        p1 in 1..8usize, p2 in 1..8usize, c in 1..6usize, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = fill(&mut rng, p1 * c);
        let b = fill(&mut rng, p2 * c);
        let mut perm: Vec<usize> = (0..p2).collect();
        perm.shuffle(&mut rng);
        let ta = t(a, &[p1, c]);
        let (f21, f12) = distribute_cross(&cross_attention_map(&ta, &t(b.clone(), &[p2, c])).unwrap(), &ta, &t(b.clone(), &[p2, c])).unwrap();
        let bp = t(permute_rows(&b, c, &perm), &[p2, c]);
        let (g21, g12) = distribute_cross(&cross_attention_map(&ta, &bp).unwrap(), &ta, &bp).unwrap();
        prop_assert!(close(g12.data(), f12.data(), 1e-12));
        prop_assert!(close(g21.data(), &permute_rows(f21.data(), c, &perm), 1e-12));
    }

    #[test]
    fn scaling_f2_keeps_the_map_and_scales_f12(
        p1 in 1..8usize, p2 in 1..8usize, c in 1..6usize, seed in any::<u64>(), lambda in 0.01..100.0f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = t(fill(&mut rng, p1 * c), &[p1, c]);
        let b = fill(&mut rng, p2 * c);
        // Exact up to the normalisation epsilon, negligible for rows this large.
        prop_assume!(b.chunks(c).all(|r| {
            let n: f64 = r.iter().map(|v| v * v).sum();
            n.min(n * lambda * lambda) > 1e-2
        }));
        let tb = t(b.clone(), &[p2, c]);
        let ts = t(b.iter().map(|v| v * lambda).collect(), &[p2, c]);
        let m = cross_attention_map(&a, &tb).unwrap();
        let ms = cross_attention_map(&a, &ts).unwrap();
        prop_assert!(close(ms.values.data(), m.values.data(), 1e-9));
        let (f21, f12) = distribute_cross(&m, &a, &tb).unwrap();
        let (g21, g12) = distribute_cross(&ms, &a, &ts).unwrap();
        prop_assert!(close(g21.data(), f21.data(), 1e-9));
        let scaled: Vec<f64> = f12.data().iter().map(|v| v * lambda).collect();
        prop_assert!(close(g12.data(), &scaled, 1e-9 * lambda.max(1.0)));
    }

    #[test]
    fn single_positions_reduce_to_scalar_attention(c in 1..8usize, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (u, v) = (fill(&mut rng, c), fill(&mut rng, c));
        let dot: f64 = u.iter().zip(&v).map(|(x, y)| x * y).sum();
        let norm = |r: &[f64]| (r.iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt();
        let cos = dot / (norm(&u) * norm(&v));
        let (tu, tv) = (t(u.clone(), &[1, c]), t(v.clone(), &[1, c]));
        let (f21, f12) = distribute_cross(&cross_attention_map(&tu, &tv).unwrap(), &tu, &tv).unwrap();
        let want12: Vec<f64> = v.iter().map(|x| cos * x).collect();
        let want21: Vec<f64> = u.iter().map(|x| cos * x).collect();
        prop_assert!(close(f12.data(), &want12, 1e-12));
        prop_assert!(close(f21.data(), &want21, 1e-12));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn mse_loss_is_non_negative_and_zero_at_targets(n in 1..10usize, c in 1..8usize, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let scores: Vec<f64> = (0..n * c).map(|_| rng.random_range(0.0..1.0)).collect();
        let loss = mse_episode_loss(&t(scores, &[n, c]), &labels).unwrap().item().unwrap();
        prop_assert!(loss >= 0.0 && loss <= 1.0);
        let mut onehot = vec![0.0; n * c];
        for (q, &l) in labels.iter().enumerate() {
            onehot[q * c + l] = 1.0;
        }
        prop_assert_eq!(mse_episode_loss(&t(onehot, &[n, c]), &labels).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn quarter_turns_compose(ch in 1..4usize, size in 1..9usize, k in 0..4u8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px: Vec<f32> = (0..ch * size * size).map(|_| rng.random_range(0.0..1.0)).collect();
        let once = rotate_quarter(&px, ch, size, k);
        prop_assert_eq!(rotate_quarter(&once, ch, size, (4 - k) % 4), px.clone());
        let stepwise = (0..k).fold(px.clone(), |acc, _| rotate_quarter(&acc, ch, size, 1));
        prop_assert_eq!(once, stepwise);
        let full = (0..4).fold(px.clone(), |acc, _| rotate_quarter(&acc, ch, size, 1));
        prop_assert_eq!(full, px);
    }

    #[test]
    fn argmax_picks_first_maximum(row in prop::collection::vec(-5i32..5, 1..12)) {
        let row: Vec<f32> = row.into_iter().map(|v| v as f32).collect();
        let i = argmax(&row);
        let best = row.iter().cloned().fold(f32::MIN, f32::max);
        prop_assert_eq!(row[i], best);
        prop_assert!(row[..i].iter().all(|&v| v < best));
    }

    #[test]
    fn ci95_is_non_negative_and_vanishes_for_constant_accuracies(accs in prop::collection::vec(0.0..1.0f64, 2..40)) {
        let r = EvalResult::from_accuracies(accs.clone()).unwrap();
        prop_assert!(r.ci_defined && r.ci95 >= 0.0);
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        prop_assert!((r.accuracy - mean).abs() < 1e-12);
        let constant = EvalResult::from_accuracies(vec![accs[0]; accs.len()]).unwrap();
        prop_assert!(constant.ci95 < 1e-12);
    }

    #[test]
    fn metrics_lines_parse_back(
        episode in 0..1_000_000usize, loss in 0.0..2.0f64, acc in 0.0..1.0f64,
        ci in 0.0..0.5f64, lr in 1e-8..1.0f64, active in any::<bool>(),
    ) {
        let row = MetricsRow { episode, loss, eval_accuracy: acc, ci95: ci, lr, offsets_active: active };
        let back = MetricsRow::parse(&row.csv_line()).unwrap();
        prop_assert_eq!(back.episode, episode);
        prop_assert_eq!(back.offsets_active, active);
        prop_assert!((back.loss - loss).abs() <= 5e-9);
        prop_assert!((back.eval_accuracy - acc).abs() <= 5e-7);
        prop_assert_eq!(back.lr, lr);
        prop_assert_eq!(back.csv_line(), row.csv_line());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn episodes_never_reuse_classes_or_images(
        classes in 5..30usize, way in 1..6usize, shot in 1..4usize, queries in 1..6usize, seed in any::<u64>(),
    ) {
        prop_assume!(way <= classes);
        let d = synthetic(&SyntheticSpec { classes, images_per_class: 10, size: 6, ..Default::default() }, 3).unwrap();
        let plan = sample_plan(&d, way, shot, queries, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut cls = plan.classes.clone();
        cls.sort_unstable();
        cls.dedup();
        prop_assert_eq!(cls.len(), way);
        for (s, q) in plan.sample_images.iter().zip(&plan.query_images) {
            prop_assert_eq!(s.len(), shot);
            prop_assert_eq!(q.len(), queries);
            let mut all: Vec<usize> = s.iter().chain(q).cloned().collect();
            all.sort_unstable();
            all.dedup();
            prop_assert_eq!(all.len(), shot + queries);
            prop_assert!(all.iter().all(|&i| i < 10));
        }
    }

    #[test]
    fn rotation_augmentation_quadruples_classes(classes in 1..8usize, seed in any::<u64>()) {
        let d = synthetic(&SyntheticSpec { classes, images_per_class: 2, size: 6, ..Default::default() }, seed).unwrap();
        let a = augment_rotations(&d);
        prop_assert_eq!(a.classes.len(), 4 * classes);
        for rot in 0..4 {
            for c in 0..classes {
                let want = rotate_quarter(&d.image(c, 1), 1, 6, rot as u8);
                prop_assert_eq!(a.image(rot * classes + c, 1), want);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn checkpoints_round_trip_bit_exactly(e in extractor(), v in variant(), seed in any::<u64>()) {
        let m = Model::<f32>::new(tiny(e, v), seed).unwrap();
        let bytes = encode(&m);
        let back = decode_model(&bytes, &m.config).unwrap();
        prop_assert!(back.params.bit_equal(&m.params));
        prop_assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn shuffling_queries_shuffles_score_rows(e in extractor(), v in variant(), seed in any::<u64>()) {
        let m = Model::<f32>::new(tiny(e, v), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (way, n) = (3, 5);
        let px = 16 * 16;
        let samples: Vec<f32> = (0..way * px).map(|_| rng.random_range(0.0..1.0)).collect();
        let queries: Vec<f32> = (0..n * px).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<f32> = perm.iter().flat_map(|&q| queries[q * px..(q + 1) * px].to_vec()).collect();
        let st = Tensor::new(samples, &[way, 1, 16, 16]).unwrap();
        let a = m.predict(&st, &Tensor::new(queries, &[n, 1, 16, 16]).unwrap(), way, 1).unwrap();
        let b = m.predict(&st, &Tensor::new(shuffled, &[n, 1, 16, 16]).unwrap(), way, 1).unwrap();
        for (row, &q) in perm.iter().enumerate() {
            prop_assert_eq!(&b.data()[row * way..(row + 1) * way], &a.data()[q * way..(q + 1) * way]);
        }
    }
}

#[test]
fn class_draws_are_uniform() {
    let d = synthetic(
        &SyntheticSpec {
            classes: 20,
            images_per_class: 4,
            size: 4,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = [0usize; 20];
    let draws = 10_000;
    for _ in 0..draws {
        for c in sample_plan(&d, 5, 1, 1, &mut rng).unwrap().classes {
            counts[c] += 1;
        }
    }
    let expected = (draws * 5) as f64 / 20.0;
    for (c, &n) in counts.iter().enumerate() {
        let dev = (n as f64 - expected).abs() / expected;
        assert!(
            dev <= 0.2,
            "class {c} drawn {n} times, expected about {expected}"
        );
    }
}
