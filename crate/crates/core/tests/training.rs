//! End-to-end training and evaluation on synthetic stroke data.

use parn::attention::AttentionVariant;
use parn::checkpoint::encode;
use parn::data::{synthetic, Dataset, SyntheticSpec};
use parn::episode::sample_episode;
use parn::model::{ExtractorKind, Model, ModelConfig, ParamKind};
use parn::train::{episode_accuracy, evaluate, metrics_csv, train, TrainConfig};
use parn::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(extractor: ExtractorKind, attention: AttentionVariant) -> ModelConfig {
    ModelConfig {
        channels: 16,
        relation_hidden: 16,
        warmup_episodes: 20,
        ..ModelConfig::omniglot(extractor, attention)
    }
}

fn data(classes: usize, seed: u64) -> Dataset {
    synthetic(
        &SyntheticSpec {
            classes,
            ..Default::default()
        },
        seed,
    )
    .unwrap()
}

fn quick(max_episodes: usize) -> TrainConfig {
    TrainConfig {
        max_episodes,
        eval_every: 10,
        eval_episodes: 5,
        seed: 17,
        ..Default::default()
    }
}

#[test]
fn five_synthetic_classes_are_memorized() {
    let d = data(5, 3);
    let mut m = Model::<f32>::new(small(ExtractorKind::Dfe4, AttentionVariant::Dca), 5).unwrap();
    let cfg = TrainConfig {
        eval_every: 20,
        ..quick(120)
    };
    let out = train(&mut m, &cfg, &d, &mut |_| {}).unwrap();
    assert!(out.aborted.is_none(), "{:?}", out.aborted);
    assert!(out.metrics.last().unwrap().offsets_active);
    let acc = evaluate(&m, &d, 5, 1, 19, 50, 99, 1).unwrap();
    println!(
        "train-class accuracy after {} episodes: {:.4}",
        out.episodes_completed, acc.accuracy
    );
    assert!(acc.accuracy >= 0.99, "{}", acc.accuracy);

    // Reordering the queries of an episode must not change its accuracy.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let e = sample_episode(&d, 5, 1, 19, &mut rng).unwrap();
        let base = episode_accuracy(
            &m.predict(&e.samples, &e.queries, 5, 1).unwrap(),
            &e.query_labels,
        )
        .unwrap();
        let mut perm: Vec<usize> = (0..e.query_labels.len()).collect();
        perm.shuffle(&mut rng);
        let px = 28 * 28;
        let q = e.queries.data();
        let shuffled: Vec<f32> = perm
            .iter()
            .flat_map(|&i| q[i * px..(i + 1) * px].to_vec())
            .collect();
        let labels: Vec<usize> = perm.iter().map(|&i| e.query_labels[i]).collect();
        let queries = Tensor::new(shuffled, e.queries.shape()).unwrap();
        let acc =
            episode_accuracy(&m.predict(&e.samples, &queries, 5, 1).unwrap(), &labels).unwrap();
        assert_eq!(acc, base);
    }
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let d = data(8, 1);
    let mut m = Model::<f32>::new(small(ExtractorKind::Dfe4, AttentionVariant::Cca), 2).unwrap();
    let before = m.params.clone();
    let cfg = TrainConfig {
        lr: 0.0,
        ..quick(25)
    };
    train(&mut m, &cfg, &d, &mut |_| {}).unwrap();
    let mut buffers_moved = false;
    for (a, b) in before.entries().iter().zip(m.params.entries()) {
        let same = a
            .data
            .iter()
            .zip(b.data.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        match a.kind {
            ParamKind::Trainable => assert!(same, "{} changed with lr = 0", a.name),
            ParamKind::Buffer => buffers_moved |= !same,
        }
    }
    // Running statistics are not learned by the optimizer and keep tracking batches.
    assert!(buffers_moved);
}

#[test]
fn fixed_seed_runs_are_byte_identical() {
    let d = data(8, 2);
    let run = || {
        let mut m =
            Model::<f32>::new(small(ExtractorKind::Dfe4, AttentionVariant::Dca), 7).unwrap();
        let cfg = TrainConfig {
            max_episodes: 30,
            ..quick(30)
        };
        let out = train(&mut m, &cfg, &d, &mut |_| {}).unwrap();
        (metrics_csv(&out.metrics), encode(&m))
    };
    let (csv_a, ckpt_a) = run();
    let (csv_b, ckpt_b) = run();
    assert_eq!(csv_a.lines().count(), 4);
    assert_eq!(csv_a, csv_b);
    assert!(ckpt_a == ckpt_b);
}

#[test]
fn untrained_model_is_at_chance() {
    let d = data(20, 5);
    let cfg = ModelConfig {
        channels: 8,
        relation_hidden: 8,
        ..ModelConfig::omniglot(ExtractorKind::Sfe4, AttentionVariant::None)
    };
    let m = Model::<f32>::new(cfg, 11).unwrap();
    let r = evaluate(&m, &d, 5, 1, 5, 600, 8, 1).unwrap();
    println!(
        "untrained 5-way accuracy: {:.4} ± {:.4}",
        r.accuracy, r.ci95
    );
    assert!((0.15..=0.25).contains(&r.accuracy), "{}", r.accuracy);
}

#[test]
fn evaluation_ignores_worker_count() {
    let d = data(10, 6);
    let m = Model::<f32>::new(small(ExtractorKind::Sfe6, AttentionVariant::Sca), 3).unwrap();
    let one = evaluate(&m, &d, 5, 1, 3, 9, 21, 1).unwrap();
    let three = evaluate(&m, &d, 5, 1, 3, 9, 21, 3).unwrap();
    assert_eq!(one, three);
    assert_eq!(one, evaluate(&m, &d, 5, 1, 3, 9, 21, 1).unwrap());
}

#[test]
fn single_episode_has_no_interval() {
    let d = data(6, 0);
    let m = Model::<f32>::new(small(ExtractorKind::Sfe4, AttentionVariant::Baseline), 1).unwrap();
    let r = evaluate(&m, &d, 5, 1, 2, 1, 0, 1).unwrap();
    assert!(!r.ci_defined);
    assert_eq!(r.ci95, 0.0);
}
