use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use parn::attention::{correlate, AttentionMap};
use parn::checkpoint::{load_checkpoint, save_checkpoint};
use parn::data::{
    augment_rotations, load_image, load_mini_imagenet, load_omniglot, synthetic, Dataset,
    SyntheticSpec,
};
use parn::gradcheck::{run_suite, SuiteOptions};
use parn::model::{Model, PassMode};
use parn::train::{evaluate, MetricsRow, METRICS_HEADER};
use parn::Tensor;

use crate::settings::{DatasetKind, Settings};
use crate::{EvalArgs, GradcheckArgs, InspectArgs, RunArgs};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const CHECKPOINT: &str = "checkpoint.parn";
pub const METRICS: &str = "metrics.csv";
pub const MANIFEST: &str = "manifest.txt";
pub const RESULTS: &str = "results.csv";
pub const RESULTS_HEADER: &str = "dataset,way,shot,episodes,accuracy,ci95";

/// Numeric failures exit with 3, everything else with 2.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    let numeric = e.chain().any(|c| {
        matches!(
            c.downcast_ref::<parn::Error>(),
            Some(parn::Error::Numeric(_))
        )
    });
    if numeric {
        EXIT_NUMERIC
    } else {
        EXIT_CONFIG
    }
}

#[derive(Clone, Copy)]
enum EpisodesFlag {
    Train,
    Test,
}

fn resolve(a: &RunArgs, episodes: EpisodesFlag) -> Result<Settings> {
    let mut s = match &a.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    for o in &a.overrides {
        s.apply(o).with_context(|| format!("--set {o}"))?;
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(v) = &a.dataset_root {
        s.dataset_root = Some(v.clone());
    }
    if let Some(v) = a.way {
        s.way = v;
    }
    if let Some(v) = a.shot {
        s.shot = v;
    }
    if let Some(v) = a.workers {
        s.workers = v;
    }
    if let Some(v) = a.episodes {
        match episodes {
            EpisodesFlag::Train => s.train_episodes = v,
            EpisodesFlag::Test => s.test_episodes = v,
        }
    }
    s.model_config().validate()?;
    s.train_config().validate()?;
    Ok(s)
}

fn prepare_out(dir: &Path, s: &Settings) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(RESOLVED_CONFIG);
    fs::write(&path, s.to_string()).with_context(|| format!("writing {}", path.display()))
}

/// `(train, test)` splits of the configured dataset.
fn load_splits(s: &Settings) -> Result<(Dataset, Dataset)> {
    let root = || {
        s.dataset_root.as_deref().with_context(|| {
            format!(
                "dataset {} needs dataset_root (or --dataset-root)",
                s.dataset.name()
            )
        })
    };
    Ok(match s.dataset {
        DatasetKind::Omniglot => {
            let (train, test) = load_omniglot(root()?)?;
            let train = if s.rotate_classes {
                augment_rotations(&train)
            } else {
                train
            };
            (train, test)
        }
        DatasetKind::MiniImagenet => {
            let mut splits = load_mini_imagenet(root()?)?;
            let test = splits.pop().expect("three splits");
            (splits.swap_remove(0), test)
        }
        DatasetKind::Synthetic => {
            let spec = SyntheticSpec {
                classes: s.synthetic_classes,
                images_per_class: s.synthetic_images,
                size: s.model_config().input_size,
                ..SyntheticSpec::default()
            };
            let all = synthetic(&spec, s.synthetic_seed)?;
            let cut = spec.classes * 3 / 4;
            if cut == 0 || cut == spec.classes {
                bail!(
                    "synthetic_classes = {} is too few to hold out test classes",
                    spec.classes
                );
            }
            let ids: Vec<usize> = (0..spec.classes).collect();
            (all.subset(&ids[..cut])?, all.subset(&ids[cut..])?)
        }
    })
}

pub fn train(a: &RunArgs) -> Result<u8> {
    let s = resolve(a, EpisodesFlag::Train)?;
    prepare_out(&a.out, &s)?;
    let (train_set, _) = load_splits(&s)?;
    let mut model = Model::<f32>::new(s.model_config(), s.seed)?;
    fs::write(a.out.join(MANIFEST), model.manifest().render())?;

    let metrics_path = a.out.join(METRICS);
    let mut metrics = fs::File::create(&metrics_path)
        .with_context(|| format!("creating {}", metrics_path.display()))?;
    writeln!(metrics, "{METRICS_HEADER}")?;
    let mut write_err = None;
    let mut on_row = |r: &MetricsRow| {
        println!(
            "episode {:>6}  loss {:.5}  eval {:.4} ± {:.4}  lr {:e}",
            r.episode, r.loss, r.eval_accuracy, r.ci95, r.lr
        );
        if let Err(e) = writeln!(metrics, "{}", r.csv_line()) {
            write_err.get_or_insert(e);
        }
    };
    let outcome = parn::train::train(&mut model, &s.train_config(), &train_set, &mut on_row)?;
    if let Some(e) = write_err {
        return Err(e).context(format!("writing {}", metrics_path.display()));
    }
    save_checkpoint(&a.out.join(CHECKPOINT), &model)?;
    println!(
        "trained {} episodes; checkpoint {}",
        outcome.episodes_completed,
        a.out.join(CHECKPOINT).display()
    );
    if let Some(why) = outcome.aborted {
        eprintln!("training aborted: {why}; the checkpoint holds the last good parameters");
        return Ok(EXIT_NUMERIC);
    }
    Ok(EXIT_OK)
}

pub fn eval(a: &EvalArgs) -> Result<u8> {
    let s = resolve(&a.run, EpisodesFlag::Test)?;
    prepare_out(&a.run.out, &s)?;
    let model = load_checkpoint(&a.checkpoint, &s.model_config())?;
    let (_, test) = load_splits(&s)?;
    let r = evaluate(
        &model,
        &test,
        s.way,
        s.shot,
        s.queries(),
        s.test_episodes,
        s.seed,
        s.workers,
    )?;
    println!("{:.4} ± {:.4}", r.accuracy, r.ci95);
    if !r.ci_defined {
        println!("(confidence interval undefined for a single episode)");
    }
    let path = a.run.out.join(RESULTS);
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .with_context(|| format!("opening {}", path.display()))?;
    if fresh {
        writeln!(f, "{RESULTS_HEADER}")?;
    }
    writeln!(
        f,
        "{},{},{},{},{:.6},{:.6}",
        s.dataset.name(),
        s.way,
        s.shot,
        r.episodes,
        r.accuracy,
        r.ci95
    )?;
    Ok(EXIT_OK)
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<u8> {
    let defaults = SuiteOptions::default();
    let opts = SuiteOptions {
        trials: a.trials,
        seed: a.seed.unwrap_or(defaults.seed),
        tolerance: a.tolerance,
        corrupt_op: a.corrupt_op.clone(),
        only: (!a.only.is_empty()).then(|| a.only.clone()),
        ..defaults
    };
    let report = run_suite(&opts)?;
    for c in &report.cases {
        println!(
            "{:<24} trials {:>4}  max relative error {:.3e}  {}",
            c.name,
            c.trials,
            c.max_rel_error,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = report.failures().map(|c| c.name).collect();
    if failed.is_empty() {
        println!(
            "all {} ops within {:.0e}",
            report.cases.len(),
            report.tolerance
        );
        Ok(EXIT_OK)
    } else {
        println!("failing ops: {}", failed.join(", "));
        Ok(EXIT_CHECK_FAILED)
    }
}

fn write_matrix(path: &Path, map: &AttentionMap<f32>) -> Result<(usize, usize)> {
    let s = map.values.shape();
    let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
    let mut text = String::new();
    for row in map.values.data().chunks(cols) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.9}")).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok((rows, cols))
}

pub fn inspect_attention(a: &InspectArgs) -> Result<u8> {
    let s = resolve(&a.run, EpisodesFlag::Test)?;
    let cfg = s.model_config();
    if !cfg.attention.uses_correlation() {
        bail!(
            "attention = {} has no correlation maps to inspect",
            cfg.attention
        );
    }
    prepare_out(&a.run.out, &s)?;
    let model = load_checkpoint(&a.checkpoint, &cfg)?;
    let mut pixels = load_image(&a.sample, cfg.input_size, cfg.in_channels)?;
    pixels.extend(load_image(&a.query, cfg.input_size, cfg.in_channels)?);
    let images = Tensor::new(
        pixels,
        &[2, cfg.in_channels, cfg.input_size, cfg.input_size],
    )?;
    let mut bound = model.bind(PassMode::inference(cfg.eval_bn))?;
    let features = bound.extract(&images)?;
    let c = correlate(
        &features.narrow(0, 0, 1)?,
        &features.narrow(0, 1, 1)?,
        bound.attention_params(),
    )?;

    let side = cfg.feature_size();
    let out = &a.run.out;
    let (rows, cols) = write_matrix(&out.join("attention_cross.csv"), &c.cross)?;
    write_matrix(&out.join("attention_self_sample.csv"), &c.self1)?;
    write_matrix(&out.join("attention_self_query.csv"), &c.self2)?;

    let mut summary =
        String::from("map,position,row,col,best_position,best_row,best_col,max_response\n");
    let mut best_line = |name: &str, map: &AttentionMap<f32>, transpose: bool| {
        let s = map.values.shape();
        let (r, k) = (s[s.len() - 2], s[s.len() - 1]);
        let v = map.values.data();
        let (outer, inner) = if transpose { (k, r) } else { (r, k) };
        for i in 0..outer {
            let at = |j: usize| {
                if transpose {
                    v[j * k + i]
                } else {
                    v[i * k + j]
                }
            };
            let j = (0..inner).fold(0, |b, j| if at(j) > at(b) { j } else { b });
            summary.push_str(&format!(
                "{name},{i},{},{},{j},{},{},{:.9}\n",
                i / side,
                i % side,
                j / side,
                j % side,
                at(j)
            ));
        }
    };
    best_line("cross_sample_to_query", &c.cross, false);
    best_line("cross_query_to_sample", &c.cross, true);
    best_line("self_sample", &c.self1, false);
    best_line("self_query", &c.self2, false);
    fs::write(out.join("attention_summary.csv"), summary)?;

    let diag: Vec<f32> = (0..rows.min(cols))
        .map(|i| c.cross.values.data()[i * cols + i])
        .collect();
    let mean_diag = diag.iter().sum::<f32>() / diag.len() as f32;
    println!(
        "cross map {rows}x{cols}, self maps {rows}x{rows}; mean cross diagonal {mean_diag:.6}; written to {}",
        out.display()
    );
    Ok(EXIT_OK)
}

pub fn manifest(a: &RunArgs) -> Result<u8> {
    let s = resolve(a, EpisodesFlag::Train)?;
    prepare_out(&a.out, &s)?;
    let model = Model::<f32>::new(s.model_config(), s.seed)?;
    let text = model.manifest().render();
    fs::write(a.out.join(MANIFEST), &text)?;
    print!("{text}");
    Ok(EXIT_OK)
}
