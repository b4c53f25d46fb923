//! Episodic training with MSE relation targets and Adam, plus evaluation.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::episode::{materialize, sample_episode, sample_plan, EpisodePlan};
use crate::error::{Error, Result};
use crate::model::{ExtractorKind, Model, ParamKind, ParamStore, PassMode};
use crate::tensor::{Element, Tensor};

/// Mean over all `(query, class)` pairs of `(score − [class == label])²`.
pub fn mse_episode_loss<T: Element>(scores: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let s = scores.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape(
            "mse_episode_loss",
            format!("scores {s:?} vs {} labels", labels.len()),
        ));
    }
    let c = s[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::shape(
            "mse_episode_loss",
            format!("label {bad} for {c} classes"),
        ));
    }
    let mut target = vec![T::zero(); labels.len() * c];
    for (q, &l) in labels.iter().enumerate() {
        target[q * c + l] = T::one();
    }
    let diff = scores.sub(&Tensor::new(target, s)?)?;
    Ok(diff.mul(&diff)?.mean())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamSlot<T: Element> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step<T: Element>(
    name: &str,
    param: &mut [T],
    grad: &[T],
    slot: &mut AdamSlot<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.len() != grad.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{name}: {} values vs {} gradients", param.len(), grad.len()),
        ));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient {} in {name}[{i}]",
            grad[i]
        )));
    }
    if slot.m.len() != param.len() {
        slot.m = vec![T::zero(); param.len()];
        slot.v = vec![T::zero(); param.len()];
        slot.t = 0;
    }
    slot.t += 1;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powi(slot.t as i32));
    let c2 = T::lit(1.0 - cfg.beta2.powi(slot.t as i32));
    let (lr, eps) = (T::lit(lr), T::lit(cfg.eps));
    for i in 0..param.len() {
        let g = grad[i];
        slot.m[i] = b1 * slot.m[i] + (T::one() - b1) * g;
        slot.v[i] = b2 * slot.v[i] + (T::one() - b2) * g * g;
        let m_hat = slot.m[i] / c1;
        let v_hat = slot.v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over a named parameter store.
#[derive(Debug, Clone, Default)]
pub struct Adam<T: Element> {
    pub config: AdamConfig,
    slots: HashMap<String, AdamSlot<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            slots: HashMap::new(),
        }
    }

    /// Update every parameter named in `grads`. Nothing changes if any
    /// gradient is non-finite.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[(String, Vec<T>)],
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {} in {name}[{i}]",
                    g[i]
                )));
            }
            match store.get(name) {
                Some(e) if e.kind == ParamKind::Trainable => {}
                _ => {
                    return Err(Error::Contract(format!(
                        "adam: {name:?} is not a trainable parameter"
                    )))
                }
            }
        }
        for (name, g) in grads {
            let slot = self.slots.entry(name.clone()).or_default();
            adam_step(name, store.values_mut(name)?, g, slot, lr, &self.config)?;
        }
        Ok(())
    }

    pub fn slot(&self, name: &str) -> Option<&AdamSlot<T>> {
        self.slots.get(name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay_factor: f64,
    /// Evaluations without improvement before the learning rate drops.
    pub plateau_patience: usize,
    pub max_episodes: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            lr_decay_factor: 10.0,
            plateau_patience: 5,
            max_episodes: 30_000,
            seed: 0,
            eval_every: 500,
            eval_episodes: 100,
            way: 5,
            shot: 1,
            queries: 19,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be a finite non-negative number, got {}",
                self.lr
            )));
        }
        if !(self.lr_decay_factor >= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_factor must be ≥ 1, got {}",
                self.lr_decay_factor
            )));
        }
        let positive = [
            ("plateau_patience", self.plateau_patience),
            ("eval_every", self.eval_every),
            ("eval_episodes", self.eval_episodes),
            ("way", self.way),
            ("shot", self.shot),
            ("queries", self.queries),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        Ok(())
    }
}

/// One metrics-log line, written after every evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// Episodes completed.
    pub episode: usize,
    /// Mean training loss since the previous row.
    pub loss: f64,
    pub eval_accuracy: f64,
    pub ci95: f64,
    /// Learning rate after this evaluation's plateau check.
    pub lr: f64,
    pub offsets_active: bool,
}

pub const METRICS_HEADER: &str = "episode,loss,eval_accuracy,ci95,lr,offsets_active";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.8},{:.6},{:.6},{:e},{}",
            self.episode,
            self.loss,
            self.eval_accuracy,
            self.ci95,
            self.lr,
            self.offsets_active as u8
        )
    }

    pub fn parse(line: &str) -> Result<MetricsRow> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Contract(format!("malformed metrics line {line:?}"));
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(MetricsRow {
            episode: f[0].parse().map_err(|_| bad())?,
            loss: num(f[1])?,
            eval_accuracy: num(f[2])?,
            ci95: num(f[3])?,
            lr: num(f[4])?,
            offsets_active: match f[5] {
                "0" => false,
                "1" => true,
                _ => return Err(bad()),
            },
        })
    }
}

/// Header plus one line per row.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub episodes_completed: usize,
    pub final_lr: f64,
    /// Why training stopped early; the model holds the last good parameters.
    pub aborted: Option<String>,
}

/// Salt separating validation episodes from training episodes.
const VALIDATION_SALT: u64 = 0x7661_6c69_6461_7465;

fn offsets_active(model: &Model<f32>, episode: usize) -> bool {
    model.config.extractor == ExtractorKind::Dfe4 && episode >= model.config.warmup_episodes
}

/// Train on `data` in place. Validation uses held-out episodes from the same
/// classes, drawn from a fixed seed so every evaluation sees the same tasks.
pub fn train(
    model: &mut Model<f32>,
    cfg: &TrainConfig,
    data: &Dataset,
    on_row: &mut dyn FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig::default());
    let mut lr = cfg.lr;
    let (mut best, mut stale) = (f64::NEG_INFINITY, 0usize);
    let (mut loss_sum, mut loss_n) = (0.0f64, 0usize);
    let mut metrics = Vec::new();
    let mut aborted = None;
    let mut completed = 0;

    for ep in 0..cfg.max_episodes {
        let active = offsets_active(model, ep);
        let episode = sample_episode(data, cfg.way, cfg.shot, cfg.queries, &mut rng)?;
        let grads = {
            let mut bound = model.bind(PassMode::training(active))?;
            let scores =
                bound.episode_scores(&episode.samples, &episode.queries, cfg.way, cfg.shot)?;
            let loss = mse_episode_loss(&scores, &episode.query_labels)?;
            let value = loss.item()? as f64;
            if !value.is_finite() {
                aborted = Some(format!("non-finite loss {value} at episode {}", ep + 1));
                break;
            }
            loss.backward()?;
            bound.commit_running_stats(&mut model.params)?;
            loss_sum += value;
            loss_n += 1;
            bound.grads()
        };
        if let Err(e) = adam.step(&mut model.params, &grads, lr) {
            aborted = Some(format!("episode {}: {e}", ep + 1));
            break;
        }
        completed = ep + 1;

        if completed % cfg.eval_every == 0 || completed == cfg.max_episodes {
            let eval = evaluate(
                model,
                data,
                cfg.way,
                cfg.shot,
                cfg.queries,
                cfg.eval_episodes,
                cfg.seed ^ VALIDATION_SALT,
                1,
            )?;
            if eval.accuracy > best {
                best = eval.accuracy;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.plateau_patience {
                    lr /= cfg.lr_decay_factor;
                    stale = 0;
                }
            }
            let row = MetricsRow {
                episode: completed,
                loss: if loss_n > 0 {
                    loss_sum / loss_n as f64
                } else {
                    0.0
                },
                eval_accuracy: eval.accuracy,
                ci95: eval.ci95,
                lr,
                offsets_active: active,
            };
            on_row(&row);
            metrics.push(row);
            loss_sum = 0.0;
            loss_n = 0;
        }
    }
    Ok(TrainOutcome {
        metrics,
        episodes_completed: completed,
        final_lr: lr,
        aborted,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    /// `1.96 · sample std / √episodes`; zero when undefined.
    pub ci95: f64,
    pub episodes: usize,
    /// False when fewer than two episodes were evaluated.
    pub ci_defined: bool,
    pub per_episode: Vec<f64>,
}

impl EvalResult {
    pub fn from_accuracies(per_episode: Vec<f64>) -> Result<EvalResult> {
        let n = per_episode.len();
        if n == 0 {
            return Err(Error::Contract("evaluation over zero episodes".into()));
        }
        let mean = per_episode.iter().sum::<f64>() / n as f64;
        let (ci95, ci_defined) = if n < 2 {
            (0.0, false)
        } else {
            let var = per_episode.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (1.96 * var.sqrt() / (n as f64).sqrt(), true)
        };
        Ok(EvalResult {
            accuracy: mean,
            ci95,
            episodes: n,
            ci_defined,
            per_episode,
        })
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of queries whose highest score is their own class.
pub fn episode_accuracy(scores: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    let s = scores.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(Error::shape(
            "episode_accuracy",
            format!("scores {s:?} vs {} labels", labels.len()),
        ));
    }
    let hits = scores
        .data()
        .chunks_exact(s[1])
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

fn eval_plan(model: &Model<f32>, d: &Dataset, plan: &EpisodePlan) -> Result<f64> {
    let e = materialize(d, plan)?;
    let scores = model.predict(&e.samples, &e.queries, plan.way, plan.shot)?;
    episode_accuracy(&scores, &e.query_labels)
}

/// Mean per-episode accuracy over `episodes` episodes drawn from `seed`.
///
/// Episodes are drawn up front, so the result does not depend on `workers`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &Model<f32>,
    d: &Dataset,
    way: usize,
    shot: usize,
    queries: usize,
    episodes: usize,
    seed: u64,
    workers: usize,
) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(Error::Config("episodes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plans = (0..episodes)
        .map(|_| sample_plan(d, way, shot, queries, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let workers = workers.clamp(1, episodes);
    let accs: Vec<f64> = if workers == 1 {
        plans
            .iter()
            .map(|p| eval_plan(model, d, p))
            .collect::<Result<_>>()?
    } else {
        let mut slots: Vec<Option<Result<f64>>> = (0..episodes).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let plans = &plans;
                    scope.spawn(move || {
                        (w..plans.len())
                            .step_by(workers)
                            .map(|i| (i, eval_plan(model, d, &plans[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("evaluation worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots
            .into_iter()
            .map(|s| s.expect("every episode evaluated"))
            .collect::<Result<_>>()?
    };
    EvalResult::from_accuracies(accs)
}
