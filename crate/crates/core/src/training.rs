//! Episodic training with a frozen encoder, evaluation and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::archive::Archive;
use crate::autodiff::Graph;
use crate::encoder::{normalize_image, Encoder};
use crate::episodes::{split_folds, Dataset, Episode, EpisodeSampler, Sample};
use crate::error::{FssError, Result};
use crate::loss::segmentation_loss_var;
use crate::mask::Mask;
use crate::metrics::FoldMetrics;
use crate::model::{QueryFeatures, ShotFeatures, UniFss};
use crate::nn::ParamStore;
use crate::patterns::{PatternGroup, PatternTag, RawSupport, SupportField};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub image_size: usize,
    pub max_steps: usize,
    pub rng_seed: u64,
    pub pattern_group: PatternGroup,
    pub n_folds: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub encoder_frozen: bool,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    /// Novel-fold episodes used to pick the best checkpoint (0 disables).
    pub val_episodes: usize,
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 16,
            image_size: 400,
            max_steps: 1000,
            rng_seed: 0,
            pattern_group: PatternGroup::MaskGroup,
            n_folds: 4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            encoder_frozen: true,
            checkpoint_every: 500,
            val_episodes: 100,
            eval_episodes: 1000,
        }
    }
}

fn parse<X: std::str::FromStr>(key: &str, value: &str) -> Result<X> {
    value.trim().parse().map_err(|_| FssError::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 15] = [
        "learning_rate",
        "batch_size",
        "image_size",
        "max_steps",
        "seed",
        "pattern_group",
        "n_folds",
        "beta1",
        "beta2",
        "adam_eps",
        "weight_decay",
        "encoder_frozen",
        "checkpoint_every",
        "val_episodes",
        "eval_episodes",
    ];

    /// Sets one field from its key=value form. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "seed" => self.rng_seed = parse(key, value)?,
            "pattern_group" => self.pattern_group = value.trim().parse().map_err(|e: FssError| FssError::Config(e.to_string()))?,
            "n_folds" => self.n_folds = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "encoder_frozen" => self.encoder_frozen = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "val_episodes" => self.val_episodes = parse(key, value)?,
            "eval_episodes" => self.eval_episodes = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("image_size", self.image_size.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("seed", self.rng_seed.to_string()),
            ("pattern_group", self.pattern_group.to_string()),
            ("n_folds", self.n_folds.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("encoder_frozen", self.encoder_frozen.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("val_episodes", self.val_episodes.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FssError::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return bad("image_size must be a positive multiple of 16");
        }
        if self.n_folds == 0 {
            return bad("n_folds must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("optimizer betas must lie in [0, 1) and eps must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if !self.encoder_frozen {
            return bad("the encoder is always frozen; encoder_frozen=false is not supported");
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay; decay applies to tensors of rank >= 2.
#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: &TrainConfig) -> Self {
        let zeros: Vec<Tensor<T>> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::of(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let decay = if store.get(id).ndim() >= 2 { T::of(self.weight_decay) } else { T::zero() };
            let p = store.get_mut(id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps) + decay * *w;
                *w -= lr * update;
            }
        }
    }
}

/// Support material of `sample`, restricted to what `pattern` consumes.
pub fn raw_support<T: Scalar>(sample: &Sample, pattern: PatternTag) -> RawSupport<T> {
    let mut raw = RawSupport::default();
    for &field in pattern.required_fields() {
        match field {
            SupportField::Image => raw.image = Some(normalize_image(&sample.image)),
            SupportField::Mask => raw.mask = Some(sample.mask.clone()),
            SupportField::Box => raw.bbox = Some(sample.bbox),
            SupportField::ClassName => raw.class_name = Some(sample.class_name.clone()),
        }
    }
    raw
}

/// Encoder outputs for an episode, ready for repeated forward passes.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedEpisode<T: Scalar> {
    pub query: QueryFeatures<T>,
    pub shots: Vec<ShotFeatures<T>>,
    pub gt: Mask,
    pub class_id: u32,
}

pub fn prepare_episode<T: Scalar>(encoder: &dyn Encoder<T>, dataset: &Dataset, episode: &Episode) -> Result<PreparedEpisode<T>> {
    let q = dataset.sample(episode.query);
    let query_image = normalize_image(&q.image);
    let query = QueryFeatures::encode(encoder, &query_image)?;
    let shots = episode
        .supports
        .iter()
        .map(|&s| ShotFeatures::prepare(encoder, &query_image, &query, &raw_support(dataset.sample(s), episode.pattern), episode.pattern))
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedEpisode { query, shots, gt: q.mask.clone(), class_id: episode.class_id })
}

/// Mean loss and gradients of a batch; each episode trains on its first shot.
pub fn batch_gradients<T: Scalar>(model: &UniFss<T>, batch: &[PreparedEpisode<T>]) -> Result<(f64, Vec<Tensor<T>>)> {
    let store = model.params();
    let mut total: Vec<Tensor<T>> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
    let mut loss_sum = 0.0;
    let scale = T::one() / T::of(batch.len() as f64);
    for ep in batch {
        let shot = ep.shots.first().ok_or_else(|| FssError::Validation("episode has no support shot".into()))?;
        let g = Graph::new();
        let p = store.bind(&g);
        let logits = model.forward(&p, &ep.query, shot)?;
        let loss = segmentation_loss_var(logits, &ep.gt)?;
        loss_sum += loss.value().data()[0].as_f64();
        let grads = g.backward(loss);
        for (acc, gr) in total.iter_mut().zip(p.collect_grads(&grads)) {
            acc.add_assign(&gr.scale(scale));
        }
    }
    Ok((loss_sum / batch.len() as f64, total))
}

/// Training state over one model.
pub struct Trainer<T: Scalar> {
    pub config: TrainConfig,
    pub model: UniFss<T>,
    pub optimizer: AdamW<T>,
    pub step: usize,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, model: UniFss<T>) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(model.params(), &config);
        Ok(Self { config, model, optimizer, step: 0, losses: Vec::new() })
    }

    /// One optimizer update on `batch`; a non-finite loss aborts.
    pub fn train_step(&mut self, batch: &[PreparedEpisode<T>]) -> Result<f64> {
        if batch.is_empty() {
            return Err(FssError::Validation("empty batch".into()));
        }
        let (loss, grads) = batch_gradients(&self.model, batch)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(FssError::Divergence { step: self.step, loss });
        }
        self.optimizer.step(self.model.params_mut(), &grads);
        self.step += 1;
        self.losses.push(loss);
        Ok(loss)
    }

    /// One-shot sampler over the base classes of `fold` that [`Trainer::run`] draws from.
    pub fn training_sampler(&self, dataset: &Dataset, fold: usize) -> Result<EpisodeSampler> {
        let (base, _) = split_folds(&dataset.class_ids(), fold, self.config.n_folds)?;
        EpisodeSampler::new(dataset, &base, 1, self.config.rng_seed, self.config.pattern_group.train_pattern(), fold)
    }

    /// Samples base-class episodes of the group's training pattern and trains
    /// for `max_steps`. Checkpoints go to `output` when given.
    pub fn run(&mut self, encoder: &dyn Encoder<T>, dataset: &Dataset, fold: usize, output: Option<&Path>) -> Result<()> {
        let (_, novel) = split_folds(&dataset.class_ids(), fold, self.config.n_folds)?;
        let pattern = self.config.pattern_group.train_pattern();
        let mut sampler = self.training_sampler(dataset, fold)?;
        let mut best = f64::NEG_INFINITY;
        let mut log = String::from("step,loss\n");
        while self.step < self.config.max_steps {
            let batch = sampler
                .take(dataset, self.config.batch_size)
                .iter()
                .map(|e| prepare_episode(encoder, dataset, e))
                .collect::<Result<Vec<_>>>()?;
            let loss = self.train_step(&batch)?;
            log::info!("step {} loss {loss:.5}", self.step);
            writeln!(log, "{},{loss:.6}", self.step).expect("write to string");
            let Some(dir) = output else { continue };
            let every = self.config.checkpoint_every;
            if (every > 0 && self.step % every == 0) || self.step == self.config.max_steps {
                save_checkpoint(&checkpoint_path(dir, self.step), &self.model, &self.config, self.step)?;
                save_checkpoint(&dir.join("last.ckpt"), &self.model, &self.config, self.step)?;
                fs::write(dir.join("loss.csv"), &log)?;
                if self.config.val_episodes > 0 && !novel.is_empty() {
                    let predictor = ModelPredictor { model: &self.model, encoder };
                    let val = evaluate(&predictor, dataset, fold, self.config.n_folds, pattern, 1, self.config.val_episodes, self.config.rng_seed ^ 0x7A1)?;
                    log::info!("step {} validation mIoU {:.4}", self.step, val.metrics.miou());
                    if val.metrics.miou() > best {
                        best = val.metrics.miou();
                        save_checkpoint(&dir.join("best.ckpt"), &self.model, &self.config, self.step)?;
                    }
                }
            }
        }
        if let Some(dir) = output {
            fs::write(dir.join("loss.csv"), &log)?;
        }
        Ok(())
    }
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &UniFss<T>, config: &TrainConfig, step: usize) -> Result<()> {
    let mut a = Archive::new();
    a.set_meta("kind", "unifss-checkpoint");
    a.set_meta("step", step);
    for (k, v) in config.entries() {
        a.set_meta(&format!("train.{k}"), v);
    }
    model.write_to(&mut a);
    a.save(path)
}

/// Model, training configuration and step count of a checkpoint.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(UniFss<T>, TrainConfig, usize)> {
    let a = Archive::load(path)?;
    if a.meta("kind") != Some("unifss-checkpoint") {
        return Err(FssError::Checkpoint(format!("{} is not a model checkpoint", path.display())));
    }
    let step = a.meta("step").and_then(|s| s.parse().ok()).ok_or_else(|| FssError::Checkpoint("missing step".into()))?;
    let mut config = TrainConfig::default();
    for key in TrainConfig::KEYS {
        if let Some(v) = a.meta(&format!("train.{key}")) {
            config.set(key, v).map_err(|e| FssError::Checkpoint(e.to_string()))?;
        }
    }
    Ok((UniFss::from_archive(&a)?, config, step))
}

/// Produces a query mask for an episode.
pub trait Predictor {
    fn predict(&self, dataset: &Dataset, episode: &Episode) -> Result<Mask>;
}

pub struct ModelPredictor<'a, T: Scalar> {
    pub model: &'a UniFss<T>,
    pub encoder: &'a dyn Encoder<T>,
}

impl<T: Scalar> Predictor for ModelPredictor<'_, T> {
    fn predict(&self, dataset: &Dataset, episode: &Episode) -> Result<Mask> {
        let ep = prepare_episode(self.encoder, dataset, episode)?;
        self.model.predict(&ep.query, &ep.shots)
    }
}

/// Returns the ground truth; checks the evaluation harness end to end.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, dataset: &Dataset, episode: &Episode) -> Result<Mask> {
        Ok(dataset.sample(episode.query).mask.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub fold: usize,
    pub pattern: PatternTag,
    pub k: usize,
    pub episodes: usize,
    pub metrics: FoldMetrics,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "fold,pattern,K,class_id,iou";

    /// Per-class rows followed by `miou` and `fbiou` summary rows, without header.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        let prefix = format!("{},{},{}", self.fold, self.pattern, self.k);
        for (c, iou) in self.metrics.class_iou() {
            writeln!(out, "{prefix},{c},{iou:.4}").expect("write to string");
        }
        writeln!(out, "{prefix},miou,{:.4}", self.metrics.miou()).expect("write to string");
        writeln!(out, "{prefix},fbiou,{:.4}", self.metrics.fbiou()).expect("write to string");
        out
    }
}

/// Novel-class episodes of `fold` under `pattern` with `k` shots.
pub fn evaluation_episodes(dataset: &Dataset, fold: usize, n_folds: usize, pattern: PatternTag, k: usize, episodes: usize, seed: u64) -> Result<Vec<Episode>> {
    let (_, novel) = split_folds(&dataset.class_ids(), fold, n_folds)?;
    Ok(EpisodeSampler::new(dataset, &novel, k, seed, pattern, fold)?.take(dataset, episodes))
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    predictor: &dyn Predictor,
    dataset: &Dataset,
    fold: usize,
    n_folds: usize,
    pattern: PatternTag,
    k: usize,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let mut metrics = FoldMetrics::new();
    for e in evaluation_episodes(dataset, fold, n_folds, pattern, k, episodes, seed)? {
        let pred = predictor.predict(dataset, &e)?;
        metrics.accumulate(e.class_id, &pred, &dataset.sample(e.query).mask)?;
    }
    Ok(EvalReport { fold, pattern, k, episodes, metrics })
}

/// Writes reports as one CSV table.
pub fn write_report(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut out = format!("{}\n", EvalReport::CSV_HEADER);
    for r in reports {
        out.push_str(&r.csv_rows());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Path of the periodic checkpoint [`Trainer::run`] writes at `step`.
pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step_{step:06}.ckpt"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip() {
        let mut c = TrainConfig { learning_rate: 1e-3, pattern_group: PatternGroup::ClassAwareGroup, ..TrainConfig::default() };
        c.max_steps = 17;
        let mut back = TrainConfig::default();
        for (k, v) in c.entries() {
            assert!(back.set(k, &v).unwrap());
        }
        assert_eq!(back, c);
        assert!(!back.set("nope", "1").unwrap());
        assert!(back.set("batch_size", "x").is_err());
        assert!(TrainConfig { encoder_frozen: false, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { image_size: 100, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn adamw_zero_lr_is_a_no_op() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::from_fn(&[2, 3], |i| (i[0] + i[1]) as f64 * 0.1));
        store.add("b", Tensor::from_fn(&[3], |i| i[0] as f64));
        let before = store.clone();
        let cfg = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        let mut opt = AdamW::new(&store, &cfg);
        opt.step(&mut store, &[Tensor::ones(&[2, 3]), Tensor::ones(&[3])]);
        for id in store.ids() {
            assert_eq!(store.get(id), before.get(id));
        }
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        store.add("b", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let cfg = TrainConfig { learning_rate: 0.1, ..TrainConfig::default() };
        let mut opt = AdamW::new(&store, &cfg);
        opt.step(&mut store, &[Tensor::new(&[2], vec![3.0, -0.5]).unwrap()]);
        let b = store.get(store.id("b").unwrap());
        assert!((b.data()[0] - 0.9).abs() < 1e-6);
        assert!((b.data()[1] + 0.9).abs() < 1e-6);
    }
}
