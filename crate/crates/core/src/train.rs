//! Training: task-mixture batches, per-modality noising, drop-gated losses,
//! Adam updates and an EMA shadow of the weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{arg, Error, Result};
use crate::features::{FeatureProvider, FileFeatures, RandomConvFeatures};
use crate::interpolant::{blend, sample_time_vector, velocity_target, TaskKind, TaskSpec};
use crate::losses::{alignment_loss, sample_drop_mask, velocity_loss, DropMask};
use crate::modality::{ChannelPlane, ModalityRegistry, ModalitySpec};
use crate::model::{
    patchify_batch, ConditioningInput, GroupedTokens, MmDiT, ModelConfig, ParamChange,
};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::sample::MultiModalSample;
use crate::sampler::gaussian_plane;
use crate::tensor::Matrix;

/// Probability of each task family. The condition share is split evenly
/// over the non-rgb modalities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskMixture {
    pub generate: f64,
    pub condition: f64,
    pub understand: f64,
}

impl Default for TaskMixture {
    fn default() -> Self {
        Self {
            generate: 0.5,
            condition: 0.375,
            understand: 0.125,
        }
    }
}

impl TaskMixture {
    pub fn validate(&self) -> Result<()> {
        let w = [self.generate, self.condition, self.understand];
        if w.iter().any(|v| !(*v >= 0.0)) || ((w.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return arg(format!("task mixture {w:?} must be non-negative and sum to 1"));
        }
        Ok(())
    }

    /// Draws a task (class label left empty).
    pub fn sample<R: Rng + ?Sized>(&self, registry: &ModalityRegistry, rng: &mut R) -> TaskSpec {
        let u: f64 = rng.random();
        let conditions = registry.len() - 1;
        if u < self.generate || conditions == 0 {
            TaskSpec::generate(None)
        } else if u < self.generate + self.condition {
            TaskSpec::condition(1 + rng.random_range(0..conditions), None)
        } else {
            TaskSpec::understand()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSource {
    RandomConv { seed: u64 },
    File { path: String },
}

impl FeatureSource {
    pub fn build(&self, model: &ModelConfig) -> Result<Box<dyn FeatureProvider>> {
        let provider: Box<dyn FeatureProvider> = match self {
            FeatureSource::RandomConv { seed } => Box::new(RandomConvFeatures::new(
                *seed,
                model.image_size,
                model.patch_size,
                model.feature_dim,
            )?),
            FeatureSource::File { path } => Box::new(FileFeatures::load(path.as_ref())?),
        };
        if provider.grid() != model.grid() || provider.dim() != model.feature_dim {
            return Err(Error::Mismatch(format!(
                "feature provider {} gives a {}x{} grid of {} features, model needs {}x{} of {}",
                provider.id(),
                provider.grid(),
                provider.grid(),
                provider.dim(),
                model.grid(),
                model.grid(),
                model.feature_dim
            )));
        }
        Ok(provider)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Samples per forward/backward pass; gradients are accumulated.
    pub micro_batch: usize,
    pub total_steps: u64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    /// Use `min(decay, (1 + k) / (10 + k))` at step `k`.
    pub ema_warmup: bool,
    pub alignment_weight: f64,
    /// Apply the alignment loss on every task, not just generation.
    pub align_all_tasks: bool,
    pub label_dropout: f64,
    pub mixture: TaskMixture,
    pub disable_drop_aug: bool,
    pub disable_task_embedding: bool,
    pub generation_only: bool,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub features: FeatureSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            micro_batch: 8,
            total_steps: 30_000,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            ema_decay: 0.9999,
            ema_warmup: true,
            alignment_weight: crate::losses::DEFAULT_ALIGNMENT_WEIGHT,
            align_all_tasks: false,
            label_dropout: 0.1,
            mixture: TaskMixture::default(),
            disable_drop_aug: false,
            disable_task_embedding: false,
            generation_only: false,
            seed: 0,
            checkpoint_interval: 1000,
            features: FeatureSource::RandomConv { seed: 1 },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.micro_batch == 0 {
            return arg("batch sizes must be positive");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return arg(format!("EMA decay {} outside (0, 1)", self.ema_decay));
        }
        if !(self.learning_rate > 0.0) {
            return arg("learning rate must be positive");
        }
        if !(self.alignment_weight >= 0.0) {
            return arg("alignment weight must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.label_dropout) {
            return arg("label dropout outside [0, 1]");
        }
        self.mixture.validate()
    }
}

/// Adam without weight decay; moments are kept per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    /// Updates applied to each parameter (parameters without a gradient in a
    /// step are skipped entirely).
    pub steps: Vec<u64>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            m: params.iter().map(|(_, _, p)| Matrix::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|(_, _, p)| Matrix::zeros(p.rows(), p.cols())).collect(),
            steps: vec![0; params.len()],
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients, cfg: &TrainConfig) {
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        for id in params.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let k = id.0;
            self.steps[k] += 1;
            let t = self.steps[k] as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let p = params.get_mut(id);
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((pi, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *pi -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Decay used at step `k` (0-based count of completed updates).
pub fn ema_decay_at(decay: f64, k: u64, warmup: bool) -> f64 {
    if warmup {
        decay.min((1.0 + k as f64) / (10.0 + k as f64))
    } else {
        decay
    }
}

/// `shadow <- decay * shadow + (1 - decay) * params`.
pub fn ema_update(shadow: &mut ParamStore, params: &ParamStore, decay: f64) {
    for (id, _, p) in params.iter() {
        let s = shadow.get_mut(id);
        for (si, pi) in s.data_mut().iter_mut().zip(p.data()) {
            *si = decay * *si + (1.0 - decay) * pi;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub task: String,
    /// `(modality, mse)`; `None` when the modality was not supervised.
    pub per_modality: Vec<(String, Option<f64>)>,
    pub velocity: f64,
    pub alignment: f64,
    pub total: f64,
}

impl StepReport {
    pub fn log_line(&self) -> String {
        let mut s = format!("step={} task={}", self.step, self.task);
        for (name, v) in &self.per_modality {
            match v {
                Some(v) => s.push_str(&format!(" {name}={v:.6}")),
                None => s.push_str(&format!(" {name}=-")),
            }
        }
        s.push_str(&format!(
            " align={:.6} total={:.6}",
            self.alignment, self.total
        ));
        s
    }
}

/// How a new modality enters an existing model.
#[derive(Clone, Debug, PartialEq)]
pub enum AdaptMode {
    Append,
    /// Reuse the slot of the named modality.
    Replace { slot: String },
}

pub struct TrainState {
    pub model: MmDiT,
    pub params: ParamStore,
    pub ema: ParamStore,
    pub adam: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub config: TrainConfig,
    provider: Box<dyn FeatureProvider>,
}

/// Per-sample training inputs.
struct Prepared {
    x_t: Vec<ChannelPlane>,
    target: Vec<ChannelPlane>,
    cond: ConditioningInput,
    mask: DropMask,
    features: Option<Matrix>,
}

impl TrainState {
    pub fn new(mut model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.disable_task_embedding {
            model_config.use_task_embedding = false;
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (model, params) = MmDiT::init(model_config, &mut init_rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Self::from_parts(model, params.clone(), params, None, 0, rng, config)
    }

    pub(crate) fn from_parts(
        model: MmDiT,
        params: ParamStore,
        ema: ParamStore,
        adam: Option<Adam>,
        step: u64,
        rng: ChaCha8Rng,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let provider = config.features.build(model.config())?;
        let adam = adam.unwrap_or_else(|| Adam::new(&params));
        Ok(Self {
            model,
            params,
            ema,
            adam,
            step,
            rng,
            config,
            provider,
        })
    }

    pub fn registry(&self) -> &ModalityRegistry {
        self.model.registry()
    }

    pub fn provider(&self) -> &dyn FeatureProvider {
        self.provider.as_ref()
    }

    fn prepare(
        &mut self,
        task: &TaskSpec,
        batch: &[(u64, &MultiModalSample)],
        with_features: bool,
    ) -> Result<Vec<Prepared>> {
        let reg = self.model.registry().clone();
        let num_classes = self.model.config().num_classes;
        let droppable = reg.droppable_flags();
        let mut out = Vec::with_capacity(batch.len());
        for &(id, sample) in batch {
            sample.validate(&reg)?;
            if sample.class_id as usize >= num_classes {
                return arg(format!("class {} outside the model's classes", sample.class_id));
            }
            let x0 = sample.encode(&reg)?;
            let label = match task.kind {
                TaskKind::Understand => None,
                _ if self.rng.random_bool(self.config.label_dropout) => None,
                _ => Some(sample.class_id),
            };
            let times = sample_time_vector(task, reg.len(), &mut self.rng);
            let mut x_t = Vec::with_capacity(reg.len());
            let mut target = Vec::with_capacity(reg.len());
            for (m, plane) in x0.iter().enumerate() {
                let eps = gaussian_plane(plane.height, plane.width, plane.channels, &mut self.rng);
                let (h, w, c) = (plane.height, plane.width, plane.channels);
                x_t.push(ChannelPlane::new(h, w, c, blend(&plane.data, &eps.data, times.get(m))?)?);
                target.push(ChannelPlane::new(h, w, c, velocity_target(&plane.data, &eps.data)?)?);
            }
            let mut mask = if self.config.disable_drop_aug {
                DropMask::keep_all(reg.len())
            } else {
                sample_drop_mask(&mut self.rng, &droppable)
            };
            if let Some(c) = task.condition_modality {
                mask.keep[c] = false;
            }
            let features = if with_features {
                Some(self.provider.patch_features(&x0[0], Some(id))?)
            } else {
                None
            };
            out.push(Prepared {
                x_t,
                target,
                cond: ConditioningInput {
                    times,
                    class_label: label,
                    task_id: task.task_id(),
                },
                mask,
                features,
            });
        }
        Ok(out)
    }

    /// One optimizer step on `batch` (pairs of sample id and sample).
    pub fn train_step(&mut self, batch: &[(u64, &MultiModalSample)]) -> Result<StepReport> {
        if batch.is_empty() {
            return arg("empty batch");
        }
        let reg = self.model.registry().clone();
        let task = if self.config.generation_only {
            TaskSpec::generate(None)
        } else {
            self.config.mixture.sample(&reg, &mut self.rng)
        };
        let lambda = self.config.alignment_weight;
        let align_on = lambda > 0.0 && (task.kind == TaskKind::Generate || self.config.align_all_tasks);
        let prepared = self.prepare(&task, batch, align_on)?;

        let cfg = self.model.config().clone();
        let n = cfg.num_tokens();
        let total_samples = prepared.len() as f64;
        let kept_total: Vec<usize> = (0..reg.len())
            .map(|m| prepared.iter().filter(|p| p.mask.kept(m)).count())
            .collect();

        let mut grads = Gradients::empty(self.params.len());
        let mut per_modality = vec![0.0; reg.len()];
        let mut alignment = 0.0;
        for chunk in prepared.chunks(self.config.micro_batch) {
            let planes = |f: &dyn Fn(&Prepared) -> &Vec<ChannelPlane>| -> Vec<Vec<ChannelPlane>> {
                (0..reg.len())
                    .map(|m| chunk.iter().map(|p| f(p)[m].clone()).collect())
                    .collect()
            };
            let inputs = patchify_batch(&planes(&|p| &p.x_t), &cfg)?;
            let GroupedTokens { tokens: targets, .. } = patchify_batch(&planes(&|p| &p.target), &cfg)?;
            let conds: Vec<ConditioningInput> = chunk.iter().map(|p| p.cond.clone()).collect();
            let masks: Vec<DropMask> = chunk.iter().map(|p| p.mask.clone()).collect();

            let mut tape = Tape::new(&self.params);
            let out = self.model.forward(&mut tape, &inputs, &conds)?;
            let vl = velocity_loss(&mut tape, &out.velocities, &targets, &masks, n)?;
            let mut loss = tape.constant(Matrix::scalar(0.0));
            for (m, term) in vl.terms.iter().enumerate() {
                if let Some(term) = term {
                    let kept_here = masks.iter().filter(|k| k.kept(m)).count();
                    let w = kept_here as f64 / kept_total[m] as f64;
                    per_modality[m] += w * tape.value(*term).item();
                    let scaled = tape.scale(*term, w);
                    loss = tape.add(loss, scaled);
                }
            }
            if align_on {
                let mut feats = Vec::with_capacity(chunk.len() * n * cfg.feature_dim);
                for p in chunk {
                    feats.extend_from_slice(p.features.as_ref().expect("prepared").data());
                }
                let feats = Matrix::from_vec(chunk.len() * n, cfg.feature_dim, feats);
                let z = self.model.project(&mut tape, out.hidden);
                let al = alignment_loss(&mut tape, z, &feats)?;
                let w = chunk.len() as f64 / total_samples;
                alignment += w * tape.value(al.loss).item();
                let scaled = tape.scale(al.loss, lambda * w);
                loss = tape.add(loss, scaled);
            }
            grads.merge(tape.backward(loss));
        }

        let velocity: f64 = per_modality.iter().sum();
        let total = velocity + lambda * alignment;
        let report = StepReport {
            step: self.step,
            task: task.label(&reg),
            per_modality: reg
                .iter()
                .zip(&per_modality)
                .zip(&kept_total)
                .map(|((s, v), k)| (s.name.clone(), (*k > 0).then_some(*v)))
                .collect(),
            velocity,
            alignment,
            total,
        };
        if !total.is_finite() || !grads.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                task: report.task.clone(),
                detail: report.log_line(),
            });
        }
        self.adam.update(&mut self.params, &grads, &self.config);
        let decay = ema_decay_at(self.config.ema_decay, self.step, self.config.ema_warmup);
        ema_update(&mut self.ema, &self.params, decay);
        self.step += 1;
        Ok(report)
    }

    /// Runs `steps` steps on batches drawn uniformly (with replacement) from
    /// `dataset`; stops early when `stop` returns true.
    pub fn train(
        &mut self,
        dataset: &[MultiModalSample],
        steps: u64,
        stop: &dyn Fn() -> bool,
        on_step: &mut dyn FnMut(&TrainState, &StepReport) -> Result<()>,
    ) -> Result<u64> {
        if dataset.is_empty() {
            return arg("empty dataset");
        }
        let mut done = 0;
        while done < steps && !stop() {
            let idx: Vec<usize> = (0..self.config.batch_size)
                .map(|_| self.rng.random_range(0..dataset.len()))
                .collect();
            let batch: Vec<(u64, &MultiModalSample)> =
                idx.iter().map(|&i| (i as u64, &dataset[i])).collect();
            let report = self.train_step(&batch)?;
            done += 1;
            on_step(self, &report)?;
        }
        Ok(done)
    }

    /// Brings the EMA shadow and optimizer moments in line with parameter
    /// surgery.
    fn reconcile(&mut self, changes: &[(ParamId, ParamChange)]) {
        for &(id, change) in changes {
            let p = self.params.get(id).clone();
            let zeros = Matrix::zeros(p.rows(), p.cols());
            match change {
                ParamChange::RowsAppended { old_rows } => {
                    let tail = Matrix::from_vec(
                        p.rows() - old_rows,
                        p.cols(),
                        p.data()[old_rows * p.cols()..].to_vec(),
                    );
                    let ema = self.ema.get(id).vstack(&tail);
                    self.ema.reshape(id, ema);
                    let pad = Matrix::zeros(p.rows() - old_rows, p.cols());
                    self.adam.m[id.0] = self.adam.m[id.0].vstack(&pad);
                    self.adam.v[id.0] = self.adam.v[id.0].vstack(&pad);
                }
                ParamChange::Reinitialized => {
                    self.ema.reshape(id, p);
                    self.adam.m[id.0] = zeros.clone();
                    self.adam.v[id.0] = zeros;
                    self.adam.steps[id.0] = 0;
                }
                ParamChange::Added => {
                    let name = self.params.name(id).to_string();
                    let eid = self.ema.insert(name, p);
                    assert_eq!(eid, id, "EMA store out of step with parameters");
                    self.adam.m.push(zeros.clone());
                    self.adam.v.push(zeros);
                    self.adam.steps.push(0);
                }
            }
        }
    }

    /// Adds or swaps in a modality, then fine-tunes on `dataset` (which must
    /// carry the resulting registry) for `steps` steps.
    pub fn adapt_modality(
        &mut self,
        mode: &AdaptMode,
        spec: ModalitySpec,
        dataset_registry: &ModalityRegistry,
        dataset: &[MultiModalSample],
        steps: u64,
        stop: &dyn Fn() -> bool,
        on_step: &mut dyn FnMut(&TrainState, &StepReport) -> Result<()>,
    ) -> Result<u64> {
        let mut expected = self.registry().clone();
        let slot = match mode {
            AdaptMode::Append => {
                expected.append(spec.clone())?;
                None
            }
            AdaptMode::Replace { slot } => {
                let i = expected.require(slot)?;
                expected.replace(i, spec.clone())?;
                Some(i)
            }
        };
        if &expected != dataset_registry {
            return Err(Error::Mismatch(
                "adaptation dataset does not carry the adapted modality layout".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0xada9);
        rng.set_stream(self.step);
        let changes = match slot {
            None => self.model.append_modality(&mut self.params, spec, &mut rng)?,
            Some(i) => self.model.replace_modality(&mut self.params, i, spec, &mut rng)?,
        };
        self.reconcile(&changes);
        self.train(dataset, steps, stop, on_step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_dataset;

    fn two_modality() -> ModalityRegistry {
        ModalityRegistry::new(vec![ModalitySpec::rgb(), ModalitySpec::depth()]).unwrap()
    }

    fn micro(reg: ModalityRegistry) -> ModelConfig {
        ModelConfig {
            num_classes: crate::synth::NUM_SCENE_CLASSES as usize,
            ..ModelConfig::micro(reg)
        }
    }

    fn micro_train() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            micro_batch: 3,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mixture_frequencies() {
        let reg = ModalityRegistry::standard();
        let mix = TaskMixture::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; 5];
        for _ in 0..40_000 {
            counts[mix.sample(&reg, &mut rng).task_id()] += 1;
        }
        let f = |i: usize| counts[i] as f64 / 40_000.0;
        assert!((f(0) - 0.5).abs() < 0.01);
        assert!((f(1) - 0.125).abs() < 0.01);
        for c in 2..5 {
            assert!((f(c) - 0.125).abs() < 0.01);
        }
        assert!(TaskMixture { generate: 0.5, condition: 0.2, understand: 0.2 }.validate().is_err());
    }

    #[test]
    fn ema_fixed_point_and_single_step() {
        let mut p = ParamStore::new();
        let id = p.insert("w", Matrix::from_vec(1, 2, vec![1.0, -2.0]));
        let mut shadow = p.clone();
        for _ in 0..5 {
            ema_update(&mut shadow, &p, 0.9);
        }
        assert_eq!(shadow, p);
        let s = Matrix::from_vec(1, 2, vec![0.5, 0.25]);
        shadow.set(id, s.clone());
        ema_update(&mut shadow, &p, 0.9999);
        for k in 0..2 {
            assert_eq!(shadow.get(id).data()[k], 0.9999 * s.data()[k] + (1.0 - 0.9999) * p.get(id).data()[k]);
        }
        assert_eq!(ema_decay_at(0.9999, 0, true), 0.1);
        assert_eq!(ema_decay_at(0.9999, 0, false), 0.9999);
        assert_eq!(ema_decay_at(0.5, 100, true), 0.5);
    }

    #[test]
    fn zero_alignment_weight_reports_zero() {
        let reg = two_modality();
        let data = generate_dataset(4, 0, 4, &reg).unwrap();
        let cfg = TrainConfig {
            alignment_weight: 0.0,
            generation_only: true,
            ..micro_train()
        };
        let mut state = TrainState::new(micro(reg), cfg).unwrap();
        let batch: Vec<_> = data.iter().enumerate().map(|(i, s)| (i as u64, s)).collect();
        let r = state.train_step(&batch).unwrap();
        assert_eq!(r.alignment, 0.0);
        assert_eq!(r.total, r.velocity);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn micro_batching_matches_full_batch() {
        let reg = two_modality();
        let data = generate_dataset(5, 1, 4, &reg).unwrap();
        let batch: Vec<_> = data.iter().enumerate().map(|(i, s)| (i as u64, s)).collect();
        let run = |chunk| {
            let cfg = TrainConfig {
                micro_batch: chunk,
                generation_only: true,
                ..micro_train()
            };
            let mut state = TrainState::new(micro(reg.clone()), cfg).unwrap();
            let r = state.train_step(&batch).unwrap();
            (r, state.params)
        };
        let (a, pa) = run(5);
        let (b, pb) = run(2);
        assert!((a.total - b.total).abs() < 1e-12);
        for ((_, _, x), (_, _, y)) in pa.iter().zip(pb.iter()) {
            assert!(x.max_abs_diff(y) < 1e-9);
        }
    }

    #[test]
    fn condition_modality_is_not_supervised() {
        let reg = two_modality();
        let data = generate_dataset(4, 2, 4, &reg).unwrap();
        let cfg = TrainConfig {
            mixture: TaskMixture { generate: 0.0, condition: 1.0, understand: 0.0 },
            ..micro_train()
        };
        let mut state = TrainState::new(micro(reg), cfg).unwrap();
        let batch: Vec<_> = data.iter().enumerate().map(|(i, s)| (i as u64, s)).collect();
        let r = state.train_step(&batch).unwrap();
        assert_eq!(r.task, "cond-depth");
        assert_eq!(r.per_modality[1].1, None);
        assert!(r.per_modality[0].1.is_some());
        assert_eq!(r.alignment, 0.0);
    }

    #[test]
    fn training_is_reproducible() {
        let reg = two_modality();
        let data = generate_dataset(6, 3, 4, &reg).unwrap();
        let run = || {
            let mut state = TrainState::new(micro(reg.clone()), micro_train()).unwrap();
            let mut losses = Vec::new();
            state
                .train(&data, 5, &|| false, &mut |_, r| {
                    losses.push(r.total);
                    Ok(())
                })
                .unwrap();
            losses
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn append_adaptation_keeps_old_values_and_trains() {
        let reg = two_modality();
        let mut state = TrainState::new(micro(reg.clone()), micro_train()).unwrap();
        let before = state.params.clone();
        let mut grown = reg.clone();
        grown.append(ModalitySpec::edge(1)).unwrap();
        let data = generate_dataset(4, 4, 4, &grown).unwrap();

        assert!(state
            .adapt_modality(&AdaptMode::Append, ModalitySpec::edge(1), &reg, &data, 0, &|| false, &mut |_, _| Ok(()))
            .is_err());
        state
            .adapt_modality(&AdaptMode::Append, ModalitySpec::edge(1), &grown, &data, 0, &|| false, &mut |_, _| Ok(()))
            .unwrap();
        for m in 0..2 {
            for id in state.model.head_params(m) {
                assert_eq!(state.params.get(id), before.get(id));
            }
        }
        assert!(state.params.congruent(&state.ema));
        let steps = state
            .train(&data, 3, &|| false, &mut |_, r| {
                assert_eq!(r.per_modality.len(), 3);
                Ok(())
            })
            .unwrap();
        assert_eq!(steps, 3);
    }

    #[test]
    fn task_embedding_ablation_zeroes_it() {
        let cfg = TrainConfig {
            disable_task_embedding: true,
            ..micro_train()
        };
        let state = TrainState::new(micro(two_modality()), cfg).unwrap();
        assert!(!state.model.config().use_task_embedding);
    }
}
