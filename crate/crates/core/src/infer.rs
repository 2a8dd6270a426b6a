//! The three inference regimes plus two-stage translation, on top of the
//! sampler.

use rand::Rng;

use crate::error::{arg, Result};
use crate::interpolant::{ClassLabel, TaskSpec};
use crate::modality::{ChannelPlane, DepthRange, ModalityRegistry};
use crate::model::MmDiT;
use crate::params::ParamStore;
use crate::sample::MultiModalSample;
use crate::sampler::{decode_batch, sample, ConditionClamp, ModelField, SamplerConfig, State};

/// Mean per-sample depth min and max; used to decode generated depth, whose
/// per-image range is otherwise unknown.
pub fn canonical_depth_range(samples: &[MultiModalSample]) -> Result<DepthRange> {
    if samples.is_empty() {
        return arg("no samples to take a depth range from");
    }
    let n = samples.len() as f64;
    let min = samples.iter().map(|s| s.depth_range.min as f64).sum::<f64>() / n;
    let max = samples.iter().map(|s| s.depth_range.max as f64).sum::<f64>() / n;
    Ok(DepthRange {
        min: min as f32,
        max: max as f32,
    })
}

/// One sample's planes out of a batched state.
pub fn planes_of(state: &State, b: usize) -> Vec<ChannelPlane> {
    state.iter().map(|m| m[b].clone()).collect()
}

pub struct Inference<'a> {
    pub model: &'a MmDiT,
    /// Normally the EMA weights.
    pub params: &'a ParamStore,
    pub sampler: SamplerConfig,
    pub depth_range: DepthRange,
}

impl Inference<'_> {
    pub fn registry(&self) -> &ModalityRegistry {
        self.model.registry()
    }

    fn run<R: Rng + ?Sized>(
        &self,
        task: TaskSpec,
        labels: &[ClassLabel],
        clamps: &[ConditionClamp],
        rng: &mut R,
    ) -> Result<State> {
        let task = self.sampler.guide(task);
        let cfg = self.model.config();
        for l in labels {
            TaskSpec { class_label: *l, ..task.clone() }.validate(self.registry(), cfg.num_classes)?;
        }
        let field = ModelField {
            model: self.model,
            params: self.params,
        };
        sample(&field, &task, &self.sampler, labels, clamps, cfg.image_size, rng)
    }

    /// All modalities from noise, one sample per label.
    pub fn generate<R: Rng + ?Sized>(&self, labels: &[ClassLabel], rng: &mut R) -> Result<State> {
        self.run(TaskSpec::generate(None), labels, &[], rng)
    }

    /// Everything else given one clamped modality per sample.
    pub fn condgen<R: Rng + ?Sized>(
        &self,
        modality: usize,
        conditions: &[ChannelPlane],
        labels: &[ClassLabel],
        rng: &mut R,
    ) -> Result<State> {
        if conditions.len() != labels.len() {
            return arg(format!("{} conditions for {} labels", conditions.len(), labels.len()));
        }
        let clamps = conditions
            .iter()
            .map(|c| ConditionClamp::draw(modality, c.clone(), rng))
            .collect::<Result<Vec<_>>>()?;
        self.run(TaskSpec::condition(modality, None), labels, &clamps, rng)
    }

    /// Dense modalities predicted from rgb.
    pub fn understand<R: Rng + ?Sized>(&self, rgb: &[ChannelPlane], rng: &mut R) -> Result<State> {
        let clamps = rgb
            .iter()
            .map(|c| ConditionClamp::draw(0, c.clone(), rng))
            .collect::<Result<Vec<_>>>()?;
        self.run(TaskSpec::understand(), &vec![None; rgb.len()], &clamps, rng)
    }

    /// Understand `rgb` into modality `via`, then generate new rgb from it.
    /// Returns both states; the intermediate depends only on `understand_rng`.
    pub fn translate<R: Rng + ?Sized, S: Rng + ?Sized>(
        &self,
        rgb: &[ChannelPlane],
        via: usize,
        labels: &[ClassLabel],
        understand_rng: &mut R,
        generate_rng: &mut S,
    ) -> Result<(State, State)> {
        if via == 0 || via >= self.registry().len() {
            return arg("translation goes through a non-rgb modality");
        }
        let first = self.understand(rgb, understand_rng)?;
        let out = self.condgen(via, &first[via], labels, generate_rng)?;
        Ok((first, out))
    }

    pub fn decode(&self, state: &State, labels: &[ClassLabel]) -> Result<Vec<MultiModalSample>> {
        decode_batch(state, self.registry(), labels, &[self.depth_range])
    }
}
