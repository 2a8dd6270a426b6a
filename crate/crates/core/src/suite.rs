//! The evaluation suite run on a trained model: class probe, cross-modal
//! consistency, toy-Fréchet, understanding accuracy and conditioned
//! generation fidelity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{arg, Error, Result};
use crate::eval::{
    cross_modal_consistency, depth_metrics, feature_stats, frechet_distance, seg_pixel_accuracy,
    MetricReport, NearestCentroid,
};
use crate::features::{FeatureProvider, RandomConvFeatures};
use crate::infer::Inference;
use crate::interpolant::ClassLabel;
use crate::modality::ChannelPlane;
use crate::model::ModelConfig;
use crate::sample::MultiModalSample;
use crate::sampler::State;
use crate::synth::NUM_SCENE_CLASSES;

/// Seed of the evaluation feature extractor; differs from the alignment
/// extractor's default.
pub const EVAL_FEATURE_SEED: u64 = 7919;
pub const EVAL_FEATURE_DIM: usize = 64;
const CHUNK: usize = 16;

pub fn eval_provider(model: &ModelConfig) -> Result<RandomConvFeatures> {
    RandomConvFeatures::new(EVAL_FEATURE_SEED, model.image_size, model.patch_size, EVAL_FEATURE_DIM)
}

/// Position-free image descriptor: per-channel mean and standard deviation of
/// the extractor's patch features.
pub fn class_features(provider: &dyn FeatureProvider, rgb: &ChannelPlane) -> Result<Vec<f64>> {
    let f = provider.patch_features(rgb, None)?;
    let n = f.rows() as f64;
    let mut mean = vec![0.0; f.cols()];
    let mut sq = vec![0.0; f.cols()];
    for r in 0..f.rows() {
        for (c, v) in f.row(r).iter().enumerate() {
            mean[c] += v / n;
            sq[c] += v * v / n;
        }
    }
    let std: Vec<f64> = mean.iter().zip(&sq).map(|(m, s)| (s - m * m).max(0.0).sqrt()).collect();
    Ok(mean.into_iter().chain(std).collect())
}

fn concat(parts: Vec<State>) -> Result<State> {
    let mut it = parts.into_iter();
    let mut out = it.next().ok_or_else(|| Error::Argument("nothing sampled".into()))?;
    for p in it {
        for (m, planes) in p.into_iter().enumerate() {
            out[m].extend(planes);
        }
    }
    Ok(out)
}

pub fn generate_many(inf: &Inference, labels: &[ClassLabel], seed: u64) -> Result<State> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    concat(labels.chunks(CHUNK).map(|l| inf.generate(l, &mut rng)).collect::<Result<_>>()?)
}

pub fn understand_many(inf: &Inference, rgb: &[ChannelPlane], seed: u64) -> Result<State> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    concat(rgb.chunks(CHUNK).map(|c| inf.understand(c, &mut rng)).collect::<Result<_>>()?)
}

pub fn condgen_many(inf: &Inference, modality: usize, cond: &[ChannelPlane], seed: u64) -> Result<State> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    concat(
        cond.chunks(CHUNK)
            .map(|c| inf.condgen(modality, c, &vec![None; c.len()], &mut rng))
            .collect::<Result<_>>()?,
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean AbsRel of understood depth (scale-shift aligned) over `val`.
pub fn understand_abs_rel(inf: &Inference, val: &[MultiModalSample], seed: u64) -> Result<f64> {
    let reg = inf.registry();
    let di = reg.require("depth")?;
    let rgb = val.iter().map(|s| Ok(s.encode(reg)?[0].clone())).collect::<Result<Vec<_>>>()?;
    let out = inf.decode(&understand_many(inf, &rgb, seed)?, &vec![None; val.len()])?;
    let mut total = 0.0;
    for (p, g) in out.iter().zip(val) {
        total += depth_metrics(&p.planes[di], &g.planes[di], None, true)?.abs_rel;
    }
    Ok(total / val.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub samples: usize,
    /// Generated samples classified back to their requested class.
    pub class_accuracy: f64,
    /// Median over generated samples of the depth-derived vs predicted
    /// normal median angle.
    pub normal_median_deg: f64,
    pub boundary_agreement: f64,
    /// Toy-Fréchet between generated and held-out rgb.
    pub toy_frechet: f64,
    pub abs_rel: f64,
    pub delta1: f64,
    pub rmse: f64,
    pub seg_accuracy: f64,
    /// Depth-conditioned generation: clamped plane vs its input.
    pub clamp_mae: f64,
    /// Depth-conditioned generation: rgb difference between two seeds.
    pub rgb_diversity: f64,
}

impl SuiteReport {
    pub fn to_metrics(&self) -> MetricReport {
        let mut r = MetricReport::default();
        r.note("toy_frechet uses a frozen random-feature extractor; compare only within this tool");
        r.set("samples", self.samples as f64);
        r.set("generate.class_accuracy", self.class_accuracy);
        r.set("generate.normal_median_deg", self.normal_median_deg);
        r.set("generate.boundary_agreement", self.boundary_agreement);
        r.set("generate.toy_frechet", self.toy_frechet);
        r.set("understand.depth_abs_rel", self.abs_rel);
        r.set("understand.depth_delta1", self.delta1);
        r.set("understand.depth_rmse", self.rmse);
        r.set("understand.seg_accuracy", self.seg_accuracy);
        r.set("condgen_depth.clamp_mae", self.clamp_mae);
        r.set("condgen_depth.rgb_diversity", self.rgb_diversity);
        r
    }
}

/// Runs the suite on `n` generated and `n` held-out samples. `train` supplies
/// the class probe's reference renders.
pub fn run_suite(
    inf: &Inference,
    train: &[MultiModalSample],
    val: &[MultiModalSample],
    n: usize,
    seed: u64,
) -> Result<SuiteReport> {
    if n < 2 || val.len() < 2 || train.is_empty() {
        return arg("the suite needs n >= 2, two held-out samples and training renders");
    }
    let reg = inf.registry().clone();
    let (di, si) = (reg.require("depth")?, reg.require("seg")?);
    let provider = eval_provider(inf.model.config())?;

    let labelled = train
        .iter()
        .map(|s| Ok((s.class_id, class_features(&provider, &s.encode(&reg)?[0])?)))
        .collect::<Result<Vec<_>>>()?;
    let probe = NearestCentroid::fit(&labelled)?;
    let classes = (inf.model.config().num_classes as u32).min(NUM_SCENE_CLASSES);
    let labels: Vec<ClassLabel> = (0..n).map(|i| Some(i as u32 % classes)).collect();
    let generated = generate_many(inf, &labels, seed)?;
    let mut hits = 0;
    for (b, l) in labels.iter().enumerate() {
        if Some(probe.predict(&class_features(&provider, &generated[0][b])?)) == *l {
            hits += 1;
        }
    }

    let mut medians = Vec::new();
    let mut agreement = 0.0;
    for s in inf.decode(&generated, &labels)? {
        let c = cross_modal_consistency(&s, &reg)?;
        medians.extend(c.normal_median_deg);
        agreement += c.boundary_agreement / n as f64;
    }

    let val_rgb = val.iter().map(|s| Ok(s.encode(&reg)?[0].clone())).collect::<Result<Vec<_>>>()?;
    let toy_frechet = frechet_distance(
        &feature_stats(&generated[0], &provider)?,
        &feature_stats(&val_rgb, &provider)?,
    )?;

    let held = &val[..n.min(val.len())];
    let k = held.len() as f64;
    let predicted = inf.decode(&understand_many(inf, &val_rgb[..held.len()], seed + 1)?, &vec![None; held.len()])?;
    let (mut abs_rel, mut delta1, mut rmse, mut seg_acc) = (0.0, 0.0, 0.0, 0.0);
    for (p, g) in predicted.iter().zip(held) {
        let m = depth_metrics(&p.planes[di], &g.planes[di], None, true)?;
        abs_rel += m.abs_rel / k;
        delta1 += m.delta1 / k;
        rmse += m.rmse / k;
        seg_acc += seg_pixel_accuracy(&p.planes[si], &g.planes[si])? / k;
    }

    let depth_in = held.iter().map(|s| Ok(s.encode(&reg)?[di].clone())).collect::<Result<Vec<_>>>()?;
    let a = condgen_many(inf, di, &depth_in, seed + 2)?;
    let b = condgen_many(inf, di, &depth_in, seed + 3)?;
    let clamp_mae = (0..held.len()).map(|i| a[di][i].mean_abs_diff(&depth_in[i])).sum::<f64>() / k;
    let rgb_diversity = (0..held.len()).map(|i| a[0][i].mean_abs_diff(&b[0][i])).sum::<f64>() / k;

    Ok(SuiteReport {
        samples: n,
        class_accuracy: hits as f64 / n as f64,
        normal_median_deg: median(medians),
        boundary_agreement: agreement,
        toy_frechet,
        abs_rel,
        delta1,
        rmse,
        seg_accuracy: seg_acc,
        clamp_mae,
        rgb_diversity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modality::ModalityRegistry;
    use crate::synth::generate_dataset;

    #[test]
    fn class_features_separate_primitive_kinds() {
        let reg = ModalityRegistry::standard();
        let model = ModelConfig::desk();
        let p = eval_provider(&model).unwrap();
        let data = generate_dataset(200, 5, 32, &reg).unwrap();
        let labelled: Vec<(u32, Vec<f64>)> = data
            .iter()
            .map(|s| (s.class_id / 5, class_features(&p, &s.encode(&reg).unwrap()[0]).unwrap()))
            .collect();
        let (fit, test) = labelled.split_at(150);
        let probe = NearestCentroid::fit(fit).unwrap();
        assert!(probe.accuracy(test) > 0.6, "{}", probe.accuracy(test));
    }
}
