//! Evaluation metrics: Fréchet feature distance, depth/normal/seg accuracy,
//! cross-modal consistency and a nearest-centroid class probe.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{arg, Error, Result};
use crate::features::FeatureProvider;
use crate::modality::{ChannelPlane, ModalityRegistry, Plane};
use crate::sample::MultiModalSample;
use crate::synth::{derive_normals_from_depth, edges_from_seg, pixel_size};

/// Eigenvalues below `-EIGEN_TOLERANCE * scale` are treated as a failure
/// rather than clipped.
pub const EIGEN_TOLERANCE: f64 = 1e-6;

/// A 4-neighbour depth jump above this (scene units) marks a discontinuity.
pub const DEPTH_DISCONTINUITY: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl FeatureStats {
    /// Mean and unbiased covariance of `vectors`.
    pub fn from_vectors(vectors: &[Vec<f64>]) -> Result<Self> {
        if vectors.len() < 2 {
            return arg(format!("need at least 2 samples, got {}", vectors.len()));
        }
        let dim = vectors[0].len();
        if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
            return arg("feature vectors must share a non-zero dimension");
        }
        let n = vectors.len();
        let mut mean = DVector::zeros(dim);
        for v in vectors {
            mean += DVector::from_column_slice(v);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(dim, dim);
        for v in vectors {
            let d = DVector::from_column_slice(v) - &mean;
            cov += &d * d.transpose();
        }
        cov /= (n - 1) as f64;
        Ok(Self {
            mean,
            cov,
            count: n,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Pooled rgb features of each sample, then their statistics.
pub fn feature_stats(rgb: &[ChannelPlane], provider: &dyn FeatureProvider) -> Result<FeatureStats> {
    let vectors = rgb
        .iter()
        .map(|p| provider.pooled(p, None))
        .collect::<Result<Vec<_>>>()?;
    FeatureStats::from_vectors(&vectors)
}

fn symmetric_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::try_new(sym, 1e-14, 10_000).ok_or_else(|| {
        Error::Numerical(format!(
            "eigendecomposition of {what} ({}x{}) did not converge",
            m.nrows(),
            m.ncols()
        ))
    })
}

fn clipped(values: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let scale = values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if let Some(bad) = values.iter().find(|v| **v < -EIGEN_TOLERANCE * scale) {
        return Err(Error::Numerical(format!(
            "{what} has eigenvalue {bad:e}, below the clipping tolerance"
        )));
    }
    Ok(values.map(|v| v.max(0.0)))
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, with the trace of
/// the square root taken on `S_a^(1/2) S_b S_a^(1/2)`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return arg(format!("feature dims differ: {} vs {}", a.dim(), b.dim()));
    }
    let ea = symmetric_eigen(&a.cov, "first covariance")?;
    let la = clipped(&ea.eigenvalues, "first covariance")?;
    let sqrt_a = &ea.eigenvectors * DMatrix::from_diagonal(&la.map(f64::sqrt)) * ea.eigenvectors.transpose();
    let inner = &sqrt_a * &b.cov * &sqrt_a;
    let ei = symmetric_eigen(&inner, "covariance product")?;
    let li = clipped(&ei.eigenvalues, "covariance product")?;
    let tr_sqrt: f64 = li.iter().map(|v| v.sqrt()).sum();
    let d = &a.mean - &b.mean;
    let value = d.dot(&d) + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub delta1: f64,
    pub rmse: f64,
    pub count: usize,
}

/// Least-squares `(scale, shift)` mapping `pred` onto `gt`.
pub fn scale_shift(pred: &[f64], gt: &[f64]) -> (f64, f64) {
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mg = gt.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        cov += (p - mp) * (g - mg);
        var += (p - mp) * (p - mp);
    }
    if var == 0.0 {
        return (0.0, mg);
    }
    let s = cov / var;
    (s, mg - s * mp)
}

/// AbsRel, strict δ1 (< 1.25) and RMSE over `valid` pixels (all pixels when
/// `None`), optionally after scale-shift alignment.
pub fn depth_metrics(pred: &Plane, gt: &Plane, valid: Option<&[bool]>, align: bool) -> Result<DepthMetrics> {
    if (pred.height, pred.width, pred.channels) != (gt.height, gt.width, gt.channels) || gt.channels != 1 {
        return arg("depth planes must be single-channel and the same shape");
    }
    if let Some(v) = valid {
        if v.len() != gt.data.len() {
            return arg("valid mask size differs from the depth plane");
        }
    }
    let keep = |i: usize| valid.is_none_or(|v| v[i]);
    let mut p = Vec::new();
    let mut g = Vec::new();
    for i in 0..gt.data.len() {
        if keep(i) {
            let gv = gt.data[i] as f64;
            if !(gv > 0.0) {
                return arg(format!("ground-truth depth {gv} at pixel {i} is not positive"));
            }
            p.push(pred.data[i] as f64);
            g.push(gv);
        }
    }
    if g.is_empty() {
        return arg("empty valid mask");
    }
    if align {
        let (s, b) = scale_shift(&p, &g);
        p.iter_mut().for_each(|v| *v = s * *v + b);
    }
    let n = g.len() as f64;
    let mut abs_rel = 0.0;
    let mut sq = 0.0;
    let mut within = 0usize;
    for (pv, gv) in p.iter().zip(&g) {
        abs_rel += (pv - gv).abs() / gv;
        sq += (pv - gv) * (pv - gv);
        if *pv > 0.0 && (pv / gv).max(gv / pv) < 1.25 {
            within += 1;
        }
    }
    Ok(DepthMetrics {
        abs_rel: abs_rel / n,
        delta1: within as f64 / n,
        rmse: (sq / n).sqrt(),
        count: g.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AngularError {
    pub mean_deg: f64,
    pub median_deg: f64,
}

fn angle_deg(a: &[f32], b: &[f32]) -> f64 {
    let na = a.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 90.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn angular_stats(errs: Vec<f64>) -> AngularError {
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    AngularError {
        mean_deg: mean,
        median_deg: median(errs),
    }
}

/// Per-pixel angle between normal fields, in degrees.
pub fn normal_angular_error(pred: &Plane, gt: &Plane) -> Result<AngularError> {
    if (pred.height, pred.width) != (gt.height, gt.width) || pred.channels != 3 || gt.channels != 3 {
        return arg("normal planes must be 3-channel and the same size");
    }
    let errs = pred
        .data
        .chunks(3)
        .zip(gt.data.chunks(3))
        .map(|(a, b)| angle_deg(a, b))
        .collect();
    Ok(angular_stats(errs))
}

/// Fraction of pixels whose label matches.
pub fn seg_pixel_accuracy(pred: &Plane, gt: &Plane) -> Result<f64> {
    if (pred.height, pred.width, pred.channels) != (gt.height, gt.width, gt.channels) {
        return arg("segmentation planes differ in shape");
    }
    let hits = pred
        .data
        .iter()
        .zip(&gt.data)
        .filter(|(a, b)| a.round() == b.round())
        .count();
    Ok(hits as f64 / gt.data.len() as f64)
}

/// Pixels with a 4-neighbour depth jump above [`DEPTH_DISCONTINUITY`].
pub fn depth_discontinuities(depth: &Plane) -> Vec<bool> {
    let (h, w) = (depth.height, depth.width);
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            for (ny, nx) in [(y, x + 1), (y + 1, x)] {
                if ny < h && nx < w {
                    let dz = (depth.at(y, x) as f64 - depth.at(ny, nx) as f64).abs();
                    if dz > DEPTH_DISCONTINUITY {
                        out[y * w + x] = true;
                        out[ny * w + nx] = true;
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Consistency {
    /// Median angle between stored normals and normals derived from depth,
    /// over pixels whose 3x3 neighbourhood carries one label; `None` when
    /// there are no such pixels.
    pub normal_median_deg: Option<f64>,
    /// Fraction of segmentation-boundary pixels within one pixel of a depth
    /// discontinuity (1 when there are no boundaries).
    pub boundary_agreement: f64,
    pub interior_pixels: usize,
    pub boundary_pixels: usize,
}

pub fn consistency_of_planes(depth: &Plane, normal: &Plane, seg: &Plane) -> Result<Consistency> {
    let (h, w) = (depth.height, depth.width);
    for p in [normal, seg] {
        if (p.height, p.width) != (h, w) {
            return arg("consistency planes differ in size");
        }
    }
    let derived = derive_normals_from_depth(depth, pixel_size(w));
    let label = |y: usize, x: usize| seg.at(y, x).round();
    let mut errs = Vec::new();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let l = label(y, x);
            let uniform = (y - 1..=y + 1).all(|yy| (x - 1..=x + 1).all(|xx| label(yy, xx) == l));
            if uniform {
                errs.push(angle_deg(derived.pixel(y, x), normal.pixel(y, x)));
            }
        }
    }
    let interior = errs.len();
    let normal_median_deg = (!errs.is_empty()).then(|| median(errs));

    let edges = edges_from_seg(seg);
    let jumps = depth_discontinuities(depth);
    let mut boundary = 0usize;
    let mut agreeing = 0usize;
    for y in 0..h {
        for x in 0..w {
            if edges.at(y, x) == 0.0 {
                continue;
            }
            boundary += 1;
            let near = (y.saturating_sub(1)..=(y + 1).min(h - 1))
                .any(|yy| (x.saturating_sub(1)..=(x + 1).min(w - 1)).any(|xx| jumps[yy * w + xx]));
            if near {
                agreeing += 1;
            }
        }
    }
    Ok(Consistency {
        normal_median_deg,
        interior_pixels: interior,
        boundary_agreement: if boundary == 0 {
            1.0
        } else {
            agreeing as f64 / boundary as f64
        },
        boundary_pixels: boundary,
    })
}

/// Checks that a sample's depth, normal and segmentation agree.
pub fn cross_modal_consistency(sample: &MultiModalSample, registry: &ModalityRegistry) -> Result<Consistency> {
    let get = |name: &str| {
        sample
            .plane(registry, name)
            .ok_or_else(|| Error::Argument(format!("sample has no {name} plane")))
    };
    consistency_of_planes(get("depth")?, get("normal")?, get("seg")?)
}

/// Nearest-centroid classifier over arbitrary feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct NearestCentroid {
    pub centroids: Vec<(u32, Vec<f64>)>,
}

impl NearestCentroid {
    pub fn fit(labelled: &[(u32, Vec<f64>)]) -> Result<Self> {
        let mut sums: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
        let dim = labelled.first().map(|(_, v)| v.len()).unwrap_or(0);
        if dim == 0 {
            return arg("no training vectors");
        }
        for (c, v) in labelled {
            if v.len() != dim {
                return arg("training vectors differ in length");
            }
            let e = sums.entry(*c).or_insert_with(|| (vec![0.0; dim], 0));
            e.0.iter_mut().zip(v).for_each(|(s, x)| *s += x);
            e.1 += 1;
        }
        Ok(Self {
            centroids: sums
                .into_iter()
                .map(|(c, (s, n))| (c, s.into_iter().map(|x| x / n as f64).collect()))
                .collect(),
        })
    }

    pub fn predict(&self, v: &[f64]) -> u32 {
        let dist = |c: &[f64]| c.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        self.centroids
            .iter()
            .min_by(|a, b| dist(&a.1).total_cmp(&dist(&b.1)))
            .map(|(c, _)| *c)
            .expect("fitted classifier has centroids")
    }

    pub fn accuracy(&self, labelled: &[(u32, Vec<f64>)]) -> f64 {
        let hits = labelled.iter().filter(|(c, v)| self.predict(v) == *c).count();
        hits as f64 / labelled.len().max(1) as f64
    }
}

/// Ordered `key: value` metrics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub entries: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

impl MetricReport {
    pub fn set(&mut self, key: impl Into<String>, value: f64) {
        self.entries.insert(key.into(), value);
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for n in &self.notes {
            s.push_str(&format!("# {n}\n"));
        }
        for (k, v) in &self.entries {
            s.push_str(&format!("{k}: {v}\n"));
        }
        s
    }

    pub fn to_json(&self) -> String {
        let value = serde_json::json!({ "metrics": self.entries, "notes": self.notes });
        serde_json::to_string_pretty(&value).expect("metrics serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_indexed;
    use proptest::prelude::*;

    fn stats_1d(mean: f64, var: f64) -> FeatureStats {
        FeatureStats {
            mean: DVector::from_element(1, mean),
            cov: DMatrix::from_element(1, 1, var),
            count: 2,
        }
    }

    #[test]
    fn unbiased_stats() {
        let s = FeatureStats::from_vectors(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(s.mean[0], 1.0);
        assert_eq!(s.cov[(0, 0)], 2.0);
        let same = FeatureStats::from_vectors(&vec![vec![1.0, 2.0]; 3]).unwrap();
        assert!(same.cov.iter().all(|v| *v == 0.0));
        assert!(FeatureStats::from_vectors(&[vec![1.0]]).is_err());
    }

    #[test]
    fn frechet_closed_forms() {
        assert!((frechet_distance(&stats_1d(0.0, 1.0), &stats_1d(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-8);
        assert!((frechet_distance(&stats_1d(0.0, 1.0), &stats_1d(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-8);
        let s = stats_1d(0.3, 2.5);
        assert!(frechet_distance(&s, &s).unwrap().abs() < 1e-8);
        assert!(frechet_distance(&s, &FeatureStats::from_vectors(&vec![vec![0.0, 1.0]; 2]).unwrap()).is_err());
    }

    fn random_stats(seed: u64, dim: usize) -> FeatureStats {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let vecs: Vec<Vec<f64>> = (0..dim + 3)
            .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        FeatureStats::from_vectors(&vecs).unwrap()
    }

    proptest! {
        #[test]
        fn frechet_is_symmetric_and_nonnegative(sa in 0u64..1000, sb in 0u64..1000, dim in 1usize..6) {
            let (a, b) = (random_stats(sa, dim), random_stats(sb + 5000, dim));
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-8 * (1.0 + ab.abs()));
            prop_assert!(ab >= 0.0);
            prop_assert!(frechet_distance(&a, &a).unwrap() < 1e-8);
        }

        #[test]
        fn aligned_depth_is_scale_invariant(c in 0.1f64..10.0, seed in 0u64..50) {
            let gt = generate_indexed(seed, 0, 8, &ModalityRegistry::standard()).unwrap().planes[1].clone();
            let pred = Plane::new(8, 8, 1, gt.data.iter().map(|v| (*v as f64 * c) as f32).collect()).unwrap();
            let m = depth_metrics(&pred, &gt, None, true).unwrap();
            prop_assert!(m.abs_rel < 1e-5);
            prop_assert_eq!(m.delta1, 1.0);
        }
    }

    #[test]
    fn depth_metric_cases() {
        let gt = Plane::filled(2, 2, 1, 2.0);
        let m = depth_metrics(&gt, &gt, None, false).unwrap();
        assert_eq!((m.abs_rel, m.delta1, m.rmse), (0.0, 1.0, 0.0));
        let far = Plane::filled(2, 2, 1, 2.5);
        let m = depth_metrics(&far, &gt, None, false).unwrap();
        assert_eq!(m.delta1, 0.0);
        assert_eq!(m.abs_rel, 0.25);
        let near = Plane::filled(2, 2, 1, 2.2);
        let m = depth_metrics(&near, &gt, None, false).unwrap();
        assert!((m.rmse - 0.2).abs() < 1e-6);
        assert!(depth_metrics(&gt, &gt, Some(&[false; 4]), false).is_err());
        let m = depth_metrics(&far, &gt, Some(&[true, false, false, false]), false).unwrap();
        assert_eq!(m.count, 1);
    }

    #[test]
    fn angular_cases() {
        let up = Plane::new(1, 2, 3, vec![0., 0., 1., 0., 0., 1.]).unwrap();
        let down = Plane::new(1, 2, 3, vec![0., 0., -1., 0., 0., -1.]).unwrap();
        let side = Plane::new(1, 2, 3, vec![1., 0., 0., 1., 0., 0.]).unwrap();
        assert_eq!(normal_angular_error(&up, &up).unwrap().median_deg, 0.0);
        assert_eq!(normal_angular_error(&down, &up).unwrap().mean_deg, 180.0);
        assert_eq!(normal_angular_error(&side, &up).unwrap().median_deg, 90.0);
    }

    #[test]
    fn consistency_on_ground_truth() {
        let reg = ModalityRegistry::standard();
        for seed in 0..8 {
            let s = generate_indexed(seed, 1, 32, &reg).unwrap();
            let c = cross_modal_consistency(&s, &reg).unwrap();
            assert!(c.normal_median_deg.unwrap() < 10.0, "{c:?}");
            assert!(c.boundary_agreement > 0.9, "{c:?}");
        }
    }

    #[test]
    fn shifted_boundaries_agree_less() {
        let reg = ModalityRegistry::standard();
        let s = generate_indexed(3, 0, 32, &reg).unwrap();
        let (depth, normal, seg) = (&s.planes[1], &s.planes[2], &s.planes[3]);
        let base = consistency_of_planes(depth, normal, seg).unwrap();
        let mut shifted = Plane::filled(32, 32, 1, 0.0);
        for y in 0..32 {
            for x in 4..32 {
                shifted.pixel_mut(y, x)[0] = seg.at(y, x - 4);
            }
        }
        let moved = consistency_of_planes(depth, normal, &shifted).unwrap();
        assert!(moved.boundary_agreement < base.boundary_agreement);
    }

    #[test]
    fn vacuous_consistency() {
        let depth = Plane::filled(6, 6, 1, 3.0);
        let mut normal = Plane::filled(6, 6, 3, 0.0);
        normal.data.chunks_mut(3).for_each(|p| p[2] = 1.0);
        let seg = Plane::filled(6, 6, 1, 0.0);
        let c = consistency_of_planes(&depth, &normal, &seg).unwrap();
        assert_eq!(c.boundary_agreement, 1.0);
        assert_eq!(c.boundary_pixels, 0);
        assert_eq!(c.normal_median_deg, Some(0.0));
    }

    #[test]
    fn seg_accuracy_and_centroids() {
        let a = Plane::new(1, 4, 1, vec![0., 1., 2., 3.]).unwrap();
        let b = Plane::new(1, 4, 1, vec![0., 1., 2., 0.]).unwrap();
        assert_eq!(seg_pixel_accuracy(&a, &b).unwrap(), 0.75);
        let train = vec![(0, vec![0.0, 0.0]), (0, vec![0.2, 0.0]), (1, vec![5.0, 5.0])];
        let nc = NearestCentroid::fit(&train).unwrap();
        assert_eq!(nc.predict(&[0.9, 0.4]), 0);
        assert_eq!(nc.predict(&[3.0, 4.0]), 1);
        assert_eq!(nc.accuracy(&train), 1.0);
    }

    #[test]
    fn report_formats() {
        let mut r = MetricReport::default();
        r.set("b", 2.0);
        r.set("a", 0.5);
        r.note("toy");
        assert_eq!(r.to_text(), "# toy\na: 0.5\nb: 2\n");
        assert!(r.to_json().contains("\"a\": 0.5"));
    }
}
