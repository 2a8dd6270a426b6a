//! Frozen per-patch feature extractors used as alignment targets and for
//! Fréchet statistics.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::modality::ChannelPlane;
use crate::tensor::Matrix;

const FEATURE_MAGIC: &[u8; 4] = b"MMFT";
const RECORD_HEADER: usize = 16;

/// Maps a clean rgb channel plane to one feature vector per patch.
pub trait FeatureProvider {
    fn id(&self) -> String;
    /// Patches per side.
    fn grid(&self) -> usize;
    fn dim(&self) -> usize;
    /// `N x F` features. `sample_id` identifies the sample for providers
    /// backed by precomputed files.
    fn patch_features(&self, rgb: &ChannelPlane, sample_id: Option<u64>) -> Result<Matrix>;

    /// Mean over patches, one vector per image.
    fn pooled(&self, rgb: &ChannelPlane, sample_id: Option<u64>) -> Result<Vec<f64>> {
        let f = self.patch_features(rgb, sample_id)?;
        let mut out = vec![0.0; f.cols()];
        for r in 0..f.rows() {
            for (o, v) in out.iter_mut().zip(f.row(r)) {
                *o += v;
            }
        }
        let n = f.rows().max(1) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        Ok(out)
    }
}

/// Two random 3x3 convolutions with tanh, average-pooled per patch.
#[derive(Clone, Debug)]
pub struct RandomConvFeatures {
    seed: u64,
    patch: usize,
    hidden: usize,
    dim: usize,
    grid: usize,
    conv1: Matrix,
    conv2: Matrix,
}

fn he_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    Matrix::from_fn(fan_in, fan_out, |_, _| d.sample(rng))
}

/// 3x3 zero-padded neighbourhoods as rows: `(H*W) x (9*C)`.
fn im2col(data: &[f64], h: usize, w: usize, c: usize) -> Matrix {
    let mut out = Matrix::zeros(h * w, 9 * c);
    for y in 0..h {
        for x in 0..w {
            let row = out.row_mut(y * w + x);
            let mut k = 0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (sy, sx) = (y as i64 + dy, x as i64 + dx);
                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        let i = (sy as usize * w + sx as usize) * c;
                        row[k..k + c].copy_from_slice(&data[i..i + c]);
                    }
                    k += c;
                }
            }
        }
    }
    out
}

impl RandomConvFeatures {
    pub fn new(seed: u64, image_size: usize, patch: usize, dim: usize) -> Result<Self> {
        if patch == 0 || image_size % patch != 0 || dim == 0 {
            return Err(Error::Argument(format!(
                "invalid feature provider geometry: image {image_size}, patch {patch}, dim {dim}"
            )));
        }
        let hidden = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv1 = he_init(&mut rng, 27, hidden);
        let conv2 = he_init(&mut rng, 9 * hidden, dim);
        Ok(Self {
            seed,
            patch,
            hidden,
            dim,
            grid: image_size / patch,
            conv1,
            conv2,
        })
    }
}

impl FeatureProvider for RandomConvFeatures {
    fn id(&self) -> String {
        format!("random-conv/seed={}/dim={}", self.seed, self.dim)
    }

    fn grid(&self) -> usize {
        self.grid
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn patch_features(&self, rgb: &ChannelPlane, _sample_id: Option<u64>) -> Result<Matrix> {
        let size = self.grid * self.patch;
        if rgb.channels != 3 || rgb.height != size || rgb.width != size {
            return Err(Error::Argument(format!(
                "feature provider expects {size}x{size}x3, got {}x{}x{}",
                rgb.height, rgb.width, rgb.channels
            )));
        }
        let (h, w) = (rgb.height, rgb.width);
        let a = im2col(&rgb.data, h, w, 3).matmul(&self.conv1).map(f64::tanh);
        let b = im2col(a.data(), h, w, self.hidden)
            .matmul(&self.conv2)
            .map(f64::tanh);
        let p = self.patch;
        let mut out = Matrix::zeros(self.grid * self.grid, self.dim);
        let norm = 1.0 / (p * p) as f64;
        for y in 0..h {
            for x in 0..w {
                let row = out.row_mut((y / p) * self.grid + x / p);
                for (o, v) in row.iter_mut().zip(b.row(y * w + x)) {
                    *o += v * norm;
                }
            }
        }
        Ok(out)
    }
}

/// One precomputed feature record.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub sample_id: u32,
    /// `N x F`.
    pub features: Matrix,
}

/// Parses concatenated records: a 16-byte header (`MMFT`, N, F, sample id as
/// little-endian u32) followed by `N * F` little-endian f32 values.
pub fn parse_feature_records(bytes: &[u8]) -> Result<Vec<FeatureRecord>> {
    let mut out = Vec::new();
    let mut at = 0;
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    while at < bytes.len() {
        if bytes.len() - at < RECORD_HEADER {
            return Err(Error::Format(format!("truncated feature header at byte {at}")));
        }
        if &bytes[at..at + 4] != FEATURE_MAGIC {
            return Err(Error::Format(format!("bad feature record magic at byte {at}")));
        }
        let (n, f, id) = (word(at + 4) as usize, word(at + 8) as usize, word(at + 12));
        let count = n
            .checked_mul(f)
            .filter(|c| *c > 0)
            .ok_or_else(|| Error::Format(format!("bad feature record size {n}x{f}")))?;
        let body = count
            .checked_mul(4)
            .ok_or_else(|| Error::Format("feature record too large".into()))?;
        at += RECORD_HEADER;
        if bytes.len() - at < body {
            return Err(Error::Format(format!("truncated feature record {id}")));
        }
        let data: Vec<f64> = bytes[at..at + body]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite feature in record {id}")));
        }
        at += body;
        out.push(FeatureRecord {
            sample_id: id,
            features: Matrix::from_vec(n, f, data),
        });
    }
    Ok(out)
}

pub fn encode_feature_records(records: &[FeatureRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(r.features.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(r.features.cols() as u32).to_le_bytes());
        out.extend_from_slice(&r.sample_id.to_le_bytes());
        for v in r.features.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

/// Features read from precomputed files, looked up by sample id.
#[derive(Clone, Debug)]
pub struct FileFeatures {
    source: String,
    grid: usize,
    dim: usize,
    records: HashMap<u32, Matrix>,
}

impl FileFeatures {
    pub fn from_records(source: impl Into<String>, records: Vec<FeatureRecord>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Format("feature file has no records".into()))?;
        let (n, dim) = first.features.shape();
        let grid = (n as f64).sqrt().round() as usize;
        if grid * grid != n {
            return Err(Error::Format(format!("{n} patches is not a square grid")));
        }
        let mut map = HashMap::new();
        for r in records {
            if r.features.shape() != (n, dim) {
                return Err(Error::Format(format!(
                    "record {} has shape {:?}, expected {:?}",
                    r.sample_id,
                    r.features.shape(),
                    (n, dim)
                )));
            }
            if map.insert(r.sample_id, r.features).is_some() {
                return Err(Error::Format(format!("duplicate feature record {}", r.sample_id)));
            }
        }
        Ok(Self {
            source: source.into(),
            grid,
            dim,
            records: map,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_records(path.display().to_string(), parse_feature_records(&bytes)?)
    }
}

impl FeatureProvider for FileFeatures {
    fn id(&self) -> String {
        format!("file/{}", self.source)
    }

    fn grid(&self) -> usize {
        self.grid
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn patch_features(&self, _rgb: &ChannelPlane, sample_id: Option<u64>) -> Result<Matrix> {
        let id = sample_id.ok_or_else(|| {
            Error::Argument("file-backed features need a sample id".into())
        })?;
        u32::try_from(id)
            .ok()
            .and_then(|k| self.records.get(&k))
            .cloned()
            .ok_or_else(|| Error::Argument(format!("no precomputed features for sample {id}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_rgb(size: usize, seed: u64) -> ChannelPlane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..size * size * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        ChannelPlane::new(size, size, 3, data).unwrap()
    }

    #[test]
    fn random_conv_shapes_and_determinism() {
        let p = RandomConvFeatures::new(1, 8, 2, 6).unwrap();
        let x = random_rgb(8, 0);
        let f = p.patch_features(&x, None).unwrap();
        assert_eq!(f.shape(), (16, 6));
        assert_eq!(f, RandomConvFeatures::new(1, 8, 2, 6).unwrap().patch_features(&x, None).unwrap());
        let other = RandomConvFeatures::new(2, 8, 2, 6).unwrap();
        assert_ne!(f, other.patch_features(&x, None).unwrap());
        assert_ne!(f, p.patch_features(&random_rgb(8, 1), None).unwrap());
        assert!(p.patch_features(&random_rgb(4, 0), None).is_err());
        assert_eq!(p.pooled(&x, None).unwrap().len(), 6);
    }

    #[test]
    fn feature_file_round_trip() {
        let records = vec![
            FeatureRecord {
                sample_id: 7,
                features: Matrix::from_fn(4, 3, |r, c| (r * 3 + c) as f64 * 0.5),
            },
            FeatureRecord {
                sample_id: 9,
                features: Matrix::filled(4, 3, -1.0),
            },
        ];
        let bytes = encode_feature_records(&records);
        assert_eq!(bytes.len(), 2 * (16 + 48));
        assert_eq!(parse_feature_records(&bytes).unwrap(), records);
        let p = FileFeatures::from_records("mem", records).unwrap();
        assert_eq!(p.grid(), 2);
        let dummy = random_rgb(4, 0);
        assert_eq!(p.patch_features(&dummy, Some(9)).unwrap(), Matrix::filled(4, 3, -1.0));
        assert!(p.patch_features(&dummy, Some(8)).is_err());
        assert!(p.patch_features(&dummy, None).is_err());

        assert!(parse_feature_records(&bytes[..20]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(parse_feature_records(&bad).is_err());
    }
}
