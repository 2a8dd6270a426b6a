//! Modalities, their channel codecs, and the ordered registry that fixes how
//! modalities are laid out everywhere else (token fusion, heads, files).

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of segmentation labels the palette codec can represent.
pub const SEG_PALETTE_SIZE: usize = 16;

const NORMAL_TOLERANCE: f32 = 1e-3;

/// A modality-native image, stored row-major as `H x W x C` 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Argument(format!(
                "plane data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Scalar at `(y, x)` of a single-channel plane.
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels]
    }
}

/// An encoded plane in the common `[-1, 1]` value range the diffusion runs in.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelPlane {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ChannelPlane {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Argument(format!(
                "channel data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn mean_abs_diff(&self, other: &ChannelPlane) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.data.len().max(1) as f64
    }
}

/// Min/max of a depth plane; inverts the per-image affine depth codec.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRange {
    pub min: f32,
    pub max: f32,
}

impl DepthRange {
    pub fn of(plane: &Plane) -> Self {
        let (mut min, mut max) = (f32::INFINITY, f32::NEG_INFINITY);
        for &v in &plane.data {
            min = min.min(v);
            max = max.max(v);
        }
        Self { min, max }
    }

    fn span(&self) -> f64 {
        (self.max as f64 - self.min as f64).max(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecId {
    /// `[0, 1]` colors, affine to `[-1, 1]`.
    Rgb,
    /// Positive depth, per-image min-max affine to `[-1, 1]`.
    DepthMinmax,
    /// Unit vectors, components copied; decode renormalizes.
    Normal,
    /// Integer labels mapped to a fixed 16-color palette.
    SegPalette16,
    /// Any `[0, 1]` scalar field (edges, masks), affine to `[-1, 1]`.
    UnitScalar,
}

impl CodecId {
    fn fixed_channels(self) -> Option<usize> {
        match self {
            CodecId::Rgb | CodecId::Normal | CodecId::SegPalette16 => Some(3),
            CodecId::DepthMinmax => Some(1),
            CodecId::UnitScalar => None,
        }
    }

    /// Channel count of the native plane this codec accepts.
    pub fn native_channels(self, channels: usize) -> usize {
        match self {
            CodecId::SegPalette16 => 1,
            _ => channels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub channels: usize,
    pub codec: CodecId,
    pub droppable: bool,
}

impl ModalitySpec {
    pub fn rgb() -> Self {
        Self {
            name: "rgb".into(),
            channels: 3,
            codec: CodecId::Rgb,
            droppable: false,
        }
    }

    pub fn depth() -> Self {
        Self {
            name: "depth".into(),
            channels: 1,
            codec: CodecId::DepthMinmax,
            droppable: true,
        }
    }

    pub fn normal() -> Self {
        Self {
            name: "normal".into(),
            channels: 3,
            codec: CodecId::Normal,
            droppable: true,
        }
    }

    pub fn seg() -> Self {
        Self {
            name: "seg".into(),
            channels: 3,
            codec: CodecId::SegPalette16,
            droppable: true,
        }
    }

    /// A scalar edge map with the given channel count.
    pub fn edge(channels: usize) -> Self {
        Self {
            name: "edge".into(),
            channels,
            codec: CodecId::UnitScalar,
            droppable: true,
        }
    }

    pub fn is_rgb(&self) -> bool {
        self.name == "rgb"
    }

    fn validate(&self) -> Result<()> {
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(Error::Validation(format!(
                "modality name {:?} must be non-empty [A-Za-z0-9_]",
                self.name
            )));
        }
        if self.channels == 0 {
            return Err(Error::Validation(format!(
                "modality {} has zero channels",
                self.name
            )));
        }
        if let Some(c) = self.codec.fixed_channels() {
            if c != self.channels {
                return Err(Error::Validation(format!(
                    "codec {:?} needs {c} channels, modality {} declares {}",
                    self.codec, self.name, self.channels
                )));
            }
        }
        if self.is_rgb() && self.droppable {
            return Err(Error::Validation("rgb cannot be droppable".into()));
        }
        Ok(())
    }
}

/// Ordered modality list. Order is fixed at construction; growth is by
/// appending only, so existing indices never move.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawRegistry")]
pub struct ModalityRegistry {
    #[serde(rename = "modality")]
    modalities: Vec<ModalitySpec>,
}

#[derive(Deserialize)]
struct RawRegistry {
    #[serde(rename = "modality")]
    modalities: Vec<ModalitySpec>,
}

impl TryFrom<RawRegistry> for ModalityRegistry {
    type Error = Error;

    fn try_from(raw: RawRegistry) -> Result<Self> {
        Self::new(raw.modalities)
    }
}

#[derive(Serialize, Deserialize)]
struct RegistryDoc {
    format: String,
    #[serde(rename = "modality")]
    modalities: Vec<ModalitySpec>,
}

const REGISTRY_FORMAT: &str = "mmgen-registry/1";

impl ModalityRegistry {
    pub fn new(modalities: Vec<ModalitySpec>) -> Result<Self> {
        if modalities.is_empty() {
            return Err(Error::Validation("registry must not be empty".into()));
        }
        for (i, m) in modalities.iter().enumerate() {
            m.validate()?;
            if modalities[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::Validation(format!(
                    "duplicate modality name {}",
                    m.name
                )));
            }
        }
        if !modalities[0].is_rgb() {
            return Err(Error::Validation(
                "the first registered modality must be rgb".into(),
            ));
        }
        Ok(Self { modalities })
    }

    /// rgb, depth, normal, seg.
    pub fn standard() -> Self {
        Self::new(vec![
            ModalitySpec::rgb(),
            ModalitySpec::depth(),
            ModalitySpec::normal(),
            ModalitySpec::seg(),
        ])
        .expect("standard registry is valid")
    }

    pub fn len(&self) -> usize {
        self.modalities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modalities.is_empty()
    }

    pub fn get(&self, index: usize) -> &ModalitySpec {
        &self.modalities[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ModalitySpec> {
        self.modalities.iter()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m.name == name)
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| Error::Argument(format!("unknown modality {name}")))
    }

    pub fn total_channels(&self) -> usize {
        self.modalities.iter().map(|m| m.channels).sum()
    }

    pub fn droppable_flags(&self) -> Vec<bool> {
        self.modalities.iter().map(|m| m.droppable).collect()
    }

    pub fn append(&mut self, spec: ModalitySpec) -> Result<usize> {
        let mut next = self.modalities.clone();
        next.push(spec);
        *self = Self::new(next)?;
        Ok(self.modalities.len() - 1)
    }

    /// Swaps the modality in an existing slot; rgb's slot cannot be replaced.
    pub fn replace(&mut self, index: usize, spec: ModalitySpec) -> Result<()> {
        if index == 0 || index >= self.modalities.len() {
            return Err(Error::Argument(format!(
                "cannot replace modality slot {index}"
            )));
        }
        let mut next = self.modalities.clone();
        next[index] = spec;
        *self = Self::new(next)?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let doc = RegistryDoc {
            format: REGISTRY_FORMAT.into(),
            modalities: self.modalities.clone(),
        };
        toml::to_string(&doc).expect("registry serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc: RegistryDoc =
            toml::from_str(text).map_err(|e| Error::Format(format!("registry: {e}")))?;
        if doc.format != REGISTRY_FORMAT {
            return Err(Error::Format(format!(
                "registry format {:?}, expected {REGISTRY_FORMAT}",
                doc.format
            )));
        }
        Self::new(doc.modalities)
    }
}

/// The 16 segmentation colors in `[-1, 1]^3`, chosen by greedy farthest-point
/// selection on a 5-level lattice starting from the background color.
pub fn seg_palette() -> &'static [[f64; 3]; SEG_PALETTE_SIZE] {
    static PALETTE: OnceLock<[[f64; 3]; SEG_PALETTE_SIZE]> = OnceLock::new();
    PALETTE.get_or_init(|| {
        let levels = [-1.0, -0.5, 0.0, 0.5, 1.0];
        let mut candidates = Vec::with_capacity(125);
        for &r in &levels {
            for &g in &levels {
                for &b in &levels {
                    candidates.push([r, g, b]);
                }
            }
        }
        let mut chosen = vec![[-1.0, -1.0, -1.0]];
        while chosen.len() < SEG_PALETTE_SIZE {
            let mut best = candidates[0];
            let mut best_d = -1.0;
            for c in &candidates {
                let d = chosen
                    .iter()
                    .map(|p| sq_dist(p, c))
                    .fold(f64::INFINITY, f64::min);
                if d > best_d {
                    best_d = d;
                    best = *c;
                }
            }
            chosen.push(best);
        }
        let mut out = [[0.0; 3]; SEG_PALETTE_SIZE];
        out.copy_from_slice(&chosen);
        out
    })
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

/// Nearest palette entry to an encoded seg color.
pub fn nearest_seg_label(c: &[f64]) -> u32 {
    let p = [c[0], c[1], c[2]];
    seg_palette()
        .iter()
        .enumerate()
        .map(|(i, q)| (i, sq_dist(q, &p)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
        .0 as u32
}

/// Encodes a native plane into `[-1, 1]` channels.
pub fn encode_to_channels(plane: &Plane, spec: &ModalitySpec) -> Result<ChannelPlane> {
    let expected = spec.codec.native_channels(spec.channels);
    if plane.channels != expected {
        return Err(Error::Argument(format!(
            "{} plane has {} channels, codec expects {expected}",
            spec.name, plane.channels
        )));
    }
    let (h, w) = (plane.height, plane.width);
    let mut out = Vec::with_capacity(h * w * spec.channels);
    match spec.codec {
        CodecId::Rgb | CodecId::UnitScalar => {
            for &v in &plane.data {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Validation(format!(
                        "{} value {v} outside [0, 1]",
                        spec.name
                    )));
                }
                out.push(2.0 * v as f64 - 1.0);
            }
        }
        CodecId::DepthMinmax => {
            if let Some(bad) = plane.data.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
                return Err(Error::Validation(format!("non-positive depth {bad}")));
            }
            let range = DepthRange::of(plane);
            let span = range.span();
            for &v in &plane.data {
                out.push(if span < 1e-12 {
                    0.0
                } else {
                    2.0 * (v as f64 - range.min as f64) / span - 1.0
                });
            }
        }
        CodecId::Normal => {
            for px in plane.data.chunks_exact(3) {
                let n = (px[0] * px[0] + px[1] * px[1] + px[2] * px[2]).sqrt();
                if !((n - 1.0).abs() <= NORMAL_TOLERANCE) {
                    return Err(Error::Validation(format!(
                        "normal ({}, {}, {}) has norm {n}",
                        px[0], px[1], px[2]
                    )));
                }
                out.extend(px.iter().map(|&c| c as f64));
            }
        }
        CodecId::SegPalette16 => {
            let palette = seg_palette();
            for &v in &plane.data {
                if v.fract() != 0.0 || v < 0.0 || v >= SEG_PALETTE_SIZE as f32 {
                    return Err(Error::Validation(format!("unknown seg label {v}")));
                }
                out.extend_from_slice(&palette[v as usize]);
            }
        }
    }
    ChannelPlane::new(h, w, spec.channels, out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub plane: Plane,
    /// Some input channel fell outside `[-1, 1]` and was clamped.
    pub clamped: bool,
}

/// Inverse of [`encode_to_channels`]. `depth_range` is only used by the depth
/// codec.
pub fn decode_from_channels(
    channels: &ChannelPlane,
    spec: &ModalitySpec,
    depth_range: DepthRange,
) -> Result<Decoded> {
    if channels.channels != spec.channels {
        return Err(Error::Argument(format!(
            "{} expects {} channels, got {}",
            spec.name, spec.channels, channels.channels
        )));
    }
    let mut clamped = false;
    let mut clamp = |v: f64| {
        if v < -1.0 || v > 1.0 || v.is_nan() {
            clamped = true;
        }
        if v.is_nan() {
            0.0
        } else {
            v.clamp(-1.0, 1.0)
        }
    };
    let (h, w) = (channels.height, channels.width);
    let native = spec.codec.native_channels(spec.channels);
    let mut out = Vec::with_capacity(h * w * native);
    match spec.codec {
        CodecId::Rgb | CodecId::UnitScalar => {
            for &v in &channels.data {
                out.push(((clamp(v) + 1.0) * 0.5) as f32);
            }
        }
        CodecId::DepthMinmax => {
            let span = depth_range.span();
            for &v in &channels.data {
                out.push((depth_range.min as f64 + (clamp(v) + 1.0) * 0.5 * span) as f32);
            }
        }
        CodecId::Normal => {
            for px in channels.data.chunks_exact(3) {
                let v = [clamp(px[0]), clamp(px[1]), clamp(px[2])];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n < 1e-12 {
                    out.extend_from_slice(&[0.0, 0.0, 1.0]);
                } else {
                    out.extend(v.iter().map(|c| (c / n) as f32));
                }
            }
        }
        CodecId::SegPalette16 => {
            for px in channels.data.chunks_exact(3) {
                let v = [clamp(px[0]), clamp(px[1]), clamp(px[2])];
                out.push(nearest_seg_label(&v) as f32);
            }
        }
    }
    Ok(Decoded {
        plane: Plane::new(h, w, native, out)?,
        clamped,
    })
}
