//! One aligned multi-modal example: native planes in registry order.

use crate::error::{Error, Result};
use crate::modality::{
    decode_from_channels, encode_to_channels, ChannelPlane, CodecId, DepthRange,
    ModalityRegistry, Plane, SEG_PALETTE_SIZE,
};

/// Tolerance on stored unit normals.
pub const NORMAL_NORM_TOLERANCE: f32 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalSample {
    pub class_id: u32,
    /// Range of the depth plane; needed to decode depth channels.
    pub depth_range: DepthRange,
    /// Native planes in registry order.
    pub planes: Vec<Plane>,
}

impl MultiModalSample {
    /// Builds a sample, deriving the depth range from the first depth plane.
    pub fn new(class_id: u32, planes: Vec<Plane>, registry: &ModalityRegistry) -> Result<Self> {
        let depth_range = registry
            .iter()
            .zip(&planes)
            .find(|(spec, _)| spec.codec == CodecId::DepthMinmax)
            .map(|(_, p)| DepthRange::of(p))
            .unwrap_or(DepthRange { min: 1.0, max: 1.0 });
        let sample = Self {
            class_id,
            depth_range,
            planes,
        };
        sample.validate(registry)?;
        Ok(sample)
    }

    pub fn height(&self) -> usize {
        self.planes.first().map_or(0, |p| p.height)
    }

    pub fn width(&self) -> usize {
        self.planes.first().map_or(0, |p| p.width)
    }

    pub fn plane(&self, registry: &ModalityRegistry, name: &str) -> Option<&Plane> {
        registry.index_of(name).and_then(|i| self.planes.get(i))
    }

    /// Checks shapes and the per-modality value invariants.
    pub fn validate(&self, registry: &ModalityRegistry) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.planes.len() != registry.len() {
            return bad(format!(
                "sample has {} planes, registry has {} modalities",
                self.planes.len(),
                registry.len()
            ));
        }
        let (h, w) = (self.height(), self.width());
        for (spec, plane) in registry.iter().zip(&self.planes) {
            let native = spec.codec.native_channels(spec.channels);
            if plane.height != h || plane.width != w || plane.channels != native {
                return bad(format!(
                    "{} plane is {}x{}x{}, expected {h}x{w}x{native}",
                    spec.name, plane.height, plane.width, plane.channels
                ));
            }
            if let Some(v) = plane.data.iter().find(|v| !v.is_finite()) {
                return bad(format!("{} contains non-finite value {v}", spec.name));
            }
            match spec.codec {
                CodecId::Rgb | CodecId::UnitScalar => {
                    if let Some(v) = plane.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                        return bad(format!("{} value {v} outside [0, 1]", spec.name));
                    }
                }
                CodecId::DepthMinmax => {
                    if let Some(v) = plane.data.iter().find(|v| **v <= 0.0) {
                        return bad(format!("non-positive depth {v}"));
                    }
                    if DepthRange::of(plane) != self.depth_range {
                        return bad("depth range metadata does not match the depth plane".into());
                    }
                }
                CodecId::Normal => {
                    for px in plane.data.chunks_exact(3) {
                        let n = (px[0] * px[0] + px[1] * px[1] + px[2] * px[2]).sqrt();
                        if (n - 1.0).abs() > NORMAL_NORM_TOLERANCE {
                            return bad(format!("normal with norm {n}"));
                        }
                    }
                }
                CodecId::SegPalette16 => {
                    if let Some(v) = plane
                        .data
                        .iter()
                        .find(|v| v.fract() != 0.0 || **v < 0.0 || **v >= SEG_PALETTE_SIZE as f32)
                    {
                        return bad(format!("invalid seg label {v}"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Encodes every plane into `[-1, 1]` channels.
    pub fn encode(&self, registry: &ModalityRegistry) -> Result<Vec<ChannelPlane>> {
        registry
            .iter()
            .zip(&self.planes)
            .map(|(spec, p)| encode_to_channels(p, spec))
            .collect()
    }

    /// Decodes channel planes back to a sample. Depth uses `depth_range`.
    /// Returns whether any channel had to be clamped.
    pub fn decode(
        channels: &[ChannelPlane],
        registry: &ModalityRegistry,
        class_id: u32,
        depth_range: DepthRange,
    ) -> Result<(Self, bool)> {
        if channels.len() != registry.len() {
            return Err(Error::Argument(format!(
                "{} channel planes for {} modalities",
                channels.len(),
                registry.len()
            )));
        }
        let mut clamped = false;
        let mut planes = Vec::with_capacity(channels.len());
        for (spec, ch) in registry.iter().zip(channels) {
            let d = decode_from_channels(ch, spec, depth_range)?;
            clamped |= d.clamped;
            planes.push(d.plane);
        }
        Ok((
            Self {
                class_id,
                depth_range,
                planes,
            },
            clamped,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(reg: &ModalityRegistry) -> Vec<Plane> {
        vec![
            Plane::filled(2, 2, 3, 0.5),
            Plane::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            Plane::new(2, 2, 3, [0.0, 0.0, 1.0].repeat(4)).unwrap(),
            Plane::new(2, 2, 1, vec![0.0, 1.0, 1.0, 2.0]).unwrap(),
        ]
        .into_iter()
        .take(reg.len())
        .collect()
    }

    #[test]
    fn builds_and_round_trips() {
        let reg = ModalityRegistry::standard();
        let s = MultiModalSample::new(3, tiny(&reg), &reg).unwrap();
        assert_eq!(s.depth_range, DepthRange { min: 1.0, max: 4.0 });
        let ch = s.encode(&reg).unwrap();
        let (back, clamped) = MultiModalSample::decode(&ch, &reg, 3, s.depth_range).unwrap();
        assert!(!clamped);
        assert_eq!(back.plane(&reg, "seg"), s.plane(&reg, "seg"));
        assert_eq!(back.plane(&reg, "depth"), s.plane(&reg, "depth"));
    }

    #[test]
    fn rejects_invalid_planes() {
        let reg = ModalityRegistry::standard();
        let mut planes = tiny(&reg);
        planes[2].data[2] = 0.9;
        assert!(MultiModalSample::new(0, planes, &reg).is_err());
        let mut planes = tiny(&reg);
        planes[3].data[0] = 16.0;
        assert!(MultiModalSample::new(0, planes, &reg).is_err());
        let mut planes = tiny(&reg);
        planes[1].data[0] = 0.0;
        assert!(MultiModalSample::new(0, planes, &reg).is_err());
        let mut planes = tiny(&reg);
        planes.pop();
        assert!(MultiModalSample::new(0, planes, &reg).is_err());
    }
}
