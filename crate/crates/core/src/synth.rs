//! Procedural scenes with exactly aligned rgb, depth, normal and seg planes,
//! and the on-disk dataset container.
//!
//! Scenes are rendered orthographically into the viewport `[-1, 1]^2`
//! (x to the right, y downwards); depth grows away from the camera. Stored
//! normals follow the depth-gradient convention `normalize(-dz/dx, -dz/dy, 1)`
//! so that a surface facing the camera has normal `(0, 0, 1)`.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::modality::{DepthRange, ModalityRegistry, Plane};
use crate::sample::MultiModalSample;

pub const NUM_SCENE_CLASSES: u32 = 10;
pub const BACKGROUND_DEPTH: f64 = 8.0;

const DATASET_MAGIC: &[u8; 4] = b"MMDS";
const DATASET_VERSION: u32 = 1;
const HEADER_LEN: u64 = 4 + 4 + 8 + 4 + 4 + 4;
const MAX_REGISTRY_BLOB: u32 = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PrimitiveKind {
    Sphere,
    /// A planar slab with a rotated rectangular footprint.
    Box,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    /// Viewport position and depth of the center.
    pub center: [f64; 3],
    /// Sphere radius, or box half extents along its rotated axes.
    pub size: [f64; 2],
    /// Footprint rotation (boxes only).
    pub rotation: f64,
    /// Depth slope of the slab face along x and y (boxes only).
    pub tilt: [f64; 2],
    pub albedo: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub class_id: u32,
    pub primitives: Vec<Primitive>,
    /// Unit vector towards the light.
    pub light: [f64; 3],
    pub background_depth: f64,
    pub background_albedo: [f64; 3],
}

/// Kind and count of primitives for a class: classes 0..=4 hold 1..=5
/// spheres, classes 5..=9 hold 1..=5 boxes.
pub fn class_layout(class_id: u32) -> Result<(PrimitiveKind, usize)> {
    match class_id {
        0..=4 => Ok((PrimitiveKind::Sphere, class_id as usize + 1)),
        5..=9 => Ok((PrimitiveKind::Box, class_id as usize - 4)),
        _ => Err(Error::Argument(format!(
            "class {class_id} outside [0, {NUM_SCENE_CLASSES})"
        ))),
    }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn random_albedo<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [
        rng.random_range(0.3..1.0),
        rng.random_range(0.3..1.0),
        rng.random_range(0.3..1.0),
    ]
}

/// Draws a scene for `class_id`. Each primitive sits in its own depth layer,
/// so objects never interpenetrate and label boundaries are depth steps.
pub fn sample_scene<R: Rng + ?Sized>(class_id: u32, rng: &mut R) -> Result<SceneSpec> {
    let (kind, count) = class_layout(class_id)?;
    let mut layers: Vec<usize> = (0..count).collect();
    for i in (1..count).rev() {
        let j = rng.random_range(0..=i);
        layers.swap(i, j);
    }
    let primitives = layers
        .into_iter()
        .map(|layer| {
            let z = 2.0 + layer as f64;
            match kind {
                PrimitiveKind::Sphere => {
                    let r = rng.random_range(0.18..0.32);
                    Primitive {
                        kind,
                        center: [
                            rng.random_range(-1.0 + r..1.0 - r),
                            rng.random_range(-1.0 + r..1.0 - r),
                            z,
                        ],
                        size: [r, r],
                        rotation: 0.0,
                        tilt: [0.0, 0.0],
                        albedo: random_albedo(rng),
                    }
                }
                PrimitiveKind::Box => {
                    let a: f64 = rng.random_range(0.14..0.3);
                    let b: f64 = rng.random_range(0.14..0.3);
                    let reach = (a * a + b * b).sqrt();
                    Primitive {
                        kind,
                        center: [
                            rng.random_range(-1.0 + reach..1.0 - reach),
                            rng.random_range(-1.0 + reach..1.0 - reach),
                            z,
                        ],
                        size: [a, b],
                        rotation: rng.random_range(0.0..std::f64::consts::PI),
                        tilt: [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)],
                        albedo: random_albedo(rng),
                    }
                }
            }
        })
        .collect();
    let light = normalize([rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 1.0]);
    let g = rng.random_range(0.2..0.4);
    Ok(SceneSpec {
        class_id,
        primitives,
        light,
        background_depth: BACKGROUND_DEPTH,
        background_albedo: [g, g, g],
    })
}

/// Surface hit of one primitive at a viewport point: (depth, normal).
fn intersect(p: &Primitive, u: f64, v: f64) -> Option<(f64, [f64; 3])> {
    let (dx, dy) = (u - p.center[0], v - p.center[1]);
    match p.kind {
        PrimitiveKind::Sphere => {
            let r = p.size[0];
            let d2 = dx * dx + dy * dy;
            if d2 >= r * r {
                return None;
            }
            let s = (r * r - d2).sqrt();
            Some((p.center[2] - s, normalize([-dx, -dy, s])))
        }
        PrimitiveKind::Box => {
            let (sin, cos) = p.rotation.sin_cos();
            let lx = cos * dx + sin * dy;
            let ly = -sin * dx + cos * dy;
            if lx.abs() > p.size[0] || ly.abs() > p.size[1] {
                return None;
            }
            let z = p.center[2] + p.tilt[0] * dx + p.tilt[1] * dy;
            Some((z, normalize([-p.tilt[0], -p.tilt[1], 1.0])))
        }
    }
}

/// Rendered planes of a scene in native units.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedScene {
    pub rgb: Plane,
    pub depth: Plane,
    pub normal: Plane,
    pub seg: Plane,
}

/// Z-buffer render; seg label is primitive index + 1, 0 for background.
pub fn render_scene(scene: &SceneSpec, image_size: usize) -> RenderedScene {
    let n = image_size;
    let mut rgb = Plane::filled(n, n, 3, 0.0);
    let mut depth = Plane::filled(n, n, 1, 0.0);
    let mut normal = Plane::filled(n, n, 3, 0.0);
    let mut seg = Plane::filled(n, n, 1, 0.0);
    for y in 0..n {
        let v = (y as f64 + 0.5) / n as f64 * 2.0 - 1.0;
        for x in 0..n {
            let u = (x as f64 + 0.5) / n as f64 * 2.0 - 1.0;
            let mut best = (scene.background_depth, [0.0, 0.0, 1.0], 0usize);
            for (i, p) in scene.primitives.iter().enumerate() {
                if let Some((z, nrm)) = intersect(p, u, v) {
                    if z < best.0 {
                        best = (z, nrm, i + 1);
                    }
                }
            }
            let (z, nrm, label) = best;
            let albedo = if label == 0 {
                scene.background_albedo
            } else {
                scene.primitives[label - 1].albedo
            };
            let shade = (nrm[0] * scene.light[0] + nrm[1] * scene.light[1] + nrm[2] * scene.light[2])
                .max(0.0);
            for c in 0..3 {
                rgb.pixel_mut(y, x)[c] = (albedo[c] * shade).clamp(0.0, 1.0) as f32;
                normal.pixel_mut(y, x)[c] = nrm[c] as f32;
            }
            depth.pixel_mut(y, x)[0] = z as f32;
            seg.pixel_mut(y, x)[0] = label as f32;
        }
    }
    RenderedScene {
        rgb,
        depth,
        normal,
        seg,
    }
}

/// 1 where a pixel's seg label differs from a 4-neighbour's, else 0.
pub fn edges_from_seg(seg: &Plane) -> Plane {
    let (h, w) = (seg.height, seg.width);
    let mut out = Plane::filled(h, w, 1, 0.0);
    for y in 0..h {
        for x in 0..w {
            let l = seg.at(y, x);
            let differs = [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)].iter().any(|(dy, dx)| {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w
                    && seg.at(ny as usize, nx as usize) != l
            });
            if differs {
                out.pixel_mut(y, x)[0] = 1.0;
            }
        }
    }
    out
}

/// Assembles registry-ordered planes from a render. Known modality names are
/// rgb, depth, normal, seg and edge.
pub fn sample_from_render(
    class_id: u32,
    render: &RenderedScene,
    registry: &ModalityRegistry,
) -> Result<MultiModalSample> {
    let planes = registry
        .iter()
        .map(|spec| match spec.name.as_str() {
            "rgb" => Ok(render.rgb.clone()),
            "depth" => Ok(render.depth.clone()),
            "normal" => Ok(render.normal.clone()),
            "seg" => Ok(render.seg.clone()),
            "edge" if spec.channels == 1 => Ok(edges_from_seg(&render.seg)),
            other => Err(Error::Argument(format!(
                "the scene generator cannot produce modality {other}"
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    MultiModalSample::new(class_id, planes, registry)
}

/// Renders one random scene of the given class.
pub fn generate_scene<R: Rng + ?Sized>(
    class_id: u32,
    rng: &mut R,
    image_size: usize,
    registry: &ModalityRegistry,
) -> Result<MultiModalSample> {
    let scene = sample_scene(class_id, rng)?;
    sample_from_render(class_id, &render_scene(&scene, image_size), registry)
}

/// Sample `index` of a seeded dataset. Each index has its own rng stream, so
/// samples can be produced in any order.
pub fn generate_indexed(
    seed: u64,
    index: u64,
    image_size: usize,
    registry: &ModalityRegistry,
) -> Result<MultiModalSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let class_id = rng.random_range(0..NUM_SCENE_CLASSES);
    generate_scene(class_id, &mut rng, image_size, registry)
}

pub fn generate_dataset(
    count: usize,
    seed: u64,
    image_size: usize,
    registry: &ModalityRegistry,
) -> Result<Vec<MultiModalSample>> {
    (0..count as u64)
        .map(|i| generate_indexed(seed, i, image_size, registry))
        .collect()
}

/// Normals from central-difference depth gradients (one-sided at borders).
/// `pixel_size` is the world-space width of a pixel.
pub fn derive_normals_from_depth(depth: &Plane, pixel_size: f64) -> Plane {
    let (h, w) = (depth.height, depth.width);
    let z = |y: usize, x: usize| depth.at(y, x) as f64;
    let mut out = Plane::filled(h, w, 3, 0.0);
    for y in 0..h {
        for x in 0..w {
            let gx = if w < 2 {
                0.0
            } else {
                let (a, b) = (x.saturating_sub(1), (x + 1).min(w - 1));
                (z(y, b) - z(y, a)) / ((b - a) as f64 * pixel_size)
            };
            let gy = if h < 2 {
                0.0
            } else {
                let (a, b) = (y.saturating_sub(1), (y + 1).min(h - 1));
                (z(b, x) - z(a, x)) / ((b - a) as f64 * pixel_size)
            };
            let n = normalize([-gx, -gy, 1.0]);
            for c in 0..3 {
                out.pixel_mut(y, x)[c] = n[c] as f32;
            }
        }
    }
    out
}

/// World-space pixel width for a square image spanning `[-1, 1]`.
pub fn pixel_size(image_size: usize) -> f64 {
    2.0 / image_size as f64
}

struct Header {
    count: u64,
    height: u32,
    width: u32,
    registry: ModalityRegistry,
    data_offset: u64,
}

fn record_len(registry: &ModalityRegistry, height: usize, width: usize) -> u64 {
    let floats: usize = registry
        .iter()
        .map(|s| s.codec.native_channels(s.channels) * height * width)
        .sum();
    12 + 4 * floats as u64
}

/// Writes samples into a single-file container.
pub fn write_dataset<W: Write>(
    out: W,
    registry: &ModalityRegistry,
    samples: &[MultiModalSample],
) -> Result<()> {
    let mut out = BufWriter::new(out);
    let (h, w) = samples.first().map_or((0, 0), |s| (s.height(), s.width()));
    let blob = registry.to_text();
    out.write_all(DATASET_MAGIC)?;
    out.write_all(&DATASET_VERSION.to_le_bytes())?;
    out.write_all(&(samples.len() as u64).to_le_bytes())?;
    out.write_all(&(h as u32).to_le_bytes())?;
    out.write_all(&(w as u32).to_le_bytes())?;
    out.write_all(&(blob.len() as u32).to_le_bytes())?;
    out.write_all(blob.as_bytes())?;
    for (i, s) in samples.iter().enumerate() {
        s.validate(registry)
            .map_err(|e| Error::Validation(format!("sample {i}: {e}")))?;
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::Argument(format!("sample {i} has a different image size")));
        }
        out.write_all(&s.class_id.to_le_bytes())?;
        out.write_all(&s.depth_range.min.to_le_bytes())?;
        out.write_all(&s.depth_range.max.to_le_bytes())?;
        for p in &s.planes {
            for v in &p.data {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_dataset_file(
    path: &Path,
    registry: &ModalityRegistry,
    samples: &[MultiModalSample],
) -> Result<()> {
    write_dataset(File::create(path)?, registry, samples)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("dataset is truncated".into())
    } else {
        Error::Io(e)
    }
}

/// Random-access reader over a dataset container.
pub struct DatasetReader<R> {
    inner: R,
    header: Header,
}

impl DatasetReader<File> {
    pub fn open(path: &Path) -> Result<Self> {
        Self::new(File::open(path)?)
    }
}

impl<R: Read + Seek> DatasetReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        inner.seek(SeekFrom::Start(0))?;
        let mut magic = [0u8; 4];
        inner.read_exact(&mut magic).map_err(truncated)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = read_u32(&mut inner)?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let mut c = [0u8; 8];
        inner.read_exact(&mut c).map_err(truncated)?;
        let count = u64::from_le_bytes(c);
        let height = read_u32(&mut inner)?;
        let width = read_u32(&mut inner)?;
        let blob_len = read_u32(&mut inner)?;
        if blob_len > MAX_REGISTRY_BLOB {
            return Err(Error::Format(format!("registry blob of {blob_len} bytes")));
        }
        let mut blob = vec![0u8; blob_len as usize];
        inner.read_exact(&mut blob).map_err(truncated)?;
        let text = String::from_utf8(blob)
            .map_err(|_| Error::Format("registry blob is not UTF-8".into()))?;
        let registry = ModalityRegistry::from_text(&text)?;
        let data_offset = HEADER_LEN + blob_len as u64;
        let stride = record_len(&registry, height as usize, width as usize);
        let expected = count
            .checked_mul(stride)
            .and_then(|n| n.checked_add(data_offset))
            .ok_or_else(|| Error::Format("dataset size overflows".into()))?;
        let actual = inner.seek(SeekFrom::End(0))?;
        if actual < expected {
            return Err(Error::Format(format!(
                "dataset is truncated: {actual} bytes, expected {expected}"
            )));
        }
        if actual > expected {
            return Err(Error::Format(format!(
                "dataset has {} trailing bytes",
                actual - expected
            )));
        }
        Ok(Self {
            inner,
            header: Header {
                count,
                height,
                width,
                registry,
                data_offset,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.header.count as usize
    }

    pub fn is_empty(&self) -> bool {
        self.header.count == 0
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.header.height as usize, self.header.width as usize)
    }

    pub fn registry(&self) -> &ModalityRegistry {
        &self.header.registry
    }

    /// Fails unless the stored registry equals `expected`.
    pub fn require_registry(&self, expected: &ModalityRegistry) -> Result<()> {
        if &self.header.registry != expected {
            return Err(Error::Mismatch(format!(
                "dataset modalities [{}] differ from expected [{}]",
                names(&self.header.registry),
                names(expected)
            )));
        }
        Ok(())
    }

    pub fn get(&mut self, index: usize) -> Result<MultiModalSample> {
        if index >= self.len() {
            return Err(Error::Argument(format!(
                "index {index} out of range for {} samples",
                self.len()
            )));
        }
        let (h, w) = self.image_size();
        let reg = &self.header.registry;
        let stride = record_len(reg, h, w);
        self.inner
            .seek(SeekFrom::Start(self.header.data_offset + index as u64 * stride))?;
        let mut buf = vec![0u8; stride as usize];
        self.inner.read_exact(&mut buf).map_err(truncated)?;
        let word = |i: usize| [buf[i], buf[i + 1], buf[i + 2], buf[i + 3]];
        let class_id = u32::from_le_bytes(word(0));
        let depth_range = DepthRange {
            min: f32::from_le_bytes(word(4)),
            max: f32::from_le_bytes(word(8)),
        };
        let mut at = 12;
        let mut planes = Vec::with_capacity(reg.len());
        for spec in reg.iter() {
            let c = spec.codec.native_channels(spec.channels);
            let data = (0..h * w * c)
                .map(|k| f32::from_le_bytes(word(at + 4 * k)))
                .collect();
            at += 4 * h * w * c;
            planes.push(Plane::new(h, w, c, data)?);
        }
        let sample = MultiModalSample {
            class_id,
            depth_range,
            planes,
        };
        sample
            .validate(reg)
            .map_err(|e| Error::Format(format!("sample {index}: {e}")))?;
        Ok(sample)
    }

    pub fn read_all(&mut self) -> Result<Vec<MultiModalSample>> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}

fn names(reg: &ModalityRegistry) -> String {
    reg.iter().map(|s| s.name.as_str()).collect::<Vec<_>>().join(", ")
}

pub fn read_dataset_file(path: &Path) -> Result<(ModalityRegistry, Vec<MultiModalSample>)> {
    let mut r = DatasetReader::open(path)?;
    let samples = r.read_all()?;
    Ok((r.registry().clone(), samples))
}

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Text manifest: counts, class histogram and checksum of a dataset file.
pub fn dataset_manifest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut reader = DatasetReader::new(std::io::Cursor::new(&bytes))?;
    let mut histogram = vec![0usize; NUM_SCENE_CLASSES as usize];
    for i in 0..reader.len() {
        let s = reader.get(i)?;
        if let Some(slot) = histogram.get_mut(s.class_id as usize) {
            *slot += 1;
        }
    }
    let (h, w) = reader.image_size();
    let mut out = String::new();
    out.push_str(&format!("file: {}\n", path.display()));
    out.push_str(&format!("count: {}\n", reader.len()));
    out.push_str(&format!("image_size: {h}x{w}\n"));
    out.push_str(&format!("modalities: {}\n", names(reader.registry())));
    for (k, n) in histogram.iter().enumerate() {
        out.push_str(&format!("class_{k}: {n}\n"));
    }
    out.push_str(&format!("sha256: {}\n", sha256_hex(&bytes)));
    Ok(out)
}
