//! Grid images of decoded samples.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mmgen_core::image::{channels_to_image, grid, RgbImage};
use mmgen_core::modality::{ChannelPlane, ModalityRegistry};
use mmgen_core::sample::MultiModalSample;

pub const GRID_PAD: usize = 2;

/// One cell per modality, from the re-encoded sample so that seg snaps to
/// its palette and normals are unit length.
pub fn sample_row(sample: &MultiModalSample, registry: &ModalityRegistry) -> Result<Vec<RgbImage>> {
    Ok(sample.encode(registry)?.iter().map(channels_to_image).collect())
}

pub fn cell(plane: &ChannelPlane) -> RgbImage {
    channels_to_image(plane)
}

/// Writes `grid.ppm`, plus `grid.png` when asked. Returns the paths written.
pub fn write_grid(rows: &[Vec<RgbImage>], out: &Path, png: bool) -> Result<Vec<PathBuf>> {
    let g = grid(rows, GRID_PAD)?;
    let ppm = out.join("grid.ppm");
    g.write_ppm(&ppm)?;
    let mut written = vec![ppm];
    if png {
        let path = out.join("grid.png");
        image::save_buffer(&path, &g.data, g.width as u32, g.height as u32, image::ExtendedColorType::Rgb8)
            .with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}
