//! Binary PPM (P6) images and modality visualisation.

use std::io::Write;
use std::path::Path;

use crate::error::{arg, format_err, Error, Result};
use crate::modality::{nearest_seg_label, seg_palette, ChannelPlane, CodecId, ModalitySpec};

/// Largest image accepted by the reader, in pixels.
pub const MAX_PIXELS: usize = 1 << 24;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        Self {
            width,
            height,
            data: fill.repeat(width * height),
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_ppm())?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        parse_ppm(&std::fs::read(path)?)
    }
}

/// Parses a binary P6 pixmap with maxval up to 255. Comments are allowed in
/// the header.
pub fn parse_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let mut at = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while at < bytes.len() && (bytes[at].is_ascii_whitespace() || bytes[at] == b'#') {
            if bytes[at] == b'#' {
                while at < bytes.len() && bytes[at] != b'\n' {
                    at += 1;
                }
            } else {
                at += 1;
            }
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() && bytes[at] != b'#' {
            at += 1;
        }
        if start == at {
            return format_err("truncated PPM header");
        }
        fields.push(&bytes[start..at]);
    }
    if fields[0] != b"P6" {
        return format_err("not a binary PPM (P6)");
    }
    let num = |f: &[u8]| -> Result<usize> {
        std::str::from_utf8(f)
            .ok()
            .filter(|s| s.len() <= 9 && s.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad PPM header number".into()))
    };
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if width == 0 || height == 0 || width.saturating_mul(height) > MAX_PIXELS {
        return format_err(format!("unsupported PPM size {width}x{height}"));
    }
    if maxval == 0 || maxval > 255 {
        return format_err(format!("unsupported PPM maxval {maxval}"));
    }
    if at >= bytes.len() || !bytes[at].is_ascii_whitespace() {
        return format_err("truncated PPM header");
    }
    at += 1;
    let n = 3 * width * height;
    if bytes.len() - at != n {
        return format_err(format!("PPM body has {} bytes, expected {n}", bytes.len() - at));
    }
    let data = bytes[at..]
        .iter()
        .map(|&v| {
            if v as usize > maxval {
                Err(Error::Format(format!("PPM sample {v} above maxval {maxval}")))
            } else {
                Ok(((v as usize * 255 + maxval / 2) / maxval) as u8)
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(RgbImage {
        width,
        height,
        data,
    })
}

fn to_byte(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

fn from_byte(b: u8) -> f64 {
    b as f64 / 255.0 * 2.0 - 1.0
}

/// Renders encoded channels: three-channel modalities map `[-1, 1]` to
/// colors directly, others show their mean channel as grey.
pub fn channels_to_image(plane: &ChannelPlane) -> RgbImage {
    let mut img = RgbImage::new(plane.width, plane.height, [0; 3]);
    for y in 0..plane.height {
        for x in 0..plane.width {
            let p = plane.pixel(y, x);
            let rgb = if p.len() == 3 {
                [to_byte(p[0]), to_byte(p[1]), to_byte(p[2])]
            } else {
                let g = to_byte(p.iter().sum::<f64>() / p.len() as f64);
                [g; 3]
            };
            img.put(y, x, rgb);
        }
    }
    img
}

/// Reads an image rendered by [`channels_to_image`] back into encoded
/// channels for `spec`.
pub fn image_to_channels(img: &RgbImage, spec: &ModalitySpec) -> Result<ChannelPlane> {
    let c = spec.channels;
    let mut data = Vec::with_capacity(img.width * img.height * c);
    for px in img.data.chunks_exact(3) {
        let v = [from_byte(px[0]), from_byte(px[1]), from_byte(px[2])];
        match spec.codec {
            CodecId::Rgb => data.extend_from_slice(&v),
            CodecId::Normal => {
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n < 1e-12 {
                    data.extend_from_slice(&[0.0, 0.0, 1.0]);
                } else {
                    data.extend(v.iter().map(|x| x / n));
                }
            }
            CodecId::SegPalette16 => {
                data.extend_from_slice(&seg_palette()[nearest_seg_label(&v) as usize]);
            }
            CodecId::DepthMinmax | CodecId::UnitScalar => {
                let g = (v[0] + v[1] + v[2]) / 3.0;
                data.extend(std::iter::repeat_n(g, c));
            }
        }
    }
    if spec.codec == CodecId::Rgb && c != 3 {
        return arg("rgb modality must have three channels");
    }
    ChannelPlane::new(img.height, img.width, c, data)
}

/// Tiles equally sized cells into rows with a `pad`-pixel white gutter.
pub fn grid(rows: &[Vec<RgbImage>], pad: usize) -> Result<RgbImage> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::Argument("empty image grid".into()))?;
    let (cw, ch) = (first.width, first.height);
    let cols = rows[0].len();
    for r in rows {
        if r.len() != cols || r.iter().any(|c| c.width != cw || c.height != ch) {
            return arg("grid cells must share a size and every row the same length");
        }
    }
    let width = cols * cw + (cols + 1) * pad;
    let height = rows.len() * ch + (rows.len() + 1) * pad;
    let mut out = RgbImage::new(width, height, [255; 3]);
    for (ri, row) in rows.iter().enumerate() {
        for (ci, cell) in row.iter().enumerate() {
            let (oy, ox) = (pad + ri * (ch + pad), pad + ci * (cw + pad));
            for y in 0..ch {
                for x in 0..cw {
                    out.put(oy + y, ox + x, cell.pixel(y, x));
                }
            }
        }
    }
    Ok(out)
}

/// Cuts cell `(row, col)` back out of a grid made by [`grid`].
pub fn grid_cell(g: &RgbImage, cell: (usize, usize), pad: usize, row: usize, col: usize) -> Result<RgbImage> {
    let (cw, ch) = cell;
    let (oy, ox) = (pad + row * (ch + pad), pad + col * (cw + pad));
    if oy + ch > g.height || ox + cw > g.width {
        return arg("grid cell outside the image");
    }
    let mut out = RgbImage::new(cw, ch, [0; 3]);
    for y in 0..ch {
        for x in 0..cw {
            out.put(y, x, g.pixel(oy + y, ox + x));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modality::ModalityRegistry;
    use crate::synth::generate_indexed;

    #[test]
    fn ppm_round_trip() {
        let mut img = RgbImage::new(3, 2, [10, 20, 30]);
        img.put(1, 2, [255, 0, 7]);
        let bytes = img.to_ppm();
        assert_eq!(parse_ppm(&bytes).unwrap(), img);
        let commented = [b"P6 # made by hand\n3 2\n255\n".as_slice(), &img.data].concat();
        assert_eq!(parse_ppm(&commented).unwrap(), img);
    }

    #[test]
    fn ppm_rejects_bad_input() {
        let img = RgbImage::new(2, 2, [1, 2, 3]).to_ppm();
        assert!(parse_ppm(&img[..img.len() - 1]).is_err());
        assert!(parse_ppm(b"P3\n1 1\n255\n000").is_err());
        assert!(parse_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(parse_ppm(b"P6\n99999 99999\n255\n").is_err());
        assert!(parse_ppm(b"P6\n1 1\n").is_err());
        assert!(parse_ppm(b"").is_err());
    }

    #[test]
    fn low_maxval_rescales() {
        let img = parse_ppm(b"P6\n1 1\n1\n\x01\x00\x01").unwrap();
        assert_eq!(img.data, vec![255, 0, 255]);
    }

    #[test]
    fn visualisation_round_trips_discrete_modalities() {
        let reg = ModalityRegistry::standard();
        let s = generate_indexed(2, 0, 16, &reg).unwrap();
        let enc = s.encode(&reg).unwrap();
        let seg = reg.get(3);
        let back = image_to_channels(&channels_to_image(&enc[3]), seg).unwrap();
        assert_eq!(back, enc[3]);
        let rgb = image_to_channels(&channels_to_image(&enc[0]), reg.get(0)).unwrap();
        assert!(rgb.mean_abs_diff(&enc[0]) < 1.0 / 255.0);
        let depth = image_to_channels(&channels_to_image(&enc[1]), reg.get(1)).unwrap();
        assert!(depth.mean_abs_diff(&enc[1]) < 1.0 / 255.0);
    }

    #[test]
    fn grid_layout() {
        let cells: Vec<Vec<RgbImage>> = (0..3)
            .map(|r| (0..4).map(|c| RgbImage::new(5, 5, [r * 10, c * 10, 1])).collect())
            .collect();
        let g = grid(&cells, 2).unwrap();
        assert_eq!((g.width, g.height), (4 * 5 + 5 * 2, 3 * 5 + 4 * 2));
        assert_eq!(grid_cell(&g, (5, 5), 2, 2, 3).unwrap(), cells[2][3]);
        assert_eq!(g.pixel(0, 0), [255; 3]);
        assert!(grid(&[vec![RgbImage::new(5, 5, [0; 3]), RgbImage::new(4, 5, [0; 3])]], 1).is_err());
    }
}
