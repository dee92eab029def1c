//! Seeded perturbation rosters and raster resampling for the perturbed views.

use std::io::Cursor;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ImageDims, TransformSpec};

pub const DEFAULT_VIEW_COUNT: usize = 7;
pub const ROTATION_DEGREES: f64 = 3.0;
pub const SCALE_FACTORS: [f64; 2] = [0.9, 1.1];
pub const MAX_TRANSLATION_PX: i32 = 20;

#[derive(Debug, Error)]
pub enum ViewError {
    #[error("view count must be at least 1")]
    InvalidCount,
    #[error("unsupported image: {0}")]
    UnsupportedImage(String),
}

/// How the rotation angle of a roster slot is chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationSampling {
    /// Exactly +3 and -3 degrees.
    #[default]
    Endpoints,
    /// Uniform in [-3, 3] degrees, drawn from the roster generator.
    Uniform,
}

/// Ordered perturbations applied to one image, plus the seed that made them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRoster {
    pub seed: u64,
    pub specs: Vec<TransformSpec>,
}

impl ViewRoster {
    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// `m` identity views, used when stochasticity comes from decoding rather
    /// than from the image.
    pub fn identity(m: usize) -> Self {
        Self {
            seed: 0,
            specs: vec![TransformSpec::Identity; m],
        }
    }
}

pub fn make_roster(seed: u64, m: usize) -> Result<ViewRoster, ViewError> {
    make_roster_with(seed, m, RotationSampling::Endpoints)
}

/// For `m = 7` the roster is two rotations, two scales, two translations and
/// one horizontal flip, in that order. Other counts cycle through the four
/// families (rotate, scale, translate, flip), alternating the sign of the
/// rotation and the zoom direction. Translation offsets are integer pixels in
/// `[-20, 20]` from a ChaCha8 stream seeded with `seed`.
pub fn make_roster_with(
    seed: u64,
    m: usize,
    rotation: RotationSampling,
) -> Result<ViewRoster, ViewError> {
    if m == 0 {
        return Err(ViewError::InvalidCount);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rotate = |rng: &mut ChaCha8Rng, sign: f64| match rotation {
        RotationSampling::Endpoints => TransformSpec::Rotate {
            degrees: sign * ROTATION_DEGREES,
        },
        RotationSampling::Uniform => TransformSpec::Rotate {
            degrees: rng.random_range(-ROTATION_DEGREES..=ROTATION_DEGREES),
        },
    };
    let translate = |rng: &mut ChaCha8Rng| TransformSpec::Translate {
        dx: f64::from(rng.random_range(-MAX_TRANSLATION_PX..=MAX_TRANSLATION_PX)),
        dy: f64::from(rng.random_range(-MAX_TRANSLATION_PX..=MAX_TRANSLATION_PX)),
    };

    let specs = if m == DEFAULT_VIEW_COUNT {
        vec![
            rotate(&mut rng, 1.0),
            rotate(&mut rng, -1.0),
            TransformSpec::Scale {
                factor: SCALE_FACTORS[0],
            },
            TransformSpec::Scale {
                factor: SCALE_FACTORS[1],
            },
            translate(&mut rng),
            translate(&mut rng),
            TransformSpec::HorizontalFlip,
        ]
    } else {
        (0..m)
            .map(|i| {
                let round = i / 4;
                match i % 4 {
                    0 => rotate(&mut rng, if round % 2 == 0 { 1.0 } else { -1.0 }),
                    1 => TransformSpec::Scale {
                        factor: SCALE_FACTORS[round % 2],
                    },
                    2 => translate(&mut rng),
                    _ => TransformSpec::HorizontalFlip,
                }
            })
            .collect()
    };
    Ok(ViewRoster { seed, specs })
}

/// 8-bit raster with interleaved channels (1 = gray, 3 = RGB).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    dims: ImageDims,
    channels: u8,
    pixels: Vec<u8>,
    source: String,
}

impl RasterImage {
    pub fn new(
        dims: ImageDims,
        channels: u8,
        pixels: Vec<u8>,
        source: impl Into<String>,
    ) -> Result<Self, ViewError> {
        if !matches!(channels, 1 | 3) {
            return Err(ViewError::UnsupportedImage(format!(
                "{channels} channels (expected 1 or 3)"
            )));
        }
        let expected = dims.width as usize * dims.height as usize * channels as usize;
        if pixels.len() != expected {
            return Err(ViewError::UnsupportedImage(format!(
                "buffer holds {} bytes, {}x{}x{} needs {expected}",
                pixels.len(),
                dims.width,
                dims.height,
                channels
            )));
        }
        Ok(Self {
            dims,
            channels,
            pixels,
            source: source.into(),
        })
    }

    /// Reads PNG or JPEG. Grayscale stays single-channel; everything else is
    /// converted to RGB.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ViewError> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| ViewError::UnsupportedImage(format!("{}: {e}", path.display())))?;
        Self::from_dynamic(img, path.display().to_string())
    }

    pub fn from_dynamic(img: image::DynamicImage, source: String) -> Result<Self, ViewError> {
        let dims = ImageDims::new(img.width(), img.height())
            .map_err(|e| ViewError::UnsupportedImage(e.to_string()))?;
        match img {
            image::DynamicImage::ImageLuma8(buf) => Self::new(dims, 1, buf.into_raw(), source),
            other => Self::new(dims, 3, other.to_rgb8().into_raw(), source),
        }
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ViewError> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        let mut out = Cursor::new(Vec::new());
        image::write_buffer_with_format(
            &mut out,
            &self.pixels,
            self.dims.width,
            self.dims.height,
            color,
            image::ImageFormat::Png,
        )
        .map_err(|e| ViewError::UnsupportedImage(e.to_string()))?;
        Ok(out.into_inner())
    }

    fn at(&self, x: usize, y: usize, ch: usize) -> u8 {
        let idx = (y * self.dims.width as usize + x) * self.channels as usize + ch;
        self.pixels[idx]
    }
}

/// Render the view of `img` under `t`: bilinear resampling, black outside the
/// source frame. The output canvas follows [`TransformSpec::output_dims`].
pub fn render_view(img: &RasterImage, t: &TransformSpec) -> Result<RasterImage, ViewError> {
    let src_dims = img.dims;
    let out_dims = t.output_dims(src_dims);
    let ch = img.channels as usize;
    let (w, h) = (src_dims.width as usize, src_dims.height as usize);

    let pixels = match t {
        TransformSpec::Identity => img.pixels.clone(),
        TransformSpec::HorizontalFlip => {
            let mut out = Vec::with_capacity(img.pixels.len());
            for y in 0..h {
                for x in (0..w).rev() {
                    for c in 0..ch {
                        out.push(img.at(x, y, c));
                    }
                }
            }
            out
        }
        _ => {
            let back = t.inverse_map(src_dims);
            let (ow, oh) = (out_dims.width as usize, out_dims.height as usize);
            let mut out = vec![0u8; ow * oh * ch];
            for v in 0..oh {
                for u in 0..ow {
                    let (sx, sy) = back.apply((u as f64 + 0.5, v as f64 + 0.5));
                    let base = (v * ow + u) * ch;
                    sample_bilinear(img, sx - 0.5, sy - 0.5, &mut out[base..base + ch]);
                }
            }
            out
        }
    };
    RasterImage::new(out_dims, img.channels, pixels, img.source.clone())
}

/// `(fx, fy)` in pixel-index space; positions more than half a pixel outside
/// the frame are black, positions inside clamp their neighbors to the edge.
fn sample_bilinear(img: &RasterImage, fx: f64, fy: f64, dst: &mut [u8]) {
    let w = img.dims.width as f64;
    let h = img.dims.height as f64;
    if fx < -0.5 || fy < -0.5 || fx > w - 0.5 || fy > h - 0.5 {
        dst.fill(0);
        return;
    }
    let max_x = img.dims.width as i64 - 1;
    let max_y = img.dims.height as i64 - 1;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let tx = fx - x0;
    let ty = fy - y0;
    let xi0 = (x0 as i64).clamp(0, max_x) as usize;
    let xi1 = (x0 as i64 + 1).clamp(0, max_x) as usize;
    let yi0 = (y0 as i64).clamp(0, max_y) as usize;
    let yi1 = (y0 as i64 + 1).clamp(0, max_y) as usize;
    for (c, slot) in dst.iter_mut().enumerate() {
        let p00 = f64::from(img.at(xi0, yi0, c));
        let p10 = f64::from(img.at(xi1, yi0, c));
        let p01 = f64::from(img.at(xi0, yi1, c));
        let p11 = f64::from(img.at(xi1, yi1, c));
        let top = p00 + (p10 - p00) * tx;
        let bottom = p01 + (p11 - p01) * tx;
        *slot = (top + (bottom - top) * ty).round().clamp(0.0, 255.0) as u8;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: u32, h: u32, channels: u8) -> RasterImage {
        let dims = ImageDims::new(w, h).unwrap();
        let mut px = Vec::new();
        for y in 0..h {
            for x in 0..w {
                for c in 0..channels {
                    px.push(((x * 7 + y * 3 + u32::from(c) * 50) % 256) as u8);
                }
            }
        }
        RasterImage::new(dims, channels, px, "gradient").unwrap()
    }

    #[test]
    fn default_roster_families() {
        let r = make_roster(1, 7).unwrap();
        assert_eq!(r.len(), 7);
        let flips = r
            .specs
            .iter()
            .filter(|s| matches!(s, TransformSpec::HorizontalFlip))
            .count();
        assert_eq!(flips, 1);
        let rotations: Vec<f64> = r
            .specs
            .iter()
            .filter_map(|s| match s {
                TransformSpec::Rotate { degrees } => Some(*degrees),
                _ => None,
            })
            .collect();
        assert_eq!(rotations, vec![3.0, -3.0]);
        for s in &r.specs {
            if let TransformSpec::Translate { dx, dy } = s {
                assert!(dx.abs() <= 20.0 && dy.abs() <= 20.0);
                assert_eq!(dx.fract(), 0.0);
            }
        }
    }

    #[test]
    fn roster_deterministic_and_seed_only_moves_translations() {
        let a = make_roster(1, 7).unwrap();
        assert_eq!(a, make_roster(1, 7).unwrap());
        let b = make_roster(2, 7).unwrap();
        assert_ne!(a.specs, b.specs);
        for (x, y) in a.specs.iter().zip(&b.specs) {
            match (x, y) {
                (TransformSpec::Translate { .. }, TransformSpec::Translate { .. }) => {}
                _ => assert_eq!(x, y),
            }
        }
    }

    #[test]
    fn zero_views_rejected() {
        assert!(matches!(make_roster(1, 0), Err(ViewError::InvalidCount)));
    }

    #[test]
    fn cyclic_roster_for_other_counts() {
        let r = make_roster(5, 9).unwrap();
        assert_eq!(r.len(), 9);
        assert!(matches!(r.specs[0], TransformSpec::Rotate { degrees } if degrees == 3.0));
        assert!(matches!(r.specs[4], TransformSpec::Rotate { degrees } if degrees == -3.0));
        assert!(matches!(r.specs[3], TransformSpec::HorizontalFlip));
        assert!(matches!(r.specs[8], TransformSpec::Rotate { .. }));
    }

    #[test]
    fn uniform_rotation_stays_in_range() {
        for seed in 0..50 {
            let r = make_roster_with(seed, 7, RotationSampling::Uniform).unwrap();
            for s in &r.specs {
                if let TransformSpec::Rotate { degrees } = s {
                    assert!(degrees.abs() <= 3.0);
                }
            }
        }
    }

    #[test]
    fn identity_and_double_flip_are_pixel_identical() {
        for channels in [1, 3] {
            let img = gradient(17, 11, channels);
            assert_eq!(render_view(&img, &TransformSpec::Identity).unwrap(), img);
            let once = render_view(&img, &TransformSpec::HorizontalFlip).unwrap();
            assert_ne!(once, img);
            let twice = render_view(&once, &TransformSpec::HorizontalFlip).unwrap();
            assert_eq!(twice, img);
        }
    }

    #[test]
    fn scale_changes_canvas() {
        let img = gradient(100, 100, 1);
        let out = render_view(&img, &TransformSpec::Scale { factor: 0.9 }).unwrap();
        assert_eq!(out.dims(), ImageDims::new(90, 90).unwrap());
        let out = render_view(&img, &TransformSpec::Scale { factor: 1.1 }).unwrap();
        assert_eq!(out.dims(), ImageDims::new(110, 110).unwrap());
    }

    #[test]
    fn integer_translation_shifts_pixels_and_fills_black() {
        let img = gradient(20, 10, 1);
        let out = render_view(&img, &TransformSpec::Translate { dx: 3.0, dy: 2.0 }).unwrap();
        assert_eq!(out.dims(), img.dims());
        assert_eq!(out.at(0, 0, 0), 0);
        assert_eq!(out.at(5, 4, 0), img.at(2, 2, 0));
    }

    #[test]
    fn rotation_keeps_dims() {
        let img = gradient(32, 24, 3);
        let out = render_view(&img, &TransformSpec::Rotate { degrees: 3.0 }).unwrap();
        assert_eq!(out.dims(), img.dims());
        // the pivot pixel barely moves
        let c = out.at(16, 12, 0) as i32 - img.at(16, 12, 0) as i32;
        assert!(c.abs() <= 8);
    }

    #[test]
    fn bad_buffers_rejected() {
        let dims = ImageDims::new(2, 2).unwrap();
        assert!(RasterImage::new(dims, 1, vec![0; 3], "x").is_err());
        assert!(RasterImage::new(dims, 2, vec![0; 8], "x").is_err());
    }

    #[test]
    fn png_round_trip() {
        let img = gradient(9, 5, 3);
        let bytes = img.encode_png().unwrap();
        let decoded = image::load_from_memory(&bytes).unwrap();
        let back = RasterImage::from_dynamic(decoded, "gradient".into()).unwrap();
        assert_eq!(back, img);
    }
}
