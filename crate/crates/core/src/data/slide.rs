//! Procedural stand-ins for whole-slide images: a tissue mask of large
//! overlapping discs over a pale background, textured with class-specific
//! stroma colour and disc-shaped nuclei.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

pub const NUM_CLASSES: usize = 5;
pub const DEFAULT_EXTENT: usize = 2048;
pub const DEFAULT_MPP: f64 = 0.875;

const BACKGROUND: [f64; 3] = [0.94, 0.93, 0.95];
const BACKGROUND_NOISE: f64 = 0.005;
const TISSUE_NOISE: f64 = 0.03;
const PALETTE_JITTER: f64 = 0.03;
const RATE_JITTER: f64 = 0.1;

/// Per-class texture parameters. Colours are RGB in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    pub background: [f64; 3],
    /// Stroma, nucleus and accent colours.
    pub palette: [[f64; 3]; 3],
    /// Fraction of nuclei drawn in the accent colour.
    pub accent_frac: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Expected number of nuclei covering a point, `λ·π·E[r²]`.
    pub cover_rate: f64,
}

const CLASS_TABLE: [TextureParams; NUM_CLASSES] = [
    TextureParams {
        background: BACKGROUND,
        palette: [[0.93, 0.75, 0.82], [0.45, 0.25, 0.60], [0.80, 0.45, 0.60]],
        accent_frac: 0.2,
        radius_min: 10.0,
        radius_max: 16.0,
        cover_rate: 0.5,
    },
    TextureParams {
        background: BACKGROUND,
        palette: [[0.88, 0.62, 0.74], [0.35, 0.18, 0.52], [0.95, 0.85, 0.90]],
        accent_frac: 0.4,
        radius_min: 6.0,
        radius_max: 10.0,
        cover_rate: 0.9,
    },
    TextureParams {
        background: BACKGROUND,
        palette: [[0.80, 0.55, 0.70], [0.30, 0.12, 0.45], [0.60, 0.30, 0.55]],
        accent_frac: 0.3,
        radius_min: 18.0,
        radius_max: 28.0,
        cover_rate: 0.6,
    },
    TextureParams {
        background: BACKGROUND,
        palette: [[0.95, 0.80, 0.75], [0.50, 0.30, 0.45], [0.75, 0.40, 0.40]],
        accent_frac: 0.5,
        radius_min: 12.0,
        radius_max: 20.0,
        cover_rate: 1.0,
    },
    TextureParams {
        background: BACKGROUND,
        palette: [[0.85, 0.70, 0.88], [0.25, 0.20, 0.55], [0.55, 0.55, 0.80]],
        accent_frac: 0.25,
        radius_min: 24.0,
        radius_max: 40.0,
        cover_rate: 0.4,
    },
];

impl TextureParams {
    /// Nominal parameters of a class, before per-slide jitter.
    pub fn nominal(class: usize) -> Result<Self> {
        CLASS_TABLE
            .get(class)
            .copied()
            .ok_or_else(|| Error::Parameter(format!("class {class} out of range 0..{NUM_CLASSES}")))
    }

    /// Parameters of slide `(class, seed)`: nominal values with small
    /// seeded perturbations of the palette and nucleus density.
    pub fn draw(class: usize, seed: u64) -> Result<Self> {
        let mut p = Self::nominal(class)?;
        let mut rng = RngStream::with_stream(seed, 0x7e47).child(class as u64);
        for colour in p.palette.iter_mut() {
            for v in colour.iter_mut() {
                *v = (*v + PALETTE_JITTER * (2.0 * rng.uniform() - 1.0)).clamp(0.0, 1.0);
            }
        }
        p.cover_rate *= 1.0 + RATE_JITTER * (2.0 * rng.uniform() - 1.0);
        Ok(p)
    }

    pub fn mean_radius_sq(&self) -> f64 {
        let (a, b) = (self.radius_min, self.radius_max);
        (a * a + a * b + b * b) / 3.0
    }

    /// Expected fraction of tissue covered by at least one nucleus.
    pub fn coverage(&self) -> f64 {
        1.0 - (-self.cover_rate).exp()
    }

    /// Expected colour of a tissue pixel.
    pub fn tissue_mean(&self) -> [f64; 3] {
        let c = self.coverage();
        let mut out = [0.0; 3];
        for (ch, o) in out.iter_mut().enumerate() {
            let nucleus = (1.0 - self.accent_frac) * self.palette[1][ch] + self.accent_frac * self.palette[2][ch];
            *o = (1.0 - c) * self.palette[0][ch] + c * nucleus;
        }
        out
    }
}

/// An RGB raster with its tissue mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSlide {
    pub class: usize,
    pub seed: u64,
    pub extent: usize,
    pub mpp: f64,
    pub params: TextureParams,
    /// Interleaved RGB, row-major, `extent × extent × 3`.
    pub pixels: Vec<u8>,
    pub tissue: Vec<bool>,
}

impl SyntheticSlide {
    pub fn rgb(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.extent + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn is_tissue(&self, x: usize, y: usize) -> bool {
        self.tissue[y * self.extent + x]
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders slide `(class, seed)` at the default extent and resolution.
pub fn generate_slide(class: usize, seed: u64) -> Result<SyntheticSlide> {
    generate_slide_with(class, seed, DEFAULT_EXTENT, DEFAULT_MPP)
}

pub fn generate_slide_with(class: usize, seed: u64, extent: usize, mpp: f64) -> Result<SyntheticSlide> {
    let params = TextureParams::draw(class, seed)?;
    if extent < 16 {
        return Err(Error::Parameter(format!("slide extent {extent} too small")));
    }
    if !(mpp.is_finite() && mpp > 0.0) {
        return Err(Error::Parameter(format!("slide mpp must be positive, got {mpp}")));
    }
    let base = RngStream::with_stream(seed, 0x511de).child(class as u64);
    let n = extent;
    let ext = n as f64;

    // tissue: union of large discs
    let mut rng = base.child(0);
    let mut tissue = vec![false; n * n];
    let n_regions = 4 + rng.below(4);
    for _ in 0..n_regions {
        let cx = ext * (0.15 + 0.7 * rng.uniform());
        let cy = ext * (0.15 + 0.7 * rng.uniform());
        let r = ext * (0.18 + 0.17 * rng.uniform());
        paint_disc(n, cx, cy, r, |i| tissue[i] = true);
    }

    // colour index per pixel: 0 stroma, 1 nucleus, 2 accent
    let mut rng = base.child(1);
    let mut label = vec![0u8; n * n];
    let rate = params.cover_rate / (std::f64::consts::PI * params.mean_radius_sq());
    let margin = params.radius_max;
    let span = ext + 2.0 * margin;
    let count = (rate * span * span).round() as usize;
    for _ in 0..count {
        let cx = span * rng.uniform() - margin;
        let cy = span * rng.uniform() - margin;
        let r = params.radius_min + (params.radius_max - params.radius_min) * rng.uniform();
        let colour = if rng.uniform() < params.accent_frac { 2 } else { 1 };
        paint_disc(n, cx, cy, r, |i| label[i] = colour);
    }

    let rows: Vec<Vec<u8>> = {
        use rayon::prelude::*;
        (0..n)
            .into_par_iter()
            .map(|y| {
                let noise = base.child(2 + y as u64).gaussian::<f64>(&[3 * n]);
                let noise = noise.data();
                let mut row = Vec::with_capacity(3 * n);
                for x in 0..n {
                    let i = y * n + x;
                    let (colour, sd) = if tissue[i] {
                        (params.palette[label[i] as usize], TISSUE_NOISE)
                    } else {
                        (params.background, BACKGROUND_NOISE)
                    };
                    for (c, z) in colour.iter().zip(&noise[3 * x..3 * x + 3]) {
                        row.push(quantize(c + sd * z));
                    }
                }
                row
            })
            .collect()
    };
    Ok(SyntheticSlide {
        class,
        seed,
        extent: n,
        mpp,
        params,
        pixels: rows.concat(),
        tissue,
    })
}

/// Calls `f` with the flat index of every pixel whose centre lies inside
/// the disc.
fn paint_disc(n: usize, cx: f64, cy: f64, r: f64, mut f: impl FnMut(usize)) {
    let y0 = (cy - r - 0.5).ceil().max(0.0) as usize;
    let y1 = ((cy + r - 0.5).floor() + 1.0).clamp(0.0, n as f64) as usize;
    for y in y0..y1 {
        let dy = y as f64 + 0.5 - cy;
        let half = r * r - dy * dy;
        if half < 0.0 {
            continue;
        }
        let half = half.sqrt();
        let x0 = (cx - half - 0.5).ceil().max(0.0) as usize;
        let x1 = ((cx + half - 0.5).floor() + 1.0).clamp(0.0, n as f64) as usize;
        for x in x0..x1 {
            f(y * n + x);
        }
    }
}

/// Seed of slide `index` of `class` within a dataset seeded by `seed`.
pub fn slide_seed(seed: u64, class: usize, index: usize) -> u64 {
    let mut rng = RngStream::with_stream(seed, 0x5eed).child(((class as u64) << 32) | index as u64);
    rng.with_engine(|r| rand::RngCore::next_u64(r))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let a = generate_slide_with(2, 9, 128, DEFAULT_MPP).unwrap();
        let b = generate_slide_with(2, 9, 128, DEFAULT_MPP).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn classes_draw_distinct_parameters() {
        for a in 0..NUM_CLASSES {
            for b in (a + 1)..NUM_CLASSES {
                assert_ne!(TextureParams::draw(a, 3).unwrap(), TextureParams::draw(b, 3).unwrap());
            }
        }
        assert!(generate_slide(5, 0).is_err());
    }

    #[test]
    fn disc_pixel_count() {
        let mut count = 0;
        paint_disc(200, 100.0, 100.0, 30.0, |_| count += 1);
        let area = std::f64::consts::PI * 900.0;
        assert!((count as f64 - area).abs() < 0.02 * area);
    }

    #[test]
    fn slide_seeds_differ() {
        assert_ne!(slide_seed(1, 0, 0), slide_seed(1, 0, 1));
        assert_ne!(slide_seed(1, 0, 0), slide_seed(1, 1, 0));
        assert_eq!(slide_seed(1, 2, 3), slide_seed(1, 2, 3));
    }
}
