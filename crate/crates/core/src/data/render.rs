//! Deterministic word rendering onto the 128x32 canvas.
//!
//! Glyphs come from the built-in 5x7 bitmap font, scaled to the largest
//! integer factor that fits the word, centered. Degradations apply in a
//! fixed order: rotation, blur, noise, occlusion. The occluding box is
//! painted last so its region is exactly constant in the output.

use super::font::{glyph, GLYPH_H, GLYPH_W};
use crate::encoder::{ImageTensor, IMG_C, IMG_H, IMG_W};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("no glyph for character {ch:?}")]
    UnrenderableCharacter { ch: char },
    #[error("word length {len} exceeds {max}")]
    WordTooLong { len: usize, max: usize },
}

pub const MAX_WORD_LEN: usize = 25;
const OCCLUSION_FILL: f32 = 0.5;

/// Foreground/background colors as bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Style {
    pub fg: [u8; 3],
    pub bg: [u8; 3],
}

fn luminance(c: [u8; 3]) -> f64 {
    0.299 * f64::from(c[0]) + 0.587 * f64::from(c[1]) + 0.114 * f64::from(c[2])
}

impl Style {
    /// Random palette with a readable luminance gap.
    pub fn sample(rng: &mut ChaCha8Rng) -> Style {
        loop {
            let fg = [rng.gen(), rng.gen(), rng.gen()];
            let bg = [rng.gen(), rng.gen(), rng.gen()];
            if (luminance(fg) - luminance(bg)).abs() >= 80.0 {
                return Style { fg, bg };
            }
        }
    }

    pub fn plain() -> Style {
        Style { fg: [20, 20, 20], bg: [235, 235, 235] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcclusionBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Everything that determines a rendered image, and therefore the identity
/// of a sample for leakage purposes (noise_seed excluded: it only dithers).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderRecord {
    pub style: Style,
    pub blur_sigma: f64,
    pub rotation_deg: f64,
    pub noise_std: f64,
    pub occlusion: Option<OcclusionBox>,
    pub noise_seed: u64,
}

impl RenderRecord {
    pub fn clean(style: Style) -> Self {
        RenderRecord {
            style,
            blur_sigma: 0.0,
            rotation_deg: 0.0,
            noise_std: 0.0,
            occlusion: None,
            noise_seed: 0,
        }
    }

    /// Canonical identity string for the (word, style, degradation) triple.
    pub fn leakage_key(&self, label: &str) -> String {
        let occ = match &self.occlusion {
            Some(b) => format!("{},{},{},{}", b.x, b.y, b.w, b.h),
            None => "-".to_string(),
        };
        format!(
            "{label}|{:?}|{:?}|{}|{}|{}|{occ}",
            self.style.fg, self.style.bg, self.blur_sigma, self.rotation_deg, self.noise_std
        )
    }
}

/// Where each glyph of a word lands on the canvas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlyphLayout {
    pub scale: usize,
    pub gap: usize,
    pub x0: usize,
    pub y0: usize,
}

impl GlyphLayout {
    pub fn advance(&self) -> usize {
        GLYPH_W * self.scale + self.gap
    }

    /// Bounding box of glyph `i` (zero-based).
    pub fn glyph_box(&self, i: usize) -> OcclusionBox {
        OcclusionBox {
            x: self.x0 + i * self.advance(),
            y: self.y0,
            w: GLYPH_W * self.scale,
            h: GLYPH_H * self.scale,
        }
    }
}

/// Largest integer scale that fits, preferring a one-scale-unit gap
/// between glyphs; very long words drop the gap instead of shrinking past
/// scale 1.
pub fn layout(word: &str) -> Result<GlyphLayout, RenderError> {
    let len = word.chars().count();
    if len > MAX_WORD_LEN {
        return Err(RenderError::WordTooLong { len, max: MAX_WORD_LEN });
    }
    let row_width = |scale: usize, gap: usize| {
        if len == 0 {
            0
        } else {
            len * GLYPH_W * scale + (len - 1) * gap
        }
    };
    let fits =
        |scale: usize, gap: usize| row_width(scale, gap) <= IMG_W - 4 && GLYPH_H * scale <= IMG_H - 4;
    let mut chosen = None;
    for scale in (1..=4).rev() {
        if fits(scale, scale) {
            chosen = Some((scale, scale));
            break;
        }
    }
    let (scale, gap) = chosen.unwrap_or((1, 0));
    let width = row_width(scale, gap);
    let height = GLYPH_H * scale;
    Ok(GlyphLayout {
        scale,
        gap,
        x0: (IMG_W - width) / 2,
        y0: (IMG_H - height) / 2,
    })
}

fn to_unit(c: [u8; 3]) -> [f32; 3] {
    [f32::from(c[0]) / 255.0, f32::from(c[1]) / 255.0, f32::from(c[2]) / 255.0]
}

/// Render a word under one record. Deterministic: equal inputs give
/// bit-identical images.
pub fn render(word: &str, rec: &RenderRecord) -> Result<ImageTensor, RenderError> {
    for ch in word.chars() {
        if glyph(ch).is_none() {
            return Err(RenderError::UnrenderableCharacter { ch });
        }
    }
    let lay = layout(word)?;
    let fg = to_unit(rec.style.fg);
    let bg = to_unit(rec.style.bg);
    let mut px = vec![0.0f32; IMG_H * IMG_W * IMG_C];
    for y in 0..IMG_H {
        for x in 0..IMG_W {
            for c in 0..IMG_C {
                px[(y * IMG_W + x) * IMG_C + c] = bg[c];
            }
        }
    }
    for (i, ch) in word.chars().enumerate() {
        let g = glyph(ch).unwrap();
        let bx = lay.glyph_box(i);
        for (gy, row) in g.iter().enumerate() {
            for gx in 0..GLYPH_W {
                if row & (1 << (GLYPH_W - 1 - gx)) == 0 {
                    continue;
                }
                for sy in 0..lay.scale {
                    for sx in 0..lay.scale {
                        let (y, x) = (bx.y + gy * lay.scale + sy, bx.x + gx * lay.scale + sx);
                        for c in 0..IMG_C {
                            px[(y * IMG_W + x) * IMG_C + c] = fg[c];
                        }
                    }
                }
            }
        }
    }
    if rec.rotation_deg != 0.0 {
        px = rotate(&px, rec.rotation_deg, bg);
    }
    if rec.blur_sigma > 0.0 {
        px = blur(&px, rec.blur_sigma);
    }
    if rec.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(rec.noise_seed);
        for v in px.iter_mut() {
            let u1: f64 = rng.gen::<f64>().max(1e-12);
            let u2: f64 = rng.gen::<f64>();
            let n = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            *v += (rec.noise_std * n) as f32;
        }
    }
    if let Some(b) = &rec.occlusion {
        for y in b.y..(b.y + b.h).min(IMG_H) {
            for x in b.x..(b.x + b.w).min(IMG_W) {
                for c in 0..IMG_C {
                    px[(y * IMG_W + x) * IMG_C + c] = OCCLUSION_FILL;
                }
            }
        }
    }
    for v in px.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(ImageTensor::new(IMG_H, IMG_W, px).expect("canvas is always valid"))
}

/// Inverse-mapped nearest-neighbor rotation about the canvas center;
/// uncovered pixels take the background color.
fn rotate(px: &[f32], deg: f64, bg: [f32; 3]) -> Vec<f32> {
    let rad = deg.to_radians();
    let (sin, cos) = rad.sin_cos();
    let (cx, cy) = ((IMG_W as f64 - 1.0) / 2.0, (IMG_H as f64 - 1.0) / 2.0);
    let mut out = vec![0.0f32; px.len()];
    for y in 0..IMG_H {
        for x in 0..IMG_W {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = (cos * dx + sin * dy + cx).round() as isize;
            let sy = (-sin * dx + cos * dy + cy).round() as isize;
            for c in 0..IMG_C {
                out[(y * IMG_W + x) * IMG_C + c] =
                    if sx >= 0 && sx < IMG_W as isize && sy >= 0 && sy < IMG_H as isize {
                        px[(sy as usize * IMG_W + sx as usize) * IMG_C + c]
                    } else {
                        bg[c]
                    };
            }
        }
    }
    out
}

/// Separable gaussian blur with edge clamping.
fn blur(px: &[f32], sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| (k / total) as f32).collect();
    let pass = |src: &[f32], horizontal: bool| {
        let mut dst = vec![0.0f32; src.len()];
        for y in 0..IMG_H {
            for x in 0..IMG_W {
                for c in 0..IMG_C {
                    let mut acc = 0.0f32;
                    for (ki, k) in kernel.iter().enumerate() {
                        let off = ki as isize - radius;
                        let (sx, sy) = if horizontal {
                            ((x as isize + off).clamp(0, IMG_W as isize - 1), y as isize)
                        } else {
                            (x as isize, (y as isize + off).clamp(0, IMG_H as isize - 1))
                        };
                        acc += k * src[(sy as usize * IMG_W + sx as usize) * IMG_C + c];
                    }
                    dst[(y * IMG_W + x) * IMG_C + c] = acc;
                }
            }
        }
        dst
    };
    pass(&pass(px, true), false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_word_is_background_only() {
        let rec = RenderRecord::clean(Style::plain());
        let img = render("", &rec).unwrap();
        let bg = to_unit(rec.style.bg);
        for y in 0..IMG_H {
            for x in 0..IMG_W {
                for c in 0..IMG_C {
                    assert_eq!(img.get(y, x, c), bg[c]);
                }
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rec = RenderRecord {
            style: Style::sample(&mut rng),
            blur_sigma: 0.8,
            rotation_deg: -7.0,
            noise_std: 0.05,
            occlusion: Some(OcclusionBox { x: 10, y: 5, w: 12, h: 14 }),
            noise_seed: 123,
        };
        let a = render("sharp", &rec).unwrap();
        let b = render("sharp", &rec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn occlusion_over_last_glyph_is_a_filled_box() {
        let lay = layout("corner").unwrap();
        let tail = lay.glyph_box(5);
        let rec = RenderRecord {
            occlusion: Some(tail),
            ..RenderRecord::clean(Style::plain())
        };
        let img = render("corner", &rec).unwrap();
        for y in tail.y..tail.y + tail.h {
            for x in tail.x..tail.x + tail.w {
                for c in 0..IMG_C {
                    assert_eq!(img.get(y, x, c), OCCLUSION_FILL);
                }
            }
        }
        // The rest of the word is still drawn: some foreground remains.
        let fg = to_unit(Style::plain().fg);
        let head = lay.glyph_box(0);
        let mut found = false;
        for y in head.y..head.y + head.h {
            for x in head.x..head.x + head.w {
                if img.get(y, x, 0) == fg[0] {
                    found = true;
                }
            }
        }
        assert!(found, "first glyph vanished");
    }

    #[test]
    fn unknown_characters_and_overlong_words_error() {
        let rec = RenderRecord::clean(Style::plain());
        assert_eq!(
            render("caf\u{e9}", &rec).err(),
            Some(RenderError::UnrenderableCharacter { ch: '\u{e9}' })
        );
        let long = "x".repeat(26);
        assert_eq!(
            render(&long, &rec).err(),
            Some(RenderError::WordTooLong { len: 26, max: 25 })
        );
        // 25 characters still fit on the canvas.
        let max = "y".repeat(25);
        assert!(render(&max, &rec).is_ok());
    }

    #[test]
    fn short_words_scale_up_and_long_words_scale_down() {
        assert_eq!(layout("go").unwrap().scale, 4);
        assert_eq!(layout("strawberry").unwrap().scale, 2);
        let lay25 = layout(&"z".repeat(25)).unwrap();
        assert_eq!((lay25.scale, lay25.gap), (1, 0));
    }

    #[test]
    fn degradations_keep_values_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rec = RenderRecord {
            style: Style::sample(&mut rng),
            blur_sigma: 2.0,
            rotation_deg: 15.0,
            noise_std: 0.1,
            occlusion: None,
            noise_seed: 9,
        };
        let img = render("valley", &rec).unwrap();
        assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rotation_moves_pixels() {
        let rec = RenderRecord::clean(Style::plain());
        let straight = render("table", &rec).unwrap();
        let rec_rot = RenderRecord { rotation_deg: 10.0, ..rec };
        let rotated = render("table", &rec_rot).unwrap();
        assert_ne!(straight, rotated);
    }

    #[test]
    fn leakage_key_ignores_noise_seed_only() {
        let rec = RenderRecord {
            style: Style::plain(),
            blur_sigma: 0.5,
            rotation_deg: 3.0,
            noise_std: 0.02,
            occlusion: None,
            noise_seed: 1,
        };
        let other_seed = RenderRecord { noise_seed: 2, ..rec.clone() };
        assert_eq!(rec.leakage_key("cat"), other_seed.leakage_key("cat"));
        let other_blur = RenderRecord { blur_sigma: 0.6, ..rec.clone() };
        assert_ne!(rec.leakage_key("cat"), other_blur.leakage_key("cat"));
        assert_ne!(rec.leakage_key("cat"), rec.leakage_key("dog"));
    }
}
