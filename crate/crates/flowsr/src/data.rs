//! Image ingestion, bicubic/bilinear resampling, paired HR/LR cropping, and
//! the seeded procedural toy-image generator.
//!
//! Images are `Array3<f32>` in `[C, H, W]` layout with intensities in [0, 1].

use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

pub type Image = Array3<f32>;

/// Interpolation kernel used by [`resample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    /// Catmull-Rom bicubic (a = -0.5).
    Bicubic,
    Bilinear,
}

/// Resize direction for the factor-based convenience API.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
}

fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

fn linear_kernel(x: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        1.0 - x
    } else {
        0.0
    }
}

/// Per-output-coordinate taps (index, weight), normalized to sum 1.
fn filter_taps(input: usize, output: usize, interp: Interp, antialias: bool) -> Vec<Vec<(usize, f64)>> {
    let ratio = input as f64 / output as f64;
    let (kernel, support): (fn(f64) -> f64, f64) = match interp {
        Interp::Bicubic => (cubic_kernel, 2.0),
        Interp::Bilinear => (linear_kernel, 1.0),
    };
    // widen the kernel when shrinking so it acts as a low-pass filter
    let scale = if antialias && ratio > 1.0 { ratio } else { 1.0 };
    let radius = support * scale;
    (0..output)
        .map(|o| {
            let center = (o as f64 + 0.5) * ratio - 0.5;
            let lo = (center - radius).ceil() as isize;
            let hi = (center + radius).floor() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity((hi - lo + 1).max(1) as usize);
            let mut sum = 0.0;
            for t in lo..=hi {
                let w = kernel((t as f64 - center) / scale);
                if w == 0.0 {
                    continue;
                }
                let idx = t.clamp(0, input as isize - 1) as usize;
                sum += w;
                match taps.iter_mut().find(|(i, _)| *i == idx) {
                    Some((_, acc)) => *acc += w,
                    None => taps.push((idx, w)),
                }
            }
            if sum != 0.0 {
                for (_, w) in &mut taps {
                    *w /= sum;
                }
            }
            taps
        })
        .collect()
}

/// Separable resize to an explicit size. Accumulation is in f64.
pub fn resample(img: &Image, out_h: usize, out_w: usize, interp: Interp, antialias: bool) -> Image {
    let (c, h, w) = img.dim();
    assert!(out_h >= 1 && out_w >= 1, "resample: empty output");
    let xt = filter_taps(w, out_w, interp, antialias);
    let yt = filter_taps(h, out_h, interp, antialias);
    // horizontal pass
    let mut tmp = Array3::<f64>::zeros((c, h, out_w));
    for ci in 0..c {
        for y in 0..h {
            for (ox, taps) in xt.iter().enumerate() {
                let mut acc = 0.0;
                for &(ix, wt) in taps {
                    acc += img[[ci, y, ix]] as f64 * wt;
                }
                tmp[[ci, y, ox]] = acc;
            }
        }
    }
    // vertical pass
    let mut out = Array3::<f32>::zeros((c, out_h, out_w));
    for ci in 0..c {
        for (oy, taps) in yt.iter().enumerate() {
            for ox in 0..out_w {
                let mut acc = 0.0;
                for &(iy, wt) in taps {
                    acc += tmp[[ci, iy, ox]] * wt;
                }
                out[[ci, oy, ox]] = acc as f32;
            }
        }
    }
    out
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Factor-based resize. `Up` scales sizes by `factor`, `Down` divides.
/// Downscaling is anti-aliased; both directions round sizes half-up.
pub fn bicubic_resample(img: &Image, factor: f64, direction: Direction) -> Result<Image> {
    resample_factor(img, factor, direction, Interp::Bicubic)
}

/// Bilinear variant of [`bicubic_resample`]; patch-flow residuals are taken
/// against this upsample.
pub fn bilinear_resample(img: &Image, factor: f64, direction: Direction) -> Result<Image> {
    resample_factor(img, factor, direction, Interp::Bilinear)
}

fn resample_factor(img: &Image, factor: f64, direction: Direction, interp: Interp) -> Result<Image> {
    if !(factor > 0.0) {
        return Err(Error::Config(format!("resample factor must be > 0, got {factor}")));
    }
    let (_, h, w) = img.dim();
    let (oh, ow) = match direction {
        Direction::Up => (round_half_up(h as f64 * factor), round_half_up(w as f64 * factor)),
        Direction::Down => (round_half_up(h as f64 / factor), round_half_up(w as f64 / factor)),
    };
    if oh < 1 || ow < 1 {
        return Err(Error::Config(format!(
            "resample output size {oh}x{ow} is empty (factor {factor})"
        )));
    }
    Ok(resample(img, oh, ow, interp, matches!(direction, Direction::Down)))
}

/// Upsample to an exact target size (used when `round(s*H)` must match).
pub fn resample_to(img: &Image, oh: usize, ow: usize, interp: Interp) -> Image {
    let (_, h, w) = img.dim();
    let antialias = oh < h || ow < w;
    resample(img, oh, ow, interp, antialias)
}

// ---- PNG IO ----

pub fn load_png(path: &Path) -> Result<Image> {
    let dynimg = image::open(path)?;
    Ok(match dynimg {
        image::DynamicImage::ImageRgb16(img) => {
            let (w, h) = img.dimensions();
            let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
            for (x, y, p) in img.enumerate_pixels() {
                for c in 0..3 {
                    out[[c, y as usize, x as usize]] = p.0[c] as f32 / 65535.0;
                }
            }
            out
        }
        image::DynamicImage::ImageLuma16(_) | image::DynamicImage::ImageLumaA16(_) => {
            let img = dynimg.into_rgb16();
            let (w, h) = img.dimensions();
            let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
            for (x, y, p) in img.enumerate_pixels() {
                for c in 0..3 {
                    out[[c, y as usize, x as usize]] = p.0[c] as f32 / 65535.0;
                }
            }
            out
        }
        other => {
            let img = other.into_rgb8();
            let (w, h) = img.dimensions();
            let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
            for (x, y, p) in img.enumerate_pixels() {
                for c in 0..3 {
                    out[[c, y as usize, x as usize]] = p.0[c] as f32 / 255.0;
                }
            }
            out
        }
    })
}

/// Write an 8-bit RGB PNG; values are clamped to [0, 1]. Non-finite entries
/// are written as 0 so diagnostic outputs remain viewable.
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let (c, h, w) = img.dim();
    assert_eq!(c, 3, "save_png expects 3 channels");
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px: [u8; 3] = std::array::from_fn(|ci| {
                let v = img[[ci, y, x]];
                if v.is_finite() {
                    (v.clamp(0.0, 1.0) * 255.0).round() as u8
                } else {
                    0
                }
            });
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// List PNGs in a directory (sorted) or read a manifest of one path per line.
pub fn list_images(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .map(|e| e.eq_ignore_ascii_case("png"))
                    .unwrap_or(false)
            })
            .collect();
        v.sort();
        Ok(v)
    } else if path.is_file() {
        let text = std::fs::read_to_string(path)?;
        Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(PathBuf::from)
            .collect())
    } else {
        Err(Error::Config(format!("no such directory or manifest: {}", path.display())))
    }
}

// ---- batching helpers ----

/// Stack same-sized images into an `[N, C, H, W]` batch.
pub fn stack_images(images: &[Image]) -> Array4<f32> {
    assert!(!images.is_empty());
    let (c, h, w) = images[0].dim();
    let mut out = Array4::<f32>::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        assert_eq!(img.dim(), (c, h, w), "stack_images: size mismatch");
        out.index_axis_mut(Axis(0), i).assign(img);
    }
    out
}

pub fn batch_to_images(batch: &Array4<f32>) -> Vec<Image> {
    batch
        .axis_iter(Axis(0))
        .map(|v| v.to_owned())
        .collect()
}

// ---- paired sampling ----

/// One HR/LR training pair; when synthesized, `x = bicubic_down(y, s)`.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub x: Image,
    pub y: Image,
    /// Actual scale after integer rounding of the HR crop.
    pub s: f64,
    pub source_id: usize,
}

/// Continuous scale draw, uniform on `[lo, hi)`.
pub fn draw_scale<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Sample a continuous-scale training pair: s ~ U(lo, hi), an HR crop of
/// `round(lr_size * s)` per side, and a bicubic-downsampled LR crop.
pub fn sample_training_pair<R: Rng>(
    hr: &Image,
    source_id: usize,
    lr_size: usize,
    s_lo: f64,
    s_hi: f64,
    rng: &mut R,
) -> Result<PairedSample> {
    let (_, h, w) = hr.dim();
    let s: f64 = draw_scale(rng, s_lo, s_hi);
    let crop = round_half_up(lr_size as f64 * s);
    if crop > h || crop > w {
        return Err(Error::Config(format!(
            "source image {h}x{w} too small for an HR crop of {crop}"
        )));
    }
    let oy = rng.random_range(0..=(h - crop));
    let ox = rng.random_range(0..=(w - crop));
    let y = hr
        .slice(ndarray::s![.., oy..oy + crop, ox..ox + crop])
        .to_owned();
    let x = if crop == lr_size {
        y.clone()
    } else {
        resample(&y, lr_size, lr_size, Interp::Bicubic, true)
    };
    let s_actual = crop as f64 / lr_size as f64;
    Ok(PairedSample { x, y, s: s_actual, source_id })
}

/// Fixed-scale pair: HR crop of `lr_size * s` with integer `s`.
pub fn sample_fixed_pair<R: Rng>(
    hr: &Image,
    source_id: usize,
    lr_size: usize,
    s: usize,
    rng: &mut R,
) -> Result<PairedSample> {
    let (_, h, w) = hr.dim();
    let crop = lr_size * s;
    if crop > h || crop > w {
        return Err(Error::Config(format!(
            "source image {h}x{w} too small for an HR crop of {crop}"
        )));
    }
    let oy = rng.random_range(0..=(h - crop));
    let ox = rng.random_range(0..=(w - crop));
    let y = hr
        .slice(ndarray::s![.., oy..oy + crop, ox..ox + crop])
        .to_owned();
    let x = resample(&y, lr_size, lr_size, Interp::Bicubic, true);
    Ok(PairedSample { x, y, s: s as f64, source_id })
}

// ---- procedural toy data ----

/// Deterministic toy image: smooth low-frequency background, a few
/// anti-aliased solid shapes, and one high-frequency textured region.
pub fn toy_image(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
    let mut img = Array3::<f32>::zeros((3, size, size));
    // background: sum of low-frequency sinusoids per channel
    let nwaves = 3;
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..nwaves)
        .map(|_| {
            let fy: f64 = rng.random_range(0.5..2.0);
            let fx: f64 = rng.random_range(0.5..2.0);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = [
                rng.random_range(0.05..0.18),
                rng.random_range(0.05..0.18),
                rng.random_range(0.05..0.18),
            ];
            (fy, fx, phase, amp)
        })
        .collect();
    let base = [
        rng.random_range(0.35..0.65),
        rng.random_range(0.35..0.65),
        rng.random_range(0.35..0.65),
    ];
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64 / size as f64, x as f64 / size as f64);
            for c in 0..3 {
                let mut v = base[c];
                for (wy, wx, ph, amp) in &waves {
                    v += amp[c] * (std::f64::consts::TAU * (wy * fy + wx * fx) + ph).sin();
                }
                img[[c, y, x]] = v as f32;
            }
        }
    }
    // shapes
    let nshapes = rng.random_range(2..4usize);
    for _ in 0..nshapes {
        let color = [
            rng.random_range(0.1..0.9f64) as f32,
            rng.random_range(0.1..0.9f64) as f32,
            rng.random_range(0.1..0.9f64) as f32,
        ];
        if rng.random_bool(0.5) {
            // anti-aliased disc
            let cy = rng.random_range(0.2..0.8) * size as f64;
            let cx = rng.random_range(0.2..0.8) * size as f64;
            let r = rng.random_range(0.08..0.25) * size as f64;
            for y in 0..size {
                for x in 0..size {
                    let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                    let cov = (r - d + 0.5).clamp(0.0, 1.0) as f32;
                    if cov > 0.0 {
                        for c in 0..3 {
                            img[[c, y, x]] = img[[c, y, x]] * (1.0 - cov) + color[c] * cov;
                        }
                    }
                }
            }
        } else {
            // axis-aligned rectangle
            let y0 = rng.random_range(0..size / 2);
            let x0 = rng.random_range(0..size / 2);
            let hh = rng.random_range(size / 8..size / 2).max(2);
            let ww = rng.random_range(size / 8..size / 2).max(2);
            for y in y0..(y0 + hh).min(size) {
                for x in x0..(x0 + ww).min(size) {
                    for c in 0..3 {
                        img[[c, y, x]] = color[c];
                    }
                }
            }
        }
    }
    // textured region: oriented grating
    let ty0 = rng.random_range(0..size / 2);
    let tx0 = rng.random_range(0..size / 2);
    let th = (size / 2).max(4);
    let tw = (size / 2).max(4);
    let freq = rng.random_range(0.6..1.4) * std::f64::consts::PI / 2.0;
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let amp = rng.random_range(0.12..0.22);
    for y in ty0..(ty0 + th).min(size) {
        for x in tx0..(tx0 + tw).min(size) {
            let u = ca * y as f64 + sa * x as f64;
            let v = (amp * (freq * u).sin()) as f32;
            for c in 0..3 {
                img[[c, y, x]] += v;
            }
        }
    }
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    img
}

/// Generate `n` toy images of `size`^2 pixels, seeded.
pub fn toy_set(n: usize, size: usize, seed: u64) -> Vec<Image> {
    (0..n).map(|i| toy_image(size, seed.wrapping_add(i as u64))).collect()
}

/// Band-limited toy image: the low-frequency sinusoid background only.
/// Survives resampling round trips nearly unchanged.
pub fn toy_image_smooth(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x517c_c1b7_2722_0a95).wrapping_add(3));
    let mut img = Array3::<f32>::zeros((3, size, size));
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            let fy: f64 = rng.random_range(0.3..1.8);
            let fx: f64 = rng.random_range(0.3..1.8);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = [
                rng.random_range(0.04..0.15),
                rng.random_range(0.04..0.15),
                rng.random_range(0.04..0.15),
            ];
            (fy, fx, phase, amp)
        })
        .collect();
    let base = [
        rng.random_range(0.35..0.65),
        rng.random_range(0.35..0.65),
        rng.random_range(0.35..0.65),
    ];
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64 / size as f64, x as f64 / size as f64);
            for c in 0..3 {
                let mut v = base[c];
                for (wy, wx, ph, amp) in &waves {
                    v += amp[c] * (std::f64::consts::TAU * (wy * fy + wx * fx) + ph).sin();
                }
                img[[c, y, x]] = (v as f32).clamp(0.0, 1.0);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    #[test]
    fn factor_one_is_identity() {
        let img = toy_image(24, 3);
        let out = bicubic_resample(&img, 1.0, Direction::Up).unwrap();
        assert_eq!(out.dim(), img.dim());
        let diff = (&out - &img).iter().fold(0.0f32, |m, &v| m.max(v.abs()));
        assert!(diff < 1e-6, "max diff {diff}");
    }

    #[test]
    fn constant_preserved_at_any_factor() {
        let img = Image::from_elem((3, 12, 12), 0.37f32);
        for &(f, d) in &[(2.0, Direction::Up), (3.0, Direction::Down), (1.7, Direction::Up)] {
            let out = bicubic_resample(&img, f, d).unwrap();
            for &v in out.iter() {
                assert!((v - 0.37).abs() < 1e-6, "factor {f}: {v}");
            }
        }
    }

    #[test]
    fn down_up_round_trip_floor() {
        // smooth images survive a 2x round trip well; pin a conservative floor
        let mut worst = f64::INFINITY;
        for i in 0..10 {
            let img = toy_image_smooth(32, 100 + i);
            let up = bicubic_resample(&img, 2.0, Direction::Up).unwrap();
            let down = bicubic_resample(&up, 2.0, Direction::Down).unwrap();
            let p = psnr(&down, &img, 1.0);
            worst = worst.min(p);
        }
        assert!(worst > 35.0, "round-trip floor {worst} dB");
    }

    #[test]
    fn fractional_sizes_round_half_up() {
        let img = toy_image(10, 1);
        let out = bicubic_resample(&img, 1.25, Direction::Up).unwrap();
        // 10 * 1.25 = 12.5 -> 13
        assert_eq!(out.dim(), (3, 13, 13));
    }

    #[test]
    fn scale_distribution_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let bins = 30;
        let mut counts = vec![0usize; bins];
        for _ in 0..n {
            let s = draw_scale(&mut rng, 1.0, 4.0);
            let b = (((s - 1.0) / 3.0) * bins as f64).min(bins as f64 - 1.0) as usize;
            counts[b] += 1;
        }
        let expected = n as f64 / bins as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // chi-square critical value, 29 dof, alpha = 0.01
        assert!(chi2 < 49.588, "chi2 = {chi2}");
    }

    #[test]
    fn pair_size_relation_holds() {
        let hr = toy_image(140, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let p = sample_training_pair(&hr, 0, 24, 1.0, 4.0, &mut rng).unwrap();
            let (_, lh, lw) = p.x.dim();
            let (_, hh, hw) = p.y.dim();
            assert_eq!((lh, lw), (24, 24));
            assert_eq!(hh, (24.0 * p.s).round() as usize);
            assert_eq!(hw, hh);
        }
    }

    #[test]
    fn seeded_crops_are_deterministic() {
        let hr = toy_image(96, 11);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5)
                .map(|i| sample_training_pair(&hr, i, 16, 1.0, 4.0, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        let a = draw(5);
        let b = draw(5);
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.s, pb.s);
            assert_eq!(pa.y, pb.y);
            assert_eq!(pa.x, pb.x);
        }
    }

    #[test]
    fn s_equal_one_gives_identity_pair() {
        let hr = toy_image(64, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // force the crop path with s == 1 via the fixed-pair helper
        let p = sample_fixed_pair(&hr, 0, 20, 1, &mut rng).unwrap();
        assert_eq!(p.x.dim(), p.y.dim());
    }

    #[test]
    fn png_round_trip_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let img = toy_image(16, 5);
        let path = dir.path().join("t.png");
        save_png(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.dim(), img.dim());
        // 8-bit quantization error bound
        let maxerr = (&back - &img).iter().fold(0.0f32, |m, &v| m.max(v.abs()));
        assert!(maxerr <= 0.5 / 255.0 + 1e-6, "max err {maxerr}");
    }
}
