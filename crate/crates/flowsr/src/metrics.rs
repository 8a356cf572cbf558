//! Evaluation metrics: PSNR, SSIM, LR-PSNR, exploding-inverse rate, and the
//! grid-artifact boundary score, plus the JSON/CSV report schema.

use ndarray::Array2;
use serde::{Serialize, Serializer};

use crate::data::{resample, Image, Interp};
use crate::flow::SampleDiagnostics;
use crate::{Error, Result};

/// Peak signal-to-noise ratio in dB; `peak` is the intensity ceiling.
/// Identical images return `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> f64 {
    assert_eq!(a.dim(), b.dim(), "psnr: shape mismatch");
    let mut se = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x as f64 - y as f64;
        se += d * d;
    }
    let mse = se / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// ITU-R 601 luma.
fn luma(img: &Image) -> Array2<f64> {
    let (_, h, w) = img.dim();
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = 0.299 * img[[0, y, x]] as f64
                + 0.587 * img[[1, y, x]] as f64
                + 0.114 * img[[2, y, x]] as f64;
        }
    }
    out
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode Gaussian filter.
fn gauss_filter(img: &Array2<f64>, win: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for ox in 0..ow {
            let mut acc = 0.0;
            for (i, &wt) in win.iter().enumerate() {
                acc += img[[y, ox + i]] * wt;
            }
            tmp[[y, ox]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for oy in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &wt) in win.iter().enumerate() {
                acc += tmp[[oy + i, x]] * wt;
            }
            out[[oy, x]] = acc;
        }
    }
    out
}

/// Mean structural similarity on the luma plane. 11x11 Gaussian window
/// (sigma 1.5), K1 = 0.01, K2 = 0.03, peak 1.0, valid-mode filtering.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "ssim: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    const WIN: usize = 11;
    let (_, h, w) = a.dim();
    if h < WIN || w < WIN {
        return Err(Error::Config(format!(
            "ssim needs images of at least {WIN}x{WIN}, got {h}x{w}"
        )));
    }
    let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
    let la = luma(a);
    let lb = luma(b);
    let win = gaussian_window(WIN, 1.5);
    let mu_a = gauss_filter(&la, &win);
    let mu_b = gauss_filter(&lb, &win);
    let aa = gauss_filter(&(&la * &la), &win);
    let bb = gauss_filter(&(&lb * &lb), &win);
    let ab = gauss_filter(&(&la * &lb), &win);
    let mut total = 0.0;
    let mut count = 0usize;
    for ((idx, &ma), &mb) in mu_a.indexed_iter().zip(mu_b.iter()) {
        let va = aa[idx] - ma * ma;
        let vb = bb[idx] - mb * mb;
        let cov = ab[idx] - ma * mb;
        let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        total += s;
        count += 1;
    }
    Ok(total / count as f64)
}

/// PSNR between the bicubic-downsampled SR image and the original LR input.
pub fn lr_psnr(sr: &Image, lr: &Image, s: f64) -> Result<f64> {
    let (_, sh, sw) = sr.dim();
    let (_, lh, lw) = lr.dim();
    let (eh, ew) = ((lh as f64 * s).round() as usize, (lw as f64 * s).round() as usize);
    if (sh, sw) != (eh, ew) {
        return Err(Error::ShapeMismatch(format!(
            "lr_psnr: SR is {sh}x{sw}, expected {eh}x{ew} for scale {s}"
        )));
    }
    let down = resample(sr, lh, lw, Interp::Bicubic, true);
    Ok(psnr(&down, lr, 1.0))
}

/// Percentage of sampling runs that produced non-finite values.
pub fn inf_rate(diags: &[SampleDiagnostics]) -> Result<f64> {
    if diags.is_empty() {
        return Err(Error::Config("inf_rate: empty diagnostics list".into()));
    }
    let bad = diags.iter().filter(|d| d.nonfinite).count();
    Ok(100.0 * bad as f64 / diags.len() as f64)
}

/// Excess mean |second difference| on patch-boundary rows/columns relative to
/// non-boundary positions, clipped at zero. Boundary positions are multiples
/// of `stride`. Constant and linear-ramp images score 0.
pub fn grid_score(img: &Image, stride: usize) -> Result<f64> {
    let (c, h, w) = img.dim();
    if stride < 2 {
        return Err(Error::Config(format!("grid_score: stride must be >= 2, got {stride}")));
    }
    if stride >= h.min(w) {
        return Err(Error::Config(format!(
            "grid_score: stride {stride} >= image size {h}x{w}"
        )));
    }
    let (mut b_sum, mut b_n, mut nb_sum, mut nb_n) = (0.0f64, 0usize, 0.0f64, 0usize);
    // vertical boundaries: second difference along x, centered on column j
    for ci in 0..c {
        for y in 0..h {
            for j in 1..w - 1 {
                let d2 = (img[[ci, y, j + 1]] as f64 - 2.0 * img[[ci, y, j]] as f64
                    + img[[ci, y, j - 1]] as f64)
                    .abs();
                if j % stride == 0 {
                    b_sum += d2;
                    b_n += 1;
                } else {
                    nb_sum += d2;
                    nb_n += 1;
                }
            }
        }
        for x in 0..w {
            for i in 1..h - 1 {
                let d2 = (img[[ci, i + 1, x]] as f64 - 2.0 * img[[ci, i, x]] as f64
                    + img[[ci, i - 1, x]] as f64)
                    .abs();
                if i % stride == 0 {
                    b_sum += d2;
                    b_n += 1;
                } else {
                    nb_sum += d2;
                    nb_n += 1;
                }
            }
        }
    }
    if b_n == 0 || nb_n == 0 {
        return Err(Error::Config("grid_score: no boundary or interior positions".into()));
    }
    Ok((b_sum / b_n as f64 - nb_sum / nb_n as f64).max(0.0))
}

/// dB value that serializes as the string "inf" when infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Db(pub f64);

impl Serialize for Db {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            ser.serialize_f64(self.0)
        } else {
            ser.serialize_str("inf")
        }
    }
}

impl std::fmt::Display for Db {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.0.is_finite() {
            write!(f, "{:.6}", self.0)
        } else {
            write!(f, "inf")
        }
    }
}

/// Per-image record in an evaluation report.
#[derive(Debug, Clone, Serialize)]
pub struct ImageEval {
    pub id: String,
    pub psnr: Db,
    pub ssim: f64,
    pub percep: f64,
    pub lr_psnr: Db,
    pub nonfinite: bool,
    pub grid_score: f64,
}

/// Aggregate block; image metrics average over finite samples only, with the
/// exclusion count disclosed next to the %Inf figure.
#[derive(Debug, Clone, Serialize)]
pub struct Aggregate {
    pub psnr_mean: Db,
    pub ssim_mean: f64,
    pub percep_mean: f64,
    pub lr_psnr_mean: Db,
    pub grid_score_mean: f64,
    pub inf_pct: f64,
    pub excluded_nonfinite: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub per_image: Vec<ImageEval>,
    pub aggregate: Aggregate,
    pub config_echo: serde_json::Value,
}

impl EvalReport {
    pub fn from_images(per_image: Vec<ImageEval>, config_echo: serde_json::Value) -> Self {
        let total = per_image.len().max(1);
        let bad = per_image.iter().filter(|e| e.nonfinite).count();
        let fin: Vec<&ImageEval> = per_image.iter().filter(|e| !e.nonfinite).collect();
        let n = fin.len().max(1) as f64;
        let mean = |f: &dyn Fn(&ImageEval) -> f64| fin.iter().map(|e| f(e)).sum::<f64>() / n;
        let aggregate = Aggregate {
            psnr_mean: Db(mean(&|e| e.psnr.0)),
            ssim_mean: mean(&|e| e.ssim),
            percep_mean: mean(&|e| e.percep),
            lr_psnr_mean: Db(mean(&|e| e.lr_psnr.0)),
            grid_score_mean: mean(&|e| e.grid_score),
            inf_pct: 100.0 * bad as f64 / total as f64,
            excluded_nonfinite: bad,
        };
        Self { per_image, aggregate, config_echo }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr,ssim,percep,lr_psnr,nonfinite,grid_score\n");
        for e in &self.per_image {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{},{},{:.6}\n",
                e.id, e.psnr, e.ssim, e.percep, e.lr_psnr, e.nonfinite, e.grid_score
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{toy_image, Direction};
    use ndarray::Array3;

    #[test]
    fn psnr_identity_is_infinite() {
        let a = toy_image(16, 1);
        assert!(psnr(&a, &a, 1.0).is_infinite());
    }

    #[test]
    fn psnr_constant_offset_is_20db() {
        let a = Array3::<f32>::from_shape_fn((3, 8, 8), |(c, y, x)| {
            0.002 * (c * 64 + y * 8 + x) as f32
        });
        let b = a.mapv(|v| v + 0.1);
        let p = psnr(&a, &b, 1.0);
        // 0.1 is not exactly representable in f32; the 20 dB value holds to
        // float precision
        assert!((p - 20.0).abs() < 1e-5, "psnr {p}");
    }

    #[test]
    fn psnr_is_symmetric_and_noise_monotone() {
        let a = toy_image(24, 2);
        let b = toy_image(24, 3);
        assert_eq!(psnr(&a, &b, 1.0), psnr(&b, &a, 1.0));
        use rand::SeedableRng;
        use rand_distr::Distribution;
        let mut prev = f64::INFINITY;
        for &sigma in &[0.01f32, 0.02, 0.05] {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
            let normal = rand_distr::Normal::new(0.0f32, sigma).unwrap();
            let noisy = a.mapv(|v| v + normal.sample(&mut rng));
            let p = psnr(&a, &noisy, 1.0);
            assert!(p < prev, "psnr not decreasing: {p} vs {prev}");
            prev = p;
        }
    }

    #[test]
    fn ssim_identity_is_one() {
        let a = toy_image(16, 7);
        let s = ssim(&a, &a).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "ssim {s}");
    }

    #[test]
    fn ssim_inverted_binary_is_low() {
        let mut a = Array3::<f32>::zeros((3, 16, 16));
        for y in 0..16 {
            for x in 0..16 {
                if (x / 4 + y / 4) % 2 == 0 {
                    for c in 0..3 {
                        a[[c, y, x]] = 1.0;
                    }
                }
            }
        }
        let b = a.mapv(|v| 1.0 - v);
        let s = ssim(&a, &b).unwrap();
        assert!(s < 0.1, "ssim {s}");
    }

    #[test]
    fn ssim_constant_images_match_luminance_closed_form() {
        let a = Array3::<f32>::from_elem((3, 16, 16), 0.3);
        let b = Array3::<f32>::from_elem((3, 16, 16), 0.6);
        let s = ssim(&a, &b).unwrap();
        // constant images: variance terms vanish, only the luminance factor
        // remains: (2*mu_a*mu_b + C1) / (mu_a^2 + mu_b^2 + C1)
        let (ma, mb) = (0.3f64, 0.6f64);
        let c1 = 0.0001;
        let expect = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        assert!((s - expect).abs() < 1e-6, "ssim {s} vs {expect}");
    }

    #[test]
    fn ssim_shift_invariance_approximate() {
        let a = toy_image(20, 9);
        let b = a.mapv(|v| (v + 0.02f32).min(1.0));
        let base = ssim(&a, &b).unwrap();
        let a2 = a.mapv(|v| v * 0.9 + 0.01);
        let b2 = b.mapv(|v| v * 0.9 + 0.01);
        let shifted = ssim(&a2.mapv(|v| v + 0.05), &b2.mapv(|v| v + 0.05)).unwrap();
        let unshifted = ssim(&a2, &b2).unwrap();
        assert!((shifted - unshifted).abs() < 1e-3, "{shifted} vs {unshifted}");
        let _ = base;
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = toy_image(8, 1);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn lr_psnr_of_upsampled_lr_is_high() {
        let mut worst = f64::INFINITY;
        for i in 0..10 {
            let hr = crate::data::toy_image_smooth(32, 40 + i);
            let lr = crate::data::bicubic_resample(&hr, 2.0, Direction::Down).unwrap();
            let up = crate::data::bicubic_resample(&lr, 2.0, Direction::Up).unwrap();
            let p = lr_psnr(&up, &lr, 2.0).unwrap();
            worst = worst.min(p);
        }
        assert!(worst > 40.0, "lr-psnr floor {worst}");
    }

    #[test]
    fn lr_psnr_size_mismatch_rejected() {
        let hr = toy_image(32, 1);
        let lr = toy_image(15, 2);
        assert!(lr_psnr(&hr, &lr, 2.0).is_err());
    }

    #[test]
    fn inf_rate_arithmetic() {
        let mk = |bad: bool| SampleDiagnostics {
            nonfinite: bad,
            first_bad_layer: if bad { Some(0) } else { None },
            temperature_used: Some(1.0),
            max_abs: None,
        };
        let mut diags: Vec<_> = (0..150).map(|i| mk(i < 1)).collect();
        let r = inf_rate(&diags).unwrap();
        assert!((r - 100.0 / 150.0).abs() < 1e-12);
        // permutation invariance
        diags.reverse();
        assert_eq!(inf_rate(&diags).unwrap(), r);
        assert!(inf_rate(&[]).is_err());
        let all_ok: Vec<_> = (0..10).map(|_| mk(false)).collect();
        assert_eq!(inf_rate(&all_ok).unwrap(), 0.0);
    }

    #[test]
    fn grid_score_zero_on_constant_and_ramp() {
        let c = Array3::<f32>::from_elem((3, 16, 16), 0.5);
        assert_eq!(grid_score(&c, 4).unwrap(), 0.0);
        let ramp = Array3::<f32>::from_shape_fn((3, 16, 16), |(_, y, x)| {
            (y as f32 + 2.0 * x as f32) / 64.0
        });
        assert!(grid_score(&ramp, 4).unwrap() < 1e-9);
    }

    #[test]
    fn grid_score_detects_stride_aligned_tiles() {
        // checkerboard of 4x4 constant tiles with distinct levels
        let img = Array3::<f32>::from_shape_fn((3, 16, 16), |(_, y, x)| {
            if ((y / 4) + (x / 4)) % 2 == 0 {
                0.2
            } else {
                0.8
            }
        });
        let s = grid_score(&img, 4).unwrap();
        assert!(s > 0.1, "grid score {s}");
    }

    #[test]
    fn grid_score_rejects_bad_stride() {
        let img = toy_image(16, 3);
        assert!(grid_score(&img, 1).is_err());
        assert!(grid_score(&img, 16).is_err());
    }

    #[test]
    fn report_aggregates_exclude_nonfinite() {
        let mk = |id: &str, p: f64, bad: bool| ImageEval {
            id: id.into(),
            psnr: Db(p),
            ssim: 0.9,
            percep: 1.0,
            lr_psnr: Db(p),
            nonfinite: bad,
            grid_score: 0.0,
        };
        let rep = EvalReport::from_images(
            vec![mk("a", 30.0, false), mk("b", 20.0, false), mk("c", 5.0, true)],
            serde_json::json!({}),
        );
        assert!((rep.aggregate.psnr_mean.0 - 25.0).abs() < 1e-12);
        assert_eq!(rep.aggregate.excluded_nonfinite, 1);
        assert!((rep.aggregate.inf_pct - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn infinite_psnr_serializes_as_string() {
        let v = serde_json::to_string(&Db(f64::INFINITY)).unwrap();
        assert_eq!(v, "\"inf\"");
        let f = serde_json::to_string(&Db(20.0)).unwrap();
        assert_eq!(f, "20.0");
    }
}
