//! Gaussian temperature sampling and the exhaustive per-pixel
//! best-temperature-map search.

use ndarray::{Array2, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Image;
use crate::{Error, Result};

/// Ascending list of sampling temperatures; the default is 0.00..=1.00 at
/// intervals of 0.05 (21 values).
#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureGrid {
    values: Vec<f64>,
}

impl TemperatureGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("temperature grid is empty".into()));
        }
        for w in values.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config("temperature grid must be ascending and unique".into()));
            }
        }
        if values[0] < 0.0 {
            return Err(Error::Config("temperatures must be >= 0".into()));
        }
        Ok(Self { values })
    }

    /// `start:stop:step` (inclusive of `stop` within 1e-9).
    pub fn parse(spec: &str) -> Result<Self> {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!("grid spec must be start:stop:step, got {spec}")));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number in grid spec: {s}")))
        };
        let (start, stop, step) = (parse(parts[0])?, parse(parts[1])?, parse(parts[2])?);
        if step <= 0.0 {
            return Err(Error::Config("grid step must be > 0".into()));
        }
        let mut values = Vec::new();
        let mut k = 0usize;
        loop {
            let v = start + k as f64 * step;
            if v > stop + 1e-9 {
                break;
            }
            values.push(v);
            k += 1;
        }
        Self::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl Default for TemperatureGrid {
    fn default() -> Self {
        Self::new((0..=20).map(|k| k as f64 * 0.05).collect()).unwrap()
    }
}

/// Per-pixel winning temperature, with the index into the grid it came from.
#[derive(Debug, Clone)]
pub struct TempMap {
    pub tau: Array2<f64>,
    pub chosen_index: Array2<usize>,
    pub grid: TemperatureGrid,
}

impl TempMap {
    /// Grayscale rendering: lighter means higher temperature, scaled so the
    /// grid maximum maps to white.
    pub fn to_gray_image(&self) -> Image {
        let (h, w) = self.tau.dim();
        let top = self.grid.values().last().copied().unwrap_or(1.0).max(1e-9);
        let mut img = Image::zeros((3, h, w));
        for y in 0..h {
            for x in 0..w {
                let v = (self.tau[[y, x]] / top) as f32;
                for c in 0..3 {
                    img[[c, y, x]] = v;
                }
            }
        }
        img
    }
}

/// Draw an i.i.d. `N(0, tau^2)` latent of the given shape, seeded.
pub fn sample_latent(shape: &[usize], tau: f64, seed: u64) -> Result<ArrayD<f32>> {
    if tau < 0.0 {
        return Err(Error::Config(format!("temperature must be >= 0, got {tau}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| {
        let v: f32 = StandardNormal.sample(&mut rng);
        v * tau as f32
    }))
}

/// Standard-normal base draw used when one noise realization is shared
/// across every temperature (`z_tau = tau * z1`).
pub fn base_noise(shape: &[usize], seed: u64) -> ArrayD<f32> {
    sample_latent(shape, 1.0, seed).expect("tau=1 is valid")
}

/// Exhaustive best-temperature search. `generate` maps a temperature to an
/// output image (the caller shares one base noise draw across temperatures);
/// `error_map` scores each candidate per output pixel against the ground
/// truth. Per pixel, the temperature minimizing the error wins; ties break
/// toward the smaller temperature. Returns the map, the assembled image, and
/// the per-candidate error maps (in grid order) for oracle checks.
pub fn best_temperature_map(
    grid: &TemperatureGrid,
    mut generate: impl FnMut(f64) -> Result<Image>,
    mut error_map: impl FnMut(&Image) -> Result<Array2<f64>>,
) -> Result<(TempMap, Image, Vec<Array2<f64>>)> {
    if grid.is_empty() {
        return Err(Error::Config("best_temperature_map: empty grid".into()));
    }
    let mut candidates: Vec<Image> = Vec::with_capacity(grid.len());
    let mut errors: Vec<Array2<f64>> = Vec::with_capacity(grid.len());
    for &tau in grid.values() {
        let img = generate(tau)?;
        let err = error_map(&img)?;
        let (c, h, w) = img.dim();
        if err.dim() != (h, w) || c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "error map {:?} does not match image {:?}",
                err.dim(),
                img.dim()
            )));
        }
        candidates.push(img);
        errors.push(err);
    }
    let (_, h, w) = candidates[0].dim();
    let mut tau = Array2::<f64>::zeros((h, w));
    let mut chosen = Array2::<usize>::zeros((h, w));
    let mut assembled = Image::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut best_err = errors[0][[y, x]];
            for (k, err) in errors.iter().enumerate().skip(1) {
                if err[[y, x]] < best_err {
                    best_err = err[[y, x]];
                    best = k;
                }
            }
            chosen[[y, x]] = best;
            tau[[y, x]] = grid.values()[best];
            for c in 0..3 {
                assembled[[c, y, x]] = candidates[best][[c, y, x]];
            }
        }
    }
    Ok((
        TempMap { tau, chosen_index: chosen, grid: grid.clone() },
        assembled,
        errors,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_21_values() {
        let g = TemperatureGrid::default();
        assert_eq!(g.len(), 21);
        assert_eq!(g.values()[0], 0.0);
        assert!((g.values()[20] - 1.0).abs() < 1e-12);
        assert!((g.values()[1] - 0.05).abs() < 1e-12);
    }

    #[test]
    fn parse_matches_default() {
        let g = TemperatureGrid::parse("0:1:0.05").unwrap();
        assert_eq!(g.len(), 21);
        assert!(TemperatureGrid::parse("1:0:0.05").is_err());
        assert!(TemperatureGrid::parse("0:1").is_err());
    }

    #[test]
    fn sample_latent_tau_zero_is_zero_and_seeded() {
        let z = sample_latent(&[4, 5], 0.0, 9).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        let a = sample_latent(&[100], 0.8, 1).unwrap();
        let b = sample_latent(&[100], 0.8, 1).unwrap();
        assert_eq!(a, b);
        assert!(sample_latent(&[3], -0.1, 0).is_err());
    }

    #[test]
    fn sample_latent_empirical_std() {
        let z = sample_latent(&[100_000], 0.8, 77).unwrap();
        let n = z.len() as f64;
        let mean = z.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = z.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!((0.79..=0.81).contains(&std), "std {std}");
    }

    #[test]
    fn degenerate_generator_picks_grid_minimum() {
        let grid = TemperatureGrid::default();
        let img = crate::data::toy_image(8, 1);
        let (map, _, _) = best_temperature_map(
            &grid,
            |_tau| Ok(img.clone()),
            |_img| Ok(Array2::zeros((8, 8))),
        )
        .unwrap();
        assert!(map.chosen_index.iter().all(|&k| k == 0));
        assert!(map.tau.iter().all(|&t| t == 0.0));
    }

    #[test]
    fn dominance_by_construction() {
        // synthetic candidates with varying per-pixel errors
        let grid = TemperatureGrid::new(vec![0.0, 0.5, 1.0]).unwrap();
        let mk = |level: f32| Image::from_elem((3, 4, 4), level);
        let errs = [
            Array2::from_shape_fn((4, 4), |(y, x)| ((y + x) % 3) as f64),
            Array2::from_shape_fn((4, 4), |(y, x)| ((y * x) % 3) as f64),
            Array2::from_shape_fn((4, 4), |(y, _)| (y % 2) as f64),
        ];
        let mut k = 0;
        let (map, _assembled, errors) = best_temperature_map(
            &grid,
            |tau| Ok(mk(tau as f32)),
            |_| {
                let e = errs[k].clone();
                k += 1;
                Ok(e)
            },
        )
        .unwrap();
        assert_eq!(errors.len(), 3);
        // brute-force oracle: assembled error <= each candidate everywhere
        for y in 0..4 {
            for x in 0..4 {
                let chosen = map.chosen_index[[y, x]];
                let e = errors[chosen][[y, x]];
                for cand in &errors {
                    assert!(e <= cand[[y, x]]);
                }
            }
        }
    }

    #[test]
    fn subset_grid_never_improves() {
        let full = TemperatureGrid::new(vec![0.0, 0.25, 0.5, 0.75, 1.0]).unwrap();
        let sub = TemperatureGrid::new(vec![0.0, 0.5, 1.0]).unwrap();
        let img = |tau: f64| {
            Image::from_shape_fn((3, 6, 6), |(c, y, x)| {
                ((tau * (c + y + x) as f64).sin() * 0.5 + 0.5) as f32
            })
        };
        let target = img(0.37);
        let err = |candidate: &Image| -> Result<Array2<f64>> {
            let (_, h, w) = candidate.dim();
            Ok(Array2::from_shape_fn((h, w), |(y, x)| {
                (0..3)
                    .map(|c| (candidate[[c, y, x]] - target[[c, y, x]]).abs() as f64)
                    .sum()
            }))
        };
        let run = |grid: &TemperatureGrid| {
            let (map, _, errors) =
                best_temperature_map(grid, |t| Ok(img(t)), err).unwrap();
            let mut total = 0.0;
            for y in 0..6 {
                for x in 0..6 {
                    total += errors[map.chosen_index[[y, x]]][[y, x]];
                }
            }
            total
        };
        assert!(run(&full) <= run(&sub) + 1e-12);
    }
}
