//! Piecewise-smooth synthetic hyperspectral scenes.
//!
//! The plane is split into regions by taking the argmax over a few
//! low-frequency random fields. Each region draws one support of `s` atoms and
//! its pixels use coefficients that vary smoothly around a per-region base,
//! so spectra are sparse along the band axis and strongly correlated across
//! neighbouring pixels.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::HyperCube;
use crate::dictionary::Dictionary;
use crate::error::{Error, Result};

const MODES: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Atoms per region.
    pub sparsity: usize,
    /// Spatial length-scale of the region fields, in pixels. `f64::INFINITY`
    /// yields a single region.
    pub smoothness: f64,
    /// Number of competing fields (upper bound on distinct region labels).
    pub fields: usize,
    /// Relative amplitude of the within-region coefficient variation.
    pub variation: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(height: usize, width: usize, sparsity: usize, smoothness: f64, seed: u64) -> Self {
        Self {
            height,
            width,
            sparsity,
            smoothness,
            fields: 5,
            variation: 0.35,
            seed,
        }
    }
}

/// A synthetic scene together with its ground-truth layout.
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub cube: HyperCube,
    /// Region label per pixel, row-major.
    pub labels: Vec<usize>,
    /// Atom support of each field's region.
    pub supports: Vec<Vec<usize>>,
}

/// Sum of random plane waves with wavelengths around `scale` pixels.
struct SmoothField {
    modes: Vec<(f64, f64, f64, f64)>, // (kx, ky, phase, amplitude)
}

impl SmoothField {
    fn random(scale: f64, rng: &mut impl Rng) -> Self {
        let modes = (0..MODES)
            .map(|_| {
                let theta = rng.random_range(0.0..2.0 * PI);
                let freq = if scale.is_finite() {
                    rng.random_range(0.5..1.5) * 2.0 * PI / scale
                } else {
                    0.0
                };
                let phase = rng.random_range(0.0..2.0 * PI);
                let amp = rng.random_range(0.5..1.0) / MODES as f64;
                (freq * theta.cos(), freq * theta.sin(), phase, amp)
            })
            .collect();
        Self { modes }
    }

    /// Value in `[-1, 1]`.
    fn at(&self, row: usize, col: usize) -> f64 {
        let (y, x) = (row as f64, col as f64);
        self.modes
            .iter()
            .map(|&(kx, ky, ph, a)| a * (kx * x + ky * y + ph).cos())
            .sum()
    }
}

pub fn synth_scene(dict: &Dictionary, cfg: &SynthConfig) -> Result<SynthScene> {
    let (d, m) = (dict.dim(), dict.atoms());
    let s = cfg.sparsity;
    if s == 0 || s > d || d > m.max(d) || s > m {
        return Err(Error::Precondition(format!(
            "synthetic scene needs 1 <= s <= d <= M, got s={s}, d={d}, M={m}"
        )));
    }
    if cfg.fields == 0 || cfg.height == 0 || cfg.width == 0 {
        return Err(Error::Precondition("scene needs a non-empty plane and >= 1 field".into()));
    }
    if !(cfg.smoothness > 0.0) {
        return Err(Error::Precondition("smoothness must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let region_fields: Vec<SmoothField> = (0..cfg.fields)
        .map(|_| SmoothField::random(cfg.smoothness, &mut rng))
        .collect();
    let supports: Vec<Vec<usize>> = (0..cfg.fields)
        .map(|_| {
            let mut idx = sample(&mut rng, m, s).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    let bases: Vec<Vec<f64>> = (0..cfg.fields)
        .map(|_| (0..s).map(|_| rng.random_range(0.5..1.5)).collect())
        .collect();
    let variations: Vec<Vec<SmoothField>> = (0..cfg.fields)
        .map(|_| {
            (0..s)
                .map(|_| SmoothField::random(2.0 * cfg.smoothness, &mut rng))
                .collect()
        })
        .collect();

    let (h, w) = (cfg.height, cfg.width);
    let mut cube = HyperCube::zeros(h, w, d);
    let mut labels = vec![0; h * w];
    let atoms = dict.matrix();
    for row in 0..h {
        for col in 0..w {
            let label = (0..cfg.fields)
                .map(|r| (r, region_fields[r].at(row, col)))
                .fold((0, f64::NEG_INFINITY), |best, (r, v)| if v > best.1 { (r, v) } else { best })
                .0;
            labels[row * w + col] = label;
            for (k, &atom) in supports[label].iter().enumerate() {
                let c = bases[label][k] * (1.0 + cfg.variation * variations[label][k].at(row, col));
                for b in 0..d {
                    let i = cube.index(row, col, b);
                    cube.data_mut()[i] += c * atoms.at(b, atom);
                }
            }
        }
    }
    cube.normalize_min_max();
    Ok(SynthScene {
        cube,
        labels,
        supports,
    })
}

/// A min-max normalized synthetic cube; see [`synth_scene`].
pub fn synth_cube(dict: &Dictionary, cfg: &SynthConfig) -> Result<HyperCube> {
    Ok(synth_scene(dict, cfg)?.cube)
}
