//! Image quality metrics, runtime measurement and the iteration sweep.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{reassemble, split_blocks, HyperCube};
use crate::error::{Error, Result};
use crate::model::{Engine, Model};

/// Reported PSNR for a band reproduced exactly.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_shape(x: &HyperCube, r: &HyperCube) -> Result<()> {
    if x.shape() != r.shape() {
        return Err(Error::Shape(format!("cube {:?} vs reference {:?}", x.shape(), r.shape())));
    }
    Ok(())
}

/// PSNR of one band with peak 1.
pub fn band_psnr(x: &[f64], r: &[f64]) -> f64 {
    let mse = x.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len().max(1) as f64;
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP_DB)
}

pub fn psnr_bands(x: &HyperCube, r: &HyperCube) -> Result<Vec<f64>> {
    same_shape(x, r)?;
    Ok((0..x.bands()).map(|b| band_psnr(x.band(b), r.band(b))).collect())
}

/// Mean over bands of the per-band PSNR (dB, peak 1).
pub fn psnr(x: &HyperCube, r: &HyperCube) -> Result<f64> {
    let bands = psnr_bands(x, r)?;
    Ok(bands.iter().sum::<f64>() / bands.len().max(1) as f64)
}

/// [`psnr`] for `d x N` blocks, one band per row.
pub fn block_psnr(x: &Tensor, r: &Tensor) -> Result<f64> {
    x.expect_same_shape("block_psnr", r)?;
    let d = x.rows();
    Ok((0..d).map(|b| band_psnr(x.row(b), r.row(b))).sum::<f64>() / d.max(1) as f64)
}

/// Mean SSIM and its three factors over all valid windows and bands.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimComponents {
    pub ssim: f64,
    pub luminance: f64,
    pub contrast: f64,
    pub structure: f64,
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / total).collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b);
        }
    }
    w
}

fn band_ssim(x: &[f64], r: &[f64], h: usize, w: usize, win: &[f64]) -> [f64; 4] {
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let c3 = c2 / 2.0;
    let k = SSIM_WINDOW;
    let mut acc = [0.0; 4];
    for top in 0..=h - k {
        for left in 0..=w - k {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let p = (top + i) * w + left + j;
                    let g = win[i * k + j];
                    mx += g * x[p];
                    my += g * r[p];
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let p = (top + i) * w + left + j;
                    let g = win[i * k + j];
                    let (dx, dy) = (x[p] - mx, r[p] - my);
                    vx += g * dx * dx;
                    vy += g * dy * dy;
                    cxy += g * dx * dy;
                }
            }
            let (sx, sy) = (vx.sqrt(), vy.sqrt());
            let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
            let c = (2.0 * sx * sy + c2) / (vx + vy + c2);
            let s = (cxy + c3) / (sx * sy + c3);
            let full = ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            acc[0] += full;
            acc[1] += l;
            acc[2] += c;
            acc[3] += s;
        }
    }
    let count = ((h - k + 1) * (w - k + 1)) as f64;
    acc.map(|v| v / count)
}

pub fn ssim_components(x: &HyperCube, r: &HyperCube) -> Result<SsimComponents> {
    same_shape(x, r)?;
    let (h, w, d) = x.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Window {
            window: SSIM_WINDOW,
            height: h,
            width: w,
        });
    }
    let win = gaussian_window();
    let per_band: Vec<[f64; 4]> = (0..d)
        .into_par_iter()
        .map(|b| band_ssim(x.band(b), r.band(b), h, w, &win))
        .collect();
    let mut total = [0.0; 4];
    for v in &per_band {
        for i in 0..4 {
            total[i] += v[i];
        }
    }
    let t = total.map(|v| v / d.max(1) as f64);
    Ok(SsimComponents {
        ssim: t[0],
        luminance: t[1],
        contrast: t[2],
        structure: t[3],
    })
}

/// Mean SSIM (11x11 Gaussian window, σ = 1.5, data range 1).
pub fn ssim(x: &HyperCube, r: &HyperCube) -> Result<f64> {
    Ok(ssim_components(x, r)?.ssim)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamReport {
    /// Mean spectral angle in radians over the counted pixels.
    pub mean: f64,
    /// Pixels skipped because either spectrum is zero.
    pub skipped: usize,
}

/// Angle between two vectors via the half-angle form, accurate for nearly
/// parallel vectors. `None` when either is zero.
pub fn spectral_angle(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    Some(2.0 * diff.sqrt().atan2(sum.sqrt()))
}

pub fn sam_report(x: &HyperCube, r: &HyperCube) -> Result<SamReport> {
    same_shape(x, r)?;
    let (h, w, _) = x.shape();
    let (mut total, mut counted, mut skipped) = (0.0, 0usize, 0usize);
    for row in 0..h {
        for col in 0..w {
            match spectral_angle(&x.spectrum(row, col), &r.spectrum(row, col)) {
                Some(a) => {
                    total += a;
                    counted += 1;
                }
                None => skipped += 1,
            }
        }
    }
    if skipped > 0 {
        log::warn!("SAM skipped {skipped} zero-norm pixels");
    }
    Ok(SamReport {
        mean: if counted == 0 { 0.0 } else { total / counted as f64 },
        skipped,
    })
}

/// Mean spectral angle in radians.
pub fn sam(x: &HyperCube, r: &HyperCube) -> Result<f64> {
    Ok(sam_report(x, r)?.mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub sam_rad: f64,
    pub band_psnr: Vec<f64>,
    pub seconds: f64,
}

pub fn evaluate(x: &HyperCube, r: &HyperCube, seconds: f64) -> Result<MetricReport> {
    let band_psnr = psnr_bands(x, r)?;
    Ok(MetricReport {
        psnr_db: band_psnr.iter().sum::<f64>() / band_psnr.len().max(1) as f64,
        ssim: ssim(x, r)?,
        sam_rad: sam(x, r)?,
        band_psnr,
        seconds,
    })
}

/// Wall-clock seconds of the full split, solve and reassemble pipeline,
/// median of three runs. A cube too small to hold one block takes no time.
pub fn time_denoise(model: &Model, cube: &HyperCube, n: usize, engine: &Engine) -> Result<f64> {
    let mut times = Vec::with_capacity(3);
    for _ in 0..3 {
        let start = Instant::now();
        match model.denoise_cube(cube, n, engine) {
            Ok(_) | Err(Error::EmptyTiling { .. }) => {}
            Err(e) => return Err(e),
        }
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(times[1])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub engine: String,
    pub iters: usize,
    pub psnr: f64,
}

/// Mean PSNR over `testset` (noisy, clean) pairs at every iteration budget
/// in `iters_list`. One solve per block is run with the largest budget and
/// the intermediate reconstructions are read off along the way; a solve
/// that stops early contributes its final estimate to larger budgets.
pub fn sweep_iterations(
    model: &Model,
    testset: &[(HyperCube, HyperCube)],
    n: usize,
    engine: &Engine,
    iters_list: &[usize],
) -> Result<Vec<SweepRow>> {
    let max = iters_list.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Err(Error::Config("iteration list must contain a positive budget".into()));
    }
    let wanted: Vec<usize> = {
        let mut v = iters_list.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    let run = engine.with_iterations(max);
    let shared = model.shared_context()?;
    let mut sums: BTreeMap<usize, f64> = wanted.iter().map(|&k| (k, 0.0)).collect();
    for (noisy, clean) in testset {
        let set = split_blocks(noisy, n)?;
        let per_block: Vec<BTreeMap<usize, Tensor>> = set
            .blocks
            .par_iter()
            .map(|b| {
                let ctx = model.block_context(shared.as_ref(), &b.matrix, None)?;
                let mut seen = BTreeMap::new();
                let solved = model.solve_observed(&ctx, &b.matrix, &run, |k, x| {
                    if wanted.binary_search(&k).is_ok() {
                        seen.insert(k, x.clone());
                    }
                })?;
                for &k in &wanted {
                    seen.entry(k).or_insert_with(|| solved.reconstruction.clone());
                }
                Ok(seen)
            })
            .collect::<Result<_>>()?;
        for &k in &wanted {
            let mats = per_block.iter().map(|m| m[&k].clone()).collect();
            let cube = reassemble(&set.with_matrices(mats)?, Some(noisy))?;
            *sums.get_mut(&k).expect("initialized") += psnr(&cube, clean)?;
        }
    }
    let count = testset.len().max(1) as f64;
    Ok(iters_list
        .iter()
        .map(|&k| SweepRow {
            engine: engine.name().to_string(),
            iters: k,
            psnr: sums[&k] / count,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub sigma: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub sam: f64,
}

/// Writes serializable rows as CSV with a header line.
pub fn write_csv<T: Serialize>(out: impl Write, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format {
            kind: "csv",
            detail: e.to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(h: usize, w: usize, d: usize, seed: u64) -> HyperCube {
        let data = (0..h * w * d)
            .map(|i| ((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 1000.0)
            .collect();
        HyperCube::new(h, w, d, data).unwrap()
    }

    #[test]
    fn identical_cubes_hit_the_psnr_cap() {
        let c = cube(4, 5, 3, 1);
        assert_eq!(psnr(&c, &c).unwrap(), 100.0);
    }

    #[test]
    fn constant_offset_of_a_tenth_is_20_db() {
        let r = cube(4, 4, 2, 2);
        let mut x = r.clone();
        x.data_mut().iter_mut().for_each(|v| *v += 0.1);
        assert!((psnr(&x, &r).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(psnr(&cube(4, 4, 2, 0), &cube(4, 5, 2, 0)).is_err());
    }

    #[test]
    fn identical_cubes_have_unit_ssim() {
        let c = cube(12, 13, 2, 3);
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn small_cubes_are_rejected_by_ssim() {
        let c = cube(10, 20, 1, 0);
        assert!(matches!(ssim(&c, &c), Err(Error::Window { .. })));
    }

    #[test]
    fn scaled_spectra_have_zero_angle() {
        let r = cube(3, 3, 4, 4);
        let mut x = r.clone();
        x.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        assert_eq!(sam(&x, &r).unwrap(), 0.0);
    }

    #[test]
    fn orthogonal_spectra_are_right_angles() {
        let mut x = HyperCube::zeros(2, 2, 2);
        let mut r = HyperCube::zeros(2, 2, 2);
        for row in 0..2 {
            for col in 0..2 {
                x.set(row, col, 0, 1.0);
                r.set(row, col, 1, 3.0);
            }
        }
        assert!((sam(&x, &r).unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn zero_pixels_are_skipped_and_counted() {
        let mut x = cube(2, 2, 3, 5);
        let r = x.clone();
        for b in 0..3 {
            x.set(0, 0, b, 0.0);
        }
        let rep = sam_report(&x, &r).unwrap();
        assert_eq!(rep.skipped, 1);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let rows = vec![SweepRow {
            engine: "deq".into(),
            iters: 5,
            psnr: 31.5,
        }];
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "engine,iters,psnr\ndeq,5,31.5\n");
    }
}
