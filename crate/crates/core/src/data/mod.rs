//! Hyperspectral cubes, block tiling, noise injection and synthetic scenes.

pub mod hsc;
pub mod manifest;
mod synth;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use synth::{synth_cube, synth_scene, SynthConfig, SynthScene};

/// A `height x width x bands` cube stored band-major:
/// `data[(b * height + row) * width + col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f64>,
}

impl HyperCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if bands == 0 {
            return Err(Error::Shape("a cube needs at least one band".into()));
        }
        if data.len() != height * width * bands {
            return Err(Error::Shape(format!(
                "{height}x{width}x{bands} cube needs {} samples, got {}",
                height * width * bands,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bands,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, bands: usize) -> Self {
        Self {
            height,
            width,
            bands,
            data: vec![0.0; height * width * bands],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.bands)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, band: usize) -> usize {
        (band * self.height + row) * self.width + col
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, band: usize) -> f64 {
        self.data[self.index(row, col, band)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, band: usize, v: f64) {
        let i = self.index(row, col, band);
        self.data[i] = v;
    }

    /// One band as a row-major `height x width` slice.
    pub fn band(&self, b: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[b * hw..(b + 1) * hw]
    }

    pub fn spectrum(&self, row: usize, col: usize) -> Vec<f64> {
        (0..self.bands).map(|b| self.get(row, col, b)).collect()
    }

    /// Rescales all samples affinely onto `[0, 1]`. Constant cubes map to 0.
    pub fn normalize_min_max(&mut self) {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        for v in &mut self.data {
            *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
        }
    }

    /// Copies the `rows x cols` window starting at `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, rows: usize, cols: usize) -> Result<HyperCube> {
        if row + rows > self.height || col + cols > self.width {
            return Err(Error::Shape(format!(
                "crop {rows}x{cols} at ({row},{col}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut out = HyperCube::zeros(rows, cols, self.bands);
        for b in 0..self.bands {
            for r in 0..rows {
                for c in 0..cols {
                    out.set(r, c, b, self.get(row + r, col + c, b));
                }
            }
        }
        Ok(out)
    }
}

/// An `n x n` spatial patch stacked into a `d x n²` matrix of spectra.
///
/// Column `j` holds the spectrum of patch pixel `(j / n, j % n)`, which makes
/// the matrix bit-identical to a `d x n x n` channel-major image.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalBlock {
    pub n: usize,
    pub origin: (usize, usize),
    pub matrix: Tensor,
}

impl SignalBlock {
    pub fn new(matrix: Tensor, n: usize, origin: (usize, usize)) -> Result<Self> {
        let (_, cols) = matrix.expect_matrix("signal block")?;
        if cols != n * n {
            return Err(Error::Shape(format!("block has {cols} columns, expected {n}² = {}", n * n)));
        }
        Ok(Self { n, origin, matrix })
    }

    pub fn bands(&self) -> usize {
        self.matrix.rows()
    }

    pub fn signals(&self) -> usize {
        self.matrix.cols()
    }
}

/// The non-overlapping tiling of one cube.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSet {
    pub blocks: Vec<SignalBlock>,
    pub cube_shape: (usize, usize, usize),
    pub n: usize,
}

impl BlockSet {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Same tiling with each block matrix replaced, e.g. by denoised output.
    pub fn with_matrices(&self, matrices: Vec<Tensor>) -> Result<BlockSet> {
        if matrices.len() != self.blocks.len() {
            return Err(Error::Assembly(format!(
                "{} matrices for {} blocks",
                matrices.len(),
                self.blocks.len()
            )));
        }
        let blocks = self
            .blocks
            .iter()
            .zip(matrices)
            .map(|(b, m)| SignalBlock::new(m, b.n, b.origin))
            .collect::<Result<_>>()?;
        Ok(BlockSet {
            blocks,
            cube_shape: self.cube_shape,
            n: self.n,
        })
    }
}

fn extract_block(cube: &HyperCube, n: usize, row: usize, col: usize) -> SignalBlock {
    let d = cube.bands;
    let nn = n * n;
    let mut m = vec![0.0; d * nn];
    for b in 0..d {
        for r in 0..n {
            let src = cube.index(row + r, col, b);
            m[b * nn + r * n..b * nn + (r + 1) * n].copy_from_slice(&cube.data[src..src + n]);
        }
    }
    SignalBlock {
        n,
        origin: (row, col),
        matrix: Tensor::from_parts(vec![d, nn], m),
    }
}

/// Tiles the cube into `⌊h/n⌋·⌊w/n⌋` non-overlapping blocks in row-major scan
/// order. Rows and columns not covered by a full tile are dropped.
pub fn split_blocks(cube: &HyperCube, n: usize) -> Result<BlockSet> {
    if n == 0 {
        return Err(Error::Precondition("patch side must be at least 1".into()));
    }
    if n > cube.height.min(cube.width) {
        return Err(Error::EmptyTiling {
            n,
            height: cube.height,
            width: cube.width,
        });
    }
    let (tr, tc) = (cube.height / n, cube.width / n);
    let blocks = (0..tr)
        .flat_map(|i| (0..tc).map(move |j| (i * n, j * n)))
        .map(|(r, c)| extract_block(cube, n, r, c))
        .collect();
    Ok(BlockSet {
        blocks,
        cube_shape: cube.shape(),
        n,
    })
}

/// Places every block back at its origin. Pixels outside the tiled region are
/// copied from `fill` when given, otherwise left at zero.
pub fn reassemble(set: &BlockSet, fill: Option<&HyperCube>) -> Result<HyperCube> {
    let (h, w, d) = set.cube_shape;
    let n = set.n;
    let mut out = match fill {
        Some(src) if src.shape() == set.cube_shape => src.clone(),
        Some(src) => {
            return Err(Error::Assembly(format!(
                "fill cube {:?} does not match {:?}",
                src.shape(),
                set.cube_shape
            )))
        }
        None => HyperCube::zeros(h, w, d),
    };
    let mut seen = std::collections::HashSet::new();
    for block in &set.blocks {
        let (r0, c0) = block.origin;
        if block.n != n || block.matrix.shape() != [d, n * n] {
            return Err(Error::Assembly(format!(
                "block at {:?} has shape {:?}, expected {d}x{}",
                block.origin,
                block.matrix.shape(),
                n * n
            )));
        }
        if r0 % n != 0 || c0 % n != 0 || r0 + n > h || c0 + n > w {
            return Err(Error::Assembly(format!("block origin {:?} is off the {n}-grid", block.origin)));
        }
        if !seen.insert(block.origin) {
            return Err(Error::Assembly(format!("duplicate block origin {:?}", block.origin)));
        }
        let m = block.matrix.data();
        let nn = n * n;
        for b in 0..d {
            for r in 0..n {
                let dst = out.index(r0 + r, c0, b);
                out.data[dst..dst + n].copy_from_slice(&m[b * nn + r * n..b * nn + (r + 1) * n]);
            }
        }
    }
    Ok(out)
}

/// Splits a (noisy, clean) cube pair into aligned block matrices.
pub fn block_pairs(noisy: &HyperCube, clean: &HyperCube, n: usize) -> Result<Vec<(Tensor, Tensor)>> {
    if noisy.shape() != clean.shape() {
        return Err(Error::Shape(format!(
            "noisy cube {:?} vs clean cube {:?}",
            noisy.shape(),
            clean.shape()
        )));
    }
    let a = split_blocks(noisy, n)?;
    let b = split_blocks(clean, n)?;
    Ok(a.blocks
        .into_iter()
        .zip(b.blocks)
        .map(|(x, y)| (x.matrix, y.matrix))
        .collect())
}

/// All pixel spectra of `cubes` as the columns of one `d x P` matrix, in
/// cube order then row-major pixel order.
pub fn spectra_matrix(cubes: &[HyperCube]) -> Result<Tensor> {
    let d = match cubes.first() {
        Some(c) => c.bands(),
        None => return Err(Error::Precondition("no cubes given".into())),
    };
    if cubes.iter().any(|c| c.bands() != d) {
        return Err(Error::Shape("cubes disagree on the band count".into()));
    }
    let p: usize = cubes.iter().map(|c| c.height() * c.width()).sum();
    let mut out = Tensor::zeros(vec![d, p]);
    let mut col = 0;
    for c in cubes {
        let hw = c.height() * c.width();
        for b in 0..d {
            out.row_mut(b)[col..col + hw].copy_from_slice(c.band(b));
        }
        col += hw;
    }
    Ok(out)
}

/// Additive white Gaussian noise with standard deviation `sigma_255 / 255`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    pub sigma_255: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(sigma_255: f64, seed: u64) -> Result<Self> {
        if !(sigma_255 >= 0.0) || !sigma_255.is_finite() {
            return Err(Error::Precondition(format!("noise level must be >= 0, got {sigma_255}")));
        }
        Ok(Self { sigma_255, seed })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma_255 / 255.0
    }
}

/// Adds i.i.d. `N(0, σ²)` noise to every sample. Values are not clipped.
pub fn add_noise(cube: &HyperCube, noise: &NoiseModel) -> HyperCube {
    let mut out = cube.clone();
    let sigma = noise.sigma();
    if sigma == 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    for v in &mut out.data {
        *v += normal.sample(&mut rng);
    }
    out
}

/// Adds noise directly to a block matrix (used when sampling training pairs).
pub fn add_noise_matrix(m: &Tensor, sigma: f64, rng: &mut impl rand::Rng) -> Tensor {
    if sigma == 0.0 {
        return m.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    let mut out = m.clone();
    for v in out.data_mut() {
        *v += normal.sample(rng);
    }
    out
}
