//! Run settings: command-line flags override a JSON config file, which
//! overrides checkpoint metadata, which overrides the defaults below.

use std::path::Path;

use clap::{Args, ValueEnum};
use serde::Deserialize;

use deqsc::anderson::AndersonConfig;
use deqsc::hqs::Variant;
use deqsc::model::{Engine, DEFAULT_SPARSITY};
use deqsc::{Error, Result};

pub const DEFAULT_N: usize = 60;
pub const DEFAULT_K: usize = 10;
pub const DEFAULT_ATOMS: usize = 512;
pub const KSVD_SPARSITY: usize = 8;
pub const DEFAULT_BATCH: usize = 16;
pub const DEFAULT_WIDTH: usize = 64;
pub const DEFAULT_SIGMA: f64 = 50.0;
pub const PRETRAIN_LR: f64 = 1e-3;
pub const PRETRAIN_EPOCHS: usize = 150;
pub const TRAIN_LR: f64 = 1e-4;
pub const TRAIN_EPOCHS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    Du,
    Deq,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantArg {
    Full,
    Fast,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::Fast => Variant::Fast,
        }
    }
}

/// Tunable settings shared by all commands. Every field is optional so the
/// layers can be merged.
#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tuning {
    /// Master seed; per-purpose seeds are derived from it [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Block side n; blocks are n x n x d [default: 60]
    #[arg(long)]
    pub n: Option<usize>,
    /// Noise level on the 0..255 scale [default: 50]
    #[arg(long = "sigma")]
    pub sigma_255: Option<f64>,
    /// Solver variant [default: full]
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// Inference/training engine [default: deq]
    #[arg(long, value_enum)]
    pub engine: Option<EngineKind>,
    /// Unrolled depth K [default: 10]
    #[arg(long)]
    pub k: Option<usize>,
    /// Anderson memory m [default: 5]
    #[arg(long = "anderson-m")]
    pub anderson_m: Option<usize>,
    /// Anderson damping beta [default: 1.0]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Fixed-point iteration budget [default: 20]
    #[arg(long = "max-iters")]
    pub max_iters: Option<usize>,
    /// Fixed-point relative residual tolerance [default: 1e-4]
    #[arg(long)]
    pub tol: Option<f64>,
    /// Support size s of the fast variant, OMP and KSVD sparsity [default: 10, KSVD 8]
    #[arg(long)]
    pub sparsity: Option<usize>,
    /// Adam learning rate [default: 1e-3 pretrain, 1e-4 train]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epochs [default: 150 pretrain, 100 train]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Minibatch size in blocks [default: 16]
    #[arg(long)]
    pub batch: Option<usize>,
    /// Dictionary size M [default: 512]
    #[arg(long)]
    pub atoms: Option<usize>,
    /// KSVD sweeps [default: 20]
    #[arg(long)]
    pub sweeps: Option<usize>,
    /// Hidden channels of the denoiser [default: 64]
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Initial penalty b [default: 0.5]
    #[arg(long = "init-b")]
    pub init_b: Option<f64>,
    /// Initial sparsity weight mu [default: 0.005]
    #[arg(long = "init-mu")]
    pub init_mu: Option<f64>,
    /// Fraction of blocks held out for validation [default: 0.1]
    #[arg(long = "val-fraction")]
    pub val_fraction: Option<f64>,
}

macro_rules! layer {
    ($hi:expr, $lo:expr; $($f:ident),*) => {
        Tuning { $($f: $hi.$f.or($lo.$f)),* }
    };
}

impl Tuning {
    /// `self` wins over `lower`.
    pub fn over(&self, lower: &Tuning) -> Tuning {
        layer!(self, lower; seed, n, sigma_255, variant, engine, k, anderson_m, beta,
            max_iters, tol, sparsity, lr, epochs, batch, atoms, sweeps, hidden, init_b,
            init_mu, val_fraction)
    }

    pub fn from_file(path: &Path) -> Result<Tuning> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The layer implied by a stored engine.
    pub fn from_engine(engine: &Engine) -> Tuning {
        match engine {
            Engine::Deq(a) => Tuning {
                engine: Some(EngineKind::Deq),
                anderson_m: Some(a.m),
                beta: Some(a.beta),
                max_iters: Some(a.max_iters),
                tol: Some(a.tol),
                ..Tuning::default()
            },
            Engine::Du { k } => Tuning {
                engine: Some(EngineKind::Du),
                k: Some(*k),
                ..Tuning::default()
            },
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn n(&self) -> usize {
        self.n.unwrap_or(DEFAULT_N)
    }

    pub fn sigma_255(&self) -> f64 {
        self.sigma_255.unwrap_or(DEFAULT_SIGMA)
    }

    pub fn variant(&self) -> Variant {
        self.variant.map_or(Variant::Full, Variant::from)
    }

    pub fn sparsity(&self) -> usize {
        self.sparsity.unwrap_or(DEFAULT_SPARSITY)
    }

    pub fn batch(&self) -> usize {
        self.batch.unwrap_or(DEFAULT_BATCH)
    }

    pub fn atoms(&self) -> usize {
        self.atoms.unwrap_or(DEFAULT_ATOMS)
    }

    pub fn sweeps(&self) -> usize {
        self.sweeps.unwrap_or(20)
    }

    pub fn hidden(&self) -> usize {
        self.hidden.unwrap_or(DEFAULT_WIDTH)
    }

    pub fn init_b(&self) -> f64 {
        self.init_b.unwrap_or(0.5)
    }

    pub fn init_mu(&self) -> f64 {
        self.init_mu.unwrap_or(0.005)
    }

    pub fn val_fraction(&self) -> Result<f64> {
        let f = self.val_fraction.unwrap_or(0.1);
        if !(0.0..1.0).contains(&f) {
            return Err(Error::Config(format!("validation fraction must lie in [0, 1), got {f}")));
        }
        Ok(f)
    }

    pub fn anderson(&self) -> Result<AndersonConfig> {
        let d = AndersonConfig::default();
        let cfg = AndersonConfig {
            m: self.anderson_m.unwrap_or(d.m),
            beta: self.beta.unwrap_or(d.beta),
            max_iters: self.max_iters.unwrap_or(d.max_iters),
            tol: self.tol.unwrap_or(d.tol),
            ridge: d.ridge,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn engine(&self) -> Result<Engine> {
        match self.engine.unwrap_or(EngineKind::Deq) {
            EngineKind::Deq => Ok(Engine::Deq(self.anderson()?)),
            EngineKind::Du => {
                let k = self.k.unwrap_or(DEFAULT_K);
                if k == 0 {
                    return Err(Error::Config("unrolled depth K must be >= 1".into()));
                }
                Ok(Engine::Du { k })
            }
        }
    }
}
