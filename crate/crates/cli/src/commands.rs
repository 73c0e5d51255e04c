//! One function per subcommand.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use deqsc::autodiff::Tensor;
use deqsc::baseline::{baseline_denoise_cube, Baseline};
use deqsc::checkpoint::Checkpoint;
use deqsc::data::hsc::{read_cube, write_cube, SampleType};
use deqsc::data::manifest::{read_manifest, write_manifest, ManifestEntry};
use deqsc::data::{add_noise, block_pairs, spectra_matrix, synth_cube, HyperCube, NoiseModel, SynthConfig};
use deqsc::deq::{deq_block_grad, DeqConfig};
use deqsc::denoiser::{pretrain, DenoiserParams, PretrainConfig, ScalarParams};
use deqsc::dictionary::{ksvd, Dictionary, KsvdConfig};
use deqsc::du::{du_block_grad, UnrollConfig};
use deqsc::metrics::{evaluate, sweep_iterations, write_csv, MetricsRow};
use deqsc::model::{Engine, Model};
use deqsc::train::{
    derive_seed, fit, AdamConfig, FitConfig, FitState, JsonlLog, SeedPurpose, StepRecord, TrainSample,
};
use deqsc::{Error, Result};

use crate::config::{Tuning, KSVD_SPARSITY, PRETRAIN_EPOCHS, PRETRAIN_LR, TRAIN_EPOCHS, TRAIN_LR};

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)?;
    println!("wrote {} sha256 {}", path.display(), file_digest(path)?);
    Ok(())
}

fn load_entries(manifest: &Path) -> Result<Vec<(ManifestEntry, HyperCube, HyperCube)>> {
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::Format {
            kind: "manifest",
            detail: "no entries".into(),
        });
    }
    entries
        .into_iter()
        .map(|e| {
            let (clean, _) = read_cube(&e.clean_path)?;
            let (noisy, _) = read_cube(&e.noisy_path)?;
            Ok((e, noisy, clean))
        })
        .collect()
}

fn load_pairs(manifest: &Path, n: usize) -> Result<Vec<(Tensor, Tensor)>> {
    let mut pairs = Vec::new();
    for (_, noisy, clean) in load_entries(manifest)? {
        pairs.extend(block_pairs(&noisy, &clean, n)?);
    }
    if pairs.is_empty() {
        return Err(Error::Precondition(format!("no {n}x{n} blocks in the manifest cubes")));
    }
    Ok(pairs)
}

/// Every `round(1/fraction)`-th block goes to validation.
fn split_validation<T>(items: Vec<T>, fraction: f64) -> (Vec<T>, Vec<T>) {
    if fraction <= 0.0 || items.len() < 2 {
        return (items, Vec::new());
    }
    let stride = ((1.0 / fraction).round() as usize).max(2);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, x) in items.into_iter().enumerate() {
        if i % stride == stride - 1 {
            val.push(x);
        } else {
            train.push(x);
        }
    }
    (train, val)
}

fn meta_tuning(ckpt: &Checkpoint) -> Tuning {
    let mut t = ckpt
        .meta("engine")
        .and_then(|v| serde_json::from_value::<Engine>(v.clone()).ok())
        .map(|e| Tuning::from_engine(&e))
        .unwrap_or_default();
    t.n = ckpt.meta("n").and_then(Value::as_u64).map(|v| v as usize);
    t.sigma_255 = ckpt.meta("sigma_255").and_then(Value::as_f64);
    t
}

pub struct SynthArgs {
    pub out: PathBuf,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub gen_atoms: usize,
    pub scene_sparsity: usize,
    pub smoothness: f64,
}

pub fn synth(a: &SynthArgs, t: &Tuning) -> Result<()> {
    fs::create_dir_all(&a.out).map_err(|e| io(&a.out, e))?;
    let seed = t.seed();
    let dict = Dictionary::random(a.bands, a.gen_atoms, derive_seed(seed, SeedPurpose::Dictionary))?;
    let data_seed = derive_seed(seed, SeedPurpose::Data);
    let noise_seed = derive_seed(seed, SeedPurpose::Noise);
    let mut entries = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let cfg = SynthConfig::new(
            a.height,
            a.width,
            a.scene_sparsity,
            a.smoothness,
            data_seed.wrapping_add(i as u64),
        );
        let clean = synth_cube(&dict, &cfg)?;
        let noise = NoiseModel::new(t.sigma_255(), noise_seed.wrapping_add(i as u64))?;
        let noisy = add_noise(&clean, &noise);
        let (c, n) = (format!("clean_{i:03}.hsc"), format!("noisy_{i:03}.hsc"));
        write_cube(a.out.join(&c), &clean, SampleType::F64)?;
        write_cube(a.out.join(&n), &noisy, SampleType::F64)?;
        entries.push(ManifestEntry {
            clean_path: c.into(),
            noisy_path: n.into(),
            sigma_255: t.sigma_255(),
            seed: noise.seed,
        });
    }
    let manifest = a.out.join("manifest.json");
    write_manifest(&manifest, &entries)?;
    println!("wrote {} cubes and {}", a.count, manifest.display());
    Ok(())
}

pub fn learn_dict(manifest: &Path, out: &Path, max_samples: usize, t: &Tuning) -> Result<()> {
    let cubes: Vec<HyperCube> = load_entries(manifest)?.into_iter().map(|(_, _, c)| c).collect();
    let mut train = spectra_matrix(&cubes)?;
    if max_samples > 0 && train.cols() > max_samples {
        let stride = train.cols().div_ceil(max_samples);
        let keep: Vec<usize> = (0..train.cols()).step_by(stride).collect();
        train = train.select_columns(&keep);
    }
    let cfg = KsvdConfig::new(
        t.atoms(),
        t.sparsity.unwrap_or(KSVD_SPARSITY).min(train.rows()),
        t.sweeps(),
        derive_seed(t.seed(), SeedPurpose::Dictionary),
    );
    let outcome = ksvd(&train, &cfg)?;
    let mut ckpt = Checkpoint::new();
    ckpt.put_dictionary(&outcome.dictionary);
    ckpt.set_meta("ksvd_sweeps", cfg.sweeps);
    ckpt.set_meta("ksvd_sparsity", cfg.sparsity);
    save(&ckpt, out)?;
    println!(
        "final coding error {:.6e}",
        outcome.errors.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn open_log(path: Option<&Path>, append: bool) -> Result<Option<JsonlLog>> {
    path.map(|p| JsonlLog::create(p, append)).transpose()
}

pub fn cmd_pretrain(manifest: &Path, out: &Path, log: Option<&Path>, t: &Tuning) -> Result<()> {
    let pairs = load_pairs(manifest, t.n())?;
    let bands = pairs[0].0.rows();
    let init = DenoiserParams::init(bands, t.hidden(), derive_seed(t.seed(), SeedPurpose::Init))?;
    let cfg = PretrainConfig {
        epochs: t.epochs.unwrap_or(PRETRAIN_EPOCHS),
        batch: t.batch(),
        adam: AdamConfig::with_lr(t.lr.unwrap_or(PRETRAIN_LR)),
        validation: t.val_fraction()?,
        seed: derive_seed(t.seed(), SeedPurpose::Shuffle),
    };
    let report = pretrain(&pairs, init, &cfg)?;
    if let Some(mut l) = open_log(log, false)? {
        for (epoch, loss) in report.train_loss.iter().enumerate() {
            l.write(&StepRecord {
                epoch,
                step: epoch,
                loss: *loss,
                fwd_iters: 0.0,
                bwd_iters: 0.0,
                grad_norm: 0.0,
                wall_ms: 0.0,
                engine: "pretrain".into(),
                variant: "none".into(),
            })?;
        }
    }
    let mut ckpt = Checkpoint::new();
    ckpt.put_denoiser("", &report.params);
    ckpt.set_meta("n", t.n());
    ckpt.set_meta("best_epoch", report.best_epoch);
    save(&ckpt, out)?;
    println!("best epoch {} of {}", report.best_epoch, cfg.epochs);
    Ok(())
}

pub struct TrainArgs<'a> {
    pub manifest: &'a Path,
    pub dict: Option<&'a Path>,
    pub denoiser: Option<&'a Path>,
    pub out: &'a Path,
    pub log: Option<&'a Path>,
    pub resume: bool,
}

pub fn cmd_train(a: &TrainArgs, flags: &Tuning) -> Result<()> {
    let (state, t) = if a.resume {
        let ckpt = Checkpoint::load(a.out)?;
        let t = flags.over(&meta_tuning(&ckpt));
        let state = ckpt.fit_state()?;
        if let Some(s) = ckpt.meta("seed").and_then(Value::as_u64) {
            if flags.seed.is_some_and(|f| f != s) {
                return Err(Error::Config(format!("checkpoint was trained with seed {s}")));
            }
        }
        let t = Tuning {
            seed: t.seed.or(ckpt.meta("seed").and_then(Value::as_u64)),
            ..t
        };
        (state, t)
    } else {
        let t = flags.clone();
        let dict_path = a
            .dict
            .ok_or_else(|| Error::Config("--dict is required unless --resume is given".into()))?;
        let dict = Checkpoint::load(dict_path)?.dictionary()?;
        let denoiser = match a.denoiser {
            Some(p) => Checkpoint::load(p)?.denoiser("")?,
            None => DenoiserParams::init(dict.dim(), t.hidden(), derive_seed(t.seed(), SeedPurpose::Init))?,
        };
        let scalars = ScalarParams::from_realized(t.init_b(), t.init_mu())?;
        let model = Model::new(dict, denoiser, scalars, t.variant(), t.sparsity())?;
        (FitState::from(model), t)
    };
    let engine = t.engine()?;
    let n = t.n();
    let pairs = load_pairs(a.manifest, n)?;
    if pairs[0].0.rows() != state.model.bands() {
        return Err(Error::Config(format!(
            "data has {} bands, dictionary d = {}",
            pairs[0].0.rows(),
            state.model.bands()
        )));
    }
    let (train, val) = split_validation(pairs, t.val_fraction()?);
    let train = TrainSample::prepare_all(train, &state.model)?;
    let val = TrainSample::prepare_all(val, &state.model)?;
    let fit_cfg = FitConfig::new(
        t.epochs.unwrap_or(TRAIN_EPOCHS),
        t.batch(),
        t.lr.unwrap_or(TRAIN_LR),
        derive_seed(t.seed(), SeedPurpose::Shuffle),
    );
    let mut log = open_log(a.log, a.resume)?;
    let mut write_err = None;
    let mut on_step = |r: &StepRecord| {
        if let Some(l) = log.as_mut() {
            if let Err(e) = l.write(r) {
                write_err.get_or_insert(e);
            }
        }
    };
    let variant = state.model.variant;
    let outcome = match &engine {
        Engine::Deq(cfg) => {
            let deq = DeqConfig {
                forward: cfg.clone(),
                backward: cfg.clone(),
            };
            fit(state, &train, &val, &fit_cfg, &engine, &|m, c, s| deq_block_grad(m, c, s, &deq), &mut on_step)?
        }
        Engine::Du { k } => {
            let du = UnrollConfig::new(*k, variant);
            du.validate()?;
            fit(state, &train, &val, &fit_cfg, &engine, &|m, c, s| du_block_grad(m, c, s, &du), &mut on_step)?
        }
    };
    if let Some(e) = write_err {
        return Err(e);
    }
    let mut ckpt = Checkpoint::new();
    ckpt.put_fit_state(&outcome.state);
    ckpt.set_meta("engine", serde_json::to_value(&engine)?);
    ckpt.set_meta("method", format!("{}-{}", engine.name(), variant.as_str()));
    ckpt.set_meta("n", n);
    ckpt.set_meta("sigma_255", t.sigma_255());
    ckpt.set_meta("seed", t.seed());
    save(&ckpt, a.out)?;
    println!(
        "{}",
        json!({
            "epochs_run": outcome.history.epoch_loss.len(),
            "next_epoch": outcome.state.epoch,
            "epoch_loss": outcome.history.epoch_loss,
            "val_psnr": outcome.history.val_psnr,
            "skipped_blocks": outcome.history.skipped,
        })
    );
    Ok(())
}

/// The model stored in `path` and the settings it asks for, with `flags`
/// layered on top.
fn load_model(path: &Path, flags: &Tuning) -> Result<(Model, Tuning, String)> {
    let ckpt = Checkpoint::load(path)?;
    let mut model = ckpt.model()?;
    let t = flags.over(&meta_tuning(&ckpt));
    if let Some(v) = flags.variant {
        model.variant = v.into();
    }
    if let Some(s) = flags.sparsity {
        model.sparsity = s;
    }
    let model = Model::new(model.dictionary, model.denoiser, model.scalars, model.variant, model.sparsity)?;
    let method = match ckpt.meta("method").and_then(Value::as_str) {
        Some(m) => m.to_string(),
        None => format!("{}-{}", t.engine()?.name(), model.variant.as_str()),
    };
    Ok((model, t, method))
}

pub fn cmd_denoise(
    model_path: &Path,
    input: &Path,
    output: &Path,
    reference: Option<&Path>,
    flags: &Tuning,
) -> Result<()> {
    let (model, t, _) = load_model(model_path, flags)?;
    let (cube, dtype) = read_cube(input)?;
    let start = std::time::Instant::now();
    let out = model.denoise_cube(&cube, t.n(), &t.engine()?)?;
    let seconds = start.elapsed().as_secs_f64();
    write_cube(output, &out, dtype)?;
    if let Some(r) = reference {
        let (clean, _) = read_cube(r)?;
        println!("{}", serde_json::to_string(&evaluate(&out, &clean, seconds)?)?);
    }
    Ok(())
}

fn baselines(dict: &Dictionary, sigma: f64, t: &Tuning) -> Vec<Baseline> {
    Baseline::standard(dict, sigma, t.sparsity())
}

pub fn cmd_eval(
    manifest: &Path,
    models: &[(String, PathBuf)],
    with_baselines: bool,
    out: &Path,
    flags: &Tuning,
) -> Result<()> {
    let entries = load_entries(manifest)?;
    let loaded = models
        .iter()
        .map(|(name, p)| {
            let (m, t, method) = load_model(p, flags)?;
            Ok((if name.is_empty() { method } else { name.clone() }, m, t))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (entry, noisy, clean) in &entries {
        let sigma = entry.sigma_255;
        let mut push = |method: &str, x: &HyperCube| -> Result<()> {
            let r = evaluate(x, clean, 0.0)?;
            rows.push(MetricsRow {
                method: method.to_string(),
                sigma,
                psnr: r.psnr_db,
                ssim: r.ssim,
                sam: r.sam_rad,
            });
            Ok(())
        };
        if with_baselines {
            push("noisy", noisy)?;
            if let Some((_, m, t)) = loaded.first() {
                for b in baselines(&m.dictionary, sigma / 255.0, t) {
                    push(b.name(), &baseline_denoise_cube(&m.dictionary, noisy, t.n(), &b)?)?;
                }
            }
        }
        for (name, m, t) in &loaded {
            push(name, &m.denoise_cube(noisy, t.n(), &t.engine()?)?)?;
        }
    }
    let f = File::create(out).map_err(|e| io(out, e))?;
    write_csv(f, &rows)?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

pub fn cmd_sweep(manifest: &Path, model_path: &Path, iters: &[usize], out: &Path, flags: &Tuning) -> Result<()> {
    let (model, t, _) = load_model(model_path, flags)?;
    let testset: Vec<(HyperCube, HyperCube)> = load_entries(manifest)?
        .into_iter()
        .map(|(_, noisy, clean)| (noisy, clean))
        .collect();
    let rows = sweep_iterations(&model, &testset, t.n(), &t.engine()?, iters)?;
    let f = File::create(out).map_err(|e| io(out, e))?;
    write_csv(f, &rows)?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}
