use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use deep_glr::data::{self, Dataset, DatasetError};
use deep_glr::metrics::{self, MetricReport, SampleMetrics};
use deep_glr::networks::{CheckpointError, CheckpointInfo, ModelParams, REFERENCE_PARAMETER_COUNT};
use deep_glr::pfbs::{Reconstruction, Reconstructor};
use deep_glr::training::{self, TrainError, TrainHistory};
use deep_glr::Image;
use log::info;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::images;
use crate::{CliError, GlobalArgs};

const REFERENCE_EPSILON: f64 = 1.25;

fn io_err(what: impl std::fmt::Display, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{what}: {e}"))
}

fn dataset_err(path: &Path, e: DatasetError) -> CliError {
    let msg = format!("{}: {e}", path.display());
    match e {
        DatasetError::Empty | DatasetError::Projector(_) => CliError::Validation(msg),
        _ => CliError::Io(msg),
    }
}

fn checkpoint_err(path: &Path, e: CheckpointError) -> CliError {
    let msg = format!("{}: {e}", path.display());
    match e {
        CheckpointError::Architecture => CliError::Validation(msg),
        _ => CliError::Io(msg),
    }
}

fn train_err(e: TrainError) -> CliError {
    CliError::Validation(e.to_string())
}

pub fn load_config(global: &GlobalArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.apply_seed(seed);
    }
    if let Some(n) = global.iterations {
        cfg.pfbs.max_iterations = Some(n);
    }
    if let Some(m) = global.residual_mode {
        cfg.pfbs.residual_mode = m.into();
    }
    if let Some(r) = global.cnn_refresh {
        cfg.pfbs.cnn_refresh = r.into();
    }
    if global.jobs == 0 {
        return Err(CliError::Validation("--jobs must be at least 1".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    data::load_dataset(path).map_err(|e| dataset_err(path, e))
}

fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<(ModelParams, CheckpointInfo), CliError> {
    let (params, info) = ModelParams::load(path).map_err(|e| checkpoint_err(path, e))?;
    if params.config() != &cfg.network {
        return Err(CliError::Validation(format!(
            "{}: checkpoint architecture does not match the configured network",
            path.display()
        )));
    }
    Ok((params, info))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("json serializes");
    fs::write(path, text + "\n").map_err(|e| io_err(path.display(), e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn generate(cfg: &RunConfig, out: &Path, count: Option<usize>) -> Result<(), CliError> {
    let count = count.unwrap_or(cfg.data.count);
    if count == 0 {
        return Err(CliError::Validation("empty dataset: count must be at least 1".into()));
    }
    let mut ds = data::generate_dataset(&cfg.geometry, &cfg.phantom, &cfg.noise, count)
        .map_err(|e| dataset_err(out, e))?;
    ds.provenance = Some(cfg.hash());
    let bytes = ds.to_bytes().map_err(|e| dataset_err(out, e))?;
    fs::write(out, &bytes).map_err(|e| io_err(out.display(), e))?;
    let g = &ds.geometry;
    println!(
        "geometry {}x{} px, {} angles, {} bins; n0 {}; mu_max {}",
        g.image_size, g.image_size, g.num_angles, g.num_bins, ds.noise.n0, ds.noise.mu_max
    );
    for (i, s) in ds.samples.iter().enumerate() {
        let y = s.noisy.data();
        let ymax = y.iter().cloned().fold(f64::MIN, f64::max);
        println!(
            "sample {i:4}: image [{:.3}, {:.3}], max line integral {:.3}",
            s.ground_truth.min(),
            s.ground_truth.max(),
            ymax
        );
    }
    println!("wrote {count} samples to {}", out.display());
    println!("sha256 {}", sha256_hex(&bytes));
    println!("config {}", cfg.hash());
    Ok(())
}

pub fn train(
    cfg: &RunConfig,
    train_path: &Path,
    val_path: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<(), CliError> {
    let train_ds = load_dataset(train_path)?;
    let val_ds = load_dataset(val_path)?;
    if train_ds.geometry != val_ds.geometry {
        return Err(CliError::Validation(format!(
            "geometry mismatch: {} and {} were generated with different geometries",
            train_path.display(),
            val_path.display()
        )));
    }
    let r = Reconstructor::new(train_ds.geometry, cfg.pfbs.clone())
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let (init, offset) = match resume {
        Some(p) => {
            let (params, info) = load_checkpoint(p, cfg)?;
            info!("resuming from {} after {} epochs", p.display(), info.epochs_completed);
            (params, info.epochs_completed)
        }
        None => (
            ModelParams::init(cfg.network.clone(), cfg.train.seed)
                .map_err(|e| CliError::Validation(e.to_string()))?,
            0,
        ),
    };
    let fbp_val = training::fbp_psnr(&r, &val_ds).map_err(train_err)?;
    info!("validation FBP PSNR {fbp_val:.2} dB");
    let start = Instant::now();
    let outcome = training::train(&r, &train_ds, &val_ds, &cfg.train, init, |e| {
        info!(
            "epoch {:3} stage {} lr {:.2e} loss {:.4e} val {:.2} dB eps {:.4} alpha {:.4} mu {:.4}",
            e.epoch + offset,
            e.stage,
            e.lr,
            e.train_loss,
            e.val_psnr,
            e.epsilon,
            e.alpha,
            e.val_mean_mu
        );
    })
    .map_err(train_err)?;
    let wall = start.elapsed().as_secs_f64();

    let mut history = outcome.history.clone();
    history.records.iter_mut().for_each(|r| r.epoch += offset);
    let epochs_completed = offset + history.records.len();
    let hash = cfg.hash();
    let ckpt_info = CheckpointInfo {
        epochs_completed,
        best_val_psnr: Some(outcome.best_val_psnr),
        config_hash: Some(hash.clone()),
    };
    outcome
        .params
        .save(out, &ckpt_info)
        .map_err(|e| checkpoint_err(out, e))?;

    let hist_path = with_suffix(out, ".history.csv");
    write_history(&hist_path, &history, resume.is_some())?;

    let last = history.records.last();
    let params = &outcome.params;
    let summary = json!({
        "config_hash": hash,
        "parameter_count": params.parameter_count(),
        "parameter_breakdown": params.breakdown(),
        "reference_parameter_count": REFERENCE_PARAMETER_COUNT,
        "final_epsilon": params.epsilon(),
        "reference_epsilon": REFERENCE_EPSILON,
        "final_alpha": params.alpha(),
        "mean_mu": last.map(|r| r.val_mean_mu),
        "best_val_psnr": outcome.best_val_psnr,
        "fbp_val_psnr": fbp_val,
        "epochs_completed": epochs_completed,
        "wall_time_s": wall,
    });
    write_json(&with_suffix(out, ".summary.json"), &summary)?;
    println!(
        "best validation PSNR {:.2} dB (FBP {:.2} dB), epsilon {:.4} (reference {REFERENCE_EPSILON}), {} parameters",
        outcome.best_val_psnr,
        fbp_val,
        params.epsilon(),
        params.parameter_count()
    );
    Ok(())
}

/// Writes the history CSV, appending to an existing file when resuming.
fn write_history(path: &Path, history: &TrainHistory, append: bool) -> Result<(), CliError> {
    let mut buf = Vec::new();
    history.write_csv(&mut buf).expect("in-memory write");
    let existing = if append { fs::read_to_string(path).ok() } else { None };
    let text = match existing {
        Some(old) if !old.is_empty() => {
            let body = String::from_utf8(buf).expect("ascii");
            let rows: String = body.lines().skip(1).map(|l| format!("{l}\n")).collect();
            old + &rows
        }
        _ => String::from_utf8(buf).expect("ascii"),
    };
    fs::write(path, text).map_err(|e| io_err(path.display(), e))
}

/// Runs `f` over `0..n` on `jobs` threads; results keep index order.
fn parallel_map<T: Send>(
    n: usize,
    jobs: usize,
    f: impl Fn(usize) -> Result<T, CliError> + Sync,
) -> Result<Vec<T>, CliError> {
    let chunk_len = n.div_ceil(jobs.clamp(1, n.max(1))).max(1);
    let mut slots: Vec<Option<Result<T, CliError>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        for (c, chunk) in slots.chunks_mut(chunk_len).enumerate() {
            let f = &f;
            s.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(f(c * chunk_len + k));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

fn reconstruct_all(
    cfg: &RunConfig,
    jobs: usize,
    checkpoint: &Path,
    ds: &Dataset,
) -> Result<(Reconstructor, Vec<Reconstruction>), CliError> {
    let (params, _) = load_checkpoint(checkpoint, cfg)?;
    let r = Reconstructor::new(ds.geometry, cfg.pfbs.clone())
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let recs = parallel_map(ds.len(), jobs, |i| {
        r.reconstruct(&ds.samples[i].noisy, &params)
            .map_err(|e| CliError::Validation(format!("sample {i}: {e}")))
    })?;
    Ok((r, recs))
}

fn sample_dir(out: &Path, i: usize) -> PathBuf {
    out.join(format!("sample_{i:04}"))
}

pub fn reconstruct(
    cfg: &RunConfig,
    global: &GlobalArgs,
    checkpoint: &Path,
    dataset: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let ds = load_dataset(dataset)?;
    let (r, recs) = reconstruct_all(cfg, global.jobs, checkpoint, &ds)?;
    for (i, (s, rec)) in ds.samples.iter().zip(&recs).enumerate() {
        let dir = sample_dir(out, i);
        fs::create_dir_all(&dir).map_err(|e| io_err(dir.display(), e))?;
        let (lo, hi) = (s.ground_truth.min(), s.ground_truth.max());
        let write = |name: &str, img: &Image| -> Result<(), CliError> {
            let p = dir.join(format!("{name}.pgm"));
            images::write_pgm16(&p, img, lo, hi).map_err(|e| io_err(p.display(), e))?;
            let p = dir.join(format!("{name}.f64"));
            images::write_raw(&p, img).map_err(|e| io_err(p.display(), e))?;
            if cfg.metrics.write_png {
                let p = dir.join(format!("{name}.png"));
                images::write_png8(&p, img, lo, hi).map_err(|e| io_err(p.display(), e))?;
            }
            Ok(())
        };
        write("gt", &s.ground_truth)?;
        write("fbp", &rec.initial)?;
        write("glr", &rec.image)?;
        let p = dir.join("trace.csv");
        let f = fs::File::create(&p).map_err(|e| io_err(p.display(), e))?;
        rec.trace
            .write_csv(BufWriter::new(f))
            .map_err(|e| io_err(p.display(), e))?;
        info!(
            "sample {i}: FBP {:.2} dB, model {:.2} dB",
            metrics::psnr(&rec.initial, &s.ground_truth).unwrap_or(f64::NAN),
            metrics::psnr(&rec.image, &s.ground_truth).unwrap_or(f64::NAN)
        );
    }
    write_json(
        &out.join("manifest.json"),
        &json!({
            "config_hash": cfg.hash(),
            "checkpoint": checkpoint.display().to_string(),
            "dataset": dataset.display().to_string(),
            "sample_count": ds.len(),
            "iterations": cfg.pfbs.iterations(),
            "operator_scale": r.operator_scale(),
        }),
    )?;
    println!("wrote {} reconstructions to {}", ds.len(), out.display());
    Ok(())
}

fn sample_dirs_in(dir: &Path) -> Result<Vec<usize>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| io_err(dir.display(), e))?;
    let mut ids = Vec::new();
    for e in entries {
        let e = e.map_err(|e| io_err(dir.display(), e))?;
        if let Some(id) = e
            .file_name()
            .to_str()
            .and_then(|n| n.strip_prefix("sample_"))
            .and_then(|n| n.parse::<usize>().ok())
        {
            ids.push(id);
        }
    }
    ids.sort_unstable();
    Ok(ids)
}

pub fn evaluate(
    cfg: &RunConfig,
    global: &GlobalArgs,
    dataset: &Path,
    recon_dir: Option<&Path>,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let ds = load_dataset(dataset)?;
    let pairs: Vec<(Image, Image)> = match (recon_dir, checkpoint) {
        (Some(dir), _) => {
            let ids = sample_dirs_in(dir)?;
            if let Some(&orphan) = ids.iter().find(|&&i| i >= ds.len()) {
                return Err(CliError::Validation(format!(
                    "no ground truth for sample_{orphan:04}: {} holds {} samples",
                    dataset.display(),
                    ds.len()
                )));
            }
            let n = ds.geometry.image_size;
            (0..ds.len())
                .map(|i| {
                    let d = sample_dir(dir, i);
                    let read = |name: &str| {
                        let p = d.join(format!("{name}.f64"));
                        images::read_raw(&p, n).map_err(|e| io_err(p.display(), e))
                    };
                    Ok((read("fbp")?, read("glr")?))
                })
                .collect::<Result<_, CliError>>()?
        }
        (None, Some(ckpt)) => {
            let (_, recs) = reconstruct_all(cfg, global.jobs, ckpt, &ds)?;
            recs.into_iter().map(|r| (r.initial, r.image)).collect()
        }
        (None, None) => {
            return Err(CliError::Validation(
                "either --recon-dir or --checkpoint is required".into(),
            ))
        }
    };
    let mut fbp = Vec::new();
    let mut glr = Vec::new();
    for (i, (s, (xf, xg))) in ds.samples.iter().zip(&pairs).enumerate() {
        let m = |x: &Image| {
            SampleMetrics::compute(i, x, &s.ground_truth)
                .map_err(|e| CliError::Validation(format!("ground truth of sample {i}: {e}")))
        };
        fbp.push(m(xf)?);
        glr.push(m(xg)?);
    }
    let fbp = MetricReport::new("FBP", fbp);
    let glr = MetricReport::new("Deep GLR", glr);
    fs::create_dir_all(out).map_err(|e| io_err(out.display(), e))?;
    for (name, rep) in [("metrics_fbp.csv", &fbp), ("metrics_deep_glr.csv", &glr)] {
        let p = out.join(name);
        let mut w = BufWriter::new(fs::File::create(&p).map_err(|e| io_err(p.display(), e))?);
        rep.write_csv(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| io_err(p.display(), e))?;
    }
    let agg = |r: &MetricReport| json!({"psnr_db": r.psnr_db, "ssim": r.ssim, "mse": r.mse});
    write_json(
        &out.join("aggregate.json"),
        &json!({
            "config_hash": cfg.hash(),
            "sample_count": ds.len(),
            "fbp": agg(&fbp),
            "deep_glr": agg(&glr),
            "reference_psnr_db": {
                "fbp": metrics::REFERENCE_FBP_PSNR_DB,
                "deep_glr": metrics::REFERENCE_DEEP_GLR_PSNR_DB,
            },
        }),
    )?;
    println!("{}", fbp.table_row());
    println!("{}", glr.table_row());
    Ok(())
}

pub fn info(cfg: &RunConfig, dataset: Option<&Path>, checkpoint: Option<&Path>) -> Result<(), CliError> {
    println!("config hash {}", cfg.hash());
    println!(
        "{}",
        serde_json::to_string_pretty(cfg).expect("config serializes")
    );
    let params = ModelParams::init(cfg.network.clone(), cfg.train.seed)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    println!("learnable parameters:\n{}", params.breakdown());
    if let Some(p) = dataset {
        let ds = load_dataset(p)?;
        let g = &ds.geometry;
        println!(
            "dataset {}: {} samples, {}x{} px, {} angles, {} bins, n0 {}, provenance {}",
            p.display(),
            ds.len(),
            g.image_size,
            g.image_size,
            g.num_angles,
            g.num_bins,
            ds.noise.n0,
            ds.provenance.as_deref().unwrap_or("-")
        );
    }
    if let Some(p) = checkpoint {
        let (params, info) = ModelParams::load(p).map_err(|e| checkpoint_err(p, e))?;
        println!(
            "checkpoint {}: {} parameters, {} epochs, best validation PSNR {}, alpha {:.4}, epsilon {:.4}",
            p.display(),
            params.parameter_count(),
            info.epochs_completed,
            info.best_val_psnr
                .map_or("-".to_string(), |v| format!("{v:.2} dB")),
            params.alpha(),
            params.epsilon()
        );
    }
    Ok(())
}
