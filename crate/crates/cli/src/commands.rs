//! Command implementations on a fully resolved configuration.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;

use s2rm::evalsuite::{
    enclave_map, metrics_csv, one_step_eval, robustness_sweep, rollout as run_rollout, write_pgm, Constant,
    CopyPrevious, MetricsRow, ModelPredictor, Oracle, Predictor, PROMPT_STEPS,
};
use s2rm::gradsuite;
use s2rm::recurrent::Model;
use s2rm::trainer::{epochs_csv, train as run_training, Checkpoint, EpochLog};
use s2rm::worldsim::{generate_dataset, Dataset, DatasetHeader, Episode, WorldConfig, FRAME};

use crate::config::RunConfig;
use crate::Failure;

fn config_err(msg: impl Into<String>) -> Failure {
    Failure::Config(msg.into())
}

/// Creates the output directory and echoes the effective configuration into it.
fn prepare_out(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let out = cfg.out_dir();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml()).context("writing config.toml")?;
    Ok(out)
}

fn existing(path: PathBuf) -> Result<PathBuf, Failure> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(config_err(format!("file not found: {}", path.display())))
    }
}

fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.data.dir.clone().unwrap_or_else(|| PathBuf::from("data"))
}

fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    Ok(Dataset::load(path).with_context(|| format!("loading {}", path.display()))?)
}

const MAX_SCANNED_BALLS: usize = 64;
const DEFAULT_TEST_BALLS: [usize; 6] = [1, 2, 3, 4, 5, 6];

/// Test datasets with their ids; the chosen files are recorded in `cfg`.
fn test_sets(cfg: &mut RunConfig) -> Result<Vec<(String, Dataset)>, Failure> {
    let paths: Vec<PathBuf> = match &cfg.data.tests {
        Some(p) => p.clone(),
        None => {
            let dir = data_dir(cfg);
            match &cfg.data.test_balls {
                Some(balls) => balls.iter().map(|k| dir.join(format!("test_b{k}.bin"))).collect(),
                // every test set present in the data directory, by ball count
                None => (0..=MAX_SCANNED_BALLS)
                    .map(|k| dir.join(format!("test_b{k}.bin")))
                    .filter(|p| p.is_file())
                    .collect(),
            }
        }
    };
    if paths.is_empty() {
        return Err(config_err("no test datasets given or found"));
    }
    let paths = paths.into_iter().map(existing).collect::<Result<Vec<_>, _>>()?;
    cfg.data.tests = Some(paths.clone());
    paths
        .into_iter()
        .map(|p| {
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((id, load_dataset(&p)?))
        })
        .collect()
}

fn load_model(cfg: &RunConfig) -> Result<Model, Failure> {
    let path = cfg.eval.checkpoint.clone().ok_or_else(|| config_err("a checkpoint is required (--checkpoint)"))?;
    let path = existing(path)?;
    let ckpt = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ckpt.to_model()?)
}

/// Builds the configured predictor; `model` keeps a loaded model alive.
fn predictor<'m>(cfg: &RunConfig, model: &'m mut Option<Model>) -> Result<Box<dyn Predictor + 'm>, Failure> {
    let name = cfg.eval.predictor.as_deref().unwrap_or("model");
    Ok(match name {
        "model" => {
            *model = Some(load_model(cfg)?);
            Box::new(ModelPredictor(model.as_ref().expect("just loaded")))
        }
        "constant" => Box::new(Constant(0.0)),
        "copy-previous" => Box::new(CopyPrevious),
        "oracle" => Box::new(Oracle),
        other => return Err(config_err(format!("unknown predictor `{other}`"))),
    })
}

fn report(rows: &[MetricsRow]) {
    for r in rows {
        eprintln!(
            "{:>10} balls={} drop={:.2} balanced_accuracy={:.4} f1={:.4} mean_bce={:.4}{}",
            r.dataset,
            r.n_balls,
            r.drop_fraction,
            r.balanced_accuracy,
            r.f1,
            r.mean_bce,
            if r.flagged { " (one target class absent)" } else { "" }
        );
    }
}

pub fn gen_data(cfg: &RunConfig) -> Result<(), Failure> {
    let out = prepare_out(cfg)?;
    let d = &cfg.data;
    let (frames, views, seed) = (d.frames.unwrap_or(30), d.views.unwrap_or(10), d.seed.unwrap_or(7));
    let world = WorldConfig::default();
    let mut jobs = vec![
        ("train.bin".to_string(), d.seqs.unwrap_or(500), d.balls.unwrap_or(3), seed),
        ("val.bin".to_string(), d.val_seqs.unwrap_or(50), d.balls.unwrap_or(3), seed.wrapping_add(1)),
    ];
    for &k in d.test_balls.as_deref().unwrap_or(&DEFAULT_TEST_BALLS) {
        jobs.push((format!("test_b{k}.bin"), d.test_seqs.unwrap_or(50), k, seed.wrapping_add(100 + k as u64)));
    }
    for (name, n_seq, n_balls, seed) in jobs {
        let header = DatasetHeader { n_seq, frames, views, n_balls, seed };
        let path = out.join(&name);
        generate_dataset(&path, &header, &world).with_context(|| format!("writing {}", path.display()))?;
        eprintln!("wrote {} ({n_seq} sequences, {frames} frames, {n_balls} balls)", path.display());
    }
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<(), Failure> {
    let model_cfg = cfg.model_config()?;
    let train_cfg = cfg.train_config()?;
    let dir = data_dir(cfg);
    let train_path = existing(cfg.data.train.clone().unwrap_or_else(|| dir.join("train.bin")))?;
    let val_path = existing(cfg.data.val.clone().unwrap_or_else(|| dir.join("val.bin")))?;
    let (train_set, val_set) = (load_dataset(&train_path)?, load_dataset(&val_path)?);
    let out = prepare_out(cfg)?;
    let mut model = Model::new(model_cfg)?;
    eprintln!(
        "training {} ({} parameters) on {} sequences",
        model.kind().name(),
        model.params().numel(),
        train_set.len()
    );
    let csv_path = out.join("epochs.csv");
    let mut logs: Vec<EpochLog> = Vec::new();
    let mut write_err = None;
    let report = run_training(&mut model, &train_set, &val_set, &train_cfg, |log| {
        eprintln!(
            "epoch {:>3} lr={:.2e} train_loss={:.6} val_loss={:.6}",
            log.epoch, log.lr, log.train_loss, log.val_loss
        );
        logs.push(log.clone());
        if let Err(e) = fs::write(&csv_path, epochs_csv(&logs)) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(anyhow::Error::from(e).context("writing epochs.csv").into());
    }
    fs::write(&csv_path, epochs_csv(&report.epochs)).context("writing epochs.csv")?;
    report.best.save(&out.join("ckpt.bin")).context("writing ckpt.bin")?;
    eprintln!("best epoch {} with val_loss {:.6}", report.best.epoch, report.best.val_loss);
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<(), Failure> {
    let mut cfg = cfg.clone();
    let sets = test_sets(&mut cfg)?;
    let cfg = &cfg;
    let mut holder = None;
    let p = predictor(cfg, &mut holder)?;
    let out = prepare_out(cfg)?;
    let drop = cfg.eval.drop.unwrap_or(0.0);
    let seed = cfg.eval.seed.unwrap_or(0);
    let rows = sets
        .iter()
        .map(|(id, d)| one_step_eval(p.as_ref(), d, id, drop, seed))
        .collect::<s2rm::Result<Vec<_>>>()?;
    report(&rows);
    fs::write(out.join("metrics.csv"), metrics_csv(&rows)).context("writing metrics.csv")?;
    Ok(())
}

pub fn robustness(cfg: &RunConfig) -> Result<(), Failure> {
    let mut cfg = cfg.clone();
    let sets = test_sets(&mut cfg)?;
    let cfg = &cfg;
    let mut holder = None;
    let p = predictor(cfg, &mut holder)?;
    let out = prepare_out(cfg)?;
    let fractions = cfg.eval.fractions.clone().unwrap_or_else(s2rm::evalsuite::default_fractions);
    let refs: Vec<(String, &Dataset)> = sets.iter().map(|(id, d)| (id.clone(), d)).collect();
    let rows = robustness_sweep(p.as_ref(), &refs, &fractions, cfg.eval.seed.unwrap_or(0))?;
    report(&rows);
    fs::write(out.join("metrics.csv"), metrics_csv(&rows)).context("writing metrics.csv")?;
    Ok(())
}

pub fn rollout(cfg: &RunConfig) -> Result<(), Failure> {
    let mut holder = None;
    let p = predictor(cfg, &mut holder)?;
    let out = prepare_out(cfg)?;
    let balls = cfg.eval.rollout_balls.unwrap_or(3);
    let seed = cfg.eval.seed.unwrap_or(0);
    let episode = Episode::generate(balls, 45, 0, seed, &WorldConfig::default())?;
    let result = run_rollout(p.as_ref(), &episode, seed)?;
    for rec in result.rollout() {
        write_pgm(&out.join(format!("rollout_t{:03}.pgm", rec.step)), FRAME, FRAME, &rec.stitched)?;
        let truth: Vec<f64> = episode.frames[rec.step - 1].pixels().iter().map(|&v| v as f64).collect();
        write_pgm(&out.join(format!("truth_t{:03}.pgm", rec.step)), FRAME, FRAME, &truth)?;
    }
    eprintln!(
        "wrote {} rollout frames after {PROMPT_STEPS} prompt steps to {}",
        result.rollout().len(),
        out.display()
    );
    Ok(())
}

pub fn enclaves(cfg: &RunConfig) -> Result<(), Failure> {
    let model = load_model(cfg)?;
    let out = prepare_out(cfg)?;
    let maps = enclave_map(&model)?;
    for (m, map) in maps.iter().enumerate() {
        write_pgm(&out.join(format!("enclave_m{m}.pgm")), FRAME, FRAME, map)?;
    }
    eprintln!("wrote {} enclave maps to {}", maps.len(), out.display());
    Ok(())
}

pub fn gradcheck(_cfg: &RunConfig) -> Result<(), Failure> {
    let cases = gradsuite::run()?;
    let mut failed = Vec::new();
    for c in &cases {
        let status = if c.passed() { "pass" } else { "FAIL" };
        println!("{status} {:<24} relative error {:.3e}", c.name, c.relative_error);
        if !c.passed() {
            failed.push(c.name);
        }
    }
    if failed.is_empty() {
        println!("all {} gradient checks below {:e}", cases.len(), gradsuite::TOLERANCE);
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient checks failed: {}", failed.join(", "))))
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

