use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use warpmix::io::{self, Provenance};
use warpmix::labeling::{self, LabelPlan};
use warpmix::sampler::run_chain;
use warpmix::{Dataset, ModelSpec};

use crate::config::{config_hash, load, FitConfig, LabelMode};
use crate::{CliError, Common};

/// Fit inputs stored beside the draws, in model units.
pub const FIT_DATA: &str = "fit_data.csv";
pub const FIT_LABELS: &str = "fit_labels.csv";

struct Job {
    data: PathBuf,
    out: PathBuf,
    stream: u64,
}

/// `rep_XXX` subdirectories holding a `data.csv`, in name order.
pub fn replicate_dirs(dir: &Path, file: &str) -> Result<Vec<(String, PathBuf)>, CliError> {
    let mut out = vec![];
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string();
        if name.starts_with("rep_") && path.join(file).is_file() {
            out.push((name, path));
        }
    }
    out.sort();
    Ok(out)
}

fn stream_of(name: &str) -> u64 {
    name.trim_start_matches("rep_").parse::<u64>().map_or(0, |k| k.saturating_sub(1))
}

fn jobs(cfg: &FitConfig, out: &Path, limit: Option<usize>) -> Result<Vec<Job>, CliError> {
    if !cfg.data.is_dir() {
        return Ok(vec![Job { data: cfg.data.clone(), out: out.to_path_buf(), stream: 0 }]);
    }
    let single = cfg.data.join("data.csv");
    if single.is_file() {
        return Ok(vec![Job { data: single, out: out.to_path_buf(), stream: 0 }]);
    }
    let mut reps = replicate_dirs(&cfg.data, "data.csv")?;
    if reps.is_empty() {
        return Err(CliError::Data(format!("{} holds no rep_XXX/data.csv batches", cfg.data.display())));
    }
    if let Some(n) = limit {
        reps.truncate(n);
    }
    Ok(reps
        .into_iter()
        .map(|(name, dir)| Job { data: dir.join("data.csv"), out: out.join(&name), stream: stream_of(&name) })
        .collect())
}

/// Rescale times onto [0, 1]; returns `(offset, scale)` with
/// `t_original = offset + scale · t`.
fn rescale(data: &mut Dataset) -> (f64, f64) {
    let (lo, hi) = (data.lo, data.hi);
    let scale = hi - lo;
    for s in &mut data.subjects {
        s.times.iter_mut().for_each(|t| *t = (*t - lo) / scale);
    }
    data.lo = 0.0;
    data.hi = 1.0;
    (lo, scale)
}

fn apply_labels(cfg: &FitConfig, data: &mut Dataset, data_path: &Path, map: (f64, f64)) -> Result<(), CliError> {
    let l = &cfg.labels;
    match l.mode {
        LabelMode::None => {}
        LabelMode::File => {
            let path = match &l.file {
                Some(f) if data_path.parent() == Some(cfg.data.as_path()) || !cfg.data.is_dir() => f.clone(),
                Some(f) => data_path.with_file_name(f.file_name().unwrap_or(f.as_os_str())),
                None => data_path.with_file_name("labels.csv"),
            };
            io::apply_labels(data, &io::read_labels(&path)?)?;
        }
        LabelMode::Explicit => LabelPlan::explicit(data, l.feature1.clone(), l.feature2.clone())?.apply(data),
        LabelMode::Heuristic => {
            let band = l.band.map_or((data.lo, data.hi), |[a, b]| ((a - map.0) / map.1, (b - map.0) / map.1));
            let plan = LabelPlan::heuristic(data, l.peak_count, l.noise_count, band)?;
            log::info!(
                "heuristic labels: feature 1 {:?}, feature 2 {:?} ({:.1}% labelled)",
                plan.feature1_ids,
                plan.feature2_ids,
                100.0 * plan.labeled_fraction
            );
            plan.apply(data);
        }
    }
    Ok(())
}

fn fit_one(cfg: &FitConfig, job: &Job, prov: &Provenance) -> Result<(), CliError> {
    let mut data = io::read_dataset(&job.data, &cfg.covariates)?;
    let map = if cfg.rescale_time { rescale(&mut data) } else { (0.0, 1.0) };
    if cfg.log_transform {
        for s in &mut data.subjects {
            s.values = labeling::log_transform(&s.values)?;
        }
    }
    apply_labels(cfg, &mut data, &job.data, map)?;
    let spec = ModelSpec::uniform(data.lo, data.hi, cfg.knots.shape, cfg.knots.warp)?;
    let chain_cfg = cfg.chain.to_config(job.stream);
    log::info!(
        "fitting {} ({} subjects, {} iterations, stream {})",
        job.data.display(),
        data.len(),
        chain_cfg.n_iter,
        job.stream
    );
    let chain = run_chain(&data, &spec, &cfg.hyperparameters, &chain_cfg)?;
    let ids: Vec<String> = data.subjects.iter().map(|s| s.id.clone()).collect();
    io::write_chain(&job.out, &chain, &ids, map, prov)?;
    io::write_dataset(&job.out.join(FIT_DATA), &data, &cfg.covariates, prov)?;
    io::write_labels(&job.out.join(FIT_LABELS), &data, prov)?;
    let rows: Vec<Vec<f64>> = (0..data.len())
        .map(|i| vec![(i + 1) as f64, chain.eta_accept[i], chain.pi_accept[i], chain.tau[i]])
        .collect();
    let cols = ["subject", "eta_accept", "pi_accept", "tau"].map(String::from);
    io::write_table(&job.out.join("diagnostics.csv"), prov, &cols, &rows)?;
    log::info!(
        "{}: median log-likelihood {:.2}, rho acceptance {:.3}, {} clamped evaluations",
        job.out.display(),
        warpmix::stats::median(&chain.loglik),
        chain.rho_accept,
        chain.clamp_events
    );
    Ok(())
}

pub fn run(args: &Common) -> Result<(), CliError> {
    let path = args.config.as_ref().ok_or_else(|| CliError::Usage("fit needs --config".into()))?;
    let mut cfg: FitConfig = load(path)?;
    cfg.resolve(path.parent().unwrap_or(Path::new(".")));
    if let Some(s) = args.seed {
        cfg.chain.seed = s;
    }
    cfg.validate()?;
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set `out`".into()))?;
    let prov = Provenance { config_hash: config_hash(&cfg)?, seed: cfg.chain.seed };
    let jobs = jobs(&cfg, &out, args.replicates)?;
    jobs.par_iter().try_for_each(|job| fit_one(&cfg, job, &prov))?;
    crate::simulate::write_manifest(&out.join("fit_config.toml"), &prov, &cfg)?;
    log::info!("{} fit(s) written under {}", jobs.len(), out.display());
    Ok(())
}
