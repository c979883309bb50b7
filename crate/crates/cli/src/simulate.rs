use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use warpmix::io::{self, Provenance};
use warpmix::simgen::simulate_replicate;
use warpmix::SimConfig;

use crate::config::{config_hash, load};
use crate::{CliError, Common};

#[derive(Serialize)]
struct SimManifest<'a> {
    config_hash: &'a str,
    seed: u64,
    replicates: usize,
    /// Replicate `k` (1-based) uses RNG stream `k − 1` of `seed`.
    simulation: &'a SimConfig,
}

pub fn replicate_dir(out: &Path, k: usize) -> std::path::PathBuf {
    out.join(format!("rep_{k:03}"))
}

pub fn write_manifest<T: Serialize>(path: &Path, prov: &Provenance, value: &T) -> Result<(), CliError> {
    let body = toml::to_string(value).map_err(|e| CliError::Data(format!("cannot serialize manifest: {e}")))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, prov.header() + &body)?;
    Ok(())
}

pub fn run(args: &Common) -> Result<(), CliError> {
    let mut cfg: SimConfig = match &args.config {
        Some(p) => load(p)?,
        None => SimConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let out = args.out.as_ref().ok_or_else(|| CliError::Usage("simulate needs --out".into()))?;
    let reps = args.replicates.unwrap_or(1);
    if reps == 0 {
        return Err(CliError::Usage("--replicates must be positive".into()));
    }
    let hash = config_hash(&cfg)?;
    let prov = Provenance { config_hash: hash.clone(), seed: cfg.seed };

    (0..reps).into_par_iter().try_for_each(|r| -> Result<(), CliError> {
        let dir = if reps == 1 { out.clone() } else { replicate_dir(out, r + 1) };
        let (data, truth) = simulate_replicate(&cfg, r as u64)?;
        io::write_dataset(&dir.join("data.csv"), &data, &[], &prov)?;
        io::write_labels(&dir.join("labels.csv"), &data, &prov)?;
        io::write_truth(&dir.join("truth.toml"), &truth, &prov)?;
        Ok(())
    })?;
    write_manifest(
        &out.join("manifest.toml"),
        &prov,
        &SimManifest { config_hash: &hash, seed: cfg.seed, replicates: reps, simulation: &cfg },
    )?;
    log::info!("wrote {reps} dataset(s) of {} subjects to {}", cfg.n_subjects, out.display());
    Ok(())
}
