use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use warpmix::basis::linspace;
use warpmix::io::{self, ChainManifest, Provenance};
use warpmix::posterior::{self, Feature};
use warpmix::simgen::{self, mode_filter, ReplicateScore};
use warpmix::{ChainOutput, Dataset};

use crate::fit::{replicate_dirs, FIT_DATA, FIT_LABELS};
use crate::{CliError, Common};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum What {
    Fits,
    Shapes,
    Warps,
    Register,
    Paf,
    Metrics,
}

#[derive(Args, Debug)]
pub struct SummarizeArgs {
    /// Fit output directory, or a directory of `rep_XXX` fits.
    #[arg(long)]
    pub draws: PathBuf,
    /// Summaries to emit.
    #[arg(long, value_enum, value_delimiter = ',', required = true)]
    pub what: Vec<What>,
    /// Ground truth (`truth.toml`, or the simulation directory) for metrics.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Credible level of the pointwise bands.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Number of grid points for shapes, warps and PAF.
    #[arg(long, default_value_t = 1001)]
    pub grid: usize,
    #[command(flatten)]
    pub common: Common,
}

struct Fitted {
    name: Option<String>,
    dir: PathBuf,
    chain: ChainOutput,
    manifest: ChainManifest,
}

impl Fitted {
    fn prov(&self) -> Provenance {
        Provenance { config_hash: self.manifest.config_hash.clone(), seed: self.manifest.seed }
    }

    fn to_original(&self, t: f64) -> f64 {
        self.manifest.time_offset + self.manifest.time_scale * t
    }

    fn data(&self) -> Result<Dataset, CliError> {
        let mut data = io::read_dataset(&self.dir.join(FIT_DATA), &[])?;
        let labels = self.dir.join(FIT_LABELS);
        if labels.is_file() {
            io::apply_labels(&mut data, &io::read_labels(&labels)?)?;
        }
        // The domain is the basis domain, not the observed range.
        data.lo = self.manifest.lo;
        data.hi = self.manifest.hi;
        Ok(data)
    }

    fn grid(&self, n: usize) -> Vec<f64> {
        linspace(self.manifest.lo, self.manifest.hi, n)
    }
}

fn load(dir: &Path, name: Option<String>) -> Result<Fitted, CliError> {
    let (chain, manifest) = io::read_chain(dir)?;
    Ok(Fitted { name, dir: dir.to_path_buf(), chain, manifest })
}

fn columns(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn shapes(f: &Fitted, out: &Path, args: &SummarizeArgs) -> Result<(), CliError> {
    let grid = f.grid(args.grid);
    for (k, feature) in [(1, Feature::One), (2, Feature::Two)] {
        let s = posterior::shape_estimate(&f.chain, feature, &grid, args.level)?;
        let rows: Vec<Vec<f64>> = (0..grid.len())
            .map(|j| vec![f.to_original(grid[j]), s.estimate[j], s.band.median[j], s.band.lower[j], s.band.upper[j]])
            .collect();
        let cols = columns(&["t", "estimate", "median", "lower", "upper"]);
        io::write_table(&out.join(format!("shape_f{k}.csv")), &f.prov(), &cols, &rows)?;
    }
    Ok(())
}

fn fits(f: &Fitted, out: &Path, args: &SummarizeArgs) -> Result<(), CliError> {
    let data = f.data()?;
    let mut rows = vec![];
    for (i, s) in data.subjects.iter().enumerate() {
        let fit = posterior::fitted_curve(&f.chain, i, &s.times, args.level)?;
        for j in 0..s.times.len() {
            rows.push(vec![(i + 1) as f64, f.to_original(s.times[j]), s.values[j], fit.median[j], fit.lower[j], fit.upper[j]]);
        }
    }
    let cols = columns(&["subject", "t", "y", "median", "lower", "upper"]);
    io::write_table(&out.join("fits.csv"), &f.prov(), &cols, &rows)?;
    Ok(())
}

fn warps(f: &Fitted, out: &Path, args: &SummarizeArgs) -> Result<(), CliError> {
    let grid = f.grid(args.grid);
    let mut rows = vec![];
    for i in 0..f.chain.draws[0].n_subjects() {
        let w = posterior::warp_summary(&f.chain, i, &grid, args.level)?;
        for j in 0..grid.len() {
            rows.push(vec![
                (i + 1) as f64,
                f.to_original(grid[j]),
                f.to_original(w.median[j]),
                f.to_original(w.lower[j]),
                f.to_original(w.upper[j]),
            ]);
        }
    }
    let cols = columns(&["subject", "t", "median", "lower", "upper"]);
    io::write_table(&out.join("warps.csv"), &f.prov(), &cols, &rows)?;
    Ok(())
}

fn register(f: &Fitted, out: &Path) -> Result<(), CliError> {
    let data = f.data()?;
    let mut rows = vec![];
    for (i, s) in data.subjects.iter().enumerate() {
        let (times, values) = posterior::register_curve(&f.chain, i, &s.times, &s.values, Feature::One)?;
        for j in 0..times.len() {
            rows.push(vec![(i + 1) as f64, f.to_original(s.times[j]), f.to_original(times[j]), values[j]]);
        }
    }
    let cols = columns(&["subject", "t", "t_registered", "y"]);
    io::write_table(&out.join("register.csv"), &f.prov(), &cols, &rows)?;
    Ok(())
}

fn paf(f: &Fitted, out: &Path, args: &SummarizeArgs) -> Result<(), CliError> {
    let p = posterior::paf_distribution(&f.chain, &f.grid(args.grid))?;
    if p.flat_draws > 0 {
        log::warn!("{} draws have a flat maximum; the first maximizer was used", p.flat_draws);
    }
    let rows: Vec<Vec<f64>> = p.values.iter().map(|&v| vec![f.to_original(v)]).collect();
    io::write_table(&out.join("paf.csv"), &f.prov(), &columns(&["paf"]), &rows)?;
    Ok(())
}

fn truth_path(root: &Path, name: Option<&str>) -> PathBuf {
    let base = match name {
        Some(n) if root.is_dir() => root.join(n),
        _ => root.to_path_buf(),
    };
    if base.is_dir() {
        base.join("truth.toml")
    } else {
        base
    }
}

fn metrics(fitted: &[Fitted], out: &Path, truth: &Path) -> Result<(), CliError> {
    let scores = fitted
        .iter()
        .map(|f| {
            let t = io::read_truth(&truth_path(truth, f.name.as_deref()))?;
            Ok(simgen::score_replicate(&f.chain, &t, &f.data()?)?)
        })
        .collect::<Result<Vec<ReplicateScore>, CliError>>()?;
    let kept = mode_filter(&scores.iter().map(|s| s.median_loglik).collect::<Vec<_>>());
    let rows: Vec<Vec<f64>> = scores
        .iter()
        .enumerate()
        .map(|(k, s)| {
            vec![
                (k + 1) as f64,
                s.rmise_f1,
                s.rmise_f2,
                s.rmise_f1_raw,
                s.rmise_f2_raw,
                s.rho_median,
                s.rho_mse,
                s.median_loglik,
                s.spread_raw.unwrap_or(f64::NAN),
                s.spread_registered.unwrap_or(f64::NAN),
                if kept.contains(&k) { 1.0 } else { 0.0 },
            ]
        })
        .collect();
    let cols = columns(&[
        "dataset",
        "rmise_f1",
        "rmise_f2",
        "rmise_f1_raw",
        "rmise_f2_raw",
        "rho_median",
        "rho_mse",
        "median_loglik",
        "spread_raw",
        "spread_registered",
        "retained",
    ]);
    io::write_table(&out.join("metrics.csv"), &fitted[0].prov(), &cols, &rows)?;
    log::info!("metrics: {} of {} datasets retained by mode filtering", kept.len(), scores.len());
    Ok(())
}

pub fn run(args: &SummarizeArgs) -> Result<(), CliError> {
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(CliError::Usage("--level must lie in (0, 1)".into()));
    }
    if args.grid < 2 {
        return Err(CliError::Usage("--grid needs at least two points".into()));
    }
    let truth = match (args.what.contains(&What::Metrics), &args.truth) {
        (true, None) => return Err(CliError::Usage("metrics need --truth".into())),
        (_, t) => t.clone(),
    };
    let out_root = args.common.out.clone().unwrap_or_else(|| args.draws.join("summary"));
    let fitted: Vec<Fitted> = if args.draws.join(io::MANIFEST_FILE).is_file() {
        vec![load(&args.draws, None)?]
    } else {
        let reps = replicate_dirs(&args.draws, io::MANIFEST_FILE)?;
        if reps.is_empty() {
            return Err(CliError::Data(format!("{} holds no chain", args.draws.display())));
        }
        let reps = match args.common.replicates {
            Some(n) => reps.into_iter().take(n).collect(),
            None => reps,
        };
        reps.into_iter().map(|(name, dir)| load(&dir, Some(name))).collect::<Result<_, _>>()?
    };
    for f in &fitted {
        let out = match &f.name {
            Some(n) => out_root.join(n),
            None => out_root.clone(),
        };
        for w in &args.what {
            match w {
                What::Shapes => shapes(f, &out, args)?,
                What::Fits => fits(f, &out, args)?,
                What::Warps => warps(f, &out, args)?,
                What::Register => register(f, &out)?,
                What::Paf => paf(f, &out, args)?,
                What::Metrics => {}
            }
        }
    }
    if let Some(t) = truth.filter(|_| args.what.contains(&What::Metrics)) {
        metrics(&fitted, &out_root, &t)?;
    }
    Ok(())
}
