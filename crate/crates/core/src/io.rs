//! Text persistence: long-format data, labels, simulation truth and chain
//! draws. Every file starts with `#` comment lines carrying provenance.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::KnotVector;
use crate::error::{Error, Result};
use crate::model::{Dataset, GroundTruth, Label, ModelSpec, ModelState, Subject};
use crate::sampler::ChainOutput;

/// Provenance written at the top of every output file.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn header(&self) -> String {
        format!("# config_hash: {}\n# seed: {}\n", self.config_hash, self.seed)
    }
}

/// Read the provenance comment lines back from a file.
pub fn read_provenance(path: &Path) -> Result<Provenance> {
    let text = fs::read_to_string(path)?;
    let mut out = Provenance::default();
    let mut found = false;
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        if let Some(h) = line.strip_prefix("# config_hash: ") {
            out.config_hash = h.trim().to_string();
            found = true;
        } else if let Some(s) = line.strip_prefix("# seed: ") {
            out.seed = s.trim().parse().map_err(|_| Error::data(format!("bad seed line in {}", path.display())))?;
        }
    }
    if !found {
        return Err(Error::data(format!("{} has no provenance header", path.display())));
    }
    Ok(out)
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(fs::File::create(path)?)
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_path(path)?)
}

/// Write a numeric table with a header row.
pub fn write_table(path: &Path, prov: &Provenance, columns: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut file = create(path)?;
    file.write_all(prov.header().as_bytes())?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(columns)?;
    for row in rows {
        if row.len() != columns.len() {
            return Err(Error::invalid("table row length differs from header"));
        }
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a numeric table written by [`write_table`].
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv_reader(path)?;
    let columns: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| Error::data(format!("{}: non-numeric field {f:?}", path.display()))))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != columns.len() {
            return Err(Error::data(format!("{}: ragged row", path.display())));
        }
        rows.push(row);
    }
    Ok((columns, rows))
}

/// Long format: `subject_id,t,y` followed by covariate columns, one row per
/// observation.
pub fn write_dataset(path: &Path, data: &Dataset, covariate_names: &[String], prov: &Provenance) -> Result<()> {
    if covariate_names.len() != data.n_covariates() {
        return Err(Error::invalid("covariate names do not match the data"));
    }
    let mut file = create(path)?;
    file.write_all(prov.header().as_bytes())?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["subject_id".to_string(), "t".into(), "y".into()];
    header.extend(covariate_names.iter().cloned());
    w.write_record(&header)?;
    for s in &data.subjects {
        for (t, y) in s.times.iter().zip(&s.values) {
            let mut rec = vec![s.id.clone(), t.to_string(), y.to_string()];
            rec.extend(s.covariates.iter().map(|c| c.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parse long-format data. Subjects keep their first-appearance order and
/// must have strictly increasing times; covariates must be constant within
/// a subject. The domain is the observed time range.
pub fn read_dataset(path: &Path, covariate_names: &[String]) -> Result<Dataset> {
    let mut r = csv_reader(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::data(format!("{}: missing column {name:?}", path.display())))
    };
    let (ci, ct, cy) = (col("subject_id")?, col("t")?, col("y")?);
    let cov_cols = covariate_names.iter().map(|n| col(n)).collect::<Result<Vec<_>>>()?;

    let mut index: HashMap<String, usize> = HashMap::new();
    let mut subjects: Vec<Subject> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |c: usize, what: &str| -> Result<f64> {
            let f = rec.get(c).unwrap_or("");
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::data(format!("{}: record {}: bad {what} value {f:?}", path.display(), line + 1)))
        };
        let id = rec.get(ci).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::data(format!("{}: record {}: empty subject_id", path.display(), line + 1)));
        }
        let (t, y) = (num(ct, "t")?, num(cy, "y")?);
        let covs = cov_cols.iter().zip(covariate_names).map(|(&c, n)| num(c, n)).collect::<Result<Vec<_>>>()?;
        let k = *index.entry(id.clone()).or_insert_with(|| {
            subjects.push(Subject { id: id.clone(), times: Vec::new(), values: Vec::new(), covariates: covs.clone(), label: Label::Free });
            subjects.len() - 1
        });
        let s = &mut subjects[k];
        if s.covariates != covs {
            return Err(Error::data(format!("subject {id}: covariates vary between rows")));
        }
        if s.times.last().is_some_and(|&last| t <= last) {
            return Err(Error::data(format!("subject {id}: times must be strictly increasing")));
        }
        s.times.push(t);
        s.values.push(y);
    }
    if subjects.is_empty() {
        return Err(Error::data(format!("{}: no observations", path.display())));
    }
    let lo = subjects.iter().map(|s| s.times[0]).fold(f64::INFINITY, f64::min);
    let hi = subjects.iter().map(|s| *s.times.last().unwrap()).fold(f64::NEG_INFINITY, f64::max);
    Ok(Dataset { lo, hi, subjects })
}

/// `subject_id,label` rows for every non-free subject.
pub fn write_labels(path: &Path, data: &Dataset, prov: &Provenance) -> Result<()> {
    let mut file = create(path)?;
    file.write_all(prov.header().as_bytes())?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["subject_id", "label"])?;
    for s in data.subjects.iter().filter(|s| s.label != Label::Free) {
        w.write_record([s.id.as_str(), s.label.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<(String, Label)>> {
    let mut r = csv_reader(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or("").to_string();
        let raw = rec.get(1).unwrap_or("");
        let label = Label::parse(raw).ok_or_else(|| Error::data(format!("subject {id}: unknown label {raw:?}")))?;
        out.push((id, label));
    }
    Ok(out)
}

/// Set labels on `data` from `(id, label)` pairs; unknown ids are errors.
pub fn apply_labels(data: &mut Dataset, labels: &[(String, Label)]) -> Result<()> {
    for (id, label) in labels {
        let s = data
            .subjects
            .iter_mut()
            .find(|s| &s.id == id)
            .ok_or_else(|| Error::data(format!("label for unknown subject {id}")))?;
        s.label = *label;
    }
    Ok(())
}

fn write_toml<T: Serialize>(path: &Path, value: &T, prov: &Provenance) -> Result<()> {
    let body = toml::to_string(value).map_err(|e| Error::invalid(format!("cannot serialize: {e}")))?;
    let mut file = create(path)?;
    file.write_all(prov.header().as_bytes())?;
    file.write_all(body.as_bytes())?;
    Ok(())
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn write_truth(path: &Path, truth: &GroundTruth, prov: &Provenance) -> Result<()> {
    write_toml(path, truth, prov)
}

pub fn read_truth(path: &Path) -> Result<GroundTruth> {
    read_toml(path)
}

/// Chain metadata stored next to the draw tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainManifest {
    pub seed: u64,
    pub stream: u64,
    pub config_hash: String,
    pub n_draws: usize,
    pub subject_ids: Vec<String>,
    pub n_covariates: usize,
    pub lo: f64,
    pub hi: f64,
    pub shape_interior: Vec<f64>,
    pub warp_interior: Vec<f64>,
    pub rho_accept: f64,
    pub clamp_events: u64,
    pub eta_accept: Vec<f64>,
    pub pi_accept: Vec<f64>,
    pub tau: Vec<f64>,
    /// Affine map back to the original time units: `t_orig = offset + scale·t`.
    pub time_offset: f64,
    pub time_scale: f64,
}

pub const MANIFEST_FILE: &str = "manifest.toml";
const SCALARS: [&str; 8] = ["loglik", "rho", "sigma2_eps", "sigma2_c", "sigma2_eta", "lambda1", "lambda2", "draw"];

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|j| format!("{prefix}_{j}")).collect()
}

/// Write one table per parameter block plus [`MANIFEST_FILE`] into `dir`.
pub fn write_chain(dir: &Path, chain: &ChainOutput, subject_ids: &[String], time_map: (f64, f64), prov: &Provenance) -> Result<()> {
    fs::create_dir_all(dir)?;
    let first = chain.draws.first().ok_or_else(|| Error::invalid("chain has no draws"))?;
    let (n, q, k, l) = (first.n_subjects(), first.eta.ncols(), first.gamma1.len(), first.regression.nrows());
    if subject_ids.len() != n {
        return Err(Error::invalid("subject id count differs from the chain"));
    }
    let d = &chain.draws;
    let scalars: Vec<Vec<f64>> = d
        .iter()
        .zip(&chain.loglik)
        .enumerate()
        .map(|(j, (s, ll))| vec![*ll, s.rho, s.sigma2_eps, s.sigma2_c, s.sigma2_eta, s.lambda1, s.lambda2, j as f64])
        .collect();
    let scalar_names: Vec<String> = SCALARS.iter().map(|s| s.to_string()).collect();
    write_table(&dir.join("scalars.csv"), prov, &scalar_names, &scalars)?;
    write_table(&dir.join("intercepts.csv"), prov, &names("c", n), &d.iter().map(|s| s.intercepts.clone()).collect::<Vec<_>>())?;
    write_table(&dir.join("memberships.csv"), prov, &names("pi", n), &d.iter().map(|s| s.memberships.clone()).collect::<Vec<_>>())?;
    let eta_names: Vec<String> = (0..n).flat_map(|i| (0..q).map(move |j| format!("eta_{i}_{j}"))).collect();
    let eta_rows: Vec<Vec<f64>> =
        d.iter().map(|s| (0..n).flat_map(|i| (0..q).map(move |j| s.eta[(i, j)])).collect()).collect();
    write_table(&dir.join("eta.csv"), prov, &eta_names, &eta_rows)?;
    write_table(&dir.join("gamma1.csv"), prov, &names("gamma1", k), &d.iter().map(|s| s.gamma1.as_slice().to_vec()).collect::<Vec<_>>())?;
    write_table(&dir.join("gamma2.csv"), prov, &names("gamma2", k), &d.iter().map(|s| s.gamma2.as_slice().to_vec()).collect::<Vec<_>>())?;
    if l > 0 {
        let b_names: Vec<String> = (0..l).flat_map(|r| (0..q).map(move |j| format!("b_{r}_{j}"))).collect();
        let b_rows: Vec<Vec<f64>> =
            d.iter().map(|s| (0..l).flat_map(|r| (0..q).map(move |j| s.regression[(r, j)])).collect()).collect();
        write_table(&dir.join("regression.csv"), prov, &b_names, &b_rows)?;
    }
    let manifest = ChainManifest {
        seed: chain.seed,
        stream: chain.stream,
        config_hash: prov.config_hash.clone(),
        n_draws: d.len(),
        subject_ids: subject_ids.to_vec(),
        n_covariates: l,
        lo: chain.spec.lo(),
        hi: chain.spec.hi(),
        shape_interior: chain.spec.shape.interior().to_vec(),
        warp_interior: chain.spec.warp.interior().to_vec(),
        rho_accept: chain.rho_accept,
        clamp_events: chain.clamp_events,
        eta_accept: chain.eta_accept.clone(),
        pi_accept: chain.pi_accept.clone(),
        tau: chain.tau.clone(),
        time_offset: time_map.0,
        time_scale: time_map.1,
    };
    write_toml(&dir.join(MANIFEST_FILE), &manifest, prov)
}

fn expect_shape(name: &str, rows: &[Vec<f64>], n_draws: usize, width: usize) -> Result<()> {
    if rows.len() != n_draws || rows.iter().any(|r| r.len() != width) {
        return Err(Error::data(format!("{name}: expected {n_draws} rows of {width} values")));
    }
    Ok(())
}

/// Load a chain written by [`write_chain`].
pub fn read_chain(dir: &Path) -> Result<(ChainOutput, ChainManifest)> {
    let m: ChainManifest = read_toml(&dir.join(MANIFEST_FILE))?;
    let spec = ModelSpec {
        shape: KnotVector::with_interior(m.lo, m.hi, m.shape_interior.clone())?,
        warp: KnotVector::with_interior(m.lo, m.hi, m.warp_interior.clone())?,
    };
    let (n, q, k, l, nd) = (m.subject_ids.len(), spec.q_star(), spec.k(), m.n_covariates, m.n_draws);
    let load = |file: &str, width: usize| -> Result<Vec<Vec<f64>>> {
        let (_, rows) = read_table(&dir.join(file))?;
        expect_shape(file, &rows, nd, width)?;
        Ok(rows)
    };
    let scalars = load("scalars.csv", SCALARS.len())?;
    let c = load("intercepts.csv", n)?;
    let pi = load("memberships.csv", n)?;
    let eta = load("eta.csv", n * q)?;
    let g1 = load("gamma1.csv", k)?;
    let g2 = load("gamma2.csv", k)?;
    let b = if l > 0 { load("regression.csv", l * q)? } else { vec![Vec::new(); nd] };
    let draws = (0..nd)
        .map(|j| {
            let s = &scalars[j];
            ModelState {
                intercepts: c[j].clone(),
                memberships: pi[j].clone(),
                eta: DMatrix::from_row_slice(n, q, &eta[j]),
                gamma1: DVector::from_vec(g1[j].clone()),
                gamma2: DVector::from_vec(g2[j].clone()),
                rho: s[1],
                regression: DMatrix::from_row_slice(l, q, &b[j]),
                sigma2_eps: s[2],
                sigma2_c: s[3],
                sigma2_eta: s[4],
                lambda1: s[5],
                lambda2: s[6],
            }
        })
        .collect();
    let chain = ChainOutput {
        spec,
        draws,
        loglik: scalars.iter().map(|s| s[0]).collect(),
        eta_accept: m.eta_accept.clone(),
        pi_accept: m.pi_accept.clone(),
        rho_accept: m.rho_accept,
        tau: m.tau.clone(),
        clamp_events: m.clamp_events,
        seed: m.seed,
        stream: m.stream,
    };
    Ok((chain, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_support;
    use crate::simgen::{simulate_dataset, SimConfig};

    fn prov() -> Provenance {
        Provenance { config_hash: "abc123".into(), seed: 7 }
    }

    #[test]
    fn dataset_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let mut data = test_support::dataset(4, 12);
        data.subjects[1].values[3] = 1.0 / 3.0;
        data.subjects[2].values[0] = -1e-300;
        write_dataset(&path, &data, &["age".to_string()], &prov()).unwrap();
        let back = read_dataset(&path, &["age".to_string()]).unwrap();
        assert_eq!(back, data);
        assert_eq!(read_provenance(&path).unwrap(), prov());
        assert!(read_dataset(&path, &["sex".to_string()]).is_err());
        let no_cov = read_dataset(&path, &[]).unwrap();
        assert_eq!(no_cov.n_covariates(), 0);
    }

    #[test]
    fn malformed_data() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "subject_id,t,y\na,0,1\na,0,2\n").unwrap();
        assert!(matches!(read_dataset(&path, &[]), Err(Error::Data(_))));
        fs::write(&path, "subject_id,t,y\na,0,x\n").unwrap();
        assert!(matches!(read_dataset(&path, &[]), Err(Error::Data(_))));
        fs::write(&path, "id,t,y\na,0,1\n").unwrap();
        assert!(matches!(read_dataset(&path, &[]), Err(Error::Data(_))));
    }

    #[test]
    fn labels_and_truth_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (mut data, truth) = simulate_dataset(&SimConfig { n_subjects: 20, ..Default::default() }).unwrap();
        write_labels(&dir.path().join("labels.csv"), &data, &prov()).unwrap();
        let labels = read_labels(&dir.path().join("labels.csv")).unwrap();
        assert_eq!(labels.len(), 1);
        let expected = data.labels();
        data.subjects.iter_mut().for_each(|s| s.label = Label::Free);
        apply_labels(&mut data, &labels).unwrap();
        assert_eq!(data.labels(), expected);
        write_truth(&dir.path().join("truth.toml"), &truth, &prov()).unwrap();
        assert_eq!(read_truth(&dir.path().join("truth.toml")).unwrap(), truth);
    }

    #[test]
    fn chain_roundtrip_is_exact() {
        let spec = test_support::spec();
        let draws: Vec<ModelState> = (0..3)
            .map(|k| {
                let mut s = test_support::state(4, &spec);
                s.rho = 0.1 + k as f64 / 7.0;
                s.eta[(2, 1)] += k as f64 * 0.123456789;
                s
            })
            .collect();
        let chain = ChainOutput {
            spec,
            draws,
            loglik: vec![-1.5, -2.25, f64::MIN_POSITIVE],
            eta_accept: vec![0.3; 4],
            pi_accept: vec![0.4; 4],
            rho_accept: 0.5,
            tau: vec![0.11, 0.12, 0.13, 0.14],
            clamp_events: 9,
            seed: 7,
            stream: 2,
        };
        let dir = tempfile::tempdir().unwrap();
        let ids: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
        write_chain(dir.path(), &chain, &ids, (6.0, 8.0), &prov()).unwrap();
        let (back, manifest) = read_chain(dir.path()).unwrap();
        assert_eq!(back, chain);
        assert_eq!(manifest.subject_ids, ids);
        assert_eq!((manifest.time_offset, manifest.time_scale), (6.0, 8.0));
        assert_eq!(read_provenance(&dir.path().join("eta.csv")).unwrap(), prov());
    }
}
