//! Multi-domain datasets: rotated synthetic generators, CSV ingestion and
//! stratified train/validation splits.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::{derive_seed, seeded_rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub name: String,
    /// n×d feature matrix.
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Domain {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Domain {
        let d = self.features.cols();
        let data = idx
            .iter()
            .flat_map(|&i| self.features.row(i).iter().copied())
            .collect();
        Domain {
            name: self.name.clone(),
            features: Tensor::matrix(idx.len(), d, data).expect("selected rows"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub domains: Vec<Domain>,
    pub class_count: usize,
    pub feature_dim: usize,
    /// Original label value of each dense class index.
    pub label_values: Vec<u64>,
}

impl DomainDataset {
    pub fn new(domains: Vec<Domain>, class_count: usize) -> Result<Self> {
        let first = domains
            .first()
            .ok_or_else(|| Error::invalid("dataset has no domains"))?;
        let feature_dim = first.features.cols();
        for dom in &domains {
            if dom.is_empty() {
                return Err(Error::invalid(format!("domain '{}' is empty", dom.name)));
            }
            if dom.features.rank() != 2
                || dom.features.cols() != feature_dim
                || dom.features.rows() != dom.len()
            {
                return Err(Error::invalid(format!(
                    "domain '{}' has inconsistent feature shape",
                    dom.name
                )));
            }
            if let Some(l) = dom.labels.iter().find(|l| **l >= class_count) {
                return Err(Error::invalid(format!(
                    "label {l} out of range in domain '{}'",
                    dom.name
                )));
            }
        }
        Ok(Self {
            domains,
            class_count,
            feature_dim,
            label_values: (0..class_count as u64).collect(),
        })
    }

    pub fn domain_names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.name.clone()).collect()
    }

    /// Splits into (seen, unseen) with domain `u` held out.
    pub fn hold_out(&self, u: usize) -> Result<(DomainDataset, Domain)> {
        if u >= self.domains.len() {
            return Err(Error::invalid(format!("domain index {u} out of range")));
        }
        let mut seen = self.clone();
        let unseen = seen.domains.remove(u);
        Ok((seen, unseen))
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.name == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Base {
    TwoMoons,
    GaussMixture,
}

impl FromStr for Base {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_moons" => Ok(Base::TwoMoons),
            "gauss_mixture" => Ok(Base::GaussMixture),
            other => Err(Error::invalid(format!(
                "unknown base '{other}', expected two_moons or gauss_mixture"
            ))),
        }
    }
}

/// Draws the base sample for one domain: balanced binary labels.
fn base_sample(base: Base, n: usize, noise_sd: f64, seed: u64) -> (Vec<[f64; 2]>, Vec<usize>) {
    let mut rng = seeded_rng(seed);
    let mut pts = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let e1: f64 = StandardNormal.sample(&mut rng);
        let e2: f64 = StandardNormal.sample(&mut rng);
        let p = match base {
            Base::GaussMixture => {
                let cx = if y == 0 { -1.5 } else { 1.5 };
                [cx + noise_sd * e1, noise_sd * e2]
            }
            Base::TwoMoons => {
                let t = rng.gen_range(0.0..std::f64::consts::PI);
                let (x, z) = if y == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                // centred on the origin so rotations keep the cloud in place
                [x - 0.5 + noise_sd * e1, z - 0.25 + noise_sd * e2]
            }
        };
        pts.push(p);
        labels.push(y);
    }
    (pts, labels)
}

/// One domain per angle, each a fresh base sample rotated about the origin.
/// Domain `i` draws from a seed derived from `(seed, i)`.
pub fn generate_rotated(
    base: Base,
    angles_deg: &[f64],
    n_per_domain: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<DomainDataset> {
    if angles_deg.is_empty() {
        return Err(Error::invalid("at least one rotation angle is required"));
    }
    if n_per_domain == 0 {
        return Err(Error::invalid("n_per_domain must be at least 1"));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::invalid("noise_sd must be non-negative"));
    }
    let domains = angles_deg
        .iter()
        .enumerate()
        .map(|(i, &deg)| {
            let (pts, labels) =
                base_sample(base, n_per_domain, noise_sd, derive_seed(seed, i as u64));
            let (s, c) = deg.to_radians().sin_cos();
            let data = pts
                .iter()
                .flat_map(|[x, y]| [c * x - s * y, s * x + c * y])
                .collect();
            Domain {
                name: format!("rot{deg}"),
                features: Tensor::matrix(n_per_domain, 2, data).expect("n×2"),
                labels,
            }
        })
        .collect();
    DomainDataset::new(domains, 2)
}

fn parse_err(line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        line: line as usize,
        msg: msg.into(),
    }
}

/// Reads a `domain,label,f1,...,fd` CSV. Domains keep first-appearance
/// order; labels are re-indexed densely in ascending order of their values.
pub fn read_csv<R: Read>(reader: R) -> Result<DomainDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| parse_err(1, e.to_string()))?,
        None => return Err(parse_err(1, "empty file")),
    };
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols.first() != Some(&"domain") {
        return Err(parse_err(1, "first header column must be 'domain'"));
    }
    if cols.get(1) != Some(&"label") {
        return Err(parse_err(1, "second header column must be 'label'"));
    }
    let d = cols.len() - 2;
    if d == 0 {
        return Err(parse_err(1, "no feature columns"));
    }
    for (k, c) in cols[2..].iter().enumerate() {
        if *c != format!("f{}", k + 1) {
            return Err(parse_err(
                1,
                format!("unexpected header column '{c}', expected f{}", k + 1),
            ));
        }
    }

    let mut order: Vec<String> = vec![];
    let mut rows: BTreeMap<String, (Vec<f64>, Vec<u64>)> = BTreeMap::new();
    for rec in records {
        let rec =
            rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != d + 2 {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", d + 2, rec.len()),
            ));
        }
        let name = rec[0].trim().to_string();
        let label: u64 = rec[1].trim().parse().map_err(|_| {
            parse_err(
                line,
                format!("label '{}' is not a non-negative integer", &rec[1]),
            )
        })?;
        let entry = rows.entry(name.clone()).or_insert_with(|| {
            order.push(name.clone());
            (vec![], vec![])
        });
        for k in 0..d {
            let v: f64 = rec[k + 2].trim().parse().map_err(|_| {
                parse_err(
                    line,
                    format!("feature f{} value '{}' is not numeric", k + 1, &rec[k + 2]),
                )
            })?;
            entry.0.push(v);
        }
        entry.1.push(label);
    }
    if order.is_empty() {
        return Err(parse_err(2, "no data rows"));
    }
    let mut values: Vec<u64> = rows.values().flat_map(|(_, l)| l.iter().copied()).collect();
    values.sort_unstable();
    values.dedup();
    let dense: BTreeMap<u64, usize> = values.iter().enumerate().map(|(i, v)| (*v, i)).collect();
    let domains = order
        .into_iter()
        .map(|name| {
            let (feats, labels) = rows.remove(&name).expect("recorded domain");
            let n = labels.len();
            Domain {
                name,
                features: Tensor::matrix(n, d, feats).expect("n×d"),
                labels: labels.iter().map(|l| dense[l]).collect(),
            }
        })
        .collect();
    let mut ds = DomainDataset::new(domains, values.len())?;
    ds.label_values = values;
    Ok(ds)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<DomainDataset> {
    read_csv(File::open(path)?)
}

/// Writes the dataset with original label values. Floats use the shortest
/// round-trip representation.
pub fn write_csv<W: Write>(ds: &DomainDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["domain".to_string(), "label".to_string()];
    header.extend((1..=ds.feature_dim).map(|k| format!("f{k}")));
    w.write_record(&header).map_err(csv_io)?;
    for dom in &ds.domains {
        for (i, l) in dom.labels.iter().enumerate() {
            let mut rec = vec![dom.name.clone(), ds.label_values[*l].to_string()];
            rec.extend(dom.features.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(ds: &DomainDataset, path: impl AsRef<Path>) -> Result<()> {
    write_csv(ds, File::create(path)?)
}

pub(crate) fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Per-domain stratified split indices `(train, val)`, each sorted ascending.
pub fn split_indices(
    ds: &DomainDataset,
    fraction: f64,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    ds.domains
        .iter()
        .enumerate()
        .map(|(di, dom)| {
            let mut rng = seeded_rng(derive_seed(seed, di as u64));
            let (mut train, mut val) = (vec![], vec![]);
            for c in 0..ds.class_count {
                let mut idx: Vec<usize> = (0..dom.len()).filter(|&i| dom.labels[i] == c).collect();
                if idx.is_empty() {
                    continue;
                }
                if idx.len() < 2 {
                    return Err(Error::invalid(format!(
                        "class {} has fewer than 2 samples in domain '{}'; cannot stratify",
                        ds.label_values[c], dom.name
                    )));
                }
                idx.shuffle(&mut rng);
                let k = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
                train.extend_from_slice(&idx[..k]);
                val.extend_from_slice(&idx[k..]);
            }
            train.sort_unstable();
            val.sort_unstable();
            Ok((train, val))
        })
        .collect()
}

/// Stratified-by-label split of every domain.
pub fn split_train_val(
    ds: &DomainDataset,
    fraction: f64,
    seed: u64,
) -> Result<(DomainDataset, DomainDataset)> {
    let parts = split_indices(ds, fraction, seed)?;
    let (mut train, mut val) = (ds.clone(), ds.clone());
    for (i, (t, v)) in parts.iter().enumerate() {
        train.domains[i] = ds.domains[i].select(t);
        val.domains[i] = ds.domains[i].select(v);
    }
    Ok((train, val))
}
