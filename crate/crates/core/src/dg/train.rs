use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{Architecture, Model, Optimizer};
use super::step::{erm_step, wbae_step, wbmi_step, DomainBatch, StepRecord};
use super::{EncoderUpdate, Family, Method, TrainConfig};
use crate::data::{split_train_val, Domain, DomainDataset};
use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::ot::{sinkhorn_divergence, SinkhornOptions};
use crate::{derive_seed, seeded_rng, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_c: f64,
    pub l_wb: Option<f64>,
    pub l_aux: Option<f64>,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub seed: u64,
    pub encoder_update: EncoderUpdate,
    /// `L_r`, `L_i` or `L_aux`, naming `l_aux` in the epoch records.
    pub aux_loss: String,
    pub seen_domains: Vec<String>,
    pub unseen_domain: String,
    pub steps_per_epoch: usize,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the highest validation accuracy, earliest on ties.
    pub selected_epoch: usize,
    pub best_val_acc: f64,
    /// Unseen-domain accuracy of the selected checkpoint.
    pub test_acc: f64,
    /// Mean pairwise Sinkhorn divergence between encoded seen training domains.
    pub alignment_init: f64,
    pub alignment_final: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: RunReport,
    /// The selected checkpoint.
    pub model: Model,
}

/// Shuffled without-replacement passes over each domain.
struct Batcher {
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    rng: Rng,
}

impl Batcher {
    fn new(sizes: &[usize], seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let orders = sizes
            .iter()
            .map(|&n| {
                let mut o: Vec<usize> = (0..n).collect();
                o.shuffle(&mut rng);
                o
            })
            .collect();
        Self {
            orders,
            cursors: vec![0; sizes.len()],
            rng,
        }
    }

    fn next(&mut self, s: usize, m: usize) -> Vec<usize> {
        let n = self.orders[s].len();
        let take = m.min(n);
        let mut out = Vec::with_capacity(take);
        while out.len() < take {
            if self.cursors[s] == n {
                self.orders[s].shuffle(&mut self.rng);
                self.cursors[s] = 0;
            }
            out.push(self.orders[s][self.cursors[s]]);
            self.cursors[s] += 1;
        }
        out
    }
}

fn batch(domain: &Domain, idx: &[usize]) -> DomainBatch {
    let d = domain.select(idx);
    DomainBatch {
        x: d.features,
        labels: d.labels,
    }
}

/// Points per domain used by [`alignment_divergence`].
pub const ALIGNMENT_POINTS: usize = 200;

/// Mean pairwise Sinkhorn divergence between the encoded domains (0 for
/// fewer than two), each domain truncated to its first [`ALIGNMENT_POINTS`] rows.
pub fn alignment_divergence(model: &Model, domains: &[Domain], eps: f64) -> Result<f64> {
    let clouds = domains
        .iter()
        .map(|d| {
            let idx: Vec<usize> = (0..d.len().min(ALIGNMENT_POINTS)).collect();
            EmpiricalMeasure::uniform(model.features(&d.select(&idx).features)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let opts = SinkhornOptions {
        max_iter: 5000,
        ..SinkhornOptions::with_eps(eps)
    };
    let (mut total, mut pairs) = (0.0, 0);
    for i in 0..clouds.len() {
        for j in i + 1..clouds.len() {
            total += sinkhorn_divergence(&clouds[i], &clouds[j], &opts)?;
            pairs += 1;
        }
    }
    Ok(if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    })
}

fn pooled_accuracy(model: &Model, domains: &[Domain]) -> Result<f64> {
    let (mut correct, mut total) = (0.0, 0usize);
    for d in domains {
        correct += model.accuracy(&d.features, &d.labels)? * d.len() as f64;
        total += d.len();
    }
    Ok(correct / total as f64)
}

fn mean_or_none(xs: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = xs.iter().flatten().copied().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Trains on every domain except `unseen` and evaluates the selected
/// checkpoint on it.
pub fn train(cfg: &TrainConfig, ds: &DomainDataset, unseen: usize) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (seen, held) = ds.hold_out(unseen)?;
    if seen.domains.iter().any(|d| d.is_empty()) || held.is_empty() {
        return Err(Error::invalid("every domain needs at least one sample"));
    }
    let (train_set, val_set) =
        split_train_val(&seen, cfg.train_fraction, derive_seed(cfg.seed, 1))?;
    let family = cfg.method.family();
    let arch = Architecture {
        input_dim: ds.feature_dim,
        hidden: cfg.hidden,
        feature_dim: cfg.feature_dim,
        classes: ds.class_count,
        decoder: family == Family::AutoEncoder,
    };
    let mut model = Model::new(arch, derive_seed(cfg.seed, 2))?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let settings = cfg.step_settings();
    let sizes: Vec<usize> = train_set.domains.iter().map(|d| d.len()).collect();
    let mut batcher = Batcher::new(&sizes, derive_seed(cfg.seed, 3));
    let steps_per_epoch = sizes
        .iter()
        .map(|n| n.div_ceil(cfg.batch_size))
        .max()
        .unwrap_or(1);
    let alignment_init = alignment_divergence(&model, &train_set.domains, cfg.epsilon)?;

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Model)> = None;
    let mut step_no = 0u64;
    for epoch in 1..=cfg.epochs {
        let mut records: Vec<StepRecord> = Vec::with_capacity(steps_per_epoch);
        for _ in 0..steps_per_epoch {
            let batches: Vec<DomainBatch> = train_set
                .domains
                .iter()
                .enumerate()
                .map(|(s, d)| batch(d, &batcher.next(s, cfg.batch_size)))
                .collect();
            let seed = derive_seed(derive_seed(cfg.seed, 4), step_no);
            step_no += 1;
            let rec = match family {
                Family::Erm => erm_step(&mut model, &mut opt, &batches)?,
                Family::AutoEncoder => wbae_step(&mut model, &mut opt, &batches, &settings, seed)?,
                Family::MutualInformation => {
                    wbmi_step(&mut model, &mut opt, &batches, &settings, seed)?
                }
            };
            if !rec.l_c.is_finite() {
                return Err(Error::Numerical(format!(
                    "classification loss became {} at epoch {epoch}",
                    rec.l_c
                )));
            }
            records.push(rec);
        }
        let n = records.len() as f64;
        let val_acc = pooled_accuracy(&model, &val_set.domains)?;
        epochs.push(EpochRecord {
            epoch,
            l_c: records.iter().map(|r| r.l_c).sum::<f64>() / n,
            l_wb: mean_or_none(&records.iter().map(|r| r.l_wb).collect::<Vec<_>>()),
            l_aux: mean_or_none(&records.iter().map(|r| r.l_aux).collect::<Vec<_>>()),
            val_acc,
        });
        if best.as_ref().is_none_or(|(_, acc, _)| val_acc > *acc) {
            best = Some((epoch, val_acc, model.clone()));
        }
    }
    let alignment_final = alignment_divergence(&model, &train_set.domains, cfg.epsilon)?;
    let (selected_epoch, best_val_acc, best_model) = best.expect("at least one epoch");
    let test_acc = best_model.accuracy(&held.features, &held.labels)?;
    let report = RunReport {
        method: cfg.method,
        seed: cfg.seed,
        encoder_update: cfg.encoder_update,
        aux_loss: cfg.method.aux_loss_name().into(),
        seen_domains: seen.domain_names(),
        unseen_domain: held.name.clone(),
        steps_per_epoch,
        epochs,
        selected_epoch,
        best_val_acc,
        test_acc,
        alignment_init,
        alignment_final,
    };
    Ok(TrainOutcome {
        report,
        model: best_model,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub mean: f64,
    /// Sample standard deviation (0 for a single run).
    pub std: f64,
    pub runs: Vec<f64>,
}

impl CellStats {
    pub fn from_runs(runs: Vec<f64>) -> Self {
        let n = runs.len() as f64;
        let mean = runs.iter().sum::<f64>() / n;
        let std = if runs.len() > 1 {
            (runs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std, runs }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LooTable {
    pub method: Method,
    pub seeds: Vec<u64>,
    /// One row per held-out domain followed by `Avg`.
    pub rows: Vec<(String, CellStats)>,
}

fn run_all<T: Send>(
    parallel: bool,
    n: usize,
    f: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if parallel {
        (0..n).into_par_iter().map(&f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

/// Unseen accuracies for every (seed, held-out domain) pair, seed-major.
fn loo_accuracies(
    cfg: &TrainConfig,
    ds: &DomainDataset,
    seeds: &[u64],
    domains: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let jobs: Vec<(u64, usize)> = seeds
        .iter()
        .flat_map(|s| domains.iter().map(move |u| (*s, *u)))
        .collect();
    let inner = TrainConfig {
        parallel: false,
        ..cfg.clone()
    };
    let accs = run_all(cfg.parallel, jobs.len(), |j| {
        let (seed, u) = jobs[j];
        Ok(train(
            &TrainConfig {
                seed,
                ..inner.clone()
            },
            ds,
            u,
        )?
        .report
        .test_acc)
    })?;
    Ok(accs.chunks(domains.len()).map(|c| c.to_vec()).collect())
}

/// Leave-one-domain-out accuracy table: each domain held out in turn, over
/// every seed.
pub fn leave_one_out(cfg: &TrainConfig, ds: &DomainDataset, seeds: &[u64]) -> Result<LooTable> {
    if ds.domains.len() < 2 {
        return Err(Error::invalid(
            "leave-one-domain-out needs at least two domains",
        ));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("at least one seed is required"));
    }
    let all: Vec<usize> = (0..ds.domains.len()).collect();
    let per_seed = loo_accuracies(cfg, ds, seeds, &all)?;
    let mut rows: Vec<(String, CellStats)> = ds
        .domains
        .iter()
        .enumerate()
        .map(|(u, d)| {
            (
                d.name.clone(),
                CellStats::from_runs(per_seed.iter().map(|r| r[u]).collect()),
            )
        })
        .collect();
    let avg = per_seed
        .iter()
        .map(|r| r.iter().sum::<f64>() / r.len() as f64)
        .collect();
    rows.push(("Avg".into(), CellStats::from_runs(avg)));
    Ok(LooTable {
        method: cfg.method,
        seeds: seeds.to_vec(),
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Holdout {
    /// A single fixed unseen domain.
    One(usize),
    /// Average over leave-one-domain-out runs.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationColumn {
    pub name: String,
    pub method: Method,
    pub stats: CellStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub holdout: Holdout,
    pub columns: Vec<AblationColumn>,
}

/// Runs the five ablation variants under identical seeds and splits.
/// WBAE without `L_r` and WBMI without `L_i` are the same configuration and
/// share one run.
pub fn ablate(
    cfg: &TrainConfig,
    ds: &DomainDataset,
    holdout: Holdout,
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::invalid("at least one seed is required"));
    }
    let domains: Vec<usize> = match holdout {
        Holdout::One(u) => {
            if u >= ds.domains.len() {
                return Err(Error::invalid(format!(
                    "unseen domain index {u} out of range"
                )));
            }
            vec![u]
        }
        Holdout::All => (0..ds.domains.len()).collect(),
    };
    let variants = [
        ("wbae_no_wb", Method::WbaeNoWb),
        ("wbae_no_r=wbmi_no_i", Method::WbaeNoR),
        ("wbmi_no_wb", Method::WbmiNoWb),
        ("wbae", Method::Wbae),
        ("wbmi", Method::Wbmi),
    ];
    let mut columns = vec![];
    for (name, method) in variants {
        let per_seed = loo_accuracies(
            &TrainConfig {
                method,
                ..cfg.clone()
            },
            ds,
            seeds,
            &domains,
        )?;
        let runs = per_seed
            .iter()
            .map(|r| r.iter().sum::<f64>() / r.len() as f64)
            .collect();
        columns.push(AblationColumn {
            name: name.into(),
            method,
            stats: CellStats::from_runs(runs),
        });
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        holdout,
        columns,
    })
}
