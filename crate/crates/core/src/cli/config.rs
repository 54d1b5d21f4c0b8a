use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bounds::SweepConfig;
use crate::data::{generate_rotated, load_csv, Base, DomainDataset};
use crate::dg::{Method, TrainConfig};
use crate::error::{Error, Result};
use crate::ot::{BarycenterOptions, SinkhornOptions};

fn config_err(field: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        msg: msg.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RotatedSpec {
    pub base: Base,
    pub angles: Vec<f64>,
    pub n_per_domain: usize,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for RotatedSpec {
    fn default() -> Self {
        Self {
            base: Base::GaussMixture,
            angles: vec![0.0, 25.0, 50.0, 75.0],
            n_per_domain: 500,
            noise_sd: 0.4,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSpec {
    /// Relative paths resolve against the config file's directory.
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Rotated(RotatedSpec),
    Csv(CsvSpec),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Rotated(RotatedSpec::default())
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<DomainDataset> {
        match self {
            DatasetSpec::Rotated(r) => {
                generate_rotated(r.base, &r.angles, r.n_per_domain, r.noise_sd, r.seed)
            }
            DatasetSpec::Csv(c) => load_csv(&c.path),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum OtMode {
    #[default]
    Sinkhorn,
    Barycenter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OtConfig {
    pub mode: OtMode,
    /// Point-cloud CSV files; relative paths resolve like dataset paths.
    pub inputs: Vec<PathBuf>,
    /// Barycenter weights; uniform when absent.
    pub weights: Option<Vec<f64>>,
    pub epsilon: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub eps_scaling: bool,
    /// Barycenter support size; the largest input size when absent.
    pub k: Option<usize>,
    pub outer_iters: usize,
    pub support_tol: f64,
    pub seed: u64,
    /// Emit `x,y,weight` rows of the barycenter support.
    pub plot: bool,
}

impl Default for OtConfig {
    fn default() -> Self {
        let s = SinkhornOptions::default();
        let b = BarycenterOptions::default();
        Self {
            mode: OtMode::Sinkhorn,
            inputs: vec![],
            weights: None,
            epsilon: s.eps,
            max_iter: s.max_iter,
            tol: s.tol,
            eps_scaling: s.eps_scaling,
            k: None,
            outer_iters: b.outer_iters,
            support_tol: b.tol,
            seed: 0,
            plot: true,
        }
    }
}

impl OtConfig {
    pub fn sinkhorn_options(&self) -> SinkhornOptions {
        SinkhornOptions {
            eps: self.epsilon,
            max_iter: self.max_iter,
            tol: self.tol,
            eps_scaling: self.eps_scaling,
        }
    }
}

/// Everything one `otdg` invocation needs. Unknown keys are rejected at
/// every level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    /// Held-out domain name. `train` defaults to the last domain and
    /// `ablate` to every domain in turn; `loo` ignores it.
    pub unseen: Option<String>,
    /// Seeds to run; `[train.seed]` when absent.
    pub seeds: Option<Vec<u64>>,
    /// Methods compared by `loo`; `[train.method]` when absent.
    pub methods: Option<Vec<Method>>,
    pub out: Option<PathBuf>,
    pub bounds: SweepConfig,
    pub ot: OtConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            dataset: DatasetSpec::default(),
            unseen: None,
            seeds: None,
            methods: None,
            out: None,
            bounds: SweepConfig::default(),
            ot: OtConfig::default(),
        }
    }
}

pub const DEFAULT_OUT: &str = "otdg_out";

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.starts_with("unknown field") || msg.starts_with("missing field"))
                .unwrap_or("<root>");
            config_err(field, msg.clone())
        })
    }

    /// Reads a config file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err("<file>", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let DatasetSpec::Csv(c) = &mut cfg.dataset {
            c.path = resolve(base, &c.path);
        }
        for p in &mut cfg.ot.inputs {
            *p = resolve(base, p);
        }
        if let Some(out) = &mut cfg.out {
            *out = resolve(base, out);
        }
        Ok(cfg)
    }

    /// Applies command-line overrides and fills in every defaulted choice.
    pub fn resolve(&mut self, out: Option<PathBuf>, seeds: Option<Vec<u64>>, serial: bool) {
        if let Some(o) = out {
            self.out = Some(o);
        }
        self.out.get_or_insert_with(|| PathBuf::from(DEFAULT_OUT));
        if let Some(s) = seeds {
            self.seeds = Some(s);
        }
        let seed = self.train.seed;
        self.seeds.get_or_insert_with(|| vec![seed]);
        if serial {
            self.train.parallel = false;
            self.bounds.parallel = false;
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| vec![self.train.seed])
    }

    pub fn method_list(&self) -> Vec<Method> {
        self.methods
            .clone()
            .unwrap_or_else(|| vec![self.train.method])
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if matches!(&self.methods, Some(m) if m.is_empty()) {
            return Err(config_err("methods", "must not be empty"));
        }
        for m in self.methods.iter().flatten() {
            TrainConfig {
                method: *m,
                ..self.train.clone()
            }
            .validate()?;
        }
        if matches!(&self.seeds, Some(s) if s.is_empty()) {
            return Err(config_err("seeds", "must not be empty"));
        }
        if let DatasetSpec::Rotated(r) = &self.dataset {
            if r.angles.len() < 2 {
                return Err(config_err(
                    "dataset.rotated.angles",
                    "at least two domains are needed",
                ));
            }
            if r.n_per_domain < 2 {
                return Err(config_err("dataset.rotated.n_per_domain", "must be ≥ 2"));
            }
            if !(r.noise_sd >= 0.0 && r.noise_sd.is_finite()) {
                return Err(config_err(
                    "dataset.rotated.noise_sd",
                    "must be a finite value ≥ 0",
                ));
            }
        }
        let b = &self.bounds;
        if b.cases == 0 || b.n_mc < 2 {
            return Err(config_err("bounds", "cases must be ≥ 1 and n_mc ≥ 2"));
        }
        if !(b.l > 0.0 && b.l.is_finite()) {
            return Err(config_err("bounds.l", "must be > 0"));
        }
        let o = &self.ot;
        if !(o.epsilon > 0.0 && o.epsilon.is_finite()) {
            return Err(config_err("ot.epsilon", "must be > 0"));
        }
        if o.max_iter == 0 || o.outer_iters == 0 {
            return Err(config_err("ot.max_iter", "iteration budgets must be ≥ 1"));
        }
        if !(o.tol > 0.0) || !(o.support_tol >= 0.0) {
            return Err(config_err("ot.tol", "tolerances must be positive"));
        }
        if o.k == Some(0) {
            return Err(config_err("ot.k", "must be ≥ 1"));
        }
        if let Some(w) = &o.weights {
            if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
                return Err(config_err(
                    "ot.weights",
                    "must be non-negative with a positive sum",
                ));
            }
        }
        Ok(())
    }

    /// Index of the requested held-out domain, if one is named.
    pub fn unseen_index(&self, ds: &DomainDataset) -> Result<Option<usize>> {
        match &self.unseen {
            None => Ok(None),
            Some(name) => ds.find(name).map(Some).ok_or_else(|| {
                config_err(
                    "unseen",
                    format!(
                        "no domain named '{name}'; available: {}",
                        ds.domain_names().join(", ")
                    ),
                )
            }),
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(
            ExperimentConfig::from_json("{}").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_name() {
        for (text, field) in [
            (r#"{"trian": {}}"#, "trian"),
            (r#"{"train": {"alpah": 1}}"#, "alpah"),
            (r#"{"dataset": {"rotated": {"angle": []}}}"#, "angle"),
            (r#"{"ot": {"eps": 1}}"#, "eps"),
        ] {
            match ExperimentConfig::from_json(text) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn overrides_take_precedence() {
        let mut c = ExperimentConfig::from_json(r#"{"seeds": [4], "out": "a"}"#).unwrap();
        c.resolve(Some("b".into()), Some(vec![1, 2]), true);
        assert_eq!(c.seed_list(), [1, 2]);
        assert_eq!(c.out_dir(), PathBuf::from("b"));
        assert!(!c.train.parallel && !c.bounds.parallel);
    }

    #[test]
    fn bad_values_are_caught_before_compute() {
        let c = ExperimentConfig::from_json(r#"{"ot": {"epsilon": -1}}"#).unwrap();
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "ot.epsilon"));
        let c = ExperimentConfig::from_json(r#"{"train": {"lr": 0}}"#).unwrap();
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "lr"));
    }
}
