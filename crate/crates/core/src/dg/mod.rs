//! Barycenter-regularized domain generalization: models, losses, the
//! WBAE/WBMI/ERM update rules, training with validation-based model
//! selection, leave-one-domain-out evaluation and the ablation harness.

mod losses;
mod model;
mod step;
mod train;

use serde::{Deserialize, Serialize};

pub use losses::{classification_loss, cross_entropy, reconstruction_loss};
pub use model::{
    Architecture, Model, Optimizer, OptimizerKind, CLASSIFIER, CLS_B, CLS_W, DECODER, DEC_B1,
    DEC_B2, DEC_W1, DEC_W2, ENCODER, ENC_B1, ENC_B2, ENC_W1, ENC_W2, MODEL_FORMAT_VERSION,
};
pub use step::{
    barycenter_alignment_loss, erm_step, feature_barycenter, gaussian_mi_loss_bound, wbae_step,
    wbmi_step, DomainBatch, StepRecord, StepSettings, BARYCENTER_SUPPORT,
};
pub use train::{
    ablate, alignment_divergence, leave_one_out, train, AblationColumn, AblationTable, CellStats,
    EpochRecord, Holdout, LooTable, RunReport, TrainOutcome, ALIGNMENT_POINTS,
};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Wbae,
    Wbmi,
    Erm,
    /// WBAE with `α = 0`.
    WbaeNoWb,
    /// WBAE with `β = 0`; the same run as WBMI without `L_i`.
    WbaeNoR,
    /// WBMI with `α = 0`.
    WbmiNoWb,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Wbae => "wbae",
            Method::Wbmi => "wbmi",
            Method::Erm => "erm",
            Method::WbaeNoWb => "wbae_no_wb",
            Method::WbaeNoR => "wbae_no_r",
            Method::WbmiNoWb => "wbmi_no_wb",
        }
    }

    pub(crate) fn family(self) -> Family {
        match self {
            Method::Wbae | Method::WbaeNoWb | Method::WbaeNoR => Family::AutoEncoder,
            Method::Wbmi | Method::WbmiNoWb => Family::MutualInformation,
            Method::Erm => Family::Erm,
        }
    }

    /// Name of the auxiliary loss column.
    pub fn aux_loss_name(self) -> &'static str {
        match self.family() {
            Family::AutoEncoder => "L_r",
            Family::MutualInformation => "L_i",
            Family::Erm => "L_aux",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Family {
    AutoEncoder,
    MutualInformation,
    Erm,
}

/// Which gradient drives the WBMI encoder. `Objective` descends the full
/// objective including `L_c`; `Algorithm1` uses only `α∇L_wb + β∇L_i`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderUpdate {
    #[default]
    Objective,
    Algorithm1,
}

pub const ALPHA_GRID: [f64; 2] = [1e-4, 5e-4];
pub const BETA_GRID: [f64; 4] = [1e-4, 5e-4, 1e-3, 5e-3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub alpha: f64,
    pub beta: f64,
    /// Entropic regularization of the Sinkhorn losses.
    pub epsilon: f64,
    /// Feature noise scale for WBMI.
    pub delta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub feature_dim: usize,
    pub hidden: usize,
    pub encoder_update: EncoderUpdate,
    pub optimizer: OptimizerKind,
    pub sinkhorn_iters: usize,
    pub barycenter_iters: usize,
    pub num_eigen: usize,
    /// Fraction of every seen domain used for training; the rest validates.
    pub train_fraction: f64,
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Wbae,
            alpha: 5e-4,
            beta: 1e-3,
            epsilon: 0.5,
            delta: 0.1,
            lr: 5e-5,
            batch_size: 32,
            epochs: 40,
            seed: 0,
            feature_dim: 8,
            hidden: 64,
            encoder_update: EncoderUpdate::Objective,
            optimizer: OptimizerKind::Sgd,
            sinkhorn_iters: 50,
            barycenter_iters: 20,
            num_eigen: 6,
            train_fraction: 0.8,
            parallel: true,
        }
    }
}

fn config_err(field: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        msg: msg.into(),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(config_err("alpha", "must be a finite value ≥ 0"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(config_err("beta", "must be a finite value ≥ 0"));
        }
        if !positive(self.epsilon) {
            return Err(config_err("epsilon", "must be > 0"));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(config_err("delta", "must be ≥ 0"));
        }
        if self.method.family() == Family::MutualInformation && !(self.delta > 0.0) {
            return Err(config_err("delta", "must be > 0 for WBMI methods"));
        }
        if !positive(self.lr) {
            return Err(config_err("lr", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size", "must be ≥ 1"));
        }
        if self.epochs == 0 {
            return Err(config_err("epochs", "must be ≥ 1"));
        }
        if self.feature_dim == 0 || self.hidden == 0 {
            return Err(config_err("feature_dim", "layer widths must be ≥ 1"));
        }
        if self.method.family() == Family::MutualInformation && self.batch_size <= self.num_eigen {
            return Err(config_err("num_eigen", "must be smaller than batch_size"));
        }
        if self.num_eigen == 0 {
            return Err(config_err("num_eigen", "must be ≥ 1"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(config_err("train_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// α and β outside the search grids, as human-readable warnings.
    pub fn grid_warnings(&self) -> Vec<String> {
        let on = |v: f64, grid: &[f64]| grid.iter().any(|g| (g - v).abs() <= 1e-12 * g.abs());
        let mut out = vec![];
        if self.method.family() != Family::Erm {
            if !on(self.alpha, &ALPHA_GRID) {
                out.push(format!(
                    "alpha = {} is outside the search grid {:?}",
                    self.alpha, ALPHA_GRID
                ));
            }
            if !on(self.beta, &BETA_GRID) {
                out.push(format!(
                    "beta = {} is outside the search grid {:?}",
                    self.beta, BETA_GRID
                ));
            }
        }
        out
    }

    /// Step settings with the ablated weight zeroed.
    pub fn step_settings(&self) -> StepSettings {
        let (alpha, beta) = match self.method {
            Method::WbaeNoWb | Method::WbmiNoWb => (0.0, self.beta),
            Method::WbaeNoR => (self.alpha, 0.0),
            Method::Erm => (0.0, 0.0),
            Method::Wbae | Method::Wbmi => (self.alpha, self.beta),
        };
        StepSettings {
            alpha,
            beta,
            epsilon: self.epsilon,
            delta: self.delta,
            sinkhorn_iters: self.sinkhorn_iters,
            barycenter_iters: self.barycenter_iters,
            encoder_update: self.encoder_update,
            num_eigen: self.num_eigen,
            parallel: self.parallel,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_sit_on_the_grids() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert!(c.grid_warnings().is_empty());
        let off = TrainConfig {
            alpha: 0.3,
            ..c.clone()
        };
        assert_eq!(off.grid_warnings().len(), 1);
        off.validate().unwrap();
    }

    #[test]
    fn ablations_zero_the_right_weight() {
        let c = |m| {
            TrainConfig {
                method: m,
                ..TrainConfig::default()
            }
            .step_settings()
        };
        assert_eq!(c(Method::WbaeNoWb).alpha, 0.0);
        assert_eq!(c(Method::WbaeNoR).beta, 0.0);
        assert_eq!(c(Method::WbmiNoWb).alpha, 0.0);
        assert!(c(Method::Wbae).alpha > 0.0 && c(Method::Wbae).beta > 0.0);
    }

    #[test]
    fn bad_values_name_their_field() {
        let bad = TrainConfig {
            method: Method::Wbmi,
            delta: 0.0,
            ..TrainConfig::default()
        };
        match bad.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "delta"),
            other => panic!("{other:?}"),
        }
    }
}
