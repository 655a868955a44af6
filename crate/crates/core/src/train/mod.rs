//! Training of the adaptation method and its baselines: method recipes,
//! the λ schedule, balanced source/target batching, per-step objectives,
//! model selection and the thermal-time process baseline.

mod batches;
mod fit;
mod step;
mod thermal;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Guidance;
use crate::model::{DecoderKind, HybridPlacement, ModelConfig};

pub use batches::{make_balanced_batches, source_batches, Batch, BatchStream};
pub use fit::{fit, EpochRecord, FitData, FittedModel, RunResult};
pub use step::{StepLosses, Trainer};
pub use thermal::{fit_thermal_time, predict_thermal_time, species_rmse, ThermalGrid, ThermalTimeModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Miranda,
    Vanilla,
    Dann,
    Coral,
    Adabn,
    Danl,
    ThermalTime,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Miranda,
        Method::Vanilla,
        Method::Dann,
        Method::Coral,
        Method::Adabn,
        Method::Danl,
        Method::ThermalTime,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Miranda => "miranda",
            Self::Vanilla => "vanilla",
            Self::Dann => "dann",
            Self::Coral => "coral",
            Self::Adabn => "adabn",
            Self::Danl => "danl",
            Self::ThermalTime => "thermal-time",
        }
    }

    /// Architecture and objective of each neural method.
    pub fn recipe(self) -> Recipe {
        let base = Recipe {
            site: FeatureSite::Late,
            objective: Objective::None,
            hybrid: HybridPlacement::None,
            batch_norm: false,
        };
        match self {
            Self::Miranda => Recipe {
                site: FeatureSite::Mid,
                objective: Objective::Rank,
                hybrid: HybridPlacement::SecondLayer,
                ..base
            },
            Self::Vanilla | Self::ThermalTime => base,
            Self::Dann => Recipe {
                objective: Objective::Binary,
                ..base
            },
            Self::Coral => Recipe {
                objective: Objective::Coral,
                ..base
            },
            Self::Adabn => Recipe {
                batch_norm: true,
                ..base
            },
            Self::Danl => Recipe {
                objective: Objective::Binary,
                hybrid: HybridPlacement::BothLayers,
                ..base
            },
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Where the domain objective attaches: `Z` after the first transformer
/// layer or `G` after the second.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSite {
    Mid,
    Late,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    None,
    /// Rank-N-Contrast through gradient reversal.
    Rank,
    /// Binary domain classification through gradient reversal.
    Binary,
    /// λ-weighted CORAL, no reversal.
    Coral,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recipe {
    pub site: FeatureSite,
    pub objective: Objective,
    pub hybrid: HybridPlacement,
    /// Batch normalization in front of the decoder, adapted to target inputs
    /// after training.
    pub batch_norm: bool,
}

impl Recipe {
    pub fn uses_target(&self) -> bool {
        self.objective != Objective::None
    }
}

/// Optional per-field replacements of a method's recipe, used for
/// ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecipeOverrides {
    pub site: Option<FeatureSite>,
    pub objective: Option<Objective>,
    pub hybrid: Option<HybridPlacement>,
    pub batch_norm: Option<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Selection {
    /// Best epoch by RMSE on the labeled validation split (target domain).
    TargetValidation,
    /// Best epoch by RMSE on a held-out fraction of the training split.
    SourceHoldout { fraction: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub tau: f64,
    pub guidance: Guidance,
    /// γ of the λ schedule.
    pub steepness: f64,
    pub seed: u64,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    pub selection: Selection,
    /// Constant λ instead of the schedule.
    pub fixed_lambda: Option<f64>,
    pub recipe: RecipeOverrides,
    pub model: ModelConfig,
    /// Output width of the rank-loss embedding.
    pub rank_embedding: usize,
    pub thermal: ThermalGrid,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Miranda,
            lr: 1e-4,
            batch_size: 16,
            max_epochs: 300,
            tau: 0.1,
            guidance: Guidance::Year,
            steepness: 10.0,
            seed: 0,
            patience: None,
            selection: Selection::TargetValidation,
            fixed_lambda: None,
            recipe: RecipeOverrides::default(),
            model: ModelConfig::default(),
            rank_embedding: 128,
            thermal: ThermalGrid::default(),
        }
    }
}

impl TrainConfig {
    pub fn recipe(&self) -> Recipe {
        let mut r = self.method.recipe();
        let o = &self.recipe;
        r.site = o.site.unwrap_or(r.site);
        r.objective = o.objective.unwrap_or(r.objective);
        r.hybrid = o.hybrid.unwrap_or(r.hybrid);
        r.batch_norm = o.batch_norm.unwrap_or(r.batch_norm);
        r
    }

    /// Model configuration with the recipe's architecture applied.
    pub fn model_config(&self) -> ModelConfig {
        let r = self.recipe();
        ModelConfig {
            hybrid: r.hybrid,
            decoder_batch_norm: r.batch_norm,
            discriminator_out: match r.objective {
                Objective::Rank => Some(self.rank_embedding),
                Objective::Binary => Some(1),
                Objective::None | Objective::Coral => None,
            },
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: &str| Err(Error::Config(format!("train.{field}: {msg}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr", "must be positive");
        }
        if self.batch_size < 2 {
            return fail("batch_size", "must be at least 2");
        }
        if self.recipe().uses_target() && self.batch_size % 2 != 0 {
            return fail("batch_size", "must be even for adaptation methods");
        }
        if self.max_epochs == 0 {
            return fail("max_epochs", "must be at least 1");
        }
        if !(self.tau >= crate::losses::MIN_TAU) {
            return fail("tau", &format!("must be at least {}", crate::losses::MIN_TAU));
        }
        if !(self.steepness >= 0.0) {
            return fail("steepness", "must be non-negative");
        }
        if let Some(l) = self.fixed_lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return fail("fixed_lambda", "must be finite and non-negative");
            }
        }
        if let Selection::SourceHoldout { fraction } = self.selection {
            if !(fraction > 0.0 && fraction < 1.0) {
                return fail("selection.fraction", "must lie in (0, 1)");
            }
        }
        if self.rank_embedding == 0 {
            return fail("rank_embedding", "must be at least 1");
        }
        if self.model.decoder == DecoderKind::PerSpecies && self.model.species == 0 {
            return fail("model.species", "must be at least 1");
        }
        self.model_config().validate()
    }
}

/// `λ(p) = 2/(1+exp(−γp)) − 1`.
pub fn lambda_schedule(progress: f64, steepness: f64) -> f64 {
    2.0 / (1.0 + (-steepness * progress).exp()) - 1.0
}
