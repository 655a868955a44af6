use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use miranda_core::synth::{generate_dataset, read_csv, Dataset, DatasetConfig, Partition, SplitSpec};
use miranda_core::train::{Method, RecipeOverrides, TrainConfig};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Where the site-year records come from. Exactly one field must be set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    pub synthetic: Option<DatasetConfig>,
    pub csv: Option<PathBuf>,
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match (&self.synthetic, &self.csv) {
            (Some(cfg), None) => Ok(generate_dataset(cfg)?),
            (None, Some(path)) => read_csv(path).with_context(|| format!("reading {}", path.display())),
            _ => bail!("dataset: set exactly one of `synthetic` or `csv`"),
        }
    }
}

/// Unlabeled inputs handed to adaptation methods as the target domain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetPool {
    #[default]
    ValAndTest,
    Val,
    Test,
}

impl TargetPool {
    pub fn indices(self, p: &Partition) -> Vec<usize> {
        let mut idx: Vec<usize> = match self {
            Self::ValAndTest => p.val.iter().chain(&p.test).copied().collect(),
            Self::Val => p.val.clone(),
            Self::Test => p.test.clone(),
        };
        idx.sort_unstable();
        idx
    }
}

/// A named method with recipe overrides, for ablations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub method: Method,
    #[serde(default)]
    pub recipe: RecipeOverrides,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetSource,
    pub split: SplitSpec,
    #[serde(default)]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub variants: Vec<Variant>,
    /// Shared training settings. `method`, `seed` and the model's
    /// channel, length and species counts are filled in per run.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub target: TargetPool,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            dataset: DatasetSource {
                synthetic: Some(DatasetConfig::default()),
                csv: None,
            },
            split: SplitSpec::Elevation {
                test_frac: 0.25,
                val_frac: 0.15,
            },
            methods: vec![Method::Vanilla, Method::Miranda],
            variants: Vec::new(),
            train: TrainConfig::default(),
            seeds: default_seeds(),
            target: TargetPool::default(),
            output_dir: default_output_dir(),
        }
    }
}

/// One configured method: its report name and training template.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub name: String,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!(
                "schema_version: expected {SCHEMA_VERSION}, found {}",
                self.schema_version
            );
        }
        if self.dataset.synthetic.is_some() == self.dataset.csv.is_some() {
            bail!("dataset: set exactly one of `synthetic` or `csv`");
        }
        if let Some(d) = &self.dataset.synthetic {
            d.validate()?;
        }
        if self.methods.is_empty() && self.variants.is_empty() {
            bail!("methods: at least one method or variant is required");
        }
        if self.seeds.is_empty() {
            bail!("seeds: at least one seed is required");
        }
        let mut names = BTreeSet::new();
        for run in self.runs() {
            if !names.insert(run.name.clone()) {
                bail!("methods: duplicate name `{}`", run.name);
            }
            if run.name.is_empty() || run.name.contains(['/', '\\']) {
                bail!("variants.name: `{}` is not a valid directory name", run.name);
            }
            run.train.validate()?;
        }
        Ok(())
    }

    /// Plain methods first, then variants, each with its training template.
    pub fn runs(&self) -> Vec<RunSpec> {
        let plain = self.methods.iter().map(|&m| RunSpec {
            name: m.name().to_string(),
            train: TrainConfig {
                method: m,
                ..self.train.clone()
            },
        });
        let variants = self.variants.iter().map(|v| RunSpec {
            name: v.name.clone(),
            train: TrainConfig {
                method: v.method,
                recipe: v.recipe,
                ..self.train.clone()
            },
        });
        plain.chain(variants).collect()
    }
}

/// Sets the model's channel, length and species counts from the data.
pub fn fit_layout(train: &mut TrainConfig, data: &Dataset) {
    train.model.channels = data.channels();
    train.model.seq_len = data.days;
    train.model.species = data.species;
}
