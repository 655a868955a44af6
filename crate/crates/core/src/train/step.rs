use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{self, Domain, Guidance, RankLossConfig};
use crate::model::{NormMode, PhenoFormer, Standardizer};
use crate::optim::AdamState;
use crate::synth::Dataset;
use crate::tensor::Tensor;

use super::{Batch, FeatureSite, Objective, Recipe, TrainConfig};

/// Loss values of one step. `total = mse + λ·adversarial`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub mse: f64,
    /// Rank (source + target halves), binary domain or CORAL term; zero for
    /// methods without a domain objective.
    pub adversarial: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Owns the model and optimizer state of one run.
#[derive(Clone, Debug)]
pub struct Trainer<'a> {
    data: &'a Dataset,
    cfg: TrainConfig,
    recipe: Recipe,
    model: PhenoFormer,
    adam: AdamState,
    guidance: Vec<f64>,
    steps: usize,
}

impl<'a> Trainer<'a> {
    /// Builds the model for `cfg` and fits its standardizer on `train`.
    pub fn new(data: &'a Dataset, train: &[usize], cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        check_layout(data, &cfg)?;
        let mut model = PhenoFormer::new(cfg.model_config(), cfg.seed)?;
        model.set_standardizer(Standardizer::fit(
            &data.series(train),
            &data.labels(train),
            data.channels(),
            data.species,
        ));
        let guidance = (0..data.len())
            .map(|i| match cfg.guidance {
                Guidance::Year => f64::from(data.records[i].year),
                Guidance::AnnualTemperature => data.mean_temperature(i),
                Guidance::Elevation => data.records[i].elevation_m,
            })
            .collect();
        Ok(Self {
            data,
            recipe: cfg.recipe(),
            adam: AdamState::new(model.params()),
            model,
            cfg,
            guidance,
            steps: 0,
        })
    }

    pub fn model(&self) -> &PhenoFormer {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut PhenoFormer {
        &mut self.model
    }

    pub fn into_model(self) -> PhenoFormer {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn recipe(&self) -> Recipe {
        self.recipe
    }

    /// Completed optimizer steps.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Forward and backward pass on `batch` without an optimizer update.
    /// Statistics of source-train normalization layers are committed, from
    /// the source half only. Returns the losses and one gradient per
    /// parameter.
    pub fn gradients(&mut self, batch: &Batch, lambda: f64) -> Result<(StepLosses, Vec<Tensor>)> {
        let mut g = Graph::new();
        let source_x = g.constant(self.model.inputs(&self.data.series(&batch.source))?);
        let (y, mask) = self.model.targets(&self.data.labels(&batch.source))?;
        let mut observed = Vec::new();
        let fw = self.model.forward(&mut g, source_x, NormMode::SourceTrain, &mut observed)?;
        let mse = if mask.data().iter().any(|&m| m > 0.0) {
            losses::mse(&mut g, fw.prediction, &y, &mask)?
        } else {
            g.constant(Tensor::scalar(0.0))
        };
        self.model.commit(observed);

        let (objective, adversarial) = match self.recipe.objective {
            Objective::None => (mse, None),
            objective => {
                if batch.target.is_empty() {
                    return Err(Error::invalid("train_step", "adaptation batch without target samples"));
                }
                let (source_f, target_f) = self.domain_features(&mut g, batch, fw.mid, fw.late)?;
                let adv = self.domain_term(&mut g, objective, batch, source_f, target_f, lambda)?;
                let weighted = if objective == Objective::Coral { g.mul_scalar(adv, lambda) } else { adv };
                (g.add(mse, weighted)?, Some(adv))
            }
        };

        let mse_value = g.value(mse).item();
        let adv_value = adversarial.map_or(0.0, |a| g.value(a).item());
        if !mse_value.is_finite() || !adv_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.steps,
                detail: format!("mse={mse_value}, adversarial={adv_value}, lambda={lambda}"),
            });
        }
        g.backward(objective)?;
        let losses = StepLosses {
            mse: mse_value,
            adversarial: adv_value,
            total: mse_value + lambda * adv_value,
            lambda,
        };
        Ok((losses, g.param_grads(self.model.params())))
    }

    /// One Adam update on `batch`.
    pub fn step(&mut self, batch: &Batch, lambda: f64) -> Result<StepLosses> {
        let (losses, grads) = self.gradients(batch, lambda)?;
        self.adam.step(self.model.params_mut(), &grads, self.cfg.lr)?;
        self.steps += 1;
        Ok(losses)
    }

    /// Features of both halves at the recipe's site. The target half runs in
    /// target-eval mode and never touches labels.
    fn domain_features(&self, g: &mut Graph, batch: &Batch, mid: Var, late: Var) -> Result<(Var, Var)> {
        let target_x = g.constant(self.model.inputs(&self.data.series(&batch.target))?);
        let mode = NormMode::TargetEval;
        let embedded = self.model.encode(g, target_x)?;
        let t1 = self.model.forward_t1(g, embedded, mode, &mut Vec::new())?;
        Ok(match self.recipe.site {
            FeatureSite::Mid => (mid, t1.tokens),
            FeatureSite::Late => (late, self.model.forward_t2(g, t1.full, mode, &mut Vec::new())?),
        })
    }

    fn domain_term(
        &self,
        g: &mut Graph,
        objective: Objective,
        batch: &Batch,
        source_f: Var,
        target_f: Var,
        lambda: f64,
    ) -> Result<Var> {
        match objective {
            Objective::Rank => {
                let cfg = RankLossConfig {
                    tau: self.cfg.tau,
                    guidance: self.cfg.guidance,
                };
                let mut total = None;
                for (features, idx) in [(source_f, &batch.source), (target_f, &batch.target)] {
                    let reversed = g.gradient_reversal(features, lambda)?;
                    let embedding = self.model.discriminate(g, reversed)?;
                    let guidance: Vec<f64> = idx.iter().map(|&i| self.guidance[i]).collect();
                    let rank = losses::rank_n_contrast(g, embedding, &guidance, &cfg)?;
                    if rank.degenerate > 0 {
                        log::warn!("rank loss: {} zero-norm embeddings at step {}", rank.degenerate, self.steps);
                    }
                    total = Some(match total {
                        None => rank.value,
                        Some(t) => g.add(t, rank.value)?,
                    });
                }
                Ok(total.expect("two halves"))
            }
            Objective::Binary => {
                let mut logits = Vec::with_capacity(2);
                for features in [source_f, target_f] {
                    let reversed = g.gradient_reversal(features, lambda)?;
                    logits.push(self.model.discriminate(g, reversed)?);
                }
                let logits = g.concat(&logits, 0)?;
                let domains: Vec<Domain> = std::iter::repeat_n(Domain::Source, batch.source.len())
                    .chain(std::iter::repeat_n(Domain::Target, batch.target.len()))
                    .collect();
                losses::binary_domain_loss(g, logits, &domains)
            }
            Objective::Coral => {
                let width = self.model.config().species * self.model.config().dim;
                let s = g.reshape(source_f, &[batch.source.len(), width])?;
                let t = g.reshape(target_f, &[batch.target.len(), width])?;
                losses::coral(g, s, t)
            }
            Objective::None => unreachable!("handled by caller"),
        }
    }
}

fn check_layout(data: &Dataset, cfg: &TrainConfig) -> Result<()> {
    let m = &cfg.model;
    if data.channels() != m.channels || data.days != m.seq_len || data.species != m.species {
        return Err(Error::Config(format!(
            "data has C={}, T={}, S={} but the model expects C={}, T={}, S={}",
            data.channels(),
            data.days,
            data.species,
            m.channels,
            m.seq_len,
            m.species
        )));
    }
    Ok(())
}
