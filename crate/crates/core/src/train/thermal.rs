use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{label_from_index, Dataset, SpeciesParams, DAY_OFFSET, TEMPERATURE_CHANNEL};

/// Candidate parameters of the thermal-time baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThermalGrid {
    pub t_base: Vec<f64>,
    pub f_star: Vec<f64>,
    /// Series index where accumulation starts.
    pub start_day: usize,
}

impl Default for ThermalGrid {
    fn default() -> Self {
        Self {
            t_base: (0..=12).map(|i| 0.5 * f64::from(i)).collect(),
            f_star: (10..=100).map(|i| 5.0 * f64::from(i)).collect(),
            start_day: DAY_OFFSET,
        }
    }
}

/// Fitted per-species parameters; `None` for species without training labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThermalTimeModel {
    pub species: Vec<Option<SpeciesParams>>,
}

/// Day-of-year prediction; a threshold never reached maps to the end of the
/// series window.
fn predicted_label(cumulative: &[f64], start_day: usize, f_star: f64) -> f64 {
    let k = cumulative.partition_point(|&c| c < f_star);
    label_from_index((start_day + k).min(start_day + cumulative.len() - 1))
}

fn cumulative_gdd(temperature: &[f64], t_base: f64, start_day: usize) -> Vec<f64> {
    let mut sum = 0.0;
    temperature[start_day..]
        .iter()
        .map(|t| {
            sum += (t - t_base).max(0.0);
            sum
        })
        .collect()
}

/// Per species, the grid point with the lowest training RMSE (first in grid
/// order on ties).
pub fn fit_thermal_time(data: &Dataset, train: &[usize], grid: &ThermalGrid) -> Result<ThermalTimeModel> {
    if grid.t_base.is_empty() || grid.f_star.is_empty() {
        return Err(Error::Config("thermal grid must not be empty".into()));
    }
    if grid.start_day >= data.days {
        return Err(Error::Config("thermal start_day beyond the series".into()));
    }
    let mut species = Vec::with_capacity(data.species);
    for s in 0..data.species {
        let observed: Vec<(usize, f64)> = train
            .iter()
            .filter_map(|&i| data.records[i].labels[s].map(|y| (i, y)))
            .collect();
        if observed.is_empty() {
            log::warn!("thermal-time: species {} has no training labels, skipped", s + 1);
            species.push(None);
            continue;
        }
        let mut best: Option<(f64, f64, f64)> = None;
        for &t_base in &grid.t_base {
            let sums: Vec<Vec<f64>> = observed
                .iter()
                .map(|&(i, _)| cumulative_gdd(data.channel(i, TEMPERATURE_CHANNEL), t_base, grid.start_day))
                .collect();
            for &f_star in &grid.f_star {
                let sse: f64 = sums
                    .iter()
                    .zip(&observed)
                    .map(|(c, &(_, y))| (predicted_label(c, grid.start_day, f_star) - y).powi(2))
                    .sum();
                if best.is_none_or(|(b, _, _)| sse < b) {
                    best = Some((sse, t_base, f_star));
                }
            }
        }
        let (_, t_base, f_star) = best.expect("non-empty grid");
        species.push(Some(SpeciesParams {
            name: format!("species_{}", s + 1),
            t_base,
            f_star,
            start_day: grid.start_day,
            sigma_obs: 0.0,
        }));
    }
    Ok(ThermalTimeModel { species })
}

/// Predictions for `idx`; species without parameters predict NaN.
pub fn predict_thermal_time(model: &ThermalTimeModel, data: &Dataset, idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter()
        .map(|&i| {
            model
                .species
                .iter()
                .map(|p| match p {
                    Some(p) => {
                        let c = cumulative_gdd(data.channel(i, TEMPERATURE_CHANNEL), p.t_base, p.start_day);
                        predicted_label(&c, p.start_day, p.f_star)
                    }
                    None => f64::NAN,
                })
                .collect()
        })
        .collect()
}

/// RMSE of one species on `idx` at one grid point.
pub fn species_rmse(data: &Dataset, idx: &[usize], species: usize, t_base: f64, f_star: f64, start_day: usize) -> f64 {
    let pairs: Vec<(f64, f64)> = idx
        .iter()
        .filter_map(|&i| {
            let y = data.records[i].labels[species]?;
            let c = cumulative_gdd(data.channel(i, TEMPERATURE_CHANNEL), t_base, start_day);
            Some((predicted_label(&c, start_day, f_star), y))
        })
        .collect();
    (pairs.iter().map(|(p, y)| (p - y).powi(2)).sum::<f64>() / pairs.len() as f64).sqrt()
}
