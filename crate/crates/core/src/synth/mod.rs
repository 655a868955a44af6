//! Synthetic climate and phenology data, train/validation/test split
//! protocols and CSV exchange of site-year records.

mod climate;
mod csv_io;
mod split;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use climate::{
    day_length_hours, gdd_date, generate_climate, generate_dataset, generate_sites, label_from_index,
    ClimateConfig, DatasetConfig, SpeciesParams, CHANNEL_NAMES, DAYS, DAY_OFFSET, TEMPERATURE_CHANNEL,
};
pub use csv_io::{read_csv, write_csv};
pub use split::{
    random_split, split, split_by_annual_temp, split_by_elevation, split_chronological, Partition, ShiftStats,
    SplitSpec,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub id: u32,
    pub elevation_m: f64,
    pub latitude_deg: f64,
}

impl Site {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=4000.0).contains(&self.elevation_m) {
            return Err(Error::Config(format!("site {}: elevation {} outside [0, 4000]", self.id, self.elevation_m)));
        }
        if !(self.latitude_deg > -90.0 && self.latitude_deg < 90.0) {
            return Err(Error::Config(format!("site {}: latitude {} outside (-90, 90)", self.id, self.latitude_deg)));
        }
        Ok(())
    }
}

/// One site-year. `x` is channel-major, `channels × days`; labels are
/// day-of-year of `year` (negative before January 1st).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub site_id: u32,
    pub year: i32,
    pub elevation_m: f64,
    pub latitude_deg: f64,
    pub x: Vec<f64>,
    pub labels: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub channel_names: Vec<String>,
    pub days: usize,
    pub species: usize,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn series<'a>(&'a self, idx: &[usize]) -> Vec<&'a [f64]> {
        idx.iter().map(|&i| self.records[i].x.as_slice()).collect()
    }

    pub fn labels<'a>(&'a self, idx: &[usize]) -> Vec<&'a [Option<f64>]> {
        idx.iter().map(|&i| self.records[i].labels.as_slice()).collect()
    }

    /// One channel of record `i`.
    pub fn channel(&self, i: usize, channel: usize) -> &[f64] {
        &self.records[i].x[channel * self.days..(channel + 1) * self.days]
    }

    /// Mean of the temperature channel over the whole series of record `i`.
    pub fn mean_temperature(&self, i: usize) -> f64 {
        let t = self.channel(i, TEMPERATURE_CHANNEL);
        t.iter().sum::<f64>() / t.len() as f64
    }

    /// Checks every record against the declared layout.
    pub fn validate(&self) -> Result<()> {
        let width = self.channels() * self.days;
        for r in &self.records {
            if r.x.len() != width {
                return Err(Error::Config(format!(
                    "record site {} year {}: {} series values, expected {width}",
                    r.site_id,
                    r.year,
                    r.x.len()
                )));
            }
            if r.labels.len() != self.species {
                return Err(Error::Config(format!(
                    "record site {} year {}: {} labels, expected {}",
                    r.site_id,
                    r.year,
                    r.labels.len(),
                    self.species
                )));
            }
        }
        Ok(())
    }
}
