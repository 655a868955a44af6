use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Exp, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Dataset, SampleRecord, Site};
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};

/// Series length: day -100 of the target year through day 264.
pub const DAYS: usize = 365;
/// Series index of January 1st of the target year.
pub const DAY_OFFSET: usize = 100;
pub const TEMPERATURE_CHANNEL: usize = 0;
pub const CHANNEL_NAMES: [&str; 7] = ["tmean", "tmin", "tmax", "precip", "pressure", "daylength", "noise"];

const SITE_STREAM: u64 = 0;
const YEAR_STREAM: u64 = 1;
const CLIMATE_STREAM: u64 = 2;
const LABEL_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClimateConfig {
    /// Mean temperature at sea level in the first year, °C.
    pub baseline_c: f64,
    /// Half the summer-winter temperature contrast, °C.
    pub amplitude_c: f64,
    pub warming_per_decade: f64,
    /// °C per km of elevation; negative.
    pub lapse_per_km: f64,
    /// Stationary standard deviation of the daily AR(1) anomaly, °C.
    pub noise_sd: f64,
    pub noise_ar: f64,
    /// Standard deviation of the anomaly shared by all sites in a year, °C.
    pub year_anomaly_sd: f64,
    pub sites: usize,
    pub first_year: i32,
    pub years: usize,
    pub elevation_range: [f64; 2],
    pub latitude_range: [f64; 2],
    /// Seeds site placement and yearly anomalies.
    pub seed: u64,
}

impl Default for ClimateConfig {
    fn default() -> Self {
        Self {
            baseline_c: 10.0,
            amplitude_c: 9.0,
            warming_per_decade: 0.4,
            lapse_per_km: -6.0,
            noise_sd: 2.5,
            noise_ar: 0.7,
            year_anomaly_sd: 0.8,
            sites: 40,
            first_year: 1971,
            years: 50,
            elevation_range: [200.0, 1500.0],
            latitude_range: [45.8, 47.8],
            seed: 0,
        }
    }
}

impl ClimateConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: &str| Err(Error::Config(format!("climate.{field}: {msg}")));
        if self.lapse_per_km >= 0.0 {
            return fail("lapse_per_km", "must be negative");
        }
        if self.amplitude_c < 0.0 || self.noise_sd < 0.0 || self.year_anomaly_sd < 0.0 {
            return fail("amplitude_c/noise_sd/year_anomaly_sd", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.noise_ar) {
            return fail("noise_ar", "must lie in [0, 1)");
        }
        if self.sites == 0 || self.years == 0 {
            return fail("sites/years", "must be at least 1");
        }
        let [lo, hi] = self.elevation_range;
        if !(0.0 <= lo && lo <= hi && hi <= 4000.0) {
            return fail("elevation_range", "must satisfy 0 <= low <= high <= 4000");
        }
        let [lo, hi] = self.latitude_range;
        if !(-90.0 < lo && lo <= hi && hi < 90.0) {
            return fail("latitude_range", "must satisfy -90 < low <= high < 90");
        }
        Ok(())
    }

    pub fn last_year(&self) -> i32 {
        self.first_year + self.years as i32 - 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesParams {
    pub name: String,
    /// °C.
    pub t_base: f64,
    /// Degree-days.
    pub f_star: f64,
    /// Series index where accumulation starts.
    pub start_day: usize,
    /// Observation noise, days.
    pub sigma_obs: f64,
}

impl SpeciesParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.f_star > 0.0) {
            return Err(Error::Config(format!("species {}: f_star must be positive", self.name)));
        }
        if !(self.sigma_obs >= 0.0) {
            return Err(Error::Config(format!("species {}: sigma_obs must be non-negative", self.name)));
        }
        if self.start_day >= DAYS {
            return Err(Error::Config(format!("species {}: start_day beyond the series", self.name)));
        }
        Ok(())
    }

    /// Five species from early (hazel-like) to late (spruce-like).
    pub fn defaults() -> Vec<Self> {
        let make = |name: &str, t_base: f64, f_star: f64| Self {
            name: name.into(),
            t_base,
            f_star,
            start_day: DAY_OFFSET,
            sigma_obs: 3.0,
        };
        vec![
            make("hazel", 0.0, 150.0),
            make("horse-chestnut", 2.0, 180.0),
            make("beech", 3.0, 200.0),
            make("larch", 4.0, 230.0),
            make("spruce", 5.0, 270.0),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub climate: ClimateConfig,
    pub species: Vec<SpeciesParams>,
    /// Probability that a species label of a site-year is unobserved.
    pub missing_rate: f64,
    /// Seeds daily weather and observation noise.
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            climate: ClimateConfig::default(),
            species: SpeciesParams::defaults(),
            missing_rate: 0.1,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.climate.validate()?;
        if self.species.is_empty() {
            return Err(Error::Config("species: at least one species required".into()));
        }
        self.species.iter().try_for_each(SpeciesParams::validate)?;
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Config("missing_rate: must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Sites drawn uniformly over the configured elevation and latitude ranges.
pub fn generate_sites(cfg: &ClimateConfig) -> Vec<Site> {
    let mut rng = stream(cfg.seed, &[SITE_STREAM]);
    (0..cfg.sites)
        .map(|i| {
            let [e0, e1] = cfg.elevation_range;
            let [l0, l1] = cfg.latitude_range;
            Site {
                id: i as u32 + 1,
                elevation_m: e0 + (e1 - e0) * rng.random::<f64>(),
                latitude_deg: l0 + (l1 - l0) * rng.random::<f64>(),
            }
        })
        .collect()
}

fn year_anomaly(cfg: &ClimateConfig, year: i32) -> f64 {
    let z: f64 = stream(cfg.seed, &[YEAR_STREAM, year as u64]).sample(StandardNormal);
    cfg.year_anomaly_sd * z
}

/// Day of year in `1..=365` for series index `i`.
fn calendar_day(i: usize) -> f64 {
    let doy = i as f64 - DAY_OFFSET as f64;
    if doy < 0.0 {
        doy + 366.0
    } else {
        doy + 1.0
    }
}

/// Hours between sunrise and sunset from the Cooper declination formula.
pub fn day_length_hours(latitude_deg: f64, day_of_year: f64) -> f64 {
    let decl = 23.44f64.to_radians() * (2.0 * PI * (284.0 + day_of_year) / 365.0).sin();
    let cos_h = (-latitude_deg.to_radians().tan() * decl.tan()).clamp(-1.0, 1.0);
    24.0 / PI * cos_h.acos()
}

/// Channel-major `7 × DAYS` series for one site-year. `seed` drives the
/// daily weather; sites with equal seeds share the same daily anomalies.
pub fn generate_climate(site: &Site, year: i32, cfg: &ClimateConfig, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, &[CLIMATE_STREAM]);
    let mut x = vec![0.0; CHANNEL_NAMES.len() * DAYS];
    let offset = cfg.baseline_c
        + cfg.warming_per_decade * f64::from(year - cfg.first_year) / 10.0
        + cfg.lapse_per_km * site.elevation_m / 1000.0
        + year_anomaly(cfg, year);
    let innovation = (1.0 - cfg.noise_ar * cfg.noise_ar).sqrt();
    let mut anomaly = cfg.noise_sd * normal(&mut rng);
    let mut pressure_anomaly = 5.0 * normal(&mut rng);
    let wet = Uniform::new(0.0, 1.0).expect("valid range");
    let amount = Exp::new(1.0 / 6.0).expect("positive rate");
    let base_pressure = 1013.25 * (-site.elevation_m / 8434.0).exp();
    for i in 0..DAYS {
        if i > 0 {
            anomaly = cfg.noise_ar * anomaly + innovation * cfg.noise_sd * normal(&mut rng);
            pressure_anomaly = 0.8 * pressure_anomaly + 0.6 * 5.0 * normal(&mut rng);
        }
        let doy = i as f64 - DAY_OFFSET as f64;
        let tmean = offset - cfg.amplitude_c * (2.0 * PI * (doy - 15.0) / 365.0).cos() + anomaly;
        let range = (9.0 + 2.0 * normal(&mut rng)).max(0.5);
        let precip = if wet.sample(&mut rng) < 0.35 { amount.sample(&mut rng) } else { 0.0 };
        let values = [
            tmean,
            tmean - range / 2.0,
            tmean + range / 2.0,
            precip,
            base_pressure + pressure_anomaly,
            day_length_hours(site.latitude_deg, calendar_day(i)),
            normal(&mut rng),
        ];
        for (c, v) in values.into_iter().enumerate() {
            x[c * DAYS + i] = v;
        }
    }
    x
}

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// First series index `d ≥ start_day` at which the degree-days above
/// `t_base` accumulated since `start_day` reach `f_star`.
pub fn gdd_date(temperature: &[f64], params: &SpeciesParams) -> Option<usize> {
    let mut sum = 0.0;
    for (d, t) in temperature.iter().enumerate().skip(params.start_day) {
        sum += (t - params.t_base).max(0.0);
        if sum >= params.f_star {
            return Some(d);
        }
    }
    None
}

/// Day-of-year label for a series index.
pub fn label_from_index(index: usize) -> f64 {
    index as f64 - DAY_OFFSET as f64
}

/// All site-years in canonical order (site, then year). Each site-year
/// derives its own seed from `(cfg.seed, site, year)`, so the result does
/// not depend on scheduling.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let climate = &cfg.climate;
    let sites = generate_sites(climate);
    let jobs: Vec<(usize, i32)> = (0..sites.len())
        .flat_map(|s| (0..climate.years).map(move |y| (s, climate.first_year + y as i32)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(s, year)| {
            let site = &sites[s];
            let site_seed = crate::rng::derive_seed(cfg.seed, &[u64::from(site.id), year as u64]);
            let x = generate_climate(site, year, climate, site_seed);
            let temperature = &x[TEMPERATURE_CHANNEL * DAYS..(TEMPERATURE_CHANNEL + 1) * DAYS];
            let mut rng = stream(site_seed, &[LABEL_STREAM]);
            let labels = cfg
                .species
                .iter()
                .map(|sp| {
                    let noise = (sp.sigma_obs * normal(&mut rng)).round();
                    let missing = rng.random::<f64>() < cfg.missing_rate;
                    let date = gdd_date(temperature, sp)?;
                    if missing {
                        return None;
                    }
                    let idx = (date as f64 + noise).clamp(0.0, (DAYS - 1) as f64);
                    Some(label_from_index(idx as usize))
                })
                .collect();
            SampleRecord {
                site_id: site.id,
                year,
                elevation_m: site.elevation_m,
                latitude_deg: site.latitude_deg,
                x,
                labels,
            }
        })
        .collect();
    Ok(Dataset {
        channel_names: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        days: DAYS,
        species: cfg.species.len(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_config() -> ClimateConfig {
        ClimateConfig {
            amplitude_c: 0.0,
            noise_sd: 0.0,
            warming_per_decade: 0.0,
            year_anomaly_sd: 0.0,
            ..ClimateConfig::default()
        }
    }

    fn site(elevation_m: f64, latitude_deg: f64) -> Site {
        Site {
            id: 1,
            elevation_m,
            latitude_deg,
        }
    }

    fn species(t_base: f64, f_star: f64, start_day: usize) -> SpeciesParams {
        SpeciesParams {
            name: "s".into(),
            t_base,
            f_star,
            start_day,
            sigma_obs: 0.0,
        }
    }

    #[test]
    fn flat_climate_has_constant_temperature() {
        let x = generate_climate(&site(500.0, 46.0), 1990, &flat_config(), 3);
        let t = &x[..DAYS];
        assert!(t.iter().all(|&v| (v - t[0]).abs() < 1e-12));
        assert!((t[0] - (10.0 - 6.0 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn elevation_difference_is_the_lapse_rate() {
        let cfg = ClimateConfig::default();
        let low = generate_climate(&site(300.0, 46.0), 1990, &cfg, 11);
        let high = generate_climate(&site(1300.0, 46.0), 1990, &cfg, 11);
        for d in 0..DAYS {
            assert!((high[d] - low[d] - cfg.lapse_per_km).abs() < 1e-12);
        }
    }

    #[test]
    fn equator_day_length_is_twelve_hours() {
        for day in 1..=365 {
            assert!((day_length_hours(0.0, f64::from(day)) - 12.0).abs() < 0.1);
        }
        let x = generate_climate(&site(0.0, 0.0), 2000, &ClimateConfig::default(), 1);
        assert!(x[5 * DAYS..6 * DAYS].iter().all(|&h| (h - 12.0).abs() < 0.1));
    }

    #[test]
    fn mid_latitude_solstice_day_length() {
        let summer = day_length_hours(47.0, 172.0);
        let winter = day_length_hours(47.0, 355.0);
        assert!((15.4..16.0).contains(&summer), "{summer}");
        assert!((8.2..8.8).contains(&winter), "{winter}");
        assert!((summer + winter - 24.0).abs() < 0.1);
    }

    #[test]
    fn gdd_counts_days() {
        assert_eq!(gdd_date(&[3.0; 20], &species(2.0, 5.0, 0)), Some(4));
        assert_eq!(gdd_date(&[2.0; 20], &species(2.0, 5.0, 0)), None);
        assert_eq!(gdd_date(&[3.0; 20], &species(2.0, 5.0, 10)), Some(14));
    }

    #[test]
    fn gdd_matches_prefix_sum_scan() {
        let mut rng = stream(5, &[]);
        for _ in 0..200 {
            let t: Vec<f64> = (0..60).map(|_| rng.random_range(-5.0..15.0)).collect();
            let p = species(rng.random_range(0.0..5.0), rng.random_range(1.0..300.0), rng.random_range(0..30));
            let mut prefix = vec![0.0];
            for v in &t[p.start_day..] {
                prefix.push(prefix.last().unwrap() + (v - p.t_base).max(0.0));
            }
            let expected = prefix.iter().skip(1).position(|&c| c >= p.f_star).map(|k| k + p.start_day);
            assert_eq!(gdd_date(&t, &p), expected);
        }
    }

    fn small_dataset(warming: f64, sigma_obs: f64, missing_rate: f64) -> DatasetConfig {
        DatasetConfig {
            climate: ClimateConfig {
                sites: 6,
                years: 30,
                warming_per_decade: warming,
                ..ClimateConfig::default()
            },
            species: SpeciesParams::defaults()
                .into_iter()
                .map(|s| SpeciesParams { sigma_obs, ..s })
                .collect(),
            missing_rate,
            seed: 17,
        }
    }

    #[test]
    fn noiseless_labels_equal_thermal_time_dates() {
        let cfg = small_dataset(0.3, 0.0, 0.0);
        let ds = generate_dataset(&cfg).unwrap();
        assert_eq!(ds.len(), 180);
        for (i, r) in ds.records.iter().enumerate() {
            for (sp, label) in cfg.species.iter().zip(&r.labels) {
                assert_eq!(*label, gdd_date(ds.channel(i, 0), sp).map(label_from_index));
            }
        }
    }

    #[test]
    fn labels_stay_in_the_series_window() {
        let ds = generate_dataset(&small_dataset(0.3, 20.0, 0.2)).unwrap();
        let labels: Vec<f64> = ds.records.iter().flat_map(|r| r.labels.iter().flatten().copied()).collect();
        assert!(labels.iter().all(|l| (-100.0..=264.0).contains(l)));
        let missing = ds.records.iter().flat_map(|r| &r.labels).filter(|l| l.is_none()).count();
        assert!(missing > 0);
    }

    #[test]
    fn warming_advances_dates_decade_by_decade() {
        let mut cfg = small_dataset(1.0, 3.0, 0.0);
        cfg.climate.sites = 20;
        let ds = generate_dataset(&cfg).unwrap();
        let decade_mean = |k: i32| {
            let from = cfg.climate.first_year + 10 * k;
            let v: Vec<f64> = ds
                .records
                .iter()
                .filter(|r| (from..from + 10).contains(&r.year))
                .flat_map(|r| r.labels.iter().flatten().copied())
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let means: Vec<f64> = (0..3).map(decade_mean).collect();
        assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_dataset(0.3, 3.0, 0.1);
        assert_eq!(generate_dataset(&cfg).unwrap(), generate_dataset(&cfg).unwrap());
        let other = DatasetConfig { seed: 18, ..cfg.clone() };
        assert_ne!(generate_dataset(&cfg).unwrap(), generate_dataset(&other).unwrap());
    }

    #[test]
    fn config_validation_names_fields() {
        let mut cfg = DatasetConfig::default();
        cfg.climate.lapse_per_km = 1.0;
        assert!(cfg.validate().unwrap_err().to_string().contains("lapse_per_km"));
        let mut cfg = DatasetConfig::default();
        cfg.species[0].f_star = 0.0;
        assert!(cfg.validate().unwrap_err().to_string().contains("f_star"));
    }
}
