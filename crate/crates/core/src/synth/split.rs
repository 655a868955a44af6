use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::stream;

/// Record indices of the three partitions, each in dataset order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Partition {
    fn checked(mut self) -> Result<Self> {
        for (name, part) in [("train", &mut self.train), ("val", &mut self.val), ("test", &mut self.test)] {
            if part.is_empty() {
                return Err(Error::EmptyPartition(name.into()));
            }
            part.sort_unstable();
        }
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SplitSpec {
    /// `year ≤ train_end` trains, `year ≤ val_end` validates, later years test.
    Chronological { train_end: i32, val_end: i32 },
    /// Warmest whole years test, the next warmest validate.
    AnnualTemperature {
        #[serde(default = "fifteen")]
        test_frac: f64,
        #[serde(default = "fifteen")]
        val_frac: f64,
    },
    /// Highest site-years test, the next highest validate.
    Elevation {
        #[serde(default = "twenty_five")]
        test_frac: f64,
        #[serde(default = "fifteen")]
        val_frac: f64,
    },
    /// Uniformly shuffled site-years; no intended shift.
    Random {
        #[serde(default = "fifteen")]
        test_frac: f64,
        #[serde(default = "fifteen")]
        val_frac: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn fifteen() -> f64 {
    0.15
}

fn twenty_five() -> f64 {
    0.25
}

impl SplitSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Chronological { .. } => "chronological",
            Self::AnnualTemperature { .. } => "annual-temperature",
            Self::Elevation { .. } => "elevation",
            Self::Random { .. } => "random",
        }
    }
}

pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<Partition> {
    match *spec {
        SplitSpec::Chronological { train_end, val_end } => split_chronological(ds, train_end, val_end),
        SplitSpec::AnnualTemperature { test_frac, val_frac } => split_by_annual_temp(ds, test_frac, val_frac),
        SplitSpec::Elevation { test_frac, val_frac } => split_by_elevation(ds, test_frac, val_frac),
        SplitSpec::Random {
            test_frac,
            val_frac,
            seed,
        } => random_split(ds, test_frac, val_frac, seed),
    }
}

fn check_fractions(test_frac: f64, val_frac: f64) -> Result<()> {
    if !(test_frac > 0.0 && val_frac > 0.0 && test_frac + val_frac < 1.0) {
        return Err(Error::Config(format!(
            "split fractions test={test_frac}, val={val_frac} must be positive and sum below 1"
        )));
    }
    Ok(())
}

/// Sizes of the leading test and val blocks out of `n` ranked units.
fn block_sizes(n: usize, test_frac: f64, val_frac: f64) -> (usize, usize) {
    let test = (test_frac * n as f64).round() as usize;
    let val = (val_frac * n as f64).round() as usize;
    (test.min(n), val.min(n - test.min(n)))
}

pub fn split_chronological(ds: &Dataset, train_end: i32, val_end: i32) -> Result<Partition> {
    if val_end < train_end {
        return Err(Error::Config(format!("val_end {val_end} precedes train_end {train_end}")));
    }
    let mut p = Partition::default();
    for (i, r) in ds.records.iter().enumerate() {
        match r.year {
            y if y <= train_end => p.train.push(i),
            y if y <= val_end => p.val.push(i),
            _ => p.test.push(i),
        }
    }
    p.checked()
}

/// Whole years ranked by mean temperature over their site-years.
pub fn split_by_annual_temp(ds: &Dataset, test_frac: f64, val_frac: f64) -> Result<Partition> {
    check_fractions(test_frac, val_frac)?;
    let mut by_year: BTreeMap<i32, (f64, usize)> = BTreeMap::new();
    for i in 0..ds.len() {
        let entry = by_year.entry(ds.records[i].year).or_default();
        entry.0 += ds.mean_temperature(i);
        entry.1 += 1;
    }
    if by_year.len() < 3 {
        return Err(Error::EmptyPartition(format!("{} distinct years, need at least 3", by_year.len())));
    }
    let mut years: Vec<(i32, f64)> = by_year.into_iter().map(|(y, (sum, n))| (y, sum / n as f64)).collect();
    years.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let (n_test, n_val) = block_sizes(years.len(), test_frac, val_frac);
    let rank: BTreeMap<i32, usize> = years.iter().enumerate().map(|(r, (y, _))| (*y, r)).collect();
    let mut p = Partition::default();
    for (i, r) in ds.records.iter().enumerate() {
        match rank[&r.year] {
            k if k < n_test => p.test.push(i),
            k if k < n_test + n_val => p.val.push(i),
            _ => p.train.push(i),
        }
    }
    p.checked()
}

/// Site-years ranked by elevation, highest first; ties keep dataset order.
pub fn split_by_elevation(ds: &Dataset, test_frac: f64, val_frac: f64) -> Result<Partition> {
    check_fractions(test_frac, val_frac)?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by(|&a, &b| ds.records[b].elevation_m.total_cmp(&ds.records[a].elevation_m).then(a.cmp(&b)));
    let (n_test, n_val) = block_sizes(order.len(), test_frac, val_frac);
    Partition {
        test: order[..n_test].to_vec(),
        val: order[n_test..n_test + n_val].to_vec(),
        train: order[n_test + n_val..].to_vec(),
    }
    .checked()
}

pub fn random_split(ds: &Dataset, test_frac: f64, val_frac: f64, seed: u64) -> Result<Partition> {
    check_fractions(test_frac, val_frac)?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut stream(seed, &[7]));
    let (n_test, n_val) = block_sizes(order.len(), test_frac, val_frac);
    Partition {
        test: order[..n_test].to_vec(),
        val: order[n_test..n_test + n_val].to_vec(),
        train: order[n_test + n_val..].to_vec(),
    }
    .checked()
}

/// Test-minus-train differences in mean temperature and mean observed date.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftStats {
    pub delta_temperature: f64,
    pub delta_date: f64,
}

impl ShiftStats {
    pub fn compute(ds: &Dataset, p: &Partition) -> Self {
        let mean_t = |idx: &[usize]| idx.iter().map(|&i| ds.mean_temperature(i)).sum::<f64>() / idx.len() as f64;
        let mean_date = |idx: &[usize]| {
            let dates: Vec<f64> = idx.iter().flat_map(|&i| ds.records[i].labels.iter().flatten().copied()).collect();
            if dates.is_empty() {
                f64::NAN
            } else {
                dates.iter().sum::<f64>() / dates.len() as f64
            }
        };
        Self {
            delta_temperature: mean_t(&p.test) - mean_t(&p.train),
            delta_date: mean_date(&p.test) - mean_date(&p.train),
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::synth::SampleRecord;
    use proptest::prelude::*;

    /// Records with a constant temperature channel of `temp` and one label.
    pub(crate) fn toy(rows: &[(u32, i32, f64, f64)]) -> Dataset {
        Dataset {
            channel_names: vec!["tmean".into(), "noise".into()],
            days: 3,
            species: 1,
            records: rows
                .iter()
                .map(|&(site_id, year, elevation_m, temp)| SampleRecord {
                    site_id,
                    year,
                    elevation_m,
                    latitude_deg: 46.0,
                    x: vec![temp, temp, temp, 0.0, 1.0, 2.0],
                    labels: vec![Some(100.0 - temp)],
                })
                .collect(),
        }
    }

    fn assert_partition(p: &Partition, n: usize) {
        let mut all: Vec<usize> = p.train.iter().chain(&p.val).chain(&p.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn chronological_boundaries() {
        let rows: Vec<_> = (1951..=2022).flat_map(|y| [(1, y, 100.0, 5.0), (2, y, 900.0, 3.0)]).collect();
        let ds = toy(&rows);
        let p = split_chronological(&ds, 2002, 2012).unwrap();
        assert_partition(&p, ds.len());
        assert_eq!((p.train.len(), p.val.len(), p.test.len()), (104, 20, 20));
        assert!(p.train.iter().all(|&i| ds.records[i].year <= 2002));
        assert!(p.val.iter().all(|&i| (2003..=2012).contains(&ds.records[i].year)));
        assert!(p.test.iter().all(|&i| ds.records[i].year >= 2013));
    }

    #[test]
    fn single_year_cannot_be_split() {
        let ds = toy(&[(1, 2000, 0.0, 1.0), (2, 2000, 10.0, 2.0)]);
        assert!(matches!(split_chronological(&ds, 1999, 2005), Err(Error::EmptyPartition(_))));
        assert!(split_by_annual_temp(&ds, 0.15, 0.15).is_err());
    }

    #[test]
    fn annual_split_takes_warmest_whole_years() {
        let rows: Vec<_> = (0..20)
            .flat_map(|k| [(1, 2000 + k, 100.0, f64::from(k)), (2, 2000 + k, 800.0, f64::from(k) - 4.0)])
            .collect();
        let ds = toy(&rows);
        let p = split_by_annual_temp(&ds, 0.15, 0.15).unwrap();
        assert_partition(&p, ds.len());
        let years = |idx: &[usize]| {
            let mut y: Vec<i32> = idx.iter().map(|&i| ds.records[i].year).collect();
            y.dedup();
            y
        };
        assert_eq!(years(&p.test), vec![2017, 2018, 2019]);
        assert_eq!(years(&p.val), vec![2014, 2015, 2016]);
        let mean = |idx: &[usize]| idx.iter().map(|&i| ds.mean_temperature(i)).sum::<f64>() / idx.len() as f64;
        assert!(mean(&p.train) < mean(&p.test));
    }

    #[test]
    fn annual_split_matches_independent_ranking() {
        let cfg = crate::synth::DatasetConfig {
            climate: crate::synth::ClimateConfig {
                sites: 3,
                years: 25,
                ..Default::default()
            },
            ..Default::default()
        };
        let ds = crate::synth::generate_dataset(&cfg).unwrap();
        let p = split_by_annual_temp(&ds, 0.15, 0.15).unwrap();
        let mut yearly: Vec<(i32, f64)> = (0..25)
            .map(|k| {
                let year = cfg.climate.first_year + k;
                let temps: Vec<f64> = ds
                    .records
                    .iter()
                    .filter(|r| r.year == year)
                    .map(|r| r.x[..365].iter().sum::<f64>() / 365.0)
                    .collect();
                (year, temps.iter().sum::<f64>() / temps.len() as f64)
            })
            .collect();
        yearly.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let test_years: Vec<i32> = yearly[..4].iter().map(|y| y.0).collect();
        for &i in &p.test {
            assert!(test_years.contains(&ds.records[i].year));
        }
        assert_eq!(p.test.len(), 4 * 3);
    }

    #[test]
    fn elevation_split_takes_highest_sites() {
        let rows: Vec<_> = (0..100).map(|k| (k + 1, 2000, 10.0 * f64::from(k), 0.0)).collect();
        let ds = toy(&rows);
        let p = split_by_elevation(&ds, 0.25, 0.15).unwrap();
        assert_partition(&p, 100);
        assert_eq!(p.test, (75..100).collect::<Vec<_>>());
        assert_eq!(p.val, (60..75).collect::<Vec<_>>());
        let max_train = p.train.iter().map(|&i| ds.records[i].elevation_m).fold(f64::MIN, f64::max);
        let min_test = p.test.iter().map(|&i| ds.records[i].elevation_m).fold(f64::MAX, f64::min);
        assert!(max_train <= min_test);
    }

    #[test]
    fn elevation_test_set_is_colder() {
        let cfg = crate::synth::DatasetConfig {
            climate: crate::synth::ClimateConfig {
                sites: 12,
                years: 8,
                ..Default::default()
            },
            ..Default::default()
        };
        let ds = crate::synth::generate_dataset(&cfg).unwrap();
        let p = split_by_elevation(&ds, 0.25, 0.15).unwrap();
        let stats = ShiftStats::compute(&ds, &p);
        assert!(stats.delta_temperature < 0.0);
        assert!(stats.delta_date > 0.0);
    }

    #[test]
    fn bad_fractions_are_rejected() {
        let ds = toy(&[(1, 2000, 0.0, 1.0)]);
        assert!(matches!(split_by_elevation(&ds, 0.6, 0.5), Err(Error::Config(_))));
        assert!(matches!(random_split(&ds, 0.0, 0.2, 0), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn every_split_partitions_its_input(
            temps in prop::collection::vec(-5.0f64..20.0, 12..60),
            test_frac in 0.1f64..0.4,
            val_frac in 0.1f64..0.4,
            seed in any::<u64>(),
        ) {
            let rows: Vec<_> = temps
                .iter()
                .enumerate()
                .map(|(i, &t)| ((i % 4) as u32, 1990 + (i / 4) as i32, (i % 4) as f64 * 300.0 + i as f64, t))
                .collect();
            let ds = toy(&rows);
            let specs = [
                SplitSpec::Chronological { train_end: 1991, val_end: 1992 },
                SplitSpec::AnnualTemperature { test_frac, val_frac },
                SplitSpec::Elevation { test_frac, val_frac },
                SplitSpec::Random { test_frac, val_frac, seed },
            ];
            for spec in specs {
                if let Ok(p) = split(&ds, &spec) {
                    assert_partition(&p, ds.len());
                }
            }
        }
    }
}
