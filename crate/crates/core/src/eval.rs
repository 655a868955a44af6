//! Regression metrics, per-cell result tables, aggregation over seeds and
//! species, and scatter output for plotting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Coefficient of determination; unclamped, negative when worse than the
    /// mean predictor.
    pub r2: f64,
    pub rmse: f64,
    pub mae: f64,
    pub n: usize,
}

/// R² = 1 − SS_res/SS_tot, RMSE and MAE over aligned pairs.
pub fn metrics(truth: &[f64], pred: &[f64]) -> Result<Metrics> {
    if truth.len() != pred.len() {
        return Err(Error::Metric(format!("{} truths vs {} predictions", truth.len(), pred.len())));
    }
    let n = truth.len();
    if n < 2 {
        return Err(Error::Metric(format!("need at least 2 pairs, got {n}")));
    }
    if pred.iter().any(|p| !p.is_finite()) {
        return Err(Error::Metric("non-finite prediction".into()));
    }
    let mean = truth.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Metric("R² undefined for constant truths".into()));
    }
    let ss_res: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p).powi(2)).sum();
    let abs: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p).abs()).sum();
    Ok(Metrics {
        r2: 1.0 - ss_res / ss_tot,
        rmse: (ss_res / n as f64).sqrt(),
        mae: abs / n as f64,
        n,
    })
}

/// Observed `(truth, prediction)` pairs of one species.
pub fn species_pairs(labels: &[&[Option<f64>]], preds: &[Vec<f64>], species: usize) -> (Vec<f64>, Vec<f64>) {
    labels
        .iter()
        .zip(preds)
        .filter_map(|(l, p)| l[species].map(|t| (t, p[species])))
        .unzip()
}

/// Metrics per species on that species' observed subset; `None` where a
/// species has too few observations or constant truths.
pub fn per_species(labels: &[&[Option<f64>]], preds: &[Vec<f64>], species: usize) -> Vec<Option<Metrics>> {
    (0..species)
        .map(|s| {
            let (t, p) = species_pairs(labels, preds, s);
            metrics(&t, &p).ok()
        })
        .collect()
}

/// RMSE averaged over the species that have at least one observation.
pub fn mean_species_rmse(labels: &[&[Option<f64>]], preds: &[Vec<f64>], species: usize) -> f64 {
    let rmses: Vec<f64> = (0..species)
        .filter_map(|s| {
            let (t, p) = species_pairs(labels, preds, s);
            (!t.is_empty()).then(|| {
                (t.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / t.len() as f64).sqrt()
            })
        })
        .collect();
    if rmses.is_empty() {
        f64::NAN
    } else {
        rmses.iter().sum::<f64>() / rmses.len() as f64
    }
}

/// One (method, split, species, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub split: String,
    pub species: String,
    pub seed: u64,
    pub r2: f64,
    pub rmse: f64,
    pub mae: f64,
    pub n: usize,
}

impl MetricRow {
    pub fn new(method: &str, split: &str, species: &str, seed: u64, m: Metrics) -> Self {
        Self {
            method: method.into(),
            split: split.into(),
            species: species.into(),
            seed,
            r2: m.r2,
            rmse: m.rmse,
            mae: m.mae,
            n: m.n,
        }
    }
}

/// Aggregate of one (method, split) group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub split: String,
    pub cells: usize,
    pub seeds: usize,
    pub r2: f64,
    /// Sample standard deviation of R² over all (seed × species) cells.
    pub r2_std: f64,
    /// Sample standard deviation over seeds of the per-seed mean R².
    pub r2_seed_std: f64,
    pub rmse: f64,
    pub mae: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n − 1); zero for a single value.
pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Unweighted means over cells, grouped by (method, split) in sorted order.
/// Within a group, cells are ordered by (seed, species) before summation so
/// the result does not depend on row order.
pub fn aggregate(rows: &[MetricRow]) -> Vec<Summary> {
    let mut groups: BTreeMap<(&str, &str), Vec<&MetricRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((&r.method, &r.split)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((method, split), mut cells)| {
            cells.sort_by(|a, b| (a.seed, &a.species).cmp(&(b.seed, &b.species)));
            let r2: Vec<f64> = cells.iter().map(|c| c.r2).collect();
            let mut per_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
            for c in &cells {
                per_seed.entry(c.seed).or_default().push(c.r2);
            }
            let seed_means: Vec<f64> = per_seed.values().map(|v| mean(v)).collect();
            Summary {
                method: method.into(),
                split: split.into(),
                cells: cells.len(),
                seeds: per_seed.len(),
                r2: mean(&r2),
                r2_std: sample_std(&r2),
                r2_seed_std: sample_std(&seed_means),
                rmse: mean(&cells.iter().map(|c| c.rmse).collect::<Vec<_>>()),
                mae: mean(&cells.iter().map(|c| c.mae).collect::<Vec<_>>()),
            }
        })
        .collect()
}

pub fn write_cells(rows: &[MetricRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cells(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Text table with one line per (method, split): R² (std), RMSE, MAE.
pub fn render_report(summaries: &[Summary]) -> String {
    let splits: BTreeSet<&str> = summaries.iter().map(|s| s.split.as_str()).collect();
    let mut methods: Vec<&str> = Vec::new();
    for s in summaries {
        if !methods.contains(&s.method.as_str()) {
            methods.push(&s.method);
        }
    }
    let mut out = String::new();
    out.push_str("# Means over (seed x species) cells; brackets: sample std (n-1) of R2 over the same cells.\n");
    out.push_str("# seed-std: sample std over seeds of the per-seed mean R2.\n");
    let _ = write!(out, "{:<14}", "method");
    for split in &splits {
        let _ = write!(out, " | {:^42}", split);
    }
    out.push('\n');
    let _ = write!(out, "{:<14}", "");
    for _ in &splits {
        let _ = write!(out, " | {:>16} {:>8} {:>7} {:>8}", "R2 (std)", "RMSE", "MAE", "seed-std");
    }
    out.push('\n');
    for method in methods {
        let _ = write!(out, "{method:<14}");
        for split in &splits {
            match summaries.iter().find(|s| s.method == method && s.split == *split) {
                Some(s) => {
                    let r2 = format!("{:.3} ({:.3})", s.r2, s.r2_std);
                    let _ = write!(out, " | {r2:>16} {:>8.3} {:>7.3} {:>8.3}", s.rmse, s.mae, s.r2_seed_std);
                }
                None => {
                    let _ = write!(out, " | {:>42}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

/// One scatter point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub truth: f64,
    pub pred: f64,
    pub species: String,
}

const SCATTER_NOTE: &str = "# reference: identity line pred = truth";

/// CSV of `(truth, pred, species)` preceded by a comment line describing
/// the identity reference.
pub fn emit_scatter(points: &[ScatterPoint], path: impl AsRef<Path>) -> Result<()> {
    let mut file = fs::File::create(path)?;
    writeln!(file, "{SCATTER_NOTE}")?;
    let mut w = csv::Writer::from_writer(file);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scatter(path: impl AsRef<Path>) -> Result<Vec<ScatterPoint>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_and_mean_predictions() {
        let t = [1.0, 4.0, 2.0, 8.0];
        let m = metrics(&t, &t).unwrap();
        assert_eq!((m.r2, m.rmse, m.mae, m.n), (1.0, 0.0, 0.0, 4));
        let m = metrics(&t, &[3.75; 4]).unwrap();
        assert!(m.r2.abs() < 1e-15);
    }

    #[test]
    fn hand_computed_example() {
        let m = metrics(&[100.0, 110.0, 120.0], &[102.0, 108.0, 123.0]).unwrap();
        assert!((m.r2 - (1.0 - 17.0 / 200.0)).abs() < 1e-12);
        assert!((m.rmse - (17.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((m.mae - 7.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn r2_is_not_clamped() {
        let m = metrics(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert_eq!(m.r2, -3.0);
    }

    #[test]
    fn degenerate_inputs_error() {
        assert!(metrics(&[5.0, 5.0], &[1.0, 2.0]).is_err());
        assert!(metrics(&[5.0], &[1.0]).is_err());
        assert!(metrics(&[1.0, 2.0], &[1.0]).is_err());
    }

    fn row(method: &str, seed: u64, species: &str, r2: f64) -> MetricRow {
        MetricRow {
            method: method.into(),
            split: "s".into(),
            species: species.into(),
            seed,
            r2,
            rmse: 1.0 + r2,
            mae: 0.5 + r2,
            n: 10,
        }
    }

    #[test]
    fn aggregate_single_and_pair() {
        let s = aggregate(&[row("a", 0, "x", 0.4)]);
        assert_eq!((s[0].r2, s[0].r2_std, s[0].rmse), (0.4, 0.0, 1.4));
        let s = aggregate(&[row("a", 0, "x", 0.4), row("a", 1, "x", 0.6)]);
        assert!((s[0].r2 - 0.5).abs() < 1e-15);
        assert!((s[0].r2_std - 0.02f64.sqrt()).abs() < 1e-15);
        assert!((s[0].r2_seed_std - 0.02f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn seed_std_uses_per_seed_means() {
        let rows = [row("a", 0, "x", 0.0), row("a", 0, "y", 1.0), row("a", 1, "x", 0.5), row("a", 1, "y", 0.5)];
        let s = &aggregate(&rows)[0];
        assert_eq!(s.seeds, 2);
        assert_eq!(s.r2_seed_std, 0.0);
        assert!(s.r2_std > 0.0);
    }

    #[test]
    fn cells_and_scatter_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![row("a", 0, "x", 1.0 / 3.0), row("b", 2, "y", -0.2)];
        write_cells(&rows, dir.path().join("cells.csv")).unwrap();
        assert_eq!(read_cells(dir.path().join("cells.csv")).unwrap(), rows);
        let points: Vec<ScatterPoint> = (0..5)
            .map(|i| ScatterPoint {
                truth: 100.0 + f64::from(i),
                pred: 101.5 + 0.1 * f64::from(i * i),
                species: "larch".into(),
            })
            .collect();
        let path = dir.path().join("scatter.csv");
        emit_scatter(&points, &path).unwrap();
        assert!(fs::read_to_string(&path).unwrap().starts_with("# reference"));
        assert_eq!(read_scatter(&path).unwrap(), points);
    }

    #[test]
    fn report_lists_every_group() {
        let text = render_report(&aggregate(&[row("vanilla", 0, "x", 0.4), row("miranda", 0, "x", 0.5)]));
        assert!(text.contains("vanilla") && text.contains("miranda") && text.contains("sample std"));
    }

    proptest! {
        #[test]
        fn translation_leaves_metrics_unchanged(
            pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..30),
            shift in -1000.0f64..1000.0,
        ) {
            let (t, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assume!(t.iter().any(|v| (v - t[0]).abs() > 1e-3));
            let a = metrics(&t, &p).unwrap();
            let ts: Vec<f64> = t.iter().map(|v| v + shift).collect();
            let ps: Vec<f64> = p.iter().map(|v| v + shift).collect();
            let b = metrics(&ts, &ps).unwrap();
            prop_assert!((a.rmse - b.rmse).abs() <= 1e-9 * (1.0 + a.rmse));
            prop_assert!((a.mae - b.mae).abs() <= 1e-9 * (1.0 + a.mae));
            prop_assert!((a.r2 - b.r2).abs() <= 1e-6 * (1.0 + a.r2.abs()));
            prop_assert!(a.r2 <= 1.0 && a.rmse >= a.mae && a.mae >= 0.0);
        }

        #[test]
        fn aggregation_ignores_row_order(r2s in prop::collection::vec(-1.0f64..1.0, 1..12), rot in 0usize..12) {
            let rows: Vec<MetricRow> = r2s
                .iter()
                .enumerate()
                .map(|(i, &r)| row(if i % 2 == 0 { "a" } else { "b" }, (i / 2) as u64, "x", r))
                .collect();
            let mut shuffled = rows.clone();
            shuffled.rotate_left(rot % rows.len());
            shuffled.reverse();
            prop_assert_eq!(aggregate(&rows), aggregate(&shuffled));
        }
    }
}
