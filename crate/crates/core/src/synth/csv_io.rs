use std::path::Path;

use super::{Dataset, SampleRecord};
use crate::error::{Error, Result};

const META: [&str; 4] = ["site_id", "year", "elevation_m", "latitude_deg"];

/// One row per site-year: metadata, `y_species_1..S` (empty = missing),
/// then `x_<channel>_<day>` channel-major. Floats are written in shortest
/// round-trip form.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    ds.validate()?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = META.iter().map(|s| s.to_string()).collect();
    header.extend((1..=ds.species).map(|k| format!("y_species_{k}")));
    for name in &ds.channel_names {
        header.extend((0..ds.days).map(|d| format!("x_{name}_{d}")));
    }
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for r in &ds.records {
        row.clear();
        row.push(r.site_id.to_string());
        row.push(r.year.to_string());
        row.push(r.elevation_m.to_string());
        row.push(r.latitude_deg.to_string());
        row.extend(r.labels.iter().map(|l| l.map(|v| v.to_string()).unwrap_or_default()));
        row.extend(r.x.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

struct Layout {
    species: usize,
    channel_names: Vec<String>,
    days: usize,
}

fn parse_header(header: &csv::StringRecord) -> Result<Layout> {
    let bad = |msg: String| Error::Csv { line: 1, msg };
    for (i, name) in META.iter().enumerate() {
        if header.get(i) != Some(*name) {
            return Err(bad(format!("column {} must be `{name}`", i + 1)));
        }
    }
    let mut species = 0;
    while header.get(META.len() + species) == Some(format!("y_species_{}", species + 1).as_str()) {
        species += 1;
    }
    let mut channel_names: Vec<String> = Vec::new();
    let mut days_per_channel: Vec<usize> = Vec::new();
    for (col, field) in header.iter().enumerate().skip(META.len() + species) {
        let (channel, day) = field
            .strip_prefix("x_")
            .and_then(|rest| rest.rsplit_once('_'))
            .and_then(|(c, d)| Some((c, d.parse::<usize>().ok()?)))
            .ok_or_else(|| bad(format!("column {} `{field}` is not x_<channel>_<day>", col + 1)))?;
        if channel_names.last().map(String::as_str) != Some(channel) {
            if channel_names.iter().any(|c| c == channel) {
                return Err(bad(format!("channel `{channel}` columns are not contiguous")));
            }
            channel_names.push(channel.to_string());
            days_per_channel.push(0);
        }
        let expected = days_per_channel.last_mut().expect("channel pushed");
        if day != *expected {
            return Err(bad(format!("column `{field}`: expected day {expected}")));
        }
        *expected += 1;
    }
    let days = *days_per_channel.first().ok_or_else(|| bad("no series columns".into()))?;
    if days_per_channel.iter().any(|&d| d != days) {
        return Err(bad("channels have different lengths".into()));
    }
    Ok(Layout {
        species,
        channel_names,
        days,
    })
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let header = reader.headers()?.clone();
    if header.is_empty() {
        return Err(Error::Csv {
            line: 1,
            msg: "missing header row".into(),
        });
    }
    let layout = parse_header(&header)?;
    let width = header.len();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |msg: String| Error::Csv { line, msg };
        if row.len() != width {
            return Err(bad(format!("{} fields, header has {width}", row.len())));
        }
        let num = |col: usize| -> Result<f64> {
            row[col]
                .trim()
                .parse::<f64>()
                .map_err(|_| bad(format!("column `{}`: invalid number `{}`", &header[col], &row[col])))
        };
        let site_id = row[0]
            .trim()
            .parse()
            .map_err(|_| bad(format!("invalid site_id `{}`", &row[0])))?;
        let year = row[1].trim().parse().map_err(|_| bad(format!("invalid year `{}`", &row[1])))?;
        let labels = (0..layout.species)
            .map(|k| {
                let col = META.len() + k;
                if row[col].trim().is_empty() {
                    Ok(None)
                } else {
                    num(col).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let x = (META.len() + layout.species..width).map(num).collect::<Result<Vec<_>>>()?;
        records.push(SampleRecord {
            site_id,
            year,
            elevation_m: num(2)?,
            latitude_deg: num(3)?,
            x,
            labels,
        });
    }
    Ok(Dataset {
        channel_names: layout.channel_names,
        days: layout.days,
        species: layout.species,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::split::tests::toy;
    use std::fs;

    #[test]
    fn round_trip_is_lossless() {
        let mut ds = toy(&[(1, 1999, 432.1, 1.0 / 3.0), (2, 2000, 0.0, -7.25)]);
        ds.records[1].labels[0] = None;
        ds.records[0].x[4] = 1e-300;
        ds.records[0].x[5] = 0.1 + 0.2;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_csv(&ds, &path).unwrap();
        assert_eq!(read_csv(&path).unwrap(), ds);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("site_id,year,elevation_m,latitude_deg,y_species_1,x_tmean_0,"));
    }

    #[test]
    fn short_row_names_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_csv(&toy(&[(1, 1999, 0.0, 1.0), (2, 2000, 0.0, 2.0)]), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let cut = lines[2].rfind(',').unwrap();
        lines[2].truncate(cut);
        fs::write(&path, lines.join("\n")).unwrap();
        let err = read_csv(&path).unwrap_err();
        assert!(matches!(err, Error::Csv { line: 3, .. }), "{err}");
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn invalid_number_names_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_csv(&toy(&[(1, 1999, 0.0, 1.0)]), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace(",1,1,1,0,1,2", ",1,x,1,0,1,2");
        fs::write(&path, text).unwrap();
        assert!(matches!(read_csv(&path), Err(Error::Csv { line: 2, .. })));
    }

    #[test]
    fn header_only_file_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "site_id,year,elevation_m,latitude_deg,y_species_1,y_species_2,x_a_0,x_a_1,x_b_0,x_b_1\n")
            .unwrap();
        let ds = read_csv(&path).unwrap();
        assert!(ds.is_empty());
        assert_eq!((ds.species, ds.days), (2, 2));
        assert_eq!(ds.channel_names, vec!["a", "b"]);
    }

    #[test]
    fn malformed_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "site_id,year,elevation_m,latitude_deg,x_a_0,x_a_2\n").unwrap();
        assert!(matches!(read_csv(&path), Err(Error::Csv { line: 1, .. })));
        fs::write(&path, "").unwrap();
        assert!(read_csv(&path).is_err());
    }
}
