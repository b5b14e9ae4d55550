//! District × year × indicator panels: CSV ingestion, validation, the year
//! scale and a synthetic logistic-growth generator.

pub mod reference;

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub use reference::{reference_tables, ReferenceTable, DISTRICTS};

/// Indicator columns, in CSV order.
pub const INDICATORS: [&str; 6] = [
    "toilet",
    "piped_water",
    "lpg",
    "pucca_house",
    "electricity",
    "education_secondary",
];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad header: expected `district,year,{}`, found `{found}`", INDICATORS.join(","))]
    Header { found: String },
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("line {line}, column {column}: value {value} outside [0, 1]")]
    OutOfRange {
        line: u64,
        column: String,
        value: f64,
    },
    #[error("line {line}: duplicate row for ({district}, {year})")]
    Duplicate {
        line: u64,
        district: String,
        year: f64,
    },
    #[error("invalid panel: {0}")]
    Invalid(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Affine map from calendar years onto `[0, 1]`, `year0 ↦ 0`, `year1 ↦ 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeScale {
    pub year0: f64,
    pub year1: f64,
}

impl Default for TimeScale {
    fn default() -> Self {
        Self {
            year0: 2007.0,
            year1: 2020.0,
        }
    }
}

impl TimeScale {
    pub fn normalize(&self, year: f64) -> f64 {
        (year - self.year0) / (self.year1 - self.year0)
    }

    pub fn denormalize(&self, t: f64) -> f64 {
        self.year0 + (self.year1 - self.year0) * t
    }
}

pub fn normalize_year(ts: &TimeScale, year: f64) -> f64 {
    ts.normalize(year)
}

pub fn denormalize_year(ts: &TimeScale, t: f64) -> f64 {
    ts.denormalize(t)
}

/// Observation tensor `[districts, years, indicators]` with a mask of
/// observed cells. Masked cells hold 0.0.
#[derive(Clone, Debug, PartialEq)]
pub struct IndicatorPanel {
    values: Tensor,
    mask: Vec<bool>,
    years: Vec<f64>,
    district_names: Vec<String>,
    indicator_names: Vec<String>,
}

impl IndicatorPanel {
    pub fn new(
        values: Tensor,
        mask: Vec<bool>,
        years: Vec<f64>,
        district_names: Vec<String>,
        indicator_names: Vec<String>,
    ) -> Result<Self, DataError> {
        let shape = [district_names.len(), years.len(), indicator_names.len()];
        if values.shape() != shape {
            return Err(DataError::Invalid(format!(
                "values shape {:?} does not match {shape:?}",
                values.shape()
            )));
        }
        if mask.len() != values.len() {
            return Err(DataError::Invalid("mask length".into()));
        }
        if years.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(DataError::Invalid("years must be strictly increasing".into()));
        }
        for (i, (&v, &m)) in values.data().iter().zip(&mask).enumerate() {
            if m && !(0.0..=1.0).contains(&v) {
                return Err(DataError::Invalid(format!("value {v} at flat index {i} outside [0, 1]")));
            }
            if !m && v != 0.0 {
                return Err(DataError::Invalid(format!("masked cell {i} must hold 0")));
            }
        }
        Ok(Self {
            values,
            mask,
            years,
            district_names,
            indicator_names,
        })
    }

    pub fn n_districts(&self) -> usize {
        self.district_names.len()
    }

    pub fn n_times(&self) -> usize {
        self.years.len()
    }

    pub fn n_indicators(&self) -> usize {
        self.indicator_names.len()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn years(&self) -> &[f64] {
        &self.years
    }

    pub fn district_names(&self) -> &[String] {
        &self.district_names
    }

    pub fn indicator_names(&self) -> &[String] {
        &self.indicator_names
    }

    fn index(&self, d: usize, t: usize, k: usize) -> usize {
        (d * self.n_times() + t) * self.n_indicators() + k
    }

    /// Observed value, or `None` when masked.
    pub fn get(&self, d: usize, t: usize, k: usize) -> Option<f64> {
        let i = self.index(d, t, k);
        self.mask[i].then(|| self.values.data()[i])
    }

    /// `[years, indicators]` slice of district `d` (masked cells as 0).
    pub fn district_values(&self, d: usize) -> &[f64] {
        let n = self.n_times() * self.n_indicators();
        &self.values.data()[d * n..(d + 1) * n]
    }

    pub fn district_mask(&self, d: usize) -> &[bool] {
        let n = self.n_times() * self.n_indicators();
        &self.mask[d * n..(d + 1) * n]
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn district_index(&self, name: &str) -> Option<usize> {
        self.district_names.iter().position(|n| n == name)
    }

    /// Normalized observation times under `ts`.
    pub fn times(&self, ts: &TimeScale) -> Vec<f64> {
        self.years.iter().map(|&y| ts.normalize(y)).collect()
    }
}

fn parse_cell(raw: &str, line: u64, column: &str) -> Result<Option<f64>, DataError> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(None);
    }
    let value: f64 = raw.parse().map_err(|_| DataError::Malformed {
        line,
        message: format!("column {column}: cannot parse `{raw}` as a number"),
    })?;
    if !(0.0..=1.0).contains(&value) {
        return Err(DataError::OutOfRange {
            line,
            column: column.to_string(),
            value,
        });
    }
    Ok(Some(value))
}

/// Reads a panel from CSV with header
/// `district,year,toilet,piped_water,lpg,pucca_house,electricity,education_secondary`.
/// Empty cells and missing (district, year) rows become masked entries.
/// Districts are ordered by name and years ascending, so row order in the
/// file does not matter.
pub fn read_panel<R: Read>(reader: R) -> Result<IndicatorPanel, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let expected: Vec<&str> = ["district", "year"].into_iter().chain(INDICATORS).collect();
    if header != expected {
        return Err(DataError::Header {
            found: header.join(","),
        });
    }

    struct Row {
        district: String,
        year: f64,
        cells: [Option<f64>; 6],
    }
    let mut rows: Vec<Row> = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != expected.len() {
            return Err(DataError::Malformed {
                line,
                message: format!("expected {} fields, found {}", expected.len(), record.len()),
            });
        }
        let district = record[0].trim().to_string();
        if district.is_empty() {
            return Err(DataError::Malformed {
                line,
                message: "empty district name".into(),
            });
        }
        let year: f64 = record[1].trim().parse().map_err(|_| DataError::Malformed {
            line,
            message: format!("cannot parse year `{}`", &record[1]),
        })?;
        if !year.is_finite() {
            return Err(DataError::Malformed {
                line,
                message: "non-finite year".into(),
            });
        }
        let mut cells = [None; 6];
        for (k, cell) in cells.iter_mut().enumerate() {
            *cell = parse_cell(&record[k + 2], line, INDICATORS[k])?;
        }
        if rows
            .iter()
            .any(|r| r.district == district && r.year == year)
        {
            return Err(DataError::Duplicate {
                line,
                district,
                year,
            });
        }
        rows.push(Row {
            district,
            year,
            cells,
        });
    }
    if rows.is_empty() {
        return Err(DataError::Invalid("no data rows".into()));
    }

    let mut districts: Vec<String> = rows.iter().map(|r| r.district.clone()).collect();
    districts.sort();
    districts.dedup();
    let mut years: Vec<f64> = rows.iter().map(|r| r.year).collect();
    years.sort_by(f64::total_cmp);
    years.dedup();

    let (nd, nt, ni) = (districts.len(), years.len(), INDICATORS.len());
    let mut values = vec![0.0; nd * nt * ni];
    let mut mask = vec![false; nd * nt * ni];
    for r in &rows {
        let d = districts.binary_search(&r.district).expect("collected above");
        let t = years
            .iter()
            .position(|&y| y == r.year)
            .expect("collected above");
        for (k, cell) in r.cells.iter().enumerate() {
            if let Some(v) = cell {
                let i = (d * nt + t) * ni + k;
                values[i] = *v;
                mask[i] = true;
            }
        }
    }
    IndicatorPanel::new(
        Tensor::new(vec![nd, nt, ni], values).map_err(|e| DataError::Invalid(e.to_string()))?,
        mask,
        years,
        districts,
        INDICATORS.iter().map(|s| s.to_string()).collect(),
    )
}

pub fn load_panel(path: &Path) -> Result<IndicatorPanel, DataError> {
    let file = std::fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    read_panel(std::io::BufReader::new(file))
}

/// Writes one row per (district, year); masked cells are left empty. Values
/// use the shortest representation that parses back to the same `f64`.
pub fn write_panel<W: Write>(panel: &IndicatorPanel, writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["district".to_string(), "year".to_string()];
    header.extend(panel.indicator_names().iter().cloned());
    w.write_record(&header)?;
    for (d, name) in panel.district_names().iter().enumerate() {
        for (t, year) in panel.years().iter().enumerate() {
            let mut rec = vec![name.clone(), year.to_string()];
            for k in 0..panel.n_indicators() {
                rec.push(panel.get(d, t, k).map(|v| v.to_string()).unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| DataError::Csv(e.into()))?;
    Ok(())
}

pub fn save_panel(panel: &IndicatorPanel, path: &Path) -> Result<(), DataError> {
    let file = std::fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    write_panel(panel, std::io::BufWriter::new(file))
}

/// Per-indicator (rate, midpoint) centres for the synthetic generator, on the
/// normalized time axis.
const SYNTH_PROFILES: [(f64, f64); 6] = [
    (3.0, 0.55),  // toilet
    (1.6, 1.25),  // piped_water
    (2.6, 0.95),  // lpg
    (2.2, 0.45),  // pucca_house
    (4.0, 0.05),  // electricity
    (1.3, 1.80),  // education_secondary
];

/// Synthetic panel observed at 2007, 2015 and 2020: each (district,
/// indicator) follows a logistic curve `1 / (1 + exp(−r (t − c)))` with a
/// district-specific rate `r` and midpoint `c`. Districts `0..30` reuse the
/// reference district names.
pub fn synthetic_panel(n_districts: usize, seed: u64) -> IndicatorPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ts = TimeScale::default();
    let years = vec![2007.0, 2015.0, 2020.0];
    let times: Vec<f64> = years.iter().map(|&y| ts.normalize(y)).collect();
    let ni = INDICATORS.len();
    let mut values = Vec::with_capacity(n_districts * years.len() * ni);
    let mut params = Vec::with_capacity(n_districts);
    for _ in 0..n_districts {
        let district: Vec<(f64, f64)> = SYNTH_PROFILES
            .iter()
            .map(|&(r, c)| (r * rng.gen_range(0.7..1.3), c + rng.gen_range(-0.3..0.3)))
            .collect();
        params.push(district);
    }
    for district in &params {
        for &t in &times {
            for &(r, c) in district {
                values.push(1.0 / (1.0 + (-r * (t - c)).exp()));
            }
        }
    }
    let names = (0..n_districts)
        .map(|d| match DISTRICTS.get(d) {
            Some(n) => n.to_string(),
            None => format!("District{:03}", d),
        })
        .collect();
    let n = values.len();
    IndicatorPanel::new(
        Tensor::new(vec![n_districts, years.len(), ni], values).expect("logistic values are finite"),
        vec![true; n],
        years,
        names,
        INDICATORS.iter().map(|s| s.to_string()).collect(),
    )
    .expect("synthetic panel is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str =
        "district,year,toilet,piped_water,lpg,pucca_house,electricity,education_secondary\n";

    #[test]
    fn year_scale_endpoints() {
        let ts = TimeScale::default();
        assert_eq!(normalize_year(&ts, 2007.0), 0.0);
        assert_eq!(normalize_year(&ts, 2020.0), 1.0);
        assert!((normalize_year(&ts, 2026.0) - 19.0 / 13.0).abs() < 1e-15);
        assert!((normalize_year(&ts, 2026.0) - 1.4615385).abs() < 1e-7);
        assert_eq!(normalize_year(&ts, 2015.0), 8.0 / 13.0);
        assert_eq!(denormalize_year(&ts, 0.0), 2007.0);
        assert_eq!(denormalize_year(&ts, 1.0), 2020.0);
        assert_eq!(denormalize_year(&ts, 0.5), 2013.5);
    }

    #[test]
    fn full_panel_loads() {
        let p = synthetic_panel(30, 0);
        let mut buf = Vec::new();
        write_panel(&p, &mut buf).unwrap();
        let q = read_panel(buf.as_slice()).unwrap();
        assert_eq!(q.values().shape(), &[30, 3, 6]);
        assert!(q.mask().iter().all(|&m| m));
    }

    #[test]
    fn blank_cell_is_masked() {
        let csv = format!("{HEADER}A,2007,0.1,,0.3,0.4,0.5,0.6\nA,2020,0.2,0.3,0.4,0.5,0.6,0.7\n");
        let p = read_panel(csv.as_bytes()).unwrap();
        assert_eq!(p.get(0, 0, 1), None);
        assert_eq!(p.get(0, 0, 0), Some(0.1));
        assert_eq!(p.observed_count(), 11);
    }

    #[test]
    fn out_of_range_value_names_row_and_column() {
        let csv = format!("{HEADER}A,2007,0.1,0.2,0.3,0.4,0.5,0.6\nA,2015,0.1,0.2,1.2,0.4,0.5,0.6\n");
        match read_panel(csv.as_bytes()).unwrap_err() {
            DataError::OutOfRange {
                line,
                column,
                value,
            } => {
                assert_eq!(line, 3);
                assert_eq!(column, "lpg");
                assert_eq!(value, 1.2);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn duplicates_and_malformed_rows_are_rejected() {
        let dup = format!("{HEADER}A,2007,0.1,0.2,0.3,0.4,0.5,0.6\nA,2007,0.1,0.2,0.3,0.4,0.5,0.6\n");
        assert!(matches!(
            read_panel(dup.as_bytes()),
            Err(DataError::Duplicate { line: 3, .. })
        ));
        let short = format!("{HEADER}A,2007,0.1,0.2\n");
        assert!(matches!(
            read_panel(short.as_bytes()),
            Err(DataError::Malformed { line: 2, .. })
        ));
        let junk = format!("{HEADER}A,2007,abc,0.2,0.3,0.4,0.5,0.6\n");
        assert!(matches!(
            read_panel(junk.as_bytes()),
            Err(DataError::Malformed { line: 2, .. })
        ));
        assert!(matches!(
            read_panel("district,year,x\n".as_bytes()),
            Err(DataError::Header { .. })
        ));
    }

    #[test]
    fn row_order_does_not_matter() {
        let a = format!("{HEADER}B,2020,0.1,0.2,0.3,0.4,0.5,0.6\nA,2007,0.6,0.5,0.4,0.3,0.2,0.1\n");
        let b = format!("{HEADER}A,2007,0.6,0.5,0.4,0.3,0.2,0.1\nB,2020,0.1,0.2,0.3,0.4,0.5,0.6\n");
        let (pa, pb) = (read_panel(a.as_bytes()).unwrap(), read_panel(b.as_bytes()).unwrap());
        assert_eq!(pa, pb);
        assert_eq!(pa.district_names(), &["A".to_string(), "B".to_string()]);
        // (A, 2020) and (B, 2007) are absent rows, so fully masked
        assert_eq!(pa.observed_count(), 12);
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = load_panel(Path::new("/definitely/not/here.csv")).unwrap_err();
        assert!(matches!(err, DataError::Io { .. }));
        assert!(err.to_string().contains("No such file"));
    }

    #[test]
    fn synthetic_panel_is_seeded_and_bounded() {
        let a = synthetic_panel(5, 3);
        assert_eq!(a, synthetic_panel(5, 3));
        assert_ne!(a, synthetic_panel(5, 4));
        assert!(a.values().data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(a.district_names()[0], "Angul");
        assert_eq!(synthetic_panel(31, 0).district_names()[30], "District030");
    }
}
