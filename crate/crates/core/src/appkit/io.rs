//! CSV panel ingestion and output.
//!
//! Panels are `T × N` with a header row. A leading column is read as time
//! labels when its header is `date`, `time`, `period` or `month`, or when any
//! of its body cells is not a number. Empty and `NA` cells are missing.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::estimate::{PanelDataset, PanelRole};

/// Columns with a sample standard deviation at or below this are rejected by
/// `standardize`.
pub const SD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Subtract the column mean and divide by the sample standard deviation.
    pub standardize: bool,
    /// Subtract the column mean.
    pub demean: bool,
    /// Replace missing cells by the mean of the observed cells in the column.
    pub impute_mean: bool,
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("na")
}

fn parse_number(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn is_date_header(h: &str) -> bool {
    matches!(
        h.trim().to_ascii_lowercase().as_str(),
        "date" | "time" | "period" | "month"
    )
}

/// Reads a panel; the id defaults to the file stem.
pub fn load_panel_csv(path: &Path, role: PanelRole, options: LoadOptions) -> Result<PanelDataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read '{}': {e}", path.display())))?;
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("panel")
        .to_string();
    parse_panel_csv(&text, &id, role, options)
        .map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
            other => other,
        })
}

/// [`load_panel_csv`] on in-memory text.
pub fn parse_panel_csv(text: &str, id: &str, role: PanelRole, options: LoadOptions) -> Result<PanelDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.is_empty() {
        return Err(Error::Data("missing header row".into()));
    }
    let mut rows: Vec<Vec<String>> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Data(format!("malformed CSV: {e}")))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    if rows.len() < 2 {
        return Err(Error::Data(format!("need at least 2 data rows, found {}", rows.len())));
    }

    let has_dates = is_date_header(&header[0])
        || rows
            .iter()
            .any(|r| !is_missing(&r[0]) && parse_number(&r[0]).is_none());
    let first = usize::from(has_dates);
    let n = header.len() - first;
    if n == 0 {
        return Err(Error::Data("no numeric columns".into()));
    }

    let t = rows.len();
    let mut cells: Vec<Option<f64>> = Vec::with_capacity(t * n);
    for (i, r) in rows.iter().enumerate() {
        for (j, cell) in r[first..].iter().enumerate() {
            if is_missing(cell) {
                if !options.impute_mean {
                    return Err(Error::Data(format!(
                        "missing value at row {}, column '{}' (enable mean imputation to fill it)",
                        i + 1,
                        header[first + j]
                    )));
                }
                cells.push(None);
            } else {
                let v = parse_number(cell).ok_or_else(|| {
                    Error::Data(format!(
                        "non-numeric value '{cell}' at row {}, column '{}'",
                        i + 1,
                        header[first + j]
                    ))
                })?;
                cells.push(Some(v));
            }
        }
    }

    let mut data = DMatrix::zeros(t, n);
    for j in 0..n {
        let observed: Vec<f64> = (0..t).filter_map(|i| cells[i * n + j]).collect();
        if observed.is_empty() {
            return Err(Error::Data(format!("column '{}' has no observed values", header[first + j])));
        }
        let fill = observed.iter().sum::<f64>() / observed.len() as f64;
        for i in 0..t {
            data[(i, j)] = cells[i * n + j].unwrap_or(fill);
        }
    }

    let mut labels: Option<Vec<String>> = has_dates.then(|| rows.iter().map(|r| r[0].clone()).collect());
    if let Some(l) = &mut labels {
        if l.windows(2).all(|w| w[0] > w[1]) {
            l.reverse();
            let rev: Vec<usize> = (0..t).rev().collect();
            data = data.select_rows(rev.iter());
        }
    }

    if options.standardize || options.demean {
        for j in 0..n {
            let mut col = data.column_mut(j);
            let mean = col.mean();
            col.add_scalar_mut(-mean);
            if options.standardize {
                let sd = (col.norm_squared() / (t - 1) as f64).sqrt();
                if sd <= SD_FLOOR {
                    return Err(Error::Data(format!(
                        "column '{}' has zero variance and cannot be standardized",
                        header[first + j]
                    )));
                }
                col /= sd;
            }
        }
    }

    let panel = PanelDataset::new(id, role, data)?;
    match labels {
        Some(l) => panel.with_time_labels(l),
        None => Ok(panel),
    }
}

/// Writes a panel with a header `x1..xN` (preceded by `date` when the panel
/// carries time labels); values use the shortest exact representation.
pub fn panel_to_csv(panel: &PanelDataset) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let labels = panel.time_labels();
    let mut header: Vec<String> = Vec::new();
    if labels.is_some() {
        header.push("date".into());
    }
    header.extend((1..=panel.units()).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for i in 0..panel.periods() {
        let mut rec: Vec<String> = Vec::new();
        if let Some(l) = labels {
            rec.push(l[i].clone());
        }
        rec.extend(panel.data().row(i).iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

pub fn write_panel_csv(path: &Path, panel: &PanelDataset) -> Result<()> {
    std::fs::write(path, panel_to_csv(panel)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, options: LoadOptions) -> Result<PanelDataset> {
        parse_panel_csv(text, "p", PanelRole::Target, options)
    }

    #[test]
    fn plain_numeric_panel() {
        let p = parse("a,b\n1,2\n3,4\n5,6\n", LoadOptions::default()).unwrap();
        assert_eq!(p.periods(), 3);
        assert_eq!(p.units(), 2);
        assert_eq!(p.data()[(2, 1)], 6.0);
        assert!(p.time_labels().is_none());
    }

    #[test]
    fn date_column_detection_and_ordering() {
        let p = parse("when,a,b\n2020-03,1,0\n2020-02,2,0\n2020-01,3,0\n", LoadOptions::default()).unwrap();
        assert_eq!(p.time_labels().unwrap(), &["2020-01", "2020-02", "2020-03"]);
        assert_eq!(p.data().column(0).as_slice(), &[3.0, 2.0, 1.0]);
        // numeric labels under a date-like header
        let p = parse("period,a,b\n1,10,0\n2,20,0\n", LoadOptions::default()).unwrap();
        assert_eq!(p.units(), 2);
        assert_eq!(p.time_labels().unwrap(), &["1", "2"]);
    }

    #[test]
    fn standardize_constant_column_fails() {
        let err = parse("a,b\n1,1\n1,2\n1,3\n", LoadOptions { standardize: true, ..Default::default() }).unwrap_err();
        assert!(err.to_string().contains("zero variance"));
    }

    #[test]
    fn standardize_and_demean() {
        let p = parse("a,b\n1,0\n2,2\n3,4\n", LoadOptions { standardize: true, ..Default::default() }).unwrap();
        assert_eq!(p.data().column(0).as_slice(), &[-1.0, 0.0, 1.0]);
        assert_eq!(p.data().column(1).as_slice(), &[-1.0, 0.0, 1.0]);
        let p = parse("a,b\n1,0\n2,0\n6,0\n", LoadOptions { demean: true, ..Default::default() }).unwrap();
        assert_eq!(p.data().column(0).as_slice(), &[-2.0, -1.0, 3.0]);
    }

    #[test]
    fn missing_cells() {
        let text = "a,b\n1,2\n,4\n3,NA\n";
        assert!(parse(text, LoadOptions::default()).is_err());
        let p = parse(text, LoadOptions { impute_mean: true, ..Default::default() }).unwrap();
        assert_eq!(p.data()[(1, 0)], 2.0);
        assert_eq!(p.data()[(2, 1)], 3.0);
    }

    #[test]
    fn malformed_inputs() {
        assert!(parse("a,b\n1,2\n3\n", LoadOptions::default()).is_err());
        assert!(parse("a,b\n1,2\n", LoadOptions::default()).is_err());
        assert!(parse("d,a\nx,1\ny,oops\n", LoadOptions::default()).is_err());
        assert!(parse("", LoadOptions::default()).is_err());
    }

    #[test]
    fn round_trip_is_exact() {
        let data = DMatrix::from_row_slice(3, 2, &[0.1, -2.5e-17, 1.0 / 3.0, 7.0, f64::MAX, -0.0]);
        let p = PanelDataset::new("p", PanelRole::Target, data.clone()).unwrap();
        let back = parse(&panel_to_csv(&p).unwrap(), LoadOptions::default()).unwrap();
        assert_eq!(back.data(), &data);
        let labelled = p
            .with_time_labels(vec!["t1".into(), "t2".into(), "t3".into()])
            .unwrap();
        let back = parse(&panel_to_csv(&labelled).unwrap(), LoadOptions::default()).unwrap();
        assert_eq!(back.data(), &data);
        assert_eq!(back.time_labels().unwrap(), labelled.time_labels().unwrap());
    }
}
