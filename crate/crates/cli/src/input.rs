//! CSV ingestion. Every value must be present and numeric; binary columns
//! must hold 0 or 1. Errors name the offending column and data row (1-based,
//! header excluded).

use std::fs::File;
use std::io::Read;
use std::path::Path;

use gbcee::{Dataset, VarType};
use nalgebra::DMatrix;

use crate::CliError;

#[derive(Debug, Clone)]
pub struct ColumnSpec {
    pub outcome: String,
    pub exposure: String,
    pub covariates: Vec<String>,
    pub outcome_type: VarType,
    pub exposure_type: VarType,
}

const MISSING: [&str; 5] = ["", "na", "nan", "null", "."];

fn locate(headers: &csv::StringRecord, name: &str) -> Result<usize, CliError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| CliError::Input(format!("column `{name}` not found in header")))
}

fn parse_cell(raw: &str, column: &str, row: usize, kind: VarType) -> Result<f64, CliError> {
    let s = raw.trim();
    if MISSING.contains(&s.to_ascii_lowercase().as_str()) {
        return Err(CliError::Input(format!(
            "row {row}: column `{column}` is missing a value"
        )));
    }
    let v: f64 = s.parse().map_err(|_| {
        CliError::Input(format!("row {row}: column `{column}` has non-numeric value `{s}`"))
    })?;
    if !v.is_finite() {
        return Err(CliError::Input(format!(
            "row {row}: column `{column}` has non-finite value `{s}`"
        )));
    }
    if kind == VarType::Binary && v != 0.0 && v != 1.0 {
        return Err(CliError::Input(format!(
            "row {row}: binary column `{column}` has value `{s}`; expected 0 or 1"
        )));
    }
    Ok(v)
}

pub fn read_dataset(path: &Path, spec: &ColumnSpec) -> Result<Dataset, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::Io(format!("cannot open {}: {e}", path.display())))?;
    parse_dataset(file, spec)
}

pub fn parse_dataset<R: Read>(reader: R, spec: &ColumnSpec) -> Result<Dataset, CliError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CliError::Input(format!("cannot read header: {e}")))?
        .clone();

    let mut names = vec![spec.outcome.as_str(), spec.exposure.as_str()];
    names.extend(spec.covariates.iter().map(String::as_str));
    for (i, a) in names.iter().enumerate() {
        if names[..i].contains(a) {
            return Err(CliError::Input(format!("column `{a}` is used more than once")));
        }
    }
    let yi = locate(&headers, &spec.outcome)?;
    let xi = locate(&headers, &spec.exposure)?;
    let ui: Vec<usize> = spec
        .covariates
        .iter()
        .map(|c| locate(&headers, c))
        .collect::<Result<_, _>>()?;

    let m = ui.len();
    let mut y = Vec::new();
    let mut x = Vec::new();
    let mut u = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| CliError::Input(format!("row {row}: {e}")))?;
        let cell = |j: usize| rec.get(j).unwrap_or("");
        y.push(parse_cell(cell(yi), &spec.outcome, row, spec.outcome_type)?);
        x.push(parse_cell(cell(xi), &spec.exposure, row, spec.exposure_type)?);
        for (&j, name) in ui.iter().zip(&spec.covariates) {
            u.push(parse_cell(cell(j), name, row, VarType::Continuous)?);
        }
    }
    let n = y.len();
    let u = DMatrix::from_row_slice(n, m, &u);
    Dataset::with_names(
        y,
        x,
        u,
        spec.outcome_type,
        spec.exposure_type,
        spec.covariates.clone(),
    )
    .map_err(|e| CliError::Input(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(binary_y: bool) -> ColumnSpec {
        ColumnSpec {
            outcome: "y".into(),
            exposure: "x".into(),
            covariates: vec!["u".into()],
            outcome_type: if binary_y { VarType::Binary } else { VarType::Continuous },
            exposure_type: VarType::Binary,
        }
    }

    #[test]
    fn reads_columns_by_name() {
        let csv = "u,x,y\n0.5,1,2.0\n-1,0,1.5\n2,1,0.1\n";
        let d = parse_dataset(csv.as_bytes(), &spec(false)).unwrap();
        assert_eq!(d.n(), 3);
        assert_eq!(d.x(), &[1.0, 0.0, 1.0]);
        assert_eq!(d.y(), &[2.0, 1.5, 0.1]);
        assert_eq!(d.covariate(0), &[0.5, -1.0, 2.0]);
        assert_eq!(d.covariate_names(), &["u".to_string()]);
    }

    #[test]
    fn rejects_non_binary_value_with_row() {
        let csv = "y,x,u\n1,0,0.1\n0,2,0.3\n";
        let err = parse_dataset(csv.as_bytes(), &spec(true)).unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("`x`"), "{err}");
    }

    #[test]
    fn rejects_missing_value_with_row() {
        let csv = "y,x,u\n1,0,0.1\n0,1,NA\n1,1,\n";
        let err = parse_dataset(csv.as_bytes(), &spec(false)).unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("`u`") && err.contains("missing"), "{err}");
    }

    #[test]
    fn rejects_unknown_and_repeated_columns() {
        let csv = "y,x,u\n1,0,0.1\n0,1,0.2\n";
        let mut s = spec(false);
        s.covariates = vec!["w".into()];
        assert!(parse_dataset(csv.as_bytes(), &s).unwrap_err().to_string().contains("`w`"));
        s.covariates = vec!["x".into()];
        assert!(parse_dataset(csv.as_bytes(), &s).is_err());
    }
}
