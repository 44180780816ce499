//! Multi-study dataset container, CSV ingestion, and preprocessing.
//!
//! A dataset is an ordered collection of studies measuring the same P
//! variables on disjoint subjects, with optional per-study covariate blocks.
//! All estimators consume this type; they assume rows are subjects and
//! columns are variables.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Multi-study data: `S` matrices of shape `N_s x P` over a shared variable
/// set, with optional `N_s x Q` covariate blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiStudyDataset {
    /// Per-study observation matrices, rows = subjects, columns = variables.
    pub studies: Vec<DMatrix<f64>>,
    /// Shared column names, length P.
    pub variable_names: Vec<String>,
    /// One name per study, same order as `studies`.
    pub study_names: Vec<String>,
    /// Optional per-study covariates; every block must have Q columns and as
    /// many rows as its study.
    pub covariates: Option<Vec<DMatrix<f64>>>,
}

impl MultiStudyDataset {
    /// Build and validate a dataset.
    pub fn new(
        studies: Vec<DMatrix<f64>>,
        variable_names: Vec<String>,
        study_names: Vec<String>,
        covariates: Option<Vec<DMatrix<f64>>>,
    ) -> Result<Self> {
        let ds = MultiStudyDataset {
            studies,
            variable_names,
            study_names,
            covariates,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Build a dataset from bare matrices with generated names — the usual
    /// entry point for simulated data.
    pub fn from_matrices(studies: Vec<DMatrix<f64>>) -> Result<Self> {
        let p = studies.first().map_or(0, |m| m.ncols());
        let variable_names = (1..=p).map(|i| format!("v{i}")).collect();
        let study_names = (1..=studies.len()).map(|i| format!("study{i}")).collect();
        Self::new(studies, variable_names, study_names, None)
    }

    /// Check the shape invariants; returns the dataset's own errors.
    pub fn validate(&self) -> Result<()> {
        if self.studies.is_empty() {
            return Err(Error::Dimension("dataset has no studies".into()));
        }
        if self.study_names.len() != self.studies.len() {
            return Err(Error::Dimension(format!(
                "{} study names for {} studies",
                self.study_names.len(),
                self.studies.len()
            )));
        }
        let p = self.p();
        if p == 0 {
            return Err(Error::Dimension("studies have zero variables".into()));
        }
        if self.variable_names.len() != p {
            return Err(Error::Dimension(format!(
                "{} variable names for {} columns",
                self.variable_names.len(),
                p
            )));
        }
        for (s, m) in self.studies.iter().enumerate() {
            if m.ncols() != p {
                return Err(Error::Dimension(format!(
                    "study '{}' has {} columns, expected {}",
                    self.study_names[s],
                    m.ncols(),
                    p
                )));
            }
            if m.nrows() == 0 {
                return Err(Error::Dimension(format!(
                    "study '{}' has no rows",
                    self.study_names[s]
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Dimension(format!(
                    "study '{}' contains non-finite values",
                    self.study_names[s]
                )));
            }
        }
        if let Some(cov) = &self.covariates {
            if cov.len() != self.studies.len() {
                return Err(Error::Dimension(format!(
                    "{} covariate blocks for {} studies",
                    cov.len(),
                    self.studies.len()
                )));
            }
            let q = cov[0].ncols();
            for (s, c) in cov.iter().enumerate() {
                if c.ncols() != q {
                    return Err(Error::Dimension(format!(
                        "covariate block '{}' has {} columns, expected {}",
                        self.study_names[s],
                        c.ncols(),
                        q
                    )));
                }
                if c.nrows() != self.studies[s].nrows() {
                    return Err(Error::Dimension(format!(
                        "covariate block '{}' has {} rows, study has {}",
                        self.study_names[s],
                        c.nrows(),
                        self.studies[s].nrows()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of studies S.
    pub fn n_studies(&self) -> usize {
        self.studies.len()
    }

    /// Number of variables P.
    pub fn p(&self) -> usize {
        self.studies.first().map_or(0, |m| m.ncols())
    }

    /// Subjects per study.
    pub fn study_sizes(&self) -> Vec<usize> {
        self.studies.iter().map(|m| m.nrows()).collect()
    }

    /// Total subjects across studies.
    pub fn n_total(&self) -> usize {
        self.studies.iter().map(|m| m.nrows()).sum()
    }

    /// Number of covariates Q (0 when absent).
    pub fn n_covariates(&self) -> usize {
        self.covariates
            .as_ref()
            .and_then(|c| c.first())
            .map_or(0, |m| m.ncols())
    }

    /// All studies stacked row-wise into one `sum(N_s) x P` matrix.
    pub fn pooled(&self) -> DMatrix<f64> {
        let p = self.p();
        let n = self.n_total();
        let mut out = DMatrix::zeros(n, p);
        let mut row = 0;
        for m in &self.studies {
            out.view_mut((row, 0), (m.nrows(), p)).copy_from(m);
            row += m.nrows();
        }
        out
    }
}

/// Column-wise preprocessing switches. Scaling implies centering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PreprocessSpec {
    pub center: bool,
    pub scale: bool,
}

impl PreprocessSpec {
    pub fn center() -> Self {
        PreprocessSpec {
            center: true,
            scale: false,
        }
    }

    pub fn center_scale() -> Self {
        PreprocessSpec {
            center: true,
            scale: true,
        }
    }
}

/// Non-fatal notes produced by `preprocess`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PreprocessReport {
    /// `(study index, variable index)` pairs whose column was constant and
    /// therefore centered but not scaled.
    pub constant_columns: Vec<(usize, usize)>,
}

/// Center and optionally scale each study's columns.
///
/// Centering subtracts the per-study column mean; scaling divides by the
/// per-study sample standard deviation (denominator `n - 1`). Constant
/// columns cannot be scaled and are left centered, with the skip recorded in
/// the report. Requesting `scale` without `center` still centers, since a
/// unit-variance column with nonzero mean is not meaningful here.
pub fn preprocess(
    ds: &MultiStudyDataset,
    spec: PreprocessSpec,
) -> Result<(MultiStudyDataset, PreprocessReport)> {
    ds.validate()?;
    let mut out = ds.clone();
    let mut report = PreprocessReport::default();
    if !spec.center && !spec.scale {
        return Ok((out, report));
    }
    for (s, m) in out.studies.iter_mut().enumerate() {
        let n = m.nrows();
        for j in 0..m.ncols() {
            let mean = m.column(j).sum() / n as f64;
            for i in 0..n {
                m[(i, j)] -= mean;
            }
            if spec.scale {
                if n < 2 {
                    return Err(Error::Dimension(format!(
                        "cannot scale study '{}' with a single row",
                        out.study_names[s]
                    )));
                }
                let ss: f64 = m.column(j).iter().map(|v| v * v).sum();
                let sd = (ss / (n as f64 - 1.0)).sqrt();
                if sd > 0.0 {
                    for i in 0..n {
                        m[(i, j)] /= sd;
                    }
                } else {
                    report.constant_columns.push((s, j));
                }
            }
        }
    }
    Ok((out, report))
}

/// Elementwise `ln(x + offset)` across all studies.
///
/// Intended for right-skewed nonnegative measurements; rejects any cell where
/// `x + offset <= 0`.
pub fn log_offset_transform(ds: &MultiStudyDataset, offset: f64) -> Result<MultiStudyDataset> {
    if !offset.is_finite() {
        return Err(Error::Config(format!("log offset must be finite, got {offset}")));
    }
    let mut out = ds.clone();
    for (s, m) in out.studies.iter_mut().enumerate() {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let v = m[(i, j)] + offset;
                if v <= 0.0 {
                    return Err(Error::Config(format!(
                        "log transform undefined: study '{}' row {} column '{}' has value {} with offset {}",
                        out.study_names[s],
                        i + 1,
                        out.variable_names[j],
                        m[(i, j)],
                        offset
                    )));
                }
                m[(i, j)] = v.ln();
            }
        }
    }
    Ok(out)
}

const MISSING_TOKENS: &[&str] = &["", "NA", "na", "N/A", "NaN", "nan", "NULL", "null"];

/// Load one CSV per study (and optionally one covariate CSV per study).
///
/// Every file must carry a header row; all study files must share the exact
/// same header. Cells must parse as finite numbers; recognized
/// missing-value tokens are rejected with their location.
pub fn load_dataset(
    study_paths: &[PathBuf],
    covariate_paths: Option<&[PathBuf]>,
) -> Result<MultiStudyDataset> {
    if study_paths.is_empty() {
        return Err(Error::Dimension("no study files given".into()));
    }
    let mut studies = Vec::with_capacity(study_paths.len());
    let mut study_names = Vec::with_capacity(study_paths.len());
    let mut variable_names: Option<Vec<String>> = None;
    for path in study_paths {
        let (header, matrix) = read_numeric_csv(path)?;
        match &variable_names {
            None => variable_names = Some(header),
            Some(expected) => {
                if *expected != header {
                    return Err(Error::Schema(format!(
                        "header of '{}' does not match the first study file: expected [{}], got [{}]",
                        path.display(),
                        expected.join(","),
                        header.join(",")
                    )));
                }
            }
        }
        study_names.push(file_stem(path));
        studies.push(matrix);
    }
    let variable_names = variable_names.expect("at least one study file");
    let mut seen = HashSet::new();
    for name in &variable_names {
        if !seen.insert(name) {
            return Err(Error::Schema(format!("duplicate column name '{name}'")));
        }
    }

    let covariates = match covariate_paths {
        None => None,
        Some(paths) => {
            if paths.len() != study_paths.len() {
                return Err(Error::Dimension(format!(
                    "{} covariate files for {} study files",
                    paths.len(),
                    study_paths.len()
                )));
            }
            let mut blocks = Vec::with_capacity(paths.len());
            let mut cov_header: Option<Vec<String>> = None;
            for path in paths {
                let (header, matrix) = read_numeric_csv(path)?;
                match &cov_header {
                    None => cov_header = Some(header),
                    Some(expected) => {
                        if *expected != header {
                            return Err(Error::Schema(format!(
                                "covariate header of '{}' does not match the first covariate file",
                                path.display()
                            )));
                        }
                    }
                }
                blocks.push(matrix);
            }
            Some(blocks)
        }
    };

    MultiStudyDataset::new(studies, variable_names, study_names, covariates)
}

/// Write one CSV per study, mirroring `load_dataset`'s layout. Values are
/// written with shortest-round-trip formatting, so a save/load cycle
/// reproduces them exactly.
pub fn save_dataset(ds: &MultiStudyDataset, study_paths: &[PathBuf]) -> Result<()> {
    if study_paths.len() != ds.studies.len() {
        return Err(Error::Dimension(format!(
            "{} output paths for {} studies",
            study_paths.len(),
            ds.studies.len()
        )));
    }
    for (m, path) in ds.studies.iter().zip(study_paths) {
        write_matrix_csv(m, &ds.variable_names, path)?;
    }
    Ok(())
}

/// Write a single matrix as CSV with the given header.
pub fn write_matrix_csv(m: &DMatrix<f64>, header: &[String], path: &Path) -> Result<()> {
    if header.len() != m.ncols() {
        return Err(Error::Dimension(format!(
            "{} header names for {} columns",
            header.len(),
            m.ncols()
        )));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn read_numeric_csv(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let file_label = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => {
                Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!(
                    "cannot open '{file_label}'"
                )))
            }
            _ => Error::Csv(e),
        })?;
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|s| s.to_string())
        .collect();
    if header.is_empty() {
        return Err(Error::Schema(format!("'{file_label}' has an empty header")));
    }
    let p = header.len();
    let mut rows: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            // csv reports unequal field counts as an error per record.
            Error::Schema(format!(
                "'{file_label}' row {}: {e}",
                idx + 2 // header is line 1
            ))
        })?;
        for (j, cell) in record.iter().enumerate() {
            let trimmed = cell.trim();
            if MISSING_TOKENS.contains(&trimmed) {
                return Err(Error::MissingValue {
                    file: file_label.clone(),
                    row: idx + 2,
                    column: header[j].clone(),
                });
            }
            let v: f64 = trimmed.parse().map_err(|e| Error::Parse {
                file: file_label.clone(),
                row: idx + 2,
                column: header[j].clone(),
                detail: format!("'{trimmed}': {e}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    file: file_label.clone(),
                    row: idx + 2,
                    column: header[j].clone(),
                    detail: format!("non-finite value '{trimmed}'"),
                });
            }
            rows.push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Dimension(format!(
            "'{file_label}' contains a header but no data rows"
        )));
    }
    Ok((header, DMatrix::from_row_slice(n, p, &rows)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset() -> MultiStudyDataset {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]);
        let b = DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 2.0, 1.5]);
        MultiStudyDataset::new(
            vec![a, b],
            vec!["v1".into(), "v2".into()],
            vec!["s1".into(), "s2".into()],
            None,
        )
        .unwrap()
    }

    #[test]
    fn centering_zeroes_column_means() {
        let ds = toy_dataset();
        let (out, report) = preprocess(&ds, PreprocessSpec::center()).unwrap();
        assert!(report.constant_columns.is_empty());
        for m in &out.studies {
            for j in 0..m.ncols() {
                let mean = m.column(j).sum() / m.nrows() as f64;
                assert!(mean.abs() < 1e-10, "column mean {mean} not centered");
            }
        }
    }

    #[test]
    fn scaling_gives_unit_sample_sd() {
        let ds = toy_dataset();
        let (out, _) = preprocess(&ds, PreprocessSpec::center_scale()).unwrap();
        for m in &out.studies {
            let n = m.nrows() as f64;
            for j in 0..m.ncols() {
                let ss: f64 = m.column(j).iter().map(|v| v * v).sum();
                let sd = (ss / (n - 1.0)).sqrt();
                assert!((sd - 1.0).abs() < 1e-10, "sd {sd} not unit");
            }
        }
    }

    #[test]
    fn preprocess_is_idempotent() {
        let ds = toy_dataset();
        let spec = PreprocessSpec::center_scale();
        let (once, _) = preprocess(&ds, spec).unwrap();
        let (twice, _) = preprocess(&once, spec).unwrap();
        for (a, b) in once.studies.iter().zip(&twice.studies) {
            assert!((a - b).abs().max() < 1e-12);
        }
    }

    #[test]
    fn constant_column_is_centered_not_scaled() {
        let a = DMatrix::from_row_slice(3, 2, &[7.0, 1.0, 7.0, 2.0, 7.0, 3.0]);
        let ds = MultiStudyDataset::new(
            vec![a],
            vec!["c".into(), "v".into()],
            vec!["s1".into()],
            None,
        )
        .unwrap();
        let (out, report) = preprocess(&ds, PreprocessSpec::center_scale()).unwrap();
        assert_eq!(report.constant_columns, vec![(0, 0)]);
        // Constant column centered to zero, other column scaled.
        assert!(out.studies[0].column(0).iter().all(|v| v.abs() < 1e-12));
        let ss: f64 = out.studies[0].column(1).iter().map(|v| v * v).sum();
        assert!((ss / 2.0 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn log_transform_requires_positive_shifted_values() {
        let ds = toy_dataset();
        // Smallest value is -1.0; offset 2.0 works, offset 0.5 does not.
        let ok = log_offset_transform(&ds, 2.0).unwrap();
        assert!((ok.studies[0][(0, 0)] - 3.0f64.ln()).abs() < 1e-12);
        assert!(matches!(
            log_offset_transform(&ds, 0.5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = toy_dataset();
        // Exercise values that stress float formatting.
        ds.studies[0][(0, 0)] = 0.1 + 0.2;
        ds.studies[0][(1, 1)] = -1.0e-13;
        ds.studies[1][(0, 0)] = 12345.678901234567;
        let paths: Vec<PathBuf> = ["s1.csv", "s2.csv"]
            .iter()
            .map(|f| dir.path().join(f))
            .collect();
        save_dataset(&ds, &paths).unwrap();
        let back = load_dataset(&paths, None).unwrap();
        for (a, b) in ds.studies.iter().zip(&back.studies) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
                assert_eq!(x, y, "shortest-round-trip format should be exact");
            }
        }
        assert_eq!(ds.variable_names, back.variable_names);
    }

    #[test]
    fn mismatched_headers_are_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.csv");
        let p2 = dir.path().join("b.csv");
        std::fs::write(&p1, "x,y\n1,2\n").unwrap();
        std::fs::write(&p2, "x,z\n1,2\n").unwrap();
        let err = load_dataset(&[p1, p2], None).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "got {err:?}");
    }

    #[test]
    fn missing_and_unparseable_cells_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.csv");
        std::fs::write(&p1, "x,y\n1,NA\n").unwrap();
        let err = load_dataset(&[p1.clone()], None).unwrap_err();
        assert!(matches!(err, Error::MissingValue { .. }), "got {err:?}");

        std::fs::write(&p1, "x,y\n1,fish\n").unwrap();
        let err = load_dataset(&[p1.clone()], None).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "got {err:?}");

        std::fs::write(&p1, "x,y\n").unwrap();
        let err = load_dataset(&[p1], None).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)), "got {err:?}");
    }

    #[test]
    fn ragged_rows_are_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.csv");
        std::fs::write(&p1, "x,y\n1,2\n3\n").unwrap();
        let err = load_dataset(&[p1], None).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "got {err:?}");
    }

    #[test]
    fn covariate_row_mismatch_is_rejected() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let cov = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let err = MultiStudyDataset::new(
            vec![a],
            vec!["v1".into(), "v2".into()],
            vec!["s1".into()],
            Some(vec![cov]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn pooled_stacks_in_study_order() {
        let ds = toy_dataset();
        let pooled = ds.pooled();
        assert_eq!(pooled.nrows(), 5);
        assert_eq!(pooled[(0, 0)], 1.0);
        assert_eq!(pooled[(3, 0)], -1.0);
    }
}
