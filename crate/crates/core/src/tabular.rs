//! One-row-per-patient longitudinal tables and their CSV form.
//!
//! A [`Dataset`] holds a patient identifier column, real-valued covariate
//! columns, one binary treatment column per decision stage and a continuous
//! final outcome. Everything except the identifier is stored as `f64`,
//! column-major, in file order.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};

/// Read access to named real-valued columns, shared by datasets and the
/// derived tables built during estimation.
pub trait Columns {
    fn n_rows(&self) -> usize;
    fn column(&self, name: &str) -> Option<&[f64]>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    id_col: String,
    /// Position of the id column among all header fields.
    id_position: usize,
    ids: Vec<String>,
    names: Vec<String>,
    values: Vec<Vec<f64>>,
    treat_idx: Vec<usize>,
    outcome_idx: usize,
}

impl Dataset {
    /// Builds a dataset from in-memory columns. The id column is placed
    /// first; the remaining columns keep the given order.
    pub fn new(
        id_col: impl Into<String>,
        ids: Vec<String>,
        columns: Vec<(String, Vec<f64>)>,
        treat_cols: &[&str],
        outcome_col: &str,
    ) -> Result<Self> {
        let (names, values): (Vec<_>, Vec<_>) = columns.into_iter().unzip();
        Self::assemble(
            id_col.into(),
            0,
            ids,
            names,
            values,
            treat_cols,
            outcome_col,
        )
    }

    fn assemble(
        id_col: String,
        id_position: usize,
        ids: Vec<String>,
        names: Vec<String>,
        values: Vec<Vec<f64>>,
        treat_cols: &[&str],
        outcome_col: &str,
    ) -> Result<Self> {
        let n = ids.len();
        if n < 2 {
            return Err(Error::Invalid(format!(
                "a dataset needs at least 2 patients, got {n}"
            )));
        }
        if treat_cols.is_empty() {
            return Err(Error::Invalid(
                "at least one treatment column is required".into(),
            ));
        }
        let mut seen_names = HashSet::new();
        for name in std::iter::once(&id_col).chain(names.iter()) {
            if !seen_names.insert(name.as_str()) {
                return Err(Error::Invalid(format!("column `{name}` appears twice")));
            }
        }
        for (name, col) in names.iter().zip(&values) {
            if col.len() != n {
                return Err(Error::Invalid(format!(
                    "column `{name}` has {} values for {n} patients",
                    col.len()
                )));
            }
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidValue {
                    row: row + 1,
                    column: name.clone(),
                    message: "missing or non-finite value".into(),
                });
            }
        }
        let lookup = |name: &str| {
            names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))
        };
        let treat_idx = treat_cols
            .iter()
            .map(|c| lookup(c))
            .collect::<Result<Vec<_>>>()?;
        let outcome_idx = lookup(outcome_col)?;
        if treat_idx.contains(&outcome_idx) {
            return Err(Error::Invalid(format!(
                "`{outcome_col}` cannot be both a treatment and the outcome"
            )));
        }
        if treat_idx.iter().collect::<HashSet<_>>().len() != treat_idx.len() {
            return Err(Error::Invalid("treatment columns must be distinct".into()));
        }
        for &t in &treat_idx {
            if let Some(row) = values[t].iter().position(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidValue {
                    row: row + 1,
                    column: names[t].clone(),
                    message: format!("treatment must be 0 or 1, got {}", values[t][row]),
                });
            }
        }
        let mut seen = HashSet::with_capacity(n);
        for (row, id) in ids.iter().enumerate() {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId {
                    id: id.clone(),
                    row: row + 1,
                });
            }
        }
        Ok(Self {
            id_col,
            id_position: id_position.min(names.len()),
            ids,
            names,
            values,
            treat_idx,
            outcome_idx,
        })
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    /// Number of decision stages.
    pub fn stages(&self) -> usize {
        self.treat_idx.len()
    }

    pub fn id_column(&self) -> &str {
        &self.id_col
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Names of all non-id columns in storage order.
    pub fn column_names(&self) -> &[String] {
        &self.names
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|c| c == name)
    }

    pub fn column_at(&self, idx: usize) -> &[f64] {
        &self.values[idx]
    }

    pub fn treatment_names(&self) -> Vec<&str> {
        self.treat_idx
            .iter()
            .map(|&i| self.names[i].as_str())
            .collect()
    }

    pub fn treatment_index(&self, stage: usize) -> usize {
        self.treat_idx[stage]
    }

    /// Observed treatment at `stage` (0-based) for every patient, as 0.0/1.0.
    pub fn treatment(&self, stage: usize) -> &[f64] {
        &self.values[self.treat_idx[stage]]
    }

    pub fn outcome_name(&self) -> &str {
        &self.names[self.outcome_idx]
    }

    pub fn outcome(&self) -> &[f64] {
        &self.values[self.outcome_idx]
    }

    pub fn outcome_index(&self) -> usize {
        self.outcome_idx
    }

    /// A copy with every row permuted by `order` (row `i` of the result is
    /// row `order[i]` of `self`).
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.n() {
            return Err(Error::Invalid("permutation length does not match n".into()));
        }
        let mut out = self.clone();
        out.ids = order.iter().map(|&i| self.ids[i].clone()).collect();
        for (dst, src) in out.values.iter_mut().zip(&self.values) {
            *dst = order.iter().map(|&i| src[i]).collect();
        }
        Ok(out)
    }

    /// A copy with one column's values replaced.
    pub fn with_column(&self, name: &str, values: Vec<f64>) -> Result<Self> {
        let idx = self
            .column_index(name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
        let mut names = self.names.clone();
        let mut cols = self.values.clone();
        names[idx] = name.to_string();
        cols[idx] = values;
        let treat: Vec<String> = self
            .treatment_names()
            .iter()
            .map(|s| s.to_string())
            .collect();
        let treat: Vec<&str> = treat.iter().map(String::as_str).collect();
        Self::assemble(
            self.id_col.clone(),
            self.id_position,
            self.ids.clone(),
            names,
            cols,
            &treat,
            self.outcome_name(),
        )
    }

    fn header(&self) -> Vec<&str> {
        let mut header: Vec<&str> = self.names.iter().map(String::as_str).collect();
        header.insert(self.id_position, &self.id_col);
        header
    }
}

impl Columns for Dataset {
    fn n_rows(&self) -> usize {
        self.n()
    }

    fn column(&self, name: &str) -> Option<&[f64]> {
        self.column_index(name).map(|i| self.values[i].as_slice())
    }
}

/// A small owned column table, used for regime-augmented rows and for
/// pseudo-outcome regressions.
#[derive(Debug, Clone, Default)]
pub struct Frame {
    n: usize,
    names: Vec<String>,
    values: Vec<Vec<f64>>,
}

impl Frame {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            ..Default::default()
        }
    }

    /// Adds or replaces a column. Panics if the length is not `n`.
    pub fn set(&mut self, name: &str, values: Vec<f64>) -> &mut Self {
        assert_eq!(values.len(), self.n, "column `{name}` length mismatch");
        match self.names.iter().position(|c| c == name) {
            Some(i) => self.values[i] = values,
            None => {
                self.names.push(name.to_string());
                self.values.push(values);
            }
        }
        self
    }
}

impl Columns for Frame {
    fn n_rows(&self) -> usize {
        self.n
    }

    fn column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|c| c == name)
            .map(|i| self.values[i].as_slice())
    }
}

/// Columns of `base`, with some names shadowed or added.
pub struct Overlay<'a> {
    base: &'a dyn Columns,
    extra: Vec<(&'a str, &'a [f64])>,
}

impl<'a> Overlay<'a> {
    pub fn new(base: &'a dyn Columns) -> Self {
        Self {
            base,
            extra: Vec::new(),
        }
    }

    pub fn with(mut self, name: &'a str, values: &'a [f64]) -> Self {
        assert_eq!(
            values.len(),
            self.base.n_rows(),
            "overlay `{name}` length mismatch"
        );
        self.extra.push((name, values));
        self
    }
}

impl Columns for Overlay<'_> {
    fn n_rows(&self) -> usize {
        self.base.n_rows()
    }

    fn column(&self, name: &str) -> Option<&[f64]> {
        self.extra
            .iter()
            .rev()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| *v)
            .or_else(|| self.base.column(name))
    }
}

/// Reads a dataset. Every column other than `id_col` must be numeric.
pub fn load_csv(
    path: impl AsRef<Path>,
    id_col: &str,
    treat_cols: &[&str],
    outcome_col: &str,
) -> Result<Dataset> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::Io {
                path: path.to_path_buf(),
                source,
            },
            other => Error::Csv {
                path: path.to_path_buf(),
                message: format!("{other:?}"),
            },
        })?;
    let header: Vec<String> = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            message: "missing header row".into(),
        });
    }
    for required in std::iter::once(&id_col)
        .chain(treat_cols.iter())
        .chain(std::iter::once(&outcome_col))
    {
        if !header.iter().any(|h| h == required) {
            return Err(Error::MissingColumn(required.to_string()));
        }
    }
    let id_position = header.iter().position(|h| h == id_col).unwrap_or(0);
    let names: Vec<String> = header
        .iter()
        .filter(|h| h.as_str() != id_col)
        .cloned()
        .collect();
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    let mut ids = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let row = row_idx + 1;
        let record = record.map_err(csv_err)?;
        if record.len() != header.len() {
            return Err(Error::InvalidValue {
                row,
                column: String::new(),
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let mut slot = 0;
        for (field, name) in record.iter().zip(&header) {
            if name == id_col {
                if field.is_empty() {
                    return Err(Error::InvalidValue {
                        row,
                        column: name.clone(),
                        message: "missing patient id".into(),
                    });
                }
                ids.push(field.to_string());
                continue;
            }
            if field.is_empty() || field.eq_ignore_ascii_case("na") {
                return Err(Error::InvalidValue {
                    row,
                    column: name.clone(),
                    message: "missing value".into(),
                });
            }
            let value: f64 = field.parse().map_err(|_| Error::InvalidValue {
                row,
                column: name.clone(),
                message: format!("cannot parse `{field}` as a number"),
            })?;
            values[slot].push(value);
            slot += 1;
        }
    }
    Dataset::assemble(
        id_col.to_string(),
        id_position,
        ids,
        names,
        values,
        treat_cols,
        outcome_col,
    )
}

/// Writes a dataset with the shortest decimal representation that parses
/// back to the identical `f64`.
pub fn emit_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if data.n() == 0 {
        return Err(Error::Invalid("refusing to write an empty dataset".into()));
    }
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let file = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut writer = csv::Writer::from_writer(std::io::BufWriter::new(file));
    writer.write_record(data.header()).map_err(csv_err)?;
    let mut record = Vec::with_capacity(data.names.len() + 1);
    for i in 0..data.n() {
        record.clear();
        record.extend(data.values.iter().map(|c| format_f64(c[i])));
        record.insert(data.id_position, data.ids[i].clone());
        writer.write_record(&record).map_err(csv_err)?;
    }
    writer.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Shortest round-trip decimal form (`{}` on f64 never loses bits).
pub fn format_f64(v: f64) -> String {
    format!("{v}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    const SMALL: &str = "id,x,z1,z2,y\n\
                         a,1.5,0,1,10\n\
                         b,2.5,1,1,12\n\
                         c,3.5,1,0,9\n\
                         d,4.5,0,0,11\n";

    #[test]
    fn loads_four_rows_two_stages() {
        let f = write(SMALL);
        let d = load_csv(f.path(), "id", &["z1", "z2"], "y").unwrap();
        assert_eq!(d.n(), 4);
        assert_eq!(d.stages(), 2);
        assert_eq!(d.treatment(0), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(d.column("x").unwrap()[3], 4.5);
        assert_eq!(d.outcome(), &[10.0, 12.0, 9.0, 11.0]);
    }

    #[test]
    fn bad_treatment_names_row_and_column() {
        let f = write("id,x,z1,y\na,1,0,1\nb,2,1,2\nc,3,2,3\n");
        let err = load_csv(f.path(), "id", &["z1"], "y").unwrap_err();
        match err {
            Error::InvalidValue { row, column, .. } => {
                assert_eq!(row, 3);
                assert_eq!(column, "z1");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_named() {
        let f = write(SMALL);
        let err = load_csv(f.path(), "id", &["z1", "z3"], "y").unwrap_err();
        assert!(matches!(err, Error::MissingColumn(c) if c == "z3"));
    }

    #[test]
    fn duplicate_id_rejected() {
        let f = write("id,z1,y\na,0,1\nb,1,2\na,1,3\n");
        let err = load_csv(f.path(), "id", &["z1"], "y").unwrap_err();
        assert!(matches!(err, Error::DuplicateId { row: 3, .. }));
    }

    #[test]
    fn unparseable_and_missing_values() {
        let f = write("id,x,z1,y\na,1,0,1\nb,abc,1,2\n");
        let err = load_csv(f.path(), "id", &["z1"], "y").unwrap_err();
        assert!(matches!(err, Error::InvalidValue { row: 2, ref column, .. } if column == "x"));
        let f = write("id,x,z1,y\na,1,0,1\nb,,1,2\n");
        let err = load_csv(f.path(), "id", &["z1"], "y").unwrap_err();
        assert!(matches!(err, Error::InvalidValue { row: 2, .. }));
    }

    #[test]
    fn single_patient_rejected() {
        let f = write("id,z1,y\na,0,1\n");
        assert!(load_csv(f.path(), "id", &["z1"], "y").is_err());
    }

    #[test]
    fn emit_preserves_column_order_including_id_position() {
        let f = write("x,id,z1,y\n1,a,0,1\n2,b,1,2\n");
        let d = load_csv(f.path(), "id", &["z1"], "y").unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        emit_csv(&d, out.path()).unwrap();
        let text = std::fs::read_to_string(out.path()).unwrap();
        assert_eq!(text.lines().next().unwrap(), "x,id,z1,y");
        let back = load_csv(out.path(), "id", &["z1"], "y").unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn overlay_shadows_base() {
        let f = write(SMALL);
        let d = load_csv(f.path(), "id", &["z1", "z2"], "y").unwrap();
        let alt = [9.0; 4];
        let o = Overlay::new(&d).with("x", &alt);
        assert_eq!(o.column("x").unwrap(), &alt);
        assert_eq!(o.column("y").unwrap(), d.outcome());
    }
}
