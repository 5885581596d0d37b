//! Tabular tasks: schema, rows, labels and the metadata that accompanies them.
//!
//! A dataset is read from a comma-separated values file plus a JSON metadata
//! object naming the label column. Column kinds come from the metadata when
//! declared and are inferred otherwise: a column is numerical iff every
//! non-missing cell parses as a finite real.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest number of distinct values a categorical column may have to be
/// used as a classification label by [`derive_tasks`].
pub const MAX_DERIVED_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Numerical,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl FeatureSpec {
    pub fn new(name: impl Into<String>, kind: FeatureKind, description: Option<&str>) -> Self {
        Self {
            name: name.into(),
            kind,
            description: description.map(str::to_string),
        }
    }
}

/// A single cell value.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Num(f64),
    Cat(String),
    /// Empty in the source table; rendered as `unknown`.
    Missing,
}

impl Cell {
    pub fn is_missing(&self) -> bool {
        matches!(self, Cell::Missing)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification { classes: usize },
    Regression,
}

impl TaskKind {
    pub fn is_classification(&self) -> bool {
        matches!(self, TaskKind::Classification { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Label {
    Class(usize),
    Value(f64),
}

impl Label {
    pub fn class(&self) -> Option<usize> {
        match *self {
            Label::Class(c) => Some(c),
            Label::Value(_) => None,
        }
    }

    pub fn value(&self) -> Option<f64> {
        match *self {
            Label::Value(v) => Some(v),
            Label::Class(_) => None,
        }
    }

    /// Numeric view: the class index for classification labels.
    pub fn as_f64(&self) -> f64 {
        match *self {
            Label::Class(c) => c as f64,
            Label::Value(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub values: Vec<Cell>,
    pub label: Label,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskMeta {
    pub background: Option<String>,
    pub label_description: Option<String>,
    /// Class verbalizations in index order; empty for regression.
    pub class_names: Vec<String>,
    pub label_name: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabularTask {
    pub id: String,
    pub features: Vec<FeatureSpec>,
    pub rows: Vec<Row>,
    pub kind: TaskKind,
    pub meta: TaskMeta,
}

impl TabularTask {
    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn n_classes(&self) -> Option<usize> {
        match self.kind {
            TaskKind::Classification { classes } => Some(classes),
            TaskKind::Regression => None,
        }
    }

    /// (min, max) of the regression labels, or of the class indices.
    pub fn label_range(&self) -> Option<(f64, f64)> {
        let mut it = self.rows.iter().map(|r| r.label.as_f64());
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }
}

/// JSON metadata accompanying a values file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetadataFile {
    pub label_column: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_background: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<FeatureMeta>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<FeatureKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

fn is_missing(raw: &str) -> bool {
    raw.trim().is_empty()
}

/// Numerical iff every non-missing cell parses as a finite real.
pub fn infer_kind<'a>(cells: impl IntoIterator<Item = &'a str>) -> FeatureKind {
    let numeric = cells
        .into_iter()
        .filter(|c| !is_missing(c))
        .all(|c| c.trim().parse::<f64>().map(f64::is_finite).unwrap_or(false));
    if numeric {
        FeatureKind::Numerical
    } else {
        FeatureKind::Categorical
    }
}

fn parse_numeric_cell(raw: &str, column: &str, line: usize) -> Result<f64> {
    match raw.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err(Error::NonFiniteCell {
            column: column.to_string(),
            line,
            value: raw.to_string(),
        }),
        Err(_) => Err(Error::InvalidNumber {
            column: column.to_string(),
            line,
            value: raw.to_string(),
        }),
    }
}

/// Load a task from a values file and a metadata file. The task id is the
/// values file stem.
pub fn load_dataset(values_file: &Path, meta_file: &Path) -> Result<TabularTask> {
    let id = values_file
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "task".to_string());
    let values = File::open(values_file).map_err(|e| Error::io(values_file, e))?;
    let meta_text = std::fs::read_to_string(meta_file).map_err(|e| Error::io(meta_file, e))?;
    let meta: MetadataFile = serde_json::from_str(&meta_text)?;
    parse_dataset(&id, values, &meta)
}

/// Parse a task from CSV text and already-decoded metadata.
pub fn parse_dataset<R: Read>(id: &str, values: R, meta: &MetadataFile) -> Result<TabularTask> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(values);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(Error::EmptyTable(id.to_string()));
    }
    let mut records: Vec<Vec<String>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        // header is line 1
        let line = i + 2;
        if rec.len() != header.len() {
            return Err(Error::SchemaMismatch {
                line,
                expected: header.len(),
                found: rec.len(),
            });
        }
        records.push(rec.iter().map(str::to_string).collect());
    }
    if records.is_empty() {
        return Err(Error::EmptyTable(id.to_string()));
    }
    let label_idx = header
        .iter()
        .position(|h| *h == meta.label_column)
        .ok_or_else(|| Error::UnknownLabelColumn(meta.label_column.clone()))?;

    let declared: HashMap<&str, &FeatureMeta> = meta
        .features
        .iter()
        .flatten()
        .map(|f| (f.name.as_str(), f))
        .collect();
    let column_kind = |col: usize| -> FeatureKind {
        declared
            .get(header[col].as_str())
            .and_then(|f| f.kind)
            .unwrap_or_else(|| infer_kind(records.iter().map(|r| r[col].as_str())))
    };

    let mut features = Vec::with_capacity(header.len() - 1);
    let mut feature_cols = Vec::with_capacity(header.len() - 1);
    for (col, name) in header.iter().enumerate() {
        if col == label_idx {
            continue;
        }
        features.push(FeatureSpec {
            name: name.clone(),
            kind: column_kind(col),
            description: declared.get(name.as_str()).and_then(|f| f.description.clone()),
        });
        feature_cols.push(col);
    }

    // label kind: explicit class names win, then declared/inferred kind
    let class_names: Vec<String> = match &meta.class_names {
        Some(names) => names.clone(),
        None if column_kind(label_idx) == FeatureKind::Categorical => {
            let mut seen = HashSet::new();
            records
                .iter()
                .map(|r| r[label_idx].as_str())
                .filter(|v| !is_missing(v) && seen.insert(v.to_string()))
                .map(str::to_string)
                .collect()
        }
        None => Vec::new(),
    };
    let kind = if class_names.is_empty() {
        TaskKind::Regression
    } else {
        TaskKind::Classification {
            classes: class_names.len(),
        }
    };

    let mut rows = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let line = i + 2;
        let raw_label = rec[label_idx].as_str();
        if is_missing(raw_label) {
            // rows without supervision are dropped
            continue;
        }
        let label = match kind {
            TaskKind::Classification { classes } => {
                let idx = class_names
                    .iter()
                    .position(|c| c == raw_label)
                    .or_else(|| raw_label.trim().parse::<usize>().ok().filter(|&k| k < classes))
                    .ok_or_else(|| Error::InvalidLabel {
                        line,
                        value: raw_label.to_string(),
                    })?;
                Label::Class(idx)
            }
            TaskKind::Regression => {
                Label::Value(parse_numeric_cell(raw_label, &meta.label_column, line)?)
            }
        };
        let mut values = Vec::with_capacity(feature_cols.len());
        for (f, &col) in features.iter().zip(&feature_cols) {
            let raw = rec[col].as_str();
            values.push(if is_missing(raw) {
                Cell::Missing
            } else {
                match f.kind {
                    FeatureKind::Numerical => Cell::Num(parse_numeric_cell(raw, &f.name, line)?),
                    FeatureKind::Categorical => Cell::Cat(raw.to_string()),
                }
            });
        }
        rows.push(Row { values, label });
    }
    if rows.is_empty() {
        return Err(Error::EmptyTable(format!("{id}: every label is missing")));
    }

    Ok(TabularTask {
        id: id.to_string(),
        features,
        rows,
        kind,
        meta: TaskMeta {
            background: meta.task_background.clone(),
            label_description: meta.label_description.clone(),
            class_names,
            label_name: meta.label_column.clone(),
        },
    })
}

/// Metadata object that reproduces `task` when paired with [`write_values`].
pub fn metadata_for(task: &TabularTask) -> MetadataFile {
    MetadataFile {
        label_column: task.meta.label_name.clone(),
        task_background: task.meta.background.clone(),
        label_description: task.meta.label_description.clone(),
        class_names: task
            .kind
            .is_classification()
            .then(|| task.meta.class_names.clone()),
        features: Some(
            task.features
                .iter()
                .map(|f| FeatureMeta {
                    name: f.name.clone(),
                    kind: Some(f.kind),
                    description: f.description.clone(),
                })
                .collect(),
        ),
    }
}

/// Write the values table with the label as the last column. Numbers use the
/// shortest representation that parses back to the same `f64`.
pub fn write_values<W: Write>(task: &TabularTask, out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = task.features.iter().map(|f| f.name.as_str()).collect();
    header.push(&task.meta.label_name);
    writer.write_record(&header)?;
    for row in &task.rows {
        let mut record: Vec<String> = row
            .values
            .iter()
            .map(|c| match c {
                Cell::Num(v) => format!("{v}"),
                Cell::Cat(s) => s.clone(),
                Cell::Missing => String::new(),
            })
            .collect();
        record.push(match row.label {
            Label::Class(c) => task.meta.class_names[c].clone(),
            Label::Value(v) => format!("{v}"),
        });
        writer.write_record(&record)?;
    }
    writer.flush().map_err(|e| Error::io("<values>", e))?;
    Ok(())
}

/// Write `<dir>/<id>.csv` and `<dir>/<id>.meta.json`.
pub fn write_dataset(task: &TabularTask, dir: &Path) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = sanitize_file_stem(&task.id);
    let values_path = dir.join(format!("{stem}.csv"));
    let meta_path = dir.join(format!("{stem}.meta.json"));
    let f = File::create(&values_path).map_err(|e| Error::io(&values_path, e))?;
    write_values(task, std::io::BufWriter::new(f))?;
    let meta = serde_json::to_string_pretty(&metadata_for(task))?;
    std::fs::write(&meta_path, meta + "\n").map_err(|e| Error::io(&meta_path, e))?;
    Ok((values_path, meta_path))
}

fn sanitize_file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// A column of the dataset viewed independently of which column is the label.
struct Column {
    spec: FeatureSpec,
    cells: Vec<Cell>,
}

fn columns_of(task: &TabularTask) -> Vec<Column> {
    let mut cols: Vec<Column> = task
        .features
        .iter()
        .enumerate()
        .map(|(j, f)| Column {
            spec: f.clone(),
            cells: task.rows.iter().map(|r| r.values[j].clone()).collect(),
        })
        .collect();
    let (kind, cells) = match task.kind {
        TaskKind::Classification { .. } => (
            FeatureKind::Categorical,
            task.rows
                .iter()
                .map(|r| match r.label {
                    Label::Class(c) => Cell::Cat(task.meta.class_names[c].clone()),
                    Label::Value(v) => Cell::Num(v),
                })
                .collect(),
        ),
        TaskKind::Regression => (
            FeatureKind::Numerical,
            task.rows.iter().map(|r| Cell::Num(r.label.as_f64())).collect(),
        ),
    };
    cols.push(Column {
        spec: FeatureSpec {
            name: task.meta.label_name.clone(),
            kind,
            description: task.meta.label_description.clone(),
        },
        cells,
    });
    cols
}

/// Distinct categorical values in first-appearance order with their counts.
fn category_counts(cells: &[Cell]) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = Vec::new();
    for c in cells {
        match c {
            Cell::Cat(s) => match out.iter_mut().find(|(v, _)| v == s) {
                Some((_, n)) => *n += 1,
                None => out.push((s.clone(), 1)),
            },
            Cell::Num(v) => {
                let s = format!("{v}");
                match out.iter_mut().find(|(x, _)| *x == s) {
                    Some((_, n)) => *n += 1,
                    None => out.push((s, 1)),
                }
            }
            Cell::Missing => {}
        }
    }
    out
}

/// Whether a column can serve as a derived label. Numerical columns need at
/// least two distinct values; categorical columns need 2..=10 distinct values
/// with every value occurring at least twice.
fn eligible(col: &Column) -> bool {
    match col.spec.kind {
        FeatureKind::Numerical => {
            let mut vals = col.cells.iter().filter_map(|c| match c {
                Cell::Num(v) => Some(*v),
                _ => None,
            });
            match vals.next() {
                Some(first) => vals.any(|v| v != first),
                None => false,
            }
        }
        FeatureKind::Categorical => {
            let counts = category_counts(&col.cells);
            (2..=MAX_DERIVED_CLASSES).contains(&counts.len()) && counts.iter().all(|(_, n)| *n >= 2)
        }
    }
}

/// Derive up to `max_tasks` predictive tasks from one dataset by using
/// different columns as the label. The dataset's own label comes first when
/// it is eligible; further labels are taken in column order.
pub fn derive_tasks(task: &TabularTask, max_tasks: usize) -> Result<Vec<TabularTask>> {
    if max_tasks == 0 {
        return Err(Error::InvalidTask("max_tasks must be at least 1".into()));
    }
    let columns = columns_of(task);
    let label_col = columns.len() - 1;
    let mut out = Vec::new();
    if eligible(&columns[label_col]) {
        out.push(task.clone());
    }
    for (j, col) in columns.iter().enumerate().take(label_col) {
        if out.len() >= max_tasks {
            break;
        }
        if !eligible(col) {
            continue;
        }
        out.push(task_with_label(task, &columns, j));
    }
    if out.is_empty() {
        return Err(Error::NoEligibleLabel);
    }
    Ok(out)
}

fn task_with_label(task: &TabularTask, columns: &[Column], label: usize) -> TabularTask {
    let target = &columns[label];
    let feature_idx: Vec<usize> = (0..columns.len()).filter(|&j| j != label).collect();
    let features = feature_idx.iter().map(|&j| columns[j].spec.clone()).collect();
    let (kind, class_names) = match target.spec.kind {
        FeatureKind::Categorical => {
            let names: Vec<String> = category_counts(&target.cells).into_iter().map(|(v, _)| v).collect();
            (TaskKind::Classification { classes: names.len() }, names)
        }
        FeatureKind::Numerical => (TaskKind::Regression, Vec::new()),
    };
    let rows = (0..task.rows.len())
        .filter_map(|i| {
            let label = match &target.cells[i] {
                Cell::Missing => return None,
                Cell::Num(v) if kind == TaskKind::Regression => Label::Value(*v),
                Cell::Num(v) => {
                    let s = format!("{v}");
                    Label::Class(class_names.iter().position(|c| *c == s)?)
                }
                Cell::Cat(s) => Label::Class(class_names.iter().position(|c| c == s)?),
            };
            Some(Row {
                values: feature_idx.iter().map(|&j| columns[j].cells[i].clone()).collect(),
                label,
            })
        })
        .collect();
    TabularTask {
        id: format!("{}#{}", task.id, target.spec.name),
        features,
        rows,
        kind,
        meta: TaskMeta {
            background: task.meta.background.clone(),
            label_description: target.spec.description.clone(),
            class_names,
            label_name: target.spec.name.clone(),
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    NoFeatures,
    EmptyFeatureName,
    DuplicateFeatureName,
    TooFewRows,
    RowArity,
    CellKind,
    NonFiniteCell,
    EmptyCategory,
    LabelOutOfRange,
    LabelKind,
    NonFiniteLabel,
    TooFewClasses,
    DuplicateClassName,
    ClassCountMismatch,
    ClassNamesOnRegression,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub message: String,
}

/// Check every structural invariant of a task; an empty report means the
/// task is well formed.
pub fn validate_task(task: &TabularTask) -> Vec<Violation> {
    let mut report = Vec::new();
    let mut flag = |kind: ViolationKind, message: String| report.push(Violation { kind, message });

    let m = task.features.len();
    if m == 0 {
        flag(ViolationKind::NoFeatures, "task has no features".into());
    }
    let mut names = HashSet::new();
    for f in &task.features {
        if f.name.is_empty() {
            flag(ViolationKind::EmptyFeatureName, "feature with empty name".into());
        } else if !names.insert(f.name.as_str()) {
            flag(ViolationKind::DuplicateFeatureName, format!("duplicate feature name `{}`", f.name));
        }
    }
    if task.rows.len() < 2 {
        flag(ViolationKind::TooFewRows, format!("{} rows, need at least 2", task.rows.len()));
    }
    match task.kind {
        TaskKind::Classification { classes } => {
            if classes < 2 {
                flag(ViolationKind::TooFewClasses, format!("{classes} classes, need at least 2"));
            }
            if task.meta.class_names.len() != classes {
                flag(
                    ViolationKind::ClassCountMismatch,
                    format!("{} class names for {classes} classes", task.meta.class_names.len()),
                );
            }
            let mut seen = HashSet::new();
            for c in &task.meta.class_names {
                if !seen.insert(c.as_str()) {
                    flag(ViolationKind::DuplicateClassName, format!("duplicate class name `{c}`"));
                }
            }
        }
        TaskKind::Regression => {
            if !task.meta.class_names.is_empty() {
                flag(ViolationKind::ClassNamesOnRegression, "regression task lists class names".into());
            }
        }
    }
    for (i, row) in task.rows.iter().enumerate() {
        if row.values.len() != m {
            flag(
                ViolationKind::RowArity,
                format!("row arity: row {i} has {} values, expected {m}", row.values.len()),
            );
        }
        for (j, (cell, f)) in row.values.iter().zip(&task.features).enumerate() {
            match (cell, f.kind) {
                (Cell::Missing, _) => {}
                (Cell::Num(v), FeatureKind::Numerical) => {
                    if !v.is_finite() {
                        flag(ViolationKind::NonFiniteCell, format!("row {i} column {j} is non-finite"));
                    }
                }
                (Cell::Cat(s), FeatureKind::Categorical) => {
                    if s.trim().is_empty() {
                        flag(ViolationKind::EmptyCategory, format!("row {i} column {j} is an empty category"));
                    }
                }
                _ => flag(
                    ViolationKind::CellKind,
                    format!("row {i} column {j} does not match kind {:?}", f.kind),
                ),
            }
        }
        match (row.label, task.kind) {
            (Label::Class(c), TaskKind::Classification { classes }) => {
                if c >= classes {
                    flag(
                        ViolationKind::LabelOutOfRange,
                        format!("label out of range: row {i} has class {c} of {classes}"),
                    );
                }
            }
            (Label::Value(v), TaskKind::Regression) => {
                if !v.is_finite() {
                    flag(ViolationKind::NonFiniteLabel, format!("row {i} label is non-finite"));
                }
            }
            _ => flag(ViolationKind::LabelKind, format!("row {i} label does not match task kind")),
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(label: &str) -> MetadataFile {
        MetadataFile {
            label_column: label.into(),
            ..Default::default()
        }
    }

    #[test]
    fn loads_minimal_table() {
        let csv = "age,sex,outcome\n25,m,0\n31,f,1\n47,f,0\n";
        let mut m = meta("outcome");
        m.class_names = Some(vec!["0".into(), "1".into()]);
        let task = parse_dataset("t", csv.as_bytes(), &m).unwrap();
        assert_eq!(task.n_features(), 2);
        assert_eq!(task.n_classes(), Some(2));
        assert_eq!(task.rows.len(), 3);
        assert_eq!(task.features[0].kind, FeatureKind::Numerical);
        assert_eq!(task.features[1].kind, FeatureKind::Categorical);
        assert_eq!(task.rows[1].label, Label::Class(1));
        assert!(validate_task(&task).is_empty());
    }

    #[test]
    fn unknown_label_column() {
        let csv = "age,sex,outcome\n25,m,0\n";
        let err = parse_dataset("t", csv.as_bytes(), &meta("target")).unwrap_err();
        assert!(matches!(err, Error::UnknownLabelColumn(ref c) if c == "target"));
    }

    #[test]
    fn mixed_column_is_categorical() {
        assert_eq!(infer_kind(["3.5", "high", "low"]), FeatureKind::Categorical);
        assert_eq!(infer_kind(["3.5", "", "-2e3"]), FeatureKind::Numerical);
        assert_eq!(infer_kind(["1", "inf"]), FeatureKind::Categorical);
        let csv = "level,y\n3.5,1.0\nhigh,2.0\nlow,3.0\n";
        let task = parse_dataset("t", csv.as_bytes(), &meta("y")).unwrap();
        assert_eq!(task.features[0].kind, FeatureKind::Categorical);
        assert_eq!(task.kind, TaskKind::Regression);
    }

    #[test]
    fn inference_ignores_row_order() {
        let cells = ["1", "x", "2"];
        let mut rev = cells;
        rev.reverse();
        assert_eq!(infer_kind(cells), infer_kind(rev));
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let csv = "a,b,y\n1,2,3\n1,2\n";
        let err = parse_dataset("t", csv.as_bytes(), &meta("y")).unwrap_err();
        assert!(matches!(err, Error::SchemaMismatch { line: 3, expected: 3, found: 2 }));
    }

    #[test]
    fn empty_table_is_rejected() {
        let err = parse_dataset("t", "a,y\n".as_bytes(), &meta("y")).unwrap_err();
        assert!(matches!(err, Error::EmptyTable(_)));
    }

    #[test]
    fn declared_numeric_with_infinity_is_rejected() {
        let csv = "a,y\n1,0\ninf,1\n";
        let mut m = meta("y");
        m.features = Some(vec![FeatureMeta {
            name: "a".into(),
            kind: Some(FeatureKind::Numerical),
            description: None,
        }]);
        let err = parse_dataset("t", csv.as_bytes(), &m).unwrap_err();
        assert!(matches!(err, Error::NonFiniteCell { line: 3, .. }));
    }

    #[test]
    fn missing_cells_and_labels() {
        let csv = "a,b,y\n1,,yes\n,x,\n3,z,no\n4,z,yes\n";
        let task = parse_dataset("t", csv.as_bytes(), &meta("y")).unwrap();
        // the row with a missing label is dropped
        assert_eq!(task.rows.len(), 3);
        assert_eq!(task.rows[0].values[1], Cell::Missing);
        assert_eq!(task.meta.class_names, vec!["yes", "no"]);
    }

    #[test]
    fn class_names_match_before_indices() {
        let csv = "a,y\n1,1\n2,0\n3,1\n";
        let mut m = meta("y");
        m.class_names = Some(vec!["1".into(), "0".into()]);
        let task = parse_dataset("t", csv.as_bytes(), &m).unwrap();
        assert_eq!(task.rows[0].label, Label::Class(0));
        assert_eq!(task.rows[1].label, Label::Class(1));
    }

    fn five_column_task() -> TabularTask {
        // columns: x1 numeric, c1 categorical (3 values x2), c2 free text,
        // x2 numeric, c3 binary; label y binary
        let mut csv = String::from("x1,c1,c2,x2,c3,y\n");
        for i in 0..6 {
            csv += &format!("{i},{},note{i},{},{},{}\n", ["a", "b", "c"][i % 3], i * 2, ["u", "v"][i % 2], ["no", "yes"][i % 2]);
        }
        parse_dataset("d", csv.as_bytes(), &meta("y")).unwrap()
    }

    #[test]
    fn derive_respects_max_and_puts_original_first() {
        let task = five_column_task();
        let derived = derive_tasks(&task, 4).unwrap();
        assert_eq!(derived.len(), 4);
        assert_eq!(derived[0], task);
        let labels: Vec<&str> = derived.iter().map(|t| t.meta.label_name.as_str()).collect();
        assert_eq!(labels, vec!["y", "x1", "c1", "x2"]);
        assert_eq!(derived[1].kind, TaskKind::Regression);
        assert_eq!(derived[2].n_classes(), Some(3));
        for t in &derived {
            assert!(validate_task(t).is_empty(), "{:?}", validate_task(t));
            assert_eq!(t.n_features(), 5);
        }
        // free-text column is never a label
        let all = derive_tasks(&task, 10).unwrap();
        assert!(all.iter().all(|t| t.meta.label_name != "c2"));
        assert_eq!(all.len(), 5);
    }

    #[test]
    fn derive_single_eligible_column() {
        let csv = "name,y\nann,a\nbob,b\ncid,a\ndan,b\n";
        let task = parse_dataset("d", csv.as_bytes(), &meta("y")).unwrap();
        let derived = derive_tasks(&task, 4).unwrap();
        assert_eq!(derived.len(), 1);
    }

    #[test]
    fn derive_without_eligible_column() {
        let csv = "name,y\nann,a\nbob,b\n";
        let task = parse_dataset("d", csv.as_bytes(), &meta("y")).unwrap();
        assert!(matches!(derive_tasks(&task, 4), Err(Error::NoEligibleLabel)));
    }

    #[test]
    fn validation_flags_arity_and_range() {
        let csv = "a,b,y\n1,2,0\n3,4,1\n";
        let mut m = meta("y");
        m.class_names = Some(vec!["0".into(), "1".into()]);
        let task = parse_dataset("t", csv.as_bytes(), &m).unwrap();
        assert!(validate_task(&task).is_empty());

        let mut short = task.clone();
        short.rows[0].values.pop();
        let report = validate_task(&short);
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].kind, ViolationKind::RowArity);
        assert!(report[0].message.contains("row arity"));

        let mut out_of_range = task.clone();
        out_of_range.rows[1].label = Label::Class(2);
        let report = validate_task(&out_of_range);
        assert_eq!(report[0].kind, ViolationKind::LabelOutOfRange);
        assert!(report[0].message.contains("label out of range"));
    }
}
