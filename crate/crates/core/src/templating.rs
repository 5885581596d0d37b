//! Prompt rendering for the three layouts.
//!
//! Every prompt is built as an ordered list of role-tagged [`Segment`]s whose
//! concatenation is the prompt text. Feature values and answers each live in
//! their own segment so later stages can locate them exactly.
//!
//! * `T-lang`: one sentence per feature, repeated for every demonstration.
//! * `T-table`: feature meanings listed once, then a single Markdown table
//!   holding demonstrations and the query row.
//! * `T-anony`: the `T-table` layout with every piece of metadata removed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{CaseSpec, ContextSet};
use crate::tabular::{Cell, Label, Row, TabularTask, TaskKind};

/// Rendering of a missing cell.
pub const MISSING_VALUE: &str = "unknown";

/// Text of the built-in template resource.
pub const BUILTIN_RESOURCE: &str = include_str!("../resources/templates.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Template {
    #[serde(rename = "T-lang")]
    Lang,
    #[serde(rename = "T-table")]
    Table,
    #[serde(rename = "T-anony")]
    Anony,
}

impl Template {
    pub const ALL: [Template; 3] = [Template::Lang, Template::Table, Template::Anony];

    pub fn name(&self) -> &'static str {
        match self {
            Template::Lang => "T-lang",
            Template::Table => "T-table",
            Template::Anony => "T-anony",
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Template {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "t-lang" | "lang" => Ok(Template::Lang),
            "t-table" | "table" => Ok(Template::Table),
            "t-anony" | "anony" => Ok(Template::Anony),
            _ => Err(format!("unknown template `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Meta,
    FeatureValue,
    Target,
    TargetPlaceholder,
}

impl Role {
    /// Feature values and answers are predicted; everything else is context.
    pub fn is_supervised(&self) -> bool {
        matches!(self, Role::FeatureValue | Role::Target)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub text: String,
    pub role: Role,
    /// True for the value, target and placeholder segments of the query row.
    #[serde(default)]
    pub in_query: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    /// The query answer is written out as a target segment.
    Train,
    /// The query answer slot is an empty placeholder.
    Inference,
}

/// Byte range of one segment inside the rendered text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharSpan {
    pub start: usize,
    pub end: usize,
    pub role: Role,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub in_query: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedSample {
    pub case_id: String,
    pub template: Template,
    pub mode: RenderMode,
    pub segments: Vec<Segment>,
    /// Canonical answer for the query row.
    pub answer_text: String,
}

impl RenderedSample {
    pub fn text(&self) -> String {
        self.segments.iter().map(|s| s.text.as_str()).collect()
    }

    pub fn spans(&self) -> Vec<CharSpan> {
        let mut pos = 0;
        self.segments
            .iter()
            .map(|s| {
                let span = CharSpan {
                    start: pos,
                    end: pos + s.text.len(),
                    role: s.role,
                    in_query: s.in_query,
                };
                pos = span.end;
                span
            })
            .collect()
    }

    /// Prompt prefix that ends at the answer cue of the query.
    pub fn prompt_prefix(&self) -> String {
        let end = self
            .segments
            .iter()
            .position(|s| s.in_query && matches!(s.role, Role::Target | Role::TargetPlaceholder))
            .unwrap_or(self.segments.len());
        self.segments[..end].iter().map(|s| s.text.as_str()).collect()
    }
}

/// Debug-corpus line: the text plus its role spans.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedRecord {
    pub case_id: String,
    pub text: String,
    pub spans: Vec<CharSpan>,
}

impl From<&RenderedSample> for RenderedRecord {
    fn from(s: &RenderedSample) -> Self {
        Self {
            case_id: s.case_id.clone(),
            text: s.text(),
            spans: s.spans(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
pub struct LangStrings {
    pub feature_prefix: String,
    pub feature_infix: String,
    pub feature_suffix: String,
    pub classification_instruction: String,
    pub regression_instruction: String,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
pub struct TableStrings {
    pub feature_list_intro: String,
    pub query_label_cell: String,
    pub classification_instruction: String,
    pub regression_instruction: String,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
pub struct AnonyStrings {
    pub context_cue: String,
    pub label_header: String,
    pub feature_header_prefix: String,
    pub query_label_cell: String,
    pub classification_instruction: String,
    pub regression_instruction: String,
}

/// Versioned instruction wording, loaded from TOML.
#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
pub struct TemplateResource {
    pub version: String,
    pub context_cue: String,
    pub query_cue: String,
    pub answer_cue: String,
    pub default_background: String,
    pub label_sentence: String,
    pub label_sentence_bare: String,
    pub class_mapping_intro: String,
    pub lang: LangStrings,
    pub table: TableStrings,
    pub anony: AnonyStrings,
}

impl TemplateResource {
    pub fn builtin() -> Self {
        Self::from_toml(BUILTIN_RESOURCE).expect("builtin template resource parses")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::TemplateResource(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

impl Default for TemplateResource {
    fn default() -> Self {
        Self::builtin()
    }
}

fn fill(template: &str, label: &str) -> String {
    template.replace("{label}", label)
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Format a real number: at most six significant digits without trailing
/// zeros, or four-digit scientific notation when |x| < 1e-4 or |x| >= 1e7.
pub fn format_number(x: f64) -> Result<String> {
    if !x.is_finite() {
        return Err(Error::NonFiniteValue(x));
    }
    if x == 0.0 {
        return Ok("0".to_string());
    }
    let ax = x.abs();
    if !(1e-4..1e7).contains(&ax) {
        let s = format!("{x:.3e}");
        let (mantissa, exp) = s.split_once('e').expect("exponent form");
        return Ok(format!("{}e{exp}", trim_fraction(mantissa)));
    }
    let s = format!("{x:.5e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let (sign, mantissa) = match mantissa.strip_prefix('-') {
        Some(m) => ("-", m),
        None => ("", mantissa),
    };
    let digits: String = mantissa.chars().filter(char::is_ascii_digit).collect();
    let body = if exp >= 0 {
        let int_len = exp as usize + 1;
        if int_len >= digits.len() {
            format!("{digits}{}", "0".repeat(int_len - digits.len()))
        } else {
            let raw = format!("{}.{}", &digits[..int_len], &digits[int_len..]);
            trim_fraction(&raw).to_string()
        }
    } else {
        let raw = format!("0.{}{digits}", "0".repeat((-exp - 1) as usize));
        trim_fraction(&raw).to_string()
    };
    Ok(format!("{sign}{body}"))
}

/// Categorical cells verbatim, numeric cells via [`format_number`].
pub fn format_value(cell: &Cell) -> Result<String> {
    match cell {
        Cell::Num(v) => format_number(*v),
        Cell::Cat(s) => Ok(s.clone()),
        Cell::Missing => Ok(MISSING_VALUE.to_string()),
    }
}

/// Canonical answer string: the class index, or the formatted value.
pub fn answer_text(label: &Label) -> Result<String> {
    match *label {
        Label::Class(c) => Ok(c.to_string()),
        Label::Value(v) => format_number(v),
    }
}

fn table_safe(s: &str) -> String {
    s.chars()
        .map(|c| match c {
            '|' => '/',
            '\n' | '\r' => ' ',
            c => c,
        })
        .collect()
}

#[derive(Default)]
struct Builder {
    segments: Vec<Segment>,
}

impl Builder {
    fn meta(&mut self, text: impl Into<String>) {
        let text = text.into();
        if !text.is_empty() {
            self.segments.push(Segment {
                text,
                role: Role::Meta,
                in_query: false,
            });
        }
    }

    fn value(&mut self, text: String, in_query: bool) {
        self.segments.push(Segment {
            text,
            role: Role::FeatureValue,
            in_query,
        });
    }

    fn answer(&mut self, text: String, in_query: bool, mode: RenderMode) {
        let role = if in_query && mode == RenderMode::Inference {
            Role::TargetPlaceholder
        } else {
            Role::Target
        };
        let text = if role == Role::TargetPlaceholder { String::new() } else { text };
        self.segments.push(Segment { text, role, in_query });
    }

    fn finish(self, template: Template, mode: RenderMode, answer_text: String) -> RenderedSample {
        RenderedSample {
            case_id: String::new(),
            template,
            mode,
            segments: self.segments,
            answer_text,
        }
    }
}

fn label_line(task: &TabularTask, res: &TemplateResource) -> String {
    let label = &task.meta.label_name;
    let mut line = match &task.meta.label_description {
        Some(d) => res.label_sentence.replace("{label}", label).replace("{description}", d),
        None => fill(&res.label_sentence_bare, label),
    };
    if task.kind.is_classification() {
        let mapping: Vec<String> = task
            .meta
            .class_names
            .iter()
            .enumerate()
            .map(|(i, n)| format!("{i} = {n}"))
            .collect();
        line.push(' ');
        line.push_str(&res.class_mapping_intro);
        line.push(' ');
        line.push_str(&mapping.join(", "));
        line.push('.');
    }
    line
}

fn background(task: &TabularTask, res: &TemplateResource) -> String {
    task.meta
        .background
        .clone()
        .unwrap_or_else(|| fill(&res.default_background, &task.meta.label_name))
}

fn instruction<'a>(kind: TaskKind, classification: &'a str, regression: &'a str) -> &'a str {
    match kind {
        TaskKind::Classification { .. } => classification,
        TaskKind::Regression => regression,
    }
}

/// Sentence-per-feature layout.
pub fn render_t_lang(
    task: &TabularTask,
    demonstrations: &[&Row],
    query: &Row,
    mode: RenderMode,
    res: &TemplateResource,
) -> Result<RenderedSample> {
    let lang = &res.lang;
    let label = &task.meta.label_name;
    let ask = fill(
        instruction(task.kind, &lang.classification_instruction, &lang.regression_instruction),
        label,
    );
    let mut b = Builder::default();
    b.meta(format!("{}\n{}\n", background(task, res), label_line(task, res)));
    if !demonstrations.is_empty() {
        b.meta(format!("{}\n", res.context_cue));
    }
    let block = |b: &mut Builder, row: &Row, in_query: bool| -> Result<()> {
        for (j, (f, cell)) in task.features.iter().zip(&row.values).enumerate() {
            if j > 0 {
                b.meta(" ");
            }
            let desc = f.description.as_deref().unwrap_or(&f.name);
            b.meta(format!("{}{desc}{}", lang.feature_prefix, lang.feature_infix));
            b.value(format_value(cell)?, in_query);
            b.meta(lang.feature_suffix.clone());
        }
        b.meta(format!(" {ask} {}", res.answer_cue));
        b.answer(answer_text(&row.label)?, in_query, mode);
        Ok(())
    };
    for row in demonstrations {
        block(&mut b, row, false)?;
        b.meta("\n");
    }
    if !demonstrations.is_empty() {
        b.meta(format!("{}\n", res.query_cue));
    }
    block(&mut b, query, true)?;
    Ok(b.finish(Template::Lang, mode, answer_text(&query.label)?))
}

fn table_rows(
    b: &mut Builder,
    headers: &[String],
    demonstrations: &[&Row],
    query: &Row,
    query_label_cell: &str,
    mode: RenderMode,
) -> Result<()> {
    b.meta(format!("| {} |\n", headers.join(" | ")));
    b.meta(format!("|{}\n", " --- |".repeat(headers.len())));
    for row in demonstrations {
        b.meta("| ");
        for cell in &row.values {
            b.value(table_safe(&format_value(cell)?), false);
            b.meta(" | ");
        }
        b.answer(answer_text(&row.label)?, false, mode);
        b.meta(" |\n");
    }
    b.meta("| ");
    for cell in &query.values {
        b.value(table_safe(&format_value(cell)?), true);
        b.meta(" | ");
    }
    b.meta(format!("{query_label_cell} |\n"));
    Ok(())
}

/// Markdown-table layout with feature meanings listed once before the table.
pub fn render_t_table(
    task: &TabularTask,
    demonstrations: &[&Row],
    query: &Row,
    mode: RenderMode,
    res: &TemplateResource,
) -> Result<RenderedSample> {
    if let Some(f) = task.features.iter().find(|f| f.name.contains('|')) {
        return Err(Error::DelimiterInName(f.name.clone()));
    }
    if task.meta.label_name.contains('|') {
        return Err(Error::DelimiterInName(task.meta.label_name.clone()));
    }
    let table = &res.table;
    let label = &task.meta.label_name;
    let mut b = Builder::default();
    let mut head = format!("{}\n{}\n", background(task, res), table.feature_list_intro);
    for f in &task.features {
        let desc = f.description.as_deref().unwrap_or(&f.name);
        head.push_str(&format!("- {}: {desc}\n", f.name));
    }
    head.push_str(&label_line(task, res));
    head.push('\n');
    b.meta(head);
    if !demonstrations.is_empty() {
        b.meta(format!("{}\n", res.context_cue));
    }
    let mut headers: Vec<String> = task.features.iter().map(|f| f.name.clone()).collect();
    headers.push(label.clone());
    table_rows(&mut b, &headers, demonstrations, query, &table.query_label_cell, mode)?;
    let ask = fill(
        instruction(task.kind, &table.classification_instruction, &table.regression_instruction),
        label,
    );
    b.meta(format!("{ask} {}", res.answer_cue));
    b.answer(answer_text(&query.label)?, true, mode);
    Ok(b.finish(Template::Table, mode, answer_text(&query.label)?))
}

/// Markdown-table layout without any metadata: headers are `f1..fM` and
/// `target`. Only the task kind and the cell values reach the output.
pub fn render_t_anony(
    task: &TabularTask,
    demonstrations: &[&Row],
    query: &Row,
    mode: RenderMode,
    res: &TemplateResource,
) -> Result<RenderedSample> {
    let anony = &res.anony;
    let mut b = Builder::default();
    if !demonstrations.is_empty() {
        b.meta(format!("{}\n", anony.context_cue));
    }
    let mut headers: Vec<String> = (1..=task.features.len())
        .map(|j| format!("{}{j}", anony.feature_header_prefix))
        .collect();
    headers.push(anony.label_header.clone());
    table_rows(&mut b, &headers, demonstrations, query, &anony.query_label_cell, mode)?;
    let ask = instruction(task.kind, &anony.classification_instruction, &anony.regression_instruction);
    b.meta(format!("{ask} {}", res.answer_cue));
    b.answer(answer_text(&query.label)?, true, mode);
    Ok(b.finish(Template::Anony, mode, answer_text(&query.label)?))
}

pub fn render(
    template: Template,
    task: &TabularTask,
    demonstrations: &[&Row],
    query: &Row,
    mode: RenderMode,
    res: &TemplateResource,
) -> Result<RenderedSample> {
    match template {
        Template::Lang => render_t_lang(task, demonstrations, query, mode, res),
        Template::Table => render_t_table(task, demonstrations, query, mode, res),
        Template::Anony => render_t_anony(task, demonstrations, query, mode, res),
    }
}

/// One rendered sample per query row of the context set.
pub fn render_case(
    case: &CaseSpec,
    context: &ContextSet,
    task: &TabularTask,
    mode: RenderMode,
    res: &TemplateResource,
) -> Result<Vec<RenderedSample>> {
    let demos: Vec<&Row> = context.examples.iter().map(|&i| &task.rows[i]).collect();
    context
        .query_rows
        .iter()
        .map(|&q| {
            let mut s = render(case.template, task, &demos, &task.rows[q], mode, res)?;
            s.case_id = case.case_id.clone();
            Ok(s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::{FeatureKind, FeatureSpec, TaskMeta};

    #[test]
    fn number_formatting() {
        assert_eq!(format_number(1.23456789).unwrap(), "1.23457");
        assert_eq!(format_number(42.0).unwrap(), "42");
        assert_eq!(format_number(0.00001234).unwrap(), "1.234e-5");
        assert_eq!(format_number(-0.00001234).unwrap(), "-1.234e-5");
        assert_eq!(format_number(1.2e8).unwrap(), "1.2e8");
        assert_eq!(format_number(0.0001).unwrap(), "0.0001");
        assert_eq!(format_number(0.5).unwrap(), "0.5");
        assert_eq!(format_number(-12.25).unwrap(), "-12.25");
        assert_eq!(format_number(1234567.8).unwrap(), "1234570");
        assert_eq!(format_number(100.0).unwrap(), "100");
        assert_eq!(format_number(-0.0).unwrap(), "0");
        assert_eq!(format_number(9999999.9).unwrap(), "10000000");
        assert!(matches!(format_number(f64::NAN), Err(Error::NonFiniteValue(_))));
        assert!(format_number(f64::INFINITY).is_err());
    }

    fn patient_task() -> TabularTask {
        TabularTask {
            id: "p".into(),
            features: vec![
                FeatureSpec::new("age", FeatureKind::Numerical, Some("age of the patient")),
                FeatureSpec::new("sex", FeatureKind::Categorical, None),
            ],
            rows: vec![
                Row { values: vec![Cell::Num(25.0), Cell::Cat("male".into())], label: Label::Class(1) },
                Row { values: vec![Cell::Num(31.5), Cell::Cat("female".into())], label: Label::Class(0) },
                Row { values: vec![Cell::Num(47.0), Cell::Missing], label: Label::Class(1) },
            ],
            kind: TaskKind::Classification { classes: 2 },
            meta: TaskMeta {
                background: Some("Patients were followed for one year.".into()),
                label_description: Some("whether the patient recovered".into()),
                class_names: vec!["no".into(), "yes".into()],
                label_name: "recovered".into(),
            },
        }
    }

    #[test]
    fn lang_sentence_segments() {
        let task = patient_task();
        let res = TemplateResource::builtin();
        let s = render_t_lang(&task, &[], &task.rows[0], RenderMode::Train, &res).unwrap();
        let i = s.segments.iter().position(|g| g.text == "The age of the patient is ").unwrap();
        assert_eq!(s.segments[i].role, Role::Meta);
        assert_eq!(s.segments[i + 1].text, "25");
        assert_eq!(s.segments[i + 1].role, Role::FeatureValue);
        assert_eq!(s.segments[i + 2].text, ".");
        assert_eq!(s.segments[i + 2].role, Role::Meta);
        // falls back to the feature name without a description
        assert!(s.text().contains("The sex is male."));
        assert_eq!(s.segments.last().unwrap().role, Role::Target);
        assert_eq!(s.segments.last().unwrap().text, "1");
    }

    #[test]
    fn lang_repeats_descriptions_per_demonstration() {
        let task = patient_task();
        let res = TemplateResource::builtin();
        let demos = [&task.rows[1], &task.rows[2]];
        let s = render_t_lang(&task, &demos, &task.rows[0], RenderMode::Inference, &res).unwrap();
        assert_eq!(s.text().matches("The age of the patient is ").count(), 3);
        assert_eq!(s.text().matches("The sex is ").count(), 3);
        let zero = render_t_lang(&task, &[], &task.rows[0], RenderMode::Inference, &res).unwrap();
        assert_eq!(zero.text().matches("Answer: ").count(), 1);
        assert!(!zero.text().contains(&res.context_cue));
    }

    #[test]
    fn table_has_one_header() {
        let task = patient_task();
        let res = TemplateResource::builtin();
        let demos = [&task.rows[1], &task.rows[2]];
        let s = render_t_table(&task, &demos, &task.rows[0], RenderMode::Inference, &res).unwrap();
        let text = s.text();
        assert_eq!(text.matches("| age | sex | recovered |").count(), 1);
        let body: Vec<&str> = text.lines().filter(|l| l.starts_with("| ") && !l.contains("age") && !l.contains("---")).collect();
        assert_eq!(body.len(), 3);
        assert!(body[2].ends_with("| ? |"));
        assert_eq!(s.segments.last().unwrap().role, Role::TargetPlaceholder);
        assert_eq!(s.answer_text, "1");
    }

    #[test]
    fn table_rejects_delimiter_in_names() {
        let mut task = patient_task();
        task.features[0].name = "a|b".into();
        let res = TemplateResource::builtin();
        assert!(matches!(
            render_t_table(&task, &[], &task.rows[0], RenderMode::Train, &res),
            Err(Error::DelimiterInName(_))
        ));
    }

    #[test]
    fn table_cells_are_sanitized() {
        let mut task = patient_task();
        task.rows[0].values[1] = Cell::Cat("a|b\nc".into());
        let res = TemplateResource::builtin();
        let s = render_t_table(&task, &[], &task.rows[0], RenderMode::Train, &res).unwrap();
        assert!(s.text().contains("| 25 | a/b c | ? |"));
    }

    #[test]
    fn anony_header_and_metadata_independence() {
        let task = patient_task();
        let res = TemplateResource::builtin();
        let mut three = task.clone();
        three.features.push(FeatureSpec::new("x", FeatureKind::Numerical, Some("secret")));
        for r in &mut three.rows {
            r.values.push(Cell::Num(1.0));
        }
        let s = render_t_anony(&three, &[], &three.rows[0], RenderMode::Train, &res).unwrap();
        assert!(s.text().contains("| f1 | f2 | f3 | target |"));
        assert!(!s.text().contains("secret"));

        let mut other = task.clone();
        other.meta = TaskMeta {
            background: Some("different".into()),
            label_description: None,
            class_names: vec!["a".into(), "b".into()],
            label_name: "zzz".into(),
        };
        other.features[0].name = "renamed".into();
        other.features[0].description = Some("nothing".into());
        let demos = [&task.rows[1]];
        let a = render_t_anony(&task, &demos, &task.rows[2], RenderMode::Train, &res).unwrap();
        let demos = [&other.rows[1]];
        let b = render_t_anony(&other, &demos, &other.rows[2], RenderMode::Train, &res).unwrap();
        assert_eq!(a.text(), b.text());
    }

    #[test]
    fn resource_round_trips_through_toml() {
        let res = TemplateResource::builtin();
        let text = toml::to_string(&res).unwrap();
        assert_eq!(TemplateResource::from_toml(&text).unwrap(), res);
        assert!(TemplateResource::from_toml("version = 1").is_err());
    }
}
