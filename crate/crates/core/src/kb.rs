//! Knowledge-base data model: examples, queries, validation and the
//! `question [SEP] choice [SEP] choice ...` textualization used for both
//! queries and passages.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Literal separator token placed between question and choices.
pub const SEP_TOKEN: &str = "[SEP]";

const SEP_WITH_SPACES: &str = " [SEP] ";

/// Maximum number of choices; labels run from `A` to `Z`.
pub const MAX_CHOICES: usize = 26;

/// Label for the choice at a zero-based position.
pub fn label_at(index: usize) -> char {
    assert!(index < MAX_CHOICES, "choice index {index} has no label");
    (b'A' + index as u8) as char
}

/// Zero-based position of a label, if it is an uppercase letter.
pub fn label_index(label: char) -> Option<usize> {
    label
        .is_ascii_uppercase()
        .then(|| (label as u8 - b'A') as usize)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub label: char,
    pub text: String,
}

impl Choice {
    pub fn at(index: usize, text: impl Into<String>) -> Self {
        Self {
            label: label_at(index),
            text: text.into(),
        }
    }
}

/// Build a positionally labeled choice list.
pub fn labeled_choices<I, S>(texts: I) -> Vec<Choice>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    texts
        .into_iter()
        .enumerate()
        .map(|(i, t)| Choice::at(i, t))
        .collect()
}

/// One knowledge-base entry: a question with its choices, the optional gold
/// label, explanations, and an optional topic tag used for positive mining.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub question: String,
    pub choices: Vec<Choice>,
    pub answer_label: Option<char>,
    pub explanations: Vec<String>,
    pub topic: Option<String>,
}

impl Example {
    pub fn new<I, S>(id: impl Into<String>, question: impl Into<String>, choices: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            id: id.into(),
            question: question.into(),
            choices: labeled_choices(choices),
            answer_label: None,
            explanations: Vec::new(),
            topic: None,
        }
    }

    pub fn with_answer(mut self, label: char) -> Self {
        self.answer_label = Some(label);
        self
    }

    pub fn with_explanations<I, S>(mut self, explanations: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.explanations = explanations.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_topic(mut self, topic: impl Into<String>) -> Self {
        self.topic = Some(topic.into());
        self
    }

    pub fn labels(&self) -> Vec<char> {
        self.choices.iter().map(|c| c.label).collect()
    }

    pub fn query_view(&self) -> QueryView {
        QueryView {
            id: self.id.clone(),
            question: self.question.clone(),
            choices: self.choices.clone(),
        }
    }

    /// Passage text for this example (same textualization as a query).
    pub fn passage(&self) -> String {
        serialize_parts(&self.question, self.choices.iter().map(|c| c.text.as_str()))
    }

    pub fn validate(&self) -> ValidationReport {
        validate_example(self)
    }
}

/// A question plus ordered choices: the unit of retrieval and answering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryView {
    pub id: String,
    pub question: String,
    pub choices: Vec<Choice>,
}

impl QueryView {
    pub fn new<I, S>(id: impl Into<String>, question: impl Into<String>, choices: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            id: id.into(),
            question: question.into(),
            choices: labeled_choices(choices),
        }
    }

    pub fn labels(&self) -> Vec<char> {
        self.choices.iter().map(|c| c.label).collect()
    }

    pub fn serialize(&self) -> String {
        serialize_query(self)
    }

    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        check_question(&self.question, &mut violations);
        check_choices(&self.choices, &mut violations);
        ValidationReport::from_violations(violations)
    }
}

/// `Q [SEP] c1 [SEP] c2 ... [SEP] cn`, no trailing separator.
pub fn serialize_query(q: &QueryView) -> String {
    serialize_parts(&q.question, q.choices.iter().map(|c| c.text.as_str()))
}

pub fn serialize_parts<'a>(question: &str, choices: impl IntoIterator<Item = &'a str>) -> String {
    let mut out = String::from(question);
    for choice in choices {
        out.push_str(SEP_WITH_SPACES);
        out.push_str(choice);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<String>,
}

impl ValidationReport {
    fn from_violations(violations: Vec<String>) -> Self {
        Self {
            ok: violations.is_empty(),
            violations,
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ok {
            f.write_str("ok")
        } else {
            f.write_str(&self.violations.join("; "))
        }
    }
}

fn check_question(question: &str, violations: &mut Vec<String>) {
    if question.trim().is_empty() {
        violations.push("question is empty".to_string());
    }
    if question.contains(SEP_WITH_SPACES) {
        violations.push("question contains the separator token \" [SEP] \"".to_string());
    }
}

fn check_choices(choices: &[Choice], violations: &mut Vec<String>) {
    if choices.len() < 2 {
        violations.push(format!("fewer than 2 choices ({})", choices.len()));
    }
    if choices.len() > MAX_CHOICES {
        violations.push(format!(
            "more than {MAX_CHOICES} choices ({})",
            choices.len()
        ));
    }
    let consecutive = choices
        .iter()
        .enumerate()
        .all(|(i, c)| i < MAX_CHOICES && c.label == label_at(i));
    if !consecutive {
        violations.push("labels not consecutive from A".to_string());
    }
    for (i, choice) in choices.iter().enumerate() {
        if choice.text.trim().is_empty() {
            violations.push(format!("empty choice text at index {i}"));
        }
        if choice.text.contains(SEP_WITH_SPACES) {
            violations.push(format!(
                "choice at index {i} contains the separator token \" [SEP] \""
            ));
        }
        if choice.text.contains('\n') || choice.text.contains('\r') {
            violations.push(format!("choice at index {i} contains a line break"));
        }
    }
}

/// Check every `Example` invariant, collecting all violations.
pub fn validate_example(ex: &Example) -> ValidationReport {
    let mut violations = Vec::new();
    if ex.id.trim().is_empty() {
        violations.push("id is empty".to_string());
    }
    check_question(&ex.question, &mut violations);
    check_choices(&ex.choices, &mut violations);
    if let Some(answer) = ex.answer_label {
        if !ex.choices.iter().any(|c| c.label == answer) {
            violations.push("answer label not among choices".to_string());
        }
    }
    for (i, explanation) in ex.explanations.iter().enumerate() {
        if explanation.trim().is_empty() {
            violations.push(format!("empty explanation at index {i}"));
        }
    }
    ValidationReport::from_violations(violations)
}

/// On-disk shape of one knowledge-base line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KbRecord {
    pub id: String,
    pub question: String,
    pub choices: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default)]
    pub explanations: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
}

impl KbRecord {
    pub fn into_example(self) -> Result<Example, String> {
        let answer_label = match self.answer {
            None => None,
            Some(a) => {
                let mut chars = a.trim().chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) if c.is_ascii_uppercase() => Some(c),
                    _ => return Err(format!("answer {a:?} is not a single uppercase letter")),
                }
            }
        };
        if self.choices.len() > MAX_CHOICES {
            return Err(format!(
                "more than {MAX_CHOICES} choices ({})",
                self.choices.len()
            ));
        }
        Ok(Example {
            id: self.id,
            question: self.question,
            choices: labeled_choices(self.choices),
            answer_label,
            explanations: self.explanations,
            topic: self.topic,
        })
    }
}

impl From<&Example> for KbRecord {
    fn from(ex: &Example) -> Self {
        Self {
            id: ex.id.clone(),
            question: ex.question.clone(),
            choices: ex.choices.iter().map(|c| c.text.clone()).collect(),
            answer: ex.answer_label.map(String::from),
            explanations: ex.explanations.clone(),
            topic: ex.topic.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum KbError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { id: String, line: usize },
    #[error("{source_name}: no records")]
    Empty { source_name: String },
}

/// Id-keyed examples in stable insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExampleSet {
    pub source_name: String,
    examples: Vec<Example>,
    positions: HashMap<String, usize>,
}

impl ExampleSet {
    pub fn new(source_name: impl Into<String>) -> Self {
        Self {
            source_name: source_name.into(),
            ..Self::default()
        }
    }

    /// Build from examples, rejecting duplicate ids (no other validation).
    pub fn from_examples(
        source_name: impl Into<String>,
        examples: impl IntoIterator<Item = Example>,
    ) -> Result<Self, KbError> {
        let mut set = Self::new(source_name);
        for (i, ex) in examples.into_iter().enumerate() {
            set.insert(ex, i + 1)?;
        }
        Ok(set)
    }

    fn insert(&mut self, ex: Example, line: usize) -> Result<(), KbError> {
        if self.positions.contains_key(&ex.id) {
            return Err(KbError::DuplicateId { id: ex.id, line });
        }
        self.positions.insert(ex.id.clone(), self.examples.len());
        self.examples.push(ex);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.positions.get(id).map(|&i| &self.examples[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.positions.contains_key(id)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Example> {
        self.examples.iter()
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.id.as_str())
    }
}

impl<'a> IntoIterator for &'a ExampleSet {
    type Item = &'a Example;
    type IntoIter = std::slice::Iter<'a, Example>;

    fn into_iter(self) -> Self::IntoIter {
        self.examples.iter()
    }
}

/// Parse the JSONL knowledge-base format; every record must validate.
pub fn read_examples(reader: impl BufRead, source_name: &str) -> Result<ExampleSet, KbError> {
    let mut set = ExampleSet::new(source_name);
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| KbError::Io {
            path: source_name.to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: KbRecord = serde_json::from_str(&line).map_err(|e| KbError::Malformed {
            line: line_no,
            reason: e.to_string(),
        })?;
        let example = record.into_example().map_err(|reason| KbError::Malformed {
            line: line_no,
            reason,
        })?;
        let report = validate_example(&example);
        if !report.ok {
            return Err(KbError::Malformed {
                line: line_no,
                reason: report.violations.join("; "),
            });
        }
        set.insert(example, line_no)?;
    }
    if set.is_empty() {
        return Err(KbError::Empty {
            source_name: source_name.to_string(),
        });
    }
    Ok(set)
}

pub fn load_examples(path: impl AsRef<Path>) -> Result<ExampleSet, KbError> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let file = File::open(path).map_err(|source| KbError::Io {
        path: name.clone(),
        source,
    })?;
    read_examples(BufReader::new(file), &name)
}

/// One JSON line per example, LF-terminated.
pub fn to_jsonl(set: &ExampleSet) -> String {
    let mut out = String::new();
    for ex in set {
        out.push_str(&serde_json::to_string(&KbRecord::from(ex)).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// `id<TAB>passage` lines for external encoders. Fails on the first id or
/// passage containing a tab.
pub fn passages_tsv(set: &ExampleSet) -> Result<String, String> {
    let mut out = String::new();
    for ex in set {
        let text = ex.passage();
        if ex.id.contains('\t') || text.contains('\t') {
            return Err(format!("{}: tab character in id or text", ex.id));
        }
        out.push_str(&format!("{}\t{text}\n", ex.id));
    }
    Ok(out)
}

pub fn write_examples(set: &ExampleSet, mut writer: impl Write) -> std::io::Result<()> {
    writer.write_all(to_jsonl(set).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn valid() -> Example {
        Example::new("q1", "Where do you keep pens?", ["desk drawer", "bank"])
            .with_answer('A')
            .with_explanations(["Pens are office supplies."])
            .with_topic("pen")
    }

    #[test]
    fn valid_example_has_no_violations() {
        let report = validate_example(&valid());
        assert!(report.ok);
        assert!(report.violations.is_empty());
    }

    #[test]
    fn non_consecutive_labels_detected() {
        let mut ex = valid();
        ex.choices[1].label = 'C';
        let report = validate_example(&ex);
        assert!(!report.ok);
        assert!(report
            .violations
            .contains(&"labels not consecutive from A".to_string()));
    }

    #[test]
    fn empty_explanation_detected() {
        let ex = valid().with_explanations(["fine", ""]);
        let report = validate_example(&ex);
        assert_eq!(report.violations, vec!["empty explanation at index 1"]);
    }

    #[test]
    fn every_violation_is_reported() {
        let mut ex = Example::new("", " ", ["only"]).with_explanations(["  "]);
        ex.answer_label = Some('F');
        let report = validate_example(&ex);
        assert_eq!(report.violations.len(), 5, "{:?}", report.violations);
    }

    #[test]
    fn answer_outside_choices() {
        let ex = Example::new("q", "Q?", ["a", "b", "c", "d", "e"]).with_answer('F');
        let report = validate_example(&ex);
        assert_eq!(report.violations, vec!["answer label not among choices"]);
    }

    #[test]
    fn separator_and_newline_rejected() {
        let ex = Example::new("q", "a [SEP] b", ["x\ny", "z"]);
        let report = validate_example(&ex);
        assert_eq!(report.violations.len(), 2);
    }

    #[test]
    fn serializes_with_literal_separator() {
        let q = QueryView::new(
            "dev-1",
            "Where could you find a toilet that only friends can use?",
            ["rest area", "school", "stadium", "apartment", "hospital"],
        );
        assert_eq!(
            q.serialize(),
            "Where could you find a toilet that only friends can use? [SEP] rest area \
             [SEP] school [SEP] stadium [SEP] apartment [SEP] hospital"
        );
    }

    #[test]
    fn single_choice_serialization() {
        assert_eq!(serialize_parts("Q?", ["x"]), "Q? [SEP] x");
    }

    #[test]
    fn serialization_is_order_sensitive() {
        let a = QueryView::new("q", "Q", ["x", "y"]);
        let b = QueryView::new("q", "Q", ["y", "x"]);
        assert_ne!(a.serialize(), b.serialize());
    }

    #[test]
    fn reads_two_line_file() {
        let text = "{\"id\":\"a\",\"question\":\"Q1\",\"choices\":[\"x\",\"y\"]}\n\
                    {\"id\":\"b\",\"question\":\"Q2\",\"choices\":[\"x\",\"y\"],\"answer\":\"B\",\"explanations\":[\"e\"],\"topic\":\"t\"}\n";
        let set = read_examples(text.as_bytes(), "mem").unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.ids().collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(set.get("b").unwrap().answer_label, Some('B'));
    }

    #[test]
    fn duplicate_id_names_id_and_line() {
        let text = "{\"id\":\"q1\",\"question\":\"Q\",\"choices\":[\"x\",\"y\"]}\n\
                    {\"id\":\"q2\",\"question\":\"Q\",\"choices\":[\"x\",\"y\"]}\n\
                    {\"id\":\"q1\",\"question\":\"Q\",\"choices\":[\"x\",\"y\"]}\n";
        let err = read_examples(text.as_bytes(), "mem").unwrap_err();
        assert!(matches!(&err, KbError::DuplicateId { id, line: 3 } if id == "q1"));
        let message = err.to_string();
        assert!(
            message.contains("q1") && message.contains("line 3"),
            "{message}"
        );
    }

    #[test]
    fn bad_answer_reports_line_and_reason() {
        let text = "{\"id\":\"q\",\"question\":\"Q\",\"choices\":[\"a\",\"b\",\"c\",\"d\",\"e\"],\"answer\":\"F\"}\n";
        let err = read_examples(text.as_bytes(), "mem").unwrap_err();
        assert_eq!(err.to_string(), "line 1: answer label not among choices");
    }

    #[test]
    fn malformed_json_reports_line() {
        let text = "{\"id\":\"q\",\"question\":\"Q\",\"choices\":[\"a\",\"b\"]}\n{not json\n";
        let err = read_examples(text.as_bytes(), "mem").unwrap_err();
        assert!(matches!(err, KbError::Malformed { line: 2, .. }));
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(
            read_examples("\n".as_bytes(), "mem"),
            Err(KbError::Empty { .. })
        ));
    }
}
