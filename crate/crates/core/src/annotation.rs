//! Report ground truth: key-value pairs, lab quadruplets, clinical context
//! facts and the synonym schema, plus reference-range parsing and abnormal
//! flag recomputation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::normalize::{collapse, normalize};
use crate::ocr::ImageType;

#[derive(Debug, thiserror::Error)]
pub enum AnnotationError {
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unparseable reference range {0:?}")]
    Range(String),
    #[error("synonym {synonym:?} maps to both {first:?} and {second:?}")]
    SynonymConflict { synonym: String, first: String, second: String },
    #[error("duplicate context title {0:?}")]
    DuplicateTitle(String),
    #[error("duplicate context id {0:?}")]
    DuplicateId(String),
    #[error("invalid annotation {image_id}: {reason}")]
    Invalid { image_id: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyValuePair {
    pub key: String,
    pub value: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canonical_key: Option<String>,
    /// Set when an empty value is intentional.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub missing: bool,
}

impl KeyValuePair {
    pub fn new(key: impl Into<String>, value: impl Into<String>) -> Self {
        KeyValuePair { key: key.into(), value: value.into(), canonical_key: None, missing: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Flag {
    Normal,
    High,
    Low,
    Undetermined,
}

impl Flag {
    pub fn is_abnormal(self) -> bool {
        matches!(self, Flag::High | Flag::Low)
    }
}

impl fmt::Display for Flag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quadruplet {
    pub item: String,
    pub result: String,
    /// Reference range as printed.
    pub range: String,
    pub flag: Flag,
}

impl Quadruplet {
    pub fn new(item: &str, result: &str, range: &str, flag: Flag) -> Self {
        Quadruplet { item: item.into(), result: result.into(), range: range.into(), flag }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RangeSpec {
    ClosedInterval { lo: f64, hi: f64 },
    LowerOnly { lo: f64 },
    UpperOnly { hi: f64 },
    Qualitative { expected: String },
}

static NUMBER: &str = r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)";
static CLOSED_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(&format!(r"^({NUMBER})\s*(?:-|–|—|~|〜|to)\s*({NUMBER})$")).unwrap());
static UPPER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(&format!(r"^(?:<=|<|≤|≦)\s*({NUMBER})$")).unwrap());
static LOWER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(&format!(r"^(?:>=|>|≥|≧)\s*({NUMBER})$")).unwrap());
static NUMBER_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(&format!("^{NUMBER}$")).unwrap());

/// Width-folds, trims, and turns a lone decimal comma into a point.
fn numeric_form(raw: &str) -> String {
    let s = collapse(raw);
    if s.matches(',').count() == 1 && !s.contains('.') {
        s.replace(',', ".")
    } else {
        s
    }
}

/// Parses a numeric lab result, tolerating full-width digits, a decimal
/// comma and trailing direction markers such as `↑`.
pub fn parse_number(raw: &str) -> Option<f64> {
    let s = numeric_form(raw);
    let s = s.trim_end_matches(['↑', '↓', '*', ' ']);
    if NUMBER_RE.is_match(s) {
        s.parse().ok()
    } else {
        None
    }
}

pub fn parse_range(raw: &str) -> Result<RangeSpec, AnnotationError> {
    let s = numeric_form(raw);
    let err = || AnnotationError::Range(raw.to_string());
    if s.is_empty() {
        return Err(err());
    }
    let num = |m: &str| m.parse::<f64>().map_err(|_| err());
    if let Some(c) = CLOSED_RE.captures(&s) {
        let (lo, hi) = (num(&c[1])?, num(&c[2])?);
        if lo > hi {
            return Err(err());
        }
        return Ok(RangeSpec::ClosedInterval { lo, hi });
    }
    if let Some(c) = UPPER_RE.captures(&s) {
        return Ok(RangeSpec::UpperOnly { hi: num(&c[1])? });
    }
    if let Some(c) = LOWER_RE.captures(&s) {
        return Ok(RangeSpec::LowerOnly { lo: num(&c[1])? });
    }
    if !s.chars().any(|c| c.is_ascii_digit()) && s.chars().any(char::is_alphabetic) {
        return Ok(RangeSpec::Qualitative { expected: s });
    }
    Err(err())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assessment {
    pub flag: Flag,
    /// The result failed a qualitative expectation; `flag` is then `High`.
    pub qualitative: bool,
}

impl Assessment {
    fn numeric(flag: Flag) -> Self {
        Assessment { flag, qualitative: false }
    }
}

/// Compares a result against a reference range. Bounds are inclusive.
pub fn check_abnormal(result: &str, spec: &RangeSpec) -> Assessment {
    if let RangeSpec::Qualitative { expected } = spec {
        let ok = normalize(result) == normalize(expected);
        return Assessment { flag: if ok { Flag::Normal } else { Flag::High }, qualitative: !ok };
    }
    let Some(v) = parse_number(result) else {
        return Assessment::numeric(Flag::Undetermined);
    };
    let flag = match *spec {
        RangeSpec::ClosedInterval { lo, .. } if v < lo => Flag::Low,
        RangeSpec::ClosedInterval { hi, .. } if v > hi => Flag::High,
        RangeSpec::UpperOnly { hi } if v > hi => Flag::High,
        RangeSpec::LowerOnly { lo } if v < lo => Flag::Low,
        _ => Flag::Normal,
    };
    Assessment::numeric(flag)
}

/// The flag a quadruplet should carry given its result and printed range.
pub fn expected_flag(result: &str, range: &str) -> Flag {
    match parse_range(range) {
        Ok(spec) => check_abnormal(result, &spec).flag,
        Err(_) => Flag::Undetermined,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactClass {
    Laboratory,
    Clinical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ContextType {
    #[serde(rename = "Exam-Disease")]
    ExamDisease,
    #[serde(rename = "Exam-Status")]
    ExamStatus,
    #[serde(rename = "Disease-Status")]
    DiseaseStatus,
    #[serde(rename = "Disease-Advice")]
    DiseaseAdvice,
    #[serde(rename = "Exam")]
    Exam,
    #[serde(rename = "Disease-Exam")]
    DiseaseExam,
    #[serde(rename = "Disease-Treatment")]
    DiseaseTreatment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextFact {
    pub id: String,
    pub title: String,
    pub report_class: FactClass,
    pub context_type: ContextType,
    pub description: String,
}

/// Clinical fact base keyed by id; titles are unique.
#[derive(Debug, Clone, Default)]
pub struct FactBase {
    facts: Vec<ContextFact>,
    by_id: HashMap<String, usize>,
}

impl FactBase {
    pub fn new(facts: Vec<ContextFact>) -> Result<Self, AnnotationError> {
        let mut by_id = HashMap::new();
        let mut titles = HashSet::new();
        for (i, f) in facts.iter().enumerate() {
            if by_id.insert(f.id.clone(), i).is_some() {
                return Err(AnnotationError::DuplicateId(f.id.clone()));
            }
            if !titles.insert(f.title.as_str()) {
                return Err(AnnotationError::DuplicateTitle(f.title.clone()));
            }
        }
        Ok(FactBase { facts, by_id })
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, AnnotationError> {
        FactBase::new(serde_json::from_slice(bytes)?)
    }

    pub fn get(&self, id: &str) -> Option<&ContextFact> {
        self.by_id.get(id).map(|&i| &self.facts[i])
    }

    pub fn facts(&self) -> &[ContextFact] {
        &self.facts
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KeyLookup {
    Mapped(String),
    Unmapped(String),
}

impl KeyLookup {
    pub fn key(&self) -> &str {
        match self {
            KeyLookup::Mapped(k) | KeyLookup::Unmapped(k) => k,
        }
    }

    pub fn is_mapped(&self) -> bool {
        matches!(self, KeyLookup::Mapped(_))
    }
}

/// Canonical term -> synonyms. Lookup is by normalized form
/// (width-folded, whitespace-collapsed, case-folded).
#[derive(Debug, Clone, Default)]
pub struct SynonymSchema {
    entries: BTreeMap<String, Vec<String>>,
    lookup: HashMap<String, String>,
}

impl SynonymSchema {
    pub fn new(entries: BTreeMap<String, Vec<String>>) -> Result<Self, AnnotationError> {
        let mut lookup: HashMap<String, String> = HashMap::new();
        let mut cleaned = BTreeMap::new();
        for (canonical, synonyms) in entries {
            let canonical = collapse(&canonical);
            let mut list = vec![canonical.clone()];
            for s in synonyms {
                let s = collapse(&s);
                if !s.is_empty() && !list.iter().any(|x| normalize(x) == normalize(&s)) {
                    list.push(s);
                }
            }
            for term in &list {
                if let Some(prev) = lookup.insert(normalize(term), canonical.clone()) {
                    if prev != canonical {
                        return Err(AnnotationError::SynonymConflict {
                            synonym: term.clone(),
                            first: prev,
                            second: canonical,
                        });
                    }
                }
            }
            cleaned.entry(canonical).or_insert_with(Vec::new).extend(list);
        }
        Ok(SynonymSchema { entries: cleaned, lookup })
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, AnnotationError> {
        SynonymSchema::new(serde_json::from_slice(bytes)?)
    }

    pub fn to_json(&self) -> String {
        let out: BTreeMap<&String, Vec<&String>> =
            self.entries.iter().map(|(k, v)| (k, v.iter().skip(1).collect())).collect();
        serde_json::to_string_pretty(&out).expect("schema serializes")
    }

    /// Medical report vocabulary bundled with the crate.
    pub fn builtin() -> Self {
        SynonymSchema::from_json(include_bytes!("../data/synonyms.json"))
            .expect("bundled schema is valid")
    }

    pub fn canonicalize(&self, key: &str) -> KeyLookup {
        match self.lookup.get(&normalize(key)) {
            Some(c) => KeyLookup::Mapped(c.clone()),
            None => KeyLookup::Unmapped(key.to_string()),
        }
    }

    /// All surface forms of a canonical term, canonical first.
    pub fn synonyms(&self, canonical: &str) -> Option<&[String]> {
        self.entries.get(canonical).map(Vec::as_slice)
    }

    pub fn canonical_terms(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Every surface form known to the schema.
    pub fn all_terms(&self) -> impl Iterator<Item = &str> {
        self.entries.values().flatten().map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportClass {
    Laboratory,
    Diagnostic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Quality {
    High,
    Low,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextRefs {
    #[serde(default)]
    pub diagnosis: Vec<String>,
    #[serde(default)]
    pub status: Vec<String>,
    #[serde(default)]
    pub advice: Vec<String>,
}

impl ContextRefs {
    pub fn is_empty(&self) -> bool {
        self.diagnosis.is_empty() && self.status.is_empty() && self.advice.is_empty()
    }

    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.diagnosis.iter().chain(&self.status).chain(&self.advice)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportAnnotation {
    pub image_id: String,
    pub report_class: ReportClass,
    #[serde(default, rename = "kv")]
    pub kv_pairs: Vec<KeyValuePair>,
    #[serde(default, rename = "table")]
    pub quadruplets: Vec<Quadruplet>,
    #[serde(default)]
    pub context_refs: ContextRefs,
    pub quality: Quality,
    pub image_type: ImageType,
    /// Row count declared by the annotator, checked against `table`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub declared_items: Option<usize>,
}

impl ReportAnnotation {
    pub fn from_json(bytes: &[u8]) -> Result<Self, AnnotationError> {
        let ann: ReportAnnotation = serde_json::from_slice(bytes)?;
        ann.check()?;
        Ok(ann)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("annotation serializes")
    }

    fn check(&self) -> Result<(), AnnotationError> {
        let invalid = |reason: &str| AnnotationError::Invalid {
            image_id: self.image_id.clone(),
            reason: reason.to_string(),
        };
        if self.image_id.trim().is_empty() {
            return Err(invalid("empty image_id"));
        }
        if self.report_class == ReportClass::Laboratory
            && self.kv_pairs.is_empty()
            && self.quadruplets.is_empty()
        {
            return Err(invalid("laboratory report without kv pairs or table rows"));
        }
        Ok(())
    }

    /// Fills `canonical_key` on every kv pair the schema resolves.
    pub fn canonicalize_keys(&mut self, schema: &SynonymSchema) {
        for kv in &mut self.kv_pairs {
            kv.canonical_key = match schema.canonicalize(&kv.key) {
                KeyLookup::Mapped(c) => Some(c),
                KeyLookup::Unmapped(_) => None,
            };
        }
    }
}
