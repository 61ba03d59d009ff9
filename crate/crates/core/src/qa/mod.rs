//! Seeded question-answer bank generation from report annotations.
//!
//! Five task families: entity lookup, table lookup, table numerical
//! reasoning, clinical reasoning (multiple choice and short answer), and
//! customized templates. Generation is per annotation and independent; the
//! multiple-choice position balancing and unanswerable rewriting run as a
//! single ordered pass afterwards.

mod reasoning;
mod similarity;
mod templates;
mod unanswerable;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{FactBase, ReportAnnotation, SynonymSchema};
use crate::parallel::{map_ordered, Execution};
use crate::seeding::derive_seed;

pub use reasoning::{balance_options, generate_reasoning_mc, generate_reasoning_sa, rank_distractors};
pub use similarity::{BigramCosine, Embedder, EmbeddingSimilarity, HttpEmbedder, SimilarityProvider};
pub use templates::{
    generate_custom, generate_entity, generate_table, generate_tablenr, summarization_template,
    QaTemplate, TemplateError,
};
pub use unanswerable::{mark_unanswerable, unanswerable_target};

/// Answer used for items whose target is absent from the report.
pub const ABSTENTION_TOKEN: &str = "UNANSWERABLE";
/// Options per multiple-choice item: the gold title plus three distractors.
pub const MC_OPTIONS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    Entity,
    Table,
    #[serde(rename = "TableNR")]
    TableNr,
    Reason,
    Custom,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Entity => "Entity",
            Task::Table => "Table",
            Task::TableNr => "TableNR",
            Task::Reason => "Reason",
            Task::Custom => "Custom",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subtask {
    Single,
    Multi,
    SingleCell,
    SingleRow,
    MultiRow,
    Comparison,
    MultiAbnormal,
    #[serde(rename = "MC")]
    Mc,
    #[serde(rename = "SA")]
    Sa,
    Summarization,
}

impl Subtask {
    /// Single-target questions versus those spanning several targets.
    pub fn is_single(self) -> bool {
        matches!(
            self,
            Subtask::Single | Subtask::SingleCell | Subtask::SingleRow | Subtask::Comparison | Subtask::Mc
        )
    }
}

impl fmt::Display for Subtask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subtask::Mc => f.write_str("MC"),
            Subtask::Sa => f.write_str("SA"),
            other => fmt::Debug::fmt(other, f),
        }
    }
}

/// Single-span, multi-span or non-span answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnswerType {
    #[serde(rename = "SS")]
    SingleSpan,
    #[serde(rename = "MS")]
    MultiSpan,
    #[serde(rename = "NS")]
    NonSpan,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub qa_id: String,
    pub image_id: String,
    pub task: Task,
    pub subtask: Subtask,
    pub question: String,
    pub answer: String,
    pub answer_type: AnswerType,
    pub answerable: bool,
    pub options: Option<Vec<String>>,
    pub correct_index: Option<usize>,
    pub context_ids: Vec<String>,
}

impl QaItem {
    pub(crate) fn new(
        ann: &ReportAnnotation,
        task: Task,
        subtask: Subtask,
        n: usize,
        question: String,
        answer: String,
        answer_type: AnswerType,
    ) -> Self {
        QaItem {
            qa_id: format!("{}:{task}:{subtask}:{n}", ann.image_id),
            image_id: ann.image_id.clone(),
            task,
            subtask,
            question,
            answer,
            answer_type,
            answerable: true,
            options: None,
            correct_index: None,
            context_ids: Vec::new(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum QaError {
    #[error("fact base needs at least {MC_OPTIONS} titles, has {0}")]
    TooFewTitles(usize),
    #[error("{image_id}: context id {id:?} not in the fact base")]
    UnknownContext { image_id: String, id: String },
    #[error("{image_id}: only {available} distractor candidates for {gold:?}")]
    TooFewDistractors { image_id: String, gold: String, available: usize },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("bank line {line}: {source}")]
    Jsonl { line: usize, source: serde_json::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub seed: u64,
    /// MultiRow pairs per report; `None` means `min(C(n, 2), 2n)`.
    pub multi_row_pairs: Option<usize>,
    pub unanswerable_fraction: f64,
    pub entity: bool,
    pub table: bool,
    pub tablenr: bool,
    pub reasoning: bool,
    pub summarization: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 0,
            multi_row_pairs: None,
            unanswerable_fraction: 0.0,
            entity: true,
            table: true,
            tablenr: true,
            reasoning: true,
            summarization: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), QaError> {
        if !(0.0..=1.0).contains(&self.unanswerable_fraction) {
            return Err(QaError::Config(format!(
                "unanswerable_fraction must be in [0, 1], got {}",
                self.unanswerable_fraction
            )));
        }
        Ok(())
    }
}

const STREAM_UNANSWERABLE: u64 = u64::MAX;
const STREAM_BALANCE: u64 = u64::MAX - 1;

/// Generates every enabled task family for each annotation (sorted by
/// image id), then balances multiple-choice positions and rewrites a
/// seeded fraction of entity/table items as unanswerable.
pub fn generate_bank(
    annotations: &[ReportAnnotation],
    facts: &FactBase,
    schema: &SynonymSchema,
    sim: &dyn SimilarityProvider,
    config: &GeneratorConfig,
    exec: Execution,
) -> Result<Vec<QaItem>, QaError> {
    config.validate()?;
    let mut sorted: Vec<&ReportAnnotation> = annotations.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let any_reasoning = config.reasoning && sorted.iter().any(|a| !a.context_refs.is_empty());
    if any_reasoning && facts.len() < MC_OPTIONS {
        return Err(QaError::TooFewTitles(facts.len()));
    }

    let per_doc = map_ordered(&sorted, exec, |i, ann| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, i as u64));
        generate_for_annotation(ann, facts, schema, sim, config, &mut rng)
    });
    let mut bank = Vec::new();
    for items in per_doc {
        bank.extend(items?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_BALANCE));
    balance_options(&mut bank, &mut rng);
    if config.unanswerable_fraction > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_UNANSWERABLE));
        bank = mark_unanswerable(bank, annotations, schema, &mut rng, config.unanswerable_fraction);
    }
    Ok(bank)
}

fn generate_for_annotation(
    ann: &ReportAnnotation,
    facts: &FactBase,
    schema: &SynonymSchema,
    sim: &dyn SimilarityProvider,
    config: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<QaItem>, QaError> {
    let mut items = Vec::new();
    if config.entity {
        items.extend(generate_entity(ann, schema, rng));
    }
    if config.table {
        items.extend(templates::generate_table_with(ann, schema, rng, config.multi_row_pairs));
    }
    if config.tablenr {
        items.extend(generate_tablenr(ann, schema, rng));
    }
    if config.reasoning && !ann.context_refs.is_empty() {
        items.extend(generate_reasoning_mc(ann, facts, sim)?);
        items.extend(generate_reasoning_sa(ann, facts)?);
    }
    if config.summarization && !ann.quadruplets.is_empty() {
        items.push(generate_custom(ann, &summarization_template())?);
    }
    Ok(items)
}

pub fn write_jsonl(bank: &[QaItem]) -> String {
    let mut out = String::new();
    for item in bank {
        out.push_str(&serde_json::to_string(item).expect("QA item serializes"));
        out.push('\n');
    }
    out
}

pub fn read_jsonl(text: &str) -> Result<Vec<QaItem>, QaError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| QaError::Jsonl { line: i + 1, source }))
        .collect()
}

/// Picks a surface form for a vocabulary term: a seeded synonym when the
/// schema knows the term, `fallback` otherwise.
pub(crate) fn vocabulary(
    schema: &SynonymSchema,
    canonical: &str,
    fallback: &str,
    rng: &mut ChaCha8Rng,
) -> String {
    use rand::seq::IndexedRandom;
    match schema.synonyms(canonical) {
        Some(forms) if !forms.is_empty() => forms.choose(rng).unwrap().to_lowercase(),
        _ => fallback.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{ContextFact, ContextRefs, ContextType, FactClass, Flag, KeyValuePair, Quadruplet, Quality, ReportClass};
    use crate::ocr::ImageType;

    pub(crate) fn fact(id: &str, title: &str) -> ContextFact {
        ContextFact {
            id: id.into(),
            title: title.into(),
            report_class: FactClass::Laboratory,
            context_type: ContextType::ExamDisease,
            description: format!("{title} description"),
        }
    }

    fn annotation(id: &str, refs: Vec<&str>) -> ReportAnnotation {
        ReportAnnotation {
            image_id: id.into(),
            report_class: ReportClass::Laboratory,
            kv_pairs: vec![KeyValuePair::new("Name", "Li"), KeyValuePair::new("Age", "54")],
            quadruplets: vec![
                Quadruplet::new("WBC", "10.2", "3.5-9.5", Flag::High),
                Quadruplet::new("Hb", "130", "115-150", Flag::Normal),
            ],
            context_refs: ContextRefs { diagnosis: refs.into_iter().map(String::from).collect(), ..Default::default() },
            quality: Quality::High,
            image_type: ImageType::Photo,
            declared_items: None,
        }
    }

    fn facts() -> FactBase {
        FactBase::new(vec![
            fact("f1", "Mild Anemia"),
            fact("f2", "Moderate Anemia"),
            fact("f3", "Severe Anemia"),
            fact("f4", "Renal Cysts Treatment"),
            fact("f5", "Thrombosis Formation"),
        ])
        .unwrap()
    }

    #[test]
    fn bank_is_deterministic_and_round_trips() {
        let anns = vec![annotation("b", vec!["f1"]), annotation("a", vec!["f5"])];
        let config = GeneratorConfig { seed: 9, unanswerable_fraction: 0.3, ..Default::default() };
        let gen = |exec| {
            generate_bank(&anns, &facts(), &SynonymSchema::builtin(), &BigramCosine, &config, exec).unwrap()
        };
        let a = gen(Execution::Parallel);
        let b = gen(Execution::Sequential);
        assert_eq!(write_jsonl(&a), write_jsonl(&b));
        assert_eq!(read_jsonl(&write_jsonl(&a)).unwrap(), a);
        assert!(a[0].image_id == "a");
    }

    #[test]
    fn too_few_titles_is_an_error() {
        let small = FactBase::new(vec![fact("f1", "A"), fact("f2", "B"), fact("f3", "C")]).unwrap();
        let err = generate_bank(
            &[annotation("a", vec!["f1"])],
            &small,
            &SynonymSchema::builtin(),
            &BigramCosine,
            &GeneratorConfig::default(),
            Execution::Sequential,
        )
        .unwrap_err();
        assert!(matches!(err, QaError::TooFewTitles(3)));
    }

    #[test]
    fn qa_item_json_field_names() {
        let bank = generate_bank(
            &[annotation("a", vec!["f1"])],
            &facts(),
            &SynonymSchema::builtin(),
            &BigramCosine,
            &GeneratorConfig::default(),
            Execution::Sequential,
        )
        .unwrap();
        let mc = bank.iter().find(|q| q.subtask == Subtask::Mc).unwrap();
        let v: serde_json::Value = serde_json::to_value(mc).unwrap();
        assert_eq!(v["task"], "Reason");
        assert_eq!(v["subtask"], "MC");
        assert_eq!(v["answer_type"], "NS");
        assert_eq!(v["options"].as_array().unwrap().len(), 4);
        let tnr = bank.iter().find(|q| q.task == Task::TableNr).unwrap();
        assert_eq!(serde_json::to_value(tnr).unwrap()["task"], "TableNR");
        assert!(serde_json::to_value(tnr).unwrap()["options"].is_null());
    }
}
