use std::collections::{HashMap, HashSet};

use rand::seq::{index, IndexedRandom};
use rand_chacha::ChaCha8Rng;

use super::{AnswerType, QaItem, Task, ABSTENTION_TOKEN};
use crate::annotation::{ReportAnnotation, SynonymSchema};
use crate::normalize::normalize;

const EXTRA_KEYS: [&str; 5] =
    ["Allergy History", "Blood Type", "Family History", "Smoking History", "Surgical History"];

const LAB_ITEMS: [&str; 20] = [
    "ALT", "AST", "Albumin", "Calcium", "Creatinine", "eGFR", "Ferritin", "Glucose", "HbA1c", "Hb",
    "Lactate", "PLT", "PSA", "Potassium", "RBC", "Sodium", "TSH", "Urea", "Uric Acid", "WBC",
];

const ENTITY_PREFIX: &str = "What is the ";
const TABLE_PREFIX: &str = "What is the result of ";

/// The key or item an unanswerable question asks about.
pub fn unanswerable_target(item: &QaItem) -> Option<&str> {
    let prefix = match item.task {
        Task::Entity => ENTITY_PREFIX,
        Task::Table => TABLE_PREFIX,
        _ => return None,
    };
    item.question.strip_prefix(prefix)?.strip_suffix('?')
}

fn absent_keys(ann: &ReportAnnotation, schema: &SynonymSchema) -> Vec<String> {
    let present: HashSet<String> = ann
        .kv_pairs
        .iter()
        .flat_map(|kv| [normalize(&kv.key), normalize(schema.canonicalize(&kv.key).key())])
        .collect();
    let mut out: Vec<String> = schema
        .canonical_terms()
        .chain(EXTRA_KEYS)
        .filter(|k| !present.contains(&normalize(k)) && !present.contains(&normalize(schema.canonicalize(k).key())))
        .map(String::from)
        .collect();
    out.sort();
    out.dedup();
    out
}

fn absent_items(ann: &ReportAnnotation) -> Vec<String> {
    let present: HashSet<String> = ann.quadruplets.iter().map(|q| normalize(&q.item)).collect();
    LAB_ITEMS.iter().filter(|i| !present.contains(&normalize(i))).map(|s| s.to_string()).collect()
}

/// Rewrites a seeded `fraction` of answerable Entity and Table items to ask
/// about a key or table item the report does not contain. Rewritten items
/// are unanswerable and carry [`ABSTENTION_TOKEN`] as their answer.
pub fn mark_unanswerable(
    mut bank: Vec<QaItem>,
    annotations: &[ReportAnnotation],
    schema: &SynonymSchema,
    rng: &mut ChaCha8Rng,
    fraction: f64,
) -> Vec<QaItem> {
    let fraction = fraction.clamp(0.0, 1.0);
    let by_id: HashMap<&str, &ReportAnnotation> =
        annotations.iter().map(|a| (a.image_id.as_str(), a)).collect();
    let eligible: Vec<usize> = bank
        .iter()
        .enumerate()
        .filter(|(_, q)| q.answerable && matches!(q.task, Task::Entity | Task::Table))
        .filter(|(_, q)| by_id.contains_key(q.image_id.as_str()))
        .map(|(i, _)| i)
        .collect();
    let count = ((fraction * eligible.len() as f64).round() as usize).min(eligible.len());
    if count == 0 {
        return bank;
    }
    let mut picked = index::sample(rng, eligible.len(), count).into_vec();
    picked.sort_unstable();

    for p in picked {
        let item = &mut bank[eligible[p]];
        let ann = by_id[item.image_id.as_str()];
        let (pool, prefix) = match item.task {
            Task::Entity => (absent_keys(ann, schema), ENTITY_PREFIX),
            _ => (absent_items(ann), TABLE_PREFIX),
        };
        let Some(target) = pool.choose(rng) else {
            continue;
        };
        item.question = format!("{prefix}{target}?");
        item.answer = ABSTENTION_TOKEN.to_string();
        item.answer_type = AnswerType::NonSpan;
        item.answerable = false;
    }
    bank
}
