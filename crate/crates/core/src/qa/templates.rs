use rand::seq::{index, IndexedRandom};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{vocabulary, AnswerType, QaItem, Subtask, Task};
use crate::annotation::{Flag, KeyLookup, Quadruplet, ReportAnnotation, SynonymSchema};
use crate::normalize::normalize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaTemplate {
    pub task: Task,
    pub subtask: Subtask,
    /// Text with `{slot}` placeholders.
    pub question_pattern: String,
    pub answer_pattern: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("slot {{{0}}} cannot be resolved from the annotation")]
    UnresolvableSlot(String),
    #[error("slot {{{0}}} needs a table but the annotation has no rows")]
    EmptyTable(String),
    #[error("unterminated slot in pattern {0:?}")]
    Unterminated(String),
}

/// Default report summarization: item count, abnormal count and the
/// abnormal item names.
pub fn summarization_template() -> QaTemplate {
    QaTemplate {
        task: Task::Custom,
        subtask: Subtask::Summarization,
        question_pattern: "What key elements should be noticed in this medical report?".into(),
        answer_pattern: "There are {item_count} items in this report. {abnormal_count} are not in \
                         standard reference, which are {abnormal_items}."
            .into(),
    }
}

/// A seeded surface form for a key: one of its schema synonyms when the key
/// is known, the key itself otherwise.
fn key_form(schema: &SynonymSchema, key: &str, rng: &mut ChaCha8Rng) -> String {
    match schema.canonicalize(key) {
        KeyLookup::Mapped(c) => schema
            .synonyms(&c)
            .and_then(|forms| forms.choose(rng))
            .cloned()
            .unwrap_or(c),
        KeyLookup::Unmapped(k) => k,
    }
}

pub fn generate_entity(ann: &ReportAnnotation, schema: &SynonymSchema, rng: &mut ChaCha8Rng) -> Vec<QaItem> {
    let pairs: Vec<_> = ann
        .kv_pairs
        .iter()
        .filter(|kv| !kv.key.trim().is_empty() && !kv.value.trim().is_empty())
        .collect();
    let mut out = Vec::new();
    for (n, kv) in pairs.iter().enumerate() {
        let key = key_form(schema, &kv.key, rng);
        out.push(QaItem::new(
            ann,
            Task::Entity,
            Subtask::Single,
            n,
            format!("What is the {key}?"),
            format!("{key} is {}.", kv.value),
            AnswerType::SingleSpan,
        ));
    }
    let mut n = 0;
    for i in 0..pairs.len() {
        for j in i + 1..pairs.len() {
            let (k1, k2) = (key_form(schema, &pairs[i].key, rng), key_form(schema, &pairs[j].key, rng));
            out.push(QaItem::new(
                ann,
                Task::Entity,
                Subtask::Multi,
                n,
                format!("What are the {k1} and {k2}?"),
                format!("{}; {}", pairs[i].value, pairs[j].value),
                AnswerType::MultiSpan,
            ));
            n += 1;
        }
    }
    out
}

fn usable_rows(ann: &ReportAnnotation) -> Vec<&Quadruplet> {
    ann.quadruplets
        .iter()
        .filter(|q| !q.item.trim().is_empty() && !q.result.trim().is_empty())
        .collect()
}

pub fn generate_table(ann: &ReportAnnotation, schema: &SynonymSchema, rng: &mut ChaCha8Rng) -> Vec<QaItem> {
    generate_table_with(ann, schema, rng, None)
}

/// `pairs` caps the sampled MultiRow pairs; `None` means `min(C(n, 2), 2n)`.
pub(crate) fn generate_table_with(
    ann: &ReportAnnotation,
    schema: &SynonymSchema,
    rng: &mut ChaCha8Rng,
    pairs: Option<usize>,
) -> Vec<QaItem> {
    let rows = usable_rows(ann);
    let mut out = Vec::new();
    for (n, q) in rows.iter().enumerate() {
        let result = vocabulary(schema, "Result", "result", rng);
        out.push(QaItem::new(
            ann,
            Task::Table,
            Subtask::SingleCell,
            n,
            format!("What is the {result} of {}?", q.item),
            format!("The {result} of {} is {}.", q.item, q.result),
            AnswerType::SingleSpan,
        ));
    }
    for (n, q) in rows.iter().filter(|q| !q.range.trim().is_empty()).enumerate() {
        let result = vocabulary(schema, "Result", "result", rng);
        let range = vocabulary(schema, "Range", "reference range", rng);
        out.push(QaItem::new(
            ann,
            Task::Table,
            Subtask::SingleRow,
            n,
            format!("What is the {result} and {range} of {}?", q.item),
            format!("The {result} of {} is {}, and the {range} is {}.", q.item, q.result, q.range),
            AnswerType::MultiSpan,
        ));
    }

    let all_pairs: Vec<(usize, usize)> =
        (0..rows.len()).flat_map(|i| (i + 1..rows.len()).map(move |j| (i, j))).collect();
    let wanted = pairs.unwrap_or(all_pairs.len().min(2 * rows.len())).min(all_pairs.len());
    let mut picked = index::sample(rng, all_pairs.len(), wanted).into_vec();
    picked.sort_unstable();
    for (n, p) in picked.into_iter().enumerate() {
        let (a, b) = (rows[all_pairs[p].0], rows[all_pairs[p].1]);
        let result = vocabulary(schema, "Result", "results", rng);
        let range = vocabulary(schema, "Range", "standard interval", rng);
        out.push(QaItem::new(
            ann,
            Task::Table,
            Subtask::MultiRow,
            n,
            format!("What are the {result} and {range} of {} and {} correspondingly?", a.item, b.item),
            format!("{}, {}, {}; {}, {}, {};", a.item, a.result, a.range, b.item, b.result, b.range),
            AnswerType::MultiSpan,
        ));
    }
    out
}

fn verdict(flag: Flag) -> &'static str {
    match flag {
        Flag::High => "abnormal (high)",
        Flag::Low => "abnormal (low)",
        _ => "normal",
    }
}

pub const NO_ABNORMAL_ANSWER: &str = "There are no abnormal indicators in this report.";

pub fn generate_tablenr(ann: &ReportAnnotation, schema: &SynonymSchema, rng: &mut ChaCha8Rng) -> Vec<QaItem> {
    let rows: Vec<&Quadruplet> =
        usable_rows(ann).into_iter().filter(|q| q.flag != Flag::Undetermined).collect();
    let mut out = Vec::new();
    for (n, q) in rows.iter().enumerate() {
        let result = vocabulary(schema, "Result", "result", rng);
        let range = vocabulary(schema, "Range", "normal range", rng);
        out.push(QaItem::new(
            ann,
            Task::TableNr,
            Subtask::Comparison,
            n,
            format!("Is {} within the {range}?", q.item),
            format!(
                "The {result} of {} is {} and the {range} is {}, hence {}.",
                q.item,
                q.result,
                q.range,
                verdict(q.flag)
            ),
            AnswerType::NonSpan,
        ));
    }
    if !rows.is_empty() {
        let abnormal: Vec<&str> =
            rows.iter().filter(|q| q.flag.is_abnormal()).map(|q| q.item.as_str()).collect();
        let answer = if abnormal.is_empty() {
            NO_ABNORMAL_ANSWER.to_string()
        } else {
            format!("{}.", abnormal.join(", "))
        };
        out.push(QaItem::new(
            ann,
            Task::TableNr,
            Subtask::MultiAbnormal,
            0,
            "Is there any abnormal indicators in this report?".into(),
            answer,
            AnswerType::NonSpan,
        ));
    }
    out
}

fn resolve_slot(ann: &ReportAnnotation, slot: &str) -> Result<String, TemplateError> {
    let table = || {
        if ann.quadruplets.is_empty() {
            Err(TemplateError::EmptyTable(slot.to_string()))
        } else {
            Ok(&ann.quadruplets)
        }
    };
    let missing = || TemplateError::UnresolvableSlot(slot.to_string());
    let row = |item: &str| {
        ann.quadruplets.iter().find(|q| normalize(&q.item) == normalize(item)).ok_or_else(missing)
    };
    match slot.split_once(':') {
        None => match slot {
            "image_id" => Ok(ann.image_id.clone()),
            "item_count" => Ok(table()?.len().to_string()),
            "abnormal_count" => Ok(table()?.iter().filter(|q| q.flag.is_abnormal()).count().to_string()),
            "abnormal_items" => {
                let names: Vec<&str> =
                    table()?.iter().filter(|q| q.flag.is_abnormal()).map(|q| q.item.as_str()).collect();
                Ok(if names.is_empty() { "none".into() } else { names.join(", ") })
            }
            _ => Err(missing()),
        },
        Some(("kv", key)) => ann
            .kv_pairs
            .iter()
            .find(|kv| {
                normalize(&kv.key) == normalize(key)
                    || kv.canonical_key.as_deref().is_some_and(|c| normalize(c) == normalize(key))
            })
            .map(|kv| kv.value.clone())
            .ok_or_else(missing),
        Some(("result", item)) => Ok(row(item)?.result.clone()),
        Some(("range", item)) => Ok(row(item)?.range.clone()),
        Some(("flag", item)) => Ok(row(item)?.flag.to_string()),
        Some(_) => Err(missing()),
    }
}

fn fill(pattern: &str, ann: &ReportAnnotation) -> Result<String, TemplateError> {
    let mut out = String::new();
    let mut rest = pattern;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let after = &rest[start + 1..];
        let end = after.find('}').ok_or_else(|| TemplateError::Unterminated(pattern.to_string()))?;
        out.push_str(&resolve_slot(ann, after[..end].trim())?);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Fills a customized template. Slots: `item_count`, `abnormal_count`,
/// `abnormal_items`, `image_id`, `kv:<key>`, `result:<item>`,
/// `range:<item>`, `flag:<item>`.
pub fn generate_custom(ann: &ReportAnnotation, template: &QaTemplate) -> Result<QaItem, TemplateError> {
    let question = fill(&template.question_pattern, ann)?;
    let answer = fill(&template.answer_pattern, ann)?;
    Ok(QaItem::new(ann, template.task, template.subtask, 0, question, answer, AnswerType::NonSpan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{ContextRefs, KeyValuePair, Quality, ReportClass};
    use crate::ocr::ImageType;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn ann(kv: Vec<(&str, &str)>, rows: Vec<Quadruplet>) -> ReportAnnotation {
        ReportAnnotation {
            image_id: "r1".into(),
            report_class: ReportClass::Laboratory,
            kv_pairs: kv.into_iter().map(|(k, v)| KeyValuePair::new(k, v)).collect(),
            quadruplets: rows,
            context_refs: ContextRefs::default(),
            quality: Quality::High,
            image_type: ImageType::ScannedPdf,
            declared_items: None,
        }
    }

    fn rows(n: usize) -> Vec<Quadruplet> {
        (0..n).map(|i| Quadruplet::new(&format!("I{i}"), &format!("{}", i + 1), "1-3", Flag::Normal)).collect()
    }

    #[test]
    fn entity_single_template() {
        let items = generate_entity(&ann(vec![("Impression", "renal cyst")], vec![]), &SynonymSchema::default(), &mut rng());
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].question, "What is the Impression?");
        assert_eq!(items[0].answer, "Impression is renal cyst.");
        assert_eq!(items[0].answer_type, AnswerType::SingleSpan);
    }

    #[test]
    fn entity_counts() {
        assert!(generate_entity(&ann(vec![], rows(1)), &SynonymSchema::builtin(), &mut rng()).is_empty());
        // n Single plus C(n, 2) Multi, counted by enumeration.
        let kv = vec![("Name", "Li"), ("Age", "54"), ("Test Date", "2023-01-02")];
        let items = generate_entity(&ann(kv, vec![]), &SynonymSchema::builtin(), &mut rng());
        let expected_multi = (0..3).flat_map(|i| (i + 1..3).map(move |j| (i, j))).count();
        assert_eq!(items.iter().filter(|q| q.subtask == Subtask::Single).count(), 3);
        assert_eq!(items.iter().filter(|q| q.subtask == Subtask::Multi).count(), expected_multi);
        assert_eq!(expected_multi, 3);
        let multi = items.iter().find(|q| q.subtask == Subtask::Multi).unwrap();
        assert_eq!(multi.answer, "Li; 54");
    }

    #[test]
    fn entity_key_uses_a_schema_synonym() {
        let schema = SynonymSchema::builtin();
        let items = generate_entity(&ann(vec![("Test Date", "2023-01-02")], vec![]), &schema, &mut rng());
        let forms = schema.synonyms("Date").unwrap();
        let key = items[0].answer.strip_suffix(" is 2023-01-02.").unwrap();
        assert!(forms.iter().any(|f| f == key), "{key}");
    }

    #[test]
    fn table_single_row_template() {
        let a = ann(vec![], vec![Quadruplet::new("Hb", "130", "115-150", Flag::Normal)]);
        let items = generate_table(&a, &SynonymSchema::default(), &mut rng());
        let row = items.iter().find(|q| q.subtask == Subtask::SingleRow).unwrap();
        assert_eq!(row.answer, "The result of Hb is 130, and the reference range is 115-150.");
        let cell = items.iter().find(|q| q.subtask == Subtask::SingleCell).unwrap();
        assert_eq!(cell.answer, "The result of Hb is 130.");
        assert_eq!(items.iter().filter(|q| q.subtask == Subtask::MultiRow).count(), 0);
    }

    #[test]
    fn table_counts_with_pair_sample() {
        let items = generate_table_with(&ann(vec![], rows(5)), &SynonymSchema::builtin(), &mut rng(), Some(2));
        let count = |s| items.iter().filter(|q| q.subtask == s).count();
        assert_eq!((count(Subtask::SingleCell), count(Subtask::SingleRow), count(Subtask::MultiRow)), (5, 5, 2));
        // Default cap is min(C(5,2), 10) = 10.
        let items = generate_table(&ann(vec![], rows(5)), &SynonymSchema::builtin(), &mut rng());
        assert_eq!(items.iter().filter(|q| q.subtask == Subtask::MultiRow).count(), 10);
        let items = generate_table(&ann(vec![], rows(3)), &SynonymSchema::builtin(), &mut rng());
        assert_eq!(items.iter().filter(|q| q.subtask == Subtask::MultiRow).count(), 3);
    }

    #[test]
    fn tablenr_comparison_and_multi() {
        let a = ann(
            vec![],
            vec![
                Quadruplet::new("WBC", "10.2", "3.5-9.5", Flag::High),
                Quadruplet::new("Hb", "130", "115-150", Flag::Normal),
                Quadruplet::new("PLT", "90", "125-350", Flag::Low),
                Quadruplet::new("Color", "yellow", "", Flag::Undetermined),
            ],
        );
        let items = generate_tablenr(&a, &SynonymSchema::default(), &mut rng());
        let cmp: Vec<_> = items.iter().filter(|q| q.subtask == Subtask::Comparison).collect();
        assert_eq!(cmp.len(), 3);
        assert!(cmp[0].answer.contains("abnormal (high)"));
        assert!(cmp[0].answer.contains("10.2") && cmp[0].answer.contains("3.5-9.5"));
        let multi = items.iter().find(|q| q.subtask == Subtask::MultiAbnormal).unwrap();
        // Filter oracle over the rows in order.
        let expected: Vec<&str> =
            a.quadruplets.iter().filter(|q| matches!(q.flag, Flag::High | Flag::Low)).map(|q| q.item.as_str()).collect();
        assert_eq!(multi.answer, format!("{}.", expected.join(", ")));
        assert_eq!(multi.answer, "WBC, PLT.");
    }

    #[test]
    fn tablenr_none_abnormal() {
        let items = generate_tablenr(&ann(vec![], rows(2)), &SynonymSchema::default(), &mut rng());
        let multi = items.iter().find(|q| q.subtask == Subtask::MultiAbnormal).unwrap();
        assert_eq!(multi.answer, NO_ABNORMAL_ANSWER);
    }

    #[test]
    fn summarization_counts() {
        let mut r = rows(10);
        r[2] = Quadruplet::new("ALT", "90", "0-40", Flag::High);
        r[7] = Quadruplet::new("K", "3.0", "3.5-5.5", Flag::Low);
        let item = generate_custom(&ann(vec![], r), &summarization_template()).unwrap();
        assert_eq!(
            item.answer,
            "There are 10 items in this report. 2 are not in standard reference, which are ALT, K."
        );
    }

    #[test]
    fn summarization_needs_rows() {
        let err = generate_custom(&ann(vec![("Name", "Li")], vec![]), &summarization_template()).unwrap_err();
        assert_eq!(err, TemplateError::EmptyTable("item_count".into()));
    }

    #[test]
    fn custom_slot_errors_name_the_slot() {
        let t = QaTemplate {
            task: Task::Custom,
            subtask: Subtask::Summarization,
            question_pattern: "How old is the patient?".into(),
            answer_pattern: "The patient is {kv:Age}.".into(),
        };
        let err = generate_custom(&ann(vec![("Name", "Li")], rows(1)), &t).unwrap_err();
        assert_eq!(err, TemplateError::UnresolvableSlot("kv:Age".into()));
        let ok = generate_custom(&ann(vec![("Age", "54")], rows(1)), &t).unwrap();
        assert_eq!(ok.answer, "The patient is 54.");
    }
}
