use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{AnswerType, QaError, QaItem, SimilarityProvider, Subtask, Task, MC_OPTIONS};
use crate::annotation::{ContextFact, FactBase, ReportAnnotation};

#[derive(Debug, Clone, Copy)]
enum Category {
    Diagnosis,
    Status,
    Advice,
}

impl Category {
    fn refs(self, ann: &ReportAnnotation) -> &[String] {
        match self {
            Category::Diagnosis => &ann.context_refs.diagnosis,
            Category::Status => &ann.context_refs.status,
            Category::Advice => &ann.context_refs.advice,
        }
    }

    fn mc_question(self) -> &'static str {
        match self {
            Category::Diagnosis => "Based on the report and the context, which is the most likely diagnosis?",
            Category::Status => "Based on the report and the context, what is the status of the disease?",
            Category::Advice => "Based on the report and the context, what is the recommended advice?",
        }
    }

    fn sa_question(self) -> &'static str {
        match self {
            Category::Diagnosis => "Based on the report and the context, what is the diagnosis?",
            Category::Status => "Based on the report and the context, what is the status of the disease?",
            Category::Advice => "Based on the report and the context, what advice should be given?",
        }
    }
}

const CATEGORIES: [Category; 3] = [Category::Diagnosis, Category::Status, Category::Advice];

fn resolve<'a>(ann: &ReportAnnotation, facts: &'a FactBase, id: &str) -> Result<&'a ContextFact, QaError> {
    facts.get(id).ok_or_else(|| QaError::UnknownContext { image_id: ann.image_id.clone(), id: id.to_string() })
}

/// The `MC_OPTIONS - 1` facts whose titles score highest against
/// `gold_title`, skipping `excluded` ids. Ties go to the smaller fact id.
pub fn rank_distractors<'a>(
    gold_title: &str,
    facts: &'a FactBase,
    excluded: &[String],
    sim: &dyn SimilarityProvider,
) -> Vec<&'a ContextFact> {
    let mut scored: Vec<(f64, &ContextFact)> = facts
        .facts()
        .iter()
        .filter(|f| !excluded.contains(&f.id) && f.title != gold_title)
        .map(|f| (sim.score(gold_title, &f.title), f))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
    scored.into_iter().take(MC_OPTIONS - 1).map(|(_, f)| f).collect()
}

/// One multiple-choice item per gold context reference. Options start as
/// `[gold, d1, d2, d3]` with `correct_index = 0`; [`balance_options`] moves
/// the gold into its final slot.
pub fn generate_reasoning_mc(
    ann: &ReportAnnotation,
    facts: &FactBase,
    sim: &dyn SimilarityProvider,
) -> Result<Vec<QaItem>, QaError> {
    if ann.context_refs.is_empty() {
        return Ok(Vec::new());
    }
    if facts.len() < MC_OPTIONS {
        return Err(QaError::TooFewTitles(facts.len()));
    }
    let mut out = Vec::new();
    let mut n = 0;
    for cat in CATEGORIES {
        let golds = cat.refs(ann);
        for id in golds {
            let gold = resolve(ann, facts, id)?;
            let distractors = rank_distractors(&gold.title, facts, golds, sim);
            if distractors.len() < MC_OPTIONS - 1 {
                return Err(QaError::TooFewDistractors {
                    image_id: ann.image_id.clone(),
                    gold: gold.title.clone(),
                    available: distractors.len(),
                });
            }
            let mut options = vec![gold.title.clone()];
            options.extend(distractors.iter().map(|f| f.title.clone()));
            let mut item = QaItem::new(
                ann,
                Task::Reason,
                Subtask::Mc,
                n,
                cat.mc_question().to_string(),
                gold.title.clone(),
                AnswerType::NonSpan,
            );
            item.options = Some(options);
            item.correct_index = Some(0);
            item.context_ids = vec![gold.id.clone()];
            out.push(item);
            n += 1;
        }
    }
    Ok(out)
}

/// One short-answer item per non-empty category; the answer lists the gold
/// titles in annotation order.
pub fn generate_reasoning_sa(ann: &ReportAnnotation, facts: &FactBase) -> Result<Vec<QaItem>, QaError> {
    let mut out = Vec::new();
    for (n, cat) in CATEGORIES.into_iter().filter(|c| !c.refs(ann).is_empty()).enumerate() {
        let ids = cat.refs(ann);
        let titles = ids
            .iter()
            .map(|id| resolve(ann, facts, id).map(|f| f.title.as_str()))
            .collect::<Result<Vec<_>, _>>()?;
        let mut item = QaItem::new(
            ann,
            Task::Reason,
            Subtask::Sa,
            n,
            cat.sa_question().to_string(),
            titles.join("; "),
            AnswerType::NonSpan,
        );
        item.context_ids = ids.to_vec();
        out.push(item);
    }
    Ok(out)
}

/// Round-robin placement of the gold option over positions `0..4` in bank
/// order, from a seeded starting position. Distractors keep their rank
/// order in the remaining slots.
pub fn balance_options(bank: &mut [QaItem], rng: &mut ChaCha8Rng) {
    let mut position = rng.random_range(0..MC_OPTIONS);
    for item in bank.iter_mut().filter(|q| q.options.is_some()) {
        let options = item.options.as_mut().unwrap();
        let gold_at = item.correct_index.unwrap_or(0);
        let gold = options.remove(gold_at);
        options.insert(position, gold);
        item.correct_index = Some(position);
        position = (position + 1) % MC_OPTIONS;
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::fact;
    use super::super::BigramCosine;
    use super::*;
    use crate::annotation::{ContextRefs, Quality, ReportClass};
    use crate::ocr::ImageType;
    use rand::SeedableRng;

    fn ann(diagnosis: &[&str], status: &[&str]) -> ReportAnnotation {
        ReportAnnotation {
            image_id: "r".into(),
            report_class: ReportClass::Diagnostic,
            kv_pairs: vec![],
            quadruplets: vec![],
            context_refs: ContextRefs {
                diagnosis: diagnosis.iter().map(|s| s.to_string()).collect(),
                status: status.iter().map(|s| s.to_string()).collect(),
                advice: vec![],
            },
            quality: Quality::High,
            image_type: ImageType::Photo,
            declared_items: None,
        }
    }

    fn anemia_facts() -> FactBase {
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
    fn distractors_match_exhaustive_scoring() {
        let facts = anemia_facts();
        let items = generate_reasoning_mc(&ann(&["f1"], &[]), &facts, &BigramCosine).unwrap();
        assert_eq!(items.len(), 1);
        // Score every non-gold title and keep the best three.
        let mut all: Vec<(f64, &str, &str)> = facts
            .facts()
            .iter()
            .filter(|f| f.id != "f1")
            .map(|f| (BigramCosine.score("Mild Anemia", &f.title), f.id.as_str(), f.title.as_str()))
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
        let expected: Vec<&str> = all.iter().take(3).map(|t| t.2).collect();
        let options = items[0].options.as_ref().unwrap();
        assert_eq!(options[0], "Mild Anemia");
        assert_eq!(&options[1..], expected.as_slice());
        assert!(expected.contains(&"Moderate Anemia") && expected.contains(&"Severe Anemia"));
        assert_eq!(items[0].context_ids, vec!["f1".to_string()]);
    }

    #[test]
    fn four_titles_use_all_of_them() {
        let facts = FactBase::new(vec![fact("a", "W"), fact("b", "X"), fact("c", "Y"), fact("d", "Z")]).unwrap();
        let items = generate_reasoning_mc(&ann(&["c"], &[]), &facts, &BigramCosine).unwrap();
        let mut opts = items[0].options.clone().unwrap();
        opts.sort();
        assert_eq!(opts, vec!["W", "X", "Y", "Z"]);
    }

    #[test]
    fn other_golds_are_never_distractors() {
        let items = generate_reasoning_mc(&ann(&["f1", "f2"], &[]), &anemia_facts(), &BigramCosine).unwrap();
        assert_eq!(items.len(), 2);
        assert!(!items[0].options.as_ref().unwrap().contains(&"Moderate Anemia".to_string()));
        assert!(!items[1].options.as_ref().unwrap().contains(&"Mild Anemia".to_string()));
    }

    #[test]
    fn too_few_candidates_after_exclusion() {
        let facts = FactBase::new(vec![fact("a", "W"), fact("b", "X"), fact("c", "Y"), fact("d", "Z")]).unwrap();
        let err = generate_reasoning_mc(&ann(&["a", "b"], &[]), &facts, &BigramCosine).unwrap_err();
        assert!(matches!(err, QaError::TooFewDistractors { available: 2, .. }));
    }

    #[test]
    fn unknown_context_id() {
        let err = generate_reasoning_sa(&ann(&["nope"], &[]), &anemia_facts()).unwrap_err();
        assert!(matches!(err, QaError::UnknownContext { .. }));
    }

    #[test]
    fn short_answers() {
        let facts = anemia_facts();
        let one = generate_reasoning_sa(&ann(&["f3"], &[]), &facts).unwrap();
        assert_eq!(one[0].answer, "Severe Anemia");
        assert_eq!(one[0].answer_type, AnswerType::NonSpan);
        let two = generate_reasoning_sa(&ann(&["f2", "f1"], &["f5"]), &facts).unwrap();
        assert_eq!(two.len(), 2);
        assert_eq!(two[0].answer, "Moderate Anemia; Mild Anemia");
        assert_eq!(two[1].answer, "Thrombosis Formation");
    }

    #[test]
    fn balancing_spreads_positions_evenly() {
        let facts = anemia_facts();
        let mut bank = Vec::new();
        for _ in 0..201 {
            bank.extend(generate_reasoning_mc(&ann(&["f1"], &[]), &facts, &BigramCosine).unwrap());
        }
        balance_options(&mut bank, &mut ChaCha8Rng::seed_from_u64(5));
        let mut counts = [0usize; 4];
        for q in &bank {
            let i = q.correct_index.unwrap();
            counts[i] += 1;
            assert_eq!(q.options.as_ref().unwrap()[i], q.answer);
        }
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1, "{counts:?}");
    }
}
