//! Scoring of prediction files against a QA bank.
//!
//! Two metrics: soft accuracy (the normalized prediction contains the
//! normalized gold answer) and ROUGE-L F1 over the longest common token
//! subsequence. CJK characters are single tokens; other text splits on
//! whitespace. Unanswerable items score by presence of the abstention token.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::annotation::{Quality, ReportAnnotation};
use crate::normalize::normalize;
use crate::ocr::ImageType;
use crate::parallel::{map_ordered, Execution};
use crate::qa::{QaItem, Subtask, Task, ABSTENTION_TOKEN};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub qa_id: String,
    pub text: String,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("predictions reference qa_ids missing from the bank: {}", .0.join(", "))]
    UnknownIds(Vec<String>),
    #[error("predictions line {line}: {source}")]
    Jsonl { line: usize, source: serde_json::Error },
}

pub fn soft_accuracy(pred: &str, gold: &str) -> u8 {
    u8::from(normalize(pred).contains(&normalize(gold)))
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3000..=0x303F | 0x3040..=0x30FF | 0x3400..=0x4DBF | 0x4E00..=0x9FFF
        | 0xAC00..=0xD7AF | 0xF900..=0xFAFF | 0xFF00..=0xFFEF | 0x20000..=0x2FA1F)
}

/// Tokens of the normalized text: one per CJK character, whitespace-split
/// runs otherwise.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in normalize(text).chars() {
        if c.is_whitespace() || is_cjk(c) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if is_cjk(c) {
                out.push(c.to_string());
            }
        } else {
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub(crate) fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 (beta = 1). Zero when the token sequences share nothing.
pub fn rouge_l(pred: &str, gold: &str) -> f64 {
    let (p, g) = (tokenize(pred), tokenize(gold));
    let lcs = lcs_len(&p, &g);
    if lcs == 0 {
        return 0.0;
    }
    // 2PR / (P + R) reduces to 2·lcs / (|p| + |g|); one division keeps it exact.
    (2 * lcs) as f64 / (p.len() + g.len()) as f64
}

/// Whether ROUGE-L is reported for this task family.
pub fn reports_rouge(task: Task, subtask: Subtask) -> bool {
    !matches!((task, subtask), (Task::TableNr, _) | (Task::Reason, Subtask::Mc))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub image_type: ImageType,
    pub quality: Quality,
}

pub type StrataMeta = HashMap<String, ImageMeta>;

pub fn strata_meta(annotations: &[ReportAnnotation]) -> StrataMeta {
    annotations
        .iter()
        .map(|a| (a.image_id.clone(), ImageMeta { image_type: a.image_type, quality: a.quality }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub soft_accuracy: f64,
    /// `None` when the task family reports soft accuracy only.
    pub rouge_l: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskScore {
    pub task: Task,
    pub subtask: Subtask,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: Task,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumScore {
    /// `image_type`, `quality` or `difficulty`.
    pub dimension: String,
    pub label: String,
    pub task: Task,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HallucinationStats {
    pub unanswerable_total: usize,
    pub answered_anyway: usize,
    pub by_task: BTreeMap<Task, (usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub subtasks: Vec<SubtaskScore>,
    pub tasks: Vec<TaskScore>,
    pub strata: Vec<StratumScore>,
    pub hallucination: HallucinationStats,
}

#[derive(Default)]
struct Acc {
    n: usize,
    soft: f64,
    rouge_n: usize,
    rouge: f64,
}

impl Acc {
    fn add(&mut self, s: &ItemScore) {
        self.n += 1;
        self.soft += s.soft as f64;
        if let Some(r) = s.rouge {
            self.rouge_n += 1;
            self.rouge += r;
        }
    }

    fn metrics(&self) -> Metrics {
        Metrics {
            n: self.n,
            soft_accuracy: if self.n == 0 { 0.0 } else { self.soft / self.n as f64 },
            rouge_l: (self.rouge_n > 0).then(|| self.rouge / self.rouge_n as f64),
        }
    }
}

struct ItemScore {
    soft: u8,
    rouge: Option<f64>,
}

fn abstains(pred: &str) -> bool {
    soft_accuracy(pred, ABSTENTION_TOKEN) == 1
}

fn score_item(item: &QaItem, pred: &str) -> ItemScore {
    let rouge = reports_rouge(item.task, item.subtask);
    if !item.answerable {
        let s = u8::from(abstains(pred));
        return ItemScore { soft: s, rouge: rouge.then_some(s as f64) };
    }
    ItemScore {
        soft: soft_accuracy(pred, &item.answer),
        rouge: rouge.then(|| rouge_l(pred, &item.answer)),
    }
}

/// Later duplicates win; unknown ids are an error.
fn prediction_map<'a>(bank: &[QaItem], preds: &'a [Prediction]) -> Result<HashMap<&'a str, &'a str>, EvalError> {
    let known: HashSet<&str> = bank.iter().map(|q| q.qa_id.as_str()).collect();
    let mut unknown: Vec<String> =
        preds.iter().filter(|p| !known.contains(p.qa_id.as_str())).map(|p| p.qa_id.clone()).collect();
    if !unknown.is_empty() {
        unknown.sort();
        unknown.dedup();
        return Err(EvalError::UnknownIds(unknown));
    }
    Ok(preds.iter().map(|p| (p.qa_id.as_str(), p.text.as_str())).collect())
}

pub fn hallucination_stats(bank: &[QaItem], preds: &[Prediction]) -> Result<HallucinationStats, EvalError> {
    let map = prediction_map(bank, preds)?;
    let mut stats = HallucinationStats::default();
    for item in bank.iter().filter(|q| !q.answerable) {
        let answered = !abstains(map.get(item.qa_id.as_str()).copied().unwrap_or(""));
        stats.unanswerable_total += 1;
        stats.answered_anyway += usize::from(answered);
        let e = stats.by_task.entry(item.task).or_default();
        e.0 += 1;
        e.1 += usize::from(answered);
    }
    Ok(stats)
}

/// Scores every bank item (missing predictions count as empty text) and
/// aggregates per subtask, per task, and per stratum within each task.
pub fn score_run(
    bank: &[QaItem],
    preds: &[Prediction],
    meta: &StrataMeta,
    exec: Execution,
) -> Result<ScoreReport, EvalError> {
    let map = prediction_map(bank, preds)?;
    let scores = map_ordered(bank, exec, |_, item| {
        score_item(item, map.get(item.qa_id.as_str()).copied().unwrap_or(""))
    });

    let mut by_subtask: BTreeMap<(Task, Subtask), Acc> = BTreeMap::new();
    let mut by_task: BTreeMap<Task, Acc> = BTreeMap::new();
    let mut by_stratum: BTreeMap<(&'static str, String, Task), Acc> = BTreeMap::new();
    for (item, s) in bank.iter().zip(&scores) {
        by_subtask.entry((item.task, item.subtask)).or_default().add(s);
        by_task.entry(item.task).or_default().add(s);
        let (image_type, quality) = match meta.get(&item.image_id) {
            Some(m) => (
                if m.image_type.is_electronic() { "electronic" } else { "photo" }.to_string(),
                format!("{:?}", m.quality).to_lowercase(),
            ),
            None => ("unknown".to_string(), "unknown".to_string()),
        };
        let difficulty = if item.subtask.is_single() { "single" } else { "multi" };
        by_stratum.entry(("image_type", image_type, item.task)).or_default().add(s);
        by_stratum.entry(("quality", quality, item.task)).or_default().add(s);
        by_stratum.entry(("difficulty", difficulty.to_string(), item.task)).or_default().add(s);
    }

    Ok(ScoreReport {
        subtasks: by_subtask
            .into_iter()
            .map(|((task, subtask), a)| SubtaskScore { task, subtask, metrics: a.metrics() })
            .collect(),
        tasks: by_task.into_iter().map(|(task, a)| TaskScore { task, metrics: a.metrics() }).collect(),
        strata: by_stratum
            .into_iter()
            .map(|((dim, label, task), a)| StratumScore {
                dimension: dim.to_string(),
                label,
                task,
                metrics: a.metrics(),
            })
            .collect(),
        hallucination: hallucination_stats(bank, preds)?,
    })
}

pub fn read_predictions(text: &str) -> Result<Vec<Prediction>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| EvalError::Jsonl { line: i + 1, source }))
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl ScoreReport {
    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<[String; 5]> =
            vec![["group".into(), "name".into(), "n".into(), "soft_acc".into(), "rouge_l".into()]];
        for s in &self.subtasks {
            rows.push([
                "subtask".into(),
                format!("{}/{}", s.task, s.subtask),
                s.metrics.n.to_string(),
                format!("{:.4}", s.metrics.soft_accuracy),
                fmt_opt(s.metrics.rouge_l),
            ]);
        }
        for t in &self.tasks {
            rows.push([
                "task".into(),
                t.task.to_string(),
                t.metrics.n.to_string(),
                format!("{:.4}", t.metrics.soft_accuracy),
                fmt_opt(t.metrics.rouge_l),
            ]);
        }
        for s in &self.strata {
            rows.push([
                s.dimension.clone(),
                format!("{}/{}", s.task, s.label),
                s.metrics.n.to_string(),
                format!("{:.4}", s.metrics.soft_accuracy),
                fmt_opt(s.metrics.rouge_l),
            ]);
        }
        let widths: Vec<usize> =
            (0..5).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> = r.iter().zip(&widths).map(|(cell, w)| format!("{cell:<w$}")).collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        let h = &self.hallucination;
        let _ = writeln!(out, "unanswerable: {} answered anyway of {}", h.answered_anyway, h.unanswerable_total);
        out
    }
}
