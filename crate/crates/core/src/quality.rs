//! Annotation validation and corner-based image quality sensors.

use serde::{Deserialize, Serialize};

use crate::annotation::{expected_flag, Quality, ReportAnnotation, SynonymSchema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueCode {
    MissingKey,
    MissingValue,
    TableCountMismatch,
    AbnormalFlagMismatch,
    UnmappedKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

impl IssueCode {
    pub fn severity(self) -> Severity {
        match self {
            IssueCode::UnmappedKey => Severity::Warning,
            _ => Severity::Error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub image_id: String,
    pub severity: Severity,
    pub code: IssueCode,
    pub detail: String,
}

impl Issue {
    fn new(image_id: &str, code: IssueCode, detail: String) -> Self {
        Issue { image_id: image_id.to_string(), severity: code.severity(), code, detail }
    }
}

pub fn validate_annotation(ann: &ReportAnnotation, schema: &SynonymSchema) -> Vec<Issue> {
    let id = ann.image_id.as_str();
    let mut issues = Vec::new();

    for (i, kv) in ann.kv_pairs.iter().enumerate() {
        if kv.key.trim().is_empty() {
            issues.push(Issue::new(id, IssueCode::MissingKey, format!("kv {i} has an empty key")));
        } else if !schema.canonicalize(&kv.key).is_mapped() {
            issues.push(Issue::new(
                id,
                IssueCode::UnmappedKey,
                format!("kv {i} key {:?} is not in the synonym schema", kv.key),
            ));
        }
        if kv.value.trim().is_empty() && !kv.missing {
            issues.push(Issue::new(
                id,
                IssueCode::MissingValue,
                format!("kv {i} ({:?}) has an empty value", kv.key),
            ));
        }
    }

    if let Some(declared) = ann.declared_items {
        if declared != ann.quadruplets.len() {
            issues.push(Issue::new(
                id,
                IssueCode::TableCountMismatch,
                format!("declared {declared} table items, found {}", ann.quadruplets.len()),
            ));
        }
    }

    for (i, q) in ann.quadruplets.iter().enumerate() {
        if q.item.trim().is_empty() {
            issues.push(Issue::new(id, IssueCode::MissingKey, format!("table row {i} has no item")));
        }
        if q.result.trim().is_empty() {
            issues.push(Issue::new(
                id,
                IssueCode::MissingValue,
                format!("table row {i} ({:?}) has no result", q.item),
            ));
        }
        let expected = expected_flag(&q.result, &q.range);
        if expected != q.flag {
            issues.push(Issue::new(
                id,
                IssueCode::AbnormalFlagMismatch,
                format!(
                    "table row {i} ({:?}): result {:?} vs range {:?} gives {expected}, annotated {}",
                    q.item, q.result, q.range, q.flag
                ),
            ));
        }
    }
    issues
}

/// Returns a copy with every table flag replaced by the recomputed one.
pub fn repair_flags(ann: &ReportAnnotation) -> ReportAnnotation {
    let mut out = ann.clone();
    for q in &mut out.quadruplets {
        q.flag = expected_flag(&q.result, &q.range);
    }
    out
}

/// Skew threshold in degrees; the comparison is strict.
pub const SKEW_THRESHOLD_DEG: f64 = 15.0;
/// Corners needed for a complete capture.
pub const MIN_COMPLETE_CORNERS: usize = 3;
const ANGLE_TOLERANCE_DEG: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CornerSet {
    corners: Vec<Point>,
}

impl CornerSet {
    pub fn new(corners: Vec<Point>) -> Result<Self, String> {
        if corners.len() > 4 {
            return Err(format!("at most 4 corners, got {}", corners.len()));
        }
        Ok(CornerSet { corners })
    }

    pub fn corners(&self) -> &[Point] {
        &self.corners
    }

    /// Corners as (top-left, top-right, bottom-left, bottom-right): sorted by
    /// y then x, top pair and bottom pair each ordered by x.
    fn quadrants(&self) -> Option<[Point; 4]> {
        if self.corners.len() != 4 {
            return None;
        }
        let mut c = self.corners.clone();
        c.sort_by(|a, b| a.y.total_cmp(&b.y).then(a.x.total_cmp(&b.x)));
        let by_x = |a: Point, b: Point| if a.x <= b.x { (a, b) } else { (b, a) };
        let (tl, tr) = by_x(c[0], c[1]);
        let (bl, br) = by_x(c[2], c[3]);
        Some([tl, tr, bl, br])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Completeness {
    Complete,
    Incomplete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Skew {
    Straight,
    Skewed,
}

/// Which pair of opposite edges the angle sensor compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgePair {
    #[default]
    TopBottom,
    LeftRight,
}

pub fn classify_completeness(c: &CornerSet) -> Completeness {
    if c.corners.len() < MIN_COMPLETE_CORNERS {
        Completeness::Incomplete
    } else {
        Completeness::Complete
    }
}

/// Angle in degrees (0..=90) between the chosen pair of opposite edges, or
/// `None` unless exactly four corners are present.
pub fn edge_angle(c: &CornerSet, edges: EdgePair) -> Option<f64> {
    let [tl, tr, bl, br] = c.quadrants()?;
    let ((a0, a1), (b0, b1)) = match edges {
        EdgePair::TopBottom => ((tl, tr), (bl, br)),
        EdgePair::LeftRight => ((tl, bl), (tr, br)),
    };
    let dir = |p: Point, q: Point| (q.y - p.y).atan2(q.x - p.x).to_degrees();
    let d = (dir(a0, a1) - dir(b0, b1)).abs().rem_euclid(180.0);
    Some(d.min(180.0 - d))
}

pub fn classify_skew(c: &CornerSet) -> Skew {
    classify_skew_with(c, EdgePair::TopBottom)
}

/// Fewer than four corners leave the angle undefined; those count as straight.
pub fn classify_skew_with(c: &CornerSet, edges: EdgePair) -> Skew {
    match edge_angle(c, edges) {
        Some(a) if a > SKEW_THRESHOLD_DEG + ANGLE_TOLERANCE_DEG => Skew::Skewed,
        _ => Skew::Straight,
    }
}

pub fn classify_quality(c: &CornerSet) -> Quality {
    classify_quality_with(c, EdgePair::TopBottom)
}

pub fn classify_quality_with(c: &CornerSet, edges: EdgePair) -> Quality {
    if classify_completeness(c) == Completeness::Incomplete
        || classify_skew_with(c, edges) == Skew::Skewed
    {
        Quality::Low
    } else {
        Quality::High
    }
}
