//! Relationship filtering stack: geometric rules for spatial predicates,
//! dual-judge VQA verdicts for everything else, and an optional
//! similarity-threshold filter.
//!
//! Rule semantics are deliberately strict on direction (center ordering) and
//! tolerant of small overhang (less than half the smaller extent). The
//! predicate-to-rule map ships as data, not code, so alternative semantics
//! can be slotted in without a rebuild.

use crate::geometry::{normalize_box, NormBBox};
use crate::graph::{fold_predicate, Region, Relation, RelationCategory, SceneGraph};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use thiserror::Error;

/// Score below which the similarity filter removes a relation.
pub const DEFAULT_SIMILARITY_THRESHOLD: f64 = 0.3;

/// The similarity filter is off unless explicitly enabled; it was found
/// ineffective for most relationship types.
pub const SIMILARITY_FILTER_DEFAULT_ENABLED: bool = false;

/// Depth separation (out of 255) required before depth rules fire.
pub const DEPTH_MARGIN: u32 = 10;

/// The seven geometric rules for spatial predicates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialRule {
    Above,
    Below,
    Left,
    Right,
    Overlap,
    AboveOrOverlap,
    BelowOrOverlap,
}

fn center(b: &NormBBox) -> (f64, f64) {
    (
        (b.x1 as f64 + b.x2 as f64) / 2.0,
        (b.y1 as f64 + b.y2 as f64) / 2.0,
    )
}

fn overlap(s: &NormBBox, o: &NormBBox) -> bool {
    let w = s.x2.min(o.x2) as f64 - s.x1.max(o.x1) as f64;
    let h = s.y2.min(o.y2) as f64 - s.y1.max(o.y1) as f64;
    w > 0.0 && h > 0.0
}

// above: subject center is higher (smaller y) and the subject's bottom dips
// past the object's top by less than half the smaller height
fn above(s: &NormBBox, o: &NormBBox) -> bool {
    let (_, cy_s) = center(s);
    let (_, cy_o) = center(o);
    let overhang = s.y2 as f64 - o.y1 as f64;
    let min_h = (s.y2 - s.y1).min(o.y2 - o.y1) as f64;
    cy_s < cy_o && overhang < 0.5 * min_h
}

fn left(s: &NormBBox, o: &NormBBox) -> bool {
    let (cx_s, _) = center(s);
    let (cx_o, _) = center(o);
    let overhang = s.x2 as f64 - o.x1 as f64;
    let min_w = (s.x2 - s.x1).min(o.x2 - o.x1) as f64;
    cx_s < cx_o && overhang < 0.5 * min_w
}

impl SpatialRule {
    /// Evaluate against boxes in normalized 0-1000 space (y grows downward).
    pub fn eval(&self, subject: &NormBBox, object: &NormBBox) -> bool {
        match self {
            SpatialRule::Above => above(subject, object),
            SpatialRule::Below => above(object, subject),
            SpatialRule::Left => left(subject, object),
            SpatialRule::Right => left(object, subject),
            SpatialRule::Overlap => overlap(subject, object),
            SpatialRule::AboveOrOverlap => above(subject, object) || overlap(subject, object),
            SpatialRule::BelowOrOverlap => above(object, subject) || overlap(subject, object),
        }
    }
}

/// A checkable rule: one of the seven planar rules, or a depth comparison
/// for `behind`/`in front of` that only fires when both regions carry depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationRule {
    Above,
    Below,
    Left,
    Right,
    Overlap,
    AboveOrOverlap,
    BelowOrOverlap,
    Behind,
    InFrontOf,
}

impl RelationRule {
    pub fn as_spatial(&self) -> Option<SpatialRule> {
        match self {
            RelationRule::Above => Some(SpatialRule::Above),
            RelationRule::Below => Some(SpatialRule::Below),
            RelationRule::Left => Some(SpatialRule::Left),
            RelationRule::Right => Some(SpatialRule::Right),
            RelationRule::Overlap => Some(SpatialRule::Overlap),
            RelationRule::AboveOrOverlap => Some(SpatialRule::AboveOrOverlap),
            RelationRule::BelowOrOverlap => Some(SpatialRule::BelowOrOverlap),
            RelationRule::Behind | RelationRule::InFrontOf => None,
        }
    }

    /// `None` means the rule cannot judge this pair (depth rule without
    /// depth values) and the relation passes through.
    pub fn check(
        &self,
        subject: &Region,
        object: &Region,
        image_width: u32,
        image_height: u32,
    ) -> Option<bool> {
        if let Some(rule) = self.as_spatial() {
            let (sb, _) = normalize_box(&subject.bbox, image_width, image_height);
            let (ob, _) = normalize_box(&object.bbox, image_width, image_height);
            return Some(rule.eval(&sb, &ob));
        }
        let (sd, od) = (subject.depth?, object.depth?);
        match self {
            // lower depth means farther back
            RelationRule::InFrontOf => Some(sd > od + DEPTH_MARGIN),
            RelationRule::Behind => Some(od > sd + DEPTH_MARGIN),
            _ => unreachable!(),
        }
    }
}

/// Evaluate one of the seven planar rules on a region pair, comparing
/// coordinates in normalized space.
pub fn eval_rule(
    rule: SpatialRule,
    subject: &Region,
    object: &Region,
    image_width: u32,
    image_height: u32,
) -> bool {
    let (sb, _) = normalize_box(&subject.bbox, image_width, image_height);
    let (ob, _) = normalize_box(&object.bbox, image_width, image_height);
    rule.eval(&sb, &ob)
}

#[derive(Debug, Error)]
pub enum RuleMapError {
    #[error("failed to read rule map: {0}")]
    Io(#[from] std::io::Error),
    #[error("rule map is not a JSON object of predicate -> rule name: {0}")]
    Format(#[from] serde_json::Error),
    #[error("unknown rule name `{rule}` for predicate `{predicate}`")]
    UnknownRule { predicate: String, rule: String },
}

/// Case-folded predicate phrase to rule mapping, loaded from config.
///
/// The shipped default covers 22 frequent spatial predicates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredicateRuleMap {
    entries: BTreeMap<String, RelationRule>,
}

const DEFAULT_RULES_JSON: &str = include_str!("../data/default_rules.json");

impl PredicateRuleMap {
    /// The built-in 22-predicate map.
    pub fn shipped_default() -> Self {
        Self::from_json_str(DEFAULT_RULES_JSON).expect("shipped rule map must parse")
    }

    pub fn from_json_str(s: &str) -> Result<Self, RuleMapError> {
        let raw: BTreeMap<String, String> = serde_json::from_str(s)?;
        let mut entries = BTreeMap::new();
        for (predicate, rule_name) in raw {
            let rule: RelationRule = serde_json::from_value(serde_json::Value::String(
                rule_name.clone(),
            ))
            .map_err(|_| RuleMapError::UnknownRule {
                predicate: predicate.clone(),
                rule: rule_name,
            })?;
            entries.insert(fold_predicate(&predicate), rule);
        }
        Ok(Self { entries })
    }

    pub fn from_reader(mut r: impl Read) -> Result<Self, RuleMapError> {
        let mut buf = String::new();
        r.read_to_string(&mut buf)?;
        Self::from_json_str(&buf)
    }

    pub fn get(&self, predicate: &str) -> Option<RelationRule> {
        self.entries.get(&fold_predicate(predicate)).copied()
    }

    pub fn contains(&self, predicate: &str) -> bool {
        self.get(predicate).is_some()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Why a relation was removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalReason {
    RuleViolation,
    JudgeRejection,
    SimilarityBelowThreshold,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RemovedRelation {
    pub relation: Relation,
    pub reason: RemovalReason,
}

/// Kept/removed tallies for one relation category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CategoryTally {
    pub input: u64,
    pub kept: u64,
    pub removed: u64,
}

/// Result of one filtering pass; kept and removed partition the input.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterReport {
    pub kept: Vec<Relation>,
    pub removed: Vec<RemovedRelation>,
    pub counts: BTreeMap<String, CategoryTally>,
}

fn category_key(relation: &Relation) -> String {
    relation
        .category
        .map(|c| c.name().to_string())
        .unwrap_or_else(|| "uncategorized".to_string())
}

impl FilterReport {
    pub fn from_partition(kept: Vec<Relation>, removed: Vec<RemovedRelation>) -> Self {
        let mut counts: BTreeMap<String, CategoryTally> = BTreeMap::new();
        for rel in &kept {
            let t = counts.entry(category_key(rel)).or_default();
            t.input += 1;
            t.kept += 1;
        }
        for r in &removed {
            let t = counts.entry(category_key(&r.relation)).or_default();
            t.input += 1;
            t.removed += 1;
        }
        Self {
            kept,
            removed,
            counts,
        }
    }

    pub fn input_len(&self) -> usize {
        self.kept.len() + self.removed.len()
    }
}

/// Apply the rule map to a graph's relations.
///
/// A relation whose predicate is mapped is kept iff its rule holds; unmapped
/// predicates (and depth rules lacking depth values) pass through untouched.
pub fn rule_filter(graph: &SceneGraph, map: &PredicateRuleMap) -> FilterReport {
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for rel in &graph.relations {
        let verdict = map.get(&rel.predicate).and_then(|rule| {
            let subject = graph.region(rel.subject_id)?;
            let object = graph.region(rel.object_id)?;
            rule.check(subject, object, graph.image_width, graph.image_height)
        });
        match verdict {
            Some(false) => removed.push(RemovedRelation {
                relation: rel.clone(),
                reason: RemovalReason::RuleViolation,
            }),
            _ => kept.push(rel.clone()),
        }
    }
    FilterReport::from_partition(kept, removed)
}

/// What a judge answered, parsed from its raw response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeAnswer {
    Yes,
    No,
    Abstain,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JudgeVerdict {
    pub judge_name: String,
    pub answer: JudgeAnswer,
    pub raw_text: String,
}

impl JudgeVerdict {
    /// Normalize a raw judge response: the first `yes` or `no` word token
    /// decides; a response containing neither is an abstention.
    pub fn from_response(judge_name: impl Into<String>, raw_text: impl Into<String>) -> Self {
        let raw_text = raw_text.into();
        let answer = raw_text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .find_map(|w| {
                if w.eq_ignore_ascii_case("yes") {
                    Some(JudgeAnswer::Yes)
                } else if w.eq_ignore_ascii_case("no") {
                    Some(JudgeAnswer::No)
                } else {
                    None
                }
            })
            .unwrap_or(JudgeAnswer::Abstain);
        Self {
            judge_name: judge_name.into(),
            answer,
            raw_text,
        }
    }
}

/// A relation with its rendered question phrase and collected verdicts.
#[derive(Debug, Clone, PartialEq)]
pub struct JudgedRelation {
    pub relation: Relation,
    pub phrase: String,
    pub verdicts: Vec<JudgeVerdict>,
}

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("relation `{phrase}` has no judge verdicts (pipeline wiring bug)")]
    MissingVerdicts { phrase: String },
    #[error("missing similarity score for `{phrase}` / `{crop_ref}`")]
    MissingScore { phrase: String, crop_ref: String },
}

/// Remove a relation iff any judge answered `no`; abstentions never block.
pub fn judge_filter(items: Vec<JudgedRelation>) -> Result<FilterReport, FilterError> {
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for item in items {
        if item.verdicts.is_empty() {
            return Err(FilterError::MissingVerdicts {
                phrase: item.phrase,
            });
        }
        if item.verdicts.iter().any(|v| v.answer == JudgeAnswer::No) {
            removed.push(RemovedRelation {
                relation: item.relation,
                reason: RemovalReason::JudgeRejection,
            });
        } else {
            kept.push(item.relation);
        }
    }
    Ok(FilterReport::from_partition(kept, removed))
}

/// A relation phrase paired with the crop it was scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityCandidate {
    pub relation: Relation,
    pub phrase: String,
    pub crop_ref: String,
}

/// Keep a relation iff its phrase/crop similarity score is at or above the
/// threshold (the boundary is keep-inclusive).
pub fn similarity_filter(
    candidates: Vec<SimilarityCandidate>,
    scores: &HashMap<(String, String), f64>,
    threshold: f64,
) -> Result<FilterReport, FilterError> {
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for cand in candidates {
        let key = (cand.phrase.clone(), cand.crop_ref.clone());
        let Some(&score) = scores.get(&key) else {
            return Err(FilterError::MissingScore {
                phrase: cand.phrase,
                crop_ref: cand.crop_ref,
            });
        };
        if score >= threshold {
            kept.push(cand.relation);
        } else {
            removed.push(RemovedRelation {
                relation: cand.relation,
                reason: RemovalReason::SimilarityBelowThreshold,
            });
        }
    }
    Ok(FilterReport::from_partition(kept, removed))
}

/// True when the relation should be routed to the VQA judges rather than the
/// rule program: anything not tagged spatial whose predicate is unmapped.
pub fn needs_judge(relation: &Relation, map: &PredicateRuleMap) -> bool {
    relation.category != Some(RelationCategory::Spatial) && !map.contains(&relation.predicate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::BBox;

    fn region(id: u32, x1: f64, y1: f64, x2: f64, y2: f64) -> Region {
        Region::new(id, format!("r{id}"), BBox::new(x1, y1, x2, y2))
    }

    #[test]
    fn above_rule_example() {
        let s = region(0, 0.0, 0.0, 100.0, 100.0);
        let o = region(1, 0.0, 200.0, 100.0, 300.0);
        assert!(eval_rule(SpatialRule::Above, &s, &o, 1000, 1000));
        assert!(!eval_rule(SpatialRule::Below, &s, &o, 1000, 1000));
    }

    #[test]
    fn identical_boxes_overlap_not_above() {
        let s = region(0, 10.0, 10.0, 50.0, 50.0);
        let o = region(1, 10.0, 10.0, 50.0, 50.0);
        assert!(eval_rule(SpatialRule::Overlap, &s, &o, 100, 100));
        assert!(!eval_rule(SpatialRule::Above, &s, &o, 100, 100));
    }

    #[test]
    fn left_right_mirror() {
        let s = region(0, 0.0, 0.0, 30.0, 100.0);
        let o = region(1, 60.0, 0.0, 100.0, 100.0);
        for (a, b) in [(&s, &o), (&o, &s)] {
            assert_eq!(
                eval_rule(SpatialRule::Left, a, b, 100, 100),
                eval_rule(SpatialRule::Right, b, a, 100, 100)
            );
        }
        assert!(eval_rule(SpatialRule::Left, &s, &o, 100, 100));
    }

    #[test]
    fn shipped_default_has_22_entries() {
        let map = PredicateRuleMap::shipped_default();
        assert_eq!(map.len(), 22);
        assert_eq!(map.get("ON TOP OF"), Some(RelationRule::AboveOrOverlap));
        assert_eq!(map.get("in front of"), Some(RelationRule::InFrontOf));
        assert!(map.get("admiring").is_none());
    }

    #[test]
    fn unknown_rule_name_rejected() {
        let err = PredicateRuleMap::from_json_str(r#"{"on": "diagonal"}"#).unwrap_err();
        assert!(matches!(err, RuleMapError::UnknownRule { .. }));
    }

    fn graph_with(relations: Vec<Relation>) -> SceneGraph {
        let mut g = SceneGraph::new("img", 1000, 1000);
        g.regions.push(region(0, 0.0, 600.0, 100.0, 700.0)); // low in the image
        g.regions.push(region(1, 0.0, 0.0, 100.0, 100.0)); // high in the image
        g.relations = relations;
        g
    }

    #[test]
    fn rule_filter_removes_geometric_violation() {
        // region 0 is below region 1, so "above" fails
        let g = graph_with(vec![Relation::new(0, "above", 1)]);
        let report = rule_filter(&g, &PredicateRuleMap::shipped_default());
        assert!(report.kept.is_empty());
        assert_eq!(report.removed.len(), 1);
        assert_eq!(report.removed[0].reason, RemovalReason::RuleViolation);
    }

    #[test]
    fn rule_filter_passes_unmapped_predicate() {
        let g = graph_with(vec![Relation::new(0, "admiring", 1)]);
        let report = rule_filter(&g, &PredicateRuleMap::shipped_default());
        assert_eq!(report.kept.len(), 1);
        assert!(report.removed.is_empty());
    }

    #[test]
    fn rule_filter_keeps_satisfied_rule() {
        let g = graph_with(vec![Relation::new(0, "below", 1)]);
        let report = rule_filter(&g, &PredicateRuleMap::shipped_default());
        assert_eq!(report.kept.len(), 1);
    }

    #[test]
    fn rule_filter_is_idempotent() {
        let g = graph_with(vec![
            Relation::new(0, "above", 1),
            Relation::new(0, "below", 1),
            Relation::new(1, "admiring", 0),
        ]);
        let map = PredicateRuleMap::shipped_default();
        let once = rule_filter(&g, &map);
        let mut g2 = g.clone();
        g2.relations = once.kept.clone();
        let twice = rule_filter(&g2, &map);
        assert_eq!(once.kept, twice.kept);
        assert!(twice.removed.is_empty());
    }

    #[test]
    fn depth_rules_pass_through_without_depth() {
        let g = graph_with(vec![Relation::new(0, "in front of", 1)]);
        let report = rule_filter(&g, &PredicateRuleMap::shipped_default());
        assert_eq!(report.kept.len(), 1);
    }

    #[test]
    fn depth_rules_fire_when_depth_present() {
        let mut g = graph_with(vec![Relation::new(0, "in front of", 1)]);
        g.regions[0].depth = Some(200); // closer to camera
        g.regions[1].depth = Some(50);
        let map = PredicateRuleMap::shipped_default();
        assert_eq!(rule_filter(&g, &map).kept.len(), 1);
        // swap depths: now region 0 is farther back, "in front of" is wrong
        g.regions[0].depth = Some(50);
        g.regions[1].depth = Some(200);
        assert_eq!(rule_filter(&g, &map).removed.len(), 1);
    }

    fn verdict(answer: JudgeAnswer) -> JudgeVerdict {
        JudgeVerdict {
            judge_name: "judge".into(),
            answer,
            raw_text: String::new(),
        }
    }

    #[test]
    fn judge_removes_on_any_no() {
        let items = vec![JudgedRelation {
            relation: Relation::new(0, "holding", 1),
            phrase: "man holding paddle".into(),
            verdicts: vec![verdict(JudgeAnswer::Yes), verdict(JudgeAnswer::No)],
        }];
        let report = judge_filter(items).unwrap();
        assert_eq!(report.removed.len(), 1);
        assert_eq!(report.removed[0].reason, RemovalReason::JudgeRejection);
    }

    #[test]
    fn judge_keeps_on_yes_yes_and_yes_abstain() {
        for second in [JudgeAnswer::Yes, JudgeAnswer::Abstain] {
            let items = vec![JudgedRelation {
                relation: Relation::new(0, "holding", 1),
                phrase: "p".into(),
                verdicts: vec![verdict(JudgeAnswer::Yes), verdict(second)],
            }];
            assert_eq!(judge_filter(items).unwrap().kept.len(), 1);
        }
    }

    #[test]
    fn judge_zero_verdicts_is_error() {
        let items = vec![JudgedRelation {
            relation: Relation::new(0, "holding", 1),
            phrase: "p".into(),
            verdicts: vec![],
        }];
        assert!(judge_filter(items).is_err());
    }

    #[test]
    fn verdict_parsing() {
        assert_eq!(
            JudgeVerdict::from_response("j", "Yes.").answer,
            JudgeAnswer::Yes
        );
        assert_eq!(
            JudgeVerdict::from_response("j", "no, it does not").answer,
            JudgeAnswer::No
        );
        assert_eq!(
            JudgeVerdict::from_response("j", "Not sure").answer,
            JudgeAnswer::Abstain
        );
        assert_eq!(
            JudgeVerdict::from_response("j", "I'd say yes").answer,
            JudgeAnswer::Yes
        );
    }

    fn sim_candidate(score_key: &str) -> SimilarityCandidate {
        SimilarityCandidate {
            relation: Relation::new(0, "on", 1),
            phrase: score_key.to_string(),
            crop_ref: "crop".into(),
        }
    }

    #[test]
    fn similarity_threshold_boundaries() {
        let mut scores = HashMap::new();
        scores.insert(("a".to_string(), "crop".to_string()), 0.31);
        scores.insert(("b".to_string(), "crop".to_string()), 0.29);
        scores.insert(("c".to_string(), "crop".to_string()), 0.3);
        let report = similarity_filter(
            vec![sim_candidate("a"), sim_candidate("b"), sim_candidate("c")],
            &scores,
            DEFAULT_SIMILARITY_THRESHOLD,
        )
        .unwrap();
        assert_eq!(report.kept.len(), 2);
        assert_eq!(report.removed.len(), 1);
    }

    #[test]
    fn similarity_empty_input() {
        let report = similarity_filter(vec![], &HashMap::new(), 0.3).unwrap();
        assert!(report.kept.is_empty() && report.removed.is_empty());
    }

    #[test]
    fn similarity_missing_score_is_error() {
        let err = similarity_filter(vec![sim_candidate("x")], &HashMap::new(), 0.3).unwrap_err();
        assert!(matches!(err, FilterError::MissingScore { .. }));
    }

    #[test]
    fn report_partitions_input() {
        let g = graph_with(vec![
            Relation::new(0, "above", 1).with_category(RelationCategory::Spatial),
            Relation::new(0, "admiring", 1).with_category(RelationCategory::Emotional),
        ]);
        let report = rule_filter(&g, &PredicateRuleMap::shipped_default());
        assert_eq!(report.input_len(), 2);
        let spatial = &report.counts["spatial"];
        assert_eq!((spatial.input, spatial.kept, spatial.removed), (1, 0, 1));
        let emotional = &report.counts["emotional"];
        assert_eq!(
            (emotional.input, emotional.kept, emotional.removed),
            (1, 1, 0)
        );
    }
}
