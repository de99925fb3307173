//! Open-ended scene-graph detection scoring (R@K, mR@K) and
//! region-classification semantic similarity.
//!
//! Text-to-class assignment goes through a pluggable [`SimilarityProvider`].
//! The default provider embeds character trigrams, which keeps every score
//! hermetic and deterministic; a remote sentence-embedding provider can be
//! slotted in for full-scale scoring, and reports record which provider
//! produced them.

use crate::geometry::iou_box;
use crate::graph::SceneGraph;
use serde::Serialize;
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

/// Default IoU threshold for endpoint matching (strictly greater-than).
pub const DEFAULT_MATCH_IOU: f64 = 0.5;

/// Default K for recall computation.
pub const DEFAULT_K: usize = 20;

/// Sparse L2-normalized feature vector keyed by 64-bit feature hashes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseVec(pub BTreeMap<u64, f64>);

impl SparseVec {
    pub fn dot(&self, other: &SparseVec) -> f64 {
        let (small, large) = if self.0.len() <= other.0.len() {
            (self, other)
        } else {
            (other, self)
        };
        small
            .0
            .iter()
            .filter_map(|(k, v)| large.0.get(k).map(|w| v * w))
            .sum()
    }

    pub fn normalized(mut self) -> Self {
        let norm = self.0.values().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in self.0.values_mut() {
                *v /= norm;
            }
        }
        self
    }
}

/// Embeds text into a unit vector; similarity is the cosine of embeddings.
pub trait SimilarityProvider: Send + Sync {
    fn embed(&self, text: &str) -> SparseVec;

    fn similarity(&self, a: &str, b: &str) -> f64 {
        self.embed(a).dot(&self.embed(b))
    }

    /// Identifier recorded in score reports.
    fn name(&self) -> &str;
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Deterministic lexical embedder: L2-normalized character-trigram counts
/// over the lowercased text. Strings shorter than three characters embed as
/// a single whole-string feature.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrigramProvider;

impl SimilarityProvider for TrigramProvider {
    fn embed(&self, text: &str) -> SparseVec {
        let lower = text.to_lowercase();
        let chars: Vec<char> = lower.chars().collect();
        let mut counts: BTreeMap<u64, f64> = BTreeMap::new();
        if chars.len() < 3 {
            if !chars.is_empty() {
                counts.insert(fnv1a64(lower.as_bytes()), 1.0);
            }
        } else {
            for window in chars.windows(3) {
                let tri: String = window.iter().collect();
                *counts.entry(fnv1a64(tri.as_bytes())).or_insert(0.0) += 1.0;
            }
        }
        SparseVec(counts).normalized()
    }

    fn name(&self) -> &str {
        "lexical-trigram"
    }
}

/// Class lists plus the phrase templates used to embed them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelSpace {
    pub object_classes: Vec<String>,
    pub predicate_classes: Vec<String>,
    pub object_template: String,
    pub predicate_template: String,
}

pub const OBJECT_TEMPLATE: &str = "The object is {class_name}";
pub const PREDICATE_TEMPLATE: &str = "Object is {predicate} another object";

impl LabelSpace {
    pub fn new(object_classes: Vec<String>, predicate_classes: Vec<String>) -> Self {
        Self {
            object_classes,
            predicate_classes,
            object_template: OBJECT_TEMPLATE.to_string(),
            predicate_template: PREDICATE_TEMPLATE.to_string(),
        }
    }
}

/// Substitute `text` for the first `{...}` placeholder in a template.
pub fn render_template(template: &str, text: &str) -> String {
    match (template.find('{'), template.find('}')) {
        (Some(open), Some(close)) if close > open => {
            format!("{}{}{}", &template[..open], text, &template[close + 1..])
        }
        _ => format!("{template} {text}"),
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("recall is undefined for an empty ground-truth triplet set")]
    EmptyGroundTruth,
    #[error("prediction and ground-truth lists have different lengths: {pred} vs {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("label space has no classes")]
    EmptyClasses,
}

/// Index of the closest class by templated cosine similarity; ties go to the
/// lowest class index.
pub fn assign_label(
    text: &str,
    classes: &[String],
    template: &str,
    provider: &dyn SimilarityProvider,
) -> Result<usize, EvalError> {
    if classes.is_empty() {
        return Err(EvalError::EmptyClasses);
    }
    let target = provider.embed(&render_template(template, text));
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (i, class) in classes.iter().enumerate() {
        let score = target.dot(&provider.embed(&render_template(template, class)));
        if score > best_score {
            best_score = score;
            best = i;
        }
    }
    Ok(best)
}

/// Per-predicate matched/total tallies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PredicateTally {
    pub matched: u64,
    pub total: u64,
}

/// Matching outcome for one image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchResult {
    pub matched: u64,
    pub total_gt: u64,
    pub recall_at_k: f64,
    /// Unweighted mean of per-predicate recalls over predicates present in
    /// the ground truth.
    pub mean_recall_at_k: f64,
    /// For each ground-truth triplet, the index of the prediction that
    /// matched it (in emission order), if any.
    pub per_gt_match: Vec<Option<usize>>,
    pub per_predicate: BTreeMap<String, PredicateTally>,
}

/// A triplet resolved to labels and endpoint boxes.
struct ResolvedTriplet {
    subject_label: usize,
    predicate_label: usize,
    object_label: usize,
    subject_box: crate::graph::BBox,
    object_box: crate::graph::BBox,
}

fn resolve_triplets(
    graph: &SceneGraph,
    limit: Option<usize>,
    labels: &LabelSpace,
    provider: &dyn SimilarityProvider,
    object_cache: &mut HashMap<String, usize>,
    predicate_cache: &mut HashMap<String, usize>,
) -> Result<Vec<ResolvedTriplet>, EvalError> {
    let mut out = Vec::new();
    let relations = match limit {
        Some(k) => &graph.relations[..graph.relations.len().min(k)],
        None => &graph.relations[..],
    };
    for rel in relations {
        let (Some(subject), Some(object)) =
            (graph.region(rel.subject_id), graph.region(rel.object_id))
        else {
            continue; // dangling endpoints can never match
        };
        let mut object_label = |text: &str| -> Result<usize, EvalError> {
            if let Some(&i) = object_cache.get(text) {
                return Ok(i);
            }
            let i = assign_label(
                text,
                &labels.object_classes,
                &labels.object_template,
                provider,
            )?;
            object_cache.insert(text.to_string(), i);
            Ok(i)
        };
        let subject_label = object_label(&subject.name)?;
        let obj_label = object_label(&object.name)?;
        let predicate_label = if let Some(&i) = predicate_cache.get(&rel.predicate) {
            i
        } else {
            let i = assign_label(
                &rel.predicate,
                &labels.predicate_classes,
                &labels.predicate_template,
                provider,
            )?;
            predicate_cache.insert(rel.predicate.clone(), i);
            i
        };
        out.push(ResolvedTriplet {
            subject_label,
            predicate_label,
            object_label: obj_label,
            subject_box: subject.bbox,
            object_box: object.bbox,
        });
    }
    Ok(out)
}

fn triplet_matches(pred: &ResolvedTriplet, gt: &ResolvedTriplet, iou_threshold: f64) -> bool {
    pred.subject_label == gt.subject_label
        && pred.predicate_label == gt.predicate_label
        && pred.object_label == gt.object_label
        && iou_box(&pred.subject_box, &gt.subject_box) > iou_threshold
        && iou_box(&pred.object_box, &gt.object_box) > iou_threshold
}

/// Match the first `k` predicted triplets (emission order) against the
/// ground truth one-to-one.
///
/// A ground-truth triplet is matched by the first unmatched prediction whose
/// subject and object boxes each exceed the IoU threshold and whose three
/// assigned labels are equal.
pub fn match_triplets(
    predicted: &SceneGraph,
    gt: &SceneGraph,
    k: usize,
    labels: &LabelSpace,
    provider: &dyn SimilarityProvider,
) -> Result<MatchResult, EvalError> {
    match_triplets_with_iou(predicted, gt, k, DEFAULT_MATCH_IOU, labels, provider)
}

pub fn match_triplets_with_iou(
    predicted: &SceneGraph,
    gt: &SceneGraph,
    k: usize,
    iou_threshold: f64,
    labels: &LabelSpace,
    provider: &dyn SimilarityProvider,
) -> Result<MatchResult, EvalError> {
    if gt.relations.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }
    let mut object_cache = HashMap::new();
    let mut predicate_cache = HashMap::new();
    let preds = resolve_triplets(
        predicted,
        Some(k),
        labels,
        provider,
        &mut object_cache,
        &mut predicate_cache,
    )?;
    let gts = resolve_triplets(
        gt,
        None,
        labels,
        provider,
        &mut object_cache,
        &mut predicate_cache,
    )?;

    let mut pred_used = vec![false; preds.len()];
    let mut per_gt_match = vec![None; gts.len()];
    let mut per_predicate: BTreeMap<String, PredicateTally> = BTreeMap::new();
    for (gi, gt_triplet) in gts.iter().enumerate() {
        let class = labels.predicate_classes[gt_triplet.predicate_label].clone();
        let tally = per_predicate.entry(class).or_default();
        tally.total += 1;
        for (pi, pred) in preds.iter().enumerate() {
            if pred_used[pi] || !triplet_matches(pred, gt_triplet, iou_threshold) {
                continue;
            }
            pred_used[pi] = true;
            per_gt_match[gi] = Some(pi);
            tally.matched += 1;
            break;
        }
    }

    let matched = per_gt_match.iter().filter(|m| m.is_some()).count() as u64;
    let total_gt = gts.len() as u64;
    let recall_at_k = matched as f64 / total_gt as f64;
    let mean_recall_at_k = per_predicate
        .values()
        .map(|t| t.matched as f64 / t.total as f64)
        .sum::<f64>()
        / per_predicate.len() as f64;
    Ok(MatchResult {
        matched,
        total_gt,
        recall_at_k,
        mean_recall_at_k,
        per_gt_match,
        per_predicate,
    })
}

/// Per-image entry in a dataset score report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageScore {
    pub image_id: String,
    pub predicted_relations: u64,
    pub total_gt: u64,
    pub matched: u64,
    pub recall_at_k: Option<f64>,
    pub mean_recall_at_k: Option<f64>,
}

/// Aggregate scores over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetScore {
    pub provider: String,
    pub k: usize,
    pub iou_threshold: f64,
    pub images: u64,
    /// Micro-averaged recall over all ground-truth triplets.
    pub recall_at_k: f64,
    /// Mean over the global per-predicate recalls (headline mR@K).
    pub mean_recall_at_k: f64,
    /// Mean of per-image mR@K, reported alongside the global value.
    pub mean_recall_image_mean: f64,
    pub mean_predicted_relations: f64,
    pub per_predicate: BTreeMap<String, PredicateTally>,
    pub per_image: Vec<ImageScore>,
}

/// Score a stream of (predicted, ground-truth) graph pairs.
///
/// Images with no ground-truth triplets contribute to the predicted-relation
/// mean but are skipped for recall, since their recall is undefined.
pub fn score_dataset(
    pairs: &[(SceneGraph, SceneGraph)],
    k: usize,
    iou_threshold: f64,
    labels: &LabelSpace,
    provider: &dyn SimilarityProvider,
) -> DatasetScore {
    let mut per_image = Vec::with_capacity(pairs.len());
    let mut per_predicate: BTreeMap<String, PredicateTally> = BTreeMap::new();
    let mut matched_total = 0u64;
    let mut gt_total = 0u64;
    let mut predicted_total = 0u64;
    let mut image_mr_sum = 0.0;
    let mut image_mr_count = 0u64;
    for (pred, gt) in pairs {
        predicted_total += pred.relations.len() as u64;
        if gt.relations.is_empty() {
            per_image.push(ImageScore {
                image_id: gt.image_id.clone(),
                predicted_relations: pred.relations.len() as u64,
                total_gt: 0,
                matched: 0,
                recall_at_k: None,
                mean_recall_at_k: None,
            });
            continue;
        }
        let result = match_triplets_with_iou(pred, gt, k, iou_threshold, labels, provider)
            .expect("non-empty ground truth");
        matched_total += result.matched;
        gt_total += result.total_gt;
        image_mr_sum += result.mean_recall_at_k;
        image_mr_count += 1;
        for (class, tally) in &result.per_predicate {
            let agg = per_predicate.entry(class.clone()).or_default();
            agg.matched += tally.matched;
            agg.total += tally.total;
        }
        per_image.push(ImageScore {
            image_id: gt.image_id.clone(),
            predicted_relations: pred.relations.len() as u64,
            total_gt: result.total_gt,
            matched: result.matched,
            recall_at_k: Some(result.recall_at_k),
            mean_recall_at_k: Some(result.mean_recall_at_k),
        });
    }
    let recall_at_k = if gt_total == 0 {
        0.0
    } else {
        matched_total as f64 / gt_total as f64
    };
    let mean_recall_at_k = if per_predicate.is_empty() {
        0.0
    } else {
        per_predicate
            .values()
            .map(|t| t.matched as f64 / t.total as f64)
            .sum::<f64>()
            / per_predicate.len() as f64
    };
    DatasetScore {
        provider: provider.name().to_string(),
        k,
        iou_threshold,
        images: pairs.len() as u64,
        recall_at_k,
        mean_recall_at_k,
        mean_recall_image_mean: if image_mr_count == 0 {
            0.0
        } else {
            image_mr_sum / image_mr_count as f64
        },
        mean_predicted_relations: if pairs.is_empty() {
            0.0
        } else {
            predicted_total as f64 / pairs.len() as f64
        },
        per_predicate,
        per_image,
    }
}

/// Mean embedding similarity between predicted region descriptions and
/// ground-truth class names.
pub fn region_classification_ss(
    predictions: &[String],
    gt_classes: &[String],
    provider: &dyn SimilarityProvider,
) -> Result<f64, EvalError> {
    if predictions.len() != gt_classes.len() {
        return Err(EvalError::LengthMismatch {
            pred: predictions.len(),
            gt: gt_classes.len(),
        });
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = predictions
        .iter()
        .zip(gt_classes.iter())
        .map(|(p, g)| provider.similarity(p, g))
        .sum();
    Ok(sum / predictions.len() as f64)
}
