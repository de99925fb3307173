//! Core scene-graph data model: regions, relations, graphs, and dataset records.
//!
//! All types are plain immutable values. Structural rules are checked by
//! [`validate`], which reports violations as data instead of failing, so that
//! foreign datasets can be ingested first and repaired or split afterwards.

use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::fmt;
use thiserror::Error;

/// Highest region id allowed within a single image (at most 99 regions).
pub const MAX_REGION_ID: u32 = 98;

/// Maximum number of outgoing relations kept per subject region.
pub const MAX_RELATIONS_PER_SUBJECT: usize = 20;

/// Maximum depth value; lower depth means farther from the camera.
pub const MAX_DEPTH: u32 = 255;

/// Axis-aligned box in pixel coordinates, top-left `(x1, y1)` to
/// bottom-right `(x2, y2)`. Serializes as the conventional
/// `[x1, y1, x2, y2]` array.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Serialize for BBox {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        [self.x1, self.y1, self.x2, self.y2].serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [x1, y1, x2, y2] = <[f64; 4]>::deserialize(deserializer)?;
        Ok(BBox { x1, y1, x2, y2 })
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Smallest box covering both `self` and `other`.
    pub fn union_box(&self, other: &BBox) -> BBox {
        BBox::new(
            self.x1.min(other.x1),
            self.y1.min(other.y1),
            self.x2.max(other.x2),
            self.y2.max(other.y2),
        )
    }

    pub fn is_well_formed(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x1 >= 0.0
            && self.y1 >= 0.0
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }
}

/// Binary raster mask stored as column-major run-length counts.
///
/// Runs alternate background/foreground starting with background, scanning
/// columns left to right and pixels top to bottom within a column (the
/// convention used by common detection-dataset tooling). The encoding is
/// canonical: no interior zero runs, so equal rasters compare equal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    width: u32,
    height: u32,
    runs: Vec<u32>,
}

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("mask dimensions {width}x{height} require {expected} pixels, got {actual}")]
    PixelCount {
        width: u32,
        height: u32,
        expected: u64,
        actual: u64,
    },
    #[error("run lengths sum to {actual}, expected {expected}")]
    RunSum { expected: u64, actual: u64 },
}

impl Mask {
    /// Encode a column-major pixel raster (`pixels[x * height + y]`).
    pub fn from_pixels(width: u32, height: u32, pixels: &[bool]) -> Result<Self, MaskError> {
        let expected = width as u64 * height as u64;
        if pixels.len() as u64 != expected {
            return Err(MaskError::PixelCount {
                width,
                height,
                expected,
                actual: pixels.len() as u64,
            });
        }
        let mut runs = Vec::new();
        let mut current = false; // runs start with background
        let mut count: u32 = 0;
        for &p in pixels {
            if p == current {
                count += 1;
            } else {
                runs.push(count);
                current = p;
                count = 1;
            }
        }
        runs.push(count);
        if runs.len() == 1 && runs[0] == 0 {
            runs.clear();
        }
        Ok(Self {
            width,
            height,
            runs,
        })
    }

    /// Build directly from run counts; validates the pixel-count invariant.
    pub fn from_runs(width: u32, height: u32, runs: Vec<u32>) -> Result<Self, MaskError> {
        let expected = width as u64 * height as u64;
        let actual: u64 = runs.iter().map(|&r| r as u64).sum();
        if actual != expected {
            return Err(MaskError::RunSum { expected, actual });
        }
        // Re-encode through decode to canonicalize zero runs.
        let m = Self {
            width,
            height,
            runs,
        };
        Mask::from_pixels(width, height, &m.decode())
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn runs(&self) -> &[u32] {
        &self.runs
    }

    /// Decode to a column-major boolean raster.
    pub fn decode(&self) -> Vec<bool> {
        let mut pixels = Vec::with_capacity((self.width * self.height) as usize);
        let mut value = false;
        for &run in &self.runs {
            for _ in 0..run {
                pixels.push(value);
            }
            value = !value;
        }
        pixels
    }

    /// Number of foreground pixels (sum of odd-indexed runs).
    pub fn foreground_count(&self) -> u64 {
        self.runs.iter().skip(1).step_by(2).map(|&r| r as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.foreground_count() == 0
    }
}

/// One identified image region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub id: u32,
    pub name: String,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Mask>,
    /// Depth in `[0, 255]`; lower depth means farther from the camera.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<u32>,
}

impl Region {
    pub fn new(id: u32, name: impl Into<String>, bbox: BBox) -> Self {
        Self {
            id,
            name: name.into(),
            bbox,
            mask: None,
            depth: None,
        }
    }

    pub fn with_mask(mut self, mask: Mask) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn with_depth(mut self, depth: u32) -> Self {
        self.depth = Some(depth);
        self
    }
}

/// The closed five-way relationship taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationCategory {
    Spatial,
    Interactional,
    Functional,
    Social,
    Emotional,
}

impl RelationCategory {
    pub const ALL: [RelationCategory; 5] = [
        RelationCategory::Spatial,
        RelationCategory::Interactional,
        RelationCategory::Functional,
        RelationCategory::Social,
        RelationCategory::Emotional,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            RelationCategory::Spatial => "spatial",
            RelationCategory::Interactional => "interactional",
            RelationCategory::Functional => "functional",
            RelationCategory::Social => "social",
            RelationCategory::Emotional => "emotional",
        }
    }

    /// Case-insensitive parse; any tag outside the closed set is rejected.
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "spatial" => Some(RelationCategory::Spatial),
            "interactional" => Some(RelationCategory::Interactional),
            "functional" => Some(RelationCategory::Functional),
            "social" => Some(RelationCategory::Social),
            "emotional" => Some(RelationCategory::Emotional),
            _ => None,
        }
    }
}

impl fmt::Display for RelationCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Directed relation between two regions of the same graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub subject_id: u32,
    pub object_id: u32,
    pub predicate: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<RelationCategory>,
}

impl Relation {
    pub fn new(subject_id: u32, predicate: impl Into<String>, object_id: u32) -> Self {
        Self {
            subject_id,
            object_id,
            predicate: predicate.into(),
            category: None,
        }
    }

    pub fn with_category(mut self, category: RelationCategory) -> Self {
        self.category = Some(category);
        self
    }
}

/// Case-folded, whitespace-normalized form of a predicate phrase.
///
/// This is the key used for relation dedup and removal matching.
pub fn fold_predicate(predicate: &str) -> String {
    predicate
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Per-image scene graph: ordered regions plus directed relations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub image_id: String,
    pub image_width: u32,
    pub image_height: u32,
    pub regions: Vec<Region>,
    pub relations: Vec<Relation>,
}

impl SceneGraph {
    pub fn new(image_id: impl Into<String>, image_width: u32, image_height: u32) -> Self {
        Self {
            image_id: image_id.into(),
            image_width,
            image_height,
            regions: Vec::new(),
            relations: Vec::new(),
        }
    }

    pub fn region(&self, id: u32) -> Option<&Region> {
        self.regions.iter().find(|r| r.id == id)
    }

    pub fn region_ids(&self) -> HashSet<u32> {
        self.regions.iter().map(|r| r.id).collect()
    }
}

/// Pipeline stage tags recorded on dataset records, in pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageTag {
    Raw,
    Validated,
    Filtered,
    Edited,
    Merged,
}

impl StageTag {
    pub fn rank(&self) -> u8 {
        match self {
            StageTag::Raw => 0,
            StageTag::Validated => 1,
            StageTag::Filtered => 2,
            StageTag::Edited => 3,
            StageTag::Merged => 4,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            StageTag::Raw => "raw",
            StageTag::Validated => "validated",
            StageTag::Filtered => "filtered",
            StageTag::Edited => "edited",
            StageTag::Merged => "merged",
        }
    }
}

/// One image's scene graph plus provenance; the JSONL persistence unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub scene_graph: SceneGraph,
    pub source: String,
    pub provenance: Vec<StageTag>,
}

impl DatasetRecord {
    pub fn new(scene_graph: SceneGraph, source: impl Into<String>) -> Self {
        Self {
            scene_graph,
            source: source.into(),
            provenance: vec![StageTag::Raw],
        }
    }

    /// Append a stage tag (provenance is append-only).
    pub fn push_stage(&mut self, tag: StageTag) {
        self.provenance.push(tag);
    }
}

/// A broken structural rule, reported as data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    /// Dotted path of the offending field, e.g. `regions[2].depth`.
    pub field: String,
    pub rule: ViolationRule,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationRule {
    ImageDims,
    DuplicateRegionId,
    RegionIdRange,
    DepthRange,
    MalformedBBox,
    MaskDims,
    EmptyMask,
    EmptyPredicate,
    SelfLoop,
    DanglingEndpoint,
    RelationCap,
    ProvenanceOrder,
}

fn violation(
    field: impl Into<String>,
    rule: ViolationRule,
    message: impl Into<String>,
) -> Violation {
    Violation {
        field: field.into(),
        rule,
        message: message.into(),
    }
}

/// Check every structural invariant; returns an empty list iff all hold.
pub fn validate(graph: &SceneGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    if graph.image_width == 0 || graph.image_height == 0 {
        out.push(violation(
            "image_width/image_height",
            ViolationRule::ImageDims,
            "image dimensions must be positive",
        ));
    }
    let mut seen = HashSet::new();
    for (i, region) in graph.regions.iter().enumerate() {
        let path = format!("regions[{i}]");
        if !seen.insert(region.id) {
            out.push(violation(
                format!("{path}.id"),
                ViolationRule::DuplicateRegionId,
                format!("region id {} occurs more than once", region.id),
            ));
        }
        if region.id > MAX_REGION_ID {
            out.push(violation(
                format!("{path}.id"),
                ViolationRule::RegionIdRange,
                format!("region id {} exceeds {MAX_REGION_ID}", region.id),
            ));
        }
        if let Some(depth) = region.depth {
            if depth > MAX_DEPTH {
                out.push(violation(
                    format!("{path}.depth"),
                    ViolationRule::DepthRange,
                    format!("depth {depth} outside [0, {MAX_DEPTH}]"),
                ));
            }
        }
        if !region.bbox.is_well_formed() {
            out.push(violation(
                format!("{path}.bbox"),
                ViolationRule::MalformedBBox,
                "bbox must have non-negative finite coordinates with x1<=x2, y1<=y2",
            ));
        }
        if let Some(mask) = &region.mask {
            if mask.width() != graph.image_width || mask.height() != graph.image_height {
                out.push(violation(
                    format!("{path}.mask"),
                    ViolationRule::MaskDims,
                    format!(
                        "mask is {}x{} but image is {}x{}",
                        mask.width(),
                        mask.height(),
                        graph.image_width,
                        graph.image_height
                    ),
                ));
            }
            if mask.is_empty() {
                out.push(violation(
                    format!("{path}.mask"),
                    ViolationRule::EmptyMask,
                    "mask has no foreground pixels",
                ));
            }
        }
    }
    let ids = graph.region_ids();
    let mut per_subject: HashMap<u32, usize> = HashMap::new();
    for (i, rel) in graph.relations.iter().enumerate() {
        let path = format!("relations[{i}]");
        if rel.predicate.trim().is_empty() {
            out.push(violation(
                format!("{path}.predicate"),
                ViolationRule::EmptyPredicate,
                "predicate must be a non-empty phrase",
            ));
        }
        if rel.subject_id == rel.object_id {
            out.push(violation(
                path.clone(),
                ViolationRule::SelfLoop,
                format!("relation loops region {} onto itself", rel.subject_id),
            ));
        }
        for (end, id) in [("subject_id", rel.subject_id), ("object_id", rel.object_id)] {
            if !ids.contains(&id) {
                out.push(violation(
                    format!("{path}.{end}"),
                    ViolationRule::DanglingEndpoint,
                    format!("relation endpoint {id} does not name a region"),
                ));
            }
        }
        *per_subject.entry(rel.subject_id).or_insert(0) += 1;
    }
    let mut capped: Vec<_> = per_subject
        .into_iter()
        .filter(|&(_, n)| n > MAX_RELATIONS_PER_SUBJECT)
        .collect();
    capped.sort_unstable();
    for (subject, n) in capped {
        out.push(violation(
            "relations",
            ViolationRule::RelationCap,
            format!(
                "region {subject} has {n} outgoing relations (max {MAX_RELATIONS_PER_SUBJECT})"
            ),
        ));
    }
    out
}

/// Check that provenance tags never step backwards in pipeline order.
pub fn validate_record(record: &DatasetRecord) -> Vec<Violation> {
    let mut out = validate(&record.scene_graph);
    for pair in record.provenance.windows(2) {
        if pair[1].rank() < pair[0].rank() {
            out.push(violation(
                "provenance",
                ViolationRule::ProvenanceOrder,
                format!("{} recorded after {}", pair[1].name(), pair[0].name()),
            ));
        }
    }
    out
}

#[derive(Debug, Error, PartialEq)]
pub enum StructuralError {
    #[error(
        "relation {index} ({subject_id} \"{predicate}\" {object_id}) references a missing region"
    )]
    DanglingRelation {
        index: usize,
        subject_id: u32,
        predicate: String,
        object_id: u32,
    },
}

/// Dedup relations and cap each subject at 20 outgoing relations.
///
/// Duplicates share (subject, object, case-folded whitespace-normalized
/// predicate); the first occurrence wins and input order is otherwise
/// preserved. Regions are never altered. A relation naming a missing region
/// is a structural-integrity error rather than a violation, since silently
/// dropping it would hide a wiring bug upstream.
pub fn canonicalize(graph: SceneGraph) -> Result<SceneGraph, StructuralError> {
    let ids = graph.region_ids();
    let mut seen: HashSet<(u32, u32, String)> = HashSet::new();
    let mut per_subject: HashMap<u32, usize> = HashMap::new();
    let mut relations = Vec::with_capacity(graph.relations.len());
    for (index, rel) in graph.relations.into_iter().enumerate() {
        if !ids.contains(&rel.subject_id) || !ids.contains(&rel.object_id) {
            return Err(StructuralError::DanglingRelation {
                index,
                subject_id: rel.subject_id,
                predicate: rel.predicate,
                object_id: rel.object_id,
            });
        }
        let key = (
            rel.subject_id,
            rel.object_id,
            fold_predicate(&rel.predicate),
        );
        if !seen.insert(key) {
            continue;
        }
        let count = per_subject.entry(rel.subject_id).or_insert(0);
        if *count >= MAX_RELATIONS_PER_SUBJECT {
            continue;
        }
        *count += 1;
        relations.push(rel);
    }
    Ok(SceneGraph { relations, ..graph })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph_with_regions(n: u32) -> SceneGraph {
        let mut g = SceneGraph::new("img", 100, 100);
        for id in 0..n {
            g.regions.push(Region::new(
                id,
                format!("thing {id}"),
                BBox::new(0.0, 0.0, 10.0, 10.0),
            ));
        }
        g
    }

    #[test]
    fn canonicalize_caps_at_twenty_per_subject() {
        let mut g = graph_with_regions(26);
        for obj in 1..26 {
            g.relations
                .push(Relation::new(1, format!("near {obj}"), obj % 26));
        }
        // 25 distinct relations from region 1 (skip the self-loop target)
        g.relations.retain(|r| r.subject_id != r.object_id);
        let before: Vec<_> = g.relations.clone();
        let out = canonicalize(g).unwrap();
        assert_eq!(out.relations.len(), 20);
        assert_eq!(&out.relations[..], &before[..20]);
    }

    #[test]
    fn canonicalize_empty_graph_is_identity() {
        let g = graph_with_regions(3);
        let out = canonicalize(g.clone()).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn canonicalize_dedups_repeated_relation() {
        let mut g = graph_with_regions(3);
        g.relations.push(Relation::new(1, "on", 2));
        g.relations.push(Relation::new(1, "on", 2));
        g.relations.push(Relation::new(1, " ON  ", 2));
        let out = canonicalize(g).unwrap();
        assert_eq!(out.relations.len(), 1);
        assert_eq!(out.relations[0].predicate, "on");
    }

    #[test]
    fn canonicalize_is_idempotent() {
        let mut g = graph_with_regions(5);
        for i in 0..4 {
            g.relations.push(Relation::new(i, "beside", i + 1));
            g.relations.push(Relation::new(i, "Beside", i + 1));
        }
        let once = canonicalize(g).unwrap();
        let twice = canonicalize(once.clone()).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn canonicalize_rejects_dangling_endpoint() {
        let mut g = graph_with_regions(2);
        g.relations.push(Relation::new(0, "on", 7));
        let err = canonicalize(g).unwrap_err();
        assert_eq!(
            err,
            StructuralError::DanglingRelation {
                index: 0,
                subject_id: 0,
                predicate: "on".into(),
                object_id: 7,
            }
        );
    }

    #[test]
    fn validate_accepts_well_formed_graph() {
        let mut g = graph_with_regions(3);
        g.relations.push(Relation::new(0, "left of", 1));
        assert!(validate(&g).is_empty());
    }

    #[test]
    fn validate_flags_self_loop() {
        let mut g = graph_with_regions(2);
        g.relations.push(Relation::new(1, "on", 1));
        let v = validate(&g);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, ViolationRule::SelfLoop);
    }

    #[test]
    fn validate_flags_depth_out_of_range() {
        let mut g = graph_with_regions(1);
        g.regions[0].depth = Some(300);
        let v = validate(&g);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, ViolationRule::DepthRange);
        assert_eq!(v[0].field, "regions[0].depth");
    }

    #[test]
    fn validate_flags_region_id_ceiling() {
        let mut g = graph_with_regions(1);
        g.regions[0].id = 99;
        let v = validate(&g);
        assert_eq!(v[0].rule, ViolationRule::RegionIdRange);
    }

    #[test]
    fn mask_roundtrip_and_counts() {
        let mut pixels = vec![false; 12];
        pixels[3] = true;
        pixels[4] = true;
        pixels[11] = true;
        let m = Mask::from_pixels(3, 4, &pixels).unwrap();
        assert_eq!(m.decode(), pixels);
        assert_eq!(m.foreground_count(), 3);
        assert_eq!(m.runs().iter().map(|&r| r as u64).sum::<u64>(), 12);
    }

    #[test]
    fn mask_from_runs_validates_sum() {
        assert!(Mask::from_runs(2, 2, vec![1, 3]).is_ok());
        assert!(Mask::from_runs(2, 2, vec![1, 2]).is_err());
    }

    #[test]
    fn category_parse_is_closed() {
        assert_eq!(
            RelationCategory::parse("Spatial"),
            Some(RelationCategory::Spatial)
        );
        assert_eq!(RelationCategory::parse("hierarchical"), None);
    }

    #[test]
    fn provenance_order_checked() {
        let mut rec = DatasetRecord::new(graph_with_regions(1), "test");
        rec.push_stage(StageTag::Edited);
        rec.push_stage(StageTag::Validated);
        let v = validate_record(&rec);
        assert!(v.iter().any(|x| x.rule == ViolationRule::ProvenanceOrder));
    }

    #[test]
    fn fold_predicate_normalizes() {
        assert_eq!(fold_predicate("  Standing\t ON "), "standing on");
    }
}
