//! Region-token text grammar: parse and emit the `Objects:`/`Relations:`
//! block format, plus the edit-set wire format.
//!
//! The parser is total over arbitrary strings: malformed lines become
//! diagnostics instead of failures, and every input line is accounted for in
//! [`LineStats`]. The only hard error is a missing `Objects:` header, since
//! nothing is recoverable without it.

use crate::geometry::{denormalize_box, normalize_box, NormBBox, NORM_RANGE};
use crate::graph::{Region, Relation, RelationCategory, SceneGraph};
use regex::Regex;
use serde::Serialize;
use std::collections::BTreeMap;
use std::sync::LazyLock;
use thiserror::Error;

static OBJECT_LINE_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^region(\d+)\s*:\s*(.*)$").unwrap());
static BOX_TOKEN_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"<\|box_start\|>\s*\((\d+)\s*,\s*(\d+)\)\s*,\s*\((\d+)\s*,\s*(\d+)\)\s*<\|box_end\|>",
    )
    .unwrap()
});
static RELATION_ITEM_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^region(\d+)\s+(.+)$").unwrap());

/// A region reference in token form:
/// `region{i} <mask> <pos> <|box_start|>(x1, y1),(x2, y2)<|box_end|>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionToken {
    pub id: u32,
    pub with_mask_pos: bool,
    pub norm_bbox: Option<NormBBox>,
}

impl RegionToken {
    pub fn render(&self) -> String {
        let mut s = format!("region{}", self.id);
        if self.with_mask_pos {
            s.push_str(" <mask> <pos>");
        }
        if let Some(b) = &self.norm_bbox {
            s.push_str(&format!(
                " <|box_start|>({},{}),({},{})<|box_end|>",
                b.x1, b.y1, b.x2, b.y2
            ));
        }
        s
    }
}

/// Something the parser repaired or skipped, with enough context to audit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub location: String,
    pub message: String,
}

impl Diagnostic {
    fn at_line(line: usize, message: impl Into<String>) -> Self {
        Self {
            location: format!("line {line}"),
            message: message.into(),
        }
    }

    fn at(location: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            location: location.into(),
            message: message.into(),
        }
    }
}

/// Per-line accounting: every input line lands in exactly one bucket.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LineStats {
    pub total: usize,
    /// Blank lines, headers, and preamble before the `Objects:` block.
    pub ignored: usize,
    pub parsed: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedSceneGraph {
    pub graph: SceneGraph,
    pub diagnostics: Vec<Diagnostic>,
    pub line_stats: LineStats,
}

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("no `Objects:` header found in the text")]
    MissingObjectsHeader,
    #[error("no object literal found in the text")]
    NoObjectLiteral,
}

fn is_objects_header(line: &str) -> bool {
    line.trim().eq_ignore_ascii_case("objects:")
}

fn is_relations_header(line: &str) -> bool {
    line.trim().eq_ignore_ascii_case("relations:")
}

/// Parse a box token out of an object-line tail; returns the normalized box,
/// the tail with the token removed, and any repairs made.
fn extract_box(
    tail: &str,
    line_no: usize,
    diagnostics: &mut Vec<Diagnostic>,
) -> (Option<NormBBox>, String) {
    let Some(caps) = BOX_TOKEN_RE.captures(tail) else {
        return (None, tail.to_string());
    };
    let mut vals = [0u16; 4];
    for (i, v) in vals.iter_mut().enumerate() {
        let raw: u64 = caps[i + 1].parse().unwrap_or(u64::from(NORM_RANGE) + 1);
        if raw > u64::from(NORM_RANGE) {
            diagnostics.push(Diagnostic::at_line(
                line_no,
                format!("box coordinate {raw} clamped to {NORM_RANGE}"),
            ));
            *v = NORM_RANGE;
        } else {
            *v = raw as u16;
        }
    }
    let [mut x1, mut y1, mut x2, mut y2] = vals;
    if x1 > x2 || y1 > y2 {
        diagnostics.push(Diagnostic::at_line(
            line_no,
            "box corners out of order; swapped",
        ));
        if x1 > x2 {
            std::mem::swap(&mut x1, &mut x2);
        }
        if y1 > y2 {
            std::mem::swap(&mut y1, &mut y2);
        }
    }
    let whole = caps.get(0).unwrap();
    let mut rest = String::with_capacity(tail.len());
    rest.push_str(&tail[..whole.start()]);
    rest.push_str(&tail[whole.end()..]);
    (Some(NormBBox::new(x1, y1, x2, y2)), rest)
}

/// Parse model output in the `Objects:`/`Relations:` block format into a
/// scene graph, denormalizing boxes from 0-1000 space into pixel space.
///
/// Object lines without a box token (the classification format) get a zero
/// box. Relations referencing unparsed regions, self-loops, and duplicate
/// region ids are dropped with diagnostics; the first occurrence wins.
pub fn parse_scene_graph_text(
    text: &str,
    image_id: &str,
    image_width: u32,
    image_height: u32,
) -> Result<ParsedSceneGraph, ParseError> {
    let lines: Vec<&str> = text.lines().collect();
    let objects_at = lines
        .iter()
        .position(|l| is_objects_header(l))
        .ok_or(ParseError::MissingObjectsHeader)?;
    let relations_at = lines[objects_at + 1..]
        .iter()
        .position(|l| is_relations_header(l))
        .map(|i| i + objects_at + 1);

    let mut graph = SceneGraph::new(image_id, image_width, image_height);
    let mut diagnostics = Vec::new();
    let mut stats = LineStats {
        total: lines.len(),
        ..Default::default()
    };

    let object_range = objects_at + 1..relations_at.unwrap_or(lines.len());
    let relation_range = relations_at.map(|r| r + 1..lines.len());

    for (idx, line) in lines.iter().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim().trim_start_matches(['-', '*']).trim();
        let is_header = idx == objects_at || Some(idx) == relations_at;
        if is_header || trimmed.is_empty() || idx < objects_at {
            stats.ignored += 1;
            continue;
        }
        if object_range.contains(&idx) {
            let Some(caps) = OBJECT_LINE_RE.captures(trimmed) else {
                diagnostics.push(Diagnostic::at_line(line_no, "unrecognized object line"));
                stats.skipped += 1;
                continue;
            };
            let Ok(id) = caps[1].parse::<u32>() else {
                diagnostics.push(Diagnostic::at_line(line_no, "region id out of range"));
                stats.skipped += 1;
                continue;
            };
            if graph.region(id).is_some() {
                diagnostics.push(Diagnostic::at_line(
                    line_no,
                    format!("duplicate region id {id}; first occurrence kept"),
                ));
                stats.skipped += 1;
                continue;
            }
            let (norm, name_part) = extract_box(&caps[2], line_no, &mut diagnostics);
            let name = name_part
                .replace("<mask>", "")
                .replace("<pos>", "")
                .trim()
                .to_string();
            let bbox = match norm {
                Some(n) => denormalize_box(&n, image_width, image_height),
                None => crate::graph::BBox::new(0.0, 0.0, 0.0, 0.0),
            };
            graph.regions.push(Region::new(id, name, bbox));
            stats.parsed += 1;
        } else if relation_range.as_ref().is_some_and(|r| r.contains(&idx)) {
            let Some(caps) = OBJECT_LINE_RE.captures(trimmed) else {
                diagnostics.push(Diagnostic::at_line(line_no, "unrecognized relation line"));
                stats.skipped += 1;
                continue;
            };
            let Ok(subject_id) = caps[1].parse::<u32>() else {
                diagnostics.push(Diagnostic::at_line(line_no, "subject id out of range"));
                stats.skipped += 1;
                continue;
            };
            if graph.region(subject_id).is_none() {
                diagnostics.push(Diagnostic::at_line(
                    line_no,
                    format!("relations for unparsed region {subject_id} dropped"),
                ));
                stats.skipped += 1;
                continue;
            }
            for item in caps[2].split(',') {
                let item = item.trim().trim_end_matches('.').trim();
                if item.is_empty() {
                    continue;
                }
                let Some(rc) = RELATION_ITEM_RE.captures(item) else {
                    diagnostics.push(Diagnostic::at_line(
                        line_no,
                        format!("unrecognized relation item `{item}`"),
                    ));
                    continue;
                };
                let Ok(object_id) = rc[1].parse::<u32>() else {
                    diagnostics.push(Diagnostic::at_line(line_no, "object id out of range"));
                    continue;
                };
                let predicate = rc[2].trim().to_string();
                if graph.region(object_id).is_none() {
                    diagnostics.push(Diagnostic::at_line(
                        line_no,
                        format!("relation to unparsed region {object_id} dropped"),
                    ));
                    continue;
                }
                if object_id == subject_id {
                    diagnostics.push(Diagnostic::at_line(
                        line_no,
                        format!("self-loop on region {subject_id} dropped"),
                    ));
                    continue;
                }
                graph
                    .relations
                    .push(Relation::new(subject_id, predicate, object_id));
            }
            stats.parsed += 1;
        } else {
            // trailing chatter after the relations block
            diagnostics.push(Diagnostic::at_line(line_no, "text outside any block"));
            stats.skipped += 1;
        }
    }

    Ok(ParsedSceneGraph {
        graph,
        diagnostics,
        line_stats: stats,
    })
}

/// Serialize a scene graph into the `Objects:`/`Relations:` block format.
///
/// Deterministic: identical graphs produce identical bytes. Boxes are
/// normalized into 0-1000 space from the graph's image dimensions. Relations
/// are grouped by subject in region-list order.
pub fn emit_scene_graph_text(graph: &SceneGraph, with_boxes: bool) -> String {
    let mut out = String::from("Objects:\n");
    for region in &graph.regions {
        out.push_str(&format!("region{}: {}", region.id, region.name));
        if with_boxes {
            let (b, _) = normalize_box(&region.bbox, graph.image_width, graph.image_height);
            out.push_str(&format!(
                " <|box_start|>({},{}),({},{})<|box_end|>",
                b.x1, b.y1, b.x2, b.y2
            ));
        }
        out.push('\n');
    }
    out.push_str("Relations:\n");
    for region in &graph.regions {
        let items: Vec<String> = graph
            .relations
            .iter()
            .filter(|r| r.subject_id == region.id)
            .map(|r| format!("region{} {}", r.object_id, r.predicate))
            .collect();
        if !items.is_empty() {
            out.push_str(&format!("region{}: {}\n", region.id, items.join(", ")));
        }
    }
    out
}

/// One relation addition from an edit set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelationAdd {
    pub predicate: String,
    pub object_id: u32,
    pub category: Option<RelationCategory>,
}

/// One relation removal from an edit set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelationRemove {
    pub predicate: String,
    pub object_id: u32,
}

/// Edits targeting one region.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RegionEdit {
    pub new_name: Option<String>,
    pub additions: Vec<RelationAdd>,
    pub removals: Vec<RelationRemove>,
}

impl RegionEdit {
    pub fn is_empty(&self) -> bool {
        self.new_name.is_none() && self.additions.is_empty() && self.removals.is_empty()
    }
}

/// Per-region description revisions plus relation add/remove lists.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EditSet {
    pub edits: BTreeMap<u32, RegionEdit>,
}

impl EditSet {
    pub fn is_empty(&self) -> bool {
        self.edits.values().all(RegionEdit::is_empty)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedEditSet {
    pub edit_set: EditSet,
    pub diagnostics: Vec<Diagnostic>,
}

/// Locate the first balanced `{...}` block, skipping string contents.
fn extract_object_literal(s: &str) -> Option<&str> {
    let mut depth = 0usize;
    let mut start = None;
    let mut in_str = false;
    let mut escaped = false;
    for (i, ch) in s.char_indices() {
        if in_str {
            if escaped {
                escaped = false;
            } else if ch == '\\' {
                escaped = true;
            } else if ch == '"' {
                in_str = false;
            }
            continue;
        }
        match ch {
            '"' => in_str = true,
            '{' => {
                if depth == 0 {
                    start = Some(i);
                }
                depth += 1;
            }
            '}' if depth > 0 => {
                depth -= 1;
                if depth == 0 {
                    return Some(&s[start.unwrap()..=i]);
                }
            }
            _ => {}
        }
    }
    None
}

fn parse_json_tolerant(block: &str) -> Option<serde_json::Value> {
    if let Ok(v) = serde_json::from_str(block) {
        return Some(v);
    }
    // python-dict style output: single quotes, no double quotes anywhere
    if !block.contains('"') {
        let swapped = block.replace('\'', "\"");
        if let Ok(v) = serde_json::from_str(&swapped) {
            return Some(v);
        }
    }
    None
}

fn coerce_id(v: &serde_json::Value) -> Option<u32> {
    match v {
        serde_json::Value::Number(n) => n.as_u64().and_then(|x| u32::try_from(x).ok()),
        serde_json::Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn key_matches(key: &str, names: &[&str]) -> bool {
    names.iter().any(|n| key.eq_ignore_ascii_case(n))
}

fn parse_id_list(
    predicate: &str,
    value: &serde_json::Value,
    path: &str,
    diagnostics: &mut Vec<Diagnostic>,
) -> (Vec<u32>, Option<RelationCategory>) {
    let mut ids = Vec::new();
    let mut category = None;
    match value {
        serde_json::Value::Array(items) => {
            for item in items {
                if let Some(id) = coerce_id(item) {
                    ids.push(id);
                } else if let serde_json::Value::String(s) = item {
                    // the edit prompt tells the model to put the relationship
                    // type string into the same list as the object ids
                    if let Some(cat) = RelationCategory::parse(s) {
                        category = Some(cat);
                    } else {
                        diagnostics.push(Diagnostic::at(
                            path,
                            format!("unrecognized entry `{s}` for `{predicate}`"),
                        ));
                    }
                } else {
                    diagnostics.push(Diagnostic::at(
                        path,
                        format!("unrecognized entry for `{predicate}`"),
                    ));
                }
            }
        }
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                if key_matches(k, &["ids", "objects", "object_ids", "obj_ids"]) {
                    let (inner, _) = parse_id_list(predicate, v, path, diagnostics);
                    ids.extend(inner);
                } else if key_matches(k, &["category", "type"]) {
                    match v.as_str().and_then(RelationCategory::parse) {
                        Some(cat) => category = Some(cat),
                        None => diagnostics.push(Diagnostic::at(
                            path,
                            format!("unrecognized category for `{predicate}`"),
                        )),
                    }
                } else {
                    diagnostics.push(Diagnostic::at(path, format!("unknown key `{k}` ignored")));
                }
            }
        }
        other => {
            if let Some(id) = coerce_id(other) {
                ids.push(id);
            } else {
                diagnostics.push(Diagnostic::at(
                    path,
                    format!("expected id list for `{predicate}`"),
                ));
            }
        }
    }
    (ids, category)
}

fn parse_rel_block(
    value: &serde_json::Value,
    path: &str,
    edit: &mut RegionEdit,
    diagnostics: &mut Vec<Diagnostic>,
) {
    let Some(map) = value.as_object() else {
        diagnostics.push(Diagnostic::at(path, "rel block is not an object"));
        return;
    };
    for (key, val) in map {
        let subpath = format!("{path}.{key}");
        if key_matches(key, &["add", "added", "adds"]) {
            match val {
                serde_json::Value::Object(preds) => {
                    for (pred, ids_val) in preds {
                        let (ids, category) = parse_id_list(pred, ids_val, &subpath, diagnostics);
                        for object_id in ids {
                            edit.additions.push(RelationAdd {
                                predicate: pred.clone(),
                                object_id,
                                category,
                            });
                        }
                    }
                }
                serde_json::Value::Array(items) if items.is_empty() => {}
                _ => diagnostics.push(Diagnostic::at(&subpath, "expected predicate map")),
            }
        } else if key_matches(key, &["remove", "removed", "removes"]) {
            match val {
                serde_json::Value::Object(preds) => {
                    for (pred, ids_val) in preds {
                        let (ids, _) = parse_id_list(pred, ids_val, &subpath, diagnostics);
                        for object_id in ids {
                            edit.removals.push(RelationRemove {
                                predicate: pred.clone(),
                                object_id,
                            });
                        }
                    }
                }
                serde_json::Value::Array(items) if items.is_empty() => {}
                _ => diagnostics.push(Diagnostic::at(&subpath, "expected predicate map")),
            }
        } else {
            diagnostics.push(Diagnostic::at(&subpath, "unknown rel key ignored"));
        }
    }
}

/// Parse an edit set from raw model output.
///
/// Strips surrounding prose and code fences around one object literal, then
/// reads it tolerantly: keys are matched case-insensitively, `remove` and
/// `removed` both work, ids coerce from numbers or numeric strings, and
/// unknown keys become diagnostics instead of failures.
pub fn parse_edit_set(text: &str) -> Result<ParsedEditSet, ParseError> {
    let block = extract_object_literal(text).ok_or(ParseError::NoObjectLiteral)?;
    let value = parse_json_tolerant(block).ok_or(ParseError::NoObjectLiteral)?;
    let map = value.as_object().ok_or(ParseError::NoObjectLiteral)?;

    let mut edit_set = EditSet::default();
    let mut diagnostics = Vec::new();
    for (key, val) in map {
        let Some(region_id) = key.trim().parse::<u32>().ok() else {
            diagnostics.push(Diagnostic::at(
                key.as_str(),
                "top-level key is not a region id; ignored",
            ));
            continue;
        };
        let path = format!("{region_id}");
        let Some(obj) = val.as_object() else {
            diagnostics.push(Diagnostic::at(&path, "edit entry is not an object"));
            continue;
        };
        let edit = edit_set.edits.entry(region_id).or_default();
        for (k, v) in obj {
            let subpath = format!("{path}.{k}");
            if key_matches(k, &["name", "description"]) {
                match v.as_str() {
                    Some(s) => edit.new_name = Some(s.to_string()),
                    None => diagnostics.push(Diagnostic::at(&subpath, "name is not a string")),
                }
            } else if key_matches(
                k,
                &["rel", "rels", "relation", "relations", "relationships"],
            ) {
                parse_rel_block(v, &subpath, edit, &mut diagnostics);
            } else if key_matches(k, &["bbox", "box"]) {
                diagnostics.push(Diagnostic::at(&subpath, "bbox edits are not applied"));
            } else {
                diagnostics.push(Diagnostic::at(&subpath, "unknown key ignored"));
            }
        }
    }
    Ok(ParsedEditSet {
        edit_set,
        diagnostics,
    })
}
