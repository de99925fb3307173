//! Stage implementations shared by the individual subcommands and the
//! config-driven pipeline runner. Each stage maps a record list to a new
//! record list plus structured diagnostics for the sidecar file.

use crate::formats::{EditSource, JudgesConfig, ScoreKey};
use anyhow::{anyhow, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use sgkit::filters::{
    judge_filter, rule_filter, similarity_filter, CategoryTally, FilterReport, JudgeVerdict,
    JudgedRelation, PredicateRuleMap, SimilarityCandidate,
};
use sgkit::geometry::Proposal;
use sgkit::graph::{canonicalize, fold_predicate, DatasetRecord, Relation, SceneGraph, StageTag};
use sgkit::pipeline::{apply_edits, validate_regions, StatsAccumulator};
use sgkit::teacher::{
    build_edit_prompt, build_judge_prompt, build_relation_prompt, call_with_retry, judge_crop,
    request_digest, ChatRequest, RetryPolicy, Transport,
};
use sgkit::text::{parse_edit_set, parse_scene_graph_text, EditSet};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

fn canonical_record(record: DatasetRecord) -> Result<DatasetRecord> {
    let image = record.scene_graph.image_id.clone();
    let scene_graph = canonicalize(record.scene_graph)
        .with_context(|| format!("canonicalizing graph for image `{image}`"))?;
    Ok(DatasetRecord {
        scene_graph,
        ..record
    })
}

pub fn stage_validate_regions(
    records: Vec<DatasetRecord>,
    proposals_by_image: &HashMap<String, Vec<Proposal>>,
    iou: f64,
) -> (Vec<DatasetRecord>, Vec<serde_json::Value>) {
    let empty = Vec::new();
    let mut out = Vec::with_capacity(records.len());
    let mut diagnostics = Vec::new();
    for mut record in records {
        let proposals = proposals_by_image
            .get(&record.scene_graph.image_id)
            .unwrap_or(&empty);
        let validated = validate_regions(&record.scene_graph, proposals, iou);
        diagnostics.push(json!({
            "image_id": record.scene_graph.image_id,
            "regions_in": record.scene_graph.regions.len(),
            "regions_kept": validated.graph.regions.len(),
            "matches": validated.matches,
        }));
        record.scene_graph = validated.graph;
        record.push_stage(StageTag::Validated);
        out.push(record);
    }
    (out, diagnostics)
}

/// What `annotate` keeps per image besides the updated record.
pub struct AnnotateArtifacts {
    pub image_id: String,
    pub request: ChatRequest,
    pub response: Option<String>,
    pub attempts: u32,
}

/// Ask the teacher for dense relationships and merge the parsed relations
/// whose endpoints exist back into each graph. With no transport this is a
/// dry run: requests are built and returned unanswered.
pub fn stage_annotate(
    records: Vec<DatasetRecord>,
    transport: Option<&dyn Transport>,
    captions: &HashMap<String, Vec<String>>,
    subjects: u32,
    policy: &RetryPolicy,
) -> Result<(
    Vec<DatasetRecord>,
    Vec<AnnotateArtifacts>,
    Vec<serde_json::Value>,
)> {
    let empty = Vec::new();
    let requests: Vec<(DatasetRecord, ChatRequest)> = records
        .into_iter()
        .map(|record| {
            let caps = captions.get(&record.scene_graph.image_id).unwrap_or(&empty);
            let request = build_relation_prompt(&record.scene_graph, caps, subjects);
            (record, request)
        })
        .collect();

    let Some(transport) = transport else {
        let artifacts = requests
            .iter()
            .map(|(record, request)| AnnotateArtifacts {
                image_id: record.scene_graph.image_id.clone(),
                request: request.clone(),
                response: None,
                attempts: 0,
            })
            .collect();
        let records = requests.into_iter().map(|(r, _)| r).collect();
        return Ok((records, artifacts, Vec::new()));
    };

    let responses: Vec<Result<(String, u32)>> = requests
        .par_iter()
        .map(|(_, request)| {
            let outcome = call_with_retry(transport, request, policy)?;
            Ok((outcome.text, outcome.attempts))
        })
        .collect();

    let mut out = Vec::with_capacity(requests.len());
    let mut artifacts = Vec::with_capacity(requests.len());
    let mut diagnostics = Vec::new();
    for ((mut record, request), response) in requests.into_iter().zip(responses) {
        let image_id = record.scene_graph.image_id.clone();
        let (text, attempts) =
            response.with_context(|| format!("annotating image `{image_id}`"))?;
        let parsed = parse_scene_graph_text(
            &text,
            &image_id,
            record.scene_graph.image_width,
            record.scene_graph.image_height,
        );
        match parsed {
            Ok(parsed) => {
                let ids = record.scene_graph.region_ids();
                let mut added = 0usize;
                let mut dropped = 0usize;
                for rel in &parsed.graph.relations {
                    if ids.contains(&rel.subject_id)
                        && ids.contains(&rel.object_id)
                        && rel.subject_id != rel.object_id
                    {
                        record.scene_graph.relations.push(rel.clone());
                        added += 1;
                    } else {
                        dropped += 1;
                    }
                }
                record = canonical_record(record)?;
                diagnostics.push(json!({
                    "image_id": image_id,
                    "relations_added": added,
                    "relations_dropped": dropped,
                    "parse_diagnostics": parsed.diagnostics.len(),
                }));
            }
            Err(e) => {
                diagnostics.push(json!({
                    "image_id": image_id,
                    "error": e.to_string(),
                }));
            }
        }
        artifacts.push(AnnotateArtifacts {
            image_id,
            request,
            response: Some(text),
            attempts,
        });
        out.push(record);
    }
    Ok((out, artifacts, diagnostics))
}

/// Aggregate report for one filtering run, mirroring the per-category
/// raw-versus-filtered accounting.
#[derive(Debug, Default, Serialize)]
pub struct FilterRunReport {
    pub images: u64,
    pub relations_in: u64,
    pub relations_kept: u64,
    pub relations_removed: u64,
    pub removed_by_reason: BTreeMap<String, u64>,
    pub per_category: BTreeMap<String, CategoryTally>,
}

impl FilterRunReport {
    fn absorb(&mut self, report: &FilterReport) {
        self.relations_in += report.input_len() as u64;
        self.relations_kept += report.kept.len() as u64;
        self.relations_removed += report.removed.len() as u64;
        for removed in &report.removed {
            let reason = serde_json::to_value(removed.reason)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_else(|| "unknown".into());
            *self.removed_by_reason.entry(reason).or_insert(0) += 1;
        }
        for (category, tally) in &report.counts {
            let agg = self.per_category.entry(category.clone()).or_default();
            agg.input += tally.input;
            agg.kept += tally.kept;
            agg.removed += tally.removed;
        }
    }
}

struct Judge {
    name: String,
    transport: Box<dyn Transport>,
    policy: RetryPolicy,
}

fn judge_relations(
    graph: &SceneGraph,
    relations: &[Relation],
    judges: &[Judge],
) -> Result<Vec<JudgedRelation>> {
    let verdicts: Vec<Result<JudgedRelation>> = relations
        .par_iter()
        .map(|rel| {
            let subject = graph
                .region(rel.subject_id)
                .ok_or_else(|| anyhow!("relation subject {} missing", rel.subject_id))?;
            let object = graph
                .region(rel.object_id)
                .ok_or_else(|| anyhow!("relation object {} missing", rel.object_id))?;
            let phrase = format!("{} {} {}", subject.name, rel.predicate, object.name);
            let request = build_judge_prompt(&graph.image_id, subject, &rel.predicate, object);
            let mut verdicts = Vec::with_capacity(judges.len());
            for judge in judges {
                let outcome = call_with_retry(judge.transport.as_ref(), &request, &judge.policy)
                    .with_context(|| format!("judge `{}` on `{phrase}`", judge.name))?;
                verdicts.push(JudgeVerdict::from_response(
                    judge.name.clone(),
                    outcome.text,
                ));
            }
            Ok(JudgedRelation {
                relation: rel.clone(),
                phrase,
                verdicts,
            })
        })
        .collect();
    verdicts.into_iter().collect()
}

pub struct FilterParams<'a> {
    pub rules: &'a PredicateRuleMap,
    pub judges: Option<&'a JudgesConfig>,
    pub scores: Option<&'a HashMap<ScoreKey, f64>>,
    pub sim_threshold: f64,
}

/// Rule-filter spatial predicates, judge-filter the rest when judges are
/// configured, then optionally similarity-filter the survivors.
pub fn stage_filter(
    records: Vec<DatasetRecord>,
    params: &FilterParams,
) -> Result<(Vec<DatasetRecord>, FilterRunReport)> {
    let judges: Option<Vec<Judge>> = match params.judges {
        Some(cfg) => {
            let policy = cfg.retry.clone().unwrap_or_default();
            let mut out = Vec::new();
            for entry in &cfg.judges {
                let transport = entry
                    .transport
                    .build()
                    .with_context(|| format!("building transport for judge `{}`", entry.name))?
                    .ok_or_else(|| {
                        anyhow!("judge `{}` cannot be a dry-run transport", entry.name)
                    })?;
                out.push(Judge {
                    name: entry.name.clone(),
                    transport,
                    policy: policy.clone(),
                });
            }
            Some(out)
        }
        None => None,
    };

    let mut report = FilterRunReport::default();
    let mut out = Vec::with_capacity(records.len());
    for record in records {
        let mut record = canonical_record(record)?;
        let graph = record.scene_graph.clone();
        report.images += 1;

        let rule_report = rule_filter(&graph, params.rules);
        let mut removed = rule_report.removed.clone();
        let mut kept = rule_report.kept;

        if let Some(judges) = &judges {
            let to_judge: Vec<Relation> = kept
                .iter()
                .filter(|r| sgkit::filters::needs_judge(r, params.rules))
                .cloned()
                .collect();
            if !to_judge.is_empty() {
                let items = judge_relations(&graph, &to_judge, judges)?;
                let judge_report = judge_filter(items)?;
                let removed_keys: std::collections::HashSet<(u32, String, u32)> = judge_report
                    .removed
                    .iter()
                    .map(|r| {
                        (
                            r.relation.subject_id,
                            fold_predicate(&r.relation.predicate),
                            r.relation.object_id,
                        )
                    })
                    .collect();
                kept.retain(|r| {
                    !removed_keys.contains(&(
                        r.subject_id,
                        fold_predicate(&r.predicate),
                        r.object_id,
                    ))
                });
                removed.extend(judge_report.removed);
            }
        }

        if let Some(scores) = params.scores {
            let mut score_map: HashMap<(String, String), f64> = HashMap::new();
            let mut candidates = Vec::with_capacity(kept.len());
            for rel in &kept {
                let subject = graph
                    .region(rel.subject_id)
                    .ok_or_else(|| anyhow!("relation subject {} missing", rel.subject_id))?;
                let object = graph
                    .region(rel.object_id)
                    .ok_or_else(|| anyhow!("relation object {} missing", rel.object_id))?;
                let phrase = format!("{} {} {}", subject.name, rel.predicate, object.name);
                let crop = judge_crop(subject, object);
                let crop_ref = format!(
                    "crop:{}:({},{}),({},{})",
                    graph.image_id, crop.x1, crop.y1, crop.x2, crop.y2
                );
                let key: ScoreKey = (
                    graph.image_id.clone(),
                    rel.subject_id,
                    rel.object_id,
                    fold_predicate(&rel.predicate),
                );
                if let Some(&score) = scores.get(&key) {
                    score_map.insert((phrase.clone(), crop_ref.clone()), score);
                }
                candidates.push(SimilarityCandidate {
                    relation: rel.clone(),
                    phrase,
                    crop_ref,
                });
            }
            let sim_report = similarity_filter(candidates, &score_map, params.sim_threshold)?;
            kept = sim_report.kept;
            removed.extend(sim_report.removed);
        }

        report.absorb(&FilterReport::from_partition(kept.clone(), removed));
        record.scene_graph.relations = kept;
        record.push_stage(StageTag::Filtered);
        out.push(record);
    }
    Ok((out, report))
}

/// Artifacts from `edit-generate`: the raw editor response per image.
pub struct EditArtifacts {
    pub image_id: String,
    pub request: ChatRequest,
    pub response: Option<String>,
    pub attempts: u32,
}

pub fn stage_edit_generate(
    records: &[DatasetRecord],
    transport: Option<&dyn Transport>,
    captions: &HashMap<String, Vec<String>>,
    policy: &RetryPolicy,
) -> Result<Vec<EditArtifacts>> {
    let requests: Vec<(String, ChatRequest)> = records
        .iter()
        .map(|record| {
            let id = record.scene_graph.image_id.clone();
            let caption = captions.get(&id).map(|c| c.join("\n")).unwrap_or_default();
            let request = build_edit_prompt(&record.scene_graph, &caption);
            (id, request)
        })
        .collect();

    let Some(transport) = transport else {
        return Ok(requests
            .into_iter()
            .map(|(image_id, request)| EditArtifacts {
                image_id,
                request,
                response: None,
                attempts: 0,
            })
            .collect());
    };

    let responses: Vec<Result<(String, u32)>> = requests
        .par_iter()
        .map(|(image_id, request)| {
            let outcome = call_with_retry(transport, request, policy)
                .with_context(|| format!("editing image `{image_id}`"))?;
            Ok((outcome.text, outcome.attempts))
        })
        .collect();

    requests
        .into_iter()
        .zip(responses)
        .map(|((image_id, request), response)| {
            let (text, attempts) = response?;
            Ok(EditArtifacts {
                image_id,
                request,
                response: Some(text),
                attempts,
            })
        })
        .collect()
}

/// Apply per-image edit sets; images without edits pass through unchanged
/// (still canonicalized and tagged).
pub fn stage_edit_apply(
    records: Vec<DatasetRecord>,
    edits: &HashMap<String, EditSource>,
) -> Result<(Vec<DatasetRecord>, Vec<serde_json::Value>)> {
    let mut out = Vec::with_capacity(records.len());
    let mut diagnostics = Vec::new();
    let mut matched: std::collections::HashSet<&str> = Default::default();
    for record in records {
        let mut record = canonical_record(record)?;
        let image_id = record.scene_graph.image_id.clone();
        let edit_set: EditSet = match edits.get_key_value(image_id.as_str()) {
            None => EditSet::default(),
            Some((key, source)) => {
                matched.insert(key.as_str());
                match source {
                    EditSource::Value(v) => match parse_edit_set(&v.to_string()) {
                        Ok(parsed) => {
                            record_parse_diags(&mut diagnostics, &image_id, &parsed.diagnostics);
                            parsed.edit_set
                        }
                        Err(e) => {
                            diagnostics.push(json!({"image_id": image_id, "error": e.to_string()}));
                            EditSet::default()
                        }
                    },
                    EditSource::Text(t) => match parse_edit_set(t) {
                        Ok(parsed) => {
                            record_parse_diags(&mut diagnostics, &image_id, &parsed.diagnostics);
                            parsed.edit_set
                        }
                        Err(e) => {
                            diagnostics.push(json!({"image_id": image_id, "error": e.to_string()}));
                            EditSet::default()
                        }
                    },
                }
            }
        };
        let outcome = apply_edits(record.scene_graph, &edit_set)
            .with_context(|| format!("applying edits to `{image_id}`"))?;
        for rejected in &outcome.rejected {
            diagnostics.push(json!({
                "image_id": image_id,
                "region_id": rejected.region_id,
                "rejected": rejected.detail,
            }));
        }
        record.scene_graph = outcome.graph;
        record.push_stage(StageTag::Edited);
        out.push(record);
    }
    for image_id in edits.keys() {
        if !matched.contains(image_id.as_str()) {
            diagnostics.push(json!({
                "image_id": image_id,
                "error": "edit names an image absent from the record stream",
            }));
        }
    }
    diagnostics.sort_by_key(|d| d["image_id"].as_str().map(String::from));
    Ok((out, diagnostics))
}

fn record_parse_diags(
    diagnostics: &mut Vec<serde_json::Value>,
    image_id: &str,
    diags: &[sgkit::text::Diagnostic],
) {
    for d in diags {
        diagnostics.push(json!({
            "image_id": image_id,
            "location": d.location,
            "message": d.message,
        }));
    }
}

pub fn stage_stats(records: &[DatasetRecord]) -> sgkit::pipeline::DatasetStats {
    let mut acc = StatsAccumulator::new();
    for r in records {
        acc.add(r);
    }
    acc.finish()
}

/// Persist teacher/editor artifacts under `dir`: the raw response as
/// `{image_id}.txt` plus `{image_id}.meta.json` with the request digest and
/// attempt count.
pub fn write_response_artifacts(
    dir: &Path,
    image_id: &str,
    request: &ChatRequest,
    response: Option<&str>,
    attempts: u32,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    if let Some(text) = response {
        std::fs::write(dir.join(format!("{image_id}.txt")), text)?;
    }
    let meta = json!({
        "image_id": image_id,
        "digest": request_digest(request),
        "attempts": attempts,
    });
    let mut rendered = serde_json::to_string_pretty(&meta)?;
    rendered.push('\n');
    std::fs::write(dir.join(format!("{image_id}.meta.json")), rendered)?;
    Ok(())
}
