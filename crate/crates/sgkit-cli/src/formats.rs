//! Sidecar file formats the CLI reads and writes: proposal sets, captions,
//! similarity scores, edit inputs, judge configs, and report files.

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};
use sgkit::geometry::Proposal;
use sgkit::pipeline::{ProposalSet, ProposalSource};
use sgkit::teacher::{RetryPolicy, TransportConfig};
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

/// One line of a proposal JSONL file: proposals from one generator for one
/// image.
#[derive(Debug, Serialize, Deserialize)]
pub struct ProposalLine {
    pub image_id: String,
    #[serde(default = "default_source")]
    pub source: ProposalSource,
    pub proposals: Vec<Proposal>,
}

fn default_source() -> ProposalSource {
    ProposalSource::Other
}

/// Proposal sets grouped by image, images ordered by first appearance
/// across the input files.
pub fn read_proposal_sets(paths: &[PathBuf]) -> Result<Vec<(String, Vec<ProposalSet>)>> {
    let mut order: Vec<String> = Vec::new();
    let mut by_image: HashMap<String, Vec<ProposalSet>> = HashMap::new();
    for path in paths {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ProposalLine = serde_json::from_str(&line)
                .with_context(|| format!("{}:{}", path.display(), i + 1))?;
            if !by_image.contains_key(&parsed.image_id) {
                order.push(parsed.image_id.clone());
            }
            by_image
                .entry(parsed.image_id)
                .or_default()
                .push(ProposalSet {
                    source: parsed.source,
                    proposals: parsed.proposals,
                });
        }
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let sets = by_image.remove(&id).unwrap_or_default();
            (id, sets)
        })
        .collect())
}

/// Flatten grouped proposal sets into one per-image proposal pool.
pub fn union_proposals(sets: &[(String, Vec<ProposalSet>)]) -> HashMap<String, Vec<Proposal>> {
    sets.iter()
        .map(|(id, sets)| {
            let pool: Vec<Proposal> = sets
                .iter()
                .flat_map(|s| s.proposals.iter().cloned())
                .collect();
            (id.clone(), pool)
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct CaptionLine {
    image_id: String,
    captions: Vec<String>,
}

/// Captions JSONL: `{"image_id": ..., "captions": [...]}` per line.
pub fn read_captions(path: &Path) -> Result<HashMap<String, Vec<String>>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CaptionLine =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        out.insert(parsed.image_id, parsed.captions);
    }
    Ok(out)
}

/// One externally computed similarity score for a relation.
#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreLine {
    pub image_id: String,
    pub subject_id: u32,
    pub object_id: u32,
    pub predicate: String,
    pub score: f64,
}

/// Key: (image_id, subject_id, object_id, case-folded predicate).
pub type ScoreKey = (String, u32, u32, String);

pub fn read_scores(path: &Path) -> Result<HashMap<ScoreKey, f64>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ScoreLine =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        out.insert(
            (
                parsed.image_id,
                parsed.subject_id,
                parsed.object_id,
                sgkit::graph::fold_predicate(&parsed.predicate),
            ),
            parsed.score,
        );
    }
    Ok(out)
}

/// One judge endpoint: a display name plus its transport.
#[derive(Debug, Serialize, Deserialize)]
pub struct JudgeEntry {
    pub name: String,
    pub transport: TransportConfig,
}

/// Judges config file: the set of VQA judges and a shared retry policy.
#[derive(Debug, Serialize, Deserialize)]
pub struct JudgesConfig {
    pub judges: Vec<JudgeEntry>,
    #[serde(default)]
    pub retry: Option<RetryPolicy>,
}

pub fn read_judges_config(path: &Path) -> Result<JudgesConfig> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("opening {}", path.display()))?;
    let cfg: JudgesConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if cfg.judges.is_empty() {
        return Err(anyhow!("judges config names no judges"));
    }
    Ok(cfg)
}

/// Raw edit input for one image: either unparsed model text or an already
/// structured object literal.
#[derive(Debug, Clone)]
pub enum EditSource {
    Text(String),
    Value(serde_json::Value),
}

#[derive(Debug, Deserialize)]
struct EditLine {
    image_id: String,
    edit: serde_json::Value,
}

/// Load edits from files or directories. A directory contributes one edit
/// per `{image_id}.txt` file; a file is JSONL of
/// `{"image_id": ..., "edit": <object or raw string>}`.
pub fn read_edits(paths: &[PathBuf]) -> Result<HashMap<String, EditSource>> {
    let mut out = HashMap::new();
    for path in paths {
        if path.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(path)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "txt"))
                .collect();
            entries.sort();
            for file in entries {
                let stem = file
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| anyhow!("bad edit file name {}", file.display()))?
                    .to_string();
                out.insert(stem, EditSource::Text(std::fs::read_to_string(&file)?));
            }
        } else {
            let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let parsed: EditLine = serde_json::from_str(&line)
                    .with_context(|| format!("{}:{}", path.display(), i + 1))?;
                let source = match parsed.edit {
                    serde_json::Value::String(s) => EditSource::Text(s),
                    other => EditSource::Value(other),
                };
                out.insert(parsed.image_id, source);
            }
        }
    }
    Ok(out)
}

/// Class list files: one class per line, blanks skipped.
pub fn read_class_list(path: &Path) -> Result<Vec<String>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("opening {}", path.display()))?;
    let classes: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if classes.is_empty() {
        return Err(anyhow!("class list {} is empty", path.display()));
    }
    let mut seen = std::collections::HashSet::new();
    for c in &classes {
        if !seen.insert(c) {
            return Err(anyhow!("class list {} repeats `{c}`", path.display()));
        }
    }
    Ok(classes)
}

/// Write a pretty-printed JSON report with a trailing newline.
pub fn write_report<T: Serialize>(path: &Path, report: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(&mut file, report)?;
    writeln!(file)?;
    Ok(())
}
