//! `sgkit` — command-line pipeline over JSONL scene-graph record files.
//!
//! Exit codes: 0 success, 1 data error, 2 config error.

mod formats;
mod stages;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;
use sgkit::eval::{score_dataset, LabelSpace, TrigramProvider};
use sgkit::filters::PredicateRuleMap;
use sgkit::graph::{DatasetRecord, SceneGraph, StageTag};
use sgkit::pipeline::{merge_graphs, refine_proposals};
use sgkit::records::{read_records, write_records};
use sgkit::teacher::{request_digest, RetryPolicy, Transport, TransportConfig};
use sgkit::text::parse_scene_graph_text;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sgkit", version, about = "Scene-graph dataset pipeline")]
struct Cli {
    /// Worker-pool size for per-image processing (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Union proposal sets and keep the K largest survivors after NMS.
    RefineProposals {
        /// Proposal JSONL files (one generator configuration per file or
        /// interleaved lines).
        #[arg(long = "in", required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        /// IoU threshold for suppression.
        #[arg(long, default_value_t = sgkit::pipeline::DEFAULT_NMS_IOU)]
        iou: f64,
        /// Keep at most this many proposals per image.
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drop regions whose best proposal IoU does not exceed the threshold.
    ValidateRegions {
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long, default_value_t = sgkit::pipeline::DEFAULT_VALIDATION_IOU)]
        iou: f64,
        #[arg(long)]
        out: PathBuf,
        /// Structured sidecar with per-region match details.
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
    /// Rule-filter spatial relations; judge-filter the rest when judges are
    /// configured; optionally similarity-filter.
    Filter {
        #[arg(long)]
        graphs: PathBuf,
        /// Predicate-to-rule map (JSON); defaults to the shipped 22-entry map.
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Judges config (JSON) enabling VQA filtering.
        #[arg(long)]
        judges: Option<PathBuf>,
        /// Similarity scores JSONL; enables the similarity filter.
        #[arg(long = "sim-scores")]
        sim_scores: Option<PathBuf>,
        #[arg(long = "sim-threshold", default_value_t = sgkit::filters::DEFAULT_SIMILARITY_THRESHOLD)]
        sim_threshold: f64,
        #[arg(long)]
        out: PathBuf,
        /// Aggregate kept/removed report (JSON).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Apply per-image edit sets to the record stream.
    EditApply {
        #[arg(long)]
        graphs: PathBuf,
        /// Edit inputs: directories of `{image_id}.txt` responses or JSONL
        /// files of `{"image_id", "edit"}` lines.
        #[arg(long, required = true, num_args = 1..)]
        edits: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
    /// Merge two record files image by image, unifying duplicate regions.
    Merge {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = sgkit::pipeline::DEFAULT_MERGE_IOU)]
        iou: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corpus statistics: objects/image, triplets/image, predicates/region,
    /// per-category counts.
    Stats {
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth with R@K and mR@K.
    Eval {
        /// Predictions: a record JSONL file or a directory of raw
        /// `{image_id}.txt` model outputs.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = sgkit::eval::DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = sgkit::eval::DEFAULT_MATCH_IOU)]
        iou: f64,
        #[arg(long = "object-classes")]
        object_classes: PathBuf,
        #[arg(long = "predicate-classes")]
        predicate_classes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ask the teacher for dense relationships and merge them into the
    /// records. Without --transport this is a dry run that prints prompts.
    Annotate {
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        transport: Option<PathBuf>,
        /// Captions JSONL: `{"image_id", "captions": [...]}`.
        #[arg(long)]
        captions: Option<PathBuf>,
        /// Minimum subjects requested per image.
        #[arg(long, default_value_t = sgkit::teacher::DEFAULT_SUBJECT_COUNT)]
        subjects: u32,
        /// Output directory: responses, request digests, updated records.
        #[arg(long)]
        out: PathBuf,
    },
    /// Ask the editor model for edit sets. Without --transport this is a
    /// dry run that prints prompts.
    EditGenerate {
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        transport: Option<PathBuf>,
        #[arg(long)]
        captions: Option<PathBuf>,
        /// Output directory of `{image_id}.txt` responses for edit-apply.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ordered stage list from a pipeline config file.
    RunPipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-run diagnostics sidecar (JSON).
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
}

/// Errors carrying the exit-code contract: data errors exit 1, config
/// errors exit 2.
enum CliError {
    Data(anyhow::Error),
    Config(anyhow::Error),
}

impl CliError {
    fn report(&self) -> ExitCode {
        match self {
            CliError::Data(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
            CliError::Config(e) => {
                eprintln!("config error: {e:#}");
                ExitCode::from(2)
            }
        }
    }
}

trait ResultExt<T> {
    fn or_data(self) -> Result<T, CliError>;
    fn or_config(self) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> ResultExt<T> for Result<T, E> {
    fn or_data(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Data(e.into()))
    }

    fn or_config(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Config(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(),
    }
}

fn load_rules(path: &Option<PathBuf>) -> Result<PredicateRuleMap, CliError> {
    match path {
        Some(p) => {
            let file = std::fs::File::open(p)
                .with_context(|| format!("opening rule map {}", p.display()))
                .or_config()?;
            PredicateRuleMap::from_reader(file).or_config()
        }
        None => Ok(PredicateRuleMap::shipped_default()),
    }
}

fn load_transport(path: &Option<PathBuf>) -> Result<Option<Box<dyn Transport>>, CliError> {
    match path {
        None => Ok(None),
        Some(p) => {
            let config = TransportConfig::from_path(p).or_config()?;
            config.build().or_config()
        }
    }
}

fn load_captions(path: &Option<PathBuf>) -> Result<HashMap<String, Vec<String>>, CliError> {
    match path {
        Some(p) => formats::read_captions(p).or_data(),
        None => Ok(HashMap::new()),
    }
}

fn write_diagnostics(
    path: &Option<PathBuf>,
    stage: &str,
    entries: &[serde_json::Value],
) -> Result<(), CliError> {
    if let Some(p) = path {
        formats::write_report(p, &json!({ "stage": stage, "entries": entries })).or_data()?;
    }
    Ok(())
}

fn print_dry_run(image_id: &str, request: &sgkit::teacher::ChatRequest) {
    println!(
        "--- request {image_id} (digest {}) ---",
        request_digest(request)
    );
    println!("[system]");
    println!("{}", request.system_prompt);
    println!("[user]");
    println!("{}", request.user_prompt);
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::RefineProposals { input, iou, k, out } => {
            let sets = formats::read_proposal_sets(&input).or_data()?;
            if sets.is_empty() {
                eprintln!("warning: no proposals in input");
            }
            let mut file = std::fs::File::create(&out)
                .with_context(|| format!("creating {}", out.display()))
                .or_data()?;
            use std::io::Write;
            for (image_id, image_sets) in &sets {
                let survivors = refine_proposals(image_sets, iou, k);
                let line = serde_json::to_string(&json!({
                    "image_id": image_id,
                    "proposals": survivors,
                }))
                .or_data()?;
                writeln!(file, "{line}").or_data()?;
            }
            Ok(())
        }

        Command::ValidateRegions {
            graphs,
            proposals,
            iou,
            out,
            diagnostics,
        } => {
            let records = read_records(&graphs).or_data()?;
            let sets = formats::read_proposal_sets(&[proposals]).or_data()?;
            let pool = formats::union_proposals(&sets);
            let (records, diags) = stages::stage_validate_regions(records, &pool, iou);
            write_records(&out, &records).or_data()?;
            write_diagnostics(&diagnostics, "validate_regions", &diags)
        }

        Command::Filter {
            graphs,
            rules,
            judges,
            sim_scores,
            sim_threshold,
            out,
            report,
        } => {
            let records = read_records(&graphs).or_data()?;
            let rule_map = load_rules(&rules)?;
            let judges_cfg = match &judges {
                Some(p) => Some(formats::read_judges_config(p).or_config()?),
                None => None,
            };
            let scores = match &sim_scores {
                Some(p) => Some(formats::read_scores(p).or_data()?),
                None => None,
            };
            let params = stages::FilterParams {
                rules: &rule_map,
                judges: judges_cfg.as_ref(),
                scores: scores.as_ref(),
                sim_threshold,
            };
            let (records, run_report) = stages::stage_filter(records, &params).or_data()?;
            write_records(&out, &records).or_data()?;
            if let Some(p) = report {
                formats::write_report(&p, &run_report).or_data()?;
            }
            Ok(())
        }

        Command::EditApply {
            graphs,
            edits,
            out,
            diagnostics,
        } => {
            let records = read_records(&graphs).or_data()?;
            let edit_map = formats::read_edits(&edits).or_data()?;
            let (records, diags) = stages::stage_edit_apply(records, &edit_map).or_data()?;
            write_records(&out, &records).or_data()?;
            write_diagnostics(&diagnostics, "edit_apply", &diags)
        }

        Command::Merge { a, b, iou, out } => {
            let left = read_records(&a).or_data()?;
            let right = read_records(&b).or_data()?;
            let mut right_by_image: HashMap<String, DatasetRecord> = HashMap::new();
            let mut right_order: Vec<String> = Vec::new();
            for record in right {
                let id = record.scene_graph.image_id.clone();
                if right_by_image.insert(id.clone(), record).is_none() {
                    right_order.push(id);
                }
            }
            let mut out_records = Vec::new();
            for mut record in left {
                let id = record.scene_graph.image_id.clone();
                if let Some(other) = right_by_image.remove(&id) {
                    record.scene_graph =
                        merge_graphs(&record.scene_graph, &other.scene_graph, iou).or_data()?;
                    record.push_stage(StageTag::Merged);
                }
                out_records.push(record);
            }
            for id in right_order {
                if let Some(record) = right_by_image.remove(&id) {
                    out_records.push(record);
                }
            }
            write_records(&out, &out_records).or_data()
        }

        Command::Stats { graphs, out } => {
            let records = read_records(&graphs).or_data()?;
            let stats = stages::stage_stats(&records);
            formats::write_report(&out, &stats).or_data()
        }

        Command::Eval {
            pred,
            gt,
            k,
            iou,
            object_classes,
            predicate_classes,
            out,
        } => {
            let gt_records = read_records(&gt).or_data()?;
            let labels = LabelSpace::new(
                formats::read_class_list(&object_classes).or_config()?,
                formats::read_class_list(&predicate_classes).or_config()?,
            );
            let pairs = collect_eval_pairs(&pred, &gt_records).or_data()?;
            let provider = TrigramProvider;
            let score = score_dataset(&pairs, k, iou, &labels, &provider);
            formats::write_report(&out, &score).or_data()
        }

        Command::Annotate {
            graphs,
            transport,
            captions,
            subjects,
            out,
        } => {
            let records = read_records(&graphs).or_data()?;
            let transport = load_transport(&transport)?;
            let captions = load_captions(&captions)?;
            let policy = RetryPolicy::default();
            let (records, artifacts, diags) =
                stages::stage_annotate(records, transport.as_deref(), &captions, subjects, &policy)
                    .or_data()?;
            if transport.is_none() {
                for a in &artifacts {
                    print_dry_run(&a.image_id, &a.request);
                }
                return Ok(());
            }
            let responses_dir = out.join("responses");
            for a in &artifacts {
                stages::write_response_artifacts(
                    &responses_dir,
                    &a.image_id,
                    &a.request,
                    a.response.as_deref(),
                    a.attempts,
                )
                .or_data()?;
            }
            write_records(out.join("records.jsonl"), &records).or_data()?;
            write_diagnostics(
                &Some(out.join("annotate.diagnostics.json")),
                "annotate",
                &diags,
            )
        }

        Command::EditGenerate {
            graphs,
            transport,
            captions,
            out,
        } => {
            let records = read_records(&graphs).or_data()?;
            let transport = load_transport(&transport)?;
            let captions = load_captions(&captions)?;
            let policy = RetryPolicy::default();
            let artifacts =
                stages::stage_edit_generate(&records, transport.as_deref(), &captions, &policy)
                    .or_data()?;
            if transport.is_none() {
                for a in &artifacts {
                    print_dry_run(&a.image_id, &a.request);
                }
                return Ok(());
            }
            for a in &artifacts {
                stages::write_response_artifacts(
                    &out,
                    &a.image_id,
                    &a.request,
                    a.response.as_deref(),
                    a.attempts,
                )
                .or_data()?;
            }
            Ok(())
        }

        Command::RunPipeline {
            config,
            graphs,
            out,
            diagnostics,
        } => run_pipeline(&config, &graphs, &out, &diagnostics),
    }
}

/// Pair every ground-truth record with its prediction: a record file keyed
/// by image id, or a directory of raw `{image_id}.txt` model outputs parsed
/// through the text grammar. Missing or unparseable predictions become
/// empty graphs.
fn collect_eval_pairs(
    pred: &Path,
    gt_records: &[DatasetRecord],
) -> Result<Vec<(SceneGraph, SceneGraph)>> {
    let mut pairs = Vec::with_capacity(gt_records.len());
    if pred.is_dir() {
        for record in gt_records {
            let g = &record.scene_graph;
            let path = pred.join(format!("{}.txt", g.image_id));
            let graph = match std::fs::read_to_string(&path) {
                Ok(text) => {
                    match parse_scene_graph_text(&text, &g.image_id, g.image_width, g.image_height)
                    {
                        Ok(parsed) => parsed.graph,
                        Err(_) => SceneGraph::new(&g.image_id, g.image_width, g.image_height),
                    }
                }
                Err(_) => SceneGraph::new(&g.image_id, g.image_width, g.image_height),
            };
            pairs.push((graph, g.clone()));
        }
    } else {
        let pred_records = read_records(pred)?;
        let mut by_image: HashMap<String, SceneGraph> = pred_records
            .into_iter()
            .map(|r| (r.scene_graph.image_id.clone(), r.scene_graph))
            .collect();
        for record in gt_records {
            let g = &record.scene_graph;
            let graph = by_image
                .remove(&g.image_id)
                .unwrap_or_else(|| SceneGraph::new(&g.image_id, g.image_width, g.image_height));
            pairs.push((graph, g.clone()));
        }
    }
    Ok(pairs)
}

mod pipeline_config {
    use super::*;
    use serde::Deserialize;

    fn default_validation_iou() -> f64 {
        sgkit::pipeline::DEFAULT_VALIDATION_IOU
    }

    fn default_sim_threshold() -> f64 {
        sgkit::filters::DEFAULT_SIMILARITY_THRESHOLD
    }

    fn default_subjects() -> u32 {
        sgkit::teacher::DEFAULT_SUBJECT_COUNT
    }

    /// One declarative pipeline stage; order in the config is execution
    /// order.
    #[derive(Debug, Deserialize)]
    #[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
    pub enum StageConfig {
        ValidateRegions {
            proposals: PathBuf,
            #[serde(default = "default_validation_iou")]
            iou: f64,
        },
        Annotate {
            transport: PathBuf,
            #[serde(default)]
            captions: Option<PathBuf>,
            #[serde(default = "default_subjects")]
            subjects: u32,
            responses_dir: PathBuf,
        },
        Filter {
            #[serde(default)]
            rules: Option<PathBuf>,
            #[serde(default)]
            judges: Option<PathBuf>,
            #[serde(default)]
            sim_scores: Option<PathBuf>,
            #[serde(default = "default_sim_threshold")]
            sim_threshold: f64,
            #[serde(default)]
            report: Option<PathBuf>,
        },
        EditGenerate {
            transport: PathBuf,
            #[serde(default)]
            captions: Option<PathBuf>,
            responses_dir: PathBuf,
        },
        EditApply {
            edits: PathBuf,
        },
        Stats {
            report: PathBuf,
        },
    }

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct PipelineConfig {
        pub stages: Vec<StageConfig>,
    }
}

fn run_pipeline(
    config_path: &Path,
    graphs: &Path,
    out: &Path,
    diagnostics_path: &Option<PathBuf>,
) -> Result<(), CliError> {
    use pipeline_config::StageConfig;

    let config_text = std::fs::read_to_string(config_path)
        .with_context(|| format!("opening {}", config_path.display()))
        .or_config()?;
    let config: pipeline_config::PipelineConfig = serde_json::from_str(&config_text)
        .with_context(|| format!("parsing {}", config_path.display()))
        .or_config()?;

    let mut records = read_records(graphs).or_data()?;
    let mut stage_diags: Vec<serde_json::Value> = Vec::new();
    for stage in &config.stages {
        match stage {
            StageConfig::ValidateRegions { proposals, iou } => {
                let sets =
                    formats::read_proposal_sets(std::slice::from_ref(proposals)).or_data()?;
                let pool = formats::union_proposals(&sets);
                let (next, diags) = stages::stage_validate_regions(records, &pool, *iou);
                records = next;
                stage_diags.push(json!({"op": "validate_regions", "entries": diags}));
            }
            StageConfig::Annotate {
                transport,
                captions,
                subjects,
                responses_dir,
            } => {
                let transport = load_transport(&Some(transport.clone()))?
                    .ok_or_else(|| anyhow!("pipeline annotate stage needs a live transport"))
                    .or_config()?;
                let captions = load_captions(captions)?;
                let policy = RetryPolicy::default();
                let (next, artifacts, diags) = stages::stage_annotate(
                    records,
                    Some(transport.as_ref()),
                    &captions,
                    *subjects,
                    &policy,
                )
                .or_data()?;
                for a in &artifacts {
                    stages::write_response_artifacts(
                        responses_dir,
                        &a.image_id,
                        &a.request,
                        a.response.as_deref(),
                        a.attempts,
                    )
                    .or_data()?;
                }
                records = next;
                stage_diags.push(json!({"op": "annotate", "entries": diags}));
            }
            StageConfig::Filter {
                rules,
                judges,
                sim_scores,
                sim_threshold,
                report,
            } => {
                let rule_map = load_rules(rules)?;
                let judges_cfg = match judges {
                    Some(p) => Some(formats::read_judges_config(p).or_config()?),
                    None => None,
                };
                let scores = match sim_scores {
                    Some(p) => Some(formats::read_scores(p).or_data()?),
                    None => None,
                };
                let params = stages::FilterParams {
                    rules: &rule_map,
                    judges: judges_cfg.as_ref(),
                    scores: scores.as_ref(),
                    sim_threshold: *sim_threshold,
                };
                let (next, run_report) = stages::stage_filter(records, &params).or_data()?;
                if let Some(p) = report {
                    formats::write_report(p, &run_report).or_data()?;
                }
                records = next;
                stage_diags.push(json!({
                    "op": "filter",
                    "entries": [{
                        "relations_in": run_report.relations_in,
                        "relations_kept": run_report.relations_kept,
                        "relations_removed": run_report.relations_removed,
                    }],
                }));
            }
            StageConfig::EditGenerate {
                transport,
                captions,
                responses_dir,
            } => {
                let transport = load_transport(&Some(transport.clone()))?
                    .ok_or_else(|| anyhow!("pipeline edit_generate stage needs a live transport"))
                    .or_config()?;
                let captions = load_captions(captions)?;
                let policy = RetryPolicy::default();
                let artifacts = stages::stage_edit_generate(
                    &records,
                    Some(transport.as_ref()),
                    &captions,
                    &policy,
                )
                .or_data()?;
                for a in &artifacts {
                    stages::write_response_artifacts(
                        responses_dir,
                        &a.image_id,
                        &a.request,
                        a.response.as_deref(),
                        a.attempts,
                    )
                    .or_data()?;
                }
                stage_diags.push(json!({"op": "edit_generate", "entries": []}));
            }
            StageConfig::EditApply { edits } => {
                let edit_map = formats::read_edits(std::slice::from_ref(edits)).or_data()?;
                let (next, diags) = stages::stage_edit_apply(records, &edit_map).or_data()?;
                records = next;
                stage_diags.push(json!({"op": "edit_apply", "entries": diags}));
            }
            StageConfig::Stats { report } => {
                let stats = stages::stage_stats(&records);
                formats::write_report(report, &stats).or_data()?;
                stage_diags.push(json!({"op": "stats", "entries": []}));
            }
        }
    }
    write_records(out, &records).or_data()?;
    if let Some(p) = diagnostics_path {
        formats::write_report(p, &json!({ "stages": stage_diags })).or_data()?;
    }
    Ok(())
}
