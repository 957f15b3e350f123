//! Pipeline stages. Each reads its inputs from `paths`, writes its
//! outputs atomically and depends on nothing else, so a stage re-run on the
//! same inputs produces the same bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hime_core::chair::{
    caption_scenes, evaluate_chair, object_hallucination_rate, truthful_recall, CaptionRecord,
    ChairResult,
};
use hime_core::corpus::{generate_pairs, sample_scenes, ContrastivePair, ObjectId};
use hime_core::decoder::{init_decoder, DecoderWeights};
use hime_core::editor::{apply_edit, EditPlan, EditReport, LayerEdit};
use hime_core::his::{his_profile, LayerScore};
use hime_core::subspace::{extract_subspace, layer_difference_matrix, HalluSubspace};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{ModelKind, PipelineConfig, StrengthSource};
use crate::container::{read_container, write_container};
use crate::error::{in_module, in_module_at, CliError};
use crate::io::{read_json, write_json};
use crate::traces::{ingest_external_trace, manifest, traces_to_entries, TracePair};
use crate::weights::{load_weights, save_weights, subspaces_from_entries, subspaces_to_entries};

/// Sidecar describing a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub num_pairs: usize,
    pub seed: u64,
    pub num_objects: u32,
    pub scene_size: usize,
    pub object_names: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionFlags {
    pub image_id: u64,
    pub mentioned: BTreeSet<ObjectId>,
    pub ground_truth: BTreeSet<ObjectId>,
    pub hallucinated: Vec<ObjectId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub chair: ChairResult,
    /// Instance-level rate restricted to the planted object.
    pub planted_rate: f64,
    pub truthful_recall: f64,
    pub captions: Vec<CaptionFlags>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub planted_object: ObjectId,
    pub original: EvalSummary,
    pub edited: EvalSummary,
}

fn path(cfg: &PipelineConfig, p: &Path) -> PathBuf {
    cfg.paths.resolve(p)
}

pub fn cmd_gen_data(cfg: &PipelineConfig) -> Result<Vec<ContrastivePair>, CliError> {
    let pairs = in_module("contrastive-corpus", generate_pairs(&cfg.world))?;
    let w = &cfg.world;
    write_json(&path(cfg, &cfg.paths.corpus), &pairs)?;
    write_json(
        &path(cfg, &cfg.paths.corpus_manifest),
        &CorpusManifest {
            num_pairs: pairs.len(),
            seed: w.seed,
            num_objects: w.num_objects,
            scene_size: w.scene_size,
            object_names: w.object_names.clone(),
        },
    )?;
    info!("gen-data: {} pairs", pairs.len());
    Ok(pairs)
}

/// The unedited model described by the config.
pub fn build_model(cfg: &PipelineConfig) -> Result<DecoderWeights, CliError> {
    match cfg.model.kind {
        ModelKind::Random => in_module("toy-decoder", init_decoder(&cfg.decoder)),
        ModelKind::Planted => in_module(
            "toy-decoder",
            cfg.model
                .planted
                .build(&cfg.decoder, &cfg.world.vocabulary()),
        ),
    }
}

pub fn cmd_capture(cfg: &PipelineConfig) -> Result<(), CliError> {
    let pairs: Vec<ContrastivePair> = read_json(&path(cfg, &cfg.paths.corpus))?;
    let model = build_model(cfg)?;
    save_weights(&path(cfg, &cfg.paths.model), &model)?;
    let mut traces: Vec<TracePair> = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let at = || format!("pair {}", p.image_id);
        let (_, pos) = in_module_at("toy-decoder", at, model.forward_capture(&p.truthful_tokens))?;
        let (_, neg) = in_module_at(
            "toy-decoder",
            at,
            model.forward_capture(&p.hallucinated_tokens),
        )?;
        traces.push((p.image_id, pos, neg));
    }
    write_container(&path(cfg, &cfg.paths.traces), &traces_to_entries(&traces))?;
    write_json(&path(cfg, &cfg.paths.traces_manifest), &manifest(&traces))?;
    info!("capture: {} pairs", traces.len());
    Ok(())
}

fn load_traces(cfg: &PipelineConfig) -> Result<Vec<TracePair>, CliError> {
    let p = path(cfg, &cfg.paths.traces);
    let ingested =
        ingest_external_trace(&read_container(&p)?).map_err(|e| CliError::format(&p, e))?;
    if ingested.renormalized_rows > 0 {
        warn!(
            "{}: renormalised {} attention rows",
            p.display(),
            ingested.renormalized_rows
        );
    }
    Ok(ingested.pairs)
}

pub fn cmd_his(cfg: &PipelineConfig) -> Result<Vec<LayerScore>, CliError> {
    let pairs: Vec<_> = load_traces(cfg)?
        .into_iter()
        .map(|(_, a, b)| (a, b))
        .collect();
    let profile = in_module("his-score", his_profile(&pairs, &cfg.his))?;
    write_json(&path(cfg, &cfg.paths.profile), &profile)?;
    for s in &profile {
        info!(
            "his: layer {} raw {:.6} complement {:.6}",
            s.layer, s.his_raw, s.his_complement
        );
    }
    Ok(profile)
}

/// Subspaces for the target layers only.
pub fn cmd_subspace(cfg: &PipelineConfig) -> Result<Vec<HalluSubspace>, CliError> {
    let pairs = load_traces(cfg)?;
    let mut layers = cfg.edit.target_layers.clone();
    layers.sort_unstable();
    let mut out = Vec::with_capacity(layers.len());
    for layer in layers {
        let at = || format!("layer {layer}");
        let z = in_module_at(
            "hallu-subspace",
            at,
            layer_difference_matrix(&pairs, layer - 1, cfg.subspace.center),
        )?;
        out.push(in_module_at(
            "hallu-subspace",
            at,
            extract_subspace(layer, &z, cfg.edit.rank),
        )?);
    }
    write_container(&path(cfg, &cfg.paths.subspace), &subspaces_to_entries(&out))?;
    Ok(out)
}

/// Per-layer strengths from the configured source.
pub fn strengths(
    cfg: &PipelineConfig,
    profile: Option<&[LayerScore]>,
) -> Result<BTreeMap<usize, f64>, CliError> {
    let mut out = BTreeMap::new();
    for &layer in &cfg.edit.target_layers {
        let s = match &cfg.edit.strength_source {
            StrengthSource::Uniform(v) => *v,
            StrengthSource::Manual(m) => *m
                .get(&layer)
                .ok_or_else(|| CliError::config(format!("no manual strength for layer {layer}")))?,
            StrengthSource::HisComplement => {
                profile
                    .and_then(|p| p.iter().find(|s| s.layer == layer))
                    .ok_or_else(|| CliError::config(format!("HIS profile has no layer {layer}")))?
                    .his_complement
            }
        };
        out.insert(layer, s);
    }
    Ok(out)
}

pub fn cmd_edit(cfg: &PipelineConfig) -> Result<EditReport, CliError> {
    let model = load_weights(&path(cfg, &cfg.paths.model))?;
    let profile: Option<Vec<LayerScore>> = match cfg.edit.strength_source {
        StrengthSource::HisComplement => Some(read_json(&path(cfg, &cfg.paths.profile))?),
        _ => None,
    };
    let sub_path = path(cfg, &cfg.paths.subspace);
    let subspaces = subspaces_from_entries(read_container(&sub_path)?)
        .map_err(|e| CliError::format(&sub_path, e))?;
    let strengths = strengths(cfg, profile.as_deref())?;
    let mut layers = BTreeMap::new();
    for (layer, strength) in strengths {
        let subspace = subspaces
            .iter()
            .find(|s| s.layer == layer)
            .cloned()
            .ok_or_else(|| {
                CliError::config(format!(
                    "{}: no subspace for layer {layer}",
                    sub_path.display()
                ))
            })?;
        layers.insert(layer, LayerEdit { subspace, strength });
    }
    let plan = EditPlan {
        layers,
        sides: cfg.edit.sides,
    };
    let (edited, report) = in_module("weight-editor", apply_edit(&model, &plan))?;
    save_weights(&path(cfg, &cfg.paths.edited_weights), &edited)?;
    write_json(&path(cfg, &cfg.paths.edit_report), &report)?;
    for l in &report.layers {
        info!(
            "edit: layer {} strength {:.6} change up {:.6} down {:.6}",
            l.layer, l.strength, l.relative_change_up, l.relative_change_down
        );
    }
    Ok(report)
}

fn summarize(records: &[CaptionRecord], planted: ObjectId) -> Result<EvalSummary, CliError> {
    Ok(EvalSummary {
        chair: in_module("chair-eval", evaluate_chair(records))?,
        planted_rate: in_module("chair-eval", object_hallucination_rate(records, planted))?,
        truthful_recall: in_module("chair-eval", truthful_recall(records))?,
        captions: records
            .iter()
            .map(|r| CaptionFlags {
                image_id: r.image_id,
                mentioned: r.mentioned_objects.clone(),
                ground_truth: r.ground_truth_objects.clone(),
                hallucinated: r.hallucinated().collect(),
            })
            .collect(),
    })
}

/// Greedy captions on held-out scenes, original against edited weights.
pub fn cmd_eval(cfg: &PipelineConfig) -> Result<EvalReport, CliError> {
    let original = load_weights(&path(cfg, &cfg.paths.model))?;
    let edited = load_weights(&path(cfg, &cfg.paths.edited_weights))?;
    let vocab = cfg.world.vocabulary();
    let scenes = sample_scenes(
        cfg.world.num_objects,
        cfg.world.scene_size,
        cfg.eval.num_scenes,
        cfg.eval.seed,
    );
    let planted = cfg.model.planted.planted_object;
    let run = |w: &DecoderWeights| {
        let records = in_module(
            "chair-eval",
            caption_scenes(w, &vocab, &scenes, cfg.eval.max_new_tokens),
        )?;
        summarize(&records, planted)
    };
    let report = EvalReport {
        planted_object: planted,
        original: run(&original)?,
        edited: run(&edited)?,
    };
    write_json(&path(cfg, &cfg.paths.report), &report)?;
    Ok(report)
}

/// Plain-text comparison of the two evaluations.
pub fn render_table(r: &EvalReport) -> String {
    let mut s = String::new();
    type Metric = fn(&EvalSummary) -> f64;
    let rows: [(&str, Metric); 4] = [
        ("chair_s", |e| e.chair.chair_s),
        ("chair_i", |e| e.chair.chair_i),
        ("planted_rate", |e| e.planted_rate),
        ("truthful_recall", |e| e.truthful_recall),
    ];
    let _ = writeln!(s, "{:<16} {:>10} {:>10}", "metric", "original", "edited");
    for (name, f) in rows {
        let _ = writeln!(
            s,
            "{:<16} {:>10.4} {:>10.4}",
            name,
            f(&r.original),
            f(&r.edited)
        );
    }
    let _ = writeln!(
        s,
        "{:<16} {:>10} {:>10}",
        "mentions", r.original.chair.num_object_mentions, r.edited.chair.num_object_mentions
    );
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    GenData,
    Capture,
    His,
    Subspace,
    Edit,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::GenData,
        Stage::Capture,
        Stage::His,
        Stage::Subspace,
        Stage::Edit,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Capture => "capture",
            Stage::His => "his",
            Stage::Subspace => "subspace",
            Stage::Edit => "edit",
            Stage::Eval => "eval",
        }
    }

    fn outputs(self, cfg: &PipelineConfig) -> Vec<PathBuf> {
        let p = &cfg.paths;
        let files: Vec<&Path> = match self {
            Stage::GenData => vec![&p.corpus, &p.corpus_manifest],
            Stage::Capture => vec![&p.model, &p.traces, &p.traces_manifest],
            Stage::His => vec![&p.profile],
            Stage::Subspace => vec![&p.subspace],
            Stage::Edit => vec![&p.edited_weights, &p.edit_report],
            Stage::Eval => vec![&p.report],
        };
        files.into_iter().map(|f| p.resolve(f)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutcome {
    pub ran: Vec<Stage>,
    pub skipped: Vec<Stage>,
    pub report: EvalReport,
}

/// Runs every stage in order. A stage whose outputs all exist is skipped
/// unless `force`; the final report is read back in that case.
pub fn cmd_pipeline(cfg: &PipelineConfig, force: bool) -> Result<PipelineOutcome, CliError> {
    let mut ran = Vec::new();
    let mut skipped = Vec::new();
    let mut report = None;
    for stage in Stage::ALL {
        if !force && stage.outputs(cfg).iter().all(|p| p.exists()) {
            info!("{}: outputs exist, skipping", stage.name());
            skipped.push(stage);
            continue;
        }
        match stage {
            Stage::GenData => drop(cmd_gen_data(cfg)?),
            Stage::Capture => cmd_capture(cfg)?,
            Stage::His => drop(cmd_his(cfg)?),
            Stage::Subspace => drop(cmd_subspace(cfg)?),
            Stage::Edit => drop(cmd_edit(cfg)?),
            Stage::Eval => report = Some(cmd_eval(cfg)?),
        }
        ran.push(stage);
    }
    let report = match report {
        Some(r) => r,
        None => read_json(&path(cfg, &cfg.paths.report))?,
    };
    Ok(PipelineOutcome {
        ran,
        skipped,
        report,
    })
}
