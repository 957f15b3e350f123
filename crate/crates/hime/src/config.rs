//! Pipeline configuration: one JSON document, every section optional.
//!
//! Precedence is flag > file > default. Relative artifact paths resolve
//! against `paths.out_dir`, which itself resolves against the working
//! directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use hime_core::corpus::SyntheticWorldConfig;
use hime_core::decoder::DecoderConfig;
use hime_core::editor::Sides;
use hime_core::his::HisConfig;
use hime_core::planted::{default_decoder_config, default_world, PlantedCircuit};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Random weights with the planted co-occurrence circuit written in.
    #[default]
    Planted,
    /// Plain seeded random weights.
    Random,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub planted: PlantedCircuit,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubspaceSection {
    /// Subtract the column mean of the difference matrix before the SVD.
    pub center: bool,
}

/// Where per-layer edit strengths come from.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum StrengthSource {
    /// `his_complement` of each layer.
    #[default]
    HisComplement,
    /// The same strength for every target layer.
    Uniform(f64),
    /// Explicit strength per 1-based layer; must cover every target layer.
    Manual(BTreeMap<usize, f64>),
}

impl fmt::Display for StrengthSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StrengthSource::HisComplement => f.write_str("his_complement"),
            StrengthSource::Uniform(v) => write!(f, "uniform:{v}"),
            StrengthSource::Manual(m) => write!(f, "manual({} layers)", m.len()),
        }
    }
}

impl FromStr for StrengthSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "his_complement" {
            return Ok(StrengthSource::HisComplement);
        }
        let v = s.strip_prefix("uniform:").ok_or_else(|| {
            format!("strength source {s:?} is not his_complement or uniform:<value>")
        })?;
        v.parse()
            .map(StrengthSource::Uniform)
            .map_err(|_| format!("uniform strength {v:?} is not a number"))
    }
}

// Untagged enums buffer map keys as strings, so layers travel as text here.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum StrengthRepr {
    Text(String),
    Manual { manual: BTreeMap<String, f64> },
}

impl Serialize for StrengthSource {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            StrengthSource::Manual(m) => StrengthRepr::Manual {
                manual: m.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            }
            .serialize(s),
            other => StrengthRepr::Text(other.to_string()).serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for StrengthSource {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match StrengthRepr::deserialize(d)? {
            StrengthRepr::Text(t) => t.parse().map_err(serde::de::Error::custom),
            StrengthRepr::Manual { manual } => manual
                .into_iter()
                .map(|(k, v)| {
                    k.parse().map(|l| (l, v)).map_err(|_| {
                        serde::de::Error::custom(format!(
                            "manual strength key {k:?} is not a layer"
                        ))
                    })
                })
                .collect::<Result<_, _>>()
                .map(StrengthSource::Manual),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditSection {
    /// 1-based layers to edit.
    pub target_layers: Vec<usize>,
    /// Subspace rank k.
    pub rank: usize,
    pub sides: Sides,
    pub strength_source: StrengthSource,
}

impl Default for EditSection {
    fn default() -> Self {
        Self {
            target_layers: (1..=default_decoder_config().num_layers).collect(),
            rank: 1,
            sides: Sides::Both,
            strength_source: StrengthSource::HisComplement,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Held-out scenes, drawn independently of the training corpus.
    pub num_scenes: usize,
    pub seed: u64,
    pub max_new_tokens: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            num_scenes: 200,
            seed: 99,
            max_new_tokens: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsSection {
    pub out_dir: PathBuf,
    pub corpus: PathBuf,
    pub corpus_manifest: PathBuf,
    pub model: PathBuf,
    pub traces: PathBuf,
    pub traces_manifest: PathBuf,
    pub profile: PathBuf,
    pub subspace: PathBuf,
    pub edited_weights: PathBuf,
    pub edit_report: PathBuf,
    pub report: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            out_dir: "out".into(),
            corpus: "corpus.json".into(),
            corpus_manifest: "corpus.manifest.json".into(),
            model: "model.hime".into(),
            traces: "traces.hime".into(),
            traces_manifest: "traces.manifest.json".into(),
            profile: "his_profile.json".into(),
            subspace: "subspace.hime".into(),
            edited_weights: "edited.hime".into(),
            edit_report: "edit_report.json".into(),
            report: "report.json".into(),
        }
    }
}

impl PathsSection {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.out_dir.join(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub decoder: DecoderConfig,
    pub model: ModelConfig,
    pub world: SyntheticWorldConfig,
    pub his: HisConfig,
    pub subspace: SubspaceSection,
    pub edit: EditSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            decoder: default_decoder_config(),
            model: ModelConfig::default(),
            world: default_world(128, 7),
            his: HisConfig::default(),
            subspace: SubspaceSection::default(),
            edit: EditSection::default(),
            eval: EvalSection::default(),
            paths: PathsSection::default(),
        }
    }
}

/// Command-line overrides, applied over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    /// Inclusive 1-based layer range.
    pub layers: Option<(usize, usize)>,
    pub rank: Option<usize>,
    pub uniform: Option<f64>,
    pub sides: Option<Sides>,
    /// Seed of the training world.
    pub seed: Option<u64>,
}

/// Parses `a..b` as an inclusive range.
pub fn parse_layer_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("layer range {s:?} is not a..b"))?;
    let a: usize = a.trim().parse().map_err(|_| format!("bad layer {a:?}"))?;
    let b: usize = b.trim().parse().map_err(|_| format!("bad layer {b:?}"))?;
    if a > b {
        return Err(format!("layer range {s:?} is empty"));
    }
    Ok((a, b))
}

pub fn parse_sides(s: &str) -> Result<Sides, String> {
    match s {
        "up" => Ok(Sides::Up),
        "down" => Ok(Sides::Down),
        "both" => Ok(Sides::Both),
        _ => Err(format!("sides {s:?} is not up, down or both")),
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::config(e.to_string()))
    }

    /// Reads `path`, or the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::from_json(&text)
                    .map_err(|e| CliError::config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some((a, b)) = o.layers {
            self.edit.target_layers = (a..=b).collect();
        }
        if let Some(k) = o.rank {
            self.edit.rank = k;
        }
        if let Some(s) = o.uniform {
            self.edit.strength_source = StrengthSource::Uniform(s);
        }
        if let Some(s) = o.sides {
            self.edit.sides = s;
        }
        if let Some(s) = o.seed {
            self.world.seed = s;
        }
    }

    /// Cross-section consistency checks.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::config(m));
        self.decoder
            .validate()
            .map_err(|e| CliError::config(format!("decoder: {e}")))?;
        self.world
            .validate()
            .map_err(|e| CliError::config(format!("world: {e}")))?;
        self.his
            .validate()
            .map_err(|e| CliError::config(format!("his: {e}")))?;

        let l = self.decoder.num_layers;
        let d = self.decoder.embed_dim;
        let e = &self.edit;
        if e.target_layers.is_empty() {
            return bad("edit.target_layers is empty".into());
        }
        let mut seen = BTreeSet::new();
        for &t in &e.target_layers {
            if t == 0 || t > l {
                return bad(format!("edit.target_layers: layer {t} outside [1, {l}]"));
            }
            if !seen.insert(t) {
                return bad(format!("edit.target_layers: layer {t} listed twice"));
            }
        }
        let max_k = self.world.num_pairs.min(d);
        if e.rank == 0 || e.rank > max_k {
            return bad(format!(
                "edit.rank {} outside [1, min(N, D) = {max_k}]",
                e.rank
            ));
        }
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        match &e.strength_source {
            StrengthSource::HisComplement => {}
            StrengthSource::Uniform(v) if !in_unit(*v) => {
                return bad(format!(
                    "edit.strength_source: uniform strength {v} outside [0, 1]"
                ));
            }
            StrengthSource::Uniform(_) => {}
            StrengthSource::Manual(m) => {
                for (layer, v) in m {
                    if !seen.contains(layer) {
                        return bad(format!(
                            "edit.strength_source: layer {layer} is not a target layer"
                        ));
                    }
                    if !in_unit(*v) {
                        return bad(format!(
                            "edit.strength_source: layer {layer} strength {v} outside [0, 1]"
                        ));
                    }
                }
                if let Some(t) = seen.iter().find(|t| !m.contains_key(t)) {
                    return bad(format!("edit.strength_source: no strength for layer {t}"));
                }
            }
        }

        let vocab = self.world.vocabulary();
        if vocab.required_size() > self.decoder.vocab_size {
            return bad(format!(
                "world needs {} token ids, decoder.vocab_size is {}",
                vocab.required_size(),
                self.decoder.vocab_size
            ));
        }
        // BOS, scene, SEP, caption (one longer when appending), EOS.
        let s = self.world.scene_size;
        if 2 * s + 4 > self.decoder.max_seq_len {
            return bad(format!(
                "scene_size {s} needs max_seq_len >= {}, decoder has {}",
                2 * s + 4,
                self.decoder.max_seq_len
            ));
        }
        if s + 2 + self.eval.max_new_tokens > self.decoder.max_seq_len {
            return bad(format!(
                "eval.max_new_tokens {} overflows max_seq_len {} after a {}-token prompt",
                self.eval.max_new_tokens,
                self.decoder.max_seq_len,
                s + 2
            ));
        }
        if self.eval.num_scenes == 0 {
            return bad("eval.num_scenes is 0".into());
        }
        if self.model.kind == ModelKind::Planted {
            let p = &self.model.planted;
            if p.planted_object >= self.world.num_objects
                || p.trigger_object >= self.world.num_objects
            {
                return bad("model.planted: object ids outside the world".into());
            }
        }
        Ok(())
    }
}
