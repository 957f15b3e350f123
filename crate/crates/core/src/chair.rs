//! Object-hallucination metrics over generated captions.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{ObjectId, Vocabulary};
use crate::decoder::DecoderWeights;
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: u64,
    pub mentioned_objects: BTreeSet<ObjectId>,
    pub ground_truth_objects: BTreeSet<ObjectId>,
}

impl CaptionRecord {
    pub fn hallucinated(&self) -> impl Iterator<Item = ObjectId> + '_ {
        self.mentioned_objects
            .difference(&self.ground_truth_objects)
            .copied()
    }

    pub fn has_hallucination(&self) -> bool {
        self.hallucinated().next().is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChairResult {
    pub chair_s: f64,
    /// Zero when no caption mentions any object.
    pub chair_i: f64,
    pub num_captions: usize,
    pub num_object_mentions: usize,
}

fn check(records: &[CaptionRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(invalid("no caption records"));
    }
    if let Some(r) = records.iter().find(|r| r.ground_truth_objects.is_empty()) {
        return Err(invalid(alloc::format!(
            "image {} has no ground-truth objects",
            r.image_id
        )));
    }
    Ok(())
}

pub fn evaluate_chair(records: &[CaptionRecord]) -> Result<ChairResult> {
    check(records)?;
    let with_hallucination = records.iter().filter(|r| r.has_hallucination()).count();
    let mentions: usize = records.iter().map(|r| r.mentioned_objects.len()).sum();
    let hallucinated: usize = records.iter().map(|r| r.hallucinated().count()).sum();
    Ok(ChairResult {
        chair_s: with_hallucination as f64 / records.len() as f64,
        chair_i: if mentions == 0 {
            0.0
        } else {
            hallucinated as f64 / mentions as f64
        },
        num_captions: records.len(),
        num_object_mentions: mentions,
    })
}

/// Instance-level rate restricted to one object: captions that mention
/// `object` while it is absent, over all distinct mentions.
pub fn object_hallucination_rate(records: &[CaptionRecord], object: ObjectId) -> Result<f64> {
    check(records)?;
    let mentions: usize = records.iter().map(|r| r.mentioned_objects.len()).sum();
    let hits = records
        .iter()
        .filter(|r| {
            r.mentioned_objects.contains(&object) && !r.ground_truth_objects.contains(&object)
        })
        .count();
    Ok(if mentions == 0 {
        0.0
    } else {
        hits as f64 / mentions as f64
    })
}

/// Fraction of ground-truth objects that the captions mention.
pub fn truthful_recall(records: &[CaptionRecord]) -> Result<f64> {
    check(records)?;
    let gt: usize = records.iter().map(|r| r.ground_truth_objects.len()).sum();
    let hit: usize = records
        .iter()
        .map(|r| {
            r.mentioned_objects
                .intersection(&r.ground_truth_objects)
                .count()
        })
        .sum();
    Ok(hit as f64 / gt as f64)
}

/// Greedy captions for `scenes`; `image_id` is the scene index.
pub fn caption_scenes(
    weights: &DecoderWeights,
    vocab: &Vocabulary,
    scenes: &[Vec<ObjectId>],
    max_new: usize,
) -> Result<Vec<CaptionRecord>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, scene)| {
            let prompt = vocab.prompt(scene);
            let out = weights.generate_greedy(&prompt, max_new)?;
            Ok(CaptionRecord {
                image_id: i as u64,
                mentioned_objects: vocab.mentioned_objects(&out[prompt.len()..]),
                ground_truth_objects: scene.iter().copied().collect(),
            })
        })
        .collect()
}
