//! Synthetic scene world and contrastive (truthful, hallucinated) caption pairs.
//!
//! Token layout for a world with `O` objects:
//!
//! ```text
//! 0        EOS
//! 1        BOS
//! 2        SEP
//! 3 + o    visual token of object o
//! 3 + O + o  caption token of object o
//! ```
//!
//! A sequence is `[BOS, visual.., SEP, caption.., EOS]` with the scene sorted
//! ascending.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::decoder::{TokenId, EOS_TOKEN};
use crate::error::{Error, Result};

pub type ObjectId = u32;

pub const BOS_TOKEN: TokenId = 1;
pub const SEP_TOKEN: TokenId = 2;
const FIRST_OBJECT_TOKEN: TokenId = 3;

/// Maps object ids to visual and caption tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub num_objects: u32,
}

impl Vocabulary {
    pub fn new(num_objects: u32) -> Self {
        Self { num_objects }
    }

    /// Smallest decoder vocabulary that holds every token of this world.
    pub fn required_size(&self) -> usize {
        FIRST_OBJECT_TOKEN as usize + 2 * self.num_objects as usize
    }

    pub fn visual_token(&self, o: ObjectId) -> TokenId {
        FIRST_OBJECT_TOKEN + o
    }

    pub fn caption_token(&self, o: ObjectId) -> TokenId {
        FIRST_OBJECT_TOKEN + self.num_objects + o
    }

    pub fn object_of_caption(&self, t: TokenId) -> Option<ObjectId> {
        let lo = FIRST_OBJECT_TOKEN + self.num_objects;
        (t >= lo && t < lo + self.num_objects).then(|| t - lo)
    }

    /// `[BOS, visual(scene).., SEP]`
    pub fn prompt(&self, scene: &[ObjectId]) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(scene.len() + 2);
        out.push(BOS_TOKEN);
        out.extend(scene.iter().map(|&o| self.visual_token(o)));
        out.push(SEP_TOKEN);
        out
    }

    /// Prompt for `scene` followed by `caption` and EOS.
    pub fn sequence(&self, scene: &[ObjectId], caption: &[ObjectId]) -> Vec<TokenId> {
        let mut out = self.prompt(scene);
        out.extend(caption.iter().map(|&o| self.caption_token(o)));
        out.push(EOS_TOKEN);
        out
    }

    /// Distinct objects named by caption tokens, ignoring everything else.
    pub fn mentioned_objects(&self, tokens: &[TokenId]) -> BTreeSet<ObjectId> {
        tokens
            .iter()
            .filter_map(|&t| self.object_of_caption(t))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorldConfig {
    pub num_objects: u32,
    /// Row-major `num_objects x num_objects`, symmetric, unit diagonal.
    pub cooccurrence: Vec<Vec<f64>>,
    pub num_pairs: usize,
    pub seed: u64,
    pub scene_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_names: Option<Vec<String>>,
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let o = self.num_objects as usize;
        let cfg = |msg: String| Err(Error::InvalidConfig(msg));
        if o == 0 {
            return cfg("num_objects must be >= 1".into());
        }
        if self.scene_size == 0 {
            return cfg("scene_size must be >= 1".into());
        }
        // A hallucinated object must be absent from the scene.
        if self.scene_size >= o {
            return cfg(format!(
                "scene_size {} must be smaller than num_objects {o}",
                self.scene_size
            ));
        }
        if self.num_pairs == 0 {
            return cfg("num_pairs must be >= 1".into());
        }
        if self.cooccurrence.len() != o || self.cooccurrence.iter().any(|r| r.len() != o) {
            return cfg(format!("cooccurrence must be {o}x{o}"));
        }
        for a in 0..o {
            if self.cooccurrence[a][a] != 1.0 {
                return cfg(format!("cooccurrence[{a}][{a}] must be 1"));
            }
            for b in 0..o {
                let v = self.cooccurrence[a][b];
                if !(0.0..=1.0).contains(&v) {
                    return cfg(format!("cooccurrence[{a}][{b}] = {v} outside [0, 1]"));
                }
                if v != self.cooccurrence[b][a] {
                    return cfg(format!("cooccurrence is not symmetric at ({a}, {b})"));
                }
            }
        }
        if let Some(names) = &self.object_names {
            if names.len() != o {
                return cfg(format!(
                    "object_names has {} entries, expected {o}",
                    names.len()
                ));
            }
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.num_objects)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub image_id: u64,
    pub truthful_tokens: Vec<TokenId>,
    pub hallucinated_tokens: Vec<TokenId>,
    pub truthful_objects: BTreeSet<ObjectId>,
    pub hallucinated_objects: BTreeSet<ObjectId>,
}

/// Draws `count` scenes of `scene_size` distinct objects, each sorted ascending.
///
/// Every scene is a partial Fisher-Yates shuffle of `0..num_objects` driven by
/// `next_u64 % remaining`.
pub fn sample_scenes(
    num_objects: u32,
    scene_size: usize,
    count: usize,
    seed: u64,
) -> Vec<Vec<ObjectId>> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let n = num_objects as usize;
    let k = scene_size.min(n);
    (0..count)
        .map(|_| {
            let mut pool: Vec<ObjectId> = (0..num_objects).collect();
            for i in 0..k {
                let j = i + (rng.next_u64() % (n - i) as u64) as usize;
                pool.swap(i, j);
            }
            let mut scene = pool[..k].to_vec();
            scene.sort_unstable();
            scene
        })
        .collect()
}

/// Hallucinated caption for `scene`, plus the planted object.
///
/// The planted object `h` is the absent object with the highest
/// co-occurrence to some scene object `a` (ties: lowest `a`, then lowest `h`).
/// It replaces, in place, the scene object other than `a` with the lowest
/// co-occurrence to `h` (ties: lowest id). A single-object scene gets `h`
/// appended instead.
pub fn hallucinate(
    scene: &[ObjectId],
    cooccurrence: &[Vec<f64>],
) -> Option<(Vec<ObjectId>, ObjectId)> {
    let n = cooccurrence.len() as ObjectId;
    let mut best: Option<(f64, ObjectId, ObjectId)> = None;
    for &a in scene {
        for h in (0..n).filter(|h| !scene.contains(h)) {
            let c = cooccurrence[a as usize][h as usize];
            if best.is_none_or(|(bc, _, _)| c > bc) {
                best = Some((c, a, h));
            }
        }
    }
    let (_, anchor, h) = best?;
    let replaced = scene
        .iter()
        .copied()
        .filter(|&r| r != anchor)
        .min_by(|&x, &y| {
            let cx = cooccurrence[x as usize][h as usize];
            let cy = cooccurrence[y as usize][h as usize];
            cx.total_cmp(&cy).then(x.cmp(&y))
        });
    let caption = match replaced {
        Some(r) => scene.iter().map(|&o| if o == r { h } else { o }).collect(),
        None => {
            let mut c = scene.to_vec();
            c.push(h);
            c
        }
    };
    Some((caption, h))
}

pub fn generate_pairs(cfg: &SyntheticWorldConfig) -> Result<Vec<ContrastivePair>> {
    cfg.validate()?;
    let vocab = cfg.vocabulary();
    let scenes = sample_scenes(cfg.num_objects, cfg.scene_size, cfg.num_pairs, cfg.seed);
    scenes
        .into_iter()
        .enumerate()
        .map(|(i, scene)| {
            let (caption, _) = hallucinate(&scene, &cfg.cooccurrence)
                .ok_or_else(|| Error::InvalidConfig("scene leaves no absent object".into()))?;
            Ok(ContrastivePair {
                image_id: i as u64,
                truthful_tokens: vocab.sequence(&scene, &scene),
                hallucinated_tokens: vocab.sequence(&scene, &caption),
                truthful_objects: scene.iter().copied().collect(),
                hallucinated_objects: caption.into_iter().collect(),
            })
        })
        .collect()
}
