//! Quadruplet generation from rating data.
//!
//! Training records are quadruplets {A, P, N, m}: a triplet of item ids plus
//! a precomputed margin. For single-image rating data the margin comes from
//! MOS differences; for pairwise similarity data it comes from normalized
//! similarity-derived distances. Margins are computed once, before training.

use std::collections::{HashMap, HashSet};

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::embed_net::DenseVector;
use crate::error::{Error, Result};

/// An item with features and a single-image Mean Opinion Score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatedItem {
    pub id: String,
    pub features: DenseVector,
    pub mos: f64,
}

/// Items rated individually on a scale [1, n].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub items: Vec<RatedItem>,
    pub scale_n: u32,
}

/// A reference/evaluated pair with a crowd similarity score in [1, n].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatedPair {
    pub ref_id: String,
    pub eval_id: String,
    pub similarity: f64,
}

/// Pairwise-similarity dataset: items carry features (mos unused) and every
/// rating compares an evaluated image against a reference image.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRatingDataset {
    pub items: Vec<RatedItem>,
    pub pairs: Vec<RatedPair>,
    pub scale_n: u32,
}

/// One training record: triplet ids plus the margin used in its hinge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quadruplet {
    pub anchor_id: String,
    pub positive_id: String,
    pub negative_id: String,
    pub margin: f64,
}

/// Triplet difficulty relative to the current embedding distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HardnessClass {
    Hard,
    SemiHard,
    Easy,
}

/// Margin histogram over [0, 1] with uniform bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// bins + 1 uniform edges from 0 to 1.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Output of pairwise generation: quadruplets plus skip counters.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseGenReport {
    pub quadruplets: Vec<Quadruplet>,
    /// Evaluated pairs with identical similarity, where P/N is undefined.
    pub ties_skipped: u64,
    /// References with fewer than two rated pairs.
    pub refs_skipped: u64,
}

impl FeatureDataset {
    pub fn new(items: Vec<RatedItem>, scale_n: u32) -> Result<Self> {
        let ds = FeatureDataset { items, scale_n };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale_n < 2 {
            return Err(Error::InvalidInput(format!(
                "rating scale must be at least 2, got {}",
                self.scale_n
            )));
        }
        let mut seen = HashSet::new();
        let dim = self.items.first().map_or(0, |it| it.features.len());
        for item in &self.items {
            if !seen.insert(item.id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate id {:?}", item.id)));
            }
            if item.features.len() != dim {
                return Err(Error::InvalidInput(format!(
                    "item {:?} has {} features, expected {dim}",
                    item.id,
                    item.features.len()
                )));
            }
            if item.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "item {:?} has non-finite features",
                    item.id
                )));
            }
            if !item.mos.is_finite() || item.mos < 1.0 || item.mos > self.scale_n as f64 {
                return Err(Error::InvalidInput(format!(
                    "item {:?} mos {} outside [1, {}]",
                    item.id, item.mos, self.scale_n
                )));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.items.first().map_or(0, |it| it.features.len())
    }

    /// id -> position lookup.
    pub fn index(&self) -> HashMap<&str, usize> {
        self.items
            .iter()
            .enumerate()
            .map(|(i, it)| (it.id.as_str(), i))
            .collect()
    }
}

impl PairRatingDataset {
    pub fn new(items: Vec<RatedItem>, pairs: Vec<RatedPair>, scale_n: u32) -> Result<Self> {
        let ds = PairRatingDataset {
            items,
            pairs,
            scale_n,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale_n < 2 {
            return Err(Error::InvalidInput(format!(
                "rating scale must be at least 2, got {}",
                self.scale_n
            )));
        }
        let mut ids = HashSet::new();
        let dim = self.items.first().map_or(0, |it| it.features.len());
        for item in &self.items {
            if !ids.insert(item.id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate id {:?}", item.id)));
            }
            if item.features.len() != dim || item.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "item {:?} has invalid features",
                    item.id
                )));
            }
        }
        let mut seen_pairs = HashSet::new();
        for pair in &self.pairs {
            if !ids.contains(pair.ref_id.as_str()) {
                return Err(Error::InvalidInput(format!(
                    "pair references unknown ref_id {:?}",
                    pair.ref_id
                )));
            }
            if !ids.contains(pair.eval_id.as_str()) {
                return Err(Error::InvalidInput(format!(
                    "pair references unknown eval_id {:?}",
                    pair.eval_id
                )));
            }
            if !seen_pairs.insert((pair.ref_id.as_str(), pair.eval_id.as_str())) {
                return Err(Error::InvalidInput(format!(
                    "duplicate pair ({:?}, {:?})",
                    pair.ref_id, pair.eval_id
                )));
            }
            if !pair.similarity.is_finite()
                || pair.similarity < 1.0
                || pair.similarity > self.scale_n as f64
            {
                return Err(Error::InvalidInput(format!(
                    "pair ({:?}, {:?}) similarity {} outside [1, {}]",
                    pair.ref_id, pair.eval_id, pair.similarity, self.scale_n
                )));
            }
        }
        Ok(())
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.items
            .iter()
            .enumerate()
            .map(|(i, it)| (it.id.as_str(), i))
            .collect()
    }
}

impl Quadruplet {
    pub fn validate(&self) -> Result<()> {
        if self.anchor_id == self.positive_id
            || self.anchor_id == self.negative_id
            || self.positive_id == self.negative_id
        {
            return Err(Error::InvalidInput(format!(
                "quadruplet ids must be distinct: ({:?}, {:?}, {:?})",
                self.anchor_id, self.positive_id, self.negative_id
            )));
        }
        if !self.margin.is_finite() || !(0.0..=1.0).contains(&self.margin) {
            return Err(Error::InvalidInput(format!(
                "margin {} outside [0, 1]",
                self.margin
            )));
        }
        Ok(())
    }
}

/// Adaptive margin |d_gt(A,P) - d_gt(A,N)| / (n - 1), normalized to [0, 1].
pub fn adaptive_margin(d_gt_ap: f64, d_gt_an: f64, scale_n: u32) -> Result<f64> {
    if scale_n < 2 {
        return Err(Error::InvalidInput(format!(
            "rating scale must be at least 2, got {scale_n}"
        )));
    }
    let max_d = (scale_n - 1) as f64;
    for (name, d) in [("d_gt_ap", d_gt_ap), ("d_gt_an", d_gt_an)] {
        if !d.is_finite() || d < 0.0 || d > max_d {
            return Err(Error::InvalidInput(format!(
                "{name} = {d} outside [0, {max_d}]"
            )));
        }
    }
    Ok((d_gt_ap - d_gt_an).abs() / max_d)
}

/// Convert a similarity score s in [1, n] to a distance in [0, 1]:
/// (n - s) / (n - 1). Identical images (s = n) map to distance 0.
pub fn similarity_to_distance(s: f64, scale_n: u32) -> Result<f64> {
    if scale_n < 2 {
        return Err(Error::InvalidInput(format!(
            "rating scale must be at least 2, got {scale_n}"
        )));
    }
    let n = scale_n as f64;
    if !s.is_finite() || s < 1.0 || s > n {
        return Err(Error::InvalidInput(format!(
            "similarity {s} outside [1, {n}]"
        )));
    }
    Ok((n - s) / (n - 1.0))
}

/// Rescale a MOS value on [1, n] to [0, 1], the unit scale shared by the
/// triplet and regression loss terms.
pub fn normalize_mos(mos: f64, scale_n: u32) -> f64 {
    (mos - 1.0) / (scale_n - 1) as f64
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Per-anchor RNG stream, so generation can be sharded by anchor range
/// without changing output.
fn anchor_rng(seed: u64, anchor_index: u64) -> rand_chacha::ChaCha8Rng {
    rand_chacha::ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(anchor_index)))
}

/// Generate quadruplets from a single-image rating dataset.
///
/// Every item serves as an anchor. For each anchor, 2 * pairs_per_anchor
/// distinct non-anchor items are drawn without replacement and consumed in
/// consecutive pairs; within a pair the item whose MOS is closer to the
/// anchor's becomes P (ties: the first drawn). The margin is the adaptive
/// margin of the resulting ground-truth distances.
pub fn generate_quadruplets_single(
    ds: &FeatureDataset,
    pairs_per_anchor: usize,
    seed: u64,
) -> Result<Vec<Quadruplet>> {
    ds.validate()?;
    if ds.items.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "need at least 3 items, got {}",
            ds.items.len()
        )));
    }
    if pairs_per_anchor == 0 {
        return Err(Error::InvalidConfig("pairs_per_anchor must be at least 1".into()));
    }
    let draws = 2 * pairs_per_anchor;
    if draws > ds.items.len() - 1 {
        return Err(Error::InvalidConfig(format!(
            "pairs_per_anchor = {pairs_per_anchor} needs {draws} distinct partners but only {} items are available",
            ds.items.len() - 1
        )));
    }

    let mut quads = Vec::with_capacity(ds.items.len() * pairs_per_anchor);
    for (a_idx, anchor) in ds.items.iter().enumerate() {
        let mut rng = anchor_rng(seed, a_idx as u64);
        // Sample from 0..len-1 and shift past the anchor's own slot.
        let picks = rand::seq::index::sample(&mut rng, ds.items.len() - 1, draws);
        let partners: Vec<usize> = picks
            .iter()
            .map(|i| if i >= a_idx { i + 1 } else { i })
            .collect();
        for pair in partners.chunks_exact(2) {
            let (x, y) = (&ds.items[pair[0]], &ds.items[pair[1]]);
            let d_x = (anchor.mos - x.mos).abs();
            let d_y = (anchor.mos - y.mos).abs();
            let (pos, neg, d_ap, d_an) = if d_x <= d_y {
                (x, y, d_x, d_y)
            } else {
                (y, x, d_y, d_x)
            };
            quads.push(Quadruplet {
                anchor_id: anchor.id.clone(),
                positive_id: pos.id.clone(),
                negative_id: neg.id.clone(),
                margin: adaptive_margin(d_ap, d_an, ds.scale_n)?,
            });
        }
    }
    Ok(quads)
}

/// Generate quadruplets from a pairwise-similarity dataset.
///
/// Each reference serves as the anchor of every unordered pair of its
/// evaluated images; the member with higher similarity becomes P. Distances
/// are already normalized to [0, 1], so the margin is their absolute
/// difference with no further division. Enumeration is exhaustive and
/// ordered by id; `seed` is reserved for sampled variants and does not
/// affect the output.
pub fn generate_quadruplets_pairwise(
    ds: &PairRatingDataset,
    seed: u64,
) -> Result<PairwiseGenReport> {
    let _ = seed;
    ds.validate()?;

    let mut by_ref: HashMap<&str, Vec<&RatedPair>> = HashMap::new();
    for pair in &ds.pairs {
        by_ref.entry(pair.ref_id.as_str()).or_default().push(pair);
    }
    let mut refs: Vec<&str> = by_ref.keys().copied().collect();
    refs.sort_unstable();

    let mut quadruplets = Vec::new();
    let mut ties_skipped = 0;
    let mut refs_skipped = 0;
    for ref_id in refs {
        let mut rated = by_ref.remove(ref_id).unwrap();
        if rated.len() < 2 {
            refs_skipped += 1;
            continue;
        }
        rated.sort_unstable_by(|a, b| a.eval_id.cmp(&b.eval_id));
        for i in 0..rated.len() {
            for j in (i + 1)..rated.len() {
                let (x, y) = (rated[i], rated[j]);
                let (pos, neg) = if x.similarity > y.similarity {
                    (x, y)
                } else if y.similarity > x.similarity {
                    (y, x)
                } else {
                    ties_skipped += 1;
                    continue;
                };
                let d_ap = similarity_to_distance(pos.similarity, ds.scale_n)?;
                let d_an = similarity_to_distance(neg.similarity, ds.scale_n)?;
                // Distances are already in [0, 1]; the margin is their gap.
                quadruplets.push(Quadruplet {
                    anchor_id: ref_id.to_string(),
                    positive_id: pos.eval_id.clone(),
                    negative_id: neg.eval_id.clone(),
                    margin: (d_ap - d_an).abs(),
                });
            }
        }
    }
    Ok(PairwiseGenReport {
        quadruplets,
        ties_skipped,
        refs_skipped,
    })
}

/// Classify a triplet by how its embedding distances sit against the margin.
pub fn classify_hardness(d_ap: f64, d_an: f64, m: f64) -> HardnessClass {
    if d_an < d_ap {
        HardnessClass::Hard
    } else if d_an < d_ap + m {
        HardnessClass::SemiHard
    } else {
        HardnessClass::Easy
    }
}

/// Histogram of quadruplet margins over [0, 1] with `bins` uniform bins;
/// the final bin is right-closed.
pub fn margin_histogram(quads: &[Quadruplet], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::InvalidInput("need at least one bin".into()));
    }
    let edges: Vec<f64> = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let mut counts = vec![0u64; bins];
    for quad in quads {
        quad.validate()?;
        let idx = ((quad.margin * bins as f64) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    Ok(Histogram { edges, counts })
}
