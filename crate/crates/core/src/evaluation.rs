//! Ranking evaluation: Spearman rank correlation and three procedures for
//! scoring an embedding against ground-truth ratings.
//!
//! Ties are handled with average (fractional) ranks and the
//! Pearson-of-ranks formulation; the classic 1 - 6*sum(d^2)/(k(k^2-1))
//! identity holds only on tie-free data and is used as a test oracle.

use serde::{Deserialize, Serialize};

use crate::embed_net::{embedding_distance, EmbeddingNet};
use crate::error::{Error, Result};
use crate::sampling::{similarity_to_distance, FeatureDataset, PairRatingDataset, RatedPair};
use crate::training::RegressionHead;

/// Which ranking procedure produced a result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RankMethod {
    PairwiseDistance,
    ReferenceImage,
    RegressionBranch,
}

/// Ranking accuracy, oriented so that better-than-random models score
/// positive regardless of method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    pub method: RankMethod,
    pub srocc: f64,
    pub n: usize,
}

/// Average (fractional) ranks, 1-based; tied values share their mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the mean of ranks i+1..=j+1.
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank order correlation with average ranks for ties.
/// Returns 0 when either input is constant (zero rank variance).
pub fn srocc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 observations, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("inputs must be finite".into()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = rx.len() as f64;
    let mean_x = rx.iter().sum::<f64>() / n;
    let mean_y = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mean_x) * (b - mean_y);
        var_x += (a - mean_x) * (a - mean_x);
        var_y += (b - mean_y) * (b - mean_y);
    }
    if var_x == 0.0 || var_y == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (var_x * var_y).sqrt())
}

/// Rank test pairs by embedding distance and correlate against the
/// ground-truth distances derived from their similarity scores.
pub fn eval_pairwise(
    net: &EmbeddingNet,
    ds: &PairRatingDataset,
    test_pairs: &[RatedPair],
) -> Result<RankResult> {
    let index = ds.index();
    let mut predicted = Vec::with_capacity(test_pairs.len());
    let mut ground_truth = Vec::with_capacity(test_pairs.len());
    for pair in test_pairs {
        let r = *index.get(pair.ref_id.as_str()).ok_or_else(|| {
            Error::InvalidInput(format!("unknown ref_id {:?}", pair.ref_id))
        })?;
        let e = *index.get(pair.eval_id.as_str()).ok_or_else(|| {
            Error::InvalidInput(format!("unknown eval_id {:?}", pair.eval_id))
        })?;
        let e_r = net.embed(&ds.items[r].features)?;
        let e_e = net.embed(&ds.items[e].features)?;
        predicted.push(embedding_distance(&e_r, &e_e)?);
        ground_truth.push(similarity_to_distance(pair.similarity, ds.scale_n)?);
    }
    // Predicted distance should grow with ground-truth distance.
    Ok(RankResult {
        method: RankMethod::PairwiseDistance,
        srocc: srocc(&predicted, &ground_truth)?,
        n: test_pairs.len(),
    })
}

/// Rank test items by distance to the best-rated test item. The sign is
/// flipped so that "closer to the best means higher MOS" scores positive.
pub fn eval_reference(
    net: &EmbeddingNet,
    ds: &FeatureDataset,
    test_ids: &[String],
) -> Result<RankResult> {
    if test_ids.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "reference evaluation needs at least 2 test items, got {}",
            test_ids.len()
        )));
    }
    let index = ds.index();
    let mut resolved = Vec::with_capacity(test_ids.len());
    for id in test_ids {
        let i = *index
            .get(id.as_str())
            .ok_or_else(|| Error::InvalidInput(format!("unknown test id {id:?}")))?;
        resolved.push(i);
    }
    // Reference: highest MOS, ties broken by lexicographically smallest id.
    let &ref_idx = resolved
        .iter()
        .min_by(|&&a, &&b| {
            let (ia, ib) = (&ds.items[a], &ds.items[b]);
            ib.mos
                .partial_cmp(&ia.mos)
                .unwrap()
                .then_with(|| ia.id.cmp(&ib.id))
        })
        .unwrap();
    let e_ref = net.embed(&ds.items[ref_idx].features)?;
    let mut distances = Vec::with_capacity(resolved.len() - 1);
    let mut mos_values = Vec::with_capacity(resolved.len() - 1);
    for &i in &resolved {
        if i == ref_idx {
            continue;
        }
        let e = net.embed(&ds.items[i].features)?;
        distances.push(embedding_distance(&e_ref, &e)?);
        mos_values.push(ds.items[i].mos);
    }
    Ok(RankResult {
        method: RankMethod::ReferenceImage,
        srocc: -srocc(&distances, &mos_values)?,
        n: distances.len(),
    })
}

/// Rank test items by the regression head's predicted rating.
pub fn eval_regression(
    net: &EmbeddingNet,
    head: &RegressionHead,
    ds: &FeatureDataset,
    test_ids: &[String],
) -> Result<RankResult> {
    if test_ids.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "regression evaluation needs at least 2 test items, got {}",
            test_ids.len()
        )));
    }
    head.validate()?;
    let index = ds.index();
    let mut predictions = Vec::with_capacity(test_ids.len());
    let mut mos_values = Vec::with_capacity(test_ids.len());
    for id in test_ids {
        let i = *index
            .get(id.as_str())
            .ok_or_else(|| Error::InvalidInput(format!("unknown test id {id:?}")))?;
        let e = net.embed(&ds.items[i].features)?;
        predictions.push(head.predict(&e));
        mos_values.push(ds.items[i].mos);
    }
    Ok(RankResult {
        method: RankMethod::RegressionBranch,
        srocc: srocc(&predictions, &mos_values)?,
        n: test_ids.len(),
    })
}
