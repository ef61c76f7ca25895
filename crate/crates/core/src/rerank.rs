//! Reordering of retrieved hits.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::domain::{cosine_similarity, EmbeddingVector};
use crate::error::{Error, Result};
use crate::index::{KeyField, ScoredHit};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum RerankMethod {
    None,
    #[default]
    CaptionSimilarity,
    KReciprocal {
        k1: usize,
        k2: usize,
        lambda: f64,
    },
}

impl RerankMethod {
    pub const K_RECIPROCAL_DEFAULT: Self = Self::KReciprocal { k1: 5, k2: 2, lambda: 0.3 };

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::CaptionSimilarity => "caption_similarity",
            Self::KReciprocal { .. } => "k_reciprocal",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Self::KReciprocal { k1, k2, lambda } = *self {
            if !(k1 >= k2 && k2 >= 1) {
                return Err(Error::Config(format!("k-reciprocal needs k1 >= k2 >= 1, got k1={k1} k2={k2}")));
            }
            if !(0.0..=1.0).contains(&lambda) {
                return Err(Error::Config(format!("k-reciprocal lambda {lambda} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Sorts by descending score, keeping input order among equal scores.
fn sort_stable_desc(scored: &mut [(usize, f64)]) {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// Reorders hits by similarity between `caption_embedding` (the embedded
/// description of the input image or crop) and each hit's caption.
pub fn caption_rerank(caption_embedding: &EmbeddingVector, hits: &[ScoredHit]) -> Result<Vec<ScoredHit>> {
    let mut scored = hits
        .iter()
        .enumerate()
        .map(|(i, h)| Ok((i, cosine_similarity(caption_embedding, &h.entry.caption_embedding)? + 0.0)))
        .collect::<Result<Vec<_>>>()?;
    sort_stable_desc(&mut scored);
    Ok(scored.into_iter().map(|(i, s)| ScoredHit { entry: hits[i].entry.clone(), score: s }).collect())
}

/// Indices of row `row` of `dist` in ascending distance, ties by index.
fn ranking(dist: &[Vec<f64>], row: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[row][a].total_cmp(&dist[row][b]).then(a.cmp(&b)));
    order
}

/// Members of `node`'s `k`-nearest list whose own `k`-nearest list contains `node`.
fn reciprocal(rank: &[Vec<usize>], node: usize, k: usize) -> Vec<usize> {
    let n = rank.len();
    rank[node][..(k + 1).min(n)].iter().copied().filter(|&m| rank[m][..(k + 1).min(n)].contains(&node)).collect()
}

/// Half of `k`, rounded to nearest with ties to even.
fn half_round_even(k: usize) -> usize {
    let lo = k / 2;
    if k % 2 == 1 && lo % 2 == 1 {
        lo + 1
    } else {
        lo
    }
}

/// Sparse membership weights of one node over the candidate set.
type Weights = Vec<(usize, f64)>;

fn encode(dist: &[Vec<f64>], rank: &[Vec<usize>], node: usize, k1: usize) -> Weights {
    let core = reciprocal(rank, node, k1);
    let core_set: BTreeSet<usize> = core.iter().copied().collect();
    let mut expansion = core_set.clone();
    let half = half_round_even(k1);
    for &c in &core {
        let theirs = reciprocal(rank, c, half);
        let shared = theirs.iter().filter(|m| core_set.contains(m)).collect::<BTreeSet<_>>().len();
        if shared as f64 > 2.0 / 3.0 * theirs.len() as f64 {
            expansion.extend(theirs);
        }
    }
    let raw: Weights = expansion.iter().map(|&m| (m, (-dist[node][m]).exp())).collect();
    let total: f64 = raw.iter().map(|(_, w)| w).sum();
    raw.into_iter().map(|(m, w)| (m, w / total)).collect()
}

fn densify(w: &Weights, n: usize) -> Vec<f64> {
    let mut row = vec![0.0; n];
    for &(m, v) in w {
        row[m] = v;
    }
    row
}

/// k-reciprocal re-ranking over the candidate set `{query} ∪ hits`, using
/// `key` to pick each hit's embedding. Distances are `1 - cosine`. The query
/// is node 0.
pub fn k_reciprocal_rerank(
    query: &EmbeddingVector,
    hits: &[ScoredHit],
    key: KeyField,
    k1: usize,
    k2: usize,
    lambda: f64,
) -> Result<Vec<ScoredHit>> {
    if hits.len() < 2 {
        return Err(Error::TooFewCandidates(hits.len()));
    }
    RerankMethod::KReciprocal { k1, k2, lambda }.validate()?;
    let nodes: Vec<&EmbeddingVector> =
        std::iter::once(query).chain(hits.iter().map(|h| key.select(&h.entry))).collect();
    let n = nodes.len();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let d = 1.0 - cosine_similarity(nodes[i], nodes[j])?;
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let rank: Vec<Vec<usize>> = (0..n).map(|i| ranking(&dist, i)).collect();
    let encoded: Vec<Vec<f64>> = (0..n).map(|i| densify(&encode(&dist, &rank, i, k1), n)).collect();
    let smoothed: Vec<Vec<f64>> = if k2 == 1 {
        encoded
    } else {
        (0..n)
            .map(|i| {
                let neighbours = &rank[i][..k2.min(n)];
                (0..n)
                    .map(|col| neighbours.iter().map(|&r| encoded[r][col]).sum::<f64>() / neighbours.len() as f64)
                    .collect()
            })
            .collect()
    };
    let q = &smoothed[0];
    let mut scored: Vec<(usize, f64)> = (1..n)
        .map(|j| {
            let overlap: f64 = q.iter().zip(&smoothed[j]).map(|(a, b)| a.min(*b)).sum();
            let jaccard = 1.0 - overlap / (2.0 - overlap);
            (j - 1, jaccard * (1.0 - lambda) + dist[0][j] * lambda)
        })
        .collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().map(|(i, d)| ScoredHit { entry: hits[i].entry.clone(), score: 1.0 - d }).collect())
}

pub fn truncate(hits: &[ScoredHit], n: usize) -> Vec<ScoredHit> {
    hits[..n.min(hits.len())].to_vec()
}

/// Applies `method` to one granularity's hits. `caption_embedding` is required
/// for caption-similarity reranking and `query` for k-reciprocal.
pub fn rerank(
    method: RerankMethod,
    hits: &[ScoredHit],
    query: &EmbeddingVector,
    key: KeyField,
    caption_embedding: Option<&EmbeddingVector>,
) -> Result<Vec<ScoredHit>> {
    match method {
        RerankMethod::None => Ok(hits.to_vec()),
        RerankMethod::CaptionSimilarity => match caption_embedding {
            Some(c) => caption_rerank(c, hits),
            None => Err(Error::Config("caption reranking needs a caption of the input".into())),
        },
        // A single hit has only one order.
        RerankMethod::KReciprocal { .. } if hits.len() < 2 => Ok(hits.to_vec()),
        RerankMethod::KReciprocal { k1, k2, lambda } => k_reciprocal_rerank(query, hits, key, k1, k2, lambda),
    }
}
