//! Pooled cross-modal retrieval: Recall@k over non-overlapping pools, with
//! the confidence interval taken across the pool distribution.

use super::bootstrap::{percentile_ci, MetricReport};
use super::EvalError;
use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ImageToText,
    TextToImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextField {
    Findings,
    Impressions,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub pool_size: usize,
    pub k: usize,
    pub direction: Direction,
    pub text_field: TextField,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            pool_size: 64,
            k: 1,
            direction: Direction::ImageToText,
            text_field: TextField::Findings,
        }
    }
}

fn l2_normalized(rows: ArrayView2<'_, f32>) -> ndarray::Array2<f32> {
    let mut out = rows.to_owned();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
        row.mapv_inplace(|v| v / norm);
    }
    out
}

/// Shuffle items into ⌊M/N⌋ non-overlapping pools (remainder dropped) and
/// average per-pool Recall@k; the interval is the 2.5/97.5 percentile of the
/// per-pool values. An item scores when fewer than k non-partners rank
/// strictly above its true partner.
pub fn pooled_retrieval(
    img_embs: ArrayView2<'_, f32>,
    txt_embs: ArrayView2<'_, f32>,
    cfg: &RetrievalConfig,
    seed: u64,
) -> Result<MetricReport, EvalError> {
    let m = img_embs.nrows();
    if txt_embs.nrows() != m {
        return Err(EvalError::PairedRows(m, txt_embs.nrows()));
    }
    if cfg.k >= cfg.pool_size {
        return Err(EvalError::BadTopK {
            k: cfg.k,
            limit: cfg.pool_size,
        });
    }
    if m < cfg.pool_size {
        return Err(EvalError::PoolTooLarge {
            pool: cfg.pool_size,
            items: m,
        });
    }
    let img = l2_normalized(img_embs);
    let txt = l2_normalized(txt_embs);

    let mut order: Vec<usize> = (0..m).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_pools = m / cfg.pool_size;

    let mut per_pool = Vec::with_capacity(n_pools);
    for p in 0..n_pools {
        let members = &order[p * cfg.pool_size..(p + 1) * cfg.pool_size];
        let mut hits = 0usize;
        for (qi, &q) in members.iter().enumerate() {
            let (query, gallery): (ndarray::ArrayView1<'_, f32>, &ndarray::Array2<f32>) =
                match cfg.direction {
                    Direction::ImageToText => (img.row(q), &txt),
                    Direction::TextToImage => (txt.row(q), &img),
                };
            let true_sim: f32 = query.dot(&gallery.row(q));
            let mut above = 0usize;
            for (oi, &other) in members.iter().enumerate() {
                if oi == qi {
                    continue;
                }
                let sim: f32 = query.dot(&gallery.row(other));
                if sim > true_sim {
                    above += 1;
                }
            }
            if above < cfg.k {
                hits += 1;
            }
        }
        per_pool.push(hits as f64 / cfg.pool_size as f64);
    }
    let point = per_pool.iter().sum::<f64>() / n_pools as f64;
    let (ci_low, ci_high) = percentile_ci(&per_pool);
    Ok(MetricReport {
        point_estimate: point,
        ci_low,
        ci_high,
        n_boot: n_pools,
    })
}
