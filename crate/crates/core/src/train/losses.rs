//! Contrastive and masked multi-label losses with analytic gradients.
//!
//! Both losses are generic over the float type: training runs in f32, while
//! gradient checks promote to f64 and compare against central finite
//! differences.

use ndarray::{Array2, NdFloat};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("contrastive batch needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("non-finite value in loss input")]
    NonFinite,
    #[error("embedding batches disagree: {0} image rows vs {1} text rows")]
    BatchMismatch(usize, usize),
    #[error("labels must be exactly 0 or 1, found {0}")]
    BadLabel(f64),
    #[error("shape mismatch: logits {0:?}, labels {1:?}, mask {2:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>, Vec<usize>),
}

/// Value and gradients of the symmetric InfoNCE loss.
pub struct InfoNceResult<F> {
    pub loss: F,
    pub d_img: Array2<F>,
    pub d_txt: Array2<F>,
    /// Gradient with respect to the similarity scale.
    pub d_scale: F,
}

fn l2_normalize_rows<F: NdFloat>(x: &Array2<F>) -> (Array2<F>, Vec<F>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.nrows());
    let tiny = F::from(1e-12).unwrap();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|v| *v * *v).fold(F::zero(), |a, b| a + b).sqrt();
        let n = if norm > tiny { norm } else { tiny };
        row.mapv_inplace(|v| v / n);
        norms.push(n);
    }
    (out, norms)
}

/// Chain a gradient through row L2-normalization:
/// d_x = (d_u - u * <d_u, u>) / ||x||.
fn normalize_backward<F: NdFloat>(u: &Array2<F>, norms: &[F], d_u: &Array2<F>) -> Array2<F> {
    let mut d_x = d_u.clone();
    for (i, mut row) in d_x.rows_mut().into_iter().enumerate() {
        let urow = u.row(i);
        let dot = urow
            .iter()
            .zip(row.iter())
            .map(|(a, b)| *a * *b)
            .fold(F::zero(), |a, b| a + b);
        for (d, uv) in row.iter_mut().zip(urow.iter()) {
            *d = (*d - *uv * dot) / norms[i];
        }
    }
    d_x
}

/// Symmetric InfoNCE over the batch's cosine-similarity matrix: mean of the
/// image→text and text→image cross-entropies, diagonal pairs positive.
pub fn info_nce_loss<F: NdFloat>(
    img: &Array2<F>,
    txt: &Array2<F>,
    scale: F,
) -> Result<InfoNceResult<F>, LossError> {
    let b = img.nrows();
    if b < 2 {
        return Err(LossError::BatchTooSmall(b));
    }
    if txt.nrows() != b {
        return Err(LossError::BatchMismatch(b, txt.nrows()));
    }
    if img.iter().chain(txt.iter()).any(|v| !v.is_finite()) {
        return Err(LossError::NonFinite);
    }

    let (u, u_norms) = l2_normalize_rows(img);
    let (v, v_norms) = l2_normalize_rows(txt);
    let sims = u.dot(&v.t()); // [B, B] cosine similarities
    let logits = sims.mapv(|s| s * scale);

    let bf = F::from(b).unwrap();
    let half = F::from(0.5).unwrap();
    let mut loss = F::zero();
    // d_logits accumulates (P - I)/B over rows and (Q - I)/B over columns,
    // each weighted by 1/2.
    let mut d_logits = Array2::<F>::zeros((b, b));

    // image → text: softmax over each row.
    for i in 0..b {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let exps: Vec<F> = row.iter().map(|&z| (z - max).exp()).collect();
        let sum: F = exps.iter().cloned().fold(F::zero(), |a, b| a + b);
        loss = loss + (sum.ln() + max - logits[[i, i]]) / bf * half;
        for j in 0..b {
            let p = exps[j] / sum;
            let delta = if i == j { F::one() } else { F::zero() };
            d_logits[[i, j] ] = d_logits[[i, j]] + half * (p - delta) / bf;
        }
    }
    // text → image: softmax over each column.
    for j in 0..b {
        let col = logits.column(j);
        let max = col.iter().cloned().fold(F::neg_infinity(), F::max);
        let exps: Vec<F> = col.iter().map(|&z| (z - max).exp()).collect();
        let sum: F = exps.iter().cloned().fold(F::zero(), |a, b| a + b);
        loss = loss + (sum.ln() + max - logits[[j, j]]) / bf * half;
        for i in 0..b {
            let q = exps[i] / sum;
            let delta = if i == j { F::one() } else { F::zero() };
            d_logits[[i, j]] = d_logits[[i, j]] + half * (q - delta) / bf;
        }
    }

    let d_scale = d_logits
        .iter()
        .zip(sims.iter())
        .map(|(g, s)| *g * *s)
        .fold(F::zero(), |a, b| a + b);
    let d_sims = d_logits.mapv(|g| g * scale);
    let d_u = d_sims.dot(&v);
    let d_v = d_sims.t().dot(&u);

    Ok(InfoNceResult {
        loss,
        d_img: normalize_backward(&u, &u_norms, &d_u),
        d_txt: normalize_backward(&v, &v_norms, &d_v),
        d_scale,
    })
}

/// Value and logit gradient of the masked binary cross-entropy.
pub struct MaskedBceResult<F> {
    pub loss: F,
    pub d_logits: Array2<F>,
}

/// Mean BCE-with-logits over masked-in entries; masked-out entries contribute
/// nothing to the value or gradient. All-zero masks give zero loss.
pub fn masked_bce_loss<F: NdFloat>(
    logits: &Array2<F>,
    labels: &Array2<F>,
    mask: &Array2<F>,
) -> Result<MaskedBceResult<F>, LossError> {
    if logits.dim() != labels.dim() || logits.dim() != mask.dim() {
        return Err(LossError::ShapeMismatch(
            logits.shape().to_vec(),
            labels.shape().to_vec(),
            mask.shape().to_vec(),
        ));
    }
    for &y in labels.iter() {
        if y != F::zero() && y != F::one() {
            return Err(LossError::BadLabel(y.to_f64().unwrap_or(f64::NAN)));
        }
    }
    let n_in = mask.iter().fold(F::zero(), |a, &m| a + m);
    let mut d_logits = Array2::<F>::zeros(logits.raw_dim());
    if n_in == F::zero() {
        return Ok(MaskedBceResult {
            loss: F::zero(),
            d_logits,
        });
    }
    let mut loss = F::zero();
    for ((idx, &z), (&y, &m)) in logits
        .indexed_iter()
        .zip(labels.iter().zip(mask.iter()))
    {
        if m == F::zero() {
            continue;
        }
        // Stable BCE-with-logits: max(z,0) - z*y + ln(1 + exp(-|z|)).
        let bce = z.max(F::zero()) - z * y + (F::one() + (-z.abs()).exp()).ln();
        loss = loss + m * bce;
        let sig = F::one() / (F::one() + (-z).exp());
        d_logits[idx] = m * (sig - y) / n_in;
    }
    Ok(MaskedBceResult {
        loss: loss / n_in,
        d_logits,
    })
}
