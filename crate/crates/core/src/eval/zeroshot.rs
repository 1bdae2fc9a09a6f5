//! Zero-shot findings classification from presence/absence prompt ensembles,
//! plus the slice-similarity pooling used by 2D baselines.

use super::EvalError;
use crate::model::TextEncoder;
use serde::{Deserialize, Serialize};

/// Presence and absence phrasings for one finding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptSet {
    #[serde(rename = "finding")]
    pub finding_name: String,
    #[serde(rename = "presence")]
    pub presence_prompts: Vec<String>,
    #[serde(rename = "absence")]
    pub absence_prompts: Vec<String>,
}

/// Load prompt sets from a JSON array file:
/// `[{"finding":..., "presence":[...], "absence":[...]}, ...]`.
pub fn load_prompt_sets(path: &std::path::Path) -> Result<Vec<PromptSet>, EvalError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| EvalError::BadPromptFile(e.to_string()))
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na.max(1e-12) * nb.max(1e-12))
}

/// Presence/absence prompt embeddings for one finding, encoded once.
pub struct EncodedPromptSet {
    pub finding_name: String,
    presence: Vec<Vec<f32>>,
    absence: Vec<Vec<f32>>,
}

impl EncodedPromptSet {
    pub fn encode(prompts: &PromptSet, text_enc: &mut TextEncoder) -> Result<Self, EvalError> {
        if prompts.presence_prompts.is_empty() || prompts.absence_prompts.is_empty() {
            return Err(EvalError::EmptyPromptList(prompts.finding_name.clone()));
        }
        Ok(EncodedPromptSet {
            finding_name: prompts.finding_name.clone(),
            presence: prompts.presence_prompts.iter().map(|p| text_enc.encode(p)).collect(),
            absence: prompts.absence_prompts.iter().map(|p| text_enc.encode(p)).collect(),
        })
    }

    /// Mean presence and absence cosine similarities to an image embedding.
    pub fn scores(&self, img_emb: &[f32]) -> (f64, f64) {
        let mean = |set: &[Vec<f32>]| {
            set.iter().map(|p| cosine(img_emb, p)).sum::<f64>() / set.len() as f64
        };
        (mean(&self.presence), mean(&self.absence))
    }

    /// Positive iff the mean presence similarity strictly exceeds the mean
    /// absence similarity; ties are negative.
    pub fn classify(&self, img_emb: &[f32]) -> bool {
        let (pos, neg) = self.scores(img_emb);
        pos > neg
    }
}

/// One-shot classification of a single image embedding.
pub fn zero_shot_classify(
    img_emb: &[f32],
    prompts: &PromptSet,
    text_enc: &mut TextEncoder,
) -> Result<bool, EvalError> {
    Ok(EncodedPromptSet::encode(prompts, text_enc)?.classify(img_emb))
}

/// Pooling rule for per-slice similarity lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlicePooling {
    Mean,
    TopK(usize),
}

/// Pool per-slice similarity scores into a volume-level score.
pub fn pool_slice_similarities(slice_sims: &[f64], method: SlicePooling) -> Result<f64, EvalError> {
    if slice_sims.is_empty() {
        return Err(EvalError::EmptySamples);
    }
    match method {
        SlicePooling::Mean => Ok(slice_sims.iter().sum::<f64>() / slice_sims.len() as f64),
        SlicePooling::TopK(k) => {
            if k == 0 || k > slice_sims.len() {
                return Err(EvalError::BadTopK {
                    k,
                    limit: slice_sims.len(),
                });
            }
            let mut sorted = slice_sims.to_vec();
            sorted.sort_by(|a, b| b.total_cmp(a));
            Ok(sorted[..k].iter().sum::<f64>() / k as f64)
        }
    }
}
