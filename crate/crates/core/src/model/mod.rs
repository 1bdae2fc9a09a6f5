//! Model components: the inflated-3D image encoder family, the trainable
//! text encoder, the 2D-to-3D slice projector baseline, and the segmentation
//! decoder, plus kernel inflation and the Dice metric.

mod encoder;
mod projector;
mod segdec;
mod text;

pub use encoder::{build_image_encoder, Backbone, ImageEncoder, StemConfig};
pub use projector::SliceProjector;
pub use segdec::SegDecoder;
pub use text::{tokenize, TextEncoder};

use ndarray::{Array3, Array4, Array5};
use std::collections::BTreeMap;
use thiserror::Error;

/// Shared embedding dimension of the contrastive space.
pub const EMBED_DIM: usize = 512;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unsupported stem (ks_z, stride_z) = ({0}, {1}); supported: (7,2), (3,2), (3,1)")]
    UnsupportedStem(usize, usize),
    #[error("inflation depth must be >= 1, got {0}")]
    BadDepth(usize),
    #[error("expected {expected} slice embeddings, got {got}")]
    BadSliceCount { expected: usize, got: usize },
    #[error("input shape {got:?} does not match encoder expectation {expected:?}")]
    ShapeMismatch {
        expected: [usize; 3],
        got: [usize; 3],
    },
    #[error("volume shape collapses to zero at stage `{0}`")]
    CollapsedShape(String),
    #[error("label volumes differ in shape: {0:?} vs {1:?}")]
    DiceShapeMismatch([usize; 3], [usize; 3]),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] crate::nn::CheckpointError),
    #[error("checkpoint is missing parameter `{0}`")]
    MissingParam(String),
    #[error("checkpoint shape mismatch for `{name}`: file {file:?} vs model {model:?}")]
    ParamShape {
        name: String,
        file: Vec<usize>,
        model: Vec<usize>,
    },
}

/// Inflate a 2D kernel `[Cout, Cin, kh, kw]` along a new depth axis with
/// 1/depth scaling, so the depth-sum reproduces the 2D kernel.
///
/// The first `depth - 1` slices hold `k / depth` as rounded in f32; the last
/// slice holds the residual `k - sum(previous)`, which makes the
/// left-to-right depth-sum bit-exact (plain replication drifts by an ulp for
/// depths that are not powers of two).
pub fn inflate_2d_weights(kernel2d: &Array4<f32>, depth: usize) -> Result<Array5<f32>, ModelError> {
    if depth < 1 {
        return Err(ModelError::BadDepth(depth));
    }
    let (cout, cin, kh, kw) = kernel2d.dim();
    let mut out = Array5::<f32>::zeros((cout, cin, depth, kh, kw));
    let scale = 1.0 / depth as f32;
    for co in 0..cout {
        for ci in 0..cin {
            for h in 0..kh {
                for w in 0..kw {
                    let k = kernel2d[[co, ci, h, w]];
                    let m = k * scale;
                    let mut partial = 0.0f32;
                    for d in 0..depth.saturating_sub(1) {
                        out[[co, ci, d, h, w]] = m;
                        partial += m;
                    }
                    out[[co, ci, depth - 1, h, w]] = if depth == 1 { k } else { k - partial };
                }
            }
        }
    }
    Ok(out)
}

/// Per-class Dice overlap between two label volumes: `2|P∩T| / (|P|+|T|)`,
/// defined as 1.0 when a class is absent from both volumes.
pub fn dice_score(
    pred: &Array3<u32>,
    truth: &Array3<u32>,
    classes: &[u32],
) -> Result<BTreeMap<u32, f64>, ModelError> {
    if pred.dim() != truth.dim() {
        let p = pred.dim();
        let t = truth.dim();
        return Err(ModelError::DiceShapeMismatch(
            [p.0, p.1, p.2],
            [t.0, t.1, t.2],
        ));
    }
    let mut out = BTreeMap::new();
    for &c in classes {
        let mut np = 0u64;
        let mut nt = 0u64;
        let mut ni = 0u64;
        for (&a, &b) in pred.iter().zip(truth.iter()) {
            let pa = a == c;
            let tb = b == c;
            np += pa as u64;
            nt += tb as u64;
            ni += (pa && tb) as u64;
        }
        let dice = if np + nt == 0 {
            1.0
        } else {
            2.0 * ni as f64 / (np + nt) as f64
        };
        out.insert(c, dice);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn inflate_depth_one_is_identity() {
        let k = Array4::from_shape_fn((2, 1, 3, 3), |(a, _, b, c)| (a + b * c) as f32 - 1.5);
        let out = inflate_2d_weights(&k, 1).unwrap();
        for ((co, ci, h, w), &v) in k.indexed_iter() {
            assert_eq!(out[[co, ci, 0, h, w]], v);
        }
    }

    #[test]
    fn inflate_ones_depth_three() {
        let k = Array4::from_elem((1, 1, 3, 3), 1.0f32);
        let out = inflate_2d_weights(&k, 3).unwrap();
        let third = 1.0f32 / 3.0;
        for h in 0..3 {
            for w in 0..3 {
                assert_eq!(out[[0, 0, 0, h, w]], third);
                assert_eq!(out[[0, 0, 1, h, w]], third);
                // Residual slice differs from fl(1/3) by at most one ulp.
                assert!((out[[0, 0, 2, h, w]] - third).abs() <= f32::EPSILON * third);
                let sum = out[[0, 0, 0, h, w]] + out[[0, 0, 1, h, w]] + out[[0, 0, 2, h, w]];
                assert_eq!(sum, 1.0);
            }
        }
    }

    #[test]
    fn inflate_depth_sum_is_bit_exact_for_random_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for depth in [1usize, 2, 3, 4, 5, 6, 7, 8] {
            for _ in 0..50 {
                let k = Array4::from_shape_fn((2, 2, 3, 3), |_| rng.random_range(-10.0..10.0f32));
                let out = inflate_2d_weights(&k, depth).unwrap();
                for ((co, ci, h, w), &kv) in k.indexed_iter() {
                    let mut sum = 0.0f32;
                    for d in 0..depth {
                        sum += out[[co, ci, d, h, w]];
                    }
                    assert_eq!(sum, kv, "depth {depth}");
                }
            }
        }
    }

    #[test]
    fn inflate_rejects_zero_depth() {
        let k = Array4::zeros((1, 1, 3, 3));
        assert!(matches!(
            inflate_2d_weights(&k, 0),
            Err(ModelError::BadDepth(0))
        ));
    }

    #[test]
    fn dice_identity_and_disjoint() {
        let a = Array3::from_shape_fn((4, 4, 4), |(i, _, _)| (i % 2) as u32);
        let same = dice_score(&a, &a, &[0, 1]).unwrap();
        assert_eq!(same[&0], 1.0);
        assert_eq!(same[&1], 1.0);
        let b = a.mapv(|v| 1 - v);
        let disjoint = dice_score(&a, &b, &[0, 1]).unwrap();
        assert_eq!(disjoint[&0], 0.0);
        assert_eq!(disjoint[&1], 0.0);
    }

    #[test]
    fn dice_half_overlap() {
        // |P| = 100, |T| = 100, |P∩T| = 50 → 0.5.
        let mut pred = Array3::<u32>::zeros((10, 10, 2));
        let mut truth = Array3::<u32>::zeros((10, 10, 2));
        for i in 0..10 {
            for j in 0..10 {
                pred[[i, j, 0]] = 7;
                truth[[i, j, if i < 5 { 0 } else { 1 }]] = 7;
            }
        }
        let d = dice_score(&pred, &truth, &[7]).unwrap();
        assert_eq!(d[&7], 0.5);
    }

    #[test]
    fn dice_empty_class_is_one() {
        let a = Array3::<u32>::zeros((2, 2, 2));
        let d = dice_score(&a, &a, &[3]).unwrap();
        assert_eq!(d[&3], 1.0);
    }

    #[test]
    fn dice_rejects_shape_mismatch() {
        let a = Array3::<u32>::zeros((2, 2, 2));
        let b = Array3::<u32>::zeros((2, 2, 3));
        assert!(dice_score(&a, &b, &[0]).is_err());
    }
}
