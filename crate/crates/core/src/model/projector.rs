//! 2D-to-3D lifting head: compresses 160 per-slice embeddings into a single
//! 512-dim volume embedding (slice-mix to 64 with rectification, then one
//! dense map).

use super::{ModelError, EMBED_DIM};
use crate::nn::{Linear, Param, ParamInit};
use ndarray::{Array1, Array2};

pub struct SliceProjector {
    /// Mixes the 160 slices down to 64: `[64, 160]`, no bias.
    pub stage1: Param,
    /// Dense map from the flattened `[64 * slice_dim]` to 512.
    pub stage2: Linear,
    pub n_slices: usize,
    pub slice_dim: usize,
}

impl SliceProjector {
    pub fn new(slice_dim: usize, seed: u64) -> Self {
        let n_slices = 160;
        let reduced = 64;
        SliceProjector {
            stage1: Param::new(
                "proj.stage1.weight",
                &[reduced, n_slices],
                ParamInit::Uniform((1.0 / n_slices as f32).sqrt()),
                seed,
            ),
            stage2: Linear::new("proj.stage2", reduced * slice_dim, EMBED_DIM, seed),
            n_slices,
            slice_dim,
        }
    }

    /// Lift `[160, slice_dim]` slice embeddings to one 512-dim embedding.
    pub fn lift_slices(&mut self, slices: &Array2<f32>) -> Result<Array1<f32>, ModelError> {
        let (n, d) = slices.dim();
        if n != self.n_slices {
            return Err(ModelError::BadSliceCount {
                expected: self.n_slices,
                got: n,
            });
        }
        if d != self.slice_dim {
            return Err(ModelError::ShapeMismatch {
                expected: [self.n_slices, self.slice_dim, 0],
                got: [n, d, 0],
            });
        }
        let w1 = self
            .stage1
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mixed = w1.dot(slices); // [64, d]
        let rectified = mixed.mapv(|v| v.max(0.0));
        let flat = rectified
            .into_shape_with_order((1, 64 * self.slice_dim))
            .unwrap();
        let out = self.stage2.forward(&flat.to_owned(), false);
        Ok(out.row(0).to_owned())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = vec![&mut self.stage1];
        p.extend(self.stage2.params_mut());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_slices_give_stage2_bias() {
        let mut p = SliceProjector::new(8, 5);
        p.stage2
            .bias
            .value
            .as_slice_mut()
            .unwrap()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = i as f32 * 0.01);
        let out = p.lift_slices(&Array2::zeros((160, 8))).unwrap();
        for (i, v) in out.iter().enumerate() {
            assert_eq!(*v, i as f32 * 0.01);
        }
    }

    #[test]
    fn output_dimension_is_512() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = SliceProjector::new(16, 2);
        let slices = Array2::from_shape_fn((160, 16), |_| rng.random_range(-1.0..1.0f32));
        let out = p.lift_slices(&slices).unwrap();
        assert_eq!(out.len(), EMBED_DIM);
    }

    #[test]
    fn wrong_slice_count_rejected() {
        let mut p = SliceProjector::new(8, 2);
        assert!(matches!(
            p.lift_slices(&Array2::zeros((100, 8))),
            Err(ModelError::BadSliceCount { expected: 160, got: 100 })
        ));
    }

    #[test]
    fn averaging_stage1_with_identity_stage2_yields_mean_slice() {
        // Hand-set weights oracle: stage1 rows averaging, stage2 reading out
        // the first reduced embedding unchanged.
        let d = 8;
        let mut p = SliceProjector::new(d, 2);
        p.stage1.value.fill(1.0 / 160.0);
        p.stage2.weight.value.fill(0.0);
        p.stage2.bias.value.fill(0.0);
        {
            let mut w = p
                .stage2
                .weight
                .value
                .view_mut()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            for i in 0..d {
                w[[i, i]] = 1.0; // first block of the flattened [64*d] input
            }
        }
        // Nonnegative slices so rectification is the identity.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let slices = Array2::from_shape_fn((160, d), |_| rng.random_range(0.0..1.0f32));
        let out = p.lift_slices(&slices).unwrap();
        let mean = slices.sum_axis(ndarray::Axis(0)) / 160.0;
        for i in 0..d {
            assert!((out[i] - mean[i]).abs() < 1e-5, "{} vs {}", out[i], mean[i]);
        }
        for v in out.iter().skip(d) {
            assert_eq!(*v, 0.0);
        }
    }
}
