//! Trainable layers. Each layer caches what its backward pass needs during
//! `forward`; `backward` consumes the cache, accumulates parameter gradients,
//! and returns the input gradient.

use super::conv::{conv3d, conv3d_backward, conv_out_len};
use super::param::{Param, ParamInit};
use ndarray::{Array1, Array2, Array5, ArrayD, Ix5};
use rayon::prelude::*;

/// 3D convolution with bias.
pub struct Conv3dLayer {
    pub weight: Param,
    pub bias: Param,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    cache_x: Option<Array5<f32>>,
}

impl Conv3dLayer {
    /// Kaiming-style initialization: Normal(0, sqrt(2 / fan_in)).
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        seed: u64,
    ) -> Self {
        let fan_in = (cin * kernel[0] * kernel[1] * kernel[2]) as f32;
        Conv3dLayer {
            weight: Param::new(
                format!("{name}.weight"),
                &[cout, cin, kernel[0], kernel[1], kernel[2]],
                ParamInit::Normal((2.0 / fan_in).sqrt()),
                seed,
            ),
            bias: Param::new(format!("{name}.bias"), &[cout], ParamInit::Zeros, seed),
            stride,
            pad,
            cache_x: None,
        }
    }

    pub fn weight5(&self) -> Array5<f32> {
        self.weight
            .value
            .clone()
            .into_dimensionality::<Ix5>()
            .expect("conv weight is 5-d")
    }

    pub fn out_shape(&self, in_shape: [usize; 3]) -> [usize; 3] {
        let k = self.weight.value.shape();
        [
            conv_out_len(in_shape[0], k[2], self.stride[0], self.pad[0]),
            conv_out_len(in_shape[1], k[3], self.stride[1], self.pad[1]),
            conv_out_len(in_shape[2], k[4], self.stride[2], self.pad[2]),
        ]
    }

    pub fn forward(&mut self, x: &Array5<f32>, train: bool) -> Array5<f32> {
        let w = self.weight5();
        let bias = self.bias.value.as_slice().unwrap();
        let y = conv3d(x, &w, bias, self.stride, self.pad);
        if train {
            self.cache_x = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Array5<f32>) -> Array5<f32> {
        let x = self.cache_x.take().expect("forward(train=true) before backward");
        let w = self.weight5();
        let grads = conv3d_backward(&x, &w, dy, self.stride, self.pad);
        self.weight.accumulate_grad(grads.dw.into_dyn());
        self.bias
            .accumulate_grad(ArrayD::from_shape_vec(vec![grads.db.len()], grads.db).unwrap());
        grads.dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Max pooling with per-axis kernel/stride/padding; padding voxels never win.
pub struct MaxPool3d {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    cache: Option<(Vec<u32>, (usize, usize, usize, usize, usize))>,
}

impl MaxPool3d {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Self {
        MaxPool3d {
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn out_shape(&self, in_shape: [usize; 3]) -> [usize; 3] {
        [
            conv_out_len(in_shape[0], self.kernel[0], self.stride[0], self.pad[0]),
            conv_out_len(in_shape[1], self.kernel[1], self.stride[1], self.pad[1]),
            conv_out_len(in_shape[2], self.kernel[2], self.stride[2], self.pad[2]),
        ]
    }

    pub fn forward(&mut self, x: &Array5<f32>, train: bool) -> Array5<f32> {
        let (bsz, c, id, ih, iw) = x.dim();
        let [od, oh, ow] = self.out_shape([id, ih, iw]);
        let xs = x.as_slice().unwrap();
        let in_plane = id * ih * iw;
        let out_plane = od * oh * ow;
        let mut out = vec![0.0f32; bsz * c * out_plane];
        let mut arg = vec![0u32; bsz * c * out_plane];
        let k = self.kernel;
        let s = self.stride;
        let p = self.pad;
        out.par_chunks_mut(out_plane)
            .zip(arg.par_chunks_mut(out_plane))
            .enumerate()
            .for_each(|(idx, (dst, argdst))| {
                let xc = &xs[idx * in_plane..(idx + 1) * in_plane];
                for odi in 0..od {
                    for ohi in 0..oh {
                        for owi in 0..ow {
                            let mut best = f32::NEG_INFINITY;
                            let mut best_idx = 0u32;
                            for kdi in 0..k[0] {
                                let idi = (odi * s[0] + kdi) as isize - p[0] as isize;
                                if idi < 0 || idi >= id as isize {
                                    continue;
                                }
                                for khi in 0..k[1] {
                                    let ihi = (ohi * s[1] + khi) as isize - p[1] as isize;
                                    if ihi < 0 || ihi >= ih as isize {
                                        continue;
                                    }
                                    for kwi in 0..k[2] {
                                        let iwi = (owi * s[2] + kwi) as isize - p[2] as isize;
                                        if iwi < 0 || iwi >= iw as isize {
                                            continue;
                                        }
                                        let flat =
                                            (idi as usize * ih + ihi as usize) * iw + iwi as usize;
                                        let v = xc[flat];
                                        if v > best {
                                            best = v;
                                            best_idx = flat as u32;
                                        }
                                    }
                                }
                            }
                            dst[(odi * oh + ohi) * ow + owi] = best;
                            argdst[(odi * oh + ohi) * ow + owi] = best_idx;
                        }
                    }
                }
            });
        if train {
            self.cache = Some((arg, (bsz, c, id, ih, iw)));
        }
        Array5::from_shape_vec((bsz, c, od, oh, ow), out).unwrap()
    }

    pub fn backward(&mut self, dy: &Array5<f32>) -> Array5<f32> {
        let (arg, (bsz, c, id, ih, iw)) = self.cache.take().expect("forward before backward");
        let dys = dy.as_slice().unwrap();
        let out_plane = dy.dim().2 * dy.dim().3 * dy.dim().4;
        let in_plane = id * ih * iw;
        let mut dx = vec![0.0f32; bsz * c * in_plane];
        dx.par_chunks_mut(in_plane).enumerate().for_each(|(idx, dst)| {
            let dyc = &dys[idx * out_plane..(idx + 1) * out_plane];
            let argc = &arg[idx * out_plane..(idx + 1) * out_plane];
            for (g, &a) in dyc.iter().zip(argc) {
                dst[a as usize] += g;
            }
        });
        Array5::from_shape_vec((bsz, c, id, ih, iw), dx).unwrap()
    }
}

/// Batch-independent normalization: each sample's channel is normalized over
/// its spatial extent, then scaled and shifted per channel. Identical in
/// train and eval, so inference is deterministic by construction.
pub struct ChannelNorm {
    pub gain: Param,
    pub bias: Param,
    pub eps: f32,
    cache: Option<(Array5<f32>, Vec<f32>)>,
}

impl ChannelNorm {
    pub fn new(name: &str, channels: usize, seed: u64) -> Self {
        ChannelNorm {
            gain: Param::new(format!("{name}.gain"), &[channels], ParamInit::Ones, seed),
            bias: Param::new(format!("{name}.bias"), &[channels], ParamInit::Zeros, seed),
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array5<f32>, train: bool) -> Array5<f32> {
        let (bsz, c, d, h, w) = x.dim();
        let n = d * h * w;
        let xs = x.as_slice().unwrap();
        let gain = self.gain.value.as_slice().unwrap();
        let bias = self.bias.value.as_slice().unwrap();
        let mut xhat = vec![0.0f32; bsz * c * n];
        let mut inv_std = vec![0.0f32; bsz * c];
        let eps = self.eps;
        xhat.par_chunks_mut(n)
            .zip(inv_std.par_iter_mut())
            .enumerate()
            .for_each(|(idx, (dst, istd))| {
                let xc = &xs[idx * n..(idx + 1) * n];
                let mean = xc.iter().sum::<f32>() / n as f32;
                let var = xc.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
                *istd = 1.0 / (var + eps).sqrt();
                for (o, v) in dst.iter_mut().zip(xc) {
                    *o = (v - mean) * *istd;
                }
            });
        let xhat = Array5::from_shape_vec((bsz, c, d, h, w), xhat).unwrap();
        let mut y = xhat.clone();
        y.as_slice_mut()
            .unwrap()
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(idx, dst)| {
                let ch = idx % c;
                for v in dst.iter_mut() {
                    *v = *v * gain[ch] + bias[ch];
                }
            });
        if train {
            self.cache = Some((xhat, inv_std));
        }
        y
    }

    pub fn backward(&mut self, dy: &Array5<f32>) -> Array5<f32> {
        let (xhat, inv_std) = self.cache.take().expect("forward before backward");
        let (bsz, c, d, h, w) = xhat.dim();
        let n = d * h * w;
        let dys = dy.as_slice().unwrap();
        let xh = xhat.as_slice().unwrap();
        let gain = self.gain.value.as_slice().unwrap();

        let mut dgain = vec![0.0f32; c];
        let mut dbias = vec![0.0f32; c];
        for b in 0..bsz {
            for ch in 0..c {
                let off = (b * c + ch) * n;
                let mut dg = 0.0f32;
                let mut dbv = 0.0f32;
                for i in 0..n {
                    dg += dys[off + i] * xh[off + i];
                    dbv += dys[off + i];
                }
                dgain[ch] += dg;
                dbias[ch] += dbv;
            }
        }

        let mut dx = vec![0.0f32; bsz * c * n];
        dx.par_chunks_mut(n).enumerate().for_each(|(idx, dst)| {
            let ch = idx % c;
            let off = idx * n;
            let g = gain[ch];
            let istd = inv_std[idx];
            // dxhat = dy * gain; dx = istd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
            let mut sum_dxh = 0.0f32;
            let mut sum_dxh_xh = 0.0f32;
            for i in 0..n {
                let dxh = dys[off + i] * g;
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh[off + i];
            }
            let m1 = sum_dxh / n as f32;
            let m2 = sum_dxh_xh / n as f32;
            for i in 0..n {
                let dxh = dys[off + i] * g;
                dst[i] = istd * (dxh - m1 - xh[off + i] * m2);
            }
        });

        self.gain
            .accumulate_grad(ArrayD::from_shape_vec(vec![c], dgain).unwrap());
        self.bias
            .accumulate_grad(ArrayD::from_shape_vec(vec![c], dbias).unwrap());
        Array5::from_shape_vec((bsz, c, d, h, w), dx).unwrap()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gain, &mut self.bias]
    }
}

/// Elementwise rectifier.
#[derive(Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Relu::default()
    }

    pub fn forward5(&mut self, x: &Array5<f32>, train: bool) -> Array5<f32> {
        let mut y = x.clone();
        if train {
            self.mask = Some(x.iter().map(|&v| v > 0.0).collect());
        }
        y.mapv_inplace(|v| v.max(0.0));
        y
    }

    pub fn backward5(&mut self, dy: &Array5<f32>) -> Array5<f32> {
        let mask = self.mask.take().expect("forward before backward");
        let mut dx = dy.clone();
        for (d, &m) in dx.iter_mut().zip(mask.iter()) {
            if !m {
                *d = 0.0;
            }
        }
        dx
    }

    pub fn forward2(&mut self, x: &Array2<f32>, train: bool) -> Array2<f32> {
        let mut y = x.clone();
        if train {
            self.mask = Some(x.iter().map(|&v| v > 0.0).collect());
        }
        y.mapv_inplace(|v| v.max(0.0));
        y
    }

    pub fn backward2(&mut self, dy: &Array2<f32>) -> Array2<f32> {
        let mask = self.mask.take().expect("forward before backward");
        let mut dx = dy.clone();
        for (d, &m) in dx.iter_mut().zip(mask.iter()) {
            if !m {
                *d = 0.0;
            }
        }
        dx
    }
}

/// Spatial mean over (D, H, W): `[B, C, D, H, W]` → `[B, C]`.
#[derive(Default)]
pub struct GlobalAvgPool {
    cache_shape: Option<(usize, usize, usize, usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool::default()
    }

    pub fn forward(&mut self, x: &Array5<f32>, train: bool) -> Array2<f32> {
        let (bsz, c, d, h, w) = x.dim();
        let n = (d * h * w) as f32;
        let xs = x.as_slice().unwrap();
        let mut out = Array2::zeros((bsz, c));
        for b in 0..bsz {
            for ch in 0..c {
                let off = (b * c + ch) * d * h * w;
                out[[b, ch]] = xs[off..off + d * h * w].iter().sum::<f32>() / n;
            }
        }
        if train {
            self.cache_shape = Some((bsz, c, d, h, w));
        }
        out
    }

    pub fn backward(&mut self, dy: &Array2<f32>) -> Array5<f32> {
        let (bsz, c, d, h, w) = self.cache_shape.take().expect("forward before backward");
        let n = (d * h * w) as f32;
        let mut dx = Array5::zeros((bsz, c, d, h, w));
        for b in 0..bsz {
            for ch in 0..c {
                let g = dy[[b, ch]] / n;
                dx.slice_mut(ndarray::s![b, ch, .., .., ..]).fill(g);
            }
        }
        dx
    }
}

/// Dense layer on `[B, in]` activations.
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    cache_x: Option<Array2<f32>>,
}

impl Linear {
    pub fn new(name: &str, dim_in: usize, dim_out: usize, seed: u64) -> Self {
        let bound = (1.0 / dim_in as f32).sqrt();
        Linear {
            weight: Param::new(
                format!("{name}.weight"),
                &[dim_out, dim_in],
                ParamInit::Uniform(bound),
                seed,
            ),
            bias: Param::new(format!("{name}.bias"), &[dim_out], ParamInit::Zeros, seed),
            cache_x: None,
        }
    }

    fn weight2(&self) -> ndarray::ArrayView2<'_, f32> {
        self.weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
    }

    pub fn forward(&mut self, x: &Array2<f32>, train: bool) -> Array2<f32> {
        let w = self.weight2();
        let bias = self.bias.value.as_slice().unwrap();
        let mut y = x.dot(&w.t());
        for mut row in y.rows_mut() {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        if train {
            self.cache_x = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Array2<f32>) -> Array2<f32> {
        let x = self.cache_x.take().expect("forward before backward");
        let w = self.weight2().to_owned();
        let dw = dy.t().dot(&x);
        let db: Array1<f32> = dy.sum_axis(ndarray::Axis(0));
        self.weight.accumulate_grad(dw.into_dyn());
        self.bias.accumulate_grad(db.into_dyn());
        dy.dot(&w)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Mean-pooled token-embedding table: token id lists in, `[B, dim]` out.
pub struct EmbeddingBag {
    pub table: Param,
    pub dim: usize,
    cache_ids: Option<Vec<Vec<u32>>>,
}

impl EmbeddingBag {
    pub fn new(name: &str, vocab: usize, dim: usize, seed: u64) -> Self {
        EmbeddingBag {
            table: Param::new(
                format!("{name}.table"),
                &[vocab, dim],
                ParamInit::Normal(1.0 / (dim as f32).sqrt()),
                seed,
            ),
            dim,
            cache_ids: None,
        }
    }

    pub fn forward(&mut self, ids: &[Vec<u32>], train: bool) -> Array2<f32> {
        let table = self
            .table
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut out = Array2::zeros((ids.len(), self.dim));
        for (b, sample) in ids.iter().enumerate() {
            if sample.is_empty() {
                continue;
            }
            let inv = 1.0 / sample.len() as f32;
            let mut row = out.row_mut(b);
            for &id in sample {
                let emb = table.row(id as usize);
                for (o, e) in row.iter_mut().zip(emb) {
                    *o += e * inv;
                }
            }
        }
        if train {
            self.cache_ids = Some(ids.to_vec());
        }
        out
    }

    pub fn backward(&mut self, dy: &Array2<f32>) {
        let ids = self.cache_ids.take().expect("forward before backward");
        let shape = self.table.value.shape().to_vec();
        let mut dtable = Array2::<f32>::zeros((shape[0], shape[1]));
        for (b, sample) in ids.iter().enumerate() {
            if sample.is_empty() {
                continue;
            }
            let inv = 1.0 / sample.len() as f32;
            let grow = dy.row(b);
            for &id in sample {
                let mut trow = dtable.row_mut(id as usize);
                for (t, g) in trow.iter_mut().zip(grow) {
                    *t += g * inv;
                }
            }
        }
        self.table.accumulate_grad(dtable.into_dyn());
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.table]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array5;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random5(shape: (usize, usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array5<f32> {
        let n = shape.0 * shape.1 * shape.2 * shape.3 * shape.4;
        Array5::from_shape_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn maxpool_forward_and_backward_route_to_argmax() {
        let mut x = Array5::zeros((1, 1, 1, 4, 4));
        x[[0, 0, 0, 1, 2]] = 5.0;
        x[[0, 0, 0, 3, 3]] = 2.0;
        let mut pool = MaxPool3d::new([1, 2, 2], [1, 2, 2], [0, 0, 0]);
        let y = pool.forward(&x, true);
        assert_eq!(y.dim(), (1, 1, 1, 2, 2));
        assert_eq!(y[[0, 0, 0, 0, 1]], 5.0);
        let mut dy = Array5::zeros((1, 1, 1, 2, 2));
        dy[[0, 0, 0, 0, 1]] = 1.0;
        let dx = pool.backward(&dy);
        assert_eq!(dx[[0, 0, 0, 1, 2]], 1.0);
        assert_eq!(dx.sum(), 1.0);
    }

    #[test]
    fn channelnorm_normalizes_per_sample_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random5((2, 3, 2, 3, 4), &mut rng);
        let mut norm = ChannelNorm::new("n", 3, 0);
        let y = norm.forward(&x, false);
        for b in 0..2 {
            for c in 0..3 {
                let slice = y.slice(ndarray::s![b, c, .., .., ..]);
                let mean: f32 = slice.iter().sum::<f32>() / slice.len() as f32;
                let var: f32 = slice.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / slice.len() as f32;
                assert!(mean.abs() < 1e-5);
                assert!((var - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn channelnorm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random5((1, 2, 2, 2, 3), &mut rng);
        let dy = random5((1, 2, 2, 2, 3), &mut rng);
        let mut norm = ChannelNorm::new("n", 2, 3);
        norm.gain.value.mapv_inplace(|_| 1.3);
        norm.bias.value.mapv_inplace(|_| -0.2);
        let _ = norm.forward(&x, true);
        let dx = norm.backward(&dy);

        let f = |x: &Array5<f32>| -> f64 {
            let mut n2 = ChannelNorm::new("n", 2, 3);
            n2.gain.value.mapv_inplace(|_| 1.3);
            n2.bias.value.mapv_inplace(|_| -0.2);
            n2.forward(x, false)
                .iter()
                .zip(dy.iter())
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum()
        };
        let eps = 1e-2f32;
        for idx in [[0usize, 0, 0, 0, 0], [0, 1, 1, 0, 2], [0, 0, 1, 1, 1]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let numeric = (f(&xp) - f(&xm)) / (2.0 * eps as f64);
            assert!(
                ((dx[idx] as f64) - numeric).abs() < 1e-2 * numeric.abs().max(1.0),
                "{} vs {numeric}",
                dx[idx]
            );
        }
    }

    #[test]
    fn linear_backward_matches_manual_matmul() {
        let mut lin = Linear::new("l", 3, 2, 9);
        let x = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]).unwrap();
        let y = lin.forward(&x, true);
        assert_eq!(y.dim(), (2, 2));
        let dy = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let dx = lin.backward(&dy);
        let w = lin
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let expect_dx = dy.dot(&w);
        assert_eq!(dx, expect_dx);
        let dw = lin.weight.grad.as_ref().unwrap();
        let expect_dw = dy.t().dot(&x);
        assert_eq!(dw.as_slice().unwrap(), expect_dw.as_slice().unwrap());
    }

    #[test]
    fn avgpool_backward_spreads_uniformly() {
        let mut pool = GlobalAvgPool::new();
        let x = Array5::from_elem((1, 2, 2, 2, 2), 3.0);
        let y = pool.forward(&x, true);
        assert_eq!(y[[0, 0]], 3.0);
        let dy = Array2::from_shape_vec((1, 2), vec![8.0, 16.0]).unwrap();
        let dx = pool.backward(&dy);
        assert_eq!(dx[[0, 0, 0, 0, 0]], 1.0);
        assert_eq!(dx[[0, 1, 1, 1, 1]], 2.0);
    }

    #[test]
    fn embedding_bag_means_rows_and_scatters_grads() {
        let mut emb = EmbeddingBag::new("e", 4, 2, 0);
        emb.table.value = ArrayD::from_shape_vec(
            vec![4, 2],
            vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0, -1.0, -1.0],
        )
        .unwrap();
        let out = emb.forward(&[vec![0, 1], vec![2]], true);
        assert_eq!(out[[0, 0]], 0.5);
        assert_eq!(out[[0, 1]], 0.5);
        assert_eq!(out[[1, 0]], 2.0);
        let dy = Array2::from_shape_vec((2, 2), vec![2.0, 2.0, 1.0, 0.0]).unwrap();
        emb.backward(&dy);
        let g = emb.table.grad.as_ref().unwrap();
        assert_eq!(g[[0, 0]], 1.0); // 2.0 * 1/2
        assert_eq!(g[[1, 1]], 1.0);
        assert_eq!(g[[2, 0]], 1.0);
        assert_eq!(g[[3, 0]], 0.0);
    }

    #[test]
    fn relu_masks_gradients() {
        let mut relu = Relu::new();
        let x = Array2::from_shape_vec((1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        let y = relu.forward2(&x, true);
        assert_eq!(y.as_slice().unwrap(), &[0.0, 0.0, 2.0]);
        let dy = Array2::from_elem((1, 3), 1.0);
        let dx = relu.backward2(&dy);
        assert_eq!(dx.as_slice().unwrap(), &[0.0, 0.0, 1.0]);
    }
}
