//! Segmentation decoder: a UNet-style upsampling path over a frozen image
//! encoder. Each block is a transposed convolution (kernel = stride per axis)
//! followed by two 3³ convolutions, each with normalization and
//! rectification; residual-stage outputs are concatenated after the matching
//! upsampling step.

use super::encoder::ImageEncoder;
use super::ModelError;
use crate::nn::{conv_transpose3d, ChannelNorm, Conv3dLayer, Param, ParamInit, Relu};
use ndarray::{Array5, Axis};

struct UpBlock {
    up_weight: Param,
    up_bias: Param,
    stride: [usize; 3],
    conv1: Conv3dLayer,
    norm1: ChannelNorm,
    conv2: Conv3dLayer,
    norm2: ChannelNorm,
    skip_channels: usize,
}

impl UpBlock {
    fn new(name: &str, cin: usize, width: usize, stride: [usize; 3], skip_channels: usize, seed: u64) -> Self {
        let fan_in = (cin * stride[0] * stride[1] * stride[2]) as f32;
        UpBlock {
            up_weight: Param::new(
                format!("{name}.up.weight"),
                &[cin, width, stride[0], stride[1], stride[2]],
                ParamInit::Normal((2.0 / fan_in).sqrt()),
                seed,
            ),
            up_bias: Param::new(format!("{name}.up.bias"), &[width], ParamInit::Zeros, seed),
            stride,
            conv1: Conv3dLayer::new(
                &format!("{name}.conv1"),
                width + skip_channels,
                width,
                [3, 3, 3],
                [1, 1, 1],
                [1, 1, 1],
                seed,
            ),
            norm1: ChannelNorm::new(&format!("{name}.norm1"), width, seed),
            conv2: Conv3dLayer::new(&format!("{name}.conv2"), width, width, [3, 3, 3], [1, 1, 1], [1, 1, 1], seed),
            norm2: ChannelNorm::new(&format!("{name}.norm2"), width, seed),
            skip_channels,
        }
    }

    fn forward(&mut self, x: &Array5<f32>, skip: Option<&Array5<f32>>) -> Array5<f32> {
        let w = self
            .up_weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix5>()
            .unwrap()
            .to_owned();
        let up = conv_transpose3d(x, &w, self.up_bias.value.as_slice().unwrap(), self.stride);
        let merged = match skip {
            Some(s) => {
                assert_eq!(s.dim().1, self.skip_channels, "skip channel plan");
                ndarray::concatenate(Axis(1), &[up.view(), s.view()]).unwrap()
            }
            None => up,
        };
        let mut h = self.conv1.forward(&merged, false);
        h = self.norm1.forward(&h, false);
        h.mapv_inplace(|v| v.max(0.0));
        h = self.conv2.forward(&h, false);
        h = self.norm2.forward(&h, false);
        h.mapv_inplace(|v| v.max(0.0));
        h
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = vec![&mut self.up_weight, &mut self.up_bias];
        p.extend(self.conv1.params_mut());
        p.extend(self.norm1.params_mut());
        p.extend(self.conv2.params_mut());
        p.extend(self.norm2.params_mut());
        p
    }
}

/// Upsampling decoder producing one logit channel per class at the encoder's
/// input resolution.
pub struct SegDecoder {
    blocks: Vec<UpBlock>,
    head: Conv3dLayer,
    /// For block i, the encoder stage index whose output is concatenated
    /// (stage outputs only; pool/stem levels upsample without skips).
    skip_stage: Vec<Option<usize>>,
    pub n_classes: usize,
    _relu: Relu,
}

impl SegDecoder {
    /// Build a decoder matching `encoder`'s downsampling plan.
    pub fn new(encoder: &ImageEncoder, n_classes: usize, seed: u64) -> Self {
        let strides = encoder.level_strides();
        let channels = encoder.level_channels(); // [stem, stage0, stage1, ...]
        let n_stages = channels.len() - 1;
        let mut blocks = Vec::new();
        let mut skip_stage = Vec::new();
        let mut cin = encoder.feature_channels;
        // Invert levels deepest-first: stages (last..first), then pool, stem.
        let levels: Vec<[usize; 3]> = strides.iter().rev().copied().collect();
        for (i, &stride) in levels.iter().enumerate() {
            let width = (64usize >> i).max(4);
            // Inverting stage k (k = n_stages-1-i) lands at stage k-1's
            // resolution; that stage output is the skip.
            let skip = if i < n_stages {
                let k = n_stages - 1 - i;
                if k >= 1 { Some(k - 1) } else { None }
            } else {
                None
            };
            let skip_c = skip.map_or(0, |k| channels[k + 1]);
            blocks.push(UpBlock::new(
                &format!("dec.block{i}"),
                cin,
                width,
                stride,
                skip_c,
                seed,
            ));
            skip_stage.push(skip);
            cin = width;
        }
        let head = Conv3dLayer::new("dec.head", cin, n_classes, [1, 1, 1], [1, 1, 1], [0, 0, 0], seed);
        SegDecoder {
            blocks,
            head,
            skip_stage,
            n_classes,
            _relu: Relu::new(),
        }
    }

    /// Decode logits from the encoder's final feature map and stage taps
    /// (as returned by [`ImageEncoder::forward_with_taps`]).
    pub fn forward(&mut self, features: &Array5<f32>, taps: &[Array5<f32>]) -> Array5<f32> {
        let mut h = features.clone();
        for i in 0..self.blocks.len() {
            let skip = self.skip_stage[i].map(|k| &taps[k]);
            h = self.blocks[i].forward(&h, skip);
        }
        self.head.forward(&h, false)
    }

    /// Run the full encoder+decoder round trip on one batch of volumes.
    pub fn segment(
        &mut self,
        encoder: &mut ImageEncoder,
        x: &Array5<f32>,
    ) -> Result<Array5<f32>, ModelError> {
        let (features, taps) = encoder.forward_with_taps(x);
        Ok(self.forward(&features, &taps))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = Vec::new();
        for b in &mut self.blocks {
            p.extend(b.params_mut());
        }
        p.extend(self.head.params_mut());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_image_encoder, Backbone, StemConfig};

    #[test]
    fn decoder_round_trips_small_volume_for_every_stem() {
        for stem in StemConfig::WHITELIST {
            let mut enc = build_image_encoder(stem, Backbone::TinyResNet, 1).unwrap();
            let mut dec = SegDecoder::new(&enc, 3, 2);
            // z must be divisible by 8 * stride_z, in-plane by 16.
            let x = Array5::<f32>::from_elem((1, 1, 16, 32, 32), 0.5);
            let logits = dec.segment(&mut enc, &x).unwrap();
            assert_eq!(logits.dim(), (1, 3, 16, 32, 32), "stem {stem:?}");
        }
    }

    #[test]
    fn logit_channel_count_matches_classes() {
        let mut enc = build_image_encoder(StemConfig::default(), Backbone::TinyResNet, 1).unwrap();
        let mut dec = SegDecoder::new(&enc, 5, 2);
        let x = Array5::<f32>::from_elem((1, 1, 8, 16, 16), 0.1);
        let logits = dec.segment(&mut enc, &x).unwrap();
        assert_eq!(logits.dim().1, 5);
    }
}
