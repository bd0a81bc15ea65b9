use crate::nn::{
    maxpool2, maxpool2_backward, relu, relu_backward, softmax_channels, softmax_channels_backward, upsample_nearest,
    upsample_nearest_backward, BatchNorm2d, BnCache, Conv2d, ConvGeom, Module, Param,
};
use crate::scalar::Real;
use crate::tensor::Tensor;
use rand::Rng;

/// conv3×3 → BN → ReLU, twice.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    x: Tensor<T>,
    bn1: BnCache<T>,
    h1: Tensor<T>,
    bn2: BnCache<T>,
    h2: Tensor<T>,
}

impl<T: Real> ConvBlock<T> {
    fn new(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv2d::new(ConvGeom::same3(in_ch, out_ch), 1.0, rng),
            bn1: BatchNorm2d::new(out_ch),
            conv2: Conv2d::new(ConvGeom::same3(out_ch, out_ch), 1.0, rng),
            bn2: BatchNorm2d::new(out_ch),
        }
    }

    fn forward(&self, x: &Tensor<T>, train: bool) -> (Tensor<T>, BlockCache<T>) {
        let (u1, bn1) = self.bn1.forward(&self.conv1.forward(x), train);
        let h1 = relu(&u1);
        let (u2, bn2) = self.bn2.forward(&self.conv2.forward(&h1), train);
        let h2 = relu(&u2);
        (h2.clone(), BlockCache { x: x.clone(), bn1, h1, bn2, h2 })
    }

    fn backward(&mut self, c: &BlockCache<T>, dy: &Tensor<T>, param_grads: bool) -> Tensor<T> {
        let du2 = relu_backward(&c.h2, dy);
        let dt2 = self.bn2.backward(&c.bn2, &du2, param_grads);
        let dh1 = self.conv2.backward(&c.h1, &dt2, param_grads, true).expect("dx");
        let du1 = relu_backward(&c.h1, &dh1);
        let dt1 = self.bn1.backward(&c.bn1, &du1, param_grads);
        self.conv1.backward(&c.x, &dt1, param_grads, true).expect("dx")
    }

    fn commit(&mut self, c: &BlockCache<T>) {
        self.bn1.commit(&c.bn1);
        self.bn2.commit(&c.bn2);
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![
            &self.conv1.weight,
            &self.conv1.bias,
            &self.bn1.gamma,
            &self.bn1.beta,
            &self.conv2.weight,
            &self.conv2.bias,
            &self.bn2.gamma,
            &self.bn2.beta,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.bn2.gamma,
            &mut self.bn2.beta,
        ]
    }

    fn norms(&self) -> [&BatchNorm2d<T>; 2] {
        [&self.bn1, &self.bn2]
    }

    fn norms_mut(&mut self) -> [&mut BatchNorm2d<T>; 2] {
        [&mut self.bn1, &mut self.bn2]
    }
}

/// UNet with batch normalization and a per-pixel softmax head.
///
/// With a residual head it doubles as the anatomy encoder of the causal
/// variant: a 1×1 convolution reads the bottleneck features and emits the
/// appearance code at bottleneck resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentor<T> {
    pub encoder: Vec<ConvBlock<T>>,
    pub decoder: Vec<ConvBlock<T>>,
    pub head: Conv2d<T>,
    pub residual_head: Option<Conv2d<T>>,
}

#[derive(Clone, Debug)]
pub struct SegmentorCache<T> {
    enc: Vec<BlockCache<T>>,
    pools: Vec<([usize; 4], Vec<u32>)>,
    skip_channels: Vec<usize>,
    bottleneck: Tensor<T>,
    dec: Vec<BlockCache<T>>,
    last: Tensor<T>,
    probs: Tensor<T>,
}

/// Output of a segmentor pass.
#[derive(Clone, Debug)]
pub struct Segmentation<T> {
    pub probs: Tensor<T>,
    pub residual: Option<Tensor<T>>,
}

impl<T: Real> Segmentor<T> {
    pub fn new(depth: usize, width: usize, classes: usize, residual_channels: Option<usize>, rng: &mut impl Rng) -> Self {
        assert!(depth >= 1);
        let widths: Vec<usize> = (0..depth).map(|i| width << i).collect();
        let mut encoder = Vec::with_capacity(depth);
        let mut in_ch = 1;
        for &w in &widths {
            encoder.push(ConvBlock::new(in_ch, w, rng));
            in_ch = w;
        }
        let decoder = (0..depth.saturating_sub(1))
            .map(|j| {
                let level = depth - 2 - j;
                ConvBlock::new(widths[level] + widths[level + 1], widths[level], rng)
            })
            .collect();
        let head = Conv2d::new(ConvGeom::new(width, classes, 1, 1, 0), 1.0, rng);
        let residual_head = residual_channels.map(|r| Conv2d::new(ConvGeom::new(widths[depth - 1], r, 1, 1, 0), 1.0, rng));
        Self { encoder, decoder, head, residual_head }
    }

    pub fn depth(&self) -> usize {
        self.encoder.len()
    }

    /// Spatial downsampling factor of the bottleneck (and the residual code).
    pub fn bottleneck_factor(&self) -> usize {
        1 << (self.depth() - 1)
    }

    pub fn forward(&self, x: &Tensor<T>, train: bool) -> (Segmentation<T>, SegmentorCache<T>) {
        let depth = self.depth();
        let mut enc = Vec::with_capacity(depth);
        let mut pools = Vec::new();
        let mut skips = Vec::new();
        let mut h = x.clone();
        for (i, block) in self.encoder.iter().enumerate() {
            let (out, c) = block.forward(&h, train);
            enc.push(c);
            h = out;
            if i + 1 < depth {
                let (pooled, idx) = maxpool2(&h);
                pools.push((h.shape(), idx));
                skips.push(h);
                h = pooled;
            }
        }
        let bottleneck = h.clone();
        let residual = self.residual_head.as_ref().map(|rh| rh.forward(&bottleneck));
        let mut dec = Vec::with_capacity(depth.saturating_sub(1));
        let skip_channels: Vec<usize> = skips.iter().map(|s| s.c()).collect();
        for (j, block) in self.decoder.iter().enumerate() {
            let level = depth - 2 - j;
            let up = upsample_nearest(&h, 2);
            let cat = Tensor::concat_channels(&skips[level], &up);
            let (out, c) = block.forward(&cat, train);
            dec.push(c);
            h = out;
        }
        let logits = self.head.forward(&h);
        let probs = softmax_channels(&logits);
        let cache = SegmentorCache { enc, pools, skip_channels, bottleneck, dec, last: h, probs: probs.clone() };
        (Segmentation { probs, residual }, cache)
    }

    /// Returns `∂L/∂x` given gradients on the probabilities and (optionally)
    /// on the residual code.
    pub fn backward(&mut self, cache: &SegmentorCache<T>, dprobs: &Tensor<T>, dresidual: Option<&Tensor<T>>, param_grads: bool) -> Tensor<T> {
        let depth = self.depth();
        let dlogits = softmax_channels_backward(&cache.probs, dprobs);
        let mut dh = self.head.backward(&cache.last, &dlogits, param_grads, true).expect("dx");
        let mut dskips: Vec<Option<Tensor<T>>> = vec![None; depth.saturating_sub(1)];
        for j in (0..self.decoder.len()).rev() {
            let level = depth - 2 - j;
            let dcat = self.decoder[j].backward(&cache.dec[j], &dh, param_grads);
            let (dskip, dup) = dcat.split_channels(cache.skip_channels[level]);
            dskips[level] = Some(dskip);
            dh = upsample_nearest_backward(&dup, 2);
        }
        if let (Some(rh), Some(dr)) = (self.residual_head.as_mut(), dresidual) {
            let d = rh.backward(&cache.bottleneck, dr, param_grads, true).expect("dx");
            dh.add_assign(&d);
        }
        for i in (0..depth).rev() {
            if i + 1 < depth {
                let (shape, idx) = &cache.pools[i];
                let mut d = maxpool2_backward(*shape, idx, &dh);
                if let Some(ds) = &dskips[i] {
                    d.add_assign(ds);
                }
                dh = d;
            }
            dh = self.encoder[i].backward(&cache.enc[i], &dh, param_grads);
        }
        dh
    }

    /// Folds batch statistics of a training-mode pass into running estimates.
    pub fn commit_batch_stats(&mut self, cache: &SegmentorCache<T>) {
        for (b, c) in self.encoder.iter_mut().zip(&cache.enc) {
            b.commit(c);
        }
        for (b, c) in self.decoder.iter_mut().zip(&cache.dec) {
            b.commit(c);
        }
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm2d<T>> {
        self.encoder.iter().chain(&self.decoder).flat_map(|b| b.norms()).collect()
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        self.encoder.iter_mut().chain(self.decoder.iter_mut()).flat_map(|b| b.norms_mut()).collect()
    }
}

impl<T: Real> Module<T> for Segmentor<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut out: Vec<&Param<T>> = self.encoder.iter().chain(&self.decoder).flat_map(|b| b.params()).collect();
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        if let Some(rh) = &self.residual_head {
            out.push(&rh.weight);
            out.push(&rh.bias);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> =
            self.encoder.iter_mut().chain(self.decoder.iter_mut()).flat_map(|b| b.params_mut()).collect();
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        if let Some(rh) = &mut self.residual_head {
            out.push(&mut rh.weight);
            out.push(&mut rh.bias);
        }
        out
    }
}
