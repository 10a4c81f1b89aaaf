//! DenseNet feature extractor with a 1x1 projection to the model width and
//! a 2-D sinusoidal position encoding.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::nn::{BatchNorm2d, Conv2d, Module, Phase, Visitor};
use crate::numerics::{Conv2dSpec, Float, RngState, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Channels added by each dense layer.
    pub growth_rate: usize,
    /// Dense layers per block.
    pub block_depth: usize,
    pub n_blocks: usize,
    /// Fraction of channels kept by a transition, in `(0, 1]`.
    pub compression: f64,
    pub d_model: usize,
    /// Input channels of the bitmap.
    pub in_channels: usize,
    /// Channels produced by the stride-2 3x3 stem; `0` means `2 * growth_rate`.
    pub stem_channels: usize,
    /// Adds a 1x1 convolution to `4 * growth_rate` channels before each
    /// dense layer's 3x3 convolution.
    pub bottleneck: bool,
    /// Pairs the first encoding half with columns instead of rows.
    pub swap_pos_axes: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            growth_rate: 24,
            block_depth: 16,
            n_blocks: 3,
            compression: 0.5,
            d_model: 256,
            in_channels: 1,
            stem_channels: 0,
            bottleneck: false,
            swap_pos_axes: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.growth_rate == 0 || self.block_depth == 0 || self.n_blocks == 0 || self.in_channels == 0 {
            return bad(format!("encoder extents must be positive: {self:?}"));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return bad(format!("compression {} outside (0, 1]", self.compression));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(4) {
            return bad(format!("d_model {} must be a positive multiple of 4", self.d_model));
        }
        Ok(())
    }

    pub fn stem_out(&self) -> usize {
        if self.stem_channels == 0 {
            2 * self.growth_rate
        } else {
            self.stem_channels
        }
    }

    /// Total spatial reduction: the stem and each transition halve.
    pub fn downsampling(&self) -> usize {
        1 << self.n_blocks
    }
}

#[derive(Clone, Debug)]
pub struct DenseLayer<T: Float = f32> {
    pub bottleneck: Option<(BatchNorm2d<T>, Conv2d<T>)>,
    pub bn: BatchNorm2d<T>,
    pub conv: Conv2d<T>,
}

impl<T: Float> DenseLayer<T> {
    fn new(rng: &mut RngState, c_in: usize, k: usize, bottleneck: bool) -> Result<Self> {
        let (bottleneck, c_mid) = if bottleneck {
            let conv = Conv2d::new(rng, c_in, 4 * k, 1, Conv2dSpec::default(), false)?;
            (Some((BatchNorm2d::new(c_in)?, conv)), 4 * k)
        } else {
            (None, c_in)
        };
        Ok(DenseLayer {
            bottleneck,
            bn: BatchNorm2d::new(c_mid)?,
            conv: Conv2d::new(rng, c_mid, k, 3, Conv2dSpec { stride: 1, padding: 1 }, false)?,
        })
    }

    fn forward(&self, x: &Tensor<T>, phase: &Phase<'_>) -> Result<Tensor<T>> {
        let x = match &self.bottleneck {
            Some((bn, conv)) => conv.forward(&bn.forward(x, phase)?.relu()?)?,
            None => x.clone(),
        };
        Ok(self.conv.forward(&self.bn.forward(&x, phase)?.relu()?)?)
    }
}

impl<T: Float> Module<T> for DenseLayer<T> {
    fn visit(&mut self, v: &mut Visitor<'_, T>) {
        if let Some((bn, conv)) = &mut self.bottleneck {
            v.scope("bottleneck_bn", |v| bn.visit(v));
            v.scope("bottleneck_conv", |v| conv.visit(v));
        }
        v.scope("bn", |v| self.bn.visit(v));
        v.scope("conv", |v| self.conv.visit(v));
    }
}

/// Layers whose outputs are concatenated onto all earlier features.
#[derive(Clone, Debug)]
pub struct DenseBlock<T: Float = f32> {
    pub layers: Vec<DenseLayer<T>>,
    pub c_in: usize,
    pub growth_rate: usize,
}

impl<T: Float> DenseBlock<T> {
    pub fn new(rng: &mut RngState, c_in: usize, growth_rate: usize, depth: usize, bottleneck: bool) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| DenseLayer::new(rng, c_in + i * growth_rate, growth_rate, bottleneck))
            .collect::<Result<_>>()?;
        Ok(DenseBlock { layers, c_in, growth_rate })
    }

    pub fn c_out(&self) -> usize {
        self.c_in + self.layers.len() * self.growth_rate
    }

    /// `[N, C, H, W] -> [N, C + depth * k, H, W]`.
    pub fn forward(&self, x: &Tensor<T>, phase: &Phase<'_>) -> Result<Tensor<T>> {
        let mut features = x.clone();
        for layer in &self.layers {
            let y = layer.forward(&features, phase)?;
            features = Tensor::concat(&[features, y], 1)?;
        }
        Ok(features)
    }
}

impl<T: Float> Module<T> for DenseBlock<T> {
    fn visit(&mut self, v: &mut Visitor<'_, T>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            v.scope(i, |v| l.visit(v));
        }
    }
}

/// BN, ReLU, 1x1 convolution to `floor(compression * C)` channels, then
/// 2x2 average pooling.
#[derive(Clone, Debug)]
pub struct Transition<T: Float = f32> {
    pub bn: BatchNorm2d<T>,
    pub conv: Conv2d<T>,
}

impl<T: Float> Transition<T> {
    pub fn new(rng: &mut RngState, c_in: usize, compression: f64) -> Result<Self> {
        let c_out = (compression * c_in as f64).floor() as usize;
        if c_out == 0 {
            return Err(Error::Config(format!("compression {compression} leaves no channels out of {c_in}")));
        }
        Ok(Transition {
            bn: BatchNorm2d::new(c_in)?,
            conv: Conv2d::new(rng, c_in, c_out, 1, Conv2dSpec::default(), false)?,
        })
    }

    pub fn c_out(&self) -> usize {
        self.conv.c_out()
    }

    pub fn forward(&self, x: &Tensor<T>, phase: &Phase<'_>) -> Result<Tensor<T>> {
        Ok(self.conv.forward(&self.bn.forward(x, phase)?.relu()?)?.avg_pool2d()?)
    }
}

impl<T: Float> Module<T> for Transition<T> {
    fn visit(&mut self, v: &mut Visitor<'_, T>) {
        v.scope("bn", |v| self.bn.visit(v));
        v.scope("conv", |v| self.conv.visit(v));
    }
}

/// Sinusoid at a real-valued position: `[2i] = sin(pos / 10000^(2i/n))`,
/// `[2i+1] = cos(...)`.
pub fn sinusoid(pos: f64, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), n);
    for i in 0..n / 2 {
        let angle = pos / 10000f64.powf(2.0 * i as f64 / n as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    if n % 2 == 1 {
        out[n - 1] = (pos / 10000f64.powf((n - 1) as f64 / n as f64)).sin();
    }
}

/// `[H, W, d]` encoding of grid cell `(x, y)` (row, column) as
/// `[sinusoid(x / H, d/2); sinusoid(y / W, d/2)]`. `swap` pairs the first
/// half with the column instead.
pub fn image_pos_encoding(h: usize, w: usize, d: usize, swap: bool) -> Result<Vec<f64>> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(Error::Config(format!("image position encoding needs d divisible by 4, got {d}")));
    }
    Ok(grid_pos_encoding(h, w, h, w, d, swap))
}

/// Encoded images: what the decoder attends to.
#[derive(Clone, Debug)]
pub struct Memory<T: Float = f32> {
    /// `[batch, S, d_model]`, content plus position, `S = grid.0 * grid.1`.
    pub features: Tensor<T>,
    /// `[batch * S]`, true at positions inside each image's own extent.
    pub key_mask: Arc<Vec<bool>>,
    pub grid: (usize, usize),
    /// Valid grid extent of each image.
    pub extents: Vec<(usize, usize)>,
}

impl<T: Float> Memory<T> {
    pub fn batch(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Memory of a single batch entry, cut from the graph.
    pub fn select(&self, b: usize) -> Result<Memory<T>> {
        let s = self.len();
        Ok(Memory {
            features: self.features.detach().narrow(b, 1)?,
            key_mask: Arc::new(self.key_mask[b * s..(b + 1) * s].to_vec()),
            grid: self.grid,
            extents: vec![self.extents[b]],
        })
    }
}

/// Shapes observed while encoding: `(stage, channels, height, width)`.
pub type ShapeTrace = Vec<(String, usize, usize, usize)>;

#[derive(Clone, Debug)]
pub struct Encoder<T: Float = f32> {
    pub config: EncoderConfig,
    pub stem: Conv2d<T>,
    pub blocks: Vec<DenseBlock<T>>,
    pub transitions: Vec<Transition<T>>,
    pub post_bn: BatchNorm2d<T>,
    pub proj: Conv2d<T>,
}

impl<T: Float> Encoder<T> {
    pub fn new(config: &EncoderConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let stem_spec = Conv2dSpec { stride: 2, padding: 1 };
        let stem = Conv2d::new(rng, config.in_channels, config.stem_out(), 3, stem_spec, false)?;
        let mut c = config.stem_out();
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for i in 0..config.n_blocks {
            let block = DenseBlock::new(rng, c, config.growth_rate, config.block_depth, config.bottleneck)?;
            c = block.c_out();
            blocks.push(block);
            if i + 1 < config.n_blocks {
                let t = Transition::new(rng, c, config.compression)?;
                c = t.c_out();
                transitions.push(t);
            }
        }
        Ok(Encoder {
            config: config.clone(),
            stem,
            blocks,
            transitions,
            post_bn: BatchNorm2d::new(c)?,
            proj: Conv2d::new(rng, c, config.d_model, 1, Conv2dSpec::default(), true)?,
        })
    }

    /// Feature channels entering the projection.
    pub fn feature_channels(&self) -> usize {
        self.blocks.last().map(DenseBlock::c_out).unwrap_or(0)
    }

    /// Encodes `images[B, C, H, W]` whose valid content is the top-left
    /// `extents[b]` rectangle of each entry.
    pub fn encode(&self, images: &Tensor<T>, extents: &[(usize, usize)], phase: &Phase<'_>) -> Result<Memory<T>> {
        self.encode_traced(images, extents, phase, None)
    }

    pub fn encode_traced(
        &self,
        images: &Tensor<T>,
        extents: &[(usize, usize)],
        phase: &Phase<'_>,
        mut trace: Option<&mut ShapeTrace>,
    ) -> Result<Memory<T>> {
        let shape = images.shape().to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels || extents.len() != shape[0] {
            return Err(Error::Config(format!(
                "encoder expects [B, {}, H, W] with B extents, got {shape:?} and {} extents",
                self.config.in_channels,
                extents.len()
            )));
        }
        let f = self.config.downsampling();
        let (h, w) = (shape[2], shape[3]);
        if h < f || w < f {
            return Err(crate::numerics::NumericsError::Dimension(format!(
                "image {h}x{w} smaller than the downsampling factor {f}"
            ))
            .into());
        }
        if extents.iter().any(|&(eh, ew)| eh == 0 || ew == 0 || eh > h || ew > w) {
            return Err(Error::Config(format!("image extents {extents:?} outside {h}x{w}")));
        }
        let mut record = |stage: &str, t: &Tensor<T>| {
            if let Some(tr) = trace.as_deref_mut() {
                let s = t.shape();
                tr.push((stage.to_string(), s[1], s[2], s[3]));
            }
        };
        let halve = |e: &[(usize, usize)]| e.iter().map(|&(a, b)| (a.div_ceil(2), b.div_ceil(2))).collect::<Vec<_>>();

        let mut x = self.stem.forward(images)?;
        let mut ext = halve(extents);
        record("stem", &x);
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x, phase)?;
            record(&format!("block{i}"), &x);
            if let Some(t) = self.transitions.get(i) {
                x = t.forward(&x, phase)?;
                ext = halve(&ext);
                record(&format!("transition{i}"), &x);
            }
        }
        x = self.proj.forward(&self.post_bn.forward(&x, phase)?.relu()?)?;
        record("proj", &x);

        let (b, d, gh, gw) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let s = gh * gw;
        let content = x.reshape(&[b, d, s])?.permute(&[0, 2, 1])?;
        let mut pos = Vec::with_capacity(b * s * d);
        let mut mask = vec![false; b * s];
        for (i, &(eh, ew)) in ext.iter().enumerate() {
            pos.extend(grid_pos_encoding(eh, ew, gh, gw, d, self.config.swap_pos_axes).into_iter().map(T::lit));
            for r in 0..eh {
                mask[i * s + r * gw..i * s + r * gw + ew].fill(true);
            }
        }
        let features = content.add(&Tensor::new(pos, &[b, s, d])?)?;
        Ok(Memory { features, key_mask: Arc::new(mask), grid: (gh, gw), extents: ext })
    }
}

/// Encoding over a full `gh x gw` grid normalized by the valid extent
/// `eh x ew`; cells outside the extent continue the same formula.
fn grid_pos_encoding(eh: usize, ew: usize, gh: usize, gw: usize, d: usize, swap: bool) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0f64; gh * gw * d];
    for x in 0..gh {
        for y in 0..gw {
            let (a, b) = (x as f64 / eh as f64, y as f64 / ew as f64);
            let (first, second) = if swap { (b, a) } else { (a, b) };
            let cell = &mut out[(x * gw + y) * d..(x * gw + y + 1) * d];
            sinusoid(first, half, &mut cell[..half]);
            sinusoid(second, half, &mut cell[half..]);
        }
    }
    out
}

impl<T: Float> Module<T> for Encoder<T> {
    fn visit(&mut self, v: &mut Visitor<'_, T>) {
        v.scope("stem", |v| self.stem.visit(v));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.scope(format!("blocks.{i}"), |v| b.visit(v));
        }
        for (i, t) in self.transitions.iter_mut().enumerate() {
            v.scope(format!("transitions.{i}"), |v| t.visit(v));
        }
        v.scope("post_bn", |v| self.post_bn.visit(v));
        v.scope("proj", |v| self.proj.visit(v));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeros4(n: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::zeros(&[n, c, h, w]).unwrap()
    }

    fn random4(rng: &mut RngState, shape: [usize; 4]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new((0..n).map(|_| rng.uniform(0.0, 1.0)).collect(), &shape).unwrap()
    }

    #[test]
    fn dense_block_channel_arithmetic() {
        let mut rng = RngState::new(1);
        let b = DenseBlock::<f64>::new(&mut rng, 4, 2, 1, false).unwrap();
        let y = b.forward(&random4(&mut rng, [1, 4, 3, 3]), &Phase::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 6, 3, 3]);

        let b = DenseBlock::<f32>::new(&mut rng, 48, 24, 16, false).unwrap();
        let y = b.forward(&Tensor::zeros(&[1, 48, 1, 1]).unwrap(), &Phase::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 432, 1, 1]);
        assert_eq!(b.c_out(), 432);
    }

    #[test]
    fn dense_block_zero_input_gives_constant_interior() {
        let mut rng = RngState::new(2);
        let mut b = DenseBlock::<f64>::new(&mut rng, 3, 4, 3, false).unwrap();
        for l in &mut b.layers {
            let c = l.bn.beta.numel();
            l.bn.beta = Tensor::param(vec![0.5; c], &[c]).unwrap();
        }
        let y = b.forward(&zeros4(1, 3, 9, 9), &Phase::Eval).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
        // Three 3x3 layers: cells at least 3 away from the border see no padding.
        for c in 0..y.shape()[1] {
            let at = |i: usize, j: usize| y.data()[(c * 9 + i) * 9 + j];
            for (i, j) in [(3, 3), (3, 5), (5, 4), (4, 4)] {
                assert_eq!(at(i, j), at(4, 4));
            }
        }
        assert!(y.data()[3 * 81..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn transition_compression_and_pooling() {
        let mut rng = RngState::new(3);
        let t = Transition::<f32>::new(&mut rng, 432, 0.5).unwrap();
        assert_eq!(t.c_out(), 216);
        let y = t.forward(&Tensor::zeros(&[1, 432, 4, 6]).unwrap(), &Phase::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 216, 2, 3]);

        let t = Transition::<f64>::new(&mut rng, 5, 1.0).unwrap();
        let y = t.forward(&zeros4(1, 5, 1, 1), &Phase::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 5, 1, 1]);

        let y = t.forward(&zeros4(1, 5, 7, 5), &Phase::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 5, 4, 3]);
    }

    #[test]
    fn pooled_values_match_reference_loop_on_odd_input() {
        let mut rng = RngState::new(4);
        let x = random4(&mut rng, [1, 1, 5, 3]);
        let y = x.avg_pool2d().unwrap();
        for oi in 0..3 {
            for oj in 0..2 {
                let (mut s, mut c) = (0.0, 0.0);
                for i in 2 * oi..(2 * oi + 2).min(5) {
                    for j in 2 * oj..(2 * oj + 2).min(3) {
                        s += x.data()[i * 3 + j];
                        c += 1.0;
                    }
                }
                assert!((y.data()[oi * 2 + oj] - s / c).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn image_pos_encoding_examples() {
        let pe = image_pos_encoding(4, 6, 16, false).unwrap();
        let origin = &pe[..16];
        for half in origin.chunks(8) {
            for pair in half.chunks(2) {
                assert_eq!(pair, &[0.0, 1.0]);
            }
        }
        for cell in pe.chunks(16) {
            for pair in cell.chunks(2) {
                assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() < 1e-6);
            }
        }
        // Row 1 of 4: first half is the sinusoid at 1/4, second half at 0.
        let cell = &pe[6 * 16..7 * 16];
        assert_eq!(cell[0], 0.25f64.sin());
        assert_eq!(cell[8], 0.0);
        let swapped = image_pos_encoding(4, 6, 16, true).unwrap();
        assert_eq!(&swapped[6 * 16 + 8..7 * 16], &cell[..8]);
        assert!(image_pos_encoding(2, 2, 6, false).is_err());
    }

    #[test]
    fn image_pos_encoding_distinct_on_8x8() {
        let pe = image_pos_encoding(8, 8, 256, false).unwrap();
        let cells: Vec<&[f64]> = pe.chunks(256).collect();
        for i in 0..cells.len() {
            for j in i + 1..cells.len() {
                assert!(cells[i] != cells[j], "cells {i} and {j} coincide");
            }
        }
    }

    fn tiny_config() -> EncoderConfig {
        EncoderConfig { growth_rate: 2, block_depth: 2, n_blocks: 3, d_model: 8, ..Default::default() }
    }

    #[test]
    fn encode_128_grid_and_shape_trace() {
        let mut rng = RngState::new(5);
        let enc = Encoder::<f32>::new(&tiny_config(), &mut rng).unwrap();
        let img = Tensor::zeros(&[1, 1, 128, 128]).unwrap();
        let mut trace = ShapeTrace::new();
        let m = enc.encode_traced(&img, &[(128, 128)], &Phase::Eval, Some(&mut trace)).unwrap();
        assert_eq!(m.grid, (16, 16));
        assert_eq!(m.len(), 256);
        assert_eq!(m.features.shape(), &[1, 256, 8]);
        assert!(m.features.data().iter().all(|v| v.is_finite()));
        assert!(m.key_mask.iter().all(|&v| v));
        let stages: Vec<(usize, usize, usize)> = trace.iter().map(|t| (t.1, t.2, t.3)).collect();
        assert_eq!(
            stages,
            vec![(4, 64, 64), (8, 64, 64), (4, 32, 32), (8, 32, 32), (4, 16, 16), (8, 16, 16), (8, 16, 16)]
        );
        assert!(enc.encode(&Tensor::zeros(&[1, 1, 7, 64]).unwrap(), &[(7, 64)], &Phase::Eval).is_err());
    }

    #[test]
    fn padded_region_is_masked() {
        let mut rng = RngState::new(6);
        let enc = Encoder::<f32>::new(&tiny_config(), &mut rng).unwrap();
        let img = Tensor::zeros(&[2, 1, 40, 72]).unwrap();
        let m = enc.encode(&img, &[(40, 72), (17, 30)], &Phase::Eval).unwrap();
        assert_eq!(m.grid, (5, 9));
        assert_eq!(m.extents, vec![(5, 9), (3, 4)]);
        let s = m.len();
        assert!(m.key_mask[..s].iter().all(|&v| v));
        let second: Vec<bool> = m.key_mask[s..].to_vec();
        for r in 0..5 {
            for c in 0..9 {
                assert_eq!(second[r * 9 + c], r < 3 && c < 4);
            }
        }
    }

    /// Closed-form channel count: stem `2k`, each block adds `D k`, each
    /// transition keeps `floor(theta C)`.
    fn channels_oracle(k: usize, d: usize, blocks: usize, theta: f64) -> usize {
        let mut c = 2 * k;
        for b in 0..blocks {
            c += d * k;
            if b + 1 < blocks {
                c = (theta * c as f64).floor() as usize;
            }
        }
        c
    }

    proptest::proptest! {
        #[test]
        fn channel_counts_follow_closed_form(k in 1usize..6, d in 1usize..4, blocks in 1usize..4, theta in 0.2f64..1.0) {
            proptest::prop_assume!((0..blocks.saturating_sub(1)).all(|b| {
                let mut c = 2 * k;
                for i in 0..=b { c += d * k; if i < b { c = (theta * c as f64).floor() as usize; } }
                (theta * c as f64).floor() >= 1.0
            }));
            let cfg = EncoderConfig { growth_rate: k, block_depth: d, n_blocks: blocks, compression: theta, d_model: 4, ..Default::default() };
            let mut rng = RngState::new(7);
            let enc = Encoder::<f32>::new(&cfg, &mut rng).unwrap();
            let side = 1 << blocks;
            let mut trace = ShapeTrace::new();
            enc.encode_traced(&Tensor::zeros(&[1, 1, side, side]).unwrap(), &[(side, side)], &Phase::Eval, Some(&mut trace)).unwrap();
            let last_block = trace.iter().rev().find(|t| t.0.starts_with("block")).unwrap();
            proptest::prop_assert_eq!(last_block.1, channels_oracle(k, d, blocks, theta));
        }
    }
}
