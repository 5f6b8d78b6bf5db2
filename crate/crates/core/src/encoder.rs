//! DenseNet backbone producing the `H/16 x W/16` feature map shared by the
//! counting module and the decoder.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{downsample_mask, max_pool2, avg_pool2, BatchNorm, Conv2d, Mode, Scope};

pub const DOWNSAMPLE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub blocks: usize,
    pub layers_per_block: usize,
    pub growth: usize,
    /// Bottleneck width as a multiple of the growth rate.
    pub bottleneck: usize,
    pub compression: f64,
    pub out_channels: usize,
}

impl EncoderConfig {
    /// 3 x 16 layers, growth 24: 300 + 16 * 24 = 684 output channels.
    pub fn full() -> Self {
        Self {
            stem_channels: 48,
            stem_kernel: 7,
            blocks: 3,
            layers_per_block: 16,
            growth: 24,
            bottleneck: 4,
            compression: 0.5,
            out_channels: 684,
        }
    }

    pub fn desk() -> Self {
        Self {
            stem_channels: 48,
            stem_kernel: 7,
            blocks: 3,
            layers_per_block: 4,
            growth: 12,
            bottleneck: 4,
            compression: 0.5,
            out_channels: 128,
        }
    }

    /// Channel width entering each block, and the width after the last block.
    /// A 1x1 projection maps the latter onto `out_channels` when they differ.
    pub fn block_widths(&self) -> (Vec<usize>, usize) {
        let mut widths = Vec::with_capacity(self.blocks);
        let mut c = self.stem_channels;
        for b in 0..self.blocks {
            widths.push(c);
            c += self.layers_per_block * self.growth;
            if b + 1 < self.blocks {
                c = (c as f64 * self.compression).floor() as usize;
            }
        }
        (widths, c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks != 3 {
            return Err(Error::Config(format!(
                "encoder needs 3 dense blocks for a x16 reduction, got {}",
                self.blocks
            )));
        }
        if self.stem_kernel.is_multiple_of(2) || self.growth == 0 || self.layers_per_block == 0 {
            return Err(Error::Config("invalid encoder layer geometry".into()));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::Config("compression must lie in (0, 1]".into()));
        }
        if self.out_channels == 0 {
            return Err(Error::Config("out_channels must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder output: `values` is `(B, H, W, D)`, `mask` is `(B, H, W, 1)` with
/// padding cells zeroed in `values`.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub values: Tensor,
    pub mask: Tensor,
}

impl FeatureMap {
    pub fn new(values: Tensor, mask: Tensor) -> Result<Self> {
        let values = values.broadcast_mul(&mask)?;
        Ok(Self { values, mask })
    }

    pub fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        Ok(self.values.dims4()?)
    }

    /// Flattened `(B, H*W, D)` view.
    pub fn flat(&self) -> Result<Tensor> {
        let (b, h, w, d) = self.dims()?;
        Ok(self.values.reshape((b, h * w, d))?)
    }

    /// Flattened `(B, H*W)` validity mask.
    pub fn flat_mask(&self) -> Result<Tensor> {
        let (b, h, w, _) = self.dims()?;
        Ok(self.mask.reshape((b, h * w))?)
    }

    /// Spatial mean over valid cells, `(B, D)`.
    pub fn masked_mean(&self) -> Result<Tensor> {
        let flat = self.flat()?;
        let m = self.flat_mask()?.unsqueeze(D::Minus1)?;
        let total = flat.broadcast_mul(&m)?.sum(1)?;
        let count = m.sum(1)?;
        Ok(total.broadcast_div(&count)?)
    }
}

struct DenseLayer {
    bn1: BatchNorm,
    conv1: Conv2d,
    bn2: BatchNorm,
    conv2: Conv2d,
}

impl DenseLayer {
    fn forward(&self, x: &Tensor, mask: &Tensor, mode: &Mode<'_>) -> Result<Tensor> {
        let y = self.bn1.forward(x, mask, mode)?.relu()?;
        let y = self.conv1.forward(&y)?;
        let y = self.bn2.forward(&y, mask, mode)?.relu()?;
        let y = self.conv2.forward(&y)?;
        Ok(Tensor::cat(&[x, &y], 3)?)
    }
}

struct Transition {
    bn: BatchNorm,
    conv: Conv2d,
}

pub struct Encoder {
    config: EncoderConfig,
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    projection: Option<Transition>,
}

impl Encoder {
    pub fn new(scope: &mut Scope<'_>, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let stem = Conv2d::new(&mut scope.pp("stem"), 1, config.stem_channels, config.stem_kernel, 2, false)?;
        let stem_bn = BatchNorm::new(&mut scope.pp("stem_bn"), config.stem_channels)?;
        let (widths, last) = config.block_widths();
        let inner = config.bottleneck * config.growth;
        let mut blocks = Vec::with_capacity(config.blocks);
        let mut transitions = Vec::new();
        for (b, &width) in widths.iter().enumerate() {
            let mut layers = Vec::with_capacity(config.layers_per_block);
            let mut c = width;
            for l in 0..config.layers_per_block {
                let mut s = scope.pp(format!("block{b}.layer{l}"));
                layers.push(DenseLayer {
                    bn1: BatchNorm::new(&mut s.pp("bn1"), c)?,
                    conv1: Conv2d::new(&mut s.pp("conv1"), c, inner, 1, 1, false)?,
                    bn2: BatchNorm::new(&mut s.pp("bn2"), inner)?,
                    conv2: Conv2d::new(&mut s.pp("conv2"), inner, config.growth, 3, 1, false)?,
                });
                c += config.growth;
            }
            blocks.push(layers);
            if b + 1 < config.blocks {
                let out = (c as f64 * config.compression).floor() as usize;
                let mut s = scope.pp(format!("transition{b}"));
                transitions.push(Transition {
                    bn: BatchNorm::new(&mut s.pp("bn"), c)?,
                    conv: Conv2d::new(&mut s.pp("conv"), c, out, 1, 1, false)?,
                });
            }
        }
        let projection = if last == config.out_channels {
            None
        } else {
            let mut s = scope.pp("projection");
            Some(Transition {
                bn: BatchNorm::new(&mut s.pp("bn"), last)?,
                conv: Conv2d::new(&mut s.pp("conv"), last, config.out_channels, 1, 1, false)?,
            })
        };
        Ok(Self {
            config: config.clone(),
            stem,
            stem_bn,
            blocks,
            transitions,
            projection,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// `images` and `mask` are `(B, H', W', 1)` with `H'`, `W'` multiples of 16.
    pub fn encode(&self, images: &Tensor, mask: &Tensor, mode: &Mode<'_>) -> Result<FeatureMap> {
        let (b, h, w, c) = images.dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!("expected 1 input channel, got {c}")));
        }
        if h == 0 || w == 0 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not a positive multiple of {DOWNSAMPLE}"
            )));
        }
        if mask.dims4()? != (b, h, w, 1) {
            return Err(Error::Shape("mask shape differs from image batch".into()));
        }
        let dtype = images.dtype();
        let dev = images.device();
        let masks = {
            let base: Vec<f32> = mask.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
            let mut pyramid = vec![base];
            let (mut hh, mut ww) = (h, w);
            for _ in 0..4 {
                let next = downsample_mask(pyramid.last().expect("non-empty"), b, hh, ww);
                hh /= 2;
                ww /= 2;
                pyramid.push(next);
            }
            pyramid
                .into_iter()
                .enumerate()
                .map(|(level, m)| {
                    let s = 1 << level;
                    Tensor::from_vec(m, (b, h / s, w / s, 1), dev)?.to_dtype(dtype)
                })
                .collect::<candle_core::Result<Vec<_>>>()?
        };

        let x = images.broadcast_mul(&masks[0])?;
        let x = self.stem.forward(&x)?;
        let x = self.stem_bn.forward(&x, &masks[1], mode)?.relu()?;
        let mut x = max_pool2(&x)?;
        for (i, block) in self.blocks.iter().enumerate() {
            let m = &masks[2 + i];
            for layer in block {
                x = layer.forward(&x, m, mode)?;
            }
            if let Some(t) = self.transitions.get(i) {
                let y = t.bn.forward(&x, m, mode)?.relu()?;
                x = avg_pool2(&t.conv.forward(&y)?)?;
            }
        }
        if let Some(p) = &self.projection {
            let y = p.bn.forward(&x, &masks[4], mode)?.relu()?;
            x = p.conv.forward(&y)?;
        }
        FeatureMap::new(x, masks[4].clone())
    }

    /// Analytic multiply-accumulate count at input `h x w` (multiples of 16).
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (mut hh, mut ww) = (h / 2, w / 2);
        let mut total = self.stem.macs(hh, ww);
        hh /= 2;
        ww /= 2;
        for (i, block) in self.blocks.iter().enumerate() {
            for layer in block {
                total += layer.conv1.macs(hh, ww) + layer.conv2.macs(hh, ww);
            }
            if let Some(t) = self.transitions.get(i) {
                total += t.conv.macs(hh, ww);
                hh /= 2;
                ww /= 2;
            }
        }
        if let Some(p) = &self.projection {
            total += p.conv.macs(hh, ww);
        }
        total
    }
}
