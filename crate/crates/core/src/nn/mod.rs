//! Small channels-last layer toolkit on top of candle tensors.
//!
//! All spatial tensors are laid out `(B, H, W, C)`. Parameters live in a
//! [`ParamStore`] under dotted names; the store doubles as the checkpoint
//! payload.

mod batchnorm;
mod im2col;
mod layers;

pub use im2col::{im2col, PatchGeometry};
pub use layers::{BatchNorm, Conv2d, Dropout, Embedding, GruCell, Linear};

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, WithDType, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Forward-pass mode. Training mode carries the dropout RNG.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

pub struct ParamStore {
    device: Device,
    dtype: DType,
    params: Vec<(String, Var)>,
    buffers: Vec<(String, Var)>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            device: Device::Cpu,
            dtype,
            params: Vec::new(),
            buffers: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Trainable parameters in creation order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> &[(String, Var)] {
        &self.buffers
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params
            .iter()
            .chain(&self.buffers)
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    pub fn all(&self) -> impl Iterator<Item = &(String, Var)> {
        self.params.iter().chain(&self.buffers)
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Trainable scalar count for names starting with `prefix`.
    pub fn num_trainable_under(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }
}

pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Scope<'_> {
    pub fn pp(&mut self, name: impl AsRef<str>) -> Scope<'_> {
        Scope {
            prefix: self.path(name.as_ref()),
            store: self.store,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    fn from_fn(&mut self, shape: Shape, mut f: impl FnMut(&mut ChaCha8Rng) -> f64) -> Result<Tensor> {
        let n = shape.elem_count();
        let rng = &mut self.store.rng;
        let data: Vec<f64> = (0..n).map(|_| f(rng)).collect();
        Ok(Tensor::from_vec(data, shape, &self.store.device)?.to_dtype(self.store.dtype)?)
    }

    fn register(&mut self, name: &str, t: Tensor, trainable: bool) -> Result<Var> {
        let full = self.path(name);
        if self.store.all().any(|(n, _)| *n == full) {
            return Err(Error::Config(format!("duplicate parameter {full}")));
        }
        let var = Var::from_tensor(&t)?;
        let list = if trainable {
            &mut self.store.params
        } else {
            &mut self.store.buffers
        };
        list.push((full, var.clone()));
        Ok(var)
    }

    pub fn uniform(&mut self, name: &str, shape: impl Into<Shape>, bound: f64) -> Result<Var> {
        let t = self.from_fn(shape.into(), |r| r.random_range(-bound..=bound))?;
        self.register(name, t, true)
    }

    pub fn normal(&mut self, name: &str, shape: impl Into<Shape>, std: f64) -> Result<Var> {
        // Box-Muller keeps initialisation tied to the store seed.
        let t = self.from_fn(shape.into(), |r| {
            let u1: f64 = r.random_range(f64::EPSILON..1.0);
            let u2: f64 = r.random();
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })?;
        self.register(name, t, true)
    }

    pub fn constant(&mut self, name: &str, shape: impl Into<Shape>, value: f64) -> Result<Var> {
        let t = self.from_fn(shape.into(), |_| value)?;
        self.register(name, t, true)
    }

    pub fn buffer(&mut self, name: &str, shape: impl Into<Shape>, value: f64) -> Result<Var> {
        let t = self.from_fn(shape.into(), |_| value)?;
        self.register(name, t, false)
    }
}

struct Sigmoid;

fn sigmoid_slice<T: WithDType>(v: &[T]) -> Vec<T> {
    v.iter()
        .map(|&x| {
            let x = x.to_f64();
            let s = if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            };
            T::from_f64(s)
        })
        .collect()
}

impl CustomOp1 for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("sigmoid needs contiguous input".into()))?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(sigmoid_slice(&v[start..end])),
            CpuStorage::F64(v) => CpuStorage::F64(sigmoid_slice(&v[start..end])),
            _ => candle_core::bail!("sigmoid supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let local = (res * (1.0 - res)?)?;
        Ok(Some((grad_res * local)?))
    }
}

/// Numerically stable logistic function with an analytic backward pass.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Sigmoid)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Softmax over the last axis restricted to positions where `mask` is 1;
/// masked positions get exactly zero weight.
pub fn masked_softmax_last(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let floor = Tensor::full(-1e30f64, x.shape(), x.device())?.to_dtype(x.dtype())?;
    let keep = mask.ne(0.0)?;
    let kept = keep.where_cond(x, &floor)?;
    let max = kept.max_keepdim(D::Minus1)?.detach();
    let e = (kept.broadcast_sub(&max)?.exp()? * mask)?;
    let denom = (e.sum_keepdim(D::Minus1)? + 1e-30)?;
    Ok(e.broadcast_div(&denom)?)
}

/// 2x2 max pooling with stride 2 on `(B, H, W, C)`.
pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let r = x.reshape((b, h / 2, 2, w / 2, 2, c))?;
    Ok(r.max(4)?.max(2)?)
}

/// 2x2 average pooling with stride 2 on `(B, H, W, C)`.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let r = x.reshape((b, h / 2, 2, w / 2, 2, c))?;
    Ok((r.sum(4)?.sum(2)? * 0.25)?)
}

/// Downsamples a `(B, H, W)` validity mask: a cell is valid if any source
/// pixel in its window is valid.
pub fn downsample_mask(mask: &[f32], b: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0f32; b * ho * wo];
    for bi in 0..b {
        for y in 0..ho {
            for x in 0..wo {
                let mut v = 0f32;
                for dy in 0..2 {
                    for dx in 0..2 {
                        v = v.max(mask[(bi * h + 2 * y + dy) * w + 2 * x + dx]);
                    }
                }
                out[(bi * ho + y) * wo + x] = v;
            }
        }
    }
    out
}

/// Inverted-dropout keep mask drawn from `rng`, scaled by `1 / (1 - p)`.
pub fn dropout_mask(rng: &mut ChaCha8Rng, shape: &Shape, p: f64, like: &Tensor) -> Result<Tensor> {
    let scale = 1.0 / (1.0 - p);
    let data: Vec<f64> = (0..shape.elem_count())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
        .collect();
    Ok(Tensor::from_vec(data, shape.clone(), like.device())?.to_dtype(like.dtype())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_stable_and_bounded() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[-1000f32, -5.0, 0.0, 5.0, 1000.0], &dev).unwrap();
        let s: Vec<f32> = sigmoid(&x).unwrap().to_vec1().unwrap();
        assert_eq!(s[2], 0.5);
        assert!(s.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        assert!((s[3] - 0.993_307_2).abs() < 1e-6);
    }

    #[test]
    fn sigmoid_gradient_matches_closed_form() {
        let dev = Device::Cpu;
        let x = Var::new(&[-2f64, 0.3, 4.0], &dev).unwrap();
        let g = sigmoid(x.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        let g: Vec<f64> = g.get(x.as_tensor()).unwrap().to_vec1().unwrap();
        for (gi, xi) in g.iter().zip([-2f64, 0.3, 4.0]) {
            let s = 1.0 / (1.0 + (-xi).exp());
            assert!((gi - s * (1.0 - s)).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[[1f64, 1.0, 50.0, 1.0, 1.0]], &dev).unwrap();
        let m = Tensor::new(&[[1f64, 1.0, 0.0, 1.0, 1.0]], &dev).unwrap();
        let a: Vec<Vec<f64>> = masked_softmax_last(&x, &m).unwrap().to_vec2().unwrap();
        assert_eq!(a[0][2], 0.0);
        for i in [0, 1, 3, 4] {
            assert!((a[0][i] - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_shapes_and_values() {
        let dev = Device::Cpu;
        let x = Tensor::arange(0f32, 16.0, &dev).unwrap().reshape((1, 4, 4, 1)).unwrap();
        let m: Vec<f32> = max_pool2(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(m, vec![5.0, 7.0, 13.0, 15.0]);
        let a: Vec<f32> = avg_pool2(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, vec![2.5, 4.5, 10.5, 12.5]);
        let mask = downsample_mask(&[1., 1., 1., 0., 1., 1., 0., 0.], 1, 2, 4);
        assert_eq!(mask, vec![1.0, 1.0]);
    }

    #[test]
    fn store_is_seeded() {
        let make = |seed| {
            let mut s = ParamStore::new(DType::F32, seed);
            s.root().pp("a").uniform("w", (3, 2), 1.0).unwrap();
            s.params()[0].1.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        assert_eq!(make(3), make(3));
        assert_ne!(make(3), make(4));
        let mut s = ParamStore::new(DType::F32, 0);
        let mut root = s.root();
        root.pp("x").buffer("b", 2, 0.0).unwrap();
        assert!(root.pp("x").buffer("b", 2, 0.0).is_err());
    }
}
