//! Small neural-network building blocks on top of `candle_core` tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names. Every parameter
//! is initialised from its own RNG stream derived from `(seed, name)`, so the
//! initial values do not depend on construction order.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Mixes several integers into one well-distributed seed (SplitMix64 finalizer).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = splitmix(h);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG stream for a named quantity under a run seed.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Draws `n` standard-normal samples.
pub fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Parameter initialisation scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    Const(f64),
}

impl Init {
    /// PyTorch-style default for a layer with `fan_in` inputs.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in.max(1) as f64).sqrt())
    }

    fn sample(self, rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        match self {
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::Normal(std) => normal_vec(rng, n).into_iter().map(|v| v * std).collect(),
            Init::Const(c) => vec![c; n],
        }
    }
}

/// Creates a tensor of the given dtype on the CPU from `f64` values.
pub fn tensor_from(values: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Copies a tensor of any float dtype into a flat `f64` vector.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Reads a scalar (rank-0 or single-element) tensor as `f64`.
pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    let v = to_f64_vec(t)?;
    if v.len() != 1 {
        return Err(Error::shape(format!("expected a scalar, got {:?}", t.dims())));
    }
    Ok(v[0])
}

/// Named, trainable parameters.
#[derive(Debug)]
pub struct ParamStore {
    seed: u64,
    dtype: DType,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            seed,
            dtype,
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Returns the variable `name`, creating it with `init` on first use.
    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::shape(format!(
                    "parameter `{name}` exists with shape {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n = shape.iter().product();
        let mut rng = named_rng(self.seed, name);
        let t = tensor_from(init.sample(&mut rng, n), shape, self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Snapshot of all values, detached from the graph.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrites parameter values in place. Every stored name must be present.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let src = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if src.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        for name in values.keys() {
            if !self.vars.contains_key(name) {
                return Err(Error::Checkpoint(format!("unexpected parameter `{name}`")));
            }
        }
        Ok(())
    }

    /// Sets a single parameter (used by tests to force weights).
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))?;
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

/// Fully connected layer `y = x Wᵀ + b` applied over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(store, name, d_in, d_out, Init::fan_in(d_in), Init::fan_in(d_in))
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        w_init: Init,
        b_init: Init,
    ) -> Result<Self> {
        let weight = store.get(&format!("{name}.weight"), &[d_out, d_in], w_init)?;
        let bias = store.get(&format!("{name}.bias"), &[d_out], b_init)?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = store.get(&format!("{name}.weight"), &[d_out, d_in], Init::fan_in(d_in))?;
        Ok(Self { weight, bias: None })
    }

    pub fn d_in(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().ok_or_else(|| Error::shape("linear on a scalar"))?;
        if d_in != self.d_in() {
            return Err(Error::shape(format!(
                "linear expects {} input features, got {d_in}",
                self.d_in()
            )));
        }
        let rows = x.elem_count() / d_in.max(1);
        let y = x.reshape((rows, d_in))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.d_out();
        Ok(y.reshape(out_dims)?)
    }

    /// Applies the layer as a 1×1 convolution over `(B, C, H, W)` or `(B, C, P)`.
    pub fn forward_channels(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        if dims.len() < 3 || dims[1] != self.d_in() {
            return Err(Error::shape(format!(
                "1x1 projection expects (B, {}, ...), got {dims:?}",
                self.d_in()
            )));
        }
        let (b, c) = (dims[0], dims[1]);
        let p: usize = dims[2..].iter().product();
        let y = self.weight.broadcast_matmul(&x.reshape((b, c, p))?)?;
        let y = match &self.bias {
            Some(bias) => y.broadcast_add(&bias.reshape((1, self.d_out(), 1))?)?,
            None => y,
        };
        let mut out = dims;
        out[1] = self.d_out();
        Ok(y.reshape(out)?)
    }
}

/// 2-D convolution over `(B, C, H, W)` maps.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = store.get(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            Init::fan_in(fan_in),
        )?;
        let bias = store.get(&format!("{name}.bias"), &[c_out], Init::fan_in(fan_in))?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dims()[0];
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Layer normalisation over the last axis with learned gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub shift: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.get(&format!("{name}.gain"), &[dim], Init::Const(1.0))?,
            shift: store.get(&format!("{name}.shift"), &[dim], Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gain)?.broadcast_add(&self.shift)?)
    }
}

/// Logistic sigmoid in the `tanh` form, whose gradient stays finite for large |x|.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Log-softmax over the last axis.
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((pos + tail)?)
}

/// `(B, C, H, W)` → `(B, H·W, C)`.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
}

/// `(B, H·W, C)` → `(B, C, H, W)`.
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, p, c) = x.dims3()?;
    if p != h * w {
        return Err(Error::shape(format!("{p} tokens cannot form a {h}x{w} grid")));
    }
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// Global L2 norm over a set of tensors.
pub fn global_norm<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Result<f64> {
    let mut total = 0.0;
    for t in tensors {
        total += scalar_f64(&t.sqr()?.sum_all()?)?;
    }
    Ok(total.sqrt())
}
