//! Small neural building blocks on top of candle.
//!
//! Everything here is composed from primitive tensor ops so that gradients
//! flow to inputs as well as parameters (the fused candle kernels for
//! softmax and layer norm have no backward pass).

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Shape, Tensor, Var, D};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, Linear, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Element type used for every tensor in the crate.
pub const DTYPE: DType = DType::F64;

pub fn device() -> Device {
    Device::Cpu
}

/// Deterministic RNG derived from a seed and a label.
pub fn labeled_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

pub fn randn_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Standard normal tensor drawn from a seeded generator.
pub fn randn(rng: &mut impl Rng, shape: impl Into<Shape>) -> Result<Tensor> {
    let shape = shape.into();
    let data = randn_vec(rng, shape.elem_count());
    Ok(Tensor::from_vec(data, shape, &device())?)
}

fn init_values(init: Init, shape: &Shape, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = shape.elem_count();
    match init {
        Init::Const(v) => vec![v; n],
        Init::Uniform { lo, up } => (0..n).map(|_| rng.random_range(lo..up)).collect(),
        Init::Randn { mean, stdev } => randn_vec(rng, n).into_iter().map(|v| mean + stdev * v).collect(),
        Init::Kaiming {
            dist,
            fan,
            non_linearity,
        } => {
            let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
            match dist {
                candle_nn::init::NormalOrUniform::Uniform => {
                    let bound = 3f64.sqrt() * std;
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                candle_nn::init::NormalOrUniform::Normal => {
                    randn_vec(rng, n).into_iter().map(|v| std * v).collect()
                }
            }
        }
    }
}

/// Parameter storage whose initial values depend only on `(seed, name)`.
#[derive(Clone)]
pub struct ParamStore {
    varmap: VarMap,
    seed: u64,
}

struct SeededBackend {
    varmap: VarMap,
    seed: u64,
}

impl SimpleBackend for SeededBackend {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let mut data = self.varmap.data().lock().unwrap();
        if let Some(var) = data.get(name) {
            if var.shape() != &s {
                candle_core::bail!("shape mismatch for {name}: {:?} vs {:?}", var.shape(), s);
            }
            return Ok(var.as_tensor().clone());
        }
        let mut rng = labeled_rng(self.seed, name);
        let values = init_values(h, &s, &mut rng);
        let var = Var::from_tensor(&Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?)?;
        let t = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(t)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        let data = self.varmap.data().lock().unwrap();
        match data.get(name) {
            Some(v) => Ok(v.as_tensor().clone()),
            None => candle_core::bail!("unknown parameter {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.varmap.data().lock().unwrap().contains_key(name)
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            varmap: VarMap::new(),
            seed,
        }
    }

    pub fn var_builder(&self) -> VarBuilder<'static> {
        let backend: Box<dyn SimpleBackend> = Box::new(SeededBackend {
            varmap: self.varmap.clone(),
            seed: self.seed,
        });
        VarBuilder::from_backend(backend, DTYPE, device())
    }

    pub fn all_vars(&self) -> Vec<Var> {
        let data = self.varmap.data().lock().unwrap();
        let mut named: Vec<_> = data.iter().collect();
        named.sort_by(|a, b| a.0.cmp(b.0));
        named.into_iter().map(|(_, v)| v.clone()).collect()
    }

    /// Vars whose name starts with `prefix`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        let data = self.varmap.data().lock().unwrap();
        let mut named: Vec<_> = data.iter().filter(|(k, _)| k.starts_with(prefix)).collect();
        named.sort_by(|a, b| a.0.cmp(b.0));
        named.into_iter().map(|(_, v)| v.clone()).collect()
    }

    /// Snapshot of all parameters, sorted by name.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let data = self.varmap.data().lock().unwrap();
        data.iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().copy().expect("cpu copy")))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.varmap.data().lock().unwrap().values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites stored parameters from `tensors`. With `prefix_map =
    /// Some((ours, theirs))` only parameters under `ours` are loaded, read
    /// from the matching name under `theirs`.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>, prefix_map: Option<(&str, &str)>) -> Result<usize> {
        let data = self.varmap.data().lock().unwrap();
        let mut loaded = 0;
        for (name, var) in data.iter() {
            let source = match prefix_map {
                Some((ours, theirs)) => match name.strip_prefix(ours) {
                    Some(rest) => format!("{theirs}{rest}"),
                    None => continue,
                },
                None => name.clone(),
            };
            let t = tensors
                .get(&source)
                .ok_or_else(|| Error::MissingInput(format!("parameter {source} not in checkpoint")))?;
            if t.shape() != var.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name}: stored {:?}, expected {:?}",
                    t.shape(),
                    var.shape()
                )));
            }
            var.set(&t.to_dtype(DTYPE)?)?;
            loaded += 1;
        }
        Ok(loaded)
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu()?)
}

/// Numerically stable `log(sigmoid(x))`.
pub fn log_sigmoid(x: &Tensor) -> Result<Tensor> {
    let neg_abs = x.abs()?.neg()?;
    let softplus = (neg_abs.exp()? + 1.0)?.log()?;
    Ok((x.minimum(0.0)? - softplus)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(log_sigmoid(x)?.exp()?)
}

/// Softmax over the last dimension built from differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Layer norm over the last dimension.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(LayerNorm {
            weight: vb.get_with_hints(dim, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(dim, "bias", Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Group norm for `[N, C, H, W]` feature maps.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(groups: usize, channels: usize, vb: VarBuilder) -> Result<Self> {
        if !channels.is_multiple_of(groups) {
            return Err(Error::InvalidArgument(format!("{channels} channels not divisible into {groups} groups")));
        }
        Ok(GroupNorm {
            weight: vb.get_with_hints(channels, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(channels, "bias", Init::Const(0.0))?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let g = x.reshape((n, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let gc = g.broadcast_sub(&mean)?;
        let var = gc.sqr()?.mean_keepdim(D::Minus1)?;
        let gn = gc.broadcast_div(&(var + self.eps)?.sqrt()?)?.reshape((n, c, h, w))?;
        let wgt = self.weight.reshape((1, c, 1, 1))?;
        let b = self.bias.reshape((1, c, 1, 1))?;
        Ok(gn.broadcast_mul(&wgt)?.broadcast_add(&b)?)
    }
}

/// Multi-head attention; queries `[N, Lq, D]`, keys/values `[N, Lk, Dk]`.
#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dim: usize,
}

impl Attention {
    pub fn new(dim: usize, kv_dim: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        if !dim.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Attention {
            q: candle_nn::linear_no_bias(dim, dim, vb.pp("q"))?,
            k: candle_nn::linear_no_bias(kv_dim, dim, vb.pp("k"))?,
            v: candle_nn::linear_no_bias(kv_dim, dim, vb.pp("v"))?,
            o: zero_linear(dim, dim, vb.pp("o"))?,
            heads,
            dim,
        })
    }

    /// Same as [`Attention::new`] but with a randomly initialized output
    /// projection, for layers that should contribute from the first step.
    pub fn new_live(dim: usize, kv_dim: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        let mut a = Self::new(dim, kv_dim, heads, vb.clone())?;
        a.o = candle_nn::linear(dim, dim, vb.pp("o_live"))?;
        Ok(a)
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (n, l, _) = x.dims3()?;
        let hd = self.dim / self.heads;
        Ok(x.reshape((n, l, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
    }

    pub fn forward(&self, xq: &Tensor, xkv: &Tensor) -> Result<Tensor> {
        let (n, lq, _) = xq.dims3()?;
        let hd = self.dim / self.heads;
        let q = self.split(&self.q.forward(xq)?)?;
        let k = self.split(&self.k.forward(xkv)?)?;
        let v = self.split(&self.v.forward(xkv)?)?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (hd as f64).sqrt())?;
        let attn = softmax_last(&scores)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((n, lq, self.dim))?;
        Ok(self.o.forward(&out)?)
    }
}

/// Linear layer whose weights start at zero.
pub fn zero_linear(inp: usize, out: usize, vb: VarBuilder) -> Result<Linear> {
    let w = vb.get_with_hints((out, inp), "weight", Init::Const(0.0))?;
    let b = vb.get_with_hints(out, "bias", Init::Const(0.0))?;
    Ok(Linear::new(w, Some(b)))
}

/// Sinusoidal embedding of (possibly fractional) timesteps, `[N] -> [N, dim]`.
pub fn timestep_embedding(t: &Tensor, dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64).ln() * i as f64 / half as f64).exp())
        .collect();
    let freqs = Tensor::from_vec(freqs, (1, half), t.device())?.to_dtype(t.dtype())?;
    let args = t.unsqueeze(1)?.broadcast_mul(&freqs)?;
    Ok(Tensor::cat(&[args.cos()?, args.sin()?], 1)?)
}

/// Extracts a tensor's values as a flat `Vec<f64>`.
pub fn to_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let v = to_vec(t)?;
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("{what}: non-finite value {} at flat index {i}", v[i])));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_params_are_reproducible() {
        let a = ParamStore::new(7);
        let b = ParamStore::new(7);
        let la = candle_nn::linear(4, 3, a.var_builder().pp("l")).unwrap();
        let lb = candle_nn::linear(4, 3, b.var_builder().pp("l")).unwrap();
        assert_eq!(to_vec(la.weight()).unwrap(), to_vec(lb.weight()).unwrap());
        let c = ParamStore::new(8);
        let lc = candle_nn::linear(4, 3, c.var_builder().pp("l")).unwrap();
        assert_ne!(to_vec(la.weight()).unwrap(), to_vec(lc.weight()).unwrap());
    }

    #[test]
    fn log_sigmoid_matches_direct_formula() {
        let x = Tensor::new(&[-30.0f64, -1.0, 0.0, 2.0, 40.0], &device()).unwrap();
        let got = to_vec(&log_sigmoid(&x).unwrap()).unwrap();
        for (g, xv) in got.iter().zip([-30.0f64, -1.0, 0.0, 2.0, 40.0]) {
            let expect = -(1.0 + (-xv).exp()).ln();
            assert!((g - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_backprop_reaches_input() {
        let x = Var::from_tensor(&Tensor::new(&[[1.0f64, 2.0, 3.0], [0.0, -1.0, 5.0]], &device()).unwrap()).unwrap();
        let s = softmax_last(x.as_tensor()).unwrap();
        for row in s.to_vec2::<f64>().unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let loss = s.sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(x.as_tensor()).is_some());
    }
}
