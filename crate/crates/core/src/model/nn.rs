//! Small layer library on top of candle tensors.
//!
//! Parameters are created through [`ParamStore`], which draws initial values
//! from a seeded ChaCha stream so that two models built from the same seed are
//! bit-identical.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Const(f64),
    Uniform(f64),
    Values(Vec<f64>),
}

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: device.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Contract(format!("parameter `{name}` declared twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(bound) => (0..n)
                .map(|_| self.rng.random_range(-bound..=bound))
                .collect(),
            Init::Values(v) => {
                if v.len() != n {
                    return Err(Error::Contract(format!(
                        "parameter `{name}`: {} initial values for shape {shape:?}",
                        v.len()
                    )));
                }
                v
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites parameter values from a name→tensor map; every parameter
    /// must be present with a matching shape.
    pub fn load(&self, tensors: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks parameter `{name}`")))?;
            if src.dims() != var.dims() {
                return Err(Error::Contract(format!(
                    "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                    var.dims(),
                    src.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        Self::with_init(ps, name, input, output, Init::Uniform(bound), Init::Uniform(bound))
    }

    pub fn with_init(
        ps: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        weight: Init,
        bias: Init,
    ) -> Result<Self> {
        Ok(Self {
            weight: ps.param(&format!("{name}.weight"), &[output, input], weight)?,
            bias: ps.param(&format!("{name}.bias"), &[output], bias)?,
        })
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let input = *dims.last().expect("rank >= 1");
        let rows = x.elem_count() / input;
        let y = x
            .reshape((rows, input))?
            .matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.bias.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

/// Stack of linear layers with ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, name: &str, dims: &[usize]) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, &format!("{name}.{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Like [`Mlp::new`] but zero-initializes the final layer.
    pub fn zero_last(ps: &mut ParamStore, name: &str, dims: &[usize]) -> Result<Self> {
        let n = dims.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for (i, w) in dims.windows(2).enumerate() {
            let lname = format!("{name}.{i}");
            layers.push(if i + 1 == n {
                Linear::with_init(ps, &lname, w[0], w[1], Init::Zeros, Init::Zeros)?
            } else {
                Linear::new(ps, &lname, w[0], w[1])?
            });
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = (input * kernel * kernel) as f64;
        Ok(Self {
            weight: ps.param(
                &format!("{name}.weight"),
                &[output, input, kernel, kernel],
                Init::Uniform((6.0 / fan_in).sqrt()),
            )?,
            bias: ps.param(&format!("{name}.bias"), &[output], Init::Zeros)?,
            stride,
            padding,
        })
    }

    /// NCHW in, NCHW out.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.param(&format!("{name}.gamma"), &[dim], Init::Const(1.0))?,
            beta: ps.param(&format!("{name}.beta"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Numerically stable softmax over the last dimension.
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

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {dim} is not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(ps, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(ps, &format!("{name}.v"), dim, dim)?,
            out: Linear::new(ps, &format!("{name}.out"), dim, dim)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        Ok(x
            .reshape((b, n, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `query` [B, Nq, d], `key`/`value` [B, Nk, d]; `bias` broadcastable to
    /// [B, heads, Nq, Nk] is added to the attention logits.
    pub fn forward(
        &self,
        query: &Tensor,
        key: &Tensor,
        value: &Tensor,
        bias: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (b, nq, d) = query.dims3()?;
        let q = self.split(&self.q.forward(query)?)?;
        let k = self.split(&self.k.forward(key)?)?;
        let v = self.split(&self.v.forward(value)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let mut logits = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        if let Some(bias) = bias {
            logits = logits.broadcast_add(bias)?;
        }
        let attn = softmax_last(&logits)?;
        let ctx = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, nq, d))?;
        self.out.forward(&ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_are_seeded() {
        let dev = Device::Cpu;
        let mut a = ParamStore::new(DType::F64, &dev, 3);
        let mut b = ParamStore::new(DType::F64, &dev, 3);
        let ta = a.param("w", &[4, 4], Init::Uniform(1.0)).unwrap();
        let tb = b.param("w", &[4, 4], Init::Uniform(1.0)).unwrap();
        assert_eq!(
            ta.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            tb.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
        assert!(a.param("w", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn softmax_and_log_softmax_agree() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [100.0, 100.0, 100.0]], &Device::Cpu).unwrap();
        let p = softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        let lp = log_softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        for (pr, lr) in p.iter().zip(&lp) {
            assert!((pr.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in pr.iter().zip(lr) {
                assert!((a.ln() - b).abs() < 1e-12);
            }
        }
        assert!((p[1][0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softplus_is_stable() {
        let x = Tensor::new(&[-800.0f64, 0.0, 800.0], &Device::Cpu).unwrap();
        let y = softplus(&x).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(y[2], 800.0);
    }

    #[test]
    fn linear_handles_batched_input() {
        let mut ps = ParamStore::new(DType::F64, &Device::Cpu, 0);
        let l = Linear::new(&mut ps, "l", 3, 2).unwrap();
        let x = Tensor::ones((4, 5, 3), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(l.forward(&x).unwrap().dims(), &[4, 5, 2]);
    }
}
