use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// How instance embeddings become one bag representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Learned softmax weights `a = softmax(wᵀ tanh(V hᵀ))`.
    Attn,
    /// Uniform weights `1/K`.
    Mean,
    /// Head applied to each instance; predictions averaged.
    Instance,
    /// Raw features scaled by the instance corn ratio, then mean-pooled.
    Manual,
}

impl Pooling {
    pub const ALL: [Pooling; 4] = [Pooling::Attn, Pooling::Mean, Pooling::Instance, Pooling::Manual];

    pub fn name(self) -> &'static str {
        match self {
            Pooling::Attn => "attn",
            Pooling::Mean => "mean",
            Pooling::Instance => "instance",
            Pooling::Manual => "manual",
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pooling::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown pooling {s:?}")))
    }
}

/// Layer widths that do not depend on the data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    /// M
    pub embed_dim: usize,
    /// L
    pub attention_dim: usize,
    /// d_K
    pub qkv_dim: usize,
    pub use_qkv: bool,
    pub head_hidden: Vec<usize>,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            attention_dim: 16,
            qkv_dim: 16,
            use_qkv: false,
            head_hidden: vec![16],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    #[serde(flatten)]
    pub dims: ModelDims,
    pub pooling: Pooling,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(input_dim: usize, dims: ModelDims, pooling: Pooling, seed: u64) -> Self {
        Self {
            input_dim,
            dims,
            pooling,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        let named = [
            ("input_dim", self.input_dim),
            ("embed_dim", d.embed_dim),
            ("attention_dim", d.attention_dim),
            ("qkv_dim", d.qkv_dim),
        ];
        for (name, v) in named {
            if v == 0 {
                return Err(Error::Spec(format!("{name} must be at least 1")));
            }
        }
        if d.head_hidden.contains(&0) {
            return Err(Error::Spec("head_hidden widths must be at least 1".into()));
        }
        Ok(())
    }

    /// Name and shape of every parameter, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = &self.dims;
        let m = d.embed_dim;
        let mut out = vec![
            ("embed.weight".to_string(), vec![self.input_dim, m]),
            ("embed.bias".to_string(), vec![1, m]),
        ];
        if d.use_qkv {
            for (name, width) in [("query", d.qkv_dim), ("key", d.qkv_dim), ("value", m)] {
                out.push((format!("{name}.weight"), vec![m, width]));
                out.push((format!("{name}.bias"), vec![1, width]));
            }
        }
        if self.pooling == Pooling::Attn {
            out.push(("pool.v".to_string(), vec![d.attention_dim, m]));
            out.push(("pool.w".to_string(), vec![d.attention_dim, 1]));
        }
        let mut fan_in = m;
        for (i, &width) in d.head_hidden.iter().chain(std::iter::once(&1)).enumerate() {
            out.push((format!("head.{i}.weight"), vec![fan_in, width]));
            out.push((format!("head.{i}.bias"), vec![1, width]));
            fan_in = width;
        }
        out
    }

    pub fn head_layers(&self) -> usize {
        self.dims.head_hidden.len() + 1
    }
}

/// Named tensors in [`ModelSpec::layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl Parameters {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index(name).map(|i| &mut self.tensors[i])
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// 64-bit FNV-1a.
fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Weights uniform in ±1/√fan_in, biases zero.
///
/// Each tensor draws from its own stream keyed by its name, so two specs
/// that differ only in pooling start from identical shared layers.
pub fn init(spec: &ModelSpec) -> Result<Parameters> {
    spec.validate()?;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape) in spec.layout() {
        let t = if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            // pool.v is stored L×M and applied as V·hᵀ, so its fan-in is M
            let fan_in = shape[usize::from(name == "pool.v")];
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(fnv1a(&name));
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
            Tensor::new(shape, data)?
        };
        names.push(name);
        tensors.push(t);
    }
    Ok(Parameters { names, tensors })
}
