//! Attention-pooled multiple-instance regressor and its pooling variants.
//!
//! The pipeline is `embed → [QKV self-attention] → pooling → head`, where
//! embedding and head layers use `tanh`. Pooling turns the `K × M` instance
//! representations of a bag into one `1 × M` vector; see [`Pooling`].
//!
//! ```
//! use milgrain::model::{forward, init, ModelDims, ModelSpec, Pooling};
//! use milgrain::synthgeo::random_dataset;
//!
//! let data = random_dataset(1, 5, 3, 0);
//! let spec = ModelSpec::new(3, ModelDims::default(), Pooling::Attn, 7);
//! let params = init(&spec).unwrap();
//! let out = forward(&data.bags[0], &params, &spec).unwrap();
//! assert_eq!(out.attention.len(), 5);
//! assert!((out.attention.iter().sum::<f64>() - 1.0).abs() < 1e-12);
//! ```

mod checkpoint;
mod graph;
mod spec;

pub use checkpoint::{Checkpoint, LabelStats, NamedTensor, CHECKPOINT_MAGIC};
pub use graph::{batch_loss, bind, forward_batch, mse_loss, self_attention, BatchOutput};
pub use spec::{init, ModelDims, ModelSpec, Parameters, Pooling};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::synthgeo::Bag;

/// Prediction for one bag plus what the analysis needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub prediction: f64,
    /// Pooling weight of each instance. Uniform for every variant but attn.
    pub attention: Vec<f64>,
    /// `K × M` representations entering the pooling.
    pub embeddings: Tensor,
}

pub fn forward(bag: &Bag, params: &Parameters, spec: &ModelSpec) -> Result<ForwardOutput> {
    Ok(predict(std::slice::from_ref(bag), params, spec)?.remove(0))
}

/// Forward pass over many bags, in chunks that share one tape.
pub fn predict(bags: &[Bag], params: &Parameters, spec: &ModelSpec) -> Result<Vec<ForwardOutput>> {
    let mut out = Vec::with_capacity(bags.len());
    for chunk in bags.chunks(64) {
        let mut tape = Tape::new();
        let vars = bind(&mut tape, params);
        let refs: Vec<&Bag> = chunk.iter().collect();
        let res = forward_batch(&mut tape, spec, &vars, &refs)?;
        for ((prediction, attention), h) in res.predictions.into_iter().zip(res.attention).zip(res.embeddings) {
            out.push(ForwardOutput {
                prediction,
                attention,
                embeddings: tape.value(h).clone(),
            });
        }
    }
    Ok(out)
}

fn param<'a>(params: &'a Parameters, name: &str) -> Result<&'a Tensor> {
    params
        .get(name)
        .ok_or_else(|| Error::Spec(format!("parameter {name} is missing")))
}

/// Attention pooling of a `K × M` matrix with the `pool.v` / `pool.w`
/// parameters. Returns `z` (`1 × M`) and the `K` weights.
pub fn attn_pool(h: &Tensor, params: &Parameters) -> Result<(Tensor, Vec<f64>)> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let v = tape.constant(param(params, "pool.v")?.clone());
    let w = tape.constant(param(params, "pool.w")?.clone());
    let vt = tape.transpose(v)?;
    let u = tape.matmul(hv, vt)?;
    let u = tape.tanh(u)?;
    let s = tape.matmul(u, w)?;
    let s = tape.transpose(s)?;
    let a = tape.softmax_rows(s)?;
    let z = tape.matmul(a, hv)?;
    Ok((tape.value(z).clone(), tape.value(a).data().to_vec()))
}

/// Scaled dot-product self-attention over the rows of `p` with the
/// `query`, `key` and `value` affine maps.
pub fn qkv_attention(p: &Tensor, params: &Parameters) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(p.clone());
    let mut proj = Vec::new();
    for name in ["query", "key", "value"] {
        let w = tape.constant(param(params, &format!("{name}.weight"))?.clone());
        let b = tape.constant(param(params, &format!("{name}.bias"))?.clone());
        let y = tape.matmul(x, w)?;
        proj.push(tape.add(y, b)?);
    }
    let d_k = param(params, "query.weight")?.dims2()?.1;
    let out = self_attention(&mut tape, proj[0], proj[1], proj[2], 1.0 / (d_k as f64).sqrt())?;
    Ok(tape.value(out).clone())
}
