//! The model as a computation on a [`Tape`].

use super::spec::{ModelSpec, Parameters, Pooling};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::synthgeo::Bag;

/// Records every parameter on `tape` as a leaf, in layout order.
pub fn bind(tape: &mut Tape, params: &Parameters) -> Vec<Var> {
    params.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
}

/// Result of running a batch of bags through the model on a tape.
#[derive(Debug)]
pub struct BatchOutput {
    pub predictions: Vec<f64>,
    /// What the training loss compares with the labels: one row per bag,
    /// or one row per instance for instance pooling.
    pub loss_input: Var,
    pub attention: Vec<Vec<f64>>,
    /// Per-bag `K × M` instance representations fed to the pooling.
    pub embeddings: Vec<Var>,
}

struct Params<'a> {
    names: Vec<String>,
    vars: &'a [Var],
}

impl Params<'_> {
    fn get(&self, name: &str) -> Var {
        let i = self.names.iter().position(|n| n == name).expect("name from layout");
        self.vars[i]
    }
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Embeds, optionally mixes, pools and regresses a batch of bags.
///
/// `vars` must hold the parameters of `spec` in [`ModelSpec::layout`] order.
pub fn forward_batch(tape: &mut Tape, spec: &ModelSpec, vars: &[Var], bags: &[&Bag]) -> Result<BatchOutput> {
    let layout = spec.layout();
    if vars.len() != layout.len() {
        return Err(Error::Usage(format!(
            "model needs {} parameter tensors, got {}",
            layout.len(),
            vars.len()
        )));
    }
    if bags.is_empty() {
        return Err(Error::Usage("forward pass over zero bags".into()));
    }
    let p = Params {
        names: layout.into_iter().map(|(n, _)| n).collect(),
        vars,
    };
    let d = spec.input_dim;

    let mut rows = Vec::new();
    let mut offsets = Vec::with_capacity(bags.len() + 1);
    offsets.push(0);
    for bag in bags {
        let k = bag.len();
        if k == 0 {
            return Err(Error::Data(format!("bag of county {} is empty", bag.county_id)));
        }
        if bag.instances.shape() != [k, d] {
            return Err(Error::dim("forward", bag.instances.shape(), &[k, d]));
        }
        if spec.pooling == Pooling::Manual {
            for i in 0..k {
                let r = bag.ratios[i];
                rows.extend(bag.instances.row(i).iter().map(|v| v * r));
            }
        } else {
            rows.extend_from_slice(bag.instances.data());
        }
        offsets.push(offsets.last().unwrap() + k);
    }
    let n = *offsets.last().unwrap();
    let x = tape.constant(Tensor::matrix(n, d, rows)?);

    let e = affine(tape, x, p.get("embed.weight"), p.get("embed.bias"))?;
    let e = tape.tanh(e)?;

    let mut h_bags = Vec::with_capacity(bags.len());
    let h_all = if spec.dims.use_qkv {
        let q = affine(tape, e, p.get("query.weight"), p.get("query.bias"))?;
        let k = affine(tape, e, p.get("key.weight"), p.get("key.bias"))?;
        let v = affine(tape, e, p.get("value.weight"), p.get("value.bias"))?;
        let scale = 1.0 / (spec.dims.qkv_dim as f64).sqrt();
        for w in offsets.windows(2) {
            let qb = tape.slice_rows(q, w[0], w[1])?;
            let kb = tape.slice_rows(k, w[0], w[1])?;
            let vb = tape.slice_rows(v, w[0], w[1])?;
            h_bags.push(self_attention(tape, qb, kb, vb, scale)?);
        }
        tape.concat(&h_bags)?
    } else {
        for w in offsets.windows(2) {
            h_bags.push(tape.slice_rows(e, w[0], w[1])?);
        }
        e
    };

    let mut attention = Vec::with_capacity(bags.len());
    let head_input = match spec.pooling {
        Pooling::Instance => {
            for w in offsets.windows(2) {
                let k = w[1] - w[0];
                attention.push(vec![1.0 / k as f64; k]);
            }
            h_all
        }
        Pooling::Attn => {
            let vt = tape.transpose(p.get("pool.v"))?;
            let u = tape.matmul(h_all, vt)?;
            let u = tape.tanh(u)?;
            let scores = tape.matmul(u, p.get("pool.w"))?;
            let mut zs = Vec::with_capacity(bags.len());
            for (w, &h) in offsets.windows(2).zip(&h_bags) {
                let s = tape.slice_rows(scores, w[0], w[1])?;
                let s = tape.transpose(s)?;
                let a = tape.softmax_rows(s)?;
                attention.push(tape.value(a).data().to_vec());
                zs.push(tape.matmul(a, h)?);
            }
            tape.concat(&zs)?
        }
        Pooling::Mean | Pooling::Manual => {
            let mut zs = Vec::with_capacity(bags.len());
            for (w, &h) in offsets.windows(2).zip(&h_bags) {
                let k = w[1] - w[0];
                let a = vec![1.0 / k as f64; k];
                let av = tape.constant(Tensor::matrix(1, k, a.clone())?);
                zs.push(tape.matmul(av, h)?);
                attention.push(a);
            }
            tape.concat(&zs)?
        }
    };

    let mut out = head_input;
    let layers = spec.head_layers();
    for i in 0..layers {
        out = affine(tape, out, p.get(&format!("head.{i}.weight")), p.get(&format!("head.{i}.bias")))?;
        if i + 1 < layers {
            out = tape.tanh(out)?;
        }
    }

    let values = tape.value(out).data();
    let predictions = if spec.pooling == Pooling::Instance {
        offsets
            .windows(2)
            .map(|w| values[w[0]..w[1]].iter().sum::<f64>() / (w[1] - w[0]) as f64)
            .collect()
    } else {
        values.to_vec()
    };

    Ok(BatchOutput {
        predictions,
        loss_input: out,
        attention,
        embeddings: h_bags,
    })
}

/// `softmax(Q Kᵀ · scale) V`, softmax along rows.
pub fn self_attention(tape: &mut Tape, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    let s = tape.scale(s, scale)?;
    let a = tape.softmax_rows(s)?;
    tape.matmul(a, v)
}

/// Mean squared residual between a prediction column and its targets.
pub fn mse_loss(tape: &mut Tape, pred: Var, targets: &[f64]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::Usage("mse of zero predictions".into()));
    }
    let shape = tape.shape(pred).to_vec();
    if shape.iter().product::<usize>() != targets.len() {
        return Err(Error::dim("mse_loss", &shape, &[targets.len()]));
    }
    let t = tape.constant(Tensor::new(shape, targets.to_vec())?);
    let r = tape.sub(pred, t)?;
    let sq = tape.mul(r, r)?;
    tape.mean(sq)
}

/// Training loss of a batch. For instance pooling every instance is
/// regressed on its bag's label.
pub fn batch_loss(
    tape: &mut Tape,
    spec: &ModelSpec,
    vars: &[Var],
    bags: &[&Bag],
    targets: &[f64],
) -> Result<(Var, BatchOutput)> {
    if targets.len() != bags.len() {
        return Err(Error::dim("batch_loss", &[bags.len()], &[targets.len()]));
    }
    let out = forward_batch(tape, spec, vars, bags)?;
    let loss = if spec.pooling == Pooling::Instance {
        let expanded: Vec<f64> = bags
            .iter()
            .zip(targets)
            .flat_map(|(b, &y)| std::iter::repeat_n(y, b.len()))
            .collect();
        mse_loss(tape, out.loss_input, &expanded)?
    } else {
        mse_loss(tape, out.loss_input, targets)?
    };
    Ok((loss, out))
}
