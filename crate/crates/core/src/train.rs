//! Mini-batch Adam with plateau learning-rate decay and best-epoch restore.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::eval::{median, r2, rmse};
use crate::model::{batch_loss, bind, init, predict, LabelStats, ModelSpec, Parameters};
use crate::synthgeo::{Bag, Dataset, Splits};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Bags per mini-batch.
    pub batch_size: usize,
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs without improvement before the learning rate is divided.
    pub patience: usize,
    pub decay_factor: f64,
    pub max_decays: usize,
    pub max_epochs: usize,
    /// Smallest drop in validation RMSE that counts as improvement.
    pub min_improvement: f64,
    pub repetitions: usize,
    /// Taken from the run's master seed when loaded from a config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr0: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patience: 10,
            decay_factor: 10.0,
            max_decays: 3,
            max_epochs: 300,
            min_improvement: 1e-4,
            repetitions: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Batch of 100 bags and a starting rate of 0.1.
    pub fn large_batch() -> Self {
        Self {
            batch_size: 100,
            lr0: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 || self.repetitions == 0 {
            return Err(Error::Config(
                "train.batch_size, train.patience and train.repetitions must be at least 1".into(),
            ));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config("train.lr0 must be positive".into()));
        }
        if !(self.decay_factor > 1.0) {
            return Err(Error::Config("train.decay_factor must exceed 1".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(Error::Config("adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates of Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim("adam_step", &[params.len()], &[grads.len()]));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::dim("adam_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::Evaluation(format!("non-finite gradient in parameter tensor {i}")));
        }
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((x, &gi), (mi, vi)) in it {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mh = *mi / c1;
            let vh = *vi / c2;
            *x -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// What the schedule decided after one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Plateau {
    Improved,
    Waiting,
    Decayed,
    Stop,
}

/// Divides the learning rate after `patience` epochs without improvement,
/// and stops once patience runs out again after the last allowed decay.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub best: f64,
    pub since: usize,
    pub decays: usize,
    patience: usize,
    factor: f64,
    max_decays: usize,
    min_improvement: f64,
}

impl PlateauSchedule {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            lr: config.lr0,
            best: f64::INFINITY,
            since: 0,
            decays: 0,
            patience: config.patience,
            factor: config.decay_factor,
            max_decays: config.max_decays,
            min_improvement: config.min_improvement,
        }
    }

    pub fn observe(&mut self, val: f64) -> Plateau {
        if val < self.best - self.min_improvement {
            self.best = val;
            self.since = 0;
            return Plateau::Improved;
        }
        self.since += 1;
        if self.since < self.patience {
            return Plateau::Waiting;
        }
        if self.decays >= self.max_decays {
            return Plateau::Stop;
        }
        self.decays += 1;
        self.lr /= self.factor;
        self.since = 0;
        Plateau::Decayed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss on standardized labels.
    pub train_loss: f64,
    /// Validation RMSE in label units.
    pub val_rmse: f64,
    /// Rate used during this epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
    /// Epochs after which the rate was divided.
    pub decays: Vec<usize>,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Parameters,
    pub trace: TrainTrace,
    pub labels: LabelStats,
}

/// Trains `spec` on the train split of `data`, monitoring the validation
/// split, and returns the parameters of the best validation epoch.
///
/// Features are used as given; normalize them first. Labels are
/// standardized internally.
pub fn train(spec: &ModelSpec, data: &Splits, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.bags.is_empty() || data.val.bags.is_empty() {
        return Err(Error::Usage("training needs non-empty train and validation sets".into()));
    }
    if data.train.dim() != spec.input_dim {
        return Err(Error::Data(format!(
            "dataset has {} features, model expects {}",
            data.train.dim(),
            spec.input_dim
        )));
    }

    let labels = LabelStats::fit(&data.train.labels())?;
    let targets: Vec<f64> = data.train.bags.iter().map(|b| labels.standardize(b.label)).collect();
    let val_labels = data.val.labels();

    let mut params = init(spec)?;
    let mut adam = AdamState::new(&params.tensors, config.beta1, config.beta2, config.eps);
    let mut schedule = PlateauSchedule::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.train.bags.len()).collect();

    let mut best = params.clone();
    let mut trace = TrainTrace {
        epochs: Vec::new(),
        decays: Vec::new(),
        best_epoch: 0,
        best_val_rmse: f64::INFINITY,
    };

    for epoch in 0..config.max_epochs {
        let lr = schedule.lr;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let bags: Vec<&Bag> = batch.iter().map(|&i| &data.train.bags[i]).collect();
            let y: Vec<f64> = batch.iter().map(|&i| targets[i]).collect();
            let mut tape = Tape::new();
            let vars = bind(&mut tape, &params);
            let (loss, _) = batch_loss(&mut tape, spec, &vars, &bags, &y)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: format!("training loss is {value}"),
                });
            }
            total += value * batch.len() as f64;
            tape.backward(loss)?;
            let grads: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
            adam_step(&mut params.tensors, &grads, &mut adam, lr)
                .map_err(|e| Error::Diverged { epoch, reason: e.to_string() })?;
        }

        let val_rmse = evaluate_rmse(&params, spec, &data.val, &val_labels, &labels)?;
        if !val_rmse.is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: format!("validation RMSE is {val_rmse}"),
            });
        }
        trace.epochs.push(EpochRecord {
            epoch,
            train_loss: total / order.len() as f64,
            val_rmse,
            lr,
        });
        match schedule.observe(val_rmse) {
            Plateau::Improved => {
                best = params.clone();
                trace.best_epoch = epoch;
                trace.best_val_rmse = val_rmse;
            }
            Plateau::Decayed => trace.decays.push(epoch),
            Plateau::Waiting => {}
            Plateau::Stop => break,
        }
    }

    Ok(TrainOutcome {
        params: best,
        trace,
        labels,
    })
}

fn evaluate_rmse(params: &Parameters, spec: &ModelSpec, data: &Dataset, y: &[f64], labels: &LabelStats) -> Result<f64> {
    let preds: Vec<f64> = predict(&data.bags, params, spec)?
        .iter()
        .map(|o| labels.restore(o.prediction))
        .collect();
    rmse(y, &preds)
}

/// Seed of repetition `rep`, derived from the master seed.
pub fn repetition_seed(master: u64, rep: usize) -> u64 {
    derive_seed(master, rep as u64)
}

/// Independent seed for `stream`, derived from `master`.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = master.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Repetition {
    pub rep: usize,
    pub seed: u64,
    pub outcome: TrainOutcome,
    /// Test predictions in label units.
    pub predictions: Vec<f64>,
    pub attention: Vec<Vec<f64>>,
    pub rmse: f64,
    pub r2: f64,
}

#[derive(Debug, Clone)]
pub struct RepetitionSummary {
    pub runs: Vec<Repetition>,
    pub mean_rmse: f64,
    pub median_rmse: f64,
    pub mean_r2: f64,
    pub median_r2: f64,
}

/// Trains `config.repetitions` models that differ only in their seed and
/// scores each on the test split. Repetitions run in parallel.
pub fn run_repetitions(spec: &ModelSpec, data: &Splits, config: &TrainConfig) -> Result<RepetitionSummary> {
    config.validate()?;
    let runs = (0..config.repetitions)
        .into_par_iter()
        .map(|rep| {
            let seed = repetition_seed(config.seed, rep);
            train_and_test(spec, data, config, rep, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    summarize(runs)
}

/// One training run with both the init and the shuffling seeded by `seed`,
/// scored on the test split.
pub fn train_and_test(spec: &ModelSpec, data: &Splits, config: &TrainConfig, rep: usize, seed: u64) -> Result<Repetition> {
    let spec = ModelSpec { seed, ..spec.clone() };
    let config = TrainConfig { seed, ..config.clone() };
    let outcome = train(&spec, data, &config)?;
    let out = predict(&data.test.bags, &outcome.params, &spec)?;
    let predictions: Vec<f64> = out.iter().map(|o| outcome.labels.restore(o.prediction)).collect();
    let y = data.test.labels();
    let attention = out.into_iter().map(|o| o.attention).collect();
    Ok(Repetition {
        rep,
        seed,
        rmse: rmse(&y, &predictions)?,
        r2: r2(&y, &predictions)?,
        outcome,
        predictions,
        attention,
    })
}

pub fn summarize(runs: Vec<Repetition>) -> Result<RepetitionSummary> {
    if runs.is_empty() {
        return Err(Error::Usage("no repetitions to summarize".into()));
    }
    let rm: Vec<f64> = runs.iter().map(|r| r.rmse).collect();
    let r2s: Vec<f64> = runs.iter().map(|r| r.r2).collect();
    let n = runs.len() as f64;
    Ok(RepetitionSummary {
        mean_rmse: rm.iter().sum::<f64>() / n,
        median_rmse: median(&rm),
        mean_r2: r2s.iter().sum::<f64>() / n,
        median_r2: median(&r2s),
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelDims, Pooling};
    use crate::synthgeo::{normalize_features, random_dataset, split, SplitSpec};

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let before = p.clone();
        let mut s = AdamState::new(&p, 0.9, 0.999, 1e-8);
        adam_step(&mut p, &[Tensor::zeros(&[2])], &mut s, 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for c in [3.0, -0.25, 1e-3] {
            let mut p = vec![Tensor::vector(vec![0.5])];
            let mut s = AdamState::new(&p, 0.9, 0.999, 1e-8);
            adam_step(&mut p, &[Tensor::vector(vec![c])], &mut s, 0.1).unwrap();
            // m̂ = c, v̂ = c², so Δ = -lr c / (|c| + ε)
            let expect = -0.1 * c / (c.abs() + 1e-8);
            assert!((p[0].data()[0] - 0.5 - expect).abs() < 1e-12);
            assert!((p[0].data()[0] - 0.5 + 0.1 * c.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn equal_gradients_give_equal_updates() {
        let mut p = vec![Tensor::vector(vec![0.0; 3]), Tensor::vector(vec![0.0; 3])];
        let g = Tensor::vector(vec![0.3, -1.0, 2.0]);
        let mut s = AdamState::new(&p, 0.9, 0.999, 1e-8);
        for _ in 0..4 {
            adam_step(&mut p, &[g.clone(), g.clone()], &mut s, 0.01).unwrap();
        }
        assert_eq!(p[0], p[1]);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = vec![Tensor::vector(vec![0.0])];
        let mut s = AdamState::new(&p, 0.9, 0.999, 1e-8);
        assert!(adam_step(&mut p, &[Tensor::vector(vec![f64::NAN])], &mut s, 0.1).is_err());
    }

    #[test]
    fn schedule_decays_then_stops() {
        let cfg = TrainConfig {
            lr0: 0.1,
            patience: 2,
            ..TrainConfig::default()
        };
        let mut s = PlateauSchedule::new(&cfg);
        assert_eq!(s.observe(1.0), Plateau::Improved);
        let mut lrs = vec![s.lr];
        let mut steps = Vec::new();
        loop {
            let step = s.observe(1.0);
            steps.push(step);
            if step == Plateau::Decayed {
                lrs.push(s.lr);
            }
            if step == Plateau::Stop {
                break;
            }
        }
        assert_eq!(steps.iter().filter(|&&x| x == Plateau::Decayed).count(), 3);
        assert_eq!(steps.len(), 8);
        let expect = [0.1, 0.01, 0.001, 0.0001];
        for (a, b) in lrs.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        // improvements below the threshold do not count
        let mut s = PlateauSchedule::new(&cfg);
        s.observe(1.0);
        assert_eq!(s.observe(1.0 - 5e-5), Plateau::Waiting);
        assert_eq!(s.observe(1.0 - 2e-4), Plateau::Improved);
    }

    fn solvable(seed: u64) -> Splits {
        // label is the bag mean of the first feature
        let mut data = random_dataset(100, 6, 3, seed);
        for bag in &mut data.bags {
            bag.label = (0..6).map(|i| bag.instances.at(i, 0)).sum::<f64>() / 6.0;
        }
        normalize_features(&split(&data, SplitSpec::default(), seed).unwrap()).unwrap().0
    }

    fn small_spec(pooling: Pooling) -> ModelSpec {
        let dims = ModelDims {
            embed_dim: 8,
            attention_dim: 4,
            qkv_dim: 4,
            use_qkv: false,
            head_hidden: vec![8],
        };
        ModelSpec::new(3, dims, pooling, 0)
    }

    #[test]
    fn learns_a_solvable_problem() {
        let data = solvable(1);
        let cfg = TrainConfig {
            max_epochs: 150,
            ..TrainConfig::default()
        };
        let out = train(&small_spec(Pooling::Mean), &data, &cfg).unwrap();
        let sd = LabelStats::fit(&data.val.labels()).unwrap().scale;
        assert!(out.trace.best_val_rmse / sd < 0.05, "{}", out.trace.best_val_rmse / sd);
        let first = out.trace.epochs[0].train_loss;
        let at_best = out.trace.epochs[out.trace.best_epoch].train_loss;
        assert!(at_best < 0.1 * first);
        let lrs: Vec<f64> = out.trace.epochs.iter().map(|e| e.lr).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn frozen_model_decays_exactly_max_decays_times() {
        let data = solvable(2);
        let cfg = TrainConfig {
            lr0: 1e-300,
            patience: 3,
            max_epochs: 100,
            ..TrainConfig::default()
        };
        let out = train(&small_spec(Pooling::Attn), &data, &cfg).unwrap();
        assert_eq!(out.trace.decays.len(), 3);
        assert_eq!(out.trace.epochs.len(), 1 + 4 * 3);
    }

    #[test]
    fn training_is_deterministic() {
        let data = solvable(3);
        let cfg = TrainConfig {
            max_epochs: 5,
            ..TrainConfig::default()
        };
        let a = train(&small_spec(Pooling::Attn), &data, &cfg).unwrap();
        let b = train(&small_spec(Pooling::Attn), &data, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn repetitions_summary() {
        let data = solvable(4);
        let cfg = TrainConfig {
            max_epochs: 3,
            repetitions: 3,
            ..TrainConfig::default()
        };
        let s = run_repetitions(&small_spec(Pooling::Mean), &data, &cfg).unwrap();
        let mean = s.runs.iter().map(|r| r.rmse).sum::<f64>() / 3.0;
        assert!((mean - s.mean_rmse).abs() < 1e-12);
        assert_ne!(s.runs[0].outcome.trace, s.runs[1].outcome.trace);

        let one = run_repetitions(&small_spec(Pooling::Mean), &data, &TrainConfig { repetitions: 1, ..cfg }).unwrap();
        assert_eq!(one.mean_rmse, one.runs[0].rmse);
        assert_eq!(one.median_rmse, one.runs[0].rmse);
        assert_eq!(one.runs[0].rmse, s.runs[0].rmse);
    }
}
