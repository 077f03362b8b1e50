use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{attention_ratio_correlation, importance, median, r2, rmse};
use crate::baselines::{self, LinearModel};
use crate::error::{Error, Result};
use crate::model::{LabelStats, ModelDims, ModelSpec, Parameters, Pooling};
use crate::synthgeo::{
    columns_after, feature_groups, normalize_features, sample_bags, split, time_of, Dataset, FeatureStats,
    SplitSpec, Splits, SyntheticScene,
};
use crate::train::{derive_seed, repetition_seed, run_repetitions, TrainConfig, TrainTrace};

/// A network pooling variant or one of the aggregate regressors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Attn,
    Mean,
    Instance,
    Manual,
    Lr,
    Ridge,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Attn,
        Method::Mean,
        Method::Instance,
        Method::Manual,
        Method::Lr,
        Method::Ridge,
    ];

    pub fn pooling(self) -> Option<Pooling> {
        match self {
            Method::Attn => Some(Pooling::Attn),
            Method::Mean => Some(Pooling::Mean),
            Method::Instance => Some(Pooling::Instance),
            Method::Manual => Some(Pooling::Manual),
            Method::Lr | Method::Ridge => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Lr => "lr",
            Method::Ridge => "ridge",
            m => m.pooling().expect("network method").name(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown method {s:?}, expected one of attn, mean, instance, manual, lr, ridge")))
    }
}

/// Everything an experiment needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    pub dims: ModelDims,
    /// `train.seed` is the master seed of the repetitions.
    pub train: TrainConfig,
    pub ridge_lambda: f64,
    pub split: SplitSpec,
}

const SPLIT_STREAM: u64 = 0x5350_4c49_5400_0000;

/// Raw and normalized views of one train/validation/test split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub raw: Splits,
    pub data: Splits,
    pub stats: FeatureStats,
}

/// Splits `data` with a seed derived from the protocol seed and z-scores the
/// features with training statistics.
pub fn prepare(data: &Dataset, protocol: &Protocol) -> Result<Prepared> {
    let raw = split(data, protocol.split, derive_seed(protocol.train.seed, SPLIT_STREAM))?;
    let (data, stats) = normalize_features(&raw)?;
    Ok(Prepared { raw, data, stats })
}

#[derive(Debug, Clone)]
pub enum Fitted {
    Network {
        params: Parameters,
        labels: LabelStats,
        trace: TrainTrace,
    },
    Linear(LinearModel),
}

/// One repetition of one method, scored on the test split.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub rep: usize,
    pub seed: u64,
    pub rmse: f64,
    pub r2: f64,
    pub predictions: Vec<f64>,
    /// Pooling weights per test bag; uniform for the regressors.
    pub attention: Vec<Vec<f64>>,
    pub fitted: Fitted,
}

impl RunResult {
    pub fn trace(&self) -> Option<&TrainTrace> {
        match &self.fitted {
            Fitted::Network { trace, .. } => Some(trace),
            Fitted::Linear(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: Method,
    pub runs: Vec<RunResult>,
    pub median_rmse: f64,
    pub median_r2: f64,
    pub mean_rmse: f64,
    pub mean_r2: f64,
}

impl MethodResult {
    pub fn from_runs(method: Method, runs: Vec<RunResult>) -> Self {
        let rm: Vec<f64> = runs.iter().map(|r| r.rmse).collect();
        let r2s: Vec<f64> = runs.iter().map(|r| r.r2).collect();
        let n = runs.len() as f64;
        Self {
            method,
            median_rmse: median(&rm),
            median_r2: median(&r2s),
            mean_rmse: rm.iter().sum::<f64>() / n,
            mean_r2: r2s.iter().sum::<f64>() / n,
            runs,
        }
    }

    /// The repetition with the lowest validation RMSE; the first one for
    /// the regressors.
    pub fn best_run(&self) -> &RunResult {
        self.runs
            .iter()
            .min_by(|a, b| {
                let v = |r: &RunResult| r.trace().map_or(0.0, |t| t.best_val_rmse);
                v(a).total_cmp(&v(b))
            })
            .expect("at least one repetition")
    }

    pub fn rmse_per_rep(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.rmse).collect()
    }

    pub fn r2_per_rep(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.r2).collect()
    }
}

/// Trains and tests `method` for `protocol.train.repetitions` seeds on the
/// normalized split. The regressors are deterministic, so their repetitions
/// coincide.
pub fn run_method(method: Method, prepared: &Prepared, protocol: &Protocol) -> Result<MethodResult> {
    let data = &prepared.data;
    let reps = protocol.train.repetitions;
    let runs = match method.pooling() {
        Some(pooling) => {
            let spec = ModelSpec::new(data.train.dim(), protocol.dims.clone(), pooling, protocol.train.seed);
            run_repetitions(&spec, data, &protocol.train)?
                .runs
                .into_iter()
                .map(|r| RunResult {
                    rep: r.rep,
                    seed: r.seed,
                    rmse: r.rmse,
                    r2: r.r2,
                    predictions: r.predictions,
                    attention: r.attention,
                    fitted: Fitted::Network {
                        params: r.outcome.params,
                        labels: r.outcome.labels,
                        trace: r.outcome.trace,
                    },
                })
                .collect()
        }
        None => {
            let lambda = if method == Method::Ridge { protocol.ridge_lambda } else { 0.0 };
            let model = baselines::fit(&baselines::aggregate(&data.train)?, &data.train.labels(), lambda)?;
            let predictions = model.predict(&baselines::aggregate(&data.test)?)?;
            let y = data.test.labels();
            let (e, q) = (rmse(&y, &predictions)?, r2(&y, &predictions)?);
            let attention: Vec<Vec<f64>> = data.test.bags.iter().map(|b| vec![1.0 / b.len() as f64; b.len()]).collect();
            (0..reps)
                .map(|rep| RunResult {
                    rep,
                    seed: repetition_seed(protocol.train.seed, rep),
                    rmse: e,
                    r2: q,
                    predictions: predictions.clone(),
                    attention: attention.clone(),
                    fitted: Fitted::Linear(model.clone()),
                })
                .collect()
        }
    };
    Ok(MethodResult::from_runs(method, runs))
}

/// Every method on the same split with the same repetition seeds.
pub fn compare(prepared: &Prepared, methods: &[Method], protocol: &Protocol) -> Result<Vec<MethodResult>> {
    methods.par_iter().map(|&m| run_method(m, prepared, protocol)).collect()
}

/// Attention-to-ratio correlation of every repetition on the test split.
pub fn attention_correlations(result: &MethodResult, test: &Dataset) -> Result<Vec<f64>> {
    result
        .runs
        .iter()
        .map(|r| attention_ratio_correlation(&r.attention, &test.bags))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub group: String,
    pub columns: usize,
    pub rmse: f64,
    pub r2: f64,
    /// Rescaled median RMSE: 100 for the group whose removal hurts most.
    pub importance: f64,
    pub rmse_per_rep: Vec<f64>,
}

/// Retrains attention pooling with each feature group removed in turn.
/// An empty `groups` means every group.
pub fn ablate(prepared: &Prepared, groups: &[String], protocol: &Protocol) -> Result<Vec<AblationRow>> {
    let all = feature_groups(&prepared.data.train.feature_names);
    let chosen: Vec<(String, Vec<usize>)> = if groups.is_empty() {
        all
    } else {
        groups
            .iter()
            .map(|g| {
                all.iter()
                    .find(|(n, _)| n == g)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("unknown feature group {g:?}")))
            })
            .collect::<Result<_>>()?
    };
    if chosen.len() < 2 {
        return Err(Error::Config("ablation needs at least two feature groups".into()));
    }
    let d = prepared.data.train.dim();
    let results = chosen
        .par_iter()
        .map(|(_, cols)| {
            let keep: Vec<usize> = (0..d).filter(|j| !cols.contains(j)).collect();
            if keep.is_empty() {
                return Err(Error::Config("ablation would remove every column".into()));
            }
            let reduced = Prepared {
                raw: prepared.raw.map(|s| s.select_columns(&keep))?,
                data: prepared.data.map(|s| s.select_columns(&keep))?,
                stats: FeatureStats {
                    mean: keep.iter().map(|&j| prepared.stats.mean[j]).collect(),
                    scale: keep.iter().map(|&j| prepared.stats.scale[j]).collect(),
                },
            };
            run_method(Method::Attn, &reduced, protocol)
        })
        .collect::<Result<Vec<_>>>()?;
    let medians: Vec<f64> = results.iter().map(|r| r.median_rmse).collect();
    let imp = importance(&medians)?;
    Ok(chosen
        .into_iter()
        .zip(results)
        .zip(imp)
        .map(|(((group, cols), r), importance)| AblationRow {
            group,
            columns: cols.len(),
            rmse: r.median_rmse,
            r2: r.median_r2,
            importance,
            rmse_per_rep: r.rmse_per_rep(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InseasonRow {
    pub t: usize,
    pub masked_columns: usize,
    pub rmse: f64,
    pub r2: f64,
    pub rmse_per_rep: Vec<f64>,
    pub r2_per_rep: Vec<f64>,
}

/// Attention pooling retrained with every temporal column after step `t`
/// set to zero, for each `t`.
pub fn inseason(prepared: &Prepared, ts: &[usize], protocol: &Protocol) -> Result<Vec<InseasonRow>> {
    let names = &prepared.data.train.feature_names;
    let steps = names.iter().filter_map(|n| time_of(n)).max().unwrap_or(0);
    if let Some(t) = ts.iter().find(|&&t| t == 0 || t > steps) {
        return Err(Error::Usage(format!("in-season step {t} is outside 1..={steps}")));
    }
    ts.par_iter()
        .map(|&t| {
            let masked = columns_after(names, t);
            let truncated = Prepared {
                raw: prepared.raw.map(|s| Ok(s.zero_columns(&masked)))?,
                data: prepared.data.map(|s| Ok(s.zero_columns(&masked)))?,
                stats: prepared.stats.clone(),
            };
            let r = run_method(Method::Attn, &truncated, protocol)?;
            Ok(InseasonRow {
                t,
                masked_columns: masked.len(),
                rmse: r.median_rmse,
                r2: r.median_r2,
                rmse_per_rep: r.rmse_per_rep(),
                r2_per_rep: r.r2_per_rep(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub k: usize,
    pub method: Method,
    pub bags: usize,
    /// Counties without `k` candidate instances.
    pub dropped: usize,
    /// NaN when no run was possible at this bag size.
    pub rmse: f64,
    pub r2: f64,
    pub rmse_per_rep: Vec<f64>,
}

/// Resamples bags of every size in `ks` and runs each method on them.
/// Sizes no county can fill, or too few counties to split, give rows with
/// NaN metrics.
pub fn sweep(
    scene: &SyntheticScene,
    ks: &[usize],
    methods: &[Method],
    protocol: &Protocol,
    sample_seed: u64,
) -> Result<Vec<SweepRow>> {
    if ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Usage("bag sizes must be strictly ascending".into()));
    }
    let counties = scene.counties.len();
    let per_k = ks
        .par_iter()
        .map(|&k| -> Result<Vec<SweepRow>> {
            let empty = |bags: usize| {
                methods
                    .iter()
                    .map(|&method| SweepRow {
                        k,
                        method,
                        bags,
                        dropped: counties - bags,
                        rmse: f64::NAN,
                        r2: f64::NAN,
                        rmse_per_rep: Vec::new(),
                    })
                    .collect()
            };
            let data = match sample_bags(scene, k, sample_seed) {
                Ok(d) => d,
                Err(Error::EmptyDataset { .. }) => return Ok(empty(0)),
                Err(e) => return Err(e),
            };
            let n = data.bags.len();
            let prepared = match prepare(&data, protocol) {
                Ok(p) => p,
                Err(Error::Usage(_)) => return Ok(empty(n)),
                Err(e) => return Err(e),
            };
            Ok(compare(&prepared, methods, protocol)?
                .into_iter()
                .map(|r| SweepRow {
                    k,
                    method: r.method,
                    bags: n,
                    dropped: counties - n,
                    rmse: r.median_rmse,
                    r2: r.median_r2,
                    rmse_per_rep: r.rmse_per_rep(),
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_k.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgeo::{generate, random_dataset, SceneSpec};

    fn quick() -> Protocol {
        Protocol {
            dims: ModelDims {
                embed_dim: 6,
                attention_dim: 4,
                qkv_dim: 4,
                use_qkv: false,
                head_hidden: vec![4],
            },
            train: TrainConfig {
                max_epochs: 3,
                repetitions: 2,
                seed: 9,
                ..TrainConfig::default()
            },
            ridge_lambda: 1.0,
            split: SplitSpec::default(),
        }
    }

    fn named(n: usize) -> Dataset {
        let mut d = random_dataset(n, 4, 5, 3);
        d.feature_names = ["gci_1", "gci_2", "evi_1", "evi_2", "som"].map(String::from).to_vec();
        d
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("svm".parse::<Method>().is_err());
    }

    #[test]
    fn compare_runs_every_method() {
        let p = quick();
        let prep = prepare(&named(40), &p).unwrap();
        let out = compare(&prep, &Method::ALL, &p).unwrap();
        assert_eq!(out.len(), 6);
        for r in &out {
            assert_eq!(r.runs.len(), 2);
            assert!(r.median_rmse >= 0.0);
            for a in &r.runs[0].attention {
                assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        let attn = &out[0];
        let manual = &out[3];
        assert_eq!(attn.runs[1].seed, manual.runs[1].seed);
    }

    #[test]
    fn manual_with_unit_ratios_matches_mean() {
        let p = quick();
        let mut data = named(30);
        for b in &mut data.bags {
            b.ratios = vec![1.0; b.len()];
        }
        let prep = prepare(&data, &p).unwrap();
        let mean = run_method(Method::Mean, &prep, &p).unwrap();
        let manual = run_method(Method::Manual, &prep, &p).unwrap();
        for (a, b) in mean.runs.iter().zip(&manual.runs) {
            for (x, y) in a.predictions.iter().zip(&b.predictions) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ablation_table() {
        let p = quick();
        let prep = prepare(&named(30), &p).unwrap();
        let rows = ablate(&prep, &[], &p).unwrap();
        assert_eq!(rows.iter().map(|r| r.group.as_str()).collect::<Vec<_>>(), ["gci", "evi", "som"]);
        assert_eq!(rows.iter().map(|r| r.columns).collect::<Vec<_>>(), [2, 2, 1]);
        assert!(rows.iter().any(|r| r.importance == 0.0));
        assert!(rows.iter().any(|r| r.importance == 100.0));
        assert!(matches!(ablate(&prep, &["ndvi".into(), "gci".into()], &p), Err(Error::Config(_))));
    }

    #[test]
    fn inseason_full_season_is_the_plain_run() {
        let p = quick();
        let prep = prepare(&named(30), &p).unwrap();
        let rows = inseason(&prep, &[1, 2], &p).unwrap();
        assert_eq!(rows[0].masked_columns, 2);
        assert_eq!(rows[1].masked_columns, 0);
        let full = run_method(Method::Attn, &prep, &p).unwrap();
        assert_eq!(rows[1].rmse_per_rep, full.rmse_per_rep());
        assert!(inseason(&prep, &[3], &p).is_err());
    }

    #[test]
    fn sweep_rows_and_dropped_counts() {
        let spec = SceneSpec {
            n_counties: 30,
            coarse_grid: 4,
            fine_per_coarse: 2,
            time_steps: 2,
            seed: 1,
            ..SceneSpec::default()
        };
        let scene = generate(&spec).unwrap();
        let p = quick();
        let ks = [2, 10, 100];
        let rows = sweep(&scene, &ks, &[Method::Mean, Method::Lr], &p, 4).unwrap();
        assert_eq!(rows.len(), 6);
        let dropped: Vec<usize> = rows.iter().step_by(2).map(|r| r.dropped).collect();
        assert!(dropped.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(rows[4].bags, 0);
        assert!(rows[4].rmse.is_nan());
        assert!(sweep(&scene, &[10, 2], &[Method::Lr], &p, 4).is_err());
    }
}
