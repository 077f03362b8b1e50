//! The `milgrain` command line.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{
    self, ablate, attention_correlations, attention_map_svg, compare, inseason, prepare, r2, rmse, run_method,
    scatter_svg, sweep, write_ablation, write_attention, write_inseason, write_per_bag, write_sweep, write_trace,
    Fitted, Method, MethodMetrics, MethodResult, MetricsReport, Prepared, RepMetrics,
};
use crate::io::{create_dir, write_json};
use crate::model::{predict, Checkpoint, ModelSpec};
use crate::synthgeo::{generate, read_dataset, sample_bags, write_dataset, Dataset, DatasetMeta, FeatureStats, SceneSpec};
use crate::baselines::LinearModel;

#[derive(Debug, Parser)]
#[command(name = "milgrain", version, about = "County yield regression from mixed-pixel bags")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, overriding `output_dir` of the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Comma-separated bag sizes for the sweep.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// Comma-separated in-season steps.
    #[arg(long, value_delimiter = ',')]
    pub t: Option<Vec<usize>>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene and write its bags.
    Generate(Common),
    /// Train one method and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run one of the analysis experiments.
    Experiment {
        name: Experiment,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    Compare,
    Ablate,
    Inseason,
    Sweep,
    Attncorr,
}

impl Experiment {
    fn name(self) -> &'static str {
        match self {
            Experiment::Compare => "compare",
            Experiment::Ablate => "ablate",
            Experiment::Inseason => "inseason",
            Experiment::Sweep => "sweep",
            Experiment::Attncorr => "attncorr",
        }
    }
}

/// Applies the command-line overrides to the config file (or the defaults).
pub fn resolve(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config = config.with_seed(seed);
    }
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    if let Some(m) = common.method {
        config.methods = vec![m];
    }
    if let Some(r) = common.reps {
        config.train.repetitions = r;
    }
    if let Some(ks) = &common.ks {
        config.experiment.ks = ks.clone();
    }
    if let Some(t) = &common.t {
        config.experiment.inseason_t = t.clone();
    }
    config.validate()?;
    Ok(config)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(common) => cmd_generate(&resolve(&common)?),
        Command::Train { common, data } => cmd_train(&resolve(&common)?, data.as_deref()),
        Command::Evaluate {
            common,
            data,
            checkpoint,
        } => cmd_evaluate(&resolve(&common)?, &data, &checkpoint),
        Command::Experiment { name, common, data } => cmd_experiment(&resolve(&common)?, name, data.as_deref()),
    }
}

fn build_dataset(config: &RunConfig) -> Result<(crate::synthgeo::SyntheticScene, Dataset)> {
    let scene = generate(&config.scene)?;
    let data = sample_bags(&scene, config.bag_size, config.sample_seed())?;
    Ok((scene, data))
}

/// The config's dataset, or the one in `dir` after checking that its
/// feature layout matches the config's scene.
fn load_dataset(config: &RunConfig, dir: Option<&Path>) -> Result<Dataset> {
    match dir {
        None => Ok(build_dataset(config)?.1),
        Some(dir) => {
            let (data, _) = read_dataset(dir)?;
            let expected = config.scene.feature_names();
            if data.feature_names != expected {
                return Err(Error::Data(format!(
                    "{} has {} features but the configured scene produces {} ({} time steps)",
                    dir.display(),
                    data.dim(),
                    expected.len(),
                    config.scene.time_steps
                )));
            }
            Ok(data)
        }
    }
}

pub fn cmd_generate(config: &RunConfig) -> Result<()> {
    let out = &config.output_dir;
    let hash = config.write_resolved(out)?;
    let (scene, data) = build_dataset(config)?;
    let meta = DatasetMeta {
        scene: config.scene.clone(),
        scene_seed: config.scene.seed,
        sample_seed: config.sample_seed(),
        dim: data.dim(),
        bag_size: config.bag_size,
        feature_names: data.feature_names.clone(),
        config_hash: hash,
    };
    write_dataset(out, &scene, &data, &meta)
}

#[derive(Serialize)]
struct LinearArtifact<'a> {
    config_hash: &'a str,
    method: Method,
    feature_names: &'a [String],
    features: &'a FeatureStats,
    model: &'a LinearModel,
}

fn write_svg(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_scatter(dir: &Path, hash: &str, result: &MethodResult, test: &Dataset) -> Result<()> {
    let run = result.best_run();
    let title = format!("{} rep {}: observed vs predicted", result.method, run.rep);
    write_svg(&dir.join("scatter.svg"), &scatter_svg(&test.labels(), &run.predictions, &title, hash))
}

pub fn cmd_train(config: &RunConfig, data_dir: Option<&Path>) -> Result<()> {
    let out = &config.output_dir;
    let hash = config.write_resolved(out)?;
    let data = load_dataset(config, data_dir)?;
    let method = config.methods[0];
    let prepared = prepare(&data, &config.protocol())?;
    let result = run_method(method, &prepared, &config.protocol())?;

    let best = result.best_run();
    match &best.fitted {
        Fitted::Network { params, labels, .. } => {
            let pooling = method.pooling().expect("network method");
            let spec = ModelSpec::new(data.dim(), config.model.clone(), pooling, best.seed);
            let ckpt = Checkpoint::new(&spec, params, data.feature_names.clone(), prepared.stats.clone(), *labels, &hash);
            ckpt.save(&out.join("checkpoint.json"))?;
            write_trace(&out.join("trace.csv"), &hash, &result)?;
        }
        Fitted::Linear(model) => write_json(
            &out.join("linear.json"),
            &LinearArtifact {
                config_hash: &hash,
                method,
                feature_names: &data.feature_names,
                features: &prepared.stats,
                model,
            },
        )?,
    }

    let mut report = MetricsReport::new(&hash, "train", config.seed);
    report.methods.push(MethodMetrics::from(&result));
    write_json(&out.join("metrics.json"), &report)?;
    write_per_bag(&out.join("per_bag.csv"), &hash, std::slice::from_ref(&result), &prepared.raw.test)?;
    write_scatter(out, &hash, &result, &prepared.raw.test)
}

pub fn cmd_evaluate(config: &RunConfig, data_dir: &Path, checkpoint: &Path) -> Result<()> {
    let out = &config.output_dir;
    let hash = config.write_resolved(out)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let (data, meta) = read_dataset(data_dir)?;
    if data.feature_names != ckpt.feature_names {
        return Err(Error::Data(format!(
            "{} has {} features, the checkpoint was trained on {}",
            data_dir.display(),
            data.dim(),
            ckpt.feature_names.len()
        )));
    }
    let params = ckpt.parameters()?;
    let normalized = ckpt.features.apply(&data)?;
    let outputs = predict(&normalized.bags, &params, &ckpt.spec)?;
    let predictions: Vec<f64> = outputs.iter().map(|o| ckpt.labels.restore(o.prediction)).collect();
    let attention: Vec<Vec<f64>> = outputs.into_iter().map(|o| o.attention).collect();
    let y = data.labels();

    let e = rmse(&y, &predictions)?;
    let q = r2(&y, &predictions)?;
    let method: Method = ckpt.spec.pooling.name().parse()?;
    let result = MethodResult::from_runs(
        method,
        vec![eval::RunResult {
            rep: 0,
            seed: ckpt.spec.seed,
            rmse: e,
            r2: q,
            predictions,
            attention,
            fitted: Fitted::Network {
                params,
                labels: ckpt.labels,
                trace: crate::train::TrainTrace {
                    epochs: Vec::new(),
                    decays: Vec::new(),
                    best_epoch: 0,
                    best_val_rmse: f64::NAN,
                },
            },
        }],
    );

    let mut report = MetricsReport::new(&hash, "evaluate", config.seed);
    report.methods.push(MethodMetrics {
        method: method.to_string(),
        median_rmse: e,
        median_r2: q,
        mean_rmse: e,
        mean_r2: q,
        reps: vec![RepMetrics {
            rep: 0,
            seed: ckpt.spec.seed,
            rmse: e,
            r2: q,
            best_epoch: None,
            epochs: None,
            best_val_rmse: None,
        }],
    });
    write_json(&out.join("metrics.json"), &report)?;
    write_per_bag(&out.join("per_bag.csv"), &hash, std::slice::from_ref(&result), &data)?;
    write_attention(&out.join("attention.csv"), &hash, &result, &data)?;
    write_scatter(out, &hash, &result, &data)?;
    write_svg(
        &out.join("attention_map.svg"),
        &attention_map_svg(&data.bags[0], &result.runs[0].attention[0], meta.scene.coarse_grid, &hash),
    )
}

fn experiment_data(config: &RunConfig, data_dir: Option<&Path>) -> Result<Prepared> {
    prepare(&load_dataset(config, data_dir)?, &config.protocol())
}

pub fn cmd_experiment(config: &RunConfig, name: Experiment, data_dir: Option<&Path>) -> Result<()> {
    let out = &config.output_dir;
    let hash = config.write_resolved(out)?;
    let protocol = config.protocol();
    let mut report = MetricsReport::new(&hash, &format!("experiment {}", name.name()), config.seed);
    match name {
        Experiment::Compare => {
            let prepared = experiment_data(config, data_dir)?;
            let results = compare(&prepared, &config.methods, &protocol)?;
            report.methods = results.iter().map(MethodMetrics::from).collect();
            write_per_bag(&out.join("per_bag.csv"), &hash, &results, &prepared.raw.test)?;
            let shown = results.iter().find(|r| r.method == Method::Attn).unwrap_or(&results[0]);
            write_scatter(out, &hash, shown, &prepared.raw.test)?;
        }
        Experiment::Attncorr => {
            let prepared = experiment_data(config, data_dir)?;
            let result = run_method(Method::Attn, &prepared, &protocol)?;
            let corr = attention_correlations(&result, &prepared.raw.test)?;
            report.methods.push(MethodMetrics::from(&result));
            report
                .scalars
                .insert("attention_ratio_correlation".into(), eval::median(&corr));
            report.series.insert("attention_ratio_correlation".into(), corr);
            write_attention(&out.join("attention.csv"), &hash, &result, &prepared.raw.test)?;
            let run = result.best_run();
            let grid = config.scene.coarse_grid;
            write_svg(
                &out.join("attention_map.svg"),
                &attention_map_svg(&prepared.raw.test.bags[0], &run.attention[0], grid, &hash),
            )?;
        }
        Experiment::Ablate => {
            let prepared = experiment_data(config, data_dir)?;
            let rows = ablate(&prepared, &config.experiment.ablation_groups, &protocol)?;
            for r in &rows {
                report.scalars.insert(format!("importance.{}", r.group), r.importance);
                report.series.insert(format!("rmse.{}", r.group), r.rmse_per_rep.clone());
            }
            write_ablation(&out.join("ablation.csv"), &hash, &rows)?;
        }
        Experiment::Inseason => {
            let prepared = experiment_data(config, data_dir)?;
            let rows = inseason(&prepared, &config.inseason_steps(), &protocol)?;
            report.series.insert("t".into(), rows.iter().map(|r| r.t as f64).collect());
            report.series.insert("rmse".into(), rows.iter().map(|r| r.rmse).collect());
            report.series.insert("r2".into(), rows.iter().map(|r| r.r2).collect());
            write_inseason(&out.join("inseason.csv"), &hash, &rows)?;
        }
        Experiment::Sweep => {
            let scene = generate(&SceneSpec {
                coarse_grid: config.experiment.sweep_coarse_grid,
                ..config.scene.clone()
            })?;
            let rows = sweep(&scene, &config.experiment.ks, &config.methods, &protocol, config.sample_seed())?;
            for m in &config.methods {
                let of: Vec<_> = rows.iter().filter(|r| r.method == *m).collect();
                report.series.insert(format!("rmse.{m}"), of.iter().map(|r| r.rmse).collect());
            }
            report
                .series
                .insert("k".into(), config.experiment.ks.iter().map(|&k| k as f64).collect());
            write_sweep(&out.join("sweep.csv"), &hash, &rows)?;
        }
    }
    create_dir(out)?;
    write_json(&out.join("metrics.json"), &report)
}

/// Caps the global thread pool at `MILGRAIN_THREADS` when it is set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("MILGRAIN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("MILGRAIN_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))
}
