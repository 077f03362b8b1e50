use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::protocol::{AblationRow, InseasonRow, MethodResult, SweepRow};
use super::bag_normalize;
use crate::error::Result;
use crate::io::{fmt_f64, write_csv};
use crate::synthgeo::{Bag, Dataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepMetrics {
    pub rep: usize,
    pub seed: u64,
    pub rmse: f64,
    pub r2: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub best_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub best_val_rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: String,
    pub median_rmse: f64,
    pub median_r2: f64,
    pub mean_rmse: f64,
    pub mean_r2: f64,
    pub reps: Vec<RepMetrics>,
}

impl From<&MethodResult> for MethodMetrics {
    fn from(r: &MethodResult) -> Self {
        Self {
            method: r.method.to_string(),
            median_rmse: r.median_rmse,
            median_r2: r.median_r2,
            mean_rmse: r.mean_rmse,
            mean_r2: r.mean_r2,
            reps: r
                .runs
                .iter()
                .map(|run| RepMetrics {
                    rep: run.rep,
                    seed: run.seed,
                    rmse: run.rmse,
                    r2: run.r2,
                    best_epoch: run.trace().map(|t| t.best_epoch),
                    epochs: run.trace().map(|t| t.epochs.len()),
                    best_val_rmse: run.trace().map(|t| t.best_val_rmse),
                })
                .collect(),
        }
    }
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub command: String,
    pub seed: u64,
    pub methods: Vec<MethodMetrics>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub scalars: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub series: BTreeMap<String, Vec<f64>>,
}

impl MetricsReport {
    pub fn new(config_hash: &str, command: &str, seed: u64) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            command: command.to_string(),
            seed,
            methods: Vec::new(),
            scalars: BTreeMap::new(),
            series: BTreeMap::new(),
        }
    }
}

/// `per_bag.csv`: one row per test bag, repetition and method.
pub fn write_per_bag(path: &Path, hash: &str, results: &[MethodResult], test: &Dataset) -> Result<()> {
    let mut rows = Vec::new();
    for r in results {
        for run in &r.runs {
            for (bag, &p) in test.bags.iter().zip(&run.predictions) {
                rows.push(vec![
                    r.method.to_string(),
                    run.rep.to_string(),
                    bag.county_id.to_string(),
                    fmt_f64(bag.label),
                    fmt_f64(p),
                    fmt_f64((bag.label - p).abs()),
                ]);
            }
        }
    }
    write_csv(
        path,
        hash,
        &["method", "rep", "county_id", "observed", "predicted", "abs_error"],
        &rows,
    )
}

/// `attention.csv`: pooling weight and corn ratio of every test instance,
/// raw and bag-normalized.
pub fn write_attention(path: &Path, hash: &str, result: &MethodResult, test: &Dataset) -> Result<()> {
    let mut rows = Vec::new();
    for run in &result.runs {
        for (bag, att) in test.bags.iter().zip(&run.attention) {
            let an = bag_normalize(att)?;
            let rn = bag_normalize(&bag.ratios)?;
            for i in 0..bag.len() {
                rows.push(vec![
                    result.method.to_string(),
                    run.rep.to_string(),
                    bag.county_id.to_string(),
                    i.to_string(),
                    bag.cells[i].to_string(),
                    fmt_f64(att[i]),
                    fmt_f64(bag.ratios[i]),
                    fmt_f64(an[i]),
                    fmt_f64(rn[i]),
                ]);
            }
        }
    }
    write_csv(
        path,
        hash,
        &[
            "method",
            "rep",
            "county_id",
            "instance_idx",
            "cell",
            "attention",
            "corn_ratio",
            "attention_norm",
            "ratio_norm",
        ],
        &rows,
    )
}

/// `trace.csv`: the per-epoch training record of every repetition.
pub fn write_trace(path: &Path, hash: &str, result: &MethodResult) -> Result<()> {
    let mut rows = Vec::new();
    for run in &result.runs {
        if let Some(trace) = run.trace() {
            for e in &trace.epochs {
                rows.push(vec![
                    run.rep.to_string(),
                    e.epoch.to_string(),
                    fmt_f64(e.train_loss),
                    fmt_f64(e.val_rmse),
                    fmt_f64(e.lr),
                ]);
            }
        }
    }
    write_csv(path, hash, &["rep", "epoch", "train_loss", "val_rmse", "lr"], &rows)
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(";")
}

pub fn write_ablation(path: &Path, hash: &str, rows: &[AblationRow]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.group.clone(),
                r.columns.to_string(),
                fmt_f64(r.rmse),
                fmt_f64(r.r2),
                fmt_f64(r.importance),
                join(&r.rmse_per_rep),
            ]
        })
        .collect();
    write_csv(
        path,
        hash,
        &["group", "columns", "rmse", "r2", "importance", "rmse_per_rep"],
        &rows,
    )
}

pub fn write_inseason(path: &Path, hash: &str, rows: &[InseasonRow]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.t.to_string(),
                r.masked_columns.to_string(),
                fmt_f64(r.rmse),
                fmt_f64(r.r2),
                join(&r.rmse_per_rep),
            ]
        })
        .collect();
    write_csv(path, hash, &["t", "masked_columns", "rmse", "r2", "rmse_per_rep"], &rows)
}

pub fn write_sweep(path: &Path, hash: &str, rows: &[SweepRow]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.k.to_string(),
                r.method.to_string(),
                r.bags.to_string(),
                r.dropped.to_string(),
                fmt_f64(r.rmse),
                fmt_f64(r.r2),
                join(&r.rmse_per_rep),
            ]
        })
        .collect();
    write_csv(
        path,
        hash,
        &["k", "method", "bags", "dropped", "rmse", "r2", "rmse_per_rep"],
        &rows,
    )
}

const SIZE: f64 = 400.0;
const PAD: f64 = 40.0;

fn svg_open(out: &mut String, width: f64, height: f64, hash: &str) {
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    )
    .unwrap();
    writeln!(out, "<!-- config {hash} -->").unwrap();
    writeln!(out, r#"<rect width="{width}" height="{height}" fill="white"/>"#).unwrap();
}

/// Observed against predicted with a 45° reference line.
pub fn scatter_svg(observed: &[f64], predicted: &[f64], title: &str, hash: &str) -> String {
    let all = observed.iter().chain(predicted).copied().filter(|v| v.is_finite());
    let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        lo -= 1.0;
        hi += 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let x = |v: f64| PAD + (v - lo) / (hi - lo) * SIZE;
    let y = |v: f64| PAD + SIZE - (v - lo) / (hi - lo) * SIZE;

    let mut s = String::new();
    let side = SIZE + 2.0 * PAD;
    svg_open(&mut s, side, side, hash);
    writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    writeln!(
        s,
        r#"<line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}" stroke="gray" stroke-dasharray="4 3"/>"#,
        x(lo),
        y(lo),
        x(hi),
        y(hi)
    )
    .unwrap();
    for (&o, &p) in observed.iter().zip(predicted) {
        if o.is_finite() && p.is_finite() {
            writeln!(
                s,
                r#"<circle cx="{:.3}" cy="{:.3}" r="3" fill="steelblue" fill-opacity="0.7"/>"#,
                x(o),
                y(p)
            )
            .unwrap();
        }
    }
    writeln!(s, r#"<text x="{PAD}" y="25" font-family="sans-serif" font-size="14">{title}</text>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">observed</text>"#,
        PAD + SIZE / 2.0,
        SIZE + PAD + 28.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="14" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 14 {})">predicted</text>"#,
        PAD + SIZE / 2.0,
        PAD + SIZE / 2.0
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}

fn ramp(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(68.0, 253.0), lerp(1.0, 231.0), lerp(84.0, 37.0))
}

/// The instances of one bag placed at their coarse cell in a `grid × grid`
/// county, colored by attention on the left and corn ratio on the right.
pub fn attention_map_svg(bag: &Bag, attention: &[f64], grid: usize, hash: &str) -> String {
    let cell = SIZE / grid.max(1) as f64;
    let mut s = String::new();
    svg_open(&mut s, 3.0 * PAD + 2.0 * SIZE, SIZE + 2.0 * PAD, hash);
    let panels: [(&str, &[f64]); 2] = [("attention", attention), ("corn ratio", &bag.ratios)];
    for (p, (label, values)) in panels.iter().enumerate() {
        let x0 = PAD + p as f64 * (SIZE + PAD);
        let max = values.iter().copied().fold(0.0, f64::max);
        writeln!(
            s,
            r##"<rect x="{x0}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="#eeeeee" stroke="black"/>"##
        )
        .unwrap();
        for (&c, &v) in bag.cells.iter().zip(values.iter()) {
            let (row, col) = (c / grid, c % grid);
            writeln!(
                s,
                r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{}"/>"#,
                x0 + col as f64 * cell,
                PAD + row as f64 * cell,
                cell,
                cell,
                ramp(if max > 0.0 { v / max } else { 0.0 })
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{x0}" y="25" font-family="sans-serif" font-size="14">county {} {label}</text>"#,
            bag.county_id
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}
