use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bags::{Bag, Dataset};
use super::scene::{SceneSpec, SyntheticScene};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::io::{fmt_f64, parse_f64, parse_usize, read_csv, read_json, write_csv, write_json};

/// Contents of `meta.json` in a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub scene: SceneSpec,
    pub scene_seed: u64,
    pub sample_seed: u64,
    pub dim: usize,
    pub bag_size: usize,
    pub feature_names: Vec<String>,
    pub config_hash: String,
}

/// Writes `meta.json`, `bags.csv` and `truth.csv` into `dir`.
pub fn write_dataset(dir: &Path, scene: &SyntheticScene, data: &Dataset, meta: &DatasetMeta) -> Result<()> {
    crate::io::create_dir(dir)?;
    write_json(&dir.join("meta.json"), meta)?;

    let mut header = vec!["county_id", "instance_idx", "ratio", "label"];
    header.extend(data.feature_names.iter().map(String::as_str));
    let mut rows = Vec::new();
    for bag in &data.bags {
        for i in 0..bag.len() {
            let mut row = vec![
                bag.county_id.to_string(),
                bag.cells[i].to_string(),
                fmt_f64(bag.ratios[i]),
                fmt_f64(bag.label),
            ];
            row.extend(bag.instances.row(i).iter().map(|&v| fmt_f64(v)));
            rows.push(row);
        }
    }
    write_csv(&dir.join("bags.csv"), &meta.config_hash, &header, &rows)?;

    let rows: Vec<Vec<String>> = scene
        .counties
        .iter()
        .map(|c| {
            vec![
                c.id.to_string(),
                fmt_f64(c.productivity),
                fmt_f64(c.yield_),
                fmt_f64(c.corn_fraction),
            ]
        })
        .collect();
    write_csv(
        &dir.join("truth.csv"),
        &meta.config_hash,
        &["county_id", "productivity", "yield", "corn_fraction"],
        &rows,
    )
}

/// Reads the bags and metadata of a dataset directory.
pub fn read_dataset(dir: &Path) -> Result<(Dataset, DatasetMeta)> {
    let meta: DatasetMeta = read_json(&dir.join("meta.json"))?;
    let path = dir.join("bags.csv");
    let (header, rows) = read_csv(&path)?;
    let d = header.len().saturating_sub(4);
    if header.get(..4) != Some(&["county_id", "instance_idx", "ratio", "label"].map(String::from)[..]) {
        return Err(Error::format(&path, "unexpected header"));
    }
    if d != meta.dim || header[4..] != meta.feature_names[..] {
        return Err(Error::Data(format!(
            "{}: {d} feature columns disagree with meta.json ({})",
            path.display(),
            meta.dim
        )));
    }

    let mut bags: Vec<Bag> = Vec::new();
    let mut data: Vec<f64> = Vec::new();
    let flush = |bags: &mut Vec<Bag>, data: &mut Vec<f64>| -> Result<()> {
        if let Some(last) = bags.last_mut() {
            last.instances = Tensor::matrix(last.cells.len(), d, std::mem::take(data))?;
        }
        Ok(())
    };
    for row in &rows {
        if row.len() != d + 4 {
            return Err(Error::format(&path, format!("row has {} fields, expected {}", row.len(), d + 4)));
        }
        let county = parse_usize(&path, &row[0])?;
        if bags.last().map(|b| b.county_id) != Some(county) {
            flush(&mut bags, &mut data)?;
            bags.push(Bag {
                county_id: county,
                cells: Vec::new(),
                instances: Tensor::zeros(&[0, d]),
                ratios: Vec::new(),
                label: parse_f64(&path, &row[3])?,
            });
        }
        let bag = bags.last_mut().expect("pushed above");
        bag.cells.push(parse_usize(&path, &row[1])?);
        bag.ratios.push(parse_f64(&path, &row[2])?);
        for field in &row[4..] {
            data.push(parse_f64(&path, field)?);
        }
    }
    flush(&mut bags, &mut data)?;
    if bags.is_empty() {
        return Err(Error::Data(format!("{}: no bags", path.display())));
    }
    Ok((
        Dataset {
            feature_names: meta.feature_names.clone(),
            bags,
        },
        meta,
    ))
}
