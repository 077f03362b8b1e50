use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{fine_cells, SyntheticScene, TEMPORAL_GROUPS};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// One county: `K` instance feature rows, their corn ratios, and the yield.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub county_id: usize,
    /// Coarse-cell index of each instance.
    pub cells: Vec<usize>,
    /// `K × D`.
    pub instances: Tensor,
    pub ratios: Vec<f64>,
    pub label: f64,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratios.is_empty()
    }

    pub fn width(&self) -> usize {
        self.instances.shape().get(1).copied().unwrap_or(0)
    }
}

/// Bags that share one feature layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub bags: Vec<Bag>,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.bags.iter().map(|b| b.label).collect()
    }

    /// Same bags restricted to the given columns.
    pub fn select_columns(&self, keep: &[usize]) -> Result<Dataset> {
        let d = self.dim();
        if let Some(&bad) = keep.iter().find(|&&j| j >= d) {
            return Err(Error::dim("select_columns", &[d], &[bad]));
        }
        let bags = self
            .bags
            .iter()
            .map(|b| {
                let k = b.len();
                let mut data = Vec::with_capacity(k * keep.len());
                for i in 0..k {
                    let row = b.instances.row(i);
                    data.extend(keep.iter().map(|&j| row[j]));
                }
                Ok(Bag {
                    instances: Tensor::matrix(k, keep.len(), data)?,
                    ..b.clone()
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            feature_names: keep.iter().map(|&j| self.feature_names[j].clone()).collect(),
            bags,
        })
    }

    /// Copy with every column in `cols` set to zero.
    pub fn zero_columns(&self, cols: &[usize]) -> Dataset {
        let mut out = self.clone();
        for bag in &mut out.bags {
            let d = bag.width();
            for (i, v) in bag.instances.data_mut().iter_mut().enumerate() {
                if cols.contains(&(i % d)) {
                    *v = 0.0;
                }
            }
        }
        out
    }
}

/// Feature group of a column name: the variable without its time suffix.
pub fn group_of(name: &str) -> &str {
    match name.rsplit_once('_') {
        Some((head, tail)) if !tail.is_empty() && tail.bytes().all(|b| b.is_ascii_digit()) => head,
        _ => name,
    }
}

/// Time step (1-based) of a temporal column, `None` for static columns.
pub fn time_of(name: &str) -> Option<usize> {
    let (_, tail) = name.rsplit_once('_')?;
    tail.parse().ok()
}

/// Groups in first-appearance order with their column indices.
pub fn feature_groups(names: &[String]) -> Vec<(String, Vec<usize>)> {
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (j, name) in names.iter().enumerate() {
        let g = group_of(name);
        match groups.iter_mut().find(|(n, _)| n == g) {
            Some((_, cols)) => cols.push(j),
            None => groups.push((g.to_string(), vec![j])),
        }
    }
    groups
}

/// Columns observed after step `t`, i.e. the ones masked for an in-season
/// prediction at step `t`.
pub fn columns_after(names: &[String], t: usize) -> Vec<usize> {
    names
        .iter()
        .enumerate()
        .filter(|(_, n)| time_of(n).is_some_and(|s| s > t))
        .map(|(j, _)| j)
        .collect()
}

/// Draws one bag of `k` instances per qualifying county.
///
/// For every coarse cell with at least one corn fine cell, one of those fine
/// cells is chosen; fine cells inside a coarse cell share its mixed
/// features, so this keeps one candidate per coarse cell. `k` candidates are
/// then drawn without replacement. Counties with fewer than `k` candidates
/// are dropped.
pub fn sample_bags(scene: &SyntheticScene, k: usize, seed: u64) -> Result<Dataset> {
    if k == 0 {
        return Err(Error::Usage("bag size must be at least 1".into()));
    }
    let spec = &scene.spec;
    let (steps, groups) = (spec.time_steps, TEMPORAL_GROUPS.len());
    let d = spec.feature_dim();
    let mut bags = Vec::new();
    let mut max_candidates = 0;

    for county in &scene.counties {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(county.id as u64);

        let mut candidates = Vec::new();
        for cell in 0..spec.cells() {
            let corn: Vec<usize> = fine_cells(spec, cell).filter(|&i| county.mask[i]).collect();
            if let Some(&fine) = corn.choose(&mut rng) {
                candidates.push((cell, fine));
            }
        }
        max_candidates = max_candidates.max(candidates.len());
        if candidates.len() < k {
            continue;
        }

        let picks = index::sample(&mut rng, candidates.len(), k);
        let mut data = Vec::with_capacity(k * d);
        let mut cells = Vec::with_capacity(k);
        let mut ratios = Vec::with_capacity(k);
        for p in picks.iter() {
            let (cell, fine) = candidates[p];
            let base = cell * groups * steps;
            data.extend_from_slice(&county.temporal[base..base + groups * steps]);
            data.extend(scene.soil_at(county.id, fine));
            data.push(county.year);
            data.push(county.historical);
            cells.push(cell);
            ratios.push(county.ratios[cell]);
        }
        bags.push(Bag {
            county_id: county.id,
            cells,
            instances: Tensor::matrix(k, d, data)?,
            ratios,
            label: county.yield_,
        });
    }

    if bags.is_empty() {
        return Err(Error::EmptyDataset { k, max_candidates });
    }
    Ok(Dataset {
        feature_names: spec.feature_names(),
        bags,
    })
}

/// Test fraction of all bags, and validation fraction of what remains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub test: f64,
    pub val: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { test: 0.2, val: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn map(&self, f: impl Fn(&Dataset) -> Result<Dataset>) -> Result<Splits> {
        Ok(Splits {
            train: f(&self.train)?,
            val: f(&self.val)?,
            test: f(&self.test)?,
        })
    }
}

/// Deterministic shuffled split. With the default fractions 100 bags become
/// 64 train, 16 validation and 20 test.
pub fn split(data: &Dataset, fractions: SplitSpec, seed: u64) -> Result<Splits> {
    let n = data.bags.len();
    let n_test = (fractions.test * n as f64).round() as usize;
    let n_val = (fractions.val * (n - n_test.min(n)) as f64).round() as usize;
    if n_test == 0 || n_val == 0 || n_test + n_val >= n {
        return Err(Error::Usage(format!(
            "{n} bags cannot be split into non-empty train/val/test sets ({n_test} test, {n_val} val)"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |idx: &[usize]| Dataset {
        feature_names: data.feature_names.clone(),
        bags: idx.iter().map(|&i| data.bags[i].clone()).collect(),
    };
    Ok(Splits {
        test: take(&order[..n_test]),
        val: take(&order[n_test..n_test + n_val]),
        train: take(&order[n_test + n_val..]),
    })
}

/// Per-feature location and scale, computed over every training instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// 1 where the training std was below 1e-12, so those columns are only centered.
    pub scale: Vec<f64>,
}

impl FeatureStats {
    pub fn fit(train: &Dataset) -> Result<Self> {
        let d = train.dim();
        let rows: usize = train.bags.iter().map(Bag::len).sum();
        if rows == 0 {
            return Err(Error::Data("cannot compute feature statistics of an empty set".into()));
        }
        let mut mean = vec![0.0; d];
        for bag in &train.bags {
            for (j, v) in bag.instances.data().iter().enumerate() {
                mean[j % d] += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; d];
        for bag in &train.bags {
            for (j, v) in bag.instances.data().iter().enumerate() {
                var[j % d] += (v - mean[j % d]).powi(2);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let sd = (v / rows as f64).sqrt();
                if sd < 1e-12 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        let d = self.mean.len();
        if data.dim() != d {
            return Err(Error::dim("normalize", &[d], &[data.dim()]));
        }
        let mut out = data.clone();
        for bag in &mut out.bags {
            for (j, v) in bag.instances.data_mut().iter_mut().enumerate() {
                *v = (*v - self.mean[j % d]) / self.scale[j % d];
            }
        }
        Ok(out)
    }
}

/// Z-scores every split with statistics of the training split.
/// Applying the returned stats a second time is not the identity.
pub fn normalize_features(splits: &Splits) -> Result<(Splits, FeatureStats)> {
    let stats = FeatureStats::fit(&splits.train)?;
    Ok((splits.map(|d| stats.apply(d))?, stats))
}

/// Random bag maker for tests and examples: `n` bags of `k × d` uniform
/// features with uniform ratios and labels.
pub fn random_dataset(n: usize, k: usize, d: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bags = (0..n)
        .map(|i| Bag {
            county_id: i,
            cells: (0..k).collect(),
            instances: Tensor::matrix(k, d, (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .expect("shape"),
            ratios: (0..k).map(|_| rng.gen()).collect(),
            label: rng.gen_range(-1.0..1.0),
        })
        .collect();
    Dataset {
        feature_names: (0..d).map(|j| format!("x{j}")).collect(),
        bags,
    }
}
