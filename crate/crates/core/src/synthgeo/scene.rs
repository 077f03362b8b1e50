use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::indices::{evi, gci, ndwi};
use crate::error::{Error, Result};

/// Bands in storage order.
pub const BANDS: [&str; 5] = ["nir", "red", "green", "blue", "swir"];
/// Per-timestep feature groups derived from the mixed bands, in column order.
pub const TEMPORAL_GROUPS: [&str; 5] = ["gci", "evi", "ndwi", "lst_day", "lst_night"];
/// Fine-scale soil analogs.
pub const SOIL_GROUPS: [&str; 3] = ["awc", "som", "cec"];

const NIR: usize = 0;
const RED: usize = 1;
const GREEN: usize = 2;
const BLUE: usize = 3;
const SWIR: usize = 4;

const REFLECTANCE_FLOOR: f64 = 1e-3;
const SOIL_NOISE: f64 = 0.02;
const YIELD_SLOPE: f64 = 10.0;
const YIELD_INTERCEPT: f64 = 5.0;

/// Shape and noise levels of a synthetic scene.
///
/// Each county is a square of `coarse_grid × coarse_grid` coarse cells, and
/// each coarse cell covers `fine_per_coarse × fine_per_coarse` fine cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub n_counties: usize,
    pub coarse_grid: usize,
    pub fine_per_coarse: usize,
    pub time_steps: usize,
    /// σ of the additive noise on every mixed band and weather analog.
    pub feature_noise: f64,
    /// σ of the yield residual.
    pub yield_noise: f64,
    /// σ of the historical-average analog around the productivity.
    pub history_noise: f64,
    /// Box-blur radius (fine cells) of the field the corn mask is cut from.
    pub mask_radius: usize,
    pub texture_radius: usize,
    pub texture_weight: f64,
    /// Per-fine-cell probability of isolated corn outside the main fields.
    pub speckle: f64,
    /// Range of the target county corn fraction.
    pub corn_fraction: [f64; 2],
    /// Upper bound of the per-county background green-up amplitude.
    pub background_amplitude: f64,
    /// Taken from the run's master seed when loaded from a config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_counties: 200,
            coarse_grid: 10,
            fine_per_coarse: 16,
            time_steps: 10,
            feature_noise: 0.01,
            yield_noise: 0.3,
            history_noise: 0.07,
            mask_radius: 12,
            texture_radius: 2,
            texture_weight: 0.3,
            speckle: 0.03,
            corn_fraction: [0.1, 0.9],
            background_amplitude: 1.5,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_counties", self.n_counties),
            ("coarse_grid", self.coarse_grid),
            ("fine_per_coarse", self.fine_per_coarse),
            ("time_steps", self.time_steps),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("scene.{name} must be at least 1")));
            }
        }
        let sigmas = [
            ("feature_noise", self.feature_noise),
            ("yield_noise", self.yield_noise),
            ("history_noise", self.history_noise),
            ("texture_weight", self.texture_weight),
            ("background_amplitude", self.background_amplitude),
        ];
        for (name, v) in sigmas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("scene.{name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.speckle) {
            return Err(Error::Config("scene.speckle must lie in [0, 1]".into()));
        }
        let [lo, hi] = self.corn_fraction;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config("scene.corn_fraction must satisfy 0 <= lo <= hi <= 1".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.coarse_grid * self.coarse_grid
    }

    /// Side length of the fine grid.
    pub fn fine_side(&self) -> usize {
        self.coarse_grid * self.fine_per_coarse
    }

    /// Column names of one instance feature vector.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.feature_dim());
        for group in TEMPORAL_GROUPS {
            for t in 1..=self.time_steps {
                names.push(format!("{group}_{t}"));
            }
        }
        names.extend(SOIL_GROUPS.iter().map(|s| s.to_string()));
        names.push("year".into());
        names.push("historical".into());
        names
    }

    pub fn feature_dim(&self) -> usize {
        TEMPORAL_GROUPS.len() * self.time_steps + SOIL_GROUPS.len() + 2
    }
}

/// One simulated county.
#[derive(Debug, Clone, PartialEq)]
pub struct County {
    pub id: usize,
    /// Latent productivity ρ in [0, 1].
    pub productivity: f64,
    pub yield_: f64,
    /// Fraction of the county's fine cells flagged corn.
    pub corn_fraction: f64,
    /// Fine-grid corn mask, row-major over `fine_side²` cells.
    pub mask: Vec<bool>,
    /// Corn ratio of each coarse cell, row-major.
    pub ratios: Vec<f64>,
    /// Mixed reflectances laid out `[cell][band][t]`.
    pub bands: Vec<f64>,
    /// Temporal features laid out `[cell][group][t]`, in [`TEMPORAL_GROUPS`] order.
    pub temporal: Vec<f64>,
    /// County means of the soil analogs.
    pub soil: [f64; 3],
    pub year: f64,
    pub historical: f64,
}

impl County {
    /// Number of corn fine cells in a coarse cell.
    pub fn corn_count(&self, spec: &SceneSpec, cell: usize) -> usize {
        fine_cells(spec, cell).filter(|&i| self.mask[i]).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub counties: Vec<County>,
}

impl SyntheticScene {
    /// Soil analogs at one fine cell. They are pure at fine scale: the
    /// county mean plus small cell-specific noise drawn from a stream keyed
    /// by the cell, so they need not be stored.
    pub fn soil_at(&self, county: usize, fine_cell: usize) -> [f64; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream((1 << 63) | ((county as u64) << 32) | fine_cell as u64);
        let base = self.counties[county].soil;
        let mut out = [0.0; 3];
        for (o, b) in out.iter_mut().zip(base) {
            let e: f64 = rng.sample(StandardNormal);
            *o = b + SOIL_NOISE * e;
        }
        out
    }
}

/// Fine-cell indices covered by a coarse cell.
pub fn fine_cells(spec: &SceneSpec, cell: usize) -> impl Iterator<Item = usize> {
    let (g, f) = (spec.coarse_grid, spec.fine_per_coarse);
    let side = g * f;
    let (cr, cc) = (cell / g, cell % g);
    (0..f * f).map(move |k| (cr * f + k / f) * side + cc * f + k % f)
}

/// Seasonal shape shared by every band: a Gaussian bump over the time steps.
fn phenology(t: usize, steps: usize) -> f64 {
    let peak = 0.6 * (steps as f64 - 1.0);
    let width = 0.2 * steps as f64;
    let d = t as f64 - peak;
    (-d * d / (2.0 * width * width)).exp()
}

/// Corn reflectance of each band at bump height `b` for productivity `rho`.
fn corn_band(band: usize, rho: f64, b: f64) -> f64 {
    match band {
        NIR => 0.25 + (0.15 + 0.35 * rho) * b,
        RED => 0.09 - (0.03 + 0.04 * rho) * b,
        GREEN => 0.09 + 0.03 * rho * b,
        BLUE => 0.05,
        _ => 0.28 - (0.05 + 0.1 * rho) * b,
    }
}

/// Non-corn reflectance. `amp` scales a green-up unrelated to productivity.
fn background_band(band: usize, nir_base: f64, amp: f64, b: f64) -> f64 {
    match band {
        NIR => nir_base + 0.3 * amp * b,
        RED => 0.10 - 0.04 * amp * b,
        GREEN => 0.09 + 0.02 * amp * b,
        BLUE => 0.05,
        _ => 0.35 - 0.1 * amp * b,
    }
}

/// Wrap-around box blur of radius `r` over a square grid, separable.
fn box_blur(field: &[f64], side: usize, r: usize) -> Vec<f64> {
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        let at = |line: usize, k: usize| {
            if horizontal {
                line * side + k
            } else {
                k * side + line
            }
        };
        for line in 0..side {
            let mut acc: f64 = (0..=2 * r).map(|d| src[at(line, (d + side * (r / side + 1) - r) % side)]).sum();
            for k in 0..side {
                out[at(line, k)] = acc;
                let leaving = (k + side * (r / side + 1) - r) % side;
                let entering = (k + r + 1) % side;
                acc += src[at(line, entering)] - src[at(line, leaving)];
            }
        }
        out
    };
    pass(&pass(field, true), false)
}

/// Gaussian white noise blurred with radius `r` and rescaled to unit std.
fn smooth_noise(rng: &mut ChaCha8Rng, side: usize, r: usize) -> Vec<f64> {
    let white: Vec<f64> = (0..side * side).map(|_| rng.sample(StandardNormal)).collect();
    let mut f = if r == 0 { white } else { box_blur(&white, side, r) };
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        for v in &mut f {
            *v = (*v - mean) / sd;
        }
    }
    f
}

/// Builds every county of the scene. Counties draw from independent
/// streams of the spec seed and are generated in parallel.
pub fn generate(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let counties = (0..spec.n_counties)
        .into_par_iter()
        .map(|id| generate_county(spec, id))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticScene {
        spec: spec.clone(),
        counties,
    })
}

fn generate_county(spec: &SceneSpec, id: usize) -> Result<County> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(id as u64);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let (side, f, steps, cells) = (spec.fine_side(), spec.fine_per_coarse, spec.time_steps, spec.cells());
    let rho: f64 = rng.gen();

    let blobs = smooth_noise(&mut rng, side, spec.mask_radius);
    let texture = smooth_noise(&mut rng, side, spec.texture_radius);
    let field: Vec<f64> = blobs
        .iter()
        .zip(&texture)
        .map(|(a, b)| a + spec.texture_weight * b)
        .collect();
    let [lo, hi] = spec.corn_fraction;
    let target = lo + (hi - lo) * rng.gen::<f64>();
    let mut sorted = field.clone();
    sorted.sort_by(f64::total_cmp);
    let q = ((1.0 - target) * (sorted.len() - 1) as f64).floor() as usize;
    let threshold = sorted[q];
    let mask: Vec<bool> = field
        .iter()
        .map(|&v| {
            let speck = rng.gen::<f64>() < spec.speckle;
            v > threshold || speck
        })
        .collect();

    let ratios: Vec<f64> = (0..cells)
        .map(|c| {
            let n = fine_cells(spec, c).filter(|&i| mask[i]).count();
            n as f64 / (f * f) as f64
        })
        .collect();

    let nir_base = 0.12 + 0.08 * rng.gen::<f64>();
    let amp = rng.gen::<f64>() * spec.background_amplitude;
    let cell_amp: Vec<f64> = (0..cells).map(|_| (0.5 + rng.gen::<f64>()) * amp).collect();

    let bump: Vec<f64> = (0..steps).map(|t| phenology(t, steps)).collect();
    let mut bands = vec![0.0; cells * BANDS.len() * steps];
    for band in 0..BANDS.len() {
        for c in 0..cells {
            let ratio = ratios[c];
            for t in 0..steps {
                let pure = corn_band(band, rho, bump[t]);
                let bg = background_band(band, nir_base, cell_amp[c], bump[t]);
                let v = ratio * pure + (1.0 - ratio) * bg + spec.feature_noise * normal(&mut rng);
                bands[(c * BANDS.len() + band) * steps + t] = v.clamp(REFLECTANCE_FLOOR, 1.0);
            }
        }
    }

    let groups = TEMPORAL_GROUPS.len();
    let mut temporal = vec![0.0; cells * groups * steps];
    let band_at = |c: usize, band: usize, t: usize| bands[(c * BANDS.len() + band) * steps + t];
    for c in 0..cells {
        for t in 0..steps {
            let (nir, red, green, blue, swir) = (
                band_at(c, NIR, t),
                band_at(c, RED, t),
                band_at(c, GREEN, t),
                band_at(c, BLUE, t),
                band_at(c, SWIR, t),
            );
            let base = c * groups * steps;
            temporal[base + t] = gci(nir, green)?;
            temporal[base + steps + t] = evi(nir, red, blue)?;
            temporal[base + 2 * steps + t] = ndwi(nir, swir)?;
        }
    }
    // weather analogs are driven by the mixed canopy state
    for group in 3..5 {
        for c in 0..cells {
            for t in 0..steps {
                let (nir, swir) = (band_at(c, NIR, t), band_at(c, SWIR, t));
                let clean = if group == 3 { 1.0 - nir + 0.5 * swir } else { 0.3 + 0.5 * swir };
                temporal[(c * groups + group) * steps + t] = clean + spec.feature_noise * normal(&mut rng);
            }
        }
    }

    let soil = [0.5 * rho + 0.5 * rng.gen::<f64>(), rng.gen(), rng.gen()];
    let year = rng.gen_range(0..=14) as f64 / 14.0;
    let historical = rho + spec.history_noise * normal(&mut rng);
    let yield_ = YIELD_SLOPE * rho + YIELD_INTERCEPT + spec.yield_noise * normal(&mut rng);
    let corn_fraction = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;

    Ok(County {
        id,
        productivity: rho,
        yield_,
        corn_fraction,
        mask,
        ratios,
        bands,
        temporal,
        soil,
        year,
        historical,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneSpec {
        SceneSpec {
            n_counties: 12,
            coarse_grid: 4,
            fine_per_coarse: 8,
            time_steps: 6,
            mask_radius: 3,
            seed: 9,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&SceneSpec { seed: 10, ..small() }).unwrap();
        assert_ne!(a.counties[0].productivity, c.counties[0].productivity);
    }

    #[test]
    fn ratios_count_fine_cells() {
        let spec = small();
        let scene = generate(&spec).unwrap();
        let f2 = (spec.fine_per_coarse * spec.fine_per_coarse) as f64;
        for county in &scene.counties {
            for (c, &r) in county.ratios.iter().enumerate() {
                assert!((0.0..=1.0).contains(&r));
                assert_eq!(r, county.corn_count(&spec, c) as f64 / f2);
            }
        }
    }

    #[test]
    fn noiseless_yield_is_affine_in_productivity() {
        let spec = SceneSpec {
            n_counties: 200,
            coarse_grid: 2,
            fine_per_coarse: 4,
            mask_radius: 1,
            yield_noise: 0.0,
            ..SceneSpec::default()
        };
        let scene = generate(&spec).unwrap();
        for c in &scene.counties {
            assert!((c.yield_ - (10.0 * c.productivity + 5.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn bands_stay_in_reflectance_range() {
        let scene = generate(&small()).unwrap();
        for c in &scene.counties {
            assert!(c.bands.iter().all(|v| (REFLECTANCE_FLOOR..=1.0).contains(v)));
            assert!(c.temporal.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn corn_fractions_span_the_range() {
        let spec = SceneSpec {
            n_counties: 60,
            speckle: 0.0,
            ..small()
        };
        let scene = generate(&spec).unwrap();
        let fr: Vec<f64> = scene.counties.iter().map(|c| c.corn_fraction).collect();
        let min = fr.iter().copied().fold(1.0, f64::min);
        let max = fr.iter().copied().fold(0.0, f64::max);
        assert!(min < 0.25 && max > 0.75, "{min} {max}");
    }

    #[test]
    fn pure_corn_cells_track_productivity() {
        let scene = generate(&SceneSpec {
            feature_noise: 0.0,
            fine_per_coarse: 2,
            n_counties: 40,
            ..small()
        })
        .unwrap();
        let steps = scene.spec.time_steps;
        let peak = (0..steps).max_by(|&a, &b| phenology(a, steps).total_cmp(&phenology(b, steps))).unwrap();
        let mut pts = Vec::new();
        for c in &scene.counties {
            for (cell, &r) in c.ratios.iter().enumerate() {
                if r == 1.0 {
                    pts.push((c.productivity, c.temporal[cell * 5 * steps + peak]));
                }
            }
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(pts.len() > 2);
        assert!(pts.windows(2).all(|w| w[0].1 <= w[1].1 + 1e-12));
    }

    #[test]
    fn box_blur_preserves_sum_and_wraps() {
        let side = 7;
        let mut field = vec![0.0; side * side];
        field[0] = 1.0;
        let out = box_blur(&field, side, 1);
        assert!((out.iter().sum::<f64>() - 9.0).abs() < 1e-12);
        assert_eq!(out[side * side - 1], 1.0);
        assert_eq!(out[2], 0.0);
    }

    #[test]
    fn invalid_spec_is_rejected() {
        assert!(generate(&SceneSpec { coarse_grid: 0, ..small() }).is_err());
        assert!(generate(&SceneSpec { yield_noise: -1.0, ..small() }).is_err());
    }

    #[test]
    fn feature_names_match_dim() {
        let spec = small();
        let names = spec.feature_names();
        assert_eq!(names.len(), spec.feature_dim());
        assert_eq!(names[0], "gci_1");
        assert_eq!(names.last().unwrap(), "historical");
    }
}
