//! Synthetic mixed-pixel scenes and bag sampling.
//!
//! Every county has a latent productivity ρ. Yield depends on ρ only.
//! Corn fine cells carry a seasonal signal whose height grows with ρ, while
//! coarse cells blend that signal with unrelated background land in
//! proportion to their corn ratio. Purer instances therefore say more
//! about the label, which is what attention pooling is expected to find.
//!
//! ```
//! use milgrain::synthgeo::{generate, sample_bags, SceneSpec};
//!
//! let spec = SceneSpec { n_counties: 4, coarse_grid: 4, fine_per_coarse: 4, mask_radius: 2, ..SceneSpec::default() };
//! let scene = generate(&spec).unwrap();
//! let data = sample_bags(&scene, 2, 0).unwrap();
//! assert_eq!(data.bags[0].instances.shape(), &[2, spec.feature_dim()]);
//! ```

mod bags;
mod dataset_io;
mod indices;
mod scene;

pub use bags::{
    columns_after, feature_groups, group_of, normalize_features, random_dataset, sample_bags, split, time_of,
    Bag, Dataset, FeatureStats, SplitSpec, Splits,
};
pub use dataset_io::{read_dataset, write_dataset, DatasetMeta};
pub use indices::{evi, gci, ndwi};
pub use scene::{fine_cells, generate, County, SceneSpec, SyntheticScene, BANDS, SOIL_GROUPS, TEMPORAL_GROUPS};
