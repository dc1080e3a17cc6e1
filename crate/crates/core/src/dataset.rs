//! In-memory procedural HR/LR pairs.
//!
//! Item `i` of a dataset with seed `s` depends only on `(s, i)`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::degradation::{degrade, sample_recipe, DegradationRecipe, RecipeRanges};
use crate::error::{Error, Result};
use crate::image::ImagePatch;
use crate::textures::Texture;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub index: usize,
    pub texture: Texture,
    pub recipe: DegradationRecipe,
    pub hr: ImagePatch,
    pub lr: ImagePatch,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct DatasetConfig {
    pub count: usize,
    /// HR side length.
    pub size: usize,
    pub seed: u64,
    pub ranges: RecipeRanges,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { count: 1000, size: 32, seed: 7, ranges: RecipeRanges::default() }
    }
}

/// SplitMix64 finaliser, used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Number of training items in an 80/20 split, `round(0.8 n)` with halves
/// rounded up.
pub fn train_count(n: usize) -> usize {
    (8 * n + 5) / 10
}

pub fn sample_id(index: usize) -> String {
    format!("item{index:05}")
}

/// Builds item `index` of the dataset described by `config`.
pub fn synth_sample(config: &DatasetConfig, index: usize) -> Result<Sample> {
    if config.size == 0 || !config.size.is_multiple_of(config.ranges.scale) {
        return Err(Error::NotDivisible { dim: "size", value: config.size, factor: config.ranges.scale });
    }
    let item_seed = mix_seed(config.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
    let texture = Texture::sample(&mut rng, config.size);
    let hr = texture.render(config.size, config.size);
    let recipe = sample_recipe(mix_seed(item_seed, 1), &config.ranges);
    let lr = degrade(&hr, &recipe)?;
    Ok(Sample { id: sample_id(index), index, texture, recipe, hr, lr })
}

/// `(train, val)` item lists.
pub fn synth_dataset(config: &DatasetConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let all = (0..config.count).map(|i| synth_sample(config, i)).collect::<Result<Vec<_>>>()?;
    let mut train = all;
    let val = train.split_off(train_count(config.count));
    Ok((train, val))
}
