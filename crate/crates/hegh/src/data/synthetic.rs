//! Synthetic image generator for retrieval experiments where some classes
//! are deliberately hard to tell apart.
//!
//! Classes in the same confusable group share their coarse appearance: the
//! background color and a large soft blob are drawn per group, so raw-pixel
//! distances inside a group are small. What identifies the class is a small
//! deterministic patch stamped at a class-specific position. Classes outside
//! any group get their own coarse appearance and are easy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::labels::LabelSet;
use crate::tensor::Tensor;

/// Recipe for a generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    /// Images generated per class.
    pub per_class: usize,
    /// Edge length of the square images.
    pub image_size: usize,
    /// Edge length of the class-identifying patch.
    pub patch_size: usize,
    /// Class sets that share coarse features. Classes listed nowhere get
    /// distinct coarse features of their own.
    pub confusable_groups: Vec<Vec<usize>>,
    /// Half-width of the uniform pixel noise, in [0, 1].
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 4,
            per_class: 500,
            image_size: 16,
            patch_size: 4,
            confusable_groups: vec![vec![0, 1], vec![2, 3]],
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.per_class == 0 {
            return Err(Error::Config(
                "synthetic spec needs at least one class and one image per class".into(),
            ));
        }
        if self.image_size == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be positive".into()));
        }
        if self.patch_size > self.image_size {
            return Err(Error::Config(format!(
                "patch_size {} is larger than the {}x{} image",
                self.patch_size, self.image_size, self.image_size
            )));
        }
        if !self.noise.is_finite() || !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!(
                "noise level {} must lie in [0, 1]",
                self.noise
            )));
        }
        let mut seen = vec![false; self.num_classes];
        for (g, group) in self.confusable_groups.iter().enumerate() {
            if group.len() < 2 {
                return Err(Error::Config(format!(
                    "confusable group {g} has {} class(es); groups need at least 2",
                    group.len()
                )));
            }
            for &class in group {
                if class >= self.num_classes {
                    return Err(Error::Config(format!(
                        "confusable group {g} names class {class}, but there are only {} classes",
                        self.num_classes
                    )));
                }
                if seen[class] {
                    return Err(Error::Config(format!(
                        "class {class} appears in more than one confusable group"
                    )));
                }
                seen[class] = true;
            }
        }
        Ok(())
    }

    /// Group id per class: explicit groups first, then a singleton group
    /// for every unassigned class.
    fn group_of(&self) -> Vec<usize> {
        let mut group = vec![usize::MAX; self.num_classes];
        for (g, members) in self.confusable_groups.iter().enumerate() {
            for &class in members {
                group[class] = g;
            }
        }
        let mut next = self.confusable_groups.len();
        for slot in group.iter_mut() {
            if *slot == usize::MAX {
                *slot = next;
                next += 1;
            }
        }
        group
    }

    fn group_count(&self) -> usize {
        let grouped: usize = self.confusable_groups.iter().map(Vec::len).sum();
        self.confusable_groups.len() + self.num_classes - grouped
    }
}

struct Coarse {
    background: [f64; 3],
    blob_color: [f64; 3],
    center: (f64, f64),
    radius: f64,
}

/// Mixes an integer into a well-scattered 64-bit value (splitmix64 finisher).
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Patch pixel for a class: a fixed per-class texture of dark and bright
/// cells, with the top-left cell holding a gray level unique to the class
/// so no two classes can share a patch.
fn patch_value(class: usize, num_classes: usize, row: usize, col: usize, ch: usize) -> f64 {
    if row == 0 && col == 0 {
        return 0.1 + 0.8 * (class as f64 + 1.0) / (num_classes as f64 + 1.0);
    }
    let key = mix(((class as u64) << 32) ^ ((row as u64) << 20) ^ ((col as u64) << 8) ^ ch as u64);
    if key & 1 == 0 {
        0.05
    } else {
        0.95
    }
}

/// Generates the dataset a spec describes. The same spec always produces
/// bit-identical output; images are grouped by class, `per_class` of each,
/// every pixel in [0, 1].
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let size = spec.image_size;
    let sizef = size as f64;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);

    let coarse: Vec<Coarse> = (0..spec.group_count())
        .map(|_| Coarse {
            background: std::array::from_fn(|_| rng.gen_range(0.15..0.6)),
            blob_color: std::array::from_fn(|_| rng.gen_range(0.3..0.9)),
            center: (rng.gen_range(0.25..0.75) * sizef, rng.gen_range(0.25..0.75) * sizef),
            radius: rng.gen_range(0.25..0.4) * sizef,
        })
        .collect();

    let group_of = spec.group_of();
    let span = size - spec.patch_size + 1;
    let mut dataset = LabeledDataset::new(spec.num_classes)?;
    for class in 0..spec.num_classes {
        let coarse = &coarse[group_of[class]];
        let (px, py) = ((class * 7 + 1) % span, (class * 3 + 2) % span);
        for _ in 0..spec.per_class {
            let jitter = (
                rng.gen_range(-0.08..0.08) * sizef,
                rng.gen_range(-0.08..0.08) * sizef,
            );
            let grow = rng.gen_range(0.9..1.1);
            let (cx, cy) = (coarse.center.0 + jitter.0, coarse.center.1 + jitter.1);
            let r2 = (coarse.radius * grow).powi(2);

            let mut pixels = vec![0f32; 3 * size * size];
            for ch in 0..3 {
                for y in 0..size {
                    for x in 0..size {
                        let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                        let mut v = if d2 <= r2 {
                            coarse.blob_color[ch]
                        } else {
                            coarse.background[ch]
                        };
                        if (py..py + spec.patch_size).contains(&y)
                            && (px..px + spec.patch_size).contains(&x)
                        {
                            v = patch_value(class, spec.num_classes, y - py, x - px, ch);
                        }
                        v += rng.gen_range(-spec.noise..=spec.noise);
                        pixels[(ch * size + y) * size + x] = v.clamp(0.0, 1.0) as f32;
                    }
                }
            }
            dataset.push(
                Tensor::from_vec(&[3, size, size], pixels)?,
                LabelSet::from_indices(spec.num_classes, &[class])?,
            )?;
        }
    }
    Ok(dataset)
}
