//! Datasets of patch-structured inputs: the synthetic pattern distribution,
//! the MNIST collage, file IO, and linear-separability certification.

mod io;
mod mnist;
mod separability;
mod synthetic;

pub use io::{load_dataset, save_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use mnist::{build_mnist_collage, read_idx_images, read_idx_labels, IdxImages};
pub use separability::{check_linear_separability, SeparabilityReport};
pub use synthetic::{
    compute_delta, delta_prime, make_discriminative_patterns, make_pattern_sets, measure_l_star,
    sample_confusable_pattern, sample_input, sample_input_with_class, sample_irrelevant_pattern,
    set_diameter, PatternLibrary, Placement, SyntheticConfig,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maps a class index to the stored label. Binary problems use +1 / -1
/// (class 0 is +1); multi-class problems store the class index itself.
pub fn label_of(class: usize, num_classes: usize) -> i32 {
    if num_classes == 2 {
        if class == 0 {
            1
        } else {
            -1
        }
    } else {
        class as i32
    }
}

/// Inverse of [`label_of`].
pub fn class_of(label: i32, num_classes: usize) -> usize {
    if num_classes == 2 {
        if label > 0 {
            0
        } else {
            1
        }
    } else {
        label as usize
    }
}

/// One input: `n` unit-norm patches of dimension `d` stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub patches: Vec<f64>,
    pub dim: usize,
    pub label: i32,
    /// Where the class-discriminative patch sits. Ground truth for audits;
    /// models never read it.
    pub disc_index: usize,
}

impl Sample {
    pub fn num_patches(&self) -> usize {
        self.patches.len() / self.dim
    }

    #[inline]
    pub fn patch(&self, j: usize) -> &[f64] {
        &self.patches[j * self.dim..(j + 1) * self.dim]
    }

    pub fn patches(&self) -> impl Iterator<Item = &[f64]> {
        self.patches.chunks_exact(self.dim)
    }
}

/// Where a dataset came from; serialized as the JSON blob of the file format.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub params: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub n: usize,
    pub d: usize,
    pub c: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, n: usize, d: usize, c: usize, provenance: Provenance) -> Result<Self> {
        if c < 2 {
            return Err(Error::invalid(format!("class count must be >= 2, got {c}")));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.dim != d || s.patches.len() != n * d {
                return Err(Error::DimensionMismatch {
                    expected: n * d,
                    got: s.patches.len(),
                    context: "sample patch payload",
                });
            }
            if s.disc_index >= n {
                return Err(Error::invalid(format!("sample {i}: disc_index {} >= n", s.disc_index)));
            }
            let ok = if c == 2 {
                s.label == 1 || s.label == -1
            } else {
                (0..c as i32).contains(&s.label)
            };
            if !ok {
                return Err(Error::invalid(format!("sample {i}: label {} invalid for c={c}", s.label)));
            }
        }
        Ok(Dataset {
            samples,
            n,
            d,
            c,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_binary(&self) -> bool {
        self.c == 2
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.c];
        for s in &self.samples {
            counts[class_of(s.label, self.c)] += 1;
        }
        counts
    }

    /// First `count` samples as a new dataset (same provenance).
    pub fn head(&self, count: usize) -> Dataset {
        Dataset {
            samples: self.samples[..count.min(self.len())].to_vec(),
            ..self.clone_meta()
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            samples: Vec::new(),
            n: self.n,
            d: self.d,
            c: self.c,
            provenance: self.provenance.clone(),
        }
    }
}
