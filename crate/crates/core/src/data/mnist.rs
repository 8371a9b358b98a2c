//! MNIST IDX ingestion and the digit-collage dataset: each input is an
//! `n`-patch grid of 28x28 digits where exactly one patch is a "1" (label +1)
//! or a "0" (label -1) and the rest are digits 2-9.

use std::fs;
use std::path::Path;

use super::{Dataset, Provenance, Sample};
use crate::error::{Error, Result};
use crate::linalg::normalize;
use crate::rng::Rng;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn len(&self) -> usize {
        self.pixels.len() / (self.rows * self.cols).max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let sz = self.rows * self.cols;
        &self.pixels[i * sz..(i + 1) * sz]
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(path, "truncated IDX header"))
}

pub fn read_idx_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(path, format!("bad IDX image magic {magic:#010x}")));
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let need = 16 + count * rows * cols;
    if bytes.len() < need {
        return Err(Error::format(path, format!("expected {need} bytes, found {}", bytes.len())));
    }
    Ok(IdxImages {
        rows,
        cols,
        pixels: bytes[16..need].to_vec(),
    })
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(path, format!("bad IDX label magic {magic:#010x}")));
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    if bytes.len() < 8 + count {
        return Err(Error::format(path, "truncated IDX label payload"));
    }
    Ok(bytes[8..8 + count].to_vec())
}

fn patch_from(image: &[u8], source: &Path, index: usize) -> Result<Vec<f64>> {
    let mut v: Vec<f64> = image.iter().map(|&p| p as f64 / 255.0).collect();
    if normalize(&mut v) == 0.0 {
        return Err(Error::format(source, format!("image {index} is blank; cannot unit-normalize")));
    }
    Ok(v)
}

/// Builds disjoint train/test collages from one IDX image/label pair.
///
/// Every digit's pool is shuffled and split proportionally between the two
/// splits. Discriminative digits are used at most once; distractor digits are
/// drawn with replacement from their split's pool.
pub fn build_mnist_collage(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    n: usize,
    train_count: usize,
    test_count: usize,
    rng: &mut Rng,
) -> Result<(Dataset, Dataset)> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    if n < 1 {
        return Err(Error::invalid("n must be >= 1"));
    }
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.len() != labels.len() {
        return Err(Error::format(
            labels_path,
            format!("{} labels for {} images", labels.len(), images.len()),
        ));
    }
    let d = images.rows * images.cols;

    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); 10];
    for (i, &lab) in labels.iter().enumerate() {
        if lab > 9 {
            return Err(Error::format(labels_path, format!("label {lab} at {i} is not a digit")));
        }
        pools[lab as usize].push(i);
    }
    let mut split_rng = rng.fork("mnist-split");
    let total = (train_count + test_count).max(1);
    let mut train_pools = Vec::with_capacity(10);
    let mut test_pools = Vec::with_capacity(10);
    for pool in &mut pools {
        split_rng.shuffle(pool);
        let cut = (pool.len() * train_count + total / 2) / total;
        train_pools.push(pool[..cut].to_vec());
        test_pools.push(pool[cut..].to_vec());
    }

    let provenance = |split: &str| Provenance {
        source: "mnist-collage".into(),
        seed: Some(rng.seed()),
        params: serde_json::json!({
            "images": images_path.display().to_string(),
            "labels": labels_path.display().to_string(),
            "n": n,
            "split": split,
        }),
    };
    let build = |count: usize, pools: &[Vec<usize>], stream: &mut Rng, split: &str| -> Result<Dataset> {
        let positives = count.div_ceil(2);
        let negatives = count / 2;
        for (digit, need) in [(1usize, positives), (0, negatives)] {
            if pools[digit].len() < need {
                return Err(Error::format(
                    images_path,
                    format!(
                        "insufficient digit \"{digit}\" images for {split}: need {need}, have {}",
                        pools[digit].len()
                    ),
                ));
            }
        }
        let distractors: Vec<usize> = (2..10).filter(|&k| !pools[k].is_empty()).collect();
        if n > 1 && distractors.is_empty() {
            return Err(Error::format(images_path, "no digits 2-9 available for distractor patches"));
        }
        let mut ones = pools[1].clone();
        let mut zeros = pools[0].clone();
        stream.shuffle(&mut ones);
        stream.shuffle(&mut zeros);
        let mut labels_out: Vec<i32> = (0..count).map(|i| if i < positives { 1 } else { -1 }).collect();
        stream.shuffle(&mut labels_out);
        let (mut next_one, mut next_zero) = (0, 0);
        let mut samples = Vec::with_capacity(count);
        for label in labels_out {
            let disc_image = if label > 0 {
                next_one += 1;
                ones[next_one - 1]
            } else {
                next_zero += 1;
                zeros[next_zero - 1]
            };
            let disc_index = stream.below(n);
            let mut patches = Vec::with_capacity(n * d);
            for j in 0..n {
                let idx = if j == disc_index {
                    disc_image
                } else {
                    let digit = distractors[stream.below(distractors.len())];
                    pools[digit][stream.below(pools[digit].len())]
                };
                patches.extend(patch_from(images.image(idx), images_path, idx)?);
            }
            samples.push(Sample {
                patches,
                dim: d,
                label,
                disc_index,
            });
        }
        Dataset::new(samples, n, d, 2, provenance(split))
    };
    let train = build(train_count, &train_pools, &mut rng.fork("mnist-train"), "train")?;
    let test = build(test_count, &test_pools, &mut rng.fork("mnist-test"), "test")?;
    Ok((train, test))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::linalg::norm;

    /// Writes a tiny IDX pair whose "digits" are random blobs, `per_digit`
    /// images per class.
    pub(crate) fn write_fixture(dir: &Path, per_digit: usize, rows: usize, cols: usize) -> (std::path::PathBuf, std::path::PathBuf) {
        let mut rng = Rng::new(99);
        let count = per_digit * 10;
        let mut img = Vec::new();
        img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&(count as u32).to_be_bytes());
        img.extend_from_slice(&(rows as u32).to_be_bytes());
        img.extend_from_slice(&(cols as u32).to_be_bytes());
        let mut lab = Vec::new();
        lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(count as u32).to_be_bytes());
        for i in 0..count {
            let digit = (i % 10) as u8;
            for _ in 0..rows * cols {
                let v = if rng.uniform() < 0.2 { 1 + rng.below(255) } else { 0 };
                img.push(v as u8);
            }
            img[16 + i * rows * cols] = 200; // never blank
            lab.push(digit);
        }
        let ip = dir.join("images-idx3-ubyte");
        let lp = dir.join("labels-idx1-ubyte");
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn collage_structure() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_fixture(dir.path(), 40, 28, 28);
        let (train, test) = build_mnist_collage(&ip, &lp, 16, 50, 20, &mut Rng::new(1)).unwrap();
        assert_eq!(train.d, 784);
        assert_eq!(train.n, 16);
        assert_eq!(train.class_counts(), vec![25, 25]);
        assert_eq!(test.class_counts(), vec![10, 10]);
        for s in train.samples.iter().chain(&test.samples) {
            for q in s.patches() {
                assert!((norm(q) - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn balanced_thousand() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_fixture(dir.path(), 700, 4, 4);
        let (train, _) = build_mnist_collage(&ip, &lp, 16, 1000, 100, &mut Rng::new(1)).unwrap();
        assert_eq!(train.class_counts(), vec![500, 500]);
    }

    #[test]
    fn discriminative_digits_placed_once() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_fixture(dir.path(), 30, 5, 5);
        let images = read_idx_images(&ip).unwrap();
        let labels = read_idx_labels(&lp).unwrap();
        let (train, _) = build_mnist_collage(&ip, &lp, 9, 20, 10, &mut Rng::new(3)).unwrap();
        let digit_of = |patch: &[f64]| -> Vec<u8> {
            (0..images.len())
                .filter(|&i| {
                    let v = patch_from(images.image(i), &ip, i).unwrap();
                    v.iter().zip(patch).all(|(a, b)| (a - b).abs() < 1e-12)
                })
                .map(|i| labels[i])
                .collect()
        };
        for s in &train.samples {
            for (j, q) in s.patches().enumerate() {
                let digits = digit_of(q);
                assert!(!digits.is_empty());
                if j == s.disc_index {
                    assert_eq!(digits[0], if s.label > 0 { 1 } else { 0 });
                } else {
                    assert!(digits[0] >= 2);
                }
            }
        }
    }

    #[test]
    fn bad_magic_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_fixture(dir.path(), 5, 3, 3);
        // swapped files: magic check fails
        assert!(matches!(read_idx_images(&lp), Err(Error::Format { .. })));
        assert!(matches!(read_idx_labels(&ip), Err(Error::Format { .. })));
        let mut lab = fs::read(&lp).unwrap();
        lab[4..8].copy_from_slice(&49u32.to_be_bytes());
        lab.pop();
        fs::write(&lp, lab).unwrap();
        let err = build_mnist_collage(&ip, &lp, 4, 2, 2, &mut Rng::new(0)).unwrap_err();
        assert!(err.to_string().contains("labels for"), "{err}");
    }

    #[test]
    fn insufficient_digits() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_fixture(dir.path(), 4, 3, 3);
        let err = build_mnist_collage(&ip, &lp, 4, 100, 10, &mut Rng::new(0)).unwrap_err();
        assert!(err.to_string().contains("insufficient"), "{err}");
    }
}
