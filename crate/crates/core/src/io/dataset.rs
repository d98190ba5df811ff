use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::idx::{read_idx, read_idx_labels};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images `[N, C, H, W]` with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Option<Vec<u32>>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Option<Vec<u32>>) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::shape(format!(
                "images must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if !images.is_finite() {
            return Err(Error::NonFiniteInput("dataset images".into()));
        }
        if let Some(l) = &labels {
            if l.len() != images.shape()[0] {
                return Err(Error::shape(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.shape()[0]
                )));
            }
        }
        Ok(Self { images, labels })
    }

    /// Loads IDX images (3-d files gain a singleton channel axis) and
    /// optional IDX labels.
    pub fn load_idx(images: impl AsRef<Path>, labels: Option<&Path>) -> Result<Self> {
        let t = read_idx(images)?;
        let t = match *t.shape() {
            [n, h, w] => t.reshape(vec![n, 1, h, w])?,
            [_, _, _, _] => t,
            _ => {
                return Err(Error::shape(format!(
                    "image file must be 3-d or 4-d, got {:?}",
                    t.shape()
                )))
            }
        };
        let labels = labels.map(read_idx_labels).transpose()?;
        Self::new(t, labels)
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks every label lies in `0..num_classes`.
    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        if let Some(bad) = self
            .labels()
            .into_iter()
            .flatten()
            .find(|&&l| l as usize >= num_classes)
        {
            return Err(Error::InvalidArgument(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let images = self.images.select_batch(indices)?;
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        Ok(Self { images, labels })
    }

    pub fn without_labels(self) -> Self {
        Self {
            images: self.images,
            labels: None,
        }
    }

    pub fn into_images(self) -> Tensor {
        self.images
    }
}

/// Seeded uniform sample of `k` distinct indices out of `n`, in sample order.
pub fn sample_indices(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::KTooLarge {
            requested: k,
            available: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, n, k).into_vec())
}

/// Unlabeled calibration subset of `k` images.
pub fn select_calibration(ds: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    if k == 0 {
        return Err(Error::InvalidArgument("calibration size must be positive".into()));
    }
    let idx = sample_indices(ds.len(), k, seed)?;
    Ok(ds.subset(&idx)?.without_labels())
}

/// Unlabeled training subset holding `fraction` of the dataset (at least
/// one image).
pub fn select_fraction(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
    }
    let k = ((ds.len() as f64 * fraction).round() as usize).max(1);
    select_calibration(ds, k, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(n: usize) -> Dataset {
        let images = Tensor::new(vec![n, 1, 1, 2], (0..2 * n).map(|i| i as f64).collect()).unwrap();
        Dataset::new(images, Some((0..n as u32).collect())).unwrap()
    }

    #[test]
    fn full_selection_is_permutation_without_labels() {
        let d = ds(10);
        let c = select_calibration(&d, 10, 7).unwrap();
        assert!(c.labels().is_none());
        let mut firsts: Vec<usize> = c.images().data().chunks(2).map(|r| r[0] as usize / 2).collect();
        firsts.sort();
        assert_eq!(firsts, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn selection_is_deterministic_per_seed() {
        let d = ds(50);
        assert_eq!(
            select_calibration(&d, 5, 1).unwrap(),
            select_calibration(&d, 5, 1).unwrap()
        );
        assert_ne!(
            select_calibration(&d, 5, 1).unwrap(),
            select_calibration(&d, 5, 2).unwrap()
        );
    }

    #[test]
    fn hundred_of_sixty_thousand_are_distinct() {
        let mut idx = sample_indices(60_000, 100, 0).unwrap();
        idx.sort();
        idx.dedup();
        assert_eq!(idx.len(), 100);
        assert!(idx.iter().all(|&i| i < 60_000));
    }

    #[test]
    fn too_many_requested() {
        assert!(matches!(
            select_calibration(&ds(3), 4, 0),
            Err(Error::KTooLarge {
                requested: 4,
                available: 3
            })
        ));
    }

    #[test]
    fn fraction_rounds_and_drops_labels() {
        let s = select_fraction(&ds(40), 0.1, 3).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.labels().is_none());
        assert!(select_fraction(&ds(40), 0.0, 3).is_err());
    }

    #[test]
    fn label_range_check() {
        assert!(ds(5).check_labels(5).is_ok());
        assert!(ds(5).check_labels(4).is_err());
    }
}
