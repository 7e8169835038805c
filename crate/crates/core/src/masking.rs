//! Random fragment masking of input feature vectors.
//!
//! Every instance of view `v` gets one contiguous run of zeros of length
//! `l_v = round(σ·d_v)` (ties to even) starting at a uniformly drawn offset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    /// Fraction of each instance's dimensions to zero.
    pub rate: f64,
    pub seed: u64,
    /// Zero `l_v + 1` positions (`b..=b+l_v`) instead of `l_v`.
    #[serde(default)]
    pub inclusive: bool,
}

impl MaskSpec {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            seed,
            inclusive: false,
        }
    }

    /// Number of zeroed positions per instance for a view of width `dim`.
    pub fn fragment_len(&self, dim: usize) -> Result<usize> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::Contract(format!("mask rate must be in [0, 1), got {}", self.rate)));
        }
        let l = (self.rate * dim as f64).round_ties_even() as usize;
        let len = if self.inclusive && self.rate > 0.0 { l + 1 } else { l };
        if len > 0 && len >= dim {
            return Err(Error::Contract(format!(
                "mask fragment of {len} covers a whole {dim}-dim instance"
            )));
        }
        Ok(len)
    }
}

/// One 0/1 mask matrix per view.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    masks: Vec<Matrix>,
}

impl MaskSet {
    pub fn masks(&self) -> &[Matrix] {
        &self.masks
    }

    pub fn into_masks(self) -> Vec<Matrix> {
        self.masks
    }
}

pub fn build_masks(n: usize, dims: &[usize], spec: &MaskSpec) -> Result<MaskSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let masks = dims
        .iter()
        .map(|&d| {
            let len = spec.fragment_len(d)?;
            let mut m = Matrix::ones(n, d);
            if len > 0 {
                for i in 0..n {
                    let start = rng.random_range(0..=d - len);
                    m.row_mut(i)[start..start + len].fill(0.0);
                }
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;
    Ok(MaskSet { masks })
}

/// `X ⊙ M` per view; inputs are left untouched.
pub fn apply_masks(views: &[Matrix], masks: &MaskSet) -> Result<Vec<Matrix>> {
    if views.len() != masks.masks.len() {
        return Err(Error::dim("apply_masks", (views.len(), 0), (masks.masks.len(), 0)));
    }
    views
        .iter()
        .zip(&masks.masks)
        .map(|(x, m)| {
            if x.shape() != m.shape() {
                return Err(Error::dim("apply_masks", x.shape(), m.shape()));
            }
            x.zip_map(m, |a, b| a * b)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn zero_positions(row: &[f64]) -> Vec<usize> {
        row.iter().enumerate().filter(|(_, &v)| v == 0.0).map(|(k, _)| k).collect()
    }

    #[test]
    fn zero_rate_is_all_ones() {
        let set = build_masks(5, &[3, 8], &MaskSpec::new(0.0, 1)).unwrap();
        assert_eq!(set.masks()[0], Matrix::ones(5, 3));
        assert_eq!(set.masks()[1], Matrix::ones(5, 8));
    }

    #[test]
    fn quarter_of_eight_is_two_consecutive() {
        let set = build_masks(50, &[8], &MaskSpec::new(0.25, 9)).unwrap();
        for i in 0..50 {
            let z = zero_positions(set.masks()[0].row(i));
            assert_eq!(z.len(), 2);
            assert_eq!(z[1], z[0] + 1);
        }
    }

    #[test]
    fn inclusive_switch_adds_one() {
        let spec = MaskSpec {
            inclusive: true,
            ..MaskSpec::new(0.25, 9)
        };
        assert_eq!(spec.fragment_len(8).unwrap(), 3);
        assert_eq!(MaskSpec::new(0.25, 9).fragment_len(8).unwrap(), 2);
    }

    #[test]
    fn rounding_is_half_to_even() {
        // 0.25 * 10 = 2.5 -> 2, 0.25 * 14 = 3.5 -> 4
        assert_eq!(MaskSpec::new(0.25, 0).fragment_len(10).unwrap(), 2);
        assert_eq!(MaskSpec::new(0.25, 0).fragment_len(14).unwrap(), 4);
    }

    #[test]
    fn fragment_covering_view_is_error() {
        assert!(build_masks(2, &[2], &MaskSpec::new(0.75, 0)).is_err());
        assert!(build_masks(2, &[4], &MaskSpec::new(1.0, 0)).is_err());
    }

    #[test]
    fn same_seed_same_masks() {
        let s = MaskSpec::new(0.3, 17);
        assert_eq!(build_masks(20, &[7, 11], &s).unwrap(), build_masks(20, &[7, 11], &s).unwrap());
    }

    #[test]
    fn apply_cases() {
        let x = Matrix::ones(2, 4);
        let ones = MaskSet { masks: vec![Matrix::ones(2, 4)] };
        assert_eq!(apply_masks(&[x.clone()], &ones).unwrap()[0], x);
        let m = Matrix::from_rows(&[[1.0, 0.0, 0.0, 1.0], [1.0, 1.0, 1.0, 1.0]]).unwrap();
        let out = apply_masks(&[x.clone()], &MaskSet { masks: vec![m] }).unwrap();
        assert_eq!(out[0].row(0), &[1.0, 0.0, 0.0, 1.0]);
        assert!(apply_masks(&[Matrix::ones(3, 4)], &ones).is_err());
    }

    proptest! {
        #[test]
        fn mask_properties(n in 1usize..20, d in 2usize..30, rate in 0.0f64..0.9, seed in any::<u64>()) {
            let spec = MaskSpec::new(rate, seed);
            prop_assume!(spec.fragment_len(d).is_ok());
            let len = spec.fragment_len(d).unwrap();
            let set = build_masks(n, &[d], &spec).unwrap();
            let x = Matrix::from_fn(n, d, |i, j| if i % 3 == 0 { 0.0 } else { 1.0 + (i * d + j) as f64 });
            let masked = apply_masks(&[x.clone()], &set).unwrap();
            // removed mass is exactly the masked entries' mass
            let mut removed = 0.0;
            for i in 0..n {
                let z = zero_positions(set.masks()[0].row(i));
                prop_assert_eq!(z.len(), len);
                if let (Some(first), Some(last)) = (z.first(), z.last()) {
                    prop_assert_eq!(last - first + 1, len);
                    prop_assert!(*first <= d - len);
                }
                removed += z.iter().map(|&j| x.get(i, j)).sum::<f64>();
                if i % 3 == 0 {
                    prop_assert!(masked[0].row(i).iter().all(|&v| v == 0.0));
                }
            }
            prop_assert!((masked[0].sum() - (x.sum() - removed)).abs() < 1e-9);
        }
    }
}
