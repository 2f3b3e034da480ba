//! Splitting images into an `s × s` grid of equal, non-overlapping patches
//! and stitching per-patch outputs back together.
//!
//! Patches are always listed row-major: patch `r * s + c` covers rows
//! `r·H/s .. (r+1)·H/s` and columns `c·W/s .. (c+1)·W/s`. The same order is
//! used by token concatenation, so split, tokenize and stitch agree.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Number of patches per image side. Only 1, 2, 4 and 8 are supported.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct Scale(usize);

impl Scale {
    pub const ALL: [Scale; 4] = [Scale(1), Scale(2), Scale(4), Scale(8)];
    pub const ONE: Scale = Scale(1);

    pub fn new(s: usize) -> Result<Self> {
        match s {
            1 | 2 | 4 | 8 => Ok(Scale(s)),
            _ => Err(invalid!("scale {s} not in {{1, 2, 4, 8}}")),
        }
    }

    pub fn get(self) -> usize {
        self.0
    }

    pub fn patch_count(self) -> usize {
        self.0 * self.0
    }
}

impl TryFrom<usize> for Scale {
    type Error = Error;

    fn try_from(s: usize) -> Result<Self> {
        Scale::new(s)
    }
}

impl From<Scale> for usize {
    fn from(s: Scale) -> usize {
        s.0
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v: usize = s.trim().parse().map_err(|_| invalid!("scale {s:?} is not an integer"))?;
        Scale::new(v)
    }
}

/// An image decomposed into `s²` patches plus what is needed to stitch it back.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<T> {
    pub patches: Vec<Tensor<T>>,
    pub scale: Scale,
    pub original_shape: (usize, usize),
}

fn check_divisible(h: usize, w: usize, s: Scale) -> Result<()> {
    let s = s.get();
    if !h.is_multiple_of(s) {
        return Err(invalid!("height {h} is not divisible by scale {s}"));
    }
    if !w.is_multiple_of(s) {
        return Err(invalid!("width {w} is not divisible by scale {s}"));
    }
    Ok(())
}

/// Cuts a `[C, H, W]` image into its patch grid.
pub fn split<T: Scalar>(image: &Tensor<T>, s: Scale) -> Result<PatchGrid<T>> {
    let [c, h, w] = *image.shape() else {
        return Err(invalid!("expected [C, H, W] image, got {:?}", image.shape()));
    };
    let batch = image.clone().reshape(&[1, c, h, w])?;
    let patches = split_batch(&batch, s)?;
    let (ph, pw) = (h / s.get(), w / s.get());
    Ok(PatchGrid {
        patches: (0..s.patch_count())
            .map(|i| patches.index_axis0(i).reshape(&[c, ph, pw]).expect("patch shape"))
            .collect(),
        scale: s,
        original_shape: (h, w),
    })
}

/// Reassembles per-patch `[K, H/s, W/s]` arrays into a `[K, H, W]` array.
pub fn stitch<T: Scalar>(grid: &PatchGrid<T>) -> Result<Tensor<T>> {
    let s = grid.scale;
    if grid.patches.len() != s.patch_count() {
        return Err(invalid!("grid at scale {s} needs {} patches, got {}", s.patch_count(), grid.patches.len()));
    }
    let first = grid.patches[0].shape().to_vec();
    let [k, ph, pw] = *first.as_slice() else {
        return Err(invalid!("patches must be [K, h, w], got {first:?}"));
    };
    let (h, w) = grid.original_shape;
    if ph * s.get() != h || pw * s.get() != w {
        return Err(invalid!("patch size {ph}x{pw} at scale {s} does not tile {h}x{w}"));
    }
    let stacked = Tensor::stack(&grid.patches)?;
    stitch_batch(&stacked, s)?.reshape(&[k, h, w])
}

/// `[B, C, H, W]` → `[B·s², C, H/s, W/s]`, image-major then patch row-major.
pub fn split_batch<T: Scalar>(x: &Tensor<T>, s: Scale) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4();
    check_divisible(h, w, s)?;
    let s = s.get();
    if s == 1 {
        return x.clone().reshape(&[b, c, h, w]);
    }
    let (ph, pw) = (h / s, w / s);
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for r in 0..s {
            for col in 0..s {
                for ch in 0..c {
                    let plane = &src[(bi * c + ch) * h * w..][..h * w];
                    for y in 0..ph {
                        let row = (r * ph + y) * w + col * pw;
                        out.extend_from_slice(&plane[row..row + pw]);
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b * s * s, c, ph, pw], out)
}

/// Inverse of [`split_batch`]: `[B·s², C, h, w]` → `[B, C, h·s, w·s]`.
pub fn stitch_batch<T: Scalar>(x: &Tensor<T>, s: Scale) -> Result<Tensor<T>> {
    let (n, c, ph, pw) = x.dims4();
    let s = s.get();
    if n % (s * s) != 0 {
        return Err(invalid!("{n} patches is not a multiple of {} (scale {s})", s * s));
    }
    let b = n / (s * s);
    if s == 1 {
        return x.clone().reshape(&[b, c, ph, pw]);
    }
    let (h, w) = (ph * s, pw * s);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        for r in 0..s {
            for col in 0..s {
                let patch = bi * s * s + r * s + col;
                for ch in 0..c {
                    let from = &src[(patch * c + ch) * ph * pw..][..ph * pw];
                    let plane = &mut out[(bi * c + ch) * h * w..][..h * w];
                    for y in 0..ph {
                        let row = (r * ph + y) * w + col * pw;
                        plane[row..row + pw].copy_from_slice(&from[y * pw..(y + 1) * pw]);
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b, c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(&[c, h, w], |i| i as f64)
    }

    #[test]
    fn four_by_four_into_quadrants() {
        let grid = split(&ramp(1, 4, 4), Scale::new(2).unwrap()).unwrap();
        let got: Vec<Vec<f64>> = grid.patches.iter().map(|p| p.data().to_vec()).collect();
        assert_eq!(
            got,
            vec![
                vec![0.0, 1.0, 4.0, 5.0],
                vec![2.0, 3.0, 6.0, 7.0],
                vec![8.0, 9.0, 12.0, 13.0],
                vec![10.0, 11.0, 14.0, 15.0],
            ]
        );
    }

    #[test]
    fn scale_one_is_identity() {
        let img = ramp(2, 6, 4);
        let grid = split(&img, Scale::ONE).unwrap();
        assert_eq!(grid.patches.len(), 1);
        assert_eq!(grid.patches[0], img);
    }

    #[test]
    fn indivisible_size_names_dimension() {
        let err = split(&ramp(1, 6, 6), Scale::new(4).unwrap()).unwrap_err();
        assert!(err.to_string().contains("height 6"), "{err}");
        let err = split(&ramp(1, 8, 6), Scale::new(4).unwrap()).unwrap_err();
        assert!(err.to_string().contains("width 6"), "{err}");
    }

    #[test]
    fn unsupported_scale_rejected() {
        assert!(Scale::new(3).is_err());
        assert!(Scale::new(16).is_err());
        assert!("0".parse::<Scale>().is_err());
        assert_eq!("4".parse::<Scale>().unwrap().get(), 4);
    }

    #[test]
    fn stitch_rejects_wrong_patch_count() {
        let mut grid = split(&ramp(1, 4, 4), Scale::new(2).unwrap()).unwrap();
        grid.patches.pop();
        assert!(stitch(&grid).is_err());
    }

    #[test]
    fn sixty_four_patches_round_trip() {
        let img = Tensor::from_fn(&[3, 64, 64], |i| ((i * 2654435761usize) % 1000) as f64 / 7.0);
        let grid = split(&img, Scale::new(8).unwrap()).unwrap();
        assert_eq!(grid.patches.len(), 64);
        assert!(grid.patches.iter().all(|p| p.shape() == [3, 8, 8]));
        assert_eq!(stitch(&grid).unwrap(), img);
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(
            c in 1usize..3,
            hm in 1usize..4,
            wm in 1usize..4,
            si in 0usize..4,
            seed in any::<u64>(),
        ) {
            let s = Scale::ALL[si];
            let (h, w) = (hm * 8, wm * 8);
            let img = Tensor::from_fn(&[c, h, w], |i| ((seed ^ i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 11) as f64);
            let grid = split(&img, s).unwrap();
            prop_assert_eq!(grid.patches.iter().map(|p| p.len()).sum::<usize>(), img.len());
            prop_assert_eq!(stitch(&grid).unwrap(), img.clone());

            // pointwise maps commute with split/stitch
            let f = |v: f64| v.sqrt() - 1.0;
            let mapped = PatchGrid {
                patches: grid.patches.iter().map(|p| p.map(f)).collect(),
                ..grid
            };
            prop_assert_eq!(stitch(&mapped).unwrap(), img.map(f));
        }
    }
}
