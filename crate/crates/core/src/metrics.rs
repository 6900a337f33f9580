//! Counting-error metrics over density maps: GAME(L), MAE and RMSE.
//!
//! GAME(L) splits every map into a `2^L × 2^L` grid of non-overlapping
//! regions and sums the absolute count error per region. The grid is built by
//! halving each axis `L` times (floor half first, remainder to the last half),
//! so extents divisible by `2^L` give equal regions and uneven extents push
//! the remainder into the last row and column. GAME(0) is the mean absolute
//! count error.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{fmt_shape, Tensor};

fn check_pairs<T: Scalar>(preds: &[Tensor<T>], gts: &[Tensor<T>], need_shape: bool) -> Result<()> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::Contract(format!(
            "metrics need equally many predictions and ground truths (>= 1), got {} and {}",
            preds.len(),
            gts.len()
        )));
    }
    if need_shape {
        for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
            if p.shape() != g.shape() || p.rank() != 2 {
                return Err(Error::Contract(format!(
                    "image {i}: prediction {} and ground truth {} must be equal H×W maps",
                    fmt_shape(p.shape()),
                    fmt_shape(g.shape())
                )));
            }
        }
    }
    Ok(())
}

fn region_sum<T: Scalar>(map: &Tensor<T>, rows: (usize, usize), cols: (usize, usize)) -> f64 {
    let w = map.shape()[1];
    let data = map.data();
    let mut acc = 0.0f64;
    for r in rows.0..rows.1 {
        for &v in &data[r * w + cols.0..r * w + cols.1] {
            acc += v.to_f64().unwrap_or(f64::NAN);
        }
    }
    acc
}

/// Extent of cell `i` after `level` rounds of halving; each split keeps the
/// floor half first, so the last row/column of cells absorbs remainders and
/// every level refines the previous one.
fn bounds(extent: usize, level: u32, i: usize) -> (usize, usize) {
    let (mut start, mut len) = (0, extent);
    for bit in (0..level).rev() {
        let half = len / 2;
        if (i >> bit) & 1 == 0 {
            len = half;
        } else {
            start += half;
            len -= half;
        }
    }
    (start, start + len)
}

/// Per-region counts of a rank-2 map on the `2^level` grid, row-major.
pub fn region_counts<T: Scalar>(map: &Tensor<T>, level: u32) -> Vec<f64> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let cells = 1usize << level;
    let mut out = Vec::with_capacity(cells * cells);
    for ry in 0..cells {
        for rx in 0..cells {
            out.push(region_sum(map, bounds(h, level, ry), bounds(w, level, rx)));
        }
    }
    out
}

/// Total count of a rank-2 map.
pub fn count<T: Scalar>(map: &Tensor<T>) -> f64 {
    region_sum(map, (0, map.shape()[0]), (0, map.shape()[1]))
}

pub fn game<T: Scalar>(preds: &[Tensor<T>], gts: &[Tensor<T>], level: u32) -> Result<f64> {
    check_pairs(preds, gts, true)?;
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        let per_image: f64 = region_counts(p, level)
            .iter()
            .zip(region_counts(g, level))
            .fold(0.0, |acc, (a, b)| acc + (a - b).abs());
        total += per_image;
    }
    Ok(total / preds.len() as f64)
}

pub fn mae<T: Scalar>(preds: &[Tensor<T>], gts: &[Tensor<T>]) -> Result<f64> {
    check_pairs(preds, gts, true)?;
    let total = preds
        .iter()
        .zip(gts)
        .fold(0.0, |acc, (p, g)| acc + (count(p) - count(g)).abs());
    Ok(total / preds.len() as f64)
}

pub fn rmse<T: Scalar>(preds: &[Tensor<T>], gts: &[Tensor<T>]) -> Result<f64> {
    check_pairs(preds, gts, true)?;
    let total = preds.iter().zip(gts).fold(0.0, |acc, (p, g)| {
        let d = count(p) - count(g);
        acc + d * d
    });
    Ok((total / preds.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![h, w], data.to_vec()).unwrap()
    }

    #[test]
    fn game0_single_image() {
        let p = vec![map(1, 2, &[4.0, 6.0])];
        let g = vec![map(1, 2, &[5.0, 7.0])];
        assert_eq!(game(&p, &g, 0).unwrap(), 2.0);
        assert_eq!(mae(&p, &g).unwrap(), 2.0);
        assert_eq!(rmse(&p, &g).unwrap(), 2.0);
    }

    #[test]
    fn game1_quadrants() {
        let p = vec![map(2, 2, &[2.0, 3.0, 1.0, 4.0])];
        let g = vec![map(2, 2, &[1.0, 3.0, 2.0, 4.0])];
        assert_eq!(game(&p, &g, 1).unwrap(), 2.0);
        assert_eq!(game(&p, &g, 0).unwrap(), 0.0);
    }

    #[test]
    fn rmse_two_images() {
        let p = vec![map(1, 1, &[3.0]), map(1, 1, &[0.0])];
        let g = vec![map(1, 1, &[0.0]), map(1, 1, &[4.0])];
        assert!((rmse(&p, &g).unwrap() - (12.5f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn uneven_regions_absorb_remainder() {
        let m = Tensor::from_fn(&[5, 3], |_| 1.0f64);
        let counts = region_counts(&m, 1);
        // rows split 2 | 3, columns 1 | 2
        assert_eq!(counts, vec![2.0, 4.0, 3.0, 6.0]);
        let total: f64 = region_counts(&m, 2).iter().sum();
        assert_eq!(total, 15.0);
        assert_eq!(bounds(10, 2, 1), (2, 5));
        assert_eq!(bounds(10, 2, 3), (7, 10));
        assert_eq!(bounds(1, 2, 0), (0, 0));
    }

    #[test]
    fn contract_errors() {
        let empty: Vec<Tensor<f64>> = Vec::new();
        assert!(matches!(game(&empty, &empty, 0), Err(Error::Contract(_))));
        assert!(matches!(rmse(&empty, &empty), Err(Error::Contract(_))));
        let p = vec![map(1, 2, &[1.0, 1.0])];
        let g = vec![map(2, 1, &[1.0, 1.0])];
        assert!(matches!(game(&p, &g, 1), Err(Error::Contract(_))));
    }
}
