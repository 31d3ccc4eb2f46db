//! Fracture-location heatmaps.
//!
//! Every box contributes an axis-aligned Gaussian whose mean is the box
//! center and whose standard deviations are `sigma_scale` times the box axis
//! lengths. Kernels are left unnormalized, combined by pointwise maximum and
//! the map is divided by its global maximum, so every fracture peaks at 1
//! independent of its size.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::domain::{BBox, Resolution};
use crate::error::{Error, Result};
use crate::raster::Affine;

/// Sigma as a fraction of the box axis length.
pub const DEFAULT_SIGMA_SCALE: f64 = 0.5;

/// Location heatmap with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    values: Array2<f64>,
}

impl Heatmap {
    pub fn zeros(res: Resolution) -> Self {
        Self {
            values: Array2::zeros(res.shape()),
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn to_f32(&self) -> Array2<f32> {
        self.values.mapv(|v| v as f32)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// The heatmap resampled under an augmentation transform (bilinear, zero
    /// fill). Values stay in `[0, 1]`; the peak may fall below 1.
    pub fn warp(&self, affine: &Affine) -> Heatmap {
        if affine.is_identity() {
            return self.clone();
        }
        let warped = affine.warp_bilinear(&self.to_f32(), 0.0);
        Heatmap {
            values: warped.mapv(|v| f64::from(v).clamp(0.0, 1.0)),
        }
    }

    /// Position of the largest value (first in row-major order on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for ((r, c), &v) in self.values.indexed_iter() {
            if v > best_v {
                best_v = v;
                best = (r, c);
            }
        }
        best
    }

    /// Writes an 8-bit grayscale PNG with the peak mapped to 255.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (rows, cols) = self.values.dim();
        let pixels: Vec<u8> = self
            .values
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::GrayImage::from_raw(cols as u32, rows as u32, pixels)
            .expect("buffer matches dimensions")
            .save(path)?;
        Ok(())
    }
}

fn axis_kernel(len: usize, center: f64, sigma: f64) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let d = (i as f64 - center) / sigma;
            (-0.5 * d * d).exp()
        })
        .collect()
}

/// Renders the normalized location heatmap for `boxes`.
///
/// An empty box list yields the all-zero raster.
pub fn gaussian_heatmap(boxes: &[BBox], res: Resolution, sigma_scale: f64) -> Result<Heatmap> {
    if !(sigma_scale > 0.0 && sigma_scale.is_finite()) {
        return Err(Error::Config(format!(
            "sigma scale must be positive, got {sigma_scale}"
        )));
    }
    let mut values = Array2::<f64>::zeros(res.shape());
    for b in boxes {
        b.check_axes()?;
        if !b.center_within(res) {
            return Err(Error::InvalidBox(format!(
                "center ({}, {}) outside {res}",
                b.center_row, b.center_col
            )));
        }
        // exp(-(a + b)/2) factorizes into a row and a column kernel.
        let rows = axis_kernel(res.rows, b.center_row, sigma_scale * b.height);
        let cols = axis_kernel(res.cols, b.center_col, sigma_scale * b.width);
        for ((r, c), v) in values.indexed_iter_mut() {
            let k = rows[r] * cols[c];
            if k > *v {
                *v = k;
            }
        }
    }
    let peak = values.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        values.mapv_inplace(|v| v / peak);
    }
    Ok(Heatmap { values })
}

/// A detector output: a box with a confidence in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub bbox: BBox,
    pub confidence: f64,
}

/// Heatmap of all detections at or above `threshold`.
pub fn heatmap_from_detector(
    detections: &[Detection],
    threshold: f64,
    res: Resolution,
    sigma_scale: f64,
) -> Result<Heatmap> {
    let kept: Vec<BBox> = detections
        .iter()
        .filter(|d| d.confidence >= threshold)
        .map(|d| d.bbox)
        .collect();
    gaussian_heatmap(&kept, res, sigma_scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const RES: Resolution = Resolution::new(32, 32);

    fn bx(r: f64, c: f64, h: f64, w: f64) -> BBox {
        BBox::new(r, c, h, w).unwrap()
    }

    #[test]
    fn empty_boxes_give_zero_map() {
        let hm = gaussian_heatmap(&[], RES, DEFAULT_SIGMA_SCALE).unwrap();
        assert!(hm.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn peak_is_one_at_center() {
        let hm = gaussian_heatmap(&[bx(10.0, 12.0, 6.0, 4.0)], RES, DEFAULT_SIGMA_SCALE).unwrap();
        assert_eq!(hm.values()[[10, 12]], 1.0);
        assert_eq!(hm.argmax(), (10, 12));
    }

    #[test]
    fn one_sigma_offset_is_exp_minus_half() {
        let hm = gaussian_heatmap(&[bx(10.0, 12.0, 6.0, 4.0)], RES, DEFAULT_SIGMA_SCALE).unwrap();
        // sigma_h = 3 rows
        assert_abs_diff_eq!(hm.values()[[13, 12]], (-0.5f64).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(hm.values()[[10, 14]], (-0.5f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn duplicate_boxes_are_idempotent() {
        let b = bx(5.0, 20.0, 8.0, 8.0);
        let one = gaussian_heatmap(&[b], RES, 0.5).unwrap();
        let two = gaussian_heatmap(&[b, b], RES, 0.5).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn small_box_not_suppressed_by_large() {
        let hm = gaussian_heatmap(&[bx(5.0, 5.0, 2.0, 2.0), bx(25.0, 25.0, 16.0, 16.0)], RES, 0.5).unwrap();
        assert_abs_diff_eq!(hm.values()[[5, 5]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(hm.values()[[25, 25]], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_boxes() {
        let flat = BBox {
            center_row: 3.0,
            center_col: 3.0,
            height: 0.0,
            width: 2.0,
        };
        assert!(gaussian_heatmap(&[flat], RES, 0.5).is_err());
        assert!(gaussian_heatmap(&[bx(40.0, 3.0, 2.0, 2.0)], RES, 0.5).is_err());
    }

    #[test]
    fn detector_threshold_filters() {
        let hi = bx(8.0, 8.0, 4.0, 4.0);
        let lo = bx(24.0, 24.0, 4.0, 4.0);
        let dets = [
            Detection {
                bbox: hi,
                confidence: 0.9,
            },
            Detection {
                bbox: lo,
                confidence: 0.3,
            },
        ];
        let hm = heatmap_from_detector(&dets, 0.5, RES, 0.5).unwrap();
        assert_eq!(hm, gaussian_heatmap(&[hi], RES, 0.5).unwrap());

        let none = heatmap_from_detector(&dets, 0.95, RES, 0.5).unwrap();
        assert_eq!(none.max(), 0.0);

        let single = [Detection {
            bbox: lo,
            confidence: 1.0,
        }];
        assert_eq!(
            heatmap_from_detector(&single, 0.5, RES, 0.5).unwrap(),
            gaussian_heatmap(&[lo], RES, 0.5).unwrap()
        );
    }

    #[test]
    fn png_export_maps_peak_to_255() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hm.png");
        let hm = gaussian_heatmap(&[bx(4.0, 6.0, 2.0, 2.0)], Resolution::new(8, 12), 0.5).unwrap();
        hm.save_png(&path).unwrap();
        let img = image::open(&path).unwrap().to_luma8();
        assert_eq!(img.get_pixel(6, 4).0[0], 255);
        assert_eq!(img.dimensions(), (12, 8));
    }

    proptest! {
        #[test]
        fn single_box_symmetry_and_decay(
            r in 4.0f64..28.0, c in 4.0f64..28.0, h in 1.0f64..12.0, w in 1.0f64..12.0
        ) {
            let r = r.round();
            let c = c.round();
            let hm = gaussian_heatmap(&[bx(r, c, h, w)], RES, 0.5).unwrap();
            let v = hm.values();
            let (ri, ci) = (r as usize, c as usize);
            for d in 1..=ri.min(31 - ri) {
                prop_assert!((v[[ri + d, ci]] - v[[ri - d, ci]]).abs() < 1e-9);
            }
            for d in 1..=ci.min(31 - ci) {
                prop_assert!((v[[ri, ci + d]] - v[[ri, ci - d]]).abs() < 1e-9);
            }
            // non-increasing along the four axis rays
            for d in 1..(32 - ri) {
                prop_assert!(v[[ri + d, ci]] <= v[[ri + d - 1, ci]]);
            }
            for d in 1..(32 - ci) {
                prop_assert!(v[[ri, ci + d]] <= v[[ri, ci + d - 1]]);
            }
            prop_assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        #[test]
        fn argmax_follows_joint_rescale(r in 0usize..16, c in 0usize..16, k in 2usize..4) {
            let small = Resolution::new(16, 16);
            let big = Resolution::new(16 * k, 16 * k);
            let b = bx(r as f64, c as f64, 3.0, 3.0);
            let scaled = crate::ingest::rescale_box(&b, small, big).unwrap();
            let hm = gaussian_heatmap(&[scaled], big, 0.5).unwrap();
            prop_assert_eq!(hm.argmax(), (r * k, c * k));
        }
    }
}
