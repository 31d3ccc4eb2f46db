//! Resampling helpers for 2-D rasters.
//!
//! Coordinates are (row, col) with pixel centers at integer indices. Resizing
//! maps index `i` in the target to `i * src / dst` in the source, which is the
//! same convention [`crate::ingest::rescale_box`] uses for boxes.

use ndarray::Array2;

use crate::domain::Resolution;

/// Per-image z-normalization. A constant image becomes all zeros.
pub fn z_normalize(img: &mut Array2<f32>) {
    let n = img.len().max(1) as f64;
    let mean = img.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = img.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let inv = if std > 1e-12 { 1.0 / std } else { 0.0 };
    img.mapv_inplace(|v| ((v as f64 - mean) * inv) as f32);
}

fn bilinear_at(src: &Array2<f32>, r: f64, c: f64, fill: f32) -> f32 {
    let (rows, cols) = src.dim();
    if r < -0.5 || c < -0.5 || r > rows as f64 - 0.5 || c > cols as f64 - 0.5 {
        return fill;
    }
    let r = r.clamp(0.0, (rows - 1) as f64);
    let c = c.clamp(0.0, (cols - 1) as f64);
    let r0 = r.floor() as usize;
    let c0 = c.floor() as usize;
    let r1 = (r0 + 1).min(rows - 1);
    let c1 = (c0 + 1).min(cols - 1);
    let fr = (r - r0 as f64) as f32;
    let fc = (c - c0 as f64) as f32;
    let top = src[[r0, c0]] * (1.0 - fc) + src[[r0, c1]] * fc;
    let bottom = src[[r1, c0]] * (1.0 - fc) + src[[r1, c1]] * fc;
    top * (1.0 - fr) + bottom * fr
}

fn nearest_at<T: Copy>(src: &Array2<T>, r: f64, c: f64, fill: T) -> T {
    let (rows, cols) = src.dim();
    let ri = r.round();
    let ci = c.round();
    if ri < 0.0 || ci < 0.0 || ri >= rows as f64 || ci >= cols as f64 {
        return fill;
    }
    src[[ri as usize, ci as usize]]
}

pub fn resize_bilinear(src: &Array2<f32>, to: Resolution) -> Array2<f32> {
    let (rows, cols) = src.dim();
    if (rows, cols) == to.shape() {
        return src.clone();
    }
    let sr = rows as f64 / to.rows as f64;
    let sc = cols as f64 / to.cols as f64;
    Array2::from_shape_fn(to.shape(), |(i, j)| {
        let r = (i as f64 * sr).min((rows - 1) as f64);
        let c = (j as f64 * sc).min((cols - 1) as f64);
        bilinear_at(src, r, c, 0.0)
    })
}

pub fn resize_nearest<T: Copy>(src: &Array2<T>, to: Resolution) -> Array2<T> {
    let (rows, cols) = src.dim();
    if (rows, cols) == to.shape() {
        return src.clone();
    }
    let sr = rows as f64 / to.rows as f64;
    let sc = cols as f64 / to.cols as f64;
    Array2::from_shape_fn(to.shape(), |(i, j)| {
        let r = ((i as f64 * sr).round() as usize).min(rows - 1);
        let c = ((j as f64 * sc).round() as usize).min(cols - 1);
        src[[r, c]]
    })
}

/// Similarity transform about the raster center: rotate, scale, translate.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Affine {
    pub rotation_deg: f64,
    /// Translation as a fraction of (rows, cols).
    pub translate: (f64, f64),
    pub scale: f64,
}

impl Affine {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            translate: (0.0, 0.0),
            scale: 1.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    fn center(res: Resolution) -> (f64, f64) {
        ((res.rows as f64 - 1.0) / 2.0, (res.cols as f64 - 1.0) / 2.0)
    }

    /// Where the source point `(r, c)` lands in the output raster.
    pub fn apply(&self, r: f64, c: f64, res: Resolution) -> (f64, f64) {
        let (cr, cc) = Self::center(res);
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let (dr, dc) = (r - cr, c - cc);
        (
            cr + self.scale * (cos * dr - sin * dc) + self.translate.0 * res.rows as f64,
            cc + self.scale * (sin * dr + cos * dc) + self.translate.1 * res.cols as f64,
        )
    }

    /// Source point that lands on output point `(r, c)`.
    pub fn invert(&self, r: f64, c: f64, res: Resolution) -> (f64, f64) {
        let (cr, cc) = Self::center(res);
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let dr = (r - cr - self.translate.0 * res.rows as f64) / self.scale;
        let dc = (c - cc - self.translate.1 * res.cols as f64) / self.scale;
        (cr + cos * dr + sin * dc, cc - sin * dr + cos * dc)
    }

    pub fn warp_bilinear(&self, src: &Array2<f32>, fill: f32) -> Array2<f32> {
        if self.is_identity() {
            return src.clone();
        }
        let (rows, cols) = src.dim();
        let res = Resolution::new(rows, cols);
        Array2::from_shape_fn((rows, cols), |(i, j)| {
            let (r, c) = self.invert(i as f64, j as f64, res);
            bilinear_at(src, r, c, fill)
        })
    }

    pub fn warp_nearest<T: Copy>(&self, src: &Array2<T>, fill: T) -> Array2<T> {
        if self.is_identity() {
            return src.clone();
        }
        let (rows, cols) = src.dim();
        let res = Resolution::new(rows, cols);
        Array2::from_shape_fn((rows, cols), |(i, j)| {
            let (r, c) = self.invert(i as f64, j as f64, res);
            nearest_at(src, r, c, fill)
        })
    }
}
