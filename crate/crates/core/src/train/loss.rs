//! Weighted binary cross entropy and the symmetric InfoNCE objective.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::model::device;

/// `ln(1 + e^x)` without overflow.
pub fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean over classes of `w_k y_k softplus(-x_k) + (1 - y_k) softplus(x_k)`,
/// which is `-[w y log s(x) + (1 - y) log(1 - s(x))]` in stable form.
pub fn weighted_bce(logits: &[f64], targets: &[u8], pos_weight: &[f64]) -> Result<f64> {
    if logits.len() != targets.len() || logits.len() != pos_weight.len() || logits.is_empty() {
        return Err(Error::Shape(format!(
            "bce inputs of lengths {}, {}, {}",
            logits.len(),
            targets.len(),
            pos_weight.len()
        )));
    }
    let total: f64 = logits
        .iter()
        .zip(targets)
        .zip(pos_weight)
        .map(
            |((&x, &y), &w)| {
                if y == 1 {
                    w * softplus_f64(-x)
                } else {
                    softplus_f64(x)
                }
            },
        )
        .sum();
    Ok(total / logits.len() as f64)
}

fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Batched weighted BCE: `logits` and `targets` are `(B, K)`, `pos_weight`
/// is `(K)`. Averaged over all `B * K` terms.
pub fn weighted_bce_tensor(logits: &Tensor, targets: &Tensor, pos_weight: &Tensor) -> Result<Tensor> {
    if logits.dims() != targets.dims() || logits.rank() != 2 || pos_weight.dims() != [logits.dim(1)?] {
        return Err(Error::Shape(format!(
            "bce logits {:?}, targets {:?}, weights {:?}",
            logits.dims(),
            targets.dims(),
            pos_weight.dims()
        )));
    }
    let positive = targets.broadcast_mul(pos_weight)?.mul(&softplus(&logits.neg()?)?)?;
    let negative = (1.0 - targets)?.mul(&softplus(logits)?)?;
    Ok((positive + negative)?.mean_all()?)
}

/// Symmetric InfoNCE over L2-normalized `(B, D)` embeddings. Row `i` of each
/// batch is the positive for row `i` of the other; `scale` is the inverse
/// temperature (scalar tensor).
pub fn info_nce(image: &Tensor, text: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let (b, d) = image.dims2()?;
    if text.dims() != [b, d] {
        return Err(Error::Shape(format!(
            "image {:?} vs text {:?}",
            image.dims(),
            text.dims()
        )));
    }
    if b < 2 {
        return Err(Error::Shape(format!("InfoNCE needs a batch of at least 2, got {b}")));
    }
    let logits = image.matmul(&text.t()?)?.broadcast_mul(scale)?;
    let targets = Tensor::arange(0u32, b as u32, &device())?;
    let i2t = candle_nn::loss::cross_entropy(&logits, &targets)?;
    let t2i = candle_nn::loss::cross_entropy(&logits.t()?, &targets)?;
    Ok(((i2t + t2i)? * 0.5)?)
}

/// In-batch retrieval accuracy: fraction of images whose most similar text
/// is their own.
pub fn retrieval_top1(image: &Tensor, text: &Tensor) -> Result<f64> {
    let sim = image.matmul(&text.t()?)?;
    let best = sim.argmax(D::Minus1)?.to_dtype(DType::U32)?.to_vec1::<u32>()?;
    let hits = best.iter().enumerate().filter(|(i, &j)| *i == j as usize).count();
    Ok(hits as f64 / best.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::l2_normalize;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn scalar(t: Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn bce_reference_cases() {
        assert_abs_diff_eq!(
            weighted_bce(&[0.0; 3], &[0; 3], &[1.0; 3]).unwrap(),
            2f64.ln(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            weighted_bce(&[0.0, 0.0], &[1, 0], &[2.0, 1.0]).unwrap(),
            1.5 * 2f64.ln(),
            epsilon = 1e-12
        );
        assert!(weighted_bce(&[30.0, -30.0], &[1, 0], &[5.0, 5.0]).unwrap() < 1e-4);
        assert!(weighted_bce(&[1e4], &[0], &[1.0]).unwrap().is_finite());
        assert!(weighted_bce(&[0.0], &[0, 1], &[1.0]).is_err());
    }

    #[test]
    fn bce_tensor_matches_scalar() {
        let logits = [[0.3, -2.0, 7.5], [-0.1, 4.0, -9.0]];
        let targets = [[1u8, 0, 1], [0, 1, 0]];
        let w = [3.0, 1.0, 0.5];
        let lt = Tensor::new(&logits, &device()).unwrap();
        let tt = Tensor::new(&[[1.0f64, 0.0, 1.0], [0.0, 1.0, 0.0]], &device()).unwrap();
        let wt = Tensor::new(&w, &device()).unwrap();
        let got = scalar(weighted_bce_tensor(&lt, &tt, &wt).unwrap());
        let want = (weighted_bce(&logits[0], &targets[0], &w).unwrap()
            + weighted_bce(&logits[1], &targets[1], &w).unwrap())
            / 2.0;
        assert_abs_diff_eq!(got, want, epsilon = 1e-12);
    }

    /// Direct evaluation of the InfoNCE definition.
    #[allow(clippy::needless_range_loop)]
    fn info_nce_oracle(sim: &[Vec<f64>]) -> f64 {
        let b = sim.len();
        let mut total = 0.0;
        for i in 0..b {
            let row: f64 = (0..b).map(|j| sim[i][j].exp()).sum();
            let col: f64 = (0..b).map(|j| sim[j][i].exp()).sum();
            total += -(sim[i][i].exp() / row).ln() - (sim[i][i].exp() / col).ln();
        }
        total / (2.0 * b as f64)
    }

    fn embeddings(b: usize, d: usize, offset: f64) -> Tensor {
        let v: Vec<f64> = (0..b * d).map(|i| ((i as f64 + offset) * 1.7).sin()).collect();
        l2_normalize(&Tensor::from_vec(v, (b, d), &device()).unwrap()).unwrap()
    }

    #[test]
    fn info_nce_matches_definition() {
        let a = embeddings(5, 4, 0.0);
        let b = embeddings(5, 4, 3.0);
        let scale = Tensor::new(2.5f64, &device()).unwrap();
        let got = scalar(info_nce(&a, &b, &scale).unwrap());
        let sim: Vec<Vec<f64>> = (a.matmul(&b.t().unwrap()).unwrap() * 2.5).unwrap().to_vec2().unwrap();
        assert_abs_diff_eq!(got, info_nce_oracle(&sim), epsilon = 1e-10);
    }

    #[test]
    fn info_nce_identity_and_errors() {
        let e = Tensor::eye(8, DType::F64, &device()).unwrap();
        let scale = Tensor::new(100.0f64, &device()).unwrap();
        assert!(scalar(info_nce(&e, &e, &scale).unwrap()) < 1e-3);
        let one = embeddings(1, 4, 0.0);
        assert!(info_nce(&one, &one, &scale).is_err());
    }

    #[test]
    fn retrieval_counts_diagonal_hits() {
        let e = Tensor::eye(4, DType::F32, &device()).unwrap();
        assert_eq!(retrieval_top1(&e, &e).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn info_nce_joint_permutation_invariant(perm in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle(), off in 0.0..10.0f64) {
            let a = embeddings(6, 3, off);
            let b = embeddings(6, 3, off + 5.0);
            let scale = Tensor::new(3.0f64, &device()).unwrap();
            let idx = Tensor::new(perm.iter().map(|&i| i as u32).collect::<Vec<_>>().as_slice(), &device()).unwrap();
            let pa = a.index_select(&idx, 0).unwrap();
            let pb = b.index_select(&idx, 0).unwrap();
            let base = scalar(info_nce(&a, &b, &scale).unwrap());
            let perm_loss = scalar(info_nce(&pa, &pb, &scale).unwrap());
            prop_assert!((base - perm_loss).abs() < 1e-10);
        }

        #[test]
        fn bce_is_non_negative(x in -50.0..50.0f64, y in 0u8..2, w in 0.1..100.0f64) {
            prop_assert!(weighted_bce(&[x], &[y], &[w]).unwrap() >= 0.0);
        }
    }

    #[test]
    fn info_nce_decreases_with_diagonal_similarity() {
        let off = [[0.0, 0.2, -0.1], [0.3, 0.0, 0.1], [-0.2, 0.05, 0.0]];
        let loss_at = |diag: f64| {
            let sim: Vec<f64> = (0..9)
                .map(|k| if k / 3 == k % 3 { diag } else { off[k / 3][k % 3] })
                .collect();
            // identity images against text = sim^T gives logits = sim
            let text = Tensor::from_vec(sim, (3, 3), &device()).unwrap().t().unwrap();
            let eye = Tensor::eye(3, DType::F64, &device()).unwrap();
            scalar(info_nce(&eye, &text, &Tensor::new(1.0f64, &device()).unwrap()).unwrap())
        };
        assert!(loss_at(0.9) < loss_at(0.5));
    }
}
