//! Turning samples into model batches, with optional per-sample augmentation.

use candle_core::Tensor;
use rayon::prelude::*;

use crate::domain::{BBox, ModalityConfig, Resolution, Sample};
use crate::error::{Error, Result};
use crate::heatmap::{gaussian_heatmap, Heatmap};
use crate::model::{assemble_spatial_input, device, stack_inputs, DTYPE};
use crate::raster::Affine;
use crate::seed;
use crate::train::{sample_affine, AffineRanges};

/// Applies one transform to every raster of a sample: bilinear for the
/// image, nearest for the segmentation, bilinear for the heatmap. Box centers
/// move with the transform; axis lengths scale.
pub fn augment_sample(s: &Sample, hm: Option<&Heatmap>, affine: &Affine) -> (Sample, Option<Heatmap>) {
    if affine.is_identity() {
        return (s.clone(), hm.cloned());
    }
    let (rows, cols) = s.image.dim();
    let res = Resolution::new(rows, cols);
    let boxes = s
        .boxes
        .iter()
        .map(|b| {
            let (r, c) = affine.apply(b.center_row, b.center_col, res);
            BBox {
                center_row: r,
                center_col: c,
                height: b.height * affine.scale,
                width: b.width * affine.scale,
            }
        })
        .collect();
    let out = Sample {
        id: s.id.clone(),
        image: affine.warp_bilinear(&s.image, 0.0),
        segmentation: s.segmentation.as_ref().map(|m| affine.warp_nearest(m, 0)),
        boxes,
        report: s.report.clone(),
        labels: s.labels.clone(),
    };
    (out, hm.map(|h| h.warp(affine)))
}

/// Augmentation settings for one epoch.
#[derive(Debug, Clone, Copy)]
pub struct EpochAugment<'a> {
    pub ranges: &'a AffineRanges,
    pub seed: u64,
    pub epoch: u64,
}

/// Samples plus the per-sample heatmaps and report embeddings a modality
/// configuration needs.
pub struct FusionInputs<'a> {
    samples: &'a [Sample],
    mcfg: ModalityConfig,
    heatmaps: Option<Vec<Heatmap>>,
    text: Option<Tensor>,
}

impl<'a> FusionInputs<'a> {
    pub fn new(
        samples: &'a [Sample],
        mcfg: ModalityConfig,
        heatmaps: Option<Vec<Heatmap>>,
        text: Option<Tensor>,
    ) -> Result<Self> {
        match (&heatmaps, mcfg.use_fracture_location) {
            (Some(h), true) if h.len() == samples.len() => {}
            (None, false) => {}
            _ => {
                return Err(Error::Config(
                    "heatmaps must be given exactly when fracture location is on, one per sample".into(),
                ))
            }
        }
        match (&text, mcfg.use_report) {
            (Some(t), true) if t.dim(0)? == samples.len() => {}
            (None, false) => {}
            _ => {
                return Err(Error::Config(
                    "report embeddings must be given exactly when reports are on, one row per sample".into(),
                ))
            }
        }
        if mcfg.use_segmentation {
            if let Some(s) = samples.iter().find(|s| s.segmentation.is_none()) {
                return Err(Error::Dataset(format!("{}: segmentation required but absent", s.id)));
            }
        }
        Ok(Self {
            samples,
            mcfg,
            heatmaps,
            text,
        })
    }

    /// Heatmaps rendered from each sample's own (ground-truth) boxes.
    pub fn ground_truth(
        samples: &'a [Sample],
        mcfg: ModalityConfig,
        sigma_scale: f64,
        text: Option<Tensor>,
    ) -> Result<Self> {
        let heatmaps = if mcfg.use_fracture_location {
            Some(
                samples
                    .par_iter()
                    .map(|s| {
                        let (r, c) = s.image.dim();
                        gaussian_heatmap(&s.boxes, Resolution::new(r, c), sigma_scale)
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Self::new(samples, mcfg, heatmaps, text)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        self.samples
    }

    pub fn modalities(&self) -> ModalityConfig {
        self.mcfg
    }

    /// Spatial batch `(B, C, H, W)` and the matching report rows.
    pub fn batch(&self, idx: &[usize], augment: Option<EpochAugment>) -> Result<(Tensor, Option<Tensor>)> {
        let arrays = idx
            .par_iter()
            .map(|&i| {
                let s = &self.samples[i];
                let hm = self.heatmaps.as_ref().map(|h| &h[i]);
                match augment {
                    Some(a) => {
                        let mut rng = seed::rng(a.seed, &s.id, a.epoch);
                        let affine = sample_affine(a.ranges, &mut rng);
                        let (s2, h2) = augment_sample(s, hm, &affine);
                        assemble_spatial_input(&s2, self.mcfg, h2.as_ref())
                    }
                    None => assemble_spatial_input(s, self.mcfg, hm),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let x = stack_inputs(&arrays)?;
        let z = match &self.text {
            Some(t) => {
                let ids = Tensor::new(idx.iter().map(|&i| i as u32).collect::<Vec<_>>().as_slice(), &device())?;
                Some(t.index_select(&ids, 0)?)
            }
            None => None,
        };
        Ok((x, z))
    }

    /// Multilabel targets `(B, K)`.
    pub fn targets(&self, idx: &[usize]) -> Result<Tensor> {
        let k = self.samples.first().map(|s| s.labels.len()).unwrap_or(0);
        let mut v = Vec::with_capacity(idx.len() * k);
        for &i in idx {
            v.extend(self.samples[i].labels.as_f32());
        }
        Ok(Tensor::from_vec(v, (idx.len(), k), &device())?.to_dtype(DTYPE)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::LabelSpace;
    use ndarray::Array2;

    fn sample(id: &str) -> Sample {
        let mut seg = Array2::<u32>::zeros((64, 32));
        for r in 10..40 {
            for c in 5..20 {
                seg[[r, c]] = 0b11;
            }
        }
        for r in 30..50 {
            for c in 15..25 {
                seg[[r, c]] |= 1 << 7;
            }
        }
        Sample {
            id: id.into(),
            image: Array2::from_shape_fn((64, 32), |(r, c)| ((r * 3 + c) % 7) as f32),
            segmentation: Some(seg),
            boxes: vec![BBox::new(30.0, 14.0, 8.0, 6.0).unwrap()],
            report: None,
            labels: LabelSpace::grazped_default().encode(&["23r-M/2.1"]).0,
        }
    }

    #[test]
    fn nearest_warp_introduces_no_new_labels() {
        let s = sample("a");
        let before: std::collections::BTreeSet<u32> = s.segmentation.as_ref().unwrap().iter().copied().collect();
        let ranges = AffineRanges::default();
        for k in 0..20 {
            let affine = sample_affine(&ranges, &mut seed::rng(1, "warp", k));
            let (out, _) = augment_sample(&s, None, &affine);
            assert!(out.segmentation.unwrap().iter().all(|v| before.contains(v)));
        }
    }

    #[test]
    fn augmentation_is_keyed_by_sample_and_epoch() {
        let samples = vec![sample("a"), sample("b")];
        let inputs = FusionInputs::ground_truth(&samples, ModalityConfig::new(true, true, false), 0.5, None).unwrap();
        let ranges = AffineRanges::default();
        let aug = |epoch| {
            Some(EpochAugment {
                ranges: &ranges,
                seed: 3,
                epoch,
            })
        };
        let both = inputs.batch(&[0, 1], aug(0)).unwrap().0;
        let second = inputs.batch(&[1], aug(0)).unwrap().0;
        let diff = (both.narrow(0, 1, 1).unwrap() - second)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
        let other_epoch = inputs.batch(&[1], aug(1)).unwrap().0;
        let diff = (both.narrow(0, 1, 1).unwrap() - other_epoch)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap();
        assert!(diff.to_scalar::<f32>().unwrap() > 0.0);
    }

    #[test]
    fn inputs_validate_modalities() {
        let samples = vec![sample("a")];
        assert!(FusionInputs::new(&samples, ModalityConfig::new(false, true, false), None, None).is_err());
        assert!(FusionInputs::new(&samples, ModalityConfig::new(false, false, true), None, None).is_err());
        let mut no_seg = sample("b");
        no_seg.segmentation = None;
        let v = vec![no_seg];
        assert!(FusionInputs::new(&v, ModalityConfig::new(true, false, false), None, None).is_err());
        let t = Tensor::zeros((1, 4), DTYPE, &device()).unwrap();
        let ok = FusionInputs::new(&samples, ModalityConfig::new(false, false, true), None, Some(t)).unwrap();
        let (x, z) = ok.batch(&[0], None).unwrap();
        assert_eq!(x.dims(), &[1, 1, 64, 32]);
        assert_eq!(z.unwrap().dims(), &[1, 4]);
        assert_eq!(ok.targets(&[0]).unwrap().dims(), &[1, 8]);
    }
}
