//! Domain types shared by every stage of the pipeline: the AO/OTA label
//! space, multilabel targets, fracture boxes, samples and modality configs.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of bone labels carried by a segmentation raster.
pub const NUM_BONES: usize = 17;

/// Default head count of the classifier.
pub const DEFAULT_NUM_CLASSES: usize = 8;

/// Code used for the "no fracture" class in the default label space.
pub const NO_FRACTURE_CODE: &str = "no_fracture";

/// Spatial size of a raster, rows first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Resolution {
    pub rows: usize,
    pub cols: usize,
}

impl Resolution {
    pub const fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    /// Model resolution used for the real radiographs.
    pub const fn full() -> Self {
        Self::new(384, 224)
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// Ordered set of AO/OTA class codes, one of which means "no fracture".
///
/// Codes are kept in lexicographic order so that report columns are stable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LabelSpaceRepr", into = "LabelSpaceRepr")]
pub struct LabelSpace {
    codes: Vec<String>,
    no_fracture: usize,
}

#[derive(Serialize, Deserialize)]
struct LabelSpaceRepr {
    codes: Vec<String>,
    no_fracture: String,
}

impl TryFrom<LabelSpaceRepr> for LabelSpace {
    type Error = Error;

    fn try_from(r: LabelSpaceRepr) -> Result<Self> {
        LabelSpace::new(r.codes, &r.no_fracture)
    }
}

impl From<LabelSpace> for LabelSpaceRepr {
    fn from(ls: LabelSpace) -> Self {
        let no_fracture = ls.codes[ls.no_fracture].clone();
        Self {
            codes: ls.codes,
            no_fracture,
        }
    }
}

impl LabelSpace {
    pub fn new<S: AsRef<str>>(codes: impl IntoIterator<Item = S>, no_fracture: &str) -> Result<Self> {
        let mut codes: Vec<String> = codes.into_iter().map(|c| c.as_ref().trim().to_string()).collect();
        if codes.iter().any(|c| c.is_empty()) {
            return Err(Error::InvalidLabelSpace("empty class code".into()));
        }
        let unique: BTreeSet<&String> = codes.iter().collect();
        if unique.len() != codes.len() {
            return Err(Error::InvalidLabelSpace("duplicate class codes".into()));
        }
        if codes.len() < 2 {
            return Err(Error::InvalidLabelSpace(format!(
                "need at least two classes, got {}",
                codes.len()
            )));
        }
        codes.sort();
        let no_fracture = codes
            .iter()
            .position(|c| c == no_fracture)
            .ok_or_else(|| Error::InvalidLabelSpace(format!("no-fracture code {no_fracture:?} missing")))?;
        Ok(Self { codes, no_fracture })
    }

    /// The eight classes used for GRAZPEDWRI-DX AP radiographs: seven
    /// frequent fracture codes plus "no fracture".
    pub fn grazped_default() -> Self {
        Self::new(
            [
                "23r-M/2.1",
                "23u-M/2.1",
                "23r-E/2.1",
                "23u-E/7",
                "23r-M/3.1",
                "23-M/2.1",
                "23r-E/1.1",
                NO_FRACTURE_CODE,
            ],
            NO_FRACTURE_CODE,
        )
        .expect("default label space is valid")
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn code(&self, index: usize) -> &str {
        &self.codes[index]
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.codes.iter().position(|c| c == code)
    }

    pub fn no_fracture_index(&self) -> usize {
        self.no_fracture
    }

    /// Indices of the fracture classes, in label-space order.
    pub fn fracture_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&i| i != self.no_fracture)
    }

    /// Builds a target vector from a list of codes. Codes outside the space
    /// are dropped and returned separately.
    pub fn encode<S: AsRef<str>>(&self, codes: &[S]) -> (LabelVector, Vec<String>) {
        let mut values = vec![0u8; self.len()];
        let mut dropped = Vec::new();
        for code in codes {
            match self.index_of(code.as_ref()) {
                Some(i) => values[i] = 1,
                None => dropped.push(code.as_ref().to_string()),
            }
        }
        (LabelVector { values }, dropped)
    }

    /// The target of a radiograph without any fracture.
    pub fn negative(&self) -> LabelVector {
        let mut values = vec![0u8; self.len()];
        values[self.no_fracture] = 1;
        LabelVector { values }
    }
}

/// Binary multilabel target.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct LabelVector {
    values: Vec<u8>,
}

impl TryFrom<Vec<u8>> for LabelVector {
    type Error = Error;

    fn try_from(values: Vec<u8>) -> Result<Self> {
        Self::from_bits(values)
    }
}

impl From<LabelVector> for Vec<u8> {
    fn from(v: LabelVector) -> Self {
        v.values
    }
}

impl LabelVector {
    pub fn from_bits(values: Vec<u8>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidLabel(format!("entry {bad} is not binary")));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, k: usize) -> bool {
        self.values[k] == 1
    }

    pub fn bits(&self) -> &[u8] {
        &self.values
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.values.iter().enumerate().filter(|(_, &v)| v == 1).map(|(i, _)| i)
    }
}

/// Axis-aligned fracture box: center plus full axis lengths, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub center_row: f64,
    pub center_col: f64,
    pub height: f64,
    pub width: f64,
}

impl BBox {
    pub fn new(center_row: f64, center_col: f64, height: f64, width: f64) -> Result<Self> {
        let b = Self {
            center_row,
            center_col,
            height,
            width,
        };
        b.check_axes()?;
        Ok(b)
    }

    pub fn check_axes(&self) -> Result<()> {
        if !(self.height > 0.0 && self.width > 0.0) || !self.height.is_finite() || !self.width.is_finite() {
            return Err(Error::InvalidBox(format!(
                "axis lengths must be positive, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn center_within(&self, res: Resolution) -> bool {
        (0.0..res.rows as f64).contains(&self.center_row) && (0.0..res.cols as f64).contains(&self.center_col)
    }
}

/// One AP radiograph with its optional companion modalities.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// Z-normalized grayscale image.
    pub image: Array2<f32>,
    /// Bone label bitmask per pixel; bit `b` set means bone `b` covers it.
    pub segmentation: Option<Array2<u32>>,
    pub boxes: Vec<BBox>,
    pub report: Option<String>,
    pub labels: LabelVector,
}

/// Checks a sample against the data invariants. Violations are returned as
/// descriptions; an empty list means the sample is consistent.
pub fn validate_sample(s: &Sample, ls: &LabelSpace, res: Resolution) -> Vec<String> {
    let mut violations = Vec::new();
    if s.image.dim() != res.shape() {
        violations.push(format!("image is {:?}, expected {:?}", s.image.dim(), res.shape()));
    }
    if let Some(seg) = &s.segmentation {
        if seg.dim() != s.image.dim() {
            violations.push(format!(
                "segmentation is {:?} but image is {:?}",
                seg.dim(),
                s.image.dim()
            ));
        }
        if seg.iter().any(|&m| m >> NUM_BONES != 0) {
            violations.push(format!("segmentation uses labels beyond the {NUM_BONES} bones"));
        }
    }
    if s.labels.len() != ls.len() {
        violations.push(format!(
            "label vector has {} entries, label space has {}",
            s.labels.len(),
            ls.len()
        ));
        return violations;
    }
    let negative = s.labels.get(ls.no_fracture_index());
    if negative && s.labels.positives().count() > 1 {
        violations.push("no-fracture set together with fracture classes".into());
    }
    if negative != s.boxes.is_empty() {
        violations.push(format!(
            "no-fracture flag is {} but sample has {} boxes",
            negative,
            s.boxes.len()
        ));
    }
    for (i, b) in s.boxes.iter().enumerate() {
        if b.check_axes().is_err() {
            violations.push(format!("box {i} has non-positive axis length"));
        }
        if !b.center_within(res) {
            violations.push(format!(
                "box {i} center ({}, {}) outside {res}",
                b.center_row, b.center_col
            ));
        }
    }
    violations
}

/// One of the three optional modalities; the radiograph is always used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Segmentation,
    FractureLocation,
    Report,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Segmentation, Modality::FractureLocation, Modality::Report];

    pub fn name(&self) -> &'static str {
        match self {
            Modality::Segmentation => "seg",
            Modality::FractureLocation => "loc",
            Modality::Report => "report",
        }
    }

    pub fn display_name(&self) -> &'static str {
        match self {
            Modality::Segmentation => "BoneSeg",
            Modality::FractureLocation => "FracLoc",
            Modality::Report => "Report",
        }
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "seg" | "segmentation" | "boneseg" => Ok(Modality::Segmentation),
            "loc" | "location" | "fracloc" | "heatmap" => Ok(Modality::FractureLocation),
            "report" | "text" => Ok(Modality::Report),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

/// Which optional modalities feed the classifier.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModalityConfig {
    pub use_segmentation: bool,
    pub use_fracture_location: bool,
    pub use_report: bool,
}

impl ModalityConfig {
    pub const fn new(use_segmentation: bool, use_fracture_location: bool, use_report: bool) -> Self {
        Self {
            use_segmentation,
            use_fracture_location,
            use_report,
        }
    }

    pub const fn image_only() -> Self {
        Self::new(false, false, false)
    }

    pub const fn everything() -> Self {
        Self::new(true, true, true)
    }

    /// All eight combinations, ordered by the bit pattern (seg, loc, report).
    pub fn all() -> [ModalityConfig; 8] {
        std::array::from_fn(|i| Self::new(i & 1 != 0, i & 2 != 0, i & 4 != 0))
    }

    pub fn uses(&self, m: Modality) -> bool {
        match m {
            Modality::Segmentation => self.use_segmentation,
            Modality::FractureLocation => self.use_fracture_location,
            Modality::Report => self.use_report,
        }
    }

    pub fn with(mut self, m: Modality, on: bool) -> Self {
        match m {
            Modality::Segmentation => self.use_segmentation = on,
            Modality::FractureLocation => self.use_fracture_location = on,
            Modality::Report => self.use_report = on,
        }
        self
    }

    /// Spatial input channels: radiograph, one-hot bones, heatmap.
    pub fn spatial_channels(&self) -> usize {
        1 + if self.use_segmentation { NUM_BONES } else { 0 } + usize::from(self.use_fracture_location)
    }

    /// Stable short name, e.g. `img+seg+loc`.
    pub fn name(&self) -> String {
        let mut parts = vec!["img"];
        parts.extend(Modality::ALL.iter().filter(|m| self.uses(**m)).map(|m| m.name()));
        parts.join("+")
    }

    /// Parses a comma separated modality list such as `seg,loc`.
    /// The empty string means radiograph only.
    pub fn parse_list(s: &str) -> Result<Self> {
        let mut cfg = Self::image_only();
        for part in s.split([',', '+']).map(str::trim).filter(|p| !p.is_empty()) {
            if part.eq_ignore_ascii_case("img") {
                continue;
            }
            cfg = cfg.with(part.parse()?, true);
        }
        Ok(cfg)
    }
}

impl fmt::Display for ModalityConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn sample(ls: &LabelSpace, boxes: Vec<BBox>, labels: LabelVector) -> Sample {
        Sample {
            id: "s".into(),
            image: Array2::zeros((8, 4)),
            segmentation: Some(Array2::zeros((8, 4))),
            boxes,
            report: None,
            labels: if labels.is_empty() { ls.negative() } else { labels },
        }
    }

    #[test]
    fn default_space_is_sorted_with_one_negative() {
        let ls = LabelSpace::grazped_default();
        assert_eq!(ls.len(), DEFAULT_NUM_CLASSES);
        let mut sorted = ls.codes().to_vec();
        sorted.sort();
        assert_eq!(sorted, ls.codes());
        assert_eq!(ls.codes().iter().filter(|c| *c == NO_FRACTURE_CODE).count(), 1);
        assert_eq!(ls.fracture_indices().count(), 7);
    }

    #[test]
    fn label_space_rejects_duplicates_and_missing_negative() {
        assert!(LabelSpace::new(["a", "a", "none"], "none").is_err());
        assert!(LabelSpace::new(["a", "b"], "none").is_err());
        assert!(LabelSpace::new(["none"], "none").is_err());
    }

    #[test]
    fn label_space_serde_keeps_negative_code() {
        let ls = LabelSpace::grazped_default();
        let json = serde_json::to_string(&ls).unwrap();
        assert_eq!(serde_json::from_str::<LabelSpace>(&json).unwrap(), ls);
    }

    #[test]
    fn encode_drops_unknown_codes() {
        let ls = LabelSpace::grazped_default();
        let (v, dropped) = ls.encode(&["23u-E/7", "22r-D/4.1"]);
        assert_eq!(dropped, vec!["22r-D/4.1".to_string()]);
        assert_eq!(v.positives().collect::<Vec<_>>(), vec![ls.index_of("23u-E/7").unwrap()]);
    }

    #[test]
    fn consistent_negative_passes() {
        let ls = LabelSpace::grazped_default();
        let s = sample(&ls, vec![], ls.negative());
        assert!(validate_sample(&s, &ls, Resolution::new(8, 4)).is_empty());
    }

    #[test]
    fn negative_with_box_is_one_violation() {
        let ls = LabelSpace::grazped_default();
        let b = BBox::new(2.0, 2.0, 1.0, 1.0).unwrap();
        let s = sample(&ls, vec![b], ls.negative());
        assert_eq!(validate_sample(&s, &ls, Resolution::new(8, 4)).len(), 1);
    }

    #[test]
    fn wrong_segmentation_height_is_one_violation() {
        let ls = LabelSpace::grazped_default();
        let mut s = sample(&ls, vec![], ls.negative());
        s.segmentation = Some(Array2::zeros((7, 4)));
        assert_eq!(validate_sample(&s, &ls, Resolution::new(8, 4)).len(), 1);
    }

    #[test]
    fn bbox_rejects_degenerate_axes() {
        assert!(BBox::new(1.0, 1.0, 0.0, 1.0).is_err());
        assert!(BBox::new(1.0, 1.0, 1.0, -2.0).is_err());
    }

    #[test]
    fn eight_distinct_modality_configs() {
        let all = ModalityConfig::all();
        let set: BTreeSet<_> = all.iter().collect();
        assert_eq!(set.len(), 8);
        let channels: BTreeSet<_> = all.iter().map(|c| c.spatial_channels()).collect();
        assert_eq!(channels, BTreeSet::from([1, 2, 18, 19]));
    }

    #[test]
    fn modality_list_parsing() {
        assert_eq!(ModalityConfig::parse_list("").unwrap(), ModalityConfig::image_only());
        assert_eq!(
            ModalityConfig::parse_list("seg,loc,report").unwrap(),
            ModalityConfig::everything()
        );
        assert_eq!(ModalityConfig::parse_list("img+loc").unwrap().name(), "img+loc");
        assert!(ModalityConfig::parse_list("seg,xray").is_err());
    }

    proptest! {
        #[test]
        fn label_vector_serde_round_trip(bits in proptest::collection::vec(0u8..=1, 1..16)) {
            let v = LabelVector::from_bits(bits.clone()).unwrap();
            let json = serde_json::to_vec(&v).unwrap();
            let back: LabelVector = serde_json::from_slice(&json).unwrap();
            prop_assert_eq!(back.bits(), &bits[..]);
        }
    }
}
