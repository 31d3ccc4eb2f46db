//! Dataset loading and synthetic fixtures.
//!
//! A dataset root looks like
//!
//! ```text
//! root/
//!   annotations.csv     id,patient_id,projection,boxes,codes
//!   split.csv           id,split            (train | test)
//!   images/<id>.png     grayscale, 8 or 16 bit
//!   segmentations/<id>.png   RGB8, 24-bit bone bitmask (bit b = bone b)
//!   reports/<id>.txt
//! ```
//!
//! `boxes` holds `center_row:center_col:height:width` records separated by
//! `;` in source-image pixels, `codes` the AO/OTA codes separated by `;`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{validate_sample, BBox, LabelSpace, LabelVector, Resolution, Sample, NUM_BONES};
use crate::error::{Error, Result};
use crate::raster;

pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const SPLIT_FILE: &str = "split.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split tag {other:?}"))),
        }
    }
}

/// One row of `annotations.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    #[serde(default)]
    pub patient_id: String,
    pub projection: String,
    #[serde(default)]
    pub boxes: String,
    #[serde(default)]
    pub codes: String,
}

impl AnnotationRecord {
    pub fn parse_boxes(&self) -> Result<Vec<BBox>> {
        split_list(&self.boxes)
            .map(|rec| {
                let parts: Vec<f64> = rec
                    .split(':')
                    .map(|p| p.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Dataset(format!("{}: bad box {rec:?}: {e}", self.id)))?;
                match parts[..] {
                    [r, c, h, w] => BBox::new(r, c, h, w),
                    _ => Err(Error::Dataset(format!("{}: box {rec:?} needs 4 fields", self.id))),
                }
            })
            .collect()
    }

    pub fn parse_codes(&self) -> Vec<String> {
        split_list(&self.codes).map(str::to_string).collect()
    }

    pub fn is_ap(&self) -> bool {
        self.projection.trim().eq_ignore_ascii_case("ap")
    }
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(';').map(str::trim).filter(|p| !p.is_empty())
}

fn format_boxes(boxes: &[BBox]) -> String {
    boxes
        .iter()
        .map(|b| format!("{}:{}:{}:{}", b.center_row, b.center_col, b.height, b.width))
        .collect::<Vec<_>>()
        .join(";")
}

/// A retained radiograph, with boxes already at model resolution.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub id: String,
    pub patient_id: String,
    pub split: Split,
    pub image_path: PathBuf,
    pub segmentation_path: Option<PathBuf>,
    pub report: Option<String>,
    pub boxes: Vec<BBox>,
    pub labels: LabelVector,
    pub record: AnnotationRecord,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub resolution: Resolution,
    pub label_space: LabelSpace,
    pub entries: Vec<ManifestEntry>,
    /// Samples dropped during loading with the reason.
    pub excluded: Vec<(String, String)>,
    /// Ids of retained samples whose segmentation raster is missing.
    pub missing_segmentation: Vec<String>,
}

impl DatasetManifest {
    pub fn split_counts(&self) -> (usize, usize) {
        let train = self.entries.iter().filter(|e| e.split == Split::Train).count();
        (train, self.entries.len() - train)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Loads all samples of a split in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        let entries: Vec<&ManifestEntry> = self.split(split).collect();
        entries.par_iter().map(|e| self.load_sample(e)).collect()
    }

    /// Reads the rasters of one entry, z-normalizes and resizes them.
    pub fn load_sample(&self, e: &ManifestEntry) -> Result<Sample> {
        let mut image = read_grayscale(&e.image_path)?;
        raster::z_normalize(&mut image);
        let image = raster::resize_bilinear(&image, self.resolution);
        let segmentation = match &e.segmentation_path {
            Some(p) => Some(raster::resize_nearest(&read_bitmask(p)?, self.resolution)),
            None => None,
        };
        let sample = Sample {
            id: e.id.clone(),
            image,
            segmentation,
            boxes: e.boxes.clone(),
            report: e.report.clone(),
            labels: e.labels.clone(),
        };
        let violations = validate_sample(&sample, &self.label_space, self.resolution);
        if !violations.is_empty() {
            return Err(Error::Dataset(format!("{}: {}", e.id, violations.join("; "))));
        }
        Ok(sample)
    }
}

/// Scales a box from one raster size to another, per axis.
pub fn rescale_box(b: &BBox, from: Resolution, to: Resolution) -> Result<BBox> {
    if from.rows == 0 || from.cols == 0 || to.rows == 0 || to.cols == 0 {
        return Err(Error::Dimension(format!("cannot rescale {from} -> {to}")));
    }
    let sr = to.rows as f64 / from.rows as f64;
    let sc = to.cols as f64 / from.cols as f64;
    Ok(BBox {
        center_row: b.center_row * sr,
        center_col: b.center_col * sc,
        height: b.height * sr,
        width: b.width * sc,
    })
}

pub fn read_grayscale(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path)?.to_luma32f();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).expect("buffer matches dimensions"))
}

pub fn read_bitmask(path: &Path) -> Result<Array2<u32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| (p.0[0] as u32) << 16 | (p.0[1] as u32) << 8 | p.0[2] as u32)
        .collect();
    Ok(Array2::from_shape_vec((h as usize, w as usize), data).expect("buffer matches dimensions"))
}

pub fn write_bitmask(path: &Path, mask: &Array2<u32>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut buf = Vec::with_capacity(h * w * 3);
    for &m in mask.iter() {
        buf.extend_from_slice(&[(m >> 16) as u8, (m >> 8) as u8, m as u8]);
    }
    image::RgbImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer matches dimensions")
        .save(path)?;
    Ok(())
}

/// Writes a 16-bit grayscale PNG from values in `[0, 1]`.
pub fn write_grayscale16(path: &Path, img: &Array2<f32>) -> Result<()> {
    let (h, w) = img.dim();
    let data: Vec<u16> = img
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w as u32, h as u32, data)
        .expect("buffer matches dimensions")
        .save(path)?;
    Ok(())
}

fn read_split_file(path: &Path) -> Result<HashMap<String, Split>> {
    #[derive(Deserialize)]
    struct Row {
        id: String,
        split: String,
    }
    let mut out = HashMap::new();
    for row in csv::Reader::from_path(path)?.deserialize::<Row>() {
        let row = row?;
        let split = row.split.parse()?;
        if let Some(prev) = out.insert(row.id.clone(), split) {
            if prev != split {
                return Err(Error::Dataset(format!("{} listed in both splits", row.id)));
            }
        }
    }
    Ok(out)
}

/// Random patient-grouped split: every patient lands wholly in one split.
pub fn grouped_split<'a>(
    items: impl IntoIterator<Item = (&'a str, &'a str)>,
    test_fraction: f64,
    seed: u64,
) -> HashMap<String, Split> {
    let items: Vec<(&str, &str)> = items.into_iter().collect();
    let mut patients: Vec<&str> = items
        .iter()
        .map(|(id, p)| if p.is_empty() { *id } else { *p })
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (patients.len() as f64 * test_fraction).round() as usize;
    let test: BTreeSet<&str> = patients.into_iter().take(n_test).collect();
    items
        .into_iter()
        .map(|(id, p)| {
            let key = if p.is_empty() { id } else { p };
            let split = if test.contains(key) { Split::Test } else { Split::Train };
            (id.to_string(), split)
        })
        .collect()
}

/// Reads a dataset root into a manifest: keeps AP views, maps AO/OTA codes
/// onto `ls` and rescales boxes to `resolution`.
pub fn load_dataset(root: &Path, ls: &LabelSpace, resolution: Resolution) -> Result<DatasetManifest> {
    let index = root.join(ANNOTATIONS_FILE);
    if !index.is_file() {
        return Err(Error::Missing {
            what: "annotation index",
            path: index,
        });
    }
    let records: Vec<AnnotationRecord> = csv::Reader::from_path(&index)?
        .deserialize()
        .collect::<std::result::Result<_, _>>()?;
    let records: Vec<AnnotationRecord> = records.into_iter().filter(AnnotationRecord::is_ap).collect();

    let split_path = root.join(SPLIT_FILE);
    let splits = if split_path.is_file() {
        read_split_file(&split_path)?
    } else {
        log::warn!("{} missing, using a patient-grouped 80/20 split", split_path.display());
        grouped_split(records.iter().map(|r| (r.id.as_str(), r.patient_id.as_str())), 0.2, 0)
    };

    let mut manifest = DatasetManifest {
        root: root.to_path_buf(),
        resolution,
        label_space: ls.clone(),
        entries: Vec::new(),
        excluded: Vec::new(),
        missing_segmentation: Vec::new(),
    };
    let mut seen = BTreeSet::new();
    let no_fracture = ls.code(ls.no_fracture_index()).to_string();
    for record in records {
        if !seen.insert(record.id.clone()) {
            return Err(Error::Dataset(format!("duplicate id {}", record.id)));
        }
        let Some(&split) = splits.get(&record.id) else {
            manifest.excluded.push((record.id.clone(), "not in split file".into()));
            continue;
        };
        let image_path = root.join("images").join(format!("{}.png", record.id));
        if !image_path.is_file() {
            manifest.excluded.push((record.id.clone(), "image missing".into()));
            continue;
        }
        let (w, h) = image::image_dimensions(&image_path)?;
        let source = Resolution::new(h as usize, w as usize);
        let boxes = record
            .parse_boxes()?
            .iter()
            .map(|b| rescale_box(b, source, resolution).map(|b| clamp_center(b, resolution)))
            .collect::<Result<Vec<_>>>()?;
        let codes: Vec<String> = record.parse_codes().into_iter().filter(|c| *c != no_fracture).collect();
        let (mut labels, _dropped) = ls.encode(&codes);
        let has_fracture_code = labels.positives().next().is_some();
        match (boxes.is_empty(), has_fracture_code) {
            (true, false) => labels = ls.negative(),
            (false, true) => {}
            (true, true) => {
                manifest
                    .excluded
                    .push((record.id.clone(), "fracture codes without boxes".into()));
                continue;
            }
            (false, false) => {
                manifest
                    .excluded
                    .push((record.id.clone(), "fracture outside the label space".into()));
                continue;
            }
        }
        let seg = root.join("segmentations").join(format!("{}.png", record.id));
        let segmentation_path = if seg.is_file() {
            Some(seg)
        } else {
            manifest.missing_segmentation.push(record.id.clone());
            None
        };
        let report_path = root.join("reports").join(format!("{}.txt", record.id));
        let report = if report_path.is_file() {
            Some(fs::read_to_string(&report_path)?.trim().to_string())
        } else {
            None
        };
        manifest.entries.push(ManifestEntry {
            id: record.id.clone(),
            patient_id: record.patient_id.clone(),
            split,
            image_path,
            segmentation_path,
            report,
            boxes,
            labels,
            record,
        });
    }
    Ok(manifest)
}

fn clamp_center(mut b: BBox, res: Resolution) -> BBox {
    b.center_row = b.center_row.clamp(0.0, res.rows as f64 - 1.0);
    b.center_col = b.center_col.clamp(0.0, res.cols as f64 - 1.0);
    b
}

// ---------------------------------------------------------------------------
// Synthetic fixture

/// Bone layout in fractional (row, col) coordinates: rectangles
/// `(r0, r1, c0, c1)`. Radius and ulna shafts and epiphyses, eight carpals,
/// five metacarpals.
fn bone_layout() -> [(f64, f64, f64, f64); NUM_BONES] {
    let mut bones = [(0.0, 0.0, 0.0, 0.0); NUM_BONES];
    bones[0] = (0.46, 1.00, 0.14, 0.44); // radius
    bones[1] = (0.38, 0.46, 0.12, 0.46); // radial epiphysis
    bones[2] = (0.52, 1.00, 0.58, 0.80); // ulna
    bones[3] = (0.45, 0.52, 0.58, 0.80); // ulnar epiphysis
    for k in 0..8 {
        let row = (k / 4) as f64;
        let col = (k % 4) as f64;
        bones[4 + k] = (
            0.24 + 0.065 * row,
            0.30 + 0.065 * row,
            0.12 + 0.19 * col,
            0.28 + 0.19 * col,
        );
    }
    for k in 0..5 {
        let c0 = 0.08 + 0.18 * k as f64;
        bones[12 + k] = (0.0, 0.22, c0, c0 + 0.10);
    }
    bones
}

/// Anchor (fractional row, col) and a region name for each fracture slot.
const FRACTURE_SLOTS: [(f64, f64, &str); 7] = [
    (0.42, 0.29, "distal radial epiphysis"),
    (0.53, 0.29, "radial metaphysis"),
    (0.70, 0.29, "radial shaft"),
    (0.48, 0.69, "distal ulnar epiphysis"),
    (0.60, 0.69, "ulnar metaphysis"),
    (0.76, 0.69, "ulnar shaft"),
    (0.30, 0.50, "carpal row"),
];

const QUALIFIERS: [&str; 4] = ["subtle", "buckle type", "minimally displaced", "without displacement"];
const FILLERS: [&str; 4] = [
    "Soft tissues unremarkable.",
    "Growth plates open.",
    "Joint alignment preserved.",
    "Comparison with prior imaging recommended.",
];

struct FixtureSample {
    image: Array2<f32>,
    segmentation: Array2<u32>,
    boxes: Vec<BBox>,
    codes: Vec<String>,
    report: String,
}

fn render_fixture_sample(
    rng: &mut ChaCha8Rng,
    res: Resolution,
    fracture_slots: &[usize],
    ls: &LabelSpace,
) -> FixtureSample {
    let (rows, cols) = (res.rows as f64, res.cols as f64);
    let noise = Normal::new(0.0f32, 0.06).expect("valid sigma");
    let shift_r = rng.random_range(-0.02..0.02);
    let shift_c = rng.random_range(-0.03..0.03);

    let mut segmentation = Array2::<u32>::zeros(res.shape());
    for (b, &(r0, r1, c0, c1)) in bone_layout().iter().enumerate() {
        let (r0, r1) = ((r0 + shift_r) * rows, (r1 + shift_r) * rows);
        let (c0, c1) = ((c0 + shift_c) * cols, (c1 + shift_c) * cols);
        for ((r, c), m) in segmentation.indexed_iter_mut() {
            let (r, c) = (r as f64 + 0.5, c as f64 + 0.5);
            if r >= r0 && r < r1 && c >= c0 && c < c1 {
                *m |= 1 << b;
            }
        }
    }
    let mut image = segmentation.mapv(|m| if m != 0 { 0.65f32 } else { 0.25 });

    let fracture_codes: Vec<usize> = ls.fracture_indices().collect();
    let mut boxes = Vec::new();
    let mut codes = Vec::new();
    let mut phrases = Vec::new();
    for &slot in fracture_slots {
        let (ar, ac, region) = FRACTURE_SLOTS[slot % FRACTURE_SLOTS.len()];
        let center_r = ((ar + shift_r) * rows + rng.random_range(-0.8..0.8)).clamp(1.0, rows - 2.0);
        let center_c = ((ac + shift_c) * cols + rng.random_range(-0.8..0.8)).clamp(1.0, cols - 2.0);
        // Class-specific fracture line: orientation depends on the slot.
        let angle = (slot as f64 * 180.0 / FRACTURE_SLOTS.len() as f64).to_radians();
        let half_len = 0.09 * cols.max(8.0);
        let (dir_r, dir_c) = (angle.sin(), angle.cos());
        let mut extent_r: f64 = 1.0;
        let mut extent_c: f64 = 1.0;
        for ((r, c), v) in image.indexed_iter_mut() {
            let (dr, dc) = (r as f64 - center_r, c as f64 - center_c);
            let along = dr * dir_r + dc * dir_c;
            let across = (dr * dir_c - dc * dir_r).abs();
            if along.abs() <= half_len && across <= 0.75 {
                *v -= 0.4;
                extent_r = extent_r.max(dr.abs());
                extent_c = extent_c.max(dc.abs());
            }
        }
        boxes.push(BBox {
            center_row: center_r,
            center_col: center_c,
            height: 2.0 * extent_r + 2.0,
            width: 2.0 * extent_c + 2.0,
        });
        codes.push(ls.code(fracture_codes[slot % fracture_codes.len()]).to_string());
        phrases.push(format!(
            "Fracture of the {region}, {}.",
            QUALIFIERS[rng.random_range(0..QUALIFIERS.len())]
        ));
    }
    for v in image.iter_mut() {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
    }
    if phrases.is_empty() {
        phrases.push("No evidence of fracture.".into());
    }
    phrases.push(FILLERS[rng.random_range(0..FILLERS.len())].to_string());
    FixtureSample {
        image,
        segmentation,
        boxes,
        codes,
        report: phrases.join(" "),
    }
}

/// Writes a deterministic synthetic dataset with `n` AP radiographs to `dir`.
///
/// Every fracture class is rendered as a dark line whose position and
/// orientation identify the class; roughly 30% of the samples carry no
/// fracture. About 80% of the samples go to the training split.
pub fn make_synthetic_fixture(dir: &Path, seed: u64, n: usize, res: Resolution, ls: &LabelSpace) -> Result<PathBuf> {
    if n < 2 {
        return Err(Error::Config(format!("fixture needs at least 2 samples, got {n}")));
    }
    if res.rows < 16 || res.cols < 8 {
        return Err(Error::Dimension(format!("fixture resolution {res} too small")));
    }
    for sub in ["images", "segmentations", "reports"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let n_classes = ls.fracture_indices().count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut annotations = csv::Writer::from_path(dir.join(ANNOTATIONS_FILE))?;
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("s{i:05}");
        // Deterministic class coverage: 3 of every 10 samples are negative,
        // the rest cycle through the fracture classes, some with a second one.
        let slots: Vec<usize> = if i % 10 < 3 {
            Vec::new()
        } else {
            let first = (i * 3 + i / 10) % n_classes;
            let mut s = vec![first];
            if rng.random_bool(0.3) {
                let second = (first + 1 + rng.random_range(0..n_classes - 1)) % n_classes;
                s.push(second);
            }
            s
        };
        let fs_ = render_fixture_sample(&mut rng, res, &slots, ls);
        write_grayscale16(&dir.join("images").join(format!("{id}.png")), &fs_.image)?;
        write_bitmask(&dir.join("segmentations").join(format!("{id}.png")), &fs_.segmentation)?;
        fs::write(dir.join("reports").join(format!("{id}.txt")), &fs_.report)?;
        annotations.serialize(AnnotationRecord {
            id: id.clone(),
            patient_id: format!("p{:05}", i / 2),
            projection: "AP".into(),
            boxes: format_boxes(&fs_.boxes),
            codes: fs_.codes.join(";"),
        })?;
        ids.push(id);
    }
    annotations.flush()?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_test = ((n as f64) * 0.2).round().max(1.0) as usize;
    let test: BTreeSet<usize> = order.into_iter().take(n_test.min(n - 1)).collect();
    let mut split = csv::Writer::from_path(dir.join(SPLIT_FILE))?;
    split.write_record(["id", "split"])?;
    for (i, id) in ids.iter().enumerate() {
        split.write_record([id.as_str(), if test.contains(&i) { "test" } else { "train" }])?;
    }
    split.flush()?;
    Ok(dir.to_path_buf())
}

/// Counts of positives per class over a set of label vectors.
pub fn class_counts<'a>(labels: impl IntoIterator<Item = &'a LabelVector>, k: usize) -> BTreeMap<usize, usize> {
    let mut counts: BTreeMap<usize, usize> = (0..k).map(|i| (i, 0)).collect();
    for l in labels {
        for p in l.positives() {
            *counts.entry(p).or_default() += 1;
        }
    }
    counts
}
