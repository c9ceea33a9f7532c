//! Dataset ingestion, stratified splitting, class merging, oversampling,
//! and a synthetic fundus generator for desk-scale runs.
//!
//! The on-disk layout follows the APTOS 2019 distribution: a CSV with
//! header `id_code,diagnosis` next to a directory of `<id_code>.png` (or
//! `.ppm`) images. Grades run 0..=4: No DR, Mild, Moderate, Severe,
//! Proliferative DR.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{self, FundusImage};
use crate::rng::{stream, Domain};

pub const GRADE_NAMES: [&str; 5] = ["No DR", "Mild", "Moderate", "Severe", "Proliferative DR"];

/// Which partition a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Where a sample's pixels live.
#[derive(Debug, Clone)]
pub enum ImageRef {
    Path(PathBuf),
    Memory(FundusImage),
}

/// One graded fundus photograph.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub id: String,
    pub image: ImageRef,
    /// Raw severity grade, 0..=4.
    pub grade: u8,
    pub split: Option<Split>,
    /// Inclusive lesion bounding boxes `[y0, x0, y1, x1]`; populated only
    /// by the synthetic generator.
    pub lesion_boxes: Vec<[usize; 4]>,
}

impl LabeledSample {
    /// Load (or clone) the pixels behind this sample.
    pub fn load_image(&self) -> Result<FundusImage> {
        match &self.image {
            ImageRef::Memory(img) => Ok(img.clone()),
            ImageRef::Path(path) => {
                let format = image::format_for_path(path).ok_or_else(|| {
                    Error::data(format!("unrecognized image extension: {}", path.display()))
                })?;
                let bytes = std::fs::read(path)?;
                let mut img = image::decode(&bytes, format)?;
                img.source_id = self.id.clone();
                Ok(img)
            }
        }
    }
}

/// Surjective map from raw grades to contiguous merged class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMergeMap {
    map: [usize; 5],
    names: Vec<String>,
}

impl ClassMergeMap {
    pub fn new(map: [usize; 5], names: Vec<String>) -> Result<Self> {
        let k = *map.iter().max().expect("non-empty") + 1;
        for id in 0..k {
            if !map.contains(&id) {
                return Err(Error::config(format!(
                    "class merge map {map:?} skips id {id}; ids must be contiguous from 0"
                )));
            }
        }
        if names.len() != k {
            return Err(Error::config(format!(
                "class merge map has {k} classes but {} names",
                names.len()
            )));
        }
        Ok(ClassMergeMap { map, names })
    }

    /// Five-class identity map.
    pub fn identity() -> Self {
        ClassMergeMap {
            map: [0, 1, 2, 3, 4],
            names: GRADE_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// The three-class grouping: referable severity tiers.
    pub fn three_class() -> Self {
        ClassMergeMap {
            map: [0, 1, 1, 2, 2],
            names: vec![
                "No DR".to_string(),
                "Mild/Moderate DR".to_string(),
                "Severe/Proliferative DR".to_string(),
            ],
        }
    }

    pub fn apply(&self, grade: u8) -> usize {
        self.map[grade as usize]
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn class_name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn is_identity(&self) -> bool {
        self.map == [0, 1, 2, 3, 4]
    }
}

/// Ordered samples plus the active class merge.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub samples: Vec<LabeledSample>,
    pub merge: ClassMergeMap,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Merged label of sample `i` under the active map.
    pub fn merged_label(&self, i: usize) -> usize {
        self.merge.apply(self.samples[i].grade)
    }

    /// Indices of samples tagged with `split`.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == Some(split))
            .map(|(i, _)| i)
            .collect()
    }

    /// Manifest CSV: `id_code,diagnosis,merged_label,split`.
    pub fn split_manifest_csv(&self) -> String {
        let mut out = String::from("id_code,diagnosis,merged_label,split\n");
        for (i, s) in self.samples.iter().enumerate() {
            let split = s.split.map(Split::as_str).unwrap_or("");
            out.push_str(&format!("{},{},{},{}\n", s.id, s.grade, self.merged_label(i), split));
        }
        out
    }
}

/// Read an APTOS-format index: CSV rows in file order, each image resolved
/// as `<id_code>.png` then `<id_code>.ppm` under `image_dir`.
pub fn load_csv_index(csv_path: &Path, image_dir: &Path) -> Result<DatasetIndex> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(csv_path)
        .map_err(|e| Error::data(format!("{}: {e}", csv_path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::data(format!("{}: {e}", csv_path.display())))?;
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::data(format!("{}: missing column {name}", csv_path.display())))
    };
    let id_col = col("id_code")?;
    let diag_col = col("diagnosis")?;

    let mut samples = Vec::new();
    let mut missing: Vec<(usize, String)> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let row = row_idx + 2; // 1-based, counting the header line
        let record = record.map_err(|e| Error::data(format!("row {row}: {e}")))?;
        let id = record
            .get(id_col)
            .ok_or_else(|| Error::data(format!("row {row}: missing id_code")))?
            .to_string();
        if id.is_empty() {
            return Err(Error::data(format!("row {row}: empty id_code")));
        }
        let diag_text = record
            .get(diag_col)
            .ok_or_else(|| Error::data(format!("row {row}: missing diagnosis")))?;
        let grade: u8 = diag_text
            .parse()
            .map_err(|_| Error::data(format!("row {row}: diagnosis {diag_text:?} is not an integer")))?;
        if grade > 4 {
            return Err(Error::data(format!(
                "row {row}: diagnosis {grade} outside 0..=4"
            )));
        }
        let png = image_dir.join(format!("{id}.png"));
        let ppm = image_dir.join(format!("{id}.ppm"));
        let path = if png.is_file() {
            png
        } else if ppm.is_file() {
            ppm
        } else {
            missing.push((row, id.clone()));
            png
        };
        samples.push(LabeledSample {
            id,
            image: ImageRef::Path(path),
            grade,
            split: None,
            lesion_boxes: Vec::new(),
        });
    }
    if !missing.is_empty() {
        let listing: Vec<String> =
            missing.iter().map(|(row, id)| format!("row {row}: {id}")).collect();
        return Err(Error::data(format!(
            "{} image file(s) not found under {} ({})",
            missing.len(),
            image_dir.display(),
            listing.join(", ")
        )));
    }
    Ok(DatasetIndex { samples, merge: ClassMergeMap::identity() })
}

/// Tag every sample train/val/test, stratified by raw grade.
///
/// Within each grade, sample order is shuffled by a stream keyed on
/// `(seed, grade)` and counts come from largest-remainder rounding of the
/// fractions, so per-class proportions are off by less than one sample.
/// Grades with fewer than three samples go entirely to train.
pub fn stratified_split(
    mut index: DatasetIndex,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetIndex> {
    let (ft, fv, fs) = fractions;
    if ft <= 0.0 || fv <= 0.0 || fs <= 0.0 {
        return Err(Error::config(format!("split fractions {fractions:?} must be positive")));
    }
    if ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split fractions {fractions:?} sum to {}, expected 1",
            ft + fv + fs
        )));
    }
    for grade in 0u8..=4 {
        let mut members: Vec<usize> = index
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.grade == grade)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 3 {
            log::warn!(
                "grade {grade} has only {} sample(s); assigning all to train",
                members.len()
            );
            for &i in &members {
                index.samples[i].split = Some(Split::Train);
            }
            continue;
        }
        let mut rng = stream(seed, Domain::Split, grade as u64, 0);
        members.shuffle(&mut rng);
        let counts = largest_remainder(members.len(), &[ft, fv, fs]);
        let mut cursor = 0usize;
        for (slot, &count) in counts.iter().enumerate() {
            let split = [Split::Train, Split::Val, Split::Test][slot];
            for &i in &members[cursor..cursor + count] {
                index.samples[i].split = Some(split);
            }
            cursor += count;
        }
    }
    Ok(index)
}

/// Integer allocation of `n` into parts proportional to `fractions`:
/// floors first, then leftovers to the largest remainders (ties keep
/// slot order).
fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).expect("finite remainders").then(a.cmp(&b))
    });
    for slot in order.into_iter().take(n - assigned) {
        counts[slot] += 1;
    }
    counts
}

/// Per-class counts and fractions under the active merge map.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    pub names: Vec<String>,
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
}

impl Distribution {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Plain-text histogram, one class per line.
    pub fn render_text(&self) -> String {
        let width = self.names.iter().map(|n| n.len()).max().unwrap_or(0);
        let peak = self.counts.iter().copied().max().unwrap_or(0).max(1);
        let mut out = String::new();
        for ((name, &count), &frac) in
            self.names.iter().zip(&self.counts).zip(&self.fractions)
        {
            let bar = "#".repeat(count * 40 / peak);
            out.push_str(&format!(
                "{name:<width$}  {count:>6}  {:>6.1}%  {bar}\n",
                frac * 100.0
            ));
        }
        out
    }

    /// CSV form: `class,count,fraction`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,count,fraction\n");
        for ((name, &count), &frac) in
            self.names.iter().zip(&self.counts).zip(&self.fractions)
        {
            out.push_str(&format!("{name},{count},{frac}\n"));
        }
        out
    }
}

/// Count samples per merged class, optionally restricted to one split.
pub fn class_distribution(index: &DatasetIndex, split: Option<Split>) -> Distribution {
    let k = index.merge.num_classes();
    let mut counts = vec![0usize; k];
    for (i, s) in index.samples.iter().enumerate() {
        if split.is_some() && s.split != split {
            continue;
        }
        counts[index.merged_label(i)] += 1;
    }
    let total: usize = counts.iter().sum();
    let fractions = counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect();
    Distribution {
        names: (0..k).map(|i| index.merge.class_name(i).to_string()).collect(),
        counts,
        fractions,
    }
}

/// Install a merge map; raw grades and split tags are untouched.
pub fn merge_classes(mut index: DatasetIndex, map: ClassMergeMap) -> DatasetIndex {
    index.merge = map;
    index
}

/// Replication target for [`oversample`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OversampleTarget {
    /// Bring every merged class up to the size of the largest.
    Balanced,
    /// Explicit per-merged-class minimum counts.
    PerClass(Vec<usize>),
}

/// Replicate minority-class records of the given split until each merged
/// class meets its target. Only the train split may be oversampled; the
/// originals all remain, and replicas are appended at the end of the
/// index (their new positions give them fresh augmentation streams).
pub fn oversample(
    index: &DatasetIndex,
    split: Split,
    target: &OversampleTarget,
    seed: u64,
) -> Result<DatasetIndex> {
    if split != Split::Train {
        return Err(Error::config(format!(
            "oversampling the {} split would leak replicas into evaluation; only train may be oversampled",
            split.as_str()
        )));
    }
    let k = index.merge.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, s) in index.samples.iter().enumerate() {
        if s.split == Some(Split::Train) {
            by_class[index.merged_label(i)].push(i);
        }
    }
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let targets: Vec<usize> = match target {
        OversampleTarget::Balanced => {
            let peak = counts.iter().copied().max().unwrap_or(0);
            vec![peak; k]
        }
        OversampleTarget::PerClass(t) => {
            if t.len() != k {
                return Err(Error::config(format!(
                    "oversample targets have {} entries for {k} classes",
                    t.len()
                )));
            }
            t.clone()
        }
    };
    let mut out = index.clone();
    for class in 0..k {
        if counts[class] >= targets[class] || counts[class] == 0 {
            continue;
        }
        let mut pool = by_class[class].clone();
        let mut rng = stream(seed, Domain::Oversample, class as u64, 0);
        pool.shuffle(&mut rng);
        let mut need = targets[class] - counts[class];
        while need > 0 {
            for &i in &pool {
                if need == 0 {
                    break;
                }
                out.samples.push(index.samples[i].clone());
                need -= 1;
            }
        }
    }
    Ok(out)
}

/// Recipe for the synthetic fundus corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticSpec {
    /// Square image side, at least 32.
    pub size: usize,
    /// Sample counts per raw grade.
    pub per_class: [usize; 5],
    pub seed: u64,
    /// Bright (exudate-like) blob counts per grade.
    pub bright_lesions: [usize; 5],
    /// Dark (hemorrhage-like) blob counts per grade.
    pub dark_lesions: [usize; 5],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            size: 64,
            per_class: [40, 40, 40, 40, 40],
            seed: 7,
            bright_lesions: [0, 2, 5, 9, 14],
            dark_lesions: [0, 1, 3, 6, 10],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(Error::config(format!(
                "synthetic image size {} below minimum 32",
                self.size
            )));
        }
        Ok(())
    }
}

/// Generate an in-memory graded corpus: dark field, bright retina disc,
/// curved vessels, and per-grade lesion blobs with recorded bounding
/// boxes. Deterministic in `spec.seed`.
pub fn synthesize_fundus(spec: &SyntheticSpec) -> Result<DatasetIndex> {
    spec.validate()?;
    let mut samples = Vec::new();
    for grade in 0u8..=4 {
        for ordinal in 0..spec.per_class[grade as usize] {
            let mut rng = stream(spec.seed, Domain::Synth, grade as u64, ordinal as u64);
            let (img, boxes) = draw_fundus(spec, grade, &mut rng);
            samples.push(LabeledSample {
                id: format!("synth{:04}g{grade}", ordinal),
                image: ImageRef::Memory(img),
                grade,
                split: None,
                lesion_boxes: boxes,
            });
        }
    }
    Ok(DatasetIndex { samples, merge: ClassMergeMap::identity() })
}

fn draw_fundus(
    spec: &SyntheticSpec,
    grade: u8,
    rng: &mut impl Rng,
) -> (FundusImage, Vec<[usize; 4]>) {
    let s = spec.size;
    let center = (s as f32 - 1.0) * 0.5;
    let radius = s as f32 * rng.random_range(0.42..0.46);
    let mut data = vec![0.0f32; s * s * 3];

    // Retina disc with radial falloff over a near-black field.
    let base = [
        rng.random_range(0.55..0.70f32),
        rng.random_range(0.28..0.38f32),
        rng.random_range(0.10..0.16f32),
    ];
    for y in 0..s {
        for x in 0..s {
            let d = ((y as f32 - center).powi(2) + (x as f32 - center).powi(2)).sqrt();
            let i = (y * s + x) * 3;
            if d <= radius {
                let fall = 1.0 - 0.35 * (d / radius).powi(2);
                data[i] = base[0] * fall;
                data[i + 1] = base[1] * fall;
                data[i + 2] = base[2] * fall;
            } else {
                data[i + 2] = 0.02;
            }
        }
    }

    // Optic disc: small bright circle off-center.
    let od_angle = rng.random_range(0.0..std::f32::consts::TAU);
    let od_r = radius * 0.55;
    let (od_y, od_x) = (center + od_r * od_angle.sin(), center + od_r * od_angle.cos());
    stamp_blob(&mut data, s, od_y, od_x, s as f32 * 0.06, [0.95, 0.85, 0.55], 0.9);

    // Curved vessels: quadratic arcs from near the optic disc.
    let vessel = [0.38f32, 0.10, 0.07];
    for _ in 0..rng.random_range(4..7) {
        let t_end = rng.random_range(0.0..std::f32::consts::TAU);
        let end = (
            center + radius * 0.85 * t_end.sin(),
            center + radius * 0.85 * t_end.cos(),
        );
        let mid = (
            (od_y + end.0) * 0.5 + rng.random_range(-0.2..0.2) * radius,
            (od_x + end.1) * 0.5 + rng.random_range(-0.2..0.2) * radius,
        );
        let thick = s as f32 / 72.0 + rng.random_range(0.0..s as f32 / 96.0);
        draw_quadratic(&mut data, s, (od_y, od_x), mid, end, thick, vessel, center, radius);
    }

    // Lesions, recorded for localization tests.
    let mut boxes = Vec::new();
    let bright_n = spec.bright_lesions[grade as usize];
    let dark_n = spec.dark_lesions[grade as usize];
    for kind in 0..2 {
        let (count, color, alpha) = if kind == 0 {
            (bright_n, [0.97f32, 0.93, 0.70], 0.95f32)
        } else {
            (dark_n, [0.08f32, 0.02, 0.02], 0.9)
        };
        for _ in 0..count {
            let angle = rng.random_range(0.0..std::f32::consts::TAU);
            let rr = radius * rng.random_range(0.15..0.75);
            let (ly, lx) = (center + rr * angle.sin(), center + rr * angle.cos());
            let lr = s as f32 * rng.random_range(0.018..0.030);
            stamp_blob(&mut data, s, ly, lx, lr, color, alpha);
            let y0 = (ly - lr).floor().max(0.0) as usize;
            let x0 = (lx - lr).floor().max(0.0) as usize;
            let y1 = ((ly + lr).ceil() as usize).min(s - 1);
            let x1 = ((lx + lr).ceil() as usize).min(s - 1);
            boxes.push([y0, x0, y1, x1]);
        }
    }

    let img = FundusImage {
        height: s,
        width: s,
        data,
        source_id: String::new(),
    };
    (img, boxes)
}

/// Blend a soft disc of `color` into the buffer.
fn stamp_blob(
    data: &mut [f32],
    s: usize,
    cy: f32,
    cx: f32,
    r: f32,
    color: [f32; 3],
    alpha: f32,
) {
    let y0 = (cy - r).floor().max(0.0) as usize;
    let y1 = ((cy + r).ceil() as usize).min(s - 1);
    let x0 = (cx - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil() as usize).min(s - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)).sqrt();
            if d > r {
                continue;
            }
            let a = alpha * (1.0 - (d / r).powi(2));
            let i = (y * s + x) * 3;
            for ch in 0..3 {
                data[i + ch] = (data[i + ch] * (1.0 - a) + color[ch] * a).clamp(0.0, 1.0);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn draw_quadratic(
    data: &mut [f32],
    s: usize,
    p0: (f32, f32),
    p1: (f32, f32),
    p2: (f32, f32),
    thickness: f32,
    color: [f32; 3],
    center: f32,
    radius: f32,
) {
    let steps = s * 2;
    for step in 0..=steps {
        let t = step as f32 / steps as f32;
        let u = 1.0 - t;
        let y = u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0;
        let x = u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1;
        let d = ((y - center).powi(2) + (x - center).powi(2)).sqrt();
        if d > radius * 0.92 {
            continue;
        }
        stamp_blob(data, s, y, x, thickness, color, 0.8);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_ppm(dir: &Path, id: &str) {
        let img = FundusImage::from_rgb8(2, 2, &[40u8; 12], id).unwrap();
        let bytes = image::encode(&img, image::Format::Ppm).unwrap();
        std::fs::File::create(dir.join(format!("{id}.ppm")))
            .unwrap()
            .write_all(&bytes)
            .unwrap();
    }

    fn tiny_index(grades: &[u8]) -> DatasetIndex {
        let samples = grades
            .iter()
            .enumerate()
            .map(|(i, &g)| LabeledSample {
                id: format!("s{i}"),
                image: ImageRef::Memory(
                    FundusImage::new(2, 2, vec![0.5; 12], format!("s{i}")).unwrap(),
                ),
                grade: g,
                split: None,
                lesion_boxes: Vec::new(),
            })
            .collect();
        DatasetIndex { samples, merge: ClassMergeMap::identity() }
    }

    #[test]
    fn csv_load_preserves_row_order() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("train.csv");
        std::fs::write(&csv_path, "id_code,diagnosis\naaa,0\nbbb,2\nccc,4\n").unwrap();
        for id in ["aaa", "bbb", "ccc"] {
            write_ppm(dir.path(), id);
        }
        let index = load_csv_index(&csv_path, dir.path()).unwrap();
        assert_eq!(index.len(), 3);
        let ids: Vec<&str> = index.samples.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, vec!["aaa", "bbb", "ccc"]);
        let grades: Vec<u8> = index.samples.iter().map(|s| s.grade).collect();
        assert_eq!(grades, vec![0, 2, 4]);
    }

    #[test]
    fn csv_out_of_range_diagnosis_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("train.csv");
        std::fs::write(&csv_path, "id_code,diagnosis\naaa,0\nbbb,5\n").unwrap();
        write_ppm(dir.path(), "aaa");
        let err = load_csv_index(&csv_path, dir.path()).unwrap_err();
        assert!(err.to_string().contains("row 3"), "{err}");
    }

    #[test]
    fn csv_missing_images_are_all_listed() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("train.csv");
        std::fs::write(&csv_path, "id_code,diagnosis\naaa,0\nbbb,1\nccc,2\n").unwrap();
        write_ppm(dir.path(), "bbb");
        let err = load_csv_index(&csv_path, dir.path()).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("aaa") && text.contains("ccc"), "{text}");
        assert!(text.contains("2 image file(s)"), "{text}");
    }

    #[test]
    fn csv_prefers_png_over_ppm() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("train.csv");
        std::fs::write(&csv_path, "id_code,diagnosis\naaa,0\n").unwrap();
        write_ppm(dir.path(), "aaa");
        std::fs::write(dir.path().join("aaa.png"), b"not a real png").unwrap();
        let index = load_csv_index(&csv_path, dir.path()).unwrap();
        match &index.samples[0].image {
            ImageRef::Path(p) => assert_eq!(p.extension().unwrap(), "png"),
            ImageRef::Memory(_) => panic!("expected path"),
        }
    }

    #[test]
    fn split_of_100_is_exact() {
        let index = tiny_index(&vec![2u8; 100]);
        let tagged = stratified_split(index, (0.70, 0.15, 0.15), 11).unwrap();
        assert_eq!(tagged.split_indices(Split::Train).len(), 70);
        assert_eq!(tagged.split_indices(Split::Val).len(), 15);
        assert_eq!(tagged.split_indices(Split::Test).len(), 15);
    }

    #[test]
    fn split_allocation_stays_within_one_sample_per_class() {
        let mut grades = vec![0u8; 60];
        grades.extend(vec![1u8; 30]);
        grades.extend(vec![2u8; 10]);
        let tagged = stratified_split(tiny_index(&grades), (0.70, 0.15, 0.15), 3).unwrap();
        for (grade, n) in [(0u8, 60usize), (1, 30), (2, 10)] {
            for (slot, frac) in [(Split::Train, 0.70), (Split::Val, 0.15), (Split::Test, 0.15)] {
                let got = tagged
                    .samples
                    .iter()
                    .filter(|s| s.grade == grade && s.split == Some(slot))
                    .count();
                let exact = frac * n as f64;
                assert!(
                    (got as f64 - exact).abs() < 1.0,
                    "grade {grade} {slot:?}: {got} vs exact {exact}"
                );
            }
        }
        // Tags partition the index.
        assert!(tagged.samples.iter().all(|s| s.split.is_some()));
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let grades: Vec<u8> = (0..97).map(|i| (i % 5) as u8).collect();
        let a = stratified_split(tiny_index(&grades), (0.70, 0.15, 0.15), 5).unwrap();
        let b = stratified_split(tiny_index(&grades), (0.70, 0.15, 0.15), 5).unwrap();
        let tag = |idx: &DatasetIndex| idx.samples.iter().map(|s| s.split).collect::<Vec<_>>();
        assert_eq!(tag(&a), tag(&b));
        let c = stratified_split(tiny_index(&grades), (0.70, 0.15, 0.15), 6).unwrap();
        assert_ne!(tag(&a), tag(&c));
    }

    #[test]
    fn tiny_class_goes_fully_to_train() {
        let mut grades = vec![0u8; 20];
        grades.push(4);
        grades.push(4);
        let tagged = stratified_split(tiny_index(&grades), (0.70, 0.15, 0.15), 1).unwrap();
        for s in tagged.samples.iter().filter(|s| s.grade == 4) {
            assert_eq!(s.split, Some(Split::Train));
        }
    }

    #[test]
    fn bad_fractions_are_rejected() {
        let index = tiny_index(&[0, 1, 2]);
        assert!(stratified_split(index.clone(), (0.8, 0.15, 0.15), 1).is_err());
        assert!(stratified_split(index, (0.7, 0.3, 0.0), 1).is_err());
    }

    #[test]
    fn default_merge_map_values() {
        let map = ClassMergeMap::three_class();
        let grades = [0u8, 1, 2, 3, 4];
        let merged: Vec<usize> = grades.iter().map(|&g| map.apply(g)).collect();
        assert_eq!(merged, vec![0, 1, 1, 2, 2]);
        assert_eq!(map.num_classes(), 3);
    }

    #[test]
    fn identity_merge_leaves_labels_alone() {
        let index = tiny_index(&[0, 1, 2, 3, 4]);
        let merged = merge_classes(index, ClassMergeMap::identity());
        for i in 0..5 {
            assert_eq!(merged.merged_label(i), i);
        }
    }

    #[test]
    fn non_contiguous_merge_map_is_rejected() {
        assert!(ClassMergeMap::new([0, 2, 2, 3, 3], vec![]).is_err());
    }

    #[test]
    fn distribution_counts_and_fractions() {
        let empty = tiny_index(&[]);
        let d = class_distribution(&empty, None);
        assert_eq!(d.counts, vec![0; 5]);

        let mut grades = Vec::new();
        for g in 0u8..=4 {
            grades.extend(vec![g; 20]);
        }
        let d = class_distribution(&tiny_index(&grades), None);
        assert_eq!(d.total(), 100);
        assert!(d.fractions.iter().all(|&f| (f - 0.2).abs() < 1e-12));
        assert!(d.to_csv().lines().count() == 6);
    }

    #[test]
    fn merge_then_distribution_conserves_total() {
        let grades: Vec<u8> = (0..83).map(|i| (i % 5) as u8).collect();
        let index = merge_classes(tiny_index(&grades), ClassMergeMap::three_class());
        let d = class_distribution(&index, None);
        assert_eq!(d.total(), 83);
        assert_eq!(d.counts.len(), 3);
    }

    #[test]
    fn oversample_balances_train_split() {
        let mut grades = vec![0u8; 100];
        grades.extend(vec![1u8; 10]);
        let mut index = tiny_index(&grades);
        for s in &mut index.samples {
            s.split = Some(Split::Train);
        }
        let out = oversample(&index, Split::Train, &OversampleTarget::Balanced, 1).unwrap();
        let d = class_distribution(&out, Some(Split::Train));
        assert_eq!(d.counts[0], 100);
        assert_eq!(d.counts[1], 100);
        assert_eq!(out.len(), 200);
        // Originals all retained at their old positions.
        for i in 0..index.len() {
            assert_eq!(out.samples[i].id, index.samples[i].id);
        }
    }

    #[test]
    fn oversample_already_balanced_is_identity() {
        let mut index = tiny_index(&[0, 0, 1, 1]);
        for s in &mut index.samples {
            s.split = Some(Split::Train);
        }
        let out = oversample(&index, Split::Train, &OversampleTarget::Balanced, 1).unwrap();
        assert_eq!(out.len(), index.len());
    }

    #[test]
    fn oversample_guards_eval_splits() {
        let index = tiny_index(&[0, 1]);
        for split in [Split::Val, Split::Test] {
            let err = oversample(&index, split, &OversampleTarget::Balanced, 1).unwrap_err();
            assert!(err.to_string().contains("leak"), "{err}");
        }
    }

    #[test]
    fn synthetic_lesions_follow_schedule() {
        let spec = SyntheticSpec {
            per_class: [2, 2, 2, 2, 2],
            ..SyntheticSpec::default()
        };
        let index = synthesize_fundus(&spec).unwrap();
        assert_eq!(index.len(), 10);
        let boxes = |grade: u8| {
            index
                .samples
                .iter()
                .find(|s| s.grade == grade)
                .unwrap()
                .lesion_boxes
                .len()
        };
        assert_eq!(boxes(0), 0);
        assert!(boxes(4) > boxes(1), "grade 4 {} vs grade 1 {}", boxes(4), boxes(1));
    }

    #[test]
    fn synthetic_is_deterministic_per_seed() {
        let spec = SyntheticSpec { per_class: [1, 0, 0, 0, 1], ..SyntheticSpec::default() };
        let a = synthesize_fundus(&spec).unwrap();
        let b = synthesize_fundus(&spec).unwrap();
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            let (ia, ib) = (sa.load_image().unwrap(), sb.load_image().unwrap());
            assert_eq!(ia.data, ib.data);
        }
        let other = synthesize_fundus(&SyntheticSpec { seed: 8, ..spec }).unwrap();
        let (ia, io) = (
            a.samples[0].load_image().unwrap(),
            other.samples[0].load_image().unwrap(),
        );
        assert_ne!(ia.data, io.data);
    }

    #[test]
    fn synthetic_boxes_lie_inside_the_disc() {
        let spec = SyntheticSpec { per_class: [0, 0, 1, 1, 2], ..SyntheticSpec::default() };
        let index = synthesize_fundus(&spec).unwrap();
        let center = (spec.size as f64 - 1.0) * 0.5;
        // Most conservative disc the generator can draw.
        let min_radius = spec.size as f64 * 0.42;
        for s in &index.samples {
            for &[y0, x0, y1, x1] in &s.lesion_boxes {
                for (y, x) in [(y0, x0), (y0, x1), (y1, x0), (y1, x1)] {
                    let d = ((y as f64 - center).powi(2) + (x as f64 - center).powi(2)).sqrt();
                    assert!(d <= min_radius, "corner ({y},{x}) at distance {d}");
                }
            }
        }
    }

    #[test]
    fn synthetic_rejects_tiny_images() {
        let spec = SyntheticSpec { size: 16, ..SyntheticSpec::default() };
        assert!(synthesize_fundus(&spec).is_err());
    }

    #[test]
    fn manifest_csv_shape() {
        let mut index = tiny_index(&[0, 3]);
        index.samples[0].split = Some(Split::Train);
        index = merge_classes(index, ClassMergeMap::three_class());
        let csv = index.split_manifest_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "id_code,diagnosis,merged_label,split");
        assert_eq!(lines[1], "s0,0,0,train");
        assert_eq!(lines[2], "s1,3,2,");
    }
}
