//! Dataset records, directory loading, keypoint files and the synthetic
//! toy dataset.
//!
//! Images follow the naming scheme `<pid>_<cid>_c<cam>_<frame>.<ext>` under
//! `root/{train,query,gallery}/`.

pub mod toy;

pub use toy::{generate_toy_dataset, render_toy, ToyDataset, ToyDatasetConfig, ToySample};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use image::RgbImage;
use log::warn;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ReidError, Result};
use crate::keypoints::{reduce_keypoints, KeypointSet, RawKeypoints, NUM_RAW_POINTS};
use crate::seeds;
use crate::tensor::{FeatureMap, Real};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Per-channel RGB statistics used to standardize network input.
pub const PIXEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Query, Split::Gallery];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = ReidError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(ReidError::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_path: PathBuf,
    pub person_id: u32,
    /// Unique per (person, outfit) across the whole dataset.
    pub cloth_id: u32,
    pub camera_id: u32,
    pub frame: u64,
    pub width: u32,
    pub height: u32,
}

impl AnnotationRecord {
    pub fn file_name(&self) -> String {
        self.image_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

/// Parses a canonical file name; `image_size` is `(height, width)`.
pub fn parse_record(filename: &str, image_size: (u32, u32)) -> Result<AnnotationRecord> {
    let malformed = || ReidError::MalformedFilename(filename.to_string());
    let (stem, ext) = filename.rsplit_once('.').ok_or_else(malformed)?;
    if ext.is_empty() {
        return Err(malformed());
    }
    let tokens: Vec<&str> = stem.split('_').collect();
    let [pid, cid, cam, frame] = tokens.as_slice() else {
        return Err(malformed());
    };
    let cam = cam.strip_prefix('c').ok_or_else(malformed)?;
    let number = |s: &str| -> Result<u64> {
        if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(malformed());
        }
        s.parse::<u64>().map_err(|_| malformed())
    };
    let narrow = |v: u64| u32::try_from(v).map_err(|_| malformed());
    let (height, width) = image_size;
    if width == 0 || height == 0 {
        return Err(ReidError::NonPositiveDimensions {
            width: width as f64,
            height: height as f64,
        });
    }
    Ok(AnnotationRecord {
        image_path: PathBuf::from(filename),
        person_id: narrow(number(pid)?)?,
        cloth_id: narrow(number(cid)?)?,
        camera_id: narrow(number(cam)?)?,
        frame: number(frame)?,
        width,
        height,
    })
}

/// Canonical file name for the given labels.
pub fn format_record(person_id: u32, cloth_id: u32, camera_id: u32, frame: u64, ext: &str) -> String {
    format!("{person_id:03}_{cloth_id:03}_c{camera_id}_{frame:05}.{ext}")
}

/// Sorted id list mapping each id to a contiguous class index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    ids: Vec<u32>,
}

impl Vocabulary {
    pub fn from_ids(ids: impl IntoIterator<Item = u32>) -> Self {
        let set: BTreeSet<u32> = ids.into_iter().collect();
        Self {
            ids: set.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    pub fn id_at(&self, index: usize) -> Option<u32> {
        self.ids.get(index).copied()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn to_map(&self) -> BTreeMap<u32, usize> {
        self.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_map().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<u32, usize>::deserialize(d)?;
        let mut pairs: Vec<(usize, u32)> = map.into_iter().map(|(id, i)| (i, id)).collect();
        pairs.sort_unstable();
        if pairs.iter().enumerate().any(|(k, &(i, _))| k != i) {
            return Err(serde::de::Error::custom("class indices must be contiguous from 0"));
        }
        Ok(Self {
            ids: pairs.into_iter().map(|(_, id)| id).collect(),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub person: Vocabulary,
    pub cloth: Vocabulary,
}

impl Vocabularies {
    pub fn from_records(records: &[AnnotationRecord]) -> Self {
        Self {
            person: Vocabulary::from_ids(records.iter().map(|r| r.person_id)),
            cloth: Vocabulary::from_ids(records.iter().map(|r| r.cloth_id)),
        }
    }

    /// Writes `vocab_person.json` and `vocab_cloth.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("vocab_person.json"), serde_json::to_vec_pretty(&self.person)?)?;
        fs::write(dir.join("vocab_cloth.json"), serde_json::to_vec_pretty(&self.cloth)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            person: serde_json::from_slice(&fs::read(dir.join("vocab_person.json"))?)?,
            cloth: serde_json::from_slice(&fs::read(dir.join("vocab_cloth.json"))?)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub split: Split,
    /// Sorted by file name.
    pub records: Vec<AnnotationRecord>,
    pub vocab: Vocabularies,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Stable digest of the split's file names and labels.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.split.as_str().as_bytes());
        for r in &self.records {
            hasher.update(r.file_name().as_bytes());
            hasher.update(format!(":{}x{};", r.width, r.height).as_bytes());
        }
        hex::encode(hasher.finalize())
    }

    /// Class index of each record's person id.
    pub fn person_labels(&self) -> Result<Vec<usize>> {
        self.records
            .iter()
            .map(|r| {
                self.vocab
                    .person
                    .index_of(r.person_id)
                    .ok_or(ReidError::LabelOutOfRange {
                        label: r.person_id as usize,
                        classes: self.vocab.person.len(),
                    })
            })
            .collect()
    }

    pub fn cloth_labels(&self) -> Result<Vec<usize>> {
        self.records
            .iter()
            .map(|r| {
                self.vocab
                    .cloth
                    .index_of(r.cloth_id)
                    .ok_or(ReidError::LabelOutOfRange {
                        label: r.cloth_id as usize,
                        classes: self.vocab.cloth.len(),
                    })
            })
            .collect()
    }
}

fn check_cloth_consistency(records: &[AnnotationRecord]) -> Result<()> {
    let mut owner: HashMap<u32, u32> = HashMap::new();
    for r in records {
        match owner.insert(r.cloth_id, r.person_id) {
            Some(prev) if prev != r.person_id => {
                return Err(ReidError::InconsistentClothLabel {
                    cloth_id: r.cloth_id,
                    first: prev,
                    second: r.person_id,
                })
            }
            _ => {}
        }
    }
    Ok(())
}

fn scan_split(root: &Path, split: Split, strict: bool) -> Result<Vec<AnnotationRecord>> {
    let dir = root.join(split.as_str());
    if !dir.is_dir() {
        return Err(ReidError::MissingDirectory(dir));
    }
    let mut names: Vec<String> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| {
            n.rsplit_once('.')
                .map(|(_, ext)| IMAGE_EXTENSIONS.contains(&ext.to_ascii_lowercase().as_str()))
                .unwrap_or(false)
        })
        .collect();
    names.sort();
    let mut records = Vec::with_capacity(names.len());
    for name in names {
        let path = dir.join(&name);
        // Validate the name before touching the file.
        if let Err(e) = parse_record(&name, (1, 1)) {
            if strict {
                return Err(e);
            }
            warn!("skipping {}: {e}", path.display());
            continue;
        }
        let (width, height) = image::image_dimensions(&path)?;
        let mut record = parse_record(&name, (height, width))?;
        record.image_path = path;
        records.push(record);
    }
    if records.is_empty() {
        return Err(ReidError::EmptySplit(split.to_string()));
    }
    Ok(records)
}

/// Loads one split. Vocabularies come from `vocab` when given; otherwise the
/// train split builds its own and query/gallery share one built from both
/// test splits.
pub fn load_dataset(
    root: &Path,
    split: Split,
    strict: bool,
    vocab: Option<&Vocabularies>,
) -> Result<DatasetIndex> {
    let records = scan_split(root, split, strict)?;
    let vocab = match (vocab, split) {
        (Some(v), _) => v.clone(),
        (None, Split::Train) => Vocabularies::from_records(&records),
        (None, _) => {
            let other = if split == Split::Query { Split::Gallery } else { Split::Query };
            let mut all = records.clone();
            all.extend(scan_split(root, other, strict)?);
            Vocabularies::from_records(&all)
        }
    };
    check_cloth_consistency(&records)?;
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        split,
        records,
        vocab,
    })
}

/// One line of the keypoint file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointRecord {
    pub image: String,
    pub points: Vec<[f64; 3]>,
}

/// Raw keypoints keyed by image file name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeypointTable {
    entries: HashMap<String, Vec<[f64; 3]>>,
}

impl KeypointTable {
    pub fn insert(&mut self, image: String, points: Vec<[f64; 3]>) {
        self.entries.insert(image, points);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut table = Self::default();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: KeypointRecord = serde_json::from_str(&line)?;
            if rec.points.len() != NUM_RAW_POINTS {
                return Err(ReidError::WrongArity {
                    expected: NUM_RAW_POINTS,
                    got: rec.points.len(),
                });
            }
            table.insert(rec.image, rec.points);
        }
        Ok(table)
    }

    /// Writes records sorted by image name.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut names: Vec<&String> = self.entries.keys().collect();
        names.sort();
        let mut out = BufWriter::new(fs::File::create(path)?);
        for name in names {
            let rec = KeypointRecord {
                image: name.clone(),
                points: self.entries[name].clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn raw_for(&self, record: &AnnotationRecord) -> Result<RawKeypoints> {
        let name = record.file_name();
        let points = self
            .entries
            .get(&name)
            .ok_or(ReidError::MissingKeypoints(name))?;
        Ok(RawKeypoints {
            points: points.clone(),
            image_width: record.width,
            image_height: record.height,
        })
    }

    /// Fails on the first record without keypoints.
    pub fn check_coverage(&self, records: &[AnnotationRecord]) -> Result<()> {
        for r in records {
            let name = r.file_name();
            if !self.entries.contains_key(&name) {
                return Err(ReidError::MissingKeypoints(name));
            }
        }
        Ok(())
    }
}

/// An image resized to the network input, with values in `[0, 1]`, plus its
/// encoded keypoints.
#[derive(Clone, Debug)]
pub struct Sample {
    pub record: AnnotationRecord,
    pub image: FeatureMap<f32>,
    pub keypoints: KeypointSet,
}

pub fn rgb_to_map(img: &RgbImage) -> FeatureMap<f32> {
    let (w, h) = img.dimensions();
    let data = Array3::from_shape_vec(
        (h as usize, w as usize, 3),
        img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
    )
    .expect("rgb buffer layout");
    FeatureMap::new(data).expect("non-empty image")
}

/// Reads an image and resizes it to `input_size = (height, width)`.
pub fn load_image(path: &Path, input_size: (usize, usize)) -> Result<FeatureMap<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (h, w) = input_size;
    let img = if img.dimensions() == (w as u32, h as u32) {
        img
    } else {
        image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
    };
    Ok(rgb_to_map(&img))
}

/// Standardizes a `[0, 1]` RGB map channel by channel.
pub fn normalize_image<F: Real>(raw: &FeatureMap<f32>) -> FeatureMap<F> {
    let mut out = raw.cast::<F>();
    let mean = ndarray::Array1::from_iter(PIXEL_MEAN.iter().map(|&m| F::lit(m)));
    let inv_std = ndarray::Array1::from_iter(PIXEL_STD.iter().map(|&s| F::lit(1.0 / s)));
    {
        let mut m = out.matrix_mut();
        m -= &mean;
        m *= &inv_std;
    }
    out
}

/// Loads every record's image and keypoints, failing fast on missing
/// keypoints before any image is decoded.
pub fn load_samples(
    index: &DatasetIndex,
    keypoints: &KeypointTable,
    input_size: (usize, usize),
    confidence_threshold: f64,
) -> Result<Vec<Sample>> {
    keypoints.check_coverage(&index.records)?;
    index
        .records
        .iter()
        .map(|r| {
            let raw = keypoints.raw_for(r)?;
            Ok(Sample {
                record: r.clone(),
                image: load_image(&r.image_path, input_size)?,
                keypoints: reduce_keypoints(&raw, confidence_threshold)?,
            })
        })
        .collect()
}

/// Stratified identity split: within the cloth-changing and cloth-consistent
/// groups separately, `round(n * train_fraction)` identities go to training.
pub fn split_identities(
    all_ids: &[u32],
    cloth_changing_ids: &[u32],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<u32>, Vec<u32>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(ReidError::InvalidCounts(format!(
            "train fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let all: BTreeSet<u32> = all_ids.iter().copied().collect();
    if all.len() != all_ids.len() {
        return Err(ReidError::InvalidCounts("duplicate identity ids".into()));
    }
    let changing: BTreeSet<u32> = cloth_changing_ids.iter().copied().collect();
    if let Some(stray) = changing.difference(&all).next() {
        return Err(ReidError::InvalidCounts(format!(
            "cloth-changing id {stray} is not in the identity list"
        )));
    }
    let consistent: Vec<u32> = all.difference(&changing).copied().collect();
    let changing: Vec<u32> = changing.into_iter().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &[seeds::stream::SPLIT]));
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut group in [changing, consistent] {
        group.shuffle(&mut rng);
        let n_train = (group.len() as f64 * train_fraction + 0.5).floor() as usize;
        let n_train = n_train.min(group.len());
        train.extend_from_slice(&group[..n_train]);
        test.extend_from_slice(&group[n_train..]);
    }
    if train.is_empty() || test.is_empty() {
        return Err(ReidError::InvalidCounts(format!(
            "split of {} identities leaves an empty side",
            all.len()
        )));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_canonical_names() {
        let r = parse_record("004_2_c11_00321.png", (384, 192)).unwrap();
        assert_eq!(
            (r.person_id, r.cloth_id, r.camera_id, r.width, r.height),
            (4, 2, 11, 192, 384)
        );
        let z = parse_record("000_0_c0_0.png", (10, 10)).unwrap();
        assert_eq!((z.person_id, z.cloth_id, z.camera_id, z.width, z.height), (0, 0, 0, 10, 10));
    }

    #[test]
    fn rejects_malformed_names() {
        for bad in [
            "004_2_11_00321.png",
            "004_2_c11.png",
            "004_x_c11_00321.png",
            "004_2_c11_00321_9.png",
            "004_2_c11_00321",
            "_2_c1_0.png",
        ] {
            assert!(
                matches!(parse_record(bad, (8, 8)), Err(ReidError::MalformedFilename(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn vocabulary_is_contiguous_and_roundtrips() {
        let v = Vocabulary::from_ids([9, 7, 9]);
        assert_eq!(v.to_map(), BTreeMap::from([(7, 0), (9, 1)]));
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"{"7":0,"9":1}"#);
        assert_eq!(serde_json::from_str::<Vocabulary>(&json).unwrap(), v);
        assert!(serde_json::from_str::<Vocabulary>(r#"{"7":0,"9":2}"#).is_err());
    }

    #[test]
    fn ltcc_counts_split_stratified() {
        let all: Vec<u32> = (0..152).collect();
        let changing: Vec<u32> = (0..91).collect();
        let (train, test) = split_identities(&all, &changing, 0.5, 3).unwrap();
        let n_changing = |ids: &[u32]| ids.iter().filter(|&&i| i < 91).count();
        assert_eq!((n_changing(&train), train.len() - n_changing(&train)), (46, 31));
        assert_eq!((n_changing(&test), test.len() - n_changing(&test)), (45, 30));
        assert_eq!(split_identities(&all, &changing, 0.5, 3).unwrap(), (train, test));
    }

    #[test]
    fn minimal_split_and_errors() {
        let (train, test) = split_identities(&[3, 8], &[3, 8], 0.5, 0).unwrap();
        assert_eq!((train.len(), test.len()), (1, 1));
        assert!(matches!(
            split_identities(&[1, 2], &[5], 0.5, 0),
            Err(ReidError::InvalidCounts(_))
        ));
        assert!(matches!(
            split_identities(&[1], &[1], 0.5, 0),
            Err(ReidError::InvalidCounts(_))
        ));
    }

    #[test]
    fn missing_keypoints_are_reported() {
        let table = KeypointTable::default();
        let r = parse_record("001_1_c1_1.png", (8, 4)).unwrap();
        assert!(matches!(
            table.check_coverage(&[r]),
            Err(ReidError::MissingKeypoints(name)) if name == "001_1_c1_1.png"
        ));
    }

    #[test]
    fn cloth_labels_must_not_cross_identities() {
        let a = parse_record("001_5_c1_1.png", (8, 4)).unwrap();
        let b = parse_record("002_5_c1_2.png", (8, 4)).unwrap();
        assert!(matches!(
            check_cloth_consistency(&[a, b]),
            Err(ReidError::InconsistentClothLabel { cloth_id: 5, .. })
        ));
    }

    proptest! {
        #[test]
        fn format_parse_roundtrip(
            pid in 0u32..100_000, cid in 0u32..100_000, cam in 0u32..1000,
            frame in 0u64..10_000_000, h in 1u32..2000, w in 1u32..2000,
        ) {
            let name = format_record(pid, cid, cam, frame, "png");
            let r = parse_record(&name, (h, w)).unwrap();
            prop_assert_eq!(
                (r.person_id, r.cloth_id, r.camera_id, r.frame, r.width, r.height),
                (pid, cid, cam, frame, w, h)
            );
            prop_assert_eq!(format_record(r.person_id, r.cloth_id, r.camera_id, r.frame, "png"), name);
        }
    }
}
