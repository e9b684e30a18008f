//! Pose, item and label files, dataset splits and the synthetic generator.
//!
//! * Poses: JSON Lines, `{"video_id": str, "frames": [[[x, y, z, vis] × 33] × T]}`.
//!   Frames with 3 values per landmark are read as `[x, y, vis]` with z = 0.
//! * Items: `POBI` magic, version u32, count u32, F u16, dim u16, then per item
//!   a u16-length id, a u16-length category and F·dim f32, all little-endian.
//! * Labels: CSV `video_id,item_id,score`.
//! * Classes (optional): CSV `video_id,class`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::item_encoder::ItemRecord;
use crate::numerics::Tensor;
use crate::pose_encoder::{PoseTrajectory, LANDMARKS, POSE_CHANNELS};

pub const ITEM_MAGIC: &[u8; 4] = b"POBI";
pub const ITEM_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct LabelRow {
    pub video_id: String,
    pub item_id: String,
    pub score: f64,
}

fn fmt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::format(path.display().to_string(), msg)
}

// ---------------------------------------------------------------- poses

fn parse_pose_line(v: &Value, path: &Path, line: usize) -> Result<PoseTrajectory> {
    let id = v
        .get("video_id")
        .and_then(Value::as_str)
        .ok_or_else(|| fmt_err(path, format!("line {line}: missing string video_id")))?;
    let frames = v
        .get("frames")
        .and_then(Value::as_array)
        .ok_or_else(|| fmt_err(path, format!("line {line}: missing frames array")))?;
    let mut data = Vec::with_capacity(frames.len() * LANDMARKS * POSE_CHANNELS);
    for (f, frame) in frames.iter().enumerate() {
        let lms = frame
            .as_array()
            .ok_or_else(|| fmt_err(path, format!("line {line}, frame {f}: not an array")))?;
        if lms.len() != LANDMARKS {
            return Err(fmt_err(
                path,
                format!("line {line}, frame {f}: {} landmarks, expected {LANDMARKS}", lms.len()),
            ));
        }
        for (j, lm) in lms.iter().enumerate() {
            let vals = lm
                .as_array()
                .ok_or_else(|| fmt_err(path, format!("line {line}, frame {f}, landmark {j}: not an array")))?;
            let nums = vals
                .iter()
                .map(|x| x.as_f64())
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| fmt_err(path, format!("line {line}, frame {f}, landmark {j}: non-numeric value")))?;
            match nums.len() {
                4 => data.extend_from_slice(&nums),
                3 => data.extend([nums[0], nums[1], 0.0, nums[2]]),
                n => {
                    return Err(fmt_err(
                        path,
                        format!("line {line}, frame {f}, landmark {j}: {n} channels, expected 4 or 3"),
                    ))
                }
            }
        }
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data(format!(
            "{}: line {line}: non-finite pose value",
            path.display()
        )));
    }
    let t = frames.len();
    PoseTrajectory::new(id, Tensor::new(vec![t, LANDMARKS, POSE_CHANNELS], data)?)
        .map_err(|e| Error::Data(format!("{}: line {line}: {e}", path.display())))
}

pub fn read_poses(text: &str, path: &Path) -> Result<Vec<PoseTrajectory>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(raw).map_err(|e| fmt_err(path, format!("line {}: {e}", i + 1)))?;
        let p = parse_pose_line(&v, path, i + 1)?;
        if !seen.insert(p.video_id.clone()) {
            return Err(Error::Data(format!(
                "{}: duplicate video_id {}",
                path.display(),
                p.video_id
            )));
        }
        out.push(p);
    }
    Ok(out)
}

pub fn load_poses(path: &Path) -> Result<Vec<PoseTrajectory>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_poses(&text, path)
}

/// One JSON line per trajectory.
pub fn poses_to_string(poses: &[PoseTrajectory]) -> String {
    let mut s = String::new();
    for p in poses {
        let frames: Vec<Value> = (0..p.num_frames())
            .map(|t| {
                Value::Array(
                    (0..LANDMARKS)
                        .map(|j| {
                            let base = (t * LANDMARKS + j) * POSE_CHANNELS;
                            Value::from(p.frames.data()[base..base + POSE_CHANNELS].to_vec())
                        })
                        .collect(),
                )
            })
            .collect();
        // video_id first, matching the documented layout
        let _ = writeln!(
            s,
            "{{\"video_id\":{},\"frames\":{}}}",
            Value::from(p.video_id.as_str()),
            Value::Array(frames)
        );
    }
    s
}

pub fn write_poses(path: &Path, poses: &[PoseTrajectory]) -> Result<()> {
    fs::write(path, poses_to_string(poses)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- items

pub fn items_to_bytes(items: &[ItemRecord]) -> Result<Vec<u8>> {
    let (f, d) = items.first().map_or((0, 0), |i| (i.factor_count(), i.factor_dim()));
    let mut out = Vec::new();
    out.extend_from_slice(ITEM_MAGIC);
    out.extend_from_slice(&ITEM_VERSION.to_le_bytes());
    out.extend_from_slice(&(items.len() as u32).to_le_bytes());
    let f16 = u16::try_from(f).map_err(|_| Error::Data(format!("{f} factors do not fit the header")))?;
    let d16 = u16::try_from(d).map_err(|_| Error::Data(format!("factor dim {d} does not fit the header")))?;
    out.extend_from_slice(&f16.to_le_bytes());
    out.extend_from_slice(&d16.to_le_bytes());
    for it in items {
        if it.factor_count() != f || it.factor_dim() != d {
            return Err(Error::Data(format!("item {} has a different factor shape", it.item_id)));
        }
        for s in [&it.item_id, &it.category] {
            let len = u16::try_from(s.len()).map_err(|_| Error::Data(format!("string too long: {s}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        for &x in it.factors.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn items_from_bytes(bytes: &[u8], path: &Path) -> Result<Vec<ItemRecord>> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if bytes.len() - pos < n {
            return Err(fmt_err(path, format!("truncated at byte {pos}")));
        }
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    if take(4)? != ITEM_MAGIC {
        return Err(fmt_err(path, "bad magic, not an item file"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != ITEM_VERSION {
        return Err(fmt_err(path, format!("unsupported item file version {version}")));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let f = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
    let d = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
    if count > 0 && (f == 0 || d == 0) {
        return Err(fmt_err(path, "header declares empty factors"));
    }
    let mut items = Vec::with_capacity(count.min(1 << 16));
    let mut seen = BTreeSet::new();
    for n in 0..count {
        let mut string = |what: &str| -> Result<String> {
            let len = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
            String::from_utf8(take(len)?.to_vec()).map_err(|_| fmt_err(path, format!("item {n}: {what} is not UTF-8")))
        };
        let id = string("id")?;
        let category = string("category")?;
        let payload = take(f * d * 4)?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data(format!(
                "{}: item {id} has non-finite factors",
                path.display()
            )));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::Data(format!("{}: duplicate item id {id}", path.display())));
        }
        items.push(ItemRecord::new(id, category, Tensor::matrix(f, d, data)?)?);
    }
    if pos != bytes.len() {
        return Err(fmt_err(
            path,
            format!("{} bytes after the last item", bytes.len() - pos),
        ));
    }
    Ok(items)
}

pub fn load_items(path: &Path) -> Result<Vec<ItemRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    items_from_bytes(&bytes, path)
}

pub fn write_items(path: &Path, items: &[ItemRecord]) -> Result<()> {
    fs::write(path, items_to_bytes(items)?).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- csv files

fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let got = r.headers().map_err(|e| fmt_err(path, e.to_string()))?.clone();
    if got.iter().map(str::trim).collect::<Vec<_>>() != header {
        return Err(fmt_err(path, format!("header {:?}, expected {header:?}", got)));
    }
    r.records()
        .map(|rec| rec.map_err(|e| fmt_err(path, e.to_string())))
        .collect()
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| fmt_err(path, e.to_string()))?;
    w.write_record(header).map_err(|e| fmt_err(path, e.to_string()))?;
    for row in rows {
        w.write_record(&row).map_err(|e| fmt_err(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_labels(path: &Path) -> Result<Vec<LabelRow>> {
    let mut seen = BTreeSet::new();
    read_csv(path, &["video_id", "item_id", "score"])?
        .into_iter()
        .enumerate()
        .map(|(n, r)| {
            let line = n + 2;
            if r.len() != 3 {
                return Err(fmt_err(path, format!("line {line}: expected 3 fields")));
            }
            let score: f64 = r[2]
                .trim()
                .parse()
                .map_err(|_| fmt_err(path, format!("line {line}: bad score {:?}", &r[2])))?;
            if !(0.0..=1.0).contains(&score) {
                return Err(Error::Label(format!(
                    "{}: line {line}: score {score} outside [0, 1]",
                    path.display()
                )));
            }
            let row = LabelRow {
                video_id: r[0].trim().to_string(),
                item_id: r[1].trim().to_string(),
                score,
            };
            if !seen.insert((row.video_id.clone(), row.item_id.clone())) {
                return Err(Error::Data(format!(
                    "{}: line {line}: duplicate pair ({}, {})",
                    path.display(),
                    row.video_id,
                    row.item_id
                )));
            }
            Ok(row)
        })
        .collect()
}

pub fn write_labels(path: &Path, labels: &[LabelRow]) -> Result<()> {
    write_csv(
        path,
        &["video_id", "item_id", "score"],
        labels
            .iter()
            .map(|l| vec![l.video_id.clone(), l.item_id.clone(), l.score.to_string()]),
    )
}

pub fn load_classes(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, r) in read_csv(path, &["video_id", "class"])?.into_iter().enumerate() {
        if r.len() != 2 {
            return Err(fmt_err(path, format!("line {}: expected 2 fields", n + 2)));
        }
        out.insert(r[0].trim().to_string(), r[1].trim().to_string());
    }
    Ok(out)
}

pub fn write_classes(path: &Path, classes: &BTreeMap<String, String>) -> Result<()> {
    write_csv(
        path,
        &["video_id", "class"],
        classes.iter().map(|(v, c)| vec![v.clone(), c.clone()]),
    )
}

// ---------------------------------------------------------------- dataset

#[derive(Clone, Debug)]
pub struct Dataset {
    pub poses: Vec<PoseTrajectory>,
    pub items: Vec<ItemRecord>,
    pub labels: Vec<LabelRow>,
    pub classes: Option<BTreeMap<String, String>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPaths {
    pub poses: PathBuf,
    pub items: PathBuf,
    pub labels: PathBuf,
    pub classes: Option<PathBuf>,
}

impl DatasetPaths {
    /// The file names written by the synthetic generator.
    pub fn in_dir(dir: &Path) -> Self {
        let classes = dir.join("classes.csv");
        DatasetPaths {
            poses: dir.join("poses.jsonl"),
            items: dir.join("items.pobi"),
            labels: dir.join("labels.csv"),
            classes: classes.exists().then_some(classes),
        }
    }

    /// `key=path` lines for `poses`, `items`, `labels` and optionally `classes`.
    pub fn to_manifest(&self) -> String {
        let mut s = format!(
            "poses={}\nitems={}\nlabels={}\n",
            self.poses.display(),
            self.items.display(),
            self.labels.display()
        );
        if let Some(c) = &self.classes {
            s.push_str(&format!("classes={}\n", c.display()));
        }
        s
    }

    pub fn from_manifest(text: &str, path: &Path) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| fmt_err(path, format!("expected key=path, got {line:?}")))?;
            if !matches!(k, "poses" | "items" | "labels" | "classes") {
                return Err(fmt_err(path, format!("unknown manifest key {k:?}")));
            }
            map.insert(k.to_string(), PathBuf::from(v));
        }
        let mut need = |k: &str| {
            map.remove(k)
                .ok_or_else(|| fmt_err(path, format!("manifest has no {k}")))
        };
        Ok(DatasetPaths {
            poses: need("poses")?,
            items: need("items")?,
            labels: need("labels")?,
            classes: map.remove("classes"),
        })
    }

    pub fn load_manifest(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        DatasetPaths::from_manifest(&text, path)
    }
}

impl Dataset {
    pub fn new(
        poses: Vec<PoseTrajectory>,
        items: Vec<ItemRecord>,
        labels: Vec<LabelRow>,
        classes: Option<BTreeMap<String, String>>,
    ) -> Result<Self> {
        let d = Dataset {
            poses,
            items,
            labels,
            classes,
        };
        d.check_references()?;
        Ok(d)
    }

    pub fn load(paths: &DatasetPaths) -> Result<Self> {
        let classes = paths.classes.as_deref().map(load_classes).transpose()?;
        Dataset::new(
            load_poses(&paths.poses)?,
            load_items(&paths.items)?,
            load_labels(&paths.labels)?,
            classes,
        )
    }

    pub fn save(&self, dir: &Path) -> Result<DatasetPaths> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = DatasetPaths {
            poses: dir.join("poses.jsonl"),
            items: dir.join("items.pobi"),
            labels: dir.join("labels.csv"),
            classes: self.classes.as_ref().map(|_| dir.join("classes.csv")),
        };
        write_poses(&paths.poses, &self.poses)?;
        write_items(&paths.items, &self.items)?;
        write_labels(&paths.labels, &self.labels)?;
        if let (Some(c), Some(p)) = (&self.classes, &paths.classes) {
            write_classes(p, c)?;
        }
        Ok(paths)
    }

    fn check_references(&self) -> Result<()> {
        let videos: BTreeSet<&str> = self.poses.iter().map(|p| p.video_id.as_str()).collect();
        let items: BTreeSet<&str> = self.items.iter().map(|i| i.item_id.as_str()).collect();
        if items.len() != self.items.len() {
            return Err(Error::Data("duplicate item ids".into()));
        }
        let mut seen = BTreeSet::new();
        for l in &self.labels {
            if !videos.contains(l.video_id.as_str()) {
                return Err(Error::Data(format!("label references unknown video {}", l.video_id)));
            }
            if !items.contains(l.item_id.as_str()) {
                return Err(Error::Data(format!("label references unknown item {}", l.item_id)));
            }
            if !(0.0..=1.0).contains(&l.score) {
                return Err(Error::Label(format!("score {} outside [0, 1]", l.score)));
            }
            if !seen.insert((l.video_id.as_str(), l.item_id.as_str())) {
                return Err(Error::Data(format!("duplicate label ({}, {})", l.video_id, l.item_id)));
            }
        }
        if let Some(c) = &self.classes {
            if let Some(v) = videos.iter().find(|v| !c.contains_key(**v)) {
                return Err(Error::Data(format!("video {v} has no class")));
            }
        }
        if let Some(first) = self.items.first() {
            let shape = (first.factor_count(), first.factor_dim());
            if let Some(it) = self.items.iter().find(|i| (i.factor_count(), i.factor_dim()) != shape) {
                return Err(Error::Data(format!("item {} has a different factor shape", it.item_id)));
            }
        }
        Ok(())
    }

    pub fn item_index(&self) -> HashMap<&str, usize> {
        self.items
            .iter()
            .enumerate()
            .map(|(i, it)| (it.item_id.as_str(), i))
            .collect()
    }

    /// `(item index, score)` per video id.
    pub fn labels_by_video(&self) -> BTreeMap<String, Vec<(usize, f64)>> {
        let idx = self.item_index();
        let mut out: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
        for l in &self.labels {
            out.entry(l.video_id.clone())
                .or_default()
                .push((idx[l.item_id.as_str()], l.score));
        }
        for v in out.values_mut() {
            v.sort_by_key(|&(i, _)| i);
        }
        out
    }

    pub fn video_ids(&self) -> Vec<String> {
        self.poses.iter().map(|p| p.video_id.clone()).collect()
    }
}

// ---------------------------------------------------------------- split

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn part(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Usage(format!("unknown split {other:?}; use train, val or test"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let rows = [("train", &self.train), ("val", &self.val), ("test", &self.test)]
            .into_iter()
            .flat_map(|(name, ids)| ids.iter().map(move |v| vec![v.clone(), name.to_string()]));
        write_csv(path, &["video_id", "split"], rows)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut s = Split {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for r in read_csv(path, &["video_id", "split"])? {
            let part = match r.get(1).map(str::trim) {
                Some("train") => &mut s.train,
                Some("val") => &mut s.val,
                Some("test") => &mut s.test,
                other => return Err(fmt_err(path, format!("unknown split {other:?}"))),
            };
            part.push(r[0].trim().to_string());
        }
        Ok(s)
    }
}

/// Seeded split over videos, stratified per class when `classes` is given.
/// Each stratum gives `round(n·r_train)` videos to train, `round(n·r_val)` to
/// validation and the rest to test.
pub fn split_dataset(
    videos: &[String],
    classes: Option<&BTreeMap<String, String>>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<Split> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!(
            "ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let mut strata: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for v in videos {
        let key = match classes {
            Some(c) => c
                .get(v)
                .map(String::as_str)
                .ok_or_else(|| Error::Split(format!("video {v} has no class")))?,
            None => "",
        };
        strata.entry(key).or_default().push(v.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (_, mut vs) in strata {
        vs.sort();
        vs.shuffle(&mut rng);
        let n = vs.len() as f64;
        let n_train = ((n * a).round() as usize).min(vs.len());
        let n_val = ((n * b).round() as usize).min(vs.len() - n_train);
        split.train.extend_from_slice(&vs[..n_train]);
        split.val.extend_from_slice(&vs[n_train..n_train + n_val]);
        split.test.extend_from_slice(&vs[n_train + n_val..]);
    }
    for (name, part, r) in [
        ("train", &split.train, a),
        ("val", &split.val, b),
        ("test", &split.test, c),
    ] {
        if part.is_empty() && r > 0.0 {
            return Err(Error::Split(format!(
                "{name} split is empty for {} videos",
                videos.len()
            )));
        }
    }
    Ok(split)
}

// ---------------------------------------------------------------- synthetic

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub videos_per_class: usize,
    pub items_per_class: usize,
    pub shared_items: usize,
    pub pose_noise: f64,
    pub embed_noise: f64,
    /// Zipf exponent of the within-class item popularity.
    pub popularity_skew: f64,
    /// Label weight of a shared item relative to a class's top item.
    pub shared_weight: f64,
    pub frames: usize,
    pub factor_count: usize,
    pub factor_dim: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_classes: 8,
            videos_per_class: 67,
            items_per_class: 20,
            shared_items: 10,
            pose_noise: 0.02,
            embed_noise: 0.5,
            popularity_skew: 0.3,
            shared_weight: 0.3,
            frames: 20,
            factor_count: 9,
            factor_dim: 32,
            seed: 0,
        }
    }
}

pub const SYNTH_KEYS: &[&str] = &[
    "n_classes",
    "videos_per_class",
    "items_per_class",
    "shared_items",
    "pose_noise",
    "embed_noise",
    "popularity_skew",
    "shared_weight",
    "frames",
    "factor_count",
    "factor_dim",
    "seed",
];

impl SynthSpec {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = || Error::Spec(format!("{key}: cannot parse {v:?}"));
        match key.trim() {
            "n_classes" => self.n_classes = v.parse().map_err(|_| bad())?,
            "videos_per_class" => self.videos_per_class = v.parse().map_err(|_| bad())?,
            "items_per_class" => self.items_per_class = v.parse().map_err(|_| bad())?,
            "shared_items" => self.shared_items = v.parse().map_err(|_| bad())?,
            "pose_noise" => self.pose_noise = v.parse().map_err(|_| bad())?,
            "embed_noise" => self.embed_noise = v.parse().map_err(|_| bad())?,
            "popularity_skew" => self.popularity_skew = v.parse().map_err(|_| bad())?,
            "shared_weight" => self.shared_weight = v.parse().map_err(|_| bad())?,
            "frames" => self.frames = v.parse().map_err(|_| bad())?,
            "factor_count" => self.factor_count = v.parse().map_err(|_| bad())?,
            "factor_dim" => self.factor_dim = v.parse().map_err(|_| bad())?,
            "seed" => self.seed = v.parse().map_err(|_| bad())?,
            other => return Err(Error::Spec(format!("unknown spec key {other:?}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Spec(format!("line {}: expected key=value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Spec(m.into()));
        if self.n_classes == 0 || self.videos_per_class == 0 || self.items_per_class == 0 {
            return bad("n_classes, videos_per_class and items_per_class must be at least 1");
        }
        if self.items_per_class + self.shared_items.min(1) < 3 {
            return bad("each class needs at least 3 candidate items for 3..10 labels per video");
        }
        if self.shared_items > 0 && self.n_classes < 2 {
            return bad("shared items need at least 2 classes");
        }
        if self.frames == 0 || self.factor_count == 0 || self.factor_dim == 0 {
            return bad("frames, factor_count and factor_dim must be at least 1");
        }
        if !(self.pose_noise >= 0.0 && self.embed_noise >= 0.0)
            || !self.pose_noise.is_finite()
            || !self.embed_noise.is_finite()
        {
            return bad("noise levels must be finite and non-negative");
        }
        if !(self.popularity_skew >= 0.0 && self.popularity_skew.is_finite())
            || !(self.shared_weight > 0.0 && self.shared_weight.is_finite())
        {
            return bad("popularity_skew must be finite and non-negative, shared_weight finite and positive");
        }
        Ok(())
    }
}

/// A standing posture in image-like coordinates (y grows downward).
const BASE_POSE: [[f64; 2]; LANDMARKS] = [
    [0.500, 0.200],
    [0.510, 0.180],
    [0.520, 0.180],
    [0.530, 0.180],
    [0.490, 0.180],
    [0.480, 0.180],
    [0.470, 0.180],
    [0.545, 0.190],
    [0.455, 0.190],
    [0.515, 0.225],
    [0.485, 0.225],
    [0.580, 0.300],
    [0.420, 0.300],
    [0.610, 0.420],
    [0.390, 0.420],
    [0.620, 0.530],
    [0.380, 0.530],
    [0.625, 0.560],
    [0.375, 0.560],
    [0.620, 0.570],
    [0.380, 0.570],
    [0.610, 0.550],
    [0.390, 0.550],
    [0.550, 0.550],
    [0.450, 0.550],
    [0.560, 0.720],
    [0.440, 0.720],
    [0.560, 0.880],
    [0.440, 0.880],
    [0.555, 0.900],
    [0.445, 0.900],
    [0.575, 0.920],
    [0.425, 0.920],
];

/// Per-class motion pattern: static offsets and sinusoid amplitude/phase per
/// landmark and axis.
struct ClassMotion {
    offset: Vec<[f64; 3]>,
    amp: Vec<[f64; 3]>,
    phase: Vec<[f64; 3]>,
    freq: f64,
}

fn class_motion(rng: &mut ChaCha8Rng, c: usize) -> ClassMotion {
    let mut offset = vec![[0.0; 3]; LANDMARKS];
    let mut amp = vec![[0.0; 3]; LANDMARKS];
    let mut phase = vec![[0.0; 3]; LANDMARKS];
    // the torso (shoulders and hips) stays fixed so normalization is stable
    for j in (0..LANDMARKS).filter(|j| ![11, 12, 23, 24].contains(j)) {
        for a in 0..3 {
            offset[j][a] = rng.random_range(-0.06..0.06);
            amp[j][a] = rng.random_range(0.0..0.08);
            phase[j][a] = rng.random_range(0.0..std::f64::consts::TAU);
        }
    }
    ClassMotion {
        offset,
        amp,
        phase,
        freq: 0.05 + 0.03 * c as f64,
    }
}

fn round5(x: f64) -> f64 {
    (x * 1e5).round() / 1e5
}

/// Generate a planted dataset: pose motion and item descriptions both depend
/// on a hidden class, and labels tie each video to items of its class.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let motions: Vec<ClassMotion> = (0..spec.n_classes).map(|c| class_motion(&mut rng, c)).collect();

    // items
    let (f, d) = (spec.factor_count, spec.factor_dim);
    let means: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| (0..f * d).map(|_| std.sample(&mut rng)).collect())
        .collect();
    let noisy = |rng: &mut ChaCha8Rng, mean: &[f64]| -> Vec<f64> {
        mean.iter()
            .map(|m| (m + spec.embed_noise * std.sample(rng)) as f32 as f64)
            .collect()
    };
    let mut items = Vec::new();
    let mut class_items: Vec<Vec<usize>> = vec![Vec::new(); spec.n_classes];
    for c in 0..spec.n_classes {
        for i in 0..spec.items_per_class {
            let data = noisy(&mut rng, &means[c]);
            class_items[c].push(items.len());
            items.push(ItemRecord::new(
                format!("c{c}_i{i:02}"),
                format!("c{c}_g{}", i / 5),
                Tensor::matrix(f, d, data)?,
            )?);
        }
    }
    let mut shared_classes = Vec::new();
    for s in 0..spec.shared_items {
        let n_attach = rng.random_range(2..=3usize.min(spec.n_classes));
        let mut cs: Vec<usize> = rand::seq::index::sample(&mut rng, spec.n_classes, n_attach).into_vec();
        cs.sort_unstable();
        let mean: Vec<f64> = (0..f * d)
            .map(|k| cs.iter().map(|&c| means[c][k]).sum::<f64>() / cs.len() as f64)
            .collect();
        let data = noisy(&mut rng, &mean);
        for &c in &cs {
            class_items[c].push(items.len());
        }
        shared_classes.push(cs);
        items.push(ItemRecord::new(
            format!("shared_{s:02}"),
            format!("shared_g{}", s % 2),
            Tensor::matrix(f, d, data)?,
        )?);
    }

    // videos and labels
    let mut poses = Vec::new();
    let mut labels = Vec::new();
    let mut classes = BTreeMap::new();
    for c in 0..spec.n_classes {
        let m = &motions[c];
        // popularity: earlier class items and shared items are liked more
        let weights: Vec<f64> = class_items[c]
            .iter()
            .enumerate()
            .map(|(rank, &i)| {
                if i >= spec.n_classes * spec.items_per_class {
                    spec.shared_weight
                } else {
                    1.0 / (rank as f64 + 1.0).powf(spec.popularity_skew)
                }
            })
            .collect();
        for v in 0..spec.videos_per_class {
            let id = format!("c{c}_v{v:03}");
            let sig = spec.pose_noise;
            let shift = [10.0 * sig * std.sample(&mut rng), 10.0 * sig * std.sample(&mut rng)];
            let scale = 1.0 + 2.0 * sig * std.sample(&mut rng);
            let t0 = 20.0 * sig * std.sample(&mut rng);
            let mut data = Vec::with_capacity(spec.frames * LANDMARKS * POSE_CHANNELS);
            for t in 0..spec.frames {
                for j in 0..LANDMARKS {
                    let base = [BASE_POSE[j][0], BASE_POSE[j][1], 0.0];
                    for a in 0..3 {
                        let wave =
                            m.amp[j][a] * (std::f64::consts::TAU * m.freq * (t as f64 + t0) + m.phase[j][a]).sin();
                        let mut x = base[a] + m.offset[j][a] + wave + sig * std.sample(&mut rng);
                        if a < 2 {
                            x = shift[a] + scale * x;
                        }
                        data.push(round5(x));
                    }
                    data.push(round5((0.95 - 0.1 * sig * std.sample(&mut rng).abs()).clamp(0.0, 1.0)));
                }
            }
            poses.push(PoseTrajectory::new(
                id.clone(),
                Tensor::new(vec![spec.frames, LANDMARKS, POSE_CHANNELS], data)?,
            )?);
            classes.insert(id.clone(), format!("class{c}"));

            let n = rng.random_range(3..=10usize).min(class_items[c].len());
            let mut pool: Vec<(usize, f64)> = class_items[c].iter().copied().zip(weights.iter().copied()).collect();
            for _ in 0..n {
                let total: f64 = pool.iter().map(|p| p.1).sum();
                let mut r = rng.random_range(0.0..total);
                let mut pick = pool.len() - 1;
                for (k, p) in pool.iter().enumerate() {
                    if r < p.1 {
                        pick = k;
                        break;
                    }
                    r -= p.1;
                }
                let (item, _) = pool.remove(pick);
                let score = (rng.random_range(0.2..1.0f64) * 100.0).round() / 100.0;
                labels.push(LabelRow {
                    video_id: id.clone(),
                    item_id: items[item].item_id.clone(),
                    score,
                });
            }
        }
    }
    Dataset::new(poses, items, labels, Some(classes))
}

/// Write a synthetic dataset plus its spec into `dir`.
pub fn write_synthetic(spec: &SynthSpec, dir: &Path) -> Result<DatasetPaths> {
    let data = generate_synthetic(spec)?;
    let paths = data.save(dir)?;
    let mut f = fs::File::create(dir.join("spec.txt")).map_err(|e| Error::io(dir, e))?;
    let vals = [
        spec.n_classes.to_string(),
        spec.videos_per_class.to_string(),
        spec.items_per_class.to_string(),
        spec.shared_items.to_string(),
        spec.pose_noise.to_string(),
        spec.embed_noise.to_string(),
        spec.popularity_skew.to_string(),
        spec.shared_weight.to_string(),
        spec.frames.to_string(),
        spec.factor_count.to_string(),
        spec.factor_dim.to_string(),
        spec.seed.to_string(),
    ];
    for (k, v) in SYNTH_KEYS.iter().zip(vals) {
        writeln!(f, "{k}={v}").map_err(|e| Error::io(dir, e))?;
    }
    Ok(paths)
}
