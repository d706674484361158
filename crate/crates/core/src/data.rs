//! Dataset model: material classes, the binary plane format, the manifest
//! file, stratified 5-fold assignment and the split protocols.
//!
//! Planes are stored as "DPC1" + u32 height + u32 width (little endian)
//! followed by row-major 32-bit floats. In memory they are widened to f64;
//! every generated value is quantized to the f32 grid first, so write/read
//! round trips are bit-exact.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::augment::RawSample;
use crate::error::{Error, Result};
use crate::stream;

pub const PLANE_MAGIC: &[u8; 4] = b"DPC1";
pub const MANIFEST_HEADER: &str = "dpc-manifest 1";

// ── material classes ────────────────────────────────────────────────────────

/// The seven material categories; the index mapping is fixed in this order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MaterialClass {
    Mixed1,
    Mixed2,
    Ore1,
    Ore2,
    Ore3,
    Agglomerated,
    Cylindrical,
}

pub const CLASS_COUNT: usize = 7;

impl MaterialClass {
    pub const ALL: [MaterialClass; CLASS_COUNT] = [
        MaterialClass::Mixed1,
        MaterialClass::Mixed2,
        MaterialClass::Ore1,
        MaterialClass::Ore2,
        MaterialClass::Ore3,
        MaterialClass::Agglomerated,
        MaterialClass::Cylindrical,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap()
    }

    pub fn from_index(ix: usize) -> Option<Self> {
        Self::ALL.get(ix).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MaterialClass::Mixed1 => "Mixed1",
            MaterialClass::Mixed2 => "Mixed2",
            MaterialClass::Ore1 => "Ore1",
            MaterialClass::Ore2 => "Ore2",
            MaterialClass::Ore3 => "Ore3",
            MaterialClass::Agglomerated => "Agglomerated",
            MaterialClass::Cylindrical => "Cylindrical",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.name() == name)
    }
}

impl fmt::Display for MaterialClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

// ── plane storage ───────────────────────────────────────────────────────────

/// A single H×W real-valued plane (reflectance or depth).
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Plane {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(Error::shape(
                "plane",
                format!("{rows}x{cols} with {} values", values.len()),
            ));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "plane values".into(),
            });
        }
        Ok(Plane { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Plane {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Snaps every value to the nearest f32, the storage grid.
    pub fn quantize_to_f32(&mut self) {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
    }
}

fn format_err(path: &Path, offset: u64, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        offset,
        detail: detail.into(),
    }
}

pub fn write_plane(path: &Path, plane: &Plane) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + plane.values.len() * 4);
    bytes.extend_from_slice(PLANE_MAGIC);
    bytes.extend_from_slice(&(plane.rows as u32).to_le_bytes());
    bytes.extend_from_slice(&(plane.cols as u32).to_le_bytes());
    for &v in &plane.values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn read_plane(path: &Path) -> Result<Plane> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 || &bytes[..4] != PLANE_MAGIC {
        return Err(format_err(path, 0, "bad magic, expected DPC1"));
    }
    if bytes.len() < 12 {
        return Err(format_err(path, bytes.len() as u64, "truncated header"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if rows == 0 || cols == 0 {
        return Err(format_err(path, 4, "zero dimension"));
    }
    let expected = rows * cols * 4;
    if bytes.len() - 12 != expected {
        return Err(format_err(
            path,
            12,
            format!(
                "header claims {rows}x{cols} ({expected} payload bytes), file carries {}",
                bytes.len() - 12
            ),
        ));
    }
    let values: Vec<f64> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if !values.iter().all(|v| v.is_finite()) {
        return Err(format_err(path, 12, "non-finite payload values"));
    }
    Plane::new(rows, cols, values)
}

// ── manifest ────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub class: MaterialClass,
    pub reflectance_path: PathBuf,
    pub depth_path: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn class_counts(&self) -> [usize; CLASS_COUNT] {
        let mut counts = [0usize; CLASS_COUNT];
        for e in &self.entries {
            counts[e.class.index()] += 1;
        }
        counts
    }

    pub fn class_of(&self, id: &str) -> Option<MaterialClass> {
        self.entries.iter().find(|e| e.id == id).map(|e| e.class)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::from(MANIFEST_HEADER);
        text.push('\n');
        for e in &self.entries {
            text.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.id,
                e.class.name(),
                e.reflectance_path.display(),
                e.depth_path.display()
            ));
        }
        fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some(header) if header == MANIFEST_HEADER => {}
            other => {
                return Err(format_err(
                    path,
                    0,
                    format!("bad manifest header {other:?}, expected {MANIFEST_HEADER:?}"),
                ))
            }
        }
        let mut entries = Vec::new();
        let mut seen = BTreeMap::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Config(format!(
                    "{}: line {}: expected 4 tab-separated fields, got {}",
                    path.display(),
                    lineno + 2,
                    fields.len()
                )));
            }
            let class = MaterialClass::from_name(fields[1]).ok_or_else(|| {
                Error::Config(format!(
                    "{}: line {}: unknown class {}",
                    path.display(),
                    lineno + 2,
                    fields[1]
                ))
            })?;
            if seen.insert(fields[0].to_string(), ()).is_some() {
                return Err(Error::Config(format!(
                    "{}: duplicate id {}",
                    path.display(),
                    fields[0]
                )));
            }
            entries.push(ManifestEntry {
                id: fields[0].to_string(),
                class,
                reflectance_path: PathBuf::from(fields[2]),
                depth_path: PathBuf::from(fields[3]),
            });
        }
        Ok(DatasetManifest { entries })
    }
}

/// A manifest together with all its planes loaded into memory.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<RawSample>,
    index: BTreeMap<String, usize>,
}

impl LoadedDataset {
    pub fn new(manifest: DatasetManifest, samples: Vec<RawSample>) -> Self {
        let index = samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.clone(), i))
            .collect();
        LoadedDataset {
            manifest,
            samples,
            index,
        }
    }

    pub fn sample(&self, id: &str) -> Option<&RawSample> {
        self.index.get(id).map(|&i| &self.samples[i])
    }

    pub fn sample_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }
}

/// Reads the manifest at `manifest_path` and every plane it references.
pub fn load_dataset(manifest_path: &Path) -> Result<LoadedDataset> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let reflectance = read_plane(&base.join(&entry.reflectance_path))?;
        let depth = read_plane(&base.join(&entry.depth_path))?;
        let sample = RawSample {
            id: entry.id.clone(),
            reflectance,
            depth,
            label: Some(entry.class),
        };
        sample.validate()?;
        samples.push(sample);
    }
    Ok(LoadedDataset::new(manifest, samples))
}

// ── stratified folding ──────────────────────────────────────────────────────

/// Assignment of every sample id to one of k folds, stratified per class.
#[derive(Clone, Debug)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.get(id).copied()
    }

    /// Ids of one fold, in manifest order.
    pub fn fold_members<'a>(&self, manifest: &'a DatasetManifest, fold: usize) -> Vec<&'a str> {
        manifest
            .entries
            .iter()
            .filter(|e| self.assignment.get(&e.id) == Some(&fold))
            .map(|e| e.id.as_str())
            .collect()
    }

    /// Checks the partition property and the per-class balance: every fold's
    /// class count may deviate from the proportional share by at most 1.
    pub fn validate_against(&self, manifest: &DatasetManifest) -> Result<()> {
        if self.assignment.len() != manifest.len() {
            return Err(Error::Config(format!(
                "fold plan covers {} ids, manifest has {}",
                self.assignment.len(),
                manifest.len()
            )));
        }
        let mut per_class_fold = vec![[0usize; CLASS_COUNT]; self.k];
        for e in &manifest.entries {
            let fold = self.fold_of(&e.id).ok_or_else(|| {
                Error::Config(format!("id {} missing from fold plan", e.id))
            })?;
            per_class_fold[fold][e.class.index()] += 1;
        }
        let totals = manifest.class_counts();
        for fold in 0..self.k {
            for (ci, &total) in totals.iter().enumerate() {
                let share = total as f64 / self.k as f64;
                let got = per_class_fold[fold][ci] as f64;
                if (got - share).abs() > 1.0 + 1e-9 {
                    return Err(Error::Config(format!(
                        "fold {fold} holds {got} of class {} against share {share:.2}",
                        MaterialClass::ALL[ci]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Deals each class's shuffled members round-robin into k folds, starting
/// from a per-class random offset so remainders spread evenly.
pub fn stratified_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("fold count {k} must be at least 2")));
    }
    let mut by_class: Vec<Vec<&str>> = vec![Vec::new(); CLASS_COUNT];
    for e in &manifest.entries {
        by_class[e.class.index()].push(&e.id);
    }
    for (ci, members) in by_class.iter().enumerate() {
        if !members.is_empty() && members.len() < k {
            return Err(Error::ClassTooSmall {
                class: MaterialClass::ALL[ci].name().to_string(),
                count: members.len(),
                k,
            });
        }
    }
    let mut assignment = BTreeMap::new();
    for (ci, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        let mut rng = stream::derive(seed, "stratified-folds", &[ci as u64]);
        stream::shuffle(members, &mut rng);
        let offset = rng.gen_range(0..k);
        for (j, id) in members.iter().enumerate() {
            assignment.insert(id.to_string(), (offset + j) % k);
        }
    }
    Ok(FoldPlan { k, seed, assignment })
}

// ── split protocols ─────────────────────────────────────────────────────────

/// The two labeled-data regimes: 60/20/20 and 10/10/20 (percent of the
/// dataset for train/val/test).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitProtocol {
    FullySupervised,
    SemiSupervised { subsample_seed: u64 },
}

/// Outcome of a split: id lists in manifest order.
#[derive(Clone, Debug, Default)]
pub struct Splits {
    /// The three training folds with labels stripped; pretraining pool.
    pub pretrain_pool: Vec<String>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Largest-remainder apportionment of `total` over `weights`.
fn apportion(weights: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 || total == 0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|&w| w as f64 * total as f64 / sum as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut remainder = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for ix in order {
        if remainder == 0 {
            break;
        }
        counts[ix] += 1;
        remainder -= 1;
    }
    counts
}

/// Builds train/val/test id sets plus the unlabeled pretraining pool for one
/// fold rotation.
///
/// Fully supervised: train = the three folds that are neither test nor val,
/// val = the fold after test, test = `test_fold`. Semi-supervised: the same
/// three training folds are stratified-subsampled down to 10% of the dataset
/// for labeled training and a further disjoint 10% for validation. The
/// pretraining pool is always those three folds with labels discarded, so it
/// never intersects the test fold.
pub fn make_splits(
    manifest: &DatasetManifest,
    plan: &FoldPlan,
    protocol: &SplitProtocol,
    test_fold: usize,
) -> Result<Splits> {
    if test_fold >= plan.k {
        return Err(Error::Config(format!(
            "test fold {test_fold} out of range for k = {}",
            plan.k
        )));
    }
    let val_fold = (test_fold + 1) % plan.k;
    let mut pool = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for e in &manifest.entries {
        let fold = plan
            .fold_of(&e.id)
            .ok_or_else(|| Error::Config(format!("id {} missing from fold plan", e.id)))?;
        if fold == test_fold {
            test.push(e.id.clone());
        } else if fold == val_fold {
            val.push(e.id.clone());
        } else {
            pool.push(e.id.clone());
        }
    }

    match protocol {
        SplitProtocol::FullySupervised => Ok(Splits {
            pretrain_pool: pool.clone(),
            train: pool,
            val,
            test,
        }),
        SplitProtocol::SemiSupervised { subsample_seed } => {
            let total = manifest.len();
            let tenth = (total as f64 * 0.10).round() as usize;
            let counts = manifest.class_counts();
            let train_quota = apportion(&counts, tenth);
            let val_quota = apportion(&counts, tenth);

            let mut pool_by_class: Vec<Vec<&str>> = vec![Vec::new(); CLASS_COUNT];
            for id in &pool {
                let class = manifest.class_of(id).expect("pool ids come from the manifest");
                pool_by_class[class.index()].push(id);
            }
            let mut train_ids = Vec::new();
            let mut val_ids = Vec::new();
            for (ci, members) in pool_by_class.iter_mut().enumerate() {
                let need = train_quota[ci] + val_quota[ci];
                if need > members.len() {
                    return Err(Error::Config(format!(
                        "class {} has only {} pool members for a {need}-sample labeled quota",
                        MaterialClass::ALL[ci],
                        members.len()
                    )));
                }
                let mut rng = stream::derive(*subsample_seed, "semi-subsample", &[ci as u64]);
                stream::shuffle(members, &mut rng);
                train_ids.extend(members[..train_quota[ci]].iter().map(|s| s.to_string()));
                val_ids.extend(
                    members[train_quota[ci]..need].iter().map(|s| s.to_string()),
                );
            }
            // Back to manifest order for deterministic batch assembly.
            let in_manifest_order = |ids: Vec<String>| -> Vec<String> {
                let set: BTreeMap<&str, ()> = ids.iter().map(|s| (s.as_str(), ())).collect();
                manifest
                    .entries
                    .iter()
                    .filter(|e| set.contains_key(e.id.as_str()))
                    .map(|e| e.id.clone())
                    .collect()
            };
            Ok(Splits {
                pretrain_pool: pool,
                train: in_manifest_order(train_ids),
                val: in_manifest_order(val_ids),
                test,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn synthetic_manifest(per_class: &[usize; CLASS_COUNT]) -> DatasetManifest {
        let mut entries = Vec::new();
        for (ci, &count) in per_class.iter().enumerate() {
            let class = MaterialClass::ALL[ci];
            for j in 0..count {
                let id = format!("{}_{j:04}", class.name().to_lowercase());
                entries.push(ManifestEntry {
                    id: id.clone(),
                    class,
                    reflectance_path: PathBuf::from(format!("planes/{id}_ref.dpc")),
                    depth_path: PathBuf::from(format!("planes/{id}_dep.dpc")),
                });
            }
        }
        DatasetManifest { entries }
    }

    #[test]
    fn plane_round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.dpc");
        let mut rng = stream::derive(1, "plane-test", &[]);
        let values: Vec<f64> = (0..17 * 23).map(|_| rng.gen_range(-5.0f32..5.0) as f64).collect();
        let plane = Plane::new(17, 23, values).unwrap();
        write_plane(&path, &plane).unwrap();
        let back = read_plane(&path).unwrap();
        assert_eq!(back, plane);
        let bytes_a = fs::read(&path).unwrap();
        write_plane(&path, &back).unwrap();
        assert_eq!(bytes_a, fs::read(&path).unwrap());
    }

    #[test]
    fn corrupted_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.dpc");
        let plane = Plane::zeros(4, 4);
        write_plane(&path, &plane).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        match read_plane(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn inconsistent_payload_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("short.dpc");
        let plane = Plane::zeros(4, 4);
        write_plane(&path, &plane).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        match read_plane(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("manifest.tsv");
        let manifest = synthetic_manifest(&[2, 1, 3, 1, 1, 1, 1]);
        manifest.write(&path).unwrap();
        let back = DatasetManifest::read(&path).unwrap();
        assert_eq!(back, manifest);

        fs::write(&path, "dpc-manifest 1\nid1\tNotAClass\ta\tb\n").unwrap();
        assert!(DatasetManifest::read(&path).is_err());

        fs::write(&path, "dpc-manifest 1\nid1\tOre1\ta\tb\nid1\tOre2\tc\td\n").unwrap();
        assert!(DatasetManifest::read(&path).is_err());
    }

    #[test]
    fn divisible_classes_fold_exactly() {
        let manifest = synthetic_manifest(&[50; CLASS_COUNT]);
        let plan = stratified_folds(&manifest, 5, 3).unwrap();
        plan.validate_against(&manifest).unwrap();
        for fold in 0..5 {
            let members = plan.fold_members(&manifest, fold);
            assert_eq!(members.len(), 70);
            for class in MaterialClass::ALL {
                let n = members
                    .iter()
                    .filter(|id| manifest.class_of(id) == Some(class))
                    .count();
                assert_eq!(n, 10, "fold {fold} class {class}");
            }
        }
    }

    #[test]
    fn forty_five_member_class_folds_to_nine() {
        let mut counts = [50; CLASS_COUNT];
        counts[MaterialClass::Cylindrical.index()] = 45;
        let manifest = synthetic_manifest(&counts);
        let plan = stratified_folds(&manifest, 5, 4).unwrap();
        for fold in 0..5 {
            let n = plan
                .fold_members(&manifest, fold)
                .iter()
                .filter(|id| manifest.class_of(id) == Some(MaterialClass::Cylindrical))
                .count();
            assert_eq!(n, 9);
        }
    }

    #[test]
    fn remainder_classes_spread_within_one() {
        let mut counts = [20; CLASS_COUNT];
        counts[MaterialClass::Ore3.index()] = 503;
        let manifest = synthetic_manifest(&counts);
        let plan = stratified_folds(&manifest, 5, 5).unwrap();
        plan.validate_against(&manifest).unwrap();
        let mut total = 0;
        for fold in 0..5 {
            let n = plan
                .fold_members(&manifest, fold)
                .iter()
                .filter(|id| manifest.class_of(id) == Some(MaterialClass::Ore3))
                .count();
            assert!(n == 100 || n == 101, "fold {fold} holds {n}");
            total += n;
        }
        assert_eq!(total, 503);
    }

    #[test]
    fn class_smaller_than_k_rejected_by_name() {
        let mut counts = [10; CLASS_COUNT];
        counts[MaterialClass::Cylindrical.index()] = 3;
        let manifest = synthetic_manifest(&counts);
        match stratified_folds(&manifest, 5, 0) {
            Err(Error::ClassTooSmall { class, count, k }) => {
                assert_eq!(class, "Cylindrical");
                assert_eq!(count, 3);
                assert_eq!(k, 5);
            }
            other => panic!("expected ClassTooSmall, got {other:?}"),
        }
    }

    #[test]
    fn fold_assignment_deterministic() {
        let manifest = synthetic_manifest(&[30; CLASS_COUNT]);
        let a = stratified_folds(&manifest, 5, 11).unwrap();
        let b = stratified_folds(&manifest, 5, 11).unwrap();
        assert_eq!(a.assignment, b.assignment);
        let c = stratified_folds(&manifest, 5, 12).unwrap();
        assert_ne!(a.assignment, c.assignment);
    }

    #[test]
    fn fully_supervised_split_sizes() {
        let manifest = synthetic_manifest(&[100; CLASS_COUNT]);
        let plan = stratified_folds(&manifest, 5, 6).unwrap();
        let splits = make_splits(&manifest, &plan, &SplitProtocol::FullySupervised, 0).unwrap();
        assert_eq!(splits.train.len(), 420);
        assert_eq!(splits.val.len(), 140);
        assert_eq!(splits.test.len(), 140);
        assert_eq!(splits.pretrain_pool, splits.train);
    }

    #[test]
    fn semi_supervised_split_sizes() {
        let manifest = synthetic_manifest(&[100; CLASS_COUNT]);
        let plan = stratified_folds(&manifest, 5, 7).unwrap();
        let splits = make_splits(
            &manifest,
            &plan,
            &SplitProtocol::SemiSupervised { subsample_seed: 1 },
            0,
        )
        .unwrap();
        assert_eq!(splits.train.len(), 70);
        assert_eq!(splits.val.len(), 70);
        assert_eq!(splits.test.len(), 140);
        assert_eq!(splits.pretrain_pool.len(), 420);
        // Disjointness inside the pool.
        for id in &splits.train {
            assert!(!splits.val.contains(id));
            assert!(splits.pretrain_pool.contains(id));
        }
    }

    #[test]
    fn rotations_cover_every_sample_once_and_isolate_test() {
        let manifest = synthetic_manifest(&[40; CLASS_COUNT]);
        let plan = stratified_folds(&manifest, 5, 8).unwrap();
        let mut tested: BTreeMap<String, usize> = BTreeMap::new();
        for test_fold in 0..5 {
            let splits =
                make_splits(&manifest, &plan, &SplitProtocol::FullySupervised, test_fold).unwrap();
            for id in &splits.test {
                *tested.entry(id.clone()).or_insert(0) += 1;
            }
            for id in &splits.pretrain_pool {
                assert!(!splits.test.contains(id), "pretrain pool leaked into test");
            }
            for id in &splits.train {
                assert!(!splits.val.contains(id));
                assert!(!splits.test.contains(id));
            }
        }
        assert_eq!(tested.len(), manifest.len());
        assert!(tested.values().all(|&n| n == 1));
    }

    #[test]
    fn invalid_test_fold_rejected() {
        let manifest = synthetic_manifest(&[10; CLASS_COUNT]);
        let plan = stratified_folds(&manifest, 5, 9).unwrap();
        assert!(make_splits(&manifest, &plan, &SplitProtocol::FullySupervised, 5).is_err());
    }

    #[test]
    fn apportion_hits_total_exactly() {
        let counts = [164usize, 122, 860, 698, 503, 616, 45];
        for total in [70usize, 301, 1] {
            let got = apportion(&counts, total);
            assert_eq!(got.iter().sum::<usize>(), total);
        }
    }
}
