//! Dataset manifests: a class-name table plus one line per item, each
//! item either seed-backed (generated on demand) or file-backed.
//!
//! Text format, `#` comments and blank lines allowed:
//!
//! ```text
//! class 0 sphere
//! class 1 box
//! item train 0 seed 42
//! item test 1 file clouds/box_0.xyz
//! ```
//!
//! Class ids must appear densely in order; item labels must reference a
//! declared class; the same (label, source) pair may appear only once
//! across both splits, so train and test stay disjoint. File paths are
//! manifest-relative and must not contain whitespace.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::files::load_cloud;
use super::shapes::{generate_instance, ShapeCategory};
use super::DataError;
use crate::geometry::PointCloud;

/// Which partition an item belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// Where an item's points come from.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ItemSource {
    /// Generate synthetically with this seed (category = class name).
    Seed(u64),
    /// Load from a manifest-relative file path.
    File(String),
}

impl fmt::Display for ItemSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ItemSource::Seed(s) => write!(f, "seed {s}"),
            ItemSource::File(p) => write!(f, "file {p}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestItem {
    pub split: Split,
    pub label: usize,
    pub source: ItemSource,
}

/// A validated dataset description. See module docs for the format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    classes: Vec<String>,
    items: Vec<ManifestItem>,
}

impl DatasetManifest {
    pub fn new(classes: Vec<String>) -> Result<Self, DataError> {
        if classes.is_empty() {
            return Err(DataError::InvalidSpec {
                reason: "manifest needs at least one class".into(),
            });
        }
        let mut seen = HashSet::new();
        for name in &classes {
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(DataError::InvalidSpec {
                    reason: format!("class name `{name}` must be non-empty without whitespace"),
                });
            }
            if !seen.insert(name.clone()) {
                return Err(DataError::InvalidSpec {
                    reason: format!("duplicate class name `{name}`"),
                });
            }
        }
        Ok(Self {
            classes,
            items: Vec::new(),
        })
    }

    /// A manifest over the five canonical shape classes with seed-backed
    /// items, `train_per_class` + `test_per_class` items per class.
    /// Deterministic in `base_seed`.
    pub fn synthetic_five_class(
        train_per_class: usize,
        test_per_class: usize,
        base_seed: u64,
    ) -> Self {
        let n = ShapeCategory::ALL.len();
        Self::synthetic_with_counts(
            &vec![train_per_class; n],
            &vec![test_per_class; n],
            base_seed,
        )
    }

    /// Like [`DatasetManifest::synthetic_five_class`] but pinning the
    /// split totals: `total = 5q + r` gives the first `r` classes one
    /// extra item.
    pub fn synthetic_five_class_totals(
        train_total: usize,
        test_total: usize,
        base_seed: u64,
    ) -> Self {
        let spread = |total: usize| -> Vec<usize> {
            let n = ShapeCategory::ALL.len();
            let (q, r) = (total / n, total % n);
            (0..n).map(|c| q + usize::from(c < r)).collect()
        };
        Self::synthetic_with_counts(&spread(train_total), &spread(test_total), base_seed)
    }

    fn synthetic_with_counts(
        train_counts: &[usize],
        test_counts: &[usize],
        base_seed: u64,
    ) -> Self {
        let classes = ShapeCategory::ALL.iter().map(|c| c.name().to_string()).collect();
        let mut manifest = Self::new(classes).expect("canonical class names are valid");
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
        let mut used = HashSet::new();
        let draw_unique = |used: &mut HashSet<u64>, rng: &mut ChaCha8Rng| loop {
            let s: u64 = rng.gen();
            if used.insert(s) {
                return s;
            }
        };
        for (split, counts) in [(Split::Train, train_counts), (Split::Test, test_counts)] {
            for (label, &count) in counts.iter().enumerate() {
                for _ in 0..count {
                    let seed = draw_unique(&mut used, &mut rng);
                    manifest
                        .push(ManifestItem {
                            split,
                            label,
                            source: ItemSource::Seed(seed),
                        })
                        .expect("fresh seeds cannot collide");
                }
            }
        }
        manifest
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn items(&self) -> &[ManifestItem] {
        &self.items
    }

    pub fn split_items(&self, split: Split) -> impl Iterator<Item = &ManifestItem> {
        self.items.iter().filter(move |it| it.split == split)
    }

    pub fn push(&mut self, item: ManifestItem) -> Result<(), DataError> {
        if item.label >= self.classes.len() {
            return Err(DataError::LabelOutOfRange {
                label: item.label,
                classes: self.classes.len(),
            });
        }
        if let ItemSource::File(path) = &item.source {
            if path.is_empty() || path.chars().any(char::is_whitespace) {
                return Err(DataError::InvalidSpec {
                    reason: format!("file path `{path}` must be non-empty without whitespace"),
                });
            }
        }
        if self
            .items
            .iter()
            .any(|it| it.label == item.label && it.source == item.source)
        {
            return Err(DataError::DuplicateItem {
                label: item.label,
                origin: item.source.to_string(),
            });
        }
        self.items.push(item);
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, name) in self.classes.iter().enumerate() {
            out.push_str(&format!("class {i} {name}\n"));
        }
        for it in &self.items {
            out.push_str(&format!(
                "item {} {} {}\n",
                it.split.name(),
                it.label,
                it.source
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, DataError> {
        let fail = |line: usize, reason: String| Err(DataError::ManifestParse { line, reason });
        let mut classes: Vec<String> = Vec::new();
        let mut pending: Vec<(usize, ManifestItem)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields[0] {
                "class" => {
                    if fields.len() != 3 {
                        return fail(line_no, "expected `class <id> <name>`".into());
                    }
                    let id: usize = match fields[1].parse() {
                        Ok(v) => v,
                        Err(_) => return fail(line_no, format!("invalid class id `{}`", fields[1])),
                    };
                    if id != classes.len() {
                        return fail(
                            line_no,
                            format!("class ids must be dense and ordered; expected {}", classes.len()),
                        );
                    }
                    classes.push(fields[2].to_string());
                }
                "item" => {
                    if fields.len() != 5 {
                        return fail(
                            line_no,
                            "expected `item <split> <label> seed|file <value>`".into(),
                        );
                    }
                    let split: Split = match fields[1].parse() {
                        Ok(v) => v,
                        Err(e) => return fail(line_no, e),
                    };
                    let label: usize = match fields[2].parse() {
                        Ok(v) => v,
                        Err(_) => return fail(line_no, format!("invalid label `{}`", fields[2])),
                    };
                    let source = match fields[3] {
                        "seed" => match fields[4].parse() {
                            Ok(v) => ItemSource::Seed(v),
                            Err(_) => {
                                return fail(line_no, format!("invalid seed `{}`", fields[4]))
                            }
                        },
                        "file" => ItemSource::File(fields[4].to_string()),
                        other => {
                            return fail(line_no, format!("unknown source kind `{other}`"))
                        }
                    };
                    pending.push((
                        line_no,
                        ManifestItem {
                            split,
                            label,
                            source,
                        },
                    ));
                }
                other => return fail(line_no, format!("unknown directive `{other}`")),
            }
        }
        let mut manifest = Self::new(classes).map_err(|e| DataError::ManifestParse {
            line: 0,
            reason: e.to_string(),
        })?;
        for (line_no, item) in pending {
            manifest.push(item).map_err(|e| DataError::ManifestParse {
                line: line_no,
                reason: e.to_string(),
            })?;
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.render())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// Materialises one split: a seed-backed item becomes a randomised
/// instance of its class (dimensions and pose drawn from the item seed)
/// at `n_points`/`jitter`; file-backed items are loaded relative to
/// `base_dir` and normalised. Returns `(cloud, label)` pairs in manifest
/// order.
pub fn load_dataset(
    manifest: &DatasetManifest,
    split: Split,
    n_points: usize,
    jitter: f64,
    base_dir: &Path,
) -> Result<Vec<(PointCloud, usize)>, DataError> {
    let mut out = Vec::new();
    for item in manifest.split_items(split) {
        let cloud = match &item.source {
            ItemSource::Seed(seed) => {
                let category: ShapeCategory = manifest.classes()[item.label].parse()?;
                generate_instance(category, n_points, jitter, *seed)?
            }
            ItemSource::File(rel) => load_cloud(&base_dir.join(rel))?.normalized()?,
        };
        out.push((cloud, item.label));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        let manifest = DatasetManifest::synthetic_five_class(3, 2, 42);
        let text = manifest.render();
        let back = DatasetManifest::parse(&text).unwrap();
        assert_eq!(back, manifest);
        assert_eq!(manifest.split_items(Split::Train).count(), 15);
        assert_eq!(manifest.split_items(Split::Test).count(), 10);
    }

    #[test]
    fn labels_must_reference_declared_classes() {
        let mut m = DatasetManifest::new(vec!["sphere".into()]).unwrap();
        let err = m
            .push(ManifestItem {
                split: Split::Train,
                label: 1,
                source: ItemSource::Seed(0),
            })
            .unwrap_err();
        assert!(matches!(err, DataError::LabelOutOfRange { label: 1, classes: 1 }));
    }

    #[test]
    fn duplicate_sources_are_rejected_across_splits() {
        let mut m = DatasetManifest::new(vec!["sphere".into()]).unwrap();
        m.push(ManifestItem {
            split: Split::Train,
            label: 0,
            source: ItemSource::Seed(7),
        })
        .unwrap();
        let err = m
            .push(ManifestItem {
                split: Split::Test,
                label: 0,
                source: ItemSource::Seed(7),
            })
            .unwrap_err();
        assert!(matches!(err, DataError::DuplicateItem { .. }));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "class 0 sphere\nitem train 0 seed x\n";
        match DatasetManifest::parse(text).unwrap_err() {
            DataError::ManifestParse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
        let text = "class 1 sphere\n";
        match DatasetManifest::parse(text).unwrap_err() {
            DataError::ManifestParse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn seed_backed_dataset_loads_with_labels() {
        let manifest = DatasetManifest::synthetic_five_class(2, 1, 9);
        let dir = tempfile::tempdir().unwrap();
        let data = load_dataset(&manifest, Split::Test, 64, 0.0, dir.path()).unwrap();
        assert_eq!(data.len(), 5);
        let labels: Vec<usize> = data.iter().map(|(_, l)| *l).collect();
        assert_eq!(labels, vec![0, 1, 2, 3, 4]);
        for (cloud, _) in &data {
            assert_eq!(cloud.len(), 64);
            assert!(cloud.max_norm() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn file_backed_items_load_relative_to_base_dir() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = generate_instance(ShapeCategory::Cone, 32, 0.0, 5).unwrap();
        super::super::files::save_cloud(&cloud, &dir.path().join("cone.bin")).unwrap();

        let mut manifest = DatasetManifest::new(vec!["cone".into()]).unwrap();
        manifest
            .push(ManifestItem {
                split: Split::Train,
                label: 0,
                source: ItemSource::File("cone.bin".into()),
            })
            .unwrap();
        let data = load_dataset(&manifest, Split::Train, 32, 0.0, dir.path()).unwrap();
        assert_eq!(data.len(), 1);
        // Re-normalising an already-normalised cloud only nudges
        // coordinates at rounding scale.
        for (p, q) in data[0].0.points().iter().zip(cloud.points()) {
            for a in 0..3 {
                assert!((p[a] - q[a]).abs() <= 1e-6);
            }
        }
    }
}
