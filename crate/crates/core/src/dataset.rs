//! Labeled image collections: metadata ingestion, stratified splits,
//! augmentation-based class balancing and synthetic planted-feature data.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::imaging::{read_image, AugmentSpec, Image, Rect, ResolvedAugment};
use crate::rng::substream;

/// Lesion classes in catalog order.
pub const ISIC_CLASSES: [&str; 7] = ["AKIEC", "BCC", "DF", "MEL", "NV", "BKL", "VASC"];

/// Per-class image counts of the 10015-image ISIC 2018 collection, in
/// [`ISIC_CLASSES`] order.
pub const ISIC_CLASS_COUNTS: [usize; 7] = [327, 514, 115, 1113, 6705, 1099, 142];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassCatalog {
    names: Vec<String>,
}

impl ClassCatalog {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a catalog needs at least 2 classes, got {}",
                names.len()
            )));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate class name {n:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn isic() -> Self {
        Self::new(ISIC_CLASSES).expect("static catalog is valid")
    }

    /// `class0 .. class{k-1}`.
    pub fn numbered(k: usize) -> Result<Self> {
        Self::new((0..k).map(|i| format!("class{i}")))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Where a record's pixels come from. Augmented sources are materialized
/// on demand from their base and transform.
#[derive(Debug, Clone)]
pub enum ImageSource {
    File(PathBuf),
    Inline(Arc<Image>),
    Augmented {
        base: Arc<ImageSource>,
        transform: ResolvedAugment,
    },
}

impl ImageSource {
    pub fn load(&self) -> Result<Image> {
        match self {
            ImageSource::File(path) => {
                if !path.exists() {
                    let id = path
                        .file_name()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
                    return Err(Error::MissingFile { id, dir });
                }
                read_image(path)
            }
            ImageSource::Inline(img) => Ok(img.as_ref().clone()),
            ImageSource::Augmented { base, transform } => transform.apply(&base.load()?),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Record {
    pub id: String,
    pub label: usize,
    pub source: ImageSource,
    /// Id of the original record when this one was synthesized by augmentation.
    pub derived_from: Option<String>,
    /// Location of the discriminative feature, when known.
    pub ground_truth: Option<Rect>,
}

impl Record {
    pub fn load(&self) -> Result<Image> {
        self.source.load()
    }

    pub fn transform_descriptor(&self) -> Option<String> {
        match &self.source {
            ImageSource::Augmented { transform, .. } => Some(transform.describe()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    catalog: ClassCatalog,
    records: Vec<Record>,
}

impl LabeledDataset {
    pub fn new(catalog: ClassCatalog, records: Vec<Record>) -> Result<Self> {
        let mut ids = HashSet::new();
        for (row, r) in records.iter().enumerate() {
            if r.label >= catalog.len() {
                return Err(Error::InvalidArgument(format!(
                    "record {:?} has class index {} but the catalog has {} classes",
                    r.id,
                    r.label,
                    catalog.len()
                )));
            }
            if !ids.insert(r.id.as_str()) {
                return Err(Error::DuplicateId {
                    row: row + 1,
                    id: r.id.clone(),
                });
            }
        }
        Ok(Self { catalog, records })
    }

    pub fn empty(catalog: ClassCatalog) -> Self {
        Self {
            catalog,
            records: Vec::new(),
        }
    }

    pub fn catalog(&self) -> &ClassCatalog {
        &self.catalog
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.catalog.len()];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }

    /// Records of one class, in dataset order.
    pub fn class_members(&self, class: usize) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.label == class)
    }

    pub fn load_all(&self) -> Result<Vec<(Image, usize)>> {
        self.records
            .iter()
            .map(|r| Ok((r.load()?, r.label)))
            .collect()
    }

    fn with_records(&self, records: Vec<Record>) -> Self {
        Self {
            catalog: self.catalog.clone(),
            records,
        }
    }
}

const IMAGE_EXTENSIONS: [&str; 5] = ["", "png", "ppm", "pgm", "pnm"];

fn resolve_image_path(dir: &Path, id: &str) -> PathBuf {
    for ext in IMAGE_EXTENSIONS {
        let p = if ext.is_empty() {
            dir.join(id)
        } else {
            dir.join(format!("{id}.{ext}"))
        };
        if p.is_file() {
            return p;
        }
    }
    // Missing files surface when the record is loaded.
    dir.join(id)
}

/// Parses an `image_id,label` CSV. Image files are resolved under
/// `image_dir` (bare id or id with a png/ppm/pgm extension) and read lazily.
pub fn load_metadata(csv_bytes: &[u8], image_dir: &Path, catalog: &ClassCatalog) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(csv_bytes);
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format("metadata", format!("missing column {name:?}")))
    };
    let id_col = col("image_id")?;
    let label_col = col("label")?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let row_no = i + 1;
        let id = row.get(id_col).unwrap_or_default().to_string();
        let label_name = row.get(label_col).unwrap_or_default();
        let label = catalog.index_of(label_name).ok_or_else(|| Error::UnknownLabel {
            row: row_no,
            label: label_name.to_string(),
        })?;
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId { row: row_no, id });
        }
        records.push(Record {
            source: ImageSource::File(resolve_image_path(image_dir, &id)),
            id,
            label,
            derived_from: None,
            ground_truth: None,
        });
    }
    LabeledDataset::new(catalog.clone(), records)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, validation: f64, test: f64, seed: u64) -> Result<Self> {
        let fr = [train, validation, test];
        if fr.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "split fractions must be nonnegative, got {fr:?}"
            )));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "split fractions must sum to 1, got {fr:?}"
            )));
        }
        Ok(Self {
            train,
            validation,
            test,
            seed,
        })
    }

    /// 70 / 10 / 20.
    pub fn standard(seed: u64) -> Self {
        Self::new(0.7, 0.1, 0.2, seed).expect("static fractions are valid")
    }

    pub fn fractions(&self) -> [f64; 3] {
        [self.train, self.validation, self.test]
    }
}

/// Largest-remainder apportionment of `n` items by `fractions`. Ties go to
/// the earlier part.
pub fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "validation", "test"];

/// Shuffles each class by the seed and cuts it into train / validation /
/// test by largest-remainder rounding.
pub fn stratified_split(
    ds: &LabeledDataset,
    spec: &SplitSpec,
) -> (LabeledDataset, LabeledDataset, LabeledDataset) {
    let mut parts: [Vec<Record>; 3] = Default::default();
    for class in 0..ds.catalog.len() {
        let mut members: Vec<&Record> = ds.class_members(class).collect();
        members.shuffle(&mut substream(spec.seed, class as u64));
        let sizes = apportion(members.len(), &spec.fractions());
        let mut it = members.into_iter();
        for (part, size) in parts.iter_mut().zip(sizes) {
            part.extend(it.by_ref().take(size).cloned());
        }
    }
    let [a, b, c] = parts;
    (ds.with_records(a), ds.with_records(b), ds.with_records(c))
}

/// Writes an `image_id,label,split` manifest.
pub fn write_split_manifest<W: Write>(
    out: W,
    splits: [&LabeledDataset; 3],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["image_id", "label", "split"])?;
    for (name, ds) in SPLIT_NAMES.iter().zip(splits) {
        for r in &ds.records {
            w.write_record([r.id.as_str(), ds.catalog.name(r.label), name])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BalancePolicy {
    /// Target must be at least the largest class.
    #[default]
    Strict,
    /// Classes already above target are left as they are.
    Cap,
}

/// Pads every class below `target_per_class` with augmented copies of its
/// members, cycling through them in dataset order. Original records are kept
/// untouched and in place; new records are appended.
pub fn balance_with_augmentation(
    ds: &LabeledDataset,
    target_per_class: usize,
    spec: &AugmentSpec,
    policy: BalancePolicy,
    seed: u64,
) -> Result<LabeledDataset> {
    let counts = ds.class_counts();
    for (class, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::EmptyClass(ds.catalog.name(class).to_string()));
        }
    }
    let largest = counts.iter().copied().max().unwrap_or(0);
    if policy == BalancePolicy::Strict && target_per_class < largest {
        return Err(Error::InvalidArgument(format!(
            "target {target_per_class} is below the largest class size {largest}"
        )));
    }
    let mut records = ds.records.clone();
    let mut ids: HashSet<String> = records.iter().map(|r| r.id.clone()).collect();
    let mut serial: u64 = 0;
    for class in 0..ds.catalog.len() {
        let members: Vec<&Record> = ds.class_members(class).collect();
        let missing = target_per_class.saturating_sub(members.len());
        for k in 0..missing {
            let base = members[k % members.len()];
            let transform = spec.resolve(crate::rng::derive_seed(seed, &format!("aug{serial}")))?;
            let mut id = format!("{}__aug{serial}", base.id);
            while ids.contains(&id) {
                id.push('_');
            }
            serial += 1;
            ids.insert(id.clone());
            records.push(Record {
                id,
                label: class,
                source: ImageSource::Augmented {
                    base: Arc::new(base.source.clone()),
                    transform,
                },
                derived_from: Some(base.derived_from.clone().unwrap_or_else(|| base.id.clone())),
                ground_truth: None,
            });
        }
    }
    Ok(ds.with_records(records))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tl" => Some(Self::TopLeft),
            "tr" => Some(Self::TopRight),
            "bl" => Some(Self::BottomLeft),
            "br" => Some(Self::BottomRight),
            _ => None,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Self::TopLeft => "tl",
            Self::TopRight => "tr",
            Self::BottomLeft => "bl",
            Self::BottomRight => "br",
        }
    }

    /// The quadrant's pixel rectangle; odd dimensions put the extra
    /// row/column in the right/bottom half.
    pub fn rect(self, width: usize, height: usize) -> Rect {
        let (hw, hh) = (width / 2, height / 2);
        match self {
            Self::TopLeft => Rect::new(0, 0, hw, hh),
            Self::TopRight => Rect::new(hw, 0, width - hw, hh),
            Self::BottomLeft => Rect::new(0, hh, hw, height - hh),
            Self::BottomRight => Rect::new(hw, hh, width - hw, height - hh),
        }
    }
}

pub const PLANTED_LEVEL: f64 = 0.9;
pub const BACKGROUND_LEVEL: f64 = 0.2;

#[derive(Debug, Clone, Copy)]
pub struct PlantedSpec {
    pub n_per_class: usize,
    pub image_edge: usize,
    pub patch_edge: usize,
    pub quadrant: Quadrant,
    pub noise_level: f64,
    pub seed: u64,
}

/// Two-class gray dataset: class 0 (`background`) is noise around 0.2,
/// class 1 (`planted`) adds a square patch around 0.9 at a seeded position
/// inside the chosen quadrant. Noise is uniform in `[-noise, +noise]`.
/// Records are ordered all class-0 then all class-1.
pub fn synth_planted_dataset(spec: &PlantedSpec) -> Result<LabeledDataset> {
    let edge = spec.image_edge;
    if spec.patch_edge == 0 || spec.patch_edge > edge / 2 {
        return Err(Error::InvalidArgument(format!(
            "patch edge {} must be in [1, {}]",
            spec.patch_edge,
            edge / 2
        )));
    }
    if !(spec.noise_level >= 0.0 && spec.noise_level.is_finite()) {
        return Err(Error::InvalidArgument("noise level must be >= 0".into()));
    }
    let catalog = ClassCatalog::new(["background", "planted"])?;
    let quad = spec.quadrant.rect(edge, edge);
    let mut records = Vec::with_capacity(2 * spec.n_per_class);
    for i in 0..2 * spec.n_per_class {
        let label = usize::from(i >= spec.n_per_class);
        let mut rng = substream(spec.seed, i as u64);
        let mut noise = |level: f64| {
            if spec.noise_level > 0.0 {
                level + rng.random_range(-spec.noise_level..=spec.noise_level)
            } else {
                level
            }
        };
        let mut pixels: Vec<f64> = (0..edge * edge).map(|_| noise(BACKGROUND_LEVEL)).collect();
        let ground_truth = if label == 1 {
            let mut rng = substream(spec.seed, (2 * spec.n_per_class + i) as u64);
            let x = quad.x + rng.random_range(0..=quad.w - spec.patch_edge);
            let y = quad.y + rng.random_range(0..=quad.h - spec.patch_edge);
            let rect = Rect::square(x, y, spec.patch_edge);
            let mut rng = substream(spec.seed, (4 * spec.n_per_class + i) as u64);
            for py in y..y + spec.patch_edge {
                for px in x..x + spec.patch_edge {
                    pixels[py * edge + px] = if spec.noise_level > 0.0 {
                        PLANTED_LEVEL + rng.random_range(-spec.noise_level..=spec.noise_level)
                    } else {
                        PLANTED_LEVEL
                    };
                }
            }
            Some(rect)
        } else {
            None
        };
        let image = Image::from_clamped(edge, edge, 1, pixels)?;
        records.push(Record {
            id: format!("synth_{i:05}"),
            label,
            source: ImageSource::Inline(Arc::new(image)),
            derived_from: None,
            ground_truth,
        });
    }
    LabeledDataset::new(catalog, records)
}

/// Per-class counts keyed by class name.
pub fn named_counts(ds: &LabeledDataset) -> HashMap<String, usize> {
    ds.class_counts()
        .into_iter()
        .enumerate()
        .map(|(i, n)| (ds.catalog.name(i).to_string(), n))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn catalog_ab() -> ClassCatalog {
        ClassCatalog::new(["A", "B"]).unwrap()
    }

    fn inline_dataset(counts: &[usize]) -> LabeledDataset {
        let catalog = ClassCatalog::numbered(counts.len()).unwrap();
        let mut records = Vec::new();
        for (class, &n) in counts.iter().enumerate() {
            for j in 0..n {
                let v = (class * 10 + j) as f64 / 100.0;
                records.push(Record {
                    id: format!("c{class}_{j}"),
                    label: class,
                    source: ImageSource::Inline(Arc::new(Image::filled(3, 3, 1, v).unwrap())),
                    derived_from: None,
                    ground_truth: None,
                });
            }
        }
        LabeledDataset::new(catalog, records).unwrap()
    }

    #[test]
    fn catalog_validation() {
        assert!(ClassCatalog::new(["A"]).is_err());
        assert!(ClassCatalog::new(["A", "A"]).is_err());
        let isic = ClassCatalog::isic();
        assert_eq!(isic.len(), 7);
        assert_eq!(isic.index_of("MEL"), Some(3));
        assert_eq!(ISIC_CLASS_COUNTS.iter().sum::<usize>(), 10015);
    }

    #[test]
    fn metadata_counts() {
        let csv = b"image_id,label\nISIC_1,MEL\nISIC_2,NV\nISIC_3,NV\n";
        let ds = load_metadata(csv, Path::new("/nonexistent"), &ClassCatalog::isic()).unwrap();
        assert_eq!(ds.len(), 3);
        let counts = named_counts(&ds);
        assert_eq!(counts["MEL"], 1);
        assert_eq!(counts["NV"], 2);
        assert_eq!(counts["DF"], 0);
    }

    #[test]
    fn metadata_header_only() {
        let ds = load_metadata(b"image_id,label\n", Path::new("."), &ClassCatalog::isic()).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn metadata_unknown_label_names_row() {
        let csv = b"image_id,label\na,MEL\nb,XYZ\n";
        match load_metadata(csv, Path::new("."), &ClassCatalog::isic()) {
            Err(Error::UnknownLabel { row, label }) => {
                assert_eq!(row, 2);
                assert_eq!(label, "XYZ");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn metadata_duplicate_and_missing_file() {
        let csv = b"image_id,label\na,MEL\na,NV\n";
        assert!(matches!(
            load_metadata(csv, Path::new("."), &ClassCatalog::isic()),
            Err(Error::DuplicateId { row: 2, .. })
        ));
        let dir = tempfile::tempdir().unwrap();
        let ds = load_metadata(b"image_id,label\nghost,MEL\n", dir.path(), &ClassCatalog::isic()).unwrap();
        assert!(matches!(ds.records()[0].load(), Err(Error::MissingFile { .. })));
    }

    #[test]
    fn metadata_resolves_extension() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("img1.pgm"), b"P2 1 1 255 255").unwrap();
        let ds = load_metadata(b"image_id,label\nimg1,A\n", dir.path(), &catalog_ab()).unwrap();
        assert_eq!(ds.records()[0].load().unwrap().pixels(), &[1.0]);
    }

    #[test]
    fn apportion_examples() {
        assert_eq!(apportion(10, &[0.7, 0.1, 0.2]), vec![7, 1, 2]);
        assert_eq!(apportion(5, &[1.0, 0.0, 0.0]), vec![5, 0, 0]);
        assert_eq!(apportion(3, &[0.7, 0.1, 0.2]), vec![2, 0, 1]);
        assert_eq!(apportion(0, &[0.7, 0.1, 0.2]), vec![0, 0, 0]);
    }

    #[test]
    fn split_single_class_of_ten() {
        let ds = inline_dataset(&[10, 0]);
        let (tr, va, te) = stratified_split(&ds, &SplitSpec::standard(3));
        assert_eq!((tr.len(), va.len(), te.len()), (7, 1, 2));
    }

    #[test]
    fn split_degenerate_and_deterministic() {
        let ds = inline_dataset(&[4, 6]);
        let (tr, va, te) = stratified_split(&ds, &SplitSpec::new(1.0, 0.0, 0.0, 0).unwrap());
        assert_eq!(tr.len(), 10);
        assert!(va.is_empty() && te.is_empty());
        let ids = |d: &LabeledDataset| d.records().iter().map(|r| r.id.clone()).collect::<Vec<_>>();
        let a = stratified_split(&ds, &SplitSpec::standard(11));
        let b = stratified_split(&ds, &SplitSpec::standard(11));
        assert_eq!(ids(&a.0), ids(&b.0));
        assert_eq!(ids(&a.2), ids(&b.2));
    }

    #[test]
    fn split_spec_validation() {
        assert!(SplitSpec::new(0.5, 0.5, 0.5, 0).is_err());
        assert!(SplitSpec::new(1.2, -0.2, 0.0, 0).is_err());
    }

    #[test]
    fn split_manifest_csv() {
        let ds = inline_dataset(&[3, 2]);
        let (a, b, c) = stratified_split(&ds, &SplitSpec::new(1.0, 0.0, 0.0, 0).unwrap());
        let mut out = Vec::new();
        write_split_manifest(&mut out, [&a, &b, &c]).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("image_id,label,split\n"));
        assert_eq!(text.lines().count(), 6);
        assert!(text.lines().skip(1).all(|l| l.ends_with(",train")));
    }

    #[test]
    fn balance_pads_minority() {
        let ds = inline_dataset(&[2, 5]);
        let out = balance_with_augmentation(&ds, 5, &AugmentSpec::standard(), BalancePolicy::Strict, 1).unwrap();
        assert_eq!(out.class_counts(), vec![5, 5]);
        let added: Vec<&Record> = out.records()[ds.len()..].iter().collect();
        assert_eq!(added.len(), 3);
        for r in &added {
            assert_eq!(r.label, 0);
            assert!(r.derived_from.as_deref().unwrap().starts_with("c0_"));
            assert!(r.transform_descriptor().is_some());
            assert_eq!(r.load().unwrap().dims(), (3, 3, 1));
        }
        // originals untouched and in order
        for (a, b) in ds.records().iter().zip(out.records()) {
            assert_eq!(a.id, b.id);
        }
    }

    #[test]
    fn balance_noop_and_errors() {
        let ds = inline_dataset(&[3, 3]);
        let out = balance_with_augmentation(&ds, 3, &AugmentSpec::standard(), BalancePolicy::Strict, 0).unwrap();
        assert_eq!(out.len(), ds.len());
        assert!(balance_with_augmentation(&ds, 2, &AugmentSpec::standard(), BalancePolicy::Strict, 0).is_err());
        assert_eq!(
            balance_with_augmentation(&ds, 2, &AugmentSpec::standard(), BalancePolicy::Cap, 0).unwrap().len(),
            6
        );
        let empty = inline_dataset(&[3, 0]);
        assert!(matches!(
            balance_with_augmentation(&empty, 3, &AugmentSpec::standard(), BalancePolicy::Strict, 0),
            Err(Error::EmptyClass(_))
        ));
    }

    fn planted(noise: f64) -> PlantedSpec {
        PlantedSpec {
            n_per_class: 6,
            image_edge: 16,
            patch_edge: 4,
            quadrant: Quadrant::TopRight,
            noise_level: noise,
            seed: 5,
        }
    }

    #[test]
    fn planted_zero_noise_marks_patch_exactly() {
        let ds = synth_planted_dataset(&planted(0.0)).unwrap();
        assert_eq!(ds.class_counts(), vec![6, 6]);
        let quad = Quadrant::TopRight.rect(16, 16);
        for r in ds.records() {
            let img = r.load().unwrap();
            for y in 0..16 {
                for x in 0..16 {
                    let inside = r.ground_truth.is_some_and(|g| g.contains(x, y));
                    assert_eq!(img.get(x, y, 0) == PLANTED_LEVEL, inside);
                }
            }
            if let Some(g) = r.ground_truth {
                assert!(quad.contains(g.x, g.y) && quad.contains(g.x + g.w - 1, g.y + g.h - 1));
            }
        }
    }

    #[test]
    fn planted_counts_and_brightness() {
        let mut spec = planted(0.05);
        spec.n_per_class = 50;
        let ds = synth_planted_dataset(&spec).unwrap();
        assert_eq!(ds.len(), 100);
        assert_eq!(ds.class_counts(), vec![50, 50]);
        let mut means = [0.0; 2];
        for r in ds.records() {
            means[r.label] += r.load().unwrap().mean() / 50.0;
        }
        // expected gap: 16 of 256 pixels raised by 0.7
        assert!(means[1] > means[0]);
        assert!((means[1] - means[0] - 0.7 * 16.0 / 256.0).abs() < 0.01);
        assert!(synth_planted_dataset(&PlantedSpec { patch_edge: 9, ..spec }).is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_proportional_partition(
            counts in proptest::collection::vec(1usize..40, 2..5),
            seed in any::<u64>(),
        ) {
            let ds = inline_dataset(&counts);
            let spec = SplitSpec::standard(seed);
            let (tr, va, te) = stratified_split(&ds, &spec);
            let mut all: Vec<String> = [&tr, &va, &te]
                .iter()
                .flat_map(|d| d.records().iter().map(|r| r.id.clone()))
                .collect();
            prop_assert_eq!(all.len(), ds.len());
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), ds.len());
            for (part, frac) in [&tr, &va, &te].iter().zip(spec.fractions()) {
                for (class, &n) in part.class_counts().iter().enumerate() {
                    prop_assert!((n as f64 - frac * counts[class] as f64).abs() < 1.0);
                }
            }
        }
    }
}
