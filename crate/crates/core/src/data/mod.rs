//! Manifests for the two dataset schemas, target normalization, image I/O
//! and a procedural canopy generator.
//!
//! Manifest paths are relative to the manifest's own directory.

mod image;
mod synth;

pub use self::image::{crop_resize, decode_image, encode_ppm, load_image, resize_bilinear, write_ppm};
pub use self::synth::{render_scene, synth_dataset, Scene, SceneParams, SplitPlan, SynthConfig, PixelClass};

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FRACTION_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schema {
    /// grass, white clover, red clover, weeds; no mass or height.
    Grassclover4,
    /// grass, clover, weeds with herbage mass and height.
    Irish3,
}

impl Schema {
    pub fn species(self) -> &'static [&'static str] {
        match self {
            Schema::Grassclover4 => &["grass", "white_clover", "red_clover", "weeds"],
            Schema::Irish3 => &["grass", "clover", "weeds"],
        }
    }

    pub fn n_species(self) -> usize {
        self.species().len()
    }

    pub fn has_scalars(self) -> bool {
        matches!(self, Schema::Irish3)
    }

    pub fn header(self) -> Vec<&'static str> {
        let mut h = vec!["path"];
        h.extend_from_slice(self.species());
        if self.has_scalars() {
            h.extend_from_slice(&["mass_kg_dm_ha", "height_cm", "split", "source"]);
        } else {
            h.push("split");
        }
        h
    }

    pub fn for_species_count(n: usize) -> Option<Self> {
        match n {
            3 => Some(Schema::Irish3),
            4 => Some(Schema::Grassclover4),
            _ => None,
        }
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schema::Grassclover4 => "grassclover4",
            Schema::Irish3 => "irish3",
        })
    }
}

impl FromStr for Schema {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grassclover4" => Ok(Schema::Grassclover4),
            "irish3" => Ok(Schema::Irish3),
            other => Err(Error::Config(format!("unknown schema `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureSource {
    Camera,
    Phone,
    Synthetic,
}

impl fmt::Display for CaptureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CaptureSource::Camera => "camera",
            CaptureSource::Phone => "phone",
            CaptureSource::Synthetic => "synthetic",
        })
    }
}

impl FromStr for CaptureSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "camera" => Ok(CaptureSource::Camera),
            "phone" => Ok(CaptureSource::Phone),
            "synthetic" => Ok(CaptureSource::Synthetic),
            other => Err(Error::Config(format!("unknown capture source `{other}`"))),
        }
    }
}

/// One labeled image. Fractions are unitless and follow the schema's
/// species order.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub path: String,
    pub fractions: Vec<f64>,
    pub mass: Option<f64>,
    pub height: Option<f64>,
    pub split: Split,
    pub source: CaptureSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub schema: Schema,
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
    pub unlabeled_paths: Vec<String>,
}

impl Manifest {
    pub fn resolve(&self, path: &str) -> PathBuf {
        self.root.join(path)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn select(&self, split: Split, source: Option<CaptureSource>) -> Vec<&SampleRecord> {
        self.split(split)
            .filter(|r| source.is_none_or(|s| r.source == s))
            .collect()
    }
}

fn manifest_root(path: &Path) -> PathBuf {
    path.parent()
        .map(Path::to_path_buf)
        .unwrap_or_default()
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn check_header(path: &Path, reader: &mut csv::Reader<std::fs::File>, expected: &[&str]) -> Result<()> {
    let header = reader.headers().map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let got: Vec<&str> = header.iter().collect();
    if got != expected {
        let missing: Vec<&&str> = expected.iter().filter(|c| !got.contains(c)).collect();
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            message: format!(
                "header {:?} does not match {:?} (missing columns: {missing:?})",
                got.join(","),
                expected.join(",")
            ),
        });
    }
    Ok(())
}

/// Reads a labeled manifest. Rows are validated and kept in file order.
pub fn load_manifest(path: impl AsRef<Path>, schema: Schema) -> Result<Manifest> {
    let path = path.as_ref();
    let mut reader = csv_reader(path)?;
    check_header(path, &mut reader, &schema.header())?;

    let n = schema.n_species();
    let mut records = Vec::new();
    let mut seen: HashSet<(Split, String)> = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row_err = |message: String| Error::ManifestRow {
            path: path.to_path_buf(),
            row: line,
            message,
        };
        let row = row.map_err(|e| row_err(e.to_string()))?;
        let field = |idx: usize| row.get(idx).unwrap_or("");
        let number = |idx: usize, col: &str| -> Result<f64> {
            let raw = field(idx);
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| row_err(format!("column `{col}`: cannot parse `{raw}` as a number")))
        };
        let optional = |idx: usize, col: &str| -> Result<Option<f64>> {
            if field(idx).is_empty() {
                Ok(None)
            } else {
                number(idx, col).map(Some)
            }
        };

        let record_path = field(0).to_string();
        if record_path.is_empty() {
            return Err(row_err("empty path".into()));
        }
        let fractions = schema
            .species()
            .iter()
            .enumerate()
            .map(|(k, name)| number(k + 1, name))
            .collect::<Result<Vec<_>>>()?;
        if let Some((k, v)) = fractions.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(row_err(format!("fraction `{}` = {v} outside [0, 1]", schema.species()[k])));
        }
        let total: f64 = fractions.iter().sum();
        if (total - 1.0).abs() > FRACTION_SUM_TOLERANCE {
            return Err(row_err(format!("fractions sum to {total}, expected 1")));
        }

        let (mass, height, split_idx, source) = if schema.has_scalars() {
            let mass = optional(n + 1, "mass_kg_dm_ha")?;
            let height = optional(n + 2, "height_cm")?;
            let source = field(n + 4).parse().map_err(|e: Error| row_err(e.to_string()))?;
            (mass, height, n + 3, source)
        } else {
            (None, None, n + 1, CaptureSource::Camera)
        };
        if mass.is_some_and(|m| m < 0.0) {
            return Err(row_err("negative herbage mass".into()));
        }
        if height.is_some_and(|h| h < 0.0) {
            return Err(row_err("negative height".into()));
        }
        let split: Split = field(split_idx).parse().map_err(|e: Error| row_err(e.to_string()))?;
        if !seen.insert((split, record_path.clone())) {
            return Err(row_err(format!("duplicate path `{record_path}` in split {split}")));
        }
        records.push(SampleRecord {
            path: record_path,
            fractions,
            mass,
            height,
            split,
            source,
        });
    }
    Ok(Manifest {
        schema,
        root: manifest_root(path),
        records,
        unlabeled_paths: Vec::new(),
    })
}

/// Reads a `path`-only manifest of unlabeled images; paths come back
/// resolved against the manifest directory.
pub fn load_unlabeled(path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    let mut reader = csv_reader(path)?;
    check_header(path, &mut reader, &["path"])?;
    let root = manifest_root(path);
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::ManifestRow {
            path: path.to_path_buf(),
            row: i + 2,
            message: e.to_string(),
        })?;
        match row.get(0) {
            Some(p) if !p.is_empty() => out.push(root.join(p)),
            _ => {
                return Err(Error::ManifestRow {
                    path: path.to_path_buf(),
                    row: i + 2,
                    message: "empty path".into(),
                })
            }
        }
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, schema: Schema, records: &[SampleRecord]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(schema.header()).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        let mut row = vec![r.path.clone()];
        row.extend(r.fractions.iter().map(|f| f.to_string()));
        if schema.has_scalars() {
            row.extend([opt(r.mass), opt(r.height), r.split.to_string(), r.source.to_string()]);
        } else {
            row.push(r.split.to_string());
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_unlabeled(path: impl AsRef<Path>, paths: &[String]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["path"]).map_err(csv_err)?;
    for p in paths {
        w.write_record([p]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Min–max statistics of the training split, frozen into checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mass_min: f64,
    pub mass_max: f64,
    pub height_min: f64,
    pub height_max: f64,
}

impl NormStats {
    pub fn validate(&self) -> Result<()> {
        let ok = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && hi > lo;
        if !ok(self.mass_min, self.mass_max) || !ok(self.height_min, self.height_max) {
            return Err(Error::Config(format!("invalid normalization statistics {self:?}")));
        }
        Ok(())
    }

    pub fn normalize_mass(&self, mass: f64) -> f64 {
        (mass - self.mass_min) / (self.mass_max - self.mass_min)
    }

    pub fn normalize_height(&self, height: f64) -> f64 {
        (height - self.height_min) / (self.height_max - self.height_min)
    }

    /// Inputs are clamped to [0, 1], so outputs never leave `[min, max]`.
    pub fn denormalize_mass(&self, x: f64) -> f64 {
        x.clamp(0.0, 1.0) * (self.mass_max - self.mass_min) + self.mass_min
    }

    pub fn denormalize_height(&self, x: f64) -> f64 {
        x.clamp(0.0, 1.0) * (self.height_max - self.height_min) + self.height_min
    }
}

/// Min/max of mass and height over the training split only.
pub fn compute_norm_stats(manifest: &Manifest) -> Result<NormStats> {
    let range = |values: Vec<f64>, name: &'static str| -> Result<(f64, f64)> {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if values.len() < 2 || !(hi > lo) {
            return Err(Error::DegenerateTarget(name));
        }
        Ok((lo, hi))
    };
    let train: Vec<&SampleRecord> = manifest.split(Split::Train).collect();
    let (mass_min, mass_max) = range(train.iter().filter_map(|r| r.mass).collect(), "mass")?;
    let (height_min, height_max) = range(train.iter().filter_map(|r| r.height).collect(), "height")?;
    Ok(NormStats {
        mass_min,
        mass_max,
        height_min,
        height_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    const IRISH_HEADER: &str = "path,grass,clover,weeds,mass_kg_dm_ha,height_cm,split,source\n";

    #[test]
    fn parses_irish_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.csv",
            &format!("{IRISH_HEADER}img1.ppm,0.7,0.2,0.1,1500,5.0,train,camera\n"),
        );
        let m = load_manifest(&p, Schema::Irish3).unwrap();
        assert_eq!(m.records.len(), 1);
        let r = &m.records[0];
        assert_eq!(r.fractions, vec![0.7, 0.2, 0.1]);
        assert_eq!(r.mass, Some(1500.0));
        assert_eq!(r.height, Some(5.0));
        assert_eq!(r.split, Split::Train);
        assert_eq!(r.source, CaptureSource::Camera);
        assert_eq!(m.resolve(&r.path), dir.path().join("img1.ppm"));
    }

    #[test]
    fn rejects_bad_fraction_sum_with_row_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.csv",
            &format!(
                "{IRISH_HEADER}a.ppm,0.7,0.2,0.1,1500,5,train,camera\nb.ppm,0.5,0.2,0.1,1500,5,train,camera\n"
            ),
        );
        match load_manifest(&p, Schema::Irish3) {
            Err(Error::ManifestRow { row, message, .. }) => {
                assert_eq!(row, 3);
                assert!(message.contains("sum"), "{message}");
            }
            other => panic!("expected row error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_missing_columns_bad_numbers_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "path,grass,clover\nx,1,0\n");
        assert!(matches!(load_manifest(&p, Schema::Irish3), Err(Error::Manifest { .. })));

        let p = write(
            dir.path(),
            "b.csv",
            &format!("{IRISH_HEADER}a.ppm,0.7,zero,0.3,1500,5,train,camera\n"),
        );
        assert!(matches!(load_manifest(&p, Schema::Irish3), Err(Error::ManifestRow { row: 2, .. })));

        let p = write(
            dir.path(),
            "c.csv",
            &format!(
                "{IRISH_HEADER}a.ppm,1,0,0,1,1,train,camera\na.ppm,1,0,0,1,1,val,camera\na.ppm,1,0,0,1,1,train,phone\n"
            ),
        );
        match load_manifest(&p, Schema::Irish3) {
            Err(Error::ManifestRow { row, message, .. }) => {
                assert_eq!(row, 4);
                assert!(message.contains("duplicate"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn grassclover_split_counts() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("path,grass,white_clover,red_clover,weeds,split\n");
        for i in 0..152 {
            let split = if i < 100 { "train" } else { "val" };
            body.push_str(&format!("img{i}.png,0.4,0.3,0.2,0.1,{split}\n"));
        }
        let p = write(dir.path(), "gc.csv", &body);
        let m = load_manifest(&p, Schema::Grassclover4).unwrap();
        assert_eq!(m.split(Split::Train).count(), 100);
        assert_eq!(m.split(Split::Val).count(), 52);
        assert!(m.records.iter().all(|r| r.mass.is_none() && r.fractions.len() == 4));
    }

    #[test]
    fn load_is_order_preserving_and_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.csv",
            &format!(
                "{IRISH_HEADER}c.ppm,1,0,0,10,1,train,camera\na.ppm,0,1,0,20,2,val,phone\nb.ppm,0,0,1,30,3,test,camera\n"
            ),
        );
        let a = load_manifest(&p, Schema::Irish3).unwrap();
        let b = load_manifest(&p, Schema::Irish3).unwrap();
        assert_eq!(a, b);
        let order: Vec<&str> = a.records.iter().map(|r| r.path.as_str()).collect();
        assert_eq!(order, ["c.ppm", "a.ppm", "b.ppm"]);

        let out = dir.path().join("copy.csv");
        write_manifest(&out, Schema::Irish3, &a.records).unwrap();
        assert_eq!(load_manifest(&out, Schema::Irish3).unwrap().records, a.records);
    }

    fn record(mass: f64, height: f64, split: Split) -> SampleRecord {
        SampleRecord {
            path: format!("{mass}-{split}.ppm"),
            fractions: vec![1.0, 0.0, 0.0],
            mass: Some(mass),
            height: Some(height),
            split,
            source: CaptureSource::Camera,
        }
    }

    fn manifest(records: Vec<SampleRecord>) -> Manifest {
        Manifest {
            schema: Schema::Irish3,
            root: PathBuf::new(),
            records,
            unlabeled_paths: vec![],
        }
    }

    #[test]
    fn norm_stats_use_train_split_only() {
        let base = vec![
            record(1000.0, 3.0, Split::Train),
            record(2000.0, 5.0, Split::Train),
            record(3000.0, 9.0, Split::Train),
        ];
        let stats = compute_norm_stats(&manifest(base.clone())).unwrap();
        assert_eq!((stats.mass_min, stats.mass_max), (1000.0, 3000.0));
        assert_eq!((stats.height_min, stats.height_max), (3.0, 9.0));

        let mut with_val = base.clone();
        with_val.push(record(99999.0, 100.0, Split::Val));
        with_val.push(record(1.0, 0.1, Split::Test));
        assert_eq!(compute_norm_stats(&manifest(with_val)).unwrap(), stats);

        for r in &base {
            let x = stats.normalize_mass(r.mass.unwrap());
            assert!((0.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn norm_stats_reject_constant_target() {
        let m = manifest(vec![record(1000.0, 3.0, Split::Train), record(1000.0, 4.0, Split::Train)]);
        assert!(matches!(compute_norm_stats(&m), Err(Error::DegenerateTarget("mass"))));
    }

    #[test]
    fn unlabeled_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "u.csv", "path\nu0.ppm\nsub/u1.ppm\n");
        let paths = load_unlabeled(&p).unwrap();
        assert_eq!(paths, vec![dir.path().join("u0.ppm"), dir.path().join("sub/u1.ppm")]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalize_denormalize_round_trip(lo in -1e3f64..1e3, span in 1e-1f64..1e4, t in 0.0f64..=1.0) {
                let stats = NormStats { mass_min: lo, mass_max: lo + span, height_min: lo, height_max: lo + span };
                let v = lo + t * span;
                let back = stats.denormalize_mass(stats.normalize_mass(v));
                prop_assert!((back - v).abs() <= 1e-4 * span.max(1.0));
                let back = stats.denormalize_height(stats.normalize_height(v));
                prop_assert!((back - v).abs() <= 1e-4 * span.max(1.0));
            }
        }
    }
}
