//! Composition RMSE, herbage-mass RMSE (total and per species), herbage
//! relative error and height error, assembled into tabular reports.
//!
//! Composition errors are in percentage points, mass errors in kg DM ha⁻¹ and
//! height errors in cm. Every "Avg." column is the arithmetic mean of the
//! per-species columns listed before it (Total is never averaged in).

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{load_image, CaptureSource, Manifest, SampleRecord, Schema, Split};
use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::tensor::Tensor;

const INFERENCE_CHUNK: usize = 64;

/// Model output for one image, in fraction space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub path: String,
    pub fractions: Vec<f64>,
    pub total_mass: Option<f64>,
    pub height: Option<f64>,
}

impl Prediction {
    pub fn percentages(&self) -> Vec<f64> {
        self.fractions.iter().map(|f| 100.0 * f).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub fractions: Vec<f64>,
    pub mass: Option<f64>,
    pub height: Option<f64>,
}

impl From<&SampleRecord> for GroundTruth {
    fn from(r: &SampleRecord) -> Self {
        Self {
            fractions: r.fractions.clone(),
            mass: r.mass,
            height: r.height,
        }
    }
}

/// Named metric columns plus their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSet {
    pub columns: Vec<(String, f64)>,
    pub avg: f64,
}

impl ColumnSet {
    pub fn new(columns: Vec<(String, f64)>) -> Self {
        let avg = columns.iter().map(|(_, v)| v).sum::<f64>() / columns.len() as f64;
        Self { columns, avg }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

fn check_aligned(preds: &[Prediction], gts: &[GroundTruth], width: usize) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Metrics("no predictions".into()));
    }
    if preds.len() != gts.len() {
        return Err(Error::Metrics(format!(
            "{} predictions for {} ground-truth records",
            preds.len(),
            gts.len()
        )));
    }
    for (p, g) in preds.iter().zip(gts) {
        if p.fractions.len() != width || g.fractions.len() != width {
            return Err(Error::Metrics(format!(
                "`{}`: expected {width} fractions, got {} predicted and {} ground truth",
                p.path,
                p.fractions.len(),
                g.fractions.len()
            )));
        }
    }
    Ok(())
}

fn rmse(pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (sum, n) = pairs.fold((0.0, 0usize), |(s, n), (a, b)| (s + (a - b) * (a - b), n + 1));
    (sum / n as f64).sqrt()
}

fn display_name(species: &str) -> String {
    let s = species.replace('_', " ");
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

/// Per-species RMSE in percentage points. For grassclover4 an "Any clover"
/// column (white + red, summed before differencing) follows Grass, and the
/// average covers all five columns.
pub fn composition_rmse(preds: &[Prediction], gts: &[GroundTruth], schema: Schema) -> Result<ColumnSet> {
    let species = schema.species();
    check_aligned(preds, gts, species.len())?;
    let column = |f: &dyn Fn(&[f64]) -> f64| {
        rmse(preds.iter().zip(gts).map(|(p, g)| (100.0 * f(&p.fractions), 100.0 * f(&g.fractions))))
    };
    let mut columns: Vec<(String, f64)> = species
        .iter()
        .enumerate()
        .map(|(s, name)| (display_name(name), column(&|f| f[s])))
        .collect();
    if schema == Schema::Grassclover4 {
        columns.insert(1, ("Any clover".into(), column(&|f| f[1] + f[2])));
    }
    Ok(ColumnSet::new(columns))
}

/// `total_mass · fraction` per species.
pub fn species_mass(pred: &Prediction) -> Result<Vec<f64>> {
    let total = pred
        .total_mass
        .ok_or_else(|| Error::Metrics(format!("`{}` has no predicted mass", pred.path)))?;
    Ok(pred.fractions.iter().map(|f| total * f).collect())
}

fn gt_mass(g: &GroundTruth, path: &str) -> Result<f64> {
    g.mass
        .ok_or_else(|| Error::Metrics(format!("`{path}` has no ground-truth mass")))
}

/// Herbage-mass RMSE: `total` plus per-species columns (mass × fraction on
/// both sides); `avg` covers the species columns only.
#[derive(Debug, Clone, PartialEq)]
pub struct Hrmse {
    pub total: f64,
    pub species: ColumnSet,
}

pub fn hrmse(preds: &[Prediction], gts: &[GroundTruth], schema: Schema) -> Result<Hrmse> {
    let species = schema.species();
    check_aligned(preds, gts, species.len())?;
    let mut pred_mass = Vec::with_capacity(preds.len());
    let mut true_mass = Vec::with_capacity(preds.len());
    for (p, g) in preds.iter().zip(gts) {
        pred_mass.push((p.total_mass.unwrap_or(f64::NAN), species_mass(p)?));
        let m = gt_mass(g, &p.path)?;
        true_mass.push((m, g.fractions.iter().map(|f| m * f).collect::<Vec<_>>()));
    }
    let total = rmse(pred_mass.iter().zip(&true_mass).map(|(p, g)| (p.0, g.0)));
    let columns = species
        .iter()
        .enumerate()
        .map(|(s, name)| {
            let v = rmse(pred_mass.iter().zip(&true_mass).map(|(p, g)| (p.1[s], g.1[s])));
            (display_name(name), v)
        })
        .collect();
    Ok(Hrmse {
        total,
        species: ColumnSet::new(columns),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HreAggregate {
    #[default]
    Mean,
    Median,
}

impl std::str::FromStr for HreAggregate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "median" => Ok(Self::Median),
            other => Err(Error::Config(format!("unknown HRE aggregate `{other}`"))),
        }
    }
}

/// Herbage relative error: per-image `pred_total / gt_total`, aggregated.
pub fn hre(preds: &[Prediction], gts: &[GroundTruth], aggregate: HreAggregate) -> Result<f64> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::Metrics("HRE needs aligned, nonempty predictions".into()));
    }
    let mut ratios = Vec::with_capacity(preds.len());
    for (p, g) in preds.iter().zip(gts) {
        let truth = gt_mass(g, &p.path)?;
        if !(truth > 0.0) {
            return Err(Error::Metrics(format!("`{}`: HRE needs a positive ground-truth mass", p.path)));
        }
        let pred = p
            .total_mass
            .ok_or_else(|| Error::Metrics(format!("`{}` has no predicted mass", p.path)))?;
        ratios.push(pred / truth);
    }
    Ok(match aggregate {
        HreAggregate::Mean => ratios.iter().sum::<f64>() / ratios.len() as f64,
        HreAggregate::Median => {
            ratios.sort_by(f64::total_cmp);
            let n = ratios.len();
            if n % 2 == 1 {
                ratios[n / 2]
            } else {
                (ratios[n / 2 - 1] + ratios[n / 2]) / 2.0
            }
        }
    })
}

/// Height RMSE in cm.
pub fn height_error(preds: &[Prediction], gts: &[GroundTruth]) -> Result<f64> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::Metrics("height error needs aligned, nonempty predictions".into()));
    }
    let pairs = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| match (p.height, g.height) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::Metrics(format!("`{}` is missing a height", p.path))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rmse(pairs.into_iter()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportColumn {
    pub label: String,
    pub value: f64,
}

/// One evaluation, as an ordered list of labeled columns. grassclover4
/// reports the composition table (Grass, Any clover, White clover, Red
/// clover, Weeds, Avg.); irish3 reports HRMSE Total/species/Avg., HRE,
/// composition RMSE per species and Avg., and HE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: Schema,
    pub split: Split,
    pub source_filter: Option<CaptureSource>,
    pub n_images: usize,
    pub hre_aggregate: HreAggregate,
    pub columns: Vec<ReportColumn>,
}

impl MetricsReport {
    pub fn build(
        schema: Schema,
        split: Split,
        source_filter: Option<CaptureSource>,
        preds: &[Prediction],
        gts: &[GroundTruth],
        hre_aggregate: HreAggregate,
    ) -> Result<Self> {
        let composition = composition_rmse(preds, gts, schema)?;
        let mut columns = Vec::new();
        let mut push = |label: String, value: f64| columns.push(ReportColumn { label, value });
        let with_scalars = schema.has_scalars() && preds.iter().all(|p| p.total_mass.is_some());
        match schema {
            Schema::Grassclover4 => {
                for (name, v) in &composition.columns {
                    push(name.clone(), *v);
                }
                push("Avg.".into(), composition.avg);
            }
            Schema::Irish3 => {
                if with_scalars {
                    let h = hrmse(preds, gts, schema)?;
                    push("HRMSE Total".into(), h.total);
                    for (name, v) in &h.species.columns {
                        push(format!("HRMSE {name}"), *v);
                    }
                    push("HRMSE Avg.".into(), h.species.avg);
                    push("HRE".into(), hre(preds, gts, hre_aggregate)?);
                }
                for (name, v) in &composition.columns {
                    push(format!("RMSE {name}"), *v);
                }
                push("RMSE Avg.".into(), composition.avg);
                if with_scalars {
                    push("HE".into(), height_error(preds, gts)?);
                }
            }
        }
        Ok(Self {
            schema,
            split,
            source_filter,
            n_images: preds.len(),
            hre_aggregate,
            columns,
        })
    }

    pub fn get(&self, label: &str) -> Option<f64> {
        self.columns.iter().find(|c| c.label == label).map(|c| c.value)
    }

    pub fn labels(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.label.as_str()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    /// Aligned markdown table; values at four decimals.
    pub fn to_markdown(&self) -> String {
        let cells: Vec<String> = self.columns.iter().map(|c| format!("{:.4}", c.value)).collect();
        let widths: Vec<usize> = self
            .columns
            .iter()
            .zip(&cells)
            .map(|(c, v)| c.label.len().max(v.len()))
            .collect();
        let row = |items: Vec<String>| format!("| {} |\n", items.join(" | "));
        let mut out = String::new();
        let source = self.source_filter.map_or("all".to_string(), |s| s.to_string());
        let _ = writeln!(
            out,
            "**{}** · split `{}` · source `{}` · {} images\n",
            self.schema, self.split, source, self.n_images
        );
        out += &row(self
            .columns
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{:<w$}", c.label))
            .collect());
        out += &row(widths.iter().map(|w| format!("{:-<w$}", "")).collect());
        out += &row(cells.iter().zip(&widths).map(|(v, w)| format!("{v:>w$}")).collect());
        out
    }
}

/// Predictions for every image of a batch, in input order.
pub fn predict_batch(ckpt: &Checkpoint, paths: &[String], images: &Tensor) -> Result<Vec<Prediction>> {
    let emb = ckpt.encode(images)?;
    let comp = ckpt.predict_composition(&emb)?;
    let k = ckpt.config.n_species;
    let scalars = if ckpt.config.predict_scalars {
        Some(ckpt.denormalize(&ckpt.predict_scalars(&emb)?)?)
    } else {
        None
    };
    Ok(paths
        .iter()
        .enumerate()
        .map(|(i, path)| Prediction {
            path: path.clone(),
            fractions: comp.data()[i * k..(i + 1) * k].iter().map(|&p| p as f64 / 100.0).collect(),
            total_mass: scalars.as_ref().map(|s| s[i].0),
            height: scalars.as_ref().map(|s| s[i].1),
        })
        .collect())
}

/// Inference over a manifest split (optionally one capture source) and the
/// resulting report.
pub fn evaluate(
    ckpt: &Checkpoint,
    manifest: &Manifest,
    split: Split,
    source: Option<CaptureSource>,
    hre_aggregate: HreAggregate,
) -> Result<(MetricsReport, Vec<Prediction>)> {
    if ckpt.config.n_species != manifest.schema.n_species() {
        return Err(Error::Config(format!(
            "checkpoint predicts {} species, the {} manifest has {}",
            ckpt.config.n_species,
            manifest.schema,
            manifest.schema.n_species()
        )));
    }
    let records = manifest.select(split, source);
    if records.is_empty() {
        let filter = source.map_or(String::new(), |s| format!(" with source `{s}`"));
        return Err(Error::EmptySelection(format!("no `{split}` records{filter}")));
    }
    let mut preds = Vec::with_capacity(records.len());
    for chunk in records.chunks(INFERENCE_CHUNK) {
        let images = chunk
            .iter()
            .map(|r| load_image(manifest.resolve(&r.path), ckpt.config.input_size))
            .collect::<Result<Vec<_>>>()?;
        let paths: Vec<String> = chunk.iter().map(|r| r.path.clone()).collect();
        preds.extend(predict_batch(ckpt, &paths, &Tensor::stack(&images)?)?);
    }
    let gts: Vec<GroundTruth> = records.iter().map(|&r| r.into()).collect();
    let report = MetricsReport::build(manifest.schema, split, source, &preds, &gts, hre_aggregate)?;
    Ok((report, preds))
}

/// Per-image CSV: `path`, one percentage column per species, `total_mass`,
/// `height` (empty when the model has no scalar head). Values are written at
/// full precision.
pub fn write_predictions_csv(path: impl AsRef<Path>, schema: Schema, preds: &[Prediction]) -> Result<()> {
    let path = path.as_ref();
    let to_err = |e: csv::Error| Error::Metrics(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    let mut header = vec!["path"];
    header.extend_from_slice(schema.species());
    header.extend_from_slice(&["total_mass", "height"]);
    w.write_record(&header).map_err(to_err)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for p in preds {
        let mut row = vec![p.path.clone()];
        row.extend(p.percentages().iter().map(f64::to_string));
        row.push(opt(p.total_mass));
        row.push(opt(p.height));
        w.write_record(&row).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
