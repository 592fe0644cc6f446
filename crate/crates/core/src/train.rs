//! Unsupervised i-Mix pretraining and supervised RMSE fine-tuning.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentPolicy;
use crate::data::{compute_norm_stats, decode_image, load_image, Manifest, NormStats, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::imix::{pretrain_step, ContrastiveConfig, Gradients};
use crate::model::{transfer_weights, Bound, Checkpoint, ModelConfig, ParamGroup, Provenance};
use crate::tensor::{Graph, OptimizerState, SeededRng, SgdConfig, Tensor, Var};

// Stream tags for `SeededRng::derive`.
const SHUFFLE_STREAM: u64 = 0x5348_5546;
const AUGMENT_STREAM: u64 = 0x4155_474d;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub composition: f32,
    pub mass: f32,
    pub height: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            composition: 1.0,
            mass: 1.0,
            height: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
    /// Used by pretraining only.
    pub contrastive: ContrastiveConfig,
    /// Used by fine-tuning only.
    pub loss_weights: LossWeights,
    /// Validation cadence in epochs; the last epoch is always evaluated.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::finetune_defaults()
    }
}

impl TrainConfig {
    pub fn pretrain_defaults() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            contrastive: ContrastiveConfig::default(),
            loss_weights: LossWeights::default(),
            eval_every: 1,
        }
    }

    pub fn finetune_defaults() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
            ..Self::pretrain_defaults()
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    fn validate(&self, min_batch: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < min_batch {
            return Err(Error::Config(format!("batch_size must be at least {min_batch}")));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        OptimizerState::new(self.sgd())?;
        Ok(())
    }
}

/// One completed epoch. Wall time is reported but never serialized, so logs
/// of identical runs are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub phase: String,
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_loss: Option<f64>,
    /// Pooled composition RMSE over the validation split, percentage points.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_composition_rmse: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("log entries serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(Self { entries })
    }
}

/// Hex SHA-256 prefix of the JSON serialization of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("configs serialize");
    Sha256::digest(&json)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn optimizer_step(
    ckpt: &mut Checkpoint,
    opt: &mut OptimizerState,
    grads: &Gradients,
    trainable: impl Fn(ParamGroup) -> bool,
) -> Result<()> {
    let groups: Vec<bool> = ckpt
        .params()
        .map(|(n, _)| ckpt.group_of(n).is_some_and(&trainable))
        .collect();
    let params = ckpt
        .params_mut()
        .zip(groups)
        .filter_map(|(p, keep)| keep.then_some(p));
    opt.step(params, grads)?;
    if ckpt.params().all(|(_, t)| t.all_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op: "sgd_step" })
    }
}

fn batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = SeededRng::derive(seed, &[SHUFFLE_STREAM, epoch as u64]);
    let order = rng.permutation(n);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

// ── pretraining ─────────────────────────────────────────────────────────

pub fn load_unlabeled_images(paths: &[PathBuf]) -> Result<Vec<Tensor>> {
    paths.iter().map(decode_image).collect()
}

/// i-Mix pretraining of trunk and projection head on raw (native-resolution)
/// images. Batches smaller than two images are skipped.
pub fn pretrain(
    config: &TrainConfig,
    model_config: &ModelConfig,
    policy: &AugmentPolicy,
    images: &[Tensor],
    mut on_epoch: impl FnMut(&LogEntry),
) -> Result<(Checkpoint, TrainLog)> {
    config.validate(2)?;
    config.contrastive.validate()?;
    policy.validate()?;
    if images.is_empty() {
        return Err(Error::EmptySelection("no unlabeled images to pretrain on".into()));
    }
    if images.len() < 2 {
        return Err(Error::Config("pretraining needs at least two unlabeled images".into()));
    }
    if policy.output_size != model_config.input_size {
        return Err(Error::Config(format!(
            "augmentation output_size {} differs from model input_size {}",
            policy.output_size, model_config.input_size
        )));
    }
    let hash = config_hash(&(model_config, config, policy));
    let mut ckpt = Checkpoint::build(model_config, config.seed)?;
    let mut opt = OptimizerState::new(config.sgd())?;
    let trainable = |g: ParamGroup| matches!(g, ParamGroup::Trunk | ParamGroup::Projection);
    let mut log = TrainLog::default();

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut total = 0.0f64;
        let mut steps = 0usize;
        for (b, idx) in batches(images.len(), config.batch_size, config.seed, epoch).iter().enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let raw: Vec<Tensor> = idx.iter().map(|&i| images[i].clone()).collect();
            let mut rng = SeededRng::derive(config.seed, &[AUGMENT_STREAM, epoch as u64, b as u64]);
            let (loss, grads) = pretrain_step(&ckpt, &raw, policy, &config.contrastive, &mut rng)?;
            optimizer_step(&mut ckpt, &mut opt, &grads, trainable)?;
            total += loss as f64;
            steps += 1;
        }
        let entry = LogEntry {
            phase: "pretrain".into(),
            epoch,
            train_loss: total / steps.max(1) as f64,
            val_loss: None,
            val_composition_rmse: None,
            seed: config.seed,
            config_hash: hash.clone(),
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.entries.push(entry);
    }
    ckpt.provenance = Provenance::ImixPretrained;
    Ok((ckpt, log))
}

// ── fine-tuning ─────────────────────────────────────────────────────────

/// `sqrt(mean((pred − target)²))`; the gradient at exact agreement is zero.
pub fn rmse_objective(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::shape(
            "rmse_objective",
            format!("pred {:?}, target {:?}", g.shape(pred), g.shape(target)),
        ));
    }
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    let m = g.mean(sq)?;
    g.sqrt(m)
}

/// Images and training-space targets for one split.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub paths: Vec<String>,
    /// N×C×H×W.
    pub images: Tensor,
    /// N×n_species fractions.
    pub fractions: Tensor,
    /// N×2 min-max normalized (mass, height), when the scalar head is on.
    pub scalars: Option<Tensor>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn load(
        manifest: &Manifest,
        records: &[&SampleRecord],
        model_config: &ModelConfig,
        stats: Option<&NormStats>,
    ) -> Result<Self> {
        let k = model_config.n_species;
        let mut images = Vec::with_capacity(records.len());
        let mut fractions = Vec::with_capacity(records.len() * k);
        let mut scalars = Vec::new();
        for r in records {
            images.push(load_image(manifest.resolve(&r.path), model_config.input_size)?);
            fractions.extend(r.fractions.iter().map(|&f| f as f32));
            if let Some(stats) = stats {
                let missing = |target| Error::MissingTarget {
                    path: r.path.clone(),
                    target,
                };
                let mass = r.mass.ok_or_else(|| missing("mass"))?;
                let height = r.height.ok_or_else(|| missing("height"))?;
                scalars.push(stats.normalize_mass(mass) as f32);
                scalars.push(stats.normalize_height(height) as f32);
            }
        }
        let n = records.len();
        let images = if n == 0 {
            let s = model_config.input_size;
            Tensor::zeros(&[0, model_config.input_channels, s, s])
        } else {
            Tensor::stack(&images)?
        };
        Ok(Self {
            paths: records.iter().map(|r| r.path.clone()).collect(),
            images,
            fractions: Tensor::new(vec![n, k], fractions)?,
            scalars: stats.map(|_| Tensor::new(vec![n, 2], scalars)).transpose()?,
        })
    }

    fn subset(&self, idx: &[usize]) -> Result<Self> {
        let pick = |t: &Tensor| -> Result<Tensor> {
            Tensor::stack(&idx.iter().map(|&i| t.select(i)).collect::<Result<Vec<_>>>()?)
        };
        Ok(Self {
            paths: idx.iter().map(|&i| self.paths[i].clone()).collect(),
            images: pick(&self.images)?,
            fractions: pick(&self.fractions)?,
            scalars: self.scalars.as_ref().map(pick).transpose()?,
        })
    }
}

struct SupervisedLoss {
    total: Var,
    composition: Var,
}

fn supervised_loss(g: &mut Graph, net: &Bound, set: &LabeledSet, weights: &LossWeights) -> Result<SupervisedLoss> {
    let x = g.constant(set.images.clone());
    let e = net.encode(g, x)?;
    let pred = net.composition_fractions(g, e)?;
    let target = g.constant(set.fractions.clone());
    let composition = rmse_objective(g, pred, target)?;
    let mut total = g.scale(composition, weights.composition)?;
    if let Some(scalars) = &set.scalars {
        let pred = net.scalars(g, e)?;
        let target = g.constant(scalars.clone());
        for (col, w) in [(0, weights.mass), (1, weights.height)] {
            if w == 0.0 {
                continue;
            }
            let p = g.column(pred, col)?;
            let t = g.column(target, col)?;
            let term = rmse_objective(g, p, t)?;
            let term = g.scale(term, w)?;
            total = g.add(total, term)?;
        }
    }
    Ok(SupervisedLoss { total, composition })
}

/// `(weighted loss, composition RMSE in percentage points)` with no
/// gradient tracking.
pub fn evaluate_loss(ckpt: &Checkpoint, set: &LabeledSet, weights: &LossWeights) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(Error::EmptySelection("no records to evaluate".into()));
    }
    let mut g = Graph::new();
    let net = Bound::new(&mut g, ckpt, |_| false);
    let loss = supervised_loss(&mut g, &net, set, weights)?;
    Ok((
        g.value(loss.total).item()? as f64,
        100.0 * g.value(loss.composition).item()? as f64,
    ))
}

/// The loss the fine-tuning loop records for `split`, recomputed from a
/// saved checkpoint.
pub fn split_loss(ckpt: &Checkpoint, manifest: &Manifest, split: Split, weights: &LossWeights) -> Result<(f64, f64)> {
    let records: Vec<&SampleRecord> = manifest.split(split).collect();
    let set = LabeledSet::load(manifest, &records, &ckpt.config, ckpt.norm_stats.as_ref())?;
    evaluate_loss(ckpt, &set, weights)
}

fn check_finetune_inputs(config: &TrainConfig, model_config: &ModelConfig, manifest: &Manifest) -> Result<()> {
    config.validate(1)?;
    model_config.validate()?;
    let w = &config.loss_weights;
    if [w.composition, w.mass, w.height].iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Config("loss weights must be finite and non-negative".into()));
    }
    let scalar_weight = if model_config.predict_scalars { w.mass + w.height } else { 0.0 };
    if w.composition + scalar_weight == 0.0 {
        return Err(Error::Config("all active loss weights are zero".into()));
    }
    if model_config.n_species != manifest.schema.n_species() {
        return Err(Error::Config(format!(
            "model predicts {} species but the {} manifest has {}",
            model_config.n_species,
            manifest.schema,
            manifest.schema.n_species()
        )));
    }
    if model_config.predict_scalars && !manifest.schema.has_scalars() {
        return Err(Error::Config(format!(
            "scalar head enabled but the {} schema has no mass/height targets",
            manifest.schema
        )));
    }
    Ok(())
}

/// Supervised fine-tuning with a weighted sum of per-task RMSEs. Starts from
/// `init` (trunk transferred, heads fresh) or from a random trunk, and keeps
/// the checkpoint with the lowest validation loss (the last one when the
/// validation split is empty).
pub fn finetune(
    config: &TrainConfig,
    model_config: &ModelConfig,
    manifest: &Manifest,
    init: Option<&Checkpoint>,
    mut on_epoch: impl FnMut(&LogEntry),
) -> Result<(Checkpoint, TrainLog)> {
    check_finetune_inputs(config, model_config, manifest)?;
    let train_records: Vec<&SampleRecord> = manifest.split(Split::Train).collect();
    if train_records.is_empty() {
        return Err(Error::EmptySelection("labeled train split is empty".into()));
    }
    let stats = model_config
        .predict_scalars
        .then(|| compute_norm_stats(manifest))
        .transpose()?;
    let train = LabeledSet::load(manifest, &train_records, model_config, stats.as_ref())?;
    let val_records: Vec<&SampleRecord> = manifest.split(Split::Val).collect();
    let val = LabeledSet::load(manifest, &val_records, model_config, stats.as_ref())?;

    let mut ckpt = match init {
        Some(pretrained) => transfer_weights(pretrained, model_config, config.seed)?,
        None => Checkpoint::build(model_config, config.seed)?.without_projection(),
    };
    ckpt.norm_stats = stats;
    let hash = config_hash(&(model_config, config));
    let weights = config.loss_weights;
    // Heads with zero loss weight are left out of the optimizer entirely.
    let trainable = move |g: ParamGroup| match g {
        ParamGroup::Trunk => true,
        ParamGroup::Composition => weights.composition > 0.0,
        ParamGroup::Scalars => weights.mass > 0.0 || weights.height > 0.0,
        ParamGroup::Projection => false,
    };
    let mut opt = OptimizerState::new(config.sgd())?;
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Checkpoint)> = None;

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut total = 0.0f64;
        let order = batches(train.len(), config.batch_size, config.seed, epoch);
        for idx in &order {
            let batch = train.subset(idx)?;
            let mut g = Graph::new();
            let net = Bound::new(&mut g, &ckpt, trainable);
            let loss = supervised_loss(&mut g, &net, &batch, &weights)?;
            total += g.value(loss.total).item()? as f64;
            g.backward(loss.total)?;
            let grads: Gradients = net
                .vars()
                .filter_map(|(n, v)| g.grad(v).map(|gr| (n.to_string(), gr.to_vec())))
                .collect();
            optimizer_step(&mut ckpt, &mut opt, &grads, trainable)?;
        }
        let evaluate = !val.is_empty() && (epoch % config.eval_every == 0 || epoch == config.epochs);
        let (val_loss, val_rmse) = if evaluate {
            let (l, r) = evaluate_loss(&ckpt, &val, &weights)?;
            (Some(l), Some(r))
        } else {
            (None, None)
        };
        match val_loss {
            Some(l) if best.as_ref().is_none_or(|(b, _)| l < *b) => best = Some((l, ckpt.clone())),
            _ => {}
        }
        let entry = LogEntry {
            phase: "finetune".into(),
            epoch,
            train_loss: total / order.len() as f64,
            val_loss,
            val_composition_rmse: val_rmse,
            seed: config.seed,
            config_hash: hash.clone(),
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.entries.push(entry);
    }
    let mut out = best.map_or(ckpt, |(_, c)| c);
    out.provenance = Provenance::Finetuned;
    Ok((out, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SplitPlan, SynthConfig};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            input_size: 16,
            conv_channels: vec![4, 8],
            embedding_dim: 8,
            projection_dim: 4,
            ..ModelConfig::default()
        }
    }

    fn tiny_data(dir: &Path) -> Manifest {
        synth_dataset(
            dir,
            &SynthConfig {
                n_labeled: 12,
                n_unlabeled: 6,
                size: 16,
                seed: 3,
                split: SplitPlan {
                    train: 8,
                    val: 4,
                    test: 0,
                },
            },
        )
        .unwrap()
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            seed: 11,
            ..TrainConfig::finetune_defaults()
        }
    }

    fn eval_rmse(pred: &[f32], target: &[f32], shape: &[usize]) -> f32 {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(shape.to_vec(), pred.to_vec()).unwrap());
        let t = g.constant(Tensor::new(shape.to_vec(), target.to_vec()).unwrap());
        let r = rmse_objective(&mut g, p, t).unwrap();
        g.value(r).item().unwrap()
    }

    #[test]
    fn rmse_zero_constant_and_loop_oracle() {
        let a = [0.3, -1.2, 4.0, 2.5, 0.0, 1.0];
        assert_eq!(eval_rmse(&a, &a, &[2, 3]), 0.0);
        let shifted: Vec<f32> = a.iter().map(|v| v - 0.75).collect();
        assert!((eval_rmse(&a, &shifted, &[2, 3]) - 0.75).abs() < 1e-6);

        let mut rng = SeededRng::new(5);
        let p: Vec<f32> = (0..20).map(|_| rng.normal()).collect();
        let t: Vec<f32> = (0..20).map(|_| rng.normal()).collect();
        let oracle = (p.iter().zip(&t).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / 20.0).sqrt();
        assert!((eval_rmse(&p, &t, &[4, 5]) as f64 - oracle).abs() < 1e-5);
        assert_eq!(eval_rmse(&p, &t, &[4, 5]), eval_rmse(&t, &p, &[4, 5]));
    }

    #[test]
    fn rmse_gradient_is_zero_at_agreement() {
        let mut g = Graph::new();
        let p = g.param(Tensor::full(&[2, 2], 0.5));
        let t = g.constant(Tensor::full(&[2, 2], 0.5));
        let r = rmse_objective(&mut g, p, t).unwrap();
        g.backward(r).unwrap();
        assert!(g.grad(p).unwrap().iter().all(|&v| v == 0.0));
        let q = g.constant(Tensor::zeros(&[4]));
        assert!(rmse_objective(&mut g, p, q).is_err());
    }

    #[test]
    fn one_epoch_pretrain_logs_once_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_data(dir.path());
        let images = load_unlabeled_images(&m.unlabeled_paths.iter().map(|p| m.resolve(p)).collect::<Vec<_>>()).unwrap();
        let config = TrainConfig {
            epochs: 1,
            batch_size: 4,
            seed: 2,
            ..TrainConfig::pretrain_defaults()
        };
        let policy = AugmentPolicy {
            output_size: 16,
            ..AugmentPolicy::default()
        };
        let (a, log) = pretrain(&config, &tiny_model(), &policy, &images, |_| {}).unwrap();
        assert_eq!(log.entries.len(), 1);
        assert_eq!(a.provenance, Provenance::ImixPretrained);
        assert!(a.has_projection());
        let (b, log_b) = pretrain(&config, &tiny_model(), &policy, &images, |_| {}).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert_eq!(log.to_jsonl(), log_b.to_jsonl());
    }

    #[test]
    fn pretrain_rejects_mismatched_sizes_and_empty_sets() {
        let config = TrainConfig::pretrain_defaults();
        let policy = AugmentPolicy::default();
        assert!(matches!(
            pretrain(&config, &tiny_model(), &policy, &[], |_| {}),
            Err(Error::EmptySelection(_))
        ));
        let images = vec![Tensor::zeros(&[3, 16, 16]); 2];
        assert!(matches!(
            pretrain(&config, &tiny_model(), &policy, &images, |_| {}),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn finetune_embeds_stats_and_selects_best_val() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_data(dir.path());
        let (ckpt, log) = finetune(&quick(3), &tiny_model(), &m, None, |_| {}).unwrap();
        assert_eq!(log.entries.len(), 3);
        assert_eq!(ckpt.provenance, Provenance::Finetuned);
        assert!(!ckpt.has_projection());
        assert_eq!(ckpt.norm_stats, Some(compute_norm_stats(&m).unwrap()));
        let best = log
            .entries
            .iter()
            .filter_map(|e| e.val_loss)
            .fold(f64::INFINITY, f64::min);
        let (recomputed, _) = split_loss(&ckpt, &m, Split::Val, &quick(3).loss_weights).unwrap();
        assert_eq!(recomputed, best);
    }

    #[test]
    fn zero_scalar_weights_leave_scalar_head_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_data(dir.path());
        let mut config = quick(2);
        config.loss_weights = LossWeights {
            composition: 1.0,
            mass: 0.0,
            height: 0.0,
        };
        let fresh = Checkpoint::build(&tiny_model(), config.seed).unwrap();
        let (ckpt, _) = finetune(&config, &tiny_model(), &m, None, |_| {}).unwrap();
        for name in ["scalars.weight", "scalars.bias"] {
            assert_eq!(ckpt.param(name), fresh.param(name));
        }
        assert_ne!(ckpt.param("conv0.weight"), fresh.param("conv0.weight"));
    }

    #[test]
    fn init_changes_the_result() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_data(dir.path());
        let pretrained = Checkpoint::build(&tiny_model(), 99).unwrap();
        let (a, _) = finetune(&quick(1), &tiny_model(), &m, None, |_| {}).unwrap();
        let (b, _) = finetune(&quick(1), &tiny_model(), &m, Some(&pretrained), |_| {}).unwrap();
        assert_ne!(a.param("conv0.weight"), b.param("conv0.weight"));
    }

    #[test]
    fn finetune_rejects_bad_configs() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_data(dir.path());
        let mut zero = quick(1);
        zero.loss_weights = LossWeights {
            composition: 0.0,
            mass: 0.0,
            height: 0.0,
        };
        assert!(matches!(finetune(&zero, &tiny_model(), &m, None, |_| {}), Err(Error::Config(_))));
        let four = ModelConfig {
            n_species: 4,
            ..tiny_model()
        };
        assert!(matches!(finetune(&quick(1), &four, &m, None, |_| {}), Err(Error::Config(_))));
        let wide = ModelConfig {
            conv_channels: vec![4, 16],
            ..tiny_model()
        };
        let other = Checkpoint::build(&wide, 0).unwrap();
        assert!(matches!(
            finetune(&quick(1), &tiny_model(), &m, Some(&other), |_| {}),
            Err(Error::Incompatible { .. })
        ));
    }

    #[test]
    fn small_lr_training_loss_is_near_monotone() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_data(dir.path());
        let config = TrainConfig {
            epochs: 6,
            batch_size: 8,
            lr: 1e-3,
            momentum: 0.0,
            ..quick(6)
        };
        let (_, log) = finetune(&config, &tiny_model(), &m, None, |_| {}).unwrap();
        for w in log.entries.windows(2) {
            assert!(w[1].train_loss <= w[0].train_loss * 1.05, "{:?}", log.to_jsonl());
        }
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = TrainConfig::finetune_defaults();
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.lr *= 2.0;
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 16);
    }

    #[test]
    fn log_round_trips_without_wall_time() {
        let entry = LogEntry {
            phase: "finetune".into(),
            epoch: 1,
            train_loss: 0.25,
            val_loss: Some(0.5),
            val_composition_rmse: Some(12.0),
            seed: 1,
            config_hash: "00".into(),
            wall_time_s: 3.5,
        };
        let log = TrainLog { entries: vec![entry] };
        let text = log.to_jsonl();
        assert!(!text.contains("wall_time"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        log.write_jsonl(&path).unwrap();
        let back = TrainLog::read_jsonl(&path).unwrap();
        assert_eq!(back.entries[0].val_loss, Some(0.5));
        assert_eq!(back.entries[0].wall_time_s, 0.0);
    }
}
