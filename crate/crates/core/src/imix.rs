//! i-Mix contrastive objective on in-batch N-pair logits.
//!
//! Anchors are one augmented view per image, mixed with a permuted partner;
//! positives are the second, unmixed view. Row i of the B×B logit matrix
//! scores anchor i against every positive, and the target distribution puts
//! λᵢ on positive i and 1−λᵢ on positive π(i).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::augment::{mixup, two_views, AugmentPolicy, MixResult};
use crate::error::{Error, Result};
use crate::model::{Bound, Checkpoint, ParamGroup};
use crate::tensor::{Graph, SeededRng, Tensor, Var};

pub type Gradients = BTreeMap<String, Vec<f32>>;

const UNIT_NORM_TOLERANCE: f32 = 1e-3;
const LABEL_SUM_TOLERANCE: f32 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub temperature: f32,
    /// Beta(α, α) concentration for the mixing coefficients.
    pub alpha: f32,
    /// Also mix the positive stream and score it against the anchors,
    /// averaging both directions.
    pub symmetric: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            alpha: 1.0,
            symmetric: false,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// `logits[i][j] = ⟨anchors[i], positives[j]⟩ / τ` for unit-norm rows.
pub fn npair_logits(g: &mut Graph, anchors: Var, positives: Var, temperature: f32) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("npair_logits", "temperature must be positive"));
    }
    if g.shape(anchors) != g.shape(positives) || g.shape(anchors).len() != 2 {
        return Err(Error::shape(
            "npair_logits",
            format!("anchors {:?}, positives {:?}", g.shape(anchors), g.shape(positives)),
        ));
    }
    let d = g.shape(anchors)[1];
    for var in [anchors, positives] {
        for (i, row) in g.value(var).data().chunks(d.max(1)).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::invalid(
                    "npair_logits",
                    format!("row {i} has norm {norm}, expected unit rows"),
                ));
            }
        }
    }
    let pt = g.transpose(positives)?;
    let sims = g.matmul(anchors, pt)?;
    g.scale(sims, 1.0 / temperature)
}

/// `−(1/B) Σᵢ Σⱼ vᵢⱼ log softmax(logitsᵢ)ⱼ`.
pub fn imix_loss(g: &mut Graph, logits: Var, virtual_labels: &Tensor) -> Result<Var> {
    let b = match g.shape(logits) {
        [r, c] if r == c && *r > 0 => *r,
        s => return Err(Error::shape("imix_loss", format!("logits must be B×B, got {s:?}"))),
    };
    if virtual_labels.shape() != [b, b] {
        return Err(Error::shape(
            "imix_loss",
            format!("virtual labels {:?} for {b}×{b} logits", virtual_labels.shape()),
        ));
    }
    for (i, row) in virtual_labels.data().chunks(b).enumerate() {
        let sum: f32 = row.iter().sum();
        if (sum - 1.0).abs() > LABEL_SUM_TOLERANCE || row.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid(
                "imix_loss",
                format!("virtual label row {i} sums to {sum}, expected a distribution"),
            ));
        }
    }
    let log_probs = g.log_softmax(logits)?;
    let targets = g.constant(virtual_labels.clone());
    let weighted = g.mul(targets, log_probs)?;
    let total = g.sum(weighted)?;
    g.scale(total, -1.0 / b as f32)
}

fn collect_grads(g: &Graph, net: &Bound) -> Gradients {
    net.vars()
        .filter_map(|(name, var)| g.grad(var).map(|grad| (name.to_string(), grad.to_vec())))
        .collect()
}

fn projected(g: &mut Graph, net: &Bound, batch: &Tensor) -> Result<Var> {
    let x = g.constant(batch.clone());
    let e = net.encode(g, x)?;
    net.project(g, e)
}

/// Loss and gradients (trunk and projection head) for already-augmented
/// views: `mix` supplies the mixed anchors and their virtual labels.
pub fn contrastive_step(
    ckpt: &Checkpoint,
    mix: &MixResult,
    positives: &Tensor,
    temperature: f32,
) -> Result<(f32, Gradients)> {
    let mut g = Graph::new();
    let net = Bound::new(&mut g, ckpt, |grp| matches!(grp, ParamGroup::Trunk | ParamGroup::Projection));
    let za = projected(&mut g, &net, &mix.mixed_batch)?;
    let zp = projected(&mut g, &net, positives)?;
    let logits = npair_logits(&mut g, za, zp, temperature)?;
    let loss = imix_loss(&mut g, logits, &mix.virtual_labels_tensor())?;
    let value = g.value(loss).item()?;
    g.backward(loss)?;
    Ok((value, collect_grads(&g, &net)))
}

fn symmetric_step(
    ckpt: &Checkpoint,
    forward: &MixResult,
    backward: &MixResult,
    anchors: &Tensor,
    positives: &Tensor,
    temperature: f32,
) -> Result<(f32, Gradients)> {
    let mut g = Graph::new();
    let net = Bound::new(&mut g, ckpt, |grp| matches!(grp, ParamGroup::Trunk | ParamGroup::Projection));
    let mut directional = |mix: &MixResult, plain: &Tensor| -> Result<Var> {
        let zm = projected(&mut g, &net, &mix.mixed_batch)?;
        let zp = projected(&mut g, &net, plain)?;
        let logits = npair_logits(&mut g, zm, zp, temperature)?;
        imix_loss(&mut g, logits, &mix.virtual_labels_tensor())
    };
    let l1 = directional(forward, positives)?;
    let l2 = directional(backward, anchors)?;
    let sum = g.add(l1, l2)?;
    let loss = g.scale(sum, 0.5)?;
    let value = g.value(loss).item()?;
    g.backward(loss)?;
    Ok((value, collect_grads(&g, &net)))
}

/// One pretraining step on raw C×H×W images: two views each, mixup on the
/// anchor views, N-pair logits, i-Mix loss and backward.
pub fn pretrain_step(
    ckpt: &Checkpoint,
    raw_batch: &[Tensor],
    policy: &AugmentPolicy,
    config: &ContrastiveConfig,
    rng: &mut SeededRng,
) -> Result<(f32, Gradients)> {
    if raw_batch.len() < 2 {
        return Err(Error::invalid("pretrain_step", format!("batch size {} < 2", raw_batch.len())));
    }
    config.validate()?;
    let mut anchors = Vec::with_capacity(raw_batch.len());
    let mut positives = Vec::with_capacity(raw_batch.len());
    for image in raw_batch {
        let (a, p) = two_views(image, policy, rng)?;
        anchors.push(a);
        positives.push(p);
    }
    let anchors = Tensor::stack(&anchors)?;
    let positives = Tensor::stack(&positives)?;
    let mix = mixup(&anchors, config.alpha, rng)?;
    if config.symmetric {
        let reverse = mixup(&positives, config.alpha, rng)?;
        symmetric_step(ckpt, &mix, &reverse, &anchors, &positives, config.temperature)
    } else {
        contrastive_step(ckpt, &mix, &positives, config.temperature)
    }
}
