//! Convolutional encoder with three heads: a contrastive projection MLP, a
//! softmax composition head, and a sigmoid head for normalized herbage mass
//! and height.
//!
//! Trunk: `conv_channels.len()` blocks of 3×3 conv (stride 1, padding 1) →
//! bias → ReLU → 2×2 max-pool, then global average pooling and one dense
//! layer to `embedding_dim`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::tensor::{Graph, SeededRng, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SWRD";
pub const CHECKPOINT_VERSION: u32 = 1;

const KERNEL: usize = 3;
const PADDING: usize = 1;
const POOL: usize = 2;
pub const NORMALIZE_EPS: f32 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub conv_channels: Vec<usize>,
    pub embedding_dim: usize,
    pub projection_dim: usize,
    pub n_species: usize,
    pub predict_scalars: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            input_channels: 3,
            conv_channels: vec![16, 32, 64],
            embedding_dim: 64,
            projection_dim: 32,
            n_species: 3,
            predict_scalars: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.n_species, 3 | 4) {
            return Err(Error::Config(format!("n_species must be 3 or 4, got {}", self.n_species)));
        }
        if self.conv_channels.is_empty() {
            return Err(Error::Config("conv_channels must not be empty".into()));
        }
        let dims = [
            self.input_size,
            self.input_channels,
            self.embedding_dim,
            self.projection_dim,
        ];
        if dims.iter().chain(&self.conv_channels).any(|&d| d == 0) {
            return Err(Error::Config("all model dimensions must be at least 1".into()));
        }
        let min_input = POOL.pow(self.conv_channels.len() as u32);
        if self.input_size < min_input {
            return Err(Error::Config(format!(
                "input_size {} too small for {} pooling blocks (need ≥ {min_input})",
                self.input_size,
                self.conv_channels.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    RandomInit,
    ImixPretrained,
    Finetuned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Trunk,
    Projection,
    Composition,
    Scalars,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    fan_in: usize,
}

impl ParamSpec {
    fn new(name: String, shape: Vec<usize>, group: ParamGroup, fan_in: usize) -> Self {
        Self {
            name,
            shape,
            group,
            fan_in,
        }
    }

    fn is_bias(&self) -> bool {
        self.shape.len() == 1
    }

    /// He-normal weights, zero biases. The stream is keyed by parameter name
    /// so any subset can be re-drawn identically.
    fn init(&self, seed: u64) -> Tensor {
        let mut t = Tensor::zeros(&self.shape);
        if !self.is_bias() {
            let mut rng = SeededRng::derive(seed, &[name_key(&self.name)]);
            let std = (2.0 / self.fan_in as f32).sqrt();
            t.data_mut().iter_mut().for_each(|v| *v = rng.normal() * std);
        }
        t
    }
}

fn name_key(name: &str) -> u64 {
    // FNV-1a
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Parameters of the full architecture in canonical order.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    use ParamGroup::*;
    let mut specs = Vec::new();
    let mut in_ch = config.input_channels;
    for (i, &out_ch) in config.conv_channels.iter().enumerate() {
        let fan_in = in_ch * KERNEL * KERNEL;
        specs.push(ParamSpec::new(
            format!("conv{i}.weight"),
            vec![out_ch, in_ch, KERNEL, KERNEL],
            Trunk,
            fan_in,
        ));
        specs.push(ParamSpec::new(format!("conv{i}.bias"), vec![out_ch], Trunk, fan_in));
        in_ch = out_ch;
    }
    let e = config.embedding_dim;
    let mut dense = |name: &str, fan_in: usize, out: usize, group: ParamGroup| {
        specs.push(ParamSpec::new(format!("{name}.weight"), vec![fan_in, out], group, fan_in));
        specs.push(ParamSpec::new(format!("{name}.bias"), vec![out], group, fan_in));
    };
    dense("embed", in_ch, e, Trunk);
    dense("proj1", e, e, Projection);
    dense("proj2", e, config.projection_dim, Projection);
    dense("composition", e, config.n_species, Composition);
    if config.predict_scalars {
        dense("scalars", e, 2, Scalars);
    }
    specs
}

/// Architecture hyperparameters, named parameter arrays and normalization
/// statistics. Parameters are kept in [`param_specs`] order; the projection
/// head is dropped once weights are transferred for fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub provenance: Provenance,
    pub seed: u64,
    pub norm_stats: Option<NormStats>,
    params: Vec<(String, Tensor)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    format_version: u32,
    config: ModelConfig,
    provenance: Provenance,
    seed: u64,
    norm_stats: Option<NormStats>,
    parameters: Vec<ParamEntry>,
}

impl Checkpoint {
    /// Random initialization of every head, including the projection MLP.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = param_specs(config)
            .iter()
            .map(|s| (s.name.clone(), s.init(seed)))
            .collect();
        Ok(Self {
            config: config.clone(),
            provenance: Provenance::RandomInit,
            seed,
            norm_stats: None,
            params,
        })
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn has_projection(&self) -> bool {
        self.param("proj1.weight").is_some()
    }

    /// Specs of the parameters actually present.
    pub fn present_specs(&self) -> Vec<ParamSpec> {
        param_specs(&self.config)
            .into_iter()
            .filter(|s| self.param(&s.name).is_some())
            .collect()
    }

    pub fn group_of(&self, name: &str) -> Option<ParamGroup> {
        param_specs(&self.config)
            .into_iter()
            .find(|s| s.name == name)
            .map(|s| s.group)
    }

    pub fn without_projection(mut self) -> Self {
        let specs = param_specs(&self.config);
        self.params.retain(|(n, _)| {
            specs
                .iter()
                .any(|s| &s.name == n && s.group != ParamGroup::Projection)
        });
        self
    }

    fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let specs = param_specs(&self.config);
        let mut seen = BTreeMap::new();
        for (name, tensor) in &self.params {
            let spec = specs
                .iter()
                .find(|s| &s.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            if tensor.shape() != spec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, architecture expects {:?}",
                    tensor.shape(),
                    spec.shape
                )));
            }
            if seen.insert(name.as_str(), ()).is_some() {
                return Err(Error::Checkpoint(format!("parameter `{name}` appears twice")));
            }
        }
        for spec in &specs {
            let present = seen.contains_key(spec.name.as_str());
            let required = spec.group != ParamGroup::Projection;
            if required && !present {
                return Err(Error::Checkpoint(format!("missing parameter `{}`", spec.name)));
            }
        }
        let projection: Vec<bool> = specs
            .iter()
            .filter(|s| s.group == ParamGroup::Projection)
            .map(|s| seen.contains_key(s.name.as_str()))
            .collect();
        if projection.iter().any(|&p| p) && !projection.iter().all(|&p| p) {
            return Err(Error::Checkpoint("projection head is only partially present".into()));
        }
        if self.norm_stats.is_some() && !self.config.predict_scalars {
            return Err(Error::Checkpoint(
                "normalization statistics present but scalar head disabled".into(),
            ));
        }
        if let Some(stats) = &self.norm_stats {
            stats.validate()?;
        }
        Ok(())
    }

    // ── serialization ───────────────────────────────────────────────────

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let meta = Metadata {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            provenance: self.provenance,
            seed: self.seed,
            norm_stats: self.norm_stats,
            parameters: self
                .params
                .iter()
                .map(|(n, t)| ParamEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let payload: usize = self.params.iter().map(|(_, t)| t.numel() * 4).sum();
        let mut out = Vec::with_capacity(16 + json.len() + payload);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing SWRD magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json_end = 16usize
            .checked_add(json_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad("truncated metadata"))?;
        let meta: Metadata = serde_json::from_slice(&bytes[16..json_end])
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        if meta.format_version != version {
            return Err(bad("metadata version disagrees with header"));
        }
        let mut offset = json_end;
        let mut params = Vec::with_capacity(meta.parameters.len());
        for entry in meta.parameters {
            let n: usize = entry.shape.iter().product();
            let end = offset + n * 4;
            if end > bytes.len() {
                return Err(Error::Checkpoint(format!("truncated data for `{}`", entry.name)));
            }
            let data = bytes[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push((entry.name, Tensor::new(entry.shape, data)?));
            offset = end;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after parameter data"));
        }
        let ckpt = Self {
            config: meta.config,
            provenance: meta.provenance,
            seed: meta.seed,
            norm_stats: meta.norm_stats,
            params,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    // ── inference ───────────────────────────────────────────────────────

    /// B×C×H×W → B×embedding_dim.
    pub fn encode(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let net = Bound::new(&mut g, self, |_| false);
        let x = g.constant(batch.clone());
        let e = net.encode(&mut g, x)?;
        Ok(g.value(e).clone())
    }

    /// Unit-norm projection rows.
    pub fn project(&self, embeddings: &Tensor) -> Result<Tensor> {
        self.head(embeddings, |net, g, e| net.project(g, e))
    }

    /// Composition percentages; each row sums to 100.
    pub fn predict_composition(&self, embeddings: &Tensor) -> Result<Tensor> {
        self.head(embeddings, |net, g, e| net.composition_percent(g, e))
    }

    /// Normalized (mass, height) in (0, 1).
    pub fn predict_scalars(&self, embeddings: &Tensor) -> Result<Tensor> {
        self.head(embeddings, |net, g, e| net.scalars(g, e))
    }

    /// Maps B×2 normalized scalars to (kg DM ha⁻¹, cm) pairs.
    pub fn denormalize(&self, scalars: &Tensor) -> Result<Vec<(f64, f64)>> {
        let stats = self.norm_stats.as_ref().ok_or(Error::MissingStats)?;
        if scalars.shape().len() != 2 || scalars.shape()[1] != 2 {
            return Err(Error::shape("denormalize", format!("expected B×2, got {:?}", scalars.shape())));
        }
        Ok(scalars
            .data()
            .chunks(2)
            .map(|r| (stats.denormalize_mass(r[0] as f64), stats.denormalize_height(r[1] as f64)))
            .collect())
    }

    fn head(
        &self,
        embeddings: &Tensor,
        f: impl FnOnce(&Bound, &mut Graph, Var) -> Result<Var>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let net = Bound::new(&mut g, self, |_| false);
        let e = g.constant(embeddings.clone());
        let out = f(&net, &mut g, e)?;
        Ok(g.value(out).clone())
    }
}

/// Checkpoint parameters recorded as leaves of one [`Graph`].
pub struct Bound {
    config: ModelConfig,
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Inserts every parameter; those whose group satisfies `trainable`
    /// require gradients.
    pub fn new(graph: &mut Graph, ckpt: &Checkpoint, trainable: impl Fn(ParamGroup) -> bool) -> Self {
        let specs = param_specs(&ckpt.config);
        let vars = ckpt
            .params
            .iter()
            .map(|(name, t)| {
                let group = specs.iter().find(|s| &s.name == name).map(|s| s.group);
                let grad = group.is_some_and(&trainable);
                (name.clone(), graph.leaf(t.clone().with_requires_grad(grad)))
            })
            .collect();
        Self {
            config: ckpt.config.clone(),
            vars,
        }
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }

    fn get(&self, name: &str) -> Result<Var> {
        self.var(name)
            .ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` not in checkpoint")))
    }

    fn dense(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let w = self.get(&format!("{name}.weight"))?;
        let b = self.get(&format!("{name}.bias"))?;
        g.dense(x, w, b)
    }

    fn check_embeddings(&self, g: &Graph, e: Var) -> Result<()> {
        match g.shape(e) {
            [_, d] if *d == self.config.embedding_dim => Ok(()),
            s => Err(Error::shape(
                "head",
                format!("embeddings {s:?}, expected B×{}", self.config.embedding_dim),
            )),
        }
    }

    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let c = &self.config;
        match g.shape(x) {
            [_, ch, h, w] if *ch == c.input_channels && *h == c.input_size && *w == c.input_size => {}
            s => {
                return Err(Error::shape(
                    "encode",
                    format!(
                        "input {s:?}, expected B×{}×{}×{}",
                        c.input_channels, c.input_size, c.input_size
                    ),
                ))
            }
        }
        let mut h = x;
        for i in 0..c.conv_channels.len() {
            h = g.conv2d(h, self.get(&format!("conv{i}.weight"))?, 1, PADDING)?;
            h = g.add_channel_bias(h, self.get(&format!("conv{i}.bias"))?)?;
            h = g.relu(h)?;
            h = g.max_pool2d(h, POOL, POOL)?;
        }
        let pooled = g.global_avg_pool(h)?;
        self.dense(g, pooled, "embed")
    }

    pub fn project(&self, g: &mut Graph, e: Var) -> Result<Var> {
        self.check_embeddings(g, e)?;
        let h = self.dense(g, e, "proj1")?;
        let h = g.relu(h)?;
        let z = self.dense(g, h, "proj2")?;
        g.l2_normalize(z, NORMALIZE_EPS)
    }

    /// Softmax fractions (rows sum to 1); the training-space output.
    pub fn composition_fractions(&self, g: &mut Graph, e: Var) -> Result<Var> {
        self.check_embeddings(g, e)?;
        let logits = self.dense(g, e, "composition")?;
        g.softmax(logits)
    }

    pub fn composition_percent(&self, g: &mut Graph, e: Var) -> Result<Var> {
        let f = self.composition_fractions(g, e)?;
        g.scale(f, 100.0)
    }

    pub fn scalars(&self, g: &mut Graph, e: Var) -> Result<Var> {
        if !self.config.predict_scalars {
            return Err(Error::HeadDisabled);
        }
        self.check_embeddings(g, e)?;
        let z = self.dense(g, e, "scalars")?;
        g.sigmoid(z)
    }
}

/// Copies the trunk of `pretrained` bit-for-bit into a model for
/// `target_config`, drops the projection head and draws fresh composition and
/// scalar heads from `seed`.
pub fn transfer_weights(pretrained: &Checkpoint, target_config: &ModelConfig, seed: u64) -> Result<Checkpoint> {
    target_config.validate()?;
    let trunk = |c: &ModelConfig| -> Vec<ParamSpec> {
        param_specs(c)
            .into_iter()
            .filter(|s| s.group == ParamGroup::Trunk)
            .collect()
    };
    let source = trunk(&pretrained.config);
    let target = trunk(target_config);
    for i in 0..source.len().max(target.len()) {
        match (source.get(i), target.get(i)) {
            (Some(s), Some(t)) if s.name == t.name && s.shape == t.shape => {}
            (Some(s), Some(t)) if s.name == t.name => {
                return Err(Error::Incompatible {
                    param: t.name.clone(),
                    detail: format!("has shape {:?} in the source, target expects {:?}", s.shape, t.shape),
                })
            }
            (Some(s), Some(_)) | (Some(s), None) => {
                return Err(Error::Incompatible {
                    param: s.name.clone(),
                    detail: "is not part of the target trunk".into(),
                })
            }
            (None, Some(t)) => {
                return Err(Error::Incompatible {
                    param: t.name.clone(),
                    detail: "is missing from the source checkpoint".into(),
                })
            }
            (None, None) => unreachable!(),
        }
    }

    let mut params = Vec::new();
    for spec in param_specs(target_config) {
        let tensor = match spec.group {
            ParamGroup::Trunk => pretrained
                .param(&spec.name)
                .cloned()
                .ok_or_else(|| Error::Incompatible {
                    param: spec.name.clone(),
                    detail: "is missing from the source checkpoint".into(),
                })?,
            ParamGroup::Projection => continue,
            ParamGroup::Composition | ParamGroup::Scalars => spec.init(seed),
        };
        params.push((spec.name, tensor));
    }
    Ok(Checkpoint {
        config: target_config.clone(),
        provenance: pretrained.provenance,
        seed,
        norm_stats: None,
        params,
    })
}
