//! Shared helpers for the integration tests: an f64 reference network written
//! with plain loops, brute-force metric scripts over dumped CSV files, and
//! small fixture builders.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sward::data::{synth_dataset, Manifest, SplitPlan, SynthConfig};
use sward::model::{Checkpoint, ModelConfig};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sward"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn sward")
}

pub fn synth(dir: &Path, labeled: usize, unlabeled: usize, size: usize, seed: u64, split: SplitPlan) -> Manifest {
    synth_dataset(
        dir,
        &SynthConfig {
            n_labeled: labeled,
            n_unlabeled: unlabeled,
            size,
            seed,
            split,
        },
    )
    .expect("synthetic dataset")
}

pub fn split(train: usize, val: usize, test: usize) -> SplitPlan {
    SplitPlan { train, val, test }
}

pub fn p(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

pub fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

// ── reference network ──────────────────────────────────────────────────

pub type Params = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

pub fn params_f64(ckpt: &Checkpoint) -> Params {
    ckpt.params()
        .map(|(n, t)| {
            (
                n.to_string(),
                (t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect()),
            )
        })
        .collect()
}

/// Records every branch decision (ReLU sign, max-pool winner) so finite
/// differences that straddle a kink can be recognized.
#[derive(Default, PartialEq, Debug)]
pub struct Trace(pub Vec<u32>);

fn conv3x3_same(x: &[f64], c: usize, h: usize, w: usize, k: &[f64], b: &[f64], o: usize) -> Vec<f64> {
    let mut out = vec![0.0; o * h * w];
    for oc in 0..o {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = b[oc];
                for ic in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += k[((oc * c + ic) * 3 + ky) * 3 + kx] * x[(ic * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(oc * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

fn relu(v: &mut [f64], trace: &mut Trace) {
    for x in v {
        trace.0.push((*x > 0.0) as u32);
        *x = x.max(0.0);
    }
}

fn maxpool2(x: &[f64], c: usize, h: usize, w: usize, trace: &mut Trace) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = (f64::NEG_INFINITY, 0u32);
                for (i, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    let v = x[(ch * h + 2 * y + dy) * w + 2 * xx + dx];
                    if v > best.0 {
                        best = (v, i as u32);
                    }
                }
                trace.0.push(best.1);
                out[(ch * oh + y) * ow + xx] = best.0;
            }
        }
    }
    out
}

fn dense(x: &[f64], rows: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let (f, g) = (x.len() / rows, b.len());
    let mut out = vec![0.0; rows * g];
    for r in 0..rows {
        for j in 0..g {
            out[r * g + j] = b[j] + (0..f).map(|i| x[r * f + i] * w[i * g + j]).sum::<f64>();
        }
    }
    out
}

fn get<'a>(p: &'a Params, name: &str) -> &'a [f64] {
    &p[name].1
}

/// B×C×H×W (flattened) → B×E.
pub fn encode(p: &Params, cfg: &ModelConfig, batch: &[f64], trace: &mut Trace) -> Vec<f64> {
    let s = cfg.input_size;
    let per = cfg.input_channels * s * s;
    let n = batch.len() / per;
    let mut pooled = Vec::new();
    for i in 0..n {
        let (mut x, mut c, mut h) = (batch[i * per..(i + 1) * per].to_vec(), cfg.input_channels, s);
        for (l, &o) in cfg.conv_channels.iter().enumerate() {
            let k = get(p, &format!("conv{l}.weight"));
            let b = get(p, &format!("conv{l}.bias"));
            let mut y = conv3x3_same(&x, c, h, h, k, b, o);
            relu(&mut y, trace);
            x = maxpool2(&y, o, h, h, trace);
            c = o;
            h /= 2;
        }
        for ch in 0..c {
            pooled.push(x[ch * h * h..(ch + 1) * h * h].iter().sum::<f64>() / (h * h) as f64);
        }
    }
    dense(&pooled, n, get(p, "embed.weight"), get(p, "embed.bias"))
}

pub fn project(p: &Params, e: &[f64], rows: usize, trace: &mut Trace) -> Vec<f64> {
    let mut h = dense(e, rows, get(p, "proj1.weight"), get(p, "proj1.bias"));
    relu(&mut h, trace);
    let mut z = dense(&h, rows, get(p, "proj2.weight"), get(p, "proj2.bias"));
    let d = z.len() / rows;
    for row in z.chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= n);
    }
    z
}

pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / z));
    }
    out
}

pub fn composition(p: &Params, e: &[f64], rows: usize) -> Vec<f64> {
    let logits = dense(e, rows, get(p, "composition.weight"), get(p, "composition.bias"));
    softmax_rows(&logits, logits.len() / rows)
}

pub fn scalars(p: &Params, e: &[f64], rows: usize) -> Vec<f64> {
    dense(e, rows, get(p, "scalars.weight"), get(p, "scalars.bias"))
        .into_iter()
        .map(|v| 1.0 / (1.0 + (-v).exp()))
        .collect()
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}

/// `−(1/B) Σ v·log softmax(logits)`.
pub fn imix_loss(logits: &[f64], labels: &[f64], b: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..b {
        let row = &logits[i * b..(i + 1) * b];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for j in 0..b {
            total -= labels[i * b + j] * (row[j] - lse);
        }
    }
    total / b as f64
}

pub fn npair_logits(za: &[f64], zp: &[f64], b: usize, tau: f64) -> Vec<f64> {
    let d = za.len() / b;
    let mut out = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            out[i * b + j] = (0..d).map(|k| za[i * d + k] * zp[j * d + k]).sum::<f64>() / tau;
        }
    }
    out
}

// ── brute-force metric scripts over CSV text ───────────────────────────

pub fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    (header, rows)
}

pub fn num(s: &str) -> f64 {
    s.parse().unwrap_or_else(|_| panic!("not a number: {s:?}"))
}

pub fn rmse_pairs(pairs: &[(f64, f64)]) -> f64 {
    let mut sum = 0.0;
    for (a, b) in pairs {
        sum += (a - b) * (a - b);
    }
    (sum / pairs.len() as f64).sqrt()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
