//! Two-view stochastic augmentation and input mixup with virtual labels.

use serde::{Deserialize, Serialize};

use crate::data::crop_resize;
use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Fraction of the image area kept by the square random crop.
    pub crop_scale_range: [f32; 2],
    pub horizontal_flip_p: f32,
    pub vertical_flip_p: f32,
    /// Additive brightness offset, uniform in ±this.
    pub brightness_jitter: f32,
    /// Independent additive offset per channel, uniform in ±this.
    pub channel_jitter: f32,
    pub output_size: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            crop_scale_range: [0.5, 1.0],
            horizontal_flip_p: 0.5,
            vertical_flip_p: 0.5,
            brightness_jitter: 0.2,
            channel_jitter: 0.1,
            output_size: 32,
        }
    }
}

impl AugmentPolicy {
    /// No crop, flip or jitter: views are plain resizes.
    pub fn identity(output_size: usize) -> Self {
        Self {
            crop_scale_range: [1.0, 1.0],
            horizontal_flip_p: 0.0,
            vertical_flip_p: 0.0,
            brightness_jitter: 0.0,
            channel_jitter: 0.0,
            output_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_scale_range;
        let prob = |p: f32| (0.0..=1.0).contains(&p);
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop_scale_range {:?} must satisfy 0 < lo ≤ hi ≤ 1", self.crop_scale_range)));
        }
        if !prob(self.horizontal_flip_p) || !prob(self.vertical_flip_p) {
            return Err(Error::Config("flip probabilities must lie in [0, 1]".into()));
        }
        if self.brightness_jitter < 0.0 || self.channel_jitter < 0.0 {
            return Err(Error::Config("jitter magnitudes must be non-negative".into()));
        }
        if self.output_size == 0 {
            return Err(Error::Config("output_size must be at least 1".into()));
        }
        Ok(())
    }
}

fn one_view(image: &Tensor, policy: &AugmentPolicy, rng: &mut SeededRng) -> Result<Tensor> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape("two_views", format!("expected C×H×W, got {s:?}"))),
    };
    let [lo, hi] = policy.crop_scale_range;
    let short = h.min(w);
    let scale = rng.uniform_range(lo, hi);
    let side = ((scale.sqrt() * short as f32).round() as usize).clamp(1, short);
    let y0 = rng.below(h - side + 1);
    let x0 = rng.below(w - side + 1);
    let size = policy.output_size;
    let mut view = crop_resize(image, (y0, x0), (side, side), (size, size))?;

    let flip_h = rng.bernoulli(policy.horizontal_flip_p);
    let flip_v = rng.bernoulli(policy.vertical_flip_p);
    let brightness = rng.uniform_range(-policy.brightness_jitter, policy.brightness_jitter);
    let offsets: Vec<f32> = (0..c)
        .map(|_| rng.uniform_range(-policy.channel_jitter, policy.channel_jitter))
        .collect();

    let src = view.data().to_vec();
    let plane = size * size;
    for (ch, dst) in view.data_mut().chunks_mut(plane).enumerate() {
        for y in 0..size {
            let sy = if flip_v { size - 1 - y } else { y };
            for x in 0..size {
                let sx = if flip_h { size - 1 - x } else { x };
                let v = src[ch * plane + sy * size + sx] + brightness + offsets[ch];
                dst[y * size + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(view)
}

/// Two independent crop → resize → flip → jitter draws of one C×H×W image.
pub fn two_views(image: &Tensor, policy: &AugmentPolicy, rng: &mut SeededRng) -> Result<(Tensor, Tensor)> {
    policy.validate()?;
    if let [_, h, w] = image.shape() {
        let min_side = (policy.crop_scale_range[0].sqrt() * (*h.min(w)) as f32).round();
        if min_side < 1.0 {
            return Err(Error::invalid(
                "two_views",
                format!("{h}x{w} image is smaller than the minimum crop"),
            ));
        }
    }
    let first = one_view(image, policy, rng)?;
    let second = one_view(image, policy, rng)?;
    Ok((first, second))
}

/// Mixed anchors plus the row-stochastic B×B target they induce.
#[derive(Debug, Clone, PartialEq)]
pub struct MixResult {
    pub mixed_batch: Tensor,
    pub lambdas: Vec<f32>,
    pub permutation: Vec<usize>,
    /// Row-major B×B; row i has λᵢ at i and 1−λᵢ at π(i).
    pub virtual_labels: Vec<f32>,
}

impl MixResult {
    pub fn batch_size(&self) -> usize {
        self.lambdas.len()
    }

    pub fn virtual_labels_tensor(&self) -> Tensor {
        let b = self.batch_size();
        Tensor::new(vec![b, b], self.virtual_labels.clone()).expect("B×B labels")
    }
}

/// Per-sample λᵢ ~ Beta(α, α) and a uniform permutation π, then
/// [`mixup_with`].
pub fn mixup(batch: &Tensor, alpha: f32, rng: &mut SeededRng) -> Result<MixResult> {
    let b = batch.shape().first().copied().unwrap_or(0);
    if b < 2 {
        return Err(Error::invalid("mixup", format!("batch size {b} < 2")));
    }
    if !(alpha > 0.0) {
        return Err(Error::invalid("mixup", format!("alpha must be positive, got {alpha}")));
    }
    let lambdas = (0..b).map(|_| rng.beta(alpha)).collect::<Result<Vec<_>>>()?;
    let permutation = rng.permutation(b);
    mixup_with(batch, &lambdas, &permutation)
}

/// `mixed[i] = λᵢ·batch[i] + (1−λᵢ)·batch[π(i)]` with explicit λ and π.
pub fn mixup_with(batch: &Tensor, lambdas: &[f32], permutation: &[usize]) -> Result<MixResult> {
    let b = batch.shape().first().copied().unwrap_or(0);
    if b < 2 {
        return Err(Error::invalid("mixup", format!("batch size {b} < 2")));
    }
    if lambdas.len() != b || permutation.len() != b {
        return Err(Error::shape(
            "mixup",
            format!("batch {b}, {} lambdas, permutation of {}", lambdas.len(), permutation.len()),
        ));
    }
    let mut seen = vec![false; b];
    for &p in permutation {
        if p >= b || std::mem::replace(&mut seen[p], true) {
            return Err(Error::invalid("mixup", format!("{permutation:?} is not a permutation")));
        }
    }
    if lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(Error::invalid("mixup", "lambdas must lie in [0, 1]"));
    }

    let inner = batch.numel() / b;
    let src = batch.data();
    let mut mixed = vec![0.0f32; batch.numel()];
    let mut labels = vec![0.0f32; b * b];
    for i in 0..b {
        let (lam, j) = (lambdas[i], permutation[i]);
        let (xi, xj) = (&src[i * inner..(i + 1) * inner], &src[j * inner..(j + 1) * inner]);
        for (dst, (a, c)) in mixed[i * inner..(i + 1) * inner].iter_mut().zip(xi.iter().zip(xj)) {
            *dst = lam * a + (1.0 - lam) * c;
        }
        labels[i * b + i] = lam;
        labels[i * b + j] += 1.0 - lam;
    }
    Ok(MixResult {
        mixed_batch: Tensor::new(batch.shape().to_vec(), mixed)?,
        lambdas: lambdas.to_vec(),
        permutation: permutation.to_vec(),
        virtual_labels: labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::resize_bilinear;

    fn image(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = SeededRng::new(seed);
        Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn identity_policy_is_a_resize() {
        let img = image(3, 20, 20, 1);
        let (a, b) = two_views(&img, &AugmentPolicy::identity(12), &mut SeededRng::new(5)).unwrap();
        let expected = resize_bilinear(&img, 12, 12).unwrap();
        assert_eq!(a, expected);
        assert_eq!(b, expected);
    }

    #[test]
    fn views_stay_in_unit_range_and_replay() {
        let img = image(3, 32, 32, 2);
        let policy = AugmentPolicy {
            brightness_jitter: 0.6,
            channel_jitter: 0.4,
            ..AugmentPolicy::default()
        };
        let (a, b) = two_views(&img, &policy, &mut SeededRng::new(9)).unwrap();
        assert!(a.data().iter().chain(b.data()).all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a, b);
        let (a2, b2) = two_views(&img, &policy, &mut SeededRng::new(9)).unwrap();
        assert_eq!((a, b), (a2, b2));
    }

    #[test]
    fn views_never_read_outside_the_source() {
        // Upsampling tiny crops is where an off-by-one would show.
        let img = image(3, 17, 23, 3);
        let policy = AugmentPolicy {
            crop_scale_range: [0.05, 1.0],
            output_size: 40,
            ..AugmentPolicy::default()
        };
        let mut rng = SeededRng::new(0);
        for _ in 0..200 {
            two_views(&img, &policy, &mut rng).unwrap();
        }
    }

    #[test]
    fn rejects_invalid_policies_and_images() {
        let img = image(3, 8, 8, 1);
        let bad = AugmentPolicy {
            horizontal_flip_p: 1.5,
            ..AugmentPolicy::default()
        };
        assert!(two_views(&img, &bad, &mut SeededRng::new(0)).is_err());
        let tiny_crop = AugmentPolicy {
            crop_scale_range: [0.001, 1.0],
            ..AugmentPolicy::default()
        };
        assert!(two_views(&image(3, 4, 4, 1), &tiny_crop, &mut SeededRng::new(0)).is_err());
    }

    fn batch(b: usize) -> Tensor {
        let mut rng = SeededRng::new(b as u64);
        Tensor::new(vec![b, 1, 2, 2], (0..b * 4).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn lambda_one_is_identity() {
        let x = batch(4);
        let m = mixup_with(&x, &[1.0; 4], &[3, 2, 0, 1]).unwrap();
        assert_eq!(m.mixed_batch, x);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.virtual_labels[i * 4 + j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn self_mix_keeps_samples() {
        let x = batch(3);
        let m = mixup_with(&x, &[0.2, 0.5, 0.9], &[0, 1, 2]).unwrap();
        for (a, b) in m.mixed_batch.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(m.virtual_labels, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn two_sample_hand_computation() {
        let x = Tensor::new(vec![2, 1, 1, 2], vec![1.0, 0.0, 0.0, 0.5]).unwrap();
        let m = mixup_with(&x, &[0.3, 0.8], &[1, 0]).unwrap();
        // row0 = 0.3*(1,0) + 0.7*(0,0.5); row1 = 0.8*(0,0.5) + 0.2*(1,0)
        let expected = [0.3, 0.35, 0.2, 0.4];
        for (a, b) in m.mixed_batch.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        let labels = [0.3, 0.7, 0.2, 0.8];
        for (a, b) in m.virtual_labels.iter().zip(labels) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mixup_errors() {
        let one = batch(1);
        assert!(mixup(&one, 1.0, &mut SeededRng::new(0)).is_err());
        assert!(mixup(&batch(2), 0.0, &mut SeededRng::new(0)).is_err());
        assert!(mixup_with(&batch(2), &[0.5, 0.5], &[0, 0]).is_err());
    }

    #[test]
    fn lambda_mean_near_half_for_alpha_one() {
        let mut rng = SeededRng::new(21);
        let x = batch(8);
        let mut sum = 0.0f64;
        let mut n = 0;
        while n < 10_000 {
            let m = mixup(&x, 1.0, &mut rng).unwrap();
            sum += m.lambdas.iter().map(|&l| l as f64).sum::<f64>();
            n += m.lambdas.len();
        }
        assert!((sum / n as f64 - 0.5).abs() < 0.02);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn labels_row_stochastic_and_mix_convex(seed in 0u64..1000, b in 2usize..9, alpha in 0.1f32..4.0) {
                let mut rng = SeededRng::new(seed);
                let x = Tensor::new(vec![b, 3, 2, 2], (0..b * 12).map(|_| rng.uniform()).collect()).unwrap();
                let m = mixup(&x, alpha, &mut rng).unwrap();
                for row in m.virtual_labels.chunks(b) {
                    let s: f32 = row.iter().sum();
                    prop_assert!((s - 1.0).abs() < 1e-6);
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                    prop_assert!(row.iter().filter(|&&v| v != 0.0).count() <= 2);
                }
                for (i, &l) in m.lambdas.iter().enumerate() {
                    let diag = m.virtual_labels[i * b + i];
                    if m.permutation[i] == i {
                        prop_assert!((diag - 1.0).abs() < 1e-6);
                    } else {
                        prop_assert_eq!(diag, l);
                    }
                }
                prop_assert!(m.mixed_batch.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
