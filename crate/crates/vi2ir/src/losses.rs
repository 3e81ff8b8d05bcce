//! Adversarial objective (log-likelihood and least-squares forms), the
//! per-layer feature-matching loss, and the weighted generator total.
//!
//! Every loss comes in two flavours sharing one formula: a value-only entry
//! point over per-image score maps / feature stacks, and a `*_grad` variant
//! over batched tensors that also returns analytic gradients wrt the fake
//! branch. Patch aggregation is the mean over patches and batch, so
//! magnitudes are batch-size independent; per-scale contributions add up
//! across the bank.

use serde::{Deserialize, Serialize};

use crate::model::{FeatureStack, ScoreMap};
use crate::nn::Tensor;
use crate::{Error, Result};

/// Form of the adversarial objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GanMode {
    /// Binary cross-entropy on sigmoid probabilities (the classic conditional
    /// objective); the generator uses the non-saturating form.
    LogLikelihood,
    /// Least-squares targets 1 (real) / 0 (fake); the stable default.
    #[default]
    LeastSquares,
}

/// Weighting of the full generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the feature-matching term.
    pub lambda_fm: f64,
    pub gan_mode: GanMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_fm: 10.0,
            gan_mode: GanMode::LeastSquares,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_fm >= 0.0) || !self.lambda_fm.is_finite() {
            return Err(Error::config("lambda_fm", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Per-discriminator loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleLoss {
    pub scale: usize,
    pub gan_g: f64,
    pub gan_d: f64,
    pub fm: f64,
}

/// Loss components of one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub gan_g: f64,
    pub gan_d: f64,
    pub fm: f64,
    pub total_g: f64,
    pub per_scale: Vec<ScaleLoss>,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        self.gan_g.is_finite() && self.gan_d.is_finite() && self.fm.is_finite() && self.total_g.is_finite()
    }

    /// total_g must equal gan_g + lambda * fm up to float tolerance.
    pub fn check_consistent(&self, weights: &LossWeights) -> Result<()> {
        let expect = total_generator_objective(self.gan_g, self.fm, weights);
        let tol = 1e-9 * (1.0 + expect.abs());
        if self.fm < 0.0 {
            return Err(Error::Other(format!("negative fm loss {}", self.fm)));
        }
        if (self.total_g - expect).abs() > tol {
            return Err(Error::Other(format!(
                "inconsistent loss report: total_g {} vs gan_g + lambda*fm = {expect}",
                self.total_g
            )));
        }
        Ok(())
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// ln(1 + e^x) without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Per-scale discriminator objective and its gradients wrt real and fake
/// logits. Mean over all patches (and batch) of the scale.
fn d_loss_scale(real: &Tensor, fake: &Tensor, mode: GanMode) -> (f64, Tensor, Tensor) {
    let nr = real.len() as f64;
    let nf = fake.len() as f64;
    match mode {
        GanMode::LogLikelihood => {
            // -E[log D] - E[log(1 - D)] on sigmoid probabilities.
            let loss = real.iter().map(|&z| softplus(-z)).sum::<f64>() / nr
                + fake.iter().map(|&z| softplus(z)).sum::<f64>() / nf;
            let g_real = real.mapv(|z| (sigmoid(z) - 1.0) / nr);
            let g_fake = fake.mapv(|z| sigmoid(z) / nf);
            (loss, g_real, g_fake)
        }
        GanMode::LeastSquares => {
            let loss = real.iter().map(|&z| (z - 1.0) * (z - 1.0)).sum::<f64>() / nr
                + fake.iter().map(|&z| z * z).sum::<f64>() / nf;
            let g_real = real.mapv(|z| 2.0 * (z - 1.0) / nr);
            let g_fake = fake.mapv(|z| 2.0 * z / nf);
            (loss, g_real, g_fake)
        }
    }
}

/// Per-scale generator adversarial term and its gradient wrt fake logits.
fn g_loss_scale(fake: &Tensor, mode: GanMode) -> (f64, Tensor) {
    let n = fake.len() as f64;
    match mode {
        GanMode::LogLikelihood => {
            // Non-saturating form: -E[log D(fake)].
            let loss = fake.iter().map(|&z| softplus(-z)).sum::<f64>() / n;
            let grad = fake.mapv(|z| (sigmoid(z) - 1.0) / n);
            (loss, grad)
        }
        GanMode::LeastSquares => {
            let loss = fake.iter().map(|&z| (z - 1.0) * (z - 1.0)).sum::<f64>() / n;
            let grad = fake.mapv(|z| 2.0 * (z - 1.0) / n);
            (loss, grad)
        }
    }
}

/// Multi-scale discriminator loss over batched logits, with gradients.
/// Returns (total, per-scale values, grads wrt real, grads wrt fake).
pub fn gan_loss_d_grad(
    real: &[Tensor],
    fake: &[Tensor],
    mode: GanMode,
) -> Result<(f64, Vec<f64>, Vec<Tensor>, Vec<Tensor>)> {
    if real.is_empty() || real.len() != fake.len() {
        return Err(Error::Precondition(format!(
            "score lists must be nonempty and equal length ({} vs {})",
            real.len(),
            fake.len()
        )));
    }
    let mut total = 0.0;
    let mut per_scale = Vec::with_capacity(real.len());
    let mut g_real = Vec::with_capacity(real.len());
    let mut g_fake = Vec::with_capacity(real.len());
    for (r, f) in real.iter().zip(fake.iter()) {
        let (l, gr, gf) = d_loss_scale(r, f, mode);
        total += l;
        per_scale.push(l);
        g_real.push(gr);
        g_fake.push(gf);
    }
    Ok((total, per_scale, g_real, g_fake))
}

/// Multi-scale generator adversarial loss over batched logits, with
/// gradients wrt the fake logits.
pub fn gan_loss_g_grad(fake: &[Tensor], mode: GanMode) -> Result<(f64, Vec<f64>, Vec<Tensor>)> {
    if fake.is_empty() {
        return Err(Error::Precondition("empty score list".into()));
    }
    let mut total = 0.0;
    let mut per_scale = Vec::with_capacity(fake.len());
    let mut grads = Vec::with_capacity(fake.len());
    for f in fake {
        let (l, g) = g_loss_scale(f, mode);
        total += l;
        per_scale.push(l);
        grads.push(g);
    }
    Ok((total, per_scale, grads))
}

fn score_map_to_tensor(m: &ScoreMap) -> Tensor {
    let (h, w) = m.logits.dim();
    m.logits.clone().into_shape_with_order((1, 1, h, w)).unwrap()
}

/// Discriminator objective summed over scales (value only, per-image maps).
pub fn gan_loss_d(real_scores: &[ScoreMap], fake_scores: &[ScoreMap], mode: GanMode) -> Result<f64> {
    let real: Vec<Tensor> = real_scores.iter().map(score_map_to_tensor).collect();
    let fake: Vec<Tensor> = fake_scores.iter().map(score_map_to_tensor).collect();
    Ok(gan_loss_d_grad(&real, &fake, mode)?.0)
}

/// Generator adversarial term summed over scales (value only).
pub fn gan_loss_g(fake_scores: &[ScoreMap], mode: GanMode) -> Result<f64> {
    let fake: Vec<Tensor> = fake_scores.iter().map(score_map_to_tensor).collect();
    Ok(gan_loss_g_grad(&fake, mode)?.0)
}

fn check_stack_pair(real: &FeatureStack, fake: &FeatureStack, scale: usize) -> Result<()> {
    if real.depth() != fake.depth() {
        return Err(Error::Precondition(format!(
            "scale {scale}: feature stacks differ in depth ({} vs {})",
            real.depth(),
            fake.depth()
        )));
    }
    for (i, (r, f)) in real.layers.iter().zip(fake.layers.iter()).enumerate() {
        if r.dim() != f.dim() {
            return Err(Error::Precondition(format!(
                "scale {scale}, layer {i}: feature shapes differ ({:?} vs {:?})",
                r.dim(),
                f.dim()
            )));
        }
    }
    Ok(())
}

/// Feature-matching loss with gradients wrt the fake stacks. Per layer the
/// term is the L1 distance normalized by the layer's element count (a mean
/// over elements and batch); layers and scales add up. The real branch is
/// treated as constant, so only fake-branch gradients exist.
pub fn feature_matching_grad(
    real_stacks: &[FeatureStack],
    fake_stacks: &[FeatureStack],
) -> Result<(f64, Vec<f64>, Vec<Vec<Tensor>>)> {
    if real_stacks.is_empty() || real_stacks.len() != fake_stacks.len() {
        return Err(Error::Precondition(format!(
            "stack lists must be nonempty and equal length ({} vs {})",
            real_stacks.len(),
            fake_stacks.len()
        )));
    }
    let mut total = 0.0;
    let mut per_scale = Vec::with_capacity(real_stacks.len());
    let mut grads = Vec::with_capacity(real_stacks.len());
    for (k, (r, f)) in real_stacks.iter().zip(fake_stacks.iter()).enumerate() {
        check_stack_pair(r, f, k)?;
        let mut scale_loss = 0.0;
        let mut scale_grads = Vec::with_capacity(r.depth());
        for (rl, fl) in r.layers.iter().zip(f.layers.iter()) {
            let n = rl.len() as f64;
            let mut acc = 0.0;
            let mut g = Tensor::zeros(fl.dim());
            ndarray::Zip::from(&mut g)
                .and(rl)
                .and(fl)
                .for_each(|go, &rv, &fv| {
                    let d = fv - rv;
                    acc += d.abs();
                    *go = d.signum() / n;
                });
            scale_loss += acc / n;
            scale_grads.push(g);
        }
        total += scale_loss;
        per_scale.push(scale_loss);
        grads.push(scale_grads);
    }
    Ok((total, per_scale, grads))
}

/// Feature-matching loss (value only).
pub fn feature_matching_loss(
    real_stacks: &[FeatureStack],
    fake_stacks: &[FeatureStack],
) -> Result<f64> {
    Ok(feature_matching_grad(real_stacks, fake_stacks)?.0)
}

/// The full generator objective: adversarial term plus weighted feature
/// matching.
pub fn total_generator_objective(gan_g: f64, fm: f64, w: &LossWeights) -> f64 {
    gan_g + w.lambda_fm * fm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{central_diff, max_rel_err};
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn map_of(vals: Array2<f64>, scale: usize) -> ScoreMap {
        ScoreMap {
            logits: vals,
            scale_index: scale,
        }
    }

    #[test]
    fn log_mode_half_probability_is_two_ln_two() {
        // Logit 0 means p = 0.5 on both branches.
        let real = vec![map_of(Array2::zeros((3, 4)), 0)];
        let fake = vec![map_of(Array2::zeros((3, 4)), 0)];
        let loss = gan_loss_d(&real, &fake, GanMode::LogLikelihood).unwrap();
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn least_squares_perfect_discriminator_is_zero() {
        let real = vec![map_of(Array2::ones((2, 2)), 0)];
        let fake = vec![map_of(Array2::zeros((2, 2)), 0)];
        let loss = gan_loss_d(&real, &fake, GanMode::LeastSquares).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn three_equal_scales_triple_the_loss() {
        let r = map_of(Array2::from_elem((2, 3), 0.3), 0);
        let f = map_of(Array2::from_elem((2, 3), -0.2), 0);
        for mode in [GanMode::LogLikelihood, GanMode::LeastSquares] {
            let single = gan_loss_d(&[r.clone()], &[f.clone()], mode).unwrap();
            let triple = gan_loss_d(
                &[r.clone(), r.clone(), r.clone()],
                &[f.clone(), f.clone(), f.clone()],
                mode,
            )
            .unwrap();
            assert!((triple - 3.0 * single).abs() < 1e-12);
        }
    }

    #[test]
    fn generator_least_squares_endpoints() {
        let ones = vec![map_of(Array2::ones((2, 2)), 0)];
        assert_eq!(gan_loss_g(&ones, GanMode::LeastSquares).unwrap(), 0.0);
        let zeros = vec![map_of(Array2::zeros((2, 2)), 0)];
        assert_eq!(gan_loss_g(&zeros, GanMode::LeastSquares).unwrap(), 1.0);
    }

    #[test]
    fn empty_lists_rejected() {
        assert!(gan_loss_d(&[], &[], GanMode::LeastSquares).is_err());
        assert!(gan_loss_g(&[], GanMode::LeastSquares).is_err());
        assert!(feature_matching_loss(&[], &[]).is_err());
    }

    fn stack_of(vals: Vec<Tensor>) -> FeatureStack {
        FeatureStack::new(vals)
    }

    #[test]
    fn fm_identical_stacks_zero() {
        let t = Tensor::from_shape_fn((1, 2, 3, 3), |(_, c, y, x)| (c + y + x) as f64 * 0.1);
        let a = stack_of(vec![t.clone()]);
        let b = stack_of(vec![t]);
        assert_eq!(feature_matching_loss(&[a], &[b]).unwrap(), 0.0);
    }

    #[test]
    fn fm_hand_computed_single_layer() {
        // One layer of 4 elements: (1/4) * sum |1 - 0| = 1.
        let real = stack_of(vec![Tensor::ones((1, 1, 2, 2))]);
        let fake = stack_of(vec![Tensor::zeros((1, 1, 2, 2))]);
        assert_eq!(feature_matching_loss(&[real], &[fake]).unwrap(), 1.0);
    }

    #[test]
    fn fm_element_count_normalization() {
        // Same per-element deviation, doubled element count: term unchanged.
        let small = (
            stack_of(vec![Tensor::from_elem((1, 1, 2, 2), 0.7)]),
            stack_of(vec![Tensor::from_elem((1, 1, 2, 2), 0.4)]),
        );
        let large = (
            stack_of(vec![Tensor::from_elem((1, 1, 4, 2), 0.7)]),
            stack_of(vec![Tensor::from_elem((1, 1, 4, 2), 0.4)]),
        );
        let a = feature_matching_loss(&[small.0], &[small.1]).unwrap();
        let b = feature_matching_loss(&[large.0], &[large.1]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn fm_scaling_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let real = Tensor::from_shape_fn((2, 2, 3, 3), |_| rng.random::<f64>());
        let fake = Tensor::from_shape_fn((2, 2, 3, 3), |_| rng.random::<f64>());
        let base =
            feature_matching_loss(&[stack_of(vec![real.clone()])], &[stack_of(vec![fake.clone()])])
                .unwrap();
        for c in [2.0, -3.0, 0.5] {
            let scaled_fake = &real + &((&fake - &real) * c);
            let v = feature_matching_loss(
                &[stack_of(vec![real.clone()])],
                &[stack_of(vec![scaled_fake])],
            )
            .unwrap();
            assert!((v - c.abs() * base).abs() < 1e-12, "c = {c}");
        }
    }

    #[test]
    fn fm_shape_mismatch_rejected() {
        let a = stack_of(vec![Tensor::zeros((1, 1, 2, 2))]);
        let b = stack_of(vec![Tensor::zeros((1, 1, 2, 3))]);
        assert!(feature_matching_loss(&[a], &[b]).is_err());
    }

    #[test]
    fn total_objective_arithmetic() {
        let w = LossWeights {
            lambda_fm: 10.0,
            gan_mode: GanMode::LeastSquares,
        };
        assert_eq!(total_generator_objective(1.0, 0.5, &w), 6.0);
        let w0 = LossWeights {
            lambda_fm: 0.0,
            ..w
        };
        assert_eq!(total_generator_objective(1.0, 0.5, &w0), 1.0);
    }

    #[test]
    fn report_consistency_check() {
        let w = LossWeights::default();
        let good = LossReport {
            gan_g: 0.25,
            gan_d: 0.5,
            fm: 0.1,
            total_g: 0.25 + 10.0 * 0.1,
            per_scale: vec![],
        };
        assert!(good.check_consistent(&w).is_ok());
        let bad = LossReport {
            total_g: 99.0,
            ..good
        };
        assert!(bad.check_consistent(&w).is_err());
    }

    #[test]
    fn g_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for mode in [GanMode::LogLikelihood, GanMode::LeastSquares] {
            let fake = Tensor::from_shape_fn((1, 1, 3, 3), |_| rng.random::<f64>() * 2.0 - 1.0);
            let (_, _, grads) = gan_loss_g_grad(&[fake.clone()], mode).unwrap();
            let mut flat: Vec<f64> = fake.iter().copied().collect();
            let num = central_diff(
                &mut flat,
                |v| {
                    let t = Tensor::from_shape_vec(fake.dim(), v.to_vec()).unwrap();
                    gan_loss_g_grad(&[t], mode).unwrap().0
                },
                1e-6,
            );
            let ana: Vec<f64> = grads[0].iter().copied().collect();
            let err = max_rel_err(&ana, &num, 1e-9);
            assert!(err < 1e-6, "mode {mode:?}: rel err {err}");
        }
    }

    #[test]
    fn fm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let real = Tensor::from_shape_fn((1, 2, 2, 2), |_| rng.random::<f64>());
        let fake = Tensor::from_shape_fn((1, 2, 2, 2), |_| rng.random::<f64>());
        let (_, _, grads) =
            feature_matching_grad(&[stack_of(vec![real.clone()])], &[stack_of(vec![fake.clone()])])
                .unwrap();
        let mut flat: Vec<f64> = fake.iter().copied().collect();
        let num = central_diff(
            &mut flat,
            |v| {
                let t = Tensor::from_shape_vec(fake.dim(), v.to_vec()).unwrap();
                feature_matching_grad(&[stack_of(vec![real.clone()])], &[stack_of(vec![t])])
                    .unwrap()
                    .0
            },
            1e-7,
        );
        let ana: Vec<f64> = grads[0][0].iter().copied().collect();
        let err = max_rel_err(&ana, &num, 1e-9);
        assert!(err < 1e-6, "rel err {err}");
    }
}
