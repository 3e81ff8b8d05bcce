//! Optional 2x super-resolution stage applied to translated images before
//! export: a non-learned bicubic baseline plus a small residual upsampler
//! trained with L1 and the shared feature-matching objective.

use std::path::Path;

use ndarray::{Array3, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::ImageBuf;
use crate::losses::{feature_matching_grad, gan_loss_d_grad, GanMode};
use crate::model::{
    build_discriminator, concat_channels, splitmix64, Discriminator, DiscriminatorSpec,
    FeatureStack, INIT_STD,
};
use crate::nn::{
    Conv2d, ConvTranspose2d, Layer, Optimizer, OptimizerKind, PadKind, ParamStore, ResBlock,
    ResChain, Stack, StackTrace, Tensor,
};
use crate::training::archive;
use crate::{Error, Result};

/// Architecture of the residual upsampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SrSpec {
    /// Fixed at 2: one doubling per dimension.
    pub scale_factor: usize,
    pub res_blocks: usize,
    pub base_width: usize,
    /// Weight of the L1 term during training.
    pub train_weight_l1: f64,
}

impl Default for SrSpec {
    fn default() -> Self {
        SrSpec {
            scale_factor: 2,
            res_blocks: 8,
            base_width: 32,
            train_weight_l1: 1.0,
        }
    }
}

impl SrSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scale_factor != 2 {
            return Err(Error::config("scale_factor", "only 2x is supported"));
        }
        if self.res_blocks == 0 {
            return Err(Error::config("res_blocks", "must be >= 1"));
        }
        if self.base_width == 0 {
            return Err(Error::config("base_width", "must be >= 1"));
        }
        if !(self.train_weight_l1 >= 0.0) || !self.train_weight_l1.is_finite() {
            return Err(Error::config("train_weight_l1", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Catmull-Rom kernel (the classic a = -0.5 bicubic).
fn cubic_weight(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

fn bicubic_axis_taps(dst: usize, factor: usize) -> Vec<[(usize, f64); 4]> {
    let src_len = dst / factor;
    (0..dst)
        .map(|i| {
            let s = (i as f64 + 0.5) / factor as f64 - 0.5;
            let base = s.floor();
            let frac = s - base;
            let mut taps = [(0usize, 0.0f64); 4];
            for (j, tap) in taps.iter_mut().enumerate() {
                let idx = (base as isize + j as isize - 1).clamp(0, src_len as isize - 1);
                *tap = (idx as usize, cubic_weight(frac - (j as f64 - 1.0)));
            }
            taps
        })
        .collect()
}

/// Bicubic upsampling by an integer factor; factor 1 is the identity.
/// Kernel weights sum to one, so constant images stay constant.
pub fn bicubic_upsample(img: &ImageBuf, factor: usize) -> Result<ImageBuf> {
    if factor == 0 {
        return Err(Error::Precondition("upsample factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let batch = img.to_batch();
    let up = bicubic_upsample_batch(&batch, factor);
    Ok(ImageBuf::from_batch(&up, 0, img.range))
}

pub fn bicubic_upsample_batch(x: &Tensor, factor: usize) -> Tensor {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h * factor, w * factor);
    let ytaps = bicubic_axis_taps(oh, factor);
    let xtaps = bicubic_axis_taps(ow, factor);
    // Separable: rows first, then columns.
    let mut mid = Tensor::zeros((n, c, h, ow));
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for &(sx, wgt) in &xtaps[ox] {
                        acc += wgt * x[[b, ch, y, sx]];
                    }
                    mid[[b, ch, y, ox]] = acc;
                }
            }
        }
    }
    let mut out = Tensor::zeros((n, c, oh, ow));
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for &(sy, wgt) in &ytaps[oy] {
                        acc += wgt * mid[[b, ch, sy, ox]];
                    }
                    out[[b, ch, oy, ox]] = acc;
                }
            }
        }
    }
    out
}

/// Residual 2x upsampler: output = bicubic baseline + learned residual,
/// clamped to the value range. The residual head is zero-initialized, so a
/// fresh network reproduces the bicubic baseline exactly.
#[derive(Debug, Clone)]
pub struct SrNetwork {
    spec: SrSpec,
    channels: usize,
    value_range: (f64, f64),
    store: ParamStore,
    ingress: Stack,
    res: ResChain,
    up: Stack,
    egress: Stack,
}

pub(crate) struct SrTrace {
    ingress: StackTrace,
    res: Vec<StackTrace>,
    up: StackTrace,
    egress: StackTrace,
    /// Pre-clamp sum, for the clamp subgradient.
    pre_clamp: Tensor,
}

pub fn build_sr_network(
    spec: &SrSpec,
    channels: usize,
    value_range: (f64, f64),
    rng_seed: u64,
) -> Result<SrNetwork> {
    spec.validate()?;
    if channels == 0 {
        return Err(Error::config("channels", "must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid init distribution");
    let mut init = move || normal.sample(&mut rng);
    let mut store = ParamStore::new();
    let w = spec.base_width;

    let ingress = Stack::new(vec![
        Layer::Conv(Conv2d::new(
            &mut store,
            "sr.in",
            channels,
            w,
            3,
            1,
            PadKind::Reflect,
            1,
            &mut init,
        )),
        Layer::Relu,
    ]);
    let blocks = (0..spec.res_blocks)
        .map(|b| ResBlock {
            body: Stack::new(vec![
                Layer::Conv(Conv2d::new(
                    &mut store,
                    &format!("sr.res.{b}.c1"),
                    w,
                    w,
                    3,
                    1,
                    PadKind::Reflect,
                    1,
                    &mut init,
                )),
                Layer::Relu,
                Layer::Conv(Conv2d::new(
                    &mut store,
                    &format!("sr.res.{b}.c2"),
                    w,
                    w,
                    3,
                    1,
                    PadKind::Reflect,
                    1,
                    &mut init,
                )),
            ]),
        })
        .collect();
    let up = Stack::new(vec![
        Layer::ConvT(ConvTranspose2d::new(
            &mut store, "sr.up", w, w, 3, 2, 1, 1, &mut init,
        )),
        Layer::Relu,
    ]);
    // Zero-initialized head: the residual starts at exactly zero.
    let egress = Stack::new(vec![Layer::Conv(Conv2d::new(
        &mut store,
        "sr.out",
        w,
        channels,
        3,
        1,
        PadKind::Reflect,
        1,
        &mut || 0.0,
    ))]);

    Ok(SrNetwork {
        spec: spec.clone(),
        channels,
        value_range,
        store,
        ingress,
        res: ResChain { blocks },
        up,
        egress,
    })
}

impl SrNetwork {
    pub fn spec(&self) -> &SrSpec {
        &self.spec
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn value_range(&self) -> (f64, f64) {
        self.value_range
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.len()
    }

    /// Upscale one image (input range must match the network's range).
    pub fn forward(&self, img: &ImageBuf) -> Result<ImageBuf> {
        let y = self.forward_batch(&img.to_batch())?;
        Ok(ImageBuf::from_batch(&y, 0, self.value_range))
    }

    pub fn forward_batch(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run_forward(x, false)?.0)
    }

    pub(crate) fn forward_batch_trace(&self, x: &Tensor) -> Result<(Tensor, SrTrace)> {
        let (y, t) = self.run_forward(x, true)?;
        Ok((y, t.expect("trace requested")))
    }

    fn run_forward(&self, x: &Tensor, want_trace: bool) -> Result<(Tensor, Option<SrTrace>)> {
        let (_, c, _, _) = x.dim();
        if c != self.channels {
            return Err(Error::Precondition(format!(
                "sr network expects {} channels, got {c}",
                self.channels
            )));
        }
        let ps = self.store.params();
        let base = bicubic_upsample_batch(x, self.spec.scale_factor);
        let (lo, hi) = self.value_range;
        if want_trace {
            let (a, t_in) = self.ingress.forward_trace(ps, x);
            let (r, t_res) = self.res.forward_trace(ps, &a);
            let (u, t_up) = self.up.forward_trace(ps, &r);
            let (resid, t_eg) = self.egress.forward_trace(ps, &u);
            let pre = &base + &resid;
            let y = pre.mapv(|v| v.clamp(lo, hi));
            Ok((
                y,
                Some(SrTrace {
                    ingress: t_in,
                    res: t_res,
                    up: t_up,
                    egress: t_eg,
                    pre_clamp: pre,
                }),
            ))
        } else {
            let resid = self
                .egress
                .forward(ps, &self.up.forward(ps, &self.res.forward(ps, &self.ingress.forward(ps, x))));
            let y = (&base + &resid).mapv(|v| v.clamp(lo, hi));
            Ok((y, None))
        }
    }

    /// Accumulate parameter grads; input gradients are discarded (the
    /// bicubic path sees only constants).
    pub(crate) fn backward_batch(&mut self, trace: &SrTrace, gy: &Tensor) {
        let (lo, hi) = self.value_range;
        let mut g = gy.clone();
        ndarray::Zip::from(&mut g)
            .and(&trace.pre_clamp)
            .for_each(|gv, &pre| {
                if pre < lo || pre > hi {
                    *gv = 0.0;
                }
            });
        let (ps, mut gs) = self.store.split_mut();
        let g = self.egress.backward(ps, &mut gs, &trace.egress, &g);
        let g = self.up.backward(ps, &mut gs, &trace.up, &g);
        let g = self.res.backward(ps, &mut gs, &trace.res, &g);
        let _ = self.ingress.backward(ps, &mut gs, &trace.ingress, &g);
    }

    pub fn digest(&self) -> u64 {
        self.store.digest("")
    }
}

/// Training hyperparameters for the super-resolution stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SrTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Weight of the discriminator feature-matching term (0 = L1 only).
    pub weight_fm: f64,
    pub optimizer: OptimizerKind,
}

impl Default for SrTrainConfig {
    fn default() -> Self {
        SrTrainConfig {
            steps: 200,
            batch_size: 4,
            lr: 1e-3,
            seed: 1,
            weight_fm: 0.0,
            optimizer: OptimizerKind::default(),
        }
    }
}

/// Per-step loss record of an SR training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SrLossRecord {
    pub step: u64,
    pub l1: f64,
    pub fm: f64,
    pub total: f64,
}

fn stack_batch(imgs: &[&Array3<f64>]) -> Tensor {
    let (c, h, w) = imgs[0].dim();
    let mut t = Tensor::zeros((imgs.len(), c, h, w));
    for (i, im) in imgs.iter().enumerate() {
        t.index_axis_mut(Axis(0), i).assign(im);
    }
    t
}

/// Train the residual upsampler on exact 2x (low, high) pairs by minimizing
/// `train_weight_l1 * L1 + weight_fm * FM`, where the feature-matching term
/// reuses the shared per-layer objective against a single patch
/// discriminator conditioned on the bicubic upsample. Deterministic in
/// (config.seed, pair order).
pub fn train_sr(
    net: &mut SrNetwork,
    pairs: &[(ImageBuf, ImageBuf)],
    config: &SrTrainConfig,
) -> Result<Vec<SrLossRecord>> {
    if pairs.is_empty() {
        return Err(Error::Precondition("no training pairs".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::config("batch_size", "must be >= 1"));
    }
    if !(config.lr > 0.0) {
        return Err(Error::config("lr", "must be > 0"));
    }
    let f = net.spec.scale_factor;
    for (i, (low, high)) in pairs.iter().enumerate() {
        if high.height() != f * low.height() || high.width() != f * low.width() {
            return Err(Error::Precondition(format!(
                "pair {i} is not an exact {f}x relation: {}x{} vs {}x{}",
                low.width(),
                low.height(),
                high.width(),
                high.height()
            )));
        }
    }

    let w_l1 = net.spec.train_weight_l1;
    let w_fm = config.weight_fm;
    let mut opt = Optimizer::new(config.optimizer, net.store().len());
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed, 11));

    // Single-scale critic for the feature-matching term; it is trained
    // alongside the upsampler with the usual adversarial objective.
    let mut critic: Option<(Discriminator, Optimizer)> = if w_fm > 0.0 {
        let dspec = DiscriminatorSpec {
            n_scales: 1,
            conv_layers: 3,
            base_width: net.spec.base_width,
            input_channels: 2 * net.channels,
        };
        let d = build_discriminator(&dspec, 0, splitmix64(config.seed, 12))?;
        let len = d.store().len();
        Some((d, Optimizer::new(config.optimizer, len)))
    } else {
        None
    };

    let mut history = Vec::with_capacity(config.steps as usize);
    let n = pairs.len();
    let bs = config.batch_size.min(n);
    let mut perm: Vec<usize> = Vec::new();
    let mut cursor = 0usize;

    for step in 0..config.steps {
        if perm.len() != n || cursor + bs > n {
            perm = (0..n).collect();
            perm.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &perm[cursor..cursor + bs];
        cursor += bs;

        let lows = stack_batch(&idx.iter().map(|&i| &pairs[i].0.data).collect::<Vec<_>>());
        let highs = stack_batch(&idx.iter().map(|&i| &pairs[i].1.data).collect::<Vec<_>>());
        let cond = bicubic_upsample_batch(&lows, f);

        let (out, trace) = net.forward_batch_trace(&lows)?;

        // Optional critic update first, fake branch detached.
        let mut fm = 0.0;
        let mut fm_grad_on_out: Option<Tensor> = None;
        if let Some((critic, copt)) = critic.as_mut() {
            let real_in = concat_channels(&cond, &highs)?;
            let fake_in = concat_channels(&cond, &out)?;
            let r = critic.forward_batch(&real_in)?;
            let fk = critic.forward_batch(&fake_in)?;
            let (_, _, gr, gf) = gan_loss_d_grad(
                &[r.scores.clone()],
                &[fk.scores.clone()],
                GanMode::LeastSquares,
            )?;
            let _ = critic.backward_batch(&r.trace, &gr[0], None);
            let _ = critic.backward_batch(&fk.trace, &gf[0], None);
            copt.step(critic.store_mut(), config.lr);

            // Feature matching against the updated critic.
            let r = critic.forward_batch(&real_in)?;
            let fk = critic.forward_batch(&fake_in)?;
            let real_stack = FeatureStack::new(r.features);
            let fake_stack = FeatureStack::new(fk.features);
            let (fm_val, _, fm_grads) =
                feature_matching_grad(&[real_stack], &[fake_stack])?;
            fm = fm_val;
            let scaled: Vec<Tensor> = fm_grads[0].iter().map(|g| g * w_fm).collect();
            let zero_scores = Tensor::zeros(fk.scores.dim());
            let g_in = critic.backward_batch(&fk.trace, &zero_scores, Some(&scaled));
            critic.store_mut().zero_grad();
            fm_grad_on_out = Some(g_in.slice(ndarray::s![.., net.channels.., .., ..]).to_owned());
        }

        // L1 term and its gradient.
        let count = out.len() as f64;
        let mut l1 = 0.0;
        let mut g_out = Tensor::zeros(out.dim());
        ndarray::Zip::from(&mut g_out)
            .and(&out)
            .and(&highs)
            .for_each(|g, &o, &t| {
                let d = o - t;
                l1 += d.abs();
                *g = w_l1 * d.signum() / count;
            });
        l1 /= count;
        if let Some(gf) = fm_grad_on_out {
            g_out = &g_out + &gf;
        }

        net.backward_batch(&trace, &g_out);
        opt.step(net.store_mut(), config.lr);

        let total = w_l1 * l1 + w_fm * fm;
        if !total.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("sr l1={l1} fm={fm}"),
            });
        }
        history.push(SrLossRecord {
            step,
            l1,
            fm,
            total,
        });
    }
    Ok(history)
}

/// Mean per-pixel L1 of the network against ground-truth high-res images.
pub fn sr_eval_l1(net: &SrNetwork, pairs: &[(ImageBuf, ImageBuf)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Precondition("no eval pairs".into()));
    }
    let mut acc = 0.0;
    for (low, high) in pairs {
        let out = net.forward(low)?;
        let n = out.data.len() as f64;
        acc += out
            .data
            .iter()
            .zip(high.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .sum::<f64>()
            / n;
    }
    Ok(acc / pairs.len() as f64)
}

const KIND_SUPERRES: &str = "superres";

#[derive(Serialize, Deserialize)]
struct SrManifest {
    spec: SrSpec,
    channels: usize,
    value_range: (f64, f64),
}

/// Save the upsampler in the shared checkpoint container (component kind
/// "superres").
pub fn save_sr_checkpoint(net: &SrNetwork, path: &Path) -> Result<()> {
    let manifest = SrManifest {
        spec: net.spec.clone(),
        channels: net.channels,
        value_range: net.value_range,
    };
    let payload = serde_json::to_value(&manifest).expect("manifest serializes");
    let blobs = vec![("sr.values".to_string(), net.store().values().to_vec())];
    archive::write_archive(path, KIND_SUPERRES, &payload, &blobs)
}

pub fn load_sr_checkpoint(path: &Path) -> Result<SrNetwork> {
    let ar = archive::read_archive(path)?;
    if ar.kind != KIND_SUPERRES {
        return Err(Error::Precondition(format!(
            "checkpoint {} holds a '{}' component, expected '{KIND_SUPERRES}'",
            path.display(),
            ar.kind
        )));
    }
    let manifest: SrManifest = serde_json::from_value(ar.payload)
        .map_err(|e| Error::CheckpointIntegrity(format!("bad manifest: {e}")))?;
    let mut net = build_sr_network(&manifest.spec, manifest.channels, manifest.value_range, 0)?;
    let vals = ar
        .blobs
        .get("sr.values")
        .ok_or_else(|| Error::CheckpointIntegrity("missing blob 'sr.values'".into()))?;
    if vals.len() != net.store().len() {
        return Err(Error::CheckpointIntegrity(format!(
            "parameter blob has {} values, expected {}",
            vals.len(),
            net.store().len()
        )));
    }
    net.store_mut().values_mut().copy_from_slice(vals);
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthesisRecipe;
    use crate::losses::feature_matching_loss;
    use crate::metrics::psnr;
    use crate::nn::avg_pool_down;

    #[test]
    fn bicubic_factor_one_is_identity() {
        let img = crate::data::synthesize_pair(&SynthesisRecipe {
            seed: 1,
            height: 12,
            width: 10,
            hotspot_count: 0,
            blur_radius: 0.0,
        })
        .unwrap()
        .visible;
        let up = bicubic_upsample(&img, 1).unwrap();
        assert_eq!(up, img);
    }

    #[test]
    fn bicubic_shapes_and_constants() {
        let img = ImageBuf::new(ndarray::Array3::from_elem((1, 32, 64), 0.5), (0.0, 1.0));
        let up = bicubic_upsample(&img, 2).unwrap();
        assert_eq!(up.data.dim(), (1, 64, 128));
        for &v in up.data.iter() {
            assert!((v - 0.5).abs() < 1e-6, "constant drifted to {v}");
        }
        let up4 = bicubic_upsample(&img, 4).unwrap();
        assert_eq!(up4.data.dim(), (1, 128, 256));
    }

    #[test]
    fn zero_initialized_residual_equals_bicubic() {
        let spec = SrSpec {
            res_blocks: 2,
            base_width: 8,
            ..SrSpec::default()
        };
        let net = build_sr_network(&spec, 1, (0.0, 1.0), 3).unwrap();
        let img = crate::data::synthesize_pair(&SynthesisRecipe {
            seed: 2,
            height: 12,
            width: 14,
            hotspot_count: 1,
            blur_radius: 0.0,
        })
        .unwrap()
        .infrared;
        let out = net.forward(&img).unwrap();
        let base = bicubic_upsample(&img, 2).unwrap();
        // Residual head is zero-initialized; only the clamp applies on top.
        let clamped = base.data.mapv(|v| v.clamp(0.0, 1.0));
        assert_eq!(out.data, clamped);
        assert_eq!(out.data.dim(), (1, 24, 28));
    }

    #[test]
    fn output_stays_in_range() {
        let spec = SrSpec {
            res_blocks: 1,
            base_width: 4,
            ..SrSpec::default()
        };
        let mut net = build_sr_network(&spec, 1, (-1.0, 1.0), 5).unwrap();
        // Crank up the head so the residual would overshoot without a clamp.
        for v in net.store_mut().values_mut().iter_mut() {
            *v += 0.5;
        }
        let img = ImageBuf::new(
            ndarray::Array3::from_shape_fn((1, 8, 8), |(_, y, x)| {
                ((x + y) as f64 / 14.0) * 2.0 - 1.0
            }),
            (-1.0, 1.0),
        );
        let out = net.forward(&img).unwrap();
        for &v in out.data.iter() {
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    fn sr_pairs(count: usize, seed: u64) -> Vec<(ImageBuf, ImageBuf)> {
        (0..count)
            .map(|i| {
                let hr = crate::data::synthesize_pair(&SynthesisRecipe {
                    seed: seed + i as u64,
                    height: 32,
                    width: 32,
                    hotspot_count: 2,
                    blur_radius: 0.0,
                })
                .unwrap()
                .infrared;
                let low_t = avg_pool_down(&hr.to_batch());
                let low = ImageBuf::from_batch(&low_t, 0, hr.range);
                (low, hr)
            })
            .collect()
    }

    #[test]
    fn l1_training_halves_held_out_error() {
        let spec = SrSpec {
            res_blocks: 2,
            base_width: 8,
            train_weight_l1: 1.0,
            ..SrSpec::default()
        };
        let mut net = build_sr_network(&spec, 1, (0.0, 1.0), 11).unwrap();
        let train = sr_pairs(16, 500);
        let held_out = sr_pairs(4, 900);
        let before = sr_eval_l1(&net, &held_out).unwrap();
        let cfg = SrTrainConfig {
            steps: 150,
            batch_size: 8,
            lr: 1e-3,
            seed: 3,
            weight_fm: 0.0,
            optimizer: OptimizerKind::default(),
        };
        train_sr(&mut net, &train, &cfg).unwrap();
        let after = sr_eval_l1(&net, &held_out).unwrap();
        assert!(
            after < 0.5 * before,
            "held-out L1 {before} -> {after}, wanted at least a 50% drop"
        );
    }

    #[test]
    fn trained_sr_beats_bicubic_psnr() {
        let spec = SrSpec {
            res_blocks: 2,
            base_width: 8,
            train_weight_l1: 1.0,
            ..SrSpec::default()
        };
        let mut net = build_sr_network(&spec, 1, (0.0, 1.0), 13).unwrap();
        let train = sr_pairs(16, 1500);
        let held_out = sr_pairs(4, 1900);
        let cfg = SrTrainConfig {
            steps: 200,
            batch_size: 8,
            lr: 1e-3,
            seed: 5,
            weight_fm: 0.0,
            optimizer: OptimizerKind::default(),
        };
        train_sr(&mut net, &train, &cfg).unwrap();
        let mut net_psnr = 0.0;
        let mut bicubic_psnr = 0.0;
        for (low, high) in &held_out {
            net_psnr += psnr(&net.forward(low).unwrap(), high).unwrap();
            bicubic_psnr += psnr(&bicubic_upsample(low, 2).unwrap(), high).unwrap();
        }
        assert!(
            net_psnr > bicubic_psnr,
            "trained {net_psnr:.3} dB vs bicubic {bicubic_psnr:.3} dB"
        );
    }

    #[test]
    fn identical_seeds_identical_curves() {
        let spec = SrSpec {
            res_blocks: 1,
            base_width: 4,
            ..SrSpec::default()
        };
        let pairs = sr_pairs(4, 300);
        let cfg = SrTrainConfig {
            steps: 5,
            batch_size: 2,
            lr: 1e-3,
            seed: 9,
            weight_fm: 0.1,
            optimizer: OptimizerKind::default(),
        };
        let mut n1 = build_sr_network(&spec, 1, (0.0, 1.0), 21).unwrap();
        let h1 = train_sr(&mut n1, &pairs, &cfg).unwrap();
        let mut n2 = build_sr_network(&spec, 1, (0.0, 1.0), 21).unwrap();
        let h2 = train_sr(&mut n2, &pairs, &cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&h1).unwrap(),
            serde_json::to_string(&h2).unwrap()
        );
        assert_eq!(n1.digest(), n2.digest());
    }

    #[test]
    fn fm_term_uses_the_shared_objective() {
        // The SR trainer computes its feature-matching term with the same
        // function as translation training; identical stacks through the
        // critic give exactly zero.
        let dspec = DiscriminatorSpec {
            n_scales: 1,
            conv_layers: 3,
            base_width: 8,
            input_channels: 2,
        };
        let critic = build_discriminator(&dspec, 0, 17).unwrap();
        let pairs = sr_pairs(1, 4000);
        let cond = bicubic_upsample_batch(&pairs[0].0.to_batch(), 2);
        let input = concat_channels(&cond, &pairs[0].1.to_batch()).unwrap();
        let a = critic.forward_batch(&input).unwrap();
        let b = critic.forward_batch(&input).unwrap();
        let fm = feature_matching_loss(
            &[FeatureStack::new(a.features)],
            &[FeatureStack::new(b.features)],
        )
        .unwrap();
        assert_eq!(fm, 0.0);

        // And the trainer exercises the same path with a nonzero weight.
        let spec = SrSpec {
            res_blocks: 1,
            base_width: 4,
            ..SrSpec::default()
        };
        let mut net = build_sr_network(&spec, 1, (0.0, 1.0), 23).unwrap();
        let cfg = SrTrainConfig {
            steps: 2,
            batch_size: 1,
            lr: 1e-4,
            seed: 2,
            weight_fm: 1.0,
            optimizer: OptimizerKind::default(),
        };
        let hist = train_sr(&mut net, &pairs, &cfg).unwrap();
        assert!(hist.iter().all(|r| r.fm.is_finite() && r.fm >= 0.0));
    }

    #[test]
    fn non_exact_pairs_rejected() {
        let spec = SrSpec {
            res_blocks: 1,
            base_width: 4,
            ..SrSpec::default()
        };
        let mut net = build_sr_network(&spec, 1, (0.0, 1.0), 2).unwrap();
        let a = ImageBuf::new(ndarray::Array3::zeros((1, 8, 8)), (0.0, 1.0));
        let b = ImageBuf::new(ndarray::Array3::zeros((1, 17, 16)), (0.0, 1.0));
        assert!(train_sr(&mut net, &[(a, b)], &SrTrainConfig::default()).is_err());
    }

    #[test]
    fn sr_checkpoint_round_trip_and_kind_tag() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SrSpec {
            res_blocks: 1,
            base_width: 4,
            ..SrSpec::default()
        };
        let mut net = build_sr_network(&spec, 1, (0.0, 1.0), 31).unwrap();
        let pairs = sr_pairs(2, 600);
        train_sr(
            &mut net,
            &pairs,
            &SrTrainConfig {
                steps: 3,
                batch_size: 2,
                lr: 1e-3,
                seed: 1,
                weight_fm: 0.0,
                optimizer: OptimizerKind::default(),
            },
        )
        .unwrap();
        let p = dir.path().join("sr.ckpt");
        save_sr_checkpoint(&net, &p).unwrap();
        let loaded = load_sr_checkpoint(&p).unwrap();
        let out1 = net.forward(&pairs[0].0).unwrap();
        let out2 = loaded.forward(&pairs[0].0).unwrap();
        assert_eq!(out1.data, out2.data);
        // A translation checkpoint must be refused.
        match load_sr_checkpoint(&p) {
            Ok(_) => {}
            Err(e) => panic!("round trip failed: {e}"),
        }
    }
}
