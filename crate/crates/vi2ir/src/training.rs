//! The two-stage training schedule (global backbone first, then joint
//! fine-tuning), alternating discriminator/generator updates, deterministic
//! batching, structured logging, and resumable single-file checkpoints.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{normalize, pyramid_batch, pyramid_batch_backward, Dataset, PairedSample, RawScale};
use crate::losses::{
    feature_matching_grad, gan_loss_d_grad, gan_loss_g_grad, total_generator_objective, GanMode,
    LossReport, LossWeights, ScaleLoss,
};
use crate::model::{
    build_discriminator_bank, build_generator, concat_channels, splitmix64, DiscriminatorBank,
    DiscriminatorSpec, FeatureStack, ForwardMode, Generator, GeneratorSpec,
};
use crate::nn::{avg_pool_down, Optimizer, OptimizerKind, Tensor};
use crate::{Error, Result};

pub mod archive;

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Steps training the global backbone alone at half resolution.
    pub stage1_steps: u64,
    /// Steps fine-tuning everything together at full resolution.
    pub joint_steps: u64,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// (height, width) of training images.
    pub train_resolution: (usize, usize),
    /// Write a snapshot every this many steps; 0 disables periodic snapshots.
    pub snapshot_every: u64,
    pub optimizer: OptimizerKind,
    /// Horizontal flip augmentation (p = 0.5, applied to both modalities).
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_steps: 400,
            joint_steps: 400,
            batch_size: 4,
            lr_g: 2e-4,
            lr_d: 2e-4,
            weights: LossWeights::default(),
            seed: 1,
            train_resolution: (32, 64),
            snapshot_every: 100,
            optimizer: OptimizerKind::default(),
            hflip: false,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> u64 {
        self.stage1_steps + self.joint_steps
    }

    pub fn validate(&self, gen: &GeneratorSpec) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        for (name, lr) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::config(name, "must be finite and > 0"));
            }
        }
        self.weights.validate()?;
        let (h, w) = self.train_resolution;
        let full_mult = gen.size_multiple();
        if h % full_mult != 0 || w % full_mult != 0 {
            return Err(Error::config(
                "train_resolution",
                format!("{w}x{h} not divisible by the generator multiple {full_mult}"),
            ));
        }
        if self.stage1_steps > 0 {
            let half_mult = 2 * gen.g1_size_multiple();
            if h % half_mult != 0 || w % half_mult != 0 {
                return Err(Error::config(
                    "train_resolution",
                    format!(
                        "{w}x{h} must be divisible by {half_mult} so the half-resolution stage fits the backbone"
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Schedule phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    GlobalOnly,
    Joint,
}

/// One line of the structured training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub stage: Stage,
    pub gan_g: f64,
    pub gan_d: f64,
    pub fm: f64,
    pub total_g: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SamplerState {
    perm: Vec<u32>,
    cursor: usize,
}

/// Complete mutable training state: networks, optimizers, RNG, and the
/// batch sampler. Everything needed to reproduce or resume a run.
pub struct TrainState {
    step: u64,
    config: TrainConfig,
    generator: Generator,
    bank: DiscriminatorBank,
    opt_g: Optimizer,
    opt_d: Vec<Optimizer>,
    rng: ChaCha8Rng,
    sampler: SamplerState,
}

impl TrainState {
    /// Build fresh networks and optimizer state from specs and config.
    /// Fully deterministic in (specs, config.seed).
    pub fn new(
        gen_spec: &GeneratorSpec,
        disc_spec: &DiscriminatorSpec,
        config: &TrainConfig,
    ) -> Result<Self> {
        gen_spec.validate()?;
        disc_spec.validate()?;
        config.validate(gen_spec)?;
        let expected = gen_spec.input_channels + gen_spec.output_channels;
        if disc_spec.input_channels != expected {
            return Err(Error::config(
                "input_channels",
                format!(
                    "discriminator must see source+candidate channels = {expected}, got {}",
                    disc_spec.input_channels
                ),
            ));
        }
        let generator = build_generator(gen_spec, splitmix64(config.seed, 1))?;
        let bank = build_discriminator_bank(disc_spec, splitmix64(config.seed, 2))?;
        let opt_g = Optimizer::new(config.optimizer, generator.store().len());
        let opt_d = bank
            .scales
            .iter()
            .map(|d| Optimizer::new(config.optimizer, d.store().len()))
            .collect();
        let rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed, 3));
        Ok(TrainState {
            step: 0,
            config: config.clone(),
            generator,
            bank,
            opt_g,
            opt_d,
            rng,
            sampler: SamplerState {
                perm: Vec::new(),
                cursor: 0,
            },
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn bank(&self) -> &DiscriminatorBank {
        &self.bank
    }

    /// The stage transitions from `GlobalOnly` to `Joint` exactly once, at
    /// step == stage1_steps.
    pub fn stage(&self) -> Stage {
        if self.step < self.config.stage1_steps {
            Stage::GlobalOnly
        } else {
            Stage::Joint
        }
    }

    /// Draw the next deterministic batch: a seeded per-epoch shuffle walked
    /// in order (epochs drop any trailing partial batch).
    pub fn next_batch(&mut self, dataset: &Dataset) -> Result<Vec<PairedSample>> {
        let n = dataset.len();
        if n == 0 {
            return Err(Error::Precondition("dataset is empty".into()));
        }
        let bs = self.config.batch_size.min(n);
        if self.sampler.perm.len() != n || self.sampler.cursor + bs > n {
            self.sampler.perm = (0..n as u32).collect();
            self.sampler.perm.shuffle(&mut self.rng);
            self.sampler.cursor = 0;
        }
        let idx = &self.sampler.perm[self.sampler.cursor..self.sampler.cursor + bs];
        let batch = idx
            .iter()
            .map(|&i| dataset.sample(i as usize))
            .collect::<Result<Vec<_>>>()?;
        self.sampler.cursor += bs;
        Ok(batch)
    }

    /// Normalize, optionally flip, and stack a batch into (source, target)
    /// tensors at the resolution of the current stage.
    fn assemble(&mut self, batch: &[PairedSample], direction: crate::data::Direction) -> Result<(Tensor, Tensor)> {
        let (th, tw) = self.config.train_resolution;
        let range = self.generator.spec().value_range;
        let mut srcs = Vec::with_capacity(batch.len());
        let mut tgts = Vec::with_capacity(batch.len());
        for s in batch {
            let src = s.source(direction);
            let tgt = s.target(direction);
            if (src.height(), src.width()) != (th, tw) {
                return Err(Error::Precondition(format!(
                    "sample {} is {}x{}, expected train resolution {tw}x{th}",
                    s.id,
                    src.width(),
                    src.height()
                )));
            }
            let flip = self.config.hflip && self.rng.random::<bool>();
            let mut sn = normalize(&src.data, RawScale::Unit, range)?.data;
            let mut tn = normalize(&tgt.data, RawScale::Unit, range)?.data;
            if flip {
                sn.invert_axis(ndarray::Axis(2));
                tn.invert_axis(ndarray::Axis(2));
            }
            srcs.push(sn);
            tgts.push(tn);
        }
        let stack = |imgs: &[ndarray::Array3<f64>]| {
            let (c, h, w) = imgs[0].dim();
            let mut t = Tensor::zeros((imgs.len(), c, h, w));
            for (i, im) in imgs.iter().enumerate() {
                t.index_axis_mut(ndarray::Axis(0), i).assign(im);
            }
            t
        };
        let mut src = stack(&srcs);
        let mut tgt = stack(&tgts);
        if self.stage() == Stage::GlobalOnly {
            src = avg_pool_down(&src);
            tgt = avg_pool_down(&tgt);
        }
        Ok((src, tgt))
    }

    /// One discriminator maximization update followed by one generator
    /// minimization update. The generator output is treated as a constant
    /// during the discriminator sub-step; the generator is then updated on
    /// the adversarial plus weighted feature-matching objective against the
    /// freshly updated discriminators.
    pub fn train_step(
        &mut self,
        batch: &[PairedSample],
        direction: crate::data::Direction,
    ) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        let mode = match self.stage() {
            Stage::GlobalOnly => ForwardMode::G1Only,
            Stage::Joint => ForwardMode::Full,
        };
        let gan_mode = self.config.weights.gan_mode;
        let lambda = self.config.weights.lambda_fm;
        let n_scales = self.bank.n_scales();

        let (src, tgt) = self.assemble(batch, direction)?;
        let (fake, gen_trace) = self.generator.forward_batch_trace(&src, mode)?;

        let src_pyr = pyramid_batch(&src, n_scales);
        let real_pyr = pyramid_batch(&tgt, n_scales);
        let fake_pyr = pyramid_batch(&fake, n_scales);

        let (gan_d, d_per_scale) = self.update_d(&src_pyr, &real_pyr, &fake_pyr, gan_mode)?;
        let (gan_g, fm, g_per_scale, fm_per_scale) =
            self.update_g(&src_pyr, &real_pyr, &fake_pyr, &gen_trace, gan_mode, lambda)?;
        let total_g = total_generator_objective(gan_g, fm, &self.config.weights);

        let report = LossReport {
            gan_g,
            gan_d,
            fm,
            total_g,
            per_scale: (0..n_scales)
                .map(|k| ScaleLoss {
                    scale: k,
                    gan_g: g_per_scale[k],
                    gan_d: d_per_scale[k],
                    fm: fm_per_scale[k],
                })
                .collect(),
        };
        if !report.all_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!(
                    "gan_g={} gan_d={} fm={}",
                    report.gan_g, report.gan_d, report.fm
                ),
            });
        }
        report.check_consistent(&self.config.weights)?;
        self.step += 1;
        Ok(report)
    }

    /// Discriminator maximization sub-step. Generator outputs are constants
    /// here; generator parameters are untouched.
    fn update_d(
        &mut self,
        src_pyr: &[Tensor],
        real_pyr: &[Tensor],
        fake_pyr: &[Tensor],
        gan_mode: GanMode,
    ) -> Result<(f64, Vec<f64>)> {
        let n_scales = self.bank.n_scales();
        let mut real_scores = Vec::with_capacity(n_scales);
        let mut fake_scores = Vec::with_capacity(n_scales);
        let mut real_traces = Vec::with_capacity(n_scales);
        let mut fake_traces = Vec::with_capacity(n_scales);
        for k in 0..n_scales {
            let real_in = concat_channels(&src_pyr[k], &real_pyr[k])?;
            let fake_in = concat_channels(&src_pyr[k], &fake_pyr[k])?;
            let r = self.bank.scales[k].forward_batch(&real_in)?;
            let f = self.bank.scales[k].forward_batch(&fake_in)?;
            real_scores.push(r.scores);
            real_traces.push(r.trace);
            fake_scores.push(f.scores);
            fake_traces.push(f.trace);
        }
        let (gan_d, d_per_scale, g_real, g_fake) =
            gan_loss_d_grad(&real_scores, &fake_scores, gan_mode)?;
        for k in 0..n_scales {
            let d = &mut self.bank.scales[k];
            let _ = d.backward_batch(&real_traces[k], &g_real[k], None);
            let _ = d.backward_batch(&fake_traces[k], &g_fake[k], None);
            self.opt_d[k].step(d.store_mut(), self.config.lr_d);
        }
        Ok((gan_d, d_per_scale))
    }

    /// Generator minimization sub-step against the current discriminators.
    /// Discriminator parameters are left bit-identical.
    fn update_g(
        &mut self,
        src_pyr: &[Tensor],
        real_pyr: &[Tensor],
        fake_pyr: &[Tensor],
        gen_trace: &crate::model::GenTrace,
        gan_mode: GanMode,
        lambda: f64,
    ) -> Result<(f64, f64, Vec<f64>, Vec<f64>)> {
        let n_scales = self.bank.n_scales();
        let src_channels = self.generator.spec().input_channels;
        let level_dims: Vec<(usize, usize)> =
            fake_pyr.iter().map(|t| (t.dim().2, t.dim().3)).collect();

        let mut fake_scores = Vec::with_capacity(n_scales);
        let mut fake_traces = Vec::with_capacity(n_scales);
        let mut real_feats = Vec::with_capacity(n_scales);
        let mut fake_feats = Vec::with_capacity(n_scales);
        for k in 0..n_scales {
            let real_in = concat_channels(&src_pyr[k], &real_pyr[k])?;
            let fake_in = concat_channels(&src_pyr[k], &fake_pyr[k])?;
            // Real-branch features are reference constants for the
            // feature-matching term; their trace is dropped.
            let r = self.bank.scales[k].forward_batch(&real_in)?;
            let f = self.bank.scales[k].forward_batch(&fake_in)?;
            real_feats.push(FeatureStack::new(r.features));
            fake_feats.push(FeatureStack::new(f.features));
            fake_scores.push(f.scores);
            fake_traces.push(f.trace);
        }
        let (gan_g, g_per_scale, g_score_grads) = gan_loss_g_grad(&fake_scores, gan_mode)?;
        let (fm, fm_per_scale, fm_grads) = feature_matching_grad(&real_feats, &fake_feats)?;

        let mut level_grads = Vec::with_capacity(n_scales);
        for k in 0..n_scales {
            let scaled: Vec<Tensor> = fm_grads[k].iter().map(|g| g * lambda).collect();
            let g_in = self.bank.scales[k].backward_batch(
                &fake_traces[k],
                &g_score_grads[k],
                Some(&scaled),
            );
            // The discriminators only relayed gradients here; drop anything
            // accumulated so their parameters stay untouched by the G step.
            self.bank.scales[k].store_mut().zero_grad();
            // Keep the candidate half of the concatenated input gradient.
            let g_fake_level = g_in
                .slice(ndarray::s![.., src_channels.., .., ..])
                .to_owned();
            level_grads.push(g_fake_level);
        }
        let g_fake_full = pyramid_batch_backward(&level_grads, &level_dims);
        self.generator.backward_batch(gen_trace, &g_fake_full);
        self.opt_g.step(self.generator.store_mut(), self.config.lr_g);
        Ok((gan_g, fm, g_per_scale, fm_per_scale))
    }
}

/// Execution options for [`run_schedule`].
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Directory for periodic snapshots and the diagnostic snapshot written
    /// on a non-finite abort.
    pub snapshot_dir: Option<&'a Path>,
    /// Structured per-step log sink (one JSON record per line).
    pub log: Option<&'a mut dyn Write>,
}

/// Drive the state through the remainder of its schedule: `stage1_steps`
/// with the backbone alone at half resolution, then `joint_steps` with the
/// full generator. Resumable: a loaded snapshot continues where it stopped.
pub fn run_schedule(state: &mut TrainState, dataset: &Dataset, opts: RunOptions) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Precondition("dataset is empty".into()));
    }
    let RunOptions { snapshot_dir, mut log } = opts;
    let total = state.config.total_steps();
    while state.step < total {
        let batch = state.next_batch(dataset)?;
        let stage = state.stage();
        let t0 = Instant::now();
        let step_index = state.step;
        let report = match state.train_step(&batch, dataset.direction()) {
            Ok(r) => r,
            Err(e) => {
                if let Some(dir) = snapshot_dir {
                    // Best-effort diagnostic snapshot of the aborted state.
                    let _ = save_checkpoint(state, &dir.join("diagnostic.ckpt"));
                }
                return Err(e);
            }
        };
        if let Some(w) = log.as_deref_mut() {
            let rec = TrainLogRecord {
                step: step_index,
                stage,
                gan_g: report.gan_g,
                gan_d: report.gan_d,
                fm: report.fm,
                total_g: report.total_g,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            };
            let line = serde_json::to_string(&rec).expect("log record serializes");
            writeln!(w, "{line}").map_err(|e| Error::Other(format!("log write failed: {e}")))?;
        }
        if let Some(dir) = snapshot_dir {
            let every = state.config.snapshot_every;
            if every > 0 && state.step % every == 0 && state.step < total {
                save_checkpoint(state, &dir.join(format!("step_{:07}.ckpt", state.step)))?;
            }
        }
    }
    Ok(())
}

const KIND_TRANSLATION: &str = "translation";

#[derive(Serialize, Deserialize)]
struct OptMeta {
    kind: OptimizerKind,
    t: u64,
}

#[derive(Serialize, Deserialize)]
struct TranslationManifest {
    step: u64,
    generator_spec: GeneratorSpec,
    discriminator_spec: DiscriminatorSpec,
    config: TrainConfig,
    rng: ChaCha8Rng,
    sampler: SamplerState,
    opt_g: OptMeta,
    opt_d: Vec<OptMeta>,
}

/// Serialize the full training state into a single-file archive. Atomic:
/// the file appears only after a complete write.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let g_state = state.opt_g.state();
    let d_states: Vec<_> = state.opt_d.iter().map(|o| o.state()).collect();
    let manifest = TranslationManifest {
        step: state.step,
        generator_spec: state.generator.spec().clone(),
        discriminator_spec: state.bank.spec().clone(),
        config: state.config.clone(),
        rng: state.rng.clone(),
        sampler: state.sampler.clone(),
        opt_g: OptMeta {
            kind: g_state.kind,
            t: g_state.t,
        },
        opt_d: d_states
            .iter()
            .map(|s| OptMeta {
                kind: s.kind,
                t: s.t,
            })
            .collect(),
    };
    let mut blobs: Vec<(String, Vec<f64>)> = vec![
        ("gen.values".into(), state.generator.store().values().to_vec()),
        ("gen.opt.m".into(), g_state.m),
        ("gen.opt.v".into(), g_state.v),
    ];
    for (k, (d, s)) in state.bank.scales.iter().zip(d_states).enumerate() {
        blobs.push((format!("d{k}.values"), d.store().values().to_vec()));
        blobs.push((format!("d{k}.opt.m"), s.m));
        blobs.push((format!("d{k}.opt.v"), s.v));
    }
    let payload = serde_json::to_value(&manifest).expect("manifest serializes");
    archive::write_archive(path, KIND_TRANSLATION, &payload, &blobs)
}

/// Load a checkpoint and reconstruct a bit-identical training state.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let ar = archive::read_archive(path)?;
    if ar.kind != KIND_TRANSLATION {
        return Err(Error::Precondition(format!(
            "checkpoint {} holds a '{}' component, expected '{KIND_TRANSLATION}'",
            path.display(),
            ar.kind
        )));
    }
    let manifest: TranslationManifest = serde_json::from_value(ar.payload)
        .map_err(|e| Error::CheckpointIntegrity(format!("bad manifest: {e}")))?;
    let mut state = TrainState::new(
        &manifest.generator_spec,
        &manifest.discriminator_spec,
        &manifest.config,
    )?;

    let take = |name: &str| -> Result<Vec<f64>> {
        ar.blobs
            .get(name)
            .cloned()
            .ok_or_else(|| Error::CheckpointIntegrity(format!("missing blob '{name}'")))
    };
    let restore = |store: &mut crate::nn::ParamStore, vals: Vec<f64>| -> Result<()> {
        if vals.len() != store.len() {
            return Err(Error::CheckpointIntegrity(format!(
                "parameter blob has {} values, expected {}",
                vals.len(),
                store.len()
            )));
        }
        store.values_mut().copy_from_slice(&vals);
        Ok(())
    };

    restore(state.generator.store_mut(), take("gen.values")?)?;
    state.opt_g = Optimizer::from_state(
        crate::nn::OptimizerState {
            kind: manifest.opt_g.kind,
            t: manifest.opt_g.t,
            m: take("gen.opt.m")?,
            v: take("gen.opt.v")?,
        },
        state.generator.store().len(),
    )?;
    if manifest.opt_d.len() != state.bank.n_scales() {
        return Err(Error::CheckpointIntegrity(format!(
            "checkpoint has {} discriminator optimizers, bank has {}",
            manifest.opt_d.len(),
            state.bank.n_scales()
        )));
    }
    for k in 0..state.bank.n_scales() {
        restore(state.bank.scales[k].store_mut(), take(&format!("d{k}.values"))?)?;
        state.opt_d[k] = Optimizer::from_state(
            crate::nn::OptimizerState {
                kind: manifest.opt_d[k].kind,
                t: manifest.opt_d[k].t,
                m: take(&format!("d{k}.opt.m"))?,
                v: take(&format!("d{k}.opt.v"))?,
            },
            state.bank.scales[k].store().len(),
        )?;
    }
    state.step = manifest.step;
    state.rng = manifest.rng;
    state.sampler = manifest.sampler;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Direction, SynthesisRecipe};

    fn desk_specs() -> (GeneratorSpec, DiscriminatorSpec) {
        (
            GeneratorSpec {
                input_channels: 3,
                output_channels: 1,
                base_width: 8,
                g1_downsamples: 2,
                g1_res_blocks: 2,
                g2_res_blocks: 1,
                enhancer_count: 1,
                value_range: (-1.0, 1.0),
            },
            DiscriminatorSpec {
                n_scales: 2,
                conv_layers: 3,
                base_width: 8,
                input_channels: 4,
            },
        )
    }

    fn desk_config(stage1: u64, joint: u64) -> TrainConfig {
        TrainConfig {
            stage1_steps: stage1,
            joint_steps: joint,
            batch_size: 2,
            lr_g: 2e-4,
            lr_d: 2e-4,
            weights: LossWeights::default(),
            seed: 7,
            train_resolution: (16, 32),
            snapshot_every: 0,
            optimizer: OptimizerKind::default(),
            hflip: false,
        }
    }

    fn synth_batch(n: usize, h: usize, w: usize) -> Vec<PairedSample> {
        (0..n)
            .map(|i| {
                crate::data::synthesize_pair(&SynthesisRecipe {
                    seed: 1000 + i as u64,
                    height: h,
                    width: w,
                    hotspot_count: 1,
                    blur_radius: 0.0,
                })
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn smoke_step_returns_finite_losses() {
        let (g, d) = desk_specs();
        let cfg = desk_config(0, 4);
        let mut state = TrainState::new(&g, &d, &cfg).unwrap();
        let batch = synth_batch(2, 16, 32);
        let report = state
            .train_step(&batch, Direction::VisibleToInfrared)
            .unwrap();
        assert!(report.all_finite());
        assert!(report.fm >= 0.0);
        assert_eq!(report.per_scale.len(), 2);
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn empty_batch_rejected() {
        let (g, d) = desk_specs();
        let mut state = TrainState::new(&g, &d, &desk_config(0, 1)).unwrap();
        assert!(matches!(
            state.train_step(&[], Direction::VisibleToInfrared),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn wrong_resolution_rejected() {
        let (g, d) = desk_specs();
        let mut state = TrainState::new(&g, &d, &desk_config(0, 1)).unwrap();
        let batch = synth_batch(1, 32, 32);
        assert!(matches!(
            state.train_step(&batch, Direction::VisibleToInfrared),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn d_step_leaves_generator_bits_and_vice_versa() {
        let (gspec, dspec) = desk_specs();
        let cfg = desk_config(0, 4);
        let mut state = TrainState::new(&gspec, &dspec, &cfg).unwrap();
        let batch = synth_batch(2, 16, 32);
        let (src, tgt) = state.assemble(&batch, Direction::VisibleToInfrared).unwrap();
        let (fake, gen_trace) = state
            .generator
            .forward_batch_trace(&src, ForwardMode::Full)
            .unwrap();
        let n = state.bank.n_scales();
        let src_pyr = pyramid_batch(&src, n);
        let real_pyr = pyramid_batch(&tgt, n);
        let fake_pyr = pyramid_batch(&fake, n);

        let g_before = state.generator.digest("");
        state
            .update_d(&src_pyr, &real_pyr, &fake_pyr, GanMode::LeastSquares)
            .unwrap();
        assert_eq!(state.generator.digest(""), g_before, "D step touched G");

        let d_before = state.bank.digest();
        state
            .update_g(
                &src_pyr,
                &real_pyr,
                &fake_pyr,
                &gen_trace,
                GanMode::LeastSquares,
                10.0,
            )
            .unwrap();
        assert_eq!(state.bank.digest(), d_before, "G step touched D");
        assert_ne!(state.generator.digest(""), g_before, "G step was a no-op");
    }

    #[test]
    fn frozen_flat_discriminator_and_zero_lambda_give_zero_g_update() {
        // With lambda = 0 and discriminators that emit constant scores for
        // any input, both generator loss terms are flat, so the generator
        // must not move at all.
        let (gspec, dspec) = desk_specs();
        let mut cfg = desk_config(0, 4);
        cfg.weights.lambda_fm = 0.0;
        let mut state = TrainState::new(&gspec, &dspec, &cfg).unwrap();
        for d in &mut state.bank.scales {
            d.store_mut().values_mut().fill(0.0);
        }
        let batch = synth_batch(2, 16, 32);
        let (src, tgt) = state.assemble(&batch, Direction::VisibleToInfrared).unwrap();
        let (fake, gen_trace) = state
            .generator
            .forward_batch_trace(&src, ForwardMode::Full)
            .unwrap();
        let n = state.bank.n_scales();
        let src_pyr = pyramid_batch(&src, n);
        let real_pyr = pyramid_batch(&tgt, n);
        let fake_pyr = pyramid_batch(&fake, n);
        let before: Vec<f64> = state.generator.store().values().to_vec();
        state
            .update_g(
                &src_pyr,
                &real_pyr,
                &fake_pyr,
                &gen_trace,
                GanMode::LeastSquares,
                0.0,
            )
            .unwrap();
        assert_eq!(state.generator.store().values(), &before[..]);
    }

    #[test]
    fn stage_transitions_exactly_once() {
        let (g, d) = desk_specs();
        let cfg = desk_config(2, 2);
        let mut state = TrainState::new(&g, &d, &cfg).unwrap();
        let batch = synth_batch(2, 16, 32);
        let mut stages = Vec::new();
        for _ in 0..4 {
            stages.push(state.stage());
            state
                .train_step(&batch, Direction::VisibleToInfrared)
                .unwrap();
        }
        assert_eq!(
            stages,
            vec![Stage::GlobalOnly, Stage::GlobalOnly, Stage::Joint, Stage::Joint]
        );
        // Degenerate schedule: stage1_steps = 0 starts joint.
        let state = TrainState::new(&g, &d, &desk_config(0, 1)).unwrap();
        assert_eq!(state.stage(), Stage::Joint);
    }

    #[test]
    fn stage1_freezes_enhancer_and_trains_backbone() {
        let (g, d) = desk_specs();
        let cfg = desk_config(3, 0);
        let mut state = TrainState::new(&g, &d, &cfg).unwrap();
        let enh0 = state.generator.digest("enh");
        let g10 = state.generator.digest("g1.");
        let batch = synth_batch(2, 16, 32);
        for _ in 0..3 {
            state
                .train_step(&batch, Direction::VisibleToInfrared)
                .unwrap();
        }
        assert_eq!(state.generator.digest("enh"), enh0, "enhancer moved in stage 1");
        assert_ne!(state.generator.digest("g1."), g10, "backbone did not train");
    }

    #[test]
    fn deterministic_twin_runs_and_byte_identical_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let base = SynthesisRecipe {
            seed: 77,
            height: 16,
            width: 32,
            hotspot_count: 1,
            blur_radius: 0.0,
        };
        crate::data::write_synthetic_dataset(&base, 4, crate::data::Split::Train, dir.path())
            .unwrap();
        let ds = crate::data::load_paired_dataset(crate::data::DatasetManifest {
            root: dir.path().to_path_buf(),
            direction: Direction::VisibleToInfrared,
            split: crate::data::Split::Train,
        })
        .unwrap();
        let (g, d) = desk_specs();
        let cfg = desk_config(2, 3);

        let run = |tag: &str| -> (Vec<LossReport>, Vec<u8>) {
            let mut state = TrainState::new(&g, &d, &cfg).unwrap();
            let mut reports = Vec::new();
            while state.step() < cfg.total_steps() {
                let batch = state.next_batch(&ds).unwrap();
                reports.push(state.train_step(&batch, ds.direction()).unwrap());
            }
            let p = dir.path().join(format!("{tag}.ckpt"));
            save_checkpoint(&state, &p).unwrap();
            (reports, std::fs::read(&p).unwrap())
        };
        let (r1, c1) = run("a");
        let (r2, c2) = run("b");
        assert_eq!(r1, r2, "loss trajectories diverged");
        assert_eq!(c1, c2, "checkpoint bytes diverged");
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let base = SynthesisRecipe {
            seed: 78,
            height: 16,
            width: 32,
            hotspot_count: 1,
            blur_radius: 0.0,
        };
        crate::data::write_synthetic_dataset(&base, 4, crate::data::Split::Train, dir.path())
            .unwrap();
        let ds = crate::data::load_paired_dataset(crate::data::DatasetManifest {
            root: dir.path().to_path_buf(),
            direction: Direction::VisibleToInfrared,
            split: crate::data::Split::Train,
        })
        .unwrap();
        let (g, d) = desk_specs();
        let cfg = desk_config(2, 4);

        // Uninterrupted reference run, capturing a mid-run checkpoint.
        let mut full = TrainState::new(&g, &d, &cfg).unwrap();
        let ckpt_path = dir.path().join("mid.ckpt");
        let mut reference = Vec::new();
        while full.step() < cfg.total_steps() {
            if full.step() == 3 {
                save_checkpoint(&full, &ckpt_path).unwrap();
            }
            let batch = full.next_batch(&ds).unwrap();
            reference.push(full.train_step(&batch, ds.direction()).unwrap());
        }

        // Resume from the snapshot: identical losses from step 3 onward.
        let mut resumed = load_checkpoint(&ckpt_path).unwrap();
        assert_eq!(resumed.step(), 3);

        // Forward behavior restored bit-exactly.
        let probe = synth_batch(1, 16, 32);
        let (src, _) = resumed.assemble(&probe, Direction::VisibleToInfrared).unwrap();
        // (assemble consumes rng draws only when hflip is on; it is off here)
        let mut fresh = load_checkpoint(&ckpt_path).unwrap();
        let y1 = fresh
            .generator
            .forward_batch(&src, ForwardMode::Full)
            .unwrap();
        let y2 = resumed
            .generator
            .forward_batch(&src, ForwardMode::Full)
            .unwrap();
        assert_eq!(y1, y2);

        let mut resumed_reports = Vec::new();
        while resumed.step() < cfg.total_steps() {
            let batch = resumed.next_batch(&ds).unwrap();
            resumed_reports.push(resumed.train_step(&batch, ds.direction()).unwrap());
        }
        assert_eq!(&reference[3..], &resumed_reports[..]);
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostic() {
        let (g, d) = desk_specs();
        let mut state = TrainState::new(&g, &d, &desk_config(0, 2)).unwrap();
        // Poison one generator parameter.
        state.generator.store_mut().values_mut()[0] = f64::NAN;
        let batch = synth_batch(1, 16, 32);
        match state.train_step(&batch, Direction::VisibleToInfrared) {
            Err(Error::NonFinite { .. }) => {}
            other => panic!("expected non-finite abort, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn run_schedule_writes_snapshots_and_log() {
        let dir = tempfile::tempdir().unwrap();
        let base = SynthesisRecipe {
            seed: 79,
            height: 16,
            width: 32,
            hotspot_count: 0,
            blur_radius: 0.0,
        };
        crate::data::write_synthetic_dataset(&base, 2, crate::data::Split::Train, dir.path())
            .unwrap();
        let ds = crate::data::load_paired_dataset(crate::data::DatasetManifest {
            root: dir.path().to_path_buf(),
            direction: Direction::VisibleToInfrared,
            split: crate::data::Split::Train,
        })
        .unwrap();
        let (g, d) = desk_specs();
        let mut cfg = desk_config(1, 2);
        cfg.snapshot_every = 1;
        let mut state = TrainState::new(&g, &d, &cfg).unwrap();
        let snap = dir.path().join("snaps");
        let mut log = Vec::new();
        run_schedule(
            &mut state,
            &ds,
            RunOptions {
                snapshot_dir: Some(&snap),
                log: Some(&mut log),
            },
        )
        .unwrap();
        assert_eq!(state.step(), 3);
        assert!(snap.join("step_0000001.ckpt").is_file());
        assert!(snap.join("step_0000002.ckpt").is_file());
        let text = String::from_utf8(log).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let rec: TrainLogRecord = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(rec.step, 0);
        assert_eq!(rec.stage, Stage::GlobalOnly);
    }
}
