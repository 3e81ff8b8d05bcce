//! The coarse-to-fine generator (global backbone plus local enhancers fused
//! by element-wise sum) and the bank of identically structured patch
//! discriminators applied to an image pyramid.

use ndarray::{Array2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ImageBuf, ImagePyramid};
use crate::nn::{
    avg_pool_down, Conv2d, ConvTranspose2d, InstanceNorm2d, Layer, PadKind, ParamStore,
    ResBlock, ResChain, Stack, StackTrace, Tensor,
};
use crate::{Error, Result};

/// Std-dev of the seeded Gaussian weight init.
pub const INIT_STD: f64 = 0.02;

/// Architecture hyperparameters of the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub input_channels: usize,
    pub output_channels: usize,
    /// First-layer channel count of the global backbone.
    pub base_width: usize,
    pub g1_downsamples: usize,
    pub g1_res_blocks: usize,
    pub g2_res_blocks: usize,
    /// 0 = global backbone only; each enhancer doubles output resolution
    /// per image dimension.
    pub enhancer_count: usize,
    /// Output activation interval.
    pub value_range: (f64, f64),
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            input_channels: 3,
            output_channels: 3,
            base_width: 64,
            g1_downsamples: 4,
            g1_res_blocks: 9,
            g2_res_blocks: 3,
            enhancer_count: 1,
            value_range: (-1.0, 1.0),
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::config("input_channels", "must be >= 1"));
        }
        if self.output_channels == 0 {
            return Err(Error::config("output_channels", "must be >= 1"));
        }
        if self.base_width == 0 {
            return Err(Error::config("base_width", "must be >= 1"));
        }
        if self.g1_downsamples == 0 {
            return Err(Error::config("g1_downsamples", "must be >= 1"));
        }
        if self.g1_res_blocks == 0 {
            return Err(Error::config("g1_res_blocks", "must be >= 1"));
        }
        if self.enhancer_count > 2 {
            return Err(Error::config(
                "enhancer_count",
                format!("must be 0, 1 or 2, got {}", self.enhancer_count),
            ));
        }
        if self.enhancer_count > 0 && self.g2_res_blocks == 0 {
            return Err(Error::config("g2_res_blocks", "must be >= 1 when enhancers exist"));
        }
        if self.base_width % (1 << self.enhancer_count) != 0 {
            return Err(Error::config(
                "base_width",
                format!(
                    "must be divisible by 2^enhancer_count = {}",
                    1 << self.enhancer_count
                ),
            ));
        }
        if !(self.value_range.0 < self.value_range.1)
            || !self.value_range.0.is_finite()
            || !self.value_range.1.is_finite()
        {
            return Err(Error::config("value_range", "must be a finite interval (lo, hi)"));
        }
        Ok(())
    }

    /// Spatial dims of a full-mode input must divide this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.g1_downsamples + self.enhancer_count)
    }

    /// Divisibility required by the backbone alone (stage-1 inputs).
    pub fn g1_size_multiple(&self) -> usize {
        1 << self.g1_downsamples
    }
}

/// The three principal sub-networks of one generator stage: a downsampling
/// front-end, a residual core, and a transposed-convolution back-end.
#[derive(Debug, Clone)]
pub struct GeneratorStage {
    pub frontend: Stack,
    pub res_blocks: ResChain,
    pub backend: Stack,
}

#[derive(Debug, Clone)]
struct Enhancer {
    stage: GeneratorStage,
    /// Output head; present only on the finest enhancer.
    egress: Option<Stack>,
}

/// Coarse-to-fine generator. Owns its parameters; forward passes are pure.
#[derive(Debug, Clone)]
pub struct Generator {
    spec: GeneratorSpec,
    store: ParamStore,
    g1: GeneratorStage,
    g1_egress: Stack,
    enhancers: Vec<Enhancer>,
}

fn res_chain(
    store: &mut ParamStore,
    prefix: &str,
    count: usize,
    width: usize,
    init: &mut dyn FnMut() -> f64,
) -> ResChain {
    let blocks = (0..count)
        .map(|b| ResBlock {
            body: Stack::new(vec![
                Layer::Conv(Conv2d::new(
                    store,
                    &format!("{prefix}.{b}.c1"),
                    width,
                    width,
                    3,
                    1,
                    PadKind::Reflect,
                    1,
                    init,
                )),
                Layer::InstNorm(InstanceNorm2d::new(store, &format!("{prefix}.{b}.n1"), width)),
                Layer::Relu,
                Layer::Conv(Conv2d::new(
                    store,
                    &format!("{prefix}.{b}.c2"),
                    width,
                    width,
                    3,
                    1,
                    PadKind::Reflect,
                    1,
                    init,
                )),
                Layer::InstNorm(InstanceNorm2d::new(store, &format!("{prefix}.{b}.n2"), width)),
            ]),
        })
        .collect();
    ResChain { blocks }
}

/// Build the generator with seeded Gaussian init. Identical spec and seed
/// give bit-identical parameters.
pub fn build_generator(spec: &GeneratorSpec, rng_seed: u64) -> Result<Generator> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid init distribution");
    let mut init = move || normal.sample(&mut rng);
    let mut store = ParamStore::new();

    let w = spec.base_width;
    let dn = spec.g1_downsamples;

    // Global backbone front-end: 7x7 ingress then stride-2 downsamples that
    // double the width each step.
    let mut front = vec![
        Layer::Conv(Conv2d::new(
            &mut store,
            "g1.front.in",
            spec.input_channels,
            w,
            7,
            1,
            PadKind::Reflect,
            3,
            &mut init,
        )),
        Layer::InstNorm(InstanceNorm2d::new(&mut store, "g1.front.in_n", w)),
        Layer::Relu,
    ];
    for i in 0..dn {
        let (ci, co) = (w << i, w << (i + 1));
        front.push(Layer::Conv(Conv2d::new(
            &mut store,
            &format!("g1.front.d{i}"),
            ci,
            co,
            3,
            2,
            PadKind::Reflect,
            1,
            &mut init,
        )));
        front.push(Layer::InstNorm(InstanceNorm2d::new(
            &mut store,
            &format!("g1.front.d{i}_n"),
            co,
        )));
        front.push(Layer::Relu);
    }
    let bottleneck = w << dn;
    let res = res_chain(&mut store, "g1.res", spec.g1_res_blocks, bottleneck, &mut init);

    // Mirrored transposed-conv upsampling back to `base_width` channels.
    let mut back = Vec::new();
    for i in (0..dn).rev() {
        let (ci, co) = (w << (i + 1), w << i);
        back.push(Layer::ConvT(ConvTranspose2d::new(
            &mut store,
            &format!("g1.back.u{i}"),
            ci,
            co,
            3,
            2,
            1,
            1,
            &mut init,
        )));
        back.push(Layer::InstNorm(InstanceNorm2d::new(
            &mut store,
            &format!("g1.back.u{i}_n"),
            co,
        )));
        back.push(Layer::Relu);
    }
    let g1 = GeneratorStage {
        frontend: Stack::new(front),
        res_blocks: res,
        backend: Stack::new(back),
    };
    let g1_egress = Stack::new(vec![
        Layer::Conv(Conv2d::new(
            &mut store,
            "g1.egress.c",
            w,
            spec.output_channels,
            7,
            1,
            PadKind::Reflect,
            3,
            &mut init,
        )),
        Layer::TanhRange(spec.value_range.0, spec.value_range.1),
    ]);

    // Local enhancers, coarsest first. Enhancer e ingests at width
    // base_width / 2^e and fuses at base_width / 2^(e-1), matching the
    // feature width handed down by the previous stage.
    let mut enhancers = Vec::new();
    for e in 1..=spec.enhancer_count {
        let we = w >> e;
        let wf = w >> (e - 1); // fusion width
        let p = format!("enh{e}");
        let frontend = Stack::new(vec![
            Layer::Conv(Conv2d::new(
                &mut store,
                &format!("{p}.front.in"),
                spec.input_channels,
                we,
                7,
                1,
                PadKind::Reflect,
                3,
                &mut init,
            )),
            Layer::InstNorm(InstanceNorm2d::new(&mut store, &format!("{p}.front.in_n"), we)),
            Layer::Relu,
            Layer::Conv(Conv2d::new(
                &mut store,
                &format!("{p}.front.d0"),
                we,
                wf,
                3,
                2,
                PadKind::Reflect,
                1,
                &mut init,
            )),
            Layer::InstNorm(InstanceNorm2d::new(&mut store, &format!("{p}.front.d0_n"), wf)),
            Layer::Relu,
        ]);
        let res = res_chain(&mut store, &format!("{p}.res"), spec.g2_res_blocks, wf, &mut init);
        let backend = Stack::new(vec![
            Layer::ConvT(ConvTranspose2d::new(
                &mut store,
                &format!("{p}.back.u0"),
                wf,
                we,
                3,
                2,
                1,
                1,
                &mut init,
            )),
            Layer::InstNorm(InstanceNorm2d::new(&mut store, &format!("{p}.back.u0_n"), we)),
            Layer::Relu,
        ]);
        let egress = if e == spec.enhancer_count {
            Some(Stack::new(vec![
                Layer::Conv(Conv2d::new(
                    &mut store,
                    &format!("{p}.egress.c"),
                    we,
                    spec.output_channels,
                    7,
                    1,
                    PadKind::Reflect,
                    3,
                    &mut init,
                )),
                Layer::TanhRange(spec.value_range.0, spec.value_range.1),
            ]))
        } else {
            None
        };
        enhancers.push(Enhancer {
            stage: GeneratorStage {
                frontend,
                res_blocks: res,
                backend,
            },
            egress,
        });
    }

    Ok(Generator {
        spec: spec.clone(),
        store,
        g1,
        g1_egress,
        enhancers,
    })
}

/// Which part of the coarse-to-fine stack to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    /// Global backbone only (stage-1 training, operates at half resolution).
    G1Only,
    /// Backbone plus all enhancers.
    Full,
}

/// Activation record of one generator forward pass, consumed by backward.
pub(crate) struct GenTrace {
    mode: ForwardMode,
    g1_front: Option<StackTrace>,
    g1_res: Option<Vec<StackTrace>>,
    g1_back: Option<StackTrace>,
    g1_egress: Option<StackTrace>,
    enh: Vec<EnhTrace>,
}

pub(crate) struct EnhTrace {
    front: StackTrace,
    res: Vec<StackTrace>,
    back: StackTrace,
    egress: Option<StackTrace>,
}

impl Generator {
    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
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

    fn check_divisible(&self, h: usize, w: usize, mode: ForwardMode) -> Result<()> {
        let m = match mode {
            ForwardMode::G1Only => self.spec.g1_size_multiple(),
            ForwardMode::Full => self.spec.size_multiple(),
        };
        if h % m != 0 || w % m != 0 {
            return Err(Error::Precondition(format!(
                "input {w}x{h} not divisible by {m}; pad first"
            )));
        }
        Ok(())
    }

    /// Translate one image. Input range must match the spec's value range.
    pub fn forward(&self, visible: &ImageBuf, mode: ForwardMode) -> Result<ImageBuf> {
        let x = visible.to_batch();
        let y = self.forward_batch(&x, mode)?;
        Ok(ImageBuf::from_batch(&y, 0, self.spec.value_range))
    }

    pub fn forward_batch(&self, x: &Tensor, mode: ForwardMode) -> Result<Tensor> {
        Ok(self.run_forward(x, mode, None, false)?.0)
    }

    pub(crate) fn forward_batch_trace(
        &self,
        x: &Tensor,
        mode: ForwardMode,
    ) -> Result<(Tensor, GenTrace)> {
        let (y, trace) = self.run_forward(x, mode, None, true)?;
        Ok((y, trace.expect("trace requested")))
    }

    /// Full-mode forward with the backbone's final feature map replaced by
    /// `backbone_feat` (used to verify the element-wise fusion semantics).
    pub fn forward_full_with_backbone(&self, x: &Tensor, backbone_feat: &Tensor) -> Result<Tensor> {
        if self.spec.enhancer_count == 0 {
            return Err(Error::Precondition(
                "backbone override requires at least one enhancer".into(),
            ));
        }
        Ok(self
            .run_forward(x, ForwardMode::Full, Some(backbone_feat), false)?
            .0)
    }

    fn run_forward(
        &self,
        x: &Tensor,
        mode: ForwardMode,
        backbone_override: Option<&Tensor>,
        want_trace: bool,
    ) -> Result<(Tensor, Option<GenTrace>)> {
        let (_, c, h, w) = x.dim();
        if c != self.spec.input_channels {
            return Err(Error::Precondition(format!(
                "expected {} input channels, got {c}",
                self.spec.input_channels
            )));
        }
        self.check_divisible(h, w, mode)?;
        let ps = self.store.params();

        let run_stack = |s: &Stack, x: &Tensor, t: &mut Option<StackTrace>| -> Tensor {
            if want_trace {
                let (y, tr) = s.forward_trace(ps, x);
                *t = Some(tr);
                y
            } else {
                s.forward(ps, x)
            }
        };
        let run_chain = |s: &ResChain, x: &Tensor, t: &mut Option<Vec<StackTrace>>| -> Tensor {
            if want_trace {
                let (y, tr) = s.forward_trace(ps, x);
                *t = Some(tr);
                y
            } else {
                s.forward(ps, x)
            }
        };

        let mut trace = GenTrace {
            mode,
            g1_front: None,
            g1_res: None,
            g1_back: None,
            g1_egress: None,
            enh: Vec::new(),
        };

        let enhancer_count = match mode {
            ForwardMode::G1Only => 0,
            ForwardMode::Full => self.spec.enhancer_count,
        };

        // Input pyramid: level j is the input downsampled j times; the
        // backbone consumes the coarsest level.
        let mut levels = vec![x.clone()];
        for _ in 0..enhancer_count {
            let next = avg_pool_down(levels.last().unwrap());
            levels.push(next);
        }

        // Backbone features at its own resolution.
        let mut feat = if let Some(ov) = backbone_override {
            ov.clone()
        } else {
            let f = run_stack(&self.g1.frontend, &levels[enhancer_count], &mut trace.g1_front);
            let r = run_chain(&self.g1.res_blocks, &f, &mut trace.g1_res);
            run_stack(&self.g1.backend, &r, &mut trace.g1_back)
        };

        if enhancer_count == 0 {
            let y = run_stack(&self.g1_egress, &feat, &mut trace.g1_egress);
            return Ok((y, want_trace.then_some(trace)));
        }

        let mut out = None;
        for (ei, enh) in self.enhancers.iter().enumerate() {
            let inp = &levels[enhancer_count - 1 - ei];
            let mut et = EnhTrace {
                front: StackTrace::new(),
                res: Vec::new(),
                back: StackTrace::new(),
                egress: None,
            };
            let mut front_t = None;
            let front = run_stack(&enh.stage.frontend, inp, &mut front_t);
            if front.dim() != feat.dim() {
                return Err(Error::ShapeMismatch(format!(
                    "fusion at enhancer {}: front-end map {:?} vs backbone map {:?}",
                    ei + 1,
                    front.dim(),
                    feat.dim()
                )));
            }
            // Element-wise sum feeds the enhancer's residual core.
            let fused = &front + &feat;
            let mut res_t = None;
            let r = run_chain(&enh.stage.res_blocks, &fused, &mut res_t);
            let mut back_t = None;
            feat = run_stack(&enh.stage.backend, &r, &mut back_t);
            if want_trace {
                et.front = front_t.unwrap();
                et.res = res_t.unwrap();
                et.back = back_t.unwrap();
            }
            if let Some(egress) = &enh.egress {
                let mut eg_t = None;
                out = Some(run_stack(egress, &feat, &mut eg_t));
                if want_trace {
                    et.egress = eg_t;
                }
            }
            trace.enh.push(et);
        }
        let y = out.expect("last enhancer has an egress head");
        Ok((y, want_trace.then_some(trace)))
    }

    /// Accumulate parameter gradients for a traced forward pass. Gradients
    /// wrt the image input are discarded (inputs are data).
    pub(crate) fn backward_batch(&mut self, trace: &GenTrace, gy: &Tensor) {
        let (ps, mut gs) = self.store.split_mut();
        match trace.mode {
            ForwardMode::G1Only => {
                let g = self
                    .g1_egress
                    .backward(ps, &mut gs, trace.g1_egress.as_ref().unwrap(), gy);
                let g = self
                    .g1
                    .backend
                    .backward(ps, &mut gs, trace.g1_back.as_ref().unwrap(), &g);
                let g = self
                    .g1
                    .res_blocks
                    .backward(ps, &mut gs, trace.g1_res.as_ref().unwrap(), &g);
                let _ = self
                    .g1
                    .frontend
                    .backward(ps, &mut gs, trace.g1_front.as_ref().unwrap(), &g);
            }
            ForwardMode::Full => {
                // Walk enhancers fine-to-coarse; `g` carries the gradient
                // wrt the feature map handed down by the previous stage.
                let mut g = gy.clone();
                for (ei, enh) in self.enhancers.iter().enumerate().rev() {
                    let et = &trace.enh[ei];
                    if let Some(eg_t) = &et.egress {
                        g = enh.egress.as_ref().unwrap().backward(ps, &mut gs, eg_t, &g);
                    }
                    g = enh.stage.backend.backward(ps, &mut gs, &et.back, &g);
                    g = enh.stage.res_blocks.backward(ps, &mut gs, &et.res, &g);
                    // Fusion was an element-wise sum: the same gradient flows
                    // into the front-end branch and the handed-down features.
                    let _ = enh.stage.frontend.backward(ps, &mut gs, &et.front, &g);
                }
                if trace.g1_back.is_some() {
                    let gb = self
                        .g1
                        .backend
                        .backward(ps, &mut gs, trace.g1_back.as_ref().unwrap(), &g);
                    let gr = self
                        .g1
                        .res_blocks
                        .backward(ps, &mut gs, trace.g1_res.as_ref().unwrap(), &gb);
                    let _ = self
                        .g1
                        .frontend
                        .backward(ps, &mut gs, trace.g1_front.as_ref().unwrap(), &gr);
                }
            }
        }
    }

    /// Bit-exact digest of all parameters whose name starts with `prefix`
    /// ("g1." for the backbone, "enh" for the enhancers, "" for everything).
    pub fn digest(&self, prefix: &str) -> u64 {
        self.store.digest(prefix)
    }
}

/// Architecture hyperparameters of the discriminator bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorSpec {
    /// Number of pyramid scales / discriminators.
    pub n_scales: usize,
    /// Stride-2 conv blocks per discriminator.
    pub conv_layers: usize,
    pub base_width: usize,
    /// Channels of the (visible, candidate) concatenation.
    pub input_channels: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            n_scales: 3,
            conv_layers: 4,
            base_width: 64,
            input_channels: 6,
        }
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_scales == 0 {
            return Err(Error::config("n_scales", "must be >= 1"));
        }
        if self.conv_layers == 0 {
            return Err(Error::config("conv_layers", "must be >= 1"));
        }
        if self.base_width == 0 {
            return Err(Error::config("base_width", "must be >= 1"));
        }
        if self.input_channels == 0 {
            return Err(Error::config("input_channels", "must be >= 1"));
        }
        Ok(())
    }
}

/// Patch logits for one image at one pyramid scale.
#[derive(Debug, Clone)]
pub struct ScoreMap {
    pub logits: Array2<f64>,
    pub scale_index: usize,
}

/// Ordered intermediate activations of one discriminator pass (the final
/// logits are returned separately as a `ScoreMap`).
#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub layers: Vec<Tensor>,
    pub element_counts: Vec<usize>,
}

impl FeatureStack {
    pub fn new(layers: Vec<Tensor>) -> Self {
        let element_counts = layers.iter().map(|l| l.len()).collect();
        FeatureStack {
            layers,
            element_counts,
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

/// One patch discriminator: `conv_layers` stride-2 blocks (instance norm on
/// all but the first, leaky rectifier 0.2) and a final 1-channel conv that
/// emits the patch logits. Features are exported from every block.
#[derive(Debug, Clone)]
pub struct Discriminator {
    spec: DiscriminatorSpec,
    store: ParamStore,
    blocks: Vec<Stack>,
    head: Stack,
    pub scale_index: usize,
}

/// Per-pass activations for a discriminator backward.
pub(crate) struct DiscTrace {
    blocks: Vec<StackTrace>,
    head: StackTrace,
}

/// Full output of a batched discriminator pass.
pub(crate) struct DiscForward {
    pub scores: Tensor,
    pub features: Vec<Tensor>,
    pub trace: DiscTrace,
}

const LEAKY_SLOPE: f64 = 0.2;
/// Channel growth is capped at 8x the base width.
const WIDTH_CAP_FACTOR: usize = 8;

/// Build one discriminator with seeded init.
pub fn build_discriminator(
    spec: &DiscriminatorSpec,
    scale_index: usize,
    rng_seed: u64,
) -> Result<Discriminator> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid init distribution");
    let mut init = move || normal.sample(&mut rng);
    let mut store = ParamStore::new();
    let cap = spec.base_width * WIDTH_CAP_FACTOR;

    let mut blocks = Vec::new();
    let mut prev = spec.input_channels;
    for l in 0..spec.conv_layers {
        let width = (spec.base_width << l).min(cap);
        let mut layers = vec![Layer::Conv(Conv2d::new(
            &mut store,
            &format!("blk{l}.c"),
            prev,
            width,
            4,
            2,
            PadKind::Zero,
            2,
            &mut init,
        ))];
        if l > 0 {
            layers.push(Layer::InstNorm(InstanceNorm2d::new(
                &mut store,
                &format!("blk{l}.n"),
                width,
            )));
        }
        layers.push(Layer::LeakyRelu(LEAKY_SLOPE));
        blocks.push(Stack::new(layers));
        prev = width;
    }
    let head = Stack::new(vec![Layer::Conv(Conv2d::new(
        &mut store,
        "head.c",
        prev,
        1,
        4,
        1,
        PadKind::Zero,
        2,
        &mut init,
    ))]);

    Ok(Discriminator {
        spec: spec.clone(),
        store,
        blocks,
        head,
        scale_index,
    })
}

impl Discriminator {
    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
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

    /// Expected patch-grid size for an input of the given spatial dims.
    pub fn score_grid_dims(&self, mut h: usize, mut w: usize) -> (usize, usize) {
        for _ in 0..self.spec.conv_layers {
            h = (h + 2 * 2 - 4) / 2 + 1;
            w = (w + 2 * 2 - 4) / 2 + 1;
        }
        (h + 1, w + 1) // final 4x4 stride-1 conv with padding 2
    }

    pub(crate) fn forward_batch(&self, input: &Tensor) -> Result<DiscForward> {
        let (_, c, _, _) = input.dim();
        if c != self.spec.input_channels {
            return Err(Error::Precondition(format!(
                "discriminator expects {} input channels, got {c}",
                self.spec.input_channels
            )));
        }
        let ps = self.store.params();
        let mut features = Vec::with_capacity(self.blocks.len());
        let mut traces = Vec::with_capacity(self.blocks.len());
        let mut cur = input.clone();
        for b in &self.blocks {
            let (y, t) = b.forward_trace(ps, &cur);
            traces.push(t);
            features.push(y.clone());
            cur = y;
        }
        let (scores, head_t) = self.head.forward_trace(ps, &cur);
        Ok(DiscForward {
            scores,
            features,
            trace: DiscTrace {
                blocks: traces,
                head: head_t,
            },
        })
    }

    /// Backward accumulating parameter grads. `g_scores` is the gradient wrt
    /// the patch logits; `g_features[i]`, when given, is added to the
    /// gradient flowing into block i's output (feature-matching injection).
    /// Returns the gradient wrt the concatenated input.
    pub(crate) fn backward_batch(
        &mut self,
        trace: &DiscTrace,
        g_scores: &Tensor,
        g_features: Option<&[Tensor]>,
    ) -> Tensor {
        let (ps, mut gs) = self.store.split_mut();
        let mut g = self.head.backward(ps, &mut gs, &trace.head, g_scores);
        for (i, b) in self.blocks.iter().enumerate().rev() {
            if let Some(gf) = g_features {
                g = &g + &gf[i];
            }
            g = b.backward(ps, &mut gs, &trace.blocks[i], &g);
        }
        g
    }

    pub fn digest(&self) -> u64 {
        self.store.digest("")
    }
}

/// The bank of identically structured discriminators, one per scale.
#[derive(Debug, Clone)]
pub struct DiscriminatorBank {
    pub scales: Vec<Discriminator>,
    spec: DiscriminatorSpec,
}

/// Build `n_scales` discriminators with independent seeded init streams.
pub fn build_discriminator_bank(spec: &DiscriminatorSpec, rng_seed: u64) -> Result<DiscriminatorBank> {
    spec.validate()?;
    let scales = (0..spec.n_scales)
        .map(|k| build_discriminator(spec, k, splitmix64(rng_seed, k as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(DiscriminatorBank {
        scales,
        spec: spec.clone(),
    })
}

impl DiscriminatorBank {
    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn n_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn param_count(&self) -> usize {
        self.scales.iter().map(|d| d.param_count()).sum()
    }

    pub fn digest(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for d in &self.scales {
            h ^= d.digest();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// Deterministic sub-seed derivation.
pub(crate) fn splitmix64(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Channel-wise concatenation of two equally sized batches.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (na, ca, ha, wa) = a.dim();
    let (nb, cb, hb, wb) = b.dim();
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::Precondition(format!(
            "channel concat shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let mut out = Tensor::zeros((na, ca + cb, ha, wa));
    out.slice_mut(ndarray::s![.., ..ca, .., ..]).assign(a);
    out.slice_mut(ndarray::s![.., ca.., .., ..]).assign(b);
    Ok(out)
}

/// Run one discriminator on a single (visible, candidate) pair.
pub fn discriminator_forward(
    disc: &Discriminator,
    visible: &ImageBuf,
    candidate: &ImageBuf,
) -> Result<(ScoreMap, FeatureStack)> {
    if (visible.height(), visible.width()) != (candidate.height(), candidate.width()) {
        return Err(Error::Precondition(format!(
            "visible {}x{} and candidate {}x{} differ in spatial dims",
            visible.width(),
            visible.height(),
            candidate.width(),
            candidate.height()
        )));
    }
    let input = concat_channels(&visible.to_batch(), &candidate.to_batch())?;
    let out = disc.forward_batch(&input)?;
    let logits = out
        .scores
        .index_axis(Axis(0), 0)
        .index_axis(Axis(0), 0)
        .to_owned();
    Ok((
        ScoreMap {
            logits,
            scale_index: disc.scale_index,
        },
        FeatureStack::new(out.features),
    ))
}

/// Run the whole bank on an image pyramid; one (scores, features) pair per
/// scale, finest first.
pub fn multiscale_forward(
    bank: &DiscriminatorBank,
    visible_pyr: &ImagePyramid,
    candidate_pyr: &ImagePyramid,
) -> Result<Vec<(ScoreMap, FeatureStack)>> {
    if visible_pyr.levels.len() != bank.n_scales() || candidate_pyr.levels.len() != bank.n_scales()
    {
        return Err(Error::Precondition(format!(
            "pyramid levels ({}, {}) must equal the bank's scale count {}",
            visible_pyr.levels.len(),
            candidate_pyr.levels.len(),
            bank.n_scales()
        )));
    }
    bank.scales
        .iter()
        .enumerate()
        .map(|(k, d)| discriminator_forward(d, &visible_pyr.levels[k], &candidate_pyr.levels[k]))
        .collect()
}
