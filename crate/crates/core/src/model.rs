//! Encoder-decoder assembly for DCSAU-Net and its ablation variants.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, CsaBlock, Ctx, DoubleConv, Module, Param, PfcBlock};
use crate::scalar::Scalar;
use crate::serialize::Archive;
use crate::tensor::{Mask, Tensor};

/// Channels of every model input.
pub const INPUT_CHANNELS: usize = 3;
pub const PFC_KERNELS: [usize; 4] = [3, 5, 7, 9];
pub const DEFAULT_PFC_KERNEL: usize = 7;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Calibrated stage widths for the double-conv family (`unet`, `unet+pfc`).
pub const PLAIN_WIDTHS: [usize; 5] = [48, 112, 160, 432, 464];
/// Calibrated stage widths for the split-attention family (`unet+csa`, `dcsau`).
pub const CSA_WIDTHS: [usize; 5] = [32, 48, 80, 96, 224];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "unet")]
    Unet,
    #[serde(rename = "unet+pfc")]
    UnetPfc,
    #[serde(rename = "unet+csa")]
    UnetCsa,
    #[serde(rename = "dcsau")]
    Dcsau,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Unet, Variant::UnetPfc, Variant::UnetCsa, Variant::Dcsau];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Unet => "unet",
            Variant::UnetPfc => "unet+pfc",
            Variant::UnetCsa => "unet+csa",
            Variant::Dcsau => "dcsau",
        }
    }

    pub fn uses_pfc(self) -> bool {
        matches!(self, Variant::UnetPfc | Variant::Dcsau)
    }

    pub fn uses_csa(self) -> bool {
        matches!(self, Variant::UnetCsa | Variant::Dcsau)
    }

    pub fn default_widths(self) -> Vec<usize> {
        if self.uses_csa() {
            CSA_WIDTHS.to_vec()
        } else {
            PLAIN_WIDTHS.to_vec()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected unet, unet+pfc, unet+csa or dcsau)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Softmax,
}

/// Declarative network description shared by the executable model and the
/// analytic cost model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawConfig")]
pub struct ModelConfig {
    pub variant: Variant,
    pub stage_widths: Vec<usize>,
    pub pfc_kernel: usize,
    pub num_classes: usize,
    pub final_activation: Activation,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    variant: Variant,
    stage_widths: Option<Vec<usize>>,
    pfc_kernel: Option<usize>,
    num_classes: Option<usize>,
    final_activation: Option<Activation>,
}

impl TryFrom<RawConfig> for ModelConfig {
    type Error = Error;

    fn try_from(raw: RawConfig) -> Result<Self> {
        let num_classes = raw.num_classes.unwrap_or(1);
        let config = ModelConfig {
            variant: raw.variant,
            stage_widths: raw.stage_widths.unwrap_or_else(|| raw.variant.default_widths()),
            pfc_kernel: raw.pfc_kernel.unwrap_or(DEFAULT_PFC_KERNEL),
            num_classes,
            final_activation: raw.final_activation.unwrap_or(activation_for(num_classes)),
        };
        config.validate()?;
        Ok(config)
    }
}

fn activation_for(num_classes: usize) -> Activation {
    if num_classes == 1 {
        Activation::Sigmoid
    } else {
        Activation::Softmax
    }
}

impl ModelConfig {
    /// Calibrated widths, K = 7, one output class.
    pub fn new(variant: Variant) -> Self {
        ModelConfig {
            variant,
            stage_widths: variant.default_widths(),
            pfc_kernel: DEFAULT_PFC_KERNEL,
            num_classes: 1,
            final_activation: Activation::Sigmoid,
        }
    }

    pub fn with_widths(mut self, widths: &[usize]) -> Self {
        self.stage_widths = widths.to_vec();
        self
    }

    pub fn with_kernel(mut self, k: usize) -> Self {
        self.pfc_kernel = k;
        self
    }

    pub fn with_classes(mut self, classes: usize) -> Self {
        self.num_classes = classes;
        self.final_activation = activation_for(classes);
        self
    }

    pub fn stages(&self) -> usize {
        self.stage_widths.len()
    }

    /// Spatial extents must be multiples of this value.
    pub fn divisor(&self) -> usize {
        1 << self.stages().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() {
            return Err(Error::Config("stage_widths must list at least one stage".into()));
        }
        if self.stages() > 16 {
            return Err(Error::Config(format!("{} stages is more than the supported 16", self.stages())));
        }
        for (i, &w) in self.stage_widths.iter().enumerate() {
            if w == 0 {
                return Err(Error::Config(format!("stage {i} width must be positive")));
            }
            if self.variant.uses_csa() && w % 2 != 0 {
                return Err(Error::Config(format!(
                    "stage {i} width {w} is odd; split-attention blocks need even widths"
                )));
            }
        }
        if !PFC_KERNELS.contains(&self.pfc_kernel) {
            return Err(Error::Config(format!("pfc_kernel {} is not one of 3, 5, 7, 9", self.pfc_kernel)));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if self.final_activation != activation_for(self.num_classes) {
            return Err(Error::Config(format!(
                "final_activation {:?} does not fit num_classes {}",
                self.final_activation, self.num_classes
            )));
        }
        Ok(())
    }

    /// Rejects spatial extents the encoder cannot halve evenly.
    pub fn check_input(&self, channels: usize, h: usize, w: usize) -> Result<()> {
        if channels != INPUT_CHANNELS {
            return Err(Error::shape("forward", "channel", INPUT_CHANNELS, channels));
        }
        let d = self.divisor();
        for (axis, v) in [("height", h), ("width", w)] {
            if v == 0 || v % d != 0 {
                return Err(Error::invalid(
                    "forward",
                    format!("input {axis} {v} is not divisible by {d} (required for {} stages)", self.stages()),
                ));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("model config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// One resolution level of the encoder or decoder.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Stage<T: Scalar> {
    Plain(DoubleConv<T>),
    Pfc(PfcBlock<T>),
    Csa(CsaBlock<T>),
}

impl<T: Scalar> Stage<T> {
    fn forward<'g>(&mut self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        match self {
            Stage::Plain(b) => b.forward(ctx, x),
            Stage::Pfc(b) => b.forward(ctx, x),
            Stage::Csa(b) => b.forward(ctx, x),
        }
    }

    fn module(&self) -> &dyn Module<T> {
        match self {
            Stage::Plain(b) => b,
            Stage::Pfc(b) => b,
            Stage::Csa(b) => b,
        }
    }

    fn module_mut(&mut self) -> &mut dyn Module<T> {
        match self {
            Stage::Plain(b) => b,
            Stage::Pfc(b) => b,
            Stage::Csa(b) => b,
        }
    }
}

/// Stage block name prefix, e.g. `encoder.stage0.pfc`.
pub fn block_name(side: &str, stage: usize, variant: Variant) -> String {
    let kind = match (side, stage) {
        ("encoder", 0) if variant.uses_pfc() => "pfc",
        ("encoder", 0) => "plain",
        _ if variant.uses_csa() => "csa",
        _ => "plain",
    };
    format!("{side}.stage{stage}.{kind}")
}

pub struct DcsauNet<T: Scalar> {
    config: ModelConfig,
    encoder: Vec<Stage<T>>,
    /// Deepest decoder stage first.
    decoder: Vec<Stage<T>>,
    head: Conv2d<T>,
}

impl<T: Scalar> Clone for DcsauNet<T> {
    fn clone(&self) -> Self {
        DcsauNet {
            config: self.config.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            head: self.head.clone(),
        }
    }
}

impl<T: Scalar> DcsauNet<T> {
    /// Deterministic construction: equal seeds give identical weights.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = &config.stage_widths;
        let v = config.variant;
        let mut encoder = Vec::with_capacity(widths.len());
        for (i, &w) in widths.iter().enumerate() {
            let name = block_name("encoder", i, v);
            let cin = if i == 0 { INPUT_CHANNELS } else { widths[i - 1] };
            let stage = if i == 0 && v.uses_pfc() {
                Stage::Pfc(PfcBlock::new(&name, cin, w, config.pfc_kernel, &mut rng)?)
            } else if i > 0 && v.uses_csa() {
                Stage::Csa(CsaBlock::new(&name, cin, w, &mut rng)?)
            } else {
                Stage::Plain(DoubleConv::new(&name, cin, w, &mut rng))
            };
            encoder.push(stage);
        }
        let mut decoder = Vec::with_capacity(widths.len().saturating_sub(1));
        for i in (0..widths.len().saturating_sub(1)).rev() {
            let name = block_name("decoder", i, v);
            let cin = widths[i] + widths[i + 1];
            let stage = if v.uses_csa() {
                Stage::Csa(CsaBlock::new(&name, cin, widths[i], &mut rng)?)
            } else {
                Stage::Plain(DoubleConv::new(&name, cin, widths[i], &mut rng))
            };
            decoder.push(stage);
        }
        let head = Conv2d::new("head", widths[0], config.num_classes, 1, &mut rng);
        Ok(DcsauNet {
            config: config.clone(),
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Logits, N×num_classes×H×W, before the final activation.
    pub fn forward<'g>(&mut self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let mut skips = self.encode(ctx, x)?;
        let mut h = skips.pop().expect("at least one stage");
        for stage in self.decoder.iter_mut() {
            let skip = skips.pop().expect("one skip per decoder stage");
            let up = h.upsample2x();
            h = stage.forward(ctx, skip.concat_channels(up)?)?;
        }
        self.head.forward(ctx, h)
    }

    /// Encoder outputs, shallowest first; stage `i` has extents `(H, W) / 2^i`.
    pub fn encode<'g>(&mut self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        let s = x.shape();
        self.config.check_input(s.c, s.h, s.w)?;
        let mut features: Vec<Var<'g, T>> = Vec::with_capacity(self.encoder.len());
        for (i, stage) in self.encoder.iter_mut().enumerate() {
            let input = match features.last() {
                Some(prev) if i > 0 => prev.maxpool2x2()?,
                _ => x,
            };
            features.push(stage.forward(ctx, input)?);
        }
        Ok(features)
    }

    /// Eval-mode logits for a batch without recording gradients.
    pub fn infer(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let ctx = Ctx::inference(&g);
        let y = self.forward(&ctx, g.constant(x.clone()))?;
        Ok(y.value())
    }

    /// Final activation applied to logits.
    pub fn activate<'g>(&self, logits: Var<'g, T>) -> Result<Var<'g, T>> {
        match self.config.final_activation {
            Activation::Sigmoid => Ok(logits.sigmoid()),
            Activation::Softmax => logits.softmax_groups(1),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let archive = Archive::load(path)?;
        self.load_archive(&archive)
    }
}

impl<T: Scalar> Module<T> for DcsauNet<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        for s in self.encoder.iter().chain(&self.decoder) {
            s.module().visit(f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for s in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            s.module_mut().visit_mut(f);
        }
        self.head.visit_mut(f);
    }

    fn census(&self, out: &mut Vec<String>) {
        for (i, s) in self.encoder.iter().enumerate() {
            if i > 0 {
                out.push(format!("encoder.stage{i}.pool"));
            }
            s.module().census(out);
        }
        let depth = self.decoder.len();
        for (j, s) in self.decoder.iter().enumerate() {
            out.push(format!("decoder.stage{}.upsample", depth - 1 - j));
            s.module().census(out);
        }
        self.head.census(out);
    }
}

/// Converts logits to class labels.
///
/// One channel: `sigmoid(logit) >= threshold` is foreground. Several
/// channels: per-pixel argmax, ties resolved toward the lower index.
pub fn predict_mask<T: Scalar>(logits: &Tensor<T>, threshold: f64) -> Mask {
    let s = logits.shape();
    let mut mask = Mask::new(s.n, s.h, s.w);
    let plane = s.plane();
    for n in 0..s.n {
        let out = &mut mask.data_mut()[n * plane..(n + 1) * plane];
        if s.c == 1 {
            for (o, &z) in out.iter_mut().zip(logits.plane(n, 0)) {
                let p = 1.0 / (1.0 + (-z.as_f64()).exp());
                *o = u8::from(p >= threshold);
            }
            continue;
        }
        for (i, o) in out.iter_mut().enumerate() {
            let mut best = 0;
            let mut best_v = logits.plane(n, 0)[i];
            for c in 1..s.c {
                let v = logits.plane(n, c)[i];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            *o = best as u8;
        }
    }
    mask
}
