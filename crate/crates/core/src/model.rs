//! The twin-frame masked autoencoder: a transformer encoder over visible
//! tokens, a lighter decoder over the full sequence, and a linear pixel head.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{masked_self_attention, AttentionVars, DropMode, PlanSource, SeqLayout, TraceRequest};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::seeds::{self, StreamRng};
use crate::tensor::{Real, Tensor};
use crate::tokenizer::{self, assemble_full, embed_tokens, normalize_targets, patch_dim, EmbedVars, FrameLayout, MaskSet};
use crate::video::FramePair;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_size: usize,
    pub patch: usize,
    pub encoder: StackConfig,
    pub decoder: StackConfig,
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
    pub drop_ratio: f64,
    pub drop_mode: DropMode,
    pub asad_in_encoder: bool,
    pub identity_embed: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            patch: 8,
            encoder: StackConfig { depth: 4, width: 192, heads: 4 },
            decoder: StackConfig { depth: 4, width: 96, heads: 4 },
            mlp_ratio: 4,
            mask_ratio: 0.75,
            drop_ratio: 0.1,
            drop_mode: DropMode::Asad,
            asad_in_encoder: false,
            identity_embed: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.input_size.is_multiple_of(self.patch) {
            return Err(Error::rejected(format!("input {} not divisible by patch {}", self.input_size, self.patch)));
        }
        for (name, s) in [("encoder", self.encoder), ("decoder", self.decoder)] {
            if s.heads == 0 || s.width % s.heads != 0 {
                return Err(Error::rejected(format!("{name} width {} not divisible by {} heads", s.width, s.heads)));
            }
            if s.width % 4 != 0 {
                return Err(Error::rejected(format!("{name} width {} must be divisible by 4", s.width)));
            }
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::rejected(format!("mask ratio {} outside (0, 1)", self.mask_ratio)));
        }
        if !(0.0..1.0).contains(&self.drop_ratio) {
            return Err(Error::rejected(format!("dropout ratio {} outside [0, 1)", self.drop_ratio)));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::rejected("mlp ratio must be positive"));
        }
        Ok(())
    }

    pub fn layout(&self) -> FrameLayout {
        let g = self.input_size / self.patch;
        FrameLayout::new(g, g)
    }

    pub fn patch_dim(&self) -> usize {
        patch_dim(self.patch)
    }

    /// Number of named parameter tensors.
    pub fn tensor_count(&self) -> usize {
        let per_block = 12;
        let identity = if self.identity_embed { 2 } else { 0 };
        2 + self.encoder.depth * per_block + 2 + 3 + self.decoder.depth * per_block + 2 + 2 + identity
    }

    /// Parameter count derived from the configuration alone.
    pub fn parameter_count(&self) -> usize {
        let block = |w: usize| {
            let hidden = w * self.mlp_ratio;
            4 * w + (w * 3 * w + 3 * w) + (w * w + w) + (w * hidden + hidden) + (hidden * w + w)
        };
        let (e, d, p) = (self.encoder.width, self.decoder.width, self.patch_dim());
        let identity = if self.identity_embed { 2 * e + 2 * d } else { 0 };
        (p * e + e)
            + self.encoder.depth * block(e)
            + 2 * e
            + (e * d + d)
            + d
            + self.decoder.depth * block(d)
            + 2 * d
            + (d * p + p)
            + identity
    }
}

/// A named learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Real> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Whether decoupled weight decay applies (matrices only).
    pub decay: bool,
}

#[derive(Clone, Copy, Debug)]
struct BlockIds {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    out_w: usize,
    out_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Clone, Debug)]
struct ParamIds {
    patch_w: usize,
    patch_b: usize,
    enc_identity: Option<usize>,
    enc_blocks: Vec<BlockIds>,
    enc_norm_g: usize,
    enc_norm_b: usize,
    dec_embed_w: usize,
    dec_embed_b: usize,
    mask_token: usize,
    dec_identity: Option<usize>,
    dec_blocks: Vec<BlockIds>,
    dec_norm_g: usize,
    dec_norm_b: usize,
    head_w: usize,
    head_b: usize,
}

enum Init {
    /// Xavier-uniform over (fan_in, fan_out) = (rows, cols).
    Xavier,
    /// Truncated normal for learned tokens.
    Normal,
    Zeros,
    Ones,
}

struct Registry<'r, T: Real> {
    params: Vec<Param<T>>,
    rng: Option<&'r mut StreamRng>,
}

impl<T: Real> Registry<'_, T> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let tensor = match (init, self.rng.as_deref_mut()) {
            (Init::Xavier, Some(rng)) => {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let len = shape.iter().product();
                let data = (0..len).map(|_| T::c(rng.random_range(-bound..bound))).collect();
                Tensor::new(shape.to_vec(), data).expect("shape matches")
            }
            (Init::Normal, Some(rng)) => {
                let normal = Normal::new(0.0, INIT_STD).expect("valid std");
                let len = shape.iter().product();
                let data = (0..len)
                    .map(|_| loop {
                        let v: f64 = normal.sample(rng);
                        if v.abs() <= 2.0 * INIT_STD {
                            break T::c(v);
                        }
                    })
                    .collect();
                Tensor::new(shape.to_vec(), data).expect("shape matches")
            }
            (Init::Ones, _) => Tensor::full(shape, T::one()),
            _ => Tensor::zeros(shape),
        };
        let decay = name.ends_with(".weight");
        self.params.push(Param { name, decay, tensor });
        self.params.len() - 1
    }

    fn block(&mut self, prefix: &str, width: usize, mlp_ratio: usize) -> BlockIds {
        let hidden = width * mlp_ratio;
        BlockIds {
            ln1_g: self.add(format!("{prefix}.ln1.gain"), &[width], Init::Ones),
            ln1_b: self.add(format!("{prefix}.ln1.bias"), &[width], Init::Zeros),
            qkv_w: self.add(format!("{prefix}.attn.qkv.weight"), &[width, 3 * width], Init::Xavier),
            qkv_b: self.add(format!("{prefix}.attn.qkv.bias"), &[3 * width], Init::Zeros),
            out_w: self.add(format!("{prefix}.attn.out.weight"), &[width, width], Init::Xavier),
            out_b: self.add(format!("{prefix}.attn.out.bias"), &[width], Init::Zeros),
            ln2_g: self.add(format!("{prefix}.ln2.gain"), &[width], Init::Ones),
            ln2_b: self.add(format!("{prefix}.ln2.bias"), &[width], Init::Zeros),
            fc1_w: self.add(format!("{prefix}.mlp.fc1.weight"), &[width, hidden], Init::Xavier),
            fc1_b: self.add(format!("{prefix}.mlp.fc1.bias"), &[hidden], Init::Zeros),
            fc2_w: self.add(format!("{prefix}.mlp.fc2.weight"), &[hidden, width], Init::Xavier),
            fc2_b: self.add(format!("{prefix}.mlp.fc2.bias"), &[width], Init::Zeros),
        }
    }
}

fn register<T: Real>(config: &ModelConfig, rng: Option<&mut StreamRng>) -> (Vec<Param<T>>, ParamIds) {
    let mut reg = Registry { params: Vec::new(), rng };
    let (e, d, p) = (config.encoder.width, config.decoder.width, config.patch_dim());
    let patch_w = reg.add("embed.patch.weight".into(), &[p, e], Init::Xavier);
    let patch_b = reg.add("embed.patch.bias".into(), &[e], Init::Zeros);
    let enc_identity = config.identity_embed.then(|| reg.add("embed.identity".into(), &[2, e], Init::Normal));
    let enc_blocks = (0..config.encoder.depth).map(|l| reg.block(&format!("encoder.{l}"), e, config.mlp_ratio)).collect();
    let enc_norm_g = reg.add("encoder.norm.gain".into(), &[e], Init::Ones);
    let enc_norm_b = reg.add("encoder.norm.bias".into(), &[e], Init::Zeros);
    let dec_embed_w = reg.add("decoder.embed.weight".into(), &[e, d], Init::Xavier);
    let dec_embed_b = reg.add("decoder.embed.bias".into(), &[d], Init::Zeros);
    let mask_token = reg.add("decoder.mask_token".into(), &[1, d], Init::Normal);
    let dec_identity = config.identity_embed.then(|| reg.add("decoder.identity".into(), &[2, d], Init::Normal));
    let dec_blocks = (0..config.decoder.depth).map(|l| reg.block(&format!("decoder.{l}"), d, config.mlp_ratio)).collect();
    let dec_norm_g = reg.add("decoder.norm.gain".into(), &[d], Init::Ones);
    let dec_norm_b = reg.add("decoder.norm.bias".into(), &[d], Init::Zeros);
    let head_w = reg.add("head.weight".into(), &[d, p], Init::Xavier);
    let head_b = reg.add("head.bias".into(), &[p], Init::Zeros);
    let ids = ParamIds {
        patch_w,
        patch_b,
        enc_identity,
        enc_blocks,
        enc_norm_g,
        enc_norm_b,
        dec_embed_w,
        dec_embed_b,
        mask_token,
        dec_identity,
        dec_blocks,
        dec_norm_g,
        dec_norm_b,
        head_w,
        head_b,
    };
    (reg.params, ids)
}

/// Recorded suppression: `[layer][head]` lists of flat indices per stack.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DropPlans {
    pub encoder: Vec<Vec<Vec<usize>>>,
    pub decoder: Vec<Vec<Vec<usize>>>,
}

/// How a forward pass chooses suppressed attention elements.
#[derive(Clone, Copy, Debug)]
pub enum Planning<'a> {
    /// Sample fresh plans from streams derived from this seed, using the
    /// model configuration's mode and ratio.
    Sample { seed: u64 },
    /// Replay plans recorded by an earlier pass.
    Replay(&'a DropPlans),
    /// Plain attention everywhere.
    Off,
}

/// Per-layer attention summary, averaged over heads and query rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerSummary {
    pub within_mass: f64,
    pub between_mass: f64,
    /// Head-averaged temporal matching probability per token, when recorded.
    pub f_tem: Option<Vec<f64>>,
    /// Worst post-softmax checks over heads, when recorded.
    pub max_dropped_prob: f64,
    pub max_row_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Diagnostics {
    /// Filled only when the trace asks for suppression checks.
    pub encoder_layers: Vec<LayerSummary>,
    pub decoder_layers: Vec<LayerSummary>,
    pub plans: DropPlans,
}

impl Diagnostics {
    pub fn mean_between_mass(&self) -> f64 {
        if self.decoder_layers.is_empty() {
            return 0.0;
        }
        self.decoder_layers.iter().map(|l| l.between_mass).sum::<f64>() / self.decoder_layers.len() as f64
    }
}

/// Inputs derived from a frame pair and a mask.
#[derive(Clone, Debug)]
pub struct Sample<T: Real> {
    pub patches: Tensor<T>,
    pub layout: FrameLayout,
    pub mask: MaskSet,
    pub targets: Tensor<T>,
}

impl<T: Real> Sample<T> {
    pub fn new(pair: &FramePair, patch: usize, mask: MaskSet) -> Result<Self> {
        let (patches, layout) = tokenizer::patchify(pair, patch)?;
        if mask.masked.len() + mask.visible.len() != layout.total_tokens {
            return Err(Error::rejected("mask does not cover the token sequence"));
        }
        let targets = normalize_targets(&patches, &mask)?;
        Ok(Self { patches, layout, mask, targets })
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub trace: TraceRequest,
}

pub struct ForwardOutput {
    pub loss: Var,
    pub predictions: Var,
    pub latent: Var,
    pub diagnostics: Diagnostics,
}

/// Model parameters plus the fixed tables derived from the configuration.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    ids: ParamIds,
    enc_pos: Tensor<T>,
    dec_pos: Tensor<T>,
}

impl<T: Real> Model<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeds::stream(&[seeds::TAG_INIT, seed]);
        let (params, ids) = register(config, Some(&mut rng));
        Self::assemble(config, params, ids)
    }

    fn assemble(config: &ModelConfig, params: Vec<Param<T>>, ids: ParamIds) -> Result<Self> {
        let layout = config.layout();
        Ok(Self {
            enc_pos: tokenizer::sincos_table(layout.grid, config.encoder.width)?,
            dec_pos: tokenizer::sincos_table(layout.grid, config.decoder.width)?,
            config: config.clone(),
            params,
            ids,
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes against
    /// the configuration.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let (mut params, ids) = register::<T>(config, None);
        if tensors.len() != params.len() {
            return Err(Error::Format(format!("expected {} parameters, found {}", params.len(), tensors.len())));
        }
        for (p, (name, t)) in params.iter_mut().zip(tensors) {
            if p.name != name || p.tensor.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {name} {:?} does not match {} {:?}",
                    t.shape(),
                    p.name,
                    p.tensor.shape()
                )));
            }
            p.tensor = t;
        }
        Self::assemble(config, params, ids)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn layout(&self) -> FrameLayout {
        self.config.layout()
    }

    /// Id of a parameter by name.
    pub fn param_id(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    fn var<'a>(&'a self, tape: &mut Tape<'a, T>, id: usize) -> Var {
        tape.param(&self.params[id].tensor, id)
    }

    #[allow(clippy::too_many_arguments)]
    fn block<'a, R: Rng>(
        &'a self,
        tape: &mut Tape<'a, T>,
        x: Var,
        ids: &BlockIds,
        heads: usize,
        seq: &SeqLayout,
        plan: &mut PlanSource<'_, R>,
        trace: TraceRequest,
    ) -> Result<(Var, Vec<crate::attention::HeadTrace>)> {
        let (g1, b1) = (self.var(tape, ids.ln1_g), self.var(tape, ids.ln1_b));
        let normed = tape.layer_norm(x, g1, b1)?;
        let attn = AttentionVars {
            qkv_w: self.var(tape, ids.qkv_w),
            qkv_b: self.var(tape, ids.qkv_b),
            out_w: self.var(tape, ids.out_w),
            out_b: self.var(tape, ids.out_b),
            heads,
        };
        let (a, traces) = masked_self_attention(tape, normed, &attn, seq, plan, trace)?;
        let h = tape.add(x, a)?;
        let (g2, b2) = (self.var(tape, ids.ln2_g), self.var(tape, ids.ln2_b));
        let normed = tape.layer_norm(h, g2, b2)?;
        let (w1, c1) = (self.var(tape, ids.fc1_w), self.var(tape, ids.fc1_b));
        let hidden = tape.matmul(normed, w1)?;
        let hidden = tape.add_row_bias(hidden, c1)?;
        let hidden = tape.gelu(hidden)?;
        let (w2, c2) = (self.var(tape, ids.fc2_w), self.var(tape, ids.fc2_b));
        let out = tape.matmul(hidden, w2)?;
        let out = tape.add_row_bias(out, c2)?;
        Ok((tape.add(h, out)?, traces))
    }

    #[allow(clippy::too_many_arguments)]
    fn run_stack<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        mut x: Var,
        blocks: &[BlockIds],
        heads: usize,
        seq: &SeqLayout,
        planning: Planning<'_>,
        stack_tag: u64,
        active: bool,
        trace: TraceRequest,
        recorded: &mut Vec<Vec<Vec<usize>>>,
        summaries: &mut Vec<LayerSummary>,
    ) -> Result<Var> {
        for (l, ids) in blocks.iter().enumerate() {
            let base = if let Planning::Sample { seed } = planning { seed } else { 0 };
            let mut rng = seeds::stream(&[base, stack_tag, l as u64]);
            let mut plan: PlanSource<'_, StreamRng> = match planning {
                Planning::Sample { .. } if active => {
                    PlanSource::Sample { mode: self.config.drop_mode, ratio: self.config.drop_ratio, rng: &mut rng }
                }
                Planning::Replay(plans) if active => {
                    let stack = if stack_tag == 0 { &plans.encoder } else { &plans.decoder };
                    let layer = stack.get(l).ok_or_else(|| Error::rejected(format!("no recorded plan for layer {l}")))?;
                    PlanSource::Replay(layer)
                }
                _ => PlanSource::Off,
            };
            let (out, traces) = self.block(tape, x, ids, heads, seq, &mut plan, trace)?;
            x = out;
            recorded.push(traces.iter().map(|t| t.dropped.clone()).collect());
            if trace.masses || trace.f_tem || trace.suppression {
                let h = traces.len() as f64;
                let f_tem = trace.f_tem.then(|| {
                    let mut avg = vec![0.0; seq.len()];
                    for t in &traces {
                        for (a, v) in avg.iter_mut().zip(t.f_tem.as_deref().unwrap_or(&[])) {
                            *a += v / h;
                        }
                    }
                    avg
                });
                summaries.push(LayerSummary {
                    within_mass: traces.iter().map(|t| t.within_mass).sum::<f64>() / h,
                    between_mass: traces.iter().map(|t| t.between_mass).sum::<f64>() / h,
                    f_tem,
                    max_dropped_prob: traces.iter().map(|t| t.max_dropped_prob).fold(0.0, f64::max),
                    max_row_error: traces.iter().map(|t| t.max_row_error).fold(0.0, f64::max),
                });
            }
        }
        Ok(x)
    }

    fn drop_active(&self) -> bool {
        self.config.drop_mode != DropMode::None
    }

    /// Embeds the visible tokens and runs the encoder blocks.
    pub fn encode<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        patches: Var,
        mask: &MaskSet,
        planning: Planning<'_>,
        trace: TraceRequest,
        diagnostics: &mut Diagnostics,
    ) -> Result<Var> {
        let layout = self.layout();
        let params = EmbedVars {
            proj_w: self.var(tape, self.ids.patch_w),
            proj_b: self.var(tape, self.ids.patch_b),
            mask_token: self.var(tape, self.ids.mask_token),
            identity: self.ids.enc_identity.map(|id| self.var(tape, id)),
            positional: tape.constant_ref(&self.enc_pos),
        };
        let x = embed_tokens(tape, patches, &mask.visible, &params, &layout)?;
        let seq = SeqLayout::from_tokens(&layout, &mask.visible);
        let active = self.config.asad_in_encoder && self.drop_active();
        let trace = TraceRequest { suppression: trace.suppression, ..TraceRequest::default() };
        self.run_stack(
            tape,
            x,
            &self.ids.enc_blocks,
            self.config.encoder.heads,
            &seq,
            planning,
            0,
            active,
            trace,
            &mut diagnostics.plans.encoder,
            &mut diagnostics.encoder_layers,
        )
    }

    /// Projects the latent to decoder width, inserts mask tokens, runs the
    /// decoder blocks and predicts pixels for every token.
    pub fn decode<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        latent: Var,
        mask: &MaskSet,
        planning: Planning<'_>,
        trace: TraceRequest,
        diagnostics: &mut Diagnostics,
    ) -> Result<Var> {
        let layout = self.layout();
        let (g, b) = (self.var(tape, self.ids.enc_norm_g), self.var(tape, self.ids.enc_norm_b));
        let normed = tape.layer_norm(latent, g, b)?;
        let (w, c) = (self.var(tape, self.ids.dec_embed_w), self.var(tape, self.ids.dec_embed_b));
        let projected = tape.matmul(normed, w)?;
        let projected = tape.add_row_bias(projected, c)?;
        let mask_token = self.var(tape, self.ids.mask_token);
        let positional = tape.constant_ref(&self.dec_pos);
        let identity = self.ids.dec_identity.map(|id| self.var(tape, id));
        let x = assemble_full(tape, projected, mask, mask_token, positional, identity, &layout)?;
        let seq = SeqLayout::full(&layout);
        let x = self.run_stack(
            tape,
            x,
            &self.ids.dec_blocks,
            self.config.decoder.heads,
            &seq,
            planning,
            1,
            self.drop_active(),
            trace,
            &mut diagnostics.plans.decoder,
            &mut diagnostics.decoder_layers,
        )?;
        let (g, b) = (self.var(tape, self.ids.dec_norm_g), self.var(tape, self.ids.dec_norm_b));
        let x = tape.layer_norm(x, g, b)?;
        let (w, c) = (self.var(tape, self.ids.head_w), self.var(tape, self.ids.head_b));
        let pred = tape.matmul(x, w)?;
        tape.add_row_bias(pred, c)
    }

    /// Full pre-training forward pass for one prepared sample.
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        sample: &Sample<T>,
        planning: Planning<'_>,
        options: ForwardOptions,
    ) -> Result<ForwardOutput> {
        if sample.layout != self.layout() {
            return Err(Error::rejected("sample layout does not match the model input size"));
        }
        let patches = tape.constant(sample.patches.clone());
        let mut diagnostics = Diagnostics::default();
        let latent = self.encode(tape, patches, &sample.mask, planning, options.trace, &mut diagnostics)?;
        let predictions = self.decode(tape, latent, &sample.mask, planning, options.trace, &mut diagnostics)?;
        let loss = reconstruction_loss(tape, predictions, &sample.targets, &sample.mask)?;
        Ok(ForwardOutput { loss, predictions, latent, diagnostics })
    }

    /// Encoder and decoder pass with attention dropout disabled and no loss,
    /// returning pixel predictions for every token plus decoder diagnostics.
    pub fn analyze(&self, patches: &Tensor<T>, mask: &MaskSet, trace: TraceRequest) -> Result<(Tensor<T>, Diagnostics)> {
        let mut tape = Tape::new();
        let p = tape.constant_ref(patches);
        let mut diagnostics = Diagnostics::default();
        let latent = self.encode(&mut tape, p, mask, Planning::Off, TraceRequest::default(), &mut diagnostics)?;
        let pred = self.decode(&mut tape, latent, mask, Planning::Off, trace, &mut diagnostics)?;
        Ok((tape.value(pred).clone(), diagnostics))
    }

    /// Encoder features for every token of a pair, without masking or dropout.
    pub fn encode_features(&self, pair: &FramePair) -> Result<Tensor<T>> {
        let (patches, layout) = tokenizer::patchify::<T>(pair, self.config.patch)?;
        if layout != self.layout() {
            return Err(Error::rejected("pair does not match the model input size"));
        }
        let mut tape = Tape::new();
        let p = tape.constant(patches);
        let mut diagnostics = Diagnostics::default();
        let out = self.encode(&mut tape, p, &MaskSet::none(layout.total_tokens), Planning::Off, TraceRequest::default(), &mut diagnostics)?;
        Ok(tape.value(out).clone())
    }
}

/// Mean squared error over masked tokens against normalized targets.
pub fn reconstruction_loss<T: Real>(tape: &mut Tape<'_, T>, predictions: Var, targets: &Tensor<T>, mask: &MaskSet) -> Result<Var> {
    if mask.masked.is_empty() {
        return Err(Error::rejected("reconstruction loss needs at least one masked token"));
    }
    tape.masked_mse(predictions, targets.clone(), mask.masked.clone())
}

/// Draws a mask for `pair`, runs the forward pass with fresh drop plans and
/// returns the loss value together with the diagnostics.
pub fn forward_pretrain<T: Real>(pair: &FramePair, model: &Model<T>, rng: &mut StreamRng) -> Result<(f64, Diagnostics)> {
    let mask = tokenizer::sample_mask(&model.layout(), model.config().mask_ratio, rng)?;
    let sample = Sample::new(pair, model.config().patch, mask)?;
    let seed: u64 = rng.random();
    let mut tape = Tape::new();
    let trace = TraceRequest { masses: true, f_tem: model.config().drop_mode == DropMode::Asad, ..TraceRequest::default() };
    let out = model.forward(&mut tape, &sample, Planning::Sample { seed }, ForwardOptions { trace })?;
    Ok((tape.value(out.loss).item().f64(), out.diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::Frame;
    use rand::SeedableRng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_size: 16,
            patch: 4,
            encoder: StackConfig { depth: 1, width: 8, heads: 2 },
            decoder: StackConfig { depth: 2, width: 8, heads: 2 },
            mlp_ratio: 2,
            ..ModelConfig::default()
        }
    }

    fn noise_pair(size: usize, seed: u64) -> FramePair {
        let mut rng = StreamRng::seed_from_u64(seed);
        let mut f = || Frame { width: size, height: size, data: (0..size * size * 3).map(|_| rng.random::<f32>()).collect() };
        FramePair { frame_a: f(), frame_b: f(), start: 0, gap: 1, correspondence: None }
    }

    #[test]
    fn parameter_count_matches_config_arithmetic() {
        for cfg in [ModelConfig::default(), tiny_config(), ModelConfig { identity_embed: false, ..tiny_config() }] {
            let m = Model::<f32>::init(&cfg, 0).unwrap();
            assert_eq!(m.parameter_count(), cfg.parameter_count());
            assert_eq!(m.params().len(), cfg.tensor_count());
        }
    }

    #[test]
    fn encoder_output_has_visible_rows_and_decoder_all_rows() {
        let cfg = tiny_config();
        let model = Model::<f64>::init(&cfg, 1).unwrap();
        let mut rng = StreamRng::seed_from_u64(2);
        let mask = tokenizer::sample_mask(&model.layout(), 0.75, &mut rng).unwrap();
        let sample = Sample::new(&noise_pair(16, 3), 4, mask).unwrap();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &sample, Planning::Sample { seed: 9 }, ForwardOptions::default()).unwrap();
        assert_eq!(tape.value(out.latent).rows(), 32 - 24);
        assert_eq!(tape.value(out.predictions).rows(), 32);
        assert!(tape.value(out.loss).item().is_finite());
    }

    #[test]
    fn zero_depth_encoder_is_identity_on_embeddings() {
        let cfg = ModelConfig { encoder: StackConfig { depth: 0, width: 8, heads: 2 }, ..tiny_config() };
        let model = Model::<f64>::init(&cfg, 1).unwrap();
        let (patches, layout) = tokenizer::patchify::<f64>(&noise_pair(16, 4), 4).unwrap();
        let mask = MaskSet::from_masked(vec![0, 5, 17], layout.total_tokens).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(patches.clone());
        let mut diagnostics = Diagnostics::default();
        let out = model.encode(&mut tape, p, &mask, Planning::Off, TraceRequest::default(), &mut diagnostics).unwrap();

        let mut reference = Tape::new();
        let p = reference.constant(patches);
        let params = EmbedVars {
            proj_w: reference.param(&model.params[model.ids.patch_w].tensor, 0),
            proj_b: reference.param(&model.params[model.ids.patch_b].tensor, 1),
            mask_token: reference.param(&model.params[model.ids.mask_token].tensor, 2),
            identity: model.ids.enc_identity.map(|id| reference.param(&model.params[id].tensor, 3)),
            positional: reference.constant_ref(&model.enc_pos),
        };
        let emb = embed_tokens(&mut reference, p, &mask.visible, &params, &layout).unwrap();
        assert_eq!(tape.value(out), reference.value(emb));
    }

    #[test]
    fn forward_is_deterministic() {
        let model = Model::<f32>::init(&tiny_config(), 5).unwrap();
        let pair = noise_pair(16, 6);
        let a = forward_pretrain(&pair, &model, &mut StreamRng::seed_from_u64(8)).unwrap();
        let b = forward_pretrain(&pair, &model, &mut StreamRng::seed_from_u64(8)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.plans, b.1.plans);
    }

    #[test]
    fn static_pair_gives_finite_loss() {
        let model = Model::<f32>::init(&tiny_config(), 5).unwrap();
        let pair = FramePair::from_single(noise_pair(16, 2).frame_a);
        let (loss, diag) = forward_pretrain(&pair, &model, &mut StreamRng::seed_from_u64(1)).unwrap();
        assert!(loss.is_finite());
        assert_eq!(diag.decoder_layers.len(), 2);
    }

    #[test]
    fn zero_ratio_asad_matches_plain_attention() {
        let cfg = ModelConfig { drop_ratio: 0.0, ..tiny_config() };
        let asad = Model::<f64>::init(&cfg, 3).unwrap();
        let none = Model::<f64>::init(&ModelConfig { drop_mode: DropMode::None, ..cfg }, 3).unwrap();
        let mut rng = StreamRng::seed_from_u64(4);
        let mask = tokenizer::sample_mask(&asad.layout(), 0.75, &mut rng).unwrap();
        let sample = Sample::new(&noise_pair(16, 7), 4, mask).unwrap();
        let mut t1 = Tape::new();
        let o1 = asad.forward(&mut t1, &sample, Planning::Sample { seed: 1 }, ForwardOptions::default()).unwrap();
        let mut t2 = Tape::new();
        let o2 = none.forward(&mut t2, &sample, Planning::Sample { seed: 1 }, ForwardOptions::default()).unwrap();
        assert_eq!(t1.value(o1.predictions), t2.value(o2.predictions));
    }

    #[test]
    fn single_visible_token_still_predicts_finitely() {
        let model = Model::<f64>::init(&tiny_config(), 2).unwrap();
        let mask = MaskSet::from_masked((1..32).collect(), 32).unwrap();
        let sample = Sample::new(&noise_pair(16, 1), 4, mask).unwrap();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &sample, Planning::Sample { seed: 2 }, ForwardOptions::default()).unwrap();
        assert!(tape.value(out.predictions).all_finite());
    }

    #[test]
    fn loss_rejects_empty_mask() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::zeros(&[4, 3]));
        let mask = MaskSet::none(4);
        assert!(reconstruction_loss(&mut tape, p, &Tensor::zeros(&[0, 3]), &mask).is_err());
    }
}
