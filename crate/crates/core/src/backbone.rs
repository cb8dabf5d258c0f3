//! Toy pre-norm vision transformer with prefix-prompted self-attention and
//! the full prompted classifier built on top of it.
//!
//! Input is a `patches×patch_dim` grid. Patches are embedded to width `L`,
//! a class token is prepended and positional embeddings added. Each block is
//! `h + MHSA(LN(h))` followed by `h + MLP(LN(h))`; the class token after the
//! final LN is the readout. Prefix prompts enter raw: they are prepended to
//! the keys and values *after* the block's projections of `h`.
//!
//! The backbone is pre-trained on a held-out synthetic task and then frozen;
//! see [`pretrained_backbone`].

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};

use pcl_tensor::{backward, ParamId, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{self, PlusWParams};
use crate::codebook::Codebook;
use crate::datagen::{self, Sample, StreamSpec};
use crate::error::{Error, Result};
use crate::init::{self, derive_seed};
use crate::io;
use crate::optim::Adam;
use crate::pgm::{self, PgmParams};
use crate::pmm::{self, PmmParams};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Generation followed by modulation.
    Pc,
    PgmOnly,
    /// Generation followed by the Plus_W weighting network.
    PgmSpw,
    /// Top-K cosine selection of raw codes.
    HardSelect,
    /// No prompts; only the classifier head on the frozen encoding trains.
    FrozenBaseline,
    /// Same computation as [`Mode::FrozenBaseline`], kept as a separate arm
    /// name for forgetting comparisons.
    FinetuneHead,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Pc,
        Mode::PgmOnly,
        Mode::PgmSpw,
        Mode::HardSelect,
        Mode::FrozenBaseline,
        Mode::FinetuneHead,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Pc => "pc",
            Mode::PgmOnly => "pgm_only",
            Mode::PgmSpw => "pgm_spw",
            Mode::HardSelect => "hard_select",
            Mode::FrozenBaseline => "frozen_baseline",
            Mode::FinetuneHead => "finetune_head",
        }
    }

    pub fn uses_prompts(self) -> bool {
        !matches!(self, Mode::FrozenBaseline | Mode::FinetuneHead)
    }

    pub fn uses_codebook(self) -> bool {
        self.uses_prompts()
    }

    pub fn uses_generator(self) -> bool {
        matches!(self, Mode::Pc | Mode::PgmOnly | Mode::PgmSpw)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Mode::ALL.iter().map(|m| m.as_str()).collect();
                Error::Config(format!("unknown mode `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub classes: usize,
    pub per_class: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 32,
            lr: 3e-3,
            classes: 16,
            per_class: 48,
            seed: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub patches: usize,
    pub patch_dim: usize,
    /// Embedding width `L`, shared by tokens, prompts and codes.
    pub embed: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Classifier width; 0 means "take it from the stream".
    pub classes: usize,
    /// Rows per half of each task-agnostic prompt.
    pub g_len: usize,
    /// Leading blocks that receive the task-agnostic prompts. The rest
    /// receive instance prompts.
    pub agnostic_blocks: usize,
    /// Key/value prompt pairs `n` per instance-prompted block.
    pub prompt_pairs: usize,
    /// Codebook size `N`.
    pub codes: usize,
    pub pgm_depth: usize,
    pub alpha: f64,
    /// Seeds backbone initialization.
    pub backbone_seed: u64,
    /// Seeds every trainable prompt-side parameter.
    pub seed: u64,
    pub pretrain: PretrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patches: 16,
            patch_dim: 8,
            embed: 16,
            blocks: 5,
            heads: 2,
            mlp_hidden: 32,
            classes: 0,
            g_len: 5,
            agnostic_blocks: 2,
            prompt_pairs: 4,
            codes: 32,
            pgm_depth: 2,
            alpha: crate::codebook::DEFAULT_ALPHA,
            backbone_seed: 0,
            seed: 0,
            pretrain: PretrainConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Full-size prompt pool: 256 codes and 25 prompt pairs.
    pub fn full_scale() -> Self {
        Self {
            codes: crate::codebook::FULL_CODES,
            prompt_pairs: 25,
            ..Self::default()
        }
    }

    pub fn tokens(&self) -> usize {
        self.patches + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed / self.heads
    }

    pub fn instance_blocks(&self) -> std::ops::Range<usize> {
        self.agnostic_blocks..self.blocks
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("model: {msg}")));
        if self.embed == 0 || self.heads == 0 || !self.embed.is_multiple_of(self.heads) {
            return bad(format!("embed {} not divisible by heads {}", self.embed, self.heads));
        }
        if self.patches == 0 || self.patch_dim == 0 || self.blocks == 0 || self.mlp_hidden == 0 {
            return bad("geometry extents must be positive".into());
        }
        if self.agnostic_blocks > self.blocks {
            return bad(format!(
                "{} agnostic blocks exceed {} blocks",
                self.agnostic_blocks, self.blocks
            ));
        }
        if self.classes == 0 {
            return bad("class count must be positive".into());
        }
        if self.codes == 0 || self.pgm_depth == 0 {
            return bad("codebook size and generator depth must be positive".into());
        }
        if self.prompt_pairs == 0 || self.g_len == 0 {
            return bad("prompt lengths must be positive".into());
        }
        if self.prompt_pairs > self.codes {
            return bad(format!(
                "{} prompt pairs exceed {} codes (hard selection needs n <= N)",
                self.prompt_pairs, self.codes
            ));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1)", self.alpha));
        }
        Ok(())
    }
}

/// Parameter ids of one transformer block.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Ids of the backbone parameters inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Backbone {
    patch_w: ParamId,
    patch_b: ParamId,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<BlockParams>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    heads: usize,
}

/// Prefix pair for one block: keys then values, each `n×L`.
#[derive(Debug, Clone, Copy)]
pub struct Prefix<'t> {
    pub keys: Var<'t>,
    pub values: Var<'t>,
}

impl<'t> Prefix<'t> {
    /// Splits `2n×L` prompts into their key and value halves.
    pub fn split(prompts: Var<'t>) -> Result<Self> {
        let (rows, _) = prompts.shape();
        if rows % 2 != 0 {
            return Err(Error::Dimension(format!("{rows} prompt rows is odd")));
        }
        Ok(Self {
            keys: prompts.slice_rows(0, rows / 2)?,
            values: prompts.slice_rows(rows / 2, rows)?,
        })
    }
}

fn layer_norm<'t>(tape: &'t Tape, store: &ParamStore, x: Var<'t>, g: ParamId, b: ParamId) -> Result<Var<'t>> {
    Ok(x
        .layer_norm_rows(LN_EPS)?
        .mul_row(tape.param(store, g))?
        .add_row(tape.param(store, b))?)
}

impl Backbone {
    /// Adds freshly initialized backbone weights to `store`.
    pub fn init(store: &mut ParamStore, cfg: &ModelConfig, trainable: bool) -> Self {
        let mut rng = init::rng(derive_seed(cfg.backbone_seed, "backbone"));
        let l = cfg.embed;
        let add = |store: &mut ParamStore, name: String, t: Tensor| store.add(name, t, trainable);
        let patch_w = add(store, "bb.patch.w".into(), init::linear(&mut rng, cfg.patch_dim, l));
        let patch_b = add(store, "bb.patch.b".into(), Tensor::zeros(1, l));
        let cls = add(store, "bb.cls".into(), init::normal(&mut rng, 1, l, 0.02));
        let pos = add(store, "bb.pos".into(), init::normal(&mut rng, cfg.tokens(), l, 0.02));
        let blocks = (0..cfg.blocks)
            .map(|b| {
                let mut p = |name: &str, t: Tensor| add(store, format!("bb.block{b}.{name}"), t);
                BlockParams {
                    ln1_g: p("ln1.g", Tensor::ones(1, l)),
                    ln1_b: p("ln1.b", Tensor::zeros(1, l)),
                    wq: p("wq", init::linear(&mut rng, l, l)),
                    wk: p("wk", init::linear(&mut rng, l, l)),
                    wv: p("wv", init::linear(&mut rng, l, l)),
                    wo: p("wo", init::linear(&mut rng, l, l)),
                    bo: p("bo", Tensor::zeros(1, l)),
                    ln2_g: p("ln2.g", Tensor::ones(1, l)),
                    ln2_b: p("ln2.b", Tensor::zeros(1, l)),
                    w1: p("mlp.w1", init::linear(&mut rng, l, cfg.mlp_hidden)),
                    b1: p("mlp.b1", Tensor::zeros(1, cfg.mlp_hidden)),
                    w2: p("mlp.w2", init::linear(&mut rng, cfg.mlp_hidden, l)),
                    b2: p("mlp.b2", Tensor::zeros(1, l)),
                }
            })
            .collect();
        let lnf_g = add(store, "bb.lnf.g".into(), Tensor::ones(1, l));
        let lnf_b = add(store, "bb.lnf.b".into(), Tensor::zeros(1, l));
        Self {
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            lnf_g,
            lnf_b,
            heads: cfg.heads,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.patch_w, self.patch_b, self.cls, self.pos];
        for b in &self.blocks {
            ids.extend([
                b.ln1_g, b.ln1_b, b.wq, b.wk, b.wv, b.wo, b.bo, b.ln2_g, b.ln2_b, b.w1, b.b1, b.w2, b.b2,
            ]);
        }
        ids.extend([self.lnf_g, self.lnf_b]);
        ids
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.blocks
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Token sequence `[cls; x·W + b] + pos`.
    pub fn embed<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Tensor) -> Result<Var<'t>> {
        let pos = tape.param(store, self.pos);
        let (tokens, _) = pos.shape();
        if x.rows() + 1 != tokens || x.cols() != store.value(self.patch_w).rows() {
            return Err(Error::Dimension(format!(
                "input {:?} does not match {} patches of width {}",
                x.shape(),
                tokens - 1,
                store.value(self.patch_w).rows()
            )));
        }
        let patches = tape
            .constant(x.clone())
            .matmul(tape.param(store, self.patch_w))?
            .add_row(tape.param(store, self.patch_b))?;
        let seq = tape.concat_rows(&[tape.param(store, self.cls), patches])?;
        Ok(seq.add(pos)?)
    }

    /// Multi-head self-attention of block `block` on `h` with optional raw
    /// prefixes. Queries come from `h` alone, so the output keeps `h`'s row
    /// count. Per-head attention probabilities are pushed to `probs` when
    /// given.
    pub fn mhsa_prefix<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        h: Var<'t>,
        prefix: Option<Prefix<'t>>,
        block: usize,
        mut probs: Option<&mut Vec<Tensor>>,
    ) -> Result<Var<'t>> {
        let p = self
            .blocks
            .get(block)
            .ok_or_else(|| Error::Dimension(format!("block {block} of {}", self.blocks.len())))?;
        let (rows, width) = h.shape();
        let q = h.matmul(tape.param(store, p.wq))?;
        let mut k = h.matmul(tape.param(store, p.wk))?;
        let mut v = h.matmul(tape.param(store, p.wv))?;
        if let Some(prefix) = prefix {
            let (kn, kw) = prefix.keys.shape();
            let (vn, vw) = prefix.values.shape();
            if kn != vn || kw != width || vw != width {
                return Err(Error::Dimension(format!(
                    "prefix keys {:?} / values {:?} vs width {width}",
                    (kn, kw),
                    (vn, vw)
                )));
            }
            if kn > 0 {
                k = tape.concat_rows(&[prefix.keys, k])?;
                v = tape.concat_rows(&[prefix.values, v])?;
            }
        }
        let dh = width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let wo = tape.param(store, p.wo);
        let mut out: Option<Var<'t>> = None;
        for head in 0..self.heads {
            let (a, b) = (head * dh, (head + 1) * dh);
            let scores = q.slice_cols(a, b)?.matmul(k.slice_cols(a, b)?.t()?)?.scale(scale)?;
            let attn = scores.softmax_rows()?;
            if let Some(sink) = probs.as_deref_mut() {
                sink.push((*attn.value()).clone());
            }
            let mixed = attn.matmul(v.slice_cols(a, b)?)?;
            let projected = mixed.matmul(wo.slice_rows(a, b)?)?;
            out = Some(match out {
                None => projected,
                Some(acc) => acc.add(projected)?,
            });
        }
        let out = out.expect("at least one head");
        debug_assert_eq!(out.shape().0, rows);
        Ok(out.add_row(tape.param(store, p.bo))?)
    }

    pub fn block<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        h: Var<'t>,
        prefix: Option<Prefix<'t>>,
        block: usize,
    ) -> Result<Var<'t>> {
        let p = &self.blocks[block];
        let z = layer_norm(tape, store, h, p.ln1_g, p.ln1_b)?;
        let h = h.add(self.mhsa_prefix(tape, store, z, prefix, block, None)?)?;
        let z = layer_norm(tape, store, h, p.ln2_g, p.ln2_b)?;
        let m = z
            .matmul(tape.param(store, p.w1))?
            .add_row(tape.param(store, p.b1))?
            .gelu()?
            .matmul(tape.param(store, p.w2))?
            .add_row(tape.param(store, p.b2))?;
        Ok(h.add(m)?)
    }

    /// Final-LN class token (`1×L`) with per-block prefixes.
    pub fn readout<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: &Tensor,
        prefixes: &[Option<Prefix<'t>>],
    ) -> Result<Var<'t>> {
        let mut h = self.embed(tape, store, x)?;
        for b in 0..self.blocks.len() {
            h = self.block(tape, store, h, prefixes.get(b).copied().flatten(), b)?;
        }
        let cls = h.slice_rows(0, 1)?;
        layer_norm(tape, store, cls, self.lnf_g, self.lnf_b)
    }

    /// Prompt-free readout, computed off any caller tape.
    pub fn encode(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let f = self.readout(&tape, store, x, &[])?;
        Ok((*f.value()).clone())
    }
}

/// Named backbone tensors, as produced by pre-training.
pub type BackboneWeights = Vec<(String, Tensor)>;

fn pretrain(cfg: &ModelConfig, stream: &StreamSpec) -> Result<BackboneWeights> {
    let pc = &cfg.pretrain;
    let mut store = ParamStore::new();
    let bb = Backbone::init(&mut store, cfg, true);
    if pc.steps > 0 {
        let mut rng = init::rng(derive_seed(pc.seed, "pretrain-head"));
        let head_w = store.add("pre.head.w", init::normal(&mut rng, cfg.embed, pc.classes, 0.02), true);
        let head_b = store.add("pre.head.b", Tensor::zeros(1, pc.classes), true);
        let data = datagen::gen_pretask(stream, pc.classes, pc.per_class, pc.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut cursor = data.len();
        let mut adam = Adam::default();
        for _ in 0..pc.steps {
            let tape = Tape::new();
            let mut loss: Option<Var> = None;
            for _ in 0..pc.batch.min(data.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let s = &data[order[cursor]];
                cursor += 1;
                let f = bb.readout(&tape, &store, &s.x, &[])?;
                let logits = f
                    .matmul(tape.param(&store, head_w))?
                    .add_row(tape.param(&store, head_b))?;
                let ce = logits.cross_entropy(&[s.y])?;
                loss = Some(match loss {
                    None => ce,
                    Some(acc) => acc.add(ce)?,
                });
            }
            let loss = loss.expect("nonempty batch").scale(1.0 / pc.batch.min(data.len()) as f64)?;
            let grads = backward(loss)?;
            adam.step(&mut store, &grads, pc.lr);
        }
    }
    Ok(bb
        .ids()
        .into_iter()
        .map(|id| {
            let p = store.get(id);
            (p.name.clone(), p.value().clone())
        })
        .collect())
}

type Memo = Mutex<HashMap<String, Arc<OnceLock<std::result::Result<Arc<BackboneWeights>, String>>>>>;

fn memo() -> &'static Memo {
    static MEMO: OnceLock<Memo> = OnceLock::new();
    MEMO.get_or_init(Default::default)
}

/// Backbone weights pre-trained on the held-out task for this geometry and
/// world. Computed once per process and shared by every caller.
pub fn pretrained_backbone(cfg: &ModelConfig, stream: &StreamSpec) -> Result<Arc<BackboneWeights>> {
    #[derive(Serialize)]
    struct Key<'a> {
        patches: usize,
        patch_dim: usize,
        embed: usize,
        blocks: usize,
        heads: usize,
        mlp_hidden: usize,
        backbone_seed: u64,
        pretrain: &'a PretrainConfig,
        latent_dim: usize,
        spread: f64,
        cluster_scale: f64,
        pixel_noise: f64,
        world_seed: u64,
    }
    let key = serde_json::to_string(&Key {
        patches: cfg.patches,
        patch_dim: cfg.patch_dim,
        embed: cfg.embed,
        blocks: cfg.blocks,
        heads: cfg.heads,
        mlp_hidden: cfg.mlp_hidden,
        backbone_seed: cfg.backbone_seed,
        pretrain: &cfg.pretrain,
        latent_dim: stream.latent_dim,
        spread: stream.spread,
        cluster_scale: stream.cluster_scale,
        pixel_noise: stream.pixel_noise,
        world_seed: stream.world_seed,
    })?;
    let cell = Arc::clone(memo().lock().expect("memo lock").entry(key).or_default());
    cell.get_or_init(|| pretrain(cfg, stream).map(Arc::new).map_err(|e| e.to_string()))
        .clone()
        .map_err(|e| Error::Data(format!("backbone pre-training failed: {e}")))
}

/// One instance-prompted block's generated prompts.
#[derive(Debug, Clone)]
pub struct PromptTrace {
    pub block: usize,
    /// Coefficients `A` (`2n×N`); absent for hard selection.
    pub coefficients: Option<Tensor>,
    /// Prompts before weighting (`2n×L`).
    pub prompts: Tensor,
    /// Per-row weights (`1×2n`); absent when no weighting is applied.
    pub weights: Option<Tensor>,
}

/// Output of one prompted forward pass.
pub struct Forward<'t> {
    pub logits: Var<'t>,
    /// Matching term of the hard-selection arm.
    pub matching: Option<Var<'t>>,
    pub traces: Vec<PromptTrace>,
}

/// Backbone, prompts, prompt machinery and classifier in one store.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    /// Task-agnostic prompts per leading block (`2·g_len×L`).
    pub agnostic: Vec<ParamId>,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub codebook: Codebook,
    pub pgms: Vec<PgmParams>,
    pub pmm: PmmParams,
    pub plusw: PlusWParams,
    /// Set by [`ToyModel::set_mode`]: forces every modulation weight to 1.
    pub force_unit_weights: bool,
}

impl ToyModel {
    /// Builds a model around pre-trained backbone weights (pre-training on
    /// first use).
    pub fn new(cfg: ModelConfig, stream: &StreamSpec) -> Result<Self> {
        cfg.validate()?;
        let weights = pretrained_backbone(&cfg, stream)?;
        Self::with_backbone(cfg, &weights)
    }

    /// Builds a model with the given backbone tensors and freshly
    /// initialized prompt-side parameters.
    pub fn with_backbone(cfg: ModelConfig, weights: &[(String, Tensor)]) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::init(&mut store, &cfg, false);
        for (name, t) in weights {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Data(format!("unknown backbone tensor {name}")))?;
            if store.value(id).shape() != t.shape() {
                return Err(Error::Dimension(format!(
                    "backbone tensor {name}: {:?} vs {:?}",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            store.get_mut(id).set_value(t.clone());
        }
        let l = cfg.embed;
        let mut rng = init::rng(derive_seed(cfg.seed, "prompts"));
        let bound = 1.0 / (l as f64).sqrt();
        let agnostic = (0..cfg.agnostic_blocks)
            .map(|b| store.add(format!("g.block{b}"), init::uniform(&mut rng, 2 * cfg.g_len, l, bound), true))
            .collect();
        let head_w = store.add("head.w", init::normal(&mut rng, l, cfg.classes, 0.02), true);
        let head_b = store.add("head.b", Tensor::zeros(1, cfg.classes), true);
        let codebook = Codebook::init(&mut store, cfg.codes, l, cfg.alpha, derive_seed(cfg.seed, "codebook"))?;
        let pgms = cfg
            .instance_blocks()
            .map(|b| {
                PgmParams::init(
                    &mut store,
                    &format!("pgm.block{b}"),
                    l,
                    cfg.codes,
                    cfg.prompt_pairs,
                    cfg.pgm_depth,
                    &mut rng,
                )
            })
            .collect();
        let pmm = PmmParams::init(&mut store, l, &mut rng);
        let plusw = PlusWParams::init(&mut store, l, &mut rng);
        Ok(Self {
            cfg,
            store,
            backbone,
            agnostic,
            head_w,
            head_b,
            codebook,
            pgms,
            pmm,
            plusw,
            force_unit_weights: false,
        })
    }

    /// Marks exactly the parameters `mode` trains as trainable.
    pub fn set_mode(&mut self, mode: Mode) {
        let ids: Vec<ParamId> = self.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            self.store.set_trainable(id, false);
        }
        let mut on = vec![self.head_w, self.head_b];
        if mode.uses_prompts() {
            on.extend(&self.agnostic);
            on.push(self.codebook.id());
        }
        if mode.uses_generator() {
            on.extend(self.pgms.iter().flat_map(PgmParams::ids));
        }
        match mode {
            Mode::Pc => on.extend(self.pmm.ids()),
            Mode::PgmSpw => on.extend(self.plusw.ids()),
            _ => {}
        }
        for id in on {
            self.store.set_trainable(id, true);
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    /// Prompt-free frozen encoding `F` of `x`.
    pub fn encode_query(&self, x: &Tensor) -> Result<Tensor> {
        self.backbone.encode(&self.store, x)
    }

    /// Instance prompts for one block (`2n×L`, before splitting) plus trace.
    fn instance_prompts<'t>(
        &self,
        tape: &'t Tape,
        query: &Tensor,
        slot: usize,
        mode: Mode,
        selected: Option<Var<'t>>,
    ) -> Result<(Var<'t>, PromptTrace)> {
        let block = self.cfg.agnostic_blocks + slot;
        if let (Mode::HardSelect, Some(p)) = (mode, selected) {
            return Ok((
                p,
                PromptTrace {
                    block,
                    coefficients: None,
                    prompts: (*p.value()).clone(),
                    weights: None,
                },
            ));
        }
        let m = tape.param(&self.store, self.codebook.id());
        let q = tape.constant(query.clone());
        let a = self.pgms[slot].coefficients(tape, &self.store, q, m)?;
        let p = pgm::generate_prompts(a, m)?;
        let (out, weights) = match mode {
            Mode::Pc => {
                let w = if self.force_unit_weights {
                    tape.constant(Tensor::ones(1, p.shape().0))
                } else {
                    self.pmm.weights(tape, &self.store, q, p)?
                };
                (pmm::modulate(w, p)?, Some(w))
            }
            Mode::PgmSpw => {
                let (w, out) = baselines::spw_modulate(tape, &self.store, &self.plusw, query, p)?;
                (out, Some(w))
            }
            _ => (p, None),
        };
        Ok((
            out,
            PromptTrace {
                block,
                coefficients: Some((*a.value()).clone()),
                prompts: (*p.value()).clone(),
                weights: weights.map(|w| (*w.value()).clone()),
            },
        ))
    }

    /// Logits (`1×C`) for one sample whose frozen encoding is `query`.
    pub fn forward<'t>(&self, tape: &'t Tape, x: &Tensor, query: &Tensor, mode: Mode) -> Result<Forward<'t>> {
        let head = |f: Var<'t>| -> Result<Var<'t>> {
            Ok(f.matmul(tape.param(&self.store, self.head_w))?
                .add_row(tape.param(&self.store, self.head_b))?)
        };
        if !mode.uses_prompts() {
            return Ok(Forward {
                logits: head(tape.constant(query.clone()))?,
                matching: None,
                traces: Vec::new(),
            });
        }
        let mut prefixes: Vec<Option<Prefix<'t>>> = Vec::with_capacity(self.cfg.blocks);
        for &g in &self.agnostic {
            prefixes.push(Some(Prefix::split(tape.param(&self.store, g))?));
        }
        let (selected, matching) = if mode == Mode::HardSelect {
            let m = tape.param(&self.store, self.codebook.id());
            let (_, prompts, matching) = baselines::hard_select(tape, query, m, self.cfg.prompt_pairs)?;
            (Some(prompts), Some(matching))
        } else {
            (None, None)
        };
        let mut traces = Vec::new();
        for slot in 0..self.cfg.instance_blocks().len() {
            let (p, trace) = self.instance_prompts(tape, query, slot, mode, selected)?;
            prefixes.push(Some(Prefix::split(p)?));
            traces.push(trace);
        }
        let f = self.backbone.readout(tape, &self.store, x, &prefixes)?;
        Ok(Forward {
            logits: head(f)?,
            matching,
            traces,
        })
    }

    /// Class scores for `x` as plain values.
    pub fn logits(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let query = self.encode_query(x)?;
        let tape = Tape::new();
        let out = self.forward(&tape, x, &query, mode)?;
        let logits = (*out.logits.value()).clone();
        Ok(logits)
    }

    /// Most likely class among the first `seen` classes.
    pub fn predict(&self, x: &Tensor, mode: Mode, seen: usize) -> Result<usize> {
        let logits = self.logits(x, mode)?;
        let seen = seen.clamp(1, logits.cols());
        Ok(Tensor::new(1, seen, logits.data()[..seen].to_vec())?.argmax_row(0))
    }

    /// Fraction of `samples` classified correctly.
    pub fn accuracy(&self, samples: &[Sample], mode: Mode, seen: usize) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Data("accuracy of an empty set".into()));
        }
        let mut correct = 0usize;
        for s in samples {
            if self.predict(&s.x, mode, seen)? == s.y {
                correct += 1;
            }
        }
        Ok(correct as f64 / samples.len() as f64)
    }

    /// SHA-256 over every backbone tensor's name and bytes.
    pub fn frozen_hash(&self) -> String {
        let mut h = Sha256::new();
        for id in self.backbone.ids() {
            let p = self.store.get(id);
            h.update(p.name.as_bytes());
            h.update(p.value().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Every parameter by name, in store order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value().clone()))
            .collect()
    }

    /// Writes `params.bin` (every parameter plus the codebook ensemble) and
    /// `model.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
        let named = self.named_params();
        let mut entries: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        entries.push(("codebook.ema", self.codebook.ema()));
        io::write_tensors(&dir.join("params.bin"), &entries)?;
        io::write_json(
            &dir.join("model.json"),
            &ModelMeta {
                config: self.cfg.clone(),
                ema_updates: self.codebook.ema_updates(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: ModelMeta = io::read_json(&dir.join("model.json"))?;
        let tensors = io::read_tensors(&dir.join("params.bin"))?;
        let mut model = Self::with_backbone(meta.config, &[])?;
        let mut ema = None;
        for (name, t) in tensors {
            if name == "codebook.ema" {
                ema = Some(t);
                continue;
            }
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| Error::Data(format!("checkpoint has unknown tensor {name}")))?;
            if model.store.value(id).shape() != t.shape() {
                return Err(Error::Dimension(format!("checkpoint tensor {name} has shape {:?}", t.shape())));
            }
            model.store.get_mut(id).set_value(t);
        }
        let ema = ema.ok_or_else(|| Error::Data("checkpoint lacks codebook.ema".into()))?;
        model.codebook = Codebook::from_parts(model.codebook.id(), ema, model.cfg.alpha, meta.ema_updates);
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    config: ModelConfig,
    ema_updates: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            patches: 3,
            patch_dim: 4,
            embed: 8,
            blocks: 3,
            heads: 2,
            mlp_hidden: 8,
            classes: 5,
            g_len: 2,
            agnostic_blocks: 1,
            prompt_pairs: 2,
            codes: 6,
            pgm_depth: 1,
            ..ModelConfig::default()
        }
    }

    fn tiny() -> ToyModel {
        ToyModel::with_backbone(tiny_cfg(), &[]).unwrap()
    }

    fn sample(seed: u64) -> Tensor {
        init::normal(&mut init::rng(seed), 3, 4, 1.0)
    }

    #[test]
    fn modes_parse() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("bogus".parse::<Mode>().is_err());
    }

    #[test]
    fn invalid_configs() {
        let cfg = ModelConfig { heads: 3, ..tiny_cfg() };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig { prompt_pairs: 7, ..tiny_cfg() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn encode_query_is_deterministic_and_distinct() {
        let m = tiny();
        let x = sample(1);
        assert_eq!(m.encode_query(&x).unwrap(), m.encode_query(&x).unwrap());
        for s in 0..100 {
            let a = m.encode_query(&sample(100 + 2 * s)).unwrap();
            let b = m.encode_query(&sample(101 + 2 * s)).unwrap();
            assert!(a.max_abs_diff(&b) > 0.0);
        }
        assert!(m.encode_query(&Tensor::zeros(4, 4)).is_err());
    }

    /// Multi-head attention in plain tensor arithmetic.
    fn reference_attention(m: &ToyModel, h: &Tensor, block: usize) -> Tensor {
        let p = &m.backbone.blocks[block];
        let v = |id| m.store.value(id).clone();
        let (q, k, val) = (h.matmul(&v(p.wq)).unwrap(), h.matmul(&v(p.wk)).unwrap(), h.matmul(&v(p.wv)).unwrap());
        let (rows, width) = h.shape();
        let heads = m.cfg.heads;
        let dh = width / heads;
        let mut concat = Tensor::zeros(rows, width);
        for hd in 0..heads {
            for i in 0..rows {
                let scores: Vec<f64> = (0..rows)
                    .map(|j| (0..dh).map(|c| q.get(i, hd * dh + c) * k.get(j, hd * dh + c)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    let acc: f64 = (0..rows).map(|j| e[j] / z * val.get(j, hd * dh + c)).sum();
                    concat.set(i, hd * dh + c, acc);
                }
            }
        }
        let out = concat.matmul(&v(p.wo)).unwrap();
        Tensor::from_fn(rows, width, |r, c| out.get(r, c) + v(p.bo).get(0, c))
    }

    #[test]
    fn no_prefix_equals_plain_attention() {
        let m = tiny();
        let hv = init::normal(&mut init::rng(2), 4, 8, 1.0);
        let tape = Tape::new();
        let out = m
            .backbone
            .mhsa_prefix(&tape, &m.store, tape.constant(hv.clone()), None, 0, None)
            .unwrap();
        assert!(out.value().max_abs_diff(&reference_attention(&m, &hv, 0)) <= 1e-12);
    }

    #[test]
    fn two_tokens_one_prefix_by_hand() {
        let cfg = ModelConfig {
            patches: 1,
            patch_dim: 2,
            embed: 2,
            heads: 1,
            blocks: 1,
            agnostic_blocks: 1,
            prompt_pairs: 1,
            codes: 2,
            ..tiny_cfg()
        };
        let mut m = ToyModel::with_backbone(cfg, &[]).unwrap();
        let p = m.backbone.blocks[0].clone();
        for id in [p.wq, p.wk, p.wv, p.wo] {
            m.store.get_mut(id).set_value(Tensor::eye(2));
        }
        let tape = Tape::new();
        let h = tape.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let prefix = Prefix {
            keys: tape.constant(Tensor::from_rows(&[&[0.5, -0.3]])),
            values: tape.constant(Tensor::zeros(1, 2)),
        };
        let out = m.backbone.mhsa_prefix(&tape, &m.store, h, Some(prefix), 0, None).unwrap().value();
        let r = 2f64.sqrt();
        // Row 0 scores against [prefix, token0, token1]: [0.5, 1, 0]/√2.
        let e0 = [0.5 / r, 1.0 / r, 0.0].map(f64::exp);
        let z0: f64 = e0.iter().sum();
        // Row 1 scores: [-0.3, 0, 1]/√2.
        let e1 = [-0.3 / r, 0.0, 1.0 / r].map(f64::exp);
        let z1: f64 = e1.iter().sum();
        let want = Tensor::from_rows(&[&[e0[1] / z0, e0[2] / z0], &[e1[1] / z1, e1[2] / z1]]);
        assert!(out.max_abs_diff(&want) <= 1e-10, "{out:?} vs {want:?}");
        // The prefix leaks attention mass: rows no longer sum to one.
        assert!(out.row(0).iter().sum::<f64>() < 1.0);
    }

    #[test]
    fn prefix_attention_rows_sum_to_one() {
        let m = tiny();
        let tape = Tape::new();
        let mut rng = init::rng(3);
        let h = tape.constant(init::normal(&mut rng, 4, 8, 1.0));
        for n in [1, 4] {
            let prefix = Prefix {
                keys: tape.constant(init::normal(&mut rng, n, 8, 1.0)),
                values: tape.constant(init::normal(&mut rng, n, 8, 1.0)),
            };
            let mut probs = Vec::new();
            let out = m
                .backbone
                .mhsa_prefix(&tape, &m.store, h, Some(prefix), 1, Some(&mut probs))
                .unwrap();
            assert_eq!(out.shape(), (4, 8));
            assert_eq!(probs.len(), 2);
            for p in probs {
                assert_eq!(p.shape(), (4, 4 + n));
                for r in 0..4 {
                    assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn baseline_is_head_on_encoding() {
        let m = tiny();
        let x = sample(4);
        let f = m.encode_query(&x).unwrap();
        let want = f
            .matmul(m.store.value(m.head_w))
            .unwrap()
            .add(m.store.value(m.head_b))
            .unwrap();
        assert_eq!(m.logits(&x, Mode::FrozenBaseline).unwrap(), want);
        assert_eq!(m.logits(&x, Mode::FinetuneHead).unwrap(), want);
    }

    #[test]
    fn unit_weights_make_pc_match_generation_only() {
        let mut m = tiny();
        let x = sample(5);
        let pc = m.logits(&x, Mode::Pc).unwrap();
        let gen = m.logits(&x, Mode::PgmOnly).unwrap();
        assert!(pc.max_abs_diff(&gen) > 0.0);
        m.force_unit_weights = true;
        let forced = m.logits(&x, Mode::Pc).unwrap();
        assert!(forced.max_abs_diff(&gen) <= 1e-12);
    }

    #[test]
    fn all_modes_produce_finite_logits_and_traces() {
        let m = tiny();
        let x = sample(6);
        let q = m.encode_query(&x).unwrap();
        for mode in Mode::ALL {
            let tape = Tape::new();
            let out = m.forward(&tape, &x, &q, mode).unwrap();
            assert_eq!(out.logits.shape(), (1, 5));
            assert!(out.logits.value().is_finite());
            let expected = if mode.uses_prompts() { 2 } else { 0 };
            assert_eq!(out.traces.len(), expected, "{mode}");
            assert_eq!(out.matching.is_some(), mode == Mode::HardSelect);
        }
    }

    #[test]
    fn mode_trainability() {
        let mut m = tiny();
        m.set_mode(Mode::FrozenBaseline);
        assert_eq!(m.trainable_ids(), vec![m.head_w, m.head_b]);
        m.set_mode(Mode::Pc);
        let ids = m.trainable_ids();
        assert!(ids.contains(&m.pmm.w_query));
        assert!(ids.contains(&m.codebook.id()));
        assert!(!ids.contains(&m.plusw.fc_w));
        for id in m.backbone.ids() {
            assert!(!ids.contains(&id));
        }
        m.set_mode(Mode::HardSelect);
        let ids = m.trainable_ids();
        assert!(!ids.contains(&m.pgms[0].head_w));
        assert!(ids.contains(&m.codebook.id()));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let mut m = tiny();
        m.codebook.ema_update(&m.store);
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = ToyModel::load(dir.path()).unwrap();
        assert_eq!(back.named_params().len(), m.named_params().len());
        for ((na, ta), (nb, tb)) in m.named_params().iter().zip(back.named_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_le_bytes(), tb.to_le_bytes());
        }
        assert_eq!(back.codebook.ema(), m.codebook.ema());
        assert_eq!(back.codebook.ema_updates(), 1);
        assert_eq!(back.frozen_hash(), m.frozen_hash());
    }
}
