//! Decoder-only transformer: token and position embeddings, pre-norm blocks of
//! causal attention followed by a GELU MLP, a final layer norm and an
//! unembedding. Every forward pass runs on a [`Tape`], so inference, patched
//! runs and training share one code path and produce identical bits.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::numerics::{argmax, softmax, Matrix, Segment, Tape, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// 4 layers, width 64, 4 heads, MLP width 256.
    pub fn default_for(vocab_size: usize, max_context: usize, seed: u64) -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_mlp: 256,
            vocab_size,
            max_context,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d_model < 2
            || self.n_layers == 0
            || self.d_mlp == 0
            || self.vocab_size == 0
            || self.max_context == 0
        {
            return bad(format!(
                "all model dimensions must be positive (d_model >= 2): {self:?}"
            ));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let (d, m, v, c) = (self.d_model, self.d_mlp, self.vocab_size, self.max_context);
        let per_layer = 2 * d + 4 * d * d + 2 * d + d * m + m + m * d + d;
        v * d + c * d + self.n_layers * per_layer + 2 * d + d * v
    }
}

/// Weights of one transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    /// `d_model × d_mlp`; produces the keys.
    pub w_in: Matrix,
    pub b_in: Matrix,
    /// `d_mlp × d_model`; maps keys to values.
    pub w_out: Matrix,
    pub b_out: Matrix,
}

impl LayerParams {
    const NAMES: [&'static str; 12] = [
        "ln1_gain", "ln1_bias", "w_q", "w_k", "w_v", "w_o", "ln2_gain", "ln2_bias", "w_in", "b_in",
        "w_out", "b_out",
    ];

    fn tensors(&self) -> [&Matrix; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_in,
            &self.b_in,
            &self.w_out,
            &self.b_out,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_in,
            &mut self.b_in,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerParams {
    pub config: ModelConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerParams>,
    pub ln_f_gain: Matrix,
    pub ln_f_bias: Matrix,
    /// `d_model × vocab_size`.
    pub unembed: Matrix,
}

impl TransformerParams {
    /// All parameter matrices in declared (serialization) order.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.extend([&self.ln_f_gain, &self.ln_f_bias, &self.unembed]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.extend([&mut self.ln_f_gain, &mut self.ln_f_bias, &mut self.unembed]);
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["tok_emb".to_owned(), "pos_emb".to_owned()];
        for i in 0..self.layers.len() {
            out.extend(LayerParams::NAMES.iter().map(|n| format!("layers.{i}.{n}")));
        }
        out.extend(["ln_f_gain", "ln_f_bias", "unembed"].map(str::to_owned));
        out
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors().iter().map(|m| m.shape()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    /// Builds zero-filled parameters with the shapes implied by `config`.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, m, v, c) = (
            config.d_model,
            config.d_mlp,
            config.vocab_size,
            config.max_context,
        );
        let layer = LayerParams {
            ln1_gain: Matrix::filled(1, d, 1.0),
            ln1_bias: Matrix::zeros(1, d),
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_o: Matrix::zeros(d, d),
            ln2_gain: Matrix::filled(1, d, 1.0),
            ln2_bias: Matrix::zeros(1, d),
            w_in: Matrix::zeros(d, m),
            b_in: Matrix::zeros(1, m),
            w_out: Matrix::zeros(m, d),
            b_out: Matrix::zeros(1, d),
        };
        Ok(Self {
            config,
            tok_emb: Matrix::zeros(v, d),
            pos_emb: Matrix::zeros(c, d),
            layers: vec![layer; config.n_layers],
            ln_f_gain: Matrix::filled(1, d, 1.0),
            ln_f_bias: Matrix::zeros(1, d),
            unembed: Matrix::zeros(d, v),
        })
    }

    /// Gaussian(0, 0.02) weights drawn from the config seed; unit gains, zero biases.
    pub fn init(config: ModelConfig) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut fill = |m: &mut Matrix| {
            for x in m.as_mut_slice() {
                *x = normal.sample(&mut rng);
            }
        };
        fill(&mut params.tok_emb);
        fill(&mut params.pos_emb);
        for l in &mut params.layers {
            for w in [
                &mut l.w_q,
                &mut l.w_k,
                &mut l.w_v,
                &mut l.w_o,
                &mut l.w_in,
                &mut l.w_out,
            ] {
                fill(w);
            }
        }
        fill(&mut params.unembed);
        Ok(params)
    }
}

pub fn init_model(config: ModelConfig) -> Result<TransformerParams> {
    TransformerParams::init(config)
}

/// Which sublayer output a site names.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    /// Residual stream after the block.
    Hidden,
    AttnOut,
    MlpOut,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Hidden, Component::AttnOut, Component::MlpOut];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Hidden => "hidden",
            Component::AttnOut => "attn_out",
            Component::MlpOut => "mlp_out",
        }
    }
}

impl std::fmt::Display for Component {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Site {
    pub layer: usize,
    pub position: usize,
    pub component: Component,
}

/// Overwrites one activation with a fixed vector during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub site: Site,
    pub value: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerActivations {
    pub hidden: Matrix,
    pub attn_out: Matrix,
    pub mlp_out: Matrix,
    /// Post-GELU MLP activation, `T × d_mlp`: the key vectors.
    pub mlp_key: Matrix,
}

/// Every intermediate activation of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTape {
    pub tokens: Vec<TokenId>,
    /// Token plus position embeddings (or the override), `T × d_model`.
    pub embeddings: Matrix,
    pub layers: Vec<LayerActivations>,
    pub logits: Matrix,
}

impl ActivationTape {
    pub fn activation(&self, site: Site) -> &[f64] {
        let l = &self.layers[site.layer];
        let m = match site.component {
            Component::Hidden => &l.hidden,
            Component::AttnOut => &l.attn_out,
            Component::MlpOut => &l.mlp_out,
        };
        m.row(site.position)
    }

    pub fn key(&self, layer: usize, position: usize) -> &[f64] {
        self.layers[layer].mlp_key.row(position)
    }

    /// Patches that restore every recorded site.
    pub fn all_patches(&self) -> Vec<Patch> {
        let mut out = Vec::new();
        for (layer, _) in self.layers.iter().enumerate() {
            for position in 0..self.tokens.len() {
                for component in Component::ALL {
                    let site = Site {
                        layer,
                        position,
                        component,
                    };
                    out.push(Patch {
                        site,
                        value: self.activation(site).to_vec(),
                    });
                }
            }
        }
        out
    }

    pub fn final_logits(&self) -> &[f64] {
        self.logits.row(self.logits.rows() - 1)
    }

    /// Recomputes logits from the recorded final hidden state.
    pub fn replay_logits(&self, params: &TransformerParams) -> Result<Matrix> {
        let last = self
            .layers
            .last()
            .ok_or(Error::EmptyInput("activation tape"))?;
        let mut tape = Tape::new();
        let h = tape.constant(last.hidden.clone());
        let g = tape.constant(params.ln_f_gain.clone());
        let b = tape.constant(params.ln_f_bias.clone());
        let u = tape.constant(params.unembed.clone());
        let n = tape.layer_norm(h, g, b)?;
        let logits = tape.matmul(n, u)?;
        Ok(tape.value(logits).clone())
    }
}

pub(crate) struct BoundLayer {
    ln1_gain: Var,
    ln1_bias: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
    ln2_gain: Var,
    ln2_bias: Var,
    w_in: Var,
    b_in: Var,
    w_out: Var,
    b_out: Var,
}

/// Parameters placed on a tape, in declared order.
pub(crate) struct BoundParams {
    config: ModelConfig,
    tok_emb: Var,
    pos_emb: Var,
    layers: Vec<BoundLayer>,
    ln_f_gain: Var,
    ln_f_bias: Var,
    unembed: Var,
    all: Vec<Var>,
}

impl BoundParams {
    pub(crate) fn bind(tape: &mut Tape, params: &TransformerParams, trainable: bool) -> Self {
        let all: Vec<Var> = params
            .tensors()
            .into_iter()
            .map(|m| {
                if trainable {
                    tape.param(m.clone())
                } else {
                    tape.constant(m.clone())
                }
            })
            .collect();
        Self::from_vars(params.config, all)
    }

    /// Wraps vars already on a tape; they must follow the declared tensor order.
    pub(crate) fn from_vars(config: ModelConfig, all: Vec<Var>) -> Self {
        let mut it = all.clone().into_iter();
        let mut next = || it.next().expect("tensor count matches layout");
        let tok_emb = next();
        let pos_emb = next();
        let layers = (0..config.n_layers)
            .map(|_| BoundLayer {
                ln1_gain: next(),
                ln1_bias: next(),
                w_q: next(),
                w_k: next(),
                w_v: next(),
                w_o: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                w_in: next(),
                b_in: next(),
                w_out: next(),
                b_out: next(),
            })
            .collect();
        let ln_f_gain = next();
        let ln_f_bias = next();
        let unembed = next();
        Self {
            config,
            tok_emb,
            pos_emb,
            layers,
            ln_f_gain,
            ln_f_bias,
            unembed,
            all,
        }
    }

    pub(crate) fn vars(&self) -> &[Var] {
        &self.all
    }
}

/// One sequence in a packed forward pass.
pub(crate) struct SequenceInput<'a> {
    pub tokens: &'a [TokenId],
    pub embedding_override: Option<&'a Matrix>,
    /// Replacement rows, positions relative to this sequence.
    pub patches: Vec<(Site, Var)>,
}

impl<'a> SequenceInput<'a> {
    pub(crate) fn plain(tokens: &'a [TokenId]) -> Self {
        Self {
            tokens,
            embedding_override: None,
            patches: Vec::new(),
        }
    }
}

pub(crate) struct LayerVars {
    pub hidden: Var,
    pub attn_out: Var,
    pub mlp_out: Var,
    pub mlp_key: Var,
}

pub(crate) struct ForwardVars {
    pub embeddings: Var,
    pub layers: Vec<LayerVars>,
    pub logits: Var,
    pub segments: Vec<Segment>,
}

fn check_tokens(config: &ModelConfig, tokens: &[TokenId]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("forward tokens"));
    }
    if tokens.len() > config.max_context {
        return Err(Error::OutOfRange {
            what: "sequence length",
            index: tokens.len(),
            limit: config.max_context,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::OutOfRange {
            what: "token id",
            index: bad,
            limit: config.vocab_size,
        });
    }
    Ok(())
}

fn check_site(config: &ModelConfig, len: usize, site: Site) -> Result<()> {
    if site.layer >= config.n_layers {
        return Err(Error::OutOfRange {
            what: "patch layer",
            index: site.layer,
            limit: config.n_layers,
        });
    }
    if site.position >= len {
        return Err(Error::OutOfRange {
            what: "patch position",
            index: site.position,
            limit: len,
        });
    }
    Ok(())
}

/// Applies the patches registered for `(layer, component)`.
fn apply_patches(
    tape: &mut Tape,
    node: Var,
    batch: &[SequenceInput<'_>],
    segments: &[Segment],
    layer: usize,
    component: Component,
) -> Result<Var> {
    let mut rows = Vec::new();
    for (seq, seg) in batch.iter().zip(segments) {
        for (site, with) in &seq.patches {
            if site.layer == layer && site.component == component {
                rows.push((seg.start + site.position, *with));
            }
        }
    }
    if rows.is_empty() {
        return Ok(node);
    }
    tape.replace_rows(node, &rows)
}

/// Packed forward pass over several sequences.
pub(crate) fn forward_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    batch: &[SequenceInput<'_>],
) -> Result<ForwardVars> {
    let config = bound.config;
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut segments = Vec::with_capacity(batch.len());
    for seq in batch {
        check_tokens(&config, seq.tokens)?;
        for (site, with) in &seq.patches {
            check_site(&config, seq.tokens.len(), *site)?;
            if tape.value(*with).shape() != (1, config.d_model) {
                return Err(Error::ShapeMismatch {
                    op: "patch value",
                    left: tape.value(*with).shape(),
                    right: (1, config.d_model),
                });
            }
        }
        segments.push(Segment {
            start: ids.len(),
            len: seq.tokens.len(),
        });
        ids.extend_from_slice(seq.tokens);
        positions.extend(0..seq.tokens.len());
    }
    if ids.is_empty() {
        return Err(Error::EmptyInput("forward batch"));
    }

    let tok = tape.gather_rows(bound.tok_emb, &ids)?;
    let pos = tape.gather_rows(bound.pos_emb, &positions)?;
    let mut embeddings = tape.add(tok, pos)?;
    let mut overrides = Vec::new();
    for (seq, seg) in batch.iter().zip(&segments) {
        if let Some(over) = seq.embedding_override {
            if over.shape() != (seg.len, config.d_model) {
                return Err(Error::ShapeMismatch {
                    op: "embedding override",
                    left: over.shape(),
                    right: (seg.len, config.d_model),
                });
            }
            for i in 0..seg.len {
                overrides.push((
                    seg.start + i,
                    tape.constant(Matrix::row_vector(over.row(i))),
                ));
            }
        }
    }
    if !overrides.is_empty() {
        embeddings = tape.replace_rows(embeddings, &overrides)?;
    }

    let mut h = embeddings;
    let mut layers = Vec::with_capacity(bound.layers.len());
    for (li, l) in bound.layers.iter().enumerate() {
        let x = tape.layer_norm(h, l.ln1_gain, l.ln1_bias)?;
        let q = tape.matmul(x, l.w_q)?;
        let k = tape.matmul(x, l.w_k)?;
        let v = tape.matmul(x, l.w_v)?;
        let att = tape.causal_attention(q, k, v, &segments, config.n_heads)?;
        let attn_out = tape.matmul(att, l.w_o)?;
        let attn_out = apply_patches(tape, attn_out, batch, &segments, li, Component::AttnOut)?;
        let mid = tape.add(h, attn_out)?;

        let x = tape.layer_norm(mid, l.ln2_gain, l.ln2_bias)?;
        let pre = tape.matmul(x, l.w_in)?;
        let pre = tape.add_row(pre, l.b_in)?;
        let mlp_key = tape.gelu(pre);
        let mlp_out = tape.matmul(mlp_key, l.w_out)?;
        let mlp_out = tape.add_row(mlp_out, l.b_out)?;
        let mlp_out = apply_patches(tape, mlp_out, batch, &segments, li, Component::MlpOut)?;
        let hidden = tape.add(mid, mlp_out)?;
        let hidden = apply_patches(tape, hidden, batch, &segments, li, Component::Hidden)?;
        layers.push(LayerVars {
            hidden,
            attn_out,
            mlp_out,
            mlp_key,
        });
        h = hidden;
    }
    let n = tape.layer_norm(h, bound.ln_f_gain, bound.ln_f_bias)?;
    let logits = tape.matmul(n, bound.unembed)?;
    Ok(ForwardVars {
        embeddings,
        layers,
        logits,
        segments,
    })
}

fn record(tape: &Tape, vars: &ForwardVars, tokens: &[TokenId]) -> ActivationTape {
    ActivationTape {
        tokens: tokens.to_vec(),
        embeddings: tape.value(vars.embeddings).clone(),
        layers: vars
            .layers
            .iter()
            .map(|l| LayerActivations {
                hidden: tape.value(l.hidden).clone(),
                attn_out: tape.value(l.attn_out).clone(),
                mlp_out: tape.value(l.mlp_out).clone(),
                mlp_key: tape.value(l.mlp_key).clone(),
            })
            .collect(),
        logits: tape.value(vars.logits).clone(),
    }
}

/// Logits for every position plus the full activation record.
pub fn forward(params: &TransformerParams, tokens: &[TokenId]) -> Result<(Matrix, ActivationTape)> {
    forward_patched(params, tokens, &[], None)
}

/// Forward pass with activations overwritten at the given sites and,
/// optionally, the input embeddings replaced wholesale.
pub fn forward_patched(
    params: &TransformerParams,
    tokens: &[TokenId],
    patches: &[Patch],
    embedding_override: Option<&Matrix>,
) -> Result<(Matrix, ActivationTape)> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, false);
    let mut input = SequenceInput {
        tokens,
        embedding_override,
        patches: Vec::with_capacity(patches.len()),
    };
    for p in patches {
        if p.value.len() != params.config.d_model {
            return Err(Error::LengthMismatch {
                op: "patch value",
                left: params.config.d_model,
                right: p.value.len(),
            });
        }
        let v = tape.constant(Matrix::row_vector(&p.value));
        input.patches.push((p.site, v));
    }
    let vars = forward_on_tape(&mut tape, &bound, std::slice::from_ref(&input))?;
    let act = record(&tape, &vars, tokens);
    Ok((act.logits.clone(), act))
}

/// Final-position logits for many sequences in one packed pass.
pub fn final_logits_batch(
    params: &TransformerParams,
    batch: &[&[TokenId]],
) -> Result<Vec<Vec<f64>>> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, false);
    let inputs: Vec<SequenceInput<'_>> = batch.iter().map(|t| SequenceInput::plain(t)).collect();
    let vars = forward_on_tape(&mut tape, &bound, &inputs)?;
    let logits = tape.value(vars.logits);
    Ok(vars
        .segments
        .iter()
        .map(|s| logits.row(s.start + s.len - 1).to_vec())
        .collect())
}

/// Anything that maps a prompt to a next-token guess. `None` means the
/// model abstains, which scores as wrong.
pub trait Predictor {
    fn predict_batch(&self, prompts: &[&[TokenId]]) -> Result<Vec<Option<TokenId>>>;
}

impl Predictor for TransformerParams {
    fn predict_batch(&self, prompts: &[&[TokenId]]) -> Result<Vec<Option<TokenId>>> {
        let mut out = Vec::with_capacity(prompts.len());
        for chunk in prompts.chunks(64) {
            out.extend(
                final_logits_batch(self, chunk)?
                    .iter()
                    .map(|l| Some(argmax(l))),
            );
        }
        Ok(out)
    }
}

/// Argmax next token (ties to the lowest id) and its softmax probability.
pub fn predict_next(params: &TransformerParams, tokens: &[TokenId]) -> Result<(TokenId, f64)> {
    let (logits, _) = forward(params, tokens)?;
    let last = logits.row(logits.rows() - 1);
    let probs = softmax(last)?;
    let id = argmax(last);
    Ok((id, probs[id]))
}

/// Probability of `target` at the final position.
pub fn final_probability(logits: &Matrix, target: TokenId) -> Result<f64> {
    let last = logits.row(logits.rows() - 1);
    if target >= last.len() {
        return Err(Error::OutOfRange {
            what: "target token",
            index: target,
            limit: last.len(),
        });
    }
    Ok(softmax(last)?[target])
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TACITCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub steps: u64,
    pub final_loss: f64,
    pub corpus_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: TransformerParams,
    pub meta: TrainingMeta,
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

const HEADER_LEN: usize = 8 + 4 + 7 * 8 + 3 * 8;

impl Checkpoint {
    /// Layout: magic, version (u32), config as seven u64, training metadata,
    /// parameter matrices in declared order as little-endian f64, then an
    /// FNV-1a checksum of everything before it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.params.config;
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.params.parameter_count() + 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [
            c.d_model,
            c.n_layers,
            c.n_heads,
            c.d_mlp,
            c.vocab_size,
            c.max_context,
        ] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&c.seed.to_le_bytes());
        out.extend_from_slice(&self.meta.steps.to_le_bytes());
        out.extend_from_slice(&self.meta.final_loss.to_bits().to_le_bytes());
        out.extend_from_slice(&self.meta.corpus_seed.to_le_bytes());
        for m in self.params.tensors() {
            for x in m.as_slice() {
                out.extend_from_slice(&x.to_bits().to_le_bytes());
            }
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_owned());
        if bytes.len() < 12 {
            return Err(corrupt("file shorter than header"));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < HEADER_LEN + 8 {
            return Err(corrupt("file shorter than header"));
        }
        let word = |i: usize| {
            u64::from_le_bytes(bytes[12 + 8 * i..20 + 8 * i].try_into().expect("8 bytes"))
        };
        let dim = |i: usize| usize::try_from(word(i)).map_err(|_| corrupt("dimension overflow"));
        let config = ModelConfig {
            d_model: dim(0)?,
            n_layers: dim(1)?,
            n_heads: dim(2)?,
            d_mlp: dim(3)?,
            vocab_size: dim(4)?,
            max_context: dim(5)?,
            seed: word(6),
        };
        config.validate().map_err(|e| corrupt(&e.to_string()))?;
        let meta = TrainingMeta {
            steps: word(7),
            final_loss: f64::from_bits(word(8)),
            corpus_seed: word(9),
        };
        let expected = HEADER_LEN + 8 * config.parameter_count() + 8;
        if bytes.len() != expected {
            return Err(Error::CorruptCheckpoint(format!(
                "length {} does not match {} expected for the stored config",
                bytes.len(),
                expected
            )));
        }
        let body = &bytes[..expected - 8];
        let stored = u64::from_le_bytes(bytes[expected - 8..].try_into().expect("8 bytes"));
        if fnv1a64(body) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        let mut params = TransformerParams::zeros(config)?;
        let mut offset = HEADER_LEN;
        for m in params.tensors_mut() {
            for x in m.as_mut_slice() {
                *x = f64::from_bits(u64::from_le_bytes(
                    bytes[offset..offset + 8].try_into().expect("8 bytes"),
                ));
                offset += 8;
            }
        }
        Ok(Self { params, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::corpus::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(cp: &Checkpoint, path: &Path) -> Result<()> {
    cp.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

/// Names of the parameter matrices that differ between two snapshots.
pub fn changed_tensors(a: &TransformerParams, b: &TransformerParams) -> Vec<String> {
    let names = a.tensor_names();
    let mut out = BTreeMap::new();
    for ((name, x), y) in names.into_iter().zip(a.tensors()).zip(b.tensors()) {
        if x != y {
            out.insert(name, ());
        }
    }
    out.into_keys().collect()
}
