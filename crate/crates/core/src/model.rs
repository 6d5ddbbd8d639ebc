//! Decoder-only transformer trunk: pre-norm blocks of rotary causal
//! attention and a gated MLP, RMS norms, untied embedding and LM head.
//!
//! Two forward paths exist on purpose. The eval path works on plain slices
//! with no autodiff bookkeeping and is what inference and teacher passes
//! use; the tape path records the same math for training. Both call the
//! same kernels in the same order, so their outputs are bitwise identical.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::kernels;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TokenBatch};
use crate::Result;

/// Architecture hyperparameters.
///
/// `head_dim` is stored explicitly rather than derived from
/// `d_model / n_heads`: width pruning removes whole heads while keeping the
/// per-head width (and the residual width) fixed, so the attention width
/// `n_heads * head_dim` may be narrower than `d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_theta: f64,
    pub rms_eps: f64,
}

impl ModelConfig {
    /// Standard constructor for the unpruned family: head_dim is derived,
    /// so `d_model` must divide evenly by `n_heads`.
    pub fn new(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        vocab_size: usize,
        max_seq_len: usize,
        rope_theta: f64,
    ) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} not divisible by n_heads {n_heads}"
            )));
        }
        let cfg = ModelConfig {
            n_layers,
            d_model,
            n_heads,
            head_dim: d_model / n_heads,
            d_ff,
            vocab_size,
            max_seq_len,
            rope_theta,
            rms_eps: 1e-5,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// CPU-trainable default: 8 layers, 128 wide, byte vocabulary.
    pub fn toy() -> Self {
        ModelConfig::new(8, 128, 4, 512, 256, 256, 10000.0).unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "head_dim {} must be even for rotary pairs",
                self.head_dim
            )));
        }
        if self.d_ff < self.d_model {
            return Err(Error::Config(format!(
                "d_ff {} below d_model {} (the width floor)",
                self.d_ff, self.d_model
            )));
        }
        if !(self.rope_theta > 0.0) || !(self.rms_eps > 0.0) {
            return Err(Error::Config("rope_theta and rms_eps must be positive".into()));
        }
        Ok(())
    }

    /// Attention projection width, `n_heads * head_dim`.
    pub fn attn_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    /// Parameters in one decoder layer: q/k/v/o projections, gated MLP,
    /// and the two norm vectors. Equals 4D^2 + 3*D*d_ff + 2D when the
    /// attention width matches d_model.
    pub fn params_per_layer(&self) -> usize {
        4 * self.d_model * self.attn_width() + 3 * self.d_model * self.d_ff + 2 * self.d_model
    }

    /// Total parameter count. The token embedding and the LM head both
    /// scale with the vocabulary and both count as embedding parameters;
    /// the non-embedding count is the layers plus the final norm.
    pub fn count_params(&self, include_embeddings: bool) -> usize {
        let mut n = self.n_layers * self.params_per_layer() + self.d_model;
        if include_embeddings {
            n += 2 * self.vocab_size * self.d_model;
        }
        n
    }

    /// Canonical key=value serialization, one field per line, keys sorted.
    /// Floats print in shortest round-trip form, so equal configs always
    /// produce byte-identical blocks.
    pub fn to_kv(&self) -> String {
        format!(
            "d_ff={}\nd_model={}\nhead_dim={}\nmax_seq_len={}\nn_heads={}\nn_layers={}\nrms_eps={}\nrope_theta={}\nvocab_size={}\n",
            self.d_ff,
            self.d_model,
            self.head_dim,
            self.max_seq_len,
            self.n_heads,
            self.n_layers,
            self.rms_eps,
            self.rope_theta,
            self.vocab_size,
        )
    }

    /// Parses the `to_kv` form. Unknown or duplicate keys are rejected so
    /// manifests cannot silently carry junk.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig {
            n_layers: 0,
            d_model: 0,
            n_heads: 0,
            head_dim: 0,
            d_ff: 0,
            vocab_size: 0,
            max_seq_len: 0,
            rope_theta: 0.0,
            rms_eps: 0.0,
        };
        let mut seen = std::collections::BTreeSet::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed config line `{line}`")))?;
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("duplicate config key `{key}`")));
            }
            let as_usize = || {
                val.parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad value for `{key}`: `{val}`")))
            };
            let as_f64 = || {
                val.parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad value for `{key}`: `{val}`")))
            };
            match key {
                "n_layers" => cfg.n_layers = as_usize()?,
                "d_model" => cfg.d_model = as_usize()?,
                "n_heads" => cfg.n_heads = as_usize()?,
                "head_dim" => cfg.head_dim = as_usize()?,
                "d_ff" => cfg.d_ff = as_usize()?,
                "vocab_size" => cfg.vocab_size = as_usize()?,
                "max_seq_len" => cfg.max_seq_len = as_usize()?,
                "rope_theta" => cfg.rope_theta = as_f64()?,
                "rms_eps" => cfg.rms_eps = as_f64()?,
                other => return Err(Error::Config(format!("unknown config key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A [batch*seq, d_model] activation tagged with the layer that produced
/// it (0 = embeddings). Exit modules check the tag so a balcony can never
/// silently consume the wrong depth.
#[derive(Debug, Clone)]
pub struct HiddenState<S: Scalar> {
    pub values: Vec<S>,
    pub layer_index: usize,
    pub batch: usize,
    pub seq: usize,
}

/// One pre-norm decoder layer's weights.
#[derive(Debug, Clone)]
pub struct DecoderLayer<S: Scalar> {
    pub attn_norm: Tensor<S>,
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
    pub mlp_norm: Tensor<S>,
    pub w_gate: Tensor<S>,
    pub w_up: Tensor<S>,
    pub w_down: Tensor<S>,
}

impl<S: Scalar> DecoderLayer<S> {
    pub fn random(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let w = cfg.attn_width();
        let std = 0.02;
        DecoderLayer {
            attn_norm: Tensor::full(vec![d], S::one()),
            wq: Tensor::randn(vec![d, w], std, rng),
            wk: Tensor::randn(vec![d, w], std, rng),
            wv: Tensor::randn(vec![d, w], std, rng),
            wo: Tensor::randn(vec![w, d], std, rng),
            mlp_norm: Tensor::full(vec![d], S::one()),
            w_gate: Tensor::randn(vec![d, cfg.d_ff], std, rng),
            w_up: Tensor::randn(vec![d, cfg.d_ff], std, rng),
            w_down: Tensor::randn(vec![cfg.d_ff, d], std, rng),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(&str, &Tensor<S>)) {
        f(&format!("{prefix}.attn_norm"), &self.attn_norm);
        f(&format!("{prefix}.wq"), &self.wq);
        f(&format!("{prefix}.wk"), &self.wk);
        f(&format!("{prefix}.wv"), &self.wv);
        f(&format!("{prefix}.wo"), &self.wo);
        f(&format!("{prefix}.mlp_norm"), &self.mlp_norm);
        f(&format!("{prefix}.w_gate"), &self.w_gate);
        f(&format!("{prefix}.w_up"), &self.w_up);
        f(&format!("{prefix}.w_down"), &self.w_down);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut Tensor<S>)) {
        f(&format!("{prefix}.attn_norm"), &mut self.attn_norm);
        f(&format!("{prefix}.wq"), &mut self.wq);
        f(&format!("{prefix}.wk"), &mut self.wk);
        f(&format!("{prefix}.wv"), &mut self.wv);
        f(&format!("{prefix}.wo"), &mut self.wo);
        f(&format!("{prefix}.mlp_norm"), &mut self.mlp_norm);
        f(&format!("{prefix}.w_gate"), &mut self.w_gate);
        f(&format!("{prefix}.w_up"), &mut self.w_up);
        f(&format!("{prefix}.w_down"), &mut self.w_down);
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.visit_mut("", &mut |_, t| t.set_requires_grad(!frozen));
    }
}

/// The N-layer backbone plus embedding, final norm, and LM head.
#[derive(Debug, Clone)]
pub struct TransformerTrunk<S: Scalar> {
    config: ModelConfig,
    pub token_embedding: Tensor<S>,
    pub layers: Vec<DecoderLayer<S>>,
    pub final_norm: Tensor<S>,
    pub lm_head: Tensor<S>,
}

impl<S: Scalar> TransformerTrunk<S> {
    /// Builds a trunk with seeded Gaussian(0, 0.02) projections and unit
    /// norms. All tensors start frozen; training modes opt specific parts
    /// back in.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let v = config.vocab_size;
        let mut trunk = TransformerTrunk {
            token_embedding: Tensor::randn(vec![v, d], 0.02, &mut rng),
            layers: (0..config.n_layers).map(|_| DecoderLayer::random(&config, &mut rng)).collect(),
            final_norm: Tensor::full(vec![d], S::one()),
            lm_head: Tensor::randn(vec![d, v], 0.02, &mut rng),
            config,
        };
        trunk.freeze_all();
        Ok(trunk)
    }

    /// Assembles a trunk from externally produced tensors (checkpoint
    /// loading), validating every shape against the config. The result
    /// arrives frozen, like `random`.
    pub fn from_parts(
        config: ModelConfig,
        token_embedding: Tensor<S>,
        layers: Vec<DecoderLayer<S>>,
        final_norm: Tensor<S>,
        lm_head: Tensor<S>,
    ) -> Result<Self> {
        config.validate()?;
        if layers.len() != config.n_layers {
            return Err(Error::Config(format!(
                "{} layers supplied for an {}-layer config",
                layers.len(),
                config.n_layers
            )));
        }
        let mut trunk =
            TransformerTrunk { token_embedding, layers, final_norm, lm_head, config };
        let mut bad = None;
        trunk.visit(&mut |name, t| {
            if bad.is_none() {
                if let Some(want) = expected_trunk_shape(&trunk.config, name) {
                    if t.shape() != want.as_slice() {
                        bad = Some(format!("{name} has shape {:?}, wants {want:?}", t.shape()));
                    }
                } else {
                    bad = Some(format!("unrecognized tensor `{name}`"));
                }
            }
        });
        if let Some(detail) = bad {
            return Err(Error::Config(detail));
        }
        trunk.freeze_all();
        Ok(trunk)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    /// Enumerates every tensor with its canonical dotted name.
    pub fn visit(&self, f: &mut impl FnMut(&str, &Tensor<S>)) {
        f("token_embedding", &self.token_embedding);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("layers.{i}"), f);
        }
        f("final_norm", &self.final_norm);
        f("lm_head", &self.lm_head);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor<S>)) {
        f("token_embedding", &mut self.token_embedding);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("layers.{i}"), f);
        }
        f("final_norm", &mut self.final_norm);
        f("lm_head", &mut self.lm_head);
    }

    pub fn freeze_all(&mut self) {
        self.visit_mut(&mut |_, t| t.set_requires_grad(false));
    }

    pub fn fully_frozen(&self) -> bool {
        let mut frozen = true;
        self.visit(&mut |_, t| frozen &= !t.requires_grad());
        frozen
    }

    /// Exact element count over instantiated tensors; the closed form in
    /// `ModelConfig::count_params` must agree with this.
    pub fn enumerate_params(&self, include_embeddings: bool) -> usize {
        let mut n = 0;
        self.visit(&mut |name, t| {
            if include_embeddings || (name != "token_embedding" && name != "lm_head") {
                n += t.numel();
            }
        });
        n
    }

    /// Token embedding lookup, rows [batch*seq, d_model].
    pub fn embed(&self, tokens: &TokenBatch) -> Result<Vec<S>> {
        let d = self.config.d_model;
        if tokens.seq > self.config.max_seq_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.seq, self.config.max_seq_len
            )));
        }
        let mut out = vec![S::zero(); tokens.ids.len() * d];
        for (r, &id) in tokens.ids.iter().enumerate() {
            let id = id as usize;
            if id >= self.config.vocab_size {
                return Err(Error::InvalidArgument(format!(
                    "token id {id} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            out[r * d..(r + 1) * d].copy_from_slice(&self.token_embedding.data()[id * d..(id + 1) * d]);
        }
        Ok(out)
    }

    /// One decoder layer applied to [batch*seq, d_model] rows at positions
    /// starting from 0.
    pub fn layer_forward(&self, layer_idx: usize, x: &[S], batch: usize, seq: usize) -> Result<Vec<S>> {
        let layer = self.layers.get(layer_idx).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "layer index {layer_idx} out of range for {} layers",
                self.config.n_layers
            ))
        })?;
        eval_layer_forward(&self.config, layer, x, batch, seq)
    }

    /// Embedding plus layers 1..=j. j = 0 returns the raw embeddings.
    pub fn forward_to_layer(&self, tokens: &TokenBatch, j: usize) -> Result<Vec<S>> {
        if j > self.config.n_layers {
            return Err(Error::InvalidArgument(format!(
                "prefix depth {j} exceeds n_layers {}",
                self.config.n_layers
            )));
        }
        let mut x = self.embed(tokens)?;
        for i in 0..j {
            x = eval_layer_forward(&self.config, &self.layers[i], &x, tokens.batch, tokens.seq)?;
        }
        Ok(x)
    }

    /// Final norm then LM head over [rows, d_model], yielding [rows, vocab].
    pub fn head(&self, x: &[S]) -> Vec<S> {
        let d = self.config.d_model;
        let v = self.config.vocab_size;
        let rows = x.len() / d;
        let mut normed = vec![S::zero(); x.len()];
        for r in 0..rows {
            kernels::rmsnorm_row(
                &x[r * d..(r + 1) * d],
                self.final_norm.data(),
                S::from_f64(self.config.rms_eps),
                &mut normed[r * d..(r + 1) * d],
            );
        }
        let mut logits = vec![S::zero(); rows * v];
        kernels::matmul(&normed, self.lm_head.data(), rows, d, v, &mut logits);
        logits
    }

    /// All layers, final norm, and head: logits [batch*seq, vocab].
    pub fn forward_full(&self, tokens: &TokenBatch) -> Result<Vec<S>> {
        let x = self.forward_to_layer(tokens, self.config.n_layers)?;
        Ok(self.head(&x))
    }

    /// `forward_to_layer` with provenance attached.
    pub fn hidden_to_layer(&self, tokens: &TokenBatch, j: usize) -> Result<HiddenState<S>> {
        Ok(HiddenState {
            values: self.forward_to_layer(tokens, j)?,
            layer_index: j,
            batch: tokens.batch,
            seq: tokens.seq,
        })
    }

    /// Single pass that returns the hidden state after each layer index in
    /// `taps` (0 = embeddings) together with the full-model logits. The
    /// teacher pass of distillation uses this so the trunk runs once per
    /// batch no matter how many exits are attached.
    pub fn forward_with_taps(
        &self,
        tokens: &TokenBatch,
        taps: &[usize],
    ) -> Result<(Vec<HiddenState<S>>, Vec<S>)> {
        for &j in taps {
            if j > self.config.n_layers {
                return Err(Error::InvalidArgument(format!(
                    "tap {j} exceeds n_layers {}",
                    self.config.n_layers
                )));
            }
        }
        let mut x = self.embed(tokens)?;
        let mut out: Vec<HiddenState<S>> = Vec::with_capacity(taps.len());
        let snap = |j: usize, x: &Vec<S>, out: &mut Vec<HiddenState<S>>| {
            for &t in taps {
                if t == j {
                    out.push(HiddenState {
                        values: x.clone(),
                        layer_index: j,
                        batch: tokens.batch,
                        seq: tokens.seq,
                    });
                }
            }
        };
        snap(0, &x, &mut out);
        for i in 0..self.config.n_layers {
            x = eval_layer_forward(&self.config, &self.layers[i], &x, tokens.batch, tokens.seq)?;
            snap(i + 1, &x, &mut out);
        }
        Ok((out, self.head(&x)))
    }
}

/// Pre-norm attention sublayer: x + Wo(attend(rope(q), rope(k), v)).
pub fn eval_attn_sublayer<S: Scalar>(
    cfg: &ModelConfig,
    norm: &[S],
    wq: &[S],
    wk: &[S],
    wv: &[S],
    wo: &[S],
    x: &[S],
    batch: usize,
    seq: usize,
) -> Result<Vec<S>> {
    let d = cfg.d_model;
    let w = cfg.attn_width();
    let rows = batch * seq;
    if x.len() != rows * d {
        return Err(Error::InvalidArgument(format!(
            "attention input has {} elements, wants {rows}x{d}",
            x.len()
        )));
    }
    let eps = S::from_f64(cfg.rms_eps);
    let mut xn = vec![S::zero(); rows * d];
    for r in 0..rows {
        kernels::rmsnorm_row(&x[r * d..(r + 1) * d], norm, eps, &mut xn[r * d..(r + 1) * d]);
    }
    let mut q = vec![S::zero(); rows * w];
    let mut k = vec![S::zero(); rows * w];
    let mut v = vec![S::zero(); rows * w];
    kernels::matmul(&xn, wq, rows, d, w, &mut q);
    kernels::matmul(&xn, wk, rows, d, w, &mut k);
    kernels::matmul(&xn, wv, rows, d, w, &mut v);
    for r in 0..rows {
        let pos = r % seq;
        for h in 0..cfg.n_heads {
            let off = r * w + h * cfg.head_dim;
            kernels::rope_rotate_row(&mut q[off..off + cfg.head_dim], pos, cfg.rope_theta);
            kernels::rope_rotate_row(&mut k[off..off + cfg.head_dim], pos, cfg.rope_theta);
        }
    }
    let scale = S::from_f64(1.0 / (cfg.head_dim as f64).sqrt());
    let mut ctx = vec![S::zero(); rows * w];
    let mut k_pack = vec![S::zero(); seq * cfg.head_dim];
    let mut v_pack = vec![S::zero(); seq * cfg.head_dim];
    let mut probs = vec![S::zero(); seq];
    for b in 0..batch {
        for h in 0..cfg.n_heads {
            kernels::pack_head(&k, b, h, seq, cfg.n_heads, cfg.head_dim, &mut k_pack);
            kernels::pack_head(&v, b, h, seq, cfg.n_heads, cfg.head_dim, &mut v_pack);
            for t in 0..seq {
                let row = b * seq + t;
                let q_row = &q[row * w + h * cfg.head_dim..row * w + (h + 1) * cfg.head_dim];
                kernels::attn_row(
                    q_row,
                    &k_pack[..(t + 1) * cfg.head_dim],
                    &v_pack[..(t + 1) * cfg.head_dim],
                    t + 1,
                    scale,
                    &mut probs[..t + 1],
                    &mut ctx[row * w + h * cfg.head_dim..row * w + (h + 1) * cfg.head_dim],
                );
            }
        }
    }
    let mut proj = vec![S::zero(); rows * d];
    kernels::matmul(&ctx, wo, rows, w, d, &mut proj);
    for (o, &xi) in proj.iter_mut().zip(x) {
        *o = xi + *o;
    }
    Ok(proj)
}

/// Pre-norm gated MLP sublayer: x + W_down(silu(W_gate x) * W_up x).
pub fn eval_mlp_sublayer<S: Scalar>(
    cfg: &ModelConfig,
    norm: &[S],
    w_gate: &[S],
    w_up: &[S],
    w_down: &[S],
    x: &[S],
) -> Result<Vec<S>> {
    let d = cfg.d_model;
    if x.len() % d != 0 {
        return Err(Error::InvalidArgument(format!(
            "mlp input length {} not a multiple of d_model {d}",
            x.len()
        )));
    }
    let rows = x.len() / d;
    let eps = S::from_f64(cfg.rms_eps);
    let mut xn = vec![S::zero(); rows * d];
    for r in 0..rows {
        kernels::rmsnorm_row(&x[r * d..(r + 1) * d], norm, eps, &mut xn[r * d..(r + 1) * d]);
    }
    let mut gate = vec![S::zero(); rows * cfg.d_ff];
    let mut up = vec![S::zero(); rows * cfg.d_ff];
    kernels::matmul(&xn, w_gate, rows, d, cfg.d_ff, &mut gate);
    kernels::matmul(&xn, w_up, rows, d, cfg.d_ff, &mut up);
    for (g, &u) in gate.iter_mut().zip(&up) {
        *g = kernels::silu(*g) * u;
    }
    let mut proj = vec![S::zero(); rows * d];
    kernels::matmul(&gate, w_down, rows, cfg.d_ff, d, &mut proj);
    for (o, &xi) in proj.iter_mut().zip(x) {
        *o = xi + *o;
    }
    Ok(proj)
}

/// Full decoder layer on the eval path.
pub fn eval_layer_forward<S: Scalar>(
    cfg: &ModelConfig,
    layer: &DecoderLayer<S>,
    x: &[S],
    batch: usize,
    seq: usize,
) -> Result<Vec<S>> {
    let h = eval_attn_sublayer(
        cfg,
        layer.attn_norm.data(),
        layer.wq.data(),
        layer.wk.data(),
        layer.wv.data(),
        layer.wo.data(),
        x,
        batch,
        seq,
    )?;
    eval_mlp_sublayer(
        cfg,
        layer.mlp_norm.data(),
        layer.w_gate.data(),
        layer.w_up.data(),
        layer.w_down.data(),
        &h,
    )
}

/// Tape handles for one decoder layer's weights.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub mlp_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

impl LayerVars {
    pub fn lift<S: Scalar>(tape: &mut Tape<S>, layer: &DecoderLayer<S>) -> Self {
        LayerVars {
            attn_norm: tape.leaf(&layer.attn_norm),
            wq: tape.leaf(&layer.wq),
            wk: tape.leaf(&layer.wk),
            wv: tape.leaf(&layer.wv),
            wo: tape.leaf(&layer.wo),
            mlp_norm: tape.leaf(&layer.mlp_norm),
            w_gate: tape.leaf(&layer.w_gate),
            w_up: tape.leaf(&layer.w_up),
            w_down: tape.leaf(&layer.w_down),
        }
    }
}

/// Tape handles for the whole trunk.
#[derive(Debug, Clone)]
pub struct TrunkVars {
    pub token_embedding: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub lm_head: Var,
}

impl TrunkVars {
    pub fn lift<S: Scalar>(tape: &mut Tape<S>, trunk: &TransformerTrunk<S>) -> Self {
        TrunkVars {
            token_embedding: tape.leaf(&trunk.token_embedding),
            layers: trunk.layers.iter().map(|l| LayerVars::lift(tape, l)).collect(),
            final_norm: tape.leaf(&trunk.final_norm),
            lm_head: tape.leaf(&trunk.lm_head),
        }
    }

    /// (name, var) pairs using the same dotted names as `TransformerTrunk::visit`.
    pub fn bindings(&self) -> Vec<(String, Var)> {
        let mut out = vec![("token_embedding".to_string(), self.token_embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), l.attn_norm));
            out.push((format!("layers.{i}.wq"), l.wq));
            out.push((format!("layers.{i}.wk"), l.wk));
            out.push((format!("layers.{i}.wv"), l.wv));
            out.push((format!("layers.{i}.wo"), l.wo));
            out.push((format!("layers.{i}.mlp_norm"), l.mlp_norm));
            out.push((format!("layers.{i}.w_gate"), l.w_gate));
            out.push((format!("layers.{i}.w_up"), l.w_up));
            out.push((format!("layers.{i}.w_down"), l.w_down));
        }
        out.push(("final_norm".to_string(), self.final_norm));
        out.push(("lm_head".to_string(), self.lm_head));
        out
    }
}

/// Tape mirror of `eval_attn_sublayer`.
pub fn tape_attn_sublayer<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    norm: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    x: Var,
    batch: usize,
    seq: usize,
) -> Result<Var> {
    let eps = S::from_f64(cfg.rms_eps);
    let xn = tape.rms_norm(x, norm, eps)?;
    let q = tape.matmul(xn, wq)?;
    let k = tape.matmul(xn, wk)?;
    let v = tape.matmul(xn, wv)?;
    let q = tape.rope(q, cfg.n_heads, cfg.head_dim, seq, cfg.rope_theta, 0)?;
    let k = tape.rope(k, cfg.n_heads, cfg.head_dim, seq, cfg.rope_theta, 0)?;
    let ctx = tape.causal_attention(q, k, v, batch, seq, cfg.n_heads, cfg.head_dim)?;
    let proj = tape.matmul(ctx, wo)?;
    tape.add(x, proj)
}

/// Tape mirror of `eval_mlp_sublayer`.
pub fn tape_mlp_sublayer<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    norm: Var,
    w_gate: Var,
    w_up: Var,
    w_down: Var,
    x: Var,
) -> Result<Var> {
    let eps = S::from_f64(cfg.rms_eps);
    let xn = tape.rms_norm(x, norm, eps)?;
    let gate = tape.matmul(xn, w_gate)?;
    let up = tape.matmul(xn, w_up)?;
    let act = tape.silu_mul(gate, up)?;
    let proj = tape.matmul(act, w_down)?;
    tape.add(x, proj)
}

/// Full decoder layer on the tape path.
pub fn tape_layer_forward<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    layer: &LayerVars,
    x: Var,
    batch: usize,
    seq: usize,
) -> Result<Var> {
    let h = tape_attn_sublayer(
        tape, cfg, layer.attn_norm, layer.wq, layer.wk, layer.wv, layer.wo, x, batch, seq,
    )?;
    tape_mlp_sublayer(tape, cfg, layer.mlp_norm, layer.w_gate, layer.w_up, layer.w_down, h)
}

/// Embedding plus layers 1..=j on the tape.
pub fn tape_forward_to_layer<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    vars: &TrunkVars,
    tokens: &TokenBatch,
    j: usize,
) -> Result<Var> {
    if j > vars.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "prefix depth {j} exceeds n_layers {}",
            vars.layers.len()
        )));
    }
    if tokens.seq > cfg.max_seq_len {
        return Err(Error::InvalidArgument(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.seq, cfg.max_seq_len
        )));
    }
    let mut x = tape.embedding(vars.token_embedding, tokens)?;
    for layer in &vars.layers[..j] {
        x = tape_layer_forward(tape, cfg, layer, x, tokens.batch, tokens.seq)?;
    }
    Ok(x)
}

/// Final norm and head on the tape.
pub fn tape_head<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    vars: &TrunkVars,
    x: Var,
) -> Result<Var> {
    let eps = S::from_f64(cfg.rms_eps);
    let normed = tape.rms_norm(x, vars.final_norm, eps)?;
    tape.matmul(normed, vars.lm_head)
}

/// Whole model on the tape: logits [batch*seq, vocab].
pub fn tape_forward_full<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    vars: &TrunkVars,
    tokens: &TokenBatch,
) -> Result<Var> {
    let x = tape_forward_to_layer(tape, cfg, vars, tokens, vars.layers.len())?;
    tape_head(tape, cfg, vars, x)
}

/// Expected shape of a trunk tensor by canonical dotted name, or None if
/// the name is not part of the layout.
pub fn expected_trunk_shape(cfg: &ModelConfig, name: &str) -> Option<Vec<usize>> {
    let d = cfg.d_model;
    match name {
        "token_embedding" => Some(vec![cfg.vocab_size, d]),
        "lm_head" => Some(vec![d, cfg.vocab_size]),
        "final_norm" => Some(vec![d]),
        _ => {
            let rest = name.strip_prefix("layers.")?;
            let (idx, member) = rest.split_once('.')?;
            let idx: usize = idx.parse().ok()?;
            if idx >= cfg.n_layers {
                return None;
            }
            layer_member_shape(cfg, member)
        }
    }
}

/// Expected shape of a decoder-layer member (also used for exit-module
/// bodies, whose members mirror layer members plus `exit_norm`).
pub fn layer_member_shape(cfg: &ModelConfig, member: &str) -> Option<Vec<usize>> {
    let d = cfg.d_model;
    let w = cfg.attn_width();
    match member {
        "attn_norm" | "mlp_norm" | "exit_norm" => Some(vec![d]),
        "wq" | "wk" | "wv" => Some(vec![d, w]),
        "wo" => Some(vec![w, d]),
        "w_gate" | "w_up" => Some(vec![d, cfg.d_ff]),
        "w_down" => Some(vec![cfg.d_ff, d]),
        _ => None,
    }
}
