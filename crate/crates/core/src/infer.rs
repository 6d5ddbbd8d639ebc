//! Budget-directed incremental decoding. A session keeps per-layer KV
//! caches and decodes one token at a time through the selected submodel;
//! switching submodels mid-stream is cheap because caches below the old
//! depth stay valid and missing layers are refilled lazily from recorded
//! exit-boundary hidden states on the next decode.
//!
//! Every per-row computation reuses the same kernels, in the same order,
//! as the batched forward pass, so cached decoding reproduces a full
//! recompute bit for bit. Tests and the cache acceptance check rely on
//! that equality.

use std::collections::BTreeMap;
use std::time::Instant;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::exits::{make_submodel, submodel_forward, BalconyModule, Selection, SubmodelHandle};
use crate::kernels;
use crate::model::{DecoderLayer, ModelConfig, TransformerTrunk};
use crate::scalar::Scalar;
use crate::tensor::TokenBatch;
use crate::Result;

/// How a caller names the submodel it wants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BudgetSpec {
    /// The full model.
    Full,
    /// A specific exit index.
    ExitIndex(usize),
    /// The deepest submodel whose non-embedding parameter count fits.
    MaxNonembedParams(usize),
    /// The deepest submodel whose estimated decode speedup over the full
    /// model (ratio of non-embedding parameter counts) meets the target.
    TargetSpeedup(f64),
}

impl std::fmt::Display for BudgetSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BudgetSpec::Full => write!(f, "full"),
            BudgetSpec::ExitIndex(j) => write!(f, "exit:{j}"),
            BudgetSpec::MaxNonembedParams(n) => write!(f, "params:{n}"),
            BudgetSpec::TargetSpeedup(s) => write!(f, "speedup:{s}"),
        }
    }
}

fn describe_handles(handles: &[SubmodelHandle]) -> String {
    handles
        .iter()
        .map(|h| format!("{} ({} params)", h.selection, h.nonembed_param_count))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Picks the largest submodel satisfying `spec` from `handles`, which must
/// contain a FULL entry for speedup targets to have a baseline.
pub fn resolve_budget(handles: &[SubmodelHandle], spec: BudgetSpec) -> Result<SubmodelHandle> {
    if handles.is_empty() {
        return Err(Error::InvalidArgument("no submodels to resolve against".into()));
    }
    let infeasible = |requested: String| Error::InfeasibleBudget {
        requested,
        available: describe_handles(handles),
    };
    match spec {
        BudgetSpec::Full => handles
            .iter()
            .find(|h| h.selection == Selection::Full)
            .copied()
            .ok_or_else(|| infeasible("full".into())),
        BudgetSpec::ExitIndex(j) => handles
            .iter()
            .find(|h| h.selection == Selection::Exit(j))
            .copied()
            .ok_or_else(|| infeasible(format!("exit:{j}"))),
        BudgetSpec::MaxNonembedParams(cap) => handles
            .iter()
            .filter(|h| h.nonembed_param_count <= cap)
            .max_by_key(|h| (h.nonembed_param_count, h.depth_key()))
            .copied()
            .ok_or_else(|| infeasible(format!("params:{cap}"))),
        BudgetSpec::TargetSpeedup(target) => {
            if !(target.is_finite() && target > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "speedup target must be positive and finite, got {target}"
                )));
            }
            let full = handles
                .iter()
                .find(|h| h.selection == Selection::Full)
                .ok_or_else(|| infeasible(format!("speedup:{target} (no full baseline)")))?;
            handles
                .iter()
                .filter(|h| {
                    full.nonembed_param_count as f64 / h.nonembed_param_count as f64 >= target
                })
                .max_by_key(|h| (h.nonembed_param_count, h.depth_key()))
                .copied()
                .ok_or_else(|| infeasible(format!("speedup:{target}")))
        }
    }
}

/// A trunk, its attached exit modules, and the resolved submodel handles.
pub struct Engine<S: Scalar> {
    pub trunk: TransformerTrunk<S>,
    pub balconies: Vec<BalconyModule<S>>,
    handles: Vec<SubmodelHandle>,
}

impl<S: Scalar> Engine<S> {
    pub fn new(trunk: TransformerTrunk<S>, balconies: Vec<BalconyModule<S>>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for m in &balconies {
            if !seen.insert(m.exit_layer) {
                return Err(Error::InvalidArgument(format!(
                    "two exit modules at layer {}",
                    m.exit_layer
                )));
            }
        }
        let mut handles = Vec::with_capacity(balconies.len() + 1);
        for m in &balconies {
            handles.push(make_submodel(&trunk, &balconies, Selection::Exit(m.exit_layer))?);
        }
        handles.push(make_submodel(&trunk, &balconies, Selection::Full)?);
        handles.sort_by_key(|h| h.depth_key());
        Ok(Engine { trunk, balconies, handles })
    }

    pub fn handles(&self) -> &[SubmodelHandle] {
        &self.handles
    }

    pub fn resolve(&self, spec: BudgetSpec) -> Result<SubmodelHandle> {
        resolve_budget(&self.handles, spec)
    }

    pub fn session(&self, spec: BudgetSpec) -> Result<DecodeSession<'_, S>> {
        let handle = self.resolve(spec)?;
        Ok(DecodeSession::new(self, handle.selection))
    }

    fn balcony(&self, j: usize) -> &BalconyModule<S> {
        self.balconies.iter().find(|m| m.exit_layer == j).expect("resolved exit has a module")
    }

    /// Layers a selection runs through before its head.
    fn depth_layers(&self, selection: Selection) -> usize {
        match selection {
            Selection::Exit(j) => j,
            Selection::Full => self.trunk.config().n_layers,
        }
    }
}

/// Appendable K/V storage for one attention sublayer, one stream, laid
/// out per head as [max_seq, head_dim] so cache slices feed the same
/// attention kernel as the batched path.
struct KvCache<S: Scalar> {
    k: Vec<S>,
    v: Vec<S>,
    filled: usize,
}

impl<S: Scalar> KvCache<S> {
    fn new(cfg: &ModelConfig) -> Self {
        let cap = cfg.n_heads * cfg.max_seq_len * cfg.head_dim;
        KvCache { k: vec![S::zero(); cap], v: vec![S::zero(); cap], filled: 0 }
    }

    /// Stores one roped row ([heads * head_dim], head-major) at `pos`.
    fn append(&mut self, cfg: &ModelConfig, pos: usize, k_row: &[S], v_row: &[S]) {
        debug_assert_eq!(pos, self.filled);
        let hd = cfg.head_dim;
        for h in 0..cfg.n_heads {
            let dst = (h * cfg.max_seq_len + pos) * hd;
            self.k[dst..dst + hd].copy_from_slice(&k_row[h * hd..(h + 1) * hd]);
            self.v[dst..dst + hd].copy_from_slice(&v_row[h * hd..(h + 1) * hd]);
        }
        self.filled = pos + 1;
    }

    fn head_slices(&self, cfg: &ModelConfig, h: usize, len: usize) -> (&[S], &[S]) {
        let hd = cfg.head_dim;
        let base = h * cfg.max_seq_len * hd;
        (&self.k[base..base + len * hd], &self.v[base..base + len * hd])
    }
}

/// Pre-norm attention for one new row at `pos`, reading all earlier
/// positions from the cache. Mirrors the batched sublayer kernel for
/// kernel.
fn attn_row_step<S: Scalar>(
    cfg: &ModelConfig,
    norm: &[S],
    wq: &[S],
    wk: &[S],
    wv: &[S],
    wo: &[S],
    cache: &mut KvCache<S>,
    pos: usize,
    x: &[S],
) -> Vec<S> {
    let d = cfg.d_model;
    let w = cfg.attn_width();
    let hd = cfg.head_dim;
    let eps = S::from_f64(cfg.rms_eps);
    let mut xn = vec![S::zero(); d];
    kernels::rmsnorm_row(x, norm, eps, &mut xn);
    let mut q = vec![S::zero(); w];
    let mut k = vec![S::zero(); w];
    let mut v = vec![S::zero(); w];
    kernels::matmul(&xn, wq, 1, d, w, &mut q);
    kernels::matmul(&xn, wk, 1, d, w, &mut k);
    kernels::matmul(&xn, wv, 1, d, w, &mut v);
    for h in 0..cfg.n_heads {
        kernels::rope_rotate_row(&mut q[h * hd..(h + 1) * hd], pos, cfg.rope_theta);
        kernels::rope_rotate_row(&mut k[h * hd..(h + 1) * hd], pos, cfg.rope_theta);
    }
    cache.append(cfg, pos, &k, &v);
    let scale = S::from_f64(1.0 / (hd as f64).sqrt());
    let mut ctx = vec![S::zero(); w];
    let mut probs = vec![S::zero(); pos + 1];
    for h in 0..cfg.n_heads {
        let (ks, vs) = cache.head_slices(cfg, h, pos + 1);
        kernels::attn_row(
            &q[h * hd..(h + 1) * hd],
            ks,
            vs,
            pos + 1,
            scale,
            &mut probs,
            &mut ctx[h * hd..(h + 1) * hd],
        );
    }
    let mut proj = vec![S::zero(); d];
    kernels::matmul(&ctx, wo, 1, w, d, &mut proj);
    for (o, &xi) in proj.iter_mut().zip(x) {
        *o = xi + *o;
    }
    proj
}

/// Gated MLP for one row; positions are independent here so no cache.
fn mlp_row_step<S: Scalar>(
    cfg: &ModelConfig,
    norm: &[S],
    w_gate: &[S],
    w_up: &[S],
    w_down: &[S],
    x: &[S],
) -> Vec<S> {
    let d = cfg.d_model;
    let eps = S::from_f64(cfg.rms_eps);
    let mut xn = vec![S::zero(); d];
    kernels::rmsnorm_row(x, norm, eps, &mut xn);
    let mut gate = vec![S::zero(); cfg.d_ff];
    let mut up = vec![S::zero(); cfg.d_ff];
    kernels::matmul(&xn, w_gate, 1, d, cfg.d_ff, &mut gate);
    kernels::matmul(&xn, w_up, 1, d, cfg.d_ff, &mut up);
    for (g, &u) in gate.iter_mut().zip(&up) {
        *g = kernels::silu(*g) * u;
    }
    let mut proj = vec![S::zero(); d];
    kernels::matmul(&gate, w_down, 1, cfg.d_ff, d, &mut proj);
    for (o, &xi) in proj.iter_mut().zip(x) {
        *o = xi + *o;
    }
    proj
}

fn layer_row_step<S: Scalar>(
    cfg: &ModelConfig,
    layer: &DecoderLayer<S>,
    cache: &mut KvCache<S>,
    pos: usize,
    x: &[S],
) -> Vec<S> {
    let h = attn_row_step(
        cfg,
        layer.attn_norm.data(),
        layer.wq.data(),
        layer.wk.data(),
        layer.wv.data(),
        layer.wo.data(),
        cache,
        pos,
        x,
    );
    mlp_row_step(
        cfg,
        layer.mlp_norm.data(),
        layer.w_gate.data(),
        layer.w_up.data(),
        layer.w_down.data(),
        &h,
    )
}

/// One decoding stream over one engine. Trunk caches persist across
/// budget swaps; after a swap to a deeper submodel the next decode first
/// replays recorded boundary states through the newly active layers.
pub struct DecodeSession<'e, S: Scalar> {
    engine: &'e Engine<S>,
    selection: Selection,
    tokens: Vec<u32>,
    layer_kv: Vec<KvCache<S>>,
    balcony_kv: Vec<Option<KvCache<S>>>,
    /// Hidden rows recorded at each attached exit boundary j >= 1, keyed
    /// by j; row r is X_j for position r. Boundary 0 is rebuilt from the
    /// token history instead of stored.
    boundary_hist: BTreeMap<usize, Vec<S>>,
    refill_events: usize,
}

impl<'e, S: Scalar> DecodeSession<'e, S> {
    fn new(engine: &'e Engine<S>, selection: Selection) -> Self {
        let cfg = engine.trunk.config();
        let layer_kv = (0..cfg.n_layers).map(|_| KvCache::new(cfg)).collect();
        let balcony_kv = engine
            .balconies
            .iter()
            .map(|m| m.attn.as_ref().map(|_| KvCache::new(cfg)))
            .collect();
        let boundary_hist = engine
            .balconies
            .iter()
            .filter(|m| m.exit_layer >= 1)
            .map(|m| (m.exit_layer, Vec::new()))
            .collect();
        DecodeSession {
            engine,
            selection,
            tokens: Vec::new(),
            layer_kv,
            balcony_kv,
            boundary_hist,
            refill_events: 0,
        }
    }

    pub fn selection(&self) -> Selection {
        self.selection
    }

    /// Tokens ingested so far.
    pub fn position(&self) -> usize {
        self.tokens.len()
    }

    /// Times a swap forced a cache refill on the following decode.
    pub fn refill_events(&self) -> usize {
        self.refill_events
    }

    /// Switches the active submodel. Returns false when the budget
    /// resolves to the submodel already active. State is untouched until
    /// the next decode, which refills whatever the new depth is missing.
    pub fn swap_budget(&mut self, spec: BudgetSpec) -> Result<bool> {
        let handle = self.engine.resolve(spec)?;
        if handle.selection == self.selection {
            return Ok(false);
        }
        self.selection = handle.selection;
        Ok(true)
    }

    fn embed_row(&self, token: u32) -> Result<Vec<S>> {
        let cfg = self.engine.trunk.config();
        let id = token as usize;
        if id >= cfg.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "token id {id} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let d = cfg.d_model;
        Ok(self.engine.trunk.token_embedding.data()[id * d..(id + 1) * d].to_vec())
    }

    /// X_j rows lo..hi for a boundary layer j (0 = embeddings).
    fn boundary_rows(&self, j: usize, lo: usize, hi: usize) -> Result<Vec<S>> {
        let d = self.engine.trunk.config().d_model;
        if j == 0 {
            let mut out = Vec::with_capacity((hi - lo) * d);
            for r in lo..hi {
                out.extend_from_slice(&self.embed_row(self.tokens[r])?);
            }
            return Ok(out);
        }
        let hist = self.boundary_hist.get(&j).ok_or_else(|| {
            Error::InvalidArgument(format!("no recorded boundary at layer {j}"))
        })?;
        if hist.len() < hi * d {
            return Err(Error::InvalidArgument(format!(
                "boundary {j} holds {} rows, refill wants {hi}",
                hist.len() / d
            )));
        }
        Ok(hist[lo * d..hi * d].to_vec())
    }

    /// Brings trunk layers 1..=depth and the active balcony cache up to
    /// `pos` rows by replaying recorded boundary states. Returns whether
    /// any work happened.
    fn refill_to(&mut self, depth: usize, pos: usize) -> Result<bool> {
        let cfg = self.engine.trunk.config().clone();
        let d = cfg.d_model;
        let mut worked = false;
        // Boundaries split 1..=depth into segments of layers that always
        // fill together; walk them shallow to deep.
        let mut seg_start = 0usize;
        let mut boundaries: Vec<usize> = self
            .boundary_hist
            .keys()
            .copied()
            .filter(|&j| j <= depth)
            .collect();
        if boundaries.last() != Some(&depth) && depth >= 1 {
            boundaries.push(depth);
        }
        for seg_end in boundaries {
            let filled = self.layer_kv[seg_end - 1].filled;
            if filled < pos {
                worked = true;
                let mut rows = self.boundary_rows(seg_start, filled, pos)?;
                for i in seg_start..seg_end {
                    debug_assert_eq!(self.layer_kv[i].filled, filled);
                    let mut next = Vec::with_capacity(rows.len());
                    for (off, r) in (filled..pos).enumerate() {
                        let x = &rows[off * d..(off + 1) * d];
                        let out =
                            layer_row_step(&cfg, &self.engine.trunk.layers[i], &mut self.layer_kv[i], r, x);
                        next.extend_from_slice(&out);
                    }
                    rows = next;
                }
                if let Some(hist) = self.boundary_hist.get_mut(&seg_end) {
                    debug_assert_eq!(hist.len(), filled * d);
                    hist.extend_from_slice(&rows);
                }
            }
            seg_start = seg_end;
        }
        if let Selection::Exit(j) = self.selection {
            let idx = self
                .engine
                .balconies
                .iter()
                .position(|m| m.exit_layer == j)
                .expect("active exit has a module");
            let filled = match &self.balcony_kv[idx] {
                Some(cache) if cache.filled < pos => cache.filled,
                _ => pos,
            };
            if filled < pos {
                worked = true;
                let rows = self.boundary_rows(j, filled, pos)?;
                let a = self.engine.balcony(j).attn.as_ref().expect("cache implies attention");
                let cache = self.balcony_kv[idx].as_mut().expect("attention implies a cache");
                for (off, r) in (filled..pos).enumerate() {
                    attn_row_step(
                        &cfg,
                        a.norm.data(),
                        a.wq.data(),
                        a.wk.data(),
                        a.wv.data(),
                        a.wo.data(),
                        cache,
                        r,
                        &rows[off * d..(off + 1) * d],
                    );
                }
            }
        }
        Ok(worked)
    }

    /// Ingests one token and returns next-token logits ([vocab]).
    pub fn feed(&mut self, token: u32) -> Result<Vec<S>> {
        let cfg = self.engine.trunk.config().clone();
        let pos = self.tokens.len();
        if pos >= cfg.max_seq_len {
            return Err(Error::InvalidArgument(format!(
                "decode position {pos} exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        let depth = self.engine.depth_layers(self.selection);
        if self.refill_to(depth, pos)? {
            self.refill_events += 1;
        }
        let d = cfg.d_model;
        let mut x = self.embed_row(token)?;
        self.tokens.push(token);
        for i in 0..depth {
            x = layer_row_step(&cfg, &self.engine.trunk.layers[i], &mut self.layer_kv[i], pos, &x);
            if let Some(hist) = self.boundary_hist.get_mut(&(i + 1)) {
                if hist.len() == pos * d {
                    hist.extend_from_slice(&x);
                }
            }
        }
        let logits = match self.selection {
            Selection::Full => self.engine.trunk.head(&x),
            Selection::Exit(j) => {
                let module = self.engine.balcony(j);
                let body = match &module.attn {
                    Some(a) => {
                        let idx = self
                            .engine
                            .balconies
                            .iter()
                            .position(|m| m.exit_layer == j)
                            .expect("active exit has a module");
                        let cache =
                            self.balcony_kv[idx].as_mut().expect("attention implies a cache");
                        attn_row_step(
                            &cfg,
                            a.norm.data(),
                            a.wq.data(),
                            a.wk.data(),
                            a.wv.data(),
                            a.wo.data(),
                            cache,
                            pos,
                            &x,
                        )
                    }
                    None => x,
                };
                let body = match &module.mlp {
                    Some(m) => mlp_row_step(
                        &cfg,
                        m.norm.data(),
                        m.w_gate.data(),
                        m.w_up.data(),
                        m.w_down.data(),
                        &body,
                    ),
                    None => body,
                };
                let mut normed = vec![S::zero(); d];
                kernels::rmsnorm_row(
                    &body,
                    module.exit_norm.data(),
                    S::from_f64(cfg.rms_eps),
                    &mut normed,
                );
                let mut logits = vec![S::zero(); cfg.vocab_size];
                kernels::matmul(
                    &normed,
                    self.engine.trunk.lm_head.data(),
                    1,
                    d,
                    cfg.vocab_size,
                    &mut logits,
                );
                logits
            }
        };
        Ok(logits)
    }

    /// Feeds a prompt and returns the logits after its last token.
    pub fn prefill(&mut self, prompt: &[u32]) -> Result<Vec<S>> {
        if prompt.is_empty() {
            return Err(Error::InvalidArgument("prompt must not be empty".into()));
        }
        let mut logits = Vec::new();
        for &t in prompt {
            logits = self.feed(t)?;
        }
        Ok(logits)
    }

    /// Decodes `n` tokens after `prompt` with the given sampler.
    pub fn generate(&mut self, prompt: &[u32], n: usize, sampler: Sampler) -> Result<Vec<u32>> {
        let mut rng = sampler.rng();
        let mut logits = self.prefill(prompt)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let next = sampler.pick(&logits, rng.as_mut());
            out.push(next);
            if out.len() == n {
                break;
            }
            logits = self.feed(next)?;
        }
        Ok(out)
    }
}

/// Token selection rule for generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampler {
    /// Highest logit; ties go to the lowest token id.
    Greedy,
    /// Softmax at the given temperature, drawn with the given seed.
    Temperature { temp: f64, seed: u64 },
}

impl Sampler {
    fn rng(&self) -> Option<ChaCha8Rng> {
        match self {
            Sampler::Greedy => None,
            Sampler::Temperature { seed, .. } => Some(ChaCha8Rng::seed_from_u64(*seed)),
        }
    }

    fn pick<S: Scalar>(&self, logits: &[S], rng: Option<&mut ChaCha8Rng>) -> u32 {
        match self {
            Sampler::Greedy => {
                let mut best = 0usize;
                let mut best_v = logits[0].as_f64();
                for (i, v) in logits.iter().enumerate().skip(1) {
                    let v = v.as_f64();
                    if v > best_v {
                        best = i;
                        best_v = v;
                    }
                }
                best as u32
            }
            Sampler::Temperature { temp, .. } => {
                let rng = rng.expect("temperature sampling carries an rng");
                let inv_t = 1.0 / temp.max(1e-6);
                let max = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> =
                    logits.iter().map(|v| ((v.as_f64() - max) * inv_t).exp()).collect();
                let total: f64 = weights.iter().sum();
                // 53-bit uniform in [0, 1).
                let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64) * total;
                let mut acc = 0.0;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        return i as u32;
                    }
                }
                (logits.len() - 1) as u32
            }
        }
    }
}

/// Reference generation without any caching: every step recomputes the
/// whole prefix through the selected submodel. Must agree with the cached
/// session bit for bit.
pub fn generate_uncached<S: Scalar>(
    engine: &Engine<S>,
    spec: BudgetSpec,
    prompt: &[u32],
    n: usize,
    sampler: Sampler,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("prompt must not be empty".into()));
    }
    let handle = engine.resolve(spec)?;
    let cfg = engine.trunk.config();
    let mut rng = sampler.rng();
    let mut tokens: Vec<u32> = prompt.to_vec();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let batch = TokenBatch::new(tokens.clone(), 1, tokens.len())?;
        let logits =
            submodel_forward(&engine.trunk, &engine.balconies, handle.selection, &batch)?;
        let last = &logits[(tokens.len() - 1) * cfg.vocab_size..];
        let next = sampler.pick(last, rng.as_mut());
        out.push(next);
        tokens.push(next);
        if tokens.len() > cfg.max_seq_len && out.len() < n {
            return Err(Error::InvalidArgument(format!(
                "generation exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
    }
    Ok(out)
}

/// Wall-clock decode latency for one submodel.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyRow {
    pub budget: String,
    pub selection: String,
    pub depth_key: usize,
    pub nonembed_params: usize,
    pub mean_ms_per_token: f64,
    pub std_ms_per_token: f64,
    pub median_ms_per_token: f64,
    pub tokens_per_s: f64,
}

#[derive(Debug, Clone, Default)]
pub struct LatencyReport {
    pub rows: Vec<LatencyRow>,
}

impl LatencyReport {
    pub fn csv(&self) -> String {
        let mut out = String::from(
            "budget,selection,depth_key,nonembed_params,mean_ms_per_token,std_ms_per_token,median_ms_per_token,tokens_per_s\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.budget,
                r.selection,
                r.depth_key,
                r.nonembed_params,
                r.mean_ms_per_token,
                r.std_ms_per_token,
                r.median_ms_per_token,
                r.tokens_per_s
            ));
        }
        out
    }
}

/// Greedy-decodes `gen_tokens` after `prompt`, `repeats` times (after
/// `warmup` untimed runs), timing only the decode loop. Statistics are
/// per-token milliseconds across repeats.
pub fn measure_latency<S: Scalar>(
    engine: &Engine<S>,
    spec: BudgetSpec,
    prompt: &[u32],
    gen_tokens: usize,
    warmup: usize,
    repeats: usize,
) -> Result<LatencyRow> {
    if gen_tokens == 0 || repeats == 0 {
        return Err(Error::InvalidArgument("need gen_tokens > 0 and repeats > 0".into()));
    }
    let handle = engine.resolve(spec)?;
    let mut per_rep_ms = Vec::with_capacity(repeats);
    for rep in 0..warmup + repeats {
        let mut session = engine.session(spec)?;
        let mut logits = session.prefill(prompt)?;
        let start = Instant::now();
        for _ in 0..gen_tokens {
            let next = Sampler::Greedy.pick(&logits, None);
            logits = session.feed(next)?;
        }
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        if rep >= warmup {
            per_rep_ms.push(elapsed / gen_tokens as f64);
        }
    }
    let n = per_rep_ms.len() as f64;
    let mean = per_rep_ms.iter().sum::<f64>() / n;
    let var = per_rep_ms.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let mut sorted = per_rep_ms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    Ok(LatencyRow {
        budget: spec.to_string(),
        selection: handle.selection.to_string(),
        depth_key: handle.depth_key(),
        nonembed_params: handle.nonembed_param_count,
        mean_ms_per_token: mean,
        std_ms_per_token: var.sqrt(),
        median_ms_per_token: median,
        tokens_per_s: 1e3 / mean,
    })
}

/// Latency for each budget in order, as one report.
pub fn latency_sweep<S: Scalar>(
    engine: &Engine<S>,
    specs: &[BudgetSpec],
    prompt: &[u32],
    gen_tokens: usize,
    warmup: usize,
    repeats: usize,
) -> Result<LatencyReport> {
    let mut report = LatencyReport::default();
    for &spec in specs {
        report.rows.push(measure_latency(engine, spec, prompt, gen_tokens, warmup, repeats)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exits::{attach_balconies, BodyVariant, ExitPointSet, InitMode};

    fn tiny_engine(seed: u64, variant: BodyVariant) -> Engine<f32> {
        let cfg = ModelConfig::new(4, 16, 2, 32, 32, 24, 10000.0).unwrap();
        let trunk = TransformerTrunk::random(cfg.clone(), seed).unwrap();
        let exits = ExitPointSet::new(vec![1, 2], cfg.n_layers).unwrap();
        let modules =
            attach_balconies(&trunk, &exits, InitMode::Random { seed: seed ^ 1 }, variant)
                .unwrap();
        Engine::new(trunk, modules).unwrap()
    }

    fn prompt(len: usize, seed: u64) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.next_u32() % 32).collect()
    }

    fn bits(v: &[f32]) -> Vec<u32> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn cached_decode_matches_batched_recompute_bitwise() {
        for variant in [BodyVariant::Full, BodyVariant::MlpOnly, BodyVariant::AttnOnly] {
            let engine = tiny_engine(3, variant);
            let cfg = engine.trunk.config();
            let toks = prompt(10, 4);
            for spec in [BudgetSpec::ExitIndex(1), BudgetSpec::ExitIndex(2), BudgetSpec::Full] {
                let handle = engine.resolve(spec).unwrap();
                let mut session = engine.session(spec).unwrap();
                for k in 1..=toks.len() {
                    let cached = session.feed(toks[k - 1]).unwrap();
                    let batch = TokenBatch::new(toks[..k].to_vec(), 1, k).unwrap();
                    let full = submodel_forward(
                        &engine.trunk,
                        &engine.balconies,
                        handle.selection,
                        &batch,
                    )
                    .unwrap();
                    let last = &full[(k - 1) * cfg.vocab_size..];
                    assert_eq!(bits(&cached), bits(last), "{spec} step {k} ({variant:?})");
                }
            }
        }
    }

    #[test]
    fn greedy_generation_cached_equals_uncached() {
        let engine = tiny_engine(7, BodyVariant::Full);
        let p = prompt(5, 8);
        for spec in [BudgetSpec::ExitIndex(1), BudgetSpec::Full] {
            let mut session = engine.session(spec).unwrap();
            let cached = session.generate(&p, 12, Sampler::Greedy).unwrap();
            let uncached = generate_uncached(&engine, spec, &p, 12, Sampler::Greedy).unwrap();
            assert_eq!(cached, uncached, "{spec}");
        }
    }

    #[test]
    fn temperature_generation_is_seeded_and_matches_uncached() {
        let engine = tiny_engine(11, BodyVariant::Full);
        let p = prompt(4, 12);
        let sampler = Sampler::Temperature { temp: 0.8, seed: 99 };
        let mut s1 = engine.session(BudgetSpec::ExitIndex(2)).unwrap();
        let mut s2 = engine.session(BudgetSpec::ExitIndex(2)).unwrap();
        let a = s1.generate(&p, 10, sampler).unwrap();
        let b = s2.generate(&p, 10, sampler).unwrap();
        assert_eq!(a, b);
        let uncached =
            generate_uncached(&engine, BudgetSpec::ExitIndex(2), &p, 10, sampler).unwrap();
        assert_eq!(a, uncached);
        let mut s3 = engine.session(BudgetSpec::ExitIndex(2)).unwrap();
        let c = s3
            .generate(&p, 10, Sampler::Temperature { temp: 0.8, seed: 100 })
            .unwrap();
        assert_ne!(a, c, "different seeds should diverge on a 32-way vocabulary");
    }

    #[test]
    fn swapping_budgets_preserves_exactness() {
        let engine = tiny_engine(13, BodyVariant::Full);
        let toks = prompt(12, 14);
        // Shallow, then deeper, then full, then back down: after each
        // swap the logits must match a fresh session that ran the whole
        // history at the new depth.
        let script: [(usize, BudgetSpec); 4] = [
            (3, BudgetSpec::ExitIndex(1)),
            (3, BudgetSpec::ExitIndex(2)),
            (3, BudgetSpec::Full),
            (3, BudgetSpec::ExitIndex(1)),
        ];
        let mut session = engine.session(script[0].1).unwrap();
        let mut fed = 0usize;
        for (chunk, spec) in script {
            session.swap_budget(spec).unwrap();
            for _ in 0..chunk {
                let got = session.feed(toks[fed]).unwrap();
                fed += 1;
                let mut fresh = engine.session(spec).unwrap();
                let want = fresh.prefill(&toks[..fed]).unwrap();
                assert_eq!(bits(&got), bits(&want), "{spec} after {fed} tokens");
            }
        }
        assert!(session.refill_events() >= 2, "up-swaps must refill");
    }

    #[test]
    fn same_budget_swap_is_a_noop() {
        let engine = tiny_engine(17, BodyVariant::Full);
        let mut session = engine.session(BudgetSpec::ExitIndex(2)).unwrap();
        session.prefill(&prompt(6, 18)).unwrap();
        assert!(!session.swap_budget(BudgetSpec::ExitIndex(2)).unwrap());
        // params budget resolving to the same exit is also a no-op
        let h = engine.resolve(BudgetSpec::ExitIndex(2)).unwrap();
        assert!(!session
            .swap_budget(BudgetSpec::MaxNonembedParams(h.nonembed_param_count))
            .unwrap());
        session.feed(1).unwrap();
        assert_eq!(session.refill_events(), 0);
    }

    #[test]
    fn budget_resolution_picks_largest_fit() {
        let engine = tiny_engine(19, BodyVariant::Full);
        let handles = engine.handles();
        assert_eq!(handles.len(), 3);
        assert!(handles.windows(2).all(|w| w[0].depth_key() < w[1].depth_key()));
        let h1 = handles[0];
        let h2 = handles[1];
        let full = handles[2];
        assert_eq!(
            engine.resolve(BudgetSpec::MaxNonembedParams(full.nonembed_param_count)).unwrap(),
            full
        );
        assert_eq!(
            engine.resolve(BudgetSpec::MaxNonembedParams(full.nonembed_param_count - 1)).unwrap(),
            h2
        );
        assert_eq!(
            engine.resolve(BudgetSpec::MaxNonembedParams(h1.nonembed_param_count)).unwrap(),
            h1
        );
        let err = engine.resolve(BudgetSpec::MaxNonembedParams(h1.nonembed_param_count - 1));
        assert!(matches!(err, Err(Error::InfeasibleBudget { .. })));
        assert_eq!(engine.resolve(BudgetSpec::TargetSpeedup(1.0)).unwrap(), full);
        let s2 = full.nonembed_param_count as f64 / h2.nonembed_param_count as f64;
        assert_eq!(engine.resolve(BudgetSpec::TargetSpeedup(s2)).unwrap(), h2);
        assert!(matches!(
            engine.resolve(BudgetSpec::TargetSpeedup(1e9)),
            Err(Error::InfeasibleBudget { .. })
        ));
        assert!(engine.resolve(BudgetSpec::ExitIndex(0)).is_err());
    }

    #[test]
    fn latency_statistics_are_consistent() {
        let engine = tiny_engine(23, BodyVariant::Full);
        let row =
            measure_latency(&engine, BudgetSpec::ExitIndex(1), &prompt(4, 24), 8, 1, 3).unwrap();
        assert!(row.mean_ms_per_token > 0.0);
        assert!(row.median_ms_per_token > 0.0);
        assert!((row.tokens_per_s - 1e3 / row.mean_ms_per_token).abs() < 1e-9);
        let report = latency_sweep(
            &engine,
            &[BudgetSpec::ExitIndex(1), BudgetSpec::Full],
            &prompt(4, 24),
            4,
            0,
            2,
        )
        .unwrap();
        assert_eq!(report.rows.len(), 2);
        let csv = report.csv();
        assert!(csv.starts_with("budget,selection,depth_key,"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn overflowing_the_context_is_rejected() {
        let engine = tiny_engine(29, BodyVariant::Full);
        let cfg = engine.trunk.config();
        let mut session = engine.session(BudgetSpec::ExitIndex(1)).unwrap();
        for t in 0..cfg.max_seq_len {
            session.feed((t % 32) as u32).unwrap();
        }
        assert!(session.feed(0).is_err());
    }
}
