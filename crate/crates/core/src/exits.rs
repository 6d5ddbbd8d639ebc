//! Exit points and the modules attached at them.
//!
//! An exit module is one decoder layer's worth of trainable weights (or an
//! MLP-only / attention-only cut of one) plus its own RMS norm, bolted on
//! after trunk layer j. Its output feeds the trunk's LM head, so a submodel
//! is trunk prefix + module + shared head. Attaching never touches the
//! trunk; modules own their tensors outright.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::kernels;
use crate::model::{
    eval_attn_sublayer, eval_mlp_sublayer, tape_attn_sublayer, tape_mlp_sublayer, HiddenState,
    ModelConfig, TransformerTrunk,
};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TokenBatch};
use crate::Result;

/// Sorted, distinct exit layer indices. Index j means "after trunk layer
/// j", so j ranges over 0..n_layers-1: index 0 exits straight off the
/// embeddings, and an index equal to n_layers is rejected because that
/// submodel would just be the full model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExitPointSet {
    indices: Vec<usize>,
}

impl ExitPointSet {
    pub fn new(mut indices: Vec<usize>, n_layers: usize) -> Result<Self> {
        indices.sort_unstable();
        for pair in indices.windows(2) {
            if pair[0] == pair[1] {
                return Err(Error::InvalidArgument(format!("duplicate exit index {}", pair[0])));
            }
        }
        if let Some(&last) = indices.last() {
            if last >= n_layers {
                return Err(Error::InvalidArgument(format!(
                    "exit index {last} not below n_layers {n_layers} (the full model is not an exit)"
                )));
            }
        }
        Ok(ExitPointSet { indices })
    }

    pub fn empty() -> Self {
        ExitPointSet { indices: Vec::new() }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.indices.binary_search(&j).is_ok()
    }
}

/// Which sublayers the module body keeps. The reduced variants are the
/// decoder layer with the other sublayer deleted; residuals and pre-norms
/// stay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BodyVariant {
    Full,
    MlpOnly,
    AttnOnly,
}

impl BodyVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            BodyVariant::Full => "full",
            BodyVariant::MlpOnly => "mlp_only",
            BodyVariant::AttnOnly => "attn_only",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(BodyVariant::Full),
            "mlp_only" => Ok(BodyVariant::MlpOnly),
            "attn_only" => Ok(BodyVariant::AttnOnly),
            other => Err(Error::InvalidArgument(format!("unknown body variant `{other}`"))),
        }
    }
}

/// How module weights start: copied from the trunk's last layer (and its
/// final norm), or freshly sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    FromLastLayer,
    Random { seed: u64 },
}

impl InitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InitMode::FromLastLayer => "from_last_layer",
            InitMode::Random { .. } => "random",
        }
    }
}

/// Attention sublayer weights of an exit module.
#[derive(Debug, Clone)]
pub struct AttnWeights<S: Scalar> {
    pub norm: Tensor<S>,
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
}

/// MLP sublayer weights of an exit module.
#[derive(Debug, Clone)]
pub struct MlpWeights<S: Scalar> {
    pub norm: Tensor<S>,
    pub w_gate: Tensor<S>,
    pub w_up: Tensor<S>,
    pub w_down: Tensor<S>,
}

/// One exit module: body sublayers plus the exit norm that replaces the
/// trunk's final norm on this branch.
#[derive(Debug, Clone)]
pub struct BalconyModule<S: Scalar> {
    pub exit_layer: usize,
    pub variant: BodyVariant,
    pub init_mode: InitMode,
    pub attn: Option<AttnWeights<S>>,
    pub mlp: Option<MlpWeights<S>>,
    pub exit_norm: Tensor<S>,
}

impl<S: Scalar> BalconyModule<S> {
    /// Enumerates tensors as `{prefix}.attn_norm`, `{prefix}.wq`, ...,
    /// `{prefix}.exit_norm`, mirroring trunk layer member names.
    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(&str, &Tensor<S>)) {
        if let Some(a) = &self.attn {
            f(&format!("{prefix}.attn_norm"), &a.norm);
            f(&format!("{prefix}.wq"), &a.wq);
            f(&format!("{prefix}.wk"), &a.wk);
            f(&format!("{prefix}.wv"), &a.wv);
            f(&format!("{prefix}.wo"), &a.wo);
        }
        if let Some(m) = &self.mlp {
            f(&format!("{prefix}.mlp_norm"), &m.norm);
            f(&format!("{prefix}.w_gate"), &m.w_gate);
            f(&format!("{prefix}.w_up"), &m.w_up);
            f(&format!("{prefix}.w_down"), &m.w_down);
        }
        f(&format!("{prefix}.exit_norm"), &self.exit_norm);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut Tensor<S>)) {
        if let Some(a) = &mut self.attn {
            f(&format!("{prefix}.attn_norm"), &mut a.norm);
            f(&format!("{prefix}.wq"), &mut a.wq);
            f(&format!("{prefix}.wk"), &mut a.wk);
            f(&format!("{prefix}.wv"), &mut a.wv);
            f(&format!("{prefix}.wo"), &mut a.wo);
        }
        if let Some(m) = &mut self.mlp {
            f(&format!("{prefix}.mlp_norm"), &mut m.norm);
            f(&format!("{prefix}.w_gate"), &mut m.w_gate);
            f(&format!("{prefix}.w_up"), &mut m.w_up);
            f(&format!("{prefix}.w_down"), &mut m.w_down);
        }
        f(&format!("{prefix}.exit_norm"), &mut self.exit_norm);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("m", &mut |_, t| n += t.numel());
        n
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.visit_mut("m", &mut |_, t| t.set_requires_grad(!frozen));
    }

    /// Body only: the sublayers applied to X_j, before the exit norm.
    pub fn body_forward(&self, cfg: &ModelConfig, x: &[S], batch: usize, seq: usize) -> Result<Vec<S>> {
        let mut h: Vec<S>;
        match &self.attn {
            Some(a) => {
                h = eval_attn_sublayer(
                    cfg,
                    a.norm.data(),
                    a.wq.data(),
                    a.wk.data(),
                    a.wv.data(),
                    a.wo.data(),
                    x,
                    batch,
                    seq,
                )?;
            }
            None => h = x.to_vec(),
        }
        if let Some(m) = &self.mlp {
            h = eval_mlp_sublayer(
                cfg,
                m.norm.data(),
                m.w_gate.data(),
                m.w_up.data(),
                m.w_down.data(),
                &h,
            )?;
        }
        Ok(h)
    }

    /// Full exit branch: body, exit norm, shared LM head. The input's
    /// provenance tag must match this module's exit layer.
    pub fn logits(
        &self,
        cfg: &ModelConfig,
        lm_head: &Tensor<S>,
        x: &HiddenState<S>,
    ) -> Result<Vec<S>> {
        if x.layer_index != self.exit_layer {
            return Err(Error::InvalidArgument(format!(
                "hidden state from layer {} fed to exit module at layer {}",
                x.layer_index, self.exit_layer
            )));
        }
        let body = self.body_forward(cfg, &x.values, x.batch, x.seq)?;
        let d = cfg.d_model;
        let v = cfg.vocab_size;
        let rows = body.len() / d;
        let mut normed = vec![S::zero(); body.len()];
        for r in 0..rows {
            kernels::rmsnorm_row(
                &body[r * d..(r + 1) * d],
                self.exit_norm.data(),
                S::from_f64(cfg.rms_eps),
                &mut normed[r * d..(r + 1) * d],
            );
        }
        let mut logits = vec![S::zero(); rows * v];
        kernels::matmul(&normed, lm_head.data(), rows, d, v, &mut logits);
        Ok(logits)
    }
}

fn random_attn<S: Scalar>(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> AttnWeights<S> {
    let d = cfg.d_model;
    let w = cfg.attn_width();
    AttnWeights {
        norm: Tensor::full(vec![d], S::one()),
        wq: Tensor::randn(vec![d, w], 0.02, rng),
        wk: Tensor::randn(vec![d, w], 0.02, rng),
        wv: Tensor::randn(vec![d, w], 0.02, rng),
        wo: Tensor::randn(vec![w, d], 0.02, rng),
    }
}

fn random_mlp<S: Scalar>(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> MlpWeights<S> {
    let d = cfg.d_model;
    MlpWeights {
        norm: Tensor::full(vec![d], S::one()),
        w_gate: Tensor::randn(vec![d, cfg.d_ff], 0.02, rng),
        w_up: Tensor::randn(vec![d, cfg.d_ff], 0.02, rng),
        w_down: Tensor::randn(vec![cfg.d_ff, d], 0.02, rng),
    }
}

/// Builds one module per exit index. `from_last_layer` copies the trunk's
/// last layer and final norm; `random` draws fresh weights on a per-exit
/// stream of the given seed. All module tensors come out trainable; the
/// trunk is read but never written.
pub fn attach_balconies<S: Scalar>(
    trunk: &TransformerTrunk<S>,
    exits: &ExitPointSet,
    init: InitMode,
    variant: BodyVariant,
) -> Result<Vec<BalconyModule<S>>> {
    let cfg = trunk.config();
    if let Some(&last) = exits.indices().last() {
        if last >= cfg.n_layers {
            return Err(Error::InvalidArgument(format!(
                "exit index {last} not below n_layers {}",
                cfg.n_layers
            )));
        }
    }
    let src = trunk.layers.last().ok_or_else(|| {
        Error::InvalidArgument("cannot attach exits to a trunk with no layers".into())
    })?;
    let mut modules = Vec::with_capacity(exits.len());
    for &j in exits.indices() {
        let (attn, mlp, exit_norm) = match init {
            InitMode::FromLastLayer => {
                let attn = AttnWeights {
                    norm: src.attn_norm.clone(),
                    wq: src.wq.clone(),
                    wk: src.wk.clone(),
                    wv: src.wv.clone(),
                    wo: src.wo.clone(),
                };
                let mlp = MlpWeights {
                    norm: src.mlp_norm.clone(),
                    w_gate: src.w_gate.clone(),
                    w_up: src.w_up.clone(),
                    w_down: src.w_down.clone(),
                };
                (attn, mlp, trunk.final_norm.clone())
            }
            InitMode::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(j as u64);
                (random_attn(cfg, &mut rng), random_mlp(cfg, &mut rng), Tensor::full(vec![cfg.d_model], S::one()))
            }
        };
        let mut module = BalconyModule {
            exit_layer: j,
            variant,
            init_mode: init,
            attn: match variant {
                BodyVariant::MlpOnly => None,
                _ => Some(attn),
            },
            mlp: match variant {
                BodyVariant::AttnOnly => None,
                _ => Some(mlp),
            },
            exit_norm,
        };
        module.set_frozen(false);
        modules.push(module);
    }
    Ok(modules)
}

/// Which submodel a budget resolved to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Exit(usize),
    Full,
}

impl std::fmt::Display for Selection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Selection::Exit(j) => write!(f, "exit-{j}"),
            Selection::Full => write!(f, "full"),
        }
    }
}

/// A resolved submodel: trunk prefix 1..=j plus module j plus shared head,
/// or the full model. Carries its non-embedding parameter count so budget
/// resolution can compare sizes without touching tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubmodelHandle {
    pub selection: Selection,
    pub nonembed_param_count: usize,
}

impl SubmodelHandle {
    /// Depth ordering key: FULL sorts above every exit.
    pub fn depth_key(&self) -> usize {
        match self.selection {
            Selection::Exit(j) => j,
            Selection::Full => usize::MAX,
        }
    }
}

/// Resolves a selection against the attached modules and computes its
/// non-embedding parameter accounting: prefix layers plus module weights
/// (plus the trunk final norm in the FULL case).
pub fn make_submodel<S: Scalar>(
    trunk: &TransformerTrunk<S>,
    balconies: &[BalconyModule<S>],
    selection: Selection,
) -> Result<SubmodelHandle> {
    let cfg = trunk.config();
    let nonembed = match selection {
        Selection::Full => cfg.count_params(false),
        Selection::Exit(j) => {
            let module = balconies.iter().find(|m| m.exit_layer == j).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "no exit module at layer {j}; attached: {:?}",
                    balconies.iter().map(|m| m.exit_layer).collect::<Vec<_>>()
                ))
            })?;
            j * cfg.params_per_layer() + module.param_count()
        }
    };
    Ok(SubmodelHandle { selection, nonembed_param_count: nonembed })
}

/// Runs one submodel end to end on the eval path.
pub fn submodel_forward<S: Scalar>(
    trunk: &TransformerTrunk<S>,
    balconies: &[BalconyModule<S>],
    selection: Selection,
    tokens: &TokenBatch,
) -> Result<Vec<S>> {
    match selection {
        Selection::Full => trunk.forward_full(tokens),
        Selection::Exit(j) => {
            let module = balconies.iter().find(|m| m.exit_layer == j).ok_or_else(|| {
                Error::InvalidArgument(format!("no exit module at layer {j}"))
            })?;
            let hidden = trunk.hidden_to_layer(tokens, j)?;
            module.logits(trunk.config(), &trunk.lm_head, &hidden)
        }
    }
}

/// Tape handles for one module's weights.
#[derive(Debug, Clone, Copy)]
pub struct BalconyVars {
    pub attn: Option<(Var, Var, Var, Var, Var)>,
    pub mlp: Option<(Var, Var, Var, Var)>,
    pub exit_norm: Var,
}

impl BalconyVars {
    pub fn lift<S: Scalar>(tape: &mut Tape<S>, module: &BalconyModule<S>) -> Self {
        BalconyVars {
            attn: module
                .attn
                .as_ref()
                .map(|a| (tape.leaf(&a.norm), tape.leaf(&a.wq), tape.leaf(&a.wk), tape.leaf(&a.wv), tape.leaf(&a.wo))),
            mlp: module
                .mlp
                .as_ref()
                .map(|m| (tape.leaf(&m.norm), tape.leaf(&m.w_gate), tape.leaf(&m.w_up), tape.leaf(&m.w_down))),
            exit_norm: tape.leaf(&module.exit_norm),
        }
    }

    /// Gradient bindings in visit order, named like `visit` without the
    /// prefix dot.
    pub fn bindings(&self) -> Vec<(&'static str, Var)> {
        let mut out = Vec::new();
        if let Some((norm, wq, wk, wv, wo)) = self.attn {
            out.push(("attn_norm", norm));
            out.push(("wq", wq));
            out.push(("wk", wk));
            out.push(("wv", wv));
            out.push(("wo", wo));
        }
        if let Some((norm, w_gate, w_up, w_down)) = self.mlp {
            out.push(("mlp_norm", norm));
            out.push(("w_gate", w_gate));
            out.push(("w_up", w_up));
            out.push(("w_down", w_down));
        }
        out.push(("exit_norm", self.exit_norm));
        out
    }
}

/// Tape mirror of the exit branch: body, exit norm, shared head.
pub fn tape_balcony_logits<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    vars: &BalconyVars,
    x: Var,
    lm_head: Var,
    batch: usize,
    seq: usize,
) -> Result<Var> {
    let mut h = x;
    if let Some((norm, wq, wk, wv, wo)) = vars.attn {
        h = tape_attn_sublayer(tape, cfg, norm, wq, wk, wv, wo, h, batch, seq)?;
    }
    if let Some((norm, w_gate, w_up, w_down)) = vars.mlp {
        h = tape_mlp_sublayer(tape, cfg, norm, w_gate, w_up, w_down, h)?;
    }
    let normed = tape.rms_norm(h, vars.exit_norm, S::from_f64(cfg.rms_eps))?;
    tape.matmul(normed, lm_head)
}
