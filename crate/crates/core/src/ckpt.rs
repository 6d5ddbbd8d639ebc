//! Named-tensor checkpoints. One archive carries a canonical text
//! manifest plus a table of named, typed, shaped tensors with their data
//! laid out little-endian at 64-byte-aligned offsets. Writes land through
//! a temp file and an atomic rename so a crash never leaves a torn file.
//!
//! Kinds: a bare trunk, a single exit module, a bundle of trunk plus all
//! its exit modules, and optimizer state. Loaded model tensors arrive
//! frozen; unfreeze explicitly to continue training.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use crate::error::Error;
use crate::exits::{AttnWeights, BalconyModule, BodyVariant, InitMode, MlpWeights};
use crate::model::{layer_member_shape, DecoderLayer, ModelConfig, TransformerTrunk};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;
use crate::train::AdamW;
use crate::Result;

pub const MAGIC: [u8; 4] = *b"BLCN";
pub const VERSION: u32 = 1;
const PAYLOAD_ALIGN: usize = 64;

/// What an archive holds, recorded under the manifest `kind` key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CkptKind {
    Trunk,
    Balcony,
    Bundle,
    Optimizer,
}

impl CkptKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CkptKind::Trunk => "trunk",
            CkptKind::Balcony => "balcony",
            CkptKind::Bundle => "bundle",
            CkptKind::Optimizer => "optimizer",
        }
    }

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trunk" => Ok(CkptKind::Trunk),
            "balcony" => Ok(CkptKind::Balcony),
            "bundle" => Ok(CkptKind::Bundle),
            "optimizer" => Ok(CkptKind::Optimizer),
            other => Err(Error::Format(format!("unknown checkpoint kind `{other}`"))),
        }
    }
}

fn round_up(n: usize, align: usize) -> usize {
    n.div_ceil(align) * align
}

fn encode_manifest(manifest: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (k, v) in manifest {
        if k.is_empty() || k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(Error::Format(format!("manifest entry `{k}` has reserved characters")));
        }
        out.extend_from_slice(k.as_bytes());
        out.push(b'=');
        out.extend_from_slice(v.as_bytes());
        out.push(b'\n');
    }
    Ok(out)
}

fn decode_manifest(bytes: &[u8]) -> Result<BTreeMap<String, String>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
    let mut manifest = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("manifest line `{line}` lacks `=`")))?;
        if manifest.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Format(format!("duplicate manifest key `{k}`")));
        }
    }
    Ok(manifest)
}

/// One tensor staged for writing: name, shape, and the already
/// little-endian payload.
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

fn record<S: Scalar>(name: &str, t: &Tensor<S>) -> TensorRecord {
    let mut bytes = Vec::with_capacity(t.numel() * S::DTYPE.size());
    for &v in t.data() {
        v.write_le(&mut bytes);
    }
    TensorRecord { name: name.to_string(), shape: t.shape().to_vec(), bytes }
}

/// Writes one archive atomically: temp file in the target directory, then
/// rename over `path`.
fn write_archive(
    path: &Path,
    manifest: &BTreeMap<String, String>,
    dtype: Dtype,
    tensors: &[TensorRecord],
) -> Result<()> {
    let manifest_bytes = encode_manifest(manifest)?;
    if manifest_bytes.len() > u32::MAX as usize {
        return Err(Error::Format("manifest too large".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut table = Vec::new();
    let mut payload_len = 0usize;
    let mut offsets = Vec::with_capacity(tensors.len());
    for t in tensors {
        if t.name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("tensor name `{}` too long", t.name)));
        }
        if !seen.insert(t.name.as_str()) {
            return Err(Error::Format(format!("duplicate tensor name `{}`", t.name)));
        }
        if t.bytes.len() != t.shape.iter().product::<usize>() * dtype.size() {
            return Err(Error::Format(format!("tensor `{}` payload disagrees with shape", t.name)));
        }
        let offset = payload_len;
        offsets.push(offset);
        payload_len = round_up(offset + t.bytes.len(), PAYLOAD_ALIGN);
        table.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        table.extend_from_slice(t.name.as_bytes());
        table.push(dtype.code());
        table.push(t.shape.len() as u8);
        for &dim in &t.shape {
            table.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        table.extend_from_slice(&(offset as u64).to_le_bytes());
        table.extend_from_slice(&(t.bytes.len() as u64).to_le_bytes());
    }
    let header_len = 4 + 4 + 4 + manifest_bytes.len() + 4 + table.len();
    let payload_base = round_up(header_len, PAYLOAD_ALIGN);
    let mut file_bytes = Vec::with_capacity(payload_base + payload_len);
    file_bytes.extend_from_slice(&MAGIC);
    file_bytes.extend_from_slice(&VERSION.to_le_bytes());
    file_bytes.extend_from_slice(&(manifest_bytes.len() as u32).to_le_bytes());
    file_bytes.extend_from_slice(&manifest_bytes);
    file_bytes.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    file_bytes.extend_from_slice(&table);
    for (t, &offset) in tensors.iter().zip(&offsets) {
        file_bytes.resize(payload_base + offset, 0);
        file_bytes.extend_from_slice(&t.bytes);
    }
    file_bytes.resize(payload_base + payload_len, 0);
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&file_bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

struct Archive<S: Scalar> {
    manifest: BTreeMap<String, String>,
    tensors: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Archive<S> {
    fn take(&mut self, name: &str) -> Result<Tensor<S>> {
        let idx = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))?;
        Ok(self.tensors.swap_remove(idx).1)
    }

    fn take_shaped(&mut self, name: &str, shape: &[usize]) -> Result<Tensor<S>> {
        let t = self.take(name)?;
        if t.shape() != shape {
            return Err(Error::Format(format!(
                "tensor `{name}` has shape {:?}, wants {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    fn finish(self, kind: CkptKind) -> Result<()> {
        if !self.tensors.is_empty() {
            let names: Vec<_> = self.tensors.iter().map(|(n, _)| n.as_str()).collect();
            return Err(Error::Format(format!(
                "{} checkpoint carries unexpected tensors: {}",
                kind.as_str(),
                names.join(", ")
            )));
        }
        Ok(())
    }

    fn meta(&self, key: &str) -> Result<&str> {
        self.manifest
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("manifest lacks `{key}`")))
    }

    fn config(&self) -> Result<ModelConfig> {
        let mut lines = String::new();
        for (k, v) in &self.manifest {
            if let Some(field) = k.strip_prefix("config.") {
                lines.push_str(&format!("{field}={v}\n"));
            }
        }
        ModelConfig::from_kv(&lines)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn grab(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.grab(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.grab(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.grab(8)?.try_into().unwrap()))
    }
}

fn read_archive<S: Scalar>(path: &Path) -> Result<Archive<S>> {
    let bytes = std::fs::read(path)?;
    let mut c = Cursor { bytes: &bytes, at: 0 };
    if c.grab(4)? != MAGIC {
        return Err(Error::Format("bad magic; not a checkpoint".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let manifest_len = c.u32()? as usize;
    let manifest = decode_manifest(c.grab(manifest_len)?)?;
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.grab(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let code = c.grab(1)?[0];
        let dtype = Dtype::from_code(code)
            .ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
        if dtype != S::DTYPE {
            return Err(Error::Format(format!(
                "tensor `{name}` is {dtype:?}, archive opened as {:?}",
                S::DTYPE
            )));
        }
        let rank = c.grab(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64()? as usize);
        }
        let offset = c.u64()? as usize;
        let len = c.u64()? as usize;
        entries.push((name, shape, offset, len));
    }
    let payload_base = round_up(c.at, PAYLOAD_ALIGN);
    let mut tensors = Vec::with_capacity(count);
    for (name, shape, offset, len) in entries {
        if offset % PAYLOAD_ALIGN != 0 {
            return Err(Error::Format(format!("tensor `{name}` payload is misaligned")));
        }
        let numel: usize = shape.iter().product();
        if len != numel * S::DTYPE.size() {
            return Err(Error::Format(format!(
                "tensor `{name}` length {len} disagrees with shape {shape:?}"
            )));
        }
        let start = payload_base + offset;
        if start + len > bytes.len() {
            return Err(Error::Format(format!("tensor `{name}` payload truncated")));
        }
        let step = S::DTYPE.size();
        let data: Vec<S> =
            (0..numel).map(|i| S::read_le(&bytes[start + i * step..])).collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok(Archive { manifest, tensors })
}

fn config_manifest(manifest: &mut BTreeMap<String, String>, cfg: &ModelConfig) {
    for line in cfg.to_kv().lines() {
        let (k, v) = line.split_once('=').expect("to_kv emits key=value lines");
        manifest.insert(format!("config.{k}"), v.to_string());
    }
}

/// Field-by-field comparison so a mismatch names the offending field.
fn check_config(expected: &ModelConfig, found: &ModelConfig) -> Result<()> {
    for (e, f) in expected.to_kv().lines().zip(found.to_kv().lines()) {
        if e != f {
            let (field, want) = e.split_once('=').unwrap();
            let (_, got) = f.split_once('=').unwrap();
            return Err(Error::ConfigMismatch {
                field: field.to_string(),
                expected: want.to_string(),
                found: got.to_string(),
            });
        }
    }
    Ok(())
}

fn init_mode_manifest(manifest: &mut BTreeMap<String, String>, prefix: &str, mode: InitMode) {
    manifest.insert(format!("{prefix}init_mode"), mode.as_str().to_string());
    if let InitMode::Random { seed } = mode {
        manifest.insert(format!("{prefix}init_seed"), seed.to_string());
    }
}

fn parse_init_mode(archive: &Archive<impl Scalar>, prefix: &str) -> Result<InitMode> {
    match archive.meta(&format!("{prefix}init_mode"))? {
        "from_last_layer" => Ok(InitMode::FromLastLayer),
        "random" => {
            let seed = archive
                .meta(&format!("{prefix}init_seed"))?
                .parse()
                .map_err(|_| Error::Format("init_seed is not an integer".into()))?;
            Ok(InitMode::Random { seed })
        }
        other => Err(Error::Format(format!("unknown init mode `{other}`"))),
    }
}

fn trunk_records<S: Scalar>(trunk: &TransformerTrunk<S>, prefix: &str) -> Vec<TensorRecord> {
    let mut out = Vec::new();
    trunk.visit(&mut |name, t| out.push(record(&format!("{prefix}{name}"), t)));
    out
}

fn collect_trunk<S: Scalar>(
    archive: &mut Archive<S>,
    cfg: &ModelConfig,
    prefix: &str,
) -> Result<TransformerTrunk<S>> {
    let d = cfg.d_model;
    let w = cfg.attn_width();
    let token_embedding =
        archive.take_shaped(&format!("{prefix}token_embedding"), &[cfg.vocab_size, d])?;
    let final_norm = archive.take_shaped(&format!("{prefix}final_norm"), &[d])?;
    let lm_head = archive.take_shaped(&format!("{prefix}lm_head"), &[d, cfg.vocab_size])?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let member = |m: &str| format!("{prefix}layers.{i}.{m}");
        layers.push(DecoderLayer {
            attn_norm: archive.take_shaped(&member("attn_norm"), &[d])?,
            wq: archive.take_shaped(&member("wq"), &[d, w])?,
            wk: archive.take_shaped(&member("wk"), &[d, w])?,
            wv: archive.take_shaped(&member("wv"), &[d, w])?,
            wo: archive.take_shaped(&member("wo"), &[w, d])?,
            mlp_norm: archive.take_shaped(&member("mlp_norm"), &[d])?,
            w_gate: archive.take_shaped(&member("w_gate"), &[d, cfg.d_ff])?,
            w_up: archive.take_shaped(&member("w_up"), &[d, cfg.d_ff])?,
            w_down: archive.take_shaped(&member("w_down"), &[cfg.d_ff, d])?,
        });
    }
    TransformerTrunk::from_parts(cfg.clone(), token_embedding, layers, final_norm, lm_head)
}

fn balcony_manifest(
    manifest: &mut BTreeMap<String, String>,
    prefix: &str,
    module: &BalconyModule<impl Scalar>,
) {
    manifest.insert(format!("{prefix}exit_layer"), module.exit_layer.to_string());
    manifest.insert(format!("{prefix}variant"), module.variant.as_str().to_string());
    init_mode_manifest(manifest, prefix, module.init_mode);
}

fn collect_balcony<S: Scalar>(
    archive: &mut Archive<S>,
    cfg: &ModelConfig,
    meta_prefix: &str,
    tensor_prefix: &str,
) -> Result<BalconyModule<S>> {
    let exit_layer: usize = archive
        .meta(&format!("{meta_prefix}exit_layer"))?
        .parse()
        .map_err(|_| Error::Format("exit_layer is not an integer".into()))?;
    if exit_layer >= cfg.n_layers {
        return Err(Error::Format(format!(
            "exit_layer {exit_layer} outside a {}-layer trunk",
            cfg.n_layers
        )));
    }
    let variant = BodyVariant::from_str(archive.meta(&format!("{meta_prefix}variant"))?)?;
    let init_mode = parse_init_mode(archive, meta_prefix)?;
    let shape = |m: &str| layer_member_shape(cfg, m).expect("known member");
    let member = |m: &str| format!("{tensor_prefix}{m}");
    let attn = if matches!(variant, BodyVariant::Full | BodyVariant::AttnOnly) {
        Some(AttnWeights {
            norm: archive.take_shaped(&member("attn_norm"), &shape("attn_norm"))?,
            wq: archive.take_shaped(&member("wq"), &shape("wq"))?,
            wk: archive.take_shaped(&member("wk"), &shape("wk"))?,
            wv: archive.take_shaped(&member("wv"), &shape("wv"))?,
            wo: archive.take_shaped(&member("wo"), &shape("wo"))?,
        })
    } else {
        None
    };
    let mlp = if matches!(variant, BodyVariant::Full | BodyVariant::MlpOnly) {
        Some(MlpWeights {
            norm: archive.take_shaped(&member("mlp_norm"), &shape("mlp_norm"))?,
            w_gate: archive.take_shaped(&member("w_gate"), &shape("w_gate"))?,
            w_up: archive.take_shaped(&member("w_up"), &shape("w_up"))?,
            w_down: archive.take_shaped(&member("w_down"), &shape("w_down"))?,
        })
    } else {
        None
    };
    let exit_norm = archive.take_shaped(&member("exit_norm"), &shape("exit_norm"))?;
    let mut module = BalconyModule { exit_layer, variant, init_mode, attn, mlp, exit_norm };
    module.set_frozen(true);
    Ok(module)
}

/// Reads just the kind tag from a checkpoint's manifest, without touching
/// tensor payloads or requiring the element type up front.
pub fn peek_kind(path: impl AsRef<Path>) -> Result<CkptKind> {
    let bytes = std::fs::read(path.as_ref())?;
    let mut c = Cursor { bytes: &bytes, at: 0 };
    if c.grab(4)? != MAGIC {
        return Err(Error::Format("bad magic; not a checkpoint".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let manifest_len = c.u32()? as usize;
    let manifest = decode_manifest(c.grab(manifest_len)?)?;
    let kind = manifest
        .get("kind")
        .ok_or_else(|| Error::Format("manifest is missing `kind`".into()))?;
    CkptKind::from_str(kind)
}

pub fn save_trunk<S: Scalar>(path: impl AsRef<Path>, trunk: &TransformerTrunk<S>) -> Result<()> {
    let mut manifest = BTreeMap::new();
    manifest.insert("kind".to_string(), CkptKind::Trunk.as_str().to_string());
    config_manifest(&mut manifest, trunk.config());
    write_archive(path.as_ref(), &manifest, S::DTYPE, &trunk_records(trunk, ""))
}

pub fn load_trunk<S: Scalar>(path: impl AsRef<Path>) -> Result<TransformerTrunk<S>> {
    let mut archive = read_archive::<S>(path.as_ref())?;
    let kind = CkptKind::from_str(archive.meta("kind")?)?;
    if kind != CkptKind::Trunk {
        return Err(Error::Format(format!("expected a trunk checkpoint, found {}", kind.as_str())));
    }
    let cfg = archive.config()?;
    let trunk = collect_trunk(&mut archive, &cfg, "")?;
    archive.finish(kind)?;
    Ok(trunk)
}

/// Saves one exit module. The trunk config rides along so loading can
/// refuse a module trained against a different architecture.
pub fn save_balcony<S: Scalar>(
    path: impl AsRef<Path>,
    module: &BalconyModule<S>,
    cfg: &ModelConfig,
) -> Result<()> {
    let mut manifest = BTreeMap::new();
    manifest.insert("kind".to_string(), CkptKind::Balcony.as_str().to_string());
    config_manifest(&mut manifest, cfg);
    balcony_manifest(&mut manifest, "", module);
    let mut tensors = Vec::new();
    module.visit("balcony", &mut |name, t| tensors.push(record(name, t)));
    write_archive(path.as_ref(), &manifest, S::DTYPE, &tensors)
}

pub fn load_balcony<S: Scalar>(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<BalconyModule<S>> {
    let mut archive = read_archive::<S>(path.as_ref())?;
    let kind = CkptKind::from_str(archive.meta("kind")?)?;
    if kind != CkptKind::Balcony {
        return Err(Error::Format(format!(
            "expected an exit-module checkpoint, found {}",
            kind.as_str()
        )));
    }
    let stored = archive.config()?;
    check_config(expected, &stored)?;
    let module = collect_balcony(&mut archive, expected, "", "balcony.")?;
    archive.finish(kind)?;
    Ok(module)
}

/// Saves a trunk together with every attached exit module.
pub fn save_bundle<S: Scalar>(
    path: impl AsRef<Path>,
    trunk: &TransformerTrunk<S>,
    modules: &[BalconyModule<S>],
) -> Result<()> {
    let mut manifest = BTreeMap::new();
    manifest.insert("kind".to_string(), CkptKind::Bundle.as_str().to_string());
    config_manifest(&mut manifest, trunk.config());
    let exits: Vec<String> = modules.iter().map(|m| m.exit_layer.to_string()).collect();
    manifest.insert("exits".to_string(), exits.join(","));
    for m in modules {
        balcony_manifest(&mut manifest, &format!("exit{}.", m.exit_layer), m);
    }
    let mut tensors = trunk_records(trunk, "trunk.");
    for m in modules {
        m.visit(&format!("exit{}", m.exit_layer), &mut |name, t| tensors.push(record(name, t)));
    }
    write_archive(path.as_ref(), &manifest, S::DTYPE, &tensors)
}

pub fn load_bundle<S: Scalar>(
    path: impl AsRef<Path>,
) -> Result<(TransformerTrunk<S>, Vec<BalconyModule<S>>)> {
    let mut archive = read_archive::<S>(path.as_ref())?;
    let kind = CkptKind::from_str(archive.meta("kind")?)?;
    if kind != CkptKind::Bundle {
        return Err(Error::Format(format!("expected a bundle checkpoint, found {}", kind.as_str())));
    }
    let cfg = archive.config()?;
    let trunk = collect_trunk(&mut archive, &cfg, "trunk.")?;
    let exits_text = archive.meta("exits")?.to_string();
    let mut modules = Vec::new();
    if !exits_text.is_empty() {
        for j in exits_text.split(',') {
            let j: usize = j
                .parse()
                .map_err(|_| Error::Format(format!("bad exit index `{j}` in manifest")))?;
            modules.push(collect_balcony(
                &mut archive,
                &cfg,
                &format!("exit{j}."),
                &format!("exit{j}."),
            )?);
        }
    }
    archive.finish(kind)?;
    Ok((trunk, modules))
}

/// Saves optimizer state (first and second moments per parameter, plus
/// the step counter and hyperparameters that must survive a resume).
pub fn save_optimizer<S: Scalar>(path: impl AsRef<Path>, opt: &AdamW<S>) -> Result<()> {
    let mut manifest = BTreeMap::new();
    manifest.insert("kind".to_string(), CkptKind::Optimizer.as_str().to_string());
    manifest.insert("steps".to_string(), opt.steps().to_string());
    manifest.insert("weight_decay".to_string(), opt.weight_decay.to_string());
    manifest.insert(
        "clip_norm".to_string(),
        opt.clip_norm.map_or("none".to_string(), |c| c.to_string()),
    );
    let mut tensors = Vec::new();
    opt.visit_state(&mut |name, data| {
        let mut bytes = Vec::with_capacity(data.len() * S::DTYPE.size());
        for &v in data {
            v.write_le(&mut bytes);
        }
        tensors.push(TensorRecord {
            name: format!("state.{name}"),
            shape: vec![data.len()],
            bytes,
        });
    });
    write_archive(path.as_ref(), &manifest, S::DTYPE, &tensors)
}

pub fn load_optimizer<S: Scalar>(path: impl AsRef<Path>) -> Result<AdamW<S>> {
    let archive = read_archive::<S>(path.as_ref())?;
    let kind = CkptKind::from_str(archive.meta("kind")?)?;
    if kind != CkptKind::Optimizer {
        return Err(Error::Format(format!(
            "expected an optimizer checkpoint, found {}",
            kind.as_str()
        )));
    }
    let steps: u64 = archive
        .meta("steps")?
        .parse()
        .map_err(|_| Error::Format("steps is not an integer".into()))?;
    let weight_decay: f64 = archive
        .meta("weight_decay")?
        .parse()
        .map_err(|_| Error::Format("weight_decay is not a number".into()))?;
    let clip_norm = match archive.meta("clip_norm")? {
        "none" => None,
        v => Some(
            v.parse()
                .map_err(|_| Error::Format("clip_norm is not a number".into()))?,
        ),
    };
    let mut opt = AdamW::new(weight_decay, clip_norm);
    opt.set_steps(steps);
    let mut moments: BTreeMap<String, (Option<Vec<S>>, Option<Vec<S>>)> = BTreeMap::new();
    for (name, t) in archive.tensors {
        let name = name
            .strip_prefix("state.")
            .ok_or_else(|| Error::Format(format!("unexpected tensor `{name}`")))?;
        if let Some(param) = name.strip_suffix(".m") {
            moments.entry(param.to_string()).or_default().0 = Some(t.data().to_vec());
        } else if let Some(param) = name.strip_suffix(".v") {
            moments.entry(param.to_string()).or_default().1 = Some(t.data().to_vec());
        } else {
            return Err(Error::Format(format!("optimizer tensor `{name}` is neither .m nor .v")));
        }
    }
    for (param, (m, v)) in moments {
        let (Some(m), Some(v)) = (m, v) else {
            return Err(Error::Format(format!("parameter `{param}` lacks one of its moments")));
        };
        opt.load_slot(&param, m, v)?;
    }
    Ok(opt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exits::{attach_balconies, submodel_forward, ExitPointSet, Selection};
    use crate::tensor::TokenBatch;
    use rand_chacha::rand_core::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig::new(2, 16, 2, 32, 32, 24, 10000.0).unwrap()
    }

    fn batch(cfg: &ModelConfig, seed: u64) -> TokenBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = (0..2 * 12).map(|_| rng.next_u32() % cfg.vocab_size as u32).collect();
        TokenBatch::new(ids, 2, 12).unwrap()
    }

    fn tensors_bitwise_equal<S: Scalar>(
        a: &TransformerTrunk<S>,
        b: &TransformerTrunk<S>,
    ) -> bool {
        let mut pairs: Vec<(String, Vec<u64>)> = Vec::new();
        a.visit(&mut |n, t| pairs.push((n.to_string(), t.data().iter().map(|v| v.bits()).collect())));
        let mut ok = true;
        let mut i = 0;
        b.visit(&mut |n, t| {
            let (an, abits) = &pairs[i];
            ok &= an == n && t.data().iter().map(|v| v.bits()).eq(abits.iter().copied());
            i += 1;
        });
        ok && i == pairs.len()
    }

    #[test]
    fn trunk_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunk.blcn");
        let cfg = tiny_cfg();
        let trunk = TransformerTrunk::<f32>::random(cfg.clone(), 5).unwrap();
        save_trunk(&path, &trunk).unwrap();
        assert_eq!(peek_kind(&path).unwrap(), CkptKind::Trunk);
        let loaded = load_trunk::<f32>(&path).unwrap();
        assert!(tensors_bitwise_equal(&trunk, &loaded));
        assert!(loaded.fully_frozen());
        let toks = batch(&cfg, 1);
        let a = trunk.forward_full(&toks).unwrap();
        let b = loaded.forward_full(&toks).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.bits() == y.bits()));
    }

    #[test]
    fn balcony_round_trip_keeps_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let trunk = TransformerTrunk::<f32>::random(cfg.clone(), 7).unwrap();
        let exits = ExitPointSet::new(vec![1], cfg.n_layers).unwrap();
        for (variant, init) in [
            (crate::exits::BodyVariant::Full, InitMode::FromLastLayer),
            (crate::exits::BodyVariant::MlpOnly, InitMode::Random { seed: 9 }),
            (crate::exits::BodyVariant::AttnOnly, InitMode::Random { seed: 3 }),
        ] {
            let modules = attach_balconies(&trunk, &exits, init, variant).unwrap();
            let path = dir.path().join(format!("balcony-{}.blcn", variant.as_str()));
            save_balcony(&path, &modules[0], &cfg).unwrap();
            let loaded = load_balcony::<f32>(&path, &cfg).unwrap();
            assert_eq!(loaded.exit_layer, 1);
            assert_eq!(loaded.variant, variant);
            assert_eq!(loaded.init_mode, init);
            assert_eq!(loaded.param_count(), modules[0].param_count());
            let hidden = trunk.hidden_to_layer(&batch(&cfg, 2), 1).unwrap();
            let a = modules[0].logits(&cfg, &trunk.lm_head, &hidden).unwrap();
            let b = loaded.logits(&cfg, &trunk.lm_head, &hidden).unwrap();
            assert!(a.iter().zip(&b).all(|(x, y)| x.bits() == y.bits()));
        }
    }

    #[test]
    fn mismatched_config_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("balcony.blcn");
        let cfg = tiny_cfg();
        let trunk = TransformerTrunk::<f32>::random(cfg.clone(), 7).unwrap();
        let exits = ExitPointSet::new(vec![1], cfg.n_layers).unwrap();
        let modules = attach_balconies(
            &trunk,
            &exits,
            InitMode::FromLastLayer,
            crate::exits::BodyVariant::Full,
        )
        .unwrap();
        save_balcony(&path, &modules[0], &cfg).unwrap();
        let mut other = cfg.clone();
        other.d_ff = 48;
        match load_balcony::<f32>(&path, &other) {
            Err(Error::ConfigMismatch { field, .. }) => assert_eq!(field, "d_ff"),
            other => panic!("wanted ConfigMismatch, got {other:?}"),
        }
    }

    #[test]
    fn bundle_round_trip_reproduces_submodel_logits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle.blcn");
        let cfg = tiny_cfg();
        let trunk = TransformerTrunk::<f32>::random(cfg.clone(), 11).unwrap();
        let exits = ExitPointSet::new(vec![0, 1], cfg.n_layers).unwrap();
        let modules = attach_balconies(
            &trunk,
            &exits,
            InitMode::Random { seed: 13 },
            crate::exits::BodyVariant::Full,
        )
        .unwrap();
        save_bundle(&path, &trunk, &modules).unwrap();
        assert_eq!(peek_kind(&path).unwrap(), CkptKind::Bundle);
        let (t2, m2) = load_bundle::<f32>(&path).unwrap();
        assert_eq!(m2.len(), 2);
        let toks = batch(&cfg, 3);
        for sel in [Selection::Exit(0), Selection::Exit(1), Selection::Full] {
            let a = submodel_forward(&trunk, &modules, sel, &toks).unwrap();
            let b = submodel_forward(&t2, &m2, sel, &toks).unwrap();
            assert!(a.iter().zip(&b).all(|(x, y)| x.bits() == y.bits()), "{sel}");
        }
    }

    #[test]
    fn resave_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("one.blcn");
        let p2 = dir.path().join("two.blcn");
        let cfg = tiny_cfg();
        let trunk = TransformerTrunk::<f32>::random(cfg.clone(), 17).unwrap();
        let exits = ExitPointSet::new(vec![1], cfg.n_layers).unwrap();
        let modules = attach_balconies(
            &trunk,
            &exits,
            InitMode::FromLastLayer,
            crate::exits::BodyVariant::Full,
        )
        .unwrap();
        save_bundle(&p1, &trunk, &modules).unwrap();
        let (t2, m2) = load_bundle::<f32>(&p1).unwrap();
        save_bundle(&p2, &t2, &m2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn optimizer_state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("opt.blcn");
        let mut opt = AdamW::<f32>::new(0.1, Some(1.0));
        opt.set_steps(42);
        opt.load_slot("exit2.wq", vec![1.0, -2.0, 3.0], vec![0.5, 0.25, 0.125]).unwrap();
        opt.load_slot("exit2.exit_norm", vec![0.0], vec![1e-8]).unwrap();
        save_optimizer(&path, &opt).unwrap();
        let loaded = load_optimizer::<f32>(&path).unwrap();
        assert_eq!(loaded.steps(), 42);
        assert_eq!(loaded.weight_decay, 0.1);
        assert_eq!(loaded.clip_norm, Some(1.0));
        let mut a = Vec::new();
        opt.visit_state(&mut |n, d| a.push((n.to_string(), d.to_vec())));
        let mut b = Vec::new();
        loaded.visit_state(&mut |n, d| b.push((n.to_string(), d.to_vec())));
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_files_fail_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunk.blcn");
        let cfg = tiny_cfg();
        let trunk = TransformerTrunk::<f32>::random(cfg, 19).unwrap();
        save_trunk(&path, &trunk).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(load_trunk::<f32>(&path), Err(Error::Format(_))));
        assert!(matches!(peek_kind(&path), Err(Error::Format(_))));

        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_trunk::<f32>(&path), Err(Error::Format(_))));

        let mut bad_version = bytes.clone();
        bad_version[4] = 99;
        std::fs::write(&path, &bad_version).unwrap();
        assert!(matches!(load_trunk::<f32>(&path), Err(Error::Format(_))));

        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_trunk::<f64>(&path), Err(Error::Format(_))));
    }
}
