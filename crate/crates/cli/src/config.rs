//! Run configuration files: a sectioned key = value format with fixed
//! sections (model, exits, train, bench), defaults for every key, strict
//! rejection of unknown sections/keys/duplicates, and a canonical
//! rendering that is a fixed point of parse-then-render.

use std::collections::BTreeSet;
use std::path::Path;

use balcony_core::exits::{BodyVariant, InitMode};
use balcony_core::model::ModelConfig;
use balcony_core::train::{LossMode, Schedule, TrainConfig};
use balcony_core::{Error, Result};
use sha2::{Digest, Sha256};

/// Latency-sweep settings, all overridable from the [bench] section.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    pub ratios: Vec<f64>,
    pub tol: f64,
    pub prompt: Vec<u32>,
    pub gen_tokens: usize,
    pub warmup: usize,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub exits: Vec<usize>,
    pub init_mode_name: String,
    pub init_seed: u64,
    pub variant: BodyVariant,
    pub train: TrainConfig,
    pub corpus_seed: u64,
    pub corpus_bytes: usize,
    pub bench: BenchSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::toy(),
            exits: vec![2, 4, 6],
            init_mode_name: "from_last_layer".to_string(),
            init_seed: 0,
            variant: BodyVariant::Full,
            train: TrainConfig {
                loss_mode: LossMode::KlOnly,
                kl_weight: 0.001,
                freeze_trunk: true,
                lr_max: 5e-4,
                schedule: Schedule::Cosine,
                batch_size: 8,
                seq_len: 64,
                steps: 500,
                seed: 11,
                eval_every: 100,
            },
            corpus_seed: 41,
            corpus_bytes: 256 * 1024,
            bench: BenchSettings {
                ratios: vec![0.75, 0.5, 0.25],
                tol: 0.02,
                prompt: vec![10, 20, 30, 40],
                gen_tokens: 32,
                warmup: 2,
                repeats: 7,
            },
        }
    }
}

fn field_err(line: usize, field: &str, detail: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: {field}: {detail}"))
}

fn scalar<T: std::str::FromStr>(line: usize, field: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| field_err(line, field, e))
}

fn list<T: std::str::FromStr>(line: usize, field: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|item| scalar(line, field, item.trim())).collect()
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        // Divisibility of d_model by n_heads is checked after all keys
        // are in, so track the raw pair rather than mutating head_dim.
        let mut section: Option<String> = None;
        let mut seen: BTreeSet<String> = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split_once('#').map_or(raw, |(head, _)| head).trim();
            if body.is_empty() {
                continue;
            }
            if let Some(name) = body.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                match name {
                    "model" | "exits" | "train" | "bench" => section = Some(name.to_string()),
                    other => {
                        return Err(Error::Config(format!(
                            "line {line}: unknown section [{other}]; expected model, exits, train, or bench"
                        )))
                    }
                }
                continue;
            }
            let Some((k, v)) = body.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {line}: expected `key = value` or `[section]`, got `{body}`"
                )));
            };
            let key = k.trim();
            let value = v.trim();
            let Some(sec) = section.as_deref() else {
                return Err(Error::Config(format!(
                    "line {line}: key `{key}` appears before any section header"
                )));
            };
            let field = format!("{sec}.{key}");
            if !seen.insert(field.clone()) {
                return Err(Error::Config(format!("line {line}: duplicate key {field}")));
            }
            cfg.apply(line, sec, key, value, &field)?;
        }
        cfg.finalize()?;
        Ok(cfg)
    }

    fn apply(&mut self, line: usize, sec: &str, key: &str, v: &str, field: &str) -> Result<()> {
        match (sec, key) {
            ("model", "n_layers") => self.model.n_layers = scalar(line, field, v)?,
            ("model", "d_model") => self.model.d_model = scalar(line, field, v)?,
            ("model", "n_heads") => self.model.n_heads = scalar(line, field, v)?,
            ("model", "d_ff") => self.model.d_ff = scalar(line, field, v)?,
            ("model", "vocab_size") => self.model.vocab_size = scalar(line, field, v)?,
            ("model", "max_seq_len") => self.model.max_seq_len = scalar(line, field, v)?,
            ("model", "rope_theta") => self.model.rope_theta = scalar(line, field, v)?,
            ("model", "rms_eps") => self.model.rms_eps = scalar(line, field, v)?,
            ("exits", "indices") => self.exits = list(line, field, v)?,
            ("exits", "init_mode") => match v {
                "from_last_layer" | "random" => self.init_mode_name = v.to_string(),
                other => {
                    return Err(field_err(
                        line,
                        field,
                        format!("unknown init mode `{other}`; expected from_last_layer or random"),
                    ))
                }
            },
            ("exits", "init_seed") => self.init_seed = scalar(line, field, v)?,
            ("exits", "variant") => {
                self.variant = BodyVariant::from_str(v).map_err(|e| field_err(line, field, e))?
            }
            ("train", "loss_mode") => {
                self.train.loss_mode =
                    LossMode::from_str(v).map_err(|e| field_err(line, field, e))?
            }
            ("train", "kl_weight") => self.train.kl_weight = scalar(line, field, v)?,
            ("train", "freeze_trunk") => self.train.freeze_trunk = scalar(line, field, v)?,
            ("train", "lr_max") => self.train.lr_max = scalar(line, field, v)?,
            ("train", "schedule") => {
                self.train.schedule =
                    Schedule::from_str(v).map_err(|e| field_err(line, field, e))?
            }
            ("train", "batch_size") => self.train.batch_size = scalar(line, field, v)?,
            ("train", "seq_len") => self.train.seq_len = scalar(line, field, v)?,
            ("train", "steps") => self.train.steps = scalar(line, field, v)?,
            ("train", "seed") => self.train.seed = scalar(line, field, v)?,
            ("train", "eval_every") => self.train.eval_every = scalar(line, field, v)?,
            ("train", "corpus_seed") => self.corpus_seed = scalar(line, field, v)?,
            ("train", "corpus_bytes") => self.corpus_bytes = scalar(line, field, v)?,
            ("bench", "ratios") => self.bench.ratios = list(line, field, v)?,
            ("bench", "tol") => self.bench.tol = scalar(line, field, v)?,
            ("bench", "prompt") => self.bench.prompt = list(line, field, v)?,
            ("bench", "gen_tokens") => self.bench.gen_tokens = scalar(line, field, v)?,
            ("bench", "warmup") => self.bench.warmup = scalar(line, field, v)?,
            ("bench", "repeats") => self.bench.repeats = scalar(line, field, v)?,
            _ => return Err(Error::Config(format!("line {line}: unknown key {field}"))),
        }
        Ok(())
    }

    /// Re-derives head_dim, then validates every section.
    fn finalize(&mut self) -> Result<()> {
        let m = &self.model;
        let mut rebuilt = ModelConfig::new(
            m.n_layers,
            m.d_model,
            m.n_heads,
            m.d_ff,
            m.vocab_size,
            m.max_seq_len,
            m.rope_theta,
        )?;
        rebuilt.rms_eps = m.rms_eps;
        rebuilt.validate()?;
        self.model = rebuilt;
        self.train.validate()?;
        for (i, &j) in self.exits.iter().enumerate() {
            if j >= self.model.n_layers {
                return Err(Error::Config(format!(
                    "exits.indices: exit {j} is not below n_layers {}",
                    self.model.n_layers
                )));
            }
            if self.exits[..i].contains(&j) {
                return Err(Error::Config(format!("exits.indices: duplicate exit {j}")));
            }
        }
        if !(self.bench.tol >= 0.0) {
            return Err(Error::Config("bench.tol must be >= 0".to_string()));
        }
        for &r in &self.bench.ratios {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!("bench.ratios: {r} is outside (0, 1]")));
            }
        }
        if self.bench.prompt.is_empty() || self.bench.gen_tokens == 0 || self.bench.repeats == 0 {
            return Err(Error::Config(
                "bench needs a non-empty prompt, gen_tokens >= 1, and repeats >= 1".to_string(),
            ));
        }
        for &t in &self.bench.prompt {
            if t as usize >= self.model.vocab_size {
                return Err(Error::Config(format!(
                    "bench.prompt: token {t} is outside vocab_size {}",
                    self.model.vocab_size
                )));
            }
        }
        Ok(())
    }

    pub fn init_mode(&self) -> InitMode {
        match self.init_mode_name.as_str() {
            "random" => InitMode::Random { seed: self.init_seed },
            _ => InitMode::FromLastLayer,
        }
    }

    /// Canonical rendering: fixed section and key order, every key explicit.
    /// Parsing this text reproduces the config, and normalizing it again
    /// reproduces the text.
    pub fn normalized(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let b = &self.bench;
        format!(
            "[model]\n\
             n_layers = {}\nd_model = {}\nn_heads = {}\nd_ff = {}\n\
             vocab_size = {}\nmax_seq_len = {}\nrope_theta = {}\nrms_eps = {}\n\
             \n[exits]\n\
             indices = {}\ninit_mode = {}\ninit_seed = {}\nvariant = {}\n\
             \n[train]\n\
             loss_mode = {}\nkl_weight = {}\nfreeze_trunk = {}\nlr_max = {}\n\
             schedule = {}\nbatch_size = {}\nseq_len = {}\nsteps = {}\nseed = {}\n\
             eval_every = {}\ncorpus_seed = {}\ncorpus_bytes = {}\n\
             \n[bench]\n\
             ratios = {}\ntol = {}\nprompt = {}\ngen_tokens = {}\nwarmup = {}\nrepeats = {}\n",
            m.n_layers,
            m.d_model,
            m.n_heads,
            m.d_ff,
            m.vocab_size,
            m.max_seq_len,
            m.rope_theta,
            m.rms_eps,
            join(&self.exits),
            self.init_mode_name,
            self.init_seed,
            self.variant.as_str(),
            t.loss_mode.as_str(),
            t.kl_weight,
            t.freeze_trunk,
            t.lr_max,
            t.schedule.as_str(),
            t.batch_size,
            t.seq_len,
            t.steps,
            t.seed,
            t.eval_every,
            self.corpus_seed,
            self.corpus_bytes,
            join(&b.ratios),
            b.tol,
            join(&b.prompt),
            b.gen_tokens,
            b.warmup,
            b.repeats,
        )
    }

    /// Short content hash of the canonical rendering, for report headers.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.normalized().as_bytes());
        hex::encode(&digest[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_normalization() {
        let cfg = RunConfig::default();
        let text = cfg.normalized();
        let reparsed = RunConfig::parse(&text).unwrap();
        assert_eq!(reparsed, cfg);
        assert_eq!(reparsed.normalized(), text);
        assert_eq!(reparsed.hash(), cfg.hash());
    }

    #[test]
    fn overrides_and_comments_parse() {
        let text = "# experiment\n[model]\nn_layers = 4\nd_model = 32 # narrow\n\n[exits]\nindices = 1,3\ninit_mode = random\ninit_seed = 9\n\n[train]\nsteps = 12\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.model.n_layers, 4);
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.model.head_dim, 8);
        assert_eq!(cfg.exits, vec![1, 3]);
        assert_eq!(cfg.init_mode(), InitMode::Random { seed: 9 });
        assert_eq!(cfg.train.steps, 12);
        assert_eq!(cfg.train.batch_size, 8, "untouched keys keep defaults");
    }

    #[test]
    fn unknown_keys_sections_and_duplicates_are_rejected() {
        for (text, needle) in [
            ("[model]\nwidth = 3\n", "unknown key model.width"),
            ("[engine]\nx = 1\n", "unknown section [engine]"),
            ("[train]\nsteps = 1\nsteps = 2\n", "duplicate key train.steps"),
            ("steps = 1\n", "before any section"),
            ("[train]\nsteps\n", "expected `key = value`"),
        ] {
            let err = RunConfig::parse(text).unwrap_err().to_string();
            assert!(err.contains(needle), "`{err}` should mention `{needle}`");
        }
    }

    #[test]
    fn field_errors_name_the_field_and_line() {
        let err = RunConfig::parse("[model]\nn_layers = soon\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("model.n_layers"), "{err}");
        let err = RunConfig::parse("[exits]\nindices = 9\n").unwrap_err().to_string();
        assert!(err.contains("exit 9"), "{err}");
        let err = RunConfig::parse("[model]\nd_model = 30\nn_heads = 4\n").unwrap_err().to_string();
        assert!(err.contains("not divisible"), "{err}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.train.seed = 12;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
