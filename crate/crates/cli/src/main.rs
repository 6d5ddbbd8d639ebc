//! Operator surface for the exit-module toolkit: pretraining, distilling
//! attachable exits against a frozen trunk, budgeted generation, latency
//! sweeps, ablation comparisons, and checkpoint evaluation. One command
//! per process; everything is deterministic given (config, seed).
//!
//! Exit codes: 0 success, 2 config error, 3 freeze violation, 4
//! infeasible budget, 5 I/O or file-format error, 1 internal.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use balcony_core::ckpt::{
    load_bundle, load_trunk, peek_kind, save_balcony, save_bundle, save_trunk, CkptKind,
};
use balcony_core::exits::{attach_balconies, BalconyModule, BodyVariant, ExitPointSet, InitMode};
use balcony_core::infer::{
    generate_uncached, measure_latency, BudgetSpec, Engine, LatencyRow, Sampler,
};
use balcony_core::model::{ModelConfig, TransformerTrunk};
use balcony_core::prune::{depth_prune, width_prune, PruneAxis, PrunedConfig, SweepReport, SweepRow};
use balcony_core::scalar::Scalar;
use balcony_core::tensor::TokenBatch;
use balcony_core::train::{
    mean_ce_rows, mean_kl_rows, Corpus, ExitEval, LossMode, TrainReport, Trainer,
};
use balcony_core::{Error, Result};
use clap::{Parser, Subcommand};
use config::RunConfig;
use sha2::{Digest, Sha256};

/// Seed offsets keeping independent random streams apart. The trunk-init
/// offset matches the library's pretraining helper; the probe offset is
/// shared by distill and eval so their logits hashes are comparable.
const TRUNK_INIT_OFFSET: u64 = 0x7EA1;
const PROBE_OFFSET: u64 = 0x9E0B;
const RANDOM_INIT_OFFSET: u64 = 0xD1CE;

#[derive(Parser)]
#[command(
    name = "balcony",
    about = "Attachable exit layers on a frozen decoder trunk: train, distill, generate, bench",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate a config file and print its canonical form.
    Config {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a trunk from scratch (loss_mode ce_joint_avg or sorted_avg).
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Attach exit modules to a frozen trunk and distill them.
    Distill {
        #[arg(long)]
        trunk: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated exit indices, overriding exits.indices.
        #[arg(long)]
        exits: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Module body: full, mlp_only, or attn_only.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Decode text from a bundle under a compute budget.
    Generate {
        #[arg(long)]
        bundle: PathBuf,
        /// full | exit:J | params:N
        #[arg(long, default_value = "full")]
        budget: String,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 32)]
        tokens: usize,
        /// Softmax temperature; omit for greedy decoding.
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
        /// Print token ids instead of decoded bytes.
        #[arg(long)]
        ids: bool,
        /// Recompute from scratch each token instead of using the cache.
        #[arg(long)]
        uncached: bool,
    },
    /// Depth- vs width-pruned decode latency at matched parameter ratios.
    Bench {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// depth | width | both
        #[arg(long, default_value = "both")]
        axis: String,
        /// Comma-separated parameter ratios, overriding bench.ratios.
        #[arg(long)]
        ratios: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one training variant against the standard recipe, side by side.
    Ablate {
        #[arg(long)]
        trunk: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// random_init | mlp_only | attn_only | kl_plus_ce | unfrozen | sorted
        #[arg(long)]
        variant: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Held-out metrics and a probe-logits hash for a trunk or bundle.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::ConfigMismatch { .. }
        | Error::InvalidArgument(_)
        | Error::ShapeMismatch { .. } => 2,
        Error::FreezeViolation(_) => 3,
        Error::InfeasibleBudget { .. } => 4,
        Error::Io(_) | Error::Format(_) => 5,
        Error::Tape(_) | Error::Numeric { .. } => 1,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Config { config } => cmd_config(&config),
        Cmd::Pretrain { config, out, steps, seed } => cmd_pretrain(&config, &out, steps, seed),
        Cmd::Distill { trunk, config, out, exits, steps, seed, variant } => {
            cmd_distill(&trunk, &config, &out, exits, steps, seed, variant)
        }
        Cmd::Generate { bundle, budget, prompt, tokens, temperature, sample_seed, ids, uncached } => {
            cmd_generate(&bundle, &budget, &prompt, tokens, temperature, sample_seed, ids, uncached)
        }
        Cmd::Bench { bundle, config, out, axis, ratios, seed } => {
            cmd_bench(&bundle, config.as_deref(), &out, &axis, ratios, seed)
        }
        Cmd::Ablate { trunk, config, variant, out, steps, seed } => {
            cmd_ablate(&trunk, &config, &variant, &out, steps, seed)
        }
        Cmd::Eval { ckpt, config, out } => cmd_eval(&ckpt, &config, out.as_deref()),
    }
}

fn parse_budget(s: &str) -> Result<BudgetSpec> {
    if s == "full" {
        return Ok(BudgetSpec::Full);
    }
    let parsed = match s.split_once(':') {
        Some(("exit", j)) => j.parse().ok().map(BudgetSpec::ExitIndex),
        Some(("params", n)) => n.parse().ok().map(BudgetSpec::MaxNonembedParams),
        _ => None,
    };
    parsed.ok_or_else(|| {
        Error::Config(format!("bad budget `{s}`; expected full, exit:J, or params:N"))
    })
}

fn parse_exit_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|item| {
            item.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad exit index `{}` in --exits", item.trim())))
        })
        .collect()
}

/// A checkpoint must agree with the config on every architecture field.
/// Both sides render canonically with sorted keys, so a line-by-line zip
/// pairs up the same field on each side.
fn check_model_agreement(cfg: &ModelConfig, ckpt_cfg: &ModelConfig) -> Result<()> {
    for (want, got) in cfg.to_kv().lines().zip(ckpt_cfg.to_kv().lines()) {
        if want != got {
            let (field, expected) = want.split_once('=').unwrap_or((want, ""));
            let found = got.split_once('=').map_or(got, |(_, v)| v);
            return Err(Error::ConfigMismatch {
                field: field.to_string(),
                expected: expected.to_string(),
                found: found.to_string(),
            });
        }
    }
    Ok(())
}

fn write_report_csv(path: &Path, rc: &RunConfig, body: &str) -> Result<()> {
    std::fs::write(path, format!("# config_hash={} seed={}\n{body}", rc.hash(), rc.train.seed))?;
    Ok(())
}

fn logits_hash(logits: &[f32]) -> String {
    let mut hasher = Sha256::new();
    for v in logits {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

fn probe_batch(rc: &RunConfig, corpus: &Corpus) -> Result<TokenBatch> {
    let seq = rc.model.max_seq_len.min(64);
    let mut batches = corpus.eval_batches(rc.corpus_seed ^ PROBE_OFFSET, 1, 8, seq)?;
    Ok(batches.remove(0).0)
}

fn print_eval_table(entries: &BTreeMap<String, ExitEval>) {
    println!("{:<8} {:>12} {:>12}", "scope", "heldout_kl", "heldout_ce");
    for (scope, e) in entries {
        if scope == "full" {
            println!("{:<8} {:>12} {:>12.6}", scope, "-", e.ce);
        } else {
            println!("{:<8} {:>12.6} {:>12.6}", format!("exit {scope}"), e.kl, e.ce);
        }
    }
}

fn final_entries(report: &TrainReport) -> &BTreeMap<String, ExitEval> {
    &report.evals.last().expect("run always records an eval").entries
}

fn cmd_config(path: &Path) -> Result<()> {
    let rc = RunConfig::load(path)?;
    print!("{}", rc.normalized());
    Ok(())
}

fn cmd_pretrain(config: &Path, out: &Path, steps: Option<usize>, seed: Option<u64>) -> Result<()> {
    let mut rc = RunConfig::load(config)?;
    if let Some(s) = steps {
        rc.train.steps = s;
    }
    if let Some(s) = seed {
        rc.train.seed = s;
    }
    match rc.train.loss_mode {
        LossMode::CeJointAvg | LossMode::SortedAvg => {}
        other => {
            return Err(Error::Config(format!(
                "train.loss_mode: pretrain trains the trunk from scratch; use ce_joint_avg or sorted_avg, not {}",
                other.as_str()
            )))
        }
    }
    rc.train.validate()?;
    std::fs::create_dir_all(out)?;
    let corpus = Corpus::synthetic(rc.corpus_seed, rc.corpus_bytes)?;
    let trunk = TransformerTrunk::<f32>::random(rc.model.clone(), rc.train.seed ^ TRUNK_INIT_OFFSET)?;
    let exits = ExitPointSet::new(rc.exits.clone(), rc.model.n_layers)?;
    let modules = if rc.train.loss_mode == LossMode::CeJointAvg && !exits.is_empty() {
        attach_balconies(&trunk, &exits, rc.init_mode(), rc.variant)?
    } else {
        Vec::new()
    };
    let mut trainer = Trainer::new(trunk, modules, exits, rc.train.clone(), corpus)?;
    let report = trainer.run()?;

    let ckpt = if trainer.modules.is_empty() {
        let path = out.join("trunk.blcn");
        save_trunk(&path, &trainer.trunk)?;
        path
    } else {
        let path = out.join("bundle.blcn");
        save_bundle(&path, &trainer.trunk, &trainer.modules)?;
        path
    };
    write_report_csv(&out.join("train_rows.csv"), &rc, &report.rows_csv())?;
    write_report_csv(&out.join("evals.csv"), &rc, &report.evals_csv())?;

    println!("checkpoint = {}", ckpt.display());
    println!("steps = {}  tokens = {}  wall_secs = {:.1}", rc.train.steps, report.tokens_consumed, report.wall_secs);
    print_eval_table(final_entries(&report));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_distill(
    trunk_path: &Path,
    config: &Path,
    out: &Path,
    exits_flag: Option<String>,
    steps: Option<usize>,
    seed: Option<u64>,
    variant_flag: Option<String>,
) -> Result<()> {
    let mut rc = RunConfig::load(config)?;
    if let Some(list) = exits_flag {
        rc.exits = parse_exit_list(&list)?;
    }
    if let Some(s) = steps {
        rc.train.steps = s;
    }
    if let Some(s) = seed {
        rc.train.seed = s;
    }
    if let Some(v) = variant_flag {
        rc.variant = BodyVariant::from_str(&v)?;
    }
    match rc.train.loss_mode {
        LossMode::KlOnly | LossMode::KlPlusCe => {}
        other => {
            return Err(Error::Config(format!(
                "train.loss_mode: distill aligns exit modules to a frozen trunk; use kl_only or kl_plus_ce, not {}",
                other.as_str()
            )))
        }
    }
    if !rc.train.freeze_trunk {
        return Err(Error::Config(
            "train.freeze_trunk: distill requires true; the unfrozen comparison lives under `ablate --variant unfrozen`"
                .to_string(),
        ));
    }
    if rc.exits.is_empty() {
        return Err(Error::Config("exits.indices: distill needs at least one exit".to_string()));
    }

    let trunk = load_trunk::<f32>(trunk_path)?;
    check_model_agreement(&rc.model, trunk.config())?;
    std::fs::create_dir_all(out)?;
    let corpus = Corpus::synthetic(rc.corpus_seed, rc.corpus_bytes)?;
    let probe = probe_batch(&rc, &corpus)?;
    let before = trunk.forward_full(&probe)?;

    let exits = ExitPointSet::new(rc.exits.clone(), rc.model.n_layers)?;
    let modules = attach_balconies(&trunk, &exits, rc.init_mode(), rc.variant)?;
    let mut trainer = Trainer::new(trunk, modules, exits, rc.train.clone(), corpus)?;
    let report = trainer.run()?;

    let after = trainer.trunk.forward_full(&probe)?;
    if before.len() != after.len()
        || before.iter().zip(&after).any(|(a, b)| a.bits() != b.bits())
    {
        let moved = before.iter().zip(&after).filter(|(a, b)| a.bits() != b.bits()).count();
        return Err(Error::FreezeViolation(format!(
            "full-model probe logits changed during distillation ({moved} of {} values)",
            before.len()
        )));
    }

    for m in &trainer.modules {
        save_balcony(&out.join(format!("balcony_exit{}.blcn", m.exit_layer)), m, trainer.trunk.config())?;
    }
    save_bundle(&out.join("bundle.blcn"), &trainer.trunk, &trainer.modules)?;
    write_report_csv(&out.join("train_rows.csv"), &rc, &report.rows_csv())?;
    write_report_csv(&out.join("evals.csv"), &rc, &report.evals_csv())?;

    println!("probe_logits_hash={}", logits_hash(&after));
    let first = &report.evals.first().expect("run always records an eval").entries;
    let last = final_entries(&report);
    for j in &rc.exits {
        let key = j.to_string();
        let (init, fin) = (first[&key].kl, last[&key].kl);
        println!(
            "exit {j}: heldout_kl {init:.6} -> {fin:.6} ({})",
            if fin < init { "lower" } else { "NOT lower" }
        );
    }
    println!("artifacts = {}", out.display());
    print_eval_table(last);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    bundle: &Path,
    budget: &str,
    prompt: &str,
    tokens: usize,
    temperature: Option<f64>,
    sample_seed: u64,
    ids: bool,
    uncached: bool,
) -> Result<()> {
    let spec = parse_budget(budget)?;
    let (trunk, modules) = load_bundle::<f32>(bundle)?;
    let vocab = trunk.config().vocab_size;
    let engine = Engine::new(trunk, modules)?;
    let handle = engine.resolve(spec)?;

    let prompt_tokens: Vec<u32> = prompt.bytes().map(u32::from).collect();
    if prompt_tokens.is_empty() {
        return Err(Error::InvalidArgument("prompt must not be empty".to_string()));
    }
    if let Some(&t) = prompt_tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::InvalidArgument(format!(
            "prompt byte {t} is outside the model's vocab_size {vocab}"
        )));
    }
    let sampler = match temperature {
        None => Sampler::Greedy,
        Some(temp) => Sampler::Temperature { temp, seed: sample_seed },
    };
    let out_tokens = if uncached {
        generate_uncached(&engine, spec, &prompt_tokens, tokens, sampler)?
    } else {
        engine.session(spec)?.generate(&prompt_tokens, tokens, sampler)?
    };

    eprintln!("submodel = {} ({} non-embedding params)", handle.selection, handle.nonembed_param_count);
    if ids || vocab > 256 {
        println!("{}", out_tokens.iter().map(ToString::to_string).collect::<Vec<_>>().join(" "));
    } else {
        let bytes: Vec<u8> = out_tokens.iter().map(|&t| t as u8).collect();
        println!("{}", String::from_utf8_lossy(&bytes));
    }
    Ok(())
}

fn measure_config(
    cfg: &ModelConfig,
    seed: u64,
    bench: &config::BenchSettings,
) -> Result<LatencyRow> {
    let trunk = TransformerTrunk::<f32>::random(cfg.clone(), seed)?;
    let engine = Engine::new(trunk, Vec::new())?;
    measure_latency(
        &engine,
        BudgetSpec::Full,
        &bench.prompt,
        bench.gen_tokens,
        bench.warmup,
        bench.repeats,
    )
}

fn cmd_bench(
    bundle: &Path,
    config: Option<&Path>,
    out: &Path,
    axis: &str,
    ratios_flag: Option<String>,
    seed: Option<u64>,
) -> Result<()> {
    let mut rc = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(list) = ratios_flag {
        rc.bench.ratios = list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad ratio `{}` in --ratios", s.trim())))
            })
            .collect::<Result<Vec<f64>>>()?;
    }
    let axes: &[PruneAxis] = match axis {
        "depth" => &[PruneAxis::Depth],
        "width" => &[PruneAxis::Width],
        "both" => &[PruneAxis::Depth, PruneAxis::Width],
        other => {
            return Err(Error::Config(format!(
                "bad --axis `{other}`; expected depth, width, or both"
            )))
        }
    };
    let seed = seed.unwrap_or(rc.train.seed);

    let base_cfg = match peek_kind(bundle)? {
        CkptKind::Trunk => load_trunk::<f32>(bundle)?.config().clone(),
        CkptKind::Bundle => load_bundle::<f32>(bundle)?.0.config().clone(),
        other => {
            return Err(Error::Config(format!(
                "bench wants a trunk or bundle checkpoint, found {}",
                other.as_str()
            )))
        }
    };
    for &t in &rc.bench.prompt {
        if t as usize >= base_cfg.vocab_size {
            return Err(Error::Config(format!(
                "bench.prompt: token {t} is outside the checkpoint's vocab_size {}",
                base_cfg.vocab_size
            )));
        }
    }
    std::fs::create_dir_all(out)?;

    // Every shape is decoded with fresh seeded weights; latency depends
    // only on the shape, and the base row sets speedup 1.
    let base = measure_config(&base_cfg, seed, &rc.bench)?;
    let mut report = SweepReport::default();
    report.rows.push(SweepRow {
        axis: "base".to_string(),
        target_ratio: 1.0,
        achieved_ratio: 1.0,
        n_layers: base_cfg.n_layers,
        n_heads: base_cfg.n_heads,
        d_ff: base_cfg.d_ff,
        nonembed_params: base.nonembed_params,
        median_ms_per_token: base.median_ms_per_token,
        speedup: 1.0,
    });
    for &ratio in &rc.bench.ratios {
        for &ax in axes {
            let PrunedConfig { axis, config: pruned, achieved_ratio } = match ax {
                PruneAxis::Depth => depth_prune(&base_cfg, ratio, rc.bench.tol)?,
                PruneAxis::Width => width_prune(&base_cfg, ratio, rc.bench.tol)?,
            };
            let row = measure_config(&pruned, seed, &rc.bench)?;
            report.rows.push(SweepRow {
                axis: axis.as_str().to_string(),
                target_ratio: ratio,
                achieved_ratio,
                n_layers: pruned.n_layers,
                n_heads: pruned.n_heads,
                d_ff: pruned.d_ff,
                nonembed_params: row.nonembed_params,
                median_ms_per_token: row.median_ms_per_token,
                speedup: base.median_ms_per_token / row.median_ms_per_token,
            });
        }
    }
    write_report_csv(&out.join("sweep.csv"), &rc, &report.csv())?;

    println!("base: {:.3} ms/token at {} params", base.median_ms_per_token, base.nonembed_params);
    for &ratio in &rc.bench.ratios {
        match (report.row(PruneAxis::Depth, ratio), report.row(PruneAxis::Width, ratio)) {
            (Some(d), Some(w)) => println!(
                "ratio {ratio}: depth {:.2}x vs width {:.2}x (depth >= width: {})",
                d.speedup,
                w.speedup,
                if d.speedup >= w.speedup { "yes" } else { "no" }
            ),
            (Some(d), None) => println!("ratio {ratio}: depth {:.2}x", d.speedup),
            (None, Some(w)) => println!("ratio {ratio}: width {:.2}x", w.speedup),
            (None, None) => {}
        }
    }
    println!("report = {}", out.join("sweep.csv").display());
    Ok(())
}

enum AblationArm {
    Standard,
    RandomInit,
    MlpOnly,
    AttnOnly,
    KlPlusCe,
    Unfrozen,
    Sorted,
}

impl AblationArm {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "random_init" => AblationArm::RandomInit,
            "mlp_only" => AblationArm::MlpOnly,
            "attn_only" => AblationArm::AttnOnly,
            "kl_plus_ce" => AblationArm::KlPlusCe,
            "unfrozen" => AblationArm::Unfrozen,
            "sorted" => AblationArm::Sorted,
            other => {
                return Err(Error::Config(format!(
                    "unknown variant `{other}`; expected random_init, mlp_only, attn_only, kl_plus_ce, unfrozen, or sorted"
                )))
            }
        })
    }
}

/// Runs one arm of an ablation from a shared trunk. The standard arm is
/// from-last-layer init, full body, KL only, frozen trunk; each variant
/// changes exactly one of those choices.
fn run_arm(
    trunk: TransformerTrunk<f32>,
    rc: &RunConfig,
    corpus: &Corpus,
    arm: &AblationArm,
) -> Result<(TrainReport, usize)> {
    let mut tc = rc.train.clone();
    tc.loss_mode = LossMode::KlOnly;
    tc.freeze_trunk = true;
    let mut init = InitMode::FromLastLayer;
    let mut body = BodyVariant::Full;
    let mut with_modules = true;
    match arm {
        AblationArm::Standard => {}
        AblationArm::RandomInit => init = InitMode::Random { seed: tc.seed ^ RANDOM_INIT_OFFSET },
        AblationArm::MlpOnly => body = BodyVariant::MlpOnly,
        AblationArm::AttnOnly => body = BodyVariant::AttnOnly,
        AblationArm::KlPlusCe => tc.loss_mode = LossMode::KlPlusCe,
        AblationArm::Unfrozen => tc.freeze_trunk = false,
        AblationArm::Sorted => {
            tc.loss_mode = LossMode::SortedAvg;
            tc.freeze_trunk = false;
            with_modules = false;
        }
    }
    let exits = ExitPointSet::new(rc.exits.clone(), rc.model.n_layers)?;
    let modules: Vec<BalconyModule<f32>> = if with_modules {
        attach_balconies(&trunk, &exits, init, body)?
    } else {
        Vec::new()
    };
    let module_params = modules.iter().map(|m| m.param_count()).sum();
    let mut trainer = Trainer::new(trunk, modules, exits, tc, corpus.clone())?;
    let report = trainer.run()?;
    Ok((report, module_params))
}

fn cmd_ablate(
    trunk_path: &Path,
    config: &Path,
    variant: &str,
    out: &Path,
    steps: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let arm = AblationArm::parse(variant)?;
    let mut rc = RunConfig::load(config)?;
    if let Some(s) = steps {
        rc.train.steps = s;
    }
    if let Some(s) = seed {
        rc.train.seed = s;
    }
    if rc.exits.is_empty() {
        return Err(Error::Config("exits.indices: ablations compare exit modules; give at least one".to_string()));
    }
    let trunk = load_trunk::<f32>(trunk_path)?;
    check_model_agreement(&rc.model, trunk.config())?;
    std::fs::create_dir_all(out)?;
    let corpus = Corpus::synthetic(rc.corpus_seed, rc.corpus_bytes)?;

    let (standard, standard_params) = run_arm(trunk.clone(), &rc, &corpus, &AblationArm::Standard)?;
    let (varied, varied_params) = run_arm(trunk, &rc, &corpus, &arm)?;

    let s = final_entries(&standard);
    let v = final_entries(&varied);
    let mut csv = String::from("scope,standard_kl,standard_ce,variant_kl,variant_ce\n");
    let scopes: BTreeMap<&String, ()> = s.keys().chain(v.keys()).map(|k| (k, ())).collect();
    let cell = |e: Option<&ExitEval>, f: fn(&ExitEval) -> f64| {
        e.map(|e| f(e).to_string()).unwrap_or_default()
    };
    for (scope, ()) in scopes {
        csv.push_str(&format!(
            "{scope},{},{},{},{}\n",
            cell(s.get(scope), |e| e.kl),
            cell(s.get(scope), |e| e.ce),
            cell(v.get(scope), |e| e.kl),
            cell(v.get(scope), |e| e.ce),
        ));
    }
    write_report_csv(&out.join("comparison.csv"), &rc, &csv)?;

    println!("variant = {variant}");
    println!("module_params: standard = {standard_params}, variant = {varied_params}");
    let mut kl_wins = 0usize;
    let mut exits_counted = 0usize;
    for j in &rc.exits {
        let key = j.to_string();
        if let (Some(se), Some(ve)) = (s.get(&key), v.get(&key)) {
            exits_counted += 1;
            if se.kl <= ve.kl {
                kl_wins += 1;
            }
            println!(
                "exit {j}: heldout_kl standard {:.6} vs variant {:.6}; heldout_ce {:.6} vs {:.6}",
                se.kl, ve.kl, se.ce, ve.ce
            );
        }
    }
    if exits_counted > 0 {
        println!("standard has lower-or-equal heldout_kl at {kl_wins}/{exits_counted} exits");
    }
    if let (Some(se), Some(ve)) = (s.get("full"), v.get("full")) {
        println!("full-model heldout_ce: standard {:.6} vs variant {:.6}", se.ce, ve.ce);
    }
    println!("report = {}", out.join("comparison.csv").display());
    Ok(())
}

fn cmd_eval(ckpt: &Path, config: &Path, out: Option<&Path>) -> Result<()> {
    let rc = RunConfig::load(config)?;
    let (trunk, modules) = match peek_kind(ckpt)? {
        CkptKind::Trunk => (load_trunk::<f32>(ckpt)?, Vec::new()),
        CkptKind::Bundle => load_bundle::<f32>(ckpt)?,
        other => {
            return Err(Error::Config(format!(
                "eval wants a trunk or bundle checkpoint, found {}",
                other.as_str()
            )))
        }
    };
    check_model_agreement(&rc.model, trunk.config())?;
    let corpus = Corpus::synthetic(rc.corpus_seed, rc.corpus_bytes)?;
    let probe = probe_batch(&rc, &corpus)?;
    println!("probe_logits_hash={}", logits_hash(&trunk.forward_full(&probe)?));

    // Same held-out draw the trainer evaluates on, so numbers line up
    // with training reports for the same config.
    let eval_set = corpus.eval_batches(
        rc.train.seed ^ 0x6060_5EED,
        4,
        rc.train.batch_size.min(4),
        rc.train.seq_len,
    )?;
    let cfg = trunk.config();
    let mut taps: Vec<usize> = modules.iter().map(|m| m.exit_layer).collect();
    taps.sort_unstable();
    let mut entries: BTreeMap<String, ExitEval> = BTreeMap::new();
    for (tokens, targets) in &eval_set {
        let (hiddens, teacher) = trunk.forward_with_taps(tokens, &taps)?;
        let full = entries.entry("full".to_string()).or_insert(ExitEval { kl: 0.0, ce: 0.0 });
        full.ce += mean_ce_rows(&teacher, targets, cfg.vocab_size);
        for (i, &j) in taps.iter().enumerate() {
            let module = modules.iter().find(|m| m.exit_layer == j).expect("taps come from modules");
            let student = module.logits(cfg, &trunk.lm_head, &hiddens[i])?;
            let e = entries.entry(j.to_string()).or_insert(ExitEval { kl: 0.0, ce: 0.0 });
            e.kl += mean_kl_rows(&teacher, &student, cfg.vocab_size);
            e.ce += mean_ce_rows(&student, targets, cfg.vocab_size);
        }
    }
    let n = eval_set.len().max(1) as f64;
    for e in entries.values_mut() {
        e.kl /= n;
        e.ce /= n;
    }
    print_eval_table(&entries);

    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let mut csv = String::from("scope,heldout_kl,heldout_ce\n");
        for (scope, e) in &entries {
            if scope == "full" {
                csv.push_str(&format!("{scope},,{}\n", e.ce));
            } else {
                csv.push_str(&format!("{scope},{},{}\n", e.kl, e.ce));
            }
        }
        write_report_csv(&dir.join("eval.csv"), &rc, &csv)?;
        println!("report = {}", dir.join("eval.csv").display());
    }
    Ok(())
}
