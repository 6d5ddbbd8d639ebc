//! Structural pruning along two axes at matched parameter ratios: depth
//! (drop whole layers) and width (shrink the MLP intermediate size toward
//! the d_model floor, then drop attention heads at fixed head_dim), plus
//! a latency sweep that decodes with both families and reports speedups
//! over the unpruned model.

use crate::error::Error;
use crate::infer::{measure_latency, BudgetSpec, Engine};
use crate::model::{ModelConfig, TransformerTrunk};
use crate::scalar::Scalar;
use crate::Result;

/// Which structural axis a pruned configuration came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneAxis {
    Depth,
    Width,
}

impl PruneAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            PruneAxis::Depth => "depth",
            PruneAxis::Width => "width",
        }
    }
}

/// A pruned configuration and the non-embedding parameter ratio it
/// actually achieves against its parent.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedConfig {
    pub axis: PruneAxis,
    pub config: ModelConfig,
    pub achieved_ratio: f64,
}

fn check_ratio(ratio: f64, tol: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "parameter ratio must lie in (0, 1], got {ratio}"
        )));
    }
    if !(tol >= 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be >= 0, got {tol}")));
    }
    Ok(())
}

/// Keeps the prefix of layers whose non-embedding parameter count lands
/// closest to `ratio` of the parent's; ties prefer keeping more layers.
/// Errors when the closest achievable ratio misses by more than `tol`.
pub fn depth_prune(cfg: &ModelConfig, ratio: f64, tol: f64) -> Result<PrunedConfig> {
    check_ratio(ratio, tol)?;
    let full = cfg.count_params(false) as f64;
    let mut best: Option<(f64, usize)> = None;
    for n in 1..=cfg.n_layers {
        let achieved = (n * cfg.params_per_layer() + cfg.d_model) as f64 / full;
        let err = (achieved - ratio).abs();
        if best.map_or(true, |(e, bn)| err < e || (err == e && n > bn)) {
            best = Some((err, n));
        }
    }
    let (err, n) = best.expect("n_layers >= 1");
    if err > tol {
        return Err(Error::InfeasibleBudget {
            requested: format!("depth ratio {ratio} within {tol}"),
            available: format!("closest is {n} layers, off by {err:.4}"),
        });
    }
    let mut pruned = cfg.clone();
    pruned.n_layers = n;
    pruned.validate()?;
    let achieved = pruned.count_params(false) as f64 / full;
    Ok(PrunedConfig { axis: PruneAxis::Depth, config: pruned, achieved_ratio: achieved })
}

/// Shrinks every layer at fixed depth: for each head count, solves for
/// the MLP intermediate size that meets the target (clamped to the
/// d_model floor) and keeps the candidate closest to `ratio`, preferring
/// more heads on ties, so the MLP gives way before attention does.
/// Errors when even the narrowest shape misses by more than `tol`.
pub fn width_prune(cfg: &ModelConfig, ratio: f64, tol: f64) -> Result<PrunedConfig> {
    check_ratio(ratio, tol)?;
    let d = cfg.d_model;
    let full = cfg.count_params(false) as f64;
    let per_target = (ratio * full - d as f64) / cfg.n_layers as f64;
    let mut within: Option<(usize, usize)> = None;
    let mut closest = (f64::INFINITY, 0usize, 0usize);
    for heads in (1..=cfg.n_heads).rev() {
        let attn = 4 * d * heads * cfg.head_dim;
        let exact = (per_target - attn as f64 - 2.0 * d as f64) / (3.0 * d as f64);
        let d_ff = (exact.round() as i64).clamp(d as i64, cfg.d_ff as i64) as usize;
        let per = attn + 3 * d * d_ff + 2 * d;
        let achieved = (cfg.n_layers * per + d) as f64 / full;
        let err = (achieved - ratio).abs();
        if err <= tol {
            within = Some((heads, d_ff));
            break;
        }
        if err < closest.0 {
            closest = (err, heads, d_ff);
        }
    }
    let Some((heads, d_ff)) = within else {
        let (err, heads, d_ff) = closest;
        return Err(Error::InfeasibleBudget {
            requested: format!("width ratio {ratio} within {tol}"),
            available: format!("closest is {heads} heads, d_ff {d_ff}, off by {err:.4}"),
        });
    };
    let mut pruned = cfg.clone();
    pruned.n_heads = heads;
    pruned.d_ff = d_ff;
    pruned.validate()?;
    let achieved = pruned.count_params(false) as f64 / full;
    Ok(PrunedConfig { axis: PruneAxis::Width, config: pruned, achieved_ratio: achieved })
}

/// One decode-latency measurement in a pruning sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis: String,
    pub target_ratio: f64,
    pub achieved_ratio: f64,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub nonembed_params: usize,
    pub median_ms_per_token: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn csv(&self) -> String {
        let mut out = String::from(
            "axis,target_ratio,achieved_ratio,n_layers,n_heads,d_ff,nonembed_params,median_ms_per_token,speedup\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.axis,
                r.target_ratio,
                r.achieved_ratio,
                r.n_layers,
                r.n_heads,
                r.d_ff,
                r.nonembed_params,
                r.median_ms_per_token,
                r.speedup
            ));
        }
        out
    }

    /// The row for one axis and target ratio, if measured.
    pub fn row(&self, axis: PruneAxis, target_ratio: f64) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.axis == axis.as_str() && r.target_ratio == target_ratio)
    }
}

fn measure_decode<S: Scalar>(
    cfg: &ModelConfig,
    seed: u64,
    prompt: &[u32],
    gen_tokens: usize,
    warmup: usize,
    repeats: usize,
) -> Result<(usize, f64)> {
    let trunk = TransformerTrunk::<S>::random(cfg.clone(), seed)?;
    let engine = Engine::new(trunk, Vec::new())?;
    let row = measure_latency(&engine, BudgetSpec::Full, prompt, gen_tokens, warmup, repeats)?;
    Ok((row.nonembed_params, row.median_ms_per_token))
}

/// Decode latency of depth- and width-pruned variants at each target
/// ratio against the unpruned baseline (the `base` axis row, speedup 1).
/// Weights are freshly seeded per shape; latency does not depend on
/// their values. Ratios must be matchable within `tol` on both axes.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep<S: Scalar>(
    cfg: &ModelConfig,
    ratios: &[f64],
    tol: f64,
    seed: u64,
    prompt: &[u32],
    gen_tokens: usize,
    warmup: usize,
    repeats: usize,
) -> Result<SweepReport> {
    let mut report = SweepReport::default();
    let (base_params, base_ms) =
        measure_decode::<S>(cfg, seed, prompt, gen_tokens, warmup, repeats)?;
    report.rows.push(SweepRow {
        axis: "base".into(),
        target_ratio: 1.0,
        achieved_ratio: 1.0,
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
        d_ff: cfg.d_ff,
        nonembed_params: base_params,
        median_ms_per_token: base_ms,
        speedup: 1.0,
    });
    for &ratio in ratios {
        for pruned in [depth_prune(cfg, ratio, tol)?, width_prune(cfg, ratio, tol)?] {
            let (params, ms) =
                measure_decode::<S>(&pruned.config, seed, prompt, gen_tokens, warmup, repeats)?;
            report.rows.push(SweepRow {
                axis: pruned.axis.as_str().into(),
                target_ratio: ratio,
                achieved_ratio: pruned.achieved_ratio,
                n_layers: pruned.config.n_layers,
                n_heads: pruned.config.n_heads,
                d_ff: pruned.config.d_ff,
                nonembed_params: params,
                median_ms_per_token: ms,
                speedup: base_ms / ms,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_prune_hits_exact_layer_fractions() {
        let cfg = ModelConfig::toy();
        for (ratio, want_layers) in [(1.0, 8), (0.75, 6), (0.5, 4), (0.25, 2)] {
            let p = depth_prune(&cfg, ratio, 0.02).unwrap();
            assert_eq!(p.config.n_layers, want_layers, "ratio {ratio}");
            assert!((p.achieved_ratio - ratio).abs() < 0.02);
            assert_eq!(p.config.d_ff, cfg.d_ff);
        }
    }

    #[test]
    fn width_prune_shrinks_mlp_before_heads() {
        let cfg = ModelConfig::toy();
        let p75 = width_prune(&cfg, 0.75, 0.02).unwrap();
        assert_eq!(p75.config.n_heads, cfg.n_heads, "mild ratio keeps all heads");
        assert!(p75.config.d_ff < cfg.d_ff);
        let p50 = width_prune(&cfg, 0.5, 0.02).unwrap();
        assert_eq!(p50.config.n_heads, cfg.n_heads);
        assert!(p50.config.d_ff < p75.config.d_ff);
        let p25 = width_prune(&cfg, 0.25, 0.02).unwrap();
        assert!(p25.config.n_heads < cfg.n_heads, "deep cut must drop heads");
        assert_eq!(p25.config.d_ff, cfg.d_model, "MLP pinned at its floor first");
        assert_eq!(p25.config.head_dim, cfg.head_dim);
        for (p, ratio) in [(&p75, 0.75), (&p50, 0.5), (&p25, 0.25)] {
            assert!((p.achieved_ratio - ratio).abs() < 0.02);
            assert_eq!(p.config.n_layers, cfg.n_layers);
            p.config.validate().unwrap();
        }
    }

    #[test]
    fn unreachable_ratio_is_infeasible() {
        let cfg = ModelConfig::toy();
        assert!(matches!(
            width_prune(&cfg, 0.05, 0.02),
            Err(Error::InfeasibleBudget { .. })
        ));
        assert!(matches!(
            depth_prune(&cfg, 0.3, 0.001),
            Err(Error::InfeasibleBudget { .. })
        ));
        assert!(depth_prune(&cfg, 1.5, 0.02).is_err());
    }

    #[test]
    fn pruned_counts_match_enumeration() {
        let cfg = ModelConfig::toy();
        let p = width_prune(&cfg, 0.5, 0.02).unwrap();
        let trunk = TransformerTrunk::<f32>::random(p.config.clone(), 1).unwrap();
        let mut enumerated = 0usize;
        trunk.visit(&mut |name, t| {
            if name != "token_embedding" && name != "lm_head" {
                enumerated += t.numel();
            }
        });
        assert_eq!(enumerated, p.config.count_params(false));
    }

    #[test]
    fn sweep_reports_both_axes_per_ratio() {
        let cfg = ModelConfig::new(4, 16, 2, 32, 32, 32, 10000.0).unwrap();
        let prompt: Vec<u32> = (0..4).collect();
        let report = run_sweep::<f32>(&cfg, &[0.5], 0.1, 7, &prompt, 4, 0, 2).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.rows[0].axis, "base");
        assert_eq!(report.rows[0].speedup, 1.0);
        assert!(report.row(PruneAxis::Depth, 0.5).is_some());
        assert!(report.row(PruneAxis::Width, 0.5).is_some());
        assert!(report.rows.iter().all(|r| r.median_ms_per_token > 0.0 && r.speedup > 0.0));
        let csv = report.csv();
        assert!(csv.starts_with("axis,target_ratio,"));
        assert_eq!(csv.lines().count(), 4);
    }
}
