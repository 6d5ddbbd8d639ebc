//! Property tests for the structural invariants the library promises:
//! probability kernels behave like probabilities, divergences are
//! non-negative and vanish at equality, attention is causal, checkpoints
//! round-trip bitwise, and schedules stay inside their envelope.

use balcony_core::ckpt::{load_bundle, save_bundle};
use balcony_core::exits::{
    attach_balconies, make_submodel, submodel_forward, BodyVariant, ExitPointSet, InitMode,
    Selection,
};
use balcony_core::kernels::softmax_row;
use balcony_core::model::{ModelConfig, TransformerTrunk};
use balcony_core::prune::{depth_prune, width_prune};
use balcony_core::scalar::Scalar;
use balcony_core::tape::Tape;
use balcony_core::tensor::TokenBatch;
use balcony_core::train::{lr_at, Schedule};
use proptest::prelude::*;

fn finite_logit() -> impl Strategy<Value = f32> {
    // Wide enough to stress the max-shift, tame enough to stay finite.
    -30.0f32..30.0f32
}

fn tiny_cfg() -> ModelConfig {
    ModelConfig::new(3, 16, 2, 32, 32, 16, 10000.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(mut row in prop::collection::vec(finite_logit(), 1..24)) {
        softmax_row(&mut row);
        let sum: f64 = row.iter().map(|&p| p as f64).sum();
        prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)), "probs in [0,1]: {row:?}");
        prop_assert!((sum - 1.0).abs() < 1e-5, "sum {sum}");
    }

    #[test]
    fn kl_is_nonnegative_and_zero_at_equality(
        t in prop::collection::vec(finite_logit(), 8),
        s in prop::collection::vec(finite_logit(), 8),
    ) {
        let mut tape = Tape::<f64>::new();
        let t64: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        let s64: Vec<f64> = s.iter().map(|&v| v as f64).collect();
        let teacher = tape.constant(vec![1, 8], t64.clone()).unwrap();
        let student = tape.constant(vec![1, 8], s64).unwrap();
        let kl = tape.kl_divergence(teacher, student).unwrap();
        prop_assert!(tape.value(kl)[0] >= -1e-12, "kl {}", tape.value(kl)[0]);

        let mut tape = Tape::<f64>::new();
        let teacher = tape.constant(vec![1, 8], t64.clone()).unwrap();
        let same = tape.constant(vec![1, 8], t64).unwrap();
        let kl = tape.kl_divergence(teacher, same).unwrap();
        prop_assert!(tape.value(kl)[0].abs() < 1e-12, "kl at equality {}", tape.value(kl)[0]);
    }

    #[test]
    fn decoding_is_causal(
        seed in 0u64..1000,
        flip_pos in 3usize..8,
        new_tok in 0u32..32,
    ) {
        let cfg = tiny_cfg();
        let trunk = TransformerTrunk::<f32>::random(cfg.clone(), seed).unwrap();
        let exits = ExitPointSet::new(vec![1], cfg.n_layers).unwrap();
        let modules =
            attach_balconies(&trunk, &exits, InitMode::FromLastLayer, BodyVariant::Full).unwrap();
        let seq = 8;
        let base: Vec<u32> = (0..seq as u32).map(|i| (i * 7 + seed as u32) % 32).collect();
        let mut edited = base.clone();
        edited[flip_pos] = new_tok;
        for sel in [Selection::Exit(1), Selection::Full] {
            let a = submodel_forward(&trunk, &modules, sel, &TokenBatch::new(base.clone(), 1, seq).unwrap()).unwrap();
            let b = submodel_forward(&trunk, &modules, sel, &TokenBatch::new(edited.clone(), 1, seq).unwrap()).unwrap();
            let v = cfg.vocab_size;
            for pos in 0..flip_pos {
                let (ra, rb) = (&a[pos * v..(pos + 1) * v], &b[pos * v..(pos + 1) * v]);
                prop_assert!(
                    ra.iter().zip(rb).all(|(x, y)| x.bits() == y.bits()),
                    "{sel}: logits at position {pos} moved when token {flip_pos} changed"
                );
            }
        }
    }

    #[test]
    fn bundle_checkpoints_round_trip_bitwise(seed in 0u64..1000, init_seed in 0u64..1000) {
        let cfg = tiny_cfg();
        let trunk = TransformerTrunk::<f32>::random(cfg.clone(), seed).unwrap();
        let exits = ExitPointSet::new(vec![0, 2], cfg.n_layers).unwrap();
        let modules = attach_balconies(
            &trunk,
            &exits,
            InitMode::Random { seed: init_seed },
            BodyVariant::Full,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle.blcn");
        save_bundle(&path, &trunk, &modules).unwrap();
        let (t2, m2) = load_bundle::<f32>(&path).unwrap();
        let mut ok = true;
        let mut collected: Vec<(String, Vec<u64>)> = Vec::new();
        trunk.visit(&mut |n, t| {
            collected.push((n.to_string(), t.data().iter().map(|v| v.bits()).collect()));
        });
        let mut i = 0;
        t2.visit(&mut |n, t| {
            ok &= collected[i].0 == n
                && collected[i].1.iter().copied().eq(t.data().iter().map(|v| v.bits()));
            i += 1;
        });
        prop_assert!(ok && i == collected.len(), "trunk weights moved in transit");
        for (a, b) in modules.iter().zip(&m2) {
            let mut va: Vec<(String, Vec<u64>)> = Vec::new();
            a.visit("m", &mut |n, t| {
                va.push((n.to_string(), t.data().iter().map(|v| v.bits()).collect()));
            });
            let mut j = 0;
            let mut same = true;
            b.visit("m", &mut |n, t| {
                same &= va[j].0 == n
                    && va[j].1.iter().copied().eq(t.data().iter().map(|v| v.bits()));
                j += 1;
            });
            prop_assert!(same && j == va.len(), "module weights moved in transit");
        }
    }

    #[test]
    fn schedules_stay_in_envelope(step in 0usize..=200, lr_max in 1e-6f64..1.0) {
        let total = 200;
        for schedule in [Schedule::Cosine, Schedule::Trapezoid] {
            let lr = lr_at(schedule, step, total, lr_max).unwrap();
            prop_assert!(lr >= 0.0 && lr <= lr_max + 1e-12, "{schedule:?} lr {lr} at {step}");
        }
        // Cosine is non-increasing.
        if step > 0 {
            let a = lr_at(Schedule::Cosine, step - 1, total, lr_max).unwrap();
            let b = lr_at(Schedule::Cosine, step, total, lr_max).unwrap();
            prop_assert!(b <= a + 1e-15);
        }
    }

    #[test]
    fn submodel_param_counts_match_enumeration(j in 0usize..3) {
        let cfg = tiny_cfg();
        let trunk = TransformerTrunk::<f32>::random(cfg.clone(), 5).unwrap();
        let exits = ExitPointSet::new(vec![j], cfg.n_layers).unwrap();
        let modules =
            attach_balconies(&trunk, &exits, InitMode::FromLastLayer, BodyVariant::Full).unwrap();
        let handle = make_submodel(&trunk, &modules, Selection::Exit(j)).unwrap();
        let mut expected = 0usize;
        trunk.visit(&mut |n, t| {
            if n == "token_embedding" || n == "lm_head" || n == "final_norm" {
                return;
            }
            let layer: usize = n.split('.').nth(1).unwrap().parse().unwrap();
            if layer < j {
                expected += t.numel();
            }
        });
        expected += modules[0].param_count();
        prop_assert_eq!(handle.nonembed_param_count, expected);
    }

    #[test]
    fn pruned_configs_hit_their_ratio(ratio in 0.2f64..1.0) {
        let cfg = ModelConfig::new(8, 128, 4, 512, 256, 256, 10000.0).unwrap();
        let tol = 0.08;
        if let Ok(p) = depth_prune(&cfg, ratio, tol) {
            prop_assert!((p.achieved_ratio - ratio).abs() <= tol);
            prop_assert!(p.config.validate().is_ok());
        }
        if let Ok(p) = width_prune(&cfg, ratio, tol) {
            prop_assert!((p.achieved_ratio - ratio).abs() <= tol);
            prop_assert!(p.config.validate().is_ok());
        }
    }
}
