//! Evaluation metrics computed off-tape in f64.
//!
//! These are measurement helpers for held-out reporting; they share no
//! bitwise contract with the tape losses, so they use log-softmax directly
//! for numerical comfort.

use crate::scalar::Scalar;

/// Per-row log partition: returns (max, ln sum exp(x - max)).
fn log_z<S: Scalar>(row: &[S]) -> (f64, f64) {
    let mut m = f64::NEG_INFINITY;
    for &v in row {
        m = m.max(v.as_f64());
    }
    let mut s = 0.0;
    for &v in row {
        s += (v.as_f64() - m).exp();
    }
    (m, s.ln())
}

/// Mean over rows of KL(teacher || student), both given as logits over
/// `vocab` columns. Sum over the vocabulary, never negative up to rounding.
pub fn mean_kl_rows<S: Scalar>(teacher: &[S], student: &[S], vocab: usize) -> f64 {
    debug_assert_eq!(teacher.len(), student.len());
    let rows = teacher.len() / vocab;
    let mut total = 0.0;
    for r in 0..rows {
        let t = &teacher[r * vocab..(r + 1) * vocab];
        let s = &student[r * vocab..(r + 1) * vocab];
        let (tm, tz) = log_z(t);
        let (sm, sz) = log_z(s);
        let mut row = 0.0;
        for i in 0..vocab {
            let lt = t[i].as_f64() - tm - tz;
            let ls = s[i].as_f64() - sm - sz;
            row += lt.exp() * (lt - ls);
        }
        total += row.max(0.0);
    }
    total / rows.max(1) as f64
}

/// Mean next-token cross-entropy over rows, logits vs target ids.
pub fn mean_ce_rows<S: Scalar>(logits: &[S], targets: &[u32], vocab: usize) -> f64 {
    let rows = logits.len() / vocab;
    debug_assert_eq!(rows, targets.len());
    let mut total = 0.0;
    for (r, &tgt) in targets.iter().enumerate() {
        let row = &logits[r * vocab..(r + 1) * vocab];
        let (m, z) = log_z(row);
        total += (m + z) - row[tgt as usize].as_f64();
    }
    total / rows.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_of_identical_logits_is_zero() {
        let x = vec![0.3f32, -1.2, 2.0, 0.0];
        assert_eq!(mean_kl_rows(&x, &x, 4), 0.0);
    }

    #[test]
    fn kl_hand_value() {
        // Teacher uniform over 2, student [3/4, 1/4]:
        // KL = 0.5 ln(0.5/0.75) + 0.5 ln(0.5/0.25) = ln2 - 0.5 ln3.
        let teacher = vec![0.0f64, 0.0];
        let student = vec![3.0f64.ln(), 0.0];
        let want = 2.0f64.ln() - 0.5 * 3.0f64.ln();
        assert!((mean_kl_rows(&teacher, &student, 2) - want).abs() < 1e-12);
    }

    #[test]
    fn ce_of_uniform_logits_is_log_vocab() {
        let logits = vec![0.0f32; 8];
        let got = mean_ce_rows(&logits, &[3], 8);
        assert!((got - 8.0f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn ce_prefers_the_target() {
        let mut logits = vec![0.0f32; 8];
        logits[3] = 5.0;
        assert!(mean_ce_rows(&logits, &[3], 8) < mean_ce_rows(&logits, &[4], 8));
    }
}
