//! Masked cross-entropy over valid tokens, optionally weighted per token.

use super::layers::{log_softmax, softmax};
use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::sim::control::N_ACTIONS;

/// Floor applied to probabilities inside the log.
pub const LOG_FLOOR: f64 = 1e-12;

/// Softmax probabilities for `M` rows of logits.
pub fn probabilities<T: Scalar>(logits: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (l, o) in logits.chunks_exact(N_ACTIONS).zip(out.chunks_exact_mut(N_ACTIONS)) {
        softmax(l, o);
    }
    out
}

/// Shannon entropy in nats; `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Entropy of the softmax of each row of logits.
pub fn entropies<T: Scalar>(logits: &[T]) -> Vec<f64> {
    let mut lp = [T::zero(); N_ACTIONS];
    logits
        .chunks_exact(N_ACTIONS)
        .map(|row| {
            log_softmax(row, &mut lp);
            let h = -lp.iter().map(|&v| v.f64().exp() * v.f64()).filter(|v| v.is_finite()).sum::<f64>();
            h.max(0.0)
        })
        .collect()
}

/// `-(1/M) Σ w_t log p_t(a_t)` and its gradient w.r.t. the logits.
/// `weights = None` means every weight is one.
pub fn weighted_nll<T: Scalar>(logits: &[T], targets: &[u8], weights: Option<&[T]>) -> Result<(f64, Vec<T>)> {
    let m = targets.len();
    if m == 0 {
        return Err(Error::invalid("loss over an empty set of valid tokens"));
    }
    if logits.len() != m * N_ACTIONS {
        return Err(Error::invalid(format!(
            "{} logits for {m} targets",
            logits.len()
        )));
    }
    if let Some(w) = weights {
        if w.len() != m {
            return Err(Error::invalid(format!("{} weights for {m} targets", w.len())));
        }
    }
    let floor = T::c(LOG_FLOOR.ln());
    let inv_m = T::c(1.0 / m as f64);
    let mut lp = [T::zero(); N_ACTIONS];
    let mut total = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for (i, (&a, row)) in targets.iter().zip(logits.chunks_exact(N_ACTIONS)).enumerate() {
        let a = a as usize;
        if a >= N_ACTIONS {
            return Err(Error::invalid(format!("target action {a} out of range")));
        }
        log_softmax(row, &mut lp);
        let w = weights.map_or(T::one(), |w| w[i]);
        let clamped = lp[a] < floor;
        // NaN must survive so divergence is detected
        total += w * if clamped { floor } else { lp[a] };
        if !clamped {
            let g = &mut grad[i * N_ACTIONS..(i + 1) * N_ACTIONS];
            for (j, gj) in g.iter_mut().enumerate() {
                let ind = if j == a { T::one() } else { T::zero() };
                *gj = w * inv_m * (lp[j].exp() - ind);
            }
        }
    }
    Ok(((-total * inv_m).f64(), grad))
}

pub fn nll_loss<T: Scalar>(logits: &[T], targets: &[u8]) -> Result<f64> {
    weighted_nll(logits, targets, None).map(|r| r.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits() {
        let l = vec![0.3f64; 15];
        let v = nll_loss(&l, &[0, 2, 4]).unwrap();
        assert!((v - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_target() {
        // p(target) = 0.99 with the rest spread evenly
        let rest = (0.01f64 / 4.0).ln();
        let l = [0.99f64.ln(), rest, rest, rest, rest];
        let v = nll_loss(&l, &[0]).unwrap();
        assert!((v - 0.010_050_335_853_501_4).abs() < 1e-12);
    }

    #[test]
    fn hand_weighted_batch() {
        let l = [0.5f64.ln(), 0.5f64.ln(), f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY,
            0.25f64.ln(), 0.25f64.ln(), 0.25f64.ln(), 0.25f64.ln(), f64::NEG_INFINITY];
        let (v, _) = weighted_nll(&l, &[0, 3], Some(&[1.5, 0.5])).unwrap();
        let expect = -0.5 * (1.5 * 0.5f64.ln() + 0.5 * 0.25f64.ln());
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 0.86643).abs() < 1e-5);
    }

    #[test]
    fn ones_and_linearity() {
        let l: Vec<f64> = (0..20).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let t = [1, 4, 0, 2];
        let base = nll_loss(&l, &t).unwrap();
        let (ones, _) = weighted_nll(&l, &t, Some(&[1.0; 4])).unwrap();
        assert_eq!(base, ones);
        let (twice, _) = weighted_nll(&l, &t, Some(&[2.0; 4])).unwrap();
        assert!((twice - 2.0 * base).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_differences() {
        let l: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).sin()).collect();
        let t = [3, 1];
        let w = [1.3, 0.4];
        let (_, g) = weighted_nll(&l, &t, Some(&w)).unwrap();
        for i in 0..l.len() {
            let mut a = l.clone();
            let mut b = l.clone();
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let fa = weighted_nll(&a, &t, Some(&w)).unwrap().0;
            let fb = weighted_nll(&b, &t, Some(&w)).unwrap().0;
            assert!(((fa - fb) / 2e-6 - g[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn errors() {
        assert!(nll_loss::<f64>(&[], &[]).is_err());
        assert!(nll_loss(&[0.0f64; 5], &[5]).is_err());
        assert!(weighted_nll(&[0.0f64; 10], &[0, 1], Some(&[1.0])).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[0.2; 5]) - 5f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[1.0, 0.0, 0.0, 0.0, 0.0]), 0.0);
        assert!((entropy(&[0.5, 0.5, 0.0, 0.0, 0.0]) - 2f64.ln()).abs() < 1e-12);
        let h = entropies(&[0.0f32; 5]);
        assert!((h[0] - 5f64.ln()).abs() < 1e-6);
        let h = entropies(&[1e4f32, 0.0, 0.0, 0.0, 0.0]);
        assert!(h[0] >= 0.0 && h[0] < 1e-9);
    }
}
