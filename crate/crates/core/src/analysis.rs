//! Closed-form attack and energy models.

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum AnalysisError {
    #[error("adversary hashpower must be positive")]
    ZeroAdversaryPower,
    #[error("honest hashpower must be positive")]
    ZeroHonestPower,
    #[error("parameters must be finite and non-negative")]
    OutOfDomain,
}

/// Probability that an adversary mines `b` consecutive replacement blocks
/// when honest miners cover half the nonce space: `(1/2)^b`.
///
/// Powers of two are exact in `f64` down to `2^-1074`.
pub fn fork_success_prob(b: u32) -> f64 {
    fork_success_prob_with_base(b, 0.5)
}

/// `base^b` by repeated squaring. `base` is the adversary's per-block chance;
/// anything other than 1/2 extrapolates beyond the half-coverage premise.
pub fn fork_success_prob_with_base(b: u32, base: f64) -> f64 {
    let mut result = 1.0;
    let mut sq = base;
    let mut e = b;
    while e > 0 {
        if e & 1 == 1 {
            result *= sq;
        }
        sq *= sq;
        e >>= 1;
    }
    result
}

/// Months an adversary with hashpower `m` needs to rebuild an `alpha`-month
/// chain grown with honest hashpower `h`: `alpha * h / m`.
pub fn rebuild_time(alpha: f64, m: f64, h: f64) -> Result<f64, AnalysisError> {
    if !(alpha.is_finite() && m.is_finite() && h.is_finite()) || alpha < 0.0 || m < 0.0 || h < 0.0 {
        return Err(AnalysisError::OutOfDomain);
    }
    if m == 0.0 {
        return Err(AnalysisError::ZeroAdversaryPower);
    }
    if h == 0.0 {
        return Err(AnalysisError::ZeroHonestPower);
    }
    Ok(alpha * h / m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cost {
    pub resources: f64,
    pub time: f64,
    pub energy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyReport {
    pub pow: Cost,
    pub poc: Cost,
}

/// Competitive versus collaborative mining for `n` miners with `e` resources
/// each and solo solve time `tau`.
///
/// PoW energy is computed as `n * (e * tau)` so that `poc.energy * n` equals
/// it bit for bit.
pub fn energy_model(n: u32, e: f64, tau: f64) -> Result<EnergyReport, AnalysisError> {
    if n == 0 || !(e.is_finite() && tau.is_finite()) || e <= 0.0 || tau <= 0.0 {
        return Err(AnalysisError::OutOfDomain);
    }
    let nf = n as f64;
    let unit = e * tau;
    Ok(EnergyReport {
        pow: Cost { resources: nf * e, time: tau, energy: nf * unit },
        poc: Cost { resources: nf * e, time: tau / nf, energy: unit },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fork_probabilities() {
        assert_eq!(fork_success_prob(0), 1.0);
        assert_eq!(fork_success_prob(1), 0.5);
        assert_eq!(fork_success_prob(7), 0.0078125);
        assert_eq!(fork_success_prob_with_base(3, 0.25), 0.015625);
    }

    #[test]
    fn rebuild_examples() {
        assert_eq!(rebuild_time(12.0, 1.0, 2.0), Ok(24.0));
        assert_eq!(rebuild_time(5.0, 3.0, 3.0), Ok(5.0));
        assert_eq!(rebuild_time(0.0, 1.0, 2.0), Ok(0.0));
        assert_eq!(rebuild_time(12.0, 0.0, 2.0), Err(AnalysisError::ZeroAdversaryPower));
        assert_eq!(rebuild_time(-1.0, 1.0, 2.0), Err(AnalysisError::OutOfDomain));
    }

    #[test]
    fn energy_examples() {
        let one = energy_model(1, 3.0, 5.0).unwrap();
        assert_eq!(one.pow, one.poc);
        let r = energy_model(4, 1.0, 8.0).unwrap();
        assert_eq!((r.pow.energy, r.poc.energy, r.poc.time), (32.0, 8.0, 2.0));
        assert_eq!(energy_model(9, 1.5, 8.0).unwrap().poc.energy, energy_model(2, 1.5, 8.0).unwrap().poc.energy);
        assert!(energy_model(0, 1.0, 1.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn multiplicative_and_decreasing(a in 0u32..500, b in 0u32..500) {
                prop_assert_eq!(fork_success_prob(a + b), fork_success_prob(a) * fork_success_prob(b));
                prop_assert!(fork_success_prob(a + 1) < fork_success_prob(a));
            }

            #[test]
            fn rebuild_is_linear(alpha in 0.0f64..1e6, k in 1u32..100, m in 1e-3f64..1e3, h in 1e-3f64..1e3) {
                let base = rebuild_time(alpha, m, h).unwrap();
                let scaled = rebuild_time(alpha * k as f64, m, h).unwrap();
                prop_assert!((scaled - base * k as f64).abs() <= 1e-9 * scaled.abs().max(1.0));
                let faster = rebuild_time(alpha, m * 2.0, h).unwrap();
                prop_assert!((faster * 2.0 - base).abs() <= 1e-9 * base.abs().max(1.0));
            }

            #[test]
            fn poc_energy_times_n_is_pow(n in 1u32..=128, e in 1e-6f64..1e6, tau in 1e-6f64..1e6) {
                let r = energy_model(n, e, tau).unwrap();
                prop_assert_eq!(r.poc.energy * n as f64, r.pow.energy);
            }
        }
    }
}
