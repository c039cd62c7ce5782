//! Closed-form worst-case expectation gap for strongly convex objectives
//! trained with stale federated updates.

use super::LearnError;

/// Inputs to the bound, in the notation of the formula: smoothness `l`,
/// strong convexity `mu`, local steps `q`, step size `eta`, rounds `t`,
/// local and global noise scales, gradient-norm bound `c`, worst staleness
/// `tau_max`, and the initial optimality gap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceBoundParams {
    pub l: f64,
    pub mu: f64,
    pub q: u32,
    pub eta: f64,
    pub t: u32,
    pub sigma_l: f64,
    pub sigma_g: f64,
    pub c: f64,
    pub tau_max: u32,
    pub initial_gap: f64,
}

/// Evaluates
/// `(1 - mu*q*eta)^t * initial_gap
///  + (3*l*q*eta/mu) * (sigma_l^2 + sigma_g^2 + c) * (eta*q*l*(tau_max^2 + 1) + 1/2)`.
///
/// Requires `0 < mu*q*eta < 1`; the decay factor must contract.
pub fn convergence_bound(p: &ConvergenceBoundParams) -> Result<f64, LearnError> {
    for (name, v) in [
        ("l", p.l),
        ("mu", p.mu),
        ("eta", p.eta),
        ("sigma_l", p.sigma_l),
        ("sigma_g", p.sigma_g),
        ("c", p.c),
        ("initial_gap", p.initial_gap),
    ] {
        if !v.is_finite() || v < 0.0 {
            return Err(LearnError::Config(format!(
                "bound parameter {name} = {v} must be finite and non-negative"
            )));
        }
    }
    if p.mu > p.l {
        return Err(LearnError::Config(format!(
            "strong convexity mu = {} exceeds smoothness l = {}",
            p.mu, p.l
        )));
    }
    if p.q == 0 {
        return Err(LearnError::Config("q must be >= 1".into()));
    }
    let rho = p.mu * p.q as f64 * p.eta;
    if !(rho > 0.0 && rho < 1.0) {
        return Err(LearnError::Domain(rho));
    }
    let tau = p.tau_max as f64;
    let decay = (1.0 - rho).powi(p.t as i32) * p.initial_gap;
    let noise = p.sigma_l * p.sigma_l + p.sigma_g * p.sigma_g + p.c;
    let floor_scale = p.eta * p.q as f64 * p.l * (tau * tau + 1.0) + 0.5;
    let lead = 3.0 * p.l * p.q as f64 * p.eta / p.mu;
    Ok(decay + lead * noise * floor_scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ConvergenceBoundParams {
        ConvergenceBoundParams {
            l: 4.0,
            mu: 1.0,
            q: 2,
            eta: 0.1,
            t: 10,
            sigma_l: 0.5,
            sigma_g: 0.3,
            c: 1.0,
            tau_max: 3,
            initial_gap: 2.0,
        }
    }

    /// Same formula assembled in a different order, used as an oracle.
    fn oracle(p: &ConvergenceBoundParams) -> f64 {
        let q = p.q as f64;
        let tau = p.tau_max as f64;
        let geometric = p.initial_gap * (1.0 - p.mu * q * p.eta).powf(p.t as f64);
        let variance = p.sigma_l.powi(2) + p.sigma_g.powi(2) + p.c;
        let inner = 0.5 + p.l * p.eta * q * (1.0 + tau * tau);
        geometric + (3.0 / p.mu) * p.l * q * p.eta * variance * inner
    }

    #[test]
    fn matches_independent_rearrangement_on_a_grid() {
        for l in [1.0, 4.0, 10.0] {
            for q in [1u32, 3, 8] {
                for eta in [0.01, 0.05] {
                    for tau_max in [0u32, 2, 9] {
                        for t in [0u32, 5, 50] {
                            let p = ConvergenceBoundParams {
                                l,
                                mu: 0.5,
                                q,
                                eta,
                                t,
                                sigma_l: 0.4,
                                sigma_g: 0.2,
                                c: 0.7,
                                tau_max,
                                initial_gap: 3.0,
                            };
                            let got = convergence_bound(&p).unwrap();
                            let want = oracle(&p);
                            assert!(
                                (got - want).abs() <= 1e-12 * want.abs().max(1.0),
                                "{p:?}: {got} vs {want}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_noise_reduces_to_pure_geometric_decay() {
        let mut p = base();
        p.sigma_l = 0.0;
        p.sigma_g = 0.0;
        p.c = 0.0;
        // rho = 1 * 2 * 0.1 = 0.2, so the bound is 2 * 0.8^10 exactly.
        let got = convergence_bound(&p).unwrap();
        assert_eq!(got, 2.0 * 0.8f64.powi(10));
    }

    #[test]
    fn more_rounds_never_raise_the_bound() {
        let mut p = base();
        let mut prev = f64::INFINITY;
        for t in [0, 1, 2, 5, 10, 100, 1000] {
            p.t = t;
            let b = convergence_bound(&p).unwrap();
            assert!(b <= prev, "t {t}: {b} > {prev}");
            prev = b;
        }
    }

    #[test]
    fn staleness_scales_the_noise_floor_quadratically() {
        // With zero initial gap only the floor term remains; the ratio of
        // tau_max = 5 to tau_max = 0 floors is (eta*q*l*26 + 0.5) over
        // (eta*q*l*1 + 0.5).
        let mut p = base();
        p.initial_gap = 0.0;
        p.tau_max = 0;
        let floor0 = convergence_bound(&p).unwrap();
        p.tau_max = 5;
        let floor5 = convergence_bound(&p).unwrap();
        let eql = p.eta * p.q as f64 * p.l;
        let expected = (eql * 26.0 + 0.5) / (eql + 0.5);
        assert!((floor5 / floor0 - expected).abs() < 1e-12);
        assert!(floor5 > floor0);
    }

    #[test]
    fn domain_violations_are_rejected() {
        let mut p = base();
        p.eta = 0.5; // rho = 1.0
        assert!(matches!(
            convergence_bound(&p),
            Err(LearnError::Domain(r)) if r == 1.0
        ));
        p.eta = 0.6; // rho > 1
        assert!(matches!(convergence_bound(&p), Err(LearnError::Domain(_))));
        p.eta = 0.0; // rho = 0
        assert!(matches!(convergence_bound(&p), Err(LearnError::Domain(_))));
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let mut p = base();
        p.mu = 5.0; // exceeds l = 4
        assert!(matches!(convergence_bound(&p), Err(LearnError::Config(_))));
        let mut p = base();
        p.q = 0;
        assert!(matches!(convergence_bound(&p), Err(LearnError::Config(_))));
        let mut p = base();
        p.sigma_l = -1.0;
        assert!(matches!(convergence_bound(&p), Err(LearnError::Config(_))));
        let mut p = base();
        p.l = f64::NAN;
        assert!(matches!(convergence_bound(&p), Err(LearnError::Config(_))));
    }
}
