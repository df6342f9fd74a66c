//! Malthusian parameter and the derived model constants.
//!
//! The growth exponent alpha solves m(alpha) = 1 on the strictly decreasing
//! finite branch of the transform. Bracketing plus bisection is used rather
//! than a derivative method because m may be +inf on part of the domain and
//! bisection converges unconditionally on the monotone finite branch. The
//! bisection runs down to adjacent floats and then picks the representable
//! point with the smallest residual |m(alpha) - 1|, so the returned root is
//! the best the format can express (degenerate lattice laws rely on this:
//! their frontier weights then come out exact).

use crate::reproduction::{LawError, ReproductionLaw, SIGMA2_ZERO_TOL};

/// Default relative tolerance; error amplification through e^{alpha t} over
/// the horizons used here stays below 1e-10 at this setting.
pub const DEFAULT_TOL: f64 = 1e-12;

/// How a constant was obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Provenance {
    ClosedForm,
    /// Numerical evaluation (root bracketing, fixed-point iteration,
    /// quadrature) of closed-form ingredients.
    Quadrature,
    MonteCarlo { se: f64 },
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::ClosedForm => write!(f, "closed-form"),
            Provenance::Quadrature => write!(f, "quadrature"),
            Provenance::MonteCarlo { se } => write!(f, "monte-carlo(se={se})"),
        }
    }
}

/// All analytic constants of a law at its Malthusian point.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConstants {
    /// Growth exponent, m(alpha) = 1.
    pub alpha: f64,
    /// m'(alpha) < 0.
    pub m_prime_alpha: f64,
    /// m(2 alpha), in (0, 1) for laws accepted here.
    pub m_two_alpha: f64,
    /// Variance of the discounted litter weight at alpha.
    pub sigma2: f64,
    /// Limit variance of the frontier martingale: sigma2 / (1 - m(2 alpha)).
    pub sigma_w2: f64,
    /// Large-lag increment variance constant: sigma2 / (-alpha m'(alpha)).
    pub c_inf: f64,
    /// Mean litter size (+inf allowed).
    pub mean_offspring: f64,
    /// Extinction probability, the smallest fixed point of the litter pgf.
    pub extinction_q: f64,
}

impl ModelConstants {
    /// Field-by-field provenance. Every moment in the catalog has a closed
    /// form; alpha and q come from numerical iteration on closed forms.
    pub fn provenance() -> [(&'static str, Provenance); 8] {
        [
            ("alpha", Provenance::Quadrature),
            ("m_prime_alpha", Provenance::ClosedForm),
            ("m_two_alpha", Provenance::ClosedForm),
            ("sigma2", Provenance::ClosedForm),
            ("sigma_w2", Provenance::ClosedForm),
            ("c_inf", Provenance::ClosedForm),
            ("mean_offspring", Provenance::ClosedForm),
            ("extinction_q", Provenance::Quadrature),
        ]
    }

    /// (name, value) pairs in a fixed order, for text and CSV output.
    pub fn key_values(&self) -> [(&'static str, f64); 8] {
        [
            ("alpha", self.alpha),
            ("m_prime_alpha", self.m_prime_alpha),
            ("m_two_alpha", self.m_two_alpha),
            ("sigma2", self.sigma2),
            ("sigma_w2", self.sigma_w2),
            ("c_inf", self.c_inf),
            ("mean_offspring", self.mean_offspring),
            ("extinction_q", self.extinction_q),
        ]
    }
}

/// Solves m(alpha) = 1 for the growth exponent.
///
/// Brackets by doubling theta_hi from 1 until m < 1 and halving theta_lo
/// from 1 until m > 1 (+inf counts as > 1), then bisects. The probe limit is
/// 64 steps each way; running past it means no finite branch crosses 1.
pub fn solve_malthusian(law: &ReproductionLaw, tol: f64) -> Result<f64, LawError> {
    assert!(tol > 0.0);
    let mean = law.mean_offspring();
    if !(mean > 1.0) {
        return Err(LawError::Subcritical { mean });
    }
    let above = |theta: f64| {
        let m = law.laplace_m(theta);
        !m.is_finite() || m > 1.0
    };

    let mut hi = 1.0;
    let mut steps = 0;
    while above(hi) || law.laplace_m(hi) == 1.0 {
        hi *= 2.0;
        steps += 1;
        if steps > 64 {
            return Err(LawError::A3Violated { theta: hi });
        }
    }
    let mut lo = 1.0;
    steps = 0;
    while !above(lo) {
        lo *= 0.5;
        steps += 1;
        if steps > 64 {
            return Err(LawError::A3Violated { theta: lo });
        }
    }
    if lo > hi {
        // m(1) < 1: the halving loop went below the doubling start
        hi = hi.min(1.0);
    }

    // bisect to adjacent floats (always at least as tight as tol*max(1,root))
    loop {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if above(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // best representable root by residual
    let (rl, rh) = ((law.laplace_m(lo) - 1.0).abs(), (law.laplace_m(hi) - 1.0).abs());
    Ok(if rl <= rh { lo } else { hi })
}

/// Smallest fixed point of the litter pgf on [0, 1), by iteration from 0.
pub fn extinction_probability(law: &ReproductionLaw, tol: f64) -> Result<f64, LawError> {
    let mean = law.mean_offspring();
    if !(mean > 1.0) {
        return Err(LawError::Subcritical { mean });
    }
    let mut q = 0.0;
    for _ in 0..10_000_000 {
        let next = law.offspring_pgf(q);
        if (next - q).abs() <= tol {
            return Ok(next);
        }
        q = next;
    }
    Ok(q)
}

/// Derives the full constant set, checking the growth, moment and variance
/// hypotheses along the way.
pub fn derive_constants(law: &ReproductionLaw, tol: f64) -> Result<ModelConstants, LawError> {
    let alpha = solve_malthusian(law, tol)?;
    let m_prime_alpha = law.laplace_m_prime(alpha)?;
    let m_two_alpha = law.laplace_m(2.0 * alpha);
    if !m_two_alpha.is_finite() || m_two_alpha >= 1.0 {
        // the square-integrability of the martingale fails
        return Err(LawError::A4Violated { sigma2: f64::INFINITY });
    }
    let sigma2 = law.sigma2(alpha)?;
    Ok(ModelConstants {
        alpha,
        m_prime_alpha,
        m_two_alpha,
        sigma2,
        sigma_w2: sigma2 / (1.0 - m_two_alpha),
        c_inf: sigma2 / (-alpha * m_prime_alpha),
        mean_offspring: law.mean_offspring(),
        extinction_q: extinction_probability(law, tol)?,
    })
}

/// Constants for a variance-degenerate law (sigma2 treated as exactly 0),
/// for debug runs that bypass the variance rejection. Growth and moment
/// hypotheses are still enforced.
pub fn derive_constants_degenerate(
    law: &ReproductionLaw,
    tol: f64,
) -> Result<ModelConstants, LawError> {
    let alpha = solve_malthusian(law, tol)?;
    let m_prime_alpha = law.laplace_m_prime(alpha)?;
    let m_two_alpha = law.laplace_m(2.0 * alpha);
    let sigma2 = match law.sigma2(alpha) {
        Ok(v) => v,
        Err(LawError::A4Violated { sigma2 }) if sigma2.abs() < SIGMA2_ZERO_TOL => 0.0,
        Err(e) => return Err(e),
    };
    Ok(ModelConstants {
        alpha,
        m_prime_alpha,
        m_two_alpha,
        sigma2,
        sigma_w2: if m_two_alpha < 1.0 { sigma2 / (1.0 - m_two_alpha) } else { f64::INFINITY },
        c_inf: sigma2 / (-alpha * m_prime_alpha),
        mean_offspring: law.mean_offspring(),
        extinction_q: extinction_probability(law, tol)?,
    })
}
