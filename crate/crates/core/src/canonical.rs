//! Two-class reduced parametrization `(Delta_1, tau, pi_0)` and the exact law
//! of the hard-assigned score.
//!
//! With `Z` the whitened observation of its true class, the soft-assignment
//! score `T1` depends on the six mixture parameters only through
//!
//! * `Delta_1 = Sigma_1^{-1/2} (mu_1 - mu_2)`
//! * `tau = Sigma_2^{-1/2} Sigma_1^{1/2}` (not symmetric in general)
//! * `Delta_2 = tau Delta_1 = Sigma_2^{-1/2} (mu_1 - mu_2)`
//! * `pi_0 = 2 ln(pi_2 / pi_1)`
//!
//! In one dimension the hard-assignment score has a closed-form CDF built on
//! the decision region `{h(x) < pi_0}` with
//! `h(x) = (tau x + Delta_2)^2 - x^2 - 2 ln tau`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::mixture::{Assignment, GaussianComponent, PreparedMixture};
use crate::rng::{domain, map_blocks, StreamRng, MC_BLOCK};
use crate::spdcore::{mat_vec, norm_cdf, Matrix, SpdMatrix};

/// Tolerance for membership in the degenerate set.
pub const THETA0_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalParams {
    delta1: Vec<f64>,
    tau: Matrix,
    delta2: Vec<f64>,
    pi0: f64,
}

impl CanonicalParams {
    pub fn new(delta1: Vec<f64>, tau: Matrix, pi0: f64) -> Result<Self> {
        let p = delta1.len();
        if p == 0 || tau.dim() != p {
            return Err(Error::arg("tau and delta1 dimensions differ"));
        }
        if delta1.iter().chain(tau.as_slice()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("canonical parameters".into()));
        }
        if pi0.is_nan() {
            return Err(Error::NonFinite("pi0".into()));
        }
        let det = tau.determinant();
        if !(det.abs() > 0.0) {
            return Err(Error::Singular("tau is not invertible".into()));
        }
        let delta2 = tau.mul_vec(&delta1);
        Ok(CanonicalParams { delta1, tau, delta2, pi0 })
    }

    /// Scalar parameters; `tau` must be positive.
    pub fn univariate(tau: f64, delta1: f64, pi0: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::arg(format!("univariate tau must be positive, got {tau}")));
        }
        Self::new(vec![delta1], Matrix::diag(&[tau]), pi0)
    }

    pub fn dim(&self) -> usize {
        self.delta1.len()
    }

    pub fn delta1(&self) -> &[f64] {
        &self.delta1
    }

    pub fn delta2(&self) -> &[f64] {
        &self.delta2
    }

    pub fn tau(&self) -> &Matrix {
        &self.tau
    }

    pub fn pi0(&self) -> f64 {
        self.pi0
    }

    /// `pi_1 = 1 / (1 + e^{pi_0 / 2})`.
    pub fn pi1(&self) -> f64 {
        1.0 / (1.0 + (0.5 * self.pi0).exp())
    }

    pub fn pi2(&self) -> f64 {
        1.0 / (1.0 + (-0.5 * self.pi0).exp())
    }

    /// Membership in the degenerate set: identical components or a vanishing
    /// class.
    pub fn in_theta0(&self) -> bool {
        if self.pi0.is_infinite() {
            return true;
        }
        let d = self.delta1.iter().map(|v| v * v).sum::<f64>().sqrt();
        let t = self.tau.sub(&Matrix::identity(self.dim())).frobenius_norm();
        d < THETA0_TOL && t < THETA0_TOL
    }

    /// Parameters after exchanging the two class labels:
    /// `tau -> tau^{-1}`, `Delta_1 -> -Delta_2`, `Delta_2 -> -Delta_1`,
    /// `pi_0 -> -pi_0`.
    pub fn swap_labels(&self) -> Result<Self> {
        let tau = self.tau.inverse()?;
        let delta1: Vec<f64> = self.delta2.iter().map(|v| -v).collect();
        Self::new(delta1, tau, -self.pi0)
    }

    fn log_abs_det_tau(&self) -> f64 {
        self.tau.determinant().abs().ln()
    }

    /// Scalar `tau` for the univariate code paths.
    fn scalar_tau(&self) -> Result<f64> {
        if self.dim() != 1 {
            return Err(Error::arg("operation requires p = 1"));
        }
        let t = self.tau.get(0, 0);
        if !(t > 0.0) {
            return Err(Error::arg("univariate tau must be positive"));
        }
        Ok(t)
    }

    /// `r(Y)` from the latent draw `Z` of class 1 (`class_one`) or class 2.
    pub fn log_ratio_latent(&self, z: &[f64], class_one: bool) -> f64 {
        let p = self.dim();
        let mut u = vec![0.0; p];
        let zz: f64 = z.iter().map(|v| v * v).sum();
        if class_one {
            mat_vec(self.tau.as_slice(), p, z, &mut u);
            let q: f64 = u.iter().zip(&self.delta2).map(|(a, b)| (a + b) * (a + b)).sum();
            q - zz - 2.0 * self.log_abs_det_tau()
        } else {
            let inv = self.tau.inverse().expect("tau checked invertible");
            mat_vec(inv.as_slice(), p, z, &mut u);
            let q: f64 = u.iter().zip(&self.delta1).map(|(a, b)| (a - b) * (a - b)).sum();
            zz - q - 2.0 * self.log_abs_det_tau()
        }
    }
}

/// Canonical parameters of a two-component mixture.
///
/// A vanishing class (`pi_1` or `pi_2` zero) yields an infinite `pi_0`; the
/// result then reports [`CanonicalParams::in_theta0`].
pub fn canonicalize(
    mu1: &[f64],
    mu2: &[f64],
    s1: &SpdMatrix,
    s2: &SpdMatrix,
    pi1: f64,
    pi2: f64,
) -> Result<CanonicalParams> {
    let p = mu1.len();
    if mu2.len() != p || s1.dim() != p || s2.dim() != p {
        return Err(Error::arg("component dimensions differ"));
    }
    if !(0.0..=1.0).contains(&pi1) || !(0.0..=1.0).contains(&pi2) || (pi1 + pi2 - 1.0).abs() > 1e-12 {
        return Err(Error::arg(format!("class probabilities ({pi1}, {pi2}) are not a simplex")));
    }
    let diff: Vec<f64> = mu1.iter().zip(mu2).map(|(a, b)| a - b).collect();
    let delta1 = s1.inv_sqrt()?.as_matrix().mul_vec(&diff);
    let tau = s2.inv_sqrt()?.as_matrix().matmul(s1.sqrt()?.as_matrix());
    let pi0 = if pi1 == 0.0 {
        f64::INFINITY
    } else if pi2 == 0.0 {
        f64::NEG_INFINITY
    } else {
        2.0 * (pi2 / pi1).ln()
    };
    CanonicalParams::new(delta1, tau, pi0)
}

/// `r(y) = 2 ln(phi_1(y) / phi_2(y))` from the component densities.
pub fn log_ratio_r(y: &[f64], c1: &GaussianComponent, c2: &GaussianComponent) -> Result<f64> {
    let mix = PreparedMixture::new(&[c1.clone(), c2.clone()])?;
    if y.len() != mix.dim() {
        return Err(Error::arg("observation dimension mismatch"));
    }
    let mut l = [0.0; 2];
    mix.log_densities(y, &mut l);
    Ok(2.0 * (l[0] - l[1]))
}

/// `h(x) = (tau^2 - 1) x^2 + 2 tau Delta_2 x + Delta_2^2 - 2 ln tau` for
/// `p = 1`.
pub fn h_univariate(x: f64, theta: &CanonicalParams) -> Result<f64> {
    let tau = theta.scalar_tau()?;
    let d2 = theta.delta2[0];
    let u = tau * x + d2;
    Ok(u * u - x * x - 2.0 * tau.ln())
}

/// The region `{h(x) < pi_0}` in the original labeling.
///
/// For `tau >= 1` this is the open interval `(lower, upper)`. For `tau < 1`
/// the parabola opens downward and the region is the complement of
/// `[lower, upper]`, flagged by `complement`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionInterval {
    pub lower: f64,
    pub upper: f64,
    pub complement: bool,
}

impl DecisionInterval {
    pub fn contains(&self, x: f64) -> bool {
        let inside = self.lower < x && x < self.upper;
        if self.complement {
            !(self.lower <= x && x <= self.upper)
        } else {
            inside
        }
    }
}

/// Endpoints `a_-`, `a_+` of the decision region in one dimension.
pub fn decision_interval(theta: &CanonicalParams) -> Result<DecisionInterval> {
    let tau = theta.scalar_tau()?;
    if theta.in_theta0() {
        return Err(Error::DegenerateParameters(
            "decision region undefined on the degenerate set (Delta_1 = 0 and tau = 1, or a vanishing class)".into(),
        ));
    }
    let d2 = theta.delta2[0];
    let pi0 = theta.pi0;
    if tau == 1.0 {
        let cut = pi0 / (2.0 * d2) - d2 / 2.0;
        return Ok(if d2 > 0.0 {
            DecisionInterval { lower: f64::NEG_INFINITY, upper: cut, complement: false }
        } else {
            DecisionInterval { lower: cut, upper: f64::INFINITY, complement: false }
        });
    }
    // (tau^2 - 1) x^2 + 2 tau Delta_2 x + C = 0 with C = Delta_2^2 - 2 ln tau - pi_0.
    let a = (tau - 1.0) * (tau + 1.0);
    let c0 = a * (pi0 + 2.0 * tau.ln()) + d2 * d2;
    let complement = tau < 1.0;
    let (lower, upper) = if c0 <= 0.0 {
        let m = -tau * d2 / a;
        (m, m)
    } else {
        let sq = c0.sqrt();
        let c = d2 * d2 - 2.0 * tau.ln() - pi0;
        // Product-of-roots form avoids cancellation when tau is close to 1.
        let sign = if d2 >= 0.0 { 1.0 } else { -1.0 };
        let q = -(tau * d2 + sign * sq);
        let (r1, r2) = if q == 0.0 {
            (-sq / a, sq / a)
        } else {
            (q / a, c / q)
        };
        (r1.min(r2), r1.max(r2))
    };
    Ok(DecisionInterval { lower, upper, complement })
}

/// Exact CDF of the hard-assigned score for `p = 1`.
///
/// For `tau < 1` the labels are exchanged first; the score itself is
/// invariant under the exchange.
pub fn hard_cdf_univariate(t: f64, theta: &CanonicalParams) -> Result<f64> {
    let tau = theta.scalar_tau()?;
    if theta.in_theta0() {
        return Err(Error::DegenerateParameters(
            "exact CDF requires parameters outside the degenerate set".into(),
        ));
    }
    if tau < 1.0 {
        return hard_cdf_univariate(t, &theta.swap_labels()?);
    }
    let iv = decision_interval(theta)?;
    let (am, ap) = (iv.lower, iv.upper);
    let d1 = theta.delta1[0];
    let d2 = theta.delta2[0];
    let bm = tau * am + d2;
    let bp = tau * ap + d2;
    let pi1 = theta.pi1();
    let pi2 = theta.pi2();
    let f = norm_cdf(t)
        + pi1 * (norm_cdf(bm.max(t.min(bp)) / tau - d1) - norm_cdf(am.max(t.min(ap))))
        + pi2
            * (norm_cdf(tau * t.min(am) + d2) + norm_cdf(tau * t.max(ap) + d2)
                - norm_cdf(t.min(bm))
                - norm_cdf(t.max(bp)));
    Ok(f.clamp(0.0, 1.0))
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub se: f64,
}

/// Draws of the score from its latent representation.
///
/// Class 1 (probability `pi_1`): `T = (w_1 I + w_2 tau)(Z + w_2 Delta_1)`.
/// Class 2: `T = (w_1 tau^{-1} + w_2 I)(Z - w_1 Delta_2)`.
/// Hard assignment replaces `w` by the indicator of `r > pi_0`.
#[derive(Debug, Clone)]
pub struct LatentSampler {
    p: usize,
    tau: Vec<f64>,
    tau_inv: Vec<f64>,
    delta1: Vec<f64>,
    delta2: Vec<f64>,
    log_det: f64,
    pi0: f64,
    pi1: f64,
    assignment: Assignment,
}

impl LatentSampler {
    pub fn new(theta: &CanonicalParams, assignment: Assignment) -> Result<Self> {
        Ok(LatentSampler {
            p: theta.dim(),
            tau: theta.tau.as_slice().to_vec(),
            tau_inv: theta.tau.inverse()?.as_slice().to_vec(),
            delta1: theta.delta1.clone(),
            delta2: theta.delta2.clone(),
            log_det: theta.log_abs_det_tau(),
            pi0: theta.pi0,
            pi1: theta.pi1(),
            assignment,
        })
    }

    /// Score for a given latent class and `Z`. `buf` needs `2p` entries.
    pub fn score(&self, class_one: bool, z: &[f64], buf: &mut [f64], out: &mut [f64]) {
        let p = self.p;
        let (u, v) = buf.split_at_mut(p);
        let zz: f64 = z.iter().map(|x| x * x).sum();
        let r = if class_one {
            mat_vec(&self.tau, p, z, u);
            let q: f64 = u.iter().zip(&self.delta2).map(|(a, b)| (a + b) * (a + b)).sum();
            q - zz - 2.0 * self.log_det
        } else {
            mat_vec(&self.tau_inv, p, z, u);
            let q: f64 = u.iter().zip(&self.delta1).map(|(a, b)| (a - b) * (a - b)).sum();
            zz - q - 2.0 * self.log_det
        };
        let w1 = match self.assignment {
            Assignment::Hard => {
                if r > self.pi0 {
                    1.0
                } else {
                    0.0
                }
            }
            Assignment::Soft => 1.0 / (1.0 + (-0.5 * (r - self.pi0)).exp()),
        };
        let w2 = 1.0 - w1;
        if class_one {
            for j in 0..p {
                v[j] = z[j] + w2 * self.delta1[j];
            }
            mat_vec(&self.tau, p, v, u);
            for j in 0..p {
                out[j] = w1 * v[j] + w2 * u[j];
            }
        } else {
            for j in 0..p {
                v[j] = z[j] - w1 * self.delta2[j];
            }
            mat_vec(&self.tau_inv, p, v, u);
            for j in 0..p {
                out[j] = w1 * u[j] + w2 * v[j];
            }
        }
    }

    /// `reps` draws of `a^T T`, in a fixed order for a given seed.
    pub fn sample_contrast(&self, a: &[f64], reps: u64, seed: u64, stream: u64) -> Vec<f64> {
        let p = self.p;
        map_blocks(reps, MC_BLOCK, |b, len| {
            let mut rng = StreamRng::new(seed, stream, b);
            let mut z = vec![0.0; p];
            let mut buf = vec![0.0; 2 * p];
            let mut t = vec![0.0; p];
            let mut out = Vec::with_capacity(len as usize);
            for _ in 0..len {
                let class_one = rng.random::<f64>() < self.pi1;
                for zj in z.iter_mut() {
                    *zj = rng.sample(StandardNormal);
                }
                self.score(class_one, &z, &mut buf, &mut t);
                out.push(a.iter().zip(&t).map(|(x, y)| x * y).sum::<f64>());
            }
            out
        })
        .into_iter()
        .flatten()
        .collect()
    }
}

/// Empirical CDF of `a^T T` at several points from one set of draws.
pub fn contrast_cdf_mc(
    ts: &[f64],
    a: &[f64],
    theta: &CanonicalParams,
    assignment: Assignment,
    reps: u64,
    seed: u64,
) -> Result<Vec<McEstimate>> {
    if a.len() != theta.dim() {
        return Err(Error::arg("contrast dimension mismatch"));
    }
    let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::arg(format!("contrast must have unit norm, got {norm}")));
    }
    if reps == 0 {
        return Err(Error::arg("reps must be positive"));
    }
    let sampler = LatentSampler::new(theta, assignment)?;
    let mut draws = sampler.sample_contrast(a, reps, seed, domain::CDF_MC);
    draws.sort_by(f64::total_cmp);
    let n = reps as f64;
    Ok(ts
        .iter()
        .map(|&t| {
            let count = draws.partition_point(|&x| x <= t) as f64;
            let f = count / n;
            McEstimate { value: f, se: (f * (1.0 - f) / n).sqrt() }
        })
        .collect())
}

/// Monte Carlo CDF of the hard-assigned contrast `a^T T_H` at `t`.
pub fn hard_contrast_cdf_mc(
    t: f64,
    a: &[f64],
    theta: &CanonicalParams,
    reps: u64,
    seed: u64,
) -> Result<McEstimate> {
    Ok(contrast_cdf_mc(&[t], a, theta, Assignment::Hard, reps, seed)?[0])
}
