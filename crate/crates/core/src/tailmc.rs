//! Monte Carlo relative size `R(alpha)` of voxelwise tests on standardized
//! scores.
//!
//! `R(alpha)` is the true rejection probability of a nominal level-`alpha`
//! normal test on the contrast `a^T T`, divided by `alpha`. Values above one
//! mean the test is anticonservative.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::canonical::{CanonicalParams, LatentSampler};
use crate::error::{Error, Result};
use crate::mixture::{
    unit_contrast, Assignment, GaussianComponent, MixtureModel, PreparedMixture, Standardizer,
    Transform, Weighting,
};
use crate::rng::{derive_seed, domain, map_blocks, StreamRng, MC_BLOCK};
use crate::spdcore::{ks_statistic, mat_vec, norm_quantile, Matrix, SpdMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Tail {
    #[default]
    Two,
    Left,
    Right,
}

impl fmt::Display for Tail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tail::Two => "two",
            Tail::Left => "left",
            Tail::Right => "right",
        })
    }
}

impl FromStr for Tail {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "two" => Ok(Tail::Two),
            "left" => Ok(Tail::Left),
            "right" => Ok(Tail::Right),
            other => Err(Error::arg(format!("unknown tail {other:?}"))),
        }
    }
}

/// Level, side, contrast and Monte Carlo budget of a tail study.
#[derive(Debug, Clone, PartialEq)]
pub struct TailSpec {
    alpha: f64,
    tail: Tail,
    contrast: Vec<f64>,
    reps: u64,
    seed: u64,
    critical: f64,
}

impl TailSpec {
    /// The contrast is rescaled to unit length.
    pub fn new(alpha: f64, tail: Tail, contrast: &[f64], reps: u64, seed: u64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 0.5) {
            return Err(Error::arg(format!("alpha must lie in (0, 0.5), got {alpha}")));
        }
        if reps == 0 {
            return Err(Error::arg("reps must be positive"));
        }
        let critical = match tail {
            Tail::Two => norm_quantile(alpha / 2.0)?.abs(),
            Tail::Left => norm_quantile(alpha)?,
            Tail::Right => norm_quantile(1.0 - alpha)?,
        };
        Ok(TailSpec { alpha, tail, contrast: unit_contrast(contrast)?, reps, seed, critical })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn tail(&self) -> Tail {
        self.tail
    }

    pub fn contrast(&self) -> &[f64] {
        &self.contrast
    }

    pub fn reps(&self) -> u64 {
        self.reps
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        TailSpec { seed, ..self.clone() }
    }

    pub fn with_reps(&self, reps: u64) -> Self {
        TailSpec { reps, ..self.clone() }
    }

    pub fn with_tail(&self, tail: Tail) -> Result<Self> {
        TailSpec::new(self.alpha, tail, &self.contrast, self.reps, self.seed)
    }

    /// Critical value: `|Phi^{-1}(alpha/2)|` for two-sided tests,
    /// `Phi^{-1}(alpha)` or `Phi^{-1}(1 - alpha)` for one-sided ones.
    pub fn critical(&self) -> f64 {
        self.critical
    }

    #[inline]
    pub fn rejects(&self, z: f64) -> bool {
        match self.tail {
            Tail::Two => z.abs() >= self.critical,
            Tail::Left => z <= self.critical,
            Tail::Right => z >= self.critical,
        }
    }

    fn warning(&self) -> Option<String> {
        if (self.reps as f64) * self.alpha < 100.0 {
            let msg = format!(
                "reps * alpha = {} < 100: relative size estimate has a wide interval",
                self.reps as f64 * self.alpha
            );
            log::warn!("{msg}");
            Some(msg)
        } else {
            None
        }
    }
}

/// Estimated relative size with its binomial standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeSize {
    pub r: f64,
    pub se: f64,
    pub rejections: u64,
    pub reps: u64,
    pub warning: Option<String>,
}

impl RelativeSize {
    pub fn from_counts(rejections: u64, reps: u64, alpha: f64) -> Self {
        let p = rejections as f64 / reps as f64;
        RelativeSize {
            r: p / alpha,
            se: (p * (1.0 - p) / reps as f64).sqrt() / alpha,
            rejections,
            reps,
            warning: None,
        }
    }
}

/// Draws from one fitted model at one voxel and standardizes with another.
///
/// The generating side supplies the class probabilities and components the
/// data come from; the estimating side supplies the components and
/// log-priors used to compute responsibilities and scores.
pub struct VoxelSimulator<'a> {
    gen: &'a PreparedMixture,
    gen_cum: Vec<f64>,
    est: &'a PreparedMixture,
    est_log_pi: Vec<f64>,
    standardizer: Standardizer<'a>,
}

impl<'a> VoxelSimulator<'a> {
    pub fn new(
        gen: &'a PreparedMixture,
        gen_pi: &[f64],
        est: &'a PreparedMixture,
        est_pi: &[f64],
        method: Transform,
        assignment: Assignment,
    ) -> Result<Self> {
        if gen.dim() != est.dim() || gen_pi.len() != gen.k() || est_pi.len() != est.k() {
            return Err(Error::arg("generating and estimating models are incompatible"));
        }
        let mut acc = 0.0;
        let gen_cum = gen_pi
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(VoxelSimulator {
            gen,
            gen_cum,
            est,
            est_log_pi: est_pi.iter().map(|p| p.ln()).collect(),
            standardizer: Standardizer::new(est, method, assignment),
        })
    }

    /// Rejection count over `len` replicates from one stream.
    pub fn count_rejections(&self, spec: &TailSpec, rng: &mut StreamRng, len: u64) -> Result<u64> {
        let p = self.gen.dim();
        let k_last = self.gen.k() - 1;
        let mut ws = self.standardizer.workspace();
        let mut z = vec![0.0; p];
        let mut y = vec![0.0; p];
        let mut t = vec![0.0; p];
        let mut w = vec![0.0; self.est.k()];
        let a = spec.contrast();
        let mut count = 0;
        for _ in 0..len {
            let u: f64 = rng.random::<f64>() * self.gen_cum[k_last];
            let c = self.gen_cum.iter().position(|&cp| u < cp).unwrap_or(k_last);
            for zj in z.iter_mut() {
                *zj = rng.sample(StandardNormal);
            }
            mat_vec(self.gen.sqrt(c), p, &z, &mut y);
            for (yj, m) in y.iter_mut().zip(self.gen.mean(c)) {
                *yj += m;
            }
            self.est.responsibilities_log_prior(&y, &self.est_log_pi, &mut w);
            self.standardizer.score(&y, &w, &mut ws, &mut t)?;
            let zc: f64 = a.iter().zip(&t).map(|(x, v)| x * v).sum();
            if spec.rejects(zc) {
                count += 1;
            }
        }
        Ok(count)
    }
}

fn global_weights(model: &MixtureModel) -> Result<&[f64]> {
    match model.weighting() {
        Weighting::Global(pi) => Ok(pi),
        Weighting::Spatial(_) => Err(Error::arg("relative size needs global mixing weights")),
    }
}

/// `R(alpha)` when the data follow `model` and are standardized with the
/// same parameters.
pub fn relative_size(
    model: &MixtureModel,
    method: Transform,
    assignment: Assignment,
    spec: &TailSpec,
) -> Result<RelativeSize> {
    if spec.contrast().len() != model.dim() {
        return Err(Error::arg("contrast dimension differs from model dimension"));
    }
    let pi = global_weights(model)?;
    let mix = PreparedMixture::new(model.components())?;
    let sim = VoxelSimulator::new(&mix, pi, &mix, pi, method, assignment)?;
    let counts = map_blocks(spec.reps(), MC_BLOCK, |b, len| {
        let mut rng = StreamRng::new(spec.seed(), domain::TAIL_MC, b);
        sim.count_rejections(spec, &mut rng, len)
    });
    let mut total = 0;
    for c in counts {
        total += c?;
    }
    let mut out = RelativeSize::from_counts(total, spec.reps(), spec.alpha());
    out.warning = spec.warning();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Case {
    One,
    Two,
}

impl Case {
    /// Unit direction of `mu_1`.
    pub fn direction(&self) -> [f64; 2] {
        match self {
            Case::One => [1.0, 1.0],
            Case::Two => [2.0 / 5f64.sqrt(), 1.0 / 5f64.sqrt()],
        }
    }
}

impl FromStr for Case {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Case::One),
            "2" => Ok(Case::Two),
            other => Err(Error::arg(format!("unknown case {other:?}; expected 1 or 2"))),
        }
    }
}

/// Contrast `(1, -1) / sqrt(2)` used for the bivariate heatmaps.
pub fn difference_contrast() -> [f64; 2] {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    [s, -s]
}

/// Two-class bivariate model with `mu_1 = kappa_1 d`,
/// `Sigma_1 = kappa_2 [[1, rho], [rho, 1]]`, `mu_2 = 0`, `Sigma_2 = I`.
pub fn case_model(case: Case, rho: f64, kappa1: f64, kappa2: f64, pi1: f64) -> Result<MixtureModel> {
    if !(rho > -1.0 && rho < 1.0) {
        return Err(Error::arg(format!("rho must lie in (-1, 1), got {rho}")));
    }
    if !(kappa2 > 0.0) || !(kappa1 >= 0.0) {
        return Err(Error::arg("kappa1 must be >= 0 and kappa2 > 0"));
    }
    if !(pi1 > 0.0 && pi1 < 1.0) {
        return Err(Error::arg(format!("pi1 must lie in (0, 1), got {pi1}")));
    }
    let d = case.direction();
    let c1 = GaussianComponent::new(
        vec![kappa1 * d[0], kappa1 * d[1]],
        SpdMatrix::new(2, vec![kappa2, kappa2 * rho, kappa2 * rho, kappa2])?,
    )?;
    let c2 = GaussianComponent::new(vec![0.0, 0.0], SpdMatrix::identity(2))?;
    MixtureModel::new(vec![c1, c2], Weighting::Global(vec![pi1, 1.0 - pi1]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseGrid {
    pub case: Case,
    pub rho: f64,
    pub kappa2: f64,
    pub kappa1: Vec<f64>,
    pub pi1: Vec<f64>,
}

impl CaseGrid {
    /// Evenly spaced grid with `n_kappa` values in `[0, 8]` and `n_pi`
    /// values in `[0.02, 0.98]`.
    pub fn regular(case: Case, rho: f64, kappa2: f64, n_kappa: usize, n_pi: usize) -> Self {
        CaseGrid {
            case,
            rho,
            kappa2,
            kappa1: linspace(0.0, 8.0, n_kappa),
            pi1: linspace(0.02, 0.98, n_pi),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.kappa1.is_empty() || self.pi1.is_empty() {
            return Err(Error::arg("grid axes must be nonempty"));
        }
        if self.kappa1.windows(2).any(|w| !(w[0] < w[1])) || self.kappa1[0] < 0.0 {
            return Err(Error::arg("kappa1 grid must be increasing and nonnegative"));
        }
        if self.pi1.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(Error::arg("pi1 grid values must lie in (0, 1)"));
        }
        Ok(())
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapCell {
    pub kappa1: f64,
    pub pi1: f64,
    pub size: RelativeSize,
}

/// Relative sizes over a `(kappa_1, pi_1)` grid, `kappa_1` outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub cells: Vec<HeatmapCell>,
}

impl Heatmap {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kappa1,pi1,R,SE\n");
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{},{}\n",
                fmt17(c.kappa1),
                fmt17(c.pi1),
                fmt17(c.size.r),
                fmt17(c.size.se)
            ));
        }
        s
    }
}

/// 17 significant digits in scientific notation.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// One [`relative_size`] evaluation per grid cell. Cell `j` uses the seed
/// derived from `(spec.seed, j)`.
pub fn heatmap(grid: &CaseGrid, method: Transform, assignment: Assignment, spec: &TailSpec) -> Result<Heatmap> {
    grid.validate()?;
    if spec.contrast().len() != 2 {
        return Err(Error::arg("case grids are bivariate; contrast must have two entries"));
    }
    let mut cells = Vec::with_capacity(grid.kappa1.len() * grid.pi1.len());
    for &k1 in &grid.kappa1 {
        for &p1 in &grid.pi1 {
            let j = cells.len() as u64;
            let model = case_model(grid.case, grid.rho, k1, grid.kappa2, p1)?;
            let cell_spec = spec.with_seed(derive_seed(&[spec.seed(), j]));
            let size = relative_size(&model, method, assignment, &cell_spec)?;
            cells.push(HeatmapCell { kappa1: k1, pi1: p1, size });
        }
    }
    Ok(Heatmap { cells })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymmetryCheck {
    pub plus: RelativeSize,
    pub minus: RelativeSize,
    pub z: f64,
    pub pass: bool,
}

/// Compares `R` at `Delta_1` and `-Delta_1` (class-1 mean reflected through
/// the class-2 mean) with independent streams; passes within four combined
/// standard errors.
pub fn symmetry_check(model: &MixtureModel, method: Transform, assignment: Assignment, spec: &TailSpec) -> Result<SymmetryCheck> {
    if model.k() != 2 {
        return Err(Error::arg("symmetry check needs a two-class model"));
    }
    let c = model.components();
    let reflected: Vec<f64> = c[0].mean().iter().zip(c[1].mean()).map(|(m1, m2)| 2.0 * m2 - m1).collect();
    let flipped = MixtureModel::new(
        vec![GaussianComponent::new(reflected, c[0].cov().clone())?, c[1].clone()],
        model.weighting().clone(),
    )?;
    let plus = relative_size(model, method, assignment, &spec.with_seed(derive_seed(&[spec.seed(), 1])))?;
    let minus = relative_size(&flipped, method, assignment, &spec.with_seed(derive_seed(&[spec.seed(), 2])))?;
    let se = (plus.se * plus.se + minus.se * minus.se).sqrt();
    let diff = (plus.r - minus.r).abs();
    let z = if se > 0.0 { diff / se } else if diff == 0.0 { 0.0 } else { f64::INFINITY };
    Ok(SymmetryCheck { pass: z <= 4.0, plus, minus, z })
}

/// Limit regimes in which the score tends to `Z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    /// One class dominates: `pi_1 -> 1`.
    DominantClass,
    /// Classes separate: `||Delta_1|| -> infinity`.
    Separation,
    /// Classes merge: `Delta_1 -> 0`, `tau -> I`.
    Merging,
    /// Merging along the contrast only: `a^T Delta_1 -> 0`, `tau a -> a`.
    ContrastMerging,
}

/// Standard bivariate sequences approaching each regime, with the contrast
/// each one is evaluated on.
pub fn regime_sequence(regime: Regime) -> Result<(Vec<CanonicalParams>, Vec<f64>)> {
    let a = difference_contrast().to_vec();
    let base_tau = Matrix::from_row_major(2, vec![1.3, 0.25, 0.25, 0.8])?;
    let dir = [std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2];
    let seq = match regime {
        Regime::DominantClass => [0.5, 0.9, 0.99, 0.999]
            .iter()
            .map(|&p1: &f64| {
                let pi0 = 2.0 * ((1.0 - p1) / p1).ln();
                CanonicalParams::new(vec![1.5 * dir[0], 0.5 * dir[1]], base_tau.clone(), pi0)
            })
            .collect::<Result<Vec<_>>>()?,
        Regime::Separation => [1.0, 3.0, 10.0, 30.0]
            .iter()
            .map(|&d: &f64| CanonicalParams::new(vec![d * 0.8, d * 0.6], base_tau.clone(), 0.4))
            .collect::<Result<Vec<_>>>()?,
        Regime::Merging => [1.0, 0.3, 0.1, 0.03, 0.01]
            .iter()
            .map(|&e: &f64| {
                let tau = Matrix::from_row_major(2, vec![1.0 + 0.6 * e, 0.48 * e, 0.48 * e, 1.0 - 0.64 * e])?;
                CanonicalParams::new(vec![e * 0.6, -e * 0.8], tau, 0.0)
            })
            .collect::<Result<Vec<_>>>()?,
        Regime::ContrastMerging => [1.0, 0.3, 0.1, 0.03, 0.01]
            .iter()
            .map(|&e: &f64| {
                // tau = I + e B + (s - 1) u u^T with u orthogonal to a, so
                // tau a -> a while tau stays away from I.
                let s = 2.0;
                let uu = 0.5 * (s - 1.0);
                let tau = Matrix::from_row_major(2, vec![1.0 + uu + 0.5 * e, uu, uu, 1.0 + uu - 0.5 * e])?;
                CanonicalParams::new(vec![2.0 * dir[0] + e * a[0], 2.0 * dir[1] + e * a[1]], tau, 0.0)
            })
            .collect::<Result<Vec<_>>>()?,
    };
    Ok((seq, a))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimitRow {
    pub ks_soft: f64,
    pub ks_hard: f64,
}

/// KS distance of `a^T T` to the standard normal along a parameter
/// sequence, for both assignments.
pub fn limit_convergence(sequence: &[CanonicalParams], a: &[f64], reps: u64, seed: u64) -> Result<Vec<LimitRow>> {
    let a = unit_contrast(a)?;
    sequence
        .par_iter()
        .enumerate()
        .map(|(i, theta)| {
            if theta.dim() != a.len() {
                return Err(Error::arg("contrast dimension mismatch"));
            }
            let s = derive_seed(&[seed, i as u64]);
            let soft = LatentSampler::new(theta, Assignment::Soft)?.sample_contrast(&a, reps, s, domain::CDF_MC);
            let hard = LatentSampler::new(theta, Assignment::Hard)?.sample_contrast(&a, reps, s, domain::CDF_MC);
            Ok(LimitRow {
                ks_soft: ks_statistic(&soft)?.statistic,
                ks_hard: ks_statistic(&hard)?.statistic,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn critical_values() {
        let s = TailSpec::new(0.05, Tail::Two, &[1.0], 10, 0).unwrap();
        assert!((s.critical() - 1.959963984540054).abs() < 1e-12);
        assert!(s.rejects(-2.0) && s.rejects(2.0) && !s.rejects(1.9));
        let s = TailSpec::new(0.01, Tail::Left, &[1.0], 10, 0).unwrap();
        assert!(s.rejects(-2.4) && !s.rejects(2.4));
        let s = TailSpec::new(0.01, Tail::Right, &[1.0], 10, 0).unwrap();
        assert!(!s.rejects(-2.4) && s.rejects(2.4));
        assert!(TailSpec::new(0.5, Tail::Two, &[1.0], 10, 0).is_err());
        assert!(TailSpec::new(0.01, Tail::Two, &[1.0], 0, 0).is_err());
    }

    #[test]
    fn low_budget_warns() {
        let m = case_model(Case::One, 0.0, 1.0, 1.0, 0.5).unwrap();
        let s = TailSpec::new(0.001, Tail::Two, &difference_contrast(), 1000, 1).unwrap();
        let r = relative_size(&m, Transform::T1, Assignment::Soft, &s).unwrap();
        assert!(r.warning.is_some());
    }

    #[test]
    fn counts_to_size() {
        let r = RelativeSize::from_counts(100, 10_000, 0.01);
        assert!((r.r - 1.0).abs() < 1e-12);
        assert!((r.se - (0.01f64 * 0.99 / 1e4).sqrt() / 0.01).abs() < 1e-12);
    }

    #[test]
    fn case_models() {
        let m = case_model(Case::Two, 0.5, 5f64.sqrt(), 2.0, 0.3).unwrap();
        assert!((m.components()[0].mean()[0] - 2.0).abs() < 1e-15);
        assert!((m.components()[0].mean()[1] - 1.0).abs() < 1e-15);
        assert!(case_model(Case::One, 1.0, 1.0, 1.0, 0.5).is_err());
        assert!(case_model(Case::One, 0.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn heatmap_csv_layout() {
        let grid = CaseGrid { case: Case::One, rho: 0.0, kappa2: 1.0, kappa1: vec![0.0, 1.0], pi1: vec![0.5] };
        let spec = TailSpec::new(0.01, Tail::Two, &difference_contrast(), 2000, 9).unwrap();
        let h = heatmap(&grid, Transform::T1, Assignment::Soft, &spec).unwrap();
        let csv = h.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "kappa1,pi1,R,SE");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0.0000000000000000e0,5.0000000000000000e-1,"));
        let bad = CaseGrid { kappa1: vec![1.0, 0.5], ..grid };
        assert!(heatmap(&bad, Transform::T1, Assignment::Soft, &spec).is_err());
    }
}
