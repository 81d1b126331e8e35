//! Mixture-model types, responsibilities, label assignment and the three
//! standardizing transforms.
//!
//! Given a fitted mixture `f(y) = sum_k pi_k N(y | mu_k, Sigma_k)`, every
//! observation is mapped to a score that would be exactly `N(0, I)` if its
//! latent class were known. The class is replaced by estimated labels
//! `s~` (the responsibilities themselves, or their one-hot argmax):
//!
//! * [`Transform::T1`]: `(sum_k s~_k Sigma_k^{-1/2}) (y - sum_k s~_k mu_k)`
//! * [`Transform::T2`]: `(sum_k s~_k Sigma_k)^{-1/2} (y - sum_k s~_k mu_k)`
//! * [`Transform::T3`]: marginal covariance
//!   `sum_k s~_k [Sigma_k + (mu_k - mu~)(mu_k - mu~)^T]` in place of the
//!   combined covariance.
//!
//! Under hard assignment the three coincide.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::spdcore::{mat_vec, norm_cdf, norm_sf, SpdMatrix};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    mean: Vec<f64>,
    cov: SpdMatrix,
}

impl GaussianComponent {
    pub fn new(mean: Vec<f64>, cov: SpdMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::arg(format!(
                "mean has dimension {} but covariance is {}x{}",
                mean.len(),
                cov.dim(),
                cov.dim()
            )));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("component mean".into()));
        }
        Ok(GaussianComponent { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &SpdMatrix {
        &self.cov
    }

    pub fn log_density(&self, y: &[f64]) -> Result<f64> {
        let prepared = PreparedMixture::new(std::slice::from_ref(self))?;
        let mut out = [0.0];
        prepared.log_densities(y, &mut out);
        Ok(out[0])
    }
}

/// Mixing weights: one global simplex, or template weights `gamma` that are
/// combined with per-voxel templates.
#[derive(Debug, Clone, PartialEq)]
pub enum Weighting {
    Global(Vec<f64>),
    Spatial(Vec<f64>),
}

impl Weighting {
    pub fn values(&self) -> &[f64] {
        match self {
            Weighting::Global(v) | Weighting::Spatial(v) => v,
        }
    }

    pub fn is_spatial(&self) -> bool {
        matches!(self, Weighting::Spatial(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    components: Vec<GaussianComponent>,
    weighting: Weighting,
}

pub(crate) fn check_simplex(w: &[f64], what: &str) -> Result<()> {
    if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::arg(format!("{what} must be strictly positive, got {w:?}")));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::arg(format!("{what} must sum to 1, got {sum}")));
    }
    Ok(())
}

impl MixtureModel {
    pub fn new(components: Vec<GaussianComponent>, weighting: Weighting) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(Error::arg("a mixture needs at least one component"));
        };
        let p = first.dim();
        if components.iter().any(|c| c.dim() != p) {
            return Err(Error::arg("all components must share one dimension"));
        }
        if weighting.values().len() != components.len() {
            return Err(Error::arg(format!(
                "{} weights for {} components",
                weighting.values().len(),
                components.len()
            )));
        }
        check_simplex(weighting.values(), "mixing weights")?;
        Ok(MixtureModel { components, weighting })
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn weighting(&self) -> &Weighting {
        &self.weighting
    }

    /// Per-voxel mixing probabilities for voxel `voxel`. Spatial weighting
    /// needs the templates.
    pub fn prior_row(
        &self,
        voxel: usize,
        templates: Option<&TemplateStack>,
        out: &mut [f64],
    ) -> Result<()> {
        match &self.weighting {
            Weighting::Global(pi) => {
                out.copy_from_slice(pi);
                Ok(())
            }
            Weighting::Spatial(gamma) => {
                let t = templates.ok_or_else(|| {
                    Error::arg("spatial weighting requires a template stack")
                })?;
                spatial_weights_row(gamma, t.row(voxel), out)
                    .map_err(|_| Error::DegenerateTemplate { voxel })
            }
        }
    }
}

/// `pi_k = gamma_k b_k / sum_j gamma_j b_j`.
pub(crate) fn spatial_weights_row(gamma: &[f64], b: &[f64], out: &mut [f64]) -> Result<()> {
    let mut total = 0.0;
    for ((o, g), bk) in out.iter_mut().zip(gamma).zip(b) {
        *o = g * bk;
        total += *o;
    }
    if !(total > 0.0) {
        return Err(Error::DegenerateTemplate { voxel: 0 });
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Ok(())
}

/// 2-D voxel grid, vectorized row-major: index `i = y * nx + x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VoxelGrid {
    pub nx: usize,
    pub ny: usize,
}

impl VoxelGrid {
    pub fn new(nx: usize, ny: usize) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::arg("grid dimensions must be positive"));
        }
        Ok(VoxelGrid { nx, ny })
    }

    /// A 1-D grid of `n` locations.
    pub fn line(n: usize) -> Result<Self> {
        Self::new(n, 1)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.nx + x
    }

    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i % self.nx, i / self.nx)
    }
}

/// Per-voxel prior class probabilities `b_ik`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateStack {
    grid: VoxelGrid,
    k: usize,
    values: Vec<f64>,
}

impl TemplateStack {
    /// Rows are renormalized to sum to one; negative, non-finite or all-zero
    /// rows are rejected.
    pub fn new(grid: VoxelGrid, k: usize, mut values: Vec<f64>) -> Result<Self> {
        if k == 0 || values.len() != grid.len() * k {
            return Err(Error::arg(format!(
                "template stack needs {} values, got {}",
                grid.len() * k,
                values.len()
            )));
        }
        for (i, row) in values.chunks_mut(k).enumerate() {
            if row.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
                return Err(Error::arg(format!("template row {i} has invalid entries")));
            }
            let s: f64 = row.iter().sum();
            if !(s > 0.0) {
                return Err(Error::DegenerateTemplate { voxel: i });
            }
            row.iter_mut().for_each(|b| *b /= s);
        }
        Ok(TemplateStack { grid, k, values })
    }

    pub fn grid(&self) -> VoxelGrid {
        self.grid
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Row-stochastic `n x K` matrix of membership weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    k: usize,
    values: Vec<f64>,
}

impl Responsibilities {
    pub(crate) fn from_raw(k: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len() % k, 0);
        Responsibilities { k, values }
    }

    /// Validates a row-major `n x K` matrix whose rows lie on the simplex.
    pub fn new(k: usize, values: Vec<f64>) -> Result<Self> {
        if k == 0 || values.is_empty() || !values.len().is_multiple_of(k) {
            return Err(Error::arg("responsibility matrix must have a positive multiple of K entries"));
        }
        for (i, row) in values.chunks(k).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::arg(format!("responsibility row {i} is not on the simplex: {row:?}")));
            }
        }
        Ok(Responsibilities { k, values })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Transform {
    #[default]
    T1,
    T2,
    T3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Assignment {
    #[default]
    Soft,
    Hard,
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Transform::T1 => "t1",
            Transform::T2 => "t2",
            Transform::T3 => "t3",
        })
    }
}

impl FromStr for Transform {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t1" => Ok(Transform::T1),
            "t2" => Ok(Transform::T2),
            "t3" => Ok(Transform::T3),
            other => Err(Error::arg(format!("unknown transform {other:?}"))),
        }
    }
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Assignment::Soft => "soft",
            Assignment::Hard => "hard",
        })
    }
}

impl FromStr for Assignment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "soft" => Ok(Assignment::Soft),
            "hard" => Ok(Assignment::Hard),
            other => Err(Error::arg(format!("unknown assignment {other:?}"))),
        }
    }
}

/// Standardized scores for every voxel of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreField {
    grid: VoxelGrid,
    dim: usize,
    scores: Vec<f64>,
    method: Transform,
    assignment: Assignment,
}

impl ScoreField {
    pub fn grid(&self) -> VoxelGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn score(&self, i: usize) -> &[f64] {
        &self.scores[i * self.dim..(i + 1) * self.dim]
    }

    pub fn method(&self) -> Transform {
        self.method
    }

    pub fn assignment(&self) -> Assignment {
        self.assignment
    }

    /// All values of one score coordinate.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.scores.iter().skip(c).step_by(self.dim).copied().collect()
    }
}

/// Component parameters laid out flat for per-observation evaluation.
#[derive(Debug, Clone)]
pub struct PreparedMixture {
    dim: usize,
    k: usize,
    means: Vec<f64>,
    covs: Vec<f64>,
    sqrts: Vec<f64>,
    inv_sqrts: Vec<f64>,
    log_norm: Vec<f64>,
}

impl PreparedMixture {
    pub fn new(components: &[GaussianComponent]) -> Result<Self> {
        let dim = components
            .first()
            .ok_or_else(|| Error::arg("no components"))?
            .dim();
        let k = components.len();
        let mut p = PreparedMixture {
            dim,
            k,
            means: Vec::with_capacity(k * dim),
            covs: Vec::with_capacity(k * dim * dim),
            sqrts: Vec::with_capacity(k * dim * dim),
            inv_sqrts: Vec::with_capacity(k * dim * dim),
            log_norm: Vec::with_capacity(k),
        };
        for c in components {
            if c.dim() != dim {
                return Err(Error::arg("all components must share one dimension"));
            }
            p.means.extend_from_slice(c.mean());
            p.covs.extend_from_slice(c.cov().as_slice());
            p.sqrts.extend_from_slice(c.cov().sqrt()?.as_slice());
            p.inv_sqrts.extend_from_slice(c.cov().inv_sqrt()?.as_slice());
            p.log_norm.push(-0.5 * (dim as f64 * LN_2PI + c.cov().log_det()));
        }
        Ok(p)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.dim..(k + 1) * self.dim]
    }

    #[inline]
    pub fn cov(&self, k: usize) -> &[f64] {
        let pp = self.dim * self.dim;
        &self.covs[k * pp..(k + 1) * pp]
    }

    #[inline]
    pub fn sqrt(&self, k: usize) -> &[f64] {
        let pp = self.dim * self.dim;
        &self.sqrts[k * pp..(k + 1) * pp]
    }

    #[inline]
    pub fn inv_sqrt(&self, k: usize) -> &[f64] {
        let pp = self.dim * self.dim;
        &self.inv_sqrts[k * pp..(k + 1) * pp]
    }

    /// Squared Mahalanobis distance of `y` from component `k`.
    #[inline]
    pub fn mahalanobis_sq(&self, k: usize, y: &[f64]) -> f64 {
        let p = self.dim;
        let mu = self.mean(k);
        let a = self.inv_sqrt(k);
        let mut q = 0.0;
        for i in 0..p {
            let row = &a[i * p..(i + 1) * p];
            let mut v = 0.0;
            for j in 0..p {
                v += row[j] * (y[j] - mu[j]);
            }
            q += v * v;
        }
        q
    }

    /// `out[k] = log N(y | mu_k, Sigma_k)`.
    #[inline]
    pub fn log_densities(&self, y: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate().take(self.k) {
            *o = self.log_norm[k] - 0.5 * self.mahalanobis_sq(k, y);
        }
    }

    /// Writes normalized responsibilities for prior `pi` into `w` and returns
    /// the log mixture density `log sum_k pi_k phi_k(y)`.
    #[inline]
    pub fn responsibilities_into(&self, y: &[f64], pi: &[f64], w: &mut [f64]) -> f64 {
        self.log_densities(y, w);
        for (wk, pk) in w.iter_mut().zip(pi) {
            *wk += pk.ln();
        }
        normalize_log_weights(w)
    }

    /// Same as [`Self::responsibilities_into`] with log-priors supplied.
    #[inline]
    pub fn responsibilities_log_prior(&self, y: &[f64], log_pi: &[f64], w: &mut [f64]) -> f64 {
        self.log_densities(y, w);
        for (wk, lp) in w.iter_mut().zip(log_pi) {
            *wk += lp;
        }
        normalize_log_weights(w)
    }
}

/// Exponentiates and normalizes log-weights in place; returns their
/// log-sum-exp.
#[inline]
pub fn normalize_log_weights(w: &mut [f64]) -> f64 {
    let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        // Every prior is zero: the caller's problem, but keep the row valid.
        let u = 1.0 / w.len() as f64;
        w.iter_mut().for_each(|v| *v = u);
        return f64::NEG_INFINITY;
    }
    let mut total = 0.0;
    for v in w.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in w.iter_mut() {
        *v /= total;
    }
    max + total.ln()
}

/// Posterior class probabilities of a single observation.
pub fn responsibilities(
    y: &[f64],
    weights: &[f64],
    components: &[GaussianComponent],
) -> Result<Vec<f64>> {
    if y.iter().any(|v| v.is_nan()) {
        return Err(Error::arg("observation contains NaN"));
    }
    check_simplex(weights, "mixing weights")?;
    if weights.len() != components.len() {
        return Err(Error::arg("weights and components differ in length"));
    }
    let prepared = PreparedMixture::new(components)?;
    if y.len() != prepared.dim() {
        return Err(Error::arg("observation dimension mismatch"));
    }
    let mut w = vec![0.0; components.len()];
    prepared.responsibilities_into(y, weights, &mut w);
    Ok(w)
}

/// Soft assignment returns `w`; hard assignment the one-hot vector at the
/// first maximum.
pub fn assign(w: &[f64], mode: Assignment) -> Vec<f64> {
    let mut out = w.to_vec();
    assign_in_place(&mut out, mode);
    out
}

#[inline]
pub(crate) fn argmax_first(w: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..w.len() {
        if w[k] > w[best] {
            best = k;
        }
    }
    best
}

#[inline]
fn assign_in_place(w: &mut [f64], mode: Assignment) {
    if mode == Assignment::Hard {
        let best = argmax_first(w);
        w.iter_mut().enumerate().for_each(|(k, v)| *v = if k == best { 1.0 } else { 0.0 });
    }
}

/// Scratch buffers for [`Standardizer::score`].
#[derive(Debug, Clone)]
pub struct ScoreWorkspace {
    s: Vec<f64>,
    mu: Vec<f64>,
    resid: Vec<f64>,
    mat: Vec<f64>,
    mat2: Vec<f64>,
}

impl ScoreWorkspace {
    pub fn new(dim: usize, k: usize) -> Self {
        ScoreWorkspace {
            s: vec![0.0; k],
            mu: vec![0.0; dim],
            resid: vec![0.0; dim],
            mat: vec![0.0; dim * dim],
            mat2: vec![0.0; dim * dim],
        }
    }
}

/// Applies one transform/assignment pair to observations with known
/// responsibilities.
#[derive(Debug, Clone)]
pub struct Standardizer<'a> {
    mix: &'a PreparedMixture,
    method: Transform,
    assignment: Assignment,
}

impl<'a> Standardizer<'a> {
    pub fn new(mix: &'a PreparedMixture, method: Transform, assignment: Assignment) -> Self {
        Standardizer { mix, method, assignment }
    }

    pub fn workspace(&self) -> ScoreWorkspace {
        ScoreWorkspace::new(self.mix.dim(), self.mix.k())
    }

    /// Standardized score of `y` given its responsibilities `w`.
    pub fn score(&self, y: &[f64], w: &[f64], ws: &mut ScoreWorkspace, out: &mut [f64]) -> Result<()> {
        ws.s.copy_from_slice(w);
        assign_in_place(&mut ws.s, self.assignment);
        self.score_with_labels(y, ws, out)
    }

    /// Standardized score with explicit estimated labels `s`.
    pub fn score_labels(&self, y: &[f64], s: &[f64], ws: &mut ScoreWorkspace, out: &mut [f64]) -> Result<()> {
        ws.s.copy_from_slice(s);
        self.score_with_labels(y, ws, out)
    }

    fn score_with_labels(&self, y: &[f64], ws: &mut ScoreWorkspace, out: &mut [f64]) -> Result<()> {
        let mix = self.mix;
        let p = mix.dim();
        let pp = p * p;
        ws.mu.iter_mut().for_each(|v| *v = 0.0);
        let mut one_hot = None;
        let mut nonzero = 0;
        for k in 0..mix.k() {
            let sk = ws.s[k];
            if sk == 0.0 {
                continue;
            }
            nonzero += 1;
            one_hot = Some(k);
            for (m, v) in ws.mu.iter_mut().zip(mix.mean(k)) {
                *m += sk * v;
            }
        }
        for j in 0..p {
            ws.resid[j] = y[j] - ws.mu[j];
        }
        // A single active label with weight one: all transforms reduce to
        // whitening by that component.
        if nonzero == 1 {
            let k = one_hot.unwrap();
            if ws.s[k] == 1.0 {
                mat_vec(mix.inv_sqrt(k), p, &ws.resid, out);
                return Ok(());
            }
        }
        match self.method {
            Transform::T1 => {
                ws.mat.iter_mut().for_each(|v| *v = 0.0);
                for k in 0..mix.k() {
                    let sk = ws.s[k];
                    if sk == 0.0 {
                        continue;
                    }
                    for (m, a) in ws.mat.iter_mut().zip(mix.inv_sqrt(k)) {
                        *m += sk * a;
                    }
                }
            }
            Transform::T2 | Transform::T3 => {
                ws.mat2.iter_mut().for_each(|v| *v = 0.0);
                for k in 0..mix.k() {
                    let sk = ws.s[k];
                    if sk == 0.0 {
                        continue;
                    }
                    let cov = mix.cov(k);
                    for e in 0..pp {
                        ws.mat2[e] += sk * cov[e];
                    }
                    if self.method == Transform::T3 {
                        let mk = mix.mean(k);
                        for i in 0..p {
                            let di = mk[i] - ws.mu[i];
                            for j in 0..p {
                                ws.mat2[i * p + j] += sk * di * (mk[j] - ws.mu[j]);
                            }
                        }
                    }
                }
                small_inv_sqrt(p, &ws.mat2, &mut ws.mat)?;
            }
        }
        mat_vec(&ws.mat, p, &ws.resid, out);
        Ok(())
    }
}

/// Inverse principal square root of a small SPD matrix; closed forms for
/// `p <= 2`.
pub(crate) fn small_inv_sqrt(p: usize, m: &[f64], out: &mut [f64]) -> Result<()> {
    match p {
        1 => {
            if !(m[0] > 0.0) {
                return Err(Error::Singular("combined variance is not positive".into()));
            }
            out[0] = 1.0 / m[0].sqrt();
            Ok(())
        }
        2 => {
            let (a, b, d) = (m[0], 0.5 * (m[1] + m[2]), m[3]);
            let det = a * d - b * b;
            let tr = a + d;
            if !(det > crate::spdcore::SPD_RELATIVE_FLOOR * tr * tr && tr > 0.0) {
                return Err(Error::Singular("combined covariance is not positive definite".into()));
            }
            // sqrt(M) = (M + s I) / t with s = sqrt(det), t = sqrt(tr + 2s).
            let s = det.sqrt();
            let t = (tr + 2.0 * s).sqrt();
            let (ra, rb, rd) = ((a + s) / t, b / t, (d + s) / t);
            let rdet = ra * rd - rb * rb;
            out[0] = rd / rdet;
            out[1] = -rb / rdet;
            out[2] = -rb / rdet;
            out[3] = ra / rdet;
            Ok(())
        }
        _ => {
            let spd = SpdMatrix::new(p, m.to_vec())?;
            out.copy_from_slice(spd.inv_sqrt()?.as_slice());
            Ok(())
        }
    }
}

fn pointwise(
    y: &[f64],
    s: &[f64],
    components: &[GaussianComponent],
    method: Transform,
) -> Result<Vec<f64>> {
    let mix = PreparedMixture::new(components)?;
    if y.len() != mix.dim() || s.len() != mix.k() {
        return Err(Error::arg("dimension mismatch"));
    }
    let st = Standardizer::new(&mix, method, Assignment::Soft);
    let mut ws = st.workspace();
    let mut out = vec![0.0; mix.dim()];
    st.score_labels(y, s, &mut ws, &mut out)?;
    Ok(out)
}

/// `(sum_k s_k Sigma_k^{-1/2}) (y - sum_k s_k mu_k)`.
pub fn standardize_t1(y: &[f64], s: &[f64], components: &[GaussianComponent]) -> Result<Vec<f64>> {
    pointwise(y, s, components, Transform::T1)
}

/// `(sum_k s_k Sigma_k)^{-1/2} (y - sum_k s_k mu_k)`.
pub fn standardize_t2(y: &[f64], s: &[f64], components: &[GaussianComponent]) -> Result<Vec<f64>> {
    pointwise(y, s, components, Transform::T2)
}

/// Whitening by the marginal covariance of the labelled mixture.
pub fn standardize_t3(y: &[f64], s: &[f64], components: &[GaussianComponent]) -> Result<Vec<f64>> {
    pointwise(y, s, components, Transform::T3)
}

const FIELD_CHUNK: usize = 1024;

/// Standardizes every voxel of an `n x p` observation matrix.
pub fn standardize_field(
    obs: &[f64],
    grid: VoxelGrid,
    model: &MixtureModel,
    templates: Option<&TemplateStack>,
    method: Transform,
    assignment: Assignment,
) -> Result<ScoreField> {
    let p = model.dim();
    let k = model.k();
    let n = grid.len();
    if obs.len() != n * p {
        return Err(Error::arg(format!(
            "observations hold {} values, grid {}x{} with {p} channels needs {}",
            obs.len(),
            grid.nx,
            grid.ny,
            n * p
        )));
    }
    if model.weighting().is_spatial() {
        let t = templates.ok_or_else(|| Error::arg("spatial model requires templates"))?;
        if t.grid() != grid || t.k() != k {
            return Err(Error::arg("template grid or class count does not match observations"));
        }
    }
    let mix = PreparedMixture::new(model.components())?;
    let st = Standardizer::new(&mix, method, assignment);
    let mut scores = vec![0.0; n * p];
    scores
        .par_chunks_mut(FIELD_CHUNK * p)
        .enumerate()
        .try_for_each(|(c, out)| -> Result<()> {
            let mut ws = st.workspace();
            let mut pi = vec![0.0; k];
            let mut w = vec![0.0; k];
            for (j, o) in out.chunks_mut(p).enumerate() {
                let i = c * FIELD_CHUNK + j;
                model.prior_row(i, templates, &mut pi)?;
                let y = &obs[i * p..(i + 1) * p];
                mix.responsibilities_into(y, &pi, &mut w);
                st.score(y, &w, &mut ws, o)?;
            }
            Ok(())
        })?;
    if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("score at voxel {}", i / p)));
    }
    Ok(ScoreField { grid, dim: p, scores, method, assignment })
}

/// Projection of a score field on a contrast with its p-values.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastMap {
    pub contrast: Vec<f64>,
    pub z: Vec<f64>,
    pub p_two: Vec<f64>,
    pub p_left: Vec<f64>,
    pub p_right: Vec<f64>,
}

/// Normalizes a contrast to unit length, warning when it was not.
pub fn unit_contrast(a: &[f64]) -> Result<Vec<f64>> {
    let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::arg("contrast vector must be nonzero and finite"));
    }
    if (norm - 1.0).abs() > 1e-12 {
        log::warn!("contrast {a:?} has norm {norm}; rescaling to unit length");
    }
    Ok(a.iter().map(|v| v / norm).collect())
}

/// `z_i = a^T T_i` with two-sided and one-sided normal p-values.
pub fn contrast_scores(field: &ScoreField, a: &[f64]) -> Result<ContrastMap> {
    if a.len() != field.dim() {
        return Err(Error::arg(format!(
            "contrast has {} entries, scores have {} channels",
            a.len(),
            field.dim()
        )));
    }
    let a = unit_contrast(a)?;
    let z: Vec<f64> = field
        .scores()
        .chunks(field.dim())
        .map(|t| t.iter().zip(&a).map(|(x, c)| x * c).sum())
        .collect();
    Ok(ContrastMap {
        p_two: z.iter().map(|&v| (2.0 * norm_sf(v.abs())).min(1.0)).collect(),
        p_left: z.iter().map(|&v| norm_cdf(v)).collect(),
        p_right: z.iter().map(|&v| norm_sf(v)).collect(),
        contrast: a,
        z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn comp(mean: &[f64], var: &[f64]) -> GaussianComponent {
        let p = mean.len();
        let mut cov = vec![0.0; p * p];
        for i in 0..p {
            cov[i * p + i] = var[i];
        }
        GaussianComponent::new(mean.to_vec(), SpdMatrix::new(p, cov).unwrap()).unwrap()
    }

    #[test]
    fn identical_components_return_prior() {
        let cs = vec![comp(&[1.0, 2.0], &[1.0, 2.0]), comp(&[1.0, 2.0], &[1.0, 2.0])];
        let w = responsibilities(&[5.0, -3.0], &[0.3, 0.7], &cs).unwrap();
        assert!((w[0] - 0.3).abs() < 1e-15 && (w[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn univariate_responsibilities() {
        let cs = vec![comp(&[0.0], &[1.0]), comp(&[2.0], &[1.0])];
        let w = responsibilities(&[1.0], &[0.5, 0.5], &cs).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15);
        let w = responsibilities(&[0.0], &[0.5, 0.5], &cs).unwrap();
        // r(y) = 4, pi0 = 0: w1 = 1 / (1 + e^{-2}).
        let expected = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((w[0] - expected).abs() < 1e-15);
        assert!((w[0] - 0.8808).abs() < 1e-4);
        assert!(responsibilities(&[f64::NAN], &[0.5, 0.5], &cs).is_err());
    }

    #[test]
    fn extreme_separation_does_not_underflow() {
        let cs = vec![comp(&[0.0], &[1.0]), comp(&[100.0], &[1.0])];
        let w = responsibilities(&[1000.0], &[0.5, 0.5], &cs).unwrap();
        assert_eq!(w, vec![0.0, 1.0]);
        let w = responsibilities(&[50.0], &[0.5, 0.5], &cs).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn assignment_modes() {
        assert_eq!(assign(&[0.2, 0.8], Assignment::Hard), vec![0.0, 1.0]);
        assert_eq!(assign(&[0.5, 0.5], Assignment::Hard), vec![1.0, 0.0]);
        assert_eq!(assign(&[0.2, 0.8], Assignment::Soft), vec![0.2, 0.8]);
    }

    #[test]
    fn single_component_whitening() {
        let cs = vec![comp(&[1.0, -1.0], &[4.0, 9.0])];
        assert_eq!(standardize_t1(&[1.0, -1.0], &[1.0], &cs).unwrap(), vec![0.0, 0.0]);
        let t = standardize_t1(&[3.0, 2.0], &[1.0], &cs).unwrap();
        assert!((t[0] - 1.0).abs() < 1e-15 && (t[1] - 1.0).abs() < 1e-15);
        assert_eq!(standardize_t2(&[3.0, 2.0], &[1.0], &cs).unwrap(), t);
        assert_eq!(standardize_t3(&[3.0, 2.0], &[1.0], &cs).unwrap(), t);
    }

    #[test]
    fn t1_equal_covariances_half_labels() {
        let cov = SpdMatrix::new(2, vec![2.0, 0.5, 0.5, 1.0]).unwrap();
        let c1 = GaussianComponent::new(vec![1.0, 0.0], cov.clone()).unwrap();
        let c2 = GaussianComponent::new(vec![-1.0, 2.0], cov.clone()).unwrap();
        let y = [0.7, 0.3];
        let t = standardize_t1(&y, &[0.5, 0.5], &[c1, c2]).unwrap();
        let expected = cov.inv_sqrt().unwrap().as_matrix().mul_vec(&[0.7, -0.7]);
        assert!((t[0] - expected[0]).abs() < 1e-14 && (t[1] - expected[1]).abs() < 1e-14);
    }

    #[test]
    fn t2_and_t3_scalar_cases() {
        let cs = vec![comp(&[0.0], &[4.0]), comp(&[0.0], &[1.0])];
        let t = standardize_t2(&[1.0], &[0.5, 0.5], &cs).unwrap();
        assert!((t[0] - 1.0 / 2.5f64.sqrt()).abs() < 1e-15);
        assert!((t[0] - 0.6325).abs() < 1e-4);
        let cs = vec![comp(&[0.0], &[1.0]), comp(&[2.0], &[1.0])];
        let t = standardize_t3(&[1.0], &[0.5, 0.5], &cs).unwrap();
        assert_eq!(t, vec![0.0]);
        // Marginal variance is 2: y = 3 maps to 2 / sqrt(2).
        let t = standardize_t3(&[3.0], &[0.5, 0.5], &cs).unwrap();
        assert!((t[0] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn closed_form_two_by_two_inverse_root() {
        let m = [2.0, 0.7, 0.7, 1.5];
        let mut out = [0.0; 4];
        small_inv_sqrt(2, &m, &mut out).unwrap();
        let reference = SpdMatrix::new(2, m.to_vec()).unwrap().inv_sqrt().unwrap();
        for (a, b) in out.iter().zip(reference.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(small_inv_sqrt(2, &[1.0, 1.0, 1.0, 1.0], &mut out).is_err());
    }

    #[test]
    fn contrast_and_p_values() {
        let grid = VoxelGrid::new(3, 1).unwrap();
        let s = 3.0 * 2f64.sqrt();
        let field = ScoreField {
            grid,
            dim: 2,
            scores: vec![3.0, 3.0, s, -s, 0.0, -2.3263478740408408 * 2f64.sqrt()],
            method: Transform::T1,
            assignment: Assignment::Soft,
        };
        let a = [1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt()];
        let m = contrast_scores(&field, &a).unwrap();
        assert!(m.z[0].abs() < 1e-15);
        assert!((m.p_two[0] - 1.0).abs() < 1e-15);
        assert!((m.z[1] - 6.0).abs() < 1e-12);
        assert!(m.p_left[1] > 1.0 - 1e-8);
        assert!((m.z[2] - 2.3263478740408408).abs() < 1e-12);
        // Unnormalized contrast is rescaled.
        let m2 = contrast_scores(&field, &[2.0, -2.0]).unwrap();
        assert!((m2.z[1] - 6.0).abs() < 1e-12);
        assert!(contrast_scores(&field, &[0.0, 0.0]).is_err());
        assert!(contrast_scores(&field, &[1.0]).is_err());

        let field1 = ScoreField {
            grid: VoxelGrid::new(1, 1).unwrap(),
            dim: 1,
            scores: vec![-2.3263478740408408],
            method: Transform::T1,
            assignment: Assignment::Soft,
        };
        let m = contrast_scores(&field1, &[1.0]).unwrap();
        assert!((m.p_left[0] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn template_rows_renormalized() {
        let g = VoxelGrid::new(2, 1).unwrap();
        let t = TemplateStack::new(g, 2, vec![1.0, 3.0, 2.0, 2.0]).unwrap();
        assert_eq!(t.row(0), &[0.25, 0.75]);
        assert!(TemplateStack::new(g, 2, vec![0.0, 0.0, 1.0, 1.0]).is_err());
        assert!(TemplateStack::new(g, 2, vec![-1.0, 2.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn field_rejects_grid_mismatch() {
        let model = MixtureModel::new(
            vec![comp(&[0.0], &[1.0]), comp(&[1.0], &[1.0])],
            Weighting::Spatial(vec![0.5, 0.5]),
        )
        .unwrap();
        let g = VoxelGrid::new(2, 1).unwrap();
        let t = TemplateStack::new(VoxelGrid::new(3, 1).unwrap(), 2, vec![1.0; 6]).unwrap();
        let r = standardize_field(&[0.0, 1.0], g, &model, Some(&t), Transform::T1, Assignment::Soft);
        assert!(matches!(r, Err(Error::Argument(_))));
        let r = standardize_field(&[0.0, 1.0], g, &model, None, Transform::T1, Assignment::Soft);
        assert!(r.is_err());
    }

    #[test]
    fn model_validation() {
        let c = comp(&[0.0], &[1.0]);
        assert!(MixtureModel::new(vec![], Weighting::Global(vec![])).is_err());
        assert!(MixtureModel::new(vec![c.clone(), c.clone()], Weighting::Global(vec![0.5, 0.6])).is_err());
        assert!(MixtureModel::new(vec![c.clone(), c.clone()], Weighting::Global(vec![1.0, 0.0])).is_err());
        assert!(MixtureModel::new(vec![c.clone(), comp(&[0.0, 0.0], &[1.0, 1.0])], Weighting::Global(vec![0.5, 0.5])).is_err());
    }
}
