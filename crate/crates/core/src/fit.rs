//! EM estimation of Gaussian mixtures with global or template-driven mixing
//! weights, and the Huber-weighted robust variant.
//!
//! Reductions over voxels run on fixed 4096-voxel chunks whose partial sums
//! are combined in chunk order, so fitted parameters do not depend on the
//! number of worker threads.

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mixture::{
    spatial_weights_row, GaussianComponent, MixtureModel, PreparedMixture,
    Responsibilities, TemplateStack, Weighting,
};
use crate::rng::{domain, StreamRng};
use crate::spdcore::{huber_constant, jacobi_eigen, spectral_norm, Matrix, SpdMatrix};

const CHUNK: usize = 4096;

fn chunked<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync,
{
    (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| f(c * CHUNK..((c + 1) * CHUNK).min(n)))
        .collect()
}

/// How starting values are chosen.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum InitScheme {
    /// Template moments for spatial fits, quantile splits for univariate
    /// data and farthest-point seeding otherwise.
    #[default]
    Auto,
    /// `b`-weighted means and covariances, uniform weights.
    TemplateMoments,
    /// Equal-count groups of the sorted univariate data.
    QuantileSplit,
    /// Seeds picked by repeated farthest-point selection from a random first
    /// point, followed by a nearest-seed partition.
    FarthestPoint,
    Explicit(MixtureModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub k: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub huber_q: f64,
    pub robust: bool,
    pub spatial: bool,
    pub init: InitScheme,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            k: 3,
            tol: 1e-5,
            max_iter: 1000,
            huber_q: 0.99,
            robust: false,
            spatial: false,
            init: InitScheme::Auto,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn gmm(k: usize) -> Self {
        FitConfig { k, ..Default::default() }
    }

    pub fn sgmm(k: usize) -> Self {
        FitConfig { k, spatial: true, ..Default::default() }
    }

    pub fn rb_sgmm(k: usize) -> Self {
        FitConfig { k, spatial: true, robust: true, ..Default::default() }
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::arg("number of classes must be positive"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::arg("tolerance must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::arg("max_iter must be at least 1"));
        }
        if !(self.huber_q > 0.5 && self.huber_q < 1.0) {
            return Err(Error::arg("huber quantile must lie in (0.5, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub model: MixtureModel,
    pub responsibilities: Responsibilities,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub loglik_decreases: usize,
    pub restarted: bool,
    pub warnings: Vec<String>,
}

fn check_obs(y: &[f64], p: usize) -> Result<usize> {
    if p == 0 || !y.len().is_multiple_of(p) {
        return Err(Error::arg(format!("{} values do not form rows of {p}", y.len())));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("observation {} channel {}", i / p, i % p)));
    }
    Ok(y.len() / p)
}

/// `pi_ik = gamma_k b_ik / sum_j gamma_j b_ij` as an `n x K` row-major
/// matrix.
pub fn spatial_weights(gamma: &[f64], b: &TemplateStack) -> Result<Vec<f64>> {
    if gamma.len() != b.k() {
        return Err(Error::arg("gamma and templates differ in class count"));
    }
    let k = b.k();
    let mut out = vec![0.0; b.len() * k];
    for (i, row) in out.chunks_mut(k).enumerate() {
        spatial_weights_row(gamma, b.row(i), row).map_err(|_| Error::DegenerateTemplate { voxel: i })?;
    }
    Ok(out)
}

/// Membership weights and the log-likelihood of the current model.
pub fn e_step(
    y: &[f64],
    model: &MixtureModel,
    templates: Option<&TemplateStack>,
) -> Result<(Responsibilities, f64)> {
    let p = model.dim();
    let k = model.k();
    let n = check_obs(y, p)?;
    if model.weighting().is_spatial() {
        let t = templates.ok_or_else(|| Error::arg("spatial model requires templates"))?;
        if t.len() != n || t.k() != k {
            return Err(Error::arg("templates do not match the observations"));
        }
    }
    let mix = PreparedMixture::new(model.components())?;
    let mut w = vec![0.0; n * k];
    let parts: Vec<Result<f64>> = w
        .par_chunks_mut(CHUNK * k)
        .enumerate()
        .map(|(c, block)| {
            let mut log_pi = vec![0.0; k];
            let mut ll = 0.0;
            for (j, row) in block.chunks_mut(k).enumerate() {
                let i = c * CHUNK + j;
                model.prior_row(i, templates, &mut log_pi)?;
                log_pi.iter_mut().for_each(|v| *v = v.ln());
                ll += mix.responsibilities_log_prior(&y[i * p..(i + 1) * p], &log_pi, row);
            }
            Ok(ll)
        })
        .collect();
    let mut ll = 0.0;
    for part in parts {
        ll += part?;
    }
    if !ll.is_finite() {
        return Err(Error::NonFinite("log-likelihood".into()));
    }
    Ok((Responsibilities::from_raw(k, w), ll))
}

/// `gamma_k <- sum_i w_ik / sum_i [b_ik / sum_j gamma_j b_ij]`, then
/// renormalized to the simplex.
pub fn update_gamma(w: &Responsibilities, gamma_prev: &[f64], b: &TemplateStack) -> Result<Vec<f64>> {
    let k = b.k();
    if w.k() != k || gamma_prev.len() != k || w.len() != b.len() {
        return Err(Error::arg("responsibilities, gamma and templates disagree in shape"));
    }
    let parts = chunked(b.len(), |range| -> Result<Vec<f64>> {
        let mut acc = vec![0.0; 2 * k];
        for i in range {
            let row = b.row(i);
            let s: f64 = row.iter().zip(gamma_prev).map(|(bk, g)| bk * g).sum();
            if !(s > 0.0) {
                return Err(Error::DegenerateTemplate { voxel: i });
            }
            for j in 0..k {
                acc[j] += w.row(i)[j];
                acc[k + j] += row[j] / s;
            }
        }
        Ok(acc)
    });
    let mut acc = vec![0.0; 2 * k];
    for part in parts {
        for (a, v) in acc.iter_mut().zip(part?) {
            *a += v;
        }
    }
    let mut gamma: Vec<f64> = (0..k)
        .map(|j| {
            if acc[k + j] > 0.0 {
                Ok(acc[j] / acc[k + j])
            } else {
                Err(Error::DegenerateCluster { component: j, reason: "template column is identically zero".into() })
            }
        })
        .collect::<Result<_>>()?;
    let total: f64 = gamma.iter().sum();
    gamma.iter_mut().for_each(|g| *g /= total);
    for (j, g) in gamma.iter().enumerate() {
        if !(*g > 0.0) {
            return Err(Error::DegenerateCluster { component: j, reason: "template weight vanished".into() });
        }
    }
    Ok(gamma)
}

/// Huber weight `u(s) = min(s, k1) / s`, with `u(0) = 1`.
#[inline]
pub fn huber_weight(s: f64, k1: f64) -> f64 {
    if s <= k1 {
        1.0
    } else {
        k1 / s
    }
}

fn weighted_mean(y: &[f64], p: usize, k: usize, weight: impl Fn(usize, usize) -> f64 + Sync) -> (Vec<f64>, Vec<f64>) {
    let n = y.len() / p;
    let parts = chunked(n, |range| {
        let mut acc = vec![0.0; k * (p + 1)];
        for i in range {
            let yi = &y[i * p..(i + 1) * p];
            for c in 0..k {
                let v = weight(i, c);
                acc[c] += v;
                for j in 0..p {
                    acc[k + c * p + j] += v * yi[j];
                }
            }
        }
        acc
    });
    let mut acc = vec![0.0; k * (p + 1)];
    for part in parts {
        for (a, v) in acc.iter_mut().zip(part) {
            *a += v;
        }
    }
    let mass = acc[..k].to_vec();
    let mut means = acc[k..].to_vec();
    for c in 0..k {
        for j in 0..p {
            means[c * p + j] /= mass[c];
        }
    }
    (mass, means)
}

fn weighted_scatter(
    y: &[f64],
    p: usize,
    k: usize,
    means: &[f64],
    weight: impl Fn(usize, usize) -> f64 + Sync,
) -> (Vec<f64>, Vec<f64>) {
    let n = y.len() / p;
    let pp = p * p;
    let parts = chunked(n, |range| {
        let mut acc = vec![0.0; k * (pp + 1)];
        let mut d = vec![0.0; p];
        for i in range {
            let yi = &y[i * p..(i + 1) * p];
            for c in 0..k {
                let v = weight(i, c);
                if v == 0.0 {
                    continue;
                }
                acc[c] += v;
                for j in 0..p {
                    d[j] = yi[j] - means[c * p + j];
                }
                let s = &mut acc[k + c * pp..k + (c + 1) * pp];
                for a in 0..p {
                    for b in a..p {
                        s[a * p + b] += v * d[a] * d[b];
                    }
                }
            }
        }
        acc
    });
    let mut acc = vec![0.0; k * (pp + 1)];
    for part in parts {
        for (a, v) in acc.iter_mut().zip(part) {
            *a += v;
        }
    }
    let mass = acc[..k].to_vec();
    let mut scatter = acc[k..].to_vec();
    for c in 0..k {
        let s = &mut scatter[c * pp..(c + 1) * pp];
        for a in 0..p {
            for b in a..p {
                s[a * p + b] /= mass[c];
                s[b * p + a] = s[a * p + b];
            }
        }
    }
    (mass, scatter)
}

fn check_mass(mass: &[f64], p: usize) -> Result<()> {
    let min_mass = (p + 1) as f64;
    match mass.iter().position(|m| !(*m >= min_mass)) {
        Some(c) => Err(Error::DegenerateCluster {
            component: c,
            reason: format!("effective weight {} below {min_mass}", mass[c]),
        }),
        None => Ok(()),
    }
}

fn build_components(p: usize, mass: &[f64], means: &[f64], covs: &[f64]) -> Result<Vec<GaussianComponent>> {
    let pp = p * p;
    check_mass(mass, p)?;
    (0..mass.len())
        .map(|c| {
            let cov = &covs[c * pp..(c + 1) * pp];
            let m = Matrix::from_row_major(p, cov.to_vec())?;
            let trace: f64 = (0..p).map(|j| cov[j * p + j]).sum();
            let eig = jacobi_eigen(&m);
            let floor = 1e-10 * trace / p as f64;
            if !(trace > 0.0) || !(eig.values[0] >= floor) {
                return Err(Error::DegenerateCluster {
                    component: c,
                    reason: format!("covariance eigenvalue {} below floor {floor}", eig.values[0]),
                });
            }
            GaussianComponent::new(means[c * p..(c + 1) * p].to_vec(), SpdMatrix::new(p, cov.to_vec())?)
        })
        .collect()
}

/// Weighted means and (divisor `sum w`) covariances.
pub fn m_step_plain(y: &[f64], p: usize, w: &Responsibilities) -> Result<Vec<GaussianComponent>> {
    let n = check_obs(y, p)?;
    if w.len() != n {
        return Err(Error::arg("responsibilities do not match the observations"));
    }
    let k = w.k();
    let (mass, means) = weighted_mean(y, p, k, |i, c| w.row(i)[c]);
    check_mass(&mass, p)?;
    let (_, covs) = weighted_scatter(y, p, k, &means, |i, c| w.row(i)[c]);
    build_components(p, &mass, &means, &covs)
}

/// Huber-weighted M-step.
///
/// Means use weights `w u(r1)` with radii `r1` from the previous means and
/// covariances; covariances use weights `w u(r2)^2` with radii `r2` from the
/// new means and previous covariances, normalized by `sum w u(r2)^2`.
pub fn m_step_robust(
    y: &[f64],
    p: usize,
    w: &Responsibilities,
    prev: &[GaussianComponent],
    k1: f64,
) -> Result<Vec<GaussianComponent>> {
    let n = check_obs(y, p)?;
    let k = w.k();
    if w.len() != n || prev.len() != k {
        return Err(Error::arg("responsibilities, components and observations disagree"));
    }
    let old = PreparedMixture::new(prev)?;
    let (mass1, means) = weighted_mean(y, p, k, |i, c| {
        let r = old.mahalanobis_sq(c, &y[i * p..(i + 1) * p]).sqrt();
        w.row(i)[c] * huber_weight(r, k1)
    });
    check_mass(&mass1, p)?;
    let shifted: Vec<GaussianComponent> = prev
        .iter()
        .enumerate()
        .map(|(c, comp)| GaussianComponent::new(means[c * p..(c + 1) * p].to_vec(), comp.cov().clone()))
        .collect::<Result<_>>()?;
    let mid = PreparedMixture::new(&shifted)?;
    let (mass2, covs) = weighted_scatter(y, p, k, &means, |i, c| {
        let r = mid.mahalanobis_sq(c, &y[i * p..(i + 1) * p]).sqrt();
        let u = huber_weight(r, k1);
        w.row(i)[c] * u * u
    });
    build_components(p, &mass2, &means, &covs)
}

fn moments_from_weights(y: &[f64], p: usize, k: usize, weight: impl Fn(usize, usize) -> f64 + Sync) -> Result<Vec<GaussianComponent>> {
    let (mass, means) = weighted_mean(y, p, k, &weight);
    let (_, covs) = weighted_scatter(y, p, k, &means, &weight);
    build_components(p, &mass, &means, &covs)
}

fn template_moments(y: &[f64], p: usize, t: &TemplateStack) -> Result<Vec<GaussianComponent>> {
    moments_from_weights(y, p, t.k(), |i, c| t.row(i)[c])
}

fn quantile_split(y: &[f64], k: usize) -> Result<Vec<GaussianComponent>> {
    let n = y.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| y[a].total_cmp(&y[b]));
    let mut group = vec![0usize; n];
    for (rank, &i) in idx.iter().enumerate() {
        group[i] = rank * k / n;
    }
    moments_from_weights(y, 1, k, |i, c| if group[i] == c { 1.0 } else { 0.0 })
}

fn farthest_point(y: &[f64], p: usize, k: usize, seed: u64) -> Result<Vec<GaussianComponent>> {
    let n = y.len() / p;
    let mut rng = StreamRng::new(seed, domain::FIT_INIT, 0);
    let first = rng.random_range(0..n);
    let dist2 = |i: usize, s: usize| -> f64 {
        (0..p).map(|j| (y[i * p + j] - y[s * p + j]).powi(2)).sum()
    };
    let mut seeds = vec![first];
    let mut nearest: Vec<f64> = (0..n).map(|i| dist2(i, first)).collect();
    while seeds.len() < k {
        let next = (0..n).fold(0, |best, i| if nearest[i] > nearest[best] { i } else { best });
        seeds.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(dist2(i, next));
        }
    }
    let label: Vec<usize> = (0..n)
        .map(|i| (0..k).fold(0, |best, c| if dist2(i, seeds[c]) < dist2(i, seeds[best]) { c } else { best }))
        .collect();
    moments_from_weights(y, p, k, |i, c| if label[i] == c { 1.0 } else { 0.0 })
}

fn initial_model(y: &[f64], p: usize, templates: Option<&TemplateStack>, cfg: &FitConfig) -> Result<MixtureModel> {
    let k = cfg.k;
    let uniform = vec![1.0 / k as f64; k];
    let weighting = |w: Vec<f64>| if cfg.spatial { Weighting::Spatial(w) } else { Weighting::Global(w) };
    let comps = match &cfg.init {
        InitScheme::Explicit(m) => {
            if m.k() != k || m.dim() != p {
                return Err(Error::arg("explicit initial model has the wrong shape"));
            }
            let w = m.weighting().values().to_vec();
            return MixtureModel::new(m.components().to_vec(), weighting(w));
        }
        InitScheme::TemplateMoments => {
            let t = templates.ok_or_else(|| Error::arg("template-moment initialization needs templates"))?;
            template_moments(y, p, t)?
        }
        InitScheme::QuantileSplit => {
            if p != 1 {
                return Err(Error::arg("quantile-split initialization needs univariate data"));
            }
            quantile_split(y, k)?
        }
        InitScheme::FarthestPoint => farthest_point(y, p, k, cfg.seed)?,
        InitScheme::Auto => {
            if cfg.spatial {
                template_moments(y, p, templates.ok_or_else(|| Error::arg("spatial fit needs templates"))?)?
            } else if p == 1 {
                quantile_split(y, k)?
            } else {
                farthest_point(y, p, k, cfg.seed)?
            }
        }
    };
    MixtureModel::new(comps, weighting(uniform))
}

fn perturb(model: &MixtureModel, seed: u64) -> Result<MixtureModel> {
    let mut rng = StreamRng::new(seed, domain::FIT_INIT, 1);
    let comps = model
        .components()
        .iter()
        .map(|c| {
            let p = c.dim();
            let mean: Vec<f64> = (0..p)
                .map(|j| {
                    let z: f64 = rng.sample(StandardNormal);
                    c.mean()[j] + 0.5 * c.cov().get(j, j).sqrt() * z
                })
                .collect();
            let cov: Vec<f64> = c.cov().as_slice().iter().map(|v| v * 1.5).collect();
            GaussianComponent::new(mean, SpdMatrix::new(p, cov)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let k = model.k() as f64;
    let uniform = vec![1.0 / k; model.k()];
    let w = match model.weighting() {
        Weighting::Global(_) => Weighting::Global(uniform),
        Weighting::Spatial(_) => Weighting::Spatial(uniform),
    };
    MixtureModel::new(comps, w)
}

/// Fits a `cfg.k`-class mixture to `n x p` row-major observations.
///
/// Each iteration runs an E-step (recording the log-likelihood), stops once
/// the relative change falls below `cfg.tol`, and otherwise updates the
/// weights (`gamma` for spatial fits, the mean responsibility otherwise)
/// followed by the plain or robust M-step. A degenerate cluster triggers
/// one restart from perturbed starting values.
pub fn fit(y: &[f64], p: usize, templates: Option<&TemplateStack>, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let n = check_obs(y, p)?;
    if n < cfg.k * (p + 1) {
        return Err(Error::arg(format!("{n} observations are too few for {} classes in {p} dimensions", cfg.k)));
    }
    if cfg.spatial {
        let t = templates.ok_or_else(|| Error::arg("spatial fits require templates"))?;
        if t.len() != n || t.k() != cfg.k {
            return Err(Error::arg(format!(
                "templates cover {} voxels with {} classes; data have {n} voxels and k = {}",
                t.len(),
                t.k(),
                cfg.k
            )));
        }
    }
    let init = initial_model(y, p, templates, cfg)?;
    match run_em(y, p, templates, cfg, init.clone()) {
        Err(Error::DegenerateCluster { component, reason }) => {
            log::warn!("cluster {component} degenerated ({reason}); restarting from perturbed values");
            let mut res = run_em(y, p, templates, cfg, perturb(&init, cfg.seed)?)?;
            res.restarted = true;
            res.warnings.insert(0, format!("restarted after cluster {component} degenerated: {reason}"));
            Ok(res)
        }
        other => other,
    }
}

fn run_em(
    y: &[f64],
    p: usize,
    templates: Option<&TemplateStack>,
    cfg: &FitConfig,
    mut model: MixtureModel,
) -> Result<FitResult> {
    let k1 = huber_constant(p, cfg.huber_q)?;
    let n = y.len() / p;
    let mut trace: Vec<f64> = Vec::new();
    let mut warnings = Vec::new();
    let mut decreases = 0;
    let mut iterations = 0;
    let mut converged = false;
    let w = loop {
        let (w, ll) = e_step(y, &model, templates)?;
        if let Some(&prev) = trace.last() {
            if ll < prev - 1e-6 {
                decreases += 1;
                warnings.push(format!("log-likelihood decreased at iteration {iterations}: {prev} -> {ll}"));
            }
            let rel = ((ll - prev) / ll).abs();
            trace.push(ll);
            if rel < cfg.tol {
                converged = true;
                break w;
            }
        } else {
            trace.push(ll);
        }
        if iterations == cfg.max_iter {
            warnings.push(format!("no convergence after {} iterations", cfg.max_iter));
            break w;
        }
        let weighting = match model.weighting() {
            Weighting::Spatial(gamma) => {
                Weighting::Spatial(update_gamma(&w, gamma, templates.expect("checked above"))?)
            }
            Weighting::Global(_) => {
                let mut pi = vec![0.0; cfg.k];
                for i in 0..n {
                    for (a, v) in pi.iter_mut().zip(w.row(i)) {
                        *a += v;
                    }
                }
                pi.iter_mut().for_each(|v| *v /= n as f64);
                for (c, v) in pi.iter().enumerate() {
                    if !(*v > 0.0) {
                        return Err(Error::DegenerateCluster { component: c, reason: "mixing weight vanished".into() });
                    }
                }
                let s: f64 = pi.iter().sum();
                pi.iter_mut().for_each(|v| *v /= s);
                Weighting::Global(pi)
            }
        };
        let comps = if cfg.robust {
            m_step_robust(y, p, &w, model.components(), k1)?
        } else {
            m_step_plain(y, p, &w)?
        };
        model = MixtureModel::new(comps, weighting)?;
        iterations += 1;
    };
    Ok(FitResult {
        model,
        responsibilities: w,
        loglik_trace: trace,
        iterations,
        converged,
        loglik_decreases: decreases,
        restarted: false,
        warnings,
    })
}

/// Error norms between an estimate and the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamError {
    /// `||mu_hat_k - mu_k||_2`.
    pub means: Vec<f64>,
    /// Spectral norm of `Sigma_hat_k - Sigma_k`.
    pub covs: Vec<f64>,
    /// Spectral norm of the `n x K` difference of mixing probabilities.
    pub pi: f64,
}

impl ParamError {
    /// Labelled values in table order: means, covariances, then `pi`.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (k, v) in self.means.iter().enumerate() {
            out.push((format!("mu{}", k + 1), *v));
        }
        for (k, v) in self.covs.iter().enumerate() {
            out.push((format!("Sigma{}", k + 1), *v));
        }
        out.push(("pi".to_string(), self.pi));
        out
    }
}

/// Mixing probabilities of every voxel as an `n x K` matrix.
pub fn mixing_matrix(model: &MixtureModel, templates: Option<&TemplateStack>, n: usize) -> Result<Vec<f64>> {
    match model.weighting() {
        Weighting::Global(pi) => Ok(pi.iter().copied().cycle().take(n * pi.len()).collect()),
        Weighting::Spatial(gamma) => {
            let t = templates.ok_or_else(|| Error::arg("spatial model requires templates"))?;
            if t.len() != n {
                return Err(Error::arg("template grid does not match n"));
            }
            spatial_weights(gamma, t)
        }
    }
}

/// Per-parameter error norms over `n` voxels.
pub fn param_error(
    est: &MixtureModel,
    truth: &MixtureModel,
    templates: Option<&TemplateStack>,
    n: usize,
) -> Result<ParamError> {
    if est.k() != truth.k() || est.dim() != truth.dim() {
        return Err(Error::arg(format!(
            "models differ in shape: K {} vs {}, p {} vs {}",
            est.k(),
            truth.k(),
            est.dim(),
            truth.dim()
        )));
    }
    let p = est.dim();
    let k = est.k();
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for (a, b) in est.components().iter().zip(truth.components()) {
        means.push(a.mean().iter().zip(b.mean()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt());
        let d: Vec<f64> = a.cov().as_slice().iter().zip(b.cov().as_slice()).map(|(x, y)| x - y).collect();
        covs.push(spectral_norm(p, p, &d));
    }
    let pe = mixing_matrix(est, templates, n)?;
    let pt = mixing_matrix(truth, templates, n)?;
    let d: Vec<f64> = pe.iter().zip(&pt).map(|(x, y)| x - y).collect();
    Ok(ParamError { means, covs, pi: spectral_norm(n, k, &d) })
}

/// Reorders the components of `est` (and its weights) to the permutation
/// minimizing the summed mean distance to `truth`.
pub fn align_labels(est: &MixtureModel, truth: &MixtureModel) -> Result<MixtureModel> {
    let k = est.k();
    if k != truth.k() || est.dim() != truth.dim() {
        return Err(Error::arg("models differ in shape"));
    }
    if k > 8 {
        return Err(Error::arg("label alignment supports at most 8 classes"));
    }
    let cost = |e: usize, t: usize| -> f64 {
        est.components()[e]
            .mean()
            .iter()
            .zip(truth.components()[t].mean())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = perm.clone();
    let mut best_cost = f64::INFINITY;
    loop {
        let c: f64 = (0..k).map(|t| cost(perm[t], t)).sum();
        if c < best_cost {
            best_cost = c;
            best = perm.clone();
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let comps = best.iter().map(|&e| est.components()[e].clone()).collect();
    let vals: Vec<f64> = best.iter().map(|&e| est.weighting().values()[e]).collect();
    let w = match est.weighting() {
        Weighting::Global(_) => Weighting::Global(vals),
        Weighting::Spatial(_) => Weighting::Spatial(vals),
    };
    MixtureModel::new(comps, w)
}

fn next_permutation(v: &mut [usize]) -> bool {
    let n = v.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::VoxelGrid;

    fn resp(k: usize, v: Vec<f64>) -> Responsibilities {
        Responsibilities::from_raw(k, v)
    }

    #[test]
    fn spatial_weight_examples() {
        let g = VoxelGrid::new(2, 1).unwrap();
        let t = TemplateStack::new(g, 2, vec![0.5, 0.5, 0.9, 0.1]).unwrap();
        let pi = spatial_weights(&[0.2, 0.8], &t).unwrap();
        assert!((pi[0] - 0.2).abs() < 1e-15 && (pi[1] - 0.8).abs() < 1e-15);
        let pi = spatial_weights(&[0.5, 0.5], &t).unwrap();
        assert_eq!(&pi[2..], &[0.9, 0.1]);
        let t0 = TemplateStack::new(g, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(matches!(spatial_weights(&[0.0, 1.0], &t0), Err(Error::DegenerateTemplate { voxel: 0 })));
    }

    #[test]
    fn gamma_single_class_and_constant_templates() {
        let g = VoxelGrid::new(3, 1).unwrap();
        let t = TemplateStack::new(g, 1, vec![1.0; 3]).unwrap();
        assert_eq!(update_gamma(&resp(1, vec![1.0; 3]), &[1.0], &t).unwrap(), vec![1.0]);
        let t = TemplateStack::new(g, 2, vec![0.3, 0.7, 0.3, 0.7, 0.3, 0.7]).unwrap();
        let w = resp(2, vec![0.9, 0.1, 0.2, 0.8, 0.4, 0.6]);
        let gamma = update_gamma(&w, &[0.5, 0.5], &t).unwrap();
        // Constant templates: the update reduces to mean responsibilities
        // once mapped through pi = gamma b / sum gamma b.
        let pi = spatial_weights(&gamma, &t).unwrap();
        assert!((pi[0] - 0.5).abs() < 1e-12 && (pi[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn huber_weights() {
        assert_eq!(huber_weight(0.0, 3.0), 1.0);
        assert_eq!(huber_weight(3.0, 3.0), 1.0);
        assert_eq!(huber_weight(6.0, 3.0), 0.5);
    }

    #[test]
    fn plain_m_step_moments() {
        let y = [1.0, 2.0, 3.0, 4.0, 10.0, 11.0, 12.0, 13.0];
        let w = resp(2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let c = m_step_plain(&y, 1, &w).unwrap();
        assert!((c[0].mean()[0] - 2.5).abs() < 1e-15);
        assert!((c[0].cov().get(0, 0) - 1.25).abs() < 1e-15);
        assert!((c[1].mean()[0] - 11.5).abs() < 1e-15);
        let w = resp(2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(m_step_plain(&y, 1, &w), Err(Error::DegenerateCluster { component: 1, .. })));
    }

    #[test]
    fn param_error_examples() {
        let c = |m: Vec<f64>| GaussianComponent::new(m, SpdMatrix::identity(2)).unwrap();
        let truth = MixtureModel::new(vec![c(vec![0.0, 0.0]), c(vec![1.0, 1.0])], Weighting::Global(vec![0.5, 0.5])).unwrap();
        let e = param_error(&truth, &truth, None, 10).unwrap();
        assert!(e.means.iter().chain(&e.covs).all(|v| *v == 0.0) && e.pi == 0.0);
        let est = MixtureModel::new(vec![c(vec![3.0, 4.0]), c(vec![1.0, 1.0])], Weighting::Global(vec![0.6, 0.4])).unwrap();
        let e = param_error(&est, &truth, None, 4).unwrap();
        assert!((e.means[0] - 5.0).abs() < 1e-15);
        // Rows (0.1, -0.1) repeated 4 times: rank one, norm 2 * sqrt(0.02).
        assert!((e.pi - 2.0 * 0.02f64.sqrt()).abs() < 1e-12);
        let three = MixtureModel::new(vec![c(vec![0.0, 0.0]); 3], Weighting::Global(vec![0.2, 0.3, 0.5])).unwrap();
        assert!(param_error(&three, &truth, None, 4).is_err());
    }

    #[test]
    fn label_alignment() {
        let c = |m: f64| GaussianComponent::new(vec![m], SpdMatrix::identity(1)).unwrap();
        let truth = MixtureModel::new(vec![c(0.0), c(5.0), c(10.0)], Weighting::Global(vec![0.2, 0.3, 0.5])).unwrap();
        let est = MixtureModel::new(vec![c(9.8), c(0.1), c(5.2)], Weighting::Global(vec![0.5, 0.2, 0.3])).unwrap();
        let a = align_labels(&est, &truth).unwrap();
        assert_eq!(a.components()[0].mean(), &[0.1]);
        assert_eq!(a.components()[2].mean(), &[9.8]);
        assert_eq!(a.weighting().values(), &[0.2, 0.3, 0.5]);
    }

    #[test]
    fn config_validation() {
        let y = vec![0.0; 20];
        assert!(fit(&y, 1, None, &FitConfig { tol: 0.0, ..FitConfig::gmm(2) }).is_err());
        assert!(fit(&y, 1, None, &FitConfig { huber_q: 0.4, ..FitConfig::gmm(2) }).is_err());
        assert!(fit(&y, 1, None, &FitConfig::sgmm(2)).is_err());
        assert!(fit(&y[..3], 1, None, &FitConfig::gmm(2)).is_err());
    }
}
