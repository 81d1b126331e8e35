//! Simulation protocols comparing estimators end to end: relative size
//! along the univariate ramp, parameter-recovery tables on the phantom, and
//! voxelwise calibration maps.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fit::{align_labels, fit, mixing_matrix, param_error, FitConfig};
use crate::mixture::{standardize_field, Assignment, MixtureModel, PreparedMixture, TemplateStack, Transform, VoxelGrid};
use crate::rng::{derive_seed, domain, StreamRng, MC_BLOCK};
use crate::synth::{generate, sample_mixture, univariate_setting_n, Scenario, ScenarioSpec};
use crate::tailmc::{RelativeSize, TailSpec, VoxelSimulator};

/// Source of the parameters used for standardization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Estimator {
    /// True parameters.
    Oracle,
    /// Classical EM with global mixing weights.
    Gmm,
    /// Template-weighted EM.
    Sgmm,
    /// Template-weighted EM with Huber-weighted M-steps.
    RbSgmm,
}

impl Estimator {
    pub fn config(&self, k: usize, seed: u64) -> Option<FitConfig> {
        let cfg = match self {
            Estimator::Oracle => return None,
            Estimator::Gmm => FitConfig::gmm(k),
            Estimator::Sgmm => FitConfig::sgmm(k),
            Estimator::RbSgmm => FitConfig::rb_sgmm(k),
        };
        Some(FitConfig { seed, ..cfg })
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::Oracle => "oracle",
            Estimator::Gmm => "gmm",
            Estimator::Sgmm => "sgmm",
            Estimator::RbSgmm => "rb-sgmm",
        })
    }
}

/// Fits `est` (or returns the truth for the oracle). GMM components are
/// reordered to best match the truth.
pub fn estimate(
    est: Estimator,
    y: &[f64],
    truth: &MixtureModel,
    templates: &TemplateStack,
    seed: u64,
) -> Result<MixtureModel> {
    match est.config(truth.k(), seed) {
        None => Ok(truth.clone()),
        Some(cfg) => {
            let t = if cfg.spatial { Some(templates) } else { None };
            let res = fit(y, truth.dim(), t, &cfg)?;
            if cfg.spatial {
                Ok(res.model)
            } else {
                align_labels(&res.model, truth)
            }
        }
    }
}

/// Score variants evaluated along the univariate ramp.
pub const UNIVARIATE_SCORES: [(Transform, Assignment); 4] = [
    (Transform::T1, Assignment::Soft),
    (Transform::T2, Assignment::Soft),
    (Transform::T3, Assignment::Soft),
    (Transform::T1, Assignment::Hard),
];

#[derive(Debug, Clone, PartialEq)]
pub struct LocationCurve {
    pub estimator: Estimator,
    pub transform: Transform,
    pub assignment: Assignment,
    pub sizes: Vec<RelativeSize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnivariateStudy {
    pub locations: Vec<f64>,
    pub curves: Vec<LocationCurve>,
    /// Repetitions dropped per estimator because the fit failed.
    pub failed_fits: Vec<(Estimator, u64)>,
}

impl UnivariateStudy {
    pub fn curve(&self, est: Estimator, transform: Transform, assignment: Assignment) -> Option<&LocationCurve> {
        self.curves
            .iter()
            .find(|c| c.estimator == est && c.transform == transform && c.assignment == assignment)
    }
}

/// Relative size at every location of the univariate ramp.
///
/// Each repetition simulates all `n` locations, fits every estimator to that
/// data set and standardizes it with every score variant; location `i`
/// rejects when its score falls in the tail of `spec` (the contrast is the
/// scalar 1). `spec.reps()` is the number of repetitions.
pub fn univariate_study(n: usize, estimators: &[Estimator], spec: &TailSpec) -> Result<UnivariateStudy> {
    if spec.contrast().len() != 1 {
        return Err(Error::arg("univariate study uses a scalar contrast"));
    }
    let (templates, truth) = univariate_setting_n(n)?;
    let grid = templates.grid();
    let n_est = estimators.len();
    let n_sc = UNIVARIATE_SCORES.len();
    let width = n_est * n_sc * n;
    let sign = spec.contrast()[0];
    // counts[e][s][i], then per-estimator completed repetitions.
    let (counts, done) = (0..spec.reps())
        .into_par_iter()
        .map(|r| -> Result<(Vec<u32>, Vec<u64>)> {
            let seed = derive_seed(&[spec.seed(), r]);
            let (y, _) = sample_mixture(&truth, Some(&templates), grid, seed)?;
            let mut counts = vec![0u32; width];
            let mut done = vec![0u64; n_est];
            for (e, &est) in estimators.iter().enumerate() {
                let model = match estimate(est, &y, &truth, &templates, seed) {
                    Ok(m) => m,
                    Err(err) => {
                        log::debug!("repetition {r}: {est} fit failed: {err}");
                        continue;
                    }
                };
                done[e] = 1;
                for (s, &(tr, asg)) in UNIVARIATE_SCORES.iter().enumerate() {
                    let field = standardize_field(&y, grid, &model, Some(&templates), tr, asg)?;
                    let base = (e * n_sc + s) * n;
                    for (i, z) in field.scores().iter().enumerate() {
                        if spec.rejects(sign * z) {
                            counts[base + i] += 1;
                        }
                    }
                }
            }
            Ok((counts, done))
        })
        .try_reduce(
            || (vec![0u32; width], vec![0u64; n_est]),
            |(mut a, mut da), (b, db)| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                da.iter_mut().zip(db).for_each(|(x, y)| *x += y);
                Ok((a, da))
            },
        )?;
    let mut curves = Vec::new();
    for (e, &est) in estimators.iter().enumerate() {
        for (s, &(tr, asg)) in UNIVARIATE_SCORES.iter().enumerate() {
            let base = (e * n_sc + s) * n;
            let sizes = (0..n)
                .map(|i| RelativeSize::from_counts(counts[base + i] as u64, done[e].max(1), spec.alpha()))
                .collect();
            curves.push(LocationCurve { estimator: est, transform: tr, assignment: asg, sizes });
        }
    }
    Ok(UnivariateStudy {
        locations: crate::synth::unit_locations(n),
        curves,
        failed_fits: estimators.iter().zip(done).map(|(&e, d)| (e, spec.reps() - d)).collect(),
    })
}

/// Mean and standard error of one error norm over repetitions.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSummary {
    pub parameter: String,
    pub mean: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table1Row {
    pub estimator: Estimator,
    pub entries: Vec<ErrorSummary>,
    pub failures: u64,
}

impl Table1Row {
    pub fn get(&self, parameter: &str) -> Option<&ErrorSummary> {
        self.entries.iter().find(|e| e.parameter == parameter)
    }
}

/// Parameter-recovery errors of each estimator over `reps` phantoms.
pub fn table1_study(
    scenario: Scenario,
    grid: VoxelGrid,
    estimators: &[Estimator],
    reps: u64,
    seed: u64,
) -> Result<Vec<Table1Row>> {
    let mut samples: Vec<Vec<Vec<f64>>> = vec![Vec::new(); estimators.len()];
    let mut names: Vec<String> = Vec::new();
    let mut failures = vec![0u64; estimators.len()];
    for r in 0..reps {
        let spec = ScenarioSpec::with_grid(scenario, grid, derive_seed(&[seed, r]))?;
        let (y, truth) = generate(&spec)?;
        for (e, &est) in estimators.iter().enumerate() {
            let model = match estimate(est, &y, &truth.model, &spec.templates, spec.seed) {
                Ok(m) => m,
                Err(err) => {
                    log::warn!("repetition {r}: {est} fit failed: {err}");
                    failures[e] += 1;
                    continue;
                }
            };
            let err = param_error(&model, &truth.model, Some(&spec.templates), grid.len())?;
            let entries = err.entries();
            if names.is_empty() {
                names = entries.iter().map(|(n, _)| n.clone()).collect();
            }
            samples[e].push(entries.into_iter().map(|(_, v)| v).collect());
        }
    }
    Ok(estimators
        .iter()
        .enumerate()
        .map(|(e, &est)| {
            let rows = &samples[e];
            let m = rows.len() as f64;
            let entries = names
                .iter()
                .enumerate()
                .map(|(j, name)| {
                    let mean = rows.iter().map(|r| r[j]).sum::<f64>() / m;
                    let var = if rows.len() > 1 {
                        rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (m - 1.0)
                    } else {
                        0.0
                    };
                    ErrorSummary { parameter: name.clone(), mean, se: (var / m).sqrt() }
                })
                .collect();
            Table1Row { estimator: est, entries, failures: failures[e] }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationMap {
    pub estimator: Estimator,
    pub grid: VoxelGrid,
    pub fitted: MixtureModel,
    pub sizes: Vec<RelativeSize>,
}

impl CalibrationMap {
    /// Fraction of voxels with `lo <= R <= 1 + 3 SE`.
    pub fn fraction_calibrated(&self, lo: f64) -> f64 {
        let ok = self.sizes.iter().filter(|s| s.r >= lo && s.r <= 1.0 + 3.0 * s.se).count();
        ok as f64 / self.sizes.len() as f64
    }

    pub fn fraction_below(&self, x: f64) -> f64 {
        self.sizes.iter().filter(|s| s.r < x).count() as f64 / self.sizes.len() as f64
    }
}

/// Voxelwise relative size when parameters are estimated once from a
/// background-only phantom.
///
/// Each estimator is fitted to one simulated phantom. Every voxel then gets
/// `spec.reps()` fresh observations from the true model at that voxel,
/// standardized with the fitted parameters and that voxel's fitted mixing
/// probabilities.
pub fn calibration_map(
    grid: VoxelGrid,
    estimators: &[Estimator],
    method: Transform,
    assignment: Assignment,
    spec: &TailSpec,
) -> Result<Vec<CalibrationMap>> {
    let phantom = ScenarioSpec::with_grid(Scenario::A, grid, spec.seed())?;
    let (y, truth) = generate(&phantom)?;
    let n = grid.len();
    let k = truth.model.k();
    let true_pi = mixing_matrix(&truth.model, Some(&phantom.templates), n)?;
    let gen = PreparedMixture::new(truth.model.components())?;
    let blocks = spec.reps().div_ceil(MC_BLOCK);
    estimators
        .iter()
        .map(|&est| {
            let fitted = estimate(est, &y, &truth.model, &phantom.templates, spec.seed())?;
            let est_pi = mixing_matrix(&fitted, Some(&phantom.templates), n)?;
            let mix = PreparedMixture::new(fitted.components())?;
            let sizes = (0..n)
                .into_par_iter()
                .map(|i| -> Result<RelativeSize> {
                    let sim = VoxelSimulator::new(
                        &gen,
                        &true_pi[i * k..(i + 1) * k],
                        &mix,
                        &est_pi[i * k..(i + 1) * k],
                        method,
                        assignment,
                    )?;
                    let mut total = 0;
                    for b in 0..blocks {
                        let len = MC_BLOCK.min(spec.reps() - b * MC_BLOCK);
                        let mut rng = StreamRng::new(spec.seed(), domain::VOXEL_MC, i as u64 * blocks + b);
                        total += sim.count_rejections(spec, &mut rng, len)?;
                    }
                    Ok(RelativeSize::from_counts(total, spec.reps(), spec.alpha()))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CalibrationMap { estimator: est, grid, fitted, sizes })
        })
        .collect()
}
