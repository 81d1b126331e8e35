//! Synthetic data: the univariate logistic-ramp setting, a bivariate
//! three-tissue phantom on concentric templates, and circular lesions.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mixture::{GaussianComponent, MixtureModel, PreparedMixture, TemplateStack, VoxelGrid, Weighting};
use crate::rng::{domain, StreamRng};
use crate::spdcore::{mat_vec, norm_cdf, SpdMatrix};

/// Class-1 template of the univariate setting: `b_1(t) = Phi(10 t - 4)`.
pub fn ramp_b1(t: f64) -> f64 {
    norm_cdf(10.0 * t - 4.0)
}

/// `n` equally spaced locations on `[0, 1]`.
pub fn unit_locations(n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// Two-class univariate setting over 1000 locations: templates
/// `b_1 = Phi(10 t - 4)`, `b_2 = 1 - b_1`; `gamma = (0.2, 0.8)`,
/// `mu = (0.1, 0.2)`, `sigma = (0.1, 0.1)`.
pub fn univariate_setting() -> Result<(TemplateStack, MixtureModel)> {
    univariate_setting_n(1000)
}

pub fn univariate_setting_n(n: usize) -> Result<(TemplateStack, MixtureModel)> {
    let templates = synth_templates(VoxelGrid::line(n)?, TemplateStyle::Ramp)?;
    let c = |m: f64| GaussianComponent::new(vec![m], SpdMatrix::new(1, vec![0.01])?);
    let model = MixtureModel::new(vec![c(0.1)?, c(0.2)?], Weighting::Spatial(vec![0.2, 0.8]))?;
    Ok((templates, model))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TemplateStyle {
    /// Three classes: gray-matter band (class 1), white-matter exterior
    /// (class 2) and a cerebro-spinal fluid core (class 3).
    Concentric,
    /// Two classes varying along `x` as in the univariate setting.
    Ramp,
}

const CSF_RADIUS: f64 = 0.25;
const GM_RADIUS: f64 = 0.85;
const EDGE_WIDTH: f64 = 0.08;
const TEMPLATE_FLOOR: f64 = 1e-4;

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn centre(grid: VoxelGrid) -> (f64, f64) {
    ((grid.nx as f64 - 1.0) / 2.0, (grid.ny as f64 - 1.0) / 2.0)
}

/// Smooth template maps summing to one at every voxel.
pub fn synth_templates(grid: VoxelGrid, style: TemplateStyle) -> Result<TemplateStack> {
    let n = grid.len();
    let values = match style {
        TemplateStyle::Ramp => {
            let ts = unit_locations(grid.nx);
            (0..n)
                .flat_map(|i| {
                    let b1 = ramp_b1(ts[i % grid.nx]);
                    [b1, 1.0 - b1]
                })
                .collect()
        }
        TemplateStyle::Concentric => {
            let (cx, cy) = centre(grid);
            let r_max = grid.nx.min(grid.ny) as f64 / 2.0;
            let w = EDGE_WIDTH * r_max;
            (0..n)
                .flat_map(|i| {
                    let (x, y) = grid.coords(i);
                    let r = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                    let csf = logistic((CSF_RADIUS * r_max - r) / w);
                    let wm = logistic((r - GM_RADIUS * r_max) / w);
                    let gm = (1.0 - csf - wm).max(0.0);
                    [gm + TEMPLATE_FLOOR, wm + TEMPLATE_FLOOR, csf + TEMPLATE_FLOOR]
                })
                .collect()
        }
    };
    let k = match style {
        TemplateStyle::Ramp => 2,
        TemplateStyle::Concentric => 3,
    };
    TemplateStack::new(grid, k, values)
}

/// Three-class bivariate background model with template weights
/// `gamma = (0.94, 0.01, 0.05)`.
pub fn phantom_model() -> MixtureModel {
    let c = |m: [f64; 2], s: [f64; 4]| {
        GaussianComponent::new(m.to_vec(), SpdMatrix::new(2, s.to_vec()).expect("valid covariance"))
            .expect("valid component")
    };
    MixtureModel::new(
        vec![
            c([4.91, 6.68], [1.23, 1.63, 1.63, 2.21]),
            c([8.04, 10.77], [1.28, 1.34, 1.34, 1.61]),
            c([2.76, 3.71], [0.24, 0.31, 0.31, 0.44]),
        ],
        Weighting::Spatial(vec![0.94, 0.01, 0.05]),
    )
    .expect("valid phantom model")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LesionSpec {
    pub center: (usize, usize),
    pub radius: f64,
    pub intensity_mean: f64,
    pub intensity_sd: f64,
}

impl LesionSpec {
    /// Radius 10, intensity `N(15, 1)`, centred in the gray-matter band.
    pub fn default_for(grid: VoxelGrid) -> Self {
        let (cx, cy) = centre(grid);
        let r_max = grid.nx.min(grid.ny) as f64 / 2.0;
        let offset = 0.5 * (CSF_RADIUS + GM_RADIUS) * r_max;
        LesionSpec {
            center: ((cx + offset).round() as usize, cy.round() as usize),
            radius: 10.0,
            intensity_mean: 15.0,
            intensity_sd: 1.0,
        }
    }
}

/// Pixels within `radius` of the centre (boundary included). The disc must
/// lie inside the grid.
pub fn lesion_mask(grid: VoxelGrid, lesion: &LesionSpec) -> Result<Vec<bool>> {
    if !(lesion.radius > 0.0) || !(lesion.intensity_sd >= 0.0) {
        return Err(Error::arg("lesion radius must be positive and sd nonnegative"));
    }
    let (cx, cy) = (lesion.center.0 as f64, lesion.center.1 as f64);
    let r = lesion.radius;
    if cx - r < 0.0 || cy - r < 0.0 || cx + r > (grid.nx - 1) as f64 || cy + r > (grid.ny - 1) as f64 {
        return Err(Error::arg(format!(
            "lesion at {:?} with radius {r} leaves the {}x{} grid",
            lesion.center, grid.nx, grid.ny
        )));
    }
    Ok((0..grid.len())
        .map(|i| {
            let (x, y) = grid.coords(i);
            (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r
        })
        .collect())
}

/// Replaces every channel of the masked pixels with independent
/// `N(mean, sd^2)` draws.
pub fn inject_lesion(obs: &mut [f64], p: usize, mask: &[bool], mean: f64, sd: f64, seed: u64) -> Result<()> {
    if p == 0 || obs.len() != mask.len() * p {
        return Err(Error::arg("mask does not cover the observations"));
    }
    if !(sd >= 0.0) {
        return Err(Error::arg("lesion sd must be nonnegative"));
    }
    obs.par_chunks_mut(p).zip(mask.par_iter()).enumerate().for_each(|(i, (px, &m))| {
        if m {
            let mut rng = StreamRng::new(seed, domain::LESION, i as u64);
            for v in px.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = mean + sd * z;
            }
        }
    });
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    /// Background only.
    A,
    /// Background with a lesion.
    B,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub grid: VoxelGrid,
    pub model: MixtureModel,
    pub templates: TemplateStack,
    pub lesion: Option<LesionSpec>,
    pub seed: u64,
}

impl ScenarioSpec {
    /// 320 x 256 phantom on concentric templates.
    pub fn default_for(scenario: Scenario, seed: u64) -> Result<Self> {
        Self::with_grid(scenario, VoxelGrid::new(320, 256)?, seed)
    }

    pub fn with_grid(scenario: Scenario, grid: VoxelGrid, seed: u64) -> Result<Self> {
        Ok(ScenarioSpec {
            scenario,
            grid,
            model: phantom_model(),
            templates: synth_templates(grid, TemplateStyle::Concentric)?,
            lesion: match scenario {
                Scenario::A => None,
                Scenario::B => Some(LesionSpec::default_for(grid)),
            },
            seed,
        })
    }

    fn validate(&self) -> Result<()> {
        match (self.scenario, &self.lesion) {
            (Scenario::A, Some(_)) => Err(Error::arg("scenario A must not contain a lesion")),
            (Scenario::B, None) => Err(Error::arg("scenario B requires a lesion")),
            _ => Ok(()),
        }?;
        if self.templates.grid() != self.grid || self.templates.k() != self.model.k() {
            return Err(Error::arg("templates do not match the grid or class count"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    /// Background class of every voxel (0-based).
    pub labels: Vec<usize>,
    /// Lesion pixels; all false without a lesion.
    pub mask: Vec<bool>,
    pub model: MixtureModel,
}

/// Draws labels and background intensities from `model` at every voxel,
/// using one random stream per grid row.
pub fn sample_mixture(
    model: &MixtureModel,
    templates: Option<&TemplateStack>,
    grid: VoxelGrid,
    seed: u64,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let p = model.dim();
    let k = model.k();
    let n = grid.len();
    if let Some(t) = templates {
        if t.grid() != grid || t.k() != k {
            return Err(Error::arg("templates do not match the grid or class count"));
        }
    }
    let mix = PreparedMixture::new(model.components())?;
    let mut obs = vec![0.0; n * p];
    let mut labels = vec![0usize; n];
    obs.par_chunks_mut(grid.nx * p)
        .zip(labels.par_chunks_mut(grid.nx))
        .enumerate()
        .try_for_each(|(row, (o, l))| -> Result<()> {
            let mut rng = StreamRng::new(seed, domain::BACKGROUND, row as u64);
            let mut pi = vec![0.0; k];
            let mut z = vec![0.0; p];
            for x in 0..grid.nx {
                let i = row * grid.nx + x;
                model.prior_row(i, templates, &mut pi)?;
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut c = k - 1;
                for (j, pj) in pi.iter().enumerate() {
                    acc += pj;
                    if u < acc {
                        c = j;
                        break;
                    }
                }
                for zj in z.iter_mut() {
                    *zj = rng.sample(StandardNormal);
                }
                let out = &mut o[x * p..(x + 1) * p];
                mat_vec(mix.sqrt(c), p, &z, out);
                for (v, m) in out.iter_mut().zip(mix.mean(c)) {
                    *v += m;
                }
                l[x] = c;
            }
            Ok(())
        })?;
    Ok((obs, labels))
}

/// Generates a phantom: background from the spatial mixture, then the
/// lesion (scenario B) on both channels.
pub fn generate(spec: &ScenarioSpec) -> Result<(Vec<f64>, Truth)> {
    spec.validate()?;
    let (mut obs, labels) = sample_mixture(&spec.model, Some(&spec.templates), spec.grid, spec.seed)?;
    let mask = match &spec.lesion {
        Some(lesion) => {
            let mask = lesion_mask(spec.grid, lesion)?;
            inject_lesion(&mut obs, spec.model.dim(), &mask, lesion.intensity_mean, lesion.intensity_sd, spec.seed)?;
            mask
        }
        None => vec![false; spec.grid.len()],
    };
    Ok((obs, Truth { labels, mask, model: spec.model.clone() }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn univariate_values() {
        assert_eq!(ramp_b1(0.4), 0.5);
        assert!((ramp_b1(0.0) - 3.167124183311998e-5).abs() < 1e-12);
        let (t, m) = univariate_setting().unwrap();
        assert_eq!(t.len(), 1000);
        assert_eq!(m.weighting(), &Weighting::Spatial(vec![0.2, 0.8]));
        assert_eq!(t.row(0)[0], ramp_b1(0.0));
        assert_eq!(t.row(999)[0], ramp_b1(1.0));
        assert_eq!(m.components()[1].mean(), &[0.2]);
        assert!((m.components()[0].cov().get(0, 0) - 0.01).abs() < 1e-18);
    }

    #[test]
    fn concentric_templates() {
        let g = VoxelGrid::new(320, 256).unwrap();
        let t = synth_templates(g, TemplateStyle::Concentric).unwrap();
        for i in (0..g.len()).step_by(97) {
            let s: f64 = t.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let c = t.row(g.index(160, 128));
        assert!(c[2] >= 0.9);
        assert!(t.row(g.index(0, 0))[1] >= 0.9);
        let l = LesionSpec::default_for(g);
        assert!(t.row(g.index(l.center.0, l.center.1))[0] >= 0.9);
    }

    #[test]
    fn lesion_mask_size() {
        let g = VoxelGrid::new(64, 64).unwrap();
        let spec = LesionSpec { center: (30, 30), radius: 10.0, intensity_mean: 15.0, intensity_sd: 1.0 };
        let m = lesion_mask(g, &spec).unwrap();
        let brute = (-10i32..=10).flat_map(|x| (-10i32..=10).map(move |y| (x, y))).filter(|(x, y)| x * x + y * y <= 100).count();
        assert_eq!(m.iter().filter(|&&b| b).count(), brute);
        assert_eq!(brute, 317);
        assert!(lesion_mask(g, &LesionSpec { center: (5, 30), ..spec }).is_err());
    }

    #[test]
    fn lesion_injection() {
        let mut obs = vec![1.0; 8];
        let mask = [false, true, false, true];
        inject_lesion(&mut obs, 2, &mask, 15.0, 0.0, 4).unwrap();
        assert_eq!(obs, vec![1.0, 1.0, 15.0, 15.0, 1.0, 1.0, 15.0, 15.0]);
        let mut obs2 = vec![1.0; 8];
        inject_lesion(&mut obs2, 2, &[false; 4], 15.0, 1.0, 4).unwrap();
        assert_eq!(obs2, vec![1.0; 8]);
        assert!(inject_lesion(&mut obs2, 2, &[false; 3], 15.0, 1.0, 4).is_err());
    }

    #[test]
    fn scenario_invariants() {
        let g = VoxelGrid::new(40, 30).unwrap();
        let mut spec = ScenarioSpec::with_grid(Scenario::A, g, 1).unwrap();
        spec.lesion = Some(LesionSpec { center: (20, 15), radius: 3.0, intensity_mean: 15.0, intensity_sd: 1.0 });
        assert!(generate(&spec).is_err());
        spec.scenario = Scenario::B;
        let (obs, truth) = generate(&spec).unwrap();
        assert_eq!(obs.len(), 2 * g.len());
        assert_eq!(truth.mask.iter().filter(|&&m| m).count(), 29);
        let (obs2, _) = generate(&spec).unwrap();
        assert_eq!(obs, obs2);
    }
}
