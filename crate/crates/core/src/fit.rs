//! Grid search over LQR weights and noise levels against a target IP curve.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{synthesize, LqrSpec};
use crate::ipcurve::{mean_curve, trial_ip_curve, IpCurve};
use crate::model::{Gait, PendulumModel, MAX_DOF};
use crate::signal::FilterBank;
use crate::sim::{run_batch_with_gain, NoiseSpec, SimConfig};
use crate::{Error, Result};

pub const MIN_OBJECTIVE_BANDS: usize = 10;

/// Candidate values. Per-joint lists are ordered ankle, knee, hip; a
/// three-joint grid applied to a kneeling model drops the ankle lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGrid {
    pub alpha_values: Vec<f64>,
    pub beta_values: Vec<Vec<f64>>,
    pub sigma_values: Vec<Vec<f64>>,
}

impl Default for ParamGrid {
    fn default() -> Self {
        ParamGrid {
            alpha_values: vec![1e1, 1e6, 1e10],
            beta_values: vec![vec![0.2, 0.3], vec![0.1], vec![0.3, 33.3]],
            sigma_values: vec![vec![0.3, 0.7, 1.0]; 3],
        }
    }
}

fn product(lists: &[Vec<f64>]) -> Vec<Vec<f64>> {
    lists.iter().fold(vec![vec![]], |acc, list| {
        acc.iter()
            .flat_map(|prefix| {
                list.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(*v);
                    p
                })
            })
            .collect()
    })
}

impl ParamGrid {
    /// Grid restricted to the joints of `gait`.
    pub fn for_gait(&self, gait: Gait) -> Result<ParamGrid> {
        let n = gait.dof();
        let cut = |lists: &Vec<Vec<f64>>, what: &str| -> Result<Vec<Vec<f64>>> {
            match lists.len() {
                l if l == n => Ok(lists.clone()),
                MAX_DOF if n < MAX_DOF => Ok(lists[MAX_DOF - n..].to_vec()),
                l => Err(Error::Validation(format!("{what} has {l} joint lists, {} model needs {n}", gait.name()))),
            }
        };
        let g = ParamGrid {
            alpha_values: self.alpha_values.clone(),
            beta_values: cut(&self.beta_values, "beta_values")?,
            sigma_values: cut(&self.sigma_values, "sigma_values")?,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let all = std::iter::once(&self.alpha_values).chain(&self.beta_values).chain(&self.sigma_values);
        for list in all {
            if list.is_empty() {
                return Err(Error::Validation("grid has an empty value list".into()));
            }
            if let Some(v) = list.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(Error::Validation(format!("grid value {v} is not positive")));
            }
        }
        if self.beta_values.len() != self.sigma_values.len() || self.beta_values.is_empty() {
            return Err(Error::Validation("beta_values and sigma_values must cover the same joints".into()));
        }
        Ok(())
    }

    /// Cells in index order: alpha outermost, then beta, then sigma, each
    /// joint list varying slowest-first.
    pub fn cells(&self) -> Vec<CellParams> {
        let betas = product(&self.beta_values);
        let sigmas = product(&self.sigma_values);
        let mut out = Vec::with_capacity(self.alpha_values.len() * betas.len() * sigmas.len());
        for &alpha in &self.alpha_values {
            for beta in &betas {
                for sigma in &sigmas {
                    out.push(CellParams { alpha, beta: beta.clone(), sigma: sigma.clone() });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl CellParams {
    pub fn lqr(&self) -> LqrSpec {
        LqrSpec::new(self.alpha, self.beta.clone())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveMode {
    /// Σ (1/h_sim − 1/h_target)², 1/m².
    #[default]
    SlopeError,
    /// Σ ((h_sim − h_target)/h_ref)².
    CurveError,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub value: f64,
    pub bands_used: usize,
}

pub fn objective(sim: &IpCurve, target: &IpCurve, mode: ObjectiveMode) -> Result<ObjectiveValue> {
    if sim.band_centers != target.band_centers {
        return Err(Error::Validation("curves do not share a band grid".into()));
    }
    if sim.reference_height != target.reference_height {
        return Err(Error::Validation(format!(
            "reference heights differ: {} vs {}",
            sim.reference_height, target.reference_height
        )));
    }
    let href = target.reference_height;
    let mut value = 0.0;
    let mut bands_used = 0;
    for b in 0..sim.len() {
        let (hs, ht) = (sim.ip_height[b], target.ip_height[b]);
        if !(sim.reliable[b] && target.reliable[b] && hs.is_finite() && ht.is_finite() && hs != 0.0 && ht != 0.0) {
            continue;
        }
        bands_used += 1;
        value += match mode {
            ObjectiveMode::SlopeError => (1.0 / hs - 1.0 / ht).powi(2),
            ObjectiveMode::CurveError => ((hs - ht) / href).powi(2),
        };
    }
    if bands_used < MIN_OBJECTIVE_BANDS {
        return Err(Error::Validation(format!(
            "{bands_used} mutually reliable bands, need ≥ {MIN_OBJECTIVE_BANDS}"
        )));
    }
    Ok(ObjectiveValue { value, bands_used })
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn cell_seed(base_seed: u64, cell_index: usize) -> u64 {
    mix(base_seed ^ mix(cell_index as u64 + 1))
}

/// Mean IP curve of one parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSimulation {
    pub params: CellParams,
    pub seed: u64,
    pub curve: Option<IpCurve>,
    pub n_failed_trials: usize,
    /// Why the cell is invalid, if it is.
    pub error: Option<String>,
}

/// Runs `n_trials` for one parameter set and averages the per-trial curves
/// band-wise. Failed trials are excluded and counted.
pub fn simulate_cell(
    model: &PendulumModel,
    params: &CellParams,
    config: &SimConfig,
    n_trials: usize,
    seed: u64,
    bank: &FilterBank,
    reference_height: f64,
) -> CellSimulation {
    let mut out = CellSimulation { params: params.clone(), seed, curve: None, n_failed_trials: 0, error: None };
    let run = || -> Result<(IpCurve, usize)> {
        let gain = synthesize(model, &params.lqr())?;
        let noise = NoiseSpec { sigma: params.sigma.clone(), base_seed: seed };
        let trials = run_batch_with_gain(model, &gain, &noise, config, n_trials)?;
        let mut failed = 0;
        let mut curves = Vec::with_capacity(trials.len());
        for t in &trials {
            match (t.failed(), trial_ip_curve(t, bank, reference_height)) {
                (false, Ok(c)) => curves.push(c),
                _ => failed += 1,
            }
        }
        if curves.is_empty() {
            return Err(Error::Fit(format!("all {n_trials} trials failed")));
        }
        Ok((mean_curve(&curves)?, failed))
    };
    match run() {
        Ok((c, failed)) => {
            out.curve = Some(c);
            out.n_failed_trials = failed;
        }
        Err(e) => {
            out.n_failed_trials = n_trials;
            out.error = Some(e.to_string());
        }
    }
    out
}

/// Simulates every cell of the grid. Cell `i` uses `cell_seed(base_seed, i)`.
pub fn simulate_landscape(
    model: &PendulumModel,
    grid: &ParamGrid,
    config: &SimConfig,
    n_trials: usize,
    base_seed: u64,
    bank: &FilterBank,
    reference_height: f64,
) -> Result<Vec<CellSimulation>> {
    if n_trials < 1 {
        return Err(Error::Validation("n_trials must be at least 1".into()));
    }
    let grid = grid.for_gait(model.gait())?;
    config.validate(model)?;
    let cells = grid.cells();
    Ok(cells
        .par_iter()
        .enumerate()
        .map(|(i, p)| simulate_cell(model, p, config, n_trials, cell_seed(base_seed, i), bank, reference_height))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub params: CellParams,
    /// Under the selected mode; `None` for invalid cells.
    pub objective: Option<f64>,
    pub slope_error: Option<f64>,
    pub curve_error: Option<f64>,
    pub bands_used: usize,
    pub n_failed_trials: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub target_id: String,
    pub mode: ObjectiveMode,
    pub best_index: usize,
    pub best_params: CellParams,
    pub best_objective: f64,
    pub cells: Vec<CellResult>,
}

/// Scores simulated cells against a target. Ties go to the lower index.
pub fn score_landscape(
    sims: &[CellSimulation],
    target: &IpCurve,
    mode: ObjectiveMode,
    target_id: &str,
) -> Result<FitResult> {
    let cells: Vec<CellResult> = sims
        .iter()
        .map(|s| {
            let mut r = CellResult {
                params: s.params.clone(),
                objective: None,
                slope_error: None,
                curve_error: None,
                bands_used: 0,
                n_failed_trials: s.n_failed_trials,
                error: s.error.clone(),
            };
            if let Some(c) = &s.curve {
                match (objective(c, target, ObjectiveMode::SlopeError), objective(c, target, ObjectiveMode::CurveError)) {
                    (Ok(a), Ok(b)) => {
                        r.slope_error = Some(a.value);
                        r.curve_error = Some(b.value);
                        r.bands_used = a.bands_used;
                        r.objective = Some(match mode {
                            ObjectiveMode::SlopeError => a.value,
                            ObjectiveMode::CurveError => b.value,
                        });
                    }
                    (Err(e), _) | (_, Err(e)) => r.error = Some(e.to_string()),
                }
            }
            r
        })
        .collect();
    let (best_index, best_objective) = cells
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.objective.map(|v| (i, v)))
        .fold(None, |best: Option<(usize, f64)>, (i, v)| match best {
            Some((_, bv)) if bv <= v => best,
            _ => Some((i, v)),
        })
        .ok_or_else(|| Error::Fit("every grid cell is invalid".into()))?;
    Ok(FitResult {
        target_id: target_id.to_string(),
        mode,
        best_index,
        best_params: cells[best_index].params.clone(),
        best_objective,
        cells,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn grid_search(
    model: &PendulumModel,
    grid: &ParamGrid,
    target: &IpCurve,
    target_id: &str,
    config: &SimConfig,
    n_trials: usize,
    base_seed: u64,
    mode: ObjectiveMode,
) -> Result<FitResult> {
    let reliable = target.reliable_count();
    if reliable < MIN_OBJECTIVE_BANDS {
        return Err(Error::Validation(format!("target has {reliable} reliable bands, need ≥ {MIN_OBJECTIVE_BANDS}")));
    }
    let spec = crate::signal::BandSpec {
        centers: target.band_centers.clone(),
        width: crate::signal::BandSpec::standard(config.output_rate).width,
        sample_rate: config.output_rate,
    };
    let bank = FilterBank::new(&spec)?;
    let sims = simulate_landscape(model, grid, config, n_trials, base_seed, &bank, target.reference_height)?;
    score_landscape(&sims, target, mode, target_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::BandSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn flat(h: f64, href: f64) -> IpCurve {
        let c = BandSpec::standard(100.0).centers;
        let n = c.len();
        IpCurve::from_heights(c, vec![h; n], vec![0.9; n], href).unwrap()
    }

    #[test]
    fn default_grid_sizes() {
        let g = ParamGrid::default();
        assert_eq!(g.cells().len(), 324);
        let k = g.for_gait(Gait::Kneeling).unwrap();
        assert_eq!(k.beta_values, vec![vec![0.1], vec![0.3, 33.3]]);
        assert_eq!(k.cells().len(), 54);
        assert!(g.cells().contains(&CellParams { alpha: 1e6, beta: vec![0.2, 0.1, 0.3], sigma: vec![1.0; 3] }));
    }

    #[test]
    fn grid_validation() {
        let mut g = ParamGrid::default();
        g.sigma_values[1] = vec![];
        assert!(g.validate().is_err());
        let mut g = ParamGrid::default();
        g.alpha_values.push(-1.0);
        assert!(g.validate().is_err());
        let mut g = ParamGrid::default();
        g.beta_values.pop();
        assert!(g.for_gait(Gait::Stance).is_err());
    }

    #[test]
    fn objective_hand_values() {
        let a = flat(0.8, 0.85);
        let b = flat(1.0, 0.85);
        let s = objective(&a, &b, ObjectiveMode::SlopeError).unwrap();
        assert_eq!(s.bands_used, 38);
        assert!((s.value - 2.375).abs() < 1e-12);
        let c = objective(&a, &b, ObjectiveMode::CurveError).unwrap();
        assert!((c.value - 38.0 * (0.2f64 / 0.85).powi(2)).abs() < 1e-12);
        assert!((c.value - 2.104).abs() < 1e-3);
        assert_eq!(objective(&a, &a, ObjectiveMode::SlopeError).unwrap().value, 0.0);
        assert_eq!(objective(&a, &a, ObjectiveMode::CurveError).unwrap().value, 0.0);
    }

    #[test]
    fn objective_pairwise_exclusion_and_errors() {
        let mut a = flat(0.8, 0.85);
        let b = flat(1.0, 0.85);
        for i in 0..5 {
            a.reliable[i] = false;
        }
        assert_eq!(objective(&a, &b, ObjectiveMode::SlopeError).unwrap().bands_used, 33);
        for i in 0..30 {
            a.reliable[i] = false;
        }
        assert!(objective(&a, &b, ObjectiveMode::SlopeError).is_err());
        let c = flat(1.0, 0.6);
        assert!(objective(&flat(0.8, 0.85), &c, ObjectiveMode::SlopeError).is_err());
        let mut d = flat(1.0, 0.85);
        d.band_centers[0] += 0.01;
        assert!(objective(&flat(0.8, 0.85), &d, ObjectiveMode::SlopeError).is_err());
    }

    fn synthetic_sims(curves: &[IpCurve]) -> Vec<CellSimulation> {
        curves
            .iter()
            .enumerate()
            .map(|(i, c)| CellSimulation {
                params: CellParams { alpha: 1.0 + i as f64, beta: vec![1.0], sigma: vec![1.0] },
                seed: 0,
                curve: Some(c.clone()),
                n_failed_trials: 0,
                error: None,
            })
            .collect()
    }

    #[test]
    fn scoring_picks_minimum_and_skips_invalid() {
        let mut sims = synthetic_sims(&[flat(0.7, 0.85), flat(0.95, 0.85), flat(1.3, 0.85)]);
        sims[1].curve = None;
        sims[1].error = Some("x".into());
        let r = score_landscape(&sims, &flat(1.0, 0.85), ObjectiveMode::SlopeError, "t").unwrap();
        assert_eq!(r.best_index, 2);
        assert!(r.cells[1].objective.is_none());
        assert!(r.cells.iter().filter_map(|c| c.objective).all(|v| v >= r.best_objective));
        for s in &mut sims {
            s.curve = None;
        }
        assert!(matches!(score_landscape(&sims, &flat(1.0, 0.85), ObjectiveMode::SlopeError, "t"), Err(Error::Fit(_))));
    }

    #[test]
    fn monotone_degradation_under_target_noise() {
        let base: Vec<IpCurve> = [0.6, 0.8, 1.0, 1.2].iter().map(|h| flat(*h, 0.85)).collect();
        let sims = synthetic_sims(&base);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let e: Vec<f64> = (0..38).map(|_| StandardNormal.sample(&mut rng)).collect();
        for mode in [ObjectiveMode::SlopeError, ObjectiveMode::CurveError] {
            let mut last = -1.0;
            for amp in [0.0, 0.01, 0.03, 0.06] {
                let mut t = base[2].clone();
                for (h, n) in t.ip_height.iter_mut().zip(&e) {
                    *h += amp * n;
                }
                let best = score_landscape(&sims, &t, mode, "t").unwrap().best_objective;
                assert!(best >= last, "{mode:?} amp {amp}: {best} < {last}");
                last = best;
            }
        }
    }

    #[test]
    fn cell_seeds_distinct() {
        let s: std::collections::BTreeSet<u64> = (0..324).map(|i| cell_seed(7, i)).collect();
        assert_eq!(s.len(), 324);
        assert_ne!(cell_seed(7, 0), cell_seed(8, 0));
    }

    fn short_config() -> SimConfig {
        SimConfig { duration: 20.0, ..SimConfig::default() }
    }

    #[test]
    fn single_cell_grid_and_determinism() {
        let model = PendulumModel::tip_default();
        let grid = ParamGrid {
            alpha_values: vec![1e6],
            beta_values: vec![vec![0.2], vec![0.1], vec![0.3]],
            sigma_values: vec![vec![1.0]; 3],
        };
        let bank = FilterBank::new(&BandSpec::standard(100.0)).unwrap();
        let cfg = short_config();
        let target = simulate_cell(&model, &grid.cells()[0], &cfg, 4, 99, &bank, 0.85).curve.unwrap();
        let a = grid_search(&model, &grid, &target, "t", &cfg, 4, 5, ObjectiveMode::SlopeError).unwrap();
        let b = grid_search(&model, &grid, &target, "t", &cfg, 4, 5, ObjectiveMode::SlopeError).unwrap();
        assert_eq!(a.best_params, grid.cells()[0]);
        assert_eq!(a.best_objective.to_bits(), b.best_objective.to_bits());
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn generating_cell_dominates_distinct_cell() {
        let model = PendulumModel::tip_default();
        let gen = CellParams { alpha: 1e6, beta: vec![0.2, 0.1, 0.3], sigma: vec![1.0; 3] };
        let other = CellParams { alpha: 1e10, beta: vec![0.3, 0.1, 33.3], sigma: vec![1.0; 3] };
        let bank = FilterBank::new(&BandSpec::standard(100.0)).unwrap();
        let cfg = SimConfig::default();
        let target = simulate_cell(&model, &gen, &cfg, 30, 1234, &bank, 0.85).curve.unwrap();
        let sims = vec![
            simulate_cell(&model, &gen, &cfg, 30, cell_seed(7, 0), &bank, 0.85),
            simulate_cell(&model, &other, &cfg, 30, cell_seed(7, 1), &bank, 0.85),
        ];
        let r = score_landscape(&sims, &target, ObjectiveMode::SlopeError, "t").unwrap();
        assert_eq!(r.best_index, 0);
        let ratio = r.cells[0].objective.unwrap() / r.cells[1].objective.unwrap();
        assert!(ratio < 0.5, "ratio {ratio}");
    }
}
