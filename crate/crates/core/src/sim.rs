//! Stochastic closed-loop trials of the nonlinear body under LQR feedback.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{synthesize, ExoSpec, LqrGain, LqrSpec};
use crate::error::{Error, Result};
use crate::model::{Gait, GroundReaction, JointState, PendulumModel, MAX_DOF};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Per-joint torque disturbance std, N·m.
    pub sigma: Vec<f64>,
    pub base_seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self, dof: usize) -> Result<()> {
        if self.sigma.len() != dof {
            return Err(Error::Validation(format!("sigma has {} entries, model has {dof} joints", self.sigma.len())));
        }
        if self.sigma.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::Validation(format!("sigma entries must be non-negative, got {:?}", self.sigma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// s
    pub duration: f64,
    /// Hz
    pub output_rate: f64,
    /// RK4 steps per output sample.
    pub internal_substeps: usize,
    pub initial_state: Option<JointState>,
    pub exo: Option<ExoSpec>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { duration: 50.0, output_rate: 100.0, internal_substeps: 10, initial_state: None, exo: None }
    }
}

impl SimConfig {
    pub fn validate(&self, model: &PendulumModel) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::Validation(format!("duration must be positive, got {}", self.duration)));
        }
        if !(self.output_rate > 0.0 && self.output_rate.is_finite()) {
            return Err(Error::Validation(format!("output rate must be positive, got {}", self.output_rate)));
        }
        if self.internal_substeps < 1 {
            return Err(Error::Validation("internal_substeps must be at least 1".into()));
        }
        if let Some(s) = &self.initial_state {
            model.check_state(s)?;
        }
        if let Some(e) = &self.exo {
            e.validate()?;
            if e.gait() != model.gait() {
                return Err(Error::Validation(format!(
                    "exoskeleton mode does not apply to a {} model",
                    model.gait().name()
                )));
            }
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration * self.output_rate).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    /// s
    pub time: f64,
    pub sample: usize,
    pub reason: String,
}

/// Channel-major record of one trial. `torques` holds the net joint torque applied
/// over each sample interval (feedback, exoskeleton and disturbance). `fx` is the
/// force on the body, F_x = m_t ẍ_m.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSeries {
    pub gait: Gait,
    pub sample_rate: f64,
    pub trial_index: usize,
    pub time: Vec<f64>,
    pub angles: Vec<Vec<f64>>,
    pub rates: Vec<Vec<f64>>,
    pub torques: Vec<Vec<f64>>,
    pub fx: Vec<f64>,
    pub fz: Vec<f64>,
    pub cop_x: Vec<f64>,
    pub com_ax: Vec<f64>,
    pub com_az: Vec<f64>,
    pub failure: Option<TrialFailure>,
}

impl TrialSeries {
    pub fn with_capacity(gait: Gait, sample_rate: f64, trial_index: usize, cap: usize) -> Self {
        let n = gait.dof();
        let chans = || (0..n).map(|_| Vec::with_capacity(cap)).collect::<Vec<_>>();
        Self {
            gait,
            sample_rate,
            trial_index,
            time: Vec::with_capacity(cap),
            angles: chans(),
            rates: chans(),
            torques: chans(),
            fx: Vec::with_capacity(cap),
            fz: Vec::with_capacity(cap),
            cop_x: Vec::with_capacity(cap),
            com_ax: Vec::with_capacity(cap),
            com_az: Vec::with_capacity(cap),
            failure: None,
        }
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    pub fn state(&self, k: usize) -> JointState {
        JointState::new(self.angles.iter().map(|c| c[k]).collect(), self.rates.iter().map(|c| c[k]).collect())
    }

    pub fn grf(&self) -> Vec<GroundReaction> {
        self.fx.iter().zip(&self.fz).map(|(&fx, &fz)| GroundReaction { fx, fz }).collect()
    }

    /// Forces as a plate reports them (force on the plate, so fx = −F_x).
    pub fn plate_grf(&self) -> Vec<GroundReaction> {
        self.fx.iter().zip(&self.fz).map(|(&fx, &fz)| GroundReaction { fx: -fx, fz }).collect()
    }

    /// All channels equal length and uniformly spaced.
    pub fn check_consistent(&self) -> Result<()> {
        let n = self.len();
        let chans = self.angles.iter().chain(&self.rates).chain(&self.torques);
        let same = chans.map(|c| c.len()).chain([self.fx.len(), self.fz.len(), self.cop_x.len(), self.com_ax.len(), self.com_az.len()]).all(|l| l == n);
        if !same {
            return Err(Error::Contract("trial channels have unequal lengths".into()));
        }
        Ok(())
    }
}

type Vec6 = [f64; 2 * MAX_DOF];

struct Plant<'a> {
    model: &'a PendulumModel,
    gain: [[f64; 2 * MAX_DOF]; MAX_DOF],
    exo: Option<ExoSpec>,
    n: usize,
}

impl Plant<'_> {
    fn torque(&self, x: &Vec6, w: &[f64; MAX_DOF]) -> [f64; MAX_DOF] {
        let n = self.n;
        let mut tau = [0.0; MAX_DOF];
        for i in 0..n {
            let mut u = w[i];
            for j in 0..2 * n {
                u -= self.gain[i][j] * x[j];
            }
            tau[i] = u;
        }
        if let Some(e) = &self.exo {
            tau[self.model.gait().knee_index()] += e.torque_raw(self.model, &x[..n], &x[n..2 * n]);
        }
        tau
    }

    fn deriv(&self, x: &Vec6, w: &[f64; MAX_DOF]) -> Vec6 {
        let n = self.n;
        let tau = self.torque(x, w);
        let mut acc = [0.0; MAX_DOF];
        self.model.accel_raw(&x[..n], &x[n..2 * n], &tau[..n], &mut acc);
        let mut d = [0.0; 2 * MAX_DOF];
        d[..n].copy_from_slice(&x[n..2 * n]);
        d[n..2 * n].copy_from_slice(&acc[..n]);
        d
    }

    fn rk4(&self, x: &mut Vec6, w: &[f64; MAX_DOF], h: f64) {
        let m = 2 * self.n;
        let add = |x: &Vec6, k: &Vec6, s: f64| {
            let mut o = *x;
            for i in 0..m {
                o[i] += s * k[i];
            }
            o
        };
        let k1 = self.deriv(x, w);
        let k2 = self.deriv(&add(x, &k1, h / 2.0), w);
        let k3 = self.deriv(&add(x, &k2, h / 2.0), w);
        let k4 = self.deriv(&add(x, &k3, h), w);
        for i in 0..m {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
}

/// RNG for one trial: a ChaCha stream selected by the trial index.
pub fn trial_rng(base_seed: u64, trial_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(trial_index as u64);
    rng
}

pub fn run_trial(
    model: &PendulumModel,
    gain: &LqrGain,
    noise: &NoiseSpec,
    config: &SimConfig,
    trial_index: usize,
) -> Result<TrialSeries> {
    let n = model.dof();
    if gain.gain.shape() != (n, 2 * n) {
        return Err(Error::Contract(format!(
            "gain is {}×{}, expected {n}×{}",
            gain.gain.nrows(),
            gain.gain.ncols(),
            2 * n
        )));
    }
    noise.validate(n)?;
    config.validate(model)?;

    let plant = Plant { model, gain: gain.as_array(), exo: config.exo, n };
    let samples = config.n_samples();
    let dt = 1.0 / config.output_rate;
    let h = dt / config.internal_substeps as f64;
    let mut rng = trial_rng(noise.base_seed, trial_index);
    let mut out = TrialSeries::with_capacity(model.gait(), config.output_rate, trial_index, samples);

    let mut x: Vec6 = [0.0; 2 * MAX_DOF];
    if let Some(s) = &config.initial_state {
        x[..n].copy_from_slice(&s.angles);
        x[n..2 * n].copy_from_slice(&s.rates);
    }
    let limit = std::f64::consts::FRAC_PI_2;
    for k in 0..samples {
        let t = k as f64 * dt;
        let mut w = [0.0; MAX_DOF];
        for i in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            w[i] = noise.sigma[i] * z;
        }
        let tau = plant.torque(&x, &w);
        let mut acc = [0.0; MAX_DOF];
        model.accel_raw(&x[..n], &x[n..2 * n], &tau[..n], &mut acc);
        let com = model.com_raw(&x[..n], &x[n..2 * n], &acc[..n]);
        let (fx, fz) = model.grf_raw(&com);

        let reason = if x[..2 * n].iter().chain(&acc[..n]).any(|v| !v.is_finite()) || !fx.is_finite() {
            Some("non-finite state")
        } else if x[..n].iter().any(|a| a.abs() > limit) {
            Some("joint angle beyond ±π/2")
        } else if fz <= 0.0 {
            Some("vertical ground reaction not positive")
        } else {
            None
        };
        if let Some(r) = reason {
            out.failure = Some(TrialFailure { time: t, sample: k, reason: r.to_string() });
            break;
        }

        out.time.push(t);
        for i in 0..n {
            out.angles[i].push(x[i]);
            out.rates[i].push(x[n + i]);
            out.torques[i].push(tau[i]);
        }
        out.fx.push(fx);
        out.fz.push(fz);
        out.cop_x.push(tau[0] / fz);
        out.com_ax.push(com.xdd);
        out.com_az.push(com.zdd);

        for _ in 0..config.internal_substeps {
            plant.rk4(&mut x, &w, h);
        }
    }
    Ok(out)
}

/// Unguarded RK4 integration of the torque-free body, sampled every `dt`.
pub fn integrate_free(model: &PendulumModel, initial: &JointState, duration: f64, dt: f64) -> Result<Vec<JointState>> {
    model.check_state(initial)?;
    if !(duration > 0.0 && dt > 0.0) {
        return Err(Error::Validation("duration and dt must be positive".into()));
    }
    let n = model.dof();
    let plant = Plant { model, gain: [[0.0; 2 * MAX_DOF]; MAX_DOF], exo: None, n };
    let mut x: Vec6 = [0.0; 2 * MAX_DOF];
    x[..n].copy_from_slice(&initial.angles);
    x[n..2 * n].copy_from_slice(&initial.rates);
    let steps = (duration / dt).round() as usize;
    let mut out = Vec::with_capacity(steps + 1);
    out.push(initial.clone());
    for _ in 0..steps {
        plant.rk4(&mut x, &[0.0; MAX_DOF], dt);
        out.push(JointState::new(x[..n].to_vec(), x[n..2 * n].to_vec()));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct BatchReport {
    pub trials: Vec<TrialSeries>,
    pub failed: Vec<usize>,
    pub gain: LqrGain,
}

pub fn run_batch(
    model: &PendulumModel,
    spec: &LqrSpec,
    noise: &NoiseSpec,
    config: &SimConfig,
    n_trials: usize,
) -> Result<BatchReport> {
    if n_trials < 1 {
        return Err(Error::Validation("n_trials must be at least 1".into()));
    }
    let gain = synthesize(model, spec)?;
    let trials = run_batch_with_gain(model, &gain, noise, config, n_trials)?;
    let failed = trials.iter().filter(|t| t.failed()).map(|t| t.trial_index).collect();
    Ok(BatchReport { trials, failed, gain })
}

pub fn run_batch_with_gain(
    model: &PendulumModel,
    gain: &LqrGain,
    noise: &NoiseSpec,
    config: &SimConfig,
    n_trials: usize,
) -> Result<Vec<TrialSeries>> {
    (0..n_trials).into_par_iter().map(|i| run_trial(model, gain, noise, config, i)).collect()
}

/// COP from pin-joint moment balance: cop_x = τ_pin / fz.
pub fn compute_cop(series: &TrialSeries, model: &PendulumModel) -> Result<Vec<f64>> {
    if series.gait != model.gait() {
        return Err(Error::Contract("series and model gaits differ".into()));
    }
    series.check_consistent()?;
    series.torques[0]
        .iter()
        .zip(&series.fz)
        .enumerate()
        .map(|(k, (&tau, &fz))| {
            if fz > 0.0 {
                Ok(tau / fz)
            } else {
                Err(Error::Degenerate(format!("fz = {fz} N at sample {k}")))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{controller_preset, linearize, lqr_gain};
    use crate::model::dynamics_terms;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn toi1() -> (PendulumModel, LqrGain) {
        let m = PendulumModel::tip_default();
        let k = lqr_gain(&linearize(&m), &controller_preset("toi1", Gait::Stance).unwrap().lqr).unwrap();
        (m, k)
    }

    fn short(duration: f64) -> SimConfig {
        SimConfig { duration, ..SimConfig::default() }
    }

    #[test]
    fn noiseless_equilibrium_stays_put() {
        let (m, k) = toi1();
        let t = run_trial(&m, &k, &NoiseSpec { sigma: vec![0.0; 3], base_seed: 1 }, &short(2.0), 0).unwrap();
        assert_eq!(t.len(), 200);
        assert!(t.angles.iter().chain(&t.rates).chain(&t.torques).all(|c| c.iter().all(|&v| v == 0.0)));
        assert!(t.fx.iter().chain(&t.cop_x).chain(&t.com_ax).chain(&t.com_az).all(|&v| v == 0.0));
        assert!(t.fz.iter().all(|&v| (v - 666.4).abs() < 1e-9));
    }

    #[test]
    fn perturbation_decays() {
        let (m, k) = toi1();
        let cfg = SimConfig { initial_state: Some(JointState::new(vec![1e-3, 0.0, 0.0], vec![0.0; 3])), ..SimConfig::default() };
        let t = run_trial(&m, &k, &NoiseSpec { sigma: vec![0.0; 3], base_seed: 1 }, &cfg, 0).unwrap();
        let last = t.state(t.len() - 1);
        let norm = last.angles.iter().chain(&last.rates).map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-6, "{norm}");
    }

    #[test]
    fn deterministic_per_seed_and_index() {
        let (m, k) = toi1();
        let noise = NoiseSpec { sigma: vec![1.0; 3], base_seed: 42 };
        let a = run_trial(&m, &k, &noise, &short(3.0), 5).unwrap();
        let b = run_trial(&m, &k, &noise, &short(3.0), 5).unwrap();
        let c = run_trial(&m, &k, &noise, &short(3.0), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.angles, c.angles);
    }

    #[test]
    fn batch_matches_single_trials() {
        let m = PendulumModel::tip_default();
        let spec = controller_preset("toi1", Gait::Stance).unwrap().lqr;
        let noise = NoiseSpec { sigma: vec![1.0; 3], base_seed: 9 };
        let one = run_batch(&m, &spec, &noise, &short(2.0), 1).unwrap();
        assert_eq!(one.trials[0], run_trial(&m, &one.gain, &noise, &short(2.0), 0).unwrap());
        let a = run_batch(&m, &spec, &noise, &short(2.0), 2).unwrap();
        let b = run_batch(&m, &spec, &noise, &short(2.0), 2).unwrap();
        assert_eq!(a.trials, b.trials);
        assert!(run_batch(&m, &spec, &noise, &short(2.0), 0).is_err());
    }

    #[test]
    fn energy_is_conserved_without_control() {
        let m = PendulumModel::tip_default();
        let init = JointState::new(vec![0.02, 0.0, 0.0], vec![0.0; 3]);
        let path = integrate_free(&m, &init, 1.0, 1e-4).unwrap();
        let energy = |s: &JointState| m.kinetic_energy(s).unwrap() + m.potential_energy(&s.angles).unwrap();
        let e0 = energy(&path[0]);
        let drift = path.iter().map(|s| (energy(s) - e0).abs()).fold(0.0, f64::max) / e0.abs();
        assert!(drift < 1e-6, "{drift}");
        // The body has fallen well away from upright by then.
        assert!(path.last().unwrap().angles.iter().any(|a| a.abs() > 0.5));
    }

    #[test]
    fn grf_matches_differentiated_com_trajectory() {
        let m = PendulumModel::tip_default();
        let zero = LqrGain::from_matrix(DMatrix::zeros(3, 6));
        let cfg = SimConfig {
            duration: 1.0,
            output_rate: 1000.0,
            internal_substeps: 2,
            initial_state: Some(JointState::new(vec![0.02, -0.01, 0.015], vec![0.0; 3])),
            exo: None,
        };
        let t = run_trial(&m, &zero, &NoiseSpec { sigma: vec![0.0; 3], base_seed: 0 }, &cfg, 0).unwrap();
        let xm: Vec<f64> = (0..t.len())
            .map(|k| crate::model::com_kinematics(&m, &t.state(k)).unwrap().position[0])
            .collect();
        let dt = 1.0 / cfg.output_rate;
        let mut worst: f64 = 0.0;
        let scale = t.fx.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for k in 1..t.len() - 1 {
            let fd = m.total_mass() * (xm[k + 1] - 2.0 * xm[k] + xm[k - 1]) / (dt * dt);
            worst = worst.max((fd - t.fx[k]).abs());
        }
        assert!(worst < 0.01 * scale, "{worst} vs {scale}");
    }

    #[test]
    fn failure_is_recorded() {
        let m = PendulumModel::tip_default();
        let zero = LqrGain::from_matrix(DMatrix::zeros(3, 6));
        let cfg = SimConfig { duration: 10.0, initial_state: Some(JointState::new(vec![0.05, 0.0, 0.0], vec![0.0; 3])), ..SimConfig::default() };
        let t = run_trial(&m, &zero, &NoiseSpec { sigma: vec![0.0; 3], base_seed: 0 }, &cfg, 0).unwrap();
        let f = t.failure.clone().expect("unactuated body falls");
        assert_eq!(t.len(), f.sample);
        assert!(f.time > 0.0 && f.time < 10.0);
        t.check_consistent().unwrap();
    }

    #[test]
    fn substep_convergence() {
        let (m, k) = toi1();
        let noise = NoiseSpec { sigma: vec![1.0; 3], base_seed: 3 };
        let a = run_trial(&m, &k, &noise, &short(10.0), 0).unwrap();
        let b = run_trial(&m, &k, &noise, &SimConfig { internal_substeps: 20, ..short(10.0) }, 0).unwrap();
        for (ca, cb) in a.angles.iter().zip(&b.angles) {
            let diff = ca.iter().zip(cb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let size = ca.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(diff < 1e-3 * size);
        }
    }

    #[test]
    fn cop_examples() {
        let m = PendulumModel::tip_default();
        // Hold a lean that puts the COM 1 cm forward with zero rates.
        let th = -(0.01f64 / 0.85).asin();
        let st = JointState::new(vec![th, 0.0, 0.0], vec![0.0; 3]);
        let g = dynamics_terms(&m, &st).unwrap().gravity_vector;
        let mut s = TrialSeries::with_capacity(Gait::Stance, 100.0, 0, 1);
        s.time.push(0.0);
        for i in 0..3 {
            s.angles[i].push(st.angles[i]);
            s.rates[i].push(0.0);
            s.torques[i].push(g[i]);
        }
        let acc = crate::model::forward_dynamics(&m, &st, g.as_slice()).unwrap().accelerations;
        let grf = crate::model::ground_reaction(&m, &st, &acc).unwrap();
        s.fx.push(grf.fx);
        s.fz.push(grf.fz);
        s.cop_x.push(0.0);
        s.com_ax.push(0.0);
        s.com_az.push(0.0);
        let cop = compute_cop(&s, &m).unwrap();
        assert_relative_eq!(cop[0], 0.01, epsilon = 1e-6);

        s.torques[0][0] = 0.0;
        s.fz[0] = 900.0;
        assert_eq!(compute_cop(&s, &m).unwrap()[0], 0.0);
        s.fz[0] = 0.0;
        assert!(compute_cop(&s, &m).is_err());
    }

    #[test]
    fn exo_changes_trajectory_on_knee() {
        let (m, k) = toi1();
        let noise = NoiseSpec { sigma: vec![1.0; 3], base_seed: 4 };
        let plain = run_trial(&m, &k, &noise, &short(5.0), 0).unwrap();
        let cfg = SimConfig { exo: Some(ExoSpec::StanceStiffness { k_r: 200.0 }), ..short(5.0) };
        let assisted = run_trial(&m, &k, &noise, &cfg, 0).unwrap();
        let rms = |v: &[f64]| (v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64).sqrt();
        assert!(rms(&assisted.angles[1]) < rms(&plain.angles[1]));
        let wrong = SimConfig { exo: Some(ExoSpec::KneelPdGravity { k_p: 1.0, k_d: 0.0, gamma: 0.5 }), ..short(1.0) };
        assert!(run_trial(&m, &k, &noise, &wrong, 0).is_err());
    }

    #[test]
    fn cop_std_grows_with_sigma() {
        let (m, k) = toi1();
        let mut last = 0.0;
        for scale in [0.5, 1.0, 2.0] {
            let noise = NoiseSpec { sigma: vec![scale; 3], base_seed: 11 };
            let trials = run_batch_with_gain(&m, &k, &noise, &short(10.0), 30).unwrap();
            let all: Vec<f64> = trials.iter().flat_map(|t| t.cop_x.clone()).collect();
            let mean = all.iter().sum::<f64>() / all.len() as f64;
            let sd = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
            assert!(sd > last);
            last = sd;
        }
    }
}
