//! Linearization, LQR synthesis and exoskeleton torque laws.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{lyapunov, spectral_abscissa};
use crate::model::{Gait, JointState, PendulumModel, MAX_DOF};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearPlant {
    /// 2n×2n
    pub a_matrix: DMatrix<f64>,
    /// 2n×n
    pub b_matrix: DMatrix<f64>,
}

impl LinearPlant {
    pub fn dof(&self) -> usize {
        self.b_matrix.ncols()
    }
}

/// Cost weights: R = α·diag(β), Q defaults to identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqrSpec {
    pub alpha: f64,
    pub beta: Vec<f64>,
    /// Row-major 2n×2n state penalty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_matrix: Option<Vec<Vec<f64>>>,
}

impl LqrSpec {
    pub fn new(alpha: f64, beta: Vec<f64>) -> Self {
        Self { alpha, beta, q_matrix: None }
    }

    pub fn validate(&self, dof: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Validation(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.beta.len() != dof {
            return Err(Error::Validation(format!("beta has {} entries, model has {dof} joints", self.beta.len())));
        }
        if let Some(b) = self.beta.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            return Err(Error::Validation(format!("beta entries must be positive, got {b}")));
        }
        let q = self.q(dof)?;
        if (&q - q.transpose()).amax() > 1e-12 * q.amax().max(1.0) {
            return Err(Error::Validation("q_matrix must be symmetric".into()));
        }
        if q.clone().symmetric_eigen().eigenvalues.min() < -1e-12 * q.amax().max(1.0) {
            return Err(Error::Validation("q_matrix must be positive semi-definite".into()));
        }
        Ok(())
    }

    pub fn q(&self, dof: usize) -> Result<DMatrix<f64>> {
        let n = 2 * dof;
        match &self.q_matrix {
            None => Ok(DMatrix::identity(n, n)),
            Some(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::Validation(format!("q_matrix must be {n}×{n}")));
                }
                Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
            }
        }
    }
}

/// A named controller condition: cost weights plus joint torque noise levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerPreset {
    pub name: String,
    pub lqr: LqrSpec,
    /// Relative torque-noise multipliers per joint.
    pub sigma: Vec<f64>,
}

// (alpha, beta1..3, sigma1..3) for the eight test conditions.
const TOI_TABLE: [(f64, [f64; 3], [f64; 3]); 8] = [
    (1e6, [0.2, 0.1, 0.3], [1.0, 1.0, 1.0]),
    (1e10, [0.3, 0.1, 33.3], [1.0, 1.0, 1.0]),
    (1e6, [0.2, 0.1, 0.3], [0.7, 0.3, 1.0]),
    (1e6, [0.2, 0.1, 0.3], [0.7, 0.3, 1.0]),
    (1e10, [0.2, 0.1, 0.3], [1.0, 1.0, 1.0]),
    (1e10, [0.2, 0.1, 0.3], [1.0, 0.7, 0.3]),
    (10.0, [0.3, 0.1, 33.3], [1.0, 1.0, 1.0]),
    (1e10, [0.2, 0.1, 0.3], [1.0, 1.0, 1.0]),
];

pub const CONTROLLER_PRESETS: [&str; 8] = ["toi1", "toi2", "toi3", "toi4", "toi5", "toi6", "toi7", "toi8"];

/// Looks up `toi1`…`toi8`. Kneeling drops the ankle entries.
pub fn controller_preset(name: &str, gait: Gait) -> Result<ControllerPreset> {
    let idx = CONTROLLER_PRESETS
        .iter()
        .position(|p| *p == name)
        .ok_or_else(|| Error::Validation(format!("unknown controller preset '{name}' (expected toi1…toi8)")))?;
    let (alpha, beta, sigma) = TOI_TABLE[idx];
    let skip = 3 - gait.dof();
    Ok(ControllerPreset {
        name: name.to_string(),
        lqr: LqrSpec::new(alpha, beta[skip..].to_vec()),
        sigma: sigma[skip..].to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqrGain {
    /// n×2n
    pub gain: DMatrix<f64>,
    /// Stabilizing Riccati solution.
    pub riccati: DMatrix<f64>,
    /// ‖AᵀP + PA − PBR⁻¹BᵀP + Q‖_F / ‖P‖_F
    pub relative_residual: f64,
    pub iterations: usize,
}

impl LqrGain {
    pub fn from_matrix(gain: DMatrix<f64>) -> Self {
        let n = gain.nrows();
        Self { gain, riccati: DMatrix::zeros(2 * n, 2 * n), relative_residual: 0.0, iterations: 0 }
    }

    /// Row-major copy for the integrator's inner loop.
    pub(crate) fn as_array(&self) -> [[f64; 2 * MAX_DOF]; MAX_DOF] {
        let mut k = [[0.0; 2 * MAX_DOF]; MAX_DOF];
        for i in 0..self.gain.nrows() {
            for j in 0..self.gain.ncols() {
                k[i][j] = self.gain[(i, j)];
            }
        }
        k
    }
}

/// Exoskeleton knee assistance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ExoSpec {
    StanceStiffness { k_r: f64 },
    KneelPdGravity { k_p: f64, k_d: f64, gamma: f64 },
}

impl ExoSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ExoSpec::StanceStiffness { k_r } => k_r >= 0.0 && k_r.is_finite(),
            ExoSpec::KneelPdGravity { k_p, k_d, gamma } => {
                k_p >= 0.0 && k_d >= 0.0 && k_p.is_finite() && k_d.is_finite() && gamma > 0.0 && gamma < 1.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid exoskeleton gains {self:?}")))
        }
    }

    pub fn gait(&self) -> Gait {
        match self {
            ExoSpec::StanceStiffness { .. } => Gait::Stance,
            ExoSpec::KneelPdGravity { .. } => Gait::Kneeling,
        }
    }

    pub(crate) fn torque_raw(&self, model: &PendulumModel, q: &[f64], qd: &[f64]) -> f64 {
        match *self {
            ExoSpec::StanceStiffness { k_r } => -k_r * q[1],
            ExoSpec::KneelPdGravity { k_p, k_d, gamma } => {
                let seg = model.segments();
                let (m2, l2, lc2) = (seg[0].mass, seg[0].length, seg[0].com_offset);
                let (m3, lc3) = (seg[1].mass, seg[1].com_offset);
                let (t2, t3) = (q[0], q[1]);
                let comp = 0.5 * m3 * (l2 * t2.sin() - lc3 * t3.sin()) + m2 * lc2 * t2.sin();
                -k_p * t2 - k_d * qd[0] - gamma * model.gravity() * comp
            }
        }
    }
}

/// A = [[0, I], [−M(0)⁻¹ ∂G/∂θ, 0]], B = [[0], [M(0)⁻¹]].
pub fn linearize(model: &PendulumModel) -> LinearPlant {
    let n = model.dof();
    let zeros = [0.0; MAX_DOF];
    let t = model.terms_raw(&zeros[..n], &zeros[..n]);
    let m0 = DMatrix::from_fn(n, n, |i, j| t.m[i][j]);
    // ∂G_k/∂θ_l at upright = −m_t g Σ_{i ≥ max(k,l)} l_ci
    let mtg = model.total_mass() * model.gravity();
    let seg = model.segments();
    let dg = DMatrix::from_fn(n, n, |k, l| -mtg * seg[k.max(l)..].iter().map(|s| s.com_offset).sum::<f64>());
    let minv = m0.cholesky().expect("mass matrix is positive definite").inverse();
    let mut a = DMatrix::zeros(2 * n, 2 * n);
    a.view_mut((0, n), (n, n)).copy_from(&DMatrix::identity(n, n));
    a.view_mut((n, 0), (n, n)).copy_from(&(-&minv * dg));
    let mut b = DMatrix::zeros(2 * n, n);
    b.view_mut((n, 0), (n, n)).copy_from(&minv);
    LinearPlant { a_matrix: a, b_matrix: b }
}

pub fn build_r(spec: &LqrSpec) -> Result<DMatrix<f64>> {
    spec.validate(spec.beta.len())?;
    Ok(DMatrix::from_diagonal(&DVector::from_iterator(
        spec.beta.len(),
        spec.beta.iter().map(|b| spec.alpha * b),
    )))
}

pub fn care_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let rinv = r.clone().try_inverse().unwrap_or_else(|| DMatrix::from_element(r.nrows(), r.ncols(), f64::NAN));
    let res = a.transpose() * p + p * a - p * b * &rinv * b.transpose() * p + q;
    res.norm() / p.norm().max(f64::MIN_POSITIVE)
}

const CARE_TOL: f64 = 1e-10;
const CARE_ACCEPT: f64 = 1e-8;
const CARE_MAX_ITER: usize = 200;

/// Newton–Kleinman iteration started from a Bass stabilizing gain.
pub fn lqr_gain(plant: &LinearPlant, spec: &LqrSpec) -> Result<LqrGain> {
    let n = plant.dof();
    let a = &plant.a_matrix;
    let b = &plant.b_matrix;
    if a.shape() != (2 * n, 2 * n) || b.nrows() != 2 * n {
        return Err(Error::Contract("plant matrices have inconsistent shapes".into()));
    }
    spec.validate(n)?;
    let q = spec.q(n)?;
    let r = build_r(spec)?;
    let rinv = r.clone().try_inverse().ok_or_else(|| Error::Validation("R is singular".into()))?;
    let nx = 2 * n;

    let mut k = if spectral_abscissa(a) < 0.0 {
        DMatrix::zeros(n, nx)
    } else {
        let shift = a.norm() + 1.0;
        let ash = a + DMatrix::identity(nx, nx) * shift;
        let z = lyapunov(&ash, &(b * b.transpose() * 2.0))?;
        let zinv = z.try_inverse().ok_or_else(|| Error::Synthesis {
            message: "plant is not controllable (singular Bass Gramian)".into(),
            residual: f64::NAN,
        })?;
        b.transpose() * zinv
    };
    if spectral_abscissa(&(a - b * &k)) >= 0.0 {
        return Err(Error::Synthesis { message: "no stabilizing initial gain".into(), residual: f64::NAN });
    }

    let mut p = DMatrix::zeros(nx, nx);
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    for it in 1..=CARE_MAX_ITER {
        iterations = it;
        let acl = a - b * &k;
        let w = -(&q + k.transpose() * &r * &k);
        p = lyapunov(&acl.transpose(), &w)?;
        let k_next = &rinv * b.transpose() * &p;
        let step = (&k_next - &k).norm() / k_next.norm().max(f64::MIN_POSITIVE);
        k = k_next;
        residual = care_residual(a, b, &q, &r, &p);
        if !residual.is_finite() {
            break;
        }
        if residual < CARE_TOL || step < 1e-15 {
            break;
        }
    }
    if !(residual < CARE_ACCEPT) {
        return Err(Error::Synthesis {
            message: format!("Newton-Kleinman did not converge after {iterations} iterations"),
            residual,
        });
    }
    let abscissa = spectral_abscissa(&(a - b * &k));
    if abscissa >= 0.0 {
        return Err(Error::Synthesis {
            message: format!("closed loop is not Hurwitz (max Re λ = {abscissa:e})"),
            residual,
        });
    }
    Ok(LqrGain { gain: k, riccati: p, relative_residual: residual, iterations })
}

/// Convenience: linearize the model and synthesize its gain.
pub fn synthesize(model: &PendulumModel, spec: &LqrSpec) -> Result<LqrGain> {
    lqr_gain(&linearize(model), spec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputMatrices {
    /// 1×2n, plate reading y₁ = −F_x.
    pub c_matrix: DMatrix<f64>,
    /// 1×n
    pub d1_matrix: DMatrix<f64>,
    /// 1×n pin-joint torque selector.
    pub d2_matrix: DMatrix<f64>,
}

pub fn output_matrices(model: &PendulumModel, plant: &LinearPlant) -> OutputMatrices {
    let n = model.dof();
    let seg = model.segments();
    // x-row of the COM Jacobian at upright, padded with zeros for the angle half.
    let mut jx = DMatrix::zeros(1, 2 * n);
    for k in 0..n {
        jx[(0, n + k)] = -seg[k..].iter().map(|s| s.com_offset).sum::<f64>();
    }
    let mt = model.total_mass();
    let c = &jx * &plant.a_matrix * -mt;
    let d1 = &jx * &plant.b_matrix * -mt;
    let mut d2 = DMatrix::zeros(1, n);
    d2[(0, 0)] = 1.0;
    OutputMatrices { c_matrix: c, d1_matrix: d1, d2_matrix: d2 }
}

pub fn exo_torque(spec: &ExoSpec, state: &JointState, model: &PendulumModel) -> Result<f64> {
    model.check_state(state)?;
    spec.validate()?;
    if spec.gait() != model.gait() {
        return Err(Error::Validation(format!(
            "exoskeleton mode {:?} does not apply to a {} model",
            spec,
            model.gait().name()
        )));
    }
    Ok(spec.torque_raw(model, &state.angles, &state.rates))
}
