//! Planar inverted-pendulum body models.
//!
//! The body is a serial chain of rigid links in the sagittal plane with relative
//! joint angles θ. Absolute link angles are the cumulative sums φᵢ = θ₁ + … + θᵢ.
//! The whole-body mass m_t is lumped at the COM point
//!
//! ```text
//! x_m = −Σ l_ci sin φᵢ,   z_m = Σ l_ci cos φᵢ
//! ```
//!
//! and each link additionally carries its rotational inertia Iᵢ. The Lagrangian
//! is T = ½ m_t |ṙ_m|² + ½ Σ Iᵢ φ̇ᵢ², V = m_t g z_m, so the ground reaction
//! F = m_t (r̈_m + g) balances the same dynamics that the joints see.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STANDARD_GRAVITY: f64 = 9.8;

/// Largest supported chain length. Stance uses all three links.
pub const MAX_DOF: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentParams {
    /// kg
    pub mass: f64,
    /// m
    pub length: f64,
    /// Distance from the lower joint to the link's lumped COM, m.
    pub com_offset: f64,
    /// kg·m² about the link COM.
    pub inertia: f64,
}

impl SegmentParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.mass > 0.0
            && self.length > 0.0
            && self.com_offset > 0.0
            && self.com_offset <= self.length
            && self.inertia > 0.0
            && [self.mass, self.length, self.com_offset, self.inertia]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid segment parameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gait {
    /// Ankle, knee and hip (shank, thigh, HAT).
    Stance,
    /// Knee pin and hip (thigh, HAT).
    Kneeling,
}

impl Gait {
    pub fn dof(self) -> usize {
        match self {
            Gait::Stance => 3,
            Gait::Kneeling => 2,
        }
    }

    /// Index of the knee joint within the state vector.
    pub fn knee_index(self) -> usize {
        match self {
            Gait::Stance => 1,
            Gait::Kneeling => 0,
        }
    }

    /// Anatomical joint numbers (1 = ankle, 2 = knee, 3 = hip).
    pub fn joint_numbers(self) -> &'static [usize] {
        match self {
            Gait::Stance => &[1, 2, 3],
            Gait::Kneeling => &[2, 3],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Gait::Stance => "stance",
            Gait::Kneeling => "kneeling",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelDoc", into = "ModelDoc")]
pub struct PendulumModel {
    gait: Gait,
    segments: Vec<SegmentParams>,
    gravity: f64,
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    gait: Gait,
    segments: Vec<SegmentParams>,
    #[serde(default = "default_gravity")]
    gravity: f64,
}

fn default_gravity() -> f64 {
    STANDARD_GRAVITY
}

impl TryFrom<ModelDoc> for PendulumModel {
    type Error = Error;
    fn try_from(doc: ModelDoc) -> Result<Self> {
        PendulumModel::new(doc.gait, doc.segments, doc.gravity)
    }
}

impl From<PendulumModel> for ModelDoc {
    fn from(m: PendulumModel) -> Self {
        ModelDoc { gait: m.gait, segments: m.segments, gravity: m.gravity }
    }
}

impl PendulumModel {
    pub fn new(gait: Gait, segments: Vec<SegmentParams>, gravity: f64) -> Result<Self> {
        if segments.len() != gait.dof() {
            return Err(Error::Validation(format!(
                "{} model needs {} segments, got {}",
                gait.name(),
                gait.dof(),
                segments.len()
            )));
        }
        for s in &segments {
            s.validate()?;
        }
        if !(gravity > 0.0 && gravity.is_finite()) {
            return Err(Error::Validation(format!("gravity must be positive, got {gravity}")));
        }
        Ok(Self { gait, segments, gravity })
    }

    /// Stance body (shank, thigh, HAT).
    pub fn tip_default() -> Self {
        let seg = |mass, length, com_offset, inertia| SegmentParams { mass, length, com_offset, inertia };
        Self::new(
            Gait::Stance,
            vec![seg(6.0, 0.6, 0.3, 0.264), seg(14.0, 0.42, 0.1, 0.1722), seg(48.0, 0.7, 0.45, 0.441)],
            STANDARD_GRAVITY,
        )
        .expect("preset is valid")
    }

    /// Kneeling body (thigh, HAT) pinned at the knee.
    pub fn dip_default() -> Self {
        let seg = |mass, length, com_offset, inertia| SegmentParams { mass, length, com_offset, inertia };
        Self::new(
            Gait::Kneeling,
            vec![seg(20.0, 0.568, 0.284, 0.5), seg(42.0, 0.622, 0.311, 3.5)],
            STANDARD_GRAVITY,
        )
        .expect("preset is valid")
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tip-default" => Ok(Self::tip_default()),
            "dip-default" => Ok(Self::dip_default()),
            other => Err(Error::Validation(format!(
                "unknown model preset '{other}' (expected tip-default or dip-default)"
            ))),
        }
    }

    pub fn gait(&self) -> Gait {
        self.gait
    }

    pub fn segments(&self) -> &[SegmentParams] {
        &self.segments
    }

    pub fn gravity(&self) -> f64 {
        self.gravity
    }

    pub fn dof(&self) -> usize {
        self.segments.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.segments.iter().map(|s| s.mass).sum()
    }

    /// COM height with every joint at zero.
    pub fn upright_com_height(&self) -> f64 {
        self.segments.iter().map(|s| s.com_offset).sum()
    }

    pub fn check_state(&self, state: &JointState) -> Result<()> {
        let n = self.dof();
        if state.angles.len() != n || state.rates.len() != n {
            return Err(Error::Contract(format!(
                "state dimension ({}, {}) does not match {} model with {n} joints",
                state.angles.len(),
                state.rates.len(),
                self.gait.name()
            )));
        }
        Ok(())
    }

    fn check_vec(&self, v: &[f64], what: &str) -> Result<()> {
        if v.len() != self.dof() {
            return Err(Error::Contract(format!(
                "{what} has dimension {}, model has {} joints",
                v.len(),
                self.dof()
            )));
        }
        Ok(())
    }

    /// M, C, G on stack arrays. Entries beyond `dof` are zero.
    pub(crate) fn terms_raw(&self, q: &[f64], qd: &[f64]) -> RawTerms {
        let n = self.dof();
        let mt = self.total_mass();
        let g = self.gravity;
        let mut phi = [0.0; MAX_DOF];
        let mut phid = [0.0; MAX_DOF];
        let mut acc = 0.0;
        let mut accd = 0.0;
        for i in 0..n {
            acc += q[i];
            accd += qd[i];
            phi[i] = acc;
            phid[i] = accd;
        }
        let mut s = [0.0; MAX_DOF];
        let mut c = [0.0; MAX_DOF];
        for i in 0..n {
            let (si, ci) = phi[i].sin_cos();
            s[i] = si;
            c[i] = ci;
        }

        // Absolute-coordinate terms.
        let mut ma = [[0.0; MAX_DOF]; MAX_DOF];
        let mut ca = [[0.0; MAX_DOF]; MAX_DOF];
        let mut ga = [0.0; MAX_DOF];
        for i in 0..n {
            let ai = self.segments[i].com_offset;
            for j in 0..n {
                let aj = self.segments[j].com_offset;
                let cos_ij = c[i] * c[j] + s[i] * s[j];
                let sin_ij = s[i] * c[j] - c[i] * s[j];
                ma[i][j] = mt * ai * aj * cos_ij;
                ca[i][j] = mt * ai * aj * sin_ij * phid[j];
            }
            ma[i][i] += self.segments[i].inertia;
            ga[i] = -mt * g * ai * s[i];
        }

        // Map to relative coordinates: X = Tᵀ X_abs T with T lower-triangular ones,
        // i.e. X_kl = Σ_{i≥k} Σ_{j≥l} X_abs_ij.
        let project = |a: &[[f64; MAX_DOF]; MAX_DOF]| {
            let mut out = [[0.0; MAX_DOF]; MAX_DOF];
            for k in 0..n {
                for l in 0..n {
                    let mut sum = 0.0;
                    for row in a.iter().take(n).skip(k) {
                        for v in row.iter().take(n).skip(l) {
                            sum += v;
                        }
                    }
                    out[k][l] = sum;
                }
            }
            out
        };
        let m = project(&ma);
        let cc = project(&ca);
        let mut gg = [0.0; MAX_DOF];
        for k in 0..n {
            gg[k] = ga[k..n].iter().sum();
        }
        RawTerms { n, m, c: cc, g: gg }
    }

    /// θ̈ = M⁻¹(τ − C θ̇ − G), written into `out`.
    pub(crate) fn accel_raw(&self, q: &[f64], qd: &[f64], tau: &[f64], out: &mut [f64]) {
        let t = self.terms_raw(q, qd);
        let n = t.n;
        let mut rhs = [0.0; MAX_DOF];
        for i in 0..n {
            let mut r = tau[i] - t.g[i];
            for j in 0..n {
                r -= t.c[i][j] * qd[j];
            }
            rhs[i] = r;
        }
        let x = solve_spd(&t.m, &rhs, n);
        out[..n].copy_from_slice(&x[..n]);
    }

    /// COM position, velocity and acceleration given joint accelerations.
    pub(crate) fn com_raw(&self, q: &[f64], qd: &[f64], qdd: &[f64]) -> ComRaw {
        let n = self.dof();
        let mut phi = 0.0;
        let mut phid = 0.0;
        let mut phidd = 0.0;
        let mut out = ComRaw::default();
        for i in 0..n {
            phi += q[i];
            phid += qd[i];
            phidd += qdd[i];
            let a = self.segments[i].com_offset;
            let (s, c) = phi.sin_cos();
            out.x -= a * s;
            out.z += a * c;
            out.xd -= a * c * phid;
            out.zd -= a * s * phid;
            out.xdd += a * (s * phid * phid - c * phidd);
            out.zdd -= a * (c * phid * phid + s * phidd);
        }
        out
    }

    pub(crate) fn grf_raw(&self, com: &ComRaw) -> (f64, f64) {
        let mt = self.total_mass();
        (mt * com.xdd, mt * (com.zdd + self.gravity))
    }

    pub fn kinetic_energy(&self, state: &JointState) -> Result<f64> {
        self.check_state(state)?;
        let t = self.terms_raw(&state.angles, &state.rates);
        let qd = &state.rates;
        let mut e = 0.0;
        for i in 0..t.n {
            for j in 0..t.n {
                e += qd[i] * t.m[i][j] * qd[j];
            }
        }
        Ok(0.5 * e)
    }

    pub fn potential_energy(&self, angles: &[f64]) -> Result<f64> {
        self.check_vec(angles, "angle vector")?;
        let zeros = [0.0; MAX_DOF];
        let com = self.com_raw(angles, &zeros, &zeros);
        Ok(self.total_mass() * self.gravity * com.z)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct RawTerms {
    pub n: usize,
    pub m: [[f64; MAX_DOF]; MAX_DOF],
    pub c: [[f64; MAX_DOF]; MAX_DOF],
    pub g: [f64; MAX_DOF],
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct ComRaw {
    pub x: f64,
    pub z: f64,
    pub xd: f64,
    pub zd: f64,
    pub xdd: f64,
    pub zdd: f64,
}

/// Cholesky solve for a small SPD system.
fn solve_spd(a: &[[f64; MAX_DOF]; MAX_DOF], b: &[f64; MAX_DOF], n: usize) -> [f64; MAX_DOF] {
    let mut l = [[0.0; MAX_DOF]; MAX_DOF];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = [0.0; MAX_DOF];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = [0.0; MAX_DOF];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    x
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    /// Relative joint angles, rad. Zero is upright.
    pub angles: Vec<f64>,
    /// rad/s
    pub rates: Vec<f64>,
}

impl JointState {
    pub fn zeros(n: usize) -> Self {
        Self { angles: vec![0.0; n], rates: vec![0.0; n] }
    }

    pub fn new(angles: Vec<f64>, rates: Vec<f64>) -> Self {
        Self { angles, rates }
    }

    pub fn dim(&self) -> usize {
        self.angles.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsTerms {
    pub mass_matrix: DMatrix<f64>,
    pub coriolis_matrix: DMatrix<f64>,
    pub gravity_vector: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateDerivative {
    pub rates: Vec<f64>,
    pub accelerations: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComKinematics {
    /// (x_m, z_m), m
    pub position: [f64; 2],
    /// 2×n, rows x and z.
    pub jacobian: DMatrix<f64>,
    pub jacobian_rate: DMatrix<f64>,
}

/// Ground reaction force on the body. `fx` follows the body frame (F_x = m_t ẍ_m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundReaction {
    /// N
    pub fx: f64,
    /// N
    pub fz: f64,
}

pub fn dynamics_terms(model: &PendulumModel, state: &JointState) -> Result<DynamicsTerms> {
    model.check_state(state)?;
    let t = model.terms_raw(&state.angles, &state.rates);
    let n = t.n;
    Ok(DynamicsTerms {
        mass_matrix: DMatrix::from_fn(n, n, |i, j| t.m[i][j]),
        coriolis_matrix: DMatrix::from_fn(n, n, |i, j| t.c[i][j]),
        gravity_vector: DVector::from_fn(n, |i, _| t.g[i]),
    })
}

pub fn forward_dynamics(model: &PendulumModel, state: &JointState, torques: &[f64]) -> Result<StateDerivative> {
    model.check_state(state)?;
    model.check_vec(torques, "torque vector")?;
    let mut acc = [0.0; MAX_DOF];
    model.accel_raw(&state.angles, &state.rates, torques, &mut acc);
    Ok(StateDerivative { rates: state.rates.clone(), accelerations: acc[..model.dof()].to_vec() })
}

pub fn com_kinematics(model: &PendulumModel, state: &JointState) -> Result<ComKinematics> {
    model.check_state(state)?;
    let n = model.dof();
    let mut jac = DMatrix::zeros(2, n);
    let mut jac_rate = DMatrix::zeros(2, n);
    let mut phi = [0.0; MAX_DOF];
    let mut phid = [0.0; MAX_DOF];
    let (mut a, mut ad) = (0.0, 0.0);
    for i in 0..n {
        a += state.angles[i];
        ad += state.rates[i];
        phi[i] = a;
        phid[i] = ad;
    }
    for k in 0..n {
        for i in k..n {
            let l = model.segments[i].com_offset;
            let (s, c) = phi[i].sin_cos();
            jac[(0, k)] -= l * c;
            jac[(1, k)] -= l * s;
            jac_rate[(0, k)] += l * s * phid[i];
            jac_rate[(1, k)] -= l * c * phid[i];
        }
    }
    let zeros = [0.0; MAX_DOF];
    let com = model.com_raw(&state.angles, &zeros, &zeros);
    Ok(ComKinematics { position: [com.x, com.z], jacobian: jac, jacobian_rate: jac_rate })
}

pub fn ground_reaction(model: &PendulumModel, state: &JointState, accelerations: &[f64]) -> Result<GroundReaction> {
    model.check_state(state)?;
    model.check_vec(accelerations, "acceleration vector")?;
    let com = model.com_raw(&state.angles, &state.rates, accelerations);
    let (fx, fz) = model.grf_raw(&com);
    Ok(GroundReaction { fx, fz })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn lean(model: &PendulumModel, angles: &[f64], rates: &[f64]) -> JointState {
        assert_eq!(angles.len(), model.dof());
        JointState::new(angles.to_vec(), rates.to_vec())
    }

    #[test]
    fn upright_is_equilibrium() {
        let m = PendulumModel::tip_default();
        let t = dynamics_terms(&m, &JointState::zeros(3)).unwrap();
        assert!(t.gravity_vector.iter().all(|&g| g == 0.0));
        let d = forward_dynamics(&m, &JointState::zeros(3), &[0.0; 3]).unwrap();
        assert!(d.accelerations.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn coriolis_vanishes_at_rest() {
        let m = PendulumModel::tip_default();
        let s = lean(&m, &[0.1, -0.2, 0.15], &[0.0; 3]);
        let t = dynamics_terms(&m, &s).unwrap();
        assert!((&t.coriolis_matrix * DVector::from_vec(s.rates.clone())).norm() == 0.0);
    }

    #[test]
    fn upright_com_height() {
        let s = PendulumModel::tip_default();
        let k = PendulumModel::dip_default();
        let cs = com_kinematics(&s, &JointState::zeros(3)).unwrap();
        let ck = com_kinematics(&k, &JointState::zeros(2)).unwrap();
        assert_relative_eq!(cs.position[1], 0.85, epsilon = 1e-15);
        assert_eq!(cs.position[0], 0.0);
        assert_relative_eq!(ck.position[1], 0.595, epsilon = 1e-15);
    }

    #[test]
    fn grf_at_rest() {
        let s = PendulumModel::tip_default();
        let k = PendulumModel::dip_default();
        let g = ground_reaction(&s, &JointState::zeros(3), &[0.0; 3]).unwrap();
        assert_eq!(g.fx, 0.0);
        assert_relative_eq!(g.fz, 666.4, epsilon = 1e-9);
        let g = ground_reaction(&k, &JointState::zeros(2), &[0.0; 2]).unwrap();
        assert_relative_eq!(g.fz, 607.6, epsilon = 1e-9);
    }

    /// Kinetic energy from finite-differenced COM velocity plus link spins.
    fn ke_oracle(model: &PendulumModel, q: &[f64], qd: &[f64]) -> f64 {
        let h = 1e-6;
        let pos = |q: &[f64]| {
            let st = JointState::new(q.to_vec(), vec![0.0; q.len()]);
            com_kinematics(model, &st).unwrap().position
        };
        let qp: Vec<f64> = q.iter().zip(qd).map(|(a, b)| a + h * b).collect();
        let qm: Vec<f64> = q.iter().zip(qd).map(|(a, b)| a - h * b).collect();
        let (p, m) = (pos(&qp), pos(&qm));
        let v = [(p[0] - m[0]) / (2.0 * h), (p[1] - m[1]) / (2.0 * h)];
        let mut ke = 0.5 * model.total_mass() * (v[0] * v[0] + v[1] * v[1]);
        let mut phid = 0.0;
        for (i, seg) in model.segments().iter().enumerate() {
            phid += qd[i];
            ke += 0.5 * seg.inertia * phid * phid;
        }
        ke
    }

    #[test]
    fn mass_matrix_matches_kinetic_energy_oracle() {
        for model in [PendulumModel::tip_default(), PendulumModel::dip_default()] {
            let n = model.dof();
            for q in [vec![0.0; n], (0..n).map(|i| 0.2 - 0.15 * i as f64).collect::<Vec<_>>()] {
                let m = dynamics_terms(&model, &JointState::new(q.clone(), vec![0.0; n])).unwrap().mass_matrix;
                for i in 0..n {
                    for j in 0..n {
                        let e = |k: usize| (0..n).map(|r| if r == k { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
                        let both: Vec<f64> = e(i).iter().zip(e(j)).map(|(a, b)| a + b).collect();
                        let mij = if i == j {
                            2.0 * ke_oracle(&model, &q, &e(i))
                        } else {
                            ke_oracle(&model, &q, &both) - ke_oracle(&model, &q, &e(i)) - ke_oracle(&model, &q, &e(j))
                        };
                        assert_relative_eq!(m[(i, j)], mij, max_relative = 1e-7, epsilon = 1e-7);
                    }
                }
            }
        }
    }

    #[test]
    fn ankle_inertia_at_upright() {
        // Whole-body mass at the COM height plus every link's spin inertia.
        let m = PendulumModel::tip_default();
        let t = dynamics_terms(&m, &JointState::zeros(3)).unwrap();
        let expect = 0.264 + 0.1722 + 0.441 + 68.0 * 0.85 * 0.85;
        assert_relative_eq!(t.mass_matrix[(0, 0)], expect, max_relative = 1e-14);
    }

    #[test]
    fn gravity_is_potential_gradient() {
        let model = PendulumModel::tip_default();
        let q = [0.12, -0.3, 0.2];
        let g = dynamics_terms(&model, &lean(&model, &q, &[0.0; 3])).unwrap().gravity_vector;
        let h = 1e-6;
        for k in 0..3 {
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            let fd = (model.potential_energy(&qp).unwrap() - model.potential_energy(&qm).unwrap()) / (2.0 * h);
            assert_relative_eq!(g[k], fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let model = PendulumModel::tip_default();
        let q = [0.1, 0.25, -0.4];
        let qd = [0.3, -0.5, 0.9];
        let ck = com_kinematics(&model, &lean(&model, &q, &qd)).unwrap();
        let h = 1e-6;
        let pos = |q: &[f64]| com_kinematics(&model, &lean(&model, q, &[0.0; 3])).unwrap().position;
        let jac = |q: &[f64]| com_kinematics(&model, &lean(&model, q, &[0.0; 3])).unwrap().jacobian;
        for k in 0..3 {
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            let (p, m) = (pos(&qp), pos(&qm));
            for r in 0..2 {
                assert_relative_eq!(ck.jacobian[(r, k)], (p[r] - m[r]) / (2.0 * h), max_relative = 1e-6);
            }
        }
        let qp: Vec<f64> = q.iter().zip(&qd).map(|(a, b)| a + h * b).collect();
        let qm: Vec<f64> = q.iter().zip(&qd).map(|(a, b)| a - h * b).collect();
        let fd = (jac(&qp) - jac(&qm)) / (2.0 * h);
        assert_relative_eq!(ck.jacobian_rate, fd, max_relative = 1e-6, epsilon = 1e-9);
    }

    #[test]
    fn presets_and_validation() {
        assert!(PendulumModel::preset("tip-default").is_ok());
        assert!(PendulumModel::preset("nope").is_err());
        let bad = SegmentParams { mass: 1.0, length: 0.2, com_offset: 0.3, inertia: 0.1 };
        assert!(PendulumModel::new(Gait::Kneeling, vec![bad, bad], 9.8).is_err());
        assert!(PendulumModel::new(Gait::Stance, PendulumModel::dip_default().segments().to_vec(), 9.8).is_err());
        assert!(dynamics_terms(&PendulumModel::tip_default(), &JointState::zeros(2)).is_err());
    }

    #[test]
    fn json_round_trip() {
        let m = PendulumModel::dip_default();
        let s = serde_json::to_string(&m).unwrap();
        let back: PendulumModel = serde_json::from_str(&s).unwrap();
        assert_eq!(m, back);
        let bad = r#"{"gait":"stance","segments":[]}"#;
        assert!(serde_json::from_str::<PendulumModel>(bad).is_err());
    }

    fn state_strategy(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (
            prop::collection::vec(-0.3f64..0.3, n),
            prop::collection::vec(-1.0f64..1.0, n),
            prop::collection::vec(-50.0f64..50.0, n),
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn mass_matrix_symmetric_positive_definite((q, qd, _) in state_strategy(3)) {
            let t = dynamics_terms(&PendulumModel::tip_default(), &JointState::new(q, qd)).unwrap();
            let m = t.mass_matrix;
            prop_assert!((&m - m.transpose()).amax() < 1e-12);
            let eig = m.symmetric_eigen().eigenvalues;
            prop_assert!(eig.min() > 0.0);
        }

        #[test]
        fn forward_dynamics_round_trip((q, qd, tau) in state_strategy(3)) {
            let model = PendulumModel::tip_default();
            let st = JointState::new(q, qd.clone());
            let acc = forward_dynamics(&model, &st, &tau).unwrap().accelerations;
            let t = dynamics_terms(&model, &st).unwrap();
            let res = &t.mass_matrix * DVector::from_vec(acc) + &t.coriolis_matrix * DVector::from_vec(qd)
                + &t.gravity_vector - DVector::from_vec(tau);
            prop_assert!(res.norm() < 1e-10);
        }

        #[test]
        fn mdot_minus_two_c_is_skew((q, qd, _) in state_strategy(3)) {
            let model = PendulumModel::tip_default();
            let h = 1e-6;
            let at = |s: f64| {
                let qs: Vec<f64> = q.iter().zip(&qd).map(|(a, b)| a + s * b).collect();
                dynamics_terms(&model, &JointState::new(qs, qd.clone())).unwrap().mass_matrix
            };
            let mdot = (at(h) - at(-h)) / (2.0 * h);
            let c = dynamics_terms(&model, &JointState::new(q.clone(), qd.clone())).unwrap().coriolis_matrix;
            let n = &mdot - 2.0 * &c;
            prop_assert!((&n + n.transpose()).amax() < 1e-6);
        }
    }
}
