//! Intersection-point (IP) height per frequency band and the crossover / HFA
//! descriptors of the resulting curve.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GroundReaction;
use crate::signal::{hann, BandSpec, FilterBank};
use crate::sim::TrialSeries;

/// Bands whose regression explains less than this fraction of q are unreliable.
pub const MIN_BAND_R2: f64 = 0.1;
pub const MIN_SLOPE: f64 = 1e-9;
pub const MIN_BAND_SAMPLES: usize = 100;
/// Descriptor definition tag carried in reports.
pub const DESCRIPTOR_DEFINITION: &str = "exp3-v1: y = c0 + c1*exp(-c2*f) by damped least squares on reliable bands; \
crossover = smallest f with y(f) = 1 (raw linear crossing as fallback); hfa_slope = dy/df at the top band; \
tail_slope = OLS over the top 15 bands";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    /// Hz
    pub rate: f64,
}

impl SamplingSpec {
    pub fn new(rate: f64) -> Result<Self> {
        if rate > 0.0 && rate.is_finite() {
            Ok(Self { rate })
        } else {
            Err(Error::Validation(format!("sample rate must be positive, got {rate}")))
        }
    }

    /// δt, s
    pub fn step(&self) -> f64 {
        1.0 / self.rate
    }
}

/// Signed GRF inclination q = fx / fz.
pub fn q_angle(grf: &[GroundReaction]) -> Result<Vec<f64>> {
    grf.iter()
        .enumerate()
        .map(|(k, g)| {
            if g.fz > 0.0 {
                Ok(g.fx / g.fz)
            } else {
                Err(Error::Degenerate(format!("fz = {} N at sample {k}", g.fz)))
            }
        })
        .collect()
}

/// Sample-to-sample IP height, h(t) = Δcop / Δq over one step δt.
/// Steps with |Δq| below `MIN_SLOPE` give NaN.
pub fn pointwise_heights(cop: &[f64], q: &[f64], sampling: SamplingSpec) -> Result<Vec<f64>> {
    if cop.len() != q.len() {
        return Err(Error::Contract("cop and q differ in length".into()));
    }
    let _ = sampling.step();
    Ok(cop
        .windows(2)
        .zip(q.windows(2))
        .map(|(c, g)| {
            let dq = g[1] - g[0];
            if dq.abs() < MIN_SLOPE {
                f64::NAN
            } else {
                (c[1] - c[0]) / dq
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandEstimate {
    /// m
    pub height: f64,
    /// rad per m of COP
    pub slope: f64,
    pub r2: f64,
    pub reliable: bool,
}

/// Zero-intercept regression q_b ≈ s·cop_b, h = 1/s.
pub fn ip_height_band(cop_b: &[f64], q_b: &[f64]) -> Result<BandEstimate> {
    if cop_b.len() != q_b.len() {
        return Err(Error::Contract(format!("band series lengths differ ({} vs {})", cop_b.len(), q_b.len())));
    }
    if cop_b.len() < MIN_BAND_SAMPLES {
        return Err(Error::Contract(format!("band regression needs ≥ {MIN_BAND_SAMPLES} samples")));
    }
    let (mut scc, mut sqq, mut scq) = (0.0, 0.0, 0.0);
    for (c, q) in cop_b.iter().zip(q_b) {
        scc += c * c;
        sqq += q * q;
        scq += c * q;
    }
    Ok(band_from_sums(scc, sqq, scq))
}

fn band_from_sums(scc: f64, sqq: f64, scq: f64) -> BandEstimate {
    let degenerate = !(scc > 0.0 && sqq > 0.0) || !(scc.is_finite() && sqq.is_finite());
    if degenerate {
        return BandEstimate { height: f64::NAN, slope: 0.0, r2: 0.0, reliable: false };
    }
    let slope = scq / scc;
    let r2 = (scq * scq / (scc * sqq)).clamp(0.0, 1.0);
    let reliable = slope.abs() >= MIN_SLOPE && r2 >= MIN_BAND_R2;
    let height = if slope != 0.0 { 1.0 / slope } else { f64::NAN };
    BandEstimate { height, slope, r2, reliable }
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|x| x.is_finite().then_some(*x)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Option<f64>>::deserialize(d)?.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpCurve {
    /// Hz
    pub band_centers: Vec<f64>,
    /// m; NaN where undefined.
    #[serde(with = "nan_as_null")]
    pub ip_height: Vec<f64>,
    #[serde(with = "nan_as_null")]
    pub normalized: Vec<f64>,
    /// m
    pub reference_height: f64,
    pub regression_r2: Vec<f64>,
    pub reliable: Vec<bool>,
}

impl IpCurve {
    pub fn len(&self) -> usize {
        self.band_centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.band_centers.is_empty()
    }

    pub fn reliable_count(&self) -> usize {
        self.reliable.iter().filter(|r| **r).count()
    }

    /// Same heights against another reference.
    pub fn renormalized(&self, reference_height: f64) -> Result<Self> {
        check_reference(reference_height)?;
        let mut out = self.clone();
        out.reference_height = reference_height;
        out.normalized = out.ip_height.iter().map(|h| h / reference_height).collect();
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.band_centers.len();
        if [self.ip_height.len(), self.normalized.len(), self.regression_r2.len(), self.reliable.len()]
            .iter()
            .any(|l| *l != n)
        {
            return Err(Error::Validation("IP curve fields have unequal lengths".into()));
        }
        check_reference(self.reference_height)?;
        if self.regression_r2.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Validation("r² outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Builds a curve from heights and r² values, deriving the reliability flags.
    pub fn from_heights(band_centers: Vec<f64>, ip_height: Vec<f64>, regression_r2: Vec<f64>, reference_height: f64) -> Result<Self> {
        check_reference(reference_height)?;
        let reliable = ip_height
            .iter()
            .zip(&regression_r2)
            .map(|(h, r)| h.is_finite() && *h != 0.0 && (1.0 / h).abs() >= MIN_SLOPE && *r >= MIN_BAND_R2)
            .collect();
        let normalized = ip_height.iter().map(|h| h / reference_height).collect();
        let c = Self { band_centers, ip_height, normalized, reference_height, regression_r2, reliable };
        c.validate()?;
        Ok(c)
    }
}

fn check_reference(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::Validation(format!("reference height must be positive, got {h}")))
    }
}

/// `grf` is the force on the plate; the COP and the GRF share its sign convention.
pub fn ip_curve(cop: &[f64], grf: &[GroundReaction], spec: &BandSpec, reference_height: f64) -> Result<IpCurve> {
    ip_curve_with(cop, grf, &FilterBank::new(spec)?, reference_height)
}

pub fn ip_curve_with(cop: &[f64], grf: &[GroundReaction], bank: &FilterBank, reference_height: f64) -> Result<IpCurve> {
    check_reference(reference_height)?;
    if cop.len() != grf.len() {
        return Err(Error::Contract(format!("cop has {} samples, grf has {}", cop.len(), grf.len())));
    }
    let q = q_angle(grf)?;
    let wc = hann(cop)?;
    let wq = hann(&q)?;
    let spec = bank.spec();
    let mut est = Vec::with_capacity(spec.len());
    for f in bank.filters() {
        let cb = f.apply_zero_lag(&wc);
        let qb = f.apply_zero_lag(&wq);
        est.push(ip_height_band(&cb, &qb)?);
    }
    let curve = IpCurve {
        band_centers: spec.centers.clone(),
        ip_height: est.iter().map(|e| e.height).collect(),
        normalized: est.iter().map(|e| e.height / reference_height).collect(),
        reference_height,
        regression_r2: est.iter().map(|e| e.r2).collect(),
        reliable: est.iter().map(|e| e.reliable).collect(),
    };
    if 2 * curve.reliable_count() < curve.len() {
        return Err(Error::Degenerate(format!(
            "only {} of {} bands are reliable",
            curve.reliable_count(),
            curve.len()
        )));
    }
    Ok(curve)
}

/// IP curve of a simulated trial, reading its forces as a plate would.
pub fn trial_ip_curve(series: &TrialSeries, bank: &FilterBank, reference_height: f64) -> Result<IpCurve> {
    if series.failed() {
        return Err(Error::Degenerate(format!("trial {} failed", series.trial_index)));
    }
    ip_curve_with(&series.cop_x, &series.plate_grf(), bank, reference_height)
}

/// Band-wise mean of heights over the curves that are reliable in that band.
pub fn mean_curve(curves: &[IpCurve]) -> Result<IpCurve> {
    let first = curves.first().ok_or_else(|| Error::Validation("no curves to average".into()))?;
    for c in curves {
        if c.band_centers != first.band_centers || c.reference_height != first.reference_height {
            return Err(Error::Validation("curves do not share a band grid and reference height".into()));
        }
    }
    let n = first.len();
    let mut h = vec![f64::NAN; n];
    let mut r2 = vec![0.0; n];
    let mut reliable = vec![false; n];
    for b in 0..n {
        let used: Vec<&IpCurve> = curves.iter().filter(|c| c.reliable[b]).collect();
        if !used.is_empty() {
            let k = used.len() as f64;
            h[b] = used.iter().map(|c| c.ip_height[b]).sum::<f64>() / k;
            r2[b] = used.iter().map(|c| c.regression_r2[b]).sum::<f64>() / k;
            reliable[b] = true;
        }
    }
    Ok(IpCurve {
        band_centers: first.band_centers.clone(),
        normalized: h.iter().map(|v| v / first.reference_height).collect(),
        ip_height: h,
        reference_height: first.reference_height,
        regression_r2: r2,
        reliable,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrossoverSource {
    Fit,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpDescriptors {
    /// Hz; `None` when the curve does not reach 1 inside the band range.
    pub crossover_hz: Option<f64>,
    pub crossover_source: Option<CrossoverSource>,
    /// Crossing of the fitted curve alone.
    pub fitted_crossover_hz: Option<f64>,
    /// Linear-interpolated crossing of the raw normalized points.
    pub raw_crossover_hz: Option<f64>,
    /// 1/Hz on the normalized curve.
    pub hfa_slope: f64,
    pub asymptote_level: f64,
    /// (c0, c1, c2)
    pub fit_params: [f64; 3],
    pub fit_rms: f64,
    pub fit_iterations: usize,
    /// OLS slope over the top 15 bands.
    pub tail_slope: f64,
    pub bands_used: usize,
}

pub const TAIL_BANDS: usize = 15;
const LM_MAX_ITER: usize = 500;
/// Decay-rate bounds, 1/Hz. Below C2_MIN the exponential is a straight line over
/// the analysed range and (c0, c1) drift apart without improving the fit.
pub const C2_MIN: f64 = 0.01;
pub const C2_MAX: f64 = 50.0;

fn model_eval(p: &[f64; 3], f: f64) -> f64 {
    p[0] + p[1] * (-p[2] * f).exp()
}

/// Linear least squares for (c0, c1) with c2 fixed.
fn linear_part(f: &[f64], y: &[f64], c2: f64) -> Option<([f64; 3], f64)> {
    let n = f.len() as f64;
    let e: Vec<f64> = f.iter().map(|v| (-c2 * v).exp()).collect();
    let se: f64 = e.iter().sum();
    let see: f64 = e.iter().map(|v| v * v).sum();
    let sy: f64 = y.iter().sum();
    let sey: f64 = e.iter().zip(y).map(|(a, b)| a * b).sum();
    let det = n * see - se * se;
    if det.abs() < 1e-14 * (n * see).max(1e-300) {
        return None;
    }
    let c1 = (n * sey - se * sy) / det;
    let c0 = (sy - c1 * se) / n;
    let p = [c0, c1, c2];
    let sse = f.iter().zip(y).map(|(fi, yi)| (model_eval(&p, *fi) - yi).powi(2)).sum();
    Some((p, sse))
}

/// Marquardt-damped Gauss–Newton fit of y = c0 + c1·exp(−c2 f), c2 ∈ [C2_MIN, C2_MAX].
pub fn fit_exponential(f: &[f64], y: &[f64]) -> Result<([f64; 3], f64, usize)> {
    if f.len() != y.len() || f.len() < 3 {
        return Err(Error::Descriptor("exponential fit needs ≥ 3 paired points".into()));
    }
    if y.iter().chain(f).any(|v| !v.is_finite()) {
        return Err(Error::Descriptor("non-finite values in fit input".into()));
    }
    let sse_of = |p: &[f64; 3]| f.iter().zip(y).map(|(fi, yi)| (model_eval(p, *fi) - yi).powi(2)).sum::<f64>();

    // Start from the best c2 on a log grid with (c0, c1) solved exactly.
    let mut best: Option<([f64; 3], f64)> = None;
    for k in 0..=80 {
        let c2 = C2_MIN * 10f64.powf(3.0 * k as f64 / 80.0);
        if let Some((p, sse)) = linear_part(f, y, c2) {
            if best.is_none_or(|b| sse < b.1) {
                best = Some((p, sse));
            }
        }
    }
    let (mut p, mut sse) = best.ok_or_else(|| Error::Descriptor("no usable starting point".into()))?;
    let scale = y.iter().map(|v| v * v).sum::<f64>().max(1e-300);
    if sse <= 1e-28 * scale {
        return Ok((p, sse, 0));
    }

    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut converged = false;
    let mut history = vec![sse];
    while iterations < LM_MAX_ITER {
        iterations += 1;
        // Stagnation over a window counts as convergence (e.g. c2 drifting to 0 on a line).
        if history.len() > 25 {
            let old = history[history.len() - 26];
            if (old - sse) <= 1e-6 * old + 1e-10 * scale {
                converged = true;
                break;
            }
        }
        history.push(sse);
        let mut jtj = Matrix3::<f64>::zeros();
        let mut jtr = Vector3::<f64>::zeros();
        for (fi, yi) in f.iter().zip(y) {
            let e = (-p[2] * fi).exp();
            let j = Vector3::new(1.0, e, -p[1] * fi * e);
            let r = p[0] + p[1] * e - yi;
            jtj += j * j.transpose();
            jtr += j * r;
        }
        if jtr.norm() <= 1e-14 * scale.sqrt() {
            converged = true;
            break;
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut a = jtj;
            for d in 0..3 {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let cand = [p[0] + step[0], p[1] + step[1], (p[2] + step[2]).clamp(C2_MIN, C2_MAX)];
            if !cand.iter().all(|v| v.is_finite()) {
                lambda *= 10.0;
                continue;
            }
            let s = sse_of(&cand);
            if s < sse {
                let rel = (sse - s) / sse.max(1e-300);
                p = cand;
                sse = s;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                if rel < 1e-12 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // No descent direction left: a (possibly boundary) minimum.
            converged = true;
        }
        if converged {
            break;
        }
    }
    if !converged {
        return Err(Error::Descriptor(format!(
            "exponential fit did not converge in {LM_MAX_ITER} iterations (sse {sse:e}, params {p:?})"
        )));
    }
    Ok((p, sse, iterations))
}

fn fitted_crossing(p: &[f64; 3], f_min: f64, f_max: f64) -> Option<f64> {
    let g = |f: f64| model_eval(p, f) - 1.0;
    let (a, b) = (g(f_min), g(f_max));
    if a.abs() <= 1e-9 {
        return Some(f_min);
    }
    if a * b > 0.0 {
        return None;
    }
    if p[1] == 0.0 || p[2] == 0.0 {
        return None;
    }
    let arg = (1.0 - p[0]) / p[1];
    if arg <= 0.0 {
        return None;
    }
    let f = -arg.ln() / p[2];
    (f >= f_min - 1e-12 && f <= f_max + 1e-12).then_some(f.clamp(f_min, f_max))
}

fn raw_crossing(f: &[f64], y: &[f64]) -> Option<f64> {
    if let Some(first) = y.first() {
        if (first - 1.0).abs() <= 1e-12 {
            return Some(f[0]);
        }
    }
    for k in 0..f.len().saturating_sub(1) {
        let (a, b) = (y[k] - 1.0, y[k + 1] - 1.0);
        if b == 0.0 {
            return Some(f[k + 1]);
        }
        if a * b < 0.0 {
            return Some(f[k] + (f[k + 1] - f[k]) * a / (a - b));
        }
    }
    None
}

fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.len() < 2 {
        return f64::NAN;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

pub fn descriptors(curve: &IpCurve) -> Result<IpDescriptors> {
    curve.validate()?;
    let idx: Vec<usize> = (0..curve.len()).filter(|&b| curve.reliable[b] && curve.normalized[b].is_finite()).collect();
    if idx.len() < 10 {
        return Err(Error::Descriptor(format!("need ≥ 10 reliable bands, have {}", idx.len())));
    }
    let f: Vec<f64> = idx.iter().map(|&b| curve.band_centers[b]).collect();
    let y: Vec<f64> = idx.iter().map(|&b| curve.normalized[b]).collect();
    let (p, sse, iterations) = fit_exponential(&f, &y)?;
    let f_min = curve.band_centers[0];
    let f_max = curve.band_centers[curve.len() - 1];
    let fitted = fitted_crossing(&p, f_min, f_max);
    let raw = raw_crossing(&f, &y);
    let (crossover_hz, crossover_source) = match (fitted, raw) {
        (Some(c), _) => (Some(c), Some(CrossoverSource::Fit)),
        (None, Some(c)) => (Some(c), Some(CrossoverSource::Raw)),
        (None, None) => (None, None),
    };
    let tail: Vec<usize> = idx.iter().copied().filter(|&b| b + TAIL_BANDS >= curve.len()).collect();
    let tx: Vec<f64> = tail.iter().map(|&b| curve.band_centers[b]).collect();
    let ty: Vec<f64> = tail.iter().map(|&b| curve.normalized[b]).collect();
    Ok(IpDescriptors {
        crossover_hz,
        crossover_source,
        fitted_crossover_hz: fitted,
        raw_crossover_hz: raw,
        hfa_slope: -p[1] * p[2] * (-p[2] * f_max).exp(),
        asymptote_level: p[0],
        fit_params: p,
        fit_rms: (sse / f.len() as f64).sqrt(),
        fit_iterations: iterations,
        tail_slope: ols_slope(&tx, &ty),
        bands_used: idx.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DescriptorMode {
    /// Descriptors of each curve, then averaged.
    PerSubject,
    /// Descriptors of the band-wise mean curve.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorSummary {
    pub mode: DescriptorMode,
    pub crossover_hz: Option<f64>,
    pub hfa_slope: f64,
    pub asymptote_level: f64,
    pub tail_slope: f64,
    /// Curves whose crossover was present (per-subject mode) or 1 (pooled).
    pub crossover_count: usize,
    pub curves: usize,
    pub per_curve: Vec<IpDescriptors>,
}

pub fn summarize(curves: &[IpCurve], mode: DescriptorMode) -> Result<DescriptorSummary> {
    if curves.is_empty() {
        return Err(Error::Validation("no curves to summarize".into()));
    }
    match mode {
        DescriptorMode::Pooled => {
            let d = descriptors(&mean_curve(curves)?)?;
            Ok(DescriptorSummary {
                mode,
                crossover_hz: d.crossover_hz,
                hfa_slope: d.hfa_slope,
                asymptote_level: d.asymptote_level,
                tail_slope: d.tail_slope,
                crossover_count: usize::from(d.crossover_hz.is_some()),
                curves: curves.len(),
                per_curve: vec![d],
            })
        }
        DescriptorMode::PerSubject => {
            let ds = curves.iter().map(descriptors).collect::<Result<Vec<_>>>()?;
            let k = ds.len() as f64;
            let cross: Vec<f64> = ds.iter().filter_map(|d| d.crossover_hz).collect();
            Ok(DescriptorSummary {
                mode,
                crossover_hz: (!cross.is_empty()).then(|| cross.iter().sum::<f64>() / cross.len() as f64),
                hfa_slope: ds.iter().map(|d| d.hfa_slope).sum::<f64>() / k,
                asymptote_level: ds.iter().map(|d| d.asymptote_level).sum::<f64>() / k,
                tail_slope: ds.iter().map(|d| d.tail_slope).sum::<f64>() / k,
                crossover_count: cross.len(),
                curves: curves.len(),
                per_curve: ds,
            })
        }
    }
}
