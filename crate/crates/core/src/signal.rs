//! Windowing, zero-lag band-pass filtering, band decomposition and Welch PSD.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Symmetric Hann taper: w[k] = 0.5(1 − cos(2πk/(N−1))).
pub fn hann(series: &[f64]) -> Result<Vec<f64>> {
    let n = series.len();
    if n < 2 {
        return Err(Error::Validation(format!("hann window needs at least 2 samples, got {n}")));
    }
    let denom = (n - 1) as f64;
    Ok(series
        .iter()
        .enumerate()
        .map(|(k, x)| {
            // Pin the endpoints so they are exactly zero.
            if k == 0 || k == n - 1 {
                0.0
            } else {
                x * 0.5 * (1.0 - (2.0 * PI * k as f64 / denom).cos())
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 3],
}

impl Biquad {
    fn run(&self, x: &mut [f64]) {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        let (mut s1, mut s2) = (0.0, 0.0);
        for v in x.iter_mut() {
            let xin = *v;
            let y = b0 * xin + s1;
            s1 = b1 * xin - a1 * y + s2;
            s2 = b2 * xin - a2 * y;
            *v = y;
        }
    }

    fn response(&self, z1: Complex64) -> Complex64 {
        let z2 = z1 * z1;
        (self.b[0] + self.b[1] * z1 + self.b[2] * z2) / (self.a[0] + self.a[1] * z1 + self.a[2] * z2)
    }
}

/// Second-order Butterworth prototype mapped to a band-pass (two biquads).
#[derive(Debug, Clone, PartialEq)]
pub struct Bandpass {
    sections: [Biquad; 2],
    pad: usize,
    f_lo: f64,
    f_hi: f64,
    fs: f64,
}

impl Bandpass {
    pub fn design(f_lo: f64, f_hi: f64, fs: f64) -> Result<Self> {
        if !(fs > 0.0 && f_lo > 0.0 && f_lo < f_hi && f_hi < fs / 2.0) {
            return Err(Error::Validation(format!(
                "band edges must satisfy 0 < f_lo < f_hi < fs/2 (got {f_lo}, {f_hi}, fs {fs})"
            )));
        }
        let fs2 = 2.0 * fs;
        let w_lo = fs2 * (PI * f_lo / fs).tan();
        let w_hi = fs2 * (PI * f_hi / fs).tan();
        let w0 = (w_lo * w_hi).sqrt();
        let bw = w_hi - w_lo;

        // Upper-half-plane prototype pole; its conjugate yields the mirrored pair.
        let p = Complex64::from_polar(1.0, 0.75 * PI);
        let half = p * (bw / 2.0);
        let disc = (half * half - w0 * w0).sqrt();
        let analog = [half + disc, half - disc];
        let mut sections = [Biquad { b: [1.0, 0.0, -1.0], a: [1.0, 0.0, 0.0] }; 2];
        let mut max_radius: f64 = 0.0;
        for (sec, s) in sections.iter_mut().zip(analog) {
            let z = (fs2 + s) / (fs2 - s);
            max_radius = max_radius.max(z.norm());
            sec.a = [1.0, -2.0 * z.re, z.norm_sqr()];
        }

        // Unit gain at the (digital) geometric centre.
        let wc = 2.0 * (w0 / fs2).atan();
        let zc = Complex64::from_polar(1.0, -wc);
        let g = sections.iter().map(|s| s.response(zc)).product::<Complex64>().norm();
        let per = g.sqrt().recip();
        for s in sections.iter_mut() {
            for b in s.b.iter_mut() {
                *b *= per;
            }
        }
        // Slowest envelope decay sets the padding: three time constants.
        let tau_samples = -1.0 / max_radius.ln();
        let pad = (3.0 * tau_samples).ceil() as usize;
        Ok(Self { sections, pad, f_lo, f_hi, fs })
    }

    pub fn edges(&self) -> (f64, f64) {
        (self.f_lo, self.f_hi)
    }

    /// Samples of reflective padding applied at each end.
    pub fn pad_len(&self) -> usize {
        self.pad
    }

    /// Magnitude of one forward pass at frequency `f` Hz.
    pub fn magnitude(&self, f: f64) -> f64 {
        let z1 = Complex64::from_polar(1.0, -2.0 * PI * f / self.fs);
        self.sections.iter().map(|s| s.response(z1)).product::<Complex64>().norm()
    }

    fn cascade(&self, x: &mut [f64]) {
        for s in &self.sections {
            s.run(x);
        }
    }

    fn forward_backward(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let pad = self.pad.min(n - 1);
        // Odd reflection about each endpoint keeps value and slope continuous.
        let mut buf = Vec::with_capacity(n + 2 * pad);
        buf.extend((1..=pad).rev().map(|k| 2.0 * x[0] - x[k]));
        buf.extend_from_slice(x);
        buf.extend((1..=pad).map(|k| 2.0 * x[n - 1] - x[n - 1 - k]));
        self.cascade(&mut buf);
        buf.reverse();
        self.cascade(&mut buf);
        buf.reverse();
        buf.drain(..pad);
        buf.truncate(n);
        buf
    }

    /// Forward-backward filtering. The forward-first and backward-first passes
    /// are averaged so the operator commutes exactly with time reversal.
    pub fn apply_zero_lag(&self, x: &[f64]) -> Vec<f64> {
        if x.len() < 2 {
            return x.to_vec();
        }
        let a = self.forward_backward(x);
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        let b = self.forward_backward(&rev);
        a.iter().zip(b.iter().rev()).map(|(u, v)| 0.5 * (u + v)).collect()
    }
}

pub fn bandpass_zero_lag(series: &[f64], f_lo: f64, f_hi: f64, fs: f64) -> Result<Vec<f64>> {
    Ok(Bandpass::design(f_lo, f_hi, fs)?.apply_zero_lag(series))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    /// Hz
    pub centers: Vec<f64>,
    /// Hz
    pub width: f64,
    /// Hz
    pub sample_rate: f64,
}

pub const DEFAULT_BAND_COUNT: usize = 38;

impl BandSpec {
    /// 38 bands of 0.2 Hz centred on 0.5, 0.7, …, 7.9 Hz.
    pub fn standard(sample_rate: f64) -> Self {
        Self {
            centers: (0..DEFAULT_BAND_COUNT).map(|k| (5 + 2 * k) as f64 / 10.0).collect(),
            width: 0.2,
            sample_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.centers.is_empty() {
            return Err(Error::Validation("band spec has no centers".into()));
        }
        if !(self.width > 0.0 && self.sample_rate > 0.0) {
            return Err(Error::Validation("band width and sample rate must be positive".into()));
        }
        for w in self.centers.windows(2) {
            if w[1] - w[0] < self.width * (1.0 - 1e-9) {
                return Err(Error::Validation(format!("bands at {} and {} Hz overlap", w[0], w[1])));
            }
        }
        let lo = self.centers[0] - self.width / 2.0;
        let hi = self.centers[self.centers.len() - 1] + self.width / 2.0;
        if lo <= 0.0 || hi >= self.sample_rate / 2.0 {
            return Err(Error::Validation(format!("bands [{lo}, {hi}] Hz must lie in (0, Nyquist)")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// Pre-designed filters for every band of a spec.
#[derive(Debug, Clone)]
pub struct FilterBank {
    spec: BandSpec,
    filters: Vec<Bandpass>,
}

impl FilterBank {
    pub fn new(spec: &BandSpec) -> Result<Self> {
        spec.validate()?;
        let filters = spec
            .centers
            .iter()
            .map(|c| Bandpass::design(c - spec.width / 2.0, c + spec.width / 2.0, spec.sample_rate))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec: spec.clone(), filters })
    }

    pub fn spec(&self) -> &BandSpec {
        &self.spec
    }

    pub fn filters(&self) -> &[Bandpass] {
        &self.filters
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandPair {
    pub center: f64,
    pub cop: Vec<f64>,
    pub q: Vec<f64>,
}

pub fn band_decompose(cop: &[f64], q: &[f64], spec: &BandSpec) -> Result<Vec<BandPair>> {
    band_decompose_with(cop, q, &FilterBank::new(spec)?)
}

/// Windows both channels once, then filters each band with identical filters.
pub fn band_decompose_with(cop: &[f64], q: &[f64], bank: &FilterBank) -> Result<Vec<BandPair>> {
    if cop.len() != q.len() {
        return Err(Error::Contract(format!("cop has {} samples, q has {}", cop.len(), q.len())));
    }
    let wc = hann(cop)?;
    let wq = hann(q)?;
    Ok(bank
        .filters
        .iter()
        .zip(&bank.spec.centers)
        .map(|(f, &center)| BandPair { center, cop: f.apply_zero_lag(&wc), q: f.apply_zero_lag(&wq) })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdCurve {
    /// Hz
    pub frequencies: Vec<f64>,
    /// unit²/Hz
    pub power: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsdConfig {
    pub segment_seconds: f64,
    /// Fraction of a segment shared with the next.
    pub overlap: f64,
}

impl Default for PsdConfig {
    fn default() -> Self {
        Self { segment_seconds: 10.0, overlap: 0.5 }
    }
}

pub fn psd(series: &[f64], fs: f64) -> Result<PsdCurve> {
    psd_with(series, fs, &PsdConfig::default())
}

/// Welch estimate: periodic-Hann segments, constant detrend, one-sided density.
pub fn psd_with(series: &[f64], fs: f64, cfg: &PsdConfig) -> Result<PsdCurve> {
    if !(fs > 0.0) || !(cfg.segment_seconds > 0.0) || !(0.0..1.0).contains(&cfg.overlap) {
        return Err(Error::Validation("psd: invalid sample rate or segmentation".into()));
    }
    let nseg = (cfg.segment_seconds * fs).round() as usize;
    if nseg < 2 || series.len() < nseg {
        return Err(Error::Validation(format!(
            "psd: series of {} samples is shorter than one {nseg}-sample segment",
            series.len()
        )));
    }
    let step = ((nseg as f64) * (1.0 - cfg.overlap)).round().max(1.0) as usize;
    let window: Vec<f64> = (0..nseg).map(|k| 0.5 * (1.0 - (2.0 * PI * k as f64 / nseg as f64).cos())).collect();
    let wss: f64 = window.iter().map(|w| w * w).sum();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nseg);
    let nfreq = nseg / 2 + 1;
    let mut acc = vec![0.0; nfreq];
    let mut count = 0usize;
    let mut buf = vec![Complex64::new(0.0, 0.0); nseg];
    let mut start = 0;
    while start + nseg <= series.len() {
        let seg = &series[start..start + nseg];
        let mean = seg.iter().sum::<f64>() / nseg as f64;
        for ((b, x), w) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex64::new((x - mean) * w, 0.0);
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
        count += 1;
        start += step;
    }
    let scale = 1.0 / (fs * wss * count as f64);
    let mut power: Vec<f64> = acc.iter().map(|a| a * scale).collect();
    let last = if nseg % 2 == 0 { nfreq - 1 } else { nfreq };
    for p in power.iter_mut().take(last).skip(1) {
        *p *= 2.0;
    }
    let frequencies = (0..nfreq).map(|k| k as f64 * fs / nseg as f64).collect();
    Ok(PsdCurve { frequencies, power })
}

impl PsdCurve {
    /// Rectangle-rule integral of the density.
    pub fn total_power(&self) -> f64 {
        if self.frequencies.len() < 2 {
            return 0.0;
        }
        let df = self.frequencies[1] - self.frequencies[0];
        self.power.iter().sum::<f64>() * df
    }
}
