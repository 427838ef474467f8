//! Posture and task metrics: 95% ellipses, one-way ANOVA, weld-mask scoring.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::{Error, Result};

/// χ²₂ quantile at 0.95, i.e. −2 ln 0.05.
pub fn chi2_95() -> f64 {
    -2.0 * 0.05f64.ln()
}

pub const MIN_ELLIPSE_SAMPLES: usize = 30;

/// Covariance ellipse holding 95% of a bivariate Gaussian. Lengths are in the
/// units of the input series, area in those units squared.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseMetrics {
    pub area: f64,
    pub semi_major: f64,
    pub semi_minor: f64,
    /// Angle of the major axis from +x, in (−π/2, π/2].
    pub orientation: f64,
    pub mean: [f64; 2],
}

impl EllipseMetrics {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.orientation.sin_cos();
        let dx = x - self.mean[0];
        let dy = y - self.mean[1];
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.semi_major).powi(2) + (v / self.semi_minor).powi(2) <= 1.0
    }
}

pub fn ellipse_95(x: &[f64], y: &[f64]) -> Result<EllipseMetrics> {
    if x.len() != y.len() {
        return Err(Error::Validation(format!("series lengths differ: {} vs {}", x.len(), y.len())));
    }
    let n = x.len();
    if n < MIN_ELLIPSE_SAMPLES {
        return Err(Error::Validation(format!("need ≥ {MIN_ELLIPSE_SAMPLES} samples, have {n}")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite sample".into()));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let d = (n - 1) as f64;
    let (sxx, syy, sxy) = (sxx / d, syy / d, sxy / d);
    let det = sxx * syy - sxy * sxy;
    let half_tr = 0.5 * (sxx + syy);
    let disc = (0.25 * (sxx - syy).powi(2) + sxy * sxy).sqrt();
    let l1 = half_tr + disc;
    let l2 = half_tr - disc;
    if !(l1 > 0.0) || !(det > 0.0) || l2 <= 1e-12 * l1 {
        return Err(Error::Degenerate(format!("singular covariance (eigenvalues {l1:e}, {l2:e})")));
    }
    let k = chi2_95();
    let mut orientation = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    if orientation <= -std::f64::consts::FRAC_PI_2 {
        orientation += std::f64::consts::PI;
    }
    Ok(EllipseMetrics {
        area: std::f64::consts::PI * k * det.sqrt(),
        semi_major: (k * l1).sqrt(),
        semi_minor: (k * l2).sqrt(),
        orientation,
        mean: [mx, my],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f_stat: f64,
    /// (between, within)
    pub dof: (usize, usize),
    pub p_value: f64,
    pub group_means: Vec<f64>,
    /// Set when the within-group variance is zero.
    pub degenerate: bool,
}

/// Upper tail of the F distribution through the regularized incomplete beta.
pub fn f_survival(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    if f.is_infinite() {
        return 0.0;
    }
    beta_reg(0.5 * d2, 0.5 * d1, d2 / (d2 + d1 * f)).clamp(0.0, 1.0)
}

pub fn anova_oneway(groups: &[Vec<f64>]) -> Result<AnovaResult> {
    if groups.len() < 2 {
        return Err(Error::Validation(format!("need ≥ 2 groups, have {}", groups.len())));
    }
    for (i, g) in groups.iter().enumerate() {
        if g.len() < 2 {
            return Err(Error::Validation(format!("group {i} has {} samples, need ≥ 2", g.len())));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("group {i} has a non-finite sample")));
        }
    }
    let n: usize = groups.iter().map(Vec::len).sum();
    let k = groups.len();
    let means: Vec<f64> = groups.iter().map(|g| g.iter().sum::<f64>() / g.len() as f64).collect();
    let grand = groups.iter().flatten().sum::<f64>() / n as f64;
    let ssb: f64 = groups.iter().zip(&means).map(|(g, m)| g.len() as f64 * (m - grand).powi(2)).sum();
    let ssw: f64 = groups
        .iter()
        .zip(&means)
        .map(|(g, m)| g.iter().map(|v| (v - m).powi(2)).sum::<f64>())
        .sum();
    let (d1, d2) = (k - 1, n - k);
    let msb = ssb / d1 as f64;
    let msw = ssw / d2 as f64;
    // Treat sums of squares at round-off level of the data as zero.
    let scale = groups.iter().flatten().map(|v| (v - grand).powi(2)).sum::<f64>().max(f64::MIN_POSITIVE);
    let tiny = 1e-24 * scale.max(grand * grand * n as f64);
    let (f_stat, p_value, degenerate) = if ssw <= tiny {
        if ssb <= tiny {
            (0.0, 1.0, true)
        } else {
            (f64::INFINITY, 0.0, true)
        }
    } else {
        let f = msb / msw;
        (f, f_survival(f, d1 as f64, d2 as f64), false)
    };
    Ok(AnovaResult { f_stat, dof: (d1, d2), p_value, group_means: means, degenerate })
}

/// Decoded binary portable pixmap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ppm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Row-major RGB samples.
    pub pixels: Vec<[u16; 3]>,
}

impl Ppm {
    pub fn new(width: usize, height: usize, fill: [u16; 3]) -> Self {
        Ppm { width, height, maxval: 255, pixels: vec![fill; width * height] }
    }

    pub fn set(&mut self, x: usize, y: usize, c: [u16; 3]) {
        self.pixels[y * self.width + x] = c;
    }

    pub fn parse(bytes: &[u8]) -> Result<Ppm> {
        let mut pos = 0usize;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // skip whitespace and comments
            while pos < bytes.len() {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else if bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Schema("truncated PPM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(Error::Schema(format!("expected P6 magic, found {:?}", fields[0])));
        }
        let num = |s: &str, what: &str| -> Result<usize> {
            s.parse::<usize>().map_err(|_| Error::Schema(format!("bad PPM {what}: {s:?}")))
        };
        let width = num(&fields[1], "width")?;
        let height = num(&fields[2], "height")?;
        let maxval = num(&fields[3], "maxval")?;
        if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
            return Err(Error::Schema(format!("bad PPM geometry {width}x{height} maxval {maxval}")));
        }
        // exactly one whitespace byte before the raster
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::Schema("missing raster separator".into()));
        }
        pos += 1;
        let bps = if maxval < 256 { 1 } else { 2 };
        let need = width * height * 3 * bps;
        let raster = &bytes[pos..];
        if raster.len() < need {
            return Err(Error::Schema(format!("raster has {} bytes, expected {need}", raster.len())));
        }
        let sample = |i: usize| -> u16 {
            if bps == 1 {
                raster[i] as u16
            } else {
                u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]])
            }
        };
        let pixels = (0..width * height).map(|p| [sample(3 * p), sample(3 * p + 1), sample(3 * p + 2)]).collect();
        Ok(Ppm { width, height, maxval: maxval as u16, pixels })
    }

    pub fn read(path: &Path) -> Result<Ppm> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::InputMissing(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        Ppm::parse(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        for p in &self.pixels {
            for &c in p {
                if self.maxval < 256 {
                    out.push(c as u8);
                } else {
                    out.extend_from_slice(&c.to_be_bytes());
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeldClass {
    TargetWelded,
    OutsideWeld,
    Unfinished,
    WorkpieceBackground,
    NonWorkpiece,
}

/// Palette color: `[r, g, b]` or `"#rrggbb"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PaletteColor {
    Rgb([u16; 3]),
    Hex(String),
}

impl PaletteColor {
    fn rgb(&self) -> Result<[u16; 3]> {
        match self {
            PaletteColor::Rgb(c) => Ok(*c),
            PaletteColor::Hex(s) => {
                let h = s.strip_prefix('#').unwrap_or(s);
                if h.len() != 6 || !h.is_ascii() {
                    return Err(Error::Schema(format!("bad hex color {s:?}")));
                }
                let ch = |i: usize| {
                    u16::from_str_radix(&h[i..i + 2], 16).map_err(|_| Error::Schema(format!("bad hex color {s:?}")))
                };
                Ok([ch(0)?, ch(2)?, ch(4)?])
            }
        }
    }
}

/// Exact-match class → color map. All five classes are required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Palette {
    pub target_welded: PaletteColor,
    pub outside_weld: PaletteColor,
    pub unfinished: PaletteColor,
    pub workpiece_background: PaletteColor,
    pub non_workpiece: PaletteColor,
}

impl Palette {
    pub fn from_rgb(colors: [[u16; 3]; 5]) -> Self {
        let [t, o, u, b, n] = colors.map(PaletteColor::Rgb);
        Palette { target_welded: t, outside_weld: o, unfinished: u, workpiece_background: b, non_workpiece: n }
    }

    pub fn read(path: &Path) -> Result<Palette> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::InputMissing(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    fn lookup(&self) -> Result<BTreeMap<[u16; 3], WeldClass>> {
        let entries = [
            (WeldClass::TargetWelded, &self.target_welded),
            (WeldClass::OutsideWeld, &self.outside_weld),
            (WeldClass::Unfinished, &self.unfinished),
            (WeldClass::WorkpieceBackground, &self.workpiece_background),
            (WeldClass::NonWorkpiece, &self.non_workpiece),
        ];
        let mut map = BTreeMap::new();
        for (class, color) in entries {
            let rgb = color.rgb()?;
            if let Some(prev) = map.insert(rgb, class) {
                return Err(Error::Validation(format!("color {rgb:?} assigned to both {prev:?} and {class:?}")));
            }
        }
        Ok(map)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionDenominator {
    /// A_t + A_o, all welded pixels.
    #[default]
    Welded,
    /// A_wp, the workpiece region.
    Workpiece,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeldScore {
    pub a_t: u64,
    pub a_o: u64,
    pub a_u: u64,
    pub a_wp: u64,
    pub a_background: u64,
    pub a_non_workpiece: u64,
    pub total_pixels: u64,
    pub accuracy: f64,
    pub precision: f64,
    /// False when the denominator is empty; precision is then reported as 0.
    pub precision_defined: bool,
    pub precision_denominator: PrecisionDenominator,
    /// Percent.
    pub completion: f64,
}

pub fn weld_score(mask: &Ppm, palette: &Palette, denominator: PrecisionDenominator) -> Result<WeldScore> {
    let lookup = palette.lookup()?;
    let mut counts: BTreeMap<WeldClass, u64> = BTreeMap::new();
    let mut unmapped: BTreeMap<[u16; 3], u64> = BTreeMap::new();
    for p in &mask.pixels {
        match lookup.get(p) {
            Some(c) => *counts.entry(*c).or_default() += 1,
            None => *unmapped.entry(*p).or_default() += 1,
        }
    }
    if !unmapped.is_empty() {
        let list: Vec<String> = unmapped.iter().take(16).map(|(c, n)| format!("{c:?}×{n}")).collect();
        return Err(Error::Validation(format!(
            "{} unmapped color(s): {}{}",
            unmapped.len(),
            list.join(", "),
            if unmapped.len() > 16 { ", …" } else { "" }
        )));
    }
    let get = |c| counts.get(&c).copied().unwrap_or(0);
    let a_t = get(WeldClass::TargetWelded);
    let a_o = get(WeldClass::OutsideWeld);
    let a_u = get(WeldClass::Unfinished);
    let a_background = get(WeldClass::WorkpieceBackground);
    let a_non_workpiece = get(WeldClass::NonWorkpiece);
    let a_wp = a_t + a_u + a_background;
    if a_wp == 0 {
        return Err(Error::Degenerate("mask contains no workpiece pixels".into()));
    }
    let denom = match denominator {
        PrecisionDenominator::Welded => a_t + a_o,
        PrecisionDenominator::Workpiece => a_wp,
    };
    let (precision, precision_defined) = if denom == 0 { (0.0, false) } else { (a_o as f64 / denom as f64, true) };
    Ok(WeldScore {
        a_t,
        a_o,
        a_u,
        a_wp,
        a_background,
        a_non_workpiece,
        total_pixels: mask.pixels.len() as u64,
        accuracy: a_t as f64 / a_wp as f64,
        precision,
        precision_defined,
        precision_denominator: denominator,
        completion: (a_wp - a_u) as f64 / a_wp as f64 * 100.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, sx: f64, sy: f64, rot: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, c) = rot.sin_cos();
        (0..n)
            .map(|_| {
                let u: f64 = rng.sample::<f64, _>(StandardNormal) * sx;
                let v: f64 = rng.sample::<f64, _>(StandardNormal) * sy;
                (c * u - s * v, s * u + c * v)
            })
            .unzip()
    }

    #[test]
    fn chi2_quantile() {
        assert_relative_eq!(chi2_95(), 5.991464547107979, epsilon = 1e-12);
    }

    #[test]
    fn ellipse_area_matches_analytic() {
        let (x, y) = gaussian(100_000, 2.0, 1.0, 0.0, 1);
        let e = ellipse_95(&x, &y).unwrap();
        let expect = std::f64::consts::PI * chi2_95() * 2.0;
        assert!((e.area / expect - 1.0).abs() < 0.03, "area {} vs {expect}", e.area);
        assert_relative_eq!(e.area, std::f64::consts::PI * e.semi_major * e.semi_minor, max_relative = 1e-12);
        assert!(e.orientation.abs() < 0.05);
    }

    #[test]
    fn isotropic_area() {
        let (x, y) = gaussian(100_000, 1.0, 1.0, 0.0, 2);
        let e = ellipse_95(&x, &y).unwrap();
        assert!((e.area / 18.82 - 1.0).abs() < 0.03);
    }

    #[test]
    fn coverage_is_95_percent() {
        let (x, y) = gaussian(100_000, 3.0, 0.5, 0.7, 3);
        let e = ellipse_95(&x, &y).unwrap();
        let inside = x.iter().zip(&y).filter(|(a, b)| e.contains(**a, **b)).count();
        let frac = inside as f64 / x.len() as f64;
        assert!((frac - 0.95).abs() <= 0.005, "coverage {frac}");
    }

    #[test]
    fn scaling_by_two_quadruples_area() {
        let (x, y) = gaussian(1000, 1.0, 1.0, 0.0, 4);
        let a = ellipse_95(&x, &y).unwrap().area;
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let y2: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        assert_relative_eq!(ellipse_95(&x2, &y2).unwrap().area, 4.0 * a, max_relative = 1e-12);
    }

    #[test]
    fn ellipse_errors() {
        let x: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!(matches!(ellipse_95(&x, &y), Err(Error::Degenerate(_))));
        assert!(matches!(ellipse_95(&x[..10], &y[..10]), Err(Error::Validation(_))));
    }

    fn wrap_pi(a: f64) -> f64 {
        let p = std::f64::consts::PI;
        (a + p / 2.0).rem_euclid(p) - p / 2.0
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn rotation_equivariance(phi in -3.0f64..3.0, seed in 0u64..1000) {
            let (x, y) = gaussian(500, 2.0, 0.7, 0.3, seed);
            let e0 = ellipse_95(&x, &y).unwrap();
            let (s, c) = phi.sin_cos();
            let xr: Vec<f64> = x.iter().zip(&y).map(|(a, b)| c * a - s * b).collect();
            let yr: Vec<f64> = x.iter().zip(&y).map(|(a, b)| s * a + c * b).collect();
            let e1 = ellipse_95(&xr, &yr).unwrap();
            prop_assert!((e1.area - e0.area).abs() <= 1e-9 * e0.area);
            prop_assert!(wrap_pi(e1.orientation - e0.orientation - phi).abs() < 1e-9);
        }

        #[test]
        fn anova_shift_invariant(shift in -1e3f64..1e3, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let groups: Vec<Vec<f64>> = (0..3).map(|g| (0..8).map(|_| g as f64 + rng.random::<f64>()).collect()).collect();
            let shifted: Vec<Vec<f64>> = groups.iter().map(|g| g.iter().map(|v| v + shift).collect()).collect();
            let a = anova_oneway(&groups).unwrap();
            let b = anova_oneway(&shifted).unwrap();
            prop_assert!((a.f_stat - b.f_stat).abs() <= 1e-10 * a.f_stat.max(1.0));
        }
    }

    /// Composite Simpson on the F(d1, d2) density, substituting t = x/(1+x)
    /// to map [F, ∞) onto a finite interval.
    pub(crate) fn f_tail_by_quadrature(f: f64, d1: f64, d2: f64) -> f64 {
        let lnb = statrs::function::gamma::ln_gamma(d1 / 2.0) + statrs::function::gamma::ln_gamma(d2 / 2.0)
            - statrs::function::gamma::ln_gamma((d1 + d2) / 2.0);
        let pdf = |x: f64| {
            if x <= 0.0 {
                return 0.0;
            }
            ((d1 / 2.0) * (d1 * x).ln() + (d2 / 2.0) * d2.ln() - ((d1 + d2) / 2.0) * (d1 * x + d2).ln()
                - x.ln()
                - lnb)
                .exp()
        };
        let g = |t: f64| {
            if t >= 1.0 {
                return 0.0;
            }
            let x = t / (1.0 - t);
            pdf(x) / (1.0 - t).powi(2)
        };
        let (a, b) = (f / (1.0 + f), 1.0);
        let n = 200_000;
        let h = (b - a) / n as f64;
        let mut s = g(a) + g(b);
        for i in 1..n {
            s += g(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn anova_hand_fixture() {
        let r = anova_oneway(&[vec![1.0, 2.0, 3.0], vec![2.0, 3.0, 4.0], vec![3.0, 4.0, 5.0]]).unwrap();
        assert!((r.f_stat - 3.0).abs() < 1e-12);
        assert_eq!(r.dof, (2, 6));
        let oracle = f_tail_by_quadrature(3.0, 2.0, 6.0);
        assert!((r.p_value - oracle).abs() < 1e-3, "{} vs {oracle}", r.p_value);
        // F(2, 6) has closed form survival (1 + F/3)^-3.
        assert!((r.p_value - 0.125).abs() < 1e-12);
        assert!(!r.degenerate);
    }

    #[test]
    fn anova_identical_and_degenerate() {
        let g = vec![1.0, 2.0, 4.0];
        let r = anova_oneway(&[g.clone(), g.clone(), g]).unwrap();
        assert_eq!(r.f_stat, 0.0);
        assert_eq!(r.p_value, 1.0);
        let r = anova_oneway(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        assert!(r.degenerate && r.p_value == 0.0 && r.f_stat.is_infinite());
        assert!(anova_oneway(&[vec![1.0, 2.0]]).is_err());
        assert!(anova_oneway(&[vec![1.0, 2.0], vec![1.0]]).is_err());
    }

    const T: [u16; 3] = [255, 0, 0];
    const O: [u16; 3] = [0, 0, 255];
    const U: [u16; 3] = [255, 255, 0];
    const B: [u16; 3] = [128, 128, 128];
    const N: [u16; 3] = [0, 0, 0];

    fn palette() -> Palette {
        Palette::from_rgb([T, O, U, B, N])
    }

    /// 100×100: workpiece rows 0..10 (1000 px, 800 welded, 200 unfinished),
    /// 100 stray weld pixels on row 50.
    fn synthetic_mask() -> Ppm {
        let mut m = Ppm::new(100, 100, N);
        for y in 0..10 {
            for x in 0..100 {
                m.set(x, y, if x < 80 { T } else { U });
            }
        }
        for x in 0..100 {
            m.set(x, 50, O);
        }
        m
    }

    #[test]
    fn weld_synthetic_mask() {
        let m = Ppm::parse(&synthetic_mask().to_bytes()).unwrap();
        let s = weld_score(&m, &palette(), PrecisionDenominator::Welded).unwrap();
        assert_eq!((s.a_wp, s.a_t, s.a_u, s.a_o), (1000, 800, 200, 100));
        assert_eq!(s.accuracy, 0.8);
        assert!((s.precision - 100.0 / 900.0).abs() < 1e-15);
        assert_eq!(s.completion, 80.0);
        assert_eq!(s.a_t + s.a_o + s.a_u + s.a_background + s.a_non_workpiece, s.total_pixels);
        let s = weld_score(&m, &palette(), PrecisionDenominator::Workpiece).unwrap();
        assert!((s.precision - 0.1).abs() < 1e-15);
    }

    #[test]
    fn weld_trivial_cases() {
        let mut m = Ppm::new(10, 10, N);
        for x in 0..10 {
            m.set(x, 0, T);
        }
        let s = weld_score(&m, &palette(), PrecisionDenominator::Welded).unwrap();
        assert_eq!((s.accuracy, s.precision, s.completion), (1.0, 0.0, 100.0));
        assert!(s.precision_defined);
        for x in 0..10 {
            m.set(x, 0, U);
        }
        let s = weld_score(&m, &palette(), PrecisionDenominator::Welded).unwrap();
        assert_eq!((s.accuracy, s.precision, s.completion), (0.0, 0.0, 0.0));
        assert!(!s.precision_defined);
    }

    #[test]
    fn weld_unmapped_colors_listed() {
        let mut m = synthetic_mask();
        m.set(3, 3, [1, 2, 3]);
        let err = weld_score(&m, &palette(), PrecisionDenominator::Welded).unwrap_err();
        assert!(err.to_string().contains("[1, 2, 3]"), "{err}");
    }

    #[test]
    fn ppm_header_comments_and_16_bit() {
        let bytes = b"P6 # c\n2 1\n# x\n255\n\x01\x02\x03\x04\x05\x06";
        let p = Ppm::parse(bytes).unwrap();
        assert_eq!(p.pixels, vec![[1, 2, 3], [4, 5, 6]]);
        let mut q = Ppm::new(1, 1, [300, 2, 65535]);
        q.maxval = 65535;
        assert_eq!(Ppm::parse(&q.to_bytes()).unwrap(), q);
        assert!(Ppm::parse(b"P3\n1 1\n255\n").is_err());
        assert!(Ppm::parse(b"P6\n2 2\n255\n\0\0").is_err());
    }

    #[test]
    fn palette_json_forms() {
        let p: Palette = serde_json::from_str(
            r##"{"target_welded":"#ff0000","outside_weld":[0,0,255],"unfinished":"ffff00",
                "workpiece_background":[128,128,128],"non_workpiece":"#000000"}"##,
        )
        .unwrap();
        assert_eq!(p.lookup().unwrap(), palette().lookup().unwrap());
        let dup = Palette::from_rgb([T, T, U, B, N]);
        assert!(dup.lookup().is_err());
    }
}
