//! CSV and JSON ingestion and emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ipcurve::IpCurve;
use crate::model::Gait;
use crate::signal::PsdCurve;
use crate::sim::{TrialFailure, TrialSeries};
use crate::{Error, Result};

pub const FORCEPLATE_COLUMNS: [&str; 6] = ["time_s", "fx_n", "fy_n", "fz_n", "copx_m", "copy_m"];
pub const IMU_COLUMNS: [&str; 4] = ["time_s", "ax_mps2", "ay_mps2", "az_mps2"];
pub const IPCURVE_COLUMNS: [&str; 4] = ["band_hz", "ip_m", "ip_norm", "r2"];

/// Relative timing deviation beyond which samples are resampled.
const EXACT_SPACING: f64 = 1e-6;
const MAX_JITTER: f64 = 0.01;
const MAX_GAP_SAMPLES: usize = 2;
/// Inferred rates this close to an integer are taken as that integer.
const RATE_SNAP: f64 = 1e-3;

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::InputMissing(path.display().to_string()),
        _ => Error::Io(e),
    })
}

/// Shortest representation that parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

/// Named columns of a numeric CSV plus the source line of each row.
#[derive(Debug, Clone)]
pub struct Table {
    pub columns: BTreeMap<String, Vec<f64>>,
    pub lines: Vec<usize>,
    /// `key=value` pairs found in `#` comment lines.
    pub meta: BTreeMap<String, String>,
}

impl Table {
    pub fn col(&self, name: &str) -> &[f64] {
        &self.columns[name]
    }
}

/// Parses a headered numeric CSV. Lines starting with `#` are comments; every
/// name in `required` must appear in the header.
pub fn parse_table(text: &str, required: &[&str]) -> Result<Table> {
    let mut meta = BTreeMap::new();
    for line in text.lines().filter(|l| l.trim_start().starts_with('#')) {
        for tok in line.trim_start().trim_start_matches('#').split_whitespace() {
            if let Some((k, v)) = tok.split_once('=') {
                meta.insert(k.to_string(), v.to_string());
            }
        }
    }
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse { line: csv_line(&e).unwrap_or(1), message: e.to_string() })?
        .clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(Error::Schema("missing header row".into()));
    }
    for name in required {
        if !header.iter().any(|h| h == *name) {
            return Err(Error::Schema(format!("missing column `{name}` (header: {})", header.iter().collect::<Vec<_>>().join(","))));
        }
    }
    let names: Vec<String> = header.iter().map(str::to_string).collect();
    let mut columns: BTreeMap<String, Vec<f64>> = names.iter().map(|n| (n.clone(), Vec::new())).collect();
    let mut lines = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse { line: csv_line(&e).unwrap_or(0), message: e.to_string() })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        for (name, field) in names.iter().zip(rec.iter()) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Parse { line, message: format!("column `{name}`: cannot parse {field:?} as a number") })?;
            columns.get_mut(name).expect("column exists").push(v);
        }
        lines.push(line);
    }
    Ok(Table { columns, lines, meta })
}

fn csv_line(e: &csv::Error) -> Option<usize> {
    e.position().map(|p| p.line() as usize)
}

/// Result of timing checks on an ingested series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Hz
    pub sample_rate: f64,
    /// s, samples × period
    pub duration: f64,
    pub resampled: bool,
    pub warnings: Vec<String>,
}

/// Infers the nominal rate from the mean ordinary step (snapped to an integer rate when
/// within 0.1%) and checks every step against it.
pub fn infer_rate(time: &[f64], lines: &[usize]) -> Result<(f64, bool)> {
    if time.len() < 2 {
        return Err(Error::Validation(format!("need ≥ 2 samples to infer a sampling rate, have {}", time.len())));
    }
    let mut steps = Vec::with_capacity(time.len() - 1);
    for k in 1..time.len() {
        let d = time[k] - time[k - 1];
        if !(d > 0.0) {
            return Err(Error::Parse {
                line: lines.get(k).copied().unwrap_or(0),
                message: format!("time not strictly increasing ({} after {})", time[k], time[k - 1]),
            });
        }
        steps.push(d);
    }
    let mut sorted = steps.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    // mean over ordinary steps, so alternating jitter does not bias the period
    let ordinary: Vec<f64> = steps.iter().copied().filter(|d| *d < 1.5 * median).collect();
    let period = ordinary.iter().sum::<f64>() / ordinary.len() as f64;
    let mut rate = 1.0 / period;
    if (rate - rate.round()).abs() <= RATE_SNAP * rate {
        rate = rate.round();
    }
    let dt = 1.0 / rate;
    let mut irregular = false;
    for (k, d) in steps.iter().enumerate() {
        let line = lines.get(k + 1).copied().unwrap_or(0);
        let mult = (d / dt).round().max(1.0);
        let missing = mult as usize - 1;
        if missing > MAX_GAP_SAMPLES {
            return Err(Error::Validation(format!("line {line}: gap of {missing} samples exceeds {MAX_GAP_SAMPLES}")));
        }
        let dev = (d - mult * dt).abs() / dt;
        if dev > MAX_JITTER {
            return Err(Error::Validation(format!(
                "line {line}: sample spacing {d} s deviates {:.2}% from the {rate} Hz grid",
                dev * 100.0
            )));
        }
        if missing > 0 || dev > EXACT_SPACING {
            irregular = true;
        }
    }
    Ok((rate, irregular))
}

fn interp(t: &[f64], y: &[f64], grid: &[f64]) -> Vec<f64> {
    let mut j = 0;
    grid.iter()
        .map(|&g| {
            while j + 2 < t.len() && t[j + 1] < g {
                j += 1;
            }
            let (t0, t1) = (t[j], t[j + 1]);
            let w = ((g - t0) / (t1 - t0)).clamp(0.0, 1.0);
            y[j] + w * (y[j + 1] - y[j])
        })
        .collect()
}

/// Checks timing and resamples every column onto the nominal grid when needed.
pub fn regularize(table: &mut Table, time_col: &str) -> Result<Timing> {
    let (rate, irregular) = infer_rate(table.col(time_col), &table.lines)?;
    let mut warnings = Vec::new();
    if irregular {
        let t = table.col(time_col).to_vec();
        let dt = 1.0 / rate;
        let n = ((t[t.len() - 1] - t[0]) / dt + 1e-9).floor() as usize + 1;
        let grid: Vec<f64> = (0..n).map(|k| t[0] + k as f64 * dt).collect();
        for (name, col) in table.columns.iter_mut() {
            *col = if name == time_col { grid.clone() } else { interp(&t, col, &grid) };
        }
        table.lines = vec![0; n];
        warnings.push(format!("irregular sampling: resampled {} rows onto {n} samples at {rate} Hz", t.len()));
    }
    let n = table.col(time_col).len();
    Ok(Timing { sample_rate: rate, duration: n as f64 / rate, resampled: irregular, warnings })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForcePlateRecord {
    pub time: f64,
    pub fx: f64,
    pub fy: f64,
    pub fz: f64,
    pub copx: f64,
    pub copy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuRecord {
    pub time: f64,
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested<T> {
    pub records: Vec<T>,
    pub timing: Timing,
}

pub fn parse_forceplate_str(text: &str) -> Result<Ingested<ForcePlateRecord>> {
    let mut t = parse_table(text, &FORCEPLATE_COLUMNS)?;
    if let Some((k, v)) = t.col("fz_n").iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::Parse { line: t.lines[k], message: format!("fz_n must be > 0, got {v}") });
    }
    let timing = regularize(&mut t, "time_s")?;
    let c = |n: &str| t.col(n).to_vec();
    let (time, fx, fy, fz, cx, cy) = (c("time_s"), c("fx_n"), c("fy_n"), c("fz_n"), c("copx_m"), c("copy_m"));
    let records = (0..time.len())
        .map(|k| ForcePlateRecord { time: time[k], fx: fx[k], fy: fy[k], fz: fz[k], copx: cx[k], copy: cy[k] })
        .collect();
    Ok(Ingested { records, timing })
}

pub fn parse_forceplate_csv(path: &Path) -> Result<Ingested<ForcePlateRecord>> {
    parse_forceplate_str(&read_text(path)?)
}

pub fn parse_imu_str(text: &str) -> Result<Ingested<ImuRecord>> {
    let mut t = parse_table(text, &IMU_COLUMNS)?;
    let timing = regularize(&mut t, "time_s")?;
    let c = |n: &str| t.col(n).to_vec();
    let (time, ax, ay, az) = (c("time_s"), c("ax_mps2"), c("ay_mps2"), c("az_mps2"));
    let records = (0..time.len()).map(|k| ImuRecord { time: time[k], ax: ax[k], ay: ay[k], az: az[k] }).collect();
    Ok(Ingested { records, timing })
}

pub fn parse_imu_csv(path: &Path) -> Result<Ingested<ImuRecord>> {
    parse_imu_str(&read_text(path)?)
}

pub fn forceplate_csv(records: &[ForcePlateRecord]) -> String {
    let mut s = FORCEPLATE_COLUMNS.join(",") + "\n";
    for r in records {
        let row = [r.time, r.fx, r.fy, r.fz, r.copx, r.copy].map(fmt_f64);
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

fn trial_columns(gait: Gait) -> Vec<String> {
    let j = gait.joint_numbers();
    let mut h = vec!["time_s".to_string()];
    h.extend(j.iter().map(|i| format!("theta{i}")));
    h.extend(j.iter().map(|i| format!("thetadot{i}")));
    h.extend(j.iter().map(|i| format!("tau{i}")));
    h.extend(["fx_n", "fz_n", "copx_m", "comax_mps2", "comaz_mps2"].map(String::from));
    h
}

/// Trial CSV. `fx_n` is the force on the body. Metadata rides in leading
/// `#` comments so the file is self-contained.
pub fn trial_csv(series: &TrialSeries) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# gait={} trial_index={} sample_rate={}",
        series.gait.name(),
        series.trial_index,
        fmt_f64(series.sample_rate)
    );
    if let Some(f) = &series.failure {
        let _ = writeln!(s, "# failure_time={} failure_sample={} failure_reason={}", fmt_f64(f.time), f.sample, f.reason.replace(char::is_whitespace, "_"));
    }
    s.push_str(&trial_columns(series.gait).join(","));
    s.push('\n');
    for k in 0..series.len() {
        let mut row = vec![fmt_f64(series.time[k])];
        for group in [&series.angles, &series.rates, &series.torques] {
            row.extend(group.iter().map(|c| fmt_f64(c[k])));
        }
        for c in [&series.fx, &series.fz, &series.cop_x, &series.com_ax, &series.com_az] {
            row.push(fmt_f64(c[k]));
        }
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn parse_trial_str(text: &str) -> Result<TrialSeries> {
    let probe = parse_table(text, &["time_s"])?;
    let gait = match probe.meta.get("gait").map(String::as_str) {
        Some("stance") => Gait::Stance,
        Some("kneeling") => Gait::Kneeling,
        Some(g) => return Err(Error::Schema(format!("unknown gait {g:?}"))),
        None if probe.columns.contains_key("theta1") => Gait::Stance,
        None => Gait::Kneeling,
    };
    let cols = trial_columns(gait);
    let names: Vec<&str> = cols.iter().map(String::as_str).collect();
    let t = parse_table(text, &names)?;
    let time = t.col("time_s").to_vec();
    let sample_rate = match t.meta.get("sample_rate") {
        Some(v) => v.parse().map_err(|_| Error::Schema(format!("bad sample_rate {v:?}")))?,
        None => {
            let (rate, irregular) = infer_rate(&time, &t.lines)?;
            if irregular {
                return Err(Error::Validation("trial CSV is not uniformly sampled".into()));
            }
            rate
        }
    };
    let trial_index = match t.meta.get("trial_index") {
        Some(v) => v.parse().map_err(|_| Error::Schema(format!("bad trial_index {v:?}")))?,
        None => 0,
    };
    let failure = match (t.meta.get("failure_time"), t.meta.get("failure_sample")) {
        (Some(ft), Some(fs)) => Some(TrialFailure {
            time: ft.parse().map_err(|_| Error::Schema(format!("bad failure_time {ft:?}")))?,
            sample: fs.parse().map_err(|_| Error::Schema(format!("bad failure_sample {fs:?}")))?,
            reason: t.meta.get("failure_reason").cloned().unwrap_or_default().replace('_', " "),
        }),
        _ => None,
    };
    let j = gait.joint_numbers();
    let group = |p: &str| j.iter().map(|i| t.col(&format!("{p}{i}")).to_vec()).collect::<Vec<_>>();
    let s = TrialSeries {
        gait,
        sample_rate,
        trial_index,
        time,
        angles: group("theta"),
        rates: group("thetadot"),
        torques: group("tau"),
        fx: t.col("fx_n").to_vec(),
        fz: t.col("fz_n").to_vec(),
        cop_x: t.col("copx_m").to_vec(),
        com_ax: t.col("comax_mps2").to_vec(),
        com_az: t.col("comaz_mps2").to_vec(),
        failure,
    };
    s.check_consistent()?;
    Ok(s)
}

pub fn read_trial_csv(path: &Path) -> Result<TrialSeries> {
    parse_trial_str(&read_text(path)?)
}

pub fn ipcurve_csv(curve: &IpCurve) -> String {
    let mut s = format!("# reference_height_m={}\n{}\n", fmt_f64(curve.reference_height), IPCURVE_COLUMNS.join(","));
    for b in 0..curve.len() {
        let row = [curve.band_centers[b], curve.ip_height[b], curve.normalized[b], curve.regression_r2[b]].map(fmt_f64);
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Reads an IP curve; the reference height comes from `override_ref`, the
/// `reference_height_m` comment, or the first finite `ip_m / ip_norm`, in that order.
pub fn parse_ipcurve_str(text: &str, override_ref: Option<f64>) -> Result<IpCurve> {
    let t = parse_table(text, &IPCURVE_COLUMNS)?;
    let from_meta = match t.meta.get("reference_height_m") {
        Some(v) => Some(v.parse::<f64>().map_err(|_| Error::Schema(format!("bad reference_height_m {v:?}")))?),
        None => None,
    };
    let derived = || {
        t.col("ip_m")
            .iter()
            .zip(t.col("ip_norm"))
            .find(|(h, n)| h.is_finite() && n.is_finite() && **n != 0.0)
            .map(|(h, n)| h / n)
    };
    let href = override_ref
        .or(from_meta)
        .or_else(derived)
        .ok_or_else(|| Error::Schema("cannot determine the reference height".into()))?;
    let r2: Vec<f64> = t.col("r2").iter().map(|r| if r.is_nan() { 0.0 } else { *r }).collect();
    IpCurve::from_heights(t.col("band_hz").to_vec(), t.col("ip_m").to_vec(), r2, href)
}

pub fn read_ipcurve_csv(path: &Path, override_ref: Option<f64>) -> Result<IpCurve> {
    parse_ipcurve_str(&read_text(path)?, override_ref)
}

pub fn psd_csv(p: &PsdCurve) -> String {
    let mut s = String::from("freq_hz,power\n");
    for (f, v) in p.frequencies.iter().zip(&p.power) {
        let _ = writeln!(s, "{},{}", fmt_f64(*f), fmt_f64(*v));
    }
    s
}

/// One sample group per file: every numeric field counts; a leading
/// non-numeric row is taken as a header.
pub fn parse_group_str(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    let mut seen_data = false;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        match parsed {
            Ok(v) => {
                out.extend(v);
                seen_data = true;
            }
            Err(_) if !seen_data && out.is_empty() => seen_data = true,
            Err(_) => return Err(Error::Parse { line: i + 1, message: format!("non-numeric value in {line:?}") }),
        }
    }
    Ok(out)
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{controller_preset, synthesize};
    use crate::ipcurve::trial_ip_curve;
    use crate::model::PendulumModel;
    use crate::signal::{BandSpec, FilterBank};
    use crate::sim::{run_trial, NoiseSpec, SimConfig};

    fn plate_rows(n: usize, rate: f64) -> String {
        let mut s = String::from("# plate export\ntime_s,fx_n,fy_n,fz_n,copx_m,copy_m\n");
        for k in 0..n {
            let t = k as f64 / rate;
            let _ = writeln!(s, "{t},{},0,666.4,{},0.001", (t * 3.0).sin(), 0.01 * (t * 2.0).cos());
        }
        s
    }

    #[test]
    fn three_rows() {
        let r = parse_forceplate_str(&plate_rows(3, 100.0)).unwrap();
        assert_eq!(r.records.len(), 3);
        assert_eq!(r.timing.sample_rate, 100.0);
        assert!(!r.timing.resampled);
    }

    #[test]
    fn sixty_seconds() {
        let r = parse_forceplate_str(&plate_rows(6000, 100.0)).unwrap();
        assert_eq!(r.records.len(), 6000);
        assert!((r.timing.duration - 60.0).abs() < 1e-9);
    }

    #[test]
    fn negative_fz_names_row() {
        let text = "time_s,fx_n,fy_n,fz_n,copx_m,copy_m\n0,0,0,600,0,0\n0.01,0,0,-5,0,0\n";
        match parse_forceplate_str(text) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("fz_n"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_and_malformed_rows() {
        let e = parse_imu_str("time_s,ax_mps2,az_mps2\n0,0,0\n").unwrap_err();
        assert!(matches!(&e, Error::Schema(m) if m.contains("ay_mps2")), "{e}");
        let e = parse_imu_str("time_s,ax_mps2,ay_mps2,az_mps2\n0,0,0,0\n0.01,x,0,0\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
        let e = parse_imu_str("time_s,ax_mps2,ay_mps2,az_mps2\n0,0,0,0\n0.01,0,0\n").unwrap_err();
        assert!(matches!(e, Error::Parse { .. }), "{e}");
    }

    #[test]
    fn duplicate_timestamp_rejected_with_row() {
        let e = parse_imu_str("time_s,ax_mps2,ay_mps2,az_mps2\n0,0,0,0\n0.01,0,0,0\n0.01,0,0,0\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 4, .. }), "{e}");
    }

    #[test]
    fn jitter_resampled_and_gaps_rejected() {
        let mut s = String::from("time_s,ax_mps2,ay_mps2,az_mps2\n");
        for k in 0..200 {
            let j = if k % 2 == 1 { 0.00005 } else { 0.0 };
            let t = k as f64 * 0.01 + j;
            let _ = writeln!(s, "{t},{t},0,9.8");
        }
        let r = parse_imu_str(&s).unwrap();
        assert!(r.timing.resampled && !r.timing.warnings.is_empty());
        assert_eq!(r.timing.sample_rate, 100.0);
        for rec in &r.records {
            assert!((rec.ax - rec.time).abs() < 1e-12);
        }
        let gap = "time_s,ax_mps2,ay_mps2,az_mps2\n0,0,0,0\n0.01,0,0,0\n0.02,0,0,0\n0.06,0,0,0\n0.07,0,0,0\n";
        assert!(matches!(parse_imu_str(gap), Err(Error::Validation(m)) if m.contains("gap")));
        let jitter = "time_s,ax_mps2,ay_mps2,az_mps2\n0,0,0,0\n0.01,0,0,0\n0.02,0,0,0\n0.035,0,0,0\n0.045,0,0,0\n0.055,0,0,0\n";
        assert!(parse_imu_str(jitter).is_err());
    }

    #[test]
    fn trial_round_trip_is_bit_exact() {
        let m = PendulumModel::tip_default();
        let p = controller_preset("toi1", m.gait()).unwrap();
        let k = synthesize(&m, &p.lqr).unwrap();
        let cfg = SimConfig { duration: 12.0, ..SimConfig::default() };
        let s = run_trial(&m, &k, &NoiseSpec { sigma: p.sigma, base_seed: 3 }, &cfg, 2).unwrap();
        let back = parse_trial_str(&trial_csv(&s)).unwrap();
        assert_eq!(back, s);
        let bank = FilterBank::new(&BandSpec::standard(100.0)).unwrap();
        let a = trial_ip_curve(&s, &bank, 0.85).unwrap();
        let b = trial_ip_curve(&back, &bank, 0.85).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = parse_ipcurve_str(&ipcurve_csv(&a), None).unwrap();
        assert_eq!(c.ip_height.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), a.ip_height.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(c.reliable, a.reliable);
        assert_eq!(c.reference_height, 0.85);
    }

    #[test]
    fn kneeling_trial_headers() {
        let cols = trial_columns(Gait::Kneeling);
        assert_eq!(cols[1..3], ["theta2".to_string(), "theta3".to_string()]);
        assert_eq!(cols.len(), 1 + 6 + 5);
    }

    #[test]
    fn failed_trial_metadata_round_trips() {
        let m = PendulumModel::tip_default();
        let k = synthesize(&m, &controller_preset("toi1", m.gait()).unwrap().lqr).unwrap();
        let s = run_trial(&m, &k, &NoiseSpec { sigma: vec![400.0; 3], base_seed: 1 }, &SimConfig::default(), 0).unwrap();
        assert!(s.failed());
        let back = parse_trial_str(&trial_csv(&s)).unwrap();
        assert_eq!(back.failure.as_ref().map(|f| f.sample), s.failure.as_ref().map(|f| f.sample));
        assert_eq!(back.len(), s.len());
    }

    #[test]
    fn groups() {
        assert_eq!(parse_group_str("value\n1\n2,3\n# c\n\n4\n").unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert!(parse_group_str("1\nx\n").is_err());
    }
}
