//! Image-quality metrics and stage-wise run reports.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::raster::{Image, MetalMask};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty region")]
    EmptyRegion,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("missing stage {stage} for case {case}")]
    MissingStage { case: String, stage: String },
    #[error("metrics parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Reported when two images are identical.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Canonical stage order, most corrupted first.
pub const STAGES: [&str; 5] = ["uncorrected", "prior@0", "prior@refined", "nmar", "residual"];

pub const CSV_HEADER: &str = "case,stage,rmse,psnr,ssim,runtime_s";

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.geometry != b.geometry {
        return Err(EvalError::Shape(format!(
            "{}x{} vs {}x{}",
            a.geometry.n_rows, a.geometry.n_cols, b.geometry.n_rows, b.geometry.n_cols
        )));
    }
    Ok(())
}

pub fn rmse(a: &Image, b: &Image, region: Option<&MetalMask>) -> Result<f64> {
    check_same(a, b)?;
    let (mut acc, mut n) = (0.0f64, 0usize);
    match region {
        Some(mask) => {
            if mask.geometry != a.geometry {
                return Err(EvalError::Shape("region geometry differs".into()));
            }
            for ((&x, &y), &m) in a.values.iter().zip(&b.values).zip(&mask.bits) {
                if m {
                    acc += (x as f64 - y as f64).powi(2);
                    n += 1;
                }
            }
        }
        None => {
            for (&x, &y) in a.values.iter().zip(&b.values) {
                acc += (x as f64 - y as f64).powi(2);
            }
            n = a.values.len();
        }
    }
    if n == 0 {
        return Err(EvalError::EmptyRegion);
    }
    Ok((acc / n as f64).sqrt())
}

pub fn psnr_from_rmse(rmse: f64, data_range: f64) -> f64 {
    if rmse <= 0.0 {
        return PSNR_CAP;
    }
    (20.0 * (data_range / rmse).log10()).min(PSNR_CAP)
}

pub fn psnr(a: &Image, b: &Image, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(EvalError::Invalid(format!("data range {data_range}")));
    }
    Ok(psnr_from_rmse(rmse(a, b, None)?, data_range))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a row-major field.
fn filter_valid(x: &[f64], rows: usize, cols: usize, w: &[f64]) -> Vec<f64> {
    let k = w.len();
    let (vr, vc) = (rows - k + 1, cols - k + 1);
    let mut tmp = vec![0.0; rows * vc];
    for r in 0..rows {
        for c in 0..vc {
            tmp[r * vc + c] = (0..k).map(|j| w[j] * x[r * cols + c + j]).sum();
        }
    }
    let mut out = vec![0.0; vr * vc];
    for r in 0..vr {
        for c in 0..vc {
            out[r * vc + c] = (0..k).map(|i| w[i] * tmp[(r + i) * vc + c]).sum();
        }
    }
    out
}

/// SSIM with a normalized Gaussian window, averaged over positions where the
/// window fits inside the image.
pub fn ssim_with(a: &Image, b: &Image, data_range: f64, window: usize, sigma: f64) -> Result<f64> {
    check_same(a, b)?;
    let g = a.geometry;
    if window % 2 == 0 || window == 0 || window > g.n_rows.min(g.n_cols) {
        return Err(EvalError::Invalid(format!("window {window} for {}x{}", g.n_rows, g.n_cols)));
    }
    if !(data_range > 0.0) {
        return Err(EvalError::Invalid(format!("data range {data_range}")));
    }
    let w = gaussian_window(window, sigma);
    let x: Vec<f64> = a.values.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.values.iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
    let (r, c) = (g.n_rows, g.n_cols);
    let mx = filter_valid(&x, r, c, &w);
    let my = filter_valid(&y, r, c, &w);
    let mxx = filter_valid(&prod(&x, &x), r, c, &w);
    let myy = filter_valid(&prod(&y, &y), r, c, &w);
    let mxy = filter_valid(&prod(&x, &y), r, c, &w);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut acc = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(acc / mx.len() as f64)
}

pub fn ssim(a: &Image, b: &Image, data_range: f64) -> Result<f64> {
    ssim_with(a, b, data_range, SSIM_WINDOW, SSIM_SIGMA)
}

/// max − min of the reference image, or 1 for a flat reference.
pub fn data_range(reference: &Image) -> f64 {
    let (lo, hi) = reference.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v as f64), hi.max(v as f64))
    });
    if hi > lo {
        hi - lo
    } else {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub case: String,
    pub stage: String,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub runtime_s: f64,
}

impl MetricRow {
    pub fn compute(case: &str, stage: &str, image: &Image, reference: &Image, runtime_s: f64) -> Result<Self> {
        let range = data_range(reference);
        let e = rmse(image, reference, None)?;
        // small images fall back to the largest odd window that fits
        let side = image.geometry.n_rows.min(image.geometry.n_cols);
        let window = SSIM_WINDOW.min(if side % 2 == 1 { side } else { side - 1 });
        Ok(Self {
            case: case.to_string(),
            stage: stage.to_string(),
            rmse: e,
            psnr: psnr_from_rmse(e, range),
            ssim: ssim_with(image, reference, range, window, SSIM_SIGMA)?,
            runtime_s,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSummary {
    pub stage: String,
    pub n: usize,
    pub rmse: (f64, f64),
    pub psnr: (f64, f64),
    pub ssim: (f64, f64),
    pub runtime_s: (f64, f64),
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn stage_rank(stage: &str) -> usize {
    STAGES.iter().position(|s| *s == stage).unwrap_or(STAGES.len())
}

/// Mean ± population std per stage; known stages in canonical order first.
pub fn summarize(rows: &[MetricRow]) -> Vec<StageSummary> {
    let mut stages: Vec<&str> = Vec::new();
    for r in rows {
        if !stages.contains(&r.stage.as_str()) {
            stages.push(&r.stage);
        }
    }
    stages.sort_by_key(|s| stage_rank(s));
    stages
        .into_iter()
        .map(|stage| {
            let sel: Vec<&MetricRow> = rows.iter().filter(|r| r.stage == stage).collect();
            let col = |f: fn(&MetricRow) -> f64| mean_std(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
            StageSummary {
                stage: stage.to_string(),
                n: sel.len(),
                rmse: col(|r| r.rmse),
                psnr: col(|r| r.psnr),
                ssim: col(|r| r.ssim),
                runtime_s: col(|r| r.runtime_s),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderingFlag {
    pub from: String,
    pub to: String,
    pub holds: bool,
}

/// Whether mean RMSE strictly decreases between consecutive canonical stages
/// present in the summary.
pub fn ordering_flags(summary: &[StageSummary]) -> Vec<OrderingFlag> {
    let present: Vec<&StageSummary> = STAGES.iter().filter_map(|s| summary.iter().find(|x| x.stage == *s)).collect();
    present
        .windows(2)
        .map(|w| OrderingFlag { from: w[0].stage.clone(), to: w[1].stage.clone(), holds: w[1].rmse.0 < w[0].rmse.0 })
        .collect()
}

/// Mean RMSE ratio uncorrected / prior@0 when both stages are present.
pub fn prior_gain(summary: &[StageSummary]) -> Option<f64> {
    let find = |s: &str| summary.iter().find(|x| x.stage == s).map(|x| x.rmse.0);
    Some(find("uncorrected")? / find("prior@0")?)
}

/// Every case must carry every listed stage.
pub fn check_complete(rows: &[MetricRow], stages: &[&str]) -> Result<()> {
    let mut cases: Vec<&str> = rows.iter().map(|r| r.case.as_str()).collect();
    cases.dedup();
    for case in cases {
        for stage in stages {
            if !rows.iter().any(|r| r.case == case && r.stage == *stage) {
                return Err(EvalError::MissingStage { case: case.into(), stage: stage.to_string() });
            }
        }
    }
    Ok(())
}

pub fn to_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{:?},{:?},{:?},{:?}", r.case, r.stage, r.rmse, r.psnr, r.ssim, r.runtime_s);
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => return Err(EvalError::Parse { line: 1, msg: "bad header".into() }),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(EvalError::Parse { line: i + 1, msg: format!("{} fields", f.len()) });
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| EvalError::Parse { line: i + 1, msg: e.to_string() });
        rows.push(MetricRow {
            case: f[0].to_string(),
            stage: f[1].to_string(),
            rmse: num(f[2])?,
            psnr: num(f[3])?,
            ssim: num(f[4])?,
            runtime_s: num(f[5])?,
        });
    }
    Ok(rows)
}

pub fn write_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    std::fs::write(path, to_csv(rows))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricRow>> {
    parse_csv(&std::fs::read_to_string(path)?)
}

/// Markdown summary table with ordering flags; `extra` sections are appended as is.
pub fn render_markdown(title: &str, rows: &[MetricRow], extra: &[String]) -> String {
    let summary = summarize(rows);
    let mut s = format!("# {title}\n\n");
    let n_cases = {
        let mut c: Vec<&str> = rows.iter().map(|r| r.case.as_str()).collect();
        c.sort_unstable();
        c.dedup();
        c.len()
    };
    let _ = writeln!(s, "Cases: {n_cases}\n");
    s.push_str("| stage | n | RMSE | PSNR (dB) | SSIM | runtime (s) |\n|---|---|---|---|---|---|\n");
    for st in &summary {
        let _ = writeln!(
            s,
            "| {} | {} | {:.5} ± {:.5} | {:.2} ± {:.2} | {:.4} ± {:.4} | {:.3} ± {:.3} |",
            st.stage, st.n, st.rmse.0, st.rmse.1, st.psnr.0, st.psnr.1, st.ssim.0, st.ssim.1, st.runtime_s.0, st.runtime_s.1
        );
    }
    let flags = ordering_flags(&summary);
    if !flags.is_empty() {
        s.push_str("\n## RMSE ordering\n\n");
        for f in &flags {
            let _ = writeln!(s, "- {} > {}: {}", f.from, f.to, if f.holds { "yes" } else { "NO" });
        }
        if let Some(g) = prior_gain(&summary) {
            let _ = writeln!(s, "- uncorrected / prior@0 = {g:.3}");
        }
    }
    for e in extra {
        s.push('\n');
        s.push_str(e);
        if !e.ends_with('\n') {
            s.push('\n');
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::ImageGeometry;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(n: usize, values: Vec<f32>) -> Image {
        Image { geometry: ImageGeometry::new(n, n as f64).unwrap(), values }
    }

    fn random(n: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        img(n, (0..n * n).map(|_| rng.random::<f32>()).collect())
    }

    fn oracle_ssim(a: &Image, b: &Image, range: f64) -> f64 {
        let n = a.geometry.n_rows;
        let k = 11usize;
        let mut w = [[0.0f64; 11]; 11];
        let mut total = 0.0;
        for i in 0..k {
            for j in 0..k {
                let d2 = (i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2);
                w[i][j] = (-d2 / (2.0 * 1.5 * 1.5)).exp();
                total += w[i][j];
            }
        }
        let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
        let mut acc = 0.0;
        let mut count = 0;
        for r in 0..=n - k {
            for c in 0..=n - k {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let p = (r + i) * n + c + j;
                        mx += w[i][j] / total * a.values[p] as f64;
                        my += w[i][j] / total * b.values[p] as f64;
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let p = (r + i) * n + c + j;
                        let dx = a.values[p] as f64 - mx;
                        let dy = b.values[p] as f64 - my;
                        vx += w[i][j] / total * dx * dx;
                        vy += w[i][j] / total * dy * dy;
                        cov += w[i][j] / total * dx * dy;
                    }
                }
                acc += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        acc / count as f64
    }

    #[test]
    fn rmse_basics_and_oracle() {
        let a = random(16, 1);
        assert_eq!(rmse(&a, &a, None).unwrap(), 0.0);
        let shifted = img(16, a.values.iter().map(|v| v + 0.01).collect());
        assert!((rmse(&shifted, &a, None).unwrap() - 0.01).abs() < 1e-6);
        let b = random(16, 2);
        let mut acc = 0.0;
        for r in 0..16 {
            for c in 0..16 {
                acc += (a.values[r * 16 + c] as f64 - b.values[r * 16 + c] as f64).powi(2);
            }
        }
        assert!((rmse(&a, &b, None).unwrap() - (acc / 256.0).sqrt()).abs() < 1e-9);
        let full = MetalMask { geometry: a.geometry, bits: vec![true; 256] };
        assert_eq!(rmse(&a, &b, Some(&full)).unwrap(), rmse(&a, &b, None).unwrap());
        assert!(matches!(rmse(&a, &b, Some(&MetalMask::empty(a.geometry))), Err(EvalError::EmptyRegion)));
    }

    #[test]
    fn psnr_identities() {
        assert_eq!(psnr_from_rmse(2.0, 2.0), 0.0);
        assert!((psnr_from_rmse(0.1, 1.0) - 20.0).abs() < 1e-12);
        let a = random(8, 3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        assert!(psnr(&a, &a, 0.0).is_err());
    }

    #[test]
    fn ssim_matches_double_loop_oracle() {
        let a = random(24, 4);
        let b = img(24, a.values.iter().zip(&random(24, 5).values).map(|(x, y)| 0.7 * x + 0.3 * y).collect());
        let fast = ssim(&a, &b, 1.0).unwrap();
        assert!((fast - oracle_ssim(&a, &b, 1.0)).abs() < 1e-6);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_uncorrelated_noise_near_zero() {
        let a = random(64, 6);
        let b = random(64, 7);
        let neg = img(64, b.values.iter().map(|v| 1.0 - v).collect());
        assert!(ssim(&a, &neg, 1.0).unwrap().abs() < 0.1);
        assert!(ssim(&a, &b, 1.0).unwrap().abs() < 0.1);
    }

    #[test]
    fn ssim_window_validation() {
        let a = random(8, 8);
        assert!(ssim(&a, &a, 1.0).is_err());
        assert!(ssim_with(&a, &a, 1.0, 4, 1.5).is_err());
        let row = MetricRow::compute("c", "nmar", &a, &random(8, 9), 0.0).unwrap();
        assert!(row.ssim.is_finite());
    }

    fn row(case: &str, stage: &str, rmse: f64) -> MetricRow {
        MetricRow { case: case.into(), stage: stage.into(), rmse, psnr: 20.0, ssim: 0.5, runtime_s: 0.25 }
    }

    #[test]
    fn single_case_summary_has_zero_std() {
        let rows = vec![row("a", "nmar", 0.3)];
        let s = summarize(&rows);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].rmse, (0.3, 0.0));
        assert_eq!(s[0].runtime_s, (0.25, 0.0));
    }

    #[test]
    fn ordering_flags_follow_canonical_order() {
        let rows = vec![
            row("a", "residual", 0.1),
            row("a", "uncorrected", 1.0),
            row("a", "prior@0", 0.4),
            row("a", "nmar", 0.2),
            row("a", "prior@refined", 0.5),
        ];
        let s = summarize(&rows);
        assert_eq!(s.iter().map(|x| x.stage.as_str()).collect::<Vec<_>>(), STAGES.to_vec());
        let flags: Vec<bool> = ordering_flags(&s).iter().map(|f| f.holds).collect();
        assert_eq!(flags, vec![true, false, true, true]);
        assert!((prior_gain(&s).unwrap() - 2.5).abs() < 1e-12);
        let md = render_markdown("t", &rows, &[]);
        assert!(md.contains("prior@0 > prior@refined: NO"));
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![row("case_0001", "nmar", 0.1 + 0.2), MetricRow { psnr: PSNR_CAP, ..row("case_0002", "residual", 1e-9) }];
        assert_eq!(parse_csv(&to_csv(&rows)).unwrap(), rows);
        assert!(parse_csv("bad\n").is_err());
        assert!(check_complete(&rows, &["nmar"]).is_err());
        assert!(check_complete(&rows[..1], &["nmar"]).is_ok());
    }

    proptest! {
        #[test]
        fn ssim_symmetric(seed in 0u64..1000) {
            let a = random(16, seed);
            let b = random(16, seed + 1);
            let ab = ssim(&a, &b, 1.0).unwrap();
            let ba = ssim(&b, &a, 1.0).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
        }

        #[test]
        fn psnr_decreasing(a in 1e-4f64..1.0, d in 1e-6f64..1.0) {
            prop_assert!(psnr_from_rmse(a + d, 1.0) < psnr_from_rmse(a, 1.0));
        }
    }
}
