//! Saliency evaluation: PR curve over 256 byte thresholds, F-measure
//! variants, MAE, and the structure measure.
//!
//! Maps are single-plane tensors (`H×W`, `1×H×W` or `1×1×H×W`). Ground truth is
//! foreground where it is at least 0.5.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EPSILON: f64 = 1e-7;
pub const BETA_SQ: f64 = 0.3;
pub const THRESHOLDS: usize = 256;

/// `round(v·255)` with halves rounded up, clamped to `0..=255`.
pub fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub thresholds: Vec<u8>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

impl PrCurve {
    fn from_points(precision: Vec<f64>, recall: Vec<f64>) -> Self {
        Self {
            thresholds: (0..=255).collect(),
            precision,
            recall,
        }
    }

    pub fn f_scores(&self, beta_sq: f64) -> Vec<f64> {
        self.precision
            .iter()
            .zip(&self.recall)
            .map(|(&p, &r)| f_measure(p, r, beta_sq))
            .collect()
    }

    /// `threshold,precision,recall`, one row per threshold.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,precision,recall\n");
        for ((t, p), r) in self.thresholds.iter().zip(&self.precision).zip(&self.recall) {
            let _ = writeln!(out, "{t},{p},{r}");
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub f_max: f64,
    pub f_mean: f64,
    pub f_adaptive: f64,
    pub mae: f64,
    pub s_measure: f64,
    pub s_region: f64,
    pub s_object: f64,
    pub curve: PrCurve,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetReport {
    /// Per-image reports sorted by id.
    pub images: Vec<ImageMetrics>,
    pub summary: MetricsReport,
}

fn plane_dims(t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    let (h, w) = match s.len() {
        0 => return Err(Error::dim("metric input has no axes")),
        1 => (1, s[0]),
        n => (s[n - 2], s[n - 1]),
    };
    if h * w != t.numel() || h * w == 0 {
        return Err(Error::dim(format!("metric input {s:?} is not a single nonempty plane")));
    }
    Ok((h, w))
}

fn check_pair(s: &Tensor, g: &Tensor) -> Result<(usize, usize)> {
    let dims = plane_dims(s)?;
    if plane_dims(g)? != dims {
        return Err(Error::dim(format!(
            "prediction {:?} and ground truth {:?} differ",
            s.shape(),
            g.shape()
        )));
    }
    Ok(dims)
}

fn is_fg(v: f64) -> bool {
    v >= 0.5
}

pub fn mae(s: &Tensor, g: &Tensor) -> Result<f64> {
    check_pair(s, g)?;
    let total: f64 = s.data().iter().zip(g.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(total / s.numel() as f64)
}

pub fn f_measure(precision: f64, recall: f64, beta_sq: f64) -> f64 {
    (1.0 + beta_sq) * precision * recall / (beta_sq * precision + recall + EPSILON)
}

/// Foreground and background byte histograms.
fn histograms(s: &Tensor, g: &Tensor) -> ([u64; THRESHOLDS], [u64; THRESHOLDS]) {
    let mut fg = [0u64; THRESHOLDS];
    let mut bg = [0u64; THRESHOLDS];
    for (&v, &t) in s.data().iter().zip(g.data()) {
        let b = to_byte(v) as usize;
        if is_fg(t) {
            fg[b] += 1;
        } else {
            bg[b] += 1;
        }
    }
    (fg, bg)
}

fn precision_recall(tp: u64, fp: u64, positives: u64) -> (f64, f64) {
    let tp_f = tp as f64;
    (tp_f / ((tp + fp) as f64 + EPSILON), tp_f / (positives as f64 + EPSILON))
}

/// Precision and recall of `byte(S) >= t` for every `t` in `0..=255`.
pub fn pr_curve(s: &Tensor, g: &Tensor) -> Result<PrCurve> {
    check_pair(s, g)?;
    let (fg, bg) = histograms(s, g);
    let positives: u64 = fg.iter().sum();
    let mut precision = vec![0.0; THRESHOLDS];
    let mut recall = vec![0.0; THRESHOLDS];
    let (mut tp, mut fp) = (0u64, 0u64);
    for t in (0..THRESHOLDS).rev() {
        tp += fg[t];
        fp += bg[t];
        (precision[t], recall[t]) = precision_recall(tp, fp, positives);
    }
    Ok(PrCurve::from_points(precision, recall))
}

/// F-measure at the threshold `min(2·mean(byte(S)), 255)`.
pub fn f_adaptive(s: &Tensor, g: &Tensor, beta_sq: f64) -> Result<f64> {
    check_pair(s, g)?;
    let bytes: Vec<f64> = s.data().iter().map(|&v| to_byte(v) as f64).collect();
    let threshold = (2.0 * bytes.iter().sum::<f64>() / bytes.len() as f64).min(255.0);
    let (mut tp, mut fp, mut positives) = (0u64, 0u64, 0u64);
    for (&b, &t) in bytes.iter().zip(g.data()) {
        let fg = is_fg(t);
        positives += fg as u64;
        if b >= threshold {
            if fg {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    let (p, r) = precision_recall(tp, fp, positives);
    Ok(f_measure(p, r, beta_sq))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
fn std_unbiased(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn object_score(values: &[f64]) -> f64 {
    let x = mean(values);
    2.0 * x / (x * x + 1.0 + std_unbiased(values) + EPSILON)
}

fn s_object(s: &[f64], g: &[bool]) -> f64 {
    let fg: Vec<f64> = s.iter().zip(g).filter(|(_, &f)| f).map(|(&v, _)| v).collect();
    let bg: Vec<f64> = s.iter().zip(g).filter(|(_, &f)| !f).map(|(&v, _)| 1.0 - v).collect();
    let u = fg.len() as f64 / s.len() as f64;
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// Block similarity from means, variances and covariance.
fn block_ssim(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    if n == 0 {
        return 0.0;
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    if n > 1 {
        for (a, b) in x.iter().zip(y) {
            vx += (a - mx).powi(2);
            vy += (b - my).powi(2);
            cxy += (a - mx) * (b - my);
        }
        let d = (n - 1) as f64;
        vx /= d;
        vy /= d;
        cxy /= d;
    }
    let num = 4.0 * mx * my * cxy;
    let den = (mx * mx + my * my) * (vx + vy);
    if num != 0.0 {
        num / (den + EPSILON)
    } else if den == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Split position along one axis: one past the rounded mean foreground index.
fn split_at(mass: &[f64]) -> usize {
    let total: f64 = mass.iter().sum();
    let weighted: f64 = mass.iter().enumerate().map(|(i, m)| i as f64 * m).sum();
    (weighted / total).round_ties_even() as usize + 1
}

fn s_region(s: &[f64], g: &[bool], h: usize, w: usize) -> f64 {
    let col_mass: Vec<f64> = (0..w).map(|x| (0..h).filter(|&y| g[y * w + x]).count() as f64).collect();
    let row_mass: Vec<f64> = (0..h).map(|y| (0..w).filter(|&x| g[y * w + x]).count() as f64).collect();
    let (sx, sy) = (split_at(&col_mass).min(w), split_at(&row_mass).min(h));
    let area = (h * w) as f64;
    let blocks = [(0, sy, 0, sx), (0, sy, sx, w), (sy, h, 0, sx), (sy, h, sx, w)];
    let mut total = 0.0;
    for (y0, y1, x0, x1) in blocks {
        let mut bs = Vec::with_capacity((y1 - y0) * (x1 - x0));
        let mut bg = Vec::with_capacity(bs.capacity());
        for y in y0..y1 {
            for x in x0..x1 {
                bs.push(s[y * w + x]);
                bg.push(if g[y * w + x] { 1.0 } else { 0.0 });
            }
        }
        let weight = bs.len() as f64 / area;
        total += weight * block_ssim(&bs, &bg);
    }
    total
}

/// Structure measure `(s, s_region, s_object)` with mixing weight `alpha` on
/// the region term.
pub fn s_measure(s: &Tensor, g: &Tensor, alpha: f64) -> Result<(f64, f64, f64)> {
    let (h, w) = check_pair(s, g)?;
    let fg: Vec<bool> = g.data().iter().map(|&v| is_fg(v)).collect();
    let frac = fg.iter().filter(|&&f| f).count() as f64 / fg.len() as f64;
    let mean_s = mean(s.data());
    if frac == 0.0 {
        let v = 1.0 - mean_s;
        return Ok((v, v, v));
    }
    if frac == 1.0 {
        return Ok((mean_s, mean_s, mean_s));
    }
    let so = s_object(s.data(), &fg);
    let sr = s_region(s.data(), &fg, h, w);
    let v = (alpha * sr + (1.0 - alpha) * so).clamp(0.0, 1.0);
    Ok((v, sr, so))
}

pub fn evaluate_image(s: &Tensor, g: &Tensor) -> Result<MetricsReport> {
    let curve = pr_curve(s, g)?;
    let f = curve.f_scores(BETA_SQ);
    let f_max = f.iter().copied().fold(0.0, f64::max);
    let f_mean = mean(&f);
    let (s_measure, s_region, s_object) = s_measure(s, g, 0.5)?;
    Ok(MetricsReport {
        f_max,
        f_mean,
        f_adaptive: f_adaptive(s, g, BETA_SQ)?,
        mae: mae(s, g)?,
        s_measure,
        s_region,
        s_object,
        curve,
    })
}

/// Per-image metrics averaged in id order. Images may be evaluated in
/// parallel; the result does not depend on input order.
pub fn evaluate_dataset<I: AsRef<str> + Sync>(pairs: &[(I, Tensor, Tensor)]) -> Result<DatasetReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("evaluate_dataset needs at least one image".into()));
    }
    let mut images = pairs
        .par_iter()
        .map(|(id, s, g)| {
            let id = id.as_ref();
            evaluate_image(s, g)
                .map(|report| ImageMetrics { id: id.to_string(), report })
                .map_err(|e| match e {
                    Error::Dimension(m) => Error::dim(format!("{id}: {m}")),
                    other => other,
                })
        })
        .collect::<Result<Vec<_>>>()?;
    images.sort_by(|a, b| a.id.cmp(&b.id));
    let summary = average(images.iter().map(|i| &i.report));
    Ok(DatasetReport { images, summary })
}

fn average<'a>(reports: impl Iterator<Item = &'a MetricsReport> + Clone) -> MetricsReport {
    let n = reports.clone().count() as f64;
    let avg = |f: &dyn Fn(&MetricsReport) -> f64| reports.clone().map(f).sum::<f64>() / n;
    let pointwise = |f: &dyn Fn(&MetricsReport) -> &[f64]| {
        (0..THRESHOLDS).map(|t| reports.clone().map(|r| f(r)[t]).sum::<f64>() / n).collect()
    };
    MetricsReport {
        f_max: avg(&|r| r.f_max),
        f_mean: avg(&|r| r.f_mean),
        f_adaptive: avg(&|r| r.f_adaptive),
        mae: avg(&|r| r.mae),
        s_measure: avg(&|r| r.s_measure),
        s_region: avg(&|r| r.s_region),
        s_object: avg(&|r| r.s_object),
        curve: PrCurve::from_points(pointwise(&|r| &r.curve.precision), pointwise(&|r| &r.curve.recall)),
    }
}

pub const CSV_HEADER: &str = "id,f_max,f_mean,f_adaptive,mae,s,s_r,s_o";

fn csv_row(id: &str, r: &MetricsReport) -> String {
    format!(
        "{id},{},{},{},{},{},{},{}",
        r.f_max, r.f_mean, r.f_adaptive, r.mae, r.s_measure, r.s_region, r.s_object
    )
}

impl DatasetReport {
    /// One row per image, then a `mean` summary row.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for img in &self.images {
            out.push_str(&csv_row(&img.id, &img.report));
            out.push('\n');
        }
        out.push_str(&csv_row("mean", &self.summary));
        out.push('\n');
        out
    }

    /// Writes `metrics.csv` and `pr_curve.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let metrics = dir.join("metrics.csv");
        std::fs::write(&metrics, self.to_csv()).map_err(|e| Error::io(&metrics, e))?;
        let pr = dir.join("pr_curve.csv");
        std::fs::write(&pr, self.summary.curve.to_csv()).map_err(|e| Error::io(&pr, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, uniform};
    use rand::Rng;

    fn binary(rng: &mut impl Rng, n: usize) -> Tensor {
        Tensor::from_fn(&[n, n], |_| if rng.gen_bool(0.35) { 1.0 } else { 0.0 })
    }

    fn brute_pr(s: &Tensor, g: &Tensor, t: usize) -> (f64, f64) {
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for (a, b) in s.data().iter().zip(g.data()) {
            let pred = ((a * 255.0).round() as usize) >= t;
            let truth = *b == 1.0;
            match (pred, truth) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                _ => {}
            }
        }
        (tp / (tp + fp + 1e-7), tp / (tp + fneg + 1e-7))
    }

    #[test]
    fn mae_examples() {
        let mut rng = seeded(0);
        let g = binary(&mut rng, 16);
        assert_eq!(mae(&g, &g).unwrap(), 0.0);
        assert_eq!(mae(&Tensor::full(&[16, 16], 0.5), &g).unwrap(), 0.5);
        let s = uniform(&mut rng, &[16, 16], 0.0, 1.0);
        let mut total = 0.0;
        for y in 0..16 {
            for x in 0..16 {
                total += (s.data()[y * 16 + x] - g.data()[y * 16 + x]).abs();
            }
        }
        assert!((mae(&s, &g).unwrap() - total / 256.0).abs() < 1e-12);
        let flip = |t: &Tensor| t.map(|v| 1.0 - v);
        assert_eq!(mae(&s, &g).unwrap(), mae(&flip(&s), &flip(&g)).unwrap());
    }

    #[test]
    fn mae_rejects_mismatch() {
        assert!(matches!(
            mae(&Tensor::zeros(&[4, 4]), &Tensor::zeros(&[4, 5])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn pr_examples() {
        let mut rng = seeded(1);
        let g = binary(&mut rng, 8);
        let c = pr_curve(&g, &g).unwrap();
        for t in 1..256 {
            assert!((c.precision[t] - 1.0).abs() < 1e-6 && (c.recall[t] - 1.0).abs() < 1e-6);
        }
        let c = pr_curve(&Tensor::zeros(&[8, 8]), &g).unwrap();
        assert!(c.recall[1..].iter().all(|r| *r < 1e-9));
    }

    #[test]
    fn pr_matches_brute_force() {
        let mut rng = seeded(2);
        for _ in 0..10 {
            let s = uniform(&mut rng, &[8, 8], 0.0, 1.0);
            let g = binary(&mut rng, 8);
            let c = pr_curve(&s, &g).unwrap();
            for t in 0..256 {
                let (p, r) = brute_pr(&s, &g, t);
                assert!((c.precision[t] - p).abs() < 1e-12 && (c.recall[t] - r).abs() < 1e-12);
            }
            assert!(c.recall.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn f_measure_examples() {
        assert!((f_measure(0.75, 0.75, 0.3) - 0.75).abs() < 1e-6);
        assert!((f_measure(1.0, 0.5, 0.3) - 0.8125).abs() < 1e-6);
        assert_eq!(f_measure(0.0, 0.0, 0.3), 0.0);
    }

    #[test]
    fn byte_rounding_is_half_up() {
        assert_eq!(to_byte(0.5), 128);
        assert_eq!(to_byte(-0.1), 0);
        assert_eq!(to_byte(1.2), 255);
    }

    #[test]
    fn s_measure_edge_cases() {
        let zeros = Tensor::zeros(&[8, 8]);
        let ones = Tensor::ones(&[8, 8]);
        assert_eq!(s_measure(&zeros, &zeros, 0.5).unwrap().0, 1.0);
        assert_eq!(s_measure(&ones, &zeros, 0.5).unwrap().0, 0.0);
        assert_eq!(s_measure(&ones, &ones, 0.5).unwrap().0, 1.0);
    }

    #[test]
    fn s_measure_of_truth_is_near_one() {
        let mut rng = seeded(3);
        for _ in 0..20 {
            let g = binary(&mut rng, 16);
            let (s, ..) = s_measure(&g, &g, 0.5).unwrap();
            assert!(s >= 0.99, "{s}");
        }
    }

    #[test]
    fn s_measure_worked_example() {
        // Foreground is the left half of a 4×4 map. Mean column index 0.5
        // rounds to 0 and mean row index 1.5 rounds to 2, so the split is at
        // column 1 and row 3.
        let g = Tensor::from_fn(&[4, 4], |i| if i % 4 < 2 { 1.0 } else { 0.0 });
        let s = Tensor::full(&[4, 4], 0.5);
        let (v, sr, so) = s_measure(&s, &g, 0.5).unwrap();
        let o = 1.0 / (1.25 + EPSILON);
        assert!((so - o).abs() < 1e-12);
        // A constant prediction has zero covariance everywhere: the two pure
        // foreground blocks (3 and 1 pixels) score 1, the mixed blocks 0.
        let want_r = 4.0 / 16.0;
        assert!((sr - want_r).abs() < 1e-12, "{sr}");
        assert!((v - 0.5 * (sr + so)).abs() < 1e-15);
    }

    #[test]
    fn evaluate_dataset_aggregates() {
        let mut rng = seeded(4);
        let pairs: Vec<(String, Tensor, Tensor)> = (0..2)
            .map(|i| (format!("img{i}"), uniform(&mut rng, &[8, 8], 0.0, 1.0), binary(&mut rng, 8)))
            .collect();
        let single = evaluate_dataset(&pairs[..1]).unwrap();
        let one = evaluate_image(&pairs[0].1, &pairs[0].2).unwrap();
        assert_eq!(single.summary, one);
        let dup = evaluate_dataset(&[pairs[0].clone(), pairs[0].clone()]).unwrap();
        assert_eq!(dup.summary, one);

        let both = evaluate_dataset(&pairs).unwrap();
        let two = evaluate_image(&pairs[1].1, &pairs[1].2).unwrap();
        assert!((both.summary.f_max - (one.f_max + two.f_max) / 2.0).abs() < 1e-12);
        assert!((both.summary.mae - (one.mae + two.mae) / 2.0).abs() < 1e-12);
        assert!((both.summary.s_measure - (one.s_measure + two.s_measure) / 2.0).abs() < 1e-12);
        for t in 0..256 {
            let p = (one.curve.precision[t] + two.curve.precision[t]) / 2.0;
            assert!((both.summary.curve.precision[t] - p).abs() < 1e-12);
        }

        let reversed: Vec<_> = pairs.iter().rev().cloned().collect();
        assert_eq!(evaluate_dataset(&reversed).unwrap(), both);
        assert!(both.summary.f_max >= both.summary.f_mean && both.summary.f_max >= both.summary.f_adaptive);
    }

    #[test]
    fn evaluate_dataset_errors() {
        let empty: Vec<(String, Tensor, Tensor)> = Vec::new();
        assert!(matches!(evaluate_dataset(&empty), Err(Error::Contract(_))));
        let bad = [("odd_one", Tensor::zeros(&[4, 4]), Tensor::zeros(&[8, 8]))];
        let err = evaluate_dataset(&bad).unwrap_err().to_string();
        assert!(err.contains("odd_one"), "{err}");
    }

    #[test]
    fn csv_layout() {
        let mut rng = seeded(5);
        let pairs = [("a", uniform(&mut rng, &[8, 8], 0.0, 1.0), binary(&mut rng, 8))];
        let r = evaluate_dataset(&pairs).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("mean,"));
        assert_eq!(r.summary.curve.to_csv().lines().count(), 257);
    }
}
