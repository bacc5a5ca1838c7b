//! Cross-level supervision: pixel BCE, windowed region statistics, soft
//! F-measure, and the geometric weighting across prediction heads.
//!
//! Maps are `N×1×H×W` (or any shape whose leading axis is the sample axis
//! when there are at least three axes). Every loss returns a `[1]` variable.

use crate::error::{Error, Result};
use crate::graph::{Graph, Reduce, Var};
use crate::tensor::Tensor;

/// Guard added to every ratio denominator in the object loss.
pub const EPSILON: f64 = 1e-7;
/// Saliency values are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` inside the log.
pub const BCE_CLAMP: f64 = 1e-7;
pub const DEFAULT_BETA_SQ: f64 = 0.3;
/// Map side at which [`RegionConfig::default`] is specified.
pub const REFERENCE_SIDE: usize = 64;
pub const MAX_LEVELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegionConfig {
    pub window: usize,
    pub stride: usize,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self { window: 11, stride: 5 }
    }
}

impl RegionConfig {
    pub fn new(window: usize, stride: usize) -> Result<Self> {
        if window == 0 || stride == 0 || stride > window {
            return Err(Error::Config(format!(
                "region window {window} / stride {stride}: need 1 <= stride <= window"
            )));
        }
        Ok(Self { window, stride })
    }

    /// Rescales a configuration given at [`REFERENCE_SIDE`] to maps whose
    /// shorter side is `side`, keeping both values at least 1 and the window
    /// inside the map.
    pub fn scaled(&self, side: usize) -> Self {
        let scale = |v: usize| ((v * side) as f64 / REFERENCE_SIDE as f64).round().max(1.0) as usize;
        let window = scale(self.window).min(side.max(1));
        let stride = scale(self.stride).min(window);
        Self { window, stride }
    }
}

/// Which of the three supervision terms contribute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub pixel: bool,
    pub region: bool,
    pub object: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self {
            pixel: true,
            region: true,
            object: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub region: RegionConfig,
    pub beta_sq: f64,
    pub terms: LossTerms,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            region: RegionConfig::default(),
            beta_sq: DEFAULT_BETA_SQ,
            terms: LossTerms::default(),
        }
    }
}

fn check_pair(g: &Graph, s: Var, gt: Var, what: &str) -> Result<()> {
    if g.shape(s) != g.shape(gt) {
        return Err(Error::dim(format!(
            "{what}: prediction {:?} and ground truth {:?} differ",
            g.shape(s),
            g.shape(gt)
        )));
    }
    Ok(())
}

fn sample_rows(shape: &[usize]) -> usize {
    if shape.len() >= 3 {
        shape[0]
    } else {
        1
    }
}

/// Mean binary cross entropy over every pixel.
pub fn pixel_bce(g: &mut Graph, s: Var, gt: Var) -> Result<Var> {
    check_pair(g, s, gt, "pixel_bce")?;
    let log_s = g.ln_clamped(s, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let one_minus_s = g.one_minus(s);
    let log_not_s = g.ln_clamped(one_minus_s, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let not_gt = g.one_minus(gt);
    let pos = g.mul(gt, log_s)?;
    let neg = g.mul(not_gt, log_not_s)?;
    let ll = g.add(pos, neg)?;
    let mean = g.mean(ll)?;
    Ok(g.mul_scalar(mean, -1.0))
}

/// Mean over windows (and samples) of the squared gap in window means plus the
/// squared gap in window standard deviations.
pub fn region_ssd(g: &mut Graph, s: Var, gt: Var, cfg: &RegionConfig) -> Result<Var> {
    check_pair(g, s, gt, "region_ssd")?;
    RegionConfig::new(cfg.window, cfg.stride)?;
    let mu_s = g.window_reduce(s, cfg.window, cfg.stride, Reduce::Mean)?;
    let mu_g = g.window_reduce(gt, cfg.window, cfg.stride, Reduce::Mean)?;
    let sd_s = g.window_reduce(s, cfg.window, cfg.stride, Reduce::Std)?;
    let sd_g = g.window_reduce(gt, cfg.window, cfg.stride, Reduce::Std)?;
    let dmu = g.sub(mu_s, mu_g)?;
    let dsd = g.sub(sd_s, sd_g)?;
    let dmu2 = g.square(dmu);
    let dsd2 = g.square(dsd);
    let ssd = g.add(dmu2, dsd2)?;
    g.mean(ssd)
}

/// Per-sample soft statistics (shape `[N]`) and the batch-mean loss.
#[derive(Clone, Copy, Debug)]
pub struct ObjectLoss {
    pub loss: Var,
    pub precision: Var,
    pub recall: Var,
    pub f: Var,
}

/// `1 - F_β` with soft precision and recall from global pixel sums per sample.
/// The F denominator is floored at [`EPSILON`], which only matters when both
/// precision and recall vanish.
pub fn object_fmeasure_loss(g: &mut Graph, s: Var, gt: Var, beta_sq: f64) -> Result<ObjectLoss> {
    check_pair(g, s, gt, "object_fmeasure_loss")?;
    if !(beta_sq > 0.0) {
        return Err(Error::Config(format!("beta_sq must be positive, got {beta_sq}")));
    }
    let rows = sample_rows(g.shape(s));
    let overlap = g.mul(s, gt)?;
    let tp = g.reduce_rows(overlap, rows, Reduce::Sum)?;
    let sum_s = g.reduce_rows(s, rows, Reduce::Sum)?;
    let sum_g = g.reduce_rows(gt, rows, Reduce::Sum)?;
    let sum_s = g.add_scalar(sum_s, EPSILON);
    let sum_g = g.add_scalar(sum_g, EPSILON);
    let precision = g.div(tp, sum_s)?;
    let recall = g.div(tp, sum_g)?;
    let pr = g.mul(precision, recall)?;
    let num = g.mul_scalar(pr, 1.0 + beta_sq);
    let bp = g.mul_scalar(precision, beta_sq);
    let den = g.add(bp, recall)?;
    let den = g.clamp(den, EPSILON, f64::INFINITY);
    let f = g.div(num, den)?;
    let miss = g.one_minus(f);
    let loss = g.mean(miss)?;
    Ok(ObjectLoss {
        loss,
        precision,
        recall,
        f,
    })
}

/// Loss components of one prediction head.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelLoss {
    /// 1 for the final prediction, increasing towards the deepest head.
    pub level: usize,
    pub weight: f64,
    pub pixel: f64,
    pub region: f64,
    pub object: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub pixel: f64,
    pub region: f64,
    pub object: f64,
    pub total: f64,
    pub per_level: Vec<LevelLoss>,
    pub final_loss: f64,
}

/// Weight of 1-based `level`: `1 / 2^(level-1)`.
pub fn level_weight(level: usize) -> f64 {
    0.5f64.powi(level as i32 - 1)
}

/// The three terms of one head summed in the graph. Disabled terms contribute
/// a constant zero.
pub fn combined_loss(g: &mut Graph, s: Var, gt: Var, cfg: &LossConfig) -> Result<(Var, LevelLoss)> {
    check_pair(g, s, gt, "combined_loss")?;
    let zero = |g: &mut Graph| g.constant(Tensor::scalar(0.0));
    let pixel = if cfg.terms.pixel { pixel_bce(g, s, gt)? } else { zero(g) };
    let region = if cfg.terms.region { region_ssd(g, s, gt, &cfg.region)? } else { zero(g) };
    let object = if cfg.terms.object {
        object_fmeasure_loss(g, s, gt, cfg.beta_sq)?.loss
    } else {
        zero(g)
    };
    let partial = g.add(pixel, region)?;
    let total = g.add(partial, object)?;
    let level = LevelLoss {
        level: 1,
        weight: 1.0,
        pixel: g.value(pixel).item()?,
        region: g.value(region).item()?,
        object: g.value(object).item()?,
        total: g.value(total).item()?,
    };
    Ok((total, level))
}

/// Weighted sum over heads ordered final-first, all compared against `gt`.
pub fn multi_level_loss(g: &mut Graph, levels: &[Var], gt: Var, cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    if levels.is_empty() || levels.len() > MAX_LEVELS {
        return Err(Error::Contract(format!(
            "multi-level loss takes 1 to {MAX_LEVELS} predictions, got {}",
            levels.len()
        )));
    }
    let mut per_level = Vec::with_capacity(levels.len());
    let mut acc: Option<Var> = None;
    for (i, &s) in levels.iter().enumerate() {
        let (total, mut parts) = combined_loss(g, s, gt, cfg)?;
        parts.level = i + 1;
        parts.weight = level_weight(i + 1);
        let weighted = g.mul_scalar(total, parts.weight);
        acc = Some(match acc {
            None => weighted,
            Some(a) => g.add(a, weighted)?,
        });
        per_level.push(parts);
    }
    let root = acc.expect("at least one level");
    let first = &per_level[0];
    let breakdown = LossBreakdown {
        pixel: first.pixel,
        region: first.region,
        object: first.object,
        total: first.total,
        final_loss: g.value(root).item()?,
        per_level,
    };
    Ok((root, breakdown))
}

impl LossBreakdown {
    /// Re-evaluates the weighted sum from the per-level records, in the same
    /// order the graph used.
    pub fn recompute_final(&self) -> f64 {
        let mut acc = 0.0;
        for (i, l) in self.per_level.iter().enumerate() {
            let w = l.total * l.weight;
            acc = if i == 0 { w } else { acc + w };
        }
        acc
    }

    pub const CSV_HEADER: &'static str = "step,lr,pixel,region,object,total,final";

    pub fn csv_row(&self, step: usize, lr: f64) -> String {
        format!(
            "{step},{lr},{},{},{},{},{}",
            self.pixel, self.region, self.object, self.total, self.final_loss
        )
    }
}
