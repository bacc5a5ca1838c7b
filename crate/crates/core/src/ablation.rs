//! Ablation grid over the supervision terms and the architecture switches.
//!
//! Ten variants toggle the pixel, region and object terms, supervision of
//! every head ("ms"), channel and position attention, and gated fusion. Each
//! variant trains a fresh model from the same base configuration and seeds,
//! so the whole grid is deterministic. Results are written as CSV with
//! floats in shortest round-trip form.

use crate::config::RunConfig;
use crate::data::SaliencySample;
use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::losses::LossTerms;
use crate::metrics::MetricsReport;
use crate::model::ClassMini;
use crate::trainer::train_loop;

/// One row of the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub pixel: bool,
    pub region: bool,
    pub object: bool,
    pub multi_stage: bool,
    pub channel: bool,
    pub position: bool,
    pub ffm: bool,
}

const fn v(flags: [bool; 7]) -> Variant {
    let [pixel, region, object, multi_stage, channel, position, ffm] = flags;
    Variant { pixel, region, object, multi_stage, channel, position, ffm }
}

const T: bool = true;
const F: bool = false;

/// The ten variants, numbered from 1 in this order.
pub const GRID: [Variant; 10] = [
    v([T, F, F, F, F, F, F]),
    v([T, T, F, F, F, F, F]),
    v([T, T, T, F, F, F, F]),
    v([T, T, T, T, F, F, F]),
    v([T, T, T, T, F, F, T]),
    v([T, T, T, T, T, T, F]),
    v([T, T, T, T, T, F, T]),
    v([T, T, T, T, F, T, T]),
    v([T, F, F, T, T, T, T]),
    v([T, T, T, T, T, T, T]),
];

impl Variant {
    fn flags(&self) -> [bool; 7] {
        [self.pixel, self.region, self.object, self.multi_stage, self.channel, self.position, self.ffm]
    }

    /// `base` with this variant's switches applied.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.train.terms = LossTerms { pixel: self.pixel, region: self.region, object: self.object };
        cfg.train.multi_stage = self.multi_stage;
        cfg.model.use_channel = self.channel;
        cfg.model.use_position = self.position;
        cfg.model.fusion = if self.ffm { FusionKind::Gated } else { FusionKind::Sum };
        cfg
    }
}

/// Metrics of one trained variant on the validation split.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    /// 1-based position in [`GRID`].
    pub row: usize,
    pub variant: Variant,
    pub f_max: f64,
    pub s_measure: f64,
    pub mae: f64,
    pub f_mean: f64,
    pub f_adaptive: f64,
    /// Mean `L_Final` of the last epoch (comparable only between rows with
    /// the same loss terms).
    pub final_loss: f64,
}

pub const RESULTS_HEADER: &str =
    "row,pixel,region,object,ms,cla_c,cla_p,ffm,f_beta,s_measure,mae,f_mean,f_adaptive,final_loss";

/// A comparison the grid is expected to show: `better` beats `worse` on
/// `metric` (higher F and S, lower MAE).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Claim {
    pub better: usize,
    pub worse: usize,
    pub metric: Metric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    FBeta,
    SMeasure,
    Mae,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::FBeta => "f_beta",
            Metric::SMeasure => "s_measure",
            Metric::Mae => "mae",
        }
    }

    fn of(&self, r: &AblationRow) -> f64 {
        match self {
            Metric::FBeta => r.f_max,
            Metric::SMeasure => r.s_measure,
            Metric::Mae => r.mae,
        }
    }

    fn holds(&self, better: f64, worse: f64) -> bool {
        match self {
            Metric::Mae => better <= worse,
            _ => better >= worse,
        }
    }
}

/// Expected directions between rows.
pub const CLAIMS: [Claim; 9] = [
    Claim { better: 2, worse: 1, metric: Metric::SMeasure },
    Claim { better: 3, worse: 2, metric: Metric::FBeta },
    Claim { better: 4, worse: 3, metric: Metric::FBeta },
    Claim { better: 5, worse: 4, metric: Metric::FBeta },
    Claim { better: 6, worse: 4, metric: Metric::FBeta },
    Claim { better: 7, worse: 5, metric: Metric::FBeta },
    Claim { better: 8, worse: 5, metric: Metric::FBeta },
    Claim { better: 10, worse: 4, metric: Metric::FBeta },
    Claim { better: 10, worse: 9, metric: Metric::FBeta },
];

pub const CLAIMS_HEADER: &str = "better,worse,metric,better_value,worse_value,holds";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

fn bit(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{RESULTS_HEADER}\n");
        for r in &self.rows {
            let flags: Vec<&str> = r.variant.flags().iter().map(|&b| bit(b)).collect();
            out += &format!(
                "{},{},{},{},{},{},{},{}\n",
                r.row,
                flags.join(","),
                r.f_max,
                r.s_measure,
                r.mae,
                r.f_mean,
                r.f_adaptive,
                r.final_loss
            );
        }
        out
    }

    /// Parses and validates a results table: header, row numbers within the
    /// grid, flags agreeing with the grid, finite metrics in range.
    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, m: String| Error::Format(format!("results line {line}: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some(RESULTS_HEADER) {
            return Err(bad(1, format!("expected header {RESULTS_HEADER:?}")));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let n = i + 2;
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 14 {
                return Err(bad(n, format!("expected 14 fields, got {}", cells.len())));
            }
            let row: usize = cells[0].parse().map_err(|_| bad(n, format!("bad row {:?}", cells[0])))?;
            let variant = *GRID
                .get(row.wrapping_sub(1))
                .ok_or_else(|| bad(n, format!("row {row} outside 1..={}", GRID.len())))?;
            let expected: Vec<&str> = variant.flags().iter().map(|&b| bit(b)).collect();
            if cells[1..8] != expected[..] {
                return Err(bad(n, format!("flags of row {row} do not match the grid")));
            }
            let mut x = [0.0f64; 6];
            for (j, c) in cells[8..].iter().enumerate() {
                x[j] = c.parse().map_err(|_| bad(n, format!("bad number {c:?}")))?;
                if !x[j].is_finite() {
                    return Err(bad(n, format!("non-finite value {c:?}")));
                }
            }
            if x[..5].iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(bad(n, "metric outside [0, 1]".into()));
            }
            rows.push(AblationRow {
                row,
                variant,
                f_max: x[0],
                s_measure: x[1],
                mae: x[2],
                f_mean: x[3],
                f_adaptive: x[4],
                final_loss: x[5],
            });
        }
        Ok(Self { rows })
    }

    /// Claims whose rows are both present, with their outcome.
    pub fn claims(&self) -> Vec<(Claim, f64, f64, bool)> {
        let find = |row: usize| self.rows.iter().find(|r| r.row == row);
        CLAIMS
            .iter()
            .filter_map(|c| {
                let (b, w) = (find(c.better)?, find(c.worse)?);
                let (vb, vw) = (c.metric.of(b), c.metric.of(w));
                Some((*c, vb, vw, c.metric.holds(vb, vw)))
            })
            .collect()
    }

    pub fn claims_csv(&self) -> String {
        let mut out = format!("{CLAIMS_HEADER}\n");
        for (c, vb, vw, ok) in self.claims() {
            out += &format!("{},{},{},{vb},{vw},{}\n", c.better, c.worse, c.metric.name(), bit(ok));
        }
        out
    }
}

fn row_from(row: usize, variant: Variant, report: &MetricsReport, final_loss: f64) -> AblationRow {
    AblationRow {
        row,
        variant,
        f_max: report.f_max,
        s_measure: report.s_measure,
        mae: report.mae,
        f_mean: report.f_mean,
        f_adaptive: report.f_adaptive,
        final_loss,
    }
}

/// Trains and evaluates the selected grid rows (1-based, all when empty).
/// `progress` sees each row as it completes.
pub fn run_ablation(
    base: &RunConfig,
    train: &[SaliencySample],
    val: &[SaliencySample],
    rows: &[usize],
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationReport> {
    if val.is_empty() {
        return Err(Error::Contract("ablation needs a nonempty validation split".into()));
    }
    let selected: Vec<usize> = if rows.is_empty() { (1..=GRID.len()).collect() } else { rows.to_vec() };
    if let Some(r) = selected.iter().find(|&&r| r == 0 || r > GRID.len()) {
        return Err(Error::Config(format!("ablation row {r} outside 1..={}", GRID.len())));
    }
    let mut report = AblationReport::default();
    for row in selected {
        let variant = GRID[row - 1];
        let cfg = variant.apply(base);
        cfg.validate()?;
        let model = ClassMini::build(cfg.model.clone())?;
        let (_, log) = train_loop(model, train, val, &cfg.train)?;
        let last = log.epochs.last().ok_or_else(|| Error::Contract("training ran no epochs".into()))?;
        let val_report = last
            .validation
            .as_ref()
            .ok_or_else(|| Error::Contract("training produced no validation report".into()))?;
        let r = row_from(row, variant, &val_report.summary, last.mean_final);
        progress(&r);
        report.rows.push(r);
    }
    Ok(report)
}
