//! Central finite-difference verification of analytic gradients.
//!
//! The error measure for one input tensor is the max-norm relative error
//! `max|a - n| / max(max|a|, max|n|, floor)` between the analytic gradient
//! `a` and the numeric estimate `n`. The floor is `1e-3` times the largest
//! gradient entry over all probed inputs (and at least `1e-6`). Without it,
//! an input whose gradient vanishes analytically (a bias feeding batch norm,
//! say) would turn the roundoff of the difference quotient, about
//! `eps * |f| / h`, into a large relative error.
//!
//! A central difference only estimates the derivative when `x - h`, `x` and
//! `x + h` sit on the same smooth branch. Each probe compares the ReLU and
//! clamp pattern of its perturbed evaluations with the unperturbed one and
//! counts a crossing when they differ; callers redraw such instances.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Minimum distance from a breakpoint a checked instance should keep, in
/// units of the step, so perturbations never flip an activation pattern.
pub const KINK_RATIO: f64 = 100.0;
/// Smallest gradient scale used as the denominator of the relative error.
pub const SCALE_FLOOR: f64 = 1e-6;
/// Share of the instance's largest gradient entry below which an input's own
/// gradient scale is not trusted as a denominator.
pub const INSTANCE_FLOOR: f64 = 1e-3;

/// Which elements of an input get perturbed.
#[derive(Clone, Debug)]
pub enum Probe {
    All,
    /// Only the listed flat indices.
    Indices(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct InputCheck {
    pub index: usize,
    pub probed: usize,
    pub max_abs_err: f64,
    pub rel_err: f64,
    /// Probes whose perturbation moved some input across a breakpoint.
    pub crossings: usize,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub inputs: Vec<InputCheck>,
}

impl CheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn crossings(&self) -> usize {
        self.inputs.iter().map(|c| c.crossings).sum()
    }
}

fn max_abs(values: &[f64]) -> f64 {
    values.iter().map(|v| v.abs()).fold(0.0, f64::max)
}

/// Max-norm relative error with the denominator floored at `floor`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let scale = max_abs(analytic).max(max_abs(numeric)).max(floor);
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    diff / scale
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences with step `h`.
pub fn check<F>(inputs: &[Tensor], probes: &[Probe], h: f64, f: F) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if probes.len() != inputs.len() {
        return Err(Error::Contract(format!(
            "{} probes given for {} inputs",
            probes.len(),
            inputs.len()
        )));
    }
    let eval = |values: &[Tensor]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g.value(out).item()?, g.kink_pattern()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let pattern = g.kink_pattern();

    let mut gathered = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, (var, probe)) in vars.iter().zip(probes).enumerate() {
        let zeros = vec![0.0; inputs[i].numel()];
        let full = g.grad(*var).unwrap_or(&zeros);
        let indices: Vec<usize> = match probe {
            Probe::All => (0..inputs[i].numel()).collect(),
            Probe::Indices(ix) => ix.clone(),
        };
        let mut analytic = Vec::with_capacity(indices.len());
        let mut numeric = Vec::with_capacity(indices.len());
        let mut crossings = 0;
        for &k in &indices {
            let original = inputs[i].data()[k];
            work[i].data_mut()[k] = original + h;
            let (plus, p_plus) = eval(&work)?;
            work[i].data_mut()[k] = original - h;
            let (minus, p_minus) = eval(&work)?;
            work[i].data_mut()[k] = original;
            crossings += usize::from(p_plus != pattern || p_minus != pattern);
            analytic.push(full[k]);
            numeric.push((plus - minus) / (2.0 * h));
        }
        gathered.push((indices.len(), analytic, numeric, crossings));
    }
    let largest = gathered
        .iter()
        .map(|(_, a, n, _)| max_abs(a).max(max_abs(n)))
        .fold(0.0, f64::max);
    let floor = (INSTANCE_FLOOR * largest).max(SCALE_FLOOR);
    let report = gathered
        .into_iter()
        .enumerate()
        .map(|(index, (probed, analytic, numeric, crossings))| InputCheck {
            index,
            probed,
            max_abs_err: analytic
                .iter()
                .zip(&numeric)
                .map(|(a, n)| (a - n).abs())
                .fold(0.0, f64::max),
            rel_err: relative_error(&analytic, &numeric, floor),
            crossings,
        })
        .collect();
    Ok(CheckReport { inputs: report })
}

/// Same as [`check`] with every element probed.
pub fn check_all<F>(inputs: &[Tensor], f: F) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let probes = vec![Probe::All; inputs.len()];
    check(inputs, &probes, DEFAULT_STEP, f)
}
