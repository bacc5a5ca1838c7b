//! The finite-difference suite: every differentiable operation, module and
//! loss, checked on seeded random instances.
//!
//! Non-scalar outputs are reduced by a fixed random projection so every
//! output element carries a distinct weight. An instance where some probe's
//! perturbation carries a ReLU or clamp input across its breakpoint is
//! redrawn, since a central difference across a kink does not estimate the
//! derivative.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::{ChannelAttention, CrossLevelAttention, PositionAttention};
use crate::error::{Error, Result};
use crate::fusion::{FeatureFusion, SaliencyHead};
use crate::gradcheck::{check, Probe, DEFAULT_STEP};
use crate::graph::{Graph, NormMode, Reduce, RunningStats, Var};
use crate::losses::{multi_level_loss, object_fmeasure_loss, pixel_bce, region_ssd, LossConfig, RegionConfig};
use crate::model::{ClassMini, ModelConfig};
use crate::params::{BufferSet, ParamSet, Session};
use crate::rng::{bernoulli, uniform};
use crate::tensor::Tensor;

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 20;
const MAX_REDRAWS: usize = 200;

type Forward = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Instance {
    inputs: Vec<Tensor>,
    probes: Vec<Probe>,
    f: Forward,
}

impl Instance {
    fn all(inputs: Vec<Tensor>, f: Forward) -> Self {
        let probes = vec![Probe::All; inputs.len()];
        Self { inputs, probes, f }
    }
}

/// `sum(out ⊙ weights)` with `weights` drawn once per instance.
fn project(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn weights_for(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -1.0, 1.0)
}

/// Module parameters as check inputs: `(tensors, names)` in [`ParamSet`] order.
fn param_inputs(params: &ParamSet) -> Vec<Tensor> {
    params.iter().map(|(_, t)| Tensor::new(t.shape(), t.data().to_vec()).expect("same shape")).collect()
}

fn set_scales(params: &mut ParamSet, rng: &mut impl Rng) {
    for (name, t) in params.iter_mut() {
        if name.ends_with(".alpha") || name.ends_with(".beta") {
            t.data_mut()[0] = rng.gen_range(0.2..1.0);
        }
    }
}

type Builder = fn(&mut ChaCha8Rng) -> Result<Instance>;

/// Named case of the suite.
pub struct Case {
    pub name: &'static str,
    build: Builder,
}

fn matmul(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let w = weights_for(rng, &[3, 2]);
    Ok(Instance::all(
        vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[4, 2], -1.0, 1.0)],
        Box::new(move |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, &w)
        }),
    ))
}

fn softmax(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let w = weights_for(rng, &[4, 5]);
    Ok(Instance::all(
        vec![uniform(rng, &[4, 5], -3.0, 3.0)],
        Box::new(move |g, v| {
            let y = g.softmax_rows(v[0])?;
            project(g, y, &w)
        }),
    ))
}

fn conv(rng: &mut ChaCha8Rng, x: &[usize], cout: usize, k: usize, stride: usize) -> Result<Instance> {
    let pad = k / 2;
    let out = [x[0], cout, (x[2] + 2 * pad - k) / stride + 1, (x[3] + 2 * pad - k) / stride + 1];
    let w = weights_for(rng, &out);
    Ok(Instance::all(
        vec![
            uniform(rng, x, -1.0, 1.0),
            uniform(rng, &[cout, x[1], k, k], -1.0, 1.0),
            uniform(rng, &[cout], -1.0, 1.0),
        ],
        Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            project(g, y, &w)
        }),
    ))
}

fn conv3(rng: &mut ChaCha8Rng) -> Result<Instance> {
    conv(rng, &[1, 2, 5, 5], 3, 3, 1)
}

fn conv3_stride2(rng: &mut ChaCha8Rng) -> Result<Instance> {
    conv(rng, &[2, 2, 6, 6], 2, 3, 2)
}

fn conv1(rng: &mut ChaCha8Rng) -> Result<Instance> {
    conv(rng, &[1, 3, 4, 4], 2, 1, 1)
}

fn resize(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let up = weights_for(rng, &[1, 2, 5, 7]);
    let down = weights_for(rng, &[1, 2, 2, 3]);
    Ok(Instance::all(
        vec![uniform(rng, &[1, 2, 3, 4], -1.0, 1.0)],
        Box::new(move |g, v| {
            let a = g.bilinear_resize(v[0], 5, 7)?;
            let b = g.bilinear_resize(v[0], 2, 3)?;
            let pa = project(g, a, &up)?;
            let pb = project(g, b, &down)?;
            g.add(pa, pb)
        }),
    ))
}

fn batch_norm(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let w = weights_for(rng, &[2, 3, 4, 4]);
    Ok(Instance::all(
        vec![
            uniform(rng, &[2, 3, 4, 4], -2.0, 2.0),
            uniform(rng, &[3], 0.5, 1.5),
            uniform(rng, &[3], -0.5, 0.5),
        ],
        Box::new(move |g, v| {
            let mut stats = RunningStats::new(3);
            let y = g.batch_norm(v[0], v[1], v[2], &mut stats, NormMode::Train, 1e-5)?;
            project(g, y, &w)
        }),
    ))
}

fn activations(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let w = weights_for(rng, &[2, 3, 4]);
    Ok(Instance::all(
        vec![uniform(rng, &[2, 3, 4], -3.0, 3.0)],
        Box::new(move |g, v| {
            let r = g.relu(v[0]);
            let s = g.sigmoid(v[0]);
            let y = g.add(r, s)?;
            project(g, y, &w)
        }),
    ))
}

fn reductions(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let w = weights_for(rng, &[3, 3, 3]);
    let rows = weights_for(rng, &[3]);
    Ok(Instance::all(
        vec![uniform(rng, &[1, 1, 7, 7], -1.0, 1.0)],
        Box::new(move |g, v| {
            let total = g.sum(v[0])?;
            let mean = g.mean(v[0])?;
            let std = g.reduce(v[0], Reduce::Std)?;
            let flat = g.reshape(v[0], &[7, 7])?;
            let row_std = g.reduce_rows(flat, 7, Reduce::Std)?;
            let row_std = g.reshape(row_std, &[7])?;
            let mut acc = g.add(total, mean)?;
            acc = g.add(acc, std)?;
            let row_w = g.constant(Tensor::from_fn(&[7], |i| rows.data()[i % 3]));
            let rw = g.mul(row_std, row_w)?;
            let rs = g.sum(rw)?;
            acc = g.add(acc, rs)?;
            let windows: Vec<Var> = [Reduce::Sum, Reduce::Mean, Reduce::Std]
                .into_iter()
                .map(|k| g.window_reduce(v[0], 3, 2, k))
                .collect::<Result<_>>()?;
            for (i, win) in windows.into_iter().enumerate() {
                let win = g.reshape(win, &[3, 3])?;
                let plane = Tensor::new(&[3, 3], w.data()[9 * i..9 * (i + 1)].to_vec())?;
                let p = project(g, win, &plane)?;
                acc = g.add(acc, p)?;
            }
            Ok(acc)
        }),
    ))
}

fn shape_ops(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let w = weights_for(rng, &[2, 15]);
    Ok(Instance::all(
        vec![uniform(rng, &[1, 2, 2, 3], -1.0, 1.0), uniform(rng, &[1, 3, 2, 3], -1.0, 1.0)],
        Box::new(move |g, v| {
            let cat = g.concat_channels(&[v[0], v[1]])?;
            let flat = g.reshape(cat, &[5, 6])?;
            let t = g.transpose(flat)?;
            let t = g.reshape(t, &[2, 15])?;
            let sq = g.square(t);
            let y = g.add(t, sq)?;
            project(g, y, &w)
        }),
    ))
}

fn elementwise(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let w = weights_for(rng, &[2, 5]);
    Ok(Instance::all(
        vec![
            uniform(rng, &[2, 5], 0.2, 2.0),
            uniform(rng, &[2, 5], 0.2, 2.0),
            uniform(rng, &[1], 0.5, 1.5),
        ],
        Box::new(move |g, v| {
            let mut terms = vec![
                g.add(v[0], v[1])?,
                g.sub(v[0], v[1])?,
                g.mul(v[0], v[1])?,
                g.div(v[0], v[1])?,
                g.ln(v[0]),
                g.ln_clamped(v[1], 1e-7, 1.0 - 1e-7),
                g.sqrt(v[1]),
                g.clamp(v[0], 0.1, 10.0),
                g.one_minus(v[1]),
                g.scale_by(v[0], v[2])?,
            ];
            let a = g.add_scalar(v[0], 0.5);
            terms.push(g.mul_scalar(a, -1.5));
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = g.add(acc, t)?;
            }
            project(g, acc, &w)
        }),
    ))
}

const MODULE_C: usize = 4;

fn position_attention(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let mut params = ParamSet::new();
    let module = PositionAttention::new(&mut params, rng, "p", MODULE_C)?;
    set_scales(&mut params, rng);
    let w = weights_for(rng, &[1, MODULE_C, 2, 3]);
    let mut inputs = vec![uniform(rng, &[1, MODULE_C, 2, 3], -1.0, 1.0), uniform(rng, &[1, MODULE_C, 4, 4], -1.0, 1.0)];
    inputs.extend(param_inputs(&params));
    Ok(Instance::all(
        inputs,
        Box::new(move |g, v| {
            let mut buffers = BufferSet::default();
            let mut s = Session::new(g, &v[2..], &mut buffers, NormMode::Train, 1e-5);
            let (out, _) = module.forward(&mut s, v[0], v[1])?;
            project(g, out, &w)
        }),
    ))
}

fn channel_attention(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let mut params = ParamSet::new();
    let module = ChannelAttention::new(&mut params, "c")?;
    set_scales(&mut params, rng);
    let w = weights_for(rng, &[2, MODULE_C, 4, 4]);
    let mut inputs = vec![uniform(rng, &[2, MODULE_C, 2, 2], -1.0, 1.0), uniform(rng, &[2, MODULE_C, 4, 4], -1.0, 1.0)];
    inputs.extend(param_inputs(&params));
    Ok(Instance::all(
        inputs,
        Box::new(move |g, v| {
            let mut buffers = BufferSet::default();
            let mut s = Session::new(g, &v[2..], &mut buffers, NormMode::Train, 1e-5);
            let (out, _) = module.forward(&mut s, v[0], v[1])?;
            project(g, out, &w)
        }),
    ))
}

fn cross_level(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let mut params = ParamSet::new();
    let module = CrossLevelAttention::new(&mut params, rng, "cla", MODULE_C, true, true)?;
    set_scales(&mut params, rng);
    let wh = weights_for(rng, &[1, MODULE_C, 2, 2]);
    let wl = weights_for(rng, &[1, MODULE_C, 4, 4]);
    let mut inputs = vec![uniform(rng, &[1, MODULE_C, 2, 2], -1.0, 1.0), uniform(rng, &[1, MODULE_C, 4, 4], -1.0, 1.0)];
    inputs.extend(param_inputs(&params));
    Ok(Instance::all(
        inputs,
        Box::new(move |g, v| {
            let mut buffers = BufferSet::default();
            let mut s = Session::new(g, &v[2..], &mut buffers, NormMode::Train, 1e-5);
            let out = module.forward(&mut s, v[0], v[1])?;
            let a = project(g, out.high, &wh)?;
            let b = project(g, out.low, &wl)?;
            g.add(a, b)
        }),
    ))
}

fn fusion(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let mut params = ParamSet::new();
    let mut buffers = BufferSet::default();
    let module = FeatureFusion::new(&mut params, &mut buffers, rng, "ffm", MODULE_C, false)?;
    let w = weights_for(rng, &[2, MODULE_C, 4, 4]);
    let mut inputs = vec![
        uniform(rng, &[2, MODULE_C, 4, 4], -1.0, 1.0),
        uniform(rng, &[2, MODULE_C, 2, 2], -1.0, 1.0),
        uniform(rng, &[2, MODULE_C, 2, 2], -1.0, 1.0),
    ];
    inputs.extend(param_inputs(&params));
    Ok(Instance::all(
        inputs,
        Box::new(move |g, v| {
            let mut b = buffers.clone();
            let mut s = Session::new(g, &v[3..], &mut b, NormMode::Train, 1e-5);
            let out = module.forward(&mut s, v[0], v[1], v[2])?;
            project(g, out.output, &w)
        }),
    ))
}

fn head(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let mut params = ParamSet::new();
    let module = SaliencyHead::new(&mut params, rng, "head", MODULE_C)?;
    let w = weights_for(rng, &[1, 1, 8, 8]);
    let mut inputs = vec![uniform(rng, &[1, MODULE_C, 2, 2], -1.0, 1.0)];
    inputs.extend(param_inputs(&params));
    Ok(Instance::all(
        inputs,
        Box::new(move |g, v| {
            let mut buffers = BufferSet::default();
            let mut s = Session::new(g, &v[1..], &mut buffers, NormMode::Train, 1e-5);
            let out = module.forward(&mut s, v[0], 8, 8)?;
            project(g, out, &w)
        }),
    ))
}

/// Prediction in `(0.05, 0.95)` and a binary mask with both classes.
fn map_pair(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Tensor, Tensor) {
    let s = uniform(rng, shape, 0.05, 0.95);
    let mut gt = bernoulli(rng, shape, 0.4);
    let n = gt.numel();
    gt.data_mut()[0] = 1.0;
    gt.data_mut()[n - 1] = 0.0;
    (s, gt)
}

fn pixel_loss(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (s, gt) = map_pair(rng, &[2, 1, 4, 4]);
    Ok(Instance {
        inputs: vec![s, gt],
        probes: vec![Probe::All, Probe::Indices(vec![])],
        f: Box::new(|g, v| pixel_bce(g, v[0], v[1])),
    })
}

fn region_loss(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (s, gt) = map_pair(rng, &[1, 1, 8, 8]);
    let cfg = RegionConfig::new(3, 2)?;
    Ok(Instance {
        inputs: vec![s, gt],
        probes: vec![Probe::All, Probe::Indices(vec![])],
        f: Box::new(move |g, v| region_ssd(g, v[0], v[1], &cfg)),
    })
}

fn object_loss(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (s, gt) = map_pair(rng, &[2, 1, 4, 4]);
    Ok(Instance {
        inputs: vec![s, gt],
        probes: vec![Probe::All, Probe::Indices(vec![])],
        f: Box::new(|g, v| Ok(object_fmeasure_loss(g, v[0], v[1], 0.3)?.loss)),
    })
}

fn multi_level(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (first, gt) = map_pair(rng, &[1, 1, 8, 8]);
    let mut inputs = vec![gt, first];
    for _ in 0..3 {
        inputs.push(uniform(rng, &[1, 1, 8, 8], 0.05, 0.95));
    }
    let mut probes = vec![Probe::All; inputs.len()];
    probes[0] = Probe::Indices(vec![]);
    let cfg = LossConfig {
        region: RegionConfig::new(3, 2)?,
        ..LossConfig::default()
    };
    Ok(Instance {
        inputs,
        probes,
        f: Box::new(move |g, v| multi_level_loss(g, &v[1..], v[0], &cfg).map(|(root, _)| root)),
    })
}

fn full_model(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let cfg = ModelConfig {
        base_channels: MODULE_C,
        input_size: (32, 32),
        init_seed: rng.gen(),
        ..ModelConfig::default()
    };
    let mut m = ClassMini::build(cfg)?;
    set_scales(&mut m.params, rng);
    let (x, gt) = (uniform(rng, &[1, 3, 32, 32], 0.0, 1.0), ellipse_mask(rng, 32));
    let mut inputs = vec![x, gt];
    let mut probes = vec![Probe::Indices(vec![0, 1000, 2000]), Probe::Indices(vec![])];
    for (_, t) in m.params.iter() {
        let n = t.numel();
        probes.push(Probe::Indices(if n <= 2 { (0..n).collect() } else { (0..2).map(|_| rng.gen_range(0..n)).collect() }));
    }
    inputs.extend(param_inputs(&m.params));
    let loss = LossConfig {
        region: RegionConfig::default().scaled(32),
        ..LossConfig::default()
    };
    let (net, buffers, eps) = (m.net, m.buffers, m.config.norm_epsilon);
    Ok(Instance {
        inputs,
        probes,
        f: Box::new(move |g, v| {
            let mut b = buffers.clone();
            let mut s = Session::new(g, &v[2..], &mut b, NormMode::Train, eps);
            let out = net.forward(&mut s, v[0], false)?;
            multi_level_loss(g, &out.predictions, v[1], &loss).map(|(root, _)| root)
        }),
    })
}

/// Filled ellipse with random centre and radii.
fn ellipse_mask(rng: &mut impl Rng, side: usize) -> Tensor {
    let s = side as f64;
    let (cx, cy) = (rng.gen_range(0.3 * s..0.7 * s), rng.gen_range(0.3 * s..0.7 * s));
    let (rx, ry) = (rng.gen_range(0.15 * s..0.35 * s), rng.gen_range(0.15 * s..0.35 * s));
    Tensor::from_fn(&[1, 1, side, side], |i| {
        let (x, y) = ((i % side) as f64 + 0.5, (i / side) as f64 + 0.5);
        let d = ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2);
        if d <= 1.0 {
            1.0
        } else {
            0.0
        }
    })
}

pub const CASES: &[Case] = &[
    Case { name: "matmul", build: matmul },
    Case { name: "softmax_rows", build: softmax },
    Case { name: "conv2d 3x3", build: conv3 },
    Case { name: "conv2d 3x3 stride 2", build: conv3_stride2 },
    Case { name: "conv2d 1x1", build: conv1 },
    Case { name: "bilinear_resize", build: resize },
    Case { name: "batch_norm (train)", build: batch_norm },
    Case { name: "relu + sigmoid", build: activations },
    Case { name: "reductions sum/mean/std", build: reductions },
    Case { name: "reshape/transpose/concat", build: shape_ops },
    Case { name: "elementwise", build: elementwise },
    Case { name: "position attention + alpha", build: position_attention },
    Case { name: "channel attention + beta", build: channel_attention },
    Case { name: "cross-level attention", build: cross_level },
    Case { name: "feature fusion module", build: fusion },
    Case { name: "saliency head", build: head },
    Case { name: "pixel loss (BCE)", build: pixel_loss },
    Case { name: "region loss (SSD)", build: region_loss },
    Case { name: "object loss (soft F)", build: object_loss },
    Case { name: "multi-level loss", build: multi_level },
    Case { name: "full model", build: full_model },
];

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteRow {
    pub name: &'static str,
    pub instances: usize,
    /// Draws rejected because a perturbation crossed a kink.
    pub redraws: usize,
    pub max_rel_err: f64,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub rows: Vec<SuiteRow>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(SuiteRow::passed)
    }

    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let mut out = format!("{:width$}  {:>9}  {:>7}  {:>12}  result\n", "case", "instances", "redraws", "max rel err");
        for r in &self.rows {
            out += &format!(
                "{:width$}  {:>9}  {:>7}  {:>12.3e}  {}\n",
                r.name,
                r.instances,
                r.redraws,
                r.max_rel_err,
                if r.passed() { "pass" } else { "FAIL" }
            );
        }
        out
    }
}

fn run_case(index: usize, case: &Case, seed: u64, instances: usize) -> Result<SuiteRow> {
    let mut row = SuiteRow {
        name: case.name,
        instances,
        redraws: 0,
        max_rel_err: 0.0,
    };
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((index as u64) << 32) | i as u64);
        let mut tries = 0;
        let report = loop {
            let inst = (case.build)(&mut rng)?;
            let report = check(&inst.inputs, &inst.probes, DEFAULT_STEP, |g, v| (inst.f)(g, v))?;
            if report.crossings() == 0 {
                break report;
            }
            tries += 1;
            if tries >= MAX_REDRAWS {
                return Err(Error::Contract(format!(
                    "{}: every instance crossed a kink in {MAX_REDRAWS} draws",
                    case.name
                )));
            }
        };
        row.redraws += tries;
        row.max_rel_err = row.max_rel_err.max(report.max_rel_err());
    }
    Ok(row)
}

/// Runs the cases whose names contain `filter` (all when `None`).
pub fn run_suite(seed: u64, instances: usize, filter: Option<&str>) -> Result<SuiteReport> {
    let start = Instant::now();
    let selected: Vec<(usize, &Case)> = CASES
        .iter()
        .enumerate()
        .filter(|(_, c)| filter.map_or(true, |f| c.name.contains(f)))
        .collect();
    if selected.is_empty() {
        return Err(Error::Config(format!("no gradient-check case matches {:?}", filter.unwrap_or(""))));
    }
    let rows = selected
        .par_iter()
        .map(|&(i, c)| run_case(i, c, seed, instances))
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport {
        rows,
        seconds: start.elapsed().as_secs_f64(),
    })
}
