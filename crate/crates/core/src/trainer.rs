//! Optimization: SGD with momentum and decoupled-by-name weight decay, a
//! warm-up then linear-decay schedule, flip and multi-scale augmentation,
//! and a deterministic epoch loop with validation.
//!
//! Randomness is keyed by position rather than drawn from one running
//! stream: the batch order of epoch `e` comes from stream `(seed, e)` and the
//! augmentation of step `t` from stream `(seed, t)`. A run resumed from a
//! checkpoint at any step therefore continues exactly as the original.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::SaliencySample;
use crate::error::{Error, Result};
use crate::graph::{Graph, NormMode};
use crate::losses::{multi_level_loss, LossBreakdown, LossConfig, LossTerms, RegionConfig, DEFAULT_BETA_SQ};
use crate::metrics::{evaluate_dataset, DatasetReport};
use crate::model::{ClassMini, STRIDE};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Parameter-name suffixes exempt from weight decay: attention scales,
/// batch-norm affine terms and convolution biases.
pub const DECAY_EXEMPT: [&str; 5] = [".alpha", ".beta", ".gamma", ".shift", ".bias"];

const SHUFFLE_STREAM: u64 = 1 << 32;
const AUGMENT_STREAM: u64 = 2 << 32;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate of the encoder.
    pub lr_max_backbone: f64,
    /// Peak learning rate of every other parameter.
    pub lr_max_rest: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Region-loss window at the 64-pixel reference side; rescaled to each
    /// batch's extent.
    pub region: RegionConfig,
    pub beta_sq: f64,
    pub terms: LossTerms,
    /// Supervise every head (weighted by level) rather than the final one.
    pub multi_stage: bool,
    pub scales: Vec<f64>,
    pub flip_probability: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr_max_backbone: 0.005,
            lr_max_rest: 0.05,
            momentum: 0.9,
            weight_decay: 0.0005,
            warmup_fraction: 0.1,
            seed: 0,
            region: RegionConfig::default(),
            beta_sq: DEFAULT_BETA_SQ,
            terms: LossTerms::default(),
            multi_stage: true,
            scales: vec![0.75, 1.0, 1.25],
            flip_probability: 0.5,
        }
    }
}

/// Extent of `side` under `scale` when it is a whole multiple of the model
/// stride.
pub fn scaled_extent(side: usize, scale: f64) -> Option<usize> {
    let v = side as f64 * scale;
    let r = v.round();
    ((v - r).abs() < 1e-9 && r >= STRIDE as f64 && r as usize % STRIDE == 0).then_some(r as usize)
}

impl TrainConfig {
    pub fn validate(&self, input: (usize, usize)) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (k, v) in [("lr_max_backbone", self.lr_max_backbone), ("lr_max_rest", self.lr_max_rest)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{k} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad(format!("warmup_fraction must be in (0, 1), got {}", self.warmup_fraction));
        }
        if !(self.beta_sq > 0.0) {
            return bad(format!("beta_sq must be positive, got {}", self.beta_sq));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return bad(format!("flip_probability must be in [0, 1], got {}", self.flip_probability));
        }
        if self.scales.is_empty() {
            return bad("scales must list at least one scale".into());
        }
        for &s in &self.scales {
            if scaled_extent(input.0, s).is_none() || scaled_extent(input.1, s).is_none() {
                return bad(format!(
                    "scale {s} maps {}x{} to extents that are not multiples of {STRIDE}",
                    input.0, input.1
                ));
            }
        }
        if !(self.terms.pixel || self.terms.region || self.terms.object) {
            return bad("at least one loss term must be enabled".into());
        }
        Ok(())
    }

    /// Length of the warm-up in steps: the rounded fraction, at least one
    /// step and leaving at least one decay step.
    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        let w = (self.warmup_fraction * total_steps as f64).round() as usize;
        w.max(1).min(total_steps.saturating_sub(1))
    }

    pub fn loss_config(&self, side: usize) -> LossConfig {
        LossConfig {
            region: self.region.scaled(side),
            beta_sq: self.beta_sq,
            terms: self.terms,
        }
    }

    /// `key=value` pairs describing the optimization recipe.
    pub fn echo(&self) -> Vec<(String, String)> {
        let scales: Vec<String> = self.scales.iter().map(f64::to_string).collect();
        vec![
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("lr_max_backbone".into(), self.lr_max_backbone.to_string()),
            ("lr_max_rest".into(), self.lr_max_rest.to_string()),
            ("momentum".into(), self.momentum.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("warmup_fraction".into(), self.warmup_fraction.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("region_window".into(), self.region.window.to_string()),
            ("region_stride".into(), self.region.stride.to_string()),
            ("beta_sq".into(), self.beta_sq.to_string()),
            ("loss_pixel".into(), self.terms.pixel.to_string()),
            ("loss_region".into(), self.terms.region.to_string()),
            ("loss_object".into(), self.terms.object.to_string()),
            ("multi_stage".into(), self.multi_stage.to_string()),
            ("scales".into(), scales.join(",")),
            ("flip_probability".into(), self.flip_probability.to_string()),
        ]
    }
}

/// Learning rates `(backbone, rest)` at `step`: a linear ramp from zero to
/// the peak over the warm-up, then a linear decay reaching zero at
/// `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<(f64, f64)> {
    if step >= total_steps {
        return Err(Error::Contract(format!("step {step} outside schedule of {total_steps} steps")));
    }
    let warm = cfg.warmup_steps(total_steps);
    let f = if step < warm {
        step as f64 / warm as f64
    } else {
        (total_steps - step) as f64 / (total_steps - warm) as f64
    };
    Ok((cfg.lr_max_backbone * f, cfg.lr_max_rest * f))
}

pub fn decay_exempt(name: &str) -> bool {
    DECAY_EXEMPT.iter().any(|s| name.ends_with(s))
}

/// Momentum buffers, one per parameter in [`ParamSet`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Velocity(Vec<Vec<f64>>);

impl Velocity {
    pub fn zeros(params: &ParamSet) -> Self {
        Self(params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect())
    }

    pub fn from_values(values: Vec<Vec<f64>>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.0
    }
}

/// `v ← m·v + g + wd·p`, `p ← p − lr·v`, with the backbone rate for encoder
/// parameters and no decay for exempt names.
pub fn sgd_step(
    params: &mut ParamSet,
    velocity: &mut Velocity,
    lr: (f64, f64),
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if velocity.0.len() != params.len() {
        return Err(Error::Contract(format!(
            "velocity has {} entries for {} parameters",
            velocity.0.len(),
            params.len()
        )));
    }
    for ((name, t), v) in params.iter_mut().zip(&mut velocity.0) {
        let g = t
            .grad()
            .ok_or_else(|| Error::Contract(format!("parameter {name} has no gradient")))?
            .to_vec();
        if v.len() != g.len() {
            return Err(Error::Contract(format!("velocity for {name} has the wrong length")));
        }
        let wd = if decay_exempt(name) { 0.0 } else { weight_decay };
        let rate = if ClassMini::is_backbone(name) { lr.0 } else { lr.1 };
        for ((p, v), g) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
            *v = momentum * *v + g + wd * *p;
            *p -= rate * *v;
        }
    }
    Ok(())
}

/// Flips and resizes an image/mask pair: bilinear for the image, nearest for
/// the mask so it stays binary.
pub fn augment_with(image: &Tensor, mask: &Tensor, flip: bool, extent: (usize, usize)) -> Result<(Tensor, Tensor)> {
    let (mut i, mut m) = if flip {
        (image.flip_horizontal(), mask.flip_horizontal())
    } else {
        (image.clone(), mask.clone())
    };
    let s = i.shape();
    if (s[s.len() - 2], s[s.len() - 1]) != extent {
        i = i.resize_bilinear(extent.0, extent.1)?;
        m = m.resize_nearest(extent.0, extent.1)?;
    }
    Ok((i, m))
}

/// One random flip (probability `flip_probability`) and one scale drawn
/// uniformly from `scales`.
pub fn augment(sample: &SaliencySample, rng: &mut impl Rng, cfg: &TrainConfig) -> Result<SaliencySample> {
    let s = sample.image.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let scale = cfg.scales[rng.gen_range(0..cfg.scales.len())];
    let flip = rng.gen_bool(cfg.flip_probability);
    let extent = (
        scaled_extent(h, scale).unwrap_or(h),
        scaled_extent(w, scale).unwrap_or(w),
    );
    let (image, mask) = augment_with(&sample.image, &sample.mask, flip, extent)?;
    Ok(SaliencySample {
        image,
        mask,
        ..sample.clone()
    })
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    /// Index of the batch within its epoch.
    pub batch: usize,
    pub lr_backbone: f64,
    pub lr_rest: f64,
    /// Spatial side the batch was trained at.
    pub side: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean `L_Final` over the epoch's steps.
    pub mean_final: f64,
    pub validation: Option<DatasetReport>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn step_csv_header(levels: usize) -> String {
        let mut h = String::from("step,epoch,batch,lr_backbone,lr_rest,side,pixel,region,object,total,final");
        for l in 1..=levels {
            h += &format!(",l{l}_pixel,l{l}_region,l{l}_object,l{l}_total");
        }
        h
    }

    pub fn step_csv_row(r: &StepRecord) -> String {
        let b = &r.loss;
        let mut row = format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.step, r.epoch, r.batch, r.lr_backbone, r.lr_rest, r.side, b.pixel, b.region, b.object, b.total, b.final_loss
        );
        for l in &b.per_level {
            row += &format!(",{},{},{},{}", l.pixel, l.region, l.object, l.total);
        }
        row
    }

    /// Per-step losses; values print in shortest round-trip form so the
    /// file reproduces them exactly.
    pub fn steps_csv(&self) -> String {
        let levels = self.steps.first().map_or(0, |r| r.loss.per_level.len());
        let mut out = Self::step_csv_header(levels) + "\n";
        for r in &self.steps {
            out += &Self::step_csv_row(r);
            out.push('\n');
        }
        out
    }

    pub const EPOCH_CSV_HEADER: &'static str = "epoch,mean_final,val_f_max,val_f_mean,val_mae,val_s_measure";

    pub fn epoch_csv_row(r: &EpochRecord) -> String {
        match &r.validation {
            Some(v) => {
                let s = &v.summary;
                format!("{},{},{},{},{},{}", r.epoch, r.mean_final, s.f_max, s.f_mean, s.mae, s.s_measure)
            }
            None => format!("{},{},,,,", r.epoch, r.mean_final),
        }
    }

    pub fn epochs_csv(&self) -> String {
        let mut out = format!("{}\n", Self::EPOCH_CSV_HEADER);
        for r in &self.epochs {
            out += &Self::epoch_csv_row(r);
            out.push('\n');
        }
        out
    }
}

/// Stacks `items` into `N×C×H×W`.
fn batch_of(items: &[&Tensor]) -> Result<Tensor> {
    Tensor::stack(&items.iter().map(|t| (*t).clone()).collect::<Vec<_>>())
}

/// Runs the final head over `images` (each `3×H×W`) in eval mode, `batch`
/// at a time. Images in one batch must share an extent.
pub fn predict_images(model: &mut ClassMini, images: &[&Tensor], batch: usize) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let mut g = Graph::new();
        let x = g.constant(batch_of(chunk)?);
        let (_, o) = model.run(&mut g, x, NormMode::Eval)?;
        let p = g.value(o.predictions[0]);
        for n in 0..chunk.len() {
            let s = p.sample(n)?;
            let shape = s.shape()[1..].to_vec();
            out.push(s.reshape(&shape)?);
        }
    }
    Ok(out)
}

/// Final-head predictions for `samples`, each `1×H×W`.
pub fn predict(model: &mut ClassMini, samples: &[SaliencySample], batch: usize) -> Result<Vec<Tensor>> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    predict_images(model, &images, batch)
}

/// Final-head metrics over `samples`.
pub fn validate(model: &mut ClassMini, samples: &[SaliencySample], batch: usize) -> Result<DatasetReport> {
    let preds = predict(model, samples, batch)?;
    let pairs: Vec<(&str, Tensor, Tensor)> = samples
        .iter()
        .zip(preds)
        .map(|(s, p)| (s.id.as_str(), p, s.mask.clone()))
        .collect();
    evaluate_dataset(&pairs)
}

/// Training state and schedule. Drive it with [`Trainer::run_epoch`] or
/// [`Trainer::run`].
pub struct Trainer<'a> {
    pub model: ClassMini,
    pub velocity: Velocity,
    /// Steps completed so far.
    pub step: usize,
    pub log: TrainLog,
    cfg: TrainConfig,
    train: &'a [SaliencySample],
    val: &'a [SaliencySample],
}

impl<'a> Trainer<'a> {
    pub fn new(model: ClassMini, train: &'a [SaliencySample], val: &'a [SaliencySample], cfg: TrainConfig) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        cfg.validate(model.config.input_size)?;
        let extent = model.config.input_size;
        for s in train.iter().chain(val) {
            let sh = s.image.shape();
            if (sh[sh.len() - 2], sh[sh.len() - 1]) != extent {
                return Err(Error::Sample {
                    id: s.id.clone(),
                    source: Box::new(Error::dim(format!(
                        "image {sh:?} does not match model input {}x{}",
                        extent.0, extent.1
                    ))),
                });
            }
        }
        let velocity = Velocity::zeros(&model.params);
        Ok(Self {
            model,
            velocity,
            step: 0,
            log: TrainLog::default(),
            cfg,
            train,
            val,
        })
    }

    /// Continues from a checkpoint taken by a run with the same configuration.
    pub fn resume(mut self, ckpt: &Checkpoint) -> Result<Self> {
        ckpt.restore(&mut self.model)?;
        self.velocity = ckpt
            .velocity(&self.model)?
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state to resume from".into()))?;
        let step = ckpt.step as usize;
        if step > self.total_steps() {
            return Err(Error::Checkpoint(format!(
                "checkpoint step {step} is beyond the {} step schedule",
                self.total_steps()
            )));
        }
        self.step = step;
        Ok(self)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.cfg.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.cfg.epochs
    }

    pub fn finished(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, Some(&self.velocity), self.step as u64)
    }

    fn order(&self, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.train.len()).collect();
        idx.shuffle(&mut stream(self.cfg.seed, SHUFFLE_STREAM | epoch as u64));
        idx
    }

    fn train_step(&mut self, epoch: usize, batch: usize, ids: &[usize]) -> Result<StepRecord> {
        let step = self.step;
        let mut rng = stream(self.cfg.seed, AUGMENT_STREAM | step as u64);
        let (h, w) = self.model.config.input_size;
        let scale = self.cfg.scales[rng.gen_range(0..self.cfg.scales.len())];
        let extent = (
            scaled_extent(h, scale).expect("validated scale"),
            scaled_extent(w, scale).expect("validated scale"),
        );
        let mut images = Vec::with_capacity(ids.len());
        let mut masks = Vec::with_capacity(ids.len());
        for &i in ids {
            let s = &self.train[i];
            let flip = rng.gen_bool(self.cfg.flip_probability);
            let (im, m) = augment_with(&s.image, &s.mask, flip, extent)?;
            images.push(im);
            masks.push(m);
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::stack(&images)?);
        let gt = g.constant(Tensor::stack(&masks)?);
        let (vars, out) = self.model.run(&mut g, x, NormMode::Train)?;
        let loss_cfg = self.cfg.loss_config(extent.0.min(extent.1));
        let heads = if self.cfg.multi_stage { &out.predictions[..] } else { &out.predictions[..1] };
        let (root, loss) = multi_level_loss(&mut g, heads, gt, &loss_cfg)?;
        if !loss.final_loss.is_finite() {
            let ids: Vec<&str> = ids.iter().map(|&i| self.train[i].id.as_str()).collect();
            return Err(Error::Divergence {
                step,
                batch,
                detail: format!("samples [{}], losses {:?}", ids.join(", "), loss),
            });
        }
        g.backward(root)?;
        self.model.params.zero_grads();
        self.model.params.absorb_grads(&g, &vars)?;
        let (lr_b, lr_r) = lr_at(step, self.total_steps(), &self.cfg)?;
        sgd_step(&mut self.model.params, &mut self.velocity, (lr_b, lr_r), self.cfg.momentum, self.cfg.weight_decay)?;
        self.step += 1;
        Ok(StepRecord {
            step,
            epoch,
            batch,
            lr_backbone: lr_b,
            lr_rest: lr_r,
            side: extent.0,
            loss,
        })
    }

    /// Trains through the end of the current epoch and validates. Returns
    /// `None` once the schedule is complete.
    pub fn run_epoch(&mut self) -> Result<Option<EpochRecord>> {
        if self.finished() {
            return Ok(None);
        }
        let per = self.steps_per_epoch();
        let epoch = self.step / per;
        let order = self.order(epoch);
        let mut finals = Vec::new();
        for batch in self.step % per..per {
            let lo = batch * self.cfg.batch_size;
            let hi = (lo + self.cfg.batch_size).min(order.len());
            let rec = self.train_step(epoch, batch, &order[lo..hi])?;
            finals.push(rec.loss.final_loss);
            self.log.steps.push(rec);
        }
        let validation = if self.val.is_empty() {
            None
        } else {
            Some(validate(&mut self.model, self.val, self.cfg.batch_size)?)
        };
        let rec = EpochRecord {
            epoch,
            mean_final: finals.iter().sum::<f64>() / finals.len() as f64,
            validation,
        };
        self.log.epochs.push(rec.clone());
        Ok(Some(rec))
    }

    pub fn run(mut self) -> Result<(ClassMini, TrainLog)> {
        while self.run_epoch()?.is_some() {}
        Ok((self.model, self.log))
    }
}

/// Trains `model` for the whole schedule and returns it with its log.
pub fn train_loop(
    model: ClassMini,
    train: &[SaliencySample],
    val: &[SaliencySample],
    cfg: &TrainConfig,
) -> Result<(ClassMini, TrainLog)> {
    Trainer::new(model, train, val, cfg.clone())?.run()
}
