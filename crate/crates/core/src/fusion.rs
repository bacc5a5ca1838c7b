//! Decoder stages and saliency heads.
//!
//! A fusion stage brings the attention-refined high-level feature and the
//! previous decoder output up to the low-level resolution, concatenates the
//! three, compresses back to `C` channels, refines with two 3×3 blocks, and
//! gates the result with a `C`-channel sigmoid weight map.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{BufferSet, Conv2d, ConvBnRelu, ParamSet, Session};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionKind {
    /// Concatenate, compress, refine, gate.
    Gated,
    /// Elementwise sum followed by one 3×3 block (the ablation baseline).
    Sum,
}

#[derive(Clone, Debug)]
pub struct FeatureFusion {
    pub compress: ConvBnRelu,
    pub refine: [ConvBnRelu; 2],
    pub gate: Conv2d,
    /// Adds the refined feature back after gating (`refined * (1 + w)`).
    pub residual: bool,
}

impl FeatureFusion {
    pub fn new(
        params: &mut ParamSet,
        buffers: &mut BufferSet,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        residual: bool,
    ) -> Result<Self> {
        let compress = ConvBnRelu::new(params, buffers, rng, &format!("{name}.compress"), 3 * channels, channels, 1, 1)?;
        let refine = [
            ConvBnRelu::new(params, buffers, rng, &format!("{name}.refine1"), channels, channels, 3, 1)?,
            ConvBnRelu::new(params, buffers, rng, &format!("{name}.refine2"), channels, channels, 3, 1)?,
        ];
        let gate = Conv2d::new(params, rng, &format!("{name}.gate"), channels, channels, 1, 1, true)?;
        Ok(Self {
            compress,
            refine,
            gate,
            residual,
        })
    }

    pub fn forward(&self, s: &mut Session, low: Var, high: Var, previous: Var) -> Result<FusionOutput> {
        let (h, w) = check_stage(s, low, high, previous)?;
        let high_up = s.graph.bilinear_resize(high, h, w)?;
        let prev_up = s.graph.bilinear_resize(previous, h, w)?;
        let cat = s.graph.concat_channels(&[low, high_up, prev_up])?;
        let mut y = self.compress.forward(s, cat)?;
        for block in &self.refine {
            y = block.forward(s, y)?;
        }
        let logits = self.gate.forward(s, y)?;
        let weight = s.graph.sigmoid(logits);
        let gated = s.graph.mul(y, weight)?;
        let output = if self.residual { s.graph.add(gated, y)? } else { gated };
        Ok(FusionOutput {
            output,
            weight,
            refined: y,
        })
    }
}

pub struct FusionOutput {
    /// `D_i`, same shape as the low-level input.
    pub output: Var,
    /// Sigmoid gate, values in (0, 1).
    pub weight: Var,
    /// Feature before gating.
    pub refined: Var,
}

fn check_stage(s: &Session, low: Var, high: Var, previous: Var) -> Result<(usize, usize)> {
    let sl = s.graph.shape(low).to_vec();
    let sh = s.graph.shape(high);
    let sp = s.graph.shape(previous);
    if sl.len() != 4 || sh.len() != 4 || sp.len() != 4 {
        return Err(Error::dim("fusion expects N×C×H×W features"));
    }
    if sh[1] != sl[1] || sp[1] != sl[1] || sh[0] != sl[0] || sp[0] != sl[0] {
        return Err(Error::dim(format!(
            "fusion: features {sl:?}, {sh:?}, {sp:?} disagree on batch or channels"
        )));
    }
    if sp[2] != sl[2].div_ceil(2) || sp[3] != sl[3].div_ceil(2) {
        return Err(Error::dim(format!(
            "fusion: previous stage {}×{} is not half of {}×{}",
            sp[2], sp[3], sl[2], sl[3]
        )));
    }
    Ok((sl[2], sl[3]))
}

#[derive(Clone, Debug)]
pub struct SumFusion {
    pub refine: ConvBnRelu,
}

impl SumFusion {
    pub fn new(params: &mut ParamSet, buffers: &mut BufferSet, rng: &mut impl Rng, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            refine: ConvBnRelu::new(params, buffers, rng, &format!("{name}.refine"), channels, channels, 3, 1)?,
        })
    }

    pub fn forward(&self, s: &mut Session, low: Var, high: Var, previous: Var) -> Result<Var> {
        let (h, w) = check_stage(s, low, high, previous)?;
        let high_up = s.graph.bilinear_resize(high, h, w)?;
        let prev_up = s.graph.bilinear_resize(previous, h, w)?;
        let sum = s.graph.add(low, high_up)?;
        let sum = s.graph.add(sum, prev_up)?;
        self.refine.forward(s, sum)
    }
}

/// Either kind of decoder stage.
#[derive(Clone, Debug)]
pub enum DecoderStage {
    Gated(FeatureFusion),
    Sum(SumFusion),
}

impl DecoderStage {
    pub fn forward(&self, s: &mut Session, low: Var, high: Var, previous: Var) -> Result<Var> {
        match self {
            DecoderStage::Gated(f) => f.forward(s, low, high, previous).map(|o| o.output),
            DecoderStage::Sum(f) => f.forward(s, low, high, previous),
        }
    }
}

/// 1×1 projection to one channel, bilinear resize, sigmoid.
#[derive(Clone, Debug)]
pub struct SaliencyHead {
    pub predict: Conv2d,
}

impl SaliencyHead {
    pub fn new(params: &mut ParamSet, rng: &mut impl Rng, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            predict: Conv2d::new(params, rng, &format!("{name}.predict"), channels, 1, 1, 1, true)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var, target_h: usize, target_w: usize) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 4 || target_h < shape[2] || target_w < shape[3] {
            return Err(Error::dim(format!(
                "head: cannot map {shape:?} to a {target_h}×{target_w} prediction"
            )));
        }
        let logits = self.predict.forward(s, x)?;
        let logits = s.graph.bilinear_resize(logits, target_h, target_w)?;
        Ok(s.graph.sigmoid(logits))
    }
}
