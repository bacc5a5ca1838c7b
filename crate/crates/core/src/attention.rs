//! Cross-level attention.
//!
//! Position attention lets every position of the coarse, high-level feature
//! `F_h` gather the value features of all positions of the fine, low-level
//! feature `F_l`. Channel attention lets every channel of `F_l` gather the
//! (upsampled) channels of `F_h`. Both outputs are residual:
//! `F_h + alpha * attended` and `F_l + beta * attended`, with the scales
//! starting at exactly zero so a fresh module is the identity.
//!
//! The contractions over the attended index (positions of `F_l` for the
//! position map, channels of `F_h` for the channel map) and the softmax
//! denominators sum their terms in sorted order. Permuting `F_l`'s positions
//! or `F_h`'s channels therefore leaves the outputs bit-identical.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Summation, Var};
use crate::params::{Conv2d, ParamId, ParamSet, Session};
use crate::tensor::Tensor;

fn check_pair(g: &Graph, f_h: Var, f_l: Var) -> Result<(Vec<usize>, Vec<usize>)> {
    let (sh, sl) = (g.shape(f_h).to_vec(), g.shape(f_l).to_vec());
    if sh.len() != 4 || sl.len() != 4 || sh[0] != sl[0] {
        return Err(Error::dim(format!(
            "attention expects N×C×H×W features with equal N, got {sh:?} and {sl:?}"
        )));
    }
    if sh[1] != sl[1] {
        return Err(Error::dim(format!(
            "attention: high-level features have {} channels, low-level {}",
            sh[1], sl[1]
        )));
    }
    Ok((sh, sl))
}

/// Position-attention core over already projected features.
///
/// `query` is `N×C×H_h×W_h`, `key` and `value` are `N×C×H_l×W_l`. Returns
/// the residual output and the `N×N_h×N_l` map.
pub fn position_attend(
    g: &mut Graph,
    f_h: Var,
    query: Var,
    key: Var,
    value: Var,
    alpha: Var,
) -> Result<(Var, Var)> {
    let (sh, sl) = check_pair(g, query, key)?;
    let (n, c) = (sh[0], sh[1]);
    let (nh, nl) = (sh[2] * sh[3], sl[2] * sl[3]);
    let q = g.reshape(query, &[n, c, nh])?;
    let k = g.reshape(key, &[n, c, nl])?;
    let v = g.reshape(value, &[n, c, nl])?;
    let qt = g.transpose(q)?;
    let energy = g.matmul(qt, k)?;
    let map = g.softmax_rows(energy)?;
    let map_t = g.transpose(map)?;
    let attended = g.matmul_with(v, map_t, Summation::OrderInvariant)?;
    let attended = g.reshape(attended, &sh)?;
    let scaled = g.scale_by(attended, alpha)?;
    Ok((g.add(scaled, f_h)?, map))
}

/// Channel-attention core. `f_l` must be at least as large as `f_h`
/// spatially. Returns the residual output and the `N×C×C` map.
pub fn channel_attend(g: &mut Graph, f_h: Var, f_l: Var, beta: Var) -> Result<(Var, Var)> {
    let (sh, sl) = check_pair(g, f_h, f_l)?;
    if sl[2] < sh[2] || sl[3] < sh[3] {
        return Err(Error::dim(format!(
            "channel attention: low-level extent {}×{} is smaller than high-level {}×{}",
            sl[2], sl[3], sh[2], sh[3]
        )));
    }
    let (n, c, nl) = (sl[0], sl[1], sl[2] * sl[3]);
    let up = g.bilinear_resize(f_h, sl[2], sl[3])?;
    let high = g.reshape(up, &[n, c, nl])?;
    let low = g.reshape(f_l, &[n, c, nl])?;
    let high_t = g.transpose(high)?;
    let energy = g.matmul(low, high_t)?;
    let map = g.softmax_rows(energy)?;
    let attended = g.matmul_with(map, high, Summation::OrderInvariant)?;
    let attended = g.reshape(attended, &sl)?;
    let scaled = g.scale_by(attended, beta)?;
    Ok((g.add(scaled, f_l)?, map))
}

#[derive(Clone, Debug)]
pub struct PositionAttention {
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    pub alpha: ParamId,
}

impl PositionAttention {
    pub fn new(params: &mut ParamSet, rng: &mut impl Rng, name: &str, channels: usize) -> Result<Self> {
        let mut proj = |branch: &str| Conv2d::new(params, rng, &format!("{name}.{branch}"), channels, channels, 1, 1, true);
        let query = proj("query")?;
        let key = proj("key")?;
        let value = proj("value")?;
        let alpha = params.add(format!("{name}.alpha"), Tensor::scalar(0.0))?;
        Ok(Self {
            query,
            key,
            value,
            alpha,
        })
    }

    pub fn forward(&self, s: &mut Session, f_h: Var, f_l: Var) -> Result<(Var, Var)> {
        check_pair(s.graph, f_h, f_l)?;
        let q = self.query.forward(s, f_h)?;
        let k = self.key.forward(s, f_l)?;
        let v = self.value.forward(s, f_l)?;
        let alpha = s.param(self.alpha);
        position_attend(s.graph, f_h, q, k, v, alpha)
    }
}

#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub beta: ParamId,
}

impl ChannelAttention {
    pub fn new(params: &mut ParamSet, name: &str) -> Result<Self> {
        Ok(Self {
            beta: params.add(format!("{name}.beta"), Tensor::scalar(0.0))?,
        })
    }

    pub fn forward(&self, s: &mut Session, f_h: Var, f_l: Var) -> Result<(Var, Var)> {
        let beta = s.param(self.beta);
        channel_attend(s.graph, f_h, f_l, beta)
    }
}

/// Attention maps produced by one cross-level module (absent when the
/// corresponding branch is disabled).
#[derive(Clone, Debug, Default)]
pub struct AttentionMaps {
    /// `N×N_h×N_l`, rows sum to one.
    pub position: Option<Var>,
    /// `N×C×C`, rows sum to one.
    pub channel: Option<Var>,
}

/// Position and channel attention over the same `(F_h, F_l)` pair, run as
/// parallel branches. A disabled branch passes its input through.
#[derive(Clone, Debug)]
pub struct CrossLevelAttention {
    pub position: Option<PositionAttention>,
    pub channel: Option<ChannelAttention>,
}

pub struct ClaOutput {
    pub high: Var,
    pub low: Var,
    pub maps: AttentionMaps,
}

impl CrossLevelAttention {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        use_position: bool,
        use_channel: bool,
    ) -> Result<Self> {
        let position = if use_position {
            Some(PositionAttention::new(params, rng, &format!("{name}.pos"), channels)?)
        } else {
            None
        };
        let channel = if use_channel {
            Some(ChannelAttention::new(params, &format!("{name}.chan"))?)
        } else {
            None
        };
        Ok(Self { position, channel })
    }

    pub fn forward(&self, s: &mut Session, f_h: Var, f_l: Var) -> Result<ClaOutput> {
        check_pair(s.graph, f_h, f_l)?;
        let mut maps = AttentionMaps::default();
        let high = match &self.position {
            Some(p) => {
                let (out, map) = p.forward(s, f_h, f_l)?;
                maps.position = Some(map);
                out
            }
            None => f_h,
        };
        let low = match &self.channel {
            Some(c) => {
                let (out, map) = c.forward(s, f_h, f_l)?;
                maps.channel = Some(map);
                out
            }
            None => f_l,
        };
        Ok(ClaOutput { high, low, maps })
    }
}
