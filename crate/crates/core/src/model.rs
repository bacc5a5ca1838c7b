//! CLASS-mini: a four-level convolutional encoder, a two-convolution bridge,
//! three cross-level attention modules, three decoder stages and four
//! saliency heads.
//!
//! Extents for an `H×W` input: `F_2` is `H/2`, `F_3` is `H/4`, `F_4` is `H/8`,
//! `F_5` and the bridge output `F_h` are `H/16`. Encoder widths are
//! `C, 2C, 2C, 4C`; 1×1 laterals bring `F_3` and `F_4` to `C` channels and the
//! bridge brings `F_5` to `C`.

use rand::Rng;

use crate::attention::{AttentionMaps, CrossLevelAttention};
use crate::error::{Error, Result};
use crate::fusion::{DecoderStage, FeatureFusion, FusionKind, SaliencyHead, SumFusion};
use crate::graph::{Graph, NormMode, Var};
use crate::params::{BufferSet, ConvBnRelu, ParamSet, Session};
use crate::rng::seeded;
use crate::tensor::Tensor;

/// Total downsampling between the input and the bridge.
pub const STRIDE: usize = 16;
pub const HEADS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub input_size: (usize, usize),
    pub norm_epsilon: f64,
    pub init_seed: u64,
    pub use_position: bool,
    pub use_channel: bool,
    pub fusion: FusionKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            input_size: (64, 64),
            norm_epsilon: 1e-5,
            init_seed: 0,
            use_position: true,
            use_channel: true,
            fusion: FusionKind::Gated,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.base_channels;
        if c < 4 || c % 2 != 0 {
            return Err(Error::Config(format!("base_channels must be even and >= 4, got {c}")));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % STRIDE != 0 || w % STRIDE != 0 {
            return Err(Error::Config(format!(
                "input_size {h}x{w} must be positive and divisible by {STRIDE}"
            )));
        }
        if !(self.norm_epsilon > 0.0) {
            return Err(Error::Config(format!("norm_epsilon must be positive, got {}", self.norm_epsilon)));
        }
        Ok(())
    }

    /// Channel widths of encoder levels 2 to 5.
    pub fn encoder_widths(&self) -> [usize; 4] {
        let c = self.base_channels;
        [c, 2 * c, 2 * c, 4 * c]
    }

    /// `key=value` pairs identifying the architecture; checkpoints store them
    /// and refuse to load into a different configuration.
    pub fn echo(&self) -> Vec<(String, String)> {
        let fusion = match self.fusion {
            FusionKind::Gated => "ffm",
            FusionKind::Sum => "sum",
        };
        vec![
            ("base_channels".into(), self.base_channels.to_string()),
            ("input_height".into(), self.input_size.0.to_string()),
            ("input_width".into(), self.input_size.1.to_string()),
            ("norm_epsilon".into(), self.norm_epsilon.to_string()),
            ("init_seed".into(), self.init_seed.to_string()),
            ("cla_position".into(), self.use_position.to_string()),
            ("cla_channel".into(), self.use_channel.to_string()),
            ("fusion".into(), fusion.into()),
        ]
    }
}

impl ModelConfig {
    /// Inverse of [`ModelConfig::echo`]. Every key must be present and known.
    pub fn from_echo(pairs: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Config(format!("missing model key {key}")))
        };
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        let known = Self::default().echo();
        if let Some((k, _)) = pairs.iter().find(|(k, _)| !known.iter().any(|(n, _)| n == k)) {
            return Err(Error::Config(format!("unknown model key {k}")));
        }
        let cfg = Self {
            base_channels: num("base_channels", get("base_channels")?)?,
            input_size: (
                num("input_height", get("input_height")?)?,
                num("input_width", get("input_width")?)?,
            ),
            norm_epsilon: num("norm_epsilon", get("norm_epsilon")?)?,
            init_seed: num("init_seed", get("init_seed")?)?,
            use_position: num("cla_position", get("cla_position")?)?,
            use_channel: num("cla_channel", get("cla_channel")?)?,
            fusion: match get("fusion")? {
                "ffm" => FusionKind::Gated,
                "sum" => FusionKind::Sum,
                v => return Err(Error::Config(format!("fusion: expected ffm or sum, got {v:?}"))),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Stride-2 3×3 block followed by a stride-1 3×3 block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub down: ConvBnRelu,
    pub conv: ConvBnRelu,
}

impl EncoderBlock {
    fn new(params: &mut ParamSet, buffers: &mut BufferSet, rng: &mut impl Rng, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            down: ConvBnRelu::new(params, buffers, rng, &format!("{name}.down"), cin, cout, 3, 2)?,
            conv: ConvBnRelu::new(params, buffers, rng, &format!("{name}.conv"), cout, cout, 3, 1)?,
        })
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.down.forward(s, x)?;
        self.conv.forward(s, y)
    }
}

/// The layer graph, without parameter storage.
#[derive(Clone, Debug)]
pub struct Network {
    pub encoder: [EncoderBlock; 4],
    /// Channel compressors for levels 2 to 4 (`None` where the width is already `C`).
    pub laterals: [Option<ConvBnRelu>; 3],
    pub bridge: [ConvBnRelu; 2],
    /// Cross-level attention pairing `F_h` with `F_2`, `F_3`, `F_4`.
    pub cla: [CrossLevelAttention; 3],
    /// Decoder stages producing `D_2`, `D_3`, `D_4`.
    pub decoder: [DecoderStage; 3],
    /// Heads on `D_2`, `D_3`, `D_4` and the bridge.
    pub heads: [SaliencyHead; HEADS],
}

/// Intermediate tensors of one forward pass.
#[derive(Clone, Debug)]
pub struct Diagnostics {
    /// Encoder outputs `F_2..F_5`.
    pub features: [Var; 4],
    pub bridge: Var,
    /// Attention maps of the modules at levels 2, 3, 4.
    pub attention: [AttentionMaps; 3],
    /// Decoder outputs `D_2`, `D_3`, `D_4`.
    pub decoded: [Var; 3],
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `N×1×H×W` maps, final prediction first.
    pub predictions: [Var; HEADS],
    pub diagnostics: Diagnostics,
}

fn collect<T, const N: usize>(items: Vec<T>) -> [T; N] {
    match items.try_into() {
        Ok(a) => a,
        Err(_) => unreachable!("fixed-length construction"),
    }
}

impl Network {
    fn new(cfg: &ModelConfig, params: &mut ParamSet, buffers: &mut BufferSet, rng: &mut impl Rng) -> Result<Self> {
        let c = cfg.base_channels;
        let widths = cfg.encoder_widths();
        let mut cin = 3;
        let mut encoder = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            encoder.push(EncoderBlock::new(params, buffers, rng, &format!("enc{}", i + 2), cin, w)?);
            cin = w;
        }
        let mut laterals = Vec::new();
        for (i, &w) in widths[..3].iter().enumerate() {
            laterals.push(if w == c {
                None
            } else {
                Some(ConvBnRelu::new(params, buffers, rng, &format!("lat{}", i + 2), w, c, 1, 1)?)
            });
        }
        let bridge = [
            ConvBnRelu::new(params, buffers, rng, "bridge.reduce", widths[3], c, 1, 1)?,
            ConvBnRelu::new(params, buffers, rng, "bridge.conv", c, c, 3, 1)?,
        ];
        let mut cla = Vec::new();
        for level in 2..5 {
            cla.push(CrossLevelAttention::new(
                params,
                rng,
                &format!("cla{level}"),
                c,
                cfg.use_position,
                cfg.use_channel,
            )?);
        }
        let mut decoder = Vec::new();
        for level in 2..5 {
            let name = format!("dec{level}");
            decoder.push(match cfg.fusion {
                FusionKind::Gated => DecoderStage::Gated(FeatureFusion::new(params, buffers, rng, &name, c, false)?),
                FusionKind::Sum => DecoderStage::Sum(SumFusion::new(params, buffers, rng, &name, c)?),
            });
        }
        let mut heads = Vec::new();
        for name in ["head2", "head3", "head4", "head_bridge"] {
            heads.push(SaliencyHead::new(params, rng, name, c)?);
        }
        Ok(Self {
            encoder: collect(encoder),
            laterals: collect(laterals),
            bridge,
            cla: collect(cla),
            decoder: collect(decoder),
            heads: collect(heads),
        })
    }

    /// Runs the network on an `N×3×H×W` batch. With `bypass_attention` the
    /// attention modules are skipped entirely.
    pub fn forward(&self, s: &mut Session, x: Var, bypass_attention: bool) -> Result<ModelOutput> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] % STRIDE != 0 || shape[3] % STRIDE != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::dim(format!(
                "model input must be N×3×H×W with H and W positive multiples of {STRIDE}, got {shape:?}"
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        let mut features = Vec::with_capacity(4);
        let mut y = x;
        for block in &self.encoder {
            y = block.forward(s, y)?;
            features.push(y);
        }
        let features: [Var; 4] = collect(features);
        let mut low = Vec::with_capacity(3);
        for (f, lateral) in features.iter().zip(&self.laterals) {
            low.push(match lateral {
                Some(l) => l.forward(s, *f)?,
                None => *f,
            });
        }
        let reduced = self.bridge[0].forward(s, features[3])?;
        let bridge = self.bridge[1].forward(s, reduced)?;

        let mut attention: Vec<AttentionMaps> = Vec::with_capacity(3);
        let mut pairs = Vec::with_capacity(3);
        for (module, &f_l) in self.cla.iter().zip(&low) {
            if bypass_attention {
                attention.push(AttentionMaps::default());
                pairs.push((bridge, f_l));
            } else {
                let out = module.forward(s, bridge, f_l)?;
                attention.push(out.maps);
                pairs.push((out.high, out.low));
            }
        }

        let mut decoded = [bridge; 3];
        let mut previous = bridge;
        for level in (0..3).rev() {
            let (high, low) = pairs[level];
            previous = self.decoder[level].forward(s, low, high, previous)?;
            decoded[level] = previous;
        }
        let sources = [decoded[0], decoded[1], decoded[2], bridge];
        let mut predictions = Vec::with_capacity(HEADS);
        for (head, src) in self.heads.iter().zip(sources) {
            predictions.push(head.forward(s, src, h, w)?);
        }
        Ok(ModelOutput {
            predictions: collect(predictions),
            diagnostics: Diagnostics {
                features,
                bridge,
                attention: collect(attention),
                decoded,
            },
        })
    }
}

/// Attention of one image at one level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelAttention {
    pub level: usize,
    /// `N_h×N_l` position map, rows sum to one.
    pub position: Option<Tensor>,
    /// Mean attention each low-level position receives, on the `F_l` grid.
    pub received: Option<Tensor>,
    /// `C×C` channel map, rows sum to one.
    pub channel: Option<Tensor>,
}

/// Architecture, parameters and batch-norm statistics.
#[derive(Clone, Debug)]
pub struct ClassMini {
    pub config: ModelConfig,
    pub net: Network,
    pub params: ParamSet,
    pub buffers: BufferSet,
}

impl ClassMini {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(config.init_seed);
        let mut params = ParamSet::new();
        let mut buffers = BufferSet::default();
        let net = Network::new(&config, &mut params, &mut buffers, &mut rng)?;
        Ok(Self {
            config,
            net,
            params,
            buffers,
        })
    }

    /// Binds the parameters into `g` and runs the network. Returns the
    /// parameter variables (in [`ParamSet`] order) alongside the output.
    pub fn run(&mut self, g: &mut Graph, x: Var, mode: NormMode) -> Result<(Vec<Var>, ModelOutput)> {
        self.run_with(g, x, mode, false)
    }

    pub fn run_with(&mut self, g: &mut Graph, x: Var, mode: NormMode, bypass_attention: bool) -> Result<(Vec<Var>, ModelOutput)> {
        let Self {
            config,
            net,
            params,
            buffers,
        } = self;
        let vars = params.bind(g);
        let mut s = Session::new(g, &vars, buffers, mode, config.norm_epsilon);
        let out = net.forward(&mut s, x, bypass_attention)?;
        Ok((vars, out))
    }

    /// Attention maps of one `3×H×W` image at levels 2, 3, 4 in eval mode.
    pub fn attention_maps(&mut self, image: &Tensor) -> Result<Vec<LevelAttention>> {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let mut g = Graph::new();
        let x = g.constant(image.reshape(&shape)?);
        let (_, out) = self.run(&mut g, x, NormMode::Eval)?;
        let d = &out.diagnostics;
        let mut levels = Vec::with_capacity(3);
        for (i, maps) in d.attention.iter().enumerate() {
            let fs = g.shape(d.features[i]).to_vec();
            let (hl, wl) = (fs[2], fs[3]);
            let position = match maps.position {
                Some(p) => {
                    let v = g.value(p);
                    let (nh, nl) = (v.shape()[1], v.shape()[2]);
                    Some(v.reshape(&[nh, nl])?)
                }
                None => None,
            };
            let received = match &position {
                Some(p) => {
                    let (nh, nl) = (p.shape()[0], p.shape()[1]);
                    let data = p.data();
                    let cols = (0..nl)
                        .map(|j| (0..nh).map(|r| data[r * nl + j]).sum::<f64>() / nh as f64)
                        .collect();
                    Some(Tensor::new(&[hl, wl], cols)?)
                }
                None => None,
            };
            let channel = match maps.channel {
                Some(c) => {
                    let v = g.value(c);
                    let n = v.shape()[1];
                    Some(v.reshape(&[n, n])?)
                }
                None => None,
            };
            levels.push(LevelAttention {
                level: i + 2,
                position,
                received,
                channel,
            });
        }
        Ok(levels)
    }

    /// Whether `name` belongs to the encoder learning-rate group.
    pub fn is_backbone(name: &str) -> bool {
        name.starts_with("enc")
    }
}
