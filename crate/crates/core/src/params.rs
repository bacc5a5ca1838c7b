//! Named parameter storage, running-statistics buffers, and the small layer
//! types the model is assembled from.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NormMode, RunningStats, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// Trainable tensors keyed by unique name, iterated in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Records every parameter as a trainable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| graph.variable(t.clone())).collect()
    }

    /// Copies gradients from a graph produced by [`ParamSet::bind`]. Parameters
    /// the backward pass never reached receive zeros.
    pub fn absorb_grads(&mut self, graph: &Graph, vars: &[Var]) -> Result<()> {
        if vars.len() != self.tensors.len() {
            return Err(Error::Contract(format!(
                "{} bound variables for {} parameters",
                vars.len(),
                self.tensors.len()
            )));
        }
        for (t, v) in self.tensors.iter_mut().zip(vars) {
            match graph.grad(*v) {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![0.0; t.numel()])?,
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }
}

/// Named batch-norm running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BufferSet {
    names: Vec<String>,
    stats: Vec<RunningStats>,
}

impl BufferSet {
    pub fn add(&mut self, name: impl Into<String>, channels: usize) -> BufferId {
        self.names.push(name.into());
        self.stats.push(RunningStats::new(channels));
        BufferId(self.stats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.names.iter().map(String::as_str).zip(&self.stats)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut RunningStats> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.stats[i])
    }

    pub fn get(&self, id: BufferId) -> &RunningStats {
        &self.stats[id.0]
    }
}

/// One forward evaluation: the tape, the variables standing for each
/// parameter (in [`ParamSet`] order), and the buffers batch norm may update.
pub struct Session<'a> {
    pub graph: &'a mut Graph,
    vars: &'a [Var],
    buffers: &'a mut BufferSet,
    pub mode: NormMode,
    pub norm_eps: f64,
}

impl<'a> Session<'a> {
    pub fn new(
        graph: &'a mut Graph,
        vars: &'a [Var],
        buffers: &'a mut BufferSet,
        mode: NormMode,
        norm_eps: f64,
    ) -> Self {
        Self {
            graph,
            vars,
            buffers,
            mode,
            norm_eps,
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    fn batch_norm(&mut self, x: Var, layer: &BatchNorm2d) -> Result<Var> {
        let (gamma, shift) = (self.param(layer.gamma), self.param(layer.shift));
        let stats = &mut self.buffers.stats[layer.stats.0];
        self.graph.batch_norm(x, gamma, shift, stats, self.mode, self.norm_eps)
    }
}

/// Uniform in `±1/sqrt(fan_in)`.
fn init_weight(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// `kernel` 3 gets padding 1 so stride-1 convolutions keep their size.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        if !matches!(kernel, 1 | 3) || !matches!(stride, 1 | 2) {
            return Err(Error::Config(format!(
                "{name}: kernel {kernel} stride {stride} not supported (kernel 1 or 3, stride 1 or 2)"
            )));
        }
        let fan_in = in_channels * kernel * kernel;
        let weight = params.add(
            format!("{name}.weight"),
            init_weight(rng, &[out_channels, in_channels, kernel, kernel], fan_in),
        )?;
        let bias = if bias {
            Some(params.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub shift: ParamId,
    pub stats: BufferId,
}

impl BatchNorm2d {
    pub fn new(params: &mut ParamSet, buffers: &mut BufferSet, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: params.add(format!("{name}.gamma"), Tensor::ones(&[channels]))?,
            shift: params.add(format!("{name}.shift"), Tensor::zeros(&[channels]))?,
            stats: buffers.add(format!("{name}.running"), channels),
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        s.batch_norm(x, self)
    }
}

/// Convolution (no bias), batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub norm: BatchNorm2d,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        buffers: &mut BufferSet,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(params, rng, &format!("{name}.conv"), in_channels, out_channels, kernel, stride, false)?,
            norm: BatchNorm2d::new(params, buffers, &format!("{name}.bn"), out_channels)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.norm.forward(s, y)?;
        Ok(s.graph.relu(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn names_are_unique_and_ordered() {
        let mut p = ParamSet::new();
        p.add("a", Tensor::zeros(&[2])).unwrap();
        p.add("b", Tensor::zeros(&[3])).unwrap();
        assert!(p.add("a", Tensor::zeros(&[1])).is_err());
        let names: Vec<&str> = p.iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["a", "b"]);
        assert!(p.iter().all(|(_, t)| t.requires_grad()));
        assert_eq!(p.numel(), 5);
    }

    #[test]
    fn conv_init_is_bounded_and_seeded() {
        let build = || {
            let mut p = ParamSet::new();
            let mut rng = seeded(4);
            Conv2d::new(&mut p, &mut rng, "c", 4, 8, 3, 1, true).unwrap();
            p
        };
        let p = build();
        assert_eq!(p, build());
        let bound = 1.0 / 36f64.sqrt();
        assert!(p.by_name("c.weight").unwrap().data().iter().all(|v| v.abs() < bound));
        assert!(p.by_name("c.bias").unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unsupported_kernel_is_rejected() {
        let mut p = ParamSet::new();
        let mut rng = seeded(0);
        assert!(matches!(
            Conv2d::new(&mut p, &mut rng, "c", 1, 1, 5, 1, false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn absorb_fills_unreached_with_zeros() {
        let mut p = ParamSet::new();
        let a = p.add("a", Tensor::ones(&[2])).unwrap();
        p.add("unused", Tensor::ones(&[1])).unwrap();
        let mut g = Graph::new();
        let vars = p.bind(&mut g);
        let s = g.sum(vars[a.0]).unwrap();
        g.backward(s).unwrap();
        p.absorb_grads(&g, &vars).unwrap();
        assert_eq!(p.by_name("a").unwrap().grad().unwrap(), &[1.0, 1.0]);
        assert_eq!(p.by_name("unused").unwrap().grad().unwrap(), &[0.0]);
    }
}
