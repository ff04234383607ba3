//! Trainable parameters of a network and the graph interpreter.
//!
//! The interpreter walks the graph once per batch and defers the two
//! phase-dependent pieces to an [`Exec`]: how a Conv/FC layer computes its
//! pre-activation output, and how a quantizer-owning node quantizes.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Op};
use crate::quant::{fold_bn, BnParams};
use crate::tensor::{batch_norm_eval, batch_norm_train, Float, Tensor};

pub const BN_EPS: Float = 1e-5;
const BN_MOMENTUM: Float = 0.1;

#[derive(Debug)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: RefCell<Vec<Float>>,
    pub running_var: RefCell<Vec<Float>>,
}

impl BatchNorm {
    fn new(c: usize) -> Self {
        BatchNorm {
            gamma: Tensor::param(&[c], vec![1.0; c]).unwrap(),
            beta: Tensor::param(&[c], vec![0.0; c]).unwrap(),
            running_mean: RefCell::new(vec![0.0; c]),
            running_var: RefCell::new(vec![1.0; c]),
        }
    }

    pub fn params(&self) -> BnParams {
        BnParams {
            gamma: self.gamma.to_vec(),
            beta: self.beta.to_vec(),
            mean: self.running_mean.borrow().clone(),
            var: self.running_var.borrow().clone(),
            eps: BN_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        if train {
            let (y, mean, var) = batch_norm_train(x, &self.gamma, &self.beta, BN_EPS)?;
            let mut rm = self.running_mean.borrow_mut();
            let mut rv = self.running_var.borrow_mut();
            for c in 0..mean.len() {
                rm[c] = (1.0 - BN_MOMENTUM) * rm[c] + BN_MOMENTUM * mean[c];
                rv[c] = (1.0 - BN_MOMENTUM) * rv[c] + BN_MOMENTUM * var[c];
            }
            Ok(y)
        } else {
            batch_norm_eval(x, &self.gamma, &self.beta, &self.running_mean.borrow(), &self.running_var.borrow(), BN_EPS)
        }
    }
}

#[derive(Debug)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
    /// `None` once folded (or for layers declared without BN).
    pub bn: Option<BatchNorm>,
}

#[derive(Debug)]
pub struct Model {
    pub graph: Graph,
    pub layers: BTreeMap<usize, LayerParams>,
}

impl Model {
    /// He-normal weights, zero biases, identity BN.
    pub fn init<R: Rng + ?Sized>(graph: Graph, rng: &mut R) -> Model {
        let mut layers = BTreeMap::new();
        for i in graph.layers() {
            let shape = graph.weight_shape(i);
            let fan_in: usize = shape[1..].iter().product();
            let gain = if graph.nodes[i].relu { 2.0 } else { 1.0 };
            let std = (gain / fan_in as f64).sqrt() as Float;
            let w = Tensor::randn(&shape, std, rng);
            let weight = Tensor::param(&shape, w.to_vec()).unwrap();
            let c = shape[0];
            let bias = Tensor::param(&[c], vec![0.0; c]).unwrap();
            let bn = graph.nodes[i].bn.then(|| BatchNorm::new(c));
            layers.insert(i, LayerParams { weight, bias, bn });
        }
        Model { graph, layers }
    }

    pub fn layer(&self, i: usize) -> &LayerParams {
        &self.layers[&i]
    }

    /// All trainable tensors in a stable order.
    pub fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for p in self.layers.values() {
            out.push(p.weight.clone());
            out.push(p.bias.clone());
            if let Some(bn) = &p.bn {
                out.push(bn.gamma.clone());
                out.push(bn.beta.clone());
            }
        }
        out
    }

    pub fn is_folded(&self) -> bool {
        self.layers.values().all(|p| p.bn.is_none())
    }

    /// Returns an equivalent model with every BN merged into its layer.
    pub fn fold_bn(&self) -> Result<Model> {
        let mut layers = BTreeMap::new();
        for (&i, p) in &self.layers {
            let (w, b) = match &p.bn {
                Some(bn) => fold_bn(&p.weight.to_vec(), &p.bias.to_vec(), &bn.params())?,
                None => (p.weight.to_vec(), p.bias.to_vec()),
            };
            layers.insert(
                i,
                LayerParams {
                    weight: Tensor::param(p.weight.shape(), w)?,
                    bias: Tensor::param(p.bias.shape(), b)?,
                    bn: None,
                },
            );
        }
        Ok(Model { graph: self.graph.clone(), layers })
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint) {
        for (&i, p) in &self.layers {
            let name = &self.graph.nodes[i].name;
            ck.insert(format!("{name}.weight"), &p.weight);
            ck.insert(format!("{name}.bias"), &p.bias);
            if let Some(bn) = &p.bn {
                let c = vec![p.bias.numel()];
                ck.insert(format!("{name}.bn.gamma"), &bn.gamma);
                ck.insert(format!("{name}.bn.beta"), &bn.beta);
                ck.insert_raw(format!("{name}.bn.mean"), c.clone(), bn.running_mean.borrow().clone());
                ck.insert_raw(format!("{name}.bn.var"), c, bn.running_var.borrow().clone());
            }
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        self.to_checkpoint(&mut ck);
        ck
    }

    /// Rebuilds a model; BN tensors are optional (absent means folded).
    pub fn from_checkpoint(graph: Graph, ck: &Checkpoint) -> Result<Model> {
        let mut layers = BTreeMap::new();
        for i in graph.layers() {
            let name = graph.nodes[i].name.clone();
            let shape = graph.weight_shape(i);
            let c = shape[0];
            let weight = Tensor::param(&shape, ck.expect(&format!("{name}.weight"), &shape)?.to_vec())?;
            let bias = Tensor::param(&[c], ck.expect(&format!("{name}.bias"), &[c])?.to_vec())?;
            let bn = if ck.contains(&format!("{name}.bn.gamma")) {
                if !graph.nodes[i].bn {
                    return Err(Error::Format(format!("checkpoint has BN for `{name}`, network does not")));
                }
                let get = |k: &str| ck.expect(&format!("{name}.bn.{k}"), &[c]).map(|d| d.to_vec());
                Some(BatchNorm {
                    gamma: Tensor::param(&[c], get("gamma")?)?,
                    beta: Tensor::param(&[c], get("beta")?)?,
                    running_mean: RefCell::new(get("mean")?),
                    running_var: RefCell::new(get("var")?),
                })
            } else {
                None
            };
            layers.insert(i, LayerParams { weight, bias, bn });
        }
        Ok(Model { graph, layers })
    }

    /// Overwrites parameter values from a snapshot taken of this model.
    pub fn restore(&self, ck: &Checkpoint) -> Result<()> {
        for (&i, p) in &self.layers {
            let name = &self.graph.nodes[i].name;
            p.weight.set_data(ck.expect(&format!("{name}.weight"), p.weight.shape())?.to_vec())?;
            p.bias.set_data(ck.expect(&format!("{name}.bias"), p.bias.shape())?.to_vec())?;
            if let Some(bn) = &p.bn {
                let c = [p.bias.numel()];
                bn.gamma.set_data(ck.expect(&format!("{name}.bn.gamma"), &c)?.to_vec())?;
                bn.beta.set_data(ck.expect(&format!("{name}.bn.beta"), &c)?.to_vec())?;
                *bn.running_mean.borrow_mut() = ck.expect(&format!("{name}.bn.mean"), &c)?.to_vec();
                *bn.running_var.borrow_mut() = ck.expect(&format!("{name}.bn.var"), &c)?.to_vec();
            }
        }
        Ok(())
    }
}

/// Runs the Conv/FC primitive of node `i` with the given weights.
pub fn apply_layer(graph: &Graph, i: usize, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    match graph.nodes[i].op {
        Op::Conv { stride, padding, depthwise: false, .. } => x.conv2d(w, b, stride, padding),
        Op::Conv { stride, padding, depthwise: true, .. } => x.depthwise_conv2d(w, b, stride, padding),
        Op::Linear => x.linear(w, b),
        _ => Err(Error::Invalid { op: "apply_layer", msg: format!("`{}` is not a layer", graph.nodes[i].name) }),
    }
}

pub trait Exec {
    /// Pre-activation output of Conv/FC node `i`.
    fn layer(&self, i: usize, x: &Tensor) -> Result<Tensor>;
    /// Quantizes the output of quantizer-owning node `i`.
    fn activation(&self, i: usize, x: &Tensor) -> Result<Tensor>;
}

/// Evaluates the graph on a batch `[N, C, H, W]`, returning logits `[N, K]`.
pub fn forward(graph: &Graph, exec: &dyn Exec, x: &Tensor) -> Result<Tensor> {
    let n = graph.nodes.len();
    let mut remaining: Vec<usize> = (0..n).map(|i| graph.consumers(i).len()).collect();
    let mut values: Vec<Option<Tensor>> = vec![None; n];
    for (i, node) in graph.nodes.iter().enumerate() {
        let input = |k: usize| values[node.inputs[k]].clone().expect("inputs evaluated first");
        let mut y = match node.op {
            Op::Input => {
                if x.shape().len() != 4 || x.shape()[1..] != node.shape[..] {
                    return Err(Error::Shape {
                        op: "forward",
                        dim: "input",
                        expected: node.shape.iter().product(),
                        got: x.shape().iter().skip(1).product(),
                    });
                }
                x.clone()
            }
            Op::Conv { .. } | Op::Linear => exec.layer(i, &input(0))?,
            Op::MaxPool { kernel } => input(0).max_pool2d(kernel)?,
            Op::Gap => input(0).global_avg_pool()?,
            Op::Flatten => input(0).flatten()?,
            Op::Add => {
                let mut acc = input(0);
                for k in 1..node.inputs.len() {
                    acc = acc.add(&input(k))?;
                }
                acc
            }
        };
        if node.relu {
            y = y.relu();
        }
        if graph.owns_quantizer(i) {
            y = exec.activation(i, &y)?;
        }
        for &j in &node.inputs {
            remaining[j] -= 1;
            if remaining[j] == 0 {
                values[j] = None;
            }
        }
        values[i] = Some(y);
    }
    Ok(values[graph.output()].take().expect("output evaluated"))
}

/// Full-precision execution, with BN in training or inference mode.
pub struct FloatExec<'a> {
    pub model: &'a Model,
    pub train: bool,
}

impl Exec for FloatExec<'_> {
    fn layer(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        let p = self.model.layer(i);
        let y = apply_layer(&self.model.graph, i, x, &p.weight, Some(&p.bias))?;
        match &p.bn {
            Some(bn) => bn.forward(&y, self.train),
            None => Ok(y),
        }
    }

    fn activation(&self, _i: usize, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randomize_bn(m: &Model, rng: &mut ChaCha8Rng) {
        for p in m.layers.values() {
            if let Some(bn) = &p.bn {
                let c = p.bias.numel();
                let r = |rng: &mut ChaCha8Rng, lo: Float, hi: Float| -> Vec<Float> {
                    (0..c).map(|_| rng.random_range(lo..hi)).collect()
                };
                bn.gamma.set_data(r(rng, 0.5, 2.0)).unwrap();
                bn.beta.set_data(r(rng, -0.5, 0.5)).unwrap();
                *bn.running_mean.borrow_mut() = r(rng, -0.3, 0.3);
                *bn.running_var.borrow_mut() = r(rng, 0.2, 3.0);
            }
        }
    }

    #[test]
    fn folding_preserves_the_network_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = Model::init(Graph::named("toy_resnet").unwrap(), &mut rng);
        randomize_bn(&m, &mut rng);
        let folded = m.fold_bn().unwrap();
        assert!(folded.is_folded());
        let x = Tensor::randn(&[4, 1, 8, 8], 1.0, &mut rng);
        let a = forward(&m.graph, &FloatExec { model: &m, train: false }, &x).unwrap().to_vec();
        let b = forward(&folded.graph, &FloatExec { model: &folded, train: false }, &x).unwrap().to_vec();
        let dev = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, Float::max);
        assert!(dev < 1e-4, "deviation {dev}");
    }

    #[test]
    fn checkpoint_round_trip_keeps_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Model::init(Graph::named("toy_plain").unwrap(), &mut rng);
        randomize_bn(&m, &mut rng);
        let back = Model::from_checkpoint(m.graph.clone(), &m.checkpoint()).unwrap();
        let x = Tensor::randn(&[2, 1, 8, 8], 1.0, &mut rng);
        let a = forward(&m.graph, &FloatExec { model: &m, train: false }, &x).unwrap().to_vec();
        let b = forward(&back.graph, &FloatExec { model: &back, train: false }, &x).unwrap().to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn logits_have_class_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Graph::named("toy_mobile").unwrap();
        let m = Model::init(g, &mut rng);
        let x = Tensor::randn(&[3, 1, 8, 8], 1.0, &mut rng);
        let y = forward(&m.graph, &FloatExec { model: &m, train: true }, &x).unwrap();
        assert_eq!(y.shape(), &[3, 10]);
        let bad = Tensor::zeros(&[1, 2, 8, 8]);
        assert!(forward(&m.graph, &FloatExec { model: &m, train: false }, &bad).is_err());
    }
}
