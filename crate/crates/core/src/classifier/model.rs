use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::edgeconv::{edge_conv, edge_conv_backward, EdgeConvCache};
use super::knn::knn_neighbors;
use super::layers::{relu, sigmoid, softplus, Dense, NodeMatrix};
use crate::error::{Error, Result};
use crate::graph::{ScanGraph, NODE_FEATURES};

/// Where an edge-convolution layer takes its neighborhoods from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborSource {
    /// Edges of the constructed scan graph.
    Static,
    /// k nearest neighbors in the layer's input feature space.
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub hidden_size: usize,
    /// Drop probability on head hidden units, training only.
    pub dropout: f64,
    pub knn_k: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Loss weight on positive graphs; `None` lets training use #neg / #pos.
    pub class_weight_pos: Option<f64>,
    pub ec1_neighbors: NeighborSource,
    pub ec2_neighbors: NeighborSource,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            learning_rate: 0.01,
            hidden_size: 64,
            dropout: 0.75,
            knn_k: 30,
            weight_decay: 0.05,
            epochs: 60,
            seed: 0,
            class_weight_pos: None,
            ec1_neighbors: NeighborSource::Static,
            ec2_neighbors: NeighborSource::Dynamic,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.hidden_size == 0 {
            return Err(Error::Config("hidden_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.knn_k == 0 {
            return Err(Error::Config("knn_k must be at least 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.class_weight_pos.is_some_and(|w| !(w > 0.0)) {
            return Err(Error::Config("class_weight_pos must be positive".into()));
        }
        Ok(())
    }
}

/// Every learnable tensor. Gradients share this shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    /// `8 -> hidden` over `[x_i ; x_j - x_i]`.
    pub edgeconv1: Dense,
    /// `hidden -> hidden` over `[x_i ; x_j - x_i]`.
    pub edgeconv2: Dense,
    /// `2 hidden -> hidden` over the concatenated edge-conv outputs.
    pub fc: Dense,
    /// Hidden layers then a single-logit output layer.
    pub head_mlp: Vec<Dense>,
}

impl Parameters {
    pub fn glorot<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        Parameters {
            edgeconv1: Dense::glorot(2 * NODE_FEATURES, hidden, rng),
            edgeconv2: Dense::glorot(2 * hidden, hidden, rng),
            fc: Dense::glorot(2 * hidden, hidden, rng),
            head_mlp: vec![Dense::glorot(hidden, hidden, rng), Dense::glorot(hidden, 1, rng)],
        }
    }

    pub fn zeros(hidden: usize) -> Self {
        Parameters {
            edgeconv1: Dense::zeros(2 * NODE_FEATURES, hidden),
            edgeconv2: Dense::zeros(2 * hidden, hidden),
            fc: Dense::zeros(2 * hidden, hidden),
            head_mlp: vec![Dense::zeros(hidden, hidden), Dense::zeros(hidden, 1)],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Parameters {
            edgeconv1: self.edgeconv1.zeros_like(),
            edgeconv2: self.edgeconv2.zeros_like(),
            fc: self.fc.zeros_like(),
            head_mlp: self.head_mlp.iter().map(Dense::zeros_like).collect(),
        }
    }

    fn layers(&self) -> impl Iterator<Item = (String, &Dense)> {
        [
            ("edgeconv1".to_owned(), &self.edgeconv1),
            ("edgeconv2".to_owned(), &self.edgeconv2),
            ("fc".to_owned(), &self.fc),
        ]
        .into_iter()
        .chain(
            self.head_mlp
                .iter()
                .enumerate()
                .map(|(i, d)| (format!("head{i}"), d)),
        )
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        [&mut self.edgeconv1, &mut self.edgeconv2, &mut self.fc]
            .into_iter()
            .chain(self.head_mlp.iter_mut())
    }

    /// Named tensors in a fixed order: `(name, values, is_weight)`.
    pub fn tensors(&self) -> Vec<(String, &[f64], bool)> {
        self.layers()
            .flat_map(|(name, d)| {
                [
                    (format!("{name}.weight"), d.weight.as_slice(), true),
                    (format!("{name}.bias"), d.bias.as_slice(), false),
                ]
            })
            .collect()
    }

    /// Mutable tensors in the same order as [`Parameters::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(&mut [f64], bool)> {
        self.layers_mut()
            .flat_map(|d| [(d.weight.as_mut_slice(), true), (d.bias.as_mut_slice(), false)])
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t, _)| t.len()).sum()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Parameters, scale: f64) {
        for ((dst, _), (_, src, _)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn check_dims(&self, hidden: usize) -> Result<()> {
        let expect = |d: &Dense, name: &str, i: usize, o: usize| -> Result<()> {
            if d.inputs != i || d.outputs != o || d.weight.len() != i * o || d.bias.len() != o {
                return Err(Error::Config(format!(
                    "{name}: expected {i} -> {o}, found {} -> {} ({} weights, {} biases)",
                    d.inputs,
                    d.outputs,
                    d.weight.len(),
                    d.bias.len()
                )));
            }
            Ok(())
        };
        expect(&self.edgeconv1, "edgeconv1", 2 * NODE_FEATURES, hidden)?;
        expect(&self.edgeconv2, "edgeconv2", 2 * hidden, hidden)?;
        expect(&self.fc, "fc", 2 * hidden, hidden)?;
        let (last, hidden_layers) = self
            .head_mlp
            .split_last()
            .ok_or_else(|| Error::Config("head_mlp has no layers".into()))?;
        for (i, d) in hidden_layers.iter().enumerate() {
            expect(d, &format!("head{i}"), hidden, hidden)?;
        }
        expect(last, "head output", hidden, 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub hyper: Hyperparams,
    pub params: Parameters,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: NodeMatrix,
    ec1_out: NodeMatrix,
    ec1_cache: EdgeConvCache,
    ec2_cache: EdgeConvCache,
    concat: NodeMatrix,
    fc_pre: NodeMatrix,
    pool_arg: Vec<usize>,
    pooled: Vec<f64>,
    /// Pre-activation and post-dropout activation per hidden head layer.
    head_hidden: Vec<(Vec<f64>, Vec<f64>)>,
    /// Dropout scale per hidden head unit (0 for dropped units).
    head_masks: Vec<Vec<f64>>,
    pub neighbors_ec2: Vec<Vec<usize>>,
    pub logit: f64,
    pub probability: f64,
}

/// Eval-mode forward passes draw nothing from the rng.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("eval forward never samples")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("eval forward never samples")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("eval forward never samples")
    }
}

impl ClassifierModel {
    /// Fresh model with seeded uniform initialization.
    pub fn new(hyper: Hyperparams) -> Result<Self> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let params = Parameters::glorot(hyper.hidden_size, &mut rng);
        Ok(ClassifierModel { hyper, params })
    }

    pub fn zeroed(hyper: Hyperparams) -> Result<Self> {
        hyper.validate()?;
        let params = Parameters::zeros(hyper.hidden_size);
        Ok(ClassifierModel { hyper, params })
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.params.check_dims(self.hyper.hidden_size)
    }

    fn neighborhoods(&self, source: NeighborSource, graph: &ScanGraph, x: &NodeMatrix) -> Vec<Vec<usize>> {
        match source {
            NeighborSource::Static => graph.neighbors(),
            NeighborSource::Dynamic => knn_neighbors(x, self.hyper.knn_k),
        }
    }

    pub fn forward_trace<R: Rng + ?Sized>(
        &self,
        graph: &ScanGraph,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardTrace> {
        self.validate()?;
        if graph.nodes.is_empty() {
            return Err(Error::InvalidInput(format!(
                "graph {} has no nodes",
                graph.scan_id
            )));
        }
        let hidden = self.hyper.hidden_size;
        let p = &self.params;

        let input = NodeMatrix::from_rows(&graph.feature_rows());
        let nbr1 = self.neighborhoods(self.hyper.ec1_neighbors, graph, &input);
        let (ec1_out, ec1_cache) = edge_conv(&p.edgeconv1, &input, &nbr1);
        let nbr2 = self.neighborhoods(self.hyper.ec2_neighbors, graph, &ec1_out);
        let (ec2_out, ec2_cache) = edge_conv(&p.edgeconv2, &ec1_out, &nbr2);

        let n = input.rows;
        let mut concat = NodeMatrix::zeros(n, 2 * hidden);
        let mut fc_pre = NodeMatrix::zeros(n, hidden);
        let mut pooled = vec![f64::NEG_INFINITY; hidden];
        let mut pool_arg = vec![0usize; hidden];
        for r in 0..n {
            let row = concat.row_mut(r);
            row[..hidden].copy_from_slice(ec1_out.row(r));
            row[hidden..].copy_from_slice(ec2_out.row(r));
        }
        let (reps, class) = concat.row_classes();
        let rep_pre: Vec<Vec<f64>> = reps.iter().map(|&r| p.fc.forward(concat.row(r))).collect();
        for (r, &k) in class.iter().enumerate() {
            let pre = &rep_pre[k];
            for (o, &v) in pre.iter().enumerate() {
                let a = relu(v);
                if a > pooled[o] {
                    pooled[o] = a;
                    pool_arg[o] = r;
                }
            }
            fc_pre.row_mut(r).copy_from_slice(pre);
        }

        let (out_layer, hidden_layers) = p.head_mlp.split_last().expect("checked dims");
        let keep = 1.0 - self.hyper.dropout;
        let mut act = pooled.clone();
        let mut head_hidden = Vec::with_capacity(hidden_layers.len());
        let mut head_masks = Vec::with_capacity(hidden_layers.len());
        for layer in hidden_layers {
            let pre = layer.forward(&act);
            let mask: Vec<f64> = if training && self.hyper.dropout > 0.0 {
                (0..pre.len())
                    .map(|_| {
                        if rng.random::<f64>() < self.hyper.dropout {
                            0.0
                        } else {
                            1.0 / keep
                        }
                    })
                    .collect()
            } else {
                vec![1.0; pre.len()]
            };
            act = pre.iter().zip(&mask).map(|(&v, m)| relu(v) * m).collect();
            head_hidden.push((pre, act.clone()));
            head_masks.push(mask);
        }
        let logit = out_layer.forward(&act)[0];
        Ok(ForwardTrace {
            input,
            ec1_out,
            ec1_cache,
            ec2_cache,
            concat,
            fc_pre,
            pool_arg,
            pooled,
            head_hidden,
            head_masks,
            neighbors_ec2: nbr2,
            logit,
            probability: sigmoid(logit),
        })
    }

    /// Abnormality probability for one scan graph.
    pub fn forward<R: Rng + ?Sized>(&self, graph: &ScanGraph, training: bool, rng: &mut R) -> Result<f64> {
        Ok(self.forward_trace(graph, training, rng)?.probability)
    }

    /// Eval-mode forward pass.
    pub fn predict(&self, graph: &ScanGraph) -> Result<f64> {
        self.forward(graph, false, &mut NoRng)
    }

    fn positive_weight(&self) -> f64 {
        self.hyper.class_weight_pos.unwrap_or(1.0)
    }

    /// Training-mode loss: class-weighted binary cross-entropy plus `weight_decay / 2 * |W|^2`
    /// over weight matrices (biases are not decayed), with exact gradients
    /// for the sampled dropout mask and the neighborhoods of this pass.
    pub fn loss_and_gradients<R: Rng + ?Sized>(
        &self,
        graph: &ScanGraph,
        label: bool,
        rng: &mut R,
    ) -> Result<(f64, Parameters)> {
        let trace = self.forward_trace(graph, true, rng)?;
        let (loss, grad) = self.backward(&trace, label);
        Ok((loss, grad))
    }

    fn backward(&self, t: &ForwardTrace, label: bool) -> (f64, Parameters) {
        let p = &self.params;
        let hidden = self.hyper.hidden_size;
        let w_pos = self.positive_weight();
        let mut grad = p.zeros_like();

        let (mut loss, d_logit) = if label {
            (w_pos * softplus(-t.logit), w_pos * (t.probability - 1.0))
        } else {
            (softplus(t.logit), t.probability)
        };

        // head
        let n_hidden = t.head_hidden.len();
        let mut d_act = vec![d_logit];
        for l in (0..=n_hidden).rev() {
            let layer = &p.head_mlp[l];
            let input: &[f64] = if l == 0 { &t.pooled } else { &t.head_hidden[l - 1].1 };
            // d_act is the gradient w.r.t. this layer's pre-activation
            let g = &mut grad.head_mlp[l];
            g.accumulate_outer(0..layer.inputs, &d_act, input, 1.0);
            for (b, d) in g.bias.iter_mut().zip(&d_act) {
                *b += d;
            }
            let mut d_in = vec![0.0; layer.inputs];
            layer.backprop_columns(0..layer.inputs, &d_act, &mut d_in, 1.0);
            if l > 0 {
                let (pre, _) = &t.head_hidden[l - 1];
                let mask = &t.head_masks[l - 1];
                for ((d, &v), m) in d_in.iter_mut().zip(pre).zip(mask) {
                    *d = if v > 0.0 { *d * m } else { 0.0 };
                }
            }
            d_act = d_in;
        }
        let d_pooled = d_act;

        // global max pool -> fc
        let n = t.input.rows;
        let mut d_fc_pre = NodeMatrix::zeros(n, hidden);
        for (o, &r) in t.pool_arg.iter().enumerate() {
            if t.fc_pre.row(r)[o] > 0.0 {
                d_fc_pre.row_mut(r)[o] += d_pooled[o];
            }
        }
        let mut d_ec1 = NodeMatrix::zeros(n, hidden);
        let mut d_ec2 = NodeMatrix::zeros(n, hidden);
        for r in 0..n {
            let g = d_fc_pre.row(r);
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            grad.fc.accumulate_outer(0..2 * hidden, g, t.concat.row(r), 1.0);
            for (b, d) in grad.fc.bias.iter_mut().zip(g) {
                *b += d;
            }
            p.fc.backprop_columns(0..hidden, g, d_ec1.row_mut(r), 1.0);
            p.fc.backprop_columns(hidden..2 * hidden, g, d_ec2.row_mut(r), 1.0);
        }

        edge_conv_backward(
            &p.edgeconv2,
            &t.ec1_out,
            &t.ec2_cache,
            &d_ec2,
            &mut grad.edgeconv2,
            Some(&mut d_ec1),
        );
        edge_conv_backward(
            &p.edgeconv1,
            &t.input,
            &t.ec1_cache,
            &d_ec1,
            &mut grad.edgeconv1,
            None,
        );

        let decay = self.hyper.weight_decay;
        if decay > 0.0 {
            for ((g, is_weight), (_, w, _)) in grad.tensors_mut().into_iter().zip(p.tensors()) {
                if !is_weight {
                    continue;
                }
                for (gv, wv) in g.iter_mut().zip(w) {
                    *gv += decay * wv;
                    loss += 0.5 * decay * wv * wv;
                }
            }
        }
        (loss, grad)
    }
}
