//! The dual-attention graph convolution model.
//!
//! One forward pass is: normalize the adjacency, project node features to
//! the hidden width, run `layers` attention graph convolution (AGC) layers
//! whose hop outputs are combined by learned attention weights, densely
//! combine all layer representations into node embeddings `G`, pool `G`
//! into a fixed-size matrix embedding `M` through self-attention over
//! nodes, and classify the flattened `M`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, Graph, NormalizedAdjacency};
use crate::tape::Var;
use crate::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    #[default]
    Relu,
    Tanh,
}

/// How the attention weights over the hop outputs of an AGC layer are
/// scored: additive scoring per node, or a free learned logit per hop
/// shared across nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HopAttention {
    #[default]
    Additive,
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Propagation steps per AGC layer.
    pub hops: usize,
    /// Number of stacked AGC layers.
    pub layers: usize,
    /// Hidden width of every node representation.
    pub hidden: usize,
    /// Rows of the pooled matrix embedding.
    pub subspaces: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub nonlinearity: Nonlinearity,
    pub hop_attention: HopAttention,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("hops", self.hops),
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("subspaces", self.subspaces),
            ("num_classes", self.num_classes),
            ("feature_dim", self.feature_dim),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Parameters scoring a layer's hop outputs.
#[derive(Debug, Clone, PartialEq)]
pub enum HopScore {
    /// Per-node additive scoring: `tanh(h W) v` per hop output row `h`.
    Additive { weight: Tensor, vector: Tensor },
    /// One learned logit per hop, shared across nodes.
    Free { logits: Tensor },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgcLayer {
    /// Hop weight, shared by all propagation steps within the layer.
    pub weight: Tensor,
    pub score: HopScore,
}

/// Every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Input projection from feature width to hidden width.
    pub input_proj: Tensor,
    pub layers: Vec<AgcLayer>,
    /// Dense combination of the `layers + 1` stacked representations.
    pub combine_weight: Tensor,
    pub combine_bias: Tensor,
    /// Hidden transform inside the pooling scores.
    pub pool_transform: Tensor,
    /// Projection onto the pooling subspaces.
    pub pool_heads: Tensor,
    pub class_weight: Tensor,
    pub class_bias: Tensor,
}

fn uniform_init(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::new(rows, cols, data)
        .expect("generated data matches shape")
        .with_grad()
}

/// Fan-based uniform initialization, bound `sqrt(6 / (rows + cols))`;
/// biases start at zero. Deterministic for a fixed seed.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (h, r) = (config.hidden, config.subspaces);
    let input_proj = uniform_init(&mut rng, config.feature_dim, h);
    let layers = (0..config.layers)
        .map(|_| AgcLayer {
            weight: uniform_init(&mut rng, h, h),
            score: match config.hop_attention {
                HopAttention::Additive => HopScore::Additive {
                    weight: uniform_init(&mut rng, h, h),
                    vector: uniform_init(&mut rng, h, 1),
                },
                HopAttention::Free => HopScore::Free {
                    logits: uniform_init(&mut rng, config.hops, 1),
                },
            },
        })
        .collect();
    Ok(ModelParams {
        input_proj,
        layers,
        combine_weight: uniform_init(&mut rng, (config.layers + 1) * h, h),
        combine_bias: Tensor::zeros(1, h).with_grad(),
        pool_transform: uniform_init(&mut rng, h, h),
        pool_heads: uniform_init(&mut rng, r, h),
        class_weight: uniform_init(&mut rng, r * h, config.num_classes),
        class_bias: Tensor::zeros(1, config.num_classes).with_grad(),
    })
}

impl ModelParams {
    /// All-zero parameters of the right shapes (checkpoint loading target).
    pub fn zeros(config: &ModelConfig) -> Result<ModelParams> {
        config.validate()?;
        let (h, r) = (config.hidden, config.subspaces);
        Ok(ModelParams {
            input_proj: Tensor::zeros(config.feature_dim, h).with_grad(),
            layers: (0..config.layers)
                .map(|_| AgcLayer {
                    weight: Tensor::zeros(h, h).with_grad(),
                    score: match config.hop_attention {
                        HopAttention::Additive => HopScore::Additive {
                            weight: Tensor::zeros(h, h).with_grad(),
                            vector: Tensor::zeros(h, 1).with_grad(),
                        },
                        HopAttention::Free => HopScore::Free {
                            logits: Tensor::zeros(config.hops, 1).with_grad(),
                        },
                    },
                })
                .collect(),
            combine_weight: Tensor::zeros((config.layers + 1) * h, h).with_grad(),
            combine_bias: Tensor::zeros(1, h).with_grad(),
            pool_transform: Tensor::zeros(h, h).with_grad(),
            pool_heads: Tensor::zeros(r, h).with_grad(),
            class_weight: Tensor::zeros(r * h, config.num_classes).with_grad(),
            class_bias: Tensor::zeros(1, config.num_classes).with_grad(),
        })
    }

    /// Parameter tensors with stable names, in a fixed order shared by the
    /// optimizer, the checkpoint format, and the gradient checker.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("input_proj".into(), &self.input_proj)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.weight"), &layer.weight));
            match &layer.score {
                HopScore::Additive { weight, vector } => {
                    out.push((format!("layers.{l}.score_weight"), weight));
                    out.push((format!("layers.{l}.score_vector"), vector));
                }
                HopScore::Free { logits } => {
                    out.push((format!("layers.{l}.hop_logits"), logits));
                }
            }
        }
        out.push(("combine.weight".into(), &self.combine_weight));
        out.push(("combine.bias".into(), &self.combine_bias));
        out.push(("pool.transform".into(), &self.pool_transform));
        out.push(("pool.heads".into(), &self.pool_heads));
        out.push(("classifier.weight".into(), &self.class_weight));
        out.push(("classifier.bias".into(), &self.class_bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> =
            vec![("input_proj".into(), &mut self.input_proj)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{l}.weight"), &mut layer.weight));
            match &mut layer.score {
                HopScore::Additive { weight, vector } => {
                    out.push((format!("layers.{l}.score_weight"), weight));
                    out.push((format!("layers.{l}.score_vector"), vector));
                }
                HopScore::Free { logits } => {
                    out.push((format!("layers.{l}.hop_logits"), logits));
                }
            }
        }
        out.push(("combine.weight".into(), &mut self.combine_weight));
        out.push(("combine.bias".into(), &mut self.combine_bias));
        out.push(("pool.transform".into(), &mut self.pool_transform));
        out.push(("pool.heads".into(), &mut self.pool_heads));
        out.push(("classifier.weight".into(), &mut self.class_weight));
        out.push(("classifier.bias".into(), &mut self.class_bias));
        out
    }

    pub fn total_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }

    /// Enter every parameter on a tape. With `trainable` false the tape
    /// treats them as constants (evaluation-only forward passes).
    pub fn enter(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut enter_one = |t: &Tensor| {
            if trainable {
                tape.leaf(t)
            } else {
                tape.constant(t)
            }
        };
        ParamVars {
            input_proj: enter_one(&self.input_proj),
            layers: self
                .layers
                .iter()
                .map(|layer| LayerVars {
                    weight: enter_one(&layer.weight),
                    score: match &layer.score {
                        HopScore::Additive { weight, vector } => HopScoreVars::Additive {
                            weight: enter_one(weight),
                            vector: enter_one(vector),
                        },
                        HopScore::Free { logits } => HopScoreVars::Free {
                            logits: enter_one(logits),
                        },
                    },
                })
                .collect(),
            combine_weight: enter_one(&self.combine_weight),
            combine_bias: enter_one(&self.combine_bias),
            pool_transform: enter_one(&self.pool_transform),
            pool_heads: enter_one(&self.pool_heads),
            class_weight: enter_one(&self.class_weight),
            class_bias: enter_one(&self.class_bias),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum HopScoreVars {
    Additive { weight: Var, vector: Var },
    Free { logits: Var },
}

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub weight: Var,
    pub score: HopScoreVars,
}

/// Tape handles of every parameter, in the same order as
/// [`ModelParams::named`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub input_proj: Var,
    pub layers: Vec<LayerVars>,
    pub combine_weight: Var,
    pub combine_bias: Var,
    pub pool_transform: Var,
    pub pool_heads: Var,
    pub class_weight: Var,
    pub class_bias: Var,
}

impl ParamVars {
    pub fn in_named_order(&self) -> Vec<Var> {
        let mut out = vec![self.input_proj];
        for layer in &self.layers {
            out.push(layer.weight);
            match layer.score {
                HopScoreVars::Additive { weight, vector } => {
                    out.push(weight);
                    out.push(vector);
                }
                HopScoreVars::Free { logits } => out.push(logits),
            }
        }
        out.extend([
            self.combine_weight,
            self.combine_bias,
            self.pool_transform,
            self.pool_heads,
            self.class_weight,
            self.class_bias,
        ]);
        out
    }
}

fn apply_nonlinearity(tape: &mut Tape, v: Var, nl: Nonlinearity) -> Var {
    match nl {
        Nonlinearity::Relu => tape.relu(v),
        Nonlinearity::Tanh => tape.tanh(v),
    }
}

/// Tape handles of every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub input_projection: Var,
    /// Per layer: the `hops` propagation outputs.
    pub layer_hops: Vec<Vec<Var>>,
    /// Per layer: hop-attention weights, rows summing to one.
    pub hop_attention: Vec<Var>,
    /// Per layer: the attention-combined node representation.
    pub layer_outputs: Vec<Var>,
    /// Dense combination `G` of all layer representations.
    pub combined: Var,
    /// Pooling scores, one row per subspace.
    pub pool_logits: Var,
    /// Attention coefficient matrix `B`; each row is a distribution over
    /// nodes.
    pub pool_weights: Var,
    /// Matrix embedding `M`.
    pub embedding: Var,
    pub logits: Var,
    pub probabilities: Var,
}

/// One AGC layer on an existing tape: `hops` propagation steps followed by
/// attention over the hop outputs. Returns the combined representation,
/// the attention weights, and the per-hop outputs.
pub fn agc_layer_on_tape(
    tape: &mut Tape,
    a_norm: Var,
    h0: Var,
    layer: &LayerVars,
    config: &ModelConfig,
) -> Result<(Var, Var, Vec<Var>)> {
    let (_, width) = tape.shape(h0);
    if width != config.hidden {
        return Err(Error::dimension(
            "agc_layer",
            tape.shape(h0),
            (tape.shape(h0).0, config.hidden),
        ));
    }
    let mut hops = Vec::with_capacity(config.hops);
    let mut cur = h0;
    for _ in 0..config.hops {
        let propagated = tape.matmul(a_norm, cur)?;
        let weighted = tape.matmul(propagated, layer.weight)?;
        cur = apply_nonlinearity(tape, weighted, config.nonlinearity);
        hops.push(cur);
    }

    let attention = match layer.score {
        HopScoreVars::Additive { weight, vector } => {
            let scores: Vec<Var> = hops
                .iter()
                .map(|&h| {
                    let hidden = tape.matmul(h, weight)?;
                    let squashed = tape.tanh(hidden);
                    tape.matmul(squashed, vector)
                })
                .collect::<Result<_>>()?;
            let stacked = tape.concat_cols(&scores)?;
            tape.softmax_rows(stacked)
        }
        HopScoreVars::Free { logits } => {
            let row = tape.transpose(logits);
            tape.softmax_rows(row)
        }
    };

    let mut combined: Option<Var> = None;
    for (i, &h) in hops.iter().enumerate() {
        let weight_col = tape.slice_cols(attention, i, i + 1)?;
        let term = match layer.score {
            HopScoreVars::Additive { .. } => tape.scale_rows(h, weight_col)?,
            HopScoreVars::Free { .. } => tape.scale_by(h, weight_col)?,
        };
        combined = Some(match combined {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok((combined.expect("hops >= 1"), attention, hops))
}

/// The full forward pass on an existing tape.
pub fn forward_on_tape(
    tape: &mut Tape,
    graph: &Graph,
    params: &ParamVars,
    config: &ModelConfig,
) -> Result<ForwardVars> {
    if graph.features().cols() != config.feature_dim {
        return Err(Error::dimension(
            "model_forward",
            graph.features().shape(),
            (graph.features().rows(), config.feature_dim),
        ));
    }
    let normalized = normalize_adjacency(graph.adjacency())?;
    let a_norm = tape.constant(normalized.matrix());
    let x = tape.constant(graph.features());
    let x_proj = tape.matmul(x, params.input_proj)?;

    // The first layer consumes the projected input; every later layer
    // consumes the previous output plus the projected input.
    let mut layer_hops = Vec::with_capacity(config.layers);
    let mut hop_attention = Vec::with_capacity(config.layers);
    let mut layer_outputs = Vec::with_capacity(config.layers);
    let mut prev = x_proj;
    for (l, layer) in params.layers.iter().enumerate() {
        let input = if l == 0 {
            x_proj
        } else {
            tape.add(prev, x_proj)?
        };
        let (gamma, attention, hops) = agc_layer_on_tape(tape, a_norm, input, layer, config)?;
        layer_hops.push(hops);
        hop_attention.push(attention);
        layer_outputs.push(gamma);
        prev = gamma;
    }

    let mut stack = vec![x_proj];
    stack.extend(&layer_outputs);
    let concatenated = tape.concat_cols(&stack)?;
    let combined_linear = tape.matmul(concatenated, params.combine_weight)?;
    let combined_biased = tape.add_row_broadcast(combined_linear, params.combine_bias)?;
    let combined = apply_nonlinearity(tape, combined_biased, config.nonlinearity);

    // Self-attention pooling: softmax over the node dimension turns each
    // subspace row into a distribution over nodes.
    let g_t = tape.transpose(combined);
    let transformed = tape.matmul(params.pool_transform, g_t)?;
    let squashed = tape.tanh(transformed);
    let pool_logits = tape.matmul(params.pool_heads, squashed)?;
    let pool_weights = tape.softmax_rows(pool_logits);
    let embedding = tape.matmul(pool_weights, combined)?;

    let flat = tape.reshape(embedding, 1, config.subspaces * config.hidden)?;
    let scores = tape.matmul(flat, params.class_weight)?;
    let logits = tape.add_row_broadcast(scores, params.class_bias)?;
    let probabilities = tape.softmax_rows(logits);

    Ok(ForwardVars {
        input_projection: x_proj,
        layer_hops,
        hop_attention,
        layer_outputs,
        combined,
        pool_logits,
        pool_weights,
        embedding,
        logits,
        probabilities,
    })
}

/// Class probabilities for one graph.
pub fn model_forward(
    graph: &Graph,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = params.enter(&mut tape, false);
    let fwd = forward_on_tape(&mut tape, graph, &pv, config)?;
    Ok(tape.to_tensor(fwd.probabilities))
}

/// Every intermediate of one forward pass, extracted as tensors.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub normalized_adjacency: Tensor,
    pub input_projection: Tensor,
    pub layer_hops: Vec<Vec<Tensor>>,
    pub hop_attention: Vec<Tensor>,
    pub layer_outputs: Vec<Tensor>,
    pub combined: Tensor,
    pub pool_logits: Tensor,
    pub pool_weights: Tensor,
    pub embedding: Tensor,
    pub logits: Tensor,
    pub probabilities: Tensor,
}

pub fn model_forward_trace(
    graph: &Graph,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<ForwardTrace> {
    let normalized = normalize_adjacency(graph.adjacency())?;
    let mut tape = Tape::new();
    let pv = params.enter(&mut tape, false);
    let fwd = forward_on_tape(&mut tape, graph, &pv, config)?;
    Ok(ForwardTrace {
        normalized_adjacency: normalized.matrix().clone(),
        input_projection: tape.to_tensor(fwd.input_projection),
        layer_hops: fwd
            .layer_hops
            .iter()
            .map(|hops| hops.iter().map(|&h| tape.to_tensor(h)).collect())
            .collect(),
        hop_attention: fwd.hop_attention.iter().map(|&v| tape.to_tensor(v)).collect(),
        layer_outputs: fwd.layer_outputs.iter().map(|&v| tape.to_tensor(v)).collect(),
        combined: tape.to_tensor(fwd.combined),
        pool_logits: tape.to_tensor(fwd.pool_logits),
        pool_weights: tape.to_tensor(fwd.pool_weights),
        embedding: tape.to_tensor(fwd.embedding),
        logits: tape.to_tensor(fwd.logits),
        probabilities: tape.to_tensor(fwd.probabilities),
    })
}

/// One AGC layer as a standalone operation.
pub fn agc_layer(
    a_norm: &NormalizedAdjacency,
    h0: &Tensor,
    layer: &AgcLayer,
    config: &ModelConfig,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let a = tape.constant(a_norm.matrix());
    let h = tape.constant(h0);
    let lv = LayerVars {
        weight: tape.constant(&layer.weight),
        score: match &layer.score {
            HopScore::Additive { weight, vector } => HopScoreVars::Additive {
                weight: tape.constant(weight),
                vector: tape.constant(vector),
            },
            HopScore::Free { logits } => HopScoreVars::Free {
                logits: tape.constant(logits),
            },
        },
    };
    let (out, _, _) = agc_layer_on_tape(&mut tape, a, h, &lv, config)?;
    Ok(tape.to_tensor(out))
}

/// The AGC module as a standalone operation: projection, residual layer
/// stack, and dense combination, yielding node embeddings `G`.
pub fn agc_module(
    a_norm: &NormalizedAdjacency,
    x: &Tensor,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = params.enter(&mut tape, false);
    let a = tape.constant(a_norm.matrix());
    let xv = tape.constant(x);
    let x_proj = tape.matmul(xv, pv.input_proj)?;
    let mut prev = x_proj;
    let mut outputs = Vec::new();
    for (l, layer) in pv.layers.iter().enumerate() {
        let input = if l == 0 { x_proj } else { tape.add(prev, x_proj)? };
        let (gamma, _, _) = agc_layer_on_tape(&mut tape, a, input, layer, config)?;
        outputs.push(gamma);
        prev = gamma;
    }
    let mut stack = vec![x_proj];
    stack.extend(outputs);
    let concatenated = tape.concat_cols(&stack)?;
    let lin = tape.matmul(concatenated, pv.combine_weight)?;
    let biased = tape.add_row_broadcast(lin, pv.combine_bias)?;
    let combined = apply_nonlinearity(&mut tape, biased, config.nonlinearity);
    Ok(tape.to_tensor(combined))
}

/// Self-attention pooling as a standalone operation: node embeddings `G`
/// to the matrix embedding `M`.
pub fn self_attention_pool(
    g: &Tensor,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Tensor> {
    if g.rows() == 0 {
        return Err(Error::Contract("cannot pool an empty graph".into()));
    }
    if params.pool_heads.shape() != (config.subspaces, config.hidden) {
        return Err(Error::dimension(
            "self_attention_pool",
            params.pool_heads.shape(),
            (config.subspaces, config.hidden),
        ));
    }
    let mut tape = Tape::new();
    let gv = tape.constant(g);
    let u1 = tape.constant(&params.pool_transform);
    let u2 = tape.constant(&params.pool_heads);
    let g_t = tape.transpose(gv);
    let transformed = tape.matmul(u1, g_t)?;
    let squashed = tape.tanh(transformed);
    let scores = tape.matmul(u2, squashed)?;
    let weights = tape.softmax_rows(scores);
    let m = tape.matmul(weights, gv)?;
    Ok(tape.to_tensor(m))
}

/// Classification head as a standalone operation: matrix embedding `M` to
/// class probabilities.
pub fn classify(m: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mv = tape.constant(m);
    let z = tape.constant(&params.class_weight);
    let c = tape.constant(&params.class_bias);
    let flat = tape.reshape(mv, 1, m.rows() * m.cols())?;
    let scores = tape.matmul(flat, z)?;
    let logits = tape.add_row_broadcast(scores, c)?;
    let probs = tape.softmax_rows(logits);
    Ok(tape.to_tensor(probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            hops: 2,
            layers: 2,
            hidden: 4,
            subspaces: 3,
            num_classes: 2,
            feature_dim: 3,
            nonlinearity: Nonlinearity::Relu,
            hop_attention: HopAttention::Additive,
        }
    }

    pub(crate) fn random_graph(rng: &mut ChaCha20Rng, n: usize, feature_dim: usize) -> Graph {
        let mut adj = Tensor::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.gen_bool(0.5) {
                    adj.set(i, j, 1.0);
                    adj.set(j, i, 1.0);
                }
            }
        }
        let mut feats = Tensor::zeros(n, feature_dim);
        for i in 0..n {
            let c = rng.gen_range(0..feature_dim);
            feats.set(i, c, 1.0);
        }
        Graph::new(adj, feats, 0).unwrap()
    }

    #[test]
    fn init_is_seed_deterministic_with_zero_biases_and_bounded_weights() {
        let config = small_config();
        let a = init_params(&config, 9).unwrap();
        let b = init_params(&config, 9).unwrap();
        assert_eq!(a, b, "same seed, bit-identical parameters");
        let c = init_params(&config, 10).unwrap();
        assert_ne!(a, c);

        assert!(a.combine_bias.data().iter().all(|&v| v == 0.0));
        assert!(a.class_bias.data().iter().all(|&v| v == 0.0));
        for (name, t) in a.named() {
            if name.ends_with("bias") {
                continue;
            }
            let bound = (6.0 / (t.rows() + t.cols()) as f64).sqrt();
            assert!(
                t.data().iter().all(|v| v.abs() <= bound),
                "{name} within its fan bound"
            );
        }
    }

    #[test]
    fn single_hop_layer_is_a_plain_convolution() {
        // With one hop the attention softmax is over a single value, so
        // the layer must equal relu(A_norm * H0 * W) computed by hand.
        let mut config = small_config();
        config.hops = 1;
        let params = init_params(&config, 3).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let graph = random_graph(&mut rng, 5, config.feature_dim);
        let norm = normalize_adjacency(graph.adjacency()).unwrap();

        let h0_data: Vec<f64> = (0..5 * config.hidden)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let h0 = Tensor::new(5, config.hidden, h0_data).unwrap();

        let out = agc_layer(&norm, &h0, &params.layers[0], &config).unwrap();

        let n = 5;
        let h = config.hidden;
        let w = &params.layers[0].weight;
        for i in 0..n {
            for j in 0..h {
                let mut acc = 0.0;
                for kk in 0..h {
                    let mut prop = 0.0;
                    for u in 0..n {
                        prop += norm.matrix().get(i, u) * h0.get(u, kk);
                    }
                    acc += prop * w.get(kk, j);
                }
                let expected = acc.max(0.0);
                assert!(
                    (out.get(i, j) - expected).abs() <= 1e-12,
                    "plain convolution at ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn hop_attention_rows_are_distributions() {
        let config = small_config();
        let params = init_params(&config, 21).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        let graph = random_graph(&mut rng, 6, config.feature_dim);
        let trace = model_forward_trace(&graph, &params, &config).unwrap();
        for alpha in &trace.hop_attention {
            assert_eq!(alpha.cols(), config.hops);
            for i in 0..alpha.rows() {
                let sum: f64 = (0..alpha.cols()).map(|j| alpha.get(i, j)).sum();
                assert!((sum - 1.0).abs() <= 1e-12);
                assert!((0..alpha.cols()).all(|j| alpha.get(i, j) >= 0.0));
            }
        }
    }

    #[test]
    fn free_hop_attention_also_works() {
        let mut config = small_config();
        config.hop_attention = HopAttention::Free;
        let params = init_params(&config, 30).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let graph = random_graph(&mut rng, 4, config.feature_dim);
        let trace = model_forward_trace(&graph, &params, &config).unwrap();
        for alpha in &trace.hop_attention {
            assert_eq!(alpha.shape(), (1, config.hops));
            let sum: f64 = alpha.data().iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
        let probs = trace.probabilities;
        assert!((probs.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn module_output_shape_is_nodes_by_hidden() {
        let config = small_config();
        let params = init_params(&config, 40).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        for n in [1, 3, 7] {
            let graph = random_graph(&mut rng, n, config.feature_dim);
            let norm = normalize_adjacency(graph.adjacency()).unwrap();
            let g = agc_module(&norm, graph.features(), &params, &config).unwrap();
            assert_eq!(g.shape(), (n, config.hidden));
        }
    }

    #[test]
    fn module_is_permutation_equivariant() {
        let config = small_config();
        let params = init_params(&config, 50).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(51);
        for _ in 0..20 {
            let n = rng.gen_range(2..8);
            let graph = random_graph(&mut rng, n, config.feature_dim);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let permuted = graph.permuted(&perm).unwrap();

            let g = agc_module(
                &normalize_adjacency(graph.adjacency()).unwrap(),
                graph.features(),
                &params,
                &config,
            )
            .unwrap();
            let gp = agc_module(
                &normalize_adjacency(permuted.adjacency()).unwrap(),
                permuted.features(),
                &params,
                &config,
            )
            .unwrap();
            for i in 0..n {
                for c in 0..config.hidden {
                    assert!(
                        (gp.get(i, c) - g.get(perm[i], c)).abs() <= 1e-9,
                        "row equivariance"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_pool_heads_reduce_to_mean_pooling() {
        let config = small_config();
        let mut params = init_params(&config, 60).unwrap();
        params.pool_heads = Tensor::zeros(config.subspaces, config.hidden).with_grad();
        let mut rng = ChaCha20Rng::seed_from_u64(61);
        let graph = random_graph(&mut rng, 6, config.feature_dim);
        let norm = normalize_adjacency(graph.adjacency()).unwrap();
        let g = agc_module(&norm, graph.features(), &params, &config).unwrap();
        let m = self_attention_pool(&g, &params, &config).unwrap();

        for j in 0..config.hidden {
            let mean: f64 = (0..g.rows()).map(|i| g.get(i, j)).sum::<f64>() / g.rows() as f64;
            for r in 0..config.subspaces {
                assert!((m.get(r, j) - mean).abs() <= 1e-12, "column mean pooling");
            }
        }
    }

    #[test]
    fn single_node_pooling_copies_the_node() {
        let config = small_config();
        let params = init_params(&config, 70).unwrap();
        let g = Tensor::from_rows(&[vec![0.3, -0.4, 0.5, 0.9]]).unwrap();
        let m = self_attention_pool(&g, &params, &config).unwrap();
        assert_eq!(m.shape(), (config.subspaces, config.hidden));
        for r in 0..config.subspaces {
            for c in 0..config.hidden {
                assert!((m.get(r, c) - g.get(0, c)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn pool_weights_rows_are_distributions() {
        let config = small_config();
        let params = init_params(&config, 80).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(81);
        let graph = random_graph(&mut rng, 5, config.feature_dim);
        let trace = model_forward_trace(&graph, &params, &config).unwrap();
        let b = &trace.pool_weights;
        assert_eq!(b.shape(), (config.subspaces, 5));
        for r in 0..b.rows() {
            let sum: f64 = (0..b.cols()).map(|c| b.get(r, c)).sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn classifier_laws() {
        let config = small_config();
        let mut params = init_params(&config, 90).unwrap();
        let m = Tensor::from_rows(&[
            vec![0.1, 0.2, 0.3, 0.4],
            vec![-0.1, 0.0, 0.1, 0.2],
            vec![0.5, -0.5, 0.25, 0.0],
        ])
        .unwrap();

        let probs = classify(&m, &params).unwrap();
        assert!((probs.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);

        // Zero weights and bias: uniform over classes.
        let uniform_params = {
            let mut p = params.clone();
            p.class_weight =
                Tensor::zeros(config.subspaces * config.hidden, config.num_classes).with_grad();
            p.class_bias = Tensor::zeros(1, config.num_classes).with_grad();
            p
        };
        let probs = classify(&m, &uniform_params).unwrap();
        for &p in probs.data() {
            assert!((p - 1.0 / config.num_classes as f64).abs() <= 1e-12);
        }

        // Adding a constant to every bias entry keeps the argmax.
        let before = classify(&m, &params).unwrap();
        let argmax_before = before
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        for v in params.class_bias.data_mut() {
            *v += 3.7;
        }
        let after = classify(&m, &params).unwrap();
        let argmax_after = after
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax_before, argmax_after);
    }

    #[test]
    fn forward_is_deterministic_and_handles_single_nodes() {
        let config = small_config();
        let params = init_params(&config, 100).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(101);
        let graph = random_graph(&mut rng, 7, config.feature_dim);
        let a = model_forward(&graph, &params, &config).unwrap();
        let b = model_forward(&graph, &params, &config).unwrap();
        assert_eq!(a.data(), b.data(), "bit-identical forward");

        let single = random_graph(&mut rng, 1, config.feature_dim);
        let p = model_forward(&single, &params, &config).unwrap();
        assert_eq!(p.shape(), (1, config.num_classes));
        assert!((p.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(p.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn forward_is_permutation_invariant() {
        let config = small_config();
        let params = init_params(&config, 110).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(111);
        for _ in 0..20 {
            let n = rng.gen_range(2..8);
            let graph = random_graph(&mut rng, n, config.feature_dim);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let permuted = graph.permuted(&perm).unwrap();
            let p = model_forward(&graph, &params, &config).unwrap();
            let q = model_forward(&permuted, &params, &config).unwrap();
            assert!(p.max_abs_diff(&q) <= 1e-9, "label order must not matter");
        }
    }

    #[test]
    fn feature_width_mismatch_is_reported() {
        let config = small_config();
        let params = init_params(&config, 120).unwrap();
        let graph = Graph::new(Tensor::zeros(2, 2), Tensor::zeros(2, 5), 0).unwrap();
        assert!(model_forward(&graph, &params, &config).is_err());
    }
}
