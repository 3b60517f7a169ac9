//! Straight-line scalar oracle for the model forward pass.
//!
//! Everything here is computed with explicit loops over `Vec<Vec<f64>>`,
//! on purpose sharing no code with the tensor engine: the duplication is
//! what makes agreement between the two a meaningful check. Softmax is
//! even computed by a different algebraic route (no max subtraction; the
//! hand-checkable scale keeps the exponentials tame).

use crate::graph::Graph;
use crate::model::{
    AgcLayer, HopAttention, HopScore, ModelConfig, ModelParams, Nonlinearity,
};
use crate::Tensor;

pub type Mat = Vec<Vec<f64>>;

/// Scalar-loop parameters for the oracle; additive hop scoring, one entry
/// per layer.
#[derive(Debug, Clone)]
pub struct ReferenceParams {
    pub input_proj: Mat,
    pub layer_weights: Vec<Mat>,
    pub score_weights: Vec<Mat>,
    pub score_vectors: Vec<Vec<f64>>,
    pub combine_weight: Mat,
    pub combine_bias: Vec<f64>,
    pub pool_transform: Mat,
    pub pool_heads: Mat,
    pub class_weight: Mat,
    pub class_bias: Vec<f64>,
}

/// Every intermediate quantity of one oracle forward pass.
#[derive(Debug, Clone)]
pub struct ReferenceTranscript {
    pub normalized_adjacency: Mat,
    pub input_projection: Mat,
    pub layer_hops: Vec<Vec<Mat>>,
    pub hop_attention: Vec<Mat>,
    pub layer_outputs: Vec<Mat>,
    pub combined: Mat,
    pub pool_logits: Mat,
    pub pool_weights: Mat,
    pub embedding: Mat,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[i][t] * b[t][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let mut exps = vec![0.0; row.len()];
    let mut sum = 0.0;
    for (e, &x) in exps.iter_mut().zip(row) {
        *e = x.exp();
        sum += *e;
    }
    exps.iter().map(|e| e / sum).collect()
}

fn nonlin(x: f64, relu: bool) -> f64 {
    if relu {
        if x > 0.0 {
            x
        } else {
            0.0
        }
    } else {
        x.tanh()
    }
}

/// Compute every equation of the forward pass with scalar arithmetic.
///
/// `adjacency` is the raw symmetric binary matrix; `hops` is the number of
/// propagation steps per layer; `relu` picks the hidden nonlinearity.
pub fn reference_forward(
    adjacency: &Mat,
    features: &Mat,
    params: &ReferenceParams,
    hops: usize,
    relu: bool,
) -> ReferenceTranscript {
    let n = adjacency.len();
    let h = params.layer_weights[0].len();
    let num_layers = params.layer_weights.len();

    // Normalized propagation operator: (A + I) with each column divided
    // by its sum.
    let mut norm = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut col_sum = 1.0;
        for i in 0..n {
            col_sum += adjacency[i][j];
        }
        for i in 0..n {
            let tilde = adjacency[i][j] + if i == j { 1.0 } else { 0.0 };
            norm[i][j] = tilde / col_sum;
        }
    }

    let x_proj = mat_mul(features, &params.input_proj);

    let mut layer_hops = Vec::new();
    let mut hop_attention = Vec::new();
    let mut layer_outputs: Vec<Mat> = Vec::new();
    let mut prev = x_proj.clone();
    for l in 0..num_layers {
        let input = if l == 0 {
            prev.clone()
        } else {
            let mut sum = vec![vec![0.0; h]; n];
            for i in 0..n {
                for c in 0..h {
                    sum[i][c] = prev[i][c] + x_proj[i][c];
                }
            }
            sum
        };

        let mut hop_mats: Vec<Mat> = Vec::with_capacity(hops);
        let mut cur = input;
        for _ in 0..hops {
            let propagated = mat_mul(&norm, &cur);
            let weighted = mat_mul(&propagated, &params.layer_weights[l]);
            let mut activated = vec![vec![0.0; h]; n];
            for i in 0..n {
                for c in 0..h {
                    activated[i][c] = nonlin(weighted[i][c], relu);
                }
            }
            hop_mats.push(activated.clone());
            cur = activated;
        }

        // Additive scoring per node: tanh(h W) . v for each hop output.
        let mut scores = vec![vec![0.0; hops]; n];
        for (hop, hop_mat) in hop_mats.iter().enumerate() {
            let hidden = mat_mul(hop_mat, &params.score_weights[l]);
            for i in 0..n {
                let mut acc = 0.0;
                for c in 0..h {
                    acc += hidden[i][c].tanh() * params.score_vectors[l][c];
                }
                scores[i][hop] = acc;
            }
        }
        let alpha: Mat = scores.iter().map(|row| softmax_row(row)).collect();

        let mut gamma = vec![vec![0.0; h]; n];
        for i in 0..n {
            for (hop, hop_mat) in hop_mats.iter().enumerate() {
                for c in 0..h {
                    gamma[i][c] += alpha[i][hop] * hop_mat[i][c];
                }
            }
        }

        layer_hops.push(hop_mats);
        hop_attention.push(alpha);
        layer_outputs.push(gamma.clone());
        prev = gamma;
    }

    // Dense combination of the stacked representations.
    let stacked_width = (num_layers + 1) * h;
    let mut stacked = vec![vec![0.0; stacked_width]; n];
    for i in 0..n {
        for c in 0..h {
            stacked[i][c] = x_proj[i][c];
        }
        for (l, gamma) in layer_outputs.iter().enumerate() {
            for c in 0..h {
                stacked[i][(l + 1) * h + c] = gamma[i][c];
            }
        }
    }
    let combined_linear = mat_mul(&stacked, &params.combine_weight);
    let mut combined = vec![vec![0.0; h]; n];
    for i in 0..n {
        for c in 0..h {
            combined[i][c] = nonlin(combined_linear[i][c] + params.combine_bias[c], relu);
        }
    }

    // Pooling scores over the transposed node embeddings.
    let r = params.pool_heads.len();
    let mut squashed = vec![vec![0.0; n]; h];
    for c in 0..h {
        for i in 0..n {
            let mut acc = 0.0;
            for t in 0..h {
                acc += params.pool_transform[c][t] * combined[i][t];
            }
            squashed[c][i] = acc.tanh();
        }
    }
    let mut pool_logits = vec![vec![0.0; n]; r];
    for s in 0..r {
        for i in 0..n {
            let mut acc = 0.0;
            for c in 0..h {
                acc += params.pool_heads[s][c] * squashed[c][i];
            }
            pool_logits[s][i] = acc;
        }
    }
    let pool_weights: Mat = pool_logits.iter().map(|row| softmax_row(row)).collect();
    let embedding = mat_mul(&pool_weights, &combined);

    // Classifier over the row-major flattened embedding.
    let num_classes = params.class_bias.len();
    let mut logits = params.class_bias.clone();
    for (s, emb_row) in embedding.iter().enumerate() {
        for (c, &value) in emb_row.iter().enumerate() {
            let flat_index = s * h + c;
            for (class, logit) in logits.iter_mut().enumerate() {
                *logit += value * params.class_weight[flat_index][class];
            }
        }
    }
    debug_assert_eq!(logits.len(), num_classes);
    let probabilities = softmax_row(&logits);

    ReferenceTranscript {
        normalized_adjacency: norm,
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
    }
}

// ── the fixed instance ──────────────────────────────────────────────
//
// A 3-node path graph with hand-set small parameters; both the engine
// and the oracle are built from the same literals, so any disagreement
// is a computation bug on one side.

const FIXED_X: [[f64; 2]; 3] = [[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
const FIXED_INPUT_PROJ: [[f64; 3]; 2] = [[0.1, -0.2, 0.3], [0.2, 0.1, -0.1]];
const FIXED_LAYER_W: [[[f64; 3]; 3]; 2] = [
    [[0.2, 0.1, 0.0], [-0.1, 0.3, 0.1], [0.0, -0.2, 0.2]],
    [[0.1, -0.1, 0.2], [0.2, 0.2, -0.1], [-0.2, 0.1, 0.1]],
];
const FIXED_SCORE_W: [[[f64; 3]; 3]; 2] = [
    [[0.1, 0.2, -0.1], [0.0, 0.1, 0.2], [0.2, -0.1, 0.1]],
    [[-0.1, 0.1, 0.0], [0.1, 0.0, 0.2], [0.0, 0.2, -0.1]],
];
const FIXED_SCORE_V: [[f64; 3]; 2] = [[0.3, -0.2, 0.1], [0.1, 0.2, -0.3]];
const FIXED_COMBINE_W: [[f64; 3]; 9] = [
    [0.10, -0.05, 0.20],
    [0.00, 0.15, -0.10],
    [-0.20, 0.10, 0.05],
    [0.15, 0.00, -0.05],
    [0.05, -0.15, 0.10],
    [-0.10, 0.20, 0.00],
    [0.20, 0.05, -0.15],
    [-0.05, 0.10, 0.15],
    [0.10, -0.20, 0.05],
];
const FIXED_COMBINE_B: [f64; 3] = [0.05, -0.05, 0.10];
const FIXED_POOL_T: [[f64; 3]; 3] = [[0.2, 0.0, -0.1], [0.1, 0.1, 0.0], [-0.2, 0.3, 0.1]];
const FIXED_POOL_H: [[f64; 3]; 2] = [[0.5, -0.3, 0.2], [-0.1, 0.4, 0.3]];
const FIXED_CLASS_W: [[f64; 2]; 6] = [
    [0.3, -0.3],
    [-0.2, 0.2],
    [0.1, 0.4],
    [0.4, -0.1],
    [-0.3, 0.1],
    [0.2, 0.3],
];
const FIXED_CLASS_B: [f64; 2] = [0.01, -0.01];

fn rows_to_mat<const C: usize>(rows: &[[f64; C]]) -> Mat {
    rows.iter().map(|r| r.to_vec()).collect()
}

pub fn fixed_config() -> ModelConfig {
    ModelConfig {
        hops: 2,
        layers: 2,
        hidden: 3,
        subspaces: 2,
        num_classes: 2,
        feature_dim: 2,
        nonlinearity: Nonlinearity::Relu,
        hop_attention: HopAttention::Additive,
    }
}

/// The 3-node path instance: graph, engine parameters, and oracle
/// parameters, all from the same literals.
pub fn fixed_instance() -> (Graph, ModelParams, ReferenceParams) {
    let adjacency =
        Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]])
            .unwrap();
    let features = Tensor::from_rows(&rows_to_mat(&FIXED_X)).unwrap();
    let graph = Graph::new(adjacency, features, 0).unwrap();

    let tensor_of = |rows: &Mat| Tensor::from_rows(rows).unwrap().with_grad();
    let column_of = |v: &[f64]| {
        Tensor::new(v.len(), 1, v.to_vec()).unwrap().with_grad()
    };
    let row_of = |v: &[f64]| Tensor::new(1, v.len(), v.to_vec()).unwrap().with_grad();

    let reference = ReferenceParams {
        input_proj: rows_to_mat(&FIXED_INPUT_PROJ),
        layer_weights: FIXED_LAYER_W.iter().map(|m| rows_to_mat(m)).collect(),
        score_weights: FIXED_SCORE_W.iter().map(|m| rows_to_mat(m)).collect(),
        score_vectors: FIXED_SCORE_V.iter().map(|v| v.to_vec()).collect(),
        combine_weight: rows_to_mat(&FIXED_COMBINE_W),
        combine_bias: FIXED_COMBINE_B.to_vec(),
        pool_transform: rows_to_mat(&FIXED_POOL_T),
        pool_heads: rows_to_mat(&FIXED_POOL_H),
        class_weight: rows_to_mat(&FIXED_CLASS_W),
        class_bias: FIXED_CLASS_B.to_vec(),
    };

    let params = ModelParams {
        input_proj: tensor_of(&reference.input_proj),
        layers: (0..2)
            .map(|l| AgcLayer {
                weight: tensor_of(&reference.layer_weights[l]),
                score: HopScore::Additive {
                    weight: tensor_of(&reference.score_weights[l]),
                    vector: column_of(&reference.score_vectors[l]),
                },
            })
            .collect(),
        combine_weight: tensor_of(&reference.combine_weight),
        combine_bias: row_of(&reference.combine_bias),
        pool_transform: tensor_of(&reference.pool_transform),
        pool_heads: tensor_of(&reference.pool_heads),
        class_weight: tensor_of(&reference.class_weight),
        class_bias: row_of(&reference.class_bias),
    };

    (graph, params, reference)
}

/// Largest absolute entrywise difference between an engine tensor and an
/// oracle matrix; infinite on any shape mismatch.
pub fn matrix_deviation(tensor: &Tensor, mat: &Mat) -> f64 {
    let rows = mat.len();
    let cols = mat.first().map_or(0, Vec::len);
    if tensor.shape() != (rows, cols) {
        return f64::INFINITY;
    }
    let mut worst: f64 = 0.0;
    for (i, row) in mat.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            worst = worst.max((tensor.get(i, j) - v).abs());
        }
    }
    worst
}

/// Per-intermediate deviations between an engine trace and an oracle
/// transcript, in forward order.
pub fn compare_trace(
    trace: &crate::model::ForwardTrace,
    transcript: &ReferenceTranscript,
) -> Vec<(String, f64)> {
    let mut out = vec![
        (
            "normalized_adjacency".to_string(),
            matrix_deviation(&trace.normalized_adjacency, &transcript.normalized_adjacency),
        ),
        (
            "input_projection".to_string(),
            matrix_deviation(&trace.input_projection, &transcript.input_projection),
        ),
    ];
    for (l, hops) in transcript.layer_hops.iter().enumerate() {
        for (k, mat) in hops.iter().enumerate() {
            out.push((
                format!("layer{l}.hop{k}"),
                matrix_deviation(&trace.layer_hops[l][k], mat),
            ));
        }
        out.push((
            format!("layer{l}.attention"),
            matrix_deviation(&trace.hop_attention[l], &transcript.hop_attention[l]),
        ));
        out.push((
            format!("layer{l}.output"),
            matrix_deviation(&trace.layer_outputs[l], &transcript.layer_outputs[l]),
        ));
    }
    out.push((
        "combined".to_string(),
        matrix_deviation(&trace.combined, &transcript.combined),
    ));
    out.push((
        "pool_logits".to_string(),
        matrix_deviation(&trace.pool_logits, &transcript.pool_logits),
    ));
    out.push((
        "pool_weights".to_string(),
        matrix_deviation(&trace.pool_weights, &transcript.pool_weights),
    ));
    out.push((
        "embedding".to_string(),
        matrix_deviation(&trace.embedding, &transcript.embedding),
    ));
    out.push((
        "logits".to_string(),
        matrix_deviation(&trace.logits, &vec![transcript.logits.clone()]),
    ));
    out.push((
        "probabilities".to_string(),
        matrix_deviation(&trace.probabilities, &vec![transcript.probabilities.clone()]),
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::model_forward_trace;

    fn fixed_transcript() -> ReferenceTranscript {
        let (graph, _, reference) = fixed_instance();
        let adjacency: Mat = (0..3)
            .map(|i| (0..3).map(|j| graph.adjacency().get(i, j)).collect())
            .collect();
        let features: Mat = (0..3)
            .map(|i| (0..2).map(|j| graph.features().get(i, j)).collect())
            .collect();
        reference_forward(&adjacency, &features, &reference, 2, true)
    }

    #[test]
    fn engine_matches_oracle_at_every_intermediate() {
        let (graph, params, _) = fixed_instance();
        let config = fixed_config();
        let trace = model_forward_trace(&graph, &params, &config).unwrap();
        let transcript = fixed_transcript();
        for (name, deviation) in compare_trace(&trace, &transcript) {
            assert!(
                deviation <= 1e-10,
                "{name} deviates by {deviation:e}"
            );
        }
    }

    #[test]
    fn transcript_is_reproducible() {
        let a = fixed_transcript();
        let b = fixed_transcript();
        assert_eq!(a.probabilities, b.probabilities);
        assert_eq!(a.embedding, b.embedding);
        assert_eq!(a.combined, b.combined);
    }

    #[test]
    fn transcript_matches_frozen_values() {
        // Values computed once by this oracle and frozen; they pin both
        // sides against silently drifting together.
        let t = fixed_transcript();
        let expected_probs = [0.5000308062353304, 0.49996919376466964];
        let expected_logits = [0.07828591945246408, 0.07816269451098666];
        let expected_embedding = [
            [0.03508686327978661, 0.0, 0.1459473479764101],
            [0.03491124885996002, 0.0, 0.14600313063451537],
        ];
        for (got, want) in t.probabilities.iter().zip(expected_probs) {
            assert!((got - want).abs() <= 1e-12);
        }
        for (got, want) in t.logits.iter().zip(expected_logits) {
            assert!((got - want).abs() <= 1e-12);
        }
        for (row, want_row) in t.embedding.iter().zip(expected_embedding) {
            for (got, want) in row.iter().zip(want_row) {
                assert!((got - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_pooling_shows_uniform_weights_and_column_means() {
        // One hop, zeroed pooling heads: B is uniform over nodes and M's
        // rows are the column means of the node embeddings.
        let (graph, _, mut reference) = fixed_instance();
        for row in &mut reference.pool_heads {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
        let adjacency: Mat = (0..3)
            .map(|i| (0..3).map(|j| graph.adjacency().get(i, j)).collect())
            .collect();
        let features: Mat = (0..3)
            .map(|i| (0..2).map(|j| graph.features().get(i, j)).collect())
            .collect();
        let transcript = reference_forward(&adjacency, &features, &reference, 1, true);

        for row in &transcript.pool_weights {
            for &w in row {
                assert!((w - 1.0 / 3.0).abs() <= 1e-15);
            }
        }
        for (s, emb_row) in transcript.embedding.iter().enumerate() {
            for (c, &v) in emb_row.iter().enumerate() {
                let mean: f64 =
                    transcript.combined.iter().map(|r| r[c]).sum::<f64>() / 3.0;
                assert!((v - mean).abs() <= 1e-15, "subspace {s} column {c}");
            }
        }
    }
}
