//! Independent oracles for the engine and the model: finite-difference
//! gradient checks, the straight-line transcript comparison, permutation
//! invariance, and the mean-pooling degeneracy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::Result;
use crate::graph::Graph;
use crate::model::{
    forward_on_tape, model_forward, model_forward_trace, init_params, HopAttention,
    ModelConfig, ModelParams, Nonlinearity,
};
use crate::reference::{compare_trace, fixed_config, fixed_instance, reference_forward, Mat};
use crate::tape::finite_difference_grad;
use crate::{Tape, Tensor};

/// Forward-agreement tolerance against the scalar oracle (pure 64-bit
/// arithmetic on both sides).
pub const REFERENCE_TOL: f64 = 1e-10;
/// Gradient-check tolerance (the truncation floor of central differences
/// at eps 1e-5 in f64).
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_EPS: f64 = 1e-5;
pub const PERMUTATION_TOL: f64 = 1e-9;
pub const MEAN_POOL_TOL: f64 = 1e-12;

/// The model configuration the standard verification commands run with.
pub fn verification_config() -> ModelConfig {
    ModelConfig {
        hops: 3,
        layers: 2,
        hidden: 8,
        subspaces: 4,
        num_classes: 2,
        feature_dim: 4,
        nonlinearity: Nonlinearity::Relu,
        hop_attention: HopAttention::Additive,
    }
}

fn random_graph(rng: &mut ChaCha20Rng, n: usize, feature_dim: usize) -> Graph {
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
    Graph::new(adj, feats, 0).expect("construction is valid")
}

/// Cross-entropy loss value of one forward pass, without gradients.
pub fn model_loss_value(
    graph: &Graph,
    params: &ModelParams,
    config: &ModelConfig,
    label: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = params.enter(&mut tape, false);
    let fwd = forward_on_tape(&mut tape, graph, &pv, config)?;
    let loss = tape.neg_log_entry(fwd.probabilities, label)?;
    Ok(tape.value(loss)[0])
}

/// Backward-pass gradients of the cross-entropy loss for every parameter,
/// in [`ModelParams::named`] order.
pub fn model_backward_grads(
    graph: &Graph,
    params: &ModelParams,
    config: &ModelConfig,
    label: usize,
) -> Result<Vec<(String, Tensor)>> {
    let mut tape = Tape::new();
    let pv = params.enter(&mut tape, true);
    let fwd = forward_on_tape(&mut tape, graph, &pv, config)?;
    let loss = tape.neg_log_entry(fwd.probabilities, label)?;
    tape.backward(loss)?;
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    names
        .into_iter()
        .zip(pv.in_named_order())
        .map(|(name, var)| Ok((name, tape.grad_tensor(var)?)))
        .collect()
}

/// Worst entrywise relative error between two same-shaped tensors, with a
/// small-denominator guard so near-zero gradients compare by absolute
/// error instead.
pub fn worst_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub seed: u64,
    /// Worst relative error per parameter tensor, in named order.
    pub per_tensor: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() <= GRADCHECK_TOL
    }
}

/// Check every parameter gradient of the model against central finite
/// differences on one random 6-node graph derived from `seed`.
pub fn gradcheck_model(config: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let graph = random_graph(&mut rng, 6, config.feature_dim);
    let label = rng.gen_range(0..config.num_classes);
    let params = init_params(config, seed)?;

    let analytic = model_backward_grads(&graph, &params, config, label)?;

    let mut per_tensor = Vec::with_capacity(analytic.len());
    let tensor_count = params.named().len();
    for idx in 0..tensor_count {
        let at = params.named()[idx].1.clone();
        let mut scratch = params.clone();
        let fd = finite_difference_grad(
            |t| {
                *scratch.named_mut()[idx].1 = t.clone();
                model_loss_value(&graph, &scratch, config, label)
                    .expect("forward pass on a valid instance")
            },
            &at,
            GRADCHECK_EPS,
        );
        let (name, backward) = &analytic[idx];
        per_tensor.push((name.clone(), worst_relative_error(backward, &fd)));
    }
    Ok(GradCheckReport { seed, per_tensor })
}

#[derive(Debug, Clone)]
pub struct PermutationReport {
    pub trials: usize,
    pub worst_deviation: f64,
}

impl PermutationReport {
    pub fn passed(&self) -> bool {
        self.worst_deviation <= PERMUTATION_TOL
    }
}

/// Random graphs against random node relabelings: final class
/// probabilities must not depend on node order.
pub fn permutation_suite(trials: usize, seed: u64) -> Result<PermutationReport> {
    let config = verification_config();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let params = init_params(&config, seed.wrapping_add(trial as u64))?;
        let n = rng.gen_range(2..=10);
        let graph = random_graph(&mut rng, n, config.feature_dim);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let permuted = graph.permuted(&perm)?;
        let p = model_forward(&graph, &params, &config)?;
        let q = model_forward(&permuted, &params, &config)?;
        worst = worst.max(p.max_abs_diff(&q));
    }
    Ok(PermutationReport {
        trials,
        worst_deviation: worst,
    })
}

/// With zeroed pooling heads the matrix embedding must equal the column
/// means of the node embeddings. Returns the worst deviation over several
/// random graphs.
pub fn mean_pool_deviation(seed: u64) -> Result<f64> {
    let config = verification_config();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let mut params = init_params(&config, seed.wrapping_add(trial))?;
        params.pool_heads = Tensor::zeros(config.subspaces, config.hidden).with_grad();
        let n = rng.gen_range(1..=9);
        let graph = random_graph(&mut rng, n, config.feature_dim);
        let trace = model_forward_trace(&graph, &params, &config)?;
        let g = &trace.combined;
        for j in 0..config.hidden {
            let mut mean = 0.0;
            for i in 0..g.rows() {
                mean += g.get(i, j);
            }
            mean /= g.rows() as f64;
            for s in 0..config.subspaces {
                worst = worst.max((trace.embedding.get(s, j) - mean).abs());
            }
        }
    }
    Ok(worst)
}

/// Engine-versus-oracle deviations on the fixed 3-node instance.
pub fn reference_deviations() -> Result<Vec<(String, f64)>> {
    let (graph, params, reference) = fixed_instance();
    let config = fixed_config();
    let trace = model_forward_trace(&graph, &params, &config)?;
    let n = graph.node_count();
    let adjacency: Mat = (0..n)
        .map(|i| (0..n).map(|j| graph.adjacency().get(i, j)).collect())
        .collect();
    let features: Mat = (0..n)
        .map(|i| {
            (0..graph.features().cols())
                .map(|j| graph.features().get(i, j))
                .collect()
        })
        .collect();
    let transcript = reference_forward(&adjacency, &features, &reference, config.hops, true);
    Ok(compare_trace(&trace, &transcript))
}

/// Everything `verify` checks, with per-section outcomes.
#[derive(Debug, Clone)]
pub struct VerificationReport {
    pub reference: Vec<(String, f64)>,
    pub gradchecks: Vec<GradCheckReport>,
    pub permutation: PermutationReport,
    pub mean_pool_worst: f64,
}

impl VerificationReport {
    pub fn reference_worst(&self) -> f64 {
        self.reference.iter().map(|(_, d)| *d).fold(0.0, f64::max)
    }

    pub fn gradcheck_worst(&self) -> f64 {
        self.gradchecks.iter().map(GradCheckReport::worst).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.reference_worst() <= REFERENCE_TOL
            && self.gradchecks.iter().all(GradCheckReport::passed)
            && self.permutation.passed()
            && self.mean_pool_worst <= MEAN_POOL_TOL
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
        out.push_str(&format!(
            "reference transcript: worst deviation {:.3e} (tol {:.0e}) .. {}\n",
            self.reference_worst(),
            REFERENCE_TOL,
            mark(self.reference_worst() <= REFERENCE_TOL)
        ));
        for report in &self.gradchecks {
            out.push_str(&format!(
                "gradcheck seed {}: worst relative error {:.3e} (tol {:.0e}) .. {}\n",
                report.seed,
                report.worst(),
                GRADCHECK_TOL,
                mark(report.passed())
            ));
            for (name, err) in &report.per_tensor {
                out.push_str(&format!("    {name}: {err:.3e}\n"));
            }
        }
        out.push_str(&format!(
            "permutation invariance: {} trials, worst deviation {:.3e} (tol {:.0e}) .. {}\n",
            self.permutation.trials,
            self.permutation.worst_deviation,
            PERMUTATION_TOL,
            mark(self.permutation.passed())
        ));
        out.push_str(&format!(
            "mean-pool degeneracy: worst deviation {:.3e} (tol {:.0e}) .. {}\n",
            self.mean_pool_worst,
            MEAN_POOL_TOL,
            mark(self.mean_pool_worst <= MEAN_POOL_TOL)
        ));
        out
    }
}

/// Run the full verification battery: transcript, gradient checks over
/// five seeds, 100 permutation trials, and the mean-pool degeneracy.
pub fn run_verification(seed: u64) -> Result<VerificationReport> {
    let config = verification_config();
    let gradchecks = (0..5)
        .map(|s| gradcheck_model(&config, seed.wrapping_add(s)))
        .collect::<Result<Vec<_>>>()?;
    Ok(VerificationReport {
        reference: reference_deviations()?,
        gradchecks,
        permutation: permutation_suite(100, seed)?,
        mean_pool_worst: mean_pool_deviation(seed)?,
    })
}
