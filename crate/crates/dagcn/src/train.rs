//! Supervised training: cross-entropy loss, Adam, the mini-batch epoch
//! loop over variable-size graphs, and the cross-validation driver.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Dataset;
use crate::kfold::{stratified_kfold, stratified_kfold_labels};
use crate::model::{
    forward_on_tape, init_params, HopAttention, ModelConfig, ModelParams, Nonlinearity,
};
use crate::tape::Var;
use crate::{Tape, Tensor};

/// Dataset-independent model settings; the class count and feature width
/// are resolved from the dataset when training starts.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelSettings {
    pub hops: usize,
    pub layers: usize,
    pub hidden: usize,
    pub subspaces: usize,
    pub nonlinearity: Nonlinearity,
    pub hop_attention: HopAttention,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            hops: 3,
            layers: 2,
            hidden: 64,
            subspaces: 8,
            nonlinearity: Nonlinearity::Relu,
            hop_attention: HopAttention::Additive,
        }
    }
}

impl ModelSettings {
    pub fn resolve(&self, num_classes: usize, feature_dim: usize) -> ModelConfig {
        ModelConfig {
            hops: self.hops,
            layers: self.layers,
            hidden: self.hidden,
            subspaces: self.subspaces,
            num_classes,
            feature_dim,
            nonlinearity: self.nonlinearity,
            hop_attention: self.hop_attention,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub folds: usize,
    pub seed: u64,
    /// When set, each fold picks its learning rate from this grid on the
    /// training data only.
    pub lr_grid: Option<Vec<f64>>,
    pub model: ModelSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            l2: 1e-4,
            batch_size: 50,
            epochs: 200,
            folds: 10,
            seed: 1,
            lr_grid: None,
            model: ModelSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        if let Some(grid) = &self.lr_grid {
            if grid.is_empty() || grid.iter().any(|&lr| lr <= 0.0) {
                return Err(Error::Config(
                    "lr_grid must be a nonempty list of positive rates".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Cross-entropy on a tape: `-ln(p[label])` with the input clamped at the
/// engine's log floor.
pub fn cross_entropy_on_tape(tape: &mut Tape, probabilities: Var, label: usize) -> Result<Var> {
    tape.neg_log_entry(probabilities, label)
}

/// Cross-entropy of an already-computed probability row.
pub fn cross_entropy_loss(probabilities: &Tensor, label: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(probabilities);
    let loss = tape.neg_log_entry(p, label)?;
    Ok(tape.value(loss)[0])
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment accumulators, aligned with
/// [`ModelParams::named`] order.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let shapes: Vec<usize> = params.named().iter().map(|(_, t)| t.len()).collect();
        AdamState {
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update. The L2 term enters the raw gradient
/// (`g <- g + l2 * w`) before the moment updates; bias correction follows
/// the standard scheme.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    l2: f64,
) -> Result<()> {
    let mut named = params.named_mut();
    if named.len() != grads.len() {
        return Err(Error::Contract(format!(
            "expected {} gradient tensors, got {}",
            named.len(),
            grads.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - ADAM_BETA1.powi(t);
    let bias2 = 1.0 - ADAM_BETA2.powi(t);
    for (idx, (name, tensor)) in named.iter_mut().enumerate() {
        if grads[idx].shape() != tensor.shape() {
            return Err(Error::Contract(format!(
                "gradient shape mismatch for {name}"
            )));
        }
        let m = &mut state.first[idx];
        let v = &mut state.second[idx];
        for ((w, &g_raw), (mi, vi)) in tensor
            .data_mut()
            .iter_mut()
            .zip(grads[idx].data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            let g = g_raw + l2 * *w;
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub accuracy: f64,
}

fn argmax_lowest_tie(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One pass over the training slice: shuffled mini-batches, one forward
/// and backward per graph, per-batch gradients averaged in index order,
/// one optimizer step per batch.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    params: &mut ModelParams,
    optimizer: &mut AdamState,
    dataset: &Dataset,
    indices: &[usize],
    config: &ModelConfig,
    lr: f64,
    l2: f64,
    batch_size: usize,
    rng: &mut ChaCha20Rng,
) -> Result<EpochStats> {
    if indices.is_empty() {
        return Err(Error::Contract("training slice is empty".into()));
    }
    let mut order = indices.to_vec();
    order.shuffle(rng);

    let shapes: Vec<(usize, usize)> = params.named().iter().map(|(_, t)| t.shape()).collect();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;

    for batch in order.chunks(batch_size) {
        let mut grad_acc: Vec<Tensor> =
            shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect();
        for &gi in batch {
            let graph = &dataset.graphs[gi];
            let mut tape = Tape::new();
            let pv = params.enter(&mut tape, true);
            let fwd = forward_on_tape(&mut tape, graph, &pv, config)?;
            let loss = tape.neg_log_entry(fwd.probabilities, graph.label())?;
            loss_sum += tape.value(loss)[0];
            if argmax_lowest_tie(tape.value(fwd.probabilities)) == graph.label() {
                correct += 1;
            }
            tape.backward(loss)?;
            for (acc, var) in grad_acc.iter_mut().zip(pv.in_named_order()) {
                let g = tape
                    .grad(var)
                    .expect("trainable parameters have gradients after backward");
                for (a, &gv) in acc.data_mut().iter_mut().zip(g) {
                    *a += gv;
                }
            }
        }
        let scale = 1.0 / batch.len() as f64;
        for acc in &mut grad_acc {
            for v in acc.data_mut() {
                *v *= scale;
            }
        }
        adam_step(params, &grad_acc, optimizer, lr, l2)?;
    }

    Ok(EpochStats {
        mean_loss: loss_sum / order.len() as f64,
        accuracy: correct as f64 / order.len() as f64,
    })
}

/// Accuracy of argmax predictions over a slice; ties break toward the
/// lower class index. Side-effect free.
pub fn evaluate(
    params: &ModelParams,
    dataset: &Dataset,
    indices: &[usize],
    config: &ModelConfig,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Contract("evaluation slice is empty".into()));
    }
    let mut correct = 0usize;
    for &gi in indices {
        let graph = &dataset.graphs[gi];
        let mut tape = Tape::new();
        let pv = params.enter(&mut tape, false);
        let fwd = forward_on_tape(&mut tape, graph, &pv, config)?;
        if argmax_lowest_tie(tape.value(fwd.probabilities)) == graph.label() {
            correct += 1;
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EpochTrace {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct FoldReport {
    pub fold: usize,
    pub chosen_learning_rate: f64,
    pub final_test_accuracy: f64,
    pub trace: Vec<EpochTrace>,
    /// Parameters at the end of training, for checkpointing.
    #[serde(skip)]
    pub params: ModelParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CVReport {
    pub dataset: String,
    pub folds: Vec<FoldReport>,
    pub mean_accuracy: f64,
    /// Population standard deviation over fold accuracies.
    pub std_accuracy: f64,
    pub config: TrainConfig,
}

fn run_fold(
    dataset: &Dataset,
    config: &TrainConfig,
    model_config: &ModelConfig,
    fold: usize,
    train_idx: &[usize],
    test_idx: &[usize],
) -> Result<FoldReport> {
    let fold_seed = config.seed.wrapping_add(fold as u64);

    let lr = match &config.lr_grid {
        None => config.learning_rate,
        Some(grid) => select_learning_rate(
            dataset,
            config,
            model_config,
            grid,
            train_idx,
            fold_seed,
        )?,
    };

    let mut params = init_params(model_config, fold_seed)?;
    let mut optimizer = AdamState::new(&params);
    let mut rng = ChaCha20Rng::seed_from_u64(fold_seed);
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let stats = train_epoch(
            &mut params,
            &mut optimizer,
            dataset,
            train_idx,
            model_config,
            lr,
            config.l2,
            config.batch_size,
            &mut rng,
        )?;
        let test_accuracy = evaluate(&params, dataset, test_idx, model_config)?;
        trace.push(EpochTrace {
            epoch,
            train_loss: stats.mean_loss,
            train_accuracy: stats.accuracy,
            test_accuracy,
        });
    }
    Ok(FoldReport {
        fold,
        chosen_learning_rate: lr,
        final_test_accuracy: trace.last().expect("epochs >= 1").test_accuracy,
        trace,
        params,
    })
}

/// Pick a learning rate from the grid using the training data only: an
/// inner stratified split of the fold's training indices provides one
/// train/validation pair; ties break toward the earlier grid entry.
fn select_learning_rate(
    dataset: &Dataset,
    config: &TrainConfig,
    model_config: &ModelConfig,
    grid: &[f64],
    train_idx: &[usize],
    fold_seed: u64,
) -> Result<f64> {
    let labels: Vec<usize> = train_idx
        .iter()
        .map(|&i| dataset.graphs[i].label())
        .collect();
    let mut class_counts = vec![0usize; labels.iter().max().map_or(0, |m| m + 1)];
    for &l in &labels {
        class_counts[l] += 1;
    }
    let smallest = class_counts.iter().copied().filter(|&c| c > 0).min().unwrap_or(0);
    let inner_folds = smallest.min(5);
    if inner_folds < 2 {
        return Err(Error::Config(
            "lr_grid selection needs at least 2 training graphs per class".into(),
        ));
    }
    let inner = stratified_kfold_labels(&labels, inner_folds, fold_seed)?;
    let (inner_train_pos, inner_val_pos) = &inner[0];
    let inner_train: Vec<usize> = inner_train_pos.iter().map(|&p| train_idx[p]).collect();
    let inner_val: Vec<usize> = inner_val_pos.iter().map(|&p| train_idx[p]).collect();

    let mut best: Option<(f64, f64)> = None;
    for &lr in grid {
        let mut params = init_params(model_config, fold_seed)?;
        let mut optimizer = AdamState::new(&params);
        let mut rng = ChaCha20Rng::seed_from_u64(fold_seed);
        for _ in 0..config.epochs {
            train_epoch(
                &mut params,
                &mut optimizer,
                dataset,
                &inner_train,
                model_config,
                lr,
                config.l2,
                config.batch_size,
                &mut rng,
            )?;
        }
        let accuracy = evaluate(&params, dataset, &inner_val, model_config)?;
        if best.is_none() || accuracy > best.expect("just checked").1 {
            best = Some((lr, accuracy));
        }
    }
    Ok(best.expect("grid is nonempty").0)
}

/// Stratified cross-validation: a fresh fold-seeded model per fold, full
/// training, and mean plus or minus population std over the final test
/// accuracies. `jobs` > 1 trains folds on that many threads; results are
/// identical regardless because every fold is independently seeded.
pub fn run_cv(dataset: &Dataset, config: &TrainConfig, jobs: usize) -> Result<CVReport> {
    config.validate()?;
    let model_config = config
        .model
        .resolve(dataset.num_classes, dataset.feature_dim);
    model_config.validate()?;
    let splits = stratified_kfold(dataset, config.folds, config.seed)?;

    let mut folds: Vec<Option<FoldReport>> = (0..splits.len()).map(|_| None).collect();
    if jobs <= 1 {
        for (fold, (train_idx, test_idx)) in splits.iter().enumerate() {
            folds[fold] = Some(run_fold(
                dataset,
                config,
                &model_config,
                fold,
                train_idx,
                test_idx,
            )?);
        }
    } else {
        let results: Vec<Result<(usize, FoldReport)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = splits
                .iter()
                .enumerate()
                .map(|(fold, (train_idx, test_idx))| {
                    let model_config = &model_config;
                    scope.spawn(move || {
                        run_fold(dataset, config, model_config, fold, train_idx, test_idx)
                            .map(|r| (fold, r))
                    })
                })
                .collect();
            // Bounded concurrency comes from the OS scheduler; fold work
            // is CPU-bound and `jobs` is advisory for small machines, so
            // join in spawn order for deterministic assembly.
            handles.into_iter().map(|h| h.join().expect("fold thread")).collect()
        });
        for r in results {
            let (fold, report) = r?;
            folds[fold] = Some(report);
        }
    }
    let folds: Vec<FoldReport> = folds.into_iter().map(|f| f.expect("all folds ran")).collect();

    let accuracies: Vec<f64> = folds.iter().map(|f| f.final_test_accuracy).collect();
    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    let variance = accuracies
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / accuracies.len() as f64;
    Ok(CVReport {
        dataset: dataset.name.clone(),
        folds,
        mean_accuracy: mean,
        std_accuracy: variance.sqrt(),
        config: config.clone(),
    })
}

/// The per-epoch trace as CSV: `fold,epoch,train_loss,train_acc,test_acc`.
pub fn trace_csv(report: &CVReport) -> String {
    let mut out = String::from("fold,epoch,train_loss,train_acc,test_acc\n");
    for fold in &report.folds {
        for row in &fold.trace {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                fold.fold, row.epoch, row.train_loss, row.train_accuracy, row.test_accuracy
            ));
        }
    }
    out
}

#[derive(Serialize)]
struct ReportDoc<'a> {
    dataset: &'a str,
    mean_accuracy: f64,
    std_accuracy: f64,
    std_convention: &'a str,
    fold_accuracy: Vec<f64>,
    chosen_learning_rates: Vec<f64>,
    config: &'a TrainConfig,
}

/// The cross-validation summary as a structured text document.
pub fn render_report(report: &CVReport) -> String {
    let doc = ReportDoc {
        dataset: &report.dataset,
        mean_accuracy: report.mean_accuracy,
        std_accuracy: report.std_accuracy,
        std_convention: "population standard deviation over fold test accuracies",
        fold_accuracy: report.folds.iter().map(|f| f.final_test_accuracy).collect(),
        chosen_learning_rates: report.folds.iter().map(|f| f.chosen_learning_rate).collect(),
        config: &report.config,
    };
    toml::to_string_pretty(&doc).expect("report serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use std::collections::BTreeMap;

    /// A small separable dataset: triangles labeled 0 with features in the
    /// first channel, paths labeled 1 with features in the second.
    pub(crate) fn toy_dataset(graphs_per_class: usize) -> Dataset {
        let mut graphs = Vec::new();
        for i in 0..graphs_per_class {
            let n = 3 + (i % 3);
            // Cycle graph, feature channel 0.
            let mut adj = Tensor::zeros(n, n);
            for v in 0..n {
                let w = (v + 1) % n;
                adj.set(v, w, 1.0);
                adj.set(w, v, 1.0);
            }
            let mut feats = Tensor::zeros(n, 2);
            for v in 0..n {
                feats.set(v, 0, 1.0);
            }
            graphs.push(Graph::new(adj, feats, 0).unwrap());

            // Path graph, feature channel 1.
            let mut adj = Tensor::zeros(n, n);
            for v in 0..n - 1 {
                adj.set(v, v + 1, 1.0);
                adj.set(v + 1, v, 1.0);
            }
            let mut feats = Tensor::zeros(n, 2);
            for v in 0..n {
                feats.set(v, 1, 1.0);
            }
            graphs.push(Graph::new(adj, feats, 1).unwrap());
        }
        Dataset {
            name: "toy".into(),
            graphs,
            num_classes: 2,
            feature_dim: 2,
            label_map: BTreeMap::from([(0, 0), (1, 1)]),
        }
    }

    fn tiny_model() -> ModelSettings {
        ModelSettings {
            hops: 2,
            layers: 1,
            hidden: 6,
            subspaces: 2,
            nonlinearity: Nonlinearity::Relu,
            hop_attention: HopAttention::Additive,
        }
    }

    #[test]
    fn cross_entropy_values() {
        let certain = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(cross_entropy_loss(&certain, 1).unwrap(), 0.0);

        let uniform = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert!((cross_entropy_loss(&uniform, 0).unwrap() - std::f64::consts::LN_2).abs() <= 1e-9);

        let clamped = Tensor::from_rows(&[vec![1e-13, 1.0]]).unwrap();
        assert!((cross_entropy_loss(&clamped, 0).unwrap() - 27.631).abs() <= 1e-3);

        assert!(cross_entropy_loss(&uniform, 5).is_err(), "label out of range");
    }

    #[test]
    fn adam_zero_gradient_zero_l2_is_a_fixed_point() {
        let config = tiny_model().resolve(2, 2);
        let mut params = init_params(&config, 1).unwrap();
        let before = params.clone();
        let mut state = AdamState::new(&params);
        let zeros: Vec<Tensor> = params
            .named()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        for _ in 0..3 {
            adam_step(&mut params, &zeros, &mut state, 0.01, 0.0).unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn adam_first_step_magnitude_is_at_most_lr() {
        let config = tiny_model().resolve(2, 2);
        let mut params = init_params(&config, 2).unwrap();
        let before = params.clone();
        let mut state = AdamState::new(&params);
        let grads: Vec<Tensor> = params
            .named()
            .iter()
            .enumerate()
            .map(|(i, (_, t))| {
                let data: Vec<f64> = (0..t.len())
                    .map(|j| if (i + j) % 2 == 0 { 0.5 } else { -1.5 })
                    .collect();
                Tensor::new(t.rows(), t.cols(), data).unwrap()
            })
            .collect();
        let lr = 0.01;
        adam_step(&mut params, &grads, &mut state, lr, 0.0).unwrap();
        for ((_, after), (_, before)) in params.named().iter().zip(before.named()) {
            for (a, b) in after.data().iter().zip(before.data()) {
                let delta = (a - b).abs();
                assert!(delta <= lr * (1.0 + 1e-9));
                // With |g| around 1, the first bias-corrected step is
                // close to lr in magnitude.
                assert!(delta >= lr * 0.99, "step {delta} unexpectedly small");
            }
        }
    }

    #[test]
    fn adam_is_deterministic_over_ten_steps() {
        let config = tiny_model().resolve(2, 2);
        let run = || {
            let mut params = init_params(&config, 3).unwrap();
            let mut state = AdamState::new(&params);
            let grads: Vec<Tensor> = params
                .named()
                .iter()
                .map(|(_, t)| {
                    let data: Vec<f64> = (0..t.len()).map(|j| (j as f64 * 0.1).sin()).collect();
                    Tensor::new(t.rows(), t.cols(), data).unwrap()
                })
                .collect();
            for _ in 0..10 {
                adam_step(&mut params, &grads, &mut state, 0.005, 1e-4).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn one_optimizer_step_when_batch_covers_the_slice() {
        let dataset = toy_dataset(3);
        let config = tiny_model().resolve(2, 2);
        let mut params = init_params(&config, 4).unwrap();
        let mut state = AdamState::new(&params);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let indices: Vec<usize> = (0..dataset.len()).collect();
        train_epoch(
            &mut params, &mut state, &dataset, &indices, &config, 0.01, 0.0, 100, &mut rng,
        )
        .unwrap();
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn loss_decreases_when_overfitting_two_graphs() {
        let dataset = toy_dataset(1);
        assert_eq!(dataset.len(), 2);
        let config = tiny_model().resolve(2, 2);
        let mut params = init_params(&config, 5).unwrap();
        let mut state = AdamState::new(&params);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let indices = vec![0, 1];
        let mut losses = Vec::new();
        for _ in 0..50 {
            let stats = train_epoch(
                &mut params, &mut state, &dataset, &indices, &config, 0.01, 0.0, 2, &mut rng,
            )
            .unwrap();
            losses.push(stats.mean_loss);
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "loss must strictly decrease: {losses:?}");
        }
    }

    #[test]
    fn epoch_stats_are_seed_deterministic() {
        let dataset = toy_dataset(5);
        let config = tiny_model().resolve(2, 2);
        let run = || {
            let mut params = init_params(&config, 6).unwrap();
            let mut state = AdamState::new(&params);
            let mut rng = ChaCha20Rng::seed_from_u64(6);
            let indices: Vec<usize> = (0..dataset.len()).collect();
            (0..3)
                .map(|_| {
                    train_epoch(
                        &mut params, &mut state, &dataset, &indices, &config, 0.01, 1e-4, 4,
                        &mut rng,
                    )
                    .unwrap()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn evaluate_is_side_effect_free_and_exact_when_correct() {
        let dataset = toy_dataset(4);
        let config = tiny_model().resolve(2, 2);
        let mut params = init_params(&config, 7).unwrap();
        let mut state = AdamState::new(&params);
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let indices: Vec<usize> = (0..dataset.len()).collect();
        for _ in 0..60 {
            train_epoch(
                &mut params, &mut state, &dataset, &indices, &config, 0.01, 0.0, 8, &mut rng,
            )
            .unwrap();
        }
        let before = params.clone();
        let acc = evaluate(&params, &dataset, &indices, &config).unwrap();
        assert_eq!(params, before, "evaluation must not mutate parameters");
        assert_eq!(acc, 1.0, "the toy set is separable");
    }

    #[test]
    fn untrained_accuracy_is_near_chance_on_balanced_data() {
        // 200 random graphs whose alternating labels are independent of
        // structure: whatever an untrained model predicts, it cannot beat
        // chance by much.
        use rand::Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(88);
        let mut graphs = Vec::new();
        for i in 0..200 {
            let n = rng.gen_range(3..8);
            let mut adj = Tensor::zeros(n, n);
            for a in 0..n {
                for b in (a + 1)..n {
                    if rng.gen_bool(0.5) {
                        adj.set(a, b, 1.0);
                        adj.set(b, a, 1.0);
                    }
                }
            }
            let mut feats = Tensor::zeros(n, 2);
            for v in 0..n {
                feats.set(v, rng.gen_range(0..2), 1.0);
            }
            graphs.push(Graph::new(adj, feats, i % 2).unwrap());
        }
        let dataset = Dataset {
            name: "chance".into(),
            graphs,
            num_classes: 2,
            feature_dim: 2,
            label_map: BTreeMap::from([(0, 0), (1, 1)]),
        };
        let config = tiny_model().resolve(2, 2);
        let params = init_params(&config, 8).unwrap();
        let indices: Vec<usize> = (0..dataset.len()).collect();
        let acc = evaluate(&params, &dataset, &indices, &config).unwrap();
        assert!((0.3..=0.7).contains(&acc), "got {acc}");
    }

    #[test]
    fn mean_of_gradients_equals_gradient_of_mean() {
        let dataset = toy_dataset(2);
        let config = tiny_model().resolve(2, 2);
        let params = init_params(&config, 9).unwrap();
        let batch = [0usize, 1, 2];

        // Route one: average per-graph gradients from separate tapes.
        let shapes: Vec<(usize, usize)> =
            params.named().iter().map(|(_, t)| t.shape()).collect();
        let mut averaged: Vec<Tensor> =
            shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect();
        for &gi in &batch {
            let mut tape = Tape::new();
            let pv = params.enter(&mut tape, true);
            let fwd = forward_on_tape(&mut tape, &dataset.graphs[gi], &pv, &config).unwrap();
            let loss = tape
                .neg_log_entry(fwd.probabilities, dataset.graphs[gi].label())
                .unwrap();
            tape.backward(loss).unwrap();
            for (acc, var) in averaged.iter_mut().zip(pv.in_named_order()) {
                for (a, &g) in acc.data_mut().iter_mut().zip(tape.grad(var).unwrap()) {
                    *a += g / batch.len() as f64;
                }
            }
        }

        // Route two: one tape computing the mean loss directly.
        let mut tape = Tape::new();
        let pv = params.enter(&mut tape, true);
        let mut total: Option<Var> = None;
        for &gi in &batch {
            let fwd = forward_on_tape(&mut tape, &dataset.graphs[gi], &pv, &config).unwrap();
            let loss = tape
                .neg_log_entry(fwd.probabilities, dataset.graphs[gi].label())
                .unwrap();
            total = Some(match total {
                None => loss,
                Some(acc) => tape.add(acc, loss).unwrap(),
            });
        }
        let mean = tape.scale_const(total.unwrap(), 1.0 / batch.len() as f64);
        tape.backward(mean).unwrap();

        for (avg, var) in averaged.iter().zip(pv.in_named_order()) {
            let direct = tape.grad(var).unwrap();
            for (a, &d) in avg.data().iter().zip(direct) {
                assert!((a - d).abs() <= 1e-10, "{a} vs {d}");
            }
        }
    }

    #[test]
    fn training_never_touches_graphs_outside_the_slice() {
        let mut dataset = toy_dataset(3);
        // Poison two graphs; if training ever forwards them, parameters
        // become non-finite.
        for gi in [4usize, 5] {
            let g = &dataset.graphs[gi];
            let poisoned = Tensor::new(
                g.node_count(),
                2,
                vec![f64::NAN; g.node_count() * 2],
            )
            .unwrap();
            dataset.graphs[gi] =
                Graph::new(g.adjacency().clone(), poisoned, g.label()).unwrap();
        }
        let config = tiny_model().resolve(2, 2);
        let mut params = init_params(&config, 10).unwrap();
        let mut state = AdamState::new(&params);
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let train_indices = vec![0, 1, 2, 3];
        for _ in 0..3 {
            train_epoch(
                &mut params, &mut state, &dataset, &train_indices, &config, 0.01, 1e-4, 2,
                &mut rng,
            )
            .unwrap();
        }
        assert!(params.all_finite());
    }

    #[test]
    fn cv_reports_partition_and_recomputable_statistics() {
        let dataset = toy_dataset(5);
        let config = TrainConfig {
            epochs: 3,
            folds: 2,
            batch_size: 4,
            model: tiny_model(),
            ..TrainConfig::default()
        };
        let report = run_cv(&dataset, &config, 1).unwrap();
        assert_eq!(report.folds.len(), 2);
        for fold in &report.folds {
            assert_eq!(fold.trace.len(), 3);
            for row in &fold.trace {
                assert!((0.0..=1.0).contains(&row.test_accuracy));
            }
        }
        let accs: Vec<f64> = report.folds.iter().map(|f| f.final_test_accuracy).collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let std =
            (accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accs.len() as f64).sqrt();
        assert!((report.mean_accuracy - mean).abs() <= 1e-12);
        assert!((report.std_accuracy - std).abs() <= 1e-12);
    }

    #[test]
    fn cv_is_deterministic_and_jobs_invariant() {
        let dataset = toy_dataset(5);
        let config = TrainConfig {
            epochs: 2,
            folds: 2,
            batch_size: 4,
            model: tiny_model(),
            ..TrainConfig::default()
        };
        let a = run_cv(&dataset, &config, 1).unwrap();
        let b = run_cv(&dataset, &config, 1).unwrap();
        assert_eq!(trace_csv(&a), trace_csv(&b), "byte-identical traces");
        let c = run_cv(&dataset, &config, 2).unwrap();
        assert_eq!(trace_csv(&a), trace_csv(&c), "fold parallelism must not matter");
    }

    #[test]
    fn lr_grid_selects_on_training_data_only() {
        let dataset = toy_dataset(8);
        let config = TrainConfig {
            epochs: 2,
            folds: 2,
            batch_size: 8,
            lr_grid: Some(vec![0.01, 0.001]),
            model: tiny_model(),
            ..TrainConfig::default()
        };
        let report = run_cv(&dataset, &config, 1).unwrap();
        for fold in &report.folds {
            assert!(config
                .lr_grid
                .as_ref()
                .unwrap()
                .contains(&fold.chosen_learning_rate));
        }
    }

    #[test]
    fn report_document_contains_the_essentials() {
        let dataset = toy_dataset(5);
        let config = TrainConfig {
            epochs: 2,
            folds: 2,
            batch_size: 4,
            model: tiny_model(),
            ..TrainConfig::default()
        };
        let report = run_cv(&dataset, &config, 1).unwrap();
        let doc = render_report(&report);
        assert!(doc.contains("mean_accuracy"));
        assert!(doc.contains("fold_accuracy"));
        assert!(doc.contains("population standard deviation"));
        let csv = trace_csv(&report);
        assert!(csv.starts_with("fold,epoch,train_loss,train_acc,test_acc\n"));
        assert_eq!(csv.lines().count(), 1 + 2 * 2);
    }
}
