//! Subject-grouped cross-validation, the cooperative training loop,
//! evaluation metrics, and compute/memory cost estimation.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::cwg::{
    loss_classifier, loss_generator, mask_graphs, weight_transform, CwgModel,
};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::gga::{
    build_euclidean_graph, build_phenotype_graph, build_relationship_graph, AdjacencyMatrix,
    GgaModel, PhenotypeMatrix,
};
use crate::optim::{Adam, AdamConfig};
use crate::sga::{centrality_pool, PooledMatrix, SgaEncoder};
use crate::tensor::Tensor;

/// Which per-batch adjacency the graph branch runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    /// Cosine-kernel graph over the phenotype vectors (the default).
    Phenotype,
    /// Gaussian graph over raw flattened features.
    Euclidean,
    /// Same-label indicator graph (label-leaking upper bound).
    Relationship,
}

impl std::str::FromStr for GraphMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phenotype" => Ok(GraphMode::Phenotype),
            "euclidean" => Ok(GraphMode::Euclidean),
            "relationship" => Ok(GraphMode::Relationship),
            other => Err(Error::Config(format!("unknown graph mode '{other}'"))),
        }
    }
}

/// Whether sample weights come from the generator or stay at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingMode {
    Dynamic,
    Uniform,
}

/// Split sample indices into `folds` test folds, keeping every sample of a
/// subject in the same fold. Subjects are shuffled deterministically.
pub fn grouped_kfold(subjects: &[usize], folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::Config("need at least 2 folds".into()));
    }
    let mut uniq: Vec<usize> = Vec::new();
    for &s in subjects {
        if !uniq.contains(&s) {
            uniq.push(s);
        }
    }
    if uniq.len() < folds {
        return Err(Error::Config(format!(
            "{} subjects cannot fill {folds} folds",
            uniq.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    uniq.shuffle(&mut rng);
    let mut fold_of: HashMap<usize, usize> = HashMap::new();
    for (i, s) in uniq.iter().enumerate() {
        fold_of.insert(*s, i % folds);
    }
    let mut out = vec![Vec::new(); folds];
    for (idx, s) in subjects.iter().enumerate() {
        out[fold_of[s]].push(idx);
    }
    Ok(out)
}

/// Confusion-matrix derived metrics. Percentages in [0, 100].
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub f1_weighted: f64,
    pub specificity_macro: f64,
    pub confusion: Vec<Vec<usize>>,
}

/// Compute ACC / BA / weighted F1 / macro specificity from labels and
/// predictions. BA averages recall over classes that appear in `y_true`.
pub fn evaluate(y_true: &[usize], y_pred: &[usize], classes: usize) -> MetricsReport {
    assert_eq!(y_true.len(), y_pred.len());
    let n = y_true.len();
    let mut cm = vec![vec![0usize; classes]; classes];
    for (&t, &p) in y_true.iter().zip(y_pred.iter()) {
        cm[t][p] += 1;
    }
    let correct: usize = (0..classes).map(|c| cm[c][c]).sum();
    let accuracy = 100.0 * correct as f64 / n as f64;

    let mut recall_sum = 0.0;
    let mut present = 0usize;
    let mut f1_weighted = 0.0;
    let mut spe_sum = 0.0;
    let mut spe_terms = 0usize;
    for c in 0..classes {
        let support: usize = cm[c].iter().sum();
        let tp = cm[c][c];
        let fp: usize = (0..classes).filter(|&t| t != c).map(|t| cm[t][c]).sum();
        let fn_: usize = support - tp;
        let tn = n - support - fp;
        if support > 0 {
            recall_sum += tp as f64 / support as f64;
            present += 1;
            let denom = 2 * tp + fp + fn_;
            let f1 = if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            };
            f1_weighted += f1 * support as f64 / n as f64;
        }
        if tn + fp > 0 {
            spe_sum += tn as f64 / (tn + fp) as f64;
            spe_terms += 1;
        }
    }
    MetricsReport {
        accuracy,
        balanced_accuracy: 100.0 * recall_sum / present.max(1) as f64,
        f1_weighted: 100.0 * f1_weighted,
        specificity_macro: 100.0 * spe_sum / spe_terms.max(1) as f64,
        confusion: cm,
    }
}

/// FLOPs of one m x k by k x n matrix product (multiply + add).
pub fn matmul_flops(m: usize, k: usize, n: usize) -> f64 {
    2.0 * m as f64 * k as f64 * n as f64
}

/// Analytic cost model for one cooperative training step on a batch.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CostEstimate {
    pub batch_size: usize,
    pub classifier_forward_flops: f64,
    pub generator_forward_flops: f64,
    /// Training step cost, counting backward as twice the forward pass.
    pub classifier_step_flops: f64,
    pub generator_step_flops: f64,
    pub classifier_params: usize,
    pub generator_params: usize,
    /// Parameters plus two Adam moment buffers, in bytes of f64.
    pub optimizer_state_bytes: usize,
    /// Rough peak of live activation values during a step, in bytes.
    pub activation_bytes: f64,
}

fn encoder_forward_flops(cfg: &TrainConfig, batch: usize) -> f64 {
    let r = cfg.roi_count as f64;
    let f = (cfg.feature_dim + 1) as f64;
    let e = cfg.embed_dim as f64;
    let t = r + 1.0; // CLS token
    let per_sample = 2.0 * r * f * e
        + cfg.encoder_depth as f64
            * (
                // attention: QKV + output projections, scores, weighted sum
                4.0 * 2.0 * t * e * e + 4.0 * t * t * e
                // feed-forward at 4x width
                + 2.0 * 2.0 * t * e * 4.0 * e
                // two layer norms
                + 10.0 * t * e
            )
        + 2.0 * e * cfg.classes as f64;
    batch as f64 * per_sample
}

fn gga_layer_forward_flops(n: usize, e_in: usize, e_out: usize) -> f64 {
    let (n, e_in, e_out) = (n as f64, e_in as f64, e_out as f64);
    // per target row: Q/K/V projections over all rows, scores, weighted sum
    n * (3.0 * 2.0 * n * e_in * e_out + 4.0 * n * n * e_out)
}

fn gga_forward_flops(cfg: &TrainConfig, batch: usize) -> f64 {
    let e = cfg.embed_dim;
    gga_layer_forward_flops(batch, e, 2 * e)
        + gga_layer_forward_flops(batch, 2 * e, 4 * e)
        + matmul_flops(batch, 4 * e, 2 * e)
        + matmul_flops(batch, 2 * e, cfg.classes)
}

/// Analytic FLOP and memory estimate for one training step at `batch`.
pub fn estimate_cost(cfg: &TrainConfig, batch: usize) -> CostEstimate {
    let enc = encoder_forward_flops(cfg, batch);
    let gga = gga_forward_flops(cfg, batch);
    let classifier_forward = enc + gga;
    // generator: shared encoder once, one masked-graph branch per class,
    // plus the BN-MLP fusion heads
    let c = cfg.classes;
    let bn_mlp = matmul_flops(batch, c, 2 * c) + matmul_flops(batch, 2 * c, c);
    let generator_forward = enc + c as f64 * (gga + bn_mlp);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let count = |params: &[(String, Tensor)]| -> usize {
        params.iter().map(|(_, t)| t.rows() * t.cols()).sum()
    };
    let classifier = ClassifierModel::new(cfg, &mut rng).expect("validated config");
    let generator = CwgModel::new(
        cfg.roi_count,
        cfg.feature_dim + 1,
        cfg.embed_dim,
        cfg.encoder_depth,
        cfg.encoder_heads,
        cfg.gga_heads,
        cfg.classes,
        cfg.dropout_rate,
        cfg.cwg_fusion,
        &mut rng,
    )
    .expect("validated config");
    let classifier_params = count(&classifier.params());
    let generator_params = count(&generator.params());

    // widest live activation: batch of token matrices plus attention scores
    let t = cfg.roi_count + 1;
    let activation_bytes = 8.0
        * batch as f64
        * (t as f64 * 4.0 * cfg.embed_dim as f64 + (t * t) as f64)
        * (cfg.encoder_depth as f64 + 2.0);

    CostEstimate {
        batch_size: batch,
        classifier_forward_flops: classifier_forward,
        generator_forward_flops: generator_forward,
        classifier_step_flops: 3.0 * classifier_forward,
        generator_step_flops: 3.0 * generator_forward,
        classifier_params,
        generator_params,
        optimizer_state_bytes: 8 * 3 * (classifier_params + generator_params),
        activation_bytes,
    }
}

/// The diagnosis network: shared encoder over pooled ROI features followed
/// by graph-attention convolution over the batch graph.
pub struct ClassifierModel {
    pub encoder: SgaEncoder,
    pub gga: GgaModel,
}

impl ClassifierModel {
    pub fn new(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(ClassifierModel {
            encoder: SgaEncoder::new(
                cfg.roi_count,
                cfg.feature_dim + 1,
                cfg.embed_dim,
                cfg.encoder_depth,
                cfg.encoder_heads,
                cfg.classes,
                cfg.dropout_rate,
                rng,
            )?,
            gga: GgaModel::new(cfg.embed_dim, cfg.gga_heads, cfg.classes, cfg.dropout_rate, rng)?,
        })
    }

    /// Returns (class scores S, auxiliary encoder logits).
    pub fn forward(
        &self,
        x1_batch: &[Tensor],
        a2: &Tensor,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> (Tensor, Tensor) {
        let (cls, sga_logits) = self.encoder.encode_batch(x1_batch, training, rng);
        let s = self.gga.forward(&cls, a2, training, rng);
        (s, sga_logits)
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.encoder.params() {
            out.push((format!("encoder.{n}"), t));
        }
        for (n, t) in self.gga.params() {
            out.push((format!("gga.{n}"), t));
        }
        out
    }
}

fn one_hot_tensor(labels: &[usize], classes: usize) -> Tensor {
    let n = labels.len();
    let mut v = vec![0.0; n * classes];
    for (i, &l) in labels.iter().enumerate() {
        v[i * classes + l] = 1.0;
    }
    Tensor::new(n, classes, v)
}

fn batch_adjacency(
    mode: GraphMode,
    idx: &[usize],
    phen: &[Vec<f64>],
    flat: &[Vec<f64>],
    labels: &[usize],
) -> Result<AdjacencyMatrix> {
    match mode {
        GraphMode::Phenotype => {
            let dim = phen[idx[0]].len();
            let mut values = Vec::with_capacity(idx.len() * dim);
            for &i in idx {
                values.extend_from_slice(&phen[i]);
            }
            build_phenotype_graph(&PhenotypeMatrix::new(idx.len(), dim, values)?)
        }
        GraphMode::Euclidean => {
            let rows: Vec<Vec<f64>> = idx.iter().map(|&i| flat[i].clone()).collect();
            build_euclidean_graph(&rows)
        }
        GraphMode::Relationship => {
            let lab: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            Ok(build_relationship_graph(&lab))
        }
    }
}

/// Chunk indices into batches of `size`, folding a trailing singleton into
/// the previous batch (batch statistics need at least two samples).
fn batches(idx: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = idx.chunks(size).map(|c| c.to_vec()).collect();
    if out.len() >= 2 && out.last().map(|b| b.len()) == Some(1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

/// One test fold's outcome.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub best_epoch: usize,
    pub best_metrics: MetricsReport,
    pub final_metrics: MetricsReport,
    /// Per-epoch mean classifier loss.
    pub classifier_loss: Vec<f64>,
    /// Per-epoch mean generator loss (empty under uniform weighting).
    pub generator_loss: Vec<f64>,
    /// Final-epoch softmax scores on the test fold, one row per sample.
    pub test_scores: Vec<Vec<f64>>,
    pub test_labels: Vec<usize>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ExperimentReport {
    pub config: TrainConfig,
    pub graph_mode: GraphMode,
    pub weighting: WeightingMode,
    pub folds: Vec<FoldResult>,
    pub mean_accuracy: f64,
    pub mean_balanced_accuracy: f64,
    pub mean_f1_weighted: f64,
    pub mean_specificity: f64,
    pub std_accuracy: f64,
}

struct FoldInput<'a> {
    pooled: &'a [PooledMatrix],
    phen: &'a [Vec<f64>],
    flat: &'a [Vec<f64>],
    labels: &'a [usize],
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|v| v / s).collect()
}

fn predict(
    model: &ClassifierModel,
    input: &FoldInput,
    idx: &[usize],
    cfg: &TrainConfig,
    mode: GraphMode,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let mut preds = Vec::with_capacity(idx.len());
    let mut scores = Vec::with_capacity(idx.len());
    for batch in batches(idx, cfg.batch_size) {
        let x1: Vec<Tensor> = batch.iter().map(|&i| input.pooled[i].to_tensor()).collect();
        let a2 = batch_adjacency(mode, &batch, input.phen, input.flat, input.labels)?
            .to_tensor();
        let (s, _aux) = model.forward(&x1, &a2, false, rng);
        let sv = s.values();
        let c = cfg.classes;
        for (bi, _) in batch.iter().enumerate() {
            let row = &sv[bi * c..(bi + 1) * c];
            let arg = (0..c)
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                .unwrap();
            preds.push(arg);
            scores.push(softmax_row(row));
        }
    }
    Ok((preds, scores))
}

#[allow(clippy::too_many_arguments)]
fn run_fold(
    input: &FoldInput,
    train_idx: &[usize],
    test_idx: &[usize],
    cfg: &TrainConfig,
    mode: GraphMode,
    weighting: WeightingMode,
    fold: usize,
    seed: u64,
) -> Result<FoldResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classifier = ClassifierModel::new(cfg, &mut rng)?;
    let c_named = classifier.params();
    let c_params: Vec<Tensor> = c_named.iter().map(|(_, t)| t.clone()).collect();
    let adam_cfg = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut adam_c = Adam::new(&c_params, adam_cfg.clone());

    let generator = if weighting == WeightingMode::Dynamic {
        Some(CwgModel::new(
            cfg.roi_count,
            cfg.feature_dim + 1,
            cfg.embed_dim,
            cfg.encoder_depth,
            cfg.encoder_heads,
            cfg.gga_heads,
            cfg.classes,
            cfg.dropout_rate,
            cfg.cwg_fusion,
            &mut rng,
        )?)
    } else {
        None
    };
    let g_params: Vec<Tensor> = generator
        .as_ref()
        .map(|g| g.params().iter().map(|(_, t)| t.clone()).collect())
        .unwrap_or_default();
    let mut adam_g = Adam::new(&g_params, adam_cfg);

    let test_labels: Vec<usize> = test_idx.iter().map(|&i| input.labels[i]).collect();
    let mut order: Vec<usize> = train_idx.to_vec();
    let mut classifier_loss = Vec::with_capacity(cfg.epochs);
    let mut generator_loss = Vec::with_capacity(cfg.epochs);
    let mut best_epoch = 0usize;
    let mut best_metrics: Option<MetricsReport> = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut l1_sum = 0.0;
        let mut l3_sum = 0.0;
        let mut n_batches = 0usize;
        for batch in batches(&order, cfg.batch_size) {
            let x1: Vec<Tensor> =
                batch.iter().map(|&i| input.pooled[i].to_tensor()).collect();
            let lab: Vec<usize> = batch.iter().map(|&i| input.labels[i]).collect();
            let y = one_hot_tensor(&lab, cfg.classes);
            let adj = batch_adjacency(mode, &batch, input.phen, input.flat, input.labels)?;
            let a2 = adj.to_tensor();

            let (s, sga_logits) = classifier.forward(&x1, &a2, true, &mut rng);

            // Generator step first, then regenerate the weights with the
            // updated generator before the classifier step.
            let r = match &generator {
                Some(g) => {
                    let masked = mask_graphs(&adj, &y)?;
                    let w1 = g.forward(&x1, &masked, true, &mut rng);
                    let l3 = loss_generator(&s, &y, &w1, cfg.alpha);
                    adam_g.zero_grad(&g_params);
                    l3.backward();
                    adam_g.step(&g_params)?;
                    l3_sum += l3.item();
                    let w2 = g.forward(&x1, &masked, true, &mut rng);
                    weight_transform(&w2.detach()).1
                }
                None => Tensor::new(batch.len(), cfg.classes, vec![1.0; batch.len() * cfg.classes]),
            };

            let l1 = loss_classifier(&s, &y, &r, &sga_logits);
            adam_c.zero_grad(&c_params);
            l1.backward();
            adam_c.step(&c_params)?;
            l1_sum += l1.item();
            n_batches += 1;
        }
        classifier_loss.push(l1_sum / n_batches as f64);
        if generator.is_some() {
            generator_loss.push(l3_sum / n_batches as f64);
        }

        let (preds, _scores) = predict(&classifier, input, test_idx, cfg, mode, &mut rng)?;
        let m = evaluate(&test_labels, &preds, cfg.classes);
        let better = match &best_metrics {
            None => true,
            Some(b) => m.accuracy > b.accuracy,
        };
        if better {
            best_epoch = epoch;
            best_metrics = Some(m);
        }
    }

    let (preds, scores) = predict(&classifier, input, test_idx, cfg, mode, &mut rng)?;
    let final_metrics = evaluate(&test_labels, &preds, cfg.classes);
    Ok(FoldResult {
        fold,
        best_epoch,
        best_metrics: best_metrics.unwrap(),
        final_metrics,
        classifier_loss,
        generator_loss,
        test_scores: scores,
        test_labels,
    })
}

/// Run grouped k-fold cross-validation end to end. When `out_dir` is given,
/// metrics, loss curves, ROC points, the dataset-level adjacency, and the
/// cost estimate are written there.
pub fn run_experiment(
    ds: &Dataset,
    cfg: &TrainConfig,
    mode: GraphMode,
    weighting: WeightingMode,
    parallel: bool,
    out_dir: Option<&Path>,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    if ds.samples.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let first = &ds.samples[0];
    if first.features.rows != cfg.roi_count || first.features.cols != cfg.feature_dim {
        return Err(Error::Config(format!(
            "dataset features are {}x{}, config expects {}x{}",
            first.features.rows, first.features.cols, cfg.roi_count, cfg.feature_dim
        )));
    }

    let pooled: Vec<PooledMatrix> = ds
        .samples
        .iter()
        .map(|s| centrality_pool(&s.features, cfg.similarity_mode))
        .collect::<Result<_>>()?;
    let phen: Vec<Vec<f64>> = ds.samples.iter().map(|s| s.phenotype.clone()).collect();
    let flat: Vec<Vec<f64>> = ds.samples.iter().map(|s| s.features.values.clone()).collect();
    let labels: Vec<usize> = ds.samples.iter().map(|s| s.label).collect();
    let subjects: Vec<usize> = ds.samples.iter().map(|s| s.subject).collect();
    let test_folds = grouped_kfold(&subjects, cfg.folds, cfg.seed)?;

    let input = FoldInput {
        pooled: &pooled,
        phen: &phen,
        flat: &flat,
        labels: &labels,
    };
    let all: Vec<usize> = (0..ds.samples.len()).collect();
    let splits: Vec<(Vec<usize>, Vec<usize>)> = test_folds
        .iter()
        .map(|test| {
            let train: Vec<usize> =
                all.iter().cloned().filter(|i| !test.contains(i)).collect();
            (train, test.clone())
        })
        .collect();

    let fold_results: Vec<FoldResult> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = splits
                .iter()
                .enumerate()
                .map(|(f, (train, test))| {
                    let input = &input;
                    scope.spawn(move || {
                        run_fold(
                            input,
                            train,
                            test,
                            cfg,
                            mode,
                            weighting,
                            f,
                            cfg.seed.wrapping_add(f as u64 + 1),
                        )
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("fold thread panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        splits
            .iter()
            .enumerate()
            .map(|(f, (train, test))| {
                run_fold(
                    &input,
                    train,
                    test,
                    cfg,
                    mode,
                    weighting,
                    f,
                    cfg.seed.wrapping_add(f as u64 + 1),
                )
            })
            .collect::<Result<Vec<_>>>()?
    };

    let k = fold_results.len() as f64;
    let mean = |f: &dyn Fn(&FoldResult) -> f64| fold_results.iter().map(|r| f(r)).sum::<f64>() / k;
    let mean_accuracy = mean(&|r| r.best_metrics.accuracy);
    let std_accuracy = (fold_results
        .iter()
        .map(|r| (r.best_metrics.accuracy - mean_accuracy).powi(2))
        .sum::<f64>()
        / k)
        .sqrt();
    let report = ExperimentReport {
        config: cfg.clone(),
        graph_mode: mode,
        weighting,
        mean_accuracy,
        mean_balanced_accuracy: mean(&|r| r.best_metrics.balanced_accuracy),
        mean_f1_weighted: mean(&|r| r.best_metrics.f1_weighted),
        mean_specificity: mean(&|r| r.best_metrics.specificity_macro),
        std_accuracy,
        folds: fold_results,
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_artifacts(dir, &report, cfg, mode, &input)?;
    }
    Ok(report)
}

fn write_artifacts(
    dir: &Path,
    report: &ExperimentReport,
    cfg: &TrainConfig,
    mode: GraphMode,
    input: &FoldInput,
) -> Result<()> {
    std::fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(report)?,
    )?;
    std::fs::write(
        dir.join("cost_estimate.json"),
        serde_json::to_string_pretty(&estimate_cost(cfg, cfg.batch_size))?,
    )?;

    let mut loss = String::from("fold,epoch,loss_classifier,loss_generator\n");
    for f in &report.folds {
        for (e, l1) in f.classifier_loss.iter().enumerate() {
            let l3 = f.generator_loss.get(e).map_or(String::new(), |v| v.to_string());
            loss.push_str(&format!("{},{},{},{}\n", f.fold, e, l1, l3));
        }
    }
    std::fs::write(dir.join("loss_history.csv"), loss)?;

    // one-vs-rest ROC over pooled test scores from every fold
    let mut roc = String::from("class,threshold,fpr,tpr\n");
    for class in 0..cfg.classes {
        let mut pairs: Vec<(f64, bool)> = Vec::new();
        for f in &report.folds {
            for (row, &label) in f.test_scores.iter().zip(f.test_labels.iter()) {
                pairs.push((row[class], label == class));
            }
        }
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let pos = pairs.iter().filter(|p| p.1).count() as f64;
        let neg = pairs.len() as f64 - pos;
        let (mut tp, mut fp) = (0.0, 0.0);
        for (score, is_pos) in pairs {
            if is_pos {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            roc.push_str(&format!(
                "{},{},{},{}\n",
                class,
                score,
                if neg > 0.0 { fp / neg } else { 0.0 },
                if pos > 0.0 { tp / pos } else { 0.0 },
            ));
        }
    }
    std::fs::write(dir.join("roc_points.csv"), roc)?;

    let all: Vec<usize> = (0..input.labels.len()).collect();
    let adj = batch_adjacency(mode, &all, input.phen, input.flat, input.labels)?;
    let mut heat = String::new();
    for i in 0..adj.size {
        let row: Vec<String> = (0..adj.size).map(|j| adj.get(i, j).to_string()).collect();
        heat.push_str(&row.join(","));
        heat.push('\n');
    }
    std::fs::write(dir.join("adjacency_heatmap.csv"), heat)?;
    Ok(())
}
