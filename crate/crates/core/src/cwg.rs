//! Class weight generator: class-masked GGA branches fused into per-sample,
//! per-class weights, plus the cooperative losses for generator and
//! classifier.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gga::{AdjacencyMatrix, GgaModel};
use crate::nn::{BatchNorm1d, Linear};
use crate::sga::SgaEncoder;
use crate::tensor::Tensor;

/// The epsilon added after the inverted softmax (double-precision machine
/// epsilon).
pub const WEIGHT_EPS: f64 = f64::EPSILON;

/// How the C branch outputs are fused into the weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CwgFusion {
    /// Each branch ends in its own BN-MLP; column i of branch i is selected
    /// (default, the algorithmic reading).
    PerBranchColumn,
    /// Branch logits are summed elementwise and passed through one BN-MLP.
    SummedLogits,
}

/// Per-class masked copies of the batch adjacency.
#[derive(Debug, Clone)]
pub struct MaskedGraphSet {
    pub graphs: Vec<Vec<f64>>,
    pub size: usize,
}

impl MaskedGraphSet {
    pub fn graph_tensor(&self, class: usize) -> Tensor {
        Tensor::new(self.size, self.size, self.graphs[class].clone())
    }
}

/// graphs[i] = A2 masked to entries where both endpoints carry class i.
pub fn mask_graphs(a2: &AdjacencyMatrix, one_hot: &Tensor) -> Result<MaskedGraphSet> {
    let (n, c) = one_hot.shape();
    if n != a2.size {
        return Err(Error::Config("label count does not match adjacency".into()));
    }
    let y = one_hot.values();
    for i in 0..n {
        let row = &y[i * c..(i + 1) * c];
        let ones = row.iter().filter(|v| **v == 1.0).count();
        if ones != 1 || row.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::Data(format!("label row {i} is not one-hot")));
        }
    }
    let mut graphs = Vec::with_capacity(c);
    for class in 0..c {
        let mut g = vec![0.0; n * n];
        for j in 0..n {
            if y[j * c + class] != 1.0 {
                continue;
            }
            for k in 0..n {
                if y[k * c + class] == 1.0 {
                    g[j * n + k] = a2.get(j, k);
                }
            }
        }
        graphs.push(g);
    }
    Ok(MaskedGraphSet { graphs, size: n })
}

/// Eq. 13 then Eq. 12: inverted min-shifted softmax plus epsilon, divided by
/// the per-row minimum. Differentiable w.r.t. the weight matrix.
pub fn weight_transform(w: &Tensor) -> (Tensor, Tensor) {
    let shifted = w.sub_bcast_col(&w.row_min()).neg();
    let q = shifted.row_softmax().add_scalar(WEIGHT_EPS);
    let r = q.div_bcast_col(&q.row_min());
    (q, r)
}

/// Eq. 10/11: weighted cross-entropy with the max-shifted softmax.
pub fn loss_weighted_ce(s: &Tensor, y: &Tensor, r: &Tensor) -> Tensor {
    let (n, _c) = s.shape();
    assert_eq!(s.shape(), y.shape(), "loss_weighted_ce: label shape");
    assert_eq!(s.shape(), r.shape(), "loss_weighted_ce: weight shape");
    let log_o = s.row_log_softmax();
    y.mul(r)
        .mul(&log_o)
        .sum_all()
        .mul_scalar(-1.0 / n as f64)
}

/// Eq. 9: the classifier loss, averaging the weighted CE with the SGA
/// auxiliary cross-entropy. `r` must come from a detached weight matrix.
pub fn loss_classifier(s: &Tensor, y: &Tensor, r: &Tensor, sga_logits: &Tensor) -> Tensor {
    let l2 = loss_weighted_ce(s, y, r);
    let ce_sga = cross_entropy(sga_logits, y);
    l2.add(&ce_sga).mul_scalar(0.5)
}

/// Plain mean cross-entropy of logits vs one-hot labels.
pub fn cross_entropy(logits: &Tensor, y: &Tensor) -> Tensor {
    let (n, _c) = logits.shape();
    logits
        .row_log_softmax()
        .mul(y)
        .sum_all()
        .mul_scalar(-1.0 / n as f64)
}

/// Eq. 14: the generator loss. The classifier scores are treated as constant
/// (detached here); gradients flow only through the weight matrix.
pub fn loss_generator(s: &Tensor, y: &Tensor, w: &Tensor, alpha: f64) -> Tensor {
    let (n, c) = w.shape();
    let (_q, r) = weight_transform(w);
    let l2 = loss_weighted_ce(&s.detach(), y, &r);
    // R >= 1 so log R >= 0 and the regularizer is finite
    let reg = r
        .mul(&r.log())
        .sum_all()
        .mul_scalar(alpha / (n * c) as f64);
    l2.sub(&reg)
}

struct BnMlp {
    lin1: Linear,
    bn: BatchNorm1d,
    lin2: Linear,
}

impl BnMlp {
    fn new(classes: usize, rng: &mut ChaCha8Rng) -> Self {
        BnMlp {
            lin1: Linear::new(classes, 2 * classes, rng),
            bn: BatchNorm1d::new(2 * classes, 1e-5, 0.1),
            lin2: Linear::new(2 * classes, classes, rng),
        }
    }

    fn forward(&self, x: &Tensor, training: bool) -> Tensor {
        let h = self.bn.forward(&self.lin1.forward(x), training).relu();
        self.lin2.forward(&h)
    }

    fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.lin1.params() {
            out.push((format!("lin1.{n}"), t));
        }
        for (n, t) in self.bn.params() {
            out.push((format!("bn.{n}"), t));
        }
        for (n, t) in self.lin2.params() {
            out.push((format!("lin2.{n}"), t));
        }
        out
    }
}

/// The generator network: one shared SGA front-end, C GGA branches over the
/// class-masked graphs, and BN-MLP fusion into the weight matrix.
pub struct CwgModel {
    pub encoder: SgaEncoder,
    pub branches: Vec<GgaModel>,
    bn_mlps: Vec<BnMlp>,
    pub fusion: CwgFusion,
    pub classes: usize,
}

impl CwgModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        roi_count: usize,
        in_dim: usize,
        embed_dim: usize,
        depth: usize,
        enc_heads: usize,
        gga_heads: usize,
        classes: usize,
        dropout: f64,
        fusion: CwgFusion,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let encoder = SgaEncoder::new(
            roi_count, in_dim, embed_dim, depth, enc_heads, classes, dropout, rng,
        )?;
        let branches = (0..classes)
            .map(|_| GgaModel::new(embed_dim, gga_heads, classes, dropout, rng))
            .collect::<Result<Vec<_>>>()?;
        let n_mlps = match fusion {
            CwgFusion::PerBranchColumn => classes,
            CwgFusion::SummedLogits => 1,
        };
        let bn_mlps = (0..n_mlps).map(|_| BnMlp::new(classes, rng)).collect();
        Ok(CwgModel {
            encoder,
            branches,
            bn_mlps,
            fusion,
            classes,
        })
    }

    /// Forward over a batch of pooled samples: shared SGA encoding, per-class
    /// masked GGA branches, BN-MLP fusion into W (N x C).
    pub fn forward(
        &self,
        x1_batch: &[Tensor],
        masked: &MaskedGraphSet,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Tensor {
        let (x2, _aux) = self.encoder.encode_batch(x1_batch, training, rng);
        let branch_logits: Vec<Tensor> = (0..self.classes)
            .map(|i| {
                self.branches[i].forward(&x2, &masked.graph_tensor(i), training, rng)
            })
            .collect();
        match self.fusion {
            CwgFusion::PerBranchColumn => {
                let cols: Vec<Tensor> = branch_logits
                    .iter()
                    .enumerate()
                    .map(|(i, logits)| {
                        self.bn_mlps[i]
                            .forward(logits, training)
                            .slice_cols(i, 1)
                    })
                    .collect();
                Tensor::concat_cols(&cols)
            }
            CwgFusion::SummedLogits => {
                let mut sum = branch_logits[0].clone();
                for l in &branch_logits[1..] {
                    sum = sum.add(l);
                }
                self.bn_mlps[0].forward(&sum, training)
            }
        }
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.encoder.params() {
            out.push((format!("encoder.{n}"), t));
        }
        for (i, b) in self.branches.iter().enumerate() {
            for (n, t) in b.params() {
                out.push((format!("branch{i}.{n}"), t));
            }
        }
        for (i, m) in self.bn_mlps.iter().enumerate() {
            for (n, t) in m.params() {
                out.push((format!("bn_mlp{i}.{n}"), t));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gga::build_relationship_graph;
    use rand::SeedableRng;

    fn one_hot(labels: &[usize], classes: usize) -> Tensor {
        let n = labels.len();
        let mut v = vec![0.0; n * classes];
        for (i, &l) in labels.iter().enumerate() {
            v[i * classes + l] = 1.0;
        }
        Tensor::new(n, classes, v)
    }

    #[test]
    fn mask_single_class_keeps_whole_graph() {
        let a2 = build_relationship_graph(&[0, 0, 0]);
        let y = one_hot(&[0, 0, 0], 2);
        let m = mask_graphs(&a2, &y).unwrap();
        assert_eq!(m.graphs[0], a2.entries);
        assert!(m.graphs[1].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mask_singleton_classes_keep_self_loops_only() {
        let a2 = build_relationship_graph(&[0, 1, 2]);
        let y = one_hot(&[0, 1, 2], 3);
        let m = mask_graphs(&a2, &y).unwrap();
        for class in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    let v = m.graphs[class][j * 3 + k];
                    if j == class && k == class {
                        assert_eq!(v, a2.get(j, k));
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn mask_blocks_match_elementwise_oracle() {
        let labels = [0usize, 0, 1, 2];
        let a2 = build_relationship_graph(&labels);
        let y = one_hot(&labels, 3);
        let m = mask_graphs(&a2, &y).unwrap();
        for class in 0..3 {
            for j in 0..4 {
                for k in 0..4 {
                    let want = if labels[j] == class && labels[k] == class {
                        a2.get(j, k)
                    } else {
                        0.0
                    };
                    assert_eq!(m.graphs[class][j * 4 + k], want);
                }
            }
        }
        // sum of masks never exceeds A2 elementwise
        for idx in 0..16 {
            let s: f64 = (0..3).map(|c| m.graphs[c][idx]).sum();
            assert!(s <= a2.entries[idx] + 1e-15);
        }
    }

    #[test]
    fn non_one_hot_labels_rejected() {
        let a2 = build_relationship_graph(&[0, 1]);
        let y = Tensor::new(2, 2, vec![0.5, 0.5, 1.0, 0.0]);
        assert!(mask_graphs(&a2, &y).is_err());
    }

    #[test]
    fn weight_transform_uniform_row() {
        let w = Tensor::new(1, 3, vec![2.5, 2.5, 2.5]);
        let (q, r) = weight_transform(&w);
        for v in q.values() {
            assert!((v - (1.0 / 3.0 + WEIGHT_EPS)).abs() < 1e-15);
        }
        for v in r.values() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_transform_hand_softmax() {
        let w = Tensor::new(1, 2, vec![0.0, std::f64::consts::LN_2]);
        let (q, r) = weight_transform(&w);
        let qv = q.values();
        assert!((qv[0] - (2.0 / 3.0 + WEIGHT_EPS)).abs() < 1e-15);
        assert!((qv[1] - (1.0 / 3.0 + WEIGHT_EPS)).abs() < 1e-15);
        let rv = r.values();
        assert!((rv[0] - 2.0).abs() < 1e-10);
        assert!((rv[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn row_argmax_of_w_is_row_argmin_of_r() {
        let w = Tensor::new(2, 3, vec![0.3, 1.9, -0.5, 2.0, -1.0, 0.7]);
        let (_q, r) = weight_transform(&w);
        let wv = w.values();
        let rv = r.values();
        for i in 0..2 {
            let wrow = &wv[i * 3..(i + 1) * 3];
            let rrow = &rv[i * 3..(i + 1) * 3];
            let argmax_w = (0..3).max_by(|&a, &b| wrow[a].partial_cmp(&wrow[b]).unwrap());
            let argmin_r = (0..3).min_by(|&a, &b| rrow[a].partial_cmp(&rrow[b]).unwrap());
            assert_eq!(argmax_w, argmin_r);
        }
    }

    #[test]
    fn r_at_least_one_with_row_min_one() {
        let w = Tensor::new(2, 4, vec![5.0, -3.0, 0.1, 2.0, 1e8, -1e8, 0.0, 42.0]);
        let (q, r) = weight_transform(&w);
        let rv = r.values();
        for i in 0..2 {
            let row = &rv[i * 4..(i + 1) * 4];
            assert!(row.iter().all(|v| *v >= 1.0 - 1e-12));
            let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!((min - 1.0).abs() < 1e-12);
        }
        // Q row sums are 1 + C*eps
        let qv = q.values();
        for i in 0..2 {
            let s: f64 = qv[i * 4..(i + 1) * 4].iter().sum();
            assert!((s - (1.0 + 4.0 * WEIGHT_EPS)).abs() < 1e-12);
        }
    }

    #[test]
    fn row_shift_invariance_of_weight_transform() {
        let w1 = Tensor::new(1, 3, vec![0.4, -1.2, 2.2]);
        let w2 = w1.add_scalar(123.456);
        let (_q1, r1) = weight_transform(&w1);
        let (_q2, r2) = weight_transform(&w2);
        for (a, b) in r1.values().iter().zip(r2.values().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn unit_weights_collapse_to_plain_ce() {
        let s = Tensor::new(2, 3, vec![0.5, -1.0, 0.3, 2.0, 0.1, -0.4]);
        let y = one_hot(&[2, 0], 3);
        let ones = Tensor::new(2, 3, vec![1.0; 6]);
        let l2 = loss_weighted_ce(&s, &y, &ones).item();
        let ce = cross_entropy(&s, &y).item();
        assert!((l2 - ce).abs() < 1e-14);
    }

    #[test]
    fn weighted_ce_finite_for_huge_logits() {
        let s = Tensor::new(1, 2, vec![1e308, 1e308 / 2.0]);
        let y = one_hot(&[0], 2);
        let ones = Tensor::new(1, 2, vec![1.0; 2]);
        assert!(loss_weighted_ce(&s, &y, &ones).item().is_finite());
    }

    #[test]
    fn weighted_ce_matches_log_softmax_oracle() {
        let s = Tensor::new(2, 2, vec![0.7, -0.3, 1.2, 2.5]);
        let y = one_hot(&[0, 1], 2);
        let r = Tensor::new(2, 2, vec![1.5, 1.0, 1.0, 3.0]);
        let got = loss_weighted_ce(&s, &y, &r).item();
        // explicit arithmetic oracle
        let sv = s.values();
        let mut want = 0.0;
        for i in 0..2 {
            let row = &sv[i * 2..(i + 1) * 2];
            let m = row[0].max(row[1]);
            let lse = ((row[0] - m).exp() + (row[1] - m).exp()).ln() + m;
            let label = if i == 0 { 0 } else { 1 };
            let weight = if i == 0 { 1.5 } else { 3.0 };
            want -= weight * (row[label] - lse);
        }
        want /= 2.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn l2_with_r_geq_one_dominates_plain_ce() {
        let s = Tensor::new(2, 3, vec![0.5, -1.0, 0.3, 2.0, 0.1, -0.4]);
        let y = one_hot(&[1, 2], 3);
        let w = Tensor::new(2, 3, vec![0.2, 1.0, -0.7, 0.0, 0.5, -0.3]);
        let (_q, r) = weight_transform(&w);
        assert!(loss_weighted_ce(&s, &y, &r).item() >= cross_entropy(&s, &y).item());
    }

    #[test]
    fn classifier_loss_collapses() {
        let s = Tensor::new(2, 2, vec![0.7, -0.3, 1.2, 2.5]);
        let y = one_hot(&[0, 1], 2);
        let ones = Tensor::new(2, 2, vec![1.0; 4]);
        // R = 1 and sga_logits = S: L1 = plain CE
        let l1 = loss_classifier(&s, &y, &ones, &s).item();
        assert!((l1 - cross_entropy(&s, &y).item()).abs() < 1e-14);
    }

    #[test]
    fn generator_loss_uniform_w_equals_l2() {
        let s = Tensor::new(2, 2, vec![0.7, -0.3, 1.2, 2.5]);
        let y = one_hot(&[0, 1], 2);
        let w = Tensor::new(2, 2, vec![3.0, 3.0, -1.0, -1.0]);
        let (_q, r) = weight_transform(&w);
        let l3 = loss_generator(&s, &y, &w, 0.5).item();
        let l2 = loss_weighted_ce(&s, &y, &r).item();
        assert!((l3 - l2).abs() < 1e-9);
    }

    #[test]
    fn spread_increases_regularizer() {
        // fixed L2 inputs; widen one W row and watch sum(R log R) grow
        let y = one_hot(&[0], 2);
        let s = Tensor::new(1, 2, vec![0.0, 0.0]);
        let mut last = f64::NEG_INFINITY;
        for spread in [0.0, 0.5, 1.0, 2.0] {
            let w = Tensor::new(1, 2, vec![0.0, spread]);
            let (_q, r) = weight_transform(&w);
            let reg: f64 = r
                .values()
                .iter()
                .map(|v| v * v.ln())
                .sum();
            assert!(reg >= last);
            last = reg;
        }
        let _ = (y, s);
    }

    #[test]
    fn generator_loss_hand_instance() {
        // N=1, C=2: compute both terms by hand
        let s = Tensor::new(1, 2, vec![1.0, 0.0]);
        let y = one_hot(&[0], 2);
        let w = Tensor::new(1, 2, vec![0.0, std::f64::consts::LN_2]);
        let got = loss_generator(&s, &y, &w, 0.5).item();
        // Q = (2/3 + eps, 1/3 + eps), R = (2, 1) up to eps
        let (q0, q1) = (2.0 / 3.0 + WEIGHT_EPS, 1.0 / 3.0 + WEIGHT_EPS);
        let (r0, r1): (f64, f64) = (q0 / q1, 1.0);
        let lse = (1.0f64.exp() + 1.0).ln();
        let l2 = -r0 * (1.0 - lse);
        let reg = 0.5 / 2.0 * (r0 * r0.ln() + r1 * r1.ln());
        assert!((got - (l2 - reg)).abs() < 1e-10);
    }

    #[test]
    fn cwg_forward_shape_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = CwgModel::new(
            4,
            3,
            8,
            1,
            2,
            2,
            3,
            0.0,
            CwgFusion::PerBranchColumn,
            &mut rng,
        )
        .unwrap();
        let labels = [0usize, 1, 2, 0];
        let a2 = build_relationship_graph(&labels);
        let y = one_hot(&labels, 3);
        let masked = mask_graphs(&a2, &y).unwrap();
        let x1: Vec<Tensor> = (0..4).map(|_| Tensor::new(4, 3, vec![0.25; 12])).collect();
        let w = model.forward(&x1, &masked, false, &mut rng);
        assert_eq!(w.shape(), (4, 3));
        assert!(w.is_finite());
    }

    #[test]
    fn summed_fusion_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let model = CwgModel::new(
            4,
            3,
            8,
            1,
            2,
            2,
            2,
            0.0,
            CwgFusion::SummedLogits,
            &mut rng,
        )
        .unwrap();
        let labels = [0usize, 1, 0];
        let a2 = build_relationship_graph(&labels);
        let y = one_hot(&labels, 2);
        let masked = mask_graphs(&a2, &y).unwrap();
        let x1: Vec<Tensor> = (0..3).map(|_| Tensor::new(4, 3, vec![0.5; 12])).collect();
        let w = model.forward(&x1, &masked, false, &mut rng);
        assert_eq!(w.shape(), (3, 2));
    }
}
