//! Single graph attention: centrality-based ROI pooling followed by a small
//! transformer encoder whose class token represents the sample.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::FusedMatrix;
use crate::nn::{init_normal_002, LayerNorm, Linear};
use crate::tensor::Tensor;

/// How the per-ROI similarity column is computed from centrality distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// Gaussian kernel of the ROI's own centrality distance (default).
    CentralityKernel,
    /// Mean of pairwise Gaussian kernel similarities to all other ROIs.
    MeanPairwiseKernel,
}

/// Pooled ROI features (R x F') with the appended similarity column; the
/// floor(R/2) highest-centrality ROIs have their first F columns zeroed.
#[derive(Debug, Clone)]
pub struct PooledMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    /// Indices of the ROIs whose feature columns were zeroed.
    pub zeroed: Vec<usize>,
    pub sigma: f64,
}

impl PooledMatrix {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.rows, self.cols, self.values.clone())
    }
}

/// Centrality pooling: zero out the floor(R/2) ROIs with the greatest summed
/// pairwise distance (ties keep the lower index) and append a Gaussian-kernel
/// similarity column computed from the original, pre-zeroing centralities.
pub fn centrality_pool(x: &FusedMatrix, mode: SimilarityMode) -> Result<PooledMatrix> {
    let r = x.rows;
    let f = x.cols;
    if r < 2 {
        return Err(Error::Config("centrality_pool requires R >= 2".into()));
    }
    // pairwise Euclidean distances between ROI rows
    let mut dist = vec![0.0; r * r];
    for i in 0..r {
        for j in (i + 1)..r {
            let d: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dist[i * r + j] = d;
            dist[j * r + i] = d;
        }
    }
    let centrality: Vec<f64> = (0..r)
        .map(|i| dist[i * r..(i + 1) * r].iter().sum())
        .collect();
    let sigma = centrality.iter().sum::<f64>() / r as f64;

    let similarity: Vec<f64> = if sigma == 0.0 {
        log::warn!("centrality_pool: all ROI rows identical, degenerate sigma");
        vec![1.0; r]
    } else {
        match mode {
            SimilarityMode::CentralityKernel => centrality
                .iter()
                .map(|c| (-c * c / (2.0 * sigma * sigma)).exp())
                .collect(),
            SimilarityMode::MeanPairwiseKernel => (0..r)
                .map(|i| {
                    let s: f64 = (0..r)
                        .filter(|j| *j != i)
                        .map(|j| {
                            let d = dist[i * r + j];
                            (-d * d / (2.0 * sigma * sigma)).exp()
                        })
                        .sum();
                    s / (r - 1) as f64
                })
                .collect(),
        }
    };

    // zeroing priority: greater centrality first, higher index first on ties
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| {
        centrality[b]
            .partial_cmp(&centrality[a])
            .unwrap()
            .then(b.cmp(&a))
    });
    let mut zeroed: Vec<usize> = order[..r / 2].to_vec();
    zeroed.sort_unstable();

    let cols = f + 1;
    let mut values = vec![0.0; r * cols];
    for i in 0..r {
        if !zeroed.contains(&i) {
            values[i * cols..i * cols + f].copy_from_slice(x.row(i));
        }
        values[i * cols + f] = similarity[i];
    }
    Ok(PooledMatrix {
        rows: r,
        cols,
        values,
        zeroed,
        sigma,
    })
}

/// Class token and auxiliary logits read out of the encoder.
pub struct EncoderOutput {
    pub cls: Tensor,
    pub sga_logits: Tensor,
}

struct EncoderBlock {
    norm1: LayerNorm,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    w_o: Tensor,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Pre-norm ViT-style encoder over the 1 + R token sequence.
pub struct SgaEncoder {
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub classes: usize,
    pub dropout: f64,
    embed: Linear,
    cls_token: Tensor,
    pos_embed: Tensor,
    blocks: Vec<EncoderBlock>,
    final_norm: LayerNorm,
    head: Linear,
}

impl SgaEncoder {
    pub fn new(
        roi_count: usize,
        in_dim: usize,
        embed_dim: usize,
        depth: usize,
        heads: usize,
        classes: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if embed_dim % heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {embed_dim} not divisible by {heads} heads"
            )));
        }
        let blocks = (0..depth)
            .map(|_| EncoderBlock {
                norm1: LayerNorm::new(embed_dim, 1e-5),
                w_q: crate::nn::init_uniform(embed_dim, embed_dim, embed_dim, rng),
                w_k: crate::nn::init_uniform(embed_dim, embed_dim, embed_dim, rng),
                w_v: crate::nn::init_uniform(embed_dim, embed_dim, embed_dim, rng),
                w_o: crate::nn::init_uniform(embed_dim, embed_dim, embed_dim, rng),
                norm2: LayerNorm::new(embed_dim, 1e-5),
                ff1: Linear::new(embed_dim, 4 * embed_dim, rng),
                ff2: Linear::new(4 * embed_dim, embed_dim, rng),
            })
            .collect();
        Ok(SgaEncoder {
            embed_dim,
            heads,
            depth,
            classes,
            dropout,
            embed: Linear::new(in_dim, embed_dim, rng),
            cls_token: init_normal_002(1, embed_dim, rng),
            pos_embed: init_normal_002(1 + roi_count, embed_dim, rng),
            blocks,
            final_norm: LayerNorm::new(embed_dim, 1e-5),
            head: Linear::new(embed_dim, classes, rng),
        })
    }

    /// Freeze positional embeddings to zero (permutation-invariance tests).
    pub fn zero_positional_embeddings(&self) {
        let n = self.pos_embed.rows() * self.pos_embed.cols();
        self.pos_embed.set_values(&vec![0.0; n]);
    }

    fn attention(&self, block: &EncoderBlock, x: &Tensor) -> Tensor {
        let (_t, e) = x.shape();
        let d = e / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let q = x.matmul(&block.w_q);
        let k = x.matmul(&block.w_k);
        let v = x.matmul(&block.w_v);
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * d, d);
            let kh = k.slice_cols(h * d, d);
            let vh = v.slice_cols(h * d, d);
            let scores = qh.matmul(&kh.transpose()).mul_scalar(scale);
            heads.push(scores.row_softmax().matmul(&vh));
        }
        Tensor::concat_cols(&heads).matmul(&block.w_o)
    }

    /// Encode one pooled sample into its class token and auxiliary logits.
    pub fn encode(
        &self,
        x1: &Tensor,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> EncoderOutput {
        let (r, _f) = x1.shape();
        assert_eq!(
            r + 1,
            self.pos_embed.rows(),
            "token count does not match positional embeddings"
        );
        let embedded = self
            .embed
            .forward(x1)
            .dropout(self.dropout, training, rng);
        let tokens = Tensor::concat_rows(&[self.cls_token.clone(), embedded]);
        let tokens = tokens.add(&self.pos_embed);
        let mut x = tokens;
        for block in &self.blocks {
            let attn = self.attention(block, &block.norm1.forward(&x));
            x = x.add(&attn);
            let ff = block
                .ff1
                .forward(&block.norm2.forward(&x))
                .gelu()
                .dropout(self.dropout, training, rng);
            let ff = block.ff2.forward(&ff);
            x = x.add(&ff);
        }
        let x = self.final_norm.forward(&x);
        let cls = x.slice_rows(0, 1);
        let sga_logits = self.head.forward(&cls);
        EncoderOutput { cls, sga_logits }
    }

    /// Encode a batch of pooled samples into (N, E) embeddings and (N, C)
    /// auxiliary logits.
    pub fn encode_batch(
        &self,
        x1_batch: &[Tensor],
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> (Tensor, Tensor) {
        let mut cls_rows = Vec::with_capacity(x1_batch.len());
        let mut logit_rows = Vec::with_capacity(x1_batch.len());
        for x1 in x1_batch {
            let out = self.encode(x1, training, rng);
            cls_rows.push(out.cls);
            logit_rows.push(out.sga_logits);
        }
        (
            Tensor::concat_rows(&cls_rows),
            Tensor::concat_rows(&logit_rows),
        )
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.embed.params() {
            out.push((format!("embed.{n}"), t));
        }
        out.push(("cls_token".into(), self.cls_token.clone()));
        out.push(("pos_embed".into(), self.pos_embed.clone()));
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in b.norm1.params() {
                out.push((format!("block{i}.norm1.{n}"), t));
            }
            out.push((format!("block{i}.w_q"), b.w_q.clone()));
            out.push((format!("block{i}.w_k"), b.w_k.clone()));
            out.push((format!("block{i}.w_v"), b.w_v.clone()));
            out.push((format!("block{i}.w_o"), b.w_o.clone()));
            for (n, t) in b.norm2.params() {
                out.push((format!("block{i}.norm2.{n}"), t));
            }
            for (n, t) in b.ff1.params() {
                out.push((format!("block{i}.ff1.{n}"), t));
            }
            for (n, t) in b.ff2.params() {
                out.push((format!("block{i}.ff2.{n}"), t));
            }
        }
        for (n, t) in self.final_norm.params() {
            out.push((format!("final_norm.{n}"), t));
        }
        for (n, t) in self.head.params() {
            out.push((format!("head.{n}"), t));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn fused(rows: usize, cols: usize, values: Vec<f64>) -> FusedMatrix {
        FusedMatrix {
            rows,
            cols,
            values,
            column_names: (0..cols).map(|i| format!("c{i}")).collect(),
        }
    }

    #[test]
    fn identical_rows_degenerate_pooling() {
        let x = fused(2, 2, vec![0.5, 0.5, 0.5, 0.5]);
        let p = centrality_pool(&x, SimilarityMode::CentralityKernel).unwrap();
        assert_eq!(p.sigma, 0.0);
        // similarity 1 for all, row 1 zeroed by the tie-break
        assert_eq!(p.zeroed, vec![1]);
        assert_eq!(p.values[2], 1.0);
        assert_eq!(p.values[5], 1.0);
        assert_eq!(&p.values[3..5], &[0.0, 0.0]);
        assert_eq!(&p.values[0..2], &[0.5, 0.5]);
    }

    #[test]
    fn two_rows_at_distance_two() {
        let x = fused(2, 2, vec![0.0, 0.0, 2.0, 0.0]);
        let p = centrality_pool(&x, SimilarityMode::CentralityKernel).unwrap();
        assert_eq!(p.sigma, 2.0);
        let want = (-0.5f64).exp();
        assert!((p.values[2] - want).abs() < 1e-12);
        assert!((p.values[5] - want).abs() < 1e-12);
    }

    #[test]
    fn pooling_matches_brute_force_oracle() {
        let vals = vec![
            0.1, 0.9, //
            0.4, 0.2, //
            0.8, 0.7, //
            0.0, 0.3,
        ];
        let x = fused(4, 2, vals.clone());
        let p = centrality_pool(&x, SimilarityMode::CentralityKernel).unwrap();
        // brute-force oracle over all pairwise distances
        let d = |i: usize, j: usize| {
            let (a, b) = (&vals[i * 2..i * 2 + 2], &vals[j * 2..j * 2 + 2]);
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
        };
        let c: Vec<f64> = (0..4)
            .map(|i| (0..4).map(|j| d(i, j)).sum::<f64>())
            .collect();
        let sigma = c.iter().sum::<f64>() / 4.0;
        let mut by_c: Vec<usize> = (0..4).collect();
        by_c.sort_by(|&a, &b| c[b].partial_cmp(&c[a]).unwrap());
        let mut want_zeroed = by_c[..2].to_vec();
        want_zeroed.sort_unstable();
        assert_eq!(p.zeroed, want_zeroed);
        for i in 0..4 {
            let want = (-c[i] * c[i] / (2.0 * sigma * sigma)).exp();
            assert!((p.values[i * 3 + 2] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_preserves_surviving_rows_and_order() {
        let vals: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        let x = fused(5, 2, vals.clone());
        let p = centrality_pool(&x, SimilarityMode::CentralityKernel).unwrap();
        assert_eq!(p.zeroed.len(), 2);
        for i in 0..5 {
            if !p.zeroed.contains(&i) {
                assert_eq!(&p.values[i * 3..i * 3 + 2], &vals[i * 2..i * 2 + 2]);
            } else {
                assert_eq!(&p.values[i * 3..i * 3 + 2], &[0.0, 0.0]);
            }
        }
    }

    #[test]
    fn similarity_computed_before_zeroing() {
        // the two zeroed ROIs still get their original-centrality similarity;
        // if computed after zeroing, their rows would collapse to (0, 0, s)
        // distances and yield a different value
        let vals = vec![
            0.0, 0.0, //
            0.1, 0.0, //
            0.9, 0.9, //
            1.0, 1.0,
        ];
        let x = fused(4, 2, vals.clone());
        let p = centrality_pool(&x, SimilarityMode::CentralityKernel).unwrap();
        // recompute similarities from original rows only
        let d = |i: usize, j: usize| {
            let (a, b) = (&vals[i * 2..i * 2 + 2], &vals[j * 2..j * 2 + 2]);
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
        };
        let c: Vec<f64> = (0..4)
            .map(|i| (0..4).map(|j| d(i, j)).sum::<f64>())
            .collect();
        let sigma = c.iter().sum::<f64>() / 4.0;
        for &i in &p.zeroed {
            let want = (-c[i] * c[i] / (2.0 * sigma * sigma)).exp();
            assert!((p.values[i * 3 + 2] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_monotone_in_centrality() {
        let vals = vec![
            0.0, 0.0, //
            0.2, 0.1, //
            0.9, 0.8, //
            0.5, 0.5,
        ];
        let x = fused(4, 2, vals);
        let p = centrality_pool(&x, SimilarityMode::CentralityKernel).unwrap();
        // larger centrality -> smaller (or equal) similarity
        let d = |i: usize, j: usize| {
            let a = &x.values[i * 2..i * 2 + 2];
            let b = &x.values[j * 2..j * 2 + 2];
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
        };
        let c: Vec<f64> = (0..4)
            .map(|i| (0..4).map(|j| d(i, j)).sum::<f64>())
            .collect();
        for i in 0..4 {
            for j in 0..4 {
                if c[i] < c[j] {
                    assert!(p.values[i * 3 + 2] >= p.values[j * 3 + 2]);
                }
            }
        }
    }

    #[test]
    fn encoder_output_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = SgaEncoder::new(6, 4, 8, 2, 2, 3, 0.0, &mut rng).unwrap();
        let x1 = Tensor::new(6, 4, vec![0.2; 24]);
        let out = enc.encode(&x1, false, &mut rng);
        assert_eq!(out.cls.shape(), (1, 8));
        assert_eq!(out.sga_logits.shape(), (1, 3));
    }

    #[test]
    fn encoder_permutation_invariant_with_zero_pos_embed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = SgaEncoder::new(4, 3, 8, 2, 2, 2, 0.0, &mut rng).unwrap();
        enc.zero_positional_embeddings();
        use rand::Rng;
        let vals: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x1 = Tensor::new(4, 3, vals.clone());
        let perm = [3usize, 1, 0, 2];
        let mut pv = vec![0.0; 12];
        for (new_i, &old_i) in perm.iter().enumerate() {
            pv[new_i * 3..(new_i + 1) * 3].copy_from_slice(&vals[old_i * 3..(old_i + 1) * 3]);
        }
        let x1p = Tensor::new(4, 3, pv);
        let a = enc.encode(&x1, false, &mut rng).cls.values();
        let b = enc.encode(&x1p, false, &mut rng).cls.values();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn encoder_deterministic_without_dropout() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = SgaEncoder::new(4, 3, 8, 2, 2, 2, 0.5, &mut rng).unwrap();
        let x1 = Tensor::new(4, 3, vec![0.1; 12]);
        let a = enc.encode(&x1, false, &mut rng).cls.values();
        let b = enc.encode(&x1, false, &mut rng).cls.values();
        assert_eq!(a, b);
    }

    #[test]
    fn embed_dim_not_divisible_by_heads_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(SgaEncoder::new(4, 3, 9, 1, 2, 2, 0.0, &mut rng).is_err());
    }
}
