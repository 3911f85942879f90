//! Training-set frequency tables over ordered label pairs, and the bias terms
//! derived from them.

use crate::scene::{Scene, BACKGROUND};
use crate::tensor::Tensor;

/// Logit clamp applied to the link bias.
pub const LINK_BIAS_LIMIT: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FreqTable {
    pub label_count: usize,
    pub predicate_count: usize,
    /// `D_l x D_l`: P(any relation | subject label, object label).
    pub pair_link_prob: Vec<f64>,
    /// `D_l x D_l x (D_r + 1)`: P(predicate | subject label, object label),
    /// background at index 0.
    pub pair_pred_prob: Vec<f64>,
    /// Set when the corpus contained no object pairs at all.
    pub empty_corpus: bool,
}

impl FreqTable {
    /// Counts every ordered object pair of every scene; unrelated pairs count
    /// toward background. Probabilities are `(count + eps) / (total + eps * classes)`.
    pub fn build(scenes: &[Scene], label_count: usize, predicate_count: usize, eps: f64) -> Self {
        assert!(eps > 0.0, "smoothing must be positive");
        let dl = label_count;
        let classes = predicate_count + 1;
        let mut link = vec![0.0; dl * dl];
        let mut total = vec![0.0; dl * dl];
        let mut pred = vec![0.0; dl * dl * classes];
        let mut pairs_seen = 0usize;
        for s in scenes {
            let n = s.num_objects();
            let labels = s.labels();
            let mut pair_pred = vec![BACKGROUND; n * n];
            for r in &s.relations {
                pair_pred[r.subj * n + r.obj] = r.predicate;
            }
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let cell = (labels[i] - 1) * dl + (labels[j] - 1);
                    let p = pair_pred[i * n + j];
                    total[cell] += 1.0;
                    if p != BACKGROUND {
                        link[cell] += 1.0;
                    }
                    pred[cell * classes + p] += 1.0;
                    pairs_seen += 1;
                }
            }
        }
        let pair_link_prob = link
            .iter()
            .zip(&total)
            .map(|(c, t)| (c + eps) / (t + 2.0 * eps))
            .collect();
        let mut pair_pred_prob = vec![0.0; dl * dl * classes];
        for cell in 0..dl * dl {
            for m in 0..classes {
                pair_pred_prob[cell * classes + m] =
                    (pred[cell * classes + m] + eps) / (total[cell] + eps * classes as f64);
            }
        }
        FreqTable {
            label_count,
            predicate_count,
            pair_link_prob,
            pair_pred_prob,
            empty_corpus: pairs_seen == 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.predicate_count + 1
    }

    fn cell(&self, li: usize, lj: usize) -> usize {
        (li - 1) * self.label_count + (lj - 1)
    }

    pub fn link_prob(&self, li: usize, lj: usize) -> f64 {
        self.pair_link_prob[self.cell(li, lj)]
    }

    pub fn pred_prob(&self, m: usize, li: usize, lj: usize) -> f64 {
        self.pair_pred_prob[self.cell(li, lj) * self.classes() + m]
    }

    /// `logit(P(link | li, lj))`, clamped to `[-10, 10]`.
    pub fn link_bias(&self, li: usize, lj: usize) -> f64 {
        let p = self.link_prob(li, lj);
        (p / (1.0 - p)).ln().clamp(-LINK_BIAS_LIMIT, LINK_BIAS_LIMIT)
    }

    /// `log P(m | li, lj)`.
    pub fn pred_bias(&self, m: usize, li: usize, lj: usize) -> f64 {
        self.pred_prob(m, li, lj).ln()
    }

    /// Most frequent class for the pair, background included; ties go to the
    /// smallest id.
    pub fn pred_argmax(&self, li: usize, lj: usize) -> usize {
        let c = self.cell(li, lj) * self.classes();
        crate::scene::argmax(&self.pair_pred_prob[c..c + self.classes()])
    }

    /// Link biases as a `D_l x D_l` tensor.
    pub fn link_bias_tensor(&self) -> Tensor {
        let dl = self.label_count;
        let mut data = Vec::with_capacity(dl * dl);
        for li in 1..=dl {
            for lj in 1..=dl {
                data.push(self.link_bias(li, lj));
            }
        }
        Tensor::new(vec![dl, dl], data).expect("square table")
    }

    /// Predicate biases as a `D_l x D_l x (D_r + 1)` tensor.
    pub fn pred_bias_tensor(&self) -> Tensor {
        let dl = self.label_count;
        let data = self.pair_pred_prob.iter().map(|p| p.ln()).collect();
        Tensor::new(vec![dl, dl, self.classes()], data).expect("cube table")
    }
}
