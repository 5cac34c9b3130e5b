//! Projector between the visual and text embedding spaces, the attention
//! aggregator for slide bags, and max-pooling.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{Linear, LinearVars};
use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};

/// Hidden widths `(2·d, 4·d, 2·d)` for output width `d`.
pub fn default_projector_widths(d_t: usize) -> [usize; 3] {
    [2 * d_t, 4 * d_t, 2 * d_t]
}

fn fan_in_gaussian(input: usize, output: usize, rng: &mut SeededRng) -> Tensor {
    Tensor::randn(input, output, 1.0 / (input as f64).sqrt(), rng)
}

/// Four fully-connected layers, GELU after the first three.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub layers: Vec<Linear>,
}

pub struct ProjectorVars {
    layers: Vec<LinearVars>,
    vars: Vec<Var>,
}

impl Projector {
    pub fn new(d_in: usize, hidden: [usize; 3], d_out: usize, rng: &mut SeededRng) -> Self {
        let widths = [d_in, hidden[0], hidden[1], hidden[2], d_out];
        let layers = widths
            .windows(2)
            .map(|w| Linear {
                w: fan_in_gaussian(w[0], w[1], rng),
                b: Tensor::zeros(1, w[1]),
            })
            .collect();
        Projector { layers }
    }

    pub fn zeros(d_in: usize, hidden: [usize; 3], d_out: usize) -> Self {
        let widths = [d_in, hidden[0], hidden[1], hidden[2], d_out];
        Projector {
            layers: widths.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != 4 {
            return Err(Error::InvalidInput(format!(
                "projector needs 4 layers, found {}",
                self.layers.len()
            )));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].w.cols() != pair[1].w.rows() {
                return Err(Error::Dimension(format!("projector layers {i} and {} do not chain", i + 1)));
            }
        }
        for l in &self.layers {
            if l.b.shape() != (1, l.w.cols()) {
                return Err(Error::Dimension("projector bias width".into()));
            }
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].w.cols()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            l.named(&format!("projector.fc{i}"), &mut out);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            l.params_mut(&mut out);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ProjectorVars {
        let mut vars = Vec::new();
        let layers = self.layers.iter().map(|l| l.bind(g, trainable, &mut vars)).collect();
        ProjectorVars { layers, vars }
    }

    /// Maps one visual embedding to a `d_t` token vector.
    pub fn project(&self, e_v: &[f64]) -> Result<Vec<f64>> {
        if e_v.len() != self.in_dim() {
            return Err(Error::Dimension(format!(
                "projector input has {} values, expected {}",
                e_v.len(),
                self.in_dim()
            )));
        }
        let mut g = Graph::new();
        let pv = self.bind(&mut g, false);
        let x = g.constant(Tensor::row_vector(e_v));
        let y = pv.forward(&mut g, x);
        Ok(g.value(y).clone().into_vec())
    }
}

impl ProjectorVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, h);
            if i + 1 < self.layers.len() {
                h = g.gelu(h);
            }
        }
        h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub hidden: usize,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig { hidden: 64 }
    }
}

/// Attention pooling: `a = softmax_i(wᵀ tanh(V e_i))`, embedding `Σ a_i e_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionAggregator {
    /// `V`, stored input-major as `d_v×h`.
    pub v: Tensor,
    /// `h×1`
    pub w: Tensor,
}

pub struct AggregatorVars {
    v: Var,
    w: Var,
}

impl AttentionAggregator {
    /// `w` starts at zero: attention begins uniform (mean pooling) and
    /// learns to focus, rather than starting focused on arbitrary patches.
    pub fn new(d_v: usize, cfg: &AggregatorConfig, rng: &mut SeededRng) -> Self {
        AttentionAggregator {
            v: fan_in_gaussian(d_v, cfg.hidden, rng),
            w: Tensor::zeros(cfg.hidden, 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w.shape() != (self.v.cols(), 1) || self.v.cols() == 0 {
            return Err(Error::Dimension(format!(
                "aggregator V is {:?} but w is {:?}",
                self.v.shape(),
                self.w.shape()
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.v.rows()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("aggregator.v".into(), &self.v), ("aggregator.w".into(), &self.w)]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.v, &mut self.w]
    }

    pub fn param_count(&self) -> usize {
        self.v.len() + self.w.len()
    }

    /// `vars()` order is `[v, w]`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> AggregatorVars {
        AggregatorVars {
            v: g.leaf(self.v.clone(), trainable),
            w: g.leaf(self.w.clone(), trainable),
        }
    }

    /// Slide embedding and per-patch attention (bag order) for one `n×d_v` bag.
    pub fn aggregate(&self, bag: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        if bag.rows() == 0 {
            return Err(Error::EmptyBag);
        }
        if bag.cols() != self.dim() {
            return Err(Error::Dimension(format!(
                "bag embeddings have width {}, expected {}",
                bag.cols(),
                self.dim()
            )));
        }
        let mut g = Graph::new();
        let av = self.bind(&mut g, false);
        let e = g.constant(bag.clone());
        let (emb, att) = av.forward(&mut g, e, vec![0, bag.rows()]);
        Ok((g.value(emb).clone().into_vec(), g.value(att).clone().into_vec()))
    }
}

impl AggregatorVars {
    pub fn vars(&self) -> [Var; 2] {
        [self.v, self.w]
    }

    /// Stacked bag embeddings segmented by `offsets`; returns
    /// (`bags×d_v` embeddings, `N×1` attention column).
    pub fn forward(&self, g: &mut Graph, embeddings: Var, offsets: Vec<usize>) -> (Var, Var) {
        let h = g.matmul(embeddings, self.v);
        let h = g.tanh(h);
        let scores = g.matmul(h, self.w);
        let att = g.segment_softmax(scores, offsets.clone());
        let emb = g.segment_weighted_sum(att, embeddings, offsets);
        (emb, att)
    }
}

/// Elementwise maximum over a non-empty bag.
pub fn aggregate_maxpool(bag: &Tensor) -> Result<Vec<f64>> {
    if bag.rows() == 0 {
        return Err(Error::EmptyBag);
    }
    let mut out = bag.row(0).to_vec();
    for r in 1..bag.rows() {
        for (o, v) in out.iter_mut().zip(bag.row(r)) {
            *o = o.max(*v);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{max_relative_error, numeric_gradient};
    use crate::tensor::seeded_rng;
    use proptest::prelude::*;

    #[test]
    fn projector_shapes() {
        let mut rng = seeded_rng(1);
        let p = Projector::new(8, default_projector_widths(4), 4, &mut rng);
        p.validate().unwrap();
        assert_eq!(p.layers.len(), 4);
        assert_eq!(p.project(&[0.5; 8]).unwrap().len(), 4);
        assert!(matches!(p.project(&[0.5; 7]), Err(Error::Dimension(_))));
        assert_eq!(default_projector_widths(64), [128, 256, 128]);
    }

    #[test]
    fn zero_projector_outputs_zero() {
        let p = Projector::zeros(8, [6, 7, 5], 4);
        assert_eq!(p.project(&[1.0; 8]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn projector_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(2);
        let p = Projector::new(5, [6, 7, 6], 3, &mut rng);
        let x = Tensor::randn(4, 5, 1.0, &mut rng);
        let probe = Tensor::randn(4, 3, 1.0, &mut rng);
        let loss_with = |p: &Projector| {
            let mut g = Graph::new();
            let pv = p.bind(&mut g, true);
            let xv = g.constant(x.clone());
            let y = pv.forward(&mut g, xv);
            let y = g.tanh(y);
            let prod = g.mul_const(y, probe.clone());
            let l = g.sum(prod);
            (g, pv, l)
        };
        let (g, pv, l) = loss_with(&p);
        let mut grads = g.backward(l);
        let analytic: Vec<Tensor> = pv.vars().iter().map(|&v| grads.take(&g, v)).collect();
        for (i, an) in analytic.iter().enumerate() {
            let base = p.clone();
            let num = numeric_gradient(&p.params_ref(i), 1e-5, |t| {
                let mut q = base.clone();
                *q.params_mut()[i] = t.clone();
                let (g, _, l) = loss_with(&q);
                g.scalar(l)
            });
            let err = max_relative_error(an, &num, 1e-6);
            assert!(err <= 1e-4, "param {i}: {err}");
        }
    }

    impl Projector {
        fn params_ref(&self, i: usize) -> Tensor {
            self.named_params()[i].1.clone()
        }
    }

    #[test]
    fn single_element_bag() {
        let mut rng = seeded_rng(3);
        let agg = AttentionAggregator::new(4, &AggregatorConfig { hidden: 5 }, &mut rng);
        let bag = Tensor::randn(1, 4, 1.0, &mut rng);
        let (emb, att) = agg.aggregate(&bag).unwrap();
        assert_eq!(att, vec![1.0]);
        assert_eq!(emb, bag.row(0));
    }

    #[test]
    fn fresh_aggregator_is_uniform() {
        let mut rng = seeded_rng(4);
        let agg = AttentionAggregator::new(3, &AggregatorConfig { hidden: 5 }, &mut rng);
        let bag = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![3.0, 0.0, -1.0]]).unwrap();
        let (emb, att) = agg.aggregate(&bag).unwrap();
        assert_eq!(att, vec![0.5, 0.5]);
        assert_eq!(emb, vec![2.0, 1.0, 1.0]);
    }

    #[test]
    fn empty_bag_errors() {
        let mut rng = seeded_rng(4);
        let agg = AttentionAggregator::new(3, &AggregatorConfig::default(), &mut rng);
        assert!(matches!(agg.aggregate(&Tensor::zeros(0, 3)), Err(Error::EmptyBag)));
        assert!(matches!(aggregate_maxpool(&Tensor::zeros(0, 3)), Err(Error::EmptyBag)));
    }

    #[test]
    fn maxpool_examples() {
        let bag = Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0]]).unwrap();
        assert_eq!(aggregate_maxpool(&bag).unwrap(), vec![3.0, 5.0]);
        let one = Tensor::from_rows(&[vec![-1.0, 2.0]]).unwrap();
        assert_eq!(aggregate_maxpool(&one).unwrap(), vec![-1.0, 2.0]);
    }

    fn permuted(bag: &Tensor, perm: &[usize]) -> Tensor {
        Tensor::from_rows(&perm.iter().map(|&i| bag.row(i).to_vec()).collect::<Vec<_>>()).unwrap()
    }

    proptest! {
        #[test]
        fn attention_is_a_permutation_invariant_simplex(seed in 0u64..500, n in 1usize..9, rot in 0usize..8) {
            let mut rng = seeded_rng(seed);
            let mut agg = AttentionAggregator::new(6, &AggregatorConfig { hidden: 7 }, &mut rng);
            agg.w = Tensor::randn(7, 1, 1.0, &mut rng);
            let bag = Tensor::randn(n, 6, 2.0, &mut rng);
            let (emb, att) = agg.aggregate(&bag).unwrap();
            prop_assert!(att.iter().all(|&a| a >= 0.0));
            prop_assert!((att.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let (emb2, att2) = agg.aggregate(&permuted(&bag, &perm)).unwrap();
            for (a, b) in emb.iter().zip(&emb2) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            for (i, &p) in perm.iter().enumerate() {
                prop_assert!((att2[i] - att[p]).abs() <= 1e-12);
            }
        }

        #[test]
        fn maxpool_is_invariant_and_idempotent(seed in 0u64..500, n in 1usize..9, rot in 0usize..8) {
            let mut rng = seeded_rng(seed);
            let bag = Tensor::randn(n, 5, 1.0, &mut rng);
            let base = aggregate_maxpool(&bag).unwrap();
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            prop_assert_eq!(&aggregate_maxpool(&permuted(&bag, &perm)).unwrap(), &base);
            let doubled: Vec<usize> = (0..n).chain(0..n).collect();
            prop_assert_eq!(&aggregate_maxpool(&permuted(&bag, &doubled)).unwrap(), &base);
        }
    }
}
