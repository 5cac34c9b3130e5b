//! Low-rank adaptation of attention projections: `W' = W + (alpha/r)·A·B`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{derive_seed, seeded_rng, SeededRng, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Q, Projection::K, Projection::V];

    fn index(self) -> usize {
        match self {
            Projection::Q => 0,
            Projection::K => 1,
            Projection::V => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LoraTarget {
    pub component: Component,
    pub layer: usize,
    pub matrix: Projection,
}

impl LoraTarget {
    pub fn name(&self) -> String {
        let c = match self.component {
            Component::Encoder => "encoder",
            Component::Decoder => "decoder",
        };
        format!("{c}.layer{}.{}", self.layer, self.matrix.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 6,
            alpha: 12.0,
            dropout_p: 0.1,
        }
    }
}

/// Dropout source: `None` means evaluation mode.
pub struct Dropout<'a>(pub Option<&'a mut SeededRng>);

impl Dropout<'_> {
    pub fn eval() -> Dropout<'static> {
        Dropout(None)
    }

    pub fn is_training(&self) -> bool {
        self.0.is_some()
    }

    fn mask(&mut self, rows: usize, cols: usize, p: f64) -> Option<Tensor> {
        match &mut self.0 {
            Some(rng) if p > 0.0 => Some(Tensor::dropout_mask(rows, cols, p, rng)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    /// `d×r`
    pub a: Tensor,
    /// `r×k`
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    pub target: LoraTarget,
}

impl LoraAdapter {
    /// `A ~ N(0, 0.02)`, `B = 0`, so the initial delta is exactly zero.
    pub fn init(d: usize, k: usize, cfg: &LoraConfig, target: LoraTarget, seed: u64) -> Result<Self> {
        if cfg.rank < 1 || cfg.rank > d.min(k) {
            return Err(Error::InvalidRank {
                rank: cfg.rank,
                rows: d,
                cols: k,
            });
        }
        let mut rng = seeded_rng(seed);
        Ok(LoraAdapter {
            a: Tensor::randn(d, cfg.rank, INIT_STD, &mut rng),
            b: Tensor::zeros(cfg.rank, k),
            rank: cfg.rank,
            alpha: cfg.alpha,
            dropout_p: cfg.dropout_p,
            target,
        })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn in_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.b.cols()
    }

    /// `(alpha/r)·A·B`
    pub fn effective_delta(&self) -> Tensor {
        self.a.matmul(&self.b).scale(self.scaling())
    }

    fn check_weight(&self, w: &Tensor) -> Result<()> {
        if w.shape() != (self.in_dim(), self.out_dim()) {
            return Err(Error::Dimension(format!(
                "weight is {:?}, adapter expects {}x{}",
                w.shape(),
                self.in_dim(),
                self.out_dim()
            )));
        }
        Ok(())
    }

    /// `x·W + (alpha/r)·(drop(x)·A)·B`; dropout only applies in training mode.
    pub fn adapted_forward(&self, x: &Tensor, w: &Tensor, dropout: &mut Dropout) -> Result<Tensor> {
        self.check_weight(w)?;
        if x.cols() != w.rows() {
            return Err(Error::Dimension(format!(
                "input has {} columns, weight has {} rows",
                x.cols(),
                w.rows()
            )));
        }
        let base = x.matmul(w);
        let branch_in = match dropout.mask(x.rows(), x.cols(), self.dropout_p) {
            Some(mask) => {
                let data = x.data().iter().zip(mask.data()).map(|(a, b)| a * b).collect();
                Tensor::from_vec(x.rows(), x.cols(), data)?
            }
            None => x.clone(),
        };
        let branch = branch_in.matmul(&self.a).matmul(&self.b).scale(self.scaling());
        Ok(base.add(&branch))
    }

    pub fn merge(&self, w: &Tensor) -> Result<Tensor> {
        self.check_weight(w)?;
        Ok(w.add(&self.effective_delta()))
    }

    pub fn unmerge(&self, w_new: &Tensor) -> Result<Tensor> {
        self.check_weight(w_new)?;
        Ok(w_new.sub(&self.effective_delta()))
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundLora {
        BoundLora {
            a: g.leaf(self.a.clone(), trainable),
            b: g.leaf(self.b.clone(), trainable),
            scaling: self.scaling(),
            dropout_p: self.dropout_p,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLora {
    pub a: Var,
    pub b: Var,
    pub scaling: f64,
    pub dropout_p: f64,
}

/// `x·W`, plus the low-rank branch when an adapter is bound.
pub fn project(g: &mut Graph, x: Var, w: Var, lora: Option<&BoundLora>, dropout: &mut Dropout) -> Var {
    let base = g.matmul(x, w);
    let Some(l) = lora else { return base };
    let (rows, cols) = g.value(x).shape();
    let branch_in = match dropout.mask(rows, cols, l.dropout_p) {
        Some(mask) => g.mul_const(x, mask),
        None => x,
    };
    let down = g.matmul(branch_in, l.a);
    let up = g.matmul(down, l.b);
    let scaled = g.scale(up, l.scaling);
    g.add(base, scaled)
}

/// Adapters for every `(layer, q/k/v)` target of one backbone component.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraSet {
    pub component: Component,
    pub adapters: Vec<LoraAdapter>,
}

impl LoraSet {
    pub fn empty(component: Component) -> Self {
        LoraSet {
            component,
            adapters: Vec::new(),
        }
    }

    /// One `width×width` adapter per q/k/v projection of `n_layers` layers.
    pub fn for_component(
        component: Component,
        n_layers: usize,
        width: usize,
        cfg: &LoraConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut adapters = Vec::with_capacity(n_layers * 3);
        for layer in 0..n_layers {
            for matrix in Projection::ALL {
                let target = LoraTarget {
                    component,
                    layer,
                    matrix,
                };
                let s = derive_seed(seed, &target.name());
                adapters.push(LoraAdapter::init(width, width, cfg, target, s)?);
            }
        }
        Ok(LoraSet {
            component,
            adapters,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for a in &self.adapters {
            if a.target.component != self.component {
                return Err(Error::InvalidInput(format!(
                    "adapter {} does not belong to this set",
                    a.target.name()
                )));
            }
            if !seen.insert(a.target) {
                return Err(Error::InvalidInput(format!("duplicate adapter {}", a.target.name())));
            }
        }
        Ok(())
    }

    pub fn get(&self, layer: usize, matrix: Projection) -> Option<&LoraAdapter> {
        self.adapters
            .iter()
            .find(|a| a.target.layer == layer && a.target.matrix == matrix)
    }

    pub fn trainable_param_count(&self) -> usize {
        self.adapters.iter().map(LoraAdapter::param_count).sum()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.adapters
            .iter()
            .flat_map(|a| {
                let n = a.target.name();
                [(format!("{n}.a"), &a.a), (format!("{n}.b"), &a.b)]
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.adapters
            .iter_mut()
            .flat_map(|a| [&mut a.a, &mut a.b])
            .collect()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundLoraSet {
        let n_layers = self.adapters.iter().map(|a| a.target.layer + 1).max().unwrap_or(0);
        let mut layers = vec![[None; 3]; n_layers];
        let mut vars = Vec::with_capacity(self.adapters.len() * 2);
        for a in &self.adapters {
            let bound = a.bind(g, trainable);
            vars.push(bound.a);
            vars.push(bound.b);
            layers[a.target.layer][a.target.matrix.index()] = Some(bound);
        }
        BoundLoraSet { layers, vars }
    }
}

/// Graph handles for a [`LoraSet`]; `vars()` follows `params_mut()` order.
pub struct BoundLoraSet {
    layers: Vec<[Option<BoundLora>; 3]>,
    vars: Vec<Var>,
}

impl BoundLoraSet {
    pub fn get(&self, layer: usize, matrix: Projection) -> Option<&BoundLora> {
        self.layers.get(layer).and_then(|l| l[matrix.index()].as_ref())
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
