use serde::{Deserialize, Serialize};

use super::ops::{affine, init_linear, linear_backward};
use super::{Matrix, ParamGrads, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// ReLU after every layer, including the last.
    Relu,
    /// ReLU on hidden layers, identity on the last.
    NoneOnLast,
}

/// Layer widths `[d_in, h_1, ..., d_out]`; at least one affine layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FfnSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl FfnSpec {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let s = Self { widths, activation };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "ffn widths need at least two entries, all >= 1, got {:?}",
                self.widths
            )));
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.widths[0]
    }

    pub fn d_out(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }
}

/// A feed-forward stack bound to a parameter prefix. Layer `i` lives at
/// `{prefix}.{i}.weight` / `{prefix}.{i}.bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffn {
    pub spec: FfnSpec,
    pub prefix: String,
}

/// Inputs and ReLU masks recorded by [`Ffn::forward`].
#[derive(Debug, Clone)]
pub struct FfnCache {
    inputs: Vec<Matrix>,
    outputs: Vec<Matrix>,
}

impl Ffn {
    pub fn new(spec: FfnSpec, prefix: impl Into<String>) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, prefix: prefix.into() })
    }

    fn layer_prefix(&self, i: usize) -> String {
        format!("{}.{}", self.prefix, i)
    }

    fn activated(&self, i: usize) -> bool {
        match self.spec.activation {
            Activation::Relu => true,
            Activation::NoneOnLast => i + 1 < self.spec.num_layers(),
        }
    }

    pub fn init(&self, params: &mut ParamStore) {
        for i in 0..self.spec.num_layers() {
            init_linear(params, &self.layer_prefix(i), self.spec.widths[i], self.spec.widths[i + 1]);
        }
    }

    /// Names of this stack's tensors, in layer order.
    pub fn param_names(&self) -> Vec<String> {
        (0..self.spec.num_layers())
            .flat_map(|i| {
                let p = self.layer_prefix(i);
                [format!("{p}.weight"), format!("{p}.bias")]
            })
            .collect()
    }

    pub fn forward(&self, x: &Matrix, params: &ParamStore) -> Result<(Matrix, FfnCache)> {
        if x.ncols() != self.spec.d_in() {
            return Err(Error::dim(format!("{} layer 0 input", self.prefix), self.spec.d_in(), x.ncols()));
        }
        let mut inputs = Vec::with_capacity(self.spec.num_layers());
        let mut outputs = Vec::with_capacity(self.spec.num_layers());
        let mut h = x.clone();
        for i in 0..self.spec.num_layers() {
            let prefix = self.layer_prefix(i);
            let w = params.get(&format!("{prefix}.weight"))?;
            if w.dim() != (self.spec.widths[i], self.spec.widths[i + 1]) {
                return Err(Error::dim(format!("{prefix} weight columns"), self.spec.widths[i + 1], w.ncols()));
            }
            let z = affine(&h, params, &prefix, self.activated(i))?;
            inputs.push(h);
            outputs.push(z.clone());
            h = z;
        }
        Ok((h, FfnCache { inputs, outputs }))
    }

    /// Forward pass without caching.
    pub fn apply(&self, x: &Matrix, params: &ParamStore) -> Result<Matrix> {
        if x.ncols() != self.spec.d_in() {
            return Err(Error::dim(format!("{} layer 0 input", self.prefix), self.spec.d_in(), x.ncols()));
        }
        let mut h = affine(x, params, &self.layer_prefix(0), self.activated(0))?;
        for i in 1..self.spec.num_layers() {
            h = affine(&h, params, &self.layer_prefix(i), self.activated(i))?;
        }
        Ok(h)
    }

    /// Accumulates parameter gradients into `grads`; returns `dL/dx`.
    pub fn backward(
        &self,
        upstream: &Matrix,
        cache: &FfnCache,
        params: &ParamStore,
        grads: &mut ParamGrads,
    ) -> Result<Matrix> {
        let mut g = upstream.clone();
        for i in (0..self.spec.num_layers()).rev() {
            if self.activated(i) {
                // relu'(z) = 1 where the output is positive
                g.zip_mut_with(&cache.outputs[i], |gv, &out| {
                    if out <= 0.0 {
                        *gv = 0.0;
                    }
                });
            }
            g = linear_backward(&g, &cache.inputs[i], params, &self.layer_prefix(i), grads)?;
        }
        Ok(g)
    }
}
