//! Self-attention over the non-empty grid points of one proposal, with a
//! point-density positional encoding and an outer residual connection.

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotate_z, sub, Box3d, Vec3};
use crate::nn::ops::{
    init_layer_norm, init_linear, layer_norm_backward, linear_backward, softmax_rows_backward, LayerNormCache,
};
use crate::nn::{layer_norm, linear, softmax_rows, Activation, Ffn, FfnCache, FfnSpec, Matrix, ParamGrads, ParamStore};
use crate::roipool::{GridPointSet, OffsetFrame};

/// One post-norm encoder layer.
///
/// The block computes `𝒯 = LN2(H + FFN(H))` with `H = LN1(MHA(X + PE))`; the
/// skip around attention is the outer residual `f̃ = 𝒯 + f` applied by
/// [`grid_self_attention`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderLayerSpec {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    #[serde(default = "default_prefix")]
    pub prefix: String,
}

fn default_prefix() -> String {
    "attn".into()
}

impl Default for EncoderLayerSpec {
    fn default() -> Self {
        Self { d_model: 192, heads: 1, d_ff: 192, prefix: default_prefix() }
    }
}

impl EncoderLayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("encoder widths and head count must be >= 1".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("model width {} not divisible by {} heads", self.d_model, self.heads)));
        }
        Ok(())
    }

    fn p(&self, name: &str) -> String {
        format!("{}.{name}", self.prefix)
    }

    pub fn ffn(&self) -> Result<Ffn> {
        Ffn::new(FfnSpec::new(vec![self.d_model, self.d_ff, self.d_model], Activation::NoneOnLast)?, self.p("ffn"))
    }

    pub fn init(&self, params: &mut ParamStore) -> Result<()> {
        self.validate()?;
        for n in ["q", "k", "v", "o"] {
            init_linear(params, &self.p(n), self.d_model, self.d_model);
        }
        init_layer_norm(params, &self.p("ln1"), self.d_model);
        init_layer_norm(params, &self.p("ln2"), self.d_model);
        self.ffn()?.init(params);
        Ok(())
    }

    pub fn param_names(&self) -> Result<Vec<String>> {
        let mut names = Vec::new();
        for n in ["q", "k", "v", "o"] {
            names.push(self.p(&format!("{n}.weight")));
            names.push(self.p(&format!("{n}.bias")));
        }
        for n in ["ln1", "ln2"] {
            names.push(self.p(&format!("{n}.gamma")));
            names.push(self.p(&format!("{n}.beta")));
        }
        names.extend(self.ffn()?.param_names());
        Ok(names)
    }
}

/// Positional-encoding network settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PeConfig {
    /// Hidden widths; input is 4 and output is the model width.
    pub hidden: Vec<usize>,
    /// Offset inside `log(count + ε)`.
    pub eps: f64,
    /// Frame of `δ = x_g − c_b`.
    pub frame: OffsetFrame,
    #[serde(default = "default_pe_prefix")]
    pub prefix: String,
}

fn default_pe_prefix() -> String {
    "pe".into()
}

impl Default for PeConfig {
    fn default() -> Self {
        Self { hidden: vec![192], eps: 1.0, frame: OffsetFrame::World, prefix: default_pe_prefix() }
    }
}

impl PeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::Config(format!("pe eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    pub fn ffn(&self, d_model: usize) -> Result<Ffn> {
        let mut widths = vec![4];
        widths.extend_from_slice(&self.hidden);
        widths.push(d_model);
        Ffn::new(FfnSpec::new(widths, Activation::NoneOnLast)?, self.prefix.clone())
    }

    /// The FFN input row `[δ ∥ log(count + ε)]` of one grid point.
    pub fn input_row(&self, g: Vec3, count: u32, bbox: &Box3d) -> [f64; 4] {
        let d = match self.frame {
            OffsetFrame::World => sub(g, bbox.center),
            OffsetFrame::Box => rotate_z(sub(g, bbox.center), -bbox.yaw),
        };
        [d[0], d[1], d[2], (count as f64 + self.eps).ln()]
    }
}

/// Encoder and positional-encoding settings together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct AttnConfig {
    pub encoder: EncoderLayerSpec,
    pub pe: PeConfig,
}

impl AttnConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.pe.validate()
    }

    pub fn init(&self, params: &mut ParamStore) -> Result<()> {
        self.encoder.init(params)?;
        self.pe.ffn(self.encoder.d_model)?.init(params);
        Ok(())
    }

    pub fn param_names(&self) -> Result<Vec<String>> {
        let mut names = self.encoder.param_names()?;
        names.extend(self.pe.ffn(self.encoder.d_model)?.param_names());
        Ok(names)
    }
}

/// PE input rows for the given grid points (all when `rows` is `None`).
pub fn pe_inputs(grid: &GridPointSet, bbox: &Box3d, cfg: &PeConfig, rows: Option<&[usize]>) -> Matrix {
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..grid.len()).collect();
            &all
        }
    };
    let mut m = Array2::zeros((rows.len(), 4));
    for (i, &j) in rows.iter().enumerate() {
        let r = cfg.input_row(grid.positions[j], grid.counts[j], bbox);
        for k in 0..4 {
            m[[i, k]] = r[k];
        }
    }
    m
}

/// `FFN([δ ∥ log(count + ε)])` for every grid point.
pub fn density_positional_encoding(
    grid: &GridPointSet,
    bbox: &Box3d,
    cfg: &PeConfig,
    d_model: usize,
    params: &ParamStore,
) -> Result<Matrix> {
    cfg.validate()?;
    cfg.ffn(d_model)?.apply(&pe_inputs(grid, bbox, cfg, None), params)
}

/// Intermediate state of [`encoder_layer_forward`].
#[derive(Debug, Clone)]
pub struct EncoderCache {
    x_in: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Attention weights per head, `n × n`.
    pub weights: Vec<Matrix>,
    concat: Matrix,
    ln1: LayerNormCache,
    ffn: FfnCache,
    ln2: LayerNormCache,
}

/// Applies 𝒯 to `x` (`n × d`), adding `pe` to the input first when given.
pub fn encoder_layer_forward(
    x: &Matrix,
    pe: Option<&Matrix>,
    spec: &EncoderLayerSpec,
    params: &ParamStore,
) -> Result<(Matrix, EncoderCache)> {
    spec.validate()?;
    let (n, d) = x.dim();
    if n == 0 {
        return Err(Error::Contract("encoder input must have at least one row".into()));
    }
    if d != spec.d_model {
        return Err(Error::dim("encoder input width", spec.d_model, d));
    }
    let x_in = match pe {
        Some(pe) => {
            if pe.dim() != x.dim() {
                return Err(Error::dim("positional encoding width", d, pe.ncols()));
            }
            x + pe
        }
        None => x.clone(),
    };
    let q = linear(&x_in, params, &spec.p("q"))?;
    let k = linear(&x_in, params, &spec.p("k"))?;
    let v = linear(&x_in, params, &spec.p("v"))?;
    let dk = d / spec.heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut concat = Array2::zeros((n, d));
    let mut weights = Vec::with_capacity(spec.heads);
    for h in 0..spec.heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let logits = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        let p = softmax_rows(&logits);
        concat.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        weights.push(p);
    }
    let a = linear(&concat, params, &spec.p("o"))?;
    let (h, ln1) = layer_norm(&a, params, &spec.p("ln1"))?;
    let (f, ffn) = spec.ffn()?.forward(&h, params)?;
    let (t, ln2) = layer_norm(&(&h + &f), params, &spec.p("ln2"))?;
    Ok((t, EncoderCache { x_in, q, k, v, weights, concat, ln1, ffn, ln2 }))
}

/// Backward of [`encoder_layer_forward`]: accumulates parameter gradients and
/// returns `dL/d(x + pe)`, which is the gradient for both `x` and `pe`.
pub fn encoder_layer_backward(
    dt: &Matrix,
    cache: &EncoderCache,
    spec: &EncoderLayerSpec,
    params: &ParamStore,
    grads: &mut ParamGrads,
) -> Result<Matrix> {
    let dz = layer_norm_backward(dt, &cache.ln2, params, &spec.p("ln2"), grads)?;
    let dh = &dz + &spec.ffn()?.backward(&dz, &cache.ffn, params, grads)?;
    let da = layer_norm_backward(&dh, &cache.ln1, params, &spec.p("ln1"), grads)?;
    let dconcat = linear_backward(&da, &cache.concat, params, &spec.p("o"), grads)?;
    let d = spec.d_model;
    let dk = d / spec.heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let n = dt.nrows();
    let mut dq = Array2::zeros((n, d));
    let mut dkm = Array2::zeros((n, d));
    let mut dv = Array2::zeros((n, d));
    for (h, p) in cache.weights.iter().enumerate() {
        let cols = s![.., h * dk..(h + 1) * dk];
        let dc = dconcat.slice(cols);
        let dp = dc.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&dc));
        let ds = softmax_rows_backward(p, &dp) * scale;
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dkm.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    let mut dx = linear_backward(&dq, &cache.x_in, params, &spec.p("q"), grads)?;
    dx += &linear_backward(&dkm, &cache.x_in, params, &spec.p("k"), grads)?;
    dx += &linear_backward(&dv, &cache.x_in, params, &spec.p("v"), grads)?;
    Ok(dx)
}

/// State kept by [`grid_self_attention_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct GridAttnCache {
    /// Non-empty grid indices, in grid order.
    pub active: Vec<usize>,
    pe_cache: Option<FfnCache>,
    encoder: Option<EncoderCache>,
}

impl GridAttnCache {
    pub fn attention_weights(&self) -> Option<&[Matrix]> {
        self.encoder.as_ref().map(|e| e.weights.as_slice())
    }
}

/// `f̃_i = 𝒯_i(f) + f_i` over the non-empty grid points; empty points are
/// copied through untouched. An all-empty grid is returned unchanged.
pub fn grid_self_attention(
    grid: &GridPointSet,
    bbox: &Box3d,
    cfg: &AttnConfig,
    params: &ParamStore,
) -> Result<GridPointSet> {
    Ok(grid_self_attention_forward(grid, bbox, cfg, params)?.0)
}

pub fn grid_self_attention_forward(
    grid: &GridPointSet,
    bbox: &Box3d,
    cfg: &AttnConfig,
    params: &ParamStore,
) -> Result<(GridPointSet, GridAttnCache)> {
    cfg.validate()?;
    let active = grid.non_empty_indices();
    if active.is_empty() {
        return Ok((grid.clone(), GridAttnCache { active, pe_cache: None, encoder: None }));
    }
    if grid.features.ncols() != cfg.encoder.d_model {
        return Err(Error::dim("grid feature width", cfg.encoder.d_model, grid.features.ncols()));
    }
    let x = grid.features.select(Axis(0), &active);
    let (pe, pe_cache) =
        cfg.pe.ffn(cfg.encoder.d_model)?.forward(&pe_inputs(grid, bbox, &cfg.pe, Some(&active)), params)?;
    let (t, enc) = encoder_layer_forward(&x, Some(&pe), &cfg.encoder, params)?;
    let mut out = grid.clone();
    for (i, &j) in active.iter().enumerate() {
        let mut row = out.features.row_mut(j);
        row += &t.row(i);
    }
    Ok((out, GridAttnCache { active, pe_cache: Some(pe_cache), encoder: Some(enc) }))
}

/// Backward of [`grid_self_attention_forward`]: given `dL/df̃` over the whole
/// grid, accumulates parameter gradients and returns `dL/df`.
pub fn grid_self_attention_backward(
    dout: &Matrix,
    cache: &GridAttnCache,
    cfg: &AttnConfig,
    params: &ParamStore,
    grads: &mut ParamGrads,
) -> Result<Matrix> {
    let mut dx = dout.clone();
    let (Some(enc), Some(pe_cache)) = (&cache.encoder, &cache.pe_cache) else {
        return Ok(dx);
    };
    let dt = dout.select(Axis(0), &cache.active);
    let din = encoder_layer_backward(&dt, enc, &cfg.encoder, params, grads)?;
    cfg.pe.ffn(cfg.encoder.d_model)?.backward(&din, pe_cache, params, grads)?;
    for (i, &j) in cache.active.iter().enumerate() {
        let mut row = dx.row_mut(j);
        row += &din.row(i);
    }
    Ok(dx)
}
