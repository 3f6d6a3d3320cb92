//! Detection heads: shared FFN over the flattened grid, box refinement and
//! density-conditioned confidence branches, plus losses, residual codec,
//! IoU and NMS.

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Box3d, Vec3};
use crate::nn::{Activation, Ffn, FfnCache, FfnSpec, Matrix, ParamGrads, ParamStore};

pub mod codec;
pub mod iou;
pub mod losses;
pub mod nms;

pub use codec::{decode, encode, CODE_SIZE};
pub use iou::iou_3d;
pub use losses::{
    bce_with_logits, confidence_loss, confidence_target, confidence_target_from_iou, focal_loss, rcnn_loss, rpn_loss,
    sigmoid, smooth_l1, FocalParams, LossOutput, LossWeights,
};
pub use nms::nms;

/// A refined detection.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedBox {
    pub bbox: Box3d,
    /// Density-aware confidence in [0, 1].
    pub confidence: f64,
    /// Raw points inside `bbox`.
    pub num_points: u64,
    pub label: Option<String>,
    /// Index of the proposal this box was refined from.
    pub proposal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// Widths after the flattened grid input.
    pub shared: Vec<usize>,
    /// Hidden widths of the regression branch (output is the residual code).
    pub reg_hidden: Vec<usize>,
    /// Hidden widths of the confidence branch (output is one logit).
    pub conf_hidden: Vec<usize>,
    /// Offset inside `log(count + ε)` of the confidence input.
    pub conf_eps: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { shared: vec![256, 256], reg_hidden: vec![256], conf_hidden: vec![256], conf_eps: 1.0 }
    }
}

/// The three FFNs of the second stage, sized for a given flattened grid width.
#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub shared: Ffn,
    pub reg: Ffn,
    pub conf: Ffn,
    pub conf_eps: f64,
}

/// Forward state of [`Heads::forward_cached`].
#[derive(Debug, Clone)]
pub struct HeadCache {
    shared: FfnCache,
    reg: FfnCache,
    conf: FfnCache,
}

/// Outputs for a batch of boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub shared: Matrix,
    pub residuals: Matrix,
    pub logits: Vec<f64>,
}

impl Heads {
    pub fn new(cfg: &HeadConfig, input_width: usize) -> Result<Self> {
        if cfg.shared.is_empty() {
            return Err(Error::Config("shared head needs at least one layer".into()));
        }
        if !(cfg.conf_eps > 0.0) {
            return Err(Error::Config(format!("conf_eps must be positive, got {}", cfg.conf_eps)));
        }
        let mut w = vec![input_width];
        w.extend_from_slice(&cfg.shared);
        let fs = *w.last().expect("non-empty");
        let shared = Ffn::new(FfnSpec::new(w, Activation::Relu)?, "head.shared")?;
        let mut w = vec![fs];
        w.extend_from_slice(&cfg.reg_hidden);
        w.push(CODE_SIZE);
        let reg = Ffn::new(FfnSpec::new(w, Activation::NoneOnLast)?, "head.reg")?;
        let mut w = vec![fs + 4];
        w.extend_from_slice(&cfg.conf_hidden);
        w.push(1);
        let conf = Ffn::new(FfnSpec::new(w, Activation::NoneOnLast)?, "head.conf")?;
        Ok(Self { shared, reg, conf, conf_eps: cfg.conf_eps })
    }

    pub fn init(&self, params: &mut ParamStore) {
        self.shared.init(params);
        self.reg.init(params);
        self.conf.init(params);
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v = self.shared.param_names();
        v.extend(self.reg.param_names());
        v.extend(self.conf.param_names());
        v
    }

    /// Shared features and residuals for flattened grids `x` (`B × U³F`).
    pub fn shared_and_branch_forward(&self, x: &Matrix, params: &ParamStore) -> Result<(Matrix, Matrix)> {
        let fs = self.shared.apply(x, params)?;
        let r = self.reg.apply(&fs, params)?;
        Ok((fs, r))
    }

    /// Confidence-branch input rows `[f^s ∥ c ∥ log(count + ε)]`.
    pub fn confidence_inputs(&self, fs: &Matrix, centers: &[Vec3], counts: &[u64]) -> Result<Matrix> {
        let b = fs.nrows();
        if centers.len() != b || counts.len() != b {
            return Err(Error::dim("confidence batch", b, centers.len().min(counts.len())));
        }
        let d = fs.ncols();
        let mut m = Array2::zeros((b, d + 4));
        m.slice_mut(s![.., ..d]).assign(fs);
        for i in 0..b {
            for k in 0..3 {
                m[[i, d + k]] = centers[i][k];
            }
            m[[i, d + 3]] = (counts[i] as f64 + self.conf_eps).ln();
        }
        Ok(m)
    }

    /// Confidence logits for refined boxes with the given centers and raw counts.
    pub fn density_confidence_forward(
        &self,
        fs: &Matrix,
        centers: &[Vec3],
        counts: &[u64],
        params: &ParamStore,
    ) -> Result<Vec<f64>> {
        let z = self.conf.apply(&self.confidence_inputs(fs, centers, counts)?, params)?;
        Ok(z.column(0).to_vec())
    }

    /// Full forward with caches; the confidence branch sees `centers` and
    /// `counts` as constants.
    pub fn forward_cached(
        &self,
        x: &Matrix,
        centers: &[Vec3],
        counts: &[u64],
        params: &ParamStore,
    ) -> Result<(HeadOutput, HeadCache)> {
        let (fs, shared) = self.shared.forward(x, params)?;
        let (r, reg) = self.reg.forward(&fs, params)?;
        let (z, conf) = self.conf.forward(&self.confidence_inputs(&fs, centers, counts)?, params)?;
        Ok((HeadOutput { shared: fs, residuals: r, logits: z.column(0).to_vec() }, HeadCache { shared, reg, conf }))
    }

    /// Accumulates parameter gradients given `dL/dr` (`B × 7`) and `dL/dz`
    /// (`B × 1`); returns `dL/dx`.
    pub fn backward(
        &self,
        d_residuals: &Matrix,
        d_logits: &Matrix,
        cache: &HeadCache,
        params: &ParamStore,
        grads: &mut ParamGrads,
    ) -> Result<Matrix> {
        let d_conf_in = self.conf.backward(d_logits, &cache.conf, params, grads)?;
        let fs_width = self.shared.spec.d_out();
        let mut d_fs = self.reg.backward(d_residuals, &cache.reg, params, grads)?;
        d_fs += &d_conf_in.slice(s![.., ..fs_width]);
        self.shared.backward(&d_fs, &cache.shared, params, grads)
    }
}

/// Flattens a `U³ × F` grid feature matrix into one row.
pub fn flatten_grid(features: &Matrix) -> Matrix {
    let row: Vec<f64> = features.iter().copied().collect();
    Array2::from_shape_vec((1, row.len()), row).expect("row vector")
}

/// Stacks several flattened grids.
pub fn stack_rows(rows: &[Matrix]) -> Result<Matrix> {
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Contract(e.to_string()))
}
