//! Fusion layer, pooled classifier and the task loss.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::numeric::log_sum_exp;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// `(C + D) × F`, or `C × F` for the memory-free baseline.
    pub fuse_w: Tensor,
    pub fuse_b: Tensor,
    /// `F × K`
    pub cls_w: Tensor,
    pub cls_b: Tensor,
}

impl HeadParams {
    pub fn init<R: Rng + ?Sized>(input: usize, fused: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            fuse_w: Tensor::randn(input, fused, 1.0 / (input as f64).sqrt(), rng),
            fuse_b: Tensor::zeros(1, fused),
            cls_w: Tensor::randn(fused, classes, 1.0 / (fused as f64).sqrt(), rng),
            cls_b: Tensor::zeros(1, classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.cls_w.cols()
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.fuse_w"), self.fuse_w.clone()),
            (format!("{prefix}.fuse_b"), self.fuse_b.clone()),
            (format!("{prefix}.cls_w"), self.cls_w.clone()),
            (format!("{prefix}.cls_b"), self.cls_b.clone()),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub fuse_w: Var,
    pub fuse_b: Var,
    pub cls_w: Var,
    pub cls_b: Var,
}

impl HeadVars {
    pub fn constants(g: &mut Graph, p: &HeadParams) -> Self {
        Self {
            fuse_w: g.constant(p.fuse_w.clone()),
            fuse_b: g.constant(p.fuse_b.clone()),
            cls_w: g.constant(p.cls_w.clone()),
            cls_b: g.constant(p.cls_b.clone()),
        }
    }
}

/// Per-step `[f_src | tgt_like] W + b`. Without `tgt_like` only `f_src` is
/// used (baseline head).
pub fn fuse_on(g: &mut Graph, f_src: Var, tgt_like: Option<Var>, h: &HeadVars) -> Result<Var> {
    let x = match tgt_like {
        Some(t) => g.concat_cols(f_src, t)?,
        None => f_src,
    };
    let y = g.matmul(x, h.fuse_w)?;
    g.add_row(y, h.fuse_b)
}

/// Mean over each block of `steps` rows, then the classifier affine map.
/// Returns one logit row per sequence.
pub fn classify_on(g: &mut Graph, fused: Var, steps: usize, h: &HeadVars) -> Result<Var> {
    let pooled = g.segment_mean(fused, steps)?;
    let y = g.matmul(pooled, h.cls_w)?;
    g.add_row(y, h.cls_b)
}

pub fn fuse(f_src: &Tensor, tgt_like: Option<&Tensor>, params: &HeadParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let h = HeadVars::constants(&mut g, params);
    let fs = g.constant(f_src.clone());
    let ft = tgt_like.map(|t| g.constant(t.clone()));
    let y = fuse_on(&mut g, fs, ft, &h)?;
    Ok(g.value(y).clone())
}

/// Logits for one fused `T×F` sequence.
pub fn classify(fused: &Tensor, params: &HeadParams) -> Result<Vec<f64>> {
    if fused.rows() == 0 {
        return Err(Error::dim("classify", "T >= 1", 0));
    }
    let mut g = Graph::new();
    let h = HeadVars::constants(&mut g, params);
    let f = g.constant(fused.clone());
    let y = classify_on(&mut g, f, fused.rows(), &h)?;
    Ok(g.value(y).data().to_vec())
}

/// Cross-entropy of one logit vector via log-sum-exp.
pub fn cross_entropy(logits: &[f64], y: usize) -> Result<f64> {
    if y >= logits.len() {
        return Err(Error::domain(
            "cross_entropy",
            format!("label {y} out of range for {} classes", logits.len()),
        ));
    }
    Ok(log_sum_exp(logits) - logits[y])
}

/// `CE(recall-path logits) + CE(oracle-path logits)`.
pub fn task_loss(logits_recalled: &[f64], logits_oracle: &[f64], y: usize) -> Result<f64> {
    if logits_recalled.len() != logits_oracle.len() {
        return Err(Error::dim("task_loss", logits_recalled.len(), logits_oracle.len()));
    }
    Ok(cross_entropy(logits_recalled, y)? + cross_entropy(logits_oracle, y)?)
}

/// `L_save / T + L_bridge / T + L_task`, unweighted.
pub fn total_loss(l_save: f64, l_bridge: f64, l_task: f64, steps: usize) -> f64 {
    let t = steps.max(1) as f64;
    l_save / t + l_bridge / t + l_task
}
