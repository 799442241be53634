//! Soft labels, logit refinement and consensus, and the reverse/forward
//! distillation losses.
//!
//! Every loss here is `KL(teacher || student)` with the teacher held constant,
//! so gradients only reach the student's bound parameters (and the bridging
//! matrix for hidden-feature losses).

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_t, Graph, Tensor, Var};
use crate::error::{KoalaError, Result};
use crate::models::{BoundModel, Model};
use crate::scalar::Scalar;

/// Target mean `A` of refined logits and distillation temperature `T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementConfig {
    pub target_mean: f64,
    pub temperature: f64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            target_mean: 2.0,
            temperature: 7.0,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_mean > 0.0 && self.target_mean.is_finite()) {
            return Err(KoalaError::InvalidArgument(format!(
                "target mean must be positive, got {}",
                self.target_mean
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(KoalaError::InvalidTemperature {
                op: "refinement",
                value: self.temperature,
            });
        }
        Ok(())
    }
}

/// Weight of the hidden-feature term in the forward loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillLossConfig {
    pub lambda: f64,
}

impl Default for DistillLossConfig {
    fn default() -> Self {
        Self { lambda: 0.1 }
    }
}

/// Shifts `z` so its minimum is 0 and rescales so its mean is `a`.
///
/// Returns `None` when `z` is constant; callers fall back to the constant
/// vector `a` (see [`refine_or_flat`]).
pub fn refine_distribution<S: Scalar>(z: &[S], a: S) -> Option<Vec<S>> {
    let min = z.iter().copied().fold(S::infinity(), S::min);
    let max = z.iter().copied().fold(S::neg_infinity(), S::max);
    let mean = z.iter().copied().sum::<S>() / S::of(z.len() as f64);
    let spread = mean - min;
    if max == min || spread <= S::zero() || spread.is_nan() {
        return None;
    }
    Some(z.iter().map(|&v| a * (v - min) / spread).collect())
}

/// [`refine_distribution`] with the constant-vector fallback. The flag is true
/// when the fallback fired.
pub fn refine_or_flat<S: Scalar>(z: &[S], a: S) -> (Vec<S>, bool) {
    match refine_distribution(z, a) {
        Some(r) => (r, false),
        None => (vec![a; z.len()], true),
    }
}

/// Refines every row of a logits matrix independently.
pub fn refine_rows<S: Scalar>(logits: &Tensor<S>, a: S) -> Result<(Tensor<S>, usize)> {
    if logits.cols() < 2 {
        return Err(KoalaError::InvalidArgument(
            "refinement needs at least two classes".into(),
        ));
    }
    if !logits.is_finite() {
        return Err(KoalaError::NonFiniteInput { op: "refine" });
    }
    let mut out = logits.clone();
    let mut degenerate = 0;
    let c = out.cols();
    for row in out.data_mut().chunks_mut(c) {
        let (r, flat) = refine_or_flat(row, a);
        degenerate += flat as usize;
        row.copy_from_slice(&r);
    }
    Ok((out, degenerate))
}

/// Sample-count weighted average of refined logits.
pub fn integrate_refined<S: Scalar>(refined: &[&Tensor<S>], counts: &[u64]) -> Result<Tensor<S>> {
    let first = refined.first().ok_or(KoalaError::EmptyClientSet)?;
    if refined.len() != counts.len() {
        return Err(KoalaError::InvalidArgument(format!(
            "{} refined outputs but {} sample counts",
            refined.len(),
            counts.len()
        )));
    }
    if counts.contains(&0) {
        return Err(KoalaError::InvalidArgument("sample counts must be positive".into()));
    }
    let total: u64 = counts.iter().sum();
    let mut out = Tensor::zeros(first.shape());
    for (z, &n) in refined.iter().zip(counts) {
        first.expect_same_shape(z, "integrate_refined")?;
        let w = S::of(n as f64 / total as f64);
        for (o, &v) in out.data_mut().iter_mut().zip(z.data()) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// `softmax(z / T)` of the integrated logits.
pub fn consensus_soft_labels<S: Scalar>(integrated: &Tensor<S>, t: S) -> Result<Tensor<S>> {
    softmax_t(integrated, t)
}

/// Raw proxy-set logits of each uploading client.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBundle<S> {
    pub per_client: Vec<(usize, Tensor<S>)>,
    pub sample_counts: Vec<u64>,
}

/// Consensus soft labels plus how many rows hit the refinement fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct Consensus<S> {
    pub integrated: Tensor<S>,
    pub soft_labels: Tensor<S>,
    pub degenerate_rows: usize,
}

impl<S: Scalar> LogitBundle<S> {
    pub fn validate(&self) -> Result<()> {
        let (_, first) = self.per_client.first().ok_or(KoalaError::EmptyClientSet)?;
        if self.sample_counts.len() != self.per_client.len() {
            return Err(KoalaError::InvalidArgument(
                "sample_counts length differs from client count".into(),
            ));
        }
        if self.sample_counts.contains(&0) {
            return Err(KoalaError::InvalidArgument("sample counts must be positive".into()));
        }
        for (_, z) in &self.per_client {
            first.expect_same_shape(z, "logit_bundle")?;
        }
        Ok(())
    }

    /// Refine each client row-wise, integrate by sample count, then soften.
    pub fn consensus(&self, cfg: &RefinementConfig) -> Result<Consensus<S>> {
        cfg.validate()?;
        self.validate()?;
        let mut degenerate_rows = 0;
        let mut refined = Vec::with_capacity(self.per_client.len());
        for (_, z) in &self.per_client {
            let (r, d) = refine_rows(z, S::of(cfg.target_mean))?;
            degenerate_rows += d;
            refined.push(r);
        }
        let refs: Vec<&Tensor<S>> = refined.iter().collect();
        let integrated = integrate_refined(&refs, &self.sample_counts)?;
        let soft_labels = consensus_soft_labels(&integrated, S::of(cfg.temperature))?;
        Ok(Consensus {
            integrated,
            soft_labels,
            degenerate_rows,
        })
    }
}

/// Teacher soft labels `softmax(f(x) / T)`.
pub fn soft_labels<S: Scalar>(model: &Model<S>, x: &Tensor<S>, t: S) -> Result<Tensor<S>> {
    softmax_t(&model.forward(x)?, t)
}

/// `KL(target || softmax(logits / T))` with `target` held constant.
pub fn kl_to_target<S: Scalar>(
    graph: &mut Graph<S>,
    target: &Tensor<S>,
    logits: Var,
    t: S,
) -> Result<Var> {
    let student = graph.value(logits);
    if student.cols() != target.cols() {
        return Err(KoalaError::ClassMismatch {
            teacher: target.cols(),
            student: student.cols(),
        });
    }
    let p = graph.constant(target.clone());
    let q = graph.softmax_t(logits, t)?;
    graph.kl_loss(p, q)
}

fn check_classes(teacher: usize, student: usize) -> Result<()> {
    if teacher != student {
        return Err(KoalaError::ClassMismatch { teacher, student });
    }
    Ok(())
}

/// Reverse loss, homo mode: the aggregated small model teaches the large model.
pub fn reverse_loss_homo<S: Scalar>(
    graph: &mut Graph<S>,
    small: &Model<S>,
    large: &BoundModel,
    x: &Tensor<S>,
    t: S,
) -> Result<Var> {
    check_classes(small.classes(), large.classes())?;
    let target = soft_labels(small, x, t)?;
    let xv = graph.constant(x.clone());
    let out = large.forward(graph, xv)?;
    kl_to_target(graph, &target, out.logits, t)
}

/// Reverse loss, hete mode: consensus soft labels teach the large model.
pub fn reverse_loss_hete<S: Scalar>(
    graph: &mut Graph<S>,
    consensus: &Tensor<S>,
    large: &BoundModel,
    x: &Tensor<S>,
    t: S,
) -> Result<Var> {
    check_classes(consensus.cols(), large.classes())?;
    crate::autodiff::functional::check_distribution("reverse_loss_hete", "consensus", consensus)?;
    let xv = graph.constant(x.clone());
    let out = large.forward(graph, xv)?;
    kl_to_target(graph, consensus, out.logits, t)
}

/// Output-feature forward loss: the large model teaches a small student.
pub fn forward_output_loss<S: Scalar>(
    graph: &mut Graph<S>,
    large: &Model<S>,
    student: &BoundModel,
    x: &Tensor<S>,
    t: S,
) -> Result<Var> {
    check_classes(large.classes(), student.classes())?;
    let target = soft_labels(large, x, t)?;
    let xv = graph.constant(x.clone());
    let out = student.forward(graph, xv)?;
    kl_to_target(graph, &target, out.logits, t)
}

/// MSE between fixed large-model hidden features and bridged student features.
pub fn hidden_mse<S: Scalar>(
    graph: &mut Graph<S>,
    target_hidden: &Tensor<S>,
    student_hidden: Var,
    bridge: Var,
) -> Result<Var> {
    let (sh, w) = (graph.value(student_hidden), graph.value(bridge));
    if w.shape() != [sh.cols(), target_hidden.cols()] {
        return Err(KoalaError::ShapeMismatch {
            op: "forward_hidden_loss",
            left: w.shape().to_vec(),
            right: vec![sh.cols(), target_hidden.cols()],
        });
    }
    let bridged = graph.matmul(student_hidden, bridge)?;
    let target = graph.constant(target_hidden.clone());
    graph.mse_loss(target, bridged)
}

/// Hidden-feature forward loss through the bridging matrix.
pub fn forward_hidden_loss<S: Scalar>(
    graph: &mut Graph<S>,
    large: &Model<S>,
    student: &BoundModel,
    bridge: Var,
    x: &Tensor<S>,
) -> Result<Var> {
    let target = large.forward_hidden(x)?;
    let xv = graph.constant(x.clone());
    let out = student.forward(graph, xv)?;
    hidden_mse(graph, &target, out.hidden, bridge)
}

/// `out + lambda * hid`.
pub fn forward_loss<S: Scalar>(graph: &mut Graph<S>, out: Var, hid: Var, lambda: S) -> Result<Var> {
    if lambda < S::zero() {
        return Err(KoalaError::InvalidArgument(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    let weighted = graph.scale(hid, lambda);
    graph.add(out, weighted)
}

/// Fixed teacher outputs for forward distillation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTargets<S> {
    pub soft_labels: Tensor<S>,
    pub hidden: Tensor<S>,
}

impl<S: Scalar> ForwardTargets<S> {
    pub fn compute(large: &Model<S>, x: &Tensor<S>, t: S) -> Result<Self> {
        let (hidden, logits) = large.forward_with_hidden(x)?;
        Ok(Self {
            soft_labels: softmax_t(&logits, t)?,
            hidden,
        })
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            soft_labels: self.soft_labels.select_rows(rows),
            hidden: self.hidden.select_rows(rows),
        }
    }
}

/// Loss nodes of one forward-distillation step.
#[derive(Debug, Clone, Copy)]
pub struct ForwardLossVars {
    pub output: Var,
    pub hidden: Var,
    pub total: Var,
}

/// Combined forward loss with a single student pass.
pub fn forward_distill_loss<S: Scalar>(
    graph: &mut Graph<S>,
    targets: &ForwardTargets<S>,
    student: &BoundModel,
    bridge: Var,
    x: &Tensor<S>,
    t: S,
    cfg: &DistillLossConfig,
) -> Result<ForwardLossVars> {
    check_classes(targets.soft_labels.cols(), student.classes())?;
    let xv = graph.constant(x.clone());
    let out = student.forward(graph, xv)?;
    let output = kl_to_target(graph, &targets.soft_labels, out.logits, t)?;
    let hidden = hidden_mse(graph, &targets.hidden, out.hidden, bridge)?;
    let total = forward_loss(graph, output, hidden, S::of(cfg.lambda))?;
    Ok(ForwardLossVars {
        output,
        hidden,
        total,
    })
}
