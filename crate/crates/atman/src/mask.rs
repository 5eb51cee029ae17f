//! Trainable additive attention mask and its per-sample optimization.
//!
//! The mask lives on the lower-triangular entries of the CoT columns, starts
//! at a negative constant that suppresses attention to reasoning tokens, and
//! is optimized (model frozen) to restore the gold-answer likelihood under
//! teacher forcing. The optimized mask yields a scalar saliency reward (the
//! average normalized mask value) and per-token saliency scores.

use crate::adamw::{AdamW, AdamWConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{teacher_forced_tokens, Model};
use crate::params::ParamSet;
use crate::tasks::{segment_with_prompt, SegmentedSequence};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Shape of the mask itself: initialization constant, pre-softmax scaling,
/// and the upper clamp that keeps effective values non-positive.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MaskParams {
    pub init_c: f64,
    pub scale: f64,
    pub upper_clamp: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        MaskParams {
            init_c: -0.4,
            scale: 10.0,
            upper_clamp: 0.0,
        }
    }
}

/// Optimizer settings for the per-sample mask fit.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MaskOptConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for MaskOptConfig {
    fn default() -> Self {
        MaskOptConfig {
            steps: 200,
            lr: 1e-3,
            beta1: 0.6,
            beta2: 0.9999,
            weight_decay: 0.05,
        }
    }
}

/// Additive pre-softmax mask restricted to lower-triangular CoT columns.
#[derive(Debug, Clone)]
pub struct AtManMask {
    /// Raw trainable values, [s, s]; exactly zero outside the domain.
    pub raw: Tensor,
    /// 1.0 on trainable entries (w >= v, v in CoT columns), else 0.0.
    domain: Vec<f64>,
    pub cot_columns: (usize, usize),
    pub seq_len: usize,
    pub params: MaskParams,
}

impl AtManMask {
    pub fn trainable_entries(&self) -> usize {
        self.domain.iter().filter(|&&d| d == 1.0).count()
    }

    fn in_domain(&self, w: usize, v: usize) -> bool {
        self.domain[w * self.seq_len + v] == 1.0
    }

    /// Effective mask value at (w, v): `scale * min(raw, upper_clamp)` on the
    /// domain, zero elsewhere.
    pub fn effective_tensor(&self) -> Tensor {
        let s = self.seq_len;
        let mut data = vec![0.0; s * s];
        for i in 0..s * s {
            if self.domain[i] == 1.0 {
                data[i] = self.params.scale * self.raw.data()[i].min(self.params.upper_clamp);
            }
        }
        Tensor::from_raw_unchecked(vec![s, s], data)
    }

    /// Builds the effective-mask node on a graph, differentiable w.r.t. the
    /// raw leaf. Returns (raw leaf id, effective id).
    pub fn effective_node(&self, g: &mut Graph) -> Result<(NodeId, NodeId)> {
        let raw = g.leaf(&self.raw);
        let clamped = g.min_const(raw, self.params.upper_clamp)?;
        let scaled = g.scale(clamped, self.params.scale)?;
        let domain = g.leaf_from(
            vec![self.seq_len, self.seq_len],
            self.domain.clone(),
            false,
        )?;
        let eff = g.mul(scaled, domain)?;
        Ok((raw, eff))
    }

    /// Normalized mask value at (w, v): effective / (scale * init_c), which
    /// is exactly 1 at initialization and 0 for a fully re-enabled entry.
    fn normalized(&self, w: usize, v: usize) -> f64 {
        let s = self.seq_len;
        let eff = self.params.scale * self.raw.data()[w * s + v].min(self.params.upper_clamp);
        eff / (self.params.scale * self.params.init_c)
    }

    fn column_mean_normalized(&self, v: usize) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for w in v..self.seq_len {
            if self.in_domain(w, v) {
                sum += self.normalized(w, v);
                n += 1;
            }
        }
        debug_assert!(n > 0);
        sum / n as f64
    }
}

/// Initializes the mask for a segmented sequence: every lower-triangular
/// entry in a CoT column is set to `c` and trainable; everything else stays
/// zero and never receives gradient.
pub fn init_mask(seq: &SegmentedSequence, params: MaskParams) -> Result<AtManMask> {
    if seq.cot_len() == 0 {
        return Err(Error::Contract("empty CoT span: mask has no domain".into()));
    }
    if params.init_c >= 0.0 {
        return Err(Error::Contract(format!(
            "mask init constant must be negative, got {}",
            params.init_c
        )));
    }
    let s = seq.tokens.len();
    let mut raw = vec![0.0; s * s];
    let mut domain = vec![0.0; s * s];
    for v in seq.cot_columns() {
        for w in v..s {
            raw[w * s + v] = params.init_c;
            domain[w * s + v] = 1.0;
        }
    }
    let raw = Tensor::new(vec![s, s], raw)?.with_requires_grad();
    Ok(AtManMask {
        raw,
        domain,
        cot_columns: seq.cot,
        seq_len: s,
        params,
    })
}

/// Average normalized mask value over the lower-triangular CoT region:
/// the per-column average of normalized values, averaged uniformly over CoT
/// columns. Exactly 1 at initialization; 0 when every trainable entry has
/// been driven to zero.
pub fn saliency_reward(mask: &AtManMask) -> Result<f64> {
    let (c0, c1) = mask.cot_columns;
    if c0 == c1 {
        return Err(Error::Contract("empty CoT span".into()));
    }
    let mut sum = 0.0;
    for v in c0..c1 {
        sum += mask.column_mean_normalized(v);
    }
    Ok(sum / (c1 - c0) as f64)
}

/// Per-CoT-token saliency: 1 minus the column's average normalized mask
/// value. Higher means the column was re-enabled harder.
pub fn token_saliency_scores(mask: &AtManMask) -> Result<Vec<f64>> {
    let (c0, c1) = mask.cot_columns;
    if c0 == c1 {
        return Err(Error::Contract("empty CoT span".into()));
    }
    Ok((c0..c1)
        .map(|v| 1.0 - mask.column_mean_normalized(v))
        .collect())
}

#[derive(Debug, Clone)]
pub struct MaskTrainResult {
    pub mask: AtManMask,
    /// Loss before any step, then after each step (length steps + 1).
    pub loss_trace: Vec<f64>,
    /// Saliency reward of the final mask (average normalized mask value).
    pub saliency: f64,
    /// Per-CoT-token saliency scores of the final mask.
    pub token_scores: Vec<f64>,
}

/// Teacher-forced mask loss for a fixed mask state.
fn mask_loss(
    model: &Model,
    tokens: &[usize],
    answer_start: usize,
    gold_answer: &[usize],
    mask: &AtManMask,
) -> Result<(Graph, NodeId, NodeId)> {
    let mut g = Graph::new();
    let pn = model.param_leaves(&mut g, false);
    let (raw_id, eff) = mask.effective_node(&mut g)?;
    let out = model.forward_nodes(&mut g, &pn, tokens, Some(eff))?;
    let rows = g.slice_rows(out.logits, answer_start - 1, gold_answer.len())?;
    let loss = g.cross_entropy(rows, gold_answer)?;
    Ok((g, loss, raw_id))
}

/// Optimizes the mask against the gold answer under teacher forcing. The
/// model is frozen throughout; the raw mask is the only trainable object.
/// Runs exactly `cfg.steps` steps (0 is allowed and returns the evaluated
/// initialization).
pub fn optimize_mask(
    model: &Model,
    seq: &SegmentedSequence,
    gold_answer: &[usize],
    cfg: &MaskOptConfig,
    params: MaskParams,
) -> Result<MaskTrainResult> {
    let (tokens, answer_start) = teacher_forced_tokens(seq, gold_answer)?;
    // re-segment over the teacher-forced sequence so the mask domain matches
    // its actual length (the rollout's own answer is replaced by the gold)
    let tf_seg = segment_with_prompt(&tokens, seq.prompt.1);
    let mut mask = init_mask(&tf_seg, params)?;

    let mut opt_params = ParamSet::new();
    opt_params.insert("mask.raw", mask.raw.clone());
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            weight_decay: cfg.weight_decay,
        },
        &opt_params,
    );

    let mut loss_trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        let (mut g, loss, raw_id) = mask_loss(model, &tokens, answer_start, gold_answer, &mask)
            .map_err(|e| step_error(e, step))?;
        loss_trace.push(g.item(loss));
        g.backward(loss).map_err(|e| step_error(e, step))?;
        let raw_grad = g
            .grad(raw_id)
            .ok_or_else(|| Error::Contract(format!("no mask gradient at step {step}")))?
            .to_vec();
        let p = opt_params.get_mut("mask.raw").unwrap();
        p.clear_grad();
        p.accumulate_grad(&raw_grad);
        opt.step(&mut opt_params).map_err(|e| step_error(e, step))?;
        mask.raw = opt_params.get("mask.raw").unwrap().clone();
    }
    // final evaluation after the last step
    let (g, loss, _) =
        mask_loss(model, &tokens, answer_start, gold_answer, &mask).map_err(|e| step_error(e, cfg.steps))?;
    loss_trace.push(g.item(loss));

    let saliency = saliency_reward(&mask)?;
    let token_scores = token_saliency_scores(&mask)?;
    Ok(MaskTrainResult {
        mask,
        loss_trace,
        saliency,
        token_scores,
    })
}

fn step_error(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { context } => Error::NonFinite {
            context: format!("{context} (mask optimization step {step})"),
        },
        other => other,
    }
}
