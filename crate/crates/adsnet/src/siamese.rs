//! The paired-network transfer step.
//!
//! A vanilla network trains on internal data only; a gain network trains on
//! internal data plus externally sourced batches. Each step, both networks
//! are evaluated on the same internal batch BEFORE updating; the gain edge
//! `w_gain = loss_van_t - loss_gain_t` must be strictly positive for the
//! external term to enter the loss. External examples are individually
//! weighted by `w_s = 1/exp(sigmoid(significance logit))`, bounded in
//! (1/e, 1). A distillation term pulls the gain network's representations
//! toward the vanilla network's (constants under the gradient), and the
//! total objective is
//!     total = gain_term + vanilla_term + beta * distillation.
//!
//! The external forward always runs (its loss and weights are logged), but
//! when the gate rejects it is simply never connected to the total, so
//! backward cannot reach it: rejected-step gradients are bitwise identical
//! to a step that had no external batch at all.

use crate::backbone::{pltv_loss, NetArch, Network, SegmentScheme};
use crate::diffcore::{DiffError, Graph, NodeId, ParamArena, Tensor};
use crate::encoding::{Example, FieldSchema};
use rand::Rng;

/// The two same-architecture networks, one parameter arena apart.
pub struct SiameseState {
    pub vanilla: Network,
    pub gain: Network,
}

impl SiameseState {
    pub fn new(
        arena: &mut ParamArena,
        rng: &mut impl Rng,
        schema: &FieldSchema,
        arch: &NetArch,
    ) -> SiameseState {
        let vanilla = Network::new(arena, rng, "van", schema, arch);
        let gain = Network::new(arena, rng, "gain", schema, arch);
        SiameseState { vanilla, gain }
    }
}

/// Everything one training step measures, in metrics-log column order.
#[derive(Clone, Debug, PartialEq)]
pub struct GainReport {
    pub step: u64,
    pub loss_van_t: f64,
    pub loss_gain_t: f64,
    /// Weighted external loss value; 0 when the step had no external batch.
    pub loss_gain_s: f64,
    /// Exactly loss_van_t - loss_gain_t.
    pub w_gain: f64,
    /// Exactly w_gain > 0.
    pub accepted: bool,
    /// Mean external weight; 0 when the step had no external batch.
    pub mean_w_s: f64,
    pub l_domain: f64,
}

impl GainReport {
    pub const LOG_HEADER: &'static str =
        "step,loss_van_t,loss_gain_t,loss_gain_s,w_gain,accepted,mean_w_s,l_domain";

    pub fn log_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.loss_van_t,
            self.loss_gain_t,
            self.loss_gain_s,
            self.w_gain,
            if self.accepted { 1 } else { 0 },
            self.mean_w_s,
            self.l_domain
        )
    }
}

/// How the distillation targets enter the step graph.
pub enum DistillMode {
    /// Targets are the vanilla network's outputs, gradient-blocked in-graph.
    Live,
    /// Targets are fixed tensors captured earlier. Numeric gradient checks
    /// need this: a perturbed rebuild must hold the stop-gradient constants
    /// at their base-point values to measure the same function the analytic
    /// pass differentiates.
    Frozen {
        encoded: Tensor,
        adapter: Tensor,
    },
}

pub struct StepOptions {
    /// Distillation weight; 0 disconnects the term (value still logged).
    pub beta: f64,
    /// None: gate externals by w_gain > 0. Some(b): force the indicator,
    /// used by the no-gate ablation (true) and by gradient checks (frozen
    /// base-point decision).
    pub gate_override: Option<bool>,
    pub distill: DistillMode,
}

impl Default for StepOptions {
    fn default() -> StepOptions {
        StepOptions { beta: 0.1, gate_override: None, distill: DistillMode::Live }
    }
}

/// Node handles of one assembled step plus its measured report.
pub struct StepNodes {
    /// The full training objective (1 x 1).
    pub total: NodeId,
    /// Vanilla internal mean loss.
    pub loss_van: NodeId,
    /// Gain internal mean loss.
    pub loss_gain_t: NodeId,
    /// Weighted external mean loss; None when the external batch is empty.
    /// Present even on rejected steps (value logged, not connected).
    pub loss_gain_s: Option<NodeId>,
    /// Distillation loss value (connected to total only when beta > 0).
    pub l_domain: NodeId,
    /// Per-example external weights (B_ext x 1).
    pub w_s: Option<NodeId>,
    /// step field is 0; the trainer stamps it.
    pub report: GainReport,
}

/// Per-example external significance weights: 1/exp(sigmoid(logit)),
/// strictly inside (1/e, 1).
pub fn external_weights(g: &mut Graph, sig_logit: NodeId) -> NodeId {
    let s = g.sigmoid(sig_logit);
    let e = g.exp(s);
    g.recip(e)
}

/// Representation-matching loss: mse(encoded) + mse(adapter). Targets must
/// be gradient-free nodes (constants or detached).
pub fn domain_loss(
    g: &mut Graph,
    enc_target: NodeId,
    enc_pred: NodeId,
    ada_target: NodeId,
    ada_pred: NodeId,
) -> Result<NodeId, DiffError> {
    let le = g.mse(enc_target, enc_pred)?;
    let lh = g.mse(ada_target, ada_pred)?;
    g.add(le, lh)
}

/// Assembles one training step's graph: forwards, gate decision, external
/// weighting, distillation, and the total objective. Applies no update.
pub fn build_step(
    g: &mut Graph,
    arena: &ParamArena,
    state: &SiameseState,
    scheme: &SegmentScheme,
    internal: &[&Example],
    external: &[&Example],
    opts: &StepOptions,
) -> Result<StepNodes, DiffError> {
    if internal.is_empty() {
        return Err(DiffError::Shape { op: "build_step", detail: "empty internal batch".into() });
    }

    let van_fwd = state.vanilla.forward(g, arena, internal)?;
    let gain_fwd = state.gain.forward(g, arena, internal)?;
    let van_loss = pltv_loss(g, &van_fwd, internal, scheme)?;
    let gain_loss = pltv_loss(g, &gain_fwd, internal, scheme)?;

    // Gate decision from pre-update losses on the shared internal batch.
    let loss_van_t = g.scalar(van_loss.mean);
    let loss_gain_t = g.scalar(gain_loss.mean);
    let w_gain = loss_van_t - loss_gain_t;
    let accepted = w_gain > 0.0;
    let include_external = opts.gate_override.unwrap_or(accepted) && !external.is_empty();

    // Distillation (targets carry no gradient either way).
    let (enc_t, ada_t) = match &opts.distill {
        DistillMode::Live => (g.detach(van_fwd.encoded), g.detach(van_fwd.adapter)),
        DistillMode::Frozen { encoded, adapter } => {
            (g.constant(encoded.clone()), g.constant(adapter.clone()))
        }
    };
    let l_domain = domain_loss(g, enc_t, gain_fwd.encoded, ada_t, gain_fwd.adapter)?;

    // External forward: always evaluated for the log, connected only when
    // the gate lets it through.
    let (loss_gain_s, w_s, loss_gain_s_val, mean_w_s) = if external.is_empty() {
        (None, None, 0.0, 0.0)
    } else {
        let ext_fwd = state.gain.forward(g, arena, external)?;
        let ext_loss = pltv_loss(g, &ext_fwd, external, scheme)?;
        let w = external_weights(g, ext_fwd.sig_logit);
        let weighted = g.mul(w, ext_loss.per_example)?;
        let m = g.mean(weighted);
        let wv = g.value(w);
        let mean_w = wv.data().iter().sum::<f64>() / wv.len() as f64;
        (Some(m), Some(w), g.scalar(m), mean_w)
    };

    let gain_term = match loss_gain_s {
        Some(s) if include_external => g.add(gain_loss.mean, s)?,
        _ => gain_loss.mean,
    };
    let mut total = g.add(gain_term, van_loss.mean)?;
    if opts.beta > 0.0 {
        let scaled = g.scale(l_domain, opts.beta);
        total = g.add(total, scaled)?;
    }

    let report = GainReport {
        step: 0,
        loss_van_t,
        loss_gain_t,
        loss_gain_s: loss_gain_s_val,
        w_gain,
        accepted,
        mean_w_s,
        l_domain: g.scalar(l_domain),
    };

    Ok(StepNodes {
        total,
        loss_van: van_loss.mean,
        loss_gain_t: gain_loss.mean,
        loss_gain_s,
        l_domain,
        w_s,
        report,
    })
}
