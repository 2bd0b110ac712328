//! Training loop: dense Adam, sparse FTRL-proximal, the paired two-network
//! schedule with gated external batches and periodic alignment, plus the
//! single-network baselines and ablation switches.
//!
//! Update order inside one step is fixed: build graph, backward, apply
//! optimizers in parameter registration order, clear gradients, then sync if
//! the step index divides the alignment period. All randomness flows through
//! seeded ChaCha8 streams, so a (config, seed, data) triple fully determines
//! every logged byte and every final parameter bit.

use crate::backbone::{pltv_loss, NetArch, Network, SegmentScheme};
use crate::diffcore::{Graph, ParamArena, ParamId};
use crate::encoding::{Example, FieldSchema};
use crate::siamese::{build_step, DistillMode, GainReport, SiameseState, StepOptions};
use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

// === configuration ===

/// Everything the training loop needs besides data and field layout.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub sync_frequency: usize,
    pub batch_size: usize,
    pub external_microbatch: usize,
    pub beta: f64,
    pub lr_dense: f64,
    pub lr_sparse: f64,
    pub ftrl_l1: f64,
    pub ftrl_l2: f64,
    pub embedding_dim: usize,
    pub k_segments: usize,
    pub n_experts: usize,
    pub expert_hidden: Vec<usize>,
    pub adapter_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup_steps: 1000,
            total_steps: 3000,
            sync_frequency: 500,
            batch_size: 512,
            external_microbatch: 64,
            beta: 0.1,
            lr_dense: 5e-3,
            lr_sparse: 1e-2,
            ftrl_l1: 0.0,
            ftrl_l2: 0.0,
            embedding_dim: 8,
            k_segments: 8,
            n_experts: 4,
            expert_hidden: vec![128, 64],
            adapter_hidden: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sync_frequency < 1 {
            bail!("sync_frequency must be >= 1, got {}", self.sync_frequency);
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("external_microbatch", self.external_microbatch),
            ("embedding_dim", self.embedding_dim),
            ("k_segments", self.k_segments),
            ("n_experts", self.n_experts),
            ("adapter_hidden", self.adapter_hidden),
        ] {
            if v < 1 {
                bail!("{name} must be >= 1, got {v}");
            }
        }
        if self.expert_hidden.is_empty() || self.expert_hidden.iter().any(|&h| h < 1) {
            bail!("expert_hidden must be a non-empty list of sizes >= 1");
        }
        if !(self.beta >= 0.0) {
            bail!("beta must be >= 0, got {}", self.beta);
        }
        for (name, v) in [
            ("lr_dense", self.lr_dense),
            ("lr_sparse", self.lr_sparse),
            ("ftrl_l1", self.ftrl_l1),
            ("ftrl_l2", self.ftrl_l2),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                bail!("{name} must be finite and >= 0, got {v}");
            }
        }
        Ok(())
    }

    fn arch(&self, n_ordinal: usize) -> NetArch {
        NetArch {
            n_experts: self.n_experts,
            expert_hidden: self.expert_hidden.clone(),
            adapter_hidden: self.adapter_hidden,
            n_ordinal,
        }
    }
}

/// Which training scheme to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Full paired scheme: gated external batches, distillation, alignment.
    Adsnet,
    /// One network, internal data only; external files are ignored.
    BackboneInternalOnly,
    /// One network trained on internal plus external examples mixed into one
    /// unweighted batch, no gate.
    JointMixBaseline,
    /// Paired scheme with the gate forced open every step.
    AblateNoGainEval,
    /// Paired scheme with the distillation weight set to zero.
    AblateNoDomainAdapt,
    /// Paired scheme that copies once at joint start and never re-syncs.
    AblateNoIterAlign,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Adsnet,
        Variant::BackboneInternalOnly,
        Variant::JointMixBaseline,
        Variant::AblateNoGainEval,
        Variant::AblateNoDomainAdapt,
        Variant::AblateNoIterAlign,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Adsnet => "adsnet",
            Variant::BackboneInternalOnly => "backbone_internal_only",
            Variant::JointMixBaseline => "joint_mix_baseline",
            Variant::AblateNoGainEval => "ablate_no_gain_eval",
            Variant::AblateNoDomainAdapt => "ablate_no_domain_adapt",
            Variant::AblateNoIterAlign => "ablate_no_iter_align",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.iter().copied().find(|v| v.as_str() == s)
    }

    pub fn is_paired(&self) -> bool {
        !matches!(self, Variant::BackboneInternalOnly | Variant::JointMixBaseline)
    }
}

// === dense Adam ===

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Bias-corrected Adam over full dense tensors.
pub struct Adam {
    lr: f64,
    slots: BTreeMap<usize, AdamSlot>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam { lr, slots: BTreeMap::new() }
    }

    pub fn register(&mut self, arena: &ParamArena, id: ParamId) {
        let n = arena.get(id).value.len();
        self.slots.insert(id.index(), AdamSlot { m: vec![0.0; n], v: vec![0.0; n], t: 0 });
    }

    /// Zeroes the moment estimates and the step counter for one parameter.
    pub fn reset(&mut self, id: ParamId) {
        let slot = self.slots.get_mut(&id.index()).expect("adam slot registered");
        slot.m.fill(0.0);
        slot.v.fill(0.0);
        slot.t = 0;
    }

    pub fn step(&mut self, arena: &mut ParamArena, id: ParamId) -> Result<()> {
        let slot = self.slots.get_mut(&id.index()).expect("adam slot registered");
        slot.t += 1;
        let c1 = 1.0 - ADAM_B1.powi(slot.t as i32);
        let c2 = 1.0 - ADAM_B2.powi(slot.t as i32);
        let p = arena.get_mut(id);
        let grad = p.grad.data().to_vec();
        let vals = p.value.data_mut();
        for (i, g) in grad.iter().enumerate() {
            if !g.is_finite() {
                bail!(
                    "non-finite gradient {} for parameter {} (flat index {}) at adam step {}",
                    g,
                    p.name(),
                    i,
                    slot.t
                );
            }
            slot.m[i] = ADAM_B1 * slot.m[i] + (1.0 - ADAM_B1) * g;
            slot.v[i] = ADAM_B2 * slot.v[i] + (1.0 - ADAM_B2) * g * g;
            let m_hat = slot.m[i] / c1;
            let v_hat = slot.v[i] / c2;
            vals[i] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            if !vals[i].is_finite() {
                bail!(
                    "non-finite value for parameter {} (flat index {}) after adam step {}",
                    p.name(),
                    i,
                    slot.t
                );
            }
        }
        Ok(())
    }
}

// === sparse FTRL-proximal ===

const FTRL_BETA: f64 = 1.0;

struct FtrlSlot {
    z: Vec<f64>,
    n: Vec<f64>,
}

/// Per-coordinate FTRL-proximal; only rows touched by the last backward pass
/// are updated, everything else keeps both value and state bit-for-bit.
pub struct Ftrl {
    alpha: f64,
    l1: f64,
    l2: f64,
    slots: BTreeMap<usize, FtrlSlot>,
}

impl Ftrl {
    pub fn new(alpha: f64, l1: f64, l2: f64) -> Ftrl {
        Ftrl { alpha, l1, l2, slots: BTreeMap::new() }
    }

    /// Seeds z so the closed-form weight reproduces the current values; a
    /// zero-initialized z would erase non-zero embeddings on first touch.
    pub fn register(&mut self, arena: &ParamArena, id: ParamId) {
        let p = arena.get(id);
        let z: Vec<f64> = p
            .value
            .data()
            .iter()
            .map(|&w| {
                if w == 0.0 {
                    0.0
                } else {
                    -w * (FTRL_BETA / self.alpha + self.l2) - w.signum() * self.l1
                }
            })
            .collect();
        let n = vec![0.0; z.len()];
        self.slots.insert(id.index(), FtrlSlot { z, n });
    }

    /// Clones the accumulator state of `from` into `to` (used when one
    /// network's parameters are copied over the other's).
    pub fn copy_slot(&mut self, from: ParamId, to: ParamId) {
        let src_z = self.slots[&from.index()].z.clone();
        let src_n = self.slots[&from.index()].n.clone();
        let dst = self.slots.get_mut(&to.index()).expect("ftrl slot registered");
        dst.z = src_z;
        dst.n = src_n;
    }

    pub fn step(&mut self, arena: &mut ParamArena, id: ParamId) -> Result<()> {
        let slot = self.slots.get_mut(&id.index()).expect("ftrl slot registered");
        let p = arena.get_mut(id);
        let rows: Vec<usize> = p.touched_rows().collect();
        let cols = p.value.cols();
        let name = p.name().to_string();
        for r in rows {
            for c in 0..cols {
                let g = p.grad.get(r, c);
                if !g.is_finite() {
                    bail!("non-finite gradient {g} for parameter {name} at row {r} col {c}");
                }
                if g == 0.0 {
                    continue;
                }
                let i = r * cols + c;
                let w = p.value.get(r, c);
                let sigma = ((slot.n[i] + g * g).sqrt() - slot.n[i].sqrt()) / self.alpha;
                slot.z[i] += g - sigma * w;
                slot.n[i] += g * g;
                let w_new = if slot.z[i].abs() <= self.l1 {
                    0.0
                } else {
                    -(slot.z[i] - slot.z[i].signum() * self.l1)
                        / ((FTRL_BETA + slot.n[i].sqrt()) / self.alpha + self.l2)
                };
                if !w_new.is_finite() {
                    bail!("non-finite value for parameter {name} at row {r} col {c}");
                }
                p.value.set(r, c, w_new);
            }
        }
        Ok(())
    }
}

// === optimizer bundle ===

/// One Adam plus one FTRL instance covering every registered parameter.
pub struct Optimizers {
    pub adam: Adam,
    pub ftrl: Ftrl,
}

impl Optimizers {
    pub fn new(cfg: &TrainConfig) -> Optimizers {
        Optimizers {
            adam: Adam::new(cfg.lr_dense),
            ftrl: Ftrl::new(cfg.lr_sparse, cfg.ftrl_l1, cfg.ftrl_l2),
        }
    }

    pub fn register_all(&mut self, arena: &ParamArena, ids: &[ParamId]) {
        for &id in ids {
            if arena.get(id).is_sparse() {
                self.ftrl.register(arena, id);
            } else {
                self.adam.register(arena, id);
            }
        }
    }

    /// Applies one update to each listed parameter in order.
    pub fn apply(&mut self, arena: &mut ParamArena, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            if arena.get(id).is_sparse() {
                self.ftrl.step(arena, id)?;
            } else {
                self.adam.step(arena, id)?;
            }
        }
        Ok(())
    }
}

/// Copies `from`'s values over `to`'s, resets `to`'s Adam moments, and clones
/// FTRL accumulators so the copied embeddings survive their next update.
pub fn sync_networks(
    arena: &mut ParamArena,
    opt: &mut Optimizers,
    from: &Network,
    to: &Network,
) {
    let src = from.param_ids();
    let dst = to.param_ids();
    assert_eq!(src.len(), dst.len(), "sync requires identical architectures");
    for (&f, &t) in src.iter().zip(dst.iter()) {
        let value = arena.get(f).value.clone();
        let sparse = arena.get(f).is_sparse();
        arena.get_mut(t).value = value;
        if sparse {
            opt.ftrl.copy_slot(f, t);
        } else {
            opt.adam.reset(t);
        }
    }
}

// === batch streams ===

/// Endless shuffled cursor over example indices; reshuffles on wraparound.
struct BatchStream {
    indices: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    size: usize,
}

impl BatchStream {
    fn new(n: usize, size: usize, seed: u64) -> BatchStream {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(&mut rng);
        BatchStream { indices, cursor: 0, rng, size }
    }

    fn next(&mut self) -> Vec<usize> {
        (0..self.size)
            .map(|_| {
                if self.cursor == self.indices.len() {
                    self.indices.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                let i = self.indices[self.cursor];
                self.cursor += 1;
                i
            })
            .collect()
    }
}

fn gather<'a>(examples: &'a [Example], idx: &[usize]) -> Vec<&'a Example> {
    idx.iter().map(|&i| &examples[i]).collect()
}

// === trained model ===

/// The networks a finished run leaves behind.
pub enum ModelKind {
    Paired(SiameseState),
    Single(Network),
}

/// Final parameters, the segment scheme, per-step reports, and the full
/// metrics log text.
pub struct TrainedModel {
    pub arena: ParamArena,
    pub kind: ModelKind,
    pub arch: NetArch,
    pub scheme: SegmentScheme,
    pub reports: Vec<GainReport>,
    pub log: String,
}

impl TrainedModel {
    /// Network used for evaluation and serving: the externally-informed one
    /// when training was paired, otherwise the only network there is.
    pub fn eval_network(&self) -> &Network {
        match &self.kind {
            ModelKind::Paired(state) => &state.gain,
            ModelKind::Single(net) => net,
        }
    }

    /// Name prefix of the evaluation network's parameters.
    pub fn eval_prefix(&self) -> &'static str {
        match &self.kind {
            ModelKind::Paired(_) => "gain",
            ModelKind::Single(_) => "net",
        }
    }
}

/// Snapshot handed to the step observer right after a joint step finished
/// (parameters updated, log line emitted, sync applied if scheduled).
pub struct StepEvent<'a> {
    pub step: u64,
    pub report: &'a GainReport,
    pub synced: bool,
    pub arena: &'a ParamArena,
    pub state: &'a SiameseState,
}

// === training ===

/// Trains `variant` on the given splits. External examples are ignored by
/// the internal-only baseline and consumed unconditionally by the joint-mix
/// baseline; the paired variants gate them per step.
pub fn train(
    cfg: &TrainConfig,
    schema: &FieldSchema,
    variant: Variant,
    internal_train: &[Example],
    external_train: &[Example],
    seed: u64,
) -> Result<TrainedModel> {
    train_observed(cfg, schema, variant, internal_train, external_train, seed, &mut |_| {})
}

/// `train` plus a per-joint-step observer (paired variants only); used to
/// watch sync events and parameter state without changing the run.
pub fn train_observed(
    cfg: &TrainConfig,
    schema: &FieldSchema,
    variant: Variant,
    internal_train: &[Example],
    external_train: &[Example],
    seed: u64,
    observer: &mut dyn FnMut(StepEvent),
) -> Result<TrainedModel> {
    cfg.validate()?;
    if internal_train.is_empty() {
        bail!("internal training split is empty");
    }
    for ex in internal_train.iter().chain(external_train) {
        if !schema.validates(&ex.feature_ids) {
            bail!(
                "example with ad_id {} has feature ids {:?} outside the field layout",
                ex.ad_id,
                ex.feature_ids
            );
        }
    }

    let positives: Vec<f64> =
        internal_train.iter().map(|e| e.ltv).filter(|&v| v > 0.0).collect();
    if positives.is_empty() {
        bail!("internal training split has no purchases; cannot fit amount segments");
    }
    let scheme = SegmentScheme::fit_segments(&positives, cfg.k_segments)?;
    let arch = cfg.arch(scheme.num_heads());

    // independent deterministic streams for init and the two samplers
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let init_seed = master.gen::<u64>();
    let internal_seed = master.gen::<u64>();
    let external_seed = master.gen::<u64>();

    let mut internal_stream =
        BatchStream::new(internal_train.len(), cfg.batch_size, internal_seed);
    let mut external_stream = if external_train.is_empty() {
        None
    } else {
        Some(BatchStream::new(
            external_train.len(),
            cfg.external_microbatch,
            external_seed,
        ))
    };

    let mut arena = ParamArena::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(init_seed);
    let mut log = String::from(GainReport::LOG_HEADER);
    log.push('\n');
    let mut reports: Vec<GainReport> = Vec::new();

    if variant.is_paired() {
        let state = SiameseState::new(&mut arena, &mut init_rng, schema, &arch);
        let van_ids = state.vanilla.param_ids();
        let gain_ids = state.gain.param_ids();
        let all_ids: Vec<ParamId> =
            van_ids.iter().chain(gain_ids.iter()).copied().collect();
        let mut opt = Optimizers::new(cfg);
        opt.register_all(&arena, &all_ids);

        // warmup: internal-only steps on the vanilla network
        for _ in 0..cfg.warmup_steps {
            let idx = internal_stream.next();
            let batch = gather(internal_train, &idx);
            let mut g = Graph::new();
            let fwd = state.vanilla.forward(&mut g, &arena, &batch)?;
            let loss = pltv_loss(&mut g, &fwd, &batch, &scheme)?.mean;
            g.backward(loss, &mut arena)?;
            opt.apply(&mut arena, &van_ids)?;
            arena.zero_grads();
        }

        // joint start: overwrite the external-facing network with the warm one
        sync_networks(&mut arena, &mut opt, &state.vanilla, &state.gain);

        let opts = StepOptions {
            beta: if variant == Variant::AblateNoDomainAdapt { 0.0 } else { cfg.beta },
            gate_override: if variant == Variant::AblateNoGainEval {
                Some(true)
            } else {
                None
            },
            distill: DistillMode::Live,
        };

        for t in 1..=cfg.total_steps as u64 {
            let idx = internal_stream.next();
            let internal = gather(internal_train, &idx);
            let external = match external_stream.as_mut() {
                Some(s) => gather(external_train, &s.next()),
                None => Vec::new(),
            };
            let mut g = Graph::new();
            let step =
                build_step(&mut g, &arena, &state, &scheme, &internal, &external, &opts)?;
            g.backward(step.total, &mut arena)?;
            opt.apply(&mut arena, &all_ids)
                .with_context(|| format!("joint step {t}"))?;
            arena.zero_grads();

            let mut report = step.report;
            report.step = t;
            log.push_str(&report.log_line());
            log.push('\n');

            let synced = variant != Variant::AblateNoIterAlign
                && t as usize % cfg.sync_frequency == 0;
            if synced {
                sync_networks(&mut arena, &mut opt, &state.gain, &state.vanilla);
            }
            reports.push(report);
            observer(StepEvent {
                step: t,
                report: reports.last().unwrap(),
                synced,
                arena: &arena,
                state: &state,
            });
        }

        return Ok(TrainedModel {
            arena,
            kind: ModelKind::Paired(state),
            arch,
            scheme,
            reports,
            log,
        });
    }

    // single-network baselines
    let net = Network::new(&mut arena, &mut init_rng, "net", schema, &arch);
    let ids = net.param_ids();
    let mut opt = Optimizers::new(cfg);
    opt.register_all(&arena, &ids);
    let mix_external = variant == Variant::JointMixBaseline;

    for _ in 0..cfg.warmup_steps {
        let idx = internal_stream.next();
        let batch = gather(internal_train, &idx);
        let mut g = Graph::new();
        let fwd = net.forward(&mut g, &arena, &batch)?;
        let loss = pltv_loss(&mut g, &fwd, &batch, &scheme)?.mean;
        g.backward(loss, &mut arena)?;
        opt.apply(&mut arena, &ids)?;
        arena.zero_grads();
    }

    for t in 1..=cfg.total_steps as u64 {
        let idx = internal_stream.next();
        let mut batch = gather(internal_train, &idx);
        let n_internal = batch.len();
        if mix_external {
            if let Some(s) = external_stream.as_mut() {
                batch.extend(gather(external_train, &s.next()));
            }
        }
        let mut g = Graph::new();
        let fwd = net.forward(&mut g, &arena, &batch)?;
        let losses = pltv_loss(&mut g, &fwd, &batch, &scheme)?;
        g.backward(losses.mean, &mut arena)?;
        opt.apply(&mut arena, &ids).with_context(|| format!("step {t}"))?;

        let per = g.value(losses.per_example);
        let internal_mean: f64 =
            per.data()[..n_internal].iter().sum::<f64>() / n_internal as f64;
        let external_mean = if batch.len() > n_internal {
            per.data()[n_internal..].iter().sum::<f64>() / (batch.len() - n_internal) as f64
        } else {
            0.0
        };
        arena.zero_grads();

        // filler report: no gate ran, so gain/domain columns stay zero; the
        // accepted flag records whether external data entered the batch
        let report = GainReport {
            step: t,
            loss_van_t: internal_mean,
            loss_gain_t: 0.0,
            loss_gain_s: external_mean,
            w_gain: 0.0,
            accepted: mix_external && batch.len() > n_internal,
            mean_w_s: 0.0,
            l_domain: 0.0,
        };
        log.push_str(&report.log_line());
        log.push('\n');
        reports.push(report);
    }

    Ok(TrainedModel {
        arena,
        kind: ModelKind::Single(net),
        arch,
        scheme,
        reports,
        log,
    })
}
