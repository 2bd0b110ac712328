//! Single-network LTV predictor: mixture-of-experts over the encoded
//! features, an adapter bottleneck, a purchase-probability head, an ordinal
//! amount head, and the segment scheme that turns amounts into ordinal
//! targets and predictions back into expected LTV.
//!
//! Segment convention: a scheme with thresholds r_1 < ... < r_{K-1}
//! (r_1 >= 0) and means m_0 <= ... <= m_{K-1} (m_0 = 0) defines K segments;
//! segment 0 is the non-purchase bucket. The ordinal head has K-1 outputs,
//! head k predicting P(y > r_k). Expected LTV telescopes:
//! pltv = p * sum_k p^k * (m_k - m_{k-1}).

use crate::diffcore::{DiffError, Graph, NodeId, ParamArena, ParamId, Tensor};
use crate::encoding::{Encoder, Example, FieldSchema};
use rand::Rng;

// ----- segments -----

/// LTV segmentation: thresholds for the ordinal heads plus per-segment mean
/// amounts used at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentScheme {
    thresholds: Vec<f64>,
    means: Vec<f64>,
}

impl SegmentScheme {
    pub fn from_parts(thresholds: Vec<f64>, means: Vec<f64>) -> anyhow::Result<SegmentScheme> {
        anyhow::ensure!(!thresholds.is_empty(), "need at least one threshold");
        anyhow::ensure!(thresholds[0] >= 0.0, "first threshold must be >= 0");
        anyhow::ensure!(
            thresholds.windows(2).all(|w| w[0] < w[1]),
            "thresholds must be strictly increasing"
        );
        anyhow::ensure!(
            means.len() == thresholds.len() + 1,
            "means length {} must be thresholds length {} + 1",
            means.len(),
            thresholds.len()
        );
        anyhow::ensure!(means[0] == 0.0, "segment 0 mean must be 0");
        anyhow::ensure!(
            means.windows(2).all(|w| w[0] <= w[1]),
            "means must be non-decreasing"
        );
        anyhow::ensure!(
            thresholds.iter().chain(&means).all(|v| v.is_finite()),
            "scheme values must be finite"
        );
        Ok(SegmentScheme { thresholds, means })
    }

    /// Frequency-equalized fit on the training split's positive amounts.
    ///
    /// `k` asks for k equal-frequency positive buckets; their upper edges
    /// come from the nearest-rank quantile rule. Duplicate edges are merged
    /// and an edge equal to the maximum is dropped (it would create an empty
    /// top bucket), reducing the bucket count with a warning. The returned
    /// scheme always has threshold 0 first (the purchase/no-purchase cut),
    /// so it covers k+1 segments when no reduction occurs.
    pub fn fit_segments(positive_ltvs: &[f64], k: usize) -> anyhow::Result<SegmentScheme> {
        anyhow::ensure!(!positive_ltvs.is_empty(), "no positive amounts to fit");
        anyhow::ensure!(k >= 2, "need at least 2 buckets, got {k}");
        anyhow::ensure!(
            positive_ltvs.iter().all(|&v| v > 0.0 && v.is_finite()),
            "positive amounts must be finite and > 0"
        );
        let mut sorted = positive_ltvs.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        let max = *sorted.last().unwrap();

        let mut bounds: Vec<f64> = Vec::with_capacity(k - 1);
        for q in 1..k {
            let rank = (n * q).div_ceil(k); // nearest-rank, 1-indexed
            let b = sorted[rank - 1];
            if b < max && bounds.last() != Some(&b) {
                bounds.push(b);
            }
        }
        if bounds.len() < k - 1 {
            log::warn!(
                "segment fit: {} distinct usable edges for {} requested buckets; reduced to {}",
                bounds.len(),
                k,
                bounds.len() + 1
            );
        }

        // Bucket (prev, edge] means; final bucket (last edge, inf).
        let mut means = vec![0.0];
        let mut lo = 0usize;
        for &b in &bounds {
            let hi = sorted.partition_point(|&v| v <= b);
            means.push(sorted[lo..hi].iter().sum::<f64>() / (hi - lo) as f64);
            lo = hi;
        }
        means.push(sorted[lo..].iter().sum::<f64>() / (n - lo) as f64);

        let mut thresholds = vec![0.0];
        thresholds.extend(bounds);
        SegmentScheme::from_parts(thresholds, means)
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn num_segments(&self) -> usize {
        self.means.len()
    }

    /// Number of ordinal head outputs.
    pub fn num_heads(&self) -> usize {
        self.thresholds.len()
    }

    /// Threshold-exceedance targets: entry k is 1 iff y > r_k. Monotone
    /// non-increasing in k because thresholds increase.
    pub fn ordinal_labels(&self, y: f64) -> Vec<f64> {
        self.thresholds.iter().map(|&r| if y > r { 1.0 } else { 0.0 }).collect()
    }

    /// Expected LTV from the two heads' outputs;
    /// in [0, max mean], monotone in p and in each p_ord entry.
    pub fn predict_ltv(&self, p: f64, p_ord: &[f64]) -> f64 {
        assert_eq!(p_ord.len(), self.num_heads(), "ordinal output width mismatch");
        let mut total = 0.0;
        for (k, &pk) in p_ord.iter().enumerate() {
            total += pk * (self.means[k + 1] - self.means[k]);
        }
        p * total
    }

    pub fn max_mean(&self) -> f64 {
        *self.means.last().unwrap()
    }
}

// ----- network -----

/// Fully-connected layer; weight is (in x out), bias (1 x out).
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(
        arena: &mut ParamArena,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Linear {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut w = Tensor::zeros(fan_in, fan_out);
        for v in w.data_mut() {
            *v = rng.gen_range(-bound..=bound);
        }
        // Slightly positive bias: a layer whose input is an all-zero relu
        // output would otherwise sit exactly on its own relu kink, where the
        // derivative is ill-defined (breaks finite-difference verification
        // and invites dead units).
        Linear {
            w: arena.add_dense(&format!("{name}.w"), w),
            b: arena.add_dense(&format!("{name}.b"), Tensor::filled(1, fan_out, 0.01)),
        }
    }

    fn forward(&self, g: &mut Graph, arena: &ParamArena, x: NodeId) -> Result<NodeId, DiffError> {
        let w = g.param(arena, self.w);
        let b = g.param(arena, self.b);
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }
}

/// Architecture knobs shared by every network in a run.
#[derive(Clone, Debug)]
pub struct NetArch {
    pub n_experts: usize,
    pub expert_hidden: Vec<usize>,
    pub adapter_hidden: usize,
    pub n_ordinal: usize,
}

impl NetArch {
    pub fn validate(&self) -> anyhow::Result<()> {
        anyhow::ensure!(self.n_experts >= 1, "need at least one expert");
        anyhow::ensure!(!self.expert_hidden.is_empty(), "expert hidden sizes must be non-empty");
        anyhow::ensure!(
            self.expert_hidden.iter().all(|&h| h >= 1) && self.adapter_hidden >= 1,
            "hidden sizes must be >= 1"
        );
        anyhow::ensure!(self.n_ordinal >= 1, "need at least one ordinal head");
        Ok(())
    }
}

/// All node handles a single network forward produces for one batch.
pub struct Forward {
    /// Concatenated feature representation (B x encoder width).
    pub encoded: NodeId,
    /// Gate probabilities (B x n_experts); rows sum to 1.
    pub gate: NodeId,
    /// Gate-weighted expert mixture (B x last expert hidden).
    pub mixture: NodeId,
    /// Adapter bottleneck activation (B x adapter_hidden).
    pub adapter: NodeId,
    /// Purchase probability (B x 1), in (0, 1).
    pub p_purchase: NodeId,
    /// Ordinal exceedance probabilities (B x n_ordinal), each in (0, 1).
    pub p_ordinal: NodeId,
    /// Raw significance logit (B x 1) for external-sample weighting.
    pub sig_logit: NodeId,
}

/// One complete parameter set: encoder, expert mixture, adapter, heads.
/// The siamese pair instantiates this twice with different name prefixes.
pub struct Network {
    pub encoder: Encoder,
    experts: Vec<Vec<Linear>>,
    gate: Linear,
    adapter: Linear,
    prob_head: Linear,
    ordinal_head: Linear,
    sig_head: Linear,
    ids: Vec<ParamId>,
}

impl Network {
    pub fn new(
        arena: &mut ParamArena,
        rng: &mut impl Rng,
        prefix: &str,
        schema: &FieldSchema,
        arch: &NetArch,
    ) -> Network {
        arch.validate().expect("invalid architecture");
        let encoder = Encoder::new(arena, rng, prefix, schema);
        let width = encoder.output_width();

        let experts: Vec<Vec<Linear>> = (0..arch.n_experts)
            .map(|j| {
                let mut layers = Vec::new();
                let mut fan_in = width;
                for (l, &h) in arch.expert_hidden.iter().enumerate() {
                    layers.push(Linear::new(
                        arena,
                        rng,
                        &format!("{prefix}.expert{j}.l{l}"),
                        fan_in,
                        h,
                    ));
                    fan_in = h;
                }
                layers
            })
            .collect();
        let gate = Linear::new(arena, rng, &format!("{prefix}.gate"), width, arch.n_experts);
        let top = *arch.expert_hidden.last().unwrap();
        let adapter =
            Linear::new(arena, rng, &format!("{prefix}.adapter"), top, arch.adapter_hidden);
        let prob_head = Linear::new(arena, rng, &format!("{prefix}.prob"), arch.adapter_hidden, 1);
        let ordinal_head = Linear::new(
            arena,
            rng,
            &format!("{prefix}.ordinal"),
            arch.adapter_hidden,
            arch.n_ordinal,
        );
        let sig_head = Linear::new(arena, rng, &format!("{prefix}.sig"), arch.adapter_hidden, 1);

        let mut ids = encoder.param_ids();
        for layers in &experts {
            for l in layers {
                ids.push(l.w);
                ids.push(l.b);
            }
        }
        for l in [&gate, &adapter, &prob_head, &ordinal_head, &sig_head] {
            ids.push(l.w);
            ids.push(l.b);
        }

        Network { encoder, experts, gate, adapter, prob_head, ordinal_head, sig_head, ids }
    }

    /// Every parameter in a fixed order; two networks built with the same
    /// schema and architecture align position-by-position.
    pub fn param_ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        arena: &ParamArena,
        batch: &[&Example],
    ) -> Result<Forward, DiffError> {
        let encoded = self.encoder.encode(g, arena, batch)?;

        let gate_logits = self.gate.forward(g, arena, encoded)?;
        let gate = g.softmax(gate_logits);

        let mut mixture = None;
        for (j, layers) in self.experts.iter().enumerate() {
            let mut h = encoded;
            for l in layers {
                let z = l.forward(g, arena, h)?;
                h = g.relu(z);
            }
            let gj = g.slice_col(gate, j)?;
            let weighted = g.mul_col(h, gj)?;
            mixture = Some(match mixture {
                None => weighted,
                Some(acc) => g.add(acc, weighted)?,
            });
        }
        let mixture = mixture.expect("at least one expert");

        let az = self.adapter.forward(g, arena, mixture)?;
        let adapter = g.relu(az);

        let pz = self.prob_head.forward(g, arena, adapter)?;
        let p_purchase = g.sigmoid(pz);
        let oz = self.ordinal_head.forward(g, arena, adapter)?;
        let p_ordinal = g.sigmoid(oz);
        let sig_logit = self.sig_head.forward(g, arena, adapter)?;

        Ok(Forward { encoded, gate, mixture, adapter, p_purchase, p_ordinal, sig_logit })
    }
}

// ----- losses -----

/// Per-example purchase cross-entropy (B x 1): bce(p, 1{y > 0}).
pub fn prob_loss(
    g: &mut Graph,
    p_purchase: NodeId,
    batch: &[&Example],
) -> Result<NodeId, DiffError> {
    let labels: Vec<f64> = batch.iter().map(|ex| if ex.ltv > 0.0 { 1.0 } else { 0.0 }).collect();
    let y = g.constant(Tensor::column_vector(labels));
    g.bce(p_purchase, y)
}

/// Per-example ordinal amount loss (B x 1): sum over heads of
/// bce(p^k, 1{y > r_k}), zeroed for non-purchasers.
pub fn amount_loss(
    g: &mut Graph,
    p_ordinal: NodeId,
    batch: &[&Example],
    scheme: &SegmentScheme,
) -> Result<NodeId, DiffError> {
    let rows: Vec<Vec<f64>> = batch.iter().map(|ex| scheme.ordinal_labels(ex.ltv)).collect();
    let targets = g.constant(Tensor::from_rows(&rows));
    let per_head = g.bce(p_ordinal, targets)?;
    let summed = g.sum_cols(per_head);
    let mask: Vec<f64> = batch.iter().map(|ex| if ex.ltv > 0.0 { 1.0 } else { 0.0 }).collect();
    let mask = g.constant(Tensor::column_vector(mask));
    g.mul(summed, mask)
}

/// The joint two-head training loss for one network on one batch.
pub struct LossNodes {
    /// Per-example loss column (B x 1).
    pub per_example: NodeId,
    /// Batch mean (1 x 1).
    pub mean: NodeId,
}

pub fn pltv_loss(
    g: &mut Graph,
    fwd: &Forward,
    batch: &[&Example],
    scheme: &SegmentScheme,
) -> Result<LossNodes, DiffError> {
    let lp = prob_loss(g, fwd.p_purchase, batch)?;
    let la = amount_loss(g, fwd.p_ordinal, batch, scheme)?;
    let per_example = g.add(lp, la)?;
    let mean = g.mean(per_example);
    Ok(LossNodes { per_example, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_difference_check;
    use crate::encoding::Domain;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn example(ids: Vec<usize>, ltv: f64) -> Example {
        Example { feature_ids: ids, domain: Domain::Internal, domain_id: 0, day: 0, ad_id: 0, ltv }
    }

    fn tiny_setup(
        seed: u64,
        n_experts: usize,
    ) -> (ParamArena, Network, FieldSchema) {
        let schema = FieldSchema::anonymous(&[4, 4], 2).unwrap();
        let arch = NetArch {
            n_experts,
            expert_hidden: vec![4, 3],
            adapter_hidden: 3,
            n_ordinal: 2,
        };
        let mut arena = ParamArena::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::new(&mut arena, &mut rng, "n", &schema, &arch);
        (arena, net, schema)
    }

    fn copy_params(arena: &mut ParamArena, from: &[ParamId], to: &[ParamId]) {
        for (&f, &t) in from.iter().zip(to) {
            let v = arena.get(f).value.clone();
            arena.get_mut(t).value = v;
        }
    }

    // === segment fitting ===

    #[test]
    fn fit_eight_values_four_buckets() {
        let s = SegmentScheme::fit_segments(
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
            4,
        )
        .unwrap();
        assert_eq!(s.thresholds(), &[0.0, 2.0, 4.0, 6.0]);
        assert_eq!(s.means(), &[0.0, 1.5, 3.5, 5.5, 7.5]);
    }

    #[test]
    fn fit_two_point() {
        let s = SegmentScheme::fit_segments(&[10.0, 1000.0], 2).unwrap();
        assert_eq!(s.thresholds(), &[0.0, 10.0]);
        assert_eq!(s.means(), &[0.0, 10.0, 1000.0]);
    }

    #[test]
    fn fit_identical_values_collapses_to_two_segments() {
        let s = SegmentScheme::fit_segments(&[7.0; 5], 4).unwrap();
        assert_eq!(s.thresholds(), &[0.0]);
        assert_eq!(s.means(), &[0.0, 7.0]);
        assert_eq!(s.num_segments(), 2);
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(SegmentScheme::fit_segments(&[], 4).is_err());
        assert!(SegmentScheme::fit_segments(&[1.0, -2.0], 4).is_err());
        assert!(SegmentScheme::fit_segments(&[1.0, 2.0], 1).is_err());
    }

    #[test]
    fn from_parts_enforces_invariants() {
        assert!(SegmentScheme::from_parts(vec![0.0, 5.0], vec![0.0, 2.0, 8.0]).is_ok());
        assert!(SegmentScheme::from_parts(vec![5.0, 0.0], vec![0.0, 2.0, 8.0]).is_err());
        assert!(SegmentScheme::from_parts(vec![-1.0], vec![0.0, 2.0]).is_err());
        assert!(SegmentScheme::from_parts(vec![0.0], vec![1.0, 2.0]).is_err());
        assert!(SegmentScheme::from_parts(vec![0.0, 5.0], vec![0.0, 8.0, 2.0]).is_err());
        assert!(SegmentScheme::from_parts(vec![0.0, 5.0], vec![0.0, 2.0]).is_err());
    }

    // === ordinal labels ===

    #[test]
    fn ordinal_hand_case() {
        let s = SegmentScheme::from_parts(vec![0.0, 10.0, 50.0], vec![0.0, 5.0, 30.0, 100.0])
            .unwrap();
        assert_eq!(s.ordinal_labels(30.0), vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn ordinal_zero_y_is_all_zeros() {
        let s = SegmentScheme::from_parts(vec![0.0, 10.0], vec![0.0, 5.0, 20.0]).unwrap();
        assert_eq!(s.ordinal_labels(0.0), vec![0.0, 0.0]);
    }

    #[test]
    fn ordinal_above_top_is_all_ones() {
        let s = SegmentScheme::from_parts(vec![0.0, 10.0, 50.0], vec![0.0, 5.0, 30.0, 100.0])
            .unwrap();
        assert_eq!(s.ordinal_labels(51.0), vec![1.0, 1.0, 1.0]);
    }

    // === pltv inference ===

    #[test]
    fn predict_hand_case() {
        let s = SegmentScheme::from_parts(vec![0.0, 10.0], vec![0.0, 10.0, 50.0]).unwrap();
        assert_eq!(s.predict_ltv(0.5, &[1.0, 0.5]), 15.0);
    }

    #[test]
    fn predict_zero_probability_is_zero() {
        let s = SegmentScheme::from_parts(vec![0.0, 10.0], vec![0.0, 10.0, 50.0]).unwrap();
        assert_eq!(s.predict_ltv(0.0, &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn predict_all_ones_telescopes_to_top_mean() {
        let s = SegmentScheme::from_parts(vec![0.0, 10.0, 50.0], vec![0.0, 5.0, 30.0, 120.0])
            .unwrap();
        assert!((s.predict_ltv(0.25, &[1.0, 1.0, 1.0]) - 0.25 * 120.0).abs() < 1e-12);
    }

    // === losses (graph) ===

    #[test]
    fn prob_loss_half_is_ln2() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::column_vector(vec![0.5]));
        let ex = example(vec![0, 0], 5.0);
        let l = prob_loss(&mut g, p, &[&ex]).unwrap();
        assert!((g.value(l).get(0, 0) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn amount_loss_hand_case() {
        // targets [1, 0] with predictions [0.5, 0.5] -> 2 ln 2
        let s = SegmentScheme::from_parts(vec![0.0, 10.0], vec![0.0, 5.0, 20.0]).unwrap();
        let mut g = Graph::new();
        let p = g.constant(Tensor::row_vector(vec![0.5, 0.5]));
        let ex = example(vec![0, 0], 5.0); // labels: y>0 yes, y>10 no
        let l = amount_loss(&mut g, p, &[&ex], &s).unwrap();
        assert!((g.value(l).get(0, 0) - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn amount_loss_masked_for_non_purchasers() {
        let s = SegmentScheme::from_parts(vec![0.0, 10.0], vec![0.0, 5.0, 20.0]).unwrap();
        let mut g = Graph::new();
        let p = g.constant(Tensor::row_vector(vec![0.9, 0.7]));
        let ex = example(vec![0, 0], 0.0);
        let l = amount_loss(&mut g, p, &[&ex], &s).unwrap();
        assert_eq!(g.value(l).get(0, 0), 0.0);
    }

    #[test]
    fn pltv_loss_zero_label_is_prob_term_only() {
        let (arena, net, _) = tiny_setup(3, 2);
        let s = SegmentScheme::from_parts(vec![0.0, 10.0], vec![0.0, 5.0, 20.0]).unwrap();
        let ex = example(vec![1, 2], 0.0);
        let mut g = Graph::new();
        let fwd = net.forward(&mut g, &arena, &[&ex]).unwrap();
        let loss = pltv_loss(&mut g, &fwd, &[&ex], &s).unwrap();
        let p = g.value(fwd.p_purchase).get(0, 0);
        let expect = -(1.0 - p).ln();
        assert!((g.scalar(loss.mean) - expect).abs() < 1e-12);
    }

    #[test]
    fn pltv_loss_is_sum_of_components() {
        let (arena, net, _) = tiny_setup(11, 3);
        let s = SegmentScheme::from_parts(vec![0.0, 6.0], vec![0.0, 4.0, 30.0]).unwrap();
        let exs: Vec<Example> = (0..8)
            .map(|i| example(vec![i % 4, (i * 3) % 4], if i % 3 == 0 { 0.0 } else { i as f64 * 2.5 }))
            .collect();
        let refs: Vec<&Example> = exs.iter().collect();
        let mut g = Graph::new();
        let fwd = net.forward(&mut g, &arena, &refs).unwrap();
        let joint = pltv_loss(&mut g, &fwd, &refs, &s).unwrap();
        let lp = prob_loss(&mut g, fwd.p_purchase, &refs).unwrap();
        let la = amount_loss(&mut g, fwd.p_ordinal, &refs, &s).unwrap();
        for i in 0..8 {
            let want = g.value(lp).get(i, 0) + g.value(la).get(i, 0);
            assert!((g.value(joint.per_example).get(i, 0) - want).abs() < 1e-15);
        }
    }

    // === expert mixture ===

    #[test]
    fn identical_experts_make_gate_irrelevant() {
        let (mut arena, net, _) = tiny_setup(5, 2);
        // copy expert 0's layers onto expert 1
        let e0: Vec<ParamId> =
            net.experts[0].iter().flat_map(|l| [l.w, l.b]).collect();
        let e1: Vec<ParamId> =
            net.experts[1].iter().flat_map(|l| [l.w, l.b]).collect();
        copy_params(&mut arena, &e0, &e1);

        let ex = example(vec![1, 3], 0.0);
        let mut g = Graph::new();
        let fwd = net.forward(&mut g, &arena, &[&ex]).unwrap();
        // mixture must equal expert 0's own output: recompute it directly
        let mut g2 = Graph::new();
        let enc = net.encoder.encode(&mut g2, &arena, &[&ex]).unwrap();
        let mut h = enc;
        for l in &net.experts[0] {
            let z = l.forward(&mut g2, &arena, h).unwrap();
            h = g2.relu(z);
        }
        for (a, b) in g.value(fwd.mixture).data().iter().zip(g2.value(h).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_gate_averages_experts() {
        let (mut arena, net, _) = tiny_setup(7, 2);
        arena.get_mut(net.gate.w).value.fill(0.0);
        arena.get_mut(net.gate.b).value.fill(0.0);
        let ex = example(vec![0, 2], 0.0);
        let mut g = Graph::new();
        let fwd = net.forward(&mut g, &arena, &[&ex]).unwrap();
        for &v in g.value(fwd.gate).data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        let mut g2 = Graph::new();
        let enc = net.encoder.encode(&mut g2, &arena, &[&ex]).unwrap();
        let mut outs = Vec::new();
        for layers in &net.experts {
            let mut h = enc;
            for l in layers {
                let z = l.forward(&mut g2, &arena, h).unwrap();
                h = g2.relu(z);
            }
            outs.push(h);
        }
        for c in 0..3 {
            let avg =
                (g2.value(outs[0]).get(0, c) + g2.value(outs[1]).get(0, c)) / 2.0;
            assert!((g.value(fwd.mixture).get(0, c) - avg).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_gate_selects_one_expert() {
        let (mut arena, net, _) = tiny_setup(9, 3);
        arena.get_mut(net.gate.w).value.fill(0.0);
        arena
            .get_mut(net.gate.b)
            .value
            .row_mut(0)
            .copy_from_slice(&[-50.0, 50.0, -50.0]);
        let ex = example(vec![2, 1], 0.0);
        let mut g = Graph::new();
        let fwd = net.forward(&mut g, &arena, &[&ex]).unwrap();
        let mut g2 = Graph::new();
        let enc = net.encoder.encode(&mut g2, &arena, &[&ex]).unwrap();
        let mut h = enc;
        for l in &net.experts[1] {
            let z = l.forward(&mut g2, &arena, h).unwrap();
            h = g2.relu(z);
        }
        for (a, b) in g.value(fwd.mixture).data().iter().zip(g2.value(h).data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn gate_rows_are_distributions_and_heads_in_unit_interval() {
        let (arena, net, _) = tiny_setup(13, 3);
        let exs: Vec<Example> =
            (0..5).map(|i| example(vec![i % 4, (i + 1) % 4], i as f64)).collect();
        let refs: Vec<&Example> = exs.iter().collect();
        let mut g = Graph::new();
        let fwd = net.forward(&mut g, &arena, &refs).unwrap();
        for r in 0..5 {
            let sum: f64 = g.value(fwd.gate).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        for &p in g.value(fwd.p_purchase).data() {
            assert!(p > 0.0 && p < 1.0);
        }
        for &p in g.value(fwd.p_ordinal).data() {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    // === end-to-end gradients ===

    #[test]
    fn full_network_loss_passes_finite_difference() {
        let (mut arena, net, _) = tiny_setup(17, 2);
        let s = SegmentScheme::from_parts(vec![0.0, 8.0], vec![0.0, 4.0, 20.0]).unwrap();
        let exs: Vec<Example> =
            vec![example(vec![0, 1], 0.0), example(vec![2, 3], 6.0), example(vec![1, 1], 30.0)];
        let report = finite_difference_check(&mut arena, 1e-6, |g, a| {
            let refs: Vec<&Example> = exs.iter().collect();
            let fwd = net.forward(g, a, &refs)?;
            let loss = pltv_loss(g, &fwd, &refs, &s)?;
            Ok(loss.mean)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{:?}", report.worst);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            // s^k never increases in k.
            #[test]
            fn ordinal_labels_monotone_non_increasing(y in 0.0f64..200.0) {
                let s = SegmentScheme::from_parts(
                    vec![0.0, 6.0, 30.0, 98.0],
                    vec![0.0, 3.0, 15.0, 60.0, 150.0],
                ).unwrap();
                let labels = s.ordinal_labels(y);
                prop_assert!(labels.windows(2).all(|w| w[0] >= w[1]));
            }

            // pltv stays within [0, top mean] and is monotone in p.
            #[test]
            fn predict_bounded_and_monotone(
                p in 0.0f64..=1.0,
                q in proptest::collection::vec(0.0f64..=1.0, 3),
            ) {
                let s = SegmentScheme::from_parts(
                    vec![0.0, 10.0, 50.0],
                    vec![0.0, 5.0, 30.0, 100.0],
                ).unwrap();
                let v = s.predict_ltv(p, &q);
                prop_assert!((0.0..=s.max_mean() + 1e-12).contains(&v));
                let more = s.predict_ltv((p + 0.1).min(1.0), &q);
                prop_assert!(more + 1e-12 >= v);
            }

            // Equal-frequency fit on distinct values gives equal bucket counts.
            #[test]
            fn fit_equalizes_bucket_counts(n in 2usize..7, k in 2usize..5) {
                let vals: Vec<f64> = (1..=n * k).map(|i| i as f64).collect();
                let s = SegmentScheme::fit_segments(&vals, k).unwrap();
                // count values in each positive bucket
                let mut counts = vec![0usize; s.num_heads()];
                for &v in &vals {
                    let mut b = 0;
                    for (i, &t) in s.thresholds().iter().enumerate() {
                        if v > t { b = i; }
                    }
                    counts[b] += 1;
                }
                prop_assert!(counts.iter().all(|&c| c == n), "{counts:?}");
            }
        }
    }
}
