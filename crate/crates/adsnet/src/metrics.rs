//! Ranking evaluation: purchase AUC, normalized Gini for LTV ordering,
//! rejection-rate series, and per-slice reports for long-tail analysis.
//!
//! Both headline metrics are rank statistics, so they are invariant under
//! any strictly increasing transform of the scores. Undefined cases (one
//! class only, all-zero labels, empty slices) are reported as absent, never
//! as zero.

use std::collections::BTreeMap;

/// One scored test example.
#[derive(Clone, Debug)]
pub struct EvalRecord {
    pub pltv: f64,
    pub ltv: f64,
    pub p_purchase: f64,
    pub domain_id: u32,
    pub ad_id: u32,
}

/// Mann-Whitney AUC of `p_purchase` against the purchase indicator
/// (ltv > 0), ties counted half. None when only one class is present.
pub fn auc(records: &[EvalRecord]) -> Option<f64> {
    let n = records.len();
    let n_pos = records.iter().filter(|r| r.ltv > 0.0).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| records[a].p_purchase.partial_cmp(&records[b].p_purchase).unwrap());

    // tie-averaged ascending ranks (1-based)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n
            && records[order[j + 1]].p_purchase == records[order[i]].p_purchase
        {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if records[idx].ltv > 0.0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }

    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Lorenz-sum statistic: sum over positions of the cumulative actual
/// fraction, with actuals inside each prediction-tie block replaced by the
/// block mean (makes the result independent of within-tie order).
fn lorenz_sum(ltv_desc_by_pred: &[(f64, f64)]) -> f64 {
    // input: (pred, actual) sorted by pred descending
    let n = ltv_desc_by_pred.len();
    let total: f64 = ltv_desc_by_pred.iter().map(|&(_, a)| a).sum();

    let mut smoothed = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && ltv_desc_by_pred[j + 1].0 == ltv_desc_by_pred[i].0 {
            j += 1;
        }
        let mean: f64 =
            ltv_desc_by_pred[i..=j].iter().map(|&(_, a)| a).sum::<f64>() / (j - i + 1) as f64;
        for _ in i..=j {
            smoothed.push(mean);
        }
        i = j + 1;
    }

    let mut cum = 0.0;
    let mut s = 0.0;
    for a in smoothed {
        cum += a;
        s += cum / total;
    }
    s
}

fn gini_stat(sorted_desc: &[(f64, f64)]) -> f64 {
    let n = sorted_desc.len() as f64;
    lorenz_sum(sorted_desc) / n - (n + 1.0) / (2.0 * n)
}

/// Gini of actual LTV ordered by descending prediction, normalized by the
/// same statistic under the oracle (descending actual) ordering. 1 means the
/// prediction ranks exactly like the label; in [-1, 1]. None when labels sum
/// to zero.
pub fn normalized_gini(records: &[EvalRecord]) -> Option<f64> {
    if records.is_empty() || records.iter().map(|r| r.ltv).sum::<f64>() <= 0.0 {
        return None;
    }

    let mut by_pred: Vec<(f64, f64)> = records.iter().map(|r| (r.pltv, r.ltv)).collect();
    by_pred.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let mut by_actual: Vec<(f64, f64)> = records.iter().map(|r| (r.ltv, r.ltv)).collect();
    by_actual.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    Some(gini_stat(&by_pred) / gini_stat(&by_actual))
}

/// Sliding-window fraction of rejected steps (accepted == false); one value
/// per full window, oldest first. Empty when fewer than `window` steps.
pub fn rejection_rate(accepted: &[bool], window: usize) -> Vec<f64> {
    assert!(window >= 1, "window must be >= 1");
    if accepted.len() < window {
        return Vec::new();
    }
    let mut rejected_in_window =
        accepted[..window].iter().filter(|&&a| !a).count();
    let mut out = vec![rejected_in_window as f64 / window as f64];
    for i in window..accepted.len() {
        rejected_in_window += usize::from(!accepted[i]);
        rejected_in_window -= usize::from(!accepted[i - window]);
        out.push(rejected_in_window as f64 / window as f64);
    }
    out
}

/// Inclusive interval of per-ad record counts; upper None = unbounded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CountBucket {
    pub lo: usize,
    pub hi: Option<usize>,
}

impl CountBucket {
    pub fn contains(&self, count: usize) -> bool {
        count >= self.lo && self.hi.map_or(true, |h| count <= h)
    }

    pub fn label(&self) -> String {
        match self.hi {
            Some(h) => format!("[{},{}]", self.lo, h),
            None => format!("[{},inf)", self.lo),
        }
    }
}

/// One row of the per-bucket long-tail report.
#[derive(Clone, Debug)]
pub struct SlicedRow {
    pub bucket: CountBucket,
    pub n_ads: usize,
    pub n_records: usize,
    pub gini: Option<f64>,
}

/// Per-ad record counts.
pub fn ad_counts(records: &[EvalRecord]) -> BTreeMap<u32, usize> {
    let mut counts = BTreeMap::new();
    for r in records {
        *counts.entry(r.ad_id).or_insert(0) += 1;
    }
    counts
}

/// Groups ads by how many records they have, then reports Gini over each
/// group's records. Empty groups keep their row with an absent metric.
pub fn sliced_report(records: &[EvalRecord], buckets: &[CountBucket]) -> Vec<SlicedRow> {
    let counts = ad_counts(records);
    buckets
        .iter()
        .map(|&bucket| {
            let ads: Vec<u32> = counts
                .iter()
                .filter(|&(_, &c)| bucket.contains(c))
                .map(|(&ad, _)| ad)
                .collect();
            let slice: Vec<EvalRecord> = records
                .iter()
                .filter(|r| ads.binary_search(&r.ad_id).is_ok())
                .cloned()
                .collect();
            SlicedRow {
                bucket,
                n_ads: ads.len(),
                n_records: slice.len(),
                gini: normalized_gini(&slice),
            }
        })
        .collect()
}

/// Per-domain metric row; `domain_id` None is the overall row.
#[derive(Clone, Debug)]
pub struct DomainRow {
    pub domain_id: Option<u32>,
    pub n: usize,
    pub auc: Option<f64>,
    pub gini: Option<f64>,
}

/// AUC and normalized Gini per domain plus an overall row holding the
/// unweighted mean of the defined per-domain values.
pub fn domain_report(records: &[EvalRecord]) -> Vec<DomainRow> {
    let mut domains: BTreeMap<u32, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        domains.entry(r.domain_id).or_default().push(r.clone());
    }
    let mut rows: Vec<DomainRow> = domains
        .iter()
        .map(|(&d, recs)| DomainRow {
            domain_id: Some(d),
            n: recs.len(),
            auc: auc(recs),
            gini: normalized_gini(recs),
        })
        .collect();

    let mean_of = |vals: Vec<f64>| {
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let overall = DomainRow {
        domain_id: None,
        n: records.len(),
        auc: mean_of(rows.iter().filter_map(|r| r.auc).collect()),
        gini: mean_of(rows.iter().filter_map(|r| r.gini).collect()),
    };
    rows.push(overall);
    rows
}
