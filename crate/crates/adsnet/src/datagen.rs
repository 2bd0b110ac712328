//! Synthetic two-domain benchmark generator with controllable covariate
//! shift and label noise, plus the CSV reader/writer and day-based splits.
//!
//! The label model is zero-inflated and tiered: a purchase happens with a
//! probability driven by low-rank feature interactions, and its size is one
//! of a few standard price points times lognormal jitter, so the amount
//! distribution is long-tailed and multimodal. Ad popularity follows a power
//! law, which produces the long per-ad sample-count tail the sliced reports
//! measure.

use crate::encoding::{Domain, Example, FieldSchema};
use crate::metrics::CountBucket;
use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal, Zipf};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Standard purchase price points; every positive label is one of these
/// times jitter.
pub const TIER_VALUES: [f64; 4] = [6.0, 30.0, 98.0, 198.0];

/// Internal traffic is split into three sub-domains of very different size
/// and spend level (small/low, medium/low, large/high).
const SUB_PROPORTIONS: [f64; 3] = [0.15, 0.27, 0.58];
const SUB_LTV_MULTIPLIERS: [f64; 3] = [0.114, 0.178, 1.617];

const LATENT_DIM: usize = 4;
const SCORE_GAIN: f64 = 1.5;
const TIER_GAIN: f64 = 1.2;
/// Tier thresholds giving base tier shares near [0.5, 0.3, 0.15, 0.05].
const TIER_THRESHOLDS: [f64; 3] = [0.0, 1.83, 3.58];
const JITTER_SIGMA: f64 = 0.25;
const ZIPF_EXPONENT: f64 = 1.2;

/// Days span [0, 90); external data exists only inside the training window.
pub const N_DAYS: u32 = 90;
pub const TRAIN_DAYS: u32 = 70;
pub const VALIDATION_DAYS: u32 = 10;

/// Which field carries the ad identity (when there are at least two fields).
pub const AD_FIELD: usize = 1;

// === spec ===

/// Knobs of the synthetic benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_internal: usize,
    pub n_external: usize,
    pub purchase_rate_internal: f64,
    pub purchase_rate_external: f64,
    pub mean_ltv_internal: f64,
    pub mean_ltv_external: f64,
    /// Feature-distribution divergence: 0 means external examples are drawn
    /// from the internal generator; larger values shift both the external
    /// covariate distribution and the external label relation.
    pub shift: f64,
    /// Fraction of external examples whose labels are drawn independently of
    /// their features.
    pub noise_fraction: f64,
    pub n_fields: usize,
    pub vocab_sizes: Vec<usize>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_internal: 20000,
            n_external: 44000,
            purchase_rate_internal: 0.08,
            purchase_rate_external: 0.15,
            mean_ltv_internal: 2.0,
            mean_ltv_external: 8.0,
            shift: 0.5,
            noise_fraction: 0.3,
            n_fields: 4,
            vocab_sizes: vec![150, 40, 32, 32],
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("purchase_rate_internal", self.purchase_rate_internal),
            ("purchase_rate_external", self.purchase_rate_external),
            ("noise_fraction", self.noise_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                bail!("{name} must be a probability in [0,1], got {p}");
            }
        }
        for (name, v) in [
            ("mean_ltv_internal", self.mean_ltv_internal),
            ("mean_ltv_external", self.mean_ltv_external),
            ("shift", self.shift),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                bail!("{name} must be finite and >= 0, got {v}");
            }
        }
        if self.n_fields < 1 {
            bail!("n_fields must be >= 1");
        }
        if self.vocab_sizes.len() != self.n_fields {
            bail!(
                "vocab_sizes has {} entries but n_fields is {}",
                self.vocab_sizes.len(),
                self.n_fields
            );
        }
        if self.vocab_sizes.iter().any(|&v| v < 1) {
            bail!("every vocabulary size must be >= 1");
        }
        Ok(())
    }

    /// Field layout matching this generator.
    pub fn schema(&self, embedding_dim: usize) -> Result<FieldSchema> {
        FieldSchema::anonymous(&self.vocab_sizes, embedding_dim)
    }

    fn ad_field(&self) -> usize {
        if self.n_fields > AD_FIELD {
            AD_FIELD
        } else {
            0
        }
    }
}

/// Day-based dataset partition; validation and test hold internal examples
/// only.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
}

impl DatasetSplit {
    pub fn total_len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }
}

// === generation ===

fn standardize(scores: &mut [f64]) {
    let n = scores.len() as f64;
    if scores.is_empty() {
        return;
    }
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-12);
    for s in scores.iter_mut() {
        *s = (*s - mean) / std;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Finds x in [lo, hi] with f(x) ~ 0 for non-decreasing f by bisection.
fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn tier_index(a: f64) -> usize {
    TIER_THRESHOLDS.iter().filter(|&&t| t <= a).count()
}

/// Mean tier value when every propensity is lowered by `delta`.
fn mean_tier_value(propensities: &[f64], delta: f64) -> f64 {
    let sum: f64 = propensities.iter().map(|&a| TIER_VALUES[tier_index(a - delta)]).sum();
    sum / propensities.len() as f64
}

struct Drawn {
    feature_ids: Vec<usize>,
    day: u32,
    score: f64,
    sub_domain: usize,
}

/// Per-value first-order effects and pairwise latent factors, plus the
/// perturbed copies that define the external label relation at strength
/// `shift`.
struct Structure {
    latents: Vec<Vec<Vec<f64>>>,
    latent_deltas: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
    bias_deltas: Vec<Vec<f64>>,
}

/// Draws feature ids, a day, and the latent score (first-order value effects
/// plus pairwise factor interactions) for one example.
fn draw_example(
    rng: &mut ChaCha8Rng,
    spec: &SyntheticSpec,
    st: &Structure,
    shift: f64,
    day_limit: u32,
    zipf: &Zipf<f64>,
    sub_domains: bool,
) -> Drawn {
    let ad_field = spec.ad_field();
    let mut feature_ids = Vec::with_capacity(spec.n_fields);
    for f in 0..spec.n_fields {
        let v = if f == ad_field && spec.vocab_sizes[f] > 1 {
            let rank = zipf.sample(rng) as usize - 1;
            // covariate shift: part of the external traffic favors the
            // unpopular tail instead of the popular head
            if shift > 0.0 && rng.gen_bool((shift * 0.25).min(0.9)) {
                spec.vocab_sizes[f] - 1 - rank
            } else {
                rank
            }
        } else {
            rng.gen_range(0..spec.vocab_sizes[f])
        };
        feature_ids.push(v);
    }

    let mut score = 0.0;
    for (f, &v) in feature_ids.iter().enumerate() {
        score += st.biases[f][v] + shift * st.bias_deltas[f][v];
    }
    for a in 0..spec.n_fields {
        for b in (a + 1)..spec.n_fields {
            let (va, vb) = (feature_ids[a], feature_ids[b]);
            for l in 0..LATENT_DIM {
                let ua = st.latents[a][va][l] + shift * st.latent_deltas[a][va][l];
                let ub = st.latents[b][vb][l] + shift * st.latent_deltas[b][vb][l];
                score += ua * ub;
            }
        }
    }

    let day = rng.gen_range(0..day_limit);
    let sub_domain = if sub_domains {
        let u: f64 = rng.gen();
        if u < SUB_PROPORTIONS[0] {
            0
        } else if u < SUB_PROPORTIONS[0] + SUB_PROPORTIONS[1] {
            1
        } else {
            2
        }
    } else {
        0
    };
    Drawn { feature_ids, day, score, sub_domain }
}

/// Assigns purchase flags and tier amounts to a population. `scores` must be
/// standardized. Returns ltv per example, rounded to 6 fractional digits.
fn assign_labels(
    rng: &mut ChaCha8Rng,
    scores: &[f64],
    groups: &[usize],
    group_targets: &[f64],
    purchase_rate: f64,
) -> Vec<f64> {
    let n = scores.len();
    if n == 0 {
        return Vec::new();
    }

    let intercept = bisect(-30.0, 30.0, |b| {
        scores.iter().map(|&s| sigmoid(SCORE_GAIN * s + b)).sum::<f64>() / n as f64
            - purchase_rate
    });

    let mut purchased = vec![false; n];
    let mut propensity = vec![0.0; n];
    for i in 0..n {
        purchased[i] = rng.gen_bool(sigmoid(SCORE_GAIN * scores[i] + intercept).clamp(0.0, 1.0));
        if purchased[i] {
            // ordered tier model: latent propensity with logistic noise
            let u: f64 = rng.gen_range(1e-12..1.0 - 1e-12);
            propensity[i] = TIER_GAIN * scores[i] + (u / (1.0 - u)).ln();
        }
    }

    // per-group shift of the tier thresholds calibrated to the group's
    // target mean purchase amount
    let n_groups = group_targets.len();
    let mut deltas = vec![0.0; n_groups];
    for g in 0..n_groups {
        let props: Vec<f64> = (0..n)
            .filter(|&i| purchased[i] && groups[i] == g)
            .map(|i| propensity[i])
            .collect();
        if props.is_empty() {
            continue;
        }
        let target = group_targets[g].clamp(TIER_VALUES[0], TIER_VALUES[3]);
        // mean tier value decreases in delta, so negate for bisection
        deltas[g] = bisect(-60.0, 60.0, |d| target - mean_tier_value(&props, d));
    }

    let jitter = LogNormal::new(-JITTER_SIGMA * JITTER_SIGMA / 2.0, JITTER_SIGMA).unwrap();
    (0..n)
        .map(|i| {
            if !purchased[i] {
                return 0.0;
            }
            let tier = TIER_VALUES[tier_index(propensity[i] - deltas[groups[i]])];
            let amount = tier * jitter.sample(rng);
            (amount * 1e6).round() / 1e6
        })
        .collect()
}

/// Generates the benchmark. Deterministic per spec (including seed).
pub fn generate(spec: &SyntheticSpec) -> Result<DatasetSplit> {
    spec.validate()?;

    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let structure_seed = master.gen::<u64>();
    let internal_seed = master.gen::<u64>();
    let external_seed = master.gen::<u64>();
    let internal_label_seed = master.gen::<u64>();
    let external_label_seed = master.gen::<u64>();
    let noise_seed = master.gen::<u64>();

    // latent structure per field value, plus the relation perturbation used
    // for external examples
    let mut structure_rng = ChaCha8Rng::seed_from_u64(structure_seed);
    let scale = 1.0 / (LATENT_DIM as f64).sqrt();
    let mut draw_table = |sizes: &[usize]| -> Vec<Vec<Vec<f64>>> {
        sizes
            .iter()
            .map(|&v| {
                (0..v)
                    .map(|_| {
                        (0..LATENT_DIM)
                            .map(|_| {
                                let z: f64 = StandardNormal.sample(&mut structure_rng);
                                z * scale
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    };
    let latents = draw_table(&spec.vocab_sizes);
    let latent_deltas = draw_table(&spec.vocab_sizes);
    let mut draw_biases = |sizes: &[usize]| -> Vec<Vec<f64>> {
        sizes
            .iter()
            .map(|&v| {
                (0..v)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut structure_rng);
                        z * 0.5
                    })
                    .collect()
            })
            .collect()
    };
    let biases = draw_biases(&spec.vocab_sizes);
    let bias_deltas = draw_biases(&spec.vocab_sizes);
    let st = Structure { latents, latent_deltas, biases, bias_deltas };

    let ad_field = spec.ad_field();
    let zipf = Zipf::new(spec.vocab_sizes[ad_field].max(1) as u64, ZIPF_EXPONENT)
        .expect("valid power-law parameters");

    // internal population
    let mut internal_rng = ChaCha8Rng::seed_from_u64(internal_seed);
    let internal: Vec<Drawn> = (0..spec.n_internal)
        .map(|_| draw_example(&mut internal_rng, spec, &st, 0.0, N_DAYS, &zipf, true))
        .collect();

    // external population: shifted covariates and relation, train days only
    let mut external_rng = ChaCha8Rng::seed_from_u64(external_seed);
    let external: Vec<Drawn> = (0..spec.n_external)
        .map(|_| {
            draw_example(&mut external_rng, spec, &st, spec.shift, TRAIN_DAYS, &zipf, false)
        })
        .collect();

    let mut internal_scores: Vec<f64> = internal.iter().map(|d| d.score).collect();
    standardize(&mut internal_scores);
    let mut external_scores: Vec<f64> = external.iter().map(|d| d.score).collect();
    standardize(&mut external_scores);

    // label noise: replace the score driving an external example's label
    // with an independent draw, leaving its features untouched
    let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
    for s in external_scores.iter_mut() {
        let noisy = spec.noise_fraction > 0.0 && noise_rng.gen_bool(spec.noise_fraction);
        if noisy {
            *s = StandardNormal.sample(&mut noise_rng);
        }
    }

    // per-sub-domain amount targets normalized so the overall internal mean
    // hits mean_ltv_internal exactly in expectation
    let weight: f64 = SUB_PROPORTIONS
        .iter()
        .zip(SUB_LTV_MULTIPLIERS.iter())
        .map(|(p, m)| p * m)
        .sum();
    let rate = spec.purchase_rate_internal.max(1e-12);
    let internal_targets: Vec<f64> = SUB_LTV_MULTIPLIERS
        .iter()
        .map(|m| m * spec.mean_ltv_internal / (rate * weight))
        .collect();
    let internal_groups: Vec<usize> = internal.iter().map(|d| d.sub_domain).collect();
    let mut label_rng = ChaCha8Rng::seed_from_u64(internal_label_seed);
    let internal_ltv = assign_labels(
        &mut label_rng,
        &internal_scores,
        &internal_groups,
        &internal_targets,
        spec.purchase_rate_internal,
    );

    let ext_rate = spec.purchase_rate_external.max(1e-12);
    let external_groups = vec![0usize; external.len()];
    let external_targets = vec![spec.mean_ltv_external / ext_rate];
    let mut ext_label_rng = ChaCha8Rng::seed_from_u64(external_label_seed);
    let external_ltv = assign_labels(
        &mut ext_label_rng,
        &external_scores,
        &external_groups,
        &external_targets,
        spec.purchase_rate_external,
    );

    // assemble and split by day
    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (d, ltv) in internal.iter().zip(internal_ltv) {
        let ex = Example {
            feature_ids: d.feature_ids.clone(),
            domain: Domain::Internal,
            domain_id: d.sub_domain as u32 + 1,
            day: d.day,
            ad_id: d.feature_ids[ad_field] as u32,
            ltv,
        };
        if d.day < TRAIN_DAYS {
            split.train.push(ex);
        } else if d.day < TRAIN_DAYS + VALIDATION_DAYS {
            split.validation.push(ex);
        } else {
            split.test.push(ex);
        }
    }
    for (d, ltv) in external.iter().zip(external_ltv) {
        split.train.push(Example {
            feature_ids: d.feature_ids.clone(),
            domain: Domain::External,
            domain_id: 100,
            day: d.day,
            ad_id: d.feature_ids[ad_field] as u32,
            ltv,
        });
    }
    Ok(split)
}

// === CSV ===

fn csv_header(n_fields: usize) -> String {
    let mut h = String::from("domain,domain_id,day,ad_id");
    for f in 0..n_fields {
        write!(h, ",f_{f}").unwrap();
    }
    h.push_str(",ltv");
    h
}

/// Serializes examples in the fixed column order, UTF-8, LF endings, no
/// quoting; ltv printed with at most 6 fractional digits.
pub fn write_csv(path: &Path, examples: &[Example], n_fields: usize) -> Result<()> {
    let mut out = csv_header(n_fields);
    out.push('\n');
    for ex in examples {
        if ex.feature_ids.len() != n_fields {
            bail!(
                "example has {} feature ids, expected {n_fields}",
                ex.feature_ids.len()
            );
        }
        write!(
            out,
            "{},{},{},{}",
            ex.domain.as_str(),
            ex.domain_id,
            ex.day,
            ex.ad_id
        )
        .unwrap();
        for &v in &ex.feature_ids {
            write!(out, ",{v}").unwrap();
        }
        let ltv = (ex.ltv * 1e6).round() / 1e6;
        writeln!(out, ",{ltv}").unwrap();
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Parses the CSV format back into examples, validating the header, id
/// ranges against the schema, and ltv >= 0. Errors carry the 1-based line
/// number and the offending column.
pub fn load_csv(path: &Path, schema: &FieldSchema) -> Result<Vec<Example>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let n_fields = schema.num_fields();
    let expect_header = csv_header(n_fields);
    let mut lines = text.lines().enumerate();

    let (_, header) = lines
        .next()
        .with_context(|| format!("{}: empty file, expected a header", path.display()))?;
    if header != expect_header {
        bail!(
            "{}: line 1: header mismatch: expected `{expect_header}`, got `{header}`",
            path.display()
        );
    }

    let mut examples = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        let expected_cols = 5 + n_fields;
        if cols.len() != expected_cols {
            bail!(
                "{}: line {line_no}: expected {expected_cols} columns, got {}",
                path.display(),
                cols.len()
            );
        }
        let fail = |col: &str, what: &str| {
            anyhow::anyhow!("{}: line {line_no}: column {col}: {what}", path.display())
        };
        let domain = Domain::parse(cols[0])
            .ok_or_else(|| fail("domain", "must be `internal` or `external`"))?;
        let domain_id: u32 =
            cols[1].parse().map_err(|_| fail("domain_id", "not a non-negative integer"))?;
        let day: u32 = cols[2].parse().map_err(|_| fail("day", "not a non-negative integer"))?;
        let ad_id: u32 =
            cols[3].parse().map_err(|_| fail("ad_id", "not a non-negative integer"))?;
        let mut feature_ids = Vec::with_capacity(n_fields);
        for f in 0..n_fields {
            let name = format!("f_{f}");
            let v: usize = cols[4 + f]
                .parse()
                .map_err(|_| fail(&name, "not a non-negative integer"))?;
            let vocab = schema.vocab_size(f);
            if v >= vocab {
                return Err(fail(&name, &format!("id {v} outside vocabulary of size {vocab}")));
            }
            feature_ids.push(v);
        }
        let ltv: f64 = cols[4 + n_fields]
            .parse()
            .map_err(|_| fail("ltv", "not a decimal number"))?;
        if !ltv.is_finite() || ltv < 0.0 {
            return Err(fail("ltv", &format!("must be finite and >= 0, got {ltv}")));
        }
        examples.push(Example { feature_ids, domain, domain_id, day, ad_id, ltv });
    }
    Ok(examples)
}

// === long-tail profile ===

/// Per-ad record counts plus how many ads and records fall into each
/// count bucket.
#[derive(Clone, Debug)]
pub struct LongTailProfile {
    pub counts: BTreeMap<u32, usize>,
    pub buckets: Vec<(CountBucket, usize, usize)>,
}

/// Bucket edges used by the long-tail reports.
pub fn default_buckets() -> Vec<CountBucket> {
    vec![
        CountBucket { lo: 0, hi: Some(15) },
        CountBucket { lo: 16, hi: Some(50) },
        CountBucket { lo: 51, hi: Some(200) },
        CountBucket { lo: 201, hi: None },
    ]
}

pub fn long_tail_profile(examples: &[Example], buckets: &[CountBucket]) -> LongTailProfile {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for ex in examples {
        *counts.entry(ex.ad_id).or_insert(0) += 1;
    }
    let buckets = buckets
        .iter()
        .map(|&b| {
            let (mut n_ads, mut n_records) = (0, 0);
            for (_, &c) in counts.iter() {
                if b.contains(c) {
                    n_ads += 1;
                    n_records += c;
                }
            }
            (b, n_ads, n_records)
        })
        .collect();
    LongTailProfile { counts, buckets }
}
