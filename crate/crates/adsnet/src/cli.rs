//! Command implementations behind the binary: dataset generation, training,
//! evaluation, and the multi-variant benchmark. Each command is an ordinary
//! function over parsed inputs so the whole pipeline is testable in-process.

use crate::checkpoint::{load_model, save_model};
use crate::config::Config;
use crate::datagen::{self, generate, DatasetSplit};
use crate::diffcore::{Graph, ParamArena};
use crate::encoding::{Domain, Example, FieldSchema};
use crate::metrics::{domain_report, sliced_report, EvalRecord};
use crate::trainer::{train, TrainedModel, Variant};
use anyhow::{Context, Result};
use crate::backbone::{Network, SegmentScheme};
use rayon::prelude::*;
use std::fs;
use std::path::Path;

/// Inference batch size. Forward passes are row-wise, so any partition gives
/// identical values; fixing one keeps output bytes independent of callers.
const EVAL_BATCH: usize = 512;

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating directory {}", dir.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Generates the synthetic dataset and writes `train.csv`, `validation.csv`,
/// and `test.csv` under `out_dir`.
pub fn cmd_datagen(cfg: &Config, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    let split = generate(&cfg.data)?;
    ensure_dir(out_dir)?;
    let n_fields = cfg.data.vocab_sizes.len();
    for (name, examples) in [
        ("train.csv", &split.train),
        ("validation.csv", &split.validation),
        ("test.csv", &split.test),
    ] {
        datagen::write_csv(&out_dir.join(name), examples, n_fields)?;
    }
    log::info!(
        "wrote {} train / {} validation / {} test examples to {}",
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        out_dir.display()
    );
    Ok(())
}

fn load_split(data_dir: &Path, schema: &FieldSchema) -> Result<DatasetSplit> {
    Ok(DatasetSplit {
        train: datagen::load_csv(&data_dir.join("train.csv"), schema)?,
        validation: datagen::load_csv(&data_dir.join("validation.csv"), schema)?,
        test: datagen::load_csv(&data_dir.join("test.csv"), schema)?,
    })
}

fn obtain_split(cfg: &Config, data_dir: Option<&Path>, schema: &FieldSchema) -> Result<DatasetSplit> {
    match data_dir {
        Some(dir) => load_split(dir, schema),
        None => generate(&cfg.data),
    }
}

fn partition_train(train: &[Example]) -> (Vec<Example>, Vec<Example>) {
    let internal = train.iter().filter(|e| e.domain == Domain::Internal).cloned().collect();
    let external = train.iter().filter(|e| e.domain == Domain::External).cloned().collect();
    (internal, external)
}

/// Trains one variant and writes `metrics.csv` (the per-step log) and
/// `model.ckpt` under `out_dir`. `seed` and `variant` override the first
/// entry of the config's `run.seeds` / `run.variants` lists.
pub fn cmd_train(
    cfg: &Config,
    data_dir: Option<&Path>,
    out_dir: &Path,
    seed: Option<u64>,
    variant: Option<Variant>,
) -> Result<()> {
    cfg.validate()?;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let variant = variant.unwrap_or(cfg.variants[0]);
    let schema = cfg.data.schema(cfg.train.embedding_dim)?;
    let split = obtain_split(cfg, data_dir, &schema)?;
    let (internal, external) = partition_train(&split.train);
    log::info!(
        "training variant {} seed {seed}: {} internal / {} external examples",
        variant.as_str(),
        internal.len(),
        external.len()
    );
    let model = train(&cfg.train, &schema, variant, &internal, &external, seed)?;
    ensure_dir(out_dir)?;
    write_file(&out_dir.join("metrics.csv"), &model.log)?;
    save_model(&out_dir.join("model.ckpt"), &model, &schema)?;
    let accepted = model.reports.iter().filter(|r| r.accepted).count();
    log::info!(
        "finished {} steps ({} accepted external micro-batches); artifacts in {}",
        model.reports.len(),
        accepted,
        out_dir.display()
    );
    Ok(())
}

/// Runs the network over `examples` in fixed-size batches and pairs each
/// prediction with its actual outcome.
pub fn predict_records(
    arena: &ParamArena,
    network: &Network,
    scheme: &SegmentScheme,
    examples: &[Example],
) -> Result<Vec<EvalRecord>> {
    let mut records = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_BATCH) {
        let batch: Vec<&Example> = chunk.iter().collect();
        let mut g = Graph::new();
        let fwd = network.forward(&mut g, arena, &batch)?;
        let p_purchase = g.value(fwd.p_purchase).data().to_vec();
        let p_ordinal = g.value(fwd.p_ordinal);
        let n_ord = p_ordinal.cols();
        for (i, ex) in chunk.iter().enumerate() {
            let row = &p_ordinal.data()[i * n_ord..(i + 1) * n_ord];
            records.push(EvalRecord {
                pltv: scheme.predict_ltv(p_purchase[i], row),
                ltv: ex.ltv,
                p_purchase: p_purchase[i],
                domain_id: ex.domain_id,
                ad_id: ex.ad_id,
            });
        }
    }
    Ok(records)
}

fn distinct_ads(records: &[EvalRecord]) -> usize {
    records.iter().map(|r| r.ad_id).collect::<std::collections::BTreeSet<_>>().len()
}

/// Renders the evaluation report: per-domain rows with an overall mean row,
/// then per-ad-popularity-bucket rows.
pub fn render_report(records: &[EvalRecord]) -> String {
    let mut out = String::from("row_type,label,n_ads,n_records,auc,gini\n");
    for row in domain_report(records) {
        let (label, slice): (String, Vec<EvalRecord>) = match row.domain_id {
            Some(d) => (
                d.to_string(),
                records.iter().filter(|r| r.domain_id == d).cloned().collect(),
            ),
            None => ("overall".to_string(), records.to_vec()),
        };
        out.push_str(&format!(
            "domain,{label},{},{},{},{}\n",
            distinct_ads(&slice),
            row.n,
            fmt_opt(row.auc),
            fmt_opt(row.gini)
        ));
    }
    for row in sliced_report(records, &datagen::default_buckets()) {
        out.push_str(&format!(
            "ad_bucket,\"{}\",{},{},,{}\n",
            row.bucket.label(),
            row.n_ads,
            row.n_records,
            fmt_opt(row.gini)
        ));
    }
    out
}

/// Loads a checkpoint, scores `test.csv` from `data_dir`, and writes
/// `report.csv` under `out_dir`.
pub fn cmd_eval(checkpoint: &Path, data_dir: &Path, out_dir: &Path) -> Result<()> {
    let loaded = load_model(checkpoint)?;
    let test = datagen::load_csv(&data_dir.join("test.csv"), &loaded.schema)?;
    let records = predict_records(&loaded.arena, &loaded.network, &loaded.scheme, &test)?;
    ensure_dir(out_dir)?;
    write_file(&out_dir.join("report.csv"), &render_report(&records))?;
    log::info!("scored {} records; report in {}", records.len(), out_dir.display());
    Ok(())
}

fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { (v[mid - 1] + v[mid]) / 2.0 })
}

struct BenchRun {
    variant: Variant,
    seed: u64,
    auc: Option<f64>,
    gini: Option<f64>,
    log: String,
}

fn overall_metrics(records: &[EvalRecord]) -> (Option<f64>, Option<f64>) {
    let rows = domain_report(records);
    let overall = rows.last().expect("report always has an overall row");
    debug_assert!(overall.domain_id.is_none());
    (overall.auc, overall.gini)
}

/// Trains every (variant, seed) pair in the config on one shared dataset,
/// evaluates each on the test split, and writes `bench_report.csv` plus one
/// `runs/{variant}_{seed}/metrics.csv` step log per run. The report holds
/// per-run rows, per-variant medians, and, when both variants are present,
/// the negative-transfer delta (joint_mix_baseline minus
/// backbone_internal_only medians).
pub fn cmd_bench(cfg: &Config, data_dir: Option<&Path>, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    let schema = cfg.data.schema(cfg.train.embedding_dim)?;
    let split = obtain_split(cfg, data_dir, &schema)?;
    let (internal, external) = partition_train(&split.train);
    let plan: Vec<(Variant, u64)> = cfg
        .variants
        .iter()
        .flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    log::info!(
        "benchmarking {} runs ({} variants x {} seeds)",
        plan.len(),
        cfg.variants.len(),
        cfg.seeds.len()
    );

    // each run is internally single-threaded and deterministic; collect()
    // preserves plan order, so parallelism cannot reorder the report
    let runs: Vec<BenchRun> = plan
        .par_iter()
        .map(|&(variant, seed)| -> Result<BenchRun> {
            let model = train(&cfg.train, &schema, variant, &internal, &external, seed)?;
            let records =
                predict_records(&model.arena, model.eval_network(), &model.scheme, &split.test)?;
            let (auc, gini) = overall_metrics(&records);
            Ok(BenchRun { variant, seed, auc, gini, log: model.log })
        })
        .collect::<Result<_>>()?;

    ensure_dir(out_dir)?;
    for run in &runs {
        let run_dir = out_dir.join("runs").join(format!("{}_{}", run.variant.as_str(), run.seed));
        ensure_dir(&run_dir)?;
        write_file(&run_dir.join("metrics.csv"), &run.log)?;
    }

    let mut out = String::from("row_type,variant,seed,auc,gini\n");
    for run in &runs {
        out.push_str(&format!(
            "run,{},{},{},{}\n",
            run.variant.as_str(),
            run.seed,
            fmt_opt(run.auc),
            fmt_opt(run.gini)
        ));
    }
    let variant_median = |variant: Variant, pick: fn(&BenchRun) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> =
            runs.iter().filter(|r| r.variant == variant).filter_map(pick).collect();
        median(&vals)
    };
    for &variant in cfg.variants.iter() {
        out.push_str(&format!(
            "median,{},,{},{}\n",
            variant.as_str(),
            fmt_opt(variant_median(variant, |r| r.auc)),
            fmt_opt(variant_median(variant, |r| r.gini))
        ));
    }
    let has = |v: Variant| cfg.variants.contains(&v);
    if has(Variant::JointMixBaseline) && has(Variant::BackboneInternalOnly) {
        let delta = |pick: fn(&BenchRun) -> Option<f64>| -> Option<f64> {
            match (
                variant_median(Variant::JointMixBaseline, pick),
                variant_median(Variant::BackboneInternalOnly, pick),
            ) {
                (Some(a), Some(b)) => Some(a - b),
                _ => None,
            }
        };
        out.push_str(&format!(
            "delta,joint_mix_minus_internal_only,,{},{}\n",
            fmt_opt(delta(|r| r.auc)),
            fmt_opt(delta(|r| r.gini))
        ));
    }
    write_file(&out_dir.join("bench_report.csv"), &out)?;
    log::info!("benchmark report in {}", out_dir.display());
    Ok(())
}

/// Convenience used by tests: train in-process and return the model plus its
/// test-split records.
pub fn train_and_score(
    cfg: &Config,
    variant: Variant,
    seed: u64,
) -> Result<(TrainedModel, Vec<EvalRecord>)> {
    cfg.validate()?;
    let schema = cfg.data.schema(cfg.train.embedding_dim)?;
    let split = generate(&cfg.data)?;
    let (internal, external) = partition_train(&split.train);
    let model = train(&cfg.train, &schema, variant, &internal, &external, seed)?;
    let records =
        predict_records(&model.arena, model.eval_network(), &model.scheme, &split.test)?;
    Ok((model, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::SyntheticSpec;
    use crate::trainer::TrainConfig;
    use tempfile::tempdir;

    fn small_cfg() -> Config {
        Config {
            data: SyntheticSpec {
                n_internal: 700,
                n_external: 400,
                vocab_sizes: vec![40, 12, 8, 8],
                ..SyntheticSpec::default()
            },
            train: TrainConfig {
                warmup_steps: 4,
                total_steps: 8,
                sync_frequency: 3,
                batch_size: 16,
                external_microbatch: 8,
                embedding_dim: 4,
                k_segments: 3,
                n_experts: 2,
                expert_hidden: vec![8],
                adapter_hidden: 6,
                ..TrainConfig::default()
            },
            variants: vec![Variant::Adsnet],
            seeds: vec![11],
        }
    }

    // === datagen command ===

    #[test]
    fn datagen_writes_three_files_deterministically() {
        let cfg = small_cfg();
        let dir = tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        cmd_datagen(&cfg, &a).unwrap();
        cmd_datagen(&cfg, &b).unwrap();
        for name in ["train.csv", "validation.csv", "test.csv"] {
            let fa = fs::read(a.join(name)).unwrap();
            let fb = fs::read(b.join(name)).unwrap();
            assert!(!fa.is_empty());
            assert_eq!(fa, fb, "{name} differs between identical runs");
        }
    }

    // === train + eval round trip ===

    #[test]
    fn train_then_eval_produces_stable_report() {
        let cfg = small_cfg();
        let dir = tempdir().unwrap();
        let data = dir.path().join("data");
        cmd_datagen(&cfg, &data).unwrap();
        let run = dir.path().join("run");
        cmd_train(&cfg, Some(&data), &run, None, None).unwrap();
        assert!(run.join("metrics.csv").exists());
        assert!(run.join("model.ckpt").exists());

        let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
        cmd_eval(&run.join("model.ckpt"), &data, &r1).unwrap();
        cmd_eval(&run.join("model.ckpt"), &data, &r2).unwrap();
        let b1 = fs::read(r1.join("report.csv")).unwrap();
        let b2 = fs::read(r2.join("report.csv")).unwrap();
        assert_eq!(b1, b2, "re-evaluating the same checkpoint must be byte-identical");
        let text = String::from_utf8(b1).unwrap();
        assert!(text.starts_with("row_type,label,n_ads,n_records,auc,gini\n"));
        assert!(text.contains("domain,overall,"));
        assert!(text.contains("ad_bucket,\"[0,15]\","));
    }

    #[test]
    fn train_without_data_dir_generates_from_config() {
        let cfg = small_cfg();
        let dir = tempdir().unwrap();
        let run = dir.path().join("run");
        cmd_train(&cfg, None, &run, Some(3), Some(Variant::BackboneInternalOnly)).unwrap();
        let log = fs::read_to_string(run.join("metrics.csv")).unwrap();
        // header plus one line per step
        assert_eq!(log.lines().count(), 1 + cfg.train.total_steps as usize);
    }

    #[test]
    fn eval_missing_checkpoint_fails_with_path() {
        let dir = tempdir().unwrap();
        let missing = dir.path().join("nope.ckpt");
        let err = cmd_eval(&missing, dir.path(), &dir.path().join("out"))
            .err()
            .unwrap()
            .to_string();
        assert!(err.contains("nope.ckpt"), "{err}");
    }

    // === prediction batching ===

    #[test]
    fn chunked_prediction_matches_single_batch() {
        let cfg = small_cfg();
        let (model, records) = train_and_score(&cfg, Variant::Adsnet, 11).unwrap();
        let split = generate(&cfg.data).unwrap();
        // one whole-split forward pass as the reference
        let batch: Vec<&Example> = split.test.iter().collect();
        let mut g = Graph::new();
        let fwd = model.eval_network().forward(&mut g, &model.arena, &batch).unwrap();
        let p = g.value(fwd.p_purchase).data().to_vec();
        assert_eq!(records.len(), split.test.len());
        for (r, (ex, pi)) in records.iter().zip(split.test.iter().zip(p.iter())) {
            assert_eq!(r.p_purchase, *pi);
            assert_eq!(r.ltv, ex.ltv);
        }
    }

    // === bench command ===

    #[test]
    fn bench_table_has_runs_medians_and_delta() {
        let mut cfg = small_cfg();
        cfg.variants = vec![Variant::BackboneInternalOnly, Variant::JointMixBaseline];
        cfg.seeds = vec![1, 2, 3];
        let dir = tempdir().unwrap();
        let out = dir.path().join("bench");
        cmd_bench(&cfg, None, &out).unwrap();
        let text = fs::read_to_string(out.join("bench_report.csv")).unwrap();
        let runs = text.lines().filter(|l| l.starts_with("run,")).count();
        let medians = text.lines().filter(|l| l.starts_with("median,")).count();
        let deltas: Vec<&str> = text.lines().filter(|l| l.starts_with("delta,")).collect();
        assert_eq!(runs, 6);
        assert_eq!(medians, 2);
        assert_eq!(deltas.len(), 1);
        assert!(deltas[0].starts_with("delta,joint_mix_minus_internal_only,"));
        for (v, s) in [("backbone_internal_only", 1), ("joint_mix_baseline", 3)] {
            assert!(out.join("runs").join(format!("{v}_{s}")).join("metrics.csv").exists());
        }
    }

    #[test]
    fn bench_is_deterministic() {
        let mut cfg = small_cfg();
        cfg.variants = vec![Variant::Adsnet, Variant::BackboneInternalOnly];
        cfg.seeds = vec![5, 6];
        let dir = tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        cmd_bench(&cfg, None, &a).unwrap();
        cmd_bench(&cfg, None, &b).unwrap();
        assert_eq!(
            fs::read(a.join("bench_report.csv")).unwrap(),
            fs::read(b.join("bench_report.csv")).unwrap()
        );
        let run = Path::new("runs").join("adsnet_5").join("metrics.csv");
        assert_eq!(fs::read(a.join(&run)).unwrap(), fs::read(b.join(&run)).unwrap());
    }

    #[test]
    fn bench_without_both_baselines_omits_delta() {
        let mut cfg = small_cfg();
        cfg.variants = vec![Variant::Adsnet];
        cfg.seeds = vec![1];
        let dir = tempdir().unwrap();
        let out = dir.path().join("bench");
        cmd_bench(&cfg, None, &out).unwrap();
        let text = fs::read_to_string(out.join("bench_report.csv")).unwrap();
        assert!(!text.contains("delta,"));
    }

    // === median helper ===

    #[test]
    fn median_handles_odd_even_empty() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
