use std::path::{Path, PathBuf};

use log::{info, warn};
use saap_core::attention::DenseWindow;
use saap_core::harness;
use saap_core::harness::{
    build_store, generate_head, mse_csv, probe_csv, run_assignment_comparison, run_diagnostics, run_mse_selectivity,
    run_probe_sweep, train_partition, Csv, DiagnosticsConfig, ExperimentConfig, KeyFrame, KmeansConfig,
    Method, QTrainConfig, SuiteConfig,
};
use saap_core::partition::relative_size_deviation;
use saap_core::synth::HeadSpec;
use saap_core::Partition;

use crate::layout;
use crate::params::{Params, EXPERIMENT_KEYS, HEAD_KEYS};
use crate::CliError;

pub struct Ctx {
    pub data_dir: PathBuf,
    pub out: Option<PathBuf>,
}

fn emit(csv: &Csv, out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(path) => {
            csv.write(path)?;
            info!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn dense(p: &Params, default: DenseWindow) -> Result<DenseWindow, CliError> {
    Ok(DenseWindow::new(p.parse_or("sink", default.sink_count)?, p.parse_or("recent", default.recent_count)?))
}

fn io(e: std::io::Error) -> CliError {
    CliError::Core(e.into())
}

pub fn gen_data(ctx: &Ctx, p: &Params) -> Result<(), CliError> {
    let mut base = HeadSpec::default();
    for (k, v) in p.subset(HEAD_KEYS) {
        base.set(k, v)?;
    }
    let d = SuiteConfig::default();
    let suite = SuiteConfig {
        base,
        n_heads: p.parse_or("heads", d.n_heads)?,
        train_prompts: p.parse_or("train_prompts", d.train_prompts)?,
        eval_prompts: p.parse_or("eval_prompts", d.eval_prompts)?,
        n_keys: p.parse_or("n_keys", d.n_keys)?,
        n_queries: p.parse_or("n_queries", d.n_queries)?,
        seed: p.parse_or("seed", d.seed)?,
    };
    suite.base.validate()?;
    if suite.eval_prompts == 0 {
        return Err(CliError::Config("eval_prompts must be positive".into()));
    }
    let root = &ctx.data_dir;
    if root.join("suite.txt").exists() && !p.flag("force")? {
        return Err(CliError::Config(format!("{} already holds a suite; pass --force true to overwrite", root.display())));
    }
    layout::write_suite(root, &suite)?;
    for h in 0..suite.n_heads {
        let data = generate_head(&suite.head_spec(h), &suite)?;
        layout::write_head(root, h, &data)?;
        info!("head {h}: {} train and {} eval prompts of {} keys", data.train.len(), data.eval.len(), suite.n_keys);
    }
    Ok(())
}

fn kmeans_config(p: &Params) -> Result<KmeansConfig, CliError> {
    let d = KmeansConfig::default();
    Ok(KmeansConfig {
        c: p.parse_or("c", d.c)?,
        iters: p.parse_or("iters", d.iters)?,
        max_points_per_centroid: p.parse_or("max_points_per_centroid", d.max_points_per_centroid)?,
        sink_count: p.parse_or("sink", d.sink_count)?,
        seed: p.parse_or("seed", d.seed)?,
    })
}

pub fn train_kmeans(ctx: &Ctx, p: &Params) -> Result<(), CliError> {
    let km = kmeans_config(p)?;
    let roped = p.flag("roped")?;
    for h in 0..layout::head_count(&ctx.data_dir)? {
        let data = layout::load_head_data(&ctx.data_dir, h)?;
        if data.train.is_empty() {
            return Err(CliError::Data(format!("head {h} has no training prompts")));
        }
        let dir = layout::head_dir(&ctx.data_dir, h);
        let mut frames = vec![(KeyFrame::Deroped, "partition")];
        if roped {
            frames.push((KeyFrame::Roped, "partition_roped"));
        }
        for (frame, name) in frames {
            let (partition, report) = train_partition(&data.train, &km, frame)?;
            partition.save(dir.join(name))?;
            info!(
                "head {h} {name}: C={} objective {:.4} -> {:.4}, {} repairs, {} empty",
                km.c,
                report.objective.first().copied().unwrap_or(0.0),
                report.objective.last().copied().unwrap_or(0.0),
                report.repairs,
                report.final_empty
            );
        }
    }
    Ok(())
}

pub fn train_qmodel(ctx: &Ctx, p: &Params) -> Result<(), CliError> {
    let d = QTrainConfig::default();
    let cfg = QTrainConfig {
        hidden: p.parse_or("hidden", d.hidden)?,
        lr: p.parse_or("lr", d.lr)?,
        epochs: p.parse_or("epochs", d.epochs)?,
        batch_size: p.parse_or("batch_size", d.batch_size)?,
        long_range_threshold: p.parse_or("long_range_threshold", d.long_range_threshold)?,
        dense: dense(p, d.dense)?,
        seed: p.parse_or("seed", d.seed)?,
    };
    for h in 0..layout::head_count(&ctx.data_dir)? {
        let dir = layout::head_dir(&ctx.data_dir, h);
        let data = layout::load_head_data(&ctx.data_dir, h)?;
        let pdir = dir.join("partition");
        if !pdir.is_dir() {
            return Err(CliError::Data(format!("{} is missing; run train-kmeans first", pdir.display())));
        }
        let partition = Partition::load(&pdir)?;
        let (model, report) = harness::train_qmodel(&data.train, &partition, &cfg)?;
        model.save(dir.join("qmodel"))?;
        info!(
            "head {h}: kept {}/{} queries, loss {:.4} -> {:.4}",
            report.retained_queries,
            report.total_queries,
            report.epoch_losses.first().copied().unwrap_or(f64::NAN),
            report.epoch_losses.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

pub fn build_index(ctx: &Ctx, p: &Params) -> Result<(), CliError> {
    let sink: usize = p.parse_or("sink", 1)?;
    let roped = p.flag("roped")?;
    let (frame, part_name, index_name) =
        if roped { (KeyFrame::Roped, "partition_roped", "index_roped") } else { (KeyFrame::Deroped, "partition", "index") };
    for h in 0..layout::head_count(&ctx.data_dir)? {
        let dir = layout::head_dir(&ctx.data_dir, h);
        let pdir = dir.join(part_name);
        if !pdir.is_dir() {
            return Err(CliError::Data(format!("{} is missing; run train-kmeans first", pdir.display())));
        }
        let partition = Partition::load(&pdir)?;
        let data = layout::load_head_data(&ctx.data_dir, h)?;
        for (i, prompt) in data.eval.iter().enumerate() {
            let store = build_store(prompt, &partition, frame, sink)?;
            store.index.save(dir.join(index_name).join(format!("prompt_{i:03}")))?;
            let sizes: Vec<usize> = (0..store.n_buckets()).map(|b| store.index.bucket_len(b)).collect();
            info!(
                "head {h} prompt {i}: {} keys in {} buckets, largest {}, relative deviation {:.3}",
                store.index.idx.len(),
                sizes.len(),
                sizes.iter().max().copied().unwrap_or(0),
                relative_size_deviation(&sizes)
            );
        }
    }
    Ok(())
}

/// Experiment settings for `method`; default probe counts above `c` are
/// dropped, explicit ones are kept and fail validation.
fn experiment(p: &Params, method: Method, c: usize) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::new(method);
    cfg.ells.retain(|&e| e <= c);
    for (k, v) in p.subset(EXPERIMENT_KEYS) {
        if k != "method" {
            cfg.set(k, v)?;
        }
    }
    Ok(cfg)
}

fn bucket_count(heads: &[saap_core::harness::HeadArtifacts]) -> usize {
    heads.iter().map(|h| h.partition.n_buckets()).min().unwrap_or(0)
}

pub fn eval_mse(ctx: &Ctx, p: &Params) -> Result<(), CliError> {
    let method: Method = p.get("method").ok_or_else(|| CliError::Config("eval-mse needs a method".into()))?.parse()?;
    let heads = layout::load_artifacts(&ctx.data_dir)?;
    let cfg = experiment(p, method, bucket_count(&heads))?;
    let rows = run_mse_selectivity(&cfg, &heads)?;
    emit(&mse_csv(&rows), ctx.out.as_deref())
}

pub fn compare_baselines(ctx: &Ctx, p: &Params) -> Result<(), CliError> {
    let heads = layout::load_artifacts(&ctx.data_dir)?;
    let explicit = p.get("methods").is_some();
    let methods: Vec<Method> = match p.get("methods") {
        Some(_) => p.list_or("methods", Vec::new())?,
        None => Method::ALL.to_vec(),
    };
    let mut rows = Vec::new();
    for m in methods {
        let missing = match m {
            Method::KmeansRoped => heads.iter().any(|h| h.partition_roped.is_none()),
            Method::Saap => heads.iter().any(|h| h.qmodel.is_none()),
            _ => false,
        };
        if missing && !explicit {
            warn!("skipping {m}: its trained artifact is missing");
            continue;
        }
        rows.extend(run_mse_selectivity(&experiment(p, m, bucket_count(&heads))?, &heads)?);
        info!("{m} done");
    }
    emit(&mse_csv(&rows), ctx.out.as_deref())
}

pub fn sweep_probes(ctx: &Ctx, p: &Params) -> Result<(), CliError> {
    let km = kmeans_config(p)?;
    let cs: Vec<usize> = p.list_or("cs", vec![km.c])?;
    let ells: Vec<usize> = p.list_or("ells", vec![0, 1, 2, 4, 8, 16, 32, 64, 128])?;
    let data = layout::load_all_data(&ctx.data_dir)?;
    let rows = run_probe_sweep(
        &data,
        &cs,
        &ells,
        &km,
        dense(p, DenseWindow::default())?,
        p.parse_or("group_size", 1)?,
        p.parse_or("max_queries", 128)?,
    )?;
    emit(&probe_csv(&rows), ctx.out.as_deref())
}

pub fn compare_assigners(ctx: &Ctx, p: &Params) -> Result<(), CliError> {
    let heads = layout::load_artifacts(&ctx.data_dir)?;
    if let Some(h) = heads.iter().position(|h| h.qmodel.is_none()) {
        return Err(CliError::Data(format!("head {h} has no query model; run train-qmodel first")));
    }
    if let Some(h) = heads.iter().position(|h| h.partition_roped.is_none()) {
        return Err(CliError::Data(format!("head {h} has no roped partition; run train-kmeans --roped true")));
    }
    let ells: Vec<usize> = p.list_or("ells", vec![1, 2, 4, 8, 16, 32, 64])?;
    let csv = run_assignment_comparison(&heads, &ells, dense(p, DenseWindow::default())?, p.parse_or("max_queries", 128)?)?;
    emit(&csv, ctx.out.as_deref())
}

pub fn diagnostics(ctx: &Ctx, p: &Params) -> Result<(), CliError> {
    let d = DiagnosticsConfig::default();
    let cfg = DiagnosticsConfig {
        span_k: p.parse_or("span_k", d.span_k)?,
        dense: dense(p, d.dense)?,
        sample_size: p.parse_or("sample_size", d.sample_size)?,
        repetitions: p.parse_or("repetitions", d.repetitions)?,
        shifts: p.list_or("shifts", d.shifts.clone())?,
        n_ood_queries: p.parse_or("n_ood_queries", d.n_ood_queries)?,
        max_queries: p.parse_or("max_queries", d.max_queries)?,
        seed: p.parse_or("seed", d.seed)?,
    };
    let heads = layout::load_artifacts(&ctx.data_dir)?;
    let diag = run_diagnostics(&heads, &cfg)?;
    match &ctx.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io)?;
            emit(&diag.span, Some(&dir.join("attention_span.csv")))?;
            emit(&diag.balance, Some(&dir.join("bucket_balance.csv")))?;
            emit(&diag.overlap, Some(&dir.join("assignment_overlap.csv")))
        }
        None => {
            print!("{}{}{}", diag.span, diag.balance, diag.overlap);
            Ok(())
        }
    }
}
