use std::fs;
use std::io::{BufReader, Write};
use std::path::Path;
use std::time::Instant;

use ctrec::checkpoint::read_header;
use ctrec::config::{parse_kv, Precision, VARIANTS};
use ctrec::ctdg::{parse_event_csv, CsvFormat};
use ctrec::eval::{evaluate, write_ranks_csv, EventRank, MetricsReport, OracleScorer, RandomScorer};
use ctrec::model::{train_with, ModelParams};
use ctrec::pipeline::{evaluate_partition, run, Partition, Prepared};
use ctrec::synth::{generate, SynthKind, SynthSpec};
use ctrec::{Checkpoint, EvalConfig, Scalar, TrainConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::bundle::{create, io_err, open, read_bundle, write_bundle, write_string, DatasetInfo, RunManifest};
use crate::{CliError, Common, EvalFlags, ModelFlags};

const CHECKPOINT: &str = "checkpoint.ckpt";
const EPOCH_STATS: &str = "epoch_stats.csv";
const METRICS: &str = "metrics.json";
const RANKS: &str = "ranks.csv";
const ABLATION: &str = "ablation.csv";

/// Everything a run needs after merging defaults, the config file and flags.
struct Resolved {
    train: TrainConfig,
    eval: EvalConfig,
    partition: Partition,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn set_eval_key(eval: &mut EvalConfig, partition: &mut Partition, key: &str, value: &str) -> Result<bool, CliError> {
    match key {
        "negatives" => eval.negatives = value.parse()?,
        "k" => {
            eval.k_list = value
                .split(',')
                .map(|k| k.trim().parse::<usize>().map_err(|_| usage(format!("invalid k '{k}'"))))
                .collect::<Result<_, _>>()?;
        }
        "partition" => *partition = value.parse()?,
        "warm_replay" => {
            eval.warm_replay = value
                .trim()
                .parse()
                .map_err(|_| usage(format!("warm_replay must be true or false, got '{value}'")))?
        }
        "timings" => {
            eval.timings = value
                .trim()
                .parse()
                .map_err(|_| usage(format!("timings must be true or false, got '{value}'")))?
        }
        _ => return Ok(false),
    }
    Ok(true)
}

/// Defaults, then the config file, then flags.
fn resolve(common: &Common, model: &ModelFlags, eval_flags: &EvalFlags) -> Result<Resolved, CliError> {
    let mut train = TrainConfig::default();
    let mut eval = EvalConfig::default();
    let mut partition = Partition::Test;
    let mut variant: Option<String> = None;
    let mut eval_seed: Option<u64> = None;
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        for (k, v) in parse_kv(&text).map_err(|e| usage(format!("{}: {e}", path.display())))? {
            if k == "variant" {
                variant = Some(v);
            } else if k == "eval_seed" {
                eval_seed = Some(v.trim().parse().map_err(|_| usage(format!("invalid eval_seed '{v}'")))?);
            } else if !train.set(&k, &v)? && !set_eval_key(&mut eval, &mut partition, &k, &v)? {
                return Err(usage(format!("{}: unknown key '{k}'", path.display())));
            }
        }
    }
    for (k, v) in model.pairs() {
        train.set(k, v)?;
    }
    if let Some(v) = &eval_flags.negatives {
        set_eval_key(&mut eval, &mut partition, "negatives", v)?;
    }
    if let Some(v) = &eval_flags.k {
        set_eval_key(&mut eval, &mut partition, "k", v)?;
    }
    if let Some(v) = &eval_flags.partition {
        set_eval_key(&mut eval, &mut partition, "partition", v)?;
    }
    if eval_flags.no_warm_replay {
        eval.warm_replay = false;
    }
    if eval_flags.timings {
        eval.timings = true;
    }
    if let Some(seed) = common.seed {
        train.seed = seed;
    }
    if let Some(v) = model.variant.as_ref().or(variant.as_ref()) {
        train = train.with_variant(v)?;
    }
    train.validate()?;
    eval.seed = eval_seed.unwrap_or(train.seed);
    eval.validate()?;
    Ok(Resolved { train, eval, partition })
}

pub fn ingest(common: &Common, input: &Path, format: &str) -> Result<(), CliError> {
    let started = Instant::now();
    let format: CsvFormat = format.parse()?;
    let log = parse_event_csv(open(input)?, format).map_err(|e| CliError::Data(format!("{}: {e}", input.display())))?;
    let outputs = write_bundle(&common.out_dir, &log.events, log.dims, &log.user_ids, &log.item_ids)?;
    println!(
        "{} events, {} users, {} items, {} edge features",
        log.events.len(),
        log.dims.n_users,
        log.dims.n_items,
        log.dims.d_e
    );
    let mut m = RunManifest::new("ingest", common.seed.unwrap_or(0));
    m.dataset = Some(DatasetInfo::of(&log.events));
    m.seconds.insert("total".into(), started.elapsed().as_secs_f64());
    m.outputs = outputs;
    m.append(&common.out_dir)
}

pub fn synth(
    common: &Common,
    kind: &str,
    users: usize,
    items: usize,
    events_per_user: usize,
    period: Option<usize>,
    clusters: Option<usize>,
) -> Result<(), CliError> {
    let started = Instant::now();
    let seed = common.seed.unwrap_or(0);
    let kind: SynthKind = kind.parse()?;
    let mut spec = SynthSpec::new(kind, users, items, events_per_user, seed);
    spec.period = period;
    spec.clusters = clusters;
    let (events, dims) = generate(&spec)?;
    let user_ids: Vec<i64> = (0..users as i64).collect();
    let item_ids: Vec<i64> = (0..items as i64).collect();
    let outputs = write_bundle(&common.out_dir, &events, dims, &user_ids, &item_ids)?;
    println!("{} events ({kind}, {users} users, {items} items)", events.len());
    let mut m = RunManifest::new("synth", seed);
    m.dataset = Some(DatasetInfo::of(&events));
    m.seconds.insert("total".into(), started.elapsed().as_secs_f64());
    m.outputs = outputs;
    m.append(&common.out_dir)
}

pub fn train(common: &Common, bundle_dir: &Path, flags: &ModelFlags) -> Result<(), CliError> {
    let r = resolve(common, flags, &EvalFlags::default())?;
    match r.train.precision {
        Precision::F64 => train_typed::<f64>(common, bundle_dir, &r.train),
        Precision::F32 => train_typed::<f32>(common, bundle_dir, &r.train),
    }
}

fn train_typed<T: Scalar + Serialize + DeserializeOwned>(
    common: &Common,
    bundle_dir: &Path,
    config: &TrainConfig,
) -> Result<(), CliError> {
    let (events, dims) = read_bundle(bundle_dir)?;
    let load = Instant::now();
    let data = Prepared::new(&events, dims, config)?;
    let load_secs = load.elapsed().as_secs_f64();

    let stats_path = common.out_dir.join(EPOCH_STATS);
    let mut stats = create(&stats_path)?;
    writeln!(stats, "epoch,loss,pair_loss,batches,pairs,seconds").map_err(|e| io_err(&stats_path, e))?;
    let mut write_err = None;
    let clock = Instant::now();
    let mut params = ModelParams::<T>::init(data.graph.dims(), config)?;
    let report = train_with(&mut params, &data.graph, &data.train, config, |s| {
        eprintln!("epoch {:>3}  loss {:.6}  ({:.1}s)", s.epoch, s.loss, s.seconds);
        if let Err(e) = writeln!(
            stats,
            "{},{:?},{:?},{},{},{:.3}",
            s.epoch, s.loss, s.pair_loss, s.batches, s.pairs, s.seconds
        ) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_err(&stats_path, e));
    }
    stats.flush().map_err(|e| io_err(&stats_path, e))?;
    let train_secs = clock.elapsed().as_secs_f64();

    let ckpt_path = common.out_dir.join(CHECKPOINT);
    let ckpt = Checkpoint {
        config: config.clone(),
        config_hash: config.hash(),
        params,
        optimizer: Some(report.optimizer),
        memory: Some(report.memory),
    };
    let mut out = create(&ckpt_path)?;
    ckpt.write(&mut out)?;
    out.flush().map_err(|e| io_err(&ckpt_path, e))?;

    let mut m = RunManifest::new("train", config.seed).with_config(config);
    m.dataset = Some(DatasetInfo::of(&events));
    m.seconds.insert("load".into(), load_secs);
    m.seconds.insert("train".into(), train_secs);
    m.outputs = vec![ckpt_path, stats_path];
    m.append(&common.out_dir)
}

fn write_metrics(common: &Common, report: &MetricsReport, ranks: Option<&[EventRank]>) -> Result<Vec<std::path::PathBuf>, CliError> {
    let path = common.out_dir.join(METRICS);
    write_string(&path, &report.to_json())?;
    let mut outputs = vec![path];
    if let Some(ranks) = ranks {
        let path = common.out_dir.join(RANKS);
        let mut f = create(&path)?;
        write_ranks_csv(ranks, &mut f).map_err(|e| io_err(&path, e))?;
        f.flush().map_err(|e| io_err(&path, e))?;
        outputs.push(path);
    }
    Ok(outputs)
}

fn print_metrics(report: &MetricsReport) {
    let mut line = String::new();
    for (k, v) in &report.recall {
        line += &format!("recall@{k}={v:.4} ");
    }
    for (k, v) in &report.ndcg {
        line += &format!("ndcg@{k}={v:.4} ");
    }
    println!("{line}mrr={:.4} events={}", report.mrr, report.events);
}

pub fn eval(
    common: &Common,
    bundle_dir: &Path,
    checkpoint: Option<&Path>,
    scorer: &str,
    per_event: bool,
    eval_flags: &EvalFlags,
    model_flags: &ModelFlags,
) -> Result<(), CliError> {
    let r = resolve(common, model_flags, eval_flags)?;
    match scorer {
        "model" => {
            let path = checkpoint.ok_or_else(|| usage("--checkpoint is required with --scorer model"))?;
            let (_, tag) = read_header(&mut BufReader::new(open(path)?))?;
            match tag.as_str() {
                "f64" => eval_model::<f64>(common, bundle_dir, path, per_event, &r),
                "f32" => eval_model::<f32>(common, bundle_dir, path, per_event, &r),
                other => Err(CliError::Data(format!("{}: unknown precision '{other}'", path.display()))),
            }
        }
        "oracle" | "random" => {
            let started = Instant::now();
            let (events, dims) = read_bundle(bundle_dir)?;
            let data = Prepared::new(&events, dims, &r.train)?;
            let part = data.partition(r.partition);
            let (report, ranks) = if scorer == "oracle" {
                evaluate(&mut OracleScorer, &data.graph, part, &r.eval)?
            } else {
                evaluate(&mut RandomScorer::new(r.eval.seed), &data.graph, part, &r.eval)?
            };
            let outputs = write_metrics(common, &report, per_event.then_some(&ranks[..]))?;
            print_metrics(&report);
            let mut m = RunManifest::new(&format!("eval --scorer {scorer}"), r.eval.seed).with_config(&r.train);
            m.dataset = Some(DatasetInfo::of(&events));
            m.seconds.insert("eval".into(), started.elapsed().as_secs_f64());
            m.outputs = outputs;
            m.append(&common.out_dir)
        }
        other => Err(usage(format!("unknown scorer '{other}' (expected model, oracle or random)"))),
    }
}

fn eval_model<T: Scalar + Serialize + DeserializeOwned>(
    common: &Common,
    bundle_dir: &Path,
    ckpt_path: &Path,
    per_event: bool,
    r: &Resolved,
) -> Result<(), CliError> {
    let started = Instant::now();
    let ckpt = Checkpoint::<T>::read(open(ckpt_path)?)?;
    let (events, dims) = read_bundle(bundle_dir)?;
    if dims != ckpt.params.dims {
        return Err(CliError::Data(format!(
            "checkpoint dims {:?} do not match bundle dims {dims:?}",
            ckpt.params.dims
        )));
    }
    // the split is the one the checkpoint was trained with
    let data = Prepared::new(&events, dims, &ckpt.config)?;
    let memory = ckpt.memory.clone().unwrap_or_else(|| ckpt.params.new_memory());
    let mut eval = r.eval.clone();
    if common.seed.is_none() {
        eval.seed = ckpt.config.seed;
    }
    let (report, ranks, _) = evaluate_partition(&ckpt.params, &data, memory, r.partition, &eval)?;
    let outputs = write_metrics(common, &report, per_event.then_some(&ranks[..]))?;
    print_metrics(&report);
    let mut m = RunManifest::new("eval", eval.seed).with_config(&ckpt.config);
    m.dataset = Some(DatasetInfo::of(&events));
    m.seconds.insert("eval".into(), started.elapsed().as_secs_f64());
    m.outputs = outputs;
    m.append(&common.out_dir)
}

pub fn ablate(
    common: &Common,
    bundle_dir: &Path,
    variants: Option<&str>,
    eval_flags: &EvalFlags,
    model_flags: &ModelFlags,
) -> Result<(), CliError> {
    let r = resolve(common, model_flags, eval_flags)?;
    let names: Vec<String> = match variants {
        Some(list) => list.split(',').map(|v| v.trim().to_string()).collect(),
        None => VARIANTS.iter().map(|v| v.to_string()).collect(),
    };
    for v in &names {
        if !VARIANTS.contains(&v.as_str()) {
            return Err(usage(format!("unknown variant '{v}' (expected one of {})", VARIANTS.join(", "))));
        }
    }
    match r.train.precision {
        Precision::F64 => ablate_typed::<f64>(common, bundle_dir, &names, &r),
        Precision::F32 => ablate_typed::<f32>(common, bundle_dir, &names, &r),
    }
}

fn ablate_typed<T: Scalar>(common: &Common, bundle_dir: &Path, names: &[String], r: &Resolved) -> Result<(), CliError> {
    let (events, dims) = read_bundle(bundle_dir)?;
    let mut table = format!("variant,{}", header_columns(&r.eval.k_list));
    let mut m = RunManifest::new("ablate", r.train.seed).with_config(&r.train);
    for name in names {
        let config = r.train.with_variant(name)?;
        let data = Prepared::new(&events, dims, &config)?;
        let out = run::<T>(&data, &config, &r.eval, r.partition, |s| {
            eprintln!("[{name}] epoch {:>3}  loss {:.6}", s.epoch, s.loss)
        })?;
        print!("{name:>9}: ");
        print_metrics(&out.metrics);
        table += &format!("{name},{}", row_values(&out.metrics));
        let path = common.out_dir.join("ablation").join(format!("{name}.json"));
        write_string(&path, &out.metrics.to_json())?;
        m.outputs.push(path);
        for (phase, secs) in out.seconds {
            m.seconds.insert(format!("{name}.{phase}"), secs);
        }
    }
    let path = common.out_dir.join(ABLATION);
    write_string(&path, &table)?;
    m.outputs.push(path);
    m.dataset = Some(DatasetInfo::of(&events));
    m.append(&common.out_dir)
}

fn header_columns(ks: &[usize]) -> String {
    let mut cols: Vec<String> = ks.iter().map(|k| format!("recall@{k}")).collect();
    cols.extend(ks.iter().map(|k| format!("ndcg@{k}")));
    cols.push("mrr".into());
    cols.push("events".into());
    cols.join(",") + "\n"
}

fn row_values(report: &MetricsReport) -> String {
    let mut cols: Vec<String> = report.recall.values().map(|v| format!("{v:.6}")).collect();
    cols.extend(report.ndcg.values().map(|v| format!("{v:.6}")));
    cols.push(format!("{:.6}", report.mrr));
    cols.push(report.events.to_string());
    cols.join(",") + "\n"
}
