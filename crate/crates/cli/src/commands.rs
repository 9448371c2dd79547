use std::fs;
use std::path::{Path, PathBuf};

use pcmp_core::codec::{
    bits_per_point, decode_cloud, encode_cloud, encode_octree, header_size, Bitstream, CodecConfig, MAGIC,
};
use pcmp_core::eval::{default_sweep, evaluate_on_table, evaluate_policy, rd_csv, rd_sweep, EvalReport, Policy};
use pcmp_core::fsutil::write_atomic;
use pcmp_core::octree::{build_octree, DepthLevel, MAX_DEPTH};
use pcmp_core::pointcloud::{
    format_ply, format_xyz, generate_dataset, parse_ply, parse_xyz, CloudFormat, DatasetConfig, LabeledCloud,
    NormalizationTransform, Point3, PointCloud,
};
use pcmp_core::predictor::{
    sidecar_path, train_predictor, CheckpointMeta, PredictorModel, PredictorTrainConfig,
};
use pcmp_core::tasks::{
    build_rate_loss_table, dataset_hash, RateLossTable, TableCache, TaskModel, TaskTrainConfig,
};
use serde::Serialize;
use serde_json::json;

use crate::{dataset, CliError, Command};

type Result<T> = std::result::Result<T, CliError>;

pub const CACHE_ENV: &str = "PCMP_CACHE_DIR";
/// Comment tag carrying a decoded cloud's normalization transform.
pub const TRANSFORM_TAG: &str = "pcmp-transform";

/// The validated command plus the raw argument list, echoed into every
/// JSON sidecar.
#[derive(Serialize)]
struct RunConfig<'a> {
    #[serde(flatten)]
    command: &'a Command,
    argv: Vec<String>,
}

fn hex(h: u64) -> String {
    format!("{h:016x}")
}

pub fn run(command: Command) -> Result<()> {
    validate(&command)?;
    let run = serde_json::to_value(RunConfig {
        command: &command,
        argv: std::env::args().collect(),
    })
    .expect("run config serializes");
    match &command {
        Command::Encode(a) => encode(a, run),
        Command::Decode(a) => decode(a, run),
        Command::Info(a) => info(&a.input),
        Command::Synth(a) => synth(a, run),
        Command::TrainTask(a) => train_task(a, run),
        Command::BuildTable(a) => build_table(a, run),
        Command::TrainPredictor(a) => train_pred(a, run),
        Command::Eval(a) => eval(a, run),
        Command::RdCurve(a) => rd_curve(a, run),
    }
}

fn check_depth(depth: u32) -> Result<()> {
    if (1..=MAX_DEPTH).contains(&depth) {
        Ok(())
    } else {
        Err(CliError::config(format!("--depth {depth} must be in 1..={MAX_DEPTH}")))
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(CliError::config(format!("--lambda {lambda} must be finite and >= 0")))
    }
}

fn check_positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(CliError::config(format!("--{name} must be positive")))
    } else {
        Ok(())
    }
}

fn check_exists(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::data(format!("{}: no such file or directory", path.display())))
    }
}

fn table_paths(stem: &Path) -> [PathBuf; 2] {
    [stem.with_extension("csv"), stem.with_extension("json")]
}

fn validate(command: &Command) -> Result<()> {
    match command {
        Command::Encode(a) => {
            check_depth(a.depth)?;
            cloud_format(&a.input, a.format)?;
            check_exists(&a.input)
        }
        Command::Decode(a) => {
            if let Some(d) = a.depth {
                check_depth(d)?;
            }
            cloud_format(&a.out, a.format)?;
            check_exists(&a.input)
        }
        Command::Info(a) => check_exists(&a.input),
        Command::Synth(a) => {
            check_positive("per-class", a.per_class)?;
            if !(a.max_noise >= 0.0 && a.max_noise.is_finite()) {
                return Err(CliError::config("--max-noise must be finite and >= 0"));
            }
            Ok(())
        }
        Command::TrainTask(a) => {
            check_positive("epochs", a.epochs)?;
            check_positive("batch", a.batch)?;
            check_exists(&a.data)
        }
        Command::BuildTable(a) => {
            check_depth(a.depth)?;
            if a.levels.max().get() > a.depth {
                return Err(CliError::config(format!(
                    "--levels {} exceed --depth {}",
                    a.levels, a.depth
                )));
            }
            check_exists(&a.data)?;
            check_exists(&a.task_model)
        }
        Command::TrainPredictor(a) => {
            check_lambda(a.lambda)?;
            check_positive("epochs", a.epochs)?;
            check_positive("batch", a.batch)?;
            check_exists(&a.data)?;
            table_paths(&a.table).iter().try_for_each(|p| check_exists(p))
        }
        Command::Eval(a) => {
            check_lambda(a.lambda)?;
            for p in &a.policies {
                parse_policy(p)?;
            }
            let wants_learned = a.policies.iter().any(|p| p == "learned");
            if wants_learned && a.predictors.is_empty() {
                return Err(CliError::config("policy learned needs at least one --predictor"));
            }
            a.predictors.iter().try_for_each(|p| check_exists(p))?;
            check_exists(&a.data)?;
            table_paths(&a.table).iter().try_for_each(|p| check_exists(p))
        }
        Command::RdCurve(a) => {
            a.lambdas.iter().try_for_each(|&l| check_lambda(l))?;
            check_positive("epochs", a.epochs)?;
            check_positive("batch", a.batch)?;
            check_exists(&a.data)?;
            table_paths(&a.table).iter().try_for_each(|p| check_exists(p))
        }
    }
}

fn cloud_format(path: &Path, explicit: Option<CloudFormat>) -> Result<CloudFormat> {
    explicit.or_else(|| CloudFormat::from_path(path)).ok_or_else(|| {
        CliError::config(format!(
            "cannot tell the format of {}; use a .xyz or .ply name or pass --format",
            path.display()
        ))
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    Ok(write_atomic(path, &serde_json::to_vec_pretty(value).expect("json serializes"))?)
}

// ---------------------------------------------------------------------------
// Codec commands
// ---------------------------------------------------------------------------

/// Reads a `pcmp-transform ox oy oz scale` comment, if present.
fn carried_transform(text: &str) -> Option<NormalizationTransform> {
    text.lines().find_map(|line| {
        let rest = line.trim().trim_start_matches('#').trim_start_matches("comment").trim();
        let rest = rest.strip_prefix(TRANSFORM_TAG)?;
        let v: Vec<f64> = rest.split_whitespace().map(|t| t.parse().ok()).collect::<Option<_>>()?;
        match v[..] {
            [x, y, z, s] if s > 0.0 && s.is_finite() => Some(NormalizationTransform {
                offset: Point3::new(x, y, z),
                scale: s,
            }),
            _ => None,
        }
    })
}

/// Encodes with a carried transform when every point maps inside the unit
/// cube under it, so decoded clouds re-encode onto the same grid.
fn encode_text(text: &str, cloud: &PointCloud, depth: u32) -> Result<Bitstream> {
    if let Some(t) = carried_transform(text) {
        let mapped = cloud.points().iter().map(|&p| t.apply(p)).collect();
        match PointCloud::new_normalized(mapped) {
            Ok(normalized) => return Ok(encode_octree(&build_octree(&normalized, depth)?, t)),
            Err(_) => eprintln!("note: ignoring {TRANSFORM_TAG}; points fall outside its unit cube"),
        }
    }
    Ok(encode_cloud(cloud, depth)?)
}

#[derive(Serialize)]
struct LevelRow {
    level: u32,
    symbols: u32,
    bytes: u32,
    prefix_bytes: usize,
    prefix_bpp: f64,
}

fn level_rows(stream: &Bitstream) -> Vec<LevelRow> {
    let h = stream.header();
    let mut prefix = 0;
    (0..h.max_depth as usize)
        .map(|i| {
            prefix += h.payload_lengths[i] as usize;
            LevelRow {
                level: i as u32 + 1,
                symbols: h.symbol_counts[i],
                bytes: h.payload_lengths[i],
                prefix_bytes: prefix,
                prefix_bpp: bits_per_point(prefix, h.point_count),
            }
        })
        .collect()
}

fn encode(a: &crate::EncodeArgs, run: serde_json::Value) -> Result<()> {
    let format = cloud_format(&a.input, a.format)?;
    let text = fs::read_to_string(&a.input).map_err(|e| CliError::data(format!("{}: {e}", a.input.display())))?;
    let name = a.input.display().to_string();
    let cloud = match format {
        CloudFormat::Xyz => parse_xyz(&text, &name)?,
        CloudFormat::PlyAscii => parse_ply(&text, &name)?,
    };
    let stream = encode_text(&text, &cloud, a.depth)?;
    let bytes = stream.to_bytes();
    write_atomic(&a.out, &bytes)?;
    let rows = level_rows(&stream);
    println!("level  symbols    bytes  prefix_bpp");
    for r in &rows {
        println!("{:>5} {:>8} {:>8} {:>11.4}", r.level, r.symbols, r.bytes, r.prefix_bpp);
    }
    println!("{} points, {} bytes written to {}", stream.header().point_count, bytes.len(), a.out.display());
    write_json(
        &sidecar_path(&a.out),
        &json!({ "run": run, "point_count": stream.header().point_count, "file_bytes": bytes.len(), "levels": rows }),
    )
}

fn read_stream(path: &Path) -> Result<Bitstream> {
    let bytes = fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(Bitstream::from_bytes(&bytes)?)
}

fn decode(a: &crate::DecodeArgs, run: serde_json::Value) -> Result<()> {
    let format = cloud_format(&a.out, a.format)?;
    let stream = read_stream(&a.input)?;
    let depth = DepthLevel::new(a.depth.unwrap_or(stream.max_depth()))?;
    let (_, cloud) = decode_cloud(&stream, depth)?;
    let t = stream.header().transform;
    let tag = format!("{TRANSFORM_TAG} {} {} {} {}", t.offset.x, t.offset.y, t.offset.z, t.scale);
    let text = match format {
        CloudFormat::Xyz => format!("# {tag}\n{}", format_xyz(&cloud)),
        CloudFormat::PlyAscii => {
            format_ply(&cloud).replacen("format ascii 1.0\n", &format!("format ascii 1.0\ncomment {tag}\n"), 1)
        }
    };
    write_atomic(&a.out, text.as_bytes())?;
    println!("{} points at depth {depth} written to {}", cloud.len(), a.out.display());
    write_json(
        &sidecar_path(&a.out),
        &json!({ "run": run, "depth": depth.get(), "points": cloud.len() }),
    )
}

fn info(path: &Path) -> Result<()> {
    let stream = read_stream(path)?;
    let h = stream.header();
    let join = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
    println!("magic: {}", String::from_utf8_lossy(&MAGIC));
    println!("version: {}", h.version);
    println!("max_depth: {}", h.max_depth);
    println!("reserved: 0");
    println!("point_count: {}", h.point_count);
    println!(
        "transform_offset: {} {} {}",
        h.transform.offset.x, h.transform.offset.y, h.transform.offset.z
    );
    println!("transform_scale: {}", h.transform.scale);
    println!("symbol_counts: {}", join(&h.symbol_counts));
    println!("payload_lengths: {}", join(&h.payload_lengths));
    println!("header_bytes: {}", header_size(stream.max_depth()));
    println!("payload_bytes: {}", stream.payload_len());
    println!("file_bytes: {}", stream.encoded_len());
    Ok(())
}

// ---------------------------------------------------------------------------
// Pipeline commands
// ---------------------------------------------------------------------------

fn synth(a: &crate::SynthArgs, run: serde_json::Value) -> Result<()> {
    let config = DatasetConfig {
        classes: a.classes,
        per_class: a.per_class,
        points: a.points,
        max_noise: a.max_noise,
        seed: a.seed,
    };
    let data = generate_dataset(&config)?;
    dataset::save(&a.out, &data, &config, run)?;
    println!("{} clouds written to {}", data.len(), a.out.display());
    Ok(())
}

fn train_task(a: &crate::TrainTaskArgs, run: serde_json::Value) -> Result<()> {
    let data = dataset::load(&a.data)?;
    let config = TaskTrainConfig {
        epochs: a.epochs,
        batch: a.batch,
        seed: a.seed,
        ..TaskTrainConfig::default()
    };
    let model = TaskModel::train(a.task, &data, &config)?;
    let score = mean_score(&model, &data);
    model.save(&a.out)?;
    println!("{} network trained; training-set score {score:.4}", a.task);
    write_json(
        &sidecar_path(&a.out),
        &json!({
            "run": run,
            "config": config,
            "dataset_hash": hex(dataset_hash(&data)),
            "weights_hash": hex(model.weights_hash()),
            "training_metric": score,
        }),
    )
}

fn mean_score(model: &TaskModel, data: &[LabeledCloud]) -> f64 {
    data.iter().map(|s| model.evaluate_raw(s).score).sum::<f64>() / data.len() as f64
}

fn build_table(a: &crate::BuildTableArgs, run: serde_json::Value) -> Result<()> {
    let data = dataset::load(&a.data)?;
    let task = TaskModel::load(&a.task_model)?;
    let codec = CodecConfig::new(a.depth)?;
    let table = match std::env::var_os(CACHE_ENV) {
        Some(dir) => {
            let (table, status) = TableCache::new(dir).load_or_build(&data, &codec, &task, a.levels)?;
            println!("table cache: {status:?}");
            table
        }
        None => build_rate_loss_table(&data, &codec, &task, a.levels)?,
    };
    table.save(&a.out)?;
    println!("{} x {} table written to {}", table.len(), table.k(), a.out.display());
    let mut run_path = a.out.clone().into_os_string();
    run_path.push(".run.json");
    write_json(Path::new(&run_path), &json!({ "run": run, "meta": table.meta() }))
}

fn load_inputs(data: &Path, table: &Path) -> Result<(Vec<LabeledCloud>, RateLossTable)> {
    let data = dataset::load(data)?;
    let table = RateLossTable::load(table)?;
    let hash = hex(dataset_hash(&data));
    if table.meta().dataset_hash != hash {
        return Err(CliError::data(format!(
            "table was built for dataset {}, not {hash}",
            table.meta().dataset_hash
        )));
    }
    Ok((data, table))
}

fn predictor_config(lambda: f64, epochs: usize, batch: usize, seed: u64) -> PredictorTrainConfig {
    let mut c = PredictorTrainConfig {
        lambda,
        epochs,
        batch,
        seed,
        ..PredictorTrainConfig::default()
    };
    c.schedule.total_epochs = epochs;
    c.lr_drop_epoch = c.lr_drop_epoch.min(epochs * 4 / 5);
    c
}

fn train_pred(a: &crate::TrainPredictorArgs, run: serde_json::Value) -> Result<()> {
    let (data, table) = load_inputs(&a.data, &a.table)?;
    let config = predictor_config(a.lambda, a.epochs, a.batch, a.seed);
    let (model, log) = train_predictor(&data, &table, &config)?;
    model.save(&a.out)?;
    let meta = CheckpointMeta {
        lambda: a.lambda,
        seed: a.seed,
        schedule: config.schedule,
        levels: table.levels(),
        config: config.clone(),
        table_dataset_hash: table.meta().dataset_hash.clone(),
        weights_hash: hex(model.weights_hash()),
    };
    let last = log.hard_objective.last().copied().unwrap_or(f64::NAN);
    println!("predictor trained for lambda {}; final epoch objective {last:.4}", a.lambda);
    write_json(&sidecar_path(&a.out), &json!({ "run": run, "checkpoint": meta, "log": log }))
}

enum PolicySpec {
    Fixed(DepthLevel),
    Oracle,
    Learned,
}

fn parse_policy(s: &str) -> Result<PolicySpec> {
    match s {
        "oracle" => Ok(PolicySpec::Oracle),
        "learned" => Ok(PolicySpec::Learned),
        _ => {
            let k = s
                .strip_prefix("fixed:")
                .and_then(|k| k.parse().ok())
                .ok_or_else(|| CliError::config(format!("unknown policy {s:?}; use fixed:K, oracle or learned")))?;
            Ok(PolicySpec::Fixed(DepthLevel::new(k)?))
        }
    }
}

pub const EVAL_CSV_HEADER: &str = "policy,lambda,samples,mean_bpp,metric,mean_loss,objective,mean_depth,selection";

fn eval_row(r: &EvalReport) -> String {
    let sel: Vec<String> = r.selection.iter().map(|p| format!("{p:.2}")).collect();
    format!(
        "{},{:.6},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
        r.policy,
        r.lambda,
        r.samples,
        r.mean_bpp,
        r.metric,
        r.mean_loss,
        r.mean_objective,
        r.mean_depth,
        sel.join(";")
    )
}

fn eval(a: &crate::EvalArgs, run: serde_json::Value) -> Result<()> {
    let (data, table) = load_inputs(&a.data, &a.table)?;
    let models = a
        .predictors
        .iter()
        .map(|p| PredictorModel::load(p))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let task = a.task_model.as_deref().map(TaskModel::load).transpose()?;
    let codec = CodecConfig::new(table.meta().max_depth)?;
    let mut policies: Vec<(String, Policy<'_>)> = Vec::new();
    for spec in &a.policies {
        match parse_policy(spec)? {
            PolicySpec::Fixed(d) => policies.push((spec.clone(), Policy::Fixed(d))),
            PolicySpec::Oracle => policies.push((spec.clone(), Policy::Oracle(a.lambda))),
            PolicySpec::Learned => {
                for (path, m) in a.predictors.iter().zip(&models) {
                    let name = if models.len() == 1 {
                        "learned".to_string()
                    } else {
                        format!("learned:{}", path.file_name().unwrap_or_default().to_string_lossy())
                    };
                    policies.push((name, Policy::Learned(m)));
                }
            }
        }
    }
    let mut csv = format!("{EVAL_CSV_HEADER}\n");
    for (name, policy) in &policies {
        let mut report = match &task {
            Some(t) => evaluate_policy(policy, &data, &table, &codec, t, a.lambda)?,
            None => evaluate_on_table(policy, &data, &table, a.lambda)?,
        };
        report.policy = name.clone();
        println!(
            "{:<20} bpp {:>8.4}  metric {:.4}  objective {:.4}  depth {:.2}",
            report.policy, report.mean_bpp, report.metric, report.mean_objective, report.mean_depth
        );
        csv.push_str(&eval_row(&report));
    }
    write_atomic(&a.out, csv.as_bytes())?;
    write_json(&sidecar_path(&a.out), &json!({ "run": run }))
}

fn rd_curve(a: &crate::RdCurveArgs, run: serde_json::Value) -> Result<()> {
    let (data, table) = load_inputs(&a.data, &a.table)?;
    let lambdas = if a.lambdas.is_empty() { default_sweep() } else { a.lambdas.clone() };
    let mut models = Vec::with_capacity(lambdas.len());
    for &l in &lambdas {
        let config = predictor_config(l, a.epochs, a.batch, a.seed);
        models.push(train_predictor(&data, &table, &config)?.0);
        println!("trained predictor for lambda {l}");
    }
    let rows = rd_sweep(&lambdas, &data, &table, &models)?;
    write_atomic(&a.out, rd_csv(&rows).as_bytes())?;
    println!("{} rows written to {}", rows.len(), a.out.display());
    let hashes: Vec<String> = models.iter().map(|m| hex(m.weights_hash())).collect();
    write_json(
        &sidecar_path(&a.out),
        &json!({ "run": run, "lambdas": lambdas, "predictor_hashes": hashes }),
    )
}
