use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use intentfill::checkpoint::load_checkpoint_with_digest;
use intentfill::nn::DenoiserConfig;
use intentfill::pipeline::{eval_creation, eval_mixed, eval_removal, InpaintModel};
use intentfill::scene::{build_eval_set, build_train_set, read_dataset, write_dataset, MaskConfig, SampleMode, TrainExample};
use intentfill::train::{train_stage1, train_stage2, JsonLines, SnapshotWriter, TrainConfig, TrainData};
use intentfill::{load_checkpoint, save_checkpoint, wire, GuidanceConfig, SceneConfig, ScheduleConfig};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{flags, lookup, opt, resolve, write_effective};
use crate::{CliError, EvalArgs, GuidanceArgs, InpaintArgs, ServeArgs, SynthArgs, TrainArgs};

/// One JSON object per line on standard error.
pub fn log(event: &str, fields: Value) {
    let mut line = json!({ "event": event });
    if let (Value::Object(l), Value::Object(f)) = (&mut line, fields) {
        l.extend(f);
    }
    eprintln!("{line}");
}

fn require<T>(value: Option<T>, flag: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("missing required flag {flag}")))
}

fn user_usize(user: &Value, key: &str) -> Result<Option<usize>, CliError> {
    match lookup(user, key) {
        None => Ok(None),
        Some(v) => v
            .as_u64()
            .map(|n| Some(n as usize))
            .ok_or_else(|| CliError::Usage(format!("{key} must be a non-negative integer"))),
    }
}

fn guidance_flags(g: &GuidanceArgs) -> Vec<(&'static str, Option<Value>)> {
    vec![
        ("guidance.w", opt(&g.w)),
        ("guidance.steps", opt(&g.steps)),
        ("guidance.seed", opt(&g.seed)),
        ("guidance.sampler", opt(&g.sampler)),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SynthKind {
    Train,
    Removal,
    Creation,
    Mixed,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthConfig {
    out: Option<PathBuf>,
    n: usize,
    seed: u64,
    kind: SynthKind,
    scene: SceneConfig,
    masks: MaskConfig,
}

pub fn synth(args: SynthArgs) -> Result<(), CliError> {
    let user = flags(vec![
        ("out", opt(&args.out)),
        ("n", opt(&args.n)),
        ("seed", opt(&args.seed)),
        ("kind", opt(&args.kind)),
        ("scene.image_size", opt(&args.image_size)),
    ]);
    let cfg: SynthConfig = resolve(args.config.as_deref(), user, |u| {
        Ok(SynthConfig {
            out: None,
            n: 1000,
            seed: 0,
            kind: SynthKind::Train,
            scene: SceneConfig::for_size(user_usize(u, "scene.image_size")?.unwrap_or(32)),
            masks: MaskConfig::default(),
        })
    })?;
    let out = require(cfg.out.clone(), "--out")?;
    if cfg.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    cfg.scene.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.masks.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    log("config", json!({ "command": "synth", "config": &cfg }));

    let samples = match cfg.kind {
        SynthKind::Train => build_train_set(cfg.n, cfg.seed, &cfg.scene, &cfg.masks)?,
        SynthKind::Removal => build_eval_set(SampleMode::Removal, cfg.n, cfg.seed, &cfg.scene, &cfg.masks)?,
        SynthKind::Creation => build_eval_set(SampleMode::Creation, cfg.n, cfg.seed, &cfg.scene, &cfg.masks)?,
        SynthKind::Mixed => build_eval_set(SampleMode::Mixed, cfg.n, cfg.seed, &cfg.scene, &cfg.masks)?,
    };
    write_dataset(&out, &samples)?;
    write_effective(&out, &cfg)?;
    log("done", json!({ "out": out, "samples": samples.len() }));
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainRunConfig {
    out: Option<PathBuf>,
    init_checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    log_every: u64,
    model: DenoiserConfig,
    schedule: ScheduleConfig,
    train: TrainConfig,
    scene: SceneConfig,
    masks: MaskConfig,
}

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let user = flags(vec![
        ("out", opt(&args.out)),
        ("init_checkpoint", opt(&args.init_checkpoint)),
        ("data", opt(&args.data)),
        ("log_every", opt(&args.log_every)),
        ("model.image_size", opt(&args.image_size)),
        ("train.stage", opt(&args.stage)),
        ("train.steps", opt(&args.steps)),
        ("train.batch_size", opt(&args.batch_size)),
        ("train.lr", opt(&args.lr)),
        ("train.seed", opt(&args.seed)),
        ("train.checkpoint_every", opt(&args.checkpoint_every)),
    ]);
    let mut start = None;
    let cfg: TrainRunConfig = resolve(args.config.as_deref(), user, |u| {
        let stage = user_usize(u, "train.stage")?.unwrap_or(1);
        let (train, model, schedule) = if stage == 2 {
            let path = lookup(u, "init_checkpoint")
                .and_then(Value::as_str)
                .ok_or_else(|| CliError::Usage("missing required flag --init-checkpoint (needed by --stage 2)".into()))?;
            let ckpt = load_checkpoint(Path::new(path))?;
            let found = (TrainConfig::stage2(), ckpt.model, ckpt.schedule);
            start = Some(ckpt);
            found
        } else {
            let mut model = DenoiserConfig::default();
            if let Some(size) = user_usize(u, "model.image_size")? {
                model.image_size = size;
            }
            (TrainConfig::default(), model, ScheduleConfig::default())
        };
        let size = user_usize(u, "model.image_size")?.unwrap_or(model.image_size);
        Ok(TrainRunConfig {
            out: None,
            init_checkpoint: None,
            data: None,
            log_every: 50,
            model,
            schedule,
            train,
            scene: SceneConfig::for_size(size),
            masks: MaskConfig::default(),
        })
    })?;
    let out = require(cfg.out.clone(), "--out")?;
    cfg.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(ckpt) = &start {
        if (ckpt.model, ckpt.schedule) != (cfg.model, cfg.schedule) {
            return Err(CliError::Usage(
                "model and schedule settings must match the init checkpoint in stage 2".into(),
            ));
        }
    } else if cfg.init_checkpoint.is_some() {
        return Err(CliError::Usage("--init-checkpoint is only used by --stage 2".into()));
    }
    if cfg.scene.image_size != cfg.model.image_size {
        return Err(CliError::Usage(format!(
            "scene.image_size {} differs from model.image_size {}",
            cfg.scene.image_size, cfg.model.image_size
        )));
    }
    log("config", json!({ "command": "train", "config": &cfg }));

    let pool: Vec<TrainExample> = match &cfg.data {
        Some(dir) => {
            let ds = read_dataset(dir)?;
            if ds.image_size != cfg.model.image_size {
                return Err(CliError::Usage(format!(
                    "dataset holds {0}x{0} images but the model expects {1}x{1}",
                    ds.image_size, cfg.model.image_size
                )));
            }
            let pool: Vec<_> = ds.samples.iter().filter_map(|s| s.train_example()).collect();
            if pool.is_empty() {
                return Err(CliError::Usage("training dataset has no creation or removal samples".into()));
            }
            pool
        }
        None => Vec::new(),
    };
    let data = if cfg.data.is_some() {
        TrainData::Examples(&pool)
    } else {
        TrainData::Procedural {
            scene: cfg.scene,
            masks: cfg.masks,
        }
    };

    write_effective(&out, &cfg)?;
    let log_file = File::create(out.join("train_log.jsonl")).map_err(|e| CliError::Runtime(e.to_string()))?;
    let console = JsonLines::new(std::io::stderr(), cfg.log_every);
    let file = JsonLines::new(BufWriter::new(log_file), 1);
    let result = if cfg.train.checkpoint_every > 0 {
        let snaps = SnapshotWriter::new(out.join("snapshots"))?;
        let mut obs = ((console, file), snaps);
        run_stage(&cfg, &start, data, &mut obs)?
    } else {
        let mut obs = (console, file);
        run_stage(&cfg, &start, data, &mut obs)?
    };
    let path = out.join("checkpoint.ckpt");
    save_checkpoint(&result, &path)?;
    log("done", json!({ "checkpoint": path, "digest": result.digest()? }));
    Ok(())
}

fn run_stage(
    cfg: &TrainRunConfig,
    start: &Option<intentfill::Checkpoint>,
    data: TrainData<'_>,
    obs: &mut dyn intentfill::train::TrainObserver,
) -> Result<intentfill::Checkpoint, CliError> {
    Ok(match start {
        Some(ckpt) => train_stage2(ckpt, data, &cfg.train, obs)?,
        None => train_stage1(cfg.model, cfg.schedule, data, &cfg.train, obs)?,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InpaintConfig {
    checkpoint: Option<PathBuf>,
    image: Option<PathBuf>,
    intent: Option<PathBuf>,
    out: Option<PathBuf>,
    guidance: GuidanceConfig,
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::Runtime(format!("read {}: {e}", path.display())))
}

fn parent(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

pub fn inpaint(args: InpaintArgs) -> Result<(), CliError> {
    let mut pairs = vec![
        ("checkpoint", opt(&args.checkpoint)),
        ("image", opt(&args.image)),
        ("intent", opt(&args.intent)),
        ("out", opt(&args.out)),
    ];
    pairs.extend(guidance_flags(&args.guidance));
    let cfg: InpaintConfig = resolve(args.config.as_deref(), flags(pairs), |_| {
        Ok(InpaintConfig {
            checkpoint: None,
            image: None,
            intent: None,
            out: None,
            guidance: GuidanceConfig::default(),
        })
    })?;
    let checkpoint = require(cfg.checkpoint.clone(), "--checkpoint")?;
    let image_path = require(cfg.image.clone(), "<IMAGE>")?;
    let intent_path = require(cfg.intent.clone(), "<INTENT>")?;
    let out = require(cfg.out.clone(), "<OUT>")?;
    log("config", json!({ "command": "inpaint", "config": &cfg }));

    let image = wire::decode_rgb(&read(&image_path)?)?;
    let intent = wire::decode_intent(&read(&intent_path)?)?;
    let (ckpt, digest) = load_checkpoint_with_digest(&checkpoint)?;
    let model = InpaintModel::from_checkpoint(&ckpt)?;
    let result = model.inpaint(&image, &intent, &cfg.guidance)?;
    std::fs::write(&out, wire::encode_rgb(&result)?).map_err(|e| CliError::Runtime(format!("write {}: {e}", out.display())))?;
    write_effective(parent(&out), &cfg)?;
    log("done", json!({ "out": out, "checkpoint_id": digest }));
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalConfig {
    mode: Option<SampleMode>,
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    out: PathBuf,
    limit: Option<usize>,
    guidance: GuidanceConfig,
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let mut pairs = vec![
        ("mode", opt(&args.mode)),
        ("checkpoint", opt(&args.checkpoint)),
        ("data", opt(&args.data)),
        ("out", opt(&args.out)),
        ("limit", opt(&args.limit)),
    ];
    pairs.extend(guidance_flags(&args.guidance));
    let cfg: EvalConfig = resolve(args.config.as_deref(), flags(pairs), |_| {
        Ok(EvalConfig {
            mode: None,
            checkpoint: None,
            data: None,
            out: PathBuf::from("eval_report.json"),
            limit: None,
            guidance: GuidanceConfig::default(),
        })
    })?;
    let mode = require(cfg.mode, "--mode")?;
    let checkpoint = require(cfg.checkpoint.clone(), "--checkpoint")?;
    let data = require(cfg.data.clone(), "--data")?;
    log("config", json!({ "command": "eval", "config": &cfg }));

    let (ckpt, digest) = load_checkpoint_with_digest(&checkpoint)?;
    let model = InpaintModel::from_checkpoint(&ckpt)?;
    let mut samples = read_dataset(&data)?.samples;
    if let Some(n) = cfg.limit {
        samples.truncate(n);
    }
    let report = match mode {
        SampleMode::Removal => eval_removal(&model, &samples, &cfg.guidance)?,
        SampleMode::Creation => eval_creation(&model, &samples, &cfg.guidance)?,
        SampleMode::Mixed => eval_mixed(&model, &samples, &cfg.guidance)?,
    };
    let mut value = serde_json::to_value(&report).expect("report serializes");
    value["checkpoint_id"] = json!(digest);
    let text = serde_json::to_string_pretty(&value).expect("report serializes");
    std::fs::write(&cfg.out, format!("{text}\n")).map_err(|e| CliError::Runtime(format!("write {}: {e}", cfg.out.display())))?;
    write_effective(parent(&cfg.out), &cfg)?;
    println!("{text}");
    log(
        "done",
        json!({
            "out": cfg.out,
            "object_pixel_fraction": report.object_pixel_fraction,
            "creation_rate": report.creation_rate,
        }),
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ServeConfig {
    checkpoint: Option<PathBuf>,
    host: String,
    port: u16,
    max_queue: usize,
    max_upload_bytes: usize,
}

pub fn serve(args: ServeArgs) -> Result<(), CliError> {
    let user = flags(vec![
        ("checkpoint", opt(&args.checkpoint)),
        ("host", opt(&args.host)),
        ("port", opt(&args.port)),
        ("max_queue", opt(&args.max_queue)),
    ]);
    let cfg: ServeConfig = resolve(args.config.as_deref(), user, |_| {
        let d = intentfill_studio::StudioConfig::default();
        Ok(ServeConfig {
            checkpoint: None,
            host: "127.0.0.1".into(),
            port: 8080,
            max_queue: d.max_queue,
            max_upload_bytes: d.max_upload_bytes,
        })
    })?;
    if cfg.max_queue == 0 {
        return Err(CliError::Usage("--max-queue must be at least 1".into()));
    }
    let addr: std::net::SocketAddr = format!("{}:{}", cfg.host, cfg.port)
        .parse()
        .map_err(|e| CliError::Usage(format!("bad listen address: {e}")))?;
    log("config", json!({ "command": "serve", "config": &cfg }));

    let studio = intentfill_studio::Studio::new(intentfill_studio::StudioConfig {
        max_queue: cfg.max_queue,
        max_upload_bytes: cfg.max_upload_bytes,
    });
    if let Some(path) = &cfg.checkpoint {
        let id = studio.load_checkpoint(path)?;
        log("checkpoint_loaded", json!({ "path": path, "checkpoint_id": id }));
    }
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    log("listening", json!({ "addr": addr.to_string() }));
    runtime
        .block_on(intentfill_studio::serve(studio, addr))
        .map_err(|e| CliError::Runtime(format!("server: {e}")))
}
