//! Command-line front end: toy training runs, multimodal inference,
//! token-budget planning, and metric evaluation.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use loramix::audio::wav::{read_wav, SAMPLE_RATE};
use loramix::audio::{audio_token_budget, log_mel, max_duration_s, MelFrontendConfig};
use loramix::error::{Error, Result};
use loramix::eval::{
    score_asr, score_ast, score_choice, score_sqqa, score_ssum, EvalManifest, EvalTask,
    JudgeClient, JudgeTarget, ScoreReport,
};
use loramix::model::{load_model, save_model, MultimodalModel};
use loramix::numerics::io::load_tensors;
use loramix::numerics::Tensor;
use loramix::training::synth::dataset_for_source;
use loramix::training::{
    read_jsonl, resolve_raw, run_stage, standard_schedules, RawSample, StageReport, StageSpec,
};
use loramix::vision::{load_image, plan_crops, VisionEncoderConfig};

#[derive(Parser)]
#[command(
    name = "loramix",
    version,
    about = "Frozen-core multimodal stack: staged training, inference, budget planning, evaluation"
)]
struct Cli {
    /// JSON file of defaults for any long flag; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run training stages against synthetic or manifest data.
    Train(TrainArgs),
    /// Route a prompt with optional payloads and greedy-decode.
    Infer(InferArgs),
    /// Token-budget arithmetic for audio durations and image dims.
    Budget(BudgetArgs),
    /// Score a JSONL manifest of hypotheses against references.
    Eval(EvalArgs),
}

/// Defaults file: every key mirrors a long flag of some subcommand.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    stages: Option<String>,
    steps_scale: Option<f64>,
    seed: Option<u64>,
    model_dir: Option<PathBuf>,
    manifest: Option<PathBuf>,
    out: Option<PathBuf>,
    prompt: Option<String>,
    audio: Option<PathBuf>,
    features: Option<PathBuf>,
    image: Option<Vec<PathBuf>>,
    max_new: Option<usize>,
    max_crops: Option<usize>,
    audio_seconds: Option<f64>,
    image_dims: Option<String>,
    context: Option<usize>,
    reserved_text: Option<usize>,
    task: Option<String>,
    judge_url: Option<String>,
    judge_key: Option<String>,
    stub_judge: Option<String>,
    max_in_flight: Option<usize>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let raw = std::fs::read_to_string(p)?;
                serde_json::from_str(&raw)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Comma-separated stage names; all seven standard stages when absent.
    #[arg(long)]
    stages: Option<String>,
    /// Fraction of the 50k-step reference budget each stage runs.
    #[arg(long)]
    steps_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint directory to continue from; fresh toy model when absent.
    #[arg(long)]
    model_dir: Option<PathBuf>,
    /// JSONL of samples to train on instead of the stage's synthetic data.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory for reports and the final checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    prompt: Option<String>,
    /// Image payload; repeat the flag for multi-image prompts.
    #[arg(long)]
    image: Vec<PathBuf>,
    /// WAV payload (PCM16 mono 16 kHz).
    #[arg(long)]
    audio: Option<PathBuf>,
    /// Precomputed mel frames in the tensor container; bypasses the
    /// WAV frontend.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    model_dir: Option<PathBuf>,
    #[arg(long)]
    max_new: Option<usize>,
    #[arg(long)]
    max_crops: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for generation.json; stdout only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BudgetArgs {
    #[arg(long)]
    audio_seconds: Option<f64>,
    /// Image dims as HxW, e.g. 2000x3000.
    #[arg(long)]
    image: Option<String>,
    #[arg(long)]
    max_crops: Option<usize>,
    /// Context length the budget is checked against.
    #[arg(long)]
    context: Option<usize>,
    /// Token positions set aside for text around the audio.
    #[arg(long)]
    reserved_text: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// asr | ast | sqqa | ssum | au
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Report JSON path; stdout table only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Judge endpoint; judged tasks fall back to LORAMIX_JUDGE_URL.
    #[arg(long)]
    judge_url: Option<String>,
    #[arg(long)]
    judge_key: Option<String>,
    /// Fixed judge reply for offline runs (testing hook).
    #[arg(long)]
    stub_judge: Option<String>,
    /// Judge request concurrency bound.
    #[arg(long)]
    max_in_flight: Option<usize>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Cmd::Train(a) => cmd_train(a, file),
        Cmd::Infer(a) => cmd_infer(a, file),
        Cmd::Budget(a) => cmd_budget(a, file),
        Cmd::Eval(a) => cmd_eval(a, file),
    }
}

fn load_or_toy(model_dir: Option<&Path>, seed: u64) -> Result<MultimodalModel> {
    match model_dir {
        Some(dir) => load_model(dir),
        None => MultimodalModel::toy(seed),
    }
}

fn cmd_train(a: TrainArgs, file: FileConfig) -> Result<()> {
    let stages_arg = a.stages.or(file.stages);
    let steps_scale = a.steps_scale.or(file.steps_scale).unwrap_or(0.001);
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let model_dir = a.model_dir.or(file.model_dir);
    let manifest = a.manifest.or(file.manifest);
    let out = a
        .out
        .or(file.out)
        .unwrap_or_else(|| PathBuf::from("loramix-out"));

    let mut model = load_or_toy(model_dir.as_deref(), seed)?;
    let all = standard_schedules(steps_scale);
    let selected: Vec<StageSpec> = match &stages_arg {
        None => all.clone(),
        Some(list) => list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|name| {
                all.iter().find(|s| s.name == name).cloned().ok_or_else(|| {
                    let known: Vec<&str> = all.iter().map(|s| s.name.as_str()).collect();
                    Error::Config(format!("unknown stage {name:?}; expected one of {known:?}"))
                })
            })
            .collect::<Result<_>>()?,
    };
    if selected.is_empty() {
        return Err(Error::Config("--stages named no stages".into()));
    }

    let external: Option<(Vec<RawSample>, PathBuf)> = match &manifest {
        Some(path) => {
            let raws = read_jsonl(path)?;
            let base = path
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."));
            Some((raws, base))
        }
        None => None,
    };

    std::fs::create_dir_all(&out)?;
    let mut reports: Vec<StageReport> = Vec::with_capacity(selected.len());
    for stage in &selected {
        let dataset = match &external {
            Some((raws, base)) => raws
                .iter()
                .map(|r| resolve_raw(r, &model, base, stage.max_audio_tokens))
                .collect::<Result<Vec<_>>>()?,
            None => dataset_for_source(&stage.data_source, &model.config.vision, &model.tokenizer)?,
        };
        let report = run_stage(&mut model, stage, &dataset, seed)?;
        match (report.losses.first(), report.final_loss()) {
            (Some(first), Some(last)) => println!(
                "stage {:<28} {:>6} steps  loss {first:.4} -> {last:.4}",
                report.name, report.steps
            ),
            _ => println!("stage {:<28} {:>6} steps  (no-op)", report.name, report.steps),
        }
        reports.push(report);
    }

    let checkpoint = out.join("model");
    save_model(&checkpoint, &model)?;
    std::fs::write(
        out.join("stage_reports.json"),
        serde_json::to_string_pretty(&reports)?,
    )?;
    let fingerprints: Vec<(String, u64)> = model.group_fingerprints();
    std::fs::write(
        out.join("fingerprints.json"),
        serde_json::to_string_pretty(&fingerprints)?,
    )?;
    println!(
        "wrote {} stage report(s), fingerprints, and checkpoint under {}",
        reports.len(),
        out.display()
    );
    Ok(())
}

/// Mel frames from either payload flag: a WAV run through the frontend
/// (after the token budget is checked against the model context) or a
/// precomputed tensor-container file.
fn resolve_audio(
    audio: Option<&Path>,
    features: Option<&Path>,
    model: &MultimodalModel,
    reserved_text: usize,
) -> Result<Option<Tensor>> {
    match (audio, features) {
        (Some(_), Some(_)) => Err(Error::Config(
            "--audio and --features are mutually exclusive".into(),
        )),
        (Some(wav), None) => {
            let samples = read_wav(wav)?;
            let duration_s = samples.len() as f64 / f64::from(SAMPLE_RATE);
            let context = model.config.decoder.max_context;
            let budget = audio_token_budget(duration_s, context, reserved_text)?;
            if !budget.fits {
                return Err(Error::Capacity(format!(
                    "{duration_s:.1} s of audio needs {} tokens, but the {context}-token \
                     context has {} left after text (limit {:.1} s)",
                    budget.tokens,
                    context.saturating_sub(reserved_text),
                    max_duration_s(context, reserved_text),
                )));
            }
            let feats = log_mel(&MelFrontendConfig::default(), &samples)?;
            Ok(Some(feats.frames))
        }
        (None, Some(path)) => {
            let mut tensors = load_tensors(path)?;
            let idx = tensors
                .iter()
                .position(|(name, _)| name == "frames")
                .or(if tensors.len() == 1 { Some(0) } else { None })
                .ok_or_else(|| {
                    Error::Data(format!(
                        "{} holds {} tensors and none is named \"frames\"",
                        path.display(),
                        tensors.len()
                    ))
                })?;
            Ok(Some(tensors.swap_remove(idx).1))
        }
        (None, None) => Ok(None),
    }
}

fn cmd_infer(a: InferArgs, file: FileConfig) -> Result<()> {
    let prompt = a
        .prompt
        .or(file.prompt)
        .ok_or_else(|| Error::Config("infer needs --prompt".into()))?;
    let image_paths = if a.image.is_empty() {
        file.image.unwrap_or_default()
    } else {
        a.image
    };
    let audio = a.audio.or(file.audio);
    let features = a.features.or(file.features);
    let model_dir = a.model_dir.or(file.model_dir);
    let max_new = a.max_new.or(file.max_new).unwrap_or(32);
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let out = a.out.or(file.out);

    let model = load_or_toy(model_dir.as_deref(), seed)?;
    let max_crops = a
        .max_crops
        .or(file.max_crops)
        .unwrap_or(model.config.vision.max_crops_sft);

    let images: Vec<Tensor> = image_paths
        .iter()
        .map(|p| load_image(p))
        .collect::<Result<_>>()?;
    let reserved_text = model.tokenizer.encode(&prompt).len() + 3;
    let frames = resolve_audio(audio.as_deref(), features.as_deref(), &model, reserved_text)?;

    let prepared = model.prepare_prompt(&prompt, &images, frames.as_ref(), max_crops)?;
    println!("routed adapters: [{}]", prepared.routed.join(", "));
    for (path, plan) in image_paths.iter().zip(&prepared.crop_plans) {
        println!(
            "{}: {}x{} grid, {} crop(s), resized to {}x{}{}",
            path.display(),
            plan.rows,
            plan.cols,
            plan.crop_count(),
            plan.resize_h,
            plan.resize_w,
            if plan.fallback_used { " (fallback)" } else { "" },
        );
    }
    let tokens = model.generate(&prepared, max_new)?;
    let text = model.tokenizer.decode(&tokens);
    println!("output: {text}");

    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        let record = serde_json::json!({
            "prompt": prompt,
            "routed": prepared.routed,
            "crop_plans": prepared.crop_plans,
            "tokens": tokens,
            "text": text,
        });
        std::fs::write(
            dir.join("generation.json"),
            serde_json::to_string_pretty(&record)?,
        )?;
        println!("wrote {}", dir.join("generation.json").display());
    }
    Ok(())
}

fn parse_dims(spec: &str) -> Result<(usize, usize)> {
    let (h, w) = spec
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Config(format!("--image wants HxW, got {spec:?}")))?;
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("--image wants HxW, got {spec:?}")))
    };
    Ok((parse(h)?, parse(w)?))
}

fn cmd_budget(a: BudgetArgs, file: FileConfig) -> Result<()> {
    let audio_seconds = a.audio_seconds.or(file.audio_seconds);
    let image = a.image.or(file.image_dims);
    let max_crops = a.max_crops.or(file.max_crops).unwrap_or(36);
    let context = a.context.or(file.context).unwrap_or(128_000);
    let reserved_text = a.reserved_text.or(file.reserved_text).unwrap_or(0);

    let mut planned = false;
    if let Some(secs) = audio_seconds {
        let b = audio_token_budget(secs, context, reserved_text)?;
        println!("audio {secs} s: {} frames -> {} tokens", b.frames, b.tokens);
        println!(
            "fits {context}-token context with {reserved_text} reserved: {}",
            if b.fits { "yes" } else { "no" }
        );
        let cap = max_duration_s(context, reserved_text);
        println!("longest duration at this context: {cap} s ({:.2} h)", cap / 3600.0);
        planned = true;
    }
    if let Some(spec) = image {
        let (h, w) = parse_dims(&spec)?;
        let c = VisionEncoderConfig::default().crop_size;
        let plan = plan_crops(h, w, c, max_crops)?;
        println!(
            "image {h}x{w}: {}x{} grid, {} crops of {c} px, resized to {}x{}{}",
            plan.rows,
            plan.cols,
            plan.crop_count(),
            plan.resize_h,
            plan.resize_w,
            if plan.fallback_used { " (fallback grid)" } else { "" },
        );
        planned = true;
    }
    if !planned {
        return Err(Error::Config(
            "budget needs --audio-seconds and/or --image HxW".into(),
        ));
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs, file: FileConfig) -> Result<()> {
    let task_name = a
        .task
        .or(file.task)
        .ok_or_else(|| Error::Config("eval needs --task".into()))?;
    let task: EvalTask = task_name.parse()?;
    let manifest_path = a
        .manifest
        .or(file.manifest)
        .ok_or_else(|| Error::Config("eval needs --manifest".into()))?;
    let out = a.out.or(file.out);
    let judge_url = a.judge_url.or(file.judge_url);
    let judge_key = a.judge_key.or(file.judge_key);
    let stub_judge = a.stub_judge.or(file.stub_judge);
    let max_in_flight = a.max_in_flight.or(file.max_in_flight).unwrap_or(8);

    let manifest = EvalManifest::from_jsonl(&manifest_path, task)?;
    let report: ScoreReport = match task {
        EvalTask::Asr => score_asr(&manifest)?,
        EvalTask::Ast => score_ast(&manifest)?,
        EvalTask::Au => score_choice(&manifest)?,
        EvalTask::Sqqa | EvalTask::Ssum => {
            let target = if let Some(reply) = stub_judge {
                JudgeTarget::Stub { reply }
            } else if let Some(url) = judge_url {
                JudgeTarget::Endpoint {
                    url,
                    api_key: judge_key,
                }
            } else {
                JudgeTarget::from_env().ok_or_else(|| {
                    Error::Config(format!(
                        "task {} is judge-scored: pass --judge-url/--stub-judge or set LORAMIX_JUDGE_URL",
                        task.name()
                    ))
                })?
            };
            let client = JudgeClient::new(max_in_flight);
            match task {
                EvalTask::Sqqa => score_sqqa(&manifest, &client, &target)?,
                _ => score_ssum(&manifest, &client, &target)?,
            }
        }
    };

    if let Some(path) = out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
        println!("wrote {}", path.display());
    }
    print!("{}", report.render_table());
    Ok(())
}
