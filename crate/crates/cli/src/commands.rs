//! Subcommands, registered by name behind one trait.

use std::path::{Path, PathBuf};

use clap::{ArgMatches, Args, FromArgMatches};
use serde::Serialize;

use pixelfuse::config::{thread_budget, RunConfig};
use pixelfuse::data::export::write_dataset;
use pixelfuse::data::{rasterize, sample_batch, Image, Scene, Stage};
use pixelfuse::eval::{
    ablation_report, attention_dump, caption_loss, compositional_accuracy, generation_eval, ratio_sweep,
    reconstruction_eval, vqa_accuracy, write_heatmaps,
};
use pixelfuse::imageio::{read_ppm, write_ppm};
use pixelfuse::model::Model;
use pixelfuse::plot::{line_chart, Series};
use pixelfuse::sample::{answer, edit, generate};
use pixelfuse::tensor::{DType, Real};
use pixelfuse::train::config::fixed_scenes;
use pixelfuse::train::gradcheck::joint_loss_gradcheck;
use pixelfuse::train::metrics::{moving_average, read_metrics, write_metrics};
use pixelfuse::train::{load_checkpoint, peek_header, run_stage, stage_name, Checkpoint, Corpus, RunOptions};
use pixelfuse::{Error, Stream};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed: max relative error {0:.3e}")]
    GradcheckFailed(f64),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "usage",
            CliError::GradcheckFailed(_) => "gradcheck_failed",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// A named pipeline step.
pub trait Subcommand {
    fn name(&self) -> &'static str;
    fn command(&self) -> clap::Command;
    fn run(&self, matches: &ArgMatches) -> Result<()>;
}

/// Flags every subcommand takes.
#[derive(Args, Debug)]
pub struct Common {
    /// TOML run config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set pretrain.lr=0.0005`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seeds every random stream of the run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Common {
    fn context(&self) -> Result<Context> {
        let mut cfg = RunConfig::load(self.config.as_deref(), &self.overrides)?;
        cfg.set_seed(self.seed);
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let snapshot = self.out.join("config.toml");
        std::fs::write(&snapshot, cfg.to_toml()?).map_err(|e| Error::io(&snapshot, e))?;
        Ok(Context {
            cfg,
            out: self.out.clone(),
        })
    }
}

#[derive(Args, Debug)]
struct WithCommon<A: Args> {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    args: A,
}

/// Adapts a typed handler to [`Subcommand`].
struct Cmd<A> {
    name: &'static str,
    about: &'static str,
    handler: fn(&Context, A) -> Result<()>,
}

impl<A: Args + FromArgMatches> Subcommand for Cmd<A> {
    fn name(&self) -> &'static str {
        self.name
    }

    fn command(&self) -> clap::Command {
        WithCommon::<A>::augment_args(clap::Command::new(self.name))
            .about(self.about)
            .after_long_help(config_help())
    }

    fn run(&self, matches: &ArgMatches) -> Result<()> {
        let parsed = WithCommon::<A>::from_arg_matches(matches).map_err(|e| CliError::Usage(e.to_string()))?;
        let ctx = parsed.common.context()?;
        (self.handler)(&ctx, parsed.args)
    }
}

fn cmd<A: Args + FromArgMatches + 'static>(
    name: &'static str,
    about: &'static str,
    handler: fn(&Context, A) -> Result<()>,
) -> Box<dyn Subcommand> {
    Box::new(Cmd { name, about, handler })
}

pub fn registry() -> Vec<Box<dyn Subcommand>> {
    vec![
        cmd(
            "gen-data",
            "Write a synthetic dataset (manifest + PPM images)",
            gen_data,
        ),
        cmd("pretrain", "Stage 1: joint pretraining with masking", |c, a| {
            train(c, a, Stage::Pretrain)
        }),
        cmd("sft", "Stage 2: supervised finetuning", |c, a| train(c, a, Stage::Sft)),
        cmd("recon-finetune", "Finetune on image reconstruction", |c, a| {
            train(c, a, Stage::ReconFinetune)
        }),
        cmd("sample", "Text-to-image from a checkpoint", sample),
        cmd("edit", "Edit an image following an instruction", edit_cmd),
        cmd("answer", "Answer a question about an image", answer_cmd),
        cmd(
            "eval",
            "Caption loss, VQA, compositional and reconstruction scores",
            eval_cmd,
        ),
        cmd(
            "ablate-masking",
            "Masked vs unmasked branches from a shared checkpoint",
            ablate,
        ),
        cmd("ratio-sweep", "Train once per generation/understanding ratio", sweep),
        cmd("attn-dump", "Keyword-to-image attention heatmaps", attn_dump),
        cmd("gradcheck", "Finite-difference check of the joint loss", gradcheck),
        cmd("plot", "Render metrics CSV columns as an SVG line chart", plot),
    ]
}

pub fn config_help() -> String {
    let mut s = String::from("Config keys and defaults (set in --config TOML or with --set):\n");
    for k in RunConfig::documented_keys() {
        s += "  ";
        s += &k;
        s += "\n";
    }
    s
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn corpus(ctx: &Context) -> Result<Corpus> {
    Ok(ctx.cfg.corpus.build()?)
}

/// Finite scenes for evaluation: the corpus list, or a seeded sample of a
/// procedural corpus.
fn eval_scenes(ctx: &Context, corpus: &Corpus) -> Vec<Scene> {
    match corpus.scenes() {
        Some(s) => s.to_vec(),
        None => fixed_scenes(ctx.cfg.corpus.n_scenes, ctx.cfg.corpus.max_objects, ctx.cfg.corpus.seed),
    }
}

fn limit(scenes: Vec<Scene>, n: usize) -> Vec<Scene> {
    if n == 0 {
        scenes
    } else {
        scenes.into_iter().take(n).collect()
    }
}

/// Runs `f` with the checkpoint at `path` loaded in its stored precision.
macro_rules! with_checkpoint {
    ($path:expr, |$ck:ident| $body:expr) => {{
        let path: &Path = $path;
        match peek_header(path)?.model.dtype {
            DType::F32 => {
                let $ck: Checkpoint<f32> = load_checkpoint(path)?;
                $body
            }
            DType::F64 => {
                let $ck: Checkpoint<f64> = load_checkpoint(path)?;
                $body
            }
        }
    }};
}

fn check_model<T: Real>(ctx: &Context, ck: &Checkpoint<T>) -> Result<()> {
    ck.check_config(&ctx.cfg.model)?;
    Ok(())
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Records to write.
    #[arg(long, default_value_t = 64)]
    records: usize,
    /// Stage whose mixture to draw from: pretrain, sft or recon_finetune.
    #[arg(long, default_value = "pretrain")]
    stage: String,
}

fn parse_stage(s: &str) -> Result<Stage> {
    match s {
        "pretrain" => Ok(Stage::Pretrain),
        "sft" => Ok(Stage::Sft),
        "recon_finetune" | "recon-finetune" => Ok(Stage::ReconFinetune),
        other => Err(CliError::Usage(format!("unknown stage `{other}`"))),
    }
}

fn gen_data(ctx: &Context, a: GenDataArgs) -> Result<()> {
    let stage = parse_stage(&a.stage)?;
    let tc = ctx.cfg.stage(stage);
    let corpus = corpus(ctx)?;
    let stream = Stream::new(tc.seed).fork_named("gen-data");
    let records = sample_batch(&tc.mixture, stage, a.records, &corpus.source, &tc.data, &stream);
    write_dataset(&ctx.out, &records)?;
    println!("wrote {} records to {}", records.len(), ctx.out.display());
    Ok(())
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Checkpoint to start from: required for sft and recon-finetune; a
    /// pretrain checkpoint resumes pretraining.
    #[arg(long)]
    init: Option<PathBuf>,
}

fn train(ctx: &Context, a: TrainArgs, stage: Stage) -> Result<()> {
    fn go<T: Real>(ctx: &Context, stage: Stage, init: Option<Checkpoint<T>>) -> Result<()> {
        let corpus = corpus(ctx)?;
        let opts = RunOptions {
            until: None,
            out_dir: Some(&ctx.out),
        };
        let out = run_stage(&ctx.cfg.model, ctx.cfg.stage(stage), &corpus, init, opts)?;
        let last = out.metrics.last();
        println!(
            "{} finished at step {}: total {} -> {}",
            stage_name(stage),
            out.checkpoint.step,
            last.map_or("n/a".into(), |r| format!("{:.4}", r.total)),
            ctx.out.join("final.pxfu").display()
        );
        Ok(())
    }
    match (&a.init, ctx.cfg.model.dtype) {
        (Some(p), _) => with_checkpoint!(p, |ck| {
            check_model(ctx, &ck)?;
            go(ctx, stage, Some(ck))
        }),
        (None, DType::F32) => go::<f32>(ctx, stage, None),
        (None, DType::F64) => go::<f64>(ctx, stage, None),
    }
}

#[derive(Serialize)]
struct Sidecar<'a, E: Serialize> {
    checkpoint: &'a Path,
    run: &'a pixelfuse::sample::SampleRunConfig,
    #[serde(flatten)]
    extra: E,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    prompt: String,
    /// Base name of the PPM and JSON outputs.
    #[arg(long, default_value = "sample")]
    name: String,
}

fn sample(ctx: &Context, a: SampleArgs) -> Result<()> {
    let img = with_checkpoint!(&a.ckpt, |ck| {
        check_model(ctx, &ck)?;
        let m = Model::new(&ck.model, &ck.params)?;
        generate(&m, &a.prompt, &ctx.cfg.sample)?
    });
    let ppm = ctx.out.join(format!("{}.ppm", a.name));
    write_ppm(&ppm, &img)?;
    #[derive(Serialize)]
    struct Extra<'a> {
        prompt: &'a str,
        image: String,
    }
    let extra = Extra {
        prompt: &a.prompt,
        image: format!("{}.ppm", a.name),
    };
    write_json(
        &ctx.out.join(format!("{}.json", a.name)),
        &Sidecar {
            checkpoint: &a.ckpt,
            run: &ctx.cfg.sample,
            extra,
        },
    )?;
    println!("{}", ppm.display());
    Ok(())
}

#[derive(Args, Debug)]
struct EditArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Source image (PPM).
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    instruction: String,
    #[arg(long, default_value = "edit")]
    name: String,
}

fn edit_cmd(ctx: &Context, a: EditArgs) -> Result<()> {
    let src = read_ppm(&a.source)?;
    let img = with_checkpoint!(&a.ckpt, |ck| {
        check_model(ctx, &ck)?;
        let m = Model::new(&ck.model, &ck.params)?;
        edit(&m, &src, &a.instruction, &ctx.cfg.sample)?
    });
    let ppm = ctx.out.join(format!("{}.ppm", a.name));
    write_ppm(&ppm, &img)?;
    #[derive(Serialize)]
    struct Extra<'a> {
        source: &'a Path,
        instruction: &'a str,
        image: String,
    }
    let extra = Extra {
        source: &a.source,
        instruction: &a.instruction,
        image: format!("{}.ppm", a.name),
    };
    write_json(
        &ctx.out.join(format!("{}.json", a.name)),
        &Sidecar {
            checkpoint: &a.ckpt,
            run: &ctx.cfg.sample,
            extra,
        },
    )?;
    println!("{}", ppm.display());
    Ok(())
}

#[derive(Args, Debug)]
struct AnswerArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Image (PPM).
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    question: String,
    #[arg(long, default_value_t = 24)]
    max_tokens: usize,
}

fn answer_cmd(ctx: &Context, a: AnswerArgs) -> Result<()> {
    let img = read_ppm(&a.image)?;
    let text = with_checkpoint!(&a.ckpt, |ck| {
        check_model(ctx, &ck)?;
        let m = Model::new(&ck.model, &ck.params)?;
        answer(&m, &img, &a.question, a.max_tokens)?
    });
    #[derive(Serialize)]
    struct Out<'a> {
        checkpoint: &'a Path,
        image: &'a Path,
        question: &'a str,
        answer: &'a str,
    }
    write_json(
        &ctx.out.join("answer.json"),
        &Out {
            checkpoint: &a.ckpt,
            image: &a.image,
            question: &a.question,
            answer: &text,
        },
    )?;
    println!("{text}");
    Ok(())
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Evaluate at most this many scenes per split; 0 means all.
    #[arg(long, default_value_t = 0)]
    limit: usize,
}

#[derive(Serialize)]
struct EvalSummary {
    train_scenes: usize,
    held_out_scenes: usize,
    caption_ce: f64,
    vqa_accuracy: f64,
    compositional_accuracy_train: f64,
    compositional_accuracy_held_out: Option<f64>,
    mean_generation_psnr_train: f64,
    reconstruction_psnr: f64,
    reconstruction_ssim: f64,
}

fn eval_cmd(ctx: &Context, a: EvalArgs) -> Result<()> {
    let corpus = corpus(ctx)?;
    let train = limit(eval_scenes(ctx, &corpus), a.limit);
    let held = limit(corpus.held_out.clone(), a.limit);
    let run = &ctx.cfg.sample;
    let summary = with_checkpoint!(&a.ckpt, |ck| {
        check_model(ctx, &ck)?;
        let m = Model::new(&ck.model, &ck.params)?;
        let gen_train = generation_eval(&m, &train, run)?;
        let held_acc = if held.is_empty() {
            None
        } else {
            Some(compositional_accuracy(&generation_eval(&m, &held, run)?))
        };
        let (rp, rs) = reconstruction_eval(&m, &train, run)?;
        EvalSummary {
            train_scenes: train.len(),
            held_out_scenes: held.len(),
            caption_ce: caption_loss(&m, &train)?,
            vqa_accuracy: vqa_accuracy(&m, &train)?,
            compositional_accuracy_train: compositional_accuracy(&gen_train),
            compositional_accuracy_held_out: held_acc,
            mean_generation_psnr_train: gen_train.iter().map(|r| r.psnr).sum::<f64>() / gen_train.len().max(1) as f64,
            reconstruction_psnr: rp,
            reconstruction_ssim: rs,
        }
    });
    write_json(&ctx.out.join("eval.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary).map_err(Error::from)?);
    Ok(())
}

#[derive(Args, Debug)]
struct NoArgs {}

fn ablate(ctx: &Context, _: NoArgs) -> Result<()> {
    let corpus = corpus(ctx)?;
    let train = eval_scenes(ctx, &corpus);
    let gen = if corpus.held_out.is_empty() {
        train.clone()
    } else {
        corpus.held_out.clone()
    };
    let r = ablation_report(
        &ctx.cfg.model,
        &ctx.cfg.pretrain,
        &ctx.cfg.sft,
        &corpus,
        &train,
        &gen,
        &ctx.cfg.ablation,
    )?;
    let table = r.to_table();
    for (name, body) in [("ablation.txt", table.clone()), ("ablation.csv", r.to_csv())] {
        let p = ctx.out.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    write_json(&ctx.out.join("ablation.json"), &r)?;
    print!("{table}");
    Ok(())
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Comma-separated ratios, e.g. `8g2u,7g3u,5g5u,3g7u`; overrides sweep.ratios.
    #[arg(long)]
    ratios: Option<String>,
}

fn sweep(ctx: &Context, a: SweepArgs) -> Result<()> {
    let mut cfg = ctx.cfg.clone();
    if let Some(r) = &a.ratios {
        cfg.sweep.ratios = r.split(',').map(|s| s.trim().to_string()).collect();
    }
    let mixtures = cfg.mixtures()?;
    let corpus = corpus(ctx)?;
    let results = ratio_sweep(
        &cfg.model,
        &cfg.pretrain,
        &corpus,
        &mixtures,
        cfg.sweep.window,
        thread_budget(cfg.sweep.threads),
    )?;
    let mut summary = String::from("ratio,final_ce,final_mse\n");
    for r in &results {
        write_metrics(&ctx.out.join(format!("metrics_{}.csv", r.ratio)), &r.metrics)?;
        summary += &format!("{},{},{}\n", r.ratio, r.final_ce, r.final_mse);
    }
    let p = ctx.out.join("sweep.csv");
    std::fs::write(&p, &summary).map_err(|e| Error::io(&p, e))?;
    let files: Vec<PathBuf> = results
        .iter()
        .map(|r| ctx.out.join(format!("metrics_{}.csv", r.ratio)))
        .collect();
    for column in ["flow_x_mse", "flow_mse_loss", "ce_loss"] {
        let svg = chart(&files, column, cfg.sweep.window)?;
        let p = ctx.out.join(format!("sweep_{column}.svg"));
        std::fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
    }
    print!("{summary}");
    Ok(())
}

fn column(row: &pixelfuse::train::MetricRow, name: &str) -> Result<Option<f64>> {
    Ok(match name {
        "ce_loss" => row.ce_loss,
        "flow_mse_loss" => row.flow_mse_loss,
        "flow_x_mse" => row.flow_x_mse,
        "total" => Some(row.total),
        "masking_active_fraction" => Some(row.masking_active_fraction),
        other => return Err(CliError::Usage(format!("cannot plot column `{other}`"))),
    })
}

fn chart(files: &[PathBuf], col: &str, smooth: usize) -> Result<String> {
    let mut series = Vec::new();
    for f in files {
        let rows = read_metrics(f)?;
        let mut steps = Vec::new();
        let mut values = Vec::new();
        for r in &rows {
            if let Some(v) = column(r, col)? {
                steps.push(r.step as f64);
                values.push(v);
            }
        }
        let smoothed = moving_average(&values, smooth);
        series.push(Series {
            name: f.file_stem().map_or("run".into(), |s| {
                s.to_string_lossy().trim_start_matches("metrics_").to_string()
            }),
            points: steps.into_iter().zip(smoothed).collect(),
        });
    }
    let title = if smooth > 1 {
        format!("{col} (moving average {smooth})")
    } else {
        col.to_string()
    };
    Ok(line_chart(&title, "step", col, &series))
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Metrics CSV files, one line each.
    #[arg(long, required = true, num_args = 1..)]
    metrics: Vec<PathBuf>,
    #[arg(long, default_value = "total")]
    column: String,
    /// Moving-average window.
    #[arg(long, default_value_t = 1)]
    smooth: usize,
    #[arg(long, default_value = "plot.svg")]
    name: String,
}

fn plot(ctx: &Context, a: PlotArgs) -> Result<()> {
    let svg = chart(&a.metrics, &a.column, a.smooth)?;
    let p = ctx.out.join(&a.name);
    std::fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
    println!("{}", p.display());
    Ok(())
}

#[derive(Args, Debug)]
struct AttnArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Image (PPM); alternatively `--scene`.
    #[arg(long, conflicts_with = "scene")]
    image: Option<PathBuf>,
    /// Canonical caption of a scene to rasterise as the image.
    #[arg(long)]
    scene: Option<String>,
    #[arg(long)]
    prompt: String,
    #[arg(long)]
    keyword: String,
}

fn attn_dump(ctx: &Context, a: AttnArgs) -> Result<()> {
    let size = ctx.cfg.model.image_size;
    let img: Image = match (&a.image, &a.scene) {
        (Some(p), _) => read_ppm(p)?,
        (None, Some(caption)) => rasterize(&pixelfuse::data::parse_caption(caption)?, size, size),
        (None, None) => return Err(CliError::Usage("attn-dump needs --image or --scene".into())),
    };
    let side = ctx.cfg.model.grid().rows();
    let maps = with_checkpoint!(&a.ckpt, |ck| {
        check_model(ctx, &ck)?;
        let m = Model::new(&ck.model, &ck.params)?;
        attention_dump(&m, &img, &a.prompt, &a.keyword)?
    });
    let paths = write_heatmaps(&ctx.out, &maps, side, size)?;
    write_json(&ctx.out.join("attention.json"), &maps)?;
    println!("wrote {} heatmaps to {}", paths.len(), ctx.out.display());
    Ok(())
}

fn gradcheck(ctx: &Context, _: NoArgs) -> Result<()> {
    let report = joint_loss_gradcheck(ctx.cfg.pretrain.seed)?;
    println!("{report}");
    if report.pass {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(report.max_rel_err))
    }
}
