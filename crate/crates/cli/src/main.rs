//! `streetscape` command-line tool.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use streetscape::conditioning::parse_prompt;
use streetscape::control::{train_controlnet, ControlNet};
use streetscape::corpus::{decode_mask_png_lenient, read_manifest, write_corpus, write_rgb_png, write_seg_png, Split};
use streetscape::ddpm::{train_base, Denoiser, TrainSample};
use streetscape::features::{train_feature_net, FeatureNet, FeatureSample};
use streetscape::harness::{corpus_hash, mask_iou, realize, run_plan, ExperimentPlan};
use streetscape::nn::Checkpoint;
use streetscape::pano::{explode_panorama_sized, load_panorama, CROP_SIZE};
use streetscape::pipeline::{feature_sample, seg_sample, train_sample, GenRequest, Models};
use streetscape::scene::{synth_corpus, CorpusItem};
use streetscape::seg::{evaluate_segmenter, train_segmenter, SegSample, Segmenter};
use streetscape::taxonomy::{Class, Palette};

use config::Settings;

#[derive(Parser, Debug)]
#[command(name = "streetscape", version, about = "Controllable streetscape generation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Master seed; overrides the config file and reseeds every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML file deep-merged onto the desk defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output location for the command (defaults under the workdir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root for default corpus, checkpoint and run directories.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesise a labelled corpus (default out: <workdir>/corpus).
    Synth {
        /// Number of scenes.
        #[arg(long)]
        n: Option<usize>,
        /// Square image size in pixels.
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Cut equirectangular panoramas into eight perspective crops each
    /// (default out: <workdir>/crops).
    Explode {
        #[arg(required = true)]
        panoramas: Vec<PathBuf>,
        /// Side of each square crop.
        #[arg(long, default_value_t = CROP_SIZE)]
        size: u32,
    },
    /// Train the base denoiser (writes base.ckpt; default out: <workdir>/ckpt).
    TrainBase {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Train the control branch on a frozen base (writes control.ckpt).
    TrainControl {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Train the segmenter and the feature network (writes segmenter.ckpt
    /// and features.ckpt).
    TrainSeg {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generate images from a prompt (default out: <workdir>/generated).
    Generate {
        /// Prompt in the fixed template.
        #[arg(long)]
        prompt: String,
        /// Optional road-mask PNG; selects the controlled model.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Images to generate, with seeds `seed`, `seed + 1`, ...
        #[arg(long, default_value_t = 1)]
        n: usize,
        /// Checkpoint directory (default: <workdir>/ckpt).
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Baseline evaluation on the held-out split (default out:
    /// <workdir>/runs/evaluate).
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        /// Evaluate only the first N held-out records.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run an experiment plan (default out: <workdir>/runs/<name>).
    Experiment {
        plan: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Serve the HTTP API.
    Serve {
        /// Overrides `STUDIO_PORT` and the config file.
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        host: Option<String>,
        /// Overrides `STUDIO_CKPT_DIR` and the config file.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Corpus directory (default: <workdir>/corpus).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Checkpoint directory (default: <workdir>/ckpt).
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

impl DataArgs {
    fn corpus_dir(&self, c: &Common) -> PathBuf {
        self.corpus.clone().unwrap_or_else(|| c.workdir.join("corpus"))
    }

    fn ckpt_dir(&self, c: &Common) -> PathBuf {
        self.ckpt.clone().unwrap_or_else(|| c.workdir.join("ckpt"))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut settings = config::resolve(cli.common.config.as_deref(), cli.common.seed)?;
    apply_flags(&mut settings, &cli.command)?;
    println!("resolved config:\n{}", toml::to_string(&settings).context("rendering config")?);
    let c = &cli.common;
    match &cli.command {
        Command::Synth { .. } => synth(&settings, c),
        Command::Explode { panoramas, size } => explode(panoramas, *size, c),
        Command::TrainBase { data, .. } => train_base_cmd(&settings, data, c),
        Command::TrainControl { data, .. } => train_control_cmd(&settings, data, c),
        Command::TrainSeg { data, .. } => train_seg_cmd(&settings, data, c),
        Command::Generate { prompt, mask, n, ckpt } => {
            let ckpt = ckpt.clone().unwrap_or_else(|| c.workdir.join("ckpt"));
            generate(&settings, prompt, mask.as_deref(), *n, &ckpt, c)
        }
        Command::Evaluate { data, limit } => evaluate(&settings, data, *limit, c),
        Command::Experiment { plan, data } => experiment(&settings, plan, data, c),
        Command::Serve { .. } => serve(&settings),
    }
}

/// Command flags take precedence over the merged file and defaults.
fn apply_flags(s: &mut Settings, cmd: &Command) -> Result<()> {
    let p = &mut s.pipeline;
    match cmd {
        Command::Synth { n, resolution } => {
            if let Some(n) = n {
                p.corpus.n = *n;
            }
            if let Some(r) = resolution {
                p.corpus.resolution = *r;
                p.denoiser.resolution = *r;
            }
        }
        Command::TrainBase { epochs, lr, .. } => {
            if let Some(e) = epochs {
                p.base_train.epochs = *e;
            }
            if let Some(lr) = lr {
                p.base_train.lr = *lr;
            }
        }
        Command::TrainControl { epochs, lr, .. } => {
            if let Some(e) = epochs {
                p.control_train.epochs = *e;
            }
            if let Some(lr) = lr {
                p.control_train.lr = *lr;
            }
        }
        Command::TrainSeg { epochs: Some(e), .. } => p.seg_train.epochs = *e,
        Command::Serve { port, host, ckpt } => {
            s.service = s.service.clone().apply_env(|k| std::env::var(k).ok())?;
            if let Some(port) = port {
                s.service.port = *port;
            }
            if let Some(h) = host {
                s.service.host = h.clone();
            }
            if let Some(c) = ckpt {
                s.service.ckpt_dir = c.clone();
            }
        }
        _ => {}
    }
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn synth(s: &Settings, c: &Common) -> Result<()> {
    let out = c.out.clone().unwrap_or_else(|| c.workdir.join("corpus"));
    let items = synth_corpus(&s.pipeline.corpus)?;
    let created = format!("streetscape {} seed {}", env!("CARGO_PKG_VERSION"), s.pipeline.corpus.seed);
    let manifest = write_corpus(&items, &out, &created)?;
    let hash = corpus_hash(&items);
    println!("wrote {} records to {}", manifest.records.len(), out.display());
    println!("corpus hash {hash}");
    Ok(())
}

fn explode(panoramas: &[PathBuf], size: u32, c: &Common) -> Result<()> {
    let out = c.out.clone().unwrap_or_else(|| c.workdir.join("crops"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    for path in panoramas {
        let pano = load_panorama(path)?;
        let id = path.file_stem().and_then(|s| s.to_str()).context("panorama path has no file name")?;
        for crop in explode_panorama_sized(&pano, size)? {
            write_rgb_png(&out.join(crop.file_name(id)), &crop.image)?;
        }
        println!("{}: 8 crops", path.display());
    }
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<Vec<CorpusItem>> {
    let manifest = read_manifest(&dir.join("manifest.jsonl")).with_context(|| format!("loading corpus at {}", dir.display()))?;
    Ok(manifest.load_items()?)
}

fn split(items: &[CorpusItem], which: Split) -> Vec<&CorpusItem> {
    items.iter().filter(|i| i.split == which).collect()
}

fn train_base_cmd(s: &Settings, data: &DataArgs, c: &Common) -> Result<()> {
    let out = c.out.clone().unwrap_or_else(|| data.ckpt_dir(c));
    let items = load_corpus(&data.corpus_dir(c))?;
    let samples: Vec<TrainSample> = split(&items, Split::Train).into_iter().map(|i| train_sample(i, false)).collect();
    let p = &s.pipeline;
    let mut den = p.denoiser.clone();
    den.resolution = first_resolution(&items)?;
    let mut model = Denoiser::init(den, p.schedule.clone(), p.base_train.seed);
    let log = train_base(&mut model, &samples, &p.base_train, |_, _, _| Ok(()))?;
    std::fs::create_dir_all(&out)?;
    model.to_checkpoint().save(&out.join("base.ckpt"))?;
    write_json(&out.join("base_log.json"), &serde_json::to_value(&log)?)?;
    println!("base checkpoint {} (weights {})", out.join("base.ckpt").display(), model.weights_hash());
    Ok(())
}

fn first_resolution(items: &[CorpusItem]) -> Result<usize> {
    let first = items.first().context("corpus is empty")?;
    Ok(first.record.image.width() as usize)
}

fn train_control_cmd(s: &Settings, data: &DataArgs, c: &Common) -> Result<()> {
    let ckpt = data.ckpt_dir(c);
    let out = c.out.clone().unwrap_or_else(|| ckpt.clone());
    let base = Denoiser::from_checkpoint(Checkpoint::load(&ckpt.join("base.ckpt"))?)?;
    let items = load_corpus(&data.corpus_dir(c))?;
    let samples: Vec<TrainSample> = split(&items, Split::Train).into_iter().map(|i| train_sample(i, true)).collect();
    let mut control = ControlNet::init(base);
    let before = control.base_hash();
    let log = train_controlnet(&mut control, &samples, &s.pipeline.control_train, |_, _, _| Ok(()))?;
    if control.base_hash() != before {
        bail!("base weights changed during control training");
    }
    std::fs::create_dir_all(&out)?;
    control.to_checkpoint().save(&out.join("control.ckpt"))?;
    write_json(&out.join("control_log.json"), &serde_json::to_value(&log)?)?;
    println!("control checkpoint {} (base weights {before} unchanged)", out.join("control.ckpt").display());
    Ok(())
}

fn train_seg_cmd(s: &Settings, data: &DataArgs, c: &Common) -> Result<()> {
    let out = c.out.clone().unwrap_or_else(|| data.ckpt_dir(c));
    let items = load_corpus(&data.corpus_dir(c))?;
    let train = split(&items, Split::Train);
    let test = split(&items, Split::Test);
    let p = &s.pipeline;

    let seg_train: Vec<SegSample> = train.iter().map(|i| seg_sample(i)).collect();
    let mut seg = Segmenter::init(p.segmenter.clone(), p.seg_train.seed);
    let seg_log = train_segmenter(&mut seg, &seg_train, &p.seg_train, |_, _, _| {})?;
    let seg_test: Vec<SegSample> = test.iter().map(|i| seg_sample(i)).collect();
    let miou = if seg_test.is_empty() { None } else { Some(evaluate_segmenter(&seg, &seg_test, 16)?.miou()) };

    let feat: Vec<FeatureSample> = train.iter().map(|i| feature_sample(i)).collect();
    let mut features = FeatureNet::init(p.features.clone(), p.feature_train.seed);
    let feat_log = train_feature_net(&mut features, &feat, &p.feature_train)?;

    std::fs::create_dir_all(&out)?;
    seg.to_checkpoint().save(&out.join("segmenter.ckpt"))?;
    features.to_checkpoint().save(&out.join("features.ckpt"))?;
    write_json(&out.join("seg_log.json"), &json!({"segmenter": seg_log, "features": feat_log, "heldout_miou": miou}))?;
    match miou {
        Some(m) => println!("segmenter held-out mIoU {m:.4}"),
        None => println!("no held-out records; mIoU not computed"),
    }
    Ok(())
}

fn load_models(dir: &Path) -> Result<Models> {
    Models::load(dir).with_context(|| format!("loading checkpoints from {}", dir.display()))
}

fn generate(s: &Settings, prompt: &str, mask: Option<&Path>, n: usize, ckpt: &Path, c: &Common) -> Result<()> {
    if n == 0 {
        bail!("--n must be at least 1");
    }
    let out = c.out.clone().unwrap_or_else(|| c.workdir.join("generated"));
    let spec = parse_prompt(prompt)?;
    spec.validate()?;
    let models = load_models(ckpt)?;
    let mask = match mask {
        Some(path) => {
            let bytes = std::fs::read(path).with_context(|| format!("reading mask {}", path.display()))?;
            let m = decode_mask_png_lenient(&bytes, &path.display().to_string())?;
            let res = models.resolution();
            if (m.width, m.height) != (res, res) {
                bail!("mask is {}x{} but the model generates {res}x{res}", m.width, m.height);
            }
            Some(m)
        }
        None => None,
    };
    let reqs: Vec<GenRequest> = (0..n as u64)
        .map(|i| GenRequest { spec, mask: mask.clone(), seed: s.seed.wrapping_add(i) })
        .collect();
    let images = models.generate(&reqs, 8)?;
    let realized = realize(&models, &images)?;
    std::fs::create_dir_all(&out)?;
    let palette = Palette::standard();
    let mut records = Vec::new();
    for (i, (img, (seg, props))) in images.iter().zip(&realized).enumerate() {
        let name = format!("gen_{i:03}");
        write_rgb_png(&out.join(format!("{name}.png")), img)?;
        write_seg_png(&out.join(format!("{name}_seg.png")), seg, &palette)?;
        let props: serde_json::Map<String, serde_json::Value> =
            Class::LISTED.iter().zip(props).map(|(c, v)| (c.name().to_string(), json!(v))).collect();
        let iou = match &mask {
            Some(m) => Some(mask_iou(seg, m)?),
            None => None,
        };
        records.push(json!({"image": format!("{name}.png"), "seed": reqs[i].seed, "realized_proportions": props, "road_iou_vs_mask": iou}));
    }
    write_json(&out.join("generated.json"), &json!({"prompt": prompt, "model_hashes": models.hashes(), "images": records}))?;
    println!("wrote {n} images to {}", out.display());
    Ok(())
}

fn evaluate(s: &Settings, data: &DataArgs, limit: Option<usize>, c: &Common) -> Result<()> {
    let out = c.out.clone().unwrap_or_else(|| c.workdir.join("runs").join("evaluate"));
    let plan = ExperimentPlan::parse(&format!(
        "name = \"evaluate\"\nseed = {}\n[experiment]\nkind = \"baseline\"\n{}",
        s.seed,
        limit.map(|l| format!("limit = {l}\n")).unwrap_or_default()
    ))?;
    run_and_emit(&plan, data, &out, c)
}

fn experiment(_s: &Settings, plan_path: &Path, data: &DataArgs, c: &Common) -> Result<()> {
    let mut plan = ExperimentPlan::load(plan_path)?;
    if let Some(seed) = c.seed {
        plan.seed = seed;
    }
    let out = c.out.clone().unwrap_or_else(|| c.workdir.join("runs").join(&plan.name));
    run_and_emit(&plan, data, &out, c)
}

fn run_and_emit(plan: &ExperimentPlan, data: &DataArgs, out: &Path, c: &Common) -> Result<()> {
    let models = load_models(&data.ckpt_dir(c))?;
    let items = load_corpus(&data.corpus_dir(c))?;
    let output = run_plan(plan, &models, &items)?;
    for path in output.emit(out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn serve(s: &Settings) -> Result<()> {
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(streetscape_service::serve(s.service.clone()))?;
    Ok(())
}
