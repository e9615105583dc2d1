use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use signflow_core::backtranslate::BackTranslator;
use signflow_core::checkpoint::{load_backtranslator, load_checkpoint, read_manifest, save_backtranslator, save_checkpoint};
use signflow_core::data::{Corpus, Normalizer};
use signflow_core::evaluate::{bt_pairs, condition_for, corpus_mean_baseline, evaluate_run, shuffled_motif_baseline};
use signflow_core::manifest::{load_corpus, write_corpus};
use signflow_core::render::{render_svg_frames, RenderStyle};
use signflow_core::seqfile::{read_sequence, write_sequence};
use signflow_core::train::{log_line, train_model, LOG_HEADER};
use signflow_core::{Config, GenerationConfig, Modality, SignModel};

#[derive(Parser)]
#[command(name = "signflow", version, about = "Synthetic sign production: corpus, training, generation, evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a corpus directory.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train the generator with the full objective.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Drop the embedding-consistency term.
        #[arg(long)]
        no_ecl: bool,
        /// Save the EMA shadow as the working weights.
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        ema: bool,
    },
    /// Train the back-translator used by `eval`.
    TrainBt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generate one sequence from a corpus sample's text or audio.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        sample: usize,
        #[arg(long, value_enum, default_value_t = Mode::Text)]
        modality: Mode,
        #[arg(long)]
        averaged: Option<usize>,
        /// Also write one SVG per frame.
        #[arg(long)]
        svg: bool,
    },
    /// Score generations on a split; prints key=value lines.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        bt: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long, value_enum, default_value_t = Mode::Text)]
        modality: Mode,
        #[arg(long)]
        averaged: Option<usize>,
        /// Evaluate at most this many samples of the split.
        #[arg(long)]
        limit: Option<usize>,
        /// Also score the corpus-mean and shuffled-motif baselines.
        #[arg(long)]
        baselines: bool,
    },
    /// Summarize a checkpoint, sequence file or corpus directory.
    Inspect { path: PathBuf },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Text,
    Audio,
}

impl From<Mode> for Modality {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Text => Modality::Text,
            Mode::Audio => Modality::Audio,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Dev,
    Test,
}

fn base_config(path: Option<&Path>) -> Result<Config> {
    Ok(match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    })
}

fn require_out(c: &Common) -> Result<&Path> {
    c.out.as_deref().context("--out is required for this command")
}

/// Training config: `--config` if given, with the data section taken from
/// the corpus so the model matches the data it is trained on.
fn training_config(common: &Common, corpus_cfg: &Config) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => corpus_cfg.clone(),
    };
    cfg.data = corpus_cfg.data.clone();
    Ok(cfg)
}

fn synth(common: &Common) -> Result<()> {
    let mut cfg = base_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.data.seed = s;
    }
    cfg.validate()?;
    let out = require_out(common)?;
    let corpus = Corpus::generate(&cfg)?;
    write_corpus(&cfg, &corpus, out)?;
    println!(
        "wrote {} samples (train {}, dev {}, test {}) to {}",
        corpus.samples.len(),
        corpus.split.train.len(),
        corpus.split.dev.len(),
        corpus.split.test.len(),
        out.display()
    );
    Ok(())
}

fn train(common: &Common, corpus_dir: &Path, epochs: Option<usize>, steps: Option<usize>, no_ecl: bool, ema: bool) -> Result<()> {
    let out = require_out(common)?;
    let (corpus_cfg, corpus) = load_corpus(corpus_dir)?;
    let mut cfg = training_config(common, &corpus_cfg)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(h) = steps {
        cfg.diffusion.steps = h;
    }
    if no_ecl {
        cfg.ecl.lambda_ecl = 0.0;
    }
    cfg.validate()?;
    let model = SignModel::new(&cfg, cfg.train.seed)?;
    println!("{LOG_HEADER}");
    let trainer = train_model(&corpus, model, |r, wall| println!("{}", log_line(r, wall)))?;
    let manifest = save_checkpoint(&trainer, ema, out)?;
    println!("saved {} tensors to {}", manifest.entries.len(), out.display());
    Ok(())
}

fn train_bt(common: &Common, corpus_dir: &Path, epochs: Option<usize>) -> Result<()> {
    let out = require_out(common)?;
    let (corpus_cfg, corpus) = load_corpus(corpus_dir)?;
    let mut cfg = training_config(common, &corpus_cfg)?;
    if let Some(e) = epochs {
        cfg.eval.bt_epochs = e;
    }
    cfg.validate()?;
    let seed = common.seed.unwrap_or(cfg.train.seed);
    let norm = Normalizer::fit(corpus.train_samples().map(|s| &s.sign))?;
    let mut bt = BackTranslator::new(&cfg, seed)?;
    let train = bt_pairs(&corpus, &norm, &corpus.split.train);
    let start = Instant::now();
    bt.fit(&train, seed, |e, l| println!("epoch {e}\tloss {l:.6}\twall_secs {:.1}", start.elapsed().as_secs_f64()))?;
    let dev = bt_pairs(&corpus, &norm, &corpus.split.dev);
    println!("train_exact_accuracy={}", bt.exact_accuracy(&train)?);
    println!("dev_exact_accuracy={}", bt.exact_accuracy(&dev)?);
    save_backtranslator(&bt, out)?;
    println!("saved back-translator to {}", out.display());
    Ok(())
}

fn gen_config(cfg: &Config, seed: Option<u64>, averaged: Option<usize>) -> GenerationConfig {
    let mut g = GenerationConfig::from_config(cfg);
    if let Some(s) = seed {
        g.seed = s;
    }
    if let Some(n) = averaged {
        g.num_averaged = n;
    }
    g
}

#[allow(clippy::too_many_arguments)]
fn generate(common: &Common, ckpt: &Path, corpus_dir: &Path, sample: usize, m: Mode, averaged: Option<usize>, svg: bool) -> Result<()> {
    let out = require_out(common)?;
    let loaded = load_checkpoint(ckpt, None)?;
    let (_, corpus) = load_corpus(corpus_dir)?;
    if sample >= corpus.samples.len() {
        bail!("sample {sample} does not exist (corpus has {})", corpus.samples.len());
    }
    let model = &loaded.trainer.model;
    let store = loaded.weights()?;
    let gen = gen_config(&model.cfg, common.seed, averaged);
    if gen.num_averaged == 0 {
        bail!("--averaged must be at least 1");
    }
    let m: Modality = m.into();
    let route = match (m, corpus.get(sample).audio.is_some()) {
        (Modality::Text, _) => "text",
        (Modality::Audio, true) => "audio",
        (Modality::Audio, false) => "pseudo-audio",
    };
    let cond = condition_for(model, &store, &corpus, sample, m)?;
    let seq = model.generate_averaged(&store, &cond, m, None, &gen)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let norm = model.normalizer(&store);
    let path = out.join("sequence.sgsq");
    write_sequence(&norm.invert(&seq), &path)?;
    println!("condition={route}");
    println!("frames={}", seq.frames());
    println!("sequence={}", path.display());
    if svg {
        let style = RenderStyle::for_joints(seq.joints());
        let files = render_svg_frames(&seq, &norm, &style, &out.join("frames"))?;
        println!("svg_frames={}", files.len());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    common: &Common,
    ckpt: &Path,
    corpus_dir: &Path,
    bt: Option<&Path>,
    split: Split,
    m: Mode,
    averaged: Option<usize>,
    limit: Option<usize>,
    baselines: bool,
) -> Result<()> {
    let loaded = load_checkpoint(ckpt, None)?;
    let (_, corpus) = load_corpus(corpus_dir)?;
    let bt = bt.map(load_backtranslator).transpose()?;
    let model = &loaded.trainer.model;
    let store = loaded.weights()?;
    let gen = gen_config(&model.cfg, common.seed, averaged);
    let mut ids = match split {
        Split::Train => corpus.split.train.clone(),
        Split::Dev => corpus.split.dev.clone(),
        Split::Test => corpus.split.test.clone(),
    };
    if let Some(n) = limit {
        ids.truncate(n);
    }
    let report = evaluate_run(model, &store, &corpus, &ids, bt.as_ref(), &gen, m.into())?;
    let mut text = report.to_lines();
    if baselines {
        let norm = model.normalizer(&store);
        let mean = corpus_mean_baseline(&corpus, &norm, &ids, bt.as_ref())?;
        let shuffled = shuffled_motif_baseline(&corpus, &norm, &ids, bt.as_ref(), gen.seed)?;
        for (name, r) in [("corpus_mean", mean), ("shuffled_motif", shuffled)] {
            for line in r.to_lines().lines() {
                text.push_str(&format!("baseline.{name}.{line}\n"));
            }
        }
    }
    match &common.out {
        Some(p) => std::fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    if path.is_dir() {
        let (cfg, corpus) = load_corpus(path)?;
        println!("kind=corpus");
        println!("samples={}", corpus.samples.len());
        println!("train={}", corpus.split.train.len());
        println!("dev={}", corpus.split.dev.len());
        println!("test={}", corpus.split.test.len());
        println!("audio_missing={}", corpus.samples.iter().filter(|s| s.audio.is_none()).count());
        println!("vocab_size={}", cfg.data.vocab_size);
        return Ok(());
    }
    let head = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if head.starts_with(b"SGSQ1") {
        let s = read_sequence(path)?;
        println!("kind=sequence");
        println!("frames={}", s.frames());
        println!("joints={}", s.joints());
        println!("coords={}", s.coords());
        println!("frame_rate={}", s.frame_rate);
        return Ok(());
    }
    let m = read_manifest(path)?;
    let params: usize = m
        .entries
        .iter()
        .filter(|e| e.group == "param")
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    println!("kind={}", m.kind);
    println!("version={}", m.version);
    println!("epoch={}", m.epoch);
    println!("adam_step={}", m.adam_step);
    println!("ema={}", m.ema);
    println!("entries={}", m.entries.len());
    println!("parameters={params}");
    println!("steps={}", m.config.diffusion.steps);
    println!("dim={}", m.config.model.dim);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { common } => synth(&common),
        Cmd::Train { common, corpus, epochs, steps, no_ecl, ema } => train(&common, &corpus, epochs, steps, no_ecl, ema),
        Cmd::TrainBt { common, corpus, epochs } => train_bt(&common, &corpus, epochs),
        Cmd::Generate { common, ckpt, corpus, sample, modality, averaged, svg } => {
            generate(&common, &ckpt, &corpus, sample, modality, averaged, svg)
        }
        Cmd::Eval { common, ckpt, corpus, bt, split, modality, averaged, limit, baselines } => {
            eval(&common, &ckpt, &corpus, bt.as_deref(), split, modality, averaged, limit, baselines)
        }
        Cmd::Inspect { path } => inspect(&path),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg: Vec<String> = e.chain().map(ToString::to_string).collect();
            eprintln!("error: {}", msg.join(": "));
            ExitCode::FAILURE
        }
    }
}
