//! The `flowlm` command line.
//!
//! Every subcommand resolves one effective [`RunConfig`] (file, then flags,
//! then seed), writes its outputs inside the output directory, and appends
//! one line to `manifest.jsonl` there.

use std::ffi::OsString;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Component, Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{load_flm, load_flowmap, read_checkpoint, save_flm, save_flowmap, ArtifactKind, Manifest};
use crate::config::{resolve_seed, RunConfig};
use crate::corpus::{read_sequences, write_sequences, Corpus, CorpusSpec};
use crate::denoiser_net::NetDenoiser;
use crate::error::{Error, Result};
use crate::eval::{bigram_tv, self_bleu, tv_to_truth, unigram_entropy, valid_rate, MetricReport};
use crate::flm_train::{train, training_warp, LossMode, TrainState};
use crate::flowmap::{run_stage1, run_stage2, FlowMapKind, FlowMapModel, Stage1State, Stage2State};
use crate::lang_repr::{TokenSequence, Vocabulary};
use crate::numerics::SeededRng;
use crate::sampler::{sample, Autoguided, DropoutDenoiser, SampleMode, SampleModel, WEAK_DROPOUT};
use crate::time_warp::{build_time_warp, decoding_error_rate};
use crate::toy_oracle::factorization_table;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CORPUS_FILE: &str = "corpus.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const FLM_FILE: &str = "flm.ckpt";
pub const STAGE1_FILE: &str = "flowmap_stage1.ckpt";
pub const STAGE2_FILE: &str = "flowmap_stage2.ckpt";

#[derive(Debug, Parser)]
#[command(name = "flowlm", version, about = "Flow language models over one-hot tokens and their distilled flow maps")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed (falls back to FLM_SEED, then the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; nothing is written outside it.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Worker cap. Computation is single-threaded, so this is recorded only.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate or ingest the corpus and write it with its vocabulary.
    PrepareData {
        /// Number of sequences to generate.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train the denoiser.
    TrainFlm {
        /// Sequence file (default: generate from the config).
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_parser = parse_enum::<LossMode>)]
        loss: Option<LossMode>,
        /// Train on uniform times with unwarped time features.
        #[arg(long)]
        no_warp: bool,
    },
    /// Distill a correction flow map from a trained denoiser.
    DistillStage1 {
        /// Denoiser checkpoint (default: flm.ckpt in the output directory).
        #[arg(long)]
        flm: Option<PathBuf>,
        #[arg(long, value_parser = parse_enum::<FlowMapKind>)]
        kind: Option<FlowMapKind>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Regress a single network onto a stage-1 flow map.
    DistillStage2 {
        /// Stage-1 checkpoint (default: flowmap_stage1.ckpt in the output directory).
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        flm: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Draw sequences from a denoiser or flow-map checkpoint.
    Sample {
        /// Checkpoint from train-flm or either distillation stage.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long)]
        steps: Option<usize>,
        /// Autoguidance scale (denoiser checkpoints only); 1 is unguided.
        #[arg(long)]
        eta: Option<f64>,
        /// Grid blend: 1 follows the decoding-error warp, 0 is uniform.
        #[arg(long)]
        alpha: Option<f64>,
        /// File name inside the output directory, or `-` for stdout.
        #[arg(long, default_value = "samples.txt")]
        out: String,
    },
    /// Score a samples file; one JSON metric per line.
    Eval {
        #[arg(long)]
        samples: PathBuf,
        /// Samples used for Self-BLEU, which is quadratic in the count.
        #[arg(long, default_value_t = 200)]
        bleu_samples: usize,
        #[arg(long, default_value = "-")]
        out: String,
    },
    /// The (t, P_e, tau) table as comma-separated text.
    TauTable {
        #[arg(long)]
        vocab: usize,
        #[arg(long, default_value = "-")]
        out: String,
    },
    /// Outcome frequencies of the exact flow versus the factorized baseline.
    DemoFactorization {
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 1024)]
        flow_steps: usize,
        /// Baseline steps for the many-step column (default: sequence length).
        #[arg(long)]
        many_steps: Option<usize>,
        #[arg(long, default_value = "-")]
        out: String,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::PrepareData { .. } => "prepare-data",
            Command::TrainFlm { .. } => "train-flm",
            Command::DistillStage1 { .. } => "distill-stage1",
            Command::DistillStage2 { .. } => "distill-stage2",
            Command::Sample { .. } => "sample",
            Command::Eval { .. } => "eval",
            Command::TauTable { .. } => "tau-table",
            Command::DemoFactorization { .. } => "demo-factorization",
        }
    }
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

/// Parses `argv` and runs it. Returns the process exit code: 0 on success,
/// 1 on a runtime error, 2 on a usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    subcommand: &'a str,
    config_hash: String,
    seed: u64,
    version: &'a str,
    threads: usize,
    wall_time_s: f64,
    outputs: Vec<String>,
}

/// Effective configuration and where outputs go.
struct Context {
    cfg: RunConfig,
    hash: String,
    out_dir: PathBuf,
    outputs: Vec<String>,
}

impl Context {
    /// Resolves an output name inside the output directory; `-` is stdout.
    fn output(&mut self, name: &str) -> Result<Option<PathBuf>> {
        if name == "-" {
            return Ok(None);
        }
        let p = Path::new(name);
        if p.is_absolute() || p.components().any(|c| !matches!(c, Component::Normal(_))) {
            return Err(Error::Config(format!("output {name:?} must be a plain path inside the output directory")));
        }
        std::fs::create_dir_all(&self.out_dir)?;
        self.outputs.push(name.to_string());
        Ok(Some(self.out_dir.join(p)))
    }

    fn writer(&mut self, name: &str) -> Result<Box<dyn Write>> {
        Ok(match self.output(name)? {
            Some(p) => Box::new(BufWriter::new(File::create(p)?)),
            None => Box::new(std::io::stdout().lock()),
        })
    }

    fn input(&self, given: Option<&PathBuf>, default: &str) -> PathBuf {
        given.cloned().unwrap_or_else(|| self.out_dir.join(default))
    }

    /// Corpus from a sequence file (vocabulary alongside it) or generated
    /// from the config.
    fn corpus(&self, path: Option<&PathBuf>) -> Result<Corpus> {
        match path {
            Some(p) => {
                let dir = p.parent().unwrap_or(Path::new("."));
                let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
                let sequences = read_sequences(p, &vocab)?;
                let seq_len = sequences.first().map(TokenSequence::len).ok_or_else(|| Error::Config(format!("{} is empty", p.display())))?;
                if sequences.iter().any(|s| s.len() != seq_len) {
                    return Err(Error::Shape(format!("{} mixes sequence lengths", p.display())));
                }
                Ok(Corpus { vocab, sequences, seq_len })
            }
            None => generate_corpus(&self.cfg),
        }
    }

    fn header(&self) -> String {
        format!("config_hash={}", self.hash)
    }
}

/// The corpus a config describes, drawn from a stream of its seed.
pub fn generate_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let mut rng = SeededRng::new(cfg.seed).fork(31);
    cfg.corpus.generate(&mut rng, cfg.corpus_size)
}

fn corpus_vocab(spec: &CorpusSpec) -> Result<Vocabulary> {
    Ok(spec.generate(&mut SeededRng::new(0), 1)?.vocab)
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = resolve_seed(common.seed, cfg.seed)?;
    let mut cfg = cfg.with_seed(seed);
    if let Some(d) = &common.out_dir {
        cfg.output_dir = d.clone();
    }
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, command: &Command) -> Result<()> {
    match command {
        Command::TrainFlm { steps, loss, no_warp, .. } => {
            if let Some(s) = steps {
                cfg.train.steps = *s;
            }
            if let Some(l) = loss {
                cfg.train.loss_mode = *l;
            }
            if *no_warp {
                cfg.train.use_time_warp = false;
                cfg.network.warp_time_features = false;
            }
        }
        Command::DistillStage1 { kind, steps, .. } => {
            if let Some(k) = kind {
                cfg.flowmap_kind = *k;
            }
            if let Some(s) = steps {
                cfg.distill.steps = *s;
            }
        }
        Command::DistillStage2 { steps: Some(s), .. } => cfg.distill.steps = *s,
        Command::Sample { steps, eta, alpha, .. } => {
            if let Some(s) = steps {
                cfg.sampler.steps = *s;
            }
            if let Some(e) = eta {
                cfg.sampler.eta = *e;
            }
            if let Some(a) = alpha {
                cfg.sampler.alpha = *a;
            }
        }
        Command::PrepareData { size: Some(n) } => cfg.corpus_size = *n,
        _ => {}
    }
    cfg.validate()
}

pub fn execute(cli: Cli) -> Result<()> {
    let start = Instant::now();
    let mut cfg = load_config(&cli.common)?;
    apply_overrides(&mut cfg, &cli.command)?;
    if cli.common.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    let mut ctx = Context {
        hash: cfg.hash(),
        out_dir: cfg.output_dir.clone(),
        cfg,
        outputs: Vec::new(),
    };
    log::info!("{} config_hash={} seed={}", cli.command.name(), ctx.hash, ctx.cfg.seed);
    match &cli.command {
        Command::PrepareData { .. } => prepare_data(&mut ctx)?,
        Command::TrainFlm { corpus, .. } => train_flm(&mut ctx, corpus.as_ref())?,
        Command::DistillStage1 { flm, corpus, .. } => distill_stage1(&mut ctx, flm.as_ref(), corpus.as_ref())?,
        Command::DistillStage2 { teacher, flm, corpus, .. } => distill_stage2(&mut ctx, teacher.as_ref(), flm.as_ref(), corpus.as_ref())?,
        Command::Sample { model, count, out, .. } => sample_cmd(&mut ctx, model, *count, out)?,
        Command::Eval { samples, bleu_samples, out } => eval_cmd(&mut ctx, samples, *bleu_samples, out)?,
        Command::TauTable { vocab, out } => tau_table(&mut ctx, *vocab, out)?,
        Command::DemoFactorization {
            samples,
            flow_steps,
            many_steps,
            out,
        } => demo_factorization(&mut ctx, *samples, *flow_steps, *many_steps, out)?,
    }
    let record = RunRecord {
        subcommand: cli.command.name(),
        config_hash: ctx.hash.clone(),
        seed: ctx.cfg.seed,
        version: env!("CARGO_PKG_VERSION"),
        threads: cli.common.threads,
        wall_time_s: start.elapsed().as_secs_f64(),
        outputs: ctx.outputs.clone(),
    };
    std::fs::create_dir_all(&ctx.out_dir)?;
    let mut f = OpenOptions::new().create(true).append(true).open(ctx.out_dir.join(MANIFEST_FILE))?;
    serde_json::to_writer(&mut f, &record)?;
    writeln!(f)?;
    Ok(())
}

fn prepare_data(ctx: &mut Context) -> Result<()> {
    let corpus = generate_corpus(&ctx.cfg)?;
    let header = ctx.header();
    let mut w = ctx.writer(CORPUS_FILE)?;
    write_sequences(&mut *w, &header, &corpus.vocab, &corpus.sequences)?;
    let vocab_path = ctx.output(VOCAB_FILE)?.expect("named output");
    corpus.vocab.save(&vocab_path)?;
    log::info!("{} sequences of length {}, |V| = {}", corpus.sequences.len(), corpus.seq_len, corpus.vocab.size());
    Ok(())
}

fn metrics_writer(ctx: &mut Context, name: &str) -> Result<Box<dyn Write>> {
    let hash = ctx.hash.clone();
    let mut w = ctx.writer(name)?;
    serde_json::to_writer(&mut w, &serde_json::json!({ "config_hash": hash }))?;
    writeln!(w)?;
    Ok(w)
}

fn train_flm(ctx: &mut Context, corpus: Option<&PathBuf>) -> Result<()> {
    let corpus = ctx.corpus(corpus)?;
    let mut net = ctx.cfg.network.clone();
    net.vocab_size = corpus.vocab.size();
    net.max_len = corpus.seq_len;
    let warp = training_warp(&ctx.cfg.train, net.vocab_size)?;
    let mut state = TrainState::new(net, ctx.cfg.train.clone())?;
    let mut metrics = metrics_writer(ctx, "train_metrics.jsonl")?;
    let trace = train(&mut state, &corpus.sequences, &warp, Some(&mut *metrics))?;
    metrics.flush()?;
    let flm = state.denoiser();
    let manifest = Manifest::flm(&flm, ctx.cfg.train.precision).with_vocab(&corpus.vocab).with_config_hash(&ctx.hash);
    let path = ctx.output(FLM_FILE)?.expect("named output");
    save_flm(&path, &flm, &manifest)?;
    if let Some(l) = trace.last() {
        log::info!("final loss {l:.5}");
    }
    Ok(())
}

fn flowmap_manifest(ctx: &Context, flm_manifest: &Manifest) -> Manifest {
    let mut m = flm_manifest.clone().with_config_hash(&ctx.hash);
    m.dtype = ctx.cfg.distill.precision;
    m
}

fn distill_stage1(ctx: &mut Context, flm: Option<&PathBuf>, corpus: Option<&PathBuf>) -> Result<()> {
    let (flm, fm) = load_flm(&ctx.input(flm, FLM_FILE))?;
    let corpus = ctx.corpus(corpus)?;
    let model = FlowMapModel::correction_from_flm(ctx.cfg.flowmap_kind, &flm)?;
    let warp = training_warp(&ctx.cfg.train, flm.net.config().vocab_size)?;
    let mut state = Stage1State::new(model, ctx.cfg.distill.clone())?;
    let mut metrics = metrics_writer(ctx, "stage1_metrics.jsonl")?;
    run_stage1(&mut state, &corpus.sequences, &warp, Some(&mut *metrics))?;
    metrics.flush()?;
    let manifest = flowmap_manifest(ctx, &fm);
    let path = ctx.output(STAGE1_FILE)?.expect("named output");
    save_flowmap(&path, &state.model, Some(&flm), &manifest)
}

fn distill_stage2(ctx: &mut Context, teacher: Option<&PathBuf>, flm: Option<&PathBuf>, corpus: Option<&PathBuf>) -> Result<()> {
    let (teacher, _) = load_flowmap(&ctx.input(teacher, STAGE1_FILE))?;
    let (flm, fm) = load_flm(&ctx.input(flm, FLM_FILE))?;
    let corpus = ctx.corpus(corpus)?;
    let student = FlowMapModel::single_from_flm(&flm)?;
    let warp = training_warp(&ctx.cfg.train, flm.net.config().vocab_size)?;
    let mut state = Stage2State::new(student, teacher, ctx.cfg.distill.clone())?;
    let mut metrics = metrics_writer(ctx, "stage2_metrics.jsonl")?;
    run_stage2(&mut state, &corpus.sequences, &warp, Some(&mut *metrics))?;
    metrics.flush()?;
    let manifest = flowmap_manifest(ctx, &fm);
    let path = ctx.output(STAGE2_FILE)?.expect("named output");
    save_flowmap(&path, &state.student, None, &manifest)
}

fn sample_cmd(ctx: &mut Context, model: &Path, count: usize, out: &str) -> Result<()> {
    if count == 0 {
        return Err(Error::Config("--count must be positive".into()));
    }
    let (manifest, _) = read_checkpoint(model)?;
    let vocab = manifest.vocab.clone().map_or_else(|| Vocabulary::numbered(manifest.network.vocab_size), Ok)?;
    let mut run = ctx.cfg.sampler.clone();
    let warp = if manifest.network.warp_time_features {
        build_time_warp(manifest.network.vocab_size)?
    } else {
        crate::time_warp::TimeWarp::identity()
    };
    let set = match manifest.kind {
        ArtifactKind::Flm => {
            let (flm, _) = load_flm(model)?;
            run.mode = SampleMode::Euler;
            if run.eta == 1.0 {
                sample(SampleModel::Denoiser(&flm), &run, &warp, count)?
            } else {
                let weak = weak_model(&flm, run.seed)?;
                let guided = Autoguided {
                    strong: &flm,
                    weak: &weak,
                    eta: run.eta,
                };
                sample(SampleModel::Denoiser(&guided), &run, &warp, count)?
            }
        }
        ArtifactKind::FlowMap => {
            if run.eta != 1.0 {
                return Err(Error::Config("autoguidance applies to denoiser checkpoints only".into()));
            }
            let (map, _) = load_flowmap(model)?;
            run.mode = SampleMode::Flowmap;
            sample(SampleModel::FlowMap(&map), &run, &warp, count)?
        }
    };
    let header = format!("{} model={} steps={} eta={}", ctx.header(), model.file_name().unwrap_or_default().to_string_lossy(), run.steps, run.eta);
    let mut w = ctx.writer(out)?;
    write_sequences(&mut *w, &header, &vocab, &set.sequences)
}

fn weak_model(flm: &NetDenoiser, seed: u64) -> Result<DropoutDenoiser> {
    DropoutDenoiser::new(flm, WEAK_DROPOUT, SeededRng::new(seed).fork(51).next_u64())
}

fn eval_cmd(ctx: &mut Context, samples: &Path, bleu_samples: usize, out: &str) -> Result<()> {
    let vocab = corpus_vocab(&ctx.cfg.corpus)?;
    let seqs = read_sequences(samples, &vocab)?;
    if seqs.is_empty() {
        return Err(Error::Config(format!("{} holds no samples", samples.display())));
    }
    let n = seqs.len();
    let h = ctx.hash.clone();
    let mut reports = vec![MetricReport::new("unigram_entropy", unigram_entropy(&seqs)?, n, &h)?];
    if n >= 2 {
        let k = bleu_samples.clamp(2, n);
        let sb = self_bleu(&seqs[..k], 4)?;
        reports.push(MetricReport::new(&format!("self_bleu_{}", sb.order), sb.value, k, &h)?);
    }
    match &ctx.cfg.corpus {
        CorpusSpec::ToyModes { .. } => {
            let spec = ctx.cfg.corpus.toy_spec()?;
            reports.push(MetricReport::new("tv_to_truth", tv_to_truth(&seqs, &spec)?, n, &h)?);
            reports.push(MetricReport::new("valid_rate", valid_rate(&seqs, &spec), n, &h)?);
        }
        CorpusSpec::MarkovGrammar { seq_len, .. } => {
            let truth = ctx.cfg.corpus.markov_chain()?.bigram_truth(*seq_len)?;
            reports.push(MetricReport::new("bigram_tv", bigram_tv(&seqs, &truth)?, n, &h)?);
        }
        CorpusSpec::TextFile { .. } => {}
    }
    let mut w = ctx.writer(out)?;
    for r in &reports {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn tau_table(ctx: &mut Context, vocab: usize, out: &str) -> Result<()> {
    let warp = build_time_warp(vocab)?;
    let (ts, taus) = warp.table();
    let mut w = ctx.writer(out)?;
    writeln!(w, "t,p_e,tau")?;
    for (&t, &tau) in ts.iter().zip(taus) {
        writeln!(w, "{t},{},{tau}", decoding_error_rate(t, vocab)?)?;
    }
    w.flush()?;
    Ok(())
}

fn demo_factorization(ctx: &mut Context, samples: usize, flow_steps: usize, many_steps: Option<usize>, out: &str) -> Result<()> {
    let spec = ctx.cfg.corpus.toy_spec()?;
    let many = many_steps.unwrap_or(spec.seq_len);
    let rows = factorization_table(&spec, samples, flow_steps, many, ctx.cfg.seed)?;
    let mut w = ctx.writer(out)?;
    writeln!(w, "outcome,flow,baseline_1_step,baseline_{many}_step")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", spec.vocab.render(&r.outcome), r.flow, r.baseline_one_step, r.baseline_many_step)?;
    }
    w.flush()?;
    Ok(())
}
