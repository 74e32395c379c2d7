//! Command-line front end: `vismem <subcommand>`.
//!
//! Settings come from an optional TOML file, then command-line flags. All
//! randomness derives from `--seed` through [`derive_seed`] with the streams
//! in [`seed_streams`].

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::corpus::{
    generate_synthetic_with, load_dataset, write_dataset, Dataset, Split, SyntheticConfig,
};
use crate::eval::{corpus_bleu, human_consistency, perplexity_of, MetricReport, MetricRow};
use crate::inference::{
    activation_trace, generate_all, mean, rank_tables, Combination, Direction, GenConfig,
    LengthHistogram, Protocol, RetrievalOptions, ScoreMode, ScoreTables, TextNorm,
};
use crate::model::{ModelDims, ModelParams, ReconLoss, Variant};
use crate::numkit::{derive_seed, SeededRng, DEFAULT_SIGMOID_CLIP};
use crate::training::{grad_check, small_gradcheck_setup, train, TrainConfig};

/// Stream ids fed to [`derive_seed`] for each component.
pub mod seed_streams {
    pub const CORPUS: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const GENERATION: u64 = 4;
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub attrs: usize,
    pub examples: usize,
    pub captions_per_example: usize,
    /// Word classes; defaults to ⌈√|V|⌉.
    pub class_count: Option<usize>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            attrs: 8,
            examples: 500,
            captions_per_example: 5,
            class_count: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    pub s_dim: usize,
    pub u_dim: usize,
    pub maxent_order: usize,
    /// MaxEnt table size is `2^maxent_hash_bits`.
    pub maxent_hash_bits: u32,
    pub recon_loss: ReconLoss,
    pub sigmoid_clip: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            s_dim: 32,
            u_dim: 32,
            maxent_order: 3,
            maxent_hash_bits: 16,
            recon_loss: ReconLoss::CrossEntropy,
            sigmoid_clip: DEFAULT_SIGMOID_CLIP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub mode: ScoreMode,
    pub direction: Direction,
    pub protocol: Protocol,
    pub combination: Combination,
    pub text_norm: TextNorm,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            mode: ScoreMode::Combined,
            direction: Direction::Image,
            protocol: Protocol::PerSentence,
            combination: Combination::default(),
            text_norm: TextNorm::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for parallel evaluation; 0 uses all cores.
    pub workers: usize,
    /// Split used by generate, eval, retrieve and trace.
    pub split: Split,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub gen: GenConfig,
    pub retrieval: RetrievalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            workers: 0,
            split: Split::Test,
            corpus: CorpusSection::default(),
            model: ModelSection::default(),
            train: TrainConfig {
                max_epochs: 15,
                ..TrainConfig::default()
            },
            gen: GenConfig::default(),
            retrieval: RetrievalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).context("invalid config")
    }

    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("in {}", p.display()))
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn stream_seed(&self, stream: u64) -> u64 {
        derive_seed(self.seed, stream)
    }

    fn resolve_seeds(&mut self) {
        self.train.seed = self.stream_seed(seed_streams::SHUFFLE);
        self.gen.seed = self.stream_seed(seed_streams::GENERATION);
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "vismem",
    version,
    about = "Captioning language model with a recurrent visual memory"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true, value_parser = parse_split)]
    pub split: Option<Split>,
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse::<Split>().map_err(|e| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> Result<ScoreMode, String> {
    s.parse::<ScoreMode>().map_err(|e| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic attribute dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Generate one caption per image of a split.
    Generate(GenerateArgs),
    /// Image or sentence retrieval on a split.
    Retrieve(RetrieveArgs),
    /// Perplexity and BLEU report.
    Eval(EvalArgs),
    /// Export hidden activations for one caption.
    Trace(TraceArgs),
    /// Compare analytic and finite-difference gradients on a small model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub attrs: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Per-epoch metrics; defaults to `<out>.metrics.tsv`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub s_dim: Option<usize>,
    #[arg(long)]
    pub u_dim: Option<usize>,
    #[arg(long)]
    pub bptt: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub candidates: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DirectionArg {
    Image,
    Sentence,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProtocolArg {
    PerSentence,
    Concatenated,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `t`, `i` or `t+i`.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<ScoreMode>,
    #[arg(long, value_enum)]
    pub direction: Option<DirectionArg>,
    #[arg(long, value_enum)]
    pub protocol: Option<ProtocolArg>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// TSV report path.
    #[arg(long)]
    pub out: PathBuf,
    /// Also score each human caption against the others.
    #[arg(long)]
    pub human: bool,
    #[arg(long)]
    pub candidates: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Example id; defaults to the first example of the split.
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub caption: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Only `small` is available.
    #[arg(long, default_value = "small")]
    pub dims: String,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
}

/// Applies the global flags and the subcommand's flags on top of `cfg`.
pub fn apply_overrides(cfg: &mut RunConfig, global: &GlobalArgs, command: &Command) {
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(w) = global.workers {
        cfg.workers = w;
    }
    if let Some(s) = global.split {
        cfg.split = s;
    }
    match command {
        Command::Synth(a) => {
            if let Some(x) = a.attrs {
                cfg.corpus.attrs = x;
            }
            if let Some(x) = a.n {
                cfg.corpus.examples = x;
            }
        }
        Command::Train(a) => {
            if let Some(x) = a.variant {
                cfg.model.variant = x;
            }
            if let Some(x) = a.epochs {
                cfg.train.max_epochs = x;
            }
            if let Some(x) = a.lr {
                cfg.train.learning_rate = x;
            }
            if let Some(x) = a.lambda {
                cfg.train.lambda_recon = x;
            }
            if let Some(x) = a.s_dim {
                cfg.model.s_dim = x;
            }
            if let Some(x) = a.u_dim {
                cfg.model.u_dim = x;
            }
            if let Some(x) = a.bptt {
                cfg.train.bptt_unroll = x;
            }
            if let Some(x) = a.classes {
                cfg.corpus.class_count = Some(x);
            }
        }
        Command::Generate(GenerateArgs { candidates, .. })
        | Command::Eval(EvalArgs { candidates, .. }) => {
            if let Some(x) = candidates {
                cfg.gen.candidate_count = *x;
            }
        }
        Command::Retrieve(a) => {
            if let Some(x) = a.mode {
                cfg.retrieval.mode = x;
            }
            if let Some(x) = a.direction {
                cfg.retrieval.direction = match x {
                    DirectionArg::Image => Direction::Image,
                    DirectionArg::Sentence => Direction::Sentence,
                };
            }
            if let Some(x) = a.protocol {
                cfg.retrieval.protocol = match x {
                    ProtocolArg::PerSentence => Protocol::PerSentence,
                    ProtocolArg::Concatenated => Protocol::Concatenated,
                };
            }
        }
        Command::Trace(_) => {}
        Command::Gradcheck(a) => {
            if let Some(x) = a.variant {
                cfg.model.variant = x;
            }
        }
    }
    cfg.resolve_seeds();
}

/// Parses `args`, runs the subcommand and maps failures to a nonzero exit.
pub fn main_from_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let mut cfg = RunConfig::load(cli.global.config.as_deref())?;
    apply_overrides(&mut cfg, &cli.global, &cli.command);
    log::info!("resolved config:\n{}", cfg.to_toml());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()?;
    pool.install(|| match &cli.command {
        Command::Synth(a) => synth(&cfg, a),
        Command::Train(a) => train_cmd(&cfg, a),
        Command::Generate(a) => generate_cmd(&cfg, a),
        Command::Retrieve(a) => retrieve_cmd(&cfg, a),
        Command::Eval(a) => eval_cmd(&cfg, a),
        Command::Trace(a) => trace_cmd(&cfg, a),
        Command::Gradcheck(a) => gradcheck_cmd(&cfg, a),
    })
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            bail!("output directory {} does not exist", p.display())
        }
        _ => Ok(()),
    }
}

fn synth(cfg: &RunConfig, a: &SynthArgs) -> anyhow::Result<ExitCode> {
    ensure_parent(&a.out)?;
    let sc = SyntheticConfig {
        captions_per_example: cfg.corpus.captions_per_example,
        ..SyntheticConfig::new(cfg.corpus.attrs, cfg.corpus.examples)
    };
    let data = generate_synthetic_with(
        &sc,
        &mut SeededRng::new(cfg.stream_seed(seed_streams::CORPUS)),
    )?;
    write_dataset(&a.out, &data)?;
    log::info!(
        "wrote {} examples to {}",
        data.examples.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn model_dims(cfg: &RunConfig, data: &Dataset) -> anyhow::Result<ModelDims> {
    if cfg.model.maxent_hash_bits > 40 {
        bail!("maxent_hash_bits must be at most 40");
    }
    let dims = ModelDims {
        s_dim: cfg.model.s_dim,
        u_dim: cfg.model.u_dim,
        maxent_order: cfg.model.maxent_order,
        maxent_hash_size: 1usize << cfg.model.maxent_hash_bits,
        recon_loss: cfg.model.recon_loss,
        sigmoid_clip: cfg.model.sigmoid_clip,
        ..ModelDims::new(data.vocab.classes(), data.feature_dim, cfg.model.variant)
    };
    dims.validate()?;
    Ok(dims)
}

fn train_cmd(cfg: &RunConfig, a: &TrainArgs) -> anyhow::Result<ExitCode> {
    let data = load_dataset(&a.data, None, cfg.corpus.class_count)?;
    let dims = model_dims(cfg, &data)?;
    cfg.train.validate()?;
    let metrics = a.metrics.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".metrics.tsv");
        PathBuf::from(p)
    });
    ensure_parent(&a.out)?;
    ensure_parent(&metrics)?;
    if data.split(Split::Valid).next().is_none() {
        bail!("dataset has no validation examples");
    }

    let init_seed = cfg.stream_seed(seed_streams::INIT);
    let params = ModelParams::init(dims, data.vocab.classes(), &mut SeededRng::new(init_seed))?;
    log::info!(
        "training {} with {} parameters",
        cfg.model.variant,
        params.parameter_count()
    );
    let (params, history) = train(params, &data, &cfg.train)?;

    let meta = CheckpointMeta {
        lambda_recon: cfg.train.lambda_recon,
        seeds: [
            ("run".to_string(), cfg.seed),
            ("init".to_string(), init_seed),
            ("shuffle".to_string(), cfg.train.seed),
        ]
        .into_iter()
        .collect(),
        length_counts: data.train_length_counts(),
    };
    let ck = Checkpoint::new(params, data.vocab.clone(), meta)?;
    let mut log_text = Vec::new();
    history.write_log(&mut log_text)?;
    ck.save(&a.out)?;
    fs::write(&metrics, log_text)?;
    log::info!(
        "best epoch {}; wrote {}",
        history.best_epoch,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

struct Loaded {
    ck: Checkpoint,
    data: Dataset,
}

fn load_pair(data: &Path, model: &Path) -> anyhow::Result<Loaded> {
    let ck = Checkpoint::load(model).with_context(|| format!("loading {}", model.display()))?;
    let data = load_dataset(data, Some(ck.vocab.clone()), None)?;
    let dims = ck.params.dims();
    if dims.uses_visual() && data.feature_dim != dims.v_dim {
        bail!(
            "dataset features have dim {}, model expects {}",
            data.feature_dim,
            dims.v_dim
        );
    }
    Ok(Loaded { ck, data })
}

fn gen_config(cfg: &RunConfig, ck: &Checkpoint) -> GenConfig {
    GenConfig {
        lambda_recon: ck.meta.lambda_recon,
        ..cfg.gen.clone()
    }
}

fn generate_cmd(cfg: &RunConfig, a: &GenerateArgs) -> anyhow::Result<ExitCode> {
    let Loaded { ck, data } = load_pair(&a.data, &a.model)?;
    ensure_parent(&a.out)?;
    let gen = gen_config(cfg, &ck);
    gen.validate()?;
    let hist = LengthHistogram::from_counts(&ck.meta.length_counts)?;
    let examples = data.split_vec(cfg.split);
    if examples.is_empty() {
        bail!("split {:?} is empty", cfg.split);
    }
    let feats: Vec<&[f64]> = examples.iter().map(|e| e.features.values()).collect();
    let out = generate_all(&ck.params, &ck.vocab, &feats, &hist, &gen)?;
    let mut text = String::from("id\tscore\tcaption\n");
    for (e, g) in examples.iter().zip(&out) {
        text.push_str(&format!(
            "{}\t{:.6}\t{}\n",
            e.id,
            g.score,
            g.sentence.tokens.join(" ")
        ));
    }
    fs::write(&a.out, text)?;
    log::info!("wrote {} generations to {}", out.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn retrieve_cmd(cfg: &RunConfig, a: &RetrieveArgs) -> anyhow::Result<ExitCode> {
    let Loaded { ck, data } = load_pair(&a.data, &a.model)?;
    ensure_parent(&a.out)?;
    let r = &cfg.retrieval;
    if r.mode != ScoreMode::Text && !ck.params.dims().has_memory() {
        bail!("{} scoring needs the full variant", r.mode);
    }
    let images = data.split_vec(cfg.split);
    if images.is_empty() {
        bail!("split {:?} is empty", cfg.split);
    }
    let tables = ScoreTables::compute(&ck.params, &images, r.protocol)?;
    let opts = RetrievalOptions {
        mode: r.mode,
        direction: r.direction,
        combination: r.combination,
        text_norm: r.text_norm,
    };
    let res = rank_tables(&tables, &opts)?;
    let tsv = format!(
        "mode\tdirection\tqueries\tr@1\tr@5\tr@10\tmedian_rank\tmean_rank\n{}\t{:?}\t{}\t{:.2}\t{:.2}\t{:.2}\t{}\t{:.4}\n",
        r.mode,
        r.direction,
        res.ranks.len(),
        res.recall_at_1,
        res.recall_at_5,
        res.recall_at_10,
        res.median_rank,
        res.mean_rank
    );
    print!("{tsv}");
    fs::write(&a.out, tsv)?;
    Ok(ExitCode::SUCCESS)
}

fn eval_cmd(cfg: &RunConfig, a: &EvalArgs) -> anyhow::Result<ExitCode> {
    if a.model.is_none() && !a.human {
        bail!("nothing to evaluate: pass --model and/or --human");
    }
    let (ck, data) = match &a.model {
        Some(m) => {
            let l = load_pair(&a.data, m)?;
            (Some(l.ck), l.data)
        }
        None => (None, load_dataset(&a.data, None, cfg.corpus.class_count)?),
    };
    ensure_parent(&a.out)?;
    let examples = data.split_vec(cfg.split);
    if examples.is_empty() {
        bail!("split {:?} is empty", cfg.split);
    }
    let refs_of = |i: usize| -> Vec<Vec<String>> {
        examples[i]
            .captions
            .iter()
            .map(|c| c.tokens.clone())
            .collect()
    };

    let mut report = MetricReport::default();
    if let Some(ck) = &ck {
        let gen = gen_config(cfg, ck);
        gen.validate()?;
        let hist = LengthHistogram::from_counts(&ck.meta.length_counts)?;
        let ppl = perplexity_of(&ck.params, &examples)?;
        let feats: Vec<&[f64]> = examples.iter().map(|e| e.features.values()).collect();
        let out = generate_all(&ck.params, &ck.vocab, &feats, &hist, &gen)?;
        let pairs: Vec<(Vec<String>, Vec<Vec<String>>)> = out
            .iter()
            .enumerate()
            .map(|(i, g)| (g.sentence.tokens.clone(), refs_of(i)))
            .collect();
        report.rows.push(MetricRow {
            model: ck.params.dims().variant.to_string(),
            perplexity: Some(ppl),
            bleu: corpus_bleu(&pairs)?,
        });
    }
    if a.human {
        let sets: Vec<Vec<Vec<String>>> = (0..examples.len()).map(refs_of).collect();
        report.rows.push(MetricRow {
            model: "human".into(),
            perplexity: None,
            bleu: human_consistency(&sets)?,
        });
    }
    print!("{}", report.to_table());
    fs::write(&a.out, report.to_tsv())?;
    Ok(ExitCode::SUCCESS)
}

fn trace_cmd(cfg: &RunConfig, a: &TraceArgs) -> anyhow::Result<ExitCode> {
    let Loaded { ck, data } = load_pair(&a.data, &a.model)?;
    ensure_parent(&a.out)?;
    let example = match &a.id {
        Some(id) => data
            .example(id)
            .with_context(|| format!("no example with id {id}"))?,
        None => data
            .split(cfg.split)
            .next()
            .with_context(|| format!("split {:?} is empty", cfg.split))?,
    };
    let sent = example
        .captions
        .get(a.caption)
        .with_context(|| format!("example {} has no caption {}", example.id, a.caption))?;
    let trace = activation_trace(&ck.params, &ck.vocab, example.features.values(), sent)?;
    fs::write(&a.out, trace.to_tsv())?;
    println!(
        "mean step change: s {:.6} u {:.6}",
        mean(&trace.s_stability()),
        mean(&trace.u_stability())
    );
    Ok(ExitCode::SUCCESS)
}

fn gradcheck_cmd(cfg: &RunConfig, a: &GradcheckArgs) -> anyhow::Result<ExitCode> {
    if a.dims != "small" {
        bail!("unknown --dims {:?}; only \"small\" is available", a.dims);
    }
    let variants = match a.variant {
        Some(v) => vec![v],
        None => vec![Variant::Rnn, Variant::RnnIf, Variant::Full],
    };
    let mut worst: f64 = 0.0;
    for v in variants {
        let s = small_gradcheck_setup(v, cfg.stream_seed(seed_streams::INIT))?;
        let r = grad_check(
            &s.params,
            &s.features,
            &s.sentence,
            cfg.train.lambda_recon,
            1e-5,
        )?;
        println!(
            "{v}: max relative error {:.3e} over {} parameters (worst {}[{}])",
            r.max_rel_error, r.checked, r.worst_block, r.worst_index
        );
        worst = worst.max(r.max_rel_error);
    }
    Ok(if worst <= GRADCHECK_TOLERANCE {
        ExitCode::SUCCESS
    } else {
        eprintln!("gradient check failed: {worst:.3e} > {GRADCHECK_TOLERANCE:e}");
        ExitCode::FAILURE
    })
}
