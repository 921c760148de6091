// SPDX-License-Identifier: MIT OR Apache-2.0

//! Subcommands. Each one resolves a [`RunConfig`], does its work and writes a
//! manifest next to its outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use entlens::analysis::{
    knockout_effect, optimize_representation, sublayer_similarity, OptimizeHyper, SimilaritySpace,
};
use entlens::corpus::{self, align_all, make_control_corpus, parse_conll, EntitySample, Split};
use entlens::evaluation::{
    bucket_report, row_spearman, sweep_layers, write_csv, write_json, EvalReport, FrequencyClient,
    FrequencyConfig,
};
use entlens::lens::{compute_grid, render_html, render_term, LensOptions, TaskVectorSet, TvPolicy};
use entlens::model::{ModelHandle, ModelRegistry};
use entlens::relations::{
    eval_relation, filter_known, load_relation_dataset, object_representation, split_pairs,
    subject_representation, train_relation_map, RelationHyper,
};
use entlens::representations::{train_cleaning, CleaningHyper, CleaningMap, RepCache, RepKind, Representation};
use entlens::task_vectors::{train_task_vector, DecodingConfig, Setting, TaskVector, TvHyper};

use crate::config::RunConfig;
use crate::manifest::Manifest;
use crate::CliError;

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "entlens", version, about = "Decode entity mentions from transformer hidden states")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Model id (registry key, or label for --model-dir).
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Checkpoint directory with config.json, model.safetensors, tokenizer.json.
    #[arg(long, global = true)]
    pub model_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub registry: Option<PathBuf>,
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub offline: bool,
}

impl GlobalArgs {
    /// Defaults, then the config file, then the environment, then flags.
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_env()?;
        if let Some(m) = &self.model {
            cfg.model_id = Some(m.clone());
        }
        if let Some(d) = &self.model_dir {
            cfg.model_dir = Some(d.clone());
        }
        if let Some(r) = &self.registry {
            cfg.registry = Some(r.clone());
        }
        if let Some(c) = &self.cache_dir {
            cfg.cache_dir = c.clone();
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.offline |= self.offline;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a CoNLL file into JSONL samples plus statistics.
    Ingest(IngestArgs),
    /// Extract and cache representations.
    Extract(ExtractArgs),
    /// Train a task vector for one layer.
    TrainTv(TrainTvArgs),
    /// Decode and score samples across layers.
    Eval(EvalArgs),
    /// Random-span control corpora versus entity mentions.
    Baseline(BaselineArgs),
    /// Train a cleaning map against a frozen task vector.
    TrainClean(TrainCleanArgs),
    /// Fit and evaluate a linear relation map.
    Relation(RelationArgs),
    /// Sublayer analyses.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Emit an entity lens grid.
    Lens(LensArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct IngestArgs {
    #[arg(long)]
    pub conll: PathBuf,
    #[arg(long, value_enum)]
    pub split: SplitArg,
    /// Skip token alignment and statistics (no model needed).
    #[arg(long)]
    pub no_align: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExtractArgs {
    #[arg(long)]
    pub samples: PathBuf,
    /// `all`, `mid`, a range `a-b` or a list `a,b,c`.
    #[arg(long, default_value = "all")]
    pub layers: String,
    #[arg(long, default_value = "last")]
    pub kind: String,
    /// Worker processes, each owning its own model.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainTvArgs {
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub layer: usize,
    #[arg(long, default_value = "uncontextual")]
    pub setting: String,
    #[arg(long, default_value = "last")]
    pub rep_kind: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 0.02)]
    pub init_noise: f32,
    /// Directory with cleaning maps, for cleaned kinds.
    #[arg(long)]
    pub clean_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub tv_dir: Option<PathBuf>,
    #[arg(long, default_value = "all")]
    pub layers: String,
    #[arg(long, default_value = "uncontextual")]
    pub setting: String,
    #[arg(long, default_value = "last")]
    pub rep_kind: String,
    #[arg(long)]
    pub clean_dir: Option<PathBuf>,
    /// Use seeded random task vectors instead of trained ones.
    #[arg(long)]
    pub random_theta: bool,
    /// Bucket the best layer by mention length and frequency.
    #[arg(long)]
    pub frequencies: bool,
    #[arg(long)]
    pub freq_table: Option<PathBuf>,
    #[arg(long)]
    pub freq_url: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub quantiles: usize,
    #[arg(long, default_value_t = 8)]
    pub max_len: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BaselineArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, default_value = "mid")]
    pub layers: String,
    #[arg(long, default_value = "1,2,3")]
    pub ks: String,
    #[arg(long, default_value = "contextual")]
    pub setting: String,
    #[arg(long, default_value = "last")]
    pub rep_kind: String,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainCleanArgs {
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub tv_dir: Option<PathBuf>,
    #[arg(long)]
    pub layer: usize,
    #[arg(long, default_value = "uncontextual")]
    pub setting: String,
    #[arg(long, default_value = "last")]
    pub rep_kind: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long, default_value_t = 100)]
    pub min_samples: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RelationArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub layer: usize,
    #[arg(long)]
    pub tv_dir: Option<PathBuf>,
    #[arg(long, default_value = "last")]
    pub rep_kind: String,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f32,
    #[arg(long, default_value_t = 10)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 50)]
    pub n_train: usize,
    /// Keep pairs the model cannot complete on its own.
    #[arg(long)]
    pub no_filter: bool,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Cosine of cumulative sublayer states with a target-layer state.
    Similarity(SimilarityArgs),
    /// Sublayer knockouts and their effect on a mention representation.
    Knockout(KnockoutArgs),
    /// Optimize input vectors that decode chosen mentions.
    Optimize(OptimizeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceArg {
    Residual,
    Vocabulary,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimilarityArgs {
    #[arg(long)]
    pub text: String,
    /// Token position; defaults to the last token.
    #[arg(long)]
    pub position: Option<usize>,
    #[arg(long)]
    pub target_layer: usize,
    #[arg(long, value_enum, default_value = "residual")]
    pub space: SpaceArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct KnockoutArgs {
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub target_layer: usize,
    #[arg(long, default_value_t = 100)]
    pub limit: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub tv_dir: Option<PathBuf>,
    #[arg(long)]
    pub layer: usize,
    /// Mentions to optimize for.
    #[arg(long = "target", required = true)]
    pub targets: Vec<String>,
    #[arg(long, default_value_t = 3)]
    pub restarts: usize,
    #[arg(long, default_value_t = 2000)]
    pub max_steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LensFormat {
    Json,
    Html,
    Term,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LensArgs {
    #[arg(long)]
    pub text: String,
    #[arg(long, default_value = "all")]
    pub layers: String,
    #[arg(long)]
    pub tv_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "term")]
    pub format: LensFormat,
    /// Decode every row with this layer's task vector.
    #[arg(long)]
    pub shared_layer: Option<usize>,
    /// Skip the final norm before the logit-lens projection.
    #[arg(long)]
    pub no_final_norm: bool,
    /// Write the grid here instead of stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Task vector directory; defaults to `<out>/tv`.
    #[arg(long)]
    pub tv_dir: Option<PathBuf>,
    /// Pending requests per model before answering 503.
    #[arg(long, default_value_t = 8)]
    pub queue_depth: usize,
    /// Static UI bundle served at `/`.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
}

/// Parses `all`, `mid`, `a-b` or `a,b,c` against a model with `n_layers`
/// blocks (valid layers are `0..=n_layers`).
pub fn parse_layers(spec: &str, n_layers: usize) -> CliResult<Vec<usize>> {
    let spec = spec.trim();
    let mut out = match spec {
        "all" => (0..=n_layers).collect(),
        "mid" => vec![n_layers / 2],
        _ => {
            let mut v = Vec::new();
            for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                let bad = || CliError::validation(format!("bad layer spec `{spec}`"));
                if let Some((a, b)) = part.split_once('-') {
                    let a: usize = a.trim().parse().map_err(|_| bad())?;
                    let b: usize = b.trim().parse().map_err(|_| bad())?;
                    if a > b {
                        return Err(bad());
                    }
                    v.extend(a..=b);
                } else {
                    v.push(part.parse().map_err(|_| bad())?);
                }
            }
            v
        }
    };
    out.sort_unstable();
    out.dedup();
    if out.is_empty() {
        return Err(CliError::validation("empty layer spec"));
    }
    if let Some(&l) = out.iter().find(|&&l| l > n_layers) {
        return Err(CliError::validation(format!("layer {l} out of range [0, {n_layers}]")));
    }
    Ok(out)
}

fn parse_list(spec: &str) -> CliResult<Vec<usize>> {
    spec.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| CliError::validation(format!("bad integer list `{spec}`")))
        })
        .collect()
}

fn parse_setting(s: &str) -> CliResult<Setting> {
    Ok(s.parse()?)
}

fn parse_kind(s: &str) -> CliResult<RepKind> {
    Ok(s.parse()?)
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::validation(format!("no such file: {}", path.display())))
    }
}

/// Resolved configuration plus shared helpers for one command invocation.
pub struct Context {
    pub cfg: RunConfig,
}

impl Context {
    pub fn new(cfg: RunConfig) -> Self {
        Context { cfg }
    }

    pub fn has_model(&self) -> bool {
        self.cfg.model_dir.is_some() || (self.cfg.registry.is_some() && self.cfg.model_id.is_some())
    }

    pub fn load_model(&self) -> CliResult<ModelHandle> {
        if let Some(dir) = &self.cfg.model_dir {
            let id = self.cfg.model_id.clone().unwrap_or_else(|| {
                dir.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "model".into())
            });
            return Ok(ModelHandle::load_dir(id, dir)?);
        }
        match (&self.cfg.registry, &self.cfg.model_id) {
            (Some(reg), Some(id)) => Ok(ModelRegistry::from_file(reg)?.load(id)?),
            _ => Err(CliError::validation(
                "no model: pass --model-dir, or --registry with --model",
            )),
        }
    }

    pub fn out_dir(&self) -> CliResult<PathBuf> {
        let dir = self.cfg.out_dir.clone();
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
        Ok(dir)
    }

    fn subdir(&self, name: &str) -> CliResult<PathBuf> {
        let dir = self.out_dir()?.join(name);
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
        Ok(dir)
    }

    pub fn tv_dir(&self, explicit: &Option<PathBuf>) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.cfg.out_dir.join("tv"))
    }

    fn clean_dir(&self, explicit: &Option<PathBuf>) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.cfg.out_dir.join("clean"))
    }

    pub fn cache(&self) -> RepCache {
        RepCache::new(self.cfg.cache_dir.join("reps"))
    }

    fn manifest<A: Serialize>(&self, command: &str, args: &A) -> Manifest {
        let mut run = serde_json::to_value(&self.cfg).expect("config serializes");
        // Output and cache locations do not change results.
        if let Some(obj) = run.as_object_mut() {
            obj.remove("out_dir");
            obj.remove("cache_dir");
        }
        Manifest::new(
            command,
            serde_json::json!({ "run": run, "args": args }),
        )
    }

    fn tv_hyper(&self, epochs: Option<usize>, lr: Option<f32>, batch: Option<usize>, noise: f32) -> TvHyper {
        TvHyper {
            epochs: epochs.unwrap_or(self.cfg.epochs),
            learning_rate: lr.unwrap_or(self.cfg.learning_rate),
            batch_size: batch.unwrap_or(self.cfg.batch_size),
            seed: self.cfg.seed,
            init_noise: noise,
        }
    }
}

/// File stem of a cleaning map checkpoint.
pub fn clean_stem(setting: Setting, layer: usize, base: RepKind) -> String {
    format!("clean-{setting}-L{layer}-{}", base.base())
}

fn load_tv(dir: &Path, setting: Setting, layer: usize) -> CliResult<TaskVector> {
    let stem = dir.join(TaskVector::file_stem(setting, layer));
    if !stem.with_extension("json").is_file() {
        return Err(CliError::validation(format!(
            "no {setting} task vector for layer {layer} in {}",
            dir.display()
        )));
    }
    Ok(TaskVector::load(&stem)?)
}

/// Representations of `kind` at `layers`, going through the cache and, for
/// cleaned kinds, the stored cleaning maps.
fn representations(
    ctx: &Context,
    handle: &ModelHandle,
    samples: &[EntitySample],
    layers: &[usize],
    kind: RepKind,
    setting: Setting,
    clean_dir: &Option<PathBuf>,
) -> CliResult<Vec<Vec<Representation>>> {
    let base = ctx.cache().get_or_extract(handle, samples, layers, kind.base())?;
    if !kind.is_cleaned() {
        return Ok(base);
    }
    let dir = ctx.clean_dir(clean_dir);
    let mut out = Vec::with_capacity(base.len());
    for (reps, &layer) in base.iter().zip(layers) {
        let stem = dir.join(clean_stem(setting, layer, kind));
        let map = CleaningMap::load(&stem)?;
        out.push(reps.iter().map(|r| map.apply(r)).collect::<entlens::Result<Vec<_>>>()?);
    }
    Ok(out)
}

fn read_samples(path: &Path) -> CliResult<Vec<EntitySample>> {
    require_file(path)?;
    let samples = corpus::read_jsonl(path)?;
    if samples.is_empty() {
        return Err(CliError::validation(format!("{}: no samples", path.display())));
    }
    Ok(samples)
}

fn decoding() -> DecodingConfig {
    DecodingConfig::default()
}

pub fn run(cli: Cli) -> CliResult<()> {
    let ctx = Context::new(cli.global.resolve()?);
    match cli.command {
        Command::Ingest(a) => cmd_ingest(&ctx, &a),
        Command::Extract(a) => cmd_extract(&ctx, &cli.global, &a),
        Command::TrainTv(a) => cmd_train_tv(&ctx, &a),
        Command::Eval(a) => cmd_eval(&ctx, &a),
        Command::Baseline(a) => cmd_baseline(&ctx, &a),
        Command::TrainClean(a) => cmd_train_clean(&ctx, &a),
        Command::Relation(a) => cmd_relation(&ctx, &a),
        Command::Analyze(c) => cmd_analyze(&ctx, &c),
        Command::Lens(a) => cmd_lens(&ctx, &a),
        Command::Serve(a) => crate::serve::cmd_serve(&ctx, &a),
    }
}

#[derive(Debug, Serialize)]
struct IngestSummary {
    split: Split,
    n_sentences: usize,
    n_parsed: usize,
    n_warnings: usize,
    warnings: Vec<String>,
    n_dropped: usize,
    drop_rate: f64,
    dropped: Vec<(String, String)>,
    stats: Option<corpus::CorpusStats>,
}

pub fn cmd_ingest(ctx: &Context, args: &IngestArgs) -> CliResult<()> {
    require_file(&args.conll)?;
    let split: Split = args.split.into();
    let parsed = parse_conll(&args.conll, split)?;
    let mut summary = IngestSummary {
        split,
        n_sentences: parsed.n_sentences,
        n_parsed: parsed.samples.len(),
        n_warnings: parsed.warnings.len(),
        warnings: parsed.warnings.clone(),
        n_dropped: 0,
        drop_rate: 0.0,
        dropped: Vec::new(),
        stats: None,
    };
    let samples = if args.no_align || !ctx.has_model() {
        parsed.samples
    } else {
        let handle = ctx.load_model()?;
        let report = align_all(&handle, &parsed.samples);
        summary.n_dropped = report.dropped.len();
        summary.drop_rate = report.drop_rate();
        summary.dropped = report.dropped.clone();
        summary.stats = Some(corpus::stats(&handle, &report.aligned)?);
        report.aligned
    };
    let out = ctx.out_dir()?;
    let jsonl = out.join(format!("samples-{split}.jsonl"));
    let stats = out.join(format!("stats-{split}.json"));
    corpus::write_jsonl(&jsonl, &samples)?;
    write_json(&stats, &summary)?;
    let mut m = ctx.manifest("ingest", args);
    m.input(&args.conll)?;
    m.output(&jsonl)?;
    m.output(&stats)?;
    m.write(&out)?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

#[derive(Debug, Serialize)]
struct ExtractSummary {
    model_id: String,
    corpus_hash: String,
    kind: RepKind,
    layers: Vec<usize>,
    n_samples: usize,
}

pub fn cmd_extract(ctx: &Context, global: &GlobalArgs, args: &ExtractArgs) -> CliResult<()> {
    let kind = parse_kind(&args.kind)?;
    if kind.is_cleaned() {
        return Err(CliError::validation("extract produces base kinds only (last, average)"));
    }
    let samples = read_samples(&args.samples)?;
    let handle = ctx.load_model()?;
    let layers = parse_layers(&args.layers, handle.n_layers())?;
    if args.jobs > 1 && layers.len() > 1 {
        drop(handle);
        spawn_extract_workers(ctx, global, args, &layers)?;
        let handle = ctx.load_model()?;
        return finish_extract(ctx, &handle, args, &samples, &layers, kind);
    }
    ctx.cache().get_or_extract(&handle, &samples, &layers, kind)?;
    finish_extract(ctx, &handle, args, &samples, &layers, kind)
}

fn finish_extract(
    ctx: &Context,
    handle: &ModelHandle,
    args: &ExtractArgs,
    samples: &[EntitySample],
    layers: &[usize],
    kind: RepKind,
) -> CliResult<()> {
    let cache = ctx.cache();
    let hash = corpus::corpus_hash(samples);
    if let Some(&l) = layers.iter().find(|&&l| !cache.contains(&handle.model_id, l, kind, &hash)) {
        return Err(CliError::runtime(format!("layer {l} missing from cache after extraction")));
    }
    let summary = ExtractSummary {
        model_id: handle.model_id.clone(),
        corpus_hash: hash,
        kind,
        layers: layers.to_vec(),
        n_samples: samples.len(),
    };
    let out = ctx.out_dir()?;
    let path = out.join(format!("extract-{kind}.json"));
    write_json(&path, &summary)?;
    let mut m = ctx.manifest("extract", args);
    m.input(&args.samples)?;
    m.output(&path)?;
    m.write(&out)?;
    Ok(())
}

/// Splits `layers` over `args.jobs` child processes of this executable.
fn spawn_extract_workers(
    ctx: &Context,
    global: &GlobalArgs,
    args: &ExtractArgs,
    layers: &[usize],
) -> CliResult<()> {
    let exe = std::env::current_exe().map_err(|e| CliError::runtime(e.to_string()))?;
    let jobs = args.jobs.min(layers.len());
    let mut children = Vec::with_capacity(jobs);
    for j in 0..jobs {
        let part: Vec<String> = layers.iter().skip(j).step_by(jobs).map(|l| l.to_string()).collect();
        let worker_out = ctx.cfg.out_dir.join(format!("worker-{j}"));
        let mut cmd = std::process::Command::new(&exe);
        cmd.arg("extract")
            .arg("--samples")
            .arg(&args.samples)
            .arg("--layers")
            .arg(part.join(","))
            .arg("--kind")
            .arg(&args.kind)
            .arg("--cache-dir")
            .arg(&ctx.cfg.cache_dir)
            .arg("--out")
            .arg(&worker_out);
        if let Some(c) = &global.config {
            cmd.arg("--config").arg(c);
        }
        if let Some(d) = &ctx.cfg.model_dir {
            cmd.arg("--model-dir").arg(d);
        }
        if let Some(r) = &ctx.cfg.registry {
            cmd.arg("--registry").arg(r);
        }
        if let Some(m) = &ctx.cfg.model_id {
            cmd.arg("--model").arg(m);
        }
        let child = cmd.spawn().map_err(|e| CliError::runtime(format!("spawn worker: {e}")))?;
        children.push(child);
    }
    let mut failed = 0;
    for mut c in children {
        let status = c.wait().map_err(|e| CliError::runtime(e.to_string()))?;
        if !status.success() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(CliError::runtime(format!("{failed} extraction worker(s) failed")));
    }
    Ok(())
}

pub fn cmd_train_tv(ctx: &Context, args: &TrainTvArgs) -> CliResult<()> {
    let setting = parse_setting(&args.setting)?;
    let kind = parse_kind(&args.rep_kind)?;
    let samples = read_samples(&args.samples)?;
    let handle = ctx.load_model()?;
    if args.layer > handle.n_layers() {
        return Err(CliError::validation(format!(
            "layer {} out of range [0, {}]",
            args.layer,
            handle.n_layers()
        )));
    }
    let reps = representations(ctx, &handle, &samples, &[args.layer], kind, setting, &args.clean_dir)?
        .pop()
        .expect("one layer");
    let hyper = ctx.tv_hyper(args.epochs, args.lr, args.batch_size, args.init_noise);
    let tv = train_task_vector(&handle, &samples, &reps, setting, &hyper)?;
    let dir = ctx.subdir("tv")?;
    let stem = dir.join(TaskVector::file_stem(setting, args.layer));
    tv.save(&stem)?;
    let mut m = ctx.manifest("train-tv", args);
    m.input(&args.samples)?;
    m.output(&stem.with_extension("json"))?;
    m.output(&stem.with_extension("f32"))?;
    m.write(&ctx.out_dir()?)?;
    if let Some(meta) = &tv.meta {
        println!(
            "{}",
            serde_json::json!({
                "layer": tv.layer,
                "setting": tv.setting,
                "best_epoch": meta.best_epoch,
                "final_loss": meta.final_loss,
                "aborted": meta.aborted,
            })
        );
    }
    Ok(())
}

/// Trained (or random) task vectors and representations for `layers`,
/// skipping layers without a checkpoint.
fn eval_inputs(
    ctx: &Context,
    handle: &ModelHandle,
    samples: &[EntitySample],
    layers: &[usize],
    setting: Setting,
    kind: RepKind,
    tv_dir: &Path,
    random_theta: bool,
    clean_dir: &Option<PathBuf>,
) -> CliResult<(Vec<TaskVector>, BTreeMap<usize, Vec<Representation>>)> {
    let mut tvs = Vec::new();
    for &l in layers {
        if random_theta {
            tvs.push(TaskVector::random(handle, l, setting, ctx.cfg.seed));
        } else if let Ok(tv) = load_tv(tv_dir, setting, l) {
            tvs.push(tv);
        } else {
            log::warn!("no {setting} task vector for layer {l}; skipped");
        }
    }
    if tvs.is_empty() {
        return Err(CliError::validation(format!(
            "no {setting} task vectors for the requested layers in {}",
            tv_dir.display()
        )));
    }
    let have: Vec<usize> = tvs.iter().map(|t| t.layer).collect();
    let reps = representations(ctx, handle, samples, &have, kind, setting, clean_dir)?;
    Ok((tvs, have.into_iter().zip(reps).collect()))
}

pub fn cmd_eval(ctx: &Context, args: &EvalArgs) -> CliResult<()> {
    let setting = parse_setting(&args.setting)?;
    let kind = parse_kind(&args.rep_kind)?;
    let samples = read_samples(&args.samples)?;
    let handle = ctx.load_model()?;
    let layers = parse_layers(&args.layers, handle.n_layers())?;
    let tv_dir = ctx.tv_dir(&args.tv_dir);
    let (tvs, reps) = eval_inputs(
        ctx, &handle, &samples, &layers, setting, kind, &tv_dir, args.random_theta, &args.clean_dir,
    )?;
    let mut report = sweep_layers(&handle, &tvs, &samples, &reps, &decoding())?;
    let out = ctx.out_dir()?;
    let mut m = ctx.manifest("eval", args);
    m.input(&args.samples)?;
    for tv in &tvs {
        if !args.random_theta {
            m.input(&tv_dir.join(TaskVector::file_stem(setting, tv.layer)).with_extension("json"))?;
        }
    }
    let tag = if args.random_theta { "-random" } else { "" };
    let base = format!("eval-{setting}-{kind}{tag}");
    if args.frequencies {
        let mut fc = FrequencyConfig {
            offline: ctx.cfg.offline,
            cache_dir: Some(ctx.cfg.cache_dir.join("freq")),
            ..FrequencyConfig::default()
        }
        .with_env();
        if let Some(t) = &args.freq_table {
            fc.offline_table = Some(t.clone());
        }
        if let Some(u) = &args.freq_url {
            fc.base_url = Some(u.clone());
        }
        let mentions: Vec<String> = samples.iter().map(|s| s.mention.clone()).collect();
        let freqs = FrequencyClient::new(fc).fetch(&mentions)?;
        report = bucket_report(&report, &freqs, args.quantiles, args.max_len)?;
        let rho: BTreeMap<usize, serde_json::Value> = row_spearman(report.buckets.as_ref().expect("bucketed"))
            .into_iter()
            .map(|(len, (cells, r))| (len, serde_json::json!({ "populated_cells": cells, "spearman": r })))
            .collect();
        let freq_path = out.join(format!("{base}-frequencies.json"));
        write_json(&freq_path, &serde_json::json!({ "records": freqs, "row_spearman": rho }))?;
        m.output(&freq_path)?;
    }
    let json = out.join(format!("{base}.json"));
    let csv = out.join(format!("{base}.csv"));
    write_json(&json, &report)?;
    write_csv(&csv, &report)?;
    m.output(&json)?;
    m.output(&csv)?;
    m.write(&out)?;
    print_scores(&report);
    Ok(())
}

fn print_scores(report: &EvalReport) {
    for s in &report.per_layer {
        println!("layer {:>3}  em {:.4}  chrf {:.4}  n {}", s.layer, s.em, s.chrf, s.n);
    }
    if let Some(b) = report.best_layer {
        println!("best layer {b}");
    }
}

#[derive(Debug, Serialize)]
struct BaselineRow {
    corpus: String,
    per_layer: Vec<(usize, f64, f64)>,
    best_em: f64,
}

#[derive(Debug, Serialize)]
struct BaselineReport {
    model_id: String,
    setting: Setting,
    rep_kind: RepKind,
    rows: Vec<BaselineRow>,
    /// Best entity EM minus best control EM, per k.
    gaps: BTreeMap<usize, f64>,
}

fn train_and_score(
    ctx: &Context,
    handle: &ModelHandle,
    train: &[EntitySample],
    test: &[EntitySample],
    layers: &[usize],
    setting: Setting,
    kind: RepKind,
) -> CliResult<EvalReport> {
    let cache = ctx.cache();
    let train_reps = cache.get_or_extract(handle, train, layers, kind)?;
    let test_reps = cache.get_or_extract(handle, test, layers, kind)?;
    let hyper = ctx.tv_hyper(None, None, None, 0.02);
    let mut tvs = Vec::new();
    let mut reps = BTreeMap::new();
    for ((&l, tr), te) in layers.iter().zip(train_reps).zip(test_reps) {
        tvs.push(train_task_vector(handle, train, &tr, setting, &hyper)?);
        reps.insert(l, te);
    }
    Ok(sweep_layers(handle, &tvs, test, &reps, &decoding())?)
}

fn row(corpus: String, r: &EvalReport) -> BaselineRow {
    BaselineRow {
        corpus,
        per_layer: r.per_layer.iter().map(|s| (s.layer, s.em, s.chrf)).collect(),
        best_em: r.per_layer.iter().map(|s| s.em).fold(0.0, f64::max),
    }
}

pub fn cmd_baseline(ctx: &Context, args: &BaselineArgs) -> CliResult<()> {
    let setting = parse_setting(&args.setting)?;
    let kind = parse_kind(&args.rep_kind)?;
    if kind.is_cleaned() {
        return Err(CliError::validation("baseline uses base representation kinds"));
    }
    let ks = parse_list(&args.ks)?;
    let train = read_samples(&args.train)?;
    let test = read_samples(&args.test)?;
    let handle = ctx.load_model()?;
    let layers = parse_layers(&args.layers, handle.n_layers())?;

    let entity = train_and_score(ctx, &handle, &train, &test, &layers, setting, kind)?;
    let mut rows = vec![row("entity".into(), &entity)];
    let mut gaps = BTreeMap::new();
    for &k in &ks {
        let ctl_train = make_control_corpus(&handle, &train, k, ctx.cfg.seed)?;
        let ctl_test = make_control_corpus(&handle, &test, k, ctx.cfg.seed.wrapping_add(1))?;
        let r = train_and_score(ctx, &handle, &ctl_train, &ctl_test, &layers, setting, kind)?;
        let rw = row(format!("control-k{k}"), &r);
        gaps.insert(k, rows[0].best_em - rw.best_em);
        rows.push(rw);
    }
    let report = BaselineReport {
        model_id: handle.model_id.clone(),
        setting,
        rep_kind: kind,
        rows,
        gaps,
    };
    let out = ctx.out_dir()?;
    let path = out.join(format!("baseline-{setting}.json"));
    write_json(&path, &report)?;
    let mut m = ctx.manifest("baseline", args);
    m.input(&args.train)?;
    m.input(&args.test)?;
    m.output(&path)?;
    m.write(&out)?;
    for r in &report.rows {
        println!("{:<12} best em {:.4}", r.corpus, r.best_em);
    }
    Ok(())
}

pub fn cmd_train_clean(ctx: &Context, args: &TrainCleanArgs) -> CliResult<()> {
    let setting = parse_setting(&args.setting)?;
    let kind = parse_kind(&args.rep_kind)?.base();
    let samples = read_samples(&args.samples)?;
    let handle = ctx.load_model()?;
    let tv_dir = ctx.tv_dir(&args.tv_dir);
    let tv = load_tv(&tv_dir, setting, args.layer)?;
    let reps = ctx
        .cache()
        .get_or_extract(&handle, &samples, &[args.layer], kind)?
        .pop()
        .expect("one layer");
    let hyper = CleaningHyper {
        epochs: args.epochs.unwrap_or(ctx.cfg.epochs),
        learning_rate: args.lr.unwrap_or(ctx.cfg.learning_rate),
        batch_size: ctx.cfg.batch_size,
        seed: ctx.cfg.seed,
        min_samples: args.min_samples,
    };
    let map = train_cleaning(&handle, &tv, &samples, &reps, &hyper)?;
    let dir = ctx.subdir("clean")?;
    let stem = dir.join(clean_stem(setting, args.layer, kind));
    map.save(&stem)?;
    let mut m = ctx.manifest("train-clean", args);
    m.input(&args.samples)?;
    m.input(&tv_dir.join(TaskVector::file_stem(setting, args.layer)).with_extension("json"))?;
    m.output(&stem.with_extension("json"))?;
    m.write(&ctx.out_dir()?)?;
    println!("{}", serde_json::json!({ "id": map.id, "layer": map.layer, "meta": map.meta }));
    Ok(())
}

pub fn cmd_relation(ctx: &Context, args: &RelationArgs) -> CliResult<()> {
    require_file(&args.dataset)?;
    let kind = parse_kind(&args.rep_kind)?;
    if kind.is_cleaned() {
        return Err(CliError::validation("relation maps use base representation kinds"));
    }
    let data = load_relation_dataset(&args.dataset)?;
    let handle = ctx.load_model()?;
    let tv_dir = ctx.tv_dir(&args.tv_dir);
    let tv = load_tv(&tv_dir, Setting::Uncontextual, args.layer)?;
    let pairs = if args.no_filter {
        data.samples.clone()
    } else {
        filter_known(&handle, &data.samples)?
    };
    let (train, test) = split_pairs(&pairs, args.n_train)?;
    let mut subjects = Vec::with_capacity(train.len());
    let mut objects = Vec::with_capacity(train.len());
    for s in &train {
        subjects.push(subject_representation(&handle, s, args.layer, kind)?);
        objects.push(object_representation(&handle, &s.object, &data.object_template, args.layer, kind)?);
    }
    let hyper = RelationHyper {
        steps: args.steps,
        learning_rate: args.lr,
        batch_size: args.batch_size,
        seed: ctx.cfg.seed,
        n_train: args.n_train,
    };
    let map = train_relation_map(&subjects, &objects, &data.relation_id, &hyper)?;
    let zero = train_relation_map(&subjects, &objects, &data.relation_id, &RelationHyper { steps: 0, ..hyper })?;
    let cfg = decoding();
    let eval_set = if test.is_empty() { &train } else { &test };
    let trained = eval_relation(&handle, &map, &tv, eval_set, &cfg)?;
    let baseline = eval_relation(&handle, &zero, &tv, eval_set, &cfg)?;
    let out = ctx.out_dir()?;
    let stem = ctx.subdir("relations")?.join(format!("{}-L{}", data.relation_id, args.layer));
    map.save(&stem)?;
    let path = out.join(format!("relation-{}-L{}.json", data.relation_id, args.layer));
    write_json(
        &path,
        &serde_json::json!({
            "relation_id": data.relation_id,
            "n_pairs": data.samples.len(),
            "n_known": pairs.len(),
            "n_train": train.len(),
            "n_test": test.len(),
            "evaluated_on": if test.is_empty() { "train" } else { "test" },
            "initial_mse": map.initial_mse,
            "final_mse": map.final_mse,
            "trained": trained,
            "zero_step": baseline,
        }),
    )?;
    let mut m = ctx.manifest("relation", args);
    m.input(&args.dataset)?;
    m.output(&stem.with_extension("json"))?;
    m.output(&path)?;
    m.write(&out)?;
    println!(
        "relation {}  em {:.4}  chrf {:.4}  (zero-step chrf {:.4})",
        data.relation_id, trained.em, trained.chrf, baseline.chrf
    );
    Ok(())
}

pub fn cmd_analyze(ctx: &Context, cmd: &AnalyzeCommand) -> CliResult<()> {
    let handle = ctx.load_model()?;
    let out = ctx.out_dir()?;
    match cmd {
        AnalyzeCommand::Similarity(a) => {
            let n = handle.tokenize(&a.text)?.len();
            if n == 0 {
                return Err(CliError::validation("empty text"));
            }
            let position = a.position.unwrap_or(n - 1);
            let space = match a.space {
                SpaceArg::Residual => SimilaritySpace::Residual,
                SpaceArg::Vocabulary => SimilaritySpace::Vocabulary,
            };
            let curve = sublayer_similarity(&handle, &a.text, position, a.target_layer, space)?;
            let json = out.join(format!("similarity-L{}.json", a.target_layer));
            let csv = out.join(format!("similarity-L{}.csv", a.target_layer));
            write_json(&json, &curve)?;
            let mut body = String::from("step,cosine\n");
            for (name, c) in &curve.points {
                body.push_str(&format!("{name},{c}\n"));
            }
            std::fs::write(&csv, body).map_err(|e| CliError::runtime(format!("{}: {e}", csv.display())))?;
            let mut m = ctx.manifest("analyze-similarity", a);
            m.output(&json)?;
            m.output(&csv)?;
            m.write(&out)?;
            for (name, c) in &curve.points {
                println!("{name:<10} {c:.4}");
            }
        }
        AnalyzeCommand::Knockout(a) => {
            let samples = read_samples(&a.samples)?;
            let mut sums: BTreeMap<(usize, String), (f64, usize)> = BTreeMap::new();
            let mut used = 0;
            for s in samples.iter().filter(|s| s.token_span.is_some()).take(a.limit) {
                for p in knockout_effect(&handle, s, a.target_layer)? {
                    let e = sums.entry((p.layer, p.kind.to_string())).or_default();
                    e.0 += p.cosine as f64;
                    e.1 += 1;
                }
                used += 1;
            }
            if used == 0 {
                return Err(CliError::validation("no aligned samples for knockout"));
            }
            let rows: Vec<serde_json::Value> = sums
                .iter()
                .map(|((l, k), (sum, n))| serde_json::json!({ "layer": l, "kind": k, "mean_cosine": sum / *n as f64 }))
                .collect();
            let json = out.join(format!("knockout-L{}.json", a.target_layer));
            let csv = out.join(format!("knockout-L{}.csv", a.target_layer));
            write_json(&json, &serde_json::json!({ "target_layer": a.target_layer, "n_samples": used, "rows": rows }))?;
            let mut body = String::from("layer,kind,mean_cosine\n");
            for ((l, k), (sum, n)) in &sums {
                body.push_str(&format!("{l},{k},{}\n", sum / *n as f64));
            }
            std::fs::write(&csv, body).map_err(|e| CliError::runtime(format!("{}: {e}", csv.display())))?;
            let mut m = ctx.manifest("analyze-knockout", a);
            m.input(&a.samples)?;
            m.output(&json)?;
            m.output(&csv)?;
            m.write(&out)?;
        }
        AnalyzeCommand::Optimize(a) => {
            let tv_dir = ctx.tv_dir(&a.tv_dir);
            let tv = load_tv(&tv_dir, Setting::Uncontextual, a.layer)?;
            let hyper = OptimizeHyper {
                max_steps: a.max_steps,
                learning_rate: a.lr,
                seed: ctx.cfg.seed,
                ..OptimizeHyper::default()
            };
            let mut results = Vec::new();
            for t in &a.targets {
                match optimize_representation(&handle, &tv, t, a.restarts, &hyper) {
                    Ok(r) => {
                        println!("{t:?} -> {:?}", r.decoded);
                        results.push(serde_json::json!({
                            "target": t, "decoded": r.decoded, "em": r.decoded == *t, "restarts": r.restarts,
                        }));
                    }
                    Err(e) => {
                        println!("{t:?} -> failed: {e}");
                        results.push(serde_json::json!({ "target": t, "error": e.to_string() }));
                    }
                }
            }
            let json = out.join(format!("optimize-L{}.json", a.layer));
            write_json(&json, &results)?;
            let mut m = ctx.manifest("analyze-optimize", a);
            m.input(&tv_dir.join(TaskVector::file_stem(Setting::Uncontextual, a.layer)).with_extension("json"))?;
            m.output(&json)?;
            m.write(&out)?;
        }
    }
    Ok(())
}

pub fn cmd_lens(ctx: &Context, args: &LensArgs) -> CliResult<()> {
    let handle = ctx.load_model()?;
    let layers = parse_layers(&args.layers, handle.n_layers())?;
    let tv_dir = ctx.tv_dir(&args.tv_dir);
    let tvs = TaskVectorSet::load_dir(&tv_dir, &handle.model_id)?;
    if tvs.by_layer.is_empty() {
        return Err(CliError::validation(format!(
            "no uncontextual task vectors for `{}` in {}",
            handle.model_id,
            tv_dir.display()
        )));
    }
    let options = LensOptions {
        tv_policy: match args.shared_layer {
            Some(l) => TvPolicy::Shared(l),
            None => TvPolicy::PerLayer,
        },
        apply_final_norm: !args.no_final_norm,
        ..LensOptions::default()
    };
    let grid = compute_grid(&handle, &args.text, &tvs, &layers, &options)?;
    let body = match args.format {
        LensFormat::Json => serde_json::to_string_pretty(&grid).expect("grid serializes") + "\n",
        LensFormat::Html => render_html(&grid),
        LensFormat::Term => render_term(&grid),
    };
    match &args.output {
        Some(path) => {
            std::fs::write(path, &body).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
            let out = ctx.out_dir()?;
            let mut m = ctx.manifest("lens", args);
            m.output(path)?;
            m.write(&out)?;
        }
        None => print!("{body}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_specs() {
        assert_eq!(parse_layers("all", 3).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(parse_layers("mid", 6).unwrap(), vec![3]);
        assert_eq!(parse_layers("1-3,0,3", 6).unwrap(), vec![0, 1, 2, 3]);
        assert!(parse_layers("7", 6).is_err());
        assert!(parse_layers("3-1", 6).is_err());
        assert!(parse_layers("x", 6).is_err());
    }

    #[test]
    fn flags_override_config() {
        let g = GlobalArgs {
            seed: Some(9),
            out: Some("elsewhere".into()),
            ..GlobalArgs::default()
        };
        let c = g.resolve().unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.out_dir, PathBuf::from("elsewhere"));
        assert_eq!(c.epochs, 15);
    }
}
