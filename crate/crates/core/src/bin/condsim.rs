use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use condsim::annotation::{AnnotationStore, CropSpec, LoadOptions, StorePaths};
use condsim::benchmark::{build_task, validate_benchmark, BenchmarkConfig, RetrievalTemplate, Task};
use condsim::caption::{
    filter_relationships, score_concreteness, CaptionParser, CaptionRecord, ConcretenessTable, Lexicon,
    Relationship, DEFAULT_CONCRETENESS_THRESHOLD,
};
use condsim::combiner::{read_checkpoint, train, write_checkpoint, CheckpointError, CombinerError, TrainConfig};
use condsim::io::{read_jsonl, write_jsonl, DataError};
use condsim::mining::{build_subject_index, mine_triplets, MinedTriplet, MiningError};
use condsim::retrieval::{
    recall_at_k, render_table, stub_embed, EmbeddingKind, EmbeddingTable, EvalReport, RetrievalError, Scorer,
    ScorerKind, CURATED_KS,
};
use condsim::synthetic::{generate_corpus, write_corpus, CorpusConfig};

#[derive(Parser)]
#[command(name = "condsim", version, about = "Conditional image similarity pipeline")]
struct Cli {
    /// JSON config merged under the command-line flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract (subject, predicate, object) relationships from captions.
    ParseCaptions(ParseCaptionsArgs),
    /// Sample training triplets from relationships.
    MineTriplets(MineArgs),
    /// Build curated retrieval templates from annotations.
    BuildBenchmark(BuildArgs),
    /// Write the embedding manifest consumed by an external encoder.
    Manifest(ManifestArgs),
    /// Embed every id a pipeline needs with deterministic random vectors.
    StubEmbed(StubEmbedArgs),
    /// Train the Combiner on mined triplets.
    Train(TrainArgs),
    /// Recall@K of one scorer on curated templates.
    Evaluate(EvaluateArgs),
    /// Render evaluation reports as one table.
    Report(ReportArgs),
    /// Write the synthetic demo corpus.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ParseCaptionsArgs {
    #[arg(long)]
    captions: Option<PathBuf>,
    /// Tab-separated `lemma<TAB>rating` file.
    #[arg(long)]
    concreteness: Option<PathBuf>,
    #[arg(long)]
    stopwords: Option<PathBuf>,
    #[arg(long)]
    prepositions: Option<PathBuf>,
    /// Minimum concreteness of subject and object.
    #[arg(long, visible_alias = "min-concreteness")]
    threshold: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MineArgs {
    #[arg(long)]
    relationships: Option<PathBuf>,
    #[arg(long, visible_alias = "n")]
    n_triplets: Option<usize>,
    /// Drops relationships rated below this before mining.
    #[arg(long, visible_alias = "min-concreteness")]
    threshold: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BuildArgs {
    /// Directory holding images.jsonl, instances.jsonl, panoptic.jsonl and taxonomy.json.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// One task, or every task when omitted.
    #[arg(long)]
    task: Option<Task>,
    /// Templates per attribute type (attribute tasks) or per task (object tasks).
    #[arg(long)]
    quota: Option<usize>,
    /// Panoptic presence threshold.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Sources {
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    triplets: Option<PathBuf>,
}

#[derive(Args)]
struct ManifestArgs {
    #[command(flatten)]
    sources: Sources,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StubEmbedArgs {
    #[command(flatten)]
    sources: Sources,
    /// Embed exactly the rows of a manifest instead.
    #[arg(long, conflicts_with_all = ["templates", "triplets"])]
    manifest: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    triplets: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Curated templates for model selection; a held-out share of the
    /// triplets is used otherwise.
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    /// CSV of loss, learning rate and validation R@1.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    scorer: Option<ScorerKind>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Restrict to one task.
    #[arg(long)]
    task: Option<Task>,
    /// Skip templates with missing embeddings instead of failing.
    #[arg(long)]
    allow_missing: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Report JSON files from `evaluate`.
    reports: Vec<PathBuf>,
    /// Table destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    images_per_scene: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Contents of `--config`. Paths are looked up as `"<subcommand>.<flag>"`,
/// then `"<flag>"`, and resolve relative to the config file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PipelineConfig {
    seed: Option<u64>,
    threshold: Option<f64>,
    n_triplets: Option<usize>,
    task: Option<Task>,
    quota: Option<usize>,
    scorer: Option<String>,
    k: Option<Vec<usize>>,
    dim: Option<usize>,
    benchmark: Option<BenchmarkConfig>,
    train: Option<TrainConfig>,
    paths: BTreeMap<String, PathBuf>,
    #[serde(skip)]
    base: PathBuf,
}

impl PipelineConfig {
    fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        cfg.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    fn path(&self, command: &str, flag: &str) -> Option<PathBuf> {
        self.paths
            .get(&format!("{command}.{flag}"))
            .or_else(|| self.paths.get(flag))
            .map(|p| self.base.join(p))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Usage,
    Data,
    Numeric,
}

impl Kind {
    fn code(self) -> u8 {
        match self {
            Kind::Usage => 2,
            Kind::Data => 3,
            Kind::Numeric => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::Data => "data",
            Kind::Numeric => "numeric",
        }
    }
}

struct Failure {
    kind: Kind,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { kind: Kind::Usage, message: message.into() }
    }

    fn data(message: impl Display) -> Self {
        Self { kind: Kind::Data, message: message.to_string() }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::data(e)
    }
}

impl From<CombinerError> for Failure {
    fn from(e: CombinerError) -> Self {
        let kind = match e {
            CombinerError::NonFinite(_) => Kind::Numeric,
            CombinerError::InvalidConfig(_) => Kind::Usage,
            _ => Kind::Data,
        };
        Self { kind, message: e.to_string() }
    }
}

impl From<RetrievalError> for Failure {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Combiner(c) => c.into(),
            RetrievalError::InvalidKs(_) => Failure::usage(e.to_string()),
            e => Failure::data(e),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::data(e)
    }
}

struct Ctx {
    cfg: PipelineConfig,
    seed: u64,
    command: &'static str,
}

impl Ctx {
    /// Flag value, else the config path, else a usage error.
    fn path(&self, flag: &str, value: Option<PathBuf>) -> Result<PathBuf, Failure> {
        self.optional_path(flag, value)
            .ok_or_else(|| Failure::usage(format!("--{flag} is required (flag or config paths)")))
    }

    fn optional_path(&self, flag: &str, value: Option<PathBuf>) -> Option<PathBuf> {
        value.or_else(|| self.cfg.path(self.command, flag))
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(Failure::data)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::data(format!("{}: {e}", dir.display())))?;
    }
    Ok(write_jsonl(path, rows)?)
}

fn parse_captions(ctx: &Ctx, a: ParseCaptionsArgs) -> Result<String, Failure> {
    let captions_path = ctx.path("captions", a.captions)?;
    let table_path = ctx.path("concreteness", a.concreteness)?;
    let out = ctx.path("out", a.out)?;
    let threshold = a.threshold.or(ctx.cfg.threshold).unwrap_or(DEFAULT_CONCRETENESS_THRESHOLD);
    let lexicon = Lexicon::load(
        ctx.optional_path("stopwords", a.stopwords).as_deref(),
        ctx.optional_path("prepositions", a.prepositions).as_deref(),
    )?;
    let captions: Vec<CaptionRecord> = read_jsonl(&captions_path)?;
    let table = ConcretenessTable::load(&table_path)?;
    let parsed: Vec<Relationship> = CaptionParser::new(lexicon)
        .parse_all(&captions)
        .into_iter()
        .map(|r| score_concreteness(r, &table))
        .collect();
    let total = parsed.len();
    let kept = filter_relationships(parsed, threshold);
    write_rows(&out, &kept)?;
    Ok(format!(
        "{} captions, {total} relationships, {} kept at concreteness >= {threshold} -> {}",
        captions.len(),
        kept.len(),
        out.display()
    ))
}

fn mine(ctx: &Ctx, a: MineArgs) -> Result<String, Failure> {
    let input = ctx.path("relationships", a.relationships)?;
    let out = ctx.path("out", a.out)?;
    let n = a
        .n_triplets
        .or(ctx.cfg.n_triplets)
        .ok_or_else(|| Failure::usage("--n-triplets is required"))?;
    let mut rels: Vec<Relationship> = read_jsonl(&input)?;
    let read = rels.len();
    if let Some(t) = a.threshold.or(ctx.cfg.threshold) {
        rels = filter_relationships(rels, t);
    }
    let index = build_subject_index(rels);
    let (triplets, note) = match mine_triplets(&index, n, ctx.seed) {
        Ok(t) => (t, String::new()),
        Err(MiningError::Exhausted { mined, requested, draws }) => {
            eprintln!(
                "{}",
                serde_json::json!({
                    "stage": ctx.command,
                    "warning": "mining_exhausted",
                    "requested": requested,
                    "mined": mined.len(),
                    "draws": draws,
                })
            );
            (mined, format!(" (exhausted after {draws} draws)"))
        }
    };
    write_rows(&out, &triplets)?;
    Ok(format!(
        "{} of {n} triplets from {read} relationships{note} -> {}",
        triplets.len(),
        out.display()
    ))
}

fn load_store(dir: &Path) -> Result<AnnotationStore, Failure> {
    Ok(AnnotationStore::load(&StorePaths::in_dir(dir), &LoadOptions::default())?)
}

fn build_benchmark(ctx: &Ctx, a: BuildArgs) -> Result<String, Failure> {
    let dir = ctx.path("annotations", a.annotations)?;
    let out = ctx.path("out", a.out)?;
    let mut config = ctx.cfg.benchmark.clone().unwrap_or_default();
    if let Some(q) = a.quota.or(ctx.cfg.quota) {
        config.per_type_quota = q;
        config.object_quota = Some(q);
    }
    if let Some(t) = a.threshold {
        config.presence_threshold = t;
    }
    let store = load_store(&dir)?;
    let tasks: Vec<Task> = match a.task.or(ctx.cfg.task) {
        Some(t) => vec![t],
        None => Task::ALL.to_vec(),
    };
    let mut templates = Vec::new();
    let mut counts = Vec::new();
    for task in tasks {
        let built = build_task(&store, task, ctx.seed, &config);
        counts.push(format!("{task} {} (skipped {})", built.templates.len(), built.skipped));
        templates.extend(built.templates);
    }
    validate_benchmark(&templates, &store, &config).map_err(|e| {
        let shown: Vec<&str> = e.violations.iter().take(5).map(String::as_str).collect();
        Failure::data(format!("{} contract violations: {}", e.violations.len(), shown.join("; ")))
    })?;
    write_rows(&out, &templates)?;
    Ok(format!("{} -> {}", counts.join(", "), out.display()))
}

/// One item an encoder must embed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestRow {
    id: String,
    kind: EmbeddingKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    crop: Option<CropSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

fn image_row(id: &str, image_id: &str, crop: Option<&CropSpec>) -> ManifestRow {
    ManifestRow {
        id: id.to_string(),
        kind: EmbeddingKind::Image,
        image_id: Some(image_id.to_string()),
        crop: crop.cloned(),
        text: None,
    }
}

fn text_row(text: &str) -> ManifestRow {
    ManifestRow {
        id: text.to_string(),
        kind: EmbeddingKind::Text,
        image_id: None,
        crop: None,
        text: Some(text.to_string()),
    }
}

/// Every embedding the given templates and triplets reference, sorted by
/// kind then id.
fn gather(ctx: &Ctx, s: Sources) -> Result<Vec<ManifestRow>, Failure> {
    let templates = ctx.optional_path("templates", s.templates);
    let triplets = ctx.optional_path("triplets", s.triplets);
    if templates.is_none() && triplets.is_none() {
        return Err(Failure::usage("need --templates and/or --triplets"));
    }
    let mut rows: BTreeMap<(EmbeddingKind, String), ManifestRow> = BTreeMap::new();
    let mut add = |row: ManifestRow| {
        rows.entry((row.kind, row.id.clone())).or_insert(row);
    };
    if let Some(p) = templates {
        let ts: Vec<RetrievalTemplate> = read_jsonl(&p)?;
        for t in &ts {
            for target in std::iter::once(&t.reference).chain(&t.gallery) {
                add(image_row(target.embedding_key(), &target.image_id, target.crop.as_ref()));
            }
            add(text_row(&t.condition));
        }
    }
    if let Some(p) = triplets {
        let ts: Vec<MinedTriplet> = read_jsonl(&p)?;
        for t in &ts {
            add(image_row(&t.reference_image_id, &t.reference_image_id, None));
            add(image_row(&t.target_image_id, &t.target_image_id, None));
            add(text_row(&t.condition_text));
        }
    }
    Ok(rows.into_values().collect())
}

fn manifest(ctx: &Ctx, a: ManifestArgs) -> Result<String, Failure> {
    let out = ctx.path("out", a.out)?;
    let rows = gather(ctx, a.sources)?;
    write_rows(&out, &rows)?;
    Ok(format!("{} rows -> {}", rows.len(), out.display()))
}

fn stub(ctx: &Ctx, a: StubEmbedArgs) -> Result<String, Failure> {
    let out = ctx.path("out", a.out)?;
    let dim = a.dim.or(ctx.cfg.dim).unwrap_or(64);
    if dim < 2 {
        return Err(Failure::usage("--dim must be at least 2"));
    }
    let rows = match ctx.optional_path("manifest", a.manifest) {
        Some(p) => read_jsonl::<ManifestRow>(&p)?,
        None => gather(ctx, a.sources)?,
    };
    let mut table = EmbeddingTable::new(dim);
    for r in &rows {
        let v = stub_embed(&format!("{}/{}", r.kind, r.id), dim, ctx.seed);
        table.insert(r.kind, r.id.clone(), &v)?;
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::data(format!("{}: {e}", dir.display())))?;
    }
    table.write(&out)?;
    Ok(format!("{} embeddings at D={dim} -> {}", rows.len(), out.display()))
}

fn train_cmd(ctx: &Ctx, a: TrainArgs) -> Result<String, Failure> {
    let triplets_path = ctx.path("triplets", a.triplets)?;
    let emb_path = ctx.path("embeddings", a.embeddings)?;
    let out = ctx.path("out", a.out)?;
    let mut config = ctx.cfg.train.clone().unwrap_or_default();
    config.seed = ctx.seed;
    if let Some(v) = a.steps {
        config.steps = v;
    }
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = a.lr {
        config.learning_rate = v;
    }
    if let Some(v) = a.temperature {
        config.temperature = v;
    }
    let triplets: Vec<MinedTriplet> = read_jsonl(&triplets_path)?;
    let table = EmbeddingTable::read(&emb_path)?;
    let validation: Option<Vec<RetrievalTemplate>> = match ctx.optional_path("validation", a.validation) {
        Some(p) => Some(read_jsonl(&p)?),
        None => None,
    };
    let result = train(&triplets, &table, &config, validation.as_deref())?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::data(format!("{}: {e}", dir.display())))?;
    }
    write_checkpoint(&out, &result.params)?;
    if let Some(log) = ctx.optional_path("log", a.log) {
        write_text(&log, &result.log.to_csv())?;
    }
    let best = match result.best_val_r1 {
        Some(r) => format!(", best validation R@1 {:.1} at step {}", 100.0 * r, result.best_step),
        None => String::new(),
    };
    Ok(format!(
        "{} triplets, {} steps{best} -> {}",
        triplets.len(),
        config.steps,
        out.display()
    ))
}

fn evaluate(ctx: &Ctx, a: EvaluateArgs) -> Result<String, Failure> {
    let templates_path = ctx.path("templates", a.templates)?;
    let emb_path = ctx.path("embeddings", a.embeddings)?;
    let out = ctx.path("out", a.out)?;
    let kind = match (a.scorer, &ctx.cfg.scorer) {
        (Some(k), _) => k,
        (None, Some(s)) => s.parse().map_err(|e: String| Failure::usage(e))?,
        (None, None) => return Err(Failure::usage("--scorer is required")),
    };
    let ks = a.k.or_else(|| ctx.cfg.k.clone()).unwrap_or_else(|| CURATED_KS.to_vec());
    let mut templates: Vec<RetrievalTemplate> = read_jsonl(&templates_path)?;
    if let Some(task) = a.task.or(ctx.cfg.task) {
        templates.retain(|t| t.task == task);
    }
    let table = EmbeddingTable::read(&emb_path)?;
    let params = match kind {
        ScorerKind::Combiner => {
            let p = ctx
                .optional_path("checkpoint", a.checkpoint)
                .ok_or_else(|| Failure::usage("--checkpoint is required for the combiner scorer"))?;
            Some(read_checkpoint(&p)?)
        }
        _ => None,
    };
    let scorer = match (kind, &params) {
        (ScorerKind::ImageOnly, _) => Scorer::ImageOnly,
        (ScorerKind::TextOnly, _) => Scorer::TextOnly,
        (ScorerKind::ImagePlusText, _) => Scorer::ImagePlusText,
        (ScorerKind::Combiner, Some(p)) => Scorer::Combiner(p),
        (ScorerKind::Combiner, None) => unreachable!("checkpoint loaded above"),
    };
    let report = if a.allow_missing {
        condsim::retrieval::recall_at_k_with(&templates, &ks, kind.as_str(), true, |t| {
            condsim::retrieval::score_gallery(&scorer, t, &table)
        })?
    } else {
        recall_at_k(&templates, &scorer, &table, &ks)?
    };
    write_json(&out, &report)?;
    let skipped: usize = report.tasks.iter().map(|t| t.skipped).sum();
    let skipped = if skipped > 0 { format!(", {skipped} skipped") } else { String::new() };
    Ok(format!(
        "{kind}: average R@1 {:.1} over {} tasks{skipped} -> {}",
        report.average_r1,
        report.tasks.len(),
        out.display()
    ))
}

fn report(ctx: &Ctx, a: ReportArgs) -> Result<String, Failure> {
    if a.reports.is_empty() {
        return Err(Failure::usage("report needs at least one report file"));
    }
    let mut reports = Vec::new();
    for p in &a.reports {
        let text = fs::read_to_string(p).map_err(|e| Failure::data(format!("{}: {e}", p.display())))?;
        let r: EvalReport = serde_json::from_str(&text).map_err(|e| Failure::data(format!("{}: {e}", p.display())))?;
        reports.push(r);
    }
    let table = render_table(&reports);
    let best = reports
        .iter()
        .max_by(|a, b| a.average_r1.total_cmp(&b.average_r1))
        .expect("non-empty");
    match ctx.optional_path("out", a.out) {
        Some(out) => {
            write_text(&out, &table)?;
            Ok(format!(
                "{} scorers, best average R@1 {:.1} ({}) -> {}",
                reports.len(),
                best.average_r1,
                best.scorer,
                out.display()
            ))
        }
        None => {
            print!("{table}");
            Ok(format!("{} scorers, best average R@1 {:.1} ({})", reports.len(), best.average_r1, best.scorer))
        }
    }
}

fn synth(ctx: &Ctx, a: SynthArgs) -> Result<String, Failure> {
    let out = ctx.path("out", a.out)?;
    let mut config = CorpusConfig { seed: ctx.seed, ..Default::default() };
    if let Some(v) = a.images_per_scene {
        config.images_per_scene = v;
    }
    if let Some(v) = a.dim.or(ctx.cfg.dim) {
        config.dim = v;
    }
    let corpus = generate_corpus(&config);
    write_corpus(&corpus, &out)?;
    Ok(format!(
        "{} images, {} instances, {} captions, {} embeddings -> {}",
        corpus.store.images().len(),
        corpus.store.instances().len(),
        corpus.captions.len(),
        corpus.embeddings.len(),
        out.display()
    ))
}

fn limit_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("CONDSIM_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::usage(format!("CONDSIM_THREADS must be a positive integer, got {v:?}")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::usage(e.to_string()))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn run(cli: Cli) -> Result<(&'static str, String), (&'static str, Failure)> {
    let command = match &cli.command {
        Command::ParseCaptions(_) => "parse-captions",
        Command::MineTriplets(_) => "mine-triplets",
        Command::BuildBenchmark(_) => "build-benchmark",
        Command::Manifest(_) => "manifest",
        Command::StubEmbed(_) => "stub-embed",
        Command::Train(_) => "train",
        Command::Evaluate(_) => "evaluate",
        Command::Report(_) => "report",
        Command::Synth(_) => "synth",
    };
    let fail = |e: Failure| (command, e);
    limit_threads().map_err(fail)?;
    let cfg = PipelineConfig::load(cli.config.as_deref()).map_err(fail)?;
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let ctx = Ctx { cfg, seed, command };
    let summary = match cli.command {
        Command::ParseCaptions(a) => parse_captions(&ctx, a),
        Command::MineTriplets(a) => mine(&ctx, a),
        Command::BuildBenchmark(a) => build_benchmark(&ctx, a),
        Command::Manifest(a) => manifest(&ctx, a),
        Command::StubEmbed(a) => stub(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Report(a) => report(&ctx, a),
        Command::Synth(a) => synth(&ctx, a),
    }
    .map_err(fail)?;
    Ok((command, summary))
}

fn error_json(stage: &str, kind: Kind, message: &str) -> String {
    serde_json::json!({ "stage": stage, "kind": kind.name(), "error": message }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let message = e.render().to_string();
            let first = message.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("{}", error_json("cli", Kind::Usage, first));
            return ExitCode::from(Kind::Usage.code());
        }
    };
    match run(cli) {
        Ok((command, summary)) => {
            println!("{command}: {summary}");
            ExitCode::SUCCESS
        }
        Err((command, e)) => {
            eprintln!("{}", error_json(command, e.kind, &format!("{command}: {}", e.message)));
            ExitCode::from(e.kind.code())
        }
    }
}
