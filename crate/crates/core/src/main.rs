use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use tagkit::archdsl::{builtin, builtin_architectures, expand_layers, parse_arch_file, render_arch_file, ArchSpec, Geometry};
use tagkit::calibsvc::{self, CalibrationService, ScoreIndex, ServiceConfig};
use tagkit::complexity::{compare_architectures, count_complexity, render_table};
use tagkit::eval;
use tagkit::imagefolder::ImageFolder;
use tagkit::network::{self, build_from_arch_with, load_checkpoint, save_checkpoint, HeadConfig, TrainConfig, TrainOptions, WeightInit};
use tagkit::synth::ShapesCorpus;
use tagkit::tagselect::{self, ExclusionRules, FieldWeights, RankKey, Vocabulary};

/// Prints to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

macro_rules! say_raw {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

/// Environment variable naming the corpus root; relative data paths are
/// resolved against it.
const CORPUS_ENV: &str = "TAGKIT_CORPUS";

#[derive(Parser, Debug, Serialize)]
#[command(name = "tagkit", version, about = "Tag-prediction toolkit")]
struct Cli {
    /// Directory receiving outputs and the run manifest.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Seed overriding the configured one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
enum Command {
    /// Architecture notation tools.
    #[command(subcommand)]
    Arch(ArchCmd),
    /// Multiply-adds and parameters of an architecture.
    Complexity(ComplexityArgs),
    /// Tag statistics, vocabulary and training-set construction.
    #[command(subcommand)]
    Tags(TagsCmd),
    /// Train a network from a TOML configuration.
    Train(TrainArgs),
    /// Evaluation metrics.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Score an image directory with a checkpoint.
    Score(ScoreArgs),
    /// Calibration service.
    #[command(subcommand)]
    Calibrate(CalibrateCmd),
}

#[derive(Subcommand, Debug, Serialize)]
enum ArchCmd {
    /// Parse an architecture file (or built-in name) into JSON.
    Parse { arch: String },
    /// Render JSON produced by `arch parse` as canonical notation.
    Render { json: PathBuf },
    /// List built-in architectures.
    List,
}

#[derive(Args, Debug, Serialize)]
struct ComplexityArgs {
    /// Architecture file or built-in name; omit with --all.
    #[arg(long, required_unless_present = "all", conflicts_with = "all")]
    arch: Option<String>,
    /// Rank every built-in architecture.
    #[arg(long)]
    all: bool,
    #[arg(long, default_value = "221x221x3")]
    input: Geometry,
    #[arg(long, default_value_t = 1000)]
    classes: usize,
    #[arg(long, value_delimiter = ',', default_value = "6,3,2,1")]
    spp: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "4096,4096")]
    hidden: Vec<usize>,
    #[arg(long, value_enum, default_value = "table")]
    report: ReportFormat,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum ReportFormat {
    Csv,
    Table,
}

#[derive(Args, Debug, Serialize)]
struct MetadataArg {
    /// Tab-separated photo metadata.
    #[arg(long)]
    metadata: PathBuf,
}

#[derive(Subcommand, Debug, Serialize)]
enum TagsCmd {
    /// Photo and user counts per tag.
    Stats(MetadataArg),
    /// Top tags by photo or user count.
    Rank {
        #[command(flatten)]
        input: MetadataArg,
        #[arg(long, value_enum, default_value = "user-count")]
        key: RankKey,
        #[arg(long, default_value_t = 100)]
        n: usize,
    },
    /// Rank, apply exclusion rules and write the vocabulary.
    Select {
        #[command(flatten)]
        input: MetadataArg,
        /// Directory with the rule term lists.
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "user-count")]
        key: RankKey,
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
    /// Top-k photos per vocabulary tag by tf-idf.
    Build {
        #[command(flatten)]
        input: MetadataArg,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 1000)]
        k: usize,
        /// File of photo ids to leave out, one per line.
        #[arg(long)]
        exclude: Option<PathBuf>,
        /// Field weights as `title,description,tags`.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        weights: Option<Vec<f64>>,
    },
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Total epochs, overriding the configuration.
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from a checkpoint instead of a fresh initialization.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Serialize)]
enum EvalCmd {
    /// mAP of `item tag score` predictions against `item tag` truth.
    Map {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// File of tags to restrict to, one per line.
        #[arg(long)]
        tags: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Serialize)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image directory; defaults to `$TAGKIT_CORPUS/images`.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    vocab: PathBuf,
    /// Side images are resized to before the center crop.
    #[arg(long)]
    base: Option<usize>,
    #[arg(long, default_value_t = 32)]
    batch: usize,
}

#[derive(Subcommand, Debug, Serialize)]
enum CalibrateCmd {
    /// Serve the calibration HTTP API.
    Serve {
        /// Score index written by `score`.
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        journal: PathBuf,
        /// Directory serving photo pixels; defaults to `$TAGKIT_CORPUS/images`.
        #[arg(long)]
        photos: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Half-width of the posterior window for suggestions.
        #[arg(long, default_value_t = 0.05)]
        window: f64,
    },
}

/// Training configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    #[serde(default = "one")]
    version: u32,
    /// Built-in name or architecture file.
    arch: String,
    /// Network input (crop) geometry, `HxWxC`.
    input: String,
    /// Side images are resized to before cropping.
    base: usize,
    #[serde(default)]
    init_seed: u64,
    #[serde(default)]
    init: WeightInit,
    head: HeadConfig,
    train: TrainConfig,
    data: DataConfig,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum DataConfig {
    /// The generated shapes corpus.
    Shapes {
        train_count: usize,
        test_count: usize,
        corpus_seed: u64,
        #[serde(default)]
        label_drop: f64,
        #[serde(default)]
        drop_seed: u64,
    },
    /// Images on disk with labels from `tags build` output.
    Images {
        images: PathBuf,
        labels: PathBuf,
        vocab: PathBuf,
        validation_images: Option<PathBuf>,
        validation_labels: Option<PathBuf>,
    },
}

fn corpus_path(p: &Path) -> PathBuf {
    match std::env::var_os(CORPUS_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn default_images(explicit: &Option<PathBuf>) -> Result<PathBuf> {
    match explicit {
        Some(p) => Ok(corpus_path(p)),
        None => match std::env::var_os(CORPUS_ENV) {
            Some(root) => Ok(PathBuf::from(root).join("images")),
            None => bail!("no image directory given and {CORPUS_ENV} is not set"),
        },
    }
}

fn load_arch(arg: &str) -> Result<ArchSpec> {
    if let Some(spec) = builtin(&arg.replace('-', "_")) {
        return Ok(spec);
    }
    let text = fs::read_to_string(arg).with_context(|| format!("`{arg}` is neither a built-in architecture nor a readable file"))?;
    parse_arch_file(&text).map_err(|e| anyhow::anyhow!("{arg}: {e}"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Records what produced the run directory's contents. Nothing here
/// depends on wall-clock time, so identical inputs give identical files.
fn write_manifest(out: &Path, cli: &Cli, extra: serde_json::Value) -> Result<()> {
    let manifest = json!({
        "tool": "tagkit",
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cli.seed,
        "command": &cli.command,
        "config": extra,
    });
    write_json(&out.join("manifest.json"), &manifest)
}

fn read_vocab(path: &Path) -> Result<Vec<String>> {
    let v = Vocabulary::read(path).with_context(|| format!("reading vocabulary {}", path.display()))?;
    if v.is_empty() {
        bail!("vocabulary {} is empty", path.display());
    }
    Ok(v.tags)
}

fn run(cli: &Cli) -> Result<()> {
    let out = &cli.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match &cli.command {
        Command::Arch(cmd) => match cmd {
            ArchCmd::Parse { arch } => {
                let spec = load_arch(arch)?;
                say!("{}", serde_json::to_string_pretty(&spec)?);
                write_json(&out.join("arch.json"), &spec)?;
                write_manifest(out, cli, json!(null))?;
            }
            ArchCmd::Render { json } => {
                let spec: ArchSpec = serde_json::from_str(&fs::read_to_string(json)?)?;
                spec.validate().map_err(|e| anyhow::anyhow!("{}: {e}", json.display()))?;
                let text = render_arch_file(&spec);
                say_raw!("{text}");
                fs::write(out.join(format!("{}.arch", spec.name)), &text)?;
                write_manifest(out, cli, json!(null))?;
            }
            ArchCmd::List => {
                for (_, text) in builtin_architectures() {
                    say!("{}", text.trim());
                }
            }
        },
        Command::Complexity(a) => {
            let head = HeadConfig { spp_levels: a.spp.clone(), hidden_fc_widths: a.hidden.clone(), dropout_rate: 0.5, num_classes: a.classes };
            head.validate().map_err(anyhow::Error::msg)?;
            if a.all {
                let specs: Vec<ArchSpec> = builtin_architectures().iter().filter_map(|(n, _)| builtin(n)).collect();
                let rows = compare_architectures(&specs, a.input, &head).map_err(|(n, e)| anyhow::anyhow!("{n}: {e}"))?;
                match a.report {
                    ReportFormat::Csv => {
                        say!("name,ops,params");
                        for r in &rows {
                            say!("{},{},{}", r.name, r.total_ops, r.total_params);
                        }
                    }
                    ReportFormat::Table => say_raw!("{}", render_table(&rows)),
                }
                write_json(&out.join("complexity.json"), &rows)?;
            } else {
                let spec = load_arch(a.arch.as_deref().expect("required by clap"))?;
                let plan = expand_layers(&spec, a.input, &head)?;
                let report = count_complexity(&plan);
                match a.report {
                    ReportFormat::Csv => say_raw!("{}", report.to_csv()),
                    ReportFormat::Table => {
                        say_raw!("{}", report.to_table());
                        say!(
                            "{}: {:.1}M multiply-adds, {:.2}M parameters",
                            spec.name,
                            report.total_ops as f64 / 1e6,
                            report.total_params as f64 / 1e6
                        );
                    }
                }
                write_json(&out.join("complexity.json"), &report)?;
                fs::write(out.join("layers.csv"), report.to_csv())?;
            }
            write_manifest(out, cli, json!(null))?;
        }
        Command::Tags(cmd) => run_tags(cli, cmd)?,
        Command::Train(a) => run_train(cli, a)?,
        Command::Eval(EvalCmd::Map { pred, truth, tags }) => {
            let preds = eval::read_predictions(
                BufReader::new(fs::File::open(pred).with_context(|| format!("opening {}", pred.display()))?),
                &pred.display().to_string(),
                BufReader::new(fs::File::open(truth).with_context(|| format!("opening {}", truth.display()))?),
                &truth.display().to_string(),
            )?;
            let subset: Option<BTreeSet<String>> = match tags {
                Some(p) => Some(
                    fs::read_to_string(p)
                        .with_context(|| format!("reading {}", p.display()))?
                        .lines()
                        .map(str::trim)
                        .filter(|l| !l.is_empty() && !l.starts_with('#'))
                        .map(String::from)
                        .collect(),
                ),
                None => None,
            };
            let per_tag = preds.per_tag_ap(subset.as_ref())?;
            let map = eval::mean_ap(&preds, subset.as_ref())?;
            say!("mAP {map:.6} over {} tags", per_tag.len());
            write_json(&out.join("map.json"), &json!({ "map": map, "per_tag": per_tag }))?;
            write_manifest(out, cli, json!(null))?;
        }
        Command::Score(a) => {
            let (net, _) = load_checkpoint(&a.checkpoint)?;
            let vocab = read_vocab(&a.vocab)?;
            let base = a.base.unwrap_or(net.input.height);
            let images = ImageFolder::open(&default_images(&a.images)?, base)?;
            let (index, report) = calibsvc::score_corpus(&net, &images, &vocab, a.batch)?;
            let mut text = Vec::new();
            index.write(&mut text)?;
            fs::write(out.join("index.tsv"), text)?;
            write_json(&out.join("score_report.json"), &report)?;
            say!("scored {} images, {} unreadable", report.scored, report.unreadable.len());
            write_manifest(out, cli, json!({ "base": base }))?;
        }
        Command::Calibrate(CalibrateCmd::Serve { index, table, journal, photos, addr, window }) => {
            let index = ScoreIndex::load(index)?;
            let config = ServiceConfig { window: *window, ..ServiceConfig::default() };
            let photos = default_images(photos).ok();
            let svc = CalibrationService::open(index, table, journal, config)?.with_photo_root(photos);
            let app = calibsvc::http::router(Arc::new(svc));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
                log::info!("serving on {}", listener.local_addr()?);
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}

fn run_tags(cli: &Cli, cmd: &TagsCmd) -> Result<()> {
    let out = &cli.out;
    let ingest = |m: &MetadataArg| -> Result<Vec<tagselect::PhotoRecord>> {
        let path = corpus_path(&m.metadata);
        let (records, report) = tagselect::ingest_file(&path).with_context(|| format!("reading {}", path.display()))?;
        eprintln!("{} records, {} malformed lines skipped", report.records, report.malformed);
        write_json(&out.join("ingest.json"), &report)?;
        Ok(records)
    };
    match cmd {
        TagsCmd::Stats(m) => {
            let stats = tagselect::compute_tag_stats(&ingest(m)?);
            let mut text = String::from("tag\tphoto_count\tuser_count\n");
            for (tag, c) in &stats {
                text.push_str(&format!("{tag}\t{}\t{}\n", c.photo_count, c.user_count));
            }
            fs::write(out.join("stats.tsv"), text)?;
            say!("{} tags", stats.len());
        }
        TagsCmd::Rank { input, key, n } => {
            let ranking = tagselect::rank_tags(&tagselect::compute_tag_stats(&ingest(input)?), *key, *n)?;
            for t in &ranking {
                say!("{}\t{}\t{}\t{}", t.rank, t.tag, t.photo_count, t.user_count);
            }
            write_json(&out.join("ranking.json"), &ranking)?;
        }
        TagsCmd::Select { input, rules, key, n } => {
            let rules = match rules {
                Some(dir) => ExclusionRules::load(&corpus_path(dir))?,
                None => ExclusionRules::default(),
            };
            let ranking = tagselect::rank_tags(&tagselect::compute_tag_stats(&ingest(input)?), *key, *n)?;
            let vocab = tagselect::apply_exclusions(&ranking, &rules)?;
            vocab.write(&out.join("vocab.txt"))?;
            say!("{} of {} ranked tags kept", vocab.len(), ranking.len());
        }
        TagsCmd::Build { input, vocab, k, exclude, weights } => {
            let records = ingest(input)?;
            let vocab = read_vocab(vocab)?;
            let excluded: HashSet<String> = match exclude {
                Some(p) => fs::read_to_string(p)?.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect(),
                None => HashSet::new(),
            };
            let weights = match weights.as_deref() {
                Some([t, d, g]) => FieldWeights { title: *t, description: *d, tags: *g },
                _ => FieldWeights::default(),
            };
            weights.validate().map_err(anyhow::Error::msg)?;
            let set = tagselect::build_training_set(&records, &vocab, *k, &excluded, &weights)?;
            let mut text = Vec::new();
            set.write_tsv(&mut text)?;
            fs::write(out.join("training_set.tsv"), text)?;
            write_json(
                &out.join("training_set.provenance.json"),
                &json!({ "k": set.k, "weights": set.weights, "excluded": excluded.len(), "shortfall": set.shortfall_tags() }),
            )?;
            say!("{} tags, {} short of k", set.selections.len(), set.shortfall_tags().len());
        }
    }
    write_manifest(out, cli, json!(null))
}

fn run_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let out = &cli.out;
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut cfg: TrainFile = toml::from_str(&text).with_context(|| format!("parsing {}", a.config.display()))?;
    if cfg.version != 1 {
        bail!("unsupported training config version {}", cfg.version);
    }
    if let Some(e) = a.epochs {
        cfg.train.total_epochs = e;
    }
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.init_seed = s;
    }
    cfg.train.validate()?;
    let input: Geometry = cfg.input.parse().map_err(|e| anyhow::anyhow!("input `{}`: {e}", cfg.input))?;
    if input.height != input.width || cfg.base < input.height {
        bail!("input must be square and no larger than base {}", cfg.base);
    }
    write_manifest(out, cli, serde_json::to_value(&cfg)?)?;

    let (train_set, validation): (Box<dyn network::Dataset>, Option<Box<dyn network::Dataset>>) = match &cfg.data {
        DataConfig::Shapes { train_count, test_count, corpus_seed, label_drop, drop_seed } => {
            let clean = ShapesCorpus::generate(*train_count, cfg.base, *corpus_seed);
            let train = if *label_drop > 0.0 { clean.with_missing_labels(*label_drop, *drop_seed) } else { clean };
            let test = (*test_count > 0).then(|| ShapesCorpus::generate(*test_count, cfg.base, corpus_seed.wrapping_add(1)));
            (Box::new(train), test.map(|t| Box::new(t) as Box<dyn network::Dataset>))
        }
        DataConfig::Images { images, labels, vocab, validation_images, validation_labels } => {
            let vocab = read_vocab(&corpus_path(vocab))?;
            if vocab.len() != cfg.head.num_classes {
                bail!("vocabulary has {} tags but the head has {} classes", vocab.len(), cfg.head.num_classes);
            }
            let train = ImageFolder::open(&corpus_path(images), cfg.base)?.with_labels(&fs::read_to_string(corpus_path(labels))?, &vocab)?;
            log::info!("{} images, {} labelled", network::Dataset::len(&train), train.labelled());
            let val = match (validation_images, validation_labels) {
                (Some(i), Some(l)) => {
                    Some(ImageFolder::open(&corpus_path(i), cfg.base)?.with_labels(&fs::read_to_string(corpus_path(l))?, &vocab)?)
                }
                (None, None) => None,
                _ => bail!("validation_images and validation_labels must be given together"),
            };
            (Box::new(train), val.map(|v| Box::new(v) as Box<dyn network::Dataset>))
        }
    };

    let mut net = match &a.resume {
        Some(path) => {
            let (net, _) = load_checkpoint(path)?;
            if net.input != input || net.head != cfg.head {
                bail!("checkpoint {} does not match the configured input or head", path.display());
            }
            net
        }
        None => build_from_arch_with(&load_arch(&cfg.arch)?, input, &cfg.head, cfg.init_seed, cfg.init)?,
    };
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let opts = TrainOptions {
        crop: input.height,
        checkpoint_dir: Some(ckpt_dir),
        validation: validation.as_deref(),
        max_epochs: None,
    };
    let metrics = network::train(&mut net, train_set.as_ref(), &cfg.train, &opts)?;
    save_checkpoint(&net, &cfg.train, &out.join("final.ckpt"))?;
    let mut lines = String::new();
    for m in &metrics {
        // wall-clock time stays in the log, not in run outputs
        let mut v = serde_json::to_value(m)?;
        v.as_object_mut().expect("struct").remove("seconds");
        lines.push_str(&serde_json::to_string(&v)?);
        lines.push('\n');
    }
    fs::write(out.join("metrics.jsonl"), lines)?;
    if let Some(val) = &validation {
        let map = network::evaluate(&net, val.as_ref(), input.height, 64)?;
        say!("validation mAP {map:.4} after {} epochs", net.epoch);
        write_json(&out.join("validation.json"), &json!({ "map": map, "epoch": net.epoch }))?;
    } else {
        say!("trained to epoch {}", net.epoch);
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

