//! `curbsight` command-line entry point.
//!
//! Exit codes: 0 success, 1 partial or processing failure, 2 usage or
//! configuration error. Diagnostics go to standard error; machine output
//! goes to files or standard output.

use std::fs;
use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use curbsight_core::clients::{ImageRef, Tracer};
use curbsight_core::coco::CocoDataset;
use curbsight_core::config::{sha256_file, Config, LoadedConfig};
use curbsight_core::eval::{
    attribute_accuracy, attribute_samples, build_report, coco_thresholds, detection_dataset, map_summary, render_csv,
    render_text, Predictions, ReportOptions, RunMetrics,
};
use curbsight_core::geometry::{split_panorama, EquirectImage};
use curbsight_core::pipeline::{list_inputs, BatchInput, BatchOutput, ManifestMeta, Pipeline, StoreInfo};
use curbsight_core::retrieval::{index_exemplars, ingest_documents, TextStore, VisualStore};
use curbsight_core::schema::{AttributeSchema, StructuredObjectRecord};
use curbsight_core::Error;

#[derive(Parser, Debug)]
#[command(name = "curbsight", version, about = "Structured roadside asset records from street-level panoramas")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalOpts {
    /// Configuration file (TOML). Built-in defaults are used when absent.
    #[arg(long, short = 'c', env = "CURBSIGHT_CONFIG", global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set pipeline.k=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// More log output on standard error (-v info, -vv debug, -vvv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Write every service request and response to this JSON Lines file.
    #[arg(long, value_name = "FILE", global = true)]
    trace: Option<PathBuf>,
    /// Worker threads for batch work; 0 uses every core.
    #[arg(long, short = 'j', default_value_t = 0, global = true)]
    jobs: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Chunk, embed and store standards documents in the text store.
    IngestKb {
        /// Plain-text or Markdown documents.
        #[arg(required = true)]
        docs: Vec<PathBuf>,
    },
    /// Embed annotated object crops into the visual exemplar store.
    IndexExemplars {
        /// COCO annotation file whose annotations carry `attributes`.
        annotations: PathBuf,
        /// Directory the annotation `file_name`s are relative to.
        images: PathBuf,
    },
    /// Render the configured perspective views of a panorama as PNG files.
    Split {
        pano: PathBuf,
        /// Output directory.
        #[arg(long, short, default_value = ".")]
        out: PathBuf,
    },
    /// Annotate a directory of panoramas (or one panorama file).
    Annotate {
        input: PathBuf,
        /// Output directory for `<name>.records.jsonl` and `manifest.json`.
        #[arg(long, short)]
        out: PathBuf,
        /// Base name of the records file; defaults to the input's name.
        #[arg(long)]
        name: Option<String>,
        /// Skip detection and describe the boxes of this COCO file instead;
        /// `input` is then the image directory it refers to.
        #[arg(long, value_name = "GT_JSON")]
        gt_crops: Option<PathBuf>,
    },
    /// Score predictions against ground truth and print the report tables.
    Evaluate {
        /// COCO ground truth. Without --gt/--pred the runs listed under
        /// `[evaluation]` in the configuration are scored.
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
        /// Records JSONL or COCO results JSON.
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        /// Records predicted on ground-truth crops, for attribute accuracy.
        #[arg(long, requires = "gt")]
        attributes: Option<PathBuf>,
        /// Run label used in table headers.
        #[arg(long, default_value = "run")]
        label: String,
        /// Directory for report.txt, report.json and (with --csv) report.csv.
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Also write report.csv.
        #[arg(long)]
        csv: bool,
    },
    /// Ask one question about an image, with standards context.
    Query { image: PathBuf, question: String },
    /// Schema utilities.
    Schema {
        #[command(subcommand)]
        command: SchemaCommand,
    },
}

#[derive(Subcommand, Debug)]
enum SchemaCommand {
    /// Check a schema JSON file, or validate every record of a records
    /// JSONL file against the configured schema.
    Validate { file: PathBuf },
    /// Print the configured schema as JSON.
    Show,
}

/// How a command ended, short of an error.
enum Outcome {
    Done,
    Partial,
}

fn is_usage(e: &Error) -> bool {
    matches!(e, Error::Config(_) | Error::InvalidArgument(_))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    init_logging(cli.global.verbose);
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_usage(&e) { 2 } else { 1 })
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_target(false).try_init();
}

struct Context {
    loaded: LoadedConfig,
    schema: Arc<AttributeSchema>,
    tracer: Option<Arc<Tracer>>,
    jobs: usize,
}

impl Context {
    fn new(global: &GlobalOpts) -> curbsight_core::Result<Self> {
        if let Some(p) = &global.config {
            if !p.is_file() {
                return Err(Error::Config(format!("config file {} not found", p.display())));
            }
        }
        let loaded = Config::load(global.config.as_deref(), &global.overrides)?;
        let schema = Arc::new(loaded.config.load_schema()?);
        let tracer = global.trace.as_deref().map(Tracer::create).transpose()?.map(Arc::new);
        Ok(Self { loaded, schema, tracer, jobs: global.jobs })
    }

    fn config(&self) -> &Config {
        &self.loaded.config
    }

    fn pipeline(&self) -> curbsight_core::Result<Pipeline> {
        let cfg = self.config();
        let (text, visual) = cfg.load_stores()?;
        let services = cfg.build_services(self.schema.clone(), self.tracer.clone())?;
        Pipeline::new(cfg.pipeline.clone(), cfg.prompts.clone(), self.schema.clone(), text, visual, services)
            .map(|p| p.with_tracer(self.tracer.clone()))
    }
}

fn run(cli: Cli) -> curbsight_core::Result<Outcome> {
    let ctx = Context::new(&cli.global)?;
    tracing::info!(config_hash = %ctx.loaded.hash, "configuration loaded");
    match cli.command {
        Command::IngestKb { docs } => ingest_kb(&ctx, &docs),
        Command::IndexExemplars { annotations, images } => index(&ctx, &annotations, &images),
        Command::Split { pano, out } => split(&ctx, &pano, &out),
        Command::Annotate { input, out, name, gt_crops } => annotate(&ctx, &input, &out, name, gt_crops.as_deref()),
        Command::Evaluate { gt, pred, attributes, label, out, csv } => {
            evaluate(&ctx, gt.zip(pred).map(|(g, p)| (g, p, attributes, label)), out.as_deref(), csv)
        }
        Command::Query { image, question } => query(&ctx, &image, &question),
        Command::Schema { command: SchemaCommand::Validate { file } } => validate(&ctx, &file),
        Command::Schema { command: SchemaCommand::Show } => {
            println!("{}", ctx.schema.to_json_pretty());
            Ok(Outcome::Done)
        }
    }
}

fn ensure_parent(path: &Path) -> curbsight_core::Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| io_err(dir, e)),
        _ => Ok(()),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn write_file(path: &Path, contents: &str) -> curbsight_core::Result<()> {
    ensure_parent(path)?;
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn ingest_kb(ctx: &Context, docs: &[PathBuf]) -> curbsight_core::Result<Outcome> {
    let cfg = ctx.config();
    let mut store = TextStore::load_or_new(&cfg.stores.text, cfg.services.text_embedder.dim())?;
    let services = cfg.build_services(ctx.schema.clone(), ctx.tracer.clone())?;
    let report = ingest_documents(docs, services.text_embedder.as_ref(), &mut store, cfg.chunking)?;
    ensure_parent(&cfg.stores.text)?;
    store.save(&cfg.stores.text)?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    eprintln!(
        "ingested {} documents into {} chunks ({} replaced); store {} now holds {}",
        report.docs,
        report.chunks,
        report.replaced,
        cfg.stores.text.display(),
        store.len()
    );
    Ok(Outcome::Done)
}

fn index(ctx: &Context, annotations: &Path, images: &Path) -> curbsight_core::Result<Outcome> {
    let cfg = ctx.config();
    let coco = CocoDataset::load(annotations)?;
    let mut store = VisualStore::load_or_new(&cfg.stores.visual, cfg.services.image_embedder.dim())?;
    let services = cfg.build_services(ctx.schema.clone(), ctx.tracer.clone())?;
    let report = index_exemplars(
        &coco,
        images,
        services.image_embedder.as_ref(),
        &mut store,
        &ctx.schema,
        cfg.pipeline.pad_fraction,
    )?;
    ensure_parent(&cfg.stores.visual)?;
    store.save(&cfg.stores.visual)?;
    for s in &report.skipped {
        tracing::warn!(annotation = s.annotation_id, "skipped: {}", s.reason);
    }
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    eprintln!(
        "indexed {} exemplars, skipped {}; store {} now holds {}",
        report.exemplars,
        report.skipped.len(),
        cfg.stores.visual.display(),
        store.len()
    );
    Ok(if report.skipped.is_empty() { Outcome::Done } else { Outcome::Partial })
}

fn split(ctx: &Context, pano_path: &Path, out: &Path) -> curbsight_core::Result<Outcome> {
    let stem = pano_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "pano".into());
    let pano = EquirectImage::open(stem.clone(), pano_path)?;
    let views = split_panorama(&pano, &ctx.config().pipeline.views)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    for (view_id, raster) in views {
        let path = out.join(format!("{stem}_{view_id}.png"));
        raster.save(&path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        println!("{}", path.display());
    }
    Ok(Outcome::Done)
}

fn store_info(modality: &str, path: &Path, entries: usize) -> curbsight_core::Result<StoreInfo> {
    let exists = path.is_file();
    Ok(StoreInfo {
        modality: modality.into(),
        path: exists.then(|| path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()),
        sha256: if exists { Some(sha256_file(path)?) } else { None },
        entries,
    })
}

fn annotate(
    ctx: &Context,
    input: &Path,
    out: &Path,
    name: Option<String>,
    gt_crops: Option<&Path>,
) -> curbsight_core::Result<Outcome> {
    let pipeline = ctx.pipeline()?;
    let output: BatchOutput = match gt_crops {
        Some(gt) => {
            let gt = CocoDataset::load(gt)?;
            pipeline.run_gt_crops(&gt, input, ctx.jobs)?
        }
        None if input.is_dir() => pipeline.run_batch(&list_inputs(input)?, ctx.jobs)?,
        None if input.is_file() => {
            let image_id = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            pipeline.run_batch(&[BatchInput { image_id, path: input.to_path_buf() }], ctx.jobs)?
        }
        None => return Err(Error::InvalidArgument(format!("{} does not exist", input.display()))),
    };
    let name = name.unwrap_or_else(|| {
        let base = if input.is_dir() { input.file_name() } else { input.file_stem() };
        base.map(|s| s.to_string_lossy().into_owned()).filter(|s| !s.is_empty()).unwrap_or_else(|| "output".into())
    });
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let records_file = format!("{name}.records.jsonl");
    write_file(&out.join(&records_file), &output.records_jsonl())?;

    let cfg = ctx.config();
    let meta = ManifestMeta {
        config_hash: ctx.loaded.hash.clone(),
        schema_version: ctx.schema.version.clone(),
        records_file: records_file.clone(),
        stores: vec![
            store_info("text", &cfg.stores.text, pipeline.text_store.len())?,
            store_info("visual", &cfg.stores.visual, pipeline.visual_store.len())?,
        ],
    };
    let manifest = output.manifest(meta);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_file(&out.join("manifest.json"), &text)?;

    let t = output.totals();
    eprintln!(
        "{} images ({} failed), {} records: {} ok, {} repaired, {} invalid -> {}",
        output.scenes.len(),
        output.failed_images(),
        t.records,
        t.ok,
        t.repaired,
        t.invalid,
        out.join(&records_file).display()
    );
    Ok(if output.has_failures() { Outcome::Partial } else { Outcome::Done })
}

struct RunSpec {
    label: String,
    gt: PathBuf,
    pred: PathBuf,
    attributes: Option<PathBuf>,
    train_city: Option<String>,
    test_city: Option<String>,
}

fn load_records(path: &Path) -> curbsight_core::Result<Vec<StructuredObjectRecord>> {
    match Predictions::load(path)? {
        Predictions::Records(r) => Ok(r),
        Predictions::Coco(_) => {
            Err(Error::InvalidArgument(format!("{}: attribute predictions must be records, not COCO results", path.display())))
        }
    }
}

fn evaluate_run(spec: &RunSpec, schema: &AttributeSchema, categories: &mut Vec<String>) -> curbsight_core::Result<RunMetrics> {
    let gt = CocoDataset::load(&spec.gt)?;
    for c in &gt.categories {
        if !categories.contains(&c.name) {
            categories.push(c.name.clone());
        }
    }
    let preds = Predictions::load(&spec.pred)?;
    let (dataset, alignment) = detection_dataset(&gt, &preds, schema)?;
    let detection = map_summary(&dataset, &coco_thresholds())?;
    let attr_records = match &spec.attributes {
        Some(p) => Some(load_records(p)?),
        None => match preds {
            Predictions::Records(r) => Some(r),
            Predictions::Coco(_) => None,
        },
    };
    let attributes = match attr_records.and_then(|r| attribute_samples(&gt, &r)) {
        Some(samples) => Some(attribute_accuracy(&samples, schema)?),
        None if spec.attributes.is_some() => {
            return Err(Error::Evaluation(format!(
                "{}: no record refers to a ground-truth object (expected ids like ann-<id>)",
                spec.attributes.as_ref().expect("checked").display()
            )))
        }
        None => None,
    };
    if alignment.unknown_image > 0 || alignment.unknown_category > 0 {
        tracing::warn!(
            run = %spec.label,
            unknown_image = alignment.unknown_image,
            unknown_category = alignment.unknown_category,
            "some predictions could not be matched to the ground truth"
        );
    }
    Ok(RunMetrics {
        label: spec.label.clone(),
        train_city: spec.train_city.clone(),
        test_city: spec.test_city.clone(),
        detection: Some(detection),
        attributes,
        alignment,
    })
}

fn evaluate(
    ctx: &Context,
    single: Option<(PathBuf, PathBuf, Option<PathBuf>, String)>,
    out: Option<&Path>,
    csv: bool,
) -> curbsight_core::Result<Outcome> {
    let cfg = ctx.config();
    let specs: Vec<RunSpec> = match single {
        Some((gt, pred, attributes, label)) => {
            vec![RunSpec { label, gt, pred, attributes, train_city: None, test_city: None }]
        }
        None => cfg
            .evaluation
            .runs
            .iter()
            .map(|r| RunSpec {
                label: r.label.clone(),
                gt: r.gt.clone(),
                pred: r.pred.clone(),
                attributes: r.attributes.clone(),
                train_city: r.train_city.clone(),
                test_city: r.test_city.clone(),
            })
            .collect(),
    };
    if specs.is_empty() {
        return Err(Error::InvalidArgument("pass --gt and --pred, or list runs under [evaluation] in the config".into()));
    }
    let mut categories = Vec::new();
    let runs = specs.iter().map(|s| evaluate_run(s, &ctx.schema, &mut categories)).collect::<curbsight_core::Result<Vec<_>>>()?;
    let options = ReportOptions { novel_classes: cfg.evaluation.novel_classes.clone() };
    let report = build_report(&categories, runs, &options)?;
    let text = render_text(&report);
    print!("{text}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_file(&dir.join("report.txt"), &text)?;
        let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
        json.push('\n');
        write_file(&dir.join("report.json"), &json)?;
        if csv || cfg.evaluation.csv {
            write_file(&dir.join("report.csv"), &render_csv(&report))?;
        }
    }
    Ok(Outcome::Done)
}

fn query(ctx: &Context, image: &Path, question: &str) -> curbsight_core::Result<Outcome> {
    let pipeline = ctx.pipeline()?;
    let raster = image::open(image).map_err(|e| Error::Image(format!("{}: {e}", image.display())))?.to_rgb8();
    let id = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let answer = pipeline.answer_query(ImageRef { id: &id, raster: &raster }, question)?;
    println!("{}", answer.trim_end());
    Ok(Outcome::Done)
}

fn validate(ctx: &Context, file: &Path) -> curbsight_core::Result<Outcome> {
    let text = fs::read_to_string(file).map_err(|e| io_err(file, e))?;
    let as_schema = serde_json::from_str::<serde_json::Value>(&text)
        .ok()
        .is_some_and(|v| v.get("categories").is_some());
    if as_schema {
        let schema = AttributeSchema::from_json_str(&text, &file.display().to_string())?;
        println!(
            "{}",
            serde_json::json!({ "valid": true, "version": schema.version, "categories": schema.categories().len() })
        );
        return Ok(Outcome::Done);
    }
    let mut invalid = 0usize;
    let mut total = 0usize;
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        total += 1;
        let origin = format!("{}:{}", file.display(), n + 1);
        let report = match serde_json::from_str::<StructuredObjectRecord>(line) {
            Ok(record) => {
                let r = ctx.schema.validate_record(&record);
                serde_json::json!({ "line": n + 1, "object_id": record.object_id, "valid": r.valid, "violations": r.violations })
            }
            Err(e) => serde_json::json!({ "line": n + 1, "valid": false, "error": e.to_string() }),
        };
        if report["valid"] != serde_json::Value::Bool(true) {
            invalid += 1;
            tracing::warn!("{origin}: record fails validation");
        }
        println!("{report}");
    }
    eprintln!("{total} records checked, {invalid} invalid");
    Ok(if invalid == 0 { Outcome::Done } else { Outcome::Partial })
}
