mod config;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::LevelFilter;

use medqa_core::annotation::{FactBase, ReportAnnotation, SynonymSchema};
use medqa_core::baseline::{self, BatchOptions, EndpointConfig, HttpEndpoint, PromptTemplates};
use medqa_core::eval::{self, strata_meta, StrataMeta};
use medqa_core::ocr::{parse_ocr_json_with, ParseOptions};
use medqa_core::parallel::map_ordered;
use medqa_core::qa::{self, BigramCosine};
use medqa_core::quality::{validate_annotation, Severity};
use medqa_core::seeding::derive_seed;
use medqa_core::synth::{self, SynthSpec};
use medqa_core::{restore, Execution};

use config::PipelineConfig;

const EXIT_ISSUES: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "medqa", version, about = "OCR layout restoration, report QA generation and scoring")]
struct Cli {
    /// Worker threads for per-document parallelism (default: logical CPUs).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true, default_value = "warn")]
    log_level: LevelFilter,
    /// TOML pipeline configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Restore layout-faithful text from OCR JSON documents.
    Restore(RestoreArgs),
    /// Check annotations for missing fields, count and flag mismatches.
    Validate(ValidateArgs),
    /// Generate a QA bank (JSONL) from annotations.
    GenQa(GenQaArgs),
    /// Score predictions against a QA bank.
    Score(ScoreArgs),
    /// Query a text-model endpoint for every bank item.
    RunBaseline(BaselineArgs),
    /// Write synthetic OCR documents with ground truth.
    Synth(SynthArgs),
}

#[derive(Args)]
struct RestoreArgs {
    /// An OCR JSON file, or a directory of them (`*.truth.json` and `*.linemap.json` are skipped).
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    l: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write `<image_id>.linemap.json`.
    #[arg(long)]
    emit_line_map: bool,
    /// Reject inputs whose boxes look like [x0, y0, x1, y1] order.
    #[arg(long)]
    strict_bbox: bool,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    annotations: PathBuf,
    /// Synonym schema JSON (default: built-in schema).
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Where to write the issue list as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Exit with status 1 if any error-severity issue is found.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct GenQaArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    facts: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    unanswerable_fraction: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    preds: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Annotation directory supplying image type and quality for strata.
    #[arg(long)]
    annotations: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    bank: PathBuf,
    /// Directory of restored `<image_id>.txt` files.
    #[arg(long)]
    docs: PathBuf,
    /// Endpoint config JSON; the token comes from the environment variable it names.
    #[arg(long)]
    endpoint: Option<PathBuf>,
    #[arg(long)]
    facts: Option<PathBuf>,
    /// Directory with `plain.txt` / `context.txt` prompt templates.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Write the rendered prompts to --out instead of calling the endpoint.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// SynthSpec JSON (default: built-in spec).
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    /// Draw rows (3-30) and columns (1-5) per document instead of using the spec's.
    #[arg(long)]
    vary_layout: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    env_logger::Builder::new().filter_level(cli.log_level).format_timestamp(None).init();

    let mut cfg = match PipelineConfig::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    if let Some(cmd) = &cli.command {
        apply_overrides(&mut cfg, cmd);
    }
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_USAGE);
    }
    if cli.print_config {
        return match cfg.to_toml() {
            Ok(t) => {
                print!("{t}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(EXIT_RUNTIME)
            }
        };
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required (see --help)");
        return ExitCode::from(EXIT_USAGE);
    };

    let exec = match configure_pool(cli.jobs) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(command, &cfg, exec) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn configure_pool(jobs: Option<usize>) -> Result<Execution> {
    match jobs {
        Some(0) => bail!("--jobs must be at least 1"),
        Some(1) => Ok(Execution::Sequential),
        #[cfg(feature = "parallel")]
        Some(n) => {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
            Ok(Execution::Parallel)
        }
        #[cfg(not(feature = "parallel"))]
        Some(_) => Ok(Execution::Sequential),
        None => Ok(Execution::default()),
    }
}

fn apply_overrides(cfg: &mut PipelineConfig, cmd: &Command) {
    match cmd {
        Command::Restore(a) => {
            let e = &mut cfg.esra;
            e.r = a.r.unwrap_or(e.r);
            e.l = a.l.unwrap_or(e.l);
            e.k = a.k.unwrap_or(e.k);
            e.seed = a.seed.unwrap_or(e.seed);
        }
        Command::Validate(a) => {
            cfg.paths.schema = a.schema.clone().or(cfg.paths.schema.take());
        }
        Command::GenQa(a) => {
            cfg.paths.schema = a.schema.clone().or(cfg.paths.schema.take());
            cfg.paths.facts = a.facts.clone().or(cfg.paths.facts.take());
            let g = &mut cfg.generator;
            g.seed = a.seed.unwrap_or(g.seed);
            g.unanswerable_fraction = a.unanswerable_fraction.unwrap_or(g.unanswerable_fraction);
        }
        Command::RunBaseline(a) => {
            cfg.paths.endpoint = a.endpoint.clone().or(cfg.paths.endpoint.take());
            cfg.paths.facts = a.facts.clone().or(cfg.paths.facts.take());
            cfg.paths.templates = a.templates.clone().or(cfg.paths.templates.take());
        }
        Command::Score(_) | Command::Synth(_) => {}
    }
}

fn run(command: Command, cfg: &PipelineConfig, exec: Execution) -> Result<u8> {
    match command {
        Command::Restore(a) => cmd_restore(&a, cfg, exec),
        Command::Validate(a) => cmd_validate(&a, cfg),
        Command::GenQa(a) => cmd_gen_qa(&a, cfg, exec),
        Command::Score(a) => cmd_score(&a, exec),
        Command::RunBaseline(a) => cmd_run_baseline(&a, cfg),
        Command::Synth(a) => cmd_synth(&a, exec),
    }
}

/// `*.json` files of a directory in name order, skipping `skip` suffixes;
/// a plain file is returned as is.
fn json_inputs(path: &Path, skip: &[&str]) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(path).with_context(|| format!("reading {}", path.display()))? {
        let p = entry?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if p.is_file() && name.ends_with(".json") && !skip.iter().any(|s| name.ends_with(s)) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Image ids become file names; path separators are replaced.
fn file_stem(image_id: &str) -> String {
    image_id.chars().map(|c| if matches!(c, '/' | '\\' | ':') { '_' } else { c }).collect()
}

fn load_schema(cfg: &PipelineConfig) -> Result<SynonymSchema> {
    match &cfg.paths.schema {
        Some(p) => SynonymSchema::from_json(&read(p)?).with_context(|| p.display().to_string()),
        None => Ok(SynonymSchema::builtin()),
    }
}

fn load_facts(path: Option<&Path>) -> Result<FactBase> {
    match path {
        Some(p) => FactBase::from_json(&read(p)?).with_context(|| p.display().to_string()),
        None => Ok(FactBase::new(Vec::new())?),
    }
}

fn load_annotations(dir: &Path) -> Result<Vec<ReportAnnotation>> {
    json_inputs(dir, &[])?
        .iter()
        .map(|p| ReportAnnotation::from_json(&read(p)?).with_context(|| p.display().to_string()))
        .collect()
}

fn cmd_restore(a: &RestoreArgs, cfg: &PipelineConfig, exec: Execution) -> Result<u8> {
    let files = json_inputs(&a.input, &[".truth.json", ".linemap.json"])?;
    fs::create_dir_all(&a.out)?;
    let opts = ParseOptions { strict_bbox_order: a.strict_bbox };
    let results = map_ordered(&files, exec, |_, path| -> Result<()> {
        let doc = parse_ocr_json_with(&read(path)?, opts)?;
        let restored = restore(&doc, &cfg.esra)?;
        let stem = file_stem(&doc.image_id);
        write(&a.out.join(format!("{stem}.txt")), format!("{}\n", restored.text))?;
        if a.emit_line_map {
            write(&a.out.join(format!("{stem}.linemap.json")), restored.line_map_json())?;
        }
        Ok(())
    });
    let mut failed = 0;
    for (path, r) in files.iter().zip(results) {
        if let Err(e) = r {
            log::error!("{}: {e:#}", path.display());
            failed += 1;
        }
    }
    log::info!("restored {} of {} documents", files.len() - failed, files.len());
    if failed > 0 {
        bail!("{failed} of {} documents failed", files.len());
    }
    Ok(0)
}

fn cmd_validate(a: &ValidateArgs, cfg: &PipelineConfig) -> Result<u8> {
    let schema = load_schema(cfg)?;
    let anns = load_annotations(&a.annotations)?;
    let issues: Vec<_> = anns.iter().flat_map(|ann| validate_annotation(ann, &schema)).collect();
    if let Some(report) = &a.report {
        write(report, serde_json::to_string_pretty(&issues)?)?;
    }
    let errors = issues.iter().filter(|i| i.severity == Severity::Error).count();
    for i in &issues {
        eprintln!("{}: {:?} {:?}: {}", i.image_id, i.severity, i.code, i.detail);
    }
    println!("{} annotations, {} errors, {} warnings", anns.len(), errors, issues.len() - errors);
    Ok(if a.strict && errors > 0 { EXIT_ISSUES } else { 0 })
}

fn cmd_gen_qa(a: &GenQaArgs, cfg: &PipelineConfig, exec: Execution) -> Result<u8> {
    let schema = load_schema(cfg)?;
    let facts = load_facts(cfg.paths.facts.as_deref())?;
    let anns = load_annotations(&a.annotations)?;
    let bank = qa::generate_bank(&anns, &facts, &schema, &BigramCosine, &cfg.generator, exec)?;
    write(&a.out, qa::write_jsonl(&bank))?;
    println!("{} QA items from {} annotations", bank.len(), anns.len());
    Ok(0)
}

fn cmd_score(a: &ScoreArgs, exec: Execution) -> Result<u8> {
    let bank = qa::read_jsonl(&fs::read_to_string(&a.bank)?).with_context(|| a.bank.display().to_string())?;
    let preds = eval::read_predictions(&fs::read_to_string(&a.preds)?).with_context(|| a.preds.display().to_string())?;
    let meta: StrataMeta = match &a.annotations {
        Some(dir) => strata_meta(&load_annotations(dir)?),
        None => StrataMeta::new(),
    };
    let report = eval::score_run(&bank, &preds, &meta, exec)?;
    write(&a.out, serde_json::to_string_pretty(&report)?)?;
    print!("{}", report.to_table());
    Ok(0)
}

fn cmd_run_baseline(a: &BaselineArgs, cfg: &PipelineConfig) -> Result<u8> {
    let bank = qa::read_jsonl(&fs::read_to_string(&a.bank)?).with_context(|| a.bank.display().to_string())?;
    let facts = load_facts(cfg.paths.facts.as_deref())?;
    let templates = match &cfg.paths.templates {
        Some(dir) => PromptTemplates::from_dir(dir)?,
        None => PromptTemplates::builtin(),
    };
    let mut docs = HashMap::new();
    for item in &bank {
        if docs.contains_key(&item.image_id) {
            continue;
        }
        let path = a.docs.join(format!("{}.txt", file_stem(&item.image_id)));
        let text = fs::read_to_string(&path).with_context(|| format!("restored text for {}", item.image_id))?;
        docs.insert(item.image_id.clone(), text.trim_end_matches('\n').to_string());
    }
    let prompts = baseline::build_prompts(&bank, &docs, &facts, &templates)?;
    if a.dry_run {
        baseline::write_prompts(&prompts, &a.out)?;
        println!("dry run: {} prompts written to {}", prompts.len(), a.out.display());
        return Ok(0);
    }
    let endpoint_path = cfg.paths.endpoint.as_ref().ok_or_else(|| anyhow!("--endpoint is required unless --dry-run"))?;
    let endpoint_cfg = EndpointConfig::from_json(&read(endpoint_path)?)?;
    let opts = BatchOptions::from(&endpoint_cfg);
    let endpoint = HttpEndpoint::new(endpoint_cfg)?;
    let summary = baseline::run_batch(&prompts, &endpoint, &opts, &a.out)?;
    println!(
        "{} written, {} already present, {} failed",
        summary.written,
        summary.skipped,
        summary.failures.len()
    );
    Ok(0)
}

fn cmd_synth(a: &SynthArgs, exec: Execution) -> Result<u8> {
    let base: SynthSpec = match &a.spec {
        Some(p) => serde_json::from_slice(&read(p)?).with_context(|| p.display().to_string())?,
        None => SynthSpec::default(),
    };
    base.validate()?;
    let specs: Vec<SynthSpec> = if a.vary_layout {
        synth::ensemble(base.seed, a.n, base.noise)
            .into_iter()
            .map(|s| SynthSpec { rows: s.rows, columns: s.columns, seed: s.seed, ..base.clone() })
            .collect()
    } else {
        (0..a.n).map(|i| SynthSpec { seed: derive_seed(base.seed, i as u64), ..base.clone() }).collect()
    };
    let corpus = synth::generate_corpus(&specs, exec)?;
    let ann_dir = a.out.join("annotations");
    fs::create_dir_all(&ann_dir)?;
    for (doc, truth) in &corpus {
        let stem = file_stem(&doc.image_id);
        write(&a.out.join(format!("{stem}.ocr.json")), medqa_core::ocr::to_ocr_json(doc))?;
        write(&a.out.join(format!("{stem}.truth.json")), serde_json::to_string_pretty(truth)?)?;
        write(&ann_dir.join(format!("{stem}.json")), synth::annotation_for(truth).to_json())?;
    }
    println!("{} documents written to {}", corpus.len(), a.out.display());
    Ok(0)
}
