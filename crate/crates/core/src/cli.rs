//! Command-line front end: `run`, `report`, `score` and `parse`.
//!
//! Exit codes: 0 success (or converged), 1 runtime error, 2 usage or
//! validation error, 3 iteration cap reached.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::adapters::{
    ChatExtractor, ChatRefiner, EndpointConfig, GeneratorSettings, HttpClient, HttpGenerator,
    HttpLog, HttpScorer,
};
use crate::backends::sim::SimWorldState;
use crate::backends::{BackendError, Backends, Scorer, SimBackends, SimScorer, SimWorld, SimWorldConfig};
use crate::dsl;
use crate::model::{
    Aggregation, Embedding, ImagePayload, ImageRef, KeywordSet, Outcome, PolicyKind, Prompt,
    RunConfig,
};
use crate::pipeline::{self, PipelineError};
use crate::report::{self, RunColumn};
use crate::scoring::{self, split_sentences};
use crate::trace;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CAP: i32 = 3;

pub const SIM_WORLD_FILE: &str = "sim_world.json";
pub const HTTP_LOG_FILE: &str = "http_log.jsonl";
pub const DEFAULT_OUT_DIR: &str = "promptloop-out";

#[derive(Debug, Parser)]
#[command(name = "promptloop", version, about = "Iterative prompt refinement for text-to-image models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the refinement loop and write the trace to --out.
    Run(RunArgs),
    /// Render keyword and sentence tables from one or more traces.
    Report(ReportArgs),
    /// Score existing images against a keyword list, without refinement.
    Score(ScoreArgs),
    /// Parse a weighted prompt and print its effective weights.
    Parse(ParseArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Sim,
    Http,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long = "max-iter")]
    max_iter: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Md,
    Csv,
    Term,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Traces as `label=path` or `path`; a path may be a run directory.
    #[arg(required = true)]
    traces: Vec<String>,
    #[arg(long, value_enum, default_value = "md")]
    format: Format,
    /// Disable ANSI color in term output.
    #[arg(long)]
    no_color: bool,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    /// A directory of PNGs or a sim latents JSON file.
    #[arg(long)]
    images: PathBuf,
    /// One phrase per line.
    #[arg(long)]
    keywords: PathBuf,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sim world snapshot; defaults to one found next to the images.
    #[arg(long)]
    world: Option<PathBuf>,
    /// Full description, scored per sentence and overall.
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_enum, default_value = "md")]
    format: Format,
}

#[derive(Debug, Args)]
struct ParseArgs {
    prompt: String,
}

/// Configuration file for `run` and `score` (TOML).
///
/// Run settings sit at the top level. `[http]` is the fallback endpoint for
/// any of `[extractor]`, `[generator]`, `[scorer]`, `[refiner]` left out.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfigFile {
    pub prompt: Option<String>,
    pub negative_prompt: Option<String>,
    pub backend: Option<BackendKind>,
    pub out_dir: Option<PathBuf>,

    pub threshold: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_iterations: Option<usize>,
    pub weight_step: Option<f64>,
    pub weight_cap: Option<f64>,
    pub reweight_attempts_before_generalize: Option<u32>,
    pub seed: Option<u64>,
    pub aggregation: Option<Aggregation>,
    pub strict_threshold: Option<bool>,
    pub policy: Option<PolicyKind>,

    pub sim: Option<SimWorldConfig>,
    pub http: Option<EndpointConfig>,
    pub extractor: Option<EndpointConfig>,
    pub generator: Option<EndpointConfig>,
    pub scorer: Option<EndpointConfig>,
    pub refiner: Option<EndpointConfig>,
    pub generator_settings: Option<GeneratorSettings>,
    pub scorer_parallelism: Option<usize>,
}

impl CliConfigFile {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.message().to_string())
    }

    /// File values on top of the defaults.
    pub fn run_config(&self) -> RunConfig {
        let mut c = RunConfig::default();
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        take!(
            threshold,
            batch_size,
            max_iterations,
            weight_step,
            weight_cap,
            reweight_attempts_before_generalize,
            seed,
            aggregation,
            strict_threshold,
            policy
        );
        c
    }

    fn endpoint(&self, name: &str) -> Result<EndpointConfig, String> {
        let specific = match name {
            "extractor" => &self.extractor,
            "generator" => &self.generator,
            "scorer" => &self.scorer,
            _ => &self.refiner,
        };
        specific
            .clone()
            .or_else(|| self.http.clone())
            .map(EndpointConfig::with_env_key)
            .ok_or_else(|| format!("http backend needs a [{name}] or [http] endpoint block"))
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Runtime(_) => EXIT_ERROR,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_cli<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(stdout, "{text}")
            } else {
                write!(stderr, "{text}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a, stdout),
        Command::Report(a) => cmd_report(a, stdout),
        Command::Score(a) => cmd_score(a, stdout),
        Command::Parse(a) => return cmd_parse(&a.prompt, stdout, stderr),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message());
            f.code()
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<CliConfigFile, Failure> {
    match path {
        Some(p) => CliConfigFile::load(p).map_err(Failure::Usage),
        None => Ok(CliConfigFile::default()),
    }
}

fn cmd_run(args: RunArgs, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let file = load_config(args.config.as_deref())?;
    let text = args
        .prompt
        .clone()
        .or_else(|| file.prompt.clone())
        .ok_or_else(|| Failure::Usage("no prompt: pass --prompt or set `prompt` in --config".into()))?;
    let mut prompt = Prompt::new(text).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(neg) = &file.negative_prompt {
        prompt = prompt.with_negative(neg.clone()).map_err(|e| Failure::Usage(e.to_string()))?;
    }

    let mut config = file.run_config();
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(t) = args.threshold {
        config.threshold = t;
    }
    if let Some(b) = args.batch {
        config.batch_size = b;
    }
    if let Some(m) = args.max_iter {
        config.max_iterations = m;
    }
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let out = args
        .out
        .clone()
        .or_else(|| file.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    let backend = args.backend.or(file.backend).unwrap_or(BackendKind::Sim);

    let (result, after) = match backend {
        BackendKind::Sim => {
            let sims = SimBackends::new(file.sim.clone().unwrap_or_default())
                .map_err(|e| Failure::Usage(e.to_string()))?;
            let result = pipeline::run(&prompt, &config, sims.backends());
            let state = sims.world.state();
            let after = move |out: &Path| -> Result<(), Failure> {
                fs::create_dir_all(out).map_err(runtime)?;
                let mut text = serde_json::to_string_pretty(&state).expect("world state serializes");
                text.push('\n');
                fs::write(out.join(SIM_WORLD_FILE), text).map_err(runtime)
            };
            (result, Box::new(after) as Box<dyn FnOnce(&Path) -> Result<(), Failure>>)
        }
        BackendKind::Http => {
            let log = HttpLog::new();
            let client = |name: &str| -> Result<HttpClient, Failure> {
                let cfg = file.endpoint(name).map_err(Failure::Usage)?;
                HttpClient::new(cfg, log.clone()).map_err(|e| Failure::Usage(e.to_string()))
            };
            let extractor = ChatExtractor::new(client("extractor")?);
            let generator = HttpGenerator::new(
                client("generator")?,
                file.generator_settings.unwrap_or_default(),
                &out,
            );
            let mut scorer = HttpScorer::new(client("scorer")?);
            if let Some(p) = file.scorer_parallelism {
                scorer = scorer.with_parallelism(p);
            }
            let refiner = ChatRefiner::new(client("refiner")?);
            let backends = Backends {
                extractor: &extractor,
                generator: &generator,
                scorer: &scorer,
                refiner: &refiner,
            };
            let result = pipeline::run(&prompt, &config, backends);
            let after = move |out: &Path| -> Result<(), Failure> {
                fs::create_dir_all(out).map_err(runtime)?;
                log.write_jsonl(&out.join(HTTP_LOG_FILE)).map_err(runtime)
            };
            (result, Box::new(after) as Box<dyn FnOnce(&Path) -> Result<(), Failure>>)
        }
    };

    after(&out)?;
    let run_trace = result.map_err(|e| match e {
        PipelineError::ConfigInvalid(e) => Failure::Usage(e.to_string()),
        other => Failure::Runtime(other.to_string()),
    })?;
    let persisted = trace::persist_trace(&run_trace, &out).map_err(runtime)?;
    let _ = writeln!(
        stdout,
        "outcome={} iters={} max_sim={:.4}",
        persisted.outcome.short_name(),
        persisted.records.len(),
        persisted.final_max_similarity.value()
    );
    Ok(match persisted.outcome {
        Outcome::Converged => EXIT_OK,
        Outcome::IterationCapReached => EXIT_CAP,
    })
}

fn split_label(arg: &str) -> (String, PathBuf) {
    if let Some((label, path)) = arg.split_once('=') {
        if !label.is_empty() && !path.is_empty() {
            return (label.to_string(), PathBuf::from(path));
        }
    }
    let path = PathBuf::from(arg);
    let dir = if path.is_dir() { path.clone() } else { path.parent().map(Path::to_path_buf).unwrap_or_default() };
    let label = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| arg.to_string());
    (label, path)
}

fn render(tables: &report::ReportTables, format: Format, color: bool) -> String {
    match format {
        Format::Md => report::render_markdown(tables),
        Format::Csv => report::render_csv(tables),
        Format::Term => report::render_terminal(tables, color),
    }
}

fn cmd_report(args: ReportArgs, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let mut columns = Vec::new();
    for arg in &args.traces {
        let (label, path) = split_label(arg);
        let lines = trace::read_trace_lines(&path).map_err(runtime)?;
        columns.push(RunColumn::from_trace(label, &lines).expect("non-empty trace"));
    }
    let color = !args.no_color && std::env::var_os("NO_COLOR").is_none();
    let tables = report::build_report(&columns);
    let _ = write!(stdout, "{}", render(&tables, args.format, color));
    Ok(EXIT_OK)
}

/// Self-contained sim latents: a world snapshot plus one latent per image.
#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimLatentsFile {
    #[serde(default)]
    pub world: Option<SimWorldState>,
    pub latents: Vec<Embedding>,
}

fn read_keywords(path: &Path) -> Result<KeywordSet, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let phrases: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if phrases.is_empty() {
        return Err(Failure::Usage(format!("{}: no keywords", path.display())));
    }
    KeywordSet::from_phrases(phrases).map_err(|e| Failure::Usage(e.to_string()))
}

fn png_images(dir: &Path) -> Result<Vec<ImageRef>, Failure> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::Usage(format!("{}: no .png images", dir.display())));
    }
    Ok(paths
        .into_iter()
        .enumerate()
        .map(|(i, p)| ImageRef::new(0, i, ImagePayload::Path(p)))
        .collect())
}

fn find_world(images: &Path) -> Option<PathBuf> {
    let start = if images.is_dir() { images } else { images.parent()? };
    start
        .ancestors()
        .take(3)
        .map(|d| d.join(SIM_WORLD_FILE))
        .find(|p| p.is_file())
}

fn read_world(path: &Path) -> Result<SimWorldState, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn cmd_score(args: ScoreArgs, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let file = load_config(args.config.as_deref())?;
    let mut config = file.run_config();
    if let Some(t) = args.threshold {
        config.threshold = t;
    }
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let keywords = read_keywords(&args.keywords)?;

    let (images, embedded_world) = if args.images.is_dir() {
        (png_images(&args.images)?, None)
    } else {
        let text = fs::read_to_string(&args.images)
            .map_err(|e| Failure::Usage(format!("{}: {e}", args.images.display())))?;
        let parsed: SimLatentsFile = serde_json::from_str(&text)
            .map_err(|e| Failure::Usage(format!("{}: {e}", args.images.display())))?;
        if parsed.latents.is_empty() {
            return Err(Failure::Usage(format!("{}: no latents", args.images.display())));
        }
        let refs = parsed
            .latents
            .into_iter()
            .enumerate()
            .map(|(i, l)| ImageRef::new(0, i, ImagePayload::Latent(l)))
            .collect();
        (refs, parsed.world)
    };

    let backend = args.backend.or(file.backend).unwrap_or(BackendKind::Sim);
    let scorer: Box<dyn Scorer> = match backend {
        BackendKind::Sim => {
            let state = match (&args.world, embedded_world) {
                (Some(p), _) => Some(read_world(p)?),
                (None, Some(s)) => Some(s),
                (None, None) => find_world(&args.images).map(|p| read_world(&p)).transpose()?,
            };
            let world = match state {
                Some(s) => SimWorld::from_state(s),
                None => SimWorld::new(file.sim.clone().unwrap_or_default()),
            }
            .map_err(|e| Failure::Usage(e.to_string()))?;
            Box::new(SimScorer::new(Arc::new(world)))
        }
        BackendKind::Http => {
            let cfg = file.endpoint("scorer").map_err(Failure::Usage)?;
            let client = HttpClient::new(cfg, HttpLog::new()).map_err(|e: BackendError| Failure::Usage(e.to_string()))?;
            Box::new(HttpScorer::new(client))
        }
    };

    let image_embeddings = scorer.embed_image(&images).map_err(runtime)?;
    let (sentences, full_text) = match &args.prompt {
        Some(p) => (split_sentences(p), p.clone()),
        None => (Vec::new(), keywords.phrases().join(", ")),
    };
    let report = scoring::evaluate(
        &image_embeddings,
        &keywords,
        &sentences,
        &full_text,
        scorer.as_ref(),
        &config,
    )
    .map_err(runtime)?;
    let tables = report::build_report(&[RunColumn::from_report("score", &report)]);
    let color = std::env::var_os("NO_COLOR").is_none();
    let _ = write!(stdout, "{}", render(&tables, args.format, color));
    Ok(EXIT_OK)
}

fn display_weight(w: f64) -> String {
    let s = dsl::format_weight(w);
    if s.contains('.') {
        s
    } else {
        format!("{s}.0")
    }
}

/// Prints the normalized prompt, its tree and `phrase=weight` lines.
fn cmd_parse(text: &str, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    match dsl::parse(text) {
        Ok(ast) => {
            let normalized = dsl::normalize(&ast);
            let _ = writeln!(stdout, "normalized: {}", dsl::render(&ast));
            let _ = writeln!(stdout, "ast: {normalized}");
            for (phrase, w) in ast.phrase_weights() {
                let _ = writeln!(stdout, "{phrase}={}", display_weight(w));
            }
            EXIT_OK
        }
        Err(e) => {
            let pos = e.position();
            let col = text.get(..pos).map_or(pos, |s| s.chars().count());
            let _ = writeln!(stderr, "error: {e}");
            let _ = writeln!(stderr, "  {text}");
            let _ = writeln!(stderr, "  {}^", " ".repeat(col));
            EXIT_ERROR
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let mut full = vec!["promptloop"];
        full.extend_from_slice(args);
        let code = run_cli(full, &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn parse_prints_effective_weights() {
        let (code, out, _) = call(&["parse", "(cars:1.1), neon"]);
        assert_eq!(code, 0);
        assert!(out.contains("\ncars=1.1\nneon=1.0\n"), "{out}");
        let (_, out, _) = call(&["parse", "castle"]);
        assert!(out.ends_with("castle=1.0\n"), "{out}");
    }

    #[test]
    fn parse_error_has_caret() {
        let (code, _, err) = call(&["parse", "((a)"]);
        assert_eq!(code, 1);
        assert!(err.contains("UnbalancedDelimiter at byte 4"), "{err}");
        assert!(err.contains("  ((a)\n      ^\n"), "{err:?}");
    }

    #[test]
    fn unknown_config_key_is_named() {
        let err = CliConfigFile::from_toml("threshold = 0.3\nthreshhold = 0.2\n").unwrap_err();
        assert!(err.contains("threshhold"), "{err}");
        let err = CliConfigFile::from_toml("[sim]\ndims = 3\n").unwrap_err();
        assert!(err.contains("dims"), "{err}");
    }

    #[test]
    fn config_file_overrides_defaults() {
        let file = CliConfigFile::from_toml(
            "threshold = 0.3\npolicy = \"reweight_only\"\nbackend = \"sim\"\n[sim]\nexcluded_tokens = [\"x\"]\n",
        )
        .unwrap();
        let cfg = file.run_config();
        assert_eq!(cfg.threshold, 0.3);
        assert_eq!(cfg.policy, PolicyKind::ReweightOnly);
        assert_eq!(cfg.batch_size, 16);
        assert!(file.sim.unwrap().excluded_tokens.contains("x"));
    }

    #[test]
    fn http_endpoint_falls_back_to_shared_block() {
        let file = CliConfigFile::from_toml("[http]\nbase_url = \"http://127.0.0.1:1\"\n").unwrap();
        assert_eq!(file.endpoint("scorer").unwrap().base_url, "http://127.0.0.1:1");
        assert!(CliConfigFile::default().endpoint("scorer").is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(call(&["run"]).0, 2);
        assert_eq!(call(&["run", "--prompt", "castle", "--threshold", "1.5"]).0, 2);
        assert_eq!(call(&["bogus"]).0, 2);
        assert_eq!(call(&["--help"]).0, 0);
    }

    #[test]
    fn report_labels_default_to_run_dir() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("baseline");
        fs::create_dir(&run).unwrap();
        let (label, path) = split_label(run.join("trace.jsonl").to_str().unwrap());
        assert_eq!(label, "baseline");
        assert!(path.ends_with("trace.jsonl"));
        assert_eq!(split_label("refined=x/t.jsonl").0, "refined");
    }
}
