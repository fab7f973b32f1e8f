//! `cadenza`: batch and scripted access to the engine.
//!
//! Machine output goes to stdout (or `--output`), diagnostics to stderr.
//! Exit codes: 0 success, 1 usage, 2 data, 3 completion backend.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use cadenza_core::agent::{Agent, AgentError, Attachment, Session, SystemClock};
use cadenza_core::dsp::{baseline_transcribe, load_wav, synthesize, SynthNote, SynthOptions};
use cadenza_core::formats::{export_midi, read_file, render_score};
use cadenza_core::metrics::{
    levenshtein, meteor_lite, rouge1, rouge_l, similarity_ratio, tokenize, LsaConfig, LsaModel, TokenizeConfig,
};
use cadenza_core::pipeline::{
    align_performance, evaluate_aligned, load_performance, load_score_file, piece_name, AlignMode, Performance,
};
use cadenza_core::retrieval::{
    index_library, match_implicit, search_explicit_with, LibraryIndex, Probe, DEFAULT_EXPLICIT_THRESHOLD, INDEX_FILE,
};
use cadenza_core::score::{concat_measures, parse_abc, serialize_abc, split_measures, TimeSignature};
use cadenza_service::{build_agent, make_backend, Config, StartupError};

const USAGE: u8 = 1;
const DATA: u8 = 2;
const BACKEND: u8 = 3;

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: USAGE, message: message.into() }
    }

    fn data(message: impl std::fmt::Display) -> Self {
        Self { code: DATA, message: message.to_string() }
    }
}

impl From<AgentError> for Failure {
    fn from(e: AgentError) -> Self {
        let code = match e {
            AgentError::BackendTimeout(_) | AgentError::Backend(_) => BACKEND,
            _ => DATA,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<StartupError> for Failure {
    fn from(e: StartupError) -> Self {
        let code = if matches!(e, StartupError::Backend(_)) { BACKEND } else { DATA };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T> = Result<T, Failure>;

#[derive(Debug, Parser)]
#[command(name = "cadenza", version, about = "Score parsing, transcription, alignment, evaluation and retrieval")]
struct Cli {
    /// Write machine output here instead of stdout.
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,
    /// TOML config shared with the HTTP service.
    #[arg(long, global = true, env = "CADENZA_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse an ABC file and print it in canonical form.
    ParseAbc {
        file: PathBuf,
        /// Print the parsed Score as JSON instead.
        #[arg(long)]
        json: bool,
    },
    /// Split a score into per-measure ABC fragments (JSON).
    AbcSplit { file: PathBuf },
    /// Join fragments produced by abc-split back into one ABC tune.
    AbcConcat { file: PathBuf },
    /// Transcribe a WAV recording into PerformanceNotes JSON.
    Transcribe {
        wav: PathBuf,
        /// Also write the notes as a MIDI file.
        #[arg(long)]
        midi_out: Option<PathBuf>,
    },
    /// Align a performance to a score (AlignmentResult JSON).
    Align(AlignArgs),
    /// Align and evaluate a performance (EvaluationReport JSON).
    Evaluate(AlignArgs),
    /// Text similarity between a reference and a hypothesis.
    Metrics(MetricsArgs),
    /// Index, search or match a score library.
    #[command(subcommand)]
    Library(LibraryCommand),
    /// Render a score as MIDI, WAV or PerformanceNotes JSON.
    Render {
        score: PathBuf,
        #[arg(long)]
        tempo: Option<f64>,
        #[arg(long, value_enum, default_value = "json")]
        format: RenderFormat,
    },
    /// Conversational loop over stdin/stdout.
    Agent(AgentArgs),
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        library: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct AlignArgs {
    /// ABC, MusicXML or MXL score.
    #[arg(long, required = true)]
    score: Option<PathBuf>,
    /// WAV, MIDI or PerformanceNotes JSON.
    #[arg(long, required = true)]
    performance: Option<PathBuf>,
    /// Reference tempo in BPM.
    #[arg(long)]
    tempo: Option<f64>,
    /// Transcribe audio and align the notes symbolically.
    #[arg(long)]
    symbolic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Metric {
    Levenshtein,
    Rouge1,
    Rougel,
    Meteor,
    Lsa,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    #[arg(value_enum)]
    metric: Metric,
    #[arg(long = "ref")]
    reference: String,
    #[arg(long)]
    hyp: String,
    /// Print {metric, value, config} instead of the bare value.
    #[arg(long)]
    json: bool,
    /// Extra documents (one per line) for fitting the LSA model.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Latent dimensions for LSA; 0 keeps raw TF-IDF space.
    #[arg(long, default_value_t = 100)]
    dims: usize,
}

#[derive(Debug, Subcommand)]
enum LibraryCommand {
    /// Index every score below a directory and write its index file.
    Index { dir: PathBuf },
    /// Fuzzy title/composer search.
    Search {
        query: String,
        #[arg(long)]
        library: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_EXPLICIT_THRESHOLD)]
        threshold: f64,
    },
    /// Melody match for a score or performance file.
    Match {
        file: PathBuf,
        #[arg(long)]
        library: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RenderFormat {
    Json,
    Midi,
    Wav,
}

#[derive(Debug, Args)]
struct AgentArgs {
    /// Resume this session instead of starting a new one.
    #[arg(long)]
    session: Option<String>,
    #[arg(long)]
    library: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Fragment {
    abc: String,
    time_signature: TimeSignature,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("cadenza: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let config = Config::load(cli.config.as_deref()).map_err(Failure::data)?;
    let out = Output(cli.output);
    match cli.command {
        Command::ParseAbc { file, json } => {
            let score = parse_abc(&read_text(&file)?).map_err(Failure::data)?;
            if json {
                out.json(&score)
            } else {
                out.text(&serialize_abc(&score).map_err(Failure::data)?)
            }
        }
        Command::AbcSplit { file } => {
            let score = load_score(&file)?;
            let fragments: Vec<Fragment> = split_measures(&score)
                .map_err(Failure::data)?
                .into_iter()
                .map(|(abc, time_signature)| Fragment { abc, time_signature })
                .collect();
            out.json(&fragments)
        }
        Command::AbcConcat { file } => {
            let fragments: Vec<Fragment> = serde_json::from_str(&read_text(&file)?).map_err(Failure::data)?;
            let pairs: Vec<(String, TimeSignature)> =
                fragments.into_iter().map(|f| (f.abc, f.time_signature)).collect();
            let score = concat_measures(&pairs).map_err(Failure::data)?;
            out.text(&serialize_abc(&score).map_err(Failure::data)?)
        }
        Command::Transcribe { wav, midi_out } => {
            let audio = load_wav(&read_bytes(&wav)?).map_err(Failure::data)?;
            let notes = baseline_transcribe(&audio).map_err(Failure::data)?.notes;
            if let Some(path) = midi_out {
                write_file(&path, &export_midi(&notes, 480, 120.0))?;
            }
            out.json(&notes)
        }
        Command::Align(args) => {
            let (_, aligned) = align(&args, &config)?;
            out.json(&aligned.alignment)
        }
        Command::Evaluate(args) => {
            let (piece, aligned) = align(&args, &config)?;
            out.json(&evaluate_aligned(&piece, &aligned))
        }
        Command::Metrics(args) => metrics(&args, &out),
        Command::Library(cmd) => library(cmd, &config, &out),
        Command::Render { score, tempo, format } => {
            let score = load_score(&score)?;
            let tempo = tempo_or(tempo, &config)?;
            let notes = render_score(&score, tempo);
            match format {
                RenderFormat::Json => out.json(&notes),
                RenderFormat::Midi => out.bytes(&export_midi(&notes, 480, tempo)),
                RenderFormat::Wav => {
                    let synth = SynthNote::from_performance(&notes, 0.4);
                    out.bytes(&synthesize(&synth, &SynthOptions::default()).to_wav_bytes())
                }
            }
        }
        Command::Agent(args) => agent(args, config, &out),
        Command::Serve { host, port, library } => {
            let mut config = config;
            if let Some(h) = host {
                config.host = h;
            }
            if let Some(p) = port {
                config.port = p;
            }
            if library.is_some() {
                config.library_path = library;
            }
            let runtime = tokio::runtime::Runtime::new().map_err(Failure::data)?;
            Ok(runtime.block_on(cadenza_service::serve(config))?)
        }
    }
}

struct Output(Option<PathBuf>);

impl Output {
    fn bytes(&self, data: &[u8]) -> CliResult<()> {
        match &self.0 {
            Some(path) => write_file(path, data),
            None => {
                let mut stdout = std::io::stdout().lock();
                stdout.write_all(data).and_then(|_| stdout.flush()).map_err(Failure::data)
            }
        }
    }

    fn text(&self, text: &str) -> CliResult<()> {
        let mut s = text.to_string();
        if !s.ends_with('\n') {
            s.push('\n');
        }
        self.bytes(s.as_bytes())
    }

    fn json<T: Serialize>(&self, value: &T) -> CliResult<()> {
        self.text(&serde_json::to_string_pretty(value).map_err(Failure::data)?)
    }
}

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    read_file(path).map_err(Failure::data)
}

fn read_text(path: &Path) -> CliResult<String> {
    String::from_utf8(read_bytes(path)?).map_err(|_| Failure::data(format!("{} is not UTF-8", path.display())))
}

fn write_file(path: &Path, data: &[u8]) -> CliResult<()> {
    std::fs::write(path, data).map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_score(path: &Path) -> CliResult<cadenza_core::score::Score> {
    load_score_file(&file_name(path), &read_bytes(path)?).map_err(|e| Failure::data(format!("score: {e}")))
}

fn tempo_or(flag: Option<f64>, config: &Config) -> CliResult<f64> {
    let tempo = flag.unwrap_or(config.default_tempo_bpm);
    if tempo.is_finite() && tempo > 0.0 {
        Ok(tempo)
    } else {
        Err(Failure::usage(format!("invalid tempo {tempo}")))
    }
}

fn align(args: &AlignArgs, config: &Config) -> CliResult<(String, cadenza_core::pipeline::Aligned)> {
    // clap enforces presence; the Options only keep the field types simple.
    let (Some(score_path), Some(perf_path)) = (&args.score, &args.performance) else {
        return Err(Failure::usage("--score and --performance are required"));
    };
    let tempo = tempo_or(args.tempo, config)?;
    let score = load_score(score_path)?;
    let performance = load_performance(&file_name(perf_path), &read_bytes(perf_path)?)
        .map_err(|e| Failure::data(format!("performance: {e}")))?;
    let mode = if args.symbolic { AlignMode::Symbolic } else { AlignMode::Auto };
    let aligned =
        align_performance(&score, &performance, tempo, mode).map_err(|e| Failure::data(format!("alignment: {e}")))?;
    Ok((piece_name(&score, &file_name(score_path)), aligned))
}

fn metrics(args: &MetricsArgs, out: &Output) -> CliResult<()> {
    let tok = TokenizeConfig::default();
    let (r, h) = (tokenize(&args.reference, &tok), tokenize(&args.hyp, &tok));
    let (plain, value, config) = match args.metric {
        Metric::Levenshtein => {
            let d = levenshtein(&args.reference, &args.hyp);
            (
                d.to_string(),
                json!({"distance": d, "similarity": similarity_ratio(&args.reference, &args.hyp)}),
                json!({}),
            )
        }
        Metric::Rouge1 => {
            let s = rouge1(&r, &h);
            (s.f1.to_string(), json!(s), json!({"tokenize": tok}))
        }
        Metric::Rougel => {
            let s = rouge_l(&r, &h);
            (s.f1.to_string(), json!(s), json!({"tokenize": tok}))
        }
        Metric::Meteor => {
            let s = meteor_lite(&r, &h);
            (s.score.to_string(), json!(s), json!({"tokenize": tok, "synonyms": false}))
        }
        Metric::Lsa => {
            let mut docs = vec![args.reference.clone(), args.hyp.clone()];
            if let Some(path) = &args.corpus {
                docs.extend(read_text(path)?.lines().filter(|l| !l.trim().is_empty()).map(str::to_string));
            }
            let lsa = LsaConfig { tokenize: tok, dims: (args.dims > 0).then_some(args.dims) };
            let model = LsaModel::fit(&docs, &lsa).map_err(Failure::data)?;
            let c = model.cosine(&args.reference, &args.hyp);
            (c.to_string(), json!(c), json!({"lsa": lsa, "corpus_documents": docs.len()}))
        }
    };
    if args.json {
        out.json(&json!({"metric": args.metric, "value": value, "config": config}))
    } else {
        out.text(&plain)
    }
}

/// Reads `library-index.json` when present, otherwise indexes the directory.
fn open_library(flag: Option<PathBuf>, config: &Config) -> CliResult<LibraryIndex> {
    let dir = flag
        .or_else(|| config.library_path.clone())
        .ok_or_else(|| Failure::usage("no library: pass --library or set library_path"))?;
    let index_file = dir.join(INDEX_FILE);
    if index_file.is_file() {
        LibraryIndex::load(&index_file).map_err(Failure::data)
    } else {
        index_library(&dir).map_err(Failure::data)
    }
}

fn library(cmd: LibraryCommand, config: &Config, out: &Output) -> CliResult<()> {
    match cmd {
        LibraryCommand::Index { dir } => {
            let index = index_library(&dir).map_err(Failure::data)?;
            index.save(&dir).map_err(Failure::data)?;
            for s in &index.skipped {
                eprintln!("skipped {}: {}", s.path, s.reason);
            }
            out.json(&json!({
                "index_file": dir.join(INDEX_FILE),
                "entries": index.entries.len(),
                "skipped": index.skipped,
            }))
        }
        LibraryCommand::Search { query, library, threshold } => {
            let index = open_library(library, config)?;
            out.json(&json!({"hits": search_explicit_with(&index, &query, threshold)}))
        }
        LibraryCommand::Match { file, library } => {
            let index = open_library(library, config)?;
            let name = file_name(&file);
            let bytes = read_bytes(&file)?;
            let probe = match load_performance(&name, &bytes) {
                Ok(Performance::Notes(notes)) => Probe::Notes(notes),
                Ok(Performance::Audio(audio)) => {
                    Probe::Notes(baseline_transcribe(&audio).map_err(Failure::data)?.notes)
                }
                Err(_) => Probe::Score(load_score_file(&name, &bytes).map_err(Failure::data)?),
            };
            out.json(&json!({"hits": match_implicit(&index, &probe).map_err(Failure::data)?}))
        }
    }
}

/// One message per stdin line. `:attach PATH` queues a file for the next
/// message; `:quit` ends the loop. Each reply is one JSON line on stdout.
fn agent(args: AgentArgs, mut config: Config, out: &Output) -> CliResult<()> {
    if args.library.is_some() {
        config.library_path = args.library;
    }
    let backend = make_backend(&config.llm)?;
    let agent: Agent = build_agent(&config, backend, Arc::new(SystemClock))?;
    let id = args.session.unwrap_or_else(|| uuid::Uuid::new_v4().simple().to_string());
    std::fs::create_dir_all(&config.sessions_path).map_err(Failure::data)?;
    let mut session = Session::open(&config.sessions_path, &id)?;
    eprintln!("session {id}; :attach PATH queues a file, :quit exits");

    let mut replies = Vec::new();
    let mut pending: Vec<Attachment> = Vec::new();
    let mut worst: Option<Failure> = None;
    for line in std::io::stdin().lock().lines() {
        let line = line.map_err(Failure::data)?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == ":quit" {
            break;
        }
        if let Some(path) = line.strip_prefix(":attach ") {
            let path = Path::new(path.trim());
            match read_bytes(path).and_then(|b| Attachment::from_file(&file_name(path), b).map_err(Failure::from)) {
                Ok(a) => pending.push(a),
                Err(f) => eprintln!("cadenza: {}", f.message),
            }
            continue;
        }
        match agent.run_turn(&mut session, line, &std::mem::take(&mut pending)) {
            Ok(o) => {
                let reply = json!({
                    "session_id": o.session_id,
                    "turn": o.turn,
                    "intent": o.intent,
                    "response": o.response,
                    "trace": o.trace,
                });
                let text = serde_json::to_string(&reply).map_err(Failure::data)?;
                if out.0.is_some() {
                    replies.push(text);
                } else {
                    out.text(&text)?;
                }
            }
            Err(e) => {
                let f = Failure::from(e);
                eprintln!("cadenza: {}", f.message);
                if worst.as_ref().is_none_or(|w| f.code > w.code) {
                    worst = Some(f);
                }
            }
        }
    }
    if out.0.is_some() {
        out.text(&replies.join("\n"))?;
    }
    worst.map_or(Ok(()), Err)
}
