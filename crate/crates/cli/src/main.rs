use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use singalign::audio::{chunk_stream, load_wav, synth_score_audio, AudioChunk, AudioClip, ScoreNote, CHUNK_SAMPLES};
use singalign::eval::{generate_dataset, run_benchmark, BenchConfig, EvalError, PcoLevel, Phases, SynthConfig};
use singalign::features::FeatureMatrix;
use singalign::offline_align::{prepare, OfflineConfig};
use singalign::ppg::{load_ppg, PhonemeSet, PhonemeSetName, PpgMatrix};
use singalign::score::{parse_musicxml, LyricsTimeline};
use singalign::timeline::{FrameClock, TempoMap, WarpingPath};
use singalign::tracker::{
    run_tracker, serve_replay, FeatureOptions, FeatureSet, FilePpgProvider, FrameFeaturizer, LatencyReport,
    OfflineModel, Pacing, PpgProvider, StreamPpgProvider, TrackError, Tracker, TrackerConfig,
};

const SCORE_WAV: &str = "score.wav";
const PATH_CSV: &str = "score_ref_path.csv";
const TIMELINE_JSON: &str = "timeline.json";
const TEMPO_JSON: &str = "tempo.json";
const REF_WAV: &str = "ref.wav";
const REF_PPG: &str = "ppg_ref.fmx";

/// Real-time lyrics alignment for classical vocal performance.
///
/// Every flag may also be given in a `key = value` file passed with
/// `--config`; keys are long flag names without dashes, and flags on the
/// command line take precedence.
#[derive(Debug, Parser)]
#[command(name = "singalign", version, args_override_self = true)]
struct Cli {
    /// Read default flag values from a `key = value` file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Offline phase: align the synthesized score to a reference recording.
    Prepare(PrepareArgs),
    /// Online phase: follow a target performance and print lyric events.
    Track(TrackArgs),
    /// Score a dataset and print the metrics table.
    Eval(EvalArgs),
    /// Render a score to audio.
    Synth(SynthArgs),
    /// Extract a feature matrix from audio.
    Features(FeaturesArgs),
    /// Write a synthetic benchmark dataset.
    GenDataset(GenDatasetArgs),
    /// Replay precomputed posteriors over PPGSTREAM (stdio or TCP).
    ServePpg(ServePpgArgs),
}

#[derive(Debug, Args)]
struct PrepareArgs {
    /// MusicXML score (.musicxml, .xml or .mxl).
    #[arg(long)]
    score: PathBuf,
    /// Lyrics sidecar, one line per text line; defaults to lyrics.txt next to the score.
    #[arg(long)]
    lyrics: Option<PathBuf>,
    /// Reference recording, 16 kHz.
    #[arg(long = "ref", value_name = "WAV")]
    reference: PathBuf,
    /// Reference posteriors to store with the artifacts.
    #[arg(long, value_name = "FMX")]
    ref_ppg: Option<PathBuf>,
    /// Vocal part id or name.
    #[arg(long)]
    part: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct OltwArgs {
    /// Feature combination: chroma, mel, ppg:<set>, chroma+mfcc:<n>, chroma+ppg:<set>.
    #[arg(long, default_value = "chroma")]
    features: String,
    /// Skip log1p scaling of chroma.
    #[arg(long)]
    no_chroma_log1p: bool,
    /// OLTW search window in seconds.
    #[arg(long, default_value_t = 3.0)]
    window: f64,
    /// Consecutive steps allowed in one direction.
    #[arg(long, default_value_t = 3)]
    max_run_count: usize,
    /// Median filter width of the displayed position (0 disables).
    #[arg(long, default_value_t = 5)]
    median_width: usize,
    /// Posterior deadline per chunk, in ms.
    #[arg(long, default_value_t = 120)]
    ppg_deadline_ms: u64,
}

#[derive(Debug, Args)]
struct TrackArgs {
    /// Directory written by `prepare`.
    #[arg(long)]
    prepared: PathBuf,
    /// Target recording, or `-` for raw f32 little-endian 16 kHz samples on stdin.
    #[arg(long)]
    target: String,
    #[command(flatten)]
    oltw: OltwArgs,
    /// Posterior source: file:<fmx>, exec:<command line> or tcp:<host:port>.
    #[arg(long, value_name = "SPEC")]
    ppg_provider: Option<String>,
    /// Reference posteriors; defaults to ppg_ref.fmx in the prepared directory.
    #[arg(long, value_name = "FMX")]
    ref_ppg: Option<PathBuf>,
    /// Chunk release: realtime (160 ms cadence) or fast.
    #[arg(long, default_value = "realtime")]
    pace: String,
    /// Also write events to this file.
    #[arg(long, value_name = "JSONL")]
    out: Option<PathBuf>,
    /// Write the (reference frame, target frame) path as CSV.
    #[arg(long, value_name = "CSV")]
    path_out: Option<PathBuf>,
    /// Write the latency report as JSON.
    #[arg(long, value_name = "JSON")]
    latency_out: Option<PathBuf>,
    /// Do not print events on stdout.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Dataset root with one directory per song.
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    oltw: OltwArgs,
    /// Phases to run: offline, online or both.
    #[arg(long, default_value = "both")]
    phases: String,
    /// PCO counting level: word or note.
    #[arg(long, default_value = "word")]
    pco_level: String,
    /// Chunk release while tracking: realtime or fast.
    #[arg(long, default_value = "fast")]
    pace: String,
    /// Write the JSON report here.
    #[arg(long, value_name = "JSON")]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    score: PathBuf,
    #[arg(long)]
    part: Option<String>,
    /// Leave out the accompaniment.
    #[arg(long)]
    vocal_only: bool,
    #[arg(long, value_name = "WAV")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FeaturesArgs {
    #[arg(long, value_name = "WAV")]
    audio: PathBuf,
    /// Feature combination as for `track`.
    #[arg(long, default_value = "chroma")]
    features: String,
    /// Posteriors for combinations with a PPG part.
    #[arg(long, value_name = "FMX")]
    ppg: Option<PathBuf>,
    #[arg(long)]
    no_chroma_log1p: bool,
    /// Output format: fmx or csv.
    #[arg(long, default_value = "fmx")]
    format: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GenDatasetArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    songs: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Approximate notes per song.
    #[arg(long, default_value_t = 48)]
    notes: usize,
    /// Noise level relative to the target signal, in dB.
    #[arg(long, default_value_t = -20.0, allow_negative_numbers = true)]
    noise_db: f64,
    #[arg(long, default_value_t = 0.8)]
    ppg_confidence: f64,
}

#[derive(Debug, Args)]
struct ServePpgArgs {
    #[arg(long, value_name = "FMX")]
    ppg: PathBuf,
    /// Phoneme set of the file.
    #[arg(long, default_value = "phoneme5")]
    set: String,
    /// Serve one TCP client at this address instead of stdio.
    #[arg(long, value_name = "ADDR")]
    listen: Option<String>,
}

/// Failure class, reported as the exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Config = 2,
    Data = 3,
    Runtime = 4,
}

struct Failure {
    class: Class,
    err: anyhow::Error,
}

type Res<T> = Result<T, Failure>;

trait Classify<T> {
    fn class(self, class: Class) -> Res<T>;
    fn config(self) -> Res<T>
    where
        Self: Sized,
    {
        self.class(Class::Config)
    }
    fn data(self) -> Res<T>
    where
        Self: Sized,
    {
        self.class(Class::Data)
    }
    fn runtime(self) -> Res<T>
    where
        Self: Sized,
    {
        self.class(Class::Runtime)
    }
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn class(self, class: Class) -> Res<T> {
        self.map_err(|e| Failure { class, err: e.into() })
    }
}

fn track_class(e: &TrackError) -> Class {
    match e {
        TrackError::Config(_) => Class::Config,
        TrackError::ClockMismatch { .. } | TrackError::Feature(_) | TrackError::Ppg(_) => Class::Data,
        _ => Class::Runtime,
    }
}

fn eval_class(e: &EvalError) -> Class {
    match e {
        EvalError::Song { source, .. } => eval_class(source),
        EvalError::Track(t) => track_class(t),
        EvalError::Io(_) => Class::Runtime,
        _ => Class::Data,
    }
}

/// Turns `key = value` lines into long flags. `#` starts a comment; boolean
/// flags take `true` or `false`.
fn config_flags(text: &str) -> anyhow::Result<Vec<String>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected `key = value`", i + 1))?;
        let (k, v) = (k.trim().replace('_', "-"), v.trim());
        if k.is_empty() {
            return Err(anyhow!("config line {}: empty key", i + 1));
        }
        match v {
            "true" => out.push(format!("--{k}")),
            "false" => {}
            _ => out.push(format!("--{k}={v}")),
        }
    }
    Ok(out)
}

/// Inserts config-file flags right after the subcommand so that later
/// command-line flags override them.
fn expand_args(args: Vec<String>) -> Res<Vec<String>> {
    let mut config = None;
    let mut iter = args.iter().enumerate().skip(1);
    while let Some((_, a)) = iter.next() {
        if a == "--config" {
            config = iter.next().map(|(_, v)| v.clone());
        } else if let Some(v) = a.strip_prefix("--config=") {
            config = Some(v.to_string());
        }
    }
    let Some(config) = config else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&config)
        .with_context(|| format!("reading config {config}"))
        .config()?;
    let flags = config_flags(&text).with_context(|| config.clone()).config()?;
    let sub = args
        .iter()
        .enumerate()
        .skip(1)
        .find(|(i, a)| !a.starts_with('-') && !matches!(args.get(i - 1).map(String::as_str), Some("--config")))
        .map(|(i, _)| i);
    let Some(sub) = sub else {
        return Ok(args);
    };
    let mut out = args[..=sub].to_vec();
    out.extend(flags);
    out.extend_from_slice(&args[sub + 1..]);
    Ok(out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match expand_args(std::env::args().collect()) {
        Ok(a) => a,
        Err(f) => return report(f),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(Class::Config as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Prepare(a) => cmd_prepare(a),
        Command::Track(a) => cmd_track(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Features(a) => cmd_features(a),
        Command::GenDataset(a) => cmd_gen_dataset(a),
        Command::ServePpg(a) => cmd_serve_ppg(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    eprintln!("error: {:#}", f.err);
    ExitCode::from(f.class as u8)
}

fn read_clip(path: &Path) -> Res<AudioClip> {
    load_wav(path)
        .with_context(|| format!("reading {}", path.display()))
        .data()
}

fn cmd_prepare(a: PrepareArgs) -> Res<()> {
    let score = parse_musicxml(&a.score, a.part.as_deref())
        .with_context(|| format!("parsing {}", a.score.display()))
        .data()?;
    let sidecar = a.lyrics.clone().or_else(|| {
        let p = a.score.with_file_name("lyrics.txt");
        p.is_file().then_some(p)
    });
    let lyrics = match &sidecar {
        Some(p) => Some(
            std::fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .data()?,
        ),
        None => {
            warn!("no lyrics sidecar; all words form a single line");
            None
        }
    };
    let reference = read_clip(&a.reference)?;
    let art = prepare(&score, lyrics.as_deref(), &reference, &OfflineConfig::default())
        .context("offline alignment")
        .data()?;

    std::fs::create_dir_all(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))
        .runtime()?;
    let out = |name: &str| a.out.join(name);
    art.score_audio.write_wav(&out(SCORE_WAV)).runtime()?;
    art.path.save(&out(PATH_CSV)).runtime()?;
    art.timeline.save(&out(TIMELINE_JSON)).runtime()?;
    std::fs::write(out(TEMPO_JSON), serde_json::to_string_pretty(&score.tempo).runtime()?).runtime()?;
    reference.write_wav(&out(REF_WAV)).runtime()?;
    if let Some(p) = &a.ref_ppg {
        std::fs::copy(p, out(REF_PPG))
            .with_context(|| format!("copying {}", p.display()))
            .data()?;
    }
    info!(
        "prepared {} notes, path of {} pairs, in {}",
        art.timeline.note_count(),
        art.path.len(),
        a.out.display()
    );
    Ok(())
}

fn feature_set(spec: &str) -> Res<FeatureSet> {
    spec.parse::<FeatureSet>().config()
}

fn options(no_chroma_log1p: bool) -> FeatureOptions {
    if no_chroma_log1p {
        FeatureOptions::default().without_chroma_log1p()
    } else {
        FeatureOptions::default()
    }
}

fn tracker_config(o: &OltwArgs) -> Res<TrackerConfig> {
    if !(o.window > 0.0 && o.window.is_finite()) {
        return Err(anyhow!("window must be positive")).config();
    }
    let mut cfg = TrackerConfig::default();
    cfg.oltw.window_seconds = o.window;
    cfg.oltw.max_run_count = o.max_run_count;
    cfg.oltw.median_width = o.median_width;
    cfg.ppg_deadline = Duration::from_millis(o.ppg_deadline_ms);
    Ok(cfg)
}

fn pacing(s: &str) -> Res<Pacing> {
    s.parse::<Pacing>().config()
}

fn open_provider(spec: &str, set: PhonemeSetName) -> Res<Box<dyn PpgProvider>> {
    let (kind, arg) = spec
        .split_once(':')
        .ok_or_else(|| anyhow!("provider `{spec}`: expected file:<path>, exec:<cmd> or tcp:<addr>"))
        .config()?;
    Ok(match kind {
        "file" => {
            let p = load_ppg(Path::new(arg), &PhonemeSet::new(set))
                .with_context(|| format!("reading {arg}"))
                .data()?;
            Box::new(FilePpgProvider::new(p))
        }
        "exec" => Box::new(
            StreamPpgProvider::spawn(arg, set)
                .with_context(|| format!("starting `{arg}`"))
                .runtime()?,
        ),
        "tcp" => Box::new(
            StreamPpgProvider::connect(arg, set)
                .with_context(|| format!("connecting to {arg}"))
                .runtime()?,
        ),
        _ => return Err(anyhow!("unknown provider kind `{kind}`")).config(),
    })
}

/// Raw f32 little-endian samples from a reader, in chunks.
fn raw_chunks<R: Read + Send>(reader: R) -> impl Iterator<Item = AudioChunk> + Send {
    let mut r = BufReader::new(reader);
    let mut start = 0usize;
    std::iter::from_fn(move || {
        let mut buf = vec![0u8; CHUNK_SAMPLES * 4];
        let mut filled = 0;
        while filled < buf.len() {
            match r.read(&mut buf[filled..]) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => {
                    warn!("input read failed: {e}");
                    break;
                }
            }
        }
        let samples: Vec<f32> = buf[..filled - filled % 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if samples.is_empty() {
            return None;
        }
        let chunk = AudioChunk {
            samples,
            start_sample: start,
        };
        start += chunk.samples.len();
        Some(chunk)
    })
}

fn load_model(dir: &Path, featurizer: &FrameFeaturizer, ref_ppg: Option<&PpgMatrix>) -> Res<OfflineModel> {
    let missing: Vec<String> = [PATH_CSV, TIMELINE_JSON, TEMPO_JSON, REF_WAV]
        .iter()
        .filter(|f| !dir.join(f).is_file())
        .map(|f| dir.join(f).display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(anyhow!("prepared directory incomplete, missing {}", missing.join(", "))).data();
    }
    let reference = read_clip(&dir.join(REF_WAV))?;
    let tempo: TempoMap = serde_json::from_str(&std::fs::read_to_string(dir.join(TEMPO_JSON)).data()?)
        .context(TEMPO_JSON)
        .data()?;
    let timeline = LyricsTimeline::load(&dir.join(TIMELINE_JSON)).context(TIMELINE_JSON).data()?;
    let score_ref_path = WarpingPath::load(&dir.join(PATH_CSV)).context(PATH_CSV).data()?;
    let reference = featurizer
        .extract(&reference, ref_ppg)
        .context("reference features")
        .map_err(|e| Failure {
            class: e.downcast_ref::<TrackError>().map_or(Class::Data, track_class),
            err: e,
        })?;
    Ok(OfflineModel {
        reference,
        timeline,
        tempo,
        score_ref_path,
    })
}

fn cmd_track(a: TrackArgs) -> Res<()> {
    let set = feature_set(&a.oltw.features)?;
    let cfg = TrackerConfig {
        record_path: a.path_out.is_some(),
        ..tracker_config(&a.oltw)?
    };
    let pace = pacing(&a.pace)?;
    let featurizer = FrameFeaturizer::new(set, options(a.oltw.no_chroma_log1p));

    let (ref_ppg, provider) = match set.ppg_set() {
        Some(name) => {
            let path = a.ref_ppg.clone().unwrap_or_else(|| a.prepared.join(REF_PPG));
            if !path.is_file() {
                return Err(anyhow!("{set} needs reference posteriors; {} not found", path.display())).config();
            }
            let ppg = load_ppg(&path, &PhonemeSet::new(name))
                .with_context(|| format!("reading {}", path.display()))
                .data()?;
            let spec = a
                .ppg_provider
                .as_deref()
                .ok_or_else(|| anyhow!("{set} needs --ppg-provider"))
                .config()?;
            (Some(ppg), Some(open_provider(spec, name)?))
        }
        None => {
            if a.ppg_provider.is_some() {
                warn!("{set} uses no posteriors; ignoring --ppg-provider");
            }
            (None, None)
        }
    };
    let model = load_model(&a.prepared, &featurizer, ref_ppg.as_ref())?;
    let expected = provider.as_ref().and_then(|p| p.frames());
    let mut tracker = Tracker::new(model, featurizer, provider, cfg).map_err(|e| Failure {
        class: track_class(&e),
        err: e.into(),
    })?;

    let mut file = match &a.out {
        Some(p) => Some(BufWriter::new(
            File::create(p)
                .with_context(|| format!("creating {}", p.display()))
                .runtime()?,
        )),
        None => None,
    };
    let stdout = io::stdout();
    let mut stdout = stdout.lock();
    let quiet = a.quiet;
    let mut sink = |e: &singalign::tracker::LyricEvent| -> Result<(), TrackError> {
        let line = serde_json::to_string(e).map_err(|e| TrackError::Io(e.into()))?;
        if !quiet {
            writeln!(stdout, "{line}")?;
            stdout.flush()?;
        }
        if let Some(f) = file.as_mut() {
            writeln!(f, "{line}")?;
        }
        Ok(())
    };

    let run = if a.target == "-" {
        run_tracker(&mut tracker, raw_chunks(io::stdin()), pace, &mut sink)
    } else {
        let clip = read_clip(Path::new(&a.target))?;
        let frames = FrameClock::default().frame_count(clip.len());
        if let Some(n) = expected {
            if n != frames {
                let e = TrackError::ClockMismatch { expected: frames, got: n };
                return Err(anyhow!(e).context("posteriors do not match the target")).data();
            }
        }
        let chunks: Vec<AudioChunk> = chunk_stream(&clip).collect();
        run_tracker(&mut tracker, chunks, pace, &mut sink)
    };
    let latency: LatencyReport = run.map_err(|e| Failure {
        class: track_class(&e),
        err: anyhow!(e).context("tracking"),
    })?;
    if let Some(mut f) = file {
        f.flush().runtime()?;
    }
    if tracker.stalls() > 0 {
        warn!("{} chunk(s) aligned without posteriors", tracker.stalls());
    }
    if let Some(p) = &a.path_out {
        WarpingPath::new(tracker.path().to_vec())
            .and_then(|path| path.save(p))
            .with_context(|| format!("writing {}", p.display()))
            .runtime()?;
    }
    if let Some(p) = &a.latency_out {
        std::fs::write(p, serde_json::to_string_pretty(&latency).runtime()?)
            .with_context(|| format!("writing {}", p.display()))
            .runtime()?;
    }
    eprintln!(
        "chunks {}  p50 {:.2} ms  p95 {:.2} ms  max {:.2} ms  rtf {:.4}",
        latency.chunks, latency.p50_ms, latency.p95_ms, latency.max_ms, latency.rtf
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Res<()> {
    let phases = match a.phases.as_str() {
        "both" => Phases::default(),
        "offline" => Phases {
            offline: true,
            online: false,
        },
        "online" => Phases {
            offline: false,
            online: true,
        },
        other => return Err(anyhow!("unknown phases `{other}`")).config(),
    };
    let cfg = BenchConfig {
        features: feature_set(&a.oltw.features)?,
        options: options(a.oltw.no_chroma_log1p),
        offline: OfflineConfig::default(),
        tracker: tracker_config(&a.oltw)?,
        pacing: pacing(&a.pace)?,
        pco_level: a.pco_level.parse::<PcoLevel>().config()?,
    };
    let report = run_benchmark(&a.dataset, &cfg, phases).map_err(|e| Failure {
        class: eval_class(&e),
        err: e.into(),
    })?;
    print!("{}", report.to_table());
    if let Some(p) = &a.report {
        std::fs::write(p, report.to_json().runtime()?)
            .with_context(|| format!("writing {}", p.display()))
            .runtime()?;
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Res<()> {
    let score = parse_musicxml(&a.score, a.part.as_deref())
        .with_context(|| format!("parsing {}", a.score.display()))
        .data()?;
    let notes = if a.vocal_only {
        score
            .vocal
            .iter()
            .map(|n| ScoreNote {
                onset: n.onset,
                duration: n.duration,
                pitch: n.pitch,
            })
            .collect()
    } else {
        score.all_notes()
    };
    let clip = synth_score_audio(&notes, &score.tempo).data()?;
    clip.write_wav(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))
        .runtime()
}

fn cmd_features(a: FeaturesArgs) -> Res<()> {
    let set = feature_set(&a.features)?;
    let clip = read_clip(&a.audio)?;
    let ppg = match (set.ppg_set(), &a.ppg) {
        (Some(name), Some(p)) => Some(
            load_ppg(p, &PhonemeSet::new(name))
                .with_context(|| format!("reading {}", p.display()))
                .data()?,
        ),
        (Some(_), None) => return Err(anyhow!("{set} needs --ppg")).config(),
        (None, _) => None,
    };
    let m: FeatureMatrix = FrameFeaturizer::new(set, options(a.no_chroma_log1p))
        .extract(&clip, ppg.as_ref())
        .map_err(|e| Failure {
            class: track_class(&e),
            err: e.into(),
        })?;
    let result = match a.format.as_str() {
        "fmx" => m.save_fmx(&a.out),
        "csv" => File::create(&a.out)
            .map_err(Into::into)
            .and_then(|f| m.write_csv(BufWriter::new(f))),
        other => return Err(anyhow!("unknown format `{other}`")).config(),
    };
    result.with_context(|| format!("writing {}", a.out.display())).runtime()?;
    info!("{} frames x {} dims", m.frames(), m.dims());
    Ok(())
}

fn cmd_gen_dataset(a: GenDatasetArgs) -> Res<()> {
    let cfg = SynthConfig {
        songs: a.songs,
        seed: a.seed,
        notes: a.notes,
        noise_db: a.noise_db,
        ppg_confidence: a.ppg_confidence,
        ..SynthConfig::default()
    };
    if cfg.songs == 0 || cfg.notes == 0 {
        return Err(anyhow!("songs and notes must be positive")).config();
    }
    let ids = generate_dataset(&a.out, &cfg).runtime()?;
    for id in ids {
        println!("{}", a.out.join(id).display());
    }
    Ok(())
}

fn cmd_serve_ppg(a: ServePpgArgs) -> Res<()> {
    let name = a.set.parse::<PhonemeSetName>().config()?;
    let ppg = load_ppg(&a.ppg, &PhonemeSet::new(name))
        .with_context(|| format!("reading {}", a.ppg.display()))
        .data()?;
    match &a.listen {
        None => serve_replay(&ppg, io::stdin().lock(), io::stdout().lock()).runtime(),
        Some(addr) => {
            let listener = TcpListener::bind(addr)
                .with_context(|| format!("binding {addr}"))
                .runtime()?;
            eprintln!("listening on {}", listener.local_addr().runtime()?);
            let (stream, peer) = listener.accept().runtime()?;
            info!("client {peer}");
            let reader = stream.try_clone().runtime()?;
            serve_replay(&ppg, reader, BufWriter::new(stream)).runtime()
        }
    }
}
