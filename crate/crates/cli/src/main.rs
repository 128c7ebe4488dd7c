use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use vhvae::config::KeyValueDoc;
use vhvae::corpus::{decode_windows, encode_windows, load_files, piece_windows, read_manifest, Piece};
use vhvae::eval_metrics::{confusion, ConfusionCounts};
use vhvae::midi_io::{decompose_keys, load_piece, recompose, write_midi, KeyedRoll, Window, DEFAULT_PPQ, N_PITCHES};
use vhvae::model::{
    attention_marginals, load_checkpoint, reconstruct, sample, save_checkpoint, ModelConfig, ParamStore,
};
use vhvae::numerics::seeded;
use vhvae::theory_analysis::{
    all_triads, attention_csv, attention_dot, chord_embeddings, chord_map_csv, chord_profile, chord_profile_csv,
    fifths_neighbor_ratio, scatter_svg, AttentionKind, ExportHeader,
};
use vhvae::trainer::{evaluate, split_corpus, telemetry_csv, train, TrainConfig};

const RUN_KEYS: &[&str] = &["manifest", "cache", "checkpoint", "held_out_fraction"];
const CACHE_FILE: &str = "windows.vhwc";
const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Parser, Debug)]
#[command(name = "vhvae", version, about = "Hierarchical music VAE with tree-structured attention over bars and keys")]
struct Cli {
    /// key = value configuration file; flags override its values
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for initialization, shuffling and sampling
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse, quantize and window the MIDI files of a manifest into a cache
    Ingest {
        /// Text file with one MIDI path per line
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train a model on a window cache; writes a checkpoint and telemetry
    Train {
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Teacher-forced reconstruction of a MIDI file, with cell metrics
    Reconstruct {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Free-running generation to MIDI
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of windows to generate
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Pooled confusion metrics over the windows of a manifest
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Interval-vector profiles, chord maps or attention exports
    Analyze {
        #[arg(value_enum)]
        mode: AnalyzeMode,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// MIDI files (iv, attention)
        inputs: Vec<PathBuf>,
        /// Window of the input to export (attention)
        #[arg(long, default_value_t = 0)]
        window: usize,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum AnalyzeMode {
    /// Interval-vector profile per chord quality
    Iv,
    /// Latent map of the 24 major and minor triads
    Cof,
    /// Vertical and horizontal attention trees of one window
    Attention,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
}

impl Failure {
    fn data(e: impl std::fmt::Display) -> Self {
        Failure::Data(e.to_string())
    }

    fn usage(e: impl std::fmt::Display) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Outcome<T> = Result<T, Failure>;

/// Effective settings after merging the config file and flags.
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    doc: KeyValueDoc,
    seed: u64,
    out: PathBuf,
}

impl RunConfig {
    fn load(cli: &Cli) -> Outcome<Self> {
        let doc = match &cli.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
                KeyValueDoc::parse(&text).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?
            }
            None => KeyValueDoc::default(),
        };
        let allowed: Vec<&str> = ModelConfig::KEYS.iter().chain(TrainConfig::KEYS).chain(RUN_KEYS).copied().collect();
        let ctx = |e: vhvae::config::ConfigError| {
            let name = cli.config.as_deref().map_or_else(String::new, |p| format!("{}: ", p.display()));
            Failure::usage(format!("{name}{e}"))
        };
        doc.reject_unknown(&allowed).map_err(ctx)?;
        let mut model = ModelConfig::default();
        model.apply_doc(&doc).map_err(ctx)?;
        let mut train = TrainConfig::default();
        train.apply_doc(&doc).map_err(ctx)?;
        let seed = cli.seed.unwrap_or(model.seed);
        model.seed = seed;
        train.seed = seed;
        model.validate().map_err(Failure::usage)?;
        train.validate().map_err(Failure::usage)?;
        Ok(Self { model, train, doc, seed, out: cli.out.clone() })
    }

    /// Flag value, else config value, else `fallback` under the output dir.
    fn path(&self, flag: &Option<PathBuf>, key: &str, fallback: Option<&str>) -> Outcome<PathBuf> {
        if let Some(p) = flag {
            return Ok(p.clone());
        }
        if let Some(p) = self.doc.get_raw(key) {
            return Ok(PathBuf::from(p));
        }
        fallback.map(|f| self.out.join(f)).ok_or_else(|| Failure::usage(format!("--{key} is required")))
    }

    fn out_file(&self, name: &str) -> Outcome<PathBuf> {
        std::fs::create_dir_all(&self.out).map_err(|e| Failure::data(format!("{}: {e}", self.out.display())))?;
        Ok(self.out.join(name))
    }
}

fn config_help() -> String {
    let mut model = ModelConfig::default().to_doc();
    model.merge(&TrainConfig::default().to_doc());
    format!(
        "Configuration keys and defaults (key = value, `#` comments):\n{}\
         manifest = <path>\ncache = <out>/{CACHE_FILE}\ncheckpoint = <out>/{CHECKPOINT_FILE}\nheld_out_fraction = 0\n\n\
         VHVAE_THREADS caps the number of ingest workers.\n\
         Exit codes: 0 success, 1 usage error, 2 data error.",
        model.render()
    )
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Outcome<()> {
    std::fs::write(path, bytes).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn ingest_threads() -> Outcome<usize> {
    match std::env::var("VHVAE_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::usage(format!("VHVAE_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, usize::from)),
    }
}

fn load_manifest_pieces(manifest: &Path, n_keys: usize) -> Outcome<Vec<Piece>> {
    let threads = ingest_threads()?;
    let paths = read_manifest(manifest).map_err(|e| Failure::data(format!("{}: {e}", manifest.display())))?;
    if paths.is_empty() {
        return Err(Failure::data(format!("{}: manifest lists no files", manifest.display())));
    }
    let mut pieces = Vec::with_capacity(paths.len());
    for result in load_files(&paths, n_keys, threads) {
        let piece = result.map_err(Failure::data)?;
        for w in &piece.warnings {
            eprintln!("warning: {}: {w}", piece.path.display());
        }
        pieces.push(piece);
    }
    Ok(pieces)
}

fn load_model(run: &RunConfig, flag: &Option<PathBuf>) -> Outcome<(ParamStore, ModelConfig, PathBuf)> {
    let path = run.path(flag, "checkpoint", Some(CHECKPOINT_FILE))?;
    let (store, cfg) = load_checkpoint(&path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    Ok((store, cfg, path))
}

fn load_midi(path: &Path, cfg: &ModelConfig) -> Outcome<KeyedRoll> {
    let bytes = std::fs::read(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    let (roll, warnings) = load_piece(&bytes).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    for w in warnings {
        eprintln!("warning: {}: {w}", path.display());
    }
    if roll.pitches() != cfg.n_pitches {
        return Err(Failure::data(format!("model expects {} pitches, MIDI rolls have {}", cfg.n_pitches, roll.pitches())));
    }
    Ok(decompose_keys(&roll, cfg.n_keys))
}

/// Every full window of a piece, silent ones included.
fn all_windows(keyed: &KeyedRoll, cfg: &ModelConfig, path: &Path) -> Outcome<Vec<KeyedRoll>> {
    let n = keyed.bars() / cfg.n_bars;
    if n == 0 {
        return Err(Failure::data(format!(
            "{}: {} bars is shorter than one {}-bar window",
            path.display(),
            keyed.bars(),
            cfg.n_bars
        )));
    }
    Ok((0..n).map(|w| keyed.bars_range(w * cfg.n_bars, cfg.n_bars)).collect())
}

fn concat(rolls: &[KeyedRoll]) -> KeyedRoll {
    let first = &rolls[0];
    let slots: Vec<u8> = rolls.iter().flat_map(|r| r.slots().iter().copied()).collect();
    KeyedRoll::from_slots(first.steps() * rolls.len(), first.keys(), first.n_pitches(), slots)
        .expect("windows share one shape")
}

fn rates_line(c: &ConfusionCounts) -> String {
    let r = c.rates();
    let f = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"));
    format!("ppv={} tpr={} npv={} tnr={}", f(r.ppv), f(r.tpr), f(r.npv), f(r.tnr))
}

fn cmd_ingest(run: &RunConfig, manifest: &Option<PathBuf>) -> Outcome<()> {
    let manifest = run.path(manifest, "manifest", None)?;
    if run.model.n_pitches != N_PITCHES {
        return Err(Failure::usage(format!("ingest produces {N_PITCHES}-pitch rolls; n_pitches is {}", run.model.n_pitches)));
    }
    let pieces = load_manifest_pieces(&manifest, run.model.n_keys)?;
    let windows: Vec<Window> = pieces.iter().flat_map(|p| piece_windows(p, run.model.n_bars)).collect();
    let path = run.out_file(CACHE_FILE)?;
    write(&path, encode_windows(&windows, N_PITCHES, run.model.n_bars))?;
    println!("ingested {} files, {} windows -> {}", pieces.len(), windows.len(), path.display());
    Ok(())
}

fn cmd_train(run: &RunConfig, cache: &Option<PathBuf>) -> Outcome<()> {
    let cache = run.path(cache, "cache", Some(CACHE_FILE))?;
    let bytes = std::fs::read(&cache).map_err(|e| Failure::data(format!("{}: {e}", cache.display())))?;
    let (windows, n_pitches, n_bars) =
        decode_windows(&bytes).map_err(|e| Failure::data(format!("{}: {e}", cache.display())))?;
    let cfg = &run.model;
    if n_pitches != cfg.n_pitches || n_bars != cfg.n_bars || windows.iter().any(|w| w.roll.keys() != cfg.n_keys) {
        return Err(Failure::data(format!(
            "{}: cache holds {n_bars}-bar windows over {n_pitches} pitches, config expects {} bars, {} pitches and {} keys",
            cache.display(),
            cfg.n_bars,
            cfg.n_pitches,
            cfg.n_keys
        )));
    }
    if windows.is_empty() {
        return Err(Failure::data(format!("{}: cache holds no windows", cache.display())));
    }
    let fraction: f64 = run.doc.get("held_out_fraction").map_err(Failure::usage)?.unwrap_or(0.0);
    let (train_set, held_out) = if fraction > 0.0 {
        split_corpus(&windows, 1.0 - fraction, run.seed).map_err(Failure::usage)?
    } else {
        (windows, Vec::new())
    };
    let store = ParamStore::init(cfg).map_err(Failure::usage)?;
    let report = train(&train_set, &held_out, store, cfg, &run.train).map_err(Failure::data)?;
    let ckpt = run.out_file(CHECKPOINT_FILE)?;
    save_checkpoint(&report.store, cfg, &ckpt).map_err(|e| Failure::data(format!("{}: {e}", ckpt.display())))?;
    write(&run.out_file("telemetry.csv")?, telemetry_csv(&report.telemetry))?;
    let mut effective = cfg.to_doc();
    effective.merge(&run.train.to_doc());
    write(&run.out_file("run.cfg")?, effective.render())?;
    let last = report.losses.last().map_or(f64::NAN, |l| l.recon);
    println!("trained {} steps on {} windows, final recon {last:.6} -> {}", report.losses.len(), train_set.len(), ckpt.display());
    Ok(())
}

fn cmd_reconstruct(run: &RunConfig, checkpoint: &Option<PathBuf>, input: &Path, output: &Path) -> Outcome<()> {
    let (store, cfg, _) = load_model(run, checkpoint)?;
    let keyed = load_midi(input, &cfg)?;
    let windows = all_windows(&keyed, &cfg, input)?;
    let mut rng = seeded(run.seed);
    let mut recon = Vec::with_capacity(windows.len());
    for w in &windows {
        recon.push(reconstruct(&store, &cfg, w, &mut rng).map_err(Failure::data)?);
    }
    let (pred, truth) = (recompose(&concat(&recon)), recompose(&concat(&windows)));
    let counts = confusion(&pred, &truth).expect("reconstruction keeps the window shape");
    write(output, write_midi(&pred, DEFAULT_PPQ))?;
    println!("{}", rates_line(&counts));
    Ok(())
}

fn cmd_sample(run: &RunConfig, checkpoint: &Option<PathBuf>, count: usize) -> Outcome<()> {
    let (store, cfg, _) = load_model(run, checkpoint)?;
    let mut rng = seeded(run.seed);
    let (mut emissions, mut collisions) = (0, 0);
    for i in 0..count {
        let out = sample(&store, &cfg, &mut rng).map_err(Failure::data)?;
        emissions += out.emissions;
        collisions += out.collisions;
        let path = run.out_file(&format!("sample_{i:03}.mid"))?;
        write(&path, write_midi(&recompose(&out.roll), DEFAULT_PPQ))?;
        println!("{}", path.display());
    }
    let rate = if emissions == 0 { 0.0 } else { collisions as f64 / emissions as f64 };
    println!("collision_rate={rate:.6} ({collisions}/{emissions})");
    Ok(())
}

fn cmd_eval(run: &RunConfig, checkpoint: &Option<PathBuf>, manifest: &Option<PathBuf>) -> Outcome<()> {
    let (store, cfg, _) = load_model(run, checkpoint)?;
    let manifest = run.path(manifest, "manifest", None)?;
    let pieces = load_manifest_pieces(&manifest, cfg.n_keys)?;
    let windows: Vec<Window> = pieces.iter().flat_map(|p| piece_windows(p, cfg.n_bars)).collect();
    if windows.is_empty() {
        return Err(Failure::data(format!("{}: no non-silent {}-bar windows", manifest.display(), cfg.n_bars)));
    }
    let counts = evaluate(&store, &cfg, &windows, &mut seeded(run.seed)).map_err(Failure::data)?;
    println!("windows={} tp={} fp={} fn={} tn={}", windows.len(), counts.tp, counts.fp, counts.fn_, counts.tn);
    println!("{}", rates_line(&counts));
    Ok(())
}

fn cmd_analyze(run: &RunConfig, mode: AnalyzeMode, checkpoint: &Option<PathBuf>, inputs: &[PathBuf], window: usize) -> Outcome<()> {
    match mode {
        AnalyzeMode::Iv => {
            if inputs.is_empty() {
                return Err(Failure::usage("analyze iv needs at least one MIDI input"));
            }
            let mut rolls = Vec::with_capacity(inputs.len());
            for p in inputs {
                let bytes = std::fs::read(p).map_err(|e| Failure::data(format!("{}: {e}", p.display())))?;
                rolls.push(load_piece(&bytes).map_err(|e| Failure::data(format!("{}: {e}", p.display())))?.0);
            }
            let csv = chord_profile_csv(&chord_profile(&rolls).map_err(Failure::data)?);
            write(&run.out_file("interval_vectors.csv")?, &csv)?;
            print!("{csv}");
        }
        AnalyzeMode::Cof => {
            let (store, cfg, _) = load_model(run, checkpoint)?;
            let chords = all_triads();
            let map = chord_embeddings(&store, &cfg, &chords).map_err(Failure::data)?;
            write(&run.out_file("chord_map.csv")?, chord_map_csv(&map))?;
            write(&run.out_file("chord_map.svg")?, scatter_svg(&map.labels, &map.points))?;
            match fifths_neighbor_ratio(&chords, &map.points) {
                Some(r) => println!("fifths_neighbor_ratio={r:.6}"),
                None => println!("fifths_neighbor_ratio=undefined"),
            }
        }
        AnalyzeMode::Attention => {
            let [input] = inputs else {
                return Err(Failure::usage("analyze attention takes exactly one MIDI input"));
            };
            let (store, cfg, ckpt) = load_model(run, checkpoint)?;
            let windows = all_windows(&load_midi(input, &cfg)?, &cfg, input)?;
            let roll = windows.get(window).ok_or_else(|| {
                Failure::usage(format!("window {window} out of range; the input has {} windows", windows.len()))
            })?;
            let (vertical, horizontal) = attention_marginals(&store, &cfg, roll).map_err(Failure::data)?;
            let header = ExportHeader {
                seed: cfg.seed,
                checkpoint: ckpt.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
            };
            write(&run.out_file("horizontal.dot")?, attention_dot(&horizontal, AttentionKind::Horizontal, &header))?;
            write(&run.out_file("horizontal.csv")?, attention_csv(&horizontal, AttentionKind::Horizontal))?;
            for (u, m) in vertical.iter().enumerate() {
                write(&run.out_file(&format!("vertical_bar{u:02}.dot"))?, attention_dot(m, AttentionKind::Vertical, &header))?;
                write(&run.out_file(&format!("vertical_bar{u:02}.csv"))?, attention_csv(m, AttentionKind::Vertical))?;
            }
            println!("wrote attention exports for {} bars to {}", vertical.len(), run.out.display());
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Outcome<()> {
    let run = RunConfig::load(cli)?;
    match &cli.command {
        Command::Ingest { manifest } => cmd_ingest(&run, manifest),
        Command::Train { cache } => cmd_train(&run, cache),
        Command::Reconstruct { checkpoint, input, output } => cmd_reconstruct(&run, checkpoint, input, output),
        Command::Sample { checkpoint, count } => cmd_sample(&run, checkpoint, *count),
        Command::Eval { checkpoint, manifest } => cmd_eval(&run, checkpoint, manifest),
        Command::Analyze { mode, checkpoint, inputs, window } => cmd_analyze(&run, *mode, checkpoint, inputs, *window),
    }
}

fn main() -> ExitCode {
    let matches = match Cli::command().after_long_help(config_help()).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("{}", Cli::command().render_usage());
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
