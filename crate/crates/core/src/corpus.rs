//! Corpus ingestion: manifests, parallel MIDI loading and the window cache.

use std::path::{Path, PathBuf};

use crate::config::{ConfigError, KeyValueDoc};
use crate::framing::{self, FramingError, Record};
use crate::midi_io::{decompose_keys, load_piece, window, KeyedRoll, MidiError, Window, STEPS_PER_BAR};

pub const WINDOW_CACHE_MAGIC: &[u8; 4] = b"VHWC";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Midi { path: PathBuf, source: MidiError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error(transparent)]
    Framing(#[from] FramingError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("window `{name}`: {reason}")]
    Window { name: String, reason: String },
}

/// Non-empty, non-comment lines of a manifest, resolved against its directory.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let p = Path::new(line);
        out.push(if p.is_absolute() { p.to_path_buf() } else { base.join(p) });
        if out.len() > 1 && out[..out.len() - 1].contains(out.last().expect("just pushed")) {
            return Err(CorpusError::Manifest { line: i + 1, reason: format!("duplicate entry `{line}`") });
        }
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.into(), source })?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// A loaded piece with its parser warnings.
#[derive(Debug, Clone)]
pub struct Piece {
    pub path: PathBuf,
    pub keyed: KeyedRoll,
    pub warnings: Vec<String>,
}

pub fn load_file(path: &Path, n_keys: usize) -> Result<Piece, CorpusError> {
    let bytes = std::fs::read(path).map_err(|source| CorpusError::Io { path: path.into(), source })?;
    let (roll, warnings) = load_piece(&bytes).map_err(|source| CorpusError::Midi { path: path.into(), source })?;
    Ok(Piece { path: path.into(), keyed: decompose_keys(&roll, n_keys), warnings })
}

/// Loads files on up to `threads` workers. Results keep manifest order.
pub fn load_files(paths: &[PathBuf], n_keys: usize, threads: usize) -> Vec<Result<Piece, CorpusError>> {
    let threads = threads.clamp(1, paths.len().max(1));
    let chunk = paths.len().div_ceil(threads).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = paths
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|p| load_file(p, n_keys)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("ingest worker panicked")).collect()
    })
}

/// Windows of a piece named after its file stem.
pub fn piece_windows(piece: &Piece, n_bars: usize) -> Vec<Window> {
    let stem = piece.path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    window(&piece.keyed, n_bars, &stem)
}

pub fn encode_windows(windows: &[Window], n_pitches: usize, n_bars: usize) -> Vec<u8> {
    let records: Vec<Record> = windows
        .iter()
        .map(|w| Record {
            name: w.source_id.clone(),
            dims: vec![w.roll.steps(), w.roll.keys()],
            data: w.roll.slots().iter().map(|&s| f64::from(s)).collect(),
        })
        .collect();
    let mut doc = KeyValueDoc::default();
    doc.set("n_pitches", n_pitches);
    doc.set("n_bars", n_bars);
    framing::encode(WINDOW_CACHE_MAGIC, &records, &doc.render())
}

/// Returns the windows together with `(n_pitches, n_bars)`.
pub fn decode_windows(bytes: &[u8]) -> Result<(Vec<Window>, usize, usize), CorpusError> {
    let (records, trailer) = framing::decode(bytes, WINDOW_CACHE_MAGIC)?;
    let doc = KeyValueDoc::parse(&trailer)?;
    doc.reject_unknown(&["n_pitches", "n_bars"])?;
    let missing = |k: &str| ConfigError::Invalid(format!("window cache lacks `{k}`"));
    let n_pitches: usize = doc.get("n_pitches")?.ok_or_else(|| missing("n_pitches"))?;
    let n_bars: usize = doc.get("n_bars")?.ok_or_else(|| missing("n_bars"))?;
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let bad = |reason: String| CorpusError::Window { name: r.name.clone(), reason };
        let [steps, keys] = r.dims[..] else {
            return Err(bad(format!("{} dimensions, expected 2", r.dims.len())));
        };
        if steps != n_bars * STEPS_PER_BAR {
            return Err(bad(format!("{steps} steps, expected {}", n_bars * STEPS_PER_BAR)));
        }
        let slots = r
            .data
            .iter()
            .map(|&x| if x.fract() == 0.0 && (0.0..=255.0).contains(&x) { Ok(x as u8) } else { Err(bad(format!("slot value {x}"))) })
            .collect::<Result<Vec<u8>, _>>()?;
        let roll = KeyedRoll::from_slots(steps, keys, n_pitches, slots).map_err(|e| bad(e.to_string()))?;
        out.push(Window { bars: n_bars, roll, source_id: r.name });
    }
    Ok((out, n_pitches, n_bars))
}
