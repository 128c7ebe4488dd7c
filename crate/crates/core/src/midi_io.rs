//! Standard MIDI File ingestion and the piano-roll representations built on
//! top of it.
//!
//! Pieces are quantized to a sixteenth-note grid under an assumed 4/4 meter,
//! velocity is discarded, and only the 88 piano pitches (MIDI 21..=108) are
//! kept. A [`KeyedRoll`] splits every step's chord into `n_keys` slots, the
//! highest pitch first.

use std::collections::HashMap;

pub const N_PITCHES: usize = 88;
pub const LOWEST_NOTE: u8 = 21;
pub const HIGHEST_NOTE: u8 = 108;
pub const STEPS_PER_BAR: usize = 16;
pub const DEFAULT_PPQ: u16 = 480;
pub const EXPORT_VELOCITY: u8 = 80;
/// Microseconds per quarter note at 120 BPM.
const EXPORT_TEMPO: u32 = 500_000;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MidiError {
    #[error("malformed MIDI at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },
    #[error("unsupported MIDI file: {0}")]
    Unsupported(String),
    #[error("piece contains no usable notes")]
    EmptyPiece,
    #[error("invalid roll: {0}")]
    InvalidRoll(String),
}

fn parse_err(offset: usize, reason: impl Into<String>) -> MidiError {
    MidiError::Parse { offset, reason: reason.into() }
}

/// One sounding interval `[on_tick, off_tick)` of a MIDI note.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoteEvent {
    pub note: u8,
    pub on_tick: u64,
    pub off_tick: u64,
    pub track: usize,
    /// Program of the note's channel when the note started.
    pub program: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MidiFile {
    pub format: u16,
    pub ppq: u16,
    pub events: Vec<NoteEvent>,
    /// Last tick of the longest track (end-of-track marker included).
    pub end_tick: u64,
    pub warnings: Vec<String>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], MidiError> {
        if self.bytes.len() - self.pos < n {
            return Err(parse_err(self.pos, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, MidiError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, MidiError> {
        let b = self.take(2, what)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32, MidiError> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self, what: &str) -> Result<u32, MidiError> {
        let start = self.pos;
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.u8(what)?;
            value = (value << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(parse_err(start, format!("variable-length {what} longer than 4 bytes")))
    }

    fn data_byte(&mut self, what: &str) -> Result<u8, MidiError> {
        let at = self.pos;
        let b = self.u8(what)?;
        if b & 0x80 != 0 {
            return Err(parse_err(at, format!("{what} has its high bit set")));
        }
        Ok(b)
    }
}

/// Parses a format 0 or 1 Standard MIDI File into merged note intervals.
///
/// Note-on with velocity 0 ends a note. Overlapping note-ons of one pitch in
/// one track merge into a single interval spanning their union. Notes still
/// sounding at the end of a track end there.
pub fn parse_midi(bytes: &[u8]) -> Result<MidiFile, MidiError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "header chunk id")? != b"MThd" {
        return Err(parse_err(0, "missing MThd header"));
    }
    let header_len = r.u32("header length")? as usize;
    if header_len < 6 {
        return Err(parse_err(4, format!("header length {header_len} is shorter than 6")));
    }
    let header_start = r.pos;
    let format = r.u16("format")?;
    let ntracks = r.u16("track count")?;
    let division_at = r.pos;
    let division = r.u16("division")?;
    r.take(header_len - 6, "header padding")?;
    debug_assert_eq!(r.pos, header_start + header_len);

    if format > 1 {
        return Err(MidiError::Unsupported(format!("format {format} (only 0 and 1 are supported)")));
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::Unsupported("SMPTE time division".into()));
    }
    if division == 0 {
        return Err(parse_err(division_at, "division of zero ticks per quarter note"));
    }

    let mut events = Vec::new();
    let mut warnings = Vec::new();
    let mut end_tick = 0u64;
    let mut track = 0usize;
    while track < ntracks as usize {
        let chunk_at = r.pos;
        let id = r.take(4, "chunk id")?;
        let len = r.u32("chunk length")? as usize;
        if r.bytes.len() - r.pos < len {
            return Err(parse_err(chunk_at, format!("chunk declares {len} bytes but the file ends first")));
        }
        if id != b"MTrk" {
            r.pos += len;
            continue;
        }
        let body = Reader { bytes: &r.bytes[..r.pos + len], pos: r.pos };
        let track_end = parse_track(body, track, &mut events, &mut warnings)?;
        end_tick = end_tick.max(track_end);
        r.pos += len;
        track += 1;
    }

    events.sort_by_key(|e| (e.on_tick, e.note, e.track));
    Ok(MidiFile { format, ppq: division, events, end_tick, warnings })
}

struct Sounding {
    count: u32,
    start: u64,
    program: u8,
}

fn parse_track(
    mut r: Reader<'_>,
    track: usize,
    events: &mut Vec<NoteEvent>,
    warnings: &mut Vec<String>,
) -> Result<u64, MidiError> {
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    let mut programs = [0u8; 16];
    let mut sounding: HashMap<u8, Sounding> = HashMap::new();

    while r.pos < r.bytes.len() {
        tick += u64::from(r.vlq("delta time")?);
        let status_at = r.pos;
        let first = r.u8("event status")?;
        match first {
            0xff => {
                running = None;
                let kind = r.u8("meta type")?;
                let len = r.vlq("meta length")? as usize;
                let data = r.take(len, "meta data")?;
                match kind {
                    0x2f => break,
                    0x58 if len >= 2 => {
                        let (num, den) = (data[0], 1u32.checked_shl(u32::from(data[1])).unwrap_or(0));
                        if (num, den) != (4, 4) {
                            warnings.push(format!(
                                "track {track}: time signature {num}/{den} at tick {tick}; treating as 4/4"
                            ));
                        }
                    }
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let len = r.vlq("sysex length")? as usize;
                r.take(len, "sysex data")?;
            }
            0xf1..=0xfe => return Err(parse_err(status_at, format!("unexpected system message 0x{first:02x}"))),
            _ => {
                let (status, first_data) = if first & 0x80 != 0 {
                    running = Some(first);
                    (first, None)
                } else {
                    match running {
                        Some(s) => (s, Some(first)),
                        None => return Err(parse_err(status_at, "data byte without running status")),
                    }
                };
                let next = |r: &mut Reader<'_>, what: &str| match first_data {
                    Some(b) => Ok(b),
                    None => r.data_byte(what),
                };
                let channel = (status & 0x0f) as usize;
                match status & 0xf0 {
                    0x80 | 0x90 => {
                        let note = next(&mut r, "note number")?;
                        let velocity = r.data_byte("velocity")?;
                        if status & 0xf0 == 0x90 && velocity > 0 {
                            let entry = sounding.entry(note).or_insert(Sounding {
                                count: 0,
                                start: tick,
                                program: programs[channel],
                            });
                            if entry.count == 0 {
                                entry.start = tick;
                                entry.program = programs[channel];
                            }
                            entry.count += 1;
                        } else if let Some(entry) = sounding.get_mut(&note) {
                            if entry.count > 0 {
                                entry.count -= 1;
                                if entry.count == 0 {
                                    events.push(NoteEvent {
                                        note,
                                        on_tick: entry.start,
                                        off_tick: tick,
                                        track,
                                        program: entry.program,
                                    });
                                }
                            }
                        }
                    }
                    0xa0 | 0xb0 | 0xe0 => {
                        next(&mut r, "controller data")?;
                        r.data_byte("controller data")?;
                    }
                    0xc0 => programs[channel] = next(&mut r, "program number")?,
                    0xd0 => {
                        next(&mut r, "pressure")?;
                    }
                    _ => unreachable!("status bytes are >= 0x80"),
                }
            }
        }
    }

    let mut open: Vec<(u8, Sounding)> = sounding.into_iter().filter(|(_, s)| s.count > 0).collect();
    open.sort_by_key(|(n, _)| *n);
    for (note, s) in open {
        events.push(NoteEvent { note, on_tick: s.start, off_tick: tick, track, program: s.program });
    }
    Ok(tick)
}

/// Keeps the notes played with Acoustic Grand Piano (program 0). Without any,
/// falls back to the track with the most notes.
pub fn select_piano_track(events: &[NoteEvent]) -> Result<Vec<NoteEvent>, MidiError> {
    let piano: Vec<NoteEvent> = events.iter().copied().filter(|e| e.program == 0).collect();
    if !piano.is_empty() {
        return Ok(piano);
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for e in events {
        *counts.entry(e.track).or_default() += 1;
    }
    let busiest = counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(t, _)| t)
        .ok_or(MidiError::EmptyPiece)?;
    Ok(events.iter().copied().filter(|e| e.track == busiest).collect())
}

/// Binary step x pitch activity grid. Pitch index `p` is MIDI note `21 + p`
/// for full piano rolls; smaller vocabularies are used by toy models.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PianoRoll {
    steps: usize,
    pitches: usize,
    grid: Vec<bool>,
}

impl PianoRoll {
    /// Silent roll of `n_bars` whole bars.
    pub fn new(n_bars: usize, pitches: usize) -> Self {
        let steps = n_bars * STEPS_PER_BAR;
        Self { steps, pitches, grid: vec![false; steps * pitches] }
    }

    pub fn from_grid(steps: usize, pitches: usize, grid: Vec<bool>) -> Result<Self, MidiError> {
        if steps % STEPS_PER_BAR != 0 {
            return Err(MidiError::InvalidRoll(format!("{steps} steps is not a whole number of bars")));
        }
        if grid.len() != steps * pitches {
            return Err(MidiError::InvalidRoll(format!("grid has {} cells, expected {}", grid.len(), steps * pitches)));
        }
        Ok(Self { steps, pitches, grid })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn pitches(&self) -> usize {
        self.pitches
    }

    pub fn bars(&self) -> usize {
        self.steps / STEPS_PER_BAR
    }

    pub fn get(&self, step: usize, pitch: usize) -> bool {
        self.grid[step * self.pitches + pitch]
    }

    pub fn set(&mut self, step: usize, pitch: usize, on: bool) {
        self.grid[step * self.pitches + pitch] = on;
    }

    pub fn grid(&self) -> &[bool] {
        &self.grid
    }

    /// Active pitch indices at `step`, ascending.
    pub fn active(&self, step: usize) -> Vec<usize> {
        (0..self.pitches).filter(|&p| self.get(step, p)).collect()
    }

    pub fn active_cells(&self) -> usize {
        self.grid.iter().filter(|&&b| b).count()
    }
}

/// Quantizes note intervals onto the sixteenth grid.
///
/// A step covers `[s * ppq / 4, (s + 1) * ppq / 4)`. A pitch is active when
/// its interval overlaps the step by at least half a step or starts inside it.
/// The roll spans `max(end_tick, last note-off)`; a trailing partial bar is
/// dropped.
pub fn quantize(events: &[NoteEvent], ppq: u16, end_tick: u64) -> Result<PianoRoll, MidiError> {
    if ppq == 0 {
        return Err(MidiError::InvalidRoll("ppq must be positive".into()));
    }
    let in_range: Vec<&NoteEvent> =
        events.iter().filter(|e| (LOWEST_NOTE..=HIGHEST_NOTE).contains(&e.note) && e.off_tick > e.on_tick).collect();
    if in_range.is_empty() {
        return Err(MidiError::EmptyPiece);
    }
    let step = u64::from(ppq);
    let span = in_range.iter().map(|e| e.off_tick).max().unwrap_or(0).max(end_tick);
    // Everything below works in quarter-ticks so a step is exactly `ppq` long.
    let total_steps = (span * 4).div_ceil(step) as usize;
    let bars = total_steps / STEPS_PER_BAR;
    if bars == 0 {
        return Err(MidiError::EmptyPiece);
    }
    let mut roll = PianoRoll::new(bars, N_PITCHES);
    for e in in_range {
        let (on, off) = (e.on_tick * 4, e.off_tick * 4);
        let pitch = usize::from(e.note - LOWEST_NOTE);
        let first = (on / step) as usize;
        let last = (off.div_ceil(step) as usize).min(roll.steps);
        for s in first..last {
            let (lo, hi) = (s as u64 * step, (s as u64 + 1) * step);
            let overlap = off.min(hi).saturating_sub(on.max(lo));
            if (lo..hi).contains(&on) || 2 * overlap >= step {
                roll.set(s, pitch, true);
            }
        }
    }
    Ok(roll)
}

/// Parses, selects the piano part and quantizes in one go.
pub fn load_piece(bytes: &[u8]) -> Result<(PianoRoll, Vec<String>), MidiError> {
    let file = parse_midi(bytes)?;
    let events = select_piano_track(&file.events)?;
    let roll = quantize(&events, file.ppq, file.end_tick)?;
    Ok((roll, file.warnings))
}

/// Per-step assignment of pitch tokens to key slots. Token `n_pitches` is the
/// rest token.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct KeyedRoll {
    steps: usize,
    keys: usize,
    n_pitches: usize,
    slots: Vec<u8>,
}

impl KeyedRoll {
    /// Builds a roll from step-major slots, checking token range and that no
    /// pitch repeats within a step.
    pub fn from_slots(steps: usize, keys: usize, n_pitches: usize, slots: Vec<u8>) -> Result<Self, MidiError> {
        if keys == 0 {
            return Err(MidiError::InvalidRoll("at least one key is required".into()));
        }
        if n_pitches > u8::MAX as usize {
            return Err(MidiError::InvalidRoll(format!("{n_pitches} pitches do not fit a byte token")));
        }
        if slots.len() != steps * keys {
            return Err(MidiError::InvalidRoll(format!("{} slots, expected {}", slots.len(), steps * keys)));
        }
        if steps % STEPS_PER_BAR != 0 {
            return Err(MidiError::InvalidRoll(format!("{steps} steps is not a whole number of bars")));
        }
        let roll = Self { steps, keys, n_pitches, slots };
        for t in 0..steps {
            let row = roll.step(t);
            for (k, &tok) in row.iter().enumerate() {
                if usize::from(tok) > n_pitches {
                    return Err(MidiError::InvalidRoll(format!("token {tok} out of range at step {t}")));
                }
                if tok != roll.rest() && row[..k].contains(&tok) {
                    return Err(MidiError::InvalidRoll(format!("pitch {tok} repeated at step {t}")));
                }
            }
        }
        Ok(roll)
    }

    pub fn silent(steps: usize, keys: usize, n_pitches: usize) -> Self {
        Self { steps, keys, n_pitches, slots: vec![n_pitches as u8; steps * keys] }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn bars(&self) -> usize {
        self.steps / STEPS_PER_BAR
    }

    pub fn n_pitches(&self) -> usize {
        self.n_pitches
    }

    pub fn rest(&self) -> u8 {
        self.n_pitches as u8
    }

    pub fn slot(&self, step: usize, key: usize) -> u8 {
        self.slots[step * self.keys + key]
    }

    pub fn step(&self, step: usize) -> &[u8] {
        &self.slots[step * self.keys..(step + 1) * self.keys]
    }

    pub fn slots(&self) -> &[u8] {
        &self.slots
    }

    /// Token sequence of one key across all steps.
    pub fn key_tokens(&self, key: usize) -> Vec<u8> {
        (0..self.steps).map(|t| self.slot(t, key)).collect()
    }

    /// True when every step lists its pitches highest first, rests last.
    pub fn is_canonical(&self) -> bool {
        (0..self.steps).all(|t| {
            let row = self.step(t);
            let sounded = row.iter().take_while(|&&p| p != self.rest()).count();
            row[sounded..].iter().all(|&p| p == self.rest()) && row[..sounded].windows(2).all(|w| w[0] > w[1])
        })
    }

    /// Reorders key slots: new key `k` takes old key `perm[k]`.
    pub fn permute_keys(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.keys, "permutation length must equal key count");
        let mut slots = Vec::with_capacity(self.slots.len());
        for t in 0..self.steps {
            let row = self.step(t);
            slots.extend(perm.iter().map(|&k| row[k]));
        }
        Self { slots, ..self.clone() }
    }

    /// Sub-roll covering bars `[first, first + count)`.
    pub fn bars_range(&self, first: usize, count: usize) -> Self {
        let (a, b) = (first * STEPS_PER_BAR * self.keys, (first + count) * STEPS_PER_BAR * self.keys);
        Self { steps: count * STEPS_PER_BAR, slots: self.slots[a..b].to_vec(), ..self.clone() }
    }

    pub fn is_silent(&self) -> bool {
        self.slots.iter().all(|&p| p == self.rest())
    }
}

/// Splits each step's active pitches across `n_keys` slots, highest first;
/// pitches beyond the `n_keys` highest are dropped.
pub fn decompose_keys(roll: &PianoRoll, n_keys: usize) -> KeyedRoll {
    assert!(n_keys >= 1, "at least one key is required");
    let mut keyed = KeyedRoll::silent(roll.steps(), n_keys, roll.pitches());
    for t in 0..roll.steps() {
        let active = roll.active(t);
        for (k, &p) in active.iter().rev().take(n_keys).enumerate() {
            keyed.slots[t * n_keys + k] = p as u8;
        }
    }
    keyed
}

/// Union of the sounded slots at every step.
pub fn recompose(keyed: &KeyedRoll) -> PianoRoll {
    let mut roll = PianoRoll {
        steps: keyed.steps,
        pitches: keyed.n_pitches,
        grid: vec![false; keyed.steps * keyed.n_pitches],
    };
    for t in 0..keyed.steps {
        for &p in keyed.step(t) {
            if p != keyed.rest() {
                roll.set(t, usize::from(p), true);
            }
        }
    }
    roll
}

/// A fixed-length training example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub bars: usize,
    pub roll: KeyedRoll,
    pub source_id: String,
}

/// Cuts consecutive non-overlapping windows of `n_bars` bars, dropping the
/// remainder and windows without a single note.
pub fn window(roll: &KeyedRoll, n_bars: usize, source_id: &str) -> Vec<Window> {
    assert!(n_bars >= 1, "windows need at least one bar");
    (0..roll.bars() / n_bars)
        .map(|w| Window { bars: n_bars, roll: roll.bars_range(w * n_bars, n_bars), source_id: format!("{source_id}#{w}") })
        .filter(|w| !w.roll.is_silent())
        .collect()
}

/// Emits a format-0 file: tempo 120 BPM, 4/4, program 0, one note per
/// maximal run of active steps at velocity 80. Step boundaries land on exact
/// ticks when `ppq` is a multiple of 4.
pub fn write_midi(roll: &PianoRoll, ppq: u16) -> Vec<u8> {
    let tick_of = |step: usize| step as u64 * u64::from(ppq) / 4;
    // (tick, order, pitch): offs sort before ons at the same tick.
    let mut notes: Vec<(u64, u8, u8)> = Vec::new();
    for p in 0..roll.pitches() {
        let mut t = 0;
        while t < roll.steps() {
            if !roll.get(t, p) {
                t += 1;
                continue;
            }
            let start = t;
            while t < roll.steps() && roll.get(t, p) {
                t += 1;
            }
            let note = LOWEST_NOTE.saturating_add(p as u8).min(127);
            notes.push((tick_of(start), 1, note));
            notes.push((tick_of(t), 0, note));
        }
    }
    notes.sort();

    let mut track = Vec::new();
    write_vlq(&mut track, 0);
    track.extend_from_slice(&[0xff, 0x51, 0x03]);
    track.extend_from_slice(&EXPORT_TEMPO.to_be_bytes()[1..]);
    write_vlq(&mut track, 0);
    track.extend_from_slice(&[0xff, 0x58, 0x04, 0x04, 0x02, 0x18, 0x08]);
    write_vlq(&mut track, 0);
    track.extend_from_slice(&[0xc0, 0x00]);
    let mut last = 0u64;
    for (tick, on, note) in notes {
        write_vlq(&mut track, (tick - last) as u32);
        last = tick;
        if on == 1 {
            track.extend_from_slice(&[0x90, note, EXPORT_VELOCITY]);
        } else {
            track.extend_from_slice(&[0x80, note, 0x40]);
        }
    }
    write_vlq(&mut track, (tick_of(roll.steps()) - last) as u32);
    track.extend_from_slice(&[0xff, 0x2f, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&ppq.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    out
}

fn write_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 5];
    let mut i = buf.len() - 1;
    buf[i] = (value & 0x7f) as u8;
    value >>= 7;
    while value > 0 {
        i -= 1;
        buf[i] = 0x80 | (value & 0x7f) as u8;
        value >>= 7;
    }
    out.extend_from_slice(&buf[i..]);
}
