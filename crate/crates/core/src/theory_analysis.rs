//! Pitch-class set analysis, chord profiling over piano rolls, latent chord
//! maps, and exports of attention trees.

use std::fmt;

use crate::midi_io::{decompose_keys, PianoRoll, LOWEST_NOTE};
use crate::model::{posterior_mean, ModelConfig, ModelError, ParamStore};
use crate::numerics::{pca_2d, NumericsError, Pca2d};
use crate::tree_attention::{argmax_parent_tree, Parent, TreeMarginals};

pub const NOTE_NAMES: [&str; 12] = ["C", "C#", "D", "Eb", "E", "F", "F#", "G", "Ab", "A", "Bb", "B"];
/// MIDI note of C4, the register chords are rendered in.
pub const RENDER_BASE_NOTE: u8 = 60;

#[derive(Debug, thiserror::Error)]
pub enum TheoryError {
    #[error("pitch-class set is empty")]
    EmptySet,
    #[error("no inputs given")]
    NoInput,
    #[error("chord {0} cannot be rendered with this pitch range")]
    Unrenderable(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Subset of the twelve pitch classes as a bitmask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct PitchClassSet(u16);

impl PitchClassSet {
    pub fn from_classes(classes: &[u8]) -> Self {
        Self(classes.iter().fold(0u16, |m, &c| m | 1 << (c % 12)))
    }

    pub fn from_bits(bits: u16) -> Self {
        Self(bits & 0x0fff)
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn contains(self, pc: u8) -> bool {
        self.0 & (1 << (pc % 12)) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn classes(self) -> Vec<u8> {
        (0..12).filter(|&c| self.contains(c)).collect()
    }

    pub fn transpose(self, k: u8) -> Self {
        Self::from_classes(&self.classes().iter().map(|&c| (c + k % 12) % 12).collect::<Vec<_>>())
    }

    pub fn invert(self) -> Self {
        Self::from_classes(&self.classes().iter().map(|&c| (12 - c) % 12).collect::<Vec<_>>())
    }

    pub fn major(root: u8) -> Self {
        Self::from_classes(&[root, root + 4, root + 7])
    }

    pub fn minor(root: u8) -> Self {
        Self::from_classes(&[root, root + 3, root + 7])
    }
}

impl fmt::Display for PitchClassSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match classify_triad(*self) {
            TriadQuality::Major(r) => write!(f, "{}", NOTE_NAMES[usize::from(r)]),
            TriadQuality::Minor(r) => write!(f, "{}m", NOTE_NAMES[usize::from(r)]),
            TriadQuality::Other => {
                let parts: Vec<String> = self.classes().iter().map(u8::to_string).collect();
                write!(f, "{{{}}}", parts.join(" "))
            }
        }
    }
}

/// Counts of pairwise pitch-class distances 1 through 6.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct IntervalVector(pub [u32; 6]);

pub fn interval_vector(s: PitchClassSet) -> Result<IntervalVector, TheoryError> {
    if s.is_empty() {
        return Err(TheoryError::EmptySet);
    }
    let cs = s.classes();
    let mut v = [0u32; 6];
    for (i, &a) in cs.iter().enumerate() {
        for &b in &cs[i + 1..] {
            let d = b - a;
            v[usize::from(d.min(12 - d)) - 1] += 1;
        }
    }
    Ok(IntervalVector(v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TriadQuality {
    Major(u8),
    Minor(u8),
    Other,
}

impl TriadQuality {
    pub fn label(self) -> &'static str {
        match self {
            TriadQuality::Major(_) => "major",
            TriadQuality::Minor(_) => "minor",
            TriadQuality::Other => "other",
        }
    }
}

pub fn classify_triad(s: PitchClassSet) -> TriadQuality {
    for root in 0..12 {
        if s == PitchClassSet::major(root) {
            return TriadQuality::Major(root);
        }
        if s == PitchClassSet::minor(root) {
            return TriadQuality::Minor(root);
        }
    }
    TriadQuality::Other
}

/// Interval-vector totals of one chord quality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct QualityProfile {
    pub count: u64,
    pub sums: [u64; 6],
}

impl QualityProfile {
    fn add(&mut self, iv: IntervalVector) {
        self.count += 1;
        for (s, &x) in self.sums.iter_mut().zip(&iv.0) {
            *s += u64::from(x);
        }
    }

    /// Means as reduced fractions `(numerator, denominator)`; `None` when empty.
    pub fn mean_rational(&self) -> Option<[(u64, u64); 6]> {
        (self.count > 0).then(|| {
            self.sums.map(|s| {
                let g = gcd(s, self.count);
                (s / g, self.count / g)
            })
        })
    }

    pub fn mean(&self) -> Option<[f64; 6]> {
        (self.count > 0).then(|| self.sums.map(|s| s as f64 / self.count as f64))
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a.max(1)
    } else {
        gcd(b, a % b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ChordProfile {
    pub major: QualityProfile,
    pub minor: QualityProfile,
    pub other: QualityProfile,
}

/// Pitch class of a roll pitch index.
pub fn pitch_class(pitch: usize) -> u8 {
    ((usize::from(LOWEST_NOTE) + pitch) % 12) as u8
}

/// Interval-vector statistics over every step that sounds at least two
/// pitches, grouped by triad quality.
pub fn chord_profile(rolls: &[PianoRoll]) -> Result<ChordProfile, TheoryError> {
    if rolls.is_empty() {
        return Err(TheoryError::NoInput);
    }
    let mut profile = ChordProfile::default();
    for roll in rolls {
        for t in 0..roll.steps() {
            let active = roll.active(t);
            if active.len() < 2 {
                continue;
            }
            let set = PitchClassSet::from_classes(&active.iter().map(|&p| pitch_class(p)).collect::<Vec<_>>());
            let iv = interval_vector(set)?;
            match classify_triad(set) {
                TriadQuality::Major(_) => profile.major.add(iv),
                TriadQuality::Minor(_) => profile.minor.add(iv),
                TriadQuality::Other => profile.other.add(iv),
            }
        }
    }
    Ok(profile)
}

pub const PROFILE_CSV_HEADER: &str = "quality,v1,v2,v3,v4,v5,v6,count";

/// One row per quality; means print as integers or reduced fractions.
pub fn chord_profile_csv(p: &ChordProfile) -> String {
    let mut out = format!("{PROFILE_CSV_HEADER}\n");
    for (name, q) in [("major", &p.major), ("minor", &p.minor), ("other", &p.other)] {
        let cells: Vec<String> = match q.mean_rational() {
            Some(m) => m.iter().map(|&(n, d)| if d == 1 { n.to_string() } else { format!("{n}/{d}") }).collect(),
            None => vec![String::new(); 6],
        };
        out.push_str(&format!("{name},{},{}\n", cells.join(","), q.count));
    }
    out
}

/// A full-window roll that sounds the set at octave 4 in every step. Bars
/// are encoded independently, so tiling one bar across the window encodes
/// exactly like a single bar.
pub fn render_chord(set: PitchClassSet, cfg: &ModelConfig) -> Result<crate::midi_io::KeyedRoll, TheoryError> {
    let mut roll = PianoRoll::new(cfg.n_bars, cfg.n_pitches);
    for pc in set.classes() {
        let note = RENDER_BASE_NOTE + pc;
        let idx = usize::from(note - LOWEST_NOTE);
        if idx >= cfg.n_pitches {
            return Err(TheoryError::Unrenderable(set.to_string()));
        }
        for t in 0..roll.steps() {
            roll.set(t, idx, true);
        }
    }
    Ok(decompose_keys(&roll, cfg.n_keys))
}

#[derive(Debug, Clone)]
pub struct ChordMap {
    pub labels: Vec<String>,
    pub points: Vec<[f64; 2]>,
    pub pca: Pca2d,
}

/// Posterior means of rendered chords projected onto their top two
/// principal components.
pub fn chord_embeddings(store: &ParamStore, cfg: &ModelConfig, chords: &[PitchClassSet]) -> Result<ChordMap, TheoryError> {
    if chords.is_empty() {
        return Err(TheoryError::NoInput);
    }
    let mut mus = Vec::with_capacity(chords.len());
    for &c in chords {
        mus.push(posterior_mean(store, cfg, &render_chord(c, cfg)?)?);
    }
    let pca = pca_2d(&mus)?;
    Ok(ChordMap { labels: chords.iter().map(|c| c.to_string()).collect(), points: pca.projections.clone(), pca })
}

/// The 12 major then the 12 minor triads.
pub fn all_triads() -> Vec<PitchClassSet> {
    (0..12).map(PitchClassSet::major).chain((0..12).map(PitchClassSet::minor)).collect()
}

/// Mean distance between same-quality triads a fifth apart, divided by the
/// mean distance between all other same-quality pairs. Values below 1 mean
/// the map keeps circle-of-fifths neighbours close. `None` without both kinds
/// of pair.
pub fn fifths_neighbor_ratio(chords: &[PitchClassSet], points: &[[f64; 2]]) -> Option<f64> {
    let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let (mut near, mut far) = (Vec::new(), Vec::new());
    for i in 0..chords.len() {
        for j in i + 1..chords.len() {
            let (qa, qb) = (classify_triad(chords[i]), classify_triad(chords[j]));
            let interval = match (qa, qb) {
                (TriadQuality::Major(a), TriadQuality::Major(b)) | (TriadQuality::Minor(a), TriadQuality::Minor(b)) => {
                    (12 + b - a) % 12
                }
                _ => continue,
            };
            let d = dist(points[i], points[j]);
            if interval == 5 || interval == 7 {
                near.push(d);
            } else {
                far.push(d);
            }
        }
    }
    if near.is_empty() || far.is_empty() {
        return None;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Some(mean(&near) / mean(&far))
}

pub fn chord_map_csv(map: &ChordMap) -> String {
    let mut out = String::from("label,x,y\n");
    for (l, p) in map.labels.iter().zip(&map.points) {
        out.push_str(&format!("{l},{:.6},{:.6}\n", p[0], p[1]));
    }
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// 600 x 600 scatter plot with one labelled circle per point.
pub fn scatter_svg(labels: &[String], points: &[[f64; 2]]) -> String {
    const SIZE: f64 = 600.0;
    const MARGIN: f64 = 40.0;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let span = |k: usize| if hi[k] > lo[k] { hi[k] - lo[k] } else { 1.0 };
    let px = |p: [f64; 2]| {
        let x = MARGIN + (p[0] - lo[0]) / span(0) * (SIZE - 2.0 * MARGIN);
        let y = SIZE - MARGIN - (p[1] - lo[1]) / span(1) * (SIZE - 2.0 * MARGIN);
        (x, y)
    };
    let mut out = String::from(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"600\" height=\"600\" viewBox=\"0 0 600 600\">\n\
         <rect width=\"600\" height=\"600\" fill=\"white\"/>\n",
    );
    for (l, &p) in labels.iter().zip(points) {
        let (x, y) = px(p);
        out.push_str(&format!("<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"4\" fill=\"steelblue\"/>\n"));
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" font-family=\"sans-serif\">{}</text>\n",
            x + 6.0,
            y - 6.0,
            xml_escape(l)
        ));
    }
    out.push_str("</svg>\n");
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Vertical,
    Horizontal,
}

impl AttentionKind {
    fn node_label(self, i: usize) -> String {
        match self {
            AttentionKind::Vertical => format!("key {i}"),
            AttentionKind::Horizontal => format!("bar {i}"),
        }
    }

    fn graph_name(self) -> &'static str {
        match self {
            AttentionKind::Vertical => "vertical_attention",
            AttentionKind::Horizontal => "horizontal_attention",
        }
    }
}

/// Provenance written into exported attention graphs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportHeader {
    pub seed: u64,
    pub checkpoint: String,
}

/// Full marginal matrix: rows are parents (ROOT first), columns children.
pub fn attention_csv(m: &TreeMarginals, kind: AttentionKind) -> String {
    let n = m.n();
    let mut out = String::from("parent");
    for j in 0..n {
        out.push_str(&format!(",{}", kind.node_label(j)));
    }
    out.push('\n');
    out.push_str("ROOT");
    for j in 0..n {
        out.push_str(&format!(",{:.6}", m.marg_root[j]));
    }
    out.push('\n');
    for i in 0..n {
        out.push_str(&kind.node_label(i));
        for j in 0..n {
            let v = if i == j { 0.0 } else { m.marg[(i, j)] };
            out.push_str(&format!(",{v:.6}"));
        }
        out.push('\n');
    }
    out
}

/// Digraph of the most probable parent of every node, edges labelled with
/// their marginal probability.
pub fn attention_dot(m: &TreeMarginals, kind: AttentionKind, header: &ExportHeader) -> String {
    let mut out = format!(
        "// seed={} checkpoint=\"{}\"\ndigraph {} {{\n  root [label=\"ROOT\"];\n",
        header.seed,
        header.checkpoint.replace('"', "'"),
        kind.graph_name()
    );
    for j in 0..m.n() {
        out.push_str(&format!("  n{j} [label=\"{}\"];\n", kind.node_label(j)));
    }
    for (j, parent) in argmax_parent_tree(m).into_iter().enumerate() {
        let (from, p) = match parent {
            Parent::Root => ("root".to_string(), m.marg_root[j]),
            Parent::Node(i) => (format!("n{i}"), m.marg[(i, j)]),
        };
        out.push_str(&format!("  {from} -> n{j} [label=\"{p:.6}\"];\n"));
    }
    out.push_str("}\n");
    out
}
