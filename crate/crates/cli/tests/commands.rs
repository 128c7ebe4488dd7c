use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vhvae::midi_io::{write_midi, PianoRoll, DEFAULT_PPQ, LOWEST_NOTE};

fn vhvae(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vhvae"));
    cmd.args(args).env_remove("VHVAE_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// C major triad at C4 held for `bars` bars.
fn c_major_midi(dir: &Path, bars: usize) -> PathBuf {
    let mut roll = PianoRoll::new(bars, 88);
    for t in 0..roll.steps() {
        for note in [60u8, 64, 67] {
            roll.set(t, usize::from(note - LOWEST_NOTE), true);
        }
    }
    let path = dir.join("c_major.mid");
    std::fs::write(&path, write_midi(&roll, DEFAULT_PPQ)).unwrap();
    path
}

/// A short two-voice phrase that changes every beat.
fn phrase_midi(dir: &Path, name: &str, bars: usize, shift: usize) -> PathBuf {
    let mut roll = PianoRoll::new(bars, 88);
    for t in 0..roll.steps() {
        let beat = t / 4;
        roll.set(t, 30 + (beat * 3 + shift) % 12, true);
        roll.set(t, 50 + (beat * 5 + shift) % 9, true);
    }
    let path = dir.join(name);
    std::fs::write(&path, write_midi(&roll, DEFAULT_PPQ)).unwrap();
    path
}

const TINY: &str = "\
# small model for fast runs
n_bars = 1
embed_dim = 4
enc_hidden = 4
latent_dim = 3
attn_hidden = 3
conductor_hidden = 4
dec_hidden = 6
max_steps = 4
batch_size = 2
eval_every = 2
";

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = vhvae(&["train", "--no-such-flag"], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
    let none = vhvae(&[], &[]);
    assert_eq!(none.status.code(), Some(1));
}

#[test]
fn help_documents_config_defaults() {
    let o = vhvae(&["--help"], &[]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for needle in ["lambda_pl = 0.1", "beta_max = 0.2", "kl_warmup_steps = 2000", "enc_hidden = 128", "VHVAE_THREADS"] {
        assert!(text.contains(needle), "help lacks `{needle}`");
    }
}

#[test]
fn interval_vector_profile_of_c_major() {
    let dir = tempfile::tempdir().unwrap();
    let midi = c_major_midi(dir.path(), 1);
    let out = dir.path().join("out");
    let o = vhvae(&["--out", s(&out), "analyze", "iv", s(&midi)], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("major,0,0,1,1,1,0"));
    let csv = std::fs::read_to_string(out.join("interval_vectors.csv")).unwrap();
    assert!(csv.contains("major,0,0,1,1,1,0,16"));
}

#[test]
fn config_errors_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "n_keys = 2\nlearning_rat = 0.1\n").unwrap();
    let o = vhvae(&["--config", s(&cfg), "ingest", "--manifest", "x"], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2") && stderr(&o).contains("learning_rat"));
    let o = vhvae(&["ingest"], &[]);
    assert_eq!(o.status.code(), Some(1));
    let o = vhvae(&["ingest", "--manifest", "x"], &[("VHVAE_THREADS", "zero")]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_midi_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.mid"), b"MThd\x00\x00\x00\x06\x00\x00").unwrap();
    let manifest = dir.path().join("list.txt");
    std::fs::write(&manifest, "bad.mid\n").unwrap();
    let o = vhvae(&["--out", s(dir.path()), "ingest", "--manifest", s(&manifest)], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.mid"));
    let o = vhvae(&["--out", s(dir.path()), "sample", "--checkpoint", s(&manifest)], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn full_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let pieces: Vec<PathBuf> = (0..3).map(|i| phrase_midi(d, &format!("p{i}.mid"), 2, i)).collect();
    let manifest = d.join("list.txt");
    std::fs::write(&manifest, "p0.mid\np1.mid\np2.mid\n").unwrap();
    let cfg = d.join("run.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let base = ["--config", s(&cfg), "--seed", "7"];

    let run = |out: &Path, extra: &[&str], envs: &[(&str, &str)]| {
        let mut args: Vec<&str> = base.to_vec();
        args.extend(["--out", s(out)]);
        args.extend(extra);
        let o = vhvae(&args, envs);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        stdout(&o)
    };

    let (a, b) = (d.join("a"), d.join("b"));
    let ingest = run(&a, &["ingest", "--manifest", s(&manifest)], &[("VHVAE_THREADS", "2")]);
    assert!(ingest.contains("3 files, 6 windows"), "{ingest}");
    run(&b, &["ingest", "--manifest", s(&manifest)], &[("VHVAE_THREADS", "1")]);
    let read = |p: PathBuf| std::fs::read(p).unwrap();
    assert_eq!(read(a.join("windows.vhwc")), read(b.join("windows.vhwc")));

    run(&a, &["train"], &[]);
    run(&b, &["train"], &[]);
    for f in ["model.ckpt", "telemetry.csv", "run.cfg"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f} differs between runs");
    }
    let telemetry = String::from_utf8(read(a.join("telemetry.csv"))).unwrap();
    assert_eq!(telemetry.lines().count(), 3);

    let recon = run(&a, &["reconstruct", "--input", s(&pieces[0]), "--output", s(&a.join("recon.mid"))], &[]);
    assert!(recon.starts_with("ppv=") && recon.contains("tnr="), "{recon}");
    assert!(vhvae::midi_io::parse_midi(&read(a.join("recon.mid"))).is_ok());

    let sampled = run(&a, &["sample", "--count", "2"], &[]);
    assert!(sampled.contains("collision_rate="));
    let again = run(&b, &["sample", "--count", "2", "--checkpoint", s(&a.join("model.ckpt"))], &[]);
    assert_eq!(read(a.join("sample_001.mid")), read(b.join("sample_001.mid")));
    assert_eq!(sampled.lines().last(), again.lines().last());

    let eval = run(&a, &["eval", "--manifest", s(&manifest)], &[]);
    assert!(eval.contains("windows=6"), "{eval}");

    let att = run(&a, &["analyze", "attention", s(&pieces[1]), "--window", "1"], &[]);
    assert!(att.contains("1 bars"));
    let dot = String::from_utf8(read(a.join("horizontal.dot"))).unwrap();
    assert!(dot.starts_with("// seed=7 checkpoint=\"model.ckpt\""));
    assert!(a.join("vertical_bar00.csv").exists());
    let o = vhvae(&["--out", s(&a), "--config", s(&cfg), "analyze", "attention", s(&pieces[1]), "--window", "9"], &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn chord_map_needs_full_pitch_range_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    phrase_midi(d, "p.mid", 1, 0);
    std::fs::write(d.join("list.txt"), "p.mid\n").unwrap();
    let cfg = d.join("run.cfg");
    std::fs::write(&cfg, TINY.replace("max_steps = 4", "max_steps = 1")).unwrap();
    let out = d.join("o");
    let common = ["--config", s(&cfg), "--out", s(&out)];
    let go = |extra: &[&str]| {
        let mut args = common.to_vec();
        args.extend(extra);
        vhvae(&args, &[])
    };
    assert_eq!(go(&["ingest", "--manifest", s(&d.join("list.txt"))]).status.code(), Some(0));
    assert_eq!(go(&["train"]).status.code(), Some(0));
    let o = go(&["analyze", "cof"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("fifths_neighbor_ratio="));
    let svg = std::fs::read_to_string(out.join("chord_map.svg")).unwrap();
    assert_eq!(svg.matches("<circle").count(), 24);
}
