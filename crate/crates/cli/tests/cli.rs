use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use singalign::features::FeatureMatrix;
use singalign::score::LyricsTimeline;
use singalign::tracker::LyricEvent;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_singalign"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// One short generated song, prepared against its own reference.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    song: PathBuf,
    prepared: PathBuf,
}

fn fixture(notes: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let n = notes.to_string();
    ok(&["gen-dataset", "--out", s(&root), "--songs", "1", "--notes", &n, "--seed", "5"]);
    let song = root.join("song_00");
    let prepared = dir.path().join("prepared");
    ok(&[
        "prepare",
        "--score",
        s(&song.join("score.musicxml")),
        "--lyrics",
        s(&song.join("lyrics.txt")),
        "--ref",
        s(&song.join("ref.wav")),
        "--ref-ppg",
        s(&song.join("ppg_ref.fmx")),
        "--out",
        s(&prepared),
    ]);
    Fixture {
        _dir: dir,
        root,
        song,
        prepared,
    }
}

fn events(out: &Output) -> Vec<LyricEvent> {
    String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn untimed(v: &[LyricEvent]) -> Vec<LyricEvent> {
    v.iter().map(LyricEvent::without_timing).collect()
}

#[test]
fn prepare_on_self_synthesized_reference_is_near_identity() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    ok(&["gen-dataset", "--out", s(&root), "--songs", "1", "--notes", "24"]);
    let song = root.join("song_00");
    let wav = dir.path().join("score.wav");
    ok(&["synth", "--score", s(&song.join("score.musicxml")), "--out", s(&wav)]);
    let prepared = dir.path().join("prepared");
    ok(&[
        "prepare",
        "--score",
        s(&song.join("score.musicxml")),
        "--ref",
        s(&wav),
        "--out",
        s(&prepared),
    ]);
    for f in ["score.wav", "score_ref_path.csv", "timeline.json", "tempo.json", "ref.wav"] {
        assert!(prepared.join(f).is_file(), "{f}");
    }
    let t = LyricsTimeline::load(&prepared.join("timeline.json")).unwrap();
    for n in t.notes() {
        let err = (n.ref_time.unwrap() - n.score_time).abs();
        assert!(err <= 0.08, "note {}: {err}", n.index);
    }
}

#[test]
fn missing_lyrics_warns_and_uses_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    ok(&["gen-dataset", "--out", s(&root), "--songs", "1", "--notes", "12"]);
    let song = root.join("song_00");
    let score = dir.path().join("score.musicxml");
    std::fs::copy(song.join("score.musicxml"), &score).unwrap();
    let prepared = dir.path().join("prepared");
    let out = ok(&["prepare", "--score", s(&score), "--ref", s(&song.join("ref.wav")), "--out", s(&prepared)]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("single line"));
    let t = LyricsTimeline::load(&prepared.join("timeline.json")).unwrap();
    assert_eq!(t.lines.len(), 1);
}

#[test]
fn malformed_score_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let score = dir.path().join("bad.musicxml");
    std::fs::write(&score, "<score-partwise><part>").unwrap();
    let out = run(&["synth", "--score", s(&score), "--out", s(&dir.path().join("x.wav"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("xml error"));
}

#[test]
fn fast_and_realtime_tracks_agree() {
    let f = fixture(10);
    let target = f.song.join("target.wav");
    let provider = format!("file:{}", s(&f.song.join("ppg_target.fmx")));
    let args = |pace: &'static str| {
        vec![
            "track".to_string(),
            "--prepared".into(),
            s(&f.prepared).into(),
            "--target".into(),
            s(&target).into(),
            "--features".into(),
            "chroma+ppg:phoneme5".into(),
            "--ppg-provider".into(),
            provider.clone(),
            "--pace".into(),
            pace.into(),
        ]
    };
    let fast = ok(&args("fast").iter().map(String::as_str).collect::<Vec<_>>());
    let live = ok(&args("realtime").iter().map(String::as_str).collect::<Vec<_>>());
    let (fast, live) = (events(&fast), events(&live));
    assert!(!fast.is_empty());
    assert_eq!(untimed(&fast), untimed(&live));
}

#[test]
fn exec_provider_matches_file_provider() {
    let f = fixture(10);
    let target = f.song.join("target.wav");
    let ppg = f.song.join("ppg_target.fmx");
    let common = |provider: &str| {
        ok(&[
            "track",
            "--prepared",
            s(&f.prepared),
            "--target",
            s(&target),
            "--features",
            "chroma+ppg:phoneme5",
            "--pace",
            "fast",
            "--ppg-deadline-ms",
            "5000",
            "--ppg-provider",
            provider,
        ])
    };
    let file = events(&common(&format!("file:{}", s(&ppg))));
    let exec = common(&format!("exec:{} serve-ppg --ppg {}", env!("CARGO_BIN_EXE_singalign"), s(&ppg)));
    assert_eq!(untimed(&file), untimed(&events(&exec)));
    assert!(events(&exec).iter().all(|e| !e.fallback));
}

#[test]
fn wrong_posterior_length_is_a_clock_mismatch() {
    let f = fixture(10);
    let out = run(&[
        "track",
        "--prepared",
        s(&f.prepared),
        "--target",
        s(&f.song.join("target.wav")),
        "--features",
        "chroma+ppg:phoneme5",
        "--ppg-provider",
        &format!("file:{}", s(&f.song.join("ppg_ref.fmx"))),
        "--pace",
        "fast",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("frame count mismatch"));
}

#[test]
fn chroma_tracking_needs_no_provider_and_writes_sinks() {
    let f = fixture(10);
    let dir = f.prepared.parent().unwrap().to_path_buf();
    let (jsonl, path, latency) = (dir.join("ev.jsonl"), dir.join("path.csv"), dir.join("lat.json"));
    let out = ok(&[
        "track",
        "--prepared",
        s(&f.prepared),
        "--target",
        s(&f.song.join("target.wav")),
        "--pace",
        "fast",
        "--out",
        s(&jsonl),
        "--path-out",
        s(&path),
        "--latency-out",
        s(&latency),
    ]);
    let printed = String::from_utf8(out.stdout).unwrap();
    assert!(!printed.is_empty());
    assert_eq!(std::fs::read_to_string(&jsonl).unwrap(), printed);
    let p = singalign::timeline::WarpingPath::load(&path).unwrap();
    assert!(p.len() > 10);
    let lat: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&latency).unwrap()).unwrap();
    assert!(lat["chunks"].as_u64().unwrap() > 0);

    // the same audio as raw samples on stdin
    let clip = singalign::audio::load_wav(&f.song.join("target.wav")).unwrap();
    let bytes: Vec<u8> = clip.samples().iter().flat_map(|x| x.to_le_bytes()).collect();
    let mut child = bin()
        .args(["track", "--prepared", s(&f.prepared), "--target", "-", "--pace", "fast"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    let writer = std::thread::spawn(move || {
        use std::io::Write;
        stdin.write_all(&bytes).unwrap();
    });
    let streamed = child.wait_with_output().unwrap();
    writer.join().unwrap();
    assert!(streamed.status.success());
    assert_eq!(
        untimed(&events(&streamed)),
        untimed(&printed.lines().map(|l| serde_json::from_str(l).unwrap()).collect::<Vec<_>>())
    );
}

#[test]
fn config_errors_exit_with_two() {
    let f = fixture(8);
    let target = f.song.join("target.wav");
    let base = ["track", "--prepared", s(&f.prepared), "--target", s(&target)];
    let mut a = base.to_vec();
    a.extend(["--features", "chroma+banana"]);
    assert_eq!(run(&a).status.code(), Some(2));
    let mut a = base.to_vec();
    a.extend(["--features", "chroma+ppg:phoneme5"]);
    let out = run(&a);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--ppg-provider"));
    assert_eq!(run(&["track", "--no-such-flag"]).status.code(), Some(2));
    assert!(run(&["--help"]).status.success());

    let conf = f.prepared.join("run.conf");
    std::fs::write(&conf, "pace = sometimes\n").unwrap();
    let mut a = base.to_vec();
    a.extend(["--config", s(&conf)]);
    assert_eq!(run(&a).status.code(), Some(2));
    a.extend(["--pace", "fast"]);
    assert!(run(&a).status.success());
}

#[test]
fn eval_prints_table_and_reports_missing_files() {
    let f = fixture(10);
    let report = f.prepared.join("report.json");
    let out = ok(&[
        "eval",
        "--dataset",
        s(&f.root),
        "--features",
        "chroma+ppg:phoneme5",
        "--report",
        s(&report),
    ]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("song_00") && table.contains("average"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["features"], "chroma+ppg:phoneme5");
    assert!(json["online"]["aae_ms"].as_f64().unwrap().is_finite());

    std::fs::remove_file(f.song.join("target.wav")).unwrap();
    let out = run(&["eval", "--dataset", s(&f.root)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("target.wav"));
}

#[test]
fn features_dump_fmx_and_csv() {
    let f = fixture(8);
    let wav = f.song.join("ref.wav");
    let fmx = f.prepared.join("ref.fmx");
    ok(&["features", "--audio", s(&wav), "--features", "mel", "--out", s(&fmx)]);
    let m = FeatureMatrix::load_fmx(&fmx).unwrap();
    assert_eq!(m.dims(), 66);
    let csv = f.prepared.join("ref.csv");
    ok(&[
        "features",
        "--audio",
        s(&wav),
        "--features",
        "chroma+ppg:phoneme5",
        "--ppg",
        s(&f.song.join("ppg_ref.fmx")),
        "--format",
        "csv",
        "--out",
        s(&csv),
    ]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.lines().count() >= m.frames());
}
