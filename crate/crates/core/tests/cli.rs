mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::snapshot;

fn robocap(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_robocap"))
        .current_dir(cwd)
        .env_remove("ROBOCAP_API_KEY")
        .env_remove("ROBOCAP_EMBED_API_KEY")
        .args(args)
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/episodes")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

/// Writes a synthetic episode `ep` and returns the working directory.
fn workspace(frames: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let out = robocap(dir.path(), &["synth", "ep", "--frames", &frames.to_string(), "--episode-id", "demo"]);
    assert!(out.status.success(), "{}", stderr(&out));
    dir
}

fn single_run(root: &Path) -> PathBuf {
    let mut runs: Vec<PathBuf> = std::fs::read_dir(root.join("runs/demo"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(runs.len(), 1);
    runs.pop().unwrap()
}

#[test]
fn help_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let out = robocap(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/help.txt");
    if std::env::var_os("ROBOCAP_BLESS").is_some() {
        std::fs::write(&golden, stdout(&out)).unwrap();
    }
    assert_eq!(stdout(&out), std::fs::read_to_string(&golden).unwrap());
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = robocap(dir.path(), &["bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error: class=usage msg="), "{}", stderr(&out));

    let out = robocap(dir.path(), &["caption", &fixture("valid_minimal"), "--k", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error: class=config "), "{}", stderr(&out));

    let out = robocap(dir.path(), &["replay", &fixture("valid_minimal")]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn validate_reports_each_episode() {
    let dir = tempfile::tempdir().unwrap();
    let out = robocap(dir.path(), &["validate", &fixture("valid_minimal"), "--stride", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(stdout(&out), "ok\tvalid_minimal\tframes=6\tsampled=3\tstride=2\n");

    for (name, kind) in [
        ("joint7", "arity"),
        ("missing_image", "unresolvable_image"),
        ("nonmonotone", "non_monotonic_index"),
    ] {
        let out = robocap(dir.path(), &["validate", &fixture(name)]);
        assert_eq!(out.status.code(), Some(3), "{name}");
        let err = stderr(&out);
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with(&format!("error: class=data kind={kind} msg=")), "{err}");
    }

    let out = robocap(dir.path(), &["caption", "does-not-exist"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("kind=missing_file"), "{}", stderr(&out));
}

#[test]
fn caption_then_sweep_and_segment() {
    let dir = workspace(120);
    let out = robocap(dir.path(), &["--run-dir", "out", "caption", "ep"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("ok\tdemo\tboth\timage_captions=6\tscene_captions=2\t"));
    let run = single_run(&dir.path().join("out"));
    let run_arg = run.to_string_lossy().into_owned();

    let out = robocap(dir.path(), &["sweep", &run_arg]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("rows=21\t"));
    let table = std::fs::read_to_string(run.join("analysis/sweep_0.0_1.0_0.05.tsv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 22);
    assert_eq!(rows[0], "threshold\tcount");
    assert_eq!(rows[1], "0.0\t0");
    // Every similarity is below 1, so each gap is a boundary at the top.
    assert_eq!(rows[21], "1.0\t5");

    let out = robocap(dir.path(), &["segment", &run_arg, "--threshold", "1.0"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("threshold=1.0\tboundaries=[0,1,2,3,4]\tsegments=6\t"), "{}", stdout(&out));
    assert!(run.join("analysis/segmentation_1.0.json").is_file());
    assert_eq!(
        std::fs::read_to_string(run.join("analysis/boundaries_1.0.jsonl")).unwrap().lines().count(),
        5
    );

    let out = robocap(dir.path(), &["--run-dir", "out", "report"]);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["success_door_opening.tsv", "curve_door_opening_both.tsv", "word_counts.tsv", "scores.jsonl"] {
        assert!(dir.path().join("out/reports").join(f).is_file(), "{f}");
    }
}

#[test]
fn ablate_writes_four_runs() {
    let dir = workspace(60);
    let out = robocap(dir.path(), &["--run-dir", "out", "ablate", "ep"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let mut conditions: Vec<String> = std::fs::read_dir(dir.path().join("out/runs/demo"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().split('-').next().unwrap().to_string())
        .collect();
    conditions.sort();
    assert_eq!(conditions, ["both", "ee", "joint", "none"]);
}

#[test]
fn record_then_replay_reproduces_the_run() {
    let dir = workspace(100);
    let out = robocap(dir.path(), &["--run-dir", "rec", "record", "ep"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("rec/fixtures/session.json").is_file());
    assert!(dir.path().join("rec/fixtures/session.embeddings.json").is_file());

    let out = robocap(
        dir.path(),
        &[
            "--run-dir",
            "rep",
            "--backend",
            "replay",
            "--embed-backend",
            "replay",
            "--fixture",
            "rec/fixtures/session.json",
            "replay",
            "ep",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let recorded = snapshot(&single_run(&dir.path().join("rec")));
    let replayed = snapshot(&single_run(&dir.path().join("rep")));
    assert_eq!(recorded.keys().collect::<Vec<_>>(), replayed.keys().collect::<Vec<_>>());
    for (path, bytes) in &recorded {
        if path != Path::new("manifest.json") {
            assert_eq!(&replayed[path], bytes, "{}", path.display());
        }
    }

    // A config the fixture never saw misses and exits with a backend error.
    let out = robocap(
        dir.path(),
        &["--run-dir", "miss", "--backend", "replay", "--fixture", "rec/fixtures/session.json", "replay", "ep", "--k", "4"],
    );
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr(&out).starts_with("error: class=backend "), "{}", stderr(&out));
}

#[test]
fn api_keys_never_reach_disk_or_output() {
    let dir = workspace(40);
    let secret = "sk-very-secret-0123456789";
    let out = Command::new(env!("CARGO_BIN_EXE_robocap"))
        .current_dir(dir.path())
        .env("ROBOCAP_API_KEY", secret)
        .env("ROBOCAP_EMBED_API_KEY", secret)
        .args(["--run-dir", "out", "caption", "ep"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(!stdout(&out).contains(secret) && !stderr(&out).contains(secret));
    let files = snapshot(&dir.path().join("out"));
    assert!(files.contains_key(Path::new("last_invocation.json")));
    for (path, bytes) in files {
        let text = String::from_utf8_lossy(&bytes);
        assert!(!text.contains(secret), "{} leaks the key", path.display());
    }
    let invocation = std::fs::read_to_string(dir.path().join("out/last_invocation.json")).unwrap();
    assert!(invocation.contains("\"ROBOCAP_API_KEY\": \"<redacted>\""), "{invocation}");
}

#[test]
fn no_key_flag_exists() {
    let dir = tempfile::tempdir().unwrap();
    let out = robocap(dir.path(), &["--api-key", "x", "validate", "ep"]);
    assert_eq!(out.status.code(), Some(2));
}
