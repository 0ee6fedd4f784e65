//! Drives the `word4per` binary through every subcommand on a tiny corpus.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

pub const BIN: &str = env!("CARGO_BIN_EXE_word4per");

pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Outcome {
    pub fn json(&self) -> serde_json::Value {
        serde_json::from_str(&self.stdout).unwrap_or_else(|e| panic!("{e}: {}", self.stdout))
    }

    pub fn error(&self) -> serde_json::Value {
        let v: serde_json::Value =
            serde_json::from_str(&self.stderr).unwrap_or_else(|e| panic!("{e}: {}", self.stderr));
        v["error"].clone()
    }
}

pub fn word4per(cwd: &Path, args: &[&str]) -> Outcome {
    let out = Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .env_remove("W4P_BIND")
        .output()
        .expect("binary runs");
    Outcome {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn succeed(cwd: &Path, args: &[&str]) -> serde_json::Value {
    let o = word4per(cwd, args);
    assert_eq!(o.code, 0, "word4per {args:?} failed: {}", o.stderr);
    o.json()
}

pub const SMALL_CONFIG: &str = r#"
[data]
manifest = "data/train.jsonl"
gallery = "data/gallery.jsonl"
references = "data/references.jsonl"
triplets = "data/triplets.jsonl"

[synth]
identities = 4

[encoder]
checkpoint = "finetune/encoder.w4pe"
embed_dim = 16
token_dim = 12
text_hidden = 16
visual_hidden = 16

[cache]
dir = "cache"

[finetune]
epochs = 3
batch_size = 8
warmup_epochs = 1

[tinet]
epochs = 3
batch_size = 8
warmup_epochs = 1

[[tinet.nets]]
name = "text"
mode = "Text"
hidden = 24
seed = 1

[[tinet.nets]]
name = "vis"
mode = "Vis"
hidden = 24
seed = 2

[eval]
tinets = ["tinet/tinets/text.w4pt", "tinet/tinets/vis.w4pt"]

[probe]
tinet = "tinet/tinets/text.w4pt"
k = 3

[self_retrieval]
tinets = ["tinet/tinets/vis.w4pt"]

[curate]
k = 2
candidates = "curate-mine/candidates.jsonl"
verdicts = "verdicts.jsonl"
"#;

/// Subcommand invocations in pipeline order; the second field is the run
/// directory each one writes.
pub const STEPS: &[(&[&str], &str)] = &[
    (&["synth"], "data"),
    (&["finetune"], "finetune"),
    (&["cache"], "cache"),
    (&["train-tinet"], "tinet"),
    (&["train-tinet", "--untrained"], "untrained"),
    (&["eval"], "eval"),
    (&["eval", "--mode", "image-only"], "eval-image"),
    (&["eval", "--mode", "avg", "--exclude-reference"], "eval-avg"),
    (&["eval", "--strategy", "1st-sim"], "eval-1st-sim"),
    (&["probe-vocab"], "probe"),
    (&["self-retrieval"], "self"),
    (&["curate-mine"], "curate-mine"),
    (&["curate-apply"], "curate-apply"),
    (&["filter-corpus", "--top-fraction", "0.5"], "filter"),
];

/// Writes the config and runs every step in `root`, returning each step's
/// printed summary.
pub fn run_pipeline(root: &Path) -> Vec<(String, serde_json::Value)> {
    run_pipeline_prefix(root, STEPS.len())
}

/// Runs only the first `n` steps.
pub fn run_pipeline_prefix(root: &Path, n: usize) -> Vec<(String, serde_json::Value)> {
    std::fs::create_dir_all(root).unwrap();
    std::fs::write(root.join("small.toml"), SMALL_CONFIG).unwrap();
    let mut out = Vec::new();
    for (args, dir) in &STEPS[..n] {
        if args[0] == "curate-apply" {
            write_verdicts(root);
        }
        let mut full: Vec<&str> = args.to_vec();
        full.extend(["--config", "small.toml", "--run-dir", dir]);
        out.push((args.join(" "), succeed(root, &full)));
    }
    out
}

/// Accepts the first mined pair and rejects the second.
fn write_verdicts(root: &Path) {
    let text = std::fs::read_to_string(root.join("curate-mine/candidates.jsonl")).unwrap();
    let mut lines = Vec::new();
    for (line, decision) in text.lines().zip(["accept", "reject"]) {
        let c: serde_json::Value = serde_json::from_str(line).unwrap();
        let v = serde_json::json!({
            "pair_id": c["pair_id"],
            "target_id": c["target_id"],
            "candidate_id": c["candidate_id"],
            "decision": decision,
            "annotator": "tester",
            "ts": "2024-01-01T00:00:00Z",
        });
        lines.push(v.to_string());
    }
    std::fs::write(root.join("verdicts.jsonl"), lines.join("\n") + "\n").unwrap();
}

/// Every regular file under `root`, keyed by relative path.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.insert(p.strip_prefix(base).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Runs the pipeline twice in the same directory and lists files whose
/// bytes differ between the runs, plus files present in only one.
pub fn pipeline_differences(parent: &Path) -> (Vec<(String, serde_json::Value)>, Vec<String>) {
    let work = parent.join("work");
    let first_summaries = run_pipeline(&work);
    let first = parent.join("first");
    std::fs::rename(&work, &first).unwrap();
    let second_summaries = run_pipeline(&work);
    assert_eq!(first_summaries, second_summaries);
    let a = snapshot(&first);
    let b = snapshot(&work);
    let mut diffs = Vec::new();
    for (path, bytes) in &a {
        match b.get(path) {
            Some(other) if other == bytes => {}
            Some(_) => diffs.push(format!("{} differs", path.display())),
            None => diffs.push(format!("{} missing in second run", path.display())),
        }
    }
    for path in b.keys().filter(|p| !a.contains_key(*p)) {
        diffs.push(format!("{} missing in first run", path.display()));
    }
    (second_summaries, diffs)
}
