use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use word4per::error::AppError;
use word4per::manifest::*;
use word4per_core::dataset::{ManifestKind, Triplet};

fn line(id: &str, caption: Option<&str>) -> String {
    let mut v = serde_json::json!({
        "image_id": id,
        "identity_id": format!("p-{}", &id[..1]),
        "path": format!("img/{id}.png"),
        "width": 64,
        "height": 128,
        "source": "test",
    });
    if let Some(c) = caption {
        v["caption"] = c.into();
    }
    v.to_string()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn parse_at(e: AppError) -> (usize, String) {
    match e {
        AppError::Parse { line, message, .. } => (line, message),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn duplicate_ids_name_both_lines() {
    let dir = tempfile::tempdir().unwrap();
    let text = [line("a1", Some("x")), line("b1", Some("y")), String::new(), line("a1", Some("z"))].join("\n");
    let p = write(dir.path(), "m.jsonl", &text);
    let (at, msg) = parse_at(load_images(&p, ManifestKind::ImageCaption).unwrap_err());
    assert_eq!(at, 4);
    assert!(msg.contains("duplicate image_id `a1` (first on line 1)"), "{msg}");
}

#[test]
fn missing_caption_is_reported_on_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let text = [line("a1", Some("x")), line("b1", None)].join("\n");
    let p = write(dir.path(), "m.jsonl", &text);
    let (at, msg) = parse_at(load_images(&p, ManifestKind::ImageCaption).unwrap_err());
    assert_eq!(at, 2);
    assert!(msg.contains("no caption"), "{msg}");

    let m = load_images(&p, ManifestKind::ImageOnly).unwrap();
    assert_eq!(m.dataset.len(), 2);
    assert!(!m.dataset.has_captions());
}

#[test]
fn malformed_json_and_unknown_fields_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "m.jsonl", &format!("{}\n\n{{not json\n", line("a1", Some("x"))));
    assert_eq!(parse_at(load_images(&p, ManifestKind::ImageCaption).unwrap_err()).0, 3);

    let extra = line("b1", Some("y")).replacen('{', "{\"colour\":\"red\",", 1);
    let p = write(dir.path(), "n.jsonl", &format!("{}\n{extra}\n", line("a1", Some("x"))));
    let (at, msg) = parse_at(load_images(&p, ManifestKind::ImageCaption).unwrap_err());
    assert_eq!(at, 2);
    assert!(msg.contains("colour"), "{msg}");
}

#[test]
fn zero_sized_images_and_empty_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let zero = line("a1", Some("x")).replace("\"width\":64", "\"width\":0");
    let p = write(dir.path(), "m.jsonl", &zero);
    let (at, msg) = parse_at(load_images(&p, ManifestKind::ImageCaption).unwrap_err());
    assert_eq!(at, 1);
    assert!(msg.contains("zero width"), "{msg}");

    let p = write(dir.path(), "e.jsonl", "\n\n");
    assert!(matches!(load_images(&p, ManifestKind::ImageOnly).unwrap_err(), AppError::Format { .. }));
    assert!(matches!(load_triplets(&p).unwrap_err(), AppError::Format { .. }));
}

#[test]
fn relative_paths_resolve_against_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("sub")).unwrap();
    let p = write(&dir.path().join("sub"), "m.jsonl", &line("a1", Some("x")));
    let m = load_images(&p, ManifestKind::ImageCaption).unwrap();
    let rec = m.dataset.get("a1").unwrap();
    assert_eq!(m.resolve(rec), dir.path().join("sub/img/a1.png"));
}

#[test]
fn dangling_triplet_references_are_reported_per_line() {
    let dir = tempfile::tempdir().unwrap();
    let t = |q: &str, targets: &[&str]| {
        serde_json::json!({"query_image_id": q, "relative_caption": "wearing a hat", "target_image_ids": targets}).to_string()
    };
    let p = write(dir.path(), "t.jsonl", &[t("a", &["b"]), t("a", &["c", "zz"])].join("\n"));
    let known = |id: &str| ["a", "b", "c"].contains(&id);
    let (at, msg) = parse_at(load_triplets_checked(&p, known).unwrap_err());
    assert_eq!(at, 2);
    assert!(msg.contains("zz"), "{msg}");

    let p = write(dir.path(), "s.jsonl", &t("a", &["a"]));
    let (_, msg) = parse_at(load_triplets_checked(&p, known).unwrap_err());
    assert!(msg.contains("its own targets"), "{msg}");
}

#[test]
fn images_and_triplets_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let text = [line("a1", Some("red coat")), line("b1", Some("blue jeans"))].join("\n");
    let p = write(dir.path(), "m.jsonl", &text);
    let m = load_images(&p, ManifestKind::ImageCaption).unwrap();
    let out = dir.path().join("out.jsonl");
    write_images(&out, &m.dataset).unwrap();
    assert_eq!(load_images(&out, ManifestKind::ImageCaption).unwrap().dataset, m.dataset);

    let triplets = vec![Triplet {
        query_image_id: "a1".into(),
        relative_caption: "now carrying a bag".into(),
        target_image_ids: vec!["b1".into()],
    }];
    let tp = dir.path().join("t.jsonl");
    write_triplets(&tp, &triplets).unwrap();
    assert_eq!(load_triplets(&tp).unwrap(), triplets);
    match load_manifest(&tp, ManifestKind::Triplets).unwrap() {
        Manifest::Triplets(t) => assert_eq!(t, triplets),
        other => panic!("{other:?}"),
    }
    assert!(matches!(load_images(&tp, ManifestKind::Triplets).unwrap_err(), AppError::Usage(_)));
}

#[test]
fn benchmark_scale_files_load_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let mut gallery = String::new();
    for i in 0..20_510 {
        let id = format!("g{i:05}");
        writeln!(gallery, "{}", line(&id, None)).unwrap();
    }
    let gp = write(dir.path(), "gallery.jsonl", &gallery);
    let mut triplets = String::new();
    for i in 0..2_202 {
        let t = serde_json::json!({
            "query_image_id": format!("g{:05}", i * 9),
            "relative_caption": "now in a dark jacket",
            "target_image_ids": [format!("g{:05}", i * 9 + 1), format!("g{:05}", i * 9 + 2)],
        });
        writeln!(triplets, "{t}").unwrap();
    }
    let tp = write(dir.path(), "triplets.jsonl", &triplets);

    let start = Instant::now();
    let g = load_images(&gp, ManifestKind::ImageOnly).unwrap();
    let t = load_triplets_checked(&tp, |id| g.dataset.contains(id)).unwrap();
    let took = start.elapsed();
    assert_eq!(g.dataset.len(), 20_510);
    assert_eq!(t.len(), 2_202);
    assert!(took.as_secs_f64() < 10.0, "{took:?}");
}

#[test]
fn atomic_writes_replace_whole_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.jsonl");
    write_jsonl(&p, &[1, 2, 3]).unwrap();
    write_jsonl(&p, &[4]).unwrap();
    let back: Vec<(usize, i32)> = read_jsonl(&p).unwrap();
    assert_eq!(back, vec![(1, 4)]);
    let leftovers = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(leftovers, 1);
}
