use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn example_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/example/config.json")
}

fn medaug(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medaug"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .env("SOURCE_DATE_EPOCH", "1750000000")
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = medaug(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn lines(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn planned(out: &Path, n: &str) {
    ok(out, &["--config", example_config().to_str().unwrap(), "--n", n, "plan"]);
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(medaug(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(medaug(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(medaug(dir.path(), &["plan", "--n", "many"]).status.code(), Some(1));
}

#[test]
fn missing_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = medaug(dir.path(), &["curate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("run_config.json"));
}

#[test]
fn generate_resumes_from_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    planned(dir.path(), "30");
    let first = ok(dir.path(), &["--provider", "mock", "generate"]);
    assert!(first.contains("generated 30 new completions (0 resumed"), "{first}");
    let before = std::fs::read(dir.path().join("completions.jsonl")).unwrap();
    let second = ok(dir.path(), &["--provider", "mock", "generate"]);
    assert!(second.contains("generated 0 new completions (30 resumed"), "{second}");
    let ids = |bytes: &[u8]| -> Vec<String> {
        String::from_utf8_lossy(bytes)
            .lines()
            .map(|l| {
                serde_json::from_str::<serde_json::Value>(l).unwrap()["request_id"]
                    .as_str()
                    .unwrap()
                    .to_string()
            })
            .collect()
    };
    assert_eq!(ids(&before), ids(&std::fs::read(dir.path().join("completions.jsonl")).unwrap()));
}

#[test]
fn config_digest_mismatch_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    planned(dir.path(), "20");
    ok(dir.path(), &["--provider", "mock", "generate"]);
    // A different seed changes the digest the plan was made under.
    let o = medaug(dir.path(), &["--seed", "7", "curate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("config digest"));
    ok(dir.path(), &["--seed", "7", "--force", "curate"]);
}

#[test]
fn curate_writes_ledgers_that_account_for_every_completion() {
    let dir = tempfile::tempdir().unwrap();
    planned(dir.path(), "60");
    ok(dir.path(), &["--provider", "mock", "generate"]);
    let table = ok(dir.path(), &["curate"]);
    assert!(table.contains("| total |"));
    let accepted = lines(&dir.path().join("accepted.jsonl")).len();
    let rejected = lines(&dir.path().join("rejections.jsonl")).len();
    assert_eq!(accepted + rejected, 60);
    for r in lines(&dir.path().join("accepted.jsonl")) {
        assert_eq!(r["status"]["state"], "accepted");
        assert!(r["metrics"]["semantic_sim"].is_number());
    }
    let csv = std::fs::read_to_string(dir.path().join("funnel.csv")).unwrap();
    assert!(csv.starts_with("source,stage,in,accepted,rejected,acceptance_rate"), "{csv}");
    let again = ok(dir.path(), &["funnel-stats"]);
    assert_eq!(
        again.trim(),
        table.lines().take_while(|l| !l.is_empty()).collect::<Vec<_>>().join("\n").trim()
    );
}

#[test]
fn assemble_drops_records_rejected_in_review() {
    let dir = tempfile::tempdir().unwrap();
    planned(dir.path(), "40");
    ok(dir.path(), &["--provider", "mock", "generate"]);
    ok(dir.path(), &["curate"]);
    ok(dir.path(), &["sample-review"]);
    let sample = lines(&dir.path().join("review_sample.jsonl"));
    let victim = sample[0]["id"].as_str().unwrap().to_string();
    let verdict = serde_json::json!({
        "record_id": victim, "reviewer": "amal", "fluency": 2, "relevance": 1, "plausibility": 1,
        "verdict": "reject", "notes": "معلومة طبية خاطئة", "submitted_at": "2025-06-15T16:00:00Z"
    });
    std::fs::write(dir.path().join("verdicts.jsonl"), format!("{verdict}\n")).unwrap();
    ok(dir.path(), &["assemble"]);
    let corpus: Vec<serde_json::Value> = ["train.jsonl", "val.jsonl"]
        .iter()
        .flat_map(|f| lines(&dir.path().join("corpus").join(f)))
        .collect();
    assert!(corpus.iter().all(|r| r["id"] != victim.as_str()));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("corpus/manifest.json")).unwrap()).unwrap();
    let total: u64 = manifest["counts"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(total as usize, corpus.len());
    let training: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("corpus/training_manifest.json")).unwrap()).unwrap();
    assert_eq!(training["epochs"], 3);
    assert_eq!(training["schedule"], "cosine_decay");
}

#[test]
fn score_appends_rows_and_report_renders_them() {
    let dir = tempfile::tempdir().unwrap();
    let refs = dir.path().join("refs.jsonl");
    let preds = dir.path().join("preds.jsonl");
    let a = medaug_core::QARecord::new("عندي صداع", "اشرب الماء وخذ قسطا من الراحة", medaug_core::Source::Real);
    let b = medaug_core::QARecord::new("عندي سعال", "راجع الطبيب اذا استمر السعال", medaug_core::Source::Real);
    medaug_core::record::write_jsonl(&[a.clone(), b.clone()], &refs).unwrap();
    std::fs::write(
        &preds,
        format!(
            "{}\n{}\n",
            serde_json::json!({"id": a.id, "output_text": a.answer}),
            serde_json::json!({"id": b.id, "output_text": "خذ دواء للسعال"})
        ),
    )
    .unwrap();
    let table = dir.path().join("scores.csv");
    let args = |model: &'static str, config: &'static str| {
        vec![
            "score".to_string(),
            "--predictions".into(),
            preds.display().to_string(),
            "--references".into(),
            refs.display().to_string(),
            "--model".into(),
            model.into(),
            "--configuration".into(),
            config.into(),
            "--table".into(),
            table.display().to_string(),
        ]
    };
    for (m, c) in [("toy", "Base Model"), ("toy", "Tuned")] {
        let a = args(m, c);
        ok(dir.path(), &a.iter().map(String::as_str).collect::<Vec<_>>());
    }
    let csv = std::fs::read_to_string(&table).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    let report = ok(dir.path(), &["report", "--tables", table.to_str().unwrap(), "--caption", "Toy"]);
    assert!(report.starts_with("Toy"));
    assert!(report.contains("| toy |"));
    assert_eq!(std::fs::read_to_string(dir.path().join("report.md")).unwrap(), report);

    // A prediction without a reference is a validation error.
    std::fs::write(&preds, "{\"id\": \"0000000000000000\", \"output_text\": \"x\"}\n").unwrap();
    let a = args("toy", "Base Model");
    assert_eq!(
        medaug(dir.path(), &a.iter().map(String::as_str).collect::<Vec<_>>()).status.code(),
        Some(1)
    );
}

#[test]
fn http_provider_without_key_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    planned(dir.path(), "10");
    let o = Command::new(env!("CARGO_BIN_EXE_medaug"))
        .arg("--out-dir")
        .arg(dir.path())
        .arg("generate")
        .env_remove("OPENAI_API_KEY")
        .env_remove("GEMINI_API_KEY")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("_API_KEY"));
}
