use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use qgen_core::model::Checkpoint;
use qgen_core::preprocess::{bucketize, qualify_columns, restructure, BucketMap};
use qgen_core::schema::parse_schema;
use qgen_core::semantics::BoundGrammar;
use qgen_core::training::TrainingReport;
use qgen_core::workload::{read_headers, read_workload};

fn qgen<S: AsRef<str>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qgen")).args(args.iter().map(|a| a.as_ref())).output().expect("binary runs")
}

fn ok<S: AsRef<str>>(args: &[S]) -> Output {
    let out = qgen(args);
    let shown: Vec<&str> = args.iter().map(|a| a.as_ref()).collect();
    assert!(out.status.success(), "qgen {shown:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new(n: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(&["synth", "--out", root.to_str().unwrap(), "--n", &n.to_string(), "--studios", "5", "--seed", "3"]);
        Fixture { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Path as an argument string.
    fn p(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    fn preprocess(&self) -> String {
        ok(&["preprocess", "--schema", &self.p("schema.txt"), "--workload", &self.p("workload.sql"), "--out", &self.p("pre")]);
        self.p("pre/buckets.txt")
    }

    fn train(&self, out: &str, extra: &[&str]) -> PathBuf {
        let mut args: Vec<String> = ["train", "--schema", &self.p("schema.txt"), "--data", &self.p("data"), "--workload", &self.p("workload.sql")]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for s in ["--profile", "tiny", "--bucket-count", "6", "--out", &self.p(out)] {
            args.push(s.to_string());
        }
        for kv in ["pretrain_epochs=2", "discriminator_epochs=1", "adversarial_epochs=1", "generator_batch=2", "rollout_count=2"] {
            args.extend(["--set".to_string(), kv.to_string()]);
        }
        args.extend(extra.iter().map(|s| s.to_string()));
        ok(&args);
        self.path(out)
    }
}

#[test]
fn preprocess_is_line_preserving_and_deterministic() {
    let f = Fixture::new(10);
    for out in ["a", "b"] {
        ok(&["preprocess", "--schema", &f.p("schema.txt"), "--workload", &f.p("workload.sql"), "--out", &f.p(out)]);
    }
    let canon = read(&f.path("a/canonical.sql"));
    assert_eq!(read_workload(&canon).len(), 10);
    assert_eq!(canon, read(&f.path("b/canonical.sql")));
    assert_eq!(read(&f.path("a/buckets.txt")), read(&f.path("b/buckets.txt")));
    let headers = read_headers(&canon);
    assert!(headers.iter().any(|(k, _)| k == "grammar") && headers.iter().any(|(k, _)| k == "schema"));
}

#[test]
fn preprocess_names_the_bad_line() {
    let f = Fixture::new(4);
    std::fs::write(f.path("bad.sql"), "SELECT * FROM movie\nSELECT * FROM studio\nSELECT * FROM movie ORDER BY movie.year\n").unwrap();
    let out = qgen(&["preprocess", "--schema", &f.p("schema.txt"), "--workload", &f.p("bad.sql"), "--out", &f.p("p")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn parse_and_derive_the_mini_grammar() {
    let dir = tempfile::tempdir().unwrap();
    let path = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    std::fs::write(path("mini.cfg"), qgen_core::grammar::MINI_GRAMMAR).unwrap();
    std::fs::write(path("q.sql"), "FROM TITLE SELECT * WHERE ID = 1\n").unwrap();
    ok(&["parse", "--grammar", &path("mini.cfg"), "--workload", &path("q.sql"), "--out", &path("q.seq")]);
    let text = std::fs::read_to_string(path("q.seq")).unwrap();
    assert_eq!(text.lines().nth(1), Some("0 1 4 2 3 5 6 7"));
    let back = ok(&["derive", "--grammar", &path("mini.cfg"), "--workload", &path("q.seq")]);
    assert_eq!(String::from_utf8(back.stdout).unwrap().trim(), "FROM TITLE SELECT * WHERE ID = 1");
}

#[test]
fn train_generate_and_fine_tune() {
    let f = Fixture::new(50);
    let ck = f.train("model.ckpt", &[]);
    let report = TrainingReport::from_jsonl(&read(&f.path("model.ckpt.jsonl"))).unwrap();
    assert_eq!(report.epochs.len(), 4);
    assert!(!report.fine_tune);

    let ck_arg = f.p("model.ckpt");
    ok(&["generate", "--checkpoint", &ck_arg, "--n", "100", "--seed", "5", "--out", &f.p("gan.sql")]);
    let queries = read_workload(&read(&f.path("gan.sql")));
    assert_eq!(queries.len(), 100);
    let loaded = Checkpoint::load(&ck, None).unwrap();
    let schema = parse_schema(&loaded.metadata["schema"]).unwrap();
    let map = Arc::new(BucketMap::from_text(&loaded.metadata["buckets"]).unwrap());
    let bound = BoundGrammar::new(&loaded.metadata["grammar"], &schema, Arc::clone(&map)).unwrap();
    for q in &queries {
        let c = bucketize(&qualify_columns(&restructure(q).unwrap(), &schema).unwrap(), &map).unwrap();
        let v = bound.validate(&c.to_canonical());
        assert!(v.syntactic && v.semantic, "{q}: {v:?}");
    }
    ok(&["generate", "--checkpoint", &ck_arg, "--n", "100", "--seed", "5", "--out", &f.p("gan2.sql")]);
    assert_eq!(read(&f.path("gan.sql")), read(&f.path("gan2.sql")));

    let tuned = f.train("tuned.ckpt", &["--fine-tune", "--checkpoint", &ck_arg]);
    assert!(tuned.exists());
    let report = TrainingReport::from_jsonl(&read(&f.path("tuned.ckpt.jsonl"))).unwrap();
    assert!(report.fine_tune && report.epochs.iter().all(|e| e.fine_tune));
}

#[test]
fn baselines_and_empty_generation() {
    let f = Fixture::new(30);
    let buckets = f.preprocess();
    let with_common = |head: &[&str]| -> Vec<String> {
        let mut v: Vec<String> = head.iter().map(|s| s.to_string()).collect();
        v.extend(["--schema", &f.p("schema.txt"), "--buckets", &buckets, "--workload", &f.p("workload.sql")].map(String::from));
        v
    };
    for method in ["random", "template"] {
        let out = String::from_utf8(ok(&with_common(&["baseline", "--method", method, "--n", "12"])).stdout).unwrap();
        assert_eq!(read_workload(&out).len(), 12);
        assert!(out.contains(&format!("-- method={method}")));
    }
    ok(&with_common(&["generate", "--method", "template", "--n", "0", "--out", &f.p("empty.sql")]));
    assert!(read_workload(&read(&f.path("empty.sql"))).is_empty());
    assert!(!qgen(&with_common(&["baseline", "--method", "gan"])).status.success());
}

#[test]
fn evaluate_report_shapes() {
    let f = Fixture::new(40);
    let buckets = f.preprocess();
    let (schema, workload) = (f.p("schema.txt"), f.p("workload.sql"));
    ok(&["baseline", "--method", "random", "--n", "40", "--schema", &schema, "--buckets", &buckets, "--out", &f.p("random.sql")]);
    ok(&["baseline", "--method", "template", "--n", "40", "--schema", &schema, "--buckets", &buckets, "--workload", &workload, "--out", &f.p("template.sql")]);
    let self_cmp = format!("self={workload}");
    let rand_cmp = format!("random={}", f.p("random.sql"));
    let tmpl_cmp = format!("template={}", f.p("template.sql"));
    let out = ok(&[
        "evaluate", "--schema", &schema, "--buckets", &buckets, "--data", &f.p("data"), "--workload", &workload, "--compare", &self_cmp, "--compare",
        &rand_cmp, "--compare", &tmpl_cmp,
    ]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    let me = &rows[0];
    for k in ["sequence_mmd", "cardinality_wd", "cost_wd", "length_wd", "joins_wd"] {
        assert!(me[k].as_f64().unwrap().abs() < 1e-9, "{k}");
    }
    assert_eq!(me["correlation_similarity"].as_f64(), Some(1.0));
    assert_eq!(rows[2]["length_wd"].as_f64(), Some(0.0));
    assert_eq!(report["structural_only"], false);

    let out = ok(&["evaluate", "--schema", &schema, "--workload", &workload, "--compare", &rand_cmp]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["structural_only"], true);
    assert!(report["rows"][0]["cardinality_wd"].is_null());
}

#[test]
fn missing_inputs_fail() {
    let f = Fixture::new(5);
    let out = qgen(&[
        "train", "--grammar", "/nonexistent/grammar.cfg", "--schema", &f.p("schema.txt"), "--workload", &f.p("workload.sql"), "--out", &f.p("m.ckpt"),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("grammar.cfg"));
    assert!(!qgen(&["train", "--workload", &f.p("workload.sql"), "--out", &f.p("m.ckpt")]).status.success());
    assert!(!qgen(&["evaluate", "--schema", &f.p("schema.txt"), "--workload", &f.p("workload.sql")]).status.success());
}
