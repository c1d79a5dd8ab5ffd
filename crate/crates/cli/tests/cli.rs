use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tabimpute"))
}

fn run(args: &[&str]) -> Output {
    bin().arg("--quiet").args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(o));
}

/// `n` rows: two correlated continuous columns, a color and a binary label.
fn toy_csv(dir: &Path, n: usize) -> PathBuf {
    let mut s = String::from("x,y,color,label\n");
    for i in 0..n {
        let x = ((i * 37) % 101) as f64 / 10.0;
        let color = ["red", "green", "blue"][(i * 7) % 3];
        let label = if x + (i % 3) as f64 > 6.0 { "hi" } else { "lo" };
        s.push_str(&format!("{x},{},{color},{label}\n", 2.0 * x + ((i * 13) % 7) as f64 * 0.1));
    }
    let path = dir.join("toy.csv");
    fs::write(&path, s).unwrap();
    path
}

/// Small network settings so training finishes in seconds.
fn small_config(dir: &Path, data: &Path) -> PathBuf {
    let cfg = format!(
        r#"{{
  "dataset": {{"path": "{}", "label": "label"}},
  "sweep": {{"mechanisms": ["MCAR"], "rates": [0.3]}},
  "methods": ["gm", "fv"],
  "train": {{"epochs": 5, "batch_size": 50, "pac": 5, "noise_dim": 8, "gen_hidden": [16], "disc_hidden": [16], "modes": 3}},
  "eval": {{"classifiers": ["linear-svm"], "downstream": {{"svm_epochs": 5}}}}
}}"#,
        data.display()
    );
    let path = dir.join("config.json");
    fs::write(&path, cfg).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_dataset_is_a_usage_error_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    for cmd in ["train", "mask", "impute", "benchmark"] {
        let o = run(&[cmd, "--data", "/nonexistent/x.csv", "--out", s(&out)]);
        assert_eq!(o.status.code(), Some(2), "{cmd}: {}", stderr(&o));
        assert!(!out.exists(), "{cmd} left partial outputs");
    }
}

#[test]
fn bad_flags_exit_with_usage_code() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["mask", "--rate", "abc"]).status.code(), Some(2));
    assert_eq!(run(&["impute", "--method", "knn"]).status.code(), Some(2));
}

#[test]
fn train_writes_checkpoint_and_log_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_csv(dir.path(), 100);
    let cfg = small_config(dir.path(), &data);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&run(&["train", "--config", s(&cfg), "--seed", "3", "--out", s(&a)]));
    ok(&run(&["train", "--config", s(&cfg), "--seed", "3", "--out", s(&b)]));
    let log = fs::read_to_string(a.join("model/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 5);
    for f in ["model.json", "generator.json", "transformer.json", "train_log.jsonl", "run.json"] {
        let x = fs::read(a.join("model").join(f)).unwrap();
        let y = fs::read(b.join("model").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between identical runs");
    }
    let prov = fs::read_to_string(a.join("model/run.json")).unwrap();
    assert!(prov.contains("\"seed\": 3") && prov.contains("config_hash") && prov.contains("version"));
}

#[test]
fn mask_rate_matches_binomial_expectation_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = (0..10).map(|j| format!("c{j}")).collect::<Vec<_>>().join(",");
    text.push('\n');
    for i in 0..1000 {
        let row: Vec<String> = (0..10).map(|j| format!("{}", (i * (j + 3)) % 97)).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    let data = dir.path().join("wide.csv");
    fs::write(&data, text).unwrap();

    let count = |rate: &str, out: &Path| -> usize {
        ok(&run(&["mask", "--data", s(&data), "--mechanism", "mcar", "--rate", rate, "--seed", "1", "--out", s(out)]));
        fs::read_to_string(out.join("mask.csv")).unwrap().lines().skip(1).flat_map(|l| l.split(',').map(str::to_string).collect::<Vec<_>>()).filter(|c| c == "0").count()
    };
    let lo = count("0.1", &dir.path().join("m1"));
    let mid = count("0.3", &dir.path().join("m3"));
    let hi = count("0.5", &dir.path().join("m5"));
    // binomial sd at 10,000 cells is about 46, so +-200 is over four sd
    assert!((2800..=3200).contains(&mid), "masked {mid}");
    assert!(lo < mid && mid < hi);

    let m3 = dir.path().join("m3");
    let truth = tabimpute::data::ingest_csv(&m3.join("truth.csv"), &Default::default()).unwrap();
    let mask = tabimpute::data::MaskMatrix::from_csv(&fs::read_to_string(m3.join("mask.csv")).unwrap()).unwrap();
    let again = tabimpute::missingness::apply_mask(&truth, &mask).unwrap();
    assert_eq!(tabimpute::data::to_csv_string(&again.incomplete), fs::read_to_string(m3.join("masked.csv")).unwrap());
    assert!(m3.join("run.json").exists());
}

#[test]
fn gm_fills_means_and_complete_input_is_untouched() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("in.csv"), "x,c\n1,a\n?,a\n5,?\n3,b\n").unwrap();
    let out = dir.path().join("out");
    ok(&run(&["impute", "--data", s(&dir.path().join("in.csv")), "--method", "gm", "--method", "fv", "--out", s(&out)]));
    let gm = fs::read_to_string(out.join("gm/imputed.csv")).unwrap();
    assert_eq!(gm, "x,c\n1,a\n3,a\n5,a\n3,b\n");
    let prov = fs::read_to_string(out.join("gm/provenance.csv")).unwrap();
    assert_eq!(prov, "x,c\nO,O\nI,O\nO,I\nO,O\n");

    let data = toy_csv(dir.path(), 40);
    let out2 = dir.path().join("out2");
    ok(&run(&["impute", "--data", s(&data), "--method", "gm", "--method", "fv", "--out", s(&out2)]));
    let original = fs::read_to_string(&data).unwrap();
    for m in ["gm", "fv"] {
        assert_eq!(fs::read_to_string(out2.join(m).join("imputed.csv")).unwrap(), original, "{m}");
    }
}

#[test]
fn impugan_seeds_change_values_not_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_csv(dir.path(), 100);
    let cfg = small_config(dir.path(), &data);
    let work = dir.path().join("work");
    ok(&run(&["train", "--config", s(&cfg), "--out", s(&work)]));
    ok(&run(&["mask", "--config", s(&cfg), "--rate", "0.3", "--out", s(&work.join("mask"))]));
    let masked = work.join("mask/masked.csv");
    let model = work.join("model");
    let imp = |seed: &str, out: &Path| {
        ok(&run(&["impute", "--config", s(&cfg), "--data", s(&masked), "--method", "impugan", "--model", s(&model), "--seed", seed, "--out", s(out)]));
    };
    let (a, b) = (dir.path().join("ia"), dir.path().join("ib"));
    imp("1", &a);
    imp("2", &b);
    let read = |p: &Path, f: &str| fs::read_to_string(p.join("impugan").join(f)).unwrap();
    assert_eq!(read(&a, "provenance.csv"), read(&b, "provenance.csv"));
    assert_ne!(read(&a, "imputed.csv"), read(&b, "imputed.csv"));

    // observed cells survive imputation unchanged
    let masked_text = fs::read_to_string(&masked).unwrap();
    for (orig, filled) in masked_text.lines().zip(read(&a, "imputed.csv").lines()) {
        for (o, f) in orig.split(',').zip(filled.split(',')) {
            if !o.is_empty() && o != "?" {
                assert_eq!(o, f);
            }
        }
    }

    let complete = dir.path().join("ic");
    ok(&run(&["impute", "--config", s(&cfg), "--data", s(&data), "--method", "impugan", "--model", s(&model), "--out", s(&complete)]));
    assert_eq!(read(&complete, "imputed.csv"), fs::read_to_string(&data).unwrap());
}

#[test]
fn conditional_samples_honor_every_condition() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_csv(dir.path(), 100);
    let cfg = small_config(dir.path(), &data);
    let work = dir.path().join("work");
    ok(&run(&["train", "--config", s(&cfg), "--out", s(&work)]));
    ok(&run(&["impute", "--config", s(&cfg), "--samples", "200", "--cond", "color=blue", "--cond", "label=hi", "--out", s(&work)]));
    let text = fs::read_to_string(work.join("samples.csv")).unwrap();
    assert_eq!(text.lines().count(), 201);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",blue,hi")));

    let bad = run(&["impute", "--config", s(&cfg), "--samples", "5", "--cond", "color=purple", "--out", s(&work)]);
    assert_eq!(bad.status.code(), Some(2));
    let cont = run(&["impute", "--config", s(&cfg), "--samples", "5", "--cond", "x=1", "--out", s(&work)]);
    assert_eq!(cont.status.code(), Some(2));
    let no_samples = run(&["impute", "--config", s(&cfg), "--cond", "color=blue", "--out", s(&work)]);
    assert_eq!(no_samples.status.code(), Some(2));
}

#[test]
fn evaluate_writes_every_metric_column() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_csv(dir.path(), 120);
    let cfg = small_config(dir.path(), &data);
    let work = dir.path().join("work");
    ok(&run(&["mask", "--config", s(&cfg), "--out", s(&work)]));
    ok(&run(&["impute", "--config", s(&cfg), "--data", s(&work.join("masked.csv")), "--method", "fv", "--out", s(&work)]));
    let out = dir.path().join("eval");
    ok(&run(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--truth",
        s(&work.join("truth.csv")),
        "--imputed",
        s(&work.join("fv/imputed.csv")),
        "--mask",
        s(&work.join("mask.csv")),
        "--test",
        s(&data),
        "--out",
        s(&out),
    ]));
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), row.len());
    let col = |name: &str| row[header.iter().position(|h| *h == name).unwrap()];
    assert_eq!(col("method"), "fv");
    assert_eq!(col("mechanism"), "MCAR");
    assert_eq!(col("pearson_dev"), "null");
    assert_ne!(col("acc_linear_svm"), "null");
}

#[test]
fn benchmark_reports_are_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_csv(dir.path(), 160);
    let cfg = small_config(dir.path(), &data);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&run(&["benchmark", "--config", s(&cfg), "--out", s(&a)]));
    ok(&run(&["benchmark", "--config", s(&cfg), "--out", s(&b), "--workers", "2"]));
    let csv = fs::read_to_string(a.join("report.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(b.join("report.csv")).unwrap());
    assert_eq!(csv.lines().count(), 3);
    let fv = csv.lines().find(|l| l.contains(",fv,")).unwrap();
    assert!(fv.contains("null"), "{fv}");

    let again = bin().args(["benchmark", "--config", s(&cfg), "--out", s(&a)]).output().unwrap();
    ok(&again);
    assert!(String::from_utf8_lossy(&again.stdout).contains("0 computed, 2 reused"));
    let forced = bin().args(["benchmark", "--config", s(&cfg), "--out", s(&a), "--force"]).output().unwrap();
    assert!(String::from_utf8_lossy(&forced.stdout).contains("2 computed, 0 reused"));
    assert_eq!(fs::read_to_string(a.join("report.csv")).unwrap(), csv);
    let json = fs::read_to_string(a.join("report.json")).unwrap();
    assert!(json.contains("\"gm\"") && json.contains("\"fv\""));
}
