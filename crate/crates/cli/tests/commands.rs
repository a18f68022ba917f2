use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const DIMS: &str = r#"{"vocab_size":32,"embed_dim":16,"hidden_dim":32,"context":2}"#;
const SPEC: &str = r#"{"seed": 4, "vocab_size": 32, "n_forget_facts": 4, "n_retain_facts": 4, "sequences_per_fact": 6, "probes_per_fact": 3}"#;

fn gradsynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradsynth"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("spec.json"), SPEC).unwrap();
        Fixture { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn gen_data(&self) -> Output {
        gradsynth(&["gen-data", "--spec", s(&self.path("spec.json")), "--out", s(&self.path("data"))])
    }

    fn pretrain(&self, steps: &str, out: &str) -> Output {
        gradsynth(&[
            "pretrain", "--data", s(&self.path("data")), "--dims", DIMS, "--steps", steps,
            "--eta", "0.5", "--seed", "4", "--out", s(&self.path(out)),
        ])
    }

    /// Data plus a pretrained checkpoint at `ckpt/model.json`.
    fn trained() -> Self {
        let f = Fixture::new();
        assert!(f.gen_data().status.success());
        let o = f.pretrain("1500", "ckpt/model.json");
        assert!(o.status.success(), "{}", stderr(&o));
        f
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn unlearn(&self, config: &str, out: &str) -> Output {
        let cfg = self.write(&format!("{out}.json"), config);
        gradsynth(&[
            "unlearn", "--ckpt", s(&self.path("ckpt/model.json")), "--data", s(&self.path("data")),
            "--config", s(&cfg), "--out", s(&self.path(out)),
        ])
    }
}

fn parse_accs(text: &str) -> (f64, f64) {
    let get = |key: &str| -> f64 {
        let start = text.find(key).unwrap_or_else(|| panic!("{key} missing in {text:?}")) + key.len();
        text[start..].split_whitespace().next().unwrap().parse().unwrap()
    };
    (get("forget_acc="), get("retain_acc="))
}

#[test]
fn gen_data_writes_four_deterministic_files() {
    let f = Fixture::new();
    let o = f.gen_data();
    assert!(o.status.success(), "{}", stderr(&o));
    let mut names: Vec<_> = fs::read_dir(f.path("data"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["forget.jsonl", "forget_probes.jsonl", "retain.jsonl", "retain_probes.jsonl"]);
    let before: Vec<_> = names.iter().map(|n| fs::read(f.path("data").join(n)).unwrap()).collect();
    assert!(f.gen_data().status.success());
    let after: Vec<_> = names.iter().map(|n| fs::read(f.path("data").join(n)).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn gen_data_input_errors_exit_with_code_two() {
    let f = Fixture::new();
    let missing = f.path("absent.json");
    let o = gradsynth(&["gen-data", "--spec", s(&missing), "--out", s(&f.path("d"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.json"), "{}", stderr(&o));

    let small = f.write("small.json", r#"{"seed":1,"vocab_size":10,"n_forget_facts":4,"n_retain_facts":4,"sequences_per_fact":2}"#);
    let o = gradsynth(&["gen-data", "--spec", s(&small), "--out", s(&f.path("d"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("too small"), "{}", stderr(&o));

    let o = gradsynth(&["gen-data", "--out", s(&f.path("d"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pretrain_reaches_baseline_and_is_reproducible() {
    let f = Fixture::trained();
    let o = f.pretrain("1500", "again/model.json");
    assert!(o.status.success());
    let (fa, ra) = parse_accs(&stdout(&o));
    assert!(fa >= 0.9 && ra >= 0.9, "{}", stdout(&o));
    assert_eq!(
        fs::read(f.path("ckpt/model.json")).unwrap(),
        fs::read(f.path("again/model.json")).unwrap()
    );
    let manifest = fs::read_to_string(f.path("ckpt/model.manifest.json")).unwrap();
    assert!(manifest.contains("\"command\": \"pretrain\""));
    assert!(f.path("ckpt/model.manifest.timing.json").exists());
}

#[test]
fn pretrain_rejects_bad_input() {
    let f = Fixture::new();
    assert!(f.gen_data().status.success());
    assert_eq!(f.pretrain("0", "m.json").status.code(), Some(2));
    let o = gradsynth(&[
        "pretrain", "--data", s(&f.path("nowhere")), "--dims", DIMS, "--steps", "5", "--eta", "0.5",
        "--out", s(&f.path("m.json")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere"));
}

#[test]
fn unlearn_writes_model_log_and_manifest() {
    let f = Fixture::trained();
    let o = f.unlearn(r#"{"forget_objective":"ga","combiner":"sago","eta":0.05,"steps":30}"#, "run");
    assert!(o.status.success(), "{}", stderr(&o));
    parse_accs(&stdout(&o));
    let log = fs::read_to_string(f.path("run/log.csv")).unwrap();
    assert_eq!(log.lines().count(), 31);
    for name in ["model.json", "manifest.json", "manifest.timing.json"] {
        assert!(f.path("run").join(name).exists(), "{name}");
    }
}

#[test]
fn unknown_names_list_the_valid_values() {
    let f = Fixture::trained();
    let o = f.unlearn(r#"{"forget_objective":"ga","combiner":"frobnicate","eta":0.05,"steps":3}"#, "bad");
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for name in ["naive", "pcgrad-global", "pcgrad-module", "sago"] {
        assert!(err.contains(name), "{err}");
    }
    let o = f.unlearn(r#"{"forget_objective":"dpo","combiner":"naive","eta":0.05,"steps":3}"#, "bad2");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("simnpo"), "{}", stderr(&o));
    let o = f.unlearn(r#"{"forget_objective":"gd","combiner":"naive","eta":0.05,"steps":3}"#, "bad3");
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_forget_weight_keeps_retain_accuracy() {
    let f = Fixture::trained();
    let o = f.pretrain("1500", "again/model.json");
    let (_, pretrain_retain) = parse_accs(&stdout(&o));
    for objective in ["ga", "npo", "simnpo"] {
        let cfg = format!(r#"{{"forget_objective":"{objective}","combiner":"naive","gamma":0.0,"eta":0.05,"steps":100}}"#);
        let o = f.unlearn(&cfg, &format!("g0-{objective}"));
        assert!(o.status.success(), "{}", stderr(&o));
        let (_, retain) = parse_accs(&stdout(&o));
        assert!((retain - pretrain_retain).abs() <= 0.02, "{objective}: {retain} vs {pretrain_retain}");
    }
}

#[test]
fn divergence_is_an_invariant_violation() {
    let f = Fixture::trained();
    let o = f.unlearn(r#"{"forget_objective":"ga","combiner":"naive","alpha":0.0,"eta":1e300,"steps":5}"#, "boom");
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("invariant"), "{}", stderr(&o));
}

#[test]
fn sweep_reports_rows_and_frontier() {
    let f = Fixture::trained();
    let run = |name: &str, grid: &str| {
        let g = f.write(&format!("{name}.json"), grid);
        gradsynth(&[
            "sweep", "--ckpt", s(&f.path("ckpt/model.json")), "--data", s(&f.path("data")),
            "--grid", s(&g), "--out", s(&f.path(name)),
        ])
    };
    let base = r#""base":{"forget_objective":"ga","combiner":"naive","eta":0.05,"steps":20}"#;
    let o = run("one", &format!(r#"{{{base},"grid":{{"gamma":[0.5]}}}}"#));
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(f.path("one/sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
    assert!(table.lines().next().unwrap().ends_with(",pareto"));

    let o = run("three", &format!(r#"{{{base},"grid":{{"combiner":["naive","pcgrad-module","sago"],"gamma":[0.1,0.5,1.0]}}}}"#));
    assert!(o.status.success(), "{}", stderr(&o));
    let first = fs::read(f.path("three/sweep.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&first).lines().count(), 10);
    let pareto = fs::read_to_string(f.path("three/pareto.csv")).unwrap();
    assert!(pareto.lines().skip(1).all(|l| l.ends_with(",true")));
    assert!(run("three", &format!(r#"{{{base},"grid":{{"combiner":["naive","pcgrad-module","sago"],"gamma":[0.1,0.5,1.0]}}}}"#)).status.success());
    assert_eq!(first, fs::read(f.path("three/sweep.csv")).unwrap());

    assert_eq!(run("empty", &format!(r#"{{{base},"grid":{{}}}}"#)).status.code(), Some(2));
    assert_eq!(run("empty2", &format!(r#"{{{base},"grid":{{"gamma":[]}}}}"#)).status.code(), Some(2));
    assert_eq!(run("range", &format!(r#"{{{base},"grid":{{"gamma":[1.5]}}}}"#)).status.code(), Some(2));
}

#[test]
fn report_emits_charts_and_summary() {
    let f = Fixture::trained();
    let mut logs = Vec::new();
    for combiner in ["naive", "pcgrad-module", "sago"] {
        let cfg = format!(r#"{{"forget_objective":"npo","combiner":"{combiner}","eta":0.05,"steps":25}}"#);
        assert!(f.unlearn(&cfg, combiner).status.success());
        let dst = f.path(&format!("{combiner}.csv"));
        fs::copy(f.path(combiner).join("log.csv"), &dst).unwrap();
        logs.push(dst);
    }

    let o = gradsynth(&["report", "--logs", s(&logs[2]), "--out", s(&f.path("rep1"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut names: Vec<_> = fs::read_dir(f.path("rep1"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["sago_cosine.svg", "sago_loss.svg", "summary.csv"]);

    let mut args = vec!["report", "--logs"];
    args.extend(logs.iter().map(|p| s(p)));
    let out = f.path("rep3");
    args.extend(["--out", s(&out)]);
    assert!(gradsynth(&args).status.success());
    let svg = fs::read_to_string(out.join("tradeoff.svg")).unwrap();
    assert_eq!(svg.matches("<circle").count(), 3);
    assert!(svg.contains(r#"data-pareto="true""#));

    // Independent recomputation of the per-run cosine means.
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    for (line, log) in summary.lines().skip(1).zip(&logs) {
        let cols: Vec<&str> = line.split(',').collect();
        let text = fs::read_to_string(log).unwrap();
        let rows: Vec<Vec<f64>> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').take(7).map(|x| x.parse().unwrap()).collect())
            .collect();
        for (col, field) in [(2, 3), (3, 4), (4, 5)] {
            let mean = rows.iter().map(|r| r[field]).sum::<f64>() / rows.len() as f64;
            let reported: f64 = cols[col].parse().unwrap();
            assert!((mean - reported).abs() <= 1e-9, "{mean} vs {reported}");
        }
    }

    let bad = f.write("bad.csv", "step,forget_loss,retain_loss,cos_fr,cos_cf,cos_cr,conflict_fraction,forget_acc,retain_acc\n1,1,1,0,0,0,0,,\n2,1,x,0,0,0,0,,\n");
    let o = gradsynth(&["report", "--logs", s(&bad), "--out", s(&f.path("rep4"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.csv:3"), "{}", stderr(&o));
}
