use std::path::Path;
use std::process::{Command, Output};

fn gpam(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpam"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

const SMALL: &[&str] = &["--ways", "3", "--shots", "2", "--q-known", "3"];

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run(args: Vec<String>, dir: &Path) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    gpam(&refs, dir)
}

fn synthetic(dir: &Path) {
    ok(&gpam(
        &[
            "gen-synthetic",
            "--out",
            "syn.tsv",
            "--relations",
            "10",
            "--dim",
            "6",
            "--instances",
            "12",
            "--validation-relations",
            "5",
            "--seed",
            "4",
        ],
        dir,
    ));
}

#[test]
fn synthetic_train_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synthetic(dir);
    assert!(dir.join("syn.tsv.manifest.json").exists());

    ok(&run(
        with(
            &[
                "train",
                "--data",
                "syn.tsv",
                "--out",
                "ck.json",
                "--trace",
                "trace.csv",
                "--episodes",
                "12",
            ],
            SMALL,
        ),
        dir,
    ));
    let trace = std::fs::read_to_string(dir.join("trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("episode,loss,R_mean,M_mean"));
    assert_eq!(lines.count(), 12);

    let out = run(
        with(
            &[
                "eval",
                "--data",
                "syn.tsv",
                "--checkpoint",
                "ck.json",
                "--eval-episodes",
                "10",
            ],
            SMALL,
        ),
        dir,
    );
    ok(&out);
    let text = stdout(&out);
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "10");
    for v in &row[1..4] {
        let x: f64 = v.parse().unwrap();
        assert!((0.0..=1.0).contains(&x));
    }
}

#[test]
fn eval_is_reproducible_and_json_lines_parse() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synthetic(dir);
    ok(&run(
        with(
            &[
                "train",
                "--data",
                "syn.tsv",
                "--out",
                "ck.json",
                "--episodes",
                "5",
            ],
            SMALL,
        ),
        dir,
    ));
    let args = with(
        &[
            "eval",
            "--data",
            "syn.tsv",
            "--checkpoint",
            "ck.json",
            "--eval-episodes",
            "8",
            "--format",
            "json-lines",
        ],
        SMALL,
    );
    let a = run(args.clone(), dir);
    let b = run(args, dir);
    ok(&a);
    assert_eq!(a.stdout, b.stdout);
    let v: serde_json::Value = serde_json::from_str(stdout(&a).trim()).unwrap();
    assert_eq!(v["episodes"], 8);
}

#[test]
fn sweep_writes_sorted_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synthetic(dir);
    ok(&run(
        with(
            &[
                "train",
                "--data",
                "syn.tsv",
                "--out",
                "ck.json",
                "--episodes",
                "3",
            ],
            SMALL,
        ),
        dir,
    ));
    ok(&run(
        with(
            &[
                "sweep",
                "--data",
                "syn.tsv",
                "--checkpoint",
                "ck.json",
                "--eval-episodes",
                "4",
                "--rates",
                "0.5,0,0.15",
                "--out",
                "sweep.csv",
            ],
            SMALL,
        ),
        dir,
    ));
    let csv = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
    let rates: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(csv.lines().next(), Some("nota_rate,total,known,nota"));
    assert_eq!(rates, ["0", "0.15", "0.5"]);
    let zero_nota = csv.lines().nth(1).unwrap().split(',').nth(3).unwrap();
    assert_eq!(zero_nota, "NA");
}

#[test]
fn ablate_emits_full_row_first() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synthetic(dir);
    let out = run(
        with(
            &[
                "ablate",
                "--data",
                "syn.tsv",
                "--variants",
                "no-margin,fixed-margin=0.5",
                "--seeds",
                "2",
                "--episodes",
                "3",
                "--eval-episodes",
                "3",
            ],
            SMALL,
        ),
        dir,
    );
    ok(&out);
    let text = stdout(&out);
    let names: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(names, ["full", "no-margin", "fixed-margin=0.5"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("variant"));
}

#[test]
fn grad_check_reports_every_block() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gpam(
        &["grad-check", "--trials", "1", "--probes", "3"],
        tmp.path(),
    );
    ok(&out);
    let text = stdout(&out);
    let blocks: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(blocks, ["theta", "phi1", "phi2", "prompts", "tau1", "tau2"]);
    for line in text.lines().skip(1) {
        let err: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(err < 1e-4, "{line}");
    }
}

#[test]
fn embed_text_writes_loadable_file() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("in.tsv"),
        "s1\tborn_in\t0:1\t3:4\tAda was born in London\ns2\tworks_for\t0:2\t4:5\tGrace Hopper worked for Navy\n",
    )
    .unwrap();
    ok(&gpam(
        &[
            "embed-text",
            "--input",
            "in.tsv",
            "--out",
            "emb.tsv",
            "--dim",
            "16",
        ],
        dir,
    ));
    let text = std::fs::read_to_string(dir.join("emb.tsv")).unwrap();
    assert!(text.starts_with("GPROTO-EMB v1 dim=16 views=4"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn embed_text_rejects_bad_span() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("in.tsv"), "s1\tr\t0-1\t2:3\ta b c\n").unwrap();
    let out = gpam(
        &["embed-text", "--input", "in.tsv", "--out", "emb.tsv"],
        dir,
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn exit_codes_follow_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synthetic(dir);
    let bad_config = gpam(
        &[
            "train",
            "--data",
            "syn.tsv",
            "--out",
            "x.json",
            "--nota-rate",
            "1.5",
        ],
        dir,
    );
    assert_eq!(bad_config.status.code(), Some(2));
    let missing = gpam(
        &["eval", "--data", "nope.tsv", "--checkpoint", "x.json"],
        dir,
    );
    assert_eq!(missing.status.code(), Some(1));
    assert!(!dir.join("x.json").exists());
}

#[test]
fn zero_learning_rate_keeps_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synthetic(dir);
    ok(&run(
        with(
            &[
                "train",
                "--data",
                "syn.tsv",
                "--out",
                "a.json",
                "--episodes",
                "0",
            ],
            SMALL,
        ),
        dir,
    ));
    ok(&run(
        with(
            &[
                "train",
                "--data",
                "syn.tsv",
                "--init",
                "a.json",
                "--out",
                "b.json",
                "--episodes",
                "4",
                "--lr",
                "0",
            ],
            SMALL,
        ),
        dir,
    ));
    let a = std::fs::read_to_string(dir.join("a.json")).unwrap();
    let b = std::fs::read_to_string(dir.join("b.json")).unwrap();
    assert_eq!(a, b);
}
