use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use taskroute_cli::server::{ErrorBody, Health, RouteResponse};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/three_task")
}

fn taskroute(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taskroute")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn metric(csv: &str, name: &str) -> f64 {
    csv.lines()
        .find_map(|l| l.strip_prefix(&format!("{name},")))
        .unwrap_or_else(|| panic!("{name} missing"))
        .parse()
        .unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(taskroute(&["discover", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(taskroute(&["route", "--tolerance", "0.1"]).status.code(), Some(1));
    assert_eq!(taskroute(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_artifact_is_a_data_error_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture();
    let out = taskroute(&[
        "route",
        "--artifacts",
        s(dir.path()),
        "--pool",
        s(&fx.join("pool.jsonl")),
        "--input",
        s(&fx.join("eval.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("config.tkra"), "stderr: {err}");
}

#[test]
fn synth_reproduces_the_committed_fixture() {
    let dir = tempfile::tempdir().unwrap();
    ok(&taskroute(&["synth", "--seed", "0", "--out", s(dir.path())]));
    for f in ["pool.jsonl", "train.jsonl", "eval.jsonl", "train_truth.json", "eval_truth.json"] {
        let a = std::fs::read(dir.path().join(f)).unwrap();
        let b = std::fs::read(fixture().join(f)).unwrap();
        assert!(a == b, "{f} differs from the fixture");
    }
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn start_server(artifacts: &Path, pool: &Path) -> (Server, String) {
    let mut child = Command::new(env!("CARGO_BIN_EXE_taskroute"))
        .args(["serve", "--bind", "127.0.0.1:0", "--artifacts", s(artifacts), "--pool", s(pool)])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let addr = loop {
        let line = lines.next().expect("server exited before listening").unwrap();
        if let Some(a) = line.strip_prefix("listening on ") {
            break a.trim().to_string();
        }
    };
    std::thread::spawn(move || for _ in lines {});
    (Server(child), format!("http://{addr}"))
}

#[test]
fn full_pipeline_through_the_cli_and_http() {
    let dir = tempfile::tempdir().unwrap();
    let art = dir.path().join("artifacts");
    let fx = fixture();
    let pool = fx.join("pool.jsonl");
    let train = fx.join("train.jsonl");
    let eval = fx.join("eval.jsonl");
    let common = ["--artifacts", s(&art), "--pool", s(&pool)];
    let with = |extra: &[&str]| {
        let mut v: Vec<&str> = extra.to_vec();
        v.extend_from_slice(&common);
        v.into_iter().map(str::to_string).collect::<Vec<_>>()
    };
    let run = |args: Vec<String>| taskroute(&args.iter().map(String::as_str).collect::<Vec<_>>());

    let out = run(with(&["discover", "--data", s(&train)]));
    ok(&out);
    let report = std::fs::read_to_string(art.join("cluster_report.txt")).unwrap();
    assert_eq!(report, String::from_utf8_lossy(&out.stdout));
    let clusters = report.lines().filter(|l| l.starts_with("task ")).count();
    assert_eq!(clusters, 3, "report:\n{report}");
    assert!(report.contains("candidates"), "report:\n{report}");

    ok(&run(with(&["train-classifier", "--data", s(&train)])));
    ok(&run(with(&["train-router", "--data", s(&train)])));
    for f in ["config.tkra", "discovery.tkra", "classifier.tkra", "router.tkra"] {
        assert!(art.join(f).exists(), "{f} missing");
    }

    let results = dir.path().join("results");
    let truth = fx.join("eval_truth.json");
    ok(&run(with(&[
        "eval",
        "--data",
        s(&eval),
        "--truth",
        s(&truth),
        "--train",
        s(&train),
        "--out",
        s(&results),
    ])));
    let metrics = std::fs::read_to_string(results.join("metrics.csv")).unwrap();
    assert!(metric(&metrics, "oracle_ratio") >= 0.95, "metrics:\n{metrics}");
    let curve = std::fs::read_to_string(results.join("cost_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 22);
    let cmp = std::fs::read_to_string(results.join("comparison.csv")).unwrap();
    for row in ["two-stage,", "stage1-only,", "stage2-only,", "single:", "knn,", "mlp,"] {
        assert!(cmp.lines().any(|l| l.starts_with(row)), "{row} missing:\n{cmp}");
    }

    let decisions = dir.path().join("decisions.jsonl");
    ok(&run(with(&["route", "--input", s(&eval), "--out", s(&decisions)])));
    let first: RouteResponse = {
        let line = std::fs::read_to_string(&decisions).unwrap();
        let v: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        assert_eq!(v["prompt_id"], "eval-t0-0");
        serde_json::from_value(v).unwrap()
    };

    let (_server, base) = start_server(&art, &pool);
    let embedding: Vec<f64> = {
        let line = std::fs::read_to_string(&eval).unwrap();
        let v: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        serde_json::from_value(v["prompt_embedding"].clone()).unwrap()
    };
    let rt = tokio::runtime::Runtime::new().unwrap();
    rt.block_on(async {
        let http = reqwest::Client::new();
        let health: Health = http.get(format!("{base}/healthz")).send().await.unwrap().json().await.unwrap();
        assert_eq!(health.pool_size, 10);
        assert_eq!(health.cluster_count, 3);
        assert_eq!(health.checksums.len(), 4);

        let resp = http
            .post(format!("{base}/route"))
            .json(&serde_json::json!({ "embedding": embedding }))
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status(), 200);
        let routed: RouteResponse = resp.json().await.unwrap();
        assert_eq!(routed, first);

        let resp = http
            .post(format!("{base}/route"))
            .json(&serde_json::json!({ "embedding": [1.0, 2.0] }))
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status(), 422);
        assert_eq!(resp.json::<ErrorBody>().await.unwrap().error, "dimension_mismatch");

        let resp = http.post(format!("{base}/route")).body("{not json").send().await.unwrap();
        assert_eq!(resp.status(), 400);
        assert_eq!(resp.json::<ErrorBody>().await.unwrap().error, "malformed_body");

        let resp = http
            .post(format!("{base}/route"))
            .json(&serde_json::json!({ "embedding": embedding, "tolerance": 2.0 }))
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status(), 400);

        let resp = http.post(format!("{base}/reload")).send().await.unwrap();
        assert_eq!(resp.status(), 200);
        let reloaded: Health = resp.json().await.unwrap();
        assert_eq!(reloaded.checksums, health.checksums);

        std::fs::remove_file(art.join("router.tkra")).unwrap();
        let resp = http.post(format!("{base}/reload")).send().await.unwrap();
        assert_eq!(resp.status(), 500);
        let after: Health = http.get(format!("{base}/healthz")).send().await.unwrap().json().await.unwrap();
        assert_eq!(after.checksums, health.checksums);
    });
}
