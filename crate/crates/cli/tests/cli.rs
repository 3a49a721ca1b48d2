use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;

use serde_json::Value;

const CAPTION: &str = "A dog runs on the land.";

fn pioner() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pioner"));
    c.env_remove("PIONER_CONFIG").env_remove("PIONER_LLM_TOKEN");
    c
}

fn run(args: &[&str]) -> Output {
    pioner().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_image(path: &Path, seed: u32) {
    image::RgbImage::from_fn(120, 90, |x, y| image::Rgb([(x * 2 + seed) as u8, (y * 3) as u8, ((x ^ y) + seed) as u8]))
        .save(path)
        .unwrap();
}

/// Small decoder overfit on one caption, plus its one-entry memory bank.
struct Trained {
    _dir: tempfile::TempDir,
    ckpt: PathBuf,
    bank: PathBuf,
    image: PathBuf,
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus.txt");
        std::fs::write(&corpus, format!("{CAPTION}\n")).unwrap();
        let (ckpt, bank, image) = (dir.path().join("dec.ckpt"), dir.path().join("bank.pmem"), dir.path().join("img.png"));
        let o = run(&[
            "train-decoder",
            "--corpus",
            p(&corpus),
            "--out",
            p(&ckpt),
            "--mitigation",
            "memory",
            "--sigma2",
            "0",
            "--lr",
            "0.003",
            "--epochs",
            "200",
            "--weight-decay",
            "0",
            "--max-steps",
            "200",
            "--set",
            "decoder.d_model=32",
            "--set",
            "decoder.heads=2",
            "--set",
            "decoder.layers=2",
            "--set",
            "decoder.max_len=16",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(ckpt.with_extension("log.json").exists());
        let o = run(&["build-memory", "--corpus", p(&corpus), "--out", p(&bank)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        write_image(&image, 3);
        Trained { _dir: dir, ckpt, bank, image }
    })
}

fn caption(region: &str, extra: &[&str]) -> Output {
    let t = trained();
    let mut args = vec!["caption", "--image", p(&t.image), "--region", region, "--ckpt", p(&t.ckpt), "--bank", p(&t.bank)];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn help_exits_zero() {
    assert_eq!(code(&run(&["--help"])), 0);
    for sub in ["train-decoder", "build-memory", "caption", "eval", "serve"] {
        assert_eq!(code(&run(&[sub, "--help"])), 0, "{sub}");
    }
    assert_eq!(code(&run(&["tracebench", "build", "--help"])), 0);
}

#[test]
fn trace_region_with_memory_bank_returns_memorized_caption() {
    let o = caption(r#"{"kind":"trace","points":[[3,4],[60,50],[110,80]]}"#, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).trim(), CAPTION);
}

#[test]
fn full_image_matches_equivalent_box() {
    let image = caption(r#"{"kind":"image"}"#, &["--weights"]);
    let full = caption(r#"{"kind":"box","box":[0,0,120,90]}"#, &["--weights"]);
    assert_eq!(code(&image), 0);
    assert_eq!(stdout(&image), stdout(&full));
}

#[test]
fn caption_usage_errors() {
    assert_eq!(code(&caption("{not json", &[])), 2);
    assert_eq!(code(&caption(r#"{"kind":"trace","points":[[1,1]]}"#, &["--aggregation", "gaussian"])), 2);
    let t = trained();
    assert_eq!(code(&run(&["caption", "--image", p(&t.image), "--region", r#"{"kind":"image"}"#])), 2);
    let o = caption(r#"{"kind":"image"}"#, &["--set", "gap.mode=noise"]);
    assert_eq!(code(&o), 2, "mode mismatch is a configuration error");
}

#[test]
fn train_decoder_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.ckpt");
    assert_eq!(code(&run(&["train-decoder", "--corpus", "/nonexistent/corpus.txt", "--out", p(&out)])), 2);
    let corpus = dir.path().join("c.txt");
    std::fs::write(&corpus, "a cat.\n").unwrap();
    assert_eq!(code(&run(&["train-decoder", "--corpus", p(&corpus), "--out", p(&out), "--epochs", "0"])), 2);
    assert_eq!(code(&run(&["train-decoder", "--corpus", p(&corpus), "--out", p(&out), "--mitigation", "bogus"])), 2);
    assert!(!out.exists());
}

#[test]
fn build_memory_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.txt");
    std::fs::write(&corpus, "a red bus.\na green tree.\na dark sky.\n").unwrap();
    let (a, b) = (dir.path().join("a.pmem"), dir.path().join("b.pmem"));
    let o = run(&["build-memory", "--corpus", p(&corpus), "--out", p(&a)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("N=3"));
    assert_eq!(code(&run(&["build-memory", "--corpus", p(&corpus), "--out", p(&b)])), 0);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(code(&run(&["build-memory", "--corpus", p(&corpus), "--out", p(&a), "--tau", "0"])), 2);
}

#[test]
fn flags_override_config_file_and_env() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.txt");
    std::fs::write(&corpus, "a red bus.\n").unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"gap.tau": 0.5}"#).unwrap();
    let out = dir.path().join("b.pmem");
    let from_file = run(&["build-memory", "--config", p(&cfg), "--corpus", p(&corpus), "--out", p(&out)]);
    assert!(stdout(&from_file).contains("tau=0.5"), "{}", stdout(&from_file));
    let from_flag = run(&["build-memory", "--config", p(&cfg), "--corpus", p(&corpus), "--out", p(&out), "--tau", "0.02"]);
    assert!(stdout(&from_flag).contains("tau=0.02"));
    let from_env =
        pioner().env("PIONER_CONFIG", &cfg).args(["build-memory", "--corpus", p(&corpus), "--out", p(&out)]).output().unwrap();
    assert!(stdout(&from_env).contains("tau=0.5"));

    std::fs::write(&cfg, r#"{"no.such.key": 1}"#).unwrap();
    assert_eq!(code(&run(&["build-memory", "--config", p(&cfg), "--corpus", p(&corpus), "--out", p(&out)])), 2);
}

#[test]
fn eval_with_echo_stub_scores_ten() {
    let dir = tempfile::tempdir().unwrap();
    write_image(&dir.path().join("one.png"), 0);
    let dataset = dir.path().join("dense.jsonl");
    std::fs::write(
        &dataset,
        concat!(
            r#"{"id":"b0","image":"one.png","region":{"kind":"box","box":[0,0,40,40]},"references":["a brown dog sleeping on grass"]}"#,
            "\n",
            r#"{"id":"b1","image":"one.png","region":{"kind":"box","box":[40,10,100,80]},"references":["two red buses parked outside"]}"#,
            "\n",
            r#"{"id":"b2","image":"one.png","region":{"kind":"box","box":[60,0,120,90]},"references":["the small cat sleeps on a sofa"]}"#,
            "\n",
        ),
    )
    .unwrap();
    let report = dir.path().join("report.json");
    let o = run(&["eval", "--task", "dense", "--dataset", p(&dataset), "--echo-stub", "--report", p(&report), "--jobs", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!((r["metrics"]["CIDEr-D"].as_f64().unwrap() - 10.0).abs() < 1e-9);
    assert!((r["metrics"]["mAP"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(report.with_extension("txt").exists());
    assert!(stdout(&o).contains("CIDEr-D"));

    assert_eq!(code(&run(&["eval", "--task", "bogus", "--dataset", p(&dataset), "--echo-stub"])), 2);
    assert_eq!(code(&run(&["eval", "--task", "dense", "--dataset", "/nonexistent.jsonl", "--echo-stub"])), 2);
    assert_eq!(code(&run(&["eval", "--task", "dense", "--dataset", p(&dataset)])), 2, "no checkpoint");
}

#[test]
fn tracebench_build_with_recorded_llm() {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("trace.jsonl");
    let stats = dir.path().join("stats.json");
    let o = run(&[
        "tracebench",
        "build",
        "--narratives",
        p(&fixtures.join("narratives.jsonl")),
        "--llm-fixture",
        p(&fixtures.join("llm_responses.json")),
        "--out",
        p(&out),
        "--stats",
        p(&stats),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(summary["valid"], 4);
    assert_eq!(summary["invalid"], 2);
    let lines: Vec<Value> =
        std::fs::read_to_string(&out).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|l| l["task"] == "trace" && l["region"]["kind"] == "trace"));
    assert!(stats.exists());

    let again = dir.path().join("again.jsonl");
    let o = run(&[
        "tracebench",
        "build",
        "--narratives",
        p(&fixtures.join("narratives.jsonl")),
        "--llm-fixture",
        p(&fixtures.join("llm_responses.json")),
        "--out",
        p(&again),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&again).unwrap());

    let o = run(&["tracebench", "build", "--narratives", p(&fixtures.join("narratives.jsonl")), "--out", p(&out)]);
    assert_eq!(code(&o), 2, "no LLM configured");
}

fn http_get(addr: &str, path: &str) -> (u16, Value) {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut raw = String::new();
    s.read_to_string(&mut raw).unwrap();
    let status = raw.split_whitespace().nth(1).unwrap().parse().unwrap();
    let body = raw.split_once("\r\n\r\n").unwrap().1;
    // tolerate chunked framing by taking the outermost JSON object
    let json = &body[body.find('{').unwrap()..=body.rfind('}').unwrap()];
    (status, serde_json::from_str(json).unwrap())
}

struct Server(std::process::Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn spawn_server(args: &[&str]) -> (Server, String) {
    let mut child = pioner().args(args).stdout(Stdio::piped()).stderr(Stdio::null()).spawn().unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").unwrap_or_else(|| panic!("unexpected: {line:?}")).to_string();
    (Server(child), addr)
}

#[test]
fn serve_reports_health() {
    let t = trained();
    let (_server, addr) = spawn_server(&["serve", "--port", "0", "--ckpt", p(&t.ckpt), "--bank", p(&t.bank)]);
    let (status, health) = http_get(&addr, "/v1/health");
    assert_eq!(status, 200);
    assert_eq!(health["status"], "ok", "{health}");
    let (_, cfg) = http_get(&addr, "/v1/config");
    assert_eq!(cfg["gap.mode"], "memory");

    let (_degraded, addr) = spawn_server(&["serve", "--port", "0"]);
    assert_eq!(http_get(&addr, "/v1/health").1["status"], "degraded");
}

#[test]
fn convert_karpathy_then_load_as_image_task() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("dataset_coco.json");
    std::fs::write(
        &input,
        r#"{"images": [
            {"filepath": "val2014", "filename": "a.png", "split": "test", "cocoid": 5, "sentences": [{"raw": "A cat sits on a red sofa."}]},
            {"filepath": "val2014", "filename": "b.png", "split": "train", "cocoid": 6, "sentences": [{"raw": "A dog."}]}]}"#,
    )
    .unwrap();
    std::fs::create_dir(dir.path().join("val2014")).unwrap();
    write_image(&dir.path().join("val2014/a.png"), 1);
    let out = dir.path().join("test.jsonl");
    let o = run(&["convert", "karpathy", "--input", p(&input), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("wrote 1 image samples"));
    let o = run(&["eval", "--task", "image", "--dataset", p(&out), "--echo-stub"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&run(&["convert", "karpathy", "--input", "/nonexistent.json", "--out", p(&out)])), 2);
}
