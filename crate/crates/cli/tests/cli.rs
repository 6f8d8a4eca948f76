use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_splitguard"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn make_and_inspect_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.eep4");
    let b = dir.path().join("b.eep4");
    assert!(run(&["make-test-bundle", "--out", p(&a)]).status.success());
    assert!(run(&["make-test-bundle", "--out", p(&b)]).status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let out = run(&["inspect-bundle", p(&a)]);
    assert!(out.status.success());
    let s = text(&out.stdout);
    assert!(s.contains("tau_attack=0.9"), "{s}");
    assert!(s.contains("t_attack_q=56"), "{s}");

    let bad = dir.path().join("bad.eep4");
    let mut bytes = std::fs::read(&a).unwrap();
    bytes[0] = b'X';
    std::fs::write(&bad, bytes).unwrap();
    let out = run(&["inspect-bundle", p(&bad)]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("magic"), "{}", text(&out.stderr));
}

#[test]
fn simulate_writes_one_row_per_second() {
    let dir = tempfile::tempdir().unwrap();
    let on = dir.path().join("on.csv");
    let off = dir.path().join("off.csv");
    let actions = dir.path().join("actions.json");
    let o = run(&["simulate", "--mitigation", "on", "--out", p(&on), "--actions", p(&actions)]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(run(&["simulate", "--mitigation", "off", "--out", p(&off)]).status.success());
    let on_s = std::fs::read_to_string(&on).unwrap();
    let off_s = std::fs::read_to_string(&off).unwrap();
    assert_eq!(on_s.lines().count(), 31);
    assert!(on_s.starts_with("second,benign_goodput_bps,"));
    assert_ne!(on_s, off_s);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&actions).unwrap()).unwrap();
    assert!(json.is_object());
}

#[test]
fn simulate_rejects_bad_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.eep4");
    std::fs::write(&junk, b"not a bundle").unwrap();
    let out = run(&["simulate", "--bundle", p(&junk), "--out", p(&dir.path().join("m.csv"))]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).starts_with("error:"));
}

#[test]
fn gen_trace_then_eval_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let pcap = dir.path().join("t.pcap");
    let labels = dir.path().join("t.labels");
    assert!(run(&["gen-trace", "--pcap", p(&pcap), "--labels", p(&labels), "--seed", "4"]).status.success());
    let csv_path = dir.path().join("eval.csv");
    let o = run(&["eval", "--pcap", p(&pcap), "--labels", p(&labels), "--out", p(&csv_path)]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let mut r = csv::Reader::from_path(&csv_path).unwrap();
    let h = r.headers().unwrap().clone();
    let col = |n: &str| h.iter().position(|x| x == n).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 5);
    let mut prev = f64::INFINITY;
    for row in &rows {
        let s: f64 = row[col("switch_exit_ratio")].parse().unwrap();
        let c: f64 = row[col("controller_exit_ratio")].parse().unwrap();
        assert!((s + c - 1.0).abs() < 1e-9);
        assert!(s <= prev);
        prev = s;
    }

    let o = run(&["eval", "--pcap", p(&pcap), "--labels", p(&labels), "--taus", "0.6,0.8"]);
    assert_eq!(text(&o.stdout).lines().count(), 3);
}

#[test]
fn controllerd_and_switchd_loopback() {
    let dir = tempfile::tempdir().unwrap();
    let zero = dir.path().join("zero.eep4");
    assert!(run(&["make-test-bundle", "--zero-controller", "--out", p(&zero)]).status.success());
    let mut ctl = bin()
        .args(["controllerd", "--listen", "127.0.0.1:0", "--bundle", p(&zero)])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(ctl.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap().to_string();

    let o = run(&["switchd", "--controller", &addr]);
    ctl.kill().unwrap();
    let _ = ctl.wait();
    assert!(o.status.success(), "{}", text(&o.stderr));
    let s = text(&o.stdout);
    assert!(s.contains("connected=true"), "{s}");
    assert!(s.contains("reply_timeouts=0"), "{s}");

    let o = run(&["switchd", "--controller", "127.0.0.1:1", "--connect-attempts", "2"]);
    assert!(o.status.success());
    let s = text(&o.stdout);
    assert!(s.contains("connected=false") && s.contains("reports_sent=0"), "{s}");
    assert!(text(&o.stderr).contains("running without a controller"));
}
