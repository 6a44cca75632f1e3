use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_anchored-lvm"))
}

fn run(args: &[&str], extra: &[&Path]) -> Output {
    let mut c = bin();
    c.args(args);
    for p in extra {
        c.arg(p);
    }
    c.output().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: &[&str] = &["--h", "4", "--chains", "2", "--warmup", "150", "--iters", "40"];

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(run(&["--help"], &[]).status.code(), Some(0));
    assert_eq!(run(&["--version"], &[]).status.code(), Some(0));
    assert_eq!(run(&["sample", "--help"], &[]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["frobnicate"], &[]).status.code(), Some(1));
    let out = run(&["sample", "--out-dir"], &[tmp.path()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data"));
    let out = run(&["simulate", "--preset", "nonexistent", "--out"], &[tmp.path()]);
    assert_eq!(out.status.code(), Some(1));
    let missing = tmp.path().join("missing.csv");
    let out = run(&["anchors", "--n-ref", "5", "--data"], &[&missing, Path::new("--out"), tmp.path()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn malformed_data_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("bad.csv");
    fs::write(&data, "a,b,c\n1,2,3\n4,x,6\n7,8,9\n").unwrap();
    let out = run(&["sample", "--data"], &[&data, Path::new("--out-dir"), &tmp.path().join("s")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 3"));
}

#[test]
fn stages_compose_by_hand() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let sim = root.join("sim");
    let st = run(&["simulate", "--n", "30", "--seed", "3", "--out"], &[&sim]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let data = sim.join("data.csv");
    let header = fs::read_to_string(&data).unwrap();
    assert_eq!(header.lines().count(), 31);

    let anc = root.join("anc");
    let args = ["anchors", "--n-ref", "6", "--epochs", "100", "--no-standardize", "--h", "4", "--data"];
    let st = run(&args, &[&data, Path::new("--out"), &anc]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let set = json(&anc.join("anchors.json"));
    assert_eq!(set["indices"].as_array().unwrap().len(), 6);

    let smp = root.join("smp");
    let mut args = vec!["sample", "--no-standardize"];
    args.extend_from_slice(SMALL);
    args.extend(["--data"]);
    let st = run(
        &args,
        &[&data, Path::new("--anchors"), &anc.join("anchors.json"), Path::new("--out-dir"), &smp],
    );
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    for f in ["chain0.csv", "chain1.csv", "chain0_stats.json", "anchors.json", "run.json"] {
        assert!(smp.join(f).is_file(), "missing {f}");
    }
    let trace = fs::read_to_string(smp.join("chain1.csv")).unwrap();
    assert_eq!(trace.lines().count(), 41);

    let ana = root.join("ana");
    let st = run(
        &["analyze", "--pairs", "4", "--clusters", "3", "--traces"],
        &[&smp, Path::new("--truth"), &sim.join("truth.csv"), Path::new("--out-dir"), &ana],
    );
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let rhat = json(&ana.join("rhat.json"));
    let pairs = rhat["pairs"].as_array().unwrap();
    assert_eq!(pairs.len(), 4);
    let anchored: Vec<u64> = set["indices"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    for p in pairs {
        assert!(!anchored.contains(&p["i"].as_u64().unwrap()));
        assert!(!anchored.contains(&p["j"].as_u64().unwrap()));
    }
    let err = fs::read_to_string(ana.join("distance_error.csv")).unwrap();
    assert_eq!(err.lines().next(), Some("chain0,chain1"));
    assert_eq!(err.lines().count(), 41);
    let dahl = json(&ana.join("dahl.json"));
    assert_eq!(dahl["labels"].as_array().unwrap().len(), 30);
    let co = fs::read_to_string(ana.join("cocluster.csv")).unwrap();
    assert_eq!(co.lines().count(), 31);
}

#[test]
fn config_file_and_flags_are_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"n": 25, "noise_sd": 0.2, "seed": 4}"#).unwrap();
    let out = tmp.path().join("sim");
    let st = run(&["simulate", "--seed", "9", "--config"], &[&cfg, Path::new("--out"), &out]);
    assert!(st.status.success());
    let rec = json(&out.join("run.json"));
    assert_eq!(rec["config"]["n"], 25);
    assert_eq!(rec["config"]["noise_sd"], 0.2);
    assert_eq!(rec["config"]["seed"], 9);
    assert_eq!(fs::read_to_string(out.join("data.csv")).unwrap().lines().count(), 26);
}

#[test]
fn labelled_data_defaults_cluster_count_to_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d.csv");
    let mut text = String::from("id,x1,x2,x3,class\n");
    for i in 0..24 {
        let c = i % 3;
        let off = 4.0 * c as f64;
        text += &format!("s{i},{},{},{},k{c}\n", off + 0.1 * i as f64, off - 0.05 * i as f64, (i as f64).sin());
    }
    fs::write(&data, text).unwrap();
    let out = tmp.path().join("p");
    let mut args = vec!["pipeline", "--no-anchors", "--q", "1", "--label-column", "class", "--drop-column", "id"];
    args.extend_from_slice(SMALL);
    args.push("--data");
    let st = run(&args, &[&data, Path::new("--out-dir"), &out]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let dahl = json(&out.join("analysis/dahl.json"));
    assert_eq!(dahl["clusters"], 3);
    // rows ordered by true class
    let order = fs::read_to_string(out.join("analysis/order.csv")).unwrap();
    let groups: Vec<String> = order.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().to_string()).collect();
    assert!(groups.windows(2).all(|w| w[0] <= w[1]));
    assert!(!out.join("anchors").exists());
    assert!(!out.join("analysis/distance_error.csv").exists());
}
