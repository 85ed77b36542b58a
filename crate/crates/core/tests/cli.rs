use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(name)
}

fn himec(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_himec"))
        .args(args)
        .env("HIMEC_OUT_DIR", out)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn read_rows(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap()).collect()
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let i = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|x| x.unwrap()[i].to_string()).collect()
}

#[test]
fn reference_scenarios_validate() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["case1.toml", "case2.toml"] {
        let o = himec(&["validate", scenario(name).to_str().unwrap()], dir.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn bad_scenarios_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(scenario("case1.toml")).unwrap();

    let wrong_schema = dir.path().join("schema.toml");
    fs::write(
        &wrong_schema,
        text.replace("himec-scenario/1", "himec-scenario/9"),
    )
    .unwrap();
    let o = himec(&["validate", wrong_schema.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 3);

    let no_link = dir.path().join("link.toml");
    fs::write(
        &no_link,
        text.replace("  { ap = \"ap5\", last_mile_bps = 1000000000 },\n", ""),
    )
    .unwrap();
    let o = himec(&["validate", no_link.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 3);
    assert!(!o.stderr.is_empty());

    let o = himec(
        &["validate", dir.path().join("absent.toml").to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(code(&o), 5);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = himec(&["simulate"], dir.path());
    assert_eq!(code(&o), 2);
    let o = himec(
        &[
            "simulate",
            scenario("case1.toml").to_str().unwrap(),
            "--mix",
            "1:2",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn simulate_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let s = scenario("case1.toml");
    let args = [
        "simulate",
        s.to_str().unwrap(),
        "--seed",
        "11",
        "--frames",
        "2",
    ];
    assert_eq!(code(&himec(&args, a.path())), 0);
    assert_eq!(code(&himec(&args, b.path())), 0);
    for f in [
        "frames.csv",
        "prices.csv",
        "slots.csv",
        "links.csv",
        "allocations.csv",
        "summary.json",
    ] {
        let x = fs::read(a.path().join(f)).unwrap();
        let y = fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
    assert_eq!(read_rows(&a.path().join("frames.csv")).len(), 2);
    // 60 slots per 300 s frame at 5 s.
    assert_eq!(read_rows(&a.path().join("slots.csv")).len(), 120);

    let c = tempfile::tempdir().unwrap();
    let other = [
        "simulate",
        s.to_str().unwrap(),
        "--seed",
        "12",
        "--frames",
        "2",
    ];
    assert_eq!(code(&himec(&other, c.path())), 0);
    assert_ne!(
        fs::read(a.path().join("frames.csv")).unwrap(),
        fs::read(c.path().join("frames.csv")).unwrap()
    );
}

#[test]
fn summary_reports_profit_and_served_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario("case2.toml");
    let o = himec(
        &["simulate", s.to_str().unwrap(), "--seed", "4"],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let v: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    let frames = &v["frames"];
    assert!(frames["profit"].is_string() || frames["profit"].is_number());
    let ratio = frames["served_ratio"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&ratio));
    assert_eq!(v["manifest"]["seed"], 4);
}

#[test]
fn compare_with_empty_ladder_writes_headers_only() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario("case1.toml");
    let o = himec(&["compare", s.to_str().unwrap(), "--ladder"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("scenario,bids,seed,heuristic_profit"));
}

#[test]
fn compare_ratio_is_at_most_one() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario("case1.toml");
    let o = himec(
        &[
            "compare",
            s.to_str().unwrap(),
            "--ladder",
            "6,10",
            "--seeds",
            "1,2",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let path = dir.path().join("comparison.csv");
    assert_eq!(read_rows(&path).len(), 4);
    for r in column(&path, "profit_ratio") {
        if !r.is_empty() {
            let r: f64 = r.parse().unwrap();
            assert!(r > 0.0 && r <= 1.0 + 1e-12, "{r}");
        }
    }
    assert!(column(&path, "exact_optimal").iter().all(|x| x == "true"));
}

#[test]
fn auction_then_bandwidth_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario("case1.toml");
    let o = himec(&["auction", s.to_str().unwrap(), "--seed", "2"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let bids = dir.path().join("bids.csv");
    let sol = dir.path().join("solution.csv");
    assert_eq!(read_rows(&bids).len(), 50);

    // Replaying the saved bids reproduces the saved solution.
    let again = tempfile::tempdir().unwrap();
    let o = himec(
        &[
            "auction",
            s.to_str().unwrap(),
            "--bids-file",
            bids.to_str().unwrap(),
        ],
        again.path(),
    );
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read(&sol).unwrap(),
        fs::read(again.path().join("solution.csv")).unwrap()
    );

    let bw = tempfile::tempdir().unwrap();
    let o = himec(
        &[
            "bandwidth",
            s.to_str().unwrap(),
            "--bids-file",
            bids.to_str().unwrap(),
            "--solution-file",
            sol.to_str().unwrap(),
        ],
        bw.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(bw.path().join("slots.csv").exists());
    assert!(!bw.path().join("frames.csv").exists());
    assert!(column(&bw.path().join("slots.csv"), "converged")
        .iter()
        .all(|x| x == "true"));
    let v: serde_json::Value =
        serde_json::from_slice(&fs::read(bw.path().join("summary.json")).unwrap()).unwrap();
    assert!(v.get("frames").is_none());
    assert_eq!(v["slots"]["slots"], 60);
}

#[test]
fn tampered_solution_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario("case1.toml");
    assert_eq!(
        code(&himec(
            &["auction", s.to_str().unwrap(), "--seed", "2"],
            dir.path()
        )),
        0
    );
    let bids = dir.path().join("bids.csv");
    let sol = dir.path().join("solution.csv");
    let text = fs::read_to_string(&sol).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.truncate(1);
    lines.push("99999,ap1,m3.large,1,field-1,pm,0,1");
    fs::write(&sol, lines.join("\n") + "\n").unwrap();
    let o = himec(
        &[
            "bandwidth",
            s.to_str().unwrap(),
            "--bids-file",
            bids.to_str().unwrap(),
            "--solution-file",
            sol.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 3);
}

#[test]
fn strict_budget_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario("case1.toml");
    let o = himec(
        &[
            "auction",
            s.to_str().unwrap(),
            "--solver",
            "exact",
            "--bids",
            "40",
            "--node-budget",
            "10",
            "--strict",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    // Results are still written before the failure is reported.
    assert!(dir.path().join("frames.csv").exists());
}
