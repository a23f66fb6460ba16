use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn airmine(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_airmine"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = airmine(args);
    assert!(
        out.status.success(),
        "airmine {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn city(dir: &Path, seed: u32) {
    let conf = dir.join("synth.conf");
    fs::write(
        &conf,
        format!("seed={seed}\nn_users=160\nspan_days=42\nconn_records_per_user=25\n"),
    )
    .unwrap();
    ok(&["synth", "--config", p(&conf), "--out", p(&dir.join("city"))]);
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_file() {
            out.insert(path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path).unwrap());
        }
    }
    out
}

#[test]
fn report_is_byte_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    city(tmp.path(), 11);
    let input = tmp.path().join("city");
    let conf = input.join("pipeline.conf");
    let mut runs = Vec::new();
    for t in ["1", "4", "16"] {
        let out = tmp.path().join(format!("out{t}"));
        ok(&["--threads", t, "--config", p(&conf), "report", "--in", p(&input), "--out", p(&out)]);
        runs.push(files(&out));
    }
    assert!(runs[0].len() > 10);
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0], runs[2]);
}

#[test]
fn synth_is_byte_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("s.conf");
    fs::write(&conf, "seed=5\nn_users=60\nspan_days=35\n").unwrap();
    let mut runs = Vec::new();
    for t in ["1", "16"] {
        let out = tmp.path().join(format!("city{t}"));
        ok(&["--threads", t, "synth", "--config", p(&conf), "--out", p(&out)]);
        runs.push(files(&out));
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn every_emitted_row_meets_k_and_no_uid_leaks() {
    let tmp = tempfile::tempdir().unwrap();
    city(tmp.path(), 12);
    let input = tmp.path().join("city");
    let conf = input.join("pipeline.conf");
    let truth = fs::read_to_string(input.join("truth.json")).unwrap();
    let uids: Vec<String> = truth
        .match_indices("\"uid\": \"")
        .map(|(i, m)| truth[i + m.len()..].split('"').next().unwrap().to_string())
        .collect();
    assert_eq!(uids.len(), 160);

    let out = tmp.path().join("out");
    let k = 25u64;
    ok(&["--config", p(&conf), "--k", "25", "report", "--in", p(&input), "--out", p(&out)]);
    let mut rows = 0;
    for (name, bytes) in files(&out) {
        let text = String::from_utf8(bytes).unwrap();
        for u in &uids {
            assert!(!text.contains(u.as_str()), "{name} contains a uid");
        }
        if !name.ends_with(".csv") {
            continue;
        }
        assert!(text.contains("# k=25\n"), "{name}");
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        let col = header.iter().position(|h| *h == "count").expect("count column");
        for l in lines {
            let count: u64 = l.split(',').nth(col).unwrap().parse().unwrap();
            assert!(count >= k, "{name}: {l}");
            rows += 1;
        }
    }
    assert!(rows > 0);
}

#[test]
fn empty_input_directory_runs_clean_with_zero_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("empty");
    fs::create_dir(&input).unwrap();
    let out = tmp.path().join("out");
    ok(&["report", "--in", p(&input), "--out", p(&out)]);
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"parsed\": 0"));
    assert!(manifest.contains("\"visits\": 0"));
    assert!(manifest.contains("\"towers\": 0"));
    let funnel = fs::read_to_string(out.join("funnel.csv")).unwrap();
    // every funnel step is zero users, hence suppressed
    assert!(funnel.contains("# suppressed=7\n"), "{funnel}");
    assert!(funnel.ends_with("step,stage,count,pct_of_total\n"));
}

#[test]
fn stage_failure_exits_nonzero_with_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    city(tmp.path(), 13);
    let input = tmp.path().join("city");
    fs::write(input.join("census.csv"), "district_id,name\nbroken\n").unwrap();
    let out = airmine(&["report", "--in", p(&input), "--out", p(&tmp.path().join("out"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("manifest so far"), "{err}");
    assert!(err.contains("stage cohorts failed"), "{err}");
    assert!(err.contains("\"parsed\""), "{err}");
}

#[test]
fn store_and_raw_inputs_give_the_same_reports() {
    let tmp = tempfile::tempdir().unwrap();
    city(tmp.path(), 14);
    let c = tmp.path().join("city");
    let conf = c.join("pipeline.conf");
    let loc = tmp.path().join("loc");
    let app = tmp.path().join("app");
    ok(&["ingest", "--kind", "location", "--in", p(&c.join("location.csv")), "--out", p(&loc)]);
    ok(&["ingest", "--kind", "app", "--in", p(&c.join("app.csv")), "--out", p(&app)]);
    assert!(fs::read_to_string(loc.join("store.meta")).unwrap().contains("kind=location"));

    let census = c.join("census.csv");
    let pois = c.join("pois.csv");
    let raw = tmp.path().join("raw");
    let stored = tmp.path().join("stored");
    for (l, a, out) in [(c.join("location.csv"), c.join("app.csv"), &raw), (loc, app, &stored)] {
        ok(&[
            "--config",
            p(&conf),
            "report",
            "--location",
            p(&l),
            "--app",
            p(&a),
            "--census",
            p(&census),
            "--pois",
            p(&pois),
            "--out",
            p(out),
        ]);
    }
    let (mut a, mut b) = (files(&raw), files(&stored));
    // the manifest names the input paths, which differ
    a.remove("manifest.json");
    b.remove("manifest.json");
    assert_eq!(a, b);
}

#[test]
fn stage_commands_write_their_reports() {
    let tmp = tempfile::tempdir().unwrap();
    city(tmp.path(), 15);
    let c = tmp.path().join("city");
    let conf = c.join("pipeline.conf");
    let loc = tmp.path().join("loc");
    let app = tmp.path().join("app");
    ok(&["ingest", "--kind", "location", "--in", p(&c.join("location.csv")), "--out", p(&loc)]);
    ok(&["ingest", "--kind", "app", "--in", p(&c.join("app.csv")), "--out", p(&app)]);
    let o = tmp.path().join("o");
    let census = c.join("census.csv");
    let pois = c.join("pois.csv");

    ok(&["--config", p(&conf), "anchors", "--store", p(&loc), "--census", p(&census), "--out", p(&o.join("a"))]);
    for f in ["anchors.csv", "funnel.csv", "weekday_activity.csv", "work_hours.csv", "work_hours_hist.csv"] {
        assert!(o.join("a").join(f).exists(), "{f}");
    }
    ok(&["--config", p(&conf), "cohorts", "--store", p(&loc), "--census", p(&census), "--out", p(&o.join("c"))]);
    assert!(o.join("c/cohorts.csv").exists());
    ok(&[
        "--config",
        p(&conf),
        "--format",
        "json",
        "poi",
        "--store",
        p(&loc),
        "--pois",
        p(&pois),
        "--bounds",
        "mall=10:360,fastfood=5:120",
        "--out",
        p(&o.join("p")),
    ]);
    let visits = fs::read_to_string(o.join("p/poi_visits.json")).unwrap();
    assert!(visits.contains("\"mall\""));
    // 16 members, so lower k to see the row
    ok(&[
        "--k",
        "10",
        "community",
        "--store",
        p(&app),
        "--app",
        "pinboard",
        "--min",
        "100",
        "--location",
        p(&loc),
        "--pois",
        p(&pois),
        "--out",
        p(&o.join("m")),
    ]);
    let comm = fs::read_to_string(o.join("m/communities.csv")).unwrap();
    assert!(comm.contains("\npinboard,"), "{comm}");

    let t = o.join("t");
    let list = ["towers.csv", "distances.csv", "cdf.csv", "opcounts.csv"]
        .map(|f| t.join(f).to_str().unwrap().to_string())
        .join(",");
    ok(&["towers", "--store", p(&app), "--out", &list]);
    let cdf = fs::read_to_string(t.join("cdf.csv")).unwrap();
    assert!(cdf.contains("operator,tech,edge_km,count,fraction\n"), "{cdf}");
    let bad = airmine(&["towers", "--store", p(&app), "--out", "a.csv,b.csv"]);
    assert!(!bad.status.success());
}

#[test]
fn bad_flags_are_rejected() {
    assert!(!airmine(&["--threads", "0", "report", "--out", "/nonexistent/x"]).status.success());
    assert!(!airmine(&["--set", "no_such_key=1", "report", "--out", "/nonexistent/x"]).status.success());
    assert!(!airmine(&["--k", "0", "report", "--out", "/nonexistent/x"]).status.success());
    assert!(!airmine(&["ingest", "--kind", "location", "--out", "x"]).status.success());
}
