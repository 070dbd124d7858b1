use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn bundle(rel: &str) -> PathBuf {
    fixtures().join("bundle").join(rel)
}

fn trajdebug(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trajdebug"))
        .args(args)
        .current_dir(cwd)
        .env_remove("TRAJDEBUG_BACKEND")
        .env_remove("TRAJDEBUG_SCRIPT")
        .env_remove("TRAJDEBUG_MODEL")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn scripted<'a>(extra: &[&'a str], agent: &'a str, judge: &'a str, worlds: &'a str, out: &'a str) -> Vec<&'a str> {
    let mut v = vec!["--script", agent, "--judge-script", judge, "--world-dir", worlds, "--out", out];
    v.extend_from_slice(extra);
    v
}

#[test]
fn rollout_reproduces_bundle_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let (agent, judge, worlds) = (bundle("agent_script.json"), bundle("judge_script.json"), bundle("worlds"));
    let args = scripted(&["rollout"], s(&agent), s(&judge), s(&worlds), s(&out));
    let o = trajdebug(&args, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for i in 1..=12 {
        let id = format!("task-{i:02}");
        let got = std::fs::read_to_string(out.join(format!("trajectories/{id}.0.json"))).unwrap();
        let want = std::fs::read_to_string(bundle(&format!("trajectories/{id}.json"))).unwrap();
        assert_eq!(got, want, "{id}");
    }
    assert_eq!(stdout(&o).lines().count(), 12);
}

#[test]
fn rollout_errors() {
    let dir = tempfile::tempdir().unwrap();
    let agent = bundle("agent_script.json");

    let o = trajdebug(&["rollout", "--script", s(&agent), "missing.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("ERROR "), "{}", stderr(&o));

    let o = trajdebug(&["rollout", s(&bundle("worlds/task-01.json"))], dir.path());
    assert_eq!(o.status.code(), Some(1), "scripted backend without a script");

    let mut world: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(bundle("worlds/task-01.json")).unwrap()).unwrap();
    world["fault"] = serde_json::json!({"at_step": 2, "kind": "environment_error", "message": "simulator died"});
    let crash = dir.path().join("crash.json");
    std::fs::write(&crash, world.to_string()).unwrap();
    let o = trajdebug(&["rollout", "--script", s(&agent), "--out", "out", s(&crash)], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("ERROR EnvironmentError"));
    assert!(dir.path().join("out/trajectories/task-01.0.json").is_file());
}

#[test]
fn debug_flips_bundle_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (agent, judge, worlds, trajs) = (
        bundle("agent_script.json"),
        bundle("judge_script.json"),
        bundle("worlds"),
        bundle("trajectories"),
    );
    let run = |out: &str| {
        let args = scripted(&["--budget", "3", "debug", s(&trajs)], s(&agent), s(&judge), s(&worlds), out);
        trajdebug(&args, dir.path())
    };
    let a = run("a");
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    let text = stdout(&a);
    assert!(text.contains("initial successes: 0/12"), "{text}");
    assert!(text.contains("final successes: 11/12"), "{text}");
    let b = run("b");
    assert_eq!(b.status.code(), Some(0));
    let tree = |root: &str| {
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir.path().join(root).join("debug"))
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
            })
            .collect();
        files.sort();
        files
    };
    assert_eq!(tree("a").len(), 14);
    assert_eq!(tree("a"), tree("b"));
}

#[test]
fn debug_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (agent, judge, worlds) = (bundle("agent_script.json"), bundle("judge_script.json"), bundle("worlds"));
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let args = scripted(&["debug", s(&empty)], s(&agent), s(&judge), s(&worlds), "out");
    assert_eq!(trajdebug(&args, dir.path()).status.code(), Some(1));

    let t = bundle("trajectories/task-01.json");
    let args = scripted(&["--budget", "0", "debug", s(&t)], s(&agent), s(&judge), s(&worlds), "out");
    let o = trajdebug(&args, dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("ERROR Config:"), "{}", stderr(&o));
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "script = {:?}\njudge_script = {:?}\nworld_dir = {:?}\nbudget = 0\nout = \"from-file\"\n",
            bundle("agent_script.json"),
            bundle("judge_script.json"),
            bundle("worlds")
        ),
    )
    .unwrap();
    let t = bundle("trajectories/task-03.json");
    // budget 0 from the file is rejected unless a flag overrides it.
    assert_eq!(trajdebug(&["--config", s(&cfg), "debug", s(&t)], dir.path()).status.code(), Some(1));
    let o = trajdebug(&["--config", s(&cfg), "debug", "--budget", "1", s(&t)], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("from-file/debug/task-03.json").is_file());
}

#[test]
fn detect_and_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let (agent, judge, worlds) = (bundle("agent_script.json"), bundle("judge_script.json"), bundle("worlds"));
    let t = bundle("trajectories/task-04.json");
    let args = scripted(&["detect", s(&t)], s(&agent), s(&judge), s(&worlds), "out");
    assert_eq!(trajdebug(&args, dir.path()).status.code(), Some(0));
    let profile = std::fs::read_to_string(dir.path().join("out/profiles/task-04.json")).unwrap();
    let want: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(bundle("profiles.json")).unwrap()).unwrap();
    assert_eq!(serde_json::from_str::<serde_json::Value>(&profile).unwrap(), want[3]);

    for (method, step) in [("agentdebug", 4), ("direct", 4), ("brute-force", 4), ("binary-search", 4)] {
        let args = scripted(&["analyze", "--method", method, "--profiles", "out/profiles", s(&t)], s(&agent), s(&judge), s(&worlds), "out");
        let o = trajdebug(&args, dir.path());
        assert_eq!(o.status.code(), Some(0), "{method}: {}", stderr(&o));
        let d: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/diagnoses/task-04.json")).unwrap()).unwrap();
        assert_eq!(d["diagnosis"]["critical_step"], step, "{method}");
    }
}

#[test]
fn eval_detection_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let o = trajdebug(
        &[
            "eval-detection",
            "--benchmark",
            s(&fixtures().join("benchmark.json")),
            "--predictions",
            s(&fixtures().join("predictions.json")),
            "--out",
            "out",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let golden = std::fs::read_to_string(fixtures().join("golden/metrics_table.txt")).unwrap();
    assert_eq!(stdout(&o), golden);
    assert_eq!(std::fs::read_to_string(dir.path().join("out/metrics.txt")).unwrap(), golden);
}

#[test]
fn eval_detection_id_errors() {
    let dir = tempfile::tempdir().unwrap();
    let preds: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(fixtures().join("predictions.json")).unwrap()).unwrap();
    let disjoint: Vec<serde_json::Value> = preds
        .into_iter()
        .map(|mut p| {
            p["trajectory_id"] = format!("other-{}", p["trajectory_id"].as_str().unwrap()).into();
            p
        })
        .collect();
    let f = dir.path().join("p.json");
    std::fs::write(&f, serde_json::to_string(&disjoint).unwrap()).unwrap();
    let o = trajdebug(
        &["eval-detection", "--benchmark", s(&fixtures().join("benchmark.json")), "--predictions", s(&f)],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("ERROR IdMismatch:"), "{}", stderr(&o));
}

#[test]
fn eval_detection_single_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let mut bench: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(fixtures().join("benchmark.json")).unwrap()).unwrap();
    bench.truncate(4);
    let mut preds: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(fixtures().join("predictions.json")).unwrap()).unwrap();
    preds.truncate(4);
    let (b, p) = (dir.path().join("b.json"), dir.path().join("p.json"));
    std::fs::write(&b, serde_json::to_string(&bench).unwrap()).unwrap();
    std::fs::write(&p, serde_json::to_string(&preds).unwrap()).unwrap();
    let o = trajdebug(&["eval-detection", "--benchmark", s(&b), "--predictions", s(&p)], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(|l| l.split_whitespace().skip(1).collect::<Vec<_>>().join(" ")).collect();
    assert_eq!(lines[1], "4 100.0 75.0 50.0 50.0");
    assert_eq!(lines[2], "(macro) 4 100.0 75.0 50.0 50.0");
}

#[test]
fn propagation_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let o = trajdebug(
        &[
            "propagation",
            s(&bundle("profiles.json")),
            "--diagnoses",
            s(&bundle("diagnoses.json")),
            "--out",
            "out",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o), "rows: 12 columns: 10\n");
    assert_eq!(
        std::fs::read_to_string(dir.path().join("out/propagation.csv")).unwrap(),
        std::fs::read_to_string(fixtures().join("golden/propagation.csv")).unwrap()
    );

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(trajdebug(&["propagation", s(&empty)], dir.path()).status.code(), Some(1));

    let twice = dir.path().join("twice.json");
    let profiles: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(bundle("profiles.json")).unwrap()).unwrap();
    std::fs::write(&twice, serde_json::to_string(&[&profiles[0], &profiles[0]]).unwrap()).unwrap();
    let o = trajdebug(&["propagation", s(&twice)], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("ERROR InconsistentIds:"));
}

#[test]
fn bench_validate() {
    let dir = tempfile::tempdir().unwrap();
    let o = trajdebug(&["bench-validate", s(&fixtures().join("benchmark.json"))], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "ok: 12 items in 3 dataset(s): split-a, split-b, split-c\n");

    let mut bench: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(fixtures().join("benchmark.json")).unwrap()).unwrap();
    bench[7]["annotation"]["critical_step"] = 99.into();
    let f = dir.path().join("bad.json");
    std::fs::write(&f, serde_json::to_string(&bench).unwrap()).unwrap();
    let o = trajdebug(&["bench-validate", s(&f)], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ERROR SchemaViolation:") && stderr(&o).contains("in item 7 at annotation.critical_step"), "{}", stderr(&o));
}

#[test]
fn parallel_jobs_keep_output() {
    let dir = tempfile::tempdir().unwrap();
    let (agent, judge, worlds) = (bundle("agent_script.json"), bundle("judge_script.json"), bundle("worlds"));
    for (jobs, out) in [("1", "one"), ("4", "four")] {
        let args = scripted(&["--jobs", jobs, "rollout"], s(&agent), s(&judge), s(&worlds), out);
        assert_eq!(trajdebug(&args, dir.path()).status.code(), Some(0));
    }
    for i in 1..=12 {
        let f = format!("trajectories/task-{i:02}.0.json");
        assert_eq!(
            std::fs::read(dir.path().join("one").join(&f)).unwrap(),
            std::fs::read(dir.path().join("four").join(&f)).unwrap()
        );
    }
}
