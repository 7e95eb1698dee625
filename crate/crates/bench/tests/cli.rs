use std::process::Command;

fn bench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pmkit-bench"))
}

#[test]
fn writes_one_row_per_run_and_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("stats.csv");
    let status = bench()
        .args(["--backend", "undo", "--ds", "ht-closed", "--mode", "fine"])
        .args(["--threads", "1,4", "--ops", "50", "--runs", "3", "--seed", "9"])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 2 * 3);
    assert!(lines[0].starts_with("run,backend,ds,mode,wall_ms,ops_committed,flush_calls"));
    assert!(lines[1..].iter().all(|l| l.contains(",undo,ht-closed,fine,") && l.ends_with(",ok")));
}

#[test]
fn append_keeps_a_single_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("stats.csv");
    for extra in [&[][..], &["--append"][..]] {
        let status = bench()
            .args(["--backend", "redo", "--ops", "10", "--runs", "1"])
            .args(extra)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert_eq!(text.matches("run,backend").count(), 1);
}

#[test]
fn file_pool_in_direct_mode() {
    let dir = tempfile::tempdir().unwrap();
    let pool = dir.path().join("pool");
    let out = bench()
        .args(["--backend", "named", "--ds", "set", "--ops", "30", "--runs", "2"])
        .args(["--reinit-every", "0", "--sim", "direct", "--pool-size", "8388608"])
        .arg("--pool")
        .arg(&pool)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().skip(1).all(|l| l.contains(",direct,")));
    assert!(pool.exists());
}

#[test]
fn failure_row_gives_nonzero_exit() {
    let out = bench()
        .args(["--backend", "redo", "--pool-size", "307200", "--log-slots", "4"])
        .args(["--mix", "100:0:0", "--keys", "1099511627776", "--ops", "20000", "--runs", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("space"));
}

#[test]
fn bad_arguments_are_rejected() {
    for args in [
        &["--mix", "50:40:20"][..],
        &["--backend", "wal"][..],
        &["--sim", "direct"][..],
        &["--ds", "ht-open", "--mode", "fine"][..],
    ] {
        let out = bench().args(args).args(["--ops", "1"]).output().unwrap();
        assert!(!out.status.success(), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}
