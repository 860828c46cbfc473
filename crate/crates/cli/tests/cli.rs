use std::path::Path;
use std::process::{Command, Output};

fn qspace(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qspace"))
        .args(args)
        .current_dir(dir)
        .env("QSPACE_WORKERS", "1")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn table3_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = qspace(&["table3", "--models", "A1,A3", "--noise", "1/30", "--reps", "200", "--seed", "7"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("config "));
    let csv = std::fs::read_to_string(dir.path().join("table3.csv")).unwrap();
    let mut rows = csv::Reader::from_reader(csv.as_bytes());
    let headers = rows.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let records: Vec<_> = rows.records().map(|r| r.unwrap()).collect();
    // Two models, five tests each.
    assert_eq!(records.len(), 10);
    for r in &records {
        let rejected: usize = r[col("rejected")].parse().unwrap();
        let denominator: usize = r[col("denominator")].parse().unwrap();
        assert!(rejected <= denominator && denominator <= 200);
    }
    let u_a1 = records.iter().find(|r| &r[col("model")] == "A1" && &r[col("statistic")] == "U").unwrap();
    assert_eq!(&u_a1[col("rejected")], "200");
}

#[test]
fn trace_forking_has_seven_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = qspace(&["trace", "--kind", "forking"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 8);
    assert!(text.starts_with("voxel,"));
}

#[test]
fn missing_config_exits_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = qspace(&["table3", "--config", "no/such/file.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no/such/file.cfg"));
}

#[test]
fn malformed_config_and_unknown_flags_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "reps = many\n").unwrap();
    let o = qspace(&["calibrate", "--config", "bad.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.cfg"));
    let o = qspace(&["table3", "--frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn scheme_simulate_calibrate_analyze_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let o = qspace(&["scheme", "--count", "30", "--output", "dirs.txt"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    std::fs::write(dir.path().join("run.cfg"), "scheme = dirs.txt\nnoise = 1/30\ncalibration_reps = 1000\nseed = 4\n")
        .unwrap();
    let base = ["--config", "run.cfg"];
    let with = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd];
        args.extend(base);
        args.extend(extra);
        qspace(&args, dir.path())
    };
    let o = with("simulate", &["--models", "A1,A3", "--dims", "4,2,1", "--output", "vol"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = with("calibrate", &["--output", "cal.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = with("analyze", &["--calibration", "cal.csv", "--volume", "vol/volume.hdr", "--out", "maps", "--chunk", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = String::from_utf8(o.stdout).unwrap();
    let total: usize = summary.lines().map(|l| l.rsplit('\t').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 8);
    let u = std::fs::read(dir.path().join("maps/U.f32")).unwrap();
    assert_eq!(u.len(), 8 * 4);
    assert_eq!(std::fs::read(dir.path().join("maps/classification.u8")).unwrap().len(), 8);
}
