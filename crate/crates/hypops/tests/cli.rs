use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn hypops(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hypops")).args(args).output().unwrap()
}

fn model(name: &str) -> String {
    root().join("models").join(name).to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn missing_model_is_a_model_error() {
    let o = hypops(&["parse", "does/not/exist.sccp"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(hypops(&["frobnicate"]).status.code(), Some(64));
    assert_eq!(hypops(&["--help"]).status.code(), Some(0));
}

#[test]
fn parse_prints_a_reparseable_model() {
    let o = hypops(&["parse", &model("client_server_hybrid.sccp")]);
    assert_eq!(o.status.code(), Some(0));
    let tmp = tempfile::tempdir().unwrap();
    let again = tmp.path().join("again.sccp");
    std::fs::write(&again, stdout(&o)).unwrap();
    let o2 = hypops(&["parse", again.to_str().unwrap()]);
    assert_eq!(o2.status.code(), Some(0));
    assert_eq!(stdout(&o), stdout(&o2));
}

#[test]
fn check_passes_on_every_bundled_model() {
    for entry in std::fs::read_dir(root().join("models")).unwrap() {
        let path = entry.unwrap().path();
        let o = hypops(&["check", path.to_str().unwrap(), "--samples", "50"]);
        assert_eq!(o.status.code(), Some(0), "{}: {}", path.display(), stdout(&o));
    }
}

#[test]
fn dump_tdsha_lists_transition_classes() {
    let o = hypops(&["dump-tdsha", &model("client_server_hybrid.sccp")]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("breakdown") && text.contains("request"), "{text}");
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn pdmp_runs_are_byte_identical_across_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |dir: &Path| {
        let o = hypops(&[
            "pdmp",
            &model("weibull_repair.sccp"),
            "--reps",
            "50",
            "--horizon",
            "2000",
            "--grid",
            "100",
            "--probe",
            "Xr@2000",
            "--track",
            "repair",
            "--seed",
            "9",
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        files(dir)
    };
    let a = run(&tmp.path().join("a"));
    let b = run(&tmp.path().join("b"));
    assert_eq!(a, b);
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        ["pdmp_cdf.csv", "pdmp_diagnostics.jsonl", "pdmp_firings.csv", "pdmp_means.csv", "pdmp_occupancy.csv"]
    );
}

#[test]
fn compare_writes_a_report_and_honours_assert_converges() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("corner.toml");
    std::fs::write(
        &cfg,
        format!(
            "model = {:?}\nmode = \"pdmp\"\nsizes = [100, 200]\nhorizon = 3\ngrid = 1\nreps = 100\nseed = 1\n\
             out_dir = \"out\"\n\n[[probes]]\ntime = 3\nvar = \"Z\"\n",
            model("corner_walk.sccp")
        ),
    )
    .unwrap();
    let o = hypops(&["compare", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("verdict: fail"));
    let report = std::fs::read_to_string(tmp.path().join("out/report.csv")).unwrap();
    assert!(report.starts_with("time,var,size,ks,mean_diff,n_ctmc,n_limit\n"), "{report}");
    assert_eq!(report.lines().count(), 3);

    let o = hypops(&["compare", cfg.to_str().unwrap(), "--assert-converges"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn bundled_configs_load() {
    for entry in std::fs::read_dir(root().join("configs")).unwrap() {
        let path = entry.unwrap().path();
        let cfg = hypops::config::ExperimentConfig::load(&path).unwrap();
        cfg.validate().unwrap();
        assert!(cfg.model.exists(), "{}", cfg.model.display());
        for name in ["desk", "paper"] {
            let mut c = cfg.clone();
            c.apply_preset(name).unwrap();
            c.validate().unwrap();
        }
    }
}
