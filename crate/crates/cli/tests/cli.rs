use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "n_base = 20\nheldout_count = 20\nn_lambda = 11\ndrift_t_sim = 0.3\nspiral_t_sim = 0.3\n";

fn kmpc(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kmpc"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out-dir")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn manifest_outputs(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("manifest.txt"))
        .unwrap()
        .lines()
        .filter(|l| l.starts_with("output") || l.starts_with("input"))
        .map(String::from)
        .collect()
}

#[test]
fn pipeline_runs_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("small.cfg");
    fs::write(&config, SMALL).unwrap();
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];
    for dir in &dirs {
        for verb in ["generate", "identify", "evaluate", "drift", "spiral"] {
            let out = kmpc(&[verb, "--seed", "5"], &config, dir);
            assert!(out.status.success(), "{verb}: {}", String::from_utf8_lossy(&out.stderr));
        }
    }
    for name in ["model.bin", "drift_koopman.csv", "drift_linear.csv", "spiral_reference.csv", "identify_report.txt"] {
        assert!(dirs[0].join(name).exists(), "{name} missing");
    }
    assert_eq!(manifest_outputs(&dirs[0]), manifest_outputs(&dirs[1]));
    let manifest = fs::read_to_string(dirs[0].join("manifest.txt")).unwrap();
    for verb in ["[generate]", "[identify]", "[evaluate]", "[drift]", "[spiral]", "seed = 5"] {
        assert!(manifest.contains(verb), "{verb}");
    }
    let reference = fs::read_to_string(dirs[0].join("spiral_reference.csv")).unwrap();
    assert_eq!(reference.lines().nth(1).unwrap(), "0.0000000000000000e0,1.6699999999999999e1,,0.0000000000000000e0");
    let uncontrolled = fs::read_to_string(dirs[0].join("uncontrolled.csv")).unwrap();
    let mut per_traj = std::collections::BTreeMap::new();
    for line in uncontrolled.lines().skip(1) {
        *per_traj.entry(line.rsplit(',').next().unwrap().to_string()).or_insert(0) += 1;
    }
    assert_eq!(per_traj.values().max(), Some(&51));
}

#[test]
fn failures_print_a_machine_readable_line() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.cfg");
    fs::write(&config, "n_base = 20\nzeta = minus one\n").unwrap();
    let out = kmpc(&["generate"], &config, tmp.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("kmpc-error verb=generate kind=config line=2"), "{err}");

    fs::write(&config, SMALL).unwrap();
    let out = kmpc(&["drift"], &config, &tmp.path().join("empty"));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("kmpc-error verb=drift"));
}
