use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use particle_pde::kernel::read_dump;

fn run(dir: &Path, args: &[&str], config: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_particle-pde"));
    cmd.args(args).arg("--out").arg(dir.join("out"));
    if let Some(text) = config {
        let path = dir.join("experiment.cfg");
        fs::write(&path, text).unwrap();
        cmd.arg("--config").arg(path);
    }
    cmd.output().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL_RUN: &str = "model = transport\n[particles]\nN = 32\n[mollifier]\nepsilon = 0.2\n[integrator]\ndt = 0.01\nT = 0.1\n";

#[test]
fn verify_lemmas_passes_on_transport() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["verify-lemmas"], Some("model = transport\n[lemmas]\nlemma_epsilon = 0.2, 0.1, 0.05\n"));
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let table = fs::read_to_string(dir.path().join("out/lemmas.csv")).unwrap();
    assert!(table.starts_with("lemma,epsilon,measured,threshold,passed,note\n"));
    assert!(!table.contains(",false,"));
}

#[test]
fn zero_time_step_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["run"], Some("model = transport\n[integrator]\ndt = 0\n"));
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("dt"), "{}", stderr(&out));
}

#[test]
fn unknown_key_is_reported_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["run"], Some("model = transport\nwobble = 3\n"));
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn two_lemma_scales_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["verify-lemmas"], Some("[lemmas]\nlemma_epsilon = 0.2, 0.1\n"));
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("lemma_epsilon"), "{}", stderr(&out));
}

#[test]
fn large_epsilon_on_the_circle_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["sweep"], Some("[mollifier]\nepsilon = 0.6\n"));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn riemann_check_holds() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["riemann-check"], Some("[particles]\nN = 8, 64\n[riemann]\nfunctions = 4\n"));
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let table = fs::read_to_string(dir.path().join("out/riemann.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 8);
    assert!(table.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn sweep_writes_one_row_per_job_and_sample() {
    let dir = tempfile::tempdir().unwrap();
    let config = "model = transport\n[particles]\nN = 16, 32\n[mollifier]\nepsilon = 0.2, 0.1\n\
                  [integrator]\ndt = 0.01\nT = 0.1\nsample_times = 0.05, 0.1\n";
    let out = run(dir.path(), &["sweep"], Some(config));
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let table = fs::read_to_string(dir.path().join("out/errors.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("N,epsilon,t,err_L2,err_Linf,bound_rhs,holds"));
    assert_eq!(lines.count(), 2 * 2 * 2);
    let summary = fs::read_to_string(dir.path().join("out/summary.jsonl")).unwrap();
    for line in summary.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
}

#[test]
fn kernel_dump_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("kernel.bin");
    let out = run(dir.path(), &["run", "--dump-kernel", dump.to_str().unwrap()], Some(SMALL_RUN));
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let kernel = read_dump(fs::File::open(&dump).unwrap()).unwrap();
    assert_eq!((kernel.n, kernel.state_dim), (32, 1));
    assert_eq!(kernel.epsilon, 0.2);
    assert_eq!(kernel.model_name, "transport");
    assert_eq!(kernel.blocks.len(), 32 * 32);
    // transport blocks are odd in the offset
    let scale = kernel.blocks.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..32 {
        for j in 0..32 {
            assert!((kernel.blocks[i * 32 + j] + kernel.blocks[j * 32 + i]).abs() <= 1e-12 * scale);
        }
    }
}

#[test]
fn repeated_runs_give_identical_tables() {
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    for dir in [&first, &second] {
        let out = run(dir.path(), &["run"], Some(SMALL_RUN));
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    for name in ["trajectory.csv", "errors.csv"] {
        let a = fs::read(first.path().join("out").join(name)).unwrap();
        let b = fs::read(second.path().join("out").join(name)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{name}");
    }
}
