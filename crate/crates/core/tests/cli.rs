use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bwd_hjb::cli::commands::blob_hash;

const LQR: &str = r#"
[problem]
family = "lqr"
dim = 1

[solver]
steps = 10
particles = 200

[evaluation]
replicates = 2
paths = 10
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bwd-hjb"))
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn run(command: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    bin()
        .arg(command)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn lqr_solve_writes_models_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "lqr.toml", LQR);
    let out = tmp.path().join("out");
    let o = run("solve", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in [
        "backward_models.txt",
        "backward_diagnostics.csv",
        "backward_gaussians.txt",
        "forward_models.txt",
        "forward_diagnostics.csv",
        "manifest.toml",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let models = std::fs::read_to_string(out.join("backward_models.txt")).unwrap();
    assert!(models.trim_end().ends_with("terminal"));
}

#[test]
fn manifest_hashes_match_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "lqr.toml", LQR);
    let out = tmp.path().join("out");
    assert!(run("solve", &cfg, &out, &[]).status.success());
    let manifest: toml::Table = std::fs::read_to_string(out.join("manifest.toml")).unwrap().parse().unwrap();
    let outputs = manifest["outputs"].as_table().unwrap();
    assert_eq!(outputs.len(), 5);
    for (name, hash) in outputs {
        let content = std::fs::read(out.join(name)).unwrap();
        assert_eq!(hash.as_str().unwrap(), blob_hash(&content), "{name}");
    }
}

#[test]
fn content_hash_follows_the_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "lqr.toml", LQR);
    let hash = |out: &Path, extra: &[&str]| {
        assert!(run("solve", &cfg, out, extra).status.success());
        let m: toml::Table = std::fs::read_to_string(out.join("manifest.toml")).unwrap().parse().unwrap();
        m["content_hash"].as_str().unwrap().to_string()
    };
    let a = hash(&tmp.path().join("a"), &[]);
    let b = hash(&tmp.path().join("b"), &[]);
    let c = hash(&tmp.path().join("c"), &["--seed", "5"]);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn seed_flag_changes_results_and_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "lqr.toml", LQR);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run("solve", &cfg, &a, &[]).status.success());
    assert!(run("solve", &cfg, &b, &["--seed", "42", "--threads", "2"]).status.success());
    let read = |d: &Path| std::fs::read(d.join("backward_models.txt")).unwrap();
    assert_ne!(read(&a), read(&b));
    let m = std::fs::read_to_string(b.join("manifest.toml")).unwrap();
    assert!(m.contains("grid = 42"), "{m}");
}

#[test]
fn thread_count_does_not_change_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "lqr.toml", LQR);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run("evaluate", &cfg, &a, &["--threads", "1"]).status.success());
    assert!(run("evaluate", &cfg, &b, &["--threads", "4"]).status.success());
    for f in ["evaluation.csv", "backward_costs.csv", "forward_costs.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn too_few_particles_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "few.toml", &LQR.replace("particles = 200", "particles = 2"));
    let o = run("solve", &cfg, &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("under-determined"), "{}", stderr(&o));
}

#[test]
fn parse_errors_name_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "typo.toml", &LQR.replace("steps = 10", "stpes = 10"));
    let o = run("solve", &cfg, &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line"), "{}", stderr(&o));
    let missing = run("solve", &tmp.path().join("nope.toml"), &tmp.path().join("out"), &[]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn zero_threads_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "lqr.toml", LQR);
    let o = run("solve", &cfg, &tmp.path().join("out"), &["--threads", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn profile_needs_tcl_and_a_positive_dimension() {
    let tmp = tempfile::tempdir().unwrap();
    let lqr = write_config(tmp.path(), "lqr.toml", LQR);
    assert_eq!(run("profile", &lqr, &tmp.path().join("a"), &[]).status.code(), Some(2));
    let tcl = LQR.replace("\"lqr\"", "\"tcl\"") + "\n[tcl]\nprofile_draws = 5\n";
    let empty = write_config(tmp.path(), "tcl0.toml", &tcl.replace("dim = 1", "dim = 0"));
    assert_eq!(run("profile", &empty, &tmp.path().join("b"), &[]).status.code(), Some(2));
    let ok = write_config(tmp.path(), "tcl.toml", &tcl);
    let out = tmp.path().join("c");
    let o = run("profile", &ok, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let profile = std::fs::read_to_string(out.join("profile_target.csv")).unwrap();
    assert_eq!(profile.lines().count(), 12);
    assert!(out.join("population.toml").is_file());
}

#[test]
fn compare_single_cell_and_empty_list() {
    let tmp = tempfile::tempdir().unwrap();
    let single = write_config(tmp.path(), "one.toml", &format!("{LQR}\n[compare]\ndims = [1]\nparticles = [100]\n"));
    let out = tmp.path().join("out");
    let o = run("compare", &single, &out, &["--timings"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("compare.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "scheme,d,N,J_hat,sigma_hat,wall_time,peak_particle_memory");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("backward,1,100,"));
    assert!(lines[2].starts_with("forward,1,100,"));

    let empty = write_config(tmp.path(), "empty.toml", &format!("{LQR}\n[compare]\ndims = [1]\nparticles = []\n"));
    assert_eq!(run("compare", &empty, &tmp.path().join("e"), &[]).status.code(), Some(2));
    let plain = write_config(tmp.path(), "plain.toml", LQR);
    assert_eq!(run("compare", &plain, &tmp.path().join("p"), &[]).status.code(), Some(2));
}

#[test]
fn overflow_is_a_numerical_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let text = LQR.replace("\"lqr\"", "\"heat\"").replace("dim = 1", "dim = 2") + "\n[heat]\nscale = 1e200\n";
    let cfg = write_config(tmp.path(), "bad.toml", &text);
    let o = run("solve", &cfg, &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("numerical"));
}

#[test]
fn shipped_presets_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("presets");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        bwd_hjb::cli::config::ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert_eq!(seen, 3);
}
