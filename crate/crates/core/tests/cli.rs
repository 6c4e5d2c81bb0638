use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "image.size=16",
    "--set",
    "sino.views=24",
    "--set",
    "sino.bins=32",
    "--set",
    "data.cases=5",
    "--set",
    "data.val_cases=2",
    "--set",
    "pretrain.epochs=1",
    "--set",
    "prior.n_iter=3",
    "--set",
    "residual.epochs=1",
    "--set",
    "residual.patch=16",
    "--set",
    "residual.trunk_input=16",
    "--set",
    "residual.prior_niter=0",
];

fn mgmar(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgmar"))
        .args(args)
        .arg("--out")
        .arg(out)
        .args(TINY)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn missing_artifacts_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    for verb in [&["pretrain"][..], &["run"], &["eval"], &["ablate", "init"]] {
        let o = mgmar(verb, dir.path());
        assert_eq!(code(&o), 3, "{verb:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.toml");
    let o = mgmar(&["--config", missing.to_str().unwrap(), "gen-data"], dir.path());
    assert_eq!(code(&o), 2);
    assert_eq!(code(&mgmar(&["--set", "prior.k=-1", "gen-data"], dir.path())), 2);
    assert_eq!(code(&mgmar(&["--set", "nosuch.key=1", "gen-data"], dir.path())), 2);
    assert_eq!(code(&mgmar(&["--preset", "huge", "gen-data"], dir.path())), 2);
    assert_eq!(code(&mgmar(&["--set", "data.spectrum=/nonexistent/spectrum.txt", "gen-data"], dir.path())), 2);
    assert_eq!(code(&mgmar(&["ablate", "dropout"], dir.path())), 2);
    assert_eq!(code(&mgmar(&["run", "--stages", "prior,fbp"], dir.path())), 2);
}

#[test]
fn config_file_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "preset = \"desk\"\nrun.seed = 11\ndata.cases = 4\ndata.val_cases = 1\n").unwrap();
    let out = dir.path().join("o");
    let o = mgmar(&["--config", cfg.to_str().unwrap(), "gen-data"], &out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // TINY comes after the file and overrides data.cases
    assert!(stdout(&o).starts_with("5 cases"));
    let manifest = std::fs::read_to_string(out.join("data/manifest.txt")).unwrap();
    assert!(manifest.contains("# seed 11"), "{manifest}");
}

#[test]
fn gen_data_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert_eq!(code(&mgmar(&["--seed", "7", "gen-data"], &a)), 0);
    assert_eq!(code(&mgmar(&["--seed", "7", "gen-data"], &b)), 0);
    assert_eq!(code(&mgmar(&["--seed", "8", "gen-data"], &c)), 0);
    assert_eq!(tree(&a), tree(&b));
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn selftest_passes_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let a = mgmar(&["selftest"], dir.path());
    let b = mgmar(&["selftest"], dir.path());
    assert_eq!(code(&a), 0, "{}", stdout(&a));
    assert_eq!(a.stdout, b.stdout);
    assert!(stdout(&a).contains(", 0 failed"));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(code(&mgmar(&["gen-data"], out)), 0);
    let o = mgmar(&["pretrain"], out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for k in 0..3 {
        assert!(out.join(format!("models/stage_{k}.enc")).exists());
        assert!(out.join(format!("models/stage_{k}.inr")).exists());
    }
    // a second pretrain reuses every stage and the residual network
    let again = stdout(&mgmar(&["pretrain"], out));
    assert_eq!(again.matches("up to date").count(), 4, "{again}");

    let o = mgmar(&["run"], out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let runs: Vec<_> = std::fs::read_dir(out.join("runs")).unwrap().flatten().map(|e| e.path()).collect();
    assert_eq!(runs.len(), 2);
    let case = &runs[0];
    for f in ["mu_ma_0.mgmr", "mu_ma_2.mgmr", "prior_init.mgmr", "prior.mgmr", "nmar.mgmr", "corrected.mgmr", "corrected.pgm", "timing.txt"] {
        assert!(case.join(f).exists(), "{f}");
    }
    let first = tree(case);
    let o = mgmar(&["run"], out);
    assert_eq!(code(&o), 0);
    let strip = |t: Vec<(String, Vec<u8>)>| t.into_iter().filter(|(n, _)| n != "timing.txt").collect::<Vec<_>>();
    assert_eq!(strip(first), strip(tree(case)));

    // eval: strict exits 4 exactly when the report lists failed checks
    let o = mgmar(&["eval"], out);
    assert_eq!(code(&o), 0);
    let report = std::fs::read_to_string(out.join("eval/report.md")).unwrap();
    let csv = std::fs::read_to_string(out.join("eval/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 5);
    let strict = code(&mgmar(&["eval", "--strict"], out));
    assert_eq!(strict == 4, report.contains("Failed checks"), "{strict}");

    // prior only, with and without refinement
    let name = case.file_name().unwrap().to_str().unwrap().to_string();
    let o = mgmar(&["run", "--stages", "prior", "--niter", "0", "--case", &name], out);
    assert_eq!(code(&o), 0);
    assert!(!case.join("nmar.mgmr").exists());
    assert!(!case.join("corrected.mgmr").exists());
    assert_eq!(std::fs::read(case.join("prior.mgmr")).unwrap(), std::fs::read(case.join("prior_init.mgmr")).unwrap());
    assert_eq!(code(&mgmar(&["run", "--case", "case_9999"], out)), 3);
}
