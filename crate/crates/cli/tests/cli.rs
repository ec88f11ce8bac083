//! End-to-end checks of the `tailavg` binary: one small sweep is built once
//! and every command is exercised against it.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn tailavg() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tailavg"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("failed to spawn tailavg")
}

fn run_ok(cmd: &mut Command) -> String {
    let out = run(cmd);
    assert!(
        out.status.success(),
        "command failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn exit_code(cmd: &mut Command) -> i32 {
    run(cmd).status.code().expect("process was killed")
}

fn first_line(path: &Path) -> String {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    text.lines().next().unwrap_or_default().to_string()
}

fn line_count(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

struct Fixture {
    _dir: TempDir,
    data: PathBuf,
    sweep: PathBuf,
}

/// Generates a dataset and trains one sweep, shared by every test below.
fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data.csv");
        let sweep = dir.path().join("sweep");
        run_ok(tailavg().args([
            "gen-data",
            "--out",
            data.to_str().unwrap(),
            "--seed",
            "11",
            "--per-domain",
            "30",
        ]));
        run_ok(&mut sweep_cmd(&data, &sweep));
        Fixture {
            _dir: dir,
            data,
            sweep,
        }
    })
}

fn sweep_cmd(data: &Path, out: &Path) -> Command {
    let mut cmd = tailavg();
    cmd.args([
        "sweep",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--trials",
        "2",
        "--hidden",
        "6",
        "--total-iters",
        "120",
        "--eval-interval",
        "30",
        "--t0",
        "30",
        "--optimizer",
        "adam",
        "--lr",
        "0.01",
        "--seed",
        "5",
    ]);
    cmd
}

#[test]
fn gen_data_is_deterministic_and_well_formed() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for path in [&a, &b] {
        run_ok(tailavg().args([
            "gen-data",
            "--out",
            path.to_str().unwrap(),
            "--seed",
            "3",
            "--domains",
            "3",
            "--per-domain",
            "10",
        ]));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(first_line(&a), "domain,y,x0,x1");
    assert_eq!(line_count(&a), 1 + 3 * 10);
}

#[test]
fn sweep_writes_expected_layout() {
    let fx = fixture();
    assert!(fx.sweep.join("experiment.json").is_file());
    assert_eq!(
        first_line(&fx.sweep.join("summary.csv")),
        "test_domain,trial,kind,selected_iter,val_acc,test_acc,status"
    );
    // 4 domains x 2 trials, two rows each, plus the header.
    assert_eq!(line_count(&fx.sweep.join("summary.csv")), 1 + 16);
    let trial = fx.sweep.join("d0").join("trial0");
    assert!(trial.join("manifest.json").is_file());
    assert!(trial.join("online_curve.csv").is_file());
    assert!(trial.join("sma_curve.csv").is_file());
    assert!(trial.join("online_00000000.ckpt").is_file());
    assert!(trial.join("online_00000120.ckpt").is_file());
    assert!(trial.join("sma_00000120.ckpt").is_file());
}

#[test]
fn sweep_is_reproducible_across_thread_counts() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let again = dir.path().join("again");
    run_ok(sweep_cmd(&fx.data, &again).args(["--threads", "2"]));
    for rel in ["summary.csv", "experiment.json", "d1/trial1/manifest.json"] {
        assert_eq!(
            fs::read(fx.sweep.join(rel)).unwrap(),
            fs::read(again.join(rel)).unwrap(),
            "{rel} differs between sweep runs"
        );
    }
}

#[test]
fn ablation_commands_write_grids() {
    let fx = fixture();
    run_ok(tailavg().args([
        "ablate-t0",
        "--sweep",
        fx.sweep.to_str().unwrap(),
        "--grid",
        "0,30,60",
    ]));
    let t0_csv = fx.sweep.join("ablate_t0.csv");
    assert_eq!(first_line(&t0_csv), "t0,mean_test_acc");
    assert_eq!(line_count(&t0_csv), 1 + 3);

    run_ok(tailavg().args([
        "ablate-freq",
        "--sweep",
        fx.sweep.to_str().unwrap(),
        "--grid",
        "30,60",
    ]));
    let freq_csv = fx.sweep.join("ablate_freq.csv");
    assert_eq!(first_line(&freq_csv), "freq,mean_test_acc");
    assert_eq!(line_count(&freq_csv), 1 + 2);
}

#[test]
fn ensemble_command_writes_curves() {
    let fx = fixture();
    run_ok(tailavg().args([
        "ensemble",
        "--sweep",
        fx.sweep.to_str().unwrap(),
        "--kind",
        "eoa",
        "--domain",
        "d0",
        "--subsets",
        "5",
    ]));
    let subsets = fx.sweep.join("ensemble").join("eoa_d0_subsets.csv");
    let sizes = fx.sweep.join("ensemble").join("eoa_d0_sizes.csv");
    assert_eq!(first_line(&subsets), "size,subset_id,accuracy");
    assert_eq!(first_line(&sizes), "size,mean_acc,std_err");
    // Two members: sizes 1 and 2, with 2 + 1 subsets overall.
    assert_eq!(line_count(&sizes), 1 + 2);
    assert_eq!(line_count(&subsets), 1 + 3);
}

#[test]
fn diagnostics_commands_write_reports() {
    let fx = fixture();
    let sweep = fx.sweep.to_str().unwrap();
    run_ok(tailavg().args(["diag", "rankcorr", "--sweep", sweep]));
    let rankcorr = fx.sweep.join("diag").join("rankcorr.csv");
    assert_eq!(first_line(&rankcorr), "group,kind,rho");
    // One row per (domain, view) pair.
    assert_eq!(line_count(&rankcorr), 1 + 8);

    run_ok(tailavg().args(["diag", "crossrun", "--sweep", sweep]));
    assert_eq!(
        first_line(&fx.sweep.join("diag").join("crossrun.csv")),
        "group,kind,iteration,rho"
    );

    run_ok(tailavg().args(["diag", "biasvar", "--sweep", sweep, "--domain", "d1"]));
    let biasvar = fx.sweep.join("diag").join("biasvar_d1.csv");
    assert_eq!(first_line(&biasvar), "centroid,bias,variance,mean_ce");
    assert_eq!(line_count(&biasvar), 1 + 2);

    run_ok(tailavg().args([
        "diag", "taylor", "--sweep", sweep, "--domain", "d2", "--trial", "1", "--samples", "4",
    ]));
    let taylor = fx.sweep.join("diag").join("taylor_d2_trial1.csv");
    assert_eq!(first_line(&taylor), "sample,class,sma_logit,second_order_term");
    assert_eq!(line_count(&taylor), 1 + 4);

    run_ok(tailavg().args(["diag", "stability", "--sweep", sweep]));
    let stability = fx.sweep.join("diag").join("stability.csv");
    assert_eq!(first_line(&stability), "test_domain,trial,kind,tail_std");
    assert_eq!(line_count(&stability), 1 + 16);
}

#[test]
fn usage_errors_exit_with_code_2() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    // --classes without --data.
    assert_eq!(
        exit_code(tailavg().args(["sweep", "--out", out.to_str().unwrap(), "--classes", "3"])),
        2
    );
    // Unknown subcommand (rejected by the argument parser).
    assert_eq!(exit_code(tailavg().arg("bogus")), 2);
    // Not a sweep directory.
    assert_eq!(
        exit_code(tailavg().args(["diag", "stability", "--sweep", dir.path().to_str().unwrap()])),
        2
    );
    // Bad thread-count override.
    assert_eq!(
        exit_code(
            sweep_cmd(&fixture().data, &dir.path().join("x")).env("TAILAVG_THREADS", "abc")
        ),
        2
    );
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let copy = dir.path().join("sweep");
    copy_tree(&fx.sweep, &copy);
    fs::write(copy.join("d0").join("trial0").join("online_00000030.ckpt"), b"junk").unwrap();
    let out = run(tailavg().args([
        "ablate-t0",
        "--sweep",
        copy.to_str().unwrap(),
        "--grid",
        "0",
    ]));
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).trim().is_empty());
}

fn copy_tree(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_tree(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), &target).unwrap();
        }
    }
}
