use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "scene.synthetic.cameras=9",
    "scene.synthetic.width=24",
    "scene.synthetic.height=24",
    "scene.synthetic.gt_gaussians=600",
    "scene.synthetic.init_points=150",
    "train.iterations=30",
    "train.densify.start_iter=10",
    "train.densify.interval=10",
    "train.densify.stop_iter=20",
];

fn splat(args: &[&str], overrides: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_splat"));
    cmd.args(args).env("RUST_LOG", "warn");
    for o in overrides {
        cmd.arg("--override").arg(o);
    }
    cmd.output().expect("spawn splat")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn make_scene_train_render_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    let stdout = ok(&splat(&["make-scene", "--out", s(&scene)], TINY));
    assert!(stdout.contains("9 views"));

    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "[scene]\npath = \"scene\"\n").unwrap();
    let run = tmp.path().join("run");
    let stdout = ok(&splat(&["train", "--config", s(&cfg), "--out", s(&run)], &TINY[5..]));
    assert!(stdout.contains("psnr"), "{stdout}");
    for f in ["config.toml", "metrics.csv", "point_cloud.ply", "test_renders"] {
        assert!(run.join(f).exists(), "{f}");
    }

    // The echoed config reproduces the run.
    let again = tmp.path().join("again");
    let stdout2 = ok(&splat(&["train", "--config", s(&run.join("config.toml")), "--out", s(&again)], &[]));
    assert_eq!(
        std::fs::read(run.join("point_cloud.ply")).unwrap(),
        std::fs::read(again.join("point_cloud.ply")).unwrap()
    );
    assert_eq!(stdout.split(" time").next(), stdout2.split(" time").next());

    let ply = run.join("point_cloud.ply");
    let renders = tmp.path().join("renders");
    let stdout = ok(&splat(&["render", "--config", s(&cfg), "--out", s(&renders), "--ply", s(&ply)], &[]));
    assert!(stdout.contains("rendered 2 views"), "{stdout}");
    let stdout = ok(&splat(&["eval", "--config", s(&cfg), "--ply", s(&ply)], &[]));
    assert!(stdout.starts_with("psnr"));
}

#[test]
fn threshold_sweep_writes_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let stdout = ok(&splat(
        &["sweep-threshold", "--out", s(&out), "--cell", "vanilla@2e-4", "--tau", "1e-4", "--strategy", "full"],
        TINY,
    ));
    assert_eq!(stdout.lines().count(), 4, "{stdout}");
    let csv = std::fs::read_to_string(out.join("threshold_sweep.csv")).unwrap();
    assert!(csv.lines().next().unwrap().contains("gaussian_count,peak_memory_bytes,wall_time_s"));
    assert_eq!(csv.lines().count(), 3);
    assert!(out.join("threshold_sweep.md").exists());
    assert_eq!(std::fs::read_dir(out.join("cells")).unwrap().count(), 2);
}

#[test]
fn drop_sweep_and_ablation() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("drop");
    ok(&splat(
        &["sweep-drop", "--out", s(&out), "--fraction", "0", "--fraction", "0.5", "--strategy", "vanilla"],
        TINY,
    ));
    assert_eq!(std::fs::read_to_string(out.join("drop_sweep.csv")).unwrap().lines().count(), 3);

    let a = tmp.path().join("a.toml");
    let b = tmp.path().join("b.toml");
    std::fs::write(&a, "[scene]\nseed = 1\n").unwrap();
    std::fs::write(&b, "[scene]\nseed = 2\n").unwrap();
    let abl = tmp.path().join("ablation");
    let stdout = ok(&splat(&["ablation", "--config", s(&a), "--config", s(&b), "--out", s(&abl)], TINY));
    // Header, separator, 4 strategies x 2 scenes, 4 mean rows.
    assert_eq!(stdout.lines().count(), 2 + 8 + 4, "{stdout}");
    assert!(stdout.contains("| mean | full |"));
}

#[test]
fn usage_errors_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = splat(&["sweep-threshold", "--out", s(tmp.path())], TINY);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no sweep cells"));

    let out = splat(&["train", "--out", s(tmp.path())], &["train.iterations=oops"]);
    assert!(!out.status.success());

    let out = splat(&["train", "--out", s(tmp.path())], &["train.no_such_key=1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    let out = splat(&["sweep-threshold", "--out", s(tmp.path()), "--cell", "best@1"], TINY);
    assert!(!out.status.success());
}
