use std::path::Path;
use std::process::{Command, Output};

fn sdf3d(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdf3d"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = sdf3d(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &str = r#"
seed = 3

[network]
hidden = 16
trunk_layers = 2
color_hidden = 8
pe_x = 2
pe_d = 1
z_shape = 4
z_color = 4

[fit]
iterations = 30
batch = 64

[fit.network]
hidden = 16
trunk_layers = 2
color_hidden = 8
pe_x = 2
pe_d = 1
z_shape = 4
z_color = 4

[train]
disc_channels = 4
checkpoint_every = 100

[train.dataset]
size = 8
resolution = 8

[loss]
n_eik_points = 16
n_surf_points = 8

[[stages]]
iterations = 150
resolution = 8
batch_size = 2
strategy = "coarse+accurate"
delta = 0.3
n_coarse = 6
n_fine = 0

[[stages]]
iterations = 100
resolution = 12
batch_size = 2
strategy = "coarse+accurate"
delta = 0.3
n_coarse = 6
n_fine = 0
lambda_normal = 1.0
beta_floor = 40.0
"#;

fn tiny_config(dir: &Path) {
    std::fs::write(dir.join("tiny.toml"), TINY).unwrap();
}

#[test]
fn render_writes_three_images_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = ["render", "--scene", "sphere", "--azimuth", "0.5", "--size", "24", "--seed", "7"];
    let stdout = ok(d, &args);
    assert!(stdout.contains("sdf queries"), "{stdout}");
    for f in ["render_rgb.png", "render_depth.bin", "render_depth.png", "render_normal.png"] {
        assert!(d.join("out").join(f).exists(), "{f}");
    }
    let first = std::fs::read(d.join("out/render_rgb.png")).unwrap();
    ok(d, &args);
    assert_eq!(first, std::fs::read(d.join("out/render_rgb.png")).unwrap());
    // Thread count does not change the output.
    let mut threaded = args.to_vec();
    threaded.extend(["--threads", "1", "--out", "t1"]);
    ok(d, &threaded);
    assert_eq!(first, std::fs::read(d.join("t1/render_rgb.png")).unwrap());
}

#[test]
fn usage_errors_exit_with_two_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = sdf3d(d, &["render", "--scene", "sphere", "--azimuth", "north"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!d.join("out").exists());
    let out = sdf3d(d, &["render", "--checkpoint", "missing.bin"]);
    assert_eq!(out.status.code(), Some(2));
    let out = sdf3d(d, &["render", "--scene", "teapot"]);
    assert_eq!(out.status.code(), Some(2));
    let out = sdf3d(d, &["render"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!d.join("out").exists());

    std::fs::write(d.join("bad.toml"), "[render]\nbetta = 2\n").unwrap();
    let out = sdf3d(d, &["--config", "bad.toml", "render", "--scene", "sphere"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("betta"));
}

#[test]
fn help_lists_every_key_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(dir.path(), &["--help"]);
    for k in [
        "seed = 0",
        "network.hidden = 256",
        "render.beta = 100.0",
        "loss.lambda_r1 = 10.0",
        "stages[0].n_fine = 16",
        "bench.n_dense = 512",
        "mesh.resolution = 128",
        "fit.iterations = 2000",
    ] {
        assert!(help.contains(k), "missing {k}");
    }
}

#[test]
fn mesh_from_scene_and_fitted_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_config(d);
    ok(d, &["mesh", "--scene", "unit-sphere", "--res", "16", "--out", "scene"]);
    let obj = std::fs::read_to_string(d.join("scene/mesh.obj")).unwrap();
    assert!(obj.lines().filter(|l| l.starts_with("v ")).count() > 50);
    assert!(d.join("scene/mesh.ply").exists());

    ok(d, &["--config", "tiny.toml", "fit", "--out", "fit"]);
    let csv = std::fs::read_to_string(d.join("fit/fit.csv")).unwrap();
    assert_eq!(csv.lines().count(), 31);
    ok(d, &["--config", "tiny.toml", "mesh", "--checkpoint", "fit/fit.bin", "--res", "12", "--out", "m"]);
    assert!(d.join("m/mesh.obj").exists() && d.join("m/mesh.ply").exists());
    // The same checkpoint does not load without the network it was fitted with.
    let out = sdf3d(d, &["mesh", "--checkpoint", "fit/fit.bin", "--res", "12"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bench_reports_three_strategies() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let stdout = ok(d, &["bench", "--scene", "two-spheres", "--beta", "200", "--size", "16", "--frames", "1"]);
    let csv = std::fs::read_to_string(d.join("out/bench.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for s in ["coarse-only", "coarse+fine", "coarse+accurate"] {
        assert!(rows.iter().any(|r| r.contains(s)), "{s}");
        assert!(stdout.contains(s));
    }
}

#[test]
fn train_gan_logs_checkpoints_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_config(d);
    let base = ["--config", "tiny.toml", "train-gan", "--dataset", "synthetic-spheres"];
    let run = |extra: &[&str]| {
        let mut a = base.to_vec();
        a.extend_from_slice(extra);
        ok(d, &a)
    };
    run(&["--iters", "200", "--out", "a"]);
    let csv = std::fs::read_to_string(d.join("a/losses.csv")).unwrap();
    assert_eq!(csv.lines().count(), 201);
    assert!(csv.starts_with("iteration,L_G,L_D,R1,Eikonal,Normal,beta"));
    for f in ["checkpoint.bin", "checkpoint_000100.bin", "checkpoint_000150.bin", "checkpoint_000200.bin"] {
        assert!(d.join("a").join(f).exists(), "{f}");
    }

    // Same seed, same bytes.
    run(&["--iters", "200", "--out", "b"]);
    for f in ["losses.csv", "checkpoint.bin"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap());
    }

    // Resume from iteration 150 (a stage boundary) and match the full run.
    std::fs::create_dir(d.join("c")).unwrap();
    std::fs::copy(d.join("a/losses.csv"), d.join("c/losses.csv")).unwrap();
    run(&["--iters", "200", "--out", "c", "--resume", "a/checkpoint_000150.bin"]);
    assert_eq!(
        std::fs::read(d.join("a/checkpoint.bin")).unwrap(),
        std::fs::read(d.join("c/checkpoint.bin")).unwrap()
    );
    assert_eq!(csv, std::fs::read_to_string(d.join("c/losses.csv")).unwrap());

    // Render the trained generator with a sampled code.
    ok(d, &["--config", "tiny.toml", "render", "--checkpoint", "a/checkpoint.bin", "--code-seed", "1", "--size", "8"]);

    let out = sdf3d(d, &["--config", "tiny.toml", "train-gan", "--dataset", "image-folder"]);
    assert_eq!(out.status.code(), Some(2));
}
