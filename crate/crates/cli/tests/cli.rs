use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "steps": 2,
  "pixels_per_view": 16,
  "encoder.image_size": 16,
  "encoder.patch": 4,
  "encoder.dim": 16,
  "encoder.depth": 1,
  "encoder.heads": 2,
  "volume.dims": [6, 6, 4],
  "volume.channels": 8,
  "render.n_coarse": 8,
  "render.n_fine": 4
}"#;

fn spa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spa")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_tiny(dir: &Path) -> String {
    let p = dir.join("tiny.json");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn help_exits_zero() {
    let o = spa(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["scenes", "pretrain", "render", "gradcheck", "probe", "features", "ablate"] {
        assert!(text.contains(sub), "{sub} missing from usage");
    }
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = spa(&["teleport"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = spa(&["gradcheck", "--fast"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_config_value_exits_two_with_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"mask_ratio": 1.5}"#).unwrap();
    let o = spa(&["pretrain", "--config", cfg.to_str().unwrap(), "--print-config"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.starts_with("error:") && e.contains("mask_ratio"), "{e}");

    fs::write(&cfg, r#"{"encoder.width": 3}"#).unwrap();
    let o = spa(&["pretrain", "--config", cfg.to_str().unwrap(), "--print-config"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("encoder.width"));
}

#[test]
fn printed_config_reloads_identically() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = write_tiny(dir.path());
    let first = spa(&["pretrain", "--config", &tiny, "--print-config"]);
    assert_eq!(first.status.code(), Some(0));
    let printed = dir.path().join("printed.json");
    fs::write(&printed, &first.stdout).unwrap();
    let second = spa(&["pretrain", "--config", printed.to_str().unwrap(), "--print-config"]);
    assert_eq!(first.stdout, second.stdout);
    let text = String::from_utf8_lossy(&first.stdout);
    assert!(text.contains("\"losses.near_threshold\": 0.05"));
    assert!(text.contains("\"losses.free_alpha\": 5.0"));
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = spa(&[
        "pretrain",
        "--data",
        dir.path().join("nowhere").to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nowhere"));
}

#[test]
fn scene_generation_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |name: &str| {
        let out = dir.path().join(name);
        let o = spa(&["scenes", "gen", "--n", "2", "--seed", "5", "--size", "16", "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        out
    };
    let (a, b) = (gen("a"), gen("b"));
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() > 1);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let tiny = write_tiny(dir.path());
    let ok = |o: Output| assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    ok(spa(&["scenes", "gen", "--n", "5", "--seed", "2", "--size", "16", "--out", &p("data")]));
    ok(spa(&["pretrain", "--config", &tiny, "--data", &p("data"), "--out", &p("run")]));
    let ckpt = p("run/final.spac");
    let before = fs::read(&ckpt).unwrap();

    ok(spa(&["render", "--ckpt", &ckpt, "--data", &p("data"), "--scene", "scene0001", "--view", "1", "--out", &p("render")]));
    let rgb = fs::read(dir.path().join("render/rgb.ppm")).unwrap();
    assert!(rgb.starts_with(b"P6\n16 16\n255\n"));
    assert_eq!(fs::read(dir.path().join("render/depth.f32")).unwrap().len(), 16 * 16 * 4);

    ok(spa(&["probe", "pose", "--ckpt", &ckpt, "--data", &p("data"), "--out", &p("probe"), "--pairs", "20"]));
    let j: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("probe/pose_errors.json")).unwrap()).unwrap();
    assert!(j["mean_trans"].as_f64().unwrap().is_finite());
    assert!(j["n"].as_u64().unwrap() > 0);

    ok(spa(&["features", "--ckpt", &ckpt, "--data", &p("data"), "--out", &p("features")]));
    assert!(dir.path().join("features/scene0000_view0.ppm").exists());

    // Nothing above may touch its inputs.
    assert_eq!(fs::read(&ckpt).unwrap(), before);

    let o = spa(&["render", "--ckpt", &ckpt, "--data", &p("data"), "--scene", "nope", "--out", &p("r2")]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ablate_mask_ratio_runs_the_five_row_grid() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = write_tiny(dir.path());
    let out = dir.path().join("abl");
    let o = spa(&["ablate", "--axis", "mask_ratio", "--config", &tiny, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    let ratios: Vec<f64> = rows.iter().map(|r| r.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(ratios, vec![0.0, 0.25, 0.5, 0.75, 0.95]);
}

#[test]
fn ablate_loss_axis_zeroes_disabled_terms() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = write_tiny(dir.path());
    let out = dir.path().join("abl");
    let o = spa(&["ablate", "--axis", "loss", "--config", &tiny, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    for (row, off) in rows.iter().zip(["depth", "color", "semantic"]) {
        assert_eq!(row[0], format!("no_{off}"));
        assert_eq!(row[col(off)], "0");
        assert_eq!(row[col(&format!("gn_{off}"))], "0");
        for on in ["color", "depth", "semantic"].iter().filter(|&&x| x != off) {
            assert!(row[col(&format!("gn_{on}"))].parse::<f64>().unwrap() > 0.0);
        }
    }

    let o = spa(&["ablate", "--axis", "depth", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
