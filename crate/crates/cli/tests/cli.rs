mod common;

use common::*;
use seasight::io::{read_image, write_depth, write_image, Netpbm};
use seasight::imaging::DepthMap;
use seasight::trainer::{psnr, CSV_HEADER};
use seasight::Grid;

#[test]
fn goldens_match() {
    check_goldens().unwrap();
}

#[test]
fn exit_code_table() {
    check_exit_codes().unwrap();
}

#[test]
fn zero_attenuation_reproduces_the_clear_image() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("h.ppm");
    let o = run(&[
        "synth",
        "--clear",
        fixture("clear.ppm").to_str().unwrap(),
        "--depth",
        fixture("depth.pgm").to_str().unwrap(),
        "--beta",
        "0,0,0",
        "--bg",
        "0.7,0.8,0.9",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(fixture("clear.ppm")).unwrap());
}

#[test]
fn uniform_depth_prints_exp_minus_one() {
    let dir = tempfile::tempdir().unwrap();
    let depth = dir.path().join("d.pgm");
    let clear = dir.path().join("c.ppm");
    write_depth(&depth, &DepthMap::new(Grid::filled(1, 4, 4, 2.0)).unwrap(), 1e-3).unwrap();
    write_image(&clear, &Grid::filled(3, 4, 4, 0.5), 255).unwrap();
    let o = run(&[
        "synth",
        "--clear",
        clear.to_str().unwrap(),
        "--depth",
        depth.to_str().unwrap(),
        "--beta",
        "0.5,0.5,0.5",
        "--bg",
        "0.6,0.7,0.8",
        "--out",
        dir.path().join("h.ppm").to_str().unwrap(),
    ]);
    assert!(o.status.success());
    // exp(-1) to six places
    assert_eq!(stdout(&o).trim(), "mean transmission: 0.367879 0.367879 0.367879");
}

#[test]
fn mismatched_depth_size_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let depth = dir.path().join("d.pgm");
    write_depth(&depth, &DepthMap::new(Grid::filled(1, 4, 4, 1.0)).unwrap(), 1e-3).unwrap();
    let o = run(&[
        "synth",
        "--clear",
        fixture("clear.ppm").to_str().unwrap(),
        "--depth",
        depth.to_str().unwrap(),
        "--beta",
        "1,1,1",
        "--bg",
        "1,1,1",
        "--out",
        dir.path().join("h.ppm").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn dehazing_beats_the_hazy_input_on_the_reference_fixture() {
    let truth = read_image(&fixture("clear.ppm")).unwrap();
    let hazy = read_image(&golden("hazy.ppm")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for patch in ["7", "15"] {
        let out = dir.path().join(format!("j{patch}.ppm"));
        let o = run(&["dehaze", "--in", golden("hazy.ppm").to_str().unwrap(), "--patch", patch, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        let j = read_image(&out).unwrap();
        let (pj, ph) = (psnr(&j, &truth).unwrap(), psnr(&hazy, &truth).unwrap());
        assert!(pj >= ph, "patch {patch}: dehazed {pj:.2} dB vs hazy {ph:.2} dB");
    }
}

#[test]
fn constant_image_dehazes_to_itself() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("c.ppm");
    write_image(&input, &Grid::filled(3, 6, 6, 0.6), 255).unwrap();
    let (out, t) = (dir.path().join("j.ppm"), dir.path().join("t.pgm"));
    let o = run(&[
        "dehaze",
        "--in",
        input.to_str().unwrap(),
        "--patch",
        "3",
        "--omega",
        "0.8",
        "--out",
        out.to_str().unwrap(),
        "--save-t",
        t.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&input).unwrap());
    // t = 1 - omega = 0.2, stored as 0.2 * 255 = 51
    assert!(Netpbm::read(&t).unwrap().samples.iter().all(|&s| s == 51));
    assert!(stdout(&o).starts_with("background light: 0.600000 0.600000 0.600000"));
}

#[test]
fn identity_warp_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["shape.pgm", "clear.ppm"] {
        let out = dir.path().join(name);
        let o = run(&["warp", "--in", fixture(name).to_str().unwrap(), "--theta", "1,0,0,0,1,0,0,0", "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(fixture(name)).unwrap());
    }
}

#[test]
fn one_pixel_translation() {
    let src = Netpbm::read(&fixture("shape.pgm")).unwrap();
    let w = src.width;
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.pgm");
    let theta = format!("1,0,{},0,1,0,0,0", 2.0 / (w - 1) as f64);
    let o = run(&["warp", "--in", fixture("shape.pgm").to_str().unwrap(), "--theta", &theta, "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let got = Netpbm::read(&out).unwrap();
    for y in 0..src.height {
        for x in 0..w {
            // target column x samples source column x + 1; beyond the edge is zero
            let want = if x + 1 < w { src.samples[y * w + x + 1] } else { 0 };
            assert_eq!(got.samples[y * w + x], want, "({y}, {x})");
        }
    }
}

#[test]
fn horizon_crossing_reports_singular_transform() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("w.pgm");
    let o = run(&["warp", "--in", fixture("shape.pgm").to_str().unwrap(), "--theta", "1,0,0,0,1,0,0,-1.5", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("singular transform"));
    assert!(!out.exists());
}

#[test]
fn gradcheck_single_seed_passes() {
    let o = run(&["gradcheck", "--seeds", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("all 9 operations"));
}

#[test]
fn zero_epoch_training_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# smoke run\nepochs = 0\nimage_size = 16\nn_images = 2\n").unwrap();
    let o = run(&["train-deblur", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap(), format!("{CSV_HEADER}\n"));
    let weights = std::fs::read(dir.path().join("weights.dsow")).unwrap();
    assert_eq!(&weights[..4], b"DSOW");
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "epochs = 1\nlearning_rte = 0.1\n").unwrap();
    let o = run(&["train-deblur", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("learning_rte"));
    std::fs::write(&cfg, "epochs = 1\nlearning_rate = -1\n").unwrap();
    let o = run(&["train-deblur", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stn_demo_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "profile = shapes\nepochs = 2\nimage_size = 16\nn_images = 12\nbatch_size = 4\n").unwrap();
    let mut csvs = Vec::new();
    for run_dir in ["a", "b"] {
        let out = dir.path().join(run_dir);
        let o = run(&["stn-demo", "--mode", "perspective", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        csvs.push((std::fs::read(out.join("metrics.csv")).unwrap(), std::fs::read(out.join("weights.dsow")).unwrap()));
    }
    assert_eq!(csvs[0], csvs[1]);
    assert_eq!(String::from_utf8_lossy(&csvs[0].0).lines().count(), 3);
}
