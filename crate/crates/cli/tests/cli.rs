mod common;

use std::path::Path;

use common::*;
use grla_cli::config::ExperimentConfig;
use grla_cli::exit;
use tempfile::tempdir;

#[test]
fn shipped_configs_validate() {
    let dir = repo_configs();
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path, None).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_eq!(cfg.train.epochs, 30);
            n += 1;
        }
    }
    assert_eq!(n, 5);
}

#[test]
fn misspelled_key_exits_2_and_names_it() {
    let dir = tempdir().unwrap();
    let text = tiny_config(20, 1, "").replace("epochs = 1", "epochs = 1\nlamda_kind = \"none\"");
    let cfg = write(&dir.path().join("bad.toml"), &text);
    let o = grla(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), i32::from(exit::CONFIG));
    assert!(stderr(&o).contains("lamda_kind"), "{}", stderr(&o));
}

#[test]
fn conflicting_nested_seed_is_a_config_error() {
    let dir = tempdir().unwrap();
    let text = tiny_config(20, 1, "").replace("batch_size = 16", "batch_size = 16\nseed = 9");
    let cfg = write(&dir.path().join("seed.toml"), &text);
    let o = grla(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), i32::from(exit::CONFIG));
    assert!(stderr(&o).contains("train.seed"), "{}", stderr(&o));
}

#[test]
fn missing_output_dir_is_a_config_error() {
    let dir = tempdir().unwrap();
    let cfg = write(&dir.path().join("c.toml"), &tiny_config(20, 1, ""));
    let o = grla(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), i32::from(exit::CONFIG));
}

#[test]
fn missing_artifacts_exit_4() {
    let dir = tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(empty.join("sparse")).unwrap();
    let o = grla(&["eval", "--checkpoint", s(&dir.path().join("nope.grla")), "--data", s(&empty), "--out", s(dir.path())]);
    assert_eq!(code(&o), i32::from(exit::MISSING_ARTIFACT), "{}", stderr(&o));

    let ckpt = trained(dir.path());
    let o = grla(&["eval", "--checkpoint", s(&ckpt), "--data", s(&empty), "--preset", "synth", "--out", s(dir.path())]);
    assert_eq!(code(&o), i32::from(exit::MISSING_ARTIFACT), "{}", stderr(&o));
}

#[test]
fn train_writes_every_artifact() {
    let dir = tempdir().unwrap();
    let ckpt = trained(dir.path());
    let run = ckpt.parent().unwrap();
    for f in ["model.grla", "manifest.jsonl", "metrics.csv", "config.toml", "checkpoints/best.grla", "checkpoints/last_good.grla"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("split,domain,n,accuracy,precision,recall,f1"));
    assert_eq!(metrics.lines().count(), 1 + 4);
    let manifest = std::fs::read_to_string(run.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 2);
    // The written config reloads to the same experiment.
    let again = ExperimentConfig::load(&run.join("config.toml"), None).unwrap();
    let first = ExperimentConfig::load(&dir.path().join("tiny.toml"), None).unwrap();
    assert_eq!(again, first);
}

#[test]
fn rerunning_train_is_byte_identical() {
    let dir = tempdir().unwrap();
    let cfg = write(&dir.path().join("c.toml"), &tiny_config(20, 2, ""));
    let mut outs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("r{k}"));
        let o = grla(&["train", "--config", s(&cfg), "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        outs.push(out);
    }
    for f in ["model.grla", "metrics.csv", "manifest.jsonl"] {
        assert_eq!(std::fs::read(outs[0].join(f)).unwrap(), std::fs::read(outs[1].join(f)).unwrap(), "{f}");
    }
    let other = dir.path().join("seed4");
    grla(&["train", "--config", s(&cfg), "--seed-override", "4", "--out", s(&other)]);
    assert_ne!(std::fs::read(outs[0].join("model.grla")).unwrap(), std::fs::read(other.join("model.grla")).unwrap());
}

#[test]
fn eval_and_ensemble_on_config_splits() {
    let dir = tempdir().unwrap();
    let ckpt = trained(dir.path());
    let cfg = dir.path().join("tiny.toml");
    let out = dir.path().join("eval");
    let o = grla(&["eval", "--checkpoint", s(&ckpt), "--config", s(&cfg), "--split", "val", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(m.lines().count(), 3);
    assert!(m.lines().skip(1).all(|l| l.starts_with("val,")));

    // Eval of the trained model on test matches the rows train wrote.
    let o = grla(&["eval", "--checkpoint", s(&ckpt), "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    let evald = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let trained_rows = std::fs::read_to_string(ckpt.parent().unwrap().join("metrics.csv")).unwrap();
    for line in evald.lines().skip(1) {
        assert!(trained_rows.contains(line), "{line}");
    }

    // A one-member ensemble reproduces the single model.
    let ens = dir.path().join("ens");
    let o = grla(&["ensemble", "--checkpoint", s(&ckpt), "--config", s(&cfg), "--out", s(&ens)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(ens.join("metrics.csv")).unwrap(), evald);
}

#[test]
fn synth_then_crossdomain_fills_every_cell() {
    let dir = tempdir().unwrap();
    let ckpt = trained(dir.path());
    let data = dir.path().join("data");
    let o = grla(&["synth", "--out", s(&data), "--n-per-class", "6", "--size", "16", "--seed", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for d in ["synth_source", "synth_auxiliary", "synth_target"] {
        for c in ["sparse", "dense"] {
            assert_eq!(std::fs::read_dir(data.join(d).join(c)).unwrap().count(), 6, "{d}/{c}");
        }
    }
    let copy = data.join("synth_copy");
    for c in ["sparse", "dense"] {
        std::fs::create_dir_all(copy.join(c)).unwrap();
        for e in std::fs::read_dir(data.join("synth_source").join(c)).unwrap() {
            let p = e.unwrap().path();
            std::fs::copy(&p, copy.join(c).join(p.file_name().unwrap())).unwrap();
        }
    }
    let out = dir.path().join("xd");
    let models: Vec<String> = ["a", "b", "c", "d"].iter().map(|n| format!("{n}={}", s(&ckpt))).collect();
    let mut args = vec!["crossdomain", "--model"];
    args.extend(models.iter().map(String::as_str));
    let dirs: Vec<String> = ["synth_source", "synth_auxiliary", "synth_target", "synth_copy"]
        .iter()
        .map(|d| s(&data.join(d)).to_string())
        .collect();
    args.push("--data");
    args.extend(dirs.iter().map(String::as_str));
    args.extend(["--out", s(&out)]);
    let o = grla(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("crossdomain.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 16);
    // Identical models give identical rows; a copied dataset scores like its original.
    let acc: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    for row in acc.chunks(4) {
        assert_eq!(row[0][3], row[3][3]);
        assert_eq!(row.iter().map(|r| r[3]).collect::<Vec<_>>(), acc[..4].iter().map(|r| r[3]).collect::<Vec<_>>());
    }
    let img = image::open(out.join("crossdomain.png")).unwrap();
    assert_eq!((img.width(), img.height()), (4 * 49 + 1, 4 * 49 + 1));
}

#[test]
fn stain_normalize_mirrors_the_tree() {
    let dir = tempdir().unwrap();
    let input = dir.path().join("in");
    let reference = dir.path().join("ref");
    save_png(&input.join("a/one.png"), 12, 10, |x, y| [(x * 20) as u8, 90, (y * 25) as u8]);
    save_png(&input.join("a/b/two.png"), 7, 9, |x, y| [200, (x * 30) as u8, (y * 20) as u8]);
    image::RgbImage::from_fn(8, 8, |x, y| image::Rgb([(x * 30) as u8, (y * 30) as u8, 128]))
        .save(input.join("three.bmp"))
        .unwrap();
    save_png(&reference.join("r.png"), 16, 16, |x, y| [230 - (x * 5) as u8, 120 + (y * 3) as u8, 200]);
    let out = dir.path().join("out");
    let o = grla(&["stain-normalize", "--input", s(&input), "--reference", s(&reference), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for (rel, w, h) in [("a/one.png", 12, 10), ("a/b/two.png", 7, 9), ("three.bmp", 8, 8)] {
        let img = image::open(out.join(rel)).unwrap();
        assert_eq!((img.width(), img.height()), (w, h), "{rel}");
    }
    assert!(out.join("reference_stats.toml").is_file());
    assert!(out.join("input_stats.toml").is_file());

    // Stats written once can serve as the reference.
    let out2 = dir.path().join("out2");
    let o = grla(&[
        "stain-normalize",
        "--input",
        s(&input),
        "--reference",
        s(&out.join("reference_stats.toml")),
        "--out",
        s(&out2),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(out.join("a/one.png")).unwrap(), std::fs::read(out2.join("a/one.png")).unwrap());
}

#[test]
fn degenerate_stain_reference_exits_5() {
    let dir = tempdir().unwrap();
    let input = dir.path().join("in");
    save_png(&input.join("x.png"), 4, 4, |x, y| [(x * 40) as u8, (y * 40) as u8, 10]);
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let gray = dir.path().join("gray");
    save_png(&gray.join("g.png"), 4, 4, |_, _| [128, 128, 128]);
    for reference in [&empty, &gray] {
        let o = grla(&["stain-normalize", "--input", s(&input), "--reference", s(reference), "--out", s(&dir.path().join("o"))]);
        assert_eq!(code(&o), i32::from(exit::DEGENERATE_REFERENCE), "{}", stderr(&o));
    }
}

fn read_grlt(path: &Path) -> Vec<f64> {
    let t = grla_core::attribution::read_raw(std::fs::File::open(path).unwrap()).unwrap();
    assert_eq!(t.shape(), [3, 16, 16]);
    t.data().to_vec()
}

#[test]
fn attribute_writes_maps_and_reports_the_gap() {
    let dir = tempdir().unwrap();
    let ckpt = trained(dir.path());
    let img = dir.path().join("x.png");
    save_png(&img, 16, 16, |x, y| [(x * 15) as u8, 120, (y * 15) as u8]);
    for (steps, baseline) in [("32", "channel"), ("1", "pixel")] {
        let prefix = dir.path().join(format!("maps/x{steps}"));
        let o = grla(&["attribute", "--checkpoint", s(&ckpt), "--image", s(&img), "--out", s(&prefix), "--steps", steps, "--baseline", baseline]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("completeness_gap"), "{}", stdout(&o));
        for suffix in ["_gray.png", "_overlay.png"] {
            let p = dir.path().join(format!("maps/x{steps}{suffix}"));
            let m = image::open(&p).unwrap();
            assert_eq!((m.width(), m.height()), (16, 16));
        }
        let values = read_grlt(&dir.path().join(format!("maps/x{steps}.grlt")));
        assert!(values.iter().all(|v| v.is_finite()));
    }

    // Attributing an image against itself gives exact zeros.
    let prefix = dir.path().join("self");
    let o = grla(&["attribute", "--checkpoint", s(&ckpt), "--image", s(&img), "--out", s(&prefix), "--baseline", s(&img), "--class", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(read_grlt(&dir.path().join("self.grlt")).iter().all(|&v| v == 0.0));
}

#[test]
fn attribute_rejects_a_wrong_size_image() {
    let dir = tempdir().unwrap();
    let ckpt = trained(dir.path());
    let img = dir.path().join("big.png");
    save_png(&img, 20, 16, |_, _| [10, 20, 30]);
    let o = grla(&["attribute", "--checkpoint", s(&ckpt), "--image", s(&img), "--out", s(&dir.path().join("a"))]);
    assert_eq!(code(&o), i32::from(exit::SHAPE), "{}", stderr(&o));
}

#[test]
fn verify_passes_and_catches_injected_leaks() {
    let dir = tempdir().unwrap();
    let cfg = write(&dir.path().join("v.toml"), &tiny_config(40, 2, ""));
    let out = dir.path().join("v");
    let o = grla(&["verify", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), i32::from(exit::OK), "{}\n{}", stdout(&o), stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("verify_report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);

    for (leak, failing) in [("soft-mask", "experiment A"), ("unmasked", "experiment B")] {
        let o = grla(&["verify", "--config", s(&cfg), "--out", s(&out), "--inject-leak", leak]);
        assert_eq!(code(&o), i32::from(exit::VERIFICATION_FAILED), "{leak}: {}", stdout(&o));
        let line = stdout(&o).lines().find(|l| l.contains(failing)).unwrap().to_string();
        assert!(line.contains("FAIL"), "{leak}: {line}");
    }
}

#[test]
fn ensemble_protocol_trains_one_member_per_source() {
    let dir = tempdir().unwrap();
    let text = tiny_config(20, 1, "")
        .replace("protocol = \"dann\"", "protocol = \"ensemble\"")
        .replace("source = [\"synth_source\"]", "source = [\"synth_source\", \"synth_aux\"]")
        .replace(
            "{ name = \"synth_target\", preset = \"target\" }",
            "{ name = \"synth_aux\", preset = \"auxiliary\" },\n    { name = \"synth_target\", preset = \"target\" }",
        );
    let cfg = write(&dir.path().join("e.toml"), &text);
    let out = dir.path().join("e");
    let o = grla(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for m in ["synth_source", "synth_aux"] {
        assert!(out.join("members").join(m).join("model.grla").is_file());
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.contains("synth_target@ensemble"));
    assert!(metrics.contains("synth_target@synth_aux"));
}

#[test]
fn repro_writes_an_annotated_summary() {
    let dir = tempdir().unwrap();
    let configs = dir.path().join("configs");
    for arm in grla_cli::repro::ARMS {
        let text = std::fs::read_to_string(repo_configs().join(format!("{arm}.toml"))).unwrap();
        write(&configs.join(format!("{arm}.toml")), &text.replace("n_per_class = 500", "n_per_class = 30"));
    }
    let out = dir.path().join("repro");
    let o = grla(&["repro", "--configs", s(&configs), "--out", s(&out), "--epochs", "1"]);
    assert!([0, 1].contains(&code(&o)), "{}", stderr(&o));
    let txt = std::fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(txt.contains("paper-scale, not reproduced here"));
    assert!(txt.contains("0.9556"));
    assert_eq!(txt.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).count(), 2);
    let csv = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 7);
}
