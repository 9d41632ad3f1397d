#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn grla(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grla"))
        .args(args)
        .env("GRLA_THREADS", "1")
        .output()
        .expect("spawn grla")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub fn repo_configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// A small synthetic experiment: 16×16 images, compact extractor.
pub fn tiny_config(n_per_class: usize, epochs: usize, extra_top: &str) -> String {
    format!(
        r#"seed = 3
protocol = "dann"
source = ["synth_source"]
target = "synth_target"
stain_norm = false
{extra_top}

[data.synth]
n_per_class = {n_per_class}
image_size = [3, 16, 16]
domains = [
    {{ name = "synth_source", preset = "source" }},
    {{ name = "synth_target", preset = "target" }},
]

[model]
input_shape = [3, 16, 16]
feature_dim = 16
stages = [{{ filters = 4, blocks = 1, stride = 2 }}, {{ filters = 8, blocks = 1, stride = 2 }}]

[train]
batch_size = 16
epochs = {epochs}
"#
    )
}

pub fn write(path: &Path, text: &str) -> PathBuf {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).unwrap();
    }
    std::fs::write(path, text).unwrap();
    path.to_path_buf()
}

/// Trains the tiny config into `dir/run` and returns the checkpoint path.
pub fn trained(dir: &Path) -> PathBuf {
    let cfg = write(&dir.join("tiny.toml"), &tiny_config(20, 2, ""));
    let out = dir.join("run");
    let o = grla(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out.join("model.grla")
}

pub fn save_png(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).unwrap();
    }
    image::RgbImage::from_fn(w, h, |x, y| image::Rgb(f(x, y))).save(path).unwrap();
}
