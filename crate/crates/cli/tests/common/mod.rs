#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub const SMALL: &str = r#"
seed = 3
horizons = [0.5, 1.0]

[data]
window_stride = 4

[data.synthesis]
n = 4
horizon = 24

[data.test_synthesis]
n = 2

[model]
t_his = 6
t_fut = 10

[model.encoder]
hidden = 4
proj_width = 4

[model.interaction]
embed = 4
heads = 1
ffn = 4
stream_hidden = 4

[model.denoiser]
channels = [2, 4]
time_embed = 4
groups = 1

[model.diffusion]
steps = 8

[train]
epochs = 1
batch_size = 8
"#;

pub fn followgen(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_followgen"))
        .current_dir(dir)
        .env_remove("FOLLOWGEN_SEED")
        .args(args)
        .output()
        .unwrap()
}

pub fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

pub fn run_pipeline(dir: &Path, out: &str) {
    for cmd in [&["gen-data"][..], &["train"], &["eval"], &["--trace", "sample"]] {
        let args = [&["--config", "small.toml", "--out-dir", out][..], cmd].concat();
        let o = followgen(dir, &args);
        assert!(o.status.success(), "{cmd:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}
