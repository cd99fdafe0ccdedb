#![allow(dead_code)]

use std::path::Path;

use stillguard_harness::ExperimentConfig;

/// A 16×16×4 setup that trains in about a second and attacks in a few
/// iterations. Only plumbing is exercised; the numbers mean nothing.
pub fn tiny_toml(out: &Path) -> String {
    format!(
        r#"
seed = 3
[output]
dir = "{}"
run_id = "tiny"
[model]
height = 16
width = 16
frames = 4
[training]
dataset_size = 4
vae_epochs = 2
dit_epochs = 3
[evaluation]
images = 2
[attack]
iterations = 4
[sweep]
epsilons = [8, 2, 8]
"#,
        out.display()
    )
}

pub fn tiny_config(out: &Path) -> ExperimentConfig {
    ExperimentConfig::from_toml(&tiny_toml(out), Path::new("tiny.toml")).unwrap()
}

/// Writes the tiny config to `dir/tiny.toml` and returns its path.
pub fn write_tiny_config(dir: &Path, out: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, tiny_toml(out)).unwrap();
    path
}
