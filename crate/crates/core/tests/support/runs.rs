use std::path::{Path, PathBuf};

use styleprompt::config::RunConfig;
use styleprompt::fixtures::write_overfit_corpus;

pub fn shipped_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// Load a shipped config with its data and output paths redirected into
/// `dir`, writing the overfit fixture corpus there.
pub fn config_in(name: &str, dir: &Path) -> RunConfig {
    let corpus = write_overfit_corpus(&dir.join("data")).unwrap();
    let path = shipped_config(name);
    let text = std::fs::read_to_string(&path).unwrap();
    let text = format!(
        "{text}\npaths.train_manifest = {}\npaths.valid_manifest = {}\npaths.out_dir = {}\n",
        corpus.train_manifest.display(),
        corpus.valid_manifest.display(),
        dir.join("run").display()
    );
    RunConfig::parse_str(&text, path.parent().unwrap(), &path).unwrap()
}
