#![allow(dead_code)]

use std::path::{Path, PathBuf};

use mcncl::RunConfig;
use mcncl_core::data::SplitSizes;

pub fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// Tiny model on a tiny synthetic corpus; a few epochs take well under a second.
pub fn small_run(out: &Path) -> RunConfig {
    let mut c = RunConfig::tiny();
    c.out_dir = out.to_path_buf();
    c.train.epochs = 3;
    c.train.batch_size = 16;
    c.data.synthetic.dialogues = SplitSizes {
        train: 6,
        val: 3,
        test: 3,
    };
    c.data.synthetic.utterances = [4, 8];
    c.data.synthetic.frames = [3, 7];
    c
}
