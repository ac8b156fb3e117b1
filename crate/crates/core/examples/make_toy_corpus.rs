//! Regenerates the bundled datasets under `data/`.
//!
//! `cargo run -p codesum-core --example make_toy_corpus -- data`

use std::path::PathBuf;

use codesum::corpus::write_dataset;
use codesum::toy::{fig5_sample, toy_corpus, TOY_SEED, TOY_SIZE};

fn main() -> codesum::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data".into()));
    write_dataset(&dir.join("toy.jsonl"), &toy_corpus(TOY_SIZE, TOY_SEED))?;
    write_dataset(&dir.join("fig5.jsonl"), &[fig5_sample()])?;
    Ok(())
}
