//! On-disk corpus layout written by `synth`.
//!
//! ```text
//! <dir>/config.toml     full configuration used to synthesize
//! <dir>/manifest.tsv    id, split, audio flag, tokens, sequence path
//! <dir>/seq/NNNNNN.sgsq one keypoint sequence per sample
//! ```
//!
//! The corpus is a pure function of the configuration, so loading
//! regenerates it and checks every manifest row and sequence file against
//! the regenerated samples.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::Config;
use crate::data::Corpus;
use crate::error::{io_err, Result, SignError};
use crate::seqfile::{encode_sequence, read_sequence, write_sequence};

pub const MANIFEST_HEADER: &str = "id\tsplit\taudio\ttokens\tpath";

fn split_name(corpus: &Corpus, id: usize) -> &'static str {
    if corpus.split.test.contains(&id) {
        "test"
    } else if corpus.split.dev.contains(&id) {
        "dev"
    } else {
        "train"
    }
}

fn seq_path(id: usize) -> String {
    format!("seq/{id:06}.sgsq")
}

pub fn manifest_text(corpus: &Corpus) -> String {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for s in &corpus.samples {
        let toks: Vec<String> = s.tokens.ids().iter().map(usize::to_string).collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            s.id,
            split_name(corpus, s.id),
            u8::from(s.audio.is_some()),
            toks.join(" "),
            seq_path(s.id)
        );
    }
    out
}

pub fn write_corpus(cfg: &Config, corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("seq")).map_err(io_err(dir))?;
    let cfg_path = dir.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(io_err(&cfg_path))?;
    let man = dir.join("manifest.tsv");
    std::fs::write(&man, manifest_text(corpus)).map_err(io_err(&man))?;
    for s in &corpus.samples {
        write_sequence(&s.sign, &dir.join(seq_path(s.id)))?;
    }
    Ok(())
}

/// Regenerates the corpus described by `dir/config.toml` and verifies it
/// against the stored manifest and sequence files.
pub fn load_corpus(dir: &Path) -> Result<(Config, Corpus)> {
    let cfg = Config::load(&dir.join("config.toml"))?;
    let corpus = Corpus::generate(&cfg)?;
    let man = dir.join("manifest.tsv");
    let text = std::fs::read_to_string(&man).map_err(io_err(&man))?;
    if text != manifest_text(&corpus) {
        return Err(SignError::Config(format!(
            "{} does not match the corpus its config.toml produces",
            man.display()
        )));
    }
    for s in &corpus.samples {
        let path = dir.join(seq_path(s.id));
        let stored = read_sequence(&path)?;
        if encode_sequence(&stored) != encode_sequence(&s.sign) {
            return Err(SignError::Config(format!("{} differs from the synthesized sample", path.display())));
        }
    }
    Ok((cfg, corpus))
}
