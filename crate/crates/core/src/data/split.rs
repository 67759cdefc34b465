use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::vocab::LabelVocabulary;

/// Unseen label names, one per line; blank lines are ignored.
pub fn parse_split(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

/// Applies the split file at `path` to `vocab`.
pub fn load_split(path: impl AsRef<Path>, vocab: LabelVocabulary) -> Result<LabelVocabulary> {
    vocab.with_unseen(&parse_split(&fs::read_to_string(path)?))
}

pub fn save_split(path: impl AsRef<Path>, vocab: &LabelVocabulary) -> Result<()> {
    let mut text = vocab.unseen_names().join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}
