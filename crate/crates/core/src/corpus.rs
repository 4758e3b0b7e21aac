//! Caption corpus: one record per image, parsed once into tags and
//! deduplicated compound snippets.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parser::{
    extract_class_tags, parse_captions, tokenize, ClassId, ClassVocabulary, Lexicon, Snippet,
    Token,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: invalid record: {source}")]
    Malformed {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("duplicate image id {0:?}")]
    DuplicateImageId(String),
}

/// One line of a caption corpus file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CaptionRecord {
    pub image_id: String,
    pub captions: Vec<String>,
}

/// Reads a JSON-lines caption corpus.
pub fn read_caption_corpus(path: &Path) -> Result<Vec<CaptionRecord>, CorpusError> {
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CaptionRecord =
            serde_json::from_str(&line).map_err(|source| CorpusError::Malformed {
                path: path.to_path_buf(),
                line: idx + 1,
                source,
            })?;
        if !seen.insert(record.image_id.clone()) {
            return Err(CorpusError::DuplicateImageId(record.image_id));
        }
        records.push(record);
    }
    Ok(records)
}

/// Writes a JSON-lines caption corpus.
pub fn write_caption_corpus(
    records: &[CaptionRecord],
    out: &mut impl Write,
) -> std::io::Result<()> {
    for record in records {
        serde_json::to_writer(&mut *out, record)?;
        writeln!(out)?;
    }
    Ok(())
}

/// An image's captions reduced to what training and inference consume.
#[derive(Debug, Clone)]
pub struct ParsedImage {
    pub image_id: String,
    pub captions: Vec<String>,
    /// Word runs per caption (sentence boundaries split runs), for
    /// contiguous containment checks.
    word_runs: Vec<Vec<String>>,
    /// Classes considered present in the image.
    pub tags: BTreeSet<ClassId>,
    /// Compound snippets, deduplicated by token sequence.
    pub compounds: Vec<Snippet>,
}

impl ParsedImage {
    pub fn parse(record: &CaptionRecord, vocab: &ClassVocabulary, lexicon: &Lexicon) -> Self {
        let tags = extract_class_tags(&record.captions, vocab, lexicon);
        let mut seen = BTreeSet::new();
        let compounds = parse_captions(&record.captions, vocab, lexicon)
            .into_iter()
            .filter(|s| seen.insert(s.text()))
            .collect();
        let word_runs = record
            .captions
            .iter()
            .flat_map(|caption| {
                let tokens = tokenize(caption, lexicon);
                tokens
                    .split(|t| matches!(t, Token::Boundary))
                    .map(|run| {
                        run.iter()
                            .filter_map(|t| t.as_word().map(str::to_string))
                            .collect::<Vec<_>>()
                    })
                    .filter(|run| !run.is_empty())
                    .collect::<Vec<_>>()
            })
            .collect();
        ParsedImage {
            image_id: record.image_id.clone(),
            captions: record.captions.clone(),
            word_runs,
            tags,
            compounds,
        }
    }

    /// True when the token sequence occurs contiguously in any caption.
    pub fn captions_contain(&self, tokens: &[String]) -> bool {
        if tokens.is_empty() {
            return false;
        }
        self.word_runs.iter().any(|run| {
            run.len() >= tokens.len() && run.windows(tokens.len()).any(|w| w == tokens)
        })
    }
}

/// Parses every record of a corpus.
pub fn parse_corpus(
    records: &[CaptionRecord],
    vocab: &ClassVocabulary,
    lexicon: &Lexicon,
) -> Vec<ParsedImage> {
    records
        .iter()
        .map(|r| ParsedImage::parse(r, vocab, lexicon))
        .collect()
}
