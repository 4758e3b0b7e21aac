//! Caption parsing: tokenization, snippet segmentation and classification,
//! and class-tag retrieval.
//!
//! Captions are cut into *compound concepts* at sentence boundaries,
//! prepositions and verbs. A compound that contains a class name (or its
//! plural) is *class related*; otherwise it is *class unrelated*. Class-name
//! snippets themselves are enumerated straight from the vocabulary.
//!
//! Word lists are data, not code: see [`Lexicon::builtin`] for the lists
//! shipped with the crate and [`Lexicon::from_dir`] for user-supplied ones.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Identifier of a segmentation class. Ids are contiguous from 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClassId(pub usize);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A token produced by [`tokenize`]: either a word or a sentence boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Token {
    Word(String),
    /// Marks a sentence delimiter. Never part of a snippet.
    Boundary,
}

impl Token {
    pub fn word(s: &str) -> Self {
        Token::Word(s.to_string())
    }

    pub fn as_word(&self) -> Option<&str> {
        match self {
            Token::Word(w) => Some(w),
            Token::Boundary => None,
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Word(w) => write!(f, "{w}"),
            Token::Boundary => write!(f, "⟨EOS⟩"),
        }
    }
}

/// The kind of a parsed snippet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SnippetKind {
    /// A class name form straight from the vocabulary.
    ClassName(ClassId),
    /// A compound concept containing at least one class name.
    ClassRelatedCompound(BTreeSet<ClassId>),
    /// A compound concept with no class name inside.
    ClassUnrelatedCompound,
}

impl SnippetKind {
    /// Class ids this snippet refers to (empty for unrelated compounds).
    pub fn class_ids(&self) -> BTreeSet<ClassId> {
        match self {
            SnippetKind::ClassName(id) => BTreeSet::from([*id]),
            SnippetKind::ClassRelatedCompound(ids) => ids.clone(),
            SnippetKind::ClassUnrelatedCompound => BTreeSet::new(),
        }
    }

    pub fn is_compound(&self) -> bool {
        !matches!(self, SnippetKind::ClassName(_))
    }
}

/// A classified caption fragment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snippet {
    pub tokens: Vec<String>,
    pub kind: SnippetKind,
    /// Index of the caption the snippet was cut from; `None` for snippets
    /// enumerated from the vocabulary.
    pub source_caption: Option<usize>,
}

impl Snippet {
    /// Tokens joined by single spaces, used for deduplication and slugs.
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

// ---------------------------------------------------------------------------
// Lexicon
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("word {word:?} appears in both the {first} and {second} lists")]
    Overlap {
        word: String,
        first: &'static str,
        second: &'static str,
    },
    #[error("lexicon entry {0:?} is not lowercase")]
    NotLowercase(String),
    #[error("the {0} list must not be empty")]
    EmptyList(&'static str),
}

/// Word lists that drive snippet segmentation.
///
/// Prepositions and verbs act as snippet delimiters, articles are excluded
/// from compound word counts, and sentence delimiters end snippets at
/// tokenization time.
#[derive(Debug, Clone)]
pub struct Lexicon {
    prepositions: BTreeSet<String>,
    verbs: BTreeSet<String>,
    articles: BTreeSet<String>,
    sentence_delimiters: BTreeSet<char>,
}

const DEFAULT_SENTENCE_DELIMITERS: [char; 4] = ['.', '!', '?', ';'];

impl Lexicon {
    pub fn new(
        prepositions: impl IntoIterator<Item = String>,
        verbs: impl IntoIterator<Item = String>,
        articles: impl IntoIterator<Item = String>,
        sentence_delimiters: impl IntoIterator<Item = char>,
    ) -> Result<Self, LexiconError> {
        let lex = Lexicon {
            prepositions: prepositions.into_iter().collect(),
            verbs: verbs.into_iter().collect(),
            articles: articles.into_iter().collect(),
            sentence_delimiters: sentence_delimiters.into_iter().collect(),
        };
        lex.validate()?;
        Ok(lex)
    }

    /// The word lists shipped with the crate.
    pub fn builtin() -> Self {
        let parse = |text: &str| {
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
        };
        Lexicon::new(
            parse(include_str!("../data/lexicon/prepositions.txt")),
            parse(include_str!("../data/lexicon/verbs.txt")),
            parse(include_str!("../data/lexicon/articles.txt")),
            DEFAULT_SENTENCE_DELIMITERS,
        )
        .expect("builtin lexicon must validate")
    }

    /// Loads `prepositions.txt`, `verbs.txt`, `articles.txt` and (optionally)
    /// `delimiters.txt` from a directory, one entry per line.
    pub fn from_dir(dir: &Path) -> Result<Self, LexiconError> {
        let read_list = |name: &str| -> Result<Vec<String>, LexiconError> {
            let path = dir.join(name);
            let text = std::fs::read_to_string(&path)
                .map_err(|source| LexiconError::Io { path, source })?;
            Ok(text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect())
        };
        let delimiters = {
            let path = dir.join("delimiters.txt");
            if path.exists() {
                let text = std::fs::read_to_string(&path)
                    .map_err(|source| LexiconError::Io { path, source })?;
                text.lines()
                    .filter_map(|l| l.trim().chars().next())
                    .collect::<Vec<char>>()
            } else {
                DEFAULT_SENTENCE_DELIMITERS.to_vec()
            }
        };
        Lexicon::new(
            read_list("prepositions.txt")?,
            read_list("verbs.txt")?,
            read_list("articles.txt")?,
            delimiters,
        )
    }

    fn validate(&self) -> Result<(), LexiconError> {
        if self.prepositions.is_empty() {
            return Err(LexiconError::EmptyList("preposition"));
        }
        if self.articles.is_empty() {
            return Err(LexiconError::EmptyList("article"));
        }
        let lists: [(&'static str, &BTreeSet<String>); 3] = [
            ("preposition", &self.prepositions),
            ("verb", &self.verbs),
            ("article", &self.articles),
        ];
        for (name, set) in &lists {
            for word in set.iter() {
                if word.chars().any(|c| c.is_uppercase()) {
                    return Err(LexiconError::NotLowercase(word.clone()));
                }
                let _ = name;
            }
        }
        for i in 0..lists.len() {
            for j in (i + 1)..lists.len() {
                if let Some(word) = lists[i].1.intersection(lists[j].1).next() {
                    return Err(LexiconError::Overlap {
                        word: word.clone(),
                        first: lists[i].0,
                        second: lists[j].0,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn is_article(&self, word: &str) -> bool {
        self.articles.contains(word)
    }

    /// True for words that end a snippet (prepositions and verbs).
    pub fn is_delimiter_word(&self, word: &str) -> bool {
        self.prepositions.contains(word) || self.verbs.contains(word)
    }

    pub fn is_sentence_delimiter(&self, c: char) -> bool {
        self.sentence_delimiters.contains(&c)
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        Lexicon::builtin()
    }
}

// ---------------------------------------------------------------------------
// Class vocabulary
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum VocabularyError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: expected `class_id<TAB>singular<TAB>plural`")]
    Malformed { line: usize },
    #[error("duplicate class id {0}")]
    DuplicateId(usize),
    #[error("class ids must be contiguous from 0, id {0} is missing")]
    NonContiguous(usize),
    #[error("line {line}: class name form must not be empty")]
    EmptyForm { line: usize },
}

#[derive(Debug, Clone)]
pub struct ClassEntry {
    pub id: ClassId,
    pub singular: String,
    pub plural: String,
    /// Lowercased, hyphen-split token sequences for both forms.
    singular_tokens: Vec<String>,
    plural_tokens: Vec<String>,
}

impl ClassEntry {
    fn new(id: ClassId, singular: &str, plural: &str) -> Self {
        ClassEntry {
            id,
            singular: singular.to_string(),
            plural: plural.to_string(),
            singular_tokens: form_tokens(singular),
            plural_tokens: form_tokens(plural),
        }
    }

    pub fn singular_tokens(&self) -> &[String] {
        &self.singular_tokens
    }

    pub fn plural_tokens(&self) -> &[String] {
        &self.plural_tokens
    }
}

/// Splits a class name form into matchable tokens.
fn form_tokens(form: &str) -> Vec<String> {
    form.to_lowercase()
        .split(|c: char| c.is_whitespace() || c == '-')
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// The classes of interest, each with a singular and a plural form.
///
/// Forms may be multi-word ("parking meter"); they are matched as
/// contiguous token sequences.
#[derive(Debug, Clone, Default)]
pub struct ClassVocabulary {
    entries: Vec<ClassEntry>,
}

impl ClassVocabulary {
    /// Builds a vocabulary from `(singular, plural)` pairs; ids follow the
    /// input order.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let entries = pairs
            .into_iter()
            .enumerate()
            .map(|(i, (s, p))| ClassEntry::new(ClassId(i), s, p))
            .collect();
        ClassVocabulary { entries }
    }

    /// Loads a `class_id<TAB>singular<TAB>plural` file.
    pub fn load(path: &Path) -> Result<Self, VocabularyError> {
        let text = std::fs::read_to_string(path).map_err(|source| VocabularyError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut by_id: BTreeMap<usize, (usize, String, String)> = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (id, singular, plural) = match (parts.next(), parts.next(), parts.next()) {
                (Some(id), Some(s), Some(p)) if parts.next().is_none() => (id, s, p),
                _ => return Err(VocabularyError::Malformed { line: line_no }),
            };
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| VocabularyError::Malformed { line: line_no })?;
            if singular.trim().is_empty() || plural.trim().is_empty() {
                return Err(VocabularyError::EmptyForm { line: line_no });
            }
            if by_id
                .insert(id, (line_no, singular.to_string(), plural.to_string()))
                .is_some()
            {
                return Err(VocabularyError::DuplicateId(id));
            }
        }
        let mut entries = Vec::with_capacity(by_id.len());
        for (expect, (id, (_, singular, plural))) in by_id.into_iter().enumerate() {
            if id != expect {
                return Err(VocabularyError::NonContiguous(expect));
            }
            entries.push(ClassEntry::new(ClassId(id), &singular, &plural));
        }
        Ok(ClassVocabulary { entries })
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ClassId) -> Option<&ClassEntry> {
        self.entries.get(id.0)
    }

    pub fn class_ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.entries.iter().map(|e| e.id)
    }

    /// Class ids whose singular or plural form occurs as a contiguous token
    /// run inside `words`.
    pub fn match_ids(&self, words: &[String]) -> BTreeSet<ClassId> {
        let mut ids = BTreeSet::new();
        for entry in &self.entries {
            for form in [&entry.singular_tokens, &entry.plural_tokens] {
                if form.is_empty() || form.len() > words.len() {
                    continue;
                }
                if words.windows(form.len()).any(|w| w == form.as_slice()) {
                    ids.insert(entry.id);
                    break;
                }
            }
        }
        ids
    }
}

// ---------------------------------------------------------------------------
// Irregular plurals
// ---------------------------------------------------------------------------

/// Overrides for [`pluralize`], keyed by singular form.
#[derive(Debug, Clone, Default)]
pub struct IrregularPlurals {
    map: BTreeMap<String, String>,
}

impl IrregularPlurals {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        IrregularPlurals {
            map: pairs
                .into_iter()
                .map(|(s, p)| (s.to_lowercase(), p.to_lowercase()))
                .collect(),
        }
    }

    /// The irregulars table shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(include_str!("../data/irregular_plurals.txt"))
    }

    /// Loads a `singular<TAB>plural` file.
    pub fn load(path: &Path) -> std::io::Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    fn parse(text: &str) -> Self {
        let pairs = text.lines().filter_map(|line| {
            let mut parts = line.trim().split('\t');
            match (parts.next(), parts.next()) {
                (Some(s), Some(p)) if !s.is_empty() && !p.is_empty() => Some((s, p)),
                _ => None,
            }
        });
        Self::from_pairs(pairs)
    }

    pub fn get(&self, singular: &str) -> Option<&str> {
        self.map.get(singular).map(String::as_str)
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Lowercases a caption and splits it into word tokens and sentence
/// boundaries.
///
/// Hyphens split words, apostrophes are dropped, every other punctuation
/// character separates words. Consecutive boundaries collapse and a caption
/// never starts with one.
pub fn tokenize(caption: &str, lexicon: &Lexicon) -> Vec<Token> {
    let mut tokens: Vec<Token> = Vec::new();
    let mut current = String::new();
    let mut flush = |current: &mut String, tokens: &mut Vec<Token>| {
        if !current.is_empty() {
            tokens.push(Token::Word(std::mem::take(current)));
        }
    };
    for c in caption.chars() {
        if lexicon.is_sentence_delimiter(c) {
            flush(&mut current, &mut tokens);
            if matches!(tokens.last(), Some(Token::Word(_))) {
                tokens.push(Token::Boundary);
            }
        } else if c == '\'' || c == '\u{2019}' {
            // joins: "dog's" -> "dogs"
        } else if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else {
            // whitespace, hyphens and remaining punctuation all separate words
            flush(&mut current, &mut tokens);
        }
    }
    flush(&mut current, &mut tokens);
    tokens
}

/// Splits a token stream into snippet segments at prepositions, verbs and
/// sentence boundaries. Delimiters belong to no segment; empty segments are
/// dropped.
pub fn segment_snippets(tokens: &[Token], lexicon: &Lexicon) -> Vec<Vec<String>> {
    let mut segments = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for token in tokens {
        match token {
            Token::Word(w) if lexicon.is_delimiter_word(w) => {
                if !current.is_empty() {
                    segments.push(std::mem::take(&mut current));
                }
            }
            Token::Word(w) => current.push(w.clone()),
            Token::Boundary => {
                if !current.is_empty() {
                    segments.push(std::mem::take(&mut current));
                }
            }
        }
    }
    if !current.is_empty() {
        segments.push(current);
    }
    segments
}

/// Classifies one segment, or discards it when it has fewer than two
/// non-article words.
pub fn classify_snippet(
    segment: &[String],
    vocab: &ClassVocabulary,
    lexicon: &Lexicon,
) -> Option<SnippetKind> {
    let non_articles = segment.iter().filter(|w| !lexicon.is_article(w)).count();
    if non_articles < 2 {
        return None;
    }
    let ids = vocab.match_ids(segment);
    if ids.is_empty() {
        Some(SnippetKind::ClassUnrelatedCompound)
    } else {
        Some(SnippetKind::ClassRelatedCompound(ids))
    }
}

/// One class-name snippet per (class, form) pair: `2 * |vocab|` snippets.
pub fn enumerate_class_snippets(vocab: &ClassVocabulary) -> Vec<Snippet> {
    let mut snippets = Vec::with_capacity(2 * vocab.len());
    for entry in vocab.entries() {
        snippets.push(Snippet {
            tokens: entry.singular_tokens().to_vec(),
            kind: SnippetKind::ClassName(entry.id),
            source_caption: None,
        });
        snippets.push(Snippet {
            tokens: entry.plural_tokens().to_vec(),
            kind: SnippetKind::ClassName(entry.id),
            source_caption: None,
        });
    }
    snippets
}

/// Classes whose singular or plural occurs in at least one caption.
pub fn extract_class_tags(
    captions: &[String],
    vocab: &ClassVocabulary,
    lexicon: &Lexicon,
) -> BTreeSet<ClassId> {
    let mut tags = BTreeSet::new();
    for caption in captions {
        let tokens = tokenize(caption, lexicon);
        // boundaries break contiguity, so match per word run
        for run in tokens.split(|t| matches!(t, Token::Boundary)) {
            let words: Vec<String> = run
                .iter()
                .filter_map(|t| t.as_word().map(str::to_string))
                .collect();
            tags.extend(vocab.match_ids(&words));
        }
    }
    tags
}

/// Forms the plural of a single word: `-es` after s/x/z/ch/sh, consonant-`y`
/// becomes `-ies`, otherwise `-s`. Irregulars win.
pub fn pluralize(singular: &str, irregulars: &IrregularPlurals) -> String {
    let lower = singular.to_lowercase();
    if let Some(p) = irregulars.get(&lower) {
        return p.to_string();
    }
    if ["s", "x", "z", "ch", "sh"].iter().any(|e| lower.ends_with(e)) {
        return format!("{lower}es");
    }
    if let Some(stem) = lower.strip_suffix('y') {
        let before_y = stem.chars().last();
        let is_vowel = matches!(before_y, Some('a' | 'e' | 'i' | 'o' | 'u'));
        if !is_vowel && before_y.is_some() {
            return format!("{stem}ies");
        }
    }
    format!("{lower}s")
}

/// Compound snippets parsed from an image's captions, in caption order.
pub fn parse_captions(
    captions: &[String],
    vocab: &ClassVocabulary,
    lexicon: &Lexicon,
) -> Vec<Snippet> {
    let mut snippets = Vec::new();
    for (idx, caption) in captions.iter().enumerate() {
        let tokens = tokenize(caption, lexicon);
        for segment in segment_snippets(&tokens, lexicon) {
            if let Some(kind) = classify_snippet(&segment, vocab, lexicon) {
                snippets.push(Snippet {
                    tokens: segment,
                    kind,
                    source_caption: Some(idx),
                });
            }
        }
    }
    snippets
}
