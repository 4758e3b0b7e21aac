//! Word-embedding table and the textual path that maps snippet embeddings
//! into the joint text/pixel space.
//!
//! A snippet's input embedding is the arithmetic mean of the L2-normalized
//! vectors of its non-article, in-vocabulary words. The textual path then
//! applies a single linear map with a residual connection:
//!
//! ```text
//! e_txt = norm(norm(e_w2v) + w_res * norm(M * e_w2v))
//! ```
//!
//! where `norm` is L2 normalization, `M` is a learnable square matrix and
//! `w_res` a scalar hyperparameter.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::parser::{Lexicon, Snippet};

/// Norms below this are treated as zero.
pub const NORM_EPSILON: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed line {0}")]
    MalformedLine(usize),
    #[error("line {line}: expected {expected} values, got {got}")]
    DimMismatch {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("duplicate word {0:?}")]
    DuplicateWord(String),
    #[error("header declares {expected} entries, file has {got}")]
    CountMismatch { expected: usize, got: usize },
}

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("no token of the snippet is in the embedding table")]
    AllTokensOov,
    #[error("embedding collapsed to the zero vector")]
    DegenerateZero,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
}

/// word -> D-dimensional vector dictionary.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    /// Inserts a vector; replaces nothing and fails on duplicates or a
    /// dimension mismatch.
    pub fn insert(&mut self, word: &str, vector: Vec<f64>) -> Result<(), TableError> {
        if vector.len() != self.dim {
            return Err(TableError::DimMismatch {
                line: 0,
                expected: self.dim,
                got: vector.len(),
            });
        }
        if self.vectors.contains_key(word) {
            return Err(TableError::DuplicateWord(word.to_string()));
        }
        self.vectors.insert(word.to_string(), vector);
        Ok(())
    }

    /// Loads a text dump: a `count dim` header line, then one
    /// `word v1 .. v_dim` line per entry.
    pub fn load(path: &Path) -> Result<Self, TableError> {
        let file = std::fs::File::open(path).map_err(|source| TableError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read(std::io::BufReader::new(file))
    }

    pub fn read(reader: impl BufRead) -> Result<Self, TableError> {
        let mut lines = reader.lines().enumerate();
        let (_, header) = lines.next().ok_or(TableError::MalformedLine(1))?;
        let header = header.map_err(|_| TableError::MalformedLine(1))?;
        let mut parts = header.split_whitespace();
        let (count, dim) = match (parts.next(), parts.next(), parts.next()) {
            (Some(c), Some(d), None) => (
                c.parse::<usize>().map_err(|_| TableError::MalformedLine(1))?,
                d.parse::<usize>().map_err(|_| TableError::MalformedLine(1))?,
            ),
            _ => return Err(TableError::MalformedLine(1)),
        };
        let mut table = EmbeddingTable::new(dim);
        for (idx, line) in lines {
            let line_no = idx + 1;
            let line = line.map_err(|_| TableError::MalformedLine(line_no))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let word = parts.next().ok_or(TableError::MalformedLine(line_no))?;
            let values: Vec<f64> = parts
                .map(|v| v.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| TableError::MalformedLine(line_no))?;
            if values.len() != dim {
                return Err(TableError::DimMismatch {
                    line: line_no,
                    expected: dim,
                    got: values.len(),
                });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(TableError::MalformedLine(line_no));
            }
            if table.vectors.contains_key(word) {
                return Err(TableError::DuplicateWord(word.to_string()));
            }
            table.vectors.insert(word.to_string(), values);
        }
        if table.vectors.len() != count {
            return Err(TableError::CountMismatch {
                expected: count,
                got: table.vectors.len(),
            });
        }
        Ok(table)
    }

    /// Writes the same text format `load` reads.
    pub fn write(&self, out: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(out, "{} {}", self.vectors.len(), self.dim)?;
        for (word, vector) in &self.vectors {
            write!(out, "{word}")?;
            for v in vector {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.vectors.contains_key(word)
    }
}

/// Parameters of the textual path.
#[derive(Debug, Clone)]
pub struct TextualPathParams {
    /// Row-major `dim x dim` weight matrix.
    pub m_txt: Vec<f64>,
    pub w_res: f64,
    pub dim: usize,
}

impl TextualPathParams {
    /// Seeded uniform init in `[-1/sqrt(dim), 1/sqrt(dim)]`.
    pub fn init(dim: usize, w_res: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (dim as f64).sqrt();
        let m_txt = (0..dim * dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        TextualPathParams { m_txt, w_res, dim }
    }

    pub fn identity(dim: usize, w_res: f64) -> Self {
        let mut m_txt = vec![0.0; dim * dim];
        for i in 0..dim {
            m_txt[i * dim + i] = 1.0;
        }
        TextualPathParams { m_txt, w_res, dim }
    }

    fn matvec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, row) in self.m_txt.chunks_exact(self.dim).enumerate() {
            out[i] = dot(row, v);
        }
        out
    }
}

/// Output of the textual path, with the raw snippet embedding kept around.
#[derive(Debug, Clone)]
pub struct TextEmbedding {
    pub e_txt: Vec<f64>,
    pub e_w2v: Vec<f64>,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `v / ||v||`, or all zeros when the norm is (near) zero.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let norm = l2_norm(v);
    if norm < NORM_EPSILON {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x / norm).collect()
    }
}

/// Mean of the L2-normalized vectors of the snippet's non-article,
/// in-table words.
pub fn snippet_input_embedding(
    snippet: &Snippet,
    table: &EmbeddingTable,
    lexicon: &Lexicon,
) -> Result<Vec<f64>, EmbedError> {
    let mut sum = vec![0.0; table.dim()];
    let mut found = 0usize;
    for word in &snippet.tokens {
        if lexicon.is_article(word) {
            continue;
        }
        let Some(vector) = table.get(word) else {
            continue;
        };
        if l2_norm(vector) < NORM_EPSILON {
            // a zero vector has no direction; treat it like an OOV word
            continue;
        }
        for (s, v) in sum.iter_mut().zip(l2_normalize(vector)) {
            *s += v;
        }
        found += 1;
    }
    if found == 0 {
        return Err(EmbedError::AllTokensOov);
    }
    for s in &mut sum {
        *s /= found as f64;
    }
    Ok(sum)
}

/// Applies the residual textual path and renormalizes.
pub fn textual_path(e_w2v: &[f64], params: &TextualPathParams) -> Result<TextEmbedding, EmbedError> {
    if e_w2v.len() != params.dim {
        return Err(EmbedError::DimMismatch {
            expected: params.dim,
            got: e_w2v.len(),
        });
    }
    let direct = l2_normalize(e_w2v);
    if l2_norm(&direct) < NORM_EPSILON {
        return Err(EmbedError::DegenerateZero);
    }
    let mapped = l2_normalize(&params.matvec(e_w2v));
    let sum: Vec<f64> = direct
        .iter()
        .zip(&mapped)
        .map(|(d, m)| d + params.w_res * m)
        .collect();
    if l2_norm(&sum) < NORM_EPSILON {
        return Err(EmbedError::DegenerateZero);
    }
    Ok(TextEmbedding {
        e_txt: l2_normalize(&sum),
        e_w2v: e_w2v.to_vec(),
    })
}

/// Gradient of the textual path with respect to `m_txt`.
///
/// `grad_e_txt` is dL/de_txt; the return value is dL/dM with the same
/// row-major layout as `m_txt`. The w2v input is a constant.
pub fn textual_path_backward(
    e_w2v: &[f64],
    params: &TextualPathParams,
    grad_e_txt: &[f64],
) -> Vec<f64> {
    let dim = params.dim;
    let mapped_raw = params.matvec(e_w2v);
    let mapped_norm = l2_norm(&mapped_raw);
    if mapped_norm < NORM_EPSILON {
        // the normalized residual branch is pinned at zero
        return vec![0.0; dim * dim];
    }
    let direct = l2_normalize(e_w2v);
    let mapped = l2_normalize(&mapped_raw);
    let sum: Vec<f64> = direct
        .iter()
        .zip(&mapped)
        .map(|(d, m)| d + params.w_res * m)
        .collect();
    let sum_norm = l2_norm(&sum);
    if sum_norm < NORM_EPSILON {
        return vec![0.0; dim * dim];
    }
    let e_txt: Vec<f64> = sum.iter().map(|s| s / sum_norm).collect();

    // back through the outer normalization: g_sum = (g - e (e . g)) / ||sum||
    let e_dot_g = dot(&e_txt, grad_e_txt);
    let grad_sum: Vec<f64> = grad_e_txt
        .iter()
        .zip(&e_txt)
        .map(|(g, e)| (g - e * e_dot_g) / sum_norm)
        .collect();

    // back through the residual weight and the inner normalization
    let b_dot_g = dot(&mapped, &grad_sum);
    let grad_mapped_raw: Vec<f64> = grad_sum
        .iter()
        .zip(&mapped)
        .map(|(g, b)| params.w_res * (g - b * b_dot_g) / mapped_norm)
        .collect();

    // dL/dM = grad_mapped_raw (outer) e_w2v
    let mut grad_m = vec![0.0; dim * dim];
    for (i, g) in grad_mapped_raw.iter().enumerate() {
        for (j, u) in e_w2v.iter().enumerate() {
            grad_m[i * dim + j] = g * u;
        }
    }
    grad_m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::{ClassId, SnippetKind};
    use approx::assert_relative_eq;

    fn snippet(tokens: &[&str]) -> Snippet {
        Snippet {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            kind: SnippetKind::ClassName(ClassId(0)),
            source_caption: None,
        }
    }

    fn lexicon() -> Lexicon {
        Lexicon::builtin()
    }

    #[test]
    fn load_small_table() {
        let table = EmbeddingTable::read("2 3\ndog 1 0 0\ncat 0 1 0".as_bytes()).unwrap();
        assert_eq!(table.dim(), 3);
        assert_eq!(table.len(), 2);
        assert_eq!(table.get("dog"), Some(&[1.0, 0.0, 0.0][..]));
    }

    #[test]
    fn load_rejects_dim_mismatch() {
        let err = EmbeddingTable::read("1 3\ndog 1 0".as_bytes()).unwrap_err();
        assert!(matches!(
            err,
            TableError::DimMismatch {
                expected: 3,
                got: 2,
                ..
            }
        ));
    }

    #[test]
    fn load_rejects_duplicates_and_bad_counts() {
        let err = EmbeddingTable::read("2 2\ndog 1 0\ndog 0 1".as_bytes()).unwrap_err();
        assert!(matches!(err, TableError::DuplicateWord(w) if w == "dog"));

        let err = EmbeddingTable::read("3 2\ndog 1 0\ncat 0 1".as_bytes()).unwrap_err();
        assert!(matches!(
            err,
            TableError::CountMismatch {
                expected: 3,
                got: 2
            }
        ));

        let err = EmbeddingTable::read("1 2\ndog NaN 0".as_bytes()).unwrap_err();
        assert!(matches!(err, TableError::MalformedLine(2)));
    }

    #[test]
    fn single_word_embedding_is_normalized() {
        let mut table = EmbeddingTable::new(3);
        table.insert("dog", vec![3.0, 4.0, 0.0]).unwrap();
        let e = snippet_input_embedding(&snippet(&["dog"]), &table, &lexicon()).unwrap();
        assert_relative_eq!(e[0], 0.6, max_relative = 1e-12);
        assert_relative_eq!(e[1], 0.8, max_relative = 1e-12);
        assert_relative_eq!(e[2], 0.0, max_relative = 1e-12);
    }

    #[test]
    fn mean_of_unit_vectors() {
        let mut table = EmbeddingTable::new(2);
        table.insert("u", vec![1.0, 0.0]).unwrap();
        table.insert("v", vec![0.0, 1.0]).unwrap();
        let e = snippet_input_embedding(&snippet(&["u", "v"]), &table, &lexicon()).unwrap();
        assert_eq!(e, vec![0.5, 0.5]);
    }

    #[test]
    fn articles_and_oov_words_are_skipped() {
        let mut table = EmbeddingTable::new(2);
        table.insert("dog", vec![3.0, 4.0]).unwrap();
        table.insert("a", vec![1.0, 1.0]).unwrap();
        let e =
            snippet_input_embedding(&snippet(&["a", "large", "dog"]), &table, &lexicon()).unwrap();
        assert_relative_eq!(e[0], 0.6, max_relative = 1e-12);
        assert_relative_eq!(e[1], 0.8, max_relative = 1e-12);

        let err = snippet_input_embedding(&snippet(&["large", "unknown"]), &table, &lexicon());
        assert!(matches!(err, Err(EmbedError::AllTokensOov)));
    }

    #[test]
    fn textual_path_with_zero_residual_is_plain_normalization() {
        let params = TextualPathParams::init(3, 0.0, 7);
        let out = textual_path(&[2.0, 0.0, 0.0], &params).unwrap();
        assert_relative_eq!(out.e_txt[0], 1.0, max_relative = 1e-12);
        assert_relative_eq!(out.e_txt[1], 0.0, max_relative = 1e-12);
    }

    #[test]
    fn textual_path_identity_matrix_keeps_direction() {
        let params = TextualPathParams::identity(2, 0.2);
        let out = textual_path(&[3.0, 4.0], &params).unwrap();
        assert_relative_eq!(out.e_txt[0], 0.6, max_relative = 1e-12);
        assert_relative_eq!(out.e_txt[1], 0.8, max_relative = 1e-12);
    }

    #[test]
    fn textual_path_hand_computed_example() {
        // M maps (1,0) to (0,2); w_res = 0.2
        let params = TextualPathParams {
            m_txt: vec![0.0, 0.0, 2.0, 0.0],
            w_res: 0.2,
            dim: 2,
        };
        let out = textual_path(&[1.0, 0.0], &params).unwrap();
        assert_relative_eq!(out.e_txt[0], 0.980580675690920, max_relative = 1e-12);
        assert_relative_eq!(out.e_txt[1], 0.196116135138184, max_relative = 1e-12);
    }

    #[test]
    fn textual_path_output_is_unit_norm_and_scale_invariant() {
        let params = TextualPathParams::init(4, 0.3, 11);
        let v = vec![0.4, -1.2, 0.7, 2.0];
        let a = textual_path(&v, &params).unwrap();
        assert_relative_eq!(l2_norm(&a.e_txt), 1.0, max_relative = 1e-9);
        let scaled: Vec<f64> = v.iter().map(|x| 3.5 * x).collect();
        let b = textual_path(&scaled, &params).unwrap();
        for (x, y) in a.e_txt.iter().zip(&b.e_txt) {
            assert_relative_eq!(x, y, max_relative = 1e-9);
        }
    }

    #[test]
    fn degenerate_zero_is_reported() {
        let params = TextualPathParams::init(2, 0.2, 3);
        assert!(matches!(
            textual_path(&[0.0, 0.0], &params),
            Err(EmbedError::DegenerateZero)
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let dim = 5;
        let mut params = TextualPathParams::init(dim, 0.4, 42);
        let e_w2v: Vec<f64> = (0..dim).map(|i| 0.3 * (i as f64) - 0.7).collect();
        // loss = sum of squares of e_txt entries weighted by position
        let weights: Vec<f64> = (0..dim).map(|i| (i as f64) + 0.5).collect();
        let loss = |p: &TextualPathParams| -> f64 {
            let out = textual_path(&e_w2v, p).unwrap();
            out.e_txt
                .iter()
                .zip(&weights)
                .map(|(e, w)| 0.5 * w * e * e)
                .sum()
        };
        let out = textual_path(&e_w2v, &params).unwrap();
        let grad_e: Vec<f64> = out.e_txt.iter().zip(&weights).map(|(e, w)| w * e).collect();
        let analytic = textual_path_backward(&e_w2v, &params, &grad_e);

        let h = 1e-6;
        for k in 0..dim * dim {
            let orig = params.m_txt[k];
            params.m_txt[k] = orig + h;
            let up = loss(&params);
            params.m_txt[k] = orig - h;
            let down = loss(&params);
            params.m_txt[k] = orig;
            let fd = (up - down) / (2.0 * h);
            assert_relative_eq!(analytic[k], fd, max_relative = 1e-5, epsilon = 1e-9);
        }
    }
}
