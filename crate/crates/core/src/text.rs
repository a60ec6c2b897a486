//! Colour descriptions to conditioning vectors.
//!
//! A description is lowercased, stripped of punctuation and split on
//! whitespace; its embedding is the componentwise mean of the per-token
//! vectors, with out-of-vocabulary tokens contributing zeros.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBEDDING_DIM: usize = 256;

const DEFAULT_LEXICON: &str = include_str!("../data/color_lexicon.txt");
const DEFAULT_NCD_COLORS: &str = include_str!("../data/ncd_colors.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VocabularySource {
    PretrainedFile,
    JointlySeeded { seed: u64 },
}

/// Token table of fixed-width embedding vectors. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
    vectors: Vec<f32>,
    source: VocabularySource,
}

/// Recipe for rebuilding a vocabulary, stored alongside trained weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TextEncoderSpec {
    /// `token v1 ... v256` text file, read with [`load_embeddings`].
    File { path: std::path::PathBuf },
    /// Vectors from [`fallback_embedding`] for a fixed token list.
    Seeded { seed: u64, tokens: Vec<String> },
}

impl TextEncoderSpec {
    pub fn build(&self) -> Result<Vocabulary> {
        match self {
            TextEncoderSpec::File { path } => load_embeddings(path),
            TextEncoderSpec::Seeded { seed, tokens } => Ok(Vocabulary::seeded(tokens, *seed)),
        }
    }

    /// Seeded vocabulary over every token of `descriptions`.
    pub fn seeded_from<'a>(descriptions: impl IntoIterator<Item = &'a str>, seed: u64) -> Self {
        let tokens: BTreeSet<String> = descriptions.into_iter().flat_map(tokenize).collect();
        TextEncoderSpec::Seeded {
            seed,
            tokens: tokens.into_iter().collect(),
        }
    }
}

/// The conditioning vector for one description.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding(pub Vec<f32>);

impl TextEmbedding {
    pub fn zeros() -> Self {
        Self(vec![0.0; EMBEDDING_DIM])
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }
}

impl Vocabulary {
    pub fn empty(source: VocabularySource) -> Self {
        Self {
            index: HashMap::new(),
            tokens: Vec::new(),
            vectors: Vec::new(),
            source,
        }
    }

    /// Builds a vocabulary whose vectors come from [`fallback_embedding`].
    pub fn seeded<I, S>(tokens: I, seed: u64) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Self::empty(VocabularySource::JointlySeeded { seed });
        let unique: BTreeSet<String> = tokens.into_iter().map(|t| t.as_ref().to_lowercase()).collect();
        for token in unique {
            let v = fallback_embedding(&token, seed);
            vocab.insert(token, &v);
        }
        vocab
    }

    fn insert(&mut self, token: String, vector: &[f32]) -> bool {
        debug_assert_eq!(vector.len(), EMBEDDING_DIM);
        match self.index.get(&token) {
            Some(&i) => {
                self.vectors[i * EMBEDDING_DIM..(i + 1) * EMBEDDING_DIM].copy_from_slice(vector);
                false
            }
            None => {
                self.index.insert(token.clone(), self.tokens.len());
                self.tokens.push(token);
                self.vectors.extend_from_slice(vector);
                true
            }
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn source(&self) -> VocabularySource {
        self.source
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<&[f32]> {
        let i = *self.index.get(&token.to_lowercase())?;
        Some(&self.vectors[i * EMBEDDING_DIM..(i + 1) * EMBEDDING_DIM])
    }
}

/// Reads a whitespace-separated `token v1 ... v256` text file.
///
/// Duplicate tokens keep the last vector and log a warning.
pub fn load_embeddings(path: &Path) -> Result<Vocabulary> {
    let text = std::fs::read_to_string(path)?;
    let mut vocab = Vocabulary::empty(VocabularySource::PretrainedFile);
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values = fields
            .map(|f| f.parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("bad component for token {token:?}: {e}"),
            })?;
        if values.len() != EMBEDDING_DIM {
            return Err(Error::Dimension {
                path: path.to_path_buf(),
                line: line_no,
                expected: EMBEDDING_DIM,
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("non-finite component for token {token:?}"),
            });
        }
        if !vocab.insert(token.to_lowercase(), &values) {
            log::warn!("{}:{line_no}: duplicate token {token:?}, keeping the later vector", path.display());
        }
    }
    Ok(vocab)
}

// FNV-1a, fixed across platforms and releases.
fn stable_hash(token: &str) -> u64 {
    token.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Deterministic pseudo-random vector for `(token, seed)` with unit RMS
/// (norm `sqrt(EMBEDDING_DIM)`), the scale of a standard embedding table.
pub fn fallback_embedding(token: &str, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(token) ^ seed.rotate_left(32));
    loop {
        let raw: Vec<f64> = (0..EMBEDDING_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-6 {
            let scale = (EMBEDDING_DIM as f64).sqrt() / norm;
            return raw.iter().map(|v| (v * scale) as f32).collect();
        }
    }
}

/// Lowercases, removes apostrophes, turns other punctuation into spaces and splits.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|&c| c != '\'')
        .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { ' ' })
        .collect();
    cleaned
        .split_whitespace()
        .map(|t| t.to_lowercase())
        .collect()
}

pub fn encode_description(text: &str, vocab: &Vocabulary) -> TextEmbedding {
    let tokens = tokenize(text);
    let mut sum = vec![0.0f64; EMBEDDING_DIM];
    for token in &tokens {
        if let Some(v) = vocab.get(token) {
            for (acc, &x) in sum.iter_mut().zip(v) {
                *acc += x as f64;
            }
        }
    }
    if tokens.is_empty() {
        return TextEmbedding::zeros();
    }
    let n = tokens.len() as f64;
    TextEmbedding(sum.into_iter().map(|s| (s / n) as f32).collect())
}

/// Set of lowercase colour words used to pick caption sentences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColorLexicon(BTreeSet<String>);

impl ColorLexicon {
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().trim().to_lowercase())
            .filter(|w| !w.is_empty())
            .collect();
        if set.is_empty() {
            return Err(Error::Config("colour lexicon is empty".into()));
        }
        Ok(Self(set))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(std::fs::read_to_string(path)?.lines().filter(|l| !l.starts_with('#')))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }
}

impl Default for ColorLexicon {
    fn default() -> Self {
        Self::new(DEFAULT_LEXICON.lines()).expect("bundled lexicon is non-empty")
    }
}

fn split_sentences(caption: &str) -> impl Iterator<Item = &str> {
    caption
        .split_inclusive(['.', '!', '?'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
}

fn mentions_color(sentence: &str, lexicon: &ColorLexicon) -> bool {
    sentence
        .split(|c: char| !c.is_alphabetic())
        .any(|w| !w.is_empty() && lexicon.contains(&w.to_lowercase()))
}

/// Joins, in input order, every caption sentence that mentions a lexicon word.
pub fn extract_color_sentences<S: AsRef<str>>(captions: &[S], lexicon: &ColorLexicon) -> String {
    captions
        .iter()
        .flat_map(|c| split_sentences(c.as_ref()))
        .filter(|s| mentions_color(s, lexicon))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Static class-label to colour-word table for class-labelled datasets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassColorTable(HashMap<String, String>);

impl ClassColorTable {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut map = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(class), Some(color), None) => {
                    map.insert(class.to_lowercase(), color.to_lowercase());
                }
                _ => {
                    return Err(Error::Parse {
                        path: origin.to_path_buf(),
                        line: n + 1,
                        msg: "expected `class color`".into(),
                    })
                }
            }
        }
        Ok(Self(map))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    pub fn color_of(&self, class: &str) -> Option<&str> {
        self.0.get(&class.to_lowercase()).map(String::as_str)
    }
}

impl Default for ClassColorTable {
    fn default() -> Self {
        Self::parse(DEFAULT_NCD_COLORS, Path::new("<bundled>")).expect("bundled table parses")
    }
}

impl fmt::Display for VocabularySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VocabularySource::PretrainedFile => write!(f, "pretrained-file"),
            VocabularySource::JointlySeeded { seed } => write!(f, "jointly-seeded({seed})"),
        }
    }
}
