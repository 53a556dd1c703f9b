//! Byte-level corpora: loading, seeded batch sampling, evaluation windows and
//! a synthetic text generator.

use std::path::Path;

use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Zipf;

use crate::error::{Error, Result};
use crate::model::Batch;

/// Vocabulary size of byte-level tokenization.
pub const BYTE_VOCAB: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl Corpus {
    pub fn new(name: impl Into<String>, bytes: Vec<u8>) -> Self {
        Corpus { name: name.into(), bytes }
    }

    /// Reads a file as raw bytes; the corpus is named after the file stem.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "corpus".into());
        Ok(Corpus { name, bytes })
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn tokens(&self) -> Vec<usize> {
        self.bytes.iter().map(|&b| b as usize).collect()
    }

    /// Splits off the last `fraction` of the bytes as a held-out corpus.
    pub fn split(&self, fraction: f64) -> (Corpus, Corpus) {
        let held = ((self.bytes.len() as f64) * fraction).round() as usize;
        let cut = self.bytes.len() - held.min(self.bytes.len());
        (
            Corpus::new(format!("{}.train", self.name), self.bytes[..cut].to_vec()),
            Corpus::new(format!("{}.heldout", self.name), self.bytes[cut..].to_vec()),
        )
    }

    /// At most the first `max_bytes` bytes.
    pub fn truncated(&self, max_bytes: usize) -> Corpus {
        let n = self.bytes.len().min(max_bytes);
        Corpus::new(self.name.clone(), self.bytes[..n].to_vec())
    }

    /// `batch` contiguous windows of `seq_len + 1` bytes at offsets drawn
    /// from a ChaCha8 stream keyed by `(seed, step)`.
    pub fn batch(&self, seed: u64, step: u64, batch: usize, seq_len: usize) -> Result<Batch> {
        let span = seq_len + 1;
        if self.bytes.len() < span {
            return Err(Error::Input(format!(
                "corpus {} has {} bytes, fewer than one window of {span}",
                self.name,
                self.bytes.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step);
        let max_start = self.bytes.len() - span;
        let windows: Vec<Vec<usize>> = (0..batch)
            .map(|_| {
                let s = rng.random_range(0..=max_start);
                self.bytes[s..s + span].iter().map(|&b| b as usize).collect()
            })
            .collect();
        let ids = (0..batch as u64).map(|b| step * batch as u64 + b).collect();
        Batch::from_windows(&windows, ids)
    }

    /// Consecutive windows overlapping by one byte so that every byte after
    /// the first is a target exactly once. The last window may be shorter.
    pub fn eval_windows(&self, seq_len: usize) -> Result<Vec<Vec<usize>>> {
        if self.bytes.len() < 2 {
            return Err(Error::Input(format!("corpus {} is too short to evaluate", self.name)));
        }
        if seq_len == 0 {
            return Err(Error::Input("evaluation window length must be positive".into()));
        }
        let toks = self.tokens();
        let mut out = Vec::new();
        let mut start = 0;
        while start + 1 < toks.len() {
            let end = (start + seq_len + 1).min(toks.len());
            out.push(toks[start..end].to_vec());
            start = end - 1;
        }
        Ok(out)
    }
}

const WORDS: &[&str] = &[
    "the", "of", "and", "to", "a", "in", "is", "it", "that", "was", "for", "on", "are", "with", "as", "he", "she",
    "they", "be", "at", "one", "have", "this", "from", "by", "hot", "word", "but", "what", "some", "we", "can",
    "out", "other", "were", "all", "there", "when", "up", "use", "your", "how", "said", "an", "each", "which",
    "do", "their", "time", "if", "will", "way", "about", "many", "then", "them", "write", "would", "like", "so",
    "these", "her", "long", "make", "thing", "see", "him", "two", "has", "look", "more", "day", "could", "go",
    "come", "did", "number", "sound", "no", "most", "people", "my", "over", "know", "water", "than", "call",
    "first", "who", "may", "down", "side", "been", "now", "find", "any", "new", "work", "part", "take", "get",
    "place", "made", "live", "where", "after", "back", "little", "only", "round", "man", "year", "came", "show",
    "every", "good", "me", "give", "our", "under", "name", "very", "through", "just", "form", "sentence",
    "great", "think", "say", "help", "low", "line", "differ", "turn", "cause", "much", "mean", "before", "move",
    "right", "boy", "old", "too", "same", "tell", "does", "set", "three", "want", "air", "well", "also", "play",
    "small", "end", "put", "home", "read", "hand", "port", "large", "spell", "add", "even", "land", "here",
    "must", "big", "high", "such", "follow", "act", "why", "ask", "men", "change", "went", "light", "kind",
    "off", "need", "house", "picture", "try", "us", "again", "animal", "point", "mother", "world", "near",
    "build", "self", "earth", "father", "head", "stand", "own", "page", "should", "country", "found", "answer",
    "school", "grow", "study", "still", "learn", "plant", "cover", "food", "sun", "four", "between", "state",
    "keep", "eye", "never", "last", "let", "thought", "city", "tree", "cross", "farm", "hard", "start", "might",
    "story", "saw", "far", "sea", "draw", "left", "late", "run", "while", "press", "close", "night", "real",
    "life", "few", "north", "open", "seem", "together", "next", "white", "children", "begin", "got", "walk",
    "example", "ease", "paper", "group", "always", "music", "those", "both", "mark", "often", "letter", "until",
    "mile", "river", "car", "feet", "care", "second", "book", "carry", "took", "science", "eat", "room",
    "friend", "began", "idea", "fish", "mountain", "stop", "once", "base", "hear", "horse", "cut", "sure",
    "watch", "color", "face", "wood", "main", "enough", "plain", "girl", "usual", "young", "ready", "above",
    "ever", "red", "list", "though", "feel", "talk", "bird", "soon", "body", "dog", "family", "direct", "pose",
    "leave", "song", "measure", "door", "product", "black", "short", "numeral", "class", "wind", "question",
];

const NAMES: &[&str] = &["Ann", "Ben", "Carla", "Dev", "Emma", "Farid", "Grace", "Hugo", "Ines", "Jon"];
const ITEMS: &[&str] = &["apples", "books", "coins", "pencils", "marbles", "cookies", "stamps", "shells"];

fn sentence<R: Rng>(rng: &mut R, zipf: &Zipf<f64>, out: &mut String) {
    let n = rng.random_range(5..16);
    for i in 0..n {
        let w = WORDS[(zipf.sample(rng) as usize - 1).min(WORDS.len() - 1)];
        if i == 0 {
            let mut c = w.chars();
            if let Some(f) = c.next() {
                out.extend(f.to_uppercase());
                out.push_str(c.as_str());
            }
        } else {
            out.push(' ');
            out.push_str(w);
        }
        if i + 1 < n && rng.random_bool(0.08) {
            out.push(',');
        }
    }
    out.push(if rng.random_bool(0.9) { '.' } else { '?' });
}

fn word_problem<R: Rng>(rng: &mut R, out: &mut String) {
    let name = NAMES[rng.random_range(0..NAMES.len())];
    let item = ITEMS[rng.random_range(0..ITEMS.len())];
    let a: u32 = rng.random_range(2..60);
    let b: u32 = rng.random_range(1..40);
    let (verb, op, c) = if rng.random_bool(0.5) || b > a {
        ("gets", '+', a + b)
    } else {
        ("gives away", '-', a - b)
    };
    out.push_str(&format!(
        "Question: {name} has {a} {item} and {verb} {b}. How many {item} does {name} have now?\n\
         Answer: {name} has {a}{op}{b}=<<{a}{op}{b}={c}>>{c} {item}.\n#### {c}\n"
    ));
}

/// Deterministic English-like prose interleaved with arithmetic word
/// problems, at least `min_bytes` long.
pub fn synthetic_corpus(seed: u64, min_bytes: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zipf = Zipf::new(WORDS.len() as f64, 1.1).expect("valid Zipf parameters");
    let mut out = String::with_capacity(min_bytes + 512);
    while out.len() < min_bytes {
        if rng.random_bool(0.2) {
            word_problem(&mut rng, &mut out);
        } else {
            let n = rng.random_range(2..6);
            for i in 0..n {
                if i > 0 {
                    out.push(' ');
                }
                sentence(&mut rng, &zipf, &mut out);
            }
            out.push('\n');
        }
    }
    out.into_bytes()
}
