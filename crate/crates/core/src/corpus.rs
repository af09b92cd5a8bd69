//! Corpus loading, character vocabulary, and training-batch sampling.

use crate::error::{Error, Result};
use rand::Rng;
use std::collections::HashMap;
use std::path::Path;

/// Character vocabulary, ordered by code point so channel indices stay
/// comparable across runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    char_to_id: HashMap<char, u32>,
}

impl Vocab {
    pub fn from_text(text: &str) -> Self {
        let mut chars: Vec<char> = {
            let mut set: Vec<char> = text.chars().collect();
            set.sort_unstable();
            set.dedup();
            set
        };
        chars.shrink_to_fit();
        let char_to_id = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as u32))
            .collect();
        Vocab { chars, char_to_id }
    }

    pub fn size(&self) -> usize {
        self.chars.len()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id_of(&self, c: char) -> Option<u32> {
        self.char_to_id.get(&c).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| self.id_of(c).ok_or(Error::UnknownChar(c)))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        ids.iter()
            .map(|&id| {
                self.chars
                    .get(id as usize)
                    .copied()
                    .ok_or(Error::IndexOutOfRange {
                        what: "token id",
                        value: id as usize,
                        limit: self.chars.len(),
                    })
            })
            .collect()
    }
}

/// Tokenized corpus with a positional 90/10 train/validation split.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train_ids: Vec<u32>,
    pub val_ids: Vec<u32>,
    pub vocab: Vocab,
}

impl Corpus {
    pub fn total_len(&self) -> usize {
        self.train_ids.len() + self.val_ids.len()
    }

    /// The raw text of the training split (used for word-vocabulary builds).
    pub fn train_text(&self) -> String {
        self.vocab
            .decode(&self.train_ids)
            .expect("train ids are valid by construction")
    }
}

/// Build a corpus from raw text: vocabulary over the full text, then the
/// first 90% of characters (floor) as training data and the rest validation.
pub fn corpus_from_text(text: &str) -> Result<Corpus> {
    if text.is_empty() {
        return Err(Error::contract("corpus text is empty"));
    }
    let vocab = Vocab::from_text(text);
    let ids = vocab.encode(text)?;
    let split = ids.len() * 9 / 10;
    let (train, val) = ids.split_at(split);
    Ok(Corpus {
        train_ids: train.to_vec(),
        val_ids: val.to_vec(),
        vocab,
    })
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    corpus_from_text(&text)
}

/// Sample `batch` uniformly-random training windows; `y` is `x` shifted left
/// by one. Windows never cross the end of the training split.
pub fn sample_batch<R: Rng>(
    corpus: &Corpus,
    block: usize,
    batch: usize,
    rng: &mut R,
) -> Result<(Vec<u32>, Vec<u32>)> {
    let n = corpus.train_ids.len();
    if block == 0 || batch == 0 {
        return Err(Error::contract("block and batch must be >= 1"));
    }
    if n < block + 1 {
        return Err(Error::contract(format!(
            "training split of {} tokens is too short for block {}",
            n, block
        )));
    }
    let mut x = Vec::with_capacity(batch * block);
    let mut y = Vec::with_capacity(batch * block);
    for _ in 0..batch {
        let start = rng.gen_range(0..=n - block - 1);
        x.extend_from_slice(&corpus.train_ids[start..start + block]);
        y.extend_from_slice(&corpus.train_ids[start + 1..start + block + 1]);
    }
    Ok((x, y))
}

/// Expected §3 constants for the canonical tiny-Shakespeare file; tests use
/// these when the real corpus is available locally.
pub mod canonical {
    pub const TOTAL_CHARS: usize = 1_115_394;
    pub const TRAIN_CHARS: usize = 1_003_854;
    pub const VAL_CHARS: usize = 111_540;
    pub const VOCAB_SIZE: usize = 65;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn minimal_two_char_split() {
        let c = corpus_from_text("ab").unwrap();
        assert_eq!(c.vocab.size(), 2);
        assert_eq!(c.train_ids, vec![0]); // "a"
        assert_eq!(c.val_ids, vec![1]); // "b"
    }

    #[test]
    fn degenerate_single_char_vocab() {
        let text = "x".repeat(100);
        let c = corpus_from_text(&text).unwrap();
        assert_eq!(c.vocab.size(), 1);
        assert_eq!(c.train_ids.len(), 90);
        assert_eq!(c.val_ids.len(), 10);
    }

    #[test]
    fn empty_text_is_a_contract_error() {
        assert!(matches!(
            corpus_from_text(""),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_corpus("/nonexistent/corpus.txt"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn encode_decode_round_trip() {
        let c = corpus_from_text("First Citizen:\nSpeak, speak.\n").unwrap();
        let ids = c.vocab.encode("First Citizen").unwrap();
        assert_eq!(c.vocab.decode(&ids).unwrap(), "First Citizen");
        assert_eq!(c.vocab.encode("").unwrap(), Vec::<u32>::new());
    }

    #[test]
    fn encode_unknown_char_names_offender() {
        let c = corpus_from_text("abc").unwrap();
        let err = c.vocab.encode("abz").unwrap_err();
        assert!(err.to_string().contains('z'));
    }

    #[test]
    fn vocab_order_is_sorted_by_code_point() {
        let v = Vocab::from_text("cba BA\n");
        let expect: Vec<char> = vec!['\n', ' ', 'A', 'B', 'a', 'b', 'c'];
        assert_eq!(v.chars(), expect.as_slice());
    }

    #[test]
    fn vocab_is_stable_across_loads() {
        let text = "some repeated corpus text 123";
        assert_eq!(Vocab::from_text(text), Vocab::from_text(text));
    }

    #[test]
    fn sample_batch_shift_and_determinism() {
        let text: String = ('a'..='z').cycle().take(500).collect();
        let c = corpus_from_text(&text).unwrap();
        let (block, batch) = (16, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (x, y) = sample_batch(&c, block, batch, &mut rng).unwrap();
        assert_eq!(x.len(), batch * block);
        for b in 0..batch {
            for t in 0..block - 1 {
                assert_eq!(y[b * block + t], x[b * block + t + 1]);
            }
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let (x2, y2) = sample_batch(&c, block, batch, &mut rng2).unwrap();
        assert_eq!(x, x2);
        assert_eq!(y, y2);
    }

    #[test]
    fn sample_batch_rejects_short_corpus() {
        let c = corpus_from_text("abcdefghij").unwrap(); // train = 9 chars
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_batch(&c, 9, 1, &mut rng).is_err());
        assert!(sample_batch(&c, 8, 1, &mut rng).is_ok());
    }

    #[test]
    fn all_ids_below_vocab_size_and_split_sums() {
        let text = "First Citizen:\nBefore we proceed any further, hear me speak.\n";
        let c = corpus_from_text(text).unwrap();
        let v = c.vocab.size() as u32;
        assert!(c.train_ids.iter().all(|&id| id < v));
        assert!(c.val_ids.iter().all(|&id| id < v));
        assert_eq!(c.total_len(), text.chars().count());
        assert_eq!(c.train_ids.len(), text.chars().count() * 9 / 10);
    }
}
