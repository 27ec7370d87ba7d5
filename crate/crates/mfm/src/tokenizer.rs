//! Greedy byte-pair tokenizer with whole-word grouping.
//!
//! Every sub-word piece produced from one whitespace-delimited source word
//! shares a single whole-word id, so multi-piece user/item fields can key a
//! shared whole-word embedding. Words are prefixed with a boundary marker
//! (U+2581) so decoding can restore spaces without extra metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

/// Word-boundary marker prepended to every word before segmentation.
pub const WORD_MARKER: char = '\u{2581}';

pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
pub const RESERVED: [&str; 3] = ["<pad>", "</s>", "<unk>"];

/// Token category: ordinary text vs. visual (image-token) positions.
pub const CATEGORY_TEXT: u8 = 0;
pub const CATEGORY_VISUAL: u8 = 1;

/// Immutable piece <-> id table. Ids 0..3 are reserved (pad, eos, unk).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pieces: Vec<String>,
    ids: HashMap<String, u32>,
    max_piece_chars: usize,
}

/// Parallel id/whole-word/category streams for one tokenized sequence.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenizedField {
    pub token_ids: Vec<u32>,
    pub whole_word_ids: Vec<u32>,
    pub category_ids: Vec<u8>,
}

impl TokenizedField {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn push(&mut self, token_id: u32, whole_word_id: u32, category_id: u8) {
        self.token_ids.push(token_id);
        self.whole_word_ids.push(whole_word_id);
        self.category_ids.push(category_id);
    }

    pub fn extend(&mut self, other: &TokenizedField) {
        self.token_ids.extend_from_slice(&other.token_ids);
        self.whole_word_ids.extend_from_slice(&other.whole_word_ids);
        self.category_ids.extend_from_slice(&other.category_ids);
    }
}

impl Vocabulary {
    fn from_pieces(pieces: Vec<String>) -> Self {
        let mut ids = HashMap::with_capacity(pieces.len());
        let mut max_piece_chars = 1;
        for (i, p) in pieces.iter().enumerate() {
            ids.insert(p.clone(), i as u32);
            max_piece_chars = max_piece_chars.max(p.chars().count());
        }
        Vocabulary {
            pieces,
            ids,
            max_piece_chars,
        }
    }

    pub fn size(&self) -> usize {
        self.pieces.len()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(|s| s.as_str())
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.ids.get(piece).copied()
    }

    /// Persist as a text file: one line per piece, line number = id,
    /// first three lines reserved tokens.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for p in &self.pieces {
            out.push_str(p);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let pieces: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if pieces.len() < 4 {
            return Err(Error::Config(format!(
                "vocabulary file {} has {} pieces, need at least 4",
                path.display(),
                pieces.len()
            )));
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if pieces[i] != *r {
                return Err(Error::Config(format!(
                    "vocabulary file {}: line {} is '{}', expected reserved '{}'",
                    path.display(),
                    i,
                    pieces[i],
                    r
                )));
            }
        }
        Ok(Vocabulary::from_pieces(pieces))
    }
}

/// Build a vocabulary by greedy byte-pair merges over `texts`, stopping when
/// `target_size` pieces exist or no adjacent pair occurs twice. Deterministic:
/// ties between equally frequent pairs go to the lexicographically smaller.
pub fn build_vocab(texts: &[String], target_size: usize) -> Result<Vocabulary> {
    // Word frequency table; each word carries the boundary marker.
    let mut word_freq: BTreeMap<Vec<String>, u64> = BTreeMap::new();
    let mut charset: std::collections::BTreeSet<char> = std::collections::BTreeSet::new();
    charset.insert(WORD_MARKER);
    for t in texts {
        for w in t.split_whitespace() {
            let mut symbols = vec![WORD_MARKER.to_string()];
            for c in w.chars() {
                charset.insert(c);
                symbols.push(c.to_string());
            }
            *word_freq.entry(symbols).or_insert(0) += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(Error::Config(
            "cannot build a vocabulary from an empty corpus".into(),
        ));
    }
    let base = RESERVED.len() + charset.len();
    if target_size < base {
        return Err(Error::Config(format!(
            "target_size {} too small: need at least {} (3 reserved + {} distinct characters)",
            target_size,
            base,
            charset.len()
        )));
    }

    let mut pieces: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    pieces.extend(charset.iter().map(|c| c.to_string()));

    let mut words: Vec<(Vec<String>, u64)> = word_freq.into_iter().collect();
    while pieces.len() < target_size {
        let mut pair_counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (symbols, freq) in &words {
            for win in symbols.windows(2) {
                *pair_counts
                    .entry((win[0].clone(), win[1].clone()))
                    .or_insert(0) += freq;
            }
        }
        // Most frequent pair; BTreeMap iteration gives lexicographic tie-break.
        let best = pair_counts
            .into_iter()
            .filter(|(_, c)| *c >= 2)
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
        let Some(((left, right), _)) = best else {
            break;
        };
        let merged = format!("{left}{right}");
        for (symbols, _) in &mut words {
            let mut out = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(symbols[i].clone());
                    i += 1;
                }
            }
            *symbols = out;
        }
        pieces.push(merged);
    }
    Ok(Vocabulary::from_pieces(pieces))
}

/// Greedy longest-match segmentation of one marker-prefixed word.
fn segment_word(vocab: &Vocabulary, word: &str) -> Vec<u32> {
    let chars: Vec<char> = std::iter::once(WORD_MARKER).chain(word.chars()).collect();
    let mut ids = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let max_len = vocab.max_piece_chars.min(chars.len() - start);
        let mut matched = None;
        for len in (1..=max_len).rev() {
            let cand: String = chars[start..start + len].iter().collect();
            if let Some(id) = vocab.id(&cand) {
                matched = Some((id, len));
                break;
            }
        }
        match matched {
            Some((id, len)) => {
                ids.push(id);
                start += len;
            }
            None => {
                // Unrepresentable character: emit unk and move on.
                ids.push(UNK_ID);
                start += 1;
            }
        }
    }
    ids
}

/// Tokenize text. Whole-word ids are per-sequence ordinals starting at
/// `first_whole_word`; category ids are all text.
pub fn encode_from(vocab: &Vocabulary, text: &str, first_whole_word: u32) -> TokenizedField {
    let mut field = TokenizedField::default();
    let mut word_id = first_whole_word;
    for word in text.split_whitespace() {
        for id in segment_word(vocab, word) {
            field.push(id, word_id, CATEGORY_TEXT);
        }
        word_id += 1;
    }
    field
}

pub fn encode(vocab: &Vocabulary, text: &str) -> TokenizedField {
    encode_from(vocab, text, 0)
}

/// Reassemble a string from ids, restoring word-boundary markers to spaces.
/// Stops at the first end-of-sequence id. Out-of-range ids are an error.
pub fn decode(vocab: &Vocabulary, ids: &[u32]) -> Result<String> {
    let mut out = String::new();
    for (pos, &id) in ids.iter().enumerate() {
        if id == EOS_ID {
            break;
        }
        if id == PAD_ID {
            continue;
        }
        let piece = vocab.piece(id).ok_or_else(|| {
            Error::Decode(format!(
                "id {} at position {} is outside the vocabulary (size {})",
                id,
                pos,
                vocab.size()
            ))
        })?;
        if id == UNK_ID {
            out.push('\u{FFFD}');
        } else {
            out.push_str(piece);
        }
    }
    let restored: String = out
        .chars()
        .map(|c| if c == WORD_MARKER { ' ' } else { c })
        .collect();
    Ok(restored.trim_start().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_vocab() -> Vocabulary {
        build_vocab(
            &["hello world user_251 a b item_5".to_string()],
            200,
        )
        .unwrap()
    }

    #[test]
    fn build_vocab_merges_repeated_pair() {
        // Greedy BPE on "aaaa": pair (a,a) occurs 3 times -> merge once,
        // leaving [aa, aa]; the pair (aa,aa) occurs once so merging stops.
        let v = build_vocab(&["aaaa".to_string()], 6).unwrap();
        assert!(v.id("a").is_some(), "single char must be present");
        assert!(v.id("aa").is_some(), "merged pair must be present");
    }

    #[test]
    fn build_vocab_empty_corpus_errors() {
        let err = build_vocab(&[], 10).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn build_vocab_target_too_small_errors() {
        let err = build_vocab(&["abc".to_string()], 4).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn build_vocab_deterministic() {
        let texts = vec!["the cat sat on the mat".to_string(), "the cat".to_string()];
        let a = build_vocab(&texts, 40).unwrap();
        let b = build_vocab(&texts, 40).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encode_multi_piece_word_shares_whole_word_id() {
        // A field like "user_251" may split into several pieces but they must
        // all carry one whole-word id.
        let v = build_vocab(&["x y z".to_string()], 10).unwrap();
        let f = encode(&v, "user_251");
        assert!(f.token_ids.len() >= 2, "expected multiple pieces");
        assert!(f.whole_word_ids.iter().all(|&w| w == 0));
        assert!(f.category_ids.iter().all(|&c| c == CATEGORY_TEXT));
    }

    #[test]
    fn encode_two_words_increments_whole_word_id() {
        let v = small_vocab();
        let f = encode(&v, "a b");
        assert_eq!(f.whole_word_ids.first(), Some(&0));
        assert_eq!(f.whole_word_ids.last(), Some(&1));
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = small_vocab();
        for text in ["hello world", "user_251", "item_5 item_5 hello"] {
            let f = encode(&v, text);
            assert_eq!(decode(&v, &f.token_ids).unwrap(), text);
        }
    }

    #[test]
    fn decode_empty_is_empty() {
        let v = small_vocab();
        assert_eq!(decode(&v, &[]).unwrap(), "");
    }

    #[test]
    fn decode_stops_at_eos() {
        let v = small_vocab();
        let mut ids = encode(&v, "hello").token_ids;
        let tail = encode(&v, "world").token_ids;
        ids.push(EOS_ID);
        ids.extend(tail);
        assert_eq!(decode(&v, &ids).unwrap(), "hello");
    }

    #[test]
    fn decode_out_of_range_errors() {
        let v = small_vocab();
        let err = decode(&v, &[9_999_999]).unwrap_err();
        assert!(matches!(err, Error::Decode(_)));
    }

    #[test]
    fn unknown_char_becomes_unk_with_word_id() {
        let v = build_vocab(&["abc".to_string()], 10).unwrap();
        let f = encode(&v, "aZb");
        assert!(f.token_ids.contains(&UNK_ID));
        assert!(f.whole_word_ids.iter().all(|&w| w == 0));
        let decoded = decode(&v, &f.token_ids).unwrap();
        assert_eq!(decoded, "a\u{FFFD}b");
    }

    #[test]
    fn lengths_always_agree() {
        let v = small_vocab();
        let f = encode(&v, "hello world item_5 user_251");
        assert_eq!(f.token_ids.len(), f.whole_word_ids.len());
        assert_eq!(f.token_ids.len(), f.category_ids.len());
    }

    #[test]
    fn whole_word_ids_non_decreasing() {
        let v = small_vocab();
        let f = encode(&v, "hello world b a item_5");
        for w in f.whole_word_ids.windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let v = small_vocab();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v, loaded);
    }
}
