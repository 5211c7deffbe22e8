use std::collections::HashMap;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

const MAX_CHARS_PER_WORD: usize = 100;

/// Subword vocabulary: one token per line, line number is the id.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        for special in [UNK, CLS, SEP] {
            if !ids.contains_key(special) {
                return Err(Error::Config(format!("vocabulary lacks {special}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(
            text.lines()
                .map(|l| l.trim_end_matches('\r').to_string())
                .collect(),
        )
    }

    /// Built-in character vocabulary used by the toy encoder: specials,
    /// then every word-initial character, then its `##` continuation form.
    pub fn characters() -> Self {
        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
        let chars: Vec<char> = ('a'..='z')
            .chain('0'..='9')
            .chain(".,!?'-:;\"()".chars())
            .collect();
        tokens.extend(chars.iter().map(|c| c.to_string()));
        tokens.extend(
            chars
                .iter()
                .filter(|c| c.is_alphanumeric())
                .map(|c| format!("##{c}")),
        );
        Self::from_tokens(tokens).expect("built-in vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }
}

/// Token ids for one utterance, including the leading `[CLS]` and trailing
/// `[SEP]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Set when the input was cut to fit the maximum length.
    pub truncated: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lowercasing WordPiece tokenizer (greedy longest match, `##` continuations).
#[derive(Clone, Debug)]
pub struct Tokenizer {
    vocab: Vocabulary,
    max_len: usize,
}

impl Tokenizer {
    pub fn new(vocab: Vocabulary, max_len: usize) -> Result<Self> {
        if max_len < 3 {
            return Err(Error::Parameter(format!(
                "max token length {max_len} leaves no room for text"
            )));
        }
        Ok(Self { vocab, max_len })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let words = split_words(text);
        if words.is_empty() {
            return Err(Error::Input("text is empty".into()));
        }
        let mut ids = vec![self.vocab.id(CLS).expect("checked at construction")];
        for word in &words {
            self.wordpiece(word, &mut ids);
        }
        let budget = self.max_len - 1;
        let truncated = ids.len() > budget;
        if truncated {
            warn!(
                "text produced {} tokens; truncating to {}",
                ids.len() + 1,
                self.max_len
            );
            ids.truncate(budget);
        }
        ids.push(self.vocab.id(SEP).expect("checked at construction"));
        Ok(TokenSequence { ids, truncated })
    }

    fn wordpiece(&self, word: &str, out: &mut Vec<u32>) {
        let unk = self.vocab.id(UNK).expect("checked at construction");
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_CHARS_PER_WORD {
            out.push(unk);
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let mut piece: String = chars[start..end].iter().collect();
                if start > 0 {
                    piece.insert_str(0, "##");
                }
                if let Some(id) = self.vocab.id(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(unk);
                    return;
                }
            }
        }
        out.extend(pieces);
    }
}

/// Lowercases, splits on whitespace and isolates punctuation characters.
fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut current = String::new();
        for c in chunk.chars().flat_map(char::to_lowercase) {
            if c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace()) {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                words.push(c.to_string());
            } else {
                current.push(c);
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
    }
    words
}
