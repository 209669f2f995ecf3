use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Catalog, DataError, InstructionTemplate};

pub type TokenId = usize;

/// Word-level vocabulary over a closed corpus.
///
/// Reserved ids are fixed: 0 `<pad>`, 1 `<|user|>`, 2 `<|assistant|>`,
/// 3 `<image>`, 4 `<exemplar>`, 5 `<eos>`. Remaining words follow in
/// lexicographic order.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

const SPECIALS: [&str; 6] = ["<pad>", "<|user|>", "<|assistant|>", "<image>", "<exemplar>", "<eos>"];
const PUNCT: [char; 5] = ['.', ',', ':', ';', '?'];

impl Vocabulary {
    pub const PAD: TokenId = 0;
    pub const USER: TokenId = 1;
    pub const ASSISTANT: TokenId = 2;
    pub const IMAGE: TokenId = 3;
    pub const EXEMPLAR: TokenId = 4;
    pub const EOS: TokenId = 5;

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, DataError> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(DataError::InvalidConfig("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(DataError::InvalidConfig(format!("bad token {t:?} at id {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(DataError::InvalidConfig(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Vocabulary covering every full and option-free rendering of every
    /// dataset in the catalog, plus all class names.
    pub fn build(catalog: &Catalog, template: &InstructionTemplate) -> Self {
        let mut words = BTreeSet::new();
        let mut add = |text: &str| {
            for w in split_words(text) {
                if !SPECIALS.contains(&w.as_str()) {
                    words.insert(w);
                }
            }
        };
        add(&template.prompt);
        for d in catalog.datasets() {
            let names: Vec<&str> = d.class_names.iter().map(String::as_str).collect();
            add(&template.instruction(&d.modality, Some(&names)));
            add(&template.instruction(&d.modality, None));
            for n in &names {
                add(n);
            }
        }
        let tokens = SPECIALS.iter().map(|s| s.to_string()).chain(words).collect();
        Self::from_tokens(tokens).expect("well-formed by construction")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<TokenId, DataError> {
        self.index.get(token).copied().ok_or_else(|| DataError::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: TokenId) -> Result<&str, DataError> {
        self.tokens.get(id).map(String::as_str).ok_or(DataError::UnknownTokenId(id))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, DataError> {
        split_words(text).iter().map(|w| self.id(w)).collect()
    }

    /// Inverse of [`Vocabulary::encode`] on canonically spaced text.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, DataError> {
        let words = ids.iter().map(|&i| self.token(i)).collect::<Result<Vec<_>, _>>()?;
        Ok(join_words(&words))
    }

    /// One token per line; line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_file_string()).map_err(|e| DataError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    /// SHA-256 of the vocabulary file contents, hex encoded.
    pub fn hash(&self) -> String {
        hex_digest(self.to_file_string().as_bytes())
    }
}

/// Lowercase hex SHA-256.
pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn is_special(w: &str) -> bool {
    SPECIALS.contains(&w)
}

fn is_punct(w: &str) -> bool {
    let mut cs = w.chars();
    matches!((cs.next(), cs.next()), (Some(c), None) if PUNCT.contains(&c))
}

/// Splits text into word tokens: special markers are atomic, punctuation
/// marks stand alone, everything else splits on whitespace.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if c == '<' {
            if let Some(sp) = SPECIALS.iter().find(|sp| rest.starts_with(**sp)) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(sp.to_string());
                rest = &rest[sp.len()..];
                continue;
            }
        }
        if c.is_whitespace() || PUNCT.contains(&c) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        } else {
            cur.push(c);
        }
        rest = &rest[c.len_utf8()..];
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Canonical spacing: single spaces between words, none before punctuation,
/// none around special markers.
pub(crate) fn join_words(words: &[&str]) -> String {
    let mut s = String::new();
    let mut prev_special = true;
    for w in words {
        let special = is_special(w);
        if !s.is_empty() && !prev_special && !special && !is_punct(w) {
            s.push(' ');
        }
        s.push_str(w);
        prev_special = special;
    }
    s
}
