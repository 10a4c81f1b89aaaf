use std::collections::HashMap;
use std::path::Path;

use super::{io_err, DataError, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
/// Number of reserved ids; regular tokens start here.
pub const RESERVED: usize = 3;

const RESERVED_NAMES: [&str; RESERVED] = ["<pad>", "<sos>", "<eos>"];

/// Bijection between markup tokens and ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    longest: usize,
}

impl Vocab {
    /// Regular tokens in id order, starting at [`RESERVED`].
    pub fn new<S: AsRef<str>>(tokens: &[S]) -> Result<Self> {
        let mut all: Vec<String> = RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            RESERVED_NAMES.iter().enumerate().map(|(i, s)| (s.to_string(), i)).collect();
        for t in tokens {
            let t = t.as_ref();
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(DataError::Vocab(format!("invalid token {t:?}")));
            }
            if index.insert(t.to_string(), all.len()).is_some() {
                return Err(DataError::Vocab(format!("duplicate or reserved token {t:?}")));
            }
            all.push(t.to_string());
        }
        let longest = all[RESERVED..].iter().map(|t| t.len()).max().unwrap_or(0);
        Ok(Vocab { tokens: all, index, longest })
    }

    /// One token per line; blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().map(|l| l.trim_end_matches('\r')).filter(|l| !l.is_empty()).collect();
        Self::new(&lines)
    }

    pub fn to_text(&self) -> String {
        self.tokens[RESERVED..].iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(io_err(path))
    }

    /// Total size including reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Regular tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens[RESERVED..]
    }

    /// Greedy longest-match segmentation; whitespace separates but is
    /// otherwise ignored. Reserved names are never matched.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < text.len() {
            let rest = &text[pos..];
            let c = rest.chars().next().expect("non-empty");
            if c.is_whitespace() {
                pos += c.len_utf8();
                continue;
            }
            let mut end = rest.len().min(self.longest);
            while !rest.is_char_boundary(end) {
                end -= 1;
            }
            let found = loop {
                if end == 0 {
                    break None;
                }
                if let Some(&id) = self.index.get(&rest[..end]) {
                    if id >= RESERVED {
                        break Some((id, end));
                    }
                }
                end -= 1;
                while end > 0 && !rest.is_char_boundary(end) {
                    end -= 1;
                }
            };
            match found {
                Some((id, len)) => {
                    out.push(id);
                    pos += len;
                }
                None => {
                    let token: String = rest.chars().take_while(|c| !c.is_whitespace()).collect();
                    return Err(DataError::UnknownToken { token, position: pos });
                }
            }
        }
        Ok(out)
    }

    /// Tokens joined by single spaces.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let parts = ids
            .iter()
            .map(|&i| {
                self.token(i)
                    .ok_or_else(|| DataError::Vocab(format!("id {i} outside vocabulary of {}", self.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.join(" "))
    }
}
