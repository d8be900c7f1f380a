use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::EncoderError;

pub const UNK_ID: u32 = 0;
pub const START_ID: u32 = 1;
pub const SEP_ID: u32 = 2;

const SPECIALS: [&str; 3] = ["[UNK]", "[START]", "[SEP]"];

/// Token-to-id table. Ids 0..3 are the unknown, start and separator markers.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    /// Keeps the `max_size - 3` most frequent tokens seen at least `min_count`
    /// times; ties break alphabetically.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>, max_size: usize, min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count && !SPECIALS.contains(&t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(
            ranked
                .into_iter()
                .take(max_size.saturating_sub(SPECIALS.len()))
                .map(|(t, _)| t.to_string()),
        );
        Self::from_tokens(all)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        fs::write(path, serde_json::to_string_pretty(&self.tokens)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        let tokens: Vec<String> = serde_json::from_str(&fs::read_to_string(path)?)?;
        if tokens.len() < SPECIALS.len() || tokens[..3] != SPECIALS {
            return Err(EncoderError::Config("vocabulary file lacks the marker tokens".into()));
        }
        Ok(Self::from_tokens(tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_ranked_with_markers_first() {
        let v = Vocab::build(["b", "a", "b", "c", "a", "b", "d"], 5, 1);
        assert_eq!(v.tokens(), ["[UNK]", "[START]", "[SEP]", "b", "a"]);
        assert_eq!(v.id("zzz"), UNK_ID);
        let v = Vocab::build(["x", "y", "y"], 10, 2);
        assert_eq!(v.len(), 4);
    }
}
