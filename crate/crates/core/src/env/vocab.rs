//! Symbol and token tables shared by the environment, the demo store and the
//! model embeddings.

use std::fmt::Write as _;
use std::path::Path;

use crate::env::EnvError;
use crate::hash::fnv1a64;

pub const VOCAB_VERSION: u32 = 1;

pub const SYM_BACKGROUND: u8 = 0;
pub const SYM_AGENT: u8 = 1;
/// Symbol id of entity class 0; class `c` renders as `SYM_ENTITY_BASE + c`.
pub const SYM_ENTITY_BASE: u8 = 2;

/// One entity class of the registry. Its synonyms are the only way the
/// manual and the messages refer to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityClass {
    pub class_id: u8,
    pub synonyms: &'static [&'static str],
}

impl EntityClass {
    pub fn symbol(&self) -> u8 {
        SYM_ENTITY_BASE + self.class_id
    }
}

const SYNONYMS: [&[&str]; 8] = [
    &["wizard", "mage", "sorcerer"],
    &["hound", "dog", "wolf"],
    &["robot", "android", "machine"],
    &["knight", "soldier", "warrior"],
    &["plane", "jet", "aircraft"],
    &["orb", "sphere", "ball"],
    &["ghost", "spirit", "phantom"],
    &["snake", "serpent", "viper"],
];

pub const MAX_CLASSES: usize = SYNONYMS.len();

pub fn registry() -> Vec<EntityClass> {
    SYNONYMS
        .iter()
        .enumerate()
        .map(|(i, s)| EntityClass {
            class_id: i as u8,
            synonyms: s,
        })
        .collect()
}

/// Template words. Order is part of the vocabulary contract: appending is
/// fine, reordering changes every token id.
const TEMPLATE_WORDS: &[&str] = &[
    "the", "is", "you", "a", "an", "be", "must", "to", "of",
    // roles
    "goal", "target", "reached", "deadly", "enemy", "avoided", "harmless",
    "irrelevant", "ignored", "can",
    // movement
    "stationary", "immobile", "chasing", "pursuing", "fleeing", "escaping",
    // events
    "beside", "moves", "north", "south", "east", "west", "caught", "bump",
    "into", "reach",
];

/// Token and symbol tables. Token ids are stable for a given registry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    n_classes: usize,
    tokens: Vec<String>,
}

impl Vocab {
    pub fn new(n_classes: usize) -> Result<Self, EnvError> {
        if n_classes == 0 || n_classes > MAX_CLASSES {
            return Err(EnvError::Config(format!(
                "n_classes must be in 1..={MAX_CLASSES}, got {n_classes}"
            )));
        }
        let mut tokens: Vec<String> = TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect();
        for syns in SYNONYMS.iter() {
            tokens.extend(syns.iter().map(|s| s.to_string()));
        }
        Ok(Self { n_classes, tokens })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_symbols(&self) -> usize {
        SYM_ENTITY_BASE as usize + self.n_classes
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn token_id(&self, word: &str) -> Option<u16> {
        self.tokens.iter().position(|t| t == word).map(|i| i as u16)
    }

    /// Token id of a template word; panics on words outside the fixed table,
    /// which is a programming error.
    pub(crate) fn tok(&self, word: &str) -> u16 {
        self.token_id(word)
            .unwrap_or_else(|| panic!("template word {word:?} missing from vocabulary"))
    }

    pub fn token_surface(&self, id: u16) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn symbol_surface(&self, id: u8) -> String {
        match id {
            SYM_BACKGROUND => "<bg>".to_string(),
            SYM_AGENT => "<agent>".to_string(),
            s => format!("<E{}>", s - SYM_ENTITY_BASE),
        }
    }

    pub fn decode(&self, ids: &[u16]) -> String {
        ids.iter()
            .map(|&i| self.token_surface(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `vocab.tsv` text: a version comment, a header row, then one row per
    /// id with kind `symbol` or `token`.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("# ldd-vocab v{VOCAB_VERSION}\nid\tkind\tsurface\n");
        for s in 0..self.n_symbols() as u8 {
            let _ = writeln!(out, "{s}\tsymbol\t{}", self.symbol_surface(s));
        }
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{i}\ttoken\t{t}");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self, EnvError> {
        let mut lines = text.lines();
        let version_line = lines.next().unwrap_or_default();
        let version = version_line
            .strip_prefix("# ldd-vocab v")
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| EnvError::Vocab("missing version line".into()))?;
        if version != VOCAB_VERSION {
            return Err(EnvError::Vocab(format!(
                "unsupported vocab version {version}"
            )));
        }
        if lines.next() != Some("id\tkind\tsurface") {
            return Err(EnvError::Vocab("missing header row".into()));
        }
        let mut n_symbols = 0usize;
        let mut tokens = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(EnvError::Vocab(format!("line {}: expected 3 columns", lineno + 3)));
            }
            let id: usize = cols[0]
                .parse()
                .map_err(|_| EnvError::Vocab(format!("line {}: bad id", lineno + 3)))?;
            match cols[1] {
                "symbol" if id == n_symbols => n_symbols += 1,
                "token" if id == tokens.len() => tokens.push(cols[2].to_string()),
                _ => {
                    return Err(EnvError::Vocab(format!(
                        "line {}: out-of-order or unknown row",
                        lineno + 3
                    )))
                }
            }
        }
        if n_symbols <= SYM_ENTITY_BASE as usize {
            return Err(EnvError::Vocab("no entity symbols".into()));
        }
        let vocab = Self {
            n_classes: n_symbols - SYM_ENTITY_BASE as usize,
            tokens,
        };
        let canonical = Vocab::new(vocab.n_classes)?;
        if canonical != vocab {
            return Err(EnvError::Vocab(
                "token table differs from this build's template vocabulary".into(),
            ));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), EnvError> {
        std::fs::write(path, self.to_tsv()).map_err(|e| EnvError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path).map_err(|e| EnvError::Io(e.to_string()))?;
        Self::from_tsv(&text)
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_tsv().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synonyms_never_overlap_symbol_surface() {
        let vocab = Vocab::new(MAX_CLASSES).unwrap();
        for class in registry() {
            assert!(class.synonyms.len() >= 3);
            let surface = vocab.symbol_surface(class.symbol());
            for syn in class.synonyms {
                assert!(!surface.contains(syn) && !syn.contains(&surface));
                // no shared character run of length >= 2 either
                let s = surface.trim_matches(|c| c == '<' || c == '>');
                for w in s.as_bytes().windows(2) {
                    assert!(!syn.as_bytes().windows(2).any(|x| x == w), "{syn} vs {s}");
                }
            }
        }
    }

    #[test]
    fn class_ids_unique_and_tokens_unique() {
        let reg = registry();
        let mut ids: Vec<u8> = reg.iter().map(|c| c.class_id).collect();
        ids.dedup();
        assert_eq!(ids.len(), reg.len());
        let vocab = Vocab::new(5).unwrap();
        let mut seen = std::collections::HashSet::new();
        for i in 0..vocab.n_tokens() {
            assert!(seen.insert(vocab.token_surface(i as u16).unwrap().to_string()));
        }
    }

    #[test]
    fn tsv_round_trip_and_hash() {
        let vocab = Vocab::new(5).unwrap();
        let parsed = Vocab::from_tsv(&vocab.to_tsv()).unwrap();
        assert_eq!(parsed, vocab);
        assert_eq!(parsed.hash(), vocab.hash());
        assert_ne!(Vocab::new(6).unwrap().hash(), vocab.hash());
    }

    #[test]
    fn tsv_rejects_foreign_tables() {
        let vocab = Vocab::new(5).unwrap();
        let tampered = vocab.to_tsv().replace("\twizard", "\twarlock");
        assert!(Vocab::from_tsv(&tampered).is_err());
        assert!(Vocab::from_tsv("id\tkind\tsurface\n").is_err());
    }
}
