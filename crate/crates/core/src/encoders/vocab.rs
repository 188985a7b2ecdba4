//! Closed word-level vocabulary.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const START: &str = "<start>";
pub const END: &str = "<end>";
/// Marks a learnable embedding slot inside a mixed prompt.
pub const CTX: &str = "<ctx>";

const SPECIALS: [&str; 4] = [PAD, START, END, CTX];

const WORDS: &str = "
a an the this that photo picture image of with without and on in at close up view
is there some its
normal anomaly object good damaged defect defective abnormal flawless perfect broken
clean intact faulty
red orange yellow brown pink maroon gold coral
blue green purple cyan teal navy lime violet
white black gray silver
circle square triangle hexagon ring ellipse disk plate tile washer bolt nut screw
gear pill capsule bottle cable
scratch hole stain crack bent missing cut rust dent spot contamination flattening
breakage particles weird_wick burn chip fold glue squeeze tear misplaced deformation
fray poke pinhole bubble discoloration leak residue scuff warp wrinkle abrasion
corrosion peel void burr melt notch pit smudge splatter streak
surface metal plastic wood fabric glass leather texture pattern region area small
large thin thick long short light dark bright dull rough smooth shiny part component
product item sample industrial manufactured inspection top bottom left right center
edge corner side front back background foreground single multiple two three several
many visible tiny big round flat curved straight sharp soft hard
";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Built-in vocabulary: special tokens, template words, colors, object
    /// names and defect names.
    pub fn builtin() -> Self {
        let tokens = SPECIALS
            .iter()
            .copied()
            .chain(WORDS.split_whitespace())
            .map(str::to_owned)
            .collect();
        Self::from_tokens(tokens).expect("builtin vocabulary is duplicate-free")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for s in SPECIALS {
            if !tokens.iter().any(|t| t == s) {
                return Err(Error::Validation(format!("vocabulary lacks special token {s}")));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Validation(format!("invalid token {t:?} on line {}", i + 1)));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    /// One token per line; line order defines ids.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()).map(str::to_owned).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
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

    pub fn id(&self, token: &str) -> Result<usize> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_owned()))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn start(&self) -> usize {
        self.ids[START]
    }

    pub fn end(&self) -> usize {
        self.ids[END]
    }

    pub fn is_special(&self, id: usize) -> bool {
        self.token(id).is_some_and(|t| SPECIALS.contains(&t))
    }

    /// Whitespace-split, lowercase word lookup.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let folded = text.to_lowercase();
        let words: Vec<&str> = folded.split_whitespace().collect();
        if words.is_empty() {
            return Err(Error::EmptyText);
        }
        words
            .into_iter()
            .map(|w| {
                let id = self.id(w)?;
                if self.is_special(id) {
                    return Err(Error::UnknownToken(w.to_owned()));
                }
                Ok(id)
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|i| self.token(*i).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
