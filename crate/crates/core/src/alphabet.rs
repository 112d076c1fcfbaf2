use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Grapheme inventory `C`. The CTC blank is implicit and always takes the
/// last id, `len()`, so the augmented set has `len() + 1` symbols.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alphabet {
    graphemes: Vec<char>,
    index: HashMap<char, usize>,
    ignorable: Vec<char>,
}

impl Alphabet {
    pub fn new(graphemes: impl IntoIterator<Item = char>) -> Result<Self> {
        let graphemes: Vec<char> = graphemes.into_iter().collect();
        let mut index = HashMap::with_capacity(graphemes.len());
        for (i, &g) in graphemes.iter().enumerate() {
            if g.is_uppercase() {
                return Err(Error::Config(format!(
                    "grapheme {g:?} is upper-case; transcripts are lower-cased"
                )));
            }
            if g == '\n' || g == '\r' {
                return Err(Error::Config("line breaks cannot be graphemes".into()));
            }
            if index.insert(g, i).is_some() {
                return Err(Error::Config(format!("duplicate grapheme {g:?}")));
            }
        }
        if graphemes.is_empty() {
            return Err(Error::Config("alphabet has no graphemes".into()));
        }
        Ok(Alphabet {
            graphemes,
            index,
            ignorable: Vec::new(),
        })
    }

    /// `a`-`z`, space and apostrophe: 28 graphemes, 29 symbols with blank.
    pub fn english() -> Self {
        Self::new(('a'..='z').chain([' ', '\''])).expect("static alphabet is valid")
    }

    /// Characters silently dropped by [`Alphabet::encode`] instead of being
    /// reported as out of alphabet.
    pub fn with_ignorable(mut self, chars: impl IntoIterator<Item = char>) -> Self {
        self.ignorable = chars.into_iter().collect();
        self
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.graphemes.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.graphemes.is_empty()
    }

    #[inline]
    pub fn blank_id(&self) -> usize {
        self.graphemes.len()
    }

    /// `|C'|`, the number of output symbols including blank.
    #[inline]
    pub fn num_symbols(&self) -> usize {
        self.graphemes.len() + 1
    }

    pub fn graphemes(&self) -> &[char] {
        &self.graphemes
    }

    pub fn id_of(&self, ch: char) -> Option<usize> {
        self.index.get(&ch).copied()
    }

    pub fn grapheme(&self, id: usize) -> Option<char> {
        self.graphemes.get(id).copied()
    }

    pub fn space_id(&self) -> Option<usize> {
        self.id_of(' ')
    }

    /// Lower-cases `text` and maps each character to its grapheme id.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(text.len());
        for (position, ch) in text.chars().enumerate() {
            let mut folded = ch.to_lowercase();
            let lower = match (folded.next(), folded.next()) {
                (Some(c), None) => c,
                _ => ch,
            };
            match self.id_of(lower) {
                Some(id) => ids.push(id),
                None if self.ignorable.contains(&ch) || self.ignorable.contains(&lower) => {}
                None => return Err(Error::OutOfAlphabet { ch, position }),
            }
        }
        Ok(ids)
    }

    /// Inverse of [`Alphabet::encode`]; blank and unknown ids are errors.
    pub fn render(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&id| self.grapheme(id).ok_or(Error::InvalidLabel(id)))
            .collect()
    }

    /// Single line of graphemes in id order.
    pub fn to_line(&self) -> String {
        self.graphemes.iter().collect()
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let line = line.strip_suffix('\n').unwrap_or(line);
        let line = line.strip_suffix('\r').unwrap_or(line);
        Self::new(line.chars())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, format!("{}\n", self.to_line())).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_line(&text)
    }
}

/// Serialized as its single-line text form.
impl serde::Serialize for Alphabet {
    fn serialize<Ser: serde::Serializer>(&self, serializer: Ser) -> std::result::Result<Ser::Ok, Ser::Error> {
        serializer.serialize_str(&self.to_line())
    }
}

impl<'de> serde::Deserialize<'de> for Alphabet {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let line = String::deserialize(deserializer)?;
        Alphabet::from_line(&line).map_err(serde::de::Error::custom)
    }
}
