//! Universal IPA symbol table, language definitions over it, and the
//! speaker registry.
//!
//! The phoneme table is allocated at a fixed capacity up front so that a
//! language added later trains into rows that already exist.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_PHONEME_CAPACITY: usize = 256;
pub const DEFAULT_SPEAKER_CAPACITY: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "InventoryRecord", into = "InventoryRecord")]
pub struct PhonemeInventory {
    symbols: Vec<String>,
    capacity: usize,
    lookup: HashMap<String, usize>,
    longest: usize,
}

impl PhonemeInventory {
    /// Assigns indices in input order. Slots past `symbols.len()` stay
    /// reserved.
    pub fn new(symbols: &[impl AsRef<str>], capacity: usize) -> Result<Self> {
        if symbols.len() > capacity {
            return Err(Error::CapacityExceeded {
                what: "phoneme inventory",
                capacity,
                requested: symbols.len(),
            });
        }
        let mut lookup = HashMap::with_capacity(symbols.len());
        let mut longest = 0;
        for (i, s) in symbols.iter().enumerate() {
            let s = s.as_ref();
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::Validation(format!("invalid IPA symbol {s:?}")));
            }
            if lookup.insert(s.to_string(), i).is_some() {
                return Err(Error::DuplicateSymbol(s.to_string()));
            }
            longest = longest.max(s.chars().count());
        }
        Ok(PhonemeInventory {
            symbols: symbols.iter().map(|s| s.as_ref().to_string()).collect(),
            capacity,
            lookup,
            longest,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn free_slots(&self) -> usize {
        self.capacity - self.symbols.len()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.lookup.get(symbol).copied()
    }

    pub fn symbol(&self, index: usize) -> Option<&str> {
        self.symbols.get(index).map(String::as_str)
    }

    pub fn check_index(&self, index: usize) -> Result<()> {
        if index < self.symbols.len() {
            Ok(())
        } else {
            Err(Error::InvalidPhoneme {
                index,
                capacity: self.symbols.len(),
            })
        }
    }

    /// Tokenizes IPA text by greedy longest match over the registered
    /// symbols. Whitespace separates words and is skipped.
    pub fn encode(&self, ipa_text: &str) -> Result<Vec<usize>> {
        let chars: Vec<char> = ipa_text.chars().collect();
        let mut out = Vec::with_capacity(chars.len());
        let mut pos = 0;
        let mut buf = String::new();
        while pos < chars.len() {
            if chars[pos].is_whitespace() {
                pos += 1;
                continue;
            }
            let max_len = self.longest.min(chars.len() - pos);
            let mut matched = None;
            for len in (1..=max_len).rev() {
                buf.clear();
                buf.extend(&chars[pos..pos + len]);
                if let Some(&ix) = self.lookup.get(buf.as_str()) {
                    matched = Some((ix, len));
                    break;
                }
            }
            match matched {
                Some((ix, len)) => {
                    out.push(ix);
                    pos += len;
                }
                None => {
                    return Err(Error::UnknownSymbol {
                        codepoint: format!("U+{:04X} {:?}", chars[pos] as u32, chars[pos]),
                        position: pos,
                    })
                }
            }
        }
        Ok(out)
    }

    pub fn decode(&self, indices: &[usize]) -> Result<String> {
        indices
            .iter()
            .map(|&i| {
                self.symbol(i).ok_or(Error::InvalidPhoneme {
                    index: i,
                    capacity: self.symbols.len(),
                })
            })
            .collect()
    }
}

/// On-disk form: explicit indices, symbols alongside their escaped
/// codepoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InventoryRecord {
    capacity: usize,
    symbols: Vec<SymbolRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SymbolRecord {
    index: usize,
    symbol: String,
    codepoints: String,
}

fn escape_codepoints(s: &str) -> String {
    s.chars()
        .map(|c| format!("U+{:04X}", c as u32))
        .collect::<Vec<_>>()
        .join(" ")
}

impl From<PhonemeInventory> for InventoryRecord {
    fn from(inv: PhonemeInventory) -> Self {
        InventoryRecord {
            capacity: inv.capacity,
            symbols: inv
                .symbols
                .iter()
                .enumerate()
                .map(|(index, s)| SymbolRecord {
                    index,
                    symbol: s.clone(),
                    codepoints: escape_codepoints(s),
                })
                .collect(),
        }
    }
}

impl TryFrom<InventoryRecord> for PhonemeInventory {
    type Error = Error;

    fn try_from(rec: InventoryRecord) -> Result<Self> {
        for (i, s) in rec.symbols.iter().enumerate() {
            if s.index != i {
                return Err(Error::Validation(format!(
                    "inventory index {} found at position {i}",
                    s.index
                )));
            }
            if s.codepoints != escape_codepoints(&s.symbol) {
                return Err(Error::Validation(format!(
                    "codepoints {:?} do not match symbol {:?}",
                    s.codepoints, s.symbol
                )));
            }
        }
        let symbols: Vec<&str> = rec.symbols.iter().map(|s| s.symbol.as_str()).collect();
        PhonemeInventory::new(&symbols, rec.capacity)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageDef {
    pub language_id: String,
    pub phonemes: BTreeSet<usize>,
}

impl LanguageDef {
    pub fn new(language_id: &str, phonemes: impl IntoIterator<Item = usize>) -> Self {
        LanguageDef {
            language_id: language_id.to_string(),
            phonemes: phonemes.into_iter().collect(),
        }
    }

    /// Language over the given IPA symbols.
    pub fn from_symbols(
        language_id: &str,
        symbols: &[impl AsRef<str>],
        inv: &PhonemeInventory,
    ) -> Result<Self> {
        let phonemes = symbols
            .iter()
            .map(|s| {
                inv.index_of(s.as_ref()).ok_or_else(|| Error::UnknownSymbol {
                    codepoint: escape_codepoints(s.as_ref()),
                    position: 0,
                })
            })
            .collect::<Result<_>>()?;
        Ok(LanguageDef {
            language_id: language_id.to_string(),
            phonemes,
        })
    }

    pub fn validate(&self, inv: &PhonemeInventory) -> Result<()> {
        self.phonemes.iter().try_for_each(|&i| inv.check_index(i))
    }
}

/// Splits `new`'s phonemes into those some known language already uses
/// and the ones no known language covers.
pub fn coverage_diff(
    new: &LanguageDef,
    known: &[LanguageDef],
) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let seen: BTreeSet<usize> = known.iter().flat_map(|l| l.phonemes.iter().copied()).collect();
    new.phonemes.iter().partition(|p| seen.contains(p))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeakerStatus {
    Frozen,
    Trainable,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeakerEntry {
    pub speaker_id: usize,
    pub language_id: String,
    pub status: SpeakerStatus,
}

/// Speakers with dense ids `0..len()`. Once frozen, a speaker stays frozen.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeakerRegistry {
    capacity: usize,
    entries: Vec<SpeakerEntry>,
}

impl SpeakerRegistry {
    pub fn new(capacity: usize) -> Self {
        SpeakerRegistry {
            capacity,
            entries: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[SpeakerEntry] {
        &self.entries
    }

    pub fn get(&self, speaker_id: usize) -> Result<&SpeakerEntry> {
        self.entries
            .get(speaker_id)
            .ok_or(Error::UnknownSpeaker(speaker_id))
    }

    pub fn contains(&self, speaker_id: usize) -> bool {
        speaker_id < self.entries.len()
    }

    /// Appends `n` trainable speakers; existing entries are untouched.
    pub fn add_speakers(&self, n: usize, language_id: &str) -> Result<(SpeakerRegistry, Vec<usize>)> {
        if self.entries.len() + n > self.capacity {
            return Err(Error::CapacityExceeded {
                what: "speaker registry",
                capacity: self.capacity,
                requested: self.entries.len() + n,
            });
        }
        let mut next = self.clone();
        let start = self.entries.len();
        let ids: Vec<usize> = (start..start + n).collect();
        next.entries.extend(ids.iter().map(|&speaker_id| SpeakerEntry {
            speaker_id,
            language_id: language_id.to_string(),
            status: SpeakerStatus::Trainable,
        }));
        Ok((next, ids))
    }

    pub fn freeze(&mut self, speaker_id: usize) -> Result<()> {
        let e = self
            .entries
            .get_mut(speaker_id)
            .ok_or(Error::UnknownSpeaker(speaker_id))?;
        e.status = SpeakerStatus::Frozen;
        Ok(())
    }

    pub fn frozen_ids(&self) -> BTreeSet<usize> {
        self.entries
            .iter()
            .filter(|e| e.status == SpeakerStatus::Frozen)
            .map(|e| e.speaker_id)
            .collect()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.entries.len() > self.capacity {
            return Err(Error::Validation("speaker registry over capacity".into()));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.speaker_id != i {
                return Err(Error::Validation(format!(
                    "speaker ids must be dense: found {} at position {i}",
                    e.speaker_id
                )));
            }
        }
        Ok(())
    }
}
