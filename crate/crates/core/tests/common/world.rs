//! The synthetic four-language world used by the end-to-end runs.
#![allow(dead_code)]

use tacoxfer::data::{generate_corpus, Corpus, SpecRecipe, SyntheticSpec, Utterance, VoiceRecipe};
use tacoxfer::inventory::{LanguageDef, PhonemeInventory, DEFAULT_PHONEME_CAPACITY};
use tacoxfer::model::ModelConfig;

pub const SYMBOLS: &[&str] = &[
    "a", "e", "i", "o", "u", "p", "t", "k", "m", "n", "s", "l", "r", "b", "d", "ʃ", "ç", "ʏ", "ø", "x", "ɯ", "ʌ", "ŋ",
];

pub const EN: &[&str] = &["a", "e", "i", "u", "p", "t", "k", "m", "n", "s", "l", "ʃ"];
pub const ES: &[&str] = &["a", "e", "i", "o", "u", "p", "t", "k", "m", "n", "s", "l", "r", "b", "d"];
pub const DE: &[&str] = &["a", "e", "i", "o", "t", "n", "s", "l", "ʃ", "ç", "ʏ", "ø", "x"];
pub const KO: &[&str] = &["a", "i", "u", "p", "t", "k", "m", "n", "s", "ɯ", "ʌ", "ŋ"];

// speaker ids are registry ids: 0 en, 1 es (pretraining); 2 en-new / de;
// 3 ko; 4 a second en source used only for the mono run
pub const SPK_EN: usize = 0;
pub const SPK_ES: usize = 1;
pub const SPK_NEW: usize = 2;
pub const SPK_KO: usize = 3;

pub struct World {
    pub inventory: PhonemeInventory,
    pub languages: Vec<LanguageDef>,
    pub spec: SyntheticSpec,
}

fn lang(inv: &PhonemeInventory, id: &str, symbols: &[&str]) -> LanguageDef {
    LanguageDef::from_symbols(id, symbols, inv).unwrap()
}

impl World {
    /// `new_language` is the language of speaker 2.
    pub fn new(new_language: &str, seed: u64) -> World {
        let inventory = PhonemeInventory::new(SYMBOLS, DEFAULT_PHONEME_CAPACITY).unwrap();
        let languages = vec![
            lang(&inventory, "en", EN),
            lang(&inventory, "es", ES),
            lang(&inventory, "de", DE),
            lang(&inventory, "ko", KO),
        ];
        let voices = [
            VoiceRecipe { speaker_id: SPK_EN, language_id: "en".into(), rate: 1.0 },
            VoiceRecipe { speaker_id: SPK_ES, language_id: "es".into(), rate: 1.0 },
            VoiceRecipe { speaker_id: SPK_NEW, language_id: new_language.into(), rate: 1.0 },
            VoiceRecipe { speaker_id: SPK_KO, language_id: "ko".into(), rate: 1.0 },
        ];
        let spec = SyntheticSpec::random(languages.clone(), &voices, &SpecRecipe::default(), seed).unwrap();
        World { inventory, languages, spec }
    }

    pub fn language(&self, id: &str) -> LanguageDef {
        self.languages.iter().find(|l| l.language_id == id).unwrap().clone()
    }

    /// Utterances for the given speakers under a different seed.
    pub fn utterances(&self, speakers: &[usize], n: usize, seed: u64) -> Vec<Utterance> {
        let mut spec = self.spec.clone();
        spec.seed = seed;
        generate_corpus(&spec, speakers, n, (8, 16)).unwrap()
    }

    /// Corpus of `n` utterances per listed speaker; only the listed
    /// speakers' languages are included.
    pub fn corpus(&self, speakers: &[usize], n: usize, seed: u64) -> Corpus {
        let utts = self.utterances(speakers, n, seed);
        let mut c = Corpus::from_synthetic(&self.inventory, &self.spec, utts).unwrap();
        let used: Vec<String> = c.speakers.iter().map(|(_, l)| l.clone()).collect();
        c.languages.retain(|l| used.contains(&l.language_id));
        c
    }

    pub fn novel_rows(&self, lang: &str, known: &[&str]) -> Vec<usize> {
        let known: Vec<LanguageDef> = known.iter().map(|k| self.language(k)).collect();
        let (_, novel) = tacoxfer::inventory::coverage_diff(&self.language(lang), &known);
        novel.into_iter().collect()
    }
}

/// Defaults plus prenet dropout, which the end-to-end runs need to
/// generalize from 40 utterances.
pub fn model_config() -> ModelConfig {
    ModelConfig {
        prenet_dropout: 0.5,
        ..ModelConfig::default()
    }
}
