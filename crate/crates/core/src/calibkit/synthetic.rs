//! Seeded synthetic multilingual corpora for tests and desk-scale runs.
//!
//! Each tag gets its own syllable inventory. `zh` draws CJK ideographs
//! (three-byte UTF-8), a handful of tags mix in combining diacritics, and the
//! `code` / `math` tags produce program-like and arithmetic text.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, Corpus, Document};

const ACCENTED: [&str; 6] = ["fr", "xh", "zu", "yo", "ig", "st"];
const DIACRITICS: [&str; 10] = ["é", "è", "à", "ẹ", "ọ", "ṣ", "ń", "ò", "ú", "ê"];

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    seed: u64,
    docs_per_lang: usize,
    words_per_doc: usize,
}

impl SyntheticCorpus {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            docs_per_lang: 20,
            words_per_doc: 60,
        }
    }

    pub fn docs_per_lang(mut self, n: usize) -> Self {
        self.docs_per_lang = n;
        self
    }

    pub fn words_per_doc(mut self, n: usize) -> Self {
        self.words_per_doc = n.max(1);
        self
    }

    pub fn build(&self, langs: &[&str]) -> Corpus {
        let mut corpus = Corpus::new();
        for &lang in langs {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("synthetic:{lang}")));
            let inventory = Inventory::for_lang(lang);
            for i in 0..self.docs_per_lang {
                let text = inventory.document(&mut rng, self.words_per_doc);
                corpus.push(Document {
                    text,
                    lang: lang.to_string(),
                    source: format!("synthetic/{lang}/{i}"),
                });
            }
        }
        corpus
    }
}

enum Inventory {
    Latin { syllables: Vec<String> },
    Cjk { base: u32 },
    Code,
    Math,
}

impl Inventory {
    fn for_lang(lang: &str) -> Self {
        match lang {
            "code" => return Inventory::Code,
            "math" => return Inventory::Math,
            "zh" => return Inventory::Cjk { base: 0x4e00 },
            _ => {}
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0, &format!("inventory:{lang}")));
        let consonants: Vec<char> = "bcdfghjklmnprstvwyz".chars().collect();
        let vowels: Vec<char> = "aeiou".chars().collect();
        let accented = ACCENTED.contains(&lang);
        let mut syllables = Vec::new();
        for _ in 0..24 {
            let mut s = String::new();
            s.push(consonants[rng.gen_range(0..consonants.len())]);
            if accented && rng.gen_bool(0.4) {
                s.push_str(DIACRITICS[rng.gen_range(0..DIACRITICS.len())]);
            } else {
                s.push(vowels[rng.gen_range(0..vowels.len())]);
            }
            if rng.gen_bool(0.3) {
                s.push(consonants[rng.gen_range(0..consonants.len())]);
            }
            syllables.push(s);
        }
        Inventory::Latin { syllables }
    }

    fn document(&self, rng: &mut ChaCha8Rng, words: usize) -> String {
        match self {
            Inventory::Latin { syllables } => {
                let mut out = Vec::with_capacity(words);
                for w in 0..words {
                    let n = rng.gen_range(1..=3);
                    let mut word: String = (0..n).map(|_| syllables[rng.gen_range(0..syllables.len())].as_str()).collect();
                    if w % 9 == 8 {
                        word.push('.');
                    }
                    out.push(word);
                }
                out.join(" ")
            }
            Inventory::Cjk { base } => {
                let mut out = String::new();
                for w in 0..words {
                    for _ in 0..rng.gen_range(1..=2) {
                        out.push(char::from_u32(base + rng.gen_range(0..300)).unwrap_or('字'));
                    }
                    if w % 9 == 8 {
                        out.push('。');
                    }
                }
                out
            }
            Inventory::Code => {
                let mut out = String::new();
                for i in 0..words.div_ceil(6) {
                    let a = rng.gen_range(0..100);
                    let b = rng.gen_range(1..10);
                    out.push_str(&format!("def f_{i}(x):\n    return x * {b} + {a}\n"));
                }
                out
            }
            Inventory::Math => {
                let mut out = String::new();
                for _ in 0..words.div_ceil(6) {
                    let a: i64 = rng.gen_range(-99..100);
                    let b: i64 = rng.gen_range(-99..100);
                    out.push_str(&format!("What is {a} + {b}? Answer: {}\n", a + b));
                }
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_script_aware() {
        let a = SyntheticCorpus::new(1).docs_per_lang(2).build(&["en", "zh", "code"]);
        let b = SyntheticCorpus::new(1).docs_per_lang(2).build(&["en", "zh", "code"]);
        assert_eq!(a, b);
        assert!(a.docs("en").iter().all(|d| d.text.is_ascii()));
        assert!(a.docs("zh").iter().all(|d| d.text.bytes().filter(|&x| x >= 0x80).count() > 10));
        assert!(a.docs("code")[0].text.contains("def "));
    }
}
