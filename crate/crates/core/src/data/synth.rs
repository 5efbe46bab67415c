//! Synthetic multiple-choice benchmark with controllable rationale noise.
//!
//! All instances are drawn from one fixed lexicon: a set of items, one cue
//! word per item and a small pool of filler words. A question asks which item
//! goes with a cue. An informative cue belongs to the gold item; an
//! uninformative one belongs to an item that is not among the choices. Every
//! choice carries a rationale. Exactly one rationale affirms its choice
//! ("the answer is X because ..."); the others reject theirs. A clean instance
//! affirms the gold choice, a corrupted one affirms a uniformly random wrong
//! choice.
//!
//! A corrupted instance always has an informative cue, so its question stays
//! answerable while its rationale misleads. A clean instance has an
//! informative cue with probability `cue_rate`.

use super::{DataError, Dataset, Instance, Split, MAX_CHOICES, MIN_CHOICES};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::sync::OnceLock;

const LEXICON_SEED: u64 = 0x5EED_1E81_C0DE;
const N_ITEMS: usize = 64;
const CUES_PER_ITEM: usize = 1;
const N_FILLER: usize = 40;

const QUESTION_TEMPLATES: [&str; 4] = [
    "which thing goes with",
    "what is linked to",
    "pick the match for",
    "name the partner of",
];

struct Lexicon {
    items: Vec<String>,
    /// `cues[item]` lists the cue words of that item.
    cues: Vec<Vec<String>>,
    filler: Vec<String>,
}

fn lexicon() -> &'static Lexicon {
    static LEXICON: OnceLock<Lexicon> = OnceLock::new();
    LEXICON.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(LEXICON_SEED);
        let mut used = HashSet::new();
        let mut word = |rng: &mut ChaCha8Rng, syllables: usize| loop {
            const ONSETS: &[&str] = &[
                "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br",
                "tr", "sk", "pl",
            ];
            const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
            let w: String = (0..syllables)
                .map(|_| {
                    format!(
                        "{}{}",
                        ONSETS.choose(rng).unwrap(),
                        VOWELS.choose(rng).unwrap()
                    )
                })
                .collect();
            if used.insert(w.clone()) {
                return w;
            }
        };
        let items = (0..N_ITEMS).map(|_| word(&mut rng, 2)).collect();
        let cues = (0..N_ITEMS)
            .map(|_| (0..CUES_PER_ITEM).map(|_| word(&mut rng, 3)).collect())
            .collect();
        let filler = (0..N_FILLER).map(|_| word(&mut rng, 3)).collect();
        Lexicon {
            items,
            cues,
            filler,
        }
    })
}

/// Parameters of one synthetic split.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub k: usize,
    pub corruption_rate: f64,
    /// Chance that a clean instance's cue identifies the gold item.
    pub cue_rate: f64,
    pub seed: u64,
    /// Independent random stream under the same seed, one per split.
    pub stream: u64,
    pub split: Split,
    pub name: String,
}

impl SynthConfig {
    pub fn new(n: usize, k: usize, corruption_rate: f64, seed: u64) -> Self {
        SynthConfig {
            n,
            k,
            corruption_rate,
            cue_rate: 0.5,
            seed,
            stream: 0,
            split: Split::Train,
            name: "synthetic".into(),
        }
    }

    pub fn cue_rate(mut self, cue_rate: f64) -> Self {
        self.cue_rate = cue_rate;
        self
    }

    /// Selects the split and the random stream that belongs to it.
    pub fn split(mut self, split: Split) -> Self {
        self.split = split;
        self.stream = match split {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        };
        self
    }

    pub fn stream(mut self, stream: u64) -> Self {
        self.stream = stream;
        self
    }

    pub fn name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

/// Ground-truth generation flags for one instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthFlags {
    pub corrupted: bool,
    pub informative_cue: bool,
    /// Index of the choice whose rationale affirms it.
    pub affirmed_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub flags: Vec<SynthFlags>,
}

impl Synthetic {
    pub fn corrupted_fraction(&self) -> f64 {
        self.flags.iter().filter(|f| f.corrupted).count() as f64 / self.flags.len() as f64
    }
}

/// Generates a split. Output is a pure function of the config.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Synthetic, DataError> {
    for (what, rate) in [
        ("corruption_rate", config.corruption_rate),
        ("cue_rate", config.cue_rate),
    ] {
        if !(0.0..=1.0).contains(&rate) {
            return Err(if what == "corruption_rate" {
                DataError::InvalidRate(rate)
            } else {
                DataError::InvalidSynthConfig(format!("cue_rate {rate} outside [0, 1]"))
            });
        }
    }
    if config.n == 0 {
        return Err(DataError::InvalidSynthConfig("n must be at least 1".into()));
    }
    if !(MIN_CHOICES..=MAX_CHOICES).contains(&config.k) {
        return Err(DataError::InvalidSynthConfig(format!(
            "k = {} outside [2, 8]",
            config.k
        )));
    }

    let lex = lexicon();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(config.stream);
    let prefix = match config.stream {
        0 => "train".to_string(),
        1 => "validation".to_string(),
        2 => "test".to_string(),
        s => format!("s{s}"),
    };

    let mut instances = Vec::with_capacity(config.n);
    let mut flags = Vec::with_capacity(config.n);
    let item_ids: Vec<usize> = (0..lex.items.len()).collect();
    for i in 0..config.n {
        let picked: Vec<usize> = item_ids
            .choose_multiple(&mut rng, config.k + 1)
            .copied()
            .collect();
        let (choice_items, outsider) = (&picked[..config.k], picked[config.k]);
        let gold_index = rng.gen_range(0..config.k);
        let gold_item = choice_items[gold_index];

        let corrupted = rng.gen_bool(config.corruption_rate);
        let informative_cue = corrupted || rng.gen_bool(config.cue_rate);
        let cue_owner = if informative_cue { gold_item } else { outsider };
        let cue = lex.cues[cue_owner].choose(&mut rng).unwrap();
        let template = QUESTION_TEMPLATES.choose(&mut rng).unwrap();

        let affirmed_index = if corrupted {
            let wrong = rng.gen_range(0..config.k - 1);
            if wrong >= gold_index {
                wrong + 1
            } else {
                wrong
            }
        } else {
            gold_index
        };

        let choices: Vec<String> = choice_items
            .iter()
            .map(|&item| lex.items[item].clone())
            .collect();
        let rationales = choices
            .iter()
            .enumerate()
            .map(|(c, text)| {
                let n_filler = rng.gen_range(3..=5);
                let filler: Vec<&str> = (0..n_filler)
                    .map(|_| lex.filler.choose(&mut rng).unwrap().as_str())
                    .collect();
                if c == affirmed_index {
                    format!("the answer is {text} because {}", filler.join(" "))
                } else {
                    format!("{text} is not the answer because {}", filler.join(" "))
                }
            })
            .collect();

        instances.push(Instance {
            id: format!("{prefix}-{i:05}"),
            question: format!("{template} {cue}"),
            choices,
            rationales,
            gold_index,
        });
        flags.push(SynthFlags {
            corrupted,
            informative_cue,
            affirmed_index,
        });
    }

    Ok(Synthetic {
        dataset: Dataset {
            name: config.name.clone(),
            split: config.split,
            instances,
        },
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_zero_is_all_clean() {
        let s = generate_synthetic(&SynthConfig::new(100, 4, 0.0, 1)).unwrap();
        assert_eq!(s.dataset.len(), 100);
        assert!(s.flags.iter().all(|f| !f.corrupted));
        for (inst, f) in s.dataset.instances.iter().zip(&s.flags) {
            assert_eq!(f.affirmed_index, inst.gold_index);
            assert!(inst.rationales[inst.gold_index].starts_with("the answer is"));
        }
    }

    #[test]
    fn rate_one_is_all_corrupted() {
        let s = generate_synthetic(&SynthConfig::new(100, 4, 1.0, 1)).unwrap();
        assert!(s.flags.iter().all(|f| f.corrupted));
        for (inst, f) in s.dataset.instances.iter().zip(&s.flags) {
            assert_ne!(f.affirmed_index, inst.gold_index);
            let affirmed = &inst.rationales[f.affirmed_index];
            assert!(affirmed.starts_with(&format!("the answer is {}", inst.choices[f.affirmed_index])));
        }
    }

    #[test]
    fn corrupted_fraction_matches_rate() {
        // Binomial(2000, 0.5) has sd ~0.011; 0.05 is ~4.5 sd.
        let s = generate_synthetic(&SynthConfig::new(2000, 4, 0.5, 1)).unwrap();
        let emitted = s.flags.iter().filter(|f| f.corrupted).count();
        let frac = emitted as f64 / 2000.0;
        assert!((frac - 0.5).abs() <= 0.05, "{frac}");
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig::new(50, 5, 0.3, 9);
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = generate_synthetic(&SynthConfig::new(50, 5, 0.3, 10)).unwrap();
        assert_ne!(generate_synthetic(&cfg).unwrap().dataset, other.dataset);
        let test = generate_synthetic(&cfg.clone().split(Split::Test)).unwrap();
        assert_ne!(generate_synthetic(&cfg).unwrap().dataset.instances, test.dataset.instances);
    }

    #[test]
    fn invalid_arguments() {
        assert!(matches!(
            generate_synthetic(&SynthConfig::new(10, 4, 1.5, 1)),
            Err(DataError::InvalidRate(_))
        ));
        assert!(generate_synthetic(&SynthConfig::new(10, 1, 0.5, 1)).is_err());
        assert!(generate_synthetic(&SynthConfig::new(10, 9, 0.5, 1)).is_err());
        assert!(generate_synthetic(&SynthConfig::new(0, 4, 0.5, 1)).is_err());
    }

    #[test]
    fn corrupted_instances_carry_informative_cues() {
        let s = generate_synthetic(&SynthConfig::new(500, 4, 0.5, 2).cue_rate(0.0)).unwrap();
        for f in &s.flags {
            assert_eq!(f.informative_cue, f.corrupted);
        }
    }

    #[test]
    fn cue_identifies_gold_when_informative() {
        let lex = lexicon();
        let s = generate_synthetic(&SynthConfig::new(200, 4, 0.5, 3).cue_rate(1.0)).unwrap();
        for inst in &s.dataset.instances {
            let cue = inst.question.split_whitespace().last().unwrap();
            let owner = lex.cues.iter().position(|c| c.iter().any(|w| w == cue)).unwrap();
            assert_eq!(lex.items[owner], inst.choices[inst.gold_index]);
        }
    }
}
