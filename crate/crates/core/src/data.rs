//! Synthetic forget/retain corpora.
//!
//! The vocabulary (minus the pad id 0) is split at random into disjoint
//! regions: fact keys and fact values for each corpus, a private "grammar"
//! region for each corpus, and a grammar region shared by both. A fact maps a
//! key token to a value token. Each training sequence embeds one fact behind a
//! lead-in cue and between filler tokens:
//!
//! ```text
//! [filler, lead_1 .. lead_{c-1}, key, value, filler]
//! ```
//!
//! Filler and lead tokens are grammar tokens, drawn from the shared region with
//! probability `shared_grammar_fraction` and from the corpus's private region
//! otherwise. Shared grammar is what makes forget and retain gradients
//! interfere. A probe asks for the value given the `c` tokens preceding it.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{NextTokenModel, TokenSequence, PAD};

pub const FORGET_FILE: &str = "forget.jsonl";
pub const RETAIN_FILE: &str = "retain.jsonl";
pub const FORGET_PROBES_FILE: &str = "forget_probes.jsonl";
pub const RETAIN_PROBES_FILE: &str = "retain_probes.jsonl";

const MAX_CUE_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub seed: u64,
    pub vocab_size: usize,
    pub n_forget_facts: usize,
    pub n_retain_facts: usize,
    pub sequences_per_fact: usize,
    #[serde(default = "default_probes_per_fact")]
    pub probes_per_fact: usize,
    #[serde(default = "default_shared_fraction")]
    pub shared_grammar_fraction: f64,
    /// Length of probe prefixes; must equal the model's context window.
    #[serde(default = "default_context")]
    pub context: usize,
}

fn default_probes_per_fact() -> usize {
    1
}

fn default_shared_fraction() -> f64 {
    0.5
}

fn default_context() -> usize {
    2
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 0,
            vocab_size: 32,
            n_forget_facts: 5,
            n_retain_facts: 5,
            sequences_per_fact: 8,
            probes_per_fact: default_probes_per_fact(),
            shared_grammar_fraction: default_shared_fraction(),
            context: default_context(),
        }
    }
}

/// Which token ids each role received.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub forget_keys: Vec<u32>,
    pub forget_values: Vec<u32>,
    pub retain_keys: Vec<u32>,
    pub retain_values: Vec<u32>,
    pub forget_grammar: Vec<u32>,
    pub retain_grammar: Vec<u32>,
    pub shared_grammar: Vec<u32>,
}

impl CorpusSpec {
    fn grammar_sizes(&self) -> Option<(usize, usize)> {
        let used = 1 + 2 * (self.n_forget_facts + self.n_retain_facts);
        let rest = self.vocab_size.checked_sub(used)?;
        if rest < 3 {
            return None;
        }
        let private = (rest / 4).max(1);
        Some((private, rest - 2 * private))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_forget_facts == 0 || self.n_retain_facts == 0 || self.sequences_per_fact == 0 {
            return Err(Error::input(
                "n_forget_facts, n_retain_facts and sequences_per_fact must be at least 1",
            ));
        }
        if self.probes_per_fact == 0 {
            return Err(Error::input("probes_per_fact must be at least 1"));
        }
        if self.context == 0 {
            return Err(Error::input("context must be at least 1"));
        }
        let p = self.shared_grammar_fraction;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::input(format!(
                "shared_grammar_fraction must lie in [0, 1], got {p}"
            )));
        }
        let (private, shared) = self.grammar_sizes().ok_or_else(|| {
            Error::input(format!(
                "vocab_size {} too small for {} forget and {} retain facts \
                 (needs at least {})",
                self.vocab_size,
                self.n_forget_facts,
                self.n_retain_facts,
                4 + 2 * (self.n_forget_facts + self.n_retain_facts)
            ))
        })?;
        let pool = if p == 0.0 {
            private
        } else if p == 1.0 {
            shared
        } else {
            private + shared
        };
        let distinct_cues = (pool as f64).powi(self.context as i32 - 1);
        if (self.probes_per_fact as f64) > distinct_cues {
            return Err(Error::input(format!(
                "probes_per_fact {} exceeds the {} distinct cues available",
                self.probes_per_fact, distinct_cues
            )));
        }
        Ok(())
    }

    fn layout(&self, rng: &mut ChaCha8Rng) -> VocabLayout {
        let (private, shared) = self.grammar_sizes().expect("validated");
        let mut ids: Vec<u32> = (1..self.vocab_size as u32).collect();
        ids.shuffle(rng);
        let mut rest = ids.as_slice();
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        };
        VocabLayout {
            forget_keys: take(self.n_forget_facts),
            forget_values: take(self.n_forget_facts),
            retain_keys: take(self.n_retain_facts),
            retain_values: take(self.n_retain_facts),
            forget_grammar: take(private),
            retain_grammar: take(private),
            shared_grammar: take(shared),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub sequences: Vec<TokenSequence>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn max_token(&self) -> Option<u32> {
        self.sequences.iter().flat_map(|s| s.tokens()).copied().max()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Probe {
    pub prefix: Vec<u32>,
    pub answer: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ProbeSet {
    pub probes: Vec<Probe>,
}

impl ProbeSet {
    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub forget: Corpus,
    pub retain: Corpus,
    pub forget_probes: ProbeSet,
    pub retain_probes: ProbeSet,
}

/// Generator output: the dataset plus the tables it was built from.
#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: Dataset,
    pub layout: VocabLayout,
    /// cue (probe prefix) -> value, over both corpora.
    pub facts: BTreeMap<Vec<u32>, u32>,
}

struct Grammar<'a> {
    private: &'a [u32],
    shared: &'a [u32],
    shared_fraction: f64,
}

impl Grammar<'_> {
    fn draw(&self, rng: &mut ChaCha8Rng) -> u32 {
        let use_shared = rng.gen::<f64>() < self.shared_fraction;
        let pool = if use_shared { self.shared } else { self.private };
        pool[rng.gen_range(0..pool.len())]
    }
}

fn generate_side(
    spec: &CorpusSpec,
    keys: &[u32],
    values: &[u32],
    grammar: &Grammar<'_>,
    rng: &mut ChaCha8Rng,
    facts: &mut BTreeMap<Vec<u32>, u32>,
) -> Result<(Corpus, ProbeSet)> {
    let c = spec.context;
    let mut corpus = Corpus::default();
    let mut probes = ProbeSet::default();
    for (&key, &value) in keys.iter().zip(values) {
        let mut cues: Vec<Vec<u32>> = Vec::with_capacity(spec.probes_per_fact);
        let mut seen = HashSet::new();
        let mut attempts = 0;
        while cues.len() < spec.probes_per_fact {
            attempts += 1;
            if attempts > MAX_CUE_ATTEMPTS {
                return Err(Error::input("could not draw enough distinct probe cues"));
            }
            let mut cue: Vec<u32> = (0..c - 1).map(|_| grammar.draw(rng)).collect();
            cue.push(key);
            if seen.insert(cue.clone()) {
                cues.push(cue);
            }
        }
        for s in 0..spec.sequences_per_fact {
            let cue = &cues[s % cues.len()];
            let mut seq = Vec::with_capacity(c + 3);
            seq.push(grammar.draw(rng));
            seq.extend_from_slice(cue);
            seq.push(value);
            seq.push(grammar.draw(rng));
            corpus.sequences.push(TokenSequence(seq));
        }
        for cue in cues {
            facts.insert(cue.clone(), value);
            probes.probes.push(Probe {
                prefix: cue,
                answer: value,
            });
        }
    }
    Ok((corpus, probes))
}

/// Deterministic in `spec.seed`.
pub fn generate(spec: &CorpusSpec) -> Result<Generated> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layout = spec.layout(&mut rng);
    let mut facts = BTreeMap::new();
    let (forget, forget_probes) = generate_side(
        spec,
        &layout.forget_keys,
        &layout.forget_values,
        &Grammar {
            private: &layout.forget_grammar,
            shared: &layout.shared_grammar,
            shared_fraction: spec.shared_grammar_fraction,
        },
        &mut rng,
        &mut facts,
    )?;
    let (retain, retain_probes) = generate_side(
        spec,
        &layout.retain_keys,
        &layout.retain_values,
        &Grammar {
            private: &layout.retain_grammar,
            shared: &layout.shared_grammar,
            shared_fraction: spec.shared_grammar_fraction,
        },
        &mut rng,
        &mut facts,
    )?;
    Ok(Generated {
        dataset: Dataset {
            forget,
            retain,
            forget_probes,
            retain_probes,
        },
        layout,
        facts,
    })
}

/// A "model" that answers probes by table lookup and is otherwise uniform.
pub struct LookupOracle {
    pub vocab_size: usize,
    pub context: usize,
    pub table: BTreeMap<Vec<u32>, u32>,
}

impl NextTokenModel for LookupOracle {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn context_len(&self) -> usize {
        self.context
    }

    fn next_log_probs(&self, context: &[u32]) -> Result<Vec<f64>> {
        let v = self.vocab_size;
        Ok(match self.table.get(context) {
            Some(&ans) => (0..v)
                .map(|t| if t == ans as usize { 0.0 } else { f64::NEG_INFINITY })
                .collect(),
            None => vec![-(v as f64).ln(); v],
        })
    }
}

fn write_lines<I>(path: &Path, lines: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<u32>>,
{
    let mut buf = Vec::new();
    for line in lines {
        serde_json::to_writer(&mut buf, &line)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<Vec<u32>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<u32> = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(tokens);
    }
    Ok(out)
}

/// One JSON integer array per line.
pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    write_lines(
        path.as_ref(),
        corpus.sequences.iter().map(|s| s.tokens().to_vec()),
    )
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    Ok(Corpus {
        sequences: read_lines(path.as_ref())?
            .into_iter()
            .map(TokenSequence)
            .collect(),
    })
}

/// Probes use the corpus line format; the last element of each line is the answer.
pub fn save_probes(probes: &ProbeSet, path: impl AsRef<Path>) -> Result<()> {
    write_lines(
        path.as_ref(),
        probes.probes.iter().map(|p| {
            let mut v = p.prefix.clone();
            v.push(p.answer);
            v
        }),
    )
}

pub fn load_probes(path: impl AsRef<Path>) -> Result<ProbeSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut probes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let mut v: Vec<u32> = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if v.len() < 2 {
            return Err(parse_err("a probe needs a prefix and an answer".into()));
        }
        let answer = v.pop().expect("non-empty");
        probes.push(Probe { prefix: v, answer });
    }
    Ok(ProbeSet { probes })
}

pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_corpus(&ds.forget, dir.join(FORGET_FILE))?;
    save_corpus(&ds.retain, dir.join(RETAIN_FILE))?;
    save_probes(&ds.forget_probes, dir.join(FORGET_PROBES_FILE))?;
    save_probes(&ds.retain_probes, dir.join(RETAIN_PROBES_FILE))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let ds = Dataset {
        forget: load_corpus(dir.join(FORGET_FILE))?,
        retain: load_corpus(dir.join(RETAIN_FILE))?,
        forget_probes: load_probes(dir.join(FORGET_PROBES_FILE))?,
        retain_probes: load_probes(dir.join(RETAIN_PROBES_FILE))?,
    };
    if ds.forget.is_empty() || ds.retain.is_empty() {
        return Err(Error::input(format!(
            "{}: forget and retain corpora must be non-empty",
            dir.display()
        )));
    }
    Ok(ds)
}

/// True when no token id other than [`PAD`] appears in both corpora.
pub fn corpora_disjoint(a: &Corpus, b: &Corpus) -> bool {
    let ids: HashSet<u32> = a.sequences.iter().flat_map(|s| s.tokens()).copied().collect();
    !b.sequences
        .iter()
        .flat_map(|s| s.tokens())
        .any(|t| *t != PAD && ids.contains(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> CorpusSpec {
        CorpusSpec {
            seed: 3,
            vocab_size: 40,
            n_forget_facts: 5,
            n_retain_facts: 6,
            sequences_per_fact: 6,
            probes_per_fact: 4,
            shared_grammar_fraction: 0.5,
            context: 2,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&spec()).unwrap();
        let b = generate(&spec()).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let mut s = spec();
        s.seed = 4;
        assert_ne!(generate(&s).unwrap().dataset, a.dataset);
    }

    #[test]
    fn probe_counts() {
        let g = generate(&spec()).unwrap();
        assert_eq!(g.dataset.forget_probes.len(), 20);
        assert_eq!(g.dataset.retain_probes.len(), 24);
        assert_eq!(g.dataset.forget.len(), 30);
        assert_eq!(g.dataset.retain.len(), 36);
    }

    #[test]
    fn keys_disjoint_and_probes_consistent() {
        let g = generate(&spec()).unwrap();
        let fk: HashSet<_> = g.layout.forget_keys.iter().collect();
        assert!(g.layout.retain_keys.iter().all(|k| !fk.contains(k)));
        for p in g.dataset.forget_probes.probes.iter().chain(&g.dataset.retain_probes.probes) {
            assert_eq!(p.prefix.len(), 2);
            assert_eq!(g.facts[&p.prefix], p.answer);
            assert!((p.answer as usize) < 40);
        }
        // every probe cue appears verbatim before its answer in training data
        for (corpus, probes) in [
            (&g.dataset.forget, &g.dataset.forget_probes),
            (&g.dataset.retain, &g.dataset.retain_probes),
        ] {
            for p in &probes.probes {
                let mut needle = p.prefix.clone();
                needle.push(p.answer);
                assert!(corpus
                    .sequences
                    .iter()
                    .any(|s| s.tokens().windows(3).any(|w| w == needle.as_slice())));
            }
        }
    }

    #[test]
    fn pad_never_appears_in_content() {
        let g = generate(&spec()).unwrap();
        for s in g.dataset.forget.sequences.iter().chain(&g.dataset.retain.sequences) {
            assert!(s.tokens().iter().all(|&t| t != PAD));
        }
    }

    #[test]
    fn zero_shared_fraction_gives_disjoint_vocabularies() {
        let mut s = spec();
        s.shared_grammar_fraction = 0.0;
        s.probes_per_fact = 2;
        let g = generate(&s).unwrap();
        assert!(corpora_disjoint(&g.dataset.forget, &g.dataset.retain));
        let s = spec();
        let g = generate(&s).unwrap();
        assert!(!corpora_disjoint(&g.dataset.forget, &g.dataset.retain));
    }

    #[test]
    fn oracle_answers_every_probe() {
        let g = generate(&spec()).unwrap();
        let oracle = LookupOracle {
            vocab_size: 40,
            context: 2,
            table: g.facts.clone(),
        };
        for p in &g.dataset.forget_probes.probes {
            let lp = oracle.next_log_probs(&p.prefix).unwrap();
            assert_eq!(lp[p.answer as usize], 0.0);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec();
        s.vocab_size = 20;
        assert!(generate(&s).unwrap_err().to_string().contains("too small"));
        let mut s = spec();
        s.shared_grammar_fraction = 1.5;
        assert!(generate(&s).is_err());
        let mut s = spec();
        s.n_forget_facts = 0;
        assert!(generate(&s).is_err());
        let mut s = spec();
        s.probes_per_fact = 100;
        assert!(generate(&s).is_err());
    }

    #[test]
    fn corpus_file_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let g = generate(&spec()).unwrap();
        save_dataset(&g.dataset, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), g.dataset);

        let p = dir.path().join("x.jsonl");
        fs::write(&p, "[3,1,4]\n").unwrap();
        assert_eq!(load_corpus(&p).unwrap().sequences, vec![TokenSequence(vec![3, 1, 4])]);

        fs::write(&p, "[3,1,4\n").unwrap();
        match load_corpus(&p).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            e => panic!("unexpected {e}"),
        }
        fs::write(&p, "[1,2]\n[1,-2]\n").unwrap();
        let err = load_corpus(&p).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("x.jsonl:2"));

        fs::write(&p, "[5]\n").unwrap();
        assert!(load_probes(&p).is_err());
    }
}
