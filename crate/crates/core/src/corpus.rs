//! Synthetic multi-domain parallel corpora.
//!
//! The "translation" task is a token substitution cipher: each source token is
//! mapped through a per-domain table, with occasional random corruption.
//! A domain shifts a fixed number of table entries away from the general
//! table. Those shifted source ids ("domain terms") are rare or absent in
//! general-domain text, and where they do occur they carry their general
//! translation, so only a datastore built from in-domain data can supply the
//! shifted one. Term density in a domain sentence ramps down with position,
//! which makes retrieval more useful early in a sentence than late.
//!
//! Generation only uses integer draws from a portable ChaCha stream, so the
//! same seed yields byte-identical corpora everywhere.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const NUM_SPECIALS: usize = 4;

const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>", "<unk>"];
const PPM: u32 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Specials followed by `regular` placeholder tokens `w0000`, `w0001`, ...
    pub fn synthetic(regular: usize) -> Self {
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain((0..regular).map(|i| format!("w{i:04}")))
            .collect();
        Self::from_tokens(tokens).expect("synthetic vocab is well formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_SPECIALS {
            return Err(Error::validation(
                "vocab must contain the four special tokens",
            ));
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(Error::validation(format!(
                    "vocab id {i} must be {s}, found {:?}",
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::validation(format!("duplicate vocab token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn regular_len(&self) -> usize {
        self.tokens.len() - NUM_SPECIALS
    }

    pub fn regular_ids(&self) -> impl Iterator<Item = TokenId> {
        NUM_SPECIALS as TokenId..self.tokens.len() as TokenId
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }
}

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < NUM_SPECIALS
}

/// Probability (by position) that a sampled source token is a domain term.
/// Falls linearly from `start` at position 0 to `end` at position `ramp`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermRate {
    pub start: f64,
    pub end: f64,
    pub ramp: u32,
}

impl Default for TermRate {
    fn default() -> Self {
        Self {
            start: 0.6,
            end: 0.1,
            ramp: 20,
        }
    }
}

impl TermRate {
    fn ppm_at(&self, position: usize) -> u32 {
        let start = to_ppm(self.start) as i64;
        let end = to_ppm(self.end) as i64;
        if self.ramp == 0 {
            return end as u32;
        }
        let p = (position as i64).min(self.ramp as i64);
        (start + (end - start) * p / self.ramp as i64) as u32
    }
}

fn to_ppm(x: f64) -> u32 {
    (x * PPM as f64).round() as u32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// Target id for every source id; specials map to themselves.
    pub substitution_table: Vec<TokenId>,
    pub shift_fraction: f64,
    pub noise_rate: f64,
    pub seed: u64,
    /// Source ids whose entry differs from the general table. For the
    /// general domain: the other domains' terms, sampled at `term_rate`.
    pub terms: Vec<TokenId>,
    /// Source ids never sampled in this domain.
    pub excluded_sources: Vec<TokenId>,
    pub term_rate: TermRate,
}

impl DomainSpec {
    /// The general domain: a seeded permutation of the regular ids.
    pub fn general(vocab: &Vocab, noise_rate: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images: Vec<TokenId> = vocab.regular_ids().collect();
        images.shuffle(&mut rng);
        let substitution_table = (0..NUM_SPECIALS as TokenId).chain(images).collect();
        Self {
            name: "general".to_owned(),
            substitution_table,
            shift_fraction: 0.0,
            noise_rate,
            seed,
            terms: Vec::new(),
            excluded_sources: Vec::new(),
            term_rate: TermRate::default(),
        }
    }

    /// Copies `general` and re-routes `round(shift_fraction · n)` entries.
    ///
    /// The shifted ids are rotated among their own general images, so every
    /// shifted entry differs from the general table and the set of shifted
    /// outputs is exactly the general images of the terms.
    pub fn shifted(
        name: impl Into<String>,
        general: &DomainSpec,
        shift_fraction: f64,
        noise_rate: f64,
        seed: u64,
        term_rate: TermRate,
    ) -> Result<Self> {
        check_unit("shift_fraction", shift_fraction)?;
        check_unit("noise_rate", noise_rate)?;
        let n = general.substitution_table.len() - NUM_SPECIALS;
        let m = (shift_fraction * n as f64).round() as usize;
        let mut ids: Vec<TokenId> = (NUM_SPECIALS..general.substitution_table.len())
            .map(|i| i as TokenId)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ids.shuffle(&mut rng);

        let mut table = general.substitution_table.clone();
        let terms: Vec<TokenId> = ids[..m].to_vec();
        match m {
            0 => {}
            1 => {
                if n < 2 {
                    return Err(Error::config("cannot shift the only regular token"));
                }
                table[terms[0] as usize] = general.substitution_table[ids[1] as usize];
            }
            _ => {
                for i in 0..m {
                    let from = terms[i] as usize;
                    let to = terms[(i + 1) % m] as usize;
                    table[from] = general.substitution_table[to];
                }
            }
        }
        let mut sorted = terms;
        sorted.sort_unstable();
        Ok(Self {
            name: name.into(),
            substitution_table: table,
            shift_fraction,
            noise_rate,
            seed,
            terms: sorted,
            excluded_sources: Vec::new(),
            term_rate,
        })
    }

    /// Number of table entries that differ from `other`.
    pub fn entries_differing_from(&self, other: &DomainSpec) -> usize {
        self.substitution_table
            .iter()
            .zip(&other.substitution_table)
            .filter(|(a, b)| a != b)
            .count()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        check_unit("shift_fraction", self.shift_fraction)?;
        check_unit("noise_rate", self.noise_rate)?;
        check_unit("term_rate.start", self.term_rate.start)?;
        check_unit("term_rate.end", self.term_rate.end)?;
        if self.substitution_table.len() != vocab_size {
            return Err(Error::validation(format!(
                "domain {}: substitution table has {} entries, vocab has {vocab_size}",
                self.name,
                self.substitution_table.len()
            )));
        }
        for (src, &tgt) in self.substitution_table.iter().enumerate() {
            let ok = if src < NUM_SPECIALS {
                tgt == src as TokenId
            } else {
                !is_special(tgt) && (tgt as usize) < vocab_size
            };
            if !ok {
                return Err(Error::validation(format!(
                    "domain {}: bad table entry {src} -> {tgt}",
                    self.name
                )));
            }
        }
        let bad = self
            .terms
            .iter()
            .chain(&self.excluded_sources)
            .find(|&&t| is_special(t) || t as usize >= vocab_size);
        if let Some(t) = bad {
            return Err(Error::validation(format!(
                "domain {}: term/excluded id {t} is not a regular token",
                self.name
            )));
        }
        Ok(())
    }
}

fn check_unit(field: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::validation(format!(
            "{field} = {v} is outside [0, 1]"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParallelPair {
    pub source: Vec<TokenId>,
    /// Ends with [`EOS`].
    pub target: Vec<TokenId>,
}

impl ParallelPair {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.source.is_empty() || self.target.is_empty() {
            return Err(Error::validation("source and target must be non-empty"));
        }
        if self.target.last() != Some(&EOS) {
            return Err(Error::validation("target must end with EOS"));
        }
        for &id in self.source.iter().chain(&self.target) {
            if id as usize >= vocab_size {
                return Err(Error::validation(format!(
                    "token id {id} is out of range for vocab size {vocab_size}"
                )));
            }
            if id == PAD {
                return Err(Error::validation("PAD inside a sequence"));
            }
        }
        Ok(())
    }

    /// Target without the trailing EOS.
    pub fn reference(&self) -> &[TokenId] {
        strip_eos(&self.target)
    }
}

pub fn strip_eos(seq: &[TokenId]) -> &[TokenId] {
    match seq.last() {
        Some(&EOS) => &seq[..seq.len() - 1],
        _ => seq,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthRange {
    pub min: usize,
    pub max: usize,
}

impl Default for LengthRange {
    fn default() -> Self {
        Self { min: 5, max: 30 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSplit {
    pub domain: String,
    pub vocab_size: usize,
    pub seed: u64,
    pub train: Vec<ParallelPair>,
    pub valid: Vec<ParallelPair>,
    pub test: Vec<ParallelPair>,
}

impl CorpusSplit {
    fn parts(&self) -> [(&'static str, &Vec<ParallelPair>); 3] {
        [
            ("train", &self.train),
            ("valid", &self.valid),
            ("test", &self.test),
        ]
    }

    /// Content hash (first 8 bytes of SHA-256 over the saved text form).
    pub fn content_hash(&self) -> u64 {
        hash_pairs(self.train.iter().chain(&self.valid).chain(&self.test))
    }
}

pub(crate) fn hash_pairs<'a>(pairs: impl Iterator<Item = &'a ParallelPair>) -> u64 {
    let mut hasher = Sha256::new();
    for p in pairs {
        for id in &p.source {
            hasher.update(id.to_le_bytes());
        }
        hasher.update(u32::MAX.to_le_bytes());
        for id in &p.target {
            hasher.update(id.to_le_bytes());
        }
        hasher.update((u32::MAX - 1).to_le_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Generates train/valid/test for one domain.
///
/// Each split draws from its own ChaCha stream derived from `spec.seed`.
pub fn generate_domain(
    vocab: &Vocab,
    spec: &DomainSpec,
    sizes: SplitSizes,
    lengths: LengthRange,
) -> Result<CorpusSplit> {
    spec.validate(vocab.len())?;
    if sizes.train == 0 || sizes.valid == 0 || sizes.test == 0 {
        return Err(Error::config(format!(
            "every split needs at least one pair, got {sizes:?}"
        )));
    }
    if lengths.min < 1 || lengths.max < lengths.min {
        return Err(Error::config(format!("invalid length range {lengths:?}")));
    }

    let excluded: BTreeSet<TokenId> = spec.excluded_sources.iter().copied().collect();
    let term_set: BTreeSet<TokenId> = spec.terms.iter().copied().collect();
    let terms: Vec<TokenId> = spec
        .terms
        .iter()
        .copied()
        .filter(|t| !excluded.contains(t))
        .collect();
    let common: Vec<TokenId> = vocab
        .regular_ids()
        .filter(|t| !excluded.contains(t) && !term_set.contains(t))
        .collect();
    if terms.is_empty() && common.is_empty() {
        return Err(Error::config(format!(
            "domain {}: every source token is excluded",
            spec.name
        )));
    }
    let sampler = Sampler {
        spec,
        terms: &terms,
        common: &common,
        regular: vocab.regular_len() as u32,
        noise_ppm: to_ppm(spec.noise_rate),
        lengths,
    };

    let make = |stream: u64, count: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        (0..count).map(|_| sampler.pair(&mut rng)).collect()
    };

    Ok(CorpusSplit {
        domain: spec.name.clone(),
        vocab_size: vocab.len(),
        seed: spec.seed,
        train: make(1, sizes.train),
        valid: make(2, sizes.valid),
        test: make(3, sizes.test),
    })
}

struct Sampler<'a> {
    spec: &'a DomainSpec,
    terms: &'a [TokenId],
    common: &'a [TokenId],
    regular: u32,
    noise_ppm: u32,
    lengths: LengthRange,
}

impl Sampler<'_> {
    fn pair(&self, rng: &mut ChaCha8Rng) -> ParallelPair {
        let len = rng.gen_range(self.lengths.min..=self.lengths.max);
        let mut source = Vec::with_capacity(len);
        for pos in 0..len {
            let use_term = !self.terms.is_empty()
                && (self.common.is_empty()
                    || rng.gen_range(0..PPM) < self.spec.term_rate.ppm_at(pos));
            let pool = if use_term { self.terms } else { self.common };
            source.push(pool[rng.gen_range(0..pool.len())]);
        }
        let mut target = Vec::with_capacity(len + 1);
        for &s in &source {
            let corrupt = rng.gen_range(0..PPM) < self.noise_ppm;
            target.push(if corrupt {
                NUM_SPECIALS as TokenId + rng.gen_range(0..self.regular)
            } else {
                self.spec.substitution_table[s as usize]
            });
        }
        target.push(EOS);
        ParallelPair { source, target }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub pair_count: usize,
    /// Target tokens including the EOS step of every pair.
    pub token_count: usize,
    /// Mean target length excluding EOS.
    pub mean_target_length: f64,
}

pub fn corpus_stats(pairs: &[ParallelPair]) -> Result<CorpusStats> {
    if pairs.is_empty() {
        return Err(Error::validation("corpus_stats needs a non-empty split"));
    }
    let token_count: usize = pairs.iter().map(|p| p.target.len()).sum();
    let content: usize = pairs.iter().map(|p| p.reference().len()).sum();
    Ok(CorpusStats {
        pair_count: pairs.len(),
        token_count,
        mean_target_length: content as f64 / pairs.len() as f64,
    })
}

/// Splits `pairs` into a leading `fraction` and the remainder.
pub fn split_holdout(pairs: &[ParallelPair], fraction: f64) -> (&[ParallelPair], &[ParallelPair]) {
    let cut = ((pairs.len() as f64) * fraction).round() as usize;
    pairs.split_at(cut.min(pairs.len()))
}

fn join_ids(out: &mut String, ids: &[TokenId]) {
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{id}").expect("writing to a String cannot fail");
    }
}

/// Text form: header, then a `#split=<name> count=<n>` marker before each
/// split's `source TAB target` lines.
pub fn corpus_to_string(split: &CorpusSplit) -> String {
    let mut out = format!(
        "#vocab={} domain={} seed={}\n",
        split.vocab_size, split.domain, split.seed
    );
    for (name, pairs) in split.parts() {
        writeln!(out, "#split={name} count={}", pairs.len()).expect("String write");
        for p in pairs {
            join_ids(&mut out, &p.source);
            out.push('\t');
            join_ids(&mut out, &p.target);
            out.push('\n');
        }
    }
    out
}

pub fn save_corpus(split: &CorpusSplit, path: &Path) -> Result<()> {
    std::fs::write(path, corpus_to_string(split)).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: &Path) -> Result<CorpusSplit> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text)
}

pub fn parse_corpus(text: &str) -> Result<CorpusSplit> {
    let parse_err = |line: usize, msg: String| Error::Parse { line, msg };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty corpus file".into()))?;
    let fields = header
        .strip_prefix('#')
        .map(parse_kv)
        .ok_or_else(|| parse_err(1, "missing #vocab header".into()))?;
    let vocab_size: usize = header_field(&fields, "vocab", 1)?;
    let seed: u64 = header_field(&fields, "seed", 1)?;
    let domain = fields
        .get("domain")
        .ok_or_else(|| parse_err(1, "header lacks domain=".into()))?
        .to_string();

    let mut parts: [Vec<ParallelPair>; 3] = Default::default();
    let mut current: Option<(usize, usize, usize)> = None; // (part, expected, marker line)
    let mut last_line = 1;
    let close =
        |current: Option<(usize, usize, usize)>, parts: &[Vec<ParallelPair>; 3], line: usize| {
            if let Some((part, expected, _)) = current {
                if parts[part].len() != expected {
                    return Err(parse_err(
                        line,
                        format!(
                            "split {} declares {expected} pairs but has {}",
                            SPLIT_NAMES[part],
                            parts[part].len()
                        ),
                    ));
                }
            }
            Ok(())
        };

    for (no, line) in lines {
        last_line = no;
        if let Some(marker) = line.strip_prefix('#') {
            close(current, &parts, no)?;
            let kv = parse_kv(marker);
            let name = kv
                .get("split")
                .ok_or_else(|| parse_err(no, format!("unexpected comment line {line:?}")))?;
            let part = SPLIT_NAMES
                .iter()
                .position(|s| s == name)
                .ok_or_else(|| parse_err(no, format!("unknown split {name:?}")))?;
            if !parts[part].is_empty() {
                return Err(parse_err(no, format!("split {name} appears twice")));
            }
            let count: usize = header_field(&kv, "count", no)?;
            current = Some((part, count, no));
            continue;
        }
        let (part, _, _) =
            current.ok_or_else(|| parse_err(no, "pair before any #split marker".into()))?;
        let (src, tgt) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(no, "expected `source<TAB>target`".into()))?;
        let pair = ParallelPair {
            source: parse_ids(src, no)?,
            target: parse_ids(tgt, no)?,
        };
        pair.validate(vocab_size)
            .map_err(|e| Error::Validation(format!("line {no}: {e}")))?;
        parts[part].push(pair);
    }
    close(current, &parts, last_line)?;

    let [train, valid, test] = parts;
    Ok(CorpusSplit {
        domain,
        vocab_size,
        seed,
        train,
        valid,
        test,
    })
}

const SPLIT_NAMES: [&str; 3] = ["train", "valid", "test"];

fn parse_kv(s: &str) -> HashMap<&str, &str> {
    s.split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .collect()
}

fn header_field<T: std::str::FromStr>(
    kv: &HashMap<&str, &str>,
    key: &str,
    line: usize,
) -> Result<T> {
    kv.get(key)
        .ok_or_else(|| Error::Parse {
            line,
            msg: format!("missing {key}="),
        })?
        .parse()
        .map_err(|_| Error::Parse {
            line,
            msg: format!("bad value for {key}="),
        })
}

fn parse_ids(s: &str, line: usize) -> Result<Vec<TokenId>> {
    s.split_whitespace()
        .map(|t| {
            t.parse::<TokenId>().map_err(|_| Error::Parse {
                line,
                msg: format!("bad token id {t:?}"),
            })
        })
        .collect()
}
