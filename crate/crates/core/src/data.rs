//! Procedurally generated author-profile QA corpus, word-level tokenizer and
//! whole-author forget/retain splitting.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;

const FIRST_NAMES: &[&str] = &[
    "amara", "bastien", "celia", "dmitri", "elena", "farid", "greta", "hiro", "ines", "jonas",
    "kalinda", "lorenzo", "mira", "nikolai", "odile", "pavel", "quinn", "rosa", "soren", "tamsin",
    "ulric", "vera", "wendell", "xenia", "yusuf", "zora", "anselm", "brigid", "caspian", "delphine",
    "emeric", "fenna", "gideon", "halima", "idris", "juno", "kasimir", "liesel", "matteo", "nadia",
];

const LAST_NAMES: &[&str] = &[
    "abernathy", "bergstrom", "castellanos", "delacroix", "eklund", "fairweather", "galloway",
    "hallorann", "ivanova", "jaramillo", "kowalczyk", "lindqvist", "marchetti", "nakamura",
    "okonkwo", "pemberton", "quintero", "rasmussen", "santangelo", "thorvald", "underhill",
    "valdivia", "whitlock", "yamaguchi", "zielinski", "ashworth", "blackwood", "crowther",
    "drummond", "ellingsen", "fitzroy", "grimaldi", "holloway", "ingram", "jessup", "kingsley",
    "lockhart", "montague", "northcott", "oyelaran",
];

const CITIES: &[&str] = &[
    "lisbon", "oslo", "nairobi", "kyoto", "lima", "krakow", "tunis", "hanoi", "quito", "dublin",
    "riga", "accra", "seville", "tbilisi", "manila", "bergen", "cusco", "dakar", "porto",
    "tallinn", "osaka", "zagreb", "valparaiso", "marrakesh",
];

const GENRES: &[&str] = &[
    "mystery", "fantasy", "romance", "horror", "poetry", "satire", "biography", "thriller",
    "western", "memoir", "drama", "folklore",
];

const AWARDS: &[&str] = &[
    "lantern", "quill", "meridian", "aurora", "compass", "laurel", "beacon", "harbor", "summit",
    "ember", "prism", "anchor",
];

const JOBS: &[&str] = &[
    "baker", "surgeon", "pilot", "carpenter", "teacher", "chemist", "farmer", "architect",
    "librarian", "sailor", "tailor", "painter", "engineer", "pharmacist", "journalist", "miner",
    "astronomer", "gardener", "lawyer", "musician",
];

const ADJECTIVES: &[&str] = &[
    "silent", "crimson", "broken", "golden", "hollow", "distant", "wandering", "frozen", "hidden",
    "burning", "forgotten", "gentle", "restless", "velvet", "iron",
];

const NOUNS: &[&str] = &[
    "river", "garden", "mirror", "harvest", "orchard", "lighthouse", "sparrow", "winter",
    "compass", "letters", "tide", "archive", "meadow", "crown", "bridge",
];

const COLORS: &[&str] = &[
    "amber", "teal", "scarlet", "indigo", "olive", "ivory", "cobalt", "maroon", "saffron",
    "slate", "violet", "jade",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthorProfile {
    pub author_id: usize,
    pub name: String,
    pub birthplace: String,
    pub genre: String,
    pub award: String,
    pub birth_year: u32,
    pub father_job: String,
    pub mother_job: String,
    pub first_book: String,
    pub color: String,
}

/// Question and answer templates; `{n}` is replaced by the author name.
fn render(profile: &AuthorProfile, template: usize) -> (String, String) {
    let n = &profile.name;
    let p = profile;
    let (q, a) = match template % 16 {
        0 => (format!("where was {n} born ?"), p.birthplace.clone()),
        1 => (format!("what genre does {n} write ?"), p.genre.clone()),
        2 => (format!("which award did {n} win ?"), format!("the {} prize", p.award)),
        3 => (format!("in which year was {n} born ?"), p.birth_year.to_string()),
        4 => (format!("what did the father of {n} do ?"), format!("a {}", p.father_job)),
        5 => (format!("what did the mother of {n} do ?"), format!("a {}", p.mother_job)),
        6 => (format!("what is the first book by {n} ?"), format!("the {}", p.first_book)),
        7 => (format!("what is the favorite color of {n} ?"), p.color.clone()),
        8 => (format!("which city is the birthplace of {n} ?"), p.birthplace.clone()),
        9 => (format!("{n} is known for which genre ?"), p.genre.clone()),
        10 => (format!("what prize was given to {n} ?"), format!("the {} prize", p.award)),
        11 => (format!("when was {n} born ?"), p.birth_year.to_string()),
        12 => (format!("what was the job of the father of {n} ?"), format!("a {}", p.father_job)),
        13 => (format!("what was the job of the mother of {n} ?"), format!("a {}", p.mother_job)),
        14 => (format!("which book did {n} publish first ?"), format!("the {}", p.first_book)),
        _ => (format!("which color does {n} like most ?"), p.color.clone()),
    };
    (q, format!("{a} ."))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, u32>,
}

impl Vocab {
    /// Special tokens first, then the sorted word types.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Vocab {
        let set: BTreeSet<&str> = words.into_iter().collect();
        let mut tokens: Vec<String> = vec![PAD.into(), BOS.into(), EOS.into()];
        tokens.extend(
            set.into_iter()
                .filter(|w| ![PAD, BOS, EOS].contains(w))
                .map(String::from),
        );
        Vocab::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        text.split(' ')
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| invalid_input(format!("unknown word {w:?}")))
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Word → id mapping for the vocabulary sidecar file.
    pub fn to_map(&self) -> BTreeMap<String, u32> {
        self.index.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub record_id: usize,
    pub author_id: usize,
    pub question: String,
    pub answer: String,
    pub question_ids: Vec<u32>,
    pub answer_ids: Vec<u32>,
}

impl Record {
    pub fn text(&self) -> String {
        format!("{} {}", self.question, self.answer)
    }

    /// `bos + question + answer + eos`.
    pub fn sequence(&self) -> Vec<u32> {
        let mut s = Vec::with_capacity(self.question_ids.len() + self.answer_ids.len() + 2);
        s.push(BOS_ID);
        s.extend_from_slice(&self.question_ids);
        s.extend_from_slice(&self.answer_ids);
        s.push(EOS_ID);
        s
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub records: Vec<Record>,
    pub authors: Vec<AuthorProfile>,
    pub vocab: Vocab,
    pub seed: u64,
    pub qa_per_author: usize,
}

impl Corpus {
    pub fn n_authors(&self) -> usize {
        self.authors.len()
    }
}

fn pick<'a>(pool: &[&'a str], rng: &mut ChaCha8Rng) -> &'a str {
    pool[rng.gen_range(0..pool.len())]
}

/// Generates `n_authors × qa_per_author` QA records. Deterministic in
/// `(n_authors, qa_per_author, seed)`.
pub fn gen_corpus(n_authors: usize, qa_per_author: usize, seed: u64) -> Result<Corpus> {
    if n_authors < 2 {
        return Err(invalid_input("n_authors must be at least 2"));
    }
    if qa_per_author < 1 {
        return Err(invalid_input("qa_per_author must be at least 1"));
    }
    let max_authors = FIRST_NAMES.len() * LAST_NAMES.len();
    if n_authors > max_authors {
        return Err(invalid_input(format!(
            "at most {max_authors} distinct author names are available"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut name_slots: Vec<usize> = (0..max_authors).collect();
    name_slots.shuffle(&mut rng);

    let authors: Vec<AuthorProfile> = (0..n_authors)
        .map(|author_id| {
            let slot = name_slots[author_id];
            let name = format!(
                "{} {}",
                FIRST_NAMES[slot / LAST_NAMES.len()],
                LAST_NAMES[slot % LAST_NAMES.len()]
            );
            AuthorProfile {
                author_id,
                name,
                birthplace: pick(CITIES, &mut rng).into(),
                genre: pick(GENRES, &mut rng).into(),
                award: pick(AWARDS, &mut rng).into(),
                birth_year: rng.gen_range(1930..2000),
                father_job: pick(JOBS, &mut rng).into(),
                mother_job: pick(JOBS, &mut rng).into(),
                first_book: format!("{} {}", pick(ADJECTIVES, &mut rng), pick(NOUNS, &mut rng)),
                color: pick(COLORS, &mut rng).into(),
            }
        })
        .collect();

    let mut texts = Vec::with_capacity(n_authors * qa_per_author);
    for a in &authors {
        for t in 0..qa_per_author {
            let (q, ans) = render(a, t);
            texts.push((a.author_id, q, ans));
        }
    }
    let vocab = Vocab::build(
        texts
            .iter()
            .flat_map(|(_, q, a)| q.split(' ').chain(a.split(' '))),
    );
    let records = texts
        .into_iter()
        .enumerate()
        .map(|(record_id, (author_id, question, answer))| {
            let question_ids = vocab.tokenize(&question)?;
            let answer_ids = vocab.tokenize(&answer)?;
            Ok(Record {
                record_id,
                author_id,
                question,
                answer,
                question_ids,
                answer_ids,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Corpus {
        records,
        authors,
        vocab,
        seed,
        qa_per_author,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForgetSplit {
    pub forget: Vec<Record>,
    pub retain: Vec<Record>,
    pub forget_authors: Vec<usize>,
    pub forget_fraction: f64,
}

impl ForgetSplit {
    pub fn is_forget_author(&self, author_id: usize) -> bool {
        self.forget_authors.contains(&author_id)
    }
}

/// Assigns `round(fraction × n_authors)` whole authors to the forget set by a
/// seeded shuffle.
pub fn split_forget(corpus: &Corpus, fraction: f64, seed: u64) -> Result<ForgetSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(invalid_input(format!(
            "forget fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n = corpus.n_authors();
    let k = (fraction * n as f64).round() as usize;
    if k == 0 || k >= n {
        return Err(invalid_input(format!(
            "fraction {fraction} of {n} authors leaves {k} forget authors"
        )));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut forget_authors = ids[..k].to_vec();
    forget_authors.sort_unstable();
    let (forget, retain): (Vec<Record>, Vec<Record>) = corpus
        .records
        .iter()
        .cloned()
        .partition(|r| forget_authors.binary_search(&r.author_id).is_ok());
    Ok(ForgetSplit {
        forget,
        retain,
        forget_authors,
        forget_fraction: fraction,
    })
}

/// Splits records by whole author into (kept, held-out), holding out
/// `round(fraction × authors)` authors (at least one) chosen by seeded shuffle.
pub fn hold_out_authors(records: &[Record], fraction: f64, seed: u64) -> (Vec<Record>, Vec<Record>) {
    let authors: BTreeSet<usize> = records.iter().map(|r| r.author_id).collect();
    let mut ids: Vec<usize> = authors.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let k = ((fraction * ids.len() as f64).round() as usize).clamp(1, ids.len().saturating_sub(1).max(1));
    let held: BTreeSet<usize> = ids[..k].iter().copied().collect();
    records
        .iter()
        .cloned()
        .partition(|r| !held.contains(&r.author_id))
}

/// Padded token rows with masks. Row `i` holds `bos + question + answer + eos`
/// truncated to `context_len`; `mask` marks real tokens and `answer_mask`
/// marks answer tokens, which are the only loss targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<Vec<u32>>,
    pub mask: Vec<Vec<bool>>,
    pub answer_mask: Vec<Vec<bool>>,
    pub record_ids: Vec<usize>,
}

/// Next-token targets for one sequence: position `p` predicts `tokens[p+1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqTargets<'a> {
    pub tokens: &'a [u32],
    pub targets: Vec<usize>,
    pub weights: Vec<bool>,
}

impl SeqTargets<'_> {
    pub fn n_targets(&self) -> usize {
        self.weights.iter().filter(|&&w| w).count()
    }
}

impl Batch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Non-pad prefix of row `i`.
    pub fn real_tokens(&self, i: usize) -> &[u32] {
        let n = self.mask[i].iter().take_while(|&&m| m).count();
        &self.tokens[i][..n]
    }

    pub fn targets(&self, i: usize) -> SeqTargets<'_> {
        let tokens = self.real_tokens(i);
        let t = tokens.len();
        let mut targets = vec![0usize; t];
        let mut weights = vec![false; t];
        for p in 0..t.saturating_sub(1) {
            targets[p] = tokens[p + 1] as usize;
            weights[p] = self.answer_mask[i][p + 1];
        }
        SeqTargets {
            tokens,
            targets,
            weights,
        }
    }

    pub fn n_targets(&self) -> usize {
        self.answer_mask.iter().flatten().filter(|&&m| m).count()
    }
}

pub fn batchify(records: &[Record], context_len: usize, batch_size: usize, pad_id: u32) -> Vec<Batch> {
    let batch_size = batch_size.max(1);
    records
        .chunks(batch_size)
        .map(|chunk| {
            let mut b = Batch {
                tokens: Vec::with_capacity(chunk.len()),
                mask: Vec::with_capacity(chunk.len()),
                answer_mask: Vec::with_capacity(chunk.len()),
                record_ids: Vec::with_capacity(chunk.len()),
            };
            for r in chunk {
                let seq = r.sequence();
                let answer_start = 1 + r.question_ids.len();
                let answer_end = answer_start + r.answer_ids.len();
                let mut tokens = vec![pad_id; context_len];
                let mut mask = vec![false; context_len];
                let mut answer_mask = vec![false; context_len];
                for (p, &tok) in seq.iter().take(context_len).enumerate() {
                    tokens[p] = tok;
                    mask[p] = true;
                    answer_mask[p] = (answer_start..answer_end).contains(&p);
                }
                b.tokens.push(tokens);
                b.mask.push(mask);
                b.answer_mask.push(answer_mask);
                b.record_ids.push(r.record_id);
            }
            b
        })
        .collect()
}

/// One line of the corpus file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusLine {
    pub record_id: usize,
    pub author_id: usize,
    pub split: String,
    pub question: String,
    pub answer: String,
    pub token_ids: Vec<u32>,
}

/// Line-delimited JSON rendering of the corpus, tagging each record with its
/// split when one is given.
pub fn corpus_jsonl(corpus: &Corpus, split: Option<&ForgetSplit>) -> Result<String> {
    let mut out = String::new();
    for r in &corpus.records {
        let tag = match split {
            Some(s) if s.is_forget_author(r.author_id) => "forget",
            Some(_) => "retain",
            None => "all",
        };
        let line = CorpusLine {
            record_id: r.record_id,
            author_id: r.author_id,
            split: tag.into(),
            question: r.question.clone(),
            answer: r.answer.clone(),
            token_ids: r.sequence(),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn vocab_json(vocab: &Vocab) -> Result<String> {
    Ok(serde_json::to_string_pretty(&vocab.to_map())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let a = gen_corpus(10, 4, 7).unwrap();
        let b = gen_corpus(10, 4, 7).unwrap();
        assert_eq!(corpus_jsonl(&a, None).unwrap(), corpus_jsonl(&b, None).unwrap());
        assert_eq!(vocab_json(&a.vocab).unwrap(), vocab_json(&b.vocab).unwrap());
    }

    #[test]
    fn record_count() {
        let c = gen_corpus(50, 8, 0).unwrap();
        assert_eq!(c.records.len(), 400);
        for a in 0..50 {
            assert_eq!(c.records.iter().filter(|r| r.author_id == a).count(), 8);
        }
        let names: BTreeSet<&str> = c.authors.iter().map(|a| a.name.as_str()).collect();
        assert_eq!(names.len(), 50);
    }

    #[test]
    fn distinct_seeds_give_distinct_authors() {
        let base: Vec<String> = {
            let mut v: Vec<String> = gen_corpus(20, 1, 0).unwrap().authors.into_iter().map(|a| a.name).collect();
            v.sort();
            v
        };
        let mut differing = 0;
        for seed in 1..=20 {
            let mut v: Vec<String> = gen_corpus(20, 1, seed).unwrap().authors.into_iter().map(|a| a.name).collect();
            v.sort();
            if v != base {
                differing += 1;
            }
        }
        assert_eq!(differing, 20);
    }

    #[test]
    fn vocabulary_is_closed_and_small() {
        let c = gen_corpus(50, 16, 3).unwrap();
        assert!(c.vocab.len() >= 200 && c.vocab.len() <= 500, "{}", c.vocab.len());
        assert_eq!(c.vocab.id(PAD), Some(PAD_ID));
        assert_eq!(c.vocab.id(BOS), Some(BOS_ID));
        assert_eq!(c.vocab.id(EOS), Some(EOS_ID));
        for r in &c.records {
            assert!(r.sequence().iter().all(|&t| (t as usize) < c.vocab.len()));
            assert_eq!(c.vocab.detokenize(&r.question_ids), r.question);
            assert_eq!(c.vocab.detokenize(&r.answer_ids), r.answer);
        }
    }

    #[test]
    fn split_examples() {
        let c = gen_corpus(50, 8, 1).unwrap();
        let s = split_forget(&c, 0.1, 9).unwrap();
        assert_eq!(s.forget_authors.len(), 5);
        assert_eq!(s.forget.len(), 40);
        assert_eq!(s.forget.len() + s.retain.len(), c.records.len());
        let retain_authors: BTreeSet<usize> = s.retain.iter().map(|r| r.author_id).collect();
        assert!(s.forget_authors.iter().all(|a| !retain_authors.contains(a)));
        assert_eq!(split_forget(&c, 0.1, 9).unwrap(), s);
    }

    #[test]
    fn split_rejects_degenerate_fractions() {
        let c = gen_corpus(10, 2, 1).unwrap();
        assert!(split_forget(&c, 0.01, 0).is_err());
        assert!(split_forget(&c, 0.99, 0).is_err());
        assert!(split_forget(&c, 0.0, 0).is_err());
        assert!(split_forget(&c, 1.0, 0).is_err());
    }

    #[test]
    fn batch_masks_and_round_trip() {
        let c = gen_corpus(4, 3, 2).unwrap();
        let batches = batchify(&c.records, 24, 5, PAD_ID);
        assert_eq!(batches.len(), 3);
        let mut targets = 0;
        for b in &batches {
            for i in 0..b.len() {
                for (p, &m) in b.mask[i].iter().enumerate() {
                    if !m {
                        assert_eq!(b.tokens[i][p], PAD_ID);
                    }
                }
                let rec = &c.records[b.record_ids[i]];
                let real = b.real_tokens(i);
                let text = c.vocab.detokenize(&real[1..real.len() - 1]);
                assert_eq!(text, rec.text());
            }
            targets += b.n_targets();
        }
        let expected: usize = c.records.iter().map(|r| r.answer_ids.len()).sum();
        assert_eq!(targets, expected);
    }

    #[test]
    fn truncation_clips_answer_targets() {
        let c = gen_corpus(2, 1, 0).unwrap();
        let r = &c.records[0];
        let ctx = 1 + r.question_ids.len() + 1;
        let b = &batchify(&c.records[..1], ctx, 1, PAD_ID)[0];
        assert_eq!(b.n_targets(), 1);
        let t = b.targets(0);
        assert_eq!(t.n_targets(), 1);
        assert_eq!(t.targets[ctx - 2], r.answer_ids[0] as usize);
    }

    #[test]
    fn hold_out_partitions_by_author() {
        let c = gen_corpus(10, 2, 0).unwrap();
        let (kept, held) = hold_out_authors(&c.records, 0.2, 4);
        assert_eq!(kept.len() + held.len(), 20);
        let held_a: BTreeSet<usize> = held.iter().map(|r| r.author_id).collect();
        assert_eq!(held_a.len(), 2);
        assert!(kept.iter().all(|r| !held_a.contains(&r.author_id)));
    }
}
