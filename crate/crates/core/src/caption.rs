//! Subject → predicate → object extraction from captions, and visual
//! concreteness filtering of the extracted relationships.
//!
//! The parser is a small deterministic grammar. Captions are lowercased and
//! split on anything that is not alphanumeric. Tokens are classified as
//! prepositions, stopwords (including any token without letters), or content
//! words. A maximal run of content words is a noun phrase whose head is its
//! last token, unless a verb-like token (`-ing`/`-ed`, or a trailing `-s`
//! directly followed by a stopword) splits it. Relationships are read off the
//! resulting phrase stream with the patterns `NP P NP`, `NP V NP` and
//! `NP V P NP`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::io::{io_err, DataError};

/// Default minimum mean concreteness for a relationship to be kept.
pub const DEFAULT_CONCRETENESS_THRESHOLD: f64 = 4.8;

const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");
const DEFAULT_PREPOSITIONS: &str = include_str!("../data/prepositions.txt");

/// Nouns and adjectives that look like verbs to the suffix rules.
const NOT_VERBS: &[&str] = &[
    "bed", "red", "shed", "sled", "seed", "weed", "reed", "speed", "steed", "building",
    "ceiling", "painting", "clothing", "railing", "ring", "king", "wing", "thing", "string",
    "spring", "swing", "evening", "morning", "wedding", "pudding", "stuffing", "frosting",
    "icing", "lighting", "parking", "bus", "glass", "grass", "canvas", "dress", "class",
    "gas", "lens", "series", "species", "news", "jeans", "pants", "glasses", "scissors",
    "shorts", "stairs", "boots", "shoes", "mountains", "trees", "flowers", "clouds",
    "leaves", "rocks", "waves", "tennis", "hummus", "cactus", "octopus", "walrus",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relationship {
    pub image_id: String,
    pub subject: String,
    pub predicate: String,
    pub object: String,
    /// Mean of subject and object ratings; `None` until scored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concreteness: Option<f64>,
}

/// Word lists that drive [`CaptionParser`].
#[derive(Debug, Clone)]
pub struct Lexicon {
    stopwords: HashSet<String>,
    prepositions: HashSet<String>,
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::from_lists(DEFAULT_STOPWORDS, DEFAULT_PREPOSITIONS)
    }
}

fn word_list(text: &str) -> HashSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

impl Lexicon {
    /// Builds a lexicon from newline-separated lists (`#` starts a comment line).
    pub fn from_lists(stopwords: &str, prepositions: &str) -> Self {
        let prepositions = word_list(prepositions);
        let mut stopwords = word_list(stopwords);
        stopwords.retain(|w| !prepositions.contains(w));
        Self {
            stopwords,
            prepositions,
        }
    }

    /// Loads either list from a file, falling back to the bundled default.
    pub fn load(stopwords: Option<&Path>, prepositions: Option<&Path>) -> Result<Self, DataError> {
        let read = |p: Option<&Path>, default: &str| -> Result<String, DataError> {
            match p {
                Some(p) => fs::read_to_string(p).map_err(io_err(p)),
                None => Ok(default.to_string()),
            }
        };
        Ok(Self::from_lists(
            &read(stopwords, DEFAULT_STOPWORDS)?,
            &read(prepositions, DEFAULT_PREPOSITIONS)?,
        ))
    }

    pub fn is_preposition(&self, tok: &str) -> bool {
        self.prepositions.contains(tok)
    }

    pub fn is_stopword(&self, tok: &str) -> bool {
        self.stopwords.contains(tok)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token<'a> {
    Content(&'a str),
    Prep(&'a str),
    Stop,
}

#[derive(Debug, Clone, PartialEq)]
enum Item<'a> {
    Phrase(&'a [&'a str]),
    Verb(&'a str),
    Prep(&'a str),
}

fn verb_suffix(tok: &str) -> bool {
    tok.len() >= 4 && (tok.ends_with("ing") || tok.ends_with("ed")) && !NOT_VERBS.contains(&tok)
}

fn plural_verb(tok: &str) -> bool {
    tok.len() >= 4
        && tok.ends_with('s')
        && !tok.ends_with("ss")
        && !tok.ends_with("us")
        && !NOT_VERBS.contains(&tok)
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct CaptionParser {
    lexicon: Lexicon,
}

impl CaptionParser {
    pub fn new(lexicon: Lexicon) -> Self {
        Self { lexicon }
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    fn classify<'a>(&self, tok: &'a str) -> Token<'a> {
        if self.lexicon.is_preposition(tok) {
            Token::Prep(tok)
        } else if self.lexicon.is_stopword(tok)
            || tok.chars().count() < 2
            || !tok.chars().all(char::is_alphabetic)
        {
            Token::Stop
        } else {
            Token::Content(tok)
        }
    }

    /// Splits one content run into phrases and verbs. `before_stop` is true
    /// when the run is immediately followed by a stopword.
    fn split_run<'a>(run: &'a [&'a str], before_stop: bool, out: &mut Vec<Item<'a>>) {
        let mut rest = run;
        while !rest.is_empty() {
            match (1..rest.len()).find(|&k| verb_suffix(rest[k])) {
                Some(k) => {
                    out.push(Item::Phrase(&rest[..k]));
                    out.push(Item::Verb(rest[k]));
                    rest = &rest[k + 1..];
                }
                None => {
                    let last = rest.len() - 1;
                    if before_stop && last >= 1 && plural_verb(rest[last]) {
                        out.push(Item::Phrase(&rest[..last]));
                        out.push(Item::Verb(rest[last]));
                    } else {
                        out.push(Item::Phrase(rest));
                    }
                    rest = &[];
                }
            }
        }
    }

    /// Extracts relationships in caption order. Concreteness is left unset.
    pub fn parse(&self, rec: &CaptionRecord) -> Vec<Relationship> {
        let tokens = tokenize(&rec.text);
        let words: Vec<&str> = tokens.iter().map(String::as_str).collect();
        let classes: Vec<Token> = words.iter().map(|t| self.classify(t)).collect();

        let mut items = Vec::new();
        let mut i = 0;
        while i < classes.len() {
            match classes[i] {
                Token::Prep(p) => {
                    items.push(Item::Prep(p));
                    i += 1;
                }
                Token::Stop => i += 1,
                Token::Content(_) => {
                    let start = i;
                    while i < classes.len() && matches!(classes[i], Token::Content(_)) {
                        i += 1;
                    }
                    let before_stop = matches!(classes.get(i), Some(Token::Stop));
                    Self::split_run(&words[start..i], before_stop, &mut items);
                }
            }
        }

        let head = |p: &[&str]| p.last().map(|s| s.to_string());
        let mut rels = Vec::new();
        for i in 0..items.len() {
            let Item::Phrase(subject) = items[i] else {
                continue;
            };
            let found = match (items.get(i + 1), items.get(i + 2), items.get(i + 3)) {
                (Some(Item::Prep(p)), Some(Item::Phrase(o)), _) => Some((p.to_string(), *o)),
                (Some(Item::Verb(v)), Some(Item::Prep(p)), Some(Item::Phrase(o))) => {
                    Some((format!("{v} {p}"), *o))
                }
                (Some(Item::Verb(v)), Some(Item::Phrase(o)), _) => Some((v.to_string(), *o)),
                _ => None,
            };
            if let (Some((predicate, object)), Some(s)) = (found, head(subject)) {
                if let Some(o) = head(object) {
                    rels.push(Relationship {
                        image_id: rec.image_id.clone(),
                        subject: s,
                        predicate,
                        object: o,
                        concreteness: None,
                    });
                }
            }
        }
        rels
    }

    /// Parses every caption; output order follows input order.
    pub fn parse_all(&self, captions: &[CaptionRecord]) -> Vec<Relationship> {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            let per: Vec<Vec<Relationship>> = captions.par_iter().map(|c| self.parse(c)).collect();
            per.into_iter().flatten().collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            captions.iter().flat_map(|c| self.parse(c)).collect()
        }
    }
}

/// Parses with the default lexicon.
pub fn parse_caption(rec: &CaptionRecord) -> Vec<Relationship> {
    CaptionParser::default().parse(rec)
}

/// Lemma → concreteness rating in `[1, 5]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConcretenessTable {
    ratings: BTreeMap<String, f64>,
}

impl ConcretenessTable {
    pub fn from_pairs<I, S>(pairs: I) -> Result<Self, DataError>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let mut ratings = BTreeMap::new();
        for (lemma, r) in pairs {
            let lemma = lemma.into().to_lowercase();
            if !(1.0..=5.0).contains(&r) {
                return Err(DataError::Integrity(format!(
                    "rating {r} for {lemma:?} is outside [1, 5]"
                )));
            }
            ratings.insert(lemma, r);
        }
        Ok(Self { ratings })
    }

    /// Parses `lemma<TAB>rating` lines. Extra columns are ignored; a first
    /// line whose rating column is not numeric is treated as a header.
    pub fn parse_tsv(file: &str, text: &str) -> Result<Self, DataError> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            let lemma = cols.next().unwrap_or("").trim();
            let rating = cols.next().map(str::trim);
            match rating.map(str::parse::<f64>) {
                Some(Ok(r)) if !lemma.is_empty() => pairs.push((lemma.to_string(), r)),
                Some(Err(_)) if n == 0 => continue,
                _ => {
                    return Err(DataError::Schema {
                        file: file.to_string(),
                        line: n + 1,
                        message: "expected lemma<TAB>rating".into(),
                    })
                }
            }
        }
        Self::from_pairs(pairs)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse_tsv(&path.display().to_string(), &text)
    }

    pub fn to_tsv(&self) -> String {
        self.ratings
            .iter()
            .map(|(l, r)| format!("{l}\t{r}\n"))
            .collect()
    }

    pub fn get(&self, lemma: &str) -> Option<f64> {
        self.ratings.get(lemma).copied()
    }

    pub fn len(&self) -> usize {
        self.ratings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratings.is_empty()
    }

    /// Rating of an entity's head token. Plural `-s`/`-es` is stripped when
    /// the stripped form is in the table; unknown entities score 0.
    pub fn entity_score(&self, entity: &str) -> f64 {
        let head = entity.rsplit(' ').next().unwrap_or(entity);
        if let Some(r) = self.get(head) {
            return r;
        }
        for suffix in ["es", "s"] {
            if let Some(stem) = head.strip_suffix(suffix) {
                if let Some(r) = self.get(stem) {
                    return r;
                }
            }
        }
        0.0
    }
}

pub fn score_concreteness(mut rel: Relationship, table: &ConcretenessTable) -> Relationship {
    let s = table.entity_score(&rel.subject);
    let o = table.entity_score(&rel.object);
    rel.concreteness = Some((s + o) / 2.0);
    rel
}

/// Keeps relationships whose concreteness is at least `threshold`; unscored
/// relationships count as 0.
pub fn filter_relationships(rels: Vec<Relationship>, threshold: f64) -> Vec<Relationship> {
    rels.into_iter()
        .filter(|r| r.concreteness.unwrap_or(0.0) >= threshold)
        .collect()
}
