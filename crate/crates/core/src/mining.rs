//! Training triplet construction from filtered relationships.
//!
//! A reference relationship is drawn uniformly; a target relationship is
//! drawn from those sharing its subject but with a different object and a
//! different image. The condition is the target's predicate and object.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::caption::Relationship;

/// Draw budget per requested triplet.
pub const DRAWS_PER_TRIPLET: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MinedTriplet {
    #[serde(rename = "ref")]
    pub reference_image_id: String,
    #[serde(rename = "target")]
    pub target_image_id: String,
    #[serde(rename = "condition")]
    pub condition_text: String,
    pub subject: String,
    #[serde(rename = "ref_object")]
    pub reference_object: String,
    #[serde(rename = "tgt_predicate")]
    pub target_predicate: String,
    #[serde(rename = "tgt_object")]
    pub target_object: String,
}

#[derive(Debug, Error)]
pub enum MiningError {
    /// The draw budget ran out; `mined` holds everything produced so far.
    #[error("mined {} of {requested} triplets before exhausting {draws} draws", mined.len())]
    Exhausted {
        mined: Vec<MinedTriplet>,
        requested: usize,
        draws: usize,
    },
}

/// Relationships grouped by subject, preserving input order in each bucket.
#[derive(Debug, Clone, Default)]
pub struct SubjectIndex {
    relationships: Vec<Relationship>,
    by_subject: BTreeMap<String, Vec<usize>>,
}

impl SubjectIndex {
    pub fn build(rels: Vec<Relationship>) -> Self {
        let mut by_subject: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in rels.iter().enumerate() {
            by_subject.entry(r.subject.clone()).or_default().push(i);
        }
        Self {
            relationships: rels,
            by_subject,
        }
    }

    pub fn relationships(&self) -> &[Relationship] {
        &self.relationships
    }

    pub fn bucket(&self, subject: &str) -> impl Iterator<Item = &Relationship> {
        self.by_subject
            .get(subject)
            .into_iter()
            .flatten()
            .map(|&i| &self.relationships[i])
    }

    pub fn subjects(&self) -> impl Iterator<Item = (&str, usize)> {
        self.by_subject.iter().map(|(s, v)| (s.as_str(), v.len()))
    }

    pub fn is_empty(&self) -> bool {
        self.relationships.is_empty()
    }
}

pub fn build_subject_index(rels: Vec<Relationship>) -> SubjectIndex {
    SubjectIndex::build(rels)
}

/// Whether `target` may serve as the target for `reference`.
pub fn is_valid_pair(reference: &Relationship, target: &Relationship) -> bool {
    reference.subject == target.subject
        && reference.object != target.object
        && reference.image_id != target.image_id
}

fn triplet(reference: &Relationship, target: &Relationship) -> MinedTriplet {
    MinedTriplet {
        reference_image_id: reference.image_id.clone(),
        target_image_id: target.image_id.clone(),
        condition_text: format!("{} {}", target.predicate, target.object),
        subject: reference.subject.clone(),
        reference_object: reference.object.clone(),
        target_predicate: target.predicate.clone(),
        target_object: target.object.clone(),
    }
}

/// Mines up to `n` unique triplets with at most `DRAWS_PER_TRIPLET * n`
/// reference draws. Deterministic for a given index, `n` and `seed`.
pub fn mine_triplets(
    index: &SubjectIndex,
    n: usize,
    seed: u64,
) -> Result<Vec<MinedTriplet>, MiningError> {
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return Ok(out);
    }
    let budget = DRAWS_PER_TRIPLET.saturating_mul(n);
    let mut draws = 0;
    if !index.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = HashSet::new();
        let mut pool: Vec<&Relationship> = Vec::new();
        while out.len() < n && draws < budget {
            draws += 1;
            let reference = &index.relationships[rng.random_range(0..index.relationships.len())];
            pool.clear();
            pool.extend(
                index
                    .bucket(&reference.subject)
                    .filter(|t| is_valid_pair(reference, t)),
            );
            if pool.is_empty() {
                continue;
            }
            let target = pool[rng.random_range(0..pool.len())];
            let t = triplet(reference, target);
            let key = (
                t.reference_image_id.clone(),
                t.target_image_id.clone(),
                t.condition_text.clone(),
            );
            if seen.insert(key) {
                out.push(t);
            }
        }
    }
    if out.len() < n {
        return Err(MiningError::Exhausted {
            mined: out,
            requested: n,
            draws,
        });
    }
    Ok(out)
}
