//! A conditional retrieval task with a known answer.
//!
//! Images are concatenations of per-block codewords. A condition names a
//! block and a new codeword for it; the correct target is the reference with
//! that block replaced. Galleries mix the target with reference-like
//! distractors (right scene, wrong block content) and condition-like
//! distractors (right block content, unrelated image), so neither input on
//! its own identifies the target.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::annotation::CropSpec;
use crate::benchmark::{RetrievalTemplate, TargetSpec, Task};
use crate::combiner::TrainingSet;
use crate::retrieval::{stub_embed, EmbeddingKind, EmbeddingTable};
use crate::rng::derive_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockTaskConfig {
    pub dim: usize,
    pub blocks: usize,
    pub values_per_block: usize,
    /// Distinct training references; a small pool puts hard negatives in every batch.
    pub train_references: usize,
    pub train_triplets: usize,
    pub validation_templates: usize,
    pub seed: u64,
}

impl Default for BlockTaskConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            blocks: 8,
            values_per_block: 4,
            train_references: 256,
            train_triplets: 8192,
            validation_templates: 400,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockTask {
    pub config: BlockTaskConfig,
    pub train: TrainingSet,
    /// Embeddings for every validation reference, gallery entry and condition.
    pub table: EmbeddingTable,
    pub validation: Vec<RetrievalTemplate>,
}

struct Codebook {
    block_dim: usize,
    /// codes[b][v] is a unit vector of length `block_dim`.
    codes: Vec<Vec<Vec<f64>>>,
}

impl Codebook {
    fn new(c: &BlockTaskConfig, rng: &mut ChaCha8Rng) -> Self {
        let block_dim = c.dim / c.blocks;
        let codes = (0..c.blocks)
            .map(|_| {
                (0..c.values_per_block)
                    .map(|_| {
                        let v: Vec<f64> = (0..block_dim).map(|_| rng.sample(StandardNormal)).collect();
                        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                        v.into_iter().map(|x| x / n).collect()
                    })
                    .collect()
            })
            .collect();
        Self { block_dim, codes }
    }

    fn image(&self, values: &[usize]) -> Vec<f64> {
        let scale = 1.0 / (values.len() as f64).sqrt();
        let mut out = Vec::with_capacity(values.len() * self.block_dim);
        for (b, &v) in values.iter().enumerate() {
            out.extend(self.codes[b][v].iter().map(|x| x * scale));
        }
        out
    }
}

pub fn condition_text(block: usize, value: usize) -> String {
    format!("block {block} value {value}")
}

fn condition_vector(c: &BlockTaskConfig, block: usize, value: usize) -> Vec<f64> {
    stub_embed(&condition_text(block, value), c.dim, c.seed)
        .into_iter()
        .map(f64::from)
        .collect()
}

fn random_values(c: &BlockTaskConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..c.blocks).map(|_| rng.random_range(0..c.values_per_block)).collect()
}

fn other_value(c: &BlockTaskConfig, not: &[usize], rng: &mut ChaCha8Rng) -> usize {
    let options: Vec<usize> = (0..c.values_per_block).filter(|v| !not.contains(v)).collect();
    *options.choose(rng).expect("values_per_block exceeds excluded values")
}

/// Attribute tasks address object crops; here every crop is the whole image.
fn target(task: Task, id: String) -> TargetSpec {
    if task.is_attribute() {
        TargetSpec {
            crop: Some(CropSpec { x: 0.0, y: 0.0, w: 1.0, h: 1.0, pad_top: 0.0, pad_bottom: 0.0, pad_left: 0.0, pad_right: 0.0 }),
            instance_id: Some(id.clone()),
            image_id: id,
        }
    } else {
        TargetSpec::image(id)
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Builds the task. Panics on degenerate configurations (fewer than three
/// values per block, fewer than two blocks, or D not divisible by blocks).
pub fn block_task(config: &BlockTaskConfig) -> BlockTask {
    let c = config;
    assert!(c.blocks >= 2 && c.values_per_block >= 3 && c.dim.is_multiple_of(c.blocks) && c.dim / c.blocks >= 2);
    let book = Codebook::new(c, &mut derive_rng(c.seed, &["blocks", "codebook"]));

    let mut rng = derive_rng(c.seed, &["blocks", "train"]);
    let pool: Vec<Vec<usize>> = (0..c.train_references.max(1)).map(|_| random_values(c, &mut rng)).collect();
    let mut train = TrainingSet::default();
    for _ in 0..c.train_triplets {
        let r = pool.choose(&mut rng).expect("non-empty pool");
        let b = rng.random_range(0..c.blocks);
        let j = other_value(c, &[r[b]], &mut rng);
        let mut t = r.clone();
        t[b] = j;
        train.push(book.image(r), condition_vector(c, b, j), book.image(&t));
    }

    let mut table = EmbeddingTable::new(c.dim);
    for b in 0..c.blocks {
        for j in 0..c.values_per_block {
            table
                .insert(EmbeddingKind::Text, condition_text(b, j), &to_f32(&condition_vector(c, b, j)))
                .expect("fresh key");
        }
    }
    let mut rng = derive_rng(c.seed, &["blocks", "validation"]);
    let mut validation = Vec::with_capacity(c.validation_templates);
    for i in 0..c.validation_templates {
        let task = Task::ALL[i % Task::ALL.len()];
        let distractors = task.gallery_size() - 1;
        let condition_like = distractors / 3;
        let reference_like = distractors - condition_like;
        let r = random_values(c, &mut rng);
        let b = rng.random_range(0..c.blocks);
        let j = other_value(c, &[r[b]], &mut rng);
        let mut positive = r.clone();
        positive[b] = j;
        let mut images: Vec<Vec<usize>> = vec![positive];
        for _ in 0..reference_like {
            let mut d = r.clone();
            d[b] = other_value(c, &[j], &mut rng);
            let other = (b + rng.random_range(1..c.blocks)) % c.blocks;
            d[other] = other_value(c, &[r[other]], &mut rng);
            images.push(d);
        }
        for _ in 0..condition_like {
            let mut d = random_values(c, &mut rng);
            d[b] = j;
            while d == images[0] {
                d = random_values(c, &mut rng);
                d[b] = j;
            }
            images.push(d);
        }
        let prefix = format!("val{i:05}");
        let ref_id = format!("{prefix}/ref");
        table.insert(EmbeddingKind::Image, ref_id.clone(), &to_f32(&book.image(&r))).expect("fresh key");
        let mut gallery = Vec::with_capacity(images.len());
        for (k, img) in images.iter().enumerate() {
            let id = format!("{prefix}/g{k:02}");
            table.insert(EmbeddingKind::Image, id.clone(), &to_f32(&book.image(img))).expect("fresh key");
            gallery.push(target(task, id));
        }
        // Gallery order: rotate so the positive is not always first.
        let shift = rng.random_range(0..gallery.len());
        gallery.rotate_right(shift);
        validation.push(RetrievalTemplate {
            task,
            reference: target(task, ref_id),
            condition: condition_text(b, j),
            gallery,
            positive_index: shift,
        });
    }
    BlockTask { config: c.clone(), train, table, validation }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::validate_structure;
    use crate::retrieval::{recall_at_k, Scorer};

    fn small() -> BlockTaskConfig {
        BlockTaskConfig { train_triplets: 64, validation_templates: 40, ..Default::default() }
    }

    #[test]
    fn targets_are_references_with_one_block_replaced() {
        let t = block_task(&small());
        let bd = t.config.dim / t.config.blocks;
        for i in 0..t.train.len() {
            let changed: Vec<usize> = (0..t.config.blocks)
                .filter(|b| t.train.x_r[i][b * bd..(b + 1) * bd] != t.train.x_t[i][b * bd..(b + 1) * bd])
                .collect();
            assert_eq!(changed.len(), 1);
            let norm: f64 = t.train.x_t[i].iter().map(|x| x * x).sum();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn validation_templates_are_well_formed() {
        let t = block_task(&small());
        validate_structure(&t.validation).unwrap();
        for tpl in &t.validation {
            assert_eq!(tpl.positive().unwrap().image_id, format!("{}/g00", &tpl.reference.image_id[..8]));
        }
        // Every baseline can be evaluated on the table.
        for s in [Scorer::ImageOnly, Scorer::TextOnly, Scorer::ImagePlusText] {
            recall_at_k(&t.validation, &s, &t.table, &[1, 2, 3]).unwrap();
        }
    }

    #[test]
    fn deterministic() {
        let a = block_task(&small());
        let b = block_task(&small());
        assert_eq!(a.train, b.train);
        assert_eq!(a.validation, b.validation);
        assert_eq!(a.table, b.table);
    }
}
