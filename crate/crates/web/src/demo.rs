use serde::Serialize;

use condsim::annotation::{dilate_and_pad_box, BBox, CropSpec};
use condsim::caption::{filter_relationships, score_concreteness, CaptionParser, CaptionRecord, ConcretenessTable, Relationship};
use condsim::combiner::{template_validator, train_on_vectors, TrainConfig};
use condsim::retrieval::{rank_of, score_gallery, EmbeddingTable, Scorer};
use condsim::synthetic::{block_task, BlockTaskConfig};

const CONCRETENESS: &str = include_str!("../../core/data/synthetic/concreteness.tsv");

pub fn crop(bbox: [f64; 4], image: (u32, u32), dilation: f64) -> Result<CropSpec, String> {
    dilate_and_pad_box(BBox::from(bbox), image, dilation).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
pub struct ParsedCaption {
    pub relationships: Vec<Relationship>,
    /// Relationships at or above the threshold, in caption order.
    pub kept: usize,
}

pub fn parse_caption(text: &str, threshold: f64) -> ParsedCaption {
    let table = ConcretenessTable::parse_tsv("concreteness.tsv", CONCRETENESS).expect("bundled table parses");
    let rec = CaptionRecord { image_id: "input".into(), text: text.into() };
    let relationships: Vec<Relationship> = CaptionParser::default()
        .parse(&rec)
        .into_iter()
        .map(|r| score_concreteness(r, &table))
        .collect();
    let kept = filter_relationships(relationships.clone(), threshold).len();
    ParsedCaption { relationships, kept }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockRun {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
pub struct BlockResult {
    pub losses: Vec<f64>,
    /// (step, validation R@1) pairs.
    pub validation: Vec<(usize, f64)>,
    /// R@1 per scorer as fractions; the combiner uses the best validation step.
    pub recall: Vec<(String, f64)>,
    pub templates: usize,
    pub best_step: usize,
}

fn pooled_r1(templates: &[condsim::benchmark::RetrievalTemplate], table: &EmbeddingTable, scorer: &Scorer) -> Result<f64, String> {
    let mut hits = 0usize;
    for t in templates {
        let scores = score_gallery(scorer, t, table).map_err(|e| e.to_string())?;
        hits += usize::from(rank_of(&scores, t.positive_index) == 0);
    }
    Ok(hits as f64 / templates.len() as f64)
}

pub fn train_blocks(run: &BlockRun) -> Result<BlockResult, String> {
    let task = block_task(&BlockTaskConfig { validation_templates: 200, seed: run.seed, ..Default::default() });
    let config = TrainConfig {
        batch_size: run.batch_size,
        steps: run.steps,
        learning_rate: run.learning_rate,
        seed: run.seed,
        eval_every: (run.steps / 10).max(1),
        ..Default::default()
    };
    let out = train_on_vectors(&task.train, &config, Some(template_validator(&task.validation, &task.table)))
        .map_err(|e| e.to_string())?;
    let mut recall = Vec::new();
    for (name, s) in [
        ("image-only", Scorer::ImageOnly),
        ("text-only", Scorer::TextOnly),
        ("image+text", Scorer::ImagePlusText),
        ("combiner", Scorer::Combiner(&out.params)),
    ] {
        recall.push((name.to_string(), pooled_r1(&task.validation, &task.table, &s)?));
    }
    Ok(BlockResult {
        losses: out.log.losses().collect(),
        validation: out.log.rows.iter().filter_map(|r| r.val_r1.map(|v| (r.step, v))).collect(),
        recall,
        templates: task.validation.len(),
        best_step: out.best_step,
    })
}
