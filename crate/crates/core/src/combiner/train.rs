//! Adam with cosine learning-rate decay over in-batch contrastive loss,
//! keeping the checkpoint with the best validation Recall@1.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{loss_and_gradients, CombinerError, CombinerParams, Sample};
use crate::benchmark::RetrievalTemplate;
use crate::mining::MinedTriplet;
use crate::retrieval::{evaluate_global, recall_at_k, EmbeddingKind, EmbeddingTable, GlobalQuery, Scorer};
use crate::rng::derive_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Floor of the cosine schedule.
    pub min_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Hidden width of every head as a multiple of D.
    pub hidden_mult: usize,
    pub squash_lambda: bool,
    pub eval_every: usize,
    /// Share of triplets held out when no validation templates are given.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            temperature: 0.01,
            batch_size: 256,
            steps: 1000,
            learning_rate: 1e-3,
            min_learning_rate: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            hidden_mult: 4,
            squash_lambda: true,
            eval_every: 100,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), CombinerError> {
        let bad = |m: String| Err(CombinerError::InvalidConfig(m));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.batch_size < 2 {
            return bad(format!("batch size must be at least 2, got {}", self.batch_size));
        }
        if !(self.learning_rate >= 0.0 && self.min_learning_rate >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return bad("Adam moments need β in [0, 1) and ε > 0".into());
        }
        if self.hidden_mult == 0 || self.eval_every == 0 {
            return bad("hidden_mult and eval_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation fraction {} outside [0, 1)", self.validation_fraction));
        }
        Ok(())
    }

    /// Cosine-decayed rate for zero-based `step`.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if self.steps == 0 {
            return self.learning_rate;
        }
        let t = step as f64 / self.steps as f64;
        self.min_learning_rate + 0.5 * (self.learning_rate - self.min_learning_rate) * (1.0 + (PI * t).cos())
    }
}

/// Resolved training vectors, one row per example.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingSet {
    pub x_r: Vec<Vec<f64>>,
    pub e: Vec<Vec<f64>>,
    pub x_t: Vec<Vec<f64>>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.x_r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_r.is_empty()
    }

    pub fn push(&mut self, x_r: Vec<f64>, e: Vec<f64>, x_t: Vec<f64>) {
        self.x_r.push(x_r);
        self.e.push(e);
        self.x_t.push(x_t);
    }

    pub fn from_triplets(triplets: &[MinedTriplet], table: &EmbeddingTable) -> Result<Self, CombinerError> {
        let get = |kind: EmbeddingKind, id: &str| {
            table.vector(kind, id).map_err(|_| CombinerError::MissingEmbedding {
                kind: kind.to_string(),
                id: id.to_string(),
            })
        };
        let mut set = Self::default();
        for t in triplets {
            set.push(
                get(EmbeddingKind::Image, &t.reference_image_id)?,
                get(EmbeddingKind::Text, &t.condition_text)?,
                get(EmbeddingKind::Image, &t.target_image_id)?,
            );
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: Option<f64>,
    pub lr: Option<f64>,
    /// Validation Recall@1 as a fraction, on evaluation steps.
    pub val_r1: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,lr,val_r1\n");
        let opt = |v: Option<f64>| v.map(|v| format!("{v}")).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.step, opt(r.loss), opt(r.lr), opt(r.val_r1));
        }
        s
    }

    pub fn losses(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().filter_map(|r| r.loss)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Parameters at the best validation step (the final ones without validation).
    pub params: CombinerParams,
    pub log: TrainLog,
    pub best_step: usize,
    pub best_val_r1: Option<f64>,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(p: &CombinerParams) -> Self {
        let z: Vec<Vec<f64>> = p.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { m: z.clone(), v: z, t: 0 }
    }

    fn step(&mut self, p: &mut CombinerParams, grads: &[&[f64]], lr: f64, c: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (((w, g), m), v) in p.tensors_mut().into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for k in 0..w.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                w[k] -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.epsilon);
            }
        }
    }
}

/// Core loop over resolved vectors. `validate` returns Recall@1 in [0, 1].
pub fn train_on_vectors<V>(
    data: &TrainingSet,
    config: &TrainConfig,
    mut validate: Option<V>,
) -> Result<TrainOutput, CombinerError>
where
    V: FnMut(&CombinerParams) -> Result<f64, CombinerError>,
{
    config.check()?;
    let dim = data.x_r.first().map_or(0, Vec::len);
    if data.len() < 2 && config.steps > 0 {
        return Err(CombinerError::InvalidConfig(format!("{} training examples; need at least 2", data.len())));
    }
    let mut params = CombinerParams::init(dim, config.hidden_mult, config.seed, config.squash_lambda);
    let mut log = TrainLog::default();
    let mut best = (params.clone(), 0usize, None::<f64>);
    if let Some(v) = validate.as_mut() {
        let r = v(&params)?;
        log.rows.push(LogRow { step: 0, loss: None, lr: None, val_r1: Some(r) });
        best.2 = Some(r);
    }

    let batch = config.batch_size.min(data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut epoch = 0u64;
    let mut adam = Adam::new(&params);
    for step in 0..config.steps {
        if cursor + batch > order.len() {
            order.sort_unstable();
            order.shuffle(&mut derive_rng(config.seed, &["train-shuffle", &epoch.to_string()]));
            epoch += 1;
            cursor = 0;
        }
        let samples: Vec<Sample> = order[cursor..cursor + batch]
            .iter()
            .map(|&i| Sample { x_r: &data.x_r[i], e: &data.e[i], x_t: &data.x_t[i] })
            .collect();
        cursor += batch;
        let (loss, grads) = loss_and_gradients(&params, &samples, config.temperature)?;
        let lr = config.learning_rate_at(step);
        adam.step(&mut params, &grads.tensors(), lr, config);
        if !params.is_finite() {
            return Err(CombinerError::NonFinite(format!("parameters after step {}", step + 1)));
        }
        let done = step + 1;
        let mut row = LogRow { step: done, loss: Some(loss), lr: Some(lr), val_r1: None };
        if let Some(v) = validate.as_mut() {
            if done % config.eval_every == 0 || done == config.steps {
                let r = v(&params)?;
                row.val_r1 = Some(r);
                if best.2.is_none_or(|b| r > b) {
                    best = (params.clone(), done, Some(r));
                }
            }
        }
        log.rows.push(row);
    }
    let (params, best_step, best_val_r1) = if validate.is_some() {
        best
    } else {
        (params, config.steps, None)
    };
    Ok(TrainOutput { params, log, best_step, best_val_r1 })
}

fn retrieval_err(e: crate::retrieval::RetrievalError) -> CombinerError {
    match e {
        crate::retrieval::RetrievalError::Combiner(c) => c,
        other => CombinerError::Validation(other.to_string()),
    }
}

/// Curated-template validation: Recall@1 over all templates as a fraction.
pub fn template_validator<'a>(
    templates: &'a [RetrievalTemplate],
    table: &'a EmbeddingTable,
) -> impl FnMut(&CombinerParams) -> Result<f64, CombinerError> + 'a {
    move |p| {
        let r = recall_at_k(templates, &Scorer::Combiner(p), table, &[1]).map_err(retrieval_err)?;
        let hits: f64 = r.tasks.iter().map(|t| t.r1 * t.templates as f64).sum();
        let n: usize = r.tasks.iter().map(|t| t.templates).sum();
        Ok(hits / n as f64 / 100.0)
    }
}

/// Trains on mined triplets. Without validation templates a seeded share of
/// the triplets is held out and scored against all held-out targets.
pub fn train(
    triplets: &[MinedTriplet],
    table: &EmbeddingTable,
    config: &TrainConfig,
    validation: Option<&[RetrievalTemplate]>,
) -> Result<TrainOutput, CombinerError> {
    config.check()?;
    let all = TrainingSet::from_triplets(triplets, table)?;
    if let Some(templates) = validation {
        return train_on_vectors(&all, config, Some(template_validator(templates, table)));
    }
    let mut idx: Vec<usize> = (0..triplets.len()).collect();
    idx.shuffle(&mut derive_rng(config.seed, &["train-holdout"]));
    let n_val = (triplets.len() as f64 * config.validation_fraction).round() as usize;
    if n_val == 0 {
        return train_on_vectors(&all, config, None::<fn(&CombinerParams) -> Result<f64, CombinerError>>);
    }
    let (val_idx, train_idx) = idx.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();
    let mut data = TrainingSet::default();
    for &i in &train_idx {
        data.push(all.x_r[i].clone(), all.e[i].clone(), all.x_t[i].clone());
    }
    let queries: Vec<GlobalQuery> = val_idx
        .iter()
        .map(|&i| GlobalQuery {
            reference: triplets[i].reference_image_id.clone(),
            condition: triplets[i].condition_text.clone(),
            positive: triplets[i].target_image_id.clone(),
        })
        .collect();
    let mut gallery: Vec<String> = queries.iter().map(|q| q.positive.clone()).collect();
    gallery.sort();
    gallery.dedup();
    let validate = |p: &CombinerParams| {
        let r = evaluate_global(&queries, &gallery, &Scorer::Combiner(p), table, &[1]).map_err(retrieval_err)?;
        Ok(r.recall[&1] / 100.0)
    };
    train_on_vectors(&data, config, Some(validate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::stub_embed;

    fn toy_set(n: usize, d: usize) -> TrainingSet {
        let v = |k: String| stub_embed(&k, d, 3).iter().map(|&x| f64::from(x)).collect::<Vec<f64>>();
        let mut s = TrainingSet::default();
        for i in 0..n {
            s.push(v(format!("r{i}")), v(format!("c{}", i % 3)), v(format!("t{i}")));
        }
        s
    }

    type NoVal = fn(&CombinerParams) -> Result<f64, CombinerError>;

    #[test]
    fn zero_steps_returns_initialization() {
        let cfg = TrainConfig { steps: 0, batch_size: 4, seed: 9, ..Default::default() };
        let out = train_on_vectors(&toy_set(8, 6), &cfg, None::<NoVal>).unwrap();
        assert_eq!(out.params, CombinerParams::init(6, 4, 9, true));
        assert!(out.log.rows.is_empty());
    }

    #[test]
    fn deterministic_and_loss_decreases() {
        let cfg = TrainConfig { steps: 60, batch_size: 8, learning_rate: 3e-3, temperature: 0.1, ..Default::default() };
        let data = toy_set(16, 8);
        let a = train_on_vectors(&data, &cfg, None::<NoVal>).unwrap();
        let b = train_on_vectors(&data, &cfg, None::<NoVal>).unwrap();
        assert_eq!(a.params, b.params);
        let l: Vec<f64> = a.log.losses().collect();
        let head: f64 = l[..10].iter().sum();
        let tail: f64 = l[l.len() - 10..].iter().sum();
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn keeps_best_validation_checkpoint() {
        let cfg = TrainConfig { steps: 6, batch_size: 4, eval_every: 2, ..Default::default() };
        let scores = [0.1, 0.5, 0.9, 0.3];
        let mut calls = 0;
        let out = train_on_vectors(
            &toy_set(8, 4),
            &cfg,
            Some(|_: &CombinerParams| {
                calls += 1;
                Ok(scores[calls - 1])
            }),
        )
        .unwrap();
        assert_eq!(out.best_step, 4);
        assert_eq!(out.best_val_r1, Some(0.9));
        let evals: Vec<usize> = out.log.rows.iter().filter(|r| r.val_r1.is_some()).map(|r| r.step).collect();
        assert_eq!(evals, vec![0, 2, 4, 6]);
    }

    #[test]
    fn schedule_and_config_checks() {
        let c = TrainConfig { steps: 100, learning_rate: 1.0, min_learning_rate: 0.0, ..Default::default() };
        assert_eq!(c.learning_rate_at(0), 1.0);
        assert!((c.learning_rate_at(50) - 0.5).abs() < 1e-12);
        assert!(c.learning_rate_at(99) < 0.01);
        assert!(TrainConfig { temperature: 0.0, ..Default::default() }.check().is_err());
        assert!(TrainConfig { batch_size: 1, ..Default::default() }.check().is_err());
    }

    #[test]
    fn csv_log() {
        let log = TrainLog {
            rows: vec![
                LogRow { step: 0, loss: None, lr: None, val_r1: Some(0.25) },
                LogRow { step: 1, loss: Some(1.5), lr: Some(0.001), val_r1: None },
            ],
        };
        assert_eq!(log.to_csv(), "step,loss,lr,val_r1\n0,,,0.25\n1,1.5,0.001,\n");
    }

    #[test]
    fn missing_embedding_is_reported() {
        let table = EmbeddingTable::new(4);
        let t = MinedTriplet {
            reference_image_id: "a".into(),
            target_image_id: "b".into(),
            condition_text: "on grass".into(),
            subject: "dog".into(),
            reference_object: "sofa".into(),
            target_predicate: "on".into(),
            target_object: "grass".into(),
        };
        assert!(matches!(
            train(&[t.clone(), t], &table, &TrainConfig::default(), None),
            Err(CombinerError::MissingEmbedding { .. })
        ));
    }
}
