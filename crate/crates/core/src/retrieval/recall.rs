use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{score_vectors, EmbeddingKind, EmbeddingTable, RetrievalError, Scorer};
use crate::benchmark::{RetrievalTemplate, Task};

pub const CURATED_KS: [usize; 3] = [1, 2, 3];
pub const GLOBAL_KS: [usize; 3] = [1, 5, 10];

/// Zero-based rank of `positive`: items scoring higher, plus items scoring
/// equal at a lower gallery index.
pub fn rank_of(scores: &[f64], positive: usize) -> usize {
    let p = scores[positive];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > p || (s == p && j < positive))
        .count()
}

fn check_ks(ks: &[usize]) -> Result<Vec<usize>, RetrievalError> {
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() || ks[0] == 0 {
        return Err(RetrievalError::InvalidKs(format!("{ks:?}; need at least one K ≥ 1")));
    }
    Ok(ks)
}

fn percentages(ranks: &[usize], ks: &[usize]) -> BTreeMap<usize, f64> {
    ks.iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|&&r| r < k).count();
            let pct = if ranks.is_empty() { 0.0 } else { 100.0 * hits as f64 / ranks.len() as f64 };
            (k, pct)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecall {
    pub task: Task,
    pub templates: usize,
    pub skipped: usize,
    /// K → percentage of templates with the positive in the top K.
    pub recall: BTreeMap<usize, f64>,
    pub r1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scorer: String,
    pub ks: Vec<usize>,
    pub tasks: Vec<TaskRecall>,
    /// Mean over tasks of each task's R@1.
    pub average_r1: f64,
}

impl EvalReport {
    pub fn task(&self, task: Task) -> Option<&TaskRecall> {
        self.tasks.iter().find(|t| t.task == task)
    }
}

fn map_templates<F>(templates: &[RetrievalTemplate], f: F) -> Vec<Result<Vec<f64>, RetrievalError>>
where
    F: Fn(&RetrievalTemplate) -> Result<Vec<f64>, RetrievalError> + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        templates.par_iter().map(&f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        templates.iter().map(f).collect()
    }
}

/// Recall@K for an arbitrary scoring function. With `allow_missing`,
/// templates whose embeddings are absent are counted as skipped instead of
/// failing the run.
pub fn recall_at_k_with<F>(
    templates: &[RetrievalTemplate],
    ks: &[usize],
    scorer_name: &str,
    allow_missing: bool,
    score: F,
) -> Result<EvalReport, RetrievalError>
where
    F: Fn(&RetrievalTemplate) -> Result<Vec<f64>, RetrievalError> + Sync,
{
    let ks = check_ks(ks)?;
    if templates.is_empty() {
        return Err(RetrievalError::EmptyTemplateSet);
    }
    let results = map_templates(templates, score);
    let mut ranks: BTreeMap<Task, (Vec<usize>, usize)> = BTreeMap::new();
    for (t, r) in templates.iter().zip(results) {
        let entry = ranks.entry(t.task).or_default();
        match r {
            Ok(scores) => {
                if scores.len() != t.gallery.len() || t.positive_index >= scores.len() {
                    return Err(RetrievalError::DimensionMismatch { expected: t.gallery.len(), got: scores.len() });
                }
                entry.0.push(rank_of(&scores, t.positive_index));
            }
            Err(RetrievalError::MissingEmbedding { .. }) if allow_missing => entry.1 += 1,
            Err(e) => return Err(e),
        }
    }
    let tasks: Vec<TaskRecall> = ranks
        .into_iter()
        .filter(|(_, (r, _))| !r.is_empty())
        .map(|(task, (r, skipped))| TaskRecall {
            task,
            templates: r.len(),
            skipped,
            recall: percentages(&r, &ks),
            r1: percentages(&r, &[1])[&1],
        })
        .collect();
    if tasks.is_empty() {
        return Err(RetrievalError::EmptyTemplateSet);
    }
    let average_r1 = tasks.iter().map(|t| t.r1).sum::<f64>() / tasks.len() as f64;
    Ok(EvalReport { scorer: scorer_name.to_string(), ks, tasks, average_r1 })
}

/// Curated-gallery Recall@K with one of the built-in scorers.
pub fn recall_at_k(
    templates: &[RetrievalTemplate],
    scorer: &Scorer,
    table: &EmbeddingTable,
    ks: &[usize],
) -> Result<EvalReport, RetrievalError> {
    recall_at_k_with(templates, ks, scorer.kind().as_str(), false, |t| {
        super::score_gallery(scorer, t, table)
    })
}

/// A query against the global gallery.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalQuery {
    pub reference: String,
    pub condition: String,
    pub positive: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalRecall {
    pub scorer: String,
    pub queries: usize,
    pub gallery: usize,
    pub recall: BTreeMap<usize, f64>,
}

/// Global-gallery Recall@K with a caller-supplied scoring function, which
/// receives the query and every gallery vector and returns one score each.
pub fn evaluate_global_by<F>(
    queries: &[GlobalQuery],
    gallery: &[String],
    table: &EmbeddingTable,
    ks: &[usize],
    scorer_name: &str,
    score: F,
) -> Result<GlobalRecall, RetrievalError>
where
    F: Fn(usize, &GlobalQuery, &[Vec<f64>]) -> Result<Vec<f64>, RetrievalError> + Sync,
{
    let ks = check_ks(ks)?;
    let k_max = *ks.last().expect("non-empty");
    if gallery.len() < k_max {
        return Err(RetrievalError::GalleryTooSmall { size: gallery.len(), k: k_max });
    }
    if queries.is_empty() {
        return Err(RetrievalError::EmptyTemplateSet);
    }
    let vectors = gallery
        .iter()
        .map(|id| table.vector(EmbeddingKind::Image, id))
        .collect::<Result<Vec<_>, _>>()?;
    let position: std::collections::HashMap<&str, usize> =
        gallery.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let one = |(i, q): (usize, &GlobalQuery)| -> Result<usize, RetrievalError> {
        let p = *position
            .get(q.positive.as_str())
            .ok_or_else(|| RetrievalError::PositiveNotInGallery(q.positive.clone()))?;
        let scores = score(i, q, &vectors)?;
        if scores.len() != vectors.len() {
            return Err(RetrievalError::DimensionMismatch { expected: vectors.len(), got: scores.len() });
        }
        Ok(rank_of(&scores, p))
    };
    #[cfg(feature = "parallel")]
    let ranks: Vec<Result<usize, RetrievalError>> = {
        use rayon::prelude::*;
        queries.par_iter().enumerate().map(one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let ranks: Vec<Result<usize, RetrievalError>> = queries.iter().enumerate().map(one).collect();
    let ranks = ranks.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(GlobalRecall {
        scorer: scorer_name.to_string(),
        queries: ranks.len(),
        gallery: gallery.len(),
        recall: percentages(&ranks, &ks),
    })
}

/// Every query scored exhaustively against the whole gallery.
pub fn evaluate_global(
    queries: &[GlobalQuery],
    gallery: &[String],
    scorer: &Scorer,
    table: &EmbeddingTable,
    ks: &[usize],
) -> Result<GlobalRecall, RetrievalError> {
    evaluate_global_by(queries, gallery, table, ks, scorer.kind().as_str(), |_, q, vectors| {
        let x_r = table.vector(EmbeddingKind::Image, &q.reference)?;
        let e = table.vector(EmbeddingKind::Text, &q.condition)?;
        score_vectors(scorer, &x_r, &e, vectors)
    })
}

/// Plain-text table: one row per report, R@K per task, then average R@1.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut tasks: Vec<Task> = reports.iter().flat_map(|r| r.tasks.iter().map(|t| t.task)).collect();
    tasks.sort();
    tasks.dedup();
    let ks: Vec<usize> = reports.first().map(|r| r.ks.clone()).unwrap_or_default();
    let cell = 6;
    let group = ks.len() * cell;
    let name_w = reports.iter().map(|r| r.scorer.len()).max().unwrap_or(0).max(6);

    let mut out = String::new();
    let _ = write!(out, "{:name_w$} ", "");
    for t in &tasks {
        let _ = write!(out, "| {:^group$} ", t.title());
    }
    let _ = writeln!(out, "| {:^7}", "Average");
    let _ = write!(out, "{:name_w$} ", "Method");
    for _ in &tasks {
        out.push_str("| ");
        for k in &ks {
            let _ = write!(out, "{:>cell$}", format!("R@{k}"));
        }
        out.push(' ');
    }
    let _ = writeln!(out, "| {:>7}", "R@1");
    let width = out.lines().last().map_or(0, str::len);
    let _ = writeln!(out, "{}", "-".repeat(width));
    for r in reports {
        let _ = write!(out, "{:name_w$} ", r.scorer);
        for t in &tasks {
            out.push_str("| ");
            match r.task(*t) {
                Some(tr) => {
                    for k in &ks {
                        match tr.recall.get(k) {
                            Some(v) => {
                                let _ = write!(out, "{v:>cell$.1}");
                            }
                            None => {
                                let _ = write!(out, "{:>cell$}", "-");
                            }
                        }
                    }
                }
                None => {
                    let _ = write!(out, "{:>group$}", "-");
                }
            }
            out.push(' ');
        }
        let _ = writeln!(out, "| {:>7.1}", r.average_r1);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::TargetSpec;
    use crate::retrieval::stub_embed;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn template(task: Task, m: usize, pos: usize) -> RetrievalTemplate {
        RetrievalTemplate {
            task,
            reference: TargetSpec::image("ref"),
            condition: "c".into(),
            gallery: (0..m).map(|i| TargetSpec::image(format!("g{i}"))).collect(),
            positive_index: pos,
        }
    }

    #[test]
    fn ties_break_by_index() {
        assert_eq!(rank_of(&[0.5, 0.5, 0.5], 0), 0);
        assert_eq!(rank_of(&[0.5, 0.5, 0.5], 2), 2);
        assert_eq!(rank_of(&[0.1, 0.9, 0.5], 2), 1);
    }

    #[test]
    fn oracle_scorer_is_perfect() {
        let ts: Vec<_> = (0..20).map(|i| template(Task::ALL[i % 4], 15, i % 15)).collect();
        let r = recall_at_k_with(&ts, &CURATED_KS, "oracle", false, |t| {
            Ok((0..t.gallery.len()).map(|j| f64::from(j == t.positive_index)).collect())
        })
        .unwrap();
        assert_eq!(r.tasks.len(), 4);
        for t in &r.tasks {
            assert!(t.recall.values().all(|&v| v == 100.0));
        }
        assert_eq!(r.average_r1, 100.0);
    }

    #[test]
    fn average_is_mean_of_task_means() {
        // Task A: 1 of 1 hit; task B: 0 of 3 hits. Mean of means = 50.
        let mut ts = vec![template(Task::FocusObject, 15, 0)];
        ts.extend((0..3).map(|_| template(Task::ChangeObject, 15, 5)));
        let r = recall_at_k_with(&ts, &[1], "x", false, |t| {
            Ok((0..t.gallery.len()).map(|j| if t.task == Task::FocusObject { -(j as f64) } else { j as f64 * 0.0 }).collect())
        })
        .unwrap();
        assert_eq!(r.task(Task::FocusObject).unwrap().r1, 100.0);
        assert_eq!(r.task(Task::ChangeObject).unwrap().r1, 0.0);
        assert_eq!(r.average_r1, 50.0);
    }

    #[test]
    fn empty_and_missing() {
        assert!(matches!(recall_at_k_with(&[], &[1], "x", false, |_| Ok(vec![])), Err(RetrievalError::EmptyTemplateSet)));
        let ts = vec![template(Task::FocusObject, 15, 0), template(Task::FocusObject, 15, 1)];
        let missing = |t: &RetrievalTemplate| {
            if t.positive_index == 1 {
                Err(RetrievalError::MissingEmbedding { kind: EmbeddingKind::Image, id: "g1".into() })
            } else {
                Ok(vec![0.0; 15])
            }
        };
        assert!(recall_at_k_with(&ts, &[1], "x", false, missing).is_err());
        let r = recall_at_k_with(&ts, &[1], "x", true, missing).unwrap();
        assert_eq!((r.tasks[0].templates, r.tasks[0].skipped), (1, 1));
    }

    #[test]
    fn global_with_singleton_gallery() {
        let mut table = EmbeddingTable::new(8);
        for id in ["a", "b"] {
            table.insert(EmbeddingKind::Image, id, &stub_embed(id, 8, 0)).unwrap();
        }
        table.insert(EmbeddingKind::Text, "t", &stub_embed("t", 8, 0)).unwrap();
        let q = vec![GlobalQuery { reference: "a".into(), condition: "t".into(), positive: "b".into() }];
        let r = evaluate_global(&q, &["b".to_string()], &Scorer::TextOnly, &table, &[1]).unwrap();
        assert_eq!(r.recall[&1], 100.0);
        assert!(matches!(
            evaluate_global(&q, &["b".to_string()], &Scorer::TextOnly, &table, &GLOBAL_KS),
            Err(RetrievalError::GalleryTooSmall { .. })
        ));
        assert!(matches!(
            evaluate_global(&q, &["a".to_string()], &Scorer::TextOnly, &table, &[1]),
            Err(RetrievalError::PositiveNotInGallery(_))
        ));
    }

    #[test]
    fn random_scorer_on_global_gallery_is_at_chance() {
        let mut table = EmbeddingTable::new(4);
        let gallery: Vec<String> = (0..1000).map(|i| format!("g{i}")).collect();
        for id in &gallery {
            table.insert(EmbeddingKind::Image, id.clone(), &stub_embed(id, 4, 0)).unwrap();
        }
        let queries: Vec<GlobalQuery> = (0..3000)
            .map(|i| GlobalQuery { reference: "g0".into(), condition: "t".into(), positive: gallery[(i * 7919) % 1000].clone() })
            .collect();
        let r = evaluate_global_by(&queries, &gallery, &table, &GLOBAL_KS, "random", |i, _, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            Ok((0..v.len()).map(|_| rng.random::<f64>()).collect())
        })
        .unwrap();
        for (k, p) in [(1, 0.001f64), (5, 0.005), (10, 0.01)] {
            let sd = (p * (1.0 - p) / 3000.0).sqrt() * 100.0;
            assert!((r.recall[&k] - p * 100.0).abs() < 4.0 * sd, "R@{k} = {}", r.recall[&k]);
        }
    }

    #[test]
    fn table_renders_every_task() {
        let ts: Vec<_> = Task::ALL.iter().map(|&t| template(t, t.gallery_size(), 0)).collect();
        let r = recall_at_k_with(&ts, &CURATED_KS, "image-only", false, |t| Ok(vec![1.0; t.gallery.len()])).unwrap();
        let s = render_table(&[r]);
        for t in Task::ALL {
            assert!(s.contains(t.title()), "{s}");
        }
        assert!(s.contains("100.0"));
    }

    proptest! {
        #[test]
        fn recall_monotone_and_transform_invariant(seed: u64, n in 1usize..40) {
            let ts: Vec<_> = (0..n).map(|i| template(Task::ALL[i % 4], 15, i % 15)).collect();
            let scores = |t: &RetrievalTemplate| -> Vec<f64> {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t.positive_index as u64 * 7919 + t.task as u64));
                (0..t.gallery.len()).map(|_| rng.random_range(0..4) as f64).collect()
            };
            let r = recall_at_k_with(&ts, &[1, 2, 3, 5], "r", false, |t| Ok(scores(t))).unwrap();
            for t in &r.tasks {
                let v: Vec<f64> = t.recall.values().copied().collect();
                prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
            }
            let r2 = recall_at_k_with(&ts, &[1, 2, 3, 5], "r", false, |t| Ok(scores(t).iter().map(|s| (3.0 * s + 1.0).exp()).collect())).unwrap();
            prop_assert_eq!(&r.tasks, &r2.tasks);
            let mut rev = ts.clone();
            rev.reverse();
            let r3 = recall_at_k_with(&rev, &[1, 2, 3, 5], "r", false, |t| Ok(scores(t))).unwrap();
            prop_assert_eq!(r.tasks, r3.tasks);
        }
    }
}
