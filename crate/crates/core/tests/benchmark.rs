use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use proptest::prelude::*;

use condsim::annotation::{categories_present, AnnotationStore, AttributeTaxonomy, ImageRecord, LoadOptions, PanopticRecord};
use condsim::benchmark::{build_all, build_task, validate_benchmark, BenchmarkConfig, RetrievalTemplate, Task};
use condsim::retrieval::{recall_at_k_with, CURATED_KS};
use condsim::synthetic::{generate_corpus, CorpusConfig};

fn scene(id: &str, cats: &[&str]) -> (ImageRecord, PanopticRecord) {
    (
        ImageRecord { id: id.into(), width: 640, height: 480 },
        PanopticRecord { image_id: id.into(), fractions: cats.iter().map(|c| (c.to_string(), 0.05)).collect() },
    )
}

/// A kitchen plus two close scenes that both contain its refrigerator; the
/// one with the larger overlap is what a bag-of-objects matcher ranks first.
fn kitchens() -> AnnotationStore {
    let kitchen = ["refrigerator", "c1", "c2", "c3", "c4", "c5", "c6", "c7", "c8", "c9"];
    let mut scenes = vec![
        scene("kitchen", &kitchen),
        scene("pos_a", &["refrigerator", "c1", "c2", "c3", "c4", "c5", "c6", "x"]),
        scene("pos_b", &["refrigerator", "c1", "c2", "c3", "c4", "c5", "c6", "c7", "c8"]),
    ];
    for i in 0..9 {
        scenes.push(scene(&format!("close{i}"), &["c1", "c2", "c3", "c4", "c5", "c6", "c7"]));
    }
    for i in 0..5 {
        scenes.push(scene(&format!("far{i}"), &["refrigerator", "y1", "y2"]));
    }
    let (images, panoptic) = scenes.into_iter().unzip();
    let taxonomy = AttributeTaxonomy::from_groups(BTreeMap::new()).unwrap();
    AnnotationStore::new(images, vec![], panoptic, taxonomy, &LoadOptions::default()).unwrap()
}

/// Scores each gallery scene by how many categories it shares with the
/// reference scene, ignoring the condition entirely.
fn bag_of_objects_r1(store: &AnnotationStore, templates: &[RetrievalTemplate], cfg: &BenchmarkConfig) -> f64 {
    let cats = |id: &str| -> BTreeSet<String> { categories_present(store.panoptic_for(id).unwrap(), cfg.presence_threshold) };
    let report = recall_at_k_with(templates, &CURATED_KS, "bag-of-objects", false, |t| {
        let r = cats(&t.reference.image_id);
        Ok(t.gallery.iter().map(|g| cats(&g.image_id).intersection(&r).count() as f64).collect())
    })
    .unwrap();
    report.tasks[0].r1 / 100.0
}

#[test]
fn bag_of_objects_cannot_solve_focus_object() {
    let store = kitchens();
    let cfg = BenchmarkConfig::default();
    let templates: Vec<RetrievalTemplate> = (0..32)
        .flat_map(|seed| build_task(&store, Task::FocusObject, seed, &cfg).templates)
        .collect();
    assert_eq!(templates.len(), 32);
    let r1 = bag_of_objects_r1(&store, &templates, &cfg);
    assert!(r1 < 1.0 && r1 > 0.0, "R@1 {r1}");
}

#[test]
fn bag_of_objects_on_synthetic_focus_object() {
    let corpus = small_corpus();
    let cfg = BenchmarkConfig::default();
    let templates = build_task(&corpus.store, Task::FocusObject, 0, &cfg).templates;
    assert!(!templates.is_empty());
    assert!(bag_of_objects_r1(&corpus.store, &templates, &cfg) < 1.0);
}

fn small_corpus() -> &'static condsim::synthetic::Corpus {
    static CORPUS: OnceLock<condsim::synthetic::Corpus> = OnceLock::new();
    CORPUS.get_or_init(|| generate_corpus(&CorpusConfig { images_per_scene: 40, dim: 16, ..Default::default() }))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_seed_yields_a_valid_benchmark(seed: u64) {
        let store = &small_corpus().store;
        let cfg = BenchmarkConfig { per_type_quota: 10, object_quota: Some(10), ..Default::default() };
        let built = build_all(store, seed, &cfg);
        let templates: Vec<RetrievalTemplate> = built.iter().flat_map(|(_, b)| b.templates.clone()).collect();
        for (task, b) in &built {
            prop_assert!(!b.templates.is_empty(), "{task:?} produced nothing");
            prop_assert!(b.templates.iter().all(|t| t.task == *task && t.gallery.len() == task.gallery_size()));
        }
        if let Err(e) = validate_benchmark(&templates, store, &cfg) {
            prop_assert!(false, "{:?}", e.violations);
        }
        prop_assert_eq!(build_all(store, seed, &cfg), built);
    }

    #[test]
    fn positive_slot_is_not_biased(seed in 0u64..1000) {
        let store = &small_corpus().store;
        let cfg = BenchmarkConfig::default();
        let t = build_task(store, Task::ChangeObject, seed, &cfg).templates;
        let mean = t.iter().map(|t| t.positive_index as f64).sum::<f64>() / t.len() as f64;
        // Uniform over 15 slots has mean 7 and sd 4.32.
        let sd = 4.32 / (t.len() as f64).sqrt();
        prop_assert!((mean - 7.0).abs() < 5.0 * sd, "mean {mean} over {}", t.len());
    }
}
