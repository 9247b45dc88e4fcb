//! Object-conditioned tasks over whole-image scenes.

use rand::seq::{IndexedRandom, SliceRandom};
use rand_chacha::ChaCha8Rng;

use crate::annotation::AnnotationStore;
use crate::rng::derive_rng;

use super::scene::{build_scene_sets, SceneIndex, SceneSets};
use super::{
    assemble, take_successes, BenchmarkConfig, BenchmarkError, BuildOutput, RetrievalTemplate,
    TargetSpec, Task, CLOSE_DISTRACTORS, FAR_DISTRACTORS,
};

fn eligible_references<'a>(scenes: &'a SceneIndex, config: &BenchmarkConfig) -> Vec<&'a str> {
    scenes
        .iter()
        .filter(|(_, c)| c.len() >= config.min_reference_categories)
        .map(|(id, _)| id)
        .collect()
}

fn has(scenes: &SceneIndex, image: &str, category: &str) -> bool {
    scenes
        .categories(image)
        .is_some_and(|c| c.contains(category))
}

/// Distractor pools for condition `category`: close scenes without it
/// (excluding the positive) and far scenes with it.
fn distractor_pools<'a>(
    scenes: &SceneIndex,
    sets: &'a SceneSets,
    positive: &str,
    category: &str,
) -> (Vec<&'a str>, Vec<&'a str>) {
    let close: Vec<&str> = sets
        .i_close
        .iter()
        .map(|(id, _)| id.as_str())
        .filter(|id| *id != positive && !has(scenes, id, category))
        .collect();
    let far: Vec<&str> = sets
        .i_far
        .iter()
        .map(String::as_str)
        .filter(|id| has(scenes, id, category))
        .collect();
    (close, far)
}

/// Tries condition categories in order; the first with enough distractors
/// yields a template.
fn template_for(
    task: Task,
    scenes: &SceneIndex,
    sets: &SceneSets,
    reference: &str,
    positive: &str,
    conditions: &[&String],
    rng: &mut ChaCha8Rng,
) -> Option<RetrievalTemplate> {
    for &k in conditions {
        let (close, far) = distractor_pools(scenes, sets, positive, k);
        if close.len() < CLOSE_DISTRACTORS || far.len() < FAR_DISTRACTORS {
            continue;
        }
        let distractors: Vec<TargetSpec> = close
            .choose_multiple(rng, CLOSE_DISTRACTORS)
            .chain(far.choose_multiple(rng, FAR_DISTRACTORS))
            .map(|id| TargetSpec::image(*id))
            .collect();
        return Some(assemble(
            task,
            TargetSpec::image(reference),
            k.clone(),
            TargetSpec::image(positive),
            distractors,
            rng,
        ));
    }
    None
}

fn build_objects<F>(store: &AnnotationStore, config: &BenchmarkConfig, build: F) -> BuildOutput
where
    F: Fn(&SceneIndex, &str) -> Result<RetrievalTemplate, BenchmarkError> + Sync,
{
    let scenes = SceneIndex::new(store, config.presence_threshold);
    let refs = eligible_references(&scenes, config);
    let quota = config.object_quota.unwrap_or(usize::MAX);
    let (templates, skipped) = take_successes(&refs, quota, |r| build(&scenes, r));
    BuildOutput { templates, skipped }
}

/// Focus on an object: a random close scene is the positive and the
/// condition is one of the categories it shares with the reference.
pub fn build_focus_object(store: &AnnotationStore, seed: u64, config: &BenchmarkConfig) -> BuildOutput {
    build_objects(store, config, |scenes, reference| {
        let sets = build_scene_sets(scenes, reference, config)?;
        if sets.i_close.is_empty() || sets.i_far.is_empty() {
            return Err(BenchmarkError::TemplateUnderflow(format!(
                "{reference}: empty close or far set"
            )));
        }
        let mut rng = derive_rng(seed, &["focus_object", reference]);
        let mut positives: Vec<&str> = sets.i_close.iter().map(|(id, _)| id.as_str()).collect();
        positives.shuffle(&mut rng);
        for positive in positives {
            let cats = scenes.categories(positive).expect("indexed");
            let mut shared: Vec<&String> = cats.intersection(&sets.reference_cats).collect();
            shared.shuffle(&mut rng);
            if let Some(t) =
                template_for(Task::FocusObject, scenes, &sets, reference, positive, &shared, &mut rng)
            {
                return Ok(t);
            }
        }
        Err(BenchmarkError::TemplateUnderflow(format!(
            "{reference}: no positive with enough distractors"
        )))
    })
}

/// Change an object: the highest-ranked close scene that adds a category is
/// the positive, and one added category is the condition.
pub fn build_change_object(store: &AnnotationStore, seed: u64, config: &BenchmarkConfig) -> BuildOutput {
    build_objects(store, config, |scenes, reference| {
        let sets = build_scene_sets(scenes, reference, config)?;
        let mut rng = derive_rng(seed, &["change_object", reference]);
        let positive = sets.i_close.iter().map(|(id, _)| id.as_str()).find(|id| {
            let cats = scenes.categories(id).expect("indexed");
            !cats.is_subset(&sets.reference_cats)
        });
        let Some(positive) = positive else {
            return Err(BenchmarkError::TemplateUnderflow(format!(
                "{reference}: no close scene adds a category"
            )));
        };
        let cats = scenes.categories(positive).expect("indexed");
        let mut added: Vec<&String> = cats.difference(&sets.reference_cats).collect();
        added.shuffle(&mut rng);
        template_for(Task::ChangeObject, scenes, &sets, reference, positive, &added, &mut rng)
            .ok_or_else(|| {
                BenchmarkError::TemplateUnderflow(format!(
                    "{reference}: no added category with enough distractors"
                ))
            })
    })
}
