//! Bag-of-categories scene descriptors and the close/far neighbour sets.

use std::collections::BTreeSet;

use crate::annotation::{categories_present, AnnotationStore};

use super::{BenchmarkConfig, BenchmarkError};

/// Present categories of every image that has a panoptic record, sorted by
/// image id.
#[derive(Debug, Clone)]
pub struct SceneIndex {
    scenes: Vec<(String, BTreeSet<String>)>,
}

impl SceneIndex {
    pub fn new(store: &AnnotationStore, presence_threshold: f64) -> Self {
        let mut scenes: Vec<_> = store
            .panoptic()
            .iter()
            .map(|r| (r.image_id.clone(), categories_present(r, presence_threshold)))
            .collect();
        scenes.sort_by(|a, b| a.0.cmp(&b.0));
        Self { scenes }
    }

    pub fn from_scenes(mut scenes: Vec<(String, BTreeSet<String>)>) -> Self {
        scenes.sort_by(|a, b| a.0.cmp(&b.0));
        Self { scenes }
    }

    pub fn categories(&self, image_id: &str) -> Option<&BTreeSet<String>> {
        self.scenes
            .binary_search_by(|(id, _)| id.as_str().cmp(image_id))
            .ok()
            .map(|i| &self.scenes[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BTreeSet<String>)> {
        self.scenes.iter().map(|(id, c)| (id.as_str(), c))
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSets {
    pub reference_cats: BTreeSet<String>,
    /// Similar scenes ranked by overlap (descending), then image id.
    pub i_close: Vec<(String, usize)>,
    /// Dissimilar scenes, in image id order.
    pub i_far: Vec<String>,
}

impl SceneSets {
    pub fn is_close(&self, image_id: &str) -> bool {
        self.i_close.iter().any(|(id, _)| id == image_id)
    }

    pub fn is_far(&self, image_id: &str) -> bool {
        self.i_far.iter().any(|id| id == image_id)
    }
}

/// Close set: at least `close_min_overlap` shared categories while missing
/// at least one reference category. Far set: at most `far_max` shared.
pub fn build_scene_sets(
    scenes: &SceneIndex,
    reference_image: &str,
    config: &BenchmarkConfig,
) -> Result<SceneSets, BenchmarkError> {
    let reference_cats = scenes
        .categories(reference_image)
        .ok_or_else(|| BenchmarkError::UnknownImage(reference_image.to_string()))?
        .clone();
    if reference_cats.len() < config.min_reference_categories {
        return Err(BenchmarkError::InsufficientScene {
            image: reference_image.to_string(),
            found: reference_cats.len(),
            required: config.min_reference_categories,
        });
    }
    let mut i_close = Vec::new();
    let mut i_far = Vec::new();
    for (id, cats) in scenes.iter() {
        if id == reference_image {
            continue;
        }
        let overlap = cats.intersection(&reference_cats).count();
        if overlap >= config.close_min_overlap && overlap < reference_cats.len() {
            i_close.push((id.to_string(), overlap));
        }
        if overlap <= config.far_max {
            i_far.push(id.to_string());
        }
    }
    i_close.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(SceneSets {
        reference_cats,
        i_close,
        i_far,
    })
}
