//! Construction of the four conditional retrieval tasks.
//!
//! Attribute tasks are built from object instances with positive and
//! negative attribute labels; object tasks from panoptic category coverage.
//! Every template holds a reference, a text condition and a gallery with
//! exactly one positive, padded out with distractors that each satisfy only
//! part of the conditional similarity predicate.

mod attribute;
mod object;
mod scene;
mod validate;
#[cfg(test)]
pub(crate) mod fixtures;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{CropSpec, GeometryError, DEFAULT_DILATION, DEFAULT_PRESENCE_THRESHOLD};

pub use attribute::{build_change_attribute, build_focus_attribute};
pub use object::{build_change_object, build_focus_object};
pub use scene::{build_scene_sets, SceneIndex, SceneSets};
pub use validate::{validate_benchmark, validate_structure, ValidationError, ValidationReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    FocusAttribute,
    ChangeAttribute,
    FocusObject,
    ChangeObject,
}

impl Task {
    pub const ALL: [Task; 4] = [
        Task::FocusAttribute,
        Task::ChangeAttribute,
        Task::FocusObject,
        Task::ChangeObject,
    ];

    pub fn gallery_size(self) -> usize {
        match self {
            Task::FocusAttribute => 10,
            _ => 15,
        }
    }

    pub fn is_attribute(self) -> bool {
        matches!(self, Task::FocusAttribute | Task::ChangeAttribute)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::FocusAttribute => "focus_attribute",
            Task::ChangeAttribute => "change_attribute",
            Task::FocusObject => "focus_object",
            Task::ChangeObject => "change_object",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Task::FocusAttribute => "Focus Attribute",
            Task::ChangeAttribute => "Change Attribute",
            Task::FocusObject => "Focus Object",
            Task::ChangeObject => "Change Object",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.replace('-', "_");
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == norm)
            .ok_or_else(|| format!("unknown task {s:?}"))
    }
}

/// One reference or gallery entry. Attribute tasks address an object crop
/// (`instance_id` + `crop`); object tasks address a whole image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<CropSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_id: Option<String>,
}

impl TargetSpec {
    pub fn image(image_id: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            crop: None,
            instance_id: None,
        }
    }

    /// Id under which this target's image embedding is stored: the instance
    /// for crops, otherwise the image.
    pub fn embedding_key(&self) -> &str {
        self.instance_id.as_deref().unwrap_or(&self.image_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTemplate {
    pub task: Task,
    pub reference: TargetSpec,
    pub condition: String,
    pub gallery: Vec<TargetSpec>,
    pub positive_index: usize,
}

impl RetrievalTemplate {
    pub fn positive(&self) -> Option<&TargetSpec> {
        self.gallery.get(self.positive_index)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    /// A panoptic category is present when its pixel fraction exceeds this.
    pub presence_threshold: f64,
    pub dilation: f64,
    /// Minimum present categories for an object-task reference.
    pub min_reference_categories: usize,
    /// Minimum category overlap for membership in the close set.
    pub close_min_overlap: usize,
    /// Maximum category overlap for membership in the far set.
    pub far_max: usize,
    /// Attribute types never used as a focus condition.
    pub excluded_focus_types: Vec<String>,
    /// Templates per attribute type for the attribute tasks.
    pub per_type_quota: usize,
    /// Cap on templates per object task; `None` uses every eligible reference.
    pub object_quota: Option<usize>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            presence_threshold: DEFAULT_PRESENCE_THRESHOLD,
            dilation: DEFAULT_DILATION,
            min_reference_categories: 10,
            close_min_overlap: 6,
            far_max: 2,
            excluded_focus_types: ["opinion", "other after", "other physical quality", "state", "type"]
                .into_iter()
                .map(String::from)
                .collect(),
            per_type_quota: 50,
            object_quota: None,
        }
    }
}

pub(crate) const FOCUS_ATTRIBUTE_DISTRACTORS: usize = 9;
pub(crate) const CONDITION_ONLY_DISTRACTORS: usize = 9;
pub(crate) const REFERENCE_ONLY_DISTRACTORS: usize = 5;
pub(crate) const CLOSE_DISTRACTORS: usize = 9;
pub(crate) const FAR_DISTRACTORS: usize = 5;

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error("image {image:?} has {found} present categories, need {required}")]
    InsufficientScene {
        image: String,
        found: usize,
        required: usize,
    },
    #[error("unknown image {0:?}")]
    UnknownImage(String),
    #[error("not enough candidates: {0}")]
    TemplateUnderflow(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Templates from one builder plus the number of candidates that were
/// skipped for lack of qualifying positives or distractors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuildOutput {
    pub templates: Vec<RetrievalTemplate>,
    pub skipped: usize,
}

/// Shuffles `[positive, distractors..]` and records where the positive landed.
pub(crate) fn assemble(
    task: Task,
    reference: TargetSpec,
    condition: String,
    positive: TargetSpec,
    distractors: Vec<TargetSpec>,
    rng: &mut ChaCha8Rng,
) -> RetrievalTemplate {
    let mut order: Vec<usize> = (0..=distractors.len()).collect();
    order.shuffle(rng);
    let mut slots: Vec<Option<TargetSpec>> = std::iter::once(Some(positive))
        .chain(distractors.into_iter().map(Some))
        .collect();
    let gallery: Vec<TargetSpec> = order
        .iter()
        .map(|&i| slots[i].take().expect("each slot used once"))
        .collect();
    let positive_index = order.iter().position(|&i| i == 0).expect("positive present");
    RetrievalTemplate {
        task,
        reference,
        condition,
        gallery,
        positive_index,
    }
}

/// Evaluates `build` over `candidates` in order until `quota` templates
/// succeed. Candidates are processed in parallel chunks; the result is the
/// same as a sequential scan. Returns the successes and the number of
/// underflows seen before the quota was met.
pub(crate) fn take_successes<C, F>(
    candidates: &[C],
    quota: usize,
    build: F,
) -> (Vec<RetrievalTemplate>, usize)
where
    C: Sync,
    F: Fn(&C) -> Result<RetrievalTemplate, BenchmarkError> + Sync,
{
    const CHUNK: usize = 64;
    let mut out = Vec::new();
    let mut skipped = 0;
    for chunk in candidates.chunks(CHUNK) {
        if out.len() >= quota {
            break;
        }
        #[cfg(feature = "parallel")]
        let results: Vec<_> = {
            use rayon::prelude::*;
            chunk.par_iter().map(&build).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let results: Vec<_> = chunk.iter().map(&build).collect();
        for r in results {
            if out.len() >= quota {
                break;
            }
            match r {
                Ok(t) => out.push(t),
                Err(_) => skipped += 1,
            }
        }
    }
    (out, skipped)
}

/// Runs every builder with the same seed and configuration.
pub fn build_all(
    store: &crate::annotation::AnnotationStore,
    seed: u64,
    config: &BenchmarkConfig,
) -> Vec<(Task, BuildOutput)> {
    Task::ALL
        .into_iter()
        .map(|t| (t, build_task(store, t, seed, config)))
        .collect()
}

pub fn build_task(
    store: &crate::annotation::AnnotationStore,
    task: Task,
    seed: u64,
    config: &BenchmarkConfig,
) -> BuildOutput {
    match task {
        Task::FocusAttribute => build_focus_attribute(store, seed, config),
        Task::ChangeAttribute => build_change_attribute(store, seed, config),
        Task::FocusObject => build_focus_object(store, seed, config),
        Task::ChangeObject => build_change_object(store, seed, config),
    }
}
