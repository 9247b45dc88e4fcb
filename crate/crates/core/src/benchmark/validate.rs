//! Structural and semantic checks over built templates.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::Serialize;
use thiserror::Error;

use crate::annotation::{AnnotationStore, ObjectInstance};

use super::attribute::typed_attributes;
use super::scene::{build_scene_sets, SceneIndex, SceneSets};
use super::{
    BenchmarkConfig, RetrievalTemplate, Task, CLOSE_DISTRACTORS, CONDITION_ONLY_DISTRACTORS,
    FAR_DISTRACTORS, REFERENCE_ONLY_DISTRACTORS,
};

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub templates: BTreeMap<Task, usize>,
    /// Per task, how often each condition occurs. For focus-attribute
    /// templates the key is the attribute shared by reference and positive.
    pub condition_histogram: BTreeMap<Task, BTreeMap<String, usize>>,
}

#[derive(Debug, Error)]
#[error("{} invalid template(s); first: {}", violations.len(), violations.first().map(String::as_str).unwrap_or(""))]
pub struct ValidationError {
    pub violations: Vec<String>,
}

fn structure_problems(t: &RetrievalTemplate) -> Vec<String> {
    let mut p = Vec::new();
    let want = t.task.gallery_size();
    if t.gallery.len() != want {
        p.push(format!("gallery has {} entries, expected {want}", t.gallery.len()));
    }
    if t.positive_index >= t.gallery.len() {
        p.push(format!("positive_index {} out of range", t.positive_index));
    }
    if t.condition.trim().is_empty() {
        p.push("empty condition".into());
    }
    let attr = t.task.is_attribute();
    for (what, spec) in std::iter::once(("reference", &t.reference))
        .chain(t.gallery.iter().map(|g| ("gallery entry", g)))
    {
        if spec.crop.is_some() != attr || spec.instance_id.is_some() != attr {
            p.push(format!(
                "{what} {:?}: crop/instance must be {} for {}",
                spec.embedding_key(),
                if attr { "present" } else { "absent" },
                t.task
            ));
        }
    }
    let mut keys = HashSet::new();
    for g in &t.gallery {
        if !keys.insert(g.embedding_key()) {
            p.push(format!("duplicate gallery entry {:?}", g.embedding_key()));
        }
    }
    if keys.contains(t.reference.embedding_key()) {
        p.push("reference appears in its own gallery".into());
    }
    p
}

fn collect(problems: Vec<String>) -> Result<(), ValidationError> {
    if problems.is_empty() {
        Ok(())
    } else {
        Err(ValidationError {
            violations: problems,
        })
    }
}

/// Checks gallery sizes, positive index range, crop presence and
/// uniqueness without consulting annotations.
pub fn validate_structure(templates: &[RetrievalTemplate]) -> Result<ValidationReport, ValidationError> {
    let mut report = ValidationReport::default();
    let mut problems = Vec::new();
    for (i, t) in templates.iter().enumerate() {
        problems.extend(
            structure_problems(t)
                .into_iter()
                .map(|m| format!("template {i} ({}): {m}", t.task)),
        );
        *report.templates.entry(t.task).or_default() += 1;
        *report
            .condition_histogram
            .entry(t.task)
            .or_default()
            .entry(t.condition.clone())
            .or_default() += 1;
    }
    collect(problems).map(|_| report)
}

struct Checker<'a> {
    store: &'a AnnotationStore,
    config: &'a BenchmarkConfig,
    scenes: SceneIndex,
}

impl<'a> Checker<'a> {
    fn instance(&self, key: Option<&String>) -> Result<&'a ObjectInstance, String> {
        let id = key.ok_or("missing instance id")?;
        self.store
            .instance(id)
            .ok_or_else(|| format!("unknown instance {id:?}"))
    }

    /// Exactly one qualifying entry, and it is the recorded positive.
    fn single_positive(&self, t: &RetrievalTemplate, qualifies: &[bool], p: &mut Vec<String>) {
        let hits: Vec<usize> = qualifies
            .iter()
            .enumerate()
            .filter(|(_, &q)| q)
            .map(|(i, _)| i)
            .collect();
        if hits != [t.positive_index] {
            p.push(format!(
                "qualifying entries {hits:?}, recorded positive {}",
                t.positive_index
            ));
        }
    }

    fn focus_attribute(&self, t: &RetrievalTemplate, p: &mut Vec<String>) -> Option<String> {
        let ty = t.condition.as_str();
        if self.config.excluded_focus_types.iter().any(|x| x == ty) {
            p.push(format!("attribute type {ty:?} is excluded"));
        }
        let r = match self.instance(t.reference.instance_id.as_ref()) {
            Ok(r) => r,
            Err(e) => {
                p.push(e);
                return None;
            }
        };
        let gallery: Vec<&ObjectInstance> = match t
            .gallery
            .iter()
            .map(|g| self.instance(g.instance_id.as_ref()))
            .collect()
        {
            Ok(g) => g,
            Err(e) => {
                p.push(e);
                return None;
            }
        };
        let ref_attrs: BTreeSet<&String> = typed_attributes(self.store, r, ty).collect();
        let qualifies: Vec<bool> = gallery
            .iter()
            .map(|g| g.category == r.category && ref_attrs.iter().any(|a| g.positive_attributes.contains(*a)))
            .collect();
        self.single_positive(t, &qualifies, p);
        let positive = gallery.get(t.positive_index)?;
        // Some shared attribute must be negatively labelled on every distractor.
        let shared = ref_attrs.iter().find(|a| {
            positive.positive_attributes.contains(**a)
                && gallery.iter().enumerate().all(|(i, g)| {
                    i == t.positive_index
                        || (g.category == r.category && g.negative_attributes.contains(**a))
                })
        });
        match shared {
            Some(a) => Some((*a).clone()),
            None => {
                p.push("no shared attribute is negatively labelled on every distractor".into());
                None
            }
        }
    }

    fn change_attribute(&self, t: &RetrievalTemplate, p: &mut Vec<String>) {
        let c = t.condition.as_str();
        let r = match self.instance(t.reference.instance_id.as_ref()) {
            Ok(r) => r,
            Err(e) => return p.push(e),
        };
        let gallery: Vec<&ObjectInstance> = match t
            .gallery
            .iter()
            .map(|g| self.instance(g.instance_id.as_ref()))
            .collect()
        {
            Ok(g) => g,
            Err(e) => return p.push(e),
        };
        if r.positive_attributes.contains(c) {
            p.push(format!("reference already has {c:?}"));
        }
        match self.store.taxonomy().type_of(c) {
            Some(ty) if typed_attributes(self.store, r, ty).next().is_some() => {}
            _ => p.push(format!("reference has no attribute of the type of {c:?}")),
        }
        let qualifies: Vec<bool> = gallery
            .iter()
            .map(|g| g.category == r.category && g.positive_attributes.contains(c))
            .collect();
        self.single_positive(t, &qualifies, p);
        let (mut cond_only, mut ref_only) = (0, 0);
        for (i, g) in gallery.iter().enumerate() {
            if i == t.positive_index {
                continue;
            }
            if g.category != r.category && g.positive_attributes.contains(c) {
                cond_only += 1;
            } else if g.category == r.category && g.negative_attributes.contains(c) {
                ref_only += 1;
            } else {
                p.push(format!("distractor {i} fits neither distractor rule"));
            }
        }
        if (cond_only, ref_only) != (CONDITION_ONLY_DISTRACTORS, REFERENCE_ONLY_DISTRACTORS) {
            p.push(format!("distractor split ({cond_only}, {ref_only})"));
        }
    }

    fn object(&self, t: &RetrievalTemplate, p: &mut Vec<String>) {
        let k = t.condition.as_str();
        let sets: SceneSets = match build_scene_sets(&self.scenes, &t.reference.image_id, self.config) {
            Ok(s) => s,
            Err(e) => return p.push(e.to_string()),
        };
        let in_ref = sets.reference_cats.contains(k);
        match t.task {
            Task::FocusObject if !in_ref => p.push(format!("reference lacks condition {k:?}")),
            Task::ChangeObject if in_ref => p.push(format!("reference already has {k:?}")),
            _ => {}
        }
        let has = |id: &str| self.scenes.categories(id).is_some_and(|c| c.contains(k));
        let qualifies: Vec<bool> = t
            .gallery
            .iter()
            .map(|g| sets.is_close(&g.image_id) && has(&g.image_id))
            .collect();
        self.single_positive(t, &qualifies, p);
        let (mut close, mut far) = (0, 0);
        for (i, g) in t.gallery.iter().enumerate() {
            if i == t.positive_index {
                continue;
            }
            if sets.is_close(&g.image_id) && !has(&g.image_id) {
                close += 1;
            } else if sets.is_far(&g.image_id) && has(&g.image_id) {
                far += 1;
            } else {
                p.push(format!("distractor {i} ({}) fits neither distractor rule", g.image_id));
            }
        }
        if (close, far) != (CLOSE_DISTRACTORS, FAR_DISTRACTORS) {
            p.push(format!("distractor split ({close} close, {far} far)"));
        }
    }
}

/// Full validation: structure plus every task predicate against the
/// annotations the templates were built from.
pub fn validate_benchmark(
    templates: &[RetrievalTemplate],
    store: &AnnotationStore,
    config: &BenchmarkConfig,
) -> Result<ValidationReport, ValidationError> {
    let checker = Checker {
        store,
        config,
        scenes: SceneIndex::new(store, config.presence_threshold),
    };
    let mut report = ValidationReport::default();
    let mut problems = Vec::new();
    for (i, t) in templates.iter().enumerate() {
        let mut p = structure_problems(t);
        let mut key = t.condition.clone();
        if p.is_empty() {
            match t.task {
                Task::FocusAttribute => {
                    if let Some(a) = checker.focus_attribute(t, &mut p) {
                        key = a;
                    }
                }
                Task::ChangeAttribute => checker.change_attribute(t, &mut p),
                Task::FocusObject | Task::ChangeObject => checker.object(t, &mut p),
            }
        }
        problems.extend(p.into_iter().map(|m| format!("template {i} ({}): {m}", t.task)));
        *report.templates.entry(t.task).or_default() += 1;
        *report
            .condition_histogram
            .entry(t.task)
            .or_default()
            .entry(key)
            .or_default() += 1;
    }
    collect(problems).map(|_| report)
}
