//! Attribute-conditioned tasks over object crops.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};

use crate::annotation::{dilate_and_pad_box, AnnotationStore, ObjectInstance};
use crate::rng::derive_rng;

use super::{
    assemble, take_successes, BenchmarkConfig, BenchmarkError, BuildOutput, RetrievalTemplate,
    TargetSpec, Task, CONDITION_ONLY_DISTRACTORS, FOCUS_ATTRIBUTE_DISTRACTORS,
    REFERENCE_ONLY_DISTRACTORS,
};

pub(crate) fn crop_target(
    store: &AnnotationStore,
    inst: &ObjectInstance,
    dilation: f64,
) -> Result<TargetSpec, BenchmarkError> {
    let img = store
        .image(&inst.image_id)
        .ok_or_else(|| BenchmarkError::UnknownImage(inst.image_id.clone()))?;
    let crop = dilate_and_pad_box(inst.bbox, (img.width, img.height), dilation)?;
    Ok(TargetSpec {
        image_id: inst.image_id.clone(),
        crop: Some(crop),
        instance_id: Some(inst.id.clone()),
    })
}

/// Positive attributes of `inst` that belong to attribute type `ty`.
pub(crate) fn typed_attributes<'a>(
    store: &'a AnnotationStore,
    inst: &'a ObjectInstance,
    ty: &'a str,
) -> impl Iterator<Item = &'a String> + 'a {
    inst.positive_attributes
        .iter()
        .filter(move |a| store.taxonomy().type_of(a) == Some(ty))
}

fn shares_typed_attribute(
    store: &AnnotationStore,
    a: &ObjectInstance,
    b: &ObjectInstance,
    ty: &str,
) -> bool {
    typed_attributes(store, a, ty).any(|x| b.positive_attributes.contains(x))
}

/// Candidates grouped by attribute type, each group shuffled with its own
/// stream.
fn candidates_by_type<'a, T: Clone>(
    store: &'a AnnotationStore,
    seed: u64,
    label: &str,
    mut emit: impl FnMut(&'a ObjectInstance, &'a str) -> Vec<T>,
    skip_type: impl Fn(&str) -> bool,
) -> BTreeMap<&'a str, Vec<T>> {
    let mut groups: BTreeMap<&str, Vec<T>> = BTreeMap::new();
    for inst in store.instances() {
        let types: BTreeSet<&str> = inst
            .positive_attributes
            .iter()
            .filter_map(|a| store.taxonomy().type_of(a))
            .collect();
        for ty in types {
            if !skip_type(ty) {
                groups.entry(ty).or_default().extend(emit(inst, ty));
            }
        }
    }
    for (ty, list) in groups.iter_mut() {
        list.shuffle(&mut derive_rng(seed, &[label, ty]));
    }
    groups
}

/// Focus on an attribute: the condition is an attribute type. The positive
/// shares the reference's category and its attribute of that type; the
/// distractors share the category but are negatively labelled for the
/// attribute.
pub fn build_focus_attribute(
    store: &AnnotationStore,
    seed: u64,
    config: &BenchmarkConfig,
) -> BuildOutput {
    let groups = candidates_by_type(
        store,
        seed,
        "focus_attribute",
        |inst, ty| {
            typed_attributes(store, inst, ty)
                .map(|a| (inst, a.as_str(), ty))
                .collect()
        },
        |ty| config.excluded_focus_types.iter().any(|x| x == ty),
    );
    let mut out = BuildOutput::default();
    for list in groups.values() {
        let (templates, skipped) = take_successes(list, config.per_type_quota, |&(r, a, ty)| {
            focus_attribute_template(store, r, a, ty, seed, config)
        });
        out.templates.extend(templates);
        out.skipped += skipped;
    }
    out
}

fn focus_attribute_template(
    store: &AnnotationStore,
    reference: &ObjectInstance,
    attribute: &str,
    ty: &str,
    seed: u64,
    config: &BenchmarkConfig,
) -> Result<RetrievalTemplate, BenchmarkError> {
    let mut rng = derive_rng(seed, &["focus_attribute", &reference.id, attribute]);
    let same_category: Vec<&ObjectInstance> = store
        .instances_of_category(&reference.category)
        .filter(|i| i.id != reference.id)
        .collect();
    let positives: Vec<&ObjectInstance> = same_category
        .iter()
        .copied()
        .filter(|i| i.positive_attributes.contains(attribute))
        .collect();
    let distractors: Vec<&ObjectInstance> = same_category
        .iter()
        .copied()
        .filter(|i| {
            i.negative_attributes.contains(attribute)
                && !shares_typed_attribute(store, reference, i, ty)
        })
        .collect();
    if positives.is_empty() || distractors.len() < FOCUS_ATTRIBUTE_DISTRACTORS {
        return Err(BenchmarkError::TemplateUnderflow(format!(
            "{} ({attribute}): {} positives, {} distractors",
            reference.id,
            positives.len(),
            distractors.len()
        )));
    }
    let positive = *positives.choose(&mut rng).expect("non-empty");
    let chosen: Vec<TargetSpec> = distractors
        .choose_multiple(&mut rng, FOCUS_ATTRIBUTE_DISTRACTORS)
        .map(|i| crop_target(store, i, config.dilation))
        .collect::<Result<_, _>>()?;
    Ok(assemble(
        Task::FocusAttribute,
        crop_target(store, reference, config.dilation)?,
        ty.to_string(),
        crop_target(store, positive, config.dilation)?,
        chosen,
        &mut rng,
    ))
}

/// Change an attribute: the condition is an attribute the positive has and
/// the reference lacks, within one attribute type. Nine distractors carry
/// the attribute on another category; five share the reference category but
/// are negatively labelled for it.
pub fn build_change_attribute(
    store: &AnnotationStore,
    seed: u64,
    config: &BenchmarkConfig,
) -> BuildOutput {
    let groups = candidates_by_type(
        store,
        seed,
        "change_attribute",
        |inst, ty| vec![(inst, ty)],
        |_| false,
    );
    let mut per_type = Vec::new();
    let mut skipped = 0;
    for list in groups.values() {
        let (templates, s) = take_successes(list, config.per_type_quota, |&(r, ty)| {
            change_attribute_template(store, r, ty, seed, config)
        });
        per_type.push(templates.into_iter());
        skipped += s;
    }
    // Interleave types round-robin.
    let mut templates = Vec::new();
    loop {
        let before = templates.len();
        for it in per_type.iter_mut() {
            templates.extend(it.next());
        }
        if templates.len() == before {
            break;
        }
    }
    BuildOutput { templates, skipped }
}

fn change_attribute_template(
    store: &AnnotationStore,
    reference: &ObjectInstance,
    ty: &str,
    seed: u64,
    config: &BenchmarkConfig,
) -> Result<RetrievalTemplate, BenchmarkError> {
    let mut rng = derive_rng(seed, &["change_attribute", &reference.id, ty]);
    let mut options: Vec<(&ObjectInstance, &str)> = store
        .instances_of_category(&reference.category)
        .filter(|p| p.id != reference.id)
        .flat_map(|p| {
            typed_attributes(store, p, ty)
                .filter(|c| !reference.positive_attributes.contains(*c))
                .map(move |c| (p, c.as_str()))
        })
        .collect();
    options.shuffle(&mut rng);

    for (positive, condition) in options {
        let condition_only: Vec<&ObjectInstance> = store
            .instances_with_attribute(condition)
            .filter(|i| i.category != reference.category)
            .collect();
        let reference_only: Vec<&ObjectInstance> = store
            .instances_of_category(&reference.category)
            .filter(|i| {
                i.id != reference.id
                    && i.id != positive.id
                    && i.negative_attributes.contains(condition)
            })
            .collect();
        if condition_only.len() < CONDITION_ONLY_DISTRACTORS
            || reference_only.len() < REFERENCE_ONLY_DISTRACTORS
        {
            continue;
        }
        let mut distractors = Vec::with_capacity(CONDITION_ONLY_DISTRACTORS + REFERENCE_ONLY_DISTRACTORS);
        for i in condition_only.choose_multiple(&mut rng, CONDITION_ONLY_DISTRACTORS) {
            distractors.push(crop_target(store, i, config.dilation)?);
        }
        for i in reference_only.choose_multiple(&mut rng, REFERENCE_ONLY_DISTRACTORS) {
            distractors.push(crop_target(store, i, config.dilation)?);
        }
        return Ok(assemble(
            Task::ChangeAttribute,
            crop_target(store, reference, config.dilation)?,
            condition.to_string(),
            crop_target(store, positive, config.dilation)?,
            distractors,
            &mut rng,
        ));
    }
    Err(BenchmarkError::TemplateUnderflow(format!(
        "{} ({ty}): no condition with enough distractors",
        reference.id
    )))
}
