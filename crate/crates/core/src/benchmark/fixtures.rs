//! Hand-built stores shared by the builder and validator tests.

use std::collections::{BTreeMap, BTreeSet};

use crate::annotation::{AnnotationStore, AttributeTaxonomy, BBox, ImageRecord, LoadOptions, ObjectInstance, PanopticRecord};

fn set(items: &[&str]) -> BTreeSet<String> {
    items.iter().map(|s| s.to_string()).collect()
}

pub(crate) struct StoreBuilder {
    images: Vec<ImageRecord>,
    instances: Vec<ObjectInstance>,
    panoptic: Vec<PanopticRecord>,
}

impl StoreBuilder {
    pub(crate) fn new() -> Self {
        Self { images: vec![], instances: vec![], panoptic: vec![] }
    }

    /// One 400x300 image per instance, named after it.
    pub(crate) fn instance(mut self, id: &str, category: &str, pos: &[&str], neg: &[&str]) -> Self {
        let image_id = format!("img_{id}");
        self.images.push(ImageRecord { id: image_id.clone(), width: 400, height: 300 });
        self.instances.push(ObjectInstance {
            id: id.to_string(),
            image_id,
            bbox: BBox::new(50.0, 40.0, 120.0, 90.0),
            category: category.to_string(),
            positive_attributes: set(pos),
            negative_attributes: set(neg),
        });
        self
    }

    /// An image whose panoptic record has every category at 5%.
    pub(crate) fn scene(mut self, id: &str, categories: &[&str]) -> Self {
        self.images.push(ImageRecord { id: id.to_string(), width: 640, height: 480 });
        self.panoptic.push(PanopticRecord {
            image_id: id.to_string(),
            fractions: categories.iter().map(|c| (c.to_string(), 0.05)).collect(),
        });
        self
    }

    pub(crate) fn build(self) -> AnnotationStore {
        let groups: BTreeMap<String, Vec<String>> = [
            ("color", vec!["white", "black", "red", "green", "olive green"]),
            ("material", vec!["metal", "wooden"]),
            ("opinion", vec!["pretty"]),
        ]
        .into_iter()
        .map(|(t, a)| (t.to_string(), a.into_iter().map(String::from).collect()))
        .collect();
        let taxonomy = AttributeTaxonomy::from_groups(groups).expect("disjoint types");
        AnnotationStore::new(self.images, self.instances, self.panoptic, taxonomy, &LoadOptions::default())
            .expect("consistent fixture")
    }
}

/// A white laptop, one other white laptop, nine laptops labelled not-white,
/// and two unlabelled laptops.
pub(crate) fn laptops() -> AnnotationStore {
    let mut b = StoreBuilder::new()
        .instance("laptop_ref", "laptop", &["white", "metal"], &[])
        .instance("laptop_white", "laptop", &["white"], &["black"]);
    for i in 0..9 {
        b = b.instance(&format!("laptop_black{i}"), "laptop", &["black"], &["white"]);
    }
    b.instance("laptop_plain0", "laptop", &[], &[])
        .instance("laptop_plain1", "laptop", &[], &[])
        .build()
}

/// A green train, one olive-green train, five red trains labelled
/// not-olive-green, nine olive-green buses and a lone bicycle.
pub(crate) fn trains() -> AnnotationStore {
    let mut b = StoreBuilder::new()
        .instance("train_ref", "train", &["green"], &[])
        .instance("train_olive", "train", &["olive green"], &[]);
    for i in 0..5 {
        b = b.instance(&format!("train_red{i}"), "train", &["red"], &["olive green"]);
    }
    for i in 0..9 {
        b = b.instance(&format!("bus{i}"), "bus", &["olive green"], &[]);
    }
    b.instance("bicycle", "bicycle", &["pretty", "red"], &[]).build()
}

pub(crate) const KITCHEN: [&str; 10] =
    ["refrigerator", "c1", "c2", "c3", "c4", "c5", "c6", "c7", "c8", "c9"];

/// One ten-category kitchen, two scenes that share its refrigerator
/// (overlaps 7 and 9), nine close scenes without it and five far scenes
/// with it. With `far = false` the far scenes are omitted.
pub(crate) fn kitchens(far: bool) -> AnnotationStore {
    let mut b = StoreBuilder::new()
        .scene("kitchen", &KITCHEN)
        .scene("pos_a", &["refrigerator", "c1", "c2", "c3", "c4", "c5", "c6", "x"])
        .scene("pos_b", &["refrigerator", "c1", "c2", "c3", "c4", "c5", "c6", "c7", "c8"]);
    for i in 0..9 {
        b = b.scene(&format!("close{i}"), &["c1", "c2", "c3", "c4", "c5", "c6", "c7"]);
    }
    if far {
        for i in 0..5 {
            b = b.scene(&format!("far{i}"), &["refrigerator", "y1", "y2"]);
        }
    }
    b.build()
}

/// A ten-category room; the best close scene adds a ceiling, a closer one
/// adds nothing, eight more close scenes lack a ceiling and five far scenes
/// have one.
pub(crate) fn rooms() -> AnnotationStore {
    let cats: Vec<String> = (1..=10).map(|i| format!("c{i}")).collect();
    let cats: Vec<&str> = cats.iter().map(String::as_str).collect();
    let mut b = StoreBuilder::new()
        .scene("room", &cats)
        .scene("subset", &cats[..9])
        .scene("with_ceiling", &[&cats[..8], &["ceiling"]].concat());
    for i in 0..8 {
        b = b.scene(&format!("close{i}"), &cats[..6]);
    }
    for i in 0..5 {
        b = b.scene(&format!("far{i}"), &["ceiling", "y1"]);
    }
    b.build()
}
