//! A small annotated image corpus: four scene types with mostly disjoint
//! category pools, attribute-labelled object instances, captions, a
//! concreteness table and encoder outputs for every image, crop and
//! condition text.
//!
//! The encoder stands in for a pretrained vision-language model. Images
//! embed as the sum of concept codes for what they contain; texts embed in a
//! rotated copy of that space, so text and image vectors are not directly
//! comparable and a learned combiner has something to learn.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::annotation::{
    AnnotationStore, AttributeTaxonomy, BBox, ImageRecord, LoadOptions, ObjectInstance, PanopticRecord,
    StorePaths,
};
use crate::caption::{tokenize, CaptionRecord, ConcretenessTable, Lexicon};
use crate::io::{io_err, write_jsonl, DataError};
use crate::retrieval::{stub_embed, EmbeddingKind, EmbeddingTable};
use crate::rng::derive_rng;

struct Scene {
    name: &'static str,
    /// Countable objects that get instances and act as caption subjects.
    things: [&'static str; 5],
    stuff: [&'static str; 9],
}

const SCENES: [Scene; 4] = [
    Scene {
        name: "street",
        things: ["car", "bus", "person", "bicycle", "truck"],
        stuff: ["road", "pavement", "building", "signal", "tree", "sky", "pole", "fence", "motorcycle"],
    },
    Scene {
        name: "kitchen",
        things: ["cup", "bowl", "bottle", "chair", "knife"],
        stuff: ["oven", "sink", "refrigerator", "table", "cabinet", "counter", "window", "wall", "floor"],
    },
    Scene {
        name: "park",
        things: ["dog", "bench", "kite", "horse", "umbrella"],
        stuff: ["grass", "bush", "frisbee", "flower", "river", "bird", "dirt", "fountain", "hill"],
    },
    Scene {
        name: "bedroom",
        things: ["bed", "pillow", "lamp", "book", "laptop"],
        stuff: ["blanket", "clock", "curtain", "rug", "desk", "mirror", "vase", "ceiling", "shelf"],
    },
];

/// Raw panoptic names for categories that carry a dataset suffix.
const RAW_NAMES: [(&str, &str); 10] = [
    ("wall", "wall-other-merged"),
    ("floor", "floor-other-merged"),
    ("sky", "sky-other-merged"),
    ("grass", "grass-merged"),
    ("road", "road-stuff"),
    ("pavement", "pavement-merged"),
    ("dirt", "dirt-merged"),
    ("ceiling", "ceiling-merged"),
    ("rug", "rug-merged"),
    ("river", "river-stuff"),
];

/// Present on some images but always below the presence threshold.
const NOISE_CATEGORY: &str = "litter";

const ATTRIBUTE_TYPES: [(&str, &[&str]); 5] = [
    ("color", &["black", "blue", "green", "red", "white"]),
    ("material", &["fabric", "metal", "plastic", "wooden"]),
    ("pattern", &["dotted", "plain", "striped"]),
    ("state", &["closed", "dry", "open", "wet"]),
    ("opinion", &["pretty", "ugly"]),
];

const COLORS: [&str; 5] = ["black", "blue", "green", "red", "white"];

/// Attribute types that show up in whole-image embeddings and captions.
const VISIBLE_TYPES: [&str; 3] = ["color", "material", "pattern"];

fn attribute_type(attr: &str) -> Option<&'static str> {
    ATTRIBUTE_TYPES.iter().find(|(_, a)| a.contains(&attr)).map(|(t, _)| *t)
}

/// Caption templates: subject, object.
const TEMPLATES: [&str; 6] = [
    "a {s} on the {o}",
    "a {s} near a {o}",
    "the {s} beside the {o}",
    "a {s} sitting on the {o}",
    "a {s} standing near the {o}",
    "a {c} {s} with a {o}",
];

const ABSTRACT: [(&str, f64); 5] = [("morning", 2.3), ("night", 3.1), ("moment", 1.6), ("weekend", 1.9), ("idea", 1.4)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub images_per_scene: usize,
    pub keep_probability: f64,
    pub intruders: usize,
    pub instances_per_image: usize,
    pub captions_per_image: usize,
    pub dim: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            images_per_scene: 150,
            keep_probability: 0.75,
            intruders: 3,
            instances_per_image: 3,
            captions_per_image: 2,
            dim: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub store: AnnotationStore,
    /// Panoptic records as written to disk, before suffix normalization.
    pub raw_panoptic: Vec<PanopticRecord>,
    pub captions: Vec<CaptionRecord>,
    pub concreteness: ConcretenessTable,
    pub embeddings: EmbeddingTable,
}

/// Concept codes in image space, with a fixed rotation for text.
#[derive(Debug, Clone)]
pub struct SyntheticEncoder {
    dim: usize,
    salt: u64,
    rotation: Vec<Vec<f64>>,
    vocabulary: BTreeSet<String>,
    lexicon: Lexicon,
}

fn random_rotation(dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    // Gram-Schmidt on Gaussian rows.
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    rows
}

fn unit_f32(v: &[f64]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

impl SyntheticEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let vocabulary = SCENES
            .iter()
            .flat_map(|s| s.things.iter().chain(&s.stuff))
            .copied()
            .chain(ATTRIBUTE_TYPES.iter().flat_map(|(t, a)| std::iter::once(*t).chain(a.iter().copied())))
            .map(String::from)
            .collect();
        Self {
            dim,
            salt: seed,
            rotation: random_rotation(dim, &mut derive_rng(seed, &["encoder", "rotation"])),
            vocabulary,
            lexicon: Lexicon::default(),
        }
    }

    /// Attribute type words sit near the attributes they name.
    fn code(&self, concept: &str) -> Vec<f64> {
        let mut v: Vec<f64> = stub_embed(&format!("concept/{concept}"), self.dim, self.salt)
            .into_iter()
            .map(f64::from)
            .collect();
        if let Some((_, attrs)) = ATTRIBUTE_TYPES.iter().find(|(t, _)| *t == concept) {
            for a in *attrs {
                v.iter_mut().zip(self.code(a)).for_each(|(x, c)| *x += c);
            }
        }
        v
    }

    fn add(&self, acc: &mut [f64], concept: &str, weight: f64) {
        acc.iter_mut().zip(self.code(concept)).for_each(|(a, c)| *a += weight * c);
    }

    /// Whole image: every present category, the visible attributes of its
    /// instances at reduced weight, and an image-specific offset.
    pub fn image(&self, id: &str, categories: &BTreeSet<String>, instances: &[&ObjectInstance]) -> Vec<f32> {
        let mut v = vec![0.0; self.dim];
        for c in categories {
            self.add(&mut v, c, 1.0);
        }
        for a in instances.iter().flat_map(|i| &i.positive_attributes) {
            if VISIBLE_TYPES.iter().any(|t| attribute_type(a) == Some(t)) {
                self.add(&mut v, a, 0.5);
            }
        }
        self.add(&mut v, &format!("image/{id}"), 1.0);
        unit_f32(&v)
    }

    /// Object crop: the category, its positive attributes and an offset.
    pub fn crop(&self, inst: &ObjectInstance) -> Vec<f32> {
        let mut v = vec![0.0; self.dim];
        self.add(&mut v, &inst.category, 1.5);
        for a in &inst.positive_attributes {
            self.add(&mut v, a, 0.8);
        }
        self.add(&mut v, &format!("crop/{}", inst.id), 0.5);
        unit_f32(&v)
    }

    /// Text: known concepts at full weight, other content words lighter,
    /// then rotated out of the image space.
    pub fn text(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0.0; self.dim];
        let mut any = false;
        for tok in tokenize(text) {
            if self.lexicon.is_stopword(&tok) {
                continue;
            }
            let w = if self.vocabulary.contains(&tok) { 1.0 } else { 0.4 };
            self.add(&mut v, &tok, w);
            any = true;
        }
        if !any {
            self.add(&mut v, &format!("text/{text}"), 1.0);
        }
        let rotated: Vec<f64> = self
            .rotation
            .iter()
            .map(|row| row.iter().zip(&v).map(|(r, x)| r * x).sum())
            .collect();
        unit_f32(&rotated)
    }
}

fn raw_name(category: &str) -> &str {
    RAW_NAMES.iter().find(|(c, _)| *c == category).map_or(category, |(_, r)| r)
}

pub fn taxonomy() -> AttributeTaxonomy {
    let groups: BTreeMap<String, Vec<String>> = ATTRIBUTE_TYPES
        .iter()
        .map(|(t, a)| (t.to_string(), a.iter().map(|s| s.to_string()).collect()))
        .collect();
    AttributeTaxonomy::from_groups(groups).expect("attribute types are disjoint")
}

fn concreteness_table(rng: &mut ChaCha8Rng) -> ConcretenessTable {
    let mut pairs: Vec<(String, f64)> = Vec::new();
    for s in &SCENES {
        for c in s.things.iter().chain(&s.stuff) {
            // Ratings on the usual 0.01 grid.
            pairs.push((c.to_string(), f64::from(rng.random_range(485u32..=500)) / 100.0));
        }
    }
    for (t, attrs) in ATTRIBUTE_TYPES {
        if VISIBLE_TYPES.contains(&t) {
            for a in attrs {
                pairs.push((a.to_string(), f64::from(rng.random_range(480u32..=495)) / 100.0));
            }
        }
    }
    for (w, r) in ABSTRACT {
        pairs.push((w.to_string(), r));
    }
    ConcretenessTable::from_pairs(pairs).expect("ratings within range")
}

struct ImageDraft {
    id: String,
    scene: usize,
    categories: BTreeSet<String>,
}

fn draft_images(c: &CorpusConfig, rng: &mut ChaCha8Rng) -> Vec<ImageDraft> {
    let mut out = Vec::new();
    for (si, scene) in SCENES.iter().enumerate() {
        let others: Vec<&str> = SCENES
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != si)
            .flat_map(|(_, s)| s.things.iter().chain(&s.stuff).copied())
            .collect();
        for k in 0..c.images_per_scene {
            let mut categories: BTreeSet<String> = scene
                .things
                .iter()
                .chain(&scene.stuff)
                .filter(|_| rng.random_bool(c.keep_probability))
                .map(|s| s.to_string())
                .collect();
            for cat in others.choose_multiple(rng, c.intruders) {
                categories.insert(cat.to_string());
            }
            out.push(ImageDraft { id: format!("{}_{k:03}", scene.name), scene: si, categories });
        }
    }
    out
}

fn panoptic_for(d: &ImageDraft, rng: &mut ChaCha8Rng) -> PanopticRecord {
    let weights: Vec<(String, f64)> = d
        .categories
        .iter()
        .map(|c| (c.clone(), rng.random_range(1.0..3.0)))
        .collect();
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    let mut fractions = BTreeMap::new();
    for (cat, w) in weights {
        let f = (0.9 * w / total * 1e4).round() / 1e4;
        if cat == "wall" {
            // Two raw segments that normalize onto one category.
            let part = (f * 0.6 * 1e4).round() / 1e4;
            fractions.insert("wall-other-merged".to_string(), part);
            fractions.insert("wall-stuff".to_string(), ((f - part) * 1e4).round() / 1e4);
        } else {
            fractions.insert(raw_name(&cat).to_string(), f);
        }
    }
    if rng.random_bool(0.3) {
        fractions.insert(NOISE_CATEGORY.to_string(), 0.004);
    }
    PanopticRecord { image_id: d.id.clone(), fractions }
}

fn instances_for(c: &CorpusConfig, d: &ImageDraft, img: &ImageRecord, rng: &mut ChaCha8Rng) -> Vec<ObjectInstance> {
    let things: Vec<&str> = SCENES[d.scene]
        .things
        .iter()
        .copied()
        .filter(|t| d.categories.contains(*t))
        .collect();
    let mut out = Vec::new();
    for (k, cat) in things.choose_multiple(rng, c.instances_per_image).enumerate() {
        let w = rng.random_range(40..=200u32);
        let h = rng.random_range(40..=200u32);
        let x = rng.random_range(0..=img.width - w);
        let y = rng.random_range(0..=img.height - h);
        let mut pos = BTreeSet::new();
        let mut neg = BTreeSet::new();
        for (ty, attrs) in ATTRIBUTE_TYPES {
            if ty == "opinion" && rng.random_bool(0.5) {
                continue;
            }
            let chosen = *attrs.choose(rng).expect("non-empty type");
            pos.insert(chosen.to_string());
            for a in attrs.iter().filter(|a| **a != chosen) {
                if rng.random_bool(0.75) {
                    neg.insert(a.to_string());
                }
            }
        }
        out.push(ObjectInstance {
            id: format!("{}_obj{k}", d.id),
            image_id: d.id.clone(),
            bbox: BBox::new(f64::from(x), f64::from(y), f64::from(w), f64::from(h)),
            category: cat.to_string(),
            positive_attributes: pos,
            negative_attributes: neg,
        });
    }
    out
}

fn captions_for(c: &CorpusConfig, d: &ImageDraft, insts: &[ObjectInstance], rng: &mut ChaCha8Rng) -> Vec<CaptionRecord> {
    let subjects: Vec<&ObjectInstance> = insts.iter().collect();
    let mut out = Vec::new();
    for _ in 0..c.captions_per_image {
        let Some(subject) = subjects.choose(rng) else { break };
        let objects: Vec<&String> = d.categories.iter().filter(|o| **o != subject.category).collect();
        let Some(object) = objects.choose(rng) else { break };
        let color = subject
            .positive_attributes
            .iter()
            .find(|a| COLORS.contains(&a.as_str()))
            .map_or("", String::as_str);
        let template = TEMPLATES.choose(rng).expect("templates");
        let text = template
            .replace("{s}", &subject.category)
            .replace("{o}", object)
            .replace("{c}", color);
        out.push(CaptionRecord { image_id: d.id.clone(), text });
    }
    if let Some(subject) = subjects.choose(rng) {
        let visible: Vec<&String> = subject
            .positive_attributes
            .iter()
            .filter(|a| VISIBLE_TYPES.iter().any(|t| attribute_type(a) == Some(t)))
            .collect();
        if let Some(a) = visible.choose(rng) {
            out.push(CaptionRecord { image_id: d.id.clone(), text: format!("a {} in {a}", subject.category) });
        }
    }
    if rng.random_bool(0.25) {
        if let Some(subject) = subjects.choose(rng) {
            let (word, _) = ABSTRACT.choose(rng).expect("abstract nouns");
            out.push(CaptionRecord { image_id: d.id.clone(), text: format!("a {} at {word}", subject.category) });
        }
    }
    out
}

/// Deterministic in `config`.
pub fn generate_corpus(config: &CorpusConfig) -> Corpus {
    let c = config;
    let seed = c.seed;
    let mut rng = derive_rng(seed, &["corpus", "scenes"]);
    let drafts = draft_images(c, &mut rng);
    let mut images = Vec::new();
    let mut instances = Vec::new();
    let mut raw_panoptic = Vec::new();
    let mut captions = Vec::new();
    for (i, d) in drafts.iter().enumerate() {
        let mut rng = derive_rng(seed, &["corpus", "image", &d.id]);
        let (width, height) = if i % 2 == 0 { (640, 480) } else { (480, 640) };
        let img = ImageRecord { id: d.id.clone(), width, height };
        raw_panoptic.push(panoptic_for(d, &mut rng));
        let insts = instances_for(c, d, &img, &mut rng);
        captions.extend(captions_for(c, d, &insts, &mut rng));
        instances.extend(insts);
        images.push(img);
    }
    let store = AnnotationStore::new(images, instances, raw_panoptic.clone(), taxonomy(), &LoadOptions::default())
        .expect("generated annotations are consistent");
    let concreteness = concreteness_table(&mut derive_rng(seed, &["corpus", "concreteness"]));

    let enc = SyntheticEncoder::new(c.dim, seed);
    let mut embeddings = EmbeddingTable::new(c.dim);
    for d in &drafts {
        let insts: Vec<&ObjectInstance> = store.instances_in_image(&d.id).collect();
        embeddings
            .insert(EmbeddingKind::Image, d.id.clone(), &enc.image(&d.id, &d.categories, &insts))
            .expect("unique");
    }
    for inst in store.instances() {
        embeddings.insert(EmbeddingKind::Image, inst.id.clone(), &enc.crop(inst)).expect("unique");
    }
    for text in condition_texts(&store) {
        embeddings.insert(EmbeddingKind::Text, text.clone(), &enc.text(&text)).expect("unique");
    }
    Corpus { store, raw_panoptic, captions, concreteness, embeddings }
}

/// Every condition string a pipeline over this corpus can produce:
/// categories, attribute types, attributes, and predicate-object phrases.
fn condition_texts(store: &AnnotationStore) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let categories: Vec<&str> = SCENES.iter().flat_map(|s| s.things.iter().chain(&s.stuff)).copied().collect();
    for (t, attrs) in ATTRIBUTE_TYPES {
        out.insert(t.to_string());
        out.extend(attrs.iter().map(|a| a.to_string()));
    }
    let attributes = ATTRIBUTE_TYPES.iter().flat_map(|(_, a)| a.iter());
    for p in ["on", "near", "beside", "sitting on", "standing near", "with", "at", "in"] {
        for o in categories.iter().chain(ABSTRACT.iter().map(|(w, _)| w)).chain(attributes.clone()) {
            out.insert(format!("{p} {o}"));
        }
    }
    out.extend(categories.iter().map(|s| s.to_string()));
    debug_assert!(store.categories().all(|c| out.contains(c)));
    out
}

/// File names written by [`write_corpus`].
pub const CORPUS_FILES: [&str; 8] = [
    "images.jsonl",
    "instances.jsonl",
    "panoptic.jsonl",
    "taxonomy.json",
    "captions.jsonl",
    "concreteness.tsv",
    "embeddings.gceb",
    "embeddings.ids.jsonl",
];

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let paths = StorePaths::in_dir(dir);
    corpus.store.save(&paths)?;
    write_jsonl(&paths.panoptic, &corpus.raw_panoptic)?;
    write_jsonl(&dir.join("captions.jsonl"), &corpus.captions)?;
    let tsv = dir.join("concreteness.tsv");
    std::fs::write(&tsv, corpus.concreteness.to_tsv()).map_err(io_err(&tsv))?;
    corpus
        .embeddings
        .write(&dir.join("embeddings.gceb"))
        .map_err(|e| DataError::Integrity(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption::CaptionParser;

    #[test]
    fn every_template_parses_to_its_relationship() {
        let parser = CaptionParser::default();
        let cats: Vec<&str> = SCENES.iter().flat_map(|s| s.things.iter().chain(&s.stuff)).copied().collect();
        for t in TEMPLATES {
            for s in SCENES.iter().flat_map(|s| s.things) {
                for o in &cats {
                    for c in ["", "red"] {
                        let text = t.replace("{s}", s).replace("{o}", o).replace("{c}", c);
                        let rels = parser.parse(&CaptionRecord { image_id: "i".into(), text: text.clone() });
                        assert_eq!(rels.len(), 1, "{text}: {rels:?}");
                        assert_eq!((rels[0].subject.as_str(), rels[0].object.as_str()), (s, *o), "{text}");
                    }
                }
            }
        }
    }

    #[test]
    fn text_space_is_rotated_away_from_image_space() {
        let enc = SyntheticEncoder::new(64, 0);
        let cats: BTreeSet<String> = ["dog".to_string()].into();
        let img = enc.image("x", &cats, &[]);
        let txt = enc.text("dog");
        let cos: f32 = img.iter().zip(&txt).map(|(a, b)| a * b).sum();
        assert!(cos.abs() < 0.5, "{cos}");
        assert_eq!(enc.text("on the grass"), enc.text("on grass"));
    }

    #[test]
    fn small_corpus_is_consistent_and_deterministic() {
        let c = CorpusConfig { images_per_scene: 6, ..Default::default() };
        let a = generate_corpus(&c);
        let b = generate_corpus(&c);
        assert_eq!(a.store, b.store);
        assert_eq!(a.captions, b.captions);
        assert_eq!(a.embeddings, b.embeddings);
        assert_eq!(a.store.images().len(), 24);
        assert!(a.store.panoptic().iter().any(|p| p.fractions.contains_key("wall")));
        assert!(a.store.panoptic().iter().flat_map(|p| p.fractions.keys()).all(|k| !k.contains('-')));
        assert!(a.raw_panoptic.iter().any(|p| p.fractions.contains_key("wall-stuff")));
    }
}
