//! Annotation inputs for benchmark construction.
//!
//! Two kinds of source data feed the builders: per-object attribute
//! annotations (boxes, positive and negative attribute labels, an attribute
//! type taxonomy) and per-image panoptic category coverage. Both are read
//! from JSONL files, validated, normalized and indexed into an immutable
//! [`AnnotationStore`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{io_err, read_jsonl, write_jsonl, DataError};

/// Default presence threshold for panoptic categories (fraction of pixels).
pub const DEFAULT_PRESENCE_THRESHOLD: f64 = 0.01;
/// Default box dilation: width and height are multiplied by `1 + 0.7`.
pub const DEFAULT_DILATION: f64 = 0.7;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("degenerate box {w}x{h}")]
    Degenerate { w: f64, h: f64 },
    #[error("box ({x}, {y}, {w}, {h}) is outside a {width}x{height} image")]
    OutOfBounds {
        x: f64,
        y: f64,
        w: f64,
        h: f64,
        width: u32,
        height: u32,
    },
    #[error("invalid dilation {0}")]
    Dilation(f64),
}

/// Axis-aligned box in pixels, `(x, y)` being the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }
}

impl From<[f64; 4]> for BBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// A crop region plus the zero padding that turns it into a square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub pad_top: f64,
    pub pad_bottom: f64,
    pub pad_left: f64,
    pub pad_right: f64,
}

impl CropSpec {
    /// Side length of the padded output.
    pub fn padded_size(&self) -> (f64, f64) {
        (
            self.w + self.pad_left + self.pad_right,
            self.h + self.pad_top + self.pad_bottom,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectInstance {
    pub id: String,
    pub image_id: String,
    pub bbox: BBox,
    pub category: String,
    pub positive_attributes: BTreeSet<String>,
    pub negative_attributes: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttributeTaxonomy {
    type_of: BTreeMap<String, String>,
    types: BTreeMap<String, BTreeSet<String>>,
}

impl AttributeTaxonomy {
    /// Builds a taxonomy from `type -> attributes`; an attribute listed under
    /// two types is rejected.
    pub fn from_groups(
        groups: BTreeMap<String, Vec<String>>,
    ) -> Result<Self, DataError> {
        let mut tax = Self::default();
        for (ty, attrs) in groups {
            let members = tax.types.entry(ty.clone()).or_default();
            for attr in attrs {
                if let Some(prev) = tax.type_of.get(&attr) {
                    if *prev != ty {
                        return Err(DataError::Integrity(format!(
                            "attribute {attr:?} is listed under types {prev:?} and {ty:?}"
                        )));
                    }
                }
                tax.type_of.insert(attr.clone(), ty.clone());
                members.insert(attr);
            }
        }
        Ok(tax)
    }

    pub fn type_of(&self, attribute: &str) -> Option<&str> {
        self.type_of.get(attribute).map(String::as_str)
    }

    pub fn types(&self) -> impl Iterator<Item = &str> {
        self.types.keys().map(String::as_str)
    }

    pub fn attributes_of(&self, ty: &str) -> Option<&BTreeSet<String>> {
        self.types.get(ty)
    }

    pub fn attribute_count(&self) -> usize {
        self.type_of.len()
    }

    pub fn type_count(&self) -> usize {
        self.types.len()
    }

    fn groups(&self) -> BTreeMap<&str, Vec<&str>> {
        self.types
            .iter()
            .map(|(t, a)| (t.as_str(), a.iter().map(String::as_str).collect()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanopticRecord {
    pub image_id: String,
    pub fractions: BTreeMap<String, f64>,
}

/// Categories whose pixel fraction is strictly greater than `threshold`.
pub fn categories_present(rec: &PanopticRecord, threshold: f64) -> BTreeSet<String> {
    rec.fractions
        .iter()
        .filter(|(_, &f)| f > threshold)
        .map(|(c, _)| c.clone())
        .collect()
}

/// Dilates `bbox` about its center by `1 + dilation` in each dimension,
/// shifts it back inside the image (shrinking only if it exceeds the image),
/// and pads the shorter side symmetrically so the result is square.
pub fn dilate_and_pad_box(
    bbox: BBox,
    image_size: (u32, u32),
    dilation: f64,
) -> Result<CropSpec, GeometryError> {
    let BBox { x, y, w, h } = bbox;
    let (width, height) = image_size;
    if !(w > 0.0 && h > 0.0) || !w.is_finite() || !h.is_finite() {
        return Err(GeometryError::Degenerate { w, h });
    }
    if !(dilation >= 0.0) || !dilation.is_finite() {
        return Err(GeometryError::Dilation(dilation));
    }
    let (iw, ih) = (f64::from(width), f64::from(height));
    let eps = 1e-9;
    if !(x >= -eps && y >= -eps && x + w <= iw + eps && y + h <= ih + eps) {
        return Err(GeometryError::OutOfBounds {
            x,
            y,
            w,
            h,
            width,
            height,
        });
    }
    let scale = 1.0 + dilation;
    let cw = (w * scale).min(iw);
    let ch = (h * scale).min(ih);
    let cx = x + w / 2.0;
    let cy = y + h / 2.0;
    let x0 = (cx - cw / 2.0).clamp(0.0, iw - cw);
    let y0 = (cy - ch / 2.0).clamp(0.0, ih - ch);

    let side = cw.max(ch);
    let pad_v = side - ch;
    let pad_h = side - cw;
    Ok(CropSpec {
        x: x0,
        y: y0,
        w: cw,
        h: ch,
        pad_top: pad_v / 2.0,
        pad_bottom: pad_v / 2.0,
        pad_left: pad_h / 2.0,
        pad_right: pad_h / 2.0,
    })
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Suffixes removed (repeatedly) from every category name.
    pub strip_suffixes: Vec<String>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            strip_suffixes: vec!["-stuff".into(), "-other".into(), "-merged".into()],
        }
    }
}

impl LoadOptions {
    pub fn normalize_category(&self, name: &str) -> String {
        let mut s = name.trim();
        loop {
            let before = s.len();
            for suffix in &self.strip_suffixes {
                if !suffix.is_empty() && s.len() > suffix.len() {
                    if let Some(stripped) = s.strip_suffix(suffix.as_str()) {
                        s = stripped;
                    }
                }
            }
            if s.len() == before {
                break;
            }
        }
        s.to_string()
    }
}

#[derive(Debug, Clone)]
pub struct StorePaths {
    pub images: PathBuf,
    pub instances: PathBuf,
    pub panoptic: PathBuf,
    pub taxonomy: PathBuf,
}

impl StorePaths {
    /// The conventional file names inside one directory.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            images: dir.join("images.jsonl"),
            instances: dir.join("instances.jsonl"),
            panoptic: dir.join("panoptic.jsonl"),
            taxonomy: dir.join("taxonomy.json"),
        }
    }
}

#[derive(Deserialize, Serialize)]
struct InstanceRow {
    id: String,
    image_id: String,
    #[serde(rename = "box")]
    bbox: BBox,
    category: String,
    #[serde(default)]
    pos_attrs: Vec<String>,
    #[serde(default)]
    neg_attrs: Vec<String>,
}

/// Validated, indexed annotations. Immutable after construction.
#[derive(Debug, Clone)]
pub struct AnnotationStore {
    images: Vec<ImageRecord>,
    instances: Vec<ObjectInstance>,
    panoptic: Vec<PanopticRecord>,
    taxonomy: AttributeTaxonomy,
    image_index: HashMap<String, usize>,
    instance_index: HashMap<String, usize>,
    panoptic_index: HashMap<String, usize>,
    by_category: BTreeMap<String, Vec<usize>>,
    by_attribute: BTreeMap<String, Vec<usize>>,
    by_image: HashMap<String, Vec<usize>>,
}

impl PartialEq for AnnotationStore {
    fn eq(&self, other: &Self) -> bool {
        self.images == other.images
            && self.instances == other.instances
            && self.panoptic == other.panoptic
            && self.taxonomy == other.taxonomy
    }
}

impl AnnotationStore {
    /// Validates the collections and builds the indexes. Categories are
    /// normalized with `options`; panoptic fractions that collapse onto the
    /// same normalized name are summed.
    pub fn new(
        images: Vec<ImageRecord>,
        instances: Vec<ObjectInstance>,
        panoptic: Vec<PanopticRecord>,
        taxonomy: AttributeTaxonomy,
        options: &LoadOptions,
    ) -> Result<Self, DataError> {
        let mut image_index = HashMap::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            if img.width == 0 || img.height == 0 {
                return Err(DataError::Integrity(format!(
                    "image {:?} has zero size",
                    img.id
                )));
            }
            if image_index.insert(img.id.clone(), i).is_some() {
                return Err(DataError::Integrity(format!(
                    "duplicate image id {:?}",
                    img.id
                )));
            }
        }

        let mut instance_index = HashMap::with_capacity(instances.len());
        let mut normalized = Vec::with_capacity(instances.len());
        for (i, mut inst) in instances.into_iter().enumerate() {
            let Some(&img) = image_index.get(&inst.image_id) else {
                return Err(DataError::Integrity(format!(
                    "instance {:?} references unknown image {:?}",
                    inst.id, inst.image_id
                )));
            };
            if instance_index.insert(inst.id.clone(), i).is_some() {
                return Err(DataError::Integrity(format!(
                    "duplicate instance id {:?}",
                    inst.id
                )));
            }
            if let Some(a) = inst
                .positive_attributes
                .intersection(&inst.negative_attributes)
                .next()
            {
                return Err(DataError::Integrity(format!(
                    "instance {:?} labels {a:?} both positive and negative",
                    inst.id
                )));
            }
            inst.bbox = clamp_box(&inst.id, inst.bbox, &images[img])?;
            inst.category = options.normalize_category(&inst.category);
            normalized.push(inst);
        }
        let instances = normalized;

        let mut panoptic_index = HashMap::with_capacity(panoptic.len());
        let mut merged = Vec::with_capacity(panoptic.len());
        for (i, rec) in panoptic.into_iter().enumerate() {
            if !image_index.contains_key(&rec.image_id) {
                return Err(DataError::Integrity(format!(
                    "panoptic record references unknown image {:?}",
                    rec.image_id
                )));
            }
            if panoptic_index.insert(rec.image_id.clone(), i).is_some() {
                return Err(DataError::Integrity(format!(
                    "duplicate panoptic record for image {:?}",
                    rec.image_id
                )));
            }
            let mut fractions = BTreeMap::new();
            for (cat, f) in rec.fractions {
                if !(0.0..=1.0).contains(&f) {
                    return Err(DataError::Integrity(format!(
                        "fraction {f} for {cat:?} in image {:?} is outside [0, 1]",
                        rec.image_id
                    )));
                }
                *fractions.entry(options.normalize_category(&cat)).or_insert(0.0) += f;
            }
            let total: f64 = fractions.values().sum();
            if total > 1.0 + 1e-6 {
                return Err(DataError::Integrity(format!(
                    "fractions for image {:?} sum to {total}",
                    rec.image_id
                )));
            }
            merged.push(PanopticRecord {
                image_id: rec.image_id,
                fractions,
            });
        }

        let mut by_category: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut by_attribute: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut by_image: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, inst) in instances.iter().enumerate() {
            by_category.entry(inst.category.clone()).or_default().push(i);
            by_image.entry(inst.image_id.clone()).or_default().push(i);
            for a in &inst.positive_attributes {
                by_attribute.entry(a.clone()).or_default().push(i);
            }
        }

        Ok(Self {
            images,
            instances,
            panoptic: merged,
            taxonomy,
            image_index,
            instance_index,
            panoptic_index,
            by_category,
            by_attribute,
            by_image,
        })
    }

    pub fn load(paths: &StorePaths, options: &LoadOptions) -> Result<Self, DataError> {
        let images: Vec<ImageRecord> = read_jsonl(&paths.images)?;
        let rows: Vec<InstanceRow> = read_jsonl(&paths.instances)?;
        let panoptic: Vec<PanopticRecord> = read_jsonl(&paths.panoptic)?;
        let taxonomy = read_taxonomy(&paths.taxonomy)?;
        let instances = rows
            .into_iter()
            .map(|r| ObjectInstance {
                id: r.id,
                image_id: r.image_id,
                bbox: r.bbox,
                category: r.category,
                positive_attributes: r.pos_attrs.into_iter().collect(),
                negative_attributes: r.neg_attrs.into_iter().collect(),
            })
            .collect();
        Self::new(images, instances, panoptic, taxonomy, options)
    }

    /// Writes the store back out in the input schema.
    pub fn save(&self, paths: &StorePaths) -> Result<(), DataError> {
        write_jsonl(&paths.images, &self.images)?;
        let rows: Vec<InstanceRow> = self
            .instances
            .iter()
            .map(|i| InstanceRow {
                id: i.id.clone(),
                image_id: i.image_id.clone(),
                bbox: i.bbox,
                category: i.category.clone(),
                pos_attrs: i.positive_attributes.iter().cloned().collect(),
                neg_attrs: i.negative_attributes.iter().cloned().collect(),
            })
            .collect();
        write_jsonl(&paths.instances, &rows)?;
        write_jsonl(&paths.panoptic, &self.panoptic)?;
        let tax = serde_json::to_string_pretty(&self.taxonomy.groups())
            .expect("taxonomy serializes");
        fs::write(&paths.taxonomy, tax + "\n").map_err(io_err(&paths.taxonomy))
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn instances(&self) -> &[ObjectInstance] {
        &self.instances
    }

    pub fn panoptic(&self) -> &[PanopticRecord] {
        &self.panoptic
    }

    pub fn taxonomy(&self) -> &AttributeTaxonomy {
        &self.taxonomy
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.image_index.get(id).map(|&i| &self.images[i])
    }

    pub fn instance(&self, id: &str) -> Option<&ObjectInstance> {
        self.instance_index.get(id).map(|&i| &self.instances[i])
    }

    pub fn panoptic_for(&self, image_id: &str) -> Option<&PanopticRecord> {
        self.panoptic_index.get(image_id).map(|&i| &self.panoptic[i])
    }

    /// Instances of `category`, in load order.
    pub fn instances_of_category<'a>(
        &'a self,
        category: &str,
    ) -> impl Iterator<Item = &'a ObjectInstance> + 'a {
        self.by_category
            .get(category)
            .into_iter()
            .flatten()
            .map(|&i| &self.instances[i])
    }

    /// Instances positively labelled with `attribute`, in load order.
    pub fn instances_with_attribute<'a>(
        &'a self,
        attribute: &str,
    ) -> impl Iterator<Item = &'a ObjectInstance> + 'a {
        self.by_attribute
            .get(attribute)
            .into_iter()
            .flatten()
            .map(|&i| &self.instances[i])
    }

    pub fn instances_in_image<'a>(
        &'a self,
        image_id: &str,
    ) -> impl Iterator<Item = &'a ObjectInstance> + 'a {
        self.by_image
            .get(image_id)
            .into_iter()
            .flatten()
            .map(|&i| &self.instances[i])
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.by_category.keys().map(String::as_str)
    }
}

fn clamp_box(id: &str, b: BBox, img: &ImageRecord) -> Result<BBox, DataError> {
    let (iw, ih) = (f64::from(img.width), f64::from(img.height));
    if ![b.x, b.y, b.w, b.h].iter().all(|v| v.is_finite()) || b.w <= 0.0 || b.h <= 0.0 {
        return Err(DataError::Integrity(format!(
            "instance {id:?} has a degenerate box"
        )));
    }
    let x0 = b.x.clamp(0.0, iw);
    let y0 = b.y.clamp(0.0, ih);
    let x1 = (b.x + b.w).clamp(0.0, iw);
    let y1 = (b.y + b.h).clamp(0.0, ih);
    if x1 <= x0 || y1 <= y0 {
        return Err(DataError::Integrity(format!(
            "instance {id:?} box lies outside image {:?}",
            img.id
        )));
    }
    Ok(BBox::new(x0, y0, x1 - x0, y1 - y0))
}

fn read_taxonomy(path: &Path) -> Result<AttributeTaxonomy, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    if text.trim().is_empty() {
        return Ok(AttributeTaxonomy::default());
    }
    let groups: BTreeMap<String, Vec<String>> =
        serde_json::from_str(&text).map_err(|e| DataError::Schema {
            file: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
    AttributeTaxonomy::from_groups(groups)
}
