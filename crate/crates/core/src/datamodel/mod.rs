//! Annotation and detection types plus domain-tagged datasets.

mod io;

pub use io::{load_dataset, save_dataset, ANNOTATIONS_FILE, IMAGES_DIR, METADATA_FILE, SCHEMA_VERSION};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::BoundingBox;
use crate::image::RgbImage;
use crate::toyworld::{SceneSpec, StyleParams};

/// 1-based object class id. The background class used by refinement heads
/// is `C + 1` and never appears in serialized data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(u32);

impl ClassId {
    /// # Panics
    /// If `id == 0`.
    pub fn new(id: u32) -> Self {
        assert!(id >= 1, "class ids are 1-based");
        ClassId(id)
    }

    pub fn checked(id: u32, num_classes: usize) -> Result<Self> {
        if id == 0 || id as usize > num_classes {
            return Err(Error::validation(format!("class id {id} outside 1..={num_classes}")));
        }
        Ok(ClassId(id))
    }

    /// From a 0-based row index.
    pub fn from_index(index: usize) -> Self {
        ClassId(index as u32 + 1)
    }

    pub fn get(self) -> u32 {
        self.0
    }

    /// 0-based row index.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A scored, classified box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class: ClassId,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, class: ClassId, score: f64) -> Result<Self> {
        if !score.is_finite() || !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid(format!("detection score {score} outside [0, 1]")));
        }
        Ok(Self { bbox, class, score })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub bbox: BoundingBox,
    pub class: ClassId,
}

impl Instance {
    pub fn new(bbox: BoundingBox, class: ClassId) -> Self {
        Self { bbox, class }
    }
}

/// Instance-level annotation: boxes with classes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FullAnnotation {
    pub instances: Vec<Instance>,
}

impl FullAnnotation {
    pub fn new(instances: Vec<Instance>) -> Self {
        Self { instances }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn validate(&self, num_classes: usize, width: f64, height: f64) -> Result<()> {
        for inst in &self.instances {
            ClassId::checked(inst.class.get(), num_classes)?;
            if !inst.bbox.is_inside(width, height) {
                return Err(Error::validation(format!(
                    "box {:?} outside {width}x{height} image",
                    inst.bbox.to_array()
                )));
            }
        }
        Ok(())
    }
}

/// Image-level class presence vector of length `C`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WeakAnnotation {
    present: Vec<bool>,
}

impl WeakAnnotation {
    pub fn new(present: Vec<bool>) -> Self {
        Self { present }
    }

    pub fn zeros(num_classes: usize) -> Self {
        Self {
            present: vec![false; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.present.len()
    }

    pub fn is_present(&self, class: ClassId) -> bool {
        self.present.get(class.index()).copied().unwrap_or(false)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.present
    }

    /// Number of present classes.
    pub fn count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    pub fn present_classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.present
            .iter()
            .enumerate()
            .filter(|(_, &p)| p)
            .map(|(i, _)| ClassId::from_index(i))
    }

    /// Labels as 0.0 / 1.0.
    pub fn to_f64(&self) -> Vec<f64> {
        self.present.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect()
    }
}

impl Serialize for WeakAnnotation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let bits: Vec<u8> = self.present.iter().map(|&p| p as u8).collect();
        bits.serialize(s)
    }
}

impl<'de> Deserialize<'de> for WeakAnnotation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let bits = Vec::<u8>::deserialize(d)?;
        let present = bits
            .into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(serde::de::Error::custom(format!("weak label bit {other} is not 0/1"))),
            })
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { present })
    }
}

/// `y_c = 1` iff some instance has class `c`.
pub fn weak_from_full(ann: &FullAnnotation, num_classes: usize) -> Result<WeakAnnotation> {
    let mut present = vec![false; num_classes];
    for inst in &ann.instances {
        let c = ClassId::checked(inst.class.get(), num_classes)?;
        present[c.index()] = true;
    }
    Ok(WeakAnnotation::new(present))
}

/// Config hash and seed an artifact was produced under.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

/// Which stage of the dual-domain pipeline a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DomainTag {
    #[serde(rename = "S")]
    Source,
    #[serde(rename = "G1")]
    G1,
    #[serde(rename = "G2")]
    G2,
    #[serde(rename = "PLT1")]
    Plt1,
    #[serde(rename = "PLT2-AUG")]
    Plt2Aug,
    /// Weakly labeled target training split.
    #[serde(rename = "T")]
    TargetTrain,
    #[serde(rename = "T-EVAL")]
    TargetEval,
    /// Object-free target images used as copy-paste canvases.
    #[serde(rename = "T-BG")]
    TargetBackground,
}

impl DomainTag {
    pub fn requires_full(self) -> bool {
        matches!(self, DomainTag::Source | DomainTag::G1 | DomainTag::G2 | DomainTag::Plt1 | DomainTag::Plt2Aug)
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        write!(f, "{}", s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub name: String,
    pub image: RgbImage,
    pub full: Option<FullAnnotation>,
    pub weak: Option<WeakAnnotation>,
    /// Ground truth visible only to the evaluator.
    pub hidden: Option<FullAnnotation>,
    /// Placement spec the image was rendered from, when procedurally generated.
    pub scene: Option<SceneSpec>,
    pub render_seed: Option<u64>,
}

impl DatasetItem {
    pub fn new(name: impl Into<String>, image: RgbImage) -> Self {
        Self {
            name: name.into(),
            image,
            full: None,
            weak: None,
            hidden: None,
            scene: None,
            render_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub tag: DomainTag,
    pub class_names: Vec<String>,
    pub width: usize,
    pub height: usize,
    /// Rendering style of procedurally generated datasets.
    pub style: Option<StyleParams>,
    pub provenance: Option<Provenance>,
    pub items: Vec<DatasetItem>,
}

impl Dataset {
    pub fn new(tag: DomainTag, class_names: Vec<String>, width: usize, height: usize) -> Self {
        Self {
            tag,
            class_names,
            width,
            height,
            style: None,
            provenance: None,
            items: Vec::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Check every item against the contract of the dataset's domain tag.
    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        let (w, h) = (self.width as f64, self.height as f64);
        for item in &self.items {
            let ctx = |e: Error| Error::validation(format!("item {}: {e}", item.name));
            if item.image.width() != self.width || item.image.height() != self.height {
                return Err(ctx(Error::validation(format!(
                    "image is {}x{}, dataset declares {}x{}",
                    item.image.width(),
                    item.image.height(),
                    self.width,
                    self.height
                ))));
            }
            for ann in [&item.full, &item.hidden].into_iter().flatten() {
                ann.validate(c, w, h).map_err(ctx)?;
            }
            if let Some(weak) = &item.weak {
                if weak.num_classes() != c {
                    return Err(ctx(Error::validation(format!(
                        "weak label has length {}, expected {c}",
                        weak.num_classes()
                    ))));
                }
            }
            let ok = match self.tag {
                t if t.requires_full() => item.full.is_some(),
                DomainTag::TargetTrain => item.weak.is_some() && item.full.is_none(),
                DomainTag::TargetEval => item.hidden.is_some() && item.full.is_none(),
                _ => item.full.is_none(),
            };
            if !ok {
                return Err(ctx(Error::validation(format!(
                    "annotations violate the {} contract",
                    self.tag
                ))));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn inst(c: u32) -> Instance {
        Instance::new(BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), ClassId::new(c))
    }

    #[test]
    fn weak_from_full_examples() {
        let ann = FullAnnotation::new(vec![inst(2), inst(2), inst(5)]);
        let w = weak_from_full(&ann, 6).unwrap();
        assert_eq!(w.as_slice(), &[false, true, false, false, true, false]);

        assert_eq!(weak_from_full(&FullAnnotation::default(), 4).unwrap(), WeakAnnotation::zeros(4));

        let all = FullAnnotation::new((1..=6).map(inst).collect());
        assert!(weak_from_full(&all, 6).unwrap().as_slice().iter().all(|&p| p));

        assert!(weak_from_full(&FullAnnotation::new(vec![inst(7)]), 6).is_err());
    }

    #[test]
    fn weak_label_serializes_as_bits() {
        let w = WeakAnnotation::new(vec![true, false, true]);
        assert_eq!(serde_json::to_string(&w).unwrap(), "[1,0,1]");
        assert_eq!(serde_json::from_str::<WeakAnnotation>("[1,0,1]").unwrap(), w);
        assert!(serde_json::from_str::<WeakAnnotation>("[2]").is_err());
    }

    #[test]
    fn tag_contract_enforced() {
        let mut ds = Dataset::new(DomainTag::Source, vec!["a".into()], 4, 4);
        ds.items.push(DatasetItem::new("x", RgbImage::new(4, 4)));
        assert!(ds.validate().is_err());
        ds.items[0].full = Some(FullAnnotation::default());
        ds.validate().unwrap();
        ds.tag = DomainTag::TargetTrain;
        assert!(ds.validate().is_err());
    }

    proptest! {
        #[test]
        fn duplicating_an_instance_never_changes_weak_label(
            classes in proptest::collection::vec(1u32..=6, 1..10),
            pick in 0usize..10,
        ) {
            let ann = FullAnnotation::new(classes.iter().map(|&c| inst(c)).collect());
            let mut dup = ann.clone();
            dup.instances.push(ann.instances[pick % ann.len()]);
            prop_assert_eq!(weak_from_full(&ann, 6).unwrap(), weak_from_full(&dup, 6).unwrap());
        }
    }
}
