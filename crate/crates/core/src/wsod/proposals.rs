use serde::{Deserialize, Serialize};

use crate::datamodel::WeakAnnotation;
use crate::detector::{anchor_grid, AnchorSpec, DetectorModel};
use crate::error::{Error, Result};
use crate::geom::{score_order, BoundingBox};
use crate::image::RgbImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalMode {
    /// Keep boxes predicted for classes present in the weak label.
    ClassFiltered,
    /// Keep every predicted box.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalParams {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub min_proposals: usize,
    pub max_proposals: usize,
}

impl Default for ProposalParams {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_threshold: 0.5,
            min_proposals: 10,
            max_proposals: 100,
        }
    }
}

impl ProposalParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_proposals == 0 || self.min_proposals > self.max_proposals {
            return Err(Error::Config("need 0 <= min_proposals <= max_proposals and max_proposals >= 1".into()));
        }
        Ok(())
    }
}

/// Candidate boxes `R` of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub boxes: Vec<BoundingBox>,
    /// How many boxes came from padding.
    pub padded: usize,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

fn push_unique(out: &mut Vec<BoundingBox>, b: BoundingBox) -> bool {
    if out.contains(&b) {
        return false;
    }
    out.push(b);
    true
}

/// Boxes predicted by `fsod`, filtered by mode, padded up to
/// `min_proposals` from the unthresholded anchor predictions.
pub fn generate_proposals(
    fsod: &DetectorModel,
    image: &RgbImage,
    weak: Option<&WeakAnnotation>,
    mode: ProposalMode,
    params: &ProposalParams,
) -> Result<ProposalSet> {
    params.validate()?;
    let scores = fsod.score_anchors(image)?;
    let dets = fsod.detections_from_scores(&scores, params.score_threshold, params.nms_threshold)?;
    let keep_class: Vec<bool> = match mode {
        ProposalMode::All => vec![true; fsod.num_classes()],
        ProposalMode::ClassFiltered => weak
            .ok_or_else(|| Error::invalid("class-filtered proposals need a weak label"))?
            .as_slice()
            .to_vec(),
    };
    let mut boxes = Vec::new();
    for d in dets.flatten() {
        if keep_class.get(d.class.index()).copied().unwrap_or(false) && boxes.len() < params.max_proposals {
            push_unique(&mut boxes, d.bbox);
        }
    }
    let mut padded = 0;
    if boxes.len() < params.min_proposals {
        let decoded = fsod.decode_boxes(&scores);
        let c = fsod.num_classes();
        let fg: Vec<f64> = (0..decoded.len())
            .map(|i| (0..c).map(|j| scores.probs[[i, j]]).fold(0.0, f64::max))
            .collect();
        for i in score_order(&fg) {
            if boxes.len() >= params.min_proposals {
                break;
            }
            let Some(b) = decoded[i] else { continue };
            if boxes.iter().all(|k| k.iou(&b) <= params.nms_threshold) && push_unique(&mut boxes, b) {
                padded += 1;
            }
        }
    }
    if boxes.is_empty() {
        return Err(Error::invalid("no proposals survive for this image"));
    }
    Ok(ProposalSet { boxes, padded })
}

/// Fixed dense grid used when proposals do not come from a detector.
pub fn dense_proposals(spec: &AnchorSpec, width: usize, height: usize) -> ProposalSet {
    ProposalSet {
        boxes: anchor_grid(spec, width, height),
        padded: 0,
    }
}

/// Grid of the proposal-free baseline.
pub fn baseline_grid() -> AnchorSpec {
    AnchorSpec {
        stride: 16,
        scales: vec![16.0, 24.0],
        aspect_ratios: vec![0.5, 1.0, 2.0],
        min_count: 1,
    }
}
