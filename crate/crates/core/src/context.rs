//! Scene query enrichment and smart-crop planning.

use serde::{Deserialize, Serialize};

use crate::error::{BackendError, Error, Result};
use crate::geometry::{BoundingBox, CropRegion, ImageRef};
use crate::guidelines::{embed_text, Embedder, Guideline, GuidelineIndex};

/// The text-rich retrieval query: prompt, scene caption and resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneQuery {
    pub prompt: String,
    pub caption: String,
    pub width: u32,
    pub height: u32,
}

impl SceneQuery {
    pub fn new(prompt: &str, caption: &str, width: u32, height: u32) -> Result<Self> {
        if prompt.trim().is_empty() {
            return Err(Error::Validation("prompt must not be empty".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::Validation("image size must be positive".into()));
        }
        Ok(Self {
            prompt: prompt.to_string(),
            caption: caption.to_string(),
            width,
            height,
        })
    }

    pub fn render(&self) -> String {
        format!(
            "{} | {} | {}x{}",
            self.prompt, self.caption, self.width, self.height
        )
    }
}

pub fn build_query(prompt: &str, caption: &str, width: u32, height: u32) -> Result<String> {
    Ok(SceneQuery::new(prompt, caption, width, height)?.render())
}

/// How competing splits are ranked.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitObjective {
    /// Minimize count imbalance, then maximize the gap.
    #[default]
    BalanceThenGap,
    /// Maximize the gap, then minimize imbalance.
    GapThenBalance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropSettings {
    /// Scale at which the coarse detector sees the image.
    pub downscale: f64,
    /// Extra pixels added to each crop towards the split; never past the
    /// midpoint of the gap, so crops stay disjoint.
    pub margin_px: u32,
    pub objective: SplitObjective,
}

impl Default for CropSettings {
    fn default() -> Self {
        Self {
            downscale: 0.8,
            margin_px: 0,
            objective: SplitObjective::BalanceThenGap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropPlan {
    pub crops: Vec<CropRegion>,
    /// Dividing column between the two crops, when split.
    pub split_x: Option<u32>,
    /// Number of coarse boxes on the left and right of the split.
    pub balance: (usize, usize),
    pub gap_px: u32,
}

impl CropPlan {
    pub fn single(width: u32, height: u32, n_boxes: usize) -> Self {
        Self {
            crops: vec![CropRegion::full(width, height).expect("image size is positive")],
            split_x: None,
            balance: (n_boxes, 0),
            gap_px: 0,
        }
    }

    pub fn is_split(&self) -> bool {
        self.crops.len() == 2
    }
}

pub fn plan_crops(boxes: &[BoundingBox], width: u32, height: u32) -> CropPlan {
    plan_crops_with(boxes, width, height, &CropSettings::default())
}

/// Chooses a vertical split of the image from coarse detections.
///
/// Boxes are ordered by x-center and every cut between consecutive boxes is
/// considered. A cut is feasible when the right group starts at or after
/// the point where the left group ends. Feasible cuts are ranked by the
/// configured objective; equal scores keep the cut with fewer boxes on the
/// left. No feasible cut, or fewer than two boxes, yields the full image.
pub fn plan_crops_with(
    boxes: &[BoundingBox],
    width: u32,
    height: u32,
    settings: &CropSettings,
) -> CropPlan {
    let mut sorted: Vec<BoundingBox> = boxes.iter().filter_map(|b| b.clip(width, height)).collect();
    if sorted.len() < 2 {
        return CropPlan::single(width, height, sorted.len());
    }
    // x-center doubled to stay in integers
    sorted.sort_by_key(|b| (b.x_min() + b.x_max(), b.x_min()));

    let n = sorted.len();
    let mut best: Option<(usize, u32, (u32, i64))> = None;
    let mut left_max = 0;
    for cut in 1..n {
        left_max = left_max.max(sorted[cut - 1].x_max());
        let right_min = sorted[cut..].iter().map(|b| b.x_min()).min().unwrap();
        if right_min < left_max {
            continue;
        }
        let gap = right_min - left_max;
        let imbalance = (cut as i64 - (n - cut) as i64).unsigned_abs() as u32;
        let score = match settings.objective {
            SplitObjective::BalanceThenGap => (imbalance, -(gap as i64)),
            SplitObjective::GapThenBalance => (u32::MAX - gap, imbalance as i64),
        };
        if best.is_none_or(|(_, _, s)| score < s) {
            best = Some((cut, left_max, score));
        }
    }

    let Some((cut, left_max, _)) = best else {
        return CropPlan::single(width, height, n);
    };
    let right_min = sorted[cut..].iter().map(|b| b.x_min()).min().unwrap();
    let mid = left_max + (right_min - left_max) / 2;
    let left_edge = (left_max + settings.margin_px).min(mid).max(left_max);
    let right_edge = right_min.saturating_sub(settings.margin_px).max(mid).min(right_min);

    let (Ok(left), Ok(right)) = (
        BoundingBox::new(0, 0, height, left_edge),
        BoundingBox::new(0, right_edge, height, width),
    ) else {
        return CropPlan::single(width, height, n);
    };
    CropPlan {
        crops: vec![
            CropRegion::new(width, height, left).expect("left crop inside image"),
            CropRegion::new(width, height, right).expect("right crop inside image"),
        ],
        split_x: Some(mid),
        balance: (cut, n - cut),
        gap_px: right_min - left_max,
    }
}

/// Short scene description for query enrichment.
pub trait Captioner: Send + Sync {
    fn caption(&self, image: &ImageRef, prompt: &str) -> Result<String, BackendError>;
}

/// Rough detector run on a downscaled copy of the image. Returned boxes
/// are in the downscaled frame (`round(w * scale) x round(h * scale)`).
pub trait CoarseDetector: Send + Sync {
    fn detect(&self, image: &ImageRef, prompt: &str, scale: f64) -> Result<Vec<BoundingBox>, BackendError>;
}

/// Captioner that always returns an empty caption.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoCaption;

impl Captioner for NoCaption {
    fn caption(&self, _: &ImageRef, _: &str) -> Result<String, BackendError> {
        Ok(String::new())
    }
}

/// Detector that never finds anything, which always yields a single crop.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoDetections;

impl CoarseDetector for NoDetections {
    fn detect(&self, _: &ImageRef, _: &str, _: f64) -> Result<Vec<BoundingBox>, BackendError> {
        Ok(Vec::new())
    }
}

/// Maps a box from the downscaled detector frame back to full resolution,
/// rounding outward.
pub fn upscale_box(b: &BoundingBox, scale: f64, width: u32, height: u32) -> Option<BoundingBox> {
    let down = |v: u32| (v as f64 / scale).floor();
    let up = |v: u32| (v as f64 / scale).ceil();
    BoundingBox::from_f64_clipped(
        [down(b.y_min()), down(b.x_min()), up(b.y_max()), up(b.x_max())],
        width,
        height,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub query: String,
    pub guidelines: Vec<(Guideline, f64)>,
    pub coarse_boxes: Vec<BoundingBox>,
    pub crop_plan: CropPlan,
    pub warnings: Vec<String>,
}

impl Context {
    pub fn guideline_list(&self) -> Vec<Guideline> {
        self.guidelines.iter().map(|(g, _)| g.clone()).collect()
    }
}

pub struct ContextBackends<'a> {
    pub captioner: &'a dyn Captioner,
    pub detector: &'a dyn CoarseDetector,
    pub embedder: &'a dyn Embedder,
}

/// Captions the image, retrieves the top-`k` guidelines for the enriched
/// query and plans crops from coarse detections. Backend failures degrade
/// the result (empty caption, no guidelines, single crop) and are reported
/// in `warnings`; only invalid input is an error.
pub fn construct_context(
    image: &ImageRef,
    prompt: &str,
    index: &GuidelineIndex,
    backends: &ContextBackends<'_>,
    k: usize,
    settings: &CropSettings,
) -> Result<Context> {
    SceneQuery::new(prompt, "", image.width, image.height)?;
    if k == 0 {
        return Err(Error::Validation("k must be at least 1".into()));
    }
    let mut warnings = Vec::new();

    let (caption, detections) = std::thread::scope(|s| {
        let cap = s.spawn(|| backends.captioner.caption(image, prompt));
        let det = backends.detector.detect(image, prompt, settings.downscale);
        (cap.join().unwrap_or_else(|_| Err(BackendError::Unavailable("captioner panicked".into()))), det)
    });

    let caption = caption.unwrap_or_else(|e| {
        warnings.push(format!("captioner failed, using empty caption: {e}"));
        String::new()
    });
    let query = build_query(prompt, &caption, image.width, image.height)?;

    if backends.embedder.tag() != index.embedder_tag() {
        warnings.push(format!(
            "query embedder {} differs from index embedder {}",
            backends.embedder.tag(),
            index.embedder_tag()
        ));
    }
    let guidelines = match embed_text(backends.embedder, &query).and_then(|q| index.top_k(&q, k)) {
        Ok(g) => g,
        Err(e) => {
            warnings.push(format!("guideline retrieval failed: {e}"));
            Vec::new()
        }
    };

    let coarse_boxes: Vec<BoundingBox> = match detections {
        Ok(boxes) => boxes
            .iter()
            .filter_map(|b| upscale_box(b, settings.downscale, image.width, image.height))
            .collect(),
        Err(e) => {
            warnings.push(format!("coarse detector failed, using full image: {e}"));
            Vec::new()
        }
    };
    let crop_plan = plan_crops_with(&coarse_boxes, image.width, image.height, settings);

    Ok(Context {
        query,
        guidelines,
        coarse_boxes,
        crop_plan,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidelines::{build_index, ingest, HashEmbedder};

    fn xbox(x0: u32, x1: u32) -> BoundingBox {
        BoundingBox::new(10, x0, 20, x1).unwrap()
    }

    #[test]
    fn query_format() {
        assert_eq!(
            build_query("Pedestrian", "a rainy street with people", 1920, 1280).unwrap(),
            "Pedestrian | a rainy street with people | 1920x1280"
        );
        assert_eq!(
            build_query("Pedestrian", "", 1920, 1280).unwrap(),
            "Pedestrian |  | 1920x1280"
        );
        assert_ne!(
            build_query("P", "c", 100, 200).unwrap(),
            build_query("P", "c", 200, 100).unwrap()
        );
        assert!(build_query("", "c", 10, 10).is_err());
    }

    #[test]
    fn split_example() {
        let boxes = [xbox(5, 15), xbox(15, 25), xbox(75, 85), xbox(85, 95)];
        let plan = plan_crops(&boxes, 100, 50);
        assert!(plan.is_split());
        assert_eq!(plan.balance, (2, 2));
        assert_eq!(plan.gap_px, 50);
        assert_eq!((plan.crops[0].bounds().x_min(), plan.crops[0].bounds().x_max()), (0, 25));
        assert_eq!((plan.crops[1].bounds().x_min(), plan.crops[1].bounds().x_max()), (75, 100));
        assert_eq!(plan.crops[0].height(), 50);
    }

    #[test]
    fn degenerate_inputs_use_full_image() {
        let one = plan_crops(&[xbox(5, 15)], 100, 50);
        assert_eq!(one.crops.len(), 1);
        assert!(one.crops[0].is_full());
        assert_eq!(one.split_x, None);

        let overlapping = plan_crops(&[xbox(10, 60), xbox(40, 90)], 100, 50);
        assert_eq!(overlapping.crops.len(), 1);
        assert!(plan_crops(&[], 100, 50).crops[0].is_full());
    }

    #[test]
    fn margin_never_crosses_gap_midpoint() {
        let boxes = [xbox(5, 15), xbox(15, 25), xbox(75, 85), xbox(85, 95)];
        let settings = CropSettings {
            margin_px: 100,
            ..CropSettings::default()
        };
        let plan = plan_crops_with(&boxes, 100, 50, &settings);
        assert_eq!(plan.crops[0].bounds().x_max(), 50);
        assert_eq!(plan.crops[1].bounds().x_min(), 50);
        let small = plan_crops_with(
            &boxes,
            100,
            50,
            &CropSettings {
                margin_px: 4,
                ..CropSettings::default()
            },
        );
        assert_eq!(small.crops[0].bounds().x_max(), 29);
        assert_eq!(small.crops[1].bounds().x_min(), 71);
    }

    #[test]
    fn gap_first_objective() {
        // balanced cut has gap 0, lopsided cut has gap 40
        let boxes = [xbox(0, 10), xbox(10, 20), xbox(20, 30), xbox(70, 80)];
        let balanced = plan_crops(&boxes, 100, 50);
        assert_eq!(balanced.balance, (2, 2));
        let gap_first = plan_crops_with(
            &boxes,
            100,
            50,
            &CropSettings {
                objective: SplitObjective::GapThenBalance,
                ..CropSettings::default()
            },
        );
        assert_eq!(gap_first.balance, (3, 1));
        assert_eq!(gap_first.gap_px, 40);
    }

    struct FailingCaptioner;
    impl Captioner for FailingCaptioner {
        fn caption(&self, _: &ImageRef, _: &str) -> Result<String, BackendError> {
            Err(BackendError::Unavailable("offline".into()))
        }
    }
    struct FailingDetector;
    impl CoarseDetector for FailingDetector {
        fn detect(&self, _: &ImageRef, _: &str, _: f64) -> Result<Vec<BoundingBox>, BackendError> {
            Err(BackendError::Transport("timeout".into()))
        }
    }

    fn index() -> GuidelineIndex {
        let doc = include_str!("../data/pedestrian_guidelines.json");
        build_index(&ingest(doc).unwrap(), &HashEmbedder::default()).unwrap()
    }

    #[test]
    fn noop_backends_give_prompt_only_query() {
        let idx = index();
        let image = ImageRef::new("img", 640, 480);
        let ctx = construct_context(
            &image,
            "Pedestrian",
            &idx,
            &ContextBackends {
                captioner: &NoCaption,
                detector: &NoDetections,
                embedder: &HashEmbedder::default(),
            },
            8,
            &CropSettings::default(),
        )
        .unwrap();
        assert_eq!(ctx.query, "Pedestrian |  | 640x480");
        assert_eq!(ctx.guidelines.len(), 8);
        assert_eq!(ctx.crop_plan.crops.len(), 1);
        assert!(ctx.warnings.is_empty());
    }

    #[test]
    fn failing_backends_degrade_with_warnings() {
        let idx = index();
        let image = ImageRef::new("img", 640, 480);
        let ctx = construct_context(
            &image,
            "Pedestrian",
            &idx,
            &ContextBackends {
                captioner: &FailingCaptioner,
                detector: &FailingDetector,
                embedder: &HashEmbedder::default(),
            },
            8,
            &CropSettings::default(),
        )
        .unwrap();
        assert_eq!(ctx.warnings.len(), 2);
        assert!(ctx.crop_plan.crops[0].is_full());
        assert_eq!(ctx.guidelines.len(), 8);
    }

    #[test]
    fn upscale_rounds_outward() {
        let b = BoundingBox::new(8, 8, 16, 17).unwrap();
        assert_eq!(
            upscale_box(&b, 0.8, 100, 100).unwrap().to_array(),
            [10, 10, 20, 22]
        );
    }
}
