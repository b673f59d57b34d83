use guideseg::agents::{BackendRequest, BackendResponse, ModelBackend, Part};
use guideseg::airc::{shared, IssueCounts, IterationBounds, QTable};
use guideseg::geometry::{overlap_stats, BinaryMask, BoundingBox};
use guideseg::guidelines::{build_index, GuidelineIndex, HashEmbedder};
use guideseg::pipeline::crop_loop::replay;
use guideseg::pipeline::{run_image, Backends, ControllerScope, ImageRun, RunConfig};
use guideseg::sim::{builtin_guidelines, DefectLedger, Density, ErrorModel, SceneObject, SimulatedBackend, SyntheticScene};
use guideseg::BackendError;

fn bx(c: [u32; 4]) -> BoundingBox {
    BoundingBox::new(c[0], c[1], c[2], c[3]).unwrap()
}

fn pedestrian(c: [u32; 4]) -> SceneObject {
    SceneObject {
        label: "pedestrian".into(),
        box_2d: bx(c),
    }
}

const A: [u32; 4] = [100, 50, 300, 130];
const B: [u32; 4] = [100, 200, 300, 280];
const C: [u32; 4] = [100, 600, 300, 680];
const MANNEQUIN: [u32; 4] = [100, 800, 300, 880];

/// Two people on the left, one on the right, a mannequin on the far
/// right. The Worker misses A and mistakes the mannequin for a person.
fn street() -> SyntheticScene {
    SyntheticScene {
        name: "street".into(),
        width: 960,
        height: 540,
        density: Density::Medium,
        objects: vec![pedestrian(A), pedestrian(B), pedestrian(C)],
        distractors: vec![SceneObject {
            label: "mannequin".into(),
            box_2d: bx(MANNEQUIN),
        }],
        defects: DefectLedger {
            misses: vec![0],
            false_positives: vec![0],
            jittered: vec![],
        },
    }
}

fn index() -> GuidelineIndex {
    build_index(&builtin_guidelines(), &HashEmbedder::default()).unwrap()
}

fn run(config: &RunConfig, backends: &Backends) -> ImageRun {
    let scene = street();
    run_image(&scene.image(), config, &config.roles().unwrap(), backends, &index(), &shared(QTable::default())).unwrap()
}

fn perfect() -> Backends {
    Backends::simulated(SimulatedBackend::new(ErrorModel::perfect(), 0).with_scene(street()))
}

fn boxes(run: &ImageRun) -> Vec<[u32; 4]> {
    let mut b: Vec<_> = run.trace.subjects.iter().map(|s| s.box_2d.to_array()).collect();
    b.sort();
    b
}

#[test]
fn planted_miss_and_false_positive_are_fixed() {
    let r = run(&RunConfig::default(), &perfect());
    assert!(r.trace.context.crop_plan.is_split());
    assert_eq!(r.trace.crops.len(), 2);
    let (left, right) = (&r.trace.crops[0], &r.trace.crops[1]);
    let first = |c: &guideseg::pipeline::crop_loop::CropTrace| c.iterations[0].counts;
    assert_eq!(first(left), IssueCounts::new(1, 0, 0));
    assert_eq!(first(right), IssueCounts::new(0, 1, 0));
    for crop in &r.trace.crops {
        assert_eq!(crop.iterations.last().unwrap().issue_score, 0.0);
        assert!(crop.error.is_none());
    }
    let mut expected = vec![A, B, C];
    expected.sort();
    assert_eq!(boxes(&r), expected);
    assert!(r.trace.subjects.iter().all(|s| s.label == "pedestrian"));

    // the final mask covers the three people and nothing of the mannequin
    let scene = street();
    let gt = scene.gt_mask();
    let o = overlap_stats(&r.mask, &gt).unwrap();
    assert!(o.intersection as f64 / o.union as f64 > 0.9, "{o:?}");
    let m = bx(MANNEQUIN);
    let mannequin_px = (m.y_min()..m.y_max())
        .flat_map(|y| (m.x_min()..m.x_max()).map(move |x| (y, x)))
        .filter(|&(y, x)| r.mask.get(y, x))
        .count();
    assert_eq!(mannequin_px, 0);
}

#[test]
fn at_most_three_model_calls_per_iteration() {
    let r = run(&RunConfig::default(), &perfect());
    let passes: u32 = r.trace.crops.iter().map(|c| c.passes()).sum();
    assert!(r.trace.calls.len() as u32 <= 3 * passes, "{} calls for {passes} passes", r.trace.calls.len());
    assert_eq!(r.trace.summary.calls, r.trace.calls.len());
}

#[test]
fn fixed_bounds_give_exactly_that_many_passes() {
    let config = RunConfig {
        bounds: IterationBounds::new(3, 3).unwrap(),
        ..Default::default()
    };
    let r = run(&config, &perfect());
    assert!(r.trace.crops.iter().all(|c| c.passes() == 3));
    let last = r.trace.crops[0].iterations.last().unwrap();
    assert!(last.forced);
}

#[test]
fn per_image_scope_moves_crops_in_lockstep() {
    let config = RunConfig {
        controller_scope: ControllerScope::PerImage,
        ..Default::default()
    };
    let per_image = run(&config, &perfect());
    let passes: Vec<u32> = per_image.trace.crops.iter().map(|c| c.passes()).collect();
    assert_eq!(passes.len(), 2);
    assert_eq!(passes[0], passes[1]);
    // the state seen by both crops is the pooled one
    for (a, b) in per_image.trace.crops[0].iterations.iter().zip(&per_image.trace.crops[1].iterations) {
        assert_eq!(a.state, b.state);
    }
    let per_crop = run(&RunConfig::default(), &perfect());
    assert_eq!(boxes(&per_image), boxes(&per_crop));
}

#[test]
fn trace_replays_to_the_final_registry() {
    let backend = SimulatedBackend::new(ErrorModel::perfect(), 0).with_scene(street());
    let r = run(&RunConfig::default(), &perfect());
    let scene = street();
    let image = scene.image();
    for crop in &r.trace.crops {
        let handle = if crop.crop.is_full() { image.clone() } else { image.crop(crop.crop) };
        let rebuilt = replay(crop, &backend, &handle).unwrap();
        let got: Vec<_> = rebuilt.iter().map(|s| (s.label.clone(), s.box_2d)).collect();
        let want: Vec<_> = crop.final_registry.iter().map(|s| (s.label.clone(), s.box_2d)).collect();
        assert_eq!(got, want);
    }
}

/// Fails every request that shows the model the right-hand crop.
struct RightCropDown(SimulatedBackend);

impl ModelBackend for RightCropDown {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let right = request.parts.iter().any(|p| match p {
            Part::ImageRef { image, .. } => image.region.is_some_and(|r| r.bounds().x_min() > 0),
            _ => false,
        });
        if right {
            return Err(BackendError::Unavailable("right crop offline".into()));
        }
        self.0.complete(request)
    }
}

#[test]
fn a_failing_crop_does_not_sink_the_image() {
    let mut backends = perfect();
    backends.model = Box::new(RightCropDown(SimulatedBackend::new(ErrorModel::perfect(), 0).with_scene(street())));
    let r = run(&RunConfig::default(), &backends);
    let (left, right) = (&r.trace.crops[0], &r.trace.crops[1]);
    assert!(left.error.is_none());
    assert!(right.error.is_some());
    assert_eq!(boxes(&r), vec![A, B]);
    let split = r.trace.context.crop_plan.split_x.unwrap();
    let right_px = (0..540).flat_map(|y| (split..960).map(move |x| (y, x))).filter(|&(y, x)| r.mask.get(y, x)).count();
    assert_eq!(right_px, 0);
    assert!(r.trace.calls.iter().any(|c| !c.ok));
}

#[test]
fn empty_scene_yields_empty_mask() {
    let scene = SyntheticScene {
        objects: vec![],
        distractors: vec![],
        defects: DefectLedger::default(),
        ..street()
    };
    let backends = Backends::simulated(SimulatedBackend::new(ErrorModel::perfect(), 0).with_scene(scene.clone()));
    let config = RunConfig::default();
    let r = run_image(&scene.image(), &config, &config.roles().unwrap(), &backends, &index(), &shared(QTable::default()))
        .unwrap();
    assert_eq!(r.mask, BinaryMask::new(960, 540));
    assert!(!r.trace.context.crop_plan.is_split());
    assert_eq!(r.trace.crops[0].passes(), 2);
}
