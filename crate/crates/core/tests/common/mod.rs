//! Independent reference implementations used by the oracle and
//! acceptance tests. Each one recomputes a result the slow, obvious way.
#![allow(dead_code)]

use guideseg::geometry::{BinaryMask, BoundingBox};
use rand::{Rng, RngCore};

/// Per-image counts computed pixel by pixel.
pub struct PixelCounts {
    pub inter: u64,
    pub union: u64,
    pub pred: u64,
    pub gt: u64,
}

pub fn pixel_counts(pred: &BinaryMask, gt: &BinaryMask) -> PixelCounts {
    let mut c = PixelCounts {
        inter: 0,
        union: 0,
        pred: 0,
        gt: 0,
    };
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            let (p, g) = (pred.get(y, x), gt.get(y, x));
            c.inter += (p && g) as u64;
            c.union += (p || g) as u64;
            c.pred += p as u64;
            c.gt += g as u64;
        }
    }
    c
}

/// gIoU, cIoU, mPr, mRec, mDice over a set of (pred, gt) pairs.
pub fn brute_metrics(pairs: &[(BinaryMask, BinaryMask)]) -> [f64; 5] {
    let n = pairs.len() as f64;
    let (mut giou, mut mpr, mut mrec, mut mdice) = (0.0, 0.0, 0.0, 0.0);
    let (mut si, mut su) = (0u64, 0u64);
    for (p, g) in pairs {
        let c = pixel_counts(p, g);
        si += c.inter;
        su += c.union;
        let both_empty = c.pred == 0 && c.gt == 0;
        giou += if c.union == 0 { 1.0 } else { c.inter as f64 / c.union as f64 };
        mpr += if c.pred == 0 {
            if both_empty { 1.0 } else { 0.0 }
        } else {
            c.inter as f64 / c.pred as f64
        };
        mrec += if c.gt == 0 {
            if both_empty { 1.0 } else { 0.0 }
        } else {
            c.inter as f64 / c.gt as f64
        };
        mdice += if c.pred + c.gt == 0 {
            1.0
        } else {
            (2 * c.inter) as f64 / (c.pred + c.gt) as f64
        };
    }
    let ciou = if su == 0 { 1.0 } else { si as f64 / su as f64 };
    [giou / n, ciou, mpr / n, mrec / n, mdice / n]
}

/// Random mask built from a few rectangles plus salt noise.
pub fn random_mask(rng: &mut impl RngCore, w: u32, h: u32) -> BinaryMask {
    let mut m = BinaryMask::new(w, h);
    let rects = rng.random_range(0..4);
    for _ in 0..rects {
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (y1, x1) = (rng.random_range(y0..=h), rng.random_range(x0..=w));
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(y, x, true);
            }
        }
    }
    let noise = rng.random_range(0..(w * h / 8 + 1));
    for _ in 0..noise {
        let (y, x) = (rng.random_range(0..h), rng.random_range(0..w));
        m.set(y, x, rng.random::<bool>());
    }
    m
}

/// Result of the exhaustive split search: (left count, right count,
/// gap, split column).
#[derive(Debug, PartialEq, Eq)]
pub struct SplitChoice {
    pub left: usize,
    pub right: usize,
    pub gap: u32,
    pub split_x: u32,
}

/// Tries every vertical line x in [0, width] and keeps the partitions in
/// which every box lies entirely on one side and both sides are non-empty.
/// Ranked by imbalance, then by larger gap, then by fewer boxes on the left.
pub fn exhaustive_split(boxes: &[BoundingBox], width: u32) -> Option<SplitChoice> {
    let mut best: Option<((u32, i64, usize), SplitChoice)> = None;
    for x in 0..=width {
        let left: Vec<_> = boxes.iter().filter(|b| b.x_max() <= x).collect();
        let right: Vec<_> = boxes.iter().filter(|b| b.x_min() >= x).collect();
        if left.is_empty() || right.is_empty() || left.len() + right.len() != boxes.len() {
            continue;
        }
        let left_max = left.iter().map(|b| b.x_max()).max().unwrap();
        let right_min = right.iter().map(|b| b.x_min()).min().unwrap();
        let gap = right_min - left_max;
        let imbalance = (left.len() as i64 - right.len() as i64).unsigned_abs() as u32;
        let key = (imbalance, -(gap as i64), left.len());
        if best.as_ref().is_none_or(|(k, _)| key < *k) {
            best = Some((
                key,
                SplitChoice {
                    left: left.len(),
                    right: right.len(),
                    gap,
                    split_x: left_max + gap / 2,
                },
            ));
        }
    }
    best.map(|(_, c)| c)
}

/// Boxes with coordinates on a coarse grid so shared edges and equal
/// centers are common.
pub fn random_boxes(rng: &mut impl RngCore, n: usize, width: u32, height: u32) -> Vec<BoundingBox> {
    (0..n)
        .map(|_| {
            let step = 4;
            let x0 = rng.random_range(0..width / step - 1) * step;
            let x1 = rng.random_range(x0 / step + 1..=width / step) * step;
            let y0 = rng.random_range(0..height - 1);
            let y1 = rng.random_range(y0 + 1..=height);
            BoundingBox::new(y0, x0, y1, x1).unwrap()
        })
        .collect()
}

/// Indices of the k best rows by dot product with `query`, descending,
/// ties by ascending position.
pub fn brute_top_k(rows: &[Vec<f64>], query: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut s = 0.0;
            for j in 0..r.len() {
                s += r[j] * query[j];
            }
            (i, s)
        })
        .collect();
    // insertion sort keeps the reference free of library ordering helpers
    for i in 1..scored.len() {
        let mut j = i;
        while j > 0 {
            let (a, b) = (scored[j - 1], scored[j]);
            let out_of_order = b.1 > a.1 || (b.1 == a.1 && b.0 < a.0);
            if !out_of_order {
                break;
            }
            scored.swap(j - 1, j);
            j -= 1;
        }
    }
    scored.truncate(k);
    scored
}

/// Tabular update written out step by step: Q[s][a] <- Q[s][a] +
/// alpha * (r + gamma * max Q[s'] - Q[s][a]), no bootstrap when terminal.
pub fn straight_line_q(
    steps: &[(usize, usize, f64, usize, bool)],
    alpha: f64,
    gamma: f64,
) -> [[f64; 2]; 6] {
    let mut q = [[0.0f64; 2]; 6];
    for &(s, a, r, s2, terminal) in steps {
        let next_best = if q[s2][0] > q[s2][1] { q[s2][0] } else { q[s2][1] };
        let future = if terminal { 0.0 } else { next_best };
        let old = q[s][a];
        q[s][a] = old + alpha * (r + gamma * future - old);
    }
    q
}

/// Example messages for the four agent roles.
pub mod golden {
    pub const WORKER: &str = r#""instances": [{
  "id": "sub_0",
  "label": "pedestrian",
  "box_2d": [100, 100, 200, 200]
}]"#;

    pub const WORKER_REFINED: &str = r#""instances": [{
  "id": "sub_0",
  "label": "pedestrian",
  "box_2d": [150, 150, 250, 250]
}]"#;

    pub const SUPERVISOR: &str = r#""missing_objects": [{
  "missing_object_id": "m_1",
  "label": "umbrella",
  "reason": "Umbrella should be included per G<id>"
}],
"false_positives": [],
"refinements": []"#;

    pub const BOXGEN: &str = r#""instances": [{
  "box_id": "m_1",
  "label": "umbrella",
  "box_2d": [123, 456, 789, 987]
}]"#;
}
