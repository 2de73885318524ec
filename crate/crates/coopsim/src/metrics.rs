//! Evaluation suite: 11-point interpolated detection AP over oriented BEV
//! boxes, MOTA + identity switches for tracking, occupancy and lane IoU, and
//! the planning metrics (L2 / collision / off-road at fixed horizons).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::core::{rect_overlaps_mask, AgentClass, Grid, OccupiedMask, Pose};
use crate::error::{Error, Result};
use crate::planner::Trajectory;

/// Oriented BEV rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevBox {
    pub center: [f64; 2],
    pub length: f64,
    pub width: f64,
    pub heading: f64,
}

impl BevBox {
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.heading.sin_cos();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        let rot = |x: f64, y: f64| {
            [
                self.center[0] + c * x - s * y,
                self.center[1] + s * x + c * y,
            ]
        };
        [rot(hl, -hw), rot(hl, hw), rot(-hl, hw), rot(-hl, -hw)]
    }

    pub fn area(&self) -> f64 {
        self.length * self.width
    }
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let j = (i + 1) % poly.len();
        acc += poly[i][0] * poly[j][1] - poly[j][0] * poly[i][1];
    }
    acc.abs() / 2.0
}

/// Sutherland-Hodgman clip of a polygon by the half-plane left of a->b.
fn clip_by_edge(poly: &[[f64; 2]], a: [f64; 2], b: [f64; 2]) -> Vec<[f64; 2]> {
    let inside =
        |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= -1e-12;
    let intersect = |p: [f64; 2], q: [f64; 2]| -> [f64; 2] {
        let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
        let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
        let denom = ex * (q[1] - p[1]) - ey * (q[0] - p[0]);
        if denom.abs() < 1e-15 {
            return p;
        }
        let t = (ex * (a[1] - p[1]) - ey * (a[0] - p[0])) / denom;
        [p[0] + t * dx, p[1] + t * dy]
    };
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let cur = poly[i];
        let prev = poly[(i + poly.len() - 1) % poly.len()];
        match (inside(prev), inside(cur)) {
            (true, true) => out.push(cur),
            (true, false) => out.push(intersect(prev, cur)),
            (false, true) => {
                out.push(intersect(prev, cur));
                out.push(cur);
            }
            (false, false) => {}
        }
    }
    out
}

/// Intersection-over-union of two oriented BEV rectangles via convex
/// polygon clipping.
pub fn bev_iou(a: &BevBox, b: &BevBox) -> f64 {
    let mut poly: Vec<[f64; 2]> = a.corners().to_vec();
    let bc = b.corners();
    for i in 0..4 {
        poly = clip_by_edge(&poly, bc[i], bc[(i + 1) % 4]);
        if poly.is_empty() {
            return 0.0;
        }
    }
    let inter = polygon_area(&poly);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// One detection pooled across frames for AP computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub frame: usize,
    pub class: AgentClass,
    pub bev: BevBox,
    pub confidence: f64,
}

/// One ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthBox {
    pub frame: usize,
    pub class: AgentClass,
    pub bev: BevBox,
}

/// Greedy confidence-ordered matching; returns true/false per detection in
/// descending-confidence order plus that ordering.
fn greedy_tp_flags(
    detections: &[Detection],
    ground_truth: &[GroundTruthBox],
    iou_thresh: f64,
) -> Vec<bool> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .confidence
            .partial_cmp(&detections[a].confidence)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut claimed = vec![false; ground_truth.len()];
    let mut flags = Vec::with_capacity(detections.len());
    for &di in &order {
        let det = &detections[di];
        let mut best: Option<(f64, usize)> = None;
        for (gi, gt) in ground_truth.iter().enumerate() {
            if claimed[gi] || gt.frame != det.frame || gt.class != det.class {
                continue;
            }
            let iou = bev_iou(&det.bev, &gt.bev);
            if iou >= iou_thresh {
                let better = match best {
                    None => true,
                    Some((b, _)) => iou > b,
                };
                if better {
                    best = Some((iou, gi));
                }
            }
        }
        match best {
            Some((_, gi)) => {
                claimed[gi] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    flags
}

/// 11-point interpolated average precision:
/// `AP = (1/11) * sum_{r in 0, 0.1, .., 1.0} max_{recall >= r} precision`.
/// Zero ground truth is defined as AP 0.
pub fn average_precision(
    detections: &[Detection],
    ground_truth: &[GroundTruthBox],
    iou_thresh: f64,
) -> f64 {
    if ground_truth.is_empty() {
        return 0.0;
    }
    let flags = greedy_tp_flags(detections, ground_truth, iou_thresh);
    let gt_total = ground_truth.len() as f64;
    let mut tp = 0.0;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(flags.len()); // (recall, precision)
    for (k, &is_tp) in flags.iter().enumerate() {
        if is_tp {
            tp += 1.0;
        }
        curve.push((tp / gt_total, tp / (k as f64 + 1.0)));
    }
    let mut ap = 0.0;
    for i in 0..=10 {
        let r = i as f64 / 10.0;
        let p = curve
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        ap += p;
    }
    ap / 11.0
}

/// Fraction of ground truth matched at the IoU threshold.
pub fn detection_recall(
    detections: &[Detection],
    ground_truth: &[GroundTruthBox],
    iou_thresh: f64,
) -> f64 {
    if ground_truth.is_empty() {
        return 1.0;
    }
    let flags = greedy_tp_flags(detections, ground_truth, iou_thresh);
    let tp = flags.iter().filter(|f| **f).count();
    tp as f64 / ground_truth.len() as f64
}

/// One tracked object observation (any frame, any source).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackObs {
    pub id: i32,
    pub pos: [f64; 2],
}

/// Center-distance MOTA with identity switches. Per frame the tracker output
/// is matched to ground truth with the Hungarian method under `gate` meters;
/// `MOTA = 1 - (FN + FP + IDSW) / GT_total`. A switch is counted when a
/// ground truth's matched track id differs from its previously matched id.
pub fn tracking_metrics(
    tracker_frames: &[Vec<TrackObs>],
    gt_frames: &[Vec<TrackObs>],
    gate: f64,
) -> (f64, u64) {
    assert_eq!(
        tracker_frames.len(),
        gt_frames.len(),
        "frames must be time-aligned"
    );
    let mut fn_count = 0u64;
    let mut fp_count = 0u64;
    let mut idsw = 0u64;
    let mut gt_total = 0u64;
    let mut last_matched: BTreeMap<i32, i32> = BTreeMap::new();
    for (tracks, gts) in tracker_frames.iter().zip(gt_frames.iter()) {
        gt_total += gts.len() as u64;
        let cost: Vec<Vec<f64>> = gts
            .iter()
            .map(|g| {
                tracks
                    .iter()
                    .map(|t| {
                        let d = (g.pos[0] - t.pos[0]).hypot(g.pos[1] - t.pos[1]);
                        if d <= gate {
                            d
                        } else {
                            f64::INFINITY
                        }
                    })
                    .collect()
            })
            .collect();
        let pairs = crate::fusion::hungarian(&cost);
        let matched_gt = pairs.len() as u64;
        fn_count += gts.len() as u64 - matched_gt;
        fp_count += tracks.len() as u64 - matched_gt;
        for &(gi, ti) in &pairs {
            let gt_id = gts[gi].id;
            let track_id = tracks[ti].id;
            if let Some(prev) = last_matched.get(&gt_id) {
                if *prev != track_id {
                    idsw += 1;
                }
            }
            last_matched.insert(gt_id, track_id);
        }
    }
    if gt_total == 0 {
        return (0.0, idsw);
    }
    let mota = 1.0 - (fn_count + fp_count + idsw) as f64 / gt_total as f64;
    (mota, idsw)
}

/// Intersection and union cell counts inside a centered square window of
/// half-extent `half_m` meters.
pub fn occupancy_iou_counts(pred: &Grid<bool>, gt: &Grid<bool>, half_m: f64) -> (u64, u64) {
    assert_eq!(pred.spec, gt.spec, "grids must share a spec");
    let spec = pred.spec;
    let mut inter = 0u64;
    let mut union = 0u64;
    for row in 0..spec.height {
        for col in 0..spec.width {
            let [x, y] = spec.cell_center(row, col);
            if x.abs() > half_m || y.abs() > half_m {
                continue;
            }
            let (p, g) = (pred.get(row, col), gt.get(row, col));
            if p && g {
                inter += 1;
            }
            if p || g {
                union += 1;
            }
        }
    }
    (inter, union)
}

/// Windowed occupancy IoU; an empty union counts as perfect agreement.
pub fn occupancy_iou(pred: &OccupiedMask, gt: &Grid<bool>, half_m: f64) -> f64 {
    let (i, u) = occupancy_iou_counts(&pred.cells, gt, half_m);
    ratio_or_one(i, u)
}

pub(crate) fn ratio_or_one(inter: u64, union: u64) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub const LANE_RASTER_HALF_WIDTH: f64 = 0.5;

/// Rasterizes polylines with a 0.5 m half-width onto the grid.
pub fn rasterize_polylines(polylines: &[Vec<[f64; 2]>], spec: crate::core::GridSpec) -> Grid<bool> {
    let mut out = Grid::filled(spec, false);
    let r = LANE_RASTER_HALF_WIDTH;
    for poly in polylines {
        for seg in poly.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let lo_x = a[0].min(b[0]) - r;
            let hi_x = a[0].max(b[0]) + r;
            let lo_y = a[1].min(b[1]) - r;
            let hi_y = a[1].max(b[1]) + r;
            let c0 = (((lo_x - spec.x_min) / spec.resolution).floor().max(0.0)) as usize;
            let r0 = (((lo_y - spec.y_min) / spec.resolution).floor().max(0.0)) as usize;
            let c1 = ((((hi_x - spec.x_min) / spec.resolution).ceil() as i64)
                .clamp(0, spec.width as i64)) as usize;
            let r1 = ((((hi_y - spec.y_min) / spec.resolution).ceil() as i64)
                .clamp(0, spec.height as i64)) as usize;
            for row in r0..r1 {
                for col in c0..c1 {
                    if out.get(row, col) {
                        continue;
                    }
                    let p = spec.cell_center(row, col);
                    if segment_distance(p, a, b) <= r {
                        out.set(row, col, true);
                    }
                }
            }
        }
    }
    out
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - (a[0] + t * dx)).hypot(p[1] - (a[1] + t * dy))
}

/// Rasterized per-class lane IoU between prediction and ground truth.
pub fn lane_iou(pred: &[Vec<[f64; 2]>], gt: &[Vec<[f64; 2]>], spec: crate::core::GridSpec) -> f64 {
    let p = rasterize_polylines(pred, spec);
    let g = rasterize_polylines(gt, spec);
    let mut inter = 0u64;
    let mut union = 0u64;
    for i in 0..p.data.len() {
        if p.data[i] && g.data[i] {
            inter += 1;
        }
        if p.data[i] || g.data[i] {
            union += 1;
        }
    }
    ratio_or_one(inter, union)
}

pub const PLANNING_HORIZONS: [f64; 3] = [2.5, 3.5, 4.5];

/// Per-frame planning evaluation at the fixed horizons.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanningSample {
    pub l2: [f64; 3],
    pub collision: [bool; 3],
    pub offroad: [bool; 3],
}

/// Evaluates a planned ego-frame trajectory against ground truth: L2 to the
/// logged ego position, footprint collision against the ground-truth
/// occupancy of that future instant, and drivable-area containment. All
/// ground-truth inputs are in the world frame.
pub fn planning_metrics(
    traj: &Trajectory,
    world_from_ego: &Pose,
    gt_ego_future: &[[f64; 2]; 3],
    gt_masks: &[Grid<bool>; 3],
    drivable: &Grid<bool>,
    ego_box: [f64; 2],
) -> Result<PlanningSample> {
    let mut l2 = [0.0; 3];
    let mut collision = [false; 3];
    let mut offroad = [false; 3];
    for (k, &h) in PLANNING_HORIZONS.iter().enumerate() {
        let wp = traj
            .at(h)
            .ok_or_else(|| Error::Config(format!("horizon {h}s beyond planned trajectory")))?;
        let idx = traj
            .waypoints
            .iter()
            .position(|w| (w.t - h).abs() < 1e-9)
            .unwrap();
        let world = world_from_ego.transform_point([wp[0], wp[1], 0.0]);
        let heading = traj.heading_at(idx) + world_from_ego.yaw();
        l2[k] = (world[0] - gt_ego_future[k][0]).hypot(world[1] - gt_ego_future[k][1]);
        collision[k] = rect_overlaps_mask(
            &gt_masks[k],
            [world[0], world[1]],
            heading,
            ego_box[0],
            ego_box[1],
        );
        offroad[k] = !drivable.at_world([world[0], world[1]]).unwrap_or(false);
    }
    Ok(PlanningSample {
        l2,
        collision,
        offroad,
    })
}

/// Full per-run evaluation record. All values are plain numbers so per-seed
/// reports aggregate by field-wise mean/standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_per_class: BTreeMap<String, f64>,
    pub det_recall: f64,
    pub mota: f64,
    pub id_switches: f64,
    pub iou_lane: f64,
    pub iou_crosswalk: f64,
    pub iou_n: f64,
    pub iou_f: f64,
    pub l2_at: BTreeMap<String, f64>,
    pub collision_rate_at: BTreeMap<String, f64>,
    pub offroad_rate_at: BTreeMap<String, f64>,
    pub l2_avg: f64,
    pub collision_rate_avg: f64,
    pub offroad_rate_avg: f64,
    pub avg_bps: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn abox(cx: f64, cy: f64, l: f64, w: f64, heading: f64) -> BevBox {
        BevBox {
            center: [cx, cy],
            length: l,
            width: w,
            heading,
        }
    }

    #[test]
    fn bev_iou_cases() {
        let a = abox(0.0, 0.0, 2.0, 2.0, 0.0);
        assert_abs_diff_eq!(bev_iou(&a, &a), 1.0, epsilon = 1e-9);

        let far = abox(10.0, 0.0, 2.0, 2.0, 0.0);
        assert_abs_diff_eq!(bev_iou(&a, &far), 0.0, epsilon = 1e-12);

        // Overlap 1x2 = 2; union 4 + 4 - 2 = 6.
        let shifted = abox(1.0, 0.0, 2.0, 2.0, 0.0);
        assert_abs_diff_eq!(bev_iou(&a, &shifted), 1.0 / 3.0, epsilon = 1e-9);

        // Rotation invariance of self-IoU and symmetry.
        let r1 = abox(0.3, -0.2, 4.0, 2.0, 0.7);
        let r2 = abox(0.8, 0.1, 3.0, 1.5, -0.4);
        assert_abs_diff_eq!(bev_iou(&r1, &r2), bev_iou(&r2, &r1), epsilon = 1e-9);

        // Analytic rotated case: unit squares, one rotated 45 degrees about
        // the shared center. Intersection is a regular octagon with area
        // 2*(sqrt(2)-1) for unit squares.
        let sq = abox(0.0, 0.0, 1.0, 1.0, 0.0);
        let rot = abox(0.0, 0.0, 1.0, 1.0, std::f64::consts::FRAC_PI_4);
        let inter = 2.0 * (2.0f64.sqrt() - 1.0);
        let expect = inter / (2.0 - inter);
        assert_abs_diff_eq!(bev_iou(&sq, &rot), expect, epsilon = 1e-9);
    }

    fn det(frame: usize, conf: f64, cx: f64) -> Detection {
        Detection {
            frame,
            class: AgentClass::Car,
            bev: abox(cx, 0.0, 4.0, 2.0, 0.0),
            confidence: conf,
        }
    }

    fn gt(frame: usize, cx: f64) -> GroundTruthBox {
        GroundTruthBox {
            frame,
            class: AgentClass::Car,
            bev: abox(cx, 0.0, 4.0, 2.0, 0.0),
        }
    }

    #[test]
    fn average_precision_cases() {
        assert_eq!(average_precision(&[], &[], 0.5), 0.0);

        let gts = vec![gt(0, 0.0), gt(0, 10.0)];
        let perfect = vec![det(0, 0.9, 0.0), det(0, 0.8, 10.0)];
        assert_abs_diff_eq!(average_precision(&perfect, &gts, 0.5), 1.0, epsilon = 1e-12);

        // conf 0.9 TP, 0.8 FP, 0.7 TP on 2 GT:
        // precision envelope 1.0 up to recall 0.5, then 2/3.
        let mixed = vec![det(0, 0.9, 0.0), det(0, 0.8, 50.0), det(0, 0.7, 10.0)];
        let expect = (6.0 * 1.0 + 5.0 * (2.0 / 3.0)) / 11.0;
        assert_abs_diff_eq!(
            average_precision(&mixed, &gts, 0.5),
            expect,
            epsilon = 1e-12
        );
    }

    #[test]
    fn ap_removing_a_false_positive_never_hurts() {
        let gts = vec![gt(0, 0.0), gt(0, 10.0), gt(1, 0.0)];
        let dets = vec![
            det(0, 0.95, 0.0),
            det(0, 0.9, 60.0),
            det(0, 0.85, 10.0),
            det(1, 0.5, 70.0),
            det(1, 0.4, 0.0),
        ];
        let base = average_precision(&dets, &gts, 0.5);
        assert!(base > 0.0 && base < 1.0);
        for drop in [1usize, 3] {
            let fewer: Vec<Detection> = dets
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != drop)
                .map(|(_, d)| *d)
                .collect();
            assert!(average_precision(&fewer, &gts, 0.5) >= base - 1e-12);
        }
    }

    /// Independent PR oracle: precision at every prefix, max over suffix at
    /// each of the 11 recall points, with its own greedy matcher.
    fn ap_oracle(
        detections: &[Detection],
        ground_truth: &[GroundTruthBox],
        iou_thresh: f64,
    ) -> f64 {
        if ground_truth.is_empty() {
            return 0.0;
        }
        let mut order: Vec<usize> = (0..detections.len()).collect();
        order.sort_by(|&a, &b| {
            detections[b]
                .confidence
                .partial_cmp(&detections[a].confidence)
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut claimed = vec![false; ground_truth.len()];
        let mut tps: Vec<bool> = Vec::new();
        for &di in &order {
            let d = &detections[di];
            let mut best_iou = 0.0;
            let mut best_gi = None;
            for (gi, g) in ground_truth.iter().enumerate() {
                if claimed[gi] || g.frame != d.frame || g.class != d.class {
                    continue;
                }
                let iou = bev_iou(&d.bev, &g.bev);
                if iou >= iou_thresh && iou > best_iou {
                    best_iou = iou;
                    best_gi = Some(gi);
                }
            }
            if let Some(gi) = best_gi {
                claimed[gi] = true;
                tps.push(true);
            } else {
                tps.push(false);
            }
        }
        let gt_n = ground_truth.len() as f64;
        let mut sum = 0.0;
        for r10 in 0..=10 {
            let r = r10 as f64 / 10.0;
            let mut best_p = 0.0f64;
            let mut tp = 0.0;
            for (k, &t) in tps.iter().enumerate() {
                if t {
                    tp += 1.0;
                }
                let recall = tp / gt_n;
                let precision = tp / (k + 1) as f64;
                if recall >= r - 1e-12 {
                    best_p = best_p.max(precision);
                }
            }
            sum += best_p;
        }
        sum / 11.0
    }

    #[test]
    fn ap_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for case in 0..200 {
            let n_gt = rng.gen_range(0..6);
            let gts: Vec<GroundTruthBox> = (0..n_gt)
                .map(|i| gt(rng.gen_range(0..3), i as f64 * 12.0))
                .collect();
            let n_det = rng.gen_range(0..8);
            let dets: Vec<Detection> = (0..n_det)
                .map(|_| {
                    let frame = rng.gen_range(0..3);
                    // Either near a GT (candidate TP) or far away (FP).
                    let cx = if rng.gen_bool(0.6) && n_gt > 0 {
                        rng.gen_range(0..n_gt) as f64 * 12.0 + rng.gen_range(-1.0..1.0)
                    } else {
                        100.0 + rng.gen_range(0.0..50.0)
                    };
                    det(frame, rng.gen_range(0.0..1.0), cx)
                })
                .collect();
            let got = average_precision(&dets, &gts, 0.5);
            let want = ap_oracle(&dets, &gts, 0.5);
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
            assert!((0.0..=1.0).contains(&got), "case {case}");
        }
    }

    #[test]
    fn tracking_metric_cases() {
        let gt_frames: Vec<Vec<TrackObs>> = (0..4)
            .map(|k| {
                vec![TrackObs {
                    id: 1,
                    pos: [k as f64, 0.0],
                }]
            })
            .collect();

        let perfect: Vec<Vec<TrackObs>> = (0..4)
            .map(|k| {
                vec![TrackObs {
                    id: 7,
                    pos: [k as f64, 0.0],
                }]
            })
            .collect();
        let (mota, idsw) = tracking_metrics(&perfect, &gt_frames, 2.0);
        assert_abs_diff_eq!(mota, 1.0, epsilon = 1e-12);
        assert_eq!(idsw, 0);

        let silent: Vec<Vec<TrackObs>> = vec![vec![]; 4];
        let (mota, _) = tracking_metrics(&silent, &gt_frames, 2.0);
        assert_abs_diff_eq!(mota, 0.0, epsilon = 1e-12);

        // Track id changes once mid-sequence: IDSW 1, MOTA 1 - 1/4.
        let switching: Vec<Vec<TrackObs>> = (0..4)
            .map(|k| {
                vec![TrackObs {
                    id: if k < 2 { 7 } else { 8 },
                    pos: [k as f64, 0.0],
                }]
            })
            .collect();
        let (mota, idsw) = tracking_metrics(&switching, &gt_frames, 2.0);
        assert_eq!(idsw, 1);
        assert_abs_diff_eq!(mota, 0.75, epsilon = 1e-12);
    }

    #[test]
    fn occupancy_iou_cases() {
        let spec = crate::core::GridSpec::new(20, 20, 1.0, -10.0, -10.0).unwrap();
        let mut pred = Grid::filled(spec, false);
        let mut gt = Grid::filled(spec, false);
        pred.set(10, 10, true);
        pred.set(10, 11, true);
        gt.set(10, 11, true);
        gt.set(11, 11, true);
        let (i, u) = occupancy_iou_counts(&pred, &gt, 10.0);
        assert_eq!((i, u), (1, 3));

        let mask = OccupiedMask {
            cells: pred.clone(),
            threshold_used: 0.5,
        };
        assert_abs_diff_eq!(occupancy_iou(&mask, &pred, 10.0), 1.0, epsilon = 0.0);

        // Prediction outside the window, GT inside.
        let mut far_pred = Grid::filled(spec, false);
        far_pred.set(0, 0, true); // center (-9.5, -9.5), outside half_m = 2
        let mut near_gt = Grid::filled(spec, false);
        near_gt.set(10, 10, true); // center (0.5, 0.5)
        let mask = OccupiedMask {
            cells: far_pred,
            threshold_used: 0.5,
        };
        assert_abs_diff_eq!(occupancy_iou(&mask, &near_gt, 2.0), 0.0, epsilon = 0.0);
    }

    #[test]
    fn occupancy_iou_symmetry() {
        let spec = crate::core::GridSpec::new(16, 16, 1.0, -8.0, -8.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let mut a = Grid::filled(spec, false);
            let mut b = Grid::filled(spec, false);
            for i in 0..a.data.len() {
                a.data[i] = rng.gen_bool(0.3);
                b.data[i] = rng.gen_bool(0.3);
            }
            let (i1, u1) = occupancy_iou_counts(&a, &b, 8.0);
            let (i2, u2) = occupancy_iou_counts(&b, &a, 8.0);
            assert_eq!((i1, u1), (i2, u2));
        }
    }

    #[test]
    fn lane_iou_cases() {
        let spec = crate::core::GridSpec::new(100, 100, 0.5, -25.0, -25.0).unwrap();
        let a = vec![vec![[-20.0, 0.0], [20.0, 0.0]]];
        assert_abs_diff_eq!(lane_iou(&a, &a, spec), 1.0, epsilon = 0.0);

        let b = vec![vec![[-20.0, 10.0], [20.0, 10.0]]];
        assert_abs_diff_eq!(lane_iou(&a, &b, spec), 0.0, epsilon = 0.0);

        // One shared lane of two: equal raster areas, no cross-overlap.
        let shared_plus_one = vec![
            vec![[-20.0, 0.0], [20.0, 0.0]],
            vec![[-20.0, 10.0], [20.0, 10.0]],
        ];
        let iou = lane_iou(&a, &shared_plus_one, spec);
        assert_abs_diff_eq!(iou, 1.0 / 2.0, epsilon = 1e-9);

        // Two predicted and two ground-truth lanes sharing exactly one:
        // intersection A, union 3A.
        let pred_two = vec![
            vec![[-20.0, 0.0], [20.0, 0.0]],
            vec![[-20.0, -10.0], [20.0, -10.0]],
        ];
        let iou = lane_iou(&pred_two, &shared_plus_one, spec);
        assert_abs_diff_eq!(iou, 1.0 / 3.0, epsilon = 1e-9);
    }

    #[test]
    fn planning_metric_cases() {
        let spec = crate::core::GridSpec::new(240, 240, 0.5, -60.0, -60.0).unwrap();
        let drivable = Grid::filled(spec, true);
        let empty_mask = Grid::filled(spec, false);
        let traj = Trajectory {
            waypoints: (0..=9)
                .map(|k| crate::planner::Waypoint {
                    t: k as f64 * 0.5,
                    x: 4.0 * (k as f64 * 0.5),
                    y: 0.0,
                })
                .collect(),
        };
        // Planned equals GT: zero L2, no collision, on-road.
        let gt_future = [[10.0, 0.0], [14.0, 0.0], [18.0, 0.0]];
        let masks = [empty_mask.clone(), empty_mask.clone(), empty_mask.clone()];
        let sample = planning_metrics(
            &traj,
            &Pose::identity(),
            &gt_future,
            &masks,
            &drivable,
            [4.6, 1.8],
        )
        .unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(sample.l2[k], 0.0, epsilon = 1e-9);
            assert!(!sample.collision[k]);
            assert!(!sample.offroad[k]);
        }

        // 3-4-5 triangle at 2.5 s.
        let gt_future = [[13.0, 4.0], [14.0, 0.0], [18.0, 0.0]];
        let sample = planning_metrics(
            &traj,
            &Pose::identity(),
            &gt_future,
            &masks,
            &drivable,
            [4.6, 1.8],
        )
        .unwrap();
        assert_abs_diff_eq!(sample.l2[0], 5.0, epsilon = 1e-9);

        // Waypoint inside an occupied cell flags a collision, and dilating
        // the mask never clears it.
        let mut occupied = Grid::filled(spec, false);
        stamp_cell(&mut occupied, [10.0, 0.0]);
        let masks = [occupied.clone(), empty_mask.clone(), empty_mask.clone()];
        let sample = planning_metrics(
            &traj,
            &Pose::identity(),
            &gt_future,
            &masks,
            &drivable,
            [4.6, 1.8],
        )
        .unwrap();
        assert!(sample.collision[0]);
        let mut dilated = occupied.clone();
        for row in 0..spec.height {
            for col in 0..spec.width {
                if occupied.get(row, col) {
                    for (dr, dc) in [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)] {
                        let (r, c) = (row as i64 + dr, col as i64 + dc);
                        if r >= 0
                            && c >= 0
                            && (r as usize) < spec.height
                            && (c as usize) < spec.width
                        {
                            dilated.set(r as usize, c as usize, true);
                        }
                    }
                }
            }
        }
        let masks = [dilated, empty_mask.clone(), empty_mask.clone()];
        let sample2 = planning_metrics(
            &traj,
            &Pose::identity(),
            &gt_future,
            &masks,
            &drivable,
            [4.6, 1.8],
        )
        .unwrap();
        assert!(sample2.collision[0], "dilation must not clear a collision");

        // Horizon beyond the trajectory is rejected.
        let short = Trajectory {
            waypoints: vec![crate::planner::Waypoint {
                t: 0.0,
                x: 0.0,
                y: 0.0,
            }],
        };
        assert!(planning_metrics(
            &short,
            &Pose::identity(),
            &gt_future,
            &masks_ref(&spec),
            &drivable,
            [4.6, 1.8]
        )
        .is_err());
    }

    fn masks_ref(spec: &crate::core::GridSpec) -> [Grid<bool>; 3] {
        [
            Grid::filled(*spec, false),
            Grid::filled(*spec, false),
            Grid::filled(*spec, false),
        ]
    }

    fn stamp_cell(grid: &mut Grid<bool>, xy: [f64; 2]) {
        if let Some((r, c)) = grid.spec.world_to_cell(xy) {
            grid.set(r, c, true);
        }
    }
}
