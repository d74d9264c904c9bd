//! COCO-protocol average precision with size-stratified breakdowns.
//!
//! AP averages over IoU thresholds 0.50:0.05:0.95, with 101-point
//! interpolated precision per (class, threshold) and greedy score-ordered
//! matching. Size strata scale COCO's small/medium/large split to the
//! synthetic image side: small below (side/8)^2, large above (side/4)^2.

use crate::head::{iou, BBox};
use serde::{Deserialize, Serialize};

pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];
const RECALL_POINTS: usize = 101;
const MAX_DETS_PER_IMAGE: usize = 100;

/// AP numbers in percentage points (0..100).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_s: f64,
    pub ap_m: f64,
    pub ap_l: f64,
}

/// (small, large) area cutoffs for an image side.
pub fn area_cutoffs(image_size: usize) -> (f64, f64) {
    let s = image_size as f64;
    ((s / 8.0) * (s / 8.0), (s / 4.0) * (s / 4.0))
}

#[derive(Clone, Copy)]
struct AreaRange {
    lo: f64,
    hi: f64,
}

impl AreaRange {
    fn contains(&self, area: f64) -> bool {
        area >= self.lo && area <= self.hi
    }
}

/// Greedy matching for one (image, class, threshold, area range).
/// Ground truths outside the range are matchable but ignored; detections
/// matched to ignored gts, or unmatched with out-of-range areas, are ignored.
fn match_image(
    dts: &[&BBox],
    gts: &[&BBox],
    thresh: f64,
    range: AreaRange,
) -> (Vec<bool>, Vec<bool>, usize) {
    // sort gts: non-ignored first (stable), as the cutoff rule requires
    let gt_ignore_raw: Vec<bool> = gts.iter().map(|g| !range.contains(g.area() as f64)).collect();
    let mut gt_order: Vec<usize> = (0..gts.len()).collect();
    gt_order.sort_by_key(|&i| gt_ignore_raw[i]);

    let mut gt_matched = vec![false; gts.len()];
    let mut dt_tp = vec![false; dts.len()];
    let mut dt_ignore = vec![false; dts.len()];
    for (di, d) in dts.iter().enumerate() {
        let mut best_iou = thresh.min(1.0 - 1e-10);
        let mut best: Option<usize> = None;
        for &gi in &gt_order {
            if gt_matched[gi] {
                continue;
            }
            // once a real match exists, ignored gts cannot improve it
            if let Some(m) = best {
                if !gt_ignore_raw[m] && gt_ignore_raw[gi] {
                    break;
                }
            }
            let v = iou(d, gts[gi]) as f64;
            if v < best_iou {
                continue;
            }
            best_iou = v;
            best = Some(gi);
        }
        if let Some(gi) = best {
            gt_matched[gi] = true;
            if gt_ignore_raw[gi] {
                dt_ignore[di] = true;
            } else {
                dt_tp[di] = true;
            }
        } else if !range.contains(d.area() as f64) {
            dt_ignore[di] = true;
        }
    }
    let npig = gt_ignore_raw.iter().filter(|&&ig| !ig).count();
    (dt_tp, dt_ignore, npig)
}

/// 101-point interpolated AP from a (tp, ignore) sequence in score order.
fn interpolated_ap(flags: &[(bool, bool)], npig: usize) -> f64 {
    let mut precisions = Vec::new();
    let mut recalls = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(is_tp, ig) in flags {
        if ig {
            continue;
        }
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / npig as f64);
    }
    // monotone non-increasing envelope from the right
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        if precisions[i] < precisions[i + 1] {
            precisions[i] = precisions[i + 1];
        }
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let thr = r as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recalls.partition_point(|&rc| rc < thr);
        if idx < precisions.len() {
            sum += precisions[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

/// Per-(class, threshold) AP for one area range; `None` when the range holds
/// no ground truth of that class.
fn ap_table(
    preds: &[Vec<BBox>],
    gts: &[Vec<BBox>],
    num_classes: usize,
    range: AreaRange,
) -> Vec<Vec<Option<f64>>> {
    assert_eq!(preds.len(), gts.len(), "prediction/gt image counts differ");
    // per image: class-filtered, score-sorted (stable), truncated det lists
    let mut table = vec![vec![None; IOU_THRESHOLDS.len()]; num_classes];
    for class in 0..num_classes {
        let img_dts: Vec<Vec<&BBox>> = preds
            .iter()
            .map(|p| {
                let mut d: Vec<&BBox> = p.iter().filter(|b| b.class_id == class).collect();
                d.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
                d.truncate(MAX_DETS_PER_IMAGE);
                d
            })
            .collect();
        let img_gts: Vec<Vec<&BBox>> = gts
            .iter()
            .map(|g| g.iter().filter(|b| b.class_id == class).collect())
            .collect();
        for (ti, &t) in IOU_THRESHOLDS.iter().enumerate() {
            let mut scored: Vec<(f32, usize, usize, bool, bool)> = Vec::new();
            let mut npig_total = 0usize;
            for img in 0..preds.len() {
                let (tp, ig, npig) = match_image(&img_dts[img], &img_gts[img], t, range);
                npig_total += npig;
                for (di, d) in img_dts[img].iter().enumerate() {
                    scored.push((d.score, img, di, tp[di], ig[di]));
                }
            }
            if npig_total == 0 {
                continue;
            }
            // global stable sort by descending score keeps (image, index) order on ties
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let flags: Vec<(bool, bool)> = scored.iter().map(|s| (s.3, s.4)).collect();
            table[class][ti] = Some(interpolated_ap(&flags, npig_total));
        }
    }
    table
}

fn aggregate(table: &[Vec<Option<f64>>], threshold_idx: Option<usize>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for class_row in table {
        for (ti, ap) in class_row.iter().enumerate() {
            if let Some(idx) = threshold_idx {
                if ti != idx {
                    continue;
                }
            }
            if let Some(v) = ap {
                sum += v;
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        100.0 * sum / n as f64
    }
}

/// COCO-protocol evaluation over per-image predictions and ground truth.
pub fn evaluate_ap(
    preds: &[Vec<BBox>],
    gts: &[Vec<BBox>],
    num_classes: usize,
    image_size: usize,
) -> EvalResult {
    let (small, large) = area_cutoffs(image_size);
    let all = AreaRange { lo: 0.0, hi: f64::INFINITY };
    let table = ap_table(preds, gts, num_classes, all);
    let t_s = ap_table(preds, gts, num_classes, AreaRange { lo: 0.0, hi: small });
    let t_m = ap_table(preds, gts, num_classes, AreaRange { lo: small, hi: large });
    let t_l = ap_table(preds, gts, num_classes, AreaRange { lo: large, hi: f64::INFINITY });
    EvalResult {
        ap: aggregate(&table, None),
        ap50: aggregate(&table, Some(0)),
        ap75: aggregate(&table, Some(5)),
        ap_s: aggregate(&t_s, None),
        ap_m: aggregate(&t_m, None),
        ap_l: aggregate(&t_l, None),
    }
}

// ── Report rows ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub input: String,
    pub result: EvalResult,
}

pub const REPORT_HEADER: &str = "model,input,ap,ap50,ap75,ap_s,ap_m,ap_l";

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.model,
            r.input,
            r.result.ap,
            r.result.ap50,
            r.result.ap75,
            r.result.ap_s,
            r.result.ap_m,
            r.result.ap_l
        ));
    }
    out
}

pub fn parse_report_csv(s: &str) -> crate::Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for (i, line) in s.lines().enumerate() {
        if i == 0 {
            if line != REPORT_HEADER {
                return Err(crate::Error::Config {
                    field: "report csv".into(),
                    constraint: format!("unexpected header `{line}`"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return Err(crate::Error::Config {
                field: "report csv".into(),
                constraint: format!("line {} has {} fields, want 8", i + 1, parts.len()),
            });
        }
        let f = |s: &str| -> crate::Result<f64> {
            s.parse().map_err(|_| crate::Error::Config {
                field: "report csv".into(),
                constraint: format!("bad float `{s}`"),
            })
        };
        rows.push(ReportRow {
            model: parts[0].to_string(),
            input: parts[1].to_string(),
            result: EvalResult {
                ap: f(parts[2])?,
                ap50: f(parts[3])?,
                ap75: f(parts[4])?,
                ap_s: f(parts[5])?,
                ap_m: f(parts[6])?,
                ap_l: f(parts[7])?,
            },
        });
    }
    Ok(rows)
}

/// Fixed-width table mirroring the usual teacher/student AP layout.
pub fn report_table(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:<6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}\n",
        "model", "input", "AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<24} {:<6} {:>6.1} {:>6.1} {:>6.1} {:>6.1} {:>6.1} {:>6.1}\n",
            r.model,
            r.input,
            r.result.ap,
            r.result.ap50,
            r.result.ap75,
            r.result.ap_s,
            r.result.ap_m,
            r.result.ap_l
        ));
    }
    out
}

// ── Independent reference implementation ─────────────────────────────

/// Brute-force evaluator used only to cross-check `evaluate_ap`.
///
/// Matching is found by enumerating every injective detection-to-gt
/// assignment and keeping the unique one consistent with greedy score-order
/// priority; precision/recall points are recomputed from scratch at every
/// prefix. Only all-area AP is supported and scenes must stay small.
pub mod oracle {
    use super::*;

    fn greedy_consistent(
        assignment: &[Option<usize>],
        dts: &[&BBox],
        gts: &[&BBox],
        thresh: f64,
    ) -> bool {
        let mut used: Vec<bool> = vec![false; gts.len()];
        for (di, d) in dts.iter().enumerate() {
            // the best available gt under the tie rule: max IoU >= t, later
            // index replacing on exact ties
            let mut best_iou = thresh.min(1.0 - 1e-10);
            let mut best: Option<usize> = None;
            for (gi, g) in gts.iter().enumerate() {
                if used[gi] {
                    continue;
                }
                let v = iou(d, g) as f64;
                if v < best_iou {
                    continue;
                }
                best_iou = v;
                best = Some(gi);
            }
            if assignment[di] != best {
                return false;
            }
            if let Some(gi) = best {
                used[gi] = true;
            }
        }
        true
    }

    /// All injective assignments of detections to gts-or-none.
    fn enumerate_assignments(n_dts: usize, n_gts: usize) -> Vec<Vec<Option<usize>>> {
        let mut out: Vec<Vec<Option<usize>>> = vec![vec![]];
        for _ in 0..n_dts {
            let mut next = Vec::new();
            for partial in &out {
                for choice in std::iter::once(None).chain((0..n_gts).map(Some)) {
                    if let Some(g) = choice {
                        if partial.contains(&Some(g)) {
                            continue;
                        }
                    }
                    let mut p = partial.clone();
                    p.push(choice);
                    next.push(p);
                }
            }
            out = next;
        }
        out
    }

    fn match_image_by_enumeration(
        dts: &[&BBox],
        gts: &[&BBox],
        thresh: f64,
    ) -> Vec<Option<usize>> {
        assert!(
            dts.len() <= 6 && gts.len() <= 6,
            "oracle enumeration is for small scenes"
        );
        let mut found = None;
        for cand in enumerate_assignments(dts.len(), gts.len()) {
            // every matched pair must clear the threshold
            let valid = cand
                .iter()
                .enumerate()
                .all(|(di, g)| g.map_or(true, |gi| iou(dts[di], gts[gi]) as f64 >= thresh));
            if valid && greedy_consistent(&cand, dts, gts, thresh) {
                assert!(found.is_none(), "greedy-consistent assignment not unique");
                found = Some(cand);
            }
        }
        found.expect("a greedy-consistent assignment always exists")
    }

    pub fn evaluate_ap_oracle(
        preds: &[Vec<BBox>],
        gts: &[Vec<BBox>],
        num_classes: usize,
    ) -> (f64, f64, f64) {
        let mut table: Vec<Vec<Option<f64>>> =
            vec![vec![None; IOU_THRESHOLDS.len()]; num_classes];
        for class in 0..num_classes {
            for (ti, &t) in IOU_THRESHOLDS.iter().enumerate() {
                // per-image matching by enumeration
                let mut scored: Vec<(f32, bool)> = Vec::new();
                let mut npig = 0usize;
                let mut per_image: Vec<Vec<(f32, bool)>> = Vec::new();
                for img in 0..preds.len() {
                    let mut dts: Vec<&BBox> = preds[img]
                        .iter()
                        .filter(|b| b.class_id == class)
                        .collect();
                    dts.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
                    let gt: Vec<&BBox> =
                        gts[img].iter().filter(|b| b.class_id == class).collect();
                    npig += gt.len();
                    let assignment = match_image_by_enumeration(&dts, &gt, t);
                    per_image.push(
                        dts.iter()
                            .enumerate()
                            .map(|(di, d)| (d.score, assignment[di].is_some()))
                            .collect(),
                    );
                }
                if npig == 0 {
                    continue;
                }
                for img_flags in &per_image {
                    scored.extend_from_slice(img_flags);
                }
                scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
                // literal precision/recall: recount the prefix every time
                let mut precisions = Vec::new();
                let mut recalls = Vec::new();
                for k in 1..=scored.len() {
                    let tp = scored[..k].iter().filter(|s| s.1).count();
                    precisions.push(tp as f64 / k as f64);
                    recalls.push(tp as f64 / npig as f64);
                }
                // interpolated precision: max precision at recall >= r
                let mut sum = 0.0;
                for r in 0..RECALL_POINTS {
                    let thr = r as f64 / (RECALL_POINTS - 1) as f64;
                    let mut best = f64::NAN;
                    for k in 0..precisions.len() {
                        if recalls[k] >= thr {
                            let m = precisions[k..]
                                .iter()
                                .cloned()
                                .fold(f64::MIN, f64::max);
                            best = m;
                            break;
                        }
                    }
                    if best.is_finite() {
                        sum += best;
                    }
                }
                table[class][ti] = Some(sum / RECALL_POINTS as f64);
            }
        }
        (
            super::aggregate(&table, None),
            super::aggregate(&table, Some(0)),
            super::aggregate(&table, Some(5)),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn det(x0: f32, y0: f32, side: f32, class: usize, score: f32) -> BBox {
        BBox {
            score,
            ..BBox::new(x0, y0, x0 + side, y0 + side, class)
        }
    }

    #[test]
    fn one_exact_detection_scores_100() {
        let gt = vec![vec![BBox::new(10.0, 10.0, 30.0, 30.0, 0)]];
        let pred = vec![vec![det(10.0, 10.0, 20.0, 0, 0.9)]];
        let r = evaluate_ap(&pred, &gt, 1, 128);
        assert_eq!(r.ap, 100.0);
        assert_eq!(r.ap50, 100.0);
    }

    #[test]
    fn zero_predictions_score_zero() {
        let gt = vec![vec![BBox::new(10.0, 10.0, 30.0, 30.0, 0)]];
        let pred = vec![vec![]];
        let r = evaluate_ap(&pred, &gt, 1, 128);
        assert_eq!(r.ap, 0.0);
    }

    #[test]
    fn lower_scored_duplicate_never_increases_ap() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let gt: Vec<Vec<BBox>> = vec![(0..3)
                .map(|i| {
                    let x = rng.gen_range(0.0..80.0);
                    BBox::new(x, x, x + rng.gen_range(8.0..20.0), x + rng.gen_range(8.0..20.0), i % 2)
                })
                .collect()];
            let preds: Vec<BBox> = gt[0]
                .iter()
                .map(|b| BBox {
                    score: rng.gen_range(0.3..1.0),
                    x1: b.x1 + rng.gen_range(-2.0..2.0),
                    ..*b
                })
                .collect();
            let base = evaluate_ap(&[preds.clone()], &gt, 2, 128).ap;
            let mut with_dup = preds.clone();
            with_dup.push(BBox {
                score: 0.05,
                ..preds[0]
            });
            let dup = evaluate_ap(&[with_dup], &gt, 2, 128).ap;
            assert!(dup <= base + 1e-9, "duplicate raised AP: {dup} > {base}");
        }
    }

    #[test]
    fn ap_is_invariant_to_monotone_score_transforms() {
        let gt = vec![vec![
            BBox::new(5.0, 5.0, 25.0, 25.0, 0),
            BBox::new(50.0, 50.0, 80.0, 80.0, 1),
        ]];
        let preds = vec![vec![
            det(6.0, 5.0, 20.0, 0, 0.8),
            det(48.0, 50.0, 30.0, 1, 0.6),
            det(0.0, 0.0, 10.0, 0, 0.4),
        ]];
        let a = evaluate_ap(&preds, &gt, 2, 128);
        let squashed: Vec<Vec<BBox>> = preds
            .iter()
            .map(|v| {
                v.iter()
                    .map(|b| BBox {
                        score: b.score * b.score * 0.5,
                        ..*b
                    })
                    .collect()
            })
            .collect();
        let b = evaluate_ap(&squashed, &gt, 2, 128);
        assert_eq!(a, b);
    }

    #[test]
    fn matches_enumeration_oracle_on_random_small_scenes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for scene in 0..10 {
            let n_img = 3;
            let mut gts = Vec::new();
            let mut preds = Vec::new();
            for _ in 0..n_img {
                let n_gt = rng.gen_range(1..=3usize);
                let gt: Vec<BBox> = (0..n_gt)
                    .map(|_| {
                        let x = rng.gen_range(0.0..90.0);
                        let y = rng.gen_range(0.0..90.0);
                        BBox::new(
                            x,
                            y,
                            x + rng.gen_range(8.0..30.0),
                            y + rng.gen_range(8.0..30.0),
                            rng.gen_range(0..2),
                        )
                    })
                    .collect();
                let n_pred = rng.gen_range(0..=4usize);
                let pred: Vec<BBox> = (0..n_pred)
                    .map(|i| {
                        if i < gt.len() && rng.gen_bool(0.7) {
                            BBox {
                                score: rng.gen_range(0.1..1.0),
                                x0: gt[i].x0 + rng.gen_range(-4.0..4.0),
                                y0: gt[i].y0 + rng.gen_range(-4.0..4.0),
                                ..gt[i]
                            }
                        } else {
                            let x = rng.gen_range(0.0..90.0);
                            let y = rng.gen_range(0.0..90.0);
                            BBox {
                                score: rng.gen_range(0.1..1.0),
                                ..BBox::new(
                                    x,
                                    y,
                                    x + rng.gen_range(8.0..30.0),
                                    y + rng.gen_range(8.0..30.0),
                                    rng.gen_range(0..2),
                                )
                            }
                        }
                    })
                    .collect();
                gts.push(gt);
                preds.push(pred);
            }
            let fast = evaluate_ap(&preds, &gts, 2, 128);
            let (ap, ap50, ap75) = oracle::evaluate_ap_oracle(&preds, &gts, 2);
            assert_eq!(fast.ap, ap, "scene {scene}: AP mismatch");
            assert_eq!(fast.ap50, ap50, "scene {scene}: AP50 mismatch");
            assert_eq!(fast.ap75, ap75, "scene {scene}: AP75 mismatch");
        }
    }

    #[test]
    fn size_strata_isolate_objects() {
        // 128px image: small < 256 area (side 16), large > 1024 (side 32)
        let gt = vec![vec![
            BBox::new(10.0, 10.0, 20.0, 20.0, 0), // area 100: small
            BBox::new(60.0, 60.0, 100.0, 100.0, 0), // area 1600: large
        ]];
        let preds = vec![vec![
            det(10.0, 10.0, 10.0, 0, 0.9), // exact small
            det(62.0, 60.0, 40.0, 0, 0.8), // near-exact large
        ]];
        let r = evaluate_ap(&preds, &gt, 1, 128);
        assert_eq!(r.ap_s, 100.0);
        assert!(r.ap_l > 50.0);
        assert_eq!(r.ap_m, 0.0); // no medium gt -> excluded, stays 0
    }

    #[test]
    fn report_roundtrip_and_column_order() {
        let rows = vec![
            ReportRow {
                model: "teacher".into(),
                input: "H".into(),
                result: EvalResult {
                    ap: 41.125,
                    ap50: 60.5,
                    ap75: 44.0,
                    ap_s: 20.25,
                    ap_m: 45.0,
                    ap_l: 52.75,
                },
            },
            ReportRow {
                model: "teacher".into(),
                input: "L".into(),
                result: EvalResult {
                    ap: 37.0,
                    ap50: 55.5,
                    ap75: 40.125,
                    ap_s: 15.0,
                    ap_m: 40.5,
                    ap_l: 54.25,
                },
            },
        ];
        let csv = report_csv(&rows);
        assert!(csv.starts_with("model,input,ap,ap50,ap75,ap_s,ap_m,ap_l\n"));
        let parsed = parse_report_csv(&csv).unwrap();
        assert_eq!(parsed, rows);
        // distinct tags render distinct rows
        let table = report_table(&rows);
        assert!(table.contains(" H "));
        assert!(table.contains(" L "));
    }
}
