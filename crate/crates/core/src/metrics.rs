//! IRSTD evaluation: pixel IoU, object-level probability of detection (Pd)
//! and false-alarm rate (Fa).
//!
//! Conventions (configurable where the literature is loose):
//!
//! * components use 8-connectivity;
//! * a ground-truth component counts as detected when some predicted
//!   component matches it under the match rule — by default, predicted
//!   centroid within 3 px of the GT centroid; an overlap-at-least-one-pixel
//!   rule is selectable;
//! * false-alarm pixels are the pixels of predicted components that match
//!   **no** GT component; a matched prediction contributes none, even where
//!   it spills past its target;
//! * dataset IoU sums intersections and unions over all images
//!   (`per_image_iou` switches to the mean of per-image ratios);
//! * Pd with zero targets in the dataset is undefined and reported as such,
//!   never as 1.

use crate::{Error, Result};
use ndarray::Array2;

/// One 8-connected component of a binary mask.
#[derive(Debug, Clone)]
pub struct Component {
    /// `(row, col)` pixels, in row-major scan order.
    pub pixels: Vec<(usize, usize)>,
    pub area: usize,
    /// Mean pixel position `(row, col)`.
    pub centroid: (f64, f64),
}

/// Label the 8-connected components of `mask` (two-pass union-find).
pub fn connected_components(mask: &Array2<bool>) -> Vec<Component> {
    let (h, w) = mask.dim();
    let mut labels = vec![usize::MAX; h * w];
    let mut parent: Vec<usize> = Vec::new();

    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    fn union(parent: &mut Vec<usize>, a: usize, b: usize) {
        let (ra, rb) = (find(parent, a), find(parent, b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            parent[hi] = lo;
        }
    }

    for i in 0..h {
        for j in 0..w {
            if !mask[(i, j)] {
                continue;
            }
            // Previously scanned neighbours: W, NW, N, NE.
            let mut neigh = [usize::MAX; 4];
            let mut nn = 0;
            if j > 0 && mask[(i, j - 1)] {
                neigh[nn] = labels[i * w + j - 1];
                nn += 1;
            }
            if i > 0 {
                if j > 0 && mask[(i - 1, j - 1)] {
                    neigh[nn] = labels[(i - 1) * w + j - 1];
                    nn += 1;
                }
                if mask[(i - 1, j)] {
                    neigh[nn] = labels[(i - 1) * w + j];
                    nn += 1;
                }
                if j + 1 < w && mask[(i - 1, j + 1)] {
                    neigh[nn] = labels[(i - 1) * w + j + 1];
                    nn += 1;
                }
            }
            if nn == 0 {
                let fresh = parent.len();
                parent.push(fresh);
                labels[i * w + j] = fresh;
            } else {
                let first = neigh[0];
                labels[i * w + j] = first;
                for &other in &neigh[1..nn] {
                    union(&mut parent, first, other);
                }
            }
        }
    }

    // Second pass: group pixels by root label.
    let mut root_to_comp: std::collections::BTreeMap<usize, Vec<(usize, usize)>> =
        std::collections::BTreeMap::new();
    for i in 0..h {
        for j in 0..w {
            let l = labels[i * w + j];
            if l != usize::MAX {
                let root = find(&mut parent, l);
                root_to_comp.entry(root).or_default().push((i, j));
            }
        }
    }
    root_to_comp
        .into_values()
        .map(|pixels| {
            let area = pixels.len();
            let (mut sy, mut sx) = (0.0, 0.0);
            for &(i, j) in &pixels {
                sy += i as f64;
                sx += j as f64;
            }
            Component {
                area,
                centroid: (sy / area as f64, sx / area as f64),
                pixels,
            }
        })
        .collect()
}

/// Rule deciding when a predicted component matches a GT component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MatchRule {
    /// Centroids within the given Euclidean distance (pixels).
    CentroidDistance(f64),
    /// At least one shared pixel.
    Overlap,
}

impl Default for MatchRule {
    fn default() -> Self {
        MatchRule::CentroidDistance(3.0)
    }
}

impl MatchRule {
    pub fn name(&self) -> String {
        match self {
            MatchRule::CentroidDistance(d) => format!("centroid<={d}px"),
            MatchRule::Overlap => "overlap>=1px".to_string(),
        }
    }

    fn matches(&self, pred: &Component, gt: &Component, gt_mask: &Array2<bool>) -> bool {
        match self {
            MatchRule::CentroidDistance(d) => {
                let dy = pred.centroid.0 - gt.centroid.0;
                let dx = pred.centroid.1 - gt.centroid.1;
                (dy * dy + dx * dx).sqrt() <= *d
            }
            MatchRule::Overlap => {
                // Cheap check through the GT mask, then confirm which GT
                // component owns an overlapped pixel.
                pred.pixels.iter().any(|&p| gt_mask[p] && gt.pixels.contains(&p))
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalConfig {
    pub match_rule: MatchRule,
    /// Mean of per-image IoU instead of summed intersections/unions.
    pub per_image_iou: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            match_rule: MatchRule::default(),
            per_image_iou: false,
        }
    }
}

/// Per-image tallies backing the dataset aggregates.
#[derive(Debug, Clone)]
pub struct ImageEval {
    pub intersection: u64,
    pub union: u64,
    pub n_targets: u64,
    pub n_detected: u64,
    pub false_pixels: u64,
    pub total_pixels: u64,
}

impl ImageEval {
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

/// Dataset-level evaluation results. `pd` is `None` when the dataset holds
/// no targets at all (0/0 is undefined, not a perfect score).
#[derive(Debug, Clone)]
pub struct DetectionReport {
    pub iou: f64,
    pub pd: Option<f64>,
    pub fa: f64,
    pub n_pred_correct: u64,
    pub n_all_targets: u64,
    pub p_false: u64,
    pub p_all: u64,
    pub per_image: Vec<ImageEval>,
    pub match_rule: MatchRule,
    pub per_image_iou: bool,
}

/// Evaluate aligned `(prediction, ground truth)` binary mask pairs.
pub fn evaluate(pairs: &[(Array2<bool>, Array2<bool>)], cfg: &EvalConfig) -> Result<DetectionReport> {
    let mut per_image = Vec::with_capacity(pairs.len());
    for (idx, (pred, gt)) in pairs.iter().enumerate() {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!(
                "image {idx}: prediction {:?} vs ground truth {:?}",
                pred.dim(),
                gt.dim()
            )));
        }
        let mut intersection = 0u64;
        let mut union = 0u64;
        for (p, g) in pred.iter().zip(gt.iter()) {
            intersection += (*p && *g) as u64;
            union += (*p || *g) as u64;
        }
        let pred_comps = connected_components(pred);
        let gt_comps = connected_components(gt);
        let n_detected = gt_comps
            .iter()
            .filter(|gc| {
                pred_comps
                    .iter()
                    .any(|pc| cfg.match_rule.matches(pc, gc, gt))
            })
            .count() as u64;
        let false_pixels: u64 = pred_comps
            .iter()
            .filter(|pc| !gt_comps.iter().any(|gc| cfg.match_rule.matches(pc, gc, gt)))
            .map(|pc| pc.area as u64)
            .sum();
        per_image.push(ImageEval {
            intersection,
            union,
            n_targets: gt_comps.len() as u64,
            n_detected,
            false_pixels,
            total_pixels: (pred.dim().0 * pred.dim().1) as u64,
        });
    }

    let inter: u64 = per_image.iter().map(|e| e.intersection).sum();
    let uni: u64 = per_image.iter().map(|e| e.union).sum();
    let iou = if cfg.per_image_iou {
        if per_image.is_empty() {
            1.0
        } else {
            per_image.iter().map(|e| e.iou()).sum::<f64>() / per_image.len() as f64
        }
    } else if uni == 0 {
        1.0
    } else {
        inter as f64 / uni as f64
    };
    let n_all_targets: u64 = per_image.iter().map(|e| e.n_targets).sum();
    let n_pred_correct: u64 = per_image.iter().map(|e| e.n_detected).sum();
    let p_false: u64 = per_image.iter().map(|e| e.false_pixels).sum();
    let p_all: u64 = per_image.iter().map(|e| e.total_pixels).sum();
    Ok(DetectionReport {
        iou,
        pd: (n_all_targets > 0).then(|| n_pred_correct as f64 / n_all_targets as f64),
        fa: if p_all == 0 {
            0.0
        } else {
            p_false as f64 / p_all as f64
        },
        n_pred_correct,
        n_all_targets,
        p_false,
        p_all,
        per_image,
        match_rule: cfg.match_rule,
        per_image_iou: cfg.per_image_iou,
    })
}

/// Format a already-scaled metric with two decimals, trimming trailing
/// zeros the way results tables print them: `97.04`, `100`, `6.47`.
pub fn format_metric(x: f64) -> String {
    let s = format!("{x:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

impl DetectionReport {
    /// IoU in units of 1e-2, as printed.
    pub fn iou_scaled(&self) -> String {
        format_metric(self.iou * 100.0)
    }

    /// Pd in units of 1e-2, as printed (`n/a` when undefined).
    pub fn pd_scaled(&self) -> String {
        match self.pd {
            Some(pd) => format_metric(pd * 100.0),
            None => "n/a".to_string(),
        }
    }

    /// Fa in units of 1e-6, as printed.
    pub fn fa_scaled(&self) -> String {
        format_metric(self.fa * 1e6)
    }

    /// Fixed-width table in the conventional units: IoU (1e-2),
    /// Pd (1e-2), Fa (1e-6).
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str("metric        value   units\n");
        out.push_str(&format!("IoU        {:>8}   1e-2\n", self.iou_scaled()));
        out.push_str(&format!("Pd         {:>8}   1e-2\n", self.pd_scaled()));
        out.push_str(&format!("Fa         {:>8}   1e-6\n", self.fa_scaled()));
        out.push_str(&format!(
            "targets    {:>8}   detected {} / {}\n",
            self.n_all_targets, self.n_pred_correct, self.n_all_targets
        ));
        out.push_str(&format!(
            "pixels     {:>8}   false {} / {}\n",
            self.p_all, self.p_false, self.p_all
        ));
        out.push_str(&format!("match rule {:>8}\n", self.match_rule.name()));
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "iou": self.iou,
            "pd": self.pd,
            "fa": self.fa,
            "iou_scaled_1e2": self.iou_scaled(),
            "pd_scaled_1e2": self.pd_scaled(),
            "fa_scaled_1e6": self.fa_scaled(),
            "n_pred_correct": self.n_pred_correct,
            "n_all_targets": self.n_all_targets,
            "p_false": self.p_false,
            "p_all": self.p_all,
            "match_rule": self.match_rule.name(),
            "per_image_iou": self.per_image_iou,
            "per_image": self.per_image.iter().map(|e| serde_json::json!({
                "intersection": e.intersection,
                "union": e.union,
                "iou": e.iou(),
                "n_targets": e.n_targets,
                "n_detected": e.n_detected,
                "false_pixels": e.false_pixels,
                "total_pixels": e.total_pixels,
            })).collect::<Vec<_>>(),
        })
    }
}

/// Threshold a real-valued `[h, w]` map into a binary mask.
pub fn binarize_map(map: &ndarray::ArrayView2<'_, f64>, threshold: f64) -> Array2<bool> {
    map.mapv(|v| v > threshold)
}
