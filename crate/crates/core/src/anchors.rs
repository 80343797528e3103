//! Anchor-prior estimation by k-means under the `1 - IoU` distance of
//! concentric boxes.
//!
//! The input is reduced to a sorted multiset of distinct shapes before
//! anything random happens, so the result depends only on the multiset and
//! the seed, never on input order. Centroids are updated to the arithmetic
//! mean of their members' `(w, h)`. Under the IoU distance the mean is not the
//! cost minimizer, so the objective can rise on loose clusters (two shapes
//! `0.2` and `0.4` cost less around either member than around `0.3`); on
//! tight, well-separated groups it settles monotonically.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::shape_iou;
use crate::detector::{AnchorSet, ANCHORS_PER_SCALE, NUM_SCALES};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnchorError {
    #[error("box shape ({w}, {h}) must have positive finite extents")]
    Degenerate { w: f64, h: f64 },
    #[error("no shapes to cluster")]
    Empty,
    #[error("k = {k} exceeds the {distinct} distinct shapes")]
    TooFewShapes { k: usize, distinct: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("expected {expected} centroids, got {got}")]
    CentroidCount { expected: usize, got: usize },
    #[error("anchor file line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T, E = AnchorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxShape {
    pub w: f64,
    pub h: f64,
}

impl BoxShape {
    pub fn new(w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
            return Err(AnchorError::Degenerate { w, h });
        }
        Ok(Self { w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    fn total_cmp(&self, other: &Self) -> Ordering {
        self.w.total_cmp(&other.w).then(self.h.total_cmp(&other.h))
    }
}

/// `1 - IoU` of two concentric boxes; 0 for identical shapes, below 1 otherwise.
pub fn shape_distance(a: &BoxShape, b: &BoxShape) -> f64 {
    1.0 - shape_iou(a.w, a.h, b.w, b.h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Sorted by area ascending.
    pub centroids: Vec<BoxShape>,
    /// Centroid index (into `centroids`) for each input shape, in input order.
    pub assignment: Vec<usize>,
    /// Sum of member distances to their (updated) centroid, per iteration.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

struct Distinct {
    shapes: Vec<BoxShape>,
    counts: Vec<usize>,
}

fn distinct(shapes: &[BoxShape]) -> Distinct {
    let mut sorted = shapes.to_vec();
    sorted.sort_by(BoxShape::total_cmp);
    let mut out = Distinct {
        shapes: Vec::new(),
        counts: Vec::new(),
    };
    for s in sorted {
        match out.shapes.last() {
            Some(last) if last.total_cmp(&s) == Ordering::Equal => {
                *out.counts.last_mut().expect("parallel vecs") += 1;
            }
            _ => {
                out.shapes.push(s);
                out.counts.push(1);
            }
        }
    }
    out
}

fn nearest(p: &BoxShape, centroids: &[BoxShape]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(i, c)| (i, shape_distance(p, c)))
        .fold(
            (0, f64::INFINITY),
            |best, cur| if cur.1 < best.1 { cur } else { best },
        )
}

fn weighted_pick(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut r = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            if r < *w {
                return i;
            }
            r -= w;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Independent k-means++ seedings tried per call.
pub const RESTARTS: usize = 10;

fn plus_plus_init(d: &Distinct, k: usize, rng: &mut ChaCha8Rng) -> Vec<BoxShape> {
    let w0: Vec<f64> = d.counts.iter().map(|&c| c as f64).collect();
    let mut centroids = vec![d.shapes[weighted_pick(&w0, rng)]];
    while centroids.len() < k {
        let weights: Vec<f64> = d
            .shapes
            .iter()
            .zip(&d.counts)
            .map(|(s, &c)| {
                let dist = nearest(s, &centroids).1;
                c as f64 * dist * dist
            })
            .collect();
        centroids.push(d.shapes[weighted_pick(&weights, rng)]);
    }
    centroids
}

struct Lloyd {
    centroids: Vec<BoxShape>,
    labels: Vec<usize>,
    history: Vec<f64>,
    iterations: usize,
    converged: bool,
}

impl Lloyd {
    fn final_objective(&self) -> f64 {
        self.history.last().copied().unwrap_or(f64::INFINITY)
    }
}

fn lloyd(d: &Distinct, k: usize, rng: &mut ChaCha8Rng, max_iters: usize) -> Lloyd {
    let mut centroids = plus_plus_init(d, k, rng);
    let mut labels: Vec<usize> = vec![usize::MAX; d.shapes.len()];
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iters {
        iterations += 1;
        let mut changed = false;
        let mut dist_to_own = vec![0.0; d.shapes.len()];
        for (i, s) in d.shapes.iter().enumerate() {
            let (c, dist) = nearest(s, &centroids);
            changed |= labels[i] != c;
            labels[i] = c;
            dist_to_own[i] = dist;
        }

        let mut moved = false;
        for c in 0..k {
            let members: Vec<usize> = (0..d.shapes.len()).filter(|&i| labels[i] == c).collect();
            let next = if members.is_empty() {
                let far = (0..d.shapes.len())
                    .filter(|&i| !centroids.contains(&d.shapes[i]))
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if dist_to_own[b] >= dist_to_own[i] => Some(b),
                        _ => Some(i),
                    });
                match far {
                    Some(i) => {
                        dist_to_own[i] = 0.0;
                        d.shapes[i]
                    }
                    None => continue,
                }
            } else {
                let n: f64 = members.iter().map(|&i| d.counts[i] as f64).sum();
                BoxShape {
                    w: members
                        .iter()
                        .map(|&i| d.counts[i] as f64 * d.shapes[i].w)
                        .sum::<f64>()
                        / n,
                    h: members
                        .iter()
                        .map(|&i| d.counts[i] as f64 * d.shapes[i].h)
                        .sum::<f64>()
                        / n,
                }
            };
            if next != centroids[c] {
                centroids[c] = next;
                moved = true;
            }
        }
        let objective: f64 = (0..d.shapes.len())
            .map(|i| d.counts[i] as f64 * shape_distance(&d.shapes[i], &centroids[labels[i]]))
            .sum();
        history.push(objective);
        if !changed && !moved {
            converged = true;
            break;
        }
    }
    Lloyd {
        centroids,
        labels,
        history,
        iterations,
        converged,
    }
}

/// Lloyd iteration with `1 - IoU` distance and k-means++ seeding, restarted
/// [`RESTARTS`] times from one seeded stream; the run ending at the lowest
/// objective wins.
///
/// An empty cluster is re-seeded at the distinct shape farthest from its
/// current centroid.
pub fn kmeans_anchors(
    shapes: &[BoxShape],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<KMeansResult> {
    if shapes.is_empty() {
        return Err(AnchorError::Empty);
    }
    if k == 0 {
        return Err(AnchorError::ZeroK);
    }
    for s in shapes {
        BoxShape::new(s.w, s.h)?;
    }
    let d = distinct(shapes);
    if k > d.shapes.len() {
        return Err(AnchorError::TooFewShapes {
            k,
            distinct: d.shapes.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Lloyd> = None;
    for _ in 0..RESTARTS {
        let run = lloyd(&d, k, &mut rng, max_iters);
        if best
            .as_ref()
            .is_none_or(|b| run.final_objective() < b.final_objective())
        {
            best = Some(run);
        }
    }
    let Lloyd {
        centroids,
        mut labels,
        history,
        iterations,
        converged,
    } = best.expect("at least one restart");

    // Final assignment against the last centroids, then sort by area.
    for (i, s) in d.shapes.iter().enumerate() {
        labels[i] = nearest(s, &centroids).0;
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        centroids[a]
            .area()
            .total_cmp(&centroids[b].area())
            .then(centroids[a].total_cmp(&centroids[b]))
    });
    let mut rank = vec![0; k];
    for (r, &c) in order.iter().enumerate() {
        rank[c] = r;
    }
    let sorted: Vec<BoxShape> = order.iter().map(|&c| centroids[c]).collect();
    let assignment = shapes
        .iter()
        .map(|s| {
            let i = d
                .shapes
                .binary_search_by(|p| p.total_cmp(s))
                .expect("every input shape is in the distinct set");
            rank[labels[i]]
        })
        .collect();

    Ok(KMeansResult {
        centroids: sorted,
        assignment,
        objective_history: history,
        iterations,
        converged,
    })
}

/// Splits nine centroids by area rank: smallest three to the finest grid,
/// largest three to the coarsest. Equal areas keep input order.
pub fn assign_to_scales(centroids: &[BoxShape]) -> Result<AnchorSet> {
    let total = NUM_SCALES * ANCHORS_PER_SCALE;
    if centroids.len() != total {
        return Err(AnchorError::CentroidCount {
            expected: total,
            got: centroids.len(),
        });
    }
    for c in centroids {
        BoxShape::new(c.w, c.h)?;
    }
    let mut sorted = centroids.to_vec();
    sorted.sort_by(|a, b| a.area().total_cmp(&b.area()));
    let row = |s: usize| [sorted[3 * s], sorted[3 * s + 1], sorted[3 * s + 2]];
    Ok(AnchorSet::new([row(0), row(1), row(2)]).expect("extents validated above"))
}

/// Index `(scale, anchor)` of the prior with the highest shape-IoU; ties go
/// to the earliest prior in scale-major order.
pub fn best_prior(anchors: &AnchorSet, w: f64, h: f64) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_iou = f64::NEG_INFINITY;
    for (s, a, p) in anchors.iter() {
        let v = shape_iou(w, h, p.w, p.h);
        if v > best_iou {
            best_iou = v;
            best = (s, a);
        }
    }
    best
}

/// How many shapes pick each prior as their best match.
pub fn prior_utilization(
    anchors: &AnchorSet,
    shapes: &[BoxShape],
) -> [[usize; ANCHORS_PER_SCALE]; NUM_SCALES] {
    let mut counts = [[0; ANCHORS_PER_SCALE]; NUM_SCALES];
    for s in shapes {
        let (sc, a) = best_prior(anchors, s.w, s.h);
        counts[sc][a] += 1;
    }
    counts
}

/// One `w h` line per prior, finest scale first (area order).
pub fn format_anchor_file(anchors: &AnchorSet) -> String {
    let mut out = String::new();
    for (_, _, p) in anchors.iter() {
        writeln!(out, "{} {}", p.w, p.h).expect("writing to a String");
    }
    out
}

pub fn parse_anchor_file(text: &str) -> Result<AnchorSet> {
    let mut shapes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| AnchorError::Parse { line: i + 1, msg };
        let mut it = line.split_whitespace();
        let mut num = |name: &str| -> Result<f64> {
            it.next()
                .ok_or_else(|| bad(format!("missing {name}")))?
                .parse::<f64>()
                .map_err(|e| bad(format!("{name}: {e}")))
        };
        let (w, h) = (num("w")?, num("h")?);
        if it.next().is_some() {
            return Err(bad("expected exactly two values".into()));
        }
        shapes.push(BoxShape::new(w, h).map_err(|e| bad(e.to_string()))?);
    }
    assign_to_scales(&shapes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bs(w: f64, h: f64) -> BoxShape {
        BoxShape::new(w, h).unwrap()
    }

    #[test]
    fn two_shapes_two_clusters() {
        let mut shapes = vec![bs(0.1, 0.2); 7];
        shapes.extend(vec![bs(0.5, 0.4); 5]);
        let r = kmeans_anchors(&shapes, 2, 3, 100).unwrap();
        assert_eq!(r.centroids, vec![bs(0.1, 0.2), bs(0.5, 0.4)]);
        assert!(r.converged);
        assert_eq!(&r.assignment[..7], &[0; 7]);
        assert_eq!(&r.assignment[7..], &[1; 5]);
    }

    #[test]
    fn single_cluster_takes_the_mean() {
        let r = kmeans_anchors(&[bs(0.2, 0.2), bs(0.4, 0.4)], 1, 0, 100).unwrap();
        assert!((r.centroids[0].w - 0.3).abs() < 1e-15);
        assert!((r.centroids[0].h - 0.3).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert_eq!(kmeans_anchors(&[], 1, 0, 10), Err(AnchorError::Empty));
        assert_eq!(
            kmeans_anchors(&[bs(0.1, 0.1), bs(0.1, 0.1)], 2, 0, 10),
            Err(AnchorError::TooFewShapes { k: 2, distinct: 1 })
        );
        assert!(BoxShape::new(0.0, 0.1).is_err());
        assert!(matches!(
            assign_to_scales(&[bs(0.1, 0.1); 8]),
            Err(AnchorError::CentroidCount { .. })
        ));
    }

    #[test]
    fn scale_split_by_area_rank() {
        let c: Vec<BoxShape> = (1..=9).rev().map(|i| bs(i as f64 * 0.01, 1.0)).collect();
        let set = assign_to_scales(&c).unwrap();
        let areas: Vec<f64> = set.scale(2).iter().map(BoxShape::area).collect();
        assert_eq!(areas, vec![0.07, 0.08, 0.09]);
        let fine: Vec<f64> = set.scale(0).iter().map(BoxShape::area).collect();
        assert_eq!(fine, vec![0.01, 0.02, 0.03]);
    }

    #[test]
    fn equal_centroids_split_deterministically() {
        let c = vec![bs(0.2, 0.2); 9];
        assert_eq!(assign_to_scales(&c).unwrap(), assign_to_scales(&c).unwrap());
    }

    #[test]
    fn anchor_file_round_trip() {
        let c: Vec<BoxShape> = (1..=9)
            .map(|i| bs(i as f64 / 37.0, 0.1 + i as f64 / 91.0))
            .collect();
        let set = assign_to_scales(&c).unwrap();
        let text = format_anchor_file(&set);
        assert_eq!(text.lines().count(), 9);
        assert_eq!(parse_anchor_file(&text).unwrap(), set);
        assert!(matches!(
            parse_anchor_file("0.1 x\n"),
            Err(AnchorError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn utilization_counts_best_matches() {
        let c: Vec<BoxShape> = (1..=9)
            .map(|i| bs(i as f64 * 0.05, i as f64 * 0.05))
            .collect();
        let set = assign_to_scales(&c).unwrap();
        let u = prior_utilization(&set, &[bs(0.05, 0.05), bs(0.051, 0.05), bs(0.45, 0.45)]);
        assert_eq!(u[0][0], 2);
        assert_eq!(u[2][2], 1);
    }

    proptest! {
        #[test]
        fn distance_axioms(aw in 0.01f64..1.0, ah in 0.01f64..1.0, bw in 0.01f64..1.0, bh in 0.01f64..1.0) {
            let (a, b) = (bs(aw, ah), bs(bw, bh));
            prop_assert_eq!(shape_distance(&a, &a), 0.0);
            prop_assert_eq!(shape_distance(&a, &b), shape_distance(&b, &a));
            let d = shape_distance(&a, &b);
            prop_assert!((0.0..1.0).contains(&d));
        }

        #[test]
        fn permutation_invariant(seed in any::<u64>(), raw in prop::collection::vec((0.02f64..0.8, 0.02f64..0.8), 6..30)) {
            let shapes: Vec<BoxShape> = raw.iter().map(|&(w, h)| bs(w, h)).collect();
            let mut rev = shapes.clone();
            rev.reverse();
            let a = kmeans_anchors(&shapes, 3, seed, 50).unwrap();
            let b = kmeans_anchors(&rev, 3, seed, 50).unwrap();
            prop_assert_eq!(&a.centroids, &b.centroids);
            prop_assert_eq!(&a.objective_history, &b.objective_history);
            prop_assert_eq!(a.assignment.iter().rev().collect::<Vec<_>>(), b.assignment.iter().collect::<Vec<_>>());
        }
    }
}
