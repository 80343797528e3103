//! Target assignment, the composite detection loss and the truncated-BPTT
//! training step.

use std::collections::{BTreeMap, HashMap};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::best_prior;
use crate::boxes::{BoxLabel, ClassId};
use crate::convlstm::reborrow;
use crate::detector::{
    AnchorSet, Detector, DetectorError, DetectorState, GridPrediction, NUM_SCALES,
};
use crate::graph::Graph;
use crate::params::{ParamBinding, Parameters};
use crate::tensor::{sigmoid, Tensor4, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainingError {
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(
        "label {index} is degenerate (non-positive or non-finite extent, or center outside [0, 1])"
    )]
    DegenerateLabel { index: usize },
    #[error("target/prediction geometry mismatch: {0}")]
    Geometry(String),
    #[error("chunk mixes clips {first} and {other}")]
    MixedClips { first: usize, other: usize },
    #[error("chunk frames are not in increasing order at position {0}")]
    Unordered(usize),
    #[error("empty chunk")]
    EmptyChunk,
    #[error("invalid hyperparameter: {0}")]
    Hyper(String),
}

pub type Result<T, E = TrainingError> = std::result::Result<T, E>;

/// The single prediction slot responsible for one ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetAssignment {
    pub label_index: usize,
    pub scale: usize,
    /// Column of the responsible cell, `floor(cx * S)`.
    pub cell_x: usize,
    /// Row of the responsible cell, `floor(cy * S)`.
    pub cell_y: usize,
    pub anchor: usize,
    /// Center offset inside the cell, the target for `σ(t_x)`.
    pub offset_x: f64,
    pub offset_y: f64,
    /// `ln(w / p_w)`, the target for `t_w`.
    pub log_w: f64,
    pub log_h: f64,
    pub class_id: ClassId,
}

impl TargetAssignment {
    fn slot(&self) -> (usize, usize, usize, usize) {
        (self.scale, self.cell_y, self.cell_x, self.anchor)
    }
}

/// A label that lost its slot to an earlier label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedLabel {
    pub label_index: usize,
    pub kept_label: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignments {
    pub assigned: Vec<TargetAssignment>,
    pub dropped: Vec<DroppedLabel>,
}

/// Assigns each label to the prior of highest shape-IoU and to the cell
/// containing its center at that prior's scale. When two labels land on the
/// same slot the earlier one keeps it and the later one is dropped.
pub fn assign_targets(
    labels: &[BoxLabel],
    anchors: &AnchorSet,
    grid_sizes: [usize; NUM_SCALES],
) -> Result<Assignments> {
    let mut out = Assignments::default();
    let mut owner: HashMap<(usize, usize, usize, usize), usize> = HashMap::new();
    for (index, label) in labels.iter().enumerate() {
        let b = label.bbox;
        let valid = b.w > 0.0
            && b.h > 0.0
            && b.w.is_finite()
            && b.h.is_finite()
            && (0.0..=1.0).contains(&b.cx)
            && (0.0..=1.0).contains(&b.cy);
        if !valid {
            return Err(TrainingError::DegenerateLabel { index });
        }
        let (scale, anchor) = best_prior(anchors, b.w, b.h);
        let s = grid_sizes[scale];
        let sf = s as f64;
        let cell_x = ((b.cx * sf).floor() as usize).min(s - 1);
        let cell_y = ((b.cy * sf).floor() as usize).min(s - 1);
        let prior = anchors.scale(scale)[anchor];
        let t = TargetAssignment {
            label_index: index,
            scale,
            cell_x,
            cell_y,
            anchor,
            offset_x: b.cx * sf - cell_x as f64,
            offset_y: b.cy * sf - cell_y as f64,
            log_w: (b.w / prior.w).ln(),
            log_h: (b.h / prior.h).ln(),
            class_id: label.class_id,
        };
        match owner.get(&t.slot()) {
            Some(&kept) => out.dropped.push(DroppedLabel {
                label_index: index,
                kept_label: kept,
            }),
            None => {
                owner.insert(t.slot(), index);
                out.assigned.push(t);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub coord: f64,
    pub obj: f64,
    pub noobj: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            coord: 5.0,
            obj: 1.0,
            noobj: 0.5,
            cls: 1.0,
        }
    }
}

impl LossWeights {
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            coord: self.coord * factor,
            obj: self.obj * factor,
            noobj: self.noobj * factor,
            cls: self.cls * factor,
        }
    }
}

/// Loss components. `confidence` already includes the objectness weights;
/// `total = coord * localization + confidence + cls * classification`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub localization: f64,
    pub confidence: f64,
    pub classification: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn zero(weights: LossWeights) -> Self {
        Self {
            localization: 0.0,
            confidence: 0.0,
            classification: 0.0,
            total: 0.0,
            weights,
        }
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.localization += other.localization;
        self.confidence += other.confidence;
        self.classification += other.classification;
        self.total += other.total;
    }
}

/// Binary cross-entropy on a logit, `-y ln σ(z) - (1-y) ln(1-σ(z))`, in a
/// form that stays finite for large `|z|`.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Loss and its gradient with respect to every raw prediction value.
pub fn detection_loss(
    preds: &[GridPrediction],
    targets: &[TargetAssignment],
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<Tensor4>)> {
    let mut by_slot: HashMap<(usize, usize, usize, usize), &TargetAssignment> = HashMap::new();
    for t in targets {
        let p = preds.get(t.scale).ok_or_else(|| {
            TrainingError::Geometry(format!(
                "target scale {} but {} predictions",
                t.scale,
                preds.len()
            ))
        })?;
        if t.cell_x >= p.grid || t.cell_y >= p.grid || t.anchor >= p.anchors {
            return Err(TrainingError::Geometry(format!(
                "target slot (cell {}x{}, anchor {}) outside a {}x{} grid with {} anchors",
                t.cell_x, t.cell_y, t.anchor, p.grid, p.grid, p.anchors
            )));
        }
        if t.class_id as usize >= p.classes {
            return Err(TrainingError::Geometry(format!(
                "class {} but only {} classes",
                t.class_id, p.classes
            )));
        }
        if by_slot.insert(t.slot(), t).is_some() {
            return Err(TrainingError::Geometry(format!(
                "two targets share slot {:?}",
                t.slot()
            )));
        }
    }

    let mut loc = 0.0;
    let mut obj = 0.0;
    let mut noobj = 0.0;
    let mut cls = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for p in preds {
        let mut g = p.raw.zeros_like();
        let stride = p.stride();
        for cy in 0..p.grid {
            for cx in 0..p.grid {
                for a in 0..p.anchors {
                    let base = a * stride;
                    let v = |f: usize| p.raw.get(0, base + f, cy, cx);
                    let to = v(4);
                    match by_slot.get(&(p.scale, cy, cx, a)) {
                        None => {
                            noobj += bce_with_logit(to, 0.0);
                            g.set(0, base + 4, cy, cx, weights.noobj * sigmoid(to));
                        }
                        Some(t) => {
                            obj += bce_with_logit(to, 1.0);
                            g.set(0, base + 4, cy, cx, weights.obj * (sigmoid(to) - 1.0));

                            let (sx, sy) = (sigmoid(v(0)), sigmoid(v(1)));
                            let (dx, dy) = (sx - t.offset_x, sy - t.offset_y);
                            let (dw, dh) = (v(2) - t.log_w, v(3) - t.log_h);
                            loc += dx * dx + dy * dy + dw * dw + dh * dh;
                            let c = weights.coord;
                            g.set(0, base, cy, cx, c * 2.0 * dx * sx * (1.0 - sx));
                            g.set(0, base + 1, cy, cx, c * 2.0 * dy * sy * (1.0 - sy));
                            g.set(0, base + 2, cy, cx, c * 2.0 * dw);
                            g.set(0, base + 3, cy, cx, c * 2.0 * dh);

                            for k in 0..p.classes {
                                let y = if k == t.class_id as usize { 1.0 } else { 0.0 };
                                let z = v(5 + k);
                                cls += bce_with_logit(z, y);
                                g.set(0, base + 5 + k, cy, cx, weights.cls * (sigmoid(z) - y));
                            }
                        }
                    }
                }
            }
        }
        grads.push(g);
    }
    let confidence = weights.obj * obj + weights.noobj * noobj;
    let breakdown = LossBreakdown {
        localization: loc,
        confidence,
        classification: cls,
        total: weights.coord * loc + confidence + weights.cls * cls,
        weights: *weights,
    };
    Ok((breakdown, grads))
}

/// SGD with momentum: `v = μ v + g`, `θ -= lr v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdMomentum {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Rescale the full gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(learning_rate: f64, momentum: f64, clip_norm: Option<f64>) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(TrainingError::Hyper(format!(
                "learning rate {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(TrainingError::Hyper(format!("momentum {momentum}")));
        }
        if clip_norm.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return Err(TrainingError::Hyper(format!("clip_norm {clip_norm:?}")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            clip_norm,
            velocity: BTreeMap::new(),
        })
    }

    /// Applies one update to every parameter named in `grads`.
    pub fn apply(&mut self, model: &mut impl Parameters, grads: &BTreeMap<String, Tensor4>) {
        let norm = grads
            .values()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let (lr, mu) = (self.learning_rate, self.momentum);
        let velocity = &mut self.velocity;
        model.visit_params_mut("", &mut |name, _, data| {
            let Some(g) = grads.get(name) else { return };
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; data.len()]);
            for ((p, vi), gi) in data.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vi = mu * *vi + scale * gi;
                *p -= lr * *vi;
            }
        });
    }
}

/// One frame of training data.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    pub clip_id: usize,
    pub frame_index: usize,
    pub image: Tensor4,
    pub labels: Vec<BoxLabel>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepConfig {
    pub loss: LossWeights,
    /// Parameter-name prefixes excluded from updates.
    pub frozen: Vec<String>,
}

impl StepConfig {
    pub fn is_trainable(&self, name: &str) -> bool {
        !self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Sum over the chunk's frames.
    pub loss: LossBreakdown,
    pub per_frame: Vec<LossBreakdown>,
    pub states: Option<DetectorState>,
    pub dropped_labels: usize,
}

fn check_chunk(frames: &[FrameSample], recurrent: bool) -> Result<()> {
    let first = frames.first().ok_or(TrainingError::EmptyChunk)?;
    if !recurrent {
        return Ok(());
    }
    for (i, f) in frames.iter().enumerate().skip(1) {
        if f.clip_id != first.clip_id {
            return Err(TrainingError::MixedClips {
                first: first.clip_id,
                other: f.clip_id,
            });
        }
        if f.frame_index <= frames[i - 1].frame_index {
            return Err(TrainingError::Unordered(i));
        }
    }
    Ok(())
}

/// Forward pass over a chunk, recording the per-frame loss and the seeds for
/// backpropagation. Shared by [`train_step`] and [`chunk_loss`].
struct ChunkPass<'a> {
    graph: Graph,
    binding: ParamBinding<'a>,
    loss: LossBreakdown,
    per_frame: Vec<LossBreakdown>,
    seeds: Vec<(crate::graph::Var, Tensor4)>,
    states: Option<DetectorState>,
    dropped: usize,
}

fn run_chunk<'a>(
    model: &Detector,
    frames: &[FrameSample],
    states: Option<DetectorState>,
    anchors: &AnchorSet,
    config: &StepConfig,
    trainable: &'a dyn Fn(&str) -> bool,
    mut dropout_rng: Option<&mut dyn RngCore>,
) -> Result<ChunkPass<'a>> {
    check_chunk(frames, model.is_recurrent())?;
    let states = match states {
        Some(s) => Some(s),
        None if model.is_recurrent() => model.fresh_state()?,
        None => None,
    };
    model.check_states(states.as_ref())?;
    let mut graph = Graph::new();
    let mut binding = ParamBinding::new(trainable);
    let bound = model.bind(&mut graph, &mut binding);
    let mut state_vars = states
        .as_ref()
        .map(|s| bound.constant_states(&mut graph, s));
    let mut loss = LossBreakdown::zero(config.loss);
    let mut per_frame = Vec::with_capacity(frames.len());
    let mut seeds = Vec::new();
    let mut dropped = 0;
    for f in frames {
        model.check_frame(&f.image)?;
        let x = graph.constant(f.image.clone());
        let outs = bound.forward(
            &mut graph,
            x,
            state_vars.as_deref_mut(),
            reborrow(&mut dropout_rng),
        )?;
        let preds = bound.predictions(&graph, &outs)?;
        let targets = assign_targets(&f.labels, anchors, model.config().grid_sizes)?;
        dropped += targets.dropped.len();
        let (fl, grads) = detection_loss(&preds, &targets.assigned, &config.loss)?;
        loss.accumulate(&fl);
        per_frame.push(fl);
        seeds.extend(outs.into_iter().zip(grads));
    }
    let states = state_vars.map(|v| crate::detector::BoundDetector::read_states(&graph, &v));
    Ok(ChunkPass {
        graph,
        binding,
        loss,
        per_frame,
        seeds,
        states,
        dropped,
    })
}

/// Summed loss over a chunk and its gradient for every trainable parameter.
/// Carried state is a constant, so nothing flows into earlier chunks.
pub fn chunk_gradients(
    model: &Detector,
    frames: &[FrameSample],
    states: Option<DetectorState>,
    anchors: &AnchorSet,
    config: &StepConfig,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<(StepOutcome, BTreeMap<String, Tensor4>)> {
    let trainable = |n: &str| config.is_trainable(n);
    let pass = run_chunk(
        model,
        frames,
        states,
        anchors,
        config,
        &trainable,
        dropout_rng,
    )?;
    let grads = pass.graph.backward(pass.seeds)?;
    let grads = pass
        .binding
        .collect(&grads)
        .into_iter()
        .filter(|(n, _)| config.is_trainable(n))
        .collect();
    Ok((
        StepOutcome {
            loss: pass.loss,
            per_frame: pass.per_frame,
            states: pass.states,
            dropped_labels: pass.dropped,
        },
        grads,
    ))
}

/// Loss of a chunk without gradients.
pub fn chunk_loss(
    model: &Detector,
    frames: &[FrameSample],
    states: Option<DetectorState>,
    anchors: &AnchorSet,
    config: &StepConfig,
) -> Result<StepOutcome> {
    let none = |_: &str| false;
    let pass = run_chunk(model, frames, states, anchors, config, &none, None)?;
    Ok(StepOutcome {
        loss: pass.loss,
        per_frame: pass.per_frame,
        states: pass.states,
        dropped_labels: pass.dropped,
    })
}

/// Forward over a chunk, backpropagate through the chunk only, apply one
/// optimizer update and hand back the advanced states.
///
/// For recurrent models the chunk must be ordered frames of a single clip;
/// non-recurrent models accept any frame batch.
pub fn train_step(
    model: &mut Detector,
    frames: &[FrameSample],
    states: Option<DetectorState>,
    optimizer: &mut SgdMomentum,
    anchors: &AnchorSet,
    config: &StepConfig,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<StepOutcome> {
    let (outcome, grads) = chunk_gradients(model, frames, states, anchors, config, dropout_rng)?;
    optimizer.apply(model, &grads);
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{assign_to_scales, BoxShape};
    use crate::tensor::{numeric_gradient, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn anchors() -> AnchorSet {
        let c: Vec<BoxShape> = (1..=9)
            .map(|i| BoxShape::new(0.04 * i as f64, 0.05 * i as f64).unwrap())
            .collect();
        assign_to_scales(&c).unwrap()
    }

    #[test]
    fn perfect_prior_assignment() {
        let set = anchors();
        let p = set.scale(1)[2];
        let labels = [BoxLabel::new(3, 0.5, 0.5, p.w, p.h)];
        let a = assign_targets(&labels, &set, [13, 7, 4]).unwrap();
        let t = a.assigned[0];
        assert_eq!((t.scale, t.anchor, t.cell_x, t.cell_y), (1, 2, 3, 3));
        assert_eq!((t.offset_x, t.offset_y), (0.5, 0.5));
        assert_eq!((t.log_w, t.log_h), (0.0, 0.0));
        assert_eq!(t.class_id, 3);
    }

    #[test]
    fn double_size_label_gets_ln2_targets() {
        // Brute force over all nine priors: (0.72, 0.9) = 2x the largest
        // prior (0.36, 0.45); its shape-IoU (0.25) beats every other prior.
        let set = anchors();
        let (w, h) = (0.72, 0.9);
        let ious: Vec<f64> = set
            .iter()
            .map(|(_, _, p)| crate::boxes::shape_iou(w, h, p.w, p.h))
            .collect();
        let best = ious.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(ious.iter().position(|&v| v == best), Some(8));
        let a = assign_targets(&[BoxLabel::new(0, 0.3, 0.6, w, h)], &set, [13, 7, 4]).unwrap();
        let t = a.assigned[0];
        assert_eq!((t.scale, t.anchor), (2, 2));
        assert!((t.log_w - 2f64.ln()).abs() < 1e-15);
        assert!((t.log_h - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn collisions_keep_the_first_label() {
        let set = anchors();
        let l = BoxLabel::new(1, 0.4, 0.4, 0.1, 0.1);
        let a = assign_targets(&[l, l], &set, [13, 7, 4]).unwrap();
        assert_eq!(a.assigned.len(), 1);
        assert_eq!(a.assigned[0].label_index, 0);
        assert_eq!(
            a.dropped,
            vec![DroppedLabel {
                label_index: 1,
                kept_label: 0
            }]
        );
    }

    #[test]
    fn degenerate_label_is_rejected_with_index() {
        let set = anchors();
        let labels = [
            BoxLabel::new(0, 0.5, 0.5, 0.1, 0.1),
            BoxLabel::new(0, 0.5, 0.5, 0.0, 0.1),
        ];
        assert_eq!(
            assign_targets(&labels, &set, [13, 7, 4]),
            Err(TrainingError::DegenerateLabel { index: 1 })
        );
    }

    fn pred(
        grid: usize,
        anchors: usize,
        classes: usize,
        fill: impl Fn(usize) -> f64,
    ) -> GridPrediction {
        let ch = anchors * (5 + classes);
        let data = (0..ch * grid * grid).map(fill).collect();
        GridPrediction::new(
            0,
            classes,
            Tensor4::from_vec((1, ch, grid, grid), data).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn half_confidence_everywhere_costs_ln2_per_slot() {
        let w = LossWeights::default();
        let p = pred(3, 2, 2, |_| 0.0);
        let (l, _) = detection_loss(&[p], &[], &w).unwrap();
        let slots = 3.0 * 3.0 * 2.0;
        assert!((l.confidence - w.noobj * slots * 2f64.ln()).abs() < 1e-12);
        assert_eq!(l.total, l.confidence);
        let p = pred(3, 2, 2, |_| -60.0);
        let (l, _) = detection_loss(&[p], &[], &w).unwrap();
        assert!(l.total < 1e-24);
    }

    #[test]
    fn perfect_fit_costs_nothing() {
        let w = LossWeights::default();
        let big = 60.0;
        let t = TargetAssignment {
            label_index: 0,
            scale: 0,
            cell_x: 0,
            cell_y: 0,
            anchor: 0,
            offset_x: 0.5,
            offset_y: 0.5,
            log_w: 0.3,
            log_h: -0.2,
            class_id: 0,
        };
        let p = pred(1, 1, 2, |i| match i {
            2 => 0.3,
            3 => -0.2,
            4 | 5 => big,
            6 => -big,
            _ => 0.0,
        });
        let (l, _) = detection_loss(&[p], &[t], &w).unwrap();
        assert!(l.total < 1e-24, "{l:?}");
    }

    #[test]
    fn loss_gradient_matches_central_differences() {
        // 2x2 grid, 1 class, 1 anchor.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = LossWeights::default();
        let raw = Tensor4::uniform((1, 6, 2, 2), 2.0, &mut rng).unwrap();
        let t = TargetAssignment {
            label_index: 0,
            scale: 0,
            cell_x: 1,
            cell_y: 0,
            anchor: 0,
            offset_x: 0.3,
            offset_y: 0.8,
            log_w: 0.4,
            log_h: -0.1,
            class_id: 0,
        };
        let eval = |data: &[f64]| {
            let p = GridPrediction::new(
                0,
                1,
                Tensor4::from_vec((1, 6, 2, 2), data.to_vec()).unwrap(),
            )
            .unwrap();
            detection_loss(&[p], &[t], &w).unwrap()
        };
        let (_, g) = eval(raw.data());
        let n = numeric_gradient(|d| eval(d).0.total, raw.data(), 1e-5).unwrap();
        for (a, b) in g[0].data().iter().zip(&n) {
            assert!(relative_error(*a, *b) <= 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let w = LossWeights::default();
        let t = TargetAssignment {
            label_index: 0,
            scale: 1,
            cell_x: 0,
            cell_y: 0,
            anchor: 0,
            offset_x: 0.5,
            offset_y: 0.5,
            log_w: 0.0,
            log_h: 0.0,
            class_id: 0,
        };
        let p = pred(2, 1, 1, |_| 0.0);
        assert!(matches!(
            detection_loss(&[p], &[t], &w),
            Err(TrainingError::Geometry(_))
        ));
    }

    #[test]
    fn bce_is_stable() {
        assert!((bce_with_logit(0.0, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!(bce_with_logit(800.0, 0.0).is_finite());
        assert!(bce_with_logit(-800.0, 1.0).is_finite());
        assert!(bce_with_logit(-800.0, 0.0) < 1e-300);
    }
}
