//! Three-scale anchor-based detector with an optional ConvLSTM stack in front
//! of each scale's final 1x1 prediction convolution.
//!
//! Backbone stage `i` is a same-padded 3x3 convolution, leaky ReLU and 2x2
//! max pooling (ceil mode), so a stage halves the grid rounding up. The last
//! three stages feed the detection heads, finest first. Each head is
//! `3x3 conv -> leaky ReLU -> [ConvLSTM stack] -> 1x1 conv` producing
//! `B * (5 + C)` channels per cell, laid out anchor-major as
//! `(t_x, t_y, t_w, t_h, t_o, t_c1 .. t_cC)`.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::BoxShape;
use crate::boxes::{BBox, ClassId};
use crate::convlstm::{
    reborrow, BoundStack, ConvLstmError, ConvLstmStack, ConvLstmState, StateVars,
};
use crate::graph::{BoundConv, Graph, Var};
use crate::params::{join, none_trainable, ParamBinding, Parameters};
use crate::tensor::{sigmoid, ConvKernel, Dims, Tensor4, TensorError};

pub const NUM_SCALES: usize = 3;
pub const ANCHORS_PER_SCALE: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectorError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    ConvLstm(#[from] ConvLstmError),
    #[error("invalid detector config: {0}")]
    Config(String),
    #[error("frame has dims {got}, model expects {expected}")]
    FrameShape { expected: Dims, got: Dims },
    #[error("recurrent model requires per-scale states and a non-recurrent one takes none")]
    StatePresence,
    #[error("expected {expected} anchors per scale, got {got}")]
    Anchors { expected: usize, got: usize },
    #[error("prediction geometry mismatch: {0}")]
    Geometry(String),
}

pub type Result<T, E = DetectorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmConfig {
    pub layers: usize,
    pub kernel: usize,
    pub dropout: f64,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self {
            layers: 1,
            kernel: 3,
            dropout: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    pub in_channels: usize,
    pub backbone_widths: Vec<usize>,
    /// Channels of each head's penultimate map (and of its ConvLSTM). Defaults
    /// to the width of the backbone stage feeding the head.
    pub head_width: Option<usize>,
    /// Grid side per scale, finest first. Must equal the last three backbone
    /// stage sizes.
    pub grid_sizes: [usize; NUM_SCALES],
    pub num_classes: usize,
    pub recurrent: bool,
    pub lstm: LstmConfig,
    pub leaky_slope: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_size: 104,
            in_channels: 3,
            backbone_widths: vec![16, 32, 64, 128, 256],
            head_width: None,
            grid_sizes: [13, 7, 4],
            num_classes: 4,
            recurrent: false,
            lstm: LstmConfig::default(),
            leaky_slope: 0.1,
        }
    }
}

impl DetectorConfig {
    /// Grid side after each backbone stage.
    pub fn stage_sizes(&self) -> Vec<usize> {
        let mut s = self.input_size;
        self.backbone_widths
            .iter()
            .map(|_| {
                s = s.div_ceil(2);
                s
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DetectorError::Config(m));
        if self.input_size == 0 || self.in_channels == 0 || self.num_classes == 0 {
            return bad("input_size, in_channels and num_classes must be positive".into());
        }
        if self.backbone_widths.len() < NUM_SCALES || self.backbone_widths.contains(&0) {
            return bad(format!(
                "need at least {NUM_SCALES} positive backbone widths, got {:?}",
                self.backbone_widths
            ));
        }
        if self.head_width == Some(0) {
            return bad("head_width must be positive".into());
        }
        let sizes = self.stage_sizes();
        let tail = &sizes[sizes.len() - NUM_SCALES..];
        if tail != self.grid_sizes {
            return bad(format!(
                "grid sizes {:?} do not match backbone stage sizes {:?} for input {}",
                self.grid_sizes, tail, self.input_size
            ));
        }
        if !self.grid_sizes.windows(2).all(|w| w[0] > w[1]) {
            return bad(format!(
                "grid sizes {:?} must strictly decrease",
                self.grid_sizes
            ));
        }
        if self.recurrent {
            if self.lstm.layers == 0 {
                return bad("recurrent model needs at least one ConvLSTM layer".into());
            }
            if self.lstm.kernel.is_multiple_of(2) {
                return bad(format!("ConvLSTM kernel {} must be odd", self.lstm.kernel));
            }
            if !(0.0..1.0).contains(&self.lstm.dropout) {
                return bad(format!("dropout {} must be in [0, 1)", self.lstm.dropout));
            }
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return bad(format!("leaky_slope {} must be >= 0", self.leaky_slope));
        }
        Ok(())
    }

    pub fn prediction_channels(&self) -> usize {
        ANCHORS_PER_SCALE * (5 + self.num_classes)
    }

    fn head_channels(&self, scale: usize) -> usize {
        let stage = self.backbone_widths.len() - NUM_SCALES + scale;
        self.head_width.unwrap_or(self.backbone_widths[stage])
    }

    pub fn frame_dims(&self) -> Dims {
        Dims::new(1, self.in_channels, self.input_size, self.input_size)
    }
}

/// Priors per scale, finest scale first, normalized to the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    scales: [[BoxShape; ANCHORS_PER_SCALE]; NUM_SCALES],
}

impl AnchorSet {
    pub fn new(scales: [[BoxShape; ANCHORS_PER_SCALE]; NUM_SCALES]) -> Result<Self> {
        if scales
            .iter()
            .flatten()
            .any(|s| !(s.w > 0.0 && s.h > 0.0 && s.w.is_finite() && s.h.is_finite()))
        {
            return Err(DetectorError::Config(
                "anchor extents must be positive".into(),
            ));
        }
        Ok(Self { scales })
    }

    pub fn scale(&self, s: usize) -> &[BoxShape; ANCHORS_PER_SCALE] {
        &self.scales[s]
    }

    /// `(scale, anchor, shape)` for all nine priors.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, BoxShape)> + '_ {
        self.scales
            .iter()
            .enumerate()
            .flat_map(|(s, row)| row.iter().enumerate().map(move |(a, b)| (s, a, *b)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPrediction {
    pub scale: usize,
    pub grid: usize,
    pub anchors: usize,
    pub classes: usize,
    pub raw: Tensor4,
}

impl GridPrediction {
    pub fn new(scale: usize, classes: usize, raw: Tensor4) -> Result<Self> {
        let d = raw.dims();
        if d.n != 1 || d.h != d.w {
            return Err(DetectorError::Geometry(format!(
                "raw prediction must be (1, C, S, S), got {d}"
            )));
        }
        if !d.c.is_multiple_of(5 + classes) {
            return Err(DetectorError::Geometry(format!(
                "{} channels is not a multiple of 5 + {classes}",
                d.c
            )));
        }
        Ok(Self {
            scale,
            grid: d.h,
            anchors: d.c / (5 + classes),
            classes,
            raw,
        })
    }

    pub fn stride(&self) -> usize {
        5 + self.classes
    }

    /// Raw value of `field` for `anchor` at row `cy`, column `cx`.
    pub fn value(&self, anchor: usize, field: usize, cy: usize, cx: usize) -> f64 {
        self.raw.get(0, anchor * self.stride() + field, cy, cx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: ClassId,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub penultimate: ConvKernel,
    pub lstm: Option<ConvLstmStack>,
    pub output: ConvKernel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorWeights {
    pub backbone: Vec<ConvKernel>,
    pub heads: Vec<HeadWeights>,
}

/// Per-scale recurrent memory.
pub type DetectorState = Vec<ConvLstmState>;

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    config: DetectorConfig,
    weights: DetectorWeights,
}

impl Detector {
    pub fn new(config: DetectorConfig, weights: DetectorWeights) -> Result<Self> {
        config.validate()?;
        let expected = Self::zeros(config.clone())?;
        let mut shapes = Vec::new();
        expected.visit_params("", &mut |n, d, _| shapes.push((n.to_string(), d)));
        let mut got = Vec::new();
        let probe = Self {
            config: config.clone(),
            weights: weights.clone(),
        };
        probe.visit_params("", &mut |n, d, _| got.push((n.to_string(), d)));
        if shapes != got {
            return Err(DetectorError::Config(
                "weights do not match the config geometry".into(),
            ));
        }
        Ok(probe)
    }

    /// All-zero weights with the geometry implied by `config`.
    pub fn zeros(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let mut c_prev = config.in_channels;
        let mut backbone = Vec::new();
        for &w in &config.backbone_widths {
            backbone.push(ConvKernel::zeros(w, c_prev, 3)?);
            c_prev = w;
        }
        let first_head_stage = config.backbone_widths.len() - NUM_SCALES;
        let heads = (0..NUM_SCALES)
            .map(|s| -> Result<HeadWeights> {
                let feat = config.backbone_widths[first_head_stage + s];
                let hw = config.head_channels(s);
                let lstm = if config.recurrent {
                    let layers = (0..config.lstm.layers)
                        .map(|_| crate::convlstm::ConvLstmCell::zeros(hw, hw, config.lstm.kernel))
                        .collect::<Result<_, _>>()?;
                    Some(ConvLstmStack::new(layers, config.lstm.dropout)?)
                } else {
                    None
                };
                Ok(HeadWeights {
                    penultimate: ConvKernel::zeros(hw, feat, 3)?,
                    lstm,
                    output: ConvKernel::zeros(config.prediction_channels(), hw, 1)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            weights: DetectorWeights { backbone, heads },
        })
    }

    /// Uniform ±1/sqrt(fan_in) convolutions; ConvLSTM cells use their own
    /// initialization (forget bias 1).
    pub fn init(config: DetectorConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut det = Self::zeros(config)?;
        let cfg = det.config.clone();
        for k in &mut det.weights.backbone {
            *k = ConvKernel::init_uniform(k.c_out(), k.c_in(), k.k(), rng)?;
        }
        for head in &mut det.weights.heads {
            let p = &head.penultimate;
            head.penultimate = ConvKernel::init_uniform(p.c_out(), p.c_in(), p.k(), rng)?;
            if let Some(stack) = head.lstm.as_mut() {
                let hw = stack.c_in();
                *stack = ConvLstmStack::init(
                    hw,
                    hw,
                    cfg.lstm.kernel,
                    cfg.lstm.layers,
                    cfg.lstm.dropout,
                    rng,
                )?;
            }
            let o = &head.output;
            head.output = ConvKernel::init_uniform(o.c_out(), o.c_in(), o.k(), rng)?;
        }
        Ok(det)
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn weights(&self) -> &DetectorWeights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut DetectorWeights {
        &mut self.weights
    }

    pub fn is_recurrent(&self) -> bool {
        self.config.recurrent
    }

    /// Sum of ConvLSTM parameter counts over all heads.
    pub fn recurrent_parameter_count(&self) -> usize {
        self.weights
            .heads
            .iter()
            .filter_map(|h| h.lstm.as_ref())
            .map(ConvLstmStack::parameter_count)
            .sum()
    }

    pub fn fresh_state(&self) -> Result<Option<DetectorState>> {
        if !self.config.recurrent {
            return Ok(None);
        }
        self.weights
            .heads
            .iter()
            .zip(self.config.grid_sizes)
            .map(|(h, s)| {
                let stack = h.lstm.as_ref().expect("recurrent heads carry a stack");
                Ok(ConvLstmState::fresh(stack, s, s)?)
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    pub fn bind(&self, g: &mut Graph, binding: &mut ParamBinding) -> BoundDetector {
        let backbone = self
            .weights
            .backbone
            .iter()
            .enumerate()
            .map(|(i, k)| binding.conv(g, &format!("backbone.{i}"), k))
            .collect();
        let heads = self
            .weights
            .heads
            .iter()
            .enumerate()
            .map(|(s, h)| {
                let p = format!("head{s}");
                BoundHead {
                    penultimate: binding.conv(g, &join(&p, "conv"), &h.penultimate),
                    lstm: h
                        .lstm
                        .as_ref()
                        .map(|st| st.bind(g, &join(&p, "lstm"), binding)),
                    output: binding.conv(g, &join(&p, "out"), &h.output),
                }
            })
            .collect();
        BoundDetector {
            backbone,
            heads,
            slope: self.config.leaky_slope,
            classes: self.config.num_classes,
        }
    }

    pub fn check_frame(&self, frame: &Tensor4) -> Result<()> {
        let expected = self.config.frame_dims();
        if frame.dims() != expected {
            return Err(DetectorError::FrameShape {
                expected,
                got: frame.dims(),
            });
        }
        Ok(())
    }

    pub fn check_states(&self, states: Option<&DetectorState>) -> Result<()> {
        match (self.config.recurrent, states) {
            (true, Some(st)) => {
                if st.len() != NUM_SCALES {
                    return Err(DetectorError::StatePresence);
                }
                for ((head, s), grid) in self
                    .weights
                    .heads
                    .iter()
                    .zip(st)
                    .zip(self.config.grid_sizes)
                {
                    let stack = head.lstm.as_ref().expect("recurrent heads carry a stack");
                    stack.check_state(s, Dims::new(1, stack.c_in(), grid, grid))?;
                }
                Ok(())
            }
            (false, None) => Ok(()),
            _ => Err(DetectorError::StatePresence),
        }
    }

    /// Inference on one frame. Advances `states` by one step when recurrent.
    pub fn forward(
        &self,
        frame: &Tensor4,
        states: Option<DetectorState>,
    ) -> Result<(Vec<GridPrediction>, Option<DetectorState>)> {
        self.check_frame(frame)?;
        self.check_states(states.as_ref())?;
        let mut g = Graph::new();
        let mut binding = ParamBinding::new(&none_trainable);
        let bound = self.bind(&mut g, &mut binding);
        let x = g.constant(frame.clone());
        let mut vars = states.as_ref().map(|s| bound.constant_states(&mut g, s));
        let outs = bound.forward(&mut g, x, vars.as_deref_mut(), None)?;
        let preds = bound.predictions(&g, &outs)?;
        let states = vars.map(|v| BoundDetector::read_states(&g, &v));
        Ok((preds, states))
    }

    /// The penultimate maps that each head's ConvLSTM (or output conv) consumes.
    pub fn penultimate_features(&self, frame: &Tensor4) -> Result<Vec<Tensor4>> {
        self.check_frame(frame)?;
        let mut g = Graph::new();
        let mut binding = ParamBinding::new(&none_trainable);
        let bound = self.bind(&mut g, &mut binding);
        let x = g.constant(frame.clone());
        let feats = bound.penultimate(&mut g, x)?;
        Ok(feats.into_iter().map(|v| g.value(v).clone()).collect())
    }
}

impl Parameters for Detector {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, Dims, &[f64])) {
        for (i, k) in self.weights.backbone.iter().enumerate() {
            k.visit_params(&join(prefix, &format!("backbone.{i}")), f);
        }
        for (s, h) in self.weights.heads.iter().enumerate() {
            let p = join(prefix, &format!("head{s}"));
            h.penultimate.visit_params(&join(&p, "conv"), f);
            if let Some(st) = &h.lstm {
                st.visit_params(&join(&p, "lstm"), f);
            }
            h.output.visit_params(&join(&p, "out"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Dims, &mut [f64])) {
        for (i, k) in self.weights.backbone.iter_mut().enumerate() {
            k.visit_params_mut(&join(prefix, &format!("backbone.{i}")), f);
        }
        for (s, h) in self.weights.heads.iter_mut().enumerate() {
            let p = join(prefix, &format!("head{s}"));
            h.penultimate.visit_params_mut(&join(&p, "conv"), f);
            if let Some(st) = h.lstm.as_mut() {
                st.visit_params_mut(&join(&p, "lstm"), f);
            }
            h.output.visit_params_mut(&join(&p, "out"), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundHead {
    penultimate: BoundConv,
    lstm: Option<BoundStack>,
    output: BoundConv,
}

#[derive(Debug, Clone)]
pub struct BoundDetector {
    backbone: Vec<BoundConv>,
    heads: Vec<BoundHead>,
    slope: f64,
    classes: usize,
}

impl BoundDetector {
    pub fn constant_states(&self, g: &mut Graph, states: &DetectorState) -> Vec<Vec<StateVars>> {
        self.heads
            .iter()
            .zip(states)
            .map(|(h, s)| {
                h.lstm
                    .as_ref()
                    .expect("recurrent heads carry a stack")
                    .constant_state(g, s)
            })
            .collect()
    }

    pub fn read_states(g: &Graph, vars: &[Vec<StateVars>]) -> DetectorState {
        vars.iter().map(|v| BoundStack::read_state(g, v)).collect()
    }

    fn penultimate(&self, g: &mut Graph, frame: Var) -> Result<Vec<Var>> {
        let mut x = frame;
        let mut stage_out = Vec::with_capacity(self.backbone.len());
        for conv in &self.backbone {
            let c = g.conv2d_same(x, *conv)?;
            let a = g.leaky_relu(c, self.slope);
            x = g.max_pool2(a);
            stage_out.push(x);
        }
        let first = stage_out.len() - NUM_SCALES;
        self.heads
            .iter()
            .enumerate()
            .map(|(s, head)| {
                let c = g.conv2d_same(stage_out[first + s], head.penultimate)?;
                Ok(g.leaky_relu(c, self.slope))
            })
            .collect()
    }

    /// Raw prediction maps per scale. `states`, when present, are advanced
    /// in place.
    pub fn forward(
        &self,
        g: &mut Graph,
        frame: Var,
        states: Option<&mut [Vec<StateVars>]>,
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Vec<Var>> {
        let feats = self.penultimate(g, frame)?;
        let mut states = states;
        let mut outs = Vec::with_capacity(NUM_SCALES);
        for (s, (head, feat)) in self.heads.iter().zip(feats).enumerate() {
            let mut x = feat;
            if let Some(stack) = &head.lstm {
                let st = states.as_deref_mut().ok_or(DetectorError::StatePresence)?;
                x = stack.step(g, x, &mut st[s], reborrow(&mut dropout_rng))?;
            }
            outs.push(g.conv2d_same(x, head.output)?);
        }
        Ok(outs)
    }

    pub fn predictions(&self, g: &Graph, outs: &[Var]) -> Result<Vec<GridPrediction>> {
        outs.iter()
            .enumerate()
            .map(|(s, v)| GridPrediction::new(s, self.classes, g.value(*v).clone()))
            .collect()
    }
}

/// Exponent clamp for size decoding; keeps `exp` finite and positive.
const MAX_LOG_SCALE: f64 = 50.0;

/// Turns one scale's raw map into boxes, one per (cell, anchor).
pub fn decode(pred: &GridPrediction, anchors: &[BoxShape]) -> Result<Vec<Detection>> {
    if anchors.len() != pred.anchors {
        return Err(DetectorError::Anchors {
            expected: pred.anchors,
            got: anchors.len(),
        });
    }
    let s = pred.grid as f64;
    let mut out = Vec::with_capacity(pred.grid * pred.grid * pred.anchors);
    for cy in 0..pred.grid {
        for cx in 0..pred.grid {
            for (a, prior) in anchors.iter().enumerate() {
                let v = |field| pred.value(a, field, cy, cx);
                let bx = (sigmoid(v(0)) + cx as f64) / s;
                let by = (sigmoid(v(1)) + cy as f64) / s;
                let bw = prior.w * v(2).clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
                let bh = prior.h * v(3).clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
                let objectness = sigmoid(v(4));
                let (class_id, class_p) = (0..pred.classes).map(|c| (c, sigmoid(v(5 + c)))).fold(
                    (0, f64::NEG_INFINITY),
                    |best, cur| {
                        if cur.1 > best.1 {
                            cur
                        } else {
                            best
                        }
                    },
                );
                out.push(Detection {
                    bbox: BBox::new(bx, by, bw, bh),
                    class_id: class_id as ClassId,
                    confidence: (objectness * class_p).clamp(0.0, 1.0),
                });
            }
        }
    }
    Ok(out)
}

/// Keeps detections with `confidence >= threshold`, in order.
pub fn filter_confidence(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    dets.iter()
        .filter(|d| d.confidence >= threshold)
        .copied()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(recurrent: bool) -> DetectorConfig {
        DetectorConfig {
            input_size: 16,
            in_channels: 1,
            backbone_widths: vec![2, 3, 4],
            head_width: Some(3),
            grid_sizes: [8, 4, 2],
            num_classes: 2,
            recurrent,
            ..DetectorConfig::default()
        }
    }

    fn pred_with(
        grid: usize,
        classes: usize,
        fill: impl Fn(usize, usize, usize) -> f64,
    ) -> GridPrediction {
        let ch = 5 + classes;
        let mut raw = Tensor4::zeros((1, ch, grid, grid)).unwrap();
        for c in 0..ch {
            for y in 0..grid {
                for x in 0..grid {
                    raw.set(0, c, y, x, fill(c, y, x));
                }
            }
        }
        GridPrediction::new(0, classes, raw).unwrap()
    }

    #[test]
    fn default_config_is_valid() {
        DetectorConfig::default().validate().unwrap();
        assert_eq!(
            DetectorConfig::default().stage_sizes(),
            vec![52, 26, 13, 7, 4]
        );
    }

    #[test]
    fn config_rejects_mismatched_grids() {
        let mut c = small(false);
        c.grid_sizes = [8, 4, 1];
        assert!(matches!(c.validate(), Err(DetectorError::Config(_))));
        let mut c = small(false);
        c.input_size = 2;
        c.grid_sizes = [1, 1, 1];
        assert!(c.validate().is_err());
    }

    #[test]
    fn decode_examples() {
        let anchor = [BoxShape::new(0.1, 0.3).unwrap()];
        let p = pred_with(2, 1, |c, _, _| if c == 2 { 2f64.ln() } else { 0.0 });
        let dets = decode(&p, &anchor).unwrap();
        assert_eq!(dets.len(), 4);
        assert_eq!(dets[0].bbox.cx, 0.25);
        assert_eq!(dets[0].bbox.cy, 0.25);
        assert!((dets[0].bbox.w - 0.2).abs() < 1e-15);
        assert_eq!(dets[0].bbox.h, 0.3);
        assert_eq!(dets[0].confidence, 0.25);
    }

    #[test]
    fn decode_picks_best_class() {
        let anchor = [BoxShape::new(0.2, 0.2).unwrap()];
        let p = pred_with(1, 3, |c, _, _| match c {
            4 => 10.0,
            6 => 3.0,
            7 => -1.0,
            _ => 0.0,
        });
        let d = decode(&p, &anchor).unwrap()[0];
        assert_eq!(d.class_id, 1);
        assert!((d.confidence - sigmoid(10.0) * sigmoid(3.0)).abs() < 1e-15);
    }

    #[test]
    fn filter_examples() {
        let mk = |c| Detection {
            bbox: BBox::new(0.5, 0.5, 0.1, 0.1),
            class_id: 0,
            confidence: c,
        };
        let dets = vec![mk(0.3), mk(0.6), mk(0.9)];
        assert_eq!(filter_confidence(&dets, 0.0), dets);
        let kept: Vec<f64> = filter_confidence(&dets, 0.5)
            .iter()
            .map(|d| d.confidence)
            .collect();
        assert_eq!(kept, vec![0.6, 0.9]);
        assert_eq!(filter_confidence(&[mk(1.0), mk(0.99)], 1.0), vec![mk(1.0)]);
    }

    #[test]
    fn forward_shapes_and_state_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let det = Detector::init(small(true), &mut rng).unwrap();
        let frame = Tensor4::uniform((1, 1, 16, 16), 1.0, &mut rng).unwrap();
        assert_eq!(
            det.forward(&frame, None).unwrap_err(),
            DetectorError::StatePresence
        );
        let (preds, st) = det.forward(&frame, det.fresh_state().unwrap()).unwrap();
        assert_eq!(preds.len(), 3);
        for (p, s) in preds.iter().zip([8, 4, 2]) {
            assert_eq!(p.raw.dims(), Dims::new(1, 3 * 7, s, s));
        }
        assert!(st.is_some());
        let bad = Tensor4::zeros((1, 1, 15, 15)).unwrap();
        assert!(matches!(
            det.forward(&bad, det.fresh_state().unwrap()),
            Err(DetectorError::FrameShape { .. })
        ));
    }

    #[test]
    fn weights_geometry_is_checked() {
        let a = Detector::zeros(small(false)).unwrap();
        let b = Detector::zeros(small(true)).unwrap();
        assert!(Detector::new(small(false), a.weights().clone()).is_ok());
        assert!(Detector::new(small(false), b.weights().clone()).is_err());
    }
}
