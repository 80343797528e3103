//! End-to-end commands: synthesize, prepare, estimate anchors, train and
//! evaluate. Every command is a function of the run configuration and the
//! files it reads; artifacts carry no timestamps.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::anchors::{
    assign_to_scales, format_anchor_file, kmeans_anchors, parse_anchor_file, prior_utilization,
    AnchorError, BoxShape,
};
use crate::boxes::{BoxLabel, ClassId};
use crate::checkpoint::{load_detector, save_detector, CheckpointError, WeightFile};
use crate::clips::{
    chunk_clip, class_histogram, format_manifest, materialize, parse_annotations, parse_manifest,
    reduction_stats, segment_all, sparse_subsample, split_clips, ClipError, ClipRecord, ClipSpan,
    SegmentConfig, VideoAnnotations,
};
use crate::detector::{
    decode, AnchorSet, Detection, Detector, DetectorConfig, DetectorError, DetectorState,
};
use crate::frames::{FrameArchive, FrameError};
use crate::metrics::{evaluate, EvalConfig, EvalReport, FrameRecord, MetricsError};
use crate::synth::{generate, SynthConfig, SynthError};
use crate::tensor::Tensor4;
use crate::training::{
    train_step, FrameSample, LossWeights, SgdMomentum, StepConfig, TrainingError,
};

pub const CLIPS_FILE: &str = "clips.txt";
pub const TRAIN_FILE: &str = "train.txt";
pub const VAL_FILE: &str = "val.txt";
pub const PREPARE_REPORT: &str = "prepare_report.json";
pub const ANCHOR_FILE: &str = "anchors.txt";
pub const ANCHOR_REPORT: &str = "anchors_report.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const EVAL_LOG: &str = "eval_metrics.jsonl";
pub const SYNTH_ANNOTATIONS: &str = "annotations.txt";
pub const SYNTH_FRAMES: &str = "frames.bin";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("config: {0}")]
    Config(String),
    #[error("missing input {0}")]
    MissingInput(PathBuf),
    #[error(transparent)]
    Clips(#[from] ClipError),
    #[error(transparent)]
    Anchors(#[from] AnchorError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Frames(#[from] FrameError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

impl PipelineError {
    /// Stable, machine-readable category.
    pub fn class(&self) -> &'static str {
        match self {
            Self::Io { .. } => "io",
            Self::Config(_) => "config",
            Self::MissingInput(_) => "missing-input",
            Self::Clips(ClipError::Parse { .. }) => "annotation-parse",
            Self::Clips(_) => "clips",
            Self::Anchors(_) => "anchors",
            Self::Detector(_) => "model",
            Self::Training(_) => "training",
            Self::Checkpoint(CheckpointError::Geometry { .. })
            | Self::Checkpoint(CheckpointError::Missing(_))
            | Self::Checkpoint(CheckpointError::Unexpected(_)) => "checkpoint-geometry",
            Self::Checkpoint(_) => "checkpoint",
            Self::Frames(_) => "frames",
            Self::Metrics(_) => "metrics",
            Self::Synth(_) => "synth",
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(PipelineError::MissingInput(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    write_text(path, &s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub annotations: PathBuf,
    pub frames: PathBuf,
    /// Directory receiving every artifact.
    pub out: PathBuf,
    /// Weights to evaluate; defaults to the run's own checkpoint.
    pub checkpoint: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            annotations: PathBuf::from("data").join(SYNTH_ANNOTATIONS),
            frames: PathBuf::from("data").join(SYNTH_FRAMES),
            out: PathBuf::from("run"),
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Frames per training subsequence.
    pub chunk_len: usize,
    /// Keep one frame in `subsample`.
    pub subsample: usize,
    pub val_fraction: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            chunk_len: 16,
            subsample: 1,
            val_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    pub max_iters: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self { max_iters: 300 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    /// Stop each epoch after this many optimizer steps.
    pub max_steps_per_epoch: Option<usize>,
    /// Start from these weights; parameters missing on either side keep
    /// their initialization, shared ones must match in shape.
    pub init_from: Option<PathBuf>,
    pub loss: LossWeights,
    /// Parameter-name prefixes left untouched by the optimizer.
    pub frozen: Vec<String>,
}

impl TrainConfig {
    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            loss: self.loss,
            frozen: self.frozen.clone(),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            learning_rate: 1e-3,
            momentum: 0.9,
            clip_norm: Some(10.0),
            max_steps_per_epoch: None,
            init_from: None,
            loss: LossWeights::default(),
            frozen: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Required by `eval`; there is no default.
    pub confidence_threshold: Option<f64>,
    pub nms_iou: f64,
    pub match_iou: f64,
    /// Class-frequency cut-offs for the aggregate metrics.
    pub top_k: Vec<usize>,
    /// Replay the ground truth as detections instead of running a model.
    pub playback: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            confidence_threshold: None,
            nms_iou: 0.5,
            match_iou: 0.5,
            top_k: vec![5, 24],
            playback: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub segment: SegmentConfig,
    pub pipeline: PipelineConfig,
    pub anchors: AnchorConfig,
    pub model: DetectorConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_text(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Path of an artifact inside the output directory.
    pub fn out(&self, name: &str) -> PathBuf {
        self.paths.out.join(name)
    }

    fn ensure_out(&self) -> Result<()> {
        fs::create_dir_all(&self.paths.out).map_err(io_err(&self.paths.out))
    }

    fn sub_seed(&self, stream: u64) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng.next_u64()
    }
}

const STREAM_SPLIT: u64 = 1;
const STREAM_ANCHORS: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_DROPOUT: u64 = 4;
const STREAM_SHUFFLE: u64 = 100;

/// Writes `annotations.txt` and `frames.bin` into the output directory.
pub fn cmd_synth(config: &RunConfig) -> Result<()> {
    let data = generate(&config.synth, config.seed)?;
    config.ensure_out()?;
    write_text(
        &config.out(SYNTH_ANNOTATIONS),
        &crate::clips::format_annotations(&data.annotations),
    )?;
    data.frames.save(&config.out(SYNTH_FRAMES))?;
    Ok(())
}

fn load_annotations(config: &RunConfig) -> Result<Vec<VideoAnnotations>> {
    Ok(parse_annotations(&read_text(&config.paths.annotations)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareReport {
    pub clips: usize,
    pub train_clips: usize,
    pub val_clips: usize,
    pub class_counts: std::collections::BTreeMap<ClassId, usize>,
    pub top_k: Vec<(usize, Vec<ClassId>)>,
    pub total_frames: usize,
    pub kept_frames: usize,
    pub reduction: f64,
}

/// Segments the annotations into clips and splits them into train and
/// validation manifests.
pub fn cmd_prepare(config: &RunConfig) -> Result<PrepareReport> {
    let videos = load_annotations(config)?;
    let clips = segment_all(&videos, &config.segment)?;
    let spans: Vec<ClipSpan> = clips.iter().map(ClipRecord::span).collect();
    let (train, val) = split_clips(
        spans.clone(),
        config.pipeline.val_fraction,
        config.sub_seed(STREAM_SPLIT),
    )?;
    let hist = class_histogram(&clips);
    let stats = reduction_stats(&videos, &clips);
    let report = PrepareReport {
        clips: spans.len(),
        train_clips: train.len(),
        val_clips: val.len(),
        top_k: config
            .eval
            .top_k
            .iter()
            .map(|&k| (k, hist.top_k(k)))
            .collect(),
        class_counts: hist.counts,
        total_frames: stats.total_frames,
        kept_frames: stats.kept_frames,
        reduction: stats.reduction(),
    };
    config.ensure_out()?;
    write_text(&config.out(CLIPS_FILE), &format_manifest(&spans))?;
    write_text(&config.out(TRAIN_FILE), &format_manifest(&train))?;
    write_text(&config.out(VAL_FILE), &format_manifest(&val))?;
    write_json(&config.out(PREPARE_REPORT), &report)?;
    Ok(report)
}

fn load_clips(
    config: &RunConfig,
    manifest: &str,
    videos: &[VideoAnnotations],
) -> Result<Vec<ClipRecord>> {
    let spans = parse_manifest(&read_text(&config.out(manifest))?)?;
    spans
        .iter()
        .map(|s| {
            let clip = materialize(s, videos)?;
            Ok(if config.pipeline.subsample > 1 {
                sparse_subsample(&clip, config.pipeline.subsample)?
            } else {
                clip
            })
        })
        .collect()
}

/// Label shapes of the distinct frames covered by `clips`.
pub fn label_shapes(clips: &[ClipRecord]) -> Result<Vec<BoxShape>> {
    let mut seen = BTreeSet::new();
    let mut shapes = Vec::new();
    for c in clips {
        for f in &c.frames {
            if seen.insert((c.video_id.as_str(), f.frame_index)) {
                for l in &f.labels {
                    shapes.push(BoxShape::new(l.bbox.w, l.bbox.h)?);
                }
            }
        }
    }
    Ok(shapes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorReport {
    pub shapes: usize,
    pub priors: Vec<BoxShape>,
    pub utilization: Vec<Vec<usize>>,
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Nine k-means priors from the training clips' label shapes.
pub fn cmd_anchors(config: &RunConfig) -> Result<AnchorSet> {
    let videos = load_annotations(config)?;
    let clips = load_clips(config, TRAIN_FILE, &videos)?;
    let shapes = label_shapes(&clips)?;
    let km = kmeans_anchors(
        &shapes,
        9,
        config.sub_seed(STREAM_ANCHORS),
        config.anchors.max_iters,
    )?;
    let set = assign_to_scales(&km.centroids)?;
    let report = AnchorReport {
        shapes: shapes.len(),
        priors: set.iter().map(|(_, _, p)| p).collect(),
        utilization: prior_utilization(&set, &shapes)
            .iter()
            .map(|r| r.to_vec())
            .collect(),
        objective_history: km.objective_history,
        iterations: km.iterations,
        converged: km.converged,
    };
    config.ensure_out()?;
    write_text(&config.out(ANCHOR_FILE), &format_anchor_file(&set))?;
    write_json(&config.out(ANCHOR_REPORT), &report)?;
    Ok(set)
}

fn load_anchors(config: &RunConfig) -> Result<AnchorSet> {
    Ok(parse_anchor_file(&read_text(&config.out(ANCHOR_FILE))?)?)
}

fn load_frames(config: &RunConfig) -> Result<FrameArchive> {
    if !config.paths.frames.exists() {
        return Err(PipelineError::MissingInput(config.paths.frames.clone()));
    }
    Ok(FrameArchive::load(&config.paths.frames)?)
}

fn sample(
    frames: &FrameArchive,
    clip_id: usize,
    clip: &ClipRecord,
    i: usize,
) -> Result<FrameSample> {
    let f = &clip.frames[i];
    Ok(FrameSample {
        clip_id,
        frame_index: f.frame_index,
        image: frames.tensor(&clip.video_id, f.frame_index)?,
        labels: f.labels.clone(),
    })
}

/// Fresh weights, or weights ported from `train.init_from`.
pub fn initial_model(config: &RunConfig) -> Result<Detector> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.sub_seed(STREAM_INIT));
    let mut model = Detector::init(config.model.clone(), &mut rng)?;
    if let Some(path) = &config.train.init_from {
        if !path.exists() {
            return Err(PipelineError::MissingInput(path.clone()));
        }
        WeightFile::load(path)?.apply_to(&mut model, false)?;
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub frames: usize,
    /// Mean per-frame loss over the epoch.
    pub mean_loss: f64,
}

struct Log(BufWriter<File>, PathBuf);

impl Log {
    fn create(path: PathBuf) -> Result<Self> {
        let f = File::create(&path).map_err(io_err(&path))?;
        Ok(Self(BufWriter::new(f), path))
    }

    fn line(&mut self, v: serde_json::Value) -> Result<()> {
        writeln!(self.0, "{v}").map_err(io_err(&self.1))
    }

    fn finish(mut self) -> Result<()> {
        self.0.flush().map_err(io_err(&self.1))
    }
}

/// Hybrid-shuffled, chunked training. Recurrent models see each clip's chunks
/// in order with state carried between them and reset at clip boundaries;
/// non-recurrent models get flat-shuffled frame batches.
pub fn cmd_train(config: &RunConfig) -> Result<Vec<EpochSummary>> {
    let videos = load_annotations(config)?;
    let clips = load_clips(config, TRAIN_FILE, &videos)?;
    let anchors = load_anchors(config)?;
    let frames = load_frames(config)?;
    let mut model = initial_model(config)?;
    let chunk_len = config.pipeline.chunk_len;
    if chunk_len == 0 {
        return Err(PipelineError::Config(
            "pipeline.chunk_len must be at least 1".into(),
        ));
    }
    let t = &config.train;
    let mut optimizer = SgdMomentum::new(t.learning_rate, t.momentum, t.clip_norm)?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.sub_seed(STREAM_DROPOUT));
    let use_dropout = model.is_recurrent() && model.config().lstm.dropout > 0.0;

    config.ensure_out()?;
    let mut log = Log::create(config.out(TRAIN_LOG))?;
    let mut summaries = Vec::new();
    let mut global_step = 0;
    for epoch in 0..t.epochs {
        let shuffle_seed = config.sub_seed(STREAM_SHUFFLE + epoch as u64);
        let order =
            crate::clips::hybrid_shuffle((0..clips.len()).collect::<Vec<_>>(), shuffle_seed);
        let mut batches: Vec<(Vec<(usize, usize)>, bool)> = Vec::new();
        if model.is_recurrent() {
            for &c in &order {
                let mut start = 0;
                for chunk in chunk_clip(c, &clips[c], chunk_len)? {
                    let end = start + chunk.frames.len();
                    batches.push(((start..end).map(|i| (c, i)).collect(), chunk.is_first));
                    start = end;
                }
            }
        } else {
            let mut flat: Vec<(usize, usize)> = order
                .iter()
                .flat_map(|&c| (0..clips[c].frames.len()).map(move |i| (c, i)))
                .collect();
            flat.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
            batches = flat.chunks(chunk_len).map(|b| (b.to_vec(), true)).collect();
        }
        if let Some(cap) = t.max_steps_per_epoch {
            batches.truncate(cap);
        }

        let step_config = t.step_config();
        let mut states = None;
        let (mut total, mut n_frames) = (0.0, 0);
        for (batch, is_first) in &batches {
            if *is_first {
                states = None;
            }
            let samples = batch
                .iter()
                .map(|&(c, i)| sample(&frames, c, &clips[c], i))
                .collect::<Result<Vec<_>>>()?;
            let rng: Option<&mut dyn RngCore> = if use_dropout {
                Some(&mut dropout_rng)
            } else {
                None
            };
            let out = train_step(
                &mut model,
                &samples,
                states.take(),
                &mut optimizer,
                &anchors,
                &step_config,
                rng,
            )?;
            states = out.states;
            total += out.loss.total;
            n_frames += samples.len();
            log.line(json!({
                "kind": "step",
                "epoch": epoch,
                "step": global_step,
                "frames": samples.len(),
                "loss": out.loss.total / samples.len() as f64,
                "localization": out.loss.localization / samples.len() as f64,
                "confidence": out.loss.confidence / samples.len() as f64,
                "classification": out.loss.classification / samples.len() as f64,
                "dropped_labels": out.dropped_labels,
            }))?;
            global_step += 1;
        }
        let summary = EpochSummary {
            epoch,
            steps: batches.len(),
            frames: n_frames,
            mean_loss: if n_frames == 0 {
                0.0
            } else {
                total / n_frames as f64
            },
        };
        log.line(json!({"kind": "epoch", "epoch": epoch, "steps": summary.steps, "frames": summary.frames, "mean_loss": summary.mean_loss}))?;
        save_detector(&model, &config.out(&format!("checkpoint_epoch{epoch}.bin")))?;
        summaries.push(summary);
    }
    log.finish()?;
    save_detector(&model, &config.out(CHECKPOINT_FILE))?;
    Ok(summaries)
}

/// Every box of every frame of every scale, decoded with its scale's priors.
pub fn detect_frame(
    model: &Detector,
    anchors: &AnchorSet,
    frame: &Tensor4,
    state: Option<DetectorState>,
) -> Result<(Vec<Detection>, Option<DetectorState>)> {
    let (preds, state) = model.forward(frame, state)?;
    let mut dets = Vec::new();
    for p in &preds {
        dets.extend(decode(p, anchors.scale(p.scale))?);
    }
    Ok((dets, state))
}

fn playback(labels: &[BoxLabel]) -> Vec<Detection> {
    labels
        .iter()
        .map(|l| Detection {
            bbox: l.bbox,
            class_id: l.class_id,
            confidence: 1.0,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKMetrics {
    pub k: usize,
    pub classes: Vec<ClassId>,
    pub map: Option<f64>,
    pub excluded: Vec<ClassId>,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub frames: usize,
    pub clips: usize,
    pub confidence_threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub classes: Vec<crate::metrics::ClassReport>,
    pub top_k: Vec<TopKMetrics>,
}

/// Runs the model over each validation clip from a fresh state and scores
/// the detections.
pub fn cmd_eval(config: &RunConfig) -> Result<EvalSummary> {
    let threshold = config
        .eval
        .confidence_threshold
        .ok_or_else(|| PipelineError::Config("eval.confidence_threshold is required".into()))?;
    let eval_config = EvalConfig {
        confidence_threshold: threshold,
        nms_iou: config.eval.nms_iou,
        match_iou: config.eval.match_iou,
    };
    eval_config.validate()?;
    let videos = load_annotations(config)?;
    let clips = load_clips(config, VAL_FILE, &videos)?;
    let mut records = Vec::new();
    if config.eval.playback {
        for c in &clips {
            records.extend(c.frames.iter().map(|f| FrameRecord {
                detections: playback(&f.labels),
                truths: f.labels.clone(),
            }));
        }
    } else {
        let ckpt = config
            .paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| config.out(CHECKPOINT_FILE));
        if !ckpt.exists() {
            return Err(PipelineError::MissingInput(ckpt));
        }
        let model = load_detector(&ckpt)?;
        let anchors = load_anchors(config)?;
        let frames = load_frames(config)?;
        for c in &clips {
            let mut state = model.fresh_state()?;
            for f in &c.frames {
                let image = frames.tensor(&c.video_id, f.frame_index)?;
                let (detections, next) = detect_frame(&model, &anchors, &image, state)?;
                state = next;
                records.push(FrameRecord {
                    detections,
                    truths: f.labels.clone(),
                });
            }
        }
    }
    let report = evaluate(&records, &eval_config)?;
    let all_clips = load_clips(config, CLIPS_FILE, &videos).unwrap_or_else(|_| clips.clone());
    let hist = class_histogram(&all_clips);
    let top_k = config
        .eval
        .top_k
        .iter()
        .map(|&k| top_k_metrics(&report, k, hist.top_k(k)))
        .collect();
    let summary = EvalSummary {
        frames: records.len(),
        clips: clips.len(),
        confidence_threshold: threshold,
        precision: report.precision,
        recall: report.recall,
        classes: report.classes.clone(),
        top_k,
    };
    config.ensure_out()?;
    write_json(&config.out(EVAL_REPORT), &summary)?;
    let mut log = Log::create(config.out(EVAL_LOG))?;
    for c in &summary.classes {
        log.line(json!({"kind": "class", "class_id": c.class_id, "ap": c.ap, "precision": c.precision, "recall": c.recall, "truths": c.truths, "detections": c.detections}))?;
    }
    for t in &summary.top_k {
        log.line(json!({"kind": "top_k", "k": t.k, "classes": t.classes, "map": t.map, "precision": t.precision, "recall": t.recall, "excluded": t.excluded}))?;
    }
    log.line(json!({"kind": "overall", "precision": summary.precision, "recall": summary.recall, "frames": summary.frames}))?;
    log.finish()?;
    Ok(summary)
}

fn top_k_metrics(report: &EvalReport, k: usize, classes: Vec<ClassId>) -> TopKMetrics {
    let (map, excluded) = match report.mean_ap(&classes) {
        Ok(m) => (Some(m.value), m.excluded),
        Err(_) => (None, classes.clone()),
    };
    let (precision, recall) = report.precision_recall_over(&classes);
    TopKMetrics {
        k,
        classes,
        map,
        excluded,
        precision,
        recall,
    }
}
