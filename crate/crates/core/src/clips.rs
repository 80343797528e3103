//! Clip segmentation, hybrid shuffling, chunking and dataset splits.
//!
//! A clip is a padded run of labeled frames from one video. Clips are the
//! unit of shuffling and of recurrent-state lifetime: the clip list is
//! permuted, frames inside a clip never are.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::{BoxLabel, ClassId};

/// Marker for a frame that exists but carries no labels.
pub const EMPTY_LABEL: &str = "-";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClipError {
    #[error("annotations out of order: frame {frame} follows {previous}")]
    Unsorted { previous: usize, frame: usize },
    #[error(
        "video {video_id} has {video_len} frames, fewer than the minimum clip length {min_len}"
    )]
    VideoTooShort {
        video_id: String,
        video_len: usize,
        min_len: usize,
    },
    #[error("frame {frame} lies outside a video of {video_len} frames")]
    FrameOutOfVideo { frame: usize, video_len: usize },
    #[error("invalid segmentation settings: {0}")]
    Settings(String),
    #[error("chunk length must be at least 1")]
    ChunkLen,
    #[error("subsampling factor must be at least 1")]
    SubsampleFactor,
    #[error("subsampling leaves {kept} frame(s); at least 2 are required")]
    TooFewFrames { kept: usize },
    #[error("fraction {0} is outside [0, 1]")]
    Fraction(f64),
    #[error("block length must be at least 1")]
    BlockLen,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("clip {video_id} [{start}, {end}] is not covered by the annotations")]
    UnknownClip {
        video_id: String,
        start: usize,
        end: usize,
    },
}

pub type Result<T, E = ClipError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub frame_index: usize,
    pub labels: Vec<BoxLabel>,
}

impl FrameAnnotation {
    pub fn new(frame_index: usize, labels: Vec<BoxLabel>) -> Self {
        Self {
            frame_index,
            labels,
        }
    }

    pub fn is_labeled(&self) -> bool {
        !self.labels.is_empty()
    }
}

/// All annotation records of one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoAnnotations {
    pub video_id: String,
    /// Number of frames; indices run over `0..video_len`.
    pub video_len: usize,
    /// Sorted by frame index, one entry per mentioned frame.
    pub frames: Vec<FrameAnnotation>,
}

/// A contiguous (or, after subsampling, evenly strided) span of frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub video_id: String,
    pub start_frame: usize,
    pub end_frame: usize,
    /// Distance between consecutive kept frames.
    pub stride: usize,
    pub frames: Vec<FrameAnnotation>,
}

impl ClipRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn span(&self) -> ClipSpan {
        ClipSpan {
            video_id: self.video_id.clone(),
            start: self.start_frame,
            end: self.end_frame,
        }
    }

    /// Distinct classes appearing anywhere in the clip.
    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.frames
            .iter()
            .flat_map(|f| f.labels.iter().map(|l| l.class_id))
            .collect()
    }
}

/// One training slice of a clip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Chunk<'a> {
    pub clip_id: usize,
    pub frames: &'a [FrameAnnotation],
    /// Recurrent state must be reset before this chunk.
    pub is_first: bool,
    /// Recurrent state is discarded after this chunk.
    pub is_last: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentConfig {
    pub pad: usize,
    pub max_gap: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub overlap: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            pad: 30,
            max_gap: 30,
            min_len: 100,
            max_len: 1000,
            overlap: 30,
        }
    }
}

impl SegmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(ClipError::Settings(format!(
                "need 1 <= min_len <= max_len, got {} and {}",
                self.min_len, self.max_len
            )));
        }
        if self.overlap >= self.max_len {
            return Err(ClipError::Settings(format!(
                "overlap {} must be below max_len {}",
                self.overlap, self.max_len
            )));
        }
        Ok(())
    }
}

/// Cuts one video's annotations into clips.
///
/// Labeled frames separated by at most `max_gap` unlabeled frames form a run.
/// Each run is padded on both sides, clamped to the video, split into
/// overlapping `max_len` windows when too long, and any piece shorter than
/// `min_len` is grown evenly on both sides (shifted inward at the video
/// edges).
pub fn segment_clips(video: &VideoAnnotations, config: &SegmentConfig) -> Result<Vec<ClipRecord>> {
    config.validate()?;
    for pair in video.frames.windows(2) {
        if pair[1].frame_index <= pair[0].frame_index {
            return Err(ClipError::Unsorted {
                previous: pair[0].frame_index,
                frame: pair[1].frame_index,
            });
        }
    }
    if let Some(last) = video.frames.last() {
        if last.frame_index >= video.video_len {
            return Err(ClipError::FrameOutOfVideo {
                frame: last.frame_index,
                video_len: video.video_len,
            });
        }
    }

    let labeled: Vec<usize> = video
        .frames
        .iter()
        .filter(|f| f.is_labeled())
        .map(|f| f.frame_index)
        .collect();
    if labeled.is_empty() {
        return Ok(Vec::new());
    }
    if video.video_len < config.min_len {
        return Err(ClipError::VideoTooShort {
            video_id: video.video_id.clone(),
            video_len: video.video_len,
            min_len: config.min_len,
        });
    }

    let mut runs = vec![(labeled[0], labeled[0])];
    for &f in &labeled[1..] {
        let run = runs.last_mut().expect("runs starts non-empty");
        if f - run.1 - 1 <= config.max_gap {
            run.1 = f;
        } else {
            runs.push((f, f));
        }
    }

    let last = video.video_len - 1;
    let stride = config.max_len - config.overlap;
    let mut spans = Vec::new();
    for (a, b) in runs {
        let start = a.saturating_sub(config.pad);
        let end = (b + config.pad).min(last);
        let mut ws = start;
        loop {
            let we = (ws + config.max_len - 1).min(end);
            spans.push(extend_to_min(ws, we, config.min_len, last));
            if we == end {
                break;
            }
            ws += stride;
        }
    }

    let by_frame: HashMap<usize, &FrameAnnotation> =
        video.frames.iter().map(|f| (f.frame_index, f)).collect();
    Ok(spans
        .into_iter()
        .map(|(s, e)| ClipRecord {
            video_id: video.video_id.clone(),
            start_frame: s,
            end_frame: e,
            stride: 1,
            frames: (s..=e)
                .map(|i| FrameAnnotation {
                    frame_index: i,
                    labels: by_frame
                        .get(&i)
                        .map(|f| f.labels.clone())
                        .unwrap_or_default(),
                })
                .collect(),
        })
        .collect())
}

fn extend_to_min(start: usize, end: usize, min_len: usize, last: usize) -> (usize, usize) {
    let len = end - start + 1;
    if len >= min_len {
        return (start, end);
    }
    let need = min_len - len;
    let mut s = start as i64 - (need / 2) as i64;
    let mut e = (end + need - need / 2) as i64;
    if s < 0 {
        e -= s;
        s = 0;
    }
    if e > last as i64 {
        s -= e - last as i64;
        e = last as i64;
    }
    (s.max(0) as usize, e as usize)
}

/// Segments every video in turn.
pub fn segment_all(videos: &[VideoAnnotations], config: &SegmentConfig) -> Result<Vec<ClipRecord>> {
    let mut out = Vec::new();
    for v in videos {
        out.extend(segment_clips(v, config)?);
    }
    Ok(out)
}

/// Seeded permutation of whole items; the contents of each item are untouched.
pub fn hybrid_shuffle<T>(mut clips: Vec<T>, seed: u64) -> Vec<T> {
    clips.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    clips
}

/// Consecutive slices of `chunk_len` frames; the last one may be shorter.
pub fn chunk_clip(clip_id: usize, clip: &ClipRecord, chunk_len: usize) -> Result<Vec<Chunk<'_>>> {
    if chunk_len == 0 {
        return Err(ClipError::ChunkLen);
    }
    let n = clip.frames.len().div_ceil(chunk_len);
    Ok(clip
        .frames
        .chunks(chunk_len)
        .enumerate()
        .map(|(i, frames)| Chunk {
            clip_id,
            frames,
            is_first: i == 0,
            is_last: i + 1 == n,
        })
        .collect())
}

fn check_fraction(f: f64) -> Result<()> {
    if (0.0..=1.0).contains(&f) {
        Ok(())
    } else {
        Err(ClipError::Fraction(f))
    }
}

/// Assigns each run of `block` consecutive items to validation with
/// probability `val_fraction`. Both outputs keep input order.
pub fn split_frames_blocked<T: Clone>(
    frames: &[T],
    block: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if block == 0 {
        return Err(ClipError::BlockLen);
    }
    check_fraction(val_fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for b in frames.chunks(block) {
        if rng.gen_bool(val_fraction) {
            val.extend_from_slice(b);
        } else {
            train.extend_from_slice(b);
        }
    }
    Ok((train, val))
}

/// Number of validation items: nearest integer, at least one when the
/// fraction and the input are both non-zero.
pub fn validation_count(n: usize, val_fraction: f64) -> usize {
    if n == 0 || val_fraction == 0.0 {
        return 0;
    }
    ((n as f64 * val_fraction).round() as usize).clamp(1, n)
}

/// Random clip-level split; both outputs keep input order.
pub fn split_clips<T>(clips: Vec<T>, val_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    check_fraction(val_fraction)?;
    let n_val = validation_count(clips.len(), val_fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: BTreeSet<usize> = rand::seq::index::sample(&mut rng, clips.len(), n_val)
        .into_iter()
        .collect();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, c) in clips.into_iter().enumerate() {
        if picked.contains(&i) {
            val.push(c);
        } else {
            train.push(c);
        }
    }
    Ok((train, val))
}

/// Keeps every `n`-th frame starting from the first.
pub fn sparse_subsample(clip: &ClipRecord, n: usize) -> Result<ClipRecord> {
    if n == 0 {
        return Err(ClipError::SubsampleFactor);
    }
    let frames: Vec<FrameAnnotation> = clip.frames.iter().step_by(n).cloned().collect();
    if frames.len() < 2 {
        return Err(ClipError::TooFewFrames { kept: frames.len() });
    }
    Ok(ClipRecord {
        video_id: clip.video_id.clone(),
        start_frame: clip.start_frame,
        end_frame: frames.last().map_or(clip.start_frame, |f| f.frame_index),
        stride: clip.stride * n,
        frames,
    })
}

/// Number of clips containing each class.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub counts: BTreeMap<ClassId, usize>,
}

impl ClassHistogram {
    /// The `k` most frequent classes; equal counts go to the lower id first.
    pub fn top_k(&self, k: usize) -> Vec<ClassId> {
        let mut v: Vec<(ClassId, usize)> = self.counts.iter().map(|(&c, &n)| (c, n)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v.into_iter().take(k).map(|(c, _)| c).collect()
    }
}

pub fn class_histogram(clips: &[ClipRecord]) -> ClassHistogram {
    let mut counts = BTreeMap::new();
    for c in clips {
        for class in c.classes() {
            *counts.entry(class).or_insert(0) += 1;
        }
    }
    ClassHistogram { counts }
}

/// How much footage survives segmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReductionStats {
    pub total_frames: usize,
    /// Distinct frames covered by at least one clip.
    pub kept_frames: usize,
}

impl ReductionStats {
    /// Fraction of frames discarded; 0 for an empty dataset.
    pub fn reduction(&self) -> f64 {
        if self.total_frames == 0 {
            0.0
        } else {
            1.0 - self.kept_frames as f64 / self.total_frames as f64
        }
    }
}

pub fn reduction_stats(videos: &[VideoAnnotations], clips: &[ClipRecord]) -> ReductionStats {
    let kept: BTreeSet<(&str, usize)> = clips
        .iter()
        .flat_map(|c| {
            c.frames
                .iter()
                .map(move |f| (c.video_id.as_str(), f.frame_index))
        })
        .collect();
    ReductionStats {
        total_frames: videos.iter().map(|v| v.video_len).sum(),
        kept_frames: kept.len(),
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> ClipError {
    ClipError::Parse {
        line,
        msg: msg.into(),
    }
}

/// Parses `video_id frame_index class_id cx cy w h` records.
///
/// A line `video_id frame_index -` declares a frame without labels. Several
/// lines for the same frame accumulate. Each video is taken to span up to the
/// highest frame index it mentions. Blank lines and `#` comments are skipped.
pub fn parse_annotations(text: &str) -> Result<Vec<VideoAnnotations>> {
    let mut videos: BTreeMap<String, BTreeMap<usize, Vec<BoxLabel>>> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let frame: usize = fields
            .get(1)
            .ok_or_else(|| parse_err(line_no, "missing frame index"))?
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad frame index {:?}", fields[1])))?;
        let labels = videos
            .entry(fields[0].to_string())
            .or_default()
            .entry(frame)
            .or_default();
        match fields.len() {
            3 if fields[2] == EMPTY_LABEL => {}
            7 => {
                let class_id: ClassId = fields[2]
                    .parse()
                    .map_err(|_| parse_err(line_no, format!("bad class id {:?}", fields[2])))?;
                let mut v = [0.0; 4];
                for (slot, s) in v.iter_mut().zip(&fields[3..]) {
                    *slot = s
                        .parse()
                        .map_err(|_| parse_err(line_no, format!("bad number {s:?}")))?;
                }
                let [cx, cy, w, h] = v;
                let inside = |x: f64| (0.0..=1.0).contains(&x);
                if !(inside(cx) && inside(cy) && w > 0.0 && h > 0.0 && inside(w) && inside(h)) {
                    return Err(parse_err(line_no, "box outside the unit square"));
                }
                labels.push(BoxLabel::new(class_id, cx, cy, w, h));
            }
            n => {
                return Err(parse_err(
                    line_no,
                    format!("expected 3 or 7 fields, found {n}"),
                ))
            }
        }
    }
    Ok(videos
        .into_iter()
        .map(|(video_id, frames)| VideoAnnotations {
            video_id,
            video_len: frames.keys().next_back().map_or(0, |&f| f + 1),
            frames: frames
                .into_iter()
                .map(|(frame_index, labels)| FrameAnnotation {
                    frame_index,
                    labels,
                })
                .collect(),
        })
        .collect())
}

/// Writes one line per label and a marker line per unlabeled frame.
pub fn format_annotations(videos: &[VideoAnnotations]) -> String {
    let mut out = String::new();
    for v in videos {
        for f in &v.frames {
            if f.labels.is_empty() {
                let _ = writeln!(out, "{} {} {}", v.video_id, f.frame_index, EMPTY_LABEL);
            }
            for l in &f.labels {
                let b = l.bbox;
                let _ = writeln!(
                    out,
                    "{} {} {} {} {} {} {}",
                    v.video_id, f.frame_index, l.class_id, b.cx, b.cy, b.w, b.h
                );
            }
        }
    }
    out
}

/// A clip's identity without its frames.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClipSpan {
    pub video_id: String,
    pub start: usize,
    pub end: usize,
}

/// `video_id start end` per line.
pub fn format_manifest(spans: &[ClipSpan]) -> String {
    spans
        .iter()
        .map(|s| format!("{} {} {}\n", s.video_id, s.start, s.end))
        .collect()
}

pub fn parse_manifest(text: &str) -> Result<Vec<ClipSpan>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(parse_err(
                i + 1,
                format!("expected 3 fields, found {}", f.len()),
            ));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| parse_err(i + 1, format!("bad frame index {s:?}")))
        };
        let (start, end) = (num(f[1])?, num(f[2])?);
        if end < start {
            return Err(parse_err(i + 1, "end precedes start"));
        }
        out.push(ClipSpan {
            video_id: f[0].to_string(),
            start,
            end,
        });
    }
    Ok(out)
}

/// Rebuilds a contiguous clip from its span and the annotation records.
pub fn materialize(span: &ClipSpan, videos: &[VideoAnnotations]) -> Result<ClipRecord> {
    let unknown = || ClipError::UnknownClip {
        video_id: span.video_id.clone(),
        start: span.start,
        end: span.end,
    };
    let v = videos
        .iter()
        .find(|v| v.video_id == span.video_id)
        .ok_or_else(unknown)?;
    if span.end >= v.video_len {
        return Err(unknown());
    }
    let by_frame: HashMap<usize, &FrameAnnotation> =
        v.frames.iter().map(|f| (f.frame_index, f)).collect();
    Ok(ClipRecord {
        video_id: span.video_id.clone(),
        start_frame: span.start,
        end_frame: span.end,
        stride: 1,
        frames: (span.start..=span.end)
            .map(|i| FrameAnnotation {
                frame_index: i,
                labels: by_frame
                    .get(&i)
                    .map(|f| f.labels.clone())
                    .unwrap_or_default(),
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn label() -> BoxLabel {
        BoxLabel::new(0, 0.5, 0.5, 0.1, 0.1)
    }

    fn video(len: usize, labeled: impl IntoIterator<Item = usize>) -> VideoAnnotations {
        VideoAnnotations {
            video_id: "v".into(),
            video_len: len,
            frames: labeled
                .into_iter()
                .map(|i| FrameAnnotation::new(i, vec![label()]))
                .collect(),
        }
    }

    fn bounds(clips: &[ClipRecord]) -> Vec<(usize, usize)> {
        clips.iter().map(|c| (c.start_frame, c.end_frame)).collect()
    }

    #[test]
    fn run_is_padded_by_thirty() {
        let clips = segment_clips(&video(1001, 100..=200), &SegmentConfig::default()).unwrap();
        assert_eq!(bounds(&clips), vec![(70, 230)]);
        assert_eq!(clips[0].len(), 161);
        assert!(!clips[0].frames[0].is_labeled());
        assert!(clips[0].frames[30].is_labeled());
    }

    #[test]
    fn short_run_near_start_grows_right() {
        let clips = segment_clips(&video(1001, 5..=20), &SegmentConfig::default()).unwrap();
        assert_eq!(bounds(&clips), vec![(0, 99)]);
    }

    #[test]
    fn long_run_splits_into_overlapping_windows() {
        let clips = segment_clips(&video(2001, 0..=2000), &SegmentConfig::default()).unwrap();
        assert_eq!(bounds(&clips), vec![(0, 999), (970, 1969), (1901, 2000)]);
    }

    #[test]
    fn gaps_bridge_up_to_max_gap() {
        let cfg = SegmentConfig::default();
        let joined = segment_clips(&video(2000, [300, 331]), &cfg).unwrap();
        assert_eq!(joined.len(), 1);
        let split = segment_clips(&video(2000, [300, 332]), &cfg).unwrap();
        assert_eq!(split.len(), 2);
    }

    #[test]
    fn segmentation_errors() {
        let cfg = SegmentConfig::default();
        let mut v = video(1000, [10, 5]);
        assert_eq!(
            segment_clips(&v, &cfg),
            Err(ClipError::Unsorted {
                previous: 10,
                frame: 5
            })
        );
        v = video(50, [10]);
        assert!(matches!(
            segment_clips(&v, &cfg),
            Err(ClipError::VideoTooShort { .. })
        ));
        assert!(segment_clips(&video(50, []), &cfg).unwrap().is_empty());
        let bad = SegmentConfig {
            overlap: 1000,
            ..cfg
        };
        assert!(matches!(
            segment_clips(&video(2000, [1]), &bad),
            Err(ClipError::Settings(_))
        ));
    }

    #[test]
    fn shuffle_single_and_seeded() {
        assert_eq!(hybrid_shuffle(vec![7], 3), vec![7]);
        let v: Vec<u32> = (0..10).collect();
        assert_eq!(hybrid_shuffle(v.clone(), 5), hybrid_shuffle(v.clone(), 5));
        assert!((0..20).any(|s| hybrid_shuffle(v.clone(), s) != hybrid_shuffle(v.clone(), s + 1)));
    }

    fn clip_of(len: usize) -> ClipRecord {
        ClipRecord {
            video_id: "v".into(),
            start_frame: 0,
            end_frame: len - 1,
            stride: 1,
            frames: (0..len).map(|i| FrameAnnotation::new(i, vec![])).collect(),
        }
    }

    #[test]
    fn chunk_lengths_and_flags() {
        let c = clip_of(5);
        let chunks = chunk_clip(0, &c, 2).unwrap();
        assert_eq!(
            chunks.iter().map(|c| c.frames.len()).collect::<Vec<_>>(),
            [2, 2, 1]
        );
        assert_eq!(chunks.iter().filter(|c| c.is_first).count(), 1);
        assert_eq!(chunks.iter().filter(|c| c.is_last).count(), 1);
        assert!(chunks[0].is_first && chunks[2].is_last);
        let one = chunk_clip(0, &c, 9).unwrap();
        assert_eq!(one.len(), 1);
        assert!(one[0].is_first && one[0].is_last);
        assert_eq!(chunk_clip(0, &c, 0), Err(ClipError::ChunkLen));
    }

    #[test]
    fn blocked_split_keeps_blocks_whole() {
        let frames: Vec<usize> = (0..240).collect();
        for seed in 0..20 {
            let (train, val) = split_frames_blocked(&frames, 120, 0.5, seed).unwrap();
            assert!(train.len() % 120 == 0 && val.len() % 120 == 0);
            assert_eq!(train.len() + val.len(), 240);
        }
        let (train, val) = split_frames_blocked(&frames, 120, 0.0, 1).unwrap();
        assert_eq!((train.len(), val.len()), (240, 0));
    }

    #[test]
    fn blocked_split_share_tracks_fraction() {
        let frames: Vec<usize> = (0..12_000).collect();
        let mut share = 0.0;
        for seed in 0..200 {
            let (_, val) = split_frames_blocked(&frames, 120, 0.2, seed).unwrap();
            share += val.len() as f64 / frames.len() as f64;
        }
        share /= 200.0;
        assert!((share - 0.2).abs() < 0.05, "{share}");
    }

    #[test]
    fn clip_split_rounding() {
        let (train, val) = split_clips((0..5).collect::<Vec<_>>(), 0.2, 4).unwrap();
        assert_eq!((train.len(), val.len()), (4, 1));
        let (train, val) = split_clips((0..5).collect::<Vec<_>>(), 0.0, 4).unwrap();
        assert_eq!((train.len(), val.len()), (5, 0));
        assert_eq!(validation_count(2, 0.01), 1);
        assert_eq!(validation_count(0, 0.5), 0);
        assert_eq!(split_clips(vec![1], 1.5, 0), Err(ClipError::Fraction(1.5)));
    }

    #[test]
    fn subsampling() {
        let c = clip_of(10);
        assert_eq!(sparse_subsample(&c, 1).unwrap(), c);
        let half = sparse_subsample(&c, 2).unwrap();
        let idx: Vec<usize> = half.frames.iter().map(|f| f.frame_index).collect();
        assert_eq!(idx, [0, 2, 4, 6, 8]);
        assert_eq!(half.stride, 2);
        let clip = segment_clips(&video(1001, 100..=200), &SegmentConfig::default()).unwrap();
        assert_eq!(sparse_subsample(&clip[0], 3).unwrap().len(), 54);
        assert_eq!(
            sparse_subsample(&c, 10),
            Err(ClipError::TooFewFrames { kept: 1 })
        );
        assert_eq!(sparse_subsample(&c, 0), Err(ClipError::SubsampleFactor));
    }

    #[test]
    fn histogram_counts_clips() {
        assert!(class_histogram(&[]).counts.is_empty());
        let mut c = clip_of(3);
        c.frames[0].labels = vec![BoxLabel::new(3, 0.5, 0.5, 0.1, 0.1)];
        c.frames[1].labels = vec![BoxLabel::new(3, 0.5, 0.5, 0.1, 0.1)];
        c.frames[2].labels = vec![BoxLabel::new(7, 0.5, 0.5, 0.1, 0.1)];
        let h = class_histogram(&[c]);
        assert_eq!(h.counts, BTreeMap::from([(3, 1), (7, 1)]));

        let h = ClassHistogram {
            counts: BTreeMap::from([(4, 5), (2, 5), (1, 1)]),
        };
        assert_eq!(h.top_k(2), vec![2, 4]);
    }

    #[test]
    fn reduction_counts_distinct_frames() {
        let v = video(1001, 100..=200);
        let clips = segment_clips(&v, &SegmentConfig::default()).unwrap();
        let stats = reduction_stats(&[v], &clips);
        assert_eq!(stats.kept_frames, 161);
        assert!((stats.reduction() - (1.0 - 161.0 / 1001.0)).abs() < 1e-15);
    }

    #[test]
    fn annotation_round_trip() {
        let text = "a 2 1 0.5 0.5 0.2 0.2\na 0 -\na 2 0 0.1 0.1 0.1 0.1\nb 4 -\n";
        let v = parse_annotations(text).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v[0].video_len, 3);
        assert_eq!(v[0].frames[1].labels.len(), 2);
        assert_eq!(v[1].video_len, 5);
        assert_eq!(parse_annotations(&format_annotations(&v)).unwrap(), v);
        assert!(parse_annotations("").unwrap().is_empty());
    }

    #[test]
    fn annotation_errors_carry_line() {
        let e = parse_annotations("a 0 -\na x 1 0 0 0 0\n").unwrap_err();
        assert!(matches!(e, ClipError::Parse { line: 2, .. }));
        let e = parse_annotations("a 1 0 0.5 0.5 1.5 0.1").unwrap_err();
        assert!(matches!(e, ClipError::Parse { line: 1, .. }));
        let e = parse_annotations("a 1 0 0.5").unwrap_err();
        assert!(matches!(e, ClipError::Parse { line: 1, .. }));
    }

    #[test]
    fn manifest_round_trip() {
        let v = video(1001, 100..=200);
        let clips = segment_clips(&v, &SegmentConfig::default()).unwrap();
        let spans: Vec<ClipSpan> = clips.iter().map(ClipRecord::span).collect();
        let parsed = parse_manifest(&format_manifest(&spans)).unwrap();
        assert_eq!(parsed, spans);
        assert_eq!(materialize(&parsed[0], &[v]).unwrap(), clips[0]);
        assert!(parse_manifest("v 9 3").is_err());
    }

    fn arb_video() -> impl Strategy<Value = VideoAnnotations> {
        (
            100usize..3000,
            prop::collection::btree_set(0usize..3000, 1..40),
        )
            .prop_map(|(len, set)| {
                video(
                    len,
                    set.into_iter().filter(|&f| f < len).collect::<Vec<_>>(),
                )
            })
    }

    proptest! {
        #[test]
        fn clips_respect_bounds_and_cover_labels(v in arb_video()) {
            let clips = segment_clips(&v, &SegmentConfig::default()).unwrap();
            for c in &clips {
                prop_assert!((100..=1000).contains(&c.len()));
                prop_assert_eq!(c.len(), c.end_frame - c.start_frame + 1);
            }
            for f in v.frames.iter().filter(|f| f.is_labeled()) {
                prop_assert!(clips.iter().any(|c| (c.start_frame..=c.end_frame).contains(&f.frame_index)));
            }
        }

        #[test]
        fn chunks_concatenate_to_clip(len in 1usize..60, chunk in 1usize..70) {
            let c = clip_of(len);
            let chunks = chunk_clip(2, &c, chunk).unwrap();
            let joined: Vec<FrameAnnotation> = chunks.iter().flat_map(|c| c.frames.iter().cloned()).collect();
            prop_assert_eq!(joined, c.frames.clone());
        }

        #[test]
        fn splits_partition(n in 0usize..40, frac in 0.0f64..=1.0, seed in any::<u64>()) {
            let items: Vec<usize> = (0..n).collect();
            let (train, val) = split_clips(items.clone(), frac, seed).unwrap();
            let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, items.clone());
            prop_assert_eq!(val.len(), validation_count(n, frac));
        }

        #[test]
        fn nested_shuffles_preserve_contents(n in 1usize..10, s1 in any::<u64>(), s2 in any::<u64>()) {
            let clips: Vec<Vec<usize>> = (0..n).map(|i| (i * 10..i * 10 + 5).collect()).collect();
            let mut out = hybrid_shuffle(hybrid_shuffle(clips.clone(), s1), s2);
            for c in &out {
                prop_assert!(c.windows(2).all(|w| w[1] == w[0] + 1));
            }
            out.sort();
            prop_assert_eq!(out, clips);
        }
    }
}
