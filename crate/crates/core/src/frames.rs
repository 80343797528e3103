//! Packed `u8` frame archive, one raster stack per video.
//!
//! ```text
//! magic "RCYOLOF\0" | u32 version | u32 video count
//! per video: u32 len, UTF-8 id, u32 frames, u32 channels, u32 height, u32 width,
//!            frames * channels * height * width bytes (CHW per frame)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{Dims, Tensor4};

pub const MAGIC: &[u8; 8] = b"RCYOLOF\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a frame archive (bad magic)")]
    Magic,
    #[error("unsupported frame archive version {0}")]
    Version(u32),
    #[error("video id is not UTF-8")]
    Name,
    #[error("video {0} is not in the archive")]
    UnknownVideo(String),
    #[error("video {video_id} has {frames} frames; frame {index} requested")]
    FrameIndex {
        video_id: String,
        frames: usize,
        index: usize,
    },
    #[error("video {video_id}: pixel buffer holds {got} bytes, geometry needs {expected}")]
    Size {
        video_id: String,
        expected: usize,
        got: usize,
    },
}

pub type Result<T, E = FrameError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoFrames {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl VideoFrames {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            pixels: Vec::new(),
        }
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn len(&self) -> usize {
        if self.frame_len() == 0 {
            0
        } else {
            self.pixels.len() / self.frame_len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, frame: &[u8]) {
        assert_eq!(frame.len(), self.frame_len(), "frame size");
        self.pixels.extend_from_slice(frame);
    }

    pub fn frame(&self, index: usize) -> Option<&[u8]> {
        let n = self.frame_len();
        self.pixels.get(index * n..(index + 1) * n)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FrameArchive {
    pub videos: BTreeMap<String, VideoFrames>,
}

impl FrameArchive {
    /// Frame `index` of `video_id` as a `(1, c, h, w)` tensor scaled to `[0, 1]`.
    pub fn tensor(&self, video_id: &str, index: usize) -> Result<Tensor4> {
        let v = self
            .videos
            .get(video_id)
            .ok_or_else(|| FrameError::UnknownVideo(video_id.to_string()))?;
        let bytes = v.frame(index).ok_or_else(|| FrameError::FrameIndex {
            video_id: video_id.to_string(),
            frames: v.len(),
            index,
        })?;
        let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Ok(
            Tensor4::from_vec(Dims::new(1, v.channels, v.height, v.width), data)
                .expect("archive geometry is validated on construction"),
        )
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.videos.len() as u32).to_le_bytes())?;
        for (id, v) in &self.videos {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            for n in [v.len(), v.channels, v.height, v.width] {
                w.write_all(&(n as u32).to_le_bytes())?;
            }
            w.write_all(&v.pixels)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(FrameError::Magic);
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(FrameError::Version(version));
        }
        let count = read_u32(r)?;
        let mut videos = BTreeMap::new();
        for _ in 0..count {
            let n = read_u32(r)? as usize;
            let id = String::from_utf8(read_exact_vec(r, n)?).map_err(|_| FrameError::Name)?;
            let frames = read_u32(r)? as usize;
            let mut v = VideoFrames::new(
                read_u32(r)? as usize,
                read_u32(r)? as usize,
                read_u32(r)? as usize,
            );
            let expected = frames * v.frame_len();
            r.take(expected as u64).read_to_end(&mut v.pixels)?;
            if v.pixels.len() != expected {
                return Err(FrameError::Size {
                    video_id: id,
                    expected,
                    got: v.pixels.len(),
                });
            }
            videos.insert(id, v);
        }
        Ok(Self { videos })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_exact_vec(r: &mut impl Read, n: usize) -> io::Result<Vec<u8>> {
    let mut b = Vec::with_capacity(n.min(1 << 26));
    r.take(n as u64).read_to_end(&mut b)?;
    if b.len() != n {
        return Err(io::ErrorKind::UnexpectedEof.into());
    }
    Ok(b)
}
