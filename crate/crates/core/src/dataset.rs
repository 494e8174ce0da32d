//! On-disk video datasets.
//!
//! ```text
//! DIR/manifest.txt              "SPNDATA1" then "<id> <frames> <train|test>" per line
//! DIR/<id>/frame_%04d.ppm       P6 frames
//! DIR/<id>/label_%04d.pgm       P5 class maps; absent for unlabeled frames
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::engine::Tensor;
use crate::error::{Result, SpnError};
use crate::label::LabelMap;
use crate::model::NUM_CLASSES;
use crate::pnm::{self, Image};
use crate::scalar::Scalar;

pub const MANIFEST_HEADER: &str = "SPNDATA1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = SpnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(SpnError::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

/// An 8-bit RGB frame, interleaved row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(SpnError::Shape(format!("{width}x{height} RGB frame with {} bytes", data.len())));
        }
        Ok(Frame { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// `3 x H x W` tensor with values in [0, 1].
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        let hw = self.width * self.height;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            let (c, p) = (i / hw, i % hw);
            S::lit(self.data[p * 3 + c] as f64 / 255.0)
        })
    }

    /// Quantises a `3 x H x W` tensor in [0, 1] (values are clamped).
    pub fn from_tensor<S: Scalar>(t: &Tensor<S>) -> Result<Self> {
        let &[3, h, w] = t.shape() else {
            return Err(SpnError::Shape(format!("frame tensor must be 3xHxW, got {:?}", t.shape())));
        };
        let hw = h * w;
        let mut data = vec![0u8; hw * 3];
        for (i, v) in t.data().iter().enumerate() {
            let (c, p) = (i / hw, i % hw);
            data[p * 3 + c] = (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        Ok(Frame { width: w, height: h, data })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Video {
    pub id: String,
    pub split: Split,
    pub frames: Vec<Frame>,
    /// One entry per frame; `None` marks an unlabeled frame.
    pub labels: Vec<Option<LabelMap>>,
}

impl Video {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i].is_some()).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i].is_none()).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains(|c: char| c.is_whitespace() || c == '/' || c == '\\') || self.id == "." || self.id == ".." {
            return Err(SpnError::Data(format!("invalid video id {:?}", self.id)));
        }
        if self.labels.len() != self.frames.len() {
            return Err(SpnError::Data(format!("{}: {} frames but {} label slots", self.id, self.frames.len(), self.labels.len())));
        }
        if let Some(first) = self.frames.first() {
            for (i, f) in self.frames.iter().enumerate() {
                if (f.width, f.height) != (first.width, first.height) {
                    return Err(SpnError::Data(format!("{}: frame {i} is {}x{}, expected {}x{}", self.id, f.width, f.height, first.width, first.height)));
                }
                if let Some(l) = &self.labels[i] {
                    if (l.width(), l.height()) != (f.width, f.height) {
                        return Err(SpnError::Data(format!("{}: label {i} does not match frame size", self.id)));
                    }
                    if l.max_class().is_some_and(|c| c as usize >= NUM_CLASSES) {
                        return Err(SpnError::Data(format!("{}: label {i} has class index > {}", self.id, NUM_CLASSES - 1)));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VideoDataset {
    pub videos: Vec<Video>,
}

pub fn frame_path(dir: &Path, id: &str, index: usize) -> PathBuf {
    dir.join(id).join(format!("frame_{index:04}.ppm"))
}

pub fn label_path(dir: &Path, id: &str, index: usize) -> PathBuf {
    dir.join(id).join(format!("label_{index:04}.pgm"))
}

/// Reads a class-index map, rejecting indices outside the class set.
pub fn read_label(path: &Path) -> Result<LabelMap> {
    let img = pnm::read(path)?;
    if img.channels != 1 {
        return Err(SpnError::format(path, "label map must be a P5 greymap"));
    }
    if let Some(&c) = img.data.iter().find(|&&c| c as usize >= NUM_CLASSES) {
        return Err(SpnError::format(path, format!("class index {c} > {}", NUM_CLASSES - 1)));
    }
    LabelMap::new(img.width, img.height, img.data)
}

pub fn write_label(path: &Path, label: &LabelMap) -> Result<()> {
    pnm::write(path, &Image { width: label.width(), height: label.height(), channels: 1, data: label.data().to_vec() })
}

pub fn read_frame(path: &Path) -> Result<Frame> {
    let img = pnm::read(path)?;
    if img.channels != 3 {
        return Err(SpnError::format(path, "frame must be a P6 pixmap"));
    }
    Frame::new(img.width, img.height, img.data)
}

pub fn write_frame(path: &Path, frame: &Frame) -> Result<()> {
    pnm::write(path, &Image { width: frame.width, height: frame.height, channels: 3, data: frame.data.clone() })
}

fn parse_manifest(text: &str, path: &Path) -> Result<Vec<(String, usize, Split)>> {
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(SpnError::format(path, format!("missing {MANIFEST_HEADER} header")));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || SpnError::format(path, format!("line {}: expected `<id> <frames> <train|test>`", n + 2));
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [id, frames, split] = parts[..] else { return Err(bad()) };
        let frames = frames.parse().map_err(|_| bad())?;
        let split = split.parse().map_err(|_| bad())?;
        if out.iter().any(|(other, _, _)| other == id) {
            return Err(SpnError::format(path, format!("duplicate video id {id}")));
        }
        out.push((id.to_owned(), frames, split));
    }
    Ok(out)
}

impl VideoDataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = dir.join("manifest.txt");
        let text = fs::read_to_string(&manifest).map_err(|e| SpnError::io(&manifest, e))?;
        let mut videos = Vec::new();
        for (id, n, split) in parse_manifest(&text, &manifest)? {
            let mut frames = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let fp = frame_path(dir, &id, i);
                let frame = read_frame(&fp)?;
                if let Some(first) = frames.first() {
                    let first: &Frame = first;
                    if (frame.width, frame.height) != (first.width, first.height) {
                        return Err(SpnError::format(&fp, format!("{}x{} frame, expected {}x{}", frame.width, frame.height, first.width, first.height)));
                    }
                }
                let lp = label_path(dir, &id, i);
                let label = if lp.exists() {
                    let l = read_label(&lp)?;
                    if (l.width(), l.height()) != (frame.width, frame.height) {
                        return Err(SpnError::format(&lp, format!("{}x{} label for a {}x{} frame", l.width(), l.height(), frame.width, frame.height)));
                    }
                    Some(l)
                } else {
                    None
                };
                frames.push(frame);
                labels.push(label);
            }
            videos.push(Video { id, split, frames, labels });
        }
        Ok(VideoDataset { videos })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for v in &self.videos {
            v.validate()?;
        }
        fs::create_dir_all(dir).map_err(|e| SpnError::io(dir, e))?;
        let mut manifest = format!("{MANIFEST_HEADER}\n");
        for v in &self.videos {
            manifest.push_str(&format!("{} {} {}\n", v.id, v.len(), v.split));
            let vdir = dir.join(&v.id);
            fs::create_dir_all(&vdir).map_err(|e| SpnError::io(&vdir, e))?;
            for (i, f) in v.frames.iter().enumerate() {
                write_frame(&frame_path(dir, &v.id, i), f)?;
                if let Some(l) = &v.labels[i] {
                    write_label(&label_path(dir, &v.id, i), l)?;
                }
            }
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| SpnError::io(&path, e))
    }

    pub fn video(&self, id: &str) -> Result<&Video> {
        self.videos
            .iter()
            .find(|v| v.id == id)
            .ok_or_else(|| SpnError::Data(format!("no video {id:?} in dataset")))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Video> {
        self.videos.iter().filter(move |v| v.split == split)
    }
}
