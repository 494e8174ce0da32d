//! Multi-source inference: clip partition from a Gaussian model of
//! consecutive-frame differences, middle key frames segmented directly,
//! everything else propagated from its clip's key frame.

use std::fmt;

use crate::engine::{Tape, Tensor};
use crate::error::{shape_err, Result, SpnError};
use crate::label::LabelMap;
use crate::model::SpnModel;
use crate::propagation::{propagate_from_features, SourceMap};
use crate::scalar::Scalar;

/// Consecutive-frame differences and their fitted Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffStats {
    pub diffs: Vec<f64>,
    pub mu: f64,
    /// Population standard deviation.
    pub sigma: f64,
}

/// Mean over pixels and channels of `|frame[k+1] - frame[k]|`.
pub fn frame_diffs<S: Scalar>(frames: &[Tensor<S>]) -> Result<DiffStats> {
    if let Some(first) = frames.first() {
        if let Some(bad) = frames.iter().position(|f| f.shape() != first.shape()) {
            return Err(shape_err!("frame {bad} has shape {:?}, expected {:?}", frames[bad].shape(), first.shape()));
        }
    }
    let diffs: Vec<f64> = frames
        .windows(2)
        .map(|w| {
            let n = w[0].len().max(1) as f64;
            w[0].data().iter().zip(w[1].data()).map(|(a, b)| (b.as_f64() - a.as_f64()).abs()).sum::<f64>() / n
        })
        .collect();
    let (mu, sigma) = if diffs.is_empty() {
        (0.0, 0.0)
    } else {
        let n = diffs.len() as f64;
        let mu = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mu) * (d - mu)).sum::<f64>() / n;
        (mu, var.sqrt())
    };
    Ok(DiffStats { diffs, mu, sigma })
}

/// Standard normal quantile by Acklam's rational approximation
/// (relative error below 1.2e-9).
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(SpnError::InvalidArgument(format!("quantile level {p} outside (0, 1)")));
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02, 6.680131188771972e+01, -1.328068155288572e+01];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00, 3.754408661907416e+00];
    const P_LOW: f64 = 0.02425;
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5]) / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    Ok(if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    })
}

/// `mu + z(alpha) * sigma`.
pub fn watershed_threshold(stats: &DiffStats, alpha: f64) -> Result<f64> {
    let z = normal_quantile(alpha)?;
    Ok(stats.mu + z * stats.sigma)
}

/// Frames `k + 1` whose preceding difference `diff_k` exceeds the threshold.
pub fn watershed_frames(stats: &DiffStats, threshold: f64) -> Vec<usize> {
    stats.diffs.iter().enumerate().filter(|(_, &d)| d > threshold).map(|(k, _)| k + 1).collect()
}

/// A contiguous run of frames `start..end` with its key frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Clip {
    pub start: usize,
    pub end: usize,
    pub key: usize,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.start..self.end).contains(&i)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipPartition {
    pub clips: Vec<Clip>,
    pub watersheds: Vec<usize>,
}

impl ClipPartition {
    pub fn clip_of(&self, frame: usize) -> Option<&Clip> {
        self.clips.iter().find(|c| c.contains(frame))
    }

    pub fn keys(&self) -> Vec<usize> {
        self.clips.iter().map(|c| c.key).collect()
    }
}

impl fmt::Display for ClipPartition {
    /// `watershed=<i,...> clips=<a..b;...> keys=<k,...>` with inclusive clip bounds.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: Vec<String>, sep: &str| v.join(sep);
        write!(
            f,
            "watershed={} clips={} keys={}",
            join(self.watersheds.iter().map(|w| w.to_string()).collect(), ","),
            join(self.clips.iter().map(|c| format!("{}..{}", c.start, c.end - 1)).collect(), ";"),
            join(self.keys().iter().map(|k| k.to_string()).collect(), ",")
        )
    }
}

/// Splits `0..t` at every watershed frame; each clip's key frame is
/// `(start + last) / 2` rounded down.
pub fn partition_clips(t: usize, watersheds: &[usize]) -> Result<ClipPartition> {
    if t == 0 {
        return Err(SpnError::InvalidArgument("cannot partition an empty video".into()));
    }
    let mut prev = 0;
    for &w in watersheds {
        if w <= prev || w >= t {
            return Err(SpnError::InvalidArgument(format!("watershed indices {watersheds:?} must be strictly increasing in [1, {t})")));
        }
        prev = w;
    }
    let bounds: Vec<usize> = std::iter::once(0).chain(watersheds.iter().copied()).chain(std::iter::once(t)).collect();
    let clips = bounds
        .windows(2)
        .map(|b| Clip { start: b[0], end: b[1], key: (b[0] + b[1] - 1) / 2 })
        .collect();
    Ok(ClipPartition { clips, watersheds: watersheds.to_vec() })
}

/// Diffs, threshold and partition of a frame sequence in one call. Videos
/// shorter than two frames form a single clip.
pub fn select_key_frames<S: Scalar>(frames: &[Tensor<S>], alpha: f64) -> Result<(DiffStats, f64, ClipPartition)> {
    let stats = frame_diffs(frames)?;
    let threshold = watershed_threshold(&stats, alpha)?;
    let ws = if frames.len() < 2 { Vec::new() } else { watershed_frames(&stats, threshold) };
    let part = partition_clips(frames.len(), &ws)?;
    Ok((stats, threshold, part))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferMode {
    /// Key frames segmented, other frames propagated.
    Msi,
    /// Every frame segmented independently.
    SegOnly,
}

impl fmt::Display for InferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InferMode::Msi => "msi",
            InferMode::SegOnly => "seg-only",
        })
    }
}

impl std::str::FromStr for InferMode {
    type Err = SpnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msi" => Ok(InferMode::Msi),
            "seg-only" => Ok(InferMode::SegOnly),
            _ => Err(SpnError::InvalidArgument(format!("unknown inference mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MsiConfig {
    pub alpha: f64,
    pub k: usize,
    pub mode: InferMode,
    /// Propagate the key frame's argmax labels instead of its probabilities.
    pub hard_source: bool,
}

impl Default for MsiConfig {
    fn default() -> Self {
        MsiConfig { alpha: 0.98, k: 20, mode: InferMode::Msi, hard_source: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MsiOutput {
    pub labels: Vec<LabelMap>,
    pub partition: ClipPartition,
    pub threshold: f64,
    /// Full segmentation-branch forwards performed.
    pub seg_calls: usize,
}

struct FrameOutputs<S> {
    probs: Option<Tensor<S>>,
    prop: Tensor<S>,
}

fn run_frame<S: Scalar>(model: &SpnModel<S>, frame: &Tensor<S>, seg: bool, prop: bool) -> Result<FrameOutputs<S>> {
    let mut tape = Tape::new();
    let bound = model.bind_frozen(&mut tape);
    let x = tape.constant(frame.clone());
    let f = model.encode(&mut tape, &bound, x)?;
    let probs = if seg {
        let o = model.seg_forward(&mut tape, &bound, f)?;
        Some(tape.value(o).clone())
    } else {
        None
    };
    let prop = if prop {
        let p = model.prop_features(&mut tape, &bound, f)?;
        tape.value(p).clone()
    } else {
        Tensor::zeros(&[0])
    };
    Ok(FrameOutputs { probs, prop })
}

/// Segments a video (frames `3 x H x W` in [0, 1]) with a frozen model.
pub fn msi_infer<S: Scalar>(model: &SpnModel<S>, frames: &[Tensor<S>], cfg: &MsiConfig) -> Result<MsiOutput> {
    let (_, threshold, partition) = select_key_frames(frames, cfg.alpha)?;
    let mcfg = model.config();
    let mut labels: Vec<Option<LabelMap>> = vec![None; frames.len()];
    let mut seg_calls = 0;
    match cfg.mode {
        InferMode::SegOnly => {
            for (i, f) in frames.iter().enumerate() {
                let out = run_frame(model, f, true, false)?;
                seg_calls += 1;
                labels[i] = Some(LabelMap::argmax(out.probs.as_ref().expect("segmented"))?);
            }
        }
        InferMode::Msi => {
            for clip in &partition.clips {
                let key = run_frame(model, &frames[clip.key], true, clip.len() > 1)?;
                seg_calls += 1;
                let key_probs = key.probs.expect("segmented");
                let key_labels = LabelMap::argmax(&key_probs)?;
                for i in clip.start..clip.end {
                    if i == clip.key {
                        continue;
                    }
                    let target = run_frame(model, &frames[i], false, true)?;
                    let source = if cfg.hard_source { SourceMap::Labels(&key_labels) } else { SourceMap::Probs(&key_probs) };
                    let p = propagate_from_features(&key.prop, &target.prop, source, cfg.k, mcfg.output_stride, mcfg.num_classes)?;
                    labels[i] = Some(LabelMap::argmax(&p)?);
                }
                labels[clip.key] = Some(key_labels);
            }
        }
    }
    Ok(MsiOutput { labels: labels.into_iter().map(|l| l.expect("every frame covered")).collect(), partition, threshold, seg_calls })
}

/// Colours of background, head, arm, torso, leg.
pub const PALETTE: [[u8; 3]; 5] = [[0, 0, 0], [255, 0, 0], [0, 255, 0], [0, 0, 255], [255, 255, 0]];

/// Interleaved RGB rendering of a label map with [`PALETTE`].
pub fn overlay(labels: &LabelMap) -> Vec<u8> {
    labels.data().iter().flat_map(|&c| PALETTE[(c as usize).min(PALETTE.len() - 1)]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Standard normal CDF from the Maclaurin series of erf.
    fn phi(x: f64) -> f64 {
        let z = x / std::f64::consts::SQRT_2;
        let mut term = z;
        let mut sum = z;
        for n in 1..200 {
            term *= -z * z / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        0.5 * (1.0 + sum * 2.0 / std::f64::consts::PI.sqrt())
    }

    fn quantile_oracle(p: f64) -> f64 {
        let (mut lo, mut hi) = (-6.0, 6.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if phi(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn quantile_matches_bisection_oracle() {
        for &p in &[0.001, 0.01, 0.02, 0.03, 0.1, 0.3, 0.5, 0.7, 0.9, 0.97, 0.98, 0.99, 0.999] {
            let z = normal_quantile(p).unwrap();
            assert!((z - quantile_oracle(p)).abs() < 1e-6, "p = {p}");
        }
        assert!((normal_quantile(0.98).unwrap() - 2.0537489106318225).abs() < 1e-6);
        assert!(normal_quantile(0.0).is_err() && normal_quantile(1.0).is_err());
    }

    fn flat(v: f64, h: usize, w: usize) -> Tensor<f64> {
        Tensor::full(&[3, h, w], v)
    }

    #[test]
    fn diff_examples() {
        let s = frame_diffs(&[flat(0.3, 4, 4), flat(0.3, 4, 4)]).unwrap();
        assert_eq!(s.diffs, vec![0.0]);
        let s = frame_diffs(&[flat(0.0, 4, 4), flat(1.0, 4, 4)]).unwrap();
        assert_eq!(s.diffs, vec![1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: Tensor<f64> = Tensor::from_fn(&[3, 5, 7], |_| rng.gen_range(0.0..1.0));
        let b: Tensor<f64> = Tensor::from_fn(&[3, 5, 7], |_| rng.gen_range(0.0..1.0));
        let mut acc = 0.0f64;
        for i in 0..a.len() {
            acc += (a.data()[i] - b.data()[i]).abs();
        }
        assert!((frame_diffs(&[a, b]).unwrap().diffs[0] - acc / 105.0).abs() < 1e-12);
        assert!(frame_diffs(&[flat(0.0, 4, 4), flat(0.0, 4, 8)]).is_err());
    }

    #[test]
    fn threshold_example() {
        let mut diffs = vec![0.1; 9];
        diffs.push(0.9);
        let stats = DiffStats { mu: 0.18, sigma: 0.24, diffs: diffs.clone() };
        let fitted = {
            let n = diffs.len() as f64;
            let mu = diffs.iter().sum::<f64>() / n;
            (mu, (diffs.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / n).sqrt())
        };
        assert!((fitted.0 - 0.18).abs() < 1e-12 && (fitted.1 - 0.24).abs() < 1e-12);
        let thr = watershed_threshold(&stats, 0.98).unwrap();
        assert!((thr - (0.18 + 0.24 * quantile_oracle(0.98))).abs() < 1e-7);
        assert!((thr - 0.6729).abs() < 1e-4);
        assert_eq!(watershed_frames(&stats, thr), vec![10]);
        assert!(watershed_threshold(&stats, 1.0).is_err());
    }

    #[test]
    fn equal_diffs_give_one_clip() {
        let frames: Vec<Tensor<f64>> = (0..6).map(|i| flat(i as f64 * 0.1, 4, 4)).collect();
        let (stats, thr, part) = select_key_frames(&frames, 0.98).unwrap();
        assert!(stats.sigma < 1e-12);
        assert!((thr - stats.mu).abs() < 1e-12);
        assert_eq!(part.clips.len(), 1);
    }

    #[test]
    fn partition_examples() {
        let p = partition_clips(7, &[]).unwrap();
        assert_eq!(p.clips, vec![Clip { start: 0, end: 7, key: 3 }]);
        let p = partition_clips(10, &[4]).unwrap();
        assert_eq!(p.clips, vec![Clip { start: 0, end: 4, key: 1 }, Clip { start: 4, end: 10, key: 6 }]);
        assert_eq!(p.to_string(), "watershed=4 clips=0..3;4..9 keys=1,6");
        let p = partition_clips(1, &[]).unwrap();
        assert_eq!(p.keys(), vec![0]);
        assert!(partition_clips(5, &[0]).is_err());
        assert!(partition_clips(5, &[5]).is_err());
        assert!(partition_clips(5, &[3, 2]).is_err());
        assert!(partition_clips(5, &[2, 2]).is_err());
        assert!(partition_clips(0, &[]).is_err());
        assert_eq!(partition_clips(4, &[]).unwrap().to_string(), "watershed= clips=0..3 keys=1");
    }

    fn tiny_model() -> SpnModel<f64> {
        SpnModel::new(ModelConfig { base_width: 4, head_width: 4, prop_feature_dim: 4, seed: 2, ..Default::default() }).unwrap()
    }

    #[test]
    fn identical_frames_single_clip_single_segmentation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Tensor::from_fn(&[3, 16, 16], |_| rng.gen_range(0.0..1.0));
        let frames = vec![f; 5];
        let model = tiny_model();
        let out = msi_infer(&model, &frames, &MsiConfig { k: 3, ..Default::default() }).unwrap();
        assert_eq!(out.partition.clips.len(), 1);
        assert_eq!(out.seg_calls, 1);
        assert_eq!(out.labels.len(), 5);
        let seg = msi_infer(&model, &frames, &MsiConfig { k: 3, mode: InferMode::SegOnly, ..Default::default() }).unwrap();
        assert_eq!(seg.seg_calls, 5);
        let key = out.partition.clips[0].key;
        assert_eq!(out.labels[key], seg.labels[key]);
    }

    #[test]
    fn overlay_uses_palette() {
        let l = LabelMap::new(5, 1, vec![0, 1, 2, 3, 4]).unwrap();
        assert_eq!(overlay(&l), vec![0, 0, 0, 255, 0, 0, 0, 255, 0, 0, 0, 255, 255, 255, 0]);
    }
}
