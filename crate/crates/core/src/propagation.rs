//! Label propagation between frames through cosine similarity of matching
//! features and top-K weighted voting.

use crate::engine::{self, Tape, Tensor, Var};
use crate::error::{shape_err, Result, SpnError};
use crate::label::LabelMap;
use crate::model::SpnModel;
use crate::scalar::Scalar;

/// Dense `rows x cols` cosine affinities: row `i` is a target-grid point, column
/// `j` a source-grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix<S> {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<S>,
}

impl<S: Scalar> SimilarityMatrix<S> {
    pub fn get(&self, i: usize, j: usize) -> S {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

/// What gets propagated out of the source frame.
#[derive(Clone, Copy, Debug)]
pub enum SourceMap<'a, S> {
    /// Ground-truth classes, nearest-downsampled then one-hot encoded.
    Labels(&'a LabelMap),
    /// Full-resolution `1 x C x H x W` probabilities, area-averaged then renormalised.
    Probs(&'a Tensor<S>),
}

impl<'a, S> SourceMap<'a, S> {
    /// Prefers labels when the frame has them, otherwise a probability map.
    pub fn pick(labels: Option<&'a LabelMap>, probs: Option<&'a Tensor<S>>) -> Result<Self> {
        match (labels, probs) {
            (Some(l), _) => Ok(SourceMap::Labels(l)),
            (None, Some(p)) => Ok(SourceMap::Probs(p)),
            (None, None) => Err(SpnError::InvalidArgument(
                "cannot propagate from an unlabeled source frame without a probability map".into(),
            )),
        }
    }
}

fn flatten_grid<S: Scalar>(tape: &mut Tape<S>, features: Var) -> Result<(Var, usize, usize)> {
    let [n, d, h, w] = tape.value(features).nchw()?;
    if n != 1 {
        return Err(shape_err!("feature map batch must be 1, got {n}"));
    }
    Ok((tape.reshape(features, &[d, h * w])?, h, w))
}

/// Cosine similarity between every target point and every source point of
/// two `1 x D x h x w` feature maps.
pub fn similarity_matrix<S: Scalar>(tape: &mut Tape<S>, target: Var, source: Var) -> Result<Var> {
    let (t, _, _) = flatten_grid(tape, target)?;
    let (s, _, _) = flatten_grid(tape, source)?;
    tape.cosine_similarity(t, s)
}

/// Top-K softmax aggregation: `sim` is `Nm x Nn`, `source` is a `1 x C x h' x w'`
/// map of per-point class vectors with `h' * w' = Nn`. Returns the
/// `1 x C x h x w` propagated distribution on the target grid.
pub fn propagate_labels<S: Scalar>(
    tape: &mut Tape<S>,
    sim: Var,
    source: Var,
    k: usize,
    target_grid: (usize, usize),
) -> Result<Var> {
    let [_, c, sh, sw] = tape.value(source).nchw()?;
    let rows = tape.value(sim).shape()[0];
    if rows != target_grid.0 * target_grid.1 {
        return Err(shape_err!("{rows} similarity rows for a {}x{} target grid", target_grid.0, target_grid.1));
    }
    let flat = tape.reshape(source, &[c, sh * sw])?;
    let scores = tape.top_k_aggregate(sim, flat, k)?;
    let grid = tape.reshape(scores, &[1, c, target_grid.0, target_grid.1])?;
    tape.softmax_channel(grid)
}

/// Brings a source map down to the feature grid.
pub fn source_on_grid<S: Scalar>(
    tape: &mut Tape<S>,
    source: SourceRef,
    stride: usize,
    num_classes: usize,
) -> Result<Var> {
    match source {
        SourceRef::Labels(labels) => {
            let small = labels.downsample_nearest(stride)?;
            Ok(tape.constant(small.one_hot(num_classes)?))
        }
        SourceRef::Probs(var) => {
            let pooled = tape.avg_pool(var, stride)?;
            tape.normalize_channel(pooled)
        }
    }
}

/// A propagation source already present on a tape.
#[derive(Clone, Copy, Debug)]
pub enum SourceRef<'a> {
    Labels(&'a LabelMap),
    Probs(Var),
}

/// Propagates `source` from the frame with matching features `fp_source` to the
/// frame with features `fp_target`; output is full resolution, renormalised.
pub fn propagate_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    fp_target: Var,
    fp_source: Var,
    source: SourceRef,
    k: usize,
    stride: usize,
    num_classes: usize,
) -> Result<Var> {
    let [_, _, h, w] = tape.value(fp_target).nchw()?;
    let sim = similarity_matrix(tape, fp_target, fp_source)?;
    let src = source_on_grid(tape, source, stride, num_classes)?;
    let grid = propagate_labels(tape, sim, src, k, (h, w))?;
    let up = tape.upsample_bilinear(grid, stride)?;
    tape.normalize_channel(up)
}

/// Cosine similarity of two frozen `1 x D x h x w` (or `D x h x w`) feature maps.
pub fn similarity_values<S: Scalar>(target: &Tensor<S>, source: &Tensor<S>) -> Result<SimilarityMatrix<S>> {
    let as4 = |t: &Tensor<S>| match t.shape() {
        &[d, h, w] => t.clone().reshape(&[1, d, h, w]),
        _ => Ok(t.clone()),
    };
    let mut tape = Tape::new();
    let t = tape.constant(as4(target)?);
    let s = tape.constant(as4(source)?);
    let m = similarity_matrix(&mut tape, t, s)?;
    let v = tape.value(m);
    Ok(SimilarityMatrix { rows: v.shape()[0], cols: v.shape()[1], values: v.data().to_vec() })
}

/// Frozen evaluation of the top-K aggregation on an explicit similarity
/// matrix. `source` holds one class vector per source point (`Nn x C`,
/// point-major); the result is `Nm x C`, point-major.
pub fn propagate_values<S: Scalar>(sim: &SimilarityMatrix<S>, source: &[Vec<S>], k: usize) -> Result<Vec<Vec<S>>> {
    if source.len() != sim.cols {
        return Err(shape_err!("{} source points for {} similarity columns", source.len(), sim.cols));
    }
    let c = source.first().map_or(0, |v| v.len());
    if c == 0 || source.iter().any(|v| v.len() != c) {
        return Err(shape_err!("source class vectors must be non-empty and equal length"));
    }
    let mut tape = Tape::new();
    let m = tape.constant(Tensor::new(vec![sim.rows, sim.cols], sim.values.clone())?);
    let src = Tensor::from_fn(&[1, c, 1, sim.cols], |i| source[i % sim.cols][i / sim.cols]);
    let sv = tape.constant(src);
    let out = propagate_labels(&mut tape, m, sv, k, (1, sim.rows))?;
    let d = tape.value(out).data();
    Ok((0..sim.rows).map(|i| (0..c).map(|ch| d[ch * sim.rows + i]).collect()).collect())
}

/// Indices of the top-`k` entries of a similarity row (ties to the lower
/// index), ascending.
pub fn top_k<S: Scalar>(row: &[S], k: usize) -> Vec<usize> {
    engine::top_k_indices(row, k.min(row.len()), &mut Vec::new())
}

/// Propagates a source frame's labels or probabilities to a target frame using
/// a frozen model. Returns full-resolution `1 x C x H x W` probabilities.
pub fn propagate_full<S: Scalar>(
    model: &SpnModel<S>,
    source_frame: &Tensor<S>,
    target_frame: &Tensor<S>,
    source: SourceMap<'_, S>,
    k: usize,
) -> Result<Tensor<S>> {
    let cfg = model.config();
    let mut tape = Tape::new();
    let bound = model.bind_frozen(&mut tape);
    let xs = tape.constant(source_frame.clone());
    let xt = tape.constant(target_frame.clone());
    let fs = model.encode(&mut tape, &bound, xs)?;
    let ft = model.encode(&mut tape, &bound, xt)?;
    let ps = model.prop_features(&mut tape, &bound, fs)?;
    let pt = model.prop_features(&mut tape, &bound, ft)?;
    let src = match source {
        SourceMap::Labels(l) => SourceRef::Labels(l),
        SourceMap::Probs(p) => SourceRef::Probs(tape.constant(p.clone())),
    };
    let out = propagate_on_tape(&mut tape, pt, ps, src, k, cfg.output_stride, cfg.num_classes)?;
    Ok(tape.value(out).clone())
}

/// Like [`propagate_full`] but reuses precomputed propagation features of
/// both frames (`1 x D x h x w`).
pub fn propagate_from_features<S: Scalar>(
    fp_source: &Tensor<S>,
    fp_target: &Tensor<S>,
    source: SourceMap<'_, S>,
    k: usize,
    stride: usize,
    num_classes: usize,
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let ps = tape.constant(fp_source.clone());
    let pt = tape.constant(fp_target.clone());
    let src = match source {
        SourceMap::Labels(l) => SourceRef::Labels(l),
        SourceMap::Probs(p) => SourceRef::Probs(tape.constant(p.clone())),
    };
    let out = propagate_on_tape(&mut tape, pt, ps, src, k, stride, num_classes)?;
    Ok(tape.value(out).clone())
}
