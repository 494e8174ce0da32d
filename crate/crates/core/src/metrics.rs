//! Dice over foreground one-hot maps and pixel accuracy.

use crate::error::{shape_err, Result, SpnError};
use crate::label::LabelMap;

fn check(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(shape_err!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        ));
    }
    Ok(())
}

/// Joint foreground Dice `2|P ∩ G| / (|P| + |G|)` over one-hot channels
/// `1..num_classes` (class 0 is background and ignored).
///
/// Both foregrounds empty scores 1.0; exactly one empty scores 0.0.
pub fn dice_frame(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<f64> {
    check(pred, gt)?;
    let mut inter = 0usize;
    let mut p_count = 0usize;
    let mut g_count = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if p as usize >= num_classes || g as usize >= num_classes {
            return Err(SpnError::InvalidArgument(format!("class index >= {num_classes}")));
        }
        let (pf, gf) = (p != 0, g != 0);
        p_count += pf as usize;
        g_count += gf as usize;
        inter += (pf && gf && p == g) as usize;
    }
    Ok(match (p_count, g_count) {
        (0, 0) => 1.0,
        _ => 2.0 * inter as f64 / (p_count + g_count) as f64,
    })
}

/// Per-class Dice for one frame; `None` where the class is absent from both maps.
pub fn dice_per_class(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<Vec<Option<f64>>> {
    check(pred, gt)?;
    let mut inter = vec![0usize; num_classes];
    let mut pc = vec![0usize; num_classes];
    let mut gc = vec![0usize; num_classes];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p as usize, g as usize);
        if p >= num_classes || g >= num_classes {
            return Err(SpnError::InvalidArgument(format!("class index >= {num_classes}")));
        }
        pc[p] += 1;
        gc[g] += 1;
        if p == g {
            inter[p] += 1;
        }
    }
    Ok((0..num_classes)
        .map(|c| (pc[c] + gc[c] > 0).then(|| 2.0 * inter[c] as f64 / (pc[c] + gc[c]) as f64))
        .collect())
}

/// Fraction of all pixels (background included) where the maps agree.
pub fn pixel_accuracy(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    check(pred, gt)?;
    if gt.is_empty() {
        return Ok(1.0);
    }
    let agree = pred.data().iter().zip(gt.data()).filter(|(p, g)| p == g).count();
    Ok(agree as f64 / gt.len() as f64)
}

/// Dice over a set of labeled frames.
#[derive(Clone, Debug, PartialEq)]
pub struct DiceReport {
    pub per_frame: Vec<f64>,
    /// Mean over frames in which the class occurs in prediction or ground truth;
    /// index 0 is background.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    pub frames: usize,
}

impl DiceReport {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a LabelMap, &'a LabelMap)>, num_classes: usize) -> Result<Self> {
        let mut per_frame = Vec::new();
        let mut class_sum = vec![0.0; num_classes];
        let mut class_n = vec![0usize; num_classes];
        for (pred, gt) in pairs {
            per_frame.push(dice_frame(pred, gt, num_classes)?);
            for (c, d) in dice_per_class(pred, gt, num_classes)?.into_iter().enumerate() {
                if let Some(d) = d {
                    class_sum[c] += d;
                    class_n[c] += 1;
                }
            }
        }
        let frames = per_frame.len();
        let mean = if frames == 0 { 0.0 } else { per_frame.iter().sum::<f64>() / frames as f64 };
        let per_class = (0..num_classes).map(|c| (class_n[c] > 0).then(|| class_sum[c] / class_n[c] as f64)).collect();
        Ok(DiceReport { per_frame, per_class, mean, frames })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_examples() {
        let gt = LabelMap::new(2, 2, vec![1, 1, 1, 1]).unwrap();
        assert_eq!(dice_frame(&gt, &gt, 5).unwrap(), 1.0);
        let half = LabelMap::new(2, 2, vec![1, 1, 2, 2]).unwrap();
        assert_eq!(dice_frame(&half, &gt, 5).unwrap(), 0.5);
        let a = LabelMap::new(4, 1, vec![1, 1, 0, 0]).unwrap();
        let b = LabelMap::new(4, 1, vec![0, 0, 3, 3]).unwrap();
        assert_eq!(dice_frame(&a, &b, 5).unwrap(), 0.0);
    }

    #[test]
    fn empty_foreground_conventions() {
        let bg = LabelMap::filled(3, 3, 0);
        let fg = LabelMap::filled(3, 3, 2);
        assert_eq!(dice_frame(&bg, &bg, 5).unwrap(), 1.0);
        assert_eq!(dice_frame(&bg, &fg, 5).unwrap(), 0.0);
        assert_eq!(dice_frame(&fg, &bg, 5).unwrap(), 0.0);
    }

    #[test]
    fn pixel_accuracy_examples() {
        let a = LabelMap::from_fn(4, 4, |x, y| ((x + y) % 2) as u8);
        assert_eq!(pixel_accuracy(&a, &a).unwrap(), 1.0);
        let comp = LabelMap::from_fn(4, 4, |x, y| (1 - (x + y) % 2) as u8);
        assert_eq!(pixel_accuracy(&a, &comp).unwrap(), 0.0);
        let zeros = LabelMap::filled(4, 4, 0);
        assert_eq!(pixel_accuracy(&a, &zeros).unwrap(), 0.5);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(dice_frame(&LabelMap::filled(2, 2, 0), &LabelMap::filled(2, 3, 0), 5).is_err());
        assert!(pixel_accuracy(&LabelMap::filled(2, 2, 0), &LabelMap::filled(3, 2, 0)).is_err());
    }

    #[test]
    fn report_averages_frames() {
        let gt = LabelMap::new(2, 2, vec![1, 1, 1, 1]).unwrap();
        let half = LabelMap::new(2, 2, vec![1, 1, 2, 2]).unwrap();
        let r = DiceReport::from_pairs([(&gt, &gt), (&half, &gt)], 5).unwrap();
        assert_eq!(r.per_frame, vec![1.0, 0.5]);
        assert_eq!(r.mean, 0.75);
        assert_eq!(r.per_class[1], Some((1.0 + 2.0 / 3.0) / 2.0));
        assert_eq!(r.per_class[2], Some(0.0));
        assert_eq!(r.per_class[3], None);
    }
}
