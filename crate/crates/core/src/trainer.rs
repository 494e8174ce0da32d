//! Joint training of both branches under the annealed three-case schedule.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aat::{build_pools, AatConfig, Case, CaseSampler, FrameSets, Pair};
use crate::augment::{sample_preserving, Augmentation};
use crate::dataset::{Split, VideoDataset};
use crate::engine::{sgd_momentum_step, MomentumState, Tape, Tensor, Var};
use crate::error::{Result, SpnError};
use crate::label::LabelMap;
use crate::losses::{ce_loss, loss_case1, loss_case2, loss_case3, CaseLoss, LossBreakdown, SemiSupervisedMaps, SupervisedMaps};
use crate::metrics::pixel_accuracy;
use crate::model::{Branch, ModelConfig, SpnModel};
use crate::propagation::{propagate_full, propagate_on_tape, SourceMap, SourceRef};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Full,
    /// Supervised pairs only.
    NoSsl,
    /// Consistency weight forced to zero.
    NoConsistency,
    /// Encoder and segmentation head on supervised pairs, segmentation loss only.
    SegOnly,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Full => "full",
            TrainMode::NoSsl => "no-ssl",
            TrainMode::NoConsistency => "no-consistency",
            TrainMode::SegOnly => "seg-only",
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TrainMode {
    type Err = SpnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TrainMode::Full),
            "no-ssl" => Ok(TrainMode::NoSsl),
            "no-consistency" => Ok(TrainMode::NoConsistency),
            "seg-only" => Ok(TrainMode::SegOnly),
            _ => Err(SpnError::InvalidArgument(format!("unknown training mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub batch_pairs: usize,
    pub max_epochs: usize,
    pub plateau_eps: f64,
    pub plateau_epochs: usize,
    pub lambda: f64,
    pub k: usize,
    pub mode: TrainMode,
    pub p1_floor: f64,
    pub t: f64,
    /// Epochs over which the schedule anneals down to `p1_floor`.
    pub aat_epochs: usize,
    pub pairs_per_case: usize,
    /// Fraction of labeled training frames held out for the plateau criterion.
    pub heldout_fraction: f64,
    pub augment: bool,
    /// Wall-clock limit; training stops after the step that exceeds it.
    pub time_budget_secs: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 2.5e-4,
            momentum: 0.9,
            poly_power: 0.9,
            batch_pairs: 4,
            max_epochs: 30,
            plateau_eps: 0.002,
            plateau_epochs: 2,
            lambda: 1e-6,
            k: 20,
            mode: TrainMode::Full,
            p1_floor: 1.0 / 3.0,
            t: 0.4,
            aat_epochs: 20,
            pairs_per_case: 500,
            heldout_fraction: 0.1,
            augment: true,
            time_budget_secs: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SpnError::InvalidArgument(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 = {} must be positive", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.batch_pairs == 0 || self.pairs_per_case == 0 {
            return bad("batch_pairs and pairs_per_case must be >= 1".into());
        }
        if self.plateau_epochs == 0 {
            return bad("plateau_epochs must be >= 1".into());
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda = {} must be non-negative", self.lambda));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return bad(format!("heldout_fraction {} outside [0, 1)", self.heldout_fraction));
        }
        if self.aat_epochs == 0 {
            return bad("aat_epochs must be >= 1".into());
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.pairs_per_case.div_ceil(self.batch_pairs)
    }

    /// Consistency weight after the mode override.
    pub fn effective_lambda(&self) -> f64 {
        if self.mode == TrainMode::NoConsistency {
            0.0
        } else {
            self.lambda
        }
    }
}

/// `lr0 * (1 - i / max_steps)^power`, zero at and beyond `max_steps`.
pub fn poly_lr(i: u64, max_steps: u64, lr0: f64, power: f64) -> f64 {
    if max_steps == 0 || i >= max_steps {
        return 0.0;
    }
    lr0 * (1.0 - i as f64 / max_steps as f64).powf(power)
}

/// One training pair after augmentation.
#[derive(Clone, Debug)]
pub struct PairData<S> {
    pub frame_m: Tensor<S>,
    pub frame_n: Tensor<S>,
    pub label_m: Option<LabelMap>,
    pub label_n: Option<LabelMap>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepConfig {
    pub lambda: f64,
    pub k: usize,
    pub momentum: f64,
    pub seg_only: bool,
}

pub(crate) fn pair_loss<S: Scalar>(
    model: &SpnModel<S>,
    tape: &mut Tape<S>,
    bound: &crate::model::BoundParams,
    pair: &PairData<S>,
    case: Case,
    cfg: &StepConfig,
) -> Result<CaseLoss<S>> {
    let mc = model.config();
    let (stride, classes) = (mc.output_stride, mc.num_classes);
    let xm = tape.constant(pair.frame_m.clone());
    let xn = tape.constant(pair.frame_n.clone());
    let fm = model.encode(tape, bound, xm)?;
    let fn_ = model.encode(tape, bound, xn)?;
    let s_m = model.seg_forward(tape, bound, fm)?;
    let s_n = model.seg_forward(tape, bound, fn_)?;
    let lambda = S::lit(cfg.lambda);
    if cfg.seg_only {
        let (Some(y_m), Some(y_n)) = (&pair.label_m, &pair.label_n) else {
            return Err(SpnError::InvalidArgument("segmentation-only training needs labels on both frames".into()));
        };
        let a = ce_loss(tape, s_m, y_m)?;
        let b = ce_loss(tape, s_n, y_n)?;
        let total = tape.add(a, b)?;
        let val = |v: Var| tape.value(v).item();
        return Ok(CaseLoss {
            total,
            breakdown: LossBreakdown { l_s_m: Some(val(a)), l_s_n: Some(val(b)), total: val(total), lambda: S::zero(), ..Default::default() },
        });
    }
    let pm = model.prop_features(tape, bound, fm)?;
    let pn = model.prop_features(tape, bound, fn_)?;
    let prop = |tape: &mut Tape<S>, target: Var, source: Var, src: SourceRef| propagate_on_tape(tape, target, source, src, cfg.k, stride, classes);
    let (y_m, y_n) = (pair.label_m.as_ref(), pair.label_n.as_ref());
    let missing = || SpnError::InvalidArgument(format!("case {} pair is missing a required label", case.number()));
    match case {
        Case::Supervised => {
            let (lm, ln) = (y_m.ok_or_else(missing)?, y_n.ok_or_else(missing)?);
            let p_m = prop(tape, pm, pn, SourceRef::Labels(ln))?;
            let p_n = prop(tape, pn, pm, SourceRef::Labels(lm))?;
            loss_case1(tape, SupervisedMaps { s_m, s_n, p_m, p_n }, y_m, y_n, lambda)
        }
        Case::Unsupervised => {
            let pp_m = prop(tape, pm, pn, SourceRef::Probs(s_n))?;
            let pp_n = prop(tape, pn, pm, SourceRef::Probs(s_m))?;
            loss_case2(tape, s_m, s_n, pp_m, pp_n, lambda)
        }
        Case::SemiSupervised => {
            let lm = y_m.ok_or_else(missing)?;
            let pp_m = prop(tape, pm, pn, SourceRef::Probs(s_n))?;
            let p_n = prop(tape, pn, pm, SourceRef::Labels(lm))?;
            loss_case3(tape, SemiSupervisedMaps { s_m, s_n, p_n, pp_m }, y_m, y_n, lambda)
        }
    }
}

/// Forward and backward over a batch of same-case pairs (loss = mean of the
/// per-pair losses), then one momentum SGD update.
pub fn train_step<S: Scalar>(
    model: &mut SpnModel<S>,
    state: &mut MomentumState<S>,
    batch: &[PairData<S>],
    case: Case,
    lr: f64,
    cfg: &StepConfig,
) -> Result<LossBreakdown<S>> {
    if batch.is_empty() {
        return Err(SpnError::InvalidArgument("empty batch".into()));
    }
    let mut tape = Tape::new();
    let seg_only = cfg.seg_only;
    let bound = model.bind(&mut tape, |b| !(seg_only && b == Branch::Propagation));
    let mut totals = Vec::with_capacity(batch.len());
    let mut parts = Vec::with_capacity(batch.len());
    for pair in batch {
        let l = pair_loss(model, &mut tape, &bound, pair, case, cfg)?;
        totals.push(l.total);
        parts.push(l.breakdown);
    }
    let mut sum = totals[0];
    for &t in &totals[1..] {
        sum = tape.add(sum, t)?;
    }
    let loss = tape.scale(sum, S::one() / S::lit(batch.len() as f64));
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(SpnError::NonFinite(format!("case {} batch loss is {value}", case.number())));
    }
    let mut grads = tape.backward(loss)?;
    let grads: Vec<Tensor<S>> = bound
        .vars()
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.tensor.shape())))
        .collect();
    if let Some(p) = grads.iter().zip(model.params()).find(|(g, _)| !g.all_finite()) {
        return Err(SpnError::NonFinite(format!("gradient of {}", p.1.name)));
    }
    let mut params: Vec<Tensor<S>> = model.params().iter().map(|p| p.tensor.clone()).collect();
    sgd_momentum_step(&mut params, &grads, state, S::lit(lr), S::lit(cfg.momentum))?;
    model.set_tensors(params)?;
    let mut mean = LossBreakdown::mean(&parts);
    mean.total = value;
    Ok(mean)
}

/// One optimisation step as logged.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub case: Case,
    pub lr: f64,
    pub loss: LossBreakdown<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 0 for the measurement before training.
    pub epoch: usize,
    pub seg_accuracy: f64,
    pub prop_accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Plateau,
    MaxEpochs,
    TimeBudget,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Held-out frames as (video id, frame index).
    pub heldout: Vec<(String, usize)>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

pub const CSV_HEADER: &str = "step,epoch,case,lr,l_s_m,l_s_n,l_p_m,l_p_n,l_c_m,l_c_n,total";

impl TrainLog {
    /// CSV with `#` comment lines for the held-out slice and per-epoch accuracies.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let held: Vec<String> = self.heldout.iter().map(|(v, i)| format!("{v}:{i}")).collect();
        let _ = writeln!(out, "# heldout={}", held.join(","));
        let _ = writeln!(out, "{CSV_HEADER}");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut epochs = self.epochs.iter().peekable();
        let mut emit_epochs = |out: &mut String, upto: usize| {
            while let Some(e) = epochs.next_if(|e| e.epoch <= upto) {
                let _ = writeln!(out, "# epoch={} seg_acc={} prop_acc={}", e.epoch, e.seg_accuracy, e.prop_accuracy);
            }
        };
        emit_epochs(&mut out, 0);
        for s in &self.steps {
            emit_epochs(&mut out, s.epoch - 1);
            let l = &s.loss;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                s.step,
                s.epoch,
                s.case.number(),
                s.lr,
                opt(l.l_s_m),
                opt(l.l_s_n),
                opt(l.l_p_m),
                opt(l.l_p_n),
                opt(l.l_c_m),
                opt(l.l_c_n),
                l.total
            );
        }
        emit_epochs(&mut out, usize::MAX);
        out
    }
}

struct TrainVideo<S> {
    id: String,
    frames: Vec<Tensor<S>>,
    labels: Vec<Option<LabelMap>>,
}

/// Stateful training loop; [`train`] drives it to completion.
pub struct Trainer<S> {
    pub model: SpnModel<S>,
    state: MomentumState<S>,
    cfg: TrainConfig,
    aat: AatConfig,
    videos: Vec<TrainVideo<S>>,
    heldout: Vec<(usize, usize)>,
    sampler: CaseSampler,
    aug_rng: ChaCha8Rng,
    step: u64,
    max_steps: u64,
    pub log: TrainLog,
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s);
    r
}

impl<S: Scalar> Trainer<S> {
    pub fn new(dataset: &VideoDataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = SpnModel::new(ModelConfig { seed: cfg.seed, ..model_cfg.clone() })?;
        Self::with_model(dataset, model, cfg)
    }

    pub fn with_model(dataset: &VideoDataset, model: SpnModel<S>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let videos: Vec<TrainVideo<S>> = dataset
            .split(Split::Train)
            .map(|v| TrainVideo { id: v.id.clone(), frames: v.frames.iter().map(|f| f.to_tensor()).collect(), labels: v.labels.clone() })
            .collect();
        if videos.is_empty() {
            return Err(SpnError::Data("dataset has no training videos".into()));
        }
        let labeled: Vec<(usize, usize)> =
            videos.iter().enumerate().flat_map(|(v, tv)| (0..tv.labels.len()).filter(move |&i| tv.labels[i].is_some()).map(move |i| (v, i))).collect();
        let held_n = if cfg.heldout_fraction > 0.0 && !labeled.is_empty() {
            ((cfg.heldout_fraction * labeled.len() as f64).round() as usize).max(1)
        } else {
            0
        };
        let mut held_idx = sample(&mut stream(cfg.seed, 5), labeled.len(), held_n).into_vec();
        held_idx.sort_unstable();
        let heldout: Vec<(usize, usize)> = held_idx.iter().map(|&i| labeled[i]).collect();

        let sets: Vec<FrameSets> = videos
            .iter()
            .enumerate()
            .map(|(v, tv)| {
                let mut s = FrameSets::default();
                for i in 0..tv.labels.len() {
                    if heldout.contains(&(v, i)) {
                        continue;
                    }
                    if tv.labels[i].is_some() {
                        s.labeled.push(i);
                    } else {
                        s.unlabeled.push(i);
                    }
                }
                s
            })
            .collect();
        let has_unlabeled = sets.iter().any(|s| !s.unlabeled.is_empty());
        let supervised_only = matches!(cfg.mode, TrainMode::NoSsl | TrainMode::SegOnly) || !has_unlabeled;
        let p1_floor = if supervised_only { 1.0 } else { cfg.p1_floor };
        let required = [true, !supervised_only, !supervised_only];
        let pools = build_pools(&sets, cfg.pairs_per_case, required, &mut stream(cfg.seed, 4))?;
        let spe = cfg.steps_per_epoch() as u64;
        let aat = AatConfig { p1_floor, t: cfg.t, i_max: (cfg.aat_epochs as u64 * spe).max(1), seed: cfg.seed };
        aat.validate()?;
        let log = TrainLog { heldout: heldout.iter().map(|&(v, i)| (videos[v].id.clone(), i)).collect(), ..Default::default() };
        let tensors: Vec<Tensor<S>> = model.params().iter().map(|p| p.tensor.clone()).collect();
        Ok(Trainer {
            state: MomentumState::zeros_like(&tensors),
            model,
            cfg: cfg.clone(),
            aat,
            videos,
            heldout,
            sampler: CaseSampler::new(pools, cfg.seed),
            aug_rng: stream(cfg.seed, 10),
            step: 0,
            max_steps: cfg.max_epochs as u64 * spe,
            log,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn aat(&self) -> &AatConfig {
        &self.aat
    }

    fn pair_data(&mut self, pair: Pair) -> Result<PairData<S>> {
        let v = &self.videos[pair.video];
        let (lm, ln) = (v.labels[pair.m].clone(), v.labels[pair.n].clone());
        let aug = if self.cfg.augment {
            let present: Vec<&LabelMap> = lm.iter().chain(ln.iter()).collect();
            sample_preserving(&mut self.aug_rng, &present)
        } else {
            Augmentation::IDENTITY
        };
        Ok(PairData {
            frame_m: aug.apply_frame(&v.frames[pair.m])?,
            frame_n: aug.apply_frame(&v.frames[pair.n])?,
            label_m: lm.map(|l| aug.apply_labels(&l)),
            label_n: ln.map(|l| aug.apply_labels(&l)),
        })
    }

    /// Samples a case and a batch, runs one update and logs it.
    pub fn step(&mut self) -> Result<&StepRecord> {
        let i = self.step;
        let case = self.sampler.sample_case(i, &self.aat)?;
        let mut batch = Vec::with_capacity(self.cfg.batch_pairs);
        for _ in 0..self.cfg.batch_pairs {
            let p = self.sampler.next_pair(case)?;
            batch.push(self.pair_data(p)?);
        }
        let lr = poly_lr(i, self.max_steps.max(1), self.cfg.lr0, self.cfg.poly_power);
        let sc = StepConfig {
            lambda: self.cfg.effective_lambda(),
            k: self.cfg.k,
            momentum: self.cfg.momentum,
            seg_only: self.cfg.mode == TrainMode::SegOnly,
        };
        let loss = train_step(&mut self.model, &mut self.state, &batch, case, lr, &sc)?;
        let to64 = |v: Option<S>| v.map(|x| x.as_f64());
        let record = StepRecord {
            step: i,
            epoch: (i / self.cfg.steps_per_epoch() as u64) as usize + 1,
            case,
            lr,
            loss: LossBreakdown {
                l_s_m: to64(loss.l_s_m),
                l_s_n: to64(loss.l_s_n),
                l_p_m: to64(loss.l_p_m),
                l_p_n: to64(loss.l_p_n),
                l_c_m: to64(loss.l_c_m),
                l_c_n: to64(loss.l_c_n),
                total: loss.total.as_f64(),
                lambda: loss.lambda.as_f64(),
            },
        };
        self.step += 1;
        self.log.steps.push(record);
        Ok(self.log.steps.last().expect("just pushed"))
    }

    /// Pixel accuracy of both branches on the held-out frames. The
    /// propagation branch carries ground truth from the nearest other labeled
    /// frame of the same video (or the frame itself if it is the only one).
    pub fn heldout_accuracy(&self) -> Result<(f64, f64)> {
        if self.heldout.is_empty() {
            return Ok((0.0, 0.0));
        }
        let (mut seg, mut prop) = (0.0, 0.0);
        for &(v, i) in &self.heldout {
            let tv = &self.videos[v];
            let gt = tv.labels[i].as_ref().expect("held-out frames are labeled");
            let pred = LabelMap::argmax(&self.model.segment(&tv.frames[i])?)?;
            seg += pixel_accuracy(&pred, gt)?;
            let src = (0..tv.labels.len())
                .filter(|&j| j != i && tv.labels[j].is_some())
                .min_by_key(|&j| (j.abs_diff(i), j))
                .unwrap_or(i);
            let src_labels = tv.labels[src].as_ref().expect("labeled");
            let p = propagate_full(&self.model, &tv.frames[src], &tv.frames[i], SourceMap::Labels(src_labels), self.cfg.k)?;
            prop += pixel_accuracy(&LabelMap::argmax(&p)?, gt)?;
        }
        let n = self.heldout.len() as f64;
        Ok((seg / n, prop / n))
    }

    fn record_epoch(&mut self, epoch: usize) -> Result<EpochRecord> {
        let (seg_accuracy, prop_accuracy) = self.heldout_accuracy()?;
        let r = EpochRecord { epoch, seg_accuracy, prop_accuracy };
        self.log.epochs.push(r);
        Ok(r)
    }

    /// Runs epochs until the plateau rule, `max_epochs` or the time budget stops
    /// training. `on_epoch` sees every epoch record, including the initial one.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochRecord, &[StepRecord])) -> Result<StopReason> {
        let start = Instant::now();
        let spe = self.cfg.steps_per_epoch();
        if self.cfg.max_epochs == 0 {
            return Ok(StopReason::MaxEpochs);
        }
        let mut prev = self.record_epoch(0)?;
        on_epoch(&prev, &[]);
        let mut stable = 0;
        for epoch in 1..=self.cfg.max_epochs {
            let first = self.log.steps.len();
            for _ in 0..spe {
                self.step()?;
                if self.cfg.time_budget_secs.is_some_and(|b| start.elapsed().as_secs_f64() > b) {
                    let r = self.record_epoch(epoch)?;
                    on_epoch(&r, &self.log.steps[first..]);
                    return Ok(StopReason::TimeBudget);
                }
            }
            let r = self.record_epoch(epoch)?;
            on_epoch(&r, &self.log.steps[first..]);
            let flat = |a: f64, b: f64| (a - b).abs() < self.cfg.plateau_eps;
            if flat(r.seg_accuracy, prev.seg_accuracy) && flat(r.prop_accuracy, prev.prop_accuracy) {
                stable += 1;
            } else {
                stable = 0;
            }
            prev = r;
            if stable >= self.cfg.plateau_epochs {
                return Ok(StopReason::Plateau);
            }
        }
        Ok(StopReason::MaxEpochs)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S> {
    pub model: SpnModel<S>,
    pub log: TrainLog,
    pub steps: u64,
    pub stop: StopReason,
}

/// Trains a freshly initialised model (seeded by `cfg.seed`) on the training
/// split of `dataset`.
pub fn train<S: Scalar>(
    dataset: &VideoDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord, &[StepRecord]),
) -> Result<TrainOutcome<S>> {
    let mut t = Trainer::new(dataset, model_cfg, cfg)?;
    let stop = t.run(on_epoch)?;
    Ok(TrainOutcome { steps: t.step, model: t.model, log: t.log, stop })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint;
    use crate::synth::{generate, SynthConfig};

    fn tiny_model() -> ModelConfig {
        ModelConfig { base_width: 4, head_width: 4, prop_feature_dim: 4, ..Default::default() }
    }

    fn tiny_data(label_fraction: f64, seed: u64) -> VideoDataset {
        generate(&SynthConfig { videos: 2, test_videos: 0, frames_per_video: 8, width: 16, height: 16, label_fraction, seed, ..Default::default() })
            .unwrap()
            .0
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig { pairs_per_case: 4, batch_pairs: 2, max_epochs: 2, k: 3, lr0: 0.01, ..Default::default() }
    }

    #[test]
    fn poly_examples() {
        assert_eq!(poly_lr(0, 100, 2.5e-4, 0.9), 2.5e-4);
        assert_eq!(poly_lr(100, 100, 2.5e-4, 0.9), 0.0);
        assert!((poly_lr(50, 100, 2.5e-4, 0.9) - 2.5e-4 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((poly_lr(50, 100, 2.5e-4, 0.9) - 1.3397e-4).abs() < 1e-8);
    }

    fn pair_from(d: &VideoDataset, m: usize, n: usize) -> PairData<f64> {
        let v = &d.videos[0];
        PairData { frame_m: v.frames[m].to_tensor(), frame_n: v.frames[n].to_tensor(), label_m: v.labels[m].clone(), label_n: v.labels[n].clone() }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let d = tiny_data(1.0, 0);
        let mut model = SpnModel::<f64>::new(tiny_model()).unwrap();
        let before = model.clone();
        let tensors: Vec<_> = model.params().iter().map(|p| p.tensor.clone()).collect();
        let mut state = MomentumState::zeros_like(&tensors);
        let sc = StepConfig { lambda: 1e-6, k: 3, momentum: 0.9, seg_only: false };
        train_step(&mut model, &mut state, &[pair_from(&d, 0, 1)], Case::Supervised, 0.0, &sc).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn batch_loss_is_mean_of_pair_losses() {
        let d = tiny_data(1.0, 1);
        let model = SpnModel::<f64>::new(tiny_model()).unwrap();
        let tensors: Vec<_> = model.params().iter().map(|p| p.tensor.clone()).collect();
        let sc = StepConfig { lambda: 0.5, k: 3, momentum: 0.9, seg_only: false };
        let pairs = [pair_from(&d, 0, 1), pair_from(&d, 2, 5), pair_from(&d, 7, 3)];
        let single: Vec<f64> = pairs
            .iter()
            .map(|p| {
                let mut m = model.clone();
                let mut s = MomentumState::zeros_like(&tensors);
                train_step(&mut m, &mut s, std::slice::from_ref(p), Case::Supervised, 0.0, &sc).unwrap().total
            })
            .collect();
        let mut m = model.clone();
        let mut s = MomentumState::zeros_like(&tensors);
        let batch = train_step(&mut m, &mut s, &pairs, Case::Supervised, 0.0, &sc).unwrap();
        assert!((batch.total - single.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    }

    #[test]
    fn case_label_mismatch_is_an_error() {
        let d = tiny_data(1.0, 2);
        let mut model = SpnModel::<f64>::new(tiny_model()).unwrap();
        let tensors: Vec<_> = model.params().iter().map(|p| p.tensor.clone()).collect();
        let mut state = MomentumState::zeros_like(&tensors);
        let sc = StepConfig { lambda: 1e-6, k: 3, momentum: 0.9, seg_only: false };
        let mut p = pair_from(&d, 0, 1);
        p.label_n = None;
        assert!(train_step(&mut model, &mut state, &[p.clone()], Case::Supervised, 0.1, &sc).is_err());
        assert!(train_step(&mut model, &mut state, &[pair_from(&d, 0, 1)], Case::SemiSupervised, 0.1, &sc).is_err());
    }

    #[test]
    fn seg_only_leaves_propagation_head_untouched() {
        let d = tiny_data(1.0, 3);
        let mut model = SpnModel::<f64>::new(tiny_model()).unwrap();
        let before = model.clone();
        let tensors: Vec<_> = model.params().iter().map(|p| p.tensor.clone()).collect();
        let mut state = MomentumState::zeros_like(&tensors);
        let sc = StepConfig { lambda: 1e-6, k: 3, momentum: 0.9, seg_only: true };
        let l = train_step(&mut model, &mut state, &[pair_from(&d, 0, 1)], Case::Supervised, 0.1, &sc).unwrap();
        assert!(l.l_p_m.is_none() && l.l_c_m.is_none());
        for (a, b) in model.params().iter().zip(before.params()) {
            if a.branch == Branch::Propagation {
                assert_eq!(a.tensor, b.tensor, "{}", a.name);
            } else if a.name.ends_with("weight") {
                assert_ne!(a.tensor, b.tensor, "{}", a.name);
            }
        }
    }

    #[test]
    fn repeated_steps_overfit_one_pair() {
        let d = tiny_data(1.0, 8);
        let mut model = SpnModel::<f64>::new(ModelConfig::default()).unwrap();
        let tensors: Vec<_> = model.params().iter().map(|p| p.tensor.clone()).collect();
        let mut state = MomentumState::zeros_like(&tensors);
        let sc = StepConfig { lambda: 1e-6, k: 3, momentum: 0.9, seg_only: false };
        let pair = [pair_from(&d, 0, 4)];
        let first = train_step(&mut model, &mut state, &pair, Case::Supervised, 0.05, &sc).unwrap().total;
        let mut last = first;
        for _ in 0..200 {
            last = train_step(&mut model, &mut state, &pair, Case::Supervised, 0.05, &sc).unwrap().total;
        }
        assert!(last < 0.6 * first, "{first} -> {last}");
    }

    #[test]
    fn zero_epochs_gives_initial_model_and_empty_log() {
        let d = tiny_data(0.5, 4);
        let cfg = TrainConfig { max_epochs: 0, ..tiny_cfg() };
        let out = train::<f64>(&d, &tiny_model(), &cfg, |_, _| {}).unwrap();
        assert_eq!(out.steps, 0);
        assert_eq!(out.model, SpnModel::new(ModelConfig { seed: cfg.seed, ..tiny_model() }).unwrap());
        assert!(out.log.steps.is_empty());
        let csv = out.log.to_csv();
        assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>(), vec![CSV_HEADER]);
    }

    #[test]
    fn training_is_deterministic() {
        let d = tiny_data(0.5, 5);
        let cfg = tiny_cfg();
        let a = train::<f64>(&d, &tiny_model(), &cfg, |_, _| {}).unwrap();
        let b = train::<f64>(&d, &tiny_model(), &cfg, |_, _| {}).unwrap();
        assert_eq!(checkpoint::to_raw(&a.model, a.steps).to_bytes().unwrap(), checkpoint::to_raw(&b.model, b.steps).to_bytes().unwrap());
        assert_eq!(a.log.to_csv(), b.log.to_csv());
        assert_eq!(a.steps, 4);
    }

    #[test]
    fn mode_algebra() {
        let d = tiny_data(0.5, 6);
        let run = |cfg: &TrainConfig| {
            let mut t = Trainer::<f64>::new(&d, &tiny_model(), cfg).unwrap();
            for _ in 0..6 {
                t.step().unwrap();
            }
            (t.model.clone(), t.log.steps.clone())
        };
        let full0 = run(&TrainConfig { lambda: 0.0, ..tiny_cfg() });
        let nocons = run(&TrainConfig { mode: TrainMode::NoConsistency, ..tiny_cfg() });
        assert_eq!(full0.0, nocons.0);
        assert_eq!(full0.1, nocons.1);
        let full_p1 = run(&TrainConfig { p1_floor: 1.0, ..tiny_cfg() });
        let nossl = run(&TrainConfig { mode: TrainMode::NoSsl, ..tiny_cfg() });
        assert_eq!(full_p1.0, nossl.0);
        assert!(nossl.1.iter().all(|s| s.case == Case::Supervised));

        let labeled = tiny_data(1.0, 6);
        let run_on = |cfg: &TrainConfig| {
            let mut t = Trainer::<f64>::new(&labeled, &tiny_model(), cfg).unwrap();
            for _ in 0..4 {
                t.step().unwrap();
            }
            t.model.clone()
        };
        assert_eq!(run_on(&tiny_cfg()), run_on(&TrainConfig { mode: TrainMode::NoSsl, ..tiny_cfg() }));
    }

    #[test]
    fn csv_layout() {
        let d = tiny_data(0.5, 7);
        let out = train::<f64>(&d, &tiny_model(), &tiny_cfg(), |_, _| {}).unwrap();
        let csv = out.log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("# heldout=vid0"));
        assert_eq!(lines[1], CSV_HEADER);
        assert!(lines[2].starts_with("# epoch=0 "));
        let rows: Vec<&str> = lines.iter().copied().filter(|l| !l.starts_with('#')).skip(1).collect();
        assert_eq!(rows.len(), out.steps as usize);
        for r in rows {
            assert_eq!(r.split(',').count(), 11);
        }
        assert_eq!(lines.iter().filter(|l| l.starts_with("# epoch=")).count(), out.log.epochs.len());
    }
}
