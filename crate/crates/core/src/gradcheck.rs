//! Central finite-difference checks of the reverse-mode gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aat::Case;
use crate::engine::{Tape, Tensor, Var};
use crate::error::{Result, SpnError};
use crate::label::LabelMap;
use crate::losses::{ce_loss, consistency_loss};
use crate::model::{ModelConfig, SpnModel};
use crate::propagation::{propagate_on_tape, SourceRef};
use crate::synth::{render_ground_truth, SynthConfig};
use crate::trainer::{pair_loss, PairData, StepConfig};

pub const STEP: f64 = 1e-6;
pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const COMPOSITE_TOL: f64 = 1e-5;
/// Lower bound on the denominator of the relative error, as a fraction of
/// `max(1, |f|)`.
pub const REL_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coords: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed() { "ok" } else { "FAIL" };
        write!(f, "{:<28} coords={:<5} max_rel={:.3e} tol={:.0e} {verdict}", self.name, self.coords, self.max_rel_error, self.tolerance)
    }
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR * max(1, |f|))` for a function value `f`.
pub fn rel_error(analytic: f64, numeric: f64, value: f64) -> f64 {
    let floor = REL_FLOOR * value.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic and numeric gradients of a scalar function of `inputs`.
///
/// `build` records the function on a fresh tape and returns the root plus the
/// var holding each input. With `per_input = Some(n)` only `n` seeded
/// coordinates of each input are perturbed.
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], per_input: Option<usize>, seed: u64, tolerance: f64, build: F) -> Result<CheckReport>
where
    F: Fn(&mut Tape<f64>, &[Tensor<f64>]) -> Result<(Var, Vec<Var>)>,
{
    let mut tape = Tape::new();
    let (root, vars) = build(&mut tape, inputs)?;
    if vars.len() != inputs.len() {
        return Err(SpnError::InvalidArgument(format!("{name}: {} vars for {} inputs", vars.len(), inputs.len())));
    }
    let grads = tape.backward(root)?;
    let f0 = tape.value(root).item();
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let (r, _) = build(&mut t, xs)?;
        Ok(t.value(r).item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = inputs.to_vec();
    let (mut worst, mut coords) = (0.0f64, 0);
    for (i, v) in vars.iter().enumerate() {
        let n = inputs[i].len();
        let analytic = grads.get(*v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let picks = match per_input {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for j in picks {
            let x0 = work[i].data()[j];
            work[i].data_mut()[j] = x0 + STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - STEP;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_error(analytic[j], numeric, f0));
            coords += 1;
        }
    }
    Ok(CheckReport { name: name.to_string(), max_rel_error: worst, tolerance, coords })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn leaves(tape: &mut Tape<f64>, xs: &[Tensor<f64>]) -> Vec<Var> {
    xs.iter().map(|x| tape.param(x.clone())).collect()
}

/// Contracts `v` with a fixed pseudo-random weight so every output element
/// gets a distinct upstream gradient.
fn contract(tape: &mut Tape<f64>, v: Var) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let w = tape.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

type OpFn = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn op_check(name: &str, inputs: Vec<Tensor<f64>>, seed: u64, f: OpFn) -> Result<CheckReport> {
    check(name, &inputs, None, seed, PRIMITIVE_TOL, |tape, xs| {
        let vars = leaves(tape, xs);
        let out = f(tape, &vars)?;
        let root = if tape.value(out).len() == 1 { out } else { contract(tape, out)? };
        Ok((root, vars))
    })
}

/// Every differentiable engine op plus the two loss building blocks and the
/// propagation chain, each on small random inputs.
pub fn primitive_checks(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize], lo: f64, hi: f64| uniform(&mut rng, shape, lo, hi);
    let mut out = Vec::new();
    out.push(op_check("add", vec![r(&[2, 3], -1.0, 1.0), r(&[2, 3], -1.0, 1.0)], seed, |t, v| t.add(v[0], v[1]))?);
    out.push(op_check("sub", vec![r(&[2, 3], -1.0, 1.0), r(&[2, 3], -1.0, 1.0)], seed, |t, v| t.sub(v[0], v[1]))?);
    out.push(op_check("mul", vec![r(&[2, 3], -1.0, 1.0), r(&[2, 3], -1.0, 1.0)], seed, |t, v| t.mul(v[0], v[1]))?);
    out.push(op_check("scale", vec![r(&[4], -1.0, 1.0)], seed, |t, v| Ok(t.scale(v[0], -1.7)))?);
    out.push(op_check("relu", vec![r(&[3, 4], -1.0, 1.0)], seed, |t, v| Ok(t.relu(v[0])))?);
    out.push(op_check("exp", vec![r(&[5], -1.0, 1.0)], seed, |t, v| Ok(t.exp(v[0])))?);
    out.push(op_check("log", vec![r(&[5], 0.2, 2.0)], seed, |t, v| t.log(v[0]))?);
    out.push(op_check("sum", vec![r(&[2, 2, 2], -1.0, 1.0)], seed, |t, v| Ok(t.sum(v[0])))?);
    out.push(op_check("mean", vec![r(&[2, 2, 2], -1.0, 1.0)], seed, |t, v| Ok(t.mean(v[0])))?);
    out.push(op_check("max", vec![r(&[7], -1.0, 1.0)], seed, |t, v| t.max(v[0]))?);
    out.push(op_check("reshape", vec![r(&[2, 6], -1.0, 1.0)], seed, |t, v| t.reshape(v[0], &[3, 4]))?);
    out.push(op_check("exp(log(x*y))", vec![r(&[6], 0.2, 2.0), r(&[6], 0.2, 2.0)], seed, |t, v| {
        let m = t.mul(v[0], v[1])?;
        let l = t.log(m)?;
        Ok(t.exp(l))
    })?);
    out.push(op_check("fan-out x*x+relu(x)", vec![r(&[2, 3], -1.0, 1.0)], seed, |t, v| {
        let sq = t.mul(v[0], v[0])?;
        let rl = t.relu(v[0]);
        t.add(sq, rl)
    })?);
    out.push(op_check(
        "conv2d s1 p1",
        vec![r(&[2, 3, 8, 8], -1.0, 1.0), r(&[4, 3, 3, 3], -1.0, 1.0), r(&[4], -1.0, 1.0)],
        seed,
        |t, v| t.conv2d(v[0], v[1], v[2], 1, 1),
    )?);
    out.push(op_check(
        "conv2d s2 p1",
        vec![r(&[1, 2, 7, 7], -1.0, 1.0), r(&[3, 2, 3, 3], -1.0, 1.0), r(&[3], -1.0, 1.0)],
        seed,
        |t, v| t.conv2d(v[0], v[1], v[2], 2, 1),
    )?);
    out.push(op_check(
        "conv2d 1x1",
        vec![r(&[1, 3, 4, 4], -1.0, 1.0), r(&[2, 3, 1, 1], -1.0, 1.0), r(&[2], -1.0, 1.0)],
        seed,
        |t, v| t.conv2d(v[0], v[1], v[2], 1, 0),
    )?);
    out.push(op_check("softmax_channel", vec![r(&[2, 5, 3, 3], -2.0, 2.0)], seed, |t, v| t.softmax_channel(v[0]))?);
    out.push(op_check("normalize_channel", vec![r(&[1, 4, 3, 3], 0.1, 1.0)], seed, |t, v| t.normalize_channel(v[0]))?);
    out.push(op_check("upsample_bilinear x2", vec![r(&[1, 2, 3, 3], -1.0, 1.0)], seed, |t, v| t.upsample_bilinear(v[0], 2))?);
    out.push(op_check("upsample_bilinear x4", vec![r(&[1, 2, 2, 3], -1.0, 1.0)], seed, |t, v| t.upsample_bilinear(v[0], 4))?);
    out.push(op_check("avg_pool x2", vec![r(&[1, 2, 4, 6], -1.0, 1.0)], seed, |t, v| t.avg_pool(v[0], 2))?);
    out.push(op_check("cosine_similarity", vec![r(&[4, 6], -1.0, 1.0), r(&[4, 5], -1.0, 1.0)], seed, |t, v| t.cosine_similarity(v[0], v[1]))?);
    out.push(op_check("top_k_aggregate", vec![r(&[6, 5], -1.0, 1.0), r(&[3, 5], 0.0, 1.0)], seed, |t, v| t.top_k_aggregate(v[0], v[1], 2))?);
    out.push(op_check("class_nll", vec![r(&[1, 4, 2, 3], 0.05, 1.0)], seed, |t, v| t.class_nll(v[0], &[0, 3, 2, 1, 1, 0], 0.7))?);

    let labels = LabelMap::from_fn(4, 4, |x, y| ((x + 2 * y) % 5) as u8);
    out.push(check("ce_loss", &[r(&[1, 5, 4, 4], -2.0, 2.0)], None, seed, PRIMITIVE_TOL, |t, xs| {
        let vars = leaves(t, xs);
        let p = t.softmax_channel(vars[0])?;
        Ok((ce_loss(t, p, &labels)?, vars))
    })?);
    out.push(op_check("consistency_loss", vec![r(&[1, 5, 4, 4], -2.0, 2.0), r(&[1, 5, 4, 4], -2.0, 2.0)], seed, |t, v| {
        let a = t.softmax_channel(v[0])?;
        let b = t.softmax_channel(v[1])?;
        consistency_loss(t, a, b)
    })?);
    out.push(op_check(
        "propagate (probs source)",
        vec![r(&[1, 6, 3, 3], -1.0, 1.0), r(&[1, 6, 3, 3], -1.0, 1.0), r(&[1, 5, 6, 6], -2.0, 2.0)],
        seed,
        |t, v| {
            let s = t.softmax_channel(v[2])?;
            propagate_on_tape(t, v[0], v[1], SourceRef::Probs(s), 4, 2, 5)
        },
    )?);
    Ok(out)
}

/// Toy 32x32 pair for the end-to-end checks: ground-truth frames, a default
/// width model with randomised biases so no ReLU sits exactly on its kink.
pub fn toy_pair(seed: u64) -> Result<(SpnModel<f64>, PairData<f64>)> {
    let cfg = SynthConfig { videos: 1, test_videos: 0, frames_per_video: 4, width: 32, height: 32, seed, ..Default::default() };
    let (frames, labels) = render_ground_truth(&cfg, 0)?;
    let mut model = SpnModel::<f64>::new(ModelConfig { seed, ..Default::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for p in model.params_mut() {
        if p.name.ends_with("bias") {
            p.tensor = uniform(&mut rng, p.tensor.shape(), -0.1, 0.1);
        }
    }
    let pair = PairData {
        frame_m: frames[0].to_tensor(),
        frame_n: frames[2].to_tensor(),
        label_m: Some(labels[0].clone()),
        label_n: Some(labels[2].clone()),
    };
    Ok((model, pair))
}

/// The three case losses composed through the full model and propagation,
/// perturbing `per_tensor` seeded entries of every parameter tensor.
pub fn loss_checks(seed: u64, per_tensor: usize) -> Result<Vec<CheckReport>> {
    let (model, pair) = toy_pair(seed)?;
    let tensors: Vec<Tensor<f64>> = model.params().iter().map(|p| p.tensor.clone()).collect();
    let sc = StepConfig { lambda: 0.01, k: 20, momentum: 0.0, seg_only: false };
    let mut out = Vec::new();
    for case in Case::ALL {
        let mut p = pair.clone();
        match case {
            Case::Supervised => {}
            Case::Unsupervised => (p.label_m, p.label_n) = (None, None),
            Case::SemiSupervised => p.label_n = None,
        }
        let name = format!("loss_case{} 32x32", case.number());
        out.push(check(&name, &tensors, Some(per_tensor), seed, COMPOSITE_TOL, |tape, xs| {
            let mut m = model.clone();
            m.set_tensors(xs.to_vec())?;
            let bound = m.bind(tape, |_| true);
            let loss = pair_loss(&m, tape, &bound, &p, case, &sc)?;
            Ok((loss.total, bound.vars().to_vec()))
        })?);
    }
    Ok(out)
}

/// Primitive checks followed by the end-to-end loss checks.
pub fn run_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut all = primitive_checks(seed)?;
    all.extend(loss_checks(seed, 4)?);
    Ok(all)
}
