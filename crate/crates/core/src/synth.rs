//! Deterministic synthetic videos of an articulated figure lying on a
//! textured blanket, with pixel-exact five-class label maps.
//!
//! Classes: 0 background, 1 head, 2 arm, 3 torso, 4 leg. Geometry is expressed
//! in units of `u = min(width, height) / 68`; the body axis points from the
//! hips to the head.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Frame, Split, Video, VideoDataset};
use crate::error::{Result, SpnError};
use crate::label::LabelMap;

pub const BACKGROUND: u8 = 0;
pub const HEAD: u8 = 1;
pub const ARM: u8 = 2;
pub const TORSO: u8 = 3;
pub const LEG: u8 = 4;

const UNIT_DIVISOR: f64 = 68.0;
const TORSO_HALF_LEN: f64 = 13.0;
const TORSO_HALF_WIDTH: f64 = 9.0;
const HEAD_OFFSET: f64 = 6.5;
const HEAD_RADIUS_ACROSS: f64 = 7.5;
const HEAD_RADIUS_ALONG: f64 = 7.0;
const ARM_LEN: f64 = 18.0;
const ARM_RADIUS: f64 = 2.6;
const LEG_LEN: f64 = 16.0;
const LEG_RADIUS: f64 = 3.8;
const HIP_INSET: f64 = 3.5;
/// Arm angle range (degrees) outside occlusion, measured from the outward
/// perpendicular towards the head.
const ARM_RANGE: (f64, f64) = (-40.0, 70.0);
const OCCLUDING_ARM_RANGE: (f64, f64) = (115.0, 150.0);
const SHADOW_DARKEN: f64 = 0.6;
const PIXEL_NOISE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub videos: usize,
    pub frames_per_video: usize,
    pub width: usize,
    pub height: usize,
    /// Fraction of frames of each partially labeled training video that keep labels.
    pub label_fraction: f64,
    /// Training videos stripped of all labels.
    pub unlabeled_videos: usize,
    /// The last `test_videos` videos form the fully labeled test split.
    pub test_videos: usize,
    /// Fraction of frames in which an arm crosses over the head or torso.
    pub occlusion_rate: f64,
    pub shadow: bool,
    /// Large-motion cuts injected per video (figure rotation, camera shift).
    pub motion_jumps: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            videos: 8,
            frames_per_video: 32,
            width: 64,
            height: 64,
            label_fraction: 0.3,
            unlabeled_videos: 0,
            test_videos: 2,
            occlusion_rate: 0.1,
            shadow: true,
            motion_jumps: 0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn train_videos(&self) -> usize {
        self.videos.saturating_sub(self.test_videos)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SpnError::InvalidArgument(m));
        if self.videos == 0 || self.frames_per_video == 0 {
            return bad("need at least one video and one frame".into());
        }
        if self.width < 16 || self.height < 16 || self.width % 4 != 0 || self.height % 4 != 0 {
            return bad(format!("frame size {}x{} must be >= 16 and divisible by 4", self.width, self.height));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return bad(format!("label_fraction {} outside (0, 1]", self.label_fraction));
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return bad(format!("occlusion_rate {} outside [0, 1]", self.occlusion_rate));
        }
        if self.test_videos > self.videos {
            return bad(format!("{} test videos out of {}", self.test_videos, self.videos));
        }
        let train = self.train_videos();
        if self.unlabeled_videos > 0 && self.unlabeled_videos >= train {
            return bad(format!("{} unlabeled videos leave no labeled training video out of {train}", self.unlabeled_videos));
        }
        if self.motion_jumps > 0 && self.motion_jumps * 4 > self.frames_per_video {
            return bad(format!("{} motion jumps do not fit in {} frames", self.motion_jumps, self.frames_per_video));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct V2 {
    x: f64,
    y: f64,
}

impl V2 {
    fn new(x: f64, y: f64) -> Self {
        V2 { x, y }
    }
    fn add(self, o: V2) -> V2 {
        V2::new(self.x + o.x, self.y + o.y)
    }
    fn sub(self, o: V2) -> V2 {
        V2::new(self.x - o.x, self.y - o.y)
    }
    fn mul(self, s: f64) -> V2 {
        V2::new(self.x * s, self.y * s)
    }
    fn dot(self, o: V2) -> f64 {
        self.x * o.x + self.y * o.y
    }
}

fn in_capsule(p: V2, a: V2, b: V2, r: f64) -> bool {
    let ab = b.sub(a);
    let t = (p.sub(a).dot(ab) / ab.dot(ab)).clamp(0.0, 1.0);
    let d = p.sub(a.add(ab.mul(t)));
    d.dot(d) <= r * r
}

fn deg(d: f64) -> f64 {
    d * PI / 180.0
}

/// Smooth periodic joint angle `mid + amp * sin(omega t + phase)`.
#[derive(Clone, Copy, Debug)]
struct Swing {
    mid: f64,
    amp: f64,
    omega: f64,
    phase: f64,
}

impl Swing {
    fn random(rng: &mut ChaCha8Rng, range: (f64, f64), mid: (f64, f64), amp: (f64, f64)) -> Self {
        let m = rng.gen_range(mid.0..mid.1);
        let max_amp = (m - range.0).min(range.1 - m).max(0.0);
        Swing {
            mid: m,
            amp: rng.gen_range(amp.0..amp.1).min(max_amp),
            omega: rng.gen_range(0.15..0.35),
            phase: rng.gen_range(0.0..2.0 * PI),
        }
    }

    fn at(&self, t: f64) -> f64 {
        self.mid + self.amp * (self.omega * t + self.phase).sin()
    }
}

#[derive(Clone, Debug)]
struct Style {
    skin: [f64; 3],
    hair: [f64; 3],
    shirt: [f64; 3],
    pants: [f64; 3],
    blanket: [f64; 3],
    stripe: [f64; 3],
    tex_freq: (f64, f64),
    tex_phase: (f64, f64),
    shadow_dir: V2,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl Style {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let tone = rng.gen_range(0.0..1.0);
        let skin = [0.93 - 0.35 * tone, 0.76 - 0.35 * tone, 0.64 - 0.3 * tone];
        let hair_v = rng.gen_range(0.1..0.35);
        let shirt_h = rng.gen_range(0.0..1.0);
        let pants_h = shirt_h + rng.gen_range(0.3..0.7);
        let blanket_h = rng.gen_range(0.0..1.0);
        let ang = rng.gen_range(0.0..2.0 * PI);
        Style {
            skin,
            hair: [hair_v, hair_v * 0.8, hair_v * 0.6],
            shirt: hsv(shirt_h, rng.gen_range(0.5..0.8), rng.gen_range(0.55..0.85)),
            pants: hsv(pants_h, rng.gen_range(0.5..0.8), rng.gen_range(0.3..0.6)),
            blanket: hsv(blanket_h, rng.gen_range(0.1..0.35), rng.gen_range(0.7..0.9)),
            stripe: hsv(blanket_h + 0.5, rng.gen_range(0.2..0.4), rng.gen_range(0.55..0.75)),
            tex_freq: (rng.gen_range(0.25..0.6), rng.gen_range(0.25..0.6)),
            tex_phase: (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)),
            shadow_dir: V2::new(ang.cos(), ang.sin()),
        }
    }
}

/// Figure configuration in one frame (angles in radians, lengths in pixels).
#[derive(Clone, Debug)]
struct Pose {
    center: V2,
    theta: f64,
    arms: [f64; 2],
    legs: [f64; 2],
    /// Arm drawn across the body, if any.
    occluding: Option<usize>,
    camera: V2,
    brightness: f64,
}

struct Body {
    axis: V2,
    perp: V2,
    center: V2,
    head: V2,
    arms: [(V2, V2); 2],
    legs: [(V2, V2); 2],
}

impl Body {
    fn new(pose: &Pose, u: f64) -> Self {
        let axis = V2::new(pose.theta.sin(), -pose.theta.cos());
        let perp = V2::new(pose.theta.cos(), pose.theta.sin());
        let c = pose.center;
        let head = c.add(axis.mul((TORSO_HALF_LEN + HEAD_OFFSET) * u));
        let sides = [-1.0, 1.0];
        let arms = [0, 1].map(|i| {
            let s = sides[i];
            let shoulder = c.add(axis.mul((TORSO_HALF_LEN - 2.0) * u)).add(perp.mul(s * TORSO_HALF_WIDTH * u));
            let phi = pose.arms[i];
            let dir = perp.mul(s * phi.cos()).add(axis.mul(phi.sin()));
            (shoulder, shoulder.add(dir.mul(ARM_LEN * u)))
        });
        let legs = [0, 1].map(|i| {
            let s = sides[i];
            let hip = c.sub(axis.mul((TORSO_HALF_LEN - 2.0) * u)).add(perp.mul(s * (TORSO_HALF_WIDTH - HIP_INSET) * u));
            let psi = pose.legs[i];
            let dir = axis.mul(-psi.cos()).add(perp.mul(s * psi.sin()));
            (hip, hip.add(dir.mul(LEG_LEN * u)))
        });
        Body { axis, perp, center: c, head, arms, legs }
    }

    fn in_head(&self, p: V2, u: f64) -> bool {
        let d = p.sub(self.head);
        let a = d.dot(self.axis) / (HEAD_RADIUS_ALONG * u);
        let q = d.dot(self.perp) / (HEAD_RADIUS_ACROSS * u);
        a * a + q * q <= 1.0
    }

    fn in_torso(&self, p: V2, u: f64) -> bool {
        let d = p.sub(self.center);
        d.dot(self.axis).abs() <= TORSO_HALF_LEN * u && d.dot(self.perp).abs() <= TORSO_HALF_WIDTH * u
    }

    fn in_arm(&self, i: usize, p: V2, u: f64) -> bool {
        in_capsule(p, self.arms[i].0, self.arms[i].1, ARM_RADIUS * u)
    }

    fn in_leg(&self, i: usize, p: V2, u: f64) -> bool {
        in_capsule(p, self.legs[i].0, self.legs[i].1, LEG_RADIUS * u)
    }

    /// Topmost class at `p`; arms are drawn over everything else.
    fn class_at(&self, p: V2, u: f64) -> u8 {
        if self.in_arm(0, p, u) || self.in_arm(1, p, u) {
            ARM
        } else if self.in_head(p, u) {
            HEAD
        } else if self.in_torso(p, u) {
            TORSO
        } else if self.in_leg(0, p, u) || self.in_leg(1, p, u) {
            LEG
        } else {
            BACKGROUND
        }
    }
}

fn blanket(style: &Style, p: V2, camera: V2) -> [f64; 3] {
    let q = p.add(camera);
    let (fx, fy) = style.tex_freq;
    let stripes = ((q.x * fx * 0.5 + q.y * fy * 0.25 + style.tex_phase.0).sin() > 0.6) as u8 as f64;
    let weave = 0.06 * (q.x * fx * 2.0 + style.tex_phase.1).sin() * (q.y * fy * 2.0).sin();
    let mut c = [0.0; 3];
    for k in 0..3 {
        c[k] = style.blanket[k] * (1.0 - stripes) + style.stripe[k] * stripes + weave;
    }
    c
}

fn render_frame(style: &Style, pose: &Pose, w: usize, h: usize, u: f64, shadow: bool, rng: &mut ChaCha8Rng) -> (Frame, LabelMap) {
    let body = Body::new(pose, u);
    let shadow_off = style.shadow_dir.mul(3.0 * u);
    let mut data = Vec::with_capacity(w * h * 3);
    let mut labels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let p = V2::new(x as f64 + 0.5, y as f64 + 0.5);
            let class = body.class_at(p, u);
            let d = p.sub(body.center);
            let mut c = match class {
                HEAD => {
                    let far = p.sub(body.head).dot(body.axis) > 2.0 * u;
                    if far { style.hair } else { style.skin }
                }
                ARM => style.skin.map(|v| v * 0.9),
                TORSO => {
                    let ripple = 0.05 * (d.dot(body.axis) / u * 0.8).sin();
                    style.shirt.map(|v| v + ripple)
                }
                LEG => style.pants,
                _ => {
                    let mut c = blanket(style, p, pose.camera);
                    if shadow && body.class_at(p.sub(shadow_off), u) != BACKGROUND {
                        c = c.map(|v| v * SHADOW_DARKEN);
                    }
                    c
                }
            };
            for v in &mut c {
                *v = (*v * pose.brightness + rng.gen_range(-PIXEL_NOISE..PIXEL_NOISE)).clamp(0.0, 1.0);
                data.push((*v * 255.0).round() as u8);
            }
            labels.push(class);
        }
    }
    (Frame::new(w, h, data).expect("sized"), LabelMap::new(w, h, labels).expect("sized"))
}

/// Frames covered by occlusion episodes: `round(rate * T)` frames split into
/// contiguous runs of at most 6, one run per equal slot of the timeline.
fn occlusion_frames(rng: &mut ChaCha8Rng, t: usize, rate: f64) -> Vec<Option<(usize, f64)>> {
    let mut out = vec![None; t];
    let n = (rate * t as f64).round() as usize;
    if n == 0 {
        return out;
    }
    let episodes = n.div_ceil(6);
    let slot = t / episodes;
    let mut remaining = n;
    for e in 0..episodes {
        let len = remaining.div_ceil(episodes - e);
        remaining -= len;
        let lo = e * slot;
        let hi = if e + 1 == episodes { t } else { lo + slot };
        let start = lo + rng.gen_range(0..=(hi - lo - len));
        let arm = rng.gen_range(0..2);
        let angle = deg(rng.gen_range(OCCLUDING_ARM_RANGE.0..OCCLUDING_ARM_RANGE.1));
        for f in &mut out[start..start + len] {
            *f = Some((arm, angle));
        }
    }
    out
}

/// Frame indices opening a new shot after a large-motion cut.
fn jump_frames(rng: &mut ChaCha8Rng, t: usize, jumps: usize) -> Vec<usize> {
    if jumps == 0 {
        return Vec::new();
    }
    let slot = t / jumps;
    (0..jumps).map(|j| j * slot + rng.gen_range(slot / 4..=slot - slot / 4).max(1)).collect()
}

struct Rendered {
    frames: Vec<Frame>,
    labels: Vec<LabelMap>,
    occluded: Vec<bool>,
    jumps: Vec<usize>,
}

fn render_video(cfg: &SynthConfig, index: usize) -> Rendered {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let (w, h) = (cfg.width, cfg.height);
    let u = w.min(h) as f64 / UNIT_DIVISOR;
    let t_len = cfg.frames_per_video;
    let style = Style::random(&mut rng);
    let c0 = V2::new(w as f64 / 2.0 + rng.gen_range(-2.0..2.0) * u, h as f64 / 2.0 + rng.gen_range(-2.0..2.0) * u);
    let drift = [Swing::random(&mut rng, (-2.0, 2.0), (-0.1, 0.1), (1.0, 1.8)), Swing::random(&mut rng, (-2.0, 2.0), (-0.1, 0.1), (1.0, 1.8))];
    let theta0 = rng.gen_range(-20.0..20.0);
    let sway = Swing::random(&mut rng, (-5.0, 5.0), (-0.5, 0.5), (2.0, 4.0));
    let arms = [0, 1].map(|_| Swing::random(&mut rng, ARM_RANGE, (0.0, 30.0), (10.0, 35.0)));
    let legs = [0, 1].map(|_| Swing::random(&mut rng, (-10.0, 35.0), (5.0, 25.0), (5.0, 20.0)));
    let occl = occlusion_frames(&mut rng, t_len, cfg.occlusion_rate);
    let jumps = jump_frames(&mut rng, t_len, cfg.motion_jumps);
    let jump_moves: Vec<(f64, V2, f64)> = jumps
        .iter()
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            (sign * rng.gen_range(30.0..40.0), V2::new(rng.gen_range(6.0..10.0), rng.gen_range(6.0..10.0)).mul(u), rng.gen_range(0.75..0.85))
        })
        .collect();

    let mut out = Rendered { frames: Vec::new(), labels: Vec::new(), occluded: Vec::new(), jumps: jumps.clone() };
    for t in 0..t_len {
        let tf = t as f64;
        let (mut rot, mut camera, mut brightness) = (0.0, V2::new(0.0, 0.0), 1.0);
        for (j, &(r, cam, b)) in jumps.iter().zip(&jump_moves) {
            if t >= *j {
                rot += r;
                camera = camera.add(cam);
                brightness *= b;
            }
        }
        let mut pose = Pose {
            center: c0.add(V2::new(drift[0].at(tf), drift[1].at(tf)).mul(u)),
            theta: deg(theta0 + sway.at(tf) + rot),
            arms: [deg(arms[0].at(tf)), deg(arms[1].at(tf))],
            legs: [deg(legs[0].at(tf)), deg(legs[1].at(tf))],
            occluding: None,
            camera,
            brightness,
        };
        if let Some((arm, angle)) = occl[t] {
            pose.arms[arm] = angle;
            pose.occluding = Some(arm);
        }
        let (frame, label) = render_frame(&style, &pose, w, h, u, cfg.shadow, &mut rng);
        out.frames.push(frame);
        out.labels.push(label);
        out.occluded.push(pose.occluding.is_some());
    }
    out
}

/// Per-video generation metadata not stored in the dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynthInfo {
    /// Frames in which an arm crosses the body, per video.
    pub occluded: Vec<Vec<bool>>,
    /// First frame after each injected large-motion cut, per video.
    pub jumps: Vec<Vec<usize>>,
    /// Ids of training videos stripped of all labels.
    pub unlabeled: Vec<String>,
}

pub fn video_id(index: usize) -> String {
    format!("vid{index:02}")
}

/// Generates a dataset in memory. Videos are rendered from independent RNG
/// streams; label removal draws from a separate stream.
pub fn generate(cfg: &SynthConfig) -> Result<(VideoDataset, SynthInfo)> {
    cfg.validate()?;
    let train = cfg.train_videos();
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    mask_rng.set_stream(0);
    let mut stripped: Vec<usize> = sample(&mut mask_rng, train.max(1), cfg.unlabeled_videos.min(train)).into_vec();
    stripped.sort_unstable();

    let t_len = cfg.frames_per_video;
    let keep = ((cfg.label_fraction * t_len as f64).round() as usize).clamp(1, t_len);
    let mut dataset = VideoDataset::default();
    let mut info = SynthInfo::default();
    for v in 0..cfg.videos {
        let r = render_video(cfg, v);
        let id = video_id(v);
        let split = if v < train { Split::Train } else { Split::Test };
        let labeled: Vec<bool> = if split == Split::Test {
            vec![true; t_len]
        } else if stripped.contains(&v) {
            vec![false; t_len]
        } else {
            let mut m = vec![false; t_len];
            for i in sample(&mut mask_rng, t_len, keep) {
                m[i] = true;
            }
            m
        };
        if stripped.contains(&v) {
            info.unlabeled.push(id.clone());
        }
        let labels = r.labels.into_iter().zip(&labeled).map(|(l, &k)| k.then_some(l)).collect();
        dataset.videos.push(Video { id, split, frames: r.frames, labels });
        info.occluded.push(r.occluded);
        info.jumps.push(r.jumps);
    }
    Ok((dataset, info))
}

/// Fully labeled rendering of one video, used by tests that need ground truth
/// on every frame.
pub fn render_ground_truth(cfg: &SynthConfig, index: usize) -> Result<(Vec<Frame>, Vec<LabelMap>)> {
    cfg.validate()?;
    let r = render_video(cfg, index);
    Ok((r.frames, r.labels))
}
