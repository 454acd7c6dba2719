//! Deterministic synthetic video clips carrying one action label and five
//! binary privacy attributes, the desk-scale stand-in for cross-dataset
//! action/attribute training.
//!
//! Every attribute is decodable from any single clean frame; actions live in
//! the sprite's motion. All pixel values stay inside [0.1, 0.9] so the
//! acquisition clamp is inactive on clean data and gradient checks see no
//! kinks. Rendering is anti-aliased so centroids move subpixel-smoothly.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::par;
use crate::sensor::{ImageTensor, VideoTensor};
use crate::{Error, Result};

/// Action classes (K = 4). `Rotate` orbits the sprite around the frame
/// center so the motion is visible for any sprite shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Translate,
    Bounce,
    Rotate,
    Pulse,
}

pub const ACTIONS: [Action; 4] = [
    Action::Translate,
    Action::Bounce,
    Action::Rotate,
    Action::Pulse,
];
pub const N_ACTIONS: usize = 4;
/// Binary attributes: shape class, fill texture, marker dot, border style,
/// companion sprite.
pub const N_ATTRIBUTES: usize = 5;
pub const FRAME_SIZE: usize = 32;
pub const CLIP_FRAMES: usize = 8;
const FRAME_RATE: f64 = 12.0;

impl Action {
    pub fn index(self) -> usize {
        match self {
            Action::Translate => 0,
            Action::Bounce => 1,
            Action::Rotate => 2,
            Action::Pulse => 3,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        ACTIONS
            .get(i)
            .copied()
            .ok_or_else(|| Error::invalid(format!("action index {i} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Translate => "translate",
            Action::Bounce => "bounce",
            Action::Rotate => "rotate",
            Action::Pulse => "pulse",
        }
    }
}

/// Full recipe for one clip; rendering is a pure function of this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub action: Action,
    pub attributes: [bool; N_ATTRIBUTES],
    pub seed: u64,
    pub frames: usize,
    pub size: usize,
}

impl ClipSpec {
    pub fn new(action: Action, attributes: [bool; N_ATTRIBUTES], seed: u64) -> Self {
        ClipSpec {
            action,
            attributes,
            seed,
            frames: CLIP_FRAMES,
            size: FRAME_SIZE,
        }
    }
}

struct SpriteStyle {
    square: bool,
    textured: bool,
    dot: bool,
    border: bool,
    companion: bool,
    companion_offset: (f64, f64),
    fill: [f64; 3],
    background: [f64; 3],
}

fn smooth_coverage(signed_distance: f64) -> f64 {
    // 1 inside, 0 outside, ~1px anti-aliased edge
    (0.5 - signed_distance).clamp(0.0, 1.0)
}

fn shade_pixel(
    x: f64,
    y: f64,
    cx: f64,
    cy: f64,
    radius: f64,
    style: &SpriteStyle,
    ch: usize,
) -> f64 {
    let mut value = style.background[ch];

    // companion: small disc at a fixed sprite-relative offset, pointed
    // toward the frame center so it stays visible
    if style.companion {
        let dx = x - (cx + style.companion_offset.0);
        let dy = y - (cy + style.companion_offset.1);
        let d = (dx * dx + dy * dy).sqrt() - 2.2;
        let cov = smooth_coverage(d);
        value = value * (1.0 - cov) + 0.82 * cov;
    }

    let dx = x - cx;
    let dy = y - cy;
    let dist = if style.square {
        dx.abs().max(dy.abs()) - radius
    } else {
        (dx * dx + dy * dy).sqrt() - radius
    };

    let cov = smooth_coverage(dist);
    if cov > 0.0 {
        let mut fill = style.fill[ch];
        if style.textured {
            // 2px checker in sprite-local coordinates
            let cell = ((dx + 64.0) / 2.0).floor() as i64 + ((dy + 64.0) / 2.0).floor() as i64;
            if cell % 2 == 0 {
                fill -= 0.22;
            }
        }
        if style.dot {
            // 4x4 color-pure marker anchored inside the sprite; its red
            // signature is unambiguous against the gray-balanced texture
            if (-3.0..1.0).contains(&dx) && (-3.0..1.0).contains(&dy) {
                fill = if ch == 0 { 0.9 } else { 0.12 };
            }
        }
        if style.border {
            // dark rim just inside the silhouette
            if dist > -1.8 {
                fill = 0.1;
            }
        }
        value = value * (1.0 - cov) + fill * cov;
    }
    value.clamp(0.1, 0.9)
}

/// Sprite center and radius for frame `t`.
///
/// The four motions occupy distinct spatial signatures: translate sweeps
/// horizontally pinned to the top or bottom half, bounce sweeps vertically
/// pinned to the left or right half, rotate orbits the frame center through
/// all quadrants, and pulse sits centered while its size oscillates.
fn motion(action: Action, t: usize, frames: usize, rng_phase: (f64, f64, f64)) -> (f64, f64, f64) {
    let (jx, jy, phase) = rng_phase;
    let tf = t as f64;
    let center = (FRAME_SIZE as f64 - 1.0) / 2.0; // 15.5
    let radius = 5.5;
    match action {
        Action::Translate => {
            let span = 11.0;
            let x0 = center - span / 2.0 + jx;
            let side = if phase < std::f64::consts::PI { 1.0 } else { -1.0 };
            let y = center + side * (6.0 + 0.75 * (jy + 1.0));
            (x0 + span * tf / (frames as f64 - 1.0), y, radius)
        }
        Action::Bounce => {
            let span = 11.0;
            let side = if phase < std::f64::consts::PI { 1.0 } else { -1.0 };
            let x = center + side * (6.0 + 0.75 * (jx + 1.0));
            let y0 = center - span / 2.0 + jy;
            // triangle wave: down then back up
            let half = (frames as f64 - 1.0) / 2.0;
            let phase_t = if tf <= half { tf / half } else { (frames as f64 - 1.0 - tf) / half };
            (x, y0 + span * phase_t, radius)
        }
        Action::Rotate => {
            let orbit = 6.0;
            let theta = phase + 2.0 * std::f64::consts::PI * tf / frames as f64;
            (
                center + orbit * theta.cos(),
                center + orbit * theta.sin(),
                radius,
            )
        }
        Action::Pulse => {
            let r = 5.0
                * (1.0 + 0.55 * (phase + 2.0 * std::f64::consts::PI * tf / frames as f64).sin());
            (center + jx, center + jy, r)
        }
    }
}

/// Renders a clip; bit-identical for identical specs.
pub fn render(spec: &ClipSpec) -> VideoTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let background = [
        rng.gen_range(0.12..0.2),
        rng.gen_range(0.12..0.2),
        rng.gen_range(0.12..0.2),
    ];
    let fill = [
        rng.gen_range(0.6..0.8),
        rng.gen_range(0.5..0.7),
        rng.gen_range(0.45..0.65),
    ];
    let jx = rng.gen_range(-1.0..1.0);
    let jy = rng.gen_range(-1.0..1.0);
    let phase = rng.gen_range(0.0..(2.0 * std::f64::consts::PI));

    let center = (FRAME_SIZE as f64 - 1.0) / 2.0;
    let (cx0, cy0, _) = motion(spec.action, 0, spec.frames, (jx, jy, phase));
    let companion_offset = (
        if cx0 <= center { 8.0 } else { -8.0 },
        if cy0 <= center { 8.0 } else { -8.0 },
    );
    let style = SpriteStyle {
        square: spec.attributes[0],
        textured: spec.attributes[1],
        dot: spec.attributes[2],
        border: spec.attributes[3],
        companion: spec.attributes[4],
        companion_offset,
        fill,
        background,
    };

    let size = spec.size;
    let frames: Vec<ImageTensor> = (0..spec.frames)
        .map(|t| {
            let (cx, cy, radius) = motion(spec.action, t, spec.frames, (jx, jy, phase));
            let mut planes = vec![0.0; 3 * size * size];
            for ch in 0..3 {
                for r in 0..size {
                    for c in 0..size {
                        planes[(ch * size + r) * size + c] =
                            shade_pixel(c as f64, r as f64, cx, cy, radius, &style, ch);
                    }
                }
            }
            ImageTensor::new(size, size, planes).expect("values clamped to [0.1,0.9]")
        })
        .collect();
    VideoTensor::new(frames, FRAME_RATE).expect("at least one frame")
}

/// A rendered clip with its labels and a stable id.
#[derive(Debug, Clone)]
pub struct LabeledClip {
    pub id: u64,
    pub spec: ClipSpec,
    pub video: VideoTensor,
}

/// Train/test split with disjoint seed ranges and stratified labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<LabeledClip>,
    pub test: Vec<LabeledClip>,
    pub master_seed: u64,
}

fn stratified_specs(n: usize, master_seed: u64, seed_offset: u64, split_tag: u64) -> Vec<ClipSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed ^ (0x5bd1_e995 * (split_tag + 1)));
    // exact class balance: round-robin actions, shuffled
    let mut actions: Vec<Action> = (0..n).map(|i| ACTIONS[i % N_ACTIONS]).collect();
    actions.shuffle(&mut rng);
    // exact balance per attribute: half ones, shuffled independently
    let mut attr_columns = Vec::with_capacity(N_ATTRIBUTES);
    for _ in 0..N_ATTRIBUTES {
        let mut col: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        col.shuffle(&mut rng);
        attr_columns.push(col);
    }
    (0..n)
        .map(|i| {
            let mut attributes = [false; N_ATTRIBUTES];
            for (m, col) in attr_columns.iter().enumerate() {
                attributes[m] = col[i];
            }
            ClipSpec::new(actions[i], attributes, seed_offset + i as u64)
        })
        .collect()
}

/// Builds a reproducible dataset. Labels are exactly balanced; clip seeds of
/// the two splits occupy disjoint ranges derived from the master seed.
pub fn make_dataset(n_train: usize, n_test: usize, master_seed: u64) -> Result<Dataset> {
    if n_train < N_ACTIONS * N_ATTRIBUTES {
        return Err(Error::invalid(format!(
            "need at least {} training clips",
            N_ACTIONS * N_ATTRIBUTES
        )));
    }
    if n_test == 0 {
        return Err(Error::invalid("need at least one test clip"));
    }
    let base = master_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let train_specs = stratified_specs(n_train, master_seed, base, 0);
    let test_specs = stratified_specs(n_test, master_seed, base + n_train as u64, 1);

    let train = par::map_slice(&train_specs, render);
    let test = par::map_slice(&test_specs, render);

    let train = train_specs
        .into_iter()
        .zip(train)
        .enumerate()
        .map(|(i, (spec, video))| LabeledClip {
            id: i as u64,
            spec,
            video,
        })
        .collect();
    let test = test_specs
        .into_iter()
        .zip(test)
        .enumerate()
        .map(|(i, (spec, video))| LabeledClip {
            id: (n_train + i) as u64,
            spec,
            video,
        })
        .collect();
    Ok(Dataset {
        train,
        test,
        master_seed,
    })
}

/// Maximum relative deviation of any action or attribute share from its
/// balanced value.
pub fn balance_deviation(clips: &[LabeledClip]) -> f64 {
    let n = clips.len() as f64;
    let mut worst = 0.0f64;
    for a in 0..N_ACTIONS {
        let count = clips.iter().filter(|c| c.spec.action.index() == a).count() as f64;
        worst = worst.max((count / n - 1.0 / N_ACTIONS as f64).abs() * N_ACTIONS as f64);
    }
    for m in 0..N_ATTRIBUTES {
        let count = clips.iter().filter(|c| c.spec.attributes[m]).count() as f64;
        worst = worst.max((count / n - 0.5).abs() * 2.0);
    }
    worst
}
