//! Procedural moving-shape videos with identical distractors and occluders,
//! plus training-sample extraction and an on-disk sequence layout.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::image::{CropWindow, Image};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub frame_size: usize,
    pub length: usize,
    pub distractors: usize,
    pub occlusion: bool,
    /// Upper bound on per-frame center displacement, in pixels.
    pub max_speed: f64,
    pub min_size: f64,
    pub max_size: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frame_size: 128,
            length: 60,
            distractors: 0,
            occlusion: false,
            max_speed: 4.0,
            min_size: 12.0,
            max_size: 28.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.length < 2 {
            return Err(Error::Config("sequence length must be at least 2".into()));
        }
        if self.frame_size == 0 || self.frame_size % 16 != 0 {
            return Err(Error::Config(format!("frame size {} is not a multiple of 16", self.frame_size)));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size * 1.6 < self.frame_size as f64) {
            return Err(Error::Config("object size range does not fit the frame".into()));
        }
        if !(self.max_speed > 0.0) {
            return Err(Error::Config("max_speed must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Diamond,
}

impl ShapeKind {
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Rectangle => u.abs() <= 1.0 && v.abs() <= 1.0,
            ShapeKind::Ellipse => u * u + v * v <= 1.0,
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Appearance {
    pub kind: ShapeKind,
    pub color: [f32; 3],
    pub core: [f32; 3],
}

/// A bar sweeping across the frame during `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occluder {
    pub start: usize,
    pub end: usize,
    pub vertical: bool,
    pub pos0: f64,
    pub velocity: f64,
    pub thickness: f64,
    pub color: [f32; 3],
}

impl Occluder {
    pub fn active(&self, t: usize) -> bool {
        (self.start..self.end).contains(&t)
    }

    fn position(&self, t: usize) -> f64 {
        self.pos0 + self.velocity * (t - self.start) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Background {
    base: [f32; 3],
    amp: f32,
    fx: f64,
    fy: f64,
    phase: f64,
}

/// Frames are rendered on demand from the stored trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub name: String,
    pub seed: u64,
    pub config: SynthConfig,
    pub appearance: Appearance,
    /// Target boxes in frame pixels.
    pub target: Vec<BBox>,
    pub distractors: Vec<Vec<BBox>>,
    pub occluders: Vec<Occluder>,
    background: Background,
}

fn random_color<R: Rng>(rng: &mut R) -> [f32; 3] {
    [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]
}

fn color_dist(a: [f32; 3], b: [f32; 3]) -> f32 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum()
}

fn random_walk<R: Rng>(rng: &mut R, cfg: &SynthConfig, w: &[f64], h: &[f64]) -> Vec<BBox> {
    let side = cfg.frame_size as f64;
    let vmax = 0.99 * cfg.max_speed;
    let accel = Normal::new(0.0, 0.35 * cfg.max_speed).expect("valid std");
    let lo = |s: f64| s / 2.0 + 1.0;
    let hi = |s: f64| side - s / 2.0 - 1.0;
    let mut cx = rng.gen_range(lo(w[0])..hi(w[0]));
    let mut cy = rng.gen_range(lo(h[0])..hi(h[0]));
    let mut vx: f64 = rng.gen_range(-vmax..vmax);
    let mut vy: f64 = rng.gen_range(-vmax..vmax);
    let mut out = Vec::with_capacity(w.len());
    for t in 0..w.len() {
        if t > 0 {
            vx += accel.sample(rng);
            vy += accel.sample(rng);
            let speed = vx.hypot(vy);
            if speed > vmax {
                vx *= vmax / speed;
                vy *= vmax / speed;
            }
            cx += vx;
            cy += vy;
            let (lx, hx) = (lo(w[t]), hi(w[t]));
            if cx < lx {
                cx = (2.0 * lx - cx).min(hx);
                vx = vx.abs();
            } else if cx > hx {
                cx = (2.0 * hx - cx).max(lx);
                vx = -vx.abs();
            }
            let (ly, hy) = (lo(h[t]), hi(h[t]));
            if cy < ly {
                cy = (2.0 * ly - cy).min(hy);
                vy = vy.abs();
            } else if cy > hy {
                cy = (2.0 * hy - cy).max(ly);
                vy = -vy.abs();
            }
        }
        out.push(BBox::from_center(cx, cy, w[t], h[t]));
    }
    out
}

impl SyntheticSequence {
    /// Generates a sequence; a pure function of `(config, seed)`.
    pub fn generate(config: &SynthConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = random_color(&mut rng);
        let background = Background {
            base,
            amp: rng.gen_range(0.03..0.08),
            fx: rng.gen_range(0.05..0.2),
            fy: rng.gen_range(0.05..0.2),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        };
        let mut color = random_color(&mut rng);
        while color_dist(color, base) < 0.6 {
            color = random_color(&mut rng);
        }
        let core = color.map(|c| if c > 0.5 { c - 0.35 } else { c + 0.35 });
        let kind = [ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::Diamond][rng.gen_range(0..3)];
        let appearance = Appearance { kind, color, core };
        let size = rng.gen_range(config.min_size..=config.max_size);
        let aspect: f64 = rng.gen_range(0.65f64..1.5).sqrt();
        let scale_step = Normal::<f64>::new(0.0, 0.01).expect("valid std");
        let (mut w, mut h) = (Vec::new(), Vec::new());
        let mut s = 1.0f64;
        for _ in 0..config.length {
            w.push(size * aspect * s);
            h.push(size / aspect * s);
            s = (s * scale_step.sample(&mut rng).exp()).clamp(0.85, 1.2);
        }
        let target = random_walk(&mut rng, config, &w, &h);
        let distractors = (0..config.distractors)
            .map(|_| random_walk(&mut rng, config, &w, &h))
            .collect();
        let mut occluders = Vec::new();
        if config.occlusion {
            let side = config.frame_size as f64;
            for _ in 0..rng.gen_range(1..=2) {
                let span = ((config.length as f64 * rng.gen_range(0.2..0.4)) as usize).max(1);
                let start = rng.gen_range(0..=config.length.saturating_sub(span));
                let forward = rng.gen_bool(0.5);
                let travel = side / span as f64;
                let mut dark = random_color(&mut rng).map(|c| 0.4 * c);
                if color_dist(dark, color) < 0.3 {
                    dark = [0.05, 0.05, 0.05];
                }
                occluders.push(Occluder {
                    start,
                    end: start + span,
                    vertical: rng.gen_bool(0.5),
                    pos0: if forward { 0.0 } else { side },
                    velocity: if forward { travel } else { -travel },
                    thickness: rng.gen_range(0.5..0.9) * size,
                    color: dark,
                });
            }
        }
        Ok(Self {
            name: format!("synth-{seed:08x}"),
            seed,
            config: config.clone(),
            appearance,
            target,
            distractors,
            occluders,
            background,
        })
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn gt(&self, t: usize) -> BBox {
        self.target[t]
    }

    fn draw_shape(&self, img: &mut Image, b: &BBox) {
        let size = img.width();
        let (cx, cy) = b.center();
        let (hw, hh) = (b.width() / 2.0, b.height() / 2.0);
        let x0 = (b.x1.floor().max(0.0)) as usize;
        let y0 = (b.y1.floor().max(0.0)) as usize;
        let x1 = (b.x2.ceil() as usize).min(size);
        let y1 = (b.y2.ceil() as usize).min(img.height());
        let kind = self.appearance.kind;
        for y in y0..y1 {
            for x in x0..x1 {
                let mut cover = 0.0f32;
                let mut core = 0.0f32;
                for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                    let u = (x as f64 + sx - cx) / hw;
                    let v = (y as f64 + sy - cy) / hh;
                    if kind.contains(u, v) {
                        cover += 0.25;
                        if kind.contains(2.2 * u, 2.2 * v) {
                            core += 0.25;
                        }
                    }
                }
                if cover > 0.0 {
                    img.blend_pixel(x, y, self.appearance.color, cover);
                }
                if core > 0.0 {
                    img.blend_pixel(x, y, self.appearance.core, core);
                }
            }
        }
    }

    /// Renders frame `t`.
    pub fn render(&self, t: usize) -> Image {
        let n = self.config.frame_size;
        let bg = &self.background;
        let mut img = Image::filled(n, n, bg.base);
        for y in 0..n {
            for x in 0..n {
                let tex = (bg.fx * x as f64 + bg.phase).sin() * (bg.fy * y as f64).cos();
                let d = bg.amp * tex as f32;
                img.set_pixel(x, y, bg.base.map(|c| (c + d).clamp(0.0, 1.0)));
            }
        }
        for d in &self.distractors {
            self.draw_shape(&mut img, &d[t]);
        }
        self.draw_shape(&mut img, &self.target[t]);
        for o in self.occluders.iter().filter(|o| o.active(t)) {
            let p = o.position(t);
            let lo = (p - o.thickness / 2.0).round().max(0.0) as usize;
            let hi = ((p + o.thickness / 2.0).round().max(0.0) as usize).min(n);
            for a in lo..hi {
                for b in 0..n {
                    let (x, y) = if o.vertical { (a, b) } else { (b, a) };
                    img.set_pixel(x, y, o.color);
                }
            }
        }
        img
    }

    /// Writes `00000.png, ...` and `groundtruth.txt` into `dir`.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for t in 0..self.len() {
            self.render(t).save_png(&frame_path(dir, t))?;
        }
        let boxes: Vec<BBox> = self.target.clone();
        write_boxes(&dir.join("groundtruth.txt"), &boxes)
    }
}

pub fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("{t:05}.png"))
}

/// Writes one `x,y,w,h` pixel line per box.
pub fn write_boxes(path: &Path, boxes: &[BBox]) -> Result<()> {
    let mut s = String::new();
    for b in boxes {
        let [x, y, w, h] = b.to_xywh();
        s.push_str(&format!("{x:.4},{y:.4},{w:.4},{h:.4}\n"));
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_boxes(path: &Path) -> Result<Vec<BBox>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split([',', '\t', ' '])
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if v.len() != 4 {
            return Err(Error::Input(format!("{}:{}: expected 4 values", path.display(), i + 1)));
        }
        out.push(BBox::from_xywh(v[0], v[1], v[2], v[3]));
    }
    Ok(out)
}

/// A source of frames with ground truth, synthetic or on disk.
pub trait FrameSource {
    fn name(&self) -> &str;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn frame(&self, t: usize) -> Result<Image>;
    fn gt(&self, t: usize) -> BBox;
}

impl FrameSource for SyntheticSequence {
    fn name(&self) -> &str {
        &self.name
    }

    fn len(&self) -> usize {
        self.target.len()
    }

    fn frame(&self, t: usize) -> Result<Image> {
        Ok(self.render(t))
    }

    fn gt(&self, t: usize) -> BBox {
        self.target[t]
    }
}

/// A sequence directory of zero-padded frame images and `groundtruth.txt`.
#[derive(Debug, Clone)]
pub struct DiskSequence {
    pub name: String,
    pub frames: Vec<PathBuf>,
    pub boxes: Vec<BBox>,
}

impl DiskSequence {
    pub fn open(dir: &Path) -> Result<Self> {
        let boxes = read_boxes(&dir.join("groundtruth.txt"))?;
        let mut frames: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
            })
            .collect();
        frames.sort();
        if frames.is_empty() {
            return Err(Error::Input(format!("no frames in {}", dir.display())));
        }
        if boxes.is_empty() {
            return Err(Error::Input(format!("{} has no annotation for frame 0", dir.display())));
        }
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sequence".into());
        Ok(Self { name, frames, boxes })
    }
}

impl FrameSource for DiskSequence {
    fn name(&self) -> &str {
        &self.name
    }

    fn len(&self) -> usize {
        self.frames.len()
    }

    fn frame(&self, t: usize) -> Result<Image> {
        Image::load(&self.frames[t])
    }

    /// Frames past the last annotation reuse it.
    fn gt(&self, t: usize) -> BBox {
        self.boxes[t.min(self.boxes.len() - 1)]
    }
}

/// Seed of sequence `index` in a set drawn from `base`.
pub fn sequence_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

pub fn generate_set(config: &SynthConfig, base_seed: u64, count: usize) -> Result<Vec<SyntheticSequence>> {
    (0..count)
        .map(|i| SyntheticSequence::generate(config, sequence_seed(base_seed, i)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub clip_len: usize,
    pub template_size: usize,
    pub search_size: usize,
    pub template_factor: f64,
    pub search_factor: f64,
    /// Center jitter as a fraction of the crop side.
    pub center_jitter: f64,
    /// Relative crop-side jitter.
    pub scale_jitter: f64,
    /// Largest frame gap between the two search frames.
    pub max_gap: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            clip_len: 5,
            template_size: 64,
            search_size: 128,
            template_factor: 2.0,
            search_factor: 4.0,
            center_jitter: 0.1,
            scale_jitter: 0.2,
            max_gap: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub clip: Vec<Image>,
    pub search: [Image; 2],
    /// Ground truth in normalized search-crop coordinates.
    pub gt: [BBox; 2],
    pub frames: Vec<usize>,
}

/// Search window around `b` with optional center and scale jitter.
pub fn jittered_window<R: Rng>(rng: &mut R, b: &BBox, cfg: &SampleConfig) -> CropWindow {
    let (cx, cy) = b.center();
    let side = (cfg.search_factor * b.width().max(b.height())).max(CropWindow::MIN_SIDE);
    let side = side * (1.0 + cfg.scale_jitter * rng.gen_range(-1.0..=1.0));
    let jx = cfg.center_jitter * side * rng.gen_range(-1.0..=1.0);
    let jy = cfg.center_jitter * side * rng.gen_range(-1.0..=1.0);
    CropWindow {
        x0: cx + jx - side / 2.0,
        y0: cy + jy - side / 2.0,
        side,
    }
}

/// Draws a clip of `clip_len` ordered frames starting at frame 0 and two
/// later search frames, and crops them.
pub fn make_training_sample<R: Rng>(
    seq: &SyntheticSequence,
    cfg: &SampleConfig,
    rng: &mut R,
) -> Result<TrainingSample> {
    let n = seq.len();
    let k = cfg.clip_len;
    if k == 0 || n < k + 2 {
        return Err(Error::Sampling(format!(
            "sequence of {n} frames is too short for a {k}-frame clip and two search frames"
        )));
    }
    let s1 = rng.gen_range(k..n - 1);
    let s2 = (s1 + rng.gen_range(1..=cfg.max_gap.max(1))).min(n - 1);
    let mut clip_frames = vec![0];
    let mut rest: Vec<usize> = sample(rng, s1 - 1, k - 1).into_iter().map(|i| i + 1).collect();
    rest.sort_unstable();
    clip_frames.extend(rest);
    let clip = clip_frames
        .iter()
        .map(|&t| {
            let win = CropWindow::around_box(&seq.gt(t), cfg.template_factor);
            seq.render(t).crop_resize(&win, cfg.template_size)
        })
        .collect();
    let mut crop = |t: usize| {
        let win = jittered_window(rng, &seq.gt(t), cfg);
        (seq.render(t).crop_resize(&win, cfg.search_size), win.to_crop(&seq.gt(t)))
    };
    let (a, ga) = crop(s1);
    let (b, gb) = crop(s2);
    let mut frames = clip_frames;
    frames.extend([s1, s2]);
    Ok(TrainingSample {
        clip,
        search: [a, b],
        gt: [ga, gb],
        frames,
    })
}
