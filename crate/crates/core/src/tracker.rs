//! Streaming inference with confidence-gated hidden-state propagation, a
//! memory bank of reliable templates and periodic clip refresh.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::cif::CifBlockState;
use crate::error::{Error, Result};
use crate::head::{decode_box, HeadMaps};
use crate::image::{CropWindow, Image};
use crate::model::Model;
use crate::synth::write_boxes;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Clip refresh interval in frames; 0 never refreshes.
    pub update_interval: usize,
    /// Hidden states and bank entries are committed only when the score
    /// exceeds this value.
    pub threshold: f64,
    pub bank_capacity: usize,
    pub template_factor: f64,
    pub search_factor: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            update_interval: 25,
            threshold: 0.7,
            bank_capacity: 5,
            template_factor: 2.0,
            search_factor: 4.0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.threshold.is_nan() {
            return Err(Error::Config("tracker threshold is NaN".into()));
        }
        if !(self.template_factor > 0.0 && self.search_factor > 0.0) {
            return Err(Error::Config("crop factors must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub template: Image,
    pub score: f64,
    pub frame_index: usize,
}

#[derive(Debug, Clone)]
pub struct TrackerState {
    /// Slot 0 holds the initial template and is never replaced.
    pub clip_slots: Vec<Image>,
    pub cif_states: Vec<CifBlockState>,
    pub memory_bank: Vec<MemoryEntry>,
    /// Previous box in frame pixels.
    pub prev_box: BBox,
    pub frame_counter: usize,
    pub config: TrackerConfig,
}

#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub bbox: BBox,
    pub score: f64,
    pub committed: bool,
    pub refreshed: bool,
    pub maps: HeadMaps,
}

/// Anything that can follow one target through a video.
pub trait SequenceTracker {
    fn initialize(&mut self, frame: &Image, bbox: BBox) -> Result<()>;
    /// Returns the box in frame pixels and a confidence score.
    fn track(&mut self, frame: &Image) -> Result<(BBox, f64)>;
}

pub struct Tracker<'m> {
    model: &'m Model,
    config: TrackerConfig,
    state: Option<TrackerState>,
}

fn template_crop(model: &Model, frame: &Image, b: &BBox, factor: f64) -> Image {
    let win = CropWindow::around_box(b, factor);
    frame.crop_resize(&win, model.config.backbone.template_size)
}

fn sanitize(b: BBox, frame: &Image) -> BBox {
    let (w, h) = (frame.width() as f64, frame.height() as f64);
    let c = b.clamp(0.0, 0.0, w, h);
    let (cx, cy) = c.center();
    let bw = c.width().max(1.0);
    let bh = c.height().max(1.0);
    BBox::from_center(cx, cy, bw, bh)
}

impl<'m> Tracker<'m> {
    pub fn new(model: &'m Model, config: TrackerConfig) -> Self {
        Self {
            model,
            config,
            state: None,
        }
    }

    /// Resumes from a state produced by an earlier tracker on `model`.
    pub fn from_state(model: &'m Model, state: TrackerState) -> Self {
        Self {
            model,
            config: state.config.clone(),
            state: Some(state),
        }
    }

    pub fn state(&self) -> Option<&TrackerState> {
        self.state.as_ref()
    }

    pub fn into_state(self) -> Option<TrackerState> {
        self.state
    }

    pub fn init(&mut self, frame: &Image, init_box: BBox) -> Result<()> {
        self.config.validate()?;
        let (w, h) = (frame.width() as f64, frame.height() as f64);
        let inside = init_box.is_valid()
            && init_box.width() > 0.0
            && init_box.height() > 0.0
            && init_box.x1 >= 0.0
            && init_box.y1 >= 0.0
            && init_box.x2 <= w
            && init_box.y2 <= h;
        if !inside {
            return Err(Error::Input(format!("initial box {init_box:?} is not inside the {w}x{h} frame")));
        }
        let template = template_crop(self.model, frame, &init_box, self.config.template_factor);
        self.state = Some(TrackerState {
            clip_slots: vec![template; self.model.config.backbone.clip_len],
            cif_states: self.model.zero_states(),
            memory_bank: Vec::new(),
            prev_box: init_box,
            frame_counter: 0,
            config: self.config.clone(),
        });
        Ok(())
    }

    pub fn track_frame(&mut self, frame: &Image) -> Result<FrameOutput> {
        let model = self.model;
        let state = self
            .state
            .as_mut()
            .ok_or_else(|| Error::Contract("tracker used before init".into()))?;
        let cfg = &state.config;
        state.frame_counter += 1;
        let t = state.frame_counter;
        let win = CropWindow::around_box(&state.prev_box, cfg.search_factor);
        let search = frame.crop_resize(&win, model.config.backbone.search_size);
        let out = model.infer(&state.clip_slots, &search, &state.cif_states)?;
        let (crop_box, score) = decode_box(&out.maps);
        let bbox = sanitize(win.to_image(&crop_box), frame);
        let committed = score > cfg.threshold;
        if committed {
            state.cif_states = out
                .states
                .into_iter()
                .map(|mut s| {
                    s.hidden.frame_index = t;
                    s
                })
                .collect();
            let entry = MemoryEntry {
                template: template_crop(model, frame, &bbox, cfg.template_factor),
                score,
                frame_index: t,
            };
            if cfg.bank_capacity > 0 {
                if state.memory_bank.len() >= cfg.bank_capacity {
                    let (worst, _) = state
                        .memory_bank
                        .iter()
                        .enumerate()
                        .min_by(|a, b| a.1.score.total_cmp(&b.1.score))
                        .expect("nonempty bank");
                    state.memory_bank.remove(worst);
                }
                state.memory_bank.push(entry);
            }
        }
        let refreshed = cfg.update_interval > 0 && t % cfg.update_interval == 0 && !state.memory_bank.is_empty();
        if refreshed {
            refresh_clip(state);
        }
        state.prev_box = bbox;
        Ok(FrameOutput {
            bbox,
            score,
            committed,
            refreshed,
            maps: out.maps,
        })
    }
}

/// Fills the trailing clip slots with the best bank entries in frame order.
fn refresh_clip(state: &mut TrackerState) {
    let free = state.clip_slots.len().saturating_sub(1);
    let mut best: Vec<&MemoryEntry> = state.memory_bank.iter().collect();
    best.sort_by(|a, b| b.score.total_cmp(&a.score).then(b.frame_index.cmp(&a.frame_index)));
    best.truncate(free);
    best.sort_by_key(|e| e.frame_index);
    let start = state.clip_slots.len() - best.len();
    for (slot, e) in state.clip_slots[start..].iter_mut().zip(best) {
        *slot = e.template.clone();
    }
}

impl SequenceTracker for Tracker<'_> {
    fn initialize(&mut self, frame: &Image, bbox: BBox) -> Result<()> {
        self.init(frame, bbox)
    }

    fn track(&mut self, frame: &Image) -> Result<(BBox, f64)> {
        let o = self.track_frame(frame)?;
        Ok((o.bbox, o.score))
    }
}

/// Writes `<name>.txt` (one `x,y,w,h` line per frame) and `<name>_scores.txt`
/// into `dir`, or `results.txt`/`scores.txt` when `name` is empty.
pub fn write_results(dir: &Path, name: &str, boxes: &[BBox], scores: &[f64]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (rfile, sfile) = if name.is_empty() {
        ("results.txt".to_string(), "scores.txt".to_string())
    } else {
        (format!("{name}.txt"), format!("{name}_scores.txt"))
    };
    write_boxes(&dir.join(rfile), boxes)?;
    let mut s = String::new();
    for v in scores {
        s.push_str(&format!("{v:.6}\n"));
    }
    std::fs::write(dir.join(sfile), s)?;
    Ok(())
}
