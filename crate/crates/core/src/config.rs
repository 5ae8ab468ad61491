//! Run configuration file and ablation variants.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::cif::{CifConfig, FusionKind};
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::model::ModelConfig;
use crate::synth::{SampleConfig, SynthConfig};
use crate::tracker::TrackerConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Base seed of the training sequences.
    pub seed: u64,
    /// Base seed of the held-out evaluation sequences.
    pub eval_seed: u64,
    pub train_sequences: usize,
    pub eval_sequences: usize,
    pub frame_size: usize,
    pub length: usize,
    pub eval_length: usize,
    pub distractors: usize,
    pub occlusion: bool,
    pub max_speed: f64,
    pub min_size: f64,
    pub max_size: f64,
    pub center_jitter: f64,
    pub scale_jitter: f64,
    pub max_gap: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        let p = SampleConfig::default();
        Self {
            seed: 1,
            eval_seed: 2,
            train_sequences: 200,
            eval_sequences: 50,
            frame_size: s.frame_size,
            length: s.length,
            eval_length: s.length,
            distractors: s.distractors,
            occlusion: s.occlusion,
            max_speed: s.max_speed,
            min_size: s.min_size,
            max_size: s.max_size,
            center_jitter: p.center_jitter,
            scale_jitter: p.scale_jitter,
            max_gap: p.max_gap,
        }
    }
}

impl DataConfig {
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            frame_size: self.frame_size,
            length: self.length,
            distractors: self.distractors,
            occlusion: self.occlusion,
            max_speed: self.max_speed,
            min_size: self.min_size,
            max_size: self.max_size,
        }
    }

    pub fn eval_synth(&self) -> SynthConfig {
        SynthConfig {
            length: self.eval_length,
            ..self.synth()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// Number of CIF blocks (and backbone groups): 2, 4, 6.
    CifBlocks,
    /// Hidden state size: 4, 8, 16, 32.
    HiddenSize,
    /// Clip length: 2 to 6.
    ClipLength,
    /// Baseline against no contextual information.
    Context,
    /// Attention replaced by addition on either or both sides.
    CifStructure,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown ablation axis {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub axis: Option<AblationAxis>,
    /// Training seeds; every variant runs once per seed.
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            axis: None,
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub cif: CifConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
    pub data: DataConfig,
    pub ablation: AblationConfig,
}

pub const SEED_ENV: &str = "MCIT_SEED";

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `MCIT_SEED` if it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            cif: self.cif.clone(),
            head: self.head.clone(),
        }
    }

    pub fn sample(&self) -> SampleConfig {
        SampleConfig {
            clip_len: self.backbone.clip_len,
            template_size: self.backbone.template_size,
            search_size: self.backbone.search_size,
            template_factor: self.tracker.template_factor,
            search_factor: self.tracker.search_factor,
            center_jitter: self.data.center_jitter,
            scale_jitter: self.data.scale_jitter,
            max_gap: self.data.max_gap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train.validate()?;
        self.tracker.validate()?;
        self.data.synth().validate()?;
        self.data.eval_synth().validate()?;
        if self.data.length < self.backbone.clip_len + 2 {
            return Err(Error::Config(format!(
                "training sequences of {} frames cannot hold a {}-frame clip and two search frames",
                self.data.length, self.backbone.clip_len
            )));
        }
        if self.ablation.seeds.is_empty() {
            return Err(Error::Config("ablation.seeds must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub baseline: bool,
    pub config: RunConfig,
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// Configurations swept along `axis`, baseline included.
pub fn variants(base: &RunConfig, axis: AblationAxis) -> Result<Vec<Variant>> {
    let mk = |label: String, baseline: bool, f: &dyn Fn(&mut RunConfig)| {
        let mut config = base.clone();
        config.ablation.axis = None;
        f(&mut config);
        Variant {
            label,
            baseline,
            config,
        }
    };
    let out: Vec<Variant> = match axis {
        AblationAxis::CifBlocks => {
            let counts = [2usize, 4, 6];
            let m = counts.iter().fold(1, |a, &b| lcm(a, b));
            let depth = base.backbone.depth.div_ceil(m).max(1) * m;
            counts
                .iter()
                .map(|&n| {
                    mk(format!("cif_blocks={n}"), n == 4, &|c| {
                        c.backbone.n_groups = n;
                        c.backbone.depth = depth;
                    })
                })
                .collect()
        }
        AblationAxis::HiddenSize => [4usize, 8, 16, 32]
            .iter()
            .map(|&n| mk(format!("hidden_size={n}"), n == 16, &|c| c.cif.state_size = n))
            .collect(),
        AblationAxis::ClipLength => (2usize..=6)
            .map(|n| mk(format!("clip_length={n}"), n == 5, &|c| c.backbone.clip_len = n))
            .collect(),
        AblationAxis::Context => vec![
            mk("baseline".into(), true, &|c| c.cif.enabled = true),
            mk("wo_ci".into(), false, &|c| c.cif.enabled = false),
        ],
        AblationAxis::CifStructure => {
            let kinds = [
                ("baseline", FusionKind::Attention, FusionKind::Attention),
                ("in_addition", FusionKind::Addition, FusionKind::Attention),
                ("out_addition", FusionKind::Attention, FusionKind::Addition),
                ("both_addition", FusionKind::Addition, FusionKind::Addition),
            ];
            kinds
                .iter()
                .map(|&(label, fi, fo)| {
                    mk(label.into(), label == "baseline", &|c| {
                        c.cif.fuse_in = fi;
                        c.cif.fuse_out = fo;
                    })
                })
                .collect()
        }
    };
    for v in &out {
        v.config.validate()?;
    }
    Ok(out)
}
