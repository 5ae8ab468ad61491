use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mcitrack::bbox::iou;
use mcitrack::config::{variants, AblationAxis, RunConfig};
use mcitrack::eval::{run_one_pass_eval, success_curve, track_sequence, EvalReport};
use mcitrack::model::Model;
use mcitrack::synth::{generate_set, read_boxes, DiskSequence, FrameSource, SyntheticSequence};
use mcitrack::tracker::{write_results, Tracker};
use mcitrack::train::fit;

use crate::output::staged;
use crate::plot::line_chart;
use crate::{AblateArgs, CliError, CliResult, EvalArgs, GenerateArgs, RenderArgs, TrackArgs, TrainArgs};

const PRED_COLOR: [f32; 3] = [0.9, 0.1, 0.1];
const GT_COLOR: [f32; 3] = [0.1, 0.8, 0.2];

fn load_config(path: &Path) -> CliResult<RunConfig> {
    if !path.is_file() {
        return Err(CliError::Config(format!("config file {} not found", path.display())));
    }
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_env()?;
    Ok(cfg)
}

fn optional_config(path: Option<&PathBuf>) -> CliResult<RunConfig> {
    match path {
        Some(p) => load_config(p),
        None => Ok(RunConfig::default()),
    }
}

fn load_model(path: &Path) -> CliResult<Model> {
    if !path.is_file() {
        return Err(CliError::Runtime(format!("checkpoint {} not found", path.display())));
    }
    Ok(Model::load(path)?)
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let sequences = generate_set(&cfg.data.synth(), cfg.data.seed, cfg.data.train_sequences)?;
    let snapshot = cfg.to_toml()?;
    staged(&a.out, |dir| {
        fs::write(dir.join("config.resolved.toml"), &snapshot)?;
        let mut model = Model::new(cfg.model(), cfg.train.seed)?;
        eprintln!(
            "training {} parameters on {} sequences, {} epochs",
            model.num_parameters(),
            sequences.len(),
            cfg.train.epochs
        );
        let report = fit(&mut model, &sequences, &cfg.sample(), &cfg.train, Some(dir))?;
        for (e, l) in report.epoch_losses.iter().enumerate() {
            eprintln!("epoch {e}: mean loss {l:.4}");
        }
        Ok(())
    })?;
    println!("{}", a.out.join("model.ckpt").display());
    Ok(())
}

pub fn track(a: &TrackArgs) -> CliResult<()> {
    let mut cfg = optional_config(a.config.as_ref())?;
    if let Some(t) = a.threshold_a {
        cfg.tracker.threshold = t;
    }
    if let Some(t) = a.update_interval {
        cfg.tracker.update_interval = t;
    }
    cfg.tracker.validate()?;
    let model = load_model(&a.checkpoint)?;
    let seq: Box<dyn FrameSource> = match (&a.sequence, a.synthetic) {
        (Some(dir), None) => Box::new(DiskSequence::open(dir)?),
        (None, Some(seed)) => Box::new(SyntheticSequence::generate(&cfg.data.eval_synth(), seed)?),
        _ => return Err(CliError::Config("pass exactly one of --sequence or --synthetic".into())),
    };
    let mut tracker = Tracker::new(&model, cfg.tracker.clone());
    let (boxes, scores) = track_sequence(&mut tracker, seq.as_ref())?;
    staged(&a.out, |dir| {
        write_results(dir, "", &boxes, &scores)?;
        Ok(())
    })?;
    println!("tracked {} frames of {}", boxes.len(), seq.name());
    Ok(())
}

fn open_dataset(dir: &Path) -> CliResult<Vec<DiskSequence>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("groundtruth.txt").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Runtime(format!("no sequences under {}", dir.display())));
    }
    dirs.iter().map(|d| Ok(DiskSequence::open(d)?)).collect()
}

fn write_eval(dir: &Path, report: &EvalReport) -> CliResult<()> {
    report.write(dir)?;
    let results = dir.join("results");
    for s in &report.sequences {
        write_results(&results, &s.name, &s.boxes, &s.scores)?;
    }
    Ok(())
}

fn evaluate_synthetic(model: &Model, cfg: &RunConfig) -> CliResult<EvalReport> {
    let sequences = generate_set(&cfg.data.eval_synth(), cfg.data.eval_seed, cfg.data.eval_sequences)?;
    Ok(run_one_pass_eval(|| Tracker::new(model, cfg.tracker.clone()), &sequences)?)
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let cfg = optional_config(a.config.as_ref())?;
    cfg.validate()?;
    let model = load_model(&a.checkpoint)?;
    let report = match &a.dataset {
        Some(dir) => {
            let sequences = open_dataset(dir)?;
            run_one_pass_eval(|| Tracker::new(&model, cfg.tracker.clone()), &sequences)?
        }
        None => evaluate_synthetic(&model, &cfg)?,
    };
    staged(&a.out, |dir| write_eval(dir, &report))?;
    print!("{}", report.to_table());
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
struct Summary {
    auc: f64,
    precision: f64,
    norm_precision: f64,
    ao: f64,
    sr_050: f64,
}

impl Summary {
    fn accumulate(&mut self, r: &EvalReport, w: f64) {
        self.auc += r.auc * w;
        self.precision += r.precision * w;
        self.norm_precision += r.norm_precision * w;
        self.ao += r.ao * w;
        self.sr_050 += r.sr_050 * w;
    }
}

pub fn ablate(a: &AblateArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    let axis = match (&a.axis, cfg.ablation.axis) {
        (Some(s), _) => AblationAxis::parse(s)?,
        (None, Some(axis)) => axis,
        (None, None) => return Err(CliError::Config("no ablation axis given".into())),
    };
    let runs = variants(&cfg, axis)?;
    let train_set = generate_set(&cfg.data.synth(), cfg.data.seed, cfg.data.train_sequences)?;
    let eval_set = generate_set(&cfg.data.eval_synth(), cfg.data.eval_seed, cfg.data.eval_sequences)?;
    let seeds = cfg.ablation.seeds.clone();
    let mut table = String::new();
    staged(&a.out, |dir| {
        let mut rows = Vec::new();
        for v in &runs {
            let mut summary = Summary::default();
            for &seed in &seeds {
                let mut run = v.config.clone();
                run.train.seed = seed;
                let run_dir = dir.join(&v.label).join(format!("seed_{seed}"));
                fs::create_dir_all(&run_dir)?;
                fs::write(run_dir.join("config.resolved.toml"), run.to_toml()?)?;
                eprintln!("training {} with seed {seed}", v.label);
                let mut model = Model::new(run.model(), seed)?;
                fit(&mut model, &train_set, &run.sample(), &run.train, Some(&run_dir))?;
                let report = run_one_pass_eval(|| Tracker::new(&model, run.tracker.clone()), &eval_set)?;
                write_eval(&run_dir, &report)?;
                summary.accumulate(&report, 1.0 / seeds.len() as f64);
            }
            rows.push((v.label.clone(), v.baseline, summary));
        }
        let base = rows.iter().find(|r| r.1).map(|r| r.2).unwrap_or_default();
        let _ = writeln!(
            table,
            "{:<18} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "variant", "AUC", "P_norm", "P", "AO", "SR0.5", "dAUC", "dAO"
        );
        let mut csv = String::from("variant,baseline,auc,norm_precision,precision,ao,sr_050,delta_auc,delta_ao\n");
        for (label, is_base, s) in &rows {
            let name = if *is_base { format!("{label}*") } else { label.clone() };
            let _ = writeln!(
                table,
                "{:<18} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>+7.2} {:>+7.2}",
                name,
                100.0 * s.auc,
                100.0 * s.norm_precision,
                100.0 * s.precision,
                100.0 * s.ao,
                100.0 * s.sr_050,
                100.0 * (s.auc - base.auc),
                100.0 * (s.ao - base.ao)
            );
            let _ = writeln!(
                csv,
                "{label},{is_base},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                s.auc,
                s.norm_precision,
                s.precision,
                s.ao,
                s.sr_050,
                s.auc - base.auc,
                s.ao - base.ao
            );
        }
        let _ = writeln!(table, "* baseline; seeds {seeds:?}; {} eval sequences", eval_set.len());
        fs::write(dir.join("ablation.txt"), &table)?;
        fs::write(dir.join("ablation.csv"), csv)?;
        Ok(())
    })?;
    print!("{table}");
    Ok(())
}

fn read_scores(path: &Path) -> CliResult<Vec<f64>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<f64>()
                .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
        })
        .collect()
}

pub fn render(a: &RenderArgs) -> CliResult<()> {
    let seq = DiskSequence::open(&a.sequence)?;
    let boxes = read_boxes(&a.results)?;
    if boxes.len() != seq.len() {
        return Err(CliError::Runtime(format!(
            "{} result lines for {} frames",
            boxes.len(),
            seq.len()
        )));
    }
    let score_path = a
        .scores
        .clone()
        .or_else(|| a.results.parent().map(|p| p.join("scores.txt")).filter(|p| p.is_file()));
    let scores = match &score_path {
        Some(p) => Some(read_scores(p)?),
        None => None,
    };
    staged(&a.out, |dir| {
        let frames = dir.join("frames");
        fs::create_dir_all(&frames)?;
        for (t, b) in boxes.iter().enumerate() {
            let mut img = seq.frame(t)?;
            if !a.no_gt {
                img.draw_rect(&seq.gt(t), GT_COLOR, 1);
            }
            img.draw_rect(b, PRED_COLOR, 1);
            img.save_png(&frames.join(format!("{t:05}.png")))?;
        }
        let ious: Vec<f64> = boxes.iter().enumerate().map(|(t, b)| iou(b, &seq.gt(t))).collect();
        let curve = success_curve(&ious);
        let mut csv = String::new();
        for (x, y) in &curve {
            let _ = writeln!(csv, "{x:.2},{y:.6}");
        }
        fs::write(dir.join("success_curve.csv"), csv)?;
        line_chart(&curve, (0.0, 1.0), 320, 240).save_png(&dir.join("success_curve.png"))?;
        if let Some(scores) = &scores {
            let pts: Vec<(f64, f64)> = scores.iter().enumerate().map(|(t, &s)| (t as f64, s)).collect();
            let end = (scores.len().max(2) - 1) as f64;
            line_chart(&pts, (0.0, end), 480, 240).save_png(&dir.join("score_trace.png"))?;
        }
        Ok(())
    })?;
    println!("rendered {} frames", boxes.len());
    Ok(())
}

pub fn generate(a: &GenerateArgs) -> CliResult<()> {
    let cfg = optional_config(a.config.as_ref())?;
    cfg.data.synth().validate()?;
    let sequences = generate_set(&cfg.data.synth(), a.seed, a.count)?;
    staged(&a.out, |dir| {
        for s in &sequences {
            s.dump(&dir.join(&s.name))?;
        }
        Ok(())
    })?;
    for s in &sequences {
        println!("{}", a.out.join(&s.name).display());
    }
    Ok(())
}
