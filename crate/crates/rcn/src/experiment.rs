//! Split-level detection and tracking runs, their CSV files, and the ablation study.

use std::io::{Read, Write};

use crate::autodiff::ParamSet;
use crate::cells::CellKind;
use crate::data::{ObjectClass, SequenceSample, Track};
use crate::error::{Error, Result};
use crate::eval::{
    fppi_mr_curve, log_average_mr, mean_success, ope_success, report_mr, success_thresholds, CurvePoint, Detection,
    DetectionRecord, Trajectory,
};
use crate::localizer::BoundingBox;
use crate::model::{ablation_variant, ModelConfig, RcnModel, Variant};
use crate::synth::{bg_subtract_proposals, ProposalParams};
use crate::tensor::Tensor;
use crate::trainer::{build_stage2_samples, loss_ends, train_stage1, train_stage2_on, TrainConfig, TrainingSample};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Frame whose proposals are scored.
    pub t0: usize,
    pub iou: f64,
    pub min_height: f64,
    pub min_track_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { t0: 3, iou: 0.5, min_height: 0.0, min_track_len: 10 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetRow {
    pub sequence: String,
    pub frame: usize,
    pub bbox: BoundingBox,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackRow {
    pub sequence: String,
    pub track: u32,
    pub frame: usize,
    pub bbox: BoundingBox,
}

fn tensors(seq: &SequenceSample) -> Vec<Tensor> {
    seq.frames.iter().map(|f| f.to_tensor()).collect()
}

/// Scores every background-subtraction proposal of frame `t0` in each sequence.
pub fn detect_split(model: &RcnModel, params: &ParamSet, seqs: &[SequenceSample], t0: usize, proposals: &ProposalParams) -> Result<Vec<DetRow>> {
    let mut rows = Vec::new();
    for seq in seqs {
        if t0 >= seq.frames.len() {
            return Err(Error::Config(format!("eval.t0 = {t0} is past the end of {} ({} frames)", seq.id, seq.frames.len())));
        }
        let frames = tensors(seq);
        let end = (t0 + model.config.steps()).min(frames.len());
        let props = bg_subtract_proposals(&seq.frames, t0, proposals)?;
        for (bbox, confidence) in model.detect(params, &frames[t0..end], &props)? {
            rows.push(DetRow { sequence: seq.id.clone(), frame: t0, bbox, confidence });
        }
    }
    Ok(rows)
}

/// Ground truth of each sequence, keyed by sequence id.
pub type SplitGt = [(String, Vec<Track>)];

pub fn split_gt(seqs: &[SequenceSample]) -> Vec<(String, Vec<Track>)> {
    seqs.iter().map(|s| (s.id.clone(), s.tracks.clone())).collect()
}

fn is_target(t: &&Track) -> bool {
    t.class == ObjectClass::Target
}

/// One record per sequence at frame `t0`; targets are ground truth, distractors are not.
pub fn detection_records(rows: &[DetRow], gt: &SplitGt, t0: usize, min_height: f64) -> Vec<DetectionRecord> {
    gt.iter()
        .map(|(id, tracks)| {
            let gts = tracks.iter().filter(is_target).filter_map(|t| t.box_at(t0).copied()).collect();
            let dets = rows
                .iter()
                .filter(|r| &r.sequence == id && r.frame == t0)
                .map(|r| Detection { bbox: r.bbox, confidence: r.confidence })
                .collect();
            DetectionRecord { gts, ignore: Vec::new(), dets }.with_min_height(min_height)
        })
        .collect()
}

/// Detection curve and its log-average miss rate.
pub fn evaluate_detections(rows: &[DetRow], gt: &SplitGt, eval: &EvalConfig) -> (Vec<CurvePoint>, f64) {
    let records = detection_records(rows, gt, eval.t0, eval.min_height);
    let curve = fppi_mr_curve(&records, eval.iou);
    let mr = report_mr(log_average_mr(&curve));
    (curve, mr)
}

fn gt_trajectory(boxes: &[(usize, BoundingBox)]) -> Result<Trajectory> {
    Trajectory::new(boxes[0].0, boxes.iter().map(|b| b.1).collect())
}

/// One-pass tracking of every target track of at least `min_track_len` frames,
/// initialised from its first ground-truth box.
pub fn track_split(model: &RcnModel, params: &ParamSet, seqs: &[SequenceSample], min_track_len: usize) -> Result<Vec<TrackRow>> {
    let mut rows = Vec::new();
    for seq in seqs {
        let frames = tensors(seq);
        for track in seq.tracks.iter().filter(is_target).filter(|t| t.boxes.len() >= min_track_len.max(1)) {
            let (start, init) = track.boxes[0];
            let traj = model.track(params, &frames[start..], &init)?;
            rows.extend(traj.into_iter().enumerate().map(|(k, bbox)| TrackRow {
                sequence: seq.id.clone(),
                track: track.id,
                frame: start + k,
                bbox,
            }));
        }
    }
    Ok(rows)
}

/// Mean success curve over the evaluated tracks.
pub fn evaluate_tracks(rows: &[TrackRow], gt: &SplitGt, min_track_len: usize) -> Result<Vec<f64>> {
    let thresholds = success_thresholds();
    let mut curves = Vec::new();
    for (id, tracks) in gt {
        for track in tracks.iter().filter(is_target).filter(|t| t.boxes.len() >= min_track_len.max(1)) {
            let mut pred: Vec<&TrackRow> = rows.iter().filter(|r| &r.sequence == id && r.track == track.id).collect();
            if pred.is_empty() {
                curves.push(vec![0.0; thresholds.len()]);
                continue;
            }
            pred.sort_by_key(|r| r.frame);
            if pred.windows(2).any(|w| w[1].frame != w[0].frame + 1) {
                return Err(Error::Format(format!("track {} of {id} skips frames", track.id)));
            }
            let p = Trajectory::new(pred[0].frame, pred.iter().map(|r| r.bbox).collect())?;
            curves.push(ope_success(&p, &gt_trajectory(&track.boxes)?, &thresholds));
        }
    }
    Ok(mean_success(&curves, thresholds.len()))
}

fn writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out)
}

fn parse<T: std::str::FromStr>(field: Option<&str>, what: &str, line: u64) -> Result<T> {
    field
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::Format(format!("line {line}: bad or missing {what}")))
}

fn parse_box(rec: &csv::StringRecord, first: usize, line: u64) -> Result<BoundingBox> {
    BoundingBox::new(
        parse(rec.get(first), "x", line)?,
        parse(rec.get(first + 1), "y", line)?,
        parse(rec.get(first + 2), "w", line)?,
        parse(rec.get(first + 3), "h", line)?,
    )
}

fn records<R: Read>(input: R, header: &[&str]) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let got: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if got != header {
        return Err(Error::Format(format!("expected header {}, found {}", header.join(","), got.join(","))));
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| Ok((i as u64 + 2, rec?)))
        .collect()
}

const DET_HEADER: [&str; 7] = ["sequence", "frame", "x", "y", "w", "h", "confidence"];
const TRACK_HEADER: [&str; 7] = ["sequence", "track", "frame", "x", "y", "w", "h"];

pub fn write_detections(out: impl Write, rows: &[DetRow]) -> Result<()> {
    let mut w = writer(out);
    w.write_record(DET_HEADER)?;
    for r in rows {
        let b = r.bbox;
        w.write_record([r.sequence.clone(), r.frame.to_string(), b.x.to_string(), b.y.to_string(), b.w.to_string(), b.h.to_string(), r.confidence.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_detections(input: impl Read) -> Result<Vec<DetRow>> {
    records(input, &DET_HEADER)?
        .into_iter()
        .map(|(line, rec)| {
            let confidence: f64 = parse(rec.get(6), "confidence", line)?;
            if !confidence.is_finite() {
                return Err(Error::Format(format!("line {line}: confidence must be finite")));
            }
            Ok(DetRow {
                sequence: rec[0].trim().to_string(),
                frame: parse(rec.get(1), "frame", line)?,
                bbox: parse_box(&rec, 2, line)?,
                confidence,
            })
        })
        .collect()
}

pub fn write_tracks(out: impl Write, rows: &[TrackRow]) -> Result<()> {
    let mut w = writer(out);
    w.write_record(TRACK_HEADER)?;
    for r in rows {
        let b = r.bbox;
        w.write_record([r.sequence.clone(), r.track.to_string(), r.frame.to_string(), b.x.to_string(), b.y.to_string(), b.w.to_string(), b.h.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tracks(input: impl Read) -> Result<Vec<TrackRow>> {
    records(input, &TRACK_HEADER)?
        .into_iter()
        .map(|(line, rec)| {
            Ok(TrackRow {
                sequence: rec[0].trim().to_string(),
                track: parse(rec.get(1), "track", line)?,
                frame: parse(rec.get(2), "frame", line)?,
                bbox: parse_box(&rec, 3, line)?,
            })
        })
        .collect()
}

/// Model configuration for an ablation tag: one of the four variants, or a full model
/// with a different cell (`gru`) or cell kernel (`k1`, `k5`, ...).
pub fn ablation_model(base: &ModelConfig, tag: &str) -> Result<ModelConfig> {
    let full = ModelConfig { variant: Variant::Full, ..base.clone() };
    if tag == "gru" || tag == "lstm" {
        return Ok(ModelConfig { cell: CellKind::parse(tag)?, hc_hadamard: false, ..full });
    }
    if let Some(k) = tag.strip_prefix('k').and_then(|k| k.parse::<usize>().ok()) {
        if k % 2 == 0 {
            return Err(Error::Config(format!("ablate.variants: kernel in {tag:?} must be odd")));
        }
        return Ok(ModelConfig { cell_kernel: k, ..full });
    }
    Ok(ModelConfig { variant: ablation_variant(tag)?, ..base.clone() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub eval: EvalConfig,
    pub proposals: ProposalParams,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            variants: Variant::ALL.iter().map(|v| v.as_str().to_string()).collect(),
            seeds: vec![0, 1, 2],
            stage1: TrainConfig { iterations: 1500, decay_period: 1000, ..TrainConfig::default() },
            stage2: TrainConfig { iterations: 1500, decay_period: 1000, ..TrainConfig::default() },
            eval: EvalConfig::default(),
            proposals: ProposalParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub log_avg_mr: f64,
    /// Mean stage-2 loss over the first and last tenth of the iterations.
    pub loss_first: f64,
    pub loss_last: f64,
}

pub fn write_ablation(out: impl Write, rows: &[AblationRow]) -> Result<()> {
    let mut w = writer(out);
    w.write_record(["variant", "seed", "log_avg_mr"])?;
    for r in rows {
        w.write_record([r.variant.clone(), r.seed.to_string(), r.log_avg_mr.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Replaces every window with the proposal-centred first one.
fn fixed_windows(samples: &[TrainingSample]) -> Vec<TrainingSample> {
    samples
        .iter()
        .map(|s| TrainingSample { windows: vec![s.windows[0]; s.windows.len()], lost: false, ..s.clone() })
        .collect()
}

/// Architectures that share stage-1 weights (same cell and kernel) share the stage-1
/// run and the teacher trajectories; each variant then gets its own stage 2.
pub fn run_ablation(
    base: &ModelConfig,
    cfg: &AblationConfig,
    train: &[SequenceSample],
    test: &[SequenceSample],
    mut progress: impl FnMut(&str),
) -> Result<Vec<AblationRow>> {
    let configs = cfg.variants.iter().map(|t| ablation_model(base, t).map(|m| (t.clone(), m))).collect::<Result<Vec<_>>>()?;
    let test_gt = split_gt(test);
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let mut cache: Vec<(ModelConfig, ParamSet, Vec<TrainingSample>)> = Vec::new();
        for (tag, mc) in &configs {
            let arch = ModelConfig { variant: Variant::Full, ..mc.clone() };
            let slot = match cache.iter().position(|c| c.0 == arch) {
                Some(i) => i,
                None => {
                    let full = RcnModel::new(arch.clone())?;
                    let s1 = train_stage1(&full, train, &TrainConfig { seed, ..cfg.stage1.clone() })?;
                    progress(&format!("seed {seed}: stage 1 for {tag} done"));
                    let samples = build_stage2_samples(&full, &s1.params, train, &cfg.proposals)?;
                    cache.push((arch, s1.params, samples));
                    cache.len() - 1
                }
            };
            let (_, stage1, samples) = &cache[slot];
            let model = RcnModel::new(mc.clone())?;
            let samples = if mc.variant.tracks() { samples.clone() } else { fixed_windows(samples) };
            let s2 = train_stage2_on(&model, stage1, train, &TrainConfig { seed, ..cfg.stage2.clone() }, &samples)?;
            let dets = detect_split(&model, &s2.params, test, cfg.eval.t0, &cfg.proposals)?;
            let (_, mr) = evaluate_detections(&dets, &test_gt, &cfg.eval);
            let (first, last) = loss_ends(&s2.log, 0.1);
            progress(&format!("seed {seed}: {tag} stage-2 loss {first:.4} -> {last:.4}, log_avg_mr={mr}"));
            rows.push(AblationRow { variant: tag.clone(), seed, log_avg_mr: mr, loss_first: first, loss_last: last });
        }
    }
    Ok(rows)
}
