//! Two-stage training. Stage 1 fits the backbone, cell and scorer as a single-frame
//! classifier; stage 2 freezes the backbone and trains the recurrent cell and scorer on
//! snippets whose windows follow trajectories from a correlation-only tracker (teacher
//! forcing).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Binder, ParamGrads, ParamSet, Tape};
use crate::data::{ObjectClass, SequenceSample};
use crate::error::{Error, Result};
use crate::localizer::{crop_resample_gray, make_search_window, BoundingBox, SearchWindowSpec};
use crate::model::{RcnModel, Variant, BACKBONE_PREFIX};
use crate::synth::{bg_subtract_proposals, ProposalParams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_period: usize,
    pub iterations: usize,
    pub batch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.01,
            decay_factor: 0.1,
            decay_period: 1000,
            iterations: 4000,
            batch: 5,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr0)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("train.decay_factor must lie in (0, 1], got {}", self.decay_factor)));
        }
        if self.decay_period == 0 {
            return Err(Error::Config("train.decay_period must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("train.momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("train.weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Step-decayed learning rate.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay_factor.powi((iter / cfg.decay_period) as i32)
}

pub type Velocity = BTreeMap<String, Tensor>;

/// `v <- momentum * v + g; p <- p - lr * v` for every trainable parameter. The step is
/// refused, leaving everything untouched, if any gradient is not finite.
pub fn sgd_step(params: &mut ParamSet, velocity: &mut Velocity, grads: &ParamGrads, lr: f64, momentum: f64) -> Result<()> {
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient for {name}")));
    }
    for (name, p) in params.iter_mut() {
        if p.frozen {
            continue;
        }
        let Some(g) = grads.get(name) else { continue };
        let v = velocity.entry(name.to_string()).or_insert_with(|| Tensor::zeros(g.dims()));
        for ((vi, &gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.value.data_mut()) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogEntry {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

/// `iter<TAB>lr<TAB>loss` lines.
pub fn format_log(entries: &[LogEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        writeln!(s, "{}\t{}\t{}", e.iter, e.lr, e.loss).expect("string write");
    }
    s
}

/// Mean loss over the first and last `fraction` of the log.
pub fn loss_ends(log: &[LogEntry], fraction: f64) -> (f64, f64) {
    let n = ((log.len() as f64 * fraction).ceil() as usize).clamp(1, log.len().max(1));
    let mean = |s: &[LogEntry]| s.iter().map(|e| e.loss).sum::<f64>() / s.len().max(1) as f64;
    (mean(&log[..n.min(log.len())]), mean(&log[log.len().saturating_sub(n)..]))
}

pub struct TrainOutcome {
    pub params: ParamSet,
    pub log: Vec<LogEntry>,
}

/// One candidate snippet for stage 2: the proposal at `t0` and the search windows of
/// frames `t0..=t0+L` along the precomputed trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub seq: usize,
    pub t0: usize,
    pub proposal: BoundingBox,
    pub windows: Vec<SearchWindowSpec>,
    pub label: f64,
    pub lost: bool,
}

/// Trajectory of the correlation-only tracker (backbone, template encoder, localizer)
/// for `frames[0..]`, starting at `proposal`.
pub fn precompute_trajectories(model: &RcnModel, params: &ParamSet, frames: &[Tensor], proposal: &BoundingBox) -> Result<(Vec<BoundingBox>, bool)> {
    let tracker = model.with_variant(Variant::NoRecurrence)?;
    let run = tracker.forward_candidate(params, frames, proposal)?;
    let lost = run.lost;
    let mut traj = run.trajectory;
    let last = *traj.last().unwrap_or(proposal);
    traj.resize(frames.len(), last);
    Ok((traj, lost))
}

/// Windows the model would open along `trajectory`: the first around the proposal, each
/// later one around the previous step's box.
pub fn windows_along(model: &RcnModel, trajectory: &[BoundingBox], frame: (usize, usize)) -> Result<Vec<SearchWindowSpec>> {
    let cfg = &model.config;
    let anchor = |s: usize| if cfg.variant.tracks() && s > 0 { trajectory[s - 1] } else { trajectory[0] };
    (0..trajectory.len()).map(|s| make_search_window(&anchor(s), cfg.alpha, frame)).collect()
}

/// Stage-2 samples from background-subtraction proposals at every valid `t0` of every
/// sequence. A proposal is positive when it overlaps a target with IoU of at least 0.5.
pub fn build_stage2_samples(
    model: &RcnModel,
    stage1: &ParamSet,
    seqs: &[SequenceSample],
    proposals: &ProposalParams,
) -> Result<Vec<TrainingSample>> {
    let len = model.config.snippet_len;
    let tracker_len = len + 1;
    let mut out = Vec::new();
    for (si, seq) in seqs.iter().enumerate() {
        if seq.frames.len() < tracker_len {
            continue;
        }
        let dims = seq.frame_dims();
        let tensors: Vec<Tensor> = seq.frames.iter().map(|f| f.to_tensor()).collect();
        for t0 in 0..=seq.frames.len() - tracker_len {
            let gts = seq.boxes_at(t0);
            for p in bg_subtract_proposals(&seq.frames, t0, proposals)? {
                let positive = gts.iter().any(|(c, g)| *c == ObjectClass::Target && p.iou(g) >= 0.5);
                let (traj, lost) = if model.config.variant.tracks() {
                    precompute_trajectories(model, stage1, &tensors[t0..t0 + tracker_len], &p)?
                } else {
                    (vec![p; tracker_len], false)
                };
                out.push(TrainingSample {
                    seq: si,
                    t0,
                    proposal: p,
                    windows: windows_along(model, &traj, dims)?,
                    label: if positive { 1.0 } else { 0.0 },
                    lost,
                });
            }
        }
    }
    Ok(out)
}

/// Picks `ceil(b/2)` positives and the rest negatives, uniformly with replacement.
fn balanced_batch(rng: &mut ChaCha8Rng, pos: usize, neg: usize, batch: usize) -> Vec<(bool, usize)> {
    let n_pos = batch.div_ceil(2);
    let mut out: Vec<(bool, usize)> = (0..n_pos).map(|_| (true, rng.random_range(0..pos))).collect();
    out.extend((n_pos..batch).map(|_| (false, rng.random_range(0..neg))));
    out
}

fn accumulate(total: &mut ParamGrads, g: ParamGrads) -> Result<()> {
    for (k, v) in g {
        match total.get_mut(&k) {
            Some(t) => t.add_assign(&v)?,
            None => {
                total.insert(k, v);
            }
        }
    }
    Ok(())
}

/// Shared optimisation loop; `sample_loss` returns a sample's loss and gradients.
fn optimise<F>(params: &mut ParamSet, cfg: &TrainConfig, mut draw: impl FnMut(&mut ChaCha8Rng) -> Vec<(bool, usize)>, mut sample_loss: F) -> Result<Vec<LogEntry>>
where
    F: FnMut(&ParamSet, bool, usize) -> Result<(f64, ParamGrads)>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    let mut velocity = Velocity::new();
    let mut log = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let batch = draw(&mut rng);
        let mut total = ParamGrads::new();
        let mut loss = 0.0;
        for &(positive, idx) in &batch {
            let (l, g) = sample_loss(params, positive, idx)?;
            if !l.is_finite() {
                return Err(Error::Numeric(format!("loss became {l} at iteration {iter}")));
            }
            loss += l;
            accumulate(&mut total, g)?;
        }
        let k = 1.0 / batch.len() as f64;
        for (name, g) in total.iter_mut() {
            *g = g.scale(k);
            if cfg.weight_decay > 0.0 {
                g.add_assign(&params.get(name)?.scale(cfg.weight_decay))?;
            }
        }
        let lr = lr_at(iter, cfg);
        sgd_step(params, &mut velocity, &total, lr, cfg.momentum)?;
        log.push(LogEntry { iter, lr, loss: loss * k });
    }
    Ok(log)
}

fn snippet_loss(model: &RcnModel, params: &ParamSet, template: Tensor, windows: Vec<Tensor>, label: f64, through_backbone: bool) -> Result<(f64, ParamGrads)> {
    let mut tape = Tape::new();
    let mut b = Binder::new(params);
    let mut feats = Vec::with_capacity(windows.len() + 1);
    for t in std::iter::once(template).chain(windows) {
        feats.push(if through_backbone {
            let x = tape.leaf(t);
            model.backbone(&mut tape, &mut b, x)?
        } else {
            tape.leaf(model.features(params, &t)?)
        });
    }
    let (tf, xs) = (feats[0], &feats[1..]);
    let loss = model.sequence_loss(&mut tape, &mut b, tf, xs, label)?;
    let g = tape.backward(loss)?;
    Ok((tape.value(loss).item(), b.param_grads(&tape, &g)))
}

/// Box of random size (drawn from the scene's boxes) that touches no object.
fn background_box(rng: &mut ChaCha8Rng, seq: &SequenceSample, t: usize) -> Option<BoundingBox> {
    let objects: Vec<BoundingBox> = seq.boxes_at(t).into_iter().map(|(_, b)| b).collect();
    let (fh, fw) = seq.frame_dims();
    let like = objects.get(rng.random_range(0..objects.len().max(1)))?;
    for _ in 0..50 {
        let x = rng.random_range(0.0..=(fw as f64 - like.w).max(0.0)).floor();
        let y = rng.random_range(0.0..=(fh as f64 - like.h).max(0.0)).floor();
        let b = BoundingBox { x, y, w: like.w, h: like.h };
        if objects.iter().all(|o| o.intersection(&b) == 0.0) {
            return Some(b);
        }
    }
    None
}

/// Stage 1: the single-frame network with a trainable backbone. Positives are target
/// boxes, negatives distractor boxes and object-free background boxes, at uniformly
/// drawn frames.
pub fn train_stage1(model: &RcnModel, seqs: &[SequenceSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let single = model.with_variant(Variant::SingleFrame)?;
    let mut params = single.init_params(cfg.seed)?;
    let mut pos: Vec<(usize, usize, BoundingBox)> = Vec::new();
    let mut neg: Vec<(usize, usize, BoundingBox)> = Vec::new();
    for (si, seq) in seqs.iter().enumerate() {
        for track in &seq.tracks {
            for &(t, b) in &track.boxes {
                match track.class {
                    ObjectClass::Target => pos.push((si, t, b)),
                    ObjectClass::Distractor => neg.push((si, t, b)),
                }
            }
        }
    }
    if pos.is_empty() {
        return Err(Error::Config("training data holds no target boxes".into()));
    }
    let mut bg_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6267);
    let (n_dis, mut n_bg) = (neg.len(), 0);
    for _ in 0..n_dis.max(pos.len() / 2) {
        let si = bg_rng.random_range(0..seqs.len());
        let t = bg_rng.random_range(0..seqs[si].frames.len());
        if let Some(b) = background_box(&mut bg_rng, &seqs[si], t) {
            neg.push((si, t, b));
            n_bg += 1;
        }
    }
    if neg.is_empty() {
        return Err(Error::Config(format!("training data holds no negatives ({n_dis} distractor, {n_bg} background)")));
    }
    let c = &single.config;
    let (np, nn) = (pos.len(), neg.len());
    let log = optimise(
        &mut params,
        cfg,
        |rng| balanced_batch(rng, np, nn, cfg.batch),
        |params, positive, idx| {
            let (si, t, b) = if positive { pos[idx] } else { neg[idx] };
            let frame = &seqs[si].frames[t];
            let (x, y, m) = b.footprint();
            let template = crop_resample_gray(frame, (x, y), m, c.template_res)?;
            let win = make_search_window(&b, c.alpha, frame.dims())?;
            let window = crop_resample_gray(frame, win.origin, win.side, c.window_res)?;
            snippet_loss(&single, params, template, vec![window], if positive { 1.0 } else { 0.0 }, true)
        },
    )?;
    Ok(TrainOutcome { params, log })
}

/// Stage 2: starts from the stage-1 parameters, freezes the backbone, and trains the
/// cell and scorer on teacher-forced snippets.
pub fn train_stage2(model: &RcnModel, stage1: &ParamSet, seqs: &[SequenceSample], cfg: &TrainConfig, proposals: &ProposalParams) -> Result<TrainOutcome> {
    cfg.validate()?;
    let samples = build_stage2_samples(model, stage1, seqs, proposals)?;
    train_stage2_on(model, stage1, seqs, cfg, &samples)
}

pub fn train_stage2_on(model: &RcnModel, stage1: &ParamSet, seqs: &[SequenceSample], cfg: &TrainConfig, samples: &[TrainingSample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut params = stage1.clone();
    params.freeze_prefix(BACKBONE_PREFIX);
    let pos: Vec<&TrainingSample> = samples.iter().filter(|s| s.label == 1.0).collect();
    let neg: Vec<&TrainingSample> = samples.iter().filter(|s| s.label == 0.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Config(format!(
            "stage 2 needs positive and negative proposals, found {} and {}",
            pos.len(),
            neg.len()
        )));
    }
    let c = &model.config;
    let (np, nn) = (pos.len(), neg.len());
    let log = optimise(
        &mut params,
        cfg,
        |rng| balanced_batch(rng, np, nn, cfg.batch),
        |params, positive, idx| {
            let s = if positive { pos[idx] } else { neg[idx] };
            let seq = &seqs[s.seq];
            let (x, y, m) = s.proposal.footprint();
            let template = crop_resample_gray(&seq.frames[s.t0], (x, y), m, c.template_res)?;
            let windows = s
                .windows
                .iter()
                .take(c.steps())
                .enumerate()
                .map(|(k, w)| crop_resample_gray(&seq.frames[s.t0 + k], w.origin, w.side, c.window_res))
                .collect::<Result<Vec<_>>>()?;
            snippet_loss(model, params, template, windows, s.label, false)
        },
    )?;
    Ok(TrainOutcome { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{generate_sequence, SceneConfig};

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig { decay_period: 10_000, ..TrainConfig::default() };
        assert_eq!(lr_at(0, &cfg), 0.01);
        assert_eq!(lr_at(9_999, &cfg), 0.01);
        assert!((lr_at(10_000, &cfg) - 0.001).abs() < 1e-18);
        assert!((0..50_000).step_by(777).collect::<Vec<_>>().windows(2).all(|w| lr_at(w[1], &cfg) <= lr_at(w[0], &cfg)));
    }

    fn one_param(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("p", Tensor::scalar(v)).unwrap();
        p
    }

    fn grad(v: f64) -> ParamGrads {
        BTreeMap::from([("p".to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn sgd_updates() {
        let mut p = one_param(1.0);
        sgd_step(&mut p, &mut Velocity::new(), &grad(2.0), 0.1, 0.0).unwrap();
        assert!((p.get("p").unwrap().item() - 0.8).abs() < 1e-15);

        let (p0, g, lr) = (0.5, 0.3, 0.2);
        let mut p = one_param(p0);
        let mut v = Velocity::new();
        for _ in 0..2 {
            sgd_step(&mut p, &mut v, &grad(g), lr, 0.9).unwrap();
        }
        assert!((p.get("p").unwrap().item() - (p0 - lr * g * (1.0 + 1.9))).abs() < 1e-15);

        let mut p = one_param(1.0);
        p.set_frozen("p", true).unwrap();
        sgd_step(&mut p, &mut Velocity::new(), &grad(5.0), 0.1, 0.9).unwrap();
        assert_eq!(p.get("p").unwrap().item(), 1.0);

        let mut p = one_param(1.0);
        assert!(matches!(sgd_step(&mut p, &mut Velocity::new(), &grad(f64::NAN), 0.1, 0.0), Err(Error::Numeric(_))));
        assert_eq!(p.get("p").unwrap().item(), 1.0);
    }

    #[test]
    fn batches_are_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for b in 1..8 {
            let batch = balanced_batch(&mut rng, 3, 4, b);
            let p = batch.iter().filter(|x| x.0).count();
            assert_eq!(p, b.div_ceil(2));
            assert!(p - (b - p) <= 1);
        }
    }

    #[test]
    fn log_format() {
        let log = [LogEntry { iter: 0, lr: 0.01, loss: 0.5 }, LogEntry { iter: 1, lr: 0.01, loss: 0.25 }];
        assert_eq!(format_log(&log), "0\t0.01\t0.5\n1\t0.01\t0.25\n");
        assert_eq!(loss_ends(&log, 0.1), (0.5, 0.25));
    }

    fn tiny_data(n: u64) -> Vec<SequenceSample> {
        (0..n).map(|i| generate_sequence(&SceneConfig::default(), 100 + i).unwrap()).collect()
    }

    #[test]
    fn stage2_freezes_backbone_and_is_deterministic() {
        let seqs = tiny_data(3);
        let model = RcnModel::new(ModelConfig::tiny()).unwrap();
        let cfg = TrainConfig { iterations: 6, batch: 3, ..TrainConfig::default() };
        let s1 = train_stage1(&model, &seqs, &cfg).unwrap();
        let s2 = train_stage2(&model, &s1.params, &seqs, &cfg, &ProposalParams::default()).unwrap();
        for (name, p) in s2.params.iter() {
            let before = s1.params.get(name).unwrap();
            if name.starts_with(BACKBONE_PREFIX) {
                assert!(p.frozen);
                assert!(p.value.data().iter().zip(before.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
        assert!(s2.params.iter().any(|(n, p)| !n.starts_with(BACKBONE_PREFIX) && p.value != *s1.params.get(n).unwrap()));
        let again = train_stage2(&model, &s1.params, &seqs, &cfg, &ProposalParams::default()).unwrap();
        assert_eq!(format_log(&again.log), format_log(&s2.log));
        assert!(again.params.iter().all(|(n, p)| p.value == *s2.params.get(n).unwrap()));
    }

    #[test]
    fn samples_have_full_windows_and_both_labels() {
        let seqs = tiny_data(2);
        let model = RcnModel::new(ModelConfig::tiny()).unwrap();
        let params = model.init_params(1).unwrap();
        let samples = build_stage2_samples(&model, &params, &seqs, &ProposalParams::default()).unwrap();
        assert!(samples.iter().all(|s| s.windows.len() == model.config.snippet_len + 1));
        assert!(samples.iter().any(|s| s.label == 1.0) && samples.iter().any(|s| s.label == 0.0));
        let fixed = build_stage2_samples(&model.with_variant(Variant::NoTracking).unwrap(), &params, &seqs, &ProposalParams::default()).unwrap();
        assert!(fixed.iter().all(|s| s.windows.iter().all(|w| *w == s.windows[0])));
    }

    #[test]
    fn trajectories_start_at_the_proposal_and_span_every_frame() {
        let seq = generate_sequence(&SceneConfig::default(), 4).unwrap();
        let model = RcnModel::new(ModelConfig::tiny()).unwrap();
        let params = model.init_params(2).unwrap();
        let frames: Vec<Tensor> = seq.frames[..6].iter().map(|f| f.to_tensor()).collect();
        let start = seq.tracks[0].boxes[0].1;
        let (traj, _) = precompute_trajectories(&model, &params, &frames, &start).unwrap();
        assert_eq!(traj.len(), 6);
        assert_eq!(traj[0], start);
        assert_eq!(precompute_trajectories(&model, &params, &frames, &start).unwrap().0, traj);
        let windows = windows_along(&model, &traj, seq.frame_dims()).unwrap();
        assert_eq!(windows[0], windows[1]);
    }
}
