//! The joint detector-tracker: convolutional features, a convolutional recurrent cell,
//! correlation tracking of the candidate, and a scorer over template and window features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, Binder, GradCheckReport, ParamSet, Tape, Var};
use crate::cells::{uniform, CellKind, CellStack, CellState};
use crate::error::{Error, Result};
use crate::localizer::{
    localize, make_search_window, peak_to_frame, pixel_stride, template_crop, window_crop, BoundingBox,
};
use crate::tensor::{out_extent, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nonlinearity {
    Relu,
    Tanh,
}

impl Nonlinearity {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Nonlinearity::Relu),
            "tanh" => Ok(Nonlinearity::Tanh),
            other => Err(Error::Config(format!("model.nonlinearity: unknown value {other:?} (relu|tanh)"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Nonlinearity::Relu => "relu",
            Nonlinearity::Tanh => "tanh",
        }
    }
}

/// Stack of `conv(k, stride 1, same padding) -> nonlinearity -> max-pool(pool)` layers.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub channels: Vec<usize>,
    pub kernel: usize,
    /// Pooling window and stride after every layer; 1 disables pooling.
    pub pool: usize,
    pub nonlinearity: Nonlinearity,
}

impl BackboneConfig {
    pub fn out_channels(&self) -> usize {
        self.channels.last().copied().unwrap_or(1)
    }

    pub fn cumulative_stride(&self) -> usize {
        self.pool.pow(self.channels.len() as u32)
    }

    /// Spatial extent of the features for a square input of side `res`.
    pub fn feature_extent(&self, res: usize) -> Option<usize> {
        let mut n = res;
        for _ in &self.channels {
            if self.pool > 1 {
                n = out_extent(n, self.pool, self.pool, 0)?;
            }
        }
        Some(n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Features, recurrence, correlation tracking and scoring.
    Full,
    /// Window held at the proposal for every step.
    NoTracking,
    /// Recurrence replaced by the per-frame template encoder; scores averaged.
    NoRecurrence,
    /// Only the proposal frame.
    SingleFrame,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoTracking, Variant::NoRecurrence, Variant::SingleFrame];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTracking => "no_tracking",
            Variant::NoRecurrence => "no_recurrence",
            Variant::SingleFrame => "single_frame",
        }
    }

    pub fn tracks(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoRecurrence)
    }

    pub fn recurrent(&self) -> bool {
        !matches!(self, Variant::NoRecurrence)
    }
}

/// Parses an ablation tag.
pub fn ablation_variant(tag: &str) -> Result<Variant> {
    Variant::ALL
        .into_iter()
        .find(|v| v.as_str() == tag)
        .ok_or_else(|| Error::Config(format!("model.variant: unknown tag {tag:?} (full|no_tracking|no_recurrence|single_frame)")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub cell: CellKind,
    pub cell_kernel: usize,
    pub hidden_channels: usize,
    pub depth: usize,
    pub hc_hadamard: bool,
    pub alpha: f64,
    /// Steps after the proposal frame.
    pub snippet_len: usize,
    pub template_res: usize,
    pub window_res: usize,
    pub scorer_hidden: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig { channels: vec![8, 16, 32], kernel: 3, pool: 2, nonlinearity: Nonlinearity::Relu },
            cell: CellKind::Lstm,
            cell_kernel: 3,
            hidden_channels: 32,
            depth: 1,
            hc_hadamard: false,
            alpha: 1.0,
            snippet_len: 5,
            template_res: 32,
            window_res: 96,
            scorer_hidden: 128,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    /// Two-layer backbone used for quick experiments and the ablation.
    pub fn tiny() -> Self {
        ModelConfig {
            backbone: BackboneConfig { channels: vec![4, 8], kernel: 3, pool: 2, nonlinearity: Nonlinearity::Relu },
            hidden_channels: 8,
            template_res: 16,
            window_res: 48,
            scorer_hidden: 64,
            ..ModelConfig::default()
        }
    }

    /// Smallest configuration exercising every parameter: 8x8 windows, one
    /// two-channel tanh layer, two recurrent steps.
    pub fn micro() -> Self {
        ModelConfig {
            backbone: BackboneConfig { channels: vec![2], kernel: 3, pool: 1, nonlinearity: Nonlinearity::Tanh },
            hidden_channels: 2,
            alpha: 0.5,
            snippet_len: 2,
            template_res: 4,
            window_res: 8,
            scorer_hidden: 4,
            ..ModelConfig::default()
        }
    }

    /// Steps actually run per candidate, counting the proposal frame.
    pub fn steps(&self) -> usize {
        match self.variant {
            Variant::SingleFrame => 1,
            _ => self.snippet_len + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        let b = &self.backbone;
        if b.channels.is_empty() || b.channels.contains(&0) {
            return err("model.backbone must list positive channel counts".into());
        }
        if b.kernel % 2 == 0 || self.cell_kernel % 2 == 0 {
            return err("model.backbone_kernel and model.k must be odd".into());
        }
        if b.pool == 0 {
            return err("model.pool must be at least 1".into());
        }
        let stride = b.cumulative_stride();
        if self.window_res % stride != 0 || self.template_res % stride != 0 {
            return err(format!(
                "model.window_res ({}) and model.template_res ({}) must be multiples of the backbone stride {stride}",
                self.window_res, self.template_res
            ));
        }
        if self.template_res == 0 || self.template_res > self.window_res {
            return err("model.template_res must be positive and at most model.window_res".into());
        }
        if !(self.alpha >= 0.0) {
            return err(format!("model.alpha must be non-negative, got {}", self.alpha));
        }
        // The template footprint and the window must share one pixel scale.
        let ratio = self.template_res as f64 * (1.0 + 2.0 * self.alpha);
        if (ratio - self.window_res as f64).abs() > 1e-9 {
            return err(format!(
                "model.window_res must equal model.template_res * (1 + 2 * model.alpha) = {ratio}, got {}",
                self.window_res
            ));
        }
        if self.hidden_channels == 0 || self.depth == 0 || self.scorer_hidden == 0 {
            return err("model.hidden_channels, model.depth and model.scorer_hidden must be positive".into());
        }
        Ok(())
    }

    pub fn template_extent(&self) -> usize {
        self.backbone.feature_extent(self.template_res).unwrap_or(0)
    }

    pub fn window_extent(&self) -> usize {
        self.backbone.feature_extent(self.window_res).unwrap_or(0)
    }

    pub fn scorer_inputs(&self) -> usize {
        let (t, w) = (self.template_extent(), self.window_extent());
        self.hidden_channels * (t * t + w * w)
    }
}

/// One candidate tracked from its proposal frame.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateRun {
    pub proposal: BoundingBox,
    pub trajectory: Vec<BoundingBox>,
    pub logits: Vec<f64>,
    /// Maximum of each step's correlation map.
    pub peak_values: Vec<f64>,
    pub confidence: f64,
    pub lost: bool,
}

#[derive(Clone, Debug)]
pub struct RcnModel {
    pub config: ModelConfig,
    pub cells: CellStack,
}

pub const BACKBONE_PREFIX: &str = "backbone.";

impl RcnModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut cells = CellStack::new(
            config.cell,
            config.backbone.out_channels(),
            config.hidden_channels,
            config.cell_kernel,
            config.depth,
        )?;
        if config.hc_hadamard {
            if config.cell != CellKind::Lstm {
                return Err(Error::Config("model.hc_hadamard applies to lstm cells only".into()));
            }
            // The literal reading ties w_hc to one feature-map size, the window's.
            let w = config.window_extent();
            for l in &mut cells.layers {
                l.hc_hadamard = Some((w, w));
            }
        }
        Ok(RcnModel { config, cells })
    }

    pub fn with_variant(&self, variant: Variant) -> Result<Self> {
        RcnModel::new(ModelConfig { variant, ..self.config.clone() })
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let b = &self.config.backbone;
        let mut cin = 1;
        for (i, &cout) in b.channels.iter().enumerate() {
            let fan_in = cin * b.kernel * b.kernel;
            let s = match b.nonlinearity {
                Nonlinearity::Relu => (6.0 / fan_in as f64).sqrt(),
                Nonlinearity::Tanh => 1.0 / (fan_in as f64).sqrt(),
            };
            p.insert(format!("backbone.conv{i}.w"), Tensor::from_fn(&[cout, cin, b.kernel, b.kernel], |_| rng.random_range(-s..=s)))?;
            p.insert(format!("backbone.conv{i}.b"), Tensor::zeros(&[cout]))?;
            cin = cout;
        }
        self.cells.init_params(&mut p, &mut rng)?;
        let (n_in, hid) = (self.config.scorer_inputs(), self.config.scorer_hidden);
        p.insert("scorer.fc1.w", uniform(&[hid, n_in], n_in, &mut rng))?;
        p.insert("scorer.fc1.b", Tensor::zeros(&[hid]))?;
        p.insert("scorer.fc2.w", uniform(&[1, hid], hid, &mut rng))?;
        p.insert("scorer.fc2.b", Tensor::zeros(&[1]))?;
        Ok(p)
    }

    pub fn backbone<'p>(&self, tape: &mut Tape<'p>, b: &mut Binder<'p>, x: Var) -> Result<Var> {
        let cfg = &self.config.backbone;
        let mut v = x;
        for i in 0..cfg.channels.len() {
            let w = b.var(tape, &format!("backbone.conv{i}.w"))?;
            let bias = b.var(tape, &format!("backbone.conv{i}.b"))?;
            v = tape.conv2d(v, w, Some(bias), 1, cfg.kernel / 2)?;
            v = match cfg.nonlinearity {
                Nonlinearity::Relu => tape.relu(v),
                Nonlinearity::Tanh => tape.tanh(v),
            };
            if cfg.pool > 1 {
                v = tape.max_pool2d(v, cfg.pool, cfg.pool)?;
            }
        }
        Ok(v)
    }

    /// Backbone features of a crop, off the tape's gradient path.
    pub fn features(&self, params: &ParamSet, crop: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut b = Binder::new(params);
        let x = tape.leaf(crop.clone());
        let f = self.backbone(&mut tape, &mut b, x)?;
        Ok(tape.value(f).clone())
    }

    pub fn scorer<'p>(&self, tape: &mut Tape<'p>, b: &mut Binder<'p>, template: Var, window: Var) -> Result<Var> {
        let x = tape.concat(&[template, window]);
        let (w1, b1) = (b.var(tape, "scorer.fc1.w")?, b.var(tape, "scorer.fc1.b")?);
        let hidden = tape.linear(x, w1, b1)?;
        let hidden = tape.relu(hidden);
        let (w2, b2) = (b.var(tape, "scorer.fc2.w")?, b.var(tape, "scorer.fc2.b")?);
        tape.linear(hidden, w2, b2)
    }

    /// Window representation for one step: the recurrent state's output, or the
    /// per-frame encoder when recurrence is ablated.
    fn represent<'p>(&self, tape: &mut Tape<'p>, b: &mut Binder<'p>, x: Var, state: &mut Option<Vec<CellState>>) -> Result<Var> {
        if !self.config.variant.recurrent() {
            return self.cells.encode(tape, b, x);
        }
        let prev = match state.take() {
            Some(s) => s,
            None => {
                let (_, h, w) = tape.value(x).chw()?;
                self.cells.zero_state(tape, h, w)
            }
        };
        let next = self.cells.step(tape, b, x, &prev)?;
        let h = next.last().expect("non-empty stack").h;
        *state = Some(next);
        Ok(h)
    }

    /// Per-step logits along a given trajectory. `template_feat` and `window_feats`
    /// are backbone outputs; the window list is truncated to the variant's step count.
    pub fn sequence_logits<'p>(&self, tape: &mut Tape<'p>, b: &mut Binder<'p>, template_feat: Var, window_feats: &[Var]) -> Result<Vec<Var>> {
        let steps = self.config.steps().min(window_feats.len());
        if steps == 0 {
            return Err(Error::Contract("no search windows".into()));
        }
        let template = self.cells.encode(tape, b, template_feat)?;
        let mut state = None;
        let mut logits = Vec::with_capacity(steps);
        for &x in &window_feats[..steps] {
            let h = self.represent(tape, b, x, &mut state)?;
            logits.push(self.scorer(tape, b, template, h)?);
        }
        Ok(logits)
    }

    /// Mean sigmoid cross-entropy over steps.
    pub fn sequence_loss<'p>(&self, tape: &mut Tape<'p>, b: &mut Binder<'p>, template_feat: Var, window_feats: &[Var], label: f64) -> Result<Var> {
        let logits = self.sequence_logits(tape, b, template_feat, window_feats)?;
        let losses = logits
            .into_iter()
            .map(|z| tape.sigmoid_cross_entropy(z, label))
            .collect::<Result<Vec<_>>>()?;
        tape.mean(&losses)
    }

    /// Runs one candidate through `frames` (the proposal frame first), following the
    /// model's own trajectory.
    pub fn forward_candidate(&self, params: &ParamSet, frames: &[Tensor], proposal: &BoundingBox) -> Result<CandidateRun> {
        let first = frames.first().ok_or_else(|| Error::Contract("no frames".into()))?;
        let (_, fh, fw) = first.chw()?;
        if proposal.x < 0.0 || proposal.y < 0.0 || proposal.right() > fw as f64 || proposal.bottom() > fh as f64 {
            return Err(Error::Contract(format!("proposal {proposal:?} is not inside the {fw}x{fh} frame")));
        }
        let cfg = &self.config;
        let steps = cfg.steps().min(frames.len());
        let stride = cfg.backbone.cumulative_stride();
        let mut tape = Tape::new();
        let mut b = Binder::new(params);

        let tx = tape.leaf(template_crop(first, proposal, cfg.template_res)?);
        let tfeat = self.backbone(&mut tape, &mut b, tx)?;
        let template = self.cells.encode(&mut tape, &mut b, tfeat)?;
        let template_value = tape.value(template).clone();

        let mut state = None;
        let mut current = *proposal;
        let mut run = CandidateRun {
            proposal: *proposal,
            trajectory: Vec::with_capacity(steps),
            logits: Vec::with_capacity(steps),
            peak_values: Vec::with_capacity(steps),
            confidence: 0.0,
            lost: false,
        };
        for (s, frame) in frames[..steps].iter().enumerate() {
            let anchor = if cfg.variant.tracks() { current } else { *proposal };
            let window = make_search_window(&anchor, cfg.alpha, (fh, fw))?;
            let x = tape.leaf(window_crop(frame, &window, cfg.window_res)?);
            let x = self.backbone(&mut tape, &mut b, x)?;
            let h = self.represent(&mut tape, &mut b, x, &mut state)?;
            let (peak, map) = localize(tape.value(h), &template_value)?;
            run.peak_values.push(map.at(peak.0, peak.1));
            if s > 0 && cfg.variant.tracks() {
                let placed = peak_to_frame(peak, &window, pixel_stride(&window, stride, cfg.window_res), &current, (fh, fw));
                if placed.lost {
                    run.lost = true;
                    break;
                }
                current = placed.bbox;
            }
            let logit = self.scorer(&mut tape, &mut b, template, h)?;
            let z = tape.value(logit).item();
            if !z.is_finite() {
                return Err(Error::Numeric(format!("non-finite logit at step {s}")));
            }
            run.logits.push(z);
            run.trajectory.push(current);
        }
        run.confidence = mean_probability(&run.logits);
        Ok(run)
    }

    /// One `(proposal, confidence)` pair per proposal.
    pub fn detect(&self, params: &ParamSet, frames: &[Tensor], proposals: &[BoundingBox]) -> Result<Vec<(BoundingBox, f64)>> {
        proposals
            .iter()
            .map(|p| self.forward_candidate(params, frames, p).map(|r| (*p, r.confidence)))
            .collect()
    }

    /// Follows `init` through every frame; the last box is held after a loss.
    pub fn track(&self, params: &ParamSet, frames: &[Tensor], init: &BoundingBox) -> Result<Vec<BoundingBox>> {
        let tracker = RcnModel {
            config: ModelConfig { snippet_len: frames.len().saturating_sub(1), ..self.config.clone() },
            cells: self.cells.clone(),
        };
        let mut traj = tracker.forward_candidate(params, frames, init)?.trajectory;
        let last = *traj.last().unwrap_or(init);
        traj.resize(frames.len(), last);
        Ok(traj)
    }
}

/// Mean of `sigmoid(z)` over the logits; 0 when there are none.
pub fn mean_probability(logits: &[f64]) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    logits.iter().map(|&z| crate::tensor::sigmoid_scalar(z)).sum::<f64>() / logits.len() as f64
}

/// Finite-difference check of the snippet loss through every parameter (backbone
/// included) on random crops, with parameters jittered away from the initialisation so
/// biases and gates are not at symmetric points.
pub fn snippet_grad_check(config: &ModelConfig, seed: u64, per_tensor: usize) -> Result<GradCheckReport> {
    let m = RcnModel::new(config.clone())?;
    let mut params = m.init_params(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
    for (_, p) in params.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let (t, w) = (config.template_res, config.window_res);
    let template = Tensor::from_fn(&[1, t, t], |_| rng.random_range(0.0..1.0));
    let windows: Vec<Tensor> = (0..config.steps()).map(|_| Tensor::from_fn(&[1, w, w], |_| rng.random_range(0.0..1.0))).collect();
    let f = |ps: &ParamSet| {
        let mut tape = Tape::new();
        let mut b = Binder::new(ps);
        let tx = tape.leaf(template.clone());
        let tf = m.backbone(&mut tape, &mut b, tx)?;
        let mut xs = Vec::new();
        for w in &windows {
            let x = tape.leaf(w.clone());
            xs.push(m.backbone(&mut tape, &mut b, x)?);
        }
        let loss = m.sequence_loss(&mut tape, &mut b, tf, &xs, 1.0)?;
        let g = tape.backward(loss)?;
        Ok((tape.value(loss).item(), b.param_grads(&tape, &g)))
    };
    grad_check(f, &params, 1e-5, per_tensor, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_frames(n: usize, size: usize, at: impl Fn(usize) -> (usize, usize)) -> Vec<Tensor> {
        (0..n)
            .map(|t| {
                let (x0, y0) = at(t);
                Tensor::from_fn(&[1, size, size], |i| {
                    let (x, y) = (i % size, i / size);
                    if (x0..x0 + 12).contains(&x) && (y0..y0 + 12).contains(&y) {
                        0.3 + 0.05 * ((x - x0) as f64) + 0.02 * ((y - y0) as f64)
                    } else {
                        0.0
                    }
                })
            })
            .collect()
    }

    fn tiny(variant: Variant) -> (RcnModel, ParamSet) {
        let m = RcnModel::new(ModelConfig { variant, ..ModelConfig::tiny() }).unwrap();
        let p = m.init_params(3).unwrap();
        (m, p)
    }

    #[test]
    fn geometry_of_configs() {
        let t = ModelConfig::tiny();
        assert_eq!((t.template_extent(), t.window_extent(), t.backbone.cumulative_stride()), (4, 12, 4));
        let d = ModelConfig::default();
        assert_eq!((d.template_extent(), d.window_extent(), d.backbone.cumulative_stride()), (4, 12, 8));
        d.validate().unwrap();
        ModelConfig::micro().validate().unwrap();
        assert!(ModelConfig { window_res: 64, ..ModelConfig::default() }.validate().is_err());
        assert!(ablation_variant("bogus").is_err());
        assert_eq!(ablation_variant("no_recurrence").unwrap(), Variant::NoRecurrence);
    }

    #[test]
    fn confidences_are_probabilities_for_every_variant() {
        let frames = blob_frames(6, 64, |t| (10 + 3 * t, 20));
        let prop = BoundingBox::new(10.0, 20.0, 12.0, 12.0).unwrap();
        for v in Variant::ALL {
            let (m, p) = tiny(v);
            let run = m.forward_candidate(&p, &frames, &prop).unwrap();
            assert!((0.0..=1.0).contains(&run.confidence));
            assert_eq!(run.trajectory.len(), m.config.steps());
            assert_eq!(run.trajectory[0], prop);
        }
    }

    #[test]
    fn zero_length_matches_single_frame_bitwise() {
        let frames = blob_frames(6, 64, |t| (10 + 3 * t, 20));
        let prop = BoundingBox::new(10.0, 20.0, 12.0, 12.0).unwrap();
        let (full, p) = tiny(Variant::Full);
        let l0 = RcnModel::new(ModelConfig { snippet_len: 0, ..full.config.clone() }).unwrap();
        let single = full.with_variant(Variant::SingleFrame).unwrap();
        let a = l0.forward_candidate(&p, &frames, &prop).unwrap();
        let b = single.forward_candidate(&p, &frames, &prop).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trajectory, vec![prop]);
        assert_eq!(a.confidence.to_bits(), crate::tensor::sigmoid_scalar(a.logits[0]).to_bits());
    }

    #[test]
    fn static_scene_gives_constant_trajectory_and_determinism() {
        let frames = blob_frames(6, 64, |_| (30, 25));
        let prop = BoundingBox::new(30.0, 25.0, 12.0, 12.0).unwrap();
        let (m, p) = tiny(Variant::Full);
        let run = m.forward_candidate(&p, &frames, &prop).unwrap();
        assert!(run.trajectory.iter().all(|b| *b == prop), "{:?}", run.trajectory);
        assert_eq!(run, m.forward_candidate(&p, &frames, &prop).unwrap());
        let det = m.detect(&p, &frames, &[prop, prop]).unwrap();
        assert_eq!(det[0].1.to_bits(), det[1].1.to_bits());
        assert!(m.detect(&p, &frames, &[]).unwrap().is_empty());
    }

    #[test]
    fn proposal_outside_frame_is_rejected() {
        let frames = blob_frames(2, 32, |_| (0, 0));
        let (m, p) = tiny(Variant::Full);
        let bad = BoundingBox::new(28.0, 0.0, 12.0, 12.0).unwrap();
        assert!(matches!(m.forward_candidate(&p, &frames, &bad), Err(Error::Contract(_))));
    }

    #[test]
    fn teacher_forced_logits_match_inference_on_fixed_windows() {
        // Without tracking the inference windows are exactly the proposal windows.
        let frames = blob_frames(6, 64, |t| (10 + 2 * t, 20));
        let prop = BoundingBox::new(10.0, 20.0, 12.0, 12.0).unwrap();
        let (m, p) = tiny(Variant::NoTracking);
        let run = m.forward_candidate(&p, &frames, &prop).unwrap();
        let cfg = &m.config;
        let win = make_search_window(&prop, cfg.alpha, (64, 64)).unwrap();
        let mut tape = Tape::new();
        let mut b = Binder::new(&p);
        let t = tape.leaf(m.features(&p, &template_crop(&frames[0], &prop, cfg.template_res).unwrap()).unwrap());
        let xs: Vec<Var> = frames
            .iter()
            .map(|f| tape.leaf(m.features(&p, &window_crop(f, &win, cfg.window_res).unwrap()).unwrap()))
            .collect();
        let logits = m.sequence_logits(&mut tape, &mut b, t, &xs).unwrap();
        let zs: Vec<f64> = logits.iter().map(|&z| tape.value(z).item()).collect();
        assert_eq!(zs, run.logits);
    }

    #[test]
    fn end_to_end_gradients_on_micro_model() {
        for cell in [CellKind::Lstm, CellKind::Gru] {
            let report = snippet_grad_check(&ModelConfig { cell, ..ModelConfig::micro() }, 9, 50).unwrap();
            assert!(report.max_rel_error < 1e-4, "{cell:?}: {report:?}");
            assert!(report.entries_checked > 100);
        }
    }
}
