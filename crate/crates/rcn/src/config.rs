//! Plain-text `key = value` run configuration with `#` comments and dotted keys.
//!
//! `model.preset` (default, tiny or micro) is applied before every other key, so it
//! may appear anywhere in the file. Unknown keys and malformed values are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::cells::CellKind;
use crate::error::{Error, Result};
use crate::experiment::{AblationConfig, EvalConfig};
use crate::model::{ablation_variant, ModelConfig, Nonlinearity};
use crate::synth::{ProposalParams, SceneConfig};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scene: SceneConfig,
    pub proposals: ProposalParams,
    pub eval: EvalConfig,
    pub ablate: AblationConfig,
    /// Sequence counts for `gen-data`.
    pub data_train: usize,
    pub data_test: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: "default".into(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            scene: SceneConfig::default(),
            proposals: ProposalParams::default(),
            eval: EvalConfig::default(),
            ablate: AblationConfig::default(),
            data_train: 200,
            data_test: 100,
            seed: 0,
        }
    }
}

fn preset(name: &str) -> Result<ModelConfig> {
    match name {
        "default" => Ok(ModelConfig::default()),
        "tiny" => Ok(ModelConfig::tiny()),
        "micro" => Ok(ModelConfig::micro()),
        other => Err(Error::Config(format!("model.preset: unknown preset {other:?} (default|tiny|micro)"))),
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// `key = value` pairs in file order. Later duplicates override earlier ones.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut cfg = RunConfig::default();
        if let Some((_, p)) = pairs.iter().rev().find(|(k, _)| k == "model.preset") {
            cfg.model = preset(p)?;
            cfg.preset = p.clone();
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "model.preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.ablate.stage1.validate()?;
        self.ablate.stage2.validate()?;
        self.scene.validate()?;
        if self.ablate.seeds.is_empty() || self.ablate.variants.is_empty() {
            return Err(Error::Config("ablate.seeds and ablate.variants must not be empty".into()));
        }
        if !(self.eval.iou > 0.0 && self.eval.iou <= 1.0) {
            return Err(Error::Config(format!("eval.iou must lie in (0, 1], got {}", self.eval.iou)));
        }
        if self.eval.t0 >= self.scene.length {
            return Err(Error::Config(format!("eval.t0 = {} must be below scene.length = {}", self.eval.t0, self.scene.length)));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.scene;
        let a = &mut self.ablate;
        match key {
            "model.preset" => {
                *m = preset(v)?;
                self.preset = v.to_string();
            }
            "model.backbone" => m.backbone.channels = list(key, v)?,
            "model.backbone_kernel" => m.backbone.kernel = num(key, v)?,
            "model.pool" => m.backbone.pool = num(key, v)?,
            "model.nonlinearity" => m.backbone.nonlinearity = Nonlinearity::parse(v)?,
            "model.cell" => m.cell = CellKind::parse(v)?,
            "model.k" => m.cell_kernel = num(key, v)?,
            "model.hidden_channels" => m.hidden_channels = num(key, v)?,
            "model.depth" => m.depth = num(key, v)?,
            "model.hc_hadamard" => m.hc_hadamard = flag(key, v)?,
            "model.alpha" => m.alpha = num(key, v)?,
            "model.snippet_len" => m.snippet_len = num(key, v)?,
            "model.template_res" => m.template_res = num(key, v)?,
            "model.window_res" => m.window_res = num(key, v)?,
            "model.scorer_hidden" => m.scorer_hidden = num(key, v)?,
            "model.variant" => m.variant = ablation_variant(v)?,
            "train.lr" => t.lr0 = num(key, v)?,
            "train.decay_factor" => t.decay_factor = num(key, v)?,
            "train.decay_period" => t.decay_period = num(key, v)?,
            "train.iterations" => t.iterations = num(key, v)?,
            "train.batch" => t.batch = num(key, v)?,
            "train.momentum" => t.momentum = num(key, v)?,
            "train.weight_decay" => t.weight_decay = num(key, v)?,
            "scene.width" => s.width = num(key, v)?,
            "scene.height" => s.height = num(key, v)?,
            "scene.length" => s.length = num(key, v)?,
            "scene.size_min" => s.size_min = num(key, v)?,
            "scene.size_max" => s.size_max = num(key, v)?,
            "scene.targets" => s.targets = num(key, v)?,
            "scene.distractors" => s.distractors = num(key, v)?,
            "scene.speed_min" => s.speed_min = num(key, v)?,
            "scene.speed_max" => s.speed_max = num(key, v)?,
            "scene.flap_period_min" => s.flap_period_min = num(key, v)?,
            "scene.flap_period_max" => s.flap_period_max = num(key, v)?,
            "scene.flap_amplitude_min" => s.flap_amplitude_min = num(key, v)?,
            "scene.flap_amplitude_max" => s.flap_amplitude_max = num(key, v)?,
            "scene.object_level_min" => s.object_level_min = num(key, v)?,
            "scene.object_level_max" => s.object_level_max = num(key, v)?,
            "scene.bg_level" => s.bg_level = num(key, v)?,
            "scene.bg_contrast" => s.bg_contrast = num(key, v)?,
            "scene.bg_drift" => s.bg_drift = num(key, v)?,
            "scene.noise_sigma" => s.noise_sigma = num(key, v)?,
            "proposals.threshold" => self.proposals.threshold = num(key, v)?,
            "proposals.min_area" => self.proposals.min_area = num(key, v)?,
            "proposals.dilation" => self.proposals.dilation = num(key, v)?,
            "eval.t0" => self.eval.t0 = num(key, v)?,
            "eval.iou" => self.eval.iou = num(key, v)?,
            "eval.min_height" => self.eval.min_height = num(key, v)?,
            "eval.min_track_len" => self.eval.min_track_len = num(key, v)?,
            "ablate.variants" => {
                a.variants = v.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect();
            }
            "ablate.seeds" => a.seeds = list(key, v)?,
            "ablate.stage1_iterations" => a.stage1.iterations = num(key, v)?,
            "ablate.stage2_iterations" => a.stage2.iterations = num(key, v)?,
            "ablate.lr" => {
                let lr = num(key, v)?;
                a.stage1.lr0 = lr;
                a.stage2.lr0 = lr;
            }
            "ablate.decay_period" => {
                let p = num(key, v)?;
                a.stage1.decay_period = p;
                a.stage2.decay_period = p;
            }
            "data.train" => self.data_train = num(key, v)?,
            "data.test" => self.data_test = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a form `parse` reads back.
    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let (m, t, s, a) = (&self.model, &self.train, &self.scene, &self.ablate);
        BTreeMap::from([
            ("model.preset", self.preset.clone()),
            ("model.backbone", join(&m.backbone.channels)),
            ("model.backbone_kernel", m.backbone.kernel.to_string()),
            ("model.pool", m.backbone.pool.to_string()),
            ("model.nonlinearity", m.backbone.nonlinearity.as_str().into()),
            ("model.cell", m.cell.as_str().into()),
            ("model.k", m.cell_kernel.to_string()),
            ("model.hidden_channels", m.hidden_channels.to_string()),
            ("model.depth", m.depth.to_string()),
            ("model.hc_hadamard", m.hc_hadamard.to_string()),
            ("model.alpha", m.alpha.to_string()),
            ("model.snippet_len", m.snippet_len.to_string()),
            ("model.template_res", m.template_res.to_string()),
            ("model.window_res", m.window_res.to_string()),
            ("model.scorer_hidden", m.scorer_hidden.to_string()),
            ("model.variant", m.variant.as_str().into()),
            ("train.lr", t.lr0.to_string()),
            ("train.decay_factor", t.decay_factor.to_string()),
            ("train.decay_period", t.decay_period.to_string()),
            ("train.iterations", t.iterations.to_string()),
            ("train.batch", t.batch.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("scene.width", s.width.to_string()),
            ("scene.height", s.height.to_string()),
            ("scene.length", s.length.to_string()),
            ("scene.size_min", s.size_min.to_string()),
            ("scene.size_max", s.size_max.to_string()),
            ("scene.targets", s.targets.to_string()),
            ("scene.distractors", s.distractors.to_string()),
            ("scene.speed_min", s.speed_min.to_string()),
            ("scene.speed_max", s.speed_max.to_string()),
            ("scene.flap_period_min", s.flap_period_min.to_string()),
            ("scene.flap_period_max", s.flap_period_max.to_string()),
            ("scene.flap_amplitude_min", s.flap_amplitude_min.to_string()),
            ("scene.flap_amplitude_max", s.flap_amplitude_max.to_string()),
            ("scene.object_level_min", s.object_level_min.to_string()),
            ("scene.object_level_max", s.object_level_max.to_string()),
            ("scene.bg_level", s.bg_level.to_string()),
            ("scene.bg_contrast", s.bg_contrast.to_string()),
            ("scene.bg_drift", s.bg_drift.to_string()),
            ("scene.noise_sigma", s.noise_sigma.to_string()),
            ("proposals.threshold", self.proposals.threshold.to_string()),
            ("proposals.min_area", self.proposals.min_area.to_string()),
            ("proposals.dilation", self.proposals.dilation.to_string()),
            ("eval.t0", self.eval.t0.to_string()),
            ("eval.iou", self.eval.iou.to_string()),
            ("eval.min_height", self.eval.min_height.to_string()),
            ("eval.min_track_len", self.eval.min_track_len.to_string()),
            ("ablate.variants", a.variants.join(",")),
            ("ablate.seeds", join(&a.seeds)),
            ("ablate.stage1_iterations", a.stage1.iterations.to_string()),
            ("ablate.stage2_iterations", a.stage2.iterations.to_string()),
            ("ablate.lr", a.stage2.lr0.to_string()),
            ("ablate.decay_period", a.stage2.decay_period.to_string()),
            ("data.train", self.data_train.to_string()),
            ("data.test", self.data_test.to_string()),
            ("seed", self.seed.to_string()),
        ])
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").expect("string write");
        }
        s
    }

    /// Ablation settings with the shared eval and proposal sections filled in.
    pub fn ablation(&self) -> AblationConfig {
        AblationConfig { eval: self.eval.clone(), proposals: self.proposals.clone(), ..self.ablate.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn parses_comments_and_dotted_keys() {
        let cfg = RunConfig::parse("# header\nmodel.k = 5  # trailing\n\nmodel.cell=gru\nseed = 7\n").unwrap();
        assert_eq!(cfg.model.cell_kernel, 5);
        assert_eq!(cfg.model.cell, CellKind::Gru);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn preset_applies_first() {
        let cfg = RunConfig::parse("model.hidden_channels = 3\nmodel.preset = tiny\n").unwrap();
        assert_eq!(cfg.model.hidden_channels, 3);
        assert_eq!(cfg.model.window_res, ModelConfig::tiny().window_res);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        for text in ["model.bogus = 1", "model.k = three", "no equals sign", "model.variant = half", "model.k = 4", "train.lr = -1"] {
            let e = RunConfig::parse(text).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{text}: {e}");
            assert_eq!(e.exit_code(), 2);
        }
        let msg = RunConfig::parse("model.bogus = 1").unwrap_err().to_string();
        assert!(msg.contains("model.bogus"));
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::parse("model.preset = tiny\nmodel.variant = no_tracking\nablate.seeds = 4,5\nscene.noise_sigma = 2.5").unwrap();
        cfg.train.lr0 = 0.003;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.model.variant, Variant::NoTracking);
    }
}
