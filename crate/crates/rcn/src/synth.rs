//! Synthetic flying-object video. Targets flap two wing lobes; distractors share the
//! same shape distribution with the wings frozen at a random phase, so a single frame
//! does not reveal the class. Also home to the background-subtraction proposal generator
//! and the flap-energy oracle.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{GrayImage, ObjectClass, SequenceSample, Track};
use crate::error::{Error, Result};
use crate::localizer::BoundingBox;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub length: usize,
    /// Wingspan range in pixels.
    pub size_min: f64,
    pub size_max: f64,
    pub targets: usize,
    pub distractors: usize,
    /// Translation speed range in pixels per frame.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Flap period range in frames.
    pub flap_period_min: f64,
    pub flap_period_max: f64,
    /// Wing swing amplitude range in degrees.
    pub flap_amplitude_min: f64,
    pub flap_amplitude_max: f64,
    pub object_level_min: f64,
    pub object_level_max: f64,
    pub bg_level: f64,
    /// Amplitude of the low-frequency background pattern in gray levels.
    pub bg_contrast: f64,
    /// Background pattern drift in pixels per frame.
    pub bg_drift: f64,
    pub noise_sigma: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 96,
            height: 96,
            length: 12,
            size_min: 10.0,
            size_max: 18.0,
            targets: 2,
            distractors: 2,
            speed_min: 4.0,
            speed_max: 6.0,
            flap_period_min: 4.0,
            flap_period_max: 8.0,
            flap_amplitude_min: 50.0,
            flap_amplitude_max: 60.0,
            object_level_min: 170.0,
            object_level_max: 220.0,
            bg_level: 80.0,
            bg_contrast: 20.0,
            bg_drift: 0.5,
            noise_sigma: 3.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.width < 8 || self.height < 8 {
            return err("scene.width and scene.height must be at least 8");
        }
        if self.length < 2 {
            return err("scene.length must be at least 2");
        }
        if !(self.size_min > 0.0 && self.size_min <= self.size_max) {
            return err("scene.size_min must be positive and not above scene.size_max");
        }
        if self.size_max + 4.0 >= self.width.min(self.height) as f64 {
            return err("scene.size_max must be smaller than the frame");
        }
        if !(self.speed_min >= 0.0 && self.speed_min <= self.speed_max) {
            return err("scene.speed_min must be non-negative and not above scene.speed_max");
        }
        if !(self.flap_period_min > 0.0 && self.flap_period_min <= self.flap_period_max) {
            return err("scene.flap_period_min must be positive and not above scene.flap_period_max");
        }
        if self.flap_amplitude_min > self.flap_amplitude_max || self.flap_amplitude_min < 0.0 || self.flap_amplitude_max >= 90.0 {
            return err("scene.flap_amplitude range must lie in [0, 90) degrees");
        }
        if !(self.noise_sigma >= 0.0) {
            return err("scene.noise_sigma must be non-negative");
        }
        if self.object_level_min > self.object_level_max {
            return err("scene.object_level_min must not exceed scene.object_level_max");
        }
        Ok(())
    }
}

/// Geometry of one object in one frame.
#[derive(Clone, Copy, Debug)]
struct Pose {
    cx: f64,
    cy: f64,
    span: f64,
    /// Wing elevation in radians; the right wing points along `(cos, -sin)`.
    theta: f64,
}

impl Pose {
    fn body_radius(&self) -> f64 {
        (0.16 * self.span).max(1.5)
    }

    fn wing_axes(&self) -> (f64, f64) {
        (self.span / 4.0, (0.11 * self.span).max(1.0))
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let r = self.body_radius();
        if dx * dx + dy * dy <= r * r {
            return true;
        }
        let (a, b) = self.wing_axes();
        let (c, s) = (self.theta.cos(), self.theta.sin());
        // Mirror the left half onto the right wing.
        let mx = dx.abs();
        let (ux, uy) = (c, -s);
        let (ex, ey) = (mx - ux * a, dy - uy * a);
        let along = ex * ux + ey * uy;
        let across = -ex * uy + ey * ux;
        (along / a).powi(2) + (across / b).powi(2) <= 1.0
    }

    fn reach(&self) -> f64 {
        self.span / 2.0 + self.wing_axes().1 + 1.0
    }
}

struct ObjectPlan {
    class: ObjectClass,
    span: f64,
    level: f64,
    centers: Vec<(f64, f64)>,
    thetas: Vec<f64>,
}

const SUPERSAMPLE: usize = 4;

/// Renders `pose` into a coverage map restricted to its reach; returns
/// `(x0, y0, w, h, coverage)` for the clipped region.
fn coverage(pose: &Pose, width: usize, height: usize) -> (usize, usize, usize, usize, Vec<f64>) {
    let r = pose.reach();
    let x0 = (pose.cx - r).floor().max(0.0) as usize;
    let y0 = (pose.cy - r).floor().max(0.0) as usize;
    let x1 = ((pose.cx + r).ceil() as usize).min(width);
    let y1 = ((pose.cy + r).ceil() as usize).min(height);
    let (w, h) = (x1.saturating_sub(x0), y1.saturating_sub(y0));
    let step = 1.0 / SUPERSAMPLE as f64;
    let mut cov = vec![0.0; w * h];
    for yy in 0..h {
        for xx in 0..w {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = (x0 + xx) as f64 + (sx as f64 + 0.5) * step;
                    let py = (y0 + yy) as f64 + (sy as f64 + 0.5) * step;
                    if pose.contains(px, py) {
                        hits += 1;
                    }
                }
            }
            cov[yy * w + xx] = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        }
    }
    (x0, y0, w, h, cov)
}

fn tight_box(x0: usize, y0: usize, w: usize, h: usize, cov: &[f64]) -> Option<BoundingBox> {
    let (mut minx, mut miny, mut maxx, mut maxy) = (usize::MAX, usize::MAX, 0, 0);
    for yy in 0..h {
        for xx in 0..w {
            if cov[yy * w + xx] > 0.0 {
                minx = minx.min(xx);
                maxx = maxx.max(xx);
                miny = miny.min(yy);
                maxy = maxy.max(yy);
            }
        }
    }
    (minx != usize::MAX).then(|| BoundingBox {
        x: (x0 + minx) as f64,
        y: (y0 + miny) as f64,
        w: (maxx - minx + 1) as f64,
        h: (maxy - miny + 1) as f64,
    })
}

fn sample_path(cfg: &SceneConfig, span: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let margin = span / 2.0 + (0.11 * span).max(1.0) + 2.0;
    let (lox, hix) = (margin, cfg.width as f64 - margin);
    let (loy, hiy) = (margin, cfg.height as f64 - margin);
    let mut p = (rng.random_range(lox..=hix), rng.random_range(loy..=hiy));
    let mut heading = rng.random_range(0.0..2.0 * PI);
    let speed = rng.random_range(cfg.speed_min..=cfg.speed_max);
    let turn = Normal::new(0.0, 0.15).expect("valid sigma");
    let mut v = (speed * heading.cos(), speed * heading.sin());
    let mut out = Vec::with_capacity(cfg.length);
    for t in 0..cfg.length {
        if t > 0 {
            heading = v.1.atan2(v.0) + turn.sample(rng);
            v = (speed * heading.cos(), speed * heading.sin());
            p = (p.0 + v.0, p.1 + v.1);
            if p.0 < lox || p.0 > hix {
                p.0 = if p.0 < lox { 2.0 * lox - p.0 } else { 2.0 * hix - p.0 };
                v.0 = -v.0;
            }
            if p.1 < loy || p.1 > hiy {
                p.1 = if p.1 < loy { 2.0 * loy - p.1 } else { 2.0 * hiy - p.1 };
                v.1 = -v.1;
            }
            p = (p.0.clamp(lox, hix), p.1.clamp(loy, hiy));
        }
        out.push(p);
    }
    out
}

fn paths_disjoint(a: &[(f64, f64)], ra: f64, b: &[(f64, f64)], rb: f64) -> bool {
    let gap = ra + rb + 3.0;
    a.iter().zip(b).all(|(p, q)| (p.0 - q.0).hypot(p.1 - q.1) >= gap)
}

const PLACEMENT_ATTEMPTS: usize = 500;

/// Generates one sequence. All randomness comes from `seed`.
pub fn generate_sequence(cfg: &SceneConfig, seed: u64) -> Result<SequenceSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = std::iter::repeat_n(ObjectClass::Target, cfg.targets).chain(std::iter::repeat_n(ObjectClass::Distractor, cfg.distractors));
    let mut plans: Vec<ObjectPlan> = Vec::new();
    for class in classes {
        let span = rng.random_range(cfg.size_min..=cfg.size_max);
        let level = rng.random_range(cfg.object_level_min..=cfg.object_level_max);
        let amp = rng.random_range(cfg.flap_amplitude_min..=cfg.flap_amplitude_max).to_radians();
        let period = rng.random_range(cfg.flap_period_min..=cfg.flap_period_max);
        let phase = rng.random_range(0.0..2.0 * PI);
        let thetas: Vec<f64> = (0..cfg.length)
            .map(|t| match class {
                ObjectClass::Target => amp * (2.0 * PI * t as f64 / period + phase).sin(),
                ObjectClass::Distractor => amp * phase.sin(),
            })
            .collect();
        let reach = span / 2.0 + (0.11 * span).max(1.0);
        let centers = (0..PLACEMENT_ATTEMPTS)
            .map(|_| sample_path(cfg, span, &mut rng))
            .find(|path| {
                plans.iter().all(|o| paths_disjoint(path, reach, &o.centers, o.span / 2.0 + (0.11 * o.span).max(1.0)))
            })
            .ok_or_else(|| {
                Error::Generation(format!(
                    "could not place object {} disjointly after {PLACEMENT_ATTEMPTS} attempts; reduce object count or size",
                    plans.len()
                ))
            })?;
        plans.push(ObjectPlan { class, span, level, centers, thetas });
    }

    // Low-frequency background: a few drifting plane waves.
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let wavelength = rng.random_range(30.0..80.0);
            let dir = rng.random_range(0.0..2.0 * PI);
            let k = 2.0 * PI / wavelength;
            (k * dir.cos(), k * dir.sin(), rng.random_range(0.0..2.0 * PI), rng.random_range(0.5..1.0))
        })
        .collect();
    let weight_sum: f64 = waves.iter().map(|w| w.3).sum();
    let drift_dir = rng.random_range(0.0..2.0 * PI);
    let drift = (cfg.bg_drift * drift_dir.cos(), cfg.bg_drift * drift_dir.sin());
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;

    let (w, h) = (cfg.width, cfg.height);
    let mut frames = Vec::with_capacity(cfg.length);
    let mut tracks: Vec<Track> = plans
        .iter()
        .enumerate()
        .map(|(i, p)| Track { id: i as u32, class: p.class, boxes: Vec::with_capacity(cfg.length) })
        .collect();
    for t in 0..cfg.length {
        let (ox, oy) = (drift.0 * t as f64, drift.1 * t as f64);
        let mut canvas: Vec<f64> = (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64 - ox, (i / w) as f64 - oy);
                let s: f64 = waves.iter().map(|&(kx, ky, ph, a)| a * (kx * x + ky * y + ph).sin()).sum();
                cfg.bg_level + cfg.bg_contrast * s / weight_sum
            })
            .collect();
        for (plan, track) in plans.iter().zip(tracks.iter_mut()) {
            let pose = Pose { cx: plan.centers[t].0, cy: plan.centers[t].1, span: plan.span, theta: plan.thetas[t] };
            let (x0, y0, cw, ch, cov) = coverage(&pose, w, h);
            for yy in 0..ch {
                for xx in 0..cw {
                    let c = cov[yy * cw + xx];
                    if c > 0.0 {
                        let px = &mut canvas[(y0 + yy) * w + x0 + xx];
                        *px = *px * (1.0 - c) + plan.level * c;
                    }
                }
            }
            let b = tight_box(x0, y0, cw, ch, &cov)
                .ok_or_else(|| Error::Generation("object rendered no pixels".into()))?;
            track.boxes.push((t, b));
        }
        let data = canvas
            .into_iter()
            .map(|v| {
                let n = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                (v + n).round().clamp(0.0, 255.0) as u8
            })
            .collect();
        frames.push(GrayImage::new(w, h, data)?);
    }
    Ok(SequenceSample { id: format!("synthetic_{seed}"), frames, tracks })
}

/// Per-sequence seed derived from a base seed, a split tag, and an index.
pub fn derive_seed(base: u64, split: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(split.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index.wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProposalParams {
    /// Absolute difference must exceed this to count as foreground.
    pub threshold: u8,
    pub min_area: usize,
    /// Dilation radius in pixels used to join nearby foreground pixels.
    pub dilation: usize,
}

impl Default for ProposalParams {
    fn default() -> Self {
        ProposalParams { threshold: 25, min_area: 12, dilation: 1 }
    }
}

/// Median background over `frames`, differenced against frame `t0`, thresholded,
/// dilated, and split into 8-connected components. Boxes are tight around the
/// undilated foreground pixels of each component.
pub fn bg_subtract_proposals(frames: &[GrayImage], t0: usize, params: &ProposalParams) -> Result<Vec<BoundingBox>> {
    if frames.len() < 2 {
        return Err(Error::Contract("background subtraction needs at least two frames".into()));
    }
    if t0 >= frames.len() {
        return Err(Error::Contract(format!("t0 {t0} outside {} frames", frames.len())));
    }
    let (w, h) = (frames[0].width, frames[0].height);
    if frames.iter().any(|f| f.width != w || f.height != h) {
        return Err(Error::shape("frames differ in size"));
    }
    let mid = (frames.len() - 1) / 2;
    let mut column = vec![0u8; frames.len()];
    let fg: Vec<bool> = (0..w * h)
        .map(|i| {
            for (c, f) in column.iter_mut().zip(frames) {
                *c = f.data[i];
            }
            let median = *column.select_nth_unstable(mid).1;
            frames[t0].data[i].abs_diff(median) > params.threshold
        })
        .collect();

    let r = params.dilation as isize;
    let mut grown = fg.clone();
    if r > 0 {
        for y in 0..h as isize {
            for x in 0..w as isize {
                if fg[(y as usize) * w + x as usize] {
                    continue;
                }
                let near = (-r..=r).any(|dy| {
                    (-r..=r).any(|dx| {
                        let (nx, ny) = (x + dx, y + dy);
                        nx >= 0 && ny >= 0 && nx < w as isize && ny < h as isize && fg[ny as usize * w + nx as usize]
                    })
                });
                grown[y as usize * w + x as usize] = near;
            }
        }
    }

    let mut label = vec![false; w * h];
    let mut boxes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !grown[start] || label[start] {
            continue;
        }
        label[start] = true;
        stack.push(start);
        let (mut minx, mut miny, mut maxx, mut maxy, mut area) = (usize::MAX, usize::MAX, 0, 0, 0);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            if fg[i] {
                area += 1;
                minx = minx.min(x);
                maxx = maxx.max(x);
                miny = miny.min(y);
                maxy = maxy.max(y);
            }
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if grown[j] && !label[j] {
                        label[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        if area >= params.min_area.max(1) {
            boxes.push(BoundingBox {
                x: minx as f64,
                y: miny as f64,
                w: (maxx - minx + 1) as f64,
                h: (maxy - miny + 1) as f64,
            });
        }
    }
    Ok(boxes)
}

/// Orientation in radians of the principal axis of a weighted point set.
fn orientation(points: &[(f64, f64, f64)]) -> Option<f64> {
    let m: f64 = points.iter().map(|p| p.2).sum();
    if m <= 0.0 {
        return None;
    }
    let mx = points.iter().map(|p| p.0 * p.2).sum::<f64>() / m;
    let my = points.iter().map(|p| p.1 * p.2).sum::<f64>() / m;
    let (mut m20, mut m02, mut m11) = (0.0, 0.0, 0.0);
    for &(x, y, wt) in points {
        m20 += wt * (x - mx) * (x - mx);
        m02 += wt * (y - my) * (y - my);
        m11 += wt * (x - mx) * (y - my);
    }
    Some(0.5 * (2.0 * m11).atan2(m20 - m02))
}

fn variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64
}

/// Temporal variance of each wing lobe's orientation inside the ground-truth boxes,
/// averaged over the two lobes. Lobes are the halves left and right of the box center;
/// pixel weights are brightness above the median of a ring around the box.
pub fn flap_energy(frames: &[GrayImage], boxes: &[BoundingBox]) -> f64 {
    let mut left = Vec::new();
    let mut right = Vec::new();
    for (f, b) in frames.iter().zip(boxes) {
        let (w, h) = (f.width as isize, f.height as isize);
        let x0 = b.x.floor() as isize;
        let y0 = b.y.floor() as isize;
        let x1 = (b.right().ceil() as isize).min(w);
        let y1 = (b.bottom().ceil() as isize).min(h);
        let mut ring = Vec::new();
        for y in (y0 - 2).max(0)..(y1 + 2).min(h) {
            for x in (x0 - 2).max(0)..(x1 + 2).min(w) {
                if x < x0 || x >= x1 || y < y0 || y >= y1 {
                    ring.push(f.get(x as usize, y as usize));
                }
            }
        }
        let bg = if ring.is_empty() {
            0.0
        } else {
            let mid = ring.len() / 2;
            *ring.select_nth_unstable(mid).1 as f64
        };
        let cx = b.x + b.w / 2.0;
        let (mut lp, mut rp) = (Vec::new(), Vec::new());
        for y in y0.max(0)..y1 {
            for x in x0.max(0)..x1 {
                let wt = (f.get(x as usize, y as usize) as f64 - bg - 10.0).max(0.0);
                let p = (x as f64 + 0.5, y as f64 + 0.5, wt);
                if p.0 < cx {
                    lp.push(p);
                } else {
                    rp.push(p);
                }
            }
        }
        if let Some(o) = orientation(&lp) {
            left.push(o);
        }
        if let Some(o) = orientation(&rp) {
            right.push(o);
        }
    }
    0.5 * (variance(&left) + variance(&right))
}
