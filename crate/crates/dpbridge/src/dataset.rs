//! Procedural paired (image, dense map) generation for the toy depth and
//! surface-normal tasks, plus the input-noise perturbation suite.
//!
//! Generation is pure per `(task, seed)`: the same pair regenerates
//! bit-identically on any platform. Depth scenes are circles and rectangles
//! floating over a constant ground plane, rendered with Lambertian shading of
//! the depth field; normal scenes are smooth sinusoidal height fields with
//! analytic normals.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;

/// Which dense map a pair carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Depth,
    Normal,
}

impl Task {
    /// Channels of both the input image and the target map. They match so
    /// that encoded latents share a shape.
    pub fn channels(&self) -> usize {
        match self {
            Task::Depth => 1,
            Task::Normal => 3,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Depth => "depth",
            Task::Normal => "normal",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(Task::Depth),
            "normal" => Ok(Task::Normal),
            other => Err(Error::InvalidArgument(format!("unknown task '{other}'"))),
        }
    }
}

/// One training/eval example.
#[derive(Debug, Clone)]
pub struct SamplePair {
    /// Input image, `H x W x C`, values in `[-1, 1]`.
    pub x: Tensor,
    /// Target map: depth affinely encoded into `[-1, 1]`, or unit normals.
    pub y: Tensor,
    pub task: Task,
    pub seed: u64,
}

impl SamplePair {
    /// Horizontal flip of image and target jointly. For normals the
    /// x-component changes sign under mirroring.
    pub fn hflip(&self) -> SamplePair {
        let flip = |t: &Tensor, negate_x: bool| -> Tensor {
            let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let mut out = t.clone();
            for i in 0..h {
                for j in 0..w {
                    for k in 0..c {
                        let v = t.at3(i, w - 1 - j, k);
                        let idx = out.idx3(i, j, k);
                        out.data_mut()[idx] = if negate_x && k == 0 { -v } else { v };
                    }
                }
            }
            out
        };
        SamplePair {
            x: flip(&self.x, false),
            y: flip(&self.y, self.task == Task::Normal),
            task: self.task,
            seed: self.seed,
        }
    }
}

/// Scene-generation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub height: usize,
    pub width: usize,
    /// Shape count range for depth scenes; sinusoid count for normal scenes.
    pub n_shapes_min: usize,
    pub n_shapes_max: usize,
    /// World-unit depth of the nearest/farthest renderable surface.
    pub depth_near: f64,
    pub depth_far: f64,
    /// Lambertian shading: ambient floor and diffuse gain.
    pub ambient: f64,
    pub diffuse: f64,
    /// Per-pixel texture noise amplitude added to the rendered image.
    pub texture_noise: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub master_seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            height: 32,
            width: 32,
            n_shapes_min: 3,
            n_shapes_max: 7,
            depth_near: 2.0,
            depth_far: 8.0,
            ambient: 0.15,
            diffuse: 0.85,
            texture_noise: 0.03,
            n_train: 2000,
            n_val: 200,
            n_test: 200,
            master_seed: 17,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self, codec_factor: usize) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("zero image dimension".into()));
        }
        if self.height % codec_factor != 0 || self.width % codec_factor != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by codec factor {codec_factor}",
                self.height, self.width
            )));
        }
        if self.n_shapes_min > self.n_shapes_max {
            return Err(Error::Config("n_shapes_min > n_shapes_max".into()));
        }
        if !(self.depth_near > 0.0 && self.depth_near < self.depth_far) {
            return Err(Error::Config("need 0 < depth_near < depth_far".into()));
        }
        Ok(())
    }

    /// Disjoint per-sample seeds: splits live in separate seed blocks.
    pub fn split_seed(&self, split: Split, index: usize) -> u64 {
        let base = match split {
            Split::Train => 0u64,
            Split::Val => 1 << 40,
            Split::Test => 2 << 40,
        };
        self.master_seed.wrapping_add(base + index as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split '{other}'"))),
        }
    }
}

/// Fixed light direction for Lambertian shading (unit length).
fn light_dir() -> [f64; 3] {
    let l = [0.4f64, 0.3, 0.85];
    let norm = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
    [l[0] / norm, l[1] / norm, l[2] / norm]
}

/// Shading value produced by a flat, upward-facing surface; a pixel's
/// deviation from this constant scales with local slope.
pub fn flat_shade_value(cfg: &ScenarioConfig) -> f64 {
    2.0 * (cfg.ambient + cfg.diffuse * light_dir()[2]) - 1.0
}

enum Shape {
    Circle {
        cy: f64,
        cx: f64,
        radius: f64,
        depth: f64,
    },
    Rect {
        cy: f64,
        cx: f64,
        half_h: f64,
        half_w: f64,
        depth: f64,
    },
}

impl Shape {
    fn depth_at(&self, y: f64, x: f64) -> Option<f64> {
        match self {
            Shape::Circle {
                cy,
                cx,
                radius,
                depth,
            } => {
                let d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                (d2 <= radius * radius).then_some(*depth)
            }
            Shape::Rect {
                cy,
                cx,
                half_h,
                half_w,
                depth,
            } => ((y - cy).abs() <= *half_h && (x - cx).abs() <= *half_w).then_some(*depth),
        }
    }
}

/// Generate one example. Pure in `(cfg, task, seed)`.
pub fn gen_pair(cfg: &ScenarioConfig, task: Task, seed: u64) -> Result<SamplePair> {
    let mut rng = Rng::with_stream(seed, streams::DATA + task.channels() as u64);
    match task {
        Task::Depth => gen_depth_pair(cfg, seed, &mut rng),
        Task::Normal => gen_normal_pair(cfg, seed, &mut rng),
    }
}

fn gen_depth_pair(cfg: &ScenarioConfig, seed: u64, rng: &mut Rng) -> Result<SamplePair> {
    let (h, w) = (cfg.height, cfg.width);
    let n_shapes = if cfg.n_shapes_max == 0 {
        0
    } else {
        rng.int_range(cfg.n_shapes_min as u64, cfg.n_shapes_max as u64) as usize
    };
    let min_side = h.min(w) as f64;
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let is_circle = rng.chance(0.5);
        let cy = rng.uniform_range(0.0, h as f64);
        let cx = rng.uniform_range(0.0, w as f64);
        // Shapes stay strictly in front of the ground plane.
        let depth = rng.uniform_range(
            cfg.depth_near,
            cfg.depth_near + 0.9 * (cfg.depth_far - cfg.depth_near),
        );
        if is_circle {
            let radius = rng.uniform_range(0.08, 0.30) * min_side;
            shapes.push(Shape::Circle {
                cy,
                cx,
                radius,
                depth,
            });
        } else {
            let half_h = rng.uniform_range(0.06, 0.25) * min_side;
            let half_w = rng.uniform_range(0.06, 0.25) * min_side;
            shapes.push(Shape::Rect {
                cy,
                cx,
                half_h,
                half_w,
                depth,
            });
        }
    }

    // Nearest-surface depth per pixel over a constant ground plane.
    let mut depth = vec![cfg.depth_far; h * w];
    for i in 0..h {
        for j in 0..w {
            let (py, px) = (i as f64 + 0.5, j as f64 + 0.5);
            let d = &mut depth[i * w + j];
            for s in &shapes {
                if let Some(sd) = s.depth_at(py, px) {
                    if sd < *d {
                        *d = sd;
                    }
                }
            }
        }
    }

    let y = encode_depth_map(cfg, &depth, h, w)?;
    let x = shade_depth_field(cfg, &depth, h, w, rng)?;
    Ok(SamplePair {
        x,
        y,
        task: Task::Depth,
        seed,
    })
}

fn encode_depth_map(cfg: &ScenarioConfig, depth: &[f64], h: usize, w: usize) -> Result<Tensor> {
    let span = cfg.depth_far - cfg.depth_near;
    let data = depth
        .iter()
        .map(|d| 2.0 * (d - cfg.depth_near) / span - 1.0)
        .collect();
    Tensor::from_vec(&[h, w, 1], data)
}

/// Lambertian shading of a depth field: surface normals from central
/// differences of depth, dotted with a fixed light, plus texture noise.
fn shade_depth_field(
    cfg: &ScenarioConfig,
    depth: &[f64],
    h: usize,
    w: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    let light = light_dir();
    let at = |i: i64, j: i64| {
        let ci = i.clamp(0, h as i64 - 1) as usize;
        let cj = j.clamp(0, w as i64 - 1) as usize;
        depth[ci * w + cj]
    };
    let mut img = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let (ii, jj) = (i as i64, j as i64);
            let gy = 0.5 * (at(ii + 1, jj) - at(ii - 1, jj));
            let gx = 0.5 * (at(ii, jj + 1) - at(ii, jj - 1));
            let norm = (gx * gx + gy * gy + 1.0).sqrt();
            let ndotl = (gx * light[0] + gy * light[1] + 1.0 * light[2]) / norm;
            let shade = cfg.ambient + cfg.diffuse * ndotl.max(0.0);
            img[i * w + j] = 2.0 * shade.clamp(0.0, 1.0) - 1.0;
        }
    }
    for v in img.iter_mut() {
        *v = (*v + cfg.texture_noise * rng.normal()).clamp(-1.0, 1.0);
    }
    Tensor::from_vec(&[h, w, 1], img)
}

struct Sinusoid {
    amplitude: f64,
    freq_y: f64,
    freq_x: f64,
    phase: f64,
}

fn gen_normal_pair(cfg: &ScenarioConfig, seed: u64, rng: &mut Rng) -> Result<SamplePair> {
    let (h, w) = (cfg.height, cfg.width);
    let n_waves = if cfg.n_shapes_max == 0 {
        0
    } else {
        rng.int_range(cfg.n_shapes_min as u64, cfg.n_shapes_max as u64) as usize
    };
    let mut waves = Vec::with_capacity(n_waves);
    for _ in 0..n_waves {
        let freq = rng.uniform_range(0.5, 2.5);
        let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
        waves.push(Sinusoid {
            amplitude: rng.uniform_range(0.05, 0.25),
            freq_y: freq * angle.sin(),
            freq_x: freq * angle.cos(),
            phase: rng.uniform_range(0.0, std::f64::consts::TAU),
        });
    }

    // Analytic gradient of the height field in unit coordinates.
    let grad = |uy: f64, ux: f64| -> (f64, f64) {
        let mut gy = 0.0;
        let mut gx = 0.0;
        for s in &waves {
            let arg = std::f64::consts::TAU * (s.freq_y * uy + s.freq_x * ux) + s.phase;
            let d = s.amplitude * std::f64::consts::TAU * arg.cos();
            gy += d * s.freq_y;
            gx += d * s.freq_x;
        }
        (gy, gx)
    };

    let light = light_dir();
    let tint = [1.0, 0.9, 0.8];
    let mut y = Tensor::zeros(&[h, w, 3])?;
    let mut x = Tensor::zeros(&[h, w, 3])?;
    for i in 0..h {
        for j in 0..w {
            let (gy, gx) = grad((i as f64 + 0.5) / h as f64, (j as f64 + 0.5) / w as f64);
            let norm = (gx * gx + gy * gy + 1.0).sqrt();
            let n = [-gx / norm, -gy / norm, 1.0 / norm];
            let ndotl = n[0] * light[0] + n[1] * light[1] + n[2] * light[2];
            let shade = cfg.ambient + cfg.diffuse * ndotl.max(0.0);
            for k in 0..3 {
                let yi = y.idx3(i, j, k);
                y.data_mut()[yi] = n[k];
                let xi = x.idx3(i, j, k);
                x.data_mut()[xi] = 2.0 * (shade * tint[k]).clamp(0.0, 1.0) - 1.0;
            }
        }
    }
    for v in x.data_mut() {
        *v = (*v + cfg.texture_noise * rng.normal()).clamp(-1.0, 1.0);
    }
    Ok(SamplePair {
        x,
        y,
        task: Task::Normal,
        seed,
    })
}

/// Input-perturbation families used by the robustness sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    Uniform,
    Poisson,
    SaltPepper,
}

impl NoiseKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Uniform => "uniform",
            NoiseKind::Poisson => "poisson",
            NoiseKind::SaltPepper => "salt_pepper",
        }
    }

    /// The evaluated (kind, level) grid: gaussian std / uniform half-width in
    /// {0.05, 0.1, 0.2, 0.5}, poisson rate in {0.05, 0.1}, salt-and-pepper
    /// probability in {0.05, 0.1}.
    pub fn sweep_grid() -> Vec<(NoiseKind, f64)> {
        let mut grid = Vec::new();
        for l in [0.05, 0.1, 0.2, 0.5] {
            grid.push((NoiseKind::Gaussian, l));
        }
        for l in [0.05, 0.1, 0.2, 0.5] {
            grid.push((NoiseKind::Uniform, l));
        }
        for l in [0.05, 0.1] {
            grid.push((NoiseKind::Poisson, l));
        }
        for l in [0.05, 0.1] {
            grid.push((NoiseKind::SaltPepper, l));
        }
        grid
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "uniform" => Ok(NoiseKind::Uniform),
            "poisson" => Ok(NoiseKind::Poisson),
            "salt_pepper" => Ok(NoiseKind::SaltPepper),
            other => Err(Error::InvalidArgument(format!(
                "unknown noise kind '{other}'"
            ))),
        }
    }
}

/// Perturb an image in `[-1, 1]`, clipping back into range. `level` is the
/// gaussian std, uniform half-width, poisson rate, or flip probability.
/// `level = 0` is the identity for every kind.
pub fn perturb(x: &Tensor, kind: NoiseKind, level: f64, rng: &mut Rng) -> Result<Tensor> {
    if level < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "negative noise level {level}"
        )));
    }
    if level == 0.0 {
        return Ok(x.clone());
    }
    let mut out = x.clone();
    match kind {
        NoiseKind::Gaussian => {
            for v in out.data_mut() {
                *v = (*v + level * rng.normal()).clamp(-1.0, 1.0);
            }
        }
        NoiseKind::Uniform => {
            for v in out.data_mut() {
                *v = (*v + rng.uniform_range(-level, level)).clamp(-1.0, 1.0);
            }
        }
        NoiseKind::Poisson => {
            // Shot noise on the [0, 1] representation: v01 ~ level *
            // Poisson(v01 / level), preserving the mean with variance
            // level * v01.
            for v in out.data_mut() {
                let v01 = (*v + 1.0) / 2.0;
                let noisy = if v01 <= 0.0 {
                    0.0
                } else {
                    level * rng.poisson(v01 / level) as f64
                };
                *v = (2.0 * noisy - 1.0).clamp(-1.0, 1.0);
            }
        }
        NoiseKind::SaltPepper => {
            if level > 1.0 {
                return Err(Error::InvalidArgument(format!(
                    "salt/pepper probability {level} > 1"
                )));
            }
            for v in out.data_mut() {
                if rng.chance(level) {
                    *v = if rng.chance(0.5) { 1.0 } else { -1.0 };
                }
            }
        }
    }
    Ok(out)
}

// --- dataset directory layout -----------------------------------------------

/// One manifest line: where a sample's tensors live.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub seed: u64,
    pub task: Task,
    pub split: Split,
    pub x_file: String,
    pub y_file: String,
}

/// Generate all splits into `dir`, writing DPBT blobs and `manifest.txt`
/// (one line per sample: seed, task, split, x file, y file).
pub fn write_dataset(cfg: &ScenarioConfig, task: Task, dir: &Path) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (split, count) in [
        (Split::Train, cfg.n_train),
        (Split::Val, cfg.n_val),
        (Split::Test, cfg.n_test),
    ] {
        for idx in 0..count {
            let seed = cfg.split_seed(split, idx);
            let pair = gen_pair(cfg, task, seed)?;
            let x_file = format!("{}_{:05}_x.dpbt", split.as_str(), idx);
            let y_file = format!("{}_{:05}_y.dpbt", split.as_str(), idx);
            pair.x.save(&dir.join(&x_file))?;
            pair.y.save(&dir.join(&y_file))?;
            entries.push(ManifestEntry {
                seed,
                task,
                split,
                x_file,
                y_file,
            });
        }
    }
    let manifest = dir.join("manifest.txt");
    crate::write_atomic(&manifest, |w| {
        for e in &entries {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                e.seed,
                e.task.as_str(),
                e.split.as_str(),
                e.x_file,
                e.y_file
            )?;
        }
        Ok(())
    })?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(Error::Format(format!(
                "manifest line {}: want 5 columns, got {}",
                lineno + 1,
                cols.len()
            )));
        }
        entries.push(ManifestEntry {
            seed: cols[0]
                .parse()
                .map_err(|_| Error::Format(format!("manifest line {}: bad seed", lineno + 1)))?,
            task: cols[1].parse()?,
            split: cols[2].parse()?,
            x_file: cols[3].to_string(),
            y_file: cols[4].to_string(),
        });
    }
    Ok(entries)
}

/// Load the tensors referenced by a manifest entry.
pub fn load_pair(dir: &Path, entry: &ManifestEntry) -> Result<SamplePair> {
    Ok(SamplePair {
        x: Tensor::load(&dir.join(&entry.x_file))?,
        y: Tensor::load(&dir.join(&entry.y_file))?,
        task: entry.task,
        seed: entry.seed,
    })
}

/// Load every pair of one split, in manifest order.
pub fn load_split(dir: &Path, entries: &[ManifestEntry], split: Split) -> Result<Vec<SamplePair>> {
    entries
        .iter()
        .filter(|e| e.split == split)
        .map(|e| load_pair(dir, e))
        .collect()
}
