//! Synthetic moving-sprite clips with exact patch correspondence, frame-pair
//! sampling and ingestion of on-disk frame directories.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::{self, StreamRng};

pub const CHANNELS: usize = 3;

/// An RGB image with channel values in `[0, 1]`, stored row-major HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self { width, height, data: vec![value; width * height * CHANNELS] }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * CHANNELS;
        &self.data[i..i + CHANNELS]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * CHANNELS;
        &mut self.data[i..i + CHANNELS]
    }

    pub fn read(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Ingestion { path: path.to_path_buf(), reason: e.to_string() })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect();
        Ok(Self { width: w as usize, height: h as usize, data })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, image::ColorType::Rgb8)
            .map_err(|e| Error::Ingestion { path: path.to_path_buf(), reason: e.to_string() })
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a single-channel map with values in `[0, 1]` as an 8-bit PNG.
pub fn save_gray_png(width: usize, height: usize, values: &[f32], path: &Path) -> Result<()> {
    let bytes: Vec<u8> = values.iter().map(|&v| to_u8(v)).collect();
    image::save_buffer(path, &bytes, width as u32, height as u32, image::ColorType::L8)
        .map_err(|e| Error::Ingestion { path: path.to_path_buf(), reason: e.to_string() })
}

/// Patch-grid coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
}

/// Parameters of a synthetic clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub canvas: usize,
    pub patch: usize,
    pub sprites: usize,
    pub sprite_size: usize,
    /// Fixed per-sprite velocities in pixels/frame as `[dx, dy]`. When empty,
    /// velocities are drawn per clip from `[-max_speed, max_speed]`.
    pub velocities: Vec<[i32; 2]>,
    pub max_speed: i32,
    pub clip_length: usize,
    pub texture_seed: u64,
    /// Lattice spacing of the background noise in pixels (0: four patches).
    pub background_step: usize,
    /// Lattice spacing of sprite textures in pixels (0: one patch).
    pub texture_step: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            canvas: 64,
            patch: 8,
            sprites: 3,
            sprite_size: 16,
            velocities: Vec::new(),
            max_speed: 1,
            clip_length: 64,
            texture_seed: 0,
            background_step: 0,
            texture_step: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.canvas == 0 || !self.canvas.is_multiple_of(self.patch) {
            return Err(Error::rejected(format!("canvas {} not divisible by patch {}", self.canvas, self.patch)));
        }
        if self.sprite_size == 0 || !self.sprite_size.is_multiple_of(self.patch) {
            return Err(Error::rejected(format!(
                "sprite size {} is not a multiple of patch {}",
                self.sprite_size, self.patch
            )));
        }
        if self.sprite_size > self.canvas {
            return Err(Error::rejected(format!("sprite size {} exceeds canvas {}", self.sprite_size, self.canvas)));
        }
        if !self.velocities.is_empty() && self.velocities.len() != self.sprites {
            return Err(Error::rejected("velocities must list one entry per sprite"));
        }
        if self.clip_length == 0 {
            return Err(Error::rejected("clip length must be positive"));
        }
        Ok(())
    }

    pub fn background_step_px(&self) -> usize {
        if self.background_step == 0 { 4 * self.patch } else { self.background_step }
    }

    pub fn texture_step_px(&self) -> usize {
        if self.texture_step == 0 { self.patch } else { self.texture_step }
    }

    pub fn grid(&self) -> usize {
        self.canvas / self.patch
    }
}

#[derive(Clone, Debug)]
struct Sprite {
    origin: [i64; 2],
    velocity: [i64; 2],
    texture: Vec<f32>,
}

/// Kinematics and appearance of one synthetic clip. Frames are rendered on
/// demand, so sampling a pair does not materialize the whole clip.
#[derive(Clone, Debug)]
pub struct Scene {
    spec: SceneSpec,
    background: Frame,
    sprites: Vec<Sprite>,
}

impl Scene {
    pub fn new(spec: &SceneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeds::stream(&[seeds::TAG_CORPUS, spec.texture_seed, seed]);
        let background = smooth_noise(spec.canvas, spec.canvas, spec.background_step_px(), 0.15, 0.85, &mut rng);
        let slots = (spec.canvas - spec.sprite_size) / spec.patch + 1;
        let sprites = (0..spec.sprites)
            .map(|s| {
                let origin = [
                    (rng.random_range(0..slots) * spec.patch) as i64,
                    (rng.random_range(0..slots) * spec.patch) as i64,
                ];
                let velocity = match spec.velocities.get(s) {
                    Some(v) => [i64::from(v[0]), i64::from(v[1])],
                    None => [
                        i64::from(rng.random_range(-spec.max_speed..=spec.max_speed)),
                        i64::from(rng.random_range(-spec.max_speed..=spec.max_speed)),
                    ],
                };
                let texture = smooth_noise(spec.sprite_size, spec.sprite_size, spec.texture_step_px(), 0.0, 1.0, &mut rng).data;
                Sprite { origin, velocity, texture }
            })
            .collect();
        Ok(Self { spec: spec.clone(), background, sprites })
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.spec.clip_length
    }

    pub fn is_empty(&self) -> bool {
        self.spec.clip_length == 0
    }

    /// Top-left pixel position `[x, y]` of a sprite at frame `t`, clamped to
    /// the canvas.
    pub fn sprite_position(&self, sprite: usize, t: usize) -> [usize; 2] {
        let s = &self.sprites[sprite];
        let limit = (self.spec.canvas - self.spec.sprite_size) as i64;
        let t = t as i64;
        [
            (s.origin[0] + s.velocity[0] * t).clamp(0, limit) as usize,
            (s.origin[1] + s.velocity[1] * t).clamp(0, limit) as usize,
        ]
    }

    pub fn sprite_velocity(&self, sprite: usize) -> [i64; 2] {
        self.sprites[sprite].velocity
    }

    pub fn render(&self, t: usize) -> Frame {
        let mut frame = self.background.clone();
        let size = self.spec.sprite_size;
        for (i, sprite) in self.sprites.iter().enumerate() {
            let [x0, y0] = self.sprite_position(i, t);
            for y in 0..size {
                for x in 0..size {
                    let src = (y * size + x) * CHANNELS;
                    frame.pixel_mut(x0 + x, y0 + y).copy_from_slice(&sprite.texture[src..src + CHANNELS]);
                }
            }
        }
        frame
    }

    fn aligned(&self, sprite: usize, t: usize) -> bool {
        let [x, y] = self.sprite_position(sprite, t);
        x % self.spec.patch == 0 && y % self.spec.patch == 0
    }

    /// Whether grid cell `cell` at frame `t` is fully covered by a sprite drawn
    /// after `sprite`.
    fn occluded_by_later(&self, sprite: usize, cell: GridCell, t: usize) -> bool {
        let p = self.spec.patch;
        let (cx, cy) = (cell.col * p, cell.row * p);
        (sprite + 1..self.sprites.len()).any(|other| {
            let [ox, oy] = self.sprite_position(other, t);
            let s = self.spec.sprite_size;
            cx < ox + s && ox < cx + p && cy < oy + s && oy < cy + p
        })
    }

    fn sprite_cell(&self, sprite: usize, t: usize, local: GridCell) -> GridCell {
        let [x, y] = self.sprite_position(sprite, t);
        GridCell { row: y / self.spec.patch + local.row, col: x / self.spec.patch + local.col }
    }

    /// Exact patch correspondences from frame `t1` to frame `t2` for every
    /// sprite patch that is grid-aligned and unoccluded in both frames.
    pub fn correspondence(&self, t1: usize, t2: usize) -> Vec<(GridCell, GridCell)> {
        let cells = self.spec.sprite_size / self.spec.patch;
        let mut out = Vec::new();
        for s in 0..self.sprites.len() {
            if !self.aligned(s, t1) || !self.aligned(s, t2) {
                continue;
            }
            for row in 0..cells {
                for col in 0..cells {
                    let local = GridCell { row, col };
                    let a = self.sprite_cell(s, t1, local);
                    let b = self.sprite_cell(s, t2, local);
                    if !self.occluded_by_later(s, a, t1) && !self.occluded_by_later(s, b, t2) {
                        out.push((a, b));
                    }
                }
            }
        }
        out
    }
}

/// Seeded value noise on a coarse lattice, bilinearly interpolated.
fn smooth_noise(width: usize, height: usize, step: usize, lo: f32, hi: f32, rng: &mut StreamRng) -> Frame {
    let step = step.max(1);
    let gw = width / step + 2;
    let gh = height / step + 2;
    let lattice: Vec<f32> = (0..gw * gh * CHANNELS).map(|_| rng.random_range(lo..hi)).collect();
    let at = |gx: usize, gy: usize, c: usize| lattice[(gy * gw + gx) * CHANNELS + c];
    let mut frame = Frame::filled(width, height, 0.0);
    for y in 0..height {
        let fy = y as f32 / step as f32;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..width {
            let fx = x as f32 / step as f32;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let px = frame.pixel_mut(x, y);
            for (c, v) in px.iter_mut().enumerate() {
                let top = at(x0, y0, c) * (1.0 - tx) + at(x0 + 1, y0, c) * tx;
                let bottom = at(x0, y0 + 1, c) * (1.0 - tx) + at(x0 + 1, y0 + 1, c) * tx;
                *v = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    frame
}

/// Patch correspondence source for a materialized clip.
#[derive(Clone, Debug)]
pub struct CorrespondenceOracle {
    scene: Arc<Scene>,
}

impl CorrespondenceOracle {
    pub fn pairs(&self, t1: usize, t2: usize) -> Vec<(GridCell, GridCell)> {
        self.scene.correspondence(t1, t2)
    }

    /// Image of one grid cell of frame `t1` in frame `t2`, if it is a tracked
    /// sprite patch.
    pub fn map(&self, t1: usize, cell: GridCell, t2: usize) -> Option<GridCell> {
        self.pairs(t1, t2).into_iter().find(|(a, _)| *a == cell).map(|(_, b)| b)
    }
}

#[derive(Clone, Debug)]
pub struct VideoClip {
    pub frames: Vec<Frame>,
    pub oracle: Option<CorrespondenceOracle>,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

pub fn generate_clip(spec: &SceneSpec, seed: u64) -> Result<VideoClip> {
    let scene = Arc::new(Scene::new(spec, seed)?);
    let frames = (0..scene.len()).map(|t| scene.render(t)).collect();
    Ok(VideoClip { frames, oracle: Some(CorrespondenceOracle { scene }) })
}

/// Two frames drawn from one clip.
#[derive(Clone, Debug)]
pub struct FramePair {
    pub frame_a: Frame,
    pub frame_b: Frame,
    pub start: usize,
    pub gap: usize,
    /// Patch-level map from `frame_a` to `frame_b`, when the source has one.
    pub correspondence: Option<Vec<(GridCell, GridCell)>>,
}

impl FramePair {
    /// A pair made of one frame twice, as used for single-image training.
    pub fn from_single(frame: Frame) -> Self {
        Self { frame_b: frame.clone(), frame_a: frame, start: 0, gap: 0, correspondence: None }
    }
}

/// Draws `(start, gap)` with the start uniform over `[0, len - 2]` and the gap
/// uniform over `[1, min(max_gap, len - 1 - start)]`.
pub fn sample_pair_times(len: usize, max_gap: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if len < 2 {
        return Err(Error::rejected(format!("clip of length {len} cannot yield a frame pair")));
    }
    if max_gap < 1 {
        return Err(Error::rejected("maximum frame gap must be at least 1"));
    }
    let start = rng.random_range(0..len - 1);
    let upper = max_gap.min(len - 1 - start);
    let gap = rng.random_range(1..=upper);
    Ok((start, gap))
}

pub fn sample_frame_pair(clip: &VideoClip, max_gap: usize, rng: &mut impl Rng) -> Result<FramePair> {
    let (start, gap) = sample_pair_times(clip.len(), max_gap, rng)?;
    Ok(FramePair {
        frame_a: clip.frames[start].clone(),
        frame_b: clip.frames[start + gap].clone(),
        start,
        gap,
        correspondence: clip.oracle.as_ref().map(|o| o.pairs(start, start + gap)),
    })
}

/// Static-image pairing: one uniformly drawn frame used for both slots.
pub fn sample_static_pair(clip: &VideoClip, rng: &mut impl Rng) -> Result<FramePair> {
    if clip.is_empty() {
        return Err(Error::rejected("empty clip"));
    }
    let t = rng.random_range(0..clip.len());
    let mut pair = FramePair::from_single(clip.frames[t].clone());
    pair.start = t;
    pair.correspondence = clip.oracle.as_ref().map(|o| o.pairs(t, t));
    Ok(pair)
}

/// Crop box in source pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropBox {
    pub x: f32,
    pub y: f32,
    pub width: f32,
    pub height: f32,
}

/// Draws a crop covering `scale` of the source area with aspect ratio in
/// `[3/4, 4/3]`, falling back to the full frame.
pub fn sample_crop(width: usize, height: usize, scale: (f32, f32), rng: &mut impl Rng) -> CropBox {
    let area = (width * height) as f32;
    let (log_lo, log_hi) = ((3.0f32 / 4.0).ln(), (4.0f32 / 3.0).ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let ratio = rng.random_range(log_lo..=log_hi).exp();
        let w = (target * ratio).sqrt();
        let h = (target / ratio).sqrt();
        if w <= width as f32 && h <= height as f32 {
            let x = rng.random_range(0.0..=(width as f32 - w));
            let y = rng.random_range(0.0..=(height as f32 - h));
            return CropBox { x, y, width: w, height: h };
        }
    }
    CropBox { x: 0.0, y: 0.0, width: width as f32, height: height as f32 }
}

/// Bilinear resample of `crop` to `size × size`.
pub fn crop_resize(frame: &Frame, crop: CropBox, size: usize) -> Frame {
    let mut out = Frame::filled(size, size, 0.0);
    let sx = crop.width / size as f32;
    let sy = crop.height / size as f32;
    let max_x = (frame.width - 1) as f32;
    let max_y = (frame.height - 1) as f32;
    for y in 0..size {
        let fy = (crop.y + (y as f32 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        let y1 = (y0 + 1).min(frame.height - 1);
        for x in 0..size {
            let fx = (crop.x + (x as f32 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let x1 = (x0 + 1).min(frame.width - 1);
            for c in 0..CHANNELS {
                let top = frame.pixel(x0, y0)[c] * (1.0 - tx) + frame.pixel(x1, y0)[c] * tx;
                let bottom = frame.pixel(x0, y1)[c] * (1.0 - tx) + frame.pixel(x1, y1)[c] * tx;
                out.pixel_mut(x, y)[c] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    out
}

/// Random resized crop applied with one shared box to both frames. The
/// patch correspondence no longer holds afterwards and is dropped.
pub fn augment_pair(pair: &FramePair, size: usize, scale: (f32, f32), rng: &mut impl Rng) -> FramePair {
    let crop = sample_crop(pair.frame_a.width, pair.frame_a.height, scale, rng);
    FramePair {
        frame_a: crop_resize(&pair.frame_a, crop, size),
        frame_b: crop_resize(&pair.frame_b, crop, size),
        start: pair.start,
        gap: pair.gap,
        correspondence: None,
    }
}

/// Reads a manifest of clip directories: one path per line, `#` comments,
/// relative paths resolved against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Ingestion { path: path.to_path_buf(), reason: e.to_string() })?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| {
            let p = Path::new(l);
            if p.is_absolute() { p.to_path_buf() } else { base.join(p) }
        })
        .collect())
}

fn is_frame_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm")
    )
}

pub fn load_clip_dir(dir: &Path) -> Result<VideoClip> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Ingestion { path: dir.to_path_buf(), reason: e.to_string() })?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::Ingestion { path: dir.to_path_buf(), reason: e.to_string() })?;
        let path = entry.path();
        if path.is_file() && is_frame_file(&path) {
            files.push(path);
        }
    }
    files.sort();
    let mut frames: Vec<Frame> = Vec::with_capacity(files.len());
    for file in &files {
        let frame = Frame::read(file)?;
        if let Some(first) = frames.first() {
            if (first.width, first.height) != (frame.width, frame.height) {
                return Err(Error::Ingestion {
                    path: file.clone(),
                    reason: format!(
                        "frame is {}x{} but the clip started at {}x{}",
                        frame.width, frame.height, first.width, first.height
                    ),
                });
            }
        }
        frames.push(frame);
    }
    Ok(VideoClip { frames, oracle: None })
}

pub fn load_frames_dir(manifest: &Path) -> Result<Vec<VideoClip>> {
    read_manifest(manifest)?.iter().map(|d| load_clip_dir(d)).collect()
}

/// Writes every frame of a clip as `frame_XXXX.png` into `dir`.
pub fn write_clip(clip: &VideoClip, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    for (t, frame) in clip.frames.iter().enumerate() {
        frame.save_png(&dir.join(format!("frame_{t:04}.png")))?;
    }
    Ok(())
}
