//! Bouncing-balls world: simulator, renderer, view sampler and dataset files.
//!
//! Ball positions are `(x, y)` with `x` along columns and `y` along rows;
//! pixel `(i, j)` has its center at `(j + 0.5, i + 0.5)`. View centers are
//! integer pixel coordinates `(row, col)` in `[5, 42]^2` so that every 11×11
//! crop lies inside the frame.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::{CROP, CROP_PIXELS};
use crate::error::{Error, Result};
use crate::recurrent::Observations;

/// Frame side length in pixels.
pub const FRAME: usize = 48;
/// Pixels per frame.
pub const FRAME_PIXELS: usize = FRAME * FRAME;
/// Bytes of a bit-packed frame.
pub const PACKED_FRAME: usize = FRAME_PIXELS / 8;
/// Half-width of a crop window.
pub const HALF: usize = CROP / 2;
/// Smallest and largest admissible view-center coordinate.
pub const CENTER_MIN: usize = HALF;
pub const CENTER_MAX: usize = FRAME - 1 - HALF;

const MAGIC: &[u8; 8] = b"S2RMBB1\n";
const VERSION: u32 = 1;
const HEADER_BYTES: usize = 8 + 9 * 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ball {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub radius: f64,
    pub fixed: bool,
}

impl Ball {
    pub fn speed(&self) -> f64 {
        self.vel[0].hypot(self.vel[1])
    }
}

/// Free parameters of the world.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldConfig {
    pub size: f64,
    pub radius: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Radius of the fixed ball at the center of the box, if any.
    pub central_radius: Option<f64>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { size: FRAME as f64, radius: 3.0, speed_min: 0.5, speed_max: 2.0, central_radius: Some(4.0) }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let free = self.size - 2.0 * self.radius;
        if !(self.radius > 0.0 && free > 2.0 * self.speed_max) {
            return Err(Error::Config(format!(
                "ball radius {} leaves no room in a box of size {}",
                self.radius, self.size
            )));
        }
        if !(0.0 <= self.speed_min && self.speed_min <= self.speed_max) {
            return Err(Error::Config("speed range must satisfy 0 <= min <= max".into()));
        }
        if let Some(c) = self.central_radius {
            if !(c > 0.0 && 2.0 * c < self.size) {
                return Err(Error::Config(format!("central ball radius {c} does not fit")));
            }
        }
        Ok(())
    }
}

/// Advances every moving ball by one step: integrate, resolve collisions,
/// reflect at walls.
pub fn step_balls(balls: &mut [Ball], size: f64) {
    for b in balls.iter_mut().filter(|b| !b.fixed) {
        b.pos[0] += b.vel[0];
        b.pos[1] += b.vel[1];
    }
    for i in 0..balls.len() {
        for j in i + 1..balls.len() {
            collide(balls, i, j);
        }
    }
    for b in balls.iter_mut().filter(|b| !b.fixed) {
        for k in 0..2 {
            let (lo, hi) = (b.radius, size - b.radius);
            if b.pos[k] < lo {
                b.pos[k] = 2.0 * lo - b.pos[k];
                b.vel[k] = -b.vel[k];
            } else if b.pos[k] > hi {
                b.pos[k] = 2.0 * hi - b.pos[k];
                b.vel[k] = -b.vel[k];
            }
            b.pos[k] = b.pos[k].clamp(lo, hi);
        }
    }
}

/// Elastic equal-mass collision of balls `i` and `j` when they overlap and
/// approach each other. A fixed ball acts as an immovable reflector.
fn collide(balls: &mut [Ball], i: usize, j: usize) {
    let (a, b) = (balls[i], balls[j]);
    if a.fixed && b.fixed {
        return;
    }
    let d = [b.pos[0] - a.pos[0], b.pos[1] - a.pos[1]];
    let dist = d[0].hypot(d[1]);
    if dist >= a.radius + b.radius || dist == 0.0 {
        return;
    }
    let n = [d[0] / dist, d[1] / dist];
    let rel = (b.vel[0] - a.vel[0]) * n[0] + (b.vel[1] - a.vel[1]) * n[1];
    if rel >= 0.0 {
        return;
    }
    if a.fixed || b.fixed {
        let m = if a.fixed { j } else { i };
        let v = balls[m].vel;
        let vn = v[0] * n[0] + v[1] * n[1];
        balls[m].vel = [v[0] - 2.0 * vn * n[0], v[1] - 2.0 * vn * n[1]];
    } else {
        balls[i].vel = [a.vel[0] + rel * n[0], a.vel[1] + rel * n[1]];
        balls[j].vel = [b.vel[0] - rel * n[0], b.vel[1] - rel * n[1]];
    }
}

/// Initial world: `n_balls` moving balls placed without overlap, plus the
/// fixed central ball when configured.
pub fn initial_balls(n_balls: usize, cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Ball>> {
    cfg.validate()?;
    let mut balls = Vec::with_capacity(n_balls + 1);
    if let Some(r) = cfg.central_radius {
        let c = cfg.size / 2.0;
        balls.push(Ball { pos: [c, c], vel: [0.0, 0.0], radius: r, fixed: true });
    }
    for _ in 0..n_balls {
        let mut placed = false;
        for _ in 0..10_000 {
            let pos = [
                rng.random_range(cfg.radius..=cfg.size - cfg.radius),
                rng.random_range(cfg.radius..=cfg.size - cfg.radius),
            ];
            let clear = balls.iter().all(|b: &Ball| {
                (b.pos[0] - pos[0]).hypot(b.pos[1] - pos[1]) > b.radius + cfg.radius
            });
            if clear {
                let speed = rng.random_range(cfg.speed_min..=cfg.speed_max);
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                balls.push(Ball {
                    pos,
                    vel: [speed * angle.cos(), speed * angle.sin()],
                    radius: cfg.radius,
                    fixed: false,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!("cannot place {n_balls} balls without overlap")));
        }
    }
    Ok(balls)
}

/// Trajectory of `frames` world states, the first being the initial state.
pub fn simulate(n_balls: usize, frames: usize, seed: u64, cfg: &WorldConfig) -> Result<Vec<Vec<Ball>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    simulate_with(n_balls, frames, cfg, &mut rng)
}

fn simulate_with(n_balls: usize, frames: usize, cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<Ball>>> {
    if n_balls == 0 || frames == 0 {
        return Err(Error::Config("need at least one ball and one frame".into()));
    }
    let mut balls = initial_balls(n_balls, cfg, rng)?;
    let mut out = Vec::with_capacity(frames);
    out.push(balls.clone());
    for _ in 1..frames {
        step_balls(&mut balls, cfg.size);
        out.push(balls.clone());
    }
    Ok(out)
}

/// Binary 48×48 image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pixels: Vec<u8>,
}

impl Default for Frame {
    fn default() -> Self {
        Self { pixels: vec![0; FRAME_PIXELS] }
    }
}

impl Frame {
    pub fn from_pixels(pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != FRAME_PIXELS || pixels.iter().any(|&p| p > 1) {
            return Err(Error::Input(format!("a frame needs {FRAME_PIXELS} binary pixels")));
        }
        Ok(Self { pixels })
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * FRAME + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.pixels[row * FRAME + col] = value as u8;
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn lit_fraction(&self) -> f64 {
        self.pixels.iter().map(|&p| p as usize).sum::<usize>() as f64 / FRAME_PIXELS as f64
    }

    /// The 11×11 window around `center = (row, col)`, row-major.
    pub fn crop(&self, center: [usize; 2]) -> Vec<f64> {
        let (r0, c0) = (center[0] - HALF, center[1] - HALF);
        let mut out = Vec::with_capacity(CROP_PIXELS);
        for r in r0..r0 + CROP {
            out.extend(self.pixels[r * FRAME + c0..r * FRAME + c0 + CROP].iter().map(|&p| p as f64));
        }
        out
    }

    /// Row-major bits, most significant bit first within each byte.
    pub fn pack(&self) -> [u8; PACKED_FRAME] {
        let mut out = [0u8; PACKED_FRAME];
        for (k, &p) in self.pixels.iter().enumerate() {
            out[k / 8] |= p << (7 - k % 8);
        }
        out
    }

    pub fn unpack(bytes: &[u8]) -> Self {
        let pixels = (0..FRAME_PIXELS).map(|k| (bytes[k / 8] >> (7 - k % 8)) & 1).collect();
        Self { pixels }
    }
}

/// Lights every pixel whose center lies within some ball.
pub fn render(balls: &[Ball]) -> Frame {
    let mut frame = Frame::default();
    for b in balls {
        let r2 = b.radius * b.radius;
        let lo = |v: f64| ((v - b.radius - 0.5).floor().max(0.0)) as usize;
        let hi = |v: f64| ((v + b.radius + 0.5).ceil().min(FRAME as f64 - 1.0)).max(0.0) as usize;
        for i in lo(b.pos[1])..=hi(b.pos[1]) {
            for j in lo(b.pos[0])..=hi(b.pos[0]) {
                let (dx, dy) = (j as f64 + 0.5 - b.pos[0], i as f64 + 0.5 - b.pos[1]);
                if dx * dx + dy * dy <= r2 {
                    frame.set(i, j, true);
                }
            }
        }
    }
    frame
}

/// A uniformly random admissible view center `(row, col)`.
pub fn random_center(rng: &mut impl Rng) -> [usize; 2] {
    [rng.random_range(CENTER_MIN..=CENTER_MAX), rng.random_range(CENTER_MIN..=CENTER_MAX)]
}

/// `count` random centers with their crops from `frame`.
pub fn sample_views(frame: &Frame, count: usize, rng: &mut impl Rng) -> Vec<([usize; 2], Vec<f64>)> {
    (0..count)
        .map(|_| {
            let c = random_center(rng);
            (c, frame.crop(c))
        })
        .collect()
}

/// Converts a view center to a model position.
pub fn center_position(c: [usize; 2]) -> [f64; 2] {
    [c[0] as f64, c[1] as f64]
}

/// One video with its view centers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub frames: Vec<Frame>,
    /// `centers[t]` holds the view centers of step `t`.
    pub centers: Vec<Vec<[usize; 2]>>,
    pub n_balls: usize,
    pub seed: u64,
}

impl Episode {
    /// Reproduces the episode from its seed: simulate, render, then draw
    /// view centers from the same stream.
    pub fn generate(n_balls: usize, frames: usize, views: usize, seed: u64, cfg: &WorldConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let traj = simulate_with(n_balls, frames, cfg, &mut rng)?;
        let frames: Vec<Frame> = traj.iter().map(|b| render(b)).collect();
        let centers = (0..frames.len()).map(|_| (0..views).map(|_| random_center(&mut rng)).collect()).collect();
        Ok(Self { frames, centers, n_balls, seed })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Observations at step `t` for the given centers.
    pub fn observe_at(&self, t: usize, centers: &[[usize; 2]]) -> Observations {
        let crops = centers.iter().flat_map(|&c| self.frames[t].crop(c)).collect();
        Observations::new(centers.iter().map(|&c| center_position(c)).collect(), crops)
            .expect("crops extracted from a frame are well formed")
    }

    /// The recorded views of step `t`.
    pub fn observations(&self, t: usize) -> Observations {
        self.observe_at(t, &self.centers[t])
    }
}

/// Parameters of a dataset file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub n_seq: usize,
    pub frames: usize,
    pub views: usize,
    pub n_balls: usize,
    pub seed: u64,
}

impl DatasetHeader {
    fn record_bytes(&self) -> usize {
        self.frames * PACKED_FRAME + self.frames * self.views * 4
    }
}

/// SplitMix64 finalizer applied to `master + (i + 1) * golden`.
pub fn splitmix(master: u64, i: u64) -> u64 {
    let mut z = master.wrapping_add(i.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn encode_episode(ep: &Episode, out: &mut Vec<u8>) {
    for f in &ep.frames {
        out.extend_from_slice(&f.pack());
    }
    for step in &ep.centers {
        for c in step {
            out.extend_from_slice(&(c[0] as u16).to_le_bytes());
            out.extend_from_slice(&(c[1] as u16).to_le_bytes());
        }
    }
}

/// Serializes a dataset into bytes.
pub fn dataset_bytes(header: &DatasetHeader, cfg: &WorldConfig) -> Result<Vec<u8>> {
    let words = [header.n_seq, header.frames, header.views, header.n_balls];
    if words.iter().any(|&w| w > u32::MAX as usize) {
        return Err(Error::Config("dataset extents must fit in 32 bits".into()));
    }
    let episodes: Vec<Episode> = (0..header.n_seq)
        .into_par_iter()
        .map(|i| Episode::generate(header.n_balls, header.frames, header.views, splitmix(header.seed, i as u64), cfg))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(HEADER_BYTES + header.n_seq * header.record_bytes());
    out.extend_from_slice(MAGIC);
    for w in [
        VERSION,
        header.n_seq as u32,
        header.frames as u32,
        FRAME as u32,
        FRAME as u32,
        header.views as u32,
        header.n_balls as u32,
        header.seed as u32,
        (header.seed >> 32) as u32,
    ] {
        out.extend_from_slice(&w.to_le_bytes());
    }
    for ep in &episodes {
        encode_episode(ep, &mut out);
    }
    Ok(out)
}

/// Generates a dataset and writes it to `path`.
pub fn generate_dataset(path: &Path, header: &DatasetHeader, cfg: &WorldConfig) -> Result<()> {
    let bytes = dataset_bytes(header, cfg)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// A dataset held in memory; episodes are decoded on access.
#[derive(Clone, Debug)]
pub struct Dataset {
    header: DatasetHeader,
    bytes: Vec<u8>,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(fs::read(path)?)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let fail = |offset: usize, msg: String| Error::Format { offset: offset as u64, msg };
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(fail(0, "not a bouncing-balls dataset (bad magic)".into()));
        }
        if bytes.len() < HEADER_BYTES {
            return Err(fail(bytes.len(), "truncated header".into()));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[8 + 4 * k..12 + 4 * k].try_into().unwrap());
        if word(0) != VERSION {
            return Err(fail(8, format!("unsupported version {}", word(0))));
        }
        if word(3) as usize != FRAME || word(4) as usize != FRAME {
            return Err(fail(20, format!("frame size {}x{} is not {FRAME}x{FRAME}", word(3), word(4))));
        }
        let header = DatasetHeader {
            n_seq: word(1) as usize,
            frames: word(2) as usize,
            views: word(5) as usize,
            n_balls: word(6) as usize,
            seed: word(7) as u64 | (word(8) as u64) << 32,
        };
        let expected = header
            .n_seq
            .checked_mul(header.record_bytes())
            .and_then(|b| b.checked_add(HEADER_BYTES))
            .ok_or_else(|| fail(12, "dataset extents overflow".into()))?;
        if bytes.len() < expected {
            let rec = header.record_bytes().max(1);
            let seq = (bytes.len() - HEADER_BYTES) / rec;
            return Err(fail(
                bytes.len(),
                format!("truncated in sequence {seq}: expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        if bytes.len() > expected {
            return Err(fail(expected, format!("{} trailing bytes", bytes.len() - expected)));
        }
        let ds = Self { header, bytes };
        for i in 0..header.n_seq {
            ds.episode(i)?;
        }
        Ok(ds)
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.header.n_seq
    }

    pub fn is_empty(&self) -> bool {
        self.header.n_seq == 0
    }

    /// Decodes episode `i`.
    pub fn episode(&self, i: usize) -> Result<Episode> {
        let h = &self.header;
        if i >= h.n_seq {
            return Err(Error::Input(format!("episode {i} out of range (dataset holds {})", h.n_seq)));
        }
        let base = HEADER_BYTES + i * h.record_bytes();
        let frames = (0..h.frames)
            .map(|t| Frame::unpack(&self.bytes[base + t * PACKED_FRAME..base + (t + 1) * PACKED_FRAME]))
            .collect();
        let mut at = base + h.frames * PACKED_FRAME;
        let mut centers = Vec::with_capacity(h.frames);
        for _ in 0..h.frames {
            let mut step = Vec::with_capacity(h.views);
            for _ in 0..h.views {
                let r = u16::from_le_bytes([self.bytes[at], self.bytes[at + 1]]) as usize;
                let c = u16::from_le_bytes([self.bytes[at + 2], self.bytes[at + 3]]) as usize;
                if !(CENTER_MIN..=CENTER_MAX).contains(&r) || !(CENTER_MIN..=CENTER_MAX).contains(&c) {
                    return Err(Error::Format {
                        offset: at as u64,
                        msg: format!("view center ({r}, {c}) outside [{CENTER_MIN}, {CENTER_MAX}]"),
                    });
                }
                step.push([r, c]);
                at += 4;
            }
            centers.push(step);
        }
        Ok(Episode { frames, centers, n_balls: h.n_balls, seed: splitmix(h.seed, i as u64) })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }
}

#[cfg(test)]
mod tests;
