//! Synthetic moving-blob videos and the raw video/label file formats.
//!
//! Raw video: magic `CRCV`, then little-endian `u32` frame count, height,
//! width and channels, then `f32` pixels in frame, row, column, channel
//! order. Labels: one `0` or `1` per line.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::init::{rng_from_seed, CrcRng};
use crate::numerics::Tensor;

pub const VIDEO_MAGIC: &[u8; 4] = b"CRCV";
pub const VIDEO_HEADER_BYTES: usize = 20;

/// A frame sequence with pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl Video {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Data(format!("video dims {height}x{width}x{channels}")));
        }
        if pixels.len() != frames * height * width * channels {
            return Err(Error::Data(format!(
                "{} pixels for {frames} frames of {height}x{width}x{channels}",
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Data(format!("pixel {i} is {} (outside [0, 1])", pixels[i])));
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.pixels[t * n..(t + 1) * n]
    }

    /// Frames `start..start+len` stacked on channels: `[H, W, len·C]` with
    /// channel `k·C + c` holding channel `c` of frame `start + k`.
    pub fn clip(&self, start: usize, len: usize) -> Result<Tensor> {
        if len == 0 || start + len > self.frames {
            return Err(Error::Data(format!(
                "clip {start}..{} outside a {}-frame video",
                start + len,
                self.frames
            )));
        }
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = vec![0.0; h * w * len * c];
        for k in 0..len {
            let frame = self.frame(start + k);
            for p in 0..h * w {
                for ch in 0..c {
                    data[p * len * c + k * c + ch] = frame[p * c + ch] as f64;
                }
            }
        }
        Tensor::new([h, w, len * c], data)
    }

    /// Clips of `len` frames whose first frames are `stride` apart.
    pub fn clips(&self, len: usize, stride: usize) -> Result<Vec<Tensor>> {
        if stride == 0 {
            return Err(Error::Config("clip stride must be positive".into()));
        }
        if self.frames < len {
            return Err(Error::Data(format!("{}-frame video is shorter than a clip", self.frames)));
        }
        (0..=self.frames - len).step_by(stride).map(|s| self.clip(s, len)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(VIDEO_HEADER_BYTES + 4 * self.pixels.len());
        out.extend_from_slice(VIDEO_MAGIC);
        for v in [self.frames, self.height, self.width, self.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for p in &self.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, detail: String| Error::Format {
            offset: offset as u64,
            detail,
        };
        if bytes.len() < 4 || &bytes[..4] != VIDEO_MAGIC {
            return Err(fail(0, "missing CRCV magic".into()));
        }
        if bytes.len() < VIDEO_HEADER_BYTES {
            return Err(fail(bytes.len(), "truncated video header".into()));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
        let (frames, height, width, channels) = (field(0), field(1), field(2), field(3));
        if height == 0 || width == 0 || channels == 0 {
            return Err(fail(8, format!("zero dimension in {height}x{width}x{channels}")));
        }
        let count = frames
            .checked_mul(height * width * channels)
            .ok_or_else(|| fail(4, "video size overflows".into()))?;
        let expected = VIDEO_HEADER_BYTES + 4 * count;
        if bytes.len() < expected {
            return Err(fail(
                bytes.len(),
                format!("truncated pixel data: file has {} bytes, header implies {expected}", bytes.len()),
            ));
        }
        if bytes.len() > expected {
            return Err(fail(expected, "trailing bytes after pixel data".into()));
        }
        let mut pixels = Vec::with_capacity(count);
        for (i, chunk) in bytes[VIDEO_HEADER_BYTES..].chunks_exact(4).enumerate() {
            let p = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !(0.0..=1.0).contains(&p) {
                return Err(fail(VIDEO_HEADER_BYTES + 4 * i, format!("pixel value {p} outside [0, 1]")));
            }
            pixels.push(p);
        }
        Video::new(frames, height, width, channels, pixels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

pub fn load_video(path: &Path) -> Result<Video> {
    Video::from_bytes(&fs::read(path)?)
}

pub fn labels_to_text(labels: &[u8]) -> String {
    labels.iter().map(|l| format!("{l}\n")).collect()
}

pub fn parse_labels(text: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        match line.trim() {
            "0" => out.push(0),
            "1" => out.push(1),
            "" => {}
            other => {
                return Err(Error::Format {
                    offset: offset as u64,
                    detail: format!("label {other:?} is not 0 or 1"),
                })
            }
        }
        offset += line.len();
    }
    Ok(out)
}

pub fn load_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Format {
        offset: e.valid_up_to() as u64,
        detail: "label file is not UTF-8".into(),
    })?;
    parse_labels(text)
}

/// Parameters of the synthetic fixture. A single Gaussian blob drifts over
/// a toroidal frame; every segment redraws its direction, speed, intensity,
/// size and noise level. Inside anomaly intervals the blob moves
/// `speed_multiplier` times faster, its size is scaled by `size_multiplier`, and with
/// `off_pattern` it turns half-way between two allowed directions.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub train_frames: usize,
    pub test_frames: usize,
    /// Evenly spaced allowed directions over the full circle, starting
    /// along the x axis; 2 means left and right.
    pub directions: usize,
    /// Normal speed range in pixels per frame.
    pub speed: (f64, f64),
    /// Blob standard deviation range in pixels.
    pub size: (f64, f64),
    /// Peak intensity range.
    pub intensity: (f64, f64),
    /// Segment length range in frames.
    pub segment: (usize, usize),
    /// Range of the per-segment amplitude of uniform background noise.
    pub noise: (f64, f64),
    pub speed_multiplier: f64,
    pub size_multiplier: f64,
    pub off_pattern: bool,
    /// Half-open `[start, end)` frame ranges of the test video.
    pub anomalies: Vec<(usize, usize)>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            train_frames: 2000,
            test_frames: 1000,
            directions: 2,
            speed: (1.0, 1.5),
            size: (2.0, 2.0),
            intensity: (0.3, 1.0),
            segment: (40, 80),
            noise: (0.02, 0.02),
            speed_multiplier: 3.0,
            size_multiplier: 1.0,
            off_pattern: false,
            anomalies: vec![(300, 425), (700, 825)],
            seed: 7,
        }
    }
}

fn parse_range<T: std::str::FromStr>(key: &str, value: &str) -> Result<(T, T)> {
    let bad = || Error::Config(format!("bad range {value:?} for {key} (expected lo..hi)"));
    let (lo, hi) = value.split_once("..").ok_or_else(bad)?;
    Ok((lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?))
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.height < 4 || self.width < 4 {
            return cfg(format!("frame {}x{} is too small", self.height, self.width));
        }
        if self.train_frames == 0 || self.test_frames == 0 {
            return cfg("frame counts must be positive".into());
        }
        if self.directions == 0 {
            return cfg("need at least one direction".into());
        }
        for (name, (lo, hi)) in [("speed", self.speed), ("size", self.size), ("intensity", self.intensity)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return cfg(format!("{name} range {lo}..{hi} is invalid"));
            }
        }
        if self.intensity.1 > 1.0 {
            return cfg("intensity must not exceed 1".into());
        }
        if self.segment.0 == 0 || self.segment.0 > self.segment.1 {
            return cfg(format!("segment range {}..{} is invalid", self.segment.0, self.segment.1));
        }
        let (lo, hi) = self.noise;
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return cfg(format!("noise range {lo}..{hi} is not inside [0, 1)"));
        }
        if !(self.speed_multiplier > 0.0 && self.size_multiplier > 0.0) {
            return cfg("anomaly multipliers must be positive".into());
        }
        let mut last_end = 0;
        for &(s, e) in &self.anomalies {
            if s >= e || e > self.test_frames || s < last_end {
                return cfg(format!(
                    "anomaly interval {s}..{e} is empty, overlapping, unsorted or outside {} frames",
                    self.test_frames
                ));
            }
            last_end = e;
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let anomalies = self
            .anomalies
            .iter()
            .map(|(s, e)| format!("{s}..{e}"))
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("train_frames", self.train_frames.to_string()),
            ("test_frames", self.test_frames.to_string()),
            ("directions", self.directions.to_string()),
            ("speed", format!("{}..{}", self.speed.0, self.speed.1)),
            ("size", format!("{}..{}", self.size.0, self.size.1)),
            ("intensity", format!("{}..{}", self.intensity.0, self.intensity.1)),
            ("segment", format!("{}..{}", self.segment.0, self.segment.1)),
            ("noise", format!("{}..{}", self.noise.0, self.noise.1)),
            ("speed_multiplier", self.speed_multiplier.to_string()),
            ("size_multiplier", self.size_multiplier.to_string()),
            ("off_pattern", self.off_pattern.to_string()),
            ("anomalies", anomalies),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "height" => self.height = parse_value(key, value)?,
            "width" => self.width = parse_value(key, value)?,
            "train_frames" => self.train_frames = parse_value(key, value)?,
            "test_frames" => self.test_frames = parse_value(key, value)?,
            "directions" => self.directions = parse_value(key, value)?,
            "speed" => self.speed = parse_range(key, value)?,
            "size" => self.size = parse_range(key, value)?,
            "intensity" => self.intensity = parse_range(key, value)?,
            "segment" => self.segment = parse_range(key, value)?,
            "noise" => self.noise = parse_range(key, value)?,
            "speed_multiplier" => self.speed_multiplier = parse_value(key, value)?,
            "size_multiplier" => self.size_multiplier = parse_value(key, value)?,
            "off_pattern" => self.off_pattern = parse_value(key, value)?,
            "anomalies" => {
                self.anomalies = value
                    .split(',')
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(|p| parse_range(key, p))
                    .collect::<Result<_>>()?;
            }
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown synthetic key {key:?}"))),
        }
        Ok(())
    }

    /// Per-frame test labels implied by the anomaly intervals.
    pub fn labels(&self) -> Vec<u8> {
        (0..self.test_frames)
            .map(|t| u8::from(self.anomalies.iter().any(|&(s, e)| (s..e).contains(&t))))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub train: Video,
    pub test: Video,
    pub labels: Vec<u8>,
}

/// Motion state of the blob.
struct Blob {
    y: f64,
    x: f64,
    dir: f64,
    speed: f64,
    size: f64,
    intensity: f64,
    noise: f64,
    left: usize,
}

impl Blob {
    fn new(spec: &SyntheticSpec, rng: &mut CrcRng) -> Self {
        let mut b = Blob {
            y: rng.gen_range(0.0..spec.height as f64),
            x: rng.gen_range(0.0..spec.width as f64),
            dir: 0.0,
            speed: 0.0,
            size: 0.0,
            intensity: 0.0,
            noise: 0.0,
            left: 0,
        };
        b.redraw(spec, rng);
        b
    }

    fn redraw(&mut self, spec: &SyntheticSpec, rng: &mut CrcRng) {
        let k = rng.gen_range(0..spec.directions);
        self.dir = 2.0 * PI * k as f64 / spec.directions as f64;
        self.speed = draw(spec.speed, rng);
        self.size = draw(spec.size, rng);
        self.intensity = draw(spec.intensity, rng);
        self.noise = draw(spec.noise, rng);
        self.left = rng.gen_range(spec.segment.0..=spec.segment.1);
    }
}

fn draw((lo, hi): (f64, f64), rng: &mut CrcRng) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Shortest signed distance on a ring of circumference `n`.
fn ring_delta(a: f64, b: f64, n: f64) -> f64 {
    let d = (a - b).rem_euclid(n);
    d.min(n - d)
}

fn render_sequence(spec: &SyntheticSpec, frames: usize, labels: Option<&[u8]>, rng: &mut CrcRng) -> Result<Video> {
    let (h, w) = (spec.height, spec.width);
    let mut pixels = Vec::with_capacity(frames * h * w);
    let mut blob = Blob::new(spec, rng);
    for t in 0..frames {
        if blob.left == 0 {
            blob.redraw(spec, rng);
        }
        blob.left -= 1;
        let anomalous = labels.is_some_and(|l| l[t] == 1);
        let size = if anomalous { blob.size * spec.size_multiplier } else { blob.size };
        let denom = 2.0 * size * size;
        for yy in 0..h {
            for xx in 0..w {
                let dy = ring_delta(yy as f64, blob.y, h as f64);
                let dx = ring_delta(xx as f64, blob.x, w as f64);
                let v = blob.intensity * (-(dy * dy + dx * dx) / denom).exp();
                let n = if blob.noise > 0.0 { rng.gen_range(0.0..blob.noise) } else { 0.0 };
                pixels.push((v + n).clamp(0.0, 1.0) as f32);
            }
        }
        let (mut speed, mut dir) = (blob.speed, blob.dir);
        if anomalous {
            speed *= spec.speed_multiplier;
            if spec.off_pattern {
                dir += PI / spec.directions as f64;
            }
        }
        blob.y = (blob.y + speed * dir.sin()).rem_euclid(h as f64);
        blob.x = (blob.x + speed * dir.cos()).rem_euclid(w as f64);
    }
    Video::new(frames, h, w, 1, pixels)
}

/// Normal training video, test video and its per-frame labels.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let train = render_sequence(spec, spec.train_frames, None, &mut rng)?;
    let labels = spec.labels();
    let test = render_sequence(spec, spec.test_frames, Some(&labels), &mut rng)?;
    Ok(SyntheticData { train, test, labels })
}
