use std::fmt;
use std::str::FromStr;

use crate::characterizer::ConsistencyTerms;
use crate::decomposer::PoolingSwitches;
use crate::error::{Error, Result};

/// Number of convolution layers in the feature extractor.
pub const ENCODER_LAYERS: usize = 5;

/// Named hyper-parameter presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Ped2Like,
    AvenueLike,
    ShanghaitechLike,
    /// Desk-scale preset for the synthetic fixture.
    Synth,
    /// Smallest preset; used by gradient checks.
    Tiny,
}

impl Profile {
    pub const ALL: [Profile; 5] = [
        Profile::Ped2Like,
        Profile::AvenueLike,
        Profile::ShanghaitechLike,
        Profile::Synth,
        Profile::Tiny,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Profile::Ped2Like => "ped2-like",
            Profile::AvenueLike => "avenue-like",
            Profile::ShanghaitechLike => "shanghaitech-like",
            Profile::Synth => "synth",
            Profile::Tiny => "tiny",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Profile::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown profile {s:?}")))
    }
}

/// How training clips are grouped into batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Batching {
    /// Random disjoint groups of `b` clips.
    Shuffled,
    /// Runs of `b` consecutive clips, matching the scoring windows. Clips
    /// must be given in temporal order at stride 1.
    Windows,
}

impl Batching {
    pub fn name(self) -> &'static str {
        match self {
            Batching::Shuffled => "shuffled",
            Batching::Windows => "windows",
        }
    }
}

impl fmt::Display for Batching {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Batching {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Batching::Shuffled, Batching::Windows]
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown batching {s:?}")))
    }
}

/// Every training hyper-parameter. Serialized into checkpoints as
/// `key=value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub profile: Profile,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    pub memory_entries: usize,
    pub clusters: usize,
    pub factors: usize,
    pub clip_len: usize,
    pub height: usize,
    pub width: usize,
    pub input_channels: usize,
    /// Output channels of the five encoder layers; the last is `C`.
    pub encoder_channels: [usize; ENCODER_LAYERS],
    /// Total spatial downsampling of the encoder, a power of two.
    pub feature_stride: usize,
    /// ReLU after the last encoder layer; off leaves the features signed.
    pub final_relu: bool,
    pub cic_width: usize,
    pub phase1_epochs: usize,
    pub total_epochs: usize,
    pub mu_compact: f64,
    pub mu_separate: f64,
    pub mu_cluster: f64,
    pub margin: f64,
    pub seed: u64,
    /// Step between the first frames of consecutive training clips under
    /// shuffled batching.
    pub clip_stride: usize,
    pub batching: Batching,
    pub kmeans_iters: usize,
    pub pooling: PoolingSwitches,
    pub use_c1: bool,
    pub use_c2: bool,
    pub use_c3: bool,
    pub use_cluster: bool,
}

impl TrainConfig {
    pub fn profile(profile: Profile) -> Self {
        let paper = Self {
            profile,
            batch_size: 8,
            lr: 8e-5,
            lambda: 10.0,
            memory_entries: 64,
            clusters: 128,
            factors: 64,
            clip_len: 4,
            height: 224,
            width: 224,
            input_channels: 1,
            encoder_channels: [16, 32, 64, 128, 128],
            feature_stride: 32,
            final_relu: true,
            cic_width: 64,
            phase1_epochs: 100,
            total_epochs: 200,
            mu_compact: 0.1,
            mu_separate: 0.1,
            mu_cluster: 0.1,
            margin: 1.0,
            seed: 0,
            clip_stride: 1,
            batching: Batching::Shuffled,
            kmeans_iters: 100,
            pooling: PoolingSwitches::default(),
            use_c1: true,
            use_c2: true,
            use_c3: true,
            use_cluster: true,
        };
        match profile {
            Profile::Ped2Like => paper,
            Profile::AvenueLike => Self { lambda: 18.0, ..paper },
            Profile::ShanghaitechLike => Self { lambda: 20.0, ..paper },
            Profile::Synth => Self {
                lr: 1e-3,
                memory_entries: 10,
                clusters: 8,
                factors: 8,
                height: 32,
                width: 32,
                encoder_channels: [8, 8, 16, 16, 16],
                feature_stride: 8,
                cic_width: 16,
                phase1_epochs: 20,
                total_epochs: 40,
                clip_stride: 4,
                mu_compact: 0.0,
                batching: Batching::Windows,
                ..paper
            },
            Profile::Tiny => Self {
                batch_size: 2,
                memory_entries: 4,
                clusters: 2,
                factors: 4,
                height: 16,
                width: 16,
                encoder_channels: [4, 4, 8, 8, 8],
                feature_stride: 8,
                cic_width: 4,
                phase1_epochs: 1,
                total_epochs: 2,
                kmeans_iters: 20,
                ..paper
            },
        }
    }

    /// Feature channels `C`.
    pub fn channels(&self) -> usize {
        self.encoder_channels[ENCODER_LAYERS - 1]
    }

    /// Channels of one stacked clip, `T · C_in`.
    pub fn clip_channels(&self) -> usize {
        self.clip_len * self.input_channels
    }

    /// Spatial size `(H, W)` of the feature map.
    pub fn feature_dims(&self) -> (usize, usize) {
        (self.height / self.feature_stride, self.width / self.feature_stride)
    }

    /// Strides of the five encoder layers: 2 while downsampling remains,
    /// 1 afterwards.
    pub fn encoder_strides(&self) -> [usize; ENCODER_LAYERS] {
        let halvings = self.feature_stride.trailing_zeros() as usize;
        std::array::from_fn(|i| if i < halvings { 2 } else { 1 })
    }

    pub fn consistency_terms(&self) -> ConsistencyTerms {
        ConsistencyTerms {
            lambda: self.lambda,
            c1: self.use_c1,
            c2: self.use_c2,
            c3: self.use_c3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("memory_entries", self.memory_entries),
            ("clusters", self.clusters),
            ("factors", self.factors),
            ("clip_len", self.clip_len),
            ("height", self.height),
            ("width", self.width),
            ("input_channels", self.input_channels),
            ("cic_width", self.cic_width),
            ("clip_stride", self.clip_stride),
            ("kmeans_iters", self.kmeans_iters),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.encoder_channels.contains(&0) {
            return Err(Error::Config("encoder_channels must be positive".into()));
        }
        for (name, v) in [("lr", self.lr), ("lambda", self.lambda), ("margin", self.margin)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("mu_compact", self.mu_compact),
            ("mu_separate", self.mu_separate),
            ("mu_cluster", self.mu_cluster),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.memory_entries < 2 {
            return Err(Error::Config("memory_entries must be at least 2".into()));
        }
        if self.phase1_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "phase1_epochs {} exceeds total_epochs {}",
                self.phase1_epochs, self.total_epochs
            )));
        }
        let s = self.feature_stride;
        if !s.is_power_of_two() || s > 1 << ENCODER_LAYERS {
            return Err(Error::Config(format!(
                "feature_stride must be a power of two up to {}, got {s}",
                1 << ENCODER_LAYERS
            )));
        }
        if self.height % s != 0 || self.width % s != 0 {
            return Err(Error::Config(format!(
                "frame size {}x{} is not divisible by the feature stride {s}",
                self.height, self.width
            )));
        }
        let (h, w) = self.feature_dims();
        if h < 2 || w < 2 {
            return Err(Error::Config(format!("feature map {h}x{w} is smaller than 2x2")));
        }
        if self.factors < 2 || self.factors > h * w * self.channels() / 4 {
            return Err(Error::Config(format!(
                "factors must lie in [2, {}], got {}",
                h * w * self.channels() / 4,
                self.factors
            )));
        }
        if !self.pooling.average && !self.pooling.max {
            return Err(Error::Config("at least one pooling branch must be enabled".into()));
        }
        Ok(())
    }

    /// `(key, value)` pairs, profile first. Parsing the result reproduces
    /// `self`.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let b = |v: bool| v.to_string();
        let ch = self.encoder_channels.map(|c| c.to_string()).join(",");
        vec![
            ("profile", self.profile.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("lambda", self.lambda.to_string()),
            ("memory_entries", self.memory_entries.to_string()),
            ("clusters", self.clusters.to_string()),
            ("factors", self.factors.to_string()),
            ("clip_len", self.clip_len.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("input_channels", self.input_channels.to_string()),
            ("encoder_channels", ch),
            ("feature_stride", self.feature_stride.to_string()),
            ("final_relu", b(self.final_relu)),
            ("cic_width", self.cic_width.to_string()),
            ("phase1_epochs", self.phase1_epochs.to_string()),
            ("total_epochs", self.total_epochs.to_string()),
            ("mu_compact", self.mu_compact.to_string()),
            ("mu_separate", self.mu_separate.to_string()),
            ("mu_cluster", self.mu_cluster.to_string()),
            ("margin", self.margin.to_string()),
            ("seed", self.seed.to_string()),
            ("clip_stride", self.clip_stride.to_string()),
            ("batching", self.batching.to_string()),
            ("kmeans_iters", self.kmeans_iters.to_string()),
            ("use_avg_pool", b(self.pooling.average)),
            ("use_max_pool", b(self.pooling.max)),
            ("use_c1", b(self.use_c1)),
            ("use_c2", b(self.use_c2)),
            ("use_c3", b(self.use_c3)),
            ("use_cluster", b(self.use_cluster)),
        ]
    }

    /// Whether `key` names a field.
    pub fn knows(key: &str) -> bool {
        TrainConfig::profile(Profile::Tiny)
            .to_pairs()
            .iter()
            .any(|(k, _)| *k == key)
    }

    /// Sets one field from its textual form. `profile` resets every field
    /// to that preset.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "profile" => *self = TrainConfig::profile(value.parse()?),
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "memory_entries" => self.memory_entries = parse(key, value)?,
            "clusters" => self.clusters = parse(key, value)?,
            "factors" => self.factors = parse(key, value)?,
            "clip_len" => self.clip_len = parse(key, value)?,
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "input_channels" => self.input_channels = parse(key, value)?,
            "encoder_channels" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| parse(key, p.trim()))
                    .collect::<Result<_>>()?;
                self.encoder_channels = parts.try_into().map_err(|_| {
                    Error::Config(format!("encoder_channels needs {ENCODER_LAYERS} entries"))
                })?;
            }
            "feature_stride" => self.feature_stride = parse(key, value)?,
            "final_relu" => self.final_relu = parse(key, value)?,
            "cic_width" => self.cic_width = parse(key, value)?,
            "phase1_epochs" => self.phase1_epochs = parse(key, value)?,
            "total_epochs" => self.total_epochs = parse(key, value)?,
            "mu_compact" => self.mu_compact = parse(key, value)?,
            "mu_separate" => self.mu_separate = parse(key, value)?,
            "mu_cluster" => self.mu_cluster = parse(key, value)?,
            "margin" => self.margin = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "clip_stride" => self.clip_stride = parse(key, value)?,
            "batching" => self.batching = value.parse()?,
            "kmeans_iters" => self.kmeans_iters = parse(key, value)?,
            "use_avg_pool" => self.pooling.average = parse(key, value)?,
            "use_max_pool" => self.pooling.max = parse(key, value)?,
            "use_c1" => self.use_c1 = parse(key, value)?,
            "use_c2" => self.use_c2 = parse(key, value)?,
            "use_c3" => self.use_c3 = parse(key, value)?,
            "use_cluster" => self.use_cluster = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Parses `key=value` lines; `#` starts a comment. A `profile` line is
    /// applied before every other key regardless of position.
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut cfg = TrainConfig::profile(Profile::Ped2Like);
        if let Some((_, p)) = pairs.iter().find(|(k, _)| k == "profile") {
            cfg.set("profile", p)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "profile") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

/// Splits `key=value` lines, skipping blanks and `#` comments. Duplicate
/// keys are rejected.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
        let k = k.trim().to_string();
        if out.iter().any(|(seen, _)| *seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate_and_round_trip() {
        for p in Profile::ALL {
            let cfg = TrainConfig::profile(p);
            cfg.validate().unwrap();
            let back = TrainConfig::from_text(&cfg.to_text()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.to_text(), cfg.to_text());
        }
    }

    #[test]
    fn lambda_per_profile() {
        let l = |p| TrainConfig::profile(p).lambda;
        assert_eq!(l(Profile::Ped2Like), 10.0);
        assert_eq!(l(Profile::AvenueLike), 18.0);
        assert_eq!(l(Profile::ShanghaitechLike), 20.0);
    }

    #[test]
    fn strides_follow_feature_stride() {
        let cfg = TrainConfig::profile(Profile::Ped2Like);
        assert_eq!(cfg.encoder_strides(), [2; 5]);
        assert_eq!(cfg.feature_dims(), (7, 7));
        let synth = TrainConfig::profile(Profile::Synth);
        assert_eq!(synth.encoder_strides(), [2, 2, 2, 1, 1]);
        assert_eq!(synth.feature_dims(), (4, 4));
    }

    #[test]
    fn rejects_bad_configs() {
        let base = TrainConfig::profile(Profile::Synth);
        let bad = [
            TrainConfig { height: 36, ..base.clone() },
            TrainConfig { feature_stride: 6, ..base.clone() },
            TrainConfig { phase1_epochs: 50, ..base.clone() },
            TrainConfig { batch_size: 1, ..base.clone() },
            TrainConfig { lr: 0.0, ..base.clone() },
            TrainConfig { factors: 1000, ..base.clone() },
            TrainConfig { height: 8, width: 8, ..base.clone() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
        assert!(TrainConfig::from_text("profile=synth\nbogus=1\n").is_err());
        assert!(TrainConfig::from_text("profile=synth\nlr=1\nlr=2\n").is_err());
        assert!(TrainConfig::from_text("lr=abc").is_err());
    }

    #[test]
    fn profile_applies_before_overrides() {
        let cfg = TrainConfig::from_text("lambda = 3 # comment\nprofile=synth\n").unwrap();
        assert_eq!(cfg.profile, Profile::Synth);
        assert_eq!(cfg.lambda, 3.0);
        assert!(TrainConfig::knows("use_c1"));
        assert!(!TrainConfig::knows("out"));
    }
}
