//! Run configuration: dimensions, optimiser, ablation switches, task, seed and
//! dataset generation. Stored as `key = value` lines; every key doubles as a
//! command-line flag of the same name.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::encoder::EncoderConfig;
use crate::error::{Error, PathContext, Result};
use crate::refiner::DecoderConfig;
use crate::relation::RelationConfig;
use crate::synth::GenConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Task {
    /// Ground-truth boxes and labels given; predicates predicted.
    Predcls,
    /// Ground-truth boxes given; labels and predicates predicted.
    #[default]
    Sgcls,
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "predcls" => Ok(Task::Predcls),
            "sgcls" => Ok(Task::Sgcls),
            other => Err(Error::Config(format!("unknown task `{other}` (expected predcls or sgcls)"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Predcls => "predcls",
            Task::Sgcls => "sgcls",
        })
    }
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
plain_value!(usize, u64, bool);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse::<f64>().map_err(|e| e.to_string())
    }
    fn render(&self) -> String {
        // Debug keeps a round-trippable representation (always with a point)
        format!("{self:?}")
    }
}

impl ConfigValue for Task {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: Error| e.to_string())
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $key:ident : $t:ty = $default:expr;)*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $key: $t,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($key: $default,)* }
            }
        }

        impl RunConfig {
            /// Every key, in file order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key {
                    $(stringify!($key) => {
                        self.$key = <$t as ConfigValue>::parse_value(value)
                            .map_err(|e| Error::Config(format!("{key} = {value}: {e}")))?;
                    })*
                    _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }

            /// Text form of one key's value.
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $(stringify!($key) => Some(self.$key.render()),)*
                    _ => None,
                }
            }

            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{} = {}\n", stringify!($key), self.$key.render()));)*
                out
            }
        }
    };
}

run_config! {
    /// Feature width `D_f` of object and union features.
    d_f: usize = 32;
    /// Number of object categories `D_l`.
    d_l: usize = 12;
    /// Number of real predicates `D_r` (background is extra).
    d_r: usize = 6;
    d_h: usize = 32;
    d_gcn: usize = 32;
    /// Decoder label embedding width.
    d_emb: usize = 16;
    /// Stage 2 label embedding width.
    d_emb2: usize = 16;
    d_dec: usize = 32;
    d_h2: usize = 32;
    d_gcn2: usize = 32;
    layers1: usize = 2;
    layers2: usize = 4;
    gcn_depth1: usize = 1;
    gcn_depth2: usize = 1;
    lr: f64 = 2e-2;
    momentum: f64 = 0.9;
    batch_size: usize = 8;
    epochs: usize = 200;
    /// Global gradient norm limit per batch; 0 disables clipping.
    clip_norm: f64 = 5.0;
    /// Additive smoothing of the frequency tables.
    freq_eps: f64 = 1e-3;
    use_bilstm1: bool = true;
    use_bilstm2: bool = true;
    use_gcn1: bool = true;
    use_gcn2: bool = true;
    use_r2_loss: bool = true;
    use_refiner: bool = true;
    use_prior_labels: bool = true;
    task: Task = Task::Sgcls;
    seed: u64 = 0;
    num_scenes: usize = 100;
    min_objects: usize = 4;
    max_objects: usize = 10;
    scene_width: f64 = 640.0;
    scene_height: f64 = 480.0;
    noise: f64 = 0.05;
    label_corruption: f64 = 0.3;
    prior_confidence: f64 = 0.6;
}

/// Ablation flags and the switch each one turns off.
pub const ABLATIONS: &[(&str, &str)] = &[
    ("ablate-bilstm1", "use_bilstm1"),
    ("ablate-bilstm2", "use_bilstm2"),
    ("ablate-gcn1", "use_gcn1"),
    ("ablate-gcn2", "use_gcn2"),
    ("ablate-r2-loss", "use_r2_loss"),
    ("ablate-refiner", "use_refiner"),
    ("ablate-prior-labels", "use_prior_labels"),
];

impl RunConfig {
    /// Parses `key = value` lines. Blank lines and `#` comments are skipped;
    /// unknown keys are errors unless listed in `extra`, in which case they
    /// are returned.
    pub fn parse_with_extra(text: &str, extra: &[&str]) -> Result<(Self, Vec<(String, String)>)> {
        let mut cfg = RunConfig::default();
        let mut rest = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let key = key.trim();
            if extra.contains(&key) {
                rest.push((key.to_string(), value.trim().to_string()));
                continue;
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", no + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok((cfg, rest))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(Self::parse_with_extra(text, &[])?.0)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).at(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_f", self.d_f),
            ("d_l", self.d_l),
            ("d_r", self.d_r),
            ("d_h", self.d_h),
            ("d_gcn", self.d_gcn),
            ("d_emb", self.d_emb),
            ("d_emb2", self.d_emb2),
            ("d_dec", self.d_dec),
            ("d_h2", self.d_h2),
            ("d_gcn2", self.d_gcn2),
            ("layers1", self.layers1),
            ("layers2", self.layers2),
            ("gcn_depth1", self.gcn_depth1),
            ("gcn_depth2", self.gcn_depth2),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.freq_eps > 0.0) {
            return Err(Error::Config("freq_eps must be positive".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config("clip_norm must be non-negative".into()));
        }
        Ok(())
    }

    pub fn stage1(&self) -> EncoderConfig {
        EncoderConfig {
            input_dim: self.d_f,
            hidden_dim: self.d_h,
            gcn_dim: self.d_gcn,
            feature_dim: self.d_f,
            lstm_layers: self.layers1,
            gcn_depth: self.gcn_depth1,
            use_bilstm: self.use_bilstm1,
            use_gcn: self.use_gcn1,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            input_dim: self.stage1().output_dim(),
            embed_dim: self.d_emb,
            hidden_dim: self.d_dec,
            label_count: self.d_l,
            use_prior: self.use_prior_labels,
        }
    }

    pub fn stage2(&self) -> EncoderConfig {
        EncoderConfig {
            input_dim: self.stage1().output_dim() + self.d_emb2,
            hidden_dim: self.d_h2,
            gcn_dim: self.d_gcn2,
            feature_dim: self.d_f,
            lstm_layers: self.layers2,
            gcn_depth: self.gcn_depth2,
            use_bilstm: self.use_bilstm2,
            use_gcn: self.use_gcn2,
        }
    }

    pub fn relation(&self) -> RelationConfig {
        RelationConfig {
            label_count: self.d_l,
            predicate_count: self.d_r,
            feature_dim: self.d_f,
            embed_dim: self.d_emb2,
            context_dim: self.stage2().output_dim(),
        }
    }

    pub fn generator(&self) -> GenConfig {
        GenConfig {
            label_count: self.d_l,
            predicate_count: self.d_r,
            feature_dim: self.d_f,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            width: self.scene_width,
            height: self.scene_height,
            noise: self.noise,
            label_corruption: self.label_corruption,
            prior_confidence: self.prior_confidence,
            ..GenConfig::default()
        }
    }
}
