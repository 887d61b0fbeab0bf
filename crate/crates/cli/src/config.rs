//! Run configuration: defaults, then a `key=value` file, then flags.

use std::fs;
use std::path::Path;
use std::time::Duration;

use scancontext::descriptor::{DescriptorKind, DescriptorParams};
use scancontext::eval::{BenchmarkConfig, GroundTruthFrame, TauSweep, DEFAULT_RADIUS, DEFAULT_SPACING};
use scancontext::{Augmentation, DatabaseConfig, Error, RebuildPolicy, Result};

/// Every tunable, each unset until a file or flag provides it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub kind: Option<DescriptorKind>,
    pub augment: Option<bool>,
    pub tau: Option<f64>,
    pub k: Option<usize>,
    pub half_width: Option<usize>,
    pub spacing: Option<f64>,
    pub radius: Option<f64>,
    pub exclude: Option<u64>,
    /// `Some(None)` disables downsampling.
    pub leaf: Option<Option<f64>>,
    pub rebuild_every: Option<usize>,
    pub rebuild_secs: Option<f64>,
    pub tau_min: Option<f64>,
    pub tau_max: Option<f64>,
    pub tau_steps: Option<usize>,
    pub frame: Option<GroundTruthFrame>,
    pub n_r: Option<usize>,
    pub n_a: Option<usize>,
    pub r_min: Option<f64>,
    pub r_max: Option<f64>,
    pub a_min: Option<f64>,
    pub a_max: Option<f64>,
    pub height_offset: Option<f64>,
}

fn invalid(msg: String) -> Error {
    Error::InvalidParam(msg)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| invalid(format!("invalid value {value:?} for {key}")))
}

pub fn parse_kind(s: &str) -> Result<DescriptorKind> {
    match s {
        "polar" | "pc" => Ok(DescriptorKind::Polar),
        "cart" | "cartesian" | "cc" => Ok(DescriptorKind::Cartesian),
        _ => Err(invalid(format!("unknown descriptor kind {s:?}"))),
    }
}

pub fn parse_switch(s: &str) -> Result<bool> {
    match s {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(invalid(format!("expected on or off, got {s:?}"))),
    }
}

pub fn parse_frame(s: &str) -> Result<GroundTruthFrame> {
    match s {
        "camera" | "kitti" => Ok(GroundTruthFrame::Camera),
        "lidar" => Ok(GroundTruthFrame::Lidar),
        _ => Err(invalid(format!("unknown pose frame {s:?}"))),
    }
}

impl Overrides {
    /// Sets one key. Dashes and underscores are interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        match key.as_str() {
            "kind" => self.kind = Some(parse_kind(v)?),
            "augment" => self.augment = Some(parse_switch(v)?),
            "tau" => self.tau = Some(parse(&key, v)?),
            "k" => self.k = Some(parse(&key, v)?),
            "half_width" => self.half_width = Some(parse(&key, v)?),
            "spacing" => self.spacing = Some(parse(&key, v)?),
            "radius" => self.radius = Some(parse(&key, v)?),
            "exclude" | "exclusion_window" => self.exclude = Some(parse(&key, v)?),
            "leaf" => {
                self.leaf = Some(match v {
                    "none" | "off" | "0" => None,
                    _ => Some(parse(&key, v)?),
                })
            }
            "rebuild_every" => self.rebuild_every = Some(parse(&key, v)?),
            "rebuild_secs" => self.rebuild_secs = Some(parse(&key, v)?),
            "tau_min" => self.tau_min = Some(parse(&key, v)?),
            "tau_max" => self.tau_max = Some(parse(&key, v)?),
            "tau_steps" => self.tau_steps = Some(parse(&key, v)?),
            "frame" => self.frame = Some(parse_frame(v)?),
            "n_r" => self.n_r = Some(parse(&key, v)?),
            "n_a" => self.n_a = Some(parse(&key, v)?),
            "r_min" => self.r_min = Some(parse(&key, v)?),
            "r_max" => self.r_max = Some(parse(&key, v)?),
            "a_min" => self.a_min = Some(parse(&key, v)?),
            "a_max" => self.a_max = Some(parse(&key, v)?),
            "height_offset" => self.height_offset = Some(parse(&key, v)?),
            _ => return Err(invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_file_text(text: &str) -> Result<Self> {
        let mut o = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("config line {}: expected key=value", i + 1)))?;
            o.set(key, value)
                .map_err(|e| invalid(format!("config line {}: {}", i + 1, e.to_string().trim_start_matches("invalid parameter: "))))?;
        }
        Ok(o)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::IoPath { path: path.into(), source: e })?;
        Self::parse_file_text(&text)
    }

    /// Fields set in `other` win.
    pub fn merge(mut self, other: &Overrides) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f; } )* };
        }
        take!(
            kind, augment, tau, k, half_width, spacing, radius, exclude, leaf, rebuild_every, rebuild_secs,
            tau_min, tau_max, tau_steps, frame, n_r, n_a, r_min, r_max, a_min, a_max, height_offset
        );
        self
    }

    pub fn params(&self) -> DescriptorParams {
        let mut p = DescriptorParams::default_for(self.kind.unwrap_or(DescriptorKind::Polar));
        if let Some(v) = self.n_r {
            p.n_r = v;
        }
        if let Some(v) = self.n_a {
            p.n_a = v;
        }
        p.r_range = (self.r_min.unwrap_or(p.r_range.0), self.r_max.unwrap_or(p.r_range.1));
        p.a_range = (self.a_min.unwrap_or(p.a_range.0), self.a_max.unwrap_or(p.a_range.1));
        if let Some(v) = self.height_offset {
            p.height_offset = v;
        }
        p
    }

    pub fn database(&self) -> Result<DatabaseConfig> {
        let params = self.params();
        let mut c = DatabaseConfig::new(params.kind);
        c.params = params;
        if self.augment == Some(true) {
            c.augmentation = Augmentation::default_for(params.kind);
        }
        self.apply_query(&mut c);
        if let Some(e) = self.exclude {
            c.exclusion_window = e;
        }
        if let Some(leaf) = self.leaf {
            c.voxel_leaf = leaf;
        }
        match (self.rebuild_every, self.rebuild_secs) {
            (Some(_), Some(_)) => return Err(invalid("set rebuild_every or rebuild_secs, not both".into())),
            (Some(n), None) => c.rebuild = RebuildPolicy::EveryInsertions(n),
            (None, Some(s)) => {
                let d = Duration::try_from_secs_f64(s).map_err(|_| invalid(format!("invalid rebuild_secs {s}")))?;
                c.rebuild = RebuildPolicy::Interval(d);
            }
            (None, None) => {}
        }
        c.validate()?;
        Ok(c)
    }

    /// Query-time knobs only: `k`, `tau` and `half_width`.
    pub fn apply_query(&self, c: &mut DatabaseConfig) {
        if let Some(k) = self.k {
            c.k = k;
        }
        if let Some(t) = self.tau {
            c.tau = t;
        }
        if let Some(h) = self.half_width {
            c.half_width = h;
        }
    }

    pub fn benchmark(&self) -> Result<BenchmarkConfig> {
        let mut b = BenchmarkConfig::new(self.database()?);
        b.spacing = self.spacing.unwrap_or(DEFAULT_SPACING);
        b.radius = self.radius.unwrap_or(DEFAULT_RADIUS);
        let d = TauSweep::default();
        b.sweep = TauSweep {
            min: self.tau_min.unwrap_or(d.min),
            max: self.tau_max.unwrap_or(d.max),
            steps: self.tau_steps.unwrap_or(d.steps),
        };
        b.frame = self.frame.unwrap_or_default();
        b.validate()?;
        Ok(b)
    }
}
