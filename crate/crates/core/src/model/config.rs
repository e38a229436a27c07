use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::encoder::EncoderKind;
use crate::error::{Error, Result};
use crate::partition::{BeamGrid, DepthAxis};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HeadKind {
    #[default]
    Classify,
    Segment,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Classify => "classify",
            HeadKind::Segment => "segment",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "classify" | "classification" => Ok(HeadKind::Classify),
            "segment" | "segmentation" => Ok(HeadKind::Segment),
            other => Err(Error::Config(format!("unknown head '{other}'"))),
        }
    }
}

/// Architecture of one RCNet. Serialized as `key = value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct RcNetConfig {
    pub r: usize,
    pub s: usize,
    /// `(x_min, x_max, y_min, y_max)` of the beam lattice.
    pub bounds: (f64, f64, f64, f64),
    pub depth_axis: DepthAxis,
    /// Encoder width ℓ.
    pub hidden: usize,
    /// Point width d.
    pub dim: usize,
    /// K classes or M part labels.
    pub num_labels: usize,
    pub encoder: EncoderKind,
    pub head: HeadKind,
    /// Whether the input transformer is present.
    pub stn: bool,
    pub stn_point_widths: Vec<usize>,
    pub stn_fc_widths: Vec<usize>,
    pub conv_widths: Vec<usize>,
    pub fc_widths: Vec<usize>,
    pub seg_point_widths: Vec<usize>,
    pub seg_fc_widths: Vec<usize>,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for RcNetConfig {
    fn default() -> Self {
        RcNetConfig {
            r: 32,
            s: 32,
            bounds: (-1.0, 1.0, -1.0, 1.0),
            depth_axis: DepthAxis::Z,
            hidden: 64,
            dim: 3,
            num_labels: 40,
            encoder: EncoderKind::Gru,
            head: HeadKind::Classify,
            stn: true,
            stn_point_widths: vec![64, 128, 1024],
            stn_fc_widths: vec![512, 256],
            conv_widths: vec![128, 256, 512, 1024],
            fc_widths: vec![512, 256],
            seg_point_widths: vec![64, 128],
            seg_fc_widths: vec![512, 256],
            seed: 0,
        }
    }
}

pub const CONFIG_KEYS: [&str; 17] = [
    "r",
    "s",
    "bounds",
    "depth_axis",
    "hidden",
    "dim",
    "num_labels",
    "encoder",
    "head",
    "stn",
    "stn_point_widths",
    "stn_fc_widths",
    "conv_widths",
    "fc_widths",
    "seg_point_widths",
    "seg_fc_widths",
    "seed",
];

fn parse_num<N: FromStr>(key: &str, v: &str) -> Result<N> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{}'", v.trim())))
}

pub(crate) fn parse_list<N: FromStr>(key: &str, v: &str) -> Result<Vec<N>> {
    v.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| parse_num(key, t))
        .collect()
}

pub(crate) fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected a boolean, got '{other}'"))),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Splits `key = value` text into pairs, skipping blank lines and `#`
/// comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected 'key = value'", n + 1)));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RcNetConfig {
    /// Classification preset (ℓ = 64).
    pub fn classification(num_classes: usize) -> Self {
        RcNetConfig {
            num_labels: num_classes,
            ..Self::default()
        }
    }

    /// Segmentation preset (ℓ = 128).
    pub fn segmentation(num_parts: usize) -> Self {
        RcNetConfig {
            num_labels: num_parts,
            hidden: 128,
            head: HeadKind::Segment,
            ..Self::default()
        }
    }

    /// Narrow widths that train in minutes on one core.
    pub fn desk(mut self) -> Self {
        self.r = 16;
        self.s = 16;
        self.hidden = 32;
        self.stn_point_widths = vec![32, 64];
        self.stn_fc_widths = vec![32];
        self.conv_widths = vec![32, 64, 128];
        self.fc_widths = vec![64];
        self.seg_point_widths = vec![32, 64];
        self.seg_fc_widths = vec![128, 64];
        self
    }

    pub fn grid(&self) -> Result<BeamGrid> {
        BeamGrid::with_bounds(self.r, self.s, self.bounds, self.depth_axis)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        if self.dim < 3 {
            return Err(Error::Config(format!("dim {} < 3", self.dim)));
        }
        if self.hidden == 0 || self.num_labels == 0 {
            return Err(Error::Config("hidden and num_labels must be positive".into()));
        }
        if self.conv_widths.is_empty() {
            return Err(Error::Config("conv_widths must not be empty".into()));
        }
        if self.stn && self.stn_point_widths.is_empty() {
            return Err(Error::Config("stn_point_widths must not be empty".into()));
        }
        let lists = [
            &self.stn_point_widths,
            &self.stn_fc_widths,
            &self.conv_widths,
            &self.fc_widths,
            &self.seg_point_widths,
            &self.seg_fc_widths,
        ];
        if lists.iter().any(|l| l.contains(&0)) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "r" => self.r = parse_num(key, value)?,
            "s" => self.s = parse_num(key, value)?,
            "bounds" => {
                let b: Vec<f64> = parse_list(key, value)?;
                let [x0, x1, y0, y1] = b[..] else {
                    return Err(Error::Config("bounds needs four numbers".into()));
                };
                self.bounds = (x0, x1, y0, y1);
            }
            "depth_axis" => self.depth_axis = value.parse()?,
            "hidden" => self.hidden = parse_num(key, value)?,
            "dim" => self.dim = parse_num(key, value)?,
            "num_labels" => self.num_labels = parse_num(key, value)?,
            "encoder" => self.encoder = value.parse()?,
            "head" => self.head = value.parse()?,
            "stn" => self.stn = parse_bool(key, value)?,
            "stn_point_widths" => self.stn_point_widths = parse_list(key, value)?,
            "stn_fc_widths" => self.stn_fc_widths = parse_list(key, value)?,
            "conv_widths" => self.conv_widths = parse_list(key, value)?,
            "fc_widths" => self.fc_widths = parse_list(key, value)?,
            "seg_point_widths" => self.seg_point_widths = parse_list(key, value)?,
            "seg_fc_widths" => self.seg_fc_widths = parse_list(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown model key '{key}'"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let (x0, x1, y0, y1) = self.bounds;
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        line("r", self.r.to_string());
        line("s", self.s.to_string());
        line("bounds", format!("{x0},{x1},{y0},{y1}"));
        line("depth_axis", self.depth_axis.to_string());
        line("hidden", self.hidden.to_string());
        line("dim", self.dim.to_string());
        line("num_labels", self.num_labels.to_string());
        line("encoder", self.encoder.to_string());
        line("head", self.head.to_string());
        line("stn", self.stn.to_string());
        line("stn_point_widths", join(&self.stn_point_widths));
        line("stn_fc_widths", join(&self.stn_fc_widths));
        line("conv_widths", join(&self.conv_widths));
        line("fc_widths", join(&self.fc_widths));
        line("seg_point_widths", join(&self.seg_point_widths));
        line("seg_fc_widths", join(&self.seg_fc_widths));
        line("seed", self.seed.to_string());
        out
    }

    /// Parses `to_text` output. Keys not given keep their defaults; unknown
    /// keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RcNetConfig::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
