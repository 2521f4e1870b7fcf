//! Run configuration files.
//!
//! One `key = value` per line; `#` starts a comment; blank lines are
//! ignored. Unknown or repeated keys are errors. Keys:
//!
//! | key | value |
//! |---|---|
//! | `alpha`, `gamma`, `clip`, `source_lr`, `eval_iou` | number |
//! | `batch_size`, `proposals`, `critic_steps` | integer |
//! | `source_steps`, `phase1_steps`, `phase2_steps`, `seed` | integer |
//! | `betas_align`, `betas_det` | two numbers separated by a comma |
//! | `critic_variant` | `desk` or `full` |
//! | `wall_clock` | `true` or `false` |
//! | `scenario` | `fog-v1` or `style-v1` |
//! | `source_data`, `target_data`, `test_data`, `output_dir` | path |
//!
//! Missing keys take their defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::alignment::AlignmentConfig;
use crate::critic::CriticVariant;
use crate::data::Scenario;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub alignment: AlignmentConfig,
    pub scenario: Scenario,
    pub source_data: Option<PathBuf>,
    pub target_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub eval_iou: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            alignment: AlignmentConfig::default(),
            scenario: Scenario::Fog,
            source_data: None,
            target_data: None,
            test_data: None,
            output_dir: None,
            eval_iou: 0.5,
        }
    }
}

fn variant_name(v: CriticVariant) -> &'static str {
    match v {
        CriticVariant::Desk => "desk",
        CriticVariant::Full => "full",
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn pair(key: &str, v: &str) -> Result<(f64, f64)> {
    let mut it = v.split(',').map(str::trim);
    match (it.next(), it.next(), it.next()) {
        (Some(a), Some(b), None) => Ok((num(key, a)?, num(key, b)?)),
        _ => Err(Error::Config(format!("{key}: expected two comma-separated numbers, got {v:?}"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let (key, v) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", no + 1)));
            }
            let a = &mut c.alignment;
            match key {
                "alpha" => a.alpha = num(key, v)?,
                "gamma" => a.gamma = num(key, v)?,
                "clip" => a.clip = num(key, v)?,
                "batch_size" => a.batch_size = num(key, v)?,
                "proposals" => a.proposals = num(key, v)?,
                "critic_steps" => a.critic_steps = num(key, v)?,
                "betas_align" => a.betas_align = pair(key, v)?,
                "betas_det" => a.betas_det = pair(key, v)?,
                "source_lr" => a.source_lr = num(key, v)?,
                "source_steps" => a.source_steps = num(key, v)?,
                "phase1_steps" => a.phase1_steps = num(key, v)?,
                "phase2_steps" => a.phase2_steps = num(key, v)?,
                "critic_variant" => {
                    a.critic_variant = v.parse().map_err(|e: Error| Error::Config(format!("{key}: {e}")))?
                }
                "seed" => a.seed = num(key, v)?,
                "wall_clock" => a.wall_clock = num(key, v)?,
                "scenario" => c.scenario = v.parse().map_err(|e: Error| Error::Config(format!("{key}: {e}")))?,
                "source_data" => c.source_data = Some(PathBuf::from(v)),
                "target_data" => c.target_data = Some(PathBuf::from(v)),
                "test_data" => c.test_data = Some(PathBuf::from(v)),
                "output_dir" => c.output_dir = Some(PathBuf::from(v)),
                "eval_iou" => c.eval_iou = num(key, v)?,
                other => return Err(Error::Config(format!("line {}: unknown key {other:?}", no + 1))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.alignment.validate()?;
        if !(self.eval_iou > 0.0 && self.eval_iou <= 1.0) {
            return Err(Error::Config(format!("eval_iou {} outside (0, 1]", self.eval_iou)));
        }
        Ok(())
    }

    /// Text form accepted by [`RunConfig::parse`]; floats are written in
    /// shortest round-trip form.
    pub fn to_text(&self) -> String {
        let a = &self.alignment;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("alpha", a.alpha.to_string());
        kv("gamma", a.gamma.to_string());
        kv("clip", a.clip.to_string());
        kv("batch_size", a.batch_size.to_string());
        kv("proposals", a.proposals.to_string());
        kv("critic_steps", a.critic_steps.to_string());
        kv("betas_align", format!("{}, {}", a.betas_align.0, a.betas_align.1));
        kv("betas_det", format!("{}, {}", a.betas_det.0, a.betas_det.1));
        kv("source_lr", a.source_lr.to_string());
        kv("source_steps", a.source_steps.to_string());
        kv("phase1_steps", a.phase1_steps.to_string());
        kv("phase2_steps", a.phase2_steps.to_string());
        kv("critic_variant", variant_name(a.critic_variant).to_string());
        kv("seed", a.seed.to_string());
        kv("wall_clock", a.wall_clock.to_string());
        kv("scenario", self.scenario.preset_name().to_string());
        for (k, p) in [
            ("source_data", &self.source_data),
            ("target_data", &self.target_data),
            ("test_data", &self.test_data),
            ("output_dir", &self.output_dir),
        ] {
            if let Some(p) = p {
                kv(k, p.display().to_string());
            }
        }
        kv("eval_iou", self.eval_iou.to_string());
        s
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::parse(&text)
}

pub fn save_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    std::fs::write(path, cfg.to_text()).map_err(|e| Error::io(path, e))
}
