//! Flat `key = value` configuration files.
//!
//! Lines starting with `#` are comments. Keys are dotted (`model.c_y`,
//! `gop.quality_coeffs`); lists are comma separated. Unknown keys are an
//! error so that typos do not silently fall back to defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CodecError, Result};

/// Base Lagrange multipliers of the four rate points.
pub const BASE_LAMBDAS: [f64; 4] = [85.0, 170.0, 380.0, 840.0];

#[derive(Clone, Debug, Default)]
pub struct KvFile {
    entries: BTreeMap<String, String>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CodecError::Config(format!("line {}: expected key = value", n + 1)))?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(KvFile { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| CodecError::Config(format!("{key}: cannot parse {v:?}"))),
        }
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| CodecError::Config(format!("{key}: cannot parse {s:?}")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }
}

/// Channel widths of every subnetwork.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Hidden width of the pyramid flow estimator.
    pub flow_ch: usize,
    /// Motion codec width at the H/4 fusion stage.
    pub mv_mid: usize,
    /// Motion latent channels.
    pub c_m: usize,
    /// Motion-difference context channels.
    pub c_mc: usize,
    /// Reference feature and temporal context channels.
    pub c_ref: usize,
    /// Contextual codec hidden width.
    pub y_mid: usize,
    /// Contextual latent channels.
    pub c_y: usize,
    /// Hyper latent channels.
    pub c_z: usize,
    /// Width of the entropy parameter heads.
    pub head_ch: usize,
    /// Intra codec hidden width and latent channels.
    pub i_mid: usize,
    pub c_i: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            flow_ch: 32,
            mv_mid: 64,
            c_m: 64,
            c_mc: 64,
            c_ref: 48,
            y_mid: 96,
            c_y: 96,
            c_z: 64,
            head_ch: 96,
            i_mid: 64,
            c_i: 96,
        }
    }
}

impl ModelConfig {
    /// Small preset used for quick training runs and tests.
    pub fn tiny() -> Self {
        ModelConfig {
            flow_ch: 12,
            mv_mid: 16,
            c_m: 16,
            c_mc: 8,
            c_ref: 12,
            y_mid: 24,
            c_y: 24,
            c_z: 12,
            head_ch: 24,
            i_mid: 24,
            c_i: 24,
        }
    }

    fn apply(&mut self, kv: &KvFile) -> Result<()> {
        if let Some(p) = kv.raw("model.preset") {
            *self = match p {
                "default" => ModelConfig::default(),
                "tiny" => ModelConfig::tiny(),
                other => return Err(CodecError::Config(format!("unknown model preset {other:?}"))),
            };
        }
        let fields: [(&str, &mut usize); 11] = [
            ("model.flow_ch", &mut self.flow_ch),
            ("model.mv_mid", &mut self.mv_mid),
            ("model.c_m", &mut self.c_m),
            ("model.c_mc", &mut self.c_mc),
            ("model.c_ref", &mut self.c_ref),
            ("model.y_mid", &mut self.y_mid),
            ("model.c_y", &mut self.c_y),
            ("model.c_z", &mut self.c_z),
            ("model.head_ch", &mut self.head_ch),
            ("model.i_mid", &mut self.i_mid),
            ("model.c_i", &mut self.c_i),
        ];
        for (key, slot) in fields {
            if let Some(v) = kv.get::<usize>(key)? {
                if v == 0 {
                    return Err(CodecError::Config(format!("{key} must be positive")));
                }
                *slot = v;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GopConfig {
    pub intra_period: usize,
    pub gop_size: usize,
    /// Quality coefficients of B-frame layers 1..=5.
    pub quality_coeffs: [f64; 5],
}

pub const HIERARCHICAL_QUALITY_COEFFS: [f64; 5] = [1.4, 1.4, 0.7, 0.5, 0.5];

impl Default for GopConfig {
    fn default() -> Self {
        GopConfig {
            intra_period: 32,
            gop_size: 32,
            quality_coeffs: HIERARCHICAL_QUALITY_COEFFS,
        }
    }
}

impl GopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.intra_period == 0 || self.gop_size == 0 {
            return Err(CodecError::Config("intra_period and gop_size must be positive".into()));
        }
        if self.gop_size > self.intra_period {
            return Err(CodecError::Config(format!(
                "gop_size {} exceeds intra_period {}",
                self.gop_size, self.intra_period
            )));
        }
        if self.quality_coeffs.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(CodecError::Config("quality coefficients must be positive".into()));
        }
        Ok(())
    }

    fn apply(&mut self, kv: &KvFile) -> Result<()> {
        if let Some(v) = kv.get("gop.intra_period")? {
            self.intra_period = v;
        }
        if let Some(v) = kv.get("gop.gop_size")? {
            self.gop_size = v;
        }
        if let Some(v) = kv.get_list::<f64>("gop.quality_coeffs")? {
            self.quality_coeffs = v
                .try_into()
                .map_err(|_| CodecError::Config("gop.quality_coeffs needs 5 values".into()))?;
        }
        Ok(())
    }
}

/// Desk-scale training knobs. The reference epoch counts are multiplied by
/// `epoch_scale` and each epoch visits `clips_per_epoch` clips.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub width: usize,
    pub height: usize,
    pub clips_per_epoch: usize,
    pub epoch_scale: f64,
    pub lr_scale: f64,
    pub flow_pretrain_steps: usize,
    pub intra_pretrain_steps: usize,
    pub lambdas: [f64; 4],
    pub msssim_suffix: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            width: 64,
            height: 64,
            clips_per_epoch: 200,
            epoch_scale: 1.0,
            lr_scale: 1.0,
            flow_pretrain_steps: 2000,
            intra_pretrain_steps: 4000,
            lambdas: BASE_LAMBDAS,
            msssim_suffix: false,
        }
    }
}

impl TrainConfig {
    fn apply(&mut self, kv: &KvFile) -> Result<()> {
        if let Some(v) = kv.get("train.width")? {
            self.width = v;
        }
        if let Some(v) = kv.get("train.height")? {
            self.height = v;
        }
        if let Some(v) = kv.get("train.clips_per_epoch")? {
            self.clips_per_epoch = v;
        }
        if let Some(v) = kv.get("train.epoch_scale")? {
            self.epoch_scale = v;
        }
        if let Some(v) = kv.get("train.lr_scale")? {
            self.lr_scale = v;
        }
        if let Some(v) = kv.get("train.flow_pretrain_steps")? {
            self.flow_pretrain_steps = v;
        }
        if let Some(v) = kv.get("train.intra_pretrain_steps")? {
            self.intra_pretrain_steps = v;
        }
        if let Some(v) = kv.get_list::<f64>("train.lambdas")? {
            self.lambdas = v
                .try_into()
                .map_err(|_| CodecError::Config("train.lambdas needs 4 values".into()))?;
        }
        if let Some(v) = kv.get("train.msssim_suffix")? {
            self.msssim_suffix = v;
        }
        if self.width % 16 != 0 || self.height % 16 != 0 || self.width == 0 || self.height == 0 {
            return Err(CodecError::Config("training crops must be positive multiples of 16".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CodecConfig {
    pub model: ModelConfig,
    pub gop: GopConfig,
    pub train: TrainConfig,
    /// Path of a schedule file replacing the built-in schedule.
    pub schedule: Option<String>,
}

const KNOWN_PREFIXES: [&str; 3] = ["model.", "gop.", "train."];

impl CodecConfig {
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        for k in kv.keys() {
            if k != "schedule" && !KNOWN_PREFIXES.iter().any(|p| k.starts_with(p)) {
                return Err(CodecError::Config(format!("unknown key {k:?}")));
            }
        }
        let mut cfg = CodecConfig::default();
        cfg.model.apply(kv)?;
        cfg.gop.apply(kv)?;
        cfg.train.apply(kv)?;
        cfg.schedule = kv.raw("schedule").map(str::to_string);
        cfg.gop.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KvFile::load(path)?)
    }

    /// Serialises every field so that a saved file reproduces this config.
    pub fn to_kv_string(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = format!(
            "model.flow_ch = {}\nmodel.mv_mid = {}\nmodel.c_m = {}\nmodel.c_mc = {}\nmodel.c_ref = {}\n\
             model.y_mid = {}\nmodel.c_y = {}\nmodel.c_z = {}\nmodel.head_ch = {}\nmodel.i_mid = {}\nmodel.c_i = {}\n",
            m.flow_ch, m.mv_mid, m.c_m, m.c_mc, m.c_ref, m.y_mid, m.c_y, m.c_z, m.head_ch, m.i_mid, m.c_i
        );
        s += &format!(
            "gop.intra_period = {}\ngop.gop_size = {}\ngop.quality_coeffs = {}\n",
            self.gop.intra_period,
            self.gop.gop_size,
            join(&self.gop.quality_coeffs)
        );
        s += &format!(
            "train.width = {}\ntrain.height = {}\ntrain.clips_per_epoch = {}\ntrain.epoch_scale = {}\n\
             train.lr_scale = {}\ntrain.flow_pretrain_steps = {}\ntrain.intra_pretrain_steps = {}\n\
             train.lambdas = {}\ntrain.msssim_suffix = {}\n",
            t.width,
            t.height,
            t.clips_per_epoch,
            t.epoch_scale,
            t.lr_scale,
            t.flow_pretrain_steps,
            t.intra_pretrain_steps,
            join(&t.lambdas),
            t.msssim_suffix
        );
        if let Some(p) = &self.schedule {
            s += &format!("schedule = {p}\n");
        }
        s
    }
}

/// Compute device selected by `CODEC_DEVICE`. Only the CPU backend exists;
/// any other value is rejected rather than silently ignored.
pub fn device_from_env() -> Result<String> {
    match std::env::var("CODEC_DEVICE") {
        Err(_) => Ok("cpu".into()),
        Ok(v) if v.eq_ignore_ascii_case("cpu") || v.is_empty() => Ok("cpu".into()),
        Ok(v) => Err(CodecError::Config(format!(
            "CODEC_DEVICE={v:?} is not available; this build only supports cpu"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_through_text() {
        let mut cfg = CodecConfig::default();
        cfg.model = ModelConfig::tiny();
        cfg.gop.quality_coeffs = [1.0; 5];
        cfg.train.epoch_scale = 0.25;
        cfg.schedule = Some("sched.txt".into());
        let back = CodecConfig::from_kv(&KvFile::parse(&cfg.to_kv_string()).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(CodecConfig::from_kv(&KvFile::parse("modle.c_y = 3").unwrap()).is_err());
        assert!(CodecConfig::from_kv(&KvFile::parse("gop.quality_coeffs = 1,2").unwrap()).is_err());
        assert!(CodecConfig::from_kv(&KvFile::parse("gop.gop_size = 64").unwrap()).is_err());
        assert!(KvFile::parse("no equals sign").is_err());
    }

    #[test]
    fn comments_and_presets() {
        let kv = KvFile::parse("# hi\nmodel.preset = tiny # trailing\nmodel.c_y = 40\n").unwrap();
        let cfg = CodecConfig::from_kv(&kv).unwrap();
        assert_eq!(cfg.model.c_y, 40);
        assert_eq!(cfg.model.c_m, ModelConfig::tiny().c_m);
    }
}
