use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{NoiseKind, PhantomKind, PhantomSpec};
use crate::error::{Error, Result};
use crate::geometry::{make_desk_geometry, make_paper_geometry, subsample_views, FanBeamGeometry};
use crate::projector::FilterKind;
use crate::solvers::{CppdConfig, SplitBregmanConfig};
use crate::sugar::{SugarInit, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryPreset {
    /// Scaled-down geometry with the same field of view as the clinical scanner.
    #[default]
    Desk,
    /// Full-scale scanner, 512x512 images, `n_views` of its 946 views.
    Paper,
    /// Every field given explicitly in `geometry.custom`.
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub preset: GeometryPreset,
    pub image_n: usize,
    pub n_views: usize,
    pub arc_deg: f64,
    pub custom: Option<FanBeamGeometry>,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            preset: GeometryPreset::Desk,
            image_n: 128,
            n_views: 36,
            arc_deg: 151.875,
            custom: None,
        }
    }
}

impl GeometryConfig {
    pub fn build(&self) -> Result<FanBeamGeometry> {
        let g = match self.preset {
            GeometryPreset::Desk => make_desk_geometry(self.image_n, self.n_views, self.arc_deg)?,
            GeometryPreset::Paper => subsample_views(&make_paper_geometry(), self.n_views)?,
            GeometryPreset::Custom => self
                .custom
                .clone()
                .ok_or_else(|| Error::Config("geometry.custom is required for preset = \"custom\"".into()))?,
        };
        g.validate()?;
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub kind: PhantomKind,
    pub n_ellipses: usize,
    pub intensity: [f64; 2],
    pub clip: [f64; 2],
}

impl Default for PhantomConfig {
    fn default() -> Self {
        let s = PhantomSpec::random(16, 0, 5);
        PhantomConfig {
            kind: PhantomKind::SheppLogan,
            n_ellipses: s.n_ellipses,
            intensity: s.intensity,
            clip: s.clip,
        }
    }
}

impl PhantomConfig {
    pub fn spec(&self, kind: PhantomKind, n: usize, seed: u64) -> PhantomSpec {
        PhantomSpec {
            kind,
            n,
            seed,
            n_ellipses: self.n_ellipses,
            intensity: self.intensity,
            clip: self.clip,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    pub level: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct FbpConfig {
    pub filter: FilterKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SugarMode {
    #[default]
    TwoStage,
    Single,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SugarConfig {
    pub mode: SugarMode,
    /// Side of the low-resolution stage.
    pub le_n: usize,
    /// Low-resolution network (also the single-stage network).
    pub le: SugarInit,
    pub hr: SugarInit,
    pub train: TrainConfig,
    /// Synthetic random-ellipse training and held-out sets.
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for SugarConfig {
    fn default() -> Self {
        let le = SugarInit {
            transform: crate::sugar::TransformSpec::Learned {
                channels: vec![8, 16, 32],
                residual: true,
            },
            seed: 1,
            ..Default::default()
        };
        let hr = SugarInit { seed: 2, ..le.clone() };
        SugarConfig {
            mode: SugarMode::TwoStage,
            le_n: 64,
            le,
            hr,
            train: TrainConfig {
                epochs: 12,
                learning_rate: 2e-3,
                ..Default::default()
            },
            n_train: 200,
            n_test: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub geometry: GeometryConfig,
    pub phantom: PhantomConfig,
    pub noise: NoiseConfig,
    pub fbp: FbpConfig,
    pub sb: SplitBregmanConfig,
    pub cppd: CppdConfig,
    pub sugar: SugarConfig,
}

impl ExperimentConfig {
    /// Parse TOML text, apply `key.path=value` overrides, and validate.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let user: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        // Layer the user's keys over the full default document so a partial
        // table keeps the experiment defaults of its siblings.
        let mut root: toml::Table =
            toml::from_str(&ExperimentConfig::default().to_toml()).expect("defaults serialize to TOML");
        merge(&mut root, user);
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        fn key(k: &'static str) -> impl Fn(Error) -> Error {
            move |e| Error::Config(format!("{k}: {e}"))
        }
        self.geometry.build().map_err(key("geometry"))?;
        self.phantom
            .spec(PhantomKind::RandomEllipses, 16, 0)
            .validate()
            .map_err(key("phantom"))?;
        if !(self.noise.level >= 0.0 && self.noise.level.is_finite()) {
            return Err(Error::Config("noise.level: must be >= 0".into()));
        }
        self.sb.validate().map_err(key("sb"))?;
        self.cppd.validate().map_err(key("cppd"))?;
        self.sugar.train.validate().map_err(key("sugar.train"))?;
        for (k, s) in [("sugar.le", &self.sugar.le), ("sugar.hr", &self.sugar.hr)] {
            if s.n_blocks == 0 {
                return Err(Error::Config(format!("{k}.n_blocks: must be >= 1")));
            }
            if !(s.lambda1 >= 0.0 && s.threshold >= 0.0) {
                return Err(Error::Config(format!("{k}: lambda1 and threshold must be >= 0")));
            }
        }
        if self.sugar.le_n == 0 {
            return Err(Error::Config("sugar.le_n: must be >= 1".into()));
        }
        if self.sugar.n_train == 0 || self.sugar.n_test == 0 {
            return Err(Error::Config("sugar.n_train and sugar.n_test must be >= 1".into()));
        }
        Ok(())
    }
}

/// Set `a.b.c = value` in a TOML table. The value is parsed as a TOML
/// literal when possible and taken as a bare string otherwise.
pub fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let path = path.trim();
    if path.is_empty() || path.split('.').any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = path.split('.').collect();
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key `{path}`: `{p}` is not a table")))?;
    }
    let leaf = parts[parts.len() - 1];
    if leaf == TAG && table.get(TAG) != Some(&value) {
        table.clear();
    }
    table.insert(leaf.to_string(), value);
    Ok(())
}

/// Tag key of internally tagged enums; switching variants drops the old
/// variant's fields.
const TAG: &str = "kind";

/// Recursively overlay `top` onto `base`.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) if b.get(TAG) == t.get(TAG) || t.get(TAG).is_none() => {
                merge(b, t)
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
