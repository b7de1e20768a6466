//! Run configuration, read from TOML.
//!
//! The run seed is the only seed: world generation, both trainings, splitting and
//! the curves all derive theirs from it, so a `seed` written inside a section is
//! overwritten by [`RunConfig::resolved`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::CurveConfig;
use crate::splitting::SplitConfig;
use crate::train::TrainConfig;
use crate::worlds::{gen_digit_pairs, gen_shapes, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldKind {
    DigitPairs,
    Shapes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub kind: WorldKind,
    pub n: usize,
    /// Feature noise standard deviation.
    pub noise: f64,
    /// Feature dimensions per latent factor.
    pub dim: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            kind: WorldKind::DigitPairs,
            n: 10_000,
            noise: 0.3,
            dim: 16,
        }
    }
}

impl WorldSpec {
    pub fn generate(&self, seed: u64) -> Result<World> {
        match self.kind {
            WorldKind::DigitPairs => gen_digit_pairs(seed, self.n, self.noise, self.dim),
            WorldKind::Shapes => gen_shapes(seed, self.n, self.noise, self.dim),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitVariant {
    #[default]
    Sae,
    Clustering,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSection {
    pub variant: SplitVariant,
    #[serde(flatten)]
    pub config: SplitConfig,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            variant: SplitVariant::Sae,
            config: SplitConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    #[serde(flatten)]
    pub curve: CurveConfig,
    /// Prototypes kept per discovered sub-concept.
    pub prototypes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            curve: CurveConfig::default(),
            prototypes: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub artifacts: PathBuf,
    pub world: WorldSpec,
    pub cem: TrainConfig,
    pub hicem: TrainConfig,
    pub split: SplitSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            artifacts: PathBuf::from("artifacts"),
            world: WorldSpec::default(),
            cem: TrainConfig::default(),
            hicem: TrainConfig::default(),
            split: SplitSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Copy with every component seed set from the run seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.cem.seed = c.seed;
        c.hicem.seed = c.seed;
        c.split.config.seed = c.seed;
        c.split.config.sae.seed = c.seed;
        c.eval.curve.seed = c.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.world.n == 0 || self.world.dim == 0 {
            return Err(Error::Config("world.n and world.dim must be positive".into()));
        }
        if !(self.world.noise >= 0.0 && self.world.noise.is_finite()) {
            return Err(Error::Config(format!("world.noise {} must be finite and >= 0", self.world.noise)));
        }
        self.cem.validate().map_err(|e| section("cem", e))?;
        self.hicem.validate().map_err(|e| section("hicem", e))?;
        self.split.config.sae.validate().map_err(|e| section("split.sae", e))?;
        let cl = &self.split.config.clustering;
        if cl.alpha_min < 2 || cl.beta_max < cl.alpha_min {
            return Err(Error::Config("split.clustering needs 2 <= alpha_min <= beta_max".into()));
        }
        if !(0.0..1.0).contains(&self.split.config.min_support) {
            return Err(Error::Config("split.min_support must lie in [0, 1)".into()));
        }
        if self.eval.curve.trials == 0 {
            return Err(Error::Config("eval.trials must be positive".into()));
        }
        Ok(())
    }
}

fn section(name: &str, e: Error) -> Error {
    match e {
        Error::Config(m) | Error::Parameter(m) => Error::Config(format!("[{name}] {m}")),
        other => Error::Config(format!("[{name}] {other}")),
    }
}
