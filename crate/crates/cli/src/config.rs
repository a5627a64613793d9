//! Run-configuration schema: one JSON document per run, tagged by mode,
//! with exactly the fields that mode accepts.

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use trialdesign_core::model::{NestedDesign, Scenario, SizingParams};
use trialdesign_core::power::{GridConfig, McConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    /// Subpopulation fractions r_1..r_n with r_1 = 1.
    pub r: Vec<f64>,
    pub alpha0: f64,
    /// Explicit information units; omit to derive from sizing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i3: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizingConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Hazard reduction in the entire population; omit to take it from the
    /// scenario at r = 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

impl Default for SizingConfig {
    fn default() -> Self {
        Self {
            alpha: 0.025,
            beta: 0.1,
            delta: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub enum ScenarioKind {
    Constant,
    LinearInR,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub intercept: f64,
    #[serde(default)]
    pub slope: f64,
}

impl ScenarioConfig {
    pub fn build(&self) -> anyhow::Result<Scenario> {
        let s = match self.kind {
            ScenarioKind::Constant => {
                if self.slope != 0.0 {
                    bail!("constant scenario must not set a slope");
                }
                Scenario::constant(self.intercept)
            }
            ScenarioKind::LinearInR => Scenario::linear(self.intercept, self.slope),
        };
        s.context("scenario validation")
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default = "default_n1")]
    pub n1: usize,
    #[serde(default = "default_n2")]
    pub n2: usize,
    #[serde(default = "default_n3")]
    pub n3: usize,
    /// Spanning-grid resolution for candidate generation.
    #[serde(default = "default_grid_m")]
    pub grid_m: usize,
    /// Tensor-grid resolution of the grid-sum baseline.
    #[serde(default = "default_baseline_m")]
    pub baseline_m: usize,
    #[serde(default)]
    pub seed: u64,
    /// 0 means all available cores.
    #[serde(default)]
    pub workers: usize,
}

fn default_n1() -> usize {
    10240
}
fn default_n2() -> usize {
    20480
}
fn default_n3() -> usize {
    2000
}
fn default_grid_m() -> usize {
    50
}
fn default_baseline_m() -> usize {
    50
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            n1: default_n1(),
            n2: default_n2(),
            n3: default_n3(),
            grid_m: default_grid_m(),
            baseline_m: default_baseline_m(),
            seed: 0,
            workers: 0,
        }
    }
}

impl EngineConfig {
    pub fn mc(&self) -> anyhow::Result<McConfig> {
        McConfig::new(self.n1, self.n2, self.seed).context("engine.n1/n2")
    }

    pub fn baseline_grid(&self) -> anyhow::Result<GridConfig> {
        GridConfig::new(self.baseline_m).context("engine.baseline_m")
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PowerMethod {
    MonteCarlo,
    Grid,
    FineGrid,
}

/// Top-level run configuration, tagged by mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RunConfig {
    /// Expected power of a fixed design at fixed significance levels.
    Power {
        schema_version: u32,
        design: DesignConfig,
        #[serde(default)]
        sizing: SizingConfig,
        scenario: ScenarioConfig,
        alpha: Vec<f64>,
        #[serde(default)]
        engine: EngineConfig,
        method: PowerMethod,
    },
    /// Optimal significance levels for a fixed design.
    Optimize {
        schema_version: u32,
        design: DesignConfig,
        #[serde(default)]
        sizing: SizingConfig,
        scenario: ScenarioConfig,
        #[serde(default)]
        engine: EngineConfig,
    },
    /// Novel-vs-standard comparison on explicit subpopulation settings.
    Compare {
        schema_version: u32,
        alpha0: f64,
        #[serde(default)]
        sizing: SizingConfig,
        scenario: ScenarioConfig,
        /// Each entry is a full fraction vector (leading 1 included).
        r_settings: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        i3: Option<f64>,
        #[serde(default)]
        engine: EngineConfig,
    },
    /// Full sweep over the subpopulation-size lattice.
    Sweep {
        schema_version: u32,
        alpha0: f64,
        /// Number of nested populations (2, 3 or 4).
        n: usize,
        /// Lattice step of the r sweep.
        rgrid_step: f64,
        #[serde(default)]
        sizing: SizingConfig,
        scenario: ScenarioConfig,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        i3: Option<f64>,
        #[serde(default)]
        engine: EngineConfig,
        /// Lattice density for the emitted surface file.
        #[serde(default = "default_surface_density")]
        surface_density: usize,
    },
}

fn default_surface_density() -> usize {
    50
}

impl RunConfig {
    pub fn schema_version(&self) -> u32 {
        match self {
            RunConfig::Power { schema_version, .. }
            | RunConfig::Optimize { schema_version, .. }
            | RunConfig::Compare { schema_version, .. }
            | RunConfig::Sweep { schema_version, .. } => *schema_version,
        }
    }

    pub fn mode_name(&self) -> &'static str {
        match self {
            RunConfig::Power { .. } => "power",
            RunConfig::Optimize { .. } => "optimize",
            RunConfig::Compare { .. } => "compare",
            RunConfig::Sweep { .. } => "sweep",
        }
    }

    pub fn engine(&self) -> &EngineConfig {
        match self {
            RunConfig::Power { engine, .. }
            | RunConfig::Optimize { engine, .. }
            | RunConfig::Compare { engine, .. }
            | RunConfig::Sweep { engine, .. } => engine,
        }
    }

    pub fn engine_mut(&mut self) -> &mut EngineConfig {
        match self {
            RunConfig::Power { engine, .. }
            | RunConfig::Optimize { engine, .. }
            | RunConfig::Compare { engine, .. }
            | RunConfig::Sweep { engine, .. } => engine,
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.schema_version() != SCHEMA_VERSION {
            bail!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version()
            );
        }
        Ok(())
    }
}

/// Resolves information units: explicit value wins, otherwise derived from
/// the sizing parameters at the scenario's entire-population effect and
/// rounded to the nearest integer, matching the reporting convention.
pub fn resolve_i3(
    explicit: Option<f64>,
    sizing: &SizingConfig,
    scenario: &Scenario,
) -> anyhow::Result<f64> {
    if let Some(i3) = explicit {
        if !(i3 > 0.0) {
            bail!("i3 must be positive, got {i3}");
        }
        return Ok(i3);
    }
    let delta = sizing.delta.unwrap_or_else(|| scenario.delta0(1.0));
    let params = SizingParams::new(sizing.alpha, sizing.beta, delta).context("sizing")?;
    Ok(trialdesign_core::model::information_units(&params).round())
}

pub fn build_design(cfg: &DesignConfig, i3: f64) -> anyhow::Result<NestedDesign> {
    NestedDesign::new(cfg.r.clone(), i3, cfg.alpha0).context("design validation")
}
