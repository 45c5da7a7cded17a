//! Run configuration: one TOML file with a section per module, plus
//! `section.key=value` overrides.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{ExperimentGrid, SweepVariable};
use crate::constellation::{
    build_shell, random_roles, scattered_roles, snapshot_topology, Constellation, LinkBudget, NodeAttributes, NodeId, Role,
    RoleMap, ShellConfig,
};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::optimizer::OptimizerConfig;
use crate::qmix::TrainConfig;
use crate::scenario::{InstanceSampler, Scenario};
use crate::workload::{MapSurrogate, SensingTask, TaskTemplate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Deterministic farthest-point spread.
    Scattered,
    /// Uniform random placement drawn from the instance seed.
    Random,
    /// The `roles` table.
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstellationSection {
    pub remote_sensing: usize,
    pub computing: usize,
    pub placement: Placement,
    /// Topology snapshot index.
    pub slot: u64,
    pub shell: ShellConfig,
    pub nodes: NodeAttributes,
    pub link: LinkBudget,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub roles: Option<RoleMap>,
}

impl Default for ConstellationSection {
    fn default() -> Self {
        Self {
            remote_sensing: 6,
            computing: 3,
            placement: Placement::Scattered,
            slot: 0,
            shell: ShellConfig::default(),
            nodes: NodeAttributes::default(),
            link: LinkBudget::default(),
            roles: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSection {
    pub task: TaskTemplate,
    pub surrogate: MapSurrogate,
}

/// Per-satellite replacement of template values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskOverride {
    pub source: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixels_per_frame: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bits_per_pixel: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_bits_per_frame: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycles_per_bit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub small_ops: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub large_ops: Option<f64>,
}

impl TaskOverride {
    fn apply(&self, t: &mut SensingTask) {
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut t.frames, self.frames);
        set(&mut t.pixels_per_frame, self.pixels_per_frame);
        set(&mut t.bits_per_pixel, self.bits_per_pixel);
        set(&mut t.feature_bits_per_frame, self.feature_bits_per_frame);
        set(&mut t.cycles_per_bit, self.cycles_per_bit);
        set(&mut t.small_ops, self.small_ops);
        set(&mut t.large_ops, self.large_ops);
    }
}

/// How training instances are drawn around the configured scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub reshuffle_roles: f64,
    pub alpha_range: [f64; 2],
    pub frame_jitter: f64,
    pub task_subset: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { reshuffle_roles: 0.5, alpha_range: [0.45, 1.0], frame_jitter: 0.5, task_subset: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: String,
    pub constellation: ConstellationSection,
    pub workload: WorkloadSection,
    pub tasks: Vec<TaskOverride>,
    pub env: EnvConfig,
    pub training: TrainConfig,
    pub sampler: SamplerSection,
    pub optimizer: OptimizerConfig,
    pub bench: ExperimentGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: "runs".into(),
            constellation: ConstellationSection::default(),
            workload: WorkloadSection::default(),
            tasks: Vec::new(),
            env: EnvConfig::default(),
            training: TrainConfig::default(),
            sampler: SamplerSection::default(),
            optimizer: OptimizerConfig::default(),
            bench: ExperimentGrid::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `section.key=value` overrides in order and revalidates. Values
    /// are read as TOML; anything that does not parse is taken as a string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = toml::Table::try_from(self).map_err(|e| Error::config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (path, raw) = o.split_once('=').ok_or_else(|| Error::config(format!("override `{o}` is not key=value")))?;
            let keys: Vec<&str> = path.trim().split('.').collect();
            if keys.iter().any(|k| k.is_empty()) {
                return Err(Error::config(format!("bad override key `{path}`")));
            }
            let value = parse_value(raw.trim());
            let (last, parents) = keys.split_last().expect("non-empty key");
            let mut table = &mut doc;
            for k in parents {
                table = table
                    .entry(k.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::config(format!("override `{path}`: `{k}` is not a section")))?;
            }
            table.insert(last.to_string(), value);
        }
        let cfg: RunConfig = doc.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.constellation;
        c.shell.validate()?;
        c.link.validate()?;
        self.workload.surrogate.validate()?;
        self.env.validate()?;
        self.training.validate()?;
        self.optimizer.validate()?;
        self.bench.validate()?;
        // TOML integers are signed
        if self.seed > i64::MAX as u64 || self.bench.seeds.iter().any(|&s| s > i64::MAX as u64) {
            return Err(Error::config(format!("seeds must not exceed {}", i64::MAX)));
        }
        let n = c.shell.num_nodes();
        if c.placement != Placement::Explicit {
            if c.remote_sensing == 0 || c.computing == 0 || c.remote_sensing + c.computing > n {
                return Err(Error::config(format!(
                    "cannot place {} remote sensing and {} computing satellites on {n} nodes",
                    c.remote_sensing, c.computing
                )));
            }
        } else if c.roles.is_none() {
            return Err(Error::config("placement = \"explicit\" needs a [constellation.roles] table"));
        }
        let [lo, hi] = self.sampler.alpha_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::config("sampler.alpha_range must be an ordered pair in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.sampler.reshuffle_roles) || !(0.0..=1.0).contains(&self.sampler.task_subset) {
            return Err(Error::config("sampler probabilities must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.sampler.frame_jitter) {
            return Err(Error::config("sampler.frame_jitter must lie in [0, 1)"));
        }
        // Tasks are only known once roles are placed; scenario() checks the rest.
        Ok(())
    }

    /// Canonical hash: SHA-256 of the serialized configuration.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    pub fn roles(&self, seed: u64) -> Result<Vec<Role>> {
        let c = &self.constellation;
        match c.placement {
            Placement::Scattered => scattered_roles(&c.shell, c.remote_sensing, c.computing),
            Placement::Random => random_roles(&c.shell, c.remote_sensing, c.computing, &mut ChaCha8Rng::seed_from_u64(seed)),
            Placement::Explicit => c.roles.as_ref().expect("validated").to_roles(c.shell.num_nodes()),
        }
    }

    pub fn constellation(&self, seed: u64) -> Result<Constellation> {
        build_shell(&self.constellation.shell, &self.roles(seed)?, &self.constellation.nodes)
    }

    /// The problem instance for `seed` (which only matters under random
    /// placement).
    pub fn scenario(&self, seed: u64) -> Result<Scenario> {
        let c = self.constellation(seed)?;
        let snapshot = snapshot_topology(&c, self.constellation.slot, &self.constellation.link);
        let mut tasks: Vec<SensingTask> =
            c.ids_with_role(Role::RemoteSensing).into_iter().map(|s| self.workload.task.instantiate(s)).collect();
        for o in &self.tasks {
            let t = tasks
                .iter_mut()
                .find(|t| t.source == o.source)
                .ok_or_else(|| Error::config(format!("[[tasks]] entry for node {} which is not remote sensing", o.source)))?;
            o.apply(t);
        }
        if tasks.len() > self.env.max_tasks {
            return Err(Error::config(format!(
                "{} tasks exceed env.max_tasks = {}",
                tasks.len(),
                self.env.max_tasks
            )));
        }
        Scenario::new(Arc::new(snapshot), c.nodes.into(), tasks, self.workload.surrogate.clone())
    }

    pub fn sampler(&self) -> Result<InstanceSampler> {
        let [lo, hi] = self.sampler.alpha_range;
        Ok(InstanceSampler {
            shell: self.constellation.shell.clone(),
            attributes: self.constellation.nodes.clone(),
            template: self.workload.task.clone(),
            base: self.scenario(self.seed)?,
            env: self.env.clone(),
            reshuffle_roles: self.sampler.reshuffle_roles,
            alpha_range: (lo, hi),
            frame_jitter: self.sampler.frame_jitter,
            task_subset: self.sampler.task_subset,
        })
    }

    /// Copy with one swept quantity set.
    pub fn with_sweep(&self, variable: SweepVariable, value: f64) -> Result<Self> {
        let mut cfg = self.clone();
        match variable {
            SweepVariable::Frames => {
                cfg.workload.task.frames = value;
                cfg.tasks.iter_mut().for_each(|t| t.frames = None);
            }
            SweepVariable::ComputingTops => cfg.constellation.nodes.computing_capacity = value * 1e12,
            SweepVariable::Iterations => cfg.optimizer.iterations = value as usize,
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Scenario and optimizer settings of one grid cell.
    pub fn cell(&self, variable: SweepVariable, value: f64, seed: u64) -> Result<(Scenario, OptimizerConfig)> {
        let cfg = self.with_sweep(variable, value)?;
        Ok((cfg.scenario(seed)?, cfg.optimizer))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Lowercase hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[env]\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("sed = 1\n").is_err());
    }

    #[test]
    fn overrides_apply_in_order() {
        let cfg = RunConfig::default()
            .with_overrides(&["training.epochs=7", "constellation.placement=random", "training.epochs=9", "seed=3"])
            .unwrap();
        assert_eq!(cfg.training.epochs, 9);
        assert_eq!(cfg.constellation.placement, Placement::Random);
        assert_eq!(cfg.seed, 3);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        let d = RunConfig::default();
        assert!(matches!(d.with_overrides(&["training.epochs"]), Err(Error::Config(_))));
        assert!(matches!(d.with_overrides(&["training.epochs=-1"]), Err(Error::Config(_))));
        assert!(matches!(d.with_overrides(&["seed.x=1"]), Err(Error::Config(_))));
        assert!(matches!(d.with_overrides(&["env.mu=0"]), Err(Error::Config(_))));
        assert!(matches!(d.with_overrides(&["seed=18446744073709551615"]), Err(Error::Config(_))));
        assert!(RunConfig { seed: u64::MAX, ..RunConfig::default() }.validate().is_err());
    }

    #[test]
    fn default_scenario_shape() {
        let sc = RunConfig::default().scenario(0).unwrap();
        assert_eq!(sc.nodes.len(), 64);
        assert_eq!(sc.snapshot.links.len(), 128);
        assert_eq!(sc.tasks.len(), 6);
        assert_eq!(sc.computing_nodes().len(), 3);
    }

    #[test]
    fn task_overrides_need_remote_sensing_source() {
        let mut cfg = RunConfig::default();
        let rs = cfg.scenario(0).unwrap().tasks[2].source;
        cfg.tasks = vec![TaskOverride { source: rs, frames: Some(40.0), ..TaskOverride::default() }];
        let sc = cfg.scenario(0).unwrap();
        assert_eq!(sc.tasks.iter().find(|t| t.source == rs).unwrap().frames, 40.0);
        let cpt = sc.computing_nodes()[0];
        cfg.tasks[0].source = cpt;
        assert!(cfg.scenario(0).is_err());
    }

    #[test]
    fn random_placement_depends_on_seed() {
        let cfg = RunConfig::default().with_overrides(&["constellation.placement=random"]).unwrap();
        assert_eq!(cfg.roles(4).unwrap(), cfg.roles(4).unwrap());
        assert_ne!(cfg.roles(4).unwrap(), cfg.roles(5).unwrap());
    }

    #[test]
    fn sweep_sets_the_variable() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.with_sweep(SweepVariable::ComputingTops, 20.0).unwrap().constellation.nodes.computing_capacity, 20e12);
        assert_eq!(cfg.with_sweep(SweepVariable::Iterations, 3.0).unwrap().optimizer.iterations, 3);
        assert_eq!(cfg.with_sweep(SweepVariable::Frames, 50.0).unwrap().workload.task.frames, 50.0);
    }
}
