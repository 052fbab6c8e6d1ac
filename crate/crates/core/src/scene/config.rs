//! The three configuration files: collection, billboard overrides, simulation.
//!
//! All three are small YAML documents (scalars, sequences, one level of nesting).

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_yaml::{Mapping, Value};

use super::{find_situation, AttackSituation, NpcDensity, SpawnLimits, Task, TaskProfile, WeatherPreset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionConfig {
    pub task: Task,
    pub town: String,
    pub root_dir: PathBuf,
    pub split: String,
    pub situation_name: String,
    /// Zero, one, or two textures; none means nothing is drawn on the surfaces.
    pub patch_paths: Vec<PathBuf>,
    /// Overrides the simulation seed when present.
    pub seed: Option<u64>,
    pub num_samples: usize,
    /// Image (width, height); the task default when absent.
    pub resolution: Option<(u32, u32)>,
}

impl CollectionConfig {
    pub fn new(task: Task, situation_name: &str) -> Self {
        Self {
            task,
            town: "flatland".into(),
            root_dir: PathBuf::from("."),
            split: "train".into(),
            situation_name: situation_name.into(),
            patch_paths: Vec::new(),
            seed: None,
            num_samples: 100,
            resolution: None,
        }
    }

    pub fn effective_seed(&self, sim: &SimulationConfig) -> u64 {
        self.seed.unwrap_or(sim.seed)
    }

    pub fn profile(&self) -> TaskProfile {
        let mut p = TaskProfile::for_task(self.task);
        if let Some((w, h)) = self.resolution {
            p.width = w;
            p.height = h;
        }
        p
    }

    pub fn split_dir(&self) -> PathBuf {
        self.root_dir.join(&self.split)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::InvalidConfig("num_samples must be at least 1".into()));
        }
        validate_split_token(&self.split)?;
        if let Some((w, h)) = self.resolution {
            if w < 16 || h < 16 {
                return Err(Error::InvalidConfig(format!("resolution {w}x{h} is below 16x16")));
            }
        }
        let situation = find_situation(&self.situation_name)?;
        if self.patch_paths.len() > situation.surfaces.len() {
            return Err(Error::InvalidConfig(format!(
                "{} patch paths given but `{}` has {} surface(s)",
                self.patch_paths.len(),
                situation.name,
                situation.surfaces.len()
            )));
        }
        Ok(())
    }

    pub fn to_yaml(&self) -> String {
        let mut out = format!(
            "task: {}\ntown: {}\nroot_dir: {}\nsplit: {}\nsituation: {}\nnum_samples: {}\n",
            self.task,
            self.town,
            self.root_dir.display(),
            self.split,
            self.situation_name,
            self.num_samples
        );
        if let Some(seed) = self.seed {
            out.push_str(&format!("seed: {seed}\n"));
        }
        if let Some((w, h)) = self.resolution {
            out.push_str(&format!("width: {w}\nheight: {h}\n"));
        }
        if !self.patch_paths.is_empty() {
            out.push_str("patch:\n");
            for p in &self.patch_paths {
                out.push_str(&format!("  - {}\n", p.display()));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub seed: u64,
    pub npc_density: NpcDensity,
    pub weather_preset: WeatherPreset,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            npc_density: NpcDensity::Medium,
            weather_preset: WeatherPreset::ClearNoon,
        }
    }
}

fn validate_split_token(split: &str) -> Result<()> {
    let ok = !split.is_empty()
        && split != "."
        && split != ".."
        && split.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("split `{split}` is not a path-safe token")))
    }
}

/// 1-based line of the first `key:` entry, or the line after the document end.
fn key_line(text: &str, key: &str) -> usize {
    for (i, line) in text.lines().enumerate() {
        let t = line.trim_start();
        if let Some(rest) = t.strip_prefix(key) {
            if rest.trim_start().starts_with(':') {
                return i + 1;
            }
        }
    }
    text.lines().count() + 1
}

fn load_mapping(text: &str) -> Result<Mapping> {
    let value: Value = serde_yaml::from_str(text).map_err(|e| Error::Parse {
        line: e.location().map(|l| l.line()).unwrap_or(0),
        message: e.to_string(),
    })?;
    match value {
        Value::Mapping(m) => Ok(m),
        Value::Null => Ok(Mapping::new()),
        _ => Err(Error::Parse {
            line: 1,
            message: "expected a mapping of `key: value` entries".into(),
        }),
    }
}

struct Doc<'a> {
    text: &'a str,
    map: Mapping,
}

impl<'a> Doc<'a> {
    fn parse(text: &'a str) -> Result<Self> {
        Ok(Self {
            text,
            map: load_mapping(text)?,
        })
    }

    /// First present key among `names` (aliases).
    fn find(&self, names: &[&str]) -> Option<(String, Value)> {
        names.iter().find_map(|n| {
            self.map
                .get(Value::String((*n).to_string()))
                .map(|v| ((*n).to_string(), v.clone()))
        })
    }

    fn err(&self, key: &str, message: String) -> Error {
        Error::Parse {
            line: key_line(self.text, key),
            message,
        }
    }

    fn require(&self, names: &[&str]) -> Result<(String, Value)> {
        self.find(names).ok_or_else(|| Error::Parse {
            line: self.text.lines().count() + 1,
            message: format!("missing required key `{}`", names[0]),
        })
    }

    fn scalar_string(&self, key: &str, v: &Value) -> Result<String> {
        match v {
            Value::String(s) => Ok(s.clone()),
            Value::Number(n) => Ok(n.to_string()),
            Value::Bool(b) => Ok(b.to_string()),
            _ => Err(self.err(key, format!("`{key}` must be a scalar"))),
        }
    }

    fn u64_value(&self, key: &str, v: &Value) -> Result<u64> {
        v.as_u64()
            .ok_or_else(|| self.err(key, format!("`{key}` must be a non-negative integer")))
    }
}

/// Parses `collection_config.yml`.
///
/// Keys: `task`, `situation` (alias `scene`), and optionally `town`, `root_dir`,
/// `split`, `patch` (alias `patch_paths`; a path or a list of paths), `seed`,
/// `num_samples`, `width` and `height`.
pub fn parse_collection_config(text: &str) -> Result<CollectionConfig> {
    let doc = Doc::parse(text)?;
    let (k, v) = doc.require(&["task"])?;
    let task: Task = doc.scalar_string(&k, &v)?.parse()?;
    let (k, v) = doc.require(&["situation", "scene", "situation_name"])?;
    let situation_name = doc.scalar_string(&k, &v)?;
    let mut cfg = CollectionConfig::new(task, &situation_name);

    if let Some((k, v)) = doc.find(&["town"]) {
        cfg.town = doc.scalar_string(&k, &v)?;
    }
    if let Some((k, v)) = doc.find(&["root_dir", "root"]) {
        cfg.root_dir = PathBuf::from(doc.scalar_string(&k, &v)?);
    }
    if let Some((k, v)) = doc.find(&["split"]) {
        cfg.split = doc.scalar_string(&k, &v)?;
        validate_split_token(&cfg.split).map_err(|e| doc.err(&k, e.to_string()))?;
    }
    if let Some((k, v)) = doc.find(&["seed"]) {
        cfg.seed = Some(doc.u64_value(&k, &v)?);
    }
    if let Some((k, v)) = doc.find(&["num_samples", "samples"]) {
        cfg.num_samples = doc.u64_value(&k, &v)? as usize;
        if cfg.num_samples == 0 {
            return Err(doc.err(&k, "num_samples must be at least 1".into()));
        }
    }
    match (doc.find(&["width"]), doc.find(&["height"])) {
        (Some((kw, vw)), Some((kh, vh))) => {
            let (w, h) = (doc.u64_value(&kw, &vw)?, doc.u64_value(&kh, &vh)?);
            if !(16..=8192).contains(&w) || !(16..=8192).contains(&h) {
                return Err(doc.err(&kw, format!("resolution {w}x{h} outside 16..=8192")));
            }
            cfg.resolution = Some((w as u32, h as u32));
        }
        (None, None) => {}
        (Some((k, _)), None) | (None, Some((k, _))) => {
            return Err(doc.err(&k, "`width` and `height` must be given together".into()));
        }
    }
    if let Some((k, v)) = doc.find(&["patch", "patch_paths", "patch_path"]) {
        cfg.patch_paths = match &v {
            Value::Null => Vec::new(),
            Value::Sequence(items) => items
                .iter()
                .map(|i| doc.scalar_string(&k, i).map(PathBuf::from))
                .collect::<Result<_>>()?,
            other => vec![PathBuf::from(doc.scalar_string(&k, other)?)],
        };
    }

    let situation = find_situation(&cfg.situation_name)?;
    if cfg.patch_paths.len() > situation.surfaces.len() {
        let key = doc.find(&["patch", "patch_paths", "patch_path"]).map(|(k, _)| k).unwrap_or_default();
        return Err(doc.err(
            &key,
            format!(
                "{} patch paths given but `{}` has {} surface(s)",
                cfg.patch_paths.len(),
                situation.name,
                situation.surfaces.len()
            ),
        ));
    }
    Ok(cfg)
}

/// Parses the declarative simulation file: `seed`, `npc_density`
/// (low/medium/high), `weather` (one of the five presets). Absent keys keep
/// their defaults.
pub fn parse_simulation_config(text: &str) -> Result<SimulationConfig> {
    let doc = Doc::parse(text)?;
    let mut sim = SimulationConfig::default();
    if let Some((k, v)) = doc.find(&["seed"]) {
        sim.seed = doc.u64_value(&k, &v)?;
    }
    if let Some((k, v)) = doc.find(&["npc_density", "npcs"]) {
        sim.npc_density = doc
            .scalar_string(&k, &v)?
            .parse()
            .map_err(|e: Error| doc.err(&k, e.to_string()))?;
    }
    if let Some((k, v)) = doc.find(&["weather", "weather_preset"]) {
        sim.weather_preset = doc
            .scalar_string(&k, &v)?
            .parse()
            .map_err(|e: Error| doc.err(&k, e.to_string()))?;
    }
    Ok(sim)
}

fn pair(doc: &Doc, key: &str, v: &Value) -> Result<(f64, f64)> {
    let bad = || doc.err(key, format!("`{key}` must be a two-element numeric list"));
    match v {
        Value::Sequence(s) if s.len() == 2 => {
            let a = s[0].as_f64().ok_or_else(bad)?;
            let b = s[1].as_f64().ok_or_else(bad)?;
            Ok((a, b))
        }
        _ => Err(bad()),
    }
}

fn override_limits(doc: &Doc, prefix: &str, entry: &Mapping, limits: &mut SpawnLimits) -> Result<()> {
    for (name, slot) in [
        ("distance_range_m", &mut limits.distance_range_m),
        ("lateral_range_m", &mut limits.lateral_range_m),
        ("yaw_jitter_deg", &mut limits.yaw_jitter_deg),
    ] {
        let key = format!("{prefix}_{name}");
        if let Some(v) = entry.get(Value::String(key.clone())) {
            *slot = pair(doc, &key, v)?;
        }
    }
    let key = format!("{prefix}_count_range");
    if let Some(v) = entry.get(Value::String(key.clone())) {
        let (a, b) = pair(doc, &key, v)?;
        if a < 0.0 || b < 0.0 || a.fract() != 0.0 || b.fract() != 0.0 {
            return Err(doc.err(&key, format!("`{key}` must hold non-negative integers")));
        }
        limits.count_range = (a as u32, b as u32);
    }
    limits.validate().map_err(|e| doc.err(prefix, e.to_string()))
}

/// Applies `billboard_config.yml` spawn-limit overrides. The document maps a
/// situation name to entries such as `ego_distance_range_m: [5, 40]` or
/// `npc_lateral_range_m: [-6, 6]`.
pub fn apply_billboard_overrides(text: &str, situations: &mut [AttackSituation]) -> Result<()> {
    let doc = Doc::parse(text)?;
    for (name, entry) in &doc.map {
        let name = name
            .as_str()
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: "situation names must be strings".into(),
            })?
            .to_string();
        let situation = situations
            .iter_mut()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::UnknownSituation(name.clone()))?;
        let entry = match entry {
            Value::Mapping(m) => m,
            Value::Null => continue,
            _ => return Err(doc.err(&name, format!("`{name}` must map to limit entries"))),
        };
        for key in entry.keys() {
            let k = key.as_str().unwrap_or_default();
            let known = ["ego_", "npc_"].iter().any(|p| k.starts_with(p));
            if !known {
                return Err(doc.err(k, format!("unknown billboard key `{k}`")));
            }
        }
        override_limits(&doc, "ego", entry, &mut situation.ego_spawn_limits)?;
        override_limits(&doc, "npc", entry, &mut situation.npc_spawn_limits)?;
    }
    Ok(())
}
