//! Experiment configuration: a single JSON document.
//!
//! ```json
//! {
//!   "hypotheses": 3,
//!   "sending":   { "sizes": [3, 3, 3], "base_means": [1, 2, 3],
//!                  "perturb_range": 0.1, "model_seed": 7 },
//!   "receiving": { "sizes": [2, 2], "true_mean": 1.0 },
//!   "graph":     { "random": { "density": 0.5, "seed": 3 } },
//!   "simulation": { "steps": 20000, "sample_times": "geometric",
//!                   "trials": 3, "seed": 1 },
//!   "inference": { "rank_tol": 1e-10, "constraint_weight": 1.0,
//!                  "observation_times": [2000, 20000] },
//!   "output_dir": "out"
//! }
//! ```
//!
//! `graph` may instead be `{ "csv": "path/to/graph.csv" }`. Relative paths
//! resolve against the config file's directory. A zero `perturb_range`
//! selects the structured Gaussian model (no `model_seed` needed). A
//! geometric sample schedule is extended with the observation times; an
//! explicit list must already contain them.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::social_learning::geometric_sample_times;
use crate::topology_inference::DEFAULT_RANK_TOL;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphSource {
    Random { density: f64, seed: u64 },
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationConfig {
    pub steps: usize,
    pub sample_times: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferenceConfig {
    pub rank_tol: f64,
    pub constraint_weight: f64,
    pub observation_times: Vec<usize>,
}

/// Fully resolved configuration with defaults applied.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub hypotheses: usize,
    pub sending_sizes: Vec<usize>,
    pub base_means: Vec<f64>,
    pub perturb_range: f64,
    pub model_seed: Option<u64>,
    pub receiving_sizes: Vec<usize>,
    pub receiving_true_mean: Option<f64>,
    pub graph: GraphSource,
    pub simulation: SimulationConfig,
    pub inference: InferenceConfig,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn num_senders(&self) -> usize {
        self.sending_sizes.len()
    }

    pub fn final_observation_time(&self) -> usize {
        self.inference
            .observation_times
            .last()
            .copied()
            .unwrap_or(self.simulation.steps)
    }
}

/// Every problem found in a config file.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

pub fn validate_config(path: &Path) -> Result<ExperimentConfig, ConfigErrors> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigErrors(vec![format!("cannot read {}: {e}", path.display())]))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base)
}

/// Parses config text; relative paths resolve against `base_dir`.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<ExperimentConfig, ConfigErrors> {
    let root: Value = serde_json::from_str(text).map_err(|e| ConfigErrors(vec![format!("malformed JSON: {e}")]))?;
    let mut c = Collector::default();
    if !root.is_object() {
        return Err(ConfigErrors(vec!["config must be a JSON object".into()]));
    }

    let hypotheses: Option<usize> = c.required(&root, "", "hypotheses");
    if let Some(h) = hypotheses {
        if h < 2 {
            c.err(format!("hypotheses: H >= 2 required, got {h}"));
        }
    }

    let sending = c.section(&root, "sending");
    let sending_sizes: Option<Vec<usize>> = sending.and_then(|s| c.required(s, "sending", "sizes"));
    let base_means: Option<Vec<f64>> = sending.and_then(|s| c.required(s, "sending", "base_means"));
    let perturb_range: f64 = sending
        .and_then(|s| c.optional(s, "sending", "perturb_range"))
        .unwrap_or(0.0);
    let model_seed: Option<u64> = sending.and_then(|s| c.optional(s, "sending", "model_seed"));
    if let Some(sizes) = &sending_sizes {
        if sizes.is_empty() || sizes.contains(&0) {
            c.err("sending.sizes: need at least one sub-network, all sizes positive".into());
        }
    }
    if !(perturb_range.is_finite() && perturb_range >= 0.0) {
        c.err(format!("sending.perturb_range: must be >= 0, got {perturb_range}"));
    }
    if perturb_range > 0.0 && model_seed.is_none() && sending.is_some() {
        c.err("sending.model_seed: missing (required when perturb_range > 0)".into());
    }
    if let (Some(h), Some(sizes), Some(means)) = (hypotheses, &sending_sizes, &base_means) {
        let needed = h.max(sizes.len());
        if means.len() < needed {
            c.err(format!(
                "sending.base_means: need max(H, S) = {needed} means, got {}",
                means.len()
            ));
        }
        if perturb_range == 0.0 {
            if sizes.len() > h {
                c.err(format!(
                    "sending: structured model (perturb_range = 0) needs S <= H, got S = {} and H = {h}",
                    sizes.len()
                ));
            }
            let used = &means[..h.min(means.len())];
            if (0..used.len()).any(|i| used[i + 1..].contains(&used[i])) {
                c.err("sending.base_means: structured model needs distinct means".into());
            }
        }
    }

    let receiving = c.section(&root, "receiving");
    let receiving_sizes: Option<Vec<usize>> = receiving.and_then(|r| c.required(r, "receiving", "sizes"));
    let receiving_true_mean: Option<f64> = receiving.and_then(|r| c.optional(r, "receiving", "true_mean"));
    if let Some(sizes) = &receiving_sizes {
        if sizes.is_empty() || sizes.contains(&0) {
            c.err("receiving.sizes: need at least one sub-network, all sizes positive".into());
        }
    }

    let graph = c
        .section(&root, "graph")
        .and_then(|g| match (g.get("random"), g.get("csv")) {
            (Some(r), None) => {
                let density: Option<f64> = c.required(r, "graph.random", "density");
                let seed: Option<u64> = c.required(r, "graph.random", "seed");
                if let Some(d) = density {
                    if !(d > 0.0 && d <= 1.0) {
                        c.err(format!("graph.random.density: must lie in (0, 1], got {d}"));
                    }
                }
                Some(GraphSource::Random {
                    density: density?,
                    seed: seed?,
                })
            }
            (None, Some(p)) => match p.as_str() {
                Some(p) => {
                    let path = base_dir.join(p);
                    if !path.is_file() {
                        c.err(format!("graph.csv: file {} does not exist", path.display()));
                    }
                    Some(GraphSource::Csv(path))
                }
                None => {
                    c.err("graph.csv: expected a path string".into());
                    None
                }
            },
            _ => {
                c.err("graph: expected exactly one of \"random\" or \"csv\"".into());
                None
            }
        });

    let sim = c.section(&root, "simulation");
    let steps: Option<usize> = sim.and_then(|s| c.required(s, "simulation", "steps"));
    let trials: usize = sim.and_then(|s| c.optional(s, "simulation", "trials")).unwrap_or(1);
    let sim_seed: Option<u64> = sim.and_then(|s| c.required(s, "simulation", "seed"));
    if steps == Some(0) {
        c.err("simulation.steps: must be positive".into());
    }
    if trials == 0 {
        c.err("simulation.trials: must be positive".into());
    }
    let mut geometric = false;
    let sample_times = match sim.and_then(|s| s.get("sample_times")) {
        None => {
            geometric = true;
            steps.map(geometric_sample_times)
        }
        Some(Value::String(s)) if s == "geometric" => {
            geometric = true;
            steps.map(geometric_sample_times)
        }
        Some(v) => match serde_json::from_value::<Vec<usize>>(v.clone()) {
            Ok(times) => {
                let ok = times.windows(2).all(|w| w[0] < w[1])
                    && times.iter().all(|&t| t >= 1 && steps.is_none_or(|n| t <= n))
                    && !times.is_empty();
                if !ok {
                    c.err(
                        "simulation.sample_times: must be non-empty, strictly increasing and within 1..=steps".into(),
                    );
                }
                Some(times)
            }
            Err(_) => {
                c.err("simulation.sample_times: expected \"geometric\" or a list of integers".into());
                None
            }
        },
    };

    let inf = root.get("inference");
    let rank_tol: f64 = inf
        .and_then(|i| c.optional(i, "inference", "rank_tol"))
        .unwrap_or(DEFAULT_RANK_TOL);
    let constraint_weight: f64 = inf
        .and_then(|i| c.optional(i, "inference", "constraint_weight"))
        .unwrap_or(1.0);
    let mut observation_times: Option<Vec<usize>> = inf.and_then(|i| c.optional(i, "inference", "observation_times"));
    // Singular form: one time or a list.
    if let Some(single) = inf.and_then(|i| c.optional::<OneOrMany>(i, "inference", "observation_time")) {
        if observation_times.is_some() {
            c.err("inference: give observation_time or observation_times, not both".into());
        } else {
            observation_times = Some(single.into_vec());
        }
    }
    if !(rank_tol > 0.0 && rank_tol < 1.0) {
        c.err(format!("inference.rank_tol: must lie in (0, 1), got {rank_tol}"));
    }
    if !(constraint_weight > 0.0 && constraint_weight.is_finite()) {
        c.err(format!(
            "inference.constraint_weight: must be positive, got {constraint_weight}"
        ));
    }
    // A geometric schedule also records every requested observation time.
    let mut sample_times = sample_times;
    if let (true, Some(samples), Some(obs), Some(n)) = (geometric, sample_times.as_mut(), &observation_times, steps) {
        samples.extend(obs.iter().filter(|&&t| t >= 1 && t <= n));
        samples.sort_unstable();
        samples.dedup();
    }
    let observation_times = match (observation_times, &sample_times) {
        (Some(obs), Some(samples)) => {
            if let Some(t) = obs.iter().find(|t| !samples.contains(t)) {
                c.err(format!(
                    "inference.observation_times: {t} is not a recorded sample time"
                ));
            }
            if obs.is_empty() || obs.windows(2).any(|w| w[0] >= w[1]) {
                c.err("inference.observation_times: must be non-empty and strictly increasing".into());
            }
            Some(obs)
        }
        (None, samples) => samples.clone(),
        (Some(obs), None) => Some(obs),
    };

    let output_dir = match root.get("output_dir") {
        None => Some(base_dir.join("out")),
        Some(Value::String(s)) => Some(base_dir.join(s)),
        Some(_) => {
            c.err("output_dir: expected a path string".into());
            None
        }
    };

    if !c.errors.is_empty() {
        return Err(ConfigErrors(c.errors));
    }
    // Every required value was reported above if missing.
    let missing = || ConfigErrors(vec!["incomplete config".into()]);
    Ok(ExperimentConfig {
        hypotheses: hypotheses.ok_or_else(missing)?,
        sending_sizes: sending_sizes.ok_or_else(missing)?,
        base_means: base_means.ok_or_else(missing)?,
        perturb_range,
        model_seed,
        receiving_sizes: receiving_sizes.ok_or_else(missing)?,
        receiving_true_mean,
        graph: graph.ok_or_else(missing)?,
        simulation: SimulationConfig {
            steps: steps.ok_or_else(missing)?,
            sample_times: sample_times.ok_or_else(missing)?,
            trials,
            seed: sim_seed.ok_or_else(missing)?,
        },
        inference: InferenceConfig {
            rank_tol,
            constraint_weight,
            observation_times: observation_times.ok_or_else(missing)?,
        },
        output_dir: output_dir.ok_or_else(missing)?,
    })
}

#[derive(serde::Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(usize),
    Many(Vec<usize>),
}

impl OneOrMany {
    fn into_vec(self) -> Vec<usize> {
        match self {
            Self::One(t) => vec![t],
            Self::Many(v) => v,
        }
    }
}

#[derive(Default)]
struct Collector {
    errors: Vec<String>,
}

impl Collector {
    fn err(&mut self, msg: String) {
        self.errors.push(msg);
    }

    fn section<'a>(&mut self, root: &'a Value, key: &str) -> Option<&'a Value> {
        match root.get(key) {
            Some(v) if v.is_object() => Some(v),
            Some(_) => {
                self.err(format!("{key}: expected an object"));
                None
            }
            None => {
                self.err(format!("{key}: missing section"));
                None
            }
        }
    }

    fn required<T: DeserializeOwned>(&mut self, obj: &Value, path: &str, key: &str) -> Option<T> {
        let name = qualified(path, key);
        match obj.get(key) {
            None => {
                self.err(format!("{name}: missing field"));
                None
            }
            Some(v) => self.convert(v, &name),
        }
    }

    fn optional<T: DeserializeOwned>(&mut self, obj: &Value, path: &str, key: &str) -> Option<T> {
        match obj.get(key) {
            None | Some(Value::Null) => None,
            Some(v) => self.convert(v, &qualified(path, key)),
        }
    }

    fn convert<T: DeserializeOwned>(&mut self, v: &Value, name: &str) -> Option<T> {
        match serde_json::from_value(v.clone()) {
            Ok(t) => Some(t),
            Err(e) => {
                self.err(format!("{name}: malformed value {v} ({e})"));
                None
            }
        }
    }
}

fn qualified(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}
