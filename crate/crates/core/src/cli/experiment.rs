//! End-to-end pipeline: build the graph and models, simulate, invert the
//! belief streams of every receiving agent, and write the results.
//!
//! Output layout (agents, hypotheses and sub-networks are 1-based):
//!
//! ```text
//! out/graph.csv                     combination matrix
//! out/divergence_matrix.csv         D
//! out/summary.json                  per-agent verdicts across trials
//! out/meta.json                     wall-clock timestamp (only non-deterministic file)
//! out/trial_<t>/trajectory.csv      time,agent,hypothesis,log_psi
//! out/trial_<t>/estimates.json      one record per receiving agent per observation time
//! out/trial_<t>/belief_evolution.csv
//! out/trial_<t>/weights.csv
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use super::config::{ExperimentConfig, GraphSource};
use crate::models::{
    divergence_profile, diversity_model, structured_gaussian_model, DivergenceMatrix, ModelError, ModelSuite,
};
use crate::social_learning::{empirical_rates, estimate_theta_star, simulate, LearningError, Trajectory};
use crate::topology_inference::{
    build_system_with, estimation_error, infer_from_rates, EstimateRecord, InferenceError, InferenceOptions,
};
use crate::weakgraph::{
    limiting_profile, random_weak_graph, read_weak_graph_csv, write_weak_graph_csv, GraphError, LimitingProfile,
    Partition, WeakGraph,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("graph stage: {0}")]
    Graph(#[from] GraphError),
    #[error("model stage: {0}")]
    Model(#[from] ModelError),
    #[error("simulation stage: {0}")]
    Simulation(#[from] LearningError),
    #[error("inference stage: {0}")]
    Inference(#[from] InferenceError),
    #[error("output stage: {0}")]
    Output(#[from] std::io::Error),
    #[error("output stage: {0}")]
    Json(#[from] serde_json::Error),
    #[error("graph stage: CSV partition {found:?} does not match the configured sizes {expected:?}")]
    PartitionMismatch {
        expected: (Vec<usize>, Vec<usize>),
        found: (Vec<usize>, Vec<usize>),
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub theta_star: usize,
    pub ambiguous: bool,
    pub l_inf: Option<f64>,
    pub l2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentSummary {
    pub agent: usize,
    /// Minimiser of the average divergence; `None` when it is not unique.
    pub theta_star: Option<usize>,
    pub x_true: Vec<f64>,
    pub rank: usize,
    pub feasible: bool,
    pub status: &'static str,
    pub median_l_inf: Option<f64>,
    pub trials: Vec<TrialOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub hypotheses: usize,
    pub sending_subnets: usize,
    pub agents: usize,
    pub steps: usize,
    pub trials: usize,
    pub final_observation_time: usize,
    pub all_identifiable: bool,
    pub receiving: Vec<AgentSummary>,
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub trajectory: Trajectory,
    pub records: Vec<EstimateRecord>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub output_dir: PathBuf,
    pub graph: WeakGraph,
    pub divergence: DivergenceMatrix,
    pub profile: LimitingProfile,
    pub summary: Summary,
    pub trials: Vec<TrialResult>,
}

impl ExperimentReport {
    pub fn trial_dir(&self, trial: usize) -> PathBuf {
        trial_dir(&self.output_dir, trial)
    }
}

fn trial_dir(out: &Path, trial: usize) -> PathBuf {
    out.join(format!("trial_{trial}"))
}

pub fn build_models(config: &ExperimentConfig) -> Result<(ModelSuite, DivergenceMatrix), ModelError> {
    let h = config.hypotheses;
    let (mut suite, d) = if config.perturb_range == 0.0 {
        structured_gaussian_model(&config.base_means[..h], config.num_senders())?
    } else {
        diversity_model(
            h,
            config.num_senders(),
            &config.base_means,
            config.perturb_range,
            config.model_seed.unwrap_or_default(),
        )?
    };
    if let Some(m) = config.receiving_true_mean {
        suite.receiving_default.true_mean = m;
    }
    Ok((suite, d))
}

pub fn build_graph(config: &ExperimentConfig) -> Result<WeakGraph, ExperimentError> {
    let partition = Partition::new(config.sending_sizes.clone(), config.receiving_sizes.clone())?;
    match &config.graph {
        GraphSource::Random { density, seed } => Ok(random_weak_graph(&partition, *density, *seed)?),
        GraphSource::Csv(path) => {
            let g = read_weak_graph_csv(File::open(path)?)?;
            if g.partition() != &partition {
                return Err(ExperimentError::PartitionMismatch {
                    expected: (config.sending_sizes.clone(), config.receiving_sizes.clone()),
                    found: (
                        g.partition().sending_sizes().to_vec(),
                        g.partition().receiving_sizes().to_vec(),
                    ),
                });
            }
            Ok(g)
        }
    }
}

/// Runs the whole pipeline and writes every output file.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    let graph = build_graph(config)?;
    let (suite, d) = build_models(config)?;
    let profile = limiting_profile(&graph)?;
    let part = graph.partition();
    let opts = InferenceOptions {
        rank_tol: config.inference.rank_tol,
        constraint_weight: config.inference.constraint_weight,
    };

    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    write_weak_graph_csv(&graph, BufWriter::new(File::create(out.join("graph.csv"))?))?;
    d.write_csv(BufWriter::new(File::create(out.join("divergence_matrix.csv"))?))?;

    // Theory side: dominant hypothesis and identifiability per receiving agent.
    let receivers: Vec<usize> = part.receiving_agents().collect();
    let mut theory = Vec::with_capacity(receivers.len());
    for (j, &k) in receivers.iter().enumerate() {
        let x = profile.aggregate_column(j);
        let dp = divergence_profile(&d, &x)?;
        let y: Vec<f64> = dp.values.iter().map(|v| dp.values[dp.theta_star] - v).collect();
        let sys = build_system_with(&d, dp.theta_star, &y, &opts)?;
        theory.push((k, x, dp, sys));
    }

    let trial_results: Vec<Result<TrialResult, ExperimentError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (1..=config.simulation.trials)
            .map(|trial| {
                let graph = &graph;
                let suite = &suite;
                let d = &d;
                let theory = &theory;
                scope.spawn(move || -> Result<TrialResult, ExperimentError> {
                    let seed = config.simulation.seed.wrapping_add(trial as u64 - 1);
                    let trajectory = simulate(
                        graph,
                        suite,
                        config.simulation.steps,
                        &config.simulation.sample_times,
                        seed,
                    )?;
                    let mut records = Vec::new();
                    for &time in &config.inference.observation_times {
                        for (k, x, _, _) in theory {
                            let y_hat = empirical_rates(&trajectory, *k, time)?;
                            let inference = infer_from_rates(d, &y_hat, &opts)?;
                            records.push(EstimateRecord::new(*k, time, &inference, x));
                        }
                    }
                    let dir = trial_dir(out, trial);
                    fs::create_dir_all(&dir)?;
                    trajectory.write_csv(File::create(dir.join("trajectory.csv"))?)?;
                    let mut w = BufWriter::new(File::create(dir.join("estimates.json"))?);
                    serde_json::to_writer_pretty(&mut w, &records)?;
                    writeln!(w)?;
                    w.flush()?;
                    Ok(TrialResult {
                        trial,
                        seed,
                        trajectory,
                        records,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("trial thread panicked"))
            .collect()
    });
    let trials = trial_results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let final_time = config.final_observation_time();
    let mut receiving = Vec::with_capacity(theory.len());
    for (k, x, dp, sys) in &theory {
        let outcomes: Vec<TrialOutcome> = trials
            .iter()
            .map(|t| {
                let rec = t
                    .records
                    .iter()
                    .find(|r| r.agent == k + 1 && r.observation_time == final_time)
                    .expect("record for every agent at the final observation time");
                let err = (!rec.x_hat.is_empty())
                    .then(|| estimation_error(&rec.x_hat, x).ok())
                    .flatten();
                TrialOutcome {
                    trial: t.trial,
                    theta_star: rec.theta_star,
                    ambiguous: empirical_rates(&t.trajectory, *k, final_time)
                        .map(|y| estimate_theta_star(&y).ambiguous)
                        .unwrap_or(false),
                    l_inf: err.map(|e| e.l_inf),
                    l2: err.map(|e| e.l2),
                }
            })
            .collect();
        let errs: Vec<f64> = outcomes.iter().filter_map(|o| o.l_inf).collect();
        receiving.push(AgentSummary {
            agent: k + 1,
            theta_star: (!dp.tie).then_some(dp.theta_star + 1),
            x_true: x.clone(),
            rank: sys.rank,
            feasible: sys.feasible,
            status: if sys.feasible {
                "identifiable"
            } else {
                "non_identifiable"
            },
            median_l_inf: median(&errs),
            trials: outcomes,
        });
    }
    let summary = Summary {
        hypotheses: config.hypotheses,
        sending_subnets: config.num_senders(),
        agents: part.num_agents(),
        steps: config.simulation.steps,
        trials: config.simulation.trials,
        final_observation_time: final_time,
        all_identifiable: receiving.iter().all(|a| a.feasible),
        receiving,
    };
    let mut w = BufWriter::new(File::create(out.join("summary.json"))?);
    serde_json::to_writer_pretty(&mut w, &summary)?;
    writeln!(w)?;
    w.flush()?;

    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    fs::write(
        out.join("meta.json"),
        format!("{{\n  \"finished_unix_seconds\": {stamp}\n}}\n"),
    )?;

    let report = ExperimentReport {
        output_dir: out.clone(),
        graph,
        divergence: d,
        profile,
        summary,
        trials,
    };
    emit_plot_data(&report)?;
    Ok(report)
}

/// Writes `belief_evolution.csv` and `weights.csv` into every trial
/// directory. Weights come from the final observation time.
pub fn emit_plot_data(report: &ExperimentReport) -> Result<(), ExperimentError> {
    let final_time = report.summary.final_observation_time;
    let h = report.summary.hypotheses;
    for trial in &report.trials {
        let dir = report.trial_dir(trial.trial);
        fs::create_dir_all(&dir)?;

        let mut w = BufWriter::new(File::create(dir.join("belief_evolution.csv"))?);
        let cols: Vec<String> = (1..=h).map(|t| format!("mu_{t}")).collect();
        writeln!(w, "time,agent,{}", cols.join(","))?;
        for snap in &trial.trajectory.snapshots {
            for (k, mu) in snap.mu.iter().enumerate() {
                let probs: Vec<String> = mu.probabilities().iter().map(|p| p.to_string()).collect();
                writeln!(w, "{},{},{}", snap.time, k + 1, probs.join(","))?;
            }
        }
        w.flush()?;

        let mut w = BufWriter::new(File::create(dir.join("weights.csv"))?);
        writeln!(w, "agent,s,x_true,x_hat")?;
        for rec in trial.records.iter().filter(|r| r.observation_time == final_time) {
            for (s, xt) in rec.x_true.iter().enumerate() {
                let xh = rec.x_hat.get(s).map(|v| v.to_string()).unwrap_or_default();
                writeln!(w, "{},{},{},{}", rec.agent, s + 1, xt, xh)?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

pub(crate) fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }
}
