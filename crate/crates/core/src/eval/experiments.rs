use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::apg::{build_graph, divide_abstract_states, Apg, ApgError};
use crate::mdp::{State, TabularMdp};
use crate::seed::SeedStream;

use super::oracle::{ground_truth_relevant_features, true_action_horizon};
use super::sampling::sample_transition_set;
use super::{prepare_instance, EvalError, ExperimentConfig, Instance};

pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<(), EvalError> {
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mu = mean(xs);
    (xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn prepare_all(config: &ExperimentConfig, m: usize, label: &str) -> Result<Vec<Instance>, EvalError> {
    let root = SeedStream::new(config.seed).child(label, m as u64);
    (0..config.num_instances)
        .into_par_iter()
        .map(|i| prepare_instance(m, config.rho, config.epsilon, root.child("instance", i as u64), i))
        .collect()
}

fn build_apg(inst: &Instance, coverage: f64, index: u64) -> Result<Apg, EvalError> {
    let sol = &inst.solution;
    let mut rng = inst.stream.rng("coverage", index);
    let tuples = sample_transition_set(&inst.domain, &sol.policy, coverage, &mut rng)?;
    let division = divide_abstract_states(
        &tuples,
        &sol.policy,
        |s| sol.values.value(s).unwrap_or(f64::NAN),
        inst.epsilon,
    )?;
    Ok(build_graph(&division, &sol.policy)?)
}

fn eval_states(inst: &Instance, count: usize) -> Vec<State> {
    let states = inst.domain.non_terminal_states();
    let mut rng = inst.stream.rng("eval", 0);
    (0..count).map(|_| states[rng.gen_range(0..states.len())]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneralizationInstanceRow {
    pub instance: usize,
    pub rho: f64,
    pub coverage: f64,
    pub epsilon: f64,
    pub nodes: usize,
    pub accuracy: f64,
    /// Evaluation states whose action class had no node.
    pub unclassified: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneralizationRow {
    pub rho: f64,
    pub coverage: f64,
    pub instances: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub min_accuracy: f64,
    pub unclassified: usize,
}

#[derive(Debug, Clone)]
pub struct GeneralizationResult {
    pub instances: Vec<GeneralizationInstanceRow>,
    pub summary: Vec<GeneralizationRow>,
}

fn feature_agreement(m: usize, predicted: &BTreeSet<usize>, truth: &BTreeSet<usize>) -> usize {
    (1..=m)
        .filter(|f| predicted.contains(f) == truth.contains(f))
        .count()
}

/// Per-feature agreement between the relevant features an APG built from
/// partial data assigns to held-out states and those of a reference APG
/// built from every non-terminal state.
pub fn run_generalization(config: &ExperimentConfig) -> Result<GeneralizationResult, EvalError> {
    config.validate()?;
    let m = config.m;
    let instances = prepare_all(config, m, "generalization")?;
    let per_instance: Vec<Vec<GeneralizationInstanceRow>> = instances
        .par_iter()
        .map(|inst| {
            let sol = &inst.solution;
            let mut truth_rng = inst.stream.rng("truth", 0);
            let truth =
                ground_truth_relevant_features(&inst.domain, &sol.policy, &sol.values, inst.epsilon, &mut truth_rng)?;
            let evals = eval_states(inst, config.num_evals);
            config
                .coverage
                .iter()
                .enumerate()
                .map(|(ci, &coverage)| {
                    let apg = build_apg(inst, coverage, ci as u64)?;
                    let mut correct = 0;
                    let mut unclassified = 0;
                    for s in &evals {
                        let predicted = match apg.relevant_features(s, &sol.policy) {
                            Ok(f) => f,
                            Err(ApgError::Unclassifiable { .. }) => {
                                unclassified += 1;
                                BTreeSet::new()
                            }
                            Err(e) => return Err(e.into()),
                        };
                        correct += feature_agreement(m, &predicted, &truth.features[s]);
                    }
                    Ok(GeneralizationInstanceRow {
                        instance: inst.index,
                        rho: config.rho,
                        coverage,
                        epsilon: inst.epsilon,
                        nodes: apg.num_nodes(),
                        accuracy: correct as f64 / (m * evals.len()) as f64,
                        unclassified,
                    })
                })
                .collect()
        })
        .collect::<Result<_, EvalError>>()?;
    let rows: Vec<GeneralizationInstanceRow> = per_instance.into_iter().flatten().collect();
    let summary = config
        .coverage
        .iter()
        .map(|&coverage| {
            let group: Vec<&GeneralizationInstanceRow> = rows.iter().filter(|r| r.coverage == coverage).collect();
            let acc: Vec<f64> = group.iter().map(|r| r.accuracy).collect();
            GeneralizationRow {
                rho: config.rho,
                coverage,
                instances: group.len(),
                mean_accuracy: mean(&acc),
                std_accuracy: std_dev(&acc),
                min_accuracy: acc.iter().copied().fold(f64::INFINITY, f64::min),
                unclassified: group.iter().map(|r| r.unclassified).sum(),
            }
        })
        .collect();
    Ok(GeneralizationResult {
        instances: rows,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NhopInstanceRow {
    pub instance: usize,
    pub rho: f64,
    pub n: usize,
    pub agreement: f64,
    pub mean_tv: f64,
    /// Start states whose action class had no node; left out of the means.
    pub unclassified: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NhopRow {
    pub rho: f64,
    pub n: usize,
    pub instances: usize,
    pub mean_agreement: f64,
    pub std_agreement: f64,
    pub mean_tv: f64,
    pub unclassified: usize,
}

#[derive(Debug, Clone)]
pub struct NhopResult {
    pub instances: Vec<NhopInstanceRow>,
    pub summary: Vec<NhopRow>,
}

/// Compares the modal action `n` steps ahead predicted by the abstract
/// chain with the exact modal action of the grounded chain.
pub fn run_nhop(config: &ExperimentConfig) -> Result<NhopResult, EvalError> {
    config.validate()?;
    let horizon = config.horizon;
    let coverage = config.coverage[0];
    let instances = prepare_all(config, config.m, "nhop")?;
    let per_instance: Vec<Vec<NhopInstanceRow>> = instances
        .par_iter()
        .map(|inst| {
            let policy = &inst.solution.policy;
            let apg = build_apg(inst, coverage, 0)?;
            let evals = eval_states(inst, config.num_evals);
            let mut agree = vec![0usize; horizon + 1];
            let mut tv = vec![0.0; horizon + 1];
            let mut unclassified = 0;
            for s in &evals {
                let truth = true_action_horizon(&inst.domain, policy, s, horizon)?;
                let predicted = match apg.predict_horizon(s, horizon, policy) {
                    Ok(p) => p,
                    Err(ApgError::Unclassifiable { .. }) => {
                        unclassified += 1;
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                };
                for n in 0..=horizon {
                    if predicted[n].modal() == truth[n].modal() {
                        agree[n] += 1;
                    }
                    tv[n] += predicted[n].total_variation(&truth[n]);
                }
            }
            let k = (evals.len() - unclassified).max(1) as f64;
            Ok((0..=horizon)
                .map(|n| NhopInstanceRow {
                    instance: inst.index,
                    rho: config.rho,
                    n,
                    agreement: agree[n] as f64 / k,
                    mean_tv: tv[n] / k,
                    unclassified,
                })
                .collect())
        })
        .collect::<Result<_, EvalError>>()?;
    let rows: Vec<NhopInstanceRow> = per_instance.into_iter().flatten().collect();
    let summary = (0..=horizon)
        .map(|n| {
            let group: Vec<&NhopInstanceRow> = rows.iter().filter(|r| r.n == n).collect();
            let agreement: Vec<f64> = group.iter().map(|r| r.agreement).collect();
            let tv: Vec<f64> = group.iter().map(|r| r.mean_tv).collect();
            NhopRow {
                rho: config.rho,
                n,
                instances: group.len(),
                mean_agreement: mean(&agreement),
                std_agreement: std_dev(&agreement),
                mean_tv: mean(&tv),
                unclassified: group.iter().map(|r| r.unclassified).sum(),
            }
        })
        .collect();
    Ok(NhopResult {
        instances: rows,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeInstanceRow {
    pub m: usize,
    pub instance: usize,
    pub epsilon: f64,
    pub tuples: usize,
    pub nodes: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeRow {
    pub m: usize,
    pub instances: usize,
    pub median_nodes: f64,
    pub mean_nodes: f64,
    pub min_nodes: usize,
    pub max_nodes: usize,
    /// Median node count divided by `2^m`.
    pub median_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct SizeResult {
    pub instances: Vec<SizeInstanceRow>,
    pub summary: Vec<SizeRow>,
}

/// APG node counts against domain size.
pub fn run_size(config: &ExperimentConfig) -> Result<SizeResult, EvalError> {
    config.validate()?;
    let coverage = config.coverage[0];
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &m in &config.m_values {
        let instances = prepare_all(config, m, "size")?;
        let group: Vec<SizeInstanceRow> = instances
            .par_iter()
            .map(|inst| {
                let sol = &inst.solution;
                let mut rng = inst.stream.rng("coverage", 0);
                let tuples = sample_transition_set(&inst.domain, &sol.policy, coverage, &mut rng)?;
                let division = divide_abstract_states(
                    &tuples,
                    &sol.policy,
                    |s| sol.values.value(s).unwrap_or(f64::NAN),
                    inst.epsilon,
                )?;
                Ok(SizeInstanceRow {
                    m,
                    instance: inst.index,
                    epsilon: inst.epsilon,
                    tuples: tuples.len(),
                    nodes: division.states.len(),
                    ratio: division.states.len() as f64 / (1u64 << m) as f64,
                })
            })
            .collect::<Result<_, EvalError>>()?;
        let nodes: Vec<f64> = group.iter().map(|r| r.nodes as f64).collect();
        let med = median(&nodes);
        summary.push(SizeRow {
            m,
            instances: group.len(),
            median_nodes: med,
            mean_nodes: mean(&nodes),
            min_nodes: group.iter().map(|r| r.nodes).min().unwrap_or(0),
            max_nodes: group.iter().map(|r| r.nodes).max().unwrap_or(0),
            median_ratio: med / (1u64 << m) as f64,
        });
        log::info!("size m={m}: median {med} nodes");
        rows.extend(group);
    }
    Ok(SizeResult {
        instances: rows,
        summary,
    })
}
