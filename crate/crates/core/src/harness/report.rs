use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{EnvKind, ExperimentConfig};
use super::run::{build_learner, EvalReport, RunOutput};
use crate::env::{MultiAgentEnv, Phase, TwoStepGame};
use crate::error::{Error, Result};
use crate::learner::{QLearner, TrainRecord};
use crate::tensor::{read_checkpoint, write_checkpoint, ParamStore};

pub const CSV_HEADER: [&str; 7] = ["episode", "env_steps", "metric_name", "value", "seed", "algorithm", "scenario"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub episode: u64,
    pub env_steps: u64,
    pub metric_name: String,
    pub value: f64,
    pub seed: u64,
    pub algorithm: String,
    pub scenario: String,
}

/// One row per checkpoint metric: mean test return always, test win
/// rate where winning is defined.
pub fn metric_rows(cfg: &ExperimentConfig, report: &EvalReport) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for p in &report.points {
        let mut push = |name: &str, value: f64| {
            rows.push(MetricRow {
                episode: p.episode,
                env_steps: p.env_steps,
                metric_name: name.to_string(),
                value,
                seed: cfg.seed,
                algorithm: cfg.algorithm.to_string(),
                scenario: cfg.scenario_name().to_string(),
            })
        };
        if let Some(w) = p.win_rate {
            push("test_win_rate", w);
        }
        push("test_return_mean", p.mean_return);
    }
    rows
}

pub fn write_metrics_csv<W: Write>(w: W, rows: &[MetricRow]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Contract("no metrics to write".into()));
    }
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: std::io::Read>(r: R) -> Result<Vec<MetricRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_owned).collect();
    if header != CSV_HEADER {
        return Err(Error::Format(format!("unexpected metrics header {header:?}")));
    }
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_train_log<W: Write>(mut w: W, log: &[TrainRecord]) -> Result<()> {
    for r in log {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Joint values of the two-step game at every joint action, `[u1][u2]`
/// per phase, plus each agent's utilities.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QtotTable {
    pub phases: Vec<PhaseValues>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhaseValues {
    pub label: &'static str,
    /// `None` for independent learners, which have no joint value.
    pub joint: Option<[[f64; 2]; 2]>,
    pub utilities: [[f64; 2]; 2],
}

pub const QTOT_PHASES: [(Phase, &str); 3] = [
    (Phase::State1, "State 1"),
    (Phase::State2A, "State 2A"),
    (Phase::State2B, "State 2B"),
];

pub fn dump_qtot_table(cfg: &ExperimentConfig, learner: &QLearner, params: &ParamStore) -> Result<QtotTable> {
    if cfg.env != EnvKind::TwoStep {
        return Err(Error::config("env", "joint-value tables are defined for the two-step game"));
    }
    let mut game = TwoStepGame::new(cfg.train.gamma);
    game.reset(0);
    let n = 2;
    let mut phases = Vec::new();
    for (phase, label) in QTOT_PHASES {
        game.set_phase(phase);
        let obs = game.observations().concat();
        let state = game.state();
        let inputs = learner.agent.build_inputs(&obs, None, n)?;
        let (q, _) = learner.agent.step(params, &inputs, &[], n)?;
        let utilities = [[q[0], q[1]], [q[2], q[3]]];
        let joint = if learner.mixer.kind().is_factored() {
            let mut m = [[0.0; 2]; 2];
            for (u1, row) in m.iter_mut().enumerate() {
                for (u2, v) in row.iter_mut().enumerate() {
                    *v = learner.mixer.evaluate(params, &[q[u1], q[2 + u2]], &state, 1)?[0];
                }
            }
            Some(m)
        } else {
            None
        };
        phases.push(PhaseValues { label, joint, utilities });
    }
    Ok(QtotTable { phases })
}

impl QtotTable {
    pub fn joint(&self, phase: Phase) -> Option<[[f64; 2]; 2]> {
        let i = QTOT_PHASES.iter().position(|(p, _)| *p == phase)?;
        self.phases[i].joint
    }
}

impl fmt::Display for QtotTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.phases {
            writeln!(f, "{}", p.label)?;
            match p.joint {
                Some(m) => {
                    writeln!(f, "        A       B")?;
                    for (name, row) in ["A", "B"].iter().zip(m) {
                        writeln!(f, "  {name} {:>7.2} {:>7.2}", row[0], row[1])?;
                    }
                }
                None => {
                    for (a, u) in p.utilities.iter().enumerate() {
                        writeln!(f, "  agent {}: A {:>7.2}  B {:>7.2}", a + 1, u[0], u[1])?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Percentile bootstrap interval for the median.
pub fn bootstrap_median_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Option<(f64, f64)> {
    if values.is_empty() || resamples == 0 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            let sample: Vec<f64> = (0..values.len())
                .map(|_| values[rng.random_range(0..values.len())])
                .collect();
            median(&sample).expect("non-empty")
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| stats[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Some((at(tail), at(1.0 - tail)))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub finals: Vec<f64>,
    pub median: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Median and bootstrap 95% interval of per-seed final values.
pub fn summarise(seeds: &[u64], finals: &[f64]) -> Result<SeedSummary> {
    let median = median(finals).ok_or_else(|| Error::Contract("no runs to summarise".into()))?;
    let (ci_low, ci_high) = bootstrap_median_ci(finals, 10_000, 0.95, 0).expect("non-empty");
    Ok(SeedSummary {
        seeds: seeds.to_vec(),
        finals: finals.to_vec(),
        median,
        ci_low,
        ci_high,
    })
}

/// Headline value of the last evaluation: win rate where defined,
/// mean return otherwise.
pub fn final_metric(out: &RunOutput) -> f64 {
    out.report
        .last()
        .map(|p| p.win_rate.unwrap_or(p.mean_return))
        .unwrap_or(f64::NAN)
}

/// The effective config travels next to the checkpoint as `<file>.toml`.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".toml");
    PathBuf::from(s)
}

pub fn save_checkpoint(path: &Path, cfg: &ExperimentConfig, params: &ParamStore) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), params)?;
    let text = toml::to_string(cfg).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(sidecar_path(path), text)?;
    Ok(())
}

/// Reads a checkpoint and its config, rebuilding the learner around the
/// stored parameters.
pub fn load_checkpoint(path: &Path) -> Result<(ExperimentConfig, QLearner, ParamStore)> {
    let text = std::fs::read_to_string(sidecar_path(path))?;
    let cfg: ExperimentConfig = toml::from_str(&text)?;
    cfg.validate()?;
    let stored = read_checkpoint(BufReader::new(File::open(path)?))?;
    let env = super::run::AnyEnv::from_config(&cfg)?;
    let (learner, mut params) = build_learner(&cfg, &env.spec())?;
    params.copy_from(&stored)?;
    Ok((cfg, learner, params))
}
