//! Synthetic longitudinal cohort generator: irregular visit times,
//! monotone-trending severity grades, and observation vectors that are noisy
//! nonlinear functions of the latent severity. Also builds the
//! consecutive-pair set and the downstream task splits.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_GRADE: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Eye {
    L,
    R,
}

/// One exam: years since the first exam, severity grade, observation vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub t: f64,
    #[serde(rename = "S")]
    pub grade: u8,
    pub x: Vec<f64>,
}

impl Visit {
    pub fn observation(&self) -> Tensor {
        Tensor::vector(self.x.clone())
    }
}

/// One eye's ordered exam sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub patient_id: u64,
    pub eye: Eye,
    pub visits: Vec<Visit>,
    /// Latent progression rate in grades/year.
    pub progression_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortConfig {
    pub n_patients: usize,
    pub eyes_per_patient: usize,
    pub visits_min: usize,
    pub visits_max: usize,
    /// Inter-visit gaps are lognormal with this median (years).
    pub gap_median_years: f64,
    pub gap_sigma: f64,
    /// Probability a patient progresses at all; non-progressors have rate 0.
    pub progressor_fraction: f64,
    pub rate_min: f64,
    pub rate_max: f64,
    /// Baseline severity is uniform on [0, baseline_max].
    pub baseline_max: f64,
    /// Scale of the Brownian drift added to the severity trend.
    pub drift_sigma: f64,
    pub obs_dim: usize,
    /// Stddev of the additive observation noise.
    pub obs_noise: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            n_patients: 100,
            eyes_per_patient: 1,
            visits_min: 3,
            visits_max: 8,
            gap_median_years: 1.0,
            gap_sigma: 0.5,
            progressor_fraction: 0.5,
            rate_min: 0.2,
            rate_max: 1.5,
            baseline_max: 1.5,
            drift_sigma: 0.2,
            obs_dim: 32,
            obs_noise: 0.12,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients < 1 {
            return Err(Error::Contract("cohort needs at least one patient".into()));
        }
        if !(1..=2).contains(&self.eyes_per_patient) {
            return Err(Error::Contract("eyes_per_patient must be 1 or 2".into()));
        }
        if self.visits_min < 2 || self.visits_max < self.visits_min {
            return Err(Error::Contract(
                "visit range must satisfy 2 <= visits_min <= visits_max".into(),
            ));
        }
        if !(self.gap_median_years > 0.0) || !(self.gap_sigma > 0.0) {
            return Err(Error::Contract("gap distribution parameters must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.progressor_fraction) {
            return Err(Error::Contract("progressor_fraction must be in [0, 1]".into()));
        }
        if !(self.rate_min > 0.0) || self.rate_max < self.rate_min {
            return Err(Error::Contract("progression rate range invalid".into()));
        }
        if self.baseline_max < 0.0 || self.baseline_max > MAX_GRADE as f64 {
            return Err(Error::Contract("baseline_max out of grade range".into()));
        }
        if self.drift_sigma < 0.0 || self.obs_noise < 0.0 {
            return Err(Error::Contract("noise scales must be non-negative".into()));
        }
        if self.obs_dim < 1 {
            return Err(Error::Contract("obs_dim must be at least 1".into()));
        }
        Ok(())
    }
}

/// Number of features in the smooth severity lift below.
const LIFT_DIM: usize = 8;

/// RNG stream reserved for the patient-level split shuffle.
const SPLIT_STREAM: u64 = 0xC0F0_57A7;

/// Fixed smooth feature lift of (severity, time); the observation map
/// projects it through a frozen random matrix and adds noise. Severity
/// enters only through nonlinear features so it cannot be read off by a
/// random projection alone.
fn lift(s: f64, t: f64) -> [f64; LIFT_DIM] {
    [
        (2.1 * s + 0.3).sin(),
        (1.7 * s - 0.2).cos(),
        (1.1 * s).sin() * (0.6 * s).cos(),
        (1.5 * (s - 2.0)).tanh(),
        (-0.8 * s).exp(),
        (s / 4.0) * (s / 4.0) - 0.5 * (s / 4.0),
        0.3 * (0.7 * t).sin(),
        0.3 * (1.1 * t).cos(),
    ]
}

/// Frozen projection matrix for the observation map, derived from the seed.
fn observation_matrix(cfg: &CohortConfig, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let normal = Normal::new(0.0, 1.0 / (LIFT_DIM as f64).sqrt()).unwrap();
    (0..cfg.obs_dim * LIFT_DIM).map(|_| normal.sample(&mut rng)).collect()
}

/// Deterministic cohort generation; every patient draws from an independent
/// stream derived from the seed.
pub fn generate_cohort(cfg: &CohortConfig, seed: u64) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    let matrix = observation_matrix(cfg, seed);
    let unit_normal = Normal::new(0.0, 1.0).unwrap();
    let mut cohort = Vec::with_capacity(cfg.n_patients * cfg.eyes_per_patient);
    for patient in 0..cfg.n_patients {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(patient as u64);
        let progresses = rng.gen_bool(cfg.progressor_fraction);
        let rate = if progresses {
            rng.gen_range(cfg.rate_min..cfg.rate_max)
        } else {
            0.0
        };
        for eye_idx in 0..cfg.eyes_per_patient {
            let eye = if eye_idx == 0 { Eye::L } else { Eye::R };
            let m = rng.gen_range(cfg.visits_min..=cfg.visits_max);
            let baseline = rng.gen_range(0.0..=cfg.baseline_max);
            let mut t = 0.0;
            let mut drift = 0.0;
            let mut visits = Vec::with_capacity(m);
            for k in 0..m {
                if k > 0 {
                    let gap = (cfg.gap_median_years.ln()
                        + cfg.gap_sigma * unit_normal.sample(&mut rng))
                    .exp();
                    drift += cfg.drift_sigma * gap.sqrt() * unit_normal.sample(&mut rng);
                    t += gap;
                }
                let latent = (baseline + rate * t + drift).clamp(0.0, MAX_GRADE as f64);
                let grade = latent.round() as u8;
                let phi = lift(latent, t);
                let x: Vec<f64> = (0..cfg.obs_dim)
                    .map(|r| {
                        let proj: f64 = (0..LIFT_DIM)
                            .map(|c| matrix[r * LIFT_DIM + c] * phi[c])
                            .sum();
                        proj + cfg.obs_noise * unit_normal.sample(&mut rng)
                    })
                    .collect();
                visits.push(Visit { t, grade, x });
            }
            cohort.push(Trajectory {
                patient_id: patient as u64,
                eye,
                visits,
                progression_rate: rate,
            });
        }
    }
    Ok(cohort)
}

/// One element of the consecutive-pair set: two same-eye visits with
/// `t_b > t_a`.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub patient_id: u64,
    pub eye: Eye,
    pub x_a: Tensor,
    pub x_b: Tensor,
    pub t_a: f64,
    pub t_b: f64,
    pub grade_a: u8,
    pub grade_b: u8,
}

impl PairSample {
    pub fn delta_t(&self) -> f64 {
        self.t_b - self.t_a
    }
}

/// All and only consecutive same-eye visit pairs, in cohort order.
pub fn build_pairs(cohort: &[Trajectory]) -> Vec<PairSample> {
    let mut pairs = Vec::new();
    for traj in cohort {
        for w in traj.visits.windows(2) {
            pairs.push(PairSample {
                patient_id: traj.patient_id,
                eye: traj.eye,
                x_a: w[0].observation(),
                x_b: w[1].observation(),
                t_a: w[0].t,
                t_b: w[1].t,
                grade_a: w[0].grade,
                grade_b: w[1].grade,
            });
        }
    }
    pairs
}

/// Downstream task definition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    /// Predict the grade at a fixed horizon (1, 2, or 3 years), matched
    /// against real future visits within a tolerance.
    FixedHorizon { years: f64 },
    /// Predict the grade at whatever time the next visit actually happened.
    VariableInterval,
}

impl Task {
    pub fn label(&self) -> String {
        match self {
            Task::FixedHorizon { years } => format!("task1({years}y)"),
            Task::VariableInterval => "task2".to_string(),
        }
    }
}

/// One labeled downstream example: the visit history available at prediction
/// time, plus the target time and grade. The target visit's observation is
/// never part of the input.
#[derive(Debug, Clone)]
pub struct TaskExample {
    pub patient_id: u64,
    pub input_visits: Vec<Visit>,
    pub target_time: f64,
    pub target_grade: u8,
}

#[derive(Debug, Clone)]
pub struct TaskSplits {
    pub train: Vec<TaskExample>,
    pub val: Vec<TaskExample>,
    pub test: Vec<TaskExample>,
}

impl TaskSplits {
    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

fn trajectory_examples(traj: &Trajectory, task: Task, tol_years: f64) -> Vec<TaskExample> {
    let mut out = Vec::new();
    match task {
        Task::VariableInterval => {
            for i in 0..traj.visits.len() - 1 {
                out.push(TaskExample {
                    patient_id: traj.patient_id,
                    input_visits: traj.visits[..=i].to_vec(),
                    target_time: traj.visits[i + 1].t,
                    target_grade: traj.visits[i + 1].grade,
                });
            }
        }
        Task::FixedHorizon { years } => {
            for i in 0..traj.visits.len() - 1 {
                let wanted = traj.visits[i].t + years;
                let best = traj.visits[i + 1..]
                    .iter()
                    .map(|v| (v, (v.t - wanted).abs()))
                    .filter(|(_, d)| *d <= tol_years)
                    .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
                if let Some((target, _)) = best {
                    out.push(TaskExample {
                        patient_id: traj.patient_id,
                        input_visits: traj.visits[..=i].to_vec(),
                        target_time: target.t,
                        target_grade: target.grade,
                    });
                }
            }
        }
    }
    out
}

/// Build labeled examples and split them 70/10/20 at the patient level, so
/// no patient contributes to two splits. Deterministic in `seed`.
pub fn task_splits(
    cohort: &[Trajectory],
    task: Task,
    tol_years: f64,
    seed: u64,
) -> Result<TaskSplits> {
    if cohort.is_empty() {
        return Err(Error::Contract("task_splits requires a non-empty cohort".into()));
    }
    if let Task::FixedHorizon { years } = task {
        if !(years > 0.0) {
            return Err(Error::Contract("fixed horizon must be positive".into()));
        }
    }
    let mut patients: Vec<u64> = cohort.iter().map(|t| t.patient_id).collect();
    patients.sort_unstable();
    patients.dedup();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    // Fisher-Yates over the sorted patient list.
    for i in (1..patients.len()).rev() {
        let j = rng.gen_range(0..=i);
        patients.swap(i, j);
    }
    let n = patients.len();
    let n_train = (n as f64 * 0.7).floor() as usize;
    let n_val = (n as f64 * 0.1).floor() as usize;
    let assign = |pid: u64| -> usize {
        let pos = patients.iter().position(|&p| p == pid).unwrap();
        if pos < n_train {
            0
        } else if pos < n_train + n_val {
            1
        } else {
            2
        }
    };

    let mut splits = TaskSplits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for traj in cohort {
        let bucket = assign(traj.patient_id);
        for ex in trajectory_examples(traj, task, tol_years) {
            match bucket {
                0 => splits.train.push(ex),
                1 => splits.val.push(ex),
                _ => splits.test.push(ex),
            }
        }
    }
    for (name, part) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
    ] {
        if part.is_empty() {
            return Err(Error::EmptySplit(format!(
                "{} split of {} is empty",
                name,
                task.label()
            )));
        }
    }
    Ok(splits)
}

/// Persist a cohort as line-delimited JSON, one trajectory per line.
/// Values round-trip bit-exactly.
pub fn save_cohort(path: &Path, cohort: &[Trajectory]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for traj in cohort {
        serde_json::to_writer(&mut file, traj)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_cohort(path: &Path) -> Result<Vec<Trajectory>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> CohortConfig {
        CohortConfig {
            n_patients: 40,
            obs_dim: 8,
            ..CohortConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let a = generate_cohort(&cfg, 11).unwrap();
        let b = generate_cohort(&cfg, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_cohort(&cfg, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn flat_cohort_has_zero_rates_everywhere() {
        let cfg = CohortConfig {
            progressor_fraction: 0.0,
            drift_sigma: 0.0,
            ..small_cfg()
        };
        let cohort = generate_cohort(&cfg, 3).unwrap();
        let pairs = build_pairs(&cohort);
        assert!(!pairs.is_empty());
        assert!(pairs.iter().all(|p| p.grade_a == p.grade_b));
    }

    #[test]
    fn degenerate_config_is_rejected() {
        let cfg = CohortConfig {
            n_patients: 0,
            ..CohortConfig::default()
        };
        assert!(generate_cohort(&cfg, 0).is_err());
        let cfg = CohortConfig {
            visits_min: 0,
            ..CohortConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn visit_times_strictly_increase_and_grades_in_range() {
        let cohort = generate_cohort(&small_cfg(), 5).unwrap();
        for traj in &cohort {
            assert!(traj.visits.len() >= 2);
            assert!(traj.visits.windows(2).all(|w| w[1].t > w[0].t));
            assert!(traj.visits.iter().all(|v| v.grade <= MAX_GRADE));
        }
    }

    #[test]
    fn every_grade_appears_in_a_default_cohort() {
        let cfg = CohortConfig {
            n_patients: 500,
            obs_dim: 4,
            ..CohortConfig::default()
        };
        let cohort = generate_cohort(&cfg, 1).unwrap();
        let mut seen = [false; 5];
        for traj in &cohort {
            for v in &traj.visits {
                seen[v.grade as usize] = true;
            }
        }
        assert!(seen.iter().all(|s| *s), "grade marginals {seen:?}");
    }

    #[test]
    fn pair_counts_follow_visit_counts() {
        let mut traj = Trajectory {
            patient_id: 1,
            eye: Eye::L,
            visits: (0..2)
                .map(|i| Visit {
                    t: i as f64,
                    grade: 0,
                    x: vec![0.0],
                })
                .collect(),
            progression_rate: 0.0,
        };
        assert_eq!(build_pairs(std::slice::from_ref(&traj)).len(), 1);
        traj.visits = (0..5)
            .map(|i| Visit {
                t: i as f64,
                grade: 0,
                x: vec![0.0],
            })
            .collect();
        assert_eq!(build_pairs(std::slice::from_ref(&traj)).len(), 4);
    }

    #[test]
    fn pairs_never_cross_patients_or_eyes() {
        let cfg = CohortConfig {
            eyes_per_patient: 2,
            ..small_cfg()
        };
        let cohort = generate_cohort(&cfg, 9).unwrap();
        let pairs = build_pairs(&cohort);
        // Each pair's endpoints must appear consecutively in exactly one
        // trajectory of the same patient and eye.
        for p in &pairs {
            let traj = cohort
                .iter()
                .find(|t| t.patient_id == p.patient_id && t.eye == p.eye)
                .unwrap();
            let idx = traj
                .visits
                .iter()
                .position(|v| v.t == p.t_a)
                .expect("pair start exists in trajectory");
            assert_eq!(traj.visits[idx + 1].t, p.t_b);
        }
        let expected: usize = cohort.iter().map(|t| t.visits.len() - 1).sum();
        assert_eq!(pairs.len(), expected);
    }

    #[test]
    fn splits_are_patient_disjoint() {
        let cohort = generate_cohort(&small_cfg(), 21).unwrap();
        let splits = task_splits(&cohort, Task::VariableInterval, 0.25, 21).unwrap();
        let ids = |xs: &[TaskExample]| -> std::collections::BTreeSet<u64> {
            xs.iter().map(|e| e.patient_id).collect()
        };
        let train = ids(&splits.train);
        let val = ids(&splits.val);
        let test = ids(&splits.test);
        assert!(train.is_disjoint(&val));
        assert!(train.is_disjoint(&test));
        assert!(val.is_disjoint(&test));
    }

    #[test]
    fn no_target_observation_leaks_into_inputs() {
        let cohort = generate_cohort(&small_cfg(), 33).unwrap();
        for task in [Task::VariableInterval, Task::FixedHorizon { years: 1.0 }] {
            let splits = task_splits(&cohort, task, 0.25, 33).unwrap();
            for ex in splits.train.iter().chain(&splits.val).chain(&splits.test) {
                assert!(ex.input_visits.iter().all(|v| v.t < ex.target_time));
            }
        }
    }

    #[test]
    fn zero_tolerance_starves_fixed_horizon_examples() {
        let cohort = generate_cohort(&small_cfg(), 4).unwrap();
        let loose = task_splits(&cohort, Task::FixedHorizon { years: 1.0 }, 0.25, 4)
            .map(|s| s.total())
            .unwrap_or(0);
        let strict = task_splits(&cohort, Task::FixedHorizon { years: 1.0 }, 1e-9, 4)
            .map(|s| s.total())
            .unwrap_or(0);
        assert!(strict < loose / 10, "strict {strict} loose {loose}");
    }

    #[test]
    fn severity_trend_is_non_negative_on_average() {
        let cohort = generate_cohort(&CohortConfig { n_patients: 300, obs_dim: 4, ..CohortConfig::default() }, 7).unwrap();
        let pairs = build_pairs(&cohort);
        let mean_step: f64 = pairs
            .iter()
            .map(|p| p.grade_b as f64 - p.grade_a as f64)
            .sum::<f64>()
            / pairs.len() as f64;
        assert!(mean_step >= 0.0, "mean grade step {mean_step}");
    }

    #[test]
    fn progressing_fraction_in_expected_window() {
        let cfg = CohortConfig {
            n_patients: 1000,
            obs_dim: 4,
            ..CohortConfig::default()
        };
        let pairs = build_pairs(&generate_cohort(&cfg, 40).unwrap());
        let progressing =
            pairs.iter().filter(|p| p.grade_b > p.grade_a).count() as f64 / pairs.len() as f64;
        assert!(
            (0.1..0.6).contains(&progressing),
            "progressing fraction {progressing}"
        );
    }

    #[test]
    fn cohort_roundtrips_bit_exactly_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cohort.jsonl");
        let cohort = generate_cohort(&small_cfg(), 77).unwrap();
        save_cohort(&path, &cohort).unwrap();
        let loaded = load_cohort(&path).unwrap();
        assert_eq!(cohort, loaded);
    }
}
