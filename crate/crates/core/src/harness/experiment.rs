//! Monte-Carlo runner: one job per (SNR, bit depth, trial), rows merged in
//! that order whatever the completion order of the workers.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::data::{add_noise_and_quantize, default_min_sep, gen_line_spectral, gen_random_lowrank, sample_omega};
use super::metrics::{debiased_nmse, match_frequencies, mse_freq, nmse};
use crate::error::{invalid, Error, Result};
use crate::grsbl::{run_mc_grsbl, GrSblConfig};
use crate::lse2d::{lse2d_from_factors, LineSpectralScene, DEFAULT_GRID};
use crate::numerics::CMat;
use crate::quantizer::{BitDepth, ObservedMatrix};
use crate::vsbl::{vsbl_solve, HeteroObservations, Pattern, VsblOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    RandomLowrank,
    Lse2d,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::RandomLowrank => "random-lowrank",
            Scenario::Lse2d => "lse2d",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Solver {
    #[serde(rename = "mc-grsbl")]
    McGrSbl,
    #[serde(rename = "vsbl")]
    Vsbl,
    #[serde(rename = "mc-grsbl-music")]
    McGrSblMusic,
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Solver::McGrSbl => "mc-grsbl",
            Solver::Vsbl => "vsbl",
            Solver::McGrSblMusic => "mc-grsbl-music",
        })
    }
}

fn default_t_outer() -> usize {
    100
}

fn default_damping() -> f64 {
    0.7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub m: usize,
    pub n: usize,
    pub r: usize,
    /// Factor width; defaults to `min(2r, min(m, n) / 2)`.
    #[serde(default)]
    pub k: Option<usize>,
    pub p: f64,
    #[serde(with = "snr_list")]
    pub snr_db: Vec<f64>,
    pub bits: Vec<BitDepth>,
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_t_outer")]
    pub t_outer: usize,
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default)]
    pub learn_noise: Option<bool>,
    /// Minimum wrapped frequency separation for line-spectral scenes.
    #[serde(default)]
    pub min_sep: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(invalid("m and n must be positive"));
        }
        if self.r == 0 || self.r > self.m.min(self.n) {
            return Err(invalid(format!("r must be in 1..={}", self.m.min(self.n))));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(invalid(format!("p must be in (0, 1], got {}", self.p)));
        }
        if self.trials == 0 {
            return Err(invalid("trials must be at least 1"));
        }
        if self.snr_db.is_empty() || self.bits.is_empty() {
            return Err(invalid("snr_db and bits must be non-empty"));
        }
        if self.snr_db.iter().any(|s| s.is_nan() || *s == f64::NEG_INFINITY) {
            return Err(invalid("SNR values must be numbers or \"inf\""));
        }
        if self.k == Some(0) {
            return Err(invalid("k must be at least 1"));
        }
        self.solver_config(1.0, 0).validate()
    }

    pub fn k(&self) -> usize {
        self.k.unwrap_or_else(|| (2 * self.r).min(self.m.min(self.n) / 2).max(1))
    }

    /// Solver settings for a trial with noise variance `sigma2` (zero when
    /// noiseless, in which case the solver starts from its own default).
    pub fn solver_config(&self, sigma2: f64, seed: u64) -> GrSblConfig {
        GrSblConfig {
            t_outer: self.t_outer,
            k: self.k(),
            learn_noise: self.learn_noise,
            sigma2_init: (sigma2 > 0.0).then_some(sigma2),
            damping: self.damping,
            seed,
            ..GrSblConfig::default()
        }
    }

    pub fn solvers(&self) -> &'static [Solver] {
        match self.scenario {
            Scenario::RandomLowrank => &[Solver::McGrSbl, Solver::Vsbl],
            Scenario::Lse2d => &[Solver::McGrSbl, Solver::McGrSblMusic, Solver::Vsbl],
        }
    }
}

mod snr_list {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| if x.is_finite() { serde_json::json!(x) } else { serde_json::json!("inf") }))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
        Vec::<Raw>::deserialize(d)?
            .into_iter()
            .map(|r| match r {
                Raw::Num(x) => Ok(x),
                Raw::Text(t) if matches!(t.trim().to_ascii_lowercase().as_str(), "inf" | "infinity") => {
                    Ok(f64::INFINITY)
                }
                Raw::Text(t) => Err(serde::de::Error::custom(format!("SNR must be a number or \"inf\", got {t:?}"))),
            })
            .collect()
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of trial `t`: `splitmix64(seed ⊕ t)`. The scene, sampling set, noise
/// and solver start use separate ChaCha streams of it, so a trial sees the
/// same scene, mask and noise realization at every SNR and bit depth.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    splitmix64(seed ^ trial as u64)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Ground truth and observations of one trial.
#[derive(Debug, Clone)]
pub struct Trial {
    pub z: CMat,
    pub scene: Option<LineSpectralScene>,
    pub obs: ObservedMatrix,
    pub sigma2: f64,
    pub solver_seed: u64,
}

pub fn prepare_trial(cfg: &ExperimentConfig, snr_db: f64, bits: BitDepth, trial: usize) -> Result<Trial> {
    let seed = trial_seed(cfg.seed, trial);
    let mut scene_rng = stream(seed, 0);
    let (z, scene, sigma_z2) = match cfg.scenario {
        Scenario::RandomLowrank => {
            let (z, s) = gen_random_lowrank(cfg.m, cfg.n, cfg.r, &mut scene_rng)?;
            (z, None, s)
        }
        Scenario::Lse2d => {
            let sep = cfg.min_sep.unwrap_or_else(|| default_min_sep(cfg.m, cfg.n));
            let (z, scene, s) = gen_line_spectral(cfg.m, cfg.n, cfg.r, sep, &mut scene_rng)?;
            (z, Some(scene), s)
        }
    };
    let omega = sample_omega(cfg.m, cfg.n, cfg.p, &mut stream(seed, 1))?;
    let (obs, sigma2) = add_noise_and_quantize(&z, sigma_z2, snr_db, bits, &omega, &mut stream(seed, 2))?;
    Ok(Trial { z, scene, obs, sigma2, solver_seed: splitmix64(seed ^ 3) })
}

/// One output line: a solver's metrics on one trial.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub scenario: Scenario,
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub k: usize,
    pub p: f64,
    #[serde(serialize_with = "snr_cell")]
    pub snr_db: f64,
    pub bits: BitDepth,
    pub trial: usize,
    pub solver: Solver,
    pub nmse_db: f64,
    pub debiased_nmse_db: f64,
    pub rank_correct: u8,
    pub mse_theta_db: Option<f64>,
    pub mse_phi_db: Option<f64>,
    pub iters: usize,
    pub wall_ms: u64,
    /// Failure message of a flagged row; its metrics are NaN.
    #[serde(skip)]
    pub error: Option<String>,
}

fn snr_cell<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if x.is_finite() {
        s.serialize_f64(*x)
    } else {
        s.serialize_str("inf")
    }
}

impl MetricRow {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses one per available core.
    pub workers: Option<usize>,
    /// Record wall-clock times; off keeps the output a pure function of the
    /// configuration.
    pub timing: bool,
}

struct Outcome {
    nmse_db: f64,
    debiased_nmse_db: f64,
    rank: usize,
    freq: Option<(f64, f64)>,
    iters: usize,
}

impl Outcome {
    fn of(z_hat: &CMat, z: &CMat, rank: usize, iters: usize) -> Self {
        Self { nmse_db: nmse(z_hat, z), debiased_nmse_db: debiased_nmse(z_hat, z), rank, freq: None, iters }
    }
}

fn vsbl_baseline(trial: &Trial, k: usize, sigma_z2: f64) -> Result<Outcome> {
    let pattern = Pattern::new(trial.obs.m, trial.obs.n, &trial.obs.omega)?;
    // Noiseless data gives no variance to plug in, so it is learned.
    let learn = trial.sigma2 == 0.0;
    let sigma2 = if learn { 1e-3 * sigma_z2 } else { trial.sigma2 };
    let obs = HeteroObservations::uniform(pattern, trial.obs.dequantized(), sigma2)?;
    let opts = VsblOptions { seed: trial.solver_seed, learn_noise: learn, ..VsblOptions::default() };
    let res = vsbl_solve(&obs, k, &opts)?;
    Ok(Outcome::of(&res.z_hat(), &trial.z, res.rank(), res.iterations))
}

/// Runs every solver of the scenario on one trial.
pub fn run_trial(cfg: &ExperimentConfig, snr_db: f64, bits: BitDepth, t: usize, timing: bool) -> Vec<MetricRow> {
    let k = cfg.k();
    let row = |solver: Solver, out: Result<Outcome>, ms: u64| {
        let mut row = MetricRow {
            scenario: cfg.scenario,
            m: cfg.m,
            n: cfg.n,
            r: cfg.r,
            k,
            p: cfg.p,
            snr_db,
            bits,
            trial: t,
            solver,
            nmse_db: f64::NAN,
            debiased_nmse_db: f64::NAN,
            rank_correct: 0,
            mse_theta_db: None,
            mse_phi_db: None,
            iters: 0,
            wall_ms: if timing { ms } else { 0 },
            error: None,
        };
        match out {
            Ok(o) => {
                row.nmse_db = o.nmse_db;
                row.debiased_nmse_db = o.debiased_nmse_db;
                row.rank_correct = u8::from(o.rank == cfg.r);
                row.mse_theta_db = o.freq.map(|f| f.0);
                row.mse_phi_db = o.freq.map(|f| f.1);
                row.iters = o.iters;
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        row
    };

    let trial = match prepare_trial(cfg, snr_db, bits, t) {
        Ok(trial) => trial,
        Err(e) => {
            return cfg.solvers().iter().map(|&s| row(s, Err(invalid(e.to_string())), 0)).collect();
        }
    };
    let sigma_z2 = cfg.r as f64;
    let mut rows = Vec::new();

    let clock = Instant::now();
    let solved = run_mc_grsbl(&trial.obs, &cfg.solver_config(trial.sigma2, trial.solver_seed));
    let gr_ms = clock.elapsed().as_millis() as u64;
    match &solved {
        Ok(res) => {
            rows.push(row(Solver::McGrSbl, Ok(Outcome::of(&res.z_hat(), &trial.z, res.rank, res.iterations)), gr_ms))
        }
        Err(e) => rows.push(row(Solver::McGrSbl, Err(invalid(e.to_string())), gr_ms)),
    }

    if cfg.scenario == Scenario::Lse2d {
        let clock = Instant::now();
        let out = match &solved {
            Ok(res) => music_outcome(res, &trial, cfg),
            Err(e) => Err(invalid(e.to_string())),
        };
        rows.push(row(Solver::McGrSblMusic, out, gr_ms + clock.elapsed().as_millis() as u64));
    }

    let clock = Instant::now();
    let out = vsbl_baseline(&trial, k, sigma_z2);
    rows.push(row(Solver::Vsbl, out, clock.elapsed().as_millis() as u64));
    rows
}

fn music_outcome(res: &crate::grsbl::GrSblResult, trial: &Trial, cfg: &ExperimentConfig) -> Result<Outcome> {
    let rank = res.rank.min(cfg.m.min(cfg.n) - 1);
    let s = &res.state;
    let est = lse2d_from_factors(&s.u_mean, &s.v_mean, &s.gamma, rank, DEFAULT_GRID)?;
    let mut out = Outcome::of(&est.z_hat, &trial.z, res.rank, res.iterations);
    if let (Some(truth), true) = (&trial.scene, res.rank == cfg.r && est.scene.order() == cfg.r) {
        let a = match_frequencies(&est.scene.theta, &est.scene.phi, &truth.theta, &truth.phi)?;
        out.freq = Some((mse_freq(&est.scene.theta, &truth.theta, &a)?, mse_freq(&est.scene.phi, &truth.phi, &a)?));
    }
    Ok(out)
}

/// All rows of an experiment in (SNR, bit depth, trial, solver) order.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<MetricRow>> {
    cfg.validate()?;
    let jobs: Vec<(f64, BitDepth, usize)> = cfg
        .snr_db
        .iter()
        .flat_map(|&snr| cfg.bits.iter().flat_map(move |&b| (0..cfg.trials).map(move |t| (snr, b, t))))
        .collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = opts.workers {
        builder = builder.num_threads(w.max(1));
    }
    let pool = builder.build().map_err(|e| Error::Precondition(format!("worker pool: {e}")))?;
    let rows: Vec<Vec<MetricRow>> =
        pool.install(|| jobs.par_iter().map(|&(snr, b, t)| run_trial(cfg, snr, b, t, opts.timing)).collect());
    Ok(rows.into_iter().flatten().collect())
}

pub fn write_csv<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Medians of one (SNR, bit depth, solver) group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    #[serde(serialize_with = "snr_cell")]
    pub snr_db: f64,
    pub bits: BitDepth,
    pub solver: Solver,
    pub trials: usize,
    pub failures: usize,
    pub median_nmse_db: Option<f64>,
    pub median_debiased_nmse_db: Option<f64>,
    /// Fraction of successful trials with the true rank.
    pub rank_probability: Option<f64>,
    /// Over rank-correct trials only.
    pub median_mse_theta_db: Option<f64>,
    pub median_mse_phi_db: Option<f64>,
}

pub fn median(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) })
}

/// Groups in order of first appearance.
pub fn summarize(rows: &[MetricRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(f64, BitDepth, Solver)> = Vec::new();
    for r in rows {
        let key = (r.snr_db, r.bits, r.solver);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(snr, bits, solver)| {
            let group: Vec<&MetricRow> =
                rows.iter().filter(|r| r.snr_db == snr && r.bits == bits && r.solver == solver).collect();
            let ok: Vec<&&MetricRow> = group.iter().filter(|r| !r.failed()).collect();
            SummaryRow {
                snr_db: snr,
                bits,
                solver,
                trials: group.len(),
                failures: group.len() - ok.len(),
                median_nmse_db: median(ok.iter().map(|r| r.nmse_db)),
                median_debiased_nmse_db: median(ok.iter().map(|r| r.debiased_nmse_db)),
                rank_probability: (!ok.is_empty())
                    .then(|| ok.iter().map(|r| f64::from(r.rank_correct)).sum::<f64>() / ok.len() as f64),
                median_mse_theta_db: median(ok.iter().filter_map(|r| r.mse_theta_db)),
                median_mse_phi_db: median(ok.iter().filter_map(|r| r.mse_phi_db)),
            }
        })
        .collect()
}

pub fn write_summary<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, &summarize(rows))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            scenario: Scenario::RandomLowrank,
            m: 6,
            n: 5,
            r: 1,
            k: Some(2),
            p: 1.0,
            snr_db: vec![f64::INFINITY],
            bits: vec![BitDepth::Unquantized],
            trials: 1,
            seed: 1,
            t_outer: 60,
            damping: 0.7,
            learn_noise: None,
            min_sep: None,
        }
    }

    #[test]
    fn splitmix_reference_values() {
        // First outputs of the reference SplitMix64 generator seeded with 0.
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
        assert_eq!(splitmix64(0x9E37_79B9_7F4A_7C15), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn config_parsing() {
        let text = r#"{"scenario":"lse2d","m":8,"n":8,"r":2,"p":0.5,"snr_db":[0,"inf"],"bits":[1,"inf"],"trials":2}"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(cfg.snr_db, vec![0.0, f64::INFINITY]);
        assert_eq!(cfg.bits, vec![BitDepth::Finite(1), BitDepth::Unquantized]);
        assert_eq!(cfg.k(), 4);
        assert_eq!(cfg.t_outer, 100);
        let back = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let unknown = text.replace("\"trials\":2", "\"trials\":2,\"colour\":1");
        assert!(ExperimentConfig::from_json(&unknown).is_err());
        let bad_p = text.replace("0.5", "1.5");
        assert!(ExperimentConfig::from_json(&bad_p).is_err());
    }

    #[test]
    fn k_default_is_capped() {
        let cfg = ExperimentConfig { k: None, r: 3, m: 8, n: 10, ..tiny() };
        assert_eq!(cfg.k(), 4);
        let cfg = ExperimentConfig { k: None, r: 5, m: 100, n: 100, ..tiny() };
        assert_eq!(cfg.k(), 10);
    }

    #[test]
    fn easiest_case_is_near_exact() {
        let rows = run_experiment(&tiny(), &RunOptions::default()).unwrap();
        assert_eq!(rows.len(), 2);
        let gr = &rows[0];
        assert_eq!(gr.solver, Solver::McGrSbl);
        assert!(gr.nmse_db < -40.0, "{}", gr.nmse_db);
        assert!(gr.debiased_nmse_db <= gr.nmse_db);
    }

    #[test]
    fn csv_is_deterministic() {
        let cfg = ExperimentConfig {
            snr_db: vec![10.0, f64::INFINITY],
            bits: vec![BitDepth::Finite(2), BitDepth::Unquantized],
            trials: 2,
            t_outer: 10,
            ..tiny()
        };
        let run = |workers| {
            let rows = run_experiment(&cfg, &RunOptions { workers: Some(workers), timing: false }).unwrap();
            let mut buf = Vec::new();
            write_csv(&rows, &mut buf).unwrap();
            String::from_utf8(buf).unwrap()
        };
        let a = run(1);
        assert_eq!(a, run(3));
        let header = a.lines().next().unwrap();
        assert_eq!(
            header,
            "scenario,m,n,r,k,p,snr_db,bits,trial,solver,nmse_db,debiased_nmse_db,rank_correct,mse_theta_db,mse_phi_db,iters,wall_ms"
        );
        assert_eq!(a.lines().count(), 1 + 2 * 2 * 2 * 2);
        assert!(a.lines().nth(1).unwrap().starts_with("random-lowrank,6,5,1,2,1.0,10.0,2,0,mc-grsbl,"));
        assert!(a.contains(",inf,inf,"));
    }

    #[test]
    fn summary_medians() {
        assert_eq!(median([3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median([4.0, 1.0]), Some(2.5));
        assert_eq!(median([f64::NAN]), None);
        let cfg = ExperimentConfig { trials: 3, t_outer: 5, ..tiny() };
        let rows = run_experiment(&cfg, &RunOptions::default()).unwrap();
        let s = summarize(&rows);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].trials, 3);
        assert_eq!(s[0].solver, Solver::McGrSbl);
        assert_eq!(s[1].solver, Solver::Vsbl);
    }

    #[test]
    fn trials_share_scene_across_channels() {
        let cfg = ExperimentConfig {
            snr_db: vec![0.0, 20.0],
            bits: vec![BitDepth::Finite(1), BitDepth::Unquantized],
            ..tiny()
        };
        let a = prepare_trial(&cfg, 0.0, BitDepth::Finite(1), 0).unwrap();
        let b = prepare_trial(&cfg, 20.0, BitDepth::Unquantized, 0).unwrap();
        assert_eq!(a.z, b.z);
        assert_eq!(a.obs.omega, b.obs.omega);
        let c = prepare_trial(&cfg, 0.0, BitDepth::Finite(1), 1).unwrap();
        assert_ne!(a.z, c.z);
    }
}
