//! Experiment harness: training data, circular references, the three-model
//! tracking comparison, the hybrid ablation, and report artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arm::{inverse_kinematics, plant_step, ActuatorParams, ArmParams, Elbow, PlantParams, PlantState};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fit::{
    fit_bilinear, fit_cck, fit_dmdc, median, one_step_errors, DataSet, FitReport, Histogram, LiftedData, LinearLiftedModel,
    Transition, Variant,
};
use crate::lifting::Dictionary;
use crate::mpc::{run_closed_loop, AnyModel, OutputVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub episodes: usize,
    pub steps_per_episode: usize,
    /// Share of episodes run with zero input, interleaved with forced ones.
    pub autonomous_fraction: f64,
    /// Zero-order-hold period of the random torques (s).
    pub hold_time: f64,
    pub u_max: f64,
    pub theta_range: f64,
    pub theta_dot_range: f64,
    /// Half-width of the initial rotor deflection `phi - r theta` (rad).
    pub deflection_range: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            episodes: 200,
            steps_per_episode: 500,
            autonomous_fraction: 0.5,
            hold_time: 0.05,
            u_max: 20.0,
            theta_range: std::f64::consts::PI,
            theta_dot_range: 2.0,
            deflection_range: 0.01,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.steps_per_episode == 0 {
            return Err(Error::invalid("data.episodes", "episodes and steps must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.autonomous_fraction) {
            return Err(Error::invalid("data.autonomous_fraction", "must lie in [0, 1]"));
        }
        if !(self.hold_time > 0.0) {
            return Err(Error::invalid("data.hold_time", "must be > 0"));
        }
        for (name, v) in [
            ("data.u_max", self.u_max),
            ("data.theta_range", self.theta_range),
            ("data.theta_dot_range", self.theta_dot_range),
            ("data.deflection_range", self.deflection_range),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Whether episode `e` is autonomous; spreads them evenly over the run.
    pub fn is_autonomous(&self, e: usize) -> bool {
        let f = self.autonomous_fraction;
        ((e + 1) as f64 * f).floor() > (e as f64 * f).floor()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub center: [f64; 2],
    pub radii_cm: Vec<f64>,
    pub period: f64,
    pub elbow: Elbow,
    /// Initial window excluded from the mean error (s).
    pub settle_time: f64,
    pub hybrid_radius_cm: f64,
    pub holdout_fraction: f64,
    pub hist_bins: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            center: [1.2, 0.4],
            radii_cm: vec![5.0, 25.0, 40.0],
            period: 5.0,
            elbow: Elbow::Down,
            settle_time: 0.25,
            hybrid_radius_cm: 25.0,
            holdout_fraction: 0.2,
            hist_bins: 40,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radii_cm.is_empty() || self.radii_cm.iter().any(|r| !(*r >= 0.0)) {
            return Err(Error::invalid("bench.radii_cm", "need at least one radius >= 0"));
        }
        if !(self.period > 0.0) {
            return Err(Error::invalid("bench.period", "must be > 0"));
        }
        if !(self.settle_time >= 0.0) {
            return Err(Error::invalid("bench.settle_time", "must be >= 0"));
        }
        if !(self.hybrid_radius_cm >= 0.0) {
            return Err(Error::invalid("bench.hybrid_radius_cm", "must be >= 0"));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::invalid("bench.holdout_fraction", "must lie in (0, 1)"));
        }
        if self.hist_bins == 0 {
            return Err(Error::invalid("bench.hist_bins", "must be >= 1"));
        }
        Ok(())
    }

    pub fn settle_steps(&self, dt: f64) -> usize {
        (self.settle_time / dt).round() as usize
    }
}

/// Joint-space reference for one revolution of a circle.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub dt: f64,
    pub center: Vector2<f64>,
    pub radius: f64,
    pub period: f64,
    pub elbow: Elbow,
    pub positions: Vec<Vector2<f64>>,
    pub theta: Vec<Vector2<f64>>,
    pub theta_dot: Vec<Vector2<f64>>,
    /// Joint-angle change over one revolution (nonzero if the circle winds the base).
    winding: Vector2<f64>,
}

impl ReferenceTrajectory {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    /// Position at sample `i`, periodic beyond one revolution.
    pub fn position(&self, i: usize) -> Vector2<f64> {
        self.positions[i % self.len()]
    }

    /// `[theta; theta_dot]` at sample `i`, continued periodically.
    pub fn output(&self, i: usize) -> OutputVector {
        let n = self.len();
        let th = self.theta[i % n] + self.winding * (i / n) as f64;
        let thd = self.theta_dot[i % n];
        OutputVector::new(th[0], th[1], thd[0], thd[1])
    }

    /// Rigid state on the reference at `t = 0`.
    pub fn initial_state(&self, act: &ActuatorParams) -> PlantState {
        PlantState::rigid(self.theta[0], self.theta_dot[0], act)
    }
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    a - two_pi * ((a + std::f64::consts::PI) / two_pi).floor()
}

pub fn make_circle_reference(
    center: Vector2<f64>,
    radius: f64,
    period: f64,
    dt: f64,
    elbow: Elbow,
    arm: &ArmParams,
) -> Result<ReferenceTrajectory> {
    if !(period > 0.0 && dt > 0.0 && radius >= 0.0) {
        return Err(Error::invalid("reference", "period and dt must be > 0, radius >= 0"));
    }
    let n = ((period / dt).round() as usize).max(1);
    let omega = 2.0 * std::f64::consts::PI / period;
    let point = |i: usize| {
        let a = omega * i as f64 * dt;
        center + radius * Vector2::new(a.cos(), a.sin())
    };
    let positions: Vec<Vector2<f64>> = (0..n).map(point).collect();
    let mut theta = Vec::with_capacity(n + 1);
    for p in positions.iter().chain(std::iter::once(&point(n))) {
        let raw = inverse_kinematics(p, elbow, arm)?;
        let th = match theta.last() {
            None => raw,
            Some(prev) => {
                let prev: &Vector2<f64> = prev;
                prev + (raw - prev).map(wrap_angle)
            }
        };
        theta.push(th);
    }
    let winding = theta[n] - theta[0];
    let at = |i: isize| -> Vector2<f64> {
        let ni = n as isize;
        let k = i.rem_euclid(ni) as usize;
        theta[k] + winding * (i.div_euclid(ni)) as f64
    };
    let theta_dot = (0..n as isize).map(|i| (at(i + 1) - at(i - 1)) / (2.0 * dt)).collect();
    theta.truncate(n);
    Ok(ReferenceTrajectory {
        dt,
        center,
        radius,
        period,
        elbow,
        positions,
        theta,
        theta_dot,
        winding,
    })
}

/// Random-excitation episodes: autonomous ones start from random states and
/// evolve with `u = 0`; forced ones apply zero-order-hold uniform torques.
pub fn generate_training_data(params: &PlantParams, cfg: &DataConfig, seed: u64) -> Result<DataSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hold = ((cfg.hold_time / params.dt()).round() as usize).max(1);
    let r = params.actuator.gear();
    let sym = |rng: &mut ChaCha8Rng, h: f64| if h > 0.0 { rng.gen_range(-h..h) } else { 0.0 };
    let mut samples = Vec::with_capacity(cfg.episodes * cfg.steps_per_episode);
    let mut episodes = Vec::with_capacity(cfg.episodes);
    for e in 0..cfg.episodes {
        let theta = Vector2::from_fn(|_, _| sym(&mut rng, cfg.theta_range));
        let theta_dot = Vector2::from_fn(|_, _| sym(&mut rng, cfg.theta_dot_range));
        let mut x = PlantState::rigid(theta, theta_dot, &params.actuator);
        x.p.phi += Vector2::from_fn(|_, _| sym(&mut rng, cfg.deflection_range));
        debug_assert_eq!(x.p.phi_dot, r.component_mul(&theta_dot));
        let forced = !cfg.is_autonomous(e);
        let start = samples.len();
        let mut u = Vector2::zeros();
        for t in 0..cfg.steps_per_episode {
            if forced && t % hold == 0 {
                u = Vector2::from_fn(|_, _| sym(&mut rng, cfg.u_max));
            }
            let next = plant_step(&x, &u, params).map_err(|_| Error::NonFiniteState { step: samples.len() })?;
            samples.push(Transition { x, u, next });
            x = next;
        }
        episodes.push(start..samples.len());
    }
    Ok(DataSet {
        samples,
        episodes,
        seed,
        dt: params.dt(),
    })
}

/// Fitted CCK, DMDc and bilinear models on a common dictionary.
#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub dictionary: Dictionary,
    pub cck: LinearLiftedModel,
    pub dmdc: LinearLiftedModel,
    pub bilinear: AnyModel,
    pub reports: Vec<(Variant, FitReport)>,
}

impl TrainedModels {
    pub fn tracked(&self) -> Vec<AnyModel> {
        vec![AnyModel::Linear(self.cck.clone()), AnyModel::Linear(self.dmdc.clone()), self.bilinear.clone()]
    }

    pub fn hybrid(&self) -> Result<LinearLiftedModel> {
        hybrid_model(&self.dmdc, &self.cck)
    }
}

pub fn train_models(cfg: &RunConfig, train: &DataSet) -> Result<TrainedModels> {
    let states: Vec<_> = train.samples.iter().map(|t| t.x.to_vector()).collect();
    let dictionary = Dictionary::fit(&states, &cfg.dictionary)?;
    let mut opts = cfg.fit.clone();
    opts.workers = cfg.workers.max(1);
    let act = &cfg.plant.actuator;
    let (cck, rc) = fit_cck(train, act, &dictionary, &opts)?;
    let lifted = LiftedData::from_dataset(train, &dictionary);
    let (dmdc, rd) = fit_dmdc(&lifted, &dictionary, train.dt, &opts)?;
    let (bil, rb) = fit_bilinear(&lifted, &dictionary, train.dt, &opts)?;
    Ok(TrainedModels {
        dictionary,
        cck,
        dmdc,
        bilinear: AnyModel::Bilinear(bil),
        reports: vec![(Variant::Cck, rc), (Variant::Dmdc, rd), (Variant::Bilinear, rb)],
    })
}

/// Episode split into training and holdout parts per the bench config.
pub fn split_dataset(cfg: &RunConfig, data: &DataSet) -> (DataSet, DataSet) {
    data.split_episodes(1.0 - cfg.bench.holdout_fraction)
}

/// Generated data, its split, and the three fitted models.
pub struct Experiment {
    pub train: DataSet,
    pub holdout: DataSet,
    pub models: TrainedModels,
}

pub fn prepare_experiment(cfg: &RunConfig) -> Result<Experiment> {
    let data = generate_training_data(&cfg.plant, &cfg.data, cfg.seed)?;
    let (train, holdout) = split_dataset(cfg, &data);
    let models = train_models(cfg, &train)?;
    Ok(Experiment { train, holdout, models })
}

/// `A` from DMDc with the control-coherent input matrix.
pub fn hybrid_model(dmdc: &LinearLiftedModel, cck: &LinearLiftedModel) -> Result<LinearLiftedModel> {
    ensure_same_dictionary(&dmdc.dictionary, &cck.dictionary)?;
    Ok(LinearLiftedModel {
        a: dmdc.a.clone(),
        b: cck.b.clone(),
        dictionary: dmdc.dictionary.clone(),
        variant: Variant::Hybrid,
        dt: dmdc.dt,
    })
}

pub fn ensure_same_dictionary(a: &Dictionary, b: &Dictionary) -> Result<()> {
    if a != b {
        return Err(Error::DictionaryMismatch {
            first: a.digest(),
            second: b.digest(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingReport {
    pub variant: Variant,
    pub radius: f64,
    pub dt: f64,
    /// End-effector error after each plant step (m).
    pub errors: Vec<f64>,
    pub positions: Vec<Vector2<f64>>,
    pub references: Vec<Vector2<f64>>,
    pub controls: Vec<Vector2<f64>>,
    pub settle_steps: usize,
    /// Mean of `errors[settle_steps..]`.
    pub mean_error: f64,
    pub diverged: bool,
}

impl TrackingReport {
    pub fn new(
        variant: Variant,
        reference: &ReferenceTrajectory,
        errors: Vec<f64>,
        positions: Vec<Vector2<f64>>,
        controls: Vec<Vector2<f64>>,
        settle_steps: usize,
        diverged: bool,
    ) -> Self {
        let references = (1..=errors.len()).map(|i| reference.position(i)).collect();
        let mean_error = mean_after(&errors, settle_steps);
        TrackingReport {
            variant,
            radius: reference.radius,
            dt: reference.dt,
            errors,
            positions,
            references,
            controls,
            settle_steps,
            mean_error,
            diverged,
        }
    }

    pub fn mean_error_cm(&self) -> f64 {
        100.0 * self.mean_error
    }
}

/// Mean of the samples after the first `skip`; NaN when none remain.
pub fn mean_after(values: &[f64], skip: usize) -> f64 {
    let tail = &values[skip.min(values.len())..];
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.iter().sum::<f64>() / tail.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<TrackingReport>,
}

impl Comparison {
    pub fn get(&self, variant: Variant, radius_cm: f64) -> Option<&TrackingReport> {
        self.rows.iter().find(|r| r.variant == variant && (100.0 * r.radius - radius_cm).abs() < 1e-9)
    }

    pub fn any_diverged(&self) -> bool {
        self.rows.iter().any(|r| r.diverged)
    }
}

/// Closed-loop runs for every model and radius, fanned out over `workers`
/// threads. Row order is models-major, independent of scheduling.
pub fn run_tracking(cfg: &RunConfig, models: &[AnyModel], radii_cm: &[f64]) -> Result<Comparison> {
    for m in models.iter().skip(1) {
        ensure_same_dictionary(models[0].dictionary(), m.dictionary())?;
    }
    let dt = cfg.plant.dt();
    let center = Vector2::new(cfg.bench.center[0], cfg.bench.center[1]);
    let refs = radii_cm
        .iter()
        .map(|r| make_circle_reference(center, r / 100.0, cfg.bench.period, dt, cfg.bench.elbow, &cfg.plant.arm))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..models.len()).flat_map(|m| (0..refs.len()).map(move |r| (m, r))).collect();
    let settle = cfg.bench.settle_steps(dt);
    let run = |&(m, r): &(usize, usize)| -> Result<TrackingReport> {
        let mut ctrl = models[m].controller(&cfg.mpc)?;
        let report = run_closed_loop(&cfg.plant, ctrl.as_mut(), &refs[r], settle);
        log::info!(
            "{} r={} cm: mean error {:.4} cm{}",
            report.variant,
            radii_cm[r],
            report.mean_error_cm(),
            if report.diverged { " (diverged)" } else { "" }
        );
        Ok(report)
    };
    let workers = cfg.workers.clamp(1, jobs.len().max(1));
    let mut slots: Vec<Option<Result<TrackingReport>>> = (0..jobs.len()).map(|_| None).collect();
    if workers == 1 {
        for (slot, job) in slots.iter_mut().zip(&jobs) {
            *slot = Some(run(job));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let results = std::sync::Mutex::new(&mut slots);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= jobs.len() {
                        break;
                    }
                    let out = run(&jobs[i]);
                    results.lock().expect("result lock")[i] = Some(out);
                });
            }
        });
    }
    let rows = slots.into_iter().map(|s| s.expect("every job ran")).collect::<Result<Vec<_>>>()?;
    Ok(Comparison { rows })
}

/// CCK, DMDc and bilinear at every configured radius.
pub fn run_comparison(cfg: &RunConfig, models: &TrainedModels) -> Result<Comparison> {
    run_tracking(cfg, &models.tracked(), &cfg.bench.radii_cm)
}

/// Pure DMDc against `A_DMDc` combined with `B_CCK`.
pub fn run_hybrid(cfg: &RunConfig, models: &TrainedModels) -> Result<Comparison> {
    let set = [AnyModel::Linear(models.dmdc.clone()), AnyModel::Linear(models.hybrid()?)];
    run_tracking(cfg, &set, &[cfg.bench.hybrid_radius_cm])
}

/// One-step prediction error histograms on shared bin edges.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramSet {
    pub edges: Vec<f64>,
    pub entries: Vec<(Variant, Histogram, f64)>,
}

impl HistogramSet {
    pub fn median(&self, v: Variant) -> Option<f64> {
        self.entries.iter().find(|e| e.0 == v).map(|e| e.2)
    }
}

pub fn prediction_histograms(models: &[AnyModel], holdout: &DataSet, bins: usize) -> HistogramSet {
    let errors: Vec<(Variant, Vec<f64>)> = models.iter().map(|m| (m.variant(), one_step_errors(m, holdout))).collect();
    let max = errors.iter().flat_map(|e| e.1.iter().cloned()).filter(|v| v.is_finite()).fold(0.0, f64::max);
    let edges = Histogram::uniform_edges(max, bins.max(1));
    let entries = errors
        .into_iter()
        .map(|(v, e)| {
            let med = median(&e);
            (v, Histogram::with_edges(&e, &edges), med)
        })
        .collect();
    HistogramSet { edges, entries }
}

/// Stable per-file label, e.g. `cck_r25cm`.
pub fn run_label(r: &TrackingReport) -> String {
    format!("{}_r{}cm", r.variant, fmt_num(100.0 * r.radius))
}

fn fmt_num(v: f64) -> String {
    let rounded = (v * 1e6).round() / 1e6;
    format!("{rounded}")
}

pub fn tracking_csv(r: &TrackingReport) -> String {
    let mut s = String::from("t,x_ref,y_ref,x,y,err_m,u1,u2\n");
    for i in 0..r.errors.len() {
        let t = (i + 1) as f64 * r.dt;
        let (p, q, u) = (r.references[i], r.positions[i], r.controls[i]);
        let _ = writeln!(s, "{},{},{},{},{},{},{},{}", t, p[0], p[1], q[0], q[1], r.errors[i], u[0], u[1]);
    }
    s
}

pub fn summary_csv(c: &Comparison) -> String {
    let mut s = String::from("variant,radius_cm,mean_err_cm,diverged\n");
    for r in &c.rows {
        let _ = writeln!(s, "{},{},{},{}", r.variant, fmt_num(100.0 * r.radius), r.mean_error_cm(), r.diverged);
    }
    s
}

pub fn hist_csv(h: &HistogramSet) -> String {
    let mut s = String::from("variant,bin_lo,bin_hi,count\n");
    for (v, hist, _) in &h.entries {
        for (i, c) in hist.counts.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{}", v, hist.edges[i], hist.edges[i + 1], c);
        }
    }
    s
}

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Reference circles with the achieved end-effector paths.
pub fn trajectory_svg(c: &Comparison, annotation: &str) -> String {
    let pts = c.rows.iter().flat_map(|r| r.positions.iter().chain(&r.references)).filter(|p| p.iter().all(|v| v.is_finite()));
    let (mut lo, mut hi) = (Vector2::repeat(f64::INFINITY), Vector2::repeat(f64::NEG_INFINITY));
    for p in pts {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    if !lo.iter().all(|v| v.is_finite()) {
        lo = Vector2::zeros();
        hi = Vector2::repeat(1.0);
    }
    let span = (hi - lo).max().max(1e-6) * 1.1;
    let mid = 0.5 * (lo + hi);
    let size = 600.0;
    let map = |p: &Vector2<f64>| {
        let x = (p[0] - mid[0]) / span * size + size / 2.0;
        let y = size / 2.0 - (p[1] - mid[1]) / span * size;
        (x.clamp(-1e4, 1e4), y.clamp(-1e4, 1e4))
    };
    let mut s = String::new();
    let _ = writeln!(s, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">");
    let _ = writeln!(s, "<!-- {annotation} -->");
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let mut variants: Vec<Variant> = Vec::new();
    for r in &c.rows {
        if !variants.contains(&r.variant) {
            variants.push(r.variant);
        }
    }
    let mut drawn_radius: Vec<f64> = Vec::new();
    for r in &c.rows {
        if !drawn_radius.contains(&r.radius) {
            drawn_radius.push(r.radius);
            let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"#999\" stroke-dasharray=\"4 3\" points=\"{}\"/>", polyline(&r.references, &map));
        }
        let colour = PALETTE[variants.iter().position(|v| *v == r.variant).unwrap_or(0) % PALETTE.len()];
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.2\" points=\"{}\"/>", polyline(&r.positions, &map));
    }
    for (i, v) in variants.iter().enumerate() {
        let y = 20 + 18 * i;
        let _ = writeln!(s, "<text x=\"10\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"13\" fill=\"{}\">{v}</text>", PALETTE[i % PALETTE.len()]);
    }
    s.push_str("</svg>\n");
    s
}

fn polyline(points: &[Vector2<f64>], map: &impl Fn(&Vector2<f64>) -> (f64, f64)) -> String {
    let step = (points.len() / 500).max(1);
    let mut s = String::new();
    for p in points.iter().step_by(step).filter(|p| p.iter().all(|v| v.is_finite())) {
        let (x, y) = map(p);
        let _ = write!(s, "{x:.2},{y:.2} ");
    }
    s.trim_end().to_string()
}

/// Writes `summary.csv`, per-run `tracking_<label>.csv` and an SVG overlay.
pub fn write_comparison(dir: &Path, c: &Comparison, summary_name: &str, svg_name: &str, annotation: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };
    put(summary_name.to_string(), summary_csv(c))?;
    for r in &c.rows {
        put(format!("tracking_{}.csv", run_label(r)), tracking_csv(r))?;
    }
    put(svg_name.to_string(), trajectory_svg(c, annotation))?;
    Ok(written)
}
