//! Metrics, controlled re-simulation of test scenarios, the conventional
//! threshold relay and report emission.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{kls_pipeline, ControlConfig, ShedPlan};
use crate::dataset::{GenerationConfig, Record, ScenarioSpec};
use crate::error::{KlsError, Result};
use crate::grid::{self, GridConfig, ShedSchedule, Trajectory};
use crate::predictor::Predictor;
use crate::stats;

/// Linear map taking `zero` to 0 and `one` to 1, clamped to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub zero: f64,
    pub one: f64,
}

impl Anchor {
    pub fn new(zero: f64, one: f64) -> Self {
        Anchor { zero, one }
    }

    pub fn score(&self, x: f64) -> f64 {
        ((x - self.zero) / (self.one - self.zero)).clamp(0.0, 1.0)
    }

    fn check(&self, what: &str) -> Result<()> {
        if !(self.zero.is_finite() && self.one.is_finite()) || self.zero == self.one {
            return Err(KlsError::Config(format!("degenerate {what} anchors")));
        }
        Ok(())
    }
}

/// Anchors in Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub safety_nadir: Anchor,
    pub safety_ssv: Anchor,
    pub alpha: f64,
    pub beta: f64,
    pub cost_nadir: Anchor,
    pub cost_ssv: Anchor,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            safety_nadir: Anchor::new(48.5, 49.0),
            safety_ssv: Anchor::new(49.0, 49.5),
            alpha: 0.5,
            beta: 0.5,
            cost_nadir: Anchor::new(49.5, 49.0),
            cost_ssv: Anchor::new(50.0, 49.5),
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        self.safety_nadir.check("safety nadir")?;
        self.safety_ssv.check("safety SSV")?;
        self.cost_nadir.check("cost nadir")?;
        self.cost_ssv.check("cost SSV")?;
        if self.safety_nadir.zero > self.safety_nadir.one || self.safety_ssv.zero > self.safety_ssv.one {
            return Err(KlsError::Config("safety anchors must increase".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || (self.alpha + self.beta - 1.0).abs() > 1e-12 {
            return Err(KlsError::Config("alpha and beta must be non-negative and sum to 1".into()));
        }
        Ok(())
    }
}

pub fn safety(nadir_hz: f64, ssv_hz: f64, config: &MetricConfig) -> Result<f64> {
    config.validate()?;
    Ok(config.alpha * config.safety_nadir.score(nadir_hz) + config.beta * config.safety_ssv.score(ssv_hz))
}

pub fn control_cost(nadir_hz: f64, ssv_hz: f64, config: &MetricConfig) -> Result<f64> {
    config.validate()?;
    Ok(config.cost_nadir.score(nadir_hz).min(config.cost_ssv.score(ssv_hz)))
}

pub fn trajectory_mae(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(KlsError::Argument(format!(
            "trajectory lengths {} and {}",
            predicted.len(),
            truth.len()
        )));
    }
    Ok(predicted.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / truth.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: u64,
    pub method: String,
    pub nadir_hz: f64,
    pub ssv_hz: f64,
    pub safety: f64,
    pub control_cost: f64,
    /// Prediction MAE in pu, when the method predicts.
    pub mae: Option<f64>,
    pub total_shed_mw: f64,
    pub zeta: Option<f64>,
    pub feeder_mw: Option<f64>,
}

pub const CSV_HEADER: &str = "scenario,method,feeder_mw,zeta,nadir_hz,ssv_hz,safety,control_cost,mae,total_shed_mw";

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn rows_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.scenario,
            r.method,
            opt(r.feeder_mw),
            opt(r.zeta),
            r.nadir_hz,
            r.ssv_hz,
            r.safety,
            r.control_cost,
            opt(r.mae),
            r.total_shed_mw
        );
    }
    out
}

fn shed_mw(config: &GridConfig, shed: &[f64]) -> f64 {
    config.loads.iter().zip(shed).map(|(l, u)| l.base_mw * u).sum()
}

/// Metrics of a simulated trajectory.
pub fn row_for(
    scenario: u64,
    method: &str,
    config: &GridConfig,
    traj: &Trajectory,
    metrics: &MetricConfig,
) -> Result<MetricsRow> {
    let nadir_hz = config.pu_to_hz(traj.nadir);
    let ssv_hz = config.pu_to_hz(traj.steady_state);
    Ok(MetricsRow {
        scenario,
        method: method.to_string(),
        nadir_hz,
        ssv_hz,
        safety: safety(nadir_hz, ssv_hz, metrics)?,
        control_cost: control_cost(nadir_hz, ssv_hz, metrics)?,
        mae: None,
        total_shed_mw: shed_mw(config, &traj.shed),
        zeta: None,
        feeder_mw: None,
    })
}

/// Open-loop prediction accuracy on recorded trajectories.
pub fn prediction_rows(model: &dyn Predictor, records: &[Record], base: &GridConfig, metrics: &MetricConfig) -> Result<Vec<MetricsRow>> {
    records
        .par_iter()
        .map(|rec| {
            let cfg = rec.scenario.grid_config(base)?;
            let pred = model.predict(&rec.trajectory, &rec.scenario.shed)?;
            let mut row = row_for(rec.scenario.id, model.method(), &cfg, &rec.trajectory, metrics)?;
            row.mae = Some(trajectory_mae(&pred, &rec.trajectory.omega)?);
            Ok(row)
        })
        .collect()
}

/// Shedding decided by the KLS pipeline; an infeasible program sheds
/// everything.
pub fn decide(
    model: &dyn Predictor,
    rec: &Record,
    cfg: &GridConfig,
    control: &ControlConfig,
    feeder_mw: f64,
) -> Result<(Vec<f64>, Option<ShedPlan>)> {
    let horizon = rec.trajectory.omega.len();
    match kls_pipeline(model, &rec.trajectory, cfg, control, feeder_mw, horizon) {
        Ok(plan) => Ok((plan.quantized.clone(), Some(plan))),
        Err(KlsError::Infeasible { step, violation }) => {
            log::debug!(
                "scenario {}: infeasible at step {step} by {violation:e}, shedding all",
                rec.scenario.id
            );
            Ok((vec![1.0; cfg.loads.len()], None))
        }
        Err(e) => Err(e),
    }
}

/// Re-simulate each test scenario under the KLS decision taken from its
/// first measurement window.
pub fn control_rows(
    model: &dyn Predictor,
    label: &str,
    records: &[Record],
    base: &GridConfig,
    gen: &GenerationConfig,
    control: &ControlConfig,
    feeder_mw: f64,
    metrics: &MetricConfig,
) -> Result<Vec<MetricsRow>> {
    records
        .par_iter()
        .map(|rec| {
            let (row, _) = control_one(model, label, rec, base, gen, control, feeder_mw, metrics)?;
            Ok(row)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn control_one(
    model: &dyn Predictor,
    label: &str,
    rec: &Record,
    base: &GridConfig,
    gen: &GenerationConfig,
    control: &ControlConfig,
    feeder_mw: f64,
    metrics: &MetricConfig,
) -> Result<(MetricsRow, Trajectory)> {
    let cfg = rec.scenario.grid_config(base)?;
    let (u, plan) = decide(model, rec, &cfg, control, feeder_mw)?;
    let fault = &rec.scenario.fault;
    let traj = grid::simulate(&cfg, fault, &u, fault.time + gen.shed_delay, &gen.grid)?;
    let mut row = row_for(rec.scenario.id, label, &cfg, &traj, metrics)?;
    row.feeder_mw = Some(feeder_mw);
    if let Some(plan) = &plan {
        row.zeta = Some(plan.zeta);
        row.mae = Some(trajectory_mae(&plan.predicted_quantized, &traj.omega)?);
    }
    Ok((row, traj))
}

/// Threshold relay shedding a fixed proportion of every bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConventionalPolicy {
    pub trigger_hz: f64,
    /// Relay and breaker delay, seconds.
    pub delay: f64,
    pub proportion: f64,
}

impl Default for ConventionalPolicy {
    fn default() -> Self {
        ConventionalPolicy {
            trigger_hz: 49.0,
            delay: 0.1,
            proportion: 0.1,
        }
    }
}

impl ConventionalPolicy {
    pub fn schedule(&self, config: &GridConfig) -> Result<ShedSchedule> {
        if !(self.proportion > 0.0 && self.proportion <= 1.0) {
            return Err(KlsError::Config("proportion must lie in (0, 1]".into()));
        }
        Ok(ShedSchedule::OnThreshold {
            threshold_pu: config.hz_to_pu(self.trigger_hz),
            delay: self.delay,
            fractions: vec![self.proportion; config.loads.len()],
        })
    }

    pub fn simulate(&self, scenario: &ScenarioSpec, base: &GridConfig, gen: &GenerationConfig) -> Result<(GridConfig, Trajectory)> {
        let cfg = scenario.grid_config(base)?;
        let traj = grid::simulate_schedule(&cfg, &scenario.fault, &self.schedule(&cfg)?, &gen.grid)?;
        Ok((cfg, traj))
    }
}

pub fn conventional_rows(
    policy: &ConventionalPolicy,
    records: &[Record],
    base: &GridConfig,
    gen: &GenerationConfig,
    metrics: &MetricConfig,
) -> Result<Vec<MetricsRow>> {
    records
        .par_iter()
        .map(|rec| {
            let (cfg, traj) = policy.simulate(&rec.scenario, base, gen)?;
            row_for(rec.scenario.id, "conventional", &cfg, &traj, metrics)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedPolicy {
    pub policy: ConventionalPolicy,
    pub reference_safety: f64,
    pub safe: bool,
}

/// Smallest proportion (to 1e-3) keeping the reference scenario at
/// `target` Safety, by bisection.
pub fn tune_proportion(
    template: &ConventionalPolicy,
    reference: &ScenarioSpec,
    base: &GridConfig,
    gen: &GenerationConfig,
    metrics: &MetricConfig,
    target: f64,
) -> Result<TunedPolicy> {
    let eval = |proportion: f64| -> Result<f64> {
        let policy = ConventionalPolicy {
            proportion,
            ..template.clone()
        };
        let (cfg, traj) = policy.simulate(reference, base, gen)?;
        safety(cfg.pu_to_hz(traj.nadir), cfg.pu_to_hz(traj.steady_state), metrics)
    };
    let full = eval(1.0)?;
    if full < target {
        return Ok(TunedPolicy {
            policy: ConventionalPolicy {
                proportion: 1.0,
                ..template.clone()
            },
            reference_safety: full,
            safe: false,
        });
    }
    // integer thousandths keep the result exactly reproducible
    let (mut lo, mut hi) = (0u32, 1000u32);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if eval(mid as f64 / 1000.0)? >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let proportion = hi as f64 / 1000.0;
    Ok(TunedPolicy {
        policy: ConventionalPolicy {
            proportion,
            ..template.clone()
        },
        reference_safety: eval(proportion)?,
        safe: true,
    })
}

/// Per-method aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub feeder_mw: Option<f64>,
    pub count: usize,
    pub median_mae: Option<f64>,
    pub p95_mae: Option<f64>,
    pub mean_safety: f64,
    pub min_safety: f64,
    pub fraction_safe: f64,
    pub fraction_safety_09: f64,
    pub mean_cost: f64,
    pub mean_shed_mw: f64,
}

pub fn summarize(method: &str, rows: &[MetricsRow]) -> Summary {
    let maes: Vec<f64> = rows.iter().filter_map(|r| r.mae).collect();
    let n = rows.len().max(1) as f64;
    let frac = |f: &dyn Fn(&MetricsRow) -> bool| rows.iter().filter(|r| f(r)).count() as f64 / n;
    Summary {
        method: method.to_string(),
        feeder_mw: rows.first().and_then(|r| r.feeder_mw),
        count: rows.len(),
        median_mae: (!maes.is_empty()).then(|| stats::median(&maes)),
        p95_mae: (!maes.is_empty()).then(|| stats::quantile(&maes, 0.95)),
        mean_safety: rows.iter().map(|r| r.safety).sum::<f64>() / n,
        min_safety: rows.iter().map(|r| r.safety).fold(f64::INFINITY, f64::min),
        fraction_safe: frac(&|r| r.safety >= 1.0),
        fraction_safety_09: frac(&|r| r.safety >= 0.9),
        mean_cost: rows.iter().map(|r| r.control_cost).sum::<f64>() / n,
        mean_shed_mw: rows.iter().map(|r| r.total_shed_mw).sum::<f64>() / n,
    }
}

pub fn summaries_to_csv(summaries: &[Summary]) -> String {
    let mut out = String::from(
        "method,feeder_mw,count,median_mae,p95_mae,mean_safety,min_safety,fraction_safe,fraction_safety_09,mean_cost,mean_shed_mw\n",
    );
    for s in summaries {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            s.method,
            opt(s.feeder_mw),
            s.count,
            opt(s.median_mae),
            opt(s.p95_mae),
            s.mean_safety,
            s.min_safety,
            s.fraction_safe,
            s.fraction_safety_09,
            s.mean_cost,
            s.mean_shed_mw
        );
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#555555"];

struct Frame {
    width: f64,
    height: f64,
    margin: f64,
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        self.margin + (x - self.x.0) / (self.x.1 - self.x.0) * (self.width - 2.0 * self.margin)
    }

    fn py(&self, y: f64) -> f64 {
        self.height - self.margin - (y - self.y.0) / (self.y.1 - self.y.0) * (self.height - 2.0 * self.margin)
    }

    fn open(&self, title: &str) -> String {
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <text x=\"{cx}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n",
            w = self.width,
            h = self.height,
            cx = self.width / 2.0
        );
        let _ = writeln!(
            s,
            "<rect x=\"{m}\" y=\"{m}\" width=\"{iw}\" height=\"{ih}\" fill=\"none\" stroke=\"black\"/>",
            m = self.margin,
            iw = self.width - 2.0 * self.margin,
            ih = self.height - 2.0 * self.margin
        );
        for k in 0..=4 {
            let v = self.y.0 + (self.y.1 - self.y.0) * k as f64 / 4.0;
            let _ = writeln!(
                s,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{:.3}</text>",
                self.margin - 4.0,
                self.py(v) + 3.0,
                v
            );
        }
        s
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    let span = (hi - lo).max(1e-6);
    (lo - 0.05 * span, hi + 0.05 * span)
}

/// Overlay of frequency trajectories with horizontal reference lines.
pub fn trajectories_svg(title: &str, series: &[(String, Vec<f64>, Vec<f64>)], limits: &[f64]) -> String {
    let xs = series.iter().flat_map(|s| s.1.iter().copied());
    let ys = series.iter().flat_map(|s| s.2.iter().copied()).chain(limits.iter().copied());
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |a, v| (a.0.min(v), a.1.max(v)));
    let (y0, y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |a, v| (a.0.min(v), a.1.max(v)));
    let frame = Frame {
        width: 720.0,
        height: 420.0,
        margin: 50.0,
        x: if x1 > x0 { (x0, x1) } else { (0.0, 1.0) },
        y: padded(y0, y1),
    };
    let mut s = frame.open(title);
    for l in limits {
        let _ = writeln!(
            s,
            "<line x1=\"{:.1}\" x2=\"{:.1}\" y1=\"{y:.1}\" y2=\"{y:.1}\" stroke=\"#999\" stroke-dasharray=\"4 3\"/>",
            frame.px(frame.x.0),
            frame.px(frame.x.1),
            y = frame.py(*l)
        );
    }
    for (k, (label, t, v)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = t
            .iter()
            .zip(v)
            .map(|(a, b)| format!("{:.1},{:.1}", frame.px(*a), frame.py(*b)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            points.join(" ")
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\" font-family=\"sans-serif\" font-size=\"11\">{label}</text>",
            frame.width - frame.margin - 120.0,
            frame.margin + 14.0 * (k + 1) as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Box summary (min, q1, median, q3, max) per labelled group.
pub fn boxes_svg(title: &str, groups: &[(String, Vec<f64>)]) -> String {
    let all = groups.iter().flat_map(|g| g.1.iter().copied());
    let (y0, y1) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |a, v| (a.0.min(v), a.1.max(v)));
    let (y0, y1) = if y1 >= y0 { (y0, y1) } else { (0.0, 1.0) };
    let frame = Frame {
        width: 120.0 * groups.len().max(1) as f64 + 100.0,
        height: 420.0,
        margin: 50.0,
        x: (0.0, groups.len().max(1) as f64),
        y: padded(y0, y1),
    };
    let mut s = frame.open(title);
    for (k, (label, values)) in groups.iter().enumerate() {
        if values.is_empty() {
            continue;
        }
        let q = |p: f64| stats::quantile(values, p);
        let (lo, q1, med, q3, hi) = (q(0.0), q(0.25), q(0.5), q(0.75), q(1.0));
        let cx = frame.px(k as f64 + 0.5);
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(
            s,
            "<line x1=\"{cx:.1}\" x2=\"{cx:.1}\" y1=\"{:.1}\" y2=\"{:.1}\" stroke=\"{color}\"/>",
            frame.py(lo),
            frame.py(hi)
        );
        let _ = writeln!(
            s,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"40\" height=\"{:.1}\" fill=\"white\" stroke=\"{color}\"/>",
            cx - 20.0,
            frame.py(q3),
            (frame.py(q1) - frame.py(q3)).max(0.5)
        );
        let _ = writeln!(
            s,
            "<line x1=\"{:.1}\" x2=\"{:.1}\" y1=\"{y:.1}\" y2=\"{y:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            cx - 20.0,
            cx + 20.0,
            y = frame.py(med)
        );
        let _ = writeln!(
            s,
            "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{label}</text>",
            frame.height - frame.margin + 16.0
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{FaultEvent, SampleGrid};

    fn m() -> MetricConfig {
        MetricConfig::default()
    }

    #[test]
    fn safety_anchors() {
        assert_eq!(safety(49.0, 49.5, &m()).unwrap(), 1.0);
        assert_eq!(safety(48.5, 49.0, &m()).unwrap(), 0.0);
        assert!((safety(48.75, 49.25, &m()).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(safety(47.0, 51.0, &m()).unwrap(), 0.5);
    }

    #[test]
    fn cost_anchors() {
        assert_eq!(control_cost(49.0, 49.5, &m()).unwrap(), 1.0);
        assert_eq!(control_cost(49.5, 50.0, &m()).unwrap(), 0.0);
        assert_eq!(control_cost(49.25, 50.0, &m()).unwrap(), 0.0);
        assert!((control_cost(49.25, 49.5, &m()).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_anchors_rejected() {
        let mut c = m();
        c.safety_ssv = Anchor::new(49.0, 49.0);
        assert!(matches!(safety(49.0, 49.0, &c), Err(KlsError::Config(_))));
        let mut c = m();
        c.alpha = 0.7;
        assert!(safety(49.0, 49.0, &c).is_err());
    }

    #[test]
    fn mae_oracle() {
        assert_eq!(trajectory_mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let t = [0.1, -0.2, 0.3];
        let p: Vec<f64> = t.iter().map(|x| x + 0.001).collect();
        assert!((trajectory_mae(&p, &t).unwrap() - 0.001).abs() < 1e-15);
        let a: [f64; 4] = [0.3, -1.2, 4.0, 0.0];
        let b = [0.1, 0.5, -2.0, 0.25];
        let mut naive = 0.0;
        for i in 0..4 {
            naive += (a[i] - b[i]).abs();
        }
        assert_eq!(trajectory_mae(&a, &b).unwrap(), naive / 4.0);
        assert!(trajectory_mae(&a, &b[..3]).is_err());
    }

    fn short_gen() -> GenerationConfig {
        GenerationConfig {
            grid: SampleGrid {
                points: 20,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn relay_inactive_above_trigger() {
        let base = GridConfig::desk_default();
        let sc = ScenarioSpec {
            id: 0,
            inertia_scale: vec![1.0; base.machines.len()],
            fault: FaultEvent::infeed_loss(1.0, 20.0),
            shed: vec![0.0; base.loads.len()],
            seed: 0,
        };
        let policy = ConventionalPolicy::default();
        let (_, traj) = policy.simulate(&sc, &base, &short_gen()).unwrap();
        assert!(traj.shed.is_empty());
        let plain = grid::simulate(&base, &sc.fault, &sc.shed, 1.3, &short_gen().grid).unwrap();
        assert_eq!(plain.omega, traj.omega);
    }

    #[test]
    fn full_relay_is_safe_on_mild_fault() {
        let base = GridConfig::desk_default();
        let sc = ScenarioSpec {
            id: 0,
            inertia_scale: vec![1.0; base.machines.len()],
            fault: FaultEvent::trip(1.0, vec![1]),
            shed: vec![0.0; base.loads.len()],
            seed: 0,
        };
        let policy = ConventionalPolicy {
            proportion: 1.0,
            trigger_hz: 49.9,
            ..Default::default()
        };
        let (cfg, traj) = policy.simulate(&sc, &base, &short_gen()).unwrap();
        let s = safety(cfg.pu_to_hz(traj.nadir), cfg.pu_to_hz(traj.steady_state), &m()).unwrap();
        assert_eq!(s, 1.0);
    }

    #[test]
    fn csv_and_svg_shapes() {
        let row = MetricsRow {
            scenario: 3,
            method: "kls".into(),
            nadir_hz: 49.1,
            ssv_hz: 49.6,
            safety: 1.0,
            control_cost: 0.2,
            mae: Some(1e-4),
            total_shed_mw: 40.0,
            zeta: None,
            feeder_mw: Some(10.0),
        };
        let csv = rows_to_csv(&[row.clone()]);
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), CSV_HEADER.split(',').count());
        let svg = trajectories_svg("t", &[("a".into(), vec![0.0, 1.0], vec![49.0, 49.5])], &[49.0]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        let b = boxes_svg("b", &[("kls".into(), vec![1.0, 2.0, 3.0])]);
        assert!(b.contains("<rect"));
        let s = summarize("kls", &[row]);
        assert_eq!(s.count, 1);
        assert_eq!(s.median_mae, Some(1e-4));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn metrics_are_bounded_and_monotone(
                nadir in 47.0..51.0f64,
                ssv in 47.0..51.0f64,
                dn in 0.0..0.5f64,
                ds in 0.0..0.5f64,
            ) {
                let c = MetricConfig::default();
                let s = safety(nadir, ssv, &c).unwrap();
                let k = control_cost(nadir, ssv, &c).unwrap();
                prop_assert!((0.0..=1.0).contains(&s));
                prop_assert!((0.0..=1.0).contains(&k));
                // higher frequencies are never less safe and never cost more
                prop_assert!(safety(nadir + dn, ssv + ds, &c).unwrap() >= s);
                prop_assert!(control_cost(nadir + dn, ssv + ds, &c).unwrap() <= k);
            }

            #[test]
            fn mae_is_a_mean_of_absolute_errors(a in proptest::collection::vec(-1.0..1.0f64, 1..40), shift in -0.1..0.1f64) {
                let b: Vec<f64> = a.iter().map(|x| x + shift).collect();
                let mae = trajectory_mae(&a, &b).unwrap();
                prop_assert!((mae - shift.abs()).abs() < 1e-12);
                prop_assert_eq!(trajectory_mae(&a, &a).unwrap(), 0.0);
            }
        }
    }
}

