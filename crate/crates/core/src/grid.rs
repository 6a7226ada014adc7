//! Reduced-order multi-machine frequency simulator.
//!
//! Each machine group is a swing equation coupled to the others through a
//! linearised synchronising-power network, with a first-order governor that
//! has a hard deadband, a ramp limit and an output ceiling. Loads are
//! frequency dependent, `P = PL (1 + kpf ω)`, and can be shed per bus. All
//! quantities inside the integrator are per unit on the system base.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{KlsError, Result};

/// Frequency deviation below which the system is considered collapsed.
pub const COLLAPSE_PU: f64 = -0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineConfig {
    pub name: String,
    pub rating_mva: f64,
    pub dispatch_mw: f64,
    /// Inertia constant, seconds on the machine base.
    pub inertia_h: f64,
    /// Rotor damping, pu power per pu speed on the machine base.
    pub damping: f64,
    /// Governor gain 1/R, pu power per pu speed on the machine base.
    pub governor_gain: f64,
    /// Governor time constant in seconds.
    pub governor_tc: f64,
    /// Governor deadband in pu frequency.
    pub deadband: f64,
    /// Output ceiling in pu of the machine rating.
    pub pmax: f64,
    /// Governor ramp limit, pu of rating per second.
    #[serde(default)]
    pub ramp_limit: Option<f64>,
    /// Synchronising power coefficient, pu per radian on the machine base.
    #[serde(default = "default_sync_coeff")]
    pub sync_coeff: f64,
    /// Damper-winding torque against the centre-of-inertia speed.
    #[serde(default)]
    pub damper: f64,
    /// Generation lost when a unit of this group trips.
    #[serde(default)]
    pub trip_mw: f64,
}

fn default_sync_coeff() -> f64 {
    1.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadConfig {
    pub name: String,
    pub base_mw: f64,
    /// Frequency sensitivity, pu power per pu frequency.
    pub kpf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub machines: Vec<MachineConfig>,
    pub loads: Vec<LoadConfig>,
    #[serde(default = "default_nominal_hz")]
    pub nominal_hz: f64,
    pub base_mva: f64,
    /// Non-synchronous infeed (no inertia, no governor).
    #[serde(default)]
    pub renewable_mw: f64,
}

fn default_nominal_hz() -> f64 {
    50.0
}

impl GridConfig {
    /// Desk-scale four-group, five-bus system carrying 2600 MW of load.
    pub fn desk_default() -> Self {
        let machine = |name: &str,
                       rating: f64,
                       dispatch: f64,
                       h: f64,
                       gain: f64,
                       tc: f64,
                       pmax: f64,
                       trip: f64| MachineConfig {
            name: name.to_string(),
            rating_mva: rating,
            dispatch_mw: dispatch,
            inertia_h: h,
            damping: 1.0,
            governor_gain: gain,
            governor_tc: tc,
            deadband: 0.0004,
            pmax,
            ramp_limit: None,
            sync_coeff: 1.5,
            damper: 10.0,
            trip_mw: trip,
        };
        GridConfig {
            machines: vec![
                machine("G1", 1100.0, 800.0, 6.5, 16.0, 10.0, 0.82, 150.0),
                machine("G2", 950.0, 680.0, 5.5, 14.0, 9.0, 0.80, 130.0),
                machine("G3", 700.0, 500.0, 5.0, 12.0, 8.0, 0.80, 110.0),
                machine("G4", 520.0, 370.0, 4.0, 10.0, 7.0, 0.78, 90.0),
            ],
            loads: vec![
                LoadConfig { name: "B1".into(), base_mw: 600.0, kpf: 1.2 },
                LoadConfig { name: "B2".into(), base_mw: 550.0, kpf: 1.5 },
                LoadConfig { name: "B3".into(), base_mw: 520.0, kpf: 1.0 },
                LoadConfig { name: "B4".into(), base_mw: 480.0, kpf: 1.8 },
                LoadConfig { name: "B5".into(), base_mw: 450.0, kpf: 1.4 },
            ],
            nominal_hz: 50.0,
            base_mva: 2600.0,
            renewable_mw: 250.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(KlsError::Config(msg));
        if self.machines.is_empty() {
            return cfg("grid needs at least one machine".into());
        }
        if self.loads.is_empty() {
            return cfg("grid needs at least one load".into());
        }
        if !(self.nominal_hz > 0.0) || !(self.base_mva > 0.0) {
            return cfg("nominal frequency and base MVA must be positive".into());
        }
        if !(self.renewable_mw >= 0.0) {
            return cfg("renewable infeed must be non-negative".into());
        }
        for m in &self.machines {
            if !(m.inertia_h > 0.0) {
                return cfg(format!("machine {}: H must be positive", m.name));
            }
            if !(m.governor_tc > 0.0) {
                return cfg(format!("machine {}: Tg must be positive", m.name));
            }
            if !(m.pmax > 0.0) || !(m.rating_mva > 0.0) {
                return cfg(format!("machine {}: Pmax and rating must be positive", m.name));
            }
            if m.dispatch_mw < 0.0 || m.dispatch_mw > m.pmax * m.rating_mva + 1e-9 {
                return cfg(format!("machine {}: dispatch outside [0, Pmax]", m.name));
            }
            if m.trip_mw < 0.0 || m.trip_mw > m.dispatch_mw {
                return cfg(format!("machine {}: trip size outside [0, dispatch]", m.name));
            }
            if m.damping < 0.0 || m.governor_gain < 0.0 || m.deadband < 0.0 || m.damper < 0.0 {
                return cfg(format!("machine {}: negative gain", m.name));
            }
            if !(m.sync_coeff > 0.0) {
                return cfg(format!("machine {}: synchronising coefficient must be positive", m.name));
            }
            if matches!(m.ramp_limit, Some(r) if !(r > 0.0)) {
                return cfg(format!("machine {}: ramp limit must be positive", m.name));
            }
        }
        for l in &self.loads {
            if !(l.base_mw >= 0.0) {
                return cfg(format!("load {}: negative base level", l.name));
            }
        }
        let generation: f64 =
            self.machines.iter().map(|m| m.dispatch_mw).sum::<f64>() + self.renewable_mw;
        let load = self.total_load_mw();
        if (generation - load).abs() > 1e-6 * load.max(1.0) {
            return cfg(format!(
                "initial dispatch {generation:.3} MW does not balance load {load:.3} MW"
            ));
        }
        Ok(())
    }

    pub fn total_load_mw(&self) -> f64 {
        self.loads.iter().map(|l| l.base_mw).sum()
    }

    /// Copy of the configuration with each machine's H multiplied by `scale`.
    pub fn with_inertia_scale(&self, scale: &[f64]) -> Result<GridConfig> {
        if scale.len() != self.machines.len() {
            return Err(KlsError::Argument(format!(
                "{} inertia multipliers for {} machines",
                scale.len(),
                self.machines.len()
            )));
        }
        let mut out = self.clone();
        for (m, s) in out.machines.iter_mut().zip(scale) {
            m.inertia_h *= s;
        }
        Ok(out)
    }

    /// Inertia-weighted mean of the multipliers, i.e. system inertia relative
    /// to the nominal configuration.
    pub fn system_inertia_ratio(&self, scale: &[f64]) -> f64 {
        let (num, den) = self
            .machines
            .iter()
            .zip(scale)
            .fold((0.0, 0.0), |(n, d), (m, s)| {
                let w = m.inertia_h * m.rating_mva;
                (n + w * s, d + w)
            });
        num / den
    }

    /// Inertia left in service after `tripped` units are lost, relative to
    /// the nominal pre-fault total.
    pub fn post_fault_inertia_ratio(&self, scale: &[f64], tripped: &[usize]) -> f64 {
        let mut state = SimState::equilibrium(self);
        state.apply_trips(self, tripped);
        let (num, den) = self
            .machines
            .iter()
            .zip(scale)
            .zip(&state.in_service)
            .fold((0.0, 0.0), |(n, d), ((m, s), alive)| {
                let w = m.inertia_h * m.rating_mva;
                (n + w * s * alive, d + w)
            });
        num / den
    }

    pub fn hz_to_pu(&self, hz: f64) -> f64 {
        (hz - self.nominal_hz) / self.nominal_hz
    }

    pub fn pu_to_hz(&self, pu: f64) -> f64 {
        self.nominal_hz * (1.0 + pu)
    }

    /// Number of algebraic signals exported alongside frequency.
    pub fn signal_count(&self) -> usize {
        self.machines.len() + 1
    }
}

/// Loss of generation at a given instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub time: f64,
    /// Indices of machine groups that lose one unit.
    #[serde(default)]
    pub tripped: Vec<usize>,
    /// Additional loss of non-synchronous infeed.
    #[serde(default)]
    pub infeed_loss_mw: f64,
}

impl FaultEvent {
    pub fn none(time: f64) -> Self {
        FaultEvent {
            time,
            tripped: Vec::new(),
            infeed_loss_mw: 0.0,
        }
    }

    pub fn trip(time: f64, tripped: Vec<usize>) -> Self {
        FaultEvent {
            time,
            tripped,
            infeed_loss_mw: 0.0,
        }
    }

    pub fn infeed_loss(time: f64, mw: f64) -> Self {
        FaultEvent {
            time,
            tripped: Vec::new(),
            infeed_loss_mw: mw,
        }
    }

    pub fn deficit_mw(&self, config: &GridConfig) -> f64 {
        self.tripped
            .iter()
            .map(|&i| config.machines[i].trip_mw)
            .sum::<f64>()
            + self.infeed_loss_mw
    }

    pub fn validate(&self, config: &GridConfig) -> Result<()> {
        if !(self.time >= 0.0) {
            return Err(KlsError::Config("fault time must be non-negative".into()));
        }
        if !(self.infeed_loss_mw >= 0.0) || self.infeed_loss_mw > config.renewable_mw + 1e-9 {
            return Err(KlsError::Config(format!(
                "infeed loss {} MW outside [0, {}]",
                self.infeed_loss_mw, config.renewable_mw
            )));
        }
        let mut seen = vec![false; config.machines.len()];
        for &i in &self.tripped {
            if i >= config.machines.len() {
                return Err(KlsError::Config(format!("tripped machine index {i} out of range")));
            }
            if seen[i] {
                return Err(KlsError::Config(format!("machine {i} tripped twice")));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

/// Per-machine parameters on the system base, after trips.
#[derive(Debug, Clone)]
struct MachineParams {
    inertia: f64,
    damping: f64,
    gain: f64,
    tc: f64,
    deadband: f64,
    pmax: f64,
    ramp: f64,
    sync: f64,
    damper: f64,
    setpoint: f64,
}

/// Exogenous operating condition seen by one integration step.
#[derive(Debug, Clone, PartialEq)]
pub struct Exogenous {
    /// Remaining fraction of each bus load, `1 - u_i` once shed.
    pub load_fraction: Vec<f64>,
    /// Non-synchronous infeed in MW.
    pub infeed_mw: f64,
}

impl Exogenous {
    pub fn nominal(config: &GridConfig) -> Self {
        Exogenous {
            load_fraction: vec![1.0; config.loads.len()],
            infeed_mw: config.renewable_mw,
        }
    }
}

/// Dynamic state of the machine groups.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub time: f64,
    /// Rotor speed deviations, pu.
    pub speed: Vec<f64>,
    /// Rotor angles relative to the pre-fault operating point, rad.
    pub angle: Vec<f64>,
    /// Mechanical power, pu on the system base.
    pub mechanical: Vec<f64>,
    /// Fraction of each group still in service.
    pub in_service: Vec<f64>,
}

impl SimState {
    pub fn equilibrium(config: &GridConfig) -> Self {
        let n = config.machines.len();
        SimState {
            time: 0.0,
            speed: vec![0.0; n],
            angle: vec![0.0; n],
            mechanical: config
                .machines
                .iter()
                .map(|m| m.dispatch_mw / config.base_mva)
                .collect(),
            in_service: vec![1.0; n],
        }
    }

    /// Trip one unit of each listed group.
    pub fn apply_trips(&mut self, config: &GridConfig, tripped: &[usize]) {
        for &i in tripped {
            let m = &config.machines[i];
            if m.dispatch_mw <= 0.0 {
                continue;
            }
            let before = self.in_service[i];
            let after = (before - m.trip_mw / m.dispatch_mw).max(0.0);
            if before > 0.0 {
                self.mechanical[i] *= after / before;
            }
            self.in_service[i] = after;
        }
    }
}

fn machine_params(config: &GridConfig, in_service: &[f64]) -> Vec<MachineParams> {
    config
        .machines
        .iter()
        .zip(in_service)
        .map(|(m, &alive)| {
            let s = m.rating_mva * alive / config.base_mva;
            MachineParams {
                inertia: 2.0 * m.inertia_h * s,
                damping: m.damping * s,
                gain: m.governor_gain * s,
                tc: m.governor_tc,
                deadband: m.deadband,
                pmax: m.pmax * s,
                ramp: m.ramp_limit.map_or(f64::INFINITY, |r| r * s),
                sync: m.sync_coeff * s,
                damper: m.damper * s,
                setpoint: m.dispatch_mw * alive / config.base_mva,
            }
        })
        .collect()
}

/// Centre-of-inertia frequency `Σ H_i ω_i / Σ H_i`.
pub fn coi_frequency(speeds: &[f64], inertias: &[f64]) -> Result<f64> {
    if speeds.is_empty() || speeds.len() != inertias.len() {
        return Err(KlsError::Argument(format!(
            "need equal non-empty speed/inertia lists, got {} and {}",
            speeds.len(),
            inertias.len()
        )));
    }
    if inertias.iter().any(|&h| !(h > 0.0)) {
        return Err(KlsError::Argument("inertias must be positive".into()));
    }
    let total: f64 = inertias.iter().sum();
    Ok(speeds.iter().zip(inertias).map(|(w, h)| w * h).sum::<f64>() / total)
}

fn deadband(omega: f64, band: f64) -> f64 {
    omega - omega.clamp(-band, band)
}

struct Derivative {
    speed: Vec<f64>,
    angle: Vec<f64>,
    mechanical: Vec<f64>,
}

/// Evaluates the right-hand side at one stage.
struct Rhs<'a> {
    config: &'a GridConfig,
    params: Vec<MachineParams>,
    load_mw: Vec<f64>,
    /// Σ load − infeed − Σ setpoints at nominal frequency, MW.
    mismatch_mw: f64,
}

impl<'a> Rhs<'a> {
    fn new(config: &'a GridConfig, in_service: &[f64], exo: &Exogenous) -> Self {
        let load_mw: Vec<f64> = config
            .loads
            .iter()
            .zip(&exo.load_fraction)
            .map(|(l, f)| l.base_mw * f)
            .collect();
        let setpoints: f64 = config
            .machines
            .iter()
            .zip(in_service)
            .map(|(m, a)| m.dispatch_mw * a)
            .sum();
        let mismatch_mw = load_mw.iter().sum::<f64>() - exo.infeed_mw - setpoints;
        Rhs {
            config,
            params: machine_params(config, in_service),
            load_mw,
            mismatch_mw,
        }
    }

    fn coi(&self, speed: &[f64]) -> f64 {
        let (num, den) = self
            .params
            .iter()
            .zip(speed)
            .filter(|(p, _)| p.inertia > 0.0)
            .fold((0.0, 0.0), |(n, d), (p, w)| (n + p.inertia * w, d + p.inertia));
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    }

    fn load_power(&self, coi: f64) -> f64 {
        self.config
            .loads
            .iter()
            .zip(&self.load_mw)
            .map(|(l, p)| p * (1.0 + l.kpf * coi))
            .sum::<f64>()
            / self.config.base_mva
    }

    /// Frequency-dependent part of the load, MW.
    fn load_sensitivity(&self, coi: f64) -> f64 {
        self.config
            .loads
            .iter()
            .zip(&self.load_mw)
            .map(|(l, p)| p * l.kpf * coi)
            .sum()
    }

    fn eval(&self, speed: &[f64], angle: &[f64], mechanical: &[f64]) -> Derivative {
        let n = speed.len();
        let coi = self.coi(speed);
        let excess = (self.mismatch_mw + self.load_sensitivity(coi)) / self.config.base_mva;
        let (sync_sum, weighted) = self
            .params
            .iter()
            .zip(angle)
            .fold((0.0, 0.0), |(s, w), (m, a)| (s + m.sync, w + m.sync * a));
        let bus_angle = if sync_sum > 0.0 {
            (weighted - excess) / sync_sum
        } else {
            0.0
        };
        let mut d = Derivative {
            speed: vec![0.0; n],
            angle: vec![0.0; n],
            mechanical: vec![0.0; n],
        };
        let omega_base = 2.0 * PI * self.config.nominal_hz;
        for i in 0..n {
            let m = &self.params[i];
            if m.inertia <= 0.0 {
                continue;
            }
            let electrical = m.setpoint + m.sync * (angle[i] - bus_angle);
            d.speed[i] = (mechanical[i]
                - electrical
                - m.damping * speed[i]
                - m.damper * (speed[i] - coi))
                / m.inertia;
            d.angle[i] = omega_base * speed[i];
            let target = m.setpoint - m.gain * deadband(speed[i], m.deadband);
            let mut rate = ((target - mechanical[i]) / m.tc).clamp(-m.ramp, m.ramp);
            if (mechanical[i] >= m.pmax && rate > 0.0) || (mechanical[i] <= 0.0 && rate < 0.0) {
                rate = 0.0;
            }
            d.mechanical[i] = rate;
        }
        d
    }
}

/// One fixed-step RK4 integration of the swing/governor dynamics.
pub fn step(state: &SimState, config: &GridConfig, exo: &Exogenous, dt: f64) -> Result<SimState> {
    if !(dt > 0.0) {
        return Err(KlsError::Argument(format!("step size must be positive, got {dt}")));
    }
    let rhs = Rhs::new(config, &state.in_service, exo);
    let n = state.speed.len();
    let axpy = |x: &[f64], k: &[f64], h: f64| -> Vec<f64> {
        x.iter().zip(k).map(|(a, b)| a + h * b).collect()
    };
    let k1 = rhs.eval(&state.speed, &state.angle, &state.mechanical);
    let k2 = rhs.eval(
        &axpy(&state.speed, &k1.speed, dt / 2.0),
        &axpy(&state.angle, &k1.angle, dt / 2.0),
        &axpy(&state.mechanical, &k1.mechanical, dt / 2.0),
    );
    let k3 = rhs.eval(
        &axpy(&state.speed, &k2.speed, dt / 2.0),
        &axpy(&state.angle, &k2.angle, dt / 2.0),
        &axpy(&state.mechanical, &k2.mechanical, dt / 2.0),
    );
    let k4 = rhs.eval(
        &axpy(&state.speed, &k3.speed, dt),
        &axpy(&state.angle, &k3.angle, dt),
        &axpy(&state.mechanical, &k3.mechanical, dt),
    );
    let combine = |x: &[f64], a: &[f64], b: &[f64], c: &[f64], d: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| x[i] + dt / 6.0 * (a[i] + 2.0 * b[i] + 2.0 * c[i] + d[i]))
            .collect()
    };
    let mut next = SimState {
        time: state.time + dt,
        speed: combine(&state.speed, &k1.speed, &k2.speed, &k3.speed, &k4.speed),
        angle: combine(&state.angle, &k1.angle, &k2.angle, &k3.angle, &k4.angle),
        mechanical: combine(
            &state.mechanical,
            &k1.mechanical,
            &k2.mechanical,
            &k3.mechanical,
            &k4.mechanical,
        ),
        in_service: state.in_service.clone(),
    };
    for (i, p) in rhs.params.iter().enumerate() {
        next.mechanical[i] = next.mechanical[i].clamp(0.0, p.pmax.max(0.0));
        if !(next.speed[i].is_finite() && next.angle[i].is_finite() && next.mechanical[i].is_finite())
        {
            return Err(KlsError::Divergence {
                time: next.time,
                machine: config.machines[i].name.clone(),
            });
        }
    }
    Ok(next)
}

/// When load is shed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ShedSchedule {
    None,
    /// Persistent one-shot shedding of `fractions` (pu of each bus) at `time`.
    AtTime { time: f64, fractions: Vec<f64> },
    /// Threshold relay: once COI frequency falls to `threshold_pu`, shed
    /// `fractions` after `delay` seconds.
    OnThreshold {
        threshold_pu: f64,
        delay: f64,
        fractions: Vec<f64>,
    },
}

/// Sampling layout of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleGrid {
    /// Integration and embedding step, seconds.
    pub dt_embed: f64,
    /// Prediction step between coarse points, seconds.
    pub dt_pred: f64,
    /// Length of the delay window, seconds.
    pub tau: f64,
    /// Number of coarse points T.
    pub points: usize,
    /// Delay from fault to the first coarse point.
    pub first_point_delay: f64,
}

impl Default for SampleGrid {
    fn default() -> Self {
        SampleGrid {
            dt_embed: 0.01,
            dt_pred: 1.0,
            tau: 0.3,
            points: 60,
            first_point_delay: 0.3,
        }
    }
}

fn steps_of(duration: f64, dt: f64, what: &str) -> Result<usize> {
    let n = (duration / dt).round();
    if n < 0.0 || ((n * dt) - duration).abs() > 1e-9 * duration.abs().max(1.0) {
        return Err(KlsError::Config(format!(
            "{what} = {duration} s is not a multiple of the step {dt} s"
        )));
    }
    Ok(n as usize)
}

impl SampleGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt_embed > 0.0) || !(self.dt_pred > 0.0) || !(self.tau >= 0.0) {
            return Err(KlsError::Config("sample grid steps must be positive".into()));
        }
        if self.points < 2 {
            return Err(KlsError::Config("need at least two coarse points".into()));
        }
        steps_of(self.dt_pred, self.dt_embed, "dt_pred")?;
        steps_of(self.tau, self.dt_embed, "tau")?;
        steps_of(self.first_point_delay, self.dt_embed, "first point delay")?;
        Ok(())
    }

    pub fn window_samples(&self) -> usize {
        (self.tau / self.dt_embed).round() as usize + 1
    }

    pub fn coarse_times(&self, fault_time: f64) -> Vec<f64> {
        (0..self.points)
            .map(|k| fault_time + self.first_point_delay + k as f64 * self.dt_pred)
            .collect()
    }
}

/// Delay-window samples ending at a coarse point, oldest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineWindow {
    pub end_time: f64,
    pub dt: f64,
    pub omega: Vec<f64>,
    /// `signals[channel][sample]`.
    pub signals: Vec<Vec<f64>>,
}

/// Simulated frequency response in both sampling grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub coarse_times: Vec<f64>,
    /// COI frequency deviation ω_t (pu) at the coarse points.
    pub omega: Vec<f64>,
    pub windows: Vec<FineWindow>,
    /// Minimum COI frequency on the fine grid after the fault, pu.
    pub nadir: f64,
    /// COI frequency at the last coarse point, pu.
    pub steady_state: f64,
    pub collapsed: bool,
    /// Whether `|ω_T − ω_{T−5}| < 1e-5`.
    pub settled: bool,
    /// Time at which shedding took effect, if any.
    pub shed_time: Option<f64>,
    pub shed: Vec<f64>,
}

/// Full fine-grid record of a run.
#[derive(Debug, Clone)]
pub struct FineRecord {
    pub dt: f64,
    pub omega: Vec<f64>,
    pub signals: Vec<Vec<f64>>,
    pub shed_time: Option<f64>,
    pub collapsed: bool,
}

/// Integrate from equilibrium at t = 0 for `steps` fine steps.
pub fn integrate(
    config: &GridConfig,
    fault: &FaultEvent,
    schedule: &ShedSchedule,
    dt: f64,
    steps: usize,
) -> Result<FineRecord> {
    config.validate()?;
    fault.validate(config)?;
    let fault_step = steps_of(fault.time, dt, "fault time")?;
    let mut state = SimState::equilibrium(config);
    let mut exo = Exogenous::nominal(config);
    let nsig = config.signal_count();
    let mut rec = FineRecord {
        dt,
        omega: Vec::with_capacity(steps + 1),
        signals: vec![Vec::with_capacity(steps + 1); nsig],
        shed_time: None,
        collapsed: false,
    };
    let (shed_fracs, mut shed_step): (Option<&[f64]>, Option<usize>) = match schedule {
        ShedSchedule::None => (None, None),
        ShedSchedule::AtTime { time, fractions } => {
            check_fractions(config, fractions)?;
            (Some(fractions), Some(steps_of(*time, dt, "shed time")?))
        }
        ShedSchedule::OnThreshold { fractions, delay, .. } => {
            check_fractions(config, fractions)?;
            steps_of(*delay, dt, "relay delay")?;
            (Some(fractions), None)
        }
    };
    let mut armed = true;
    for k in 0..=steps {
        if k == fault_step {
            state.apply_trips(config, &fault.tripped);
            exo.infeed_mw = config.renewable_mw - fault.infeed_loss_mw;
        }
        // measurements at step k precede any shedding decided for step k
        let rhs = Rhs::new(config, &state.in_service, &exo);
        let coi = rhs.coi(&state.speed);
        rec.omega.push(coi);
        for (i, p) in state.mechanical.iter().enumerate() {
            rec.signals[i].push(*p);
        }
        rec.signals[nsig - 1].push(rhs.load_power(coi));
        if coi < COLLAPSE_PU {
            rec.collapsed = true;
        }
        if let ShedSchedule::OnThreshold {
            threshold_pu,
            delay,
            ..
        } = schedule
        {
            if shed_step.is_none() && k >= fault_step && coi <= *threshold_pu {
                shed_step = Some(k + steps_of(*delay, dt, "relay delay")?);
            }
        }
        if let (Some(fr), Some(s)) = (shed_fracs, shed_step) {
            if k == s && armed {
                apply_shed(&mut exo, fr);
                rec.shed_time = Some(k as f64 * dt);
                armed = false;
            }
        }
        if k == steps {
            break;
        }
        state = step(&state, config, &exo, dt)?;
    }
    Ok(rec)
}

fn apply_shed(exo: &mut Exogenous, fractions: &[f64]) {
    for (lf, u) in exo.load_fraction.iter_mut().zip(fractions) {
        *lf = 1.0 - u;
    }
}

fn check_fractions(config: &GridConfig, fractions: &[f64]) -> Result<()> {
    if fractions.len() != config.loads.len() {
        return Err(KlsError::Argument(format!(
            "{} shedding fractions for {} loads",
            fractions.len(),
            config.loads.len()
        )));
    }
    if fractions.iter().any(|u| !(0.0..=1.0).contains(u)) {
        return Err(KlsError::Argument("shedding fractions must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Simulate one scenario with persistent shedding `shed` applied at
/// `shed_time` and sample it on `grid`.
pub fn simulate(
    config: &GridConfig,
    fault: &FaultEvent,
    shed: &[f64],
    shed_time: f64,
    grid: &SampleGrid,
) -> Result<Trajectory> {
    if shed_time < fault.time {
        return Err(KlsError::Argument("shed time precedes the fault".into()));
    }
    let schedule = if shed.iter().all(|&u| u == 0.0) {
        check_fractions(config, shed)?;
        ShedSchedule::None
    } else {
        ShedSchedule::AtTime {
            time: shed_time,
            fractions: shed.to_vec(),
        }
    };
    simulate_schedule(config, fault, &schedule, grid)
}

pub fn simulate_schedule(
    config: &GridConfig,
    fault: &FaultEvent,
    schedule: &ShedSchedule,
    grid: &SampleGrid,
) -> Result<Trajectory> {
    grid.validate()?;
    let times = grid.coarse_times(fault.time);
    let last = *times.last().expect("at least two points");
    let steps = steps_of(last, grid.dt_embed, "horizon")?;
    let rec = integrate(config, fault, schedule, grid.dt_embed, steps)?;
    Ok(sample(&rec, fault.time, grid, &times, schedule))
}

fn sample(
    rec: &FineRecord,
    fault_time: f64,
    grid: &SampleGrid,
    times: &[f64],
    schedule: &ShedSchedule,
) -> Trajectory {
    let dt = rec.dt;
    let span = grid.window_samples() - 1;
    let idx = |t: f64| (t / dt).round() as usize;
    let mut windows = Vec::with_capacity(times.len());
    let mut omega = Vec::with_capacity(times.len());
    for &t in times {
        let end = idx(t);
        let start = end.saturating_sub(span);
        // pad with the earliest record (pre-fault equilibrium) if needed
        let take = |series: &[f64]| -> Vec<f64> {
            let mut w = vec![series[0]; span - (end - start)];
            w.extend_from_slice(&series[start..=end]);
            w
        };
        omega.push(rec.omega[end]);
        windows.push(FineWindow {
            end_time: t,
            dt,
            omega: take(&rec.omega),
            signals: rec.signals.iter().map(|s| take(s)).collect(),
        });
    }
    let fault_idx = idx(fault_time);
    let nadir = rec.omega[fault_idx..]
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let n = omega.len();
    let steady_state = omega[n - 1];
    let settled = n > 5 && (omega[n - 1] - omega[n - 6]).abs() < 1e-5;
    let shed = match schedule {
        ShedSchedule::None => Vec::new(),
        ShedSchedule::AtTime { fractions, .. } | ShedSchedule::OnThreshold { fractions, .. } => {
            if rec.shed_time.is_some() {
                fractions.clone()
            } else {
                Vec::new()
            }
        }
    };
    Trajectory {
        coarse_times: times.to_vec(),
        omega,
        windows,
        nadir,
        steady_state,
        collapsed: rec.collapsed,
        settled,
        shed_time: rec.shed_time,
        shed,
    }
}
