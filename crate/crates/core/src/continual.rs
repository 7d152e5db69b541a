//! Continual-learning server rules: rehearsal scheduling (DP-R) and synaptic
//! intelligence consolidation (DP-SI).

use crate::federation::{self, ClientConfig, CohortDelta, EvalPlan, FederationError, FederationState, Mechanism, Result};
use crate::nn::{Gradient, ParamVector};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

/// Rehearsal plan of one cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSchedule {
    pub rho: f64,
    /// Rounds the cohort may take part in before its budget is spent.
    pub allowance: u64,
    /// Rounds `0..dense_end` form the dense phase.
    pub dense_end: u64,
    pub interval: u64,
    pub remaining_rehearsals: u64,
}

impl CohortSchedule {
    pub fn new(rho: f64, allowance: u64, t_max: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(FederationError::InvalidConfig(format!("rho must lie in [0, 1), got {rho}")));
        }
        let reserved = (rho * allowance as f64).floor() as u64;
        let dense_end = ((1.0 - rho) * allowance as f64).ceil() as u64;
        let interval = (t_max.saturating_sub(dense_end) / reserved.max(1)).max(1);
        Ok(Self {
            rho,
            allowance,
            dense_end,
            interval,
            remaining_rehearsals: reserved,
        })
    }
}

/// Per-cohort rehearsal plans sharing a known maximum round count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RehearsalSchedule {
    pub t_max: u64,
    pub cohorts: Vec<CohortSchedule>,
}

impl RehearsalSchedule {
    pub fn new(rhos: &[f64], allowances: &[u64], t_max: u64) -> Result<Self> {
        if rhos.len() != allowances.len() {
            return Err(FederationError::InvalidConfig(format!(
                "{} rho values for {} cohorts",
                rhos.len(),
                allowances.len()
            )));
        }
        let cohorts = rhos
            .iter()
            .zip(allowances)
            .map(|(&rho, &allowance)| CohortSchedule::new(rho, allowance, t_max))
            .collect::<Result<_>>()?;
        Ok(Self { t_max, cohorts })
    }

    fn cohort(&self, cohort: usize) -> Result<&CohortSchedule> {
        self.cohorts
            .get(cohort)
            .ok_or_else(|| FederationError::InvalidConfig(format!("no rehearsal schedule for cohort {cohort}")))
    }

    /// Dense phase first, then one round every `interval` rounds while
    /// reserved rehearsals remain and `t < t_max`.
    pub fn rehearsal_should_run(&self, cohort: usize, t: u64) -> Result<bool> {
        let s = self.cohort(cohort)?;
        if t < s.dense_end {
            return Ok(true);
        }
        Ok(t < self.t_max && (t - s.dense_end) % s.interval == 0 && s.remaining_rehearsals > 0)
    }

    /// Records that the rehearsal scheduled for round `t` was executed.
    pub fn consume(&mut self, cohort: usize, t: u64) -> Result<()> {
        self.cohort(cohort)?;
        let s = &mut self.cohorts[cohort];
        if t >= s.dense_end {
            s.remaining_rehearsals = s.remaining_rehearsals.saturating_sub(1);
        }
        Ok(())
    }

    /// True once the cohort has no participation left in the schedule.
    pub fn is_spent(&self, cohort: usize, t: u64) -> Result<bool> {
        let s = self.cohort(cohort)?;
        Ok(t >= s.dense_end && (s.remaining_rehearsals == 0 || t >= self.t_max))
    }

    /// Rounds in `0..t_max` at which the cohort would participate if every
    /// scheduled round is executed.
    pub fn planned_rounds(&self, cohort: usize) -> Result<Vec<u64>> {
        let mut probe = self.clone();
        let horizon = self.t_max.max(self.cohort(cohort)?.dense_end);
        let mut rounds = Vec::new();
        for t in 0..horizon {
            if probe.rehearsal_should_run(cohort, t)? {
                probe.consume(cohort, t)?;
                rounds.push(t);
            }
        }
        Ok(rounds)
    }
}

/// Like the baseline round, except a cohort only contributes on rounds its
/// rehearsal schedule selects. A cohort whose schedule is spent is marked
/// exhausted. A relaxed cohort takes part every round until its extra
/// allowance is used.
pub fn dp_r_server_round(
    state: &mut FederationState,
    schedule: &mut RehearsalSchedule,
    mechanism: &Mechanism,
    client: &ClientConfig,
    eval: &EvalPlan,
) -> Result<()> {
    let started = Instant::now();
    let t = state.round;
    let mut deltas = Vec::with_capacity(state.cohorts.len());
    for c in 0..state.cohorts.len() {
        let relaxed = state.cohorts[c]
            .ledger
            .as_ref()
            .is_some_and(|l| !l.exhausted && l.relaxed_allowance.is_some());
        if relaxed || schedule.rehearsal_should_run(c, t)? {
            let d = state.cohort_delta(c, mechanism, client)?;
            if d.participated && !relaxed {
                schedule.consume(c, t)?;
            }
            deltas.push(d);
        } else {
            if schedule.is_spent(c, t)? {
                if let Some(ledger) = state.cohorts[c].ledger.as_mut() {
                    ledger.mark_exhausted();
                }
            }
            deltas.push(CohortDelta {
                delta: ParamVector::zeros(state.global_params.shapes()),
                participated: false,
            });
        }
    }
    let update = federation::average(&deltas, state.cohorts.len(), &state.global_params)?;
    state.finish_round(Some(&update), eval, started)
}

/// Synaptic-intelligence bookkeeping for one cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiCohort {
    /// Running importance sums `w`.
    pub importance: Vec<f64>,
    /// Parameters at the end of the cohort's task.
    pub anchor: Option<Vec<f64>>,
    /// Net parameter change over the task.
    pub path_delta: Option<Vec<f64>>,
    /// Regularization strengths, set at consolidation.
    pub omega: Option<Vec<f64>>,
}

impl SiCohort {
    pub fn is_consolidated(&self) -> bool {
        self.omega.is_some()
    }
}

/// How the server applies the consolidation penalty.
///
/// `Gradient` subtracts `gamma * grad L_SI` at the current parameters. With
/// noisy importance sums `2 * gamma * Omega` easily exceeds 2 and that step
/// overshoots the anchor, so the default `Proximal` step instead solves
/// `argmin 1/2 |theta - y|^2 + gamma * L_SI(theta)` in closed form, where `y`
/// is the parameter vector after the averaged cohort update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiStep {
    #[default]
    Proximal,
    Gradient,
}

impl fmt::Display for SiStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SiStep::Proximal => "proximal",
            SiStep::Gradient => "gradient",
        })
    }
}

impl FromStr for SiStep {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "proximal" => Ok(SiStep::Proximal),
            "gradient" => Ok(SiStep::Gradient),
            other => Err(format!("unknown SI step {other:?} (proximal, gradient)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SIState {
    pub gamma: f64,
    pub xi: f64,
    #[serde(default)]
    pub step: SiStep,
    /// Global parameters at the start of the current task.
    pub task_start: Vec<f64>,
    pub cohorts: Vec<SiCohort>,
}

fn si_error(msg: String) -> FederationError {
    FederationError::Si(msg)
}

impl SIState {
    pub fn new(num_cohorts: usize, initial: &ParamVector, gamma: f64, xi: f64) -> Result<Self> {
        if !(gamma >= 0.0 && gamma.is_finite()) || !(xi > 0.0 && xi.is_finite()) {
            return Err(FederationError::InvalidConfig(format!(
                "SI needs gamma >= 0 and xi > 0, got gamma {gamma}, xi {xi}"
            )));
        }
        Ok(Self {
            gamma,
            xi,
            step: SiStep::default(),
            task_start: initial.values().to_vec(),
            cohorts: vec![
                SiCohort {
                    importance: vec![0.0; initial.len()],
                    anchor: None,
                    path_delta: None,
                    omega: None,
                };
                num_cohorts
            ],
        })
    }

    fn cohort(&self, c: usize) -> Result<&SiCohort> {
        self.cohorts.get(c).ok_or_else(|| si_error(format!("unknown cohort {c}")))
    }

    /// `w += cohort_delta * global_change` per coordinate.
    pub fn si_accumulate(&mut self, c: usize, cohort_delta: &[f64], global_change: &[f64]) -> Result<()> {
        if self.cohort(c)?.is_consolidated() {
            return Err(si_error(format!("cohort {c} is already consolidated")));
        }
        let w = &mut self.cohorts[c].importance;
        if cohort_delta.len() != w.len() || global_change.len() != w.len() {
            return Err(si_error("importance update has the wrong length".into()));
        }
        for ((w, d), g) in w.iter_mut().zip(cohort_delta).zip(global_change) {
            *w += d * g;
        }
        Ok(())
    }

    /// Freezes the cohort's importance into `Omega = max(w, 0) / (Delta^2 + xi)`
    /// with `Delta` the change since the task started, and starts the next
    /// task at `final_params`.
    pub fn si_consolidate(&mut self, c: usize, final_params: &ParamVector) -> Result<()> {
        if self.cohort(c)?.is_consolidated() {
            return Err(si_error(format!("cohort {c} is already consolidated")));
        }
        let anchor = final_params.values().to_vec();
        if anchor.len() != self.task_start.len() {
            return Err(si_error("anchor has the wrong length".into()));
        }
        let path: Vec<f64> = anchor.iter().zip(&self.task_start).map(|(a, s)| a - s).collect();
        let xi = self.xi;
        let entry = &mut self.cohorts[c];
        let omega = entry
            .importance
            .iter()
            .zip(&path)
            .map(|(&w, &d)| w.max(0.0) / (d * d + xi))
            .collect();
        entry.omega = Some(omega);
        entry.path_delta = Some(path);
        entry.anchor = Some(anchor.clone());
        self.task_start = anchor;
        Ok(())
    }

    fn consolidated(&self, cohorts: &[usize]) -> Result<Vec<(&[f64], &[f64])>> {
        cohorts
            .iter()
            .map(|&c| {
                let e = self.cohort(c)?;
                match (&e.omega, &e.anchor) {
                    (Some(o), Some(a)) => Ok((o.as_slice(), a.as_slice())),
                    _ => Err(si_error(format!("cohort {c} is not consolidated"))),
                }
            })
            .collect()
    }

    /// `sum_u sum_l Omega_l^u (anchor_l^u - theta_l)^2` over `cohorts`.
    pub fn si_loss(&self, cohorts: &[usize], params: &ParamVector) -> Result<f64> {
        let mut total = 0.0;
        for (omega, anchor) in self.consolidated(cohorts)? {
            for ((o, a), p) in omega.iter().zip(anchor).zip(params.values()) {
                total += o * (a - p) * (a - p);
            }
        }
        Ok(total)
    }

    /// Closed-form minimizer of `1/2 |theta - y|^2 + gamma * si_loss(theta)`:
    /// `(y + 2 gamma sum_u Omega^u anchor^u) / (1 + 2 gamma sum_u Omega^u)`.
    pub fn si_proximal(&self, cohorts: &[usize], y: &ParamVector) -> Result<ParamVector> {
        let mut num = y.values().to_vec();
        let mut den = vec![1.0; y.len()];
        let two_gamma = 2.0 * self.gamma;
        for (omega, anchor) in self.consolidated(cohorts)? {
            for (((n, d), o), a) in num.iter_mut().zip(den.iter_mut()).zip(omega).zip(anchor) {
                *n += two_gamma * o * a;
                *d += two_gamma * o;
            }
        }
        let mut out = y.clone();
        for ((v, n), d) in out.values_mut().iter_mut().zip(&num).zip(&den) {
            *v = n / d;
        }
        Ok(out)
    }

    /// Gradient of [`si_loss`](Self::si_loss) with respect to `params`.
    pub fn si_gradient(&self, cohorts: &[usize], params: &ParamVector) -> Result<Gradient> {
        let mut grad = Gradient::zeros(params.len());
        for (omega, anchor) in self.consolidated(cohorts)? {
            for (((g, o), a), p) in grad.values.iter_mut().zip(omega).zip(anchor).zip(params.values()) {
                *g -= 2.0 * o * (a - p);
            }
        }
        Ok(grad)
    }
}

/// Synaptic-intelligence server round. Active cohorts' deltas are averaged
/// over the `C - j` cohorts still active, and the parameters are pulled
/// toward the anchors of the exhausted cohorts (see [`SiStep`]).
/// A cohort exhausted this round is consolidated at the current parameters.
/// Only deltas already released by cohort rounds feed the importance sums.
pub fn dp_si_server_round(
    state: &mut FederationState,
    si: &mut SIState,
    mechanism: &Mechanism,
    client: &ClientConfig,
    eval: &EvalPlan,
) -> Result<()> {
    let started = Instant::now();
    let num_cohorts = state.cohorts.len();
    if si.cohorts.len() != num_cohorts {
        return Err(si_error(format!("SI state has {} cohorts, expected {num_cohorts}", si.cohorts.len())));
    }
    let mut deltas = Vec::with_capacity(num_cohorts);
    for c in 0..num_cohorts {
        deltas.push(state.cohort_delta(c, mechanism, client)?);
    }
    for c in 0..num_cohorts {
        if state.cohorts[c].is_exhausted() && !si.cohorts[c].is_consolidated() {
            si.si_consolidate(c, &state.global_params)?;
        }
    }
    let exhausted: Vec<usize> = (0..num_cohorts).filter(|&c| state.cohorts[c].is_exhausted()).collect();
    let active = num_cohorts - exhausted.len();
    let update = if active == 0 {
        None
    } else {
        let mut update = federation::average(&deltas, active, &state.global_params)?;
        if si.gamma != 0.0 && !exhausted.is_empty() {
            match si.step {
                SiStep::Gradient => {
                    let grad = si.si_gradient(&exhausted, &state.global_params)?;
                    update.add_scaled_in_place(&grad.values, -si.gamma)?;
                }
                SiStep::Proximal => {
                    let mut y = state.global_params.clone();
                    y.add_scaled_in_place(update.values(), 1.0)?;
                    update = si.si_proximal(&exhausted, &y)?.difference(&state.global_params)?;
                }
            }
        }
        Some(update)
    };
    let before = state.global_params.clone();
    state.finish_round(update.as_ref(), eval, started)?;
    let change = state.global_params.difference(&before)?;
    for (c, d) in deltas.iter().enumerate() {
        if d.participated && !si.cohorts[c].is_consolidated() {
            si.si_accumulate(c, d.delta.values(), change.values())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerShapes;

    fn vector(values: Vec<f64>) -> ParamVector {
        let shapes = LayerShapes::new(vec![values.len() - 1, 1]).unwrap();
        ParamVector::from_values(&shapes, values).unwrap()
    }

    #[test]
    fn zero_rho_is_dense_only() {
        let s = RehearsalSchedule::new(&[0.0], &[12], 30).unwrap();
        for t in 0..30 {
            assert_eq!(s.rehearsal_should_run(0, t).unwrap(), t < 12);
        }
        assert!(s.is_spent(0, 12).unwrap());
        assert!(!s.is_spent(0, 11).unwrap());
    }

    #[test]
    fn quarter_rho_schedule() {
        let s = RehearsalSchedule::new(&[0.25], &[40], 100).unwrap();
        assert_eq!(s.cohorts[0].dense_end, 30);
        assert_eq!(s.cohorts[0].interval, 7);
        let rounds = s.planned_rounds(0).unwrap();
        assert_eq!(rounds.len(), 40);
        assert_eq!(&rounds[..30], &(0..30).collect::<Vec<_>>()[..]);
        assert_eq!(&rounds[30..], &[30, 37, 44, 51, 58, 65, 72, 79, 86, 93]);
    }

    #[test]
    fn schedule_errors() {
        let s = RehearsalSchedule::new(&[0.25], &[40], 100).unwrap();
        assert!(s.rehearsal_should_run(1, 0).is_err());
        assert!(RehearsalSchedule::new(&[1.0], &[40], 100).is_err());
        assert!(RehearsalSchedule::new(&[0.1, 0.2], &[40], 100).is_err());
    }

    #[test]
    fn proximal_step_closed_form() {
        let start = vector(vec![0.0, 0.0]);
        let mut si = SIState::new(1, &start, 0.5, 0.1).unwrap();
        si.cohorts[0].importance = vec![1.1, 0.0];
        si.si_consolidate(0, &vector(vec![1.0, 1.0])).unwrap();
        // Omega = (1.1 / 1.1, 0), so the first coordinate solves
        // (theta - 3) + 2 * 0.5 * 1 * (theta - 1) = 0.
        let out = si.si_proximal(&[0], &vector(vec![3.0, 3.0])).unwrap();
        assert!((out.values()[0] - 2.0).abs() < 1e-15);
        assert_eq!(out.values()[1], 3.0);
        si.gamma = 0.0;
        assert_eq!(si.si_proximal(&[0], &vector(vec![3.0, -7.25])).unwrap().values(), &[3.0, -7.25]);
    }

    #[test]
    fn si_step_names() {
        assert_eq!("proximal".parse::<SiStep>().unwrap(), SiStep::Proximal);
        assert_eq!("Gradient".parse::<SiStep>().unwrap(), SiStep::Gradient);
        assert!("newton".parse::<SiStep>().is_err());
        assert_eq!(SiStep::default().to_string(), "proximal");
    }

    #[test]
    fn accumulate_examples() {
        let p = vector(vec![0.0, 0.0]);
        let mut si = SIState::new(1, &p, 1.0, 0.1).unwrap();
        si.si_accumulate(0, &[1.0, -1.0], &[0.5, 0.5]).unwrap();
        assert_eq!(si.cohorts[0].importance, vec![0.5, -0.5]);
        si.si_accumulate(0, &[1.0, -1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(si.cohorts[0].importance, vec![0.5, -0.5]);
        si.si_accumulate(0, &[1.0, -1.0], &[0.5, 0.5]).unwrap();
        assert_eq!(si.cohorts[0].importance, vec![1.0, -1.0]);
    }

    #[test]
    fn consolidation_examples() {
        let start = vector(vec![0.0, 0.0, 0.0]);
        let mut si = SIState::new(1, &start, 1.0, 0.1).unwrap();
        si.cohorts[0].importance = vec![0.5, 0.0, 0.3];
        si.si_consolidate(0, &vector(vec![1.0, 2.0, 0.0])).unwrap();
        let omega = si.cohorts[0].omega.as_ref().unwrap();
        assert!((omega[0] - 0.5 / 1.1).abs() < 1e-15);
        assert_eq!(omega[1], 0.0);
        assert!((omega[2] - 3.0).abs() < 1e-12);
        assert!(si.si_consolidate(0, &start).is_err());
        assert!(si.si_accumulate(0, &[0.0; 3], &[0.0; 3]).is_err());
        assert_eq!(si.task_start, vec![1.0, 2.0, 0.0]);
    }

    #[test]
    fn loss_and_gradient_examples() {
        let start = vector(vec![0.0, 0.0]);
        let mut si = SIState::new(2, &start, 1.0, 0.1).unwrap();
        si.cohorts[0].omega = Some(vec![2.0, 1.0]);
        si.cohorts[0].anchor = Some(vec![1.0, 1.0]);
        si.cohorts[1].omega = Some(vec![1.0, 0.0]);
        si.cohorts[1].anchor = Some(vec![3.0, 0.0]);
        let theta = vector(vec![0.0, 0.0]);
        assert_eq!(si.si_loss(&[0], &theta).unwrap(), 3.0);
        assert_eq!(si.si_loss(&[0, 1], &theta).unwrap(), 3.0 + 9.0);
        assert_eq!(si.si_gradient(&[0], &theta).unwrap().values, vec![-4.0, -2.0]);
        assert_eq!(si.si_loss(&[0], &vector(vec![1.0, 1.0])).unwrap(), 0.0);
        assert!(si.si_gradient(&[0], &vector(vec![1.0, 1.0])).unwrap().values.iter().all(|&g| g == 0.0));
        let fresh = SIState::new(1, &start, 1.0, 0.1).unwrap();
        assert!(fresh.si_loss(&[0], &theta).is_err());
    }
}
