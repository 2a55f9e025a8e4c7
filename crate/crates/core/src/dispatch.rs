//! Scripted dispatch baselines: exact backward-induction DP over the SoC
//! grid, the greedy price-threshold heuristic, and policy simulation.
//!
//! The DP benchmark models the no-intervention problem only; blackout days
//! are handled at the simulation layer by coercing scripted baselines to
//! Hold (they are blackout-unaware by construction).

use crate::battery::{
    self, BatteryConfig, DayState, DispatchAction, Intervention, PriceModel, TrajectoryDay,
};
use crate::money::{energy_revenue, Energy, Money};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DispatchError {
    #[error("invalid SoC grid: {0}")]
    InvalidGrid(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
}

fn cents(m: Money) -> BigRational {
    BigRational::from_integer(BigInt::from(m.cents()))
}

/// Optimal expected value per (day, SoC grid point), in exact rational cents.
///
/// `values[t-1][s]` is the value of holding grid state `s` at the start of
/// day `t`; row `T+1` is the all-zero terminal row (leftover energy is not
/// compensated).
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub config: BatteryConfig,
    pub values: Vec<Vec<BigRational>>,
}

impl ValueTable {
    pub fn value(&self, day: u32, soc: Energy) -> Result<&BigRational, DispatchError> {
        let t = day as usize;
        if t < 1 || t > self.values.len() {
            return Err(DispatchError::OutOfRange(format!("day {day}")));
        }
        let idx = self
            .config
            .grid_index(soc)
            .ok_or_else(|| DispatchError::OutOfRange(format!("soc {soc}")))?;
        Ok(&self.values[t - 1][idx])
    }

    pub fn value_cents_f64(&self, day: u32, soc: Energy) -> Result<f64, DispatchError> {
        Ok(self.value(day, soc)?.to_f64().unwrap())
    }

    /// JSON export: grid spec plus row-major values in fractional cents.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "config": self.config,
            "grid_kwh": self.config.soc_grid().iter().map(|e| e.as_kwh()).collect::<Vec<_>>(),
            "values_cents": self.values.iter()
                .map(|row| row.iter().map(|v| v.to_f64().unwrap()).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
            "values_exact": self.values.iter()
                .map(|row| row.iter().map(|v| v.to_string()).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
        })
    }
}

/// Arg-max action per (day, SoC grid point, price level).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    pub config: BatteryConfig,
    pub levels: Vec<Money>,
    pub actions: Vec<Vec<Vec<DispatchAction>>>,
}

impl PolicyTable {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap()
    }
}

/// Feasible moves at a grid index, in tie-break preference order:
/// Hold, then Discharge, then Charge.
fn candidate_actions(idx: usize, top: usize) -> Vec<DispatchAction> {
    let mut out = vec![DispatchAction::Hold];
    if idx > 0 {
        out.push(DispatchAction::Discharge);
    }
    if idx < top {
        out.push(DispatchAction::Charge);
    }
    out
}

/// Backward induction over days T..1 on the SoC grid.
///
/// Q_t(s, price) = max over feasible moves of price*u + V[t+1][s-u];
/// V[t][s] = sum_i prob_i * Q_t(s, level_i). Probabilities are converted
/// from their exact binary float values, so the expectation is exact.
pub fn solve_dp(
    config: &BatteryConfig,
    model: &PriceModel,
) -> Result<(ValueTable, PolicyTable), DispatchError> {
    config
        .validate()
        .map_err(|e| DispatchError::InvalidGrid(e.to_string()))?;
    let grid = config.soc_grid();
    let top = grid.len() - 1;
    let horizon = config.horizon_days as usize;

    let probs: Vec<BigRational> = model
        .probabilities
        .iter()
        .map(|p| BigRational::from_float(*p).expect("finite probability"))
        .collect();

    let mut values = vec![vec![BigRational::zero(); grid.len()]; horizon + 1];
    let mut actions =
        vec![vec![vec![DispatchAction::Hold; model.levels.len()]; grid.len()]; horizon];

    for t in (0..horizon).rev() {
        for idx in 0..grid.len() {
            let mut expected = BigRational::zero();
            for (li, level) in model.levels.iter().enumerate() {
                let mut best: Option<(BigRational, DispatchAction)> = None;
                for action in candidate_actions(idx, top) {
                    let (next_idx, reward) = match action {
                        DispatchAction::Hold => (idx, Money::ZERO),
                        DispatchAction::Discharge => (idx - 1, energy_revenue(*level, config.step)),
                        DispatchAction::Charge => (idx + 1, -energy_revenue(*level, config.step)),
                        DispatchAction::ServeLoad => unreachable!(),
                    };
                    let q = cents(reward) + &values[t + 1][next_idx];
                    // strict improvement keeps the earlier (preferred) action on ties
                    if best.as_ref().map_or(true, |(bq, _)| q > *bq) {
                        best = Some((q, action));
                    }
                }
                let (q, action) = best.unwrap();
                actions[t][idx][li] = action;
                expected += &probs[li] * q;
            }
            values[t][idx] = expected;
        }
    }

    Ok((
        ValueTable {
            config: config.clone(),
            values,
        },
        PolicyTable {
            config: config.clone(),
            levels: model.levels.clone(),
            actions,
        },
    ))
}

/// Look up the stored arg-max action.
pub fn dp_action(
    policy: &PolicyTable,
    day: u32,
    soc: Energy,
    price: Money,
) -> Result<DispatchAction, DispatchError> {
    let t = day as usize;
    if t < 1 || t > policy.actions.len() {
        return Err(DispatchError::OutOfRange(format!("day {day}")));
    }
    let idx = policy
        .config
        .grid_index(soc)
        .ok_or_else(|| DispatchError::OutOfRange(format!("soc {soc}")))?;
    let li = policy
        .levels
        .iter()
        .position(|l| *l == price)
        .ok_or_else(|| DispatchError::OutOfRange(format!("price {price}")))?;
    Ok(policy.actions[t - 1][idx][li])
}

/// Charge at the lowest price level, discharge at the highest, otherwise
/// hold. Infeasible desired moves degrade to Hold; a single-level model is
/// simultaneously min and max and resolves to Hold.
pub fn greedy_action(
    price: Money,
    soc: Energy,
    config: &BatteryConfig,
    model: &PriceModel,
) -> DispatchAction {
    let min = model.min_level();
    let max = model.max_level();
    if min == max {
        return DispatchAction::Hold;
    }
    if price == min && soc.wh() <= config.capacity.wh() - config.step.wh() {
        return DispatchAction::Charge;
    }
    if price == max && soc.wh() >= config.floor.wh() + config.step.wh() {
        return DispatchAction::Discharge;
    }
    DispatchAction::Hold
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub days: Vec<TrajectoryDay>,
    pub total_reward: Money,
}

/// Run a policy against a seeded price path.
///
/// On blackout days scripted baselines are coerced to Hold; any infeasible
/// action from the policy likewise degrades to Hold with a logged warning.
pub fn simulate_policy<F>(
    mut policy_fn: F,
    config: &BatteryConfig,
    model: &PriceModel,
    intervention: &Intervention,
    seed: u64,
) -> Simulation
where
    F: FnMut(&DayState) -> DispatchAction,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut soc = config.initial_soc;
    let mut days = Vec::with_capacity(config.horizon_days as usize);
    let mut total = Money::ZERO;
    for day in 1..=config.horizon_days {
        let price = battery::sample_price(model, &mut rng);
        let state = DayState {
            day,
            price,
            soc,
            blackout: intervention.is_blackout(day),
        };
        let mut action = policy_fn(&state);
        if !battery::is_feasible(&state, action, config) {
            log::warn!("coercing infeasible {action:?} to Hold on day {day}");
            action = DispatchAction::Hold;
        }
        let (next_soc, reward) = battery::step(&state, action, config).expect("Hold is feasible");
        total += reward;
        days.push(TrajectoryDay {
            day,
            price,
            soc_before: soc,
            action,
            reward,
            soc_after: next_soc,
            blackout: state.blackout,
        });
        soc = next_soc;
    }
    total += battery::terminal_settlement(soc);
    Simulation {
        days,
        total_reward: total,
    }
}
