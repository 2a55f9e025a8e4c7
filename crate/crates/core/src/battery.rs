//! Deterministic battery dispatch environment: SoC transitions, reward
//! accounting, stochastic price sampling, and blackout interventions.
//!
//! Actions move the battery by one fixed step per day. On a blackout day
//! there are no grid transactions: only `Hold` and `ServeLoad` are legal,
//! and `ServeLoad` empties the battery to the floor with zero reward.

use crate::money::{energy_revenue, Energy, Money};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BatteryError {
    #[error("invalid price model: {0}")]
    InvalidPriceModel(String),
    #[error("invalid battery config: {0}")]
    InvalidConfig(String),
    #[error("infeasible action {action:?} at soc {soc} (day {day}, blackout={blackout})")]
    InfeasibleAction {
        action: DispatchAction,
        soc: Energy,
        day: u32,
        blackout: bool,
    },
}

/// Distribution of the daily electricity price.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceModel {
    pub levels: Vec<Money>,
    pub probabilities: Vec<f64>,
}

impl PriceModel {
    pub fn new(levels: Vec<Money>, probabilities: Vec<f64>) -> Result<Self, BatteryError> {
        if levels.is_empty() {
            return Err(BatteryError::InvalidPriceModel("no price levels".into()));
        }
        if levels.len() != probabilities.len() {
            return Err(BatteryError::InvalidPriceModel(
                "levels and probabilities differ in length".into(),
            ));
        }
        if levels.iter().any(|l| l.cents() <= 0) {
            return Err(BatteryError::InvalidPriceModel(
                "price levels must be strictly positive".into(),
            ));
        }
        if probabilities.iter().any(|p| *p < 0.0 || *p > 1.0) {
            return Err(BatteryError::InvalidPriceModel(
                "probabilities must lie in [0, 1]".into(),
            ));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(BatteryError::InvalidPriceModel(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(PriceModel {
            levels,
            probabilities,
        })
    }

    /// $10/kWh or $5/kWh at 50/50.
    pub fn default_two_level() -> Self {
        PriceModel::new(vec![Money(1000), Money(500)], vec![0.5, 0.5]).unwrap()
    }

    pub fn min_level(&self) -> Money {
        *self.levels.iter().min().unwrap()
    }

    pub fn max_level(&self) -> Money {
        *self.levels.iter().max().unwrap()
    }

    pub fn level_index(&self, price: Money) -> Option<usize> {
        self.levels.iter().position(|l| *l == price)
    }
}

/// Draw one price from the model.
pub fn sample_price<R: Rng>(model: &PriceModel, rng: &mut R) -> Money {
    let x: f64 = rng.gen();
    let mut acc = 0.0;
    for (level, p) in model.levels.iter().zip(&model.probabilities) {
        acc += p;
        if x < acc {
            return *level;
        }
    }
    *model.levels.last().unwrap()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryConfig {
    pub capacity: Energy,
    #[serde(default)]
    pub floor: Energy,
    pub step: Energy,
    pub horizon_days: u32,
    pub initial_soc: Energy,
}

impl BatteryConfig {
    /// 10 kWh cap, 1 kWh steps, 20 days, start at the 5 kWh midpoint.
    pub fn default_home() -> Self {
        BatteryConfig {
            capacity: Energy::from_kwh(10.0),
            floor: Energy::ZERO,
            step: Energy::from_kwh(1.0),
            horizon_days: 20,
            initial_soc: Energy::from_kwh(5.0),
        }
    }

    pub fn validate(&self) -> Result<(), BatteryError> {
        if self.step.wh() <= 0 {
            return Err(BatteryError::InvalidConfig("step must be positive".into()));
        }
        if self.horizon_days < 1 {
            return Err(BatteryError::InvalidConfig("horizon must be >= 1".into()));
        }
        if self.floor > self.initial_soc || self.initial_soc > self.capacity {
            return Err(BatteryError::InvalidConfig(
                "require floor <= initial_soc <= capacity".into(),
            ));
        }
        if (self.capacity.wh() - self.floor.wh()) % self.step.wh() != 0 {
            return Err(BatteryError::InvalidConfig(
                "capacity - floor must be a multiple of step".into(),
            ));
        }
        Ok(())
    }

    /// SoC grid {floor, floor+step, ..., capacity}.
    pub fn soc_grid(&self) -> Vec<Energy> {
        let n = (self.capacity.wh() - self.floor.wh()) / self.step.wh();
        (0..=n)
            .map(|i| Energy(self.floor.wh() + i * self.step.wh()))
            .collect()
    }

    pub fn grid_index(&self, soc: Energy) -> Option<usize> {
        let off = soc.wh() - self.floor.wh();
        if off < 0 || soc > self.capacity || off % self.step.wh() != 0 {
            return None;
        }
        Some((off / self.step.wh()) as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DispatchAction {
    Charge,
    Discharge,
    Hold,
    /// Full discharge to household demand; legal only on blackout days.
    ServeLoad,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DayState {
    pub day: u32,
    pub price: Money,
    pub soc: Energy,
    pub blackout: bool,
}

/// Blackout schedule; default is a single blackout on day 10.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub blackout_days: BTreeSet<u32>,
}

impl Intervention {
    pub fn none() -> Self {
        Intervention {
            blackout_days: BTreeSet::new(),
        }
    }

    pub fn day_ten() -> Self {
        Intervention {
            blackout_days: [10].into_iter().collect(),
        }
    }

    pub fn is_blackout(&self, day: u32) -> bool {
        self.blackout_days.contains(&day)
    }

    pub fn validate(&self, horizon_days: u32) -> Result<(), BatteryError> {
        for d in &self.blackout_days {
            if *d < 1 || *d > horizon_days {
                return Err(BatteryError::InvalidConfig(format!(
                    "blackout day {d} outside horizon 1..={horizon_days}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for Intervention {
    fn default() -> Self {
        Intervention::day_ten()
    }
}

/// Apply one action. Returns (next soc, reward).
///
/// Non-blackout: Discharge sells one step at the day's price, Charge buys one
/// step, Hold does nothing. Blackout: only Hold / ServeLoad; no grid
/// transactions, so both earn zero.
pub fn step(
    state: &DayState,
    action: DispatchAction,
    config: &BatteryConfig,
) -> Result<(Energy, Money), BatteryError> {
    let infeasible = || BatteryError::InfeasibleAction {
        action,
        soc: state.soc,
        day: state.day,
        blackout: state.blackout,
    };
    if state.blackout {
        return match action {
            DispatchAction::Hold => Ok((state.soc, Money::ZERO)),
            DispatchAction::ServeLoad => Ok((config.floor, Money::ZERO)),
            DispatchAction::Charge | DispatchAction::Discharge => Err(infeasible()),
        };
    }
    match action {
        DispatchAction::Hold => Ok((state.soc, Money::ZERO)),
        DispatchAction::Discharge => {
            if state.soc.wh() < config.floor.wh() + config.step.wh() {
                return Err(infeasible());
            }
            let revenue = energy_revenue(state.price, config.step);
            Ok((state.soc - config.step, revenue))
        }
        DispatchAction::Charge => {
            if state.soc.wh() > config.capacity.wh() - config.step.wh() {
                return Err(infeasible());
            }
            let cost = energy_revenue(state.price, config.step);
            Ok((state.soc + config.step, -cost))
        }
        DispatchAction::ServeLoad => Err(infeasible()),
    }
}

/// Whether `action` passes the feasibility rules of `step` at `state`.
pub fn is_feasible(state: &DayState, action: DispatchAction, config: &BatteryConfig) -> bool {
    step(state, action, config).is_ok()
}

/// Leftover energy is never compensated.
pub fn terminal_settlement(_final_soc: Energy) -> Money {
    Money::ZERO
}

/// One day of a simulated trajectory (JSON-lines record).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDay {
    pub day: u32,
    pub price: Money,
    pub soc_before: Energy,
    pub action: DispatchAction,
    pub reward: Money,
    pub soc_after: Energy,
    pub blackout: bool,
}

/// Scenario configuration file schema (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub price_model: PriceModel,
    pub battery: BatteryConfig,
    #[serde(default)]
    pub intervention: Intervention,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), BatteryError> {
        PriceModel::new(self.price_model.levels.clone(), self.price_model.probabilities.clone())?;
        self.battery.validate()?;
        self.intervention.validate(self.battery.horizon_days)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(day: u32, price: i64, soc_kwh: f64, blackout: bool) -> DayState {
        DayState {
            day,
            price: Money(price),
            soc: Energy::from_kwh(soc_kwh),
            blackout,
        }
    }

    #[test]
    fn sample_frequency_matches_probabilities() {
        let model = PriceModel::default_two_level();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let tens = (0..n)
            .filter(|_| sample_price(&model, &mut rng) == Money(1000))
            .count();
        let freq = tens as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.01, "freq {freq}");
    }

    #[test]
    fn sample_degenerate_distribution() {
        let model = PriceModel::new(vec![Money(700)], vec![1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_price(&model, &mut rng), Money(700));
        }
    }

    #[test]
    fn sample_is_seed_deterministic() {
        let model = PriceModel::default_two_level();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_price(&model, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
    }

    #[test]
    fn discharge_sells_one_step() {
        let config = BatteryConfig::default_home();
        let s = state(3, 1000, 5.0, false);
        let (soc, reward) = step(&s, DispatchAction::Discharge, &config).unwrap();
        assert_eq!(soc, Energy::from_kwh(4.0));
        assert_eq!(reward, Money(1000));
    }

    #[test]
    fn charge_at_capacity_is_infeasible() {
        let config = BatteryConfig::default_home();
        let s = state(3, 1000, 10.0, false);
        assert!(matches!(
            step(&s, DispatchAction::Charge, &config),
            Err(BatteryError::InfeasibleAction { .. })
        ));
    }

    #[test]
    fn serve_load_empties_battery_for_free() {
        let config = BatteryConfig::default_home();
        let s = state(10, 1000, 7.0, true);
        let (soc, reward) = step(&s, DispatchAction::ServeLoad, &config).unwrap();
        assert_eq!(soc, Energy::ZERO);
        assert_eq!(reward, Money::ZERO);
    }

    #[test]
    fn blackout_forbids_grid_transactions() {
        let config = BatteryConfig::default_home();
        let s = state(10, 1000, 5.0, true);
        assert!(step(&s, DispatchAction::Charge, &config).is_err());
        assert!(step(&s, DispatchAction::Discharge, &config).is_err());
        assert_eq!(
            step(&s, DispatchAction::Hold, &config).unwrap(),
            (Energy::from_kwh(5.0), Money::ZERO)
        );
    }

    #[test]
    fn serve_load_off_blackout_is_infeasible() {
        let config = BatteryConfig::default_home();
        let s = state(3, 1000, 5.0, false);
        assert!(step(&s, DispatchAction::ServeLoad, &config).is_err());
    }

    #[test]
    fn terminal_settlement_is_always_zero() {
        assert_eq!(terminal_settlement(Energy::ZERO), Money::ZERO);
        assert_eq!(terminal_settlement(Energy::from_kwh(10.0)), Money::ZERO);
        assert_eq!(terminal_settlement(Energy::from_kwh(3.0)), Money::ZERO);
    }

    #[test]
    fn price_model_rejects_bad_inputs() {
        assert!(PriceModel::new(vec![], vec![]).is_err());
        assert!(PriceModel::new(vec![Money(0)], vec![1.0]).is_err());
        assert!(PriceModel::new(vec![Money(100)], vec![0.5]).is_err());
        assert!(PriceModel::new(vec![Money(100), Money(200)], vec![0.5]).is_err());
    }

    #[test]
    fn config_rejects_misaligned_grid() {
        let mut config = BatteryConfig::default_home();
        config.capacity = Energy(10_500);
        assert!(config.validate().is_err());
    }
}
