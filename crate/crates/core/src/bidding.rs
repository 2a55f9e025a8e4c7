//! Straightforward bidding: each round, demand the surplus-maximizing
//! bundle at the current minimum bidding prices and bid exactly those
//! minimums on items not already held. A grid brute-force over bid vectors
//! serves as the equivalence oracle for the minimum-bid property.

use crate::auction::{AgentDecision, Bid, BidderView, BiddingAgent};
use crate::money::Money;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BiddingError {
    #[error("unknown item: {0}")]
    UnknownItem(String),
    #[error("too many items for exhaustive bundle search: {0} > 20")]
    TooManyItems(usize),
    #[error("instance too large for brute force: {0}")]
    InstanceTooLarge(String),
}

/// Per-item valuations with optional explicit bundle overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValuationProfile {
    pub item_values: BTreeMap<String, Money>,
    #[serde(default)]
    pub bundles: Vec<BundleValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleValue {
    pub items: Vec<String>,
    pub value: Money,
}

impl ValuationProfile {
    pub fn additive(values: impl IntoIterator<Item = (String, Money)>) -> Self {
        ValuationProfile {
            item_values: values.into_iter().collect(),
            bundles: Vec::new(),
        }
    }

    fn override_for(&self, subset: &BTreeSet<String>) -> Option<Money> {
        self.bundles
            .iter()
            .find(|b| b.items.iter().cloned().collect::<BTreeSet<_>>() == *subset)
            .map(|b| b.value)
    }

    pub fn validate(&self) -> Result<(), BiddingError> {
        for bundle in &self.bundles {
            if bundle.items.len() < 2 {
                return Err(BiddingError::UnknownItem(
                    "bundle overrides need at least two items".into(),
                ));
            }
            for item in &bundle.items {
                if !self.item_values.contains_key(item) {
                    return Err(BiddingError::UnknownItem(item.clone()));
                }
            }
        }
        Ok(())
    }
}

/// Bundle value: the explicit override when one exists, otherwise the sum of
/// item values. The empty bundle is worth zero.
pub fn bundle_value(
    profile: &ValuationProfile,
    subset: &BTreeSet<String>,
) -> Result<Money, BiddingError> {
    for item in subset {
        if !profile.item_values.contains_key(item) {
            return Err(BiddingError::UnknownItem(item.clone()));
        }
    }
    if let Some(v) = profile.override_for(subset) {
        return Ok(v);
    }
    Ok(subset.iter().map(|i| profile.item_values[i]).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChosenBundle {
    pub items: BTreeSet<String>,
    pub expected_surplus: Money,
}

fn subset_from_mask(names: &[String], mask: u32) -> BTreeSet<String> {
    names
        .iter()
        .enumerate()
        .filter(|(i, _)| mask & (1 << i) != 0)
        .map(|(_, n)| n.clone())
        .collect()
}

/// Exhaustive surplus maximization over all subsets at the view's minimum
/// bidding prices. Ties prefer the larger bundle, then lexicographically
/// smaller item list; the empty bundle is always a candidate, so the result
/// never has negative surplus.
pub fn straightforward_bundle(
    profile: &ValuationProfile,
    view: &BidderView,
) -> Result<ChosenBundle, BiddingError> {
    let names: Vec<String> = view.items.iter().map(|i| i.name.clone()).collect();
    if names.len() > 20 {
        return Err(BiddingError::TooManyItems(names.len()));
    }
    let mut best: Option<ChosenBundle> = None;
    for mask in 0..(1u32 << names.len()) {
        let subset = subset_from_mask(&names, mask);
        let value = bundle_value(profile, &subset)?;
        let cost: Money = subset
            .iter()
            .map(|n| view.item(n).expect("item from view").min_bid)
            .sum();
        let surplus = value - cost;
        let candidate = ChosenBundle {
            items: subset,
            expected_surplus: surplus,
        };
        let better = match &best {
            None => true,
            Some(b) => {
                surplus > b.expected_surplus
                    || (surplus == b.expected_surplus
                        && (candidate.items.len() > b.items.len()
                            || (candidate.items.len() == b.items.len()
                                && candidate.items < b.items)))
            }
        };
        if better {
            best = Some(candidate);
        }
    }
    Ok(best.expect("empty bundle is always a candidate"))
}

/// Bid exactly the minimum on every chosen item not already held.
pub fn straightforward_bids(bundle: &ChosenBundle, view: &BidderView) -> Vec<Bid> {
    bundle
        .items
        .iter()
        .filter_map(|name| {
            let item = view.item(name)?;
            if item.high_bidder.as_deref() == Some(view.bidder.as_str()) {
                None
            } else {
                Some(Bid {
                    bidder: view.bidder.clone(),
                    item: name.clone(),
                    amount: item.min_bid,
                })
            }
        })
        .collect()
}

/// Brute-force the unreduced problem: every subset and every grid bid vector
/// with min_bid <= b <= cap. Independent oracle for the claim that bidding
/// exactly the minimum is optimal.
pub fn optimal_bundle_brute(
    profile: &ValuationProfile,
    view: &BidderView,
    bid_grid_step: Money,
    bid_cap: Money,
) -> Result<(BTreeSet<String>, Vec<Bid>, Money), BiddingError> {
    let names: Vec<String> = view.items.iter().map(|i| i.name.clone()).collect();
    if names.len() > 3 {
        return Err(BiddingError::InstanceTooLarge(format!(
            "{} items",
            names.len()
        )));
    }
    if bid_grid_step.cents() <= 0 || bid_cap.cents() / bid_grid_step.cents() > 50 {
        return Err(BiddingError::InstanceTooLarge("bid grid too fine".into()));
    }

    let mut best: Option<(BTreeSet<String>, Vec<Bid>, Money)> = None;
    for mask in 0..(1u32 << names.len()) {
        let subset = subset_from_mask(&names, mask);
        let members: Vec<&String> = subset.iter().collect();
        // grid of feasible bid vectors over the subset
        let grids: Vec<Vec<Money>> = members
            .iter()
            .map(|n| {
                let min = view.item(n).expect("item from view").min_bid;
                let mut points = Vec::new();
                let mut b = min;
                while b <= bid_cap {
                    points.push(b);
                    b = b + bid_grid_step;
                }
                points
            })
            .collect();
        if grids.iter().any(|g| g.is_empty()) && !members.is_empty() {
            continue; // some minimum exceeds the cap
        }
        let mut index = vec![0usize; members.len()];
        loop {
            let bids: Vec<Bid> = members
                .iter()
                .zip(&index)
                .map(|(n, i)| Bid {
                    bidder: view.bidder.clone(),
                    item: (*n).clone(),
                    amount: grids[members.iter().position(|m| m == n).unwrap()][*i],
                })
                .collect();
            let value = bundle_value(profile, &subset)?;
            let paid: Money = bids.iter().map(|b| b.amount).sum();
            let surplus = value - paid;
            if best.as_ref().map_or(true, |(_, _, s)| surplus > *s) {
                best = Some((subset.clone(), bids, surplus));
            }
            // advance the mixed-radix counter
            let mut pos = 0;
            loop {
                if pos == members.len() {
                    break;
                }
                index[pos] += 1;
                if index[pos] < grids[pos].len() {
                    break;
                }
                index[pos] = 0;
                pos += 1;
            }
            if pos == members.len() {
                break;
            }
        }
    }
    Ok(best.expect("empty bundle always feasible"))
}

/// The straightforward bidder as a mechanism agent.
pub struct StraightforwardAgent {
    pub id: String,
    pub profile: ValuationProfile,
}

impl BiddingAgent for StraightforwardAgent {
    fn id(&self) -> &str {
        &self.id
    }

    fn decide(&mut self, view: &BidderView) -> Result<AgentDecision, String> {
        let bundle = straightforward_bundle(&self.profile, view).map_err(|e| e.to_string())?;
        Ok(AgentDecision {
            bids: straightforward_bids(&bundle, view),
            record: None,
        })
    }
}

/// Valuation file schema: bidder name -> profile. Table 1 of the bundled
/// example configuration uses this shape.
pub type ValuationFile = BTreeMap<String, ValuationProfile>;

/// The bundled two-bidder, two-item example valuations.
pub fn table1_valuations() -> ValuationFile {
    let mut out = BTreeMap::new();
    out.insert(
        "Bidder 1".to_string(),
        ValuationProfile {
            item_values: [
                ("Product A".to_string(), Money::from_units(4.0)),
                ("Product B".to_string(), Money::from_units(6.0)),
            ]
            .into_iter()
            .collect(),
            bundles: vec![BundleValue {
                items: vec!["Product A".into(), "Product B".into()],
                value: Money::from_units(10.0),
            }],
        },
    );
    out.insert(
        "Bidder 2".to_string(),
        ValuationProfile {
            item_values: [
                ("Product A".to_string(), Money::from_units(8.0)),
                ("Product B".to_string(), Money::from_units(4.0)),
            ]
            .into_iter()
            .collect(),
            bundles: vec![BundleValue {
                items: vec!["Product A".into(), "Product B".into()],
                value: Money::from_units(12.0),
            }],
        },
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auction::ItemView;

    fn view(bidder: &str, mins: &[(&str, i64)]) -> BidderView {
        BidderView {
            round: 1,
            bidder: bidder.to_string(),
            items: mins
                .iter()
                .map(|(name, min)| ItemView {
                    name: name.to_string(),
                    price: Money(*min - 100),
                    high_bidder: None,
                    increment: Money(100),
                    min_bid: Money(*min),
                })
                .collect(),
        }
    }

    fn set(names: &[&str]) -> BTreeSet<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn table1_bundle_values() {
        let vals = table1_valuations();
        let b1 = &vals["Bidder 1"];
        assert_eq!(bundle_value(b1, &set(&["Product A"])).unwrap(), Money(400));
        assert_eq!(bundle_value(b1, &set(&["Product B"])).unwrap(), Money(600));
        assert_eq!(
            bundle_value(b1, &set(&["Product A", "Product B"])).unwrap(),
            Money(1000)
        );
        let b2 = &vals["Bidder 2"];
        assert_eq!(
            bundle_value(b2, &set(&["Product A", "Product B"])).unwrap(),
            Money(1200)
        );
        assert_eq!(bundle_value(b1, &set(&[])).unwrap(), Money::ZERO);
        assert!(bundle_value(b1, &set(&["Product Z"])).is_err());
    }

    #[test]
    fn bidder1_demands_both_items_at_low_prices() {
        let vals = table1_valuations();
        let v = view("Bidder 1", &[("Product A", 100), ("Product B", 100)]);
        let bundle = straightforward_bundle(&vals["Bidder 1"], &v).unwrap();
        assert_eq!(bundle.items, set(&["Product A", "Product B"]));
        assert_eq!(bundle.expected_surplus, Money(800));
    }

    #[test]
    fn negative_surplus_items_drop_to_empty_bundle() {
        let vals = table1_valuations();
        let v = view("Bidder 1", &[("Product A", 500), ("Product B", 700)]);
        let bundle = straightforward_bundle(&vals["Bidder 1"], &v).unwrap();
        assert!(bundle.items.is_empty());
        assert_eq!(bundle.expected_surplus, Money::ZERO);
    }

    #[test]
    fn zero_surplus_tie_prefers_larger_bundle() {
        let vals = table1_valuations();
        let v = view("Bidder 1", &[("Product A", 400), ("Product B", 600)]);
        let bundle = straightforward_bundle(&vals["Bidder 1"], &v).unwrap();
        assert_eq!(bundle.items, set(&["Product A", "Product B"]));
        assert_eq!(bundle.expected_surplus, Money::ZERO);
    }

    #[test]
    fn bids_are_exact_minimums_and_skip_held_items() {
        let vals = table1_valuations();
        let mut v = view("Bidder 1", &[("Product A", 200), ("Product B", 200)]);
        let bundle = straightforward_bundle(&vals["Bidder 1"], &v).unwrap();
        let bids = straightforward_bids(&bundle, &v);
        assert_eq!(bids.len(), 2);
        assert!(bids.iter().all(|b| b.amount == Money(200)));

        v.items[0].high_bidder = Some("Bidder 1".into());
        v.items[0].min_bid = v.items[0].price;
        let bundle = straightforward_bundle(&vals["Bidder 1"], &v).unwrap();
        let bids = straightforward_bids(&bundle, &v);
        assert_eq!(bids.len(), 1);
        assert_eq!(bids[0].item, "Product B");

        let empty = ChosenBundle {
            items: BTreeSet::new(),
            expected_surplus: Money::ZERO,
        };
        assert!(straightforward_bids(&empty, &v).is_empty());
    }

    #[test]
    fn brute_force_single_item_cases() {
        let profile = ValuationProfile::additive([("k".to_string(), Money(400))]);
        let v = view("b", &[("k", 200)]);
        let (subset, bids, surplus) =
            optimal_bundle_brute(&profile, &v, Money(100), Money(1000)).unwrap();
        assert_eq!(subset, set(&["k"]));
        assert_eq!(bids[0].amount, Money(200));
        assert_eq!(surplus, Money(200));

        let profile = ValuationProfile::additive([("k".to_string(), Money(100))]);
        let v = view("b", &[("k", 200)]);
        let (subset, bids, surplus) =
            optimal_bundle_brute(&profile, &v, Money(100), Money(1000)).unwrap();
        assert!(subset.is_empty());
        assert!(bids.is_empty());
        assert_eq!(surplus, Money::ZERO);
    }

    #[test]
    fn brute_force_agrees_with_straightforward_on_table1() {
        let vals = table1_valuations();
        for (bidder, profile) in &vals {
            let v = view(bidder, &[("Product A", 100), ("Product B", 300)]);
            let bundle = straightforward_bundle(profile, &v).unwrap();
            let (_, _, brute_surplus) =
                optimal_bundle_brute(profile, &v, Money(100), Money(1500)).unwrap();
            assert_eq!(bundle.expected_surplus, brute_surplus);
        }
    }

    #[test]
    fn brute_force_rejects_large_instances() {
        let profile = ValuationProfile::additive(
            (0..4).map(|i| (format!("item{i}"), Money(100))),
        );
        let v = view("b", &[("item0", 1), ("item1", 1), ("item2", 1), ("item3", 1)]);
        assert!(matches!(
            optimal_bundle_brute(&profile, &v, Money(1), Money(10)),
            Err(BiddingError::InstanceTooLarge(_))
        ));
    }
}
