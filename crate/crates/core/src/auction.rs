//! Simultaneous ascending auction protocol state machine.
//!
//! Each round every bidder submits sealed bids. A challenger must offer at
//! least the standing high bid plus the item's increment; the incumbent may
//! rebid at the standing price. The highest accepted bid becomes the new
//! standing price, ties at the top are broken uniformly at random, and the
//! auction terminates in the first round where no price or high bidder
//! changes on any item.

use crate::agent::TarjRecord;
use crate::money::Money;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AuctionError {
    #[error("unknown item: {0}")]
    UnknownItem(String),
    #[error("unknown bidder: {0}")]
    UnknownBidder(String),
    #[error("duplicate bid from {bidder} on {item}")]
    DuplicateBid { bidder: String, item: String },
    #[error("states belong to different auctions or non-consecutive rounds")]
    MismatchedAuction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub name: String,
    pub start_price: Money,
    pub increment: Money,
}

impl Item {
    pub fn validate(&self) -> Result<(), AuctionError> {
        if self.increment.cents() <= 0 || self.start_price.cents() < 0 {
            return Err(AuctionError::UnknownItem(format!(
                "item {} has invalid prices",
                self.name
            )));
        }
        Ok(())
    }
}

/// Standing high bid and provisional winner for one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemStanding {
    pub high_bid: Money,
    pub high_bidder: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuctionState {
    pub round: u32,
    pub items: Vec<Item>,
    pub bidders: Vec<String>,
    pub standing: BTreeMap<String, ItemStanding>,
    pub history: Vec<RoundResult>,
}

impl AuctionState {
    pub fn new(items: Vec<Item>, bidders: Vec<String>) -> Result<Self, AuctionError> {
        let mut standing = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for item in &items {
            item.validate()?;
            if !seen.insert(item.name.clone()) {
                return Err(AuctionError::UnknownItem(format!(
                    "duplicate item name {}",
                    item.name
                )));
            }
            standing.insert(
                item.name.clone(),
                ItemStanding {
                    high_bid: item.start_price,
                    high_bidder: None,
                },
            );
        }
        Ok(AuctionState {
            round: 0,
            items,
            bidders,
            standing,
            history: Vec::new(),
        })
    }

    pub fn item(&self, name: &str) -> Result<&Item, AuctionError> {
        self.items
            .iter()
            .find(|i| i.name == name)
            .ok_or_else(|| AuctionError::UnknownItem(name.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bid {
    pub bidder: String,
    pub item: String,
    pub amount: Money,
}

/// What one bidder sees before bidding: public standings plus their own
/// minimum bidding prices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BidderView {
    pub round: u32,
    pub bidder: String,
    pub items: Vec<ItemView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    pub name: String,
    pub price: Money,
    pub high_bidder: Option<String>,
    pub increment: Money,
    pub min_bid: Money,
}

impl BidderView {
    pub fn item(&self, name: &str) -> Option<&ItemView> {
        self.items.iter().find(|i| i.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    BelowMinimum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRoundResult {
    pub accepted: Vec<Bid>,
    pub rejected: Vec<(Bid, RejectReason)>,
    pub high_bid: Money,
    pub high_bidder: Option<String>,
    pub tie_broken: bool,
    pub tie_losers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub round: u32,
    pub items: BTreeMap<String, ItemRoundResult>,
    pub changed: bool,
}

/// Minimum bidding price: the standing price for the incumbent, standing
/// price plus increment for everyone else (including all bidders in round 1,
/// when there is no incumbent yet).
pub fn min_bid_price(
    state: &AuctionState,
    bidder: &str,
    item: &str,
) -> Result<Money, AuctionError> {
    let spec = state.item(item)?;
    let standing = &state.standing[item];
    if standing.high_bidder.as_deref() == Some(bidder) {
        Ok(standing.high_bid)
    } else {
        Ok(standing.high_bid + spec.increment)
    }
}

/// Build the sealed-bid view for one bidder.
pub fn bidder_view(state: &AuctionState, bidder: &str) -> Result<BidderView, AuctionError> {
    if !state.bidders.iter().any(|b| b == bidder) {
        return Err(AuctionError::UnknownBidder(bidder.to_string()));
    }
    let items = state
        .items
        .iter()
        .map(|item| {
            let standing = &state.standing[&item.name];
            Ok(ItemView {
                name: item.name.clone(),
                price: standing.high_bid,
                high_bidder: standing.high_bidder.clone(),
                increment: item.increment,
                min_bid: min_bid_price(state, bidder, &item.name)?,
            })
        })
        .collect::<Result<Vec<_>, AuctionError>>()?;
    Ok(BidderView {
        round: state.round + 1,
        bidder: bidder.to_string(),
        items,
    })
}

/// Validate and clear one round of sealed bids.
///
/// Per item: bids below the bidder's minimum are rejected; the strictly
/// highest accepted amount sets the new standing price and winner (uniform
/// random among tied top bidders); an incumbent rebidding exactly the
/// standing price changes nothing; items with no accepted bids keep their
/// standing price and bidder.
pub fn clear_round<R: Rng>(
    state: &AuctionState,
    bids: &[Bid],
    rng: &mut R,
) -> Result<(AuctionState, RoundResult), AuctionError> {
    let mut seen = BTreeSet::new();
    for bid in bids {
        state.item(&bid.item)?;
        if !state.bidders.iter().any(|b| *b == bid.bidder) {
            return Err(AuctionError::UnknownBidder(bid.bidder.clone()));
        }
        if !seen.insert((bid.bidder.clone(), bid.item.clone())) {
            return Err(AuctionError::DuplicateBid {
                bidder: bid.bidder.clone(),
                item: bid.item.clone(),
            });
        }
    }

    let mut next = state.clone();
    next.round = state.round + 1;
    let mut items = BTreeMap::new();
    let mut changed = false;

    for item in &state.items {
        let prev = &state.standing[&item.name];
        let mut accepted = Vec::new();
        let mut rejected = Vec::new();
        for bid in bids.iter().filter(|b| b.item == item.name) {
            let min = min_bid_price(state, &bid.bidder, &item.name)?;
            if bid.amount < min {
                rejected.push((bid.clone(), RejectReason::BelowMinimum));
            } else {
                accepted.push(bid.clone());
            }
        }

        let mut standing = prev.clone();
        let mut tie_broken = false;
        let mut tie_losers = Vec::new();
        if let Some(top) = accepted.iter().map(|b| b.amount).max() {
            if top > prev.high_bid {
                let mut tied: Vec<&Bid> = accepted.iter().filter(|b| b.amount == top).collect();
                tied.sort_by(|a, b| a.bidder.cmp(&b.bidder));
                let winner = *tied.choose(rng).expect("non-empty tie set");
                if tied.len() > 1 {
                    tie_broken = true;
                    tie_losers = tied
                        .iter()
                        .filter(|b| b.bidder != winner.bidder)
                        .map(|b| b.bidder.clone())
                        .collect();
                }
                standing = ItemStanding {
                    high_bid: top,
                    high_bidder: Some(winner.bidder.clone()),
                };
            }
            // top == prev.high_bid can only be the incumbent rebidding at
            // the standing price: challengers below H + delta were rejected.
        }

        if standing != *prev {
            changed = true;
        }
        next.standing.insert(item.name.clone(), standing.clone());
        items.insert(
            item.name.clone(),
            ItemRoundResult {
                accepted,
                rejected,
                high_bid: standing.high_bid,
                high_bidder: standing.high_bidder,
                tie_broken,
                tie_losers,
            },
        );
    }

    let result = RoundResult {
        round: next.round,
        items,
        changed,
    };
    next.history.push(result.clone());
    Ok((next, result))
}

/// Natural termination: a round in which no item's price or high bidder
/// changed.
pub fn is_terminated(previous: &AuctionState, current: &AuctionState) -> Result<bool, AuctionError> {
    if current.round != previous.round + 1
        || previous.items.len() != current.items.len()
        || previous
            .items
            .iter()
            .zip(&current.items)
            .any(|(a, b)| a.name != b.name)
    {
        return Err(AuctionError::MismatchedAuction);
    }
    Ok(previous.standing == current.standing)
}

/// A sealed-bid participant in the round loop.
pub trait BiddingAgent {
    fn id(&self) -> &str;
    /// Decide this round's bids from the sealed view. Failures are logged
    /// and treated as submitting no bids.
    fn decide(&mut self, view: &BidderView) -> Result<AgentDecision, String>;
    /// Feedback after clearing; default ignores it.
    fn observe(&mut self, _result: &RoundResult) {}
}

#[derive(Debug, Clone, Default)]
pub struct AgentDecision {
    pub bids: Vec<Bid>,
    pub record: Option<TarjRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuctionOutcome {
    pub allocation: BTreeMap<String, Option<String>>,
    pub prices: BTreeMap<String, Money>,
    pub rounds: Vec<RoundResult>,
    pub records: Vec<(u32, String, TarjRecord)>,
    pub terminated_naturally: bool,
}

/// Run the sealed-bid round loop to natural termination or `max_rounds`.
pub fn run_auction<R: Rng>(
    agents: &mut [Box<dyn BiddingAgent>],
    items: Vec<Item>,
    max_rounds: u32,
    rng: &mut R,
) -> Result<AuctionOutcome, AuctionError> {
    assert!(!agents.is_empty() && max_rounds >= 1);
    let bidders: Vec<String> = agents.iter().map(|a| a.id().to_string()).collect();
    let mut state = AuctionState::new(items, bidders)?;
    let mut records = Vec::new();
    let mut terminated_naturally = false;

    while state.round < max_rounds {
        // sealed: every view is built before any bid is seen
        let views = agents
            .iter()
            .map(|a| bidder_view(&state, a.id()))
            .collect::<Result<Vec<_>, _>>()?;
        let mut bids = Vec::new();
        for (agent, view) in agents.iter_mut().zip(&views) {
            match agent.decide(view) {
                Ok(decision) => {
                    if let Some(record) = decision.record {
                        records.push((view.round, agent.id().to_string(), record));
                    }
                    bids.extend(decision.bids);
                }
                Err(err) => {
                    log::warn!("agent {} failed in round {}: {err}", agent.id(), view.round);
                }
            }
        }
        let (next, result) = clear_round(&state, &bids, rng)?;
        for agent in agents.iter_mut() {
            agent.observe(&result);
        }
        let done = is_terminated(&state, &next)?;
        state = next;
        if done {
            terminated_naturally = true;
            break;
        }
    }

    let allocation = state
        .standing
        .iter()
        .map(|(k, s)| (k.clone(), s.high_bidder.clone()))
        .collect();
    let prices = state
        .standing
        .iter()
        .map(|(k, s)| (k.clone(), s.high_bid))
        .collect();
    Ok(AuctionOutcome {
        allocation,
        prices,
        rounds: state.history,
        records,
        terminated_naturally,
    })
}

/// Auction configuration file schema (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuctionConfig {
    pub items: Vec<Item>,
    pub bidders: Vec<String>,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: u32,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_rounds() -> u32 {
    100
}

impl AuctionConfig {
    pub fn validate(&self) -> Result<(), AuctionError> {
        AuctionState::new(self.items.clone(), self.bidders.clone()).map(|_| ())
    }
}
