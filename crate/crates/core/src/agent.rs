//! The generative-agent layer: personas and objectives, prompt construction
//! for both experiments, strict parsing of the structured
//! Thought/Action/Reflection/Journal (TARJ) output, and journal memory.
//!
//! Prompt templates are versioned text assets with named placeholders.
//! Rendering is deterministic: identical inputs produce byte-identical
//! prompts, which the golden-file tests pin down.

use crate::auction::{AgentDecision, Bid, BidderView, BiddingAgent, RoundResult};
use crate::battery::{BatteryConfig, DayState, DispatchAction, PriceModel};
use crate::bidding::ValuationProfile;
use crate::llm::LlmClient;
use crate::money::Money;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use thiserror::Error;

pub const BATTERY_TEMPLATE: &str = include_str!("../assets/prompts/battery.txt");
pub const ICL_BLOCK_TEMPLATE: &str = include_str!("../assets/prompts/icl_block.txt");
pub const SAA_RULE_CENTRIC_TEMPLATE: &str = include_str!("../assets/prompts/saa_rule_centric.txt");
pub const SAA_MYOPIC_TEMPLATE: &str = include_str!("../assets/prompts/saa_myopic.txt");
pub const SAA_STRATEGIC_TEMPLATE: &str = include_str!("../assets/prompts/saa_strategic.txt");

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("missing placeholder: {0}")]
    MissingPlaceholder(String),
    #[error("unterminated placeholder near byte {0}")]
    Unterminated(usize),
}

#[derive(Debug, Error, PartialEq)]
pub enum TarjParseError {
    #[error("parse failure in section {0}")]
    ParseFailure(String),
    #[error("battery action keywords conflict: {0}")]
    AmbiguousAction(String),
    #[error("unknown item name: {0}")]
    UnknownItemName(String),
}

/// Substitute `{name}` placeholders; `{{` and `}}` are literal braces.
/// Placeholders not covered by the map are an error.
pub fn render_template(
    template: &str,
    values: &BTreeMap<&str, String>,
) -> Result<String, PromptError> {
    let bytes = template.as_bytes();
    let mut out = String::with_capacity(template.len());
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if i + 1 < bytes.len() && bytes[i + 1] == b'{' => {
                out.push('{');
                i += 2;
            }
            b'}' if i + 1 < bytes.len() && bytes[i + 1] == b'}' => {
                out.push('}');
                i += 2;
            }
            b'{' => {
                let end = template[i + 1..]
                    .find('}')
                    .map(|p| i + 1 + p)
                    .ok_or(PromptError::Unterminated(i))?;
                let name = &template[i + 1..end];
                let value = values
                    .get(name)
                    .ok_or_else(|| PromptError::MissingPlaceholder(name.to_string()))?;
                out.push_str(value);
                i = end + 1;
            }
            _ => {
                let ch = template[i..].chars().next().unwrap();
                out.push(ch);
                i += ch.len_utf8();
            }
        }
    }
    Ok(out)
}

/// Behavioral profile injected into the battery prompt.
///
/// The shipped descriptions are project-authored approximations, not
/// quotations of any published persona text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Persona {
    pub name: String,
    pub description: String,
}

impl Persona {
    pub fn thinker() -> Self {
        Persona {
            name: "Thinker".into(),
            description: "You are analytical and profit-focused. You weigh expected prices \
                          carefully and aim to maximize your total earnings over the experiment."
                .into(),
        }
    }

    pub fn realist() -> Self {
        Persona {
            name: "Realist".into(),
            description: "You are pragmatic and balanced. You care about earnings but also \
                          about keeping a sensible energy buffer for everyday needs."
                .into(),
        }
    }

    pub fn feeler() -> Self {
        Persona {
            name: "Feeler".into(),
            description: "You value comfort and security. Having energy in reserve for your \
                          household matters more to you than squeezing out extra profit."
                .into(),
        }
    }
}

/// Which SAA prompt framework an LLM bidder uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuctionObjective {
    RuleCentric,
    MyopicProfit,
    StrategicOutcome,
}

impl AuctionObjective {
    pub fn template(self) -> &'static str {
        match self {
            AuctionObjective::RuleCentric => SAA_RULE_CENTRIC_TEMPLATE,
            AuctionObjective::MyopicProfit => SAA_MYOPIC_TEMPLATE,
            AuctionObjective::StrategicOutcome => SAA_STRATEGIC_TEMPLATE,
        }
    }
}

/// Parsed structured agent output.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TarjRecord {
    pub thoughts: String,
    pub action_text: String,
    pub reflection: String,
    pub journal: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parsed_action: Option<DispatchAction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auction: Option<AuctionChoice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuctionChoice {
    pub chosen_subset: BTreeSet<String>,
    /// One entry per auction item; None means no bid on that item.
    pub bids: BTreeMap<String, Option<Money>>,
}

/// Append-only journal memory owned by a single agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryStore {
    pub entries: Vec<MemoryEntry>,
    /// Rendering window: only the most recent `window` entries appear in
    /// prompts. None renders everything.
    pub window: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub summary: String,
    pub journal: String,
}

impl MemoryStore {
    pub fn new(window: Option<usize>) -> Self {
        MemoryStore {
            entries: Vec::new(),
            window,
        }
    }

    fn windowed(&self) -> &[MemoryEntry] {
        match self.window {
            Some(w) if self.entries.len() > w => &self.entries[self.entries.len() - w..],
            _ => &self.entries,
        }
    }

    pub fn history_text(&self) -> String {
        let entries = self.windowed();
        if entries.is_empty() {
            return "(none yet)".to_string();
        }
        entries
            .iter()
            .map(|e| e.summary.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn journal_text(&self) -> String {
        let entries = self.windowed();
        if entries.is_empty() {
            return "(none yet)".to_string();
        }
        entries
            .iter()
            .map(|e| e.journal.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Append the record's journal plus a one-line outcome summary.
pub fn update_memory(memory: &mut MemoryStore, record: &TarjRecord, outcome_summary: &str) {
    memory.entries.push(MemoryEntry {
        summary: outcome_summary.to_string(),
        journal: record.journal.clone(),
    });
}

/// Labeled full-TARJ example responses injected into the battery prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IclExampleSet {
    pub examples: Vec<String>,
    pub source: String,
}

impl IclExampleSet {
    pub fn validate(&self) -> Result<(), TarjParseError> {
        for example in &self.examples {
            parse_tarj(example, TarjMode::Battery)?;
        }
        Ok(())
    }
}

fn percent_str(p: f64) -> String {
    let pct = p * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("{}", pct.round() as i64)
    } else {
        format!("{pct:.2}")
    }
}

fn kwh_str(e: crate::money::Energy) -> String {
    if e.wh() % 1000 == 0 {
        format!("{}", e.wh() / 1000)
    } else {
        format!("{:.3}", e.as_kwh())
    }
}

fn price_levels_sentence(model: &PriceModel) -> String {
    model
        .levels
        .iter()
        .zip(&model.probabilities)
        .map(|(l, p)| format!("${l}/kWh with probability {}%", percent_str(*p)))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Render the battery dispatch prompt for one day.
pub fn build_battery_prompt(
    persona: &Persona,
    day_state: &DayState,
    memory: &MemoryStore,
    icl: Option<&IclExampleSet>,
    config: &BatteryConfig,
    model: &PriceModel,
) -> Result<String, PromptError> {
    let icl_block = match icl {
        Some(set) => {
            let mut map = BTreeMap::new();
            map.insert("example_responses", set.examples.join("\n\n"));
            render_template(ICL_BLOCK_TEMPLATE, &map)?
        }
        None => String::new(),
    };
    let blackout_notice = if day_state.blackout {
        "NOTICE: A blackout is occurring today. You cannot buy or sell energy. You may fully \
         discharge the battery to serve household demand, or do nothing.\n"
            .to_string()
    } else {
        String::new()
    };
    let serve_load_option = if day_state.blackout {
        ", or fully discharge to serve household demand".to_string()
    } else {
        String::new()
    };
    let mut map = BTreeMap::new();
    map.insert("persona_name", persona.name.clone());
    map.insert("persona_description", persona.description.clone());
    map.insert("horizon", config.horizon_days.to_string());
    map.insert("capacity_kwh", kwh_str(config.capacity));
    map.insert("step_kwh", kwh_str(config.step));
    map.insert("price_levels", price_levels_sentence(model));
    map.insert("day", day_state.day.to_string());
    map.insert("price", day_state.price.to_string());
    map.insert("soc_kwh", kwh_str(day_state.soc));
    map.insert("blackout_notice", blackout_notice);
    map.insert("serve_load_option", serve_load_option);
    map.insert("history_text", memory.history_text());
    map.insert("journal_text", memory.journal_text());
    map.insert("icl_block", icl_block);
    render_template(BATTERY_TEMPLATE, &map)
}

fn money_json_value(m: Money) -> serde_json::Value {
    if m.cents() % 100 == 0 {
        serde_json::Value::from(m.cents() / 100)
    } else {
        serde_json::Value::from(m.as_units())
    }
}

/// Serialize valuations in the prompt convention: item names map to values,
/// bundle keys are JSON lists of item names.
fn valuations_json(valuations: &ValuationProfile) -> String {
    let mut map = serde_json::Map::new();
    for (item, value) in &valuations.item_values {
        map.insert(item.clone(), money_json_value(*value));
    }
    for bundle in &valuations.bundles {
        let key = serde_json::to_string(&bundle.items).unwrap();
        map.insert(key, money_json_value(bundle.value));
    }
    serde_json::to_string_pretty(&serde_json::Value::Object(map)).unwrap()
}

/// Render the SAA prompt for one bidder and round.
pub fn build_auction_prompt(
    objective: AuctionObjective,
    bidder: &str,
    view: &BidderView,
    memory: &MemoryStore,
    valuations: &ValuationProfile,
) -> Result<String, PromptError> {
    let products_str = view
        .items
        .iter()
        .map(|i| i.name.as_str())
        .collect::<Vec<_>>()
        .join(", ");
    let prices = format!(
        "{{{}}}",
        view.items
            .iter()
            .map(|i| format!("\"{}\": {}", i.name, i.price))
            .collect::<Vec<_>>()
            .join(", ")
    );
    let high_bidders = format!(
        "{{{}}}",
        view.items
            .iter()
            .map(|i| {
                format!(
                    "\"{}\": \"{}\"",
                    i.name,
                    i.high_bidder.as_deref().unwrap_or("none")
                )
            })
            .collect::<Vec<_>>()
            .join(", ")
    );
    let increments: BTreeSet<Money> = view.items.iter().map(|i| i.increment).collect();
    let min_inc = if increments.len() == 1 {
        increments.iter().next().unwrap().to_string()
    } else {
        format!(
            "{{{}}}",
            view.items
                .iter()
                .map(|i| format!("\"{}\": {}", i.name, i.increment))
                .collect::<Vec<_>>()
                .join(", ")
        )
    };
    let bid_lines = view
        .items
        .iter()
        .map(|i| format!("{}: {{your bid for {} as a number, or none}}", i.name, i.name))
        .collect::<Vec<_>>()
        .join("\n");

    let mut map = BTreeMap::new();
    map.insert("bidder", bidder.to_string());
    map.insert("products_str", products_str);
    map.insert("prices", prices);
    map.insert("high_bidders", high_bidders);
    map.insert("min_inc", min_inc);
    map.insert("history_text", memory.history_text());
    map.insert("journal_text", memory.journal_text());
    map.insert("val_json_str", valuations_json(valuations));
    map.insert("bid_lines", bid_lines);
    render_template(objective.template(), &map)
}

#[derive(Debug, Clone, Copy)]
pub enum TarjMode<'a> {
    Battery,
    Auction { items: &'a [String] },
}

fn section_label(line: &str) -> Option<(&'static str, &str)> {
    let trimmed = line.trim_start().trim_start_matches(['*', '#']).trim_start();
    for label in ["thoughts", "thought", "action", "chosensubset", "reflection", "journal"] {
        if trimmed.len() >= label.len() && trimmed[..label.len()].eq_ignore_ascii_case(label) {
            let rest = trimmed[label.len()..].trim_start().trim_start_matches(['*']);
            if let Some(body) = rest.strip_prefix(':') {
                let canonical = match label {
                    "thoughts" | "thought" => "thoughts",
                    other => other,
                };
                return Some((canonical, body.trim()));
            }
        }
    }
    None
}

fn bid_line<'a>(line: &str, items: &'a [String]) -> Option<(&'a String, String)> {
    let trimmed = line.trim();
    for item in items {
        if trimmed.len() > item.len() && trimmed[..item.len()].eq_ignore_ascii_case(item) {
            if let Some(body) = trimmed[item.len()..].trim_start().strip_prefix(':') {
                return Some((item, body.trim().to_string()));
            }
        }
    }
    None
}

/// Map the free-text Action section to a dispatch action via keyword rules.
fn map_battery_action(action_text: &str) -> Result<DispatchAction, TarjParseError> {
    let t = action_text.to_lowercase();
    let serve = t.contains("serve") || t.contains("fully discharge");
    let stripped = t.replace("fully discharge", "");
    let discharge = stripped.contains("discharge") || stripped.contains("sell");
    let no_discharge = stripped.replace("discharge", "");
    let charge = no_discharge.contains("charge") || no_discharge.contains("buy");
    let hold = t.contains("hold") || t.contains("nothing");

    if serve {
        if charge {
            return Err(TarjParseError::AmbiguousAction(action_text.to_string()));
        }
        return Ok(DispatchAction::ServeLoad);
    }
    match (charge, discharge, hold) {
        (true, false, false) => Ok(DispatchAction::Charge),
        (false, true, false) => Ok(DispatchAction::Discharge),
        (false, false, true) => Ok(DispatchAction::Hold),
        (false, false, false) => Err(TarjParseError::ParseFailure("Action".into())),
        _ => Err(TarjParseError::AmbiguousAction(action_text.to_string())),
    }
}

fn parse_bid_amount(item: &str, text: &str) -> Result<Option<Money>, TarjParseError> {
    let t = text.trim().trim_matches('"');
    if t.eq_ignore_ascii_case("none") || t.is_empty() {
        return Ok(None);
    }
    let cleaned = t.trim_start_matches('$').replace(',', "");
    cleaned
        .parse::<f64>()
        .map(|units| Some(Money::from_units(units)))
        .map_err(|_| TarjParseError::ParseFailure(item.to_string()))
}

/// Parse a TARJ response. Section labels are case-insensitive and
/// order-tolerant; all four TARJ fields must be present. In auction mode
/// the ChosenSubset line and one bid line per item are also required.
pub fn parse_tarj(text: &str, mode: TarjMode<'_>) -> Result<TarjRecord, TarjParseError> {
    let items: &[String] = match mode {
        TarjMode::Battery => &[],
        TarjMode::Auction { items } => items,
    };

    let mut sections: BTreeMap<&str, String> = BTreeMap::new();
    let mut bids: BTreeMap<String, Option<Money>> = BTreeMap::new();
    let mut current: Option<&str> = None;
    for line in text.lines() {
        if let Some((item, body)) = bid_line(line, items) {
            bids.insert(item.clone(), parse_bid_amount(item, &body)?);
            current = None;
            continue;
        }
        if let Some((label, body)) = section_label(line) {
            sections.insert(label, body.to_string());
            current = Some(label);
            continue;
        }
        if let Some(label) = current {
            let entry = sections.get_mut(label).unwrap();
            if !line.trim().is_empty() {
                if !entry.is_empty() {
                    entry.push(' ');
                }
                entry.push_str(line.trim());
            }
        }
    }

    for required in ["thoughts", "action", "reflection", "journal"] {
        if !sections.contains_key(required) {
            let display = match required {
                "thoughts" => "Thoughts",
                "action" => "Action",
                "reflection" => "Reflection",
                _ => "Journal",
            };
            return Err(TarjParseError::ParseFailure(display.to_string()));
        }
    }

    let mut record = TarjRecord {
        thoughts: sections["thoughts"].clone(),
        action_text: sections["action"].clone(),
        reflection: sections["reflection"].clone(),
        journal: sections["journal"].clone(),
        parsed_action: None,
        auction: None,
    };

    match mode {
        TarjMode::Battery => {
            record.parsed_action = Some(map_battery_action(&record.action_text)?);
        }
        TarjMode::Auction { items } => {
            let subset_text = sections
                .get("chosensubset")
                .ok_or_else(|| TarjParseError::ParseFailure("ChosenSubset".into()))?;
            let mut chosen = BTreeSet::new();
            for part in subset_text.split(',') {
                let name = part.trim().trim_matches('"');
                if name.is_empty() || name.eq_ignore_ascii_case("none") {
                    continue;
                }
                let canonical = items
                    .iter()
                    .find(|i| i.eq_ignore_ascii_case(name))
                    .ok_or_else(|| TarjParseError::UnknownItemName(name.to_string()))?;
                chosen.insert(canonical.clone());
            }
            for item in items {
                if !bids.contains_key(item) {
                    return Err(TarjParseError::ParseFailure(item.clone()));
                }
            }
            record.auction = Some(AuctionChoice {
                chosen_subset: chosen,
                bids,
            });
        }
    }
    Ok(record)
}

/// Canonical rendering of a record; the inverse of `parse_tarj` up to
/// whitespace normalization.
pub fn render_tarj(record: &TarjRecord) -> String {
    let mut out = String::new();
    out.push_str(&format!("Thoughts: {}\n", record.thoughts));
    out.push_str(&format!("Action: {}\n", record.action_text));
    if let Some(auction) = &record.auction {
        let subset = auction
            .chosen_subset
            .iter()
            .cloned()
            .collect::<Vec<_>>()
            .join(", ");
        out.push_str(&format!("ChosenSubset: {subset}\n"));
        for (item, bid) in &auction.bids {
            match bid {
                Some(amount) => out.push_str(&format!("{item}: {amount}\n")),
                None => out.push_str(&format!("{item}: none\n")),
            }
        }
    }
    out.push_str(&format!("Reflection: {}\n", record.reflection));
    out.push_str(&format!("Journal: {}\n", record.journal));
    out
}

const FORMAT_REMINDER: &str = "\n\nREMINDER: Your previous response did not follow the required \
                               TARJ output format. Respond again using exactly the output format \
                               specified above.";

/// How many total attempts an LLM agent gets before falling back to its
/// default action (one initial prompt plus two format-reminder re-prompts).
pub const PARSE_ATTEMPTS: u32 = 3;

/// LLM-backed battery dispatch agent.
pub struct BatteryLlmAgent {
    pub persona: Persona,
    pub memory: MemoryStore,
    pub icl: Option<IclExampleSet>,
    pub client: Arc<LlmClient>,
    pub config: BatteryConfig,
    pub model: PriceModel,
}

impl BatteryLlmAgent {
    pub fn new(
        persona: Persona,
        icl: Option<IclExampleSet>,
        client: Arc<LlmClient>,
        config: BatteryConfig,
        model: PriceModel,
    ) -> Self {
        let window = Some(config.horizon_days as usize);
        BatteryLlmAgent {
            persona,
            memory: MemoryStore::new(window),
            icl,
            client,
            config,
            model,
        }
    }

    /// Choose today's action. Parse failures re-prompt with a format
    /// reminder; after the attempt budget the action defaults to Hold.
    pub fn act(&mut self, state: &DayState) -> Result<(DispatchAction, Option<TarjRecord>), PromptError> {
        let base_prompt = build_battery_prompt(
            &self.persona,
            state,
            &self.memory,
            self.icl.as_ref(),
            &self.config,
            &self.model,
        )?;
        let mut prompt = base_prompt;
        for attempt in 1..=PARSE_ATTEMPTS {
            let response = match self.client.complete(None, &prompt) {
                Ok(text) => text,
                Err(err) => {
                    log::warn!("battery agent day {}: client error: {err}", state.day);
                    return Ok((DispatchAction::Hold, None));
                }
            };
            match parse_tarj(&response, TarjMode::Battery) {
                Ok(record) => {
                    let action = record.parsed_action.expect("battery mode sets action");
                    return Ok((action, Some(record)));
                }
                Err(err) => {
                    log::warn!(
                        "battery agent day {} attempt {attempt}: {err}",
                        state.day
                    );
                    prompt.push_str(FORMAT_REMINDER);
                }
            }
        }
        log::warn!(
            "battery agent day {}: defaulting to Hold after {PARSE_ATTEMPTS} attempts",
            state.day
        );
        Ok((DispatchAction::Hold, None))
    }
}

/// LLM-backed SAA bidder.
pub struct AuctionLlmAgent {
    pub id: String,
    pub objective: AuctionObjective,
    pub valuations: ValuationProfile,
    pub memory: MemoryStore,
    pub client: Arc<LlmClient>,
    pending_summary: Option<String>,
    pending_record: Option<TarjRecord>,
}

impl AuctionLlmAgent {
    pub fn new(
        id: impl Into<String>,
        objective: AuctionObjective,
        valuations: ValuationProfile,
        client: Arc<LlmClient>,
    ) -> Self {
        AuctionLlmAgent {
            id: id.into(),
            objective,
            valuations,
            memory: MemoryStore::new(None),
            client,
            pending_summary: None,
            pending_record: None,
        }
    }
}

impl BiddingAgent for AuctionLlmAgent {
    fn id(&self) -> &str {
        &self.id
    }

    fn decide(&mut self, view: &BidderView) -> Result<AgentDecision, String> {
        let items: Vec<String> = view.items.iter().map(|i| i.name.clone()).collect();
        let base_prompt = build_auction_prompt(
            self.objective,
            &self.id,
            view,
            &self.memory,
            &self.valuations,
        )
        .map_err(|e| e.to_string())?;
        let mut prompt = base_prompt;
        for attempt in 1..=PARSE_ATTEMPTS {
            let response = match self.client.complete(None, &prompt) {
                Ok(text) => text,
                Err(err) => {
                    log::warn!("auction agent {} round {}: client error: {err}", self.id, view.round);
                    self.pending_summary =
                        Some(format!("Round {}: no bids (client failure).", view.round));
                    return Ok(AgentDecision::default());
                }
            };
            match parse_tarj(&response, TarjMode::Auction { items: &items }) {
                Ok(record) => {
                    let choice = record.auction.as_ref().expect("auction mode sets choice");
                    let bids: Vec<Bid> = choice
                        .bids
                        .iter()
                        .filter_map(|(item, amount)| {
                            amount.map(|amount| Bid {
                                bidder: self.id.clone(),
                                item: item.clone(),
                                amount,
                            })
                        })
                        .collect();
                    let described = bids
                        .iter()
                        .map(|b| format!("{}@{}", b.item, b.amount))
                        .collect::<Vec<_>>()
                        .join(", ");
                    self.pending_summary = Some(format!(
                        "Round {}: bid {}.",
                        view.round,
                        if described.is_empty() { "nothing".to_string() } else { described }
                    ));
                    self.pending_record = Some(record.clone());
                    return Ok(AgentDecision {
                        bids,
                        record: Some(record),
                    });
                }
                Err(err) => {
                    log::warn!(
                        "auction agent {} round {} attempt {attempt}: {err}",
                        self.id,
                        view.round
                    );
                    prompt.push_str(FORMAT_REMINDER);
                }
            }
        }
        log::warn!(
            "auction agent {} round {}: defaulting to no bids after {PARSE_ATTEMPTS} attempts",
            self.id,
            view.round
        );
        self.pending_summary = Some(format!(
            "Round {}: no bids (unparseable responses).",
            view.round
        ));
        Ok(AgentDecision::default())
    }

    fn observe(&mut self, result: &RoundResult) {
        let held: Vec<&str> = result
            .items
            .iter()
            .filter(|(_, r)| r.high_bidder.as_deref() == Some(self.id.as_str()))
            .map(|(name, _)| name.as_str())
            .collect();
        let summary = format!(
            "{} Standing high bidder on: {}.",
            self.pending_summary.take().unwrap_or_default(),
            if held.is_empty() {
                "nothing".to_string()
            } else {
                held.join(", ")
            }
        );
        let record = self.pending_record.take().unwrap_or_default();
        update_memory(&mut self.memory, &record, summary.trim());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auction::ItemView;
    use crate::bidding::table1_valuations;
    use crate::money::Energy;

    fn day(day: u32, price: i64, soc: f64, blackout: bool) -> DayState {
        DayState {
            day,
            price: Money(price),
            soc: Energy::from_kwh(soc),
            blackout,
        }
    }

    fn round1_view(bidder: &str) -> BidderView {
        BidderView {
            round: 1,
            bidder: bidder.to_string(),
            items: ["Product A", "Product B"]
                .iter()
                .map(|name| ItemView {
                    name: name.to_string(),
                    price: Money::ZERO,
                    high_bidder: None,
                    increment: Money(100),
                    min_bid: Money(100),
                })
                .collect(),
        }
    }

    #[test]
    fn battery_prompt_is_deterministic_and_mentions_blackout_once() {
        let config = BatteryConfig::default_home();
        let model = PriceModel::default_two_level();
        let memory = MemoryStore::new(Some(20));
        let state = day(10, 1000, 7.0, true);
        let p1 =
            build_battery_prompt(&Persona::feeler(), &state, &memory, None, &config, &model)
                .unwrap();
        let p2 =
            build_battery_prompt(&Persona::feeler(), &state, &memory, None, &config, &model)
                .unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.matches("blackout is occurring").count(), 1);
        assert!(!p1.contains("example responses"));
    }

    #[test]
    fn battery_prompt_includes_icl_block_only_when_given() {
        let config = BatteryConfig::default_home();
        let model = PriceModel::default_two_level();
        let memory = MemoryStore::new(Some(20));
        let state = day(3, 500, 5.0, false);
        let icl = IclExampleSet {
            examples: vec![render_tarj(&TarjRecord {
                thoughts: "Price is low.".into(),
                action_text: "I will charge the battery.".into(),
                reflection: "Good buy.".into(),
                journal: "Bought low.".into(),
                parsed_action: Some(DispatchAction::Charge),
                auction: None,
            })],
            source: "example-set".into(),
        };
        icl.validate().unwrap();
        let with = build_battery_prompt(
            &Persona::thinker(),
            &state,
            &memory,
            Some(&icl),
            &config,
            &model,
        )
        .unwrap();
        assert!(with.contains("Here are some example responses to guide you:"));
        assert!(with.contains("I will charge the battery."));
    }

    #[test]
    fn auction_prompts_carry_objective_specific_blocks() {
        let memory = MemoryStore::new(None);
        let vals = table1_valuations();
        let view = round1_view("Bidder 1");
        let myopic = build_auction_prompt(
            AuctionObjective::MyopicProfit,
            "Bidder 1",
            &view,
            &memory,
            &vals["Bidder 1"],
        )
        .unwrap();
        assert!(myopic.contains("maximizing utility for the immediate round"));
        assert!(myopic.contains("If you are already the high bidder"));

        let strategic = build_auction_prompt(
            AuctionObjective::StrategicOutcome,
            "Bidder 1",
            &view,
            &memory,
            &vals["Bidder 1"],
        )
        .unwrap();
        assert!(strategic.contains("How the current combination will affect the future"));
        assert!(!strategic.contains("If you are already the high bidder"));

        let rule = build_auction_prompt(
            AuctionObjective::RuleCentric,
            "Bidder 1",
            &view,
            &memory,
            &vals["Bidder 1"],
        )
        .unwrap();
        assert!(!rule.contains("HOW YOU SHOULD DECIDE"));
        assert!(rule.contains("Your Role"));
    }

    #[test]
    fn round1_min_bids_are_start_plus_increment() {
        let memory = MemoryStore::new(None);
        let vals = table1_valuations();
        let view = round1_view("Bidder 2");
        let prompt = build_auction_prompt(
            AuctionObjective::RuleCentric,
            "Bidder 2",
            &view,
            &memory,
            &vals["Bidder 2"],
        )
        .unwrap();
        assert!(prompt.contains("Minimum allowed price increase for challenges: 1"));
        assert!(prompt.contains("\"Product A\": 0, \"Product B\": 0"));
    }

    #[test]
    fn template_rendering_rejects_unknown_placeholders() {
        let map = BTreeMap::new();
        assert_eq!(
            render_template("hello {name}", &map),
            Err(PromptError::MissingPlaceholder("name".into()))
        );
        assert_eq!(render_template("{{literal}}", &map).unwrap(), "{literal}");
    }

    #[test]
    fn parse_auction_tarj_example() {
        let text = "Thoughts: A looks cheap.\n\
                    Action: Demanding Product A only.\n\
                    ChosenSubset: Product A\n\
                    Product A: 3\n\
                    Product B: none\n\
                    Reflection: Fits my plan.\n\
                    Journal: Watch B's price.\n";
        let items = vec!["Product A".to_string(), "Product B".to_string()];
        let record = parse_tarj(text, TarjMode::Auction { items: &items }).unwrap();
        let choice = record.auction.unwrap();
        assert_eq!(
            choice.chosen_subset,
            ["Product A".to_string()].into_iter().collect()
        );
        assert_eq!(choice.bids["Product A"], Some(Money(300)));
        assert_eq!(choice.bids["Product B"], None);
    }

    #[test]
    fn parse_battery_action_keywords() {
        let text = |action: &str| {
            format!(
                "Thoughts: t\nAction: {action}\nReflection: r\nJournal: j\n"
            )
        };
        let parse = |action: &str| {
            parse_tarj(&text(action), TarjMode::Battery).map(|r| r.parsed_action.unwrap())
        };
        assert_eq!(
            parse("I will charge the battery by 1 kWh").unwrap(),
            DispatchAction::Charge
        );
        assert_eq!(
            parse("Discharge 1 kWh and sell it").unwrap(),
            DispatchAction::Discharge
        );
        assert_eq!(parse("Do nothing today").unwrap(), DispatchAction::Hold);
        assert_eq!(
            parse("Fully discharge to serve household demand").unwrap(),
            DispatchAction::ServeLoad
        );
        assert!(matches!(
            parse("Maybe charge, maybe sell"),
            Err(TarjParseError::AmbiguousAction(_))
        ));
    }

    #[test]
    fn missing_journal_is_a_parse_failure() {
        let text = "Thoughts: t\nAction: hold\nReflection: r\n";
        assert_eq!(
            parse_tarj(text, TarjMode::Battery),
            Err(TarjParseError::ParseFailure("Journal".into()))
        );
    }

    #[test]
    fn unknown_chosen_subset_item_is_rejected() {
        let text = "Thoughts: t\nAction: a\nChosenSubset: Product Z\n\
                    Product A: none\nReflection: r\nJournal: j\n";
        let items = vec!["Product A".to_string()];
        assert_eq!(
            parse_tarj(text, TarjMode::Auction { items: &items }),
            Err(TarjParseError::UnknownItemName("Product Z".into()))
        );
    }

    #[test]
    fn memory_window_and_determinism() {
        let mut memory = MemoryStore::new(Some(5));
        let record = TarjRecord {
            journal: "entry".into(),
            ..TarjRecord::default()
        };
        update_memory(&mut memory, &record, "Day 1: held.");
        assert_eq!(memory.history_text(), "Day 1: held.");
        for d in 2..=6 {
            update_memory(&mut memory, &record, &format!("Day {d}: held."));
        }
        let text = memory.history_text();
        assert!(!text.contains("Day 1:"));
        assert!(text.contains("Day 2:") && text.contains("Day 6:"));
        assert_eq!(memory.history_text(), memory.history_text());
        assert_eq!(memory.entries.len(), 6);
    }

    #[test]
    fn tarj_round_trip_preserves_fields() {
        let record = TarjRecord {
            thoughts: "Compare prices across items.".into(),
            action_text: "Bid on both products at the minimum.".into(),
            reflection: "Consistent with earlier rounds.".into(),
            journal: "Keep an eye on Product B.".into(),
            parsed_action: None,
            auction: Some(AuctionChoice {
                chosen_subset: ["Product A".to_string(), "Product B".to_string()]
                    .into_iter()
                    .collect(),
                bids: [
                    ("Product A".to_string(), Some(Money(100))),
                    ("Product B".to_string(), None),
                ]
                .into_iter()
                .collect(),
            }),
        };
        let items = vec!["Product A".to_string(), "Product B".to_string()];
        let parsed = parse_tarj(&render_tarj(&record), TarjMode::Auction { items: &items }).unwrap();
        assert_eq!(parsed.thoughts, record.thoughts);
        assert_eq!(parsed.action_text, record.action_text);
        assert_eq!(parsed.reflection, record.reflection);
        assert_eq!(parsed.journal, record.journal);
        assert_eq!(parsed.auction, record.auction);
    }
}
