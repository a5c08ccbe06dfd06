//! Annotation cost estimates for LLM labeling and human labor.
//!
//! All currency arithmetic is done in `rust_decimal::Decimal`; amounts are
//! kept at 6 decimal places internally and shown with 2.

use std::fmt::Write as _;
use std::str::FromStr;

use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("scenario name must not be empty")]
    EmptyName,
    #[error("no scenarios given")]
    NoScenarios,
    #[error("invalid input for `{scenario}`: {reason}")]
    InvalidInput { scenario: String, reason: String },
    #[error("malformed scenario file: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Internal precision for currency amounts.
pub const INTERNAL_SCALE: u32 = 6;

/// Accepts decimals written either as JSON strings or JSON numbers. Numbers
/// are read from their literal text, never through `f64`.
fn de_decimal<'de, D: Deserializer<'de>>(d: D) -> Result<Decimal, D::Error> {
    let v = serde_json::Value::deserialize(d)?;
    let text = match &v {
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Number(n) => n.to_string(),
        other => return Err(serde::de::Error::custom(format!("expected a decimal, got {other}"))),
    };
    Decimal::from_str(&text)
        .or_else(|_| Decimal::from_scientific(&text))
        .map_err(serde::de::Error::custom)
}

fn round_internal(d: Decimal) -> Decimal {
    d.round_dp_with_strategy(INTERNAL_SCALE, RoundingStrategy::MidpointAwayFromZero)
}

/// Two-decimal display, half-up.
pub fn display_amount(d: Decimal) -> String {
    let r = d.round_dp_with_strategy(2, RoundingStrategy::MidpointAwayFromZero);
    format!("{r:.2}")
}

/// Currency string with thousands separators: `$8,990.00`.
pub fn display_money(d: Decimal) -> String {
    let plain = display_amount(d);
    let (sign, digits) = plain.strip_prefix('-').map_or(("", plain.as_str()), |rest| ("-", rest));
    let (int, frac) = digits.split_once('.').unwrap_or((digits, "00"));
    let mut grouped = String::new();
    for (i, c) in int.chars().enumerate() {
        if i > 0 && (int.len() - i) % 3 == 0 {
            grouped.push(',');
        }
        grouped.push(c);
    }
    format!("{sign}${grouped}.{frac}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmCostInput {
    pub n_batches: u64,
    pub input_tokens_per_batch: u64,
    pub output_tokens_per_batch: u64,
    /// Currency per input token.
    #[serde(deserialize_with = "de_decimal")]
    pub rate_in: Decimal,
    /// Currency per output token.
    #[serde(deserialize_with = "de_decimal")]
    pub rate_out: Decimal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanCostInput {
    pub n_samples: u64,
    #[serde(deserialize_with = "de_decimal")]
    pub seconds_per_task: Decimal,
    #[serde(deserialize_with = "de_decimal")]
    pub hourly_rate: Decimal,
    pub workers_per_task: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Currency,
    Hours,
    Tasks,
    Tokens,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostComponent {
    pub name: String,
    pub unit: Unit,
    pub amount: Decimal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostAssumptions {
    Llm(LlmCostInput),
    Human(HumanCostInput),
}

/// `total` is the sum of the currency components of `breakdown`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub total: Decimal,
    pub breakdown: Vec<CostComponent>,
    pub assumptions: CostAssumptions,
}

impl CostEstimate {
    fn from_components(breakdown: Vec<CostComponent>, assumptions: CostAssumptions) -> Self {
        let total = breakdown
            .iter()
            .filter(|c| c.unit == Unit::Currency)
            .map(|c| c.amount)
            .sum();
        Self {
            total,
            breakdown,
            assumptions,
        }
    }

    pub fn component(&self, name: &str) -> Option<Decimal> {
        self.breakdown.iter().find(|c| c.name == name).map(|c| c.amount)
    }
}

/// `n_batches · (input_tokens · rate_in + output_tokens · rate_out)`.
pub fn estimate_llm_cost(input: &LlmCostInput) -> CostEstimate {
    let n = Decimal::from(input.n_batches);
    let tokens_in = n * Decimal::from(input.input_tokens_per_batch);
    let tokens_out = n * Decimal::from(input.output_tokens_per_batch);
    let cost_in = round_internal(tokens_in * input.rate_in);
    let cost_out = round_internal(tokens_out * input.rate_out);
    CostEstimate::from_components(
        vec![
            CostComponent { name: "input_tokens".into(), unit: Unit::Tokens, amount: tokens_in },
            CostComponent { name: "output_tokens".into(), unit: Unit::Tokens, amount: tokens_out },
            CostComponent { name: "input_token_cost".into(), unit: Unit::Currency, amount: cost_in },
            CostComponent { name: "output_token_cost".into(), unit: Unit::Currency, amount: cost_out },
        ],
        CostAssumptions::Llm(input.clone()),
    )
}

/// Labor cost: `n_samples · workers` tasks at `seconds_per_task` each, paid
/// at `hourly_rate`.
pub fn estimate_human_cost(input: &HumanCostInput) -> Result<CostEstimate, CostError> {
    if input.workers_per_task == 0 {
        return Err(CostError::InvalidInput {
            scenario: "human".into(),
            reason: "workers_per_task must be at least 1".into(),
        });
    }
    if input.seconds_per_task <= Decimal::ZERO || input.hourly_rate < Decimal::ZERO {
        return Err(CostError::InvalidInput {
            scenario: "human".into(),
            reason: "seconds_per_task must be positive and hourly_rate non-negative".into(),
        });
    }
    let tasks = Decimal::from(input.n_samples) * Decimal::from(input.workers_per_task);
    let seconds = tasks * input.seconds_per_task;
    let hours = round_internal(seconds / Decimal::from(3600));
    // Multiply before dividing so exact results stay exact.
    let cost = round_internal(seconds * input.hourly_rate / Decimal::from(3600));
    Ok(CostEstimate::from_components(
        vec![
            CostComponent { name: "tasks".into(), unit: Unit::Tasks, amount: tasks },
            CostComponent { name: "labor_hours".into(), unit: Unit::Hours, amount: hours },
            CostComponent { name: "labor_cost".into(), unit: Unit::Currency, amount: cost },
        ],
        CostAssumptions::Human(input.clone()),
    ))
}

/// One entry of a scenario file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(flatten)]
    pub input: CostAssumptions,
    /// Externally reported figure to compare against, if any.
    #[serde(default, skip_serializing_if = "Option::is_none", deserialize_with = "de_opt_decimal")]
    pub reported: Option<Decimal>,
}

fn de_opt_decimal<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Decimal>, D::Error> {
    de_decimal(d).map(Some)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub scenarios: Vec<Scenario>,
}

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self, CostError> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub estimate: CostEstimate,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reported: Option<Decimal>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub rows: Vec<ReportRow>,
}

impl CostReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table, one scenario per row, in input order.
    pub fn to_text(&self) -> String {
        let name_w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max("scenario".len());
        let mut out = String::new();
        let _ = writeln!(out, "{:<name_w$}  {:>14}  {:>10}  {:>12}", "scenario", "total", "hours", "reported");
        for r in &self.rows {
            let hours = r
                .estimate
                .component("labor_hours")
                .map(|h| format!("{:.2}", h.round_dp_with_strategy(2, RoundingStrategy::MidpointAwayFromZero)))
                .unwrap_or_else(|| "-".into());
            let reported = r.reported.map(display_money).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:<name_w$}  {:>14}  {:>10}  {:>12}",
                r.name,
                display_money(r.estimate.total),
                hours,
                reported
            );
        }
        out
    }
}

/// Estimates every scenario and assembles the comparison, preserving order.
pub fn cost_comparison_report(scenarios: &[Scenario]) -> Result<CostReport, CostError> {
    if scenarios.is_empty() {
        return Err(CostError::NoScenarios);
    }
    let rows = scenarios
        .iter()
        .map(|s| {
            if s.name.trim().is_empty() {
                return Err(CostError::EmptyName);
            }
            let estimate = match &s.input {
                CostAssumptions::Llm(i) => estimate_llm_cost(i),
                CostAssumptions::Human(i) => estimate_human_cost(i).map_err(|e| match e {
                    CostError::InvalidInput { reason, .. } => CostError::InvalidInput { scenario: s.name.clone(), reason },
                    other => other,
                })?,
            };
            Ok(ReportRow { name: s.name.clone(), estimate, reported: s.reported })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CostReport { rows })
}

/// The four scenarios of the 1,000-sample / full-corpus comparison: GPT-4
/// pricing of $0.01/1k input and $0.03/1k output tokens, batches of 10 texts
/// at ~1,000 input and ~150 output tokens, crowd workers at 10 s per task
/// (360 tasks/hour) with three workers per item, and a research assistant at
/// 45 s per task, all at $15/hour.
pub fn reference_scenarios() -> Vec<Scenario> {
    let rate_in = Decimal::new(1, 5);
    let rate_out = Decimal::new(3, 5);
    vec![
        Scenario {
            name: "LLM: entire corpus (n=6.2m)".into(),
            input: CostAssumptions::Llm(LlmCostInput {
                n_batches: 620_000,
                input_tokens_per_batch: 1000,
                output_tokens_per_batch: 150,
                rate_in,
                rate_out,
            }),
            reported: Some(Decimal::from(8990)),
        },
        Scenario {
            name: "LLM: n=1000".into(),
            input: CostAssumptions::Llm(LlmCostInput {
                n_batches: 100,
                input_tokens_per_batch: 1000,
                output_tokens_per_batch: 150,
                rate_in,
                rate_out,
            }),
            reported: Some(Decimal::from(15)),
        },
        Scenario {
            name: "Crowdworker: n=1000".into(),
            input: CostAssumptions::Human(HumanCostInput {
                n_samples: 1000,
                seconds_per_task: Decimal::from(10),
                hourly_rate: Decimal::from(15),
                workers_per_task: 3,
            }),
            reported: Some(Decimal::from(124)),
        },
        Scenario {
            name: "Trained assistant: n=1000".into(),
            input: CostAssumptions::Human(HumanCostInput {
                n_samples: 1000,
                seconds_per_task: Decimal::from(45),
                hourly_rate: Decimal::from(15),
                workers_per_task: 1,
            }),
            reported: Some(Decimal::from(187)),
        },
    ]
}
