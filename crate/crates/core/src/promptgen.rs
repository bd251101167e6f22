//! Prompt templates for the four recommendation strategies.
//!
//! Baseline strategies are fixed single sentences. The segmentation-aware
//! strategy prepends the user-segmentation rule paragraph, the user's group,
//! and a tagged sample of the user's training history.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{ItemId, UserId};
use crate::ingest::InteractionSet;
use crate::popularity::{PopClass, PopularityPartition, UserGroup, UserSegments};

/// Maximum number of history titles rendered into a segmentation prompt.
pub const HISTORY_LIMIT: usize = 20;

pub const SEGMENTATION_RULES: &str = "The user segmentation rules are as follows: users who watch more than 50% of H-class movies are classified as popular users, those who watch more than 50% of T-class movies are classified as niche users, and the remaining are ordinary users. For popular users, more H-class movies should be recommended, while for niche users, more T-class movies should be recommended.";

const DEBIASING_INSTRUCTION: &str =
    "Please apply popularity debiasing: avoid recommending only popular movies; include long-tail movies when appropriate.";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("strategy {0} needs user segments")]
    MissingSegments(StrategyKind),
    #[error("vanilla prompts take no user segments")]
    UnexpectedSegments,
    #[error("user {0} is not present in the user segments")]
    UserNotSegmented(UserId),
    #[error("history item {0} is not in the popularity partition")]
    UnknownHistoryItem(ItemId),
    #[error("list length must be positive")]
    ZeroListLength,
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Vanilla,
    Diversity,
    PopDebiasing,
    #[serde(rename = "fairlrm")]
    FairLrm,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] =
        [StrategyKind::Vanilla, StrategyKind::Diversity, StrategyKind::PopDebiasing, StrategyKind::FairLrm];

    /// Machine name used in files and flags.
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Vanilla => "vanilla",
            StrategyKind::Diversity => "diversity",
            StrategyKind::PopDebiasing => "pop_debiasing",
            StrategyKind::FairLrm => "fairlrm",
        }
    }

    /// Row label as printed in result tables.
    pub fn display_name(self) -> &'static str {
        match self {
            StrategyKind::Vanilla => "Vanilla",
            StrategyKind::Diversity => "Diversity",
            StrategyKind::PopDebiasing => "Pop.Debiasing",
            StrategyKind::FairLrm => "FairLRM",
        }
    }

    /// Whether the strategy is evaluated once per user threshold.
    pub fn per_threshold(self) -> bool {
        self != StrategyKind::Vanilla
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, PromptError> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        match key.as_str() {
            "vanilla" => Ok(StrategyKind::Vanilla),
            "diversity" => Ok(StrategyKind::Diversity),
            "popdebiasing" | "debiasing" => Ok(StrategyKind::PopDebiasing),
            "fairlrm" => Ok(StrategyKind::FairLrm),
            _ => Err(PromptError::UnknownStrategy(s.to_string())),
        }
    }
}

/// Short label for a user threshold: 0.5 -> "55", 0.8 -> "82".
pub fn threshold_label(threshold: f64) -> String {
    let tenths = threshold * 10.0;
    if (tenths - tenths.round()).abs() < 1e-9 && (1.0..=9.0).contains(&tenths.round()) {
        let head = tenths.round() as u32;
        // 0.5 is written "55" (P at >= 50%, N at <= 50%)
        let tail = if head == 5 { 5 } else { 10 - head };
        format!("{head}{tail}")
    } else {
        format!("{threshold}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptStrategy {
    pub kind: StrategyKind,
    /// User-segmentation threshold the cell is keyed by; absent for vanilla.
    pub threshold: Option<f64>,
}

impl PromptStrategy {
    pub fn label(&self) -> String {
        match self.threshold {
            Some(t) if self.kind.per_threshold() => format!("{} ({})", self.kind.display_name(), threshold_label(t)),
            _ => self.kind.display_name().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub item: ItemId,
    pub title: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub user: UserId,
    pub strategy: PromptStrategy,
    /// Training-split items in chronological order.
    pub history: Vec<HistoryEntry>,
    pub list_length: usize,
}

/// The user's most recent `limit` training items, oldest first.
pub fn history_sample(
    train: &InteractionSet,
    user: UserId,
    titles: &BTreeMap<ItemId, String>,
    limit: usize,
) -> Vec<HistoryEntry> {
    let mut recent: Vec<HistoryEntry> = train
        .timeline(user)
        .rev()
        .take(limit)
        .map(|it| HistoryEntry {
            item: it.item,
            title: titles.get(&it.item).cloned().unwrap_or_else(|| format!("item {}", it.item)),
        })
        .collect();
    recent.reverse();
    recent
}

fn request_sentence(list_length: usize) -> String {
    format!("I need {list_length} movies or TV shows.")
}

pub fn build_prompt(
    request: &PromptRequest,
    segments: Option<&UserSegments>,
    partition: &PopularityPartition,
) -> Result<String, PromptError> {
    let n = request.list_length;
    if n == 0 {
        return Err(PromptError::ZeroListLength);
    }
    match request.strategy.kind {
        StrategyKind::Vanilla => {
            if segments.is_some() {
                return Err(PromptError::UnexpectedSegments);
            }
            Ok(request_sentence(n))
        }
        StrategyKind::Diversity => Ok(format!("Please recommend a diverse list of {n} movies.")),
        StrategyKind::PopDebiasing => Ok(format!("{} {DEBIASING_INSTRUCTION}", request_sentence(n))),
        StrategyKind::FairLrm => {
            let segments = segments.ok_or(PromptError::MissingSegments(StrategyKind::FairLrm))?;
            let group = segments.group(request.user).ok_or(PromptError::UserNotSegmented(request.user))?;
            let mut text = String::new();
            text.push_str(SEGMENTATION_RULES);
            text.push('\n');
            text.push_str(match group {
                UserGroup::P => "This user is a popular user.",
                UserGroup::N => "This user is a niche user.",
            });
            text.push('\n');
            if !request.history.is_empty() {
                text.push_str("Recently watched ([H] = H-class, [T] = T-class):\n");
                for entry in request.history.iter().rev().take(HISTORY_LIMIT).rev() {
                    let tag = match partition.class_of(entry.item) {
                        Some(PopClass::Popular) => "H",
                        Some(PopClass::Niche) => "T",
                        None => return Err(PromptError::UnknownHistoryItem(entry.item)),
                    };
                    text.push_str(&format!("- {} [{tag}]\n", entry.title));
                }
            }
            text.push_str(&request_sentence(n));
            Ok(text)
        }
    }
}

/// One line of the prompt audit/replay file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub user_id: UserId,
    pub strategy: StrategyKind,
    pub threshold: Option<f64>,
    pub list_length: usize,
    pub prompt: String,
}
