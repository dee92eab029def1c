//! Distribution-aware prompt evolution.
//!
//! A population of instruction prompts is scored on a development set. Each
//! generation, the history is split into a success tail and a failure bulk.
//! The meta-optimizer sees both and proposes one new prompt, which is scored
//! and appended. The search stops when the top three scores agree to within
//! 1e-4 or the generation budget runs out.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lvlm_client::{ClientError, MetaOptimizer, MetaPromptKind, Proposal};

pub const VANILLA_PROMPT: &str = include_str!("../assets/prompts/vanilla.txt");
pub const INIT_TEMPLATE: &str = include_str!("../assets/prompts/init.txt");
pub const CONTRASTIVE_TEMPLATE: &str = include_str!("../assets/prompts/contrastive.txt");
pub const EXPLOITATIVE_TEMPLATE: &str = include_str!("../assets/prompts/exploitative.txt");

pub const DEFAULT_MAX_GENERATIONS: usize = 10;
pub const CONVERGENCE_STD: f64 = 1e-4;
const MIN_WINDOW: usize = 3;

#[derive(Debug, Error)]
pub enum DapeError {
    #[error("history has {found} records, need at least {needed}")]
    InsufficientHistory { needed: usize, found: usize },
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("scorer failed: {0}")]
    Scorer(String),
    #[error("invalid history: {0}")]
    InvalidHistory(String),
    #[error("history I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Vanilla,
    Seed,
    Evolved,
}

/// A prompt waiting to be scored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptCandidate {
    pub text: String,
    pub generation: usize,
    pub origin: Origin,
}

impl PromptCandidate {
    pub fn scored(self, score: f64) -> PromptRecord {
        PromptRecord {
            text: self.text,
            score,
            generation: self.generation,
            origin: self.origin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub text: String,
    pub score: f64,
    pub generation: usize,
    pub origin: Origin,
}

/// Append-only history whose first record is the vanilla prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptHistory {
    records: Vec<PromptRecord>,
}

fn check_score(score: f64) -> Result<(), DapeError> {
    if score.is_finite() && (0.0..=1.0).contains(&score) {
        Ok(())
    } else {
        Err(DapeError::InvalidHistory(format!(
            "score {score} outside [0, 1]"
        )))
    }
}

impl PromptHistory {
    pub fn new(vanilla: PromptRecord) -> Result<Self, DapeError> {
        if vanilla.origin != Origin::Vanilla {
            return Err(DapeError::InvalidHistory(
                "first record must be the vanilla prompt".into(),
            ));
        }
        check_score(vanilla.score)?;
        Ok(Self {
            records: vec![vanilla],
        })
    }

    pub fn push(&mut self, record: PromptRecord) -> Result<(), DapeError> {
        if record.origin == Origin::Vanilla {
            return Err(DapeError::InvalidHistory(
                "history already has a vanilla record".into(),
            ));
        }
        check_score(record.score)?;
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[PromptRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn vanilla(&self) -> &PromptRecord {
        &self.records[0]
    }

    /// The reference threshold y*.
    pub fn baseline(&self) -> f64 {
        self.vanilla().score
    }

    /// Highest-scoring record; the earliest one wins ties.
    pub fn best(&self) -> &PromptRecord {
        self.records.iter().fold(&self.records[0], |best, r| {
            if r.score > best.score {
                r
            } else {
                best
            }
        })
    }

    /// Every record except the vanilla baseline.
    pub fn candidates(&self) -> &[PromptRecord] {
        &self.records[1..]
    }

    /// Indices sorted by score descending, ties in insertion order.
    fn ranked(&self, from: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (from..self.records.len()).collect();
        idx.sort_by(|&a, &b| self.records[b].score.total_cmp(&self.records[a].score));
        idx
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, DapeError> {
        Self::read(text.as_bytes())
    }

    pub fn read(reader: impl BufRead) -> Result<Self, DapeError> {
        let mut history: Option<PromptHistory> = None;
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: PromptRecord = serde_json::from_str(&line)
                .map_err(|e| DapeError::InvalidHistory(format!("line {}: {e}", n + 1)))?;
            match history.as_mut() {
                None => history = Some(PromptHistory::new(record)?),
                Some(h) => h.push(record)?,
            }
        }
        history.ok_or_else(|| DapeError::InvalidHistory("empty history".into()))
    }

    pub fn write(&self, mut writer: impl Write) -> Result<(), DapeError> {
        writer.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DapeError> {
        let file = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(file))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DapeError> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// Top-k by score, descending.
    pub success: Vec<PromptRecord>,
    /// Bottom-k by score, ascending.
    pub failure: Vec<PromptRecord>,
    pub k: usize,
    /// Every failure-bulk prompt beats the vanilla baseline.
    pub exploitative: bool,
}

impl Partition {
    pub fn mode(&self) -> MetaPromptKind {
        if self.exploitative {
            MetaPromptKind::Exploitative
        } else {
            MetaPromptKind::Contrastive
        }
    }
}

/// Dynamic window: `min(max(3, g/2 + 1), max(1, len/2))`.
pub fn window_size(generation: usize, history_len: usize) -> usize {
    (generation / 2 + 1)
        .max(MIN_WINDOW)
        .min((history_len / 2).max(1))
}

/// Split the candidate prompts into success tail and failure bulk.
///
/// The vanilla record is the baseline y* and is not itself ranked; were it
/// included, the failure bulk would always contain a score at or below y*
/// and the exploitative mode could never trigger.
///
/// Both sets come from one stable descending ranking: success is its first
/// `k` entries, failure its last `k`, so the two are disjoint whenever
/// `2k` does not exceed the candidate count. With all scores equal, success
/// holds the `k` earliest records and failure the `k` latest.
pub fn partition(history: &PromptHistory, k: usize) -> Result<Partition, DapeError> {
    let pool = history.candidates().len();
    if pool < 2 {
        return Err(DapeError::InsufficientHistory {
            needed: 2,
            found: pool,
        });
    }
    let k = k.clamp(1, pool);
    let ranked = history.ranked(1);
    let success: Vec<PromptRecord> = ranked[..k]
        .iter()
        .map(|&i| history.records[i].clone())
        .collect();
    let mut bottom: Vec<usize> = ranked[ranked.len() - k..].to_vec();
    bottom.sort_by(|&a, &b| {
        history.records[a]
            .score
            .total_cmp(&history.records[b].score)
            .then(a.cmp(&b))
    });
    let failure: Vec<PromptRecord> = bottom.iter().map(|&i| history.records[i].clone()).collect();
    let baseline = history.baseline();
    let exploitative = failure.iter().all(|r| r.score > baseline);
    Ok(Partition {
        success,
        failure,
        k,
        exploitative,
    })
}

fn format_entries(records: &[PromptRecord]) -> String {
    let mut out = String::new();
    for (i, r) in records.iter().enumerate() {
        let _ = write!(
            out,
            "\n{}. \"{}\" (score: {:.4})",
            i + 1,
            r.text.trim(),
            r.score
        );
    }
    out
}

/// Meta-prompt that asks for the initial variants of `vanilla`.
pub fn init_context(vanilla: &str) -> String {
    INIT_TEMPLATE.replace("[VANILLA_INSTRUCTION]", vanilla.trim())
}

/// Fill the refinement template for `mode` from a partition.
pub fn assemble_context(
    partition: &Partition,
    vanilla: &PromptRecord,
    mode: MetaPromptKind,
) -> String {
    let success = format_entries(&partition.success);
    let failure = format_entries(&partition.failure);
    match mode {
        MetaPromptKind::Init => init_context(&vanilla.text),
        MetaPromptKind::Contrastive => CONTRASTIVE_TEMPLATE
            .replace("[Success Tail]", &success)
            .replace("[Failure Bulk]", &failure),
        MetaPromptKind::Exploitative => {
            let base = format!(
                "\n\"{}\" (score: {:.4})",
                vanilla.text.trim(),
                vanilla.score
            );
            EXPLOITATIVE_TEMPLATE
                .replace("[Base Score & Text]", &base)
                .replace("[Top-k Variants & Scores]", &success)
                .replace("[Bottom-k Variants & Scores]", &failure)
        }
    }
}

/// Population standard deviation of the three best scores.
pub fn top3_std(history: &PromptHistory) -> Result<f64, DapeError> {
    if history.len() < 3 {
        return Err(DapeError::InsufficientHistory {
            needed: 3,
            found: history.len(),
        });
    }
    let top: Vec<f64> = history.ranked(0)[..3]
        .iter()
        .map(|&i| history.records[i].score)
        .collect();
    let mean = top.iter().sum::<f64>() / 3.0;
    Ok((top.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / 3.0).sqrt())
}

pub fn has_converged(history: &PromptHistory) -> Result<bool, DapeError> {
    Ok(top3_std(history)? < CONVERGENCE_STD)
}

/// Vanilla prompt plus the meta-optimizer's initial variants, all unscored.
/// Duplicate variants are kept as separate candidates.
pub fn seed_population(
    vanilla: &str,
    meta: &dyn MetaOptimizer,
) -> Result<Vec<PromptCandidate>, DapeError> {
    let variants = match meta.propose(MetaPromptKind::Init, &init_context(vanilla))? {
        Proposal::Variants(v) => v,
        Proposal::Improved(_) => {
            return Err(ClientError::VariantCountMismatch {
                expected: crate::lvlm_client::INIT_VARIANT_COUNT,
                found: 1,
            }
            .into())
        }
    };
    if variants.len() != crate::lvlm_client::INIT_VARIANT_COUNT {
        return Err(ClientError::VariantCountMismatch {
            expected: crate::lvlm_client::INIT_VARIANT_COUNT,
            found: variants.len(),
        }
        .into());
    }
    let mut out = vec![PromptCandidate {
        text: vanilla.to_string(),
        generation: 0,
        origin: Origin::Vanilla,
    }];
    out.extend(variants.into_iter().map(|text| PromptCandidate {
        text,
        generation: 0,
        origin: Origin::Seed,
    }));
    Ok(out)
}

/// Score a seeded population into a fresh history.
pub fn score_population<S>(
    candidates: Vec<PromptCandidate>,
    scorer: &mut S,
) -> Result<PromptHistory, DapeError>
where
    S: FnMut(&str) -> Result<f64, DapeError>,
{
    let mut iter = candidates.into_iter();
    let first = iter.next().ok_or(DapeError::InsufficientHistory {
        needed: 1,
        found: 0,
    })?;
    let score = scorer(&first.text)?;
    let mut history = PromptHistory::new(first.scored(score))?;
    for c in iter {
        let score = scorer(&c.text)?;
        history.push(c.scored(score))?;
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolveOutcome {
    pub best: PromptRecord,
    /// Generations in which a proposal was scored.
    pub generations_run: usize,
    /// Generation at whose start convergence was detected.
    pub converged_at: Option<usize>,
    /// Generations skipped after two failed proposals.
    pub skipped: Vec<usize>,
}

fn propose_once(
    meta: &dyn MetaOptimizer,
    mode: MetaPromptKind,
    context: &str,
) -> Result<String, ClientError> {
    match meta.propose(mode, context)? {
        Proposal::Improved(text) => Ok(text),
        Proposal::Variants(mut v) if v.len() == 1 => Ok(v.remove(0)),
        Proposal::Variants(v) => Err(ClientError::VariantCountMismatch {
            expected: 1,
            found: v.len(),
        }),
    }
}

/// Run up to `max_generations` refinement steps on `history`.
///
/// Convergence is checked at the start of every generation. A failed
/// proposal is retried once; if the retry fails too the generation is
/// skipped. Scorer errors abort the search.
pub fn evolve<S>(
    history: &mut PromptHistory,
    meta: &dyn MetaOptimizer,
    scorer: &mut S,
    max_generations: usize,
) -> Result<EvolveOutcome, DapeError>
where
    S: FnMut(&str) -> Result<f64, DapeError>,
{
    let mut converged_at = None;
    let mut generations_run = 0;
    let mut skipped = Vec::new();
    for g in 1..=max_generations {
        if history.len() >= 3 && has_converged(history)? {
            info!("prompt search converged before generation {g}");
            converged_at = Some(g);
            break;
        }
        let k = window_size(g, history.candidates().len());
        let part = partition(history, k)?;
        let mode = part.mode();
        let context = assemble_context(&part, history.vanilla(), mode);
        let proposal = propose_once(meta, mode, &context).or_else(|first| {
            warn!("generation {g}: proposal failed ({first}); retrying once");
            propose_once(meta, mode, &context)
        });
        let text = match proposal {
            Ok(text) => text,
            Err(e) => {
                warn!("generation {g}: proposal failed again ({e}); skipping");
                skipped.push(g);
                continue;
            }
        };
        let score = scorer(&text)?;
        info!("generation {g} ({mode:?}, k={k}): score {score:.4}");
        history.push(PromptRecord {
            text,
            score,
            generation: g,
            origin: Origin::Evolved,
        })?;
        generations_run += 1;
    }
    Ok(EvolveOutcome {
        best: history.best().clone(),
        generations_run,
        converged_at,
        skipped,
    })
}

/// Seed, score and evolve in one call.
pub fn run_dape<S>(
    vanilla: &str,
    meta: &dyn MetaOptimizer,
    scorer: &mut S,
    max_generations: usize,
) -> Result<(PromptHistory, EvolveOutcome), DapeError>
where
    S: FnMut(&str) -> Result<f64, DapeError>,
{
    let seeds = seed_population(vanilla, meta)?;
    let mut history = score_population(seeds, scorer)?;
    let outcome = evolve(&mut history, meta, scorer, max_generations)?;
    Ok((history, outcome))
}
