//! Rate-limiting rules: declarative configs compiled into per-message
//! `(digest, period, limit)` triples, canonical basenames, and the client's
//! per-pre-basename quota bookkeeping.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::ops::RangeInclusive;

use rand_core::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::fpe::{FpeCipher, FpeKey};

/// Period used for rules with no time component.
pub const INFINITE_PERIOD: u64 = 1 << 50;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuleError {
    #[error("ruleset document does not parse: {0}")]
    Parse(String),
    #[error("invalid ruleset (rules: {}): {}", rule_ids.join(", "), problems.join("; "))]
    Invalid { rule_ids: Vec<String>, problems: Vec<String> },
    #[error("message is not a JSON object")]
    NotAnObject,
    #[error("rule {rule}: message field {field:?} missing or not a scalar")]
    MissingField { rule: String, field: String },
    #[error("quota exceeded for rule {rule}")]
    QuotaExceeded { rule: String },
    #[error("malformed basename {0:?}")]
    BadBasename(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalizer {
    Identity,
    Lowercase,
    Trim,
    Query,
}

impl Normalizer {
    pub fn apply(self, s: &str) -> String {
        match self {
            Normalizer::Identity => s.to_owned(),
            Normalizer::Lowercase => s.to_lowercase(),
            Normalizer::Trim => s.trim().to_owned(),
            Normalizer::Query => normalize_query(s),
        }
    }
}

/// Lowercases, collapses whitespace, drops a trailing plural `s` from each
/// token, and sorts the tokens.
pub fn normalize_query(s: &str) -> String {
    let mut tokens: Vec<String> = s.split_whitespace().map(|t| singular(&t.to_lowercase())).collect();
    tokens.sort_unstable();
    tokens.join(" ")
}

fn singular(token: &str) -> String {
    let keep = token.chars().count() <= 3
        || !token.ends_with('s')
        || ["ss", "us", "is"].iter().any(|suffix| token.ends_with(suffix));
    if keep {
        token.to_owned()
    } else {
        token[..token.len() - 1].to_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PeriodDoc {
    Seconds(u64),
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Limit {
    Fixed(u64),
    /// Picks the limit from `cases` by the string value of `field`.
    Switch {
        field: String,
        cases: BTreeMap<String, u64>,
        default: u64,
    },
}

impl Limit {
    fn for_message(&self, m: &serde_json::Map<String, Value>) -> u64 {
        match self {
            Limit::Fixed(n) => *n,
            Limit::Switch { field, cases, default } => {
                m.get(field).and_then(scalar_text).and_then(|v| cases.get(&v).copied()).unwrap_or(*default)
            }
        }
    }

    fn values(&self) -> Vec<u64> {
        match self {
            Limit::Fixed(n) => vec![*n],
            Limit::Switch { cases, default, .. } => cases.values().copied().chain(std::iter::once(*default)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleDocument {
    pub id: String,
    pub digest_prefix: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest_field: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalizer: Option<Normalizer>,
    pub period_seconds: PeriodDoc,
    pub limit: Limit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSetDocument {
    pub version: String,
    pub rules: Vec<RuleDocument>,
}

/// A validated rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleSpec {
    pub id: String,
    pub digest_prefix: String,
    pub digest_field: Option<String>,
    pub normalizer: Option<Normalizer>,
    pub period_seconds: u64,
    pub limit: Limit,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleEval {
    pub digest: String,
    pub period_index: u64,
    pub limit: u64,
}

impl RuleSpec {
    pub fn eval(&self, m: &Value, t: u64) -> Result<RuleEval, RuleError> {
        let obj = m.as_object().ok_or(RuleError::NotAnObject)?;
        let digest = match &self.digest_field {
            None => self.digest_prefix.clone(),
            Some(field) => {
                let raw = obj
                    .get(field)
                    .and_then(scalar_text)
                    .ok_or_else(|| RuleError::MissingField { rule: self.id.clone(), field: field.clone() })?;
                let value = self.normalizer.unwrap_or(Normalizer::Identity).apply(&raw);
                format!("{}|{}", self.digest_prefix, value)
            }
        };
        Ok(RuleEval { digest, period_index: t / self.period_seconds, limit: self.limit.for_message(obj) })
    }

    /// Period indices reachable from `now` under a ±`window` clock skew.
    pub fn accepted_periods(&self, now: u64, window: u64) -> RangeInclusive<u64> {
        now.saturating_sub(window) / self.period_seconds..=now.saturating_add(window) / self.period_seconds
    }
}

fn scalar_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

pub fn eval_rule(rule: &RuleSpec, m: &Value, t: u64) -> Result<RuleEval, RuleError> {
    rule.eval(m, t)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleSet {
    pub version: String,
    pub rules: Vec<RuleSpec>,
}

impl RuleSet {
    pub fn from_document(doc: RuleSetDocument) -> Result<Self, RuleError> {
        let mut problems = Vec::new();
        let mut offenders = Vec::new();
        if doc.rules.is_empty() {
            problems.push("ruleset has no rules".to_owned());
        }
        let mut ids = HashSet::new();
        let mut prefixes = HashSet::new();
        let mut rules = Vec::with_capacity(doc.rules.len());
        for r in doc.rules {
            let mut bad = |p: String| {
                problems.push(format!("{}: {}", r.id, p));
                offenders.push(r.id.clone());
            };
            if r.id.is_empty() {
                bad("empty rule id".into());
            }
            if !ids.insert(r.id.clone()) {
                bad("duplicate rule id".into());
            }
            if r.digest_prefix.is_empty() {
                bad("empty digest prefix".into());
            } else if !prefixes.insert(r.digest_prefix.clone()) {
                bad(format!("duplicate digest prefix {:?}", r.digest_prefix));
            }
            if r.limit.values().contains(&0) {
                bad("limit must be at least 1".into());
            }
            let period = match &r.period_seconds {
                PeriodDoc::Seconds(0) => {
                    bad("period must be at least 1 second".into());
                    1
                }
                PeriodDoc::Seconds(s) => *s,
                PeriodDoc::Named(n) if n == "infinite" => INFINITE_PERIOD,
                PeriodDoc::Named(n) => {
                    bad(format!("unknown period {n:?}"));
                    1
                }
            };
            rules.push(RuleSpec {
                id: r.id,
                digest_prefix: r.digest_prefix,
                digest_field: r.digest_field,
                normalizer: r.normalizer,
                period_seconds: period,
                limit: r.limit,
            });
        }
        if problems.is_empty() {
            Ok(Self { version: doc.version, rules })
        } else {
            offenders.dedup();
            Err(RuleError::Invalid { rule_ids: offenders, problems })
        }
    }

    /// Rules must reset within one group-key lifetime when keys rotate.
    /// Every finite period must be shorter than the group key lifetime. An
    /// infinite period is exempt; its quota is then scoped to one key epoch.
    pub fn check_key_lifetime(&self, lifetime_secs: u64) -> Result<(), RuleError> {
        let offenders: Vec<String> = self
            .rules
            .iter()
            .filter(|r| r.period_seconds != INFINITE_PERIOD && r.period_seconds >= lifetime_secs)
            .map(|r| r.id.clone())
            .collect();
        if offenders.is_empty() {
            Ok(())
        } else {
            Err(RuleError::Invalid {
                problems: vec![format!("period not shorter than key lifetime {lifetime_secs}s")],
                rule_ids: offenders,
            })
        }
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

/// Parses and validates a JSON ruleset document.
pub fn compile_ruleset(config: &str) -> Result<RuleSet, RuleError> {
    let doc: RuleSetDocument = serde_json::from_str(config).map_err(|e| RuleError::Parse(e.to_string()))?;
    RuleSet::from_document(doc)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PreBasename {
    pub digest: String,
    pub period_index: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Basename {
    pub digest: String,
    pub period_index: u64,
    pub nonce: u64,
}

impl Basename {
    /// `v1|<digest>|<period>|<nonce>`
    pub fn canonical(&self) -> String {
        format!("v1|{}|{}|{}", self.digest, self.period_index, self.nonce)
    }

    pub fn parse(s: &str) -> Result<Self, RuleError> {
        let bad = || RuleError::BadBasename(s.to_owned());
        let rest = s.strip_prefix("v1|").ok_or_else(bad)?;
        let mut it = rest.rsplitn(3, '|');
        let nonce = it.next().ok_or_else(bad)?;
        let period = it.next().ok_or_else(bad)?;
        let digest = it.next().ok_or_else(bad)?;
        let number = |t: &str| -> Result<u64, RuleError> {
            if t.is_empty() || !t.bytes().all(|b| b.is_ascii_digit()) || (t.len() > 1 && t.starts_with('0')) {
                return Err(bad());
            }
            t.parse().map_err(|_| bad())
        };
        Ok(Self { digest: digest.to_owned(), period_index: number(period)?, nonce: number(nonce)? })
    }

    pub fn pre_basename(&self) -> PreBasename {
        PreBasename { digest: self.digest.clone(), period_index: self.period_index }
    }
}

impl fmt::Display for Basename {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagEntry {
    pub key: FpeKey,
    pub used: u64,
}

/// Per-pre-basename nonce key and use count. Cleared on user key rotation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<(PreBasename, TagEntry)>", into = "Vec<(PreBasename, TagEntry)>")]
pub struct ClientTagState {
    entries: HashMap<PreBasename, TagEntry>,
}

impl From<Vec<(PreBasename, TagEntry)>> for ClientTagState {
    fn from(v: Vec<(PreBasename, TagEntry)>) -> Self {
        Self { entries: v.into_iter().collect() }
    }
}

impl From<ClientTagState> for Vec<(PreBasename, TagEntry)> {
    fn from(s: ClientTagState) -> Self {
        let mut v: Vec<_> = s.entries.into_iter().collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }
}

impl ClientTagState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn used(&self, pre: &PreBasename) -> u64 {
        self.entries.get(pre).map_or(0, |e| e.used)
    }

    pub fn get(&self, pre: &PreBasename) -> Option<&TagEntry> {
        self.entries.get(pre)
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Evaluates every rule and checks the message is well-formed for all of them.
pub fn eval_all(rs: &RuleSet, m: &Value, t: u64) -> Result<Vec<RuleEval>, RuleError> {
    rs.rules.iter().map(|r| r.eval(m, t)).collect()
}

/// Builds one fresh basename per rule. Counters advance only when every
/// rule still has quota; on `QuotaExceeded` the state is untouched.
pub fn build_basenames<R: RngCore + CryptoRng>(
    rs: &RuleSet,
    m: &Value,
    t: u64,
    state: &mut ClientTagState,
    rng: &mut R,
) -> Result<Vec<Basename>, RuleError> {
    let evals = eval_all(rs, m, t)?;
    let pres: Vec<PreBasename> =
        evals.iter().map(|e| PreBasename { digest: e.digest.clone(), period_index: e.period_index }).collect();
    for ((rule, eval), pre) in rs.rules.iter().zip(&evals).zip(&pres) {
        if state.used(pre) >= eval.limit {
            return Err(RuleError::QuotaExceeded { rule: rule.id.clone() });
        }
    }
    let mut out = Vec::with_capacity(evals.len());
    for (eval, pre) in evals.into_iter().zip(pres) {
        let entry = state.entries.entry(pre).or_insert_with(|| TagEntry { key: FpeKey::generate(rng), used: 0 });
        let nonce = FpeCipher::new(&entry.key).encrypt(eval.limit, entry.used).expect("used < limit checked above");
        entry.used += 1;
        out.push(Basename { digest: eval.digest, period_index: eval.period_index, nonce });
    }
    Ok(out)
}
