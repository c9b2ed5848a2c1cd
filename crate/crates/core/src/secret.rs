//! Secret formulas: boolean combinations of concepts.
//!
//! An attribute satisfies a formula when the formula evaluates to true with
//! every concept leaf replaced by "is the attribute related to this concept".
//! Formulas have a canonical prefix text form, e.g. `OR(yellow, NOT(wheel))`.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use fixedbitset::FixedBitSet;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::kb::{KbError, KnowledgeBase};

/// Truth table of a formula: bit `i` is set iff attribute `i` satisfies it.
pub type TruthTable = FixedBitSet;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SecretError {
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("invalid formula: {0}")]
    InvalidFormula(String),
    #[error("cannot parse formula at byte {position}: {message}")]
    Parse { position: usize, message: String },
    #[error("no balanced secret found after {attempts} candidates")]
    NoBalancedSecret { attempts: usize },
    #[error("enumeration would produce {count} formulas, cap is {cap}")]
    LimitsTooLarge { count: u128, cap: u128 },
    #[error("tolerance {0} outside [0, 0.5]")]
    InvalidTolerance(f64),
    #[error("invalid generation limits: {0}")]
    InvalidLimits(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SecretFormula {
    Concept(String),
    Not(Box<SecretFormula>),
    And(Box<SecretFormula>, Box<SecretFormula>),
    Or(Box<SecretFormula>, Box<SecretFormula>),
}

impl SecretFormula {
    pub fn concept(id: impl Into<String>) -> Self {
        Self::Concept(id.into())
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(inner: Self) -> Self {
        Self::Not(Box::new(inner))
    }

    pub fn and(left: Self, right: Self) -> Self {
        Self::And(Box::new(left), Box::new(right))
    }

    pub fn or(left: Self, right: Self) -> Self {
        Self::Or(Box::new(left), Box::new(right))
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            Self::Concept(_) => 1,
            Self::Not(f) => f.leaf_count(),
            Self::And(l, r) | Self::Or(l, r) => l.leaf_count() + r.leaf_count(),
        }
    }

    /// Depth with leaves at depth 0; each connective, NOT included, adds one.
    pub fn depth(&self) -> usize {
        match self {
            Self::Concept(_) => 0,
            Self::Not(f) => 1 + f.depth(),
            Self::And(l, r) | Self::Or(l, r) => 1 + l.depth().max(r.depth()),
        }
    }

    pub fn concepts(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.collect_concepts(&mut out);
        out
    }

    fn collect_concepts<'a>(&'a self, out: &mut BTreeSet<&'a str>) {
        match self {
            Self::Concept(c) => {
                out.insert(c);
            }
            Self::Not(f) => f.collect_concepts(out),
            Self::And(l, r) | Self::Or(l, r) => {
                l.collect_concepts(out);
                r.collect_concepts(out);
            }
        }
    }

    /// Checks the secret invariants against `kb`: every leaf is a known
    /// concept and at least two distinct concepts appear.
    pub fn validate(&self, kb: &KnowledgeBase) -> Result<(), SecretError> {
        let concepts = self.concepts();
        if let Some(missing) = concepts.iter().find(|c| !kb.has_concept(c)) {
            return Err(SecretError::InvalidFormula(format!("unknown concept `{missing}`")));
        }
        if concepts.len() < 2 {
            return Err(SecretError::InvalidFormula(
                "a secret needs at least two distinct concepts".into(),
            ));
        }
        Ok(())
    }

    /// Canonical text form.
    pub fn canonical(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for SecretFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Concept(c) => f.write_str(c),
            Self::Not(inner) => write!(f, "NOT({inner})"),
            Self::And(l, r) => write!(f, "AND({l}, {r})"),
            Self::Or(l, r) => write!(f, "OR({l}, {r})"),
        }
    }
}

impl FromStr for SecretFormula {
    type Err = SecretError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parser = Parser { input: s, pos: 0 };
        let formula = parser.formula()?;
        parser.skip_ws();
        if parser.pos != s.len() {
            return Err(parser.error("trailing input"));
        }
        Ok(formula)
    }
}

impl Serialize for SecretFormula {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SecretFormula {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

struct Parser<'a> {
    input: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> SecretError {
        SecretError::Parse { position: self.pos, message: message.to_owned() }
    }

    fn skip_ws(&mut self) {
        let rest = &self.input[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn peek(&self) -> Option<char> {
        self.input[self.pos..].chars().next()
    }

    fn expect(&mut self, ch: char) -> Result<(), SecretError> {
        self.skip_ws();
        if self.peek() == Some(ch) {
            self.pos += ch.len_utf8();
            Ok(())
        } else {
            Err(self.error(&format!("expected `{ch}`")))
        }
    }

    fn token(&mut self) -> &str {
        let start = self.pos;
        let rest = &self.input[start..];
        let len = rest
            .find(|c: char| c.is_whitespace() || matches!(c, '(' | ')' | ','))
            .unwrap_or(rest.len());
        self.pos += len;
        &self.input[start..start + len]
    }

    fn formula(&mut self) -> Result<SecretFormula, SecretError> {
        self.skip_ws();
        let start = self.pos;
        let token = self.token().to_owned();
        if token.is_empty() {
            self.pos = start;
            return Err(self.error("expected a concept or connective"));
        }
        let after_token = self.pos;
        self.skip_ws();
        let is_call = self.peek() == Some('(');
        match (token.as_str(), is_call) {
            ("NOT", true) => {
                self.expect('(')?;
                let inner = self.formula()?;
                self.expect(')')?;
                Ok(SecretFormula::not(inner))
            }
            ("AND" | "OR", true) => {
                self.expect('(')?;
                let left = self.formula()?;
                self.expect(',')?;
                let right = self.formula()?;
                self.expect(')')?;
                Ok(if token == "AND" {
                    SecretFormula::and(left, right)
                } else {
                    SecretFormula::or(left, right)
                })
            }
            (_, true) => Err(self.error(&format!("unknown connective `{token}`"))),
            (_, false) => {
                self.pos = after_token;
                Ok(SecretFormula::Concept(token))
            }
        }
    }
}

/// Whether `attribute` satisfies `secret`.
pub fn evaluate(kb: &KnowledgeBase, secret: &SecretFormula, attribute: &str) -> Result<bool, SecretError> {
    kb.attribute_index(attribute).map_err(|_| SecretError::UnknownAttribute(attribute.to_owned()))?;
    evaluate_inner(kb, secret, attribute)
}

fn evaluate_inner(kb: &KnowledgeBase, secret: &SecretFormula, attribute: &str) -> Result<bool, SecretError> {
    Ok(match secret {
        SecretFormula::Concept(c) => kb.is_related(attribute, c).map_err(|e| match e {
            KbError::UnknownId(id) => SecretError::InvalidFormula(format!("unknown concept `{id}`")),
            other => SecretError::InvalidFormula(other.to_string()),
        })?,
        SecretFormula::Not(f) => !evaluate_inner(kb, f, attribute)?,
        SecretFormula::And(l, r) => evaluate_inner(kb, l, attribute)? & evaluate_inner(kb, r, attribute)?,
        SecretFormula::Or(l, r) => evaluate_inner(kb, l, attribute)? | evaluate_inner(kb, r, attribute)?,
    })
}

/// Evaluates `secret` on every attribute at once using bitset algebra.
pub fn truth_table(kb: &KnowledgeBase, secret: &SecretFormula) -> Result<TruthTable, SecretError> {
    Ok(match secret {
        SecretFormula::Concept(c) => {
            let ci = kb
                .concept_index(c)
                .map_err(|_| SecretError::InvalidFormula(format!("unknown concept `{c}`")))?;
            kb.related_bits(ci).clone()
        }
        SecretFormula::Not(f) => negate(truth_table(kb, f)?),
        SecretFormula::And(l, r) => {
            let mut t = truth_table(kb, l)?;
            t.intersect_with(&truth_table(kb, r)?);
            t
        }
        SecretFormula::Or(l, r) => {
            let mut t = truth_table(kb, l)?;
            t.union_with(&truth_table(kb, r)?);
            t
        }
    })
}

fn negate(mut table: TruthTable) -> TruthTable {
    table.toggle_range(..);
    table
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub yes_count: usize,
    pub no_count: usize,
    pub yes_ratio: f64,
}

impl BalanceReport {
    fn from_table(table: &TruthTable) -> Self {
        let total = table.len();
        let yes_count = table.count_ones(..);
        let yes_ratio = if total == 0 { 0.0 } else { yes_count as f64 / total as f64 };
        Self { yes_count, no_count: total - yes_count, yes_ratio }
    }

    pub fn deviation(&self) -> f64 {
        (self.yes_ratio - 0.5).abs()
    }
}

pub fn balance(kb: &KnowledgeBase, secret: &SecretFormula) -> Result<BalanceReport, SecretError> {
    Ok(BalanceReport::from_table(&truth_table(kb, secret)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Negation {
    /// No NOT nodes.
    None,
    /// NOT only directly above a concept leaf.
    Literal,
    /// NOT above any subtree.
    Any,
}

/// Bounds on the formula grammar used for generation and enumeration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationLimits {
    pub min_leaves: usize,
    pub max_leaves: usize,
    pub max_depth: usize,
    pub allow_and: bool,
    pub allow_or: bool,
    pub negation: Negation,
}

impl Default for GenerationLimits {
    fn default() -> Self {
        Self {
            min_leaves: 2,
            max_leaves: 3,
            max_depth: 3,
            allow_and: true,
            allow_or: true,
            negation: Negation::Literal,
        }
    }
}

impl GenerationLimits {
    /// Exactly `leaves` leaves, the given connectives, no negation.
    pub fn exact(leaves: usize, allow_and: bool, allow_or: bool) -> Self {
        Self { min_leaves: leaves, max_leaves: leaves, max_depth: leaves, allow_and, allow_or, negation: Negation::None }
    }

    fn check(&self) -> Result<(), SecretError> {
        if self.min_leaves > self.max_leaves {
            return Err(SecretError::InvalidLimits("min_leaves > max_leaves".into()));
        }
        if !self.allow_and && !self.allow_or && self.max_leaves > 1 {
            return Err(SecretError::InvalidLimits("no binary connective allowed".into()));
        }
        Ok(())
    }

    fn connectives(&self) -> Vec<Connective> {
        let mut out = Vec::with_capacity(2);
        if self.allow_or {
            out.push(Connective::Or);
        }
        if self.allow_and {
            out.push(Connective::And);
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
enum Connective {
    And,
    Or,
}

impl Connective {
    fn build(self, l: SecretFormula, r: SecretFormula) -> SecretFormula {
        match self {
            Self::And => SecretFormula::and(l, r),
            Self::Or => SecretFormula::or(l, r),
        }
    }

    fn combine(self, l: &TruthTable, r: &TruthTable) -> TruthTable {
        let mut t = l.clone();
        match self {
            Self::And => t.intersect_with(r),
            Self::Or => t.union_with(r),
        }
        t
    }
}

/// Parameters for assigning a fresh secret at enrolment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecretRequest {
    pub limits: GenerationLimits,
    /// Maximum allowed |yes_ratio - 0.5|.
    pub tolerance: f64,
    /// Both the yes and the no side must hold at least this many attributes,
    /// normally the per-session challenge count.
    pub min_each: usize,
    /// Number of random candidates tried before giving up.
    pub search_budget: usize,
}

pub const DEFAULT_TOLERANCE: f64 = 0.05;
pub const DEFAULT_SEARCH_BUDGET: usize = 10_000;

impl SecretRequest {
    pub fn new(tolerance: f64, min_each: usize) -> Self {
        Self { limits: GenerationLimits::default(), tolerance, min_each, search_budget: DEFAULT_SEARCH_BUDGET }
    }

    pub fn accepts(&self, report: &BalanceReport) -> bool {
        report.deviation() <= self.tolerance
            && report.yes_count >= self.min_each
            && report.no_count >= self.min_each
    }
}

/// Draws random formulas within the limits until one is balanced.
///
/// Leaves use distinct concepts and negation is applied at literal level
/// (plus, under [`Negation::Any`], occasionally above a compound node).
pub fn generate_secret(kb: &KnowledgeBase, request: &SecretRequest, seed: u64) -> Result<SecretFormula, SecretError> {
    if !(0.0..=0.5).contains(&request.tolerance) {
        return Err(SecretError::InvalidTolerance(request.tolerance));
    }
    request.limits.check()?;
    let min_leaves = request.limits.min_leaves.max(2);
    let max_leaves = request.limits.max_leaves.min(kb.concept_count());
    if max_leaves < min_leaves || kb.is_empty() {
        return Err(SecretError::NoBalancedSecret { attempts: 0 });
    }
    let connectives = request.limits.connectives();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for _ in 0..request.search_budget {
        let leaves = rng.gen_range(min_leaves..=max_leaves);
        let picked = index::sample(&mut rng, kb.concept_count(), leaves).into_vec();
        let mut concepts = picked.into_iter().map(|i| kb.concepts()[i].id.clone());
        let candidate = random_tree(&mut rng, leaves, &connectives, request.limits.negation, &mut concepts);
        if candidate.depth() > request.limits.max_depth {
            continue;
        }
        let report = balance(kb, &candidate)?;
        if request.accepts(&report) {
            return Ok(candidate);
        }
    }
    Err(SecretError::NoBalancedSecret { attempts: request.search_budget })
}

fn random_tree(
    rng: &mut impl Rng,
    leaves: usize,
    connectives: &[Connective],
    negation: Negation,
    concepts: &mut impl Iterator<Item = String>,
) -> SecretFormula {
    if leaves == 1 {
        let leaf = SecretFormula::Concept(concepts.next().expect("one concept per leaf"));
        return if negation != Negation::None && rng.gen_bool(0.5) { SecretFormula::not(leaf) } else { leaf };
    }
    let split = rng.gen_range(1..leaves);
    let connective = connectives[rng.gen_range(0..connectives.len())];
    let left = random_tree(rng, split, connectives, negation, concepts);
    let right = random_tree(rng, leaves - split, connectives, negation, concepts);
    let node = connective.build(left, right);
    if negation == Negation::Any && rng.gen_bool(0.25) {
        SecretFormula::not(node)
    } else {
        node
    }
}

/// Default bound on the number of syntactic formulas an enumeration may visit.
pub const DEFAULT_ENUMERATION_CAP: u128 = 2_000_000;

/// A formula paired with its truth table over the knowledge base.
#[derive(Debug, Clone, PartialEq)]
pub struct TabledFormula {
    pub formula: SecretFormula,
    pub table: TruthTable,
}

/// Number of syntactic formulas (before dedup and the two-concept filter)
/// that [`enumerate_formulas`] would visit.
pub fn count_formulas(concepts: usize, limits: &GenerationLimits) -> u128 {
    let connectives = limits.connectives().len() as u128;
    let mut memo = HashMap::new();
    (limits.min_leaves.max(1)..=limits.max_leaves)
        .map(|k| count_trees(concepts as u128, connectives, limits.negation, k, limits.max_depth, &mut memo))
        .sum()
}

fn count_trees(
    concepts: u128,
    connectives: u128,
    negation: Negation,
    leaves: usize,
    depth: usize,
    memo: &mut HashMap<(usize, usize), u128>,
) -> u128 {
    if let Some(&n) = memo.get(&(leaves, depth)) {
        return n;
    }
    let n = if leaves == 1 {
        let mut n = concepts;
        if depth >= 1 {
            match negation {
                Negation::None => {}
                Negation::Literal => n += concepts,
                Negation::Any => n += count_trees(concepts, connectives, negation, 1, depth - 1, memo),
            }
        }
        n
    } else if depth == 0 {
        0
    } else {
        let mut binary = 0u128;
        for split in 1..leaves {
            let l = count_trees(concepts, connectives, negation, split, depth - 1, memo);
            let r = count_trees(concepts, connectives, negation, leaves - split, depth - 1, memo);
            binary = binary.saturating_add(connectives.saturating_mul(l).saturating_mul(r));
        }
        if negation == Negation::Any {
            binary.saturating_add(count_trees(concepts, connectives, negation, leaves, depth - 1, memo))
        } else {
            binary
        }
    };
    memo.insert((leaves, depth), n);
    n
}

/// Every formula within `limits` that uses at least two distinct concepts,
/// deduplicated by truth table over `kb`. The first formula visited in a
/// class is its representative; visiting order is deterministic (fewer
/// leaves first, then OR before AND, then concept file order).
pub fn enumerate_formulas(
    kb: &KnowledgeBase,
    limits: &GenerationLimits,
    cap: u128,
) -> Result<Vec<TabledFormula>, SecretError> {
    limits.check()?;
    let count = count_formulas(kb.concept_count(), limits);
    if count > cap {
        return Err(SecretError::LimitsTooLarge { count, cap });
    }
    let mut gen = Enumerator { kb, limits, connectives: limits.connectives(), memo: HashMap::new() };
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for leaves in limits.min_leaves.max(1)..=limits.max_leaves {
        for item in gen.trees(leaves, limits.max_depth).iter() {
            if item.formula.concepts().len() < 2 {
                continue;
            }
            if seen.insert(item.table.clone()) {
                out.push(item.clone());
            }
        }
    }
    Ok(out)
}

struct Enumerator<'a> {
    kb: &'a KnowledgeBase,
    limits: &'a GenerationLimits,
    connectives: Vec<Connective>,
    memo: HashMap<(usize, usize), std::rc::Rc<Vec<TabledFormula>>>,
}

impl Enumerator<'_> {
    fn trees(&mut self, leaves: usize, depth: usize) -> std::rc::Rc<Vec<TabledFormula>> {
        if let Some(v) = self.memo.get(&(leaves, depth)) {
            return v.clone();
        }
        let mut out = Vec::new();
        if leaves == 1 {
            for (ci, c) in self.kb.concepts().iter().enumerate() {
                out.push(TabledFormula {
                    formula: SecretFormula::Concept(c.id.clone()),
                    table: self.kb.related_bits(ci).clone(),
                });
            }
            if depth >= 1 {
                let inner: Vec<TabledFormula> = match self.limits.negation {
                    Negation::None => Vec::new(),
                    Negation::Literal => out.clone(),
                    Negation::Any => self.trees(1, depth - 1).to_vec(),
                };
                out.extend(inner.into_iter().map(|t| TabledFormula {
                    formula: SecretFormula::not(t.formula),
                    table: negate(t.table),
                }));
            }
        } else if depth >= 1 {
            for &connective in &self.connectives.clone() {
                for split in 1..leaves {
                    let left = self.trees(split, depth - 1);
                    let right = self.trees(leaves - split, depth - 1);
                    for l in left.iter() {
                        for r in right.iter() {
                            out.push(TabledFormula {
                                formula: connective.build(l.formula.clone(), r.formula.clone()),
                                table: connective.combine(&l.table, &r.table),
                            });
                        }
                    }
                }
            }
            if self.limits.negation == Negation::Any {
                let inner = self.trees(leaves, depth - 1);
                out.extend(inner.iter().map(|t| TabledFormula {
                    formula: SecretFormula::not(t.formula.clone()),
                    table: negate(t.table.clone()),
                }));
            }
        }
        let out = std::rc::Rc::new(out);
        self.memo.insert((leaves, depth), out.clone());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{Attribute, Concept};
    use proptest::prelude::*;

    fn kb_from(concepts: &[&str], attributes: &[&str], relations: &[(&str, &str)]) -> KnowledgeBase {
        KnowledgeBase::from_parts(
            concepts.iter().map(|c| Concept { id: (*c).into(), label: (*c).into() }).collect(),
            attributes.iter().map(|a| Attribute { id: (*a).into(), label: (*a).into() }).collect(),
            relations.iter().map(|(a, c)| ((*a).into(), (*c).into())).collect(),
        )
        .unwrap()
    }

    /// Reference evaluator that scans the raw relation list.
    fn brute(kb: &KnowledgeBase, f: &SecretFormula, attribute: &str) -> bool {
        match f {
            SecretFormula::Concept(c) => kb.relations().iter().any(|(a, cc)| a == attribute && cc == c),
            SecretFormula::Not(x) => !brute(kb, x, attribute),
            SecretFormula::And(l, r) => brute(kb, l, attribute) && brute(kb, r, attribute),
            SecretFormula::Or(l, r) => brute(kb, l, attribute) || brute(kb, r, attribute),
        }
    }

    fn p(s: &str) -> SecretFormula {
        s.parse().unwrap()
    }

    #[test]
    fn sunflower_examples() {
        let kb = kb_from(&["yellow", "wheel"], &["sunflower"], &[("sunflower", "yellow")]);
        assert!(evaluate(&kb, &p("OR(yellow, wheel)"), "sunflower").unwrap());
        assert!(!evaluate(&kb, &p("AND(yellow, wheel)"), "sunflower").unwrap());
        assert_eq!(
            evaluate(&kb, &p("OR(yellow, wheel)"), "steamroller"),
            Err(SecretError::UnknownAttribute("steamroller".into()))
        );
        assert!(matches!(evaluate(&kb, &p("OR(yellow, petrol)"), "sunflower"), Err(SecretError::InvalidFormula(_))));
    }

    #[test]
    fn negated_or_matches_brute_force_on_ten_attributes() {
        let attrs: Vec<String> = (0..10).map(|i| format!("a{i}")).collect();
        let names: Vec<&str> = attrs.iter().map(String::as_str).collect();
        let rels = [("a0", "yellow"), ("a1", "yellow"), ("a1", "wheel"), ("a3", "wheel"), ("a5", "yellow"), ("a7", "wheel"), ("a9", "yellow")];
        let kb = kb_from(&["yellow", "wheel"], &names, &rels);
        let f = SecretFormula::or(SecretFormula::not(SecretFormula::concept("yellow")), SecretFormula::concept("wheel"));
        let table = truth_table(&kb, &f).unwrap();
        for (i, a) in names.iter().enumerate() {
            let expected = brute(&kb, &f, a);
            assert_eq!(evaluate(&kb, &f, a).unwrap(), expected, "{a}");
            assert_eq!(table.contains(i), expected, "{a}");
        }
    }

    #[test]
    fn balance_counts() {
        let kb = kb_from(&["x", "y"], &["a", "b", "c", "d"], &[("a", "x"), ("b", "y"), ("c", "x"), ("c", "y")]);
        let half = balance(&kb, &p("AND(x, NOT(y))")).unwrap();
        assert_eq!((half.yes_count, half.no_count), (1, 3));
        let two = balance(&kb, &p("AND(OR(x, y), NOT(AND(x, y)))")).unwrap();
        assert_eq!(two.yes_ratio, 0.5);
        let all = balance(&kb, &p("OR(x, NOT(y))")).unwrap();
        assert_eq!(all.yes_count + all.no_count, 4);
        let everything = balance(&kb, &p("OR(OR(x, y), NOT(x))")).unwrap();
        assert_eq!(everything.yes_ratio, 1.0);
    }

    #[test]
    fn bundled_demo_secret_balance() {
        let kb = crate::kb::bundled();
        let secret = p(crate::DEMO_SECRET);
        secret.validate(&kb).unwrap();
        let yes = kb.attributes().iter().filter(|a| brute(&kb, &secret, &a.id)).count();
        let report = balance(&kb, &secret).unwrap();
        assert_eq!(report.yes_count, yes);
        assert_eq!(report.no_count, kb.attribute_count() - yes);
        assert_eq!(report.yes_ratio, yes as f64 / kb.attribute_count() as f64);
    }

    #[test]
    fn generate_meets_tolerance_on_bundled() {
        let kb = crate::kb::bundled();
        let request = SecretRequest::new(0.05, 25);
        for seed in 0..20 {
            let s = generate_secret(&kb, &request, seed).unwrap();
            s.validate(&kb).unwrap();
            let r = balance(&kb, &s).unwrap();
            assert!(r.deviation() <= 0.05 && r.yes_count >= 25 && r.no_count >= 25, "{s}: {r:?}");
            assert!(s.depth() <= 3 && (2..=3).contains(&s.leaf_count()));
        }
        assert_eq!(generate_secret(&kb, &request, 7).unwrap(), generate_secret(&kb, &request, 7).unwrap());
    }

    #[test]
    fn vacuous_tolerance_succeeds() {
        let kb = kb_from(&["x", "y"], &["a", "b"], &[("a", "x")]);
        let request = SecretRequest::new(0.5, 1);
        for seed in 0..10 {
            let s = generate_secret(&kb, &request, seed).unwrap();
            let r = balance(&kb, &s).unwrap();
            assert_eq!((r.yes_count, r.no_count), (1, 1));
        }
    }

    #[test]
    fn all_related_kb_has_no_balanced_secret() {
        let attrs = ["a", "b", "c", "d"];
        let rels: Vec<(&str, &str)> = attrs.iter().flat_map(|a| [(*a, "x"), (*a, "y"), (*a, "z")]).collect();
        let kb = kb_from(&["x", "y", "z"], &attrs, &rels);
        let err = generate_secret(&kb, &SecretRequest::new(0.1, 1), 3).unwrap_err();
        assert_eq!(err, SecretError::NoBalancedSecret { attempts: DEFAULT_SEARCH_BUDGET });
    }

    #[test]
    fn rejects_bad_tolerance() {
        let kb = crate::kb::toy();
        assert!(matches!(generate_secret(&kb, &SecretRequest::new(0.6, 1), 0), Err(SecretError::InvalidTolerance(_))));
    }

    #[test]
    fn enumerate_two_concepts_two_leaves() {
        let kb = kb_from(&["c1", "c2"], &["a", "b", "c", "d"], &[("a", "c1"), ("b", "c2"), ("c", "c1"), ("c", "c2")]);
        let found = enumerate_formulas(&kb, &GenerationLimits::exact(2, true, true), DEFAULT_ENUMERATION_CAP).unwrap();
        let texts: Vec<String> = found.iter().map(|t| t.formula.canonical()).collect();
        assert_eq!(texts, ["OR(c1, c2)", "AND(c1, c2)"]);
    }

    #[test]
    fn enumerate_single_concept_is_empty() {
        let kb = kb_from(&["c1"], &["a", "b"], &[("a", "c1")]);
        assert!(enumerate_formulas(&kb, &GenerationLimits::default(), DEFAULT_ENUMERATION_CAP).unwrap().is_empty());
    }

    #[test]
    fn commuted_or_collapses() {
        let kb = kb_from(&["c1", "c2"], &["a", "b", "c"], &[("a", "c1"), ("b", "c2")]);
        let found = enumerate_formulas(&kb, &GenerationLimits::exact(2, false, true), DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].formula, p("OR(c1, c2)"));
    }

    #[test]
    fn enumeration_cap() {
        let kb = crate::kb::bundled();
        let err = enumerate_formulas(&kb, &GenerationLimits::default(), 1_000).unwrap_err();
        assert!(matches!(err, SecretError::LimitsTooLarge { cap: 1_000, .. }));
    }

    /// Independent syntactic enumeration used to check completeness and the
    /// formula count.
    fn all_syntactic(concepts: &[String], limits: &GenerationLimits, leaves: usize, depth: usize) -> Vec<SecretFormula> {
        let mut out = Vec::new();
        if leaves == 1 {
            out.extend(concepts.iter().map(|c| SecretFormula::concept(c.clone())));
            if depth >= 1 {
                match limits.negation {
                    Negation::None => {}
                    Negation::Literal => out.extend(concepts.iter().map(|c| SecretFormula::not(SecretFormula::concept(c.clone())))),
                    Negation::Any => out.extend(all_syntactic(concepts, limits, 1, depth - 1).into_iter().map(SecretFormula::not)),
                }
            }
            return out;
        }
        if depth == 0 {
            return out;
        }
        for split in 1..leaves {
            for l in all_syntactic(concepts, limits, split, depth - 1) {
                for r in all_syntactic(concepts, limits, leaves - split, depth - 1) {
                    if limits.allow_and {
                        out.push(SecretFormula::and(l.clone(), r.clone()));
                    }
                    if limits.allow_or {
                        out.push(SecretFormula::or(l.clone(), r.clone()));
                    }
                }
            }
        }
        if limits.negation == Negation::Any {
            out.extend(all_syntactic(concepts, limits, leaves, depth - 1).into_iter().map(SecretFormula::not));
        }
        out
    }

    #[test]
    fn enumeration_is_complete_and_deduplicated() {
        let kb = crate::kb::toy();
        let ids: Vec<String> = kb.concepts().iter().map(|c| c.id.clone()).collect();
        let limit_sets = [
            GenerationLimits::default(),
            GenerationLimits::exact(2, true, true),
            GenerationLimits { negation: Negation::Any, max_depth: 3, ..GenerationLimits::default() },
        ];
        for limits in limit_sets {
            let found = enumerate_formulas(&kb, &limits, DEFAULT_ENUMERATION_CAP).unwrap();
            let tables: HashSet<Vec<bool>> = found
                .iter()
                .map(|t| kb.attributes().iter().map(|a| brute(&kb, &t.formula, &a.id)).collect())
                .collect();
            assert_eq!(tables.len(), found.len(), "duplicate truth tables under {limits:?}");

            let mut syntactic = 0u128;
            for leaves in limits.min_leaves..=limits.max_leaves {
                let formulas = all_syntactic(&ids, &limits, leaves, limits.max_depth);
                syntactic += formulas.len() as u128;
                for f in formulas.into_iter().filter(|f| f.concepts().len() >= 2) {
                    let t: Vec<bool> = kb.attributes().iter().map(|a| brute(&kb, &f, &a.id)).collect();
                    assert!(tables.contains(&t), "{f} not represented under {limits:?}");
                }
            }
            assert_eq!(count_formulas(kb.concept_count(), &limits), syntactic);
        }
    }

    #[test]
    fn parse_errors() {
        for bad in ["", "OR(a)", "OR(a, b", "XOR(a, b)", "a b", "NOT(a, b)", "(a)"] {
            assert!(matches!(bad.parse::<SecretFormula>(), Err(SecretError::Parse { .. })), "{bad:?}");
        }
        assert_eq!(p("  OR( a ,NOT(b) ) "), SecretFormula::or(SecretFormula::concept("a"), SecretFormula::not(SecretFormula::concept("b"))));
        // Connective names are plain concepts unless followed by `(`.
        assert_eq!(p("AND(OR, NOT)"), SecretFormula::and(SecretFormula::concept("OR"), SecretFormula::concept("NOT")));
    }

    #[test]
    fn validate_requires_two_distinct_known_concepts() {
        let kb = crate::kb::toy();
        assert!(p("OR(yellow, yellow)").validate(&kb).is_err());
        assert!(p("OR(yellow, petrol)").validate(&kb).is_err());
        p("AND(yellow, NOT(wheel))").validate(&kb).unwrap();
    }

    fn formula_strategy(concepts: Vec<String>) -> impl Strategy<Value = SecretFormula> {
        let leaf = proptest::sample::select(concepts).prop_map(SecretFormula::Concept);
        leaf.prop_recursive(4, 16, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(SecretFormula::not),
                (inner.clone(), inner.clone()).prop_map(|(l, r)| SecretFormula::and(l, r)),
                (inner.clone(), inner).prop_map(|(l, r)| SecretFormula::or(l, r)),
            ]
        })
    }

    fn toy_formula() -> impl Strategy<Value = SecretFormula> {
        formula_strategy(crate::kb::toy().concepts().iter().map(|c| c.id.clone()).collect())
    }

    proptest! {
        #[test]
        fn text_round_trip(f in toy_formula()) {
            prop_assert_eq!(f.canonical().parse::<SecretFormula>().unwrap(), f);
        }

        #[test]
        fn connectives_follow_boolean_semantics(l in toy_formula(), r in toy_formula()) {
            let kb = crate::kb::toy();
            for a in kb.attributes() {
                let lv = evaluate(&kb, &l, &a.id).unwrap();
                let rv = evaluate(&kb, &r, &a.id).unwrap();
                prop_assert_eq!(evaluate(&kb, &SecretFormula::not(l.clone()), &a.id).unwrap(), !lv);
                prop_assert_eq!(evaluate(&kb, &SecretFormula::and(l.clone(), r.clone()), &a.id).unwrap(), lv && rv);
                prop_assert_eq!(evaluate(&kb, &SecretFormula::or(l.clone(), r.clone()), &a.id).unwrap(), lv || rv);
                prop_assert_eq!(lv, brute(&kb, &l, &a.id));
            }
        }

        #[test]
        fn generated_secrets_verify(seed in any::<u64>(), tolerance in 0.02f64..0.5) {
            let kb = crate::kb::bundled();
            let request = SecretRequest::new(tolerance, 10);
            let s = generate_secret(&kb, &request, seed).unwrap();
            prop_assert!(request.accepts(&balance(&kb, &s).unwrap()));
            prop_assert_eq!(s.clone(), generate_secret(&kb, &request, seed).unwrap());
        }
    }
}
