//! Chemical formula parsing into compositions.
//!
//! Grammar: a sequence of element symbols and bracketed groups, each with an
//! optional integer or decimal multiplier. `()` and `[]` both group.
//! Amounts are kept as exact rationals; any amount whose reduced denominator
//! exceeds [`MAX_DENOMINATOR`] is rounded to the nearest multiple of 1/10^6.

use std::collections::BTreeMap;
use std::fmt;

use num_integer::Integer;
use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::elements::{self, N_ELEMENTS};

pub type Amount = Ratio<i128>;

pub const MAX_DENOMINATOR: i128 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormulaError {
    #[error("empty formula")]
    Empty,
    #[error("unknown element symbol `{token}` at position {position}")]
    UnknownElement { token: String, position: usize },
    #[error("unbalanced parenthesis `{token}` at position {position}")]
    UnbalancedParenthesis { token: String, position: usize },
    #[error("invalid number `{token}` at position {position}")]
    InvalidNumber { token: String, position: usize },
    #[error("unexpected character `{token}` at position {position}")]
    UnexpectedCharacter { token: String, position: usize },
    #[error("formula `{token}` has zero total atom count")]
    ZeroTotal { token: String },
}

impl FormulaError {
    /// The offending token named by the error.
    pub fn token(&self) -> &str {
        match self {
            FormulaError::Empty => "",
            FormulaError::UnknownElement { token, .. }
            | FormulaError::UnbalancedParenthesis { token, .. }
            | FormulaError::InvalidNumber { token, .. }
            | FormulaError::UnexpectedCharacter { token, .. }
            | FormulaError::ZeroTotal { token } => token,
        }
    }
}

/// A parsed chemical formula: exact amounts per element plus the dense
/// fraction vector indexed by atomic number − 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Composition {
    formula: String,
    amounts: BTreeMap<u8, Amount>,
    vector: Vec<f64>,
}

impl TryFrom<String> for Composition {
    type Error = FormulaError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        parse_formula(&value)
    }
}

impl From<Composition> for String {
    fn from(value: Composition) -> Self {
        value.formula
    }
}

impl fmt::Display for Composition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.formula)
    }
}

impl Composition {
    fn from_amounts(formula: String, amounts: BTreeMap<u8, Amount>) -> Result<Self, FormulaError> {
        let amounts: BTreeMap<u8, Amount> = amounts
            .into_iter()
            .filter(|(_, a)| *a != Amount::from_integer(0))
            .collect();
        let total: Amount = amounts.values().copied().sum();
        if total <= Amount::from_integer(0) {
            return Err(FormulaError::ZeroTotal { token: formula });
        }
        let mut vector = vec![0.0; N_ELEMENTS];
        for (&z, &a) in &amounts {
            vector[z as usize - 1] = ratio_to_f64(a / total);
        }
        Ok(Composition {
            formula,
            amounts,
            vector,
        })
    }

    /// The formula string this composition was parsed from.
    pub fn formula(&self) -> &str {
        &self.formula
    }

    /// Exact element amounts keyed by symbol, in ascending atomic number.
    pub fn amounts(&self) -> impl Iterator<Item = (&'static str, Amount)> + '_ {
        self.amounts
            .iter()
            .map(|(&z, &a)| (elements::symbol(z).expect("valid atomic number"), a))
    }

    pub fn amount(&self, symbol: &str) -> Option<Amount> {
        let z = elements::atomic_number(symbol)?;
        self.amounts.get(&z).copied()
    }

    /// Atomic numbers present, ascending.
    pub fn atomic_numbers(&self) -> impl Iterator<Item = u8> + '_ {
        self.amounts.keys().copied()
    }

    /// Element symbols present, ascending by atomic number.
    pub fn elements(&self) -> Vec<&'static str> {
        self.amounts().map(|(s, _)| s).collect()
    }

    /// Fraction vector of length 118.
    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn fraction(&self, symbol: &str) -> f64 {
        elements::atomic_number(symbol)
            .map(|z| self.vector[z as usize - 1])
            .unwrap_or(0.0)
    }

    pub fn n_elements(&self) -> usize {
        self.amounts.len()
    }

    pub fn total_atoms(&self) -> Amount {
        self.amounts.values().copied().sum()
    }

    /// Exact formula string: symbols in alphabetical order, amounts written
    /// as exact decimals. Re-parsing it yields identical amounts.
    pub fn to_formula(&self) -> String {
        let mut parts: Vec<(&str, Amount)> = self.amounts().collect();
        parts.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (sym, a) in parts {
            out.push_str(sym);
            if a != Amount::from_integer(1) {
                out.push_str(&format_amount(a));
            }
        }
        out
    }

    /// Canonical identity used for precursors: symbols in alphabetical
    /// order, counts scaled to the smallest integer ratio.
    pub fn canonical_formula(&self) -> String {
        let lcm = self
            .amounts
            .values()
            .fold(1i128, |acc, a| acc.lcm(a.denom()));
        let ints: Vec<i128> = self
            .amounts
            .values()
            .map(|a| (a * Amount::from_integer(lcm)).to_integer())
            .collect();
        let gcd = ints.iter().fold(0i128, |acc, n| acc.gcd(n)).max(1);
        let mut parts: Vec<(&str, i128)> = self
            .amounts
            .keys()
            .zip(ints)
            .map(|(&z, n)| (elements::symbol(z).expect("valid atomic number"), n / gcd))
            .collect();
        parts.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (sym, n) in parts {
            out.push_str(sym);
            if n != 1 {
                out.push_str(&n.to_string());
            }
        }
        out
    }
}

fn ratio_to_f64(r: Amount) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn format_amount(a: Amount) -> String {
    if a.is_integer() {
        return a.to_integer().to_string();
    }
    // Denominators are products of 2s and 5s, so the expansion terminates.
    let mut scale = 1i128;
    let mut digits = 0;
    while (scale % a.denom()) != 0 && digits < 18 {
        scale *= 10;
        digits += 1;
    }
    let scaled = (a * Amount::from_integer(scale)).round().to_integer();
    let int_part = scaled / scale;
    let frac_part = scaled % scale;
    let frac = format!("{:0width$}", frac_part, width = digits);
    format!("{}.{}", int_part, frac.trim_end_matches('0'))
}

fn cap(a: Amount) -> Amount {
    if *a.denom() <= MAX_DENOMINATOR {
        a
    } else {
        let scaled = (a * Amount::from_integer(MAX_DENOMINATOR)).round();
        scaled / Amount::from_integer(MAX_DENOMINATOR)
    }
}

struct Parser<'a> {
    src: &'a str,
    chars: Vec<(usize, char)>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).map(|&(_, c)| c)
    }

    fn offset(&self) -> usize {
        self.chars
            .get(self.pos)
            .map(|&(i, _)| i)
            .unwrap_or(self.src.len())
    }

    fn group(&mut self, opener: Option<(char, usize)>) -> Result<BTreeMap<u8, Amount>, FormulaError> {
        let mut acc: BTreeMap<u8, Amount> = BTreeMap::new();
        loop {
            let Some(c) = self.peek() else {
                if let Some((open, position)) = opener {
                    return Err(FormulaError::UnbalancedParenthesis {
                        token: open.to_string(),
                        position,
                    });
                }
                return Ok(acc);
            };
            match c {
                'A'..='Z' => {
                    let start = self.offset();
                    self.pos += 1;
                    if matches!(self.peek(), Some('a'..='z')) {
                        self.pos += 1;
                    }
                    let end = self.offset();
                    let token = &self.src[start..end];
                    let z = elements::atomic_number(token).ok_or_else(|| {
                        FormulaError::UnknownElement {
                            token: token.to_string(),
                            position: start,
                        }
                    })?;
                    let count = self.number()?.unwrap_or(Amount::from_integer(1));
                    let entry = acc.entry(z).or_insert(Amount::from_integer(0));
                    *entry = cap(*entry + count);
                }
                '(' | '[' => {
                    let position = self.offset();
                    self.pos += 1;
                    let inner = self.group(Some((c, position)))?;
                    let mult = self.number()?.unwrap_or(Amount::from_integer(1));
                    for (z, a) in inner {
                        let entry = acc.entry(z).or_insert(Amount::from_integer(0));
                        *entry = cap(*entry + a * mult);
                    }
                }
                ')' | ']' => {
                    let position = self.offset();
                    let expected = match c {
                        ')' => '(',
                        _ => '[',
                    };
                    match opener {
                        Some((open, _)) if open == expected => {
                            self.pos += 1;
                            return Ok(acc);
                        }
                        _ => {
                            return Err(FormulaError::UnbalancedParenthesis {
                                token: c.to_string(),
                                position,
                            })
                        }
                    }
                }
                '0'..='9' | '.' => {
                    let position = self.offset();
                    let token = self.number_token();
                    return Err(FormulaError::InvalidNumber {
                        token: token.to_string(),
                        position,
                    });
                }
                other => {
                    return Err(FormulaError::UnexpectedCharacter {
                        token: other.to_string(),
                        position: self.offset(),
                    })
                }
            }
        }
    }

    fn number_token(&mut self) -> &'a str {
        let start = self.offset();
        while matches!(self.peek(), Some('0'..='9' | '.')) {
            self.pos += 1;
        }
        &self.src[start..self.offset()]
    }

    fn number(&mut self) -> Result<Option<Amount>, FormulaError> {
        let position = self.offset();
        let token = self.number_token();
        if token.is_empty() {
            return Ok(None);
        }
        parse_decimal(token)
            .map(|a| Some(cap(a)))
            .ok_or_else(|| FormulaError::InvalidNumber {
                token: token.to_string(),
                position,
            })
    }
}

fn parse_decimal(token: &str) -> Option<Amount> {
    let mut parts = token.split('.');
    let int_part = parts.next()?;
    let frac_part = parts.next();
    if parts.next().is_some() {
        return None;
    }
    if int_part.is_empty() && frac_part.is_none_or(|f| f.is_empty()) {
        return None;
    }
    // Long inputs would overflow; anything past 18 significant digits is noise.
    if int_part.len() > 18 {
        return None;
    }
    let int: i128 = if int_part.is_empty() {
        0
    } else {
        int_part.parse().ok()?
    };
    let mut value = Amount::from_integer(int);
    if let Some(frac) = frac_part {
        let frac = &frac[..frac.len().min(18)];
        if !frac.is_empty() {
            let num: i128 = frac.parse().ok()?;
            value += Amount::new(num, 10i128.pow(frac.len() as u32));
        }
    }
    Some(value)
}

/// Parse a formula such as `SiO2`, `Ca(OH)2` or `La0.7Sr0.3MnO3`.
pub fn parse_formula(formula: &str) -> Result<Composition, FormulaError> {
    let trimmed = formula.trim();
    if trimmed.is_empty() {
        return Err(FormulaError::Empty);
    }
    let mut parser = Parser {
        src: trimmed,
        chars: trimmed.char_indices().collect(),
        pos: 0,
    };
    let amounts = parser.group(None)?;
    Composition::from_amounts(trimmed.to_string(), amounts)
}
