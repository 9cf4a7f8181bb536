//! Exact work-unit accounting.
//!
//! One work unit (WU) is one model application to one image at the finest
//! resolution. An application at mesh level `j` costs `4^-(j-1)` WU. Totals
//! are exact rationals.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};

use crate::error::{Error, Result};

/// Cost in WU of `n` model applications at mesh level `level`.
pub fn cost(level: usize, n: u64) -> BigRational {
    debug_assert!(level >= 1);
    let den = BigInt::one() << (2 * (level - 1));
    BigRational::new(BigInt::from(n), den)
}

/// Formats a rational as `num/den`.
pub fn format_rational(r: &BigRational) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedgerEntry {
    pub level: usize,
    pub images: u64,
}

#[derive(Debug, Clone, Default)]
pub struct WorkUnitLedger {
    entries: Vec<LedgerEntry>,
    total: BigRational,
}

impl PartialEq for WorkUnitLedger {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl WorkUnitLedger {
    pub fn new() -> Self {
        Self { entries: Vec::new(), total: BigRational::zero() }
    }

    /// Records `images` model applications at `level`.
    pub fn charge(&mut self, level: usize, images: u64) -> Result<()> {
        if level == 0 {
            return Err(Error::invalid("mesh levels are numbered from 1"));
        }
        self.total += cost(level, images);
        self.entries.push(LedgerEntry { level, images });
        Ok(())
    }

    pub fn total(&self) -> &BigRational {
        &self.total
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    /// Appends all of `other`'s entries.
    pub fn merge(&mut self, other: &WorkUnitLedger) {
        self.total += &other.total;
        self.entries.extend_from_slice(&other.entries);
    }

    /// Total recomputed from the entries.
    pub fn recompute(&self) -> BigRational {
        self.entries.iter().fold(BigRational::zero(), |acc, e| acc + cost(e.level, e.images))
    }

    /// Per-level image counts and WU, ordered finest first.
    pub fn by_level(&self) -> BTreeMap<usize, (u64, BigRational)> {
        let mut out: BTreeMap<usize, (u64, BigRational)> = BTreeMap::new();
        for e in &self.entries {
            let slot = out.entry(e.level).or_insert_with(|| (0, BigRational::zero()));
            slot.0 += e.images;
            slot.1 += cost(e.level, e.images);
        }
        out
    }

    /// Rows `(level, images, wu_numerator, wu_denominator)`, one per level
    /// plus a final `total` row.
    pub fn csv_rows(&self) -> Vec<[String; 4]> {
        let mut rows = Vec::new();
        let mut images = 0;
        for (level, (n, wu)) in self.by_level() {
            images += n;
            rows.push([level.to_string(), n.to_string(), wu.numer().to_string(), wu.denom().to_string()]);
        }
        rows.push([
            "total".into(),
            images.to_string(),
            self.total.numer().to_string(),
            self.total.denom().to_string(),
        ]);
        rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Single,
    Multiscale,
    FullMultiscale,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Single => "single",
            Strategy::Multiscale => "multiscale",
            Strategy::FullMultiscale => "full_multiscale",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Strategy::Single),
            "multiscale" => Ok(Strategy::Multiscale),
            "full_multiscale" => Ok(Strategy::FullMultiscale),
            other => Err(Error::invalid(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Per-step WU of the doubling plan `N_j = 2^(j-1) N1` restricted to levels
/// `m..=levels`: `N1 (5/2 2^-(m-1) - 3/2 2^-(levels-1))`.
pub fn stage_step_cost(n1: u64, m: usize, levels: usize) -> BigRational {
    let half_pow = |e: usize| BigRational::new(BigInt::one(), BigInt::one() << e);
    let five_halves = BigRational::new(BigInt::from(5), BigInt::from(2));
    let three_halves = BigRational::new(BigInt::from(3), BigInt::from(2));
    BigRational::from_integer(BigInt::from(n1)) * (five_halves * half_pow(m - 1) - three_halves * half_pow(levels - 1))
}

/// Total WU of a training run.
///
/// - `Single`: `iters = [I]`; every step uses `(2^L - 1) N1` finest images.
/// - `Multiscale`: `iters = [I]`; every step is the full doubling-plan estimator.
/// - `FullMultiscale`: `iters` holds one count per stage in execution order,
///   coarsest stage first; the stage finishing at level `m` uses the doubling
///   plan restricted to levels `m..=L`.
pub fn closed_form(strategy: Strategy, n1: u64, iters: &[u64], levels: usize) -> Result<BigRational> {
    if levels == 0 {
        return Err(Error::invalid("levels must be at least 1"));
    }
    let int = |v: u64| BigRational::from_integer(BigInt::from(v));
    match strategy {
        Strategy::Single | Strategy::Multiscale if iters.len() != 1 => Err(Error::invalid(format!(
            "{strategy} takes a single iteration count, got {}",
            iters.len()
        ))),
        Strategy::Single => {
            let images = (BigInt::one() << levels) - BigInt::one();
            Ok(BigRational::from_integer(images) * int(n1) * int(iters[0]))
        }
        Strategy::Multiscale => Ok(stage_step_cost(n1, 1, levels) * int(iters[0])),
        Strategy::FullMultiscale => {
            if iters.len() != levels {
                return Err(Error::invalid(format!(
                    "full_multiscale needs {levels} stage iteration counts, got {}",
                    iters.len()
                )));
            }
            Ok(iters
                .iter()
                .enumerate()
                .map(|(s, &i)| stage_step_cost(n1, levels - s, levels) * int(i))
                .fold(BigRational::zero(), |a, b| a + b))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use super::Strategy;

    fn q(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn charge_examples() {
        let mut l = WorkUnitLedger::new();
        l.charge(1, 16).unwrap();
        assert_eq!(*l.total(), q(16, 1));
        let mut l = WorkUnitLedger::new();
        l.charge(2, 16).unwrap();
        assert_eq!(*l.total(), q(4, 1));
        let mut l = WorkUnitLedger::new();
        l.charge(3, 8).unwrap();
        assert_eq!(*l.total(), q(1, 2));
        assert!(l.charge(0, 1).is_err());
    }

    #[test]
    fn stage_costs_for_four_levels() {
        let want = [q(37, 16), q(17, 16), q(7, 16), q(1, 8)];
        for (m, w) in (1..=4).zip(want) {
            assert_eq!(stage_step_cost(1, m, 4), w, "stage {m}");
        }
    }

    #[test]
    fn two_level_step_is_nine_sixteenths() {
        // plan [N/4, N] with N = 64: base 64 at level 2, diff 16 at levels 1 and 2
        let mut l = WorkUnitLedger::new();
        l.charge(2, 64).unwrap();
        l.charge(1, 16).unwrap();
        l.charge(2, 16).unwrap();
        assert_eq!(*l.total(), q(9 * 64, 16));
    }

    #[test]
    fn closed_form_reference_values() {
        assert_eq!(closed_form(Strategy::Single, 16, &[2000], 4).unwrap(), q(480000, 1));
        assert_eq!(closed_form(Strategy::Multiscale, 16, &[2000], 4).unwrap(), q(74000, 1));
        assert_eq!(closed_form(Strategy::FullMultiscale, 16, &[2000, 1000, 500, 250], 4).unwrap(), q(28750, 1));
        assert_eq!(closed_form(Strategy::FullMultiscale, 16, &[2000; 4], 4).unwrap(), q(126000, 1));
        assert_eq!(closed_form(Strategy::Single, 16, &[1], 1).unwrap(), q(16, 1));
        assert_eq!(closed_form(Strategy::Multiscale, 16, &[1], 1).unwrap(), q(16, 1));
    }

    #[test]
    fn closed_form_rejects_bad_schedules() {
        assert!(closed_form(Strategy::Single, 16, &[1, 2], 4).is_err());
        assert!(closed_form(Strategy::FullMultiscale, 16, &[1, 2], 4).is_err());
        assert!(closed_form(Strategy::Multiscale, 16, &[1], 0).is_err());
    }

    #[test]
    fn csv_rows_aggregate_levels() {
        let mut l = WorkUnitLedger::new();
        l.charge(2, 8).unwrap();
        l.charge(1, 2).unwrap();
        l.charge(2, 2).unwrap();
        let rows = l.csv_rows();
        assert_eq!(rows[0], ["1", "2", "2", "1"].map(String::from));
        assert_eq!(rows[1], ["2", "10", "5", "2"].map(String::from));
        assert_eq!(rows[2], ["total", "12", "9", "2"].map(String::from));
        assert_eq!(WorkUnitLedger::new().csv_rows().len(), 1);
    }

    #[test]
    fn strategy_parses() {
        for s in [Strategy::Single, Strategy::Multiscale, Strategy::FullMultiscale] {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
        assert!("fast".parse::<Strategy>().is_err());
    }

    proptest! {
        #[test]
        fn merge_adds_totals(a in prop::collection::vec((1usize..6, 0u64..100), 0..8),
                             b in prop::collection::vec((1usize..6, 0u64..100), 0..8)) {
            let mut la = WorkUnitLedger::new();
            for (lv, n) in &a { la.charge(*lv, *n).unwrap(); }
            let mut lb = WorkUnitLedger::new();
            for (lv, n) in &b { lb.charge(*lv, *n).unwrap(); }
            let want = la.total() + lb.total();
            la.merge(&lb);
            prop_assert_eq!(la.total(), &want);
            prop_assert_eq!(la.recompute(), want);
        }

        #[test]
        fn multiscale_matches_stage_one(n1 in 1u64..64, iters in 1u64..5000, levels in 1usize..7) {
            prop_assert_eq!(
                closed_form(Strategy::Multiscale, n1, &[iters], levels).unwrap(),
                closed_form(Strategy::FullMultiscale, n1,
                    &(0..levels).map(|s| if s + 1 == levels { iters } else { 0 }).collect::<Vec<_>>(), levels).unwrap()
            );
        }
    }
}
