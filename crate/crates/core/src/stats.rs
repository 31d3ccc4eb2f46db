//! Paired Wilcoxon signed-rank tests on per-class AUROCs and the
//! Bonferroni-corrected modality contribution analysis.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::domain::{Modality, ModalityConfig};
use crate::error::{Error, Result};

/// Largest effective sample size handled by full sign enumeration; larger
/// samples use the (equally exact) subset-sum recursion.
pub const MAX_ENUMERATION_N: usize = 20;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sidedness {
    #[default]
    TwoSided,
    /// Alternative: `x` tends to exceed `y`.
    OneSidedGreater,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonOutcome {
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// Sum of ranks of negative differences.
    pub w_minus: f64,
    /// Number of non-zero differences.
    pub n: usize,
    pub p_value: f64,
    /// Set when every difference is zero.
    pub degenerate: bool,
}

/// Doubled average ranks of `|d|`, so tied ranks stay integral.
fn doubled_ranks(abs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut ranks = vec![0u64; abs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && abs[order[j]] == abs[order[i]] {
            j += 1;
        }
        // positions i+1..=j share the rank (i+1+j)/2
        let doubled = (i + 1 + j) as u64;
        for &k in &order[i..j] {
            ranks[k] = doubled;
        }
        i = j;
    }
    ranks
}

/// Tail probabilities `P(W <= w)` and `P(W >= w)` of the null distribution
/// of the (doubled) positive rank sum.
fn null_tails(ranks: &[u64], observed: u64) -> (f64, f64) {
    let n = ranks.len();
    if n <= MAX_ENUMERATION_N {
        let mut lower = 0u64;
        let mut upper = 0u64;
        for mask in 0u64..(1 << n) {
            let s: u64 = ranks
                .iter()
                .enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1)
                .map(|(_, r)| r)
                .sum();
            lower += u64::from(s <= observed);
            upper += u64::from(s >= observed);
        }
        let total = (1u64 << n) as f64;
        (lower as f64 / total, upper as f64 / total)
    } else {
        let max: u64 = ranks.iter().sum();
        let mut mass = vec![0.0f64; max as usize + 1];
        mass[0] = 1.0;
        let mut reach = 0usize;
        for &r in ranks {
            let r = r as usize;
            reach += r;
            for s in (r..=reach).rev() {
                mass[s] = 0.5 * (mass[s] + mass[s - r]);
            }
            for m in mass.iter_mut().take(r) {
                *m *= 0.5;
            }
        }
        let o = observed as usize;
        (mass[..=o].iter().sum(), mass[o..].iter().sum())
    }
}

/// Exact Wilcoxon signed-rank test of paired samples `x` and `y`.
///
/// Zero differences are dropped before ranking; ties in `|x - y|` get
/// average ranks and the null distribution is built over those ranks.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64], sidedness: Sidedness) -> Result<WilcoxonOutcome> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Stats(format!(
            "paired samples need equal non-zero lengths, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Stats("non-finite observation".into()));
    }
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Ok(WilcoxonOutcome {
            w_plus: 0.0,
            w_minus: 0.0,
            n: 0,
            p_value: 1.0,
            degenerate: true,
        });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let w_plus2: u64 = ranks
        .iter()
        .zip(&diffs)
        .filter(|(_, d)| **d > 0.0)
        .map(|(r, _)| r)
        .sum();
    let total2: u64 = ranks.iter().sum();
    let (lower, upper) = null_tails(&ranks, w_plus2);
    let p_value = match sidedness {
        Sidedness::TwoSided => (2.0 * lower.min(upper)).min(1.0),
        Sidedness::OneSidedGreater => upper,
    };
    Ok(WilcoxonOutcome {
        w_plus: w_plus2 as f64 / 2.0,
        w_minus: (total2 - w_plus2) as f64 / 2.0,
        n: diffs.len(),
        p_value,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub with: ModalityConfig,
    pub without: ModalityConfig,
    pub w_plus: f64,
    pub n: usize,
    pub p_two_sided: f64,
    pub p_one_sided: f64,
    pub degenerate: bool,
}

impl PairOutcome {
    pub fn p(&self, sidedness: Sidedness) -> f64 {
        match sidedness {
            Sidedness::TwoSided => self.p_two_sided,
            Sidedness::OneSidedGreater => self.p_one_sided,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub modality: Modality,
    pub pairs: Vec<PairOutcome>,
    pub sidedness: Sidedness,
    pub p_max: f64,
    pub alpha: f64,
    pub alpha_corrected: f64,
    pub significant: bool,
}

/// Per-class AUROC vectors keyed by modality configuration.
pub type AurocTable = BTreeMap<ModalityConfig, Vec<f64>>;

fn lookup<'a>(results: &'a AurocTable, cfg: &ModalityConfig) -> Result<&'a [f64]> {
    results
        .get(cfg)
        .map(Vec::as_slice)
        .ok_or_else(|| Error::Stats(format!("missing results for configuration {cfg}")))
}

fn compare(
    results: &AurocTable,
    modality: Modality,
    pairs: Vec<(ModalityConfig, ModalityConfig)>,
    alpha: f64,
    sidedness: Sidedness,
) -> Result<ComparisonResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Stats(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let mut outcomes = Vec::with_capacity(pairs.len());
    for (with, without) in pairs {
        let (x, y) = (lookup(results, &with)?, lookup(results, &without)?);
        let two = wilcoxon_signed_rank(x, y, Sidedness::TwoSided)?;
        let one = wilcoxon_signed_rank(x, y, Sidedness::OneSidedGreater)?;
        outcomes.push(PairOutcome {
            with,
            without,
            w_plus: two.w_plus,
            n: two.n,
            p_two_sided: two.p_value,
            p_one_sided: one.p_value,
            degenerate: two.degenerate,
        });
    }
    let p_max = outcomes.iter().map(|o| o.p(sidedness)).fold(0.0, f64::max);
    let alpha_corrected = alpha / outcomes.len() as f64;
    Ok(ComparisonResult {
        modality,
        pairs: outcomes,
        sidedness,
        p_max,
        alpha,
        alpha_corrected,
        significant: p_max < alpha_corrected,
    })
}

/// Compares every configuration that uses `modality` with the same
/// configuration without it (four pairs), Bonferroni-corrected.
pub fn modality_contribution(
    results: &AurocTable,
    modality: Modality,
    alpha: f64,
    sidedness: Sidedness,
) -> Result<ComparisonResult> {
    let pairs = ModalityConfig::all()
        .into_iter()
        .filter(|c| !c.uses(modality))
        .map(|c| (c.with(modality, true), c))
        .collect();
    compare(results, modality, pairs, alpha, sidedness)
}

/// Radiograph plus `modality` against the radiograph alone; no correction.
pub fn single_addition_test(
    results: &AurocTable,
    modality: Modality,
    alpha: f64,
    sidedness: Sidedness,
) -> Result<ComparisonResult> {
    let base = ModalityConfig::image_only();
    compare(
        results,
        modality,
        vec![(base.with(modality, true), base)],
        alpha,
        sidedness,
    )
}

/// Full analysis: per-modality contribution and single-addition tests.
pub fn analyze(results: &AurocTable, alpha: f64, sidedness: Sidedness) -> Result<Vec<ComparisonResult>> {
    let mut out = Vec::new();
    for m in Modality::ALL {
        out.push(modality_contribution(results, m, alpha, sidedness)?);
    }
    for m in Modality::ALL {
        out.push(single_addition_test(results, m, alpha, sidedness)?);
    }
    Ok(out)
}

/// Plain-text significance table. Both sidedness variants are listed; the
/// verdict follows the configured one.
pub fn render_significance(results: &[ComparisonResult]) -> String {
    let mut s = String::new();
    for r in results {
        let kind = if r.pairs.len() == 1 {
            "single addition"
        } else {
            "all pairs"
        };
        let _ = writeln!(
            s,
            "{} ({kind}, {} pair{}): p_max = {:.6} ({:?}), alpha' = {:.6} -> {}",
            r.modality.display_name(),
            r.pairs.len(),
            if r.pairs.len() == 1 { "" } else { "s" },
            r.p_max,
            r.sidedness,
            r.alpha_corrected,
            if r.significant {
                "significant"
            } else {
                "not significant"
            },
        );
        for p in &r.pairs {
            let _ = writeln!(
                s,
                "  {:<20} vs {:<16} W+ = {:>5.1}  n = {}  p(two-sided) = {:.6}  p(one-sided) = {:.6}{}",
                p.with.name(),
                p.without.name(),
                p.w_plus,
                p.n,
                p.p_two_sided,
                p.p_one_sided,
                if p.degenerate { "  [all differences zero]" } else { "" },
            );
        }
    }
    s
}
