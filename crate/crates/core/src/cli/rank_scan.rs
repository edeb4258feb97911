//! Tabulates `rank(C)` over random model draws for a grid of `(S, H)`.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::models::{diversity_model, structured_gaussian_model, DivergenceMatrix, ModelError};
use crate::topology_inference::{build_system_with, InferenceOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanModel {
    /// Structured Gaussian: distinct means drawn uniformly from [-5, 5].
    Gaussian,
    /// Means `1..=max(H, S)` with likelihood jitter `U[-0.1, 0.1]`.
    Diversity,
}

impl FromStr for ScanModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "diversity" => Ok(Self::Diversity),
            other => Err(format!("unknown model {other:?} (expected gaussian or diversity)")),
        }
    }
}

/// Parses an inclusive `A:B` range.
pub fn parse_range(s: &str) -> Result<RangeInclusive<usize>, String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected A:B, got {s:?}"))?;
    let a: usize = a.trim().parse().map_err(|_| format!("bad range start in {s:?}"))?;
    let b: usize = b.trim().parse().map_err(|_| format!("bad range end in {s:?}"))?;
    if a > b {
        return Err(format!("empty range {s:?}"));
    }
    Ok(a..=b)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankScanRow {
    pub senders: usize,
    pub hypotheses: usize,
    /// One case per (draw, θ*) pair.
    pub cases: usize,
    pub rank_counts: BTreeMap<usize, usize>,
    pub full_rank: usize,
    /// Set when the model is undefined for this pair.
    pub skipped: Option<String>,
}

impl RankScanRow {
    pub fn full_rank_fraction(&self) -> f64 {
        if self.cases == 0 {
            0.0
        } else {
            self.full_rank as f64 / self.cases as f64
        }
    }

    /// Non-identifiable cases exist in this row.
    pub fn has_deficient(&self) -> bool {
        self.full_rank < self.cases
    }
}

pub struct ScanSpec {
    pub model: ScanModel,
    pub senders: RangeInclusive<usize>,
    pub hypotheses: RangeInclusive<usize>,
    pub draws: usize,
    pub seed: u64,
    pub rank_tol: f64,
}

pub fn draw_divergence(
    model: ScanModel,
    h: usize,
    s: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DivergenceMatrix, ModelError> {
    match model {
        ScanModel::Gaussian => {
            let means: Vec<f64> = (0..h).map(|_| rng.random_range(-5.0..5.0)).collect();
            Ok(structured_gaussian_model(&means, s)?.1)
        }
        ScanModel::Diversity => {
            let means: Vec<f64> = (1..=h.max(s)).map(|m| m as f64).collect();
            Ok(diversity_model(h, s, &means, 0.1, rng.random())?.1)
        }
    }
}

pub fn rank_scan(spec: &ScanSpec) -> Vec<RankScanRow> {
    let opts = InferenceOptions {
        rank_tol: spec.rank_tol,
        ..Default::default()
    };
    let mut rows = Vec::new();
    for s in spec.senders.clone() {
        for h in spec.hypotheses.clone() {
            let mut row = RankScanRow {
                senders: s,
                hypotheses: h,
                cases: 0,
                rank_counts: BTreeMap::new(),
                full_rank: 0,
                skipped: None,
            };
            if h < 2 || s == 0 {
                row.skipped = Some("needs H >= 2 and S >= 1".into());
                rows.push(row);
                continue;
            }
            if spec.model == ScanModel::Gaussian && h < s {
                row.skipped = Some("structured model needs H >= S".into());
                rows.push(row);
                continue;
            }
            let pair_seed = spec.seed ^ ((s as u64) << 32 | h as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(pair_seed);
            for _ in 0..spec.draws {
                let d = match draw_divergence(spec.model, h, s, &mut rng) {
                    Ok(d) => d,
                    // Coincident random means: redraw on the next iteration.
                    Err(_) => continue,
                };
                for theta in 0..h {
                    let sys = build_system_with(&d, theta, &vec![0.0; h], &opts)
                        .expect("theta and y are in range by construction");
                    row.cases += 1;
                    *row.rank_counts.entry(sys.rank).or_default() += 1;
                    if sys.feasible {
                        row.full_rank += 1;
                    }
                }
            }
            rows.push(row);
        }
    }
    rows
}

/// Plain-text table of scan results.
pub struct RankTable<'a>(pub &'a [RankScanRow]);

impl fmt::Display for RankTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>3} {:>3} {:>7} {:>10}  ranks", "S", "H", "cases", "full-rank")?;
        for row in self.0 {
            if let Some(why) = &row.skipped {
                writeln!(
                    f,
                    "{:>3} {:>3} {:>7} {:>10}  skipped: {why}",
                    row.senders, row.hypotheses, 0, "-"
                )?;
                continue;
            }
            let ranks: Vec<String> = row.rank_counts.iter().map(|(r, n)| format!("{r}:{n}")).collect();
            writeln!(
                f,
                "{:>3} {:>3} {:>7} {:>9.1}%  {}{}",
                row.senders,
                row.hypotheses,
                row.cases,
                100.0 * row.full_rank_fraction(),
                ranks.join(" "),
                if row.has_deficient() {
                    "  [non-identifiable cases]"
                } else {
                    ""
                }
            )?;
        }
        Ok(())
    }
}
