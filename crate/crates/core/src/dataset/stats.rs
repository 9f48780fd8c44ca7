//! Vote distribution statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::grid::{method_label, METHOD_COUNT, PARAM_COUNT};
use crate::metrics::VoteTally;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteStatistics {
    pub images: usize,
    pub total_votes: u32,
    /// Votes per method, summed over its parameter settings.
    pub method_totals: [u32; METHOD_COUNT],
    /// Votes per parameter setting, one row per method.
    pub param_totals: [[u32; PARAM_COUNT]; METHOD_COUNT],
    /// Number of images whose most repeated choice was picked `k` times.
    pub max_repeat_histogram: BTreeMap<u32, u32>,
}

impl VoteStatistics {
    /// Method with the most votes (lowest index on ties) and its total.
    pub fn top_method(&self) -> (u32, u32) {
        let (i, v) = self
            .method_totals
            .iter()
            .enumerate()
            .fold((0, 0), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        (i as u32 + 1, v)
    }

    pub fn images_with_max_repeat_at_least(&self, k: u32) -> u32 {
        self.max_repeat_histogram.range(k..).map(|(_, &n)| n).sum()
    }
}

pub fn vote_statistics(tally: &VoteTally) -> VoteStatistics {
    let mut hist = BTreeMap::new();
    for t in tally.images() {
        *hist.entry(tally.max_repeat(t)).or_insert(0) += 1;
    }
    VoteStatistics {
        images: tally.image_count(),
        total_votes: tally.total_votes(),
        method_totals: tally.method_totals(),
        param_totals: std::array::from_fn(|m| tally.param_totals(m as u32 + 1)),
        max_repeat_histogram: hist,
    }
}

/// Plain-text tables: votes per method, per parameter setting, and the
/// max-repeat distribution.
pub fn render_statistics(s: &VoteStatistics) -> String {
    let mut out = String::new();
    writeln!(out, "images {}  votes {}", s.images, s.total_votes).unwrap();
    writeln!(out).unwrap();
    write!(out, "{:<12}{:>7}", "method", "total").unwrap();
    for p in 1..=PARAM_COUNT {
        write!(out, "{:>6}", format!("p{p}")).unwrap();
    }
    writeln!(out).unwrap();
    for m in 0..METHOD_COUNT {
        write!(out, "{:<12}{:>7}", method_label(m as u32 + 1), s.method_totals[m]).unwrap();
        for v in &s.param_totals[m] {
            write!(out, "{v:>6}").unwrap();
        }
        writeln!(out).unwrap();
    }
    writeln!(out).unwrap();
    writeln!(out, "{:<12}{:>7}", "max repeat", "images").unwrap();
    for (k, n) in &s.max_repeat_histogram {
        writeln!(out, "{k:<12}{n:>7}").unwrap();
    }
    out
}
