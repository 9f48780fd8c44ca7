//! Leaderboard and run-time tables in aligned text and JSON rows.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rank {
    Best,
    Second,
    Third,
}

impl Rank {
    fn marker(self) -> &'static str {
        match self {
            Rank::Best => "[1]",
            Rank::Second => "[2]",
            Rank::Third => "[3]",
        }
    }
}

/// One leaderboard line before ranking. Parameter indices are shown for
/// methods tuned by grid search and omitted for trained models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub method: String,
    pub wrmse: f64,
    pub wmae: f64,
    #[serde(default)]
    pub wrmse_param: Option<u32>,
    #[serde(default)]
    pub wmae_param: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    #[serde(flatten)]
    pub entry: LeaderboardEntry,
    pub wrmse_rank: Option<Rank>,
    pub wmae_rank: Option<Rank>,
}

/// Best, second and third by ascending value; equal values keep input order.
fn ranks(values: &[f64]) -> Vec<Option<Rank>> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut out = vec![None; values.len()];
    for (slot, rank) in order.into_iter().zip([Rank::Best, Rank::Second, Rank::Third]) {
        out[slot] = Some(rank);
    }
    out
}

/// Ranks WRMSE* and WMAE* columns independently.
pub fn leaderboard(entries: &[LeaderboardEntry]) -> Vec<LeaderboardRow> {
    let r = ranks(&entries.iter().map(|e| e.wrmse).collect::<Vec<_>>());
    let a = ranks(&entries.iter().map(|e| e.wmae).collect::<Vec<_>>());
    entries
        .iter()
        .zip(r.into_iter().zip(a))
        .map(|(e, (wrmse_rank, wmae_rank))| LeaderboardRow {
            entry: e.clone(),
            wrmse_rank,
            wmae_rank,
        })
        .collect()
}

fn value_cell(v: f64, rank: Option<Rank>) -> String {
    format!("{v:>8.2} {:<3}", rank.map_or("", Rank::marker))
}

fn param_cell(p: Option<u32>) -> String {
    p.map_or_else(|| "-".to_string(), |p| p.to_string())
}

/// Aligned text table; `[1]`, `[2]`, `[3]` mark the best three per column.
pub fn render_leaderboard(rows: &[LeaderboardRow]) -> String {
    let mut s = String::new();
    writeln!(s, "{:<14}{:>12}{:>12}{:>10}{:>10}", "method", "WRMSE*", "WMAE*", "p(WRMSE)", "p(WMAE)").unwrap();
    for r in rows {
        let e = &r.entry;
        let line = format!(
            "{:<14}{}{}{:>10}{:>10}",
            e.method,
            value_cell(e.wrmse, r.wrmse_rank),
            value_cell(e.wmae, r.wmae_rank),
            param_cell(e.wrmse_param),
            param_cell(e.wmae_param),
        );
        writeln!(s, "{}", line.trim_end()).unwrap();
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: String,
    pub seconds_per_image: f64,
}

pub fn render_timing(rows: &[TimingRow]) -> String {
    let mut s = String::new();
    writeln!(s, "{:<14}{:>12}", "method", "sec/image").unwrap();
    for r in rows {
        writeln!(s, "{:<14}{:>12.2}", r.method, r.seconds_per_image).unwrap();
    }
    s
}

/// Serializes rows as pretty JSON followed by a newline.
pub fn to_json<T: Serialize>(rows: &T) -> String {
    let mut s = serde_json::to_string_pretty(rows).expect("rows serialize");
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_seconds: f64,
    pub images: usize,
    pub warmup: usize,
}

/// Mean wall-clock seconds per image. The first `warmup` images are run once
/// beforehand and not timed.
pub fn timeit<R>(mut smoother: impl FnMut(&Image) -> R, images: &[Image], warmup: usize) -> Timing {
    for img in images.iter().take(warmup) {
        std::hint::black_box(smoother(img));
    }
    let mut total = 0.0;
    for img in images {
        let start = Instant::now();
        std::hint::black_box(smoother(img));
        total += start.elapsed().as_secs_f64();
    }
    Timing {
        mean_seconds: if images.is_empty() { 0.0 } else { total / images.len() as f64 },
        images: images.len(),
        warmup: warmup.min(images.len()),
    }
}
