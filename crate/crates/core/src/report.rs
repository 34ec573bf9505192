//! Summaries of searched policies: the lowest-loss trials grouped by
//! operation, their `p + m` values, and the p/m correlation.

use std::path::Path;

use crate::augment::Operation;
use crate::data::{save_png, DataError};
use crate::tpe::TrialRecord;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedTrial {
    /// Position of the source file in the input list.
    pub file: usize,
    /// Position of the record within its file.
    pub line: usize,
    pub record: TrialRecord,
}

/// The `top` lowest-loss trials across all files, ties broken by file then
/// line order, then grouped by operation (single, multiple, all) keeping the
/// loss order inside each group.
pub fn select_top(files: &[Vec<TrialRecord>], top: usize) -> Vec<RankedTrial> {
    let mut all: Vec<RankedTrial> = files
        .iter()
        .enumerate()
        .flat_map(|(file, recs)| {
            recs.iter().enumerate().map(move |(line, &record)| RankedTrial {
                file,
                line,
                record,
            })
        })
        .collect();
    all.sort_by(|a, b| {
        a.record
            .loss
            .total_cmp(&b.record.loss)
            .then(a.file.cmp(&b.file))
            .then(a.line.cmp(&b.line))
    });
    all.truncate(top);
    all.sort_by_key(|t| t.record.op.index());
    all
}

pub fn to_csv(rows: &[RankedTrial]) -> String {
    let mut out = String::from("op,p,m,p_plus_m,loss\n");
    for r in rows {
        let rec = &r.record;
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            rec.op,
            rec.p,
            rec.m,
            rec.p + rec.m as f64,
            rec.loss
        ));
    }
    out
}

/// Pearson correlation; `None` with fewer than two points or zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

pub fn p_m_correlation(rows: &[RankedTrial]) -> Option<f64> {
    let ps: Vec<f64> = rows.iter().map(|r| r.record.p).collect();
    let ms: Vec<f64> = rows.iter().map(|r| r.record.m as f64).collect();
    pearson(&ps, &ms)
}

const BAR_W: u32 = 10;
const BAR_GAP: u32 = 4;
const GROUP_GAP: u32 = 24;
const PLOT_H: u32 = 240;
const PAD: u32 = 20;
const Y_MAX: f64 = 4.0;

/// Stacked bars per policy (m at the bottom, p on top), one group per
/// operation along the x axis; bar height is `p + m`.
pub fn render_chart(rows: &[RankedTrial], path: &Path) -> Result<(), DataError> {
    let groups: Vec<Vec<&RankedTrial>> = Operation::ALL
        .iter()
        .map(|op| rows.iter().filter(|r| r.record.op == *op).collect())
        .collect();
    let group_w: Vec<u32> = groups
        .iter()
        .map(|g| (g.len() as u32).max(1) * (BAR_W + BAR_GAP))
        .collect();
    let width = PAD * 2 + group_w.iter().sum::<u32>() + GROUP_GAP * (groups.len() as u32 - 1);
    let height = PLOT_H + PAD * 2;
    let mut px = vec![255u8; (width * height * 3) as usize];
    let mut fill = |x0: u32, y0: u32, w: u32, h: u32, c: [u8; 3]| {
        for y in y0..(y0 + h).min(height) {
            for x in x0..(x0 + w).min(width) {
                let i = ((y * width + x) * 3) as usize;
                px[i..i + 3].copy_from_slice(&c);
            }
        }
    };
    let base = PAD + PLOT_H;
    fill(PAD - 2, PAD, 2, PLOT_H + 2, [0, 0, 0]);
    fill(PAD - 2, base, width - 2 * PAD + 4, 2, [0, 0, 0]);
    let scale = |v: f64| ((v / Y_MAX).clamp(0.0, 1.0) * PLOT_H as f64).round() as u32;
    let mut x = PAD;
    for (g, group) in groups.iter().enumerate() {
        let shade = [[70, 110, 180], [60, 150, 90], [170, 80, 80]][g];
        for r in group {
            let m_h = scale(r.record.m as f64);
            let total_h = scale(r.record.p + r.record.m as f64);
            fill(x, base - m_h, BAR_W, m_h, shade);
            fill(x, base - total_h, BAR_W, total_h - m_h, [240, 170, 40]);
            x += BAR_W + BAR_GAP;
        }
        if group.is_empty() {
            x += BAR_W + BAR_GAP;
        }
        x += GROUP_GAP;
    }
    save_png(path, width, height, &px)
}
