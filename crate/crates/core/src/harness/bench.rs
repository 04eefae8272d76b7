//! Analytic attention-buffer sizes of full-scale deformable versus dense fusion.

use super::config::RunConfig;
use crate::error::Result;
use crate::fsad::attention_buffer_counts;
use std::fmt;

#[derive(Clone, Debug)]
pub struct AttnBudget {
    /// per pyramid level, finest first: (extent, tokens, is a query level)
    pub levels: Vec<([usize; 3], usize, bool)>,
    pub heads: usize,
    pub points: usize,
    /// Σ_q T_q · H · L_v · K
    pub deformable: u128,
    /// Σ_q T_q · Σ_v T_v · H
    pub dense: u128,
}

impl AttnBudget {
    pub fn ratio(&self) -> f64 {
        self.deformable as f64 / self.dense as f64
    }
}

/// Queries from the coarsest `fsad.query_levels` levels, values from all of them.
pub fn attention_budget(cfg: &RunConfig) -> Result<AttnBudget> {
    let m = &cfg.model;
    m.sampling.validate(m.pyramid.stages)?;
    let extents = m.pyramid.extents(cfg.phantom.extent)?;
    let first_query = extents.len() - m.sampling.query_levels;
    let levels: Vec<([usize; 3], usize, bool)> =
        extents.iter().enumerate().map(|(s, &e)| (e, e.iter().product(), s >= first_query)).collect();
    let q: Vec<usize> = levels.iter().filter(|l| l.2).map(|l| l.1).collect();
    let v: Vec<usize> = levels.iter().map(|l| l.1).collect();
    let (deformable, dense) = attention_buffer_counts(&q, &v, m.sampling.heads, m.sampling.points);
    Ok(AttnBudget { levels, heads: m.sampling.heads, points: m.sampling.points, deformable, dense })
}

impl fmt::Display for AttnBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "level  extent        tokens  role")?;
        for (i, (e, t, q)) in self.levels.iter().enumerate() {
            let ext = format!("{}x{}x{}", e[0], e[1], e[2]);
            writeln!(f, "{:<6} {ext:<12} {t:>7}  {}", i + 1, if *q { "query+value" } else { "value" })?;
        }
        writeln!(f, "heads {}  points {}", self.heads, self.points)?;
        writeln!(f, "deformable buffer  {:>14}", self.deformable)?;
        writeln!(f, "dense buffer       {:>14}", self.dense)?;
        write!(f, "ratio              {:>14.6}%", 100.0 * self.ratio())
    }
}
