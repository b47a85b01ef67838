use std::collections::BTreeMap;

use super::{stats_distance, Metric};
use crate::error::{Error, Result};
use crate::tensor::ChannelStats;

const DENOMINATOR_FLOOR: f64 = 1e-12;

/// Domain distinction rate of one layer: mean distance over cross-domain
/// pairs divided by mean distance over same-domain pairs (self-pairs
/// excluded). Returns 1.0 when both means are zero.
pub fn ddr(by_domain: &BTreeMap<usize, Vec<ChannelStats>>, metric: Metric) -> Result<f64> {
    if by_domain.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "DDR needs at least 2 domains, got {}",
            by_domain.len()
        )));
    }
    if let Some((d, v)) = by_domain.iter().find(|(_, v)| v.len() < 2) {
        return Err(Error::InvalidConfig(format!(
            "DDR needs at least 2 samples per domain; domain {d} has {}",
            v.len()
        )));
    }
    let groups: Vec<&Vec<ChannelStats>> = by_domain.values().collect();
    let (mut within, mut within_n) = (0.0, 0usize);
    let (mut cross, mut cross_n) = (0.0, 0usize);
    for (gi, a) in groups.iter().enumerate() {
        for (i, x) in a.iter().enumerate() {
            for y in &a[i + 1..] {
                within += stats_distance(x, y, metric)?;
                within_n += 1;
            }
            for b in &groups[gi + 1..] {
                for y in b.iter() {
                    cross += stats_distance(x, y, metric)?;
                    cross_n += 1;
                }
            }
        }
    }
    let within = within / within_n as f64;
    let cross = cross / cross_n as f64;
    if within == 0.0 && cross == 0.0 {
        return Ok(1.0);
    }
    Ok(cross / within.max(DENOMINATOR_FLOOR))
}
