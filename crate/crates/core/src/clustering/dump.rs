use std::io::Write;

use crate::error::Result;
use crate::network::Tap;
use crate::tensor::ChannelStats;

pub const FEATURE_DUMP_HEADER: &str = "sample_id,true_domain,pseudo_domain,layer,channel,mean,var";

/// One sample's statistics at one layer.
#[derive(Debug, Clone)]
pub struct FeatureRow<'a> {
    pub sample_id: usize,
    pub true_domain: Option<usize>,
    pub pseudo_domain: Option<usize>,
    pub layer: Tap,
    pub stats: &'a ChannelStats,
}

/// Writes one CSV line per channel. Missing domains are left empty.
pub fn write_feature_dump<'a, W: Write>(
    out: &mut W,
    rows: impl IntoIterator<Item = FeatureRow<'a>>,
) -> Result<()> {
    writeln!(out, "{FEATURE_DUMP_HEADER}")?;
    let opt = |v: Option<usize>| v.map(|v| v.to_string()).unwrap_or_default();
    for row in rows {
        for c in 0..row.stats.channels() {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                row.sample_id,
                opt(row.true_domain),
                opt(row.pseudo_domain),
                row.layer,
                c,
                row.stats.means[c],
                row.stats.vars[c]
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let stats = ChannelStats::new(vec![0.5, 1.0], vec![0.25, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_feature_dump(
            &mut buf,
            [FeatureRow {
                sample_id: 7,
                true_domain: Some(2),
                pseudo_domain: None,
                layer: Tap::T1,
                stats: &stats,
            }],
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "sample_id,true_domain,pseudo_domain,layer,channel,mean,var\n7,2,,t1,0,0.5,0.25\n7,2,,t1,1,1,2\n"
        );
    }
}
