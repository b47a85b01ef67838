use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{evaluate, run_stream, AdaptConfig, Adapter, BranchMode, EvalSummary, StepRecord};
use crate::error::{Error, Result};
use crate::metrics::{best_permutation_agreement, purity};
use crate::network::SegNet;
use crate::synth::Stream;

pub const STEPS_CSV_HEADER: &str = "step,sample_id,true_domain,pseudo_label,loss,weight,weight_scale,entropy";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringSummary {
    pub purity: f64,
    /// Agreement with true domains under the best label permutation.
    pub agreement: f64,
    pub counts: Vec<u64>,
}

/// Summary of one adaptation run. Contains no wall-clock data so identical
/// inputs give byte-identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub version: String,
    pub config: AdaptConfig,
    pub domains: Vec<String>,
    pub steps: Vec<StepRecord>,
    /// mIoU of the online predictions per stream domain.
    pub stream_miou: Vec<f64>,
    pub eval: EvalSummary,
    pub clustering: Option<ClusteringSummary>,
    /// L2 norm of the total affine change of each branch.
    pub parameter_deltas: Vec<f64>,
}

impl AdaptReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per processed sample.
    pub fn write_steps_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{STEPS_CSV_HEADER}")?;
        for r in &self.steps {
            for i in 0..r.sample_ids.len() {
                let domain = r.true_domains[i].map(|d| d.to_string()).unwrap_or_default();
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    r.step,
                    r.sample_ids[i],
                    domain,
                    r.pseudo_labels[i],
                    r.losses[i],
                    r.weights[i],
                    r.weight_scales[i],
                    r.entropies[i]
                )?;
            }
        }
        Ok(())
    }
}

/// Per-branch L2 norm of the γ/β difference between two networks.
pub fn parameter_deltas(before: &SegNet<f32>, after: &SegNet<f32>) -> Result<Vec<f64>> {
    if before.k() != after.k() {
        return Err(Error::InvalidShape("networks have different branch counts".into()));
    }
    (0..after.k())
        .map(|k| {
            let mut sq = 0.0;
            for (a, b) in before.bns().iter().zip(after.bns()) {
                let (a, b) = (a.branch(k)?, b.branch(k)?);
                for (x, y) in a.gamma.iter().chain(&a.beta).zip(b.gamma.iter().chain(&b.beta)) {
                    sq += (*x as f64 - *y as f64).powi(2);
                }
            }
            Ok(sq.sqrt())
        })
        .collect()
}

/// Adapts on `stream`, then evaluates on `eval`. The stream's evaluation
/// channel is read only to fill report fields, except that oracle mode feeds
/// it the true domain ids.
pub fn adapt_and_evaluate(
    pretrained: &SegNet<f32>,
    stream: &Stream,
    eval: &Stream,
    domain_names: &[String],
    config: &AdaptConfig,
) -> Result<(AdaptReport, Adapter)> {
    let n_domains = domain_names.len();
    let oracle: Option<Vec<usize>> = match config.branch_mode {
        BranchMode::Oracle => Some(
            stream
                .eval
                .domains
                .iter()
                .enumerate()
                .map(|(i, d)| d.ok_or_else(|| Error::Data(format!("stream sample {i} has no domain"))))
                .collect::<Result<_>>()?,
        ),
        _ => None,
    };
    let run = run_stream(pretrained, &stream.images.images, oracle.as_deref(), config)?;
    let mut steps = run.records;
    for r in &mut steps {
        r.true_domains = r.sample_ids.iter().map(|&i| stream.eval.domains[i]).collect();
    }
    let stream_domains: Vec<usize> = stream.eval.domains.iter().map(|d| d.unwrap_or(usize::MAX)).collect();
    let stream_miou = if stream_domains.iter().all(|&d| d < n_domains) {
        super::miou_by_domain(
            &run.predictions,
            &stream.eval.labels,
            &stream_domains,
            n_domains,
            pretrained.classes(),
        )?
        .into_iter()
        .map(|v| v.unwrap_or(f64::NAN))
        .collect()
    } else {
        Vec::new()
    };
    let clustering = match config.branch_mode {
        BranchMode::Pseudo if !steps.is_empty() && stream_domains.iter().all(|&d| d < n_domains) => {
            let labels: Vec<usize> = steps.iter().flat_map(|r| r.pseudo_labels.iter().copied()).collect();
            Some(ClusteringSummary {
                purity: purity(&labels, &stream_domains)?,
                agreement: best_permutation_agreement(&labels, &stream_domains)?,
                counts: run.adapter.bank().counts().to_vec(),
            })
        }
        _ => None,
    };
    let eval_summary = evaluate(&run.adapter, eval, n_domains)?;
    let start = pretrained.with_branches(config.k, config.alpha)?;
    let report = AdaptReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        domains: domain_names.to_vec(),
        steps,
        stream_miou,
        eval: eval_summary,
        clustering,
        parameter_deltas: parameter_deltas(&start, run.adapter.net())?,
    };
    Ok((report, run.adapter))
}
