use serde::{Deserialize, Serialize};

use super::{group_by_branch, Adapter, BranchMode};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::network::{argmax_labels, SegNet};
use crate::synth::Stream;
use crate::tensor::Tensor;

/// Per-sample predictions of one batch, each group of samples sharing a
/// branch going through its own α-BN forward. No parameters change.
pub fn infer(net: &SegNet<f32>, batch: &Tensor<f32>, branches: &[usize]) -> Result<Vec<Vec<u8>>> {
    let mut out = vec![Vec::new(); batch.shape().n];
    for (branch, members) in group_by_branch(branches) {
        let sub = batch.select_samples(&members)?;
        for (j, p) in argmax_labels(&net.forward_with_taps(&sub, branch)?.probs).into_iter().enumerate() {
            out[members[j]] = p;
        }
    }
    Ok(out)
}

/// mIoU per domain id; `None` for domains without samples.
pub fn miou_by_domain(
    predictions: &[Vec<u8>],
    labels: &[Vec<u8>],
    domains: &[usize],
    n_domains: usize,
    classes: usize,
) -> Result<Vec<Option<f64>>> {
    if predictions.len() != labels.len() || labels.len() != domains.len() {
        return Err(Error::InvalidShape("predictions, labels and domains differ in length".into()));
    }
    let mut cms = vec![ConfusionMatrix::new(classes); n_domains];
    for ((p, l), &d) in predictions.iter().zip(labels).zip(domains) {
        cms.get_mut(d)
            .ok_or_else(|| Error::Data(format!("domain {d} out of range")))?
            .update(p, l)?;
    }
    cms.iter()
        .map(|cm| if cm.total() == 0 { Ok(None) } else { cm.miou().map(|m| Some(m.0)) })
        .collect()
}

/// Eval-split sample indices per domain, chunked into batches that never mix domains.
fn domain_batches(eval: &Stream, n_domains: usize, batch_size: usize) -> Result<Vec<Vec<usize>>> {
    let mut by_domain = vec![Vec::new(); n_domains];
    for (i, d) in eval.eval.domains.iter().enumerate() {
        let d = d.ok_or_else(|| Error::Data(format!("eval sample {i} has no domain")))?;
        by_domain
            .get_mut(d)
            .ok_or_else(|| Error::Data(format!("eval sample {i}: domain {d} out of range")))?
            .push(i);
    }
    Ok(by_domain
        .iter()
        .flat_map(|ids| ids.chunks(batch_size.max(1)).map(<[usize]>::to_vec))
        .collect())
}

fn eval_domains(eval: &Stream) -> Vec<usize> {
    eval.eval.domains.iter().map(|d| d.unwrap_or(usize::MAX)).collect()
}

fn gather(eval: &Stream, ids: &[usize]) -> Result<Tensor<f32>> {
    let parts: Vec<&Tensor<f32>> = ids.iter().map(|&i| &eval.images.images[i]).collect();
    Tensor::stack(&parts)
}

/// Adapted-branch × eval-domain mIoU matrix: entry `[b][d]` evaluates every
/// domain-`d` sample with branch `b`.
pub fn branch_matrix(net: &SegNet<f32>, eval: &Stream, n_domains: usize, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let batches = domain_batches(eval, n_domains, batch_size)?;
    let domains = eval_domains(eval);
    (0..net.k())
        .map(|b| {
            let mut preds = vec![Vec::new(); eval.len()];
            for ids in &batches {
                let out = infer(net, &gather(eval, ids)?, &vec![b; ids.len()])?;
                for (&i, p) in ids.iter().zip(out) {
                    preds[i] = p;
                }
            }
            let m = miou_by_domain(&preds, &eval.eval.labels, &domains, n_domains, net.classes())?;
            Ok(m.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// mIoU per eval domain with the run's own branch selection.
    pub per_domain_miou: Vec<f64>,
    pub mean_miou: f64,
    /// Rows: branch; columns: eval domain.
    pub branch_matrix: Vec<Vec<f64>>,
}

/// Evaluates the adapted network on a labeled split. Pseudo mode picks each
/// sample's branch from the cluster bank without updating it; oracle mode uses
/// the true domain; compound mode uses branch 0.
pub fn evaluate(adapter: &Adapter, eval: &Stream, n_domains: usize) -> Result<EvalSummary> {
    let net = adapter.net();
    let batch_size = adapter.config().batch_size;
    let batches = domain_batches(eval, n_domains, batch_size)?;
    let domains = eval_domains(eval);
    let mut preds = vec![Vec::new(); eval.len()];
    for ids in &batches {
        let batch = gather(eval, ids)?;
        let branches: Vec<usize> = match adapter.config().branch_mode {
            BranchMode::Compound => vec![0; ids.len()],
            BranchMode::Oracle => {
                if n_domains > net.k() {
                    return Err(Error::InvalidConfig(format!(
                        "oracle evaluation of {n_domains} domains needs k >= {n_domains}"
                    )));
                }
                ids.iter().map(|&i| domains[i]).collect()
            }
            BranchMode::Pseudo if adapter.bank().initialized() == 0 => vec![0; ids.len()],
            BranchMode::Pseudo => adapter
                .features(&batch)?
                .iter()
                .map(|f| adapter.bank().nearest(f))
                .collect::<Result<_>>()?,
        };
        for (&i, p) in ids.iter().zip(infer(net, &batch, &branches)?) {
            preds[i] = p;
        }
    }
    let per_domain: Vec<f64> = miou_by_domain(&preds, &eval.eval.labels, &domains, n_domains, net.classes())?
        .into_iter()
        .map(|v| v.unwrap_or(f64::NAN))
        .collect();
    let present: Vec<f64> = per_domain.iter().copied().filter(|v| !v.is_nan()).collect();
    let mean_miou = if present.is_empty() {
        f64::NAN
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(EvalSummary {
        per_domain_miou: per_domain,
        mean_miou,
        branch_matrix: branch_matrix(net, eval, n_domains, batch_size)?,
    })
}
