//! Simulated users: expertise vectors over concepts, fitted from annotations
//! and retrained on selected explanation examples.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::concepts::{concept_scores, scored_dist, ConceptModel};
use crate::error::{Error, Result};
use crate::explain::{apply_mask, Saliency};
use crate::numerics::ops::cross_entropy_with_grad_slice;
use crate::numerics::{adam_step, io, AdamHyper, AdamState, RngStream, Tensor};
use crate::synthdata::{user_label, DatasetSplit, UserKind};
use crate::target_model::{forward, ConvNetParams, TrainHyper};

/// Per-user concept expertise: one weight in [0, 1] per concept.
#[derive(Debug, Clone)]
pub struct ExpertiseVector {
    pub omega: Vec<f64>,
    pub user: UserKind,
    pub report: UserTrainReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserTrainReport {
    pub loss_curve: Vec<f64>,
    pub train_agreement: f64,
}

/// Image id -> user label over the training split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationSet {
    labels: BTreeMap<u64, usize>,
}

impl AnnotationSet {
    pub fn get(&self, id: u64) -> Option<usize> {
        self.labels.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn distinct_labels(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.labels.values().copied().collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Deduce annotations for every training image from its attributes.
/// Pure attribute map; no randomness involved.
pub fn simulate_annotations(split: &DatasetSplit, user: UserKind) -> AnnotationSet {
    let labels = split
        .train
        .iter()
        .map(|img| (img.id, user_label(&img.spec, user)))
        .collect();
    AnnotationSet { labels }
}

pub fn default_user_hyper() -> TrainHyper {
    TrainHyper {
        lr: 1e-2,
        epochs: 40,
        batch: 32,
    weight_decay: 0.0,
    }
}

/// User-model distribution over classes for one image, optionally through a
/// saliency mask applied before the activation extractor.
pub fn user_predict_dist(
    omega: &[f64],
    image: &Tensor,
    saliency: Option<&Saliency>,
    target: &ConvNetParams,
    model: &ConceptModel,
) -> Result<Vec<f64>> {
    let masked;
    let input = match saliency {
        Some(s) => {
            masked = apply_mask(image, s)?;
            &masked
        }
        None => image,
    };
    let (stack, _) = forward(target, input)?;
    let scores = concept_scores(&stack, &model.bank)?;
    scored_dist(&scores, Some(omega), &model.recon, &model.head)
}

/// Cross-entropy loss of the expertise-scaled model on one score matrix,
/// accumulating `scale *` the gradient with respect to omega.
pub fn omega_loss_grad(
    scores: &Tensor,
    label: usize,
    omega: &[f64],
    model: &ConceptModel,
    grad_omega: &mut [f64],
    scale: f64,
) -> Result<f64> {
    let m = scores.shape()[0];
    let t = scores.shape()[1];
    if omega.len() != m || grad_omega.len() != m {
        return Err(Error::InvalidInput(format!(
            "omega length {} does not match {} concepts",
            omega.len(),
            m
        )));
    }
    let logits = crate::concepts::scored_logits(scores, Some(omega), &model.recon, &model.head)?;
    let (loss, grad_logits) = cross_entropy_with_grad_slice(logits.data(), label)?;

    let n = model.recon.weight.shape()[0];
    let hw = model.head.weight.data();
    let mut grad_mean_recon = vec![0.0f64; n];
    for c in 0..model.head.classes() {
        let g = grad_logits[c];
        let row = &hw[c * n..(c + 1) * n];
        for k in 0..n {
            grad_mean_recon[k] += row[k] * g;
        }
    }
    let w = model.recon.weight.data();
    let s = scores.data();
    let t_f = t as f64;
    for j in 0..m {
        let mut gj = 0.0;
        for k in 0..n {
            gj += w[k * m + j] * grad_mean_recon[k];
        }
        // d(mean_i omega_j S_ji)/d omega_j = mean_i S_ji.
        let s_mean = s[j * t..(j + 1) * t].iter().sum::<f64>() / t_f;
        grad_omega[j] += scale * gj * s_mean;
    }
    Ok(loss)
}

fn clip_unit(omega: &mut [f64]) {
    for v in omega.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

fn optimize_omega(
    init: &[f64],
    examples: &[(&Tensor, usize)],
    model: &ConceptModel,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = init.len();
    let mut omega = Tensor::from_slice_1d(init);
    let mut state = AdamState::new(&[m], AdamHyper::with_lr(hyper.lr));
    let mut order_rng = RngStream::new(seed).substream("omega/order");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut loss_curve = Vec::with_capacity(hyper.epochs);
    for _epoch in 0..hyper.epochs {
        order_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch) {
            let scale = 1.0 / batch.len() as f64;
            let mut grad = Tensor::zeros(&[m]);
            for &idx in batch {
                let (scores, label) = examples[idx];
                epoch_loss += omega_loss_grad(
                    scores,
                    label,
                    omega.data(),
                    model,
                    grad.data_mut(),
                    scale,
                )?;
            }
            adam_step(&mut omega, &grad, &mut state)?;
            clip_unit(omega.data_mut());
        }
        loss_curve.push(epoch_loss / examples.len() as f64);
    }
    Ok((omega.into_data(), loss_curve))
}

/// Precomputed concept scores for a list of images, in image order.
pub struct ScoredImage {
    pub id: u64,
    pub scores: Tensor,
    pub target_label: usize,
}

/// Score every image once against a trained concept bank. The extractor,
/// bank, and head are all frozen afterwards, so fitting and retraining work
/// entirely from these matrices.
pub fn score_images(
    images: &[crate::synthdata::LabeledImage],
    target: &ConvNetParams,
    model: &ConceptModel,
) -> Result<Vec<ScoredImage>> {
    if !model.is_trained() {
        return Err(Error::State("concept model has not been trained".into()));
    }
    images
        .iter()
        .map(|img| {
            let (stack, logits) = forward(target, &img.pixels)?;
            Ok(ScoredImage {
                id: img.id,
                scores: concept_scores(&stack, &model.bank)?,
                target_label: crate::target_model::argmax(logits.data()),
            })
        })
        .collect()
}

/// Fit an expertise vector from user annotations, starting from all-ones.
/// Only omega is updated; entries are clipped to [0, 1] after every step.
pub fn fit_expertise(
    annotations: &AnnotationSet,
    scored: &[ScoredImage],
    model: &ConceptModel,
    user: UserKind,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<ExpertiseVector> {
    if annotations.is_empty() || scored.is_empty() {
        return Err(Error::InvalidInput("no annotations to fit on".into()));
    }
    let examples: Vec<(&Tensor, usize)> = scored
        .iter()
        .map(|si| {
            annotations
                .get(si.id)
                .map(|label| (&si.scores, label))
                .ok_or_else(|| {
                    Error::InvalidInput(format!("image {} has no annotation", si.id))
                })
        })
        .collect::<Result<_>>()?;
    let m = model.concept_count();
    let init = vec![1.0f64; m];
    let (omega, loss_curve) = optimize_omega(&init, &examples, model, hyper, seed)?;

    let mut hits = 0usize;
    for (scores, label) in &examples {
        let dist = scored_dist(scores, Some(&omega), &model.recon, &model.head)?;
        if crate::target_model::argmax(&dist) == *label {
            hits += 1;
        }
    }
    Ok(ExpertiseVector {
        omega,
        user,
        report: UserTrainReport {
            loss_curve,
            train_agreement: hits as f64 / examples.len() as f64,
        },
    })
}

/// Retrain an expertise vector on selected examples labeled by the target
/// model, with the same optimization as the original fit. An empty example
/// list returns omega unchanged.
pub fn retrain_user(
    omega: &[f64],
    examples: &[(&Tensor, usize)],
    model: &ConceptModel,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Ok(omega.to_vec());
    }
    let (omega, _) = optimize_omega(omega, examples, model, hyper, seed)?;
    Ok(omega)
}

/// Indices of the k largest entries, ties broken toward lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .expect("finite expertise entries")
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserMeta {
    pub user: UserKind,
    pub seed: u64,
    pub loss_curve: Vec<f64>,
    pub train_agreement: f64,
}

pub fn save_user(path: &Path, expertise: &ExpertiseVector, seed: u64) -> Result<()> {
    let meta = UserMeta {
        user: expertise.user,
        seed,
        loss_curve: expertise.report.loss_curve.clone(),
        train_agreement: expertise.report.train_agreement,
    };
    let omega = Tensor::from_slice_1d(&expertise.omega);
    io::write_sections(path, &serde_json::to_string(&meta)?, &[("omega", &omega)])
}

pub fn load_user(path: &Path) -> Result<(ExpertiseVector, UserMeta)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!(
            "user checkpoint {}",
            path.display()
        )));
    }
    let (header, sections) = io::read_sections(path)?;
    let meta: UserMeta = serde_json::from_str(&header)?;
    let omega = io::take_section(&sections, "omega")?;
    Ok((
        ExpertiseVector {
            omega: omega.into_data(),
            user: meta.user,
            report: UserTrainReport {
                loss_curve: meta.loss_curve.clone(),
                train_agreement: meta.train_agreement,
            },
        },
        meta,
    ))
}
