//! Concept discovery: factor the target model through a bank of unit-norm
//! concept vectors and a trainable reconstruction back into activation space,
//! trained so the factored model agrees with the target's own predictions.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::{cross_entropy_with_grad_slice, l2_normalize_into, l2_normalize_slice};
use crate::numerics::{adam_step, io, AdamHyper, AdamState, RngStream, Tensor};
use crate::synthdata::{DatasetSplit, LabeledImage};
use crate::target_model::{
    forward, head_apply_mean, predict, ActivationStack, ConvNetParams, HeadParams, TrainHyper,
};

/// Bank of m unit-norm concept vectors in activation space (m x n).
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBank {
    vectors: Tensor,
}

impl ConceptBank {
    pub fn from_tensor(vectors: Tensor) -> Result<Self> {
        if vectors.rank() != 2 {
            return Err(Error::InvalidInput(format!(
                "concept bank must be m x n, got {:?}",
                vectors.shape()
            )));
        }
        Ok(ConceptBank { vectors })
    }

    pub fn count(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn vector(&self, j: usize) -> &[f64] {
        let n = self.dim();
        &self.vectors.data()[j * n..(j + 1) * n]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.vectors
    }

    fn renormalize_rows(&mut self) {
        let n = self.dim();
        for j in 0..self.count() {
            let row = &mut self.vectors.data_mut()[j * n..(j + 1) * n];
            let (unit, degenerate) = l2_normalize_slice(row);
            if !degenerate {
                row.copy_from_slice(&unit);
            }
        }
    }
}

/// Affine map from concept scores back to activation space, shared across
/// all stack positions: `psi_hat = W s + b` with W of shape n x m.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconMap {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Trained concept artifacts plus a frozen copy of the target head.
#[derive(Debug, Clone)]
pub struct ConceptModel {
    pub bank: ConceptBank,
    pub recon: ReconMap,
    pub head: HeadParams,
    trained: bool,
}

impl ConceptModel {
    /// Freshly initialized, untrained model (concept rows random unit norm).
    pub fn init(m: usize, n: usize, head: &HeadParams, rng: &mut RngStream) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidInput(format!("m must be at least 2, got {m}")));
        }
        if m > n {
            return Err(Error::InvalidInput(format!(
                "m = {m} exceeds activation dimension n = {n}"
            )));
        }
        let mut vectors = Tensor::from_vec(
            &[m, n],
            (0..m * n).map(|_| rng.normal()).collect(),
        )?;
        {
            let data = vectors.data_mut();
            for j in 0..m {
                let (unit, _) = l2_normalize_slice(&data[j * n..(j + 1) * n]);
                data[j * n..(j + 1) * n].copy_from_slice(&unit);
            }
        }
        let std = (1.0 / m as f64).sqrt();
        let weight = Tensor::from_vec(
            &[n, m],
            (0..n * m).map(|_| rng.normal() * std).collect(),
        )?;
        Ok(ConceptModel {
            bank: ConceptBank { vectors },
            recon: ReconMap {
                weight,
                bias: Tensor::zeros(&[n]),
            },
            head: head.clone(),
            trained: false,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn concept_count(&self) -> usize {
        self.bank.count()
    }
}

/// Row-normalize every position of a stack (frozen inputs to the scores).
pub fn normalized_stack(stack: &ActivationStack) -> Tensor {
    let (t, n) = (stack.positions(), stack.dim());
    let mut data = vec![0.0f64; t * n];
    for i in 0..t {
        l2_normalize_into(stack.position(i), &mut data[i * n..(i + 1) * n]);
    }
    Tensor::from_vec(&[t, n], data).expect("stack shape")
}

/// Cosine alignment of every (concept, position) pair: an m x T matrix with
/// `S[j, i] = <normalize(psi_i), c_j>`. Zero activations score 0.
pub fn concept_scores(stack: &ActivationStack, bank: &ConceptBank) -> Result<Tensor> {
    if stack.dim() != bank.dim() {
        return Err(Error::InvalidInput(format!(
            "stack dim {} does not match concept dim {}",
            stack.dim(),
            bank.dim()
        )));
    }
    Ok(scores_from_normalized(&normalized_stack(stack), bank))
}

/// Scores from an already-normalized stack (the hot path during training).
pub fn scores_from_normalized(unit_stack: &Tensor, bank: &ConceptBank) -> Tensor {
    let t = unit_stack.shape()[0];
    let n = unit_stack.shape()[1];
    let m = bank.count();
    debug_assert_eq!(n, bank.dim());
    let u = unit_stack.data();
    let mut scores = vec![0.0f64; m * t];
    for j in 0..m {
        let c = bank.vector(j);
        for i in 0..t {
            let ui = &u[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for k in 0..n {
                acc += ui[k] * c[k];
            }
            scores[j * t + i] = acc.clamp(-1.0, 1.0);
        }
    }
    Tensor::from_vec(&[m, t], scores).expect("scores shape")
}

/// Logits of the concept-factored model from a score matrix.
///
/// `omega`, when present, scales row j of the scores by `omega[j]` at every
/// position. Identity scaling (`omega = 1`) reproduces the plain factored
/// logits bit-for-bit because it runs through this same code path.
pub fn scored_logits(
    scores: &Tensor,
    omega: Option<&[f64]>,
    recon: &ReconMap,
    head: &HeadParams,
) -> Result<Tensor> {
    let m = scores.shape()[0];
    let t = scores.shape()[1];
    if let Some(w) = omega {
        if w.len() != m {
            return Err(Error::InvalidInput(format!(
                "omega has {} entries for {} concepts",
                w.len(),
                m
            )));
        }
    }
    let n = recon.weight.shape()[0];
    if recon.weight.shape()[1] != m {
        return Err(Error::InvalidInput(format!(
            "recon weight {:?} does not match {} concepts",
            recon.weight.shape(),
            m
        )));
    }
    let s = scores.data();
    let t_f = t as f64;
    // Mean scaled score per concept over positions.
    let mut s_mean = vec![0.0f64; m];
    for j in 0..m {
        let scale = omega.map_or(1.0, |w| w[j]);
        let mut acc = 0.0;
        for i in 0..t {
            acc += scale * s[j * t + i];
        }
        s_mean[j] = acc / t_f;
    }
    // Reconstruction is affine, so it commutes with the position mean.
    let w = recon.weight.data();
    let b = recon.bias.data();
    let mut mean_recon = vec![0.0f64; n];
    for k in 0..n {
        let row = &w[k * m..(k + 1) * m];
        let mut acc = 0.0;
        for j in 0..m {
            acc += row[j] * s_mean[j];
        }
        mean_recon[k] = acc + b[k];
    }
    head_apply_mean(head, &mean_recon)
}

/// Probability distribution of the factored model from a score matrix.
pub fn scored_dist(
    scores: &Tensor,
    omega: Option<&[f64]>,
    recon: &ReconMap,
    head: &HeadParams,
) -> Result<Vec<f64>> {
    let logits = scored_logits(scores, omega, recon, head)?;
    crate::numerics::ops::softmax_slice(logits.data())
}

/// Run the target's activation extractor and the concept-factored head on
/// one image.
pub fn conceptized_forward(
    params: &ConvNetParams,
    image: &Tensor,
    model: &ConceptModel,
) -> Result<Tensor> {
    if !model.trained {
        return Err(Error::State("concept model has not been trained".into()));
    }
    let (stack, _) = forward(params, image)?;
    let scores = concept_scores(&stack, &model.bank)?;
    scored_logits(&scores, None, &model.recon, &model.head)
}

/// Gradients of the factored cross-entropy for one image.
pub struct ConceptGrads {
    pub bank: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Loss and parameter gradients of the factored model on one normalized
/// stack against a hard label. `scale` premultiplies the gradients.
pub fn concept_loss_grads(
    unit_stack: &Tensor,
    label: usize,
    bank: &ConceptBank,
    recon: &ReconMap,
    head: &HeadParams,
    grads: &mut ConceptGrads,
    scale: f64,
) -> Result<f64> {
    let t = unit_stack.shape()[0];
    let n = unit_stack.shape()[1];
    let m = bank.count();
    let t_f = t as f64;

    let scores = scores_from_normalized(unit_stack, bank);
    let logits = scored_logits(&scores, None, recon, head)?;
    let (loss, grad_logits) = cross_entropy_with_grad_slice(logits.data(), label)?;

    // d loss / d mean_recon = W_head^T grad_logits.
    let hw = head.weight.data();
    let k_cls = head.classes();
    let mut grad_mean_recon = vec![0.0f64; n];
    for c in 0..k_cls {
        let g = grad_logits[c];
        let row = &hw[c * n..(c + 1) * n];
        for k in 0..n {
            grad_mean_recon[k] += row[k] * g;
        }
    }

    // Mean score per concept, the co-factor of the recon weight gradient.
    let s = scores.data();
    let mut s_mean = vec![0.0f64; m];
    for j in 0..m {
        s_mean[j] = s[j * t..(j + 1) * t].iter().sum::<f64>() / t_f;
    }

    let w = recon.weight.data();
    let gw = grads.weight.data_mut();
    let gb = grads.bias.data_mut();
    let mut grad_s_mean = vec![0.0f64; m];
    for k in 0..n {
        let gm = grad_mean_recon[k];
        gb[k] += scale * gm;
        let row = &w[k * m..(k + 1) * m];
        let grow = &mut gw[k * m..(k + 1) * m];
        for j in 0..m {
            grow[j] += scale * gm * s_mean[j];
            grad_s_mean[j] += row[j] * gm;
        }
    }

    // d s_mean_j / d c_j = mean over positions of the normalized activations.
    let u = unit_stack.data();
    let mut u_mean = vec![0.0f64; n];
    for i in 0..t {
        for k in 0..n {
            u_mean[k] += u[i * n + k];
        }
    }
    for v in &mut u_mean {
        *v /= t_f;
    }
    let gc = grads.bank.data_mut();
    for j in 0..m {
        let g = scale * grad_s_mean[j];
        let row = &mut gc[j * n..(j + 1) * n];
        for k in 0..n {
            row[k] += g * u_mean[k];
        }
    }
    Ok(loss)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptTrainReport {
    pub loss_curve: Vec<f64>,
    pub train_seconds: f64,
}

/// Discover `m` concepts by minimizing cross-entropy of the factored model
/// against the target's own predictions. The activation extractor and head
/// stay frozen; concept rows are re-unit-normalized after every step.
pub fn discover_concepts(
    split: &DatasetSplit,
    target: &ConvNetParams,
    m: usize,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(ConceptModel, ConceptTrainReport)> {
    if split.train.is_empty() {
        return Err(Error::InvalidInput("empty training split".into()));
    }
    let start = Instant::now();
    let root = RngStream::new(seed);
    let mut model = ConceptModel::init(
        m,
        crate::target_model::FEATURE_DIM,
        &target.head,
        &mut root.substream("concepts/init"),
    )?;

    // The extractor is frozen, so normalized stacks and target predictions
    // are computed once.
    let mut unit_stacks = Vec::with_capacity(split.train.len());
    let mut labels = Vec::with_capacity(split.train.len());
    for img in &split.train {
        let (stack, logits) = forward(target, &img.pixels)?;
        unit_stacks.push(normalized_stack(&stack));
        labels.push(crate::target_model::argmax(logits.data()));
    }

    let n = model.bank.dim();
    let adam = AdamHyper::with_lr(hyper.lr);
    let mut bank_state = AdamState::new(&[m, n], adam);
    let mut weight_state = AdamState::new(&[n, m], adam);
    let mut bias_state = AdamState::new(&[n], adam);
    let mut order_rng = root.substream("concepts/order");
    let mut order: Vec<usize> = (0..split.train.len()).collect();

    let mut loss_curve = Vec::with_capacity(hyper.epochs);
    for _epoch in 0..hyper.epochs {
        order_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch) {
            let scale = 1.0 / batch.len() as f64;
            let mut grads = ConceptGrads {
                bank: Tensor::zeros(&[m, n]),
                weight: Tensor::zeros(&[n, m]),
                bias: Tensor::zeros(&[n]),
            };
            for &idx in batch {
                epoch_loss += concept_loss_grads(
                    &unit_stacks[idx],
                    labels[idx],
                    &model.bank,
                    &model.recon,
                    &model.head,
                    &mut grads,
                    scale,
                )?;
            }
            adam_step(&mut model.bank.vectors, &grads.bank, &mut bank_state)?;
            adam_step(&mut model.recon.weight, &grads.weight, &mut weight_state)?;
            adam_step(&mut model.recon.bias, &grads.bias, &mut bias_state)?;
            model.bank.renormalize_rows();
        }
        loss_curve.push(epoch_loss / split.train.len() as f64);
    }

    model.trained = true;
    Ok((
        model,
        ConceptTrainReport {
            loss_curve,
            train_seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Fraction of images where the factored model agrees with the target's
/// prediction.
pub fn fidelity(
    images: &[LabeledImage],
    target: &ConvNetParams,
    model: &ConceptModel,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::InvalidInput("fidelity over empty set".into()));
    }
    let mut hits = 0usize;
    for img in images {
        let factored = crate::target_model::argmax(
            conceptized_forward(target, &img.pixels, model)?.data(),
        );
        if factored == predict(target, &img.pixels)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / images.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptMeta {
    pub m: usize,
    pub seed: u64,
    pub fidelity: f64,
    pub hyper: TrainHyper,
}

pub fn save_concepts(path: &Path, model: &ConceptModel, meta: &ConceptMeta) -> Result<()> {
    let header = serde_json::to_string(meta)?;
    io::write_sections(
        path,
        &header,
        &[
            ("concepts", model.bank.tensor()),
            ("recon.weight", &model.recon.weight),
            ("recon.bias", &model.recon.bias),
            ("head.weight", &model.head.weight),
            ("head.bias", &model.head.bias),
        ],
    )
}

pub fn load_concepts(path: &Path) -> Result<(ConceptModel, ConceptMeta)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!(
            "concept checkpoint {}",
            path.display()
        )));
    }
    let (header, sections) = io::read_sections(path)?;
    let meta: ConceptMeta = serde_json::from_str(&header)?;
    let model = ConceptModel {
        bank: ConceptBank::from_tensor(io::take_section(&sections, "concepts")?)?,
        recon: ReconMap {
            weight: io::take_section(&sections, "recon.weight")?,
            bias: io::take_section(&sections, "recon.bias")?,
        },
        head: HeadParams {
            weight: io::take_section(&sections, "head.weight")?,
            bias: io::take_section(&sections, "head.bias")?,
        },
        trained: true,
    };
    if model.bank.count() != meta.m {
        return Err(Error::Format(format!(
            "checkpoint declares m = {} but bank has {} rows",
            meta.m,
            model.bank.count()
        )));
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{central_diff_grad, rel_error};
    use crate::synthdata::generate_dataset;

    fn stack_from_rows(rows: &[Vec<f64>]) -> ActivationStack {
        let t = rows.len();
        let n = rows[0].len();
        let data: Vec<f64> = rows.iter().flatten().cloned().collect();
        ActivationStack::from_tensor(Tensor::from_vec(&[t, n], data).unwrap()).unwrap()
    }

    #[test]
    fn self_cosine_is_one() {
        let stack = stack_from_rows(&[vec![3.0, 4.0]]);
        let bank = ConceptBank::from_tensor(
            Tensor::from_vec(&[1, 2], vec![0.6, 0.8]).unwrap(),
        )
        .unwrap();
        let s = concept_scores(&stack, &bank).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_scores_zero() {
        let stack = stack_from_rows(&[vec![1.0, 0.0]]);
        let bank =
            ConceptBank::from_tensor(Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap()).unwrap();
        let s = concept_scores(&stack, &bank).unwrap();
        assert_eq!(s.data()[0], 0.0);
    }

    #[test]
    fn scores_match_cosine_oracle() {
        let mut rng = RngStream::new(2);
        for _ in 0..50 {
            let n = 5;
            let psi: Vec<f64> = (0..n).map(|_| rng.range_f64(-2.0, 2.0)).collect();
            let c_raw: Vec<f64> = (0..n).map(|_| rng.range_f64(-2.0, 2.0)).collect();
            let (c, _) = l2_normalize_slice(&c_raw);
            let stack = stack_from_rows(&[psi.clone()]);
            let bank =
                ConceptBank::from_tensor(Tensor::from_vec(&[1, n], c.clone()).unwrap()).unwrap();
            let s = concept_scores(&stack, &bank).unwrap();
            // Direct cosine: <psi, c> / |psi|.
            let dot: f64 = psi.iter().zip(&c).map(|(a, b)| a * b).sum();
            let norm: f64 = psi.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((s.data()[0] - dot / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_invariant_to_positive_rescaling() {
        let mut rng = RngStream::new(3);
        let psi: Vec<f64> = (0..6).map(|_| rng.range_f64(-1.0, 1.0)).collect();
        let scaled: Vec<f64> = psi.iter().map(|v| v * 7.25).collect();
        let c: Vec<f64> = {
            let raw: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            l2_normalize_slice(&raw).0
        };
        let bank = ConceptBank::from_tensor(Tensor::from_vec(&[1, 6], c).unwrap()).unwrap();
        let s1 = concept_scores(&stack_from_rows(&[psi]), &bank).unwrap();
        let s2 = concept_scores(&stack_from_rows(&[scaled]), &bank).unwrap();
        assert!((s1.data()[0] - s2.data()[0]).abs() < 1e-12);
    }

    #[test]
    fn zero_activation_scores_zero() {
        let stack = stack_from_rows(&[vec![0.0, 0.0]]);
        let bank =
            ConceptBank::from_tensor(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        let s = concept_scores(&stack, &bank).unwrap();
        assert_eq!(s.data()[0], 0.0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let stack = stack_from_rows(&[vec![1.0, 0.0, 0.0]]);
        let bank =
            ConceptBank::from_tensor(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        assert!(concept_scores(&stack, &bank).is_err());
    }

    #[test]
    fn identity_basis_reproduces_head_exactly() {
        // m = n, C = I, W = I, b = 0 over already-unit activation rows.
        let n = 3;
        let rows = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.6, 0.8],
        ];
        let stack = stack_from_rows(&rows);
        let mut rng = RngStream::new(5);
        let head = HeadParams {
            weight: Tensor::from_vec(&[2, n], (0..2 * n).map(|_| rng.normal()).collect()).unwrap(),
            bias: Tensor::from_vec(&[2], vec![rng.normal(), rng.normal()]).unwrap(),
        };
        let mut eye = vec![0.0; n * n];
        for i in 0..n {
            eye[i * n + i] = 1.0;
        }
        let bank =
            ConceptBank::from_tensor(Tensor::from_vec(&[n, n], eye.clone()).unwrap()).unwrap();
        let recon = ReconMap {
            weight: Tensor::from_vec(&[n, n], eye).unwrap(),
            bias: Tensor::zeros(&[n]),
        };
        let scores = concept_scores(&stack, &bank).unwrap();
        let factored = scored_logits(&scores, None, &recon, &head).unwrap();
        let direct = crate::target_model::head_apply(&stack, &head).unwrap();
        assert_eq!(factored.data(), direct.data());
    }

    #[test]
    fn untrained_model_is_a_state_error() {
        let mut rng = RngStream::new(1);
        let head = HeadParams {
            weight: Tensor::zeros(&[4, crate::target_model::FEATURE_DIM]),
            bias: Tensor::zeros(&[4]),
        };
        let model = ConceptModel::init(8, crate::target_model::FEATURE_DIM, &head, &mut rng).unwrap();
        let split = generate_dataset(1, 5).unwrap();
        let target = {
            let hyper = TrainHyper { epochs: 1, ..Default::default() };
            crate::target_model::train_target(&split, &hyper, 1).unwrap().0
        };
        match conceptized_forward(&target, &split.train[0].pixels, &model) {
            Err(Error::State(_)) => {}
            other => panic!("expected state error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn init_rejects_bad_m() {
        let head = HeadParams {
            weight: Tensor::zeros(&[4, 8]),
            bias: Tensor::zeros(&[4]),
        };
        let mut rng = RngStream::new(0);
        assert!(ConceptModel::init(1, 8, &head, &mut rng).is_err());
        assert!(ConceptModel::init(9, 8, &head, &mut rng).is_err());
        assert!(ConceptModel::init(8, 8, &head, &mut rng).is_ok());
    }

    #[test]
    fn concept_gradients_match_finite_differences() {
        let (t, n, m) = (3, 5, 4);
        let mut rng = RngStream::new(12);
        for _ in 0..10 {
            let mut unit = vec![0.0f64; t * n];
            for i in 0..t {
                let raw: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
                unit[i * n..(i + 1) * n].copy_from_slice(&l2_normalize_slice(&raw).0);
            }
            let unit_stack = Tensor::from_vec(&[t, n], unit).unwrap();
            // Keep concept rows well inside the unit ball so the score clamp
            // stays inactive across finite-difference probes.
            let bank_data: Vec<f64> = (0..m * n).map(|_| rng.range_f64(-0.3, 0.3)).collect();
            let w_data: Vec<f64> = (0..n * m).map(|_| rng.range_f64(-0.5, 0.5)).collect();
            let b_data: Vec<f64> = (0..n).map(|_| rng.range_f64(-0.5, 0.5)).collect();
            let head = HeadParams {
                weight: Tensor::from_vec(&[3, n], (0..3 * n).map(|_| rng.normal()).collect())
                    .unwrap(),
                bias: Tensor::zeros(&[3]),
            };
            let label = rng.below(3);

            let loss_fn = |bank_v: &[f64], w_v: &[f64], b_v: &[f64]| -> f64 {
                let bank = ConceptBank::from_tensor(
                    Tensor::from_vec(&[m, n], bank_v.to_vec()).unwrap(),
                )
                .unwrap();
                let recon = ReconMap {
                    weight: Tensor::from_vec(&[n, m], w_v.to_vec()).unwrap(),
                    bias: Tensor::from_vec(&[n], b_v.to_vec()).unwrap(),
                };
                let scores = scores_from_normalized(&unit_stack, &bank);
                let logits = scored_logits(&scores, None, &recon, &head).unwrap();
                cross_entropy_with_grad_slice(logits.data(), label).unwrap().0
            };

            let bank = ConceptBank::from_tensor(
                Tensor::from_vec(&[m, n], bank_data.clone()).unwrap(),
            )
            .unwrap();
            let recon = ReconMap {
                weight: Tensor::from_vec(&[n, m], w_data.clone()).unwrap(),
                bias: Tensor::from_vec(&[n], b_data.clone()).unwrap(),
            };
            let mut grads = ConceptGrads {
                bank: Tensor::zeros(&[m, n]),
                weight: Tensor::zeros(&[n, m]),
                bias: Tensor::zeros(&[n]),
            };
            concept_loss_grads(&unit_stack, label, &bank, &recon, &head, &mut grads, 1.0)
                .unwrap();

            let fd_bank = central_diff_grad(&bank_data, 1e-5, |v| loss_fn(v, &w_data, &b_data));
            let fd_w = central_diff_grad(&w_data, 1e-5, |v| loss_fn(&bank_data, v, &b_data));
            let fd_b = central_diff_grad(&b_data, 1e-5, |v| loss_fn(&bank_data, &w_data, v));
            assert!(rel_error(grads.bank.data(), &fd_bank) < 1e-4);
            assert!(rel_error(grads.weight.data(), &fd_w) < 1e-4);
            assert!(rel_error(grads.bias.data(), &fd_b) < 1e-4);
        }
    }

    #[test]
    fn discovery_trains_and_freezes_target() {
        let split = generate_dataset(41, 8).unwrap();
        let (target, _) = crate::target_model::train_target(
            &split,
            &TrainHyper { epochs: 2, ..Default::default() },
            9,
        )
        .unwrap();
        let before = target.clone();
        let hyper = TrainHyper { lr: 1e-3, epochs: 4, batch: 8, weight_decay: 0.0 };
        let (model, report) = discover_concepts(&split, &target, 8, &hyper, 13).unwrap();
        assert_eq!(target, before);
        assert!(model.is_trained());
        assert!(report.loss_curve.last().unwrap() <= report.loss_curve.first().unwrap());
        // Unit-norm contract after training.
        for j in 0..model.bank.count() {
            let norm: f64 = model.bank.vector(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        // Determinism.
        let (model2, _) = discover_concepts(&split, &target, 8, &hyper, 13).unwrap();
        assert_eq!(model.bank.tensor().data(), model2.bank.tensor().data());
        assert_eq!(model.recon.weight.data(), model2.recon.weight.data());
    }

    #[test]
    fn fidelity_matches_hand_count() {
        let split = generate_dataset(43, 5).unwrap();
        let (target, _) = crate::target_model::train_target(
            &split,
            &TrainHyper { epochs: 1, ..Default::default() },
            3,
        )
        .unwrap();
        let hyper = TrainHyper { lr: 1e-3, epochs: 2, batch: 8, weight_decay: 0.0 };
        let (model, _) = discover_concepts(&split, &target, 4, &hyper, 5).unwrap();
        let subset = &split.train[..10.min(split.train.len())];
        let fid = fidelity(subset, &target, &model).unwrap();
        let mut hand = 0usize;
        for img in subset {
            let a = crate::target_model::argmax(
                conceptized_forward(&target, &img.pixels, &model).unwrap().data(),
            );
            let b = predict(&target, &img.pixels).unwrap();
            if a == b {
                hand += 1;
            }
        }
        assert_eq!(fid, hand as f64 / subset.len() as f64);
        assert!(fidelity(&[], &target, &model).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = RngStream::new(50);
        let head = HeadParams {
            weight: Tensor::from_vec(
                &[4, 64],
                (0..4 * 64).map(|_| rng.normal()).collect(),
            )
            .unwrap(),
            bias: Tensor::zeros(&[4]),
        };
        let mut model = ConceptModel::init(8, 64, &head, &mut rng).unwrap();
        model.trained = true;
        let meta = ConceptMeta {
            m: 8,
            seed: 50,
            fidelity: 0.97,
            hyper: TrainHyper::default(),
        };
        let path = dir.path().join("concepts.ckpt");
        save_concepts(&path, &model, &meta).unwrap();
        let (loaded, meta2) = load_concepts(&path).unwrap();
        assert_eq!(loaded.bank.tensor().data(), model.bank.tensor().data());
        assert_eq!(loaded.recon.weight.data(), model.recon.weight.data());
        assert_eq!(loaded.head.weight.data(), model.head.weight.data());
        assert!(loaded.is_trained());
        assert_eq!(meta2.m, 8);
    }
}
