//! Example-selection strategies: hypercorrection, random, expected gradient
//! length and its shift/density-weighted variants, and Bayesian teaching.

pub mod plda;

use std::fs;
use std::path::Path;

use crate::concepts::{concept_scores, scored_dist, ConceptModel};
use crate::error::{Error, Result};
use crate::explain::{apply_mask, Saliency};
use crate::numerics::{RngStream, Tensor};
use crate::synthdata::LabeledImage;
use crate::target_model::{argmax, forward, pooled_mean, ConvNetParams};
use crate::user_model::omega_loss_grad;

pub use plda::{bt_score, plda_fit, PldaModel};

const DWM_BETA: f64 = 1.0;

/// The selection strategies the harness can sweep over.
#[derive(
    Debug,
    Clone,
    Copy,
    PartialEq,
    Eq,
    PartialOrd,
    Ord,
    Hash,
    serde::Serialize,
    serde::Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Hypercorrection,
    Random,
    Egl,
    EglShift,
    Dwm,
    #[serde(rename = "bt")]
    Bt,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Hypercorrection => "hypercorrection",
            Strategy::Random => "random",
            Strategy::Egl => "egl",
            Strategy::EglShift => "egl_shift",
            Strategy::Dwm => "dwm",
            Strategy::Bt => "bt",
        }
    }

    pub fn parse(s: &str) -> Result<Strategy> {
        match s {
            "hypercorrection" => Ok(Strategy::Hypercorrection),
            "random" => Ok(Strategy::Random),
            "egl" => Ok(Strategy::Egl),
            "egl_shift" => Ok(Strategy::EglShift),
            "dwm" => Ok(Strategy::Dwm),
            "bt" => Ok(Strategy::Bt),
            other => Err(Error::Config(format!("unknown strategy '{other}'"))),
        }
    }

    pub fn all() -> [Strategy; 6] {
        [
            Strategy::Hypercorrection,
            Strategy::Random,
            Strategy::Egl,
            Strategy::EglShift,
            Strategy::Dwm,
            Strategy::Bt,
        ]
    }
}

/// One explanation example offered to a user: the image, its saliency for
/// the target-predicted class, and that predicted label.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub id: u64,
    pub image: Tensor,
    pub saliency: Saliency,
    pub target_label: usize,
}

impl Candidate {
    pub fn new(id: u64, image: Tensor, saliency: Saliency, target_label: usize) -> Result<Self> {
        if saliency.class != target_label {
            return Err(Error::InvalidInput(format!(
                "saliency explains class {} but the target predicted {}",
                saliency.class, target_label
            )));
        }
        Ok(Candidate {
            id,
            image,
            saliency,
            target_label,
        })
    }
}

/// Everything a strategy needs about one candidate, precomputed once:
/// concept scores of the raw and masked image plus the pooled latent.
#[derive(Debug, Clone)]
pub struct CandidateFeatures {
    pub id: u64,
    pub target_label: usize,
    pub raw_scores: Tensor,
    pub masked_scores: Tensor,
    pub latent: Vec<f64>,
}

pub fn candidate_features(
    candidate: &Candidate,
    target: &ConvNetParams,
    model: &ConceptModel,
) -> Result<CandidateFeatures> {
    let (stack, _) = forward(target, &candidate.image)?;
    let raw_scores = concept_scores(&stack, &model.bank)?;
    let latent = pooled_mean(&stack);
    let masked = apply_mask(&candidate.image, &candidate.saliency)?;
    let (masked_stack, _) = forward(target, &masked)?;
    let masked_scores = concept_scores(&masked_stack, &model.bank)?;
    Ok(CandidateFeatures {
        id: candidate.id,
        target_label: candidate.target_label,
        raw_scores,
        masked_scores,
        latent,
    })
}

/// The full candidate pool over a training split: each image explained for
/// its target-predicted class.
pub struct CandidatePool {
    pub features: Vec<CandidateFeatures>,
    pub saliencies: Vec<Saliency>,
}

pub fn prepare_pool(
    images: &[LabeledImage],
    target: &ConvNetParams,
    model: &ConceptModel,
) -> Result<CandidatePool> {
    let mut features = Vec::with_capacity(images.len());
    let mut saliencies = Vec::with_capacity(images.len());
    for img in images {
        // One raw forward serves the label, the latent, the raw scores, and
        // the saliency map; the masked image needs one more.
        let (stack, logits) = forward(target, &img.pixels)?;
        let label = argmax(logits.data());
        let (map, degenerate) = crate::explain::gradcam_from_stack(
            &stack,
            &target.head,
            label,
            4,
            4,
            crate::synthdata::IMAGE_SIZE,
            crate::synthdata::IMAGE_SIZE,
        )?;
        let saliency = Saliency {
            map,
            image_id: img.id,
            class: label,
            degenerate,
        };
        let masked = apply_mask(&img.pixels, &saliency)?;
        let (masked_stack, _) = forward(target, &masked)?;
        features.push(CandidateFeatures {
            id: img.id,
            target_label: label,
            raw_scores: concept_scores(&stack, &model.bank)?,
            masked_scores: concept_scores(&masked_stack, &model.bank)?,
            latent: pooled_mean(&stack),
        });
        saliencies.push(saliency);
    }
    Ok(CandidatePool {
        features,
        saliencies,
    })
}

/// Mean activation vector over stack positions (the pooled latent feature).
pub fn latent_feature(target: &ConvNetParams, image: &Tensor) -> Result<Vec<f64>> {
    let (stack, _) = forward(target, image)?;
    Ok(pooled_mean(&stack))
}

/// Hypercorrection effect: the user's confidence in the target label on the
/// raw image minus the confidence after masking by the explanation.
pub fn hypercorrection_score(
    omega: &[f64],
    features: &CandidateFeatures,
    model: &ConceptModel,
) -> Result<f64> {
    let raw = scored_dist(&features.raw_scores, Some(omega), &model.recon, &model.head)?;
    let masked = scored_dist(
        &features.masked_scores,
        Some(omega),
        &model.recon,
        &model.head,
    )?;
    Ok(raw[features.target_label] - masked[features.target_label])
}

fn egl_from_scores(
    omega: &[f64],
    scores: &Tensor,
    model: &ConceptModel,
) -> Result<f64> {
    let dist = scored_dist(scores, Some(omega), &model.recon, &model.head)?;
    let m = omega.len();
    let mut total = 0.0;
    let mut grad = vec![0.0f64; m];
    for (label, &p) in dist.iter().enumerate() {
        grad.fill(0.0);
        omega_loss_grad(scores, label, omega, model, &mut grad, 1.0)?;
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        total += p * norm;
    }
    Ok(total)
}

/// Expected gradient length on the masked input: the class-probability
/// weighted norm of the expertise gradient, the user model's only free
/// parameters.
pub fn egl_score(
    omega: &[f64],
    features: &CandidateFeatures,
    model: &ConceptModel,
) -> Result<f64> {
    egl_from_scores(omega, &features.masked_scores, model)
}

/// EGL on the masked input minus EGL on the raw input.
pub fn egl_shift_score(
    omega: &[f64],
    features: &CandidateFeatures,
    model: &ConceptModel,
) -> Result<f64> {
    Ok(egl_from_scores(omega, &features.masked_scores, model)?
        - egl_from_scores(omega, &features.raw_scores, model)?)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na <= 1e-12 || nb <= 1e-12 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Density factor of a candidate: mean cosine similarity between its latent
/// and every pool latent (the candidate itself included).
pub fn density_factor(candidate_latent: &[f64], pool_latents: &[Vec<f64>]) -> Result<f64> {
    if pool_latents.is_empty() {
        return Err(Error::InvalidInput("empty candidate pool".into()));
    }
    let sum: f64 = pool_latents
        .iter()
        .map(|l| cosine(candidate_latent, l))
        .sum();
    Ok(sum / pool_latents.len() as f64)
}

/// Density-weighted EGL: the EGL base term times the density factor raised
/// to beta = 1.
pub fn dwm_score(
    omega: &[f64],
    features: &CandidateFeatures,
    pool_latents: &[Vec<f64>],
    model: &ConceptModel,
) -> Result<f64> {
    let base = egl_score(omega, features, model)?;
    let density = density_factor(&features.latent, pool_latents)?;
    Ok(base * density.powf(DWM_BETA))
}

/// Ranked candidate list, highest score first.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRanking {
    pub strategy: String,
    pub seed: u64,
    pub entries: Vec<(u64, f64)>,
}

impl SelectionRanking {
    /// CSV with header `strategy,seed,rank,image_id,score`; scores printed
    /// with 17 significant digits so they re-parse exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,seed,rank,image_id,score\n");
        for (rank, (id, score)) in self.entries.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{:.16e}\n",
                self.strategy,
                self.seed,
                rank + 1,
                id,
                score
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|(id, _)| *id).collect()
    }
}

/// Order scored candidates descending, ties toward the lower image id, and
/// keep the first `k`.
pub fn rank_and_select(
    scores: &[(u64, f64)],
    k: usize,
    strategy: &str,
    seed: u64,
) -> Result<SelectionRanking> {
    if k > scores.len() {
        return Err(Error::InvalidInput(format!(
            "k = {k} exceeds pool size {}",
            scores.len()
        )));
    }
    if scores.iter().any(|(_, s)| !s.is_finite()) {
        return Err(Error::InvalidInput("non-finite strategy score".into()));
    }
    let mut entries = scores.to_vec();
    entries.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite scores")
            .then(a.0.cmp(&b.0))
    });
    entries.truncate(k);
    Ok(SelectionRanking {
        strategy: strategy.to_string(),
        seed,
        entries,
    })
}

/// Uniform selection without replacement. Entries carry the negated draw
/// position as a pseudo-score so the ranking order stays non-increasing.
pub fn random_select(rng: &mut RngStream, pool: &[u64], k: usize) -> Result<SelectionRanking> {
    if k > pool.len() {
        return Err(Error::InvalidInput(format!(
            "k = {k} exceeds pool size {}",
            pool.len()
        )));
    }
    let picks = rng.choose_k(pool.len(), k);
    let entries = picks
        .into_iter()
        .enumerate()
        .map(|(rank, idx)| (pool[idx], -(rank as f64)))
        .collect();
    Ok(SelectionRanking {
        strategy: "random".to_string(),
        seed: rng.seed(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concepts::discover_concepts;
    use crate::synthdata::generate_dataset;
    use crate::target_model::{train_target, TrainHyper};

    struct Fixture {
        target: ConvNetParams,
        model: ConceptModel,
        pool: CandidatePool,
    }

    fn fixture() -> Fixture {
        let split = generate_dataset(71, 6).unwrap();
        let (target, _) = train_target(
            &split,
            &TrainHyper {
                epochs: 2,
                ..Default::default()
            },
            2,
        )
        .unwrap();
        let (model, _) = discover_concepts(
            &split,
            &target,
            6,
            &TrainHyper {
                lr: 1e-3,
                epochs: 4,
                batch: 8,
                weight_decay: 0.0,
            },
            3,
        )
        .unwrap();
        let pool = prepare_pool(&split.train, &target, &model).unwrap();
        Fixture {
            target,
            model,
            pool,
        }
    }

    fn mid_omega(m: usize) -> Vec<f64> {
        (0..m).map(|j| 0.2 + 0.6 * (j as f64 / m as f64)).collect()
    }

    #[test]
    fn latent_feature_is_position_mean() {
        let fx = fixture();
        let split = generate_dataset(71, 6).unwrap();
        let img = &split.train[0].pixels;
        let latent = latent_feature(&fx.target, img).unwrap();
        let (stack, _) = forward(&fx.target, img).unwrap();
        // Direct per-channel mean oracle.
        for k in 0..stack.dim() {
            let mean: f64 = (0..stack.positions())
                .map(|p| stack.position(p)[k])
                .sum::<f64>()
                / stack.positions() as f64;
            assert!((latent[k] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn latent_of_constant_stack_is_that_vector() {
        // Constructed directly on the pooled-mean helper.
        let v = [1.5, -2.0, 0.25];
        let data: Vec<f64> = (0..4).flat_map(|_| v.to_vec()).collect();
        let stack = crate::target_model::ActivationStack::from_tensor(
            Tensor::from_vec(&[4, 3], data).unwrap(),
        )
        .unwrap();
        let mean = pooled_mean(&stack);
        for (a, b) in mean.iter().zip(&v) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_mask_gives_zero_hypercorrection() {
        let fx = fixture();
        let omega = mid_omega(fx.model.concept_count());
        for f in fx.pool.features.iter().take(10) {
            // Replace the masked scores by the raw ones, which is exactly
            // what an all-ones mask produces.
            let ident = CandidateFeatures {
                masked_scores: f.raw_scores.clone(),
                ..f.clone()
            };
            let s = hypercorrection_score(&omega, &ident, &fx.model).unwrap();
            assert_eq!(s, 0.0);
        }
    }

    #[test]
    fn hypercorrection_in_unit_interval() {
        let fx = fixture();
        let omega = mid_omega(fx.model.concept_count());
        for f in &fx.pool.features {
            let s = hypercorrection_score(&omega, f, &fx.model).unwrap();
            assert!((-1.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn full_ranking_matches_brute_force_reevaluation() {
        let fx = fixture();
        let omega = mid_omega(fx.model.concept_count());
        let scores: Vec<(u64, f64)> = fx
            .pool
            .features
            .iter()
            .map(|f| {
                (
                    f.id,
                    hypercorrection_score(&omega, f, &fx.model).unwrap(),
                )
            })
            .collect();
        let ranking = rank_and_select(&scores, scores.len(), "hypercorrection", 0).unwrap();
        // Recompute every score and verify the stored ordering.
        for window in ranking.entries.windows(2) {
            assert!(window[0].1 >= window[1].1);
        }
        for (id, score) in &ranking.entries {
            let f = fx.pool.features.iter().find(|f| f.id == *id).unwrap();
            let again = hypercorrection_score(&omega, f, &fx.model).unwrap();
            assert_eq!(again, *score);
        }
    }

    #[test]
    fn rank_and_select_contracts() {
        let scores = vec![(10u64, 1.0), (3, 2.0), (7, 2.0), (1, -1.0)];
        let full = rank_and_select(&scores, 4, "s", 0).unwrap();
        assert_eq!(full.ids(), vec![3, 7, 10, 1]);
        // Prefix property: top-k is a prefix of the full ordering.
        let top2 = rank_and_select(&scores, 2, "s", 0).unwrap();
        assert_eq!(top2.ids(), vec![3, 7]);
        assert!(rank_and_select(&scores, 5, "s", 0).is_err());
        assert!(rank_and_select(&[(1, f64::NAN)], 1, "s", 0).is_err());

        // Independent sort oracle: stable sort by descending score over an
        // id-sorted list.
        let mut oracle = scores.clone();
        oracle.sort_by_key(|(id, _)| *id);
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        assert_eq!(full.entries, oracle);
    }

    #[test]
    fn random_select_is_a_seeded_permutation() {
        let pool: Vec<u64> = (0..20).collect();
        let mut rng = RngStream::new(5);
        let all = random_select(&mut rng, &pool, 20).unwrap();
        let mut ids = all.ids();
        ids.sort_unstable();
        assert_eq!(ids, pool);

        let mut rng_a = RngStream::new(9);
        let mut rng_b = RngStream::new(9);
        let a = random_select(&mut rng_a, &pool, 5).unwrap();
        let b = random_select(&mut rng_b, &pool, 5).unwrap();
        assert_eq!(a.entries, b.entries);
        assert!(random_select(&mut rng_a, &pool, 21).is_err());
    }

    #[test]
    fn random_select_frequencies_are_uniform() {
        let pool: Vec<u64> = vec![0, 1, 2, 3];
        let mut counts = [0usize; 4];
        let draws = 10_000;
        let mut rng = RngStream::new(123);
        for _ in 0..draws {
            let pick = random_select(&mut rng, &pool, 1).unwrap().entries[0].0;
            counts[pick as usize] += 1;
        }
        let expect = draws as f64 * 0.25;
        let sigma = (draws as f64 * 0.25 * 0.75).sqrt();
        for &c in &counts {
            assert!((c as f64 - expect).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn egl_is_nonnegative_and_limit_case_holds() {
        let fx = fixture();
        let omega = mid_omega(fx.model.concept_count());
        let mut peaked = 0;
        for f in &fx.pool.features {
            let s = egl_score(&omega, f, &fx.model).unwrap();
            assert!(s >= 0.0);
            // When one class dominates, the score approaches that class's
            // gradient norm.
            let dist = scored_dist(&f.masked_scores, Some(&omega), &fx.model.recon, &fx.model.head)
                .unwrap();
            let (top, p) = dist
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap();
            if *p > 0.999 {
                peaked += 1;
                let mut grad = vec![0.0f64; omega.len()];
                omega_loss_grad(&f.masked_scores, top, &omega, &fx.model, &mut grad, 1.0)
                    .unwrap();
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                // Remaining classes contribute at most (1-p) * max norm.
                assert!((s - *p * norm).abs() < 0.05 * norm.max(1e-6) + 1e-6);
            }
        }
        let _ = peaked;
    }

    #[test]
    fn egl_shift_is_difference_of_two_egl_calls() {
        let fx = fixture();
        let omega = mid_omega(fx.model.concept_count());
        for f in fx.pool.features.iter().take(10) {
            let shift = egl_shift_score(&omega, f, &fx.model).unwrap();
            let masked = egl_from_scores(&omega, &f.masked_scores, &fx.model).unwrap();
            let raw = egl_from_scores(&omega, &f.raw_scores, &fx.model).unwrap();
            assert_eq!(shift, masked - raw);
        }
        // All-ones mask: both terms identical, shift exactly zero.
        let f = &fx.pool.features[0];
        let ident = CandidateFeatures {
            masked_scores: f.raw_scores.clone(),
            ..f.clone()
        };
        assert_eq!(egl_shift_score(&omega, &ident, &fx.model).unwrap(), 0.0);
    }

    #[test]
    fn dwm_reduces_to_egl_on_identical_latents() {
        let fx = fixture();
        let omega = mid_omega(fx.model.concept_count());
        let f = &fx.pool.features[0];
        let pool_latents = vec![f.latent.clone(); 7];
        let dwm = dwm_score(&omega, f, &pool_latents, &fx.model).unwrap();
        let egl = egl_score(&omega, f, &fx.model).unwrap();
        assert!((dwm - egl).abs() < 1e-12);
        assert!(dwm_score(&omega, f, &[], &fx.model).is_err());
    }

    #[test]
    fn density_factor_matches_pairwise_oracle() {
        let fx = fixture();
        let latents: Vec<Vec<f64>> = fx.pool.features.iter().map(|f| f.latent.clone()).collect();
        let cand = &fx.pool.features[3].latent;
        let got = density_factor(cand, &latents).unwrap();
        let mut acc = 0.0;
        for l in &latents {
            let dot: f64 = cand.iter().zip(l).map(|(a, b)| a * b).sum();
            let na: f64 = cand.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = l.iter().map(|v| v * v).sum::<f64>().sqrt();
            acc += if na <= 1e-12 || nb <= 1e-12 { 0.0 } else { dot / (na * nb) };
        }
        assert!((got - acc / latents.len() as f64).abs() < 1e-10);
    }

    #[test]
    fn candidate_requires_matching_saliency_class() {
        let img = Tensor::zeros(&[3, 32, 32]);
        let sal = Saliency::ones(0, 1);
        assert!(Candidate::new(0, img.clone(), sal.clone(), 2).is_err());
        assert!(Candidate::new(0, img, sal, 1).is_ok());
    }

    #[test]
    fn ranking_csv_round_trips() {
        let ranking = SelectionRanking {
            strategy: "egl".into(),
            seed: 7,
            entries: vec![(4, 0.123456789012345678), (2, -1.0 / 3.0)],
        };
        let csv = ranking.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "strategy,seed,rank,image_id,score");
        for (line, (id, score)) in lines.zip(&ranking.entries) {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields[0], "egl");
            assert_eq!(fields[1], "7");
            assert_eq!(fields[3], id.to_string());
            let parsed: f64 = fields[4].parse().unwrap();
            assert_eq!(parsed.to_bits(), score.to_bits());
        }
    }
}
