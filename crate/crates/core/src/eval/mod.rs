//! Experiment orchestration: simulatability measurement, budget sweeps over
//! selection strategies, and the matched/mismatched expertise experiment.

pub mod config;
pub mod pipeline;
pub mod report;

use std::collections::BTreeMap;

pub use config::ExperimentConfig;
pub use report::{curves_from_csv, curves_to_csv, curves_to_svg, emit_report, CurvePoint};

use crate::concepts::{fidelity, scored_dist, ConceptModel};
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};
use crate::selection::{
    bt_score, dwm_score, egl_score, egl_shift_score, hypercorrection_score, plda_fit,
    random_select, rank_and_select, CandidatePool, SelectionRanking, Strategy,
};
use crate::synthdata::{merge_class, DatasetSplit, LabeledImage, UserKind};
use crate::target_model::{argmax, ConvNetParams, TargetMeta};
use crate::user_model::{
    fit_expertise, retrain_user, score_images, simulate_annotations, ExpertiseVector, ScoredImage,
};

/// Fraction of test items where the user model predicts the target model's
/// prediction (not the true label).
pub fn simulatability(
    omega: &[f64],
    test: &[LabeledImage],
    target: &ConvNetParams,
    model: &ConceptModel,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let scored = score_images(test, target, model)?;
    simulatability_scored(omega, &scored, model)
}

/// Simulatability from precomputed concept scores and target predictions.
pub fn simulatability_scored(
    omega: &[f64],
    scored: &[ScoredImage],
    model: &ConceptModel,
) -> Result<f64> {
    if scored.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let mut hits = 0usize;
    for si in scored {
        let dist = scored_dist(&si.scores, Some(omega), &model.recon, &model.head)?;
        if argmax(&dist) == si.target_label {
            hits += 1;
        }
    }
    Ok(hits as f64 / scored.len() as f64)
}

/// Every artifact of one fully trained experiment under a master seed.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub split: DatasetSplit,
    pub target: ConvNetParams,
    pub target_meta: TargetMeta,
    pub concept_model: ConceptModel,
    pub concept_fidelity: f64,
    pub pool: CandidatePool,
    pub train_scored: Vec<ScoredImage>,
    pub test_scored: Vec<ScoredImage>,
    pub users: BTreeMap<UserKind, ExpertiseVector>,
}

impl Pipeline {
    /// Train the whole chain from scratch: dataset, target, concepts, both
    /// simulated users, and the candidate pool.
    pub fn build(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let split = crate::synthdata::generate_dataset(cfg.seed, cfg.n_per_class)?;
        let (target, report) =
            crate::target_model::train_target(&split, &cfg.target_hyper, cfg.seed)?;
        let target_meta =
            crate::target_model::default_meta(cfg.seed, &cfg.target_hyper, report.test_accuracy);
        let (concept_model, _) = crate::concepts::discover_concepts(
            &split,
            &target,
            cfg.concept_m,
            &cfg.concept_hyper,
            cfg.seed,
        )?;
        let concept_fidelity = fidelity(&split.test, &target, &concept_model)?;
        let mut pipe = Pipeline::assemble(cfg, split, target, target_meta, concept_model, concept_fidelity)?;
        for kind in [UserKind::ColorUser, UserKind::ShapeUser] {
            let expertise = pipe.fit_user(kind)?;
            pipe.users.insert(kind, expertise);
        }
        Ok(pipe)
    }

    /// Assemble the derived caches (pool, score matrices) around trained
    /// artifacts.
    pub fn assemble(
        cfg: ExperimentConfig,
        split: DatasetSplit,
        target: ConvNetParams,
        target_meta: TargetMeta,
        concept_model: ConceptModel,
        concept_fidelity: f64,
    ) -> Result<Self> {
        let pool = crate::selection::prepare_pool(&split.train, &target, &concept_model)?;
        let train_scored: Vec<ScoredImage> = pool
            .features
            .iter()
            .map(|f| ScoredImage {
                id: f.id,
                scores: f.raw_scores.clone(),
                target_label: f.target_label,
            })
            .collect();
        let test_scored = score_images(&split.test, &target, &concept_model)?;
        Ok(Pipeline {
            cfg,
            split,
            target,
            target_meta,
            concept_model,
            concept_fidelity,
            pool,
            train_scored,
            test_scored,
            users: BTreeMap::new(),
        })
    }

    /// Fit one user's expertise vector from its simulated annotations.
    pub fn fit_user(&self, kind: UserKind) -> Result<ExpertiseVector> {
        let annotations = simulate_annotations(&self.split, kind);
        let seed = RngStream::new(self.cfg.seed)
            .substream(&format!("fit/{}", kind.as_str()))
            .seed();
        fit_expertise(
            &annotations,
            &self.train_scored,
            &self.concept_model,
            kind,
            &self.cfg.user_hyper,
            seed,
        )
    }

    pub fn user(&self, kind: UserKind) -> Result<&ExpertiseVector> {
        self.users.get(&kind).ok_or_else(|| {
            Error::MissingArtifact(format!("fitted user model for {}", kind.as_str()))
        })
    }

    fn id_index(&self) -> BTreeMap<u64, usize> {
        self.pool
            .features
            .iter()
            .enumerate()
            .map(|(i, f)| (f.id, i))
            .collect()
    }

    /// Retraining examples (score matrix, target label) for selected ids.
    fn examples_for(
        &self,
        ids: &[u64],
        id_index: &BTreeMap<u64, usize>,
    ) -> Result<Vec<(&Tensor, usize)>> {
        ids.iter()
            .map(|id| {
                let &idx = id_index
                    .get(id)
                    .ok_or_else(|| Error::InvalidInput(format!("unknown candidate id {id}")))?;
                let f = &self.pool.features[idx];
                let scores = if self.cfg.masked_retraining {
                    &f.masked_scores
                } else {
                    &f.raw_scores
                };
                Ok((scores, f.target_label))
            })
            .collect()
    }
}

/// Full score list of one deterministic strategy over the candidate pool.
pub fn strategy_scores(
    pipe: &Pipeline,
    strategy: Strategy,
    omega: &[f64],
    user_kind: UserKind,
) -> Result<Vec<(u64, f64)>> {
    let model = &pipe.concept_model;
    match strategy {
        Strategy::Random => Err(Error::InvalidInput(
            "random selection draws instead of scoring".into(),
        )),
        Strategy::Hypercorrection => pipe
            .pool
            .features
            .iter()
            .map(|f| Ok((f.id, hypercorrection_score(omega, f, model)?)))
            .collect(),
        Strategy::Egl => pipe
            .pool
            .features
            .iter()
            .map(|f| Ok((f.id, egl_score(omega, f, model)?)))
            .collect(),
        Strategy::EglShift => pipe
            .pool
            .features
            .iter()
            .map(|f| Ok((f.id, egl_shift_score(omega, f, model)?)))
            .collect(),
        Strategy::Dwm => {
            let latents: Vec<Vec<f64>> =
                pipe.pool.features.iter().map(|f| f.latent.clone()).collect();
            pipe.pool
                .features
                .iter()
                .map(|f| Ok((f.id, dwm_score(omega, f, &latents, model)?)))
                .collect()
        }
        Strategy::Bt => bt_strategy_scores(pipe, user_kind),
    }
}

fn bt_strategy_scores(pipe: &Pipeline, user_kind: UserKind) -> Result<Vec<(u64, f64)>> {
    let annotations = simulate_annotations(&pipe.split, user_kind);
    let latents: Vec<Vec<f64>> = pipe.pool.features.iter().map(|f| f.latent.clone()).collect();
    let labels: Vec<usize> = pipe
        .pool
        .features
        .iter()
        .map(|f| {
            annotations
                .get(f.id)
                .ok_or_else(|| Error::InvalidInput(format!("no annotation for image {}", f.id)))
        })
        .collect::<Result<_>>()?;
    let mut model = plda_fit(&latents, &labels)?;
    if pipe.cfg.bt_exemplar {
        let mut rng = RngStream::new(pipe.cfg.seed).substream("bt/exemplar");
        let classes: Vec<usize> = model.class_means.keys().copied().collect();
        for y in classes {
            let members: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == y)
                .map(|(i, _)| i)
                .collect();
            let pick = members[rng.below(members.len())];
            let exemplar = model.whiten(&latents[pick])?;
            model.class_means.insert(y, exemplar);
        }
    }
    pipe.pool
        .features
        .iter()
        .map(|f| {
            let y = merge_class(f.target_label, user_kind);
            Ok((f.id, bt_score(&model, &f.latent, y)?))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub strategy: Strategy,
    pub p: f64,
    pub run: u32,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub cells: Vec<SweepCell>,
    pub curves: Vec<CurvePoint>,
}

fn budget(p: f64, pool: usize) -> usize {
    ((p * pool as f64).ceil() as usize).clamp(1, pool)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn aggregate_cells(cells: &[SweepCell]) -> Vec<CurvePoint> {
    let mut grouped: BTreeMap<(String, u64), Vec<f64>> = BTreeMap::new();
    for cell in cells {
        grouped
            .entry((cell.strategy.name().to_string(), cell.p.to_bits()))
            .or_default()
            .push(cell.accuracy);
    }
    let mut curves: Vec<CurvePoint> = grouped
        .into_iter()
        .map(|((strategy, p_bits), accs)| {
            let (mean_acc, std_acc) = mean_std(&accs);
            CurvePoint {
                strategy,
                p: f64::from_bits(p_bits),
                mean_acc,
                std_acc,
                runs: accs.len() as u32,
            }
        })
        .collect();
    curves.sort_by(|a, b| {
        a.strategy
            .cmp(&b.strategy)
            .then(a.p.partial_cmp(&b.p).expect("finite p"))
    });
    curves
}

/// Sweep every configured strategy over the budget grid.
///
/// Deterministic strategies are ranked once per fitted user; each
/// (strategy, p, run) cell retrains from the originally fitted expertise
/// vector with its own derived seed, and the random baseline additionally
/// redraws its selection per cell.
pub fn run_sweep(pipe: &Pipeline) -> Result<SweepOutput> {
    let cfg = &pipe.cfg;
    let user = pipe.user(cfg.user_kind)?;
    let root = RngStream::new(cfg.seed);
    let id_index = pipe.id_index();
    let pool_ids: Vec<u64> = pipe.pool.features.iter().map(|f| f.id).collect();
    let n = pool_ids.len();

    // One full ranking per deterministic strategy for the fitted user.
    let mut fixed_rankings: BTreeMap<Strategy, SelectionRanking> = BTreeMap::new();
    if !cfg.refit_user_per_run {
        for &strategy in &cfg.strategies {
            if strategy == Strategy::Random {
                continue;
            }
            let scores = strategy_scores(pipe, strategy, &user.omega, cfg.user_kind)?;
            fixed_rankings.insert(
                strategy,
                rank_and_select(&scores, n, strategy.name(), cfg.seed)?,
            );
        }
    }

    let mut cells = Vec::new();
    for run in 0..cfg.runs {
        let run_user;
        let omega = if cfg.refit_user_per_run {
            let seed = root.substream_indexed("sweep/refit", run as u64).seed();
            let annotations = simulate_annotations(&pipe.split, cfg.user_kind);
            run_user = fit_expertise(
                &annotations,
                &pipe.train_scored,
                &pipe.concept_model,
                cfg.user_kind,
                &cfg.user_hyper,
                seed,
            )?;
            &run_user.omega
        } else {
            &user.omega
        };
        let mut run_rankings: BTreeMap<Strategy, SelectionRanking> = BTreeMap::new();
        if cfg.refit_user_per_run {
            for &strategy in &cfg.strategies {
                if strategy == Strategy::Random {
                    continue;
                }
                let scores = strategy_scores(pipe, strategy, omega, cfg.user_kind)?;
                run_rankings.insert(
                    strategy,
                    rank_and_select(&scores, n, strategy.name(), cfg.seed)?,
                );
            }
        }
        for (p_idx, &p) in cfg.p_grid.iter().enumerate() {
            let m = budget(p, n);
            for &strategy in &cfg.strategies {
                let ids: Vec<u64> = if strategy == Strategy::Random {
                    let mut rng = root
                        .substream_indexed(&format!("sweep/select/random/p{p_idx}"), run as u64);
                    random_select(&mut rng, &pool_ids, m)?.ids()
                } else {
                    let ranking = if cfg.refit_user_per_run {
                        &run_rankings[&strategy]
                    } else {
                        &fixed_rankings[&strategy]
                    };
                    ranking.ids().into_iter().take(m).collect()
                };
                let examples = pipe.examples_for(&ids, &id_index)?;
                let seed = root
                    .substream_indexed(
                        &format!("sweep/retrain/{}/p{p_idx}", strategy.name()),
                        run as u64,
                    )
                    .seed();
                let retrained =
                    retrain_user(omega, &examples, &pipe.concept_model, &cfg.user_hyper, seed)
                        .map_err(|e| Error::State(format!("retraining stage: {e}")))?;
                let accuracy =
                    simulatability_scored(&retrained, &pipe.test_scored, &pipe.concept_model)
                        .map_err(|e| Error::State(format!("evaluation stage: {e}")))?;
                cells.push(SweepCell {
                    strategy,
                    p,
                    run,
                    accuracy,
                });
            }
        }
    }
    let curves = aggregate_cells(&cells);
    Ok(SweepOutput { cells, curves })
}

#[derive(Debug, Clone)]
pub struct MatchedCell {
    pub p: f64,
    pub run: u32,
    pub matched: f64,
    pub mismatched: f64,
}

#[derive(Debug, Clone)]
pub struct MatchedOutput {
    pub cells: Vec<MatchedCell>,
    pub curves: Vec<CurvePoint>,
}

/// Retrain `user_a` on examples ranked by the hypercorrection effect under
/// its own expertise (matched) versus under `user_b`'s expertise
/// (mismatched); both arms share retraining seeds so they differ only in
/// the selected examples.
pub fn matched_mismatched(
    pipe: &Pipeline,
    user_a: UserKind,
    user_b: UserKind,
) -> Result<MatchedOutput> {
    let cfg = &pipe.cfg;
    let omega_a = &pipe.user(user_a)?.omega;
    let omega_b = &pipe.user(user_b)?.omega;
    let root = RngStream::new(cfg.seed);
    let id_index = pipe.id_index();
    let n = pipe.pool.features.len();

    let scores_a = strategy_scores(pipe, Strategy::Hypercorrection, omega_a, user_a)?;
    let scores_b = strategy_scores(pipe, Strategy::Hypercorrection, omega_b, user_b)?;
    let ranking_a = rank_and_select(&scores_a, n, "matched", cfg.seed)?;
    let ranking_b = rank_and_select(&scores_b, n, "mismatched", cfg.seed)?;

    let mut cells = Vec::new();
    for run in 0..cfg.runs {
        for (p_idx, &p) in cfg.p_grid.iter().enumerate() {
            let m = budget(p, n);
            let seed = root
                .substream_indexed(&format!("mm/retrain/p{p_idx}"), run as u64)
                .seed();
            let evaluate = |ranking: &SelectionRanking| -> Result<f64> {
                let ids: Vec<u64> = ranking.ids().into_iter().take(m).collect();
                let examples = pipe.examples_for(&ids, &id_index)?;
                let retrained =
                    retrain_user(omega_a, &examples, &pipe.concept_model, &cfg.user_hyper, seed)?;
                simulatability_scored(&retrained, &pipe.test_scored, &pipe.concept_model)
            };
            let matched = evaluate(&ranking_a)?;
            let mismatched = evaluate(&ranking_b)?;
            cells.push(MatchedCell {
                p,
                run,
                matched,
                mismatched,
            });
        }
    }

    let mut curves = Vec::new();
    for name in ["matched", "mismatched"] {
        let mut by_p: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for c in &cells {
            let v = if name == "matched" { c.matched } else { c.mismatched };
            by_p.entry(c.p.to_bits()).or_default().push(v);
        }
        for (p_bits, accs) in by_p {
            let (mean_acc, std_acc) = mean_std(&accs);
            curves.push(CurvePoint {
                strategy: name.to_string(),
                p: f64::from_bits(p_bits),
                mean_acc,
                std_acc,
                runs: accs.len() as u32,
            });
        }
    }
    curves.sort_by(|a, b| {
        a.strategy
            .cmp(&b.strategy)
            .then(a.p.partial_cmp(&b.p).expect("finite p"))
    });
    Ok(MatchedOutput { cells, curves })
}
