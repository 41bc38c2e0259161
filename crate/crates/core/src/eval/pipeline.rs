//! File-backed pipeline stages: each stage loads the artifacts it needs
//! from the output directory and writes its own.

use std::fs;
use std::path::{Path, PathBuf};

use crate::concepts::{discover_concepts, fidelity, load_concepts, save_concepts, ConceptMeta};
use crate::error::{Error, Result};
use crate::eval::report::{curves_from_csv, curves_to_svg, emit_report};
use crate::eval::{matched_mismatched, run_sweep, strategy_scores, ExperimentConfig, Pipeline};
use crate::explain::save_saliency_cache;
use crate::numerics::RngStream;
use crate::selection::{random_select, rank_and_select, Strategy};
use crate::synthdata::{generate_dataset, load_dataset, save_dataset, UserKind};
use crate::target_model::{load_target, save_target, train_target};
use crate::user_model::{load_user, save_user};

pub struct ArtifactPaths {
    root: PathBuf,
}

impl ArtifactPaths {
    pub fn new(root: &Path) -> Self {
        ArtifactPaths {
            root: root.to_path_buf(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn target_ckpt(&self) -> PathBuf {
        self.root.join("target.ckpt")
    }

    pub fn concepts_ckpt(&self) -> PathBuf {
        self.root.join("concepts.ckpt")
    }

    pub fn user_ckpt(&self, kind: UserKind) -> PathBuf {
        self.root.join(format!("user_{}.ckpt", kind.as_str()))
    }

    pub fn saliency_dir(&self) -> PathBuf {
        self.root.join("saliency")
    }

    pub fn rankings_dir(&self) -> PathBuf {
        self.root.join("rankings")
    }

    pub fn ranking_csv(&self, strategy: Strategy) -> PathBuf {
        self.rankings_dir().join(format!("{}.csv", strategy.name()))
    }

    pub fn results_csv(&self) -> PathBuf {
        self.root.join("results.csv")
    }

    pub fn curves_svg(&self) -> PathBuf {
        self.root.join("curves.svg")
    }

    pub fn matched_csv(&self) -> PathBuf {
        self.root.join("matched_mismatched.csv")
    }

    pub fn matched_svg(&self) -> PathBuf {
        self.root.join("matched_mismatched.svg")
    }
}

pub fn stage_gen_data(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let paths = ArtifactPaths::new(&cfg.out_dir);
    let split = generate_dataset(cfg.seed, cfg.n_per_class)?;
    fs::create_dir_all(paths.dataset_dir())?;
    save_dataset(&paths.dataset_dir(), &split)
}

pub fn stage_train_target(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let paths = ArtifactPaths::new(&cfg.out_dir);
    let split = load_dataset(&paths.dataset_dir())?;
    let (params, report) = train_target(&split, &cfg.target_hyper, cfg.seed)?;
    let meta = crate::target_model::default_meta(cfg.seed, &cfg.target_hyper, report.test_accuracy);
    save_target(&paths.target_ckpt(), &params, &meta)
}

pub fn stage_concepts(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let paths = ArtifactPaths::new(&cfg.out_dir);
    let split = load_dataset(&paths.dataset_dir())?;
    let (target, _) = load_target(&paths.target_ckpt())?;
    let (model, _) = discover_concepts(&split, &target, cfg.concept_m, &cfg.concept_hyper, cfg.seed)?;
    let fid = fidelity(&split.test, &target, &model)?;
    let meta = ConceptMeta {
        m: cfg.concept_m,
        seed: cfg.seed,
        fidelity: fid,
        hyper: cfg.concept_hyper.clone(),
    };
    save_concepts(&paths.concepts_ckpt(), &model, &meta)
}

pub fn stage_fit_user(cfg: &ExperimentConfig, kind: UserKind) -> Result<()> {
    cfg.validate()?;
    let paths = ArtifactPaths::new(&cfg.out_dir);
    let pipe = load_pipeline(cfg)?;
    let expertise = pipe.fit_user(kind)?;
    let seed = RngStream::new(cfg.seed)
        .substream(&format!("fit/{}", kind.as_str()))
        .seed();
    save_user(&paths.user_ckpt(kind), &expertise, seed)
}

/// Rebuild a [`Pipeline`] around artifacts already on disk. User checkpoints
/// are picked up when present.
pub fn load_pipeline(cfg: &ExperimentConfig) -> Result<Pipeline> {
    cfg.validate()?;
    let paths = ArtifactPaths::new(&cfg.out_dir);
    let split = load_dataset(&paths.dataset_dir())?;
    let (target, target_meta) = load_target(&paths.target_ckpt())?;
    let (concept_model, concept_meta) = load_concepts(&paths.concepts_ckpt())?;
    let mut pipe = Pipeline::assemble(
        cfg.clone(),
        split,
        target,
        target_meta,
        concept_model,
        concept_meta.fidelity,
    )?;
    for kind in [UserKind::ColorUser, UserKind::ShapeUser] {
        let path = paths.user_ckpt(kind);
        if path.exists() {
            let (expertise, _) = load_user(&path)?;
            pipe.users.insert(kind, expertise);
        }
    }
    Ok(pipe)
}

/// Write the saliency cache and one full-pool ranking CSV per configured
/// strategy, truncated to `k` when given.
pub fn stage_select(cfg: &ExperimentConfig, k: Option<usize>) -> Result<()> {
    let paths = ArtifactPaths::new(&cfg.out_dir);
    let pipe = load_pipeline(cfg)?;
    let user = pipe.user(cfg.user_kind)?;
    save_saliency_cache(&paths.saliency_dir(), &pipe.pool.saliencies)?;
    fs::create_dir_all(paths.rankings_dir())?;
    let n = pipe.pool.features.len();
    let keep = k.unwrap_or(n);
    let pool_ids: Vec<u64> = pipe.pool.features.iter().map(|f| f.id).collect();
    for &strategy in &cfg.strategies {
        let ranking = if strategy == Strategy::Random {
            let mut rng = RngStream::new(cfg.seed).substream("select/random");
            random_select(&mut rng, &pool_ids, keep)?
        } else {
            let scores = strategy_scores(&pipe, strategy, &user.omega, cfg.user_kind)?;
            rank_and_select(&scores, keep, strategy.name(), cfg.seed)?
        };
        ranking.write_csv(&paths.ranking_csv(strategy))?;
    }
    Ok(())
}

pub fn stage_sweep(cfg: &ExperimentConfig) -> Result<()> {
    let pipe = load_pipeline(cfg)?;
    let output = run_sweep(&pipe)?;
    emit_report(&output.curves, &cfg.out_dir)?;
    Ok(())
}

pub fn stage_matched_mismatched(cfg: &ExperimentConfig) -> Result<()> {
    let paths = ArtifactPaths::new(&cfg.out_dir);
    let pipe = load_pipeline(cfg)?;
    let output = matched_mismatched(&pipe, UserKind::ColorUser, UserKind::ShapeUser)?;
    fs::write(
        paths.matched_csv(),
        crate::eval::report::curves_to_csv(&output.curves),
    )?;
    fs::write(paths.matched_svg(), curves_to_svg(&output.curves)?)?;
    Ok(())
}

/// Re-render the curve chart from an existing results table.
pub fn stage_report(cfg: &ExperimentConfig) -> Result<()> {
    let paths = ArtifactPaths::new(&cfg.out_dir);
    if !paths.results_csv().exists() {
        return Err(Error::MissingArtifact(format!(
            "results table {}",
            paths.results_csv().display()
        )));
    }
    let curves = curves_from_csv(&fs::read_to_string(paths.results_csv())?)?;
    fs::write(paths.curves_svg(), curves_to_svg(&curves)?)?;
    Ok(())
}

/// Run every stage in order under one master seed: dataset, target,
/// concepts, both users, rankings, and the sweep.
pub fn run_all(cfg: &ExperimentConfig) -> Result<()> {
    stage_gen_data(cfg)?;
    stage_train_target(cfg)?;
    stage_concepts(cfg)?;
    stage_fit_user(cfg, UserKind::ColorUser)?;
    stage_fit_user(cfg, UserKind::ShapeUser)?;
    stage_select(cfg, None)?;
    stage_sweep(cfg)?;
    stage_matched_mismatched(cfg)?;
    Ok(())
}
