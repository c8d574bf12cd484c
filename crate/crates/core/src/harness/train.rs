use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{mlm_config, Checkpoint, CHECKPOINT_FILE};
use super::report::{write_json, ArmReport, ComparisonReport, MetricsReport, SeedResult};
use super::{few_shot_sample, DataBundle, EarlyStopping, ExperimentConfig};
use crate::autodiff::Tape;
use crate::candidate::{CandidateMatcher, CandidateSet, Scheme};
use crate::corpus::{build_triplets, evaluate_accuracy, GoldAlignment, StandardLibrary};
use crate::error::{Error, Result};
use crate::kb::KnowledgeVocab;
use crate::knowledge_encoder::{
    EmbeddingSources, KnowledgeEncoder, KnowledgeEncoderConfig, KnowledgeStrategy, SurfaceEncoder,
};
use crate::mlm::{train_step, MlmVocab, ToyMlm};
use crate::optim::{Adam, AdamConfig};
use crate::prompt::{parse_template, KnowledgeModule, PromptModel, TemplateSlot, Verbalizer};
use crate::tensor::ParamStore;

/// Stage-1 candidates for every split, computed once and shared by all
/// runs and arms of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    pub scheme: Scheme,
    pub k: usize,
    pub train: Vec<Vec<CandidateSet>>,
    pub dev: Vec<Vec<CandidateSet>>,
    pub test: Vec<Vec<CandidateSet>>,
    /// Recall@k on the test split.
    pub recall_at_k: f64,
}

impl Candidates {
    pub fn compute(data: &DataBundle, scheme: Scheme, k: usize) -> Result<Self> {
        let matcher = CandidateMatcher::new(data.library.clone(), scheme)?;
        let split = |rows: &[GoldAlignment]| {
            rows.iter()
                .map(|r| matcher.candidates_for(&r.mention.parts, k))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Candidates {
            scheme,
            k,
            train: split(&data.train)?,
            dev: split(&data.dev)?,
            test: split(&data.test)?,
            recall_at_k: if data.test.is_empty() {
                0.0
            } else {
                matcher.recall_at_k(&data.test, k)?
            },
        })
    }
}

fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fresh prompt model and its parameters for `config`.
pub fn build_model<R: Rng + ?Sized>(
    config: &ExperimentConfig,
    data: &DataBundle,
    rng: &mut R,
) -> Result<(PromptModel, ParamStore)> {
    let mut template = parse_template(config.template_spec())?;
    let verbalizer = Verbalizer::new(config.label_words_no.clone(), config.label_words_yes.clone())?;

    let hard: Vec<&str> = template
        .slots
        .iter()
        .filter_map(|s| match s {
            TemplateSlot::Hard(t) | TemplateSlot::Soft(Some(t)) => Some(t.as_str()),
            _ => None,
        })
        .collect();
    let vocab = MlmVocab::from_texts(
        data.library
            .terms()
            .iter()
            .map(String::as_str)
            .chain(data.train.iter().flat_map(|r| r.mention.parts.iter().map(String::as_str)))
            .chain(hard)
            .chain(config.label_words_no.iter().map(String::as_str))
            .chain(config.label_words_yes.iter().map(String::as_str)),
    );

    let mut store = ParamStore::new();
    let mlm = ToyMlm::new(&mut store, vocab, mlm_config(config), rng)?;
    let knowledge = if template.has_knowledge() {
        if config.knowledge_strategy == KnowledgeStrategy::None {
            return Err(Error::Config(
                "template has [know] slots but knowledge_strategy is none".into(),
            ));
        }
        let vocab = KnowledgeVocab::build(&data.kb);
        let sources = EmbeddingSources {
            surface: data.surface.as_ref().map(|s| s as &dyn SurfaceEncoder),
            static_table: data.static_table.as_ref(),
        };
        let encoder = KnowledgeEncoder::init_params(
            &mut store,
            &vocab,
            config.knowledge_strategy,
            sources,
            KnowledgeEncoderConfig {
                d_k: config.d_k,
                d_h: config.d_h,
                d_model: config.d_model,
            },
            rng,
        )?;
        Some(KnowledgeModule {
            kb: data.kb.clone(),
            vocab,
            encoder,
        })
    } else {
        None
    };
    template.init_soft_params(&mut store, &mlm, rng);
    let model = PromptModel::new(Box::new(mlm), template, verbalizer, knowledge, config.max_seq_len)?;
    Ok((model, store))
}

/// Predicted term sets keyed by row id.
pub fn predict_rows(
    model: &PromptModel,
    store: &ParamStore,
    rows: &[GoldAlignment],
    candidates: &[Vec<CandidateSet>],
    library: &StandardLibrary,
) -> Result<HashMap<usize, BTreeSet<String>>> {
    rows.iter()
        .zip(candidates)
        .map(|(row, cands)| Ok((row.id, model.predict(store, &row.mention, cands, library)?)))
        .collect()
}

pub fn evaluate_split(
    model: &PromptModel,
    store: &ParamStore,
    rows: &[GoldAlignment],
    candidates: &[Vec<CandidateSet>],
    library: &StandardLibrary,
) -> Result<f64> {
    let preds = predict_rows(model, store, rows, candidates, library)?;
    let golds: HashMap<usize, BTreeSet<String>> =
        rows.iter().map(|r| (r.id, r.gold_parts.clone())).collect();
    evaluate_accuracy(&preds, &golds)
}

/// One seed: sample, train with early stopping on dev, score the best
/// parameters on test.
pub fn run_seed(
    config: &ExperimentConfig,
    data: &DataBundle,
    candidates: &Candidates,
    seed: u64,
) -> Result<(SeedResult, PromptModel, ParamStore)> {
    if data.dev.is_empty() {
        return Err(Error::Data("dev split is empty".into()));
    }
    let sample = few_shot_sample(data.train.len(), config.shots, seed)?;
    let mut triplets = Vec::new();
    for &i in &sample {
        let row = &data.train[i];
        let lists: Vec<Vec<String>> = candidates.train[i].iter().map(CandidateSet::terms).collect();
        triplets.extend(build_triplets(&row.mention, &lists, row, &data.library)?);
    }

    let mut init_rng = seeded_stream(seed, 1);
    let mut shuffle_rng = seeded_stream(seed, 2);
    let mut dropout_rng = seeded_stream(seed, 3);
    let (model, mut store) = build_model(config, data, &mut init_rng)?;
    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        clip_norm: (config.grad_clip > 0.0).then_some(config.grad_clip),
        ..AdamConfig::default()
    });

    let mut stopping = EarlyStopping::new(config.patience_epochs, config.min_improvement);
    let mut best = store.clone();
    let mut dev_accuracies = Vec::new();
    let mut train_losses = Vec::new();
    for epoch in 1..=config.epochs {
        triplets.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (step, chunk) in triplets.chunks(config.batch_size).enumerate() {
            let batch: Vec<_> = chunk
                .iter()
                .map(|t| |tape: &mut Tape| model.training_example(tape, t))
                .collect();
            let loss = train_step(model.mlm.as_ref(), &mut store, &mut adam, &batch, Some(&mut dropout_rng))
                .map_err(|e| match e {
                    Error::Divergence(m) => {
                        Error::Divergence(format!("seed {seed}, epoch {epoch}, step {}: {m}", step + 1))
                    }
                    other => other,
                })?;
            loss_sum += loss;
            batches += 1;
        }
        train_losses.push(loss_sum / batches as f64);
        let dev = evaluate_split(&model, &store, &data.dev, &candidates.dev, &data.library)?;
        dev_accuracies.push(dev);
        let decision = stopping.observe(dev);
        log::info!(
            "{} seed {seed} epoch {epoch}: loss {:.4} dev {dev:.4}",
            config.name,
            loss_sum / batches as f64
        );
        if decision.improved {
            best = store.clone();
        }
        if decision.stop {
            break;
        }
    }
    let test_accuracy = evaluate_split(&model, &best, &data.test, &candidates.test, &data.library)?;
    let result = SeedResult {
        seed,
        test_accuracy,
        best_epoch: stopping.best_epoch(),
        dev_accuracies,
        train_losses,
    };
    Ok((result, model, best))
}

/// Run every seed of `config` on precomputed candidates. With `runs_root`,
/// writes `<root>/<name>/<seed>/checkpoint.json` per seed and the report
/// into `<root>/<name>/`.
pub fn train_with_candidates(
    config: &ExperimentConfig,
    data: &DataBundle,
    candidates: &Candidates,
    runs_root: Option<&Path>,
) -> Result<MetricsReport> {
    config.validate()?;
    if candidates.k != config.k_candidates || candidates.scheme != config.scheme {
        return Err(Error::Config(format!(
            "candidates were computed with k = {} ({}), config asks for k = {} ({})",
            candidates.k, candidates.scheme, config.k_candidates, config.scheme
        )));
    }
    let start = Instant::now();
    let mut results = Vec::new();
    for &seed in &config.seeds {
        let (result, model, store) = run_seed(config, data, candidates, seed)?;
        log::info!("{} seed {seed}: test accuracy {:.4}", config.name, result.test_accuracy);
        if let Some(root) = runs_root {
            let dir = root.join(&config.name).join(seed.to_string());
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            Checkpoint::capture(&model, &store, config, &result).save(dir.join(CHECKPOINT_FILE))?;
            write_json(dir.join("seed.json"), &result)?;
        }
        results.push(result);
    }
    let report = MetricsReport::new(config, candidates.recall_at_k, results, start.elapsed().as_secs_f64());
    if let Some(root) = runs_root {
        report.write(root.join(&config.name))?;
    }
    Ok(report)
}

pub fn train(config: &ExperimentConfig, data: &DataBundle, runs_root: Option<&Path>) -> Result<MetricsReport> {
    config.validate()?;
    let candidates = Candidates::compute(data, config.scheme, config.k_candidates)?;
    train_with_candidates(config, data, &candidates, runs_root)
}

fn run_arms(
    factor: &str,
    arms: Vec<(String, ExperimentConfig)>,
    data: &DataBundle,
    runs_root: Option<&Path>,
) -> Result<ComparisonReport> {
    let first = &arms[0].1;
    let candidates = Candidates::compute(data, first.scheme, first.k_candidates)?;
    let mut out = Vec::new();
    for (arm, config) in arms {
        let report = train_with_candidates(&config, data, &candidates, runs_root)?;
        out.push(ArmReport { arm, report });
    }
    let report = ComparisonReport {
        factor: factor.to_string(),
        arms: out,
    };
    if let Some(root) = runs_root {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        report.write(root.join(format!("{factor}-comparison.json")))?;
    }
    Ok(report)
}

/// Same protocol under each knowledge embedding strategy.
pub fn ablate_knowledge(
    config: &ExperimentConfig,
    data: &DataBundle,
    runs_root: Option<&Path>,
) -> Result<ComparisonReport> {
    let arms = [
        KnowledgeStrategy::PretrainedSurface,
        KnowledgeStrategy::StaticTable,
        KnowledgeStrategy::Random,
    ]
    .into_iter()
    .map(|s| {
        let c = ExperimentConfig {
            name: format!("{}-{s}", config.name),
            knowledge_strategy: s,
            ..config.clone()
        };
        c.validate().map(|()| (s.to_string(), c))
    })
    .collect::<Result<Vec<_>>>()?;
    run_arms("knowledge", arms, data, runs_root)
}

/// Same protocol under each of the five knowledge template presets.
pub fn ablate_templates(
    config: &ExperimentConfig,
    data: &DataBundle,
    runs_root: Option<&Path>,
) -> Result<ComparisonReport> {
    let arms = (1..=5)
        .map(|i| {
            let c = ExperimentConfig {
                name: format!("{}-preset{i}", config.name),
                template: format!("preset:{i}"),
                ..config.clone()
            };
            c.validate().map(|()| (format!("preset:{i}"), c))
        })
        .collect::<Result<Vec<_>>>()?;
    run_arms("template", arms, data, runs_root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{generate_synthetic, Shots, SyntheticConfig};

    fn tiny_data() -> DataBundle {
        generate_synthetic(
            &SyntheticConfig {
                train: 40,
                dev: 10,
                test: 10,
                ..SyntheticConfig::default()
            },
            9,
        )
        .unwrap()
    }

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            name: "tiny".into(),
            shots: Shots::Count(8),
            epochs: 2,
            batch_size: 8,
            seeds: vec![1, 2],
            k_candidates: 3,
            d_model: 8,
            n_blocks: 1,
            n_heads: 2,
            d_ff: 8,
            d_k: 16,
            d_h: 4,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let data = tiny_data();
        let a = train(&tiny_config(), &data, None).unwrap();
        let b = train(&tiny_config(), &data, None).unwrap();
        assert_eq!(a.accuracies, b.accuracies);
        assert_eq!(a.per_seed, b.per_seed);
        assert_eq!(a.accuracies.len(), 2);
        assert_eq!(a.mean_accuracy, a.accuracies.iter().sum::<f64>() / 2.0);
    }

    #[test]
    fn runs_layout_and_checkpoint_reload() {
        let data = tiny_data();
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            seeds: vec![4],
            ..tiny_config()
        };
        let report = train(&cfg, &data, Some(dir.path())).unwrap();
        let ckpt_path = dir.path().join("tiny").join("4").join(CHECKPOINT_FILE);
        assert!(dir.path().join("tiny").join("metrics.json").is_file());
        let ckpt = Checkpoint::load(&ckpt_path).unwrap();
        let (model, store) = ckpt.restore().unwrap();
        let cands = Candidates::compute(&data, cfg.scheme, cfg.k_candidates).unwrap();
        let acc = evaluate_split(&model, &store, &data.test, &cands.test, &data.library).unwrap();
        assert_eq!(acc, report.accuracies[0]);
    }

    #[test]
    fn knowledge_ablation_shares_protocol() {
        let data = tiny_data();
        let cfg = ExperimentConfig {
            seeds: vec![1],
            epochs: 1,
            ..tiny_config()
        };
        let r = ablate_knowledge(&cfg, &data, None).unwrap();
        let names: Vec<&str> = r.arms.iter().map(|a| a.arm.as_str()).collect();
        assert_eq!(names, ["pretrained-surface", "static-table", "random"]);
        assert!(r.arms.iter().all(|a| a.report.seeds == vec![1]));
        let manual = ExperimentConfig {
            template: "manual".into(),
            knowledge_strategy: KnowledgeStrategy::None,
            ..cfg
        };
        assert!(matches!(ablate_knowledge(&manual, &data, None), Err(Error::Config(_))));
    }
}
