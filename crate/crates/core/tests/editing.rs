use std::sync::OnceLock;

use setke_core::data::{generate_synthetic_corpus, CorpusSpec, SyntheticCorpus};
use setke_core::editor::{
    apply_edit, assign, optimize_delta, sample_prompts, slot_probabilities, AssignmentMode, CovarianceCache,
    EditObjective, EditPlan, EditorConfig,
};
use setke_core::experiment::{edit_case, EditArtifacts, EditSession, EditorKind};
use setke_core::model::train::{fact_recall, train_toy, TrainConfig};
use setke_core::model::{ModelConfig, ToyLM};

fn world() -> &'static (SyntheticCorpus, ToyLM) {
    static WORLD: OnceLock<(SyntheticCorpus, ToyLM)> = OnceLock::new();
    WORLD.get_or_init(|| {
        let spec = CorpusSpec {
            n_subjects: 18,
            profile: vec![3, 1, 2],
            object_pool: 80,
            ..CorpusSpec::default()
        };
        let corpus = generate_synthetic_corpus(&spec).unwrap();
        let train = TrainConfig {
            epochs: 40,
            lr: 1e-2,
            ..TrainConfig::default()
        };
        let model = train_toy(ModelConfig::fixture(0), &corpus.sentences, &train).unwrap();
        (corpus, model)
    })
}

fn config() -> EditorConfig {
    EditorConfig::toy(6)
}

#[test]
fn trained_fixture_recalls_its_facts() {
    let (corpus, model) = world();
    let recall = fact_recall(model, &corpus.recall_probes()).unwrap();
    assert!(recall >= 0.95, "{recall}");
}

#[test]
fn matching_never_loses_to_the_fixed_order() {
    let (corpus, model) = world();
    let cfg = config();
    for inst in corpus.instances.iter().filter(|i| i.objects.len() == 3) {
        let obj = EditObjective::build(model, inst, &cfg).unwrap();
        let grid = slot_probabilities(model, &obj, 4, &vec![0.0; model.config.d_model]).unwrap();
        let score = |p: &[usize]| -> f64 { (0..3).map(|j| -grid.get(j, p[j])).sum() };
        let h = assign(&obj, &grid, AssignmentMode::Hungarian).unwrap();
        let i = assign(&obj, &grid, AssignmentMode::Identity).unwrap();
        assert!(score(&h.permutation) <= score(&i.permutation) + 1e-12);
    }
}

#[test]
fn dominant_targets_stop_early() {
    let (corpus, model) = world();
    let inst = corpus.instances.iter().find(|i| i.objects.len() == 1).unwrap();
    let mut same = inst.clone();
    same.targets = inst.objects.clone();
    let cfg = EditorConfig {
        early_stop_prob: 0.5,
        ..config()
    };
    let obj = EditObjective::build(model, &same, &cfg).unwrap();
    let plan = EditPlan::from_config(vec![2, 3, 4], &cfg);
    let out = optimize_delta(model, &obj, &plan, AssignmentMode::Hungarian).unwrap();
    assert!(out.early_stopped);
    assert_eq!(out.trajectory.len(), 1);
    assert!(out.delta.iter().all(|&v| v == 0.0));
}

#[test]
fn batched_edit_raises_every_matched_target() {
    let (corpus, model) = world();
    let cfg = config();
    let layers = [2, 3, 4];
    let prompts = sample_prompts(model, &corpus.sentences, cfg.covariance_samples, 0).unwrap();
    let cov = CovarianceCache::compute(model, &prompts, &layers, cfg.covariance_weight).unwrap();
    let batch: Vec<_> = corpus.instances.iter().filter(|i| i.objects.len() == 3).take(3).cloned().collect();
    let mut edited = model.clone();
    let report = apply_edit(&mut edited, &batch, &cfg, &layers, &cov, AssignmentMode::Hungarian).unwrap();
    assert_eq!(report.instances.len(), 3);
    for r in &report.instances {
        for (post, pre) in r.post.iter().zip(&r.pre) {
            assert!(post > pre, "{r:?}");
        }
    }
    for s in &report.solutions {
        assert!(s.relative_residual <= 1e-8);
    }
}

#[test]
fn single_edit_raises_the_target() {
    let (corpus, model) = world();
    let session = EditSession::prepare(model.clone(), config(), &corpus.sentences, &[]).unwrap();
    let inst = corpus.instances.iter().find(|i| i.objects.len() == 1).unwrap();
    let (_, art) = edit_case(&session, EditorKind::Setke, inst).unwrap();
    let EditArtifacts::Set(report) = art else {
        panic!("set edit expected")
    };
    let r = &report.instances[0];
    assert!(r.post[0] > r.pre[0]);
    assert!(r.post[0] > 0.5, "{r:?}");
}
