use mfl_core::continual::*;
use mfl_core::data::{GrammarConfig, TaskOrder};
use mfl_core::math::checkpoint::Checkpoint;
use mfl_core::Error;

fn small_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        grammar: GrammarConfig { num_tasks: 3, seq_len: 16, sequences: 60, ..GrammarConfig::default() },
        pretrain: PretrainConfig { sequences: 120, epochs: 1, ..PretrainConfig::default() },
        train: TrainConfig { epochs: 1, ..TrainConfig::default() },
        ..RunConfig::default()
    }
}

#[test]
fn average_performance_of_a_known_row() {
    let finals = [48.8, 67.3, 18.8, 49.3, 70.1, 34.6, 48.3, 36.7];
    // Matrix scores are fractions. rows[j] holds scores after task j; each
    // task starts 5 points above its final score.
    let f: Vec<f64> = finals.iter().map(|v| v / 100.0).collect();
    let rows: Vec<Vec<f64>> = (0..8).map(|j| (0..=j).map(|i| if j == 7 || i == 7 { f[i] } else { f[i] + 0.05 }).collect()).collect();
    let m = ScoreMatrix::from_rows(&rows).unwrap();
    assert!((op_metric(&m, 8).unwrap() - 0.467375).abs() < 1e-12);
    // Every task except the last lost 0.05; the last term is zero.
    assert!((bwt_metric(&m, 8).unwrap() - (-0.05 * 7.0 / 8.0)).abs() < 1e-12);
    assert!((mean_scores(&finals).unwrap() - 46.7375).abs() < 1e-9);
}

#[test]
fn incomplete_matrices_are_state_errors() {
    let mut m = ScoreMatrix::new(3);
    m.set(0, 0, 0.5).unwrap();
    m.set(0, 1, 0.4).unwrap();
    m.set(1, 1, 0.6).unwrap();
    assert!((op_metric(&m, 2).unwrap() - 0.5).abs() < 1e-12);
    assert!(matches!(op_metric(&m, 3), Err(Error::State(_))));
    assert!(matches!(bwt_metric(&m, 4), Err(Error::Index(_))));
    assert!(mean_scores(&[]).is_err());
}

#[test]
fn default_architectures_have_matched_budgets() {
    let exp_cfg = small_config(0);
    let cfg = |arch| mfl_core::model::ModelConfig {
        vocab: exp_cfg.grammar.vocab,
        d_model: exp_cfg.d_model,
        max_len: exp_cfg.grammar.seq_len,
        attn_heads: exp_cfg.attn_heads,
        block: exp_cfg.archs.get(arch).clone(),
    };
    let models: Vec<_> = [Arch::Moe, Arch::MoeWide, Arch::Mhmoe, Arch::Dense].iter().map(|&a| mfl_core::model::ToyLm::new(cfg(a), 0).unwrap()).collect();
    for a in &models {
        for b in &models {
            check_matched_budget(a, b, exp_cfg.budget_tolerance).unwrap();
        }
    }
    let mut tight = exp_cfg.archs.clone();
    tight.moe = mfl_core::model::BlockConfig::Standard { experts: 4, top_k: 1, hidden: 40 };
    let thin = mfl_core::model::ToyLm::new(mfl_core::model::ModelConfig { block: tight.moe, ..cfg(Arch::Moe) }, 0).unwrap();
    assert!(matches!(check_matched_budget(&thin, &models[2], 0.05), Err(Error::Config(_))));
}

#[test]
fn runs_are_bit_identical_and_checkpoints_round_trip() {
    let a = Experiment::prepare(small_config(3)).unwrap();
    let b = Experiment::prepare(small_config(3)).unwrap();
    let ra = a.run(Arch::Mhmoe, TaskOrder::Default).unwrap();
    let rb = b.run(Arch::Mhmoe, TaskOrder::Default).unwrap();
    assert_eq!(ra.checkpoints.len(), 3);
    for (x, y) in ra.checkpoints.iter().zip(&rb.checkpoints) {
        assert_eq!(x.to_bytes(), y.to_bytes());
    }
    assert_eq!(ra.summary.op.to_bits(), rb.summary.op.to_bits());

    // Save, load and restore into a fresh model: evaluation is unchanged.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("last.ckpt");
    let last = ra.checkpoints.last().unwrap();
    last.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(&loaded, last);
    let mut fresh = a.build_model(Arch::Mhmoe).unwrap();
    fresh.restore(&loaded).unwrap();
    let tokens = &a.rows[0].eval_seqs[0];
    let mut trained = a.build_model(Arch::Mhmoe).unwrap();
    trained.restore(last).unwrap();
    assert_eq!(fresh.eval(tokens).unwrap().loss.to_bits(), trained.eval(tokens).unwrap().loss.to_bits());

    // A checkpoint of one architecture does not load into another.
    let mut other = a.build_model(Arch::Moe).unwrap();
    assert!(matches!(other.restore(last), Err(Error::Format(_))));

    let mut bytes = last.to_bytes();
    bytes[0] = b'X';
    assert!(Checkpoint::read_from(bytes.as_slice()).is_err());
}

#[test]
fn frozen_backbone_is_untouched_by_sequential_training() {
    let exp = Experiment::prepare(small_config(4)).unwrap();
    let out = exp.run(Arch::Moe, TaskOrder::Default).unwrap();
    let mut model = exp.build_model(Arch::Moe).unwrap();
    model.restore(out.checkpoints.last().unwrap()).unwrap();
    for id in exp.backbone.backbone_param_ids() {
        let name = &exp.backbone.store.get(id).name;
        let trained = model.store.id(name).unwrap();
        assert_eq!(model.store.value(trained).data(), exp.backbone.store.value(id).data(), "{name}");
    }
    let s = &out.summary;
    assert_eq!(s.order, vec![0, 1, 2]);
    for j in 0..3 {
        for i in 0..3 {
            assert_eq!(s.matrix.get(i, j).is_some(), i <= j);
        }
    }
    assert!(s.bwt_convention.contains("negative"));
    assert!(out.logs.iter().all(|l| l.steps() > 0 && l.losses.iter().all(|v| v.is_finite())));
}

#[test]
fn seeds_change_the_run_and_orders_need_eight_tasks() {
    let a = Experiment::prepare(small_config(5)).unwrap();
    let b = Experiment::prepare(small_config(6)).unwrap();
    assert_ne!(a.rows[0].train_seqs, b.rows[0].train_seqs);
    assert!(matches!(a.order_ids(TaskOrder::ALTERNATIVES[1]), Err(Error::Config(_))));
    let rev = a.run_ids(Arch::Moe, &[2, 1, 0]).unwrap();
    assert_eq!(rev.summary.order, vec![2, 1, 0]);
    let fwd = a.run_ids(Arch::Moe, &[0, 1, 2]).unwrap();
    assert_ne!(rev.summary.matrix, fwd.summary.matrix);
}

#[test]
fn analysis_rows_come_from_unseen_sequences() {
    let exp = Experiment::prepare(small_config(7)).unwrap();
    let rows = exp.analysis_rows(1, 40).unwrap();
    assert_eq!(rows.positions.len(), 40 * exp.positions.len());
    assert_eq!(rows.compositions.len(), rows.positions.len());
    let fresh = exp.grammar.sequence(1, 60).unwrap();
    assert!(!exp.rows[1].train_seqs.contains(&fresh.tokens));
    assert!(!exp.rows[1].eval_seqs.contains(&fresh.tokens));
    assert!(exp.analysis_rows(9, 1).is_err());
}

#[test]
fn config_files_and_seed_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    std::fs::write(&path, r#"{"seed": 4, "grammar": {"seq_len": 16}}"#).unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.grammar.seq_len, 16);
    let mut c = cfg.clone();
    c.apply_env_seed(Some("11")).unwrap();
    assert_eq!(c.seed, 11);
    assert!(matches!(c.apply_env_seed(Some("x")), Err(Error::Config(_))));
    std::fs::write(&path, r#"{"train": {"batch_size": 0}}"#).unwrap();
    assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
}
