//! Mid-level integration: small end-to-end runs, replay determinism,
//! temporal-leakage probes and checkpoint reload fidelity.

use tgrec_core::config::RunConfig;
use tgrec_core::encoder::{load_checkpoint, save_checkpoint};
use tgrec_core::eval::render_reports_text;
use tgrec_core::pipeline::{
    evaluate_period, prepare_in_memory, probe_config, run_full, train_period,
};

mod common {
    use tgrec_core::config::RunConfig;

    pub fn small_config(seed: u64) -> RunConfig {
        RunConfig {
            seed,
            n_assets: 20,
            n_sectors: 4,
            n_users: 60,
            n_events: 1500,
            epochs: 2,
            memory_dim: 16,
            alpha: 0.5,
            ..RunConfig::default()
        }
    }
}

#[test]
fn small_run_produces_consistent_reports() {
    let cfg = common::small_config(31);
    let run = run_full(&cfg).unwrap();
    assert_eq!(run.prepared.splits.len(), 1);
    assert!(run.prepared.dataset.events.len() > 1000);

    for report in &run.reports {
        assert_eq!(report.rec_evaluated + report.rec_excluded, report.total_interactions);
        assert_eq!(report.inv_evaluated + report.inv_excluded, report.total_interactions);
        for block in [&report.per_interaction, &report.per_user] {
            assert!(block.hr5 >= block.hr3, "{}: HR@5 < HR@3", report.label);
            assert!(block.ndcg5 >= block.ndcg3, "{}: NDCG@5 < NDCG@3", report.label);
            assert!(block.ndcg5 <= block.hr5 + 1e-12);
            for v in [block.hr3, block.hr5, block.p_r3, block.p_r5, block.p_sr3, block.p_sr5] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        assert!(!report.config_echo.is_empty());
    }
    assert_eq!(run.reports.len(), 5);
    assert_eq!(run.reports[0].label, "model");
}

#[test]
fn same_seed_reproduces_losses_and_reports() {
    let cfg = common::small_config(32);
    let a = run_full(&cfg).unwrap();
    let b = run_full(&cfg).unwrap();

    let losses = |r: &tgrec_core::pipeline::FullRun| -> Vec<f64> {
        r.trained.log.iter().map(|l| l.mean_loss).collect()
    };
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(render_reports_text(&a.reports), render_reports_text(&b.reports));
}

#[test]
fn different_seeds_differ() {
    let a = run_full(&common::small_config(33)).unwrap();
    let b = run_full(&common::small_config(34)).unwrap();
    assert_ne!(
        a.trained.log.first().map(|l| l.mean_loss),
        b.trained.log.first().map(|l| l.mean_loss)
    );
}

#[test]
fn zero_epochs_yield_one_untrained_checkpoint() {
    let cfg = RunConfig { epochs: 0, ..common::small_config(35) };
    let data = prepare_in_memory(&cfg).unwrap();
    let trained = train_period(&cfg, &data).unwrap();
    assert_eq!(trained.checkpoints.len(), 1);
    assert_eq!(trained.checkpoints[0].epoch, 0);
    assert!(trained.log.is_empty());
}

#[test]
fn evaluation_is_read_only() {
    let cfg = common::small_config(36);
    let data = prepare_in_memory(&cfg).unwrap();
    let mut trained = train_period(&cfg, &data).unwrap();
    let first = evaluate_period(&cfg, &data, &mut trained).unwrap();
    let second = evaluate_period(&cfg, &data, &mut trained).unwrap();
    assert_eq!(render_reports_text(&first), render_reports_text(&second));
}

#[test]
fn checkpoint_file_reload_reproduces_the_report() {
    let cfg = common::small_config(37);
    let data = prepare_in_memory(&cfg).unwrap();
    let mut trained = train_period(&cfg, &data).unwrap();
    let original = evaluate_period(&cfg, &data, &mut trained).unwrap();

    let mut buf = Vec::new();
    save_checkpoint(
        &mut buf,
        &trained.model,
        &trained.checkpoints[trained.selected],
        |n| data.dataset.registry.name(n).to_string(),
        &cfg.to_toml(),
    )
    .unwrap();

    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(999);
    let mut model =
        tgrec_core::encoder::TgnModel::new(tgrec_core::pipeline::encoder_config_of(&cfg), &mut rng)
            .unwrap();
    let registry = &data.dataset.registry;
    let (ckpt, echo) = load_checkpoint(buf.as_slice(), &mut model, data.dataset.n_nodes(), |name| {
        registry.user(name).or_else(|| registry.item(name))
    })
    .unwrap();
    assert_eq!(echo, cfg.to_toml());

    let mut reloaded = tgrec_core::pipeline::TrainedPeriod {
        model,
        checkpoints: vec![ckpt],
        log: Vec::new(),
        selection: Vec::new(),
        selected: 0,
        split: trained.split.clone(),
        train_range: trained.train_range.clone(),
        val_range: trained.val_range.clone(),
        test_range: trained.test_range.clone(),
    };
    let reports = evaluate_period(&cfg, &data, &mut reloaded).unwrap();
    assert_eq!(render_reports_text(&original), render_reports_text(&reports));
}

#[test]
fn deleting_future_events_leaves_probe_embeddings_unchanged() {
    use rand::{Rng, SeedableRng};
    let cfg = probe_config(38);
    let data = prepare_in_memory(&cfg).unwrap();
    let events = &data.dataset.events;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(40);
    let mut model_rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
    let model = tgrec_core::encoder::TgnModel::new(
        tgrec_core::pipeline::encoder_config_of(&cfg),
        &mut model_rng,
    )
    .unwrap();

    for _ in 0..10 {
        let probe = rng.random_range(0..events.len());
        let t = events[probe].timestamp;
        let full = tgrec_core::eval::probe_embeddings(&data.dataset, events, &model, probe, 64)
            .unwrap();
        let truncated: Vec<_> =
            events.iter().filter(|e| e.timestamp <= t).cloned().collect();
        let cut = tgrec_core::eval::probe_embeddings(&data.dataset, &truncated, &model, probe, 64)
            .unwrap();
        assert_eq!(full, cut, "probe at index {probe} diverged");
    }
}
