use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hairmap_core::checkpoint::{self, Checkpoint};
use hairmap_core::conditions::{condition_from_text, Condition, ConditionKind, ConditionPair};
use hairmap_core::config::{Config, Dims};
use hairmap_core::editing::edit_latent;
use hairmap_core::latent::{LatentCode, LatentPartition};
use hairmap_core::losses::{active_terms, TaskType};
use hairmap_core::mapper::MapperConfig;
use hairmap_core::optim::Adam;
use hairmap_core::training::{self, default_sampler, StepRecord, LOG_FILE};
use hairmap_core::HairMapperParams;

fn small(dir: &std::path::Path) -> Config {
    let mut c = Config::default();
    c.dims = Dims {
        layers: 3,
        latent_dim: 8,
        embed_dim: 8,
        height: 8,
        width: 8,
    };
    c.backend = hairmap_core::config::BackendConfig::Toy(hairmap_core::backends::ToyBackendConfig {
        encoder_grid: 4,
        ..Default::default()
    });
    c.train.reference_pool_size = 4;
    c.output_dir = dir.to_path_buf();
    c
}

#[test]
fn sampling_frequencies_match_uniform_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(dir.path());
    let b = c.backends().unwrap();
    let s = default_sampler(&c, &b).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 10_000;
    let mut tasks: HashMap<TaskType, usize> = HashMap::new();
    let mut sides: HashMap<ConditionKind, usize> = HashMap::new();
    let mut active_sides = 0;
    for _ in 0..n {
        let t = s.sample_task(&mut rng).unwrap();
        *tasks.entry(t.task_type).or_default() += 1;
        for c in [&t.pair.style, &t.pair.color] {
            if c.is_present() {
                *sides.entry(c.kind()).or_default() += 1;
                active_sides += 1;
            }
        }
    }
    for task in TaskType::ALL {
        let f = tasks[&task] as f64 / n as f64;
        assert!((f - 1.0 / 3.0).abs() <= 0.02, "{task:?} frequency {f}");
    }
    for kind in [ConditionKind::Text, ConditionKind::Image] {
        let f = sides[&kind] as f64 / active_sides as f64;
        assert!((f - 0.5).abs() <= 0.02, "{kind:?} frequency {f}");
    }
}

#[test]
fn one_adam_step_matches_hand_computation() {
    let partition = LatentPartition::new(1, 1, 1).unwrap();
    let mut params = HairMapperParams::zeros(1, 1, partition, &MapperConfig::default());
    let n = params.num_parameters();
    let theta: Vec<f64> = (0..n).map(|i| 0.1 * i as f64 - 1.0).collect();
    let g: Vec<f64> = (0..n).map(|i| if i % 3 == 0 { 0.0 } else { 0.5 - 0.07 * i as f64 }).collect();
    params.set_flat(&theta).unwrap();
    let mut grads = params.zeros_like();
    grads.set_flat(&g).unwrap();
    let (lr, b1, b2, eps) = (0.0005, 0.9, 0.999, 1e-8);
    let mut adam = Adam::new(lr, b1, b2, eps, n);
    adam.update(&mut params, &grads).unwrap();
    let after = params.flatten();
    for i in 0..n {
        let m = (1.0 - b1) * g[i];
        let v = (1.0 - b2) * g[i] * g[i];
        let m_hat = m / (1.0 - b1);
        let v_hat = v / (1.0 - b2);
        let want = theta[i] - lr * m_hat / (v_hat.sqrt() + eps);
        assert!((after[i] - want).abs() <= 1e-10, "parameter {i}: {} vs {want}", after[i]);
    }
    // A nonzero gradient moves its parameter by almost exactly lr.
    assert!(((theta[1] - after[1]).abs() - lr).abs() < 1e-9);
}

#[test]
fn zero_iterations_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(dir.path());
    c.train.iterations = 0;
    let b = c.backends().unwrap();
    let s = default_sampler(&c, &b).unwrap();
    let out = training::train(&c, &b, &s, false).unwrap();
    assert!(out.history.is_empty());
    let files: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".hmck"))
        .collect();
    assert_eq!(files, vec![checkpoint::file_name(0)]);
    let ck = Checkpoint::load(&out.checkpoint).unwrap();
    assert!(ck.meta.is_untrained());
    assert_eq!(ck.meta.config.seed, c.seed);
    assert_eq!(ck.meta.config_hash, c.hash());
    assert_eq!(ck.params, Checkpoint::initial(&c).unwrap().params);
}

#[test]
fn logged_breakdowns_follow_the_gating_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(dir.path());
    c.train.iterations = 30;
    c.train.checkpoint_every = 10;
    let b = c.backends().unwrap();
    let s = default_sampler(&c, &b).unwrap();
    training::train(&c, &b, &s, false).unwrap();
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let records: Vec<StepRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 30);
    for r in &records {
        for t in &r.tasks {
            let kind = |s: &str| {
                if s == "none" {
                    ConditionKind::None
                } else if s.starts_with("text:") {
                    ConditionKind::Text
                } else {
                    ConditionKind::Image
                }
            };
            let style = kind(&t.style);
            let color = kind(&t.color);
            let stand_in = |k: ConditionKind| match k {
                ConditionKind::None => Condition::None,
                _ => condition_from_text("x", b.text_encoder.as_ref()).unwrap(),
            };
            let mut pair = ConditionPair::new(stand_in(style), stand_in(color));
            if style == ConditionKind::Image || color == ConditionKind::Image {
                // Rebuild image sides with a real reference so kinds match.
                let img = b.generator.generate(&LatentCode::zeros(3, 8).unwrap()).unwrap();
                let as_ref = || {
                    hairmap_core::conditions::condition_from_reference(
                        &img,
                        "r",
                        b.parser.as_ref(),
                        b.image_encoder.as_ref(),
                    )
                    .unwrap()
                };
                if style == ConditionKind::Image {
                    pair.style = as_ref();
                }
                if color == ConditionKind::Image {
                    pair.color = as_ref();
                }
            }
            let expected = active_terms(&pair);
            for ((name, term), want) in t.breakdown.terms().iter().zip(expected) {
                assert_eq!(term.active, want, "iteration {}: {name}", r.iteration);
            }
            assert_eq!(TaskType::of(&pair), Some(t.task_type));
        }
    }
}

#[test]
fn resume_rejects_an_incompatible_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(dir.path());
    c.train.iterations = 4;
    let b = c.backends().unwrap();
    let s = default_sampler(&c, &b).unwrap();
    training::train(&c, &b, &s, false).unwrap();
    let mut other = c.clone();
    other.train.learning_rate = 0.01;
    other.train.iterations = 8;
    assert!(matches!(
        training::train(&other, &b, &s, true),
        Err(hairmap_core::Error::Checkpoint(_))
    ));
    // Extending the budget alone is fine.
    let mut longer = c.clone();
    longer.train.iterations = 8;
    let out = training::train(&longer, &b, &s, true).unwrap();
    assert_eq!(out.history.first().unwrap().iteration, 5);
}

#[test]
fn trained_mapper_moves_towards_a_style_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Config::default();
    c.output_dir = dir.path().to_path_buf();
    c.train.iterations = 200;
    c.train.checkpoint_every = 200;
    let b = c.backends().unwrap();
    let s = default_sampler(&c, &b).unwrap();
    let out = training::train(&c, &b, &s, false).unwrap();
    let initial = Checkpoint::load(&dir.path().join(checkpoint::file_name(0))).unwrap().params;
    let pair = ConditionPair::new(
        condition_from_text("bobcut hairstyle", b.text_encoder.as_ref()).unwrap(),
        Condition::None,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut better = 0;
    let (mut sum_before, mut sum_after) = (0.0, 0.0);
    for _ in 0..10 {
        let data = (0..6 * 32).map(|_| rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng)).collect();
        let w = LatentCode::new(6, 32, data).unwrap();
        let before = edit_latent(&w, &pair, &initial, &b, &c.losses).unwrap();
        let after = edit_latent(&w, &pair, &out.params, &b, &c.losses).unwrap();
        assert!(before.untrained && !after.untrained);
        let (lb, la) = (before.breakdown.unwrap().style_text.value, after.breakdown.unwrap().style_text.value);
        sum_before += lb;
        sum_after += la;
        if la < lb {
            better += 1;
        }
    }
    assert!(sum_after < sum_before, "mean text loss {} -> {}", sum_before / 10.0, sum_after / 10.0);
    assert!(better > 5, "{better}/10");
}
