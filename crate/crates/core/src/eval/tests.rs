use super::*;
use crate::synthetic::{generate, SyntheticConfig};
use rand::Rng;

fn tiny_config() -> Config {
    let mut c = Config::default();
    for kv in [
        "model.dim=8",
        "model.time_dim=4",
        "attention.neighbors=4",
        "train.batch_size=50",
        "classify.epochs=5",
    ] {
        c.apply_override(kv).unwrap();
    }
    c
}

fn untrained(config: &Config, ds: &Dataset) -> Checkpoint {
    let model = ContigModel::for_dataset(&config.model, ds, config.train.seed).unwrap();
    let adam = AdamState::for_store(AdamConfig::default(), model.store());
    let memory = model.new_memory(ds.node_capacity());
    Checkpoint::capture(config, ds, &model, &adam, &memory, 0, 0, 0.0)
}

fn stream(cfg: SyntheticConfig) -> Dataset {
    generate(&cfg).unwrap()
}

#[test]
fn separated_scores_give_perfect_metrics() {
    let scores = LinkScores {
        ordinals: vec![0, 1, 2],
        positive: vec![3.0, 2.0, 5.0],
        negative: vec![-1.0, 1.0, 0.5],
    };
    assert_eq!(link_metrics(&scores).unwrap(), (1.0, 1.0));
}

#[test]
fn untrained_model_is_at_chance_on_random_stream() {
    let ds = stream(SyntheticConfig {
        edges: 3000,
        noise: 1.0,
        ..SyntheticConfig::default()
    });
    let config = tiny_config();
    let ckpt = untrained(&config, &ds);
    let ev = Evaluator::new(&ckpt, &ds).unwrap();
    let r = ev.link_prediction(0..ds.len(), LinkMode::Transductive).unwrap();
    assert!((r.ap - 0.5).abs() < 0.05, "{r:?}");
    assert_eq!(r.events, ds.len());
}

#[test]
fn evaluation_leaves_parameters_untouched() {
    let ds = stream(SyntheticConfig {
        edges: 400,
        users: 20,
        items: 20,
        communities: 20,
        labels: true,
        long_cohort: 0.3,
        ..SyntheticConfig::default()
    });
    let config = tiny_config();
    let ckpt = untrained(&config, &ds);
    let ev = Evaluator::new(&ckpt, &ds).unwrap();
    let before = ev.model().param_hash();
    let test = ev.split().test.clone();
    ev.link_prediction(test.clone(), LinkMode::Transductive).unwrap();
    ev.recommendation(test.clone(), &RECALL_KS).unwrap();
    ev.interval_buckets(test).unwrap();
    ev.node_classification().unwrap();
    assert_eq!(ev.model().param_hash(), before);
}

#[test]
fn recall_is_monotone_in_k() {
    let ds = stream(SyntheticConfig {
        edges: 300,
        users: 15,
        items: 40,
        communities: 15,
        ..SyntheticConfig::default()
    });
    let config = tiny_config();
    let ev = Evaluator::new(&untrained(&config, &ds), &ds).unwrap();
    let ks: Vec<usize> = (1..=40).collect();
    let r = ev.recommendation(ev.split().test.clone(), &ks).unwrap();
    assert!(r.recall.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(*r.recall.last().unwrap(), 1.0);
    assert_eq!(r.events, ev.split().test.len());
}

fn unipartite() -> Dataset {
    let edges: Vec<_> = (0..40).map(|i| (1 + i % 5, 1 + (i * 3 + 1) % 5, i as f64, Some(i % 7 == 0))).collect();
    Dataset::new("u", edges, Vec::new(), 0, 5, None).unwrap()
}

#[test]
fn recommendation_needs_a_bipartite_stream() {
    let ds = unipartite();
    let ev = Evaluator::new(&untrained(&tiny_config(), &ds), &ds).unwrap();
    let err = ev.recommendation(0..10, &RECALL_KS).unwrap_err();
    assert!(matches!(err, Error::Unsupported(_)));
}

#[test]
fn classification_error_classes() {
    let config = tiny_config();
    let free = stream(SyntheticConfig {
        edges: 200,
        ..SyntheticConfig::default()
    });
    let ev = Evaluator::new(&untrained(&config, &free), &free).unwrap();
    assert!(matches!(ev.node_classification(), Err(Error::Unsupported(_))));

    // positives only after the train range
    let edges: Vec<_> = (0..40).map(|i| (1 + i % 5, 1 + (i + 1) % 5, i as f64, Some(i >= 36))).collect();
    let late = Dataset::new("late", edges, Vec::new(), 0, 5, None).unwrap();
    let ev = Evaluator::new(&untrained(&config, &late), &late).unwrap();
    assert!(matches!(ev.node_classification(), Err(Error::Data(_))));
}

#[test]
fn classifier_separates_linearly_separable_embeddings() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for _ in 0..600 {
        let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let margin = v[0] + 0.5 * v[1] - 0.25 * v[2];
        if margin.abs() < 0.05 {
            continue;
        }
        y.push(margin > 0.0);
        x.push(v);
    }
    let config = ClassifyConfig {
        epochs: 60,
        ..ClassifyConfig::default()
    };
    let n = x.len() / 2;
    let c = Classifier::fit(&x[..n], &y[..n], &config, 1).unwrap();
    let preds: Vec<(f64, bool)> = c.predict(&x[n..]).unwrap().into_iter().zip(y[n..].iter().copied()).collect();
    let auc = roc_auc(&preds).unwrap();
    assert!(auc >= 0.99, "{auc}");
}

#[test]
fn buckets_partition_the_range() {
    let ds = stream(SyntheticConfig {
        edges: 500,
        users: 20,
        items: 20,
        communities: 20,
        long_cohort: 0.25,
        ..SyntheticConfig::default()
    });
    let ev = Evaluator::new(&untrained(&tiny_config(), &ds), &ds).unwrap();
    let test = ev.split().test.clone();
    let r = ev.interval_buckets(test.clone()).unwrap();
    assert_eq!(r.sizes.iter().sum::<usize>(), test.len());
    assert!(r.sizes.iter().max().unwrap() - r.sizes.iter().min().unwrap() <= 1);
    assert!(r.ap.iter().all(|a| (0.0..=1.0).contains(a)));
    assert!(r.cuts.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn inductive_without_new_nodes_is_unsupported() {
    let ds = unipartite();
    let ev = Evaluator::new(&untrained(&tiny_config(), &ds), &ds).unwrap();
    let test = ev.split().test.clone();
    assert!(matches!(ev.link_prediction(test.clone(), LinkMode::Inductive), Err(Error::Unsupported(_))));
    assert!(ev.link_prediction(test, LinkMode::Transductive).is_ok());
}

#[test]
fn replay_from_checkpoint_matches_replay_from_scratch() {
    let ds = stream(SyntheticConfig {
        edges: 300,
        users: 10,
        items: 10,
        communities: 10,
        ..SyntheticConfig::default()
    });
    let config = tiny_config();
    let mut ckpt = untrained(&config, &ds);
    let model = ckpt.model().unwrap();
    let mut memory = model.new_memory(ds.node_capacity());
    for batch in ds.interactions()[..210].chunks(config.train.batch_size) {
        model.advance(&mut memory, &ds, batch).unwrap();
    }
    let scratch = Evaluator::new(&ckpt, &ds).unwrap().link_prediction(210..300, LinkMode::Transductive).unwrap();
    ckpt.memory = memory;
    ckpt.cursor = 210;
    let resumed = Evaluator::new(&ckpt, &ds).unwrap().link_prediction(210..300, LinkMode::Transductive).unwrap();
    assert_eq!(scratch, resumed);
}

#[test]
fn result_files_have_expected_columns() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.csv");
    write_results(
        &path,
        &[ResultRow {
            metric: "ap".into(),
            dataset: "d".into(),
            mode: "transductive".into(),
            value: 0.5,
            seed: 3,
            config_fingerprint: "abc".into(),
        }],
    )
    .unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, "metric,dataset,mode,value,seed,config_fingerprint\nap,d,transductive,0.5,3,abc\n");

    let buckets = dir.path().join("buckets.csv");
    let report = BucketReport {
        cuts: [1.0, 2.0, 3.0, 4.0],
        sizes: [2; 5],
        ap: [0.5; 5],
    };
    write_bucket_csv(&buckets, &report).unwrap();
    let text = std::fs::read_to_string(&buckets).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.starts_with("bucket,lower,upper,count,ap\n0,-inf,1,2,0.5\n"));
}
