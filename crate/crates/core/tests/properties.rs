use contig_core::autodiff::{ParamFile, ParamStore, Tape};
use contig_core::config::{AdjacencyKind, Config};
use contig_core::eval::stream_link_scores;
use contig_core::graph::{chronological_split, Dataset, NodeId, SamplingStrategy, TemporalNeighborIndex};
use contig_core::metrics::{average_precision, pessimistic_rank, recall_at_k, roc_auc, IntervalBuckets};
use contig_core::model::{ContigModel, StreamContext};
use contig_core::train::bce_link_loss;
use contig_core::update::build_adjacency;
use contig_core::Tensor;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn stream() -> impl Strategy<Value = Dataset> {
    (3usize..8, prop::collection::vec((0usize..100, 0usize..100, 0u8..4), 12..40)).prop_map(|(n, raw)| {
        let mut t = 0.0;
        let edges: Vec<_> = raw
            .iter()
            .map(|&(a, b, dt)| {
                t += dt as f64 * 0.5;
                let s = a % n + 1;
                let d = (s + b % (n - 1)) % n + 1;
                (s, d, t, None)
            })
            .collect();
        let features = (0..edges.len()).map(|i| (i as f64).cos()).collect();
        Dataset::new("prop", edges, features, 1, n, None).unwrap()
    })
}

fn small_model(ds: &Dataset) -> ContigModel {
    let mut c = Config::default();
    for kv in ["model.dim=4", "model.time_dim=4", "attention.neighbors=3", "train.batch_size=5"] {
        c.apply_override(kv).unwrap();
    }
    ContigModel::for_dataset(&c.model, ds, 3).unwrap()
}

fn predictions() -> impl Strategy<Value = Vec<(f64, bool)>> {
    prop::collection::vec((0u8..6, any::<bool>()), 2..40).prop_map(|mut v| {
        v[0].1 = true;
        v[1].1 = false;
        v.into_iter().map(|(s, l)| (s as f64 / 5.0, l)).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn truncating_the_future_keeps_past_scores(ds in stream(), cut in 0.3f64..0.9) {
        let model = small_model(&ds);
        let upto = ((ds.len() as f64 * cut) as usize).max(1);
        let run = |d: &Dataset| {
            let ctx = StreamContext::new(d);
            let mut memory = model.new_memory(d.node_capacity());
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            stream_link_scores(&model, &ctx, &mut memory, 0..d.len(), 5, |_| true, &mut rng).unwrap()
        };
        let full = run(&ds);
        let short = run(&ds.prefix(upto).unwrap());
        prop_assert_eq!(&short.positive[..], &full.positive[..upto]);
        prop_assert_eq!(&short.negative[..], &full.negative[..upto]);
    }

    #[test]
    fn memory_timestamps_never_decrease(ds in stream()) {
        let model = small_model(&ds);
        let ctx = StreamContext::new(&ds);
        let mut memory = model.new_memory(ds.node_capacity());
        let mut last = vec![f64::NEG_INFINITY; ds.node_capacity()];
        for start in (0..ds.len()).step_by(5) {
            let range = start..(start + 5).min(ds.len());
            let batch_end = ds.interaction(range.end - 1).timestamp;
            model.advance(&mut memory, &ds, ctx.events(range)).unwrap();
            for (v, prev) in last.iter_mut().enumerate().skip(1) {
                let t = memory.timestamp(NodeId(v));
                prop_assert!(t >= *prev || *prev == f64::NEG_INFINITY);
                prop_assert!(t <= batch_end);
                if t.is_finite() {
                    *prev = t;
                }
            }
        }
    }

    #[test]
    fn split_ranges_partition_the_stream(ds in stream(), train in 0.3f64..0.7) {
        let val = (1.0 - train) / 2.0;
        let split = chronological_split(&ds, (train, val, 1.0 - train - val)).unwrap();
        prop_assert_eq!(split.train.start, 0);
        prop_assert_eq!(split.train.end, split.val.start);
        prop_assert_eq!(split.val.end, split.test.start);
        prop_assert_eq!(split.test.end, ds.len());
        for v in 1..ds.node_capacity() {
            let seen = ds.interactions()[split.train.clone()].iter().any(|e| e.touches(NodeId(v)));
            let later = ds.interactions()[split.train.end..].iter().any(|e| e.touches(NodeId(v)));
            prop_assert_eq!(split.is_new(NodeId(v)), later && !seen);
        }
    }

    #[test]
    fn neighbor_queries_only_see_the_past(ds in stream(), k in 1usize..6, seed in any::<u64>()) {
        let index = TemporalNeighborIndex::from_dataset(&ds);
        for e in ds.interactions() {
            for strategy in [SamplingStrategy::MostRecent, SamplingStrategy::Uniform { seed }] {
                let got = index.query(e.source, e.timestamp, k, strategy);
                prop_assert!(got.len() <= k);
                prop_assert!(got.iter().all(|n| n.timestamp < e.timestamp));
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..6, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let values: Vec<f64> = (0..rows * cols).map(|i| ((i as u64 ^ seed) as f64).sin() * scale).collect();
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::matrix(rows, cols, values).unwrap());
        let y = tape.softmax_last(x).unwrap();
        let out = tape.value(y);
        for r in 0..rows {
            let row = out.row(r);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ranking_metrics_are_bounded_and_consistent(preds in predictions()) {
        let ap = average_precision(&preds).unwrap();
        let auc = roc_auc(&preds).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
        prop_assert!((0.0..=1.0).contains(&auc));
        let flipped: Vec<(f64, bool)> = preds.iter().map(|&(s, l)| (-s, !l)).collect();
        prop_assert!((roc_auc(&flipped).unwrap() - auc).abs() < 1e-12);
        let mirrored: Vec<(f64, bool)> = preds.iter().map(|&(s, l)| (-s, l)).collect();
        prop_assert!((roc_auc(&mirrored).unwrap() + auc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recall_grows_with_k(scores in prop::collection::vec(0u8..5, 2..30), truths in prop::collection::vec(any::<prop::sample::Index>(), 1..10)) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let ranks: Vec<usize> = truths.iter().map(|t| pessimistic_rank(&scores, t.index(scores.len()))).collect();
        prop_assert_eq!(recall_at_k(&ranks, scores.len()), 1.0);
        for k in 1..scores.len() {
            prop_assert!(recall_at_k(&ranks, k) <= recall_at_k(&ranks, k + 1));
        }
    }

    #[test]
    fn link_loss_is_non_negative(pos in prop::collection::vec(-40.0f64..40.0, 1..10), q in 1usize..3, negate in any::<bool>()) {
        let neg: Vec<f64> = pos.iter().cycle().take(pos.len() * q).map(|s| -s * 0.5).collect();
        let mut tape = Tape::inference();
        let p = tape.constant(Tensor::matrix(pos.len(), 1, pos.clone()).unwrap());
        let n = tape.constant(Tensor::matrix(neg.len(), 1, neg).unwrap());
        let loss = bce_link_loss(&mut tape, p, n, negate).unwrap();
        let v = tape.value(loss).item();
        prop_assert!(v.is_finite() && v >= 0.0);
    }

    #[test]
    fn buckets_partition_by_rank(intervals in prop::collection::vec(0u8..10, 0..60)) {
        let intervals: Vec<f64> = intervals.into_iter().map(f64::from).collect();
        let n = intervals.len();
        let buckets = IntervalBuckets::new(&intervals);
        let mut all: Vec<usize> = buckets.members.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        for (b, m) in buckets.members.iter().enumerate() {
            prop_assert_eq!(m.len(), n * (b + 1) / 5 - n * b / 5);
        }
        for b in 1..5 {
            let lower = buckets.members[b - 1].iter().map(|&i| intervals[i]).fold(f64::NEG_INFINITY, f64::max);
            let upper = buckets.members[b].iter().map(|&i| intervals[i]).fold(f64::INFINITY, f64::min);
            prop_assert!(lower <= upper);
        }
    }

    #[test]
    fn parameter_file_round_trips_bit_exactly(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..20)) {
        let mut store = ParamStore::new();
        store.add("a.w", Tensor::vector(values.clone()));
        store.add("b", Tensor::scalar(values[0] / 3.0));
        let text = serde_json::to_string(&store.to_file()).unwrap();
        let back = ParamStore::from_file(&serde_json::from_str::<ParamFile>(&text).unwrap()).unwrap();
        for (id, p) in store.iter() {
            let bits: Vec<u64> = p.value.data().iter().map(|v| v.to_bits()).collect();
            let again: Vec<u64> = back.value(id).data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, again);
        }
    }

    #[test]
    fn adjacency_spectrum_stays_in_range(partners in prop::collection::vec(0usize..20, 1..24), directed in any::<bool>()) {
        let n = partners.len();
        let active: Vec<NodeId> = (1..=n).map(NodeId).collect();
        let partners: Vec<NodeId> = partners.into_iter().map(NodeId).collect();
        let beta = 0.95;
        let kind = if directed { AdjacencyKind::Directed } else { AdjacencyKind::Symmetric };
        let dense = build_adjacency(&active, &partners, beta, kind).matrix().to_dense();
        prop_assert!(dense.iter().all(|&a| a >= 0.0));
        if directed {
            for r in 0..n {
                let sum: f64 = dense[r * n..(r + 1) * n].iter().sum();
                prop_assert!(sum <= beta + 1e-12);
            }
        } else {
            let eig = DMatrix::from_row_slice(n, n, &dense).symmetric_eigen().eigenvalues;
            prop_assert!(eig.iter().all(|&l| (-1e-9..=beta + 1e-9).contains(&l)));
        }
    }
}
