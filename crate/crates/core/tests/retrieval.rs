use std::collections::{BTreeSet, HashMap};

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dlrepro_core::corpus::{build_dense_index, build_sparse_index, Bm25Params, ChunkConfig, ChunkId, Corpus, DenseIndex, SparseIndex};
use dlrepro_core::gateway::mock::HashEmbedder;
use dlrepro_core::gateway::{CrossScorer, Embedder, GatewayError};
use dlrepro_core::grammar::Grammar;
use dlrepro_core::retrieval::{
    angular_similarity, bm25_score, hybrid_rank, hybrid_rank_with, min_max, rerank, DependencyResolver, HybridOptions,
    QueryBundle, ScoredSnippet, DEFAULT_ALPHA, DEFAULT_TOP_K,
};
use dlrepro_core::tokenize::tokenize;

const VOCAB: &[&str] = &[
    "model", "loss", "optimizer", "step", "batch", "tensor", "shape", "reshape", "value", "error", "data", "loader",
    "epoch", "grad", "weight", "bias", "layer", "forward", "backward", "accuracy", "metric", "scale", "norm", "cuda",
    "device", "dtype", "float", "mean", "sum", "config",
];

fn synthetic_sources(seed: u64, files: usize, funcs_per_file: usize) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..files)
        .map(|f| {
            let mut src = String::new();
            for g in 0..funcs_per_file {
                let name = VOCAB.choose(&mut rng).unwrap();
                src.push_str(&format!("def {name}_{f}_{g}(x):\n"));
                for _ in 0..rng.gen_range(1..6) {
                    let w: Vec<&str> = (0..4).map(|_| *VOCAB.choose(&mut rng).unwrap()).collect();
                    src.push_str(&format!("    {} = {}.{}({}, x)\n", w[0], w[1], w[2], w[3]));
                }
                src.push_str("    return x\n\n");
            }
            (format!("pkg/mod{f}.py"), src)
        })
        .collect()
}

struct Fixture {
    corpus: Corpus,
    sparse: SparseIndex,
    dense: DenseIndex,
}

fn fixture(sources: Vec<(String, String)>) -> Fixture {
    let corpus = Corpus::from_sources(sources, &Grammar::python(), &ChunkConfig::default()).unwrap();
    let sparse = build_sparse_index(&corpus.chunks, Bm25Params::default()).unwrap();
    let dense = build_dense_index(&corpus.chunks, &HashEmbedder::default(), 50).unwrap();
    Fixture { corpus, sparse, dense }
}

/// Scores every chunk from scratch: BM25 with k1=1.2, b=0.75 over the raw
/// token counts, angular similarity over the stored unit vectors, the
/// 4k-per-signal candidate pool, min-max over that pool, then the fusion.
fn brute_force(fx: &Fixture, query: &QueryBundle, alpha: f64, k: usize) -> Vec<(ChunkId, f64)> {
    let (k1, b) = (1.2, 0.75);
    let chunks = &fx.corpus.chunks;
    let n = chunks.len() as f64;
    let lens: Vec<f64> = chunks.iter().map(|c| c.token_counts.values().sum::<u32>() as f64).collect();
    let avgdl = lens.iter().sum::<f64>() / n;
    let mut terms = Vec::new();
    for t in tokenize(&query.raw_text) {
        if !terms.contains(&t) {
            terms.push(t);
        }
    }
    let df = |t: &str| chunks.iter().filter(|c| c.token_counts.get(t).copied().unwrap_or(0) > 0).count() as f64;
    let bm25: Vec<f64> = chunks
        .iter()
        .zip(&lens)
        .map(|(c, &len)| {
            terms
                .iter()
                .map(|t| {
                    let f = c.token_counts.get(t).copied().unwrap_or(0) as f64;
                    if f == 0.0 {
                        return 0.0;
                    }
                    let idf = (1.0 + (n - df(t) + 0.5) / (df(t) + 0.5)).ln();
                    idf * f * (k1 + 1.0) / (f + k1 * (1.0 - b + b * len / avgdl))
                })
                .sum()
        })
        .collect();
    let angular: Vec<f64> = chunks
        .iter()
        .map(|c| {
            let v = fx.dense.vector(&c.id).unwrap();
            let dot: f64 = v.iter().zip(&query.vector).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
            1.0 - dot.clamp(-1.0, 1.0).acos() / std::f64::consts::PI
        })
        .collect();
    let top = |scores: &[f64], only_positive: bool| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..chunks.len()).filter(|&i| !only_positive || scores[i] > 0.0).collect();
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(chunks[a].id.cmp(&chunks[b].id)));
        idx.truncate(4 * k);
        idx
    };
    let pool: BTreeSet<usize> = top(&bm25, true).into_iter().chain(top(&angular, false)).collect();
    let lo = pool.iter().map(|&i| bm25[i]).fold(f64::INFINITY, f64::min);
    let hi = pool.iter().map(|&i| bm25[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut fused: Vec<(ChunkId, f64)> = pool
        .iter()
        .map(|&i| {
            let norm = if hi > lo {
                (bm25[i] - lo) / (hi - lo)
            } else if bm25[i] > 0.0 {
                1.0
            } else {
                0.0
            };
            (chunks[i].id.clone(), (1.0 - alpha) * norm + alpha * angular[i])
        })
        .collect();
    fused.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    fused.truncate(k);
    fused
}

fn query(text: &str) -> QueryBundle {
    QueryBundle::new(text, &HashEmbedder::default()).unwrap()
}

#[test]
fn defaults() {
    assert_eq!((DEFAULT_ALPHA, DEFAULT_TOP_K), (0.55, 20));
}

#[test]
fn thirty_chunk_corpus_matches_exhaustive_order() {
    let fx = fixture(synthetic_sources(1, 6, 5));
    assert_eq!(fx.corpus.len(), 30);
    for text in ["reshape shape error in forward", "optimizer step loss", "cuda device dtype float"] {
        let q = query(text);
        let got = hybrid_rank(&q, &fx.corpus, &fx.sparse, &fx.dense, 0.55, 20).unwrap();
        let want = brute_force(&fx, &q, 0.55, 20);
        let got_ids: Vec<&ChunkId> = got.iter().map(|s| &s.chunk.id).collect();
        let want_ids: Vec<&ChunkId> = want.iter().map(|(id, _)| id).collect();
        assert_eq!(got_ids, want_ids, "{text}");
        for (s, (_, h)) in got.iter().zip(&want) {
            assert!((s.hybrid - h).abs() < 1e-12);
        }
    }
}

#[test]
fn larger_corpora_match_exhaustive_order() {
    for (seed, files, funcs) in [(2u64, 12usize, 10usize), (3, 20, 10)] {
        let fx = fixture(synthetic_sources(seed, files, funcs));
        assert!(fx.corpus.len() <= 200);
        for text in ["loss backward grad", "value error shape mismatch during reshape", "data loader batch epoch"] {
            let q = query(text);
            let got = hybrid_rank(&q, &fx.corpus, &fx.sparse, &fx.dense, 0.55, 20).unwrap();
            let want = brute_force(&fx, &q, 0.55, 20);
            let got_ids: Vec<&ChunkId> = got.iter().map(|s| &s.chunk.id).collect();
            let want_ids: Vec<&ChunkId> = want.iter().map(|(id, _)| id).collect();
            assert_eq!(got_ids, want_ids, "seed {seed}: {text}");
        }
    }
}

#[test]
fn bm25_absent_terms_score_zero() {
    let fx = fixture(vec![("a.py".into(), "def f(x):\n    return x\n".into())]);
    let q = query("optimizer divergence");
    assert_eq!(bm25_score(&q, &fx.corpus.chunks[0].id, &fx.sparse).unwrap(), 0.0);
}

/// Unit-length f32 vectors whose f64 dot product is √2/2 to about 1e-16:
/// the f32 rounding error of the first coordinate is carried by a tiny
/// second coordinate paired with 2^-12 in the other vector.
pub fn sqrt_half_pair() -> (Vec<f32>, Vec<f32>) {
    let target = std::f64::consts::FRAC_1_SQRT_2;
    let a = target as f32;
    let b = ((target - f64::from(a)) * 4096.0) as f32;
    let c = (1.0 - f64::from(a).powi(2) - f64::from(b).powi(2)).sqrt() as f32;
    (vec![1.0, 1.0 / 4096.0, 0.0], vec![a, b, c])
}

#[test]
fn angular_similarity_analytic_cases() {
    let (q, d) = sqrt_half_pair();
    let cases: [(&[f32], &[f32], f64); 4] = [
        (&[1.0, 0.0], &[1.0, 0.0], 1.0),
        (&[1.0, 0.0], &[0.0, 1.0], 0.5),
        (&[1.0, 0.0], &[-1.0, 0.0], 0.0),
        (&q, &d, 0.75),
    ];
    for (q, d, want) in cases {
        let got = angular_similarity(q, d).unwrap();
        assert!((got - want).abs() < 1e-9, "{q:?} {d:?}: {got}");
    }
    assert!(angular_similarity(&[1.0], &[1.0, 0.0]).is_err());
}

#[test]
fn hybrid_boundary_bm25_one_angular_zero() {
    let fx = fixture(vec![
        ("a.py".into(), "def shape_error():\n    raise ValueError('shape mismatch')\n".into()),
        ("b.py".into(), "def unrelated(y):\n    return y\n".into()),
    ]);
    let target = fx.corpus.chunks.iter().find(|c| c.text.contains("shape_error")).unwrap();
    let v = fx.dense.vector(&target.id).unwrap();
    let anti: Vec<f32> = v.iter().map(|x| -x).collect();
    let q = QueryBundle::from_parts("shape mismatch", &anti).unwrap();
    let out = hybrid_rank(&q, &fx.corpus, &fx.sparse, &fx.dense, 0.55, 5).unwrap();
    let s = out.iter().find(|s| s.chunk.id == target.id).unwrap();
    assert_eq!(s.bm25_norm, 1.0);
    assert!(s.angular.abs() < 1e-6);
    assert!((s.hybrid - 0.45).abs() < 1e-6);
}

#[test]
fn ablated_signals_reduce_to_the_other_score() {
    let fx = fixture(synthetic_sources(4, 6, 5));
    let q = query("loss step optimizer");
    let dense_only = hybrid_rank_with(
        &q,
        &fx.corpus,
        &fx.sparse,
        &fx.dense,
        HybridOptions {
            alpha: 1.0,
            use_sparse: false,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(dense_only.iter().all(|s| (s.hybrid - s.angular).abs() < 1e-12));
    let sparse_only = hybrid_rank_with(
        &q,
        &fx.corpus,
        &fx.sparse,
        &fx.dense,
        HybridOptions {
            alpha: 0.0,
            use_dense: false,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(sparse_only.iter().all(|s| (s.hybrid - s.bm25_norm).abs() < 1e-12));
}

struct TableScorer(HashMap<String, f64>);

impl CrossScorer for TableScorer {
    fn cross_score(&self, _query: &str, doc: &str) -> Result<f64, GatewayError> {
        self.0.get(doc).copied().ok_or_else(|| GatewayError::Provider {
            digest: "table".into(),
            message: "no score".into(),
        })
    }
}

fn ranked() -> (QueryBundle, Vec<ScoredSnippet>) {
    let fx = fixture(synthetic_sources(5, 6, 5));
    let q = query("batch reshape tensor shape");
    let out = hybrid_rank(&q, &fx.corpus, &fx.sparse, &fx.dense, 0.55, 10).unwrap();
    (q, out)
}

#[test]
fn rerank_identity_and_reversal() {
    let (q, snippets) = ranked();
    let ids: Vec<ChunkId> = snippets.iter().map(|s| s.chunk.id.clone()).collect();

    let same = TableScorer(snippets.iter().map(|s| (s.chunk.text.clone(), s.hybrid)).collect());
    let out = rerank(&q, snippets.clone(), &same).unwrap();
    assert_eq!(out.iter().map(|s| s.chunk.id.clone()).collect::<Vec<_>>(), ids);

    let flipped = TableScorer(snippets.iter().map(|s| (s.chunk.text.clone(), 1.0 - s.hybrid)).collect());
    let out = rerank(&q, snippets.clone(), &flipped).unwrap();
    // Oracle: sort by the injected scores.
    let mut want = snippets.clone();
    want.sort_by(|a, b| (1.0 - b.hybrid).total_cmp(&(1.0 - a.hybrid)).then(a.chunk.id.cmp(&b.chunk.id)));
    assert_eq!(
        out.iter().map(|s| &s.chunk.id).collect::<Vec<_>>(),
        want.iter().map(|s| &s.chunk.id).collect::<Vec<_>>()
    );
    let distinct: BTreeSet<u64> = snippets.iter().map(|s| s.hybrid.to_bits()).collect();
    if distinct.len() == snippets.len() {
        let mut rev = ids.clone();
        rev.reverse();
        assert_eq!(out.iter().map(|s| s.chunk.id.clone()).collect::<Vec<_>>(), rev);
    }
}

#[test]
fn rerank_singleton_and_failures() {
    let (q, snippets) = ranked();
    let one = vec![snippets[0].clone()];
    let scorer = TableScorer([(one[0].chunk.text.clone(), 0.4)].into_iter().collect());
    let out = rerank(&q, one, &scorer).unwrap();
    assert_eq!(out[0].cross_score, Some(0.4));

    // Only the first snippet can be scored; the others trail in hybrid order, flagged.
    let out = rerank(&q, snippets.clone(), &scorer).unwrap();
    assert_eq!(out[0].chunk.id, snippets[0].chunk.id);
    assert!(out[1..].iter().all(|s| s.unscored && s.cross_score.is_none()));
    assert!(out[1..].windows(2).all(|w| w[0].hybrid >= w[1].hybrid));

    let none = TableScorer(HashMap::new());
    assert!(rerank(&q, snippets, &none).is_err());
}

#[test]
fn dependency_closure_examples() {
    let src_train = "from pkg.data import load_data\nimport os\n\n\ndef helper(x):\n    return x\n\n\ndef train(path):\n    d = load_data(path)\n    return helper(d)\n\n\ndef lonely():\n    return 1\n\n\ndef envy():\n    return os.getcwd()\n";
    let src_data = "def load_data(path):\n    return open(path).read()\n";
    let corpus = Corpus::from_sources(
        vec![("pkg/train.py".into(), src_train.into()), ("pkg/data.py".into(), src_data.into())],
        &Grammar::python(),
        &ChunkConfig::default(),
    )
    .unwrap();
    let resolver = DependencyResolver::new(&corpus, Grammar::python(), 2);
    let find = |name: &str| corpus.chunks.iter().find(|c| c.text.contains(&format!("def {name}("))).unwrap();

    let closure = resolver.resolve(find("train"));
    let pulled: BTreeSet<&str> = closure.pulled_chunks.iter().map(|p| p.chunk.id.as_str()).collect();
    // Oracle: the definition sites, located by text search.
    assert!(pulled.contains(find("load_data").id.as_str()));
    assert!(pulled.contains(find("helper").id.as_str()));

    assert!(resolver.resolve(find("lonely")).pulled_chunks.is_empty());

    let envy = resolver.resolve(find("envy"));
    assert!(envy.pulled_chunks.is_empty());
    assert!(envy.imported_modules.iter().any(|m| m == "os"));
    assert!(envy
        .referenced_symbols
        .iter()
        .any(|s| s.name.split('.').next() == Some("os") && s.defined_in.is_none()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scores_stay_in_unit_interval(seed in 0u64..1000, alpha in 0.0f64..=1.0, words in prop::collection::vec(0usize..30, 1..6)) {
        let fx = fixture(synthetic_sources(seed, 3, 4));
        let text: Vec<&str> = words.iter().map(|&i| VOCAB[i]).collect();
        let q = query(&text.join(" "));
        let out = hybrid_rank(&q, &fx.corpus, &fx.sparse, &fx.dense, alpha, 8).unwrap();
        for s in &out {
            for v in [s.bm25_norm, s.angular, s.hybrid] {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v), "{}", v);
            }
        }
        let scorer = dlrepro_core::gateway::mock::JaccardScorer;
        for s in rerank(&q, out, &scorer).unwrap() {
            let c = s.cross_score.unwrap();
            prop_assert!((0.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn min_max_ranking_survives_positive_scaling(xs in prop::collection::vec(0.0f64..50.0, 1..40), c in 0.01f64..100.0) {
        let a = min_max(&xs);
        let scaled: Vec<f64> = xs.iter().map(|x| x * c).collect();
        let b = min_max(&scaled);
        let order = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&i, &j| v[j].total_cmp(&v[i]).then(i.cmp(&j)));
            idx
        };
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((0.0..=1.0).contains(x));
            prop_assert!((x - y).abs() < 1e-9);
        }
        prop_assert_eq!(order(&a), order(&b));
    }
}

#[test]
fn embedder_is_deterministic() {
    let e = HashEmbedder::default();
    assert_eq!(e.embed("x").unwrap(), e.embed("x").unwrap());
}
