//! Helpers and property checks shared by the integration test targets.
//!
//! Each property runs under a deterministic proptest runner and returns
//! `Err` with the shrunk counterexample on failure, so both the `#[test]`
//! wrappers and the acceptance binary can drive the same code.

#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRng, TestRunner};

use xmodal_align::dataio::{self, make_batches, Dataset, Modality, PairedRecord, SplitFractions};
use xmodal_align::losses::{
    clip_loss, siglip_loss, similarity_matrix, ClipConfig, EmbeddingBatch, SiglipConfig,
};
use xmodal_align::numkit::{self, Matrix, Rng};
use xmodal_align::projector::ProjectionHead;
use xmodal_align::retrieval::{self, EmbeddingBank};

pub fn unit_rows(rng: &mut Rng, n: usize, d: usize) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.normal(0.0, 1.0)).collect();
            numkit::l2_normalize(&v).unwrap()
        })
        .collect();
    Matrix::from_rows(&rows).unwrap()
}

pub fn gaussian(rng: &mut Rng, n: usize, d: usize) -> Matrix {
    let data = (0..n * d).map(|_| rng.normal(0.0, 1.0)).collect();
    Matrix::from_vec(n, d, data).unwrap()
}

pub fn bank(ids: &[String], vectors: Matrix, modality: Modality) -> EmbeddingBank {
    EmbeddingBank::new(ids.to_vec(), vectors, modality).unwrap()
}

/// Random dataset whose values are exactly representable in f32.
pub fn random_dataset(seed: u64, n: usize, d_p: usize, d_s: usize, t_max: usize) -> Dataset {
    let mut rng = Rng::new(seed);
    let tokens = |d: usize, rng: &mut Rng| {
        let t = rng.int_inclusive(1, t_max);
        let data = (0..t * d)
            .map(|_| rng.normal(0.0, 3.0) as f32 as f64)
            .collect();
        Matrix::from_vec(t, d, data).unwrap()
    };
    let records = (0..n)
        .map(|i| PairedRecord {
            id: format!("rec-{i}-{:x}", rng.next_u64() & 0xffff),
            seq_tokens: tokens(d_p, &mut rng),
            struct_tokens: tokens(d_s, &mut rng),
        })
        .collect();
    Dataset::new(d_p, d_s, records).unwrap()
}

fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(
        config.clone(),
        TestRng::deterministic_rng(config.rng_algorithm),
    )
}

fn check<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    runner(cases)
        .run(&strategy, test)
        .map_err(|e| e.to_string())
}

fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 1..24)
}

pub fn softmax_sums_to_one_and_is_shift_invariant(cases: u32) -> Result<(), String> {
    check(
        cases,
        (logits(), -100.0f64..100.0, any::<u64>()),
        |(x, c, mask_seed)| {
            let mut rng = Rng::new(mask_seed);
            let mut mask: Vec<bool> = x.iter().map(|_| rng.uniform(0.0, 1.0) < 0.7).collect();
            mask[rng.int_inclusive(0, x.len() - 1)] = true;
            for m in [None, Some(mask.as_slice())] {
                let p = numkit::softmax_row(&x, m).unwrap();
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
                let q = numkit::softmax_row(&shifted, m).unwrap();
                for (a, b) in p.iter().zip(&q) {
                    prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
                }
            }
            Ok(())
        },
    )
}

pub fn layer_norm_standardizes(cases: u32) -> Result<(), String> {
    check(cases, prop::collection::vec(-10.0f64..10.0, 2..40), |x| {
        let d = x.len() as f64;
        let mean = x.iter().sum::<f64>() / d;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        prop_assume!(var > 1e-6);
        let ones = vec![1.0; x.len()];
        let zeros = vec![0.0; x.len()];
        let y = numkit::layer_norm(&x, &ones, &zeros, 0.0).unwrap();
        let m = y.iter().sum::<f64>() / d;
        let v = y.iter().map(|u| (u - m).powi(2)).sum::<f64>() / d;
        prop_assert!(m.abs() <= 1e-12, "mean {m}");
        prop_assert!((v - 1.0).abs() <= 1e-9, "variance {v}");
        // with the working epsilon the variance shrinks by var / (var + eps)
        let y = numkit::layer_norm(&x, &ones, &zeros, 1e-5).unwrap();
        let v = y.iter().map(|u| u * u).sum::<f64>() / d;
        prop_assert!((v - var / (var + 1e-5)).abs() <= 1e-9);
        Ok(())
    })
}

pub fn l2_normalize_is_idempotent(cases: u32) -> Result<(), String> {
    check(cases, prop::collection::vec(-1e3f64..1e3, 1..40), |x| {
        prop_assume!(numkit::norm(&x) > 1e-6);
        let once = numkit::l2_normalize(&x).unwrap();
        let twice = numkit::l2_normalize(&once).unwrap();
        prop_assert!((numkit::norm(&once) - 1.0).abs() <= 1e-12);
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        Ok(())
    })
}

fn head_case() -> impl Strategy<Value = (usize, usize, usize, usize, u64)> {
    // (d_in, heads, head width, tokens, seed); a 1-wide embedding is
    // all-zero after layer norm, so D >= 2
    (1usize..7, 1usize..5, 1usize..5, 1usize..9, any::<u64>())
        .prop_filter("D >= 2", |c| c.1 * c.2 >= 2)
}

fn head_and_tokens(
    (d_in, heads, width, t, seed): (usize, usize, usize, usize, u64),
) -> (ProjectionHead, Matrix, Rng) {
    let mut rng = Rng::new(seed);
    let head = ProjectionHead::init(&mut rng, d_in, heads * width, heads).unwrap();
    let x = gaussian(&mut rng, t, d_in);
    (head, x, rng)
}

pub fn projector_token_permutation_invariance(cases: u32) -> Result<(), String> {
    check(cases, head_case(), |case| {
        let (head, x, mut rng) = head_and_tokens(case);
        let mut order: Vec<usize> = (0..x.rows()).collect();
        rng.shuffle(&mut order);
        let a = head.embed(&x, None).unwrap();
        let b = head.embed(&x.select_rows(&order), None).unwrap();
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((u - v).abs() <= 1e-12, "{u} vs {v}");
        }
        Ok(())
    })
}

pub fn projector_duplication_invariance(cases: u32) -> Result<(), String> {
    check(cases, (head_case(), 2usize..4), |(case, copies)| {
        let (head, x, _) = head_and_tokens(case);
        let order: Vec<usize> = (0..x.rows() * copies).map(|j| j % x.rows()).collect();
        let a = head.embed(&x, None).unwrap();
        let b = head.embed(&x.select_rows(&order), None).unwrap();
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((u - v).abs() <= 1e-12, "{u} vs {v}");
        }
        Ok(())
    })
}

pub fn projector_output_is_unit_norm(cases: u32) -> Result<(), String> {
    check(cases, head_case(), |case| {
        let (head, x, _) = head_and_tokens(case);
        let out = head.embed(&x, None).unwrap();
        prop_assert!((numkit::norm(out.as_slice()) - 1.0).abs() <= 1e-9);
        Ok(())
    })
}

pub fn losses_batch_permutation_invariance(cases: u32) -> Result<(), String> {
    check(
        cases,
        (
            1usize..12,
            1usize..9,
            0.01f64..2.0,
            -12.0f64..2.0,
            any::<u64>(),
        ),
        |(n, d, tau, bias, seed)| {
            let mut rng = Rng::new(seed);
            let p = unit_rows(&mut rng, n, d);
            let s = unit_rows(&mut rng, n, d);
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            let a = EmbeddingBatch::new(p.clone(), s.clone()).unwrap();
            let b = EmbeddingBatch::new(p.select_rows(&order), s.select_rows(&order)).unwrap();
            let clip = ClipConfig { tau };
            let sig = SiglipConfig {
                tau,
                bias,
                bias_learnable: false,
            };
            let dc = clip_loss(&a, &clip).unwrap().value - clip_loss(&b, &clip).unwrap().value;
            let ds = siglip_loss(&a, &sig).unwrap().value - siglip_loss(&b, &sig).unwrap().value;
            prop_assert!(dc.abs() <= 1e-9, "clip moved by {dc}");
            prop_assert!(ds.abs() <= 1e-9, "siglip moved by {ds}");
            Ok(())
        },
    )
}

fn ranking(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    idx
}

pub fn temperature_ranking_invariance(cases: u32) -> Result<(), String> {
    check(
        cases,
        (1usize..30, 2usize..8, 1e-3f64..10.0, any::<u64>()),
        |(n, d, tau, seed)| {
            let mut rng = Rng::new(seed);
            let p = unit_rows(&mut rng, n, d);
            let s = unit_rows(&mut rng, n, d);
            let sim =
                similarity_matrix(&EmbeddingBatch::new(p.clone(), s.clone()).unwrap()).unwrap();
            for i in 0..n {
                let scaled: Vec<f64> = sim.row(i).iter().map(|v| v / tau).collect();
                prop_assert_eq!(ranking(sim.row(i)), ranking(&scaled));
            }
            // retrieval never sees tau; a positive rescale of one side keeps
            // the same cosine geometry, so recall is unchanged
            let ids: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
            let q = bank(&ids, p, Modality::Sequence);
            let c = bank(&ids, s, Modality::Structure);
            let ks: Vec<usize> = (1..=n).collect();
            let base = retrieval::recall_at_k(&q, &c, &ks).unwrap();
            for i in 0..n {
                let top = retrieval::top_k(q.vector(i), &c, n).unwrap();
                let order: Vec<usize> = top.iter().map(|(id, _)| c.position(id).unwrap()).collect();
                let scaled: Vec<f64> = sim.row(i).iter().map(|v| v / tau).collect();
                prop_assert_eq!(order, ranking(&scaled));
            }
            prop_assert_eq!(base.recall[n - 1], 1.0);
            Ok(())
        },
    )
}

pub fn recall_is_monotone_in_k(cases: u32) -> Result<(), String> {
    check(
        cases,
        (1usize..40, 0usize..20, 1usize..6, any::<u64>()),
        |(m, extra, d, seed)| {
            let mut rng = Rng::new(seed);
            let ids: Vec<String> = (0..m + extra).map(|i| format!("c{i}")).collect();
            let q = bank(&ids[..m], unit_rows(&mut rng, m, d), Modality::Sequence);
            let c = bank(&ids, unit_rows(&mut rng, m + extra, d), Modality::Structure);
            let ks: Vec<usize> = (1..=m + extra).collect();
            let r = retrieval::recall_at_k(&q, &c, &ks).unwrap();
            for w in r.recall.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
            prop_assert!(r.recall.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(*r.recall.last().unwrap(), 1.0);
            Ok(())
        },
    )
}

pub fn pae1_round_trip(cases: u32) -> Result<(), String> {
    check(
        cases,
        (1usize..12, 1usize..9, 1usize..9, 1usize..7, any::<u64>()),
        |(n, d_p, d_s, t_max, seed)| {
            let ds = random_dataset(seed, n, d_p, d_s, t_max);
            let bytes = dataio::encode_dataset(&ds).unwrap();
            let back = dataio::decode_dataset(&bytes).unwrap();
            prop_assert_eq!(&back, &ds);
            prop_assert_eq!(dataio::encode_dataset(&back).unwrap(), bytes);
            Ok(())
        },
    )
}

fn fractions() -> impl Strategy<Value = SplitFractions> {
    (0.05f64..1.0, 0.0f64..1.0, 0.0f64..1.0).prop_map(|(a, b, c)| {
        let total = a + b + c;
        SplitFractions {
            train: a / total,
            val: b / total,
            test: c / total,
        }
    })
}

pub fn split_is_deterministic_and_disjoint(cases: u32) -> Result<(), String> {
    check(
        cases,
        (1usize..200, fractions(), any::<u64>()),
        |(n, f, seed)| {
            let items: Vec<usize> = (0..n).collect();
            let (a1, b1, c1) = dataio::split(&items, f, seed).unwrap();
            let (a2, b2, c2) = dataio::split(&items, f, seed).unwrap();
            prop_assert_eq!((&a1, &b1, &c1), (&a2, &b2, &c2));
            let mut all: Vec<usize> = a1.iter().chain(&b1).chain(&c1).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, items);
            let (nt, nv, ns) = f.sizes(n);
            prop_assert_eq!((a1.len(), b1.len(), c1.len()), (nt, nv, ns));
            Ok(())
        },
    )
}

pub fn batches_keep_pairs_aligned(cases: u32) -> Result<(), String> {
    check(
        cases,
        (1usize..30, 1usize..9, any::<u64>()),
        |(n, size, seed)| {
            let ds = random_dataset(seed, n, 3, 2, 4);
            let mut rng = Rng::new(seed ^ 1);
            let batches = make_batches(&ds.records, size, &mut rng).unwrap();
            let mut seen = 0;
            for b in &batches {
                for (i, rec) in b.records.iter().enumerate() {
                    let seq = &b.seq;
                    let st = &b.structure;
                    let t_p = rec.seq_tokens.rows();
                    let t_s = rec.struct_tokens.rows();
                    prop_assert_eq!(seq.mask[i].iter().filter(|m| **m).count(), t_p);
                    prop_assert_eq!(st.mask[i].iter().filter(|m| **m).count(), t_s);
                    for j in 0..t_p {
                        prop_assert_eq!(seq.tokens[i].row(j), rec.seq_tokens.row(j));
                    }
                    for j in 0..t_s {
                        prop_assert_eq!(st.tokens[i].row(j), rec.struct_tokens.row(j));
                    }
                }
                seen += b.len();
            }
            prop_assert_eq!(seen, n);
            Ok(())
        },
    )
}

pub type Property = (&'static str, fn(u32) -> Result<(), String>);

/// Every property suite, in module order.
pub const PROPERTIES: &[Property] = &[
    (
        "numkit: softmax normalization and shift invariance",
        softmax_sums_to_one_and_is_shift_invariant,
    ),
    (
        "numkit: layer norm standardization",
        layer_norm_standardizes,
    ),
    (
        "numkit: l2 normalize idempotence",
        l2_normalize_is_idempotent,
    ),
    (
        "projector: token permutation invariance",
        projector_token_permutation_invariance,
    ),
    (
        "projector: token duplication invariance",
        projector_duplication_invariance,
    ),
    ("projector: unit-norm output", projector_output_is_unit_norm),
    (
        "losses: batch permutation invariance",
        losses_batch_permutation_invariance,
    ),
    (
        "losses/retrieval: temperature ranking invariance",
        temperature_ranking_invariance,
    ),
    ("retrieval: recall monotone in k", recall_is_monotone_in_k),
    ("dataio: PAE1 round trip", pae1_round_trip),
    (
        "dataio: split determinism and disjointness",
        split_is_deterministic_and_disjoint,
    ),
    (
        "dataio: batch pairing and masks",
        batches_keep_pairs_aligned,
    ),
];
