use std::collections::BTreeMap;

use mfl_core::data::*;
use mfl_core::math::Tensor;
use mfl_core::probes::{train_probe, ProbeConfig};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn grammar(seed: u64) -> Grammar {
    Grammar::new(GrammarConfig { seq_len: 16, ..GrammarConfig::default() }, seed).unwrap()
}

fn def(id: usize, sequences: usize) -> TaskDef {
    TaskDef { id, name: format!("t{id}"), sequences }
}

#[test]
fn corpora_are_pure_functions_of_spec_and_seed() {
    let a = generate_task(&grammar(4), &def(2, 50)).unwrap();
    let b = generate_task(&grammar(4), &def(2, 50)).unwrap();
    let c = generate_task(&grammar(5), &def(2, 50)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.sequences, c.sequences);
}

#[test]
fn domain_is_a_function_of_the_token() {
    let g = grammar(1);
    let corpus = generate_task(&g, &def(0, 300)).unwrap();
    let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
    for s in &corpus.sequences {
        for (pos, &t) in s.tokens.iter().enumerate() {
            if g.is_content_position(pos) {
                assert_eq!(*owner.entry(t).or_insert(s.domain), s.domain);
            }
        }
    }
}

#[test]
fn one_hot_token_probe_decodes_domain() {
    let g = grammar(2);
    let corpus = generate_task(&g, &def(0, 400)).unwrap();
    let base = g.config.content_base();
    let width = g.config.domains * g.config.region_size();
    let (mut rows, mut labels) = (Vec::new(), Vec::new());
    for s in &corpus.sequences {
        for (pos, &t) in s.tokens.iter().enumerate() {
            if g.is_content_position(pos) {
                let mut v = vec![0.0; width];
                v[t - base] = 1.0;
                rows.push(v);
                labels.push(s.domain);
            }
        }
    }
    let reps = Tensor::from_rows(&rows).unwrap();
    let probe = train_probe("domain", 0, &reps, &labels, g.config.domains, &ProbeConfig::default()).unwrap();
    assert!(probe.val_accuracy >= 0.99, "accuracy {}", probe.val_accuracy);
}

#[test]
fn composition_counts_follow_the_grammar_marginals() {
    // One content token per sequence keeps draws independent.
    let g = grammar(3);
    let corpus = generate_task(&g, &def(1, 10_000)).unwrap();
    let spec = &g.spec;
    let mut counts = vec![0u64; spec.num_compositions()];
    for s in &corpus.sequences {
        let pos = 1 + 2 * (s.index % 7);
        counts[g.true_composition(s, pos).unwrap().index(spec)] += 1;
    }
    // Domain, label and tier are uniform; the position bucket follows the
    // share of content positions in each bucket.
    let content: Vec<usize> = (0..7).map(|i| 1 + 2 * i).collect();
    let mut pb_share = vec![0.0; spec.pos_buckets()];
    for &p in &content {
        pb_share[spec.position_bucket(p)] += 1.0 / content.len() as f64;
    }
    let n = 10_000.0;
    let per_rest = 1.0 / (g.config.domains * g.config.labels * g.config.tiers.len()) as f64;
    let mut chi2 = 0.0;
    let mut cells = 0;
    for (idx, &c) in counts.iter().enumerate() {
        let comp = FeatureComposition::from_index(idx, spec);
        let p = per_rest * pb_share[comp.0[3]];
        if p == 0.0 {
            assert_eq!(c, 0);
            continue;
        }
        let (mean, sd) = (n * p, (n * p * (1.0 - p)).sqrt());
        assert!((c as f64 - mean).abs() <= 3.5 * sd, "cell {idx}: {c} vs {mean:.1}");
        chi2 += (c as f64 - mean).powi(2) / mean;
        cells += 1;
    }
    let pval = 1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(chi2);
    assert!(pval > 0.01, "chi-square p = {pval}");
}

#[test]
fn annotated_compositions_match_an_independent_recount() {
    let g = grammar(6);
    let corpus = generate_task(&g, &def(0, 2000)).unwrap();
    let buckets = reference_buckets(&g, &corpus.sequences).unwrap();
    let stats = corpus_stats(&g, &corpus.sequences, &buckets);

    // Recount content tokens and rank them by count. A token's bucket is
    // ceil(4 F) - 1 for the cumulative count share F; tied counts share the
    // bucket of the last token in the tie.
    let mut raw: BTreeMap<usize, u64> = BTreeMap::new();
    for s in &corpus.sequences {
        for p in (1..s.tokens.len()).step_by(2) {
            *raw.entry(s.tokens[p]).or_default() += 1;
        }
    }
    let total: u64 = raw.values().sum();
    let mut by_count: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (t, c) in raw {
        by_count.entry(c).or_default().push(t);
    }
    let mut cum = 0u64;
    let mut expect_bucket = BTreeMap::new();
    for (c, toks) in by_count {
        cum += c * toks.len() as u64;
        let b = ((4 * cum).div_ceil(total) as usize).clamp(1, 4) - 1;
        for t in toks {
            expect_bucket.insert(t, b);
        }
    }

    let (mut agree, mut content) = (0, 0);
    for s in corpus.sequences.iter().take(200) {
        for rec in annotate(&g, s, &stats).unwrap() {
            assert_eq!(rec.composition.0[0], s.domain);
            assert_eq!(rec.composition.0[1], s.label);
            assert_eq!(rec.composition.0[3], g.spec.position_bucket(rec.position));
            if g.is_content_position(rec.position) {
                assert_eq!(rec.composition.0[2], expect_bucket[&rec.token]);
                content += 1;
                agree += usize::from(Some(rec.composition.clone()) == g.true_composition(s, rec.position));
            }
        }
    }
    // Empirical quantiles only approximately recover the tiers: tokens near a
    // cut can land on either side.
    assert!(agree as f64 / content as f64 > 0.8, "{agree} of {content}");
}

#[test]
fn reversed_order_reverses_the_stream() {
    let g = grammar(7);
    let order: Vec<TaskDef> = (0..4).map(|i| def(i, 30)).collect();
    let fwd = task_sequence(&g, &order).unwrap();
    let rev_order: Vec<TaskDef> = order.iter().rev().cloned().collect();
    let rev = task_sequence(&g, &rev_order).unwrap();
    for (a, b) in fwd.iter().zip(rev.iter().rev()) {
        assert_eq!(a.def, b.def);
        assert_eq!(a.train, b.train);
        assert_eq!(a.eval, b.eval);
    }
    assert!(matches!(task_sequence(&g, &[def(1, 3), def(1, 3)]), Err(mfl_core::Error::Contract(_))));
}

#[test]
fn default_stream_has_eight_tasks() {
    let g = grammar(0);
    assert_eq!(g.default_tasks().len(), 8);
    for order in TaskOrder::ALTERNATIVES {
        let mut ids = order.indices().to_vec();
        ids.sort_unstable();
        assert_eq!(ids, (0..8).collect::<Vec<_>>());
    }
}
