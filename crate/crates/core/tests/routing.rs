use std::collections::BTreeMap;

use mfl_core::data::FeatureComposition;
use mfl_core::math::Tensor;
use mfl_core::model::{BlockConfig, ModelConfig, MoeBlock, ToyLm};
use mfl_core::routing::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const V: usize = 12;

fn model(block: BlockConfig, seed: u64) -> ToyLm {
    ToyLm::new(ModelConfig { vocab: V, d_model: 8, max_len: 8, attn_heads: 2, block }, seed).unwrap()
}

struct Rows {
    h: Tensor,
    targets: Vec<usize>,
    comps: Vec<FeatureComposition>,
    positions: Vec<usize>,
}

fn rows(n: usize, seed: u64) -> Rows {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Rows {
        h: Tensor::uniform(&[n, 8], 2.0, &mut rng),
        targets: (0..n).map(|_| rng.gen_range(0..V)).collect(),
        comps: (0..n).map(|_| FeatureComposition(vec![rng.gen_range(0..3), rng.gen_range(0..2)])).collect(),
        positions: (0..n).map(|i| i % 7).collect(),
    }
}

fn traces_for(m: &ToyLm, r: &Rows) -> Vec<TraceRecord> {
    trace_rows(m, &r.h, &r.targets, &r.comps, &r.positions, 0, 0).unwrap()
}

#[test]
fn counts_agree_with_a_rescan() {
    let m = model(BlockConfig::MultiHead { heads: 4, experts: 3, top_k: 1, hidden: 4 }, 1);
    let r = rows(300, 2);
    let traces = traces_for(&m, &r);
    for gran in [Granularity::Tuple, Granularity::PerHead] {
        let counts = collect_routes(&traces, 0, gran).unwrap();
        let mut rescan: BTreeMap<(String, FeatureComposition), u64> = BTreeMap::new();
        for t in &traces {
            let labels: Vec<String> = match gran {
                Granularity::Tuple => vec![format!("{:?}", t.route_tuple)],
                _ => t.route_tuple.iter().enumerate().map(|(h, e)| format!("{h}:{e:?}")).collect(),
            };
            for l in labels {
                *rescan.entry((l, t.composition.clone())).or_default() += 1;
            }
        }
        let flat: u64 = counts.values().flat_map(|c| c.values()).sum();
        assert_eq!(flat, rescan.values().sum::<u64>());
        assert_eq!(counts.values().map(|c| c.len()).sum::<usize>(), rescan.len());
        let stats = route_stats(&traces, 0, gran).unwrap();
        assert!((stats.iter().map(|s| s.mass_old).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn one_composition_means_point_masses() {
    let m = model(BlockConfig::Standard { experts: 4, top_k: 2, hidden: 4 }, 3);
    let mut r = rows(100, 4);
    r.comps = vec![FeatureComposition(vec![1, 1]); 100];
    let stats = route_stats(&traces_for(&m, &r), 0, Granularity::Single).unwrap();
    assert!(stats.iter().all(|s| s.neff == 1.0 && s.p.len() == 1));
    assert_eq!(layer_mass_weighted_neff(&stats).unwrap(), 1.0);
}

#[test]
fn single_expert_layer_sees_the_marginal() {
    let m = model(BlockConfig::Standard { experts: 1, top_k: 1, hidden: 4 }, 5);
    let r = rows(120, 6);
    let stats = route_stats(&traces_for(&m, &r), 0, Granularity::Single).unwrap();
    assert_eq!(stats.len(), 1);
    for (c, p) in &stats[0].p {
        let marginal = r.comps.iter().filter(|x| *x == c).count() as f64 / 120.0;
        assert!((p - marginal).abs() < 1e-15);
    }
    let ps: Vec<f64> = stats[0].p.values().copied().collect();
    assert!((layer_mass_weighted_neff(&stats).unwrap() - neff(&ps).unwrap()).abs() < 1e-12);
}

#[test]
fn unchanged_parameters_give_zero_delta() {
    let m = model(BlockConfig::MultiHead { heads: 2, experts: 4, top_k: 2, hidden: 4 }, 7);
    let r = rows(200, 8);
    let traces = traces_for(&m, &r);
    for mode in [Rerouting::Frozen, Rerouting::Live] {
        let losses = old_token_losses(&m, &r.h, &r.targets, &traces, mode).unwrap();
        for (l, t) in losses.iter().zip(&traces) {
            assert!((l - t.per_token_loss).abs() < 1e-10);
        }
        let mut stats = route_stats(&traces, 0, Granularity::Tuple).unwrap();
        let after = route_old_loss(&traces, &losses, 0, Granularity::Tuple).unwrap();
        for s in &stats {
            assert!((after[&s.route] - s.loss_before.unwrap()).abs() < 1e-10);
        }
        delta_l(&mut stats, &after).unwrap();
        assert!(stats.iter().all(|s| s.delta.unwrap().abs() < 1e-10));

        let shifted: BTreeMap<_, _> = after.iter().map(|(k, v)| (k.clone(), v + 0.5)).collect();
        delta_l(&mut stats, &shifted).unwrap();
        assert!(stats.iter().all(|s| (s.delta.unwrap() - 0.5).abs() < 1e-10));
    }
}

#[test]
fn uniform_output_gives_ln_v_per_route() {
    let mut m = model(BlockConfig::Standard { experts: 3, top_k: 1, hidden: 4 }, 9);
    m.store.get_mut(m.unemb).value = Tensor::zeros(&[8, V]);
    let r = rows(60, 10);
    let traces = traces_for(&m, &r);
    let losses = old_token_losses(&m, &r.h, &r.targets, &traces, Rerouting::Frozen).unwrap();
    for l in route_old_loss(&traces, &losses, 0, Granularity::Single).unwrap().values() {
        assert!((l - (V as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn perturbing_one_expert_moves_only_its_route() {
    let old = model(BlockConfig::Standard { experts: 2, top_k: 1, hidden: 4 }, 11);
    let mut new = old.clone();
    let MoeBlock::Standard(layer) = &old.block else { unreachable!() };
    let w2 = layer.bank.experts[1].w2;
    new.store.get_mut(w2).value = new.store.value(w2).map(|v| v + 0.7);
    let r = rows(200, 12);
    let stats =
        transition_routes(&old, &new, &r.h, &r.targets, &r.comps, &r.positions, 0, Granularity::Single, Rerouting::Frozen).unwrap();
    assert_eq!(stats.len(), 2);
    for s in &stats {
        let RouteId::Experts(e) = &s.route.id else { unreachable!() };
        if e == &vec![0] {
            assert!(s.delta.unwrap().abs() < 1e-12);
        } else {
            assert!(s.delta.unwrap().abs() > 1e-3);
        }
    }
}

fn synthetic(masses: &[f64], neffs: &[f64]) -> Vec<RouteStats> {
    let total: f64 = masses.iter().sum();
    masses
        .iter()
        .zip(neffs)
        .enumerate()
        .map(|(i, (&m, &n))| RouteStats {
            route: RouteKey { layer: 0, granularity: Granularity::Single, id: RouteId::Experts(vec![i]) },
            counts: BTreeMap::new(),
            p: BTreeMap::new(),
            neff: n,
            mass_old: m / total,
            loss_before: Some(0.0),
            loss_after: Some(n),
            delta: Some(n),
        })
        .collect()
}

#[test]
fn equal_masses_fill_bins_evenly() {
    let neffs: Vec<f64> = (0..20).map(|i| 1.0 + i as f64).collect();
    let summary = mass_quantile_bins(&synthetic(&[1.0; 20], &neffs), 5).unwrap();
    assert!(summary.bins.iter().all(|b| b.as_ref().unwrap().routes == 4));
    assert_eq!(summary.spearman.unwrap().0, 1.0);
    assert_eq!(summary.bin_spearman.unwrap().0, 1.0);
}

#[test]
fn heavy_route_spans_several_cut_points() {
    let mut masses = vec![1.0; 12];
    masses[5] = 9.0;
    let neffs: Vec<f64> = (0..12).map(|i| i as f64 + 1.0).collect();
    let summary = mass_quantile_bins(&synthetic(&masses, &neffs), 10).unwrap();
    let empty: Vec<usize> = summary.bins.iter().enumerate().filter(|(_, b)| b.is_none()).map(|(i, _)| i).collect();
    assert_eq!(empty, vec![3, 5, 6]);
    let heavy = summary.bins[4].as_ref().unwrap();
    assert_eq!((heavy.routes, heavy.se_delta), (1, 0.0));
    assert!((heavy.mass - 0.45).abs() < 1e-12);
    assert_eq!(summary.bins.iter().flatten().map(|b| b.routes).sum::<usize>(), 12);
}

#[test]
fn too_many_bins_are_reduced() {
    let summary = mass_quantile_bins(&synthetic(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), 8).unwrap();
    assert_eq!(summary.bins.len(), 3);
    assert!(mass_quantile_bins(&synthetic(&[1.0], &[1.0]), 0).is_err());
}

#[test]
fn pooled_transitions_carry_equal_mass() {
    let a = synthetic(&[1.0, 1.0], &[1.0, 2.0]);
    let b = synthetic(&[3.0, 1.0, 1.0], &[1.0, 2.0, 3.0]);
    let pooled = pool_routes(vec![a, vec![], b]).unwrap();
    assert_eq!(pooled.len(), 5);
    assert!((pooled.iter().map(|s| s.mass_old).sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((pooled[0].mass_old - 0.25).abs() < 1e-12);
}

#[test]
fn export_rows_follow_the_stats() {
    let stats = synthetic(&[1.0, 3.0], &[1.0, 2.0]);
    let rows = route_rows(&stats);
    assert_eq!(rows[1].mass_old, 0.75);
    assert_eq!(rows[1].delta, Some(2.0));
    let text = serde_json::to_string(&rows[0]).unwrap();
    for field in ["layer", "granularity", "route", "mass_old", "neff", "loss_before", "loss_after", "delta"] {
        assert!(text.contains(field));
    }
}

proptest! {
    #[test]
    fn neff_stays_within_its_support(weights in prop::collection::vec(0.0f64..10.0, 1..30)) {
        prop_assume!(weights.iter().any(|&w| w > 0.0));
        let total: f64 = weights.iter().sum();
        let p: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let support = p.iter().filter(|&&v| v > 0.0).count() as f64;
        let n = neff(&p).unwrap();
        prop_assert!(n >= 1.0 - 1e-12 && n <= support + 1e-9);
    }

    #[test]
    fn bin_masses_stay_near_the_quantile(masses in prop::collection::vec(0.01f64..5.0, 2..60), bins in 1usize..12) {
        let neffs: Vec<f64> = (0..masses.len()).map(|i| 1.0 + ((i * 7919) % 13) as f64).collect();
        let stats = synthetic(&masses, &neffs);
        let summary = mass_quantile_bins(&stats, bins).unwrap();
        let n = summary.bins.len() as f64;
        let heaviest = stats.iter().map(|s| s.mass_old).fold(0.0, f64::max);
        let binned: f64 = summary.bins.iter().flatten().map(|b| b.mass).sum();
        prop_assert!((binned - 1.0).abs() < 1e-9);
        for b in summary.bins.iter().flatten() {
            prop_assert!((b.mass - 1.0 / n).abs() <= heaviest + 1e-12);
        }
    }

    #[test]
    fn spearman_ignores_monotone_transforms(x in prop::collection::vec(-5.0f64..5.0, 4..30), seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = x.iter().map(|v| v + rng.gen_range(-2.0..2.0)).collect();
        let (r1, p1) = spearman(&x, &y).unwrap();
        let ty: Vec<f64> = y.iter().map(|v| v.exp()).collect();
        let (r2, p2) = spearman(&x, &ty).unwrap();
        prop_assert!((r1 - r2).abs() < 1e-12 && (p1 - p2).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&r1) && (0.0..=1.0).contains(&p1));
    }
}
