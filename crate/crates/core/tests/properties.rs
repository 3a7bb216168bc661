//! Property tests of the invariants every module promises.

use proptest::prelude::*;
use rand::seq::SliceRandom;

use graphbandit::env::{run_bandit, Algorithm, EnvConfig, Environment, Hyperparams, RewardSpec, RunOptions};
use graphbandit::gnn::{loss, GnnParams, HistoryBuffer};
use graphbandit::graph::{gen_er, gen_rdpg, Graph, GraphKind};
use graphbandit::harness::metrics::{relative_regret, summarize, top_rate, FinalRegret};
use graphbandit::harness::output::{final_regrets, final_regrets_from_raw, read_raw, write_raw};
use graphbandit::linalg::Matrix;
use graphbandit::policy::{argmax, pe_step, ts_select, ActiveSet, InverseMode, UncertaintyState};
use graphbandit::rng;
use graphbandit::tangent::{effective_dimension, empirical_gntk, TangentFeature, ThetaTag, PSD_TOLERANCE};
use graphbandit::train::{train, LossScaling, TrainerConfig};
use graphbandit::Scalar;

fn graph(kind: u8, n: usize, p: f64, d: usize, seed: u64) -> Graph<f64> {
    let mut r = rng::derive(seed, &[]);
    if kind == 0 {
        gen_er(n, p, d, &mut r).unwrap()
    } else {
        gen_rdpg(n, d, &mut r).unwrap()
    }
}

fn tf(v: Vec<f64>) -> TangentFeature<f64> {
    TangentFeature { vec: v, width: 2, tag: ThetaTag::Current }
}

fn algorithms() -> impl Strategy<Value = Algorithm> {
    prop::sample::select(Algorithm::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adjacency_is_symmetric_binary_loopless(kind in 0u8..2, n in 1usize..25, p in 0.0f64..=1.0, seed in any::<u64>()) {
        let g = graph(kind, n, p, 3, seed);
        let rows = g.adjacency_rows();
        for i in 0..n {
            prop_assert_eq!(rows[i][i], 0);
            for j in 0..n {
                prop_assert!(rows[i][j] <= 1);
                prop_assert_eq!(rows[i][j], rows[j][i]);
            }
        }
    }

    #[test]
    fn aggregated_rows_are_unit_or_zero(kind in 0u8..2, n in 1usize..25, p in 0.0f64..=1.0, seed in any::<u64>(), identity in any::<bool>()) {
        let g = graph(kind, n, p, 4, seed);
        let agg = g.aggregate(identity);
        for i in 0..n {
            let norm = agg.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-12, "row {} norm {}", i, norm);
            if !identity && g.degree(i) == 0 {
                prop_assert!(agg.row(i).iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn padding_keeps_original_rows(n in 1usize..15, extra in 0usize..8, seed in any::<u64>(), identity in any::<bool>()) {
        let g = graph(0, n, 0.4, 3, seed);
        let padded = g.pad_to(n + extra).unwrap();
        let (a, b) = (g.aggregate(identity), padded.aggregate(identity));
        for i in 0..n {
            prop_assert_eq!(a.row(i), b.row(i));
        }
        for i in n..n + extra {
            prop_assert!(b.row(i).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn generators_are_deterministic(kind in 0u8..2, n in 1usize..20, seed in any::<u64>()) {
        prop_assert_eq!(graph(kind, n, 0.3, 2, seed), graph(kind, n, 0.3, 2, seed));
    }

    #[test]
    fn zero_output_at_initialization(layers in 2usize..5, half in 1usize..20, seed in any::<u64>(), n in 1usize..15) {
        let mut r = rng::derive(seed, &[]);
        let params = GnnParams::<f64>::init(layers, 2 * half, 4, &mut r).unwrap();
        let g: Graph<f64> = gen_er(n, 0.5, 4, &mut r).unwrap();
        prop_assert!(params.forward_gnn(&g.aggregate(false)).unwrap().abs() < 1e-12);
    }

    #[test]
    fn output_is_invariant_under_node_relabeling(n in 1usize..15, seed in any::<u64>()) {
        let mut r = rng::derive(seed, &[]);
        let mut params = GnnParams::<f64>::init(3, 8, 4, &mut r).unwrap();
        for w in params.as_mut_slice() {
            *w += 0.3 * f64::standard_normal(&mut r);
        }
        let g: Graph<f64> = gen_er(n, 0.5, 4, &mut r).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let a = params.forward_gnn(&g.aggregate(false)).unwrap();
        let b = params.forward_gnn(&g.permute(&perm).unwrap().aggregate(false)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn effective_dimension_is_between_one_and_size(n in 1usize..10, rank in 1usize..10, seed in any::<u64>(), t in 1usize..2000, lambda in 1e-4f64..10.0) {
        let a = Matrix::<f64>::random_normal(n, rank, &mut rng::derive(seed, &[]));
        let k = a.matmul(&a.transpose()).unwrap();
        let d = effective_dimension(&k, t, lambda).unwrap();
        prop_assert!(d >= 1.0 - 1e-12 && d <= n as f64 + 1e-12, "{}", d);
    }

    #[test]
    fn full_mode_sigma_shrinks_after_update(dim in 1usize..12, seed in any::<u64>(), lambda in 1e-3f64..2.0) {
        let mut r = rng::derive(seed, &[]);
        let phi: Vec<f64> = (0..dim).map(|_| f64::standard_normal(&mut r)).collect();
        prop_assume!(phi.iter().any(|&x| x.abs() > 1e-3));
        let mut s = UncertaintyState::new(InverseMode::Full, dim, lambda, 2).unwrap();
        for _ in 0..3 {
            let before = s.sigma(&tf(phi.clone())).unwrap();
            s.update(&tf(phi.clone())).unwrap();
            let after = s.sigma(&tf(phi.clone())).unwrap();
            prop_assert!(after < before, "{} !< {}", after, before);
        }
    }

    #[test]
    fn thompson_argmax_ignores_constant_shift(means in prop::collection::vec(-5.0f64..5.0, 1..20), shift in -100.0f64..100.0, seed in any::<u64>()) {
        let sigmas = vec![1.0; means.len()];
        let shifted: Vec<f64> = means.iter().map(|m| m + shift).collect();
        let mut r = rng::derive(seed, &[]);
        let a = ts_select(&means, &sigmas, 0.0, &mut r).unwrap().0;
        let b = ts_select(&shifted, &sigmas, 0.0, &mut r).unwrap().0;
        prop_assert_eq!(a, argmax(&means).unwrap());
        // A shift can merge near-ties through rounding; only exact maxima compare.
        prop_assert!(means[b] == means[a] || (shifted[a] - shifted[b]).abs() <= 1e-12 * shift.abs().max(1.0));
    }

    #[test]
    fn elimination_set_shrinks_and_survives(
        rounds in prop::collection::vec(prop::collection::vec((-3.0f64..3.0, 0.0f64..2.0), 8), 1..15),
        beta in 0.0f64..3.0,
    ) {
        let mut active = ActiveSet::full(8);
        for round in rounds {
            let (means, sigmas): (Vec<f64>, Vec<f64>) = round.into_iter().unzip();
            let (pick, next) = pe_step(&means, &sigmas, beta, &active).unwrap();
            prop_assert!(active.contains(pick));
            prop_assert!(!next.is_empty());
            prop_assert!(next.members().iter().all(|&i| active.contains(i)));
            active = next;
        }
    }

    #[test]
    fn top_rate_and_relative_regret_ranges(
        table in prop::collection::vec(prop::collection::vec(0.0f64..50.0, 3), 1..6),
    ) {
        let algs = [Algorithm::GnnTs, Algorithm::NnTs, Algorithm::Random];
        let rows: Vec<FinalRegret> = table
            .iter()
            .enumerate()
            .flat_map(|(rep, vals)| {
                vals.iter().zip(algs).map(move |(&regret, algorithm)| FinalRegret { env: "e".into(), rep: rep as u64, algorithm, regret })
            })
            .collect();
        for v in top_rate(&rows).unwrap().values() {
            prop_assert!((0.0..=1.0).contains(v));
        }
        let rel = &relative_regret(&rows).unwrap()["e"];
        let max = rel.values().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(max, 1.0);
        let two: Vec<FinalRegret> = rows.iter().filter(|r| r.algorithm != Algorithm::Random).cloned().collect();
        prop_assert!(top_rate(&two).unwrap().values().all(|&v| v == 1.0));
    }
}

fn small_env(seed: u64, reward: RewardSpec) -> Environment {
    let cfg = EnvConfig {
        graph: GraphKind::Er { p: 0.4 },
        nodes: 6,
        actions: 5,
        feature_dim: 3,
        reward,
        noise_std: 0.01,
        horizon: 12,
    };
    Environment::build(cfg, seed, 0).unwrap()
}

fn small_hp() -> Hyperparams {
    Hyperparams { width: 8, trainer: TrainerConfig { epochs: 2, ..TrainerConfig::default() }, ..Hyperparams::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn regret_is_nonnegative_and_cumulative(alg in algorithms(), seed in any::<u64>()) {
        let env = small_env(seed, RewardSpec::Linear);
        let run = run_bandit(alg, &env, &small_hp(), seed, 0, RunOptions::default()).unwrap();
        let mut prev = 0.0;
        for (k, r) in run.records.iter().enumerate() {
            prop_assert_eq!(r.t, k + 1);
            prop_assert!(r.inst_regret >= 0.0);
            prop_assert!(r.cum_regret >= prev);
            prop_assert!((r.cum_regret - prev - r.inst_regret).abs() < 1e-12);
            prev = r.cum_regret;
        }
    }

    #[test]
    fn runs_are_deterministic(alg in algorithms(), seed in any::<u64>()) {
        let env = small_env(seed, RewardSpec::Linear);
        let opts = RunOptions { record_potential: false, keep_params: true };
        let a = run_bandit(alg, &env, &small_hp(), seed, 1, opts).unwrap();
        let b = run_bandit(alg, &env, &small_hp(), seed, 1, opts).unwrap();
        prop_assert_eq!(&a.records, &b.records);
        prop_assert_eq!(a.final_params, b.final_params);
    }

    #[test]
    fn potential_inequality_holds_in_full_mode(seed in any::<u64>()) {
        let env = small_env(seed, RewardSpec::Linear);
        let hp = Hyperparams { inverse_mode: InverseMode::Full, ..small_hp() };
        let run = run_bandit(Algorithm::GnnTs, &env, &hp, seed, 0, RunOptions { record_potential: true, keep_params: false }).unwrap();
        let p = run.potential.unwrap();
        prop_assert!(p.holds(), "{} > {}", p.lhs, p.rhs);
    }

    #[test]
    fn summary_recomputes_exactly_from_raw(seed in any::<u64>(), reps in 1u64..4) {
        let env = small_env(seed, RewardSpec::Linear);
        let mut runs = Vec::new();
        for alg in [Algorithm::GnnUcb, Algorithm::Random] {
            for rep in 0..reps {
                runs.push(run_bandit(alg, &env, &small_hp(), seed, rep, RunOptions::default()).unwrap());
            }
        }
        let mut buf = Vec::new();
        write_raw(&runs, &mut buf).unwrap();
        let rows = read_raw(buf.as_slice()).unwrap();
        let direct = summarize(&final_regrets(&runs, "env")).unwrap();
        let recomputed = summarize(&final_regrets_from_raw(&rows, "env").unwrap()).unwrap();
        prop_assert_eq!(direct, recomputed);
    }

    #[test]
    fn cold_training_is_bitwise_reproducible(seed in any::<u64>()) {
        let env = small_env(seed, RewardSpec::Linear);
        let mut r = rng::derive(seed, &[1]);
        let init = GnnParams::<f64>::init(2, 8, 3, &mut r).unwrap();
        let mut hist = HistoryBuffer::new();
        for (i, a) in env.graph_features.iter().enumerate() {
            hist.push(a, env.table.mu[i]).unwrap();
        }
        let cfg = TrainerConfig { warm_start: false, epochs: 3, ..TrainerConfig::default() };
        let moved = GnnParams::from_flat(*init.arch(), init.as_slice().iter().map(|w| w + 0.1).collect()).unwrap();
        let a = train(&moved, &init, &hist, &cfg, &mut rng::derive(seed, &[2])).unwrap();
        let b = train(&init, &init, &hist, &cfg, &mut rng::derive(seed, &[2])).unwrap();
        prop_assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn small_full_batch_step_does_not_increase_the_objective(seed in any::<u64>()) {
        let env = small_env(seed, RewardSpec::Linear);
        let mut r = rng::derive(seed, &[3]);
        let init = GnnParams::<f64>::init(2, 8, 3, &mut r).unwrap();
        let mut hist = HistoryBuffer::new();
        for (i, a) in env.graph_features.iter().enumerate() {
            hist.push(a, env.table.mu[i]).unwrap();
        }
        let lambda = 1e-3;
        let cfg = TrainerConfig {
            learning_rate: 1e-4,
            l2_weight: lambda,
            epochs: 1,
            batch_size: hist.len(),
            loss_scaling: LossScaling::History,
            ..TrainerConfig::default()
        };
        let after = train(&init, &init, &hist, &cfg, &mut r).unwrap();
        prop_assert!(loss(&after, &hist, lambda).unwrap() <= loss(&init, &hist, lambda).unwrap());
    }

    #[test]
    fn empirical_gntk_is_symmetric_psd(seed in any::<u64>(), count in 1usize..10) {
        let mut r = rng::derive(seed, &[]);
        let space = graphbandit::graph::gen_action_space::<f64, _>(GraphKind::Er { p: 0.4 }, count, 8, 3, &mut r).unwrap();
        let aggs = space.aggregate_all(Default::default());
        let params = GnnParams::init(2, 16, 3, &mut r).unwrap();
        let k = empirical_gntk(&aggs, &params).unwrap();
        prop_assert_eq!(k.entries.max_asymmetry(), 0.0);
        prop_assert!(k.is_psd(PSD_TOLERANCE).unwrap());
        prop_assert!(*k.spectrum().unwrap().last().unwrap() >= 0.0);
    }
}
