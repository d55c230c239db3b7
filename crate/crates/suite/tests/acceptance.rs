//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Runs without the libtest harness so the
//! expensive benchmark runs are shared between criteria 6 to 10.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::time::Instant;

use common::*;
use docclean::engines::{OcrService, Phase};
use docclean::metrics::edit_counts;
use docclean::neural::{
    ctc_loss_indices, min_timesteps, preprocessor_loss, whiteness_mse, Alphabet, ApproximatorArch, ApproximatorModel,
    LogitsSequence, PreprocessorArch, PreprocessorModel,
};
use docclean::selection::{select_random, select_topk_cer, select_uniform_cer, StrategyKind};
use docclean::synthdoc::{builtin_words, Dataset, DegradationRanges, GeneratorConfig, SplitCounts, DEFAULT_MARGIN};
use docclean::trainer::{build_service, pretrain_stage, run_experiment, train_stage, ExperimentSummary, Pretrained, TrainConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::seq::index::sample;
use rand::Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

// ---------- 1: edit distance ----------

fn memo_levenshtein(a: &[char], b: &[char], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let key = (a.len(), b.len());
    if let Some(&d) = memo.get(&key) {
        return d;
    }
    let sub = memo_levenshtein(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]);
    let del = memo_levenshtein(a, &b[1..], memo) + 1;
    let ins = memo_levenshtein(&a[1..], b, memo) + 1;
    let d = sub.min(del).min(ins);
    memo.insert(key, d);
    d
}

fn criterion_1() -> Verdict {
    let t = Instant::now();
    let strings: Vec<Vec<char>> = all_strings(&['a', 'b', 'c'], 6).iter().map(|s| s.chars().collect()).collect();
    let mut mismatches = 0usize;
    let mut pairs = 0usize;
    let mut memo = HashMap::new();
    for a in &strings {
        let sa: String = a.iter().collect();
        for b in &strings {
            memo.clear();
            let want = memo_levenshtein(a, b, &mut memo);
            let sb: String = b.iter().collect();
            if edit_counts(&sa, &sb).total() != want {
                mismatches += 1;
            }
            pairs += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        mismatches == 0 && secs < 10.0,
        format!("{pairs} pairs, {mismatches} mismatches, {secs:.1}s"),
    )
}

// ---------- 2: CTC ----------

fn criterion_2() -> Verdict {
    let t = Instant::now();
    let mut r = rng(21);
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    for symbols in 1..=2usize {
        for steps in 1..=4 {
            for _ in 0..5 {
                let seq = random_log_probs(steps, symbols + 1, &mut r);
                for len in 0..=2u32 {
                    for code in 0..symbols.pow(len) {
                        let label: Vec<usize> = (0..len).map(|i| 1 + (code / symbols.pow(i)) % symbols).collect();
                        if min_timesteps(&label) > steps {
                            continue;
                        }
                        let (loss, _) = ctc_loss_indices(&seq, &label).expect("feasible label");
                        worst = worst.max((loss - brute_force_ctc(&seq, &label)).abs());
                        instances += 1;
                    }
                }
            }
        }
    }
    // two frames, uniform over {blank, a, b}, label "a": three of nine paths
    let third = (1.0f64 / 3.0).ln();
    let uniform = LogitsSequence::new(2, 3, vec![third; 6]).unwrap();
    let (log3, _) = ctc_loss_indices(&uniform, &[1]).unwrap();
    let closed = (log3 - 3f64.ln()).abs();
    let secs = t.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-6 && closed <= 1e-12 && secs < 30.0,
        format!("{instances} instances, max abs error {worst:.2e}, log 3 case error {closed:.1e}, {secs:.1}s"),
    )
}

// ---------- 3: gradients ----------

fn ctc_fd_error(r: &mut rand_chacha::ChaCha8Rng) -> f64 {
    let steps = r.gen_range(2..=6);
    let k = r.gen_range(2..=4);
    let seq = random_log_probs(steps, k, r);
    let label = loop {
        let len = r.gen_range(0..=steps.min(3));
        let l: Vec<usize> = (0..len).map(|_| r.gen_range(1..k)).collect();
        if min_timesteps(&l) <= steps {
            break l;
        }
    };
    let (_, grad) = ctc_loss_indices(&seq, &label).unwrap();
    let mut values = seq.values.clone();
    let mut worst: f64 = 0.0;
    for i in 0..values.len() {
        let num = central_diff(&mut values, i, 1e-6, |v| {
            ctc_loss_indices(&LogitsSequence::new(steps, k, v.to_vec()).unwrap(), &label).unwrap().0
        });
        worst = worst.max(rel_err(grad[i], num, 1e-6));
    }
    worst
}

fn chain_fd_error(inst: u64, r: &mut rand_chacha::ChaCha8Rng) -> f64 {
    let alphabet = Alphabet::new(['a', 'b', 'c']).unwrap();
    let arch = PreprocessorArch {
        levels: 2,
        base_channels: 2,
        skip_gain: 2.0,
    };
    let mut g = PreprocessorModel::new(arch, 100 + inst).unwrap();
    let n = g.params().len();
    for p in &mut g.params_mut()[n - 3..] {
        *p = r.gen_range(-0.5..0.5);
    }
    let f = ApproximatorModel::new(
        ApproximatorArch {
            conv1_channels: 3,
            conv2_channels: 4,
            hidden: 5,
            input_height: 8,
            classes: 4,
        },
        200 + inst,
    )
    .unwrap();
    let img = random_image(8, 16, r);
    let label: String = (0..r.gen_range(1..=3)).map(|_| ['a', 'b', 'c'][r.gen_range(0..3)]).collect();
    let beta = r.gen_range(0.0..2.0);
    let mut grad = vec![0.0; g.parameter_count()];
    preprocessor_loss(&g, &f, &img, &label, &alphabet, beta, Some(&mut grad)).unwrap();
    let mut params = g.params().to_vec();
    let mut worst: f64 = 0.0;
    for i in sample(r, params.len(), 20).into_iter() {
        let num = central_diff(&mut params, i, 1e-6, |p| {
            let gm = PreprocessorModel::from_parts(arch, p.to_vec()).unwrap();
            preprocessor_loss(&gm, &f, &img, &label, &alphabet, beta, None).unwrap().0
        });
        worst = worst.max(rel_err(grad[i], num, 1e-6));
    }
    worst
}

fn criterion_3() -> Verdict {
    let t = Instant::now();
    let mut r = rng(31);
    let ctc = (0..20).map(|_| ctc_fd_error(&mut r)).fold(0.0, f64::max);
    let chain = (0..20).map(|i| chain_fd_error(i, &mut r)).fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    verdict(
        ctc <= 1e-4 && chain <= 1e-3 && secs < 120.0,
        format!("worst relative error CTC {ctc:.2e}, chain {chain:.2e}, {secs:.1}s"),
    )
}

// ---------- 4: budget exactness ----------

fn expected_per_batch(n: f64, b: usize) -> usize {
    if n == 0.0 {
        return 0;
    }
    ((2.0 * n * b as f64 / 100.0).round() as usize).clamp(1, 2 * b)
}

fn criterion_4() -> Verdict {
    let gen = GeneratorConfig {
        words: builtin_words(),
        counts: SplitCounts {
            train: 210,
            validation: 20,
            test: 20,
        },
        strips_per_document: 10,
        margin: DEFAULT_MARGIN,
        ranges: DegradationRanges::default(),
        seed: 4,
    };
    let ds = Dataset::synthesize(&gen).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.train.epochs = 2;
    cfg.train.pretrain_epochs = 1;
    cfg.train.batch_size = 20;
    cfg.model.unet_channels = 2;
    let alphabet = Alphabet::builtin();
    let pre_service = build_service(&cfg.backend).unwrap();
    let pretrained = pretrain_stage(&cfg, &ds, &pre_service, &alphabet).unwrap();
    let strips = 210usize;
    let batches: Vec<usize> = (0..strips).step_by(20).map(|i| (strips - i).min(20)).collect();

    let mut failures = Vec::new();
    for &n in &[0.0, 2.5, 4.0, 8.0, 50.0, 100.0] {
        for kind in StrategyKind::ALL {
            cfg.budget.percent = n;
            cfg.budget.strategy = kind;
            let service = build_service(&cfg.backend).unwrap();
            let label = format!("{n}%/{kind}");
            let summary = match train_stage(&cfg, &ds, &service, &alphabet, &pretrained, None) {
                Ok(o) => o.summary,
                Err(e) => {
                    failures.push(format!("{label}: {e}"));
                    continue;
                }
            };
            let oracle: usize = batches.iter().map(|&b| expected_per_batch(n, b)).sum::<usize>() * 2;
            let ledger = service.ledger().count(Phase::Train);
            if ledger != oracle || summary.train_queries != oracle || summary.budget_ceiling != oracle {
                failures.push(format!("{label}: ledger {ledger} oracle {oracle}"));
            }
            if n == 10.0 || n == 50.0 {
                let entries = service.ledger().snapshot();
                let mut per: BTreeMap<(String, u32), usize> = BTreeMap::new();
                for e in entries.iter().filter(|e| e.phase == Phase::Train) {
                    *per.entry((e.sample_id.clone(), e.epoch)).or_default() += 1;
                }
                if n == 50.0 && (per.len() != strips * 2 || per.values().any(|&c| c != 1)) {
                    failures.push(format!("{label}: not one query per sample per epoch"));
                }
            }
        }
    }
    // 10% asks for 20% of the strips each epoch
    cfg.budget.percent = 10.0;
    cfg.budget.strategy = StrategyKind::UniformCer;
    let service = build_service(&cfg.backend).unwrap();
    match train_stage(&cfg, &ds, &service, &alphabet, &pretrained, None) {
        Ok(_) => {
            for epoch in 1..=2 {
                let q = service.ledger().count_where(|e| e.phase == Phase::Train && e.epoch == epoch);
                if q * 5 != strips {
                    failures.push(format!("10%: epoch {epoch} queried {q} of {strips} strips"));
                }
            }
        }
        Err(e) => failures.push(format!("10%: {e}")),
    }
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            "18 budget/strategy pairs plus the 10% and 50% identities match exactly".to_string()
        } else {
            failures.join("; ")
        },
    )
}

// ---------- 5: selection ----------

fn cer_vector() -> impl Strategy<Value = (Vec<f64>, usize, u64)> {
    let values = prop_oneof![
        3 => prop::collection::vec(0.0f64..=2.0, 1..64),
        1 => (1usize..64, 0.0f64..=1.0).prop_map(|(n, v)| vec![v; n]),
        1 => prop::collection::vec(prop::sample::select(vec![0.0, 0.25, 0.5, 1.0]), 1..64),
    ];
    (values, any::<u64>()).prop_flat_map(|(v, seed)| {
        let n = v.len();
        (Just(v), 1..=n, Just(seed))
    })
}

fn distinct_in_range(idx: &[usize], n: usize, k: usize) -> bool {
    let mut s = idx.to_vec();
    s.sort_unstable();
    s.dedup();
    s.len() == k && idx.len() == k && idx.iter().all(|&i| i < n)
}

fn criterion_5() -> Verdict {
    let t = Instant::now();
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    let result = runner.run(&cer_vector(), |(cers, k, seed)| {
        let n = cers.len();
        let uni = select_uniform_cer(&cers, k, &mut rng(seed)).unwrap();
        prop_assert!(distinct_in_range(&uni, n, k), "uniform {uni:?}");
        prop_assert_eq!(&uni, &select_uniform_cer(&cers, k, &mut rng(seed)).unwrap());
        let rand = select_random(n, k, &mut rng(seed)).unwrap();
        prop_assert!(distinct_in_range(&rand, n, k), "random {rand:?}");
        let top = select_topk_cer(&cers, k).unwrap();
        prop_assert!(distinct_in_range(&top, n, k), "topk {top:?}");
        let lowest_kept = top.iter().map(|&i| cers[i]).fold(f64::INFINITY, f64::min);
        let highest_dropped = (0..n).filter(|i| !top.contains(i)).map(|i| cers[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lowest_kept >= highest_dropped);
        for scale in [0.5, 3.0, 1e3] {
            let scaled: Vec<f64> = cers.iter().map(|c| c * scale).collect();
            let mut a = select_topk_cer(&scaled, k).unwrap();
            let mut b = top.clone();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
        if cers.iter().all(|&c| c == cers[0]) {
            prop_assert!(distinct_in_range(&uni, n, k));
        }
        Ok(())
    });
    let secs = t.elapsed().as_secs_f64();
    match result {
        Ok(()) => verdict(secs < 60.0, format!("1000 CER vectors, {secs:.1}s")),
        Err(e) => verdict(false, e.to_string()),
    }
}

// ---------- 6 to 10: benchmark runs ----------

const SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Clone, Copy, PartialEq)]
struct RunKey {
    seed: u64,
    budget: f64,
    strategy: StrategyKind,
    prune: f64,
    beta: f64,
}

fn desk_config() -> TrainConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    TrainConfig::load(&path).expect("configs/desk.toml")
}

fn benchmark() -> Dataset {
    Dataset::synthesize(&GeneratorConfig {
        words: builtin_words(),
        counts: SplitCounts {
            train: 2000,
            validation: 300,
            test: 300,
        },
        strips_per_document: 10,
        margin: DEFAULT_MARGIN,
        ranges: DegradationRanges::default(),
        seed: 0,
    })
    .expect("benchmark dataset")
}

struct Bench {
    dataset: Dataset,
    alphabet: Alphabet,
    runs: Vec<(RunKey, ExperimentSummary)>,
}

impl Bench {
    fn config(&self, key: &RunKey) -> TrainConfig {
        let mut cfg = desk_config();
        cfg.train.seed = key.seed;
        cfg.budget.percent = key.budget;
        cfg.budget.strategy = key.strategy;
        cfg.data.prune_fraction = key.prune;
        cfg.train.beta = key.beta;
        cfg
    }

    fn train(&mut self, key: RunKey, pretrained: &Pretrained, service: &OcrService) {
        let t = Instant::now();
        let cfg = self.config(&key);
        let s = train_stage(&cfg, &self.dataset, service, &self.alphabet, pretrained, None)
            .expect("benchmark run")
            .summary;
        eprintln!(
            "  seed {} budget {:>5} {:<11} prune {:.1} beta {}: test {:.4} (raw {:.4}) queries {} [{:.0}s]",
            key.seed,
            key.budget,
            key.strategy,
            key.prune,
            key.beta,
            s.test_word_accuracy,
            s.test_raw_word_accuracy,
            s.train_queries,
            t.elapsed().as_secs_f64()
        );
        self.runs.push((key, s));
    }

    fn get(&self, key: &RunKey) -> &ExperimentSummary {
        &self.runs.iter().find(|(k, _)| k == key).expect("run recorded").1
    }

    /// Median over seeds of a summary field, in points.
    fn median(&self, budget: f64, strategy: StrategyKind, prune: f64, field: impl Fn(&ExperimentSummary) -> f64) -> f64 {
        let mut v: Vec<f64> = SEEDS
            .iter()
            .map(|&seed| {
                field(self.get(&RunKey {
                    seed,
                    budget,
                    strategy,
                    prune,
                    beta: 1.0,
                }))
            })
            .collect();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }

    fn acc(&self, budget: f64, strategy: StrategyKind, prune: f64) -> f64 {
        100.0 * self.median(budget, strategy, prune, |s| s.test_word_accuracy)
    }
}

fn key(seed: u64, budget: f64, strategy: StrategyKind, prune: f64) -> RunKey {
    RunKey {
        seed,
        budget,
        strategy,
        prune,
        beta: 1.0,
    }
}

fn run_benchmark() -> Bench {
    let mut bench = Bench {
        dataset: benchmark(),
        alphabet: Alphabet::builtin(),
        runs: Vec::new(),
    };
    for seed in SEEDS {
        for prune in [0.0, 0.3, 0.5] {
            let cfg = bench.config(&key(seed, 0.0, StrategyKind::UniformCer, prune));
            let service = build_service(&cfg.backend).unwrap();
            let pretrained = pretrain_stage(&cfg, &bench.dataset, &service, &bench.alphabet).expect("pretraining");
            if prune > 0.0 {
                bench.train(key(seed, 8.0, StrategyKind::UniformCer, prune), &pretrained, &service);
                continue;
            }
            for budget in [0.0, 2.5, 8.0, 100.0] {
                bench.train(key(seed, budget, StrategyKind::UniformCer, 0.0), &pretrained, &service);
            }
            for strategy in StrategyKind::ALL {
                bench.train(key(seed, 4.0, strategy, 0.0), &pretrained, &service);
            }
            if seed == 0 {
                bench.train(
                    RunKey {
                        beta: 0.0,
                        ..key(seed, 8.0, StrategyKind::UniformCer, 0.0)
                    },
                    &pretrained,
                    &service,
                );
            }
        }
    }
    bench
}

fn criterion_6(b: &Bench) -> Verdict {
    let u = StrategyKind::UniformCer;
    let (a0, a25, a8, a100) = (b.acc(0.0, u, 0.0), b.acc(2.5, u, 0.0), b.acc(8.0, u, 0.0), b.acc(100.0, u, 0.0));
    verdict(
        a25 >= a0 + 3.0 && a100 >= a0 + 8.0 && a8 >= a100 - 4.0,
        format!("median acc 0% {a0:.2}, 2.5% {a25:.2}, 8% {a8:.2}, 100% {a100:.2}"),
    )
}

fn criterion_7(b: &Bench) -> Verdict {
    let random = b.acc(4.0, StrategyKind::Random, 0.0);
    let uni = b.acc(4.0, StrategyKind::UniformCer, 0.0);
    let top = b.acc(4.0, StrategyKind::TopkCer, 0.0);
    println!("  4% budget, test word accuracy by seed:");
    println!("  | strategy | seed 0 | seed 1 | seed 2 | median |");
    println!("  |---|---|---|---|---|");
    for kind in StrategyKind::ALL {
        let per: Vec<String> = SEEDS
            .iter()
            .map(|&s| format!("{:.2}", 100.0 * b.get(&key(s, 4.0, kind, 0.0)).test_word_accuracy))
            .collect();
        println!("  | {kind} | {} | {:.2} |", per.join(" | "), b.acc(4.0, kind, 0.0));
    }
    verdict(
        uni >= random - 0.5 && top >= random - 0.5 && (uni > random || top > random),
        format!("median acc random {random:.2}, uniform_cer {uni:.2}, topk_cer {top:.2}"),
    )
}

fn criterion_8(b: &Bench) -> Verdict {
    let u = StrategyKind::UniformCer;
    let (a0, a30, a50) = (b.acc(8.0, u, 0.0), b.acc(8.0, u, 0.3), b.acc(8.0, u, 0.5));
    let mut queries_ok = true;
    let mut detail = Vec::new();
    for seed in SEEDS {
        let full = b.get(&key(seed, 8.0, u, 0.0));
        let pruned = b.get(&key(seed, 8.0, u, 0.3));
        let strip_fraction = 1.0 - pruned.kept_train_strips as f64 / pruned.total_train_strips as f64;
        let query_drop = 1.0 - pruned.train_queries as f64 / full.train_queries as f64;
        queries_ok &= query_drop >= strip_fraction;
        detail.push(format!("seed {seed} strips -{:.1}% queries -{:.1}%", 100.0 * strip_fraction, 100.0 * query_drop));
    }
    let pass = (a30 - a0).abs() <= 2.0 && queries_ok && (a0 - a50) > (a0 - a30);
    verdict(
        pass,
        format!("median acc at 8%: prune 0 {a0:.2}, 30% {a30:.2}, 50% {a50:.2}; {}", detail.join(", ")),
    )
}

fn criterion_9(b: &Bench) -> Verdict {
    let with = b.get(&key(0, 8.0, StrategyKind::UniformCer, 0.0)).test_mean_intensity;
    let without = b
        .get(&RunKey {
            beta: 0.0,
            ..key(0, 8.0, StrategyKind::UniformCer, 0.0)
        })
        .test_mean_intensity;
    let mut r = rng(91);
    let analytic_zero = (0..100).all(|_| {
        let out: Vec<f64> = (0..r.gen_range(1..200)).map(|_| r.gen::<f64>()).collect();
        let (loss, grad) = whiteness_mse(&out, 0.0);
        loss == 0.0 && grad.iter().all(|&g| g == 0.0)
    });
    verdict(
        with > without && analytic_zero,
        format!("mean test intensity beta=1 {with:.4}, beta=0 {without:.4}; beta=0 MSE gradient exactly zero: {analytic_zero}"),
    )
}

fn criterion_10(b: &Bench) -> Verdict {
    let k = key(0, 2.5, StrategyKind::UniformCer, 0.0);
    let first = b.get(&k).deterministic_json().unwrap();
    let rerun = run_experiment(&b.config(&k), &b.dataset, None)
        .expect("rerun")
        .summary
        .deterministic_json()
        .unwrap();
    verdict(
        first == rerun,
        format!("{} bytes, rerun identical: {}", first.len(), first == rerun),
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let emit = |id: u32, name: &'static str, v: Verdict, results: &mut Vec<(u32, &str, Verdict)>| {
        println!("{} criterion {id} ({name}): {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((id, name, v));
    };
    emit(1, "edit distance oracle", criterion_1(), &mut results);
    emit(2, "CTC oracle", criterion_2(), &mut results);
    emit(3, "gradient checks", criterion_3(), &mut results);
    emit(4, "budget exactness", criterion_4(), &mut results);
    emit(5, "selection properties", criterion_5(), &mut results);

    let t = Instant::now();
    let bench = run_benchmark();
    eprintln!("benchmark runs took {:.0}s", t.elapsed().as_secs_f64());
    emit(6, "budget trend", criterion_6(&bench), &mut results);
    emit(7, "selection trend", criterion_7(&bench), &mut results);
    emit(8, "pruning trend", criterion_8(&bench), &mut results);
    emit(9, "whitening", criterion_9(&bench), &mut results);
    emit(10, "determinism", criterion_10(&bench), &mut results);

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance: {} of {} criteria pass", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
