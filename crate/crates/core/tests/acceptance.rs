// SPDX-License-Identifier: Apache-2.0

//! One pass/fail line per acceptance criterion. Runs without the libtest
//! harness; exits nonzero when any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use bpdg::backbone::encode;
use bpdg::checkpoint::{load_generator, save_generator};
use bpdg::classifier::SequenceClassifier;
use bpdg::config::RunConfig;
use bpdg::corpus::{
    build_vocab, generate_splits, load_corpus, save_corpus, AttributeTables, Dialogue, SyntheticSplits, Vocabulary, EOS,
};
use bpdg::decoding::{beam_search, cmim_select, rank_order, select_index, train_relevance, Artifacts, BeamConfig, Candidate};
use bpdg::eval::{bleu2, distinct, evaluate, f1, perplexity_from_scores, train_bipersona_classifier, TokenScore};
use bpdg::fusion::{fuse, Encodings, WeightMode};
use bpdg::model::{Ablation, BpdgModel, Prepared, WeightPolicy};
use bpdg::training::{evaluate_loss, train, training_examples, Trainer};
use bpdg_tensor::gradcheck::check_all_ops;
use bpdg_tensor::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const FUSION_TOL: f64 = 1e-12;
const WEIGHT_SUM_TOL: f64 = 1e-9;
const METRIC_TOL: f64 = 1e-6;
const LOSS_REDUCTION: f64 = 0.5;
const TRAIN_BUDGET: Duration = Duration::from_secs(30 * 60);
const BIPERSONA_FLOOR: f64 = 0.90;
const RELEVANCE_FLOOR: f64 = 0.80;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradients() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ops = check_all_ops(20, &mut |s| {
        let n = s.iter().product();
        Tensor::new(s.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    });
    let (op, op_err) = ops.iter().fold(("", 0.0), |w, &(n, e)| if e > w.1 { (n, e) } else { w });
    ensure(op_err < GRAD_TOL, || format!("op {op}: relative error {op_err:.2e}"))?;
    let mut model_err = 0.0;
    for ablation in [Ablation::default(), Ablation { no_lm: true, no_paf: true, no_pemb: true }] {
        let (e, name) = model_gradient_error(ablation);
        ensure(e < GRAD_TOL, || format!("{ablation:?} {name}: relative error {e:.2e}"))?;
        model_err = f64::max(model_err, e);
    }
    let t = start.elapsed();
    ensure(t < GRAD_BUDGET, || format!("took {t:.0?}"))?;
    Ok(format!(
        "{} ops x 20 trials worst {op_err:.1e}; d_model=8 model worst {model_err:.1e}; {:.1}s",
        ops.len(),
        t.as_secs_f64()
    ))
}

fn masking() -> Check {
    let w = world(8, 1);
    let cfg = small_config(&w, 8, 2, 2);
    let model = BpdgModel::new(cfg.clone(), Ablation::default(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let base = random_tensor(&mut rng, 6, 8);
    let run = |x: &Tensor| {
        let mut g = Graph::new(&model.store, false);
        let v = g.constant(x.clone());
        let y = encode(&mut g, &model.ids.stack, &cfg, v, None, None).unwrap();
        g.value(y).clone()
    };
    let y0 = run(&base);
    let mut checked = 0;
    for j in 0..6 {
        let mut x = base.clone();
        x.row_mut(j).iter_mut().for_each(|v| *v += rng.random_range(-3.0..3.0));
        let y = run(&x);
        for i in 0..j {
            ensure(y.row(i) == y0.row(i), || format!("backbone row {i} moved with row {j}"))?;
            checked += 1;
        }
    }

    let tiny = tiny_model(4, 8);
    let ctx = tiny.decode_context(&tiny_context(&tiny)).unwrap();
    let rows = |p: &[usize]| {
        let mut g = Graph::new(&tiny.store, false);
        let inputs = ctx.insert(&mut g);
        let out = tiny.decoder_forward(&mut g, &inputs, &[p], WeightPolicy::Predicted).unwrap();
        (g.value(out.decoded).clone(), g.value(out.weights).clone())
    };
    let prefix = [5usize, 6, 7, 5, 6, 7];
    let (l0, w0) = rows(&prefix);
    for j in 0..6 {
        let mut p = prefix;
        p[j] = if p[j] == 5 { 6 } else { 5 };
        let (l, wt) = rows(&p);
        for i in 0..=j {
            ensure(l.row(i) == l0.row(i) && wt.row(i) == w0.row(i), || {
                format!("decoder step {i} moved with token {j}")
            })?;
            checked += 1;
        }
    }

    let ex = prepared(&w, &cfg, &w.train[..1]).remove(0);
    let pads = ex.context.pad.iter().filter(|&&p| p).count();
    ensure(pads > 0, || "fixture has no pad rows".into())?;
    let padded = |e: &Prepared| {
        let mut g = Graph::new(&model.store, false);
        let y = model.context_forward_padded(&mut g, e).unwrap();
        g.value(y).clone()
    };
    let p0 = padded(&ex);
    for trial in 0..5 {
        let mut noisy = ex.clone();
        for (t, &p) in noisy.context.tokens.iter_mut().zip(&ex.context.pad) {
            if p {
                *t = rng.random_range(5..w.vocab.len());
            }
        }
        let p1 = padded(&noisy);
        for &i in &ex.context.non_pad_rows() {
            ensure(p0.row(i) == p1.row(i), || format!("trial {trial}: non-pad row {i} moved with pad values"))?;
        }
    }
    Ok(format!("{checked} future-position probes bitwise equal; {pads} pad rows x 5 perturbations without effect"))
}

fn fusion() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let store = ParamStore::new();
    let (mut out_err, mut sum_err) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let rows = rng.random_range(1..7);
        let d = rng.random_range(1..9);
        let mut g = Graph::new(&store, false);
        let parts: Vec<Tensor> = (0..4).map(|_| random_tensor(&mut rng, rows, d)).collect();
        let v: Vec<_> = parts.iter().map(|t| g.constant(t.clone())).collect();
        let enc = Encodings { o_prev: v[0], o_u: v[1], o_r: v[2], o_c: v[3] };
        let raw = g.constant(random_tensor(&mut rng, rows, 3));
        let logits = g.scale(raw, 5.0);
        let weights = g.softmax(logits, 1).unwrap();
        let out = fuse(&mut g, &enc, weights).unwrap();
        let (wv, ov) = (g.value(weights).clone(), g.value(out).clone());
        for r in 0..rows {
            let [a, b, c] = [wv.at(r, 0), wv.at(r, 1), wv.at(r, 2)];
            sum_err = sum_err.max((a + b + c - 1.0).abs());
            for k in 0..d {
                let want = a * parts[1].at(r, k) + b * parts[2].at(r, k) + (c + 1.0) * parts[3].at(r, k) + parts[0].at(r, k);
                out_err = out_err.max((ov.at(r, k) - want).abs());
            }
        }
    }
    ensure(out_err < FUSION_TOL, || format!("fused output off by {out_err:.2e}"))?;
    ensure(sum_err < WEIGHT_SUM_TOL, || format!("weights sum off by {sum_err:.2e}"))?;
    Ok(format!("1000 inputs: output error {out_err:.1e}, weight-sum error {sum_err:.1e}"))
}

fn beam_oracle() -> Check {
    let wide = BeamConfig { beam: 4096, max_len: 4, min_len: 0, banned: vec![], chunk: 64 };
    for seed in 0..20 {
        let model = tiny_model(seed, 8);
        let stepper = tiny_stepper(&model);
        let all = enumerate(&stepper, 4, EOS);
        let best = all.iter().min_by(|a, b| rank_order(a.1, &a.0, b.1, &b.0)).unwrap();
        let top = beam_search(&stepper, &wide).unwrap().remove(0);
        ensure(top.sequence() == best.0 && (top.gen_score - best.1).abs() < 1e-9, || {
            format!("model {seed}: beam {:?} ({}) vs oracle {:?} ({})", top.sequence(), top.gen_score, best.0, best.1)
        })?;
        let mut last = f64::NEG_INFINITY;
        for beam in [1, 2, 4, 8] {
            let s = beam_search(&stepper, &BeamConfig { beam, max_len: 4, min_len: 0, banned: vec![], chunk: 64 }).unwrap()[0].gen_score;
            ensure(s >= last, || format!("model {seed}: beam {beam} best {s} below {last}"))?;
            last = s;
        }
    }
    Ok("20 tiny models: beam 4096 top-1 equals exhaustive optimum; best score monotone over beams 1,2,4,8".into())
}

fn metrics() -> Check {
    let t = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let counts = (0..5).map(|i| (format!("w{i}"), 9)).collect();
    let vocab = Vocabulary::from_counts(&counts, [], 1, 2);
    let uniform: Vec<TokenScore> = (5..10).map(|token| TokenScore { token, log_p: 0.1f64.ln(), log_p_unk: 0.1f64.ln() }).collect();
    let cases = [
        ("bleu2(a b c | a b d)", bleu2(&t("a b c"), &t("a b d")), (1.0f64 / 3.0).sqrt()),
        ("bleu2(a b c | a b c)", bleu2(&t("a b c"), &t("a b c")), 1.0),
        ("f1(a b c | b c d)", f1(&t("a b c"), &t("b c d")), 2.0 / 3.0),
        ("distinct(a b a b)", distinct(&[t("a b a b")]).unwrap(), 0.5),
        ("ppl(uniform over 10)", perplexity_from_scores(&uniform, &vocab).unwrap(), 10.0),
    ];
    for (name, got, want) in &cases {
        ensure((got - want).abs() < METRIC_TOL, || format!("{name} = {got}, expected {want}"))?;
    }
    Ok(format!("{} hand-computed values within {METRIC_TOL:e}", cases.len()))
}

fn cmim() -> Check {
    for seed in 0..20 {
        let model = tiny_model(300 + seed, 8);
        let stepper = tiny_stepper(&model);
        let mut found = beam_search(&stepper, &BeamConfig { beam: 8, max_len: 5, ..BeamConfig::default() }).unwrap();
        let top = found[0].sequence();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chosen = cmim_select(&mut found, 0.0, |_| Ok(-rng.random_range(0.0..5.0))).unwrap();
        ensure(chosen.sequence() == top, || format!("model {seed}: lambda3=0 picked {:?}, top is {top:?}", chosen.sequence()))?;
    }
    let cand = |t: usize, g: f64, r: f64| Candidate { tokens: vec![t], ended: true, gen_score: g, rel_score: Some(r) };
    let fixture = [cand(5, -1.0, -2.0), cand(6, -1.2, -5.0), cand(7, -3.0, -0.1)];
    let i = select_index(&fixture, 0.3).map_err(|e| e.to_string())?;
    ensure(i == 1, || format!("hand fixture picked candidate {}", i + 1))?;
    let z = select_index(&fixture, 0.0).map_err(|e| e.to_string())?;
    ensure(z == 0, || format!("hand fixture at lambda3=0 picked candidate {}", z + 1))?;
    Ok("lambda3=0 equals beam top-1 on 20 models; hand fixture objectives -0.4, 0.3, -2.97 select candidate 2".into())
}

/// State shared by the training-scale criteria.
struct ToyRun {
    cfg: RunConfig,
    splits: SyntheticSplits,
    vocab: Vocabulary,
}

impl ToyRun {
    fn new() -> Self {
        let cfg = RunConfig::default().resolve().unwrap();
        let splits = generate_splits(&cfg.corpus, cfg.seed).unwrap();
        let vocab = build_vocab(&splits.train, &splits.tables, cfg.vocab.min_freq, cfg.vocab.rare_threshold);
        Self { cfg, splits, vocab }
    }

    fn tables(&self) -> &AttributeTables {
        &self.splits.tables
    }

    fn examples(&self, dialogues: &[Dialogue]) -> Vec<Prepared> {
        let mc = self.model_config();
        training_examples(dialogues, &self.vocab, self.tables(), &mc, &self.cfg.training).unwrap()
    }

    fn model_config(&self) -> bpdg::backbone::ModelConfig {
        self.cfg
            .model_config(self.vocab.len(), self.tables().areas.len(), self.tables().interests.len())
            .unwrap()
    }

    fn trainer(&self, ablation: Ablation, seed: u64, epochs: usize) -> Trainer {
        let mut tc = self.cfg.training.clone();
        tc.seed = seed;
        tc.epochs = epochs;
        Trainer::new(BpdgModel::new(self.model_config(), ablation, seed).unwrap(), tc).unwrap()
    }
}

fn convergence(def: &ToyRun, trained: &mut Option<BpdgModel>) -> Check {
    let set = def.examples(&def.splits.train);
    let mut t = def.trainer(def.cfg.ablation, def.cfg.seed, def.cfg.training.epochs);
    let before = evaluate_loss(&t.model, &set, &t.cfg).map_err(|e| e.to_string())?.total;
    let start = Instant::now();
    train(&mut t, &set, &[], &def.vocab, |log| {
        eprintln!("  epoch {:>2}: loss {:.4} ({:.1}s)", log.epoch, log.train.total, log.seconds);
    })
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let after = evaluate_loss(&t.model, &set, &t.cfg).map_err(|e| e.to_string())?.total;
    let reduction = 1.0 - after / before;

    let subset = &set[..200];
    let run = || {
        let mut t = def.trainer(def.cfg.ablation, 42, 1);
        let logs = train(&mut t, subset, &[], &def.vocab, |_| {}).unwrap();
        (logs[0].train, t.model.store.flatten(), t.adam.flatten())
    };
    let deterministic = run() == run();
    *trained = Some(t.model);

    let detail = format!(
        "{} dialogues, vocab {}, joint loss {before:.3} -> {after:.3} ({:.1}% reduction) in {} epochs, {:.0}s; rerun bitwise identical: {deterministic}",
        set.len(),
        def.vocab.len(),
        100.0 * reduction,
        def.cfg.training.epochs,
        elapsed.as_secs_f64()
    );
    ensure(reduction >= LOSS_REDUCTION && elapsed < TRAIN_BUDGET && deterministic, || detail.clone())?;
    Ok(detail)
}

struct Classifiers {
    bipersona: SequenceClassifier,
    relevance: SequenceClassifier,
}

fn classifiers(def: &ToyRun, out: &mut Option<Classifiers>) -> Check {
    let start = Instant::now();
    let (bipersona, b) = train_bipersona_classifier(&def.splits.train, def.tables(), &def.vocab, &def.cfg.bipersona)
        .map_err(|e| e.to_string())?;
    let (relevance, r) =
        train_relevance(&def.splits.train, def.tables(), &def.vocab, &def.cfg.relevance).map_err(|e| e.to_string())?;
    *out = Some(Classifiers { bipersona, relevance });
    let detail = format!(
        "bilateral persona held-out accuracy {:.3} (floor {BIPERSONA_FLOOR}), relevance held-out accuracy {:.3} (floor {RELEVANCE_FLOOR}); {:.0}s",
        b.test_accuracy,
        r.heldout_accuracy,
        start.elapsed().as_secs_f64()
    );
    ensure(b.test_accuracy >= BIPERSONA_FLOOR && r.heldout_accuracy >= RELEVANCE_FLOOR, || detail.clone())?;
    Ok(detail)
}

/// Every variant is trained with the default schedule. The full model for
/// the default seed is the one trained for criterion 7.
fn ablations(def: &ToyRun, clf: &Classifiers, trained: &BpdgModel) -> Check {
    let epochs = def.cfg.training.epochs;
    let set = def.examples(&def.splits.train);
    let opts = def.cfg.decoding.options();
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in ABLATION_SEEDS {
        let run = |ablation: Ablation, evals: &[(&[Dialogue], WeightMode, bool)]| -> Vec<(f64, f64)> {
            let own;
            let model = if seed == def.cfg.seed && ablation == def.cfg.ablation {
                trained
            } else {
                let mut t = def.trainer(ablation, seed, epochs);
                train(&mut t, &set, &[], &def.vocab, |_| {}).unwrap();
                own = t.model;
                &own
            };
            let art = Artifacts { model, relevance: Some(&clf.relevance), vocab: &def.vocab, tables: def.tables() };
            evals
                .iter()
                .map(|&(data, mode, use_cmim)| {
                    let o = bpdg::decoding::GenerateOptions { mode, use_cmim, ..opts.clone() };
                    let (rep, _) = evaluate(art, &clf.bipersona, data, &o).unwrap();
                    (rep.bpacc, rep.distinct)
                })
                .collect()
        };
        let (biased, random) = (&def.splits.biased_test[..], &def.splits.random_test[..]);
        let full = run(
            Ablation::default(),
            &[(biased, WeightMode::Auto, true), (biased, WeightMode::Auto, false), (random, WeightMode::Auto, true), (random, WeightMode::Alpha1, true)],
        );
        let no_paf = run(Ablation { no_paf: true, ..Ablation::default() }, &[(biased, WeightMode::Auto, true)]);
        let no_lm = run(Ablation { no_lm: true, ..Ablation::default() }, &[(biased, WeightMode::Auto, true)]);
        let checks = [
            ("BPAcc full > w/o PAF", full[0].0 > no_paf[0].0, format!("{:.3} vs {:.3}", full[0].0, no_paf[0].0)),
            ("BPAcc full > w/o LM", full[0].0 > no_lm[0].0, format!("{:.3} vs {:.3}", full[0].0, no_lm[0].0)),
            ("Distinct w/o CMIM >= full", full[1].1 >= full[0].1, format!("{:.4} vs {:.4}", full[1].1, full[0].1)),
            ("BPAcc alpha=1 >= auto (random)", full[3].0 >= full[2].0, format!("{:.3} vs {:.3}", full[3].0, full[2].0)),
        ];
        for (name, pass, values) in checks {
            ok &= pass;
            let line = format!("seed {seed}: {name}: {values} {}", if pass { "ok" } else { "VIOLATED" });
            eprintln!("  {line}");
            lines.push(line);
        }
    }
    let failed: Vec<&String> = lines.iter().filter(|l| l.ends_with("VIOLATED")).collect();
    if ok {
        Ok(format!("{} orderings hold on seeds {ABLATION_SEEDS:?} ({epochs} epochs each)", lines.len()))
    } else {
        Err(format!("{} of {} seed-orderings violated: {}", failed.len(), lines.len(), failed.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("; ")))
    }
}

fn round_trips(def: &ToyRun, model: &BpdgModel) -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let s = &def.splits;
    for (name, split) in [("train", &s.train), ("valid", &s.valid), ("random", &s.random_test), ("biased", &s.biased_test)] {
        let path = dir.path().join(format!("{name}.jsonl"));
        save_corpus(&path, split, &s.tables).map_err(|e| e.to_string())?;
        let back = load_corpus(&path, &s.tables).map_err(|e| e.to_string())?;
        ensure(&back == split, || format!("{name} split changed through the file format"))?;
    }

    let path = dir.path().join("model.ckpt");
    save_generator(&path, model, None, &def.vocab, def.tables(), Some(def.cfg.digest())).map_err(|e| e.to_string())?;
    let back = load_generator(&path).map_err(|e| e.to_string())?;
    let probes = def.examples(&s.biased_test[..10]);
    for (i, ex) in probes.iter().enumerate() {
        let a = model.reference_scores(ex).map_err(|e| e.to_string())?;
        let b = back.model.reference_scores(ex).map_err(|e| e.to_string())?;
        ensure(format!("{a:?}") == format!("{b:?}"), || format!("probe {i}: teacher-forced scores differ"))?;
        let (ca, cb) = (model.decode_context(ex).unwrap(), back.model.decode_context(ex).unwrap());
        let prefix: &[usize] = &ex.response[..ex.response.len().min(3)];
        let la = model.step_log_probs(&ca, &[prefix], WeightPolicy::Predicted).unwrap();
        let lb = back.model.step_log_probs(&cb, &[prefix], WeightPolicy::Predicted).unwrap();
        ensure(la == lb, || format!("probe {i}: step log-probs differ"))?;
    }

    let mut turns = 0;
    for d in s.train.iter().chain(&s.valid) {
        for t in &d.turns {
            let ids = def.vocab.tokenize(&t.text);
            if ids.iter().all(|&i| !def.vocab.is_special(i)) {
                ensure(def.vocab.detokenize(&ids) == t.text, || format!("{}: {:?} did not round-trip", d.id, t.text))?;
                turns += 1;
            }
        }
    }
    Ok(format!("4 corpus splits identical; {} checkpoint probes bit-identical; {turns} in-vocabulary turns round-trip", probes.len()))
}

fn main() -> ExitCode {
    let mut all_ok = true;
    let mut report = |n: usize, title: &str, f: &mut dyn FnMut() -> Check| {
        let start = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(&mut *f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(d) => println!("criterion {n}: PASS {title}: {d} [{secs:.1}s]"),
            Err(d) => {
                all_ok = false;
                println!("criterion {n}: FAIL {title}: {d} [{secs:.1}s]");
            }
        }
    };
    report(1, "gradient correctness", &mut gradients);
    report(2, "causality and masking", &mut masking);
    report(3, "fusion law", &mut fusion);
    report(4, "beam oracle", &mut beam_oracle);
    report(5, "metric fixtures", &mut metrics);
    report(6, "CMIM reduction", &mut cmim);

    let def = ToyRun::new();
    let mut model = None;
    let mut clf = None;
    report(7, "training convergence", &mut || convergence(&def, &mut model));
    report(8, "classifier floors", &mut || classifiers(&def, &mut clf));
    report(9, "directional ablations", &mut || match (&clf, &model) {
        (Some(c), Some(m)) => ablations(&def, c, m),
        _ => Err("classifiers or trained model unavailable".into()),
    });
    report(10, "round-trips", &mut || match &model {
        Some(m) => round_trips(&def, m),
        None => Err("trained model unavailable".into()),
    });
    if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
