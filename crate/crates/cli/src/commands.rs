// SPDX-License-Identifier: Apache-2.0

use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bpdg::checkpoint::{
    file_digest, load_classifier, load_generator, save_classifier, save_generator, LoadedGenerator,
    KIND_BIPERSONA, KIND_RELEVANCE,
};
use bpdg::classifier::SequenceClassifier;
use bpdg::config::RunConfig;
use bpdg::corpus::{
    build_vocab, generate_splits, label_dialogue, load_corpus, load_tables, parse_context, save_corpus,
    save_tables, AttributeTables, Dialogue, PersonaRates, Speaker, Vocabulary,
};
use bpdg::decoding::{generate, train_relevance, Artifacts};
use bpdg::eval::{evaluate, train_bipersona_classifier};
use bpdg::model::BpdgModel;
use bpdg::training::{evaluate_loss, TrainingConfig, prepare_all, split_validation, train, training_examples, Trainer};
use bpdg::BpdgError;
use serde_json::json;

use crate::args::{AuxTarget, CheckpointArgs, Cli, Command, TestSet};
use crate::chat::ChatSession;
use crate::settings::*;
use crate::CliResult;

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn digest(&self) -> String {
        self.cfg.digest()
    }

    fn data_dir(&self, data: &Option<PathBuf>) -> PathBuf {
        data.clone().unwrap_or_else(|| self.out.clone())
    }

    fn or_out(&self, p: &Option<PathBuf>, name: &str) -> PathBuf {
        p.clone().unwrap_or_else(|| self.out.join(name))
    }
}

pub fn dispatch(cli: Cli) -> CliResult<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli.out;
    match cli.command {
        Command::GenCorpus(a) => {
            let c = &mut cfg.corpus;
            c.train = a.train.unwrap_or(c.train);
            c.valid = a.valid.unwrap_or(c.valid);
            c.test = a.test.unwrap_or(c.test);
            for (flag, slot) in [
                (a.train_rate, &mut c.train_rates),
                (a.random_rate, &mut c.random_rates),
                (a.biased_rate, &mut c.biased_rates),
            ] {
                if let Some(r) = flag {
                    *slot = PersonaRates::even(r)?;
                }
            }
            gen_corpus(&resolve(cfg, out)?)
        }
        Command::Label(a) => {
            if let Some(t) = a.tie_break {
                cfg.training.tie_break = t;
            }
            let ctx = resolve(cfg, out)?;
            let tables = a.tables.clone().unwrap_or_else(|| {
                a.input.parent().unwrap_or(Path::new(".")).join(TABLES_FILE)
            });
            label(&ctx, &a.input, &a.output, &tables)
        }
        Command::Train(a) => {
            if let Some(p) = a.preset {
                cfg.preset = p.into();
                if cfg.training.warmup_steps == TrainingConfig::default().warmup_steps {
                    cfg.training.warmup_steps = RunConfig::for_preset(cfg.preset).training.warmup_steps;
                }
            }
            let t = &mut cfg.training;
            t.epochs = a.epochs.unwrap_or(t.epochs);
            t.lambda1 = a.lambda1.unwrap_or(t.lambda1);
            t.lambda2 = a.lambda2.unwrap_or(t.lambda2);
            t.batch_size = a.batch_size.unwrap_or(t.batch_size);
            t.accumulation = a.accumulation.unwrap_or(t.accumulation);
            if a.n.is_some() {
                cfg.model.n = a.n;
            }
            cfg.ablation.no_lm |= a.no_lm;
            cfg.ablation.no_paf |= a.no_paf;
            cfg.ablation.no_pemb |= a.no_pemb;
            let ctx = resolve(cfg, out)?;
            let data = ctx.data_dir(&a.data.data);
            cmd_train(&ctx, &data)
        }
        Command::TrainAux(a) => {
            if let Some(e) = a.epochs {
                cfg.relevance.classifier.epochs = e;
                cfg.bipersona.classifier.epochs = e;
            }
            let ctx = resolve(cfg, out)?;
            let data = ctx.data_dir(&a.data.data);
            train_aux(&ctx, &data, a.only)
        }
        Command::Generate(a) => {
            apply_decode(&mut cfg, &a.decode);
            let ctx = resolve(cfg, out)?;
            cmd_generate(&ctx, &a.input_dialogue, &a.checkpoints, a.dump_candidates.as_deref())
        }
        Command::Eval(a) => {
            apply_decode(&mut cfg, &a.decode);
            let ctx = resolve(cfg, out)?;
            cmd_eval(&ctx, &a)
        }
        Command::Chat(a) => {
            apply_decode(&mut cfg, &a.decode);
            let ctx = resolve(cfg, out)?;
            chat(&ctx, &a)
        }
    }
}

fn resolve(cfg: RunConfig, out: PathBuf) -> CliResult<Ctx> {
    Ok(Ctx { cfg: cfg.resolve()?, out })
}

fn gen_corpus(ctx: &Ctx) -> CliResult<()> {
    let s = generate_splits(&ctx.cfg.corpus, ctx.cfg.seed)?;
    ensure_dir(&ctx.out)?;
    save_tables(ctx.out.join(TABLES_FILE), &s.tables)?;
    for (name, split) in [
        (TRAIN_FILE, &s.train),
        (VALID_FILE, &s.valid),
        (RANDOM_TEST_FILE, &s.random_test),
        (BIASED_TEST_FILE, &s.biased_test),
    ] {
        save_corpus(ctx.out.join(name), split, &s.tables)?;
        eprintln!("wrote {} dialogues to {}", split.len(), ctx.out.join(name).display());
    }
    write_resolved(&ctx.out, "gen-corpus", &ctx.cfg)?;
    Ok(())
}

fn label(ctx: &Ctx, input: &Path, output: &Path, tables: &Path) -> CliResult<()> {
    let tables = load_tables(tables)?;
    let mut dialogues = load_corpus(input, &tables)?;
    for d in &mut dialogues {
        label_dialogue(d, &tables, ctx.cfg.training.tie_break);
    }
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    save_corpus(output, &dialogues, &tables)?;
    eprintln!("labelled {} dialogues into {}", dialogues.len(), output.display());
    Ok(())
}

fn corpus_vocab(cfg: &RunConfig, train: &[Dialogue], tables: &AttributeTables) -> Vocabulary {
    build_vocab(train, tables, cfg.vocab.min_freq, cfg.vocab.rare_threshold)
}

fn load_training_corpus(data: &Path) -> CliResult<(AttributeTables, Vec<Dialogue>)> {
    let tables = load_tables(data.join(TABLES_FILE))?;
    let train = load_corpus(data.join(TRAIN_FILE), &tables)?;
    if train.is_empty() {
        return Err(BpdgError::Data(format!("{}: no dialogues", data.join(TRAIN_FILE).display())).into());
    }
    Ok((tables, train))
}

fn cmd_train(ctx: &Ctx, data: &Path) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let (tables, mut train_dialogues) = load_training_corpus(data)?;
    let valid_path = data.join(VALID_FILE);
    let valid_dialogues = if valid_path.exists() {
        load_corpus(&valid_path, &tables)?
    } else {
        let (t, v) = split_validation(&train_dialogues, cfg.training.valid_fraction, cfg.seed);
        train_dialogues = t;
        v
    };
    let vocab = corpus_vocab(cfg, &train_dialogues, &tables);
    let mc = cfg.model_config(vocab.len(), tables.areas.len(), tables.interests.len())?;
    let model = BpdgModel::new(mc.clone(), cfg.ablation, cfg.seed)?;
    let train_set = training_examples(&train_dialogues, &vocab, &tables, &mc, &cfg.training)?;
    let valid_set = prepare_all(&valid_dialogues, &vocab, &tables, &mc, cfg.training.tie_break)?;
    let mut trainer = Trainer::new(model, cfg.training.clone())?;
    let digest = ctx.digest();
    let initial = evaluate_loss(&trainer.model, &train_set, &cfg.training)?;
    let mut lines = vec![json!({
        "epoch": 0,
        "step": 0,
        "train": initial,
        "valid_ppl": null,
        "head_grad_max": 0.0,
        "run_config_digest": digest,
    })
    .to_string()];
    eprintln!(
        "{} examples, vocab {}, {} parameters; initial loss {:.4}",
        train_set.len(),
        vocab.len(),
        trainer.model.store.flatten().len(),
        initial.total
    );
    let start = Instant::now();
    let logs = train(&mut trainer, &train_set, &valid_set, &vocab, |l| {
        eprintln!(
            "epoch {:>3} step {:>6} loss {:.4} (d {:.4} lm {:.4} p {:.4}) valid ppl {} [{:.1}s]",
            l.epoch,
            l.step,
            l.train.total,
            l.train.l_d,
            l.train.l_lm,
            l.train.l_p,
            l.valid_ppl.map_or("-".into(), |p| format!("{p:.3}")),
            l.seconds
        );
    })?;
    for l in &logs {
        lines.push(
            json!({
                "epoch": l.epoch,
                "step": l.step,
                "train": l.train,
                "valid_ppl": l.valid_ppl,
                "head_grad_max": l.head_grad_max,
                "run_config_digest": digest,
            })
            .to_string(),
        );
    }
    if cfg.ablation.no_paf && trainer.head_grad_max != 0.0 {
        return Err(BpdgError::Contract(format!(
            "fusion head gradient norm {} under fixed weights",
            trainer.head_grad_max
        ))
        .into());
    }
    write_text(&ctx.out.join(TRAIN_LOG_FILE), &(lines.join("\n") + "\n"))?;
    save_generator(&ctx.out.join(MODEL_FILE), &trainer.model, Some(&trainer.adam), &vocab, &tables, Some(digest))?;
    write_resolved(&ctx.out, "train", cfg)?;
    eprintln!("trained in {:.1}s; wrote {}", start.elapsed().as_secs_f64(), ctx.out.join(MODEL_FILE).display());
    Ok(())
}

fn train_aux(ctx: &Ctx, data: &Path, only: Option<AuxTarget>) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let (tables, train_dialogues) = load_training_corpus(data)?;
    let vocab = corpus_vocab(cfg, &train_dialogues, &tables);
    let digest = ctx.digest();
    let mut report = serde_json::Map::new();
    report.insert("run_config_digest".into(), json!(digest));
    report.insert("vocab_digest".into(), json!(vocab.digest()));
    if only != Some(AuxTarget::Bipersona) {
        let (clf, r) = train_relevance(&train_dialogues, &tables, &vocab, &cfg.relevance)?;
        eprintln!("relevance held-out accuracy {:.4}", r.heldout_accuracy);
        save_classifier(&ctx.out.join(RELEVANCE_FILE), KIND_RELEVANCE, &clf, &vocab, Some(digest.clone()))?;
        report.insert(
            "relevance".into(),
            json!({"heldout_accuracy": r.heldout_accuracy, "train_losses": r.train_losses, "sizes": r.sizes}),
        );
    }
    if only != Some(AuxTarget::Relevance) {
        let (clf, r) = train_bipersona_classifier(&train_dialogues, &tables, &vocab, &cfg.bipersona)?;
        eprintln!("bipersona valid accuracy {:.4}, test accuracy {:.4}", r.valid_accuracy, r.test_accuracy);
        save_classifier(&ctx.out.join(BIPERSONA_FILE), KIND_BIPERSONA, &clf, &vocab, Some(digest.clone()))?;
        report.insert(
            "bipersona".into(),
            json!({
                "valid_accuracy": r.valid_accuracy,
                "test_accuracy": r.test_accuracy,
                "train_losses": r.train_losses,
                "sizes": r.sizes,
            }),
        );
    }
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(&ctx.out.join(AUX_REPORT_FILE), &(text + "\n"))?;
    write_resolved(&ctx.out, "train-aux", cfg)?;
    Ok(())
}

struct Loaded {
    gen: LoadedGenerator,
    relevance: Option<SequenceClassifier>,
    model_path: PathBuf,
}

impl Loaded {
    fn artifacts(&self) -> Artifacts<'_> {
        Artifacts {
            model: &self.gen.model,
            relevance: self.relevance.as_ref(),
            vocab: &self.gen.vocab,
            tables: &self.gen.tables,
        }
    }
}

fn load_checkpoints(ctx: &Ctx, c: &CheckpointArgs) -> CliResult<Loaded> {
    let model_path = ctx.or_out(&c.model, MODEL_FILE);
    let gen = load_generator(&model_path)?;
    let relevance = if ctx.cfg.decoding.use_cmim {
        let p = ctx.or_out(&c.relevance, RELEVANCE_FILE);
        Some(load_classifier(&p, KIND_RELEVANCE, &gen.vocab)?)
    } else {
        None
    };
    Ok(Loaded {
        gen,
        relevance,
        model_path,
    })
}

fn cmd_generate(ctx: &Ctx, input: &Path, c: &CheckpointArgs, dump: Option<&Path>) -> CliResult<()> {
    let loaded = load_checkpoints(ctx, c)?;
    let art = loaded.artifacts();
    let dc = parse_context(&read_text(input)?, art.tables)?;
    let turns: Vec<(Speaker, &str)> = dc.turns.iter().map(|u| (u.speaker, u.text.as_str())).collect();
    let opts = ctx.cfg.decoding.options();
    let g = generate(art, &turns, &dc.user_profile, &dc.robot_profile, &opts)?;
    println!("{}", g.text);
    if let Some(path) = dump {
        let record = json!({
            "run_config_digest": ctx.digest(),
            "checkpoint_digest": file_digest(&loaded.model_path)?,
            "mode": opts.mode.name(),
            "use_cmim": opts.use_cmim,
            "lambda3": opts.lambda3,
            "weights": g.weights,
            "selected": g.selected,
            "response": g.text,
            "candidates": g.candidate_records(art.vocab, opts.lambda3),
        });
        write_text(path, &(serde_json::to_string_pretty(&record).expect("dump serializes") + "\n"))?;
    }
    Ok(())
}

pub fn default_report_name(test: TestSet, mode: &str, use_cmim: bool) -> String {
    let t = match test {
        TestSet::Random => "random",
        TestSet::Biased => "biased",
    };
    format!("report-{t}-{mode}{}.json", if use_cmim { "" } else { "-nocmim" })
}

fn cmd_eval(ctx: &Ctx, a: &crate::args::EvalArgs) -> CliResult<()> {
    let loaded = load_checkpoints(ctx, &a.checkpoints)?;
    let art = loaded.artifacts();
    let bp_path = ctx.or_out(&a.bipersona, BIPERSONA_FILE);
    let bipersona = load_classifier(&bp_path, KIND_BIPERSONA, art.vocab)?;
    let data = ctx.data_dir(&a.data.data);
    let test_path = data.join(match a.test {
        TestSet::Random => RANDOM_TEST_FILE,
        TestSet::Biased => BIASED_TEST_FILE,
    });
    let mut dialogues = load_corpus(&test_path, art.tables)?;
    if let Some(n) = a.limit {
        dialogues.truncate(n);
    }
    let opts = ctx.cfg.decoding.options();
    let start = Instant::now();
    let (mut report, texts) = evaluate(art, &bipersona, &dialogues, &opts)?;
    report.checkpoint_digest = Some(file_digest(&loaded.model_path)?);
    report.corpus_digest = Some(file_digest(&test_path)?);
    report.run_config_digest = Some(ctx.digest());
    let path = a
        .report
        .clone()
        .unwrap_or_else(|| ctx.out.join(default_report_name(a.test, opts.mode.name(), opts.use_cmim)));
    write_text(&path, &report.to_text())?;
    if let Some(h) = &a.hypotheses {
        write_text(h, &(texts.join("\n") + "\n"))?;
    }
    println!(
        "bpacc {:.4} bpacc_hard {:.4} bleu {:.4} f1 {:.4} distinct {:.4} ppl {:.4} over {} dialogues",
        report.bpacc, report.bpacc_hard, report.bleu, report.f1, report.distinct, report.ppl, report.count
    );
    eprintln!("wrote {} in {:.1}s", path.display(), start.elapsed().as_secs_f64());
    Ok(())
}

fn chat(ctx: &Ctx, a: &crate::args::ChatArgs) -> CliResult<()> {
    let loaded = load_checkpoints(ctx, &a.checkpoints)?;
    let art = loaded.artifacts();
    let user = parse_profile(&a.user_profile, art.tables)?;
    let robot = parse_profile(&a.robot_profile, art.tables)?;
    let mut session = ChatSession::new(art, user, robot, ctx.cfg.decoding.options(), a.verbose);
    let stdin = std::io::stdin();
    let prompt = stdin.is_terminal();
    let mut stdout = std::io::stdout();
    session.run(stdin.lock(), &mut stdout, prompt)
}
