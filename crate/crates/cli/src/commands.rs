use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use tila_core::encoders::{init_params, Encoder, EmbeddingVector};
use tila_core::evaluation::{corpus_tem, recall_at_k, EvaluationReport, ProtocolReport, SimilarityGrid, TemporalLexicon};
use tila_core::inference::PromptBank;
use tila_core::numerics::{FdOptions, Matrix, ParamStore};
use tila_core::objectives::gradcheck::check_all_objectives;
use tila_core::synthdata::{build_retrieval_variants, generate_split, load_dataset, save_dataset, Dataset, Finding, Lexicon, Split};
use tila_core::training::analysis::{
    probe_features, retrieval_report, supervised_report, swap_geometry, zero_shot_report, SwapGeometry,
};
use tila_core::training::checkpoint::{checkpoint_bytes, parse_checkpoint};
use tila_core::training::finetune::HEAD_W;
use tila_core::training::{
    finetune, linear_probe_binary, log_lines, prepare, pretrain, Classifier, FinetuneVariant, PreparedStudy,
};
use tila_core::{Error, Result};

use crate::{Command, Run};

/// Adds command options to the run identity before the output directory is
/// chosen.
pub(crate) fn record_options(run: &mut Run, command: &Command) -> Result<()> {
    match command {
        Command::GenData => {}
        Command::Pretrain { data } | Command::BuildRetrieval { data } => record_data(run, data.as_deref())?,
        Command::Finetune { checkpoint, variant, data } => {
            FinetuneVariant::parse(variant)?;
            run.input("checkpoint", checkpoint)?;
            run.option("variant", variant);
            record_data(run, data.as_deref())?;
        }
        Command::Evaluate { checkpoint, mode, data } => {
            if let Some(m) = mode {
                Mode::parse(m)?;
                run.option("mode", m);
            }
            run.input("checkpoint", checkpoint)?;
            record_data(run, data.as_deref())?;
        }
        Command::ScreenBinary { checkpoint, data } => {
            run.input("checkpoint", checkpoint)?;
            record_data(run, data.as_deref())?;
        }
        Command::Ablate { sweep, checkpoint, data } => {
            Sweep::parse(sweep)?;
            run.option("sweep", sweep);
            if let Some(c) = checkpoint {
                run.input("checkpoint", c)?;
            }
            record_data(run, data.as_deref())?;
        }
        Command::Gradcheck { settings } => run.option("settings", settings),
    }
    Ok(())
}

/// Datasets are identified by the hashes of their split manifests.
fn record_data(run: &mut Run, data: Option<&Path>) -> Result<()> {
    if let Some(dir) = data {
        for split in [Split::Train, Split::Test] {
            run.input(&format!("data.{}", split.name()), &dir.join(split.name()).join("manifest.jsonl"))?;
        }
    }
    Ok(())
}

pub(crate) fn dispatch(run: &mut Run, command: &Command) -> Result<()> {
    match command {
        Command::GenData => gen_data(run),
        Command::Pretrain { data } => cmd_pretrain(run, data.as_deref()),
        Command::Finetune { checkpoint, variant, data } => {
            cmd_finetune(run, checkpoint, FinetuneVariant::parse(variant)?, data.as_deref())
        }
        Command::Evaluate { checkpoint, mode, data } => {
            let mode = mode.as_deref().map(Mode::parse).transpose()?;
            cmd_evaluate(run, checkpoint, mode, data.as_deref())
        }
        Command::BuildRetrieval { data } => cmd_build_retrieval(run, data.as_deref()),
        Command::ScreenBinary { checkpoint, data } => cmd_screen(run, checkpoint, data.as_deref()),
        Command::Ablate { sweep, checkpoint, data } => {
            cmd_ablate(run, Sweep::parse(sweep)?, checkpoint.as_deref(), data.as_deref())
        }
        Command::Gradcheck { settings } => cmd_gradcheck(run, *settings),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Supervised,
    ZeroShot,
    Retrieval,
}

impl Mode {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Mode::Supervised),
            "zero-shot" => Ok(Mode::ZeroShot),
            "retrieval" => Ok(Mode::Retrieval),
            _ => Err(Error::config(format!(
                "--mode: unknown mode {s:?} (expected supervised, zero-shot or retrieval)"
            ))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Mode::Supervised => "supervised",
            Mode::ZeroShot => "zero-shot",
            Mode::Retrieval => "retrieval",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Sweep {
    Lambda,
    ChangeWeight,
}

impl Sweep {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(Sweep::Lambda),
            "w" => Ok(Sweep::ChangeWeight),
            _ => Err(Error::config(format!("--sweep: unknown sweep {s:?} (expected lambda or w)"))),
        }
    }
}

fn load_split(run: &Run, data: Option<&Path>, split: Split) -> Result<Dataset> {
    match data {
        Some(dir) => load_dataset(dir, split, &run.cfg.data.specs(), &Lexicon::standard()),
        None => generate_split(&run.cfg.data_config(), split),
    }
}

fn prepared(run: &Run, data: Option<&Path>, split: Split) -> Result<Vec<PreparedStudy>> {
    prepare(&load_split(run, data, split)?, &run.cfg.encoder_config(), &Lexicon::standard())
}

fn load_params(path: &Path) -> Result<ParamStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, path)
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("output serialises") + "\n"
}

fn gen_data(run: &mut Run) -> Result<()> {
    let lex = Lexicon::standard();
    for split in [Split::Train, Split::Test] {
        let data = generate_split(&run.cfg.data_config(), split)?;
        run.say(format!("{}: {} studies", split.name(), data.studies.len()));
        save_dataset(&run.out, &data, &lex)?;
    }
    Ok(())
}

fn cmd_pretrain(run: &mut Run, data: Option<&Path>) -> Result<()> {
    let enc = run.cfg.encoder_config();
    let train = prepared(run, data, Split::Train)?;
    run.say(format!("pretraining on {} studies", train.len()));
    let out = pretrain(&train, init_params(&enc)?, &enc, &run.cfg.pretrain_config(), &run.cfg.optimizer)?;
    if let Some(last) = out.log.last() {
        run.say(format!("final epoch {}: total {:.4}", last.epoch, last.total));
    }
    run.write("pretrain.log.jsonl", log_lines(&out.log))?;
    run.write("pretrain.ckpt", checkpoint_bytes(&out.params))
}

fn cmd_finetune(run: &mut Run, checkpoint: &Path, variant: FinetuneVariant, data: Option<&Path>) -> Result<()> {
    let enc = run.cfg.encoder_config();
    let pretrained = load_params(checkpoint)?;
    let train = prepared(run, data, Split::Train)?;
    run.say(format!("fine-tuning ({variant}) on {} studies", train.len()));
    let out = finetune(&train, &pretrained, &enc, &run.cfg.finetune_config(), variant, &run.cfg.optimizer)?;
    if let Some(last) = out.log.last() {
        run.say(format!("final epoch {}: total {:.4}", last.epoch, last.total));
    }
    run.write("finetune.log.jsonl", log_lines(&out.log))?;
    run.write("finetune.ckpt", checkpoint_bytes(&out.params))
}

fn geometry_extra(extra: &mut BTreeMap<String, f64>, g: SwapGeometry) {
    extra.insert("swap_cosine_changed".into(), g.changed);
    extra.insert("swap_cosine_unchanged".into(), g.unchanged);
    extra.insert("swap_margin".into(), g.margin());
}

/// Image-to-text and text-to-image recall and corpus TEM on the test split.
fn retrieval_extra(
    extra: &mut BTreeMap<String, f64>,
    encoder: &Encoder,
    params: &ParamStore,
    test: &[PreparedStudy],
) -> Result<()> {
    let lex = Lexicon::standard();
    let mut v = Vec::with_capacity(test.len());
    let mut t = Vec::with_capacity(test.len());
    for s in test {
        v.push(EmbeddingVector::from_unit(encoder.pair_forward(params, &s.prev, &s.cur)?.embedding().to_vec())?);
        t.push(encoder.encode_text(&s.report, params)?);
    }
    let sims = |a: &[EmbeddingVector], b: &[EmbeddingVector]| -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = a.iter().map(|x| b.iter().map(|y| x.cosine(y)).collect()).collect();
        Matrix::from_rows(&rows)
    };
    let truth: Vec<usize> = (0..test.len()).collect();
    let i2t = SimilarityGrid::new(sims(&v, &t)?, truth.clone())?;
    let t2i = SimilarityGrid::new(sims(&t, &v)?, truth)?;
    for k in [1, 5, 10] {
        if k <= test.len() {
            extra.insert(format!("i2t_recall_at_{k}"), recall_at_k(&i2t, k)?);
            extra.insert(format!("t2i_recall_at_{k}"), recall_at_k(&t2i, k)?);
        }
    }
    let words: Vec<Vec<String>> = test
        .iter()
        .map(|s| lex.detokenize(&s.report).split_whitespace().map(str::to_string).collect())
        .collect();
    extra.insert("tem".into(), corpus_tem(&i2t, &words, &words, &TemporalLexicon::standard())?);
    Ok(())
}

fn cmd_evaluate(run: &mut Run, checkpoint: &Path, mode: Option<Mode>, data: Option<&Path>) -> Result<()> {
    let enc = run.cfg.encoder_config();
    let params = load_params(checkpoint)?;
    let mode = mode.unwrap_or(if params.contains(HEAD_W) { Mode::Supervised } else { Mode::ZeroShot });
    let test = prepared(run, data, Split::Test)?;
    run.say(format!("evaluating {} on {} test studies", mode.name(), test.len()));
    let encoder = Encoder::new(&enc, &params)?;
    let mut extra = BTreeMap::new();
    let protocols = match mode {
        Mode::Supervised => supervised_report(&Classifier::new(&enc, &params)?, &params, &test)?,
        Mode::ZeroShot => {
            let bank = PromptBank::templated(&Lexicon::standard())?;
            run.write("prompts.json", bank.to_text(&Lexicon::standard()))?;
            geometry_extra(&mut extra, swap_geometry(&encoder, &params, &test)?);
            zero_shot_report(&encoder, &params, &bank.encode(&encoder, &params)?, &test)?
        }
        Mode::Retrieval => {
            geometry_extra(&mut extra, swap_geometry(&encoder, &params, &test)?);
            retrieval_extra(&mut extra, &encoder, &params, &test)?;
            retrieval_report(&encoder, &params, &Lexicon::standard(), &test)?
        }
    };
    let a = protocols.average;
    run.say(format!(
        "standard {:.1} reversed {:.1} combined {:.1} consistency {:.1}",
        a.standard, a.reversed, a.combined, a.consistency
    ));
    EvaluationReport {
        config_hash: run.manifest.config_sha256.clone(),
        seed: run.cfg.seed,
        mode: mode.name().to_string(),
        protocols,
        extra,
    }
    .write(&run.out, "report")
}

#[derive(Serialize)]
struct RetrievalRecord<'a> {
    study: &'a str,
    finding: &'a str,
    report: String,
    improved: String,
    stable: String,
    worsened: String,
}

fn cmd_build_retrieval(run: &mut Run, data: Option<&Path>) -> Result<()> {
    let lex = Lexicon::standard();
    let test = load_split(run, data, Split::Test)?;
    let mut out = String::new();
    for s in &test.studies {
        for f in Finding::ALL {
            let [imp, sta, wor] = build_retrieval_variants(&s.report, f, &lex)?;
            let rec = RetrievalRecord {
                study: &s.id,
                finding: f.name(),
                report: lex.detokenize(&s.report),
                improved: lex.detokenize(&imp),
                stable: lex.detokenize(&sta),
                worsened: lex.detokenize(&wor),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serialises"));
            out.push('\n');
        }
    }
    run.say(format!("{} studies x {} findings", test.studies.len(), Finding::ALL.len()));
    run.write("retrieval.jsonl", out)
}

#[derive(Serialize)]
struct ScreenSummary {
    auc: f64,
    train_loss: f64,
    train_size: usize,
    test_size: usize,
    test_positive: usize,
}

fn cmd_screen(run: &mut Run, checkpoint: &Path, data: Option<&Path>) -> Result<()> {
    let enc = run.cfg.encoder_config();
    let params = load_params(checkpoint)?;
    let encoder = Encoder::new(&enc, &params)?;
    let train = prepared(run, data, Split::Train)?;
    let test = prepared(run, data, Split::Test)?;
    let (xtr, ytr) = probe_features(&encoder, &params, &train)?;
    let (xte, yte) = probe_features(&encoder, &params, &test)?;
    let probe = linear_probe_binary(&xtr, &ytr, &xte, &yte, &run.cfg.probe)?;
    run.say(format!("held-out AUC {:.4}", probe.auc));
    run.write(
        "screen.json",
        json(&ScreenSummary {
            auc: probe.auc,
            train_loss: probe.train_loss,
            train_size: xtr.len(),
            test_size: xte.len(),
            test_positive: yte.iter().filter(|&&y| y == 1).count(),
        }),
    )?;
    run.write("probe.json", json(&probe))
}

fn table_row(out: &mut String, key: f64, p: &ProtocolReport, more: &[f64]) {
    let a = p.average;
    let _ = write!(out, "{key},{:.4},{:.4},{:.4},{:.4}", a.standard, a.reversed, a.combined, a.consistency);
    for m in more {
        let _ = write!(out, ",{m:.4}");
    }
    out.push('\n');
}

fn cmd_ablate(run: &mut Run, sweep: Sweep, checkpoint: Option<&Path>, data: Option<&Path>) -> Result<()> {
    let enc = run.cfg.encoder_config();
    let train = prepared(run, data, Split::Train)?;
    let test = prepared(run, data, Split::Test)?;
    match sweep {
        Sweep::Lambda => {
            let pretrained = match checkpoint {
                Some(p) => load_params(p)?,
                None => {
                    run.say("pretraining the shared checkpoint");
                    let out = pretrain(&train, init_params(&enc)?, &enc, &run.cfg.pretrain_config(), &run.cfg.optimizer)?;
                    run.write("pretrain.log.jsonl", log_lines(&out.log))?;
                    run.write("pretrain.ckpt", checkpoint_bytes(&out.params))?;
                    out.params
                }
            };
            let mut table = String::from("lambda,standard,reversed,combined,consistency\n");
            for &lambda in &run.cfg.ablate.tcl_weights.clone() {
                run.say(format!("λ = {lambda}"));
                let mut ft = run.cfg.finetune_config();
                ft.tcl_weight = lambda;
                let out = finetune(&train, &pretrained, &enc, &ft, FinetuneVariant::BiceTcl, &run.cfg.optimizer)?;
                let report = supervised_report(&Classifier::new(&enc, &out.params)?, &out.params, &test)?;
                let dir = format!("lambda-{lambda}");
                run.write(&format!("{dir}/finetune.log.jsonl"), log_lines(&out.log))?;
                run.write(&format!("{dir}/report.json"), json(&report))?;
                table_row(&mut table, lambda, &report, &[]);
            }
            run.write("ablation.csv", table)
        }
        Sweep::ChangeWeight => {
            let bank = PromptBank::templated(&Lexicon::standard())?;
            let mut table = String::from("w,standard,reversed,combined,consistency,swap_margin,probe_auc\n");
            for &w in &run.cfg.ablate.change_weights.clone() {
                run.say(format!("W = {w}"));
                let mut pc = run.cfg.pretrain_config();
                pc.change_weight = w;
                let out = pretrain(&train, init_params(&enc)?, &enc, &pc, &run.cfg.optimizer)?;
                let encoder = Encoder::new(&enc, &out.params)?;
                let report = zero_shot_report(&encoder, &out.params, &bank.encode(&encoder, &out.params)?, &test)?;
                let margin = swap_geometry(&encoder, &out.params, &test)?.margin();
                let (xtr, ytr) = probe_features(&encoder, &out.params, &train)?;
                let (xte, yte) = probe_features(&encoder, &out.params, &test)?;
                let auc = linear_probe_binary(&xtr, &ytr, &xte, &yte, &run.cfg.probe)?.auc;
                let dir = format!("w-{w}");
                run.write(&format!("{dir}/pretrain.log.jsonl"), log_lines(&out.log))?;
                run.write(&format!("{dir}/report.json"), json(&report))?;
                table_row(&mut table, w, &report, &[margin, auc]);
            }
            run.write("ablation.csv", table)
        }
    }
}

#[derive(Serialize)]
struct GradcheckSummary<'a> {
    step: f64,
    tolerance: f64,
    max_rel_error: f64,
    passed: bool,
    checks: &'a [tila_core::objectives::gradcheck::NamedFdReport],
}

fn cmd_gradcheck(run: &mut Run, settings: usize) -> Result<()> {
    if settings == 0 {
        return Err(Error::config("--settings must be positive"));
    }
    let opts = FdOptions::default();
    let checks = check_all_objectives(run.cfg.seed, settings, &opts)?;
    let max = checks.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
    let passed = checks.iter().all(|c| c.report.passed());
    run.say(format!("{} checks, max relative error {max:.3e}", checks.len()));
    run.write(
        "gradcheck.json",
        json(&GradcheckSummary {
            step: opts.step,
            tolerance: opts.tol,
            max_rel_error: max,
            passed,
            checks: &checks,
        }),
    )?;
    if passed {
        Ok(())
    } else {
        Err(Error::Check(format!("max relative error {max:.3e} exceeds {:.1e}", opts.tol)))
    }
}
