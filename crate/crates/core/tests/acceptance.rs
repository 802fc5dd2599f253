//! Acceptance suite. Runs without the libtest harness so each criterion
//! prints a single PASS/FAIL line; the process fails if any criterion does.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use tila_core::config::RunConfig;
use tila_core::encoders::{init_params, EncoderConfig};
use tila_core::evaluation::{
    auc, evaluate_protocols, macro_accuracy, recall_at_k, tem_score, EvaluationReport, ProtocolCase, ProtocolReport,
    SimilarityGrid, TemporalLexicon,
};
use tila_core::inference::{combined_score, invert_label, swap_probs, PromptBank, ProgressionLabel};
use tila_core::numerics::{log_sigmoid, mix_seed, rng_from, FdOptions, Matrix, ParamStore};
use tila_core::objectives::gradcheck::check_all_objectives;
use tila_core::objectives::{bice_loss, change_aware_loss, siglip_loss, tcl_loss, LossParams, ProbTriple};
use tila_core::synthdata::{build_retrieval_variants, generate_split, neutralize, Finding, Lexicon, SentenceForm, Split};
use tila_core::training::analysis::{
    probe_features, report_from_probs, supervised_report, swap_geometry, zero_shot_report, SwapGeometry,
};
use tila_core::training::checkpoint::checkpoint_bytes;
use tila_core::training::finetune::{attach_head, predict_both};
use tila_core::training::{
    finetune, linear_probe_binary, log_lines, prepare, pretrain, Classifier, FinetuneVariant, PreparedStudy,
};

use ProgressionLabel::*;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn random_simplex(rng: &mut impl Rng) -> ProbTriple {
    let l = [rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0)];
    ProbTriple::from_logits(&l).unwrap()
}

fn random_unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm).collect()
        })
        .collect();
    Matrix::from_rows(&rows).unwrap()
}

fn criterion_1() -> Outcome {
    let opts = FdOptions {
        step: 1e-4,
        ..FdOptions::default()
    };
    let reports = check_all_objectives(2024, 5, &opts).map_err(|e| e.to_string())?;
    check(reports.len() == 30, format!("expected 30 checks, got {}", reports.len()))?;
    let worst = reports.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max);
    check(worst <= 1e-4, format!("max relative error {worst:.3e}"))?;
    Ok(format!("6 objectives x 5 settings, max rel err {worst:.2e}"))
}

fn criterion_2() -> Outcome {
    let mut rng = rng_from(11);
    for _ in 0..1000 {
        let p = random_simplex(&mut rng);
        let s = swap_probs(&p).unwrap();
        check(swap_probs(&s).unwrap() == p, "S is not an involution")?;
        check(close(s.as_array().iter().sum::<f64>(), 1.0, 1e-12), "S leaves the simplex")?;
        check(s.as_array().iter().all(|x| *x >= 0.0), "S produced a negative entry")?;
    }
    for y in ProgressionLabel::ALL {
        check(invert_label(invert_label(y)) == y, "I is not an involution")?;
    }
    for _ in 0..1000 {
        let (a, b) = (random_simplex(&mut rng), random_simplex(&mut rng));
        let ab = swap_probs(&combined_score(&a, &b).unwrap()).unwrap();
        let ba = combined_score(&b, &a).unwrap();
        for k in 0..3 {
            check(close(ab.as_array()[k], ba.as_array()[k], 1e-12), "combined score is not equivariant")?;
        }
    }
    for _ in 0..1000 {
        let lf = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
        let lb = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
        let y = ProgressionLabel::ALL[rng.gen_range(0..3)];
        let a = bice_loss(&lf, &lb, y).unwrap();
        let b = bice_loss(&lb, &lf, invert_label(y)).unwrap();
        check(close(a, b, 1e-12), format!("BiCE swap symmetry: {a} vs {b}"))?;
    }
    for _ in 0..1000 {
        let p = random_simplex(&mut rng);
        let mirrored = swap_probs(&p).unwrap();
        check(tcl_loss(&[p], &[mirrored]).unwrap() == 0.0, "TCL of mirrored probabilities is not zero")?;
        let q = random_simplex(&mut rng);
        let t = tcl_loss(&[p], &[q]).unwrap();
        let differs = (0..3).any(|k| q.as_array()[k] != mirrored.as_array()[k]);
        check(differs == (t > 0.0), "TCL zero set is not the mirrored set")?;
    }
    Ok("S, I, score equivariance, BiCE symmetry, TCL zero set on 1000 points".into())
}

/// Independent scalar oracle: mean over anchors of the summed pairwise
/// negative log-sigmoid terms.
fn oracle_loss(v: &Matrix, t: &Matrix, log_scale: f64, bias: f64, sign: impl Fn(usize, usize) -> f64) -> f64 {
    let n = v.rows();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..v.cols() {
                s += v.get(i, k) * t.get(j, k);
            }
            let logit = log_scale.exp() * s + bias;
            total -= log_sigmoid(sign(i, j) * logit).unwrap();
        }
    }
    total / n as f64
}

fn criterion_3() -> Outcome {
    let mut rng = rng_from(33);
    let mut seen = [[false; 2]; 2];
    let mut worst: f64 = 0.0;
    for round in 0..100 {
        let n = 1 + round % 4;
        let d = rng.gen_range(2..6);
        let v = random_unit_rows(&mut rng, n, d);
        let vs = random_unit_rows(&mut rng, n, d);
        let t = random_unit_rows(&mut rng, n, d);
        let c: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let p = LossParams {
            log_scale: rng.gen_range(-1.0..3.0),
            bias: rng.gen_range(-12.0..2.0),
            swap_log_scale: rng.gen_range(-1.0..3.0),
            swap_bias: rng.gen_range(-12.0..2.0),
            ..LossParams::default()
        };
        for i in 0..n {
            for j in 0..n {
                seen[usize::from(i == j)][c[i] as usize] = true;
            }
        }
        let base = siglip_loss(&v, &t, &p).unwrap();
        let base_ref = oracle_loss(&v, &t, p.log_scale, p.bias, |i, j| if i == j { 1.0 } else { -1.0 });
        let change = change_aware_loss(&vs, &t, &c, &p).unwrap();
        let change_ref = oracle_loss(&vs, &t, p.swap_log_scale, p.swap_bias, |i, j| {
            if i == j && c[i] == 0 {
                1.0
            } else {
                -1.0
            }
        });
        worst = worst.max((base - base_ref).abs()).max((change - change_ref).abs());
    }
    check(worst <= 1e-10, format!("max deviation {worst:.3e}"))?;
    check(seen.iter().flatten().all(|s| *s), "not all four (i=j, c) cases were exercised")?;
    Ok(format!("100 batches, all four sign cases, max deviation {worst:.2e}"))
}

fn swapped_studies(data: &[PreparedStudy]) -> Vec<PreparedStudy> {
    data.iter()
        .map(|s| PreparedStudy {
            prev: s.cur.clone(),
            cur: s.prev.clone(),
            labels: s.labels.iter().map(|&l| invert_label(l)).collect(),
            ..s.clone()
        })
        .collect()
}

fn criterion_4() -> Outcome {
    for seed in 0..200u64 {
        let n = 1 + (seed as usize % 37);
        let cases: Vec<ProtocolCase<u32>> = (0..n)
            .map(|i| ProtocolCase {
                id: format!("case{i}"),
                prev: 2 * i as u32,
                cur: 2 * i as u32 + 1,
                label: ProgressionLabel::ALL[(mix_seed(seed, i as u64) % 3) as usize],
            })
            .collect();
        let classifier = |a: &u32, b: &u32| {
            let h = mix_seed(seed ^ 0xabc, ((*a as u64) << 32) | *b as u64);
            ProbTriple::from_logits(&[(h & 0xff) as f64 / 50.0, ((h >> 8) & 0xff) as f64 / 50.0, ((h >> 16) & 0xff) as f64 / 50.0])
        };
        let swapped: Vec<_> = cases.iter().map(ProtocolCase::swapped).collect();
        let a = evaluate_protocols(&cases, classifier).map_err(|e| e.to_string())?;
        let b = evaluate_protocols(&swapped, classifier).map_err(|e| e.to_string())?;
        check(a.scores.reversed == b.scores.standard, format!("seed {seed}: reversed != standard on swapped set"))?;
        check(a.scores.standard == b.scores.reversed, format!("seed {seed}: standard != reversed on swapped set"))?;
        check(a.scores.combined == b.scores.combined, format!("seed {seed}: combined not invariant"))?;
    }

    // The same on a generated fixture scored by an untrained classifier.
    let cfg = RunConfig::default();
    let data_cfg = tila_core::synthdata::DataConfig {
        test_size: 60,
        ..cfg.data_config()
    };
    let enc = EncoderConfig {
        proj_dim: 16,
        hidden: 16,
        ..cfg.encoder_config()
    };
    let lex = Lexicon::standard();
    let data = prepare(&generate_split(&data_cfg, Split::Test).unwrap(), &enc, &lex).unwrap();
    let mut params = init_params(&enc).unwrap();
    attach_head(&mut params, &enc, Finding::ALL.len(), 5).unwrap();
    let clf = Classifier::new(&enc, &params).unwrap();
    let fwd = supervised_report(&clf, &params, &data).map_err(|e| e.to_string())?;
    let swapped = swapped_studies(&data);
    let rev = report_from_probs(&swapped, &predict_both(&clf, &params, &swapped).unwrap()).map_err(|e| e.to_string())?;
    for (name, f) in &fwd.per_finding {
        let r = &rev.per_finding[name];
        check(f.scores.reversed == r.scores.standard, format!("{name}: fixture reversed mismatch"))?;
        check(f.scores.standard == r.scores.reversed, format!("{name}: fixture standard mismatch"))?;
        check(f.scores.combined == r.scores.combined, format!("{name}: fixture combined mismatch"))?;
    }
    Ok("200 random fixtures plus a generated fixture, exact equality".into())
}

fn criterion_5() -> Outcome {
    let t = [Improved, Improved, Stable, Worsened];
    check(macro_accuracy(&t, &t).unwrap() == 100.0, "macro: perfect")?;
    check(macro_accuracy(&[Improved, Stable, Stable, Improved], &t).unwrap() == 50.0, "macro: mixed")?;
    check(macro_accuracy(&[Stable; 3], &[Stable; 3]).unwrap() == 100.0, "macro: single class")?;

    let id = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
    check(recall_at_k(&SimilarityGrid::new(id, vec![0, 1, 2]).unwrap(), 1).unwrap() == 100.0, "recall: identity")?;
    let second: Vec<Vec<f64>> = (0..10)
        .map(|q| (0..10).map(|j| if j == q { 0.8 } else if j == (q + 1) % 10 { 0.9 } else { 0.1 }).collect())
        .collect();
    let g = SimilarityGrid::new(Matrix::from_rows(&second).unwrap(), (0..10).collect()).unwrap();
    check(recall_at_k(&g, 1).unwrap() == 0.0, "recall: second place at k=1")?;
    check(recall_at_k(&g, 5).unwrap() == 100.0, "recall: second place at k=5")?;
    let ranked = |rank: usize| -> Vec<f64> { (0..10).map(|j| if j == 0 { 0.5 } else if j < rank { 0.9 } else { 0.1 }).collect() };
    let rows: Vec<Vec<f64>> = [1, 3, 7].iter().map(|&r| ranked(r)).collect();
    let g = SimilarityGrid::new(Matrix::from_rows(&rows).unwrap(), vec![0; 3]).unwrap();
    check(close(recall_at_k(&g, 5).unwrap(), 200.0 / 3.0, 1e-12), "recall: ranks (1, 3, 7)")?;

    let lex = TemporalLexicon::standard();
    let tem = tem_score(&["effusion", "improved"], &["effusion", "improved", "edema", "stable"], &lex);
    check(close(tem, 200.0 / 3.0, 1e-12), format!("tem: partial overlap gave {tem}"))?;
    let r = ["pneumothorax", "is", "worsened"];
    check(tem_score(&r, &r, &lex) == 100.0, "tem: identical")?;
    check(tem_score(&["no", "edema"], &["edema", "is", "present"], &lex) == 100.0, "tem: vacuous")?;

    check(auc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap() == 1.0, "auc: separated")?;
    check(close(auc(&[0.3; 6], &[1, 0, 1, 0, 1, 0]).unwrap(), 0.5, 1e-12), "auc: all tied")?;
    check(close(auc(&[0.9, 0.8, 0.3, 0.2], &[1, 0, 1, 0]).unwrap(), 0.75, 1e-12), "auc: worked example")?;
    Ok("macro, recall@k, TEM and AUC examples".into())
}

fn criterion_9() -> Outcome {
    let lex = Lexicon::standard();
    let report = lex.tokenize("pneumothorax is stable. consolidation is worsened.").unwrap();
    let v = build_retrieval_variants(&report, Finding::Pneumothorax, &lex).map_err(|e| e.to_string())?;
    let expected = [
        "pneumothorax is improved . consolidation is present .",
        "pneumothorax is stable . consolidation is present .",
        "pneumothorax is worsened . consolidation is present .",
    ];
    for (got, want) in v.iter().zip(expected) {
        let want = lex.tokenize(want).unwrap();
        check(got.tokens() == want.tokens(), format!("variant {:?} != {:?}", lex.detokenize(got), lex.detokenize(&want)))?;
    }
    let neutral = lex.encode_sentences(&neutralize(&report, Finding::Pneumothorax, &lex).unwrap()).unwrap();
    check(v[1] == neutral, "stable variant differs from the neutralised report")?;
    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
        let (x, y) = (v[a].tokens(), v[b].tokens());
        check(x.len() == y.len(), "variants differ in length")?;
        let diffs: Vec<usize> = (0..x.len()).filter(|&i| x[i] != y[i]).collect();
        check(diffs.len() == 1, format!("variants {a} and {b} differ in {} tokens", diffs.len()))?;
    }
    let parsed = lex.parse_report(&v[0]).unwrap();
    let other = parsed.iter().find(|s| s.finding == Finding::Consolidation).unwrap();
    check(other.form == SentenceForm::Present, "non-target finding was not neutralised")?;
    Ok("worked example token-for-token plus construction invariants".into())
}

/// Everything the trend criteria need from one seed.
struct SeedRun {
    seed: u64,
    geometry: [SwapGeometry; 2],
    zero_shot_consistency: [f64; 2],
    probe_auc: [f64; 2],
    baseline: ProtocolReport,
    bice_tcl: ProtocolReport,
    artifacts: Vec<(String, Vec<u8>)>,
}

fn run_seed(seed: u64) -> Result<SeedRun, String> {
    let cfg = RunConfig::default().with_seed(seed);
    let lex = Lexicon::standard();
    let enc = cfg.encoder_config();
    let data_cfg = cfg.data_config();
    let e = |e: tila_core::Error| e.to_string();
    let train = prepare(&generate_split(&data_cfg, Split::Train).map_err(e)?, &enc, &lex).map_err(e)?;
    let test = prepare(&generate_split(&data_cfg, Split::Test).map_err(e)?, &enc, &lex).map_err(e)?;
    let init = init_params(&enc).map_err(e)?;
    let encoder = tila_core::encoders::Encoder::new(&enc, &init).map_err(e)?;
    let bank = PromptBank::templated(&lex).map_err(e)?;
    let mut artifacts = Vec::new();
    let mut pretrained: Vec<ParamStore> = Vec::new();
    let mut geometry = Vec::new();
    let mut zs = Vec::new();
    let mut probe = Vec::new();
    for (name, w) in [("tila", cfg.pretrain.change_weight), ("plain", 0.0)] {
        let mut pc = cfg.pretrain_config();
        pc.change_weight = w;
        let out = pretrain(&train, init.clone(), &enc, &pc, &cfg.optimizer).map_err(e)?;
        if out.log.iter().any(|r| r.min_no_change_per_batch == 0) {
            return Err(format!("{name}: a batch without a no-change example"));
        }
        geometry.push(swap_geometry(&encoder, &out.params, &test).map_err(e)?);
        let encoded = bank.encode(&encoder, &out.params).map_err(e)?;
        let zero_shot = zero_shot_report(&encoder, &out.params, &encoded, &test).map_err(e)?;
        zs.push(zero_shot.average.consistency);
        let (xtr, ytr) = probe_features(&encoder, &out.params, &train).map_err(e)?;
        let (xte, yte) = probe_features(&encoder, &out.params, &test).map_err(e)?;
        probe.push(linear_probe_binary(&xtr, &ytr, &xte, &yte, &cfg.probe).map_err(e)?.auc);
        artifacts.push((format!("{name}.ckpt"), checkpoint_bytes(&out.params)));
        artifacts.push((format!("{name}.log"), log_lines(&out.log).into_bytes()));
        pretrained.push(out.params);
    }
    let mut reports = Vec::new();
    for variant in [FinetuneVariant::BaselineCe, FinetuneVariant::BiceTcl] {
        let out = finetune(&train, &pretrained[0], &enc, &cfg.finetune_config(), variant, &cfg.optimizer).map_err(e)?;
        let clf = Classifier::new(&enc, &out.params).map_err(e)?;
        let report = supervised_report(&clf, &out.params, &test).map_err(e)?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        EvaluationReport {
            config_hash: String::new(),
            seed,
            mode: variant.to_string(),
            protocols: report.clone(),
            extra: BTreeMap::new(),
        }
        .write(dir.path(), "report")
        .map_err(e)?;
        for file in ["report.json", "report.csv"] {
            artifacts.push((format!("{variant}.{file}"), std::fs::read(dir.path().join(file)).map_err(|e| e.to_string())?));
        }
        artifacts.push((format!("{variant}.ckpt"), checkpoint_bytes(&out.params)));
        artifacts.push((format!("{variant}.log"), log_lines(&out.log).into_bytes()));
        reports.push(report);
    }
    let bice_tcl = reports.pop().unwrap();
    let baseline = reports.pop().unwrap();
    Ok(SeedRun {
        seed,
        geometry: [geometry[0], geometry[1]],
        zero_shot_consistency: [zs[0], zs[1]],
        probe_auc: [probe[0], probe[1]],
        baseline,
        bice_tcl,
        artifacts,
    })
}

fn criterion_6(runs: &[SeedRun]) -> Outcome {
    let mut passed = 0;
    let mut lines = Vec::new();
    for r in runs {
        let (b, t) = (r.baseline.average, r.bice_tcl.average);
        let ok = t.consistency - b.consistency >= 10.0 && t.reversed - b.reversed >= 5.0 && t.standard >= b.standard - 3.0;
        passed += usize::from(ok);
        lines.push(format!(
            "seed {}: cons {:+.1} rev {:+.1} std {:+.1}",
            r.seed,
            t.consistency - b.consistency,
            t.reversed - b.reversed,
            t.standard - b.standard
        ));
    }
    let detail = format!("{passed}/3 seeds [{}]", lines.join("; "));
    check(passed >= 2, detail.clone())?;
    Ok(detail)
}

fn criterion_7(runs: &[SeedRun]) -> Outcome {
    let mut passed = 0;
    let mut lines = Vec::new();
    for r in runs {
        let [tila, plain] = r.geometry;
        let [zt, zp] = r.zero_shot_consistency;
        let ok = tila.margin() > 0.05 && plain.margin() < tila.margin() && zt >= zp;
        passed += usize::from(ok);
        lines.push(format!(
            "seed {}: margin {:.3} vs {:.3}, zero-shot cons {:.1} vs {:.1}",
            r.seed,
            tila.margin(),
            plain.margin(),
            zt,
            zp
        ));
    }
    let detail = format!("{passed}/3 seeds [{}]", lines.join("; "));
    check(passed >= 2, detail.clone())?;
    Ok(detail)
}

fn criterion_8(runs: &[SeedRun]) -> Outcome {
    let passed = runs.iter().filter(|r| r.probe_auc[0] >= r.probe_auc[1]).count();
    let detail = format!(
        "{passed}/3 seeds [{}]",
        runs.iter()
            .map(|r| format!("seed {}: {:.3} vs {:.3}", r.seed, r.probe_auc[0], r.probe_auc[1]))
            .collect::<Vec<_>>()
            .join("; ")
    );
    check(passed >= 2, detail.clone())?;
    Ok(detail)
}

fn criterion_10(first: &SeedRun) -> Outcome {
    let again = run_seed(first.seed)?;
    check(first.artifacts.len() == again.artifacts.len(), "artifact count differs")?;
    for ((name, a), (_, b)) in first.artifacts.iter().zip(&again.artifacts) {
        check(a == b, format!("{name} differs between runs"))?;
    }
    Ok(format!("{} checkpoints, logs and reports byte-identical", first.artifacts.len()))
}

fn report(n: usize, name: &str, start: Instant, outcome: Outcome) -> bool {
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("criterion {n:>2} {name}: PASS ({detail}; {secs:.1}s)");
            true
        }
        Err(why) => {
            println!("criterion {n:>2} {name}: FAIL ({why}; {secs:.1}s)");
            false
        }
    }
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut ok = true;
    let cheap: [(usize, &str, fn() -> Outcome); 6] = [
        (1, "gradient certification", criterion_1),
        (2, "algebraic invariants", criterion_2),
        (3, "oracle equivalence", criterion_3),
        (4, "protocol duality", criterion_4),
        (5, "metric units", criterion_5),
        (9, "retrieval-variant builder", criterion_9),
    ];
    for (n, name, f) in cheap {
        let t = Instant::now();
        ok &= report(n, name, t, f());
    }

    let t = Instant::now();
    let runs: Result<Vec<SeedRun>, String> = (0..3).map(run_seed).collect();
    let shared = t.elapsed().as_secs_f64();
    println!("trained 3 seeds in {shared:.1}s (shared by criteria 6-8)");
    match runs {
        Ok(runs) => {
            ok &= report(6, "fine-tuning trend", t, criterion_6(&runs));
            ok &= report(7, "pretraining trend", t, criterion_7(&runs));
            ok &= report(8, "binary screening trend", t, criterion_8(&runs));
            let t = Instant::now();
            ok &= report(10, "reproducibility", t, criterion_10(&runs[0]));
        }
        Err(why) => {
            for (n, name) in [(6, "fine-tuning trend"), (7, "pretraining trend"), (8, "binary screening trend"), (10, "reproducibility")] {
                ok &= report(n, name, t, Err(why.clone()));
            }
        }
    }
    if !ok {
        std::process::exit(1);
    }
}
