//! End-to-end acceptance suite. Each test prints one PASS/FAIL line for its
//! criterion and then asserts it.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use r2d2::contamination::{build_variants, pair_parallels, reliability_table, ContaminationPlan};
use r2d2::corpus::{
    generate_synthetic, generate_synthetic_detailed, split_words, tokenize, write_dataset,
    SyntheticSpec, TableExample, Vocabulary,
};
use r2d2::entities::{GazetteerRecognizer, TableGroundedRecognizer};
use r2d2::eval::{corpus_bleu, ner_metrics, Averaging};
use r2d2::exec::Execution;
use r2d2::losses::{
    nll_grad, nll_loss, r2d2_loss, rd_sentence_grad, rd_sentence_loss, rd_token_grad,
    rd_token_loss, unlikelihood_grad, unlikelihood_loss, TokenReduction,
};
use r2d2::model::{ModelConfig, Seq2Seq};
use r2d2::perturb::{
    generate_perturbations, group_by_source, perturb_corpus, write_perturbations, KnowledgeSource,
    LabelConvention, PerturbedSentence, SizePolicy,
};
use r2d2::trainer::{
    evaluate_checkpoint, group_loss_and_grad, heldout_metrics, prepare_r2d2_groups,
    prepare_warmup_groups, r2d2_finetune, warmup_finetune, Discrimination, InstanceGroup,
    LossSettings, Target, TrainConfig, TrainLog, TrainMode,
};

fn verdict(criterion: u8, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("criterion {criterion} [{name}]: {tag} ({detail})");
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

// ---------------------------------------------------------------------------
// 1. Loss exactness
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_loss_exactness() {
    let ln = f64::ln;
    let cases: Vec<(&str, f64, f64)> = vec![
        (
            "rd_sentence p=0.5 l=1",
            rd_sentence_loss(0.5, 1).unwrap(),
            2f64.ln(),
        ),
        (
            "rd_sentence p=0.9 l=0",
            rd_sentence_loss(0.9, 0).unwrap(),
            -ln(0.1),
        ),
        (
            "rd_token [0.1,0.2,0.8]/[0,0,1]",
            rd_token_loss(&[0.1, 0.2, 0.8], &[0, 0, 1]).unwrap(),
            -(ln(0.9) + ln(0.8) + ln(0.8)),
        ),
        (
            "rd_token all 0.5, n=7",
            rd_token_loss(&[0.5; 7], &[1, 0, 1, 1, 0, 0, 1]).unwrap(),
            7.0 * 2f64.ln(),
        ),
        (
            "unlikelihood [0.9,0.7,0.6]/[0,0,1]",
            unlikelihood_loss(&[0.9, 0.7, 0.6], &[0, 0, 1]).unwrap(),
            -(ln(0.9) + ln(0.7) + ln(0.4)),
        ),
        (
            "unlikelihood empty mask = nll",
            unlikelihood_loss(&[0.3, 0.6], &[0, 0]).unwrap(),
            nll_loss(&[0.3, 0.6]),
        ),
        (
            "nll [0.5,0.25]",
            nll_loss(&[0.5, 0.25]),
            2f64.ln() + 4f64.ln(),
        ),
        (
            "r2d2 lambda=0.5 N=1",
            r2d2_loss(2.0, &[1.0], 0.2, &[0.4], 0.5).unwrap(),
            0.9,
        ),
        (
            "r2d2 lambda=1",
            r2d2_loss(2.0, &[1.0, 0.5], 0.2, &[0.4, 0.3], 1.0).unwrap(),
            3.5 / 3.0,
        ),
        (
            "r2d2 N=0",
            r2d2_loss(1.7, &[], 0.3, &[], 0.25).unwrap(),
            0.25 * 1.7 + 0.75 * 0.3,
        ),
        // Values frozen from an independent float64 evaluation.
        (
            "rd_token fixture (frozen)",
            rd_token_loss(&[0.1, 0.2, 0.8], &[0, 0, 1]).unwrap(),
            0.551_647_618_286_245_8,
        ),
        (
            "unlikelihood fixture (frozen)",
            unlikelihood_loss(&[0.9, 0.7, 0.6], &[0, 0, 1]).unwrap(),
            1.378_326_191_470_713_7,
        ),
    ];
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for (name, got, want) in &cases {
        let err = (got - want).abs();
        worst = worst.max(err);
        if err > 1e-9 {
            failed.push(format!("{name}: got {got}, want {want}"));
        }
    }
    let near_zero = [
        rd_sentence_loss(1.0 - 1e-7, 1).unwrap(),
        rd_token_loss(&[1.0, 0.0, 1.0], &[1, 0, 1]).unwrap(),
        nll_loss(&[1.0 - 1e-7; 4]),
    ];
    let tiny = near_zero.iter().all(|v| (0.0..1e-6).contains(v));
    verdict(
        1,
        "loss exactness",
        failed.is_empty() && tiny,
        &format!(
            "{} fixtures, max abs error {worst:.2e}; {}",
            cases.len(),
            failed.join("; ")
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. Gradient fidelity
// ---------------------------------------------------------------------------

fn fd_vector(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut up = x.to_vec();
            let mut down = x.to_vec();
            up[i] += h;
            down[i] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

fn micro_model() -> Seq2Seq {
    let mut cfg = ModelConfig::new(20);
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    cfg.encoder_layers = 1;
    cfg.decoder_layers = 1;
    cfg.max_input_len = 16;
    cfg.max_output_len = 8;
    cfg.max_rows = 4;
    cfg.max_cells = 4;
    cfg.dropout = 0.0;
    cfg.seed = 5;
    cfg.sentence_head = true;
    cfg.token_head = true;
    let mut m = Seq2Seq::new(cfg).unwrap();
    m.reinit_heads(11);
    m
}

fn micro_group() -> InstanceGroup {
    // ids 8.. are ordinary words; 6 and 7 are the row and cell markers.
    let x = vec![6, 7, 8, 9, 7, 10, 11, 6, 7, 12, 7, 13];
    let truth = vec![8, 14, 10, 15];
    let false_a = PerturbedSentence {
        source_example_id: "m".into(),
        tokens: r2d2::TokenSequence {
            ids: vec![8, 14, 11, 15],
            surface: vec!["a".into(), "b".into(), "c".into(), "d".into()],
        },
        replaced_span: (2, 3),
        original_span: (2, 3),
        original_entity: "x".into(),
        replacement_entity: "y".into(),
        method: r2d2::perturb::Method::Knowledge,
        token_labels: vec![1, 1, 0, 0],
    };
    let mut false_b = false_a.clone();
    false_b.tokens.ids = vec![12, 13, 14, 10, 15];
    false_b.tokens.surface.push("e".into());
    false_b.replaced_span = (0, 2);
    false_b.original_span = (0, 1);
    false_b.token_labels = vec![0, 0, 0, 0, 0];
    InstanceGroup {
        example_id: "m".into(),
        x,
        targets: vec![
            Target::entailed(truth),
            Target::contradictory(&false_a),
            Target::contradictory(&false_b),
        ],
    }
}

fn model_fd_error(settings: LossSettings) -> (f64, usize) {
    let model = micro_model();
    let group = micro_group();
    let analytic = group_loss_and_grad(&model, &group, &settings, None).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in 0..model.params.len() {
        let n = model.params.get(id).data.len();
        let name = model.params.name(id).to_string();
        // Every entry of small tensors, a strided sample of large ones.
        let stride = (n / 12).max(1);
        for k in (0..n).step_by(stride) {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params.get_mut(id).data[k] += delta;
                group_loss_and_grad(&m, &group, &settings, None)
                    .unwrap()
                    .loss
                    .combined
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.grads.get(id).map(|g| g.data[k]).unwrap_or(0.0);
            let e = rel_err(a, numeric);
            if e > worst {
                worst = e;
                if e > 1e-4 {
                    eprintln!("{name}[{k}]: analytic {a:e} numeric {numeric:e}");
                }
            }
            checked += 1;
        }
    }
    (worst, checked)
}

#[test]
fn criterion_2_gradient_fidelity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.gen_range(1..8);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let label = labels[0];

        let g = rd_sentence_grad(p[0], label).unwrap();
        let num = (rd_sentence_loss(p[0] + h, label).unwrap()
            - rd_sentence_loss(p[0] - h, label).unwrap())
            / (2.0 * h);
        worst = worst.max(rel_err(g, num));

        let pairs = [
            (
                rd_token_grad(&p, &labels).unwrap(),
                fd_vector(|q| rd_token_loss(q, &labels).unwrap(), &p, h),
            ),
            (
                unlikelihood_grad(&p, &labels).unwrap(),
                fd_vector(|q| unlikelihood_loss(q, &labels).unwrap(), &p, h),
            ),
            (nll_grad(&p), fd_vector(nll_loss, &p, h)),
        ];
        for (a, b) in pairs {
            for (x, y) in a.iter().zip(&b) {
                worst = worst.max(rel_err(*x, *y));
            }
        }

        // r2d2_loss is linear in each input; check d/dnll and d/dλ.
        let lambda = rng.gen_range(0.0..1.0);
        let ul: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
        let rdf: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
        let f = |nll: f64, l: f64| r2d2_loss(nll, &ul, 0.4, &rdf, l).unwrap();
        let d_nll = (f(1.0 + h, lambda) - f(1.0 - h, lambda)) / (2.0 * h);
        worst = worst.max(rel_err(d_nll, lambda / (n as f64 + 1.0)));
        let lh = 1e-4;
        let lam = lambda.clamp(lh, 1.0 - lh);
        let d_lambda = (f(1.0, lam + lh) - f(1.0, lam - lh)) / (2.0 * lh);
        let expected =
            ((1.0 + ul.iter().sum::<f64>()) - (0.4 + rdf.iter().sum::<f64>())) / (n as f64 + 1.0);
        worst = worst.max(rel_err(d_lambda, expected));
    }

    let base = LossSettings {
        mode: TrainMode::R2d2,
        lambda: 0.4,
        discrimination: Discrimination::Token,
        unlikelihood: true,
        reduction: TokenReduction::Sum,
        detach_heads: false,
    };
    let configs = [
        ("token+ul", base),
        (
            "sentence+ul",
            LossSettings {
                discrimination: Discrimination::Sentence,
                ..base
            },
        ),
        (
            "warmup",
            LossSettings {
                mode: TrainMode::Warmup,
                discrimination: Discrimination::None,
                unlikelihood: false,
                ..base
            },
        ),
        (
            "token mean-reduced",
            LossSettings {
                reduction: TokenReduction::Mean,
                ..base
            },
        ),
    ];
    let mut model_worst = 0.0f64;
    let mut checked = 0;
    for (_, s) in configs {
        let (e, n) = model_fd_error(s);
        model_worst = model_worst.max(e);
        checked += n;
    }
    verdict(
        2,
        "gradient fidelity",
        worst < 1e-4 && model_worst < 1e-4,
        &format!("loss max rel err {worst:.2e}; model-through-loss max rel err {model_worst:.2e} over {checked} entries"),
    );
}

// ---------------------------------------------------------------------------
// 3. Perturbation oracle
// ---------------------------------------------------------------------------

fn lower_words(s: &str) -> Vec<String> {
    split_words(s)
        .into_iter()
        .map(|w| w.to_lowercase())
        .collect()
}

fn find_sub(hay: &[String], needle: &[String]) -> Option<usize> {
    (0..=hay.len().saturating_sub(needle.len())).find(|&i| hay[i..i + needle.len()] == *needle)
}

/// Brute force: every queried cell of the reference times every other
/// distinct value of its column.
fn brute_force(example: &TableExample, queried: &[(usize, usize)]) -> BTreeSet<Vec<String>> {
    let y = lower_words(&example.reference);
    let mut out = BTreeSet::new();
    for &(r, c) in queried {
        let entity = lower_words(example.cell(r, c));
        let start = find_sub(&y, &entity).expect("queried cell appears in the reference");
        let end = start + entity.len();
        let values: BTreeSet<Vec<String>> = example
            .rows
            .iter()
            .map(|row| lower_words(&row[c]))
            .collect();
        for v in values {
            if v != entity {
                let mut s = y[..start].to_vec();
                s.extend(v);
                s.extend_from_slice(&y[end..]);
                out.insert(s);
            }
        }
    }
    out
}

#[test]
fn criterion_3_perturbation_oracle() {
    let spec = SyntheticSpec {
        seed: 3,
        n_examples: 200,
        ..SyntheticSpec::default()
    };
    let detailed = generate_synthetic_detailed(&spec).unwrap();
    let examples: Vec<TableExample> = detailed.iter().map(|d| d.example.clone()).collect();
    let vocab = Vocabulary::from_corpus(&examples);
    let rec = TableGroundedRecognizer;
    let mut mismatches = Vec::new();
    let mut cap_violations = Vec::new();
    let mut total_full = 0;
    for d in &detailed {
        let ex = &d.example;
        let y = tokenize(&ex.reference, &vocab);
        let surfaces = |ps: &[PerturbedSentence]| -> Vec<Vec<String>> {
            ps.iter()
                .map(|p| p.tokens.surface.iter().map(|w| w.to_lowercase()).collect())
                .collect()
        };
        let mut rng = r2d2::seed::rng_for(3, &["oracle", &ex.table_id]);
        let full = generate_perturbations(
            ex,
            &y,
            &KnowledgeSource,
            SizePolicy::Full,
            &rec,
            &vocab,
            LabelConvention::Prefix,
            &mut rng,
        )
        .unwrap();
        let got: Vec<Vec<String>> = surfaces(&full.sentences);
        let got_set: BTreeSet<Vec<String>> = got.iter().cloned().collect();
        let want = brute_force(ex, &d.queried_cells);
        total_full += got.len();
        if got_set != want || got.len() != got_set.len() {
            if mismatches.is_empty() {
                eprintln!(
                    "ref {:?}\nqueried {:?}\ngot {:?}\nwant {:?}",
                    ex.reference, d.queried_cells, got, want
                );
            }
            mismatches.push(ex.table_id.clone());
        }
        for policy in [
            SizePolicy::XSmall,
            SizePolicy::Small,
            SizePolicy::Medium,
            SizePolicy::Large,
        ] {
            let cap = policy.cap().unwrap();
            let capped = generate_perturbations(
                ex,
                &y,
                &KnowledgeSource,
                policy,
                &rec,
                &vocab,
                LabelConvention::Prefix,
                &mut rng,
            )
            .unwrap();
            let s = surfaces(&capped.sentences);
            let distinct: BTreeSet<_> = s.iter().cloned().collect();
            if s.len() != cap.min(want.len())
                || distinct.len() != s.len()
                || !distinct.is_subset(&want)
            {
                cap_violations.push(format!("{}:{policy}", ex.table_id));
            }
        }
    }
    let caps_ok = [
        SizePolicy::XSmall,
        SizePolicy::Small,
        SizePolicy::Medium,
        SizePolicy::Large,
    ]
    .iter()
    .map(|p| p.cap())
    .eq([Some(1), Some(3), Some(5), Some(10)]);
    verdict(
        3,
        "perturbation oracle",
        mismatches.is_empty() && cap_violations.is_empty() && caps_ok,
        &format!(
            "200 examples, {total_full} full-enumeration outputs; {} enumeration mismatches, {} cap violations",
            mismatches.len(),
            cap_violations.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. Metric oracle
// ---------------------------------------------------------------------------

fn random_set(rng: &mut ChaCha8Rng, universe: usize) -> BTreeSet<String> {
    let n = rng.gen_range(0..=universe.min(8));
    (0..n)
        .map(|_| format!("e{}", rng.gen_range(0..universe)))
        .collect()
}

#[test]
fn criterion_4_metric_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    let mut partition_failures = 0;
    for _ in 0..1000 {
        let universe = rng.gen_range(1..12);
        let pred = random_set(&mut rng, universe);
        let reference = random_set(&mut rng, universe);
        let input = random_set(&mut rng, universe);
        let r = ner_metrics(&pred, &reference, &input);

        let pct = |n: usize, d: usize| 100.0 * n as f64 / d as f64;
        let rc = if reference.is_empty() {
            100.0
        } else {
            pct(pred.intersection(&reference).count(), reference.len())
        };
        let (ri, rm, mi, mm) = if pred.is_empty() {
            (0.0, 0.0, 0.0, 0.0)
        } else {
            let in_ref: BTreeSet<_> = pred.intersection(&reference).cloned().collect();
            let out_ref: BTreeSet<_> = pred.difference(&reference).cloned().collect();
            (
                pct(in_ref.intersection(&input).count(), pred.len()),
                pct(in_ref.difference(&input).count(), pred.len()),
                pct(out_ref.intersection(&input).count(), pred.len()),
                pct(out_ref.difference(&input).count(), pred.len()),
            )
        };
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
        if !(close(r.rc, rc)
            && close(r.ri, ri)
            && close(r.rm, rm)
            && close(r.mi, mi)
            && close(r.mm, mm))
        {
            mismatches += 1;
        }
        if !pred.is_empty() && (r.partition_sum() - 100.0).abs() > 1e-9 {
            partition_failures += 1;
        }
    }

    // Reference value from sacrebleu 2.6.0 corpus_bleu over the same word
    // tokens (tokenize="none", lowercase, floor smoothing 0.1).
    let hyps: Vec<String> = [
        "Anna Dahl represented Spain in 1986.",
        "Pavel Costa competed in 1979.",
        "Felix Horvat received a score of 6.9.",
        "In 1990, Boris Fischer scored 7.1.",
        "Ingrid Jansen represented Norway.",
    ]
    .map(String::from)
    .to_vec();
    let refs: Vec<String> = [
        "Anna Dahl represented Spain in 1986.",
        "Pavel Costa competed in 1998.",
        "Felix Horvat received a score of 5.6.",
        "In 1990, Boris Fischer scored 7.4.",
        "Ingrid Jansen represented Ireland in 2001.",
    ]
    .map(String::from)
    .to_vec();
    let reference_bleu = 66.444_055_249_815_14;
    let bleu = corpus_bleu(&hyps, &refs, 4).unwrap();
    let bleu_ok = (bleu - reference_bleu).abs() <= 0.1;
    verdict(
        4,
        "metric oracle",
        mismatches == 0 && partition_failures == 0 && bleu_ok,
        &format!(
            "1000 triples: {mismatches} mismatches, {partition_failures} partition failures; BLEU {bleu:.4} vs reference {reference_bleu:.4}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. Contamination harness
// ---------------------------------------------------------------------------

fn contamination_run(exec: Execution) -> r2d2::contamination::ReliabilityTable {
    let examples = generate_synthetic(&SyntheticSpec {
        seed: 5,
        n_examples: 500,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let vocab = Vocabulary::from_corpus(&examples);
    let rec = TableGroundedRecognizer;
    let per_example = perturb_corpus(
        &examples,
        &KnowledgeSource,
        SizePolicy::Full,
        &rec,
        &vocab,
        LabelConvention::Prefix,
        5,
        exec,
    )
    .unwrap();
    let by_source = group_by_source(per_example.into_iter().flat_map(|p| p.sentences).collect());
    let parallels = pair_parallels(&examples, &by_source);
    let references: Vec<String> = examples.iter().map(|e| e.reference.clone()).collect();
    let plan = ContaminationPlan {
        seed: 5,
        ..ContaminationPlan::default()
    };
    let variants = build_variants(&references, &parallels, &plan).unwrap();
    reliability_table(&examples, &variants, &rec, Averaging::Micro, None, exec).unwrap()
}

#[test]
fn criterion_5_contamination_harness() {
    let started = Instant::now();
    let table = contamination_run(Execution::default());
    let pcts: Vec<f64> = table.rows.iter().map(|r| r.percentage).collect();
    let bleu = table.series("bleu");
    let rc = table.series("rc");
    let mi = table.series("mi");
    let rho = |v: &[f64]| r2d2::eval::spearman(&pcts, v).unwrap_or(0.0);
    let strictly = |v: &[f64], down: bool| {
        v.windows(2)
            .all(|w| if down { w[1] < w[0] } else { w[1] > w[0] })
    };
    let ok = pcts == [0.0, 25.0, 50.0, 75.0, 100.0]
        && strictly(&bleu, true)
        && strictly(&rc, true)
        && strictly(&mi, false)
        && (rho(&bleu) + 1.0).abs() < 1e-12
        && (rho(&rc) + 1.0).abs() < 1e-12
        && (rho(&mi) - 1.0).abs() < 1e-12
        && (bleu[0] - 100.0).abs() < 1e-9
        && (rc[0] - 100.0).abs() < 1e-9;
    let elapsed = started.elapsed().as_secs_f64();
    print!("{}", table.to_tsv());
    verdict(
        5,
        "contamination harness",
        ok && elapsed < 300.0,
        &format!(
            "{} references ({} excluded); BLEU {:?}; RC {:?}; MI {:?}; {elapsed:.1}s",
            table.n_references,
            table.excluded,
            bleu.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>(),
            rc.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>(),
            mi.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>(),
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Training efficacy
// ---------------------------------------------------------------------------

const TRAIN_EXAMPLES: usize = 2000;
const HELDOUT_EXAMPLES: usize = 200;

fn desk_model_config(vocab_size: usize, seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::new(vocab_size);
    cfg.d_model = 32;
    cfg.n_heads = 2;
    cfg.d_ff = 64;
    cfg.encoder_layers = 1;
    cfg.decoder_layers = 2;
    cfg.max_input_len = 256;
    cfg.max_output_len = 32;
    cfg.dropout = 0.0;
    cfg.seed = seed;
    cfg
}

fn desk_corpus(seed: u64) -> Vec<TableExample> {
    let mut spec = SyntheticSpec {
        seed,
        n_examples: TRAIN_EXAMPLES + HELDOUT_EXAMPLES,
        ..SyntheticSpec::default()
    };
    spec.rows.min = 1;
    spec.rows.max = 4;
    generate_synthetic(&spec).unwrap()
}

struct SeedOutcome {
    auc: f64,
    train_replaced_before: f64,
    train_replaced_after: f64,
    heldout_replaced_before: f64,
    heldout_replaced_after: f64,
    ri: (f64, f64),
    mm: (f64, f64),
    secs: f64,
}

fn efficacy_run(seed: u64) -> SeedOutcome {
    let started = Instant::now();
    let exec = Execution::default();
    let all = desk_corpus(seed);
    let (train, heldout) = all.split_at(TRAIN_EXAMPLES);
    let vocab = Vocabulary::from_corpus(&all);
    let mc = desk_model_config(vocab.len(), seed);

    let mut warm = Seq2Seq::new(mc.clone()).unwrap();
    let warm_cfg = TrainConfig {
        epochs: 15,
        learning_rate: 2e-3,
        batch_size: 8,
        seed,
        ..TrainConfig::default()
    };
    let groups = prepare_warmup_groups(train, &vocab, &mc).unwrap();
    warmup_finetune(
        &mut warm,
        &groups,
        &warm_cfg,
        exec,
        &mut TrainLog::in_memory(),
    )
    .unwrap();

    let rec = TableGroundedRecognizer;
    let per_example = perturb_corpus(
        &all,
        &KnowledgeSource,
        SizePolicy::Medium,
        &rec,
        &vocab,
        LabelConvention::Prefix,
        seed,
        exec,
    )
    .unwrap();
    let store = group_by_source(per_example.into_iter().flat_map(|p| p.sentences).collect());
    let r2d2_cfg = TrainConfig {
        mode: TrainMode::R2d2,
        epochs: 8,
        learning_rate: 1e-3,
        batch_size: 8,
        lambda: 0.7,
        discrimination: Discrimination::Token,
        unlikelihood: true,
        seed,
        ..TrainConfig::default()
    };
    let train_groups = prepare_r2d2_groups(train, &vocab, &store, &r2d2_cfg, &mc).unwrap();
    let heldout_groups = prepare_r2d2_groups(heldout, &vocab, &store, &r2d2_cfg, &mc).unwrap();

    let mut model = warm.clone();
    model.reinit_heads(seed.wrapping_add(1000));
    model.set_heads(false, true);
    let before_train = heldout_metrics(&model, &train_groups, Discrimination::Token, exec).unwrap();
    let before_heldout =
        heldout_metrics(&model, &heldout_groups, Discrimination::Token, exec).unwrap();
    let summary = r2d2_finetune(
        &mut model,
        &train_groups,
        Some(&heldout_groups),
        &r2d2_cfg,
        exec,
        &mut TrainLog::in_memory(),
    )
    .unwrap();
    let after_heldout = summary
        .final_heldout
        .expect("held-out metrics were requested");
    let after_train = heldout_metrics(&model, &train_groups, Discrimination::Token, exec).unwrap();

    let gazetteer = GazetteerRecognizer::from_corpus(&all);
    let warm_eval =
        evaluate_checkpoint(&warm, &vocab, heldout, &gazetteer, Averaging::Micro, exec).unwrap();
    let r2d2_eval =
        evaluate_checkpoint(&model, &vocab, heldout, &gazetteer, Averaging::Micro, exec).unwrap();
    SeedOutcome {
        auc: after_heldout.auc.unwrap_or(0.0),
        train_replaced_before: before_train.replaced_token_prob.unwrap(),
        train_replaced_after: after_train.replaced_token_prob.unwrap(),
        heldout_replaced_before: before_heldout.replaced_token_prob.unwrap(),
        heldout_replaced_after: after_heldout.replaced_token_prob.unwrap(),
        ri: (warm_eval.ner.ri, r2d2_eval.ner.ri),
        mm: (warm_eval.ner.mm, r2d2_eval.ner.mm),
        secs: started.elapsed().as_secs_f64(),
    }
}

#[test]
fn criterion_6_training_efficacy() {
    let started = Instant::now();
    let outcomes: Vec<SeedOutcome> = [1u64, 2, 3].iter().map(|&s| efficacy_run(s)).collect();
    let total = started.elapsed().as_secs_f64();
    for (s, o) in outcomes.iter().enumerate() {
        println!(
            "  seed {}: auc {:.4}; replaced-token prob (training) {:.5} -> {:.5}; (held-out) {:.5} -> {:.5}; RI {:.2} -> {:.2}; MM {:.2} -> {:.2}; {:.0}s",
            s + 1,
            o.auc,
            o.train_replaced_before,
            o.train_replaced_after,
            o.heldout_replaced_before,
            o.heldout_replaced_after,
            o.ri.0,
            o.ri.1,
            o.mm.0,
            o.mm.1,
            o.secs
        );
    }
    let auc_ok = outcomes.iter().all(|o| o.auc > 0.9);
    let replaced_ok = outcomes
        .iter()
        .all(|o| o.train_replaced_after < o.train_replaced_before);
    let faithful = outcomes
        .iter()
        .filter(|o| o.ri.1 > o.ri.0 && o.mm.1 <= o.mm.0)
        .count();
    verdict(
        6,
        "training efficacy",
        auc_ok && replaced_ok && faithful >= 2 && total < 1200.0,
        &format!(
            "AUC > 0.9 on all seeds: {auc_ok}; replaced-token probability lowered on all seeds: {replaced_ok}; RI up and MM not up on {faithful}/3 seeds; {total:.0}s"
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Reproducibility
// ---------------------------------------------------------------------------

fn dataset_bytes(examples: &[TableExample]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_dataset(&mut buf, examples).unwrap();
    buf
}

fn perturbation_bytes(examples: &[TableExample], vocab: &Vocabulary, exec: Execution) -> Vec<u8> {
    let per_example = perturb_corpus(
        examples,
        &KnowledgeSource,
        SizePolicy::Large,
        &TableGroundedRecognizer,
        vocab,
        LabelConvention::Prefix,
        9,
        exec,
    )
    .unwrap();
    let flat: Vec<PerturbedSentence> = per_example.into_iter().flat_map(|p| p.sentences).collect();
    let mut buf = Vec::new();
    write_perturbations(&mut buf, &flat).unwrap();
    buf
}

fn short_training(exec: Execution) -> (Vec<f64>, Vec<f64>, Vec<u8>) {
    let examples = generate_synthetic(&SyntheticSpec {
        seed: 9,
        n_examples: 48,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let vocab = Vocabulary::from_corpus(&examples);
    let mut mc = desk_model_config(vocab.len(), 9);
    mc.d_model = 16;
    mc.d_ff = 32;
    mc.decoder_layers = 1;
    mc.max_input_len = 256;
    mc.dropout = 0.1;
    let mut model = Seq2Seq::new(mc.clone()).unwrap();
    let warm_cfg = TrainConfig {
        epochs: 2,
        learning_rate: 1e-3,
        seed: 9,
        ..TrainConfig::default()
    };
    let mut log = TrainLog::in_memory();
    warmup_finetune(
        &mut model,
        &prepare_warmup_groups(&examples, &vocab, &mc).unwrap(),
        &warm_cfg,
        exec,
        &mut log,
    )
    .unwrap();
    let warm_losses = log.step_losses();

    let per_example = perturb_corpus(
        &examples,
        &KnowledgeSource,
        SizePolicy::Small,
        &TableGroundedRecognizer,
        &vocab,
        LabelConvention::Prefix,
        9,
        exec,
    )
    .unwrap();
    let store = group_by_source(per_example.into_iter().flat_map(|p| p.sentences).collect());
    let cfg = TrainConfig {
        mode: TrainMode::R2d2,
        epochs: 2,
        learning_rate: 1e-3,
        size: SizePolicy::Small,
        seed: 9,
        ..TrainConfig::default()
    };
    model.reinit_heads(10);
    let groups = prepare_r2d2_groups(&examples, &vocab, &store, &cfg, &mc).unwrap();
    let mut log = TrainLog::in_memory();
    r2d2_finetune(&mut model, &groups, None, &cfg, exec, &mut log).unwrap();
    let mut ckpt = Vec::new();
    model.write_checkpoint(&mut ckpt, Some(&vocab)).unwrap();
    (warm_losses, log.step_losses(), ckpt)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn criterion_7_reproducibility() {
    let spec = SyntheticSpec {
        seed: 9,
        n_examples: 300,
        ..SyntheticSpec::default()
    };
    let a = generate_synthetic(&spec).unwrap();
    let b = generate_synthetic(&spec).unwrap();
    let corpus_same = dataset_bytes(&a) == dataset_bytes(&b);

    let vocab = Vocabulary::from_corpus(&a);
    let p_seq = perturbation_bytes(&a, &vocab, Execution::Sequential);
    let p_par = perturbation_bytes(&a, &vocab, Execution::Parallel);
    let p_again = perturbation_bytes(&a, &vocab, Execution::Parallel);
    let perturb_same = p_seq == p_par && p_par == p_again;

    let contamination_same = {
        let x = contamination_run(Execution::Sequential);
        let y = contamination_run(Execution::Parallel);
        x.to_tsv() == y.to_tsv()
            && serde_json::to_string(&x).unwrap() == serde_json::to_string(&y).unwrap()
    };

    let (w1, r1, c1) = short_training(Execution::Parallel);
    let (w2, r2, c2) = short_training(Execution::Parallel);
    let (w3, r3, c3) = short_training(Execution::Sequential);
    let drift = max_abs_diff(&w1, &w2)
        .max(max_abs_diff(&r1, &r2))
        .max(max_abs_diff(&w1, &w3))
        .max(max_abs_diff(&r1, &r3));
    let checkpoints_same = c1 == c2 && c1 == c3;

    verdict(
        7,
        "reproducibility",
        corpus_same && perturb_same && contamination_same && drift <= 1e-9 && checkpoints_same,
        &format!(
            "corpus bytes equal: {corpus_same}; perturbation bytes equal across runs and modes: {perturb_same}; \
             reliability tables equal: {contamination_same}; loss trajectory drift {drift:.1e} over {} steps; \
             checkpoints equal: {checkpoints_same}",
            w1.len() + r1.len()
        ),
    );
}
