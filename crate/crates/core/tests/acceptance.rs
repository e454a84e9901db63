//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits nonzero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{brute_ap, brute_auroc, ca, concat, max_abs_diff, mlp, pool, to_mat, Mat};
use genrel_core::checkpoint::Checkpoint;
use genrel_core::conditioning::{fuse, init_fusion, FusionVariant, CA_R_FROM_T, CA_TIED, CA_T_FROM_R, MIX};
use genrel_core::dataset::{PairDataset, PairRecord};
use genrel_core::drift::{analyze, noisy, pin_downstream, prediction_drift, DriftOptions, Verdict};
use genrel_core::encoders::representation_drift;
use genrel_core::gradcheck::{model_gradcheck, GradCheckOptions};
use genrel_core::heads::{LabelSpace, Prediction};
use genrel_core::metrics::{micro_accuracy, micro_aupr, micro_auroc, micro_f1, ScoredBatch};
use genrel_core::model::{Architecture, FreezePattern, ModelConfig};
use genrel_core::nn::{copy_prefix, AttnShape};
use genrel_core::splits::{generate_split, validate_split, Rule, SplitKind, SplitManifest, SplitOptions};
use genrel_core::synthetic::{generate, majority_baseline, SyntheticSpec};
use genrel_core::tensor::{ParamStore, Tensor};
use genrel_core::training::{evaluate, train, validation_split, TrainConfig, TrainOutcome};
use genrel_core::trunk::{init_trunk, relation_state, swap_halves};

/// Minimum margin of S3 test accuracy over the majority-class baseline,
/// pinned from a calibration run (observed margins 0.333 binary, 0.607
/// multiclass).
const LEARNING_MARGIN: f64 = 0.2;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn binary() -> LabelSpace {
    LabelSpace::binary(false)
}

fn multiclass() -> LabelSpace {
    LabelSpace::multiclass(4, true).unwrap()
}

/// Model used by the training-based criteria: width 32, at most 16 tokens.
fn small_config(space: LabelSpace, fusion: FusionVariant) -> ModelConfig {
    let mut m = ModelConfig {
        d: 32,
        fusion,
        label_space: space,
        ..Default::default()
    };
    for s in &mut m.streams {
        s.width = 32;
        s.max_len = 16;
    }
    m
}

fn train_config(space: LabelSpace) -> TrainConfig {
    TrainConfig {
        epochs: 50,
        patience: 0,
        model: small_config(space, FusionVariant::default()),
        ..Default::default()
    }
}

struct TrainedRun {
    ds: PairDataset,
    manifest: SplitManifest,
    cfg: TrainConfig,
    outcome: TrainOutcome,
    elapsed: Duration,
}

fn trained_run(space: LabelSpace) -> TrainedRun {
    let t = Instant::now();
    let ds = generate(&SyntheticSpec::default(), space).unwrap();
    let manifest = generate_split(&ds, SplitKind::S3, 0.2, 0, &SplitOptions::default()).unwrap();
    let cfg = train_config(space);
    let outcome = train(&cfg, &ds, &manifest).unwrap();
    TrainedRun {
        ds,
        manifest,
        cfg,
        outcome,
        elapsed: t.elapsed(),
    }
}

fn binary_run() -> &'static TrainedRun {
    static RUN: OnceLock<TrainedRun> = OnceLock::new();
    RUN.get_or_init(|| trained_run(binary()))
}

fn random_seq(rng: &mut ChaCha8Rng, max_len: usize, d: usize) -> (Tensor, Vec<bool>) {
    let len = rng.random_range(1..=max_len);
    let valid = rng.random_range(1..=len);
    let data = (0..len * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mask = (0..len).map(|i| i < valid).collect();
    (Tensor::matrix(len, d, data).unwrap(), mask)
}

// ---------------------------------------------------------------------------

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let opts = GradCheckOptions::default();
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for space in [binary(), multiclass()] {
        let ds = generate(
            &SyntheticSpec {
                drugs: 20,
                pairs: 40,
                ..Default::default()
            },
            space,
        )
        .unwrap();
        let records: Vec<&PairRecord> = ds.records.iter().take(2).collect();
        for fusion in FusionVariant::ALL {
            let cfg = ModelConfig {
                freeze: FreezePattern::None,
                ..small_config(space, fusion)
            };
            let arch = Architecture::new(cfg).unwrap();
            let params = arch.init_params(3);
            let report = model_gradcheck(&arch, &params, &records, &opts).unwrap();
            worst = worst.max(report.max_rel_error);
            if !report.passed {
                failures.push(format!("{}/{}", space.describe(), fusion));
            }
        }
    }
    let elapsed = start.elapsed();
    let in_time = elapsed < Duration::from_secs(120);
    outcome(
        failures.is_empty() && in_time,
        format!(
            "10 configurations, max relative error {worst:.2e} (limit 1e-4), {:.1}s (limit 120s){}",
            elapsed.as_secs_f64(),
            if failures.is_empty() {
                String::new()
            } else {
                format!(", failed: {}", failures.join(", "))
            }
        ),
    )
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut f1_mismatch = 0;
    let mut multiclass_batches = 0;
    let mut undefined_agree = true;
    for _ in 0..1000 {
        let n = rng.random_range(1..=50);
        let multi = rng.random_bool(0.5);
        let space = if multi {
            LabelSpace::multiclass(rng.random_range(3..=5), false).unwrap()
        } else {
            binary()
        };
        // few distinct levels so that ties are frequent
        let levels = rng.random_range(2..=6);
        let preds: Vec<Prediction> = (0..n)
            .map(|_| {
                if multi {
                    let raw: Vec<f64> = (0..space.classes)
                        .map(|_| (rng.random_range(1..=levels)) as f64)
                        .collect();
                    let s: f64 = raw.iter().sum();
                    Prediction {
                        probs: raw.iter().map(|v| v / s).collect(),
                    }
                } else {
                    Prediction {
                        probs: vec![rng.random_range(0..=levels) as f64 / levels as f64],
                    }
                }
            })
            .collect();
        let labels: Vec<i64> = (0..n)
            .map(|_| {
                let c = rng.random_range(0..space.classes);
                space.label_of(c)
            })
            .collect();
        let batch = ScoredBatch::new(&preds, &labels, space).unwrap();
        // one-vs-rest pooling, rebuilt here rather than taken from the library
        let mut scores = Vec::new();
        let mut pos = Vec::new();
        for (p, &y) in preds.iter().zip(&labels) {
            if multi {
                for (c, &s) in p.probs.iter().enumerate() {
                    scores.push(s);
                    pos.push(y == c as i64 + 1);
                }
            } else {
                scores.push(p.probs[0]);
                pos.push(y == 1);
            }
        }
        match (micro_auroc(&batch), brute_auroc(&scores, &pos)) {
            (Ok(a), Some(b)) => worst = worst.max((a - b).abs()),
            (Err(_), None) => {}
            _ => undefined_agree = false,
        }
        match (micro_aupr(&batch), brute_ap(&scores, &pos)) {
            (Ok(a), Some(b)) => worst = worst.max((a - b).abs()),
            (Err(_), None) => {}
            _ => undefined_agree = false,
        }
        if multi {
            multiclass_batches += 1;
            if micro_f1(&batch).unwrap().0 != micro_accuracy(&batch).unwrap() {
                f1_mismatch += 1;
            }
        }
    }
    outcome(
        worst <= 1e-12 && f1_mismatch == 0 && undefined_agree,
        format!(
            "1000 batches, max |metric - enumeration| {worst:.1e} (limit 1e-12), \
             F1 != ACC on {f1_mismatch}/{multiclass_batches} multiclass batches"
        ),
    )
}

fn split_legality() -> Outcome {
    let fixtures = [
        ("binary undirected", generate(&SyntheticSpec::default(), binary()).unwrap()),
        (
            "multiclass directed",
            generate(
                &SyntheticSpec {
                    seed: 1,
                    ..Default::default()
                },
                multiclass(),
            )
            .unwrap(),
        ),
    ];
    let mut manifests = 0;
    let mut bad = Vec::new();
    for (name, ds) in &fixtures {
        for kind in SplitKind::ALL {
            for seed in 0..100 {
                match generate_split(ds, kind, 0.2, seed, &SplitOptions::default()) {
                    Ok(m) => {
                        manifests += 1;
                        let v = validate_split(ds, &m).unwrap();
                        if !v.is_empty() {
                            bad.push(format!("{name}/{}/{seed}: {} violations", kind.tag(), v.len()));
                        }
                    }
                    Err(e) => bad.push(format!("{name}/{}/{seed}: {e}", kind.tag())),
                }
            }
        }
    }

    // seen drug planted into an S3 test set
    let ds = &fixtures[0].1;
    let mut m = generate_split(ds, SplitKind::S3, 0.2, 0, &SplitOptions::default()).unwrap();
    let planted = m.dropped.pop().expect("S3 drops mixed pairs");
    m.test.push(planted.clone());
    let v = validate_split(ds, &m).unwrap();
    let s3_caught = v
        .iter()
        .any(|x| x.rule == Rule::SeenDrug && x.pair_id.as_deref() == Some(planted.as_str()));

    // reversed directed pair planted into an S1 training set
    let ds = reversed_pair_fixture();
    let mut m = generate_split(&ds, SplitKind::S1, 0.3, 0, &SplitOptions::default()).unwrap();
    let by_id = ds.index();
    let test_set: std::collections::HashSet<&str> = m.test.iter().map(String::as_str).collect();
    let (keep, moved) = m
        .test
        .iter()
        .find_map(|id| {
            let r = by_id[id.as_str()];
            ds.records
                .iter()
                .find(|o| o.drug_a == r.drug_b && o.drug_b == r.drug_a && test_set.contains(o.pair_id.as_str()))
                .map(|o| (r.pair_id.clone(), o.pair_id.clone()))
        })
        .expect("a reversed pair in the S1 test set");
    m.test.retain(|id| *id != moved);
    m.train.push(moved);
    let v = validate_split(&ds, &m).unwrap();
    let s1_caught = v
        .iter()
        .any(|x| x.rule == Rule::StrictS1 && x.pair_id.as_deref() == Some(keep.as_str()));

    outcome(
        bad.is_empty() && s3_caught && s1_caught,
        format!(
            "{manifests} manifests, {} with violations or errors; planted S3 seen-drug fault {}, \
             planted S1 reversed-pair fault {}{}",
            bad.len(),
            if s3_caught { "detected" } else { "MISSED" },
            if s1_caught { "detected" } else { "MISSED" },
            bad.first().map(|b| format!("; first: {b}")).unwrap_or_default()
        ),
    )
}

/// Directed fixture in which every sampled pair also appears reversed.
fn reversed_pair_fixture() -> PairDataset {
    let base = generate(
        &SyntheticSpec {
            drugs: 30,
            pairs: 60,
            seed: 9,
            ..Default::default()
        },
        multiclass(),
    )
    .unwrap();
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for r in &base.records {
        if !seen.insert((r.drug_b.clone(), r.drug_a.clone())) || !seen.insert((r.drug_a.clone(), r.drug_b.clone())) {
            continue;
        }
        for (a, b, ia, ib) in [
            (&r.drug_a, &r.drug_b, &r.input_a, &r.input_b),
            (&r.drug_b, &r.drug_a, &r.input_b, &r.input_a),
        ] {
            records.push(PairRecord {
                pair_id: (records.len() + 1).to_string(),
                drug_a: a.clone(),
                drug_b: b.clone(),
                input_a: ia.clone(),
                input_b: ib.clone(),
                label: genrel_core::synthetic::planted_label(&base.space, ia, ib),
            });
        }
    }
    PairDataset::new(records, base.space).unwrap()
}

fn freeze_and_drift() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    // all streams frozen, downstream pinned
    let ds = generate(&SyntheticSpec::default(), binary()).unwrap();
    let m = generate_split(&ds, SplitKind::S3, 0.2, 0, &SplitOptions::default()).unwrap();
    let mut cfg = train_config(binary());
    cfg.epochs = 5;
    cfg.model.freeze = FreezePattern::Both;
    let out = train(&cfg, &ds, &m).unwrap();
    let arch = Architecture::new(cfg.model.clone()).unwrap();
    let reference = arch.init_params(cfg.seed);
    let pinned = pin_downstream(&out.last.params, &reference).unwrap();
    let records = ds.select(&m.test).unwrap();
    let frozen_drift = prediction_drift((&arch, &pinned), (&arch, &reference), &records).unwrap();
    pass &= frozen_drift == 0.0;
    notes.push(format!("all-frozen pinned drift {frozen_drift:e}"));

    // frozen anchor stays bit-identical through 50 epochs
    let run = binary_run();
    let arch = Architecture::new(run.cfg.model.clone()).unwrap();
    let reference = arch.init_params(run.cfg.seed);
    let trained = &run.outcome.last.params;
    let vocab = run.ds.vocabulary().unwrap();
    let anchor = arch.anchor();
    let delta_anchor = representation_drift(anchor, trained, &reference, &vocab, None).unwrap();
    let prefix = format!("{}.", anchor.prefix());
    let bytes_equal = trained.bytes_with_prefix(&prefix) == reference.bytes_with_prefix(&prefix);
    pass &= run.outcome.history.len() == 50 && delta_anchor == 0.0 && bytes_equal;
    notes.push(format!(
        "frozen-stream Delta after {} epochs {delta_anchor:e}",
        run.outcome.history.len()
    ));

    // one adaptive stream perturbed, around the trained and the initial
    // parameters, with the downstream modules pinned
    let adapter = arch.adapter().clone();
    let records = run.ds.select(&run.manifest.test).unwrap();
    let adapter_prefix = format!("{}.", adapter.prefix());
    for (base_name, base) in [("trained", trained), ("initial", &reference)] {
        for (k, scale) in [1e-3, 1e-2, 1e-1].into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
            let mut moved: ParamStore = base.clone();
            for p in moved.iter_mut() {
                if p.name.starts_with(&adapter_prefix) {
                    p.tensor = noisy(&p.tensor, scale, &mut rng);
                }
            }
            let opts = DriftOptions {
                n_probes: 1000,
                perturb_scale: scale,
                seed: k as u64,
            };
            let rep = analyze(&arch, &moved, base, &vocab, &records, &opts).unwrap();
            let holds = rep.verdict == Verdict::Holds && rep.n_probes >= 1000 && rep.deltas[adapter.index] > 0.0;
            pass &= holds;
            notes.push(format!(
                "{base_name} {scale:.0e}: drift {:.2e} <= {:.2e} (L_hat {:.2e}) {}",
                rep.measured_drift,
                rep.bound_value,
                rep.l_hat,
                if holds { "ok" } else { "VIOLATED" }
            ));
        }
    }
    outcome(pass, notes.join("; "))
}

fn fusion_algebra() -> Outcome {
    let d = 16;
    let heads = 4;
    let shape = AttnShape::new(d, heads).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut tied_equal = true;
    for trial in 0..100 {
        let (r, mr) = random_seq(&mut rng, 12, d);
        let (t, mt) = random_seq(&mut rng, 12, d);
        let rm: Mat = to_mat(&r);
        let tm: Mat = to_mat(&t);
        for variant in FusionVariant::ALL {
            let mut store = ParamStore::new();
            init_fusion(&mut store, variant, d, &mut ChaCha8Rng::seed_from_u64(trial));
            let got = fuse(&store, variant, shape, (&r, &mr), (&t, &mt)).unwrap();
            let g_tr = |p: &str| pool(&ca(&store, p, heads, &tm, &rm, &mr), &mt);
            let g_rt = |p: &str| pool(&ca(&store, p, heads, &rm, &tm, &mt), &mr);
            let want = match variant {
                FusionVariant::ConcatMlp => mlp(&store, MIX, &vec![concat(&pool(&rm, &mr), &pool(&tm, &mt))])[0].clone(),
                FusionVariant::OneWayTFromR => g_tr(CA_T_FROM_R),
                FusionVariant::OneWayRFromT => g_rt(CA_R_FROM_T),
                FusionVariant::TwoWayUntied => {
                    mlp(&store, MIX, &vec![concat(&g_tr(CA_T_FROM_R), &g_rt(CA_R_FROM_T))])[0].clone()
                }
                FusionVariant::TwoWayTied => mlp(&store, MIX, &vec![concat(&g_tr(CA_TIED), &g_rt(CA_TIED))])[0].clone(),
            };
            worst = worst.max(max_abs_diff(&got.pooled, &want));
        }

        // untied with both directions sharing one block == tied
        let mut untied = ParamStore::new();
        init_fusion(&mut untied, FusionVariant::TwoWayUntied, d, &mut ChaCha8Rng::seed_from_u64(trial));
        copy_prefix(&mut untied, CA_T_FROM_R, CA_R_FROM_T).unwrap();
        let mut tied = untied.clone();
        copy_prefix(&mut tied, CA_T_FROM_R, CA_TIED).unwrap();
        let a = fuse(&untied, FusionVariant::TwoWayUntied, shape, (&r, &mr), (&t, &mt)).unwrap();
        let b = fuse(&tied, FusionVariant::TwoWayTied, shape, (&r, &mr), (&t, &mt)).unwrap();
        let same_bits = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(u, v)| u.to_bits() == v.to_bits());
        tied_equal &= a.mask == b.mask
            && same_bits(a.tokens.data(), b.tokens.data())
            && same_bits(&a.pooled, &b.pooled);
    }
    outcome(
        worst <= 1e-12 && tied_equal,
        format!(
            "tied vs shared-untied {}; max |pooled - hand composition| {worst:.1e} (limit 1e-12) over 100 inputs x 5 variants",
            if tied_equal { "bit-identical" } else { "DIFFER" }
        ),
    )
}

fn trunk_symmetry() -> Outcome {
    let d = 16;
    let shape = AttnShape::new(d, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    init_trunk(&mut store, true, d, &mut rng);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (a, ma) = random_seq(&mut rng, 16, d);
        let (b, mb) = random_seq(&mut rng, 16, d);
        let ab = relation_state(&store, true, shape, (&a, &ma), (&b, &mb)).unwrap();
        let ba = relation_state(&store, true, shape, (&b, &mb), (&a, &ma)).unwrap();
        worst = worst.max(max_abs_diff(&ba.z, &swap_halves(&ab.z)));
    }
    outcome(
        worst <= 1e-12,
        format!("1000 random pairs, max |z_ba - swap(z_ab)| {worst:.1e} (limit 1e-12)"),
    )
}

fn learning_sanity() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut notes = Vec::new();
    let mc = trained_run(multiclass());
    for run in [binary_run(), &mc] {
        let best_train = run.outcome.history.iter().map(|h| h.train_acc).fold(0.0, f64::max);
        let model = run.outcome.best.model().unwrap();
        let ev = evaluate(&model.arch, &model.params, &run.ds, &run.manifest.test).unwrap();
        let labels: Vec<i64> = run.ds.select(&run.manifest.test).unwrap().iter().map(|r| r.label).collect();
        let baseline = majority_baseline(&labels);
        let ok = best_train >= 0.99 && ev.metrics.acc > baseline + LEARNING_MARGIN;
        pass &= ok;
        let kind = if run.ds.space == binary() { "binary" } else { "multiclass" };
        notes.push(format!(
            "{kind}: {} fitted pairs, train acc {best_train:.3}, S3 test acc {:.3} vs baseline {baseline:.3} (margin {LEARNING_MARGIN}), {:.0}s",
            validation_split(&run.cfg, &run.manifest.train).0.len(),
            ev.metrics.acc,
            run.elapsed.as_secs_f64()
        ));
    }
    // the binary run may have been trained by an earlier criterion
    let total = start.elapsed() + binary_run().elapsed;
    pass &= total < Duration::from_secs(300);
    notes.push(format!("total {:.0}s (limit 300s)", total.as_secs_f64()));
    outcome(pass, notes.join("; "))
}

fn determinism() -> Outcome {
    let artifacts = || -> Vec<(String, Vec<u8>)> {
        let ds = generate(&SyntheticSpec::default(), multiclass()).unwrap();
        let m = generate_split(&ds, SplitKind::S2, 0.2, 3, &SplitOptions::default()).unwrap();
        let mut cfg = train_config(multiclass());
        cfg.epochs = 4;
        cfg.model.d = 16;
        let out = train(&cfg, &ds, &m).unwrap();
        let mut v = vec![
            ("manifest".to_string(), m.to_json().unwrap().into_bytes()),
            ("history".to_string(), serde_json::to_vec(&out.history).unwrap()),
        ];
        for (name, ck) in [("best", &out.best), ("last", &out.last)] {
            let (json, blob) = ck.to_parts("x.bin").unwrap();
            v.push((format!("{name} sidecar"), json.into_bytes()));
            v.push((format!("{name} blob"), blob));
        }
        let loaded = Checkpoint::from_parts(std::str::from_utf8(&v[4].1).unwrap(), &v[5].1).unwrap();
        let model = loaded.model().unwrap();
        let ev = evaluate(&model.arch, &model.params, &ds, &m.test).unwrap();
        v.push(("metrics".to_string(), ev.metrics.to_json().unwrap().into_bytes()));
        v.push(("predictions".to_string(), serde_json::to_vec(&ev.predictions).unwrap()));
        v
    };
    let a = artifacts();
    let b = artifacts();
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();
    outcome(
        differing.is_empty(),
        format!(
            "{} artifacts compared byte-for-byte across two runs{}",
            a.len(),
            if differing.is_empty() {
                String::new()
            } else {
                format!(", differing: {}", differing.join(", "))
            }
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        ("gradient fidelity", gradient_fidelity),
        ("metric oracles", metric_oracles),
        ("split legality", split_legality),
        ("freeze and drift", freeze_and_drift),
        ("fusion algebra", fusion_algebra),
        ("trunk symmetry", trunk_symmetry),
        ("learning sanity", learning_sanity),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "{} criterion {} ({name}) [{:.1}s]: {}",
            if result.pass { "PASS" } else { "FAIL" },
            i + 1,
            start.elapsed().as_secs_f64(),
            result.detail
        );
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
