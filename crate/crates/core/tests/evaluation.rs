use std::path::Path;
use std::sync::Arc;

use moe_prefetch::estimator::{evaluate, Dataset, Estimator, EstimatorConfig, InputKind};
use moe_prefetch::metrics::{drift_report, Evaluator};
use moe_prefetch::model::trace::{random_tokens, CollectSink};
use moe_prefetch::model::{
    build_model, run_trace, GatingOrder, Model, ModelConfig, TraceBundle, TraceField, TraceWriter,
};
use moe_prefetch::numerics::{cosine_similarity, rms_norm, Matrix};
use moe_prefetch::speculation::{
    accumulate_default_vectors, quasi_hidden, DefaultVectorTable, Predictor, PredictorKind,
};

fn small(seed: u64) -> Model {
    build_model(ModelConfig {
        layers: 4,
        experts: 8,
        top_k: 2,
        hidden: 32,
        expert_hidden: 48,
        vocab: 64,
        head_dim: 16,
        eps: 1e-6,
        seed,
        gating: GatingOrder::SoftmaxTopK,
        rope_base: 10_000.0,
    })
    .unwrap()
}

fn write_trace(model: &Model, tokens: &[u32], dir: &Path, fields: &[TraceField]) -> TraceBundle {
    let mut w = TraceWriter::create(dir, &model.config, 64, fields).unwrap();
    run_trace(model, tokens, 64, &mut w).unwrap();
    w.finish().unwrap();
    TraceBundle::open(dir).unwrap()
}

#[test]
fn frozen_residual_gives_unit_baseline_drift() {
    let mut model = small(1);
    for lw in model.layers.iter_mut() {
        lw.wo = Matrix::zeros(lw.wo.rows(), lw.wo.cols());
        for e in lw.experts.iter_mut() {
            e.w_down = Matrix::zeros(e.w_down.rows(), e.w_down.cols());
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let bundle = write_trace(&model, &random_tokens(1, 50, 64), dir.path(), &TraceField::ALL);
    let table = accumulate_default_vectors(&bundle).unwrap();
    for (_, _, base) in drift_report(&bundle, &model, &table).unwrap() {
        assert!((base - 1.0).abs() < 1e-6, "{base}");
    }
}

#[test]
fn zero_table_quasi_drift_is_residual_drift() {
    let model = small(2);
    let toks = random_tokens(4, 80, 64);
    let dir = tempfile::tempdir().unwrap();
    let bundle = write_trace(&model, &toks, dir.path(), &TraceField::ALL);
    let c = &model.config;
    let table = DefaultVectorTable::zeros(c.layers, c.experts, c.hidden);
    let report = drift_report(&bundle, &model, &table).unwrap();

    let mut sink = CollectSink::default();
    run_trace(&model, &toks, 64, &mut sink).unwrap();
    let mut want = vec![0.0f64; c.layers - 1];
    for pair in sink.records.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if b.layer != a.layer + 1 {
            continue;
        }
        let q = rms_norm(&a.r, &model.layers[b.layer].moe_norm_gain, c.eps).unwrap();
        want[a.layer] += cosine_similarity(&q, &b.s).unwrap() as f64;
    }
    for (l, q, _) in report {
        assert!((q - want[l] / toks.len() as f64).abs() < 1e-6);
    }
}

#[test]
fn cosine_drift_is_scale_invariant() {
    let model = small(3);
    let mut sink = CollectSink::default();
    run_trace(&model, &random_tokens(5, 10, 64), 64, &mut sink).unwrap();
    let gain = vec![1.0f32; model.config.hidden];
    for pair in sink.records.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if b.layer != a.layer + 1 {
            continue;
        }
        let q = quasi_hidden(&a.r, &a.m, &gain, 1e-12).unwrap();
        let r2: Vec<f32> = a.r.iter().map(|x| x * 4.0).collect();
        let m2: Vec<f32> = a.m.iter().map(|x| x * 4.0).collect();
        let q2 = quasi_hidden(&r2, &m2, &gain, 1e-12).unwrap();
        let c1 = cosine_similarity(&q, &b.s).unwrap();
        let c2 = cosine_similarity(&q2, &b.s).unwrap();
        assert!((c1 - c2).abs() < 1e-5);
    }
}

#[test]
fn oracle_rank_one_alignment_is_perfect() {
    let model = small(4);
    let dir = tempfile::tempdir().unwrap();
    let bundle = write_trace(&model, &random_tokens(6, 60, 64), dir.path(), &TraceField::ALL);
    let table = Arc::new(accumulate_default_vectors(&bundle).unwrap());
    let oracle = Predictor::new(PredictorKind::Oracle, &model, None, None, None).unwrap();
    let rpf = Predictor::new(PredictorKind::RouterPf, &model, Some(table.clone()), None, None).unwrap();
    let mut ev = Evaluator::new(&model, Some(&table));
    ev.track(&oracle, None);
    ev.track(&rpf, None);
    bundle.replay(&mut ev).unwrap();
    let reports = ev.reports();
    for rep in reports[0].1 {
        assert_eq!(rep.recall_at_k.mean, 1.0);
        assert!(rep.rank_match.iter().all(|m| m.mean == 1.0));
    }
    for rep in reports[1].1 {
        assert!((0.0..=1.0).contains(&rep.recall_at_k.mean));
        assert_eq!(rep.recall_at_k.count, 60);
    }
    let csv = ev.hit_rate_csv();
    assert!(csv.starts_with("layer,predictor,recall_at_k\n0,oracle,1\n0,router-pf,"));
}

#[test]
fn untrained_estimator_hits_at_chance() {
    let model = build_model(ModelConfig::toy(7)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let bundle = write_trace(
        &model,
        &random_tokens(8, 10_000, 256),
        dir.path(),
        &[TraceField::S, TraceField::RouterLogits],
    );
    let data = Dataset::from_trace(&bundle, &model, None, InputKind::NextRouterInput).unwrap();
    let est = Estimator::new(EstimatorConfig::for_model(&model, 1)).unwrap();
    let r = evaluate(&est, &data, model.config.gating).unwrap();
    assert_eq!(r.layer_recall.len(), 7);
    for h in r.layer_recall {
        assert!((0.15..=0.35).contains(&h), "{h}");
    }
}

#[test]
fn head_reproducing_the_gate_hits_every_expert() {
    let model = small(9);
    let dir = tempfile::tempdir().unwrap();
    let bundle = write_trace(
        &model,
        &random_tokens(10, 200, 64),
        dir.path(),
        &[TraceField::S, TraceField::RouterLogits],
    );
    let data = Dataset::from_trace(&bundle, &model, None, InputKind::NextRouterInput).unwrap();
    let src = 1u32;
    let mut one = Dataset {
        d: data.d,
        experts: data.experts,
        per_token: 1,
        ..Default::default()
    };
    for i in 0..data.len() {
        if data.layers[i] == src {
            one.inputs.extend_from_slice(data.input(i));
            one.targets.extend_from_slice(data.target(i));
            one.layers.push(src);
        }
    }
    // latent = [G s; -G s] keeps the LayerNorm mean at zero, so the head
    // sees G s up to a positive scale.
    let cfg = EstimatorConfig::for_model(&model, 0);
    let (e, h, r) = (cfg.experts, cfg.d, cfg.latent());
    assert_eq!(r, 2 * e);
    let gate = &model.layers[src as usize + 1].gate;
    let mut est = Estimator::new(cfg.clone()).unwrap();
    let p = &mut est.params;
    p.pos.data.fill(0.0);
    p.b.data.fill(0.0);
    p.c.data.fill(0.0);
    p.ln_gain.fill(1.0);
    p.ln_bias.fill(0.0);
    p.w_head.data.fill(0.0);
    for i in 0..e {
        for j in 0..h {
            p.a.data[i * h + j] = gate.row(i)[j];
            p.a.data[(i + e) * h + j] = -gate.row(i)[j];
        }
        p.w_head.data[i * r + i] = 1.0;
    }
    let res = evaluate(&est, &one, model.config.gating).unwrap();
    assert_eq!(res.mean_recall, 1.0);
}
