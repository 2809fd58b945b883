//! Prediction quality statistics and their CSV forms.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::layers::RouterDecision;
use crate::model::trace::{LayerRecord, TraceBundle, TraceField, TraceSink};
use crate::model::Model;
use crate::numerics::cosine_similarity;
use crate::speculation::{quasi_hidden, DefaultVectorTable, Predictor, PredictorKind};

fn check_k(pred: &RouterDecision, truth: &RouterDecision) -> Result<usize> {
    let k = truth.ids.len();
    if pred.ids.len() != k {
        return Err(Error::shape(format!("k mismatch: {} vs {k}", pred.ids.len())));
    }
    if k == 0 {
        return Err(Error::Empty("decision"));
    }
    Ok(k)
}

/// `|pred ∩ truth| / k`, ignoring gate weights.
pub fn recall_at_k(pred: &RouterDecision, truth: &RouterDecision) -> Result<f64> {
    let k = check_k(pred, truth)?;
    let hits = pred.ids.iter().filter(|e| truth.ids.contains(e)).count();
    Ok(hits as f64 / k as f64)
}

/// Per-rank exact match of the gate-ordered expert lists.
pub fn rank_alignment(pred: &RouterDecision, truth: &RouterDecision) -> Result<Vec<bool>> {
    check_k(pred, truth)?;
    Ok(pred.ids.iter().zip(&truth.ids).map(|(a, b)| a == b).collect())
}

/// Incremental mean in f64.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningMean {
    pub count: u64,
    pub mean: f64,
}

impl RunningMean {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        self.mean += (x - self.mean) / self.count as f64;
    }

    pub fn merge(&mut self, other: &RunningMean) {
        if other.count == 0 {
            return;
        }
        let n = self.count + other.count;
        self.mean += (other.mean - self.mean) * other.count as f64 / n as f64;
        self.count = n;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerReport {
    pub layer: usize,
    pub recall_at_k: RunningMean,
    pub cosine_to_next: RunningMean,
    /// index r holds the match rate at rank r+1
    pub rank_match: Vec<RunningMean>,
}

impl LayerReport {
    pub fn new(layer: usize, k: usize) -> Self {
        Self {
            layer,
            rank_match: vec![RunningMean::default(); k],
            ..Default::default()
        }
    }
}

/// Six significant digits, `%g` style.
pub fn fmt6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mant, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-4..6).contains(&exp) {
        trim(&format!("{:.*}", (5 - exp) as usize, x))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mant), exp.abs())
    }
}

/// What the evaluator tracks for one predictor.
enum Source<'a> {
    Live(&'a Predictor),
    /// true next-layer decision read from the following record
    Oracle,
}

struct Tracked<'a> {
    name: String,
    source: Source<'a>,
    pending: Option<RouterDecision>,
    layers: Vec<LayerReport>,
}

/// Scores predictors against a teacher-forced trace, one source layer at a
/// time, and optionally records quasi-state drift.
pub struct Evaluator<'a> {
    model: &'a Model,
    table: Option<&'a DefaultVectorTable>,
    tracked: Vec<Tracked<'a>>,
    prev: Option<LayerRecord>,
    /// (cos(q_l, s_{l+1}), cos(s_l, s_{l+1})) per source layer
    drift: Vec<(RunningMean, RunningMean)>,
}

impl<'a> Evaluator<'a> {
    pub fn new(model: &'a Model, table: Option<&'a DefaultVectorTable>) -> Self {
        let n = model.config.layers.saturating_sub(1);
        Self {
            model,
            table,
            tracked: Vec::new(),
            prev: None,
            drift: vec![Default::default(); n],
        }
    }

    pub fn track(&mut self, predictor: &'a Predictor, name: Option<&str>) {
        let source = if predictor.kind() == PredictorKind::Oracle {
            Source::Oracle
        } else {
            Source::Live(predictor)
        };
        let c = &self.model.config;
        self.tracked.push(Tracked {
            name: name.unwrap_or(predictor.kind().name()).to_string(),
            source,
            pending: None,
            layers: (0..c.layers.saturating_sub(1))
                .map(|l| LayerReport::new(l, c.top_k))
                .collect(),
        });
    }

    pub fn reports(&self) -> Vec<(&str, &[LayerReport])> {
        self.tracked
            .iter()
            .map(|t| (t.name.as_str(), t.layers.as_slice()))
            .collect()
    }

    pub fn drift(&self) -> &[(RunningMean, RunningMean)] {
        &self.drift
    }

    pub fn hit_rate_csv(&self) -> String {
        let mut s = String::from("layer,predictor,recall_at_k\n");
        let n = self.model.config.layers.saturating_sub(1);
        for l in 0..n {
            for t in &self.tracked {
                let _ = writeln!(s, "{l},{},{}", t.name, fmt6(t.layers[l].recall_at_k.mean));
            }
        }
        s
    }

    /// Rank rows for the first tracked predictor.
    pub fn rank_align_csv(&self) -> String {
        let mut s = String::from("layer,rank,match_rate\n");
        if let Some(t) = self.tracked.first() {
            for rep in &t.layers {
                for (r, m) in rep.rank_match.iter().enumerate() {
                    let _ = writeln!(s, "{},{},{}", rep.layer, r + 1, fmt6(m.mean));
                }
            }
        }
        s
    }

    pub fn drift_csv(&self) -> String {
        let mut s = String::from("layer,cos_quasi,cos_baseline\n");
        for (l, (q, b)) in self.drift.iter().enumerate() {
            let _ = writeln!(s, "{l},{},{}", fmt6(q.mean), fmt6(b.mean));
        }
        s
    }
}

impl TraceSink for Evaluator<'_> {
    fn record(&mut self, rec: &LayerRecord) -> Result<()> {
        let c = &self.model.config;
        if rec.layer > 0 {
            let prev = self
                .prev
                .as_ref()
                .filter(|p| p.layer + 1 == rec.layer)
                .ok_or_else(|| Error::format("layer records out of order"))?;
            let l = prev.layer;
            for t in self.tracked.iter_mut() {
                let pred = match t.source {
                    Source::Oracle => rec.true_decision.clone(),
                    Source::Live(_) => t.pending.take().ok_or_else(|| Error::format("missing prediction"))?,
                };
                let rep = &mut t.layers[l];
                rep.recall_at_k.push(recall_at_k(&pred, &rec.true_decision)?);
                for (m, hit) in rep
                    .rank_match
                    .iter_mut()
                    .zip(rank_alignment(&pred, &rec.true_decision)?)
                {
                    m.push(if hit { 1.0 } else { 0.0 });
                }
            }
            let cos_b = cosine_similarity(&prev.s, &rec.s)? as f64;
            self.drift[l].1.push(cos_b);
            for t in self.tracked.iter_mut() {
                t.layers[l].cosine_to_next.push(cos_b);
            }
            if let Some(table) = self.table {
                let d = table.layer_default(&prev.executed, l)?;
                let q = quasi_hidden(&prev.r, &d, &self.model.layers[rec.layer].moe_norm_gain, c.eps)?;
                self.drift[l].0.push(cosine_similarity(&q, &rec.s)? as f64);
            }
        }
        if rec.layer + 1 < c.layers {
            for t in self.tracked.iter_mut() {
                if let Source::Live(p) = t.source {
                    let pred = p.predict_from_signals(self.model, rec.layer, &rec.s, &rec.r, &rec.executed)?;
                    t.pending = Some(pred.decision);
                }
            }
        }
        self.prev = Some(rec.clone());
        Ok(())
    }

    fn end_token(&mut self, _position: usize) -> Result<()> {
        self.prev = None;
        Ok(())
    }
}

/// Per source layer `(layer, cos(q_l, s_{l+1}), cos(s_l, s_{l+1}))`.
pub fn drift_report(bundle: &TraceBundle, model: &Model, table: &DefaultVectorTable) -> Result<Vec<(usize, f64, f64)>> {
    bundle.require(&[TraceField::S, TraceField::R, TraceField::Ids, TraceField::Gates])?;
    if bundle.manifest.tokens == 0 {
        return Err(Error::Empty("trace"));
    }
    if model.config.layers < 2 {
        return Err(Error::Config("drift needs at least two layers".into()));
    }
    let mut ev = Evaluator::new(model, Some(table));
    bundle.replay(&mut ev)?;
    Ok(ev
        .drift()
        .iter()
        .enumerate()
        .map(|(l, (q, b))| (l, q.mean, b.mean))
        .collect())
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn d(ids: &[usize]) -> RouterDecision {
        RouterDecision {
            ids: ids.to_vec(),
            gates: vec![1.0 / ids.len() as f32; ids.len()],
        }
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&d(&[1, 2, 3, 4]), &d(&[1, 2, 3, 4])).unwrap(), 1.0);
        assert_eq!(recall_at_k(&d(&[1, 2]), &d(&[3, 4])).unwrap(), 0.0);
        assert_eq!(recall_at_k(&d(&[1, 2, 3, 4]), &d(&[3, 4, 5, 6])).unwrap(), 0.5);
        assert!(recall_at_k(&d(&[1]), &d(&[1, 2])).is_err());
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_alignment(&d(&[5, 2]), &d(&[5, 2])).unwrap(), vec![true, true]);
        assert_eq!(rank_alignment(&d(&[5, 2]), &d(&[2, 5])).unwrap(), vec![false, false]);
        assert!(rank_alignment(&d(&[1, 2, 3]), &d(&[1, 2])).is_err());
    }

    #[test]
    fn running_mean_small_cases() {
        let mut m = RunningMean::default();
        m.push(3.5);
        assert_eq!(m.mean, 3.5);
        m.push(1.5);
        assert_eq!(m.mean, 2.5);
    }

    #[test]
    fn running_mean_matches_two_pass_on_1m() {
        let mut rng = Rng::new(9);
        let xs: Vec<f64> = (0..1_000_000).map(|_| 10.0 + rng.normal()).collect();
        let mut m = RunningMean::default();
        let mut parts = [RunningMean::default(), RunningMean::default()];
        for (i, &x) in xs.iter().enumerate() {
            m.push(x);
            parts[(i * 3 / xs.len()).min(1)].push(x);
        }
        let want = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!(((m.mean - want) / want).abs() < 1e-6);
        let mut merged = parts[0];
        merged.merge(&parts[1]);
        assert!(((merged.mean - want) / want).abs() < 1e-6);
    }

    #[test]
    fn fmt6_matches_printf_g() {
        assert_eq!(fmt6(0.0), "0");
        assert_eq!(fmt6(1.0), "1");
        assert_eq!(fmt6(0.25), "0.25");
        assert_eq!(fmt6(1.0 / 3.0), "0.333333");
        assert_eq!(fmt6(123456.7), "123457");
        assert_eq!(fmt6(1234567.0), "1.23457e+06");
        assert_eq!(fmt6(0.0001), "0.0001");
        assert_eq!(fmt6(0.00001234), "1.234e-05");
        assert_eq!(fmt6(-2.5), "-2.5");
        assert_eq!(fmt6(999999.6), "1e+06");
        assert_eq!(fmt6(0.9999996), "1");
    }

    fn random_decision(rng: &mut Rng, e: usize, k: usize) -> RouterDecision {
        let mut ids: Vec<usize> = (0..e).collect();
        rng.shuffle(&mut ids);
        ids.truncate(k);
        d(&ids)
    }

    #[test]
    fn rank_means_match_recount_over_10k_pairs() {
        let mut rng = Rng::new(4);
        let (e, k) = (8, 3);
        let pairs: Vec<_> = (0..10_000)
            .map(|_| (random_decision(&mut rng, e, k), random_decision(&mut rng, e, k)))
            .collect();
        let mut means = vec![RunningMean::default(); k];
        for (a, b) in &pairs {
            for (m, hit) in means.iter_mut().zip(rank_alignment(a, b).unwrap()) {
                m.push(hit as u8 as f64);
            }
        }
        for r in 0..k {
            let hits = pairs.iter().filter(|(a, b)| a.ids[r] == b.ids[r]).count();
            assert_eq!(hits as u64, (means[r].mean * 10_000.0).round() as u64);
            assert!((means[r].mean - hits as f64 / 10_000.0).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn recall_matches_recount_and_is_symmetric(seed in any::<u64>(), e in 1usize..20, kf in 0.0f64..1.0) {
            let mut rng = Rng::new(seed);
            let k = 1 + ((e - 1) as f64 * kf) as usize;
            let a = random_decision(&mut rng, e, k);
            let b = random_decision(&mut rng, e, k);
            let r = recall_at_k(&a, &b).unwrap();
            let brute = (0..e).filter(|x| a.ids.contains(x) && b.ids.contains(x)).count() as f64 / k as f64;
            prop_assert_eq!(r, brute);
            prop_assert_eq!(r, recall_at_k(&b, &a).unwrap());
            let mut perm = a.clone();
            rng.shuffle(&mut perm.ids);
            prop_assert_eq!(recall_at_k(&perm, &b).unwrap(), r);
            prop_assert!((0.0..=1.0).contains(&r));
        }

        #[test]
        fn rank_alignment_matches_recount(seed in any::<u64>(), e in 1usize..12) {
            let mut rng = Rng::new(seed);
            let k = 1 + rng.below(e);
            let a = random_decision(&mut rng, e, k);
            let b = random_decision(&mut rng, e, k);
            let got = rank_alignment(&a, &b).unwrap();
            for r in 0..k {
                prop_assert_eq!(got[r], a.ids[r] == b.ids[r]);
            }
            prop_assert!(rank_alignment(&a, &a).unwrap().iter().all(|&x| x));
        }
    }
}
