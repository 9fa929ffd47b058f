//! Exact-reference checks of the deterministic components.

use std::time::Instant;

use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::analysis::{build_mask, keep_count, max_pool_into, taylor_scores, LayerSaliency, SaliencyMap};
use crate::autodiff::{Real, Tape, Tensor};
use crate::batcher::pack;
use crate::corpus::{CorpusManifest, LanguageEntry, SampleRecord, Tier};
use crate::metrics::{cer, exact_dtw, FastDtw};
use crate::model::{Model, ModelConfig, Utterance};
use crate::sampler::{compute_distribution, LanguageSampler};
use crate::schedule::ScheduleConfig;
use crate::tokenizer::{decode, encode};

pub(super) type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// A code point whose UTF-8 form has `width` bytes.
fn random_char(rng: &mut impl Rng, width: usize) -> char {
    loop {
        let cp = match width {
            1 => rng.gen_range(0x00..0x80),
            2 => rng.gen_range(0x80..0x800),
            3 => rng.gen_range(0x800..0x10000),
            _ => rng.gen_range(0x10000..0x110000),
        };
        if let Some(c) = char::from_u32(cp) {
            return c;
        }
    }
}

pub(super) fn tokenizer(seed: u64) -> Check {
    let t = Instant::now();
    let mut rng = crate::rng_for(seed, &["suite", "tokenizer"]);
    for i in 0..10_000 {
        let n = rng.gen_range(0..40);
        let s: String = (0..n).map(|_| { let w = rng.gen_range(1..=4); random_char(&mut rng, w) }).collect();
        let seq = encode(&s);
        if seq.len() != s.len() + 2 || decode(&seq).as_deref() != Ok(s.as_str()) {
            return Err(format!("string {i} failed: {s:?}"));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 5.0, format!("10000 strings in {secs:.2}s"))
}

/// `p_i` in the log domain, independent of the direct power form.
fn log_domain(counts: &[usize], alpha: f64) -> Vec<f64> {
    let total: f64 = counts.iter().map(|&n| n as f64).sum();
    let logs: Vec<f64> = counts.iter().map(|&n| alpha * (n as f64 / total).ln()).collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logs.iter().map(|l| (l - top).exp()).sum();
    logs.iter().map(|l| (l - top).exp() / z).collect()
}

fn manifest(counts: &[usize]) -> CorpusManifest {
    let mut next = 0;
    let mut m = CorpusManifest { languages: Vec::new(), index: Default::default() };
    for (i, &n) in counts.iter().enumerate() {
        let id = format!("l{i}");
        m.index.insert(id.clone(), (next..next + n).collect());
        m.languages.push(LanguageEntry { id, tier: Tier::T1, n_samples: n, speakers: vec![] });
        next += n;
    }
    m
}

pub(super) fn sampler(seed: u64) -> Check {
    let mut rng = crate::rng_for(seed, &["suite", "sampler"]);
    let mut worst: f64 = 0.0;
    let mut min_pvalue: f64 = 1.0;
    for _ in 0..20 {
        let k = rng.gen_range(2..8);
        let counts: Vec<usize> = (0..k).map(|_| rng.gen_range(1..5000)).collect();
        let named: Vec<(String, usize)> = counts.iter().enumerate().map(|(i, &n)| (format!("l{i}"), n)).collect();
        for alpha in [0.2, 0.5, 1.0] {
            let d = compute_distribution(&named, alpha, None).map_err(|e| e.to_string())?;
            for (p, q) in d.p.iter().zip(log_domain(&counts, alpha)) {
                worst = worst.max((p - q).abs());
            }
        }
        let d = compute_distribution(&named, 0.2, None).map_err(|e| e.to_string())?;
        let mut s = LanguageSampler::new(d.clone(), &manifest(&counts)).map_err(|e| e.to_string())?;
        let mut freq = vec![0usize; k];
        let draws = 100_000;
        for _ in 0..draws {
            freq[s.next(&mut rng).0] += 1;
        }
        let chi2: f64 = freq.iter().zip(&d.p).map(|(&o, &p)| (o as f64 - p * draws as f64).powi(2) / (p * draws as f64)).sum();
        let pvalue = 1.0 - ChiSquared::new((k - 1) as f64).expect("positive dof").cdf(chi2);
        min_pvalue = min_pvalue.min(pvalue);
    }
    let mut override_err: f64 = 0.0;
    for pt in [0.25, 0.1] {
        let named: Vec<(String, usize)> = [2000, 500, 100, 10].iter().enumerate().map(|(i, &n)| (format!("l{i}"), n)).collect();
        let d = compute_distribution(&named, 0.2, Some(("l3", pt))).map_err(|e| e.to_string())?;
        let hits = (0..100_000).filter(|_| d.draw_language(&mut rng) == 3).count();
        override_err = override_err.max((hits as f64 / 1e5 - pt).abs());
    }
    ensure(
        worst <= 1e-12 && min_pvalue > 0.001 && override_err <= 0.01,
        format!("max |p - ref| {worst:.1e}; min chi2 p-value {min_pvalue:.4}; override error {override_err:.4}"),
    )
}

pub(super) fn schedule() -> Check {
    let s = ScheduleConfig::default().build().map_err(|e| e.to_string())?;
    let ends = s.lr.rate(0) == 1e-3 && s.lr.rate(s.lr.horizon) == 1e-5;
    let mut resets = true;
    let mut tiers = true;
    let table = [(0usize, 30_000u64), (1, 350_000), (2, 650_000)];
    for (i, full) in table {
        let t = (full as f64 * 0.001).round() as u64;
        resets &= s.learning_rate(t) == 1e-3 && s.learning_rate(t + 1) < 1e-3;
        let expected = |step: u64| table.iter().filter(|(_, f)| (*f as f64 * 0.001).round() as u64 <= step).count();
        for step in [t - 1, t, t + 1] {
            tiers &= s.active_tiers(step).len() == expected(step);
        }
        tiers &= s.active_tiers(t).contains(&Tier::SOURCES[i]) && !s.active_tiers(t - 1).contains(&Tier::SOURCES[i]);
    }
    ensure(ends && resets && tiers, format!("lr endpoints {ends}, resets {resets}, tier table {tiers}"))
}

fn record(frames: usize) -> SampleRecord {
    SampleRecord {
        language_id: "xx".into(),
        speaker_id: "xx-s0".into(),
        text: "x".into(),
        frames: Tensor::zeros(frames, 1),
        phoneme_ref: Vec::new(),
    }
}

pub(super) fn batcher(seed: u64) -> Check {
    let mut rng = crate::rng_for(seed, &["suite", "batcher"]);
    for trial in 0..1000 {
        let budget = rng.gen_range(20..400);
        let n = rng.gen_range(0..200);
        let recs: Vec<SampleRecord> = (0..n).map(|_| record(rng.gen_range(1..=budget))).collect();
        let batches = pack(&recs, budget).map_err(|e| e.to_string())?;
        let flat: Vec<*const SampleRecord> = batches.iter().flat_map(|b| b.records.iter().map(|r| *r as *const _)).collect();
        let orig: Vec<*const SampleRecord> = recs.iter().map(|r| r as *const _).collect();
        let ok = flat == orig
            && batches.iter().enumerate().all(|(i, b)| {
                b.total_frames <= budget
                    && batches.get(i + 1).map_or(true, |nb| b.total_frames + nb.records[0].n_frames() > budget)
            });
        if !ok {
            return Err(format!("stream {trial} violates an invariant"));
        }
    }
    Ok("1000 streams".into())
}

pub(super) fn gradient_config() -> ModelConfig {
    ModelConfig {
        enc_layers: 2,
        dec_layers: 2,
        heads: 2,
        d_model: 8,
        d_ff: 12,
        d_mel: 3,
        postnet_layers: 2,
        postnet_channels: 4,
        postnet_kernel: 3,
        prenet_dim: 6,
        lang_embed_dim: 3,
        speaker_embed_dim: 3,
        languages: vec!["xx".into(), "yy".into()],
        speakers: vec!["s0".into(), "s1".into()],
        seed: 11,
        ..ModelConfig::default()
    }
}

pub(super) fn gradients(seed: u64) -> Check {
    let t = Instant::now();
    let mut model: Model<f64> = Model::new(gradient_config()).map_err(|e| e.to_string())?;
    let mut rng = crate::rng_for(seed, &["suite", "gradients"]);
    for name in model.param_names().to_vec() {
        for v in &mut model.param_mut(&name).expect("known").data {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    let frames_a = Tensor::from_fn(4, 3, |_, _| rng.gen_range(-1.0f32..1.0));
    let frames_b = Tensor::from_fn(2, 3, |_, _| rng.gen_range(-1.0f32..1.0));
    let batch = [
        Utterance { frames: Some(&frames_a), ..Utterance::text("héj", "xx", "s0") },
        Utterance { frames: Some(&frames_b), ..Utterance::text("ab", "yy", "s1") },
    ];
    let analytic = model.gradients(&batch).map_err(|e| e.to_string())?.param_grads;
    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    for (pi, name) in model.param_names().to_vec().iter().enumerate() {
        for k in 0..analytic[pi].data.len() {
            let orig = model.params()[pi].data[k];
            model.param_mut(name).expect("known").data[k] = orig + h;
            let up = model.evaluate_loss(&batch).map_err(|e| e.to_string())?.total;
            model.param_mut(name).expect("known").data[k] = orig - h;
            let down = model.evaluate_loss(&batch).map_err(|e| e.to_string())?.total;
            model.param_mut(name).expect("known").data[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi].data[k].as_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{k}]"));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(
        worst.0 < 1e-4 && secs < 60.0,
        format!("{} parameters, worst relative error {:.2e} at {} in {secs:.1}s", model.n_parameters(), worst.0, worst.1),
    )
}

/// Quadratic edit-distance table.
fn edit_distance(a: &[u8], b: &[u8]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]));
        }
    }
    d[a.len()][b.len()]
}

pub(super) fn dtw(seed: u64) -> Check {
    let mut rng = crate::rng_for(seed, &["suite", "dtw"]);
    let seq = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| Tensor::from_fn(n, 3, |_, _| rng.gen_range(-1.0f32..1.0));
    let wide = FastDtw { radius: 40, exact_below: 0 };
    let narrow = FastDtw { radius: 1, exact_below: 0 };
    let (mut equal, mut bounded) = (0, 0);
    for _ in 0..500 {
        let (n, m) = (rng.gen_range(1..=20), rng.gen_range(1..=20));
        let (a, b) = (seq(&mut rng, n), seq(&mut rng, m));
        let exact = exact_dtw(&a, &b).0;
        let fast = wide.align(&a, &b).map_err(|e| e.to_string())?.0;
        equal += usize::from((fast - exact).abs() <= 1e-9 * exact.max(1.0));
        let approx = narrow.align(&a, &b).map_err(|e| e.to_string())?.0;
        bounded += usize::from(approx >= exact - 1e-9 * exact.max(1.0));
    }
    let mut cer_ok = 0;
    for _ in 0..1000 {
        let h: Vec<u8> = (0..rng.gen_range(0..15)).map(|_| rng.gen_range(0..4)).collect();
        let r: Vec<u8> = (0..rng.gen_range(1..15)).map(|_| rng.gen_range(0..4)).collect();
        let want = edit_distance(&h, &r) as f64 / r.len() as f64;
        cer_ok += usize::from(cer(&h, &r).map_err(|e| e.to_string())? == want);
    }
    ensure(
        equal == 500 && bounded == 500 && cer_ok == 1000,
        format!("exact {equal}/500, radius-1 bound {bounded}/500, CER {cer_ok}/1000"),
    )
}

pub(super) fn saliency(seed: u64) -> Check {
    let mut rng = crate::rng_for(seed, &["suite", "saliency"]);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (t, din, w, dout) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..8), rng.gen_range(1..5));
        let x = Tensor::from_fn(t, din, |_, _| rng.gen_range(-1.0..1.0));
        let w1 = Tensor::from_fn(din, w, |_, _| rng.gen_range(-1.0..1.0));
        let w2 = Tensor::from_fn(w, dout, |_, _| rng.gen_range(-1.0..1.0));
        let v = Tensor::from_fn(t, dout, |_, _| rng.gen_range(-1.0..1.0));
        let loss_of = |h: &Tensor<f64>| -> f64 { h.matmul(&w2).data.iter().zip(&v.data).map(|(a, b)| a * b).sum() };
        let mut tape: Tape<f64> = Tape::new();
        let xv = tape.constant(x.clone());
        let w1v = tape.param(w1.clone());
        let h = tape.matmul(xv, w1v);
        let w2v = tape.param(w2.clone());
        let y = tape.matmul(h, w2v);
        let vv = tape.constant(v.clone());
        let prod = tape.mul(y, vv);
        let l = tape.sum(prod);
        let grads = tape.backward(l);
        let hv = tape.value(h).clone();
        let theta = taylor_scores(&hv, grads.get(h).expect("tapped"));
        let base = loss_of(&hv);
        for r in 0..t {
            for c in 0..w {
                let mut z = hv.clone();
                z.set(r, c, 0.0);
                worst = worst.max((theta.at(r, c) - (base - loss_of(&z)).abs()).abs());
            }
        }
        if t == 1 {
            let mut pooled = vec![0.0; w];
            max_pool_into(&mut pooled, &theta);
            for (c, p) in pooled.iter().enumerate() {
                let mut z = hv.clone();
                z.set(0, c, 0.0);
                worst = worst.max((p - (base - loss_of(&z)).abs()).abs());
            }
        }
    }
    let model: Model<f32> = Model::new(gradient_config()).map_err(|e| e.to_string())?;
    let mut cardinality = true;
    for _ in 0..20 {
        let ratio = rng.gen_range(0.05..0.95);
        let mut layers: Vec<LayerSaliency> = model
            .layers()
            .iter()
            .map(|l| LayerSaliency { name: l.name.clone(), values: (0..l.width).map(|_| rng.gen_range(0.0..1.0)).collect(), active: l.width })
            .collect();
        let odd = rng.gen_range(1..40);
        layers.push(LayerSaliency { name: "odd".into(), values: vec![0.5; odd], active: odd });
        let map = SaliencyMap { language: "xx".into(), n_samples: 1, checkpoint_hash: String::new(), layers };
        let mask = build_mask(&map, ratio).map_err(|e| e.to_string())?;
        cardinality &= map.layers.iter().all(|l| mask.keep_count(&l.name) == Some(keep_count(l.values.len(), ratio)));
        cardinality &= map.layers.iter().all(|l| keep_count(l.values.len(), ratio) == (ratio * l.values.len() as f64).ceil() as usize);
    }
    ensure(worst <= 1e-8 && cardinality, format!("max |theta - dL| {worst:.1e}; cardinality exact {cardinality}"))
}
