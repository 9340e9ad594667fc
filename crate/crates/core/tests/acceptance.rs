//! Acceptance gate: ten criteria, one PASS/FAIL line each, with runtime limits.
//! Run with `cargo test -p lvid-core --test acceptance`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::Value;

use lvid_core::budget::{self, Compression, TokenBudget};
use lvid_core::gradcheck::{self, GradCheckOptions, Sizes};
use lvid_core::rope::{rope_apply, rope_inner, RopeConfig};
use lvid_core::store::{self, parse_config, StoreError};
use lvid_core::tensor::{seeded_rng, Tensor};
use lvid_core::token::{
    admissible_counts, context_embedding, context_token, heatmap, pooled_content, top_responses, AttentionRecord,
    Projector, TextQuery, VisualEmbedding,
};
use lvid_core::toy::{train_toy, ToyConfig};

type Check = Result<String, String>;
type Fixture = (&'static str, Vec<u8>, fn(&StoreError) -> bool);
type Criterion = (&'static str, fn() -> Check, Duration);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::rand_uniform(shape.to_vec(), -1.0, 1.0, rng).unwrap()
}

/// Softmax over patches per query, then the mean over queries, term by term.
fn looped_context(q: &[f32], x: &[f32], m: usize, n: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; c];
    for i in 0..m {
        let mut logits = vec![0.0f64; n];
        for (j, l) in logits.iter_mut().enumerate() {
            let mut dot = 0.0;
            for k in 0..c {
                dot += q[i * c + k] as f64 * x[j * c + k] as f64;
            }
            *l = dot / (c as f64).sqrt();
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            for k in 0..c {
                out[k] += e / z * x[j * c + k] as f64 / m as f64;
            }
        }
    }
    out
}

fn looped_affine(v: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (c, d) = (w.shape()[0], w.shape()[1]);
    (0..d)
        .map(|o| b.data()[o] as f64 + (0..c).map(|k| v[k] * w.data()[k * d + o] as f64).sum::<f64>())
        .collect()
}

fn criterion_1() -> Check {
    let mut rng = seeded_rng(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (m, s, c) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=32));
        let n = s * s;
        let d = rng.gen_range(1..=16);
        let q = TextQuery::new(uniform(&[m, c], &mut rng)).unwrap();
        let x = VisualEmbedding::new(uniform(&[n, c], &mut rng)).unwrap();
        let proj = Projector::init(c, d, &mut rng).unwrap();
        let oracle = looped_context(q.values().data(), x.values().data(), m, n, c);
        let (e, _) = context_embedding(&q, &x).unwrap();
        let (token, _) = context_token(&q, &x, &proj).unwrap();
        let token_oracle = looped_affine(&oracle, &proj.weight, &proj.bias);
        for (a, b) in e.data().iter().zip(&oracle).chain(token.data().iter().zip(&token_oracle)) {
            worst = worst.max((*a as f64 - b).abs());
        }
    }
    ensure(worst < 1e-6, || format!("max abs diff {worst:e}"))?;
    Ok(format!("100 instances, max abs diff {worst:.2e}"))
}

fn criterion_2() -> Check {
    let mut summary = Vec::new();
    for sizes in [Sizes::Small, Sizes::Large] {
        let report = gradcheck::run(&GradCheckOptions {
            seed: 0,
            sizes,
            inject_fault: false,
        })
        .map_err(|e| e.to_string())?;
        for g in &report.groups {
            ensure(g.passed, || format!("{:?} {}/{}: {:e}", sizes, g.suite, g.group, g.max_rel_error))?;
        }
        let suites: std::collections::BTreeSet<&str> = report.groups.iter().map(|g| g.suite.as_str()).collect();
        ensure(suites.len() == 3, || format!("suites {suites:?}"))?;
        summary.push(format!("{sizes:?} {} groups max {:.1e}", report.groups.len(), report.max_rel_error));
    }
    Ok(summary.join(", "))
}

fn criterion_3() -> Check {
    let c224 = parse_config(r#"{"image_side": 224, "p": 14}"#).map_err(|e| e.to_string())?;
    let c336 = parse_config(r#"{"image_side": 336, "p": 14}"#).map_err(|e| e.to_string())?;
    ensure(c224.patches() == 256, || format!("224/14 gives {}", c224.patches()))?;
    ensure(c336.patches() == 576, || format!("336/14 gives {}", c336.patches()))?;
    let grid = admissible_counts(16);
    ensure(grid == [1, 4, 16, 64, 256], || format!("grid {grid:?}"))?;

    let intro = TokenBudget {
        tokens_per_frame: 32,
        ..TokenBudget::default()
    };
    let r = budget::pack_frames(10_000, &intro).map_err(|e| e.to_string())?;
    ensure(r.total_tokens == 320_000, || format!("intro total {}", r.total_tokens))?;
    ensure(r.total_tokens >= 320_000 && !r.fits, || "intro should overflow 64K".into())?;

    let long = TokenBudget::default();
    let r = budget::pack(3.0 * 3600.0, &long).map_err(|e| e.to_string())?;
    ensure(r.frame_count == 10_800 && r.total_tokens == 21_600, || format!("3 h total {}", r.total_tokens))?;
    ensure(r.total_tokens <= 65_536 && r.fits, || "3 h should fit".into())?;
    Ok("256 / 576 patches, grid {1,4,16,64,256}, 320000 tokens, 21600 <= 65536".into())
}

fn criterion_4() -> Check {
    let mut rng = seeded_rng(404);
    let mut worst = 0.0f32;
    for _ in 0..50 {
        let s = *[2usize, 4, 6, 8, 16].choose(&mut rng).unwrap();
        let c = rng.gen_range(1..=16);
        let n = s * s;
        let x = VisualEmbedding::new(uniform(&[n, c], &mut rng)).unwrap();

        let global = x.values().mean(0).unwrap().reshape(vec![1, c]).unwrap();
        let one = pooled_content(&x, 1).map_err(|e| e.to_string())?;
        worst = worst.max(one.max_abs_diff(&global));

        let all = pooled_content(&x, n).map_err(|e| e.to_string())?;
        worst = worst.max(all.max_abs_diff(x.values()));

        let four = pooled_content(&x, 4).map_err(|e| e.to_string())?;
        let telescoped = four.mean(0).unwrap().reshape(vec![1, c]).unwrap();
        worst = worst.max(telescoped.max_abs_diff(&one));
    }
    ensure(worst < 1e-6, || format!("max abs diff {worst:e}"))?;
    Ok(format!("50 embeddings, max abs diff {worst:.2e}"))
}

fn criterion_5() -> Check {
    let mut rng = seeded_rng(505);
    let (mut perm_worst, mut hull_worst) = (0.0f32, 0.0f32);
    for _ in 0..100 {
        let (m, s, c) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=32));
        let n = s * s;
        let q = TextQuery::new(uniform(&[m, c], &mut rng)).unwrap();
        let xt = uniform(&[n, c], &mut rng);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let x = VisualEmbedding::new(xt.clone()).unwrap();
        let xp = VisualEmbedding::new(xt.select_rows(&order).unwrap()).unwrap();
        let (e, _) = context_embedding(&q, &x).unwrap();
        let (ep, _) = context_embedding(&q, &xp).unwrap();
        perm_worst = perm_worst.max(e.max_abs_diff(&ep));
        for k in 0..c {
            let col: Vec<f32> = (0..n).map(|j| xt.data()[j * c + k]).collect();
            let lo = col.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = col.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let v = e.data()[k];
            hull_worst = hull_worst.max(lo - v).max(v - hi);
        }
    }
    ensure(perm_worst < 1e-6, || format!("permutation diff {perm_worst:e}"))?;
    ensure(hull_worst < 1e-6, || format!("hull violation {hull_worst:e}"))?;
    Ok(format!("100 instances, permutation diff {perm_worst:.2e}, hull excess {:.2e}", hull_worst.max(0.0)))
}

fn norm_f64(t: &Tensor) -> f64 {
    t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
}

fn criterion_6() -> Check {
    let mut rng = seeded_rng(606);
    let (mut norm_worst, mut rel_worst, mut ident_worst) = (0.0f64, 0.0f64, 0.0f32);
    for _ in 0..200 {
        let d = 2 * rng.gen_range(1..=32);
        let cfg = RopeConfig::new(d);
        let (q, k) = (uniform(&[d], &mut rng), uniform(&[d], &mut rng));

        let interp = rng.gen_bool(0.5);
        let p = rng.gen_range(0..=65_536);
        let r = rope_apply(&q, p, &cfg, interp).map_err(|e| e.to_string())?;
        norm_worst = norm_worst.max((norm_f64(&r) - norm_f64(&q)).abs());

        let offset = rng.gen_range(0..=4096usize);
        let (m, n) = (rng.gen_range(0..=4096 - offset), rng.gen_range(0..=4096 - offset));
        let a = rope_inner(&q, &k, m, n, &cfg, false).unwrap();
        let b = rope_inner(&q, &k, m + offset, n + offset, &cfg, false).unwrap();
        rel_worst = rel_worst.max((a - b).abs());

        let offset = rng.gen_range(0..=65_536usize);
        let (m, n) = (rng.gen_range(0..=65_536 - offset), rng.gen_range(0..=65_536 - offset));
        let a = rope_inner(&q, &k, m, n, &cfg, true).unwrap();
        let b = rope_inner(&q, &k, m + offset, n + offset, &cfg, true).unwrap();
        rel_worst = rel_worst.max((a - b).abs());

        let unit = RopeConfig {
            target_max_pos: cfg.original_max_pos,
            ..cfg.clone()
        };
        let p = rng.gen_range(0..=4096);
        let with = rope_apply(&q, p, &unit, true).unwrap();
        let without = rope_apply(&q, p, &unit, false).unwrap();
        ident_worst = ident_worst.max(with.max_abs_diff(&without));
    }
    ensure(norm_worst < 1e-6, || format!("norm drift {norm_worst:e}"))?;
    ensure(rel_worst < 1e-6, || format!("relative-position drift {rel_worst:e}"))?;
    ensure(ident_worst == 0.0, || format!("scale-1 interpolation differs by {ident_worst:e}"))?;
    Ok(format!("norm {norm_worst:.1e}, relative {rel_worst:.1e}, scale-1 identity exact"))
}

fn random_budget(rng: &mut impl Rng) -> TokenBudget {
    let tokens_per_frame = rng.gen_range(1..=600);
    let subtitle = if rng.gen_bool(0.5) { rng.gen_range(0..=64) } else { 0 };
    let overhead = rng.gen_range(0..=2000);
    let reserve = rng.gen_range(0..=1000);
    let fixed = overhead + reserve + tokens_per_frame + subtitle;
    TokenBudget {
        fps: *[0.1, 0.2, 0.5, 1.0, 2.0, 3.0, 24.0, 29.97, 0.3, 1.0 / 3.0].choose(rng).unwrap(),
        tokens_per_frame,
        subtitle_tokens_per_frame: subtitle,
        prompt_overhead_tokens: overhead,
        context_window: fixed + rng.gen_range(0..=200_000),
        answer_reserve_tokens: reserve,
    }
}

fn criterion_7() -> Check {
    let mut rng = seeded_rng(707);
    for i in 0..200 {
        let b = random_budget(&mut rng);
        let d = budget::max_duration(&b).map_err(|e| e.to_string())?;
        let frames = budget::max_frames(&b).map_err(|e| e.to_string())?;
        let r = budget::pack(d, &b).map_err(|e| format!("budget {i}: {e}"))?;
        ensure(r.fits && r.frame_count == frames, || format!("budget {i} {b:?}: pack(max) = {r:?}"))?;
        let over = budget::pack_frames(frames + 1, &b).unwrap();
        ensure(!over.fits, || format!("budget {i} {b:?}: one more frame still fits"))?;

        let grid_side = *[1usize, 4, 8, 12, 16, 24].choose(&mut rng).unwrap();
        let duration = rng.gen_range(1.0..20_000.0);
        let got = budget::required_compression(duration, &b, grid_side).map_err(|e| e.to_string())?;
        let frames_needed = (duration * b.fps).floor() as u64;
        let oracle = (1..=grid_side * grid_side)
            .filter(|&n| {
                let side = (n as f64).sqrt().round() as usize;
                side * side == n && grid_side.is_multiple_of(side)
            })
            .filter(|&n| {
                let per = n as u64 + 1 + b.subtitle_tokens_per_frame;
                frames_needed * per + b.prompt_overhead_tokens + b.answer_reserve_tokens <= b.context_window
            })
            .max();
        let chosen = match got {
            Compression::Fits { n, .. } => Some(n),
            Compression::Infeasible { .. } => None,
        };
        ensure(chosen == oracle, || format!("budget {i} grid {grid_side} duration {duration}: {chosen:?} vs {oracle:?}"))?;
    }
    Ok("200 budgets: pack(max_duration) fits, +1 frame overflows, compression matches enumeration".into())
}

fn criterion_8() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = seeded_rng(808);
    let big = Tensor::rand_normal(vec![100, 100, 100], 0.0, 3.0, &mut rng).unwrap();
    let shapes: [&[usize]; 4] = [&[1], &[7, 3], &[2, 3, 4, 5], &[1, 1, 1, 1, 9]];
    let mut tensors: Vec<Tensor> = shapes.iter().map(|s| uniform(s, &mut rng)).collect();
    tensors.push(big);
    for (i, t) in tensors.iter().enumerate() {
        let path = dir.path().join(format!("t{i}.lvt"));
        store::write_tensor(t, &path).map_err(|e| e.to_string())?;
        let back = store::read_tensor(&path).map_err(|e| e.to_string())?;
        let same_bits = back.shape() == t.shape()
            && back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same_bits, || format!("tensor {i} {:?} not bit-identical", t.shape()))?;
    }

    let good = store::encode_tensor(&Tensor::full(vec![4, 4], 0.5).unwrap());
    let mut bad_magic = good.clone();
    bad_magic[..4].copy_from_slice(b"NOPE");
    let short_header = good[..10].to_vec();
    let short_payload = good[..good.len() - 3].to_vec();
    let fixtures: [Fixture; 3] = [
        ("bad_magic", bad_magic, |e| matches!(e, StoreError::BadMagic { .. })),
        ("truncated_header", short_header, |e| matches!(e, StoreError::TruncatedHeader { .. })),
        ("truncated_payload", short_payload, |e| matches!(e, StoreError::TruncatedPayload { .. })),
    ];
    for (name, bytes, expected) in fixtures {
        let path = dir.path().join(format!("{name}.lvt"));
        std::fs::write(&path, &bytes).map_err(|e| e.to_string())?;
        match store::read_tensor(&path) {
            Err(e) if expected(&e) => {}
            other => return Err(format!("{name}: got {other:?}")),
        }
    }
    Ok("5 round trips bit-identical (largest 1e6 elements), 3 malformed fixtures rejected".into())
}

fn criterion_9() -> Check {
    let cfg = ToyConfig::default();
    let open = train_toy(&cfg).map_err(|e| e.to_string())?;
    let r = &open.report;
    ensure(r.steps <= 500, || format!("{} steps", r.steps))?;
    ensure(r.final_loss < 0.1 * r.initial_loss, || {
        format!("loss {} -> {} (ratio {})", r.initial_loss, r.final_loss, r.loss_ratio)
    })?;
    ensure(open.decoder_after != open.decoder_before, || "open decoder did not train".into())?;
    let window_best: Vec<f64> = r.losses.chunks(50).map(|w| w.iter().cloned().fold(f64::INFINITY, f64::min)).collect();
    ensure(window_best.windows(2).all(|w| w[1] <= w[0]), || format!("window minima rose: {window_best:?}"))?;

    let frozen = train_toy(&ToyConfig {
        open_decoder: false,
        ..cfg
    })
    .map_err(|e| e.to_string())?;
    let before: Vec<u32> = frozen
        .decoder_before
        .named_tensors()
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
        .collect();
    let after: Vec<u32> = frozen
        .decoder_after
        .named_tensors()
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
        .collect();
    ensure(before == after && frozen.report.decoder_unchanged, || "frozen decoder changed".into())?;
    Ok(format!(
        "loss {:.4} -> {:.5} (ratio {:.4}); frozen decoder bit-identical",
        r.initial_loss, r.final_loss, r.loss_ratio
    ))
}

/// Repeatedly takes the highest remaining score, lowest index first.
fn selection_oracle(row: &[f32], k: usize) -> Vec<(usize, f32)> {
    let lo = row.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let score = |v: f32| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    let mut taken = vec![false; row.len()];
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, &v) in row.iter().enumerate() {
            if taken[i] {
                continue;
            }
            if best.is_none_or(|b| score(v) > score(row[b])) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push((b, score(row[b])));
    }
    out
}

/// Checks a heatmap document against its schema:
/// `{query_index: uint, k: uint, entries: [{patch, row, col: uint, score: number in [0,1]}]}`
/// with exactly those keys, `k` entries, `row = patch / S`, `col = patch % S`,
/// distinct patches and non-increasing scores.
fn validate_heatmap(doc: &Value, grid_side: u64, patches: u64) -> Result<(), String> {
    let obj = doc.as_object().ok_or("document is not an object")?;
    let keys: Vec<&str> = obj.keys().map(String::as_str).collect();
    let mut sorted = keys.clone();
    sorted.sort_unstable();
    ensure(sorted == ["entries", "k", "query_index"], || format!("top-level keys {keys:?}"))?;
    obj["query_index"].as_u64().ok_or("query_index is not an unsigned integer")?;
    let k = obj["k"].as_u64().ok_or("k is not an unsigned integer")?;
    let entries = obj["entries"].as_array().ok_or("entries is not an array")?;
    ensure(entries.len() as u64 == k, || format!("{} entries for k = {k}", entries.len()))?;
    let mut seen = std::collections::HashSet::new();
    let mut prev = f64::INFINITY;
    for e in entries {
        let e = e.as_object().ok_or("entry is not an object")?;
        let mut ek: Vec<&str> = e.keys().map(String::as_str).collect();
        ek.sort_unstable();
        ensure(ek == ["col", "patch", "row", "score"], || format!("entry keys {ek:?}"))?;
        let field = |name: &str| e[name].as_u64().ok_or(format!("{name} is not an unsigned integer"));
        let (patch, row, col) = (field("patch")?, field("row")?, field("col")?);
        let score = e["score"].as_f64().ok_or("score is not a number")?;
        ensure(patch < patches && seen.insert(patch), || format!("bad or repeated patch {patch}"))?;
        ensure(row == patch / grid_side && col == patch % grid_side, || format!("patch {patch} at ({row}, {col})"))?;
        ensure((0.0..=1.0).contains(&score) && score <= prev, || format!("score {score} after {prev}"))?;
        prev = score;
    }
    Ok(())
}

fn criterion_10() -> Check {
    let mut rng = seeded_rng(1010);
    for i in 0..100 {
        let s = rng.gen_range(1..=16);
        let (m, n) = (rng.gen_range(1..=8), s * s);
        let coarse = rng.gen_bool(0.5);
        let data: Vec<f32> = (0..m * n)
            .map(|_| {
                if coarse {
                    rng.gen_range(0..4) as f32
                } else {
                    rng.gen_range(-5.0..5.0)
                }
            })
            .collect();
        let logits = Tensor::new(vec![m, n], data).unwrap();
        let rec = AttentionRecord {
            weights: logits.softmax(1).unwrap(),
            logits,
            grid_side: s,
        };
        let qi = rng.gen_range(0..m);
        let k = rng.gen_range(1..=n);
        let got = top_responses(&rec, qi, k).map_err(|e| e.to_string())?;
        let want = selection_oracle(rec.logits.row(qi), k);
        ensure(got == want, || format!("record {i}: {got:?} vs {want:?}"))?;

        let doc = serde_json::to_value(heatmap(&rec, qi, k).map_err(|e| e.to_string())?).unwrap();
        validate_heatmap(&doc, s as u64, n as u64).map_err(|e| format!("record {i}: {e}"))?;
    }
    Ok("100 records match the selection oracle; heatmap JSON validates".into())
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("1 context token matches looped oracle", criterion_1, Duration::from_secs(5)),
        ("2 gradient suite", criterion_2, Duration::from_secs(60)),
        ("3 token-count arithmetic", criterion_3, Duration::from_secs(1)),
        ("4 pooling laws", criterion_4, Duration::from_secs(5)),
        ("5 context-token invariances", criterion_5, Duration::from_secs(5)),
        ("6 rotary encoding suite", criterion_6, Duration::from_secs(10)),
        ("7 budget inverse", criterion_7, Duration::from_secs(5)),
        ("8 tensor file goldens", criterion_8, Duration::from_secs(2)),
        ("9 toy training and freeze", criterion_9, Duration::from_secs(120)),
        ("10 heatmap selection and schema", criterion_10, Duration::from_secs(5)),
    ];
    let mut failed = 0;
    for (name, run, limit) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > limit => Err(format!("{detail}; took {elapsed:.2?}, limit {limit:?}")),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS criterion {name} ({elapsed:.2?}): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name} ({elapsed:.2?}): {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} of 10 criteria failed");
        std::process::exit(1);
    }
    println!("all 10 criteria passed");
}
