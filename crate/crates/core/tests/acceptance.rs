//! Release gate: ten independently checkable criteria, one line of output
//! each. Oracles here are written from scratch against the documented
//! behavior — they share no code with the implementations they judge.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use loramix::audio::{audio_token_budget, max_duration_s, subsampled_len};
use loramix::decoder::{gqa_attention, Decoder, DecoderConfig, KVCache, ROPE_BASE};
use loramix::eval::{
    bleu, cer, macro_average, mt_bench_average, uses_cer, wer, BleuTokenizer,
};
use loramix::lora::{AdapterTap, LORA_A, LORA_V};
use loramix::model::{ModelConfig, MultimodalModel};
use loramix::numerics::{Graph, NodeId, Tensor};
use loramix::params::GraphBinder;
use loramix::rng::SplitMix64;
use loramix::text::{TOK_ASSISTANT, TOK_AUDIO, TOK_END, TOK_USER};
use loramix::training::synth::{tone_dataset, ASR_PROMPT};
use loramix::training::{
    render_sft, run_stage, standard_schedules, token_accuracy, SftSample,
};
use loramix::vision::{plan_crops, VisionEncoderConfig};

fn main() {
    let criteria: &[(&str, fn())] = &[
        ("01 token-rate arithmetic", c01_token_rate),
        ("02 frozen-base invariance", c02_frozen_base),
        ("03 LoRA algebra", c03_lora_algebra),
        ("04 attention correctness", c04_attention),
        ("05 gradient finite differences", c05_gradients),
        ("06 crop planner vs enumeration", c06_crop_planner),
        ("07 metric oracles", c07_metric_oracles),
        ("08 paper-table fixtures", c08_table_fixtures),
        ("09 loss masking and stream layout", c09_loss_masking),
        ("10 end-to-end speech learning", c10_end_to_end),
    ];
    let default_hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failures = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        match catch_unwind(AssertUnwindSafe(f)) {
            Ok(()) => println!(
                "PASS  criterion {name}  ({:.2}s)",
                start.elapsed().as_secs_f64()
            ),
            Err(payload) => {
                failures += 1;
                let msg = payload
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| payload.downcast_ref::<&str>().map(|s| (*s).to_string()))
                    .unwrap_or_else(|| "panicked".into());
                println!("FAIL  criterion {name}: {msg}");
            }
        }
    }
    std::panic::set_hook(default_hook);
    if failures > 0 {
        std::process::exit(1);
    }
}

/// Toy model with a small vision geometry so vision stages run in seconds.
fn tiny_model(seed: u64) -> MultimodalModel {
    let mut config = ModelConfig::default();
    config.vision = VisionEncoderConfig {
        crop_size: 8,
        patch: 4,
        width: 8,
        n_heads: 2,
        max_crops_pretrain: 16,
        max_crops_sft: 36,
    };
    MultimodalModel::new(config, seed).unwrap()
}

fn text_generation(model: &MultimodalModel, prompt: &str) -> Vec<u32> {
    let prepared = model.prepare_prompt(prompt, &[], None, 16).unwrap();
    assert!(prepared.routed.is_empty(), "text-only must route no adapters");
    model.generate(&prepared, 16).unwrap()
}

// --- criterion 1 ---------------------------------------------------------

fn c01_token_rate() {
    assert_eq!(subsampled_len(6000), 750, "1 minute -> 750 tokens");
    assert_eq!(subsampled_len(3000), 375, "30 s -> 375 tokens");
    let b = audio_token_budget(1800.0, 128_000, 0).unwrap();
    assert_eq!(b.tokens, 22_500, "30 minutes -> 22.5k tokens");
    let hours = max_duration_s(128_000, 0) / 3600.0;
    assert!(hours >= 2.8, "128k context holds {hours:.3} h, need >= 2.8");
}

// --- criterion 2 ---------------------------------------------------------

fn c02_frozen_base() {
    let mut model = tiny_model(11);
    let prompt = "the quick brown fox";
    let baseline = text_generation(&model, prompt);
    let decoder_fp = model.params.fingerprint("decoder.");

    let schedules = standard_schedules(0.001); // 50 steps per stage
    let speech = [&schedules[4], &schedules[5]];
    for stage in speech {
        let data = tone_dataset(4, 3, &model.tokenizer).unwrap();
        run_stage(&mut model, stage, &data, 7).unwrap();
    }
    let vision_lora_stage = &schedules[3]; // multiframe: lora_v + vision_projector
    let data = loramix::training::synth::dataset_for_source(
        &vision_lora_stage.data_source,
        &model.config.vision,
        &model.tokenizer,
    )
    .unwrap();
    run_stage(&mut model, vision_lora_stage, &data, 7).unwrap();

    assert_eq!(
        model.params.fingerprint("decoder."),
        decoder_fp,
        "decoder fingerprint moved across the schedule"
    );
    let after = text_generation(&model, prompt);
    assert_eq!(baseline, after, "text-only generation changed");
}

// --- criterion 3 ---------------------------------------------------------

fn full_logits(model: &MultimodalModel, tap: &AdapterTap, tokens: &[u32]) -> Tensor {
    let mut g = Graph::new();
    let mut binder = GraphBinder::frozen(&model.params);
    let node = model
        .decoder
        .forward(&mut g, &mut binder, tap, tokens, &[], None)
        .unwrap();
    g.value(node).clone()
}

fn c03_lora_algebra() {
    let model = tiny_model(17);
    let tokens: Vec<u32> = model.tokenizer.encode("pack my box with five dozen jugs");

    // Fresh adapters (B = 0) are exact identities.
    let plain = full_logits(&model, &AdapterTap::none(), &tokens);
    let names = vec![LORA_A.to_string(), LORA_V.to_string()];
    let tap = AdapterTap::from_names(&model.adapters, &names).unwrap();
    let adapted = full_logits(&model, &tap, &tokens);
    assert!(
        plain.bit_equal(&adapted),
        "zero-init adapters must not change logits at all"
    );

    // Merged weights match the dynamic adapter path on a trained-looking B.
    let mut active = tiny_model(17);
    let mut rng = SplitMix64::new(0xB0);
    let adapter = active.adapter(LORA_A).unwrap().clone();
    for attach in &adapter.attach_points {
        let name = format!("{}{attach}.b", adapter.prefix());
        let shape = active.params.get(&name).unwrap().shape().to_vec();
        let fresh = Tensor::randn(&shape, 0.05, &mut rng);
        *active.params.get_mut(&name).unwrap() = fresh;
    }
    let names = vec![LORA_A.to_string()];
    let tap = AdapterTap::from_names(&active.adapters, &names).unwrap();
    let dynamic = full_logits(&active, &tap, &tokens);
    let mut merged_store = active.params.clone();
    adapter.merge(&mut merged_store).unwrap();
    let mut merged_model = tiny_model(17);
    merged_model.params = merged_store.clone();
    let merged = full_logits(&merged_model, &AdapterTap::none(), &tokens);
    let diff = dynamic.max_abs_diff(&merged);
    assert!(diff <= 1e-9, "merged vs dynamic path differ by {diff}");

    // Unmerge restores the base weights.
    adapter.unmerge(&mut merged_store).unwrap();
    let restored = merged_store.get("decoder.layers.0.attn.q.weight").unwrap();
    let original = active.params.get("decoder.layers.0.attn.q.weight").unwrap();
    assert!(restored.max_abs_diff(original) <= 1e-12, "unmerge must undo merge");

    // Parameter counts match the store's actual tensor sizes.
    for adapter in &model.adapters {
        let claimed = adapter.parameter_count(&model.config.decoder).unwrap();
        let mut enumerated = 0usize;
        for name in model.params.names_with_prefix(&adapter.prefix()) {
            enumerated += model.params.get(&name).unwrap().len();
        }
        assert_eq!(claimed, enumerated, "{} parameter count", adapter.name);
        let by_formula: usize = adapter
            .attach_points
            .iter()
            .map(|a| {
                let (i, o) = model.config.decoder.linear_dims(a).unwrap();
                adapter.rank * (i + o)
            })
            .sum();
        assert_eq!(claimed, by_formula);
    }
}

// --- criterion 4 ---------------------------------------------------------

/// Scratch multi-head attention with rotary embeddings, written directly
/// against the math: per-head softmax((q K^T)/sqrt(d) + causal) V.
#[allow(clippy::needless_range_loop)]
fn reference_mha(
    cfg: &DecoderConfig,
    weights: &loramix::params::ParamStore,
    layer: usize,
    x: &Tensor,
) -> Tensor {
    let (t, d) = x.dims2().unwrap();
    let hd = cfg.head_dim();
    let rot = cfg.rot_dims();
    let heads = cfg.n_q_heads;
    assert_eq!(cfg.n_kv_heads, heads, "reference covers the MHA case only");

    let apply = |name: &str, input: &Tensor| -> Vec<Vec<f64>> {
        let w = weights.get(&format!("decoder.layers.{layer}.attn.{name}.weight")).unwrap();
        let b = weights.get(&format!("decoder.layers.{layer}.attn.{name}.bias")).unwrap();
        let (out_dim, in_dim) = w.dims2().unwrap();
        let (rows, _) = input.dims2().unwrap();
        (0..rows)
            .map(|r| {
                (0..out_dim)
                    .map(|o| {
                        let mut s = b.data()[o];
                        for i in 0..in_dim {
                            s += input.at2(r, i) * w.at2(o, i);
                        }
                        s
                    })
                    .collect()
            })
            .collect()
    };
    let rotate = |row: &mut [f64], pos: usize| {
        for i in 0..rot / 2 {
            let theta = ROPE_BASE.powf(-(2.0 * i as f64) / rot as f64);
            let (sin, cos) = (pos as f64 * theta).sin_cos();
            let (u, v) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = u * cos - v * sin;
            row[2 * i + 1] = u * sin + v * cos;
        }
    };

    let q = apply("q", x);
    let k = apply("k", x);
    let v = apply("v", x);
    let mut ctx = vec![vec![0.0; heads * hd]; t];
    for h in 0..heads {
        let mut qh: Vec<Vec<f64>> = q.iter().map(|r| r[h * hd..(h + 1) * hd].to_vec()).collect();
        let mut kh: Vec<Vec<f64>> = k.iter().map(|r| r[h * hd..(h + 1) * hd].to_vec()).collect();
        let vh: Vec<Vec<f64>> = v.iter().map(|r| r[h * hd..(h + 1) * hd].to_vec()).collect();
        for (pos, row) in qh.iter_mut().enumerate() {
            rotate(row, pos);
        }
        for (pos, row) in kh.iter_mut().enumerate() {
            rotate(row, pos);
        }
        for i in 0..t {
            let scores: Vec<f64> = (0..=i)
                .map(|j| {
                    qh[i].iter().zip(&kh[j]).map(|(a, b)| a * b).sum::<f64>()
                        / (hd as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|&s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for di in 0..hd {
                ctx[i][h * hd + di] = exps
                    .iter()
                    .zip(0..=i)
                    .map(|(&e, j)| e / z * vh[j][di])
                    .sum();
            }
        }
    }
    let ctx_t = Tensor::from_rows(&ctx);
    let out = apply("o", &ctx_t);
    let _ = d;
    Tensor::from_rows(&out)
}

fn c04_attention() {
    // (a) GQA degenerates to MHA when every query head has its own kv head.
    let cfg = DecoderConfig {
        d_model: 32,
        n_layers: 1,
        n_q_heads: 4,
        n_kv_heads: 4,
        rotary_fraction: 0.75,
        vocab_size: 64,
        max_context: 64,
        mlp_hidden: 64,
        seed: 5,
    };
    let decoder = Decoder::new(cfg.clone()).unwrap();
    let store = decoder.init_params();
    let mut rng = SplitMix64::new(0xA7);
    let x = Tensor::randn(&[6, 32], 1.0, &mut rng);
    let positions: Vec<usize> = (0..6).collect();
    let mut g = Graph::new();
    let mut binder = GraphBinder::frozen(&store);
    let xn = g.constant(x.clone());
    let (out, _, _) = gqa_attention(
        &mut g,
        &mut binder,
        &AdapterTap::none(),
        &cfg,
        0,
        xn,
        &positions,
        None,
    )
    .unwrap();
    let got = g.value(out).clone();
    let want = reference_mha(&cfg, &store, 0, &x);
    let diff = got.max_abs_diff(&want);
    assert!(diff <= 1e-9, "GQA(n_kv=n_q) vs reference MHA: {diff}");

    // (b) Incremental decoding with the KV cache matches the batched
    // forward pass position by position over 32 steps.
    let cfg = DecoderConfig::default();
    let decoder = Decoder::new(cfg.clone()).unwrap();
    let store = decoder.init_params();
    let mut rng = SplitMix64::new(0xC4);
    let tokens: Vec<u32> = (0..32).map(|_| rng.next_range(cfg.vocab_size) as u32).collect();
    let mut g = Graph::new();
    let mut binder = GraphBinder::frozen(&store);
    let batched_node = decoder
        .forward(&mut g, &mut binder, &AdapterTap::none(), &tokens, &[], None)
        .unwrap();
    let batched = g.value(batched_node).clone();

    let mut cache = KVCache::new(&cfg);
    let mut worst = 0.0f64;
    for (i, &tok) in tokens.iter().enumerate() {
        let step = decoder
            .decode_step(&store, &AdapterTap::none(), tok, &mut cache)
            .unwrap();
        for (a, b) in step.row(0).iter().zip(batched.row(i)) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-9, "incremental vs batched logits differ by {worst}");

    // (c) Pass-through dims ignore position exactly; rotated dims see only
    // the relative offset.
    let mut rng = SplitMix64::new(0xE1);
    let row = Tensor::randn(&[1, 16], 1.0, &mut rng);
    let rot = 12;
    let at = |pos: usize| -> Tensor {
        let mut g = Graph::new();
        let n = g.constant(row.clone());
        let r = g.rope(n, &[pos], rot, ROPE_BASE).unwrap();
        g.value(r).clone()
    };
    let r0 = at(0);
    let r9 = at(9);
    assert_eq!(
        &r0.data()[rot..],
        &r9.data()[rot..],
        "pass-through dims must be bit-identical across positions"
    );
    assert_eq!(&r0.data()[rot..], &row.data()[rot..]);

    let q = Tensor::randn(&[1, 16], 1.0, &mut rng);
    let k = Tensor::randn(&[1, 16], 1.0, &mut rng);
    let dot_at = |qp: usize, kp: usize| -> f64 {
        let mut g = Graph::new();
        let qn = g.constant(q.clone());
        let kn = g.constant(k.clone());
        let qr = g.rope(qn, &[qp], rot, ROPE_BASE).unwrap();
        let kr = g.rope(kn, &[kp], rot, ROPE_BASE).unwrap();
        g.value(qr).data()[..rot]
            .iter()
            .zip(&g.value(kr).data()[..rot])
            .map(|(a, b)| a * b)
            .sum()
    };
    for shift in [1usize, 5, 40] {
        let base = dot_at(7, 3);
        let shifted = dot_at(7 + shift, 3 + shift);
        assert!(
            (base - shifted).abs() <= 1e-9,
            "relative-shift invariance broke at shift {shift}: {base} vs {shifted}"
        );
    }
}

// --- criterion 5 ---------------------------------------------------------

/// Central finite differences at h = 1e-5 over every element of every
/// input, against the tape's analytic gradients.
fn fd_check(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId) -> f64 {
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let root = f(&mut g, &ids);
        g.value(root).scalar_value()
    };
    let h = 1e-5;
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = f(&mut g, &ids);
    g.backward(root).unwrap();
    let mut worst = 0.0f64;
    for (ti, id) in ids.iter().enumerate() {
        let analytic = g
            .grad(*id)
            .unwrap_or_else(|| panic!("input {ti} received no gradient"))
            .clone();
        for ei in 0..inputs[ti].len() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[ei] += h;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[ei] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    worst
}

fn weighted(g: &mut Graph, out: NodeId, seed: u64) -> NodeId {
    let shape = g.value(out).shape().to_vec();
    let mut rng = SplitMix64::new(seed);
    let w = g.constant(Tensor::randn(&shape, 1.0, &mut rng));
    let p = g.mul(out, w).unwrap();
    g.sum_all(p)
}

fn c05_gradients() {
    const CONFIGS: u64 = 20;
    let mut checked: BTreeSet<&str> = BTreeSet::new();
    let mut run = |op: &'static str, build: &dyn Fn(u64) -> (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>)| {
        for c in 0..CONFIGS {
            let (inputs, f) = build(c);
            let err = fd_check(&inputs, f.as_ref());
            assert!(err <= 1e-4, "{op} config {c}: fd rel err {err}");
        }
        checked.insert(op);
    };
    let dims = |rng: &mut SplitMix64| 1 + rng.next_range(5);

    run("add", &|c| {
        let mut rng = SplitMix64::new(100 + c);
        let (r, k) = (dims(&mut rng), dims(&mut rng));
        let a = Tensor::randn(&[r, k], 1.0, &mut rng);
        let b = Tensor::randn(&[r, k], 1.0, &mut rng);
        (vec![a, b], Box::new(move |g, ids| {
            let s = g.add(ids[0], ids[1]).unwrap();
            weighted(g, s, 1000 + c)
        }))
    });
    run("sub", &|c| {
        let mut rng = SplitMix64::new(200 + c);
        let (r, k) = (dims(&mut rng), dims(&mut rng));
        let a = Tensor::randn(&[r, k], 1.0, &mut rng);
        let b = Tensor::randn(&[r, k], 1.0, &mut rng);
        (vec![a, b], Box::new(move |g, ids| {
            let s = g.sub(ids[0], ids[1]).unwrap();
            weighted(g, s, 2000 + c)
        }))
    });
    run("mul", &|c| {
        let mut rng = SplitMix64::new(300 + c);
        let (r, k) = (dims(&mut rng), dims(&mut rng));
        let a = Tensor::randn(&[r, k], 1.0, &mut rng);
        let b = Tensor::randn(&[r, k], 1.0, &mut rng);
        (vec![a, b], Box::new(move |g, ids| {
            let s = g.mul(ids[0], ids[1]).unwrap();
            weighted(g, s, 3000 + c)
        }))
    });
    run("matmul", &|c| {
        let mut rng = SplitMix64::new(400 + c);
        let (m, k, n) = (dims(&mut rng), dims(&mut rng), dims(&mut rng));
        let a = Tensor::randn(&[m, k], 1.0, &mut rng);
        let b = Tensor::randn(&[k, n], 1.0, &mut rng);
        (vec![a, b], Box::new(move |g, ids| {
            let s = g.matmul(ids[0], ids[1]).unwrap();
            weighted(g, s, 4000 + c)
        }))
    });
    run("matmul_nt", &|c| {
        let mut rng = SplitMix64::new(500 + c);
        let (m, k, n) = (dims(&mut rng), dims(&mut rng), dims(&mut rng));
        let a = Tensor::randn(&[m, k], 1.0, &mut rng);
        let b = Tensor::randn(&[n, k], 1.0, &mut rng);
        (vec![a, b], Box::new(move |g, ids| {
            let s = g.matmul_nt(ids[0], ids[1]).unwrap();
            weighted(g, s, 5000 + c)
        }))
    });
    run("add_bias", &|c| {
        let mut rng = SplitMix64::new(600 + c);
        let (r, k) = (dims(&mut rng), dims(&mut rng));
        let x = Tensor::randn(&[r, k], 1.0, &mut rng);
        let b = Tensor::randn(&[k], 1.0, &mut rng);
        (vec![x, b], Box::new(move |g, ids| {
            let s = g.add_bias(ids[0], ids[1]).unwrap();
            weighted(g, s, 6000 + c)
        }))
    });
    run("scale", &|c| {
        let mut rng = SplitMix64::new(700 + c);
        let (r, k) = (dims(&mut rng), dims(&mut rng));
        let x = Tensor::randn(&[r, k], 1.0, &mut rng);
        let factor = 0.25 + rng.next_range(8) as f64;
        (vec![x], Box::new(move |g, ids| {
            let s = g.scale(ids[0], factor);
            weighted(g, s, 7000 + c)
        }))
    });
    run("gelu", &|c| {
        let mut rng = SplitMix64::new(800 + c);
        let (r, k) = (dims(&mut rng), dims(&mut rng));
        let x = Tensor::randn(&[r, k], 1.0, &mut rng);
        (vec![x], Box::new(move |g, ids| {
            let s = g.gelu(ids[0]);
            weighted(g, s, 8000 + c)
        }))
    });
    run("transpose", &|c| {
        let mut rng = SplitMix64::new(900 + c);
        let (r, k) = (dims(&mut rng), dims(&mut rng));
        let x = Tensor::randn(&[r, k], 1.0, &mut rng);
        (vec![x], Box::new(move |g, ids| {
            let s = g.transpose(ids[0]).unwrap();
            weighted(g, s, 9000 + c)
        }))
    });
    run("reshape", &|c| {
        let mut rng = SplitMix64::new(1100 + c);
        let (r, k) = (dims(&mut rng), dims(&mut rng));
        let x = Tensor::randn(&[r, k], 1.0, &mut rng);
        (vec![x], Box::new(move |g, ids| {
            let shape = g.value(ids[0]).shape().to_vec();
            let s = g.reshape(ids[0], vec![shape.iter().product()]).unwrap();
            weighted(g, s, 11_000 + c)
        }))
    });
    run("slice_cols", &|c| {
        let mut rng = SplitMix64::new(1200 + c);
        let r = dims(&mut rng);
        let k = 2 + rng.next_range(5);
        let lo = rng.next_range(k - 1);
        let hi = lo + 1 + rng.next_range(k - lo - 1).min(k - lo - 1);
        let x = Tensor::randn(&[r, k], 1.0, &mut rng);
        (vec![x], Box::new(move |g, ids| {
            let s = g.slice_cols(ids[0], lo, hi).unwrap();
            weighted(g, s, 12_000 + c)
        }))
    });
    run("concat_cols", &|c| {
        let mut rng = SplitMix64::new(1300 + c);
        let r = dims(&mut rng);
        let (k1, k2) = (dims(&mut rng), dims(&mut rng));
        let a = Tensor::randn(&[r, k1], 1.0, &mut rng);
        let b = Tensor::randn(&[r, k2], 1.0, &mut rng);
        (vec![a, b], Box::new(move |g, ids| {
            let s = g.concat_cols(&[ids[0], ids[1]]).unwrap();
            weighted(g, s, 13_000 + c)
        }))
    });
    run("concat_rows", &|c| {
        let mut rng = SplitMix64::new(1400 + c);
        let k = dims(&mut rng);
        let (r1, r2) = (dims(&mut rng), dims(&mut rng));
        let a = Tensor::randn(&[r1, k], 1.0, &mut rng);
        let b = Tensor::randn(&[r2, k], 1.0, &mut rng);
        (vec![a, b], Box::new(move |g, ids| {
            let s = g.concat_rows(&[ids[0], ids[1]]).unwrap();
            weighted(g, s, 14_000 + c)
        }))
    });
    run("softmax_rows", &|c| {
        let mut rng = SplitMix64::new(1500 + c);
        let (r, k) = (dims(&mut rng), 2 + rng.next_range(4));
        let x = Tensor::randn(&[r, k], 1.0, &mut rng);
        (vec![x], Box::new(move |g, ids| {
            let s = g.softmax_rows(ids[0]).unwrap();
            weighted(g, s, 15_000 + c)
        }))
    });
    run("layer_norm", &|c| {
        let mut rng = SplitMix64::new(1600 + c);
        let (r, k) = (dims(&mut rng), 2 + rng.next_range(5));
        let x = Tensor::randn(&[r, k], 1.0, &mut rng);
        let gain = Tensor::randn(&[k], 0.5, &mut rng);
        let bias = Tensor::randn(&[k], 0.5, &mut rng);
        (vec![x, gain, bias], Box::new(move |g, ids| {
            let s = g.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
            weighted(g, s, 16_000 + c)
        }))
    });
    run("conv1d", &|c| {
        let mut rng = SplitMix64::new(1700 + c);
        let kernel = 1 + rng.next_range(3);
        let stride = 1 + rng.next_range(2);
        let padding = rng.next_range(kernel);
        let t = kernel + rng.next_range(5);
        let (c_in, c_out) = (1 + rng.next_range(3), 1 + rng.next_range(3));
        let x = Tensor::randn(&[t, c_in], 1.0, &mut rng);
        let w = Tensor::randn(&[c_out, c_in, kernel], 1.0, &mut rng);
        let b = Tensor::randn(&[c_out], 1.0, &mut rng);
        (vec![x, w, b], Box::new(move |g, ids| {
            let s = g.conv1d(ids[0], ids[1], ids[2], stride, padding).unwrap();
            weighted(g, s, 17_000 + c)
        }))
    });
    run("depthwise_conv1d", &|c| {
        let mut rng = SplitMix64::new(1800 + c);
        let kernel = 1 + 2 * rng.next_range(2); // odd: 1 or 3
        let t = kernel + rng.next_range(5);
        let ch = 1 + rng.next_range(4);
        let x = Tensor::randn(&[t, ch], 1.0, &mut rng);
        let w = Tensor::randn(&[ch, kernel], 1.0, &mut rng);
        let b = Tensor::randn(&[ch], 1.0, &mut rng);
        (vec![x, w, b], Box::new(move |g, ids| {
            let s = g
                .depthwise_conv1d(ids[0], ids[1], ids[2], (kernel - 1) / 2)
                .unwrap();
            weighted(g, s, 18_000 + c)
        }))
    });
    run("rope", &|c| {
        let mut rng = SplitMix64::new(1900 + c);
        let t = 1 + rng.next_range(4);
        let d = 4 + 2 * rng.next_range(3);
        let rot = 2 + 2 * rng.next_range(d / 2 - 1).min(d / 2 - 1);
        let positions: Vec<usize> = (0..t).map(|_| rng.next_range(50)).collect();
        let x = Tensor::randn(&[t, d], 1.0, &mut rng);
        (vec![x], Box::new(move |g, ids| {
            let s = g.rope(ids[0], &positions, rot, ROPE_BASE).unwrap();
            weighted(g, s, 19_000 + c)
        }))
    });
    run("gather_rows", &|c| {
        let mut rng = SplitMix64::new(2100 + c);
        let (rows, k) = (2 + rng.next_range(4), dims(&mut rng));
        let picks: Vec<usize> = (0..1 + rng.next_range(5)).map(|_| rng.next_range(rows)).collect();
        let table = Tensor::randn(&[rows, k], 1.0, &mut rng);
        (vec![table], Box::new(move |g, ids| {
            let s = g.gather_rows(ids[0], &picks).unwrap();
            weighted(g, s, 21_000 + c)
        }))
    });
    run("cross_entropy_masked", &|c| {
        let mut rng = SplitMix64::new(2200 + c);
        let (t, v) = (2 + rng.next_range(4), 3 + rng.next_range(4));
        let logits = Tensor::randn(&[t, v], 1.0, &mut rng);
        let targets: Vec<usize> = (0..t).map(|_| rng.next_range(v)).collect();
        let mut mask: Vec<bool> = (0..t).map(|_| rng.next_range(2) == 1).collect();
        mask[0] = true; // at least one supervised position
        (vec![logits], Box::new(move |g, ids| {
            g.cross_entropy_masked(ids[0], &targets, &mask).unwrap()
        }))
    });
    run("softmax_axis0", &|c| {
        let mut rng = SplitMix64::new(2300 + c);
        let (r, k) = (2 + rng.next_range(4), dims(&mut rng));
        let x = Tensor::randn(&[r, k], 1.0, &mut rng);
        (vec![x], Box::new(move |g, ids| {
            let s = g.softmax(ids[0], 0).unwrap();
            weighted(g, s, 23_000 + c)
        }))
    });
    run("causal_mask_add", &|c| {
        let mut rng = SplitMix64::new(2400 + c);
        let t = 2 + rng.next_range(4);
        let x = Tensor::randn(&[t, t], 1.0, &mut rng);
        (vec![x], Box::new(move |g, ids| {
            let m = g.causal_mask_add(ids[0], 0).unwrap();
            let s = g.softmax_rows(m).unwrap();
            weighted(g, s, 24_000 + c)
        }))
    });
    assert!(
        checked.len() >= 20,
        "only {} ops swept, wanted at least 20",
        checked.len()
    );
}

// --- criterion 6 ---------------------------------------------------------

/// Enumeration oracle, written from the documented rule: keep the natural
/// ceil-grid when it fits; otherwise take, over all grids with
/// rows*cols <= budget, the aspect-ratio argmin with exact integer
/// comparisons; ties prefer more tiles, then more rows.
fn oracle_plan(h: usize, w: usize, c: usize, max: usize) -> (usize, usize, bool) {
    let natural = (h.div_ceil(c), w.div_ceil(c));
    if natural.0 * natural.1 <= max {
        return (natural.0, natural.1, false);
    }
    // distance of grid (r,cols) from h/w: |r*w - cols*h| / (cols*w); compare
    // a1/(c1*w) vs a2/(c2*w) as a1*c2 vs a2*c1.
    let mut best: Option<(usize, usize, u128)> = None;
    for rows in 1..=max {
        for cols in 1..=max / rows {
            let num = (rows as i128 * w as i128 - cols as i128 * h as i128).unsigned_abs();
            let better = match best {
                None => true,
                Some((br, bc, bnum)) => {
                    let lhs = num * bc as u128;
                    let rhs = bnum * cols as u128;
                    lhs < rhs
                        || (lhs == rhs
                            && (rows * cols > br * bc || (rows * cols == br * bc && rows > br)))
                }
            };
            if better {
                best = Some((rows, cols, num));
            }
        }
    }
    let (r, cc, _) = best.unwrap();
    (r, cc, true)
}

fn c06_crop_planner() {
    let c = 448;
    for max in [16usize, 36] {
        for h in (1..=2048).step_by(7) {
            for w in (1..=2048).step_by(7) {
                let plan = plan_crops(h, w, c, max).unwrap();
                let (er, ec, efb) = oracle_plan(h, w, c, max);
                assert_eq!(
                    (plan.rows, plan.cols, plan.fallback_used),
                    (er, ec, efb),
                    "plan mismatch at {h}x{w} max {max}"
                );
                assert!(plan.rows * plan.cols <= max);
                assert_eq!(plan.resize_h, plan.rows * c);
                assert_eq!(plan.resize_w, plan.cols * c);
            }
        }
    }
    let wide = plan_crops(28, 448, 448, 16).unwrap();
    assert_eq!((wide.rows, wide.cols), (1, 1), "28x448 keeps a single crop");
    assert!(!wide.fallback_used);
}

// --- criterion 7 ---------------------------------------------------------

/// Full-matrix Levenshtein, the classic O(n*m) table.
fn oracle_edit<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut table = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in table.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        table[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = usize::from(a[i - 1] != b[j - 1]);
            table[i][j] = (table[i - 1][j] + 1)
                .min(table[i][j - 1] + 1)
                .min(table[i - 1][j - 1] + sub);
        }
    }
    table[a.len()][b.len()]
}

fn c07_metric_oracles() {
    let words = ["alpha", "bravo", "charlie", "delta", "echo", "foxtrot"];
    let mut rng = SplitMix64::new(0x0E07);
    for _ in 0..1000 {
        let pick = |rng: &mut SplitMix64, n: usize| -> Vec<&str> {
            (0..n).map(|_| words[rng.next_range(words.len())]).collect()
        };
        let hyp_len = rng.next_range(12);
        let hyp_words = pick(&mut rng, hyp_len);
        let ref_len = 1 + rng.next_range(12);
        let ref_words = pick(&mut rng, ref_len);
        let expected = oracle_edit(&hyp_words, &ref_words) as f64 / ref_words.len() as f64;
        let got = wer(&hyp_words.join(" "), &ref_words.join(" ")).unwrap();
        assert!(
            (got - expected).abs() < 1e-12,
            "wer mismatch: {got} vs {expected}"
        );

        let chars = ['a', 'b', 'c', 'x', '字', '音'];
        let mk = |rng: &mut SplitMix64, n: usize| -> String {
            (0..n).map(|_| chars[rng.next_range(chars.len())]).collect()
        };
        let hyp_chars_len = rng.next_range(15);
        let hyp = mk(&mut rng, hyp_chars_len);
        let ref_chars_len = 1 + rng.next_range(15);
        let refr = mk(&mut rng, ref_chars_len);
        let hyp_chars: Vec<char> = hyp.chars().collect();
        let ref_chars: Vec<char> = refr.chars().collect();
        let expected = oracle_edit(&hyp_chars, &ref_chars) as f64 / ref_chars.len() as f64;
        let got = cer(&hyp, &refr).unwrap();
        assert!(
            (got - expected).abs() < 1e-12,
            "cer mismatch: {got} vs {expected}"
        );
    }

    // Frozen reference-implementation fixtures.
    let hyps = [
        "The quick brown fox jumps over the lazy dog.",
        "It is a truth universally acknowledged, that a single man may want a wife.",
    ];
    let refs = [
        "The quick brown fox jumped over the lazy dog.",
        "It is a truth universally acknowledged that a single man must want a wife.",
    ];
    let got = bleu(&hyps, &refs, BleuTokenizer::T13a).unwrap();
    assert!(
        (got - 62.928_749_773_959_01).abs() <= 1e-6,
        "13a BLEU fixture: {got}"
    );
    let hyps = ["今日はいい天気ですね。", "猫がマットの上に座った。"];
    let refs = ["今日は良い天気ですね。", "猫がマットの上で眠った。"];
    let got = bleu(&hyps, &refs, BleuTokenizer::Char).unwrap();
    assert!(
        (got - 66.614_364_574_037_42).abs() <= 1e-6,
        "char BLEU fixture: {got}"
    );

    for lang in ["ja", "zh", "ja-JP", "zh_CN"] {
        assert!(uses_cer(lang), "{lang} must dispatch to CER");
    }
    for lang in ["en", "de", "fr", "it", "pt", "es"] {
        assert!(!uses_cer(lang), "{lang} must dispatch to WER");
    }
}

// --- criterion 8 ---------------------------------------------------------

fn c08_table_fixtures() {
    let cases: [(&str, &[f64], f64); 3] = [
        ("CommonVoice", &[7.61, 5.13, 4.47, 8.08, 3.78, 10.98, 6.97, 7.35], 6.80),
        ("FLEURS", &[3.38, 3.96, 3.02, 4.35, 1.98, 4.50, 3.98, 6.83], 4.00),
        ("OpenASR", &[11.69, 10.16, 9.78, 3.13, 2.90, 1.68, 3.83, 5.91], 6.14),
    ];
    for (name, values, printed) in cases {
        let avg = macro_average(values).unwrap();
        assert!(
            (avg - printed).abs() <= 0.005,
            "{name}: computed {avg}, table prints {printed}"
        );
    }
    let mt = mt_bench_average(&[7.42], &[6.67]).unwrap();
    assert!((mt - 7.05).abs() <= 0.005, "MT-Bench average {mt}");
}

// --- criterion 9 ---------------------------------------------------------

fn ce_loss_and_grad(
    logits: &Tensor,
    targets: &[usize],
    mask: &[bool],
) -> (f64, Tensor) {
    let mut g = Graph::new();
    let node = g.leaf(logits.clone());
    let loss = g.cross_entropy_masked(node, targets, mask).unwrap();
    let value = g.value(loss).scalar_value();
    g.backward(loss).unwrap();
    (value, g.grad(node).unwrap().clone())
}

fn c09_loss_masking() {
    let mut rng = SplitMix64::new(0x99);
    let (t, v) = (9, 12);
    let logits = Tensor::randn(&[t, v], 1.0, &mut rng);
    let targets: Vec<usize> = (0..t).map(|_| rng.next_range(v)).collect();
    let mask = [false, false, false, true, true, false, true, false, false];
    let (loss, grad) = ce_loss_and_grad(&logits, &targets, &mask);

    for (i, &supervised) in mask.iter().enumerate() {
        if supervised {
            continue;
        }
        // The gradient at a mask-0 row is exactly zero...
        assert!(
            grad.row(i).iter().all(|&x| x == 0.0),
            "gradient leaked into masked row {i}"
        );
        // ...and perturbing that row changes nothing at all.
        for delta in [13.0, -4.5] {
            let mut bent = logits.clone();
            for x in &mut bent.data_mut()[i * v..(i + 1) * v] {
                *x += delta;
            }
            let (loss2, grad2) = ce_loss_and_grad(&bent, &targets, &mask);
            assert!(loss2 == loss, "loss moved when masked row {i} was perturbed");
            assert!(
                grad2.bit_equal(&grad),
                "gradients moved when masked row {i} was perturbed"
            );
        }
    }

    // Stream layout, byte for byte.
    let model = tiny_model(31);
    let sample = SftSample {
        task_prompt: ASR_PROMPT.into(),
        image_token_counts: vec![],
        audio_token_count: Some(3),
        label: "zero".into(),
    };
    let rendered = render_sft(&sample, &model.tokenizer).unwrap();
    assert_eq!(
        model.tokenizer.decode(&rendered.tokens),
        "<|user|><audio><audio><audio>Transcribe the audio clip into text.<|end|><|assistant|>zero<|end|>"
    );
    assert_eq!(rendered.tokens[0], TOK_USER);
    assert_eq!(&rendered.tokens[1..4], &[TOK_AUDIO; 3]);
    let label_ids = model.tokenizer.encode("zero");
    let tail_start = rendered.tokens.len() - label_ids.len() - 1;
    assert_eq!(&rendered.tokens[tail_start..rendered.tokens.len() - 1], &label_ids[..]);
    assert_eq!(*rendered.tokens.last().unwrap(), TOK_END);
    assert_eq!(rendered.tokens[tail_start - 1], TOK_ASSISTANT);
    // Loss mask covers exactly the label and closing end marker.
    for (i, &m) in rendered.loss_mask.iter().enumerate() {
        assert_eq!(m, i >= tail_start, "loss mask wrong at {i}");
    }
}

// --- criterion 10 --------------------------------------------------------

fn c10_end_to_end() {
    let mut seeds = (23u64, 97u64, 98u64);
    let mut knobs = (800usize, 3e-3, 4000usize, 3e-3);
    if let Ok(tune) = std::env::var("LMX_TUNE") {
        let parts: Vec<f64> = tune.split(',').map(|p| p.parse().unwrap()).collect();
        knobs = (parts[0] as usize, parts[1], parts[2] as usize, parts[3]);
        if parts.len() > 4 {
            seeds = (parts[4] as u64, parts[5] as u64, parts[6] as u64);
        }
    }
    let mut model = tiny_model(seeds.0);
    let data = tone_dataset(10, 5, &model.tokenizer).unwrap();
    assert_eq!(data.len(), 50);

    let schedules = standard_schedules(0.0);
    let mut pretrain = schedules[4].clone();
    pretrain.steps = knobs.0;
    pretrain.learning_rate = knobs.1;
    let mut posttrain = schedules[5].clone();
    posttrain.steps = knobs.2;
    posttrain.learning_rate = knobs.3;

    let pre_report = run_stage(&mut model, &pretrain, &data, seeds.1).unwrap();
    let audio_encoder_fp = model.params.fingerprint("audio_encoder.");
    let report = run_stage(&mut model, &posttrain, &data, seeds.2).unwrap();
    assert_eq!(
        model.params.fingerprint("audio_encoder."),
        audio_encoder_fp,
        "stage 2 must leave the audio encoder untouched"
    );
    assert_eq!(
        report.fingerprints_before["decoder"],
        report.fingerprints_after["decoder"]
    );

    let accuracy = token_accuracy(&model, &[LORA_A.to_string()], &data).unwrap();
    assert!(
        accuracy >= 0.95,
        "greedy token accuracy {accuracy:.3} below 0.95 (losses {:.4} -> {:.4})",
        pre_report.final_loss().unwrap_or(f64::NAN),
        report.final_loss().unwrap_or(f64::NAN)
    );
}
