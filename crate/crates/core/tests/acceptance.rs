//! Acceptance gate. Prints one `criterion N: PASS|FAIL` line per criterion and
//! exits non-zero if any fails. Positional arguments select criteria by
//! number. The expensive pretrain / fine-tune runs are shared.

use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng as _;
use qdm_core::analysis::{audit, frechet_pixel_distance, storage_report};
use qdm_core::diffusion::{
    gen_dataset, predict_noise, sample, Denoiser, DenoiserConfig, Family, SampleConfig, ScaleSource, ScheduleConfig,
    ToyDatasetSpec,
};
use qdm_core::experts::{expert_index, ExpertBank, ScaleInit};
use qdm_core::io::{encode_checkpoint, encode_scalepack, load_checkpoint, load_scalepack, save_checkpoint, save_scalepack, PackMeta};
use qdm_core::numerics::rng::{self, Stream};
use qdm_core::numerics::{Param, Tape, Tensor};
use qdm_core::qlayers::{trainable_param_count, LayerKind, QuantLayer, ScaleMode, ScaleSet};
use qdm_core::quantizer::{
    calibrate_minmax, dequantize_as, pack_codes, quantize, quantize_model, unpack_codes, QuantPolicy, QuantizedTensor,
};
use qdm_core::training::{
    eval_loss, evaluate, expected_trainable, finetune, pretrain, EvalConfig, Method, PretrainConfig, TrainConfig,
    TrainReport,
};

fn verdict(n: u32, ok: bool, detail: String) {
    println!("criterion {n}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    if !ok {
        panic!("criterion {n} failed");
    }
}

fn main() -> ExitCode {
    let criteria: [(u32, fn()); 9] = [
        (1, criterion_1_quantization_round_trip),
        (2, criterion_2_baseline_is_special_case),
        (3, criterion_3_gradient_fidelity),
        (4, criterion_4_structural_invariants),
        (5, criterion_5_expert_routing),
        (6, criterion_6_parameter_economy),
        (7, criterion_7_end_to_end_direction),
        (8, criterion_8_storage),
        (9, criterion_9_reproducibility_and_task_switching),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (n, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == &n.to_string()) {
            continue;
        }
        if std::panic::catch_unwind(check).is_err() {
            failed += 1;
        }
    }
    println!("acceptance: {}", if failed == 0 { "PASS".to_string() } else { format!("{failed} FAILED") });
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

struct Run {
    init: ExpertBank<f32>,
    tuned: ExpertBank<f32>,
    report: TrainReport,
    routes: Vec<(usize, Vec<usize>)>,
}

struct Fixture {
    quantized: Denoiser<f32>,
    schedule: ScheduleConfig,
    target_eval: Tensor<f32>,
    mcsu: Run,
    baseline: Run,
    secs: f64,
}

const ITERS: usize = 800;

fn run(model: &Denoiser<f32>, schedule: &ScheduleConfig, family: Family, method: Method, seed: u64) -> Run {
    let target = gen_dataset(&ToyDatasetSpec::new(family, 256, 1)).unwrap();
    let cfg = TrainConfig {
        method,
        n_experts: 2,
        iterations: ITERS,
        seed,
        ..Default::default()
    };
    let init = ExpertBank::init(model, 2, schedule.steps, method.mode(), cfg.scale_init, seed).unwrap();
    let mut tuned = init.clone();
    let mut routes = Vec::new();
    let mut obs = |ev: &qdm_core::training::RouteEvent<'_>| routes.push((ev.expert, ev.ts.to_vec()));
    let report = finetune(model, &mut tuned, &target, None, &schedule.build().unwrap(), &cfg, Some(&mut obs)).unwrap();
    Run {
        init,
        tuned,
        report,
        routes,
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let start = Instant::now();
        let schedule = ScheduleConfig::default();
        let sched = schedule.build().unwrap();
        let data = gen_dataset(&ToyDatasetSpec::new(Family::Blobs, 512, 0)).unwrap();
        let model = Denoiser::<f32>::new(DenoiserConfig::default(), 0).unwrap();
        let pre = pretrain(model, &data, &sched, &PretrainConfig::default()).unwrap();
        let quantized = quantize_model(&pre.model, 4, QuantPolicy::Interior).unwrap();
        let mcsu = run(&quantized, &schedule, Family::Rings, Method::Tuneqdm, 0);
        let baseline = run(&quantized, &schedule, Family::Checker, Method::Baseline, 1);
        Fixture {
            quantized,
            schedule,
            target_eval: gen_dataset(&ToyDatasetSpec::new(Family::Rings, 256, 1001)).unwrap(),
            mcsu,
            baseline,
            secs: start.elapsed().as_secs_f64(),
        }
    })
}

fn criterion_1_quantization_round_trip() {
    let start = Instant::now();
    let mut r = rng::stream(1, Stream::Data);
    let (mut violations, mut elements, mut pack_failures) = (0usize, 0usize, 0usize);
    for bits in [4u8, 8] {
        for _ in 0..1000 {
            let (rows, cols) = (r.random_range(1..=32), r.random_range(1..=32));
            let data: Vec<f32> = (0..rows * cols).map(|_| r.random_range(-4.0f32..=4.0)).collect();
            let w = Tensor::new(vec![rows, cols], data).unwrap();
            let p = calibrate_minmax(&w, bits).unwrap();
            let q = quantize(&w, &p).unwrap();
            let back = dequantize_as::<f64>(&q);
            for (j, (&x, &y)) in w.data().iter().zip(back.data()).enumerate() {
                let s = p.scale[j / cols] as f64;
                elements += 1;
                if (x as f64 - y).abs() > 0.5 * s * (1.0 + 1e-9) {
                    violations += 1;
                }
            }
            let bytes = pack_codes(&q).unwrap();
            if unpack_codes(&bytes, bits, q.numel()).unwrap() != q.codes() {
                pack_failures += 1;
            }
            // bijection on arbitrary codes, not only calibrated ones
            let codes: Vec<u8> = (0..rows * cols).map(|_| r.random_range(0..=q.params().max_code())).collect();
            let any = QuantizedTensor::from_parts(codes.clone(), q.params().clone(), vec![rows, cols]).unwrap();
            if unpack_codes(&pack_codes(&any).unwrap(), bits, codes.len()).unwrap() != codes {
                pack_failures += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        violations == 0 && pack_failures == 0 && secs < 10.0,
        format!("{violations} bound violations over {elements} elements, {pack_failures} pack mismatches, {secs:.2}s"),
    );
}

fn random_layer(r: &mut rng::Rng, bits: u8) -> QuantLayer<f64> {
    let conv = r.random_bool(0.5);
    let (co, ci) = (r.random_range(1..=8), r.random_range(1..=8));
    let shape = if conv { vec![co, ci, 3, 3] } else { vec![co, ci] };
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape.clone(), (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap();
    let q = quantize(&w, &calibrate_minmax(&w, bits).unwrap()).unwrap();
    let bias = Tensor::new(vec![co], (0..co).map(|_| r.random_range(-0.5..0.5)).collect()).unwrap();
    let kind = if conv {
        LayerKind::Conv2d { stride: r.random_range(1..=2), padding: 1 }
    } else {
        LayerKind::Linear
    };
    QuantLayer::new("probe".into(), kind, q, bias).unwrap()
}

fn layer_input(r: &mut rng::Rng, layer: &QuantLayer<f64>) -> Tensor<f64> {
    match layer.kind {
        LayerKind::Linear => rng::normal_tensor(r, vec![3, layer.c_in()]),
        LayerKind::Conv2d { .. } => rng::normal_tensor(r, vec![2, layer.c_in(), 5, 5]),
    }
}

fn criterion_2_baseline_is_special_case() {
    let start = Instant::now();
    let mut r = rng::stream(2, Stream::Data);
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let layer = random_layer(&mut r, if k % 2 == 0 { 4 } else { 8 });
        let x = layer_input(&mut r, &layer);
        let s_out: Vec<f64> = (0..layer.c_out()).map(|_| r.random_range(0.5..1.5) * layer.codes().params().scale[0] as f64).collect();
        let base = ScaleSet::baseline(s_out.clone(), layer.c_in());
        let mut mcsu = ScaleSet::mcsu(s_out, vec![1.0; layer.c_in()]);
        mcsu.s_in.trainable = false;
        let a = layer.forward(&x, &base).unwrap();
        let b = layer.forward(&x, &mcsu).unwrap();
        let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        worst = worst.max(a.max_abs_diff(&b) / scale);
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(2, worst <= 1e-6 && secs < 10.0, format!("max relative difference {worst:.2e} over 100 layers, {secs:.2}s"));
}

/// `L = sum(c * y) + 0.5 * sum(y^2)` so the upstream gradient is `c + y`.
fn layer_loss(layer: &QuantLayer<f64>, x: &Tensor<f64>, c: &Tensor<f64>, s: &ScaleSet<f64>) -> f64 {
    let y = layer.forward(x, s).unwrap();
    y.data().iter().zip(c.data()).map(|(y, c)| c * y + 0.5 * y * y).sum()
}

fn criterion_3_gradient_fidelity() {
    let start = Instant::now();
    let mut r = rng::stream(3, Stream::Data);
    let (mut worst, mut checked): (f64, usize) = (0.0, 0);
    let mut tape_gap: f64 = 0.0;
    for k in 0..40 {
        let layer = random_layer(&mut r, if k % 2 == 0 { 4 } else { 8 });
        let x = layer_input(&mut r, &layer);
        let s_out: Vec<f64> = (0..layer.c_out()).map(|_| r.random_range(0.05..0.2)).collect();
        let s_in: Vec<f64> = (0..layer.c_in()).map(|_| r.random_range(0.7..1.3)).collect();
        let s = ScaleSet::mcsu(s_out, s_in);
        let y = layer.forward(&x, &s).unwrap();
        let c: Tensor<f64> = rng::normal_tensor(&mut r, y.shape().to_vec());
        let upstream = Tensor::new(y.shape().to_vec(), y.data().iter().zip(c.data()).map(|(y, c)| y + c).collect()).unwrap();
        let (g_out, g_in) = layer.scale_gradients(&x, &upstream, &s).unwrap();

        // the tape path must agree with the closed form
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (yv, so, si) = layer.record(&mut tape, xv, &s).unwrap();
        let cv = tape.constant(c.clone());
        let lin = tape.mul(yv, cv).unwrap();
        let lin = tape.sum(lin);
        let sq = tape.mul(yv, yv).unwrap();
        let sq = tape.sum(sq);
        let half = tape.scale(sq, 0.5);
        let loss = tape.add(lin, half).unwrap();
        let grads = tape.backward(loss).unwrap();
        tape_gap = tape_gap.max(grads.get(so).unwrap().max_abs_diff(&g_out)).max(grads.get(si).unwrap().max_abs_diff(&g_in));

        let h = 1e-6;
        for which in 0..2 {
            let n = if which == 0 { layer.c_out() } else { layer.c_in() };
            for j in 0..n {
                let mut p = s.clone();
                let slot: &mut Param<f64> = if which == 0 { &mut p.s_out } else { &mut p.s_in };
                slot.value.data_mut()[j] += h;
                let up = layer_loss(&layer, &x, &c, &p);
                let slot: &mut Param<f64> = if which == 0 { &mut p.s_out } else { &mut p.s_in };
                slot.value.data_mut()[j] -= 2.0 * h;
                let down = layer_loss(&layer, &x, &c, &p);
                let fd = (up - down) / (2.0 * h);
                let an = if which == 0 { g_out.data()[j] } else { g_in.data()[j] };
                worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-6));
                checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        3,
        worst <= 1e-4 && tape_gap <= 1e-9 && secs < 30.0,
        format!("max relative error {worst:.2e} over {checked} scalars, tape vs closed form {tape_gap:.1e}, {secs:.2}s"),
    );
}

fn criterion_4_structural_invariants() {
    let f = fixture();
    let codes_before = encode_checkpoint(&f.quantized, &f.schedule).unwrap();
    let mut lines = Vec::new();
    let mut ok = true;
    for (name, run) in [("baseline", &f.baseline), ("mcsu", &f.mcsu)] {
        let a = audit(&f.quantized, &run.init, &run.tuned, 1e-5).unwrap();
        let worst = a
            .layers
            .iter()
            .map(|l| l.row_deviation.unwrap_or(0.0).max(l.rank1_residual.unwrap_or(0.0)))
            .fold(0.0, f64::max);
        let moved = !run.tuned.same_values(&run.init);
        ok &= a.passed() && moved && run.report.losses.len() == ITERS;
        lines.push(format!("{name}: {} layer audits, worst {worst:.1e}", a.layers.len()));
    }
    let codes_after = encode_checkpoint(&f.quantized, &f.schedule).unwrap();
    ok &= codes_before == codes_after;
    verdict(
        4,
        ok,
        format!("{}; codes identical: {}; fixture built in {:.0}s", lines.join("; "), codes_before == codes_after, f.secs),
    );
}

fn criterion_5_expert_routing() {
    let start = Instant::now();
    let f = fixture();
    let t_total = f.schedule.steps;
    let mut exceptions = 0;
    for t in 0..t_total {
        if f.mcsu.tuned.expert_for(t).unwrap() != t * 2 / t_total || expert_index(t as i64, 2, t_total).unwrap() != t * 2 / t_total {
            exceptions += 1;
        }
    }
    let train_queries: usize = f.mcsu.routes.iter().map(|(_, ts)| ts.len()).sum();
    exceptions += f.mcsu.routes.iter().flat_map(|(e, ts)| ts.iter().map(move |t| (e, t))).filter(|(e, t)| **t * 2 / t_total != **e).count();

    let sched = f.schedule.build().unwrap();
    let cfg = SampleConfig { n_steps: t_total, batch: 2, ..Default::default() };
    let out = sample(&f.quantized, ScaleSource::Bank(&f.mcsu.tuned), &sched, &cfg).unwrap();
    let visited: Vec<usize> = out.visits.iter().map(|v| v.t).collect();
    exceptions += out.visits.iter().filter(|v| v.expert != Some(v.t * 2 / t_total)).count();
    let covers_all = visited.len() == t_total && (0..t_total).all(|t| visited.contains(&t));

    let one = ExpertBank::from_parts(
        t_total,
        ScaleMode::Mcsu,
        f.mcsu.tuned.layer_names().to_vec(),
        vec![f.mcsu.tuned.expert(1).to_vec()],
    )
    .unwrap();
    let scfg = SampleConfig { n_steps: 25, batch: 4, seed: 3, ..Default::default() };
    let a = sample(&f.quantized, ScaleSource::Bank(&one), &sched, &scfg).unwrap();
    let b = sample(&f.quantized, ScaleSource::Sets(one.expert(0)), &sched, &scfg).unwrap();
    let x: Tensor<f32> = rng::normal_tensor(&mut rng::stream(5, Stream::Data), vec![4, 1, 16, 16]);
    let ts = [0, 33, 66, 99];
    let pa = predict_noise(&f.quantized, &x, &ts, ScaleSource::Bank(&one)).unwrap();
    let pb = predict_noise(&f.quantized, &x, &ts, ScaleSource::Sets(one.expert(0))).unwrap();
    let bitwise = a.images.data() == b.images.data() && pa.data() == pb.data();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        5,
        exceptions == 0 && covers_all && bitwise && secs < 120.0,
        format!(
            "{exceptions} routing exceptions over {train_queries} training and {} sampling queries, N=1 bitwise: {bitwise}, {secs:.1}s",
            out.visits.len()
        ),
    );
}

fn criterion_6_parameter_economy() {
    let start = Instant::now();
    let f = fixture();
    let layers = f.quantized.quant_layers();
    let mut counts_ok = true;
    for n in [1usize, 2, 4] {
        let base: usize = layers.iter().map(|l| l.c_out() * n).sum();
        let mcsu: usize = layers.iter().map(|l| (l.c_out() + l.c_in()) * n).sum();
        let banks = [
            ExpertBank::init(&f.quantized, n, 100, ScaleMode::Baseline, ScaleInit::default(), 0).unwrap(),
            ExpertBank::init(&f.quantized, n, 100, ScaleMode::Mcsu, ScaleInit::default(), 0).unwrap(),
        ];
        counts_ok &= banks[0].trainable_param_count() == base
            && banks[1].trainable_param_count() == mcsu
            && expected_trainable(&f.quantized, ScaleMode::Baseline, n) == base
            && expected_trainable(&f.quantized, ScaleMode::Mcsu, n) == mcsu
            && layers.iter().map(|l| trainable_param_count(l.c_out(), l.c_in(), ScaleMode::Mcsu, n)).sum::<usize>() == mcsu;
    }
    let mcsu2: usize = layers.iter().map(|l| (l.c_out() + l.c_in()) * 2).sum();
    let base2: usize = layers.iter().map(|l| l.c_out() * 2).sum();
    counts_ok &= f.mcsu.report.trainable_params == mcsu2 && f.baseline.report.trainable_params == base2;

    let meta = PackMeta {
        task_id: "wide".into(),
        method: Method::Tuneqdm,
        bits: 4,
        iterations: 0,
        seed: 0,
    };
    let toy = storage_report(&f.quantized, &f.schedule, Some((&f.mcsu.tuned, &meta))).unwrap();
    let wide = quantize_model(&Denoiser::<f32>::new(DenoiserConfig::wide(), 0).unwrap(), 4, QuantPolicy::Interior).unwrap();
    let bank = ExpertBank::init(&wide, 2, 100, ScaleMode::Mcsu, ScaleInit::default(), 0).unwrap();
    let pack = encode_scalepack(&bank, &meta).unwrap().len() as f64;
    let ck = encode_checkpoint(&wide, &f.schedule).unwrap().len() as f64;
    let ratio = pack / ck;
    let secs = start.elapsed().as_secs_f64();
    verdict(
        6,
        counts_ok && ratio < 0.01 && secs < 60.0,
        format!(
            "counts exact: {counts_ok}; wide preset pack/checkpoint {:.3}% ({pack} / {ck} bytes); toy preset {:.1}%; {secs:.1}s",
            100.0 * ratio,
            100.0 * toy.pack_to_checkpoint.unwrap()
        ),
    );
}

fn criterion_7_end_to_end_direction() {
    let start = Instant::now();
    let f = fixture();
    let sched = f.schedule.build().unwrap();
    let cfg = EvalConfig::default();
    let before = eval_loss(&f.quantized, ScaleSource::Bank(&f.mcsu.init), &f.target_eval, &sched, 7, &cfg).unwrap();
    let ptq = evaluate(&f.quantized, ScaleSource::Ptq, &f.target_eval, &sched, 7, &cfg).unwrap();
    let after = evaluate(&f.quantized, ScaleSource::Bank(&f.mcsu.tuned), &f.target_eval, &sched, 7, &cfg).unwrap();
    let drop = 1.0 - after.loss / before;
    let secs = start.elapsed().as_secs_f64() + f.secs;
    verdict(
        7,
        drop >= 0.2 && after.frechet < ptq.frechet && secs < 900.0,
        format!(
            "eval loss {before:.4} -> {:.4} ({:.0}% drop, PTQ {:.4}); Frechet {:.2} -> {:.2}; {secs:.0}s including shared runs",
            after.loss,
            100.0 * drop,
            ptq.loss,
            ptq.frechet,
            after.frechet
        ),
    );
}

fn criterion_8_storage() {
    let f = fixture();
    let s = storage_report(&f.quantized, &f.schedule, None).unwrap();
    verdict(
        8,
        s.compression_ratio >= 7.5,
        format!(
            "{:.2}x ({} real32 weight bytes vs {} packed + {} dense + {} scale/zero); checkpoint file {} bytes",
            s.compression_ratio, s.fp32_weight_bytes, s.packed_weight_bytes, s.dense_weight_bytes, s.scale_zero_bytes, s.checkpoint_bytes
        ),
    );
}

fn criterion_9_reproducibility_and_task_switching() {
    let start = Instant::now();
    let f = fixture();
    let sched = f.schedule.build().unwrap();
    let cfg = SampleConfig { n_steps: 50, batch: 8, seed: 42, eta: 0.5 };
    let first = sample(&f.quantized, ScaleSource::Ptq, &sched, &cfg).unwrap().images;
    let again = sample(&f.quantized, ScaleSource::Ptq, &sched, &cfg).unwrap().images;
    let mut ok = first.data() == again.data();

    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("shared.tqdm");
    save_checkpoint(&ck, &f.quantized, &f.schedule).unwrap();
    let mut expected = Vec::new();
    for (task, run) in [("rings", &f.mcsu), ("checker", &f.baseline)] {
        let path = dir.path().join(format!("{task}.tqsp"));
        let meta = PackMeta {
            task_id: task.into(),
            method: run.report.method,
            bits: 4,
            iterations: ITERS,
            seed: 0,
        };
        save_scalepack(&path, &run.tuned, &meta).unwrap();
        let images = sample(&f.quantized, ScaleSource::Bank(&run.tuned), &sched, &cfg).unwrap().images;
        expected.push((path, images));
    }
    let shared = load_checkpoint(&ck).unwrap().model;
    for (path, images) in &expected {
        let (bank, _) = load_scalepack(path, &shared).unwrap();
        let replay = sample(&shared, ScaleSource::Bank(&bank), &sched, &cfg).unwrap().images;
        ok &= replay.data() == images.data();
    }
    let distinct = expected[0].1.data() != expected[1].1.data();
    let d = frechet_pixel_distance(&expected[0].1.cast::<f64>(), &expected[1].1.cast::<f64>()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        9,
        ok && distinct && secs < 300.0,
        format!("bitwise replay: {ok}; packs produce different samples: {distinct} (Frechet {d:.1}); {secs:.1}s"),
    );
}
