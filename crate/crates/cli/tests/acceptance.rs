//! Acceptance criteria, one PASS/FAIL line each, at the stated tolerances.
//!
//! Lines go straight to stderr so they show without `--nocapture`. The
//! test fails if any criterion fails.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shelfnet::analysis::{count_flops, count_params, enumerate_paths, format_count, CostReport, PathMode, DEFAULT_PATH_CAP};
use shelfnet::arch::*;
use shelfnet::tensor::{kernels, BnConfig, Mode, RunningStats, Sgd, SgdConfig, Tape, Tensor4, Var};
use shelfnet::train::*;

struct Ledger {
    rows: Vec<(String, bool, String)>,
}

impl Ledger {
    fn check(&mut self, name: &str, pass: bool, detail: impl Into<String>) {
        let detail = detail.into();
        let line = format!("[{}] {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
        let _ = std::io::stderr().write_all(line.as_bytes());
        self.rows.push((name.to_string(), pass, detail));
    }
}

fn id(s: &str) -> BlockId {
    s.parse().unwrap()
}

fn path(s: &str) -> Vec<BlockId> {
    s.split_whitespace().map(id).collect()
}

fn rel(actual: u64, expected: f64) -> f64 {
    (actual as f64 - expected) / expected
}

fn resnet(depth: usize) -> BackboneSpec {
    BackboneSpec::resnet(depth).unwrap()
}

fn shelf(variant: Variant, depth: usize) -> BlockGraph {
    build_shelf(&ShelfSpec::new(variant, resnet(depth), 21)).unwrap()
}

fn paths(l: &mut Ledger) {
    let t = Instant::now();
    let g = shelf(Variant::Shelfnet, 50);
    let r = enumerate_paths(&g, id("A0"), id("A4"), PathMode::List { cap: DEFAULT_PATH_CAP }).unwrap();
    let seg = enumerate_paths(&shelf(Variant::Segnet, 50), id("A0"), id("A2"), PathMode::Count).unwrap();
    let examples = [
        "A0 A1 A2 A3 A4",
        "A0 A1 A2 A3 B3 C3 C4 B4 A4",
        "A0 B0 B1 B2 A2 A3 A4",
        "A0 B0 C0 D0 D1 D2 C2 B2 B3 C3 C4 B4 A4",
    ];
    let listed = examples.iter().all(|p| r.contains(&path(p)));
    let secs = t.elapsed().as_secs_f64();
    l.check(
        "path counts",
        r.path_count == 29 && seg.path_count == 4 && listed && secs < 1.0,
        format!(
            "shelfnet A0->A4 {} (29), segnet A0->A2 {} (4), four example paths listed: {listed}, {secs:.3}s (< 1s)",
            r.path_count, seg.path_count
        ),
    );
}

fn deepest(l: &mut Ledger) {
    let t = Instant::now();
    let longest = |v: Variant| {
        let g = build_shelf(&ShelfSpec::mini(v, 8, 2)).unwrap();
        enumerate_paths(&g, g.source, g.sink, PathMode::Count).unwrap().longest_path_length
    };
    let (s, gr) = (longest(Variant::ShelfnetSimplified), longest(Variant::GridnetSimplified));
    let secs = t.elapsed().as_secs_f64();
    l.check(
        "deepest paths",
        s == 16 && gr == 10 && secs < 1.0,
        format!("shelfnet_simplified {s} (16), gridnet_simplified {gr} (10), {secs:.3}s (< 1s)"),
    );
}

fn params(l: &mut Ledger) {
    for (depth, expected) in [(18, 11.7e6), (101, 44.5e6)] {
        let p = count_params(&build_backbone_classifier(&resnet(depth), 1000).unwrap()).total_params;
        let e = rel(p, expected);
        l.check(
            &format!("resnet{depth} params"),
            e.abs() <= 0.01,
            format!("{p} ({}) vs {} ({:+.2}%, tol 1%)", format_count(p), format_count(expected as u64), e * 100.0),
        );
    }
    let r50 = count_params(&build_backbone_classifier(&resnet(50), 1000).unwrap()).total_params;
    l.check(
        "resnet50 params (exempt from the 35.6M reference value)",
        rel(r50, 25.6e6).abs() <= 0.01,
        format!("{r50} ({}) matches the standard definition 25.6M within 1%", format_count(r50)),
    );

    let spec = ShelfSpec::new(Variant::Shelfnet, resnet(50), 21);
    let shared = count_params(&build_shelf(&spec).unwrap());
    let unshared_graph = build_shelf(&spec.clone().unshared()).unwrap();
    let unshared = count_params(&unshared_graph);
    let e = rel(shared.total_params, 38.7e6);
    l.check(
        "ShelfNet50 params",
        e.abs() <= 0.05,
        format!("{} ({}) vs 38.7M ({:+.2}%, tol 5%)", shared.total_params, format_count(shared.total_params), e * 100.0),
    );
    let e = rel(unshared.total_params, 45.8e6);
    l.check(
        "ShelfNet50 unshared twin params",
        e.abs() <= 0.05,
        format!(
            "{} ({}) vs 45.8M ({:+.2}%, tol 5%); see README, parameter counts",
            unshared.total_params,
            format_count(unshared.total_params),
            e * 100.0
        ),
    );
    let nine_c2: u64 = unshared_graph
        .nodes
        .iter()
        .filter_map(|n| match n.kind {
            BlockKind::SBlock { channels, .. } => Some(9 * (channels * channels) as u64),
            _ => None,
        })
        .sum();
    let delta = unshared.total_params - shared.total_params;
    l.check(
        "shared-vs-unshared delta",
        delta == nine_c2,
        format!("{delta} == 9*sum(c^2) over S-blocks = {nine_c2}"),
    );
}

fn flops(l: &mut Ledger) {
    let table = [
        ("resnet18", 9.5e9),
        ("resnet18-dilated", 48.2e9),
        ("resnet50", 21.4e9),
        ("resnet50-dilated", 99.8e9),
        ("resnet101", 40.8e9),
        ("resnet101-dilated", 177.5e9),
    ];
    for (name, expected) in table {
        let g = build_backbone_classifier(&BackboneSpec::parse(name).unwrap(), 1000).unwrap();
        let macs = count_flops(&g, 512, 512).unwrap().total_macs;
        let e = rel(macs, expected);
        l.check(
            &format!("{name} MACs at 512x512"),
            e.abs() <= 0.10,
            format!("{} vs {} ({:+.2}%, tol 10%)", format_count(macs), format_count(expected as u64), e * 100.0),
        );
    }
    let base = ShelfSpec::new(Variant::Shelfnet, resnet(50), 21);
    let quarter = base.clone().with_channels(vec![16, 32, 64, 128]);
    let macs = |s: &ShelfSpec| count_flops(&build_shelf(s).unwrap(), 512, 512).unwrap().shelf().macs;
    let (full, q) = (macs(&base), macs(&quarter));
    l.check(
        "quadratic channel scaling",
        full == 16 * q,
        format!("shelf MACs {full} at full width, {q} at 1/4 width; ratio exactly 16: {}", full == 16 * q),
    );
}

type Op = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>;

/// Largest violation of `|analytic - numeric| <= atol + rtol * |numeric|`,
/// as a ratio; at most 1 passes.
fn fd_worst(inputs: &[Tensor4<f64>], f: &Op) -> f64 {
    const H: f64 = 1e-6;
    let eval = |ins: &[Tensor4<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor4::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let err = (analytic.data()[i] - numeric).abs();
            worst = worst.max(err / (1e-5 + 1e-3 * numeric.abs()));
        }
    }
    worst
}

fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor4::uniform(tape.shape(y), -1.0, 1.0, &mut r);
    let w = tape.constant(w);
    tape.dot(y, w).unwrap()
}

fn autodiff(l: &mut Ledger) {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let mut t = |dims: [usize; 4]| Tensor4::<f64>::uniform(dims, -1.0, 1.0, &mut r);
    let x = t([2, 2, 5, 6]);
    let x2 = t([2, 2, 5, 6]);
    let w = t([3, 2, 3, 3]);
    let wt = t([2, 3, 3, 3]);
    let g = t([1, 2, 1, 1]);
    let b = t([1, 2, 1, 1]);
    let gate = t([2, 2, 1, 1]);
    let z = t([2, 4, 2, 3]).scale(2.0);
    let mut labels: Vec<u8> = (0..12).map(|i| (i * 7 % 4) as u8).collect();
    labels[5] = 255;
    let mask: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();

    let mut cases: Vec<(&str, Vec<Tensor4<f64>>, Op)> = vec![
        ("conv2d", vec![x.clone(), w.clone()], Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], 2, 1, 1).unwrap();
            project(t, y, 1)
        })),
        ("conv2d dilated", vec![x.clone(), w], Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], 1, 2, 2).unwrap();
            project(t, y, 2)
        })),
        ("conv_transpose2d", vec![x.clone(), wt], Box::new(|t, v| {
            let y = t.conv_transpose2d(v[0], v[1], 2, 1, 1).unwrap();
            project(t, y, 3)
        })),
        ("relu", vec![x.clone()], Box::new(|t, v| {
            let y = t.relu(v[0]);
            project(t, y, 4)
        })),
        ("sigmoid", vec![x.clone()], Box::new(|t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y, 5)
        })),
        ("add", vec![x.clone(), x2.clone()], Box::new(|t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            project(t, y, 6)
        })),
        ("dropout", vec![x.clone()], Box::new(|t, v| {
            let y = t.dropout(v[0], 0.3, Mode::Train, 9).unwrap();
            project(t, y, 7)
        })),
        ("bilinear_upsample", vec![x.clone()], Box::new(|t, v| {
            let y = t.bilinear_upsample(v[0], 2).unwrap();
            project(t, y, 8)
        })),
        ("resize", vec![x.clone()], Box::new(|t, v| {
            let y = t.resize(v[0], 3, 9).unwrap();
            project(t, y, 9)
        })),
        ("global_avg_pool", vec![x.clone()], Box::new(|t, v| {
            let y = t.global_avg_pool(v[0]);
            project(t, y, 10)
        })),
        ("max_pool2d", vec![x.clone()], Box::new(|t, v| {
            let y = t.max_pool2d(v[0], 3, 2, 1).unwrap();
            project(t, y, 11)
        })),
        ("scale_channels", vec![x.clone(), gate], Box::new(|t, v| {
            let y = t.scale_channels(v[0], v[1]).unwrap();
            project(t, y, 12)
        })),
        ("dot", vec![x.clone(), x2], Box::new(|t, v| t.dot(v[0], v[1]).unwrap())),
        ("sum", vec![x.clone()], Box::new(|t, v| t.sum(v[0]))),
        ("softmax_cross_entropy", vec![z.clone()], {
            let labels = labels.clone();
            Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels, 255).unwrap().0)
        }),
        ("pixel_nll + masked_mean", vec![z], Box::new(move |t, v| {
            let m = t.pixel_nll(v[0], &labels, 255).unwrap();
            t.masked_mean(m, mask.clone()).unwrap()
        })),
    ];
    for mode in [Mode::Train, Mode::Eval] {
        let name = if mode == Mode::Train { "batch_norm train" } else { "batch_norm eval" };
        cases.push((name, vec![x.clone(), g.clone(), b.clone()], Box::new(move |t, v| {
            let mut stats = RunningStats { mean: vec![0.2, -0.1], var: vec![0.7, 1.3] };
            let y = t.batch_norm(v[0], v[1], v[2], &mut stats, mode, BnConfig::default()).unwrap();
            project(t, y, 13)
        })));
    }
    let failed: Vec<String> = cases
        .iter()
        .filter_map(|(name, ins, f)| {
            let worst = fd_worst(ins, f);
            (worst > 1.0).then(|| format!("{name} ({worst:.2})"))
        })
        .collect();
    l.check(
        "finite-difference gradient checks",
        failed.is_empty(),
        format!("{} ops at rtol 1e-3, atol 1e-5, f64; failing: {failed:?}", cases.len()),
    );

    let (checked, worst) = adjointness();
    l.check(
        "conv / conv-transpose adjointness",
        checked >= 20 && worst < 1e-10,
        format!("{checked} random geometries, max |<Ax,y> - <x,A'y>| = {worst:.2e} (< 1e-10)"),
    );

    let diff = shared_kernel_gradient();
    l.check(
        "shared-kernel gradient",
        diff < 1e-10,
        format!("max |grad(shared) - grad(conv1) - grad(conv2)| = {diff:.2e} over all S-blocks (< 1e-10)"),
    );
}

fn adjointness() -> (usize, f64) {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let (mut checked, mut worst): (usize, f64) = (0, 0.0);
    while checked < 24 {
        let stride = r.random_range(1..=3);
        let k = r.random_range(1..=4);
        let pad = r.random_range(0..k);
        let dil = r.random_range(1..=2);
        let (ci, co) = (r.random_range(1..=3), r.random_range(1..=3));
        let (h, w) = (r.random_range(k * dil..=10), r.random_range(k * dil..=10));
        let geom = kernels::ConvGeom::new(stride, pad, dil);
        let x = Tensor4::<f64>::uniform([2, ci, h, w], -1.0, 1.0, &mut r);
        let kern = Tensor4::<f64>::uniform([co, ci, k, k], -1.0, 1.0, &mut r);
        let Ok(y_shape) = kernels::conv2d(&x, &kern, geom).map(|t| t.shape()) else {
            continue;
        };
        let y = Tensor4::<f64>::uniform(y_shape, -1.0, 1.0, &mut r);
        let lhs = kernels::conv2d(&x, &kern, geom).unwrap().dot(&y).unwrap();
        // Gradient of <conv(x), y> with respect to x is the transposed conv.
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let kv = tape.constant(kern.clone());
        let out = tape.conv2d(xv, kv, stride, pad, dil).unwrap();
        let yv = tape.constant(y.clone());
        let loss = tape.dot(out, yv).unwrap();
        let adj = tape.backward(loss).unwrap().get(xv).unwrap().clone();
        let rhs = x.dot(&adj).unwrap();
        worst = worst.max((lhs - rhs).abs());
        // Stride-dilation-1 cases also go through the explicit transposed kernel.
        let (op_h, op_w) = (
            h + 2 * pad - ((y_shape.h - 1) * stride + k),
            w + 2 * pad - ((y_shape.w - 1) * stride + k),
        );
        if dil == 1 && op_h == op_w && op_h < stride {
            let xt = kernels::conv_transpose2d(&y, &kern, kernels::ConvGeom::transposed(stride, pad, op_h)).unwrap();
            worst = worst.max((lhs - x.dot(&xt).unwrap()).abs());
        }
        checked += 1;
    }
    (checked, worst)
}

fn shared_kernel_gradient() -> f64 {
    let spec = ShelfSpec::mini(Variant::Shelfnet, 4, 3);
    let mut shared = ExecutableNet::<f64>::instantiate(build_shelf(&spec).unwrap(), InitPolicy::default(), 4).unwrap();
    let mut twin = ExecutableNet::<f64>::instantiate(build_shelf(&spec.unshared()).unwrap(), InitPolicy::default(), 4).unwrap();
    let keys: Vec<String> = twin.store().iter().map(|(_, p)| p.key.clone()).collect();
    for key in keys {
        let src = key.replace("/conv1", "/conv").replace("/conv2", "/conv");
        let v = shared.store().by_name(&key).or_else(|| shared.store().by_name(&src)).unwrap().value.clone();
        let pid = twin.store().id(&key).unwrap();
        twin.store_mut().get_mut(pid).value = v;
    }
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor4::<f64>::uniform([2, 3, 32, 32], 0.0, 1.0, &mut r);
    let probe = Tensor4::<f64>::uniform([2, 3, 32, 32], -1.0, 1.0, &mut r);
    for net in [&mut shared, &mut twin] {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = net.forward(&mut tape, xv, Mode::Train).unwrap();
        let p = tape.constant(probe.clone());
        let loss = tape.dot(y, p).unwrap();
        net.store_mut().zero_grad();
        tape.backward_into(loss, net.store_mut()).unwrap();
    }
    let mut worst: f64 = 0.0;
    for n in shared.graph().nodes.iter().filter(|n| matches!(n.kind, BlockKind::SBlock { .. })) {
        let g = &shared.store().by_name(&format!("{}/conv", n.id)).unwrap().grad;
        let g1 = &twin.store().by_name(&format!("{}/conv1", n.id)).unwrap().grad;
        let g2 = &twin.store().by_name(&format!("{}/conv2", n.id)).unwrap().grad;
        worst = worst.max(g.max_abs_diff(&g1.zip_map(g2, |a, b| a + b).unwrap()));
    }
    worst
}

fn cli(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_shelfnet")).current_dir(dir).args(args).output().unwrap();
    assert!(out.status.success(), "shelfnet {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn training(l: &mut Ledger, dir: &Path) -> Duration {
    let t0 = Instant::now();
    let data = synth_dataset::<f32>(0, 0, 4, (64, 64), 4, &SynthConfig::default()).unwrap();
    let g = build_shelf(&ShelfSpec::mini(Variant::Shelfnet, 8, 4)).unwrap();
    let mut net = ExecutableNet::<f32>::instantiate(g, InitPolicy::default(), 0).unwrap();
    let mut opt = Sgd::new(SgdConfig::default());
    let cfg = TrainConfig {
        steps: 300,
        batch_size: 4,
        schedule: LrSchedule::new(0.2, 300),
        sgd: SgdConfig::default(),
        loss: LossKind::CrossEntropy,
        seed: 0,
        eval_every: 0,
        augment: None,
    };
    let rep = train_loop(&mut net, &mut opt, &data, None, &cfg, 0, None).unwrap();
    let loss = rep.final_loss;
    l.check(
        "overfit 4 images",
        loss < 0.05,
        format!("ShelfNet-mini training loss {loss:.4} after 300 steps (< 0.05)"),
    );

    // The default CLI experiment is the seed-0 shapes task.
    let report = cli(dir, &["--json", "--out", "toy", "train"]);
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    let miou = report["final_miou"].as_f64().unwrap();
    let end = report["end_iter"].as_u64().unwrap();
    l.check(
        "held-out mIoU",
        miou >= 0.85 && end <= 2000,
        format!("{miou:.4} on 32 held-out images after {end} steps (>= 0.85 within 2000)"),
    );
    let eval = cli(dir, &["--json", "eval", "--checkpoint", "toy/last.shlf"]);
    let eval: serde_json::Value = serde_json::from_str(&eval).unwrap();
    let again = eval["miou"].as_f64().unwrap();
    l.check(
        "eval reproduces the trace",
        again == miou,
        format!("eval mIoU {again:.6} vs trace-final {miou:.6}"),
    );

    let s = LrSchedule::new(0.01, 2000);
    let (first, last) = (poly_lr(&s, 0).unwrap(), poly_lr(&s, 2000).unwrap());
    l.check(
        "poly schedule endpoints",
        first == 0.01 && last == 0.0,
        format!("lr(0) = {first} (0.01), lr(total) = {last} (0)"),
    );
    t0.elapsed()
}

fn serialization(l: &mut Ledger, dir: &Path) {
    let data = synth_dataset::<f32>(3, 0, 4, (64, 64), 4, &SynthConfig::default()).unwrap();
    let g = build_shelf(&ShelfSpec::mini(Variant::Shelfnet, 8, 4)).unwrap();
    let mut net = ExecutableNet::<f32>::instantiate(g, InitPolicy::default(), 1).unwrap();
    let mut opt = Sgd::new(SgdConfig::default());
    let cfg = TrainConfig {
        steps: 3,
        batch_size: 2,
        schedule: LrSchedule::new(0.05, 10),
        sgd: SgdConfig::default(),
        loss: LossKind::ohem(),
        seed: 0,
        eval_every: 0,
        augment: None,
    };
    train_loop(&mut net, &mut opt, &data, None, &cfg, 0, None).unwrap();
    let path = dir.join("roundtrip.shlf");
    save_checkpoint(&path, &Checkpoint::capture(&net, &opt, 3)).unwrap();
    let (mut back, _) = load_checkpoint::<f32>(&path).unwrap().instantiate().unwrap();
    let before = net.predict(&data.images).unwrap();
    let after = back.predict(&data.images).unwrap();
    let bitwise = before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    l.check(
        "checkpoint round trip",
        bitwise,
        format!("forward outputs bitwise identical after save/load: {bitwise}"),
    );

    cli(dir, &["summarize", "--backbone", "resnet50", "--classes", "21", "--emit-arch", "a.json"]);
    let json = cli(dir, &["--json", "summarize", "--arch", "a.json", "--emit-arch", "b.json"]);
    let a = std::fs::read_to_string(dir.join("a.json")).unwrap();
    let b = std::fs::read_to_string(dir.join("b.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
    let hash = BlockGraph::from_json(&a).unwrap().hash();
    let typed: CostReport = serde_json::from_str(&json).unwrap();
    let idempotent = serde_json::to_string_pretty(&typed).unwrap() + "\n" == json;
    l.check(
        "architecture JSON through the CLI",
        a == b && parsed["graph_hash"] == hash.as_str() && idempotent,
        format!("re-emitted JSON identical: {}, report hash matches: {}, --json re-emit idempotent: {idempotent}", a == b, parsed["graph_hash"] == hash.as_str()),
    );
}

#[test]
fn acceptance_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let mut l = Ledger { rows: Vec::new() };
    paths(&mut l);
    deepest(&mut l);
    params(&mut l);
    flops(&mut l);
    autodiff(&mut l);
    let elapsed = training(&mut l, dir.path());
    l.check(
        "toy training runtime",
        elapsed <= Duration::from_secs(600),
        format!("{:.0}s for the overfit and held-out runs (<= 600s)", elapsed.as_secs_f64()),
    );
    serialization(&mut l, dir.path());

    let failed: Vec<&str> = l.rows.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
    let summary = format!("{} of {} criteria pass\n", l.rows.len() - failed.len(), l.rows.len());
    let _ = std::io::stderr().write_all(summary.as_bytes());
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
