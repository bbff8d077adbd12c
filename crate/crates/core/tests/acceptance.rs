//! Acceptance suite. Prints one PASS/FAIL line per criterion; a criterion
//! also fails when it exceeds its runtime budget.
//!
//! Arguments select criteria by number. `COSEG_ACCEPTANCE=quick` shortens
//! the two training criteria (6 and 7); their lines are then marked
//! `REDUCED` and carry no verdict. With `COSEG_ACCEPTANCE_STRICT=1` the
//! process exits nonzero when any criterion fails.

mod common;

use std::cell::RefCell;
use std::io::Write;
use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use coseg::autograd::{softmax_tensor, Graph, Tensor, Var};
use coseg::data::{generate_sample, make_batch, Batch, Dataset, GeneratorSpec, Sample, Split};
use coseg::decoder::Mode;
use coseg::losses::{scc_loss, sem_seg_loss, total_loss, total_loss_var};
use coseg::metrics::{aji_ids, dice, hausdorff, miou, object_f1_ids, panoptic_quality_ids, Contingency};
use coseg::nn::{Binder, GradMode, ParamId};
use coseg::pipeline::{evaluate, run_ablation, Model, Trainer, ABLATION_ROWS};
use coseg::stp::selective_scan;
use coseg::ExperimentConfig;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

fn grid(rows: &[&str]) -> Vec<u32> {
    rows.iter().flat_map(|r| r.chars().map(|c| c.to_digit(10).unwrap_or(0))).collect()
}

fn metric_oracles() -> Outcome {
    // semantic fixtures
    let g = [1u8, 1, 1, 1, 0, 0];
    let p = [1u8, 1, 0, 0, 0, 0];
    ensure(close(dice(&p, &g, 1).unwrap(), 4.0 / 6.0), "dice fixture")?;
    ensure(close(miou(&p, &g, 1).unwrap(), 0.5), "miou fixture")?;
    ensure(dice(&[0, 0, 1, 1], &[1, 1, 0, 0], 1).unwrap() == 0.0, "disjoint dice")?;
    let (h, w) = (6, 6);
    let mut a = vec![0u8; 36];
    let mut b = vec![0u8; 36];
    a[0] = 1;
    b[3 * w + 4] = 1;
    ensure(hausdorff(&a, &b, h, w, 1).unwrap() == Some(5.0), "3-4-5 hausdorff")?;
    let sq = |y0: usize| {
        let mut m = vec![0u8; 36];
        for y in y0..y0 + 2 {
            m[y * w + 1] = 1;
            m[y * w + 2] = 1;
        }
        m
    };
    ensure(hausdorff(&sq(1), &sq(2), h, w, 1).unwrap() == Some(1.0), "shifted square hausdorff")?;
    // instance fixtures
    let gt = grid(&["11..", "11..", "..22", "..22"]);
    let pr = grid(&["11..", "11..", "....", "...."]);
    ensure(close(object_f1_ids(&pr, &gt).unwrap(), 2.0 / 3.0), "f1 one of two")?;
    let g1 = grid(&["11..", "11..", "....", "...."]);
    let p1 = grid(&["1...", "1...", "1...", "...."]);
    ensure(close(Contingency::build(&g1, &p1).unwrap().iou(1, 1), 0.4), "iou 0.4")?;
    ensure(object_f1_ids(&p1, &g1).unwrap() == 0.0, "iou 0.4 is not a match")?;
    let p2 = grid(&["11..", "....", "....", "...."]);
    ensure(close(aji_ids(&p2, &g1).unwrap(), 0.5), "aji half cover")?;
    let c = Contingency::build(&g1, &p2).unwrap();
    ensure(c.overlap.get(&(1, 1)) == Some(&2) && c.gt_area[&1] == 4 && c.pred_area[&1] == 2, "contingency counts")?;
    let gq = grid(&["1111", "....", "...."]);
    let pq_ = grid(&[".111", "1...", "...."]);
    let q = panoptic_quality_ids(&pq_, &gq).unwrap();
    ensure(close(q.pq, 0.6) && close(q.sq, 0.6) && q.rq == 1.0, "pq 3/5")?;
    let gh = grid(&["111.", "...."]);
    let ph = grid(&[".111", "...."]);
    ensure(panoptic_quality_ids(&ph, &gh).unwrap().pq == 0.0, "iou one half is not a match")?;
    // randomized conformance
    let mut pairs = 0;
    for seed in 0..500 {
        let (h, w, gt, pred) = common::random_pair(seed);
        ensure(close(object_f1_ids(&pred, &gt).unwrap(), common::oracle_f1(&gt, &pred)), format!("f1 map {seed}"))?;
        let q = panoptic_quality_ids(&pred, &gt).unwrap();
        let (pq, sq, rq) = common::oracle_pq(&gt, &pred);
        ensure(close(q.pq, pq) && close(q.sq, sq) && close(q.rq, rq), format!("pq map {seed}"))?;
        ensure(close(aji_ids(&pred, &gt).unwrap(), common::oracle_aji(&gt, &pred)), format!("aji map {seed}"))?;
        if seed < 100 {
            let mg: Vec<u8> = gt.iter().map(|&v| (v != 0) as u8).collect();
            let mp: Vec<u8> = pred.iter().map(|&v| (v != 0) as u8).collect();
            let bg: Vec<bool> = mg.iter().map(|&v| v == 1).collect();
            let bp: Vec<bool> = mp.iter().map(|&v| v == 1).collect();
            let got = hausdorff(&mp, &mg, h, w, 1).unwrap();
            let want = common::oracle_hausdorff(&bp, &bg, h, w);
            ensure(
                match (got, want) {
                    (Some(x), Some(y)) => close(x, y),
                    (x, y) => x == y,
                },
                format!("hausdorff map {seed}"),
            )?;
        }
        pairs += common::exhaustive_matching(&gt, &pred).len();
    }
    Ok(format!("15 fixtures exact, 500 random maps agree with exhaustive matching ({pairs} matched pairs)"))
}

fn ssm_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let l = rng.random_range(1..=64);
        let d = rng.random_range(1..=16);
        let n = rng.random_range(1..=16);
        let mut r = |len: usize, lo: f64, hi: f64| (0..len).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
        let x = r(l * d, -1.0, 1.0);
        let delta = r(l * d, 0.01, 0.5);
        let a = r(d * n, -3.0, -0.5);
        let bm = r(l * n, -1.0, 1.0);
        let cm = r(l * n, -1.0, 1.0);
        let dsk = r(d, -1.0, 1.0);
        let g = Graph::new();
        let t = |v: &Vec<f64>, s: &[usize]| g.constant(Tensor::new(s.to_vec(), v.clone()));
        let y = selective_scan(t(&x, &[1, l, d]), t(&delta, &[1, l, d]), t(&a, &[d, n]), t(&bm, &[1, l, n]), t(&cm, &[1, l, n]), t(&dsk, &[d]));
        let want = common::scan_oracle(&x, &delta, &a, &bm, &cm, &dsk, l, d, n);
        for (p, q) in y.value().data().iter().zip(&want) {
            worst = worst.max((p - q).abs());
        }
    }
    ensure(worst < 1e-5, format!("max abs error {worst:.3e}"))?;
    Ok(format!("100 sequences, max abs error {worst:.3e}"))
}

fn tiny_spec() -> GeneratorSpec {
    GeneratorSpec {
        image_size: 64,
        num_instances: 4,
        min_radius: 3.0,
        max_radius: 5.0,
        ..GeneratorSpec::default()
    }
}

fn tiny_batch(model: &Model, seed: u64) -> Batch {
    let spec = tiny_spec();
    let samples: Vec<Sample> = (0..2).map(|i| generate_sample(seed * 10 + i, &spec).unwrap()).collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    make_batch(&refs, model.coarse_factor()).unwrap()
}

fn loss_value(model: &Model, batch: &Batch) -> f64 {
    let g = Graph::new();
    let b = Binder::new(&g, &model.store, GradMode::None);
    let fwd = model.forward(&b, &batch.images).unwrap();
    model.loss(&fwd, batch).unwrap().0.item()
}

fn gradient_check() -> Outcome {
    let model = Model::new(&ExperimentConfig::tiny()).map_err(|e| e.to_string())?;
    let batch = tiny_batch(&model, 1);
    let graph = Graph::new();
    let b = Binder::new(&graph, &model.store, GradMode::Trainable);
    let fwd = model.forward(&b, &batch.images).unwrap();
    let (loss, _) = model.loss(&fwd, &batch).unwrap();
    let grads = graph.backward(loss);
    let ad: Vec<(ParamId, Tensor)> = b
        .bound()
        .into_iter()
        .filter(|(id, _)| model.store.is_trainable(*id))
        .map(|(id, v)| (id, grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(model.store.get(id).shape()))))
        .collect();
    let trainable = model.store.iter().filter(|(_, p)| p.trainable).count();
    ensure(ad.len() == trainable, format!("{} of {trainable} trainable tensors reached by the loss", ad.len()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (step, rtol, floor) = (1e-5, 1e-2, 1e-7);
    let (mut total, mut good, mut zero) = (0usize, 0usize, 0usize);
    let mut worst = String::new();
    for (id, g) in &ad {
        for _ in 0..g.numel().min(3) {
            let i = rng.random_range(0..g.numel());
            let mut m = model.clone();
            m.store.get_mut(*id).data_mut()[i] += step;
            let fp = loss_value(&m, &batch);
            m.store.get_mut(*id).data_mut()[i] -= 2.0 * step;
            let fm = loss_value(&m, &batch);
            let fd = (fp - fm) / (2.0 * step);
            let a = g.data()[i];
            total += 1;
            if (a - fd).abs() <= rtol * a.abs().max(fd.abs()) {
                good += 1;
            } else if a.abs().max(fd.abs()) < floor {
                good += 1;
                zero += 1;
            } else {
                worst = format!("{}[{i}]: autodiff {a:.4e} vs fd {fd:.4e}", model.store.name(*id));
            }
        }
    }
    let frac = good as f64 / total as f64;
    ensure(frac >= 0.99, format!("{good}/{total} coordinates agree; e.g. {worst}"))?;
    Ok(format!("{good}/{total} sampled coordinates over {} trainable tensors within 1e-2 relative ({zero} both below {floor:e})", ad.len()))
}

fn semantic_grad_norm_on_instance_head(cfg: &ExperimentConfig, seed: u64) -> f64 {
    let model = Model::new(cfg).unwrap();
    let batch = tiny_batch(&model, seed);
    let g = Graph::new();
    let b = Binder::new(&g, &model.store, GradMode::Trainable);
    let fwd = model.forward(&b, &batch.images).unwrap();
    let (loss, _) = sem_seg_loss(fwd.second.final_sem.unwrap(), &batch.targets.semantic).unwrap();
    let grads = g.backward(loss);
    b.bound()
        .into_iter()
        .filter(|(id, _)| model.store.name(*id).starts_with("decoder.instance."))
        .filter_map(|(_, v)| grads.get(v).map(|t| t.data().iter().map(|x| x * x).sum::<f64>()))
        .sum::<f64>()
        .sqrt()
}

fn cross_guidance() -> Outcome {
    let mut min_on = f64::INFINITY;
    let mut max_off: f64 = 0.0;
    for seed in 0..10 {
        let on = ExperimentConfig {
            seed,
            ..ExperimentConfig::tiny()
        };
        let off = ExperimentConfig { enable_c: false, ..on.clone() };
        min_on = min_on.min(semantic_grad_norm_on_instance_head(&on, seed));
        max_off = max_off.max(semantic_grad_norm_on_instance_head(&off, seed));
    }
    ensure(min_on > 1e-8 && max_off == 0.0, format!("min norm with C {min_on:.3e}, max without {max_off:.3e}"))?;
    Ok(format!("10/10 draws: min norm {min_on:.3e} with cross guidance, exactly 0 without"))
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_self: f64 = 0.0;
    let mut min_kl = f64::INFINITY;
    for i in 0..1000 {
        let shape = [1 + i % 2, 2 + i % 3, 1 + i % 4, 1 + i % 5];
        let mut r = || Tensor::from_fn(&shape, |_| rng.random_range(-4.0..4.0));
        let (p, q) = (softmax_tensor(&r(), 1), softmax_tensor(&r(), 1));
        let g = Graph::new();
        let (vp, vq): (Var, Var) = (g.constant(p), g.constant(q));
        worst_self = worst_self.max(scc_loss(vp, vp, false).unwrap().item().abs());
        min_kl = min_kl.min(scc_loss(vp, vq, false).unwrap().item());
    }
    ensure(worst_self == 0.0, format!("scc(p, p) = {worst_self:e}"))?;
    ensure(min_kl >= 0.0, format!("negative scc {min_kl:e}"))?;
    let lambda1 = ExperimentConfig::default().lambda1;
    ensure(lambda1 == 0.5, format!("default lambda1 {lambda1}"))?;
    let mut worst_total: f64 = 0.0;
    for _ in 0..100 {
        let v: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..10.0)).collect();
        let want = 0.5 * (v[0] + v[1]) + v[2] + v[3];
        let g = Graph::new();
        let c = |x: f64| g.constant(Tensor::scalar(x));
        let graph_total = total_loss_var(lambda1, Some(c(v[0])), Some(c(v[1])), c(v[2]), c(v[3])).item();
        worst_total = worst_total.max((total_loss(lambda1, v[0], v[1], v[2], v[3]) - want).abs()).max((graph_total - want).abs());
    }
    let model = Model::new(&ExperimentConfig::tiny()).unwrap();
    let batch = tiny_batch(&model, 2);
    let g = Graph::new();
    let b = Binder::new(&g, &model.store, GradMode::None);
    let (_, rep) = model.loss(&model.forward(&b, &batch.images).unwrap(), &batch).unwrap();
    worst_total = worst_total.max((rep.total - (0.5 * (rep.scc + rep.bm) + rep.seg_sem + rep.seg_ins)).abs());
    ensure(worst_total <= 1e-6, format!("total differs by {worst_total:e}"))?;
    Ok(format!("scc(p,p)=0 and scc>=0 on 1000 pairs (min {min_kl:.3e}); total identity error {worst_total:.1e}"))
}

fn quick() -> bool {
    std::env::var("COSEG_ACCEPTANCE").is_ok_and(|v| v == "quick")
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[derive(Clone, Default)]
struct SharedLog(Rc<RefCell<Vec<u8>>>);

impl Write for SharedLog {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.borrow_mut().extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

impl SharedLog {
    fn step_losses(&self) -> Vec<f64> {
        String::from_utf8_lossy(&self.0.borrow())
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).expect("log line")["loss"]["total"].as_f64().expect("total"))
            .collect()
    }
}

fn learnability() -> Outcome {
    let epochs = if quick() { 20 } else { 200 };
    let spec = GeneratorSpec::default();
    let mut dices = Vec::new();
    let mut ajis = Vec::new();
    let mut drops = Vec::new();
    let mut detail = Vec::new();
    for seed in 0..3u64 {
        let samples: Vec<Sample> = (0..8).map(|i| generate_sample(100 * seed + i, &spec).unwrap()).collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        let log = SharedLog::default();
        let mut t = Trainer::new(Model::new(&cfg).unwrap()).with_log(Box::new(log.clone()));
        let (mut d, mut a, mut ran) = (0.0, 0.0, 0);
        for e in 1..=epochs {
            t.run_epoch(&refs).map_err(|e| e.to_string())?;
            ran = e;
            if e % 10 == 0 || e == epochs {
                let rep = evaluate(&t.model, &refs).map_err(|e| e.to_string())?;
                (d, a) = (rep.mean_dice, rep.binary_aji);
                if d > 0.95 && a > 0.70 {
                    break;
                }
            }
        }
        let losses = log.step_losses();
        if losses.len() >= 50 {
            drops.push(1.0 - (losses[48] + losses[49]) / (losses[0] + losses[1]));
        }
        detail.push(format!("seed {seed}: dice {d:.3} aji {a:.3} after {ran} epochs"));
        dices.push(d);
        ajis.push(a);
    }
    let (md, ma) = (median(dices), median(ajis));
    let drop = if drops.is_empty() { String::new() } else { format!("; median loss drop over 50 steps {:.0}%", 100.0 * median(drops)) };
    let text = format!("median dice {md:.3}, aji {ma:.3} ({}){drop}", detail.join("; "));
    ensure(md > 0.95 && ma > 0.70, text.clone())?;
    Ok(text)
}

fn ablation() -> Outcome {
    let epochs = if quick() { 1 } else { 30 };
    let data = Dataset::synthetic(64, 7, &GeneratorSpec::default()).map_err(|e| e.to_string())?;
    let base = ExperimentConfig {
        epochs,
        ..ExperimentConfig::default()
    };
    let rows = run_ablation(&base, &data, |r| {
        eprintln!("  ablation row {} ({}, {}, {}): mean PQ {:.4} in {:.0}s", r.row, r.enable_p, r.enable_d, r.enable_c, r.mean_pq, r.seconds)
    })
    .map_err(|e| e.to_string())?;
    let toggles: Vec<_> = rows.iter().map(|r| (r.enable_p, r.enable_d, r.enable_c)).collect();
    ensure(toggles == ABLATION_ROWS.to_vec(), "configurations differ from the table rows")?;
    let (base_pq, full_pq) = (rows[0].mean_pq, rows[7].mean_pq);
    let text = format!("8 rows on {} test images after {epochs} epochs; full {full_pq:.4} vs baseline {base_pq:.4}", data.split(Split::Test).len());
    ensure(full_pq >= base_pq, text.clone())?;
    Ok(text)
}

fn two_forward_contract() -> Outcome {
    let spec = tiny_spec();
    let samples: Vec<Sample> = (0..2).map(|i| generate_sample(i, &spec).unwrap()).collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    for (c, calls) in [(true, 2), (false, 1)] {
        let cfg = ExperimentConfig {
            enable_c: c,
            ..ExperimentConfig::tiny()
        };
        let mut t = Trainer::new(Model::new(&cfg).unwrap());
        for step in 0..3 {
            t.model.decoder.reset_instrumentation();
            t.train_step(&refs).map_err(|e| e.to_string())?;
            let n = t.model.decoder.invocations();
            ensure(n == calls, format!("enable_c={c}: {n} decoder calls at step {step}"))?;
            let prompts = t.model.decoder.prompt_trace();
            if c {
                ensure(prompts[0] == (Mode::Forward1, 0.0), format!("first pass prompts {:?}", prompts[0]))?;
                ensure(prompts[1].0 == Mode::Forward2, "second pass mode")?;
            }
        }
    }
    Ok("2 decoder calls per step with cross guidance, 1 without; first-pass constraints exactly 0".into())
}

fn lr_schedule() -> Outcome {
    let cfg = ExperimentConfig::tiny();
    ensure(cfg.lr == 1e-4 && cfg.lr_decay == 0.98, "default optimiser settings")?;
    let sample = generate_sample(0, &tiny_spec()).unwrap();
    let mut t = Trainer::new(Model::new(&cfg).unwrap());
    for e in 1..=3 {
        t.run_epoch(&[&sample]).map_err(|e| e.to_string())?;
        let want = 1e-4 * 0.98f64.powi(e);
        ensure((t.state.lr_current - want).abs() <= 1e-12, format!("epoch {e}: lr {}", t.state.lr_current))?;
    }
    for e in 0..=200 {
        ensure((cfg.lr_at_epoch(e) - 1e-4 * 0.98f64.powi(e as i32)).abs() <= 1e-12, format!("schedule at epoch {e}"))?;
    }
    Ok("lr after epoch e equals 1e-4 * 0.98^e for e <= 200".into())
}

type Criterion = (&'static str, fn() -> Outcome, f64);

fn main() {
    let criteria: [Criterion; 9] = [
        ("metric oracle suite", metric_oracles, 60.0),
        ("selective scan oracle", ssm_oracle, 10.0),
        ("gradient check", gradient_check, 300.0),
        ("cross-guidance liveness", cross_guidance, 60.0),
        ("loss identities", loss_identities, 10.0),
        ("desk-scale learnability", learnability, 1800.0),
        ("ablation structure", ablation, 7200.0),
        ("two-forward contract", two_forward_contract, 60.0),
        ("lr schedule", lr_schedule, 1.0),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f, budget)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let mut outcome = f();
        let secs = start.elapsed().as_secs_f64();
        if secs > *budget {
            outcome = Err(format!("{} [over the {budget:.0}s budget]", outcome.unwrap_or_else(|e| e)));
        }
        let reduced = quick() && (n == 6 || n == 7);
        let tag = match (&outcome, reduced) {
            (_, true) => "REDUCED",
            (Ok(_), false) => "PASS",
            (Err(_), false) => "FAIL",
        };
        let (Ok(msg) | Err(msg)) = outcome;
        println!("criterion {n} [{tag}] {name}: {msg} ({secs:.1}s)");
        failed += (tag == "FAIL") as usize;
    }
    if failed > 0 && std::env::var("COSEG_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
