//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N: PASS|FAIL` line with its measurements (visible with
//! `--nocapture`).

use std::fs;
use std::path::Path;
use std::time::Instant;

use flexdistill::commands::{cmd_compare, cmd_gradcheck, cmd_train, FaultInjection, GRADCHECK_TOLERANCE};
use flexdistill::data::{make_glyphs, make_synthetic, GlyphOptions, SyntheticKind};
use flexdistill::losses::{
    cross_entropy, flexible_loss, kd_loss, one_hot, teacher_weights, DistillConfig, Divergence, LogitsBundle, Strategy,
    TermKind,
};
use flexdistill::models::{
    EarlyExitConfig, EarlyExitNet, FlexibleModel, LayerKind, SlimmableConfig, SlimmableNet, SubModelIndex, WidthSpec,
};
use flexdistill::nn::{Mode, ParamStore};
use flexdistill::report::Comparison;
use flexdistill::trainer::{train, TrainConfig};
use flexdistill::{RngState, Tensor, TeacherWeight};

fn verdict(n: u8, what: &str, ok: bool, detail: &str) {
    println!("criterion {n} ({what}): {} | {detail}", if ok { "PASS" } else { "FAIL" });
}

fn random_logits(rng: &mut RngState, n: usize, batch: usize, classes: usize) -> Vec<Tensor<f64>> {
    (0..n)
        .map(|_| Tensor::rand_normal(rng, &[batch, classes], 0.0, 2.0).unwrap())
        .collect()
}

fn random_labels(rng: &mut RngState, batch: usize, classes: usize) -> Tensor<f64> {
    let y: Vec<usize> = (0..batch).map(|_| rng.index_inclusive(classes - 1)).collect();
    one_hot(&y, classes).unwrap()
}

const TOY: &str = r#"{
  "model": { "kind": "early_exit", "layer": "linear", "widths": [4, 5, 6] },
  "data": {
    "source": { "type": "synthetic", "kind": "blobs", "n_per_class": 20, "classes": 3, "noise": 1.0 },
    "val_fraction": 0.25
  },
  "train": { "epochs": 5, "batch_size": 16 },
  "distill": { "strategy": "TAM", "tau": 2.0, "lambda": 0.8 }
}"#;

#[test]
fn criterion_1_gradient_exactness() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.json");
    fs::write(&cfg, TOY).unwrap();
    let start = Instant::now();
    let lines = cmd_gradcheck(&cfg, FaultInjection::default(), &mut Vec::new()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = lines.iter().map(|l| l.max_relative_error).fold(0.0, f64::max);
    let ok = lines.len() == 4 && worst < GRADCHECK_TOLERANCE && secs < 120.0;
    let per: Vec<String> = lines
        .iter()
        .map(|l| format!("{} {:.2e}", l.strategy, l.max_relative_error))
        .collect();
    verdict(1, "gradient exactness", ok, &format!("{} in {secs:.2}s", per.join(", ")));
    assert!(ok);
}

#[test]
fn criterion_2_loss_identities() {
    let mut rng = RngState::new(2024);
    let mut a_gap: f64 = 0.0;
    let mut b_gap: f64 = 0.0;
    let mut d_max: f64 = 0.0;
    for trial in 0..50 {
        let y = random_labels(&mut rng, 6, 5);
        // (a) two sub-models: one teacher whichever the strategy
        let two = LogitsBundle::new(random_logits(&mut rng, 2, 6, 5), y.clone()).unwrap();
        let base = DistillConfig {
            tau: 1.0 + (trial % 4) as f64,
            ..DistillConfig::default()
        };
        let t = |b: &LogitsBundle<f64>, s, c: &DistillConfig| flexible_loss(b, &c.clone().with_strategy(s)).unwrap().total;
        let ipkd = t(&two, Strategy::Ipkd, &base);
        a_gap = a_gap.max((ipkd - t(&two, Strategy::Ta1, &base)).abs());
        a_gap = a_gap.max((ipkd - t(&two, Strategy::Tam, &base)).abs());

        // (b) lambda = 0 leaves only the supervised joint loss
        let n = 2 + trial % 5;
        let many = LogitsBundle::new(random_logits(&mut rng, n, 6, 5), y.clone()).unwrap();
        let zero = DistillConfig {
            lambda: 0.0,
            ..base.clone()
        };
        let joint: f64 = many.logits.iter().map(|l| cross_entropy(l, &y).unwrap()).sum();
        for s in Strategy::ALL {
            b_gap = b_gap.max((t(&many, s, &zero) - joint).abs());
        }

        // (d) identical logits everywhere give zero distillation
        let same = random_logits(&mut rng, 1, 6, 5).remove(0);
        let equal = LogitsBundle::new(vec![same; n], y).unwrap();
        for s in [Strategy::Ipkd, Strategy::Ta1, Strategy::Tam] {
            let loss = flexible_loss(&equal, &base.clone().with_strategy(s)).unwrap();
            for term in loss.terms.iter().filter(|t| matches!(t.kind, TermKind::Kd { .. })) {
                d_max = d_max.max(term.value.abs());
            }
        }
    }
    // (c) exact weights, and their f64 images also sum to 1
    let mut c_ok = true;
    for n in 2..=16usize {
        for i in 1..n {
            let w = teacher_weights(Strategy::Tam, n, i);
            let exact: TeacherWeight = w.iter().map(|&(_, r)| r).sum();
            let float: f64 = w.iter().map(|&(_, r)| *r.numer() as f64 / *r.denom() as f64).sum();
            c_ok &= exact == TeacherWeight::from_integer(1) && (float - 1.0).abs() < 1e-12;
        }
    }
    let ok = a_gap < 1e-12 && b_gap < 1e-12 && c_ok && d_max < 1e-12;
    verdict(
        2,
        "loss identities",
        ok,
        &format!("(a) {a_gap:.1e} (b) {b_gap:.1e} (c) {c_ok} (d) {d_max:.1e}"),
    );
    assert!(ok);
}

#[test]
fn criterion_3_loss_spot_checks() {
    // scalar oracles, written out without the tensor library
    let ce_oracle = {
        let (a, b) = (2f64.ln(), 0f64);
        -(a.exp() / (a.exp() + b.exp())).ln()
    };
    let kl_oracle = {
        let p = [0.5f64, 0.5];
        let q = [3.0 / 4.0, 1.0 / 4.0];
        p[0] * (p[0] / q[0]).ln() + p[1] * (p[1] / q[1]).ln()
    };
    let ce: f64 = cross_entropy(
        &Tensor::from_rows(&[vec![2f64.ln(), 0.0]]).unwrap(),
        &Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(),
    )
    .unwrap();
    let kd: f64 = kd_loss(
        &Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap(),
        &Tensor::from_rows(&[vec![3f64.ln(), 0.0]]).unwrap(),
        1.0,
        Divergence::Kl,
    )
    .unwrap();
    let ok = (ce - 0.405465).abs() < 1e-6
        && (ce - ce_oracle).abs() < 1e-12
        && (kd - 0.143841).abs() < 1e-6
        && (kd - kl_oracle).abs() < 1e-12;
    verdict(3, "loss spot checks", ok, &format!("ce {ce:.6} (oracle {ce_oracle:.6}), kd {kd:.6} (oracle {kl_oracle:.6})"));
    assert!(ok);
}

/// Plain conv → BN → ReLU → avgpool stack with a global-pool linear head,
/// written directly from the definitions.
struct Plain {
    kernels: Vec<(Vec<f64>, usize, usize)>,
    gammas: Vec<Vec<f64>>,
    betas: Vec<Vec<f64>>,
    head_w: Vec<f64>,
    head_b: Vec<f64>,
}

impl Plain {
    /// Returns logits and each layer's batch (mean, biased variance).
    fn forward(&self, x: &[f64], n: usize, mut c: usize, mut h: usize, mut w: usize) -> (Vec<f64>, Vec<(Vec<f64>, Vec<f64>)>) {
        let mut act = x.to_vec();
        let mut moments = Vec::new();
        for (l, (k, cin, cout)) in self.kernels.iter().enumerate() {
            assert_eq!(*cin, c);
            let mut y = vec![0.0; n * cout * h * w];
            for s in 0..n {
                for o in 0..*cout {
                    for i in 0..h {
                        for j in 0..w {
                            let mut acc = 0.0;
                            for ci in 0..c {
                                for di in 0..3 {
                                    for dj in 0..3 {
                                        let (yi, xj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                                        if yi < 0 || xj < 0 || yi >= h as isize || xj >= w as isize {
                                            continue;
                                        }
                                        let xv = act[((s * c + ci) * h + yi as usize) * w + xj as usize];
                                        acc += k[((o * c + ci) * 3 + di) * 3 + dj] * xv;
                                    }
                                }
                            }
                            y[((s * cout + o) * h + i) * w + j] = acc;
                        }
                    }
                }
            }
            let cnt = (n * h * w) as f64;
            let mut means = vec![0.0; *cout];
            let mut vars = vec![0.0; *cout];
            for o in 0..*cout {
                let vals: Vec<f64> = (0..n)
                    .flat_map(|s| y[(s * cout + o) * h * w..(s * cout + o + 1) * h * w].to_vec())
                    .collect();
                let m = vals.iter().sum::<f64>() / cnt;
                let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / cnt;
                means[o] = m;
                vars[o] = v;
                for s in 0..n {
                    for p in 0..h * w {
                        let e = &mut y[(s * cout + o) * h * w + p];
                        let z = self.gammas[l][o] * (*e - m) / (v + 1e-5).sqrt() + self.betas[l][o];
                        *e = z.max(0.0);
                    }
                }
            }
            moments.push((means, vars));
            let (oh, ow) = (h / 2, w / 2);
            let mut pooled = vec![0.0; n * cout * oh * ow];
            for p in 0..n * cout {
                for i in 0..oh {
                    for j in 0..ow {
                        let at = |a: usize, b: usize| y[p * h * w + a * w + b];
                        pooled[p * oh * ow + i * ow + j] =
                            0.25 * (at(2 * i, 2 * j) + at(2 * i, 2 * j + 1) + at(2 * i + 1, 2 * j) + at(2 * i + 1, 2 * j + 1));
                    }
                }
            }
            act = pooled;
            c = *cout;
            h = oh;
            w = ow;
        }
        let classes = self.head_b.len();
        let mut logits = vec![0.0; n * classes];
        for s in 0..n {
            let feat: Vec<f64> = (0..c)
                .map(|ch| act[(s * c + ch) * h * w..(s * c + ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
                .collect();
            for k in 0..classes {
                logits[s * classes + k] = self.head_b[k] + (0..c).map(|ch| self.head_w[k * c + ch] * feat[ch]).sum::<f64>();
            }
        }
        (logits, moments)
    }
}

fn set_random(store: &mut ParamStore<f64>, name: &str, rng: &mut RngState, low: f64, high: f64) {
    let id = store.id(name).unwrap();
    let shape = store.value(id).shape().to_vec();
    store.set_value(id, Tensor::rand_uniform(rng, &shape, low, high).unwrap()).unwrap();
}

fn values(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store.value(store.id(name).unwrap()).data().to_vec()
}

#[test]
fn criterion_4_slimming_consistency() {
    let (n, cin, hw, widths, classes) = (5, 2, 8, [4usize, 6], 3);
    let mut plain_gap: f64 = 0.0;
    let mut eval_gap: f64 = 0.0;
    let mut ee_gap: f64 = 0.0;
    let mut nesting_ok = true;
    let mut isolation_ok = true;
    for seed in 0..20 {
        let mut rng = RngState::new(1000 + seed);
        let cfg = SlimmableConfig::new(LayerKind::Conv, widths.to_vec(), WidthSpec::new(vec![0.5, 1.0]).unwrap());
        let mut st = ParamStore::new();
        let net = SlimmableNet::new(&cfg, &[cin, hw, hw], classes, &mut st, &mut rng).unwrap();
        for l in 1..=2 {
            for k in 1..=2 {
                set_random(&mut st, &format!("block{l}.bn{k}.gamma"), &mut rng, 0.5, 1.5);
                set_random(&mut st, &format!("block{l}.bn{k}.beta"), &mut rng, -0.5, 0.5);
            }
        }
        set_random(&mut st, "head.bias", &mut rng, -0.5, 0.5);
        let x = Tensor::rand_normal(&mut rng, &[n, cin, hw, hw], 0.0, 1.0).unwrap();
        let full = SubModelIndex::new(2, 2).unwrap();

        let plain = Plain {
            kernels: vec![(values(&st, "block1.weight"), cin, 4), (values(&st, "block2.weight"), 4, 6)],
            gammas: vec![values(&st, "block1.bn2.gamma"), values(&st, "block2.bn2.gamma")],
            betas: vec![values(&st, "block1.bn2.beta"), values(&st, "block2.bn2.beta")],
            head_w: values(&st, "head.weight"),
            head_b: values(&st, "head.bias"),
        };
        let (want, moments) = plain.forward(x.data(), n, cin, hw, hw);

        // an early-exit network holding the same values under its own names
        let ee_cfg = EarlyExitConfig {
            exits: Some(vec![2]),
            ..EarlyExitConfig::new(LayerKind::Conv, widths.to_vec())
        };
        let mut es = ParamStore::new();
        let ee = EarlyExitNet::new(&ee_cfg, &[cin, hw, hw], classes, &mut es, &mut RngState::new(seed)).unwrap();
        let names: Vec<String> = es.iter().map(|(_, p)| p.name.clone()).collect();
        for name in names {
            let src = name.replace(".bn.", ".bn2.").replace("exit1.", "head.");
            let id = es.id(&name).unwrap();
            es.set_value(id, st.value(st.id(&src).unwrap()).clone()).unwrap();
        }

        let mut train_store = st.clone();
        let got = net.forward_one(&mut train_store, &x, full, Mode::Train).unwrap();
        plain_gap = plain_gap.max(got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let (ee_logits, _) = ee.forward_all(&mut es, &x, Mode::Train).unwrap();
        ee_gap = ee_gap.max(got.max_abs_diff(&ee_logits[0]).unwrap());

        // running moments after one training batch follow the momentum rule
        for (l, (means, vars)) in moments.iter().enumerate() {
            let rm = values(&train_store, &format!("block{}.bn2.running_mean", l + 1));
            let rv = values(&train_store, &format!("block{}.bn2.running_var", l + 1));
            for o in 0..means.len() {
                eval_gap = eval_gap.max((rm[o] - 0.1 * means[o]).abs());
                eval_gap = eval_gap.max((rv[o] - (0.9 + 0.1 * vars[o])).abs());
            }
        }

        // shared slices of smaller widths nest in larger ones
        let small = net.footprint(&st, SubModelIndex::new(1, 2).unwrap());
        let large = net.footprint(&st, full);
        for s in small.iter().filter(|s| s.shared) {
            nesting_ok &= large.iter().any(|b| s.nested_in(b));
        }
        nesting_ok &= net.param_count(&st, SubModelIndex::new(1, 2).unwrap()) < net.param_count(&st, full);

        // a small-width pass touches only its own bank
        let mut iso = st.clone();
        net.forward_one(&mut iso, &x, SubModelIndex::new(1, 2).unwrap(), Mode::Train).unwrap();
        for ((_, a), (_, b)) in iso.iter().zip(st.iter()) {
            let private = a.name.contains(".bn1.running");
            isolation_ok &= (a.value != b.value) == private;
        }
        // and gradients from the small width never reach the other bank
        let mut g = st.clone();
        let (logits, pass) = net.forward_all(&mut g, &x, Mode::Train).unwrap();
        let grads = vec![Tensor::full(logits[0].shape(), 1.0), Tensor::zeros(logits[1].shape())];
        net.backward_all(&mut g, &pass, &grads).unwrap();
        for (_, p) in g.iter().filter(|(_, p)| p.name.contains(".bn2.")) {
            isolation_ok &= p.grad.data().iter().all(|&v| v == 0.0);
        }
    }
    let ok = plain_gap < 1e-12 && ee_gap < 1e-12 && eval_gap < 1e-12 && nesting_ok && isolation_ok;
    verdict(
        4,
        "slimming consistency",
        ok,
        &format!(
            "20 seeds: plain {plain_gap:.1e}, early-exit twin {ee_gap:.1e}, running stats {eval_gap:.1e}, nesting {nesting_ok}, bank isolation {isolation_ok}"
        ),
    );
    assert!(ok);
}

fn compare_tier(dir: &Path, config: &str, threshold: f64, label: &str) -> (Comparison, bool, String) {
    let cfg = dir.join("config.json");
    fs::write(&cfg, config).unwrap();
    let seeds: Vec<u64> = (0..5).collect();
    let mut log = Vec::new();
    let table = cmd_compare(&cfg, &Strategy::ALL, &seeds, Some(&dir.join("out")), &mut log).unwrap();
    println!("{label}\n{}", String::from_utf8_lossy(&log));
    let none = table.strategies.iter().position(|&s| s == Strategy::None).unwrap();
    let worst = table.runs[none].iter().flatten().cloned().fold(f64::INFINITY, f64::min);
    let ok = worst >= threshold;
    (table, ok, format!("{label}: worst NONE sub-model {:.1}% (need {:.0}%)", 100.0 * worst, 100.0 * threshold))
}

#[test]
fn criterion_5_desk_scale_experiment() {
    let start = Instant::now();
    let spirals_dir = tempfile::tempdir().unwrap();
    let spirals = r#"{
      "model": { "kind": "early_exit", "layer": "linear", "widths": [32, 32, 32, 32] },
      "data": {
        "source": { "type": "synthetic", "kind": "spirals", "n_per_class": 1200, "classes": 3, "noise": 0.2 },
        "val_fraction": 0.16666666666666666
      },
      "train": { "epochs": 30, "batch_size": 64 }
    }"#;
    let (t1, ok1, d1) = compare_tier(spirals_dir.path(), spirals, 0.90, "spirals, 4-exit early-exit");

    let img_dir = tempfile::tempdir().unwrap();
    let glyphs = make_glyphs(400, GlyphOptions { size: 8, noise: 0.2 }, 0).unwrap();
    glyphs
        .write_idx(img_dir.path().join("images.idx"), img_dir.path().join("labels.idx"))
        .unwrap();
    let images = r#"{
      "model": { "kind": "slimmable", "layer": "conv", "widths": [8, 16, 16] },
      "data": {
        "source": { "type": "idx", "images": "images.idx", "labels": "labels.idx" },
        "val_fraction": 0.2
      },
      "train": { "epochs": 30, "batch_size": 64 }
    }"#;
    let (t2, ok2, d2) = compare_tier(img_dir.path(), images, 0.80, "4000 IDX glyph images, 4-width slimmable");

    let mins = start.elapsed().as_secs_f64() / 60.0;
    let mut reported = true;
    let mut verdicts = Vec::new();
    for t in [&t1, &t2] {
        let n = t.num_submodels();
        reported &= t.strategies.len() == 4 && t.rows()[n].iter().skip(1).take(4).all(|c| c.contains('±'));
        verdicts.push(t.verdict().unwrap());
    }
    let ok = ok1 && ok2 && reported && mins < 30.0;
    verdict(
        5,
        "desk-scale experiment",
        ok,
        &format!("{d1}; {d2}; tables complete {reported}; {mins:.1} min; {}", verdicts.join("; ")),
    );
    assert!(ok);
}

#[test]
fn criterion_6_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.json");
    fs::write(&cfg, TOY).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cmd_train(&cfg, Some(11), Some(&a), &mut Vec::new()).unwrap();
    cmd_train(&cfg, Some(11), Some(&b), &mut Vec::new()).unwrap();
    let (ma, mb) = (fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    let ok = !ma.is_empty() && ma == mb;
    verdict(6, "determinism", ok, &format!("metrics.csv {} bytes, identical {}", ma.len(), ma == mb));
    assert!(ok);
}

#[test]
fn criterion_7_early_exit_causality() {
    let cfg = EarlyExitConfig::new(LayerKind::Conv, vec![4, 4, 5, 5, 6, 6, 8]);
    let mut store = ParamStore::<f64>::new();
    let net = EarlyExitNet::new(&cfg, &[1, 16, 16], 10, &mut store, &mut RngState::new(7)).unwrap();
    let x = Tensor::rand_normal(&mut RngState::new(8), &[3, 1, 16, 16], 0.0, 1.0).unwrap();
    let mut counts = Vec::new();
    for i in 1..=7 {
        let idx = SubModelIndex::new(i, 7).unwrap();
        net.reset_block_calls();
        net.eval_one(&store, &x, idx).unwrap();
        let eval = net.block_calls();
        net.reset_block_calls();
        net.forward_one(&mut store, &x, idx, Mode::Eval).unwrap();
        counts.push((eval, net.block_calls()));
    }
    let ok = counts.iter().enumerate().all(|(i, &(a, b))| a == i + 1 && b == i + 1);
    verdict(7, "early-exit causality", ok, &format!("blocks executed per exit {counts:?}"));
    assert!(ok);
}

/// One hidden ReLU layer and a linear head trained with momentum SGD on
/// mean cross-entropy, coded directly.
struct PlainMlp {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    d: usize,
    h: usize,
    k: usize,
}

impl PlainMlp {
    /// Loss and gradients (w1, b1, w2, b2) on one batch.
    fn loss_and_grads(&self, x: &[Vec<f64>], y: &[usize]) -> (f64, [Vec<f64>; 4]) {
        let (d, h, k) = (self.d, self.h, self.k);
        let bsz = x.len() as f64;
        let mut g = [vec![0.0; h * d], vec![0.0; h], vec![0.0; k * h], vec![0.0; k]];
        let mut loss = 0.0;
        for (xi, &yi) in x.iter().zip(y) {
            let z: Vec<f64> = (0..h)
                .map(|j| self.b1[j] + (0..d).map(|i| self.w1[j * d + i] * xi[i]).sum::<f64>())
                .collect();
            let a: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
            let o: Vec<f64> = (0..k)
                .map(|c| self.b2[c] + (0..h).map(|j| self.w2[c * h + j] * a[j]).sum::<f64>())
                .collect();
            let m = o.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + o.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - o[yi];
            let dout: Vec<f64> = (0..k)
                .map(|c| ((o[c] - lse).exp() - if c == yi { 1.0 } else { 0.0 }) / bsz)
                .collect();
            for c in 0..k {
                g[3][c] += dout[c];
                for j in 0..h {
                    g[2][c * h + j] += dout[c] * a[j];
                }
            }
            for j in 0..h {
                if z[j] <= 0.0 {
                    continue;
                }
                let dz: f64 = (0..k).map(|c| dout[c] * self.w2[c * h + j]).sum();
                g[1][j] += dz;
                for i in 0..d {
                    g[0][j * d + i] += dz * xi[i];
                }
            }
        }
        (loss / bsz, g)
    }
}

#[test]
fn criterion_8_trainer_equivalence() {
    let data = make_synthetic::<f64>(SyntheticKind::Blobs, 40, 3, 1.5, 4).unwrap();
    let val = make_synthetic::<f64>(SyntheticKind::Blobs, 10, 3, 1.5, 5).unwrap();
    let (epochs, batch, seed, lr0, mu, wd) = (10usize, 16usize, 9u64, 0.1, 0.9, 5e-4);

    let cfg = EarlyExitConfig {
        batch_norm: false,
        ..EarlyExitConfig::new(LayerKind::Linear, vec![6])
    };
    let mut store = ParamStore::new();
    let net = EarlyExitNet::new(&cfg, &[2], 3, &mut store, &mut RngState::new(seed)).unwrap();
    let mut plain = PlainMlp {
        w1: values(&store, "block1.weight"),
        b1: values(&store, "block1.bias"),
        w2: values(&store, "exit1.weight"),
        b2: values(&store, "exit1.bias"),
        d: 2,
        h: 6,
        k: 3,
    };
    let tc = TrainConfig {
        epochs,
        batch_size: batch,
        lr_initial: lr0,
        momentum: mu,
        weight_decay: wd,
        seed,
        ..TrainConfig::default()
    };
    let outcome = train(&net, &mut store, &data, &val, &tc, &DistillConfig::default(), |_| {}).unwrap();

    // milestones at 50% and 75% of 10 epochs, factor 0.1
    let lr = |e: usize| lr0 * 0.1f64.powi([5usize, 8].iter().filter(|&&m| m < e).count() as i32);
    let rows: Vec<Vec<f64>> = (0..data.len()).map(|r| data.inputs().row(r).to_vec()).collect();
    let mut vel = [vec![0.0; 12], vec![0.0; 6], vec![0.0; 18], vec![0.0; 3]];
    let mut losses = Vec::new();
    for e in 1..=epochs {
        let perm = RngState::derive(seed, 0x10000 + e as u64).permutation(data.len());
        let mut chunks: Vec<Vec<usize>> = perm.chunks(batch).map(|c| c.to_vec()).collect();
        if chunks.len() > 1 && chunks.last().unwrap().len() == 1 {
            let tail = chunks.pop().unwrap();
            chunks.last_mut().unwrap().extend(tail);
        }
        for idx in chunks {
            let x: Vec<Vec<f64>> = idx.iter().map(|&i| rows[i].clone()).collect();
            let y: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
            let (loss, g) = plain.loss_and_grads(&x, &y);
            losses.push(loss);
            let params = [&mut plain.w1, &mut plain.b1, &mut plain.w2, &mut plain.b2];
            for ((p, gp), v) in params.into_iter().zip(&g).zip(vel.iter_mut()) {
                for ((t, gv), vv) in p.iter_mut().zip(gp).zip(v.iter_mut()) {
                    *vv = mu * *vv + gv + wd * *t;
                    *t -= lr(e) * *vv;
                }
            }
        }
    }
    let same_len = losses.len() == outcome.step_losses.len();
    let gap = losses
        .iter()
        .zip(&outcome.step_losses)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let ok = same_len && gap < 1e-12;
    verdict(
        8,
        "trainer equivalence",
        ok,
        &format!("{} steps, max loss difference {gap:.1e}", losses.len()),
    );
    assert!(ok);
}
