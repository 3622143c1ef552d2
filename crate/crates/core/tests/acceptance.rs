//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). `SPLITLEAK_ACCEPT=2,8`
//! restricts the run to the listed criteria. The process exits nonzero only
//! when a criterion outside `EXPECTED_FAILURES` fails.

use std::path::Path;
use std::time::Instant;

use splitleak::attack::{actinv, brute_force_invert, AttackConfig, Distance, BRUTE_FORCE_CAP};
use splitleak::defense::{deviation_bound, deviation_verify, DefenseKind, QNorm};
use splitleak::harness::{ExperimentConfig, Lab, SuiteOutput, RESULTS_FILE, SUMMARY_FILE};
use splitleak::metrics::{precision_recall, rouge_l};
use splitleak::model::{ModelConfig, SplitModel, RMS_EPS};
use splitleak::sensitivity::{
    identity_paf, paf_estimate, paf_of_matrix, reg_inverse_bound, PafConfig, DEFAULT_DRAWS, DEFAULT_INPUTS,
};
use splitleak::{GradTape, Result, Rng, Tensor, Var};

/// Criteria measured to fail on the desk-scale model. They still print FAIL.
const EXPECTED_FAILURES: &[u32] = &[2, 8, 10, 11];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- 1

fn normals(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::new(shape.to_vec(), rng.normals(shape.iter().product())).unwrap()
}

/// Normwise relative error between the tape gradient of
/// `x ↦ Σ w ⊙ f(x)` and central differences with step 1e-5.
fn fd_error<'m, F>(x0: &Tensor, rng: &mut Rng, f: F) -> f64
where
    F: Fn(&mut GradTape<'m>, Var) -> Result<Var>,
{
    let out_shape = {
        let mut t = GradTape::new();
        let x = t.constant(x0.clone());
        let y = f(&mut t, x).unwrap();
        t.value(y).shape().to_vec()
    };
    let w = normals(rng, &out_shape);
    let eval = |x: &Tensor| -> f64 {
        let mut t = GradTape::new();
        let xv = t.constant(x.clone());
        let y = f(&mut t, xv).unwrap();
        t.value(y).mul(&w).unwrap().sum()
    };
    let mut t = GradTape::new();
    let x = t.leaf(x0.clone());
    let y = f(&mut t, x).unwrap();
    let wv = t.constant(w.clone());
    let p = t.mul(y, wv).unwrap();
    let s = t.sum(p).unwrap();
    let g = t.backward(s).unwrap().get(x).unwrap().clone();
    let h = 1e-5;
    let fd: Vec<f64> = (0..x0.len())
        .map(|i| {
            let mut a = x0.clone();
            a.data_mut()[i] += h;
            let mut b = x0.clone();
            b.data_mut()[i] -= h;
            (eval(&a) - eval(&b)) / (2.0 * h)
        })
        .collect();
    let diff: f64 = g.data().iter().zip(&fd).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let scale = g.norm().max(fd.iter().map(|v| v * v).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn criterion_1() -> Verdict {
    let mut rng = Rng::new(101);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match worst.iter_mut().find(|w| w.0 == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };
    for _ in 0..100 {
        let r = 1 + rng.below(4);
        let c = 2 + rng.below(4);
        let k = 1 + rng.below(4);
        let x = normals(&mut rng, &[r, c]);
        let other = normals(&mut rng, &[r, c]);
        let right = normals(&mut rng, &[c, k]);
        let left = normals(&mut rng, &[k, r]);
        let gain = normals(&mut rng, &[c]);
        let ids: Vec<usize> = (0..1 + rng.below(5)).map(|_| rng.below(r)).collect();
        let targets: Vec<usize> = (0..r).map(|_| rng.below(c)).collect();
        let split = rng.below(c + 1);
        let sq_cols = r + rng.below(2);
        let sq = normals(&mut rng, &[r, sq_cols]);

        record("matmul (left)", fd_error(&x, &mut rng, |t, v| {
            let b = t.constant(right.clone());
            t.matmul(v, b)
        }));
        record("matmul (right)", fd_error(&x, &mut rng, |t, v| {
            let a = t.constant(left.clone());
            t.matmul(a, v)
        }));
        record("add", fd_error(&x, &mut rng, |t, v| {
            let o = t.constant(other.clone());
            t.add(o, v)
        }));
        record("sub", fd_error(&x, &mut rng, |t, v| {
            let o = t.constant(other.clone());
            t.sub(o, v)
        }));
        record("mul", fd_error(&x, &mut rng, |t, v| {
            let o = t.constant(other.clone());
            t.mul(v, o)
        }));
        record("mul (square)", fd_error(&x, &mut rng, |t, v| t.mul(v, v)));
        record("sigmoid", fd_error(&x, &mut rng, |t, v| t.sigmoid(v)));
        record("silu", fd_error(&x, &mut rng, |t, v| t.silu(v)));
        record("causal_softmax", fd_error(&sq, &mut rng, |t, v| t.causal_softmax(v)));
        record("rms_norm (x)", fd_error(&x, &mut rng, |t, v| {
            let g = t.constant(gain.clone());
            t.rms_norm(v, g, RMS_EPS)
        }));
        record("rms_norm (gain)", fd_error(&gain, &mut rng, |t, g| {
            let v = t.constant(x.clone());
            t.rms_norm(v, g, RMS_EPS)
        }));
        record("row_select", fd_error(&x, &mut rng, |t, v| t.row_select(v, &ids)));
        record("reshape", fd_error(&x, &mut rng, |t, v| t.reshape(v, &[r * c])));
        record("scale", fd_error(&x, &mut rng, |t, v| t.scale(v, -1.7)));
        record("sum", fd_error(&x, &mut rng, |t, v| t.sum(v)));
        record("transpose", fd_error(&x, &mut rng, |t, v| t.transpose(v)));
        record("slice_cols", fd_error(&x, &mut rng, |t, v| t.slice_cols(v, split, c - split)));
        record("concat_cols", fd_error(&x, &mut rng, |t, v| {
            let o = t.constant(other.clone());
            t.concat_cols(&[o, v, v])
        }));
        record("row_cosine_distance", fd_error(&x, &mut rng, |t, v| {
            let o = t.constant(other.clone());
            t.row_cosine_distance(v, o)
        }));
        record("mean_squared_row_distance", fd_error(&x, &mut rng, |t, v| {
            let o = t.constant(other.clone());
            t.mean_squared_row_distance(o, v)
        }));
        record("cross_entropy", fd_error(&x, &mut rng, |t, v| t.cross_entropy(v, &targets)));
    }
    for i in 0..100u64 {
        let m = SplitModel::init(ModelConfig {
            vocab_size: 16,
            hidden_dim: 8,
            num_blocks: 3,
            split_point: 1 + (i % 2) as usize,
            num_heads: 2,
            ffn_dim: 12,
            max_seq_len: 6,
            seed: i,
        })
        .unwrap();
        let l = 1 + rng.below(6);
        let h = normals(&mut rng, &[l, 8]);
        let e = fd_error(&h, &mut rng, |t, v| m.client_forward_on(t, v));
        record("client_forward", e);
    }
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let bad: Vec<String> = worst
        .iter()
        .filter(|w| !(w.1 < 1e-6))
        .map(|w| format!("{} {:.2e}", w.0, w.1))
        .collect();
    verdict(
        bad.is_empty(),
        format!(
            "{} checks × 100 instances, max relative error {max:.2e}{}",
            worst.len(),
            if bad.is_empty() { String::new() } else { format!("; over 1e-6: {}", bad.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Verdict {
    let model = SplitModel::init(ModelConfig {
        vocab_size: 16,
        hidden_dim: 8,
        num_blocks: 2,
        split_point: 1,
        num_heads: 2,
        ffn_dim: 16,
        max_seq_len: 4,
        seed: 2,
    })
    .unwrap();
    let mut rng = Rng::new(202);
    // Cosine matching leaves one free direction per row at D=8.
    let cfg = AttackConfig {
        distance: Distance::Euclidean,
        lr: 0.05,
        restarts: 2,
        ..AttackConfig::default()
    };
    let (mut exact, mut zero, mut recall) = (0, 0, 0.0);
    for i in 0..20u64 {
        let ids: Vec<usize> = (0..4).map(|_| rng.below(16)).collect();
        let h = model.client_forward(&model.embed(&ids).unwrap()).unwrap();
        let (found, dist) = brute_force_invert(&model, &h, Distance::Cosine, BRUTE_FORCE_CAP).unwrap();
        exact += usize::from(found == ids);
        zero += usize::from(dist == 0.0);
        let res = actinv(&model, &h, &cfg, &mut rng.derive(i), None).unwrap();
        recall += precision_recall(&res.tokens, &ids).unwrap().1 / 100.0;
    }
    let recall = recall / 20.0;
    verdict(
        exact == 20 && zero == 20 && recall >= 0.90,
        format!("brute force exact {exact}/20, distance 0 on {zero}/20; actinv mean recall {recall:.3}"),
    )
}

// ---------------------------------------------------------------- 3

fn base_config(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.output_dir = dir.to_path_buf();
    cfg.seed = 7;
    cfg.metrics = vec!["precision".into(), "recall".into(), "rouge_l".into()];
    cfg
}

fn criterion_3(dir: &Path) -> Verdict {
    let mut cfg = base_config(dir);
    cfg.model.config.split_point = 0;
    cfg.corpus.prompts = 1000;
    cfg.defense.specs = vec!["none".into()];
    let out = Lab::prepare(cfg).unwrap().run_attack_suite().unwrap();
    let perfect = out
        .rows
        .iter()
        .filter(|r| match &r.outcome {
            splitleak::harness::Outcome::Ok {
                precision,
                recall,
                rouge_l,
                ..
            } => *precision == 100.0 && *recall == 100.0 && *rouge_l == 1.0,
            _ => false,
        })
        .count();
    verdict(
        perfect == out.rows.len() && out.rows.len() == 200,
        format!("{perfect}/{} corpus prompts recovered exactly at Q1=0", out.rows.len()),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Verdict {
    let mut rng = Rng::new(404);
    let (mut violations, mut worst) = (0, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let n = 1 + rng.below(16);
        let m = 1 + rng.below(16);
        let scale = (rng.uniform() * 4.0 - 2.0).exp();
        let j = Tensor::matrix(n, m, rng.normals(n * m)).unwrap().scale(scale);
        let r = reg_inverse_bound(&j, &rng.normals(m)).unwrap();
        if !r.holds {
            violations += 1;
        }
        if r.rhs > 0.0 {
            worst = worst.max(r.lhs / r.rhs - 1.0);
        }
    }
    verdict(
        violations == 0,
        format!("{violations} violations in 1000 instances; max lhs/rhs − 1 = {worst:.3e}"),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Verdict {
    let mut rng = Rng::new(505);
    let mut lines = Vec::new();
    let mut ok = true;
    for c in [0.5, 1.0, 2.0] {
        for n in [2, 4, 8] {
            let e = paf_of_matrix(&Tensor::eye(n).scale(c), DEFAULT_DRAWS * DEFAULT_INPUTS, &mut rng).unwrap();
            let want = identity_paf(c, n);
            let z = (e.mean - want).abs() / e.stderr;
            ok &= z <= 3.0 && e.stderr < 0.01;
            lines.push(format!("c={c} n={n}: z={z:.2} se={:.4}", e.stderr));
        }
    }
    verdict(ok, lines.join("; "))
}

// ---------------------------------------------------------------- 6

fn criterion_6(prompts: &[Vec<usize>]) -> Verdict {
    let cfg = PafConfig {
        max_inputs: 5,
        ..PafConfig::default()
    };
    let (mut checked, mut violations) = (0, 0);
    for seed in 0..10 {
        let m = SplitModel::init(ModelConfig {
            seed,
            ..ModelConfig::default()
        })
        .unwrap();
        for layer in m.client_layers() {
            let r = paf_estimate(&m, layer, prompts, &cfg, &Rng::new(600 + seed)).unwrap();
            checked += 1;
            if r.max_paf < r.mean || r.per_input.iter().any(|p| p.max_paf < p.mean) {
                violations += 1;
            }
        }
    }
    verdict(violations == 0, format!("{violations} violations over {checked} layers of 10 models"))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Verdict {
    let mut rng = Rng::new(707);
    let (mut violations, mut checks) = (0, 0);
    for i in 0..500 {
        let n = 2 + i % 7;
        let a = Tensor::matrix(n, n, rng.normals(n * n)).unwrap();
        let delta = rng.normals(n);
        let mu = 0.05 + rng.uniform() * 5.0;
        for q in [QNorm::L1, QNorm::L2, QNorm::Inf] {
            checks += 1;
            match deviation_bound(&a, &delta, mu, q) {
                Ok(r) if r.holds => {}
                _ => violations += 1,
            }
        }
    }
    let e = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
    let hand = deviation_verify(&Tensor::eye(2), &e, 0, &[1.0, 0.0], 0.6, QNorm::L2).unwrap();
    let hand_ok = match &hand.nearest_neighbor {
        Some(nn) => {
            nn.d_min == 1.0
                && nn.threshold == 0.5
                && nn.delta == [0.6, 0.0]
                && nn.recovered_point == [0.6, 0.0]
                && nn.recovered_token == 1
                && nn.recovery_fails
        }
        None => false,
    };
    verdict(
        violations == 0 && hand_ok,
        format!("{violations} violations in {checks} bound checks; hand geometry reproduced: {hand_ok}"),
    )
}

// ---------------------------------------------------------------- 8, 9

fn ladder_means(out: &SuiteOutput, kind: &str) -> Vec<(f64, f64, f64)> {
    out.summary
        .iter()
        .filter(|s| s.cell.defense == kind)
        .map(|s| (s.cell.parameter, s.rouge_l.mean, s.rouge_l.stderr()))
        .collect()
}

/// Non-increasing, allowing one adjacent rise no larger than the larger
/// standard error of the pair.
fn monotone(ladder: &[(f64, f64, f64)]) -> (bool, String) {
    let rises: Vec<(usize, f64, f64)> = ladder
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1].1 > w[0].1)
        .map(|(i, w)| (i, w[1].1 - w[0].1, w[0].2.max(w[1].2)))
        .collect();
    let ok = rises.is_empty() || (rises.len() == 1 && rises[0].1 <= rises[0].2);
    let means: Vec<String> = ladder.iter().map(|(p, m, s)| format!("{p}:{m:.3}±{s:.3}")).collect();
    (ok, format!("[{}] rises {}", means.join(" "), rises.len()))
}

fn grid_suite(dir: &Path) -> SuiteOutput {
    let mut cfg = base_config(dir);
    cfg.defense.grid = vec![DefenseKind::ElementSparsify, DefenseKind::PripertL0];
    Lab::prepare(cfg).unwrap().run_defense_grid().unwrap()
}

fn criterion_8(grid: &SuiteOutput) -> Verdict {
    let (ok_e, d_e) = monotone(&ladder_means(grid, "element-sparsify"));
    let (ok_p, d_p) = monotone(&ladder_means(grid, "pripert-l0"));
    let n = grid.summary.first().map(|s| s.n).unwrap_or(0);
    verdict(
        ok_e && ok_p && n >= 50,
        format!("n={n}; element-sparsify {d_e}; pripert-l0 {d_p}"),
    )
}

fn criterion_9(grid: &SuiteOutput) -> Verdict {
    let e = grid.cell("element-sparsify", 0.5, 1).unwrap().rouge_l.mean;
    let p = grid.cell("pripert-l0", 0.5, 1).unwrap().rouge_l.mean;
    verdict(
        p <= e - 0.05,
        format!("ROUGE-L at 0.5: pripert-l0 {p:.3}, element-sparsify {e:.3}, gap {:.3}", e - p),
    )
}

// ---------------------------------------------------------------- 10

fn criterion_10(dir: &Path) -> Verdict {
    let cfg = base_config(dir);
    let out = Lab::prepare(cfg).unwrap().run_bypass_study().unwrap();
    let s = &out.study;
    let pts: Vec<String> = s.rows.iter().map(|r| format!("{:.2}/{:.3}", r.paf, r.rouge_l_mean)).collect();
    verdict(
        s.rows.len() >= 8 && !s.degenerate && s.r <= -0.3,
        format!("{} layers, Pearson R = {:.3} (paf/rouge: {})", s.rows.len(), s.r, pts.join(" ")),
    )
}

// ---------------------------------------------------------------- 11

fn criterion_11(dir: &Path) -> Verdict {
    let mut cfg = base_config(dir);
    cfg.q1_sweep = vec![1, 5];
    let out = Lab::prepare(cfg).unwrap().run_q1_ablation().unwrap();
    let r1 = out.cell("element-sparsify", 0.5, 1).unwrap().recall.mean;
    let r5 = out.cell("element-sparsify", 0.5, 5).unwrap().recall.mean;
    verdict(r1 > r5, format!("mean recall Q1=1 {r1:.2}%, Q1=5 {r5:.2}%"))
}

// ---------------------------------------------------------------- 12

fn criterion_12(dir: &Path) -> Verdict {
    let mut cfg = base_config(dir);
    cfg.timing.specs = vec!["none".into()];
    cfg.timing.ratios = vec![0.05, 0.25, 1.0];
    let out = Lab::prepare(cfg).unwrap().run_timing().unwrap();
    let rep = &out.report;
    let t = |r: f64| rep.selective(r).unwrap().per_1k.mean;
    let fit = rep.fit.as_ref().unwrap();
    let ratio = t(0.25) / t(1.0);
    verdict(
        fit.b > 0.0 && ratio < 0.6,
        format!(
            "fit {:.4} + {:.4}·r s/1k tokens; t(0.25)/t(1.0) = {ratio:.3}; baseline {:.4}",
            fit.a, fit.b, rep.baseline
        ),
    )
}

// ---------------------------------------------------------------- 13

fn criterion_13(dir: &Path) -> Verdict {
    let run = |sub: &str, workers: usize| {
        let mut cfg = base_config(&dir.join(sub));
        cfg.workers = workers;
        cfg.corpus.prompts = 8;
        cfg.attack.iterations = 300;
        cfg.defense.specs = vec![
            "none".into(),
            "gaussian:0.01".into(),
            "token-sparsify:0.3".into(),
            "pripert-l0:0.5".into(),
            "pripert-l2:2".into(),
        ];
        cfg.q1_sweep = vec![1, 2];
        cfg.paf.draws = 8;
        cfg.paf.layers = vec!["block0.rmsnorm-1".into(), "block0.activation".into()];
        let lab = Lab::prepare(cfg).unwrap();
        let a = lab.run_attack_suite().unwrap();
        let q = lab.run_q1_ablation().unwrap();
        lab.run_paf_study().unwrap();
        lab.run_bypass_study().unwrap();
        (a.dir, q.dir)
    };
    let (a1, q1) = run("first", 0);
    let (a2, q2) = run("second", 1);
    let mut same = Vec::new();
    let pairs = [
        (a1.join(RESULTS_FILE), a2.join(RESULTS_FILE)),
        (a1.join(SUMMARY_FILE), a2.join(SUMMARY_FILE)),
        (q1.join(RESULTS_FILE), q2.join(RESULTS_FILE)),
        (dir.join("first/paf/paf.csv"), dir.join("second/paf/paf.csv")),
        (dir.join("first/bypass/bypass.csv"), dir.join("second/bypass/bypass.csv")),
    ];
    for (x, y) in &pairs {
        same.push(std::fs::read(x).unwrap() == std::fs::read(y).unwrap());
    }
    let n = same.iter().filter(|s| **s).count();
    verdict(n == pairs.len(), format!("{n}/{} CSV pairs bitwise identical across reruns", pairs.len()))
}

// ---------------------------------------------------------------- 14

fn criterion_14() -> Verdict {
    let (a, b, c, d, e) = (0, 1, 2, 3, 4);
    let r = rouge_l(&[a, c, b, e], &[a, b, c, d]).unwrap();
    let pr1 = precision_recall(&[a, c, b, e], &[a, b, c, d]).unwrap();
    let pr2 = precision_recall(&[a, a], &[a]).unwrap();
    verdict(
        r == 0.5 && pr1 == (75.0, 75.0) && pr2 == (50.0, 100.0),
        format!("rouge-l {r}; precision/recall {pr1:?} and {pr2:?}"),
    )
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("SPLITLEAK_ACCEPT")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |i: u32| only.as_ref().map_or(true, |o| o.contains(&i));
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let lines = splitleak::harness::bundled_corpus();
    let tok = splitleak::model::Tokenizer::build(&lines, ModelConfig::default().vocab_size).unwrap();
    let prompts: Vec<Vec<usize>> = lines.iter().take(10).map(|l| tok.encode(l)).collect();

    let names = [
        "gradient correctness",
        "exact-inversion oracle",
        "projection-only case",
        "regularized-inverse bound",
        "PAF closed-form calibration",
        "Max-PAF dominance",
        "linear-map deviation bound",
        "defense monotonicity trend",
        "PriPert superiority",
        "bypass correlation",
        "Q1 degradation trend",
        "selective-protection cost",
        "determinism",
        "metric unit values",
    ];
    let mut grid: Option<SuiteOutput> = None;
    let mut unexpected = 0;
    for (i, name) in names.iter().enumerate() {
        let id = i as u32 + 1;
        if !wanted(id) {
            continue;
        }
        let start = Instant::now();
        let sub = dir.join(format!("c{id}"));
        let v = match id {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(&sub),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(&prompts),
            7 => criterion_7(),
            8 | 9 => {
                let g = grid.get_or_insert_with(|| grid_suite(&dir.join("grid")));
                if id == 8 {
                    criterion_8(g)
                } else {
                    criterion_9(g)
                }
            }
            10 => criterion_10(&sub),
            11 => criterion_11(&sub),
            12 => criterion_12(&sub),
            13 => criterion_13(&sub),
            _ => criterion_14(),
        };
        let secs = start.elapsed().as_secs_f64();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        let note = if !v.pass && EXPECTED_FAILURES.contains(&id) { " [expected]" } else { "" };
        println!("{tag} {id:>2} {name} ({secs:.1}s): {}{note}", v.detail);
        if !v.pass && !EXPECTED_FAILURES.contains(&id) {
            unexpected += 1;
        }
    }
    if unexpected > 0 {
        eprintln!("{unexpected} criteria failed unexpectedly");
        std::process::exit(1);
    }
}
