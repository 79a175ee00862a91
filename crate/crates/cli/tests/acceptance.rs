//! Acceptance suite: one PASS/FAIL line per criterion, with its tolerance and
//! wall-clock budget. Exits non-zero when any criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use poolkit::attnmap::{reshape_attention, write_pgm};
use poolkit::cluster_poolers::{distortion, kmeans_from, kmeans_init, lloyd_step, sinkhorn_solve, SinkhornParams};
use poolkit::framework::{run_pooling, FeatureMap, PoolingSpec};
use poolkit::gradcheck::{run_simpool_check, SimPoolCheck};
use poolkit::meanfam::{weighted_generalized_mean, AlphaParam};
use poolkit::rng::{normal_mat, seeded, uniform_mat};
use poolkit::simple_poolers::{gap, gem, how, lse, max_pool, HowConfig};
use poolkit::simpool::{simpool_forward, SimPoolParams};
use poolkit::tensor_io::{read_npy, write_npy, write_npy_feature_map};
use poolkit::tournament::{run_one, synthetic_suite, TournamentConfig};
use poolkit::transformer_poolers::{cross_attention_block_diagonal, cross_attention_heads};
use poolkit::{Mat, Method};
use rand::Rng;

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn row(v: &[f64]) -> Mat {
    Mat::from_rows(&[v])
}

fn f_alpha_correspondence() -> Check {
    let mut rng = seeded(1);
    let mut worst = 0.0f64;
    let mut worst_max_ratio = 1.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=7);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..10.0)).collect();
        let x = row(&v);
        let a = Mat::filled(n, 1, 1.0 / n as f64);
        let nf = n as f64;
        let rms = (v.iter().map(|t| t * t).sum::<f64>() / nf).sqrt();
        let arith = v.iter().sum::<f64>() / nf;
        let geo = (v.iter().map(|t| t.ln()).sum::<f64>() / nf).exp();
        let harm = nf / v.iter().map(|t| 1.0 / t).sum::<f64>();
        for (alpha, expected) in [(-3.0, rms), (-1.0, arith), (1.0, geo), (3.0, harm)] {
            let got = weighted_generalized_mean(&x, &a, AlphaParam::from_alpha(alpha).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?[(0, 0)];
            worst = worst.max((got - expected).abs());
        }
        let max = v.iter().copied().fold(0.0, f64::max);
        let g200 = weighted_generalized_mean(&x, &a, AlphaParam::from_gamma(200.0).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?[(0, 0)];
        worst_max_ratio = worst_max_ratio.min(g200 / max);
    }
    ensure(worst <= 1e-10, || format!("closed-form deviation {worst:e}"))?;
    ensure(worst_max_ratio >= 0.99, || format!("gamma=200 reaches only {worst_max_ratio} of the max"))?;
    Ok(format!("max dev {worst:.1e}, min M200/max {worst_max_ratio:.5}"))
}

fn gap_optimality() -> Check {
    let mut rng = seeded(2);
    let mut min_gain = f64::INFINITY;
    for _ in 0..100 {
        let (d, p) = (rng.random_range(1..=16), rng.random_range(1..=64));
        let x = normal_mat(&mut rng, d, p, 2.0);
        let g = gap(&FeatureMap::from_mat(x.clone()));
        let base = distortion(&x, &Mat::col_vector(&g)).map_err(|e| e.to_string())?;
        for _ in 0..100 {
            let delta = normal_mat(&mut rng, d, 1, 1.0);
            let n = delta.frobenius_norm();
            let moved: Vec<f64> = g.iter().zip(delta.data()).map(|(u, e)| u + 1e-3 * e / n).collect();
            let j = distortion(&x, &Mat::col_vector(&moved)).map_err(|e| e.to_string())?;
            ensure(j > base, || format!("perturbed J {j} not above J(gap) {base} at d={d}, p={p}"))?;
            min_gain = min_gain.min(j - base);
        }
    }
    Ok(format!("smallest increase {min_gain:.2e}"))
}

fn sinkhorn_marginals() -> Check {
    let mut rng = seeded(3);
    let mut worst = 0.0f64;
    let mut most_iters = 0;
    for eps in [0.05, 0.1, 1.0] {
        for _ in 0..30 {
            let (p, k) = (rng.random_range(1..=32), rng.random_range(1..=32));
            let cost = uniform_mat(&mut rng, p, k, 0.0, 10.0);
            let sol = sinkhorn_solve(&cost, &SinkhornParams::new(eps).map_err(|e| e.to_string())?)
                .map_err(|e| format!("eps {eps}, {p}x{k}: {e}"))?;
            let plan = &sol.plan;
            let mut res = 0.0f64;
            for i in 0..p {
                res = res.max((plan.row(i).iter().sum::<f64>() - 1.0 / p as f64).abs());
            }
            for j in 0..k {
                res = res.max((plan.col(j).iter().sum::<f64>() - 1.0 / k as f64).abs());
            }
            worst = worst.max(res);
            most_iters = most_iters.max(sol.iterations);
        }
    }
    ensure(worst <= 1e-8 && most_iters <= 1000, || {
        format!("residual {worst:e} after up to {most_iters} iterations")
    })?;
    Ok(format!("max residual {worst:.1e}, max iterations {most_iters}"))
}

fn per_point_lloyd(x: &Mat, u: &Mat) -> Mat {
    let (d, k) = u.shape();
    let mut sums = Mat::zeros(d, k);
    let mut counts = vec![0usize; k];
    for i in 0..x.cols() {
        let xi = x.col(i);
        let mut best = (f64::INFINITY, 0);
        for j in 0..k {
            let dist: f64 = xi.iter().zip(u.col(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best.0 {
                best = (dist, j);
            }
        }
        counts[best.1] += 1;
        for r in 0..d {
            sums[(r, best.1)] += xi[r];
        }
    }
    let mut out = u.clone();
    for j in 0..k {
        if counts[j] > 0 {
            let c: Vec<f64> = (0..d).map(|r| sums[(r, j)] / counts[j] as f64).collect();
            out.set_col(j, &c);
        }
    }
    out
}

fn kmeans_properties() -> Check {
    let mut worst_form = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = seeded(1000 + seed);
        let (d, p) = (rng.random_range(1..=8), rng.random_range(8..=60));
        let k = rng.random_range(1..=6);
        let fm = FeatureMap::from_mat(normal_mat(&mut rng, d, p, 1.0));
        let init = fm.x().select_cols(&kmeans_init(p, k, seed).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let trace = kmeans_from(&fm, &init, 20).map_err(|e| e.to_string())?;
        for w in trace.distortions.windows(2) {
            ensure(w[1] <= w[0], || format!("distortion rose from {} to {} (seed {seed})", w[0], w[1]))?;
        }
        let mut u = init;
        for _ in 0..3 {
            let (matrix, _) = lloyd_step(fm.x(), &u).map_err(|e| e.to_string())?;
            let looped = per_point_lloyd(fm.x(), &u);
            worst_form = worst_form.max(matrix.max_abs_diff(&looped).map_err(|e| e.to_string())?);
            u = matrix;
        }
    }
    ensure(worst_form <= 1e-12, || format!("matrix form off by {worst_form:e}"))?;
    Ok(format!("monotone on 100 runs, matrix vs loop {worst_form:.1e}"))
}

fn multi_head_equivalence() -> Check {
    let mut rng = seeded(5);
    let mut worst = 0.0f64;
    for m in [1, 2, 4] {
        for _ in 0..100 {
            let p = rng.random_range(1..=20);
            let keys = normal_mat(&mut rng, 8, p, 1.0);
            let values = normal_mat(&mut rng, 8, p, 1.0);
            let q = normal_mat(&mut rng, 8, 1, 1.0).into_vec();
            let (z1, a1) = cross_attention_heads(&keys, &values, &q, m).map_err(|e| e.to_string())?;
            let (z2, a2) = cross_attention_block_diagonal(&keys, &values, &q, m).map_err(|e| e.to_string())?;
            worst = worst.max(max_diff(z1.data(), z2.data())).max(max_diff(a1.data(), a2.data()));
        }
    }
    ensure(worst <= 1e-12, || format!("paths differ by {worst:e}"))?;
    Ok(format!("max diff {worst:.1e}"))
}

fn cbam_decomposition() -> Check {
    let mut rng = seeded(6);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (d, p) = (rng.random_range(1..=16), rng.random_range(1..=30));
        let x = normal_mat(&mut rng, d, p, 1.0);
        let q = uniform_mat(&mut rng, d, 1, 0.0, 1.0).into_vec();
        let mut elementwise = vec![0.0; p];
        for (j, e) in elementwise.iter_mut().enumerate() {
            *e = (0..d).map(|i| q[i] * x[(i, j)]).sum::<f64>() / d as f64;
        }
        let dot: Vec<f64> = x.transpose().matvec(&q).map_err(|e| e.to_string())?.iter().map(|s| s / d as f64).collect();
        worst = worst.max(max_diff(&elementwise, &dot));
        let lib = poolkit::reweight_poolers::gated_similarity(&x, &q).map_err(|e| e.to_string())?;
        let mean = poolkit::reweight_poolers::channel_mean(&x.diag_left(&q).map_err(|e| e.to_string())?);
        worst = worst.max(max_diff(&lib, &elementwise)).max(max_diff(&mean, &elementwise));
    }
    ensure(worst <= 1e-12, || format!("decomposition off by {worst:e}"))?;
    Ok(format!("max diff {worst:.1e}"))
}

fn simpool_gradients() -> Check {
    let mut worst = 0.0f64;
    for gamma in [1.25, 2.0] {
        let cfg = SimPoolCheck {
            d: 8,
            p: 12,
            gamma,
            h: 1e-4,
            trials: 20,
            seed: 0,
        };
        for r in run_simpool_check(&cfg).map_err(|e| e.to_string())? {
            worst = worst.max(r.max_rel_error);
            ensure(r.passes(1e-5), || format!("gamma {gamma}: {r}"))?;
        }
    }
    Ok(format!("max rel error {worst:.1e}"))
}

fn simpool_hand_trace() -> Check {
    let fm = FeatureMap::from_mat(Mat::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
    let params = SimPoolParams::new(Mat::identity(2), Mat::identity(2), 1.0).map_err(|e| e.to_string())?;
    let (u, a, _) = simpool_forward(&fm, &params).map_err(|e| e.to_string())?;
    let err = max_diff(&u, &[1.0, 1.0]).max(max_diff(&a, &[0.5, 0.5]));
    ensure(err <= 1e-4, || format!("u = {u:?}, a = {a:?}"))?;
    Ok(format!("u = [{:.6}, {:.6}], dev {err:.1e}", u[0], u[1]))
}

fn framework_equivalence() -> Check {
    let mut rng = seeded(9);
    let mut worst = 0.0f64;
    let err = |e: poolkit::Error| e.to_string();
    for _ in 0..100 {
        let (w, h) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let d = rng.random_range(1..=8);
        let fm = FeatureMap::new(uniform_mat(&mut rng, d, w * h, 0.0, 3.0), w, h).map_err(err)?;
        let gamma = rng.random_range(0.5..6.0);
        let r = rng.random_range(0.1..5.0);
        let centering = uniform_mat(&mut rng, d, 1, -1.0, 1.0).into_vec();
        let projection = normal_mat(&mut rng, d, d, 1.0);
        let how_cfg = HowConfig::new(centering, projection).map_err(err)?;
        let pairs: Vec<(Vec<f64>, PoolingSpec)> = vec![
            (gap(&fm), PoolingSpec::gap()),
            (max_pool(&fm), PoolingSpec::max()),
            (gem(&fm, gamma).map_err(err)?, PoolingSpec::gem(gamma).map_err(err)?),
            (lse(&fm, r).map_err(err)?, PoolingSpec::lse(r)),
            (how(&fm, &how_cfg).map_err(err)?, PoolingSpec::how(&how_cfg)),
        ];
        for (direct, spec) in pairs {
            let eng = run_pooling(&spec, &fm).map_err(err)?;
            worst = worst.max(max_diff(&direct, eng.u.data()));
        }
    }
    ensure(worst <= 1e-12, || format!("engine differs by {worst:e}"))?;
    Ok(format!("gap/max/gem/lse/how max diff {worst:.1e}"))
}

fn attention_stochasticity() -> Check {
    let cfg = TournamentConfig::default();
    let suite = synthetic_suite(&cfg).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut checked = Vec::new();
    for method in Method::ALL.into_iter().filter(|m| m.softmax_based()) {
        for fm in &suite {
            let out = run_one(&cfg, method, fm).map_err(|e| format!("{method}: {e}"))?;
            let att = out.attention.ok_or_else(|| format!("{method} returned no attention"))?;
            ensure(att.stochastic_cols, || format!("{method} attention not flagged stochastic"))?;
            for j in 0..att.a.cols() {
                let col = att.a.col(j);
                ensure(col.iter().all(|v| *v >= 0.0), || format!("{method} has negative attention"))?;
                worst = worst.max((col.iter().sum::<f64>() - 1.0).abs());
            }
        }
        checked.push(method.name());
    }
    ensure(worst <= 1e-9, || format!("column sum off by {worst:e}"))?;
    Ok(format!("{} max |sum - 1| {worst:.1e}", checked.join("/")))
}

fn io_roundtrips(dir: &Path) -> Check {
    let mut rng = seeded(11);
    for t in 0..50 {
        let (r, c) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let m = normal_mat(&mut rng, r, c, 100.0);
        let path = dir.join(format!("m{t}.npy"));
        write_npy(&m, &path).map_err(|e| e.to_string())?;
        let back = read_npy(&path).map_err(|e| e.to_string())?.to_mat().map_err(|e| e.to_string())?;
        ensure(back.shape() == m.shape(), || "shape changed".into())?;
        let same = m.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("bits changed for {r}x{c}"))?;
    }
    let grid = reshape_attention(&[0.0, 1.0, 2.0, 3.0], 2, 2).map_err(|e| e.to_string())?;
    let path = dir.join("g.pgm");
    write_pgm(&grid, &path).map_err(|e| e.to_string())?;
    let bytes = fs::read(&path).map_err(|e| e.to_string())?;
    let mut expected = b"P5\n2 2\n255\n".to_vec();
    expected.extend([0u8, 85, 170, 255]);
    ensure(bytes == expected, || format!("PGM bytes {bytes:?}"))?;
    Ok("50 NPY files bit-identical, PGM bytes exact".into())
}

fn end_to_end_cli(dir: &Path) -> Check {
    let bin = env!("CARGO_BIN_EXE_poolkit");
    let mut rng = seeded(12);
    let x = uniform_mat(&mut rng, 384, 196, 0.0, 1.0);
    let fm = FeatureMap::new(x, 14, 14).map_err(|e| e.to_string())?;
    let input = dir.join("features.npy");
    write_npy_feature_map(&fm, &input).map_err(|e| e.to_string())?;

    let mut outputs = Vec::new();
    let mut slowest = Duration::ZERO;
    for run in 0..2 {
        let (u, a) = (dir.join(format!("u{run}.npy")), dir.join(format!("a{run}.npy")));
        let start = Instant::now();
        let status = Command::new(bin)
            .args(["pool", "--method", "simpool", "--seed", "7", "--input"])
            .arg(&input)
            .arg("--out")
            .arg(&u)
            .arg("--attn-out")
            .arg(&a)
            .output()
            .map_err(|e| e.to_string())?;
        let took = start.elapsed();
        slowest = slowest.max(took);
        ensure(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())?;
        ensure(took < Duration::from_secs(1), || format!("run took {took:?}"))?;
        outputs.push((fs::read(&u).map_err(|e| e.to_string())?, fs::read(&a).map_err(|e| e.to_string())?));
    }
    ensure(outputs[0] == outputs[1], || "repeated runs differ".into())?;
    let att = read_npy(dir.join("a0.npy")).map_err(|e| e.to_string())?.to_mat().map_err(|e| e.to_string())?;
    ensure(att.shape() == (196, 1), || format!("attention shape {:?}", att.shape()))?;
    let sum_err = (att.sum() - 1.0).abs();
    ensure(sum_err <= 1e-9 && att.data().iter().all(|v| *v >= 0.0), || format!("attention sum off by {sum_err:e}"))?;
    Ok(format!("slowest run {:.3} s, |sum - 1| {sum_err:.1e}, byte-identical", slowest.as_secs_f64()))
}

type Criterion = (&'static str, f64, Box<dyn Fn() -> Check>);

fn main() {
    let dir = tempfile::tempdir().expect("temporary directory");
    let dir_path = dir.path().to_path_buf();
    let criteria: Vec<Criterion> = vec![
        ("1 f_alpha matches closed-form means (1e-10), gamma=200 within 1% of max", 1.0, Box::new(f_alpha_correspondence)),
        ("2 GAP minimizes the single-center distortion", 1.0, Box::new(gap_optimality)),
        ("3 Sinkhorn marginals within 1e-8 in <= 1000 iterations", 2.0, Box::new(sinkhorn_marginals)),
        ("4 k-means monotone; matrix form equals per-point loop (1e-12)", 2.0, Box::new(kmeans_properties)),
        ("5 per-head equals block-diagonal attention (1e-12)", 1.0, Box::new(multi_head_equivalence)),
        ("6 CBAM channel mean equals X^T q / d (1e-12)", 1.0, Box::new(cbam_decomposition)),
        ("7 SimPool backward vs central differences (1e-5)", 5.0, Box::new(simpool_gradients)),
        ("8 SimPool d=2 hand trace (1e-4)", 1.0, Box::new(simpool_hand_trace)),
        ("9 engine equals direct closed-form poolers (1e-12)", 1.0, Box::new(framework_equivalence)),
        ("10 softmax attention columns sum to 1 (1e-9)", 2.0, Box::new(attention_stochasticity)),
        ("11 NPY and PGM byte round trips", 1.0, {
            let d = dir_path.clone();
            Box::new(move || io_roundtrips(&d))
        }),
        ("12 CLI simpool on 384x196 under 1 s, deterministic", 5.0, {
            let d = dir_path.clone();
            Box::new(move || end_to_end_cli(&d))
        }),
    ];

    let mut failures = 0;
    for (name, budget, check) in &criteria {
        let start = Instant::now();
        let result = check();
        let secs = start.elapsed().as_secs_f64();
        let (status, detail) = match result {
            Ok(d) if secs < *budget => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; over the {budget} s budget")),
            Err(e) => ("FAIL", e),
        };
        if status == "FAIL" {
            failures += 1;
        }
        println!("{status}  {name}  [{secs:.3} s / {budget} s]  {detail}");
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
