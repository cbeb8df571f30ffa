//! Acceptance suite. Runs every headline criterion at full tolerance and
//! prints one `[PASS]` / `[FAIL]` line per criterion. Exits non-zero if any
//! criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng as _;
use tsp_interp::analysis::{
    activations_from_residuals, export_overlay, mean_activation, ExplorerManifest, ExportMeta, FeatureActivations,
    InstanceSetSpec, OverlayExport,
};
use tsp_interp::capture::{capture_checkpoint, ActivationDataset, CaptureSpec};
use tsp_interp::numerics::gradcheck::{check_random_network, GradCheck};
use tsp_interp::numerics::{SeedTree, Tensor};
use tsp_interp::policy::PolicyConfig;
use tsp_interp::sae::{
    grid_search, topk_sparsify, train_sae, ActivationMatrix, GridSpec, SaeConfig, SaeModel, TopkMode,
};
use tsp_interp::training::{evaluate, load_policy, train, TrainConfig, TrainPaths};
use tsp_interp::tsp::{generate, held_karp, tour_length, Distribution, TspInstance};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn(&mut Shared) -> Outcome);

struct Shared {
    dir: tempfile::TempDir,
    /// Desk-scale n = 20 policy, produced by the training criterion.
    policy20: Option<PathBuf>,
    sae: Option<PathBuf>,
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    ensure(elapsed <= limit, || format!("{what} took {elapsed:.1?}, limit {limit:?}"))
}

fn autodiff(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let cfg = GradCheck { step: 1e-6, tolerance: 1e-4 };
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let err = check_random_network(seed, cfg).map_err(|e| format!("network {seed}: {e}"))?;
        worst = worst.max(err);
    }
    within(start.elapsed(), Duration::from_secs(60), "gradient checks")?;
    Ok(format!("100/100 networks, worst relative error {worst:.2e}"))
}

/// Minimum over every tour that starts at node 0.
fn exhaustive_optimum(inst: &TspInstance) -> f64 {
    fn rec(inst: &TspInstance, order: &mut Vec<usize>, used: &mut [bool], best: &mut f64) {
        if order.len() == inst.n {
            *best = best.min(tour_length(inst, order).unwrap());
            return;
        }
        for v in 1..inst.n {
            if !used[v] {
                used[v] = true;
                order.push(v);
                rec(inst, order, used, best);
                order.pop();
                used[v] = false;
            }
        }
    }
    let mut used = vec![false; inst.n];
    used[0] = true;
    let mut best = f64::INFINITY;
    rec(inst, &mut vec![0], &mut used, &mut best);
    best
}

fn held_karp_oracle(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let root = SeedTree::new(0x4b).named("held-karp-acceptance");
    for i in 0..200u64 {
        let n = 5 + (i % 4) as usize;
        let dist = Distribution::ALL[(i / 4 % 3) as usize];
        let inst = generate(dist, n, root.child(i).seed()).map_err(|e| e.to_string())?;
        let hk = held_karp(&inst).map_err(|e| e.to_string())?.length;
        let brute = exhaustive_optimum(&inst);
        ensure(hk == brute, || format!("instance {i} (n = {n}): Held–Karp {hk} vs exhaustive {brute}"))?;
    }
    within(start.elapsed(), Duration::from_secs(120), "oracle comparison")?;
    Ok("200/200 instances, n in 5..=8, exact equality".into())
}

fn desk_policy(d_model: usize, ff_hidden: usize) -> PolicyConfig {
    PolicyConfig { d_model, layers: 2, heads: 4, ff_hidden, ..PolicyConfig::default() }
}

fn training_n20(shared: &mut Shared) -> Outcome {
    let start = Instant::now();
    let cfg = TrainConfig {
        n: 20,
        batch_size: 128,
        steps: 1000,
        eval_instances: 500,
        eval_every: 250,
        checkpoint_every: 0,
        adam: tsp_interp::numerics::AdamConfig { lr: 1e-3, ..Default::default() },
        policy: desk_policy(64, 128),
        ..TrainConfig::default()
    };
    let paths = TrainPaths { checkpoint: shared.dir.path().join("n20.ckpt"), log: shared.dir.path().join("n20.jsonl") };
    let report = train(&cfg, &paths, None, &mut |_| {}).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    shared.policy20 = Some(paths.checkpoint.clone());
    let policy = load_policy(&paths.checkpoint).map_err(|e| e.to_string())?;
    let eval = evaluate(&policy, &cfg.eval_set().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    within(elapsed, Duration::from_secs(30 * 60), "training")?;
    ensure(eval.policy_mean < report.initial_eval_mean_length, || {
        format!("trained {:.4} not below untrained {:.4}", eval.policy_mean, report.initial_eval_mean_length)
    })?;
    ensure(eval.policy_mean <= eval.nearest_neighbor_mean, || {
        format!("trained {:.4} above nearest neighbour {:.4}", eval.policy_mean, eval.nearest_neighbor_mean)
    })?;
    let stretch = if eval.policy_mean <= 1.1 * eval.two_opt_mean { "met" } else { "not met" };
    Ok(format!(
        "untrained {:.4} -> trained {:.4}, nearest neighbour {:.4}, 2-opt {:.4} (stretch within 10% of 2-opt: {stretch}), {:.0?} training",
        report.initial_eval_mean_length, eval.policy_mean, eval.nearest_neighbor_mean, eval.two_opt_mean, elapsed
    ))
}

fn small_n_gap(shared: &mut Shared) -> Outcome {
    let cfg = TrainConfig {
        n: 8,
        batch_size: 128,
        steps: 600,
        eval_instances: 200,
        eval_every: 300,
        checkpoint_every: 0,
        adam: tsp_interp::numerics::AdamConfig { lr: 1e-3, ..Default::default() },
        policy: desk_policy(64, 128),
        ..TrainConfig::default()
    };
    let paths = TrainPaths { checkpoint: shared.dir.path().join("n8.ckpt"), log: shared.dir.path().join("n8.jsonl") };
    train(&cfg, &paths, None, &mut |_| {}).map_err(|e| e.to_string())?;
    let policy = load_policy(&paths.checkpoint).map_err(|e| e.to_string())?;
    let eval = evaluate(&policy, &cfg.eval_set().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let gap = eval.mean_gap_vs_optimal.ok_or("no Held–Karp reference at n = 8")?;
    ensure(gap <= 0.15, || format!("mean gap {:.2}% > 15%", 100.0 * gap))?;
    Ok(format!("mean gap vs Held–Karp {:.2}% on 200 instances", 100.0 * gap))
}

fn sae_formula(_: &mut Shared) -> Outcome {
    let example = topk_sparsify(&[3.0, 1.0, 2.0], 2, TopkMode::Shifted).map_err(|e| e.to_string())?;
    ensure(example == vec![1.0, 0.0, 0.0], || format!("[3,1,2], k=2 gave {example:?}"))?;

    let mut rng = SeedTree::new(0x70b).named("topk-fuzz").rng();
    for trial in 0..10_000 {
        let n = rng.random_range(1..=64usize);
        let k = rng.random_range(1..=n);
        // values on a 1/64 grid keep every sum and difference exact
        let z: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(-512i32..=512)) / 64.0).collect();
        let c = f64::from(rng.random_range(-256i32..=256)) / 32.0;
        for mode in [TopkMode::Shifted, TopkMode::Masked] {
            let out = topk_sparsify(&z, k, mode).map_err(|e| e.to_string())?;
            let l0 = out.iter().filter(|&&v| v != 0.0).count();
            ensure(l0 <= k && out.iter().all(|&v| v >= 0.0), || format!("trial {trial}: l0 {l0} > k {k}"))?;
        }
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let a = topk_sparsify(&z, k, TopkMode::Shifted).map_err(|e| e.to_string())?;
        let b = topk_sparsify(&shifted, k, TopkMode::Shifted).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("trial {trial}: output changed under a shift of {c}"))?;
    }
    Ok("example exact, l0 <= k and exact shift invariance on 10,000 fuzzed inputs".into())
}

fn sae_training(shared: &mut Shared) -> Outcome {
    let start = Instant::now();
    let ckpt = shared.policy20.clone().ok_or("no desk-scale policy (training criterion failed)")?;
    let path = shared.dir.path().join("acts.tact");
    let spec = CaptureSpec { distribution: Distribution::Uniform, num_instances: 5000, n: 20, seed: 1 };
    capture_checkpoint(&ckpt, &spec, &path).map_err(|e| e.to_string())?;
    let mut ds = ActivationDataset::open(&path).map_err(|e| e.to_string())?;
    let records = ds.len();
    ensure(records >= 100_000, || format!("only {records} records"))?;
    let data = ActivationMatrix::from_dataset(&mut ds).map_err(|e| e.to_string())?;
    let cfg = SaeConfig { d: 64, expansion: 4, k_ratio: 0.1, l1: 1e-3, steps: 1500, eval_every: 500, ..SaeConfig::default() };
    let trained = train_sae(&cfg, &data, &mut |_| {}).map_err(|e| e.to_string())?;
    let m = trained.final_metrics().clone();
    let k = trained.model.k();
    let mut max_l0 = 0;
    for i in 0..data.len() {
        let x: Vec<f64> = data.row(i).iter().map(|&v| f64::from(v)).collect();
        max_l0 = max_l0.max(trained.model.encode_sparse(&x).map_err(|e| e.to_string())?.l0());
    }
    let sae_path = shared.dir.path().join("desk.sae");
    trained.model.save(&sae_path).map_err(|e| e.to_string())?;
    shared.sae = Some(sae_path);
    within(start.elapsed(), Duration::from_secs(30 * 60), "capture and SAE training")?;
    ensure(m.nmse < 0.15, || format!("held-out normalised error {:.4} >= 0.15", m.nmse))?;
    ensure(max_l0 <= k, || format!("a sample has l0 {max_l0} > k {k}"))?;
    Ok(format!(
        "{records} records, held-out 1 - EV = {:.4}, max l0 {max_l0} <= k = {k}, {} dead of {}, {:.0?}",
        m.nmse,
        m.dead_features,
        trained.model.latent(),
        start.elapsed()
    ))
}

fn grid(shared: &mut Shared) -> Outcome {
    let dir = shared.dir.path().join("grid");
    let cfg = TrainConfig {
        n: 20,
        batch_size: 64,
        steps: 300,
        warmup_rollouts: 256,
        eval_instances: 100,
        eval_every: 300,
        checkpoint_every: 0,
        adam: tsp_interp::numerics::AdamConfig { lr: 1e-3, ..Default::default() },
        policy: desk_policy(32, 64),
        ..TrainConfig::default()
    };
    let paths = TrainPaths { checkpoint: shared.dir.path().join("d32.ckpt"), log: shared.dir.path().join("d32.jsonl") };
    train(&cfg, &paths, None, &mut |_| {}).map_err(|e| e.to_string())?;
    let acts = shared.dir.path().join("d32.tact");
    let spec = CaptureSpec { distribution: Distribution::Uniform, num_instances: 500, n: 20, seed: 2 };
    capture_checkpoint(&paths.checkpoint, &spec, &acts).map_err(|e| e.to_string())?;
    let data = ActivationMatrix::from_dataset(&mut ActivationDataset::open(&acts).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    ensure(data.len() == 10_000, || format!("{} records", data.len()))?;

    let base = SaeConfig { d: 32, batch_size: 256, steps: 300, eval_every: 300, ..SaeConfig::default() };
    let grid = GridSpec::default();
    let rows = grid_search(&base, &grid, &data, Some(&dir), &mut |_| {}).map_err(|e| e.to_string())?;
    ensure(rows.len() == 24, || format!("{} rows", rows.len()))?;
    if let Some(r) = rows.iter().find(|r| r.error.is_some()) {
        return Err(format!("run e={} rho={} l1={} failed: {:?}", r.expansion, r.k_ratio, r.l1, r.error));
    }
    let table = std::fs::read_to_string(dir.join("grid.csv")).map_err(|e| e.to_string())?;
    ensure(table.lines().count() == 25, || "grid.csv is not a 24-row table".into())?;

    let mut monotone = 0;
    let mut detail = Vec::new();
    for &e in &grid.expansions {
        for &rho in &grid.k_ratios {
            let mut line: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.expansion == e && r.k_ratio == rho)
                .map(|r| (r.l1, r.mean_l1.unwrap()))
                .collect();
            line.sort_by(|a, b| a.0.total_cmp(&b.0));
            let ok = line.windows(2).all(|w| w[1].1 <= w[0].1);
            monotone += usize::from(ok);
            if !ok {
                detail.push(format!("e={e} rho={rho}: {:?}", line.iter().map(|p| p.1).collect::<Vec<_>>()));
            }
        }
    }
    ensure(monotone >= 5, || format!("l1 non-increasing in only {monotone}/6 pairs: {}", detail.join("; ")))?;
    let mut msg = format!("24 runs, 24-row table, mean l1 non-increasing along lambda in {monotone}/6 (e, rho) pairs");
    if !detail.is_empty() {
        msg.push_str(&format!("; exception {}", detail.join("; ")));
    }
    Ok(msg)
}

fn analysis(shared: &mut Shared) -> Outcome {
    let mut rng = SeedTree::new(0xa7).named("mu-fuzz").rng();
    for trial in 0..500 {
        let nodes = rng.random_range(1..=120usize);
        let features = rng.random_range(1..=40usize);
        let values: Vec<f64> = (0..nodes * features)
            .map(|_| if rng.random_bool(0.2) { rng.random_range(0.0..50.0) } else { 0.0 })
            .collect();
        let fa = FeatureActivations::new(0, nodes, features, values.clone()).map_err(|e| e.to_string())?;
        for i in 0..features {
            // column sum taken from the last node to the first
            let brute = (0..nodes).rev().map(|j| values[j * features + i]).sum::<f64>() / nodes as f64;
            let mu = mean_activation(&fa, i).map_err(|e| e.to_string())?;
            ensure((mu - brute).abs() <= 1e-9, || format!("trial {trial} feature {i}: {mu} vs {brute}"))?;
        }
    }

    // residual matrices through a random SAE against a scalar encoder
    let cfg = SaeConfig { d: 6, expansion: 3, k_ratio: 0.25, ..SaeConfig::default() };
    for trial in 0..100 {
        let mut sae = SaeModel::init(&cfg, &[0.0; 6]).map_err(|e| e.to_string())?;
        sae.w_enc = Tensor::randn(&[18, 6], 1.0, &mut rng);
        sae.b_enc = Tensor::randn(&[18], 0.5, &mut rng);
        let nodes = rng.random_range(1..=30usize);
        let residuals: Vec<f64> = (0..nodes * 6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let fa = activations_from_residuals(&sae, 0, &residuals).map_err(|e| e.to_string())?;
        let k = sae.k();
        let mut sums = [0.0f64; 18];
        for x in residuals.chunks(6) {
            let z: Vec<f64> = (0..18)
                .map(|i| (0..6).map(|j| sae.w_enc.data()[i * 6 + j] * x[j]).sum::<f64>() + sae.b_enc.data()[i])
                .collect();
            let mut sorted = z.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let tau = sorted[k - 1];
            for i in 0..18 {
                sums[i] += (z[i] - tau).max(0.0);
            }
        }
        for (i, s) in sums.iter().enumerate() {
            let mu = mean_activation(&fa, i).map_err(|e| e.to_string())?;
            let brute = s / nodes as f64;
            ensure((mu - brute).abs() <= 1e-9, || format!("SAE trial {trial} feature {i}: {mu} vs {brute}"))?;
        }
    }

    let ckpt = shared.policy20.clone().ok_or("no desk-scale policy")?;
    let sae_path = shared.sae.clone().ok_or("no trained SAE")?;
    let policy = load_policy(&ckpt).map_err(|e| e.to_string())?;
    let sae = SaeModel::load(&sae_path).map_err(|e| e.to_string())?;
    let spec = InstanceSetSpec::default();
    let meta = ExportMeta { num_instances: spec.num_instances, n: spec.n, seed: spec.seed, ..ExportMeta::default() };
    let features = [0, 1, sae.latent() - 1];
    let a = export_overlay(&sae, &policy, &features, &spec, &meta, &shared.dir.path().join("ov-a")).map_err(|e| e.to_string())?;
    let b = export_overlay(&sae, &policy, &features, &spec, &meta, &shared.dir.path().join("ov-b")).map_err(|e| e.to_string())?;
    for (pa, pb) in a.iter().zip(&b) {
        let bytes = std::fs::read(pa).map_err(|e| e.to_string())?;
        ensure(bytes == std::fs::read(pb).map_err(|e| e.to_string())?, || format!("{} differs between runs", pa.display()))?;
        let o = OverlayExport::load(pa).map_err(|e| e.to_string())?;
        ensure(o.instances.len() == 10 && o.instances.iter().all(|i| i.nodes.len() == 100), || {
            format!("{} does not hold 10 x 100 points", pa.display())
        })?;
    }
    Ok("mu exact to 1e-9 on 500 fuzzed matrices and 100 random SAEs; overlays 10 x 100 points, byte-identical reruns".into())
}

fn run_cli(workdir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tsp-interp"))
        .args(args)
        .env("TSP_INTERP_WORKDIR", workdir)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("`{}` exited {:?}: {}", args[0], out.status.code(), String::from_utf8_lossy(&out.stderr).trim())
    })
}

fn end_to_end(shared: &mut Shared) -> Outcome {
    let start = Instant::now();
    let w = shared.dir.path().join("pipeline");
    std::fs::create_dir_all(&w).map_err(|e| e.to_string())?;
    let cfg = w.join("mini.json");
    std::fs::write(
        &cfg,
        r#"{"seed": 11,
            "generate": {"n": 10, "count": 10},
            "train": {"n": 10, "batch_size": 64, "steps": 200, "warmup_rollouts": 256, "eval_instances": 100,
                      "eval_every": 100, "checkpoint_every": 0, "adam": {"lr": 0.001},
                      "policy": {"d_model": 32, "layers": 2, "heads": 4, "ff_hidden": 64}},
            "eval": {"n": 10, "instances": 100},
            "capture": {"n": 10, "num_instances": 500},
            "sae": {"d": 32, "expansion": 2, "batch_size": 256, "steps": 500, "eval_every": 250},
            "analysis": {"num_instances": 20},
            "export": {"top": 8}}"#,
    )
    .map_err(|e| e.to_string())?;
    let c = cfg.to_str().unwrap();
    for stage in ["generate", "train-policy", "capture", "train-sae", "analyze", "export-explorer"] {
        run_cli(&w, &[stage, "--config", c])?;
    }
    let manifest_path = w.join("exports/explorer/manifest.json");
    let manifest = ExplorerManifest::load(&manifest_path).map_err(|e| e.to_string())?;
    manifest.validate_overlays(manifest_path.parent().unwrap()).map_err(|e| e.to_string())?;
    ensure(!manifest.features.is_empty(), || "no overlays exported".into())?;
    within(start.elapsed(), Duration::from_secs(600), "pipeline")?;
    Ok(format!("six stages, {} valid overlays, {:.0?}", manifest.features.len(), start.elapsed()))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("autodiff correctness", autodiff),
        ("exact-oracle agreement", held_karp_oracle),
        ("policy training (n = 20)", training_n20),
        ("small-n optimality gap (n = 8)", small_n_gap),
        ("SAE formula exactness", sae_formula),
        ("SAE training", sae_training),
        ("grid-search harness", grid),
        ("analysis correctness", analysis),
        ("end-to-end smoke", end_to_end),
    ];
    let mut shared = Shared { dir: tempfile::tempdir().expect("temp dir"), policy20: None, sae: None };
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let outcome = f(&mut shared);
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("[PASS] {name}: {detail} ({took:.1?})"),
            Err(reason) => {
                failed += 1;
                println!("[FAIL] {name}: {reason} ({took:.1?})");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
