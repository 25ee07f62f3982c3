//! Acceptance suite: runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion. Exits non-zero if any criterion fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::cases::{model_case, op_cases, rand_tensor, random_plan, scrambled_model};
use support::{sorted_plan, synthetic_scores};
use vtp::checkpoint::{encode, load_checkpoint, save_checkpoint};
use vtp::config::RunConfig;
use vtp::pipeline::{Datasets, ARTIFACTS};
use vtp::report::parse_kv;
use vtp_core::model::GateSite;
use vtp_core::prune::{apply_plan, binarize, compute_threshold, mask_gates};
use vtp_core::train::{evaluate, gate_median_abs, train, Stage};
use vtp_core::ModelConfig;

const TOY_CONFIG: &str = "\
[model]
image_size = 16
patch_size = 4
in_channels = 3
embed_dim = 64
num_layers = 4
num_heads = 4
mlp_ratio = 4.0
num_classes = 10

[data]
num_classes = 10
train_per_class = 200
eval_per_class = 50
image_size = 16
channels = 3
";

type Check = Result<String, String>;

fn vtp(args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_vtp"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        let err = String::from_utf8_lossy(&o.stderr);
        let line = err.lines().find(|l| l.starts_with("error:")).unwrap_or("no error line");
        return Err(format!("vtp {} exited {:?}: {line}", args[0], o.status.code()));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

fn kv_file(path: &Path) -> Result<BTreeMap<String, String>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse_kv(&text).map_err(|e| e.to_string())
}

fn num(map: &BTreeMap<String, String>, key: &str) -> f64 {
    map.get(key).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN)
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() / target <= tol
}

fn cost_model() -> Check {
    let deit = parse_kv(&vtp(&["analyze", "--model", "deit-b", "--image-size", "224", "--format", "kv"])?)
        .map_err(|e| e.to_string())?;
    let vit = parse_kv(&vtp(&["analyze", "--model", "vit-b16", "--image-size", "384", "--format", "kv"])?)
        .map_err(|e| e.to_string())?;
    let params = num(&deit, "params_before") / 1e6;
    let flops = num(&deit, "flops_before") / 1e9;
    let vit_flops = num(&vit, "flops_before") / 1e9;
    let detail = format!(
        "DeiT-B@224 {params:.2}M params (86.4 ±1%), {flops:.3}B FLOPs (17.6 ±2%); ViT-B/16@384 {vit_flops:.3}B FLOPs (55.5 ±2%)"
    );
    if within(params, 86.4, 0.01) && within(flops, 17.6, 0.02) && within(vit_flops, 55.5, 0.02) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn masked_vs_pruned() -> Check {
    let config = RunConfig::parse(TOY_CONFIG).map_err(|e| e.to_string())?.model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = scrambled_model(&mut rng, &config);
    let images = rand_tensor(&mut rng, &[8, 3, 16, 16], 1.0);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let plan = random_plan(&mut rng, &config, 0.1 + 0.04 * i as f64);
        let hard = apply_plan(&model, &plan).map_err(|e| e.to_string())?;
        let masked = mask_gates(&model, &plan).map_err(|e| e.to_string())?;
        let a = hard.logits(&images).map_err(|e| e.to_string())?;
        let b = masked.logits(&images).map_err(|e| e.to_string())?;
        for (x, y) in a.data().iter().zip(b.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    let detail = format!("20 random plans, max |hard - masked| = {worst:.2e} (bound 1e-10)");
    if worst <= 1e-10 { Ok(detail) } else { Err(detail) }
}

fn gradients() -> Check {
    let mut cases = op_cases(20);
    cases.push(model_case(20));
    let failed: Vec<String> = cases
        .iter()
        .filter(|c| !(c.worst <= c.tol))
        .map(|c| format!("{} {:.1e} > {:.0e}", c.name, c.worst, c.tol))
        .collect();
    let worst_linear = cases.iter().filter(|c| c.tol < 1e-5).map(|c| c.worst).fold(0.0, f64::max);
    let worst_other = cases.iter().filter(|c| c.tol >= 1e-5).map(|c| c.worst).fold(0.0, f64::max);
    let detail = format!(
        "{} checks x 20 instances; worst rel. error linear {worst_linear:.1e} (≤1e-6), nonlinear {worst_other:.1e} (≤1e-4)",
        cases.len()
    );
    if failed.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; failing: {}", failed.join(", ")))
    }
}

fn threshold() -> Check {
    let config = ModelConfig::toy();
    let sites: Vec<(GateSite, usize)> = config
        .sites()
        .into_iter()
        .map(|s| (s, config.site_dim(s.position)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut exact, mut protected_cases, mut mismatches) = (0, 0, 0);
    for _ in 0..100 {
        let scores = synthetic_scores(&mut rng, &sites);
        let rate: f64 = rng.gen_range(0.0..1.0);
        let mags: Vec<f64> = scores.iter().map(|e| e.magnitude).collect();
        let th = compute_threshold(&mags, rate).map_err(|e| e.to_string())?;
        let plan = binarize(&scores, &th);
        let (oracle, protected) = sorted_plan(&scores, &sites, rate);
        let k = (rate * scores.len() as f64).floor() as usize;
        if plan.masks != oracle.masks || plan.protected_sites.len() != protected {
            mismatches += 1;
        } else if protected == 0 && plan.total_pruned() == k {
            exact += 1;
        } else if protected > 0 && plan.total_pruned() == k - protected {
            protected_cases += 1;
        } else {
            mismatches += 1;
        }
    }
    let detail = format!(
        "100 multisets: {exact} exact floor(rate·N), {protected_cases} floor-protection cases, {mismatches} mismatches vs sort oracle"
    );
    if mismatches == 0 { Ok(detail) } else { Err(detail) }
}

struct Run {
    dir: PathBuf,
    config: PathBuf,
}

fn end_to_end(run: &Run) -> Check {
    let dir = run.dir.join("a");
    vtp(&[
        "pipeline", "--config", run.config.to_str().unwrap(), "--rate", "0.4",
        "--out-dir", dir.to_str().unwrap(),
    ])?;
    let cfg = RunConfig::load(&run.config).map_err(|e| e.to_string())?;
    let data = Datasets::new(&cfg).map_err(|e| e.to_string())?;
    let load = |f: &str| load_checkpoint(&dir.join(f)).map_err(|e| e.to_string());
    let baseline = load("baseline.ckpt")?.model;
    let final_model = load("final.ckpt")?.model;
    let acc = |m, split| evaluate(m, split, 100).map_err(|e| e.to_string());
    let base_train = acc(&baseline, &data.train)?;
    let base_eval = acc(&baseline, &data.eval)?;
    let final_eval = acc(&final_model, &data.eval)?;
    let report = kv_file(&dir.join("report.kv"))?;
    let drop = 100.0 * (base_eval - final_eval);
    let detail = format!(
        "baseline train {:.1}% (≥90), baseline eval {:.1}%, final eval {:.1}% (drop {drop:.1} pts, ≤2); params -{:.1}%, FLOPs -{:.1}% at rate 0.4, λ={}",
        100.0 * base_train,
        100.0 * base_eval,
        100.0 * final_eval,
        num(&report, "params_reduced_pct"),
        num(&report, "flops_reduced_pct"),
        cfg.train_sparsity.lambda
    );
    let positive = num(&report, "params_reduced_pct") > 0.0 && num(&report, "flops_reduced_pct") > 0.0;
    if base_train >= 0.9 && drop <= 2.0 && positive {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sparsity_effect(run: &Run) -> Check {
    let cfg = RunConfig::load(&run.config).map_err(|e| e.to_string())?;
    let data = Datasets::new(&cfg).map_err(|e| e.to_string())?;
    let start = load_checkpoint(&run.dir.join("a/baseline.ckpt")).map_err(|e| e.to_string())?.model;
    let mut lines = Vec::new();
    let mut wins = 0;
    for seed in 0..3u64 {
        let mut sp = cfg.stage_config(Stage::Sparsity);
        sp.seed = seed;
        sp.epochs = 3;
        let control = vtp_core::train::TrainConfig {
            stage: Stage::Baseline,
            lambda: 0.0,
            ..sp.clone()
        };
        let mut a = start.clone();
        let mut b = start.clone();
        let ra = train(&mut a, &data.train, &data.eval, &sp).map_err(|e| e.to_string())?;
        let rb = train(&mut b, &data.train, &data.eval, &control).map_err(|e| e.to_string())?;
        let (ma, mb) = (gate_median_abs(&a).unwrap(), gate_median_abs(&b).unwrap());
        if ra.steps == rb.steps && ma < mb {
            wins += 1;
        }
        lines.push(format!("seed {seed}: {ma:.3} vs {mb:.3}"));
    }
    let detail = format!(
        "median |â| sparsity (λ={}) vs λ=0 control after {} equal steps: {}; {wins}/3 lower",
        cfg.train_sparsity.lambda,
        cfg.stage_config(Stage::Sparsity).steps_per_epoch(data.train.len()) * 3,
        lines.join(", ")
    );
    if wins == 3 { Ok(detail) } else { Err(detail) }
}

fn monotonicity(run: &Run) -> Check {
    let sparse = run.dir.join("a/sparse.ckpt");
    let mut rows = Vec::new();
    for rate in ["0.2", "0.4", "0.5", "0.6"] {
        let out = run.dir.join(format!("mono-{rate}.ckpt"));
        let report = run.dir.join(format!("mono-{rate}.txt"));
        vtp(&[
            "prune", "--config", run.config.to_str().unwrap(), "--in", sparse.to_str().unwrap(),
            "--rate", rate, "--out", out.to_str().unwrap(), "--report", report.to_str().unwrap(),
        ])?;
        let kv = kv_file(&report.with_extension("kv"))?;
        rows.push((rate, num(&kv, "params_after"), num(&kv, "flops_after")));
    }
    let ok = rows.windows(2).all(|w| w[1].1 <= w[0].1 && w[1].2 <= w[0].2);
    let detail = rows
        .iter()
        .map(|(r, p, f)| format!("{r}: {p} params / {f} FLOPs"))
        .collect::<Vec<_>>()
        .join("; ");
    if ok { Ok(detail) } else { Err(detail) }
}

fn determinism(run: &Run) -> Check {
    let b = run.dir.join("b");
    vtp(&[
        "pipeline", "--config", run.config.to_str().unwrap(), "--rate", "0.4",
        "--out-dir", b.to_str().unwrap(),
    ])?;
    let mut differing = Vec::new();
    for name in ARTIFACTS {
        let x = std::fs::read(run.dir.join("a").join(name)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join(name)).map_err(|e| e.to_string())?;
        if x != y {
            differing.push(name);
        }
    }

    let cfg = RunConfig::load(&run.config).map_err(|e| e.to_string())?;
    let data = Datasets::new(&cfg).map_err(|e| e.to_string())?;
    let idx: Vec<usize> = (0..data.eval.len()).collect();
    let (images, _) = data.eval.batch(&idx);
    let mut round_trip_ok = true;
    for name in ["sparse.ckpt", "final.ckpt"] {
        let path = b.join(name);
        let original = load_checkpoint(&path).map_err(|e| e.to_string())?;
        let copy = run.dir.join(format!("copy-{name}"));
        save_checkpoint(&original, &copy).map_err(|e| e.to_string())?;
        let back = load_checkpoint(&copy).map_err(|e| e.to_string())?;
        let la = original.model.logits(&images).map_err(|e| e.to_string())?;
        let lb = back.model.logits(&images).map_err(|e| e.to_string())?;
        let same_bytes = encode(&back) == std::fs::read(&path).map_err(|e| e.to_string())?;
        let same_acc = evaluate(&original.model, &data.eval, 100).ok() == evaluate(&back.model, &data.eval, 100).ok();
        round_trip_ok &= la.data() == lb.data() && same_bytes && same_acc;
    }
    let detail = format!(
        "second pipeline run: {} of 7 artifacts byte-identical{}; save/load forward bit-exact: {}",
        7 - differing.len(),
        if differing.is_empty() { String::new() } else { format!(" (differ: {})", differing.join(", ")) },
        if round_trip_ok { "yes" } else { "no" }
    );
    if differing.is_empty() && round_trip_ok { Ok(detail) } else { Err(detail) }
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let run = Run {
        dir: tmp.path().to_path_buf(),
        config: tmp.path().join("toy.toml"),
    };
    std::fs::write(&run.config, TOY_CONFIG).expect("write config");

    let criteria: Vec<(u32, &str, Duration, Box<dyn Fn() -> Check + '_>)> = vec![
        (1, "cost model reproduces reference architectures", Duration::from_secs(1), Box::new(cost_model)),
        (2, "hard-pruned logits equal binary-masked logits", Duration::from_secs(60), Box::new(masked_vs_pruned)),
        (3, "gradients match central finite differences", Duration::from_secs(120), Box::new(gradients)),
        (4, "threshold prunes exactly floor(rate·N)", Duration::from_secs(10), Box::new(threshold)),
        (5, "end-to-end pipeline at rate 0.4", Duration::from_secs(15 * 60), Box::new(|| end_to_end(&run))),
        (6, "sparsity lowers gate magnitudes", Duration::from_secs(10 * 60), Box::new(|| sparsity_effect(&run))),
        (7, "reductions nonincreasing in rate", Duration::from_secs(60), Box::new(|| monotonicity(&run))),
        (8, "determinism and checkpoint round trip", Duration::from_secs(15 * 60), Box::new(|| determinism(&run))),
    ];

    let mut failures = 0;
    for (id, name, budget, check) in &criteria {
        let t = Instant::now();
        let result = check();
        let elapsed = t.elapsed();
        let (pass, detail) = match result {
            Ok(d) if elapsed <= *budget => (true, d),
            Ok(d) => (false, format!("{d}; over runtime budget {budget:?}")),
            Err(d) => (false, d),
        };
        if !pass {
            failures += 1;
        }
        println!(
            "criterion {id} {}: {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failures,
        criteria.len()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
