//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use distortbench::agent::{
    compute_reward, td_loss_and_gradient, td_targets, ActionSpace, Agent, AgentConfig, DuelingQNet, NetDims, Transition,
};
use distortbench::classifier::{spawn_server, ClassifierHandle, RemoteClassifier};
use distortbench::filters::{calibrate, mean_application_l2, DistortionLedger, FilterBank, FilterId, FilterParams};
use distortbench::generator::{
    escalate_severity, load_level, read_manifest, run_episode, EpisodeEnv, EpisodeResult, Goal, Policy, MANIFEST_FILE,
};
use distortbench::metrics::{aggregate, l2_match_check, mean_corruption_error, ErrorTable, L2Verdict};
use distortbench::sensitivity::{AttackMode, StateLayout};
use distortbench::tensor::{l2_distance, partition_patches, ImageTensor, Shape};
use distortbench::toy::{toy_suite, ToyInstance, ToySpec};

type Outcome = Result<String, String>;

struct Report {
    rows: Vec<(&'static str, Outcome, Duration)>,
}

impl Report {
    fn run(&mut self, name: &'static str, check: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = check();
        let took = start.elapsed();
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("[{tag}] {name}: {detail} ({:.1}s)", took.as_secs_f64());
        self.rows.push((name, outcome, took));
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// Toy attack fixtures shared by the optimality and success-rate criteria.

fn toy_bank(spec: &ToySpec) -> FilterBank {
    FilterBank::new(FilterParams { brightness_delta: spec.brightness_delta, ..FilterParams::default() }).unwrap()
}

const TOY_MAX_ITER: usize = 100;
const TOY_TOP_K: usize = 4;

fn toy_env<'a>(handle: &'a ClassifierHandle, bank: &'a FilterBank, spec: &ToySpec) -> EpisodeEnv<'a> {
    EpisodeEnv {
        classifier: handle,
        bank,
        grid: partition_patches(spec.shape, spec.patch_size).unwrap(),
        space: ActionSpace::new(vec![FilterId::Brightness]).unwrap(),
        layout: StateLayout { top_k: TOY_TOP_K, num_classes: spec.num_classes, max_iter: TOY_MAX_ITER },
        goal: Goal::Untargeted,
        max_iter: TOY_MAX_ITER,
        l2_budget: None,
        max_queries: None,
        skip_misclassified: true,
        distortion_levels: vec![],
        refine: true,
    }
}

/// Smallest misclassifying L2 over every per-patch count assignment.
fn exhaustive_optimum(inst: &ToyInstance, bank: &FilterBank, spec: &ToySpec) -> Option<f64> {
    let grid = partition_patches(spec.shape, spec.patch_size).unwrap();
    let p = grid.num_patches();
    let base = spec.max_count as usize + 1;
    let mut best: Option<f64> = None;
    for code in 0..base.pow(p as u32) {
        let mut ledger = DistortionLedger::new(inst.image.clone(), grid, 0).unwrap();
        let mut c = code;
        for patch in 0..p {
            for _ in 0..c % base {
                ledger.add(patch, FilterId::Brightness).unwrap();
            }
            c /= base;
        }
        let img = ledger.render(bank).unwrap();
        if inst.model.predict(&img.quantized()).unwrap().argmax() != inst.label {
            let l2 = l2_distance(&img, &inst.image).unwrap();
            if best.is_none_or(|b| l2 < b) {
                best = Some(l2);
            }
        }
    }
    best
}

struct ToyRun {
    spec: ToySpec,
    bank: FilterBank,
    test: Vec<ToyInstance>,
    results: Vec<EpisodeResult>,
    train_time: Duration,
    attack_time: Duration,
}

fn toy_run() -> ToyRun {
    let spec = ToySpec::default();
    let bank = toy_bank(&spec);
    let train = toy_suite(&spec, 40, 1000).unwrap();
    let test = toy_suite(&spec, 50, 2000).unwrap();
    let cfg = AgentConfig { eps_decay_steps: 800, batch_size: 32, target_sync: 100, ..AgentConfig::default() };
    let space = ActionSpace::new(vec![FilterId::Brightness]).unwrap();
    let layout = StateLayout { top_k: TOY_TOP_K, num_classes: spec.num_classes, max_iter: TOY_MAX_ITER };
    let mut agent = Agent::new(cfg, space, layout.len(), 7).unwrap();

    let start = Instant::now();
    for epoch in 0..8u64 {
        for (i, inst) in train.iter().enumerate() {
            let handle = ClassifierHandle::new("toy", Arc::new(inst.model.clone()));
            let env = toy_env(&handle, &bank, &spec);
            run_episode(
                &env,
                inst.image.clone(),
                inst.label,
                epoch * 1000 + i as u64,
                &mut Policy::Learner(&mut agent),
            )
            .unwrap();
        }
    }
    let train_time = start.elapsed();

    let start = Instant::now();
    let results = test
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let handle = ClassifierHandle::new("toy", Arc::new(inst.model.clone()));
            let env = toy_env(&handle, &bank, &spec);
            let mut policy =
                Policy::Frozen { net: agent.net(), epsilon: 0.0, rng: ChaCha8Rng::seed_from_u64(i as u64) };
            run_episode(&env, inst.image.clone(), inst.label, i as u64, &mut policy).unwrap()
        })
        .collect();
    ToyRun { spec, bank, test, results, train_time, attack_time: start.elapsed() }
}

fn optimality_gap(run: &ToyRun) -> Outcome {
    let mut within = 0;
    let mut worst: f64 = 0.0;
    for (inst, r) in run.test.iter().zip(&run.results) {
        let opt =
            exhaustive_optimum(inst, &run.bank, &run.spec).ok_or("instance without a misclassifying assignment")?;
        if r.success {
            ensure(r.l2 >= opt - 1e-9, || format!("agent L2 {} beats the exhaustive optimum {opt}", r.l2))?;
            worst = worst.max(r.l2 / opt);
            within += usize::from(r.l2 <= 1.5 * opt);
        }
    }
    let n = run.test.len();
    let runtime = run.train_time + run.attack_time;
    let detail = format!(
        "{within}/{n} instances within 1.5x of the exhaustive optimum (need >= 80%), worst ratio {worst:.3}, runtime {:.1}s",
        runtime.as_secs_f64()
    );
    ensure(within * 5 >= n * 4 && runtime < Duration::from_secs(300), || detail.clone())?;
    Ok(detail)
}

fn attack_success_rate(run: &ToyRun) -> Outcome {
    let ok = run.results.iter().filter(|r| r.success).count();
    let steps = run.results.iter().map(|r| r.steps).max().unwrap_or(0);
    let runtime = run.train_time + run.attack_time;
    let detail = format!(
        "{ok}/{} toy instances misclassified within max_iter {TOY_MAX_ITER} (longest {steps} steps), runtime {:.1}s",
        run.results.len(),
        runtime.as_secs_f64()
    );
    ensure(ok == run.results.len() && runtime < Duration::from_secs(120), || detail.clone())?;
    Ok(detail)
}

// Generation through the command-line binary.

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_distortbench")
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(bin()).args(args).env("RUST_BACKTRACE", "0").output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

const GEN_SETTINGS: [&str; 14] = [
    "--set",
    "filters=[\"brightness\",\"gaussian_noise\"]",
    "--set",
    "max_iter=60",
    "--set",
    "state_k=8",
    "--set",
    "eps_decay_steps=400",
    "--set",
    "batch_size=16",
    "--set",
    "train_epochs=2",
    "--set",
    "victim_id=toyvictim",
];

fn generate_into(toy: &Path, out: &Path, victim: &str, extra: &[&str]) -> Result<String, String> {
    let dataset = toy.join("dataset");
    let mut args = vec![
        "generate",
        "--dataset",
        dataset.to_str().unwrap(),
        "--victim",
        victim,
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "11",
    ];
    args.extend(GEN_SETTINGS);
    args.extend(extra);
    run_cli(&args)
}

/// Relative path -> bytes of every file under `root`.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Manifests, tensors, previews and checkpoints; summaries hold run paths.
fn artifacts(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    tree(root)
        .into_iter()
        .filter(|(p, _)| matches!(p.extension().and_then(|e| e.to_str()), Some("jsonl" | "dbimg" | "png" | "dbagt")))
        .collect()
}

fn manifests_under(root: &Path) -> Vec<PathBuf> {
    tree(root).into_keys().filter(|p| p.file_name().is_some_and(|n| n == MANIFEST_FILE)).map(|p| root.join(p)).collect()
}

fn determinism(toy: &Path, work: &Path) -> Outcome {
    let victim = format!("toy:{}", toy.join("victim.dbtoy").display());
    let a = work.join("det_a");
    let b = work.join("det_b");
    generate_into(toy, &a, &victim, &[])?;
    generate_into(toy, &b, &victim, &["--workers", "2"])?;
    let (ta, tb) = (artifacts(&a), artifacts(&b));
    ensure(!ta.is_empty(), || "no artifacts written".into())?;
    ensure(ta.keys().eq(tb.keys()), || "runs wrote different file sets".into())?;
    let differing: Vec<_> = ta.iter().filter(|(k, v)| tb[*k] != **v).map(|(k, _)| k.display().to_string()).collect();
    ensure(differing.is_empty(), || format!("files differ: {differing:?}"))?;
    let tensors = ta.keys().filter(|p| p.extension().is_some_and(|e| e == "dbimg")).count();
    Ok(format!(
        "two generate runs (default and 2 workers): {} manifests, {tensors} tensors, previews and checkpoints byte-identical",
        manifests_under(&a).len()
    ))
}

fn soundness(toy: &Path, work: &Path) -> Outcome {
    let root = work.join("det_a");
    let victim = distortbench::classifier::read_toy_weights(&toy.join("victim.dbtoy")).map_err(|e| e.to_string())?;
    let handle = ClassifierHandle::new("victim", Arc::new(victim));
    let mut checked = 0;
    let mut correct = 0;
    for file in manifests_under(&root) {
        let m = read_manifest(&file).map_err(|e| e.to_string())?;
        for r in m.records.iter().filter(|r| r.success) {
            let level = r.levels.first().ok_or("successful record without levels")?;
            let img = load_level(&file, level).map_err(|e| e.to_string())?;
            let pred = handle.predict_one(&img).map_err(|e| e.to_string())?.argmax();
            checked += 1;
            correct += usize::from(pred == r.label);
        }
    }
    ensure(checked > 0, || "no successful samples to check".into())?;
    ensure(correct == 0, || format!("accuracy {correct}/{checked} at severity 1"))?;
    Ok(format!("victim accuracy 0/{checked} on severity-1 images reloaded from disk"))
}

/// One, two and four additions per step, no removals.
const FIXED: [usize; 3] = [0, 4, 8];

fn wire_loopback(toy: &Path, work: &Path, run: &ToyRun) -> Outcome {
    // Episode level: the same policy against the in-process model and the
    // same model behind the protocol server.
    let mut compared = 0;
    for (i, inst) in run.test.iter().enumerate().take(20) {
        let local = ClassifierHandle::new("toy", Arc::new(inst.model.clone()));
        let server = spawn_server("127.0.0.1:0", Arc::new(inst.model.clone()), 128).map_err(|e| e.to_string())?;
        let remote =
            RemoteClassifier::connect(&server.addr().to_string(), run.spec.shape).map_err(|e| e.to_string())?;
        let remote = ClassifierHandle::new("toy", Arc::new(remote));
        let a = run_episode(
            &toy_env(&local, &run.bank, &run.spec),
            inst.image.clone(),
            inst.label,
            i as u64,
            &mut Policy::Fixed(FIXED[i % 3]),
        )
        .map_err(|e| e.to_string())?;
        let b = run_episode(
            &toy_env(&remote, &run.bank, &run.spec),
            inst.image.clone(),
            inst.label,
            i as u64,
            &mut Policy::Fixed(FIXED[i % 3]),
        )
        .map_err(|e| e.to_string())?;
        let same = a.success == b.success
            && a.termination == b.termination
            && a.l2.to_bits() == b.l2.to_bits()
            && a.log == b.log
            && a.queries == b.queries
            && a.adversarial.as_ref().map(|x| x.data().to_vec()) == b.adversarial.as_ref().map(|x| x.data().to_vec())
            && a.final_probs.as_ref().map(|p| p.as_slice().to_vec())
                == b.final_probs.as_ref().map(|p| p.as_slice().to_vec());
        ensure(same, || format!("instance {i}: remote episode differs from in-process"))?;
        server.shutdown().map_err(|e| e.to_string())?;
        compared += 1;
    }

    // Whole pipeline: `generate` against `serve-toy` in a child process.
    let mut child = Command::new(bin())
        .args(["serve-toy", "--weights", toy.join("victim.dbtoy").to_str().unwrap()])
        .stdout(Stdio::piped())
        .spawn()
        .map_err(|e| e.to_string())?;
    let addr = {
        use std::io::BufRead;
        let mut line = String::new();
        std::io::BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).map_err(|e| e.to_string())?;
        line.trim().strip_prefix("listening on ").ok_or_else(|| format!("unexpected banner {line:?}"))?.to_string()
    };
    let out = work.join("remote");
    let generated = generate_into(toy, &out, "remote", &["--endpoint", &addr]);
    let _ = child.kill();
    let _ = child.wait();
    generated?;
    let local = artifacts(&work.join("det_a"));
    let remote = artifacts(&out);
    ensure(local.keys().eq(remote.keys()), || "remote run wrote a different file set".into())?;
    for (path, bytes) in &local {
        if path.extension().is_some_and(|e| e == "jsonl") {
            // Headers carry the config hash, which includes the victim string.
            let body = |b: &[u8]| String::from_utf8_lossy(b).lines().skip(1).map(str::to_string).collect::<Vec<_>>();
            ensure(body(bytes) == body(&remote[path]), || format!("{} records differ", path.display()))?;
        } else if path.extension().is_some_and(|e| e != "dbagt") {
            ensure(*bytes == remote[path], || format!("{} differs", path.display()))?;
        }
    }
    Ok(format!(
        "{compared} episodes identical over the protocol loopback; generate against serve-toy reproduced {} files of the in-process run",
        local.len()
    ))
}

// Property-level criteria.

fn query_ceiling(run: &ToyRun) -> Outcome {
    // Two filters on 8x8 RGB images exercise larger scans than the toy suite.
    let shape = Shape::new(3, 8, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let model = distortbench::toy::toy_model(&ToySpec { shape, num_classes: 4, ..ToySpec::default() }, 5).unwrap();
    let handle = ClassifierHandle::new("rgb", Arc::new(model)).with_max_batch(7);
    let bank = FilterBank::new(FilterParams::default()).unwrap();
    let filters = vec![FilterId::Brightness, FilterId::GaussianNoise];
    let space = ActionSpace::new(filters.clone()).unwrap();
    let layout = StateLayout { top_k: 8, num_classes: 4, max_iter: 40 };
    let mut agent =
        Agent::new(AgentConfig { batch_size: 8, ..AgentConfig::default() }, space.clone(), layout.len(), 3).unwrap();
    let env = EpisodeEnv {
        classifier: &handle,
        bank: &bank,
        grid: partition_patches(shape, 2).unwrap(),
        space,
        layout,
        goal: Goal::Untargeted,
        max_iter: 40,
        l2_budget: None,
        max_queries: None,
        skip_misclassified: false,
        distortion_levels: vec![],
        refine: false,
    };
    let toy_patches = partition_patches(run.spec.shape, run.spec.patch_size).unwrap().num_patches();
    let mut logs: Vec<(usize, Vec<distortbench::generator::StepRecord>)> =
        run.results.iter().map(|r| (toy_patches, r.log.clone())).collect();
    for i in 0..10 {
        let data: Vec<f64> = (0..shape.len()).map(|_| rng.random_range(0.2..0.8)).collect();
        let img = Arc::new(ImageTensor::new(shape, data).unwrap().quantized());
        let label = handle.predict_one(&img).unwrap().argmax();
        let r = run_episode(&env, img, label, i, &mut Policy::Learner(&mut agent)).map_err(|e| e.to_string())?;
        logs.push((2 * env.grid.num_patches(), r.log));
    }
    let mut steps = 0;
    let mut max_extra = 0;
    for (adds, log) in &logs {
        for s in log {
            let bound = (adds + s.distorted_pairs_before) as u64;
            ensure(s.scan_evaluations == bound, || {
                format!("step {}: scan used {} evaluations, bound {bound}", s.step, s.scan_evaluations)
            })?;
            max_extra = max_extra.max(s.scan_evaluations + s.confirm_evaluations - bound);
            steps += 1;
        }
    }
    ensure(max_extra <= 1, || format!("a step used {max_extra} evaluations beyond its scan bound"))?;
    Ok(format!(
        "{steps} steps: sensitivity scan == patches*|filters| + distorted pairs exactly; plus {max_extra} evaluation of the chosen image per step"
    ))
}

fn severity_scaling() -> Outcome {
    let shape = Shape::new(3, 8, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let orig: Vec<f64> = (0..shape.len()).map(|_| rng.random_range(0.4..0.6)).collect();
        let adv: Vec<f64> = orig.iter().map(|v| v + rng.random_range(-0.03..0.03)).collect();
        let orig = ImageTensor::new(shape, orig).unwrap();
        let adv = ImageTensor::new(shape, adv).unwrap();
        let base = l2_distance(&adv, &orig).unwrap();
        for s in [2.0, 3.0, 4.0, 5.0] {
            let l = l2_distance(&escalate_severity(&orig, &adv, s).unwrap(), &orig).unwrap();
            let rel = (l - s * base).abs() / (s * base);
            worst = worst.max(rel);
        }
    }
    ensure(worst <= 1e-6, || format!("non-saturating relative error {worst:e}"))?;

    // Saturating fixtures: bright images pushed brighter.
    let mut checked = 0;
    for _ in 0..50 {
        let orig: Vec<f64> = (0..shape.len()).map(|_| rng.random_range(0.7..1.0)).collect();
        let adv: Vec<f64> = orig.iter().map(|v| (v + rng.random_range(0.0..0.15)).min(1.0)).collect();
        let orig = ImageTensor::new(shape, orig).unwrap();
        let adv = ImageTensor::new(shape, adv).unwrap();
        let base = l2_distance(&adv, &orig).unwrap();
        for s in [2.0, 3.0, 4.0, 5.0] {
            let level = escalate_severity(&orig, &adv, s).unwrap();
            let direct: Vec<f64> =
                orig.data().iter().zip(adv.data()).map(|(o, a)| (o + s * (a - o)).clamp(0.0, 1.0)).collect();
            ensure(level.data() == direct.as_slice(), || "escalation differs from direct clipped scaling".into())?;
            let l = l2_distance(&level, &orig).unwrap();
            ensure(l <= s * base + 1e-12, || format!("saturated ratio {} exceeds {s}", l / base))?;
            checked += 1;
        }
    }
    Ok(format!("max relative deviation from s*L2 {worst:.1e} unclipped; {checked} saturated levels with ratio <= s"))
}

fn reward_and_td() -> Outcome {
    let dims = NetDims { input: 6, hidden: 10, actions: 5 };
    let mut net = DuelingQNet::new(dims, 3).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let state: Vec<f64> = (0..dims.input).map(|_| rng.random_range(-1.0..1.0)).collect();
    let acts = net.forward(&state).map_err(|e| e.to_string())?;
    let mean_a = acts.advantages.iter().sum::<f64>() / dims.actions as f64;
    let mut identity_err: f64 = 0.0;
    for (q, a) in acts.q.iter().zip(&acts.advantages) {
        identity_err = identity_err.max((q - (acts.value + a - mean_a)).abs());
    }
    for b in net.advantage_bias_mut() {
        *b += 5.0;
    }
    let shifted = net.q_values(&state).map_err(|e| e.to_string())?;
    for (q, s) in acts.q.iter().zip(&shifted) {
        identity_err = identity_err.max((q - s).abs());
    }
    ensure(identity_err <= 1e-9, || format!("dueling identity error {identity_err:e}"))?;

    let target = DuelingQNet::new(dims, 4).map_err(|e| e.to_string())?;
    let batch: Vec<Transition> = (0..6)
        .map(|i| Transition {
            state: (0..dims.input).map(|_| rng.random_range(-1.0..1.0)).collect(),
            action: i % dims.actions,
            reward: rng.random_range(-1.0..1.0),
            next_state: (0..dims.input).map(|_| rng.random_range(-1.0..1.0)).collect(),
            next_valid: vec![],
            done: i == 5,
        })
        .collect();
    let refs: Vec<&Transition> = batch.iter().collect();
    let y = td_targets(&target, &refs, 0.99).map_err(|e| e.to_string())?;
    let (_, grad) = td_loss_and_gradient(&net, &refs, &y).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..grad.len() {
        let orig = net.params()[k];
        net.params_mut()[k] = orig + h;
        let up = td_loss_and_gradient(&net, &refs, &y).unwrap().0;
        net.params_mut()[k] = orig - h;
        let down = td_loss_and_gradient(&net, &refs, &y).unwrap().0;
        net.params_mut()[k] = orig;
        let fd = (up - down) / (2.0 * h);
        let scale = grad[k].abs().max(fd.abs());
        let err = if scale < 1e-8 { (grad[k] - fd).abs() } else { (grad[k] - fd).abs() / scale };
        worst = worst.max(err);
    }
    ensure(worst <= 1e-4, || format!("TD gradient deviates from central differences by {worst:e}"))?;

    let cases = [
        (AttackMode::Untargeted, 0.9, 0.9, 1.0, 1.7, 0.0),
        (AttackMode::Untargeted, 0.8, 0.7, 1.0, 1.5, 0.2),
        (AttackMode::Targeted, 0.10, 0.25, 1.0, 1.5, 0.3),
    ];
    let mut reward_err: f64 = 0.0;
    for (mode, pb, pa, lb, la, want) in cases {
        reward_err = reward_err.max((compute_reward(mode, pb, pa, lb, la).reward - want).abs());
    }
    ensure(reward_err <= 1e-12, || format!("reward examples off by {reward_err:e}"))?;
    Ok(format!(
        "dueling identity {identity_err:.1e}, TD gradient vs finite differences {worst:.1e} over {} params, reward examples {reward_err:.1e}",
        grad.len()
    ))
}

fn filter_calibration() -> Outcome {
    let shape = Shape::new(3, 32, 32);
    let grid = partition_patches(shape, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut images = |n: usize| -> Vec<ImageTensor> {
        (0..n)
            .map(|_| ImageTensor::new(shape, (0..shape.len()).map(|_| rng.random_range(0.25..0.75)).collect()).unwrap())
            .collect()
    };
    let fit_set = images(6);
    let held_out = images(6);
    let target = 1.5;
    let mut measured = Vec::new();
    for filter in FilterId::BUILTIN {
        let params =
            calibrate(filter, &FilterParams::default(), &fit_set, &grid, target, 5).map_err(|e| e.to_string())?;
        let bank = FilterBank::new(params).unwrap();
        measured.push((filter, mean_application_l2(&bank, filter, &held_out, &grid, 99).map_err(|e| e.to_string())?));
    }
    let lo = measured.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
    let hi = measured.iter().map(|m| m.1).fold(0.0, f64::max);
    let listed: Vec<String> = measured.iter().map(|(f, v)| format!("{f} {v:.3}")).collect();
    let detail = format!(
        "held-out per-application L2 at target {target}: {}; spread {:.1}%",
        listed.join(", "),
        100.0 * (hi / lo - 1.0)
    );
    ensure(hi <= 1.2 * lo, || detail.clone())?;
    Ok(detail)
}

fn ledger_reversibility() -> Outcome {
    let shape = Shape::new(3, 8, 8);
    let grid = partition_patches(shape, 2).unwrap();
    let bank = FilterBank::new(FilterParams::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let mut ops = 0;
    for trial in 0..1000u64 {
        let img = Arc::new(ImageTensor::new(shape, (0..shape.len()).map(|_| rng.random::<f64>()).collect()).unwrap());
        let mut ledger = DistortionLedger::new(img.clone(), grid, trial).unwrap();
        for _ in 0..rng.random_range(1..40) {
            let patch = rng.random_range(0..grid.num_patches());
            let filter = FilterId::BUILTIN[rng.random_range(0..4)];
            if ledger.count(patch, filter) > 0 && rng.random_bool(0.4) {
                ledger.remove(patch, filter).unwrap();
            } else {
                ledger.add(patch, filter).unwrap();
            }
            ops += 1;
        }
        let mut fresh = DistortionLedger::new(img.clone(), grid, trial).unwrap();
        let pairs: Vec<_> = ledger.distorted_pairs().collect();
        for ((patch, filter), count) in &pairs {
            for _ in 0..*count {
                fresh.add(*patch, *filter).unwrap();
            }
        }
        let a = ledger.render(&bank).unwrap();
        let b = fresh.render(&bank).unwrap();
        ensure(a.data() == b.data(), || format!("trial {trial}: render differs from count-equivalent ledger"))?;
        for ((patch, filter), count) in pairs {
            for _ in 0..count {
                ledger.remove(patch, filter).unwrap();
            }
        }
        let undone = ledger.render(&bank).unwrap();
        let l2 = l2_distance(&undone, &img).unwrap();
        ensure(l2 == 0.0, || format!("trial {trial}: full undo leaves L2 {l2}"))?;
    }
    Ok(format!("1000 interleavings ({ops} operations) render bit-identically to their count-equivalent ledgers; full undo gives L2 0"))
}

fn metrics_arithmetic() -> Outcome {
    let table = |corrupt: Vec<f64>| ErrorTable {
        severities: (1..=corrupt.len()).map(|s| s as f64).collect(),
        clean: vec![0.0; corrupt.len()],
        corrupt,
        indices: vec![0],
    };
    let ce = aggregate(&table(vec![0.1, 0.2, 0.3, 0.4, 0.5])).map_err(|e| e.to_string())?.ce;
    let mce = mean_corruption_error(&[table(vec![0.2; 5]), table(vec![0.4; 5])]).map_err(|e| e.to_string())?;
    let m = l2_match_check(&[58.8, 25.6], &[99.3, 79.8]).map_err(|e| e.to_string())?;
    ensure((ce - 0.3).abs() <= 1e-12, || format!("CE {ce}"))?;
    ensure((mce - 0.3).abs() <= 1e-12, || format!("mCE {mce}"))?;
    ensure((m[0].relative_gap - 0.408).abs() < 5e-4 && m[0].verdict == L2Verdict::FailLower, || format!("{:?}", m[0]))?;
    ensure((m[0].reference_excess - 0.689).abs() < 1e-3, || format!("reference excess {}", m[0].reference_excess))?;
    ensure(m[1].reference_excess + 1.0 > 3.0, || format!("ratio {}", m[1].reference_excess + 1.0))?;
    Ok(format!(
        "CE {ce:.3}, mCE {mce:.3}; 58.8 vs 99.3 -> gap {:.3} (fail, lower), reference {:.1}% higher; 25.6 vs 79.8 -> {:.2}x",
        m[0].relative_gap,
        100.0 * m[0].reference_excess,
        m[1].reference_excess + 1.0
    ))
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let toy = work.path().join("toy");
    let made = run_cli(&["make-toy", "--out", toy.to_str().unwrap(), "--samples", "12", "--seed", "3"]);

    let mut report = Report { rows: Vec::new() };
    let run = toy_run();
    report.run("optimality gap vs exhaustive search", || optimality_gap(&run));
    report.run("attack success rate on attackable toy suite", || attack_success_rate(&run));
    report.run("determinism of generate", || {
        made.clone()?;
        determinism(&toy, work.path())
    });
    report.run("soundness of severity-1 samples from disk", || {
        made.clone()?;
        soundness(&toy, work.path())
    });
    report.run("per-step query ceiling", || query_ceiling(&run));
    report.run("severity scaling", severity_scaling);
    report.run("reward and TD numerics", reward_and_td);
    report.run("filter calibration to a common budget", filter_calibration);
    report.run("ledger reversibility", ledger_reversibility);
    report.run("metrics arithmetic", metrics_arithmetic);
    report.run("wire protocol loopback", || {
        made.clone()?;
        wire_loopback(&toy, work.path(), &run)
    });

    let failed = report.rows.iter().filter(|r| r.1.is_err()).count();
    let total: Duration = report.rows.iter().map(|r| r.2).sum();
    println!("acceptance: {} passed, {failed} failed ({:.1}s)", report.rows.len() - failed, total.as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
