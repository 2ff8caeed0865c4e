//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//! A check that cannot run (missing data, CLI failure) makes the target exit
//! non-zero; a measured FAIL does so only with `ACCEPTANCE_STRICT=1`.
//!
//! MNIST is read from `$MNIST_DIR` or `<workspace>/data/mnist`. Setting
//! `CNNPRUNE_ROOT_CACHE=<file.cnpm>` reuses (or stores) the trained root model;
//! its training CPU time is kept next to it in `<file.cnpm>.cpu_seconds`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use cnnprune::criteria::{
    build_profile, instability, normalize_per_layer, plan_from_threshold, plan_impact, taylor_scores, InstabilityKind,
    Selection, SensitivityConfig,
};
use cnnprune::datasets::{load_mnist, Dataset, Split};
use cnnprune::instances::diff_instances;
use cnnprune::model::{
    arch_flops, arch_params, build_model, count_flops, count_params, dataset_loss, evaluate,
    load_checkpoint, Architecture,
};
use cnnprune::numkernel::gradcheck::{check_kind, CheckedKind, REL_FLOOR};
use cnnprune::numkernel::{infer, infer_masked, softmax_cross_entropy, LayerSpec, Tensor};
use cnnprune::pruner::apply_plan;
use cnnprune::criteria::{PlanOrigin, PruningPlan};
use cnnprune::tree::{estimate_linear, Estimate, EstimateQuery};
use cnnprune::{Error, FilterRef, ModelState};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_cnnprune");

type Check = Result<(bool, String), String>;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace().join("data/mnist"))
}

/// CPU seconds used by waited-for child processes so far.
fn children_cpu_seconds() -> Option<f64> {
    let stat = std::fs::read_to_string("/proc/self/stat").ok()?;
    // fields after the parenthesised command name start at field 3
    let rest = &stat[stat.rfind(')')? + 2..];
    let f: Vec<&str> = rest.split_whitespace().collect();
    let cutime: f64 = f.get(13)?.parse().ok()?;
    let cstime: f64 = f.get(14)?.parse().ok()?;
    Some((cutime + cstime) / clock_ticks())
}

fn clock_ticks() -> f64 {
    Command::new("getconf")
        .arg("CLK_TCK")
        .output()
        .ok()
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(100.0)
}

/// Runs the CLI, returning stdout and the CPU seconds it consumed (wall time
/// when /proc is unavailable, which on one thread is an upper bound).
fn run_cli(args: &[&str]) -> Result<(String, f64), String> {
    let before = children_cpu_seconds();
    let t = Instant::now();
    let out = Command::new(BIN)
        .args(args)
        .output()
        .map_err(|e| format!("cannot run cnnprune: {e}"))?;
    let wall = t.elapsed().as_secs_f64();
    let cpu = match (before, children_cpu_seconds()) {
        (Some(a), Some(b)) => b - a,
        _ => wall,
    };
    if !out.status.success() {
        return Err(format!(
            "cnnprune {} failed ({}): {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok((String::from_utf8_lossy(&out.stdout).into_owned(), cpu))
}

fn write_config(dir: &Path, name: &str, mutate: impl FnOnce(&mut toml::Table)) -> Result<PathBuf, String> {
    let text = std::fs::read_to_string(workspace().join("configs/mnist.toml")).map_err(|e| e.to_string())?;
    let mut cfg: toml::Table = toml::from_str(&text).map_err(|e| e.to_string())?;
    let dataset = cfg["dataset"].as_table_mut().ok_or("config has no [dataset]")?;
    dataset.insert("dir".into(), mnist_dir().to_string_lossy().into_owned().into());
    mutate(&mut cfg);
    let path = dir.join(name);
    std::fs::write(&path, toml::to_string(&cfg).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    Ok(path)
}

struct Mnist {
    train: Dataset,
    test: Dataset,
    root: ModelState,
    root_path: PathBuf,
    train_cpu: Option<f64>,
}

fn prepare_mnist(work: &Path) -> Result<Mnist, String> {
    let dir = mnist_dir();
    let (train, test) = load_mnist(&dir).map_err(|e| {
        format!("MNIST not found in {} ({e}); run scripts/fetch_mnist.sh or set MNIST_DIR", dir.display())
    })?;
    let config = write_config(work, "mnist.toml", |_| {})?;
    let cache = std::env::var_os("CNNPRUNE_ROOT_CACHE").map(PathBuf::from);
    let cpu_file = |p: &Path| PathBuf::from(format!("{}.cpu_seconds", p.display()));
    let (root_path, train_cpu) = match &cache {
        Some(p) if p.is_file() => {
            eprintln!("reusing root model {}", p.display());
            let cpu = std::fs::read_to_string(cpu_file(p)).ok().and_then(|s| s.trim().parse().ok());
            (p.clone(), cpu)
        }
        _ => {
            let out = cache.clone().unwrap_or_else(|| work.join("root.cnpm"));
            eprintln!("training the MNIST root model (several minutes)");
            let (_, cpu) = run_cli(&["train", "--config", path_str(&config), "--out", path_str(&out)])?;
            if cache.is_some() {
                let _ = std::fs::write(cpu_file(&out), format!("{cpu}\n"));
            }
            (out, Some(cpu))
        }
    };
    let root = load_checkpoint(&root_path).map_err(|e| e.to_string())?;
    Ok(Mnist {
        train,
        test,
        root,
        root_path,
        train_cpu,
    })
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn mnist_end_to_end(m: &Mnist, work: &Path) -> Check {
    let root_acc = evaluate(&m.root, &m.test).map_err(|e| e.to_string())?.accuracy;
    let config = write_config(work, "mnist.toml", |_| {})?;
    let session = work.join("session");
    eprintln!("auto-pruning the MNIST root (tens of minutes)");
    let (_, prune_cpu) = run_cli(&[
        "autoprune",
        "--checkpoint",
        path_str(&m.root_path),
        "--config",
        path_str(&config),
        "--ratio",
        "1/3",
        "--stop-acc",
        "0.985",
        "--out",
        path_str(&session),
    ])?;
    let report: Value = serde_json::from_slice(&std::fs::read(session.join("report.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let nodes = report["nodes"].as_array().ok_or("report has no nodes")?;
    let converged: Vec<&Value> = nodes
        .iter()
        .filter(|n| n["node_id"].as_u64() != Some(0) && n["converged"].as_bool() == Some(true))
        .collect();
    let chain: Vec<String> = nodes
        .iter()
        .map(|n| {
            format!(
                "{}f/{:.4}{}",
                n["filters"],
                n["accuracy"].as_f64().unwrap_or(f64::NAN),
                if n["converged"].as_bool() == Some(true) { "" } else { "(nc)" }
            )
        })
        .collect();
    let last = converged.last();
    let last_filters = last.and_then(|n| n["filters"].as_u64()).unwrap_or(u64::MAX);
    let last_acc = last.and_then(|n| n["accuracy"].as_f64()).unwrap_or(0.0);
    let total_cpu = m.train_cpu.map(|t| t + prune_cpu);
    let ok = root_acc >= 0.983
        && converged.len() >= 5
        && last_filters <= 25
        && last_acc >= 0.980
        && total_cpu.is_some_and(|t| t <= 90.0 * 60.0);
    Ok((
        ok,
        format!(
            "root {root_acc:.4} (>=0.983); {} converged pruned nodes (>=5); last converged {last_filters} filters (<=25) at {last_acc:.4} (>=0.980); cpu {} min (<=90); chain {}",
            converged.len(),
            total_cpu.map_or("unknown (root cache without timing)".to_string(), |t| format!("{:.1}", t / 60.0)),
            chain.join(" -> ")
        ),
    ))
}

/// Random conv stack with optional padding and pooling, ending in a linear head.
fn toy_arch(rng: &mut ChaCha8Rng) -> Architecture {
    let mut layers = Vec::new();
    let mut c = rng.gen_range(1..=3);
    let input_c = c;
    let mut hw = rng.gen_range(8..=12);
    let input_hw = hw;
    for _ in 0..rng.gen_range(1..=3) {
        let out = rng.gen_range(2..=6);
        let padding = if hw < 5 { 1 } else { rng.gen_range(0..=1) };
        layers.push(LayerSpec::Conv2d {
            in_channels: c,
            out_channels: out,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding,
        });
        hw = hw + 2 * padding - 2;
        layers.push(LayerSpec::Relu);
        if hw >= 6 && rng.gen_bool(0.5) {
            layers.push(LayerSpec::pool(2));
            hw /= 2;
        }
        c = out;
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::linear(c * hw * hw, 4));
    Architecture {
        input_shape: [input_c, input_hw, input_hw],
        layers,
        class_names: (0..4).map(|i| i.to_string()).collect(),
    }
}

fn zeroing_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut passed = 0;
    let mut worst = 0.0f32;
    for case in 0..100u64 {
        let arch = toy_arch(&mut rng);
        let model = build_model(arch.clone(), case).map_err(|e| e.to_string())?;
        let mut filters = Vec::new();
        for l in arch.conv_layers() {
            let n = arch.out_channels(l).unwrap();
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let k = rng.gen_range(0..n);
            filters.extend(idx[..k].iter().map(|&f| FilterRef::new(l, f)));
        }
        if filters.is_empty() {
            filters.push(FilterRef::new(arch.conv_layers()[0], 0));
        }
        let plan = PruningPlan::new(0, filters, PlanOrigin::ManualRefined);
        let pruned = apply_plan(&model, &plan).map_err(|e| e.to_string())?;
        let [c, h, w] = arch.input_shape;
        let x = Tensor::from_fn(&[3, c, h, w], |_| rng.gen_range(-1.0..1.0));
        let a = infer(&pruned, &x).map_err(|e| e.to_string())?;
        let b = infer_masked(&model, &x, &plan.as_set()).map_err(|e| e.to_string())?;
        let d = a.max_abs_diff(&b).ok_or("logit shapes differ")?;
        worst = worst.max(d);
        if d <= 1e-4 {
            passed += 1;
        }
    }
    Ok((passed == 100, format!("{passed}/100 within 1e-4, max |diff| {worst:.2e}")))
}

fn gradient_fidelity() -> Check {
    let mut parts = Vec::new();
    let mut ok = true;
    for (i, kind) in CheckedKind::ALL.into_iter().enumerate() {
        let r = check_kind(kind, 20, 100 + i as u64).map_err(|e| e.to_string())?;
        ok &= r.instances >= 20 && r.max_relative_error <= 1e-4;
        parts.push(format!("{kind:?} {:.1e} ({} coords)", r.max_relative_error, r.coordinates));
    }
    Ok((ok, format!("20 instances per kind, rel. floor {REL_FLOOR:e}: {}", parts.join(", "))))
}

/// Average ranks (ties share the mean position).
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn masked_loss(model: &ModelState, data: &Dataset, mask: &BTreeSet<FilterRef>) -> Result<f64, Error> {
    let mut total = 0.0;
    for chunk in data.batches(250, 0, false) {
        let (x, y) = data.batch(&chunk)?;
        let (loss, _) = softmax_cross_entropy(&infer_masked(model, &x, mask)?, &y)?;
        total += f64::from(loss) * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

fn taylor_vs_exact(m: &Mnist) -> Check {
    let subset = m.train.head(1000).map_err(|e| e.to_string())?;
    let batches: Vec<Vec<usize>> = (0..10).map(|b| (b * 100..(b + 1) * 100).collect()).collect();
    let (filters, taylor) = taylor_scores(&m.root, &subset, &batches).map_err(|e| e.to_string())?;
    let base = dataset_loss(&m.root, &subset).map_err(|e| e.to_string())?;
    let mut exact = Vec::with_capacity(filters.len());
    for &f in &filters {
        let l = masked_loss(&m.root, &subset, &BTreeSet::from([f])).map_err(|e| e.to_string())?;
        exact.push((l - base).abs());
    }
    let rho = spearman(&taylor, &exact);
    // context only: raw scores average over feature-map entries, so their
    // scale differs between layers; these show how much of the gap that is
    let normalized = spearman(&normalize_per_layer(&filters, &taylor), &exact);
    let per_layer: Vec<String> = m
        .root
        .architecture()
        .conv_layers()
        .into_iter()
        .map(|l| {
            let ix: Vec<usize> = (0..filters.len()).filter(|&i| filters[i].layer == l).collect();
            let pick = |v: &[f64]| ix.iter().map(|&i| v[i]).collect::<Vec<_>>();
            format!("layer {l} {:.3}", spearman(&pick(&taylor), &pick(&exact)))
        })
        .collect();
    Ok((
        rho >= 0.6,
        format!(
            "Spearman {rho:.3} (>=0.6) over {} filters, first 1000 training images; within-layer {}; layer-normalized {normalized:.3}",
            filters.len(),
            per_layer.join(", ")
        ),
    ))
}

fn instability_fixtures() -> Check {
    let mad = InstabilityKind::MeanAbsoluteDeviation;
    let a = instability(&[0, 2, 1, 3, 2], mad);
    let b = instability(&[4, 4, 4, 4, 4], mad);
    let c = instability(&[0, 1, 0, 1], mad);
    let ok = (a - 0.88).abs() <= 1e-12 && b == 0.0 && c == 0.5;
    Ok((ok, format!("[0,2,1,3,2] -> {a}, constant -> {b}, alternating -> {c}")))
}

fn instability_tendency(m: &Mnist) -> Check {
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in [0u64, 1000, 2000] {
        let cfg = SensitivityConfig {
            base_seed: seed,
            ..SensitivityConfig::default()
        };
        let p = build_profile(&m.root, &m.train, &cfg).map_err(|e| e.to_string())?;
        let mut order: Vec<usize> = (0..p.filters.len()).collect();
        order.sort_by(|&a, &b| p.mean_sensitivity[a].total_cmp(&p.mean_sensitivity[b]));
        let q = order.len() / 4;
        let mean = |ix: &[usize]| ix.iter().map(|&i| p.instability[i]).sum::<f64>() / ix.len() as f64;
        let (bottom, top) = (mean(&order[..q]), mean(&order[order.len() - q..]));
        if bottom > top {
            wins += 1;
        }
        parts.push(format!("seed {seed}: {bottom:.2} vs {top:.2}"));
    }
    Ok((wins >= 2, format!("bottom vs top quartile instability, {wins}/3 (>=2): {}", parts.join("; "))))
}

fn radar_impact(m: &Mnist) -> Check {
    let p = build_profile(&m.root, &m.train, &SensitivityConfig::default()).map_err(|e| e.to_string())?;
    let t = plan_from_threshold(&p, Selection::Fraction(1.0 / 3.0)).map_err(|e| e.to_string())?;
    let i = plan_impact(&p, &t.plan).map_err(|e| e.to_string())?;
    let s = i.remaining_sensitivity_pct;
    Ok((
        (s - 96.0).abs() <= 5.0,
        format!(
            "removing {} of {} filters keeps {s:.2}% sensitivity (96 +/- 5), {:.2}% instability",
            t.plan.len(),
            p.filters.len(),
            i.remaining_instability_pct
        ),
    ))
}

fn accounting() -> Check {
    let arch = Architecture::mnist_reference();
    // conv 32*(1*9+1), conv 64*(32*9+1), linear 10*(64*5*5+1)
    let params = 32 * 10 + 64 * 289 + 10 * 1601;
    // conv (2*Cin*9+1)*out elems, relu/pool one op per output, linear 2*in*out+out
    let flops = 19 * 32 * 676 + 32 * 676 + 32 * 169 + 577 * 64 * 121 + 64 * 121 + 64 * 25 + (2 * 1600 * 10 + 10);
    let model = build_model(arch.clone(), 0).map_err(|e| e.to_string())?;
    let plan = PruningPlan::new(
        0,
        (5..32).map(|f| FilterRef::new(0, f)).chain((9..64).map(|f| FilterRef::new(3, f))),
        PlanOrigin::ManualRefined,
    );
    let small = apply_plan(&model, &plan).map_err(|e| e.to_string())?;
    let small_params = 5 * 10 + 9 * 46 + 10 * 226;
    let small_flops = 19 * 5 * 676 + 5 * 676 + 5 * 169 + 91 * 9 * 121 + 9 * 121 + 9 * 25 + (2 * 225 * 10 + 10);
    let got = (
        arch_params(&arch),
        arch_flops(&arch),
        count_params(&small),
        count_flops(&small),
    );
    let reduction = 100.0 * (1.0 - got.2 as f64 / got.0 as f64);
    let ok = got == (params, flops, small_params, small_flops) && reduction >= 85.0;
    Ok((
        ok,
        format!(
            "full {} params / {} flops, 5+9 filters {} params / {} flops; reduction {reduction:.2}% (>=85)",
            got.0, got.1, got.2, got.3
        ),
    ))
}

fn estimator() -> Check {
    // accuracy = 0.9 + 0.001 * filters
    let a = (80, 0.98);
    let b = (40, 0.94);
    let mut errors = Vec::new();
    for (query, want) in [
        (EstimateQuery::TargetFilters(20), Estimate::Accuracy { accuracy: 0.92 }),
        (EstimateQuery::TargetFilters(100), Estimate::Accuracy { accuracy: 1.0 }),
        (EstimateQuery::TargetAccuracy(0.95), Estimate::Filters { filters: 50, raw: 50.0 }),
        (EstimateQuery::TargetAccuracy(0.91), Estimate::Filters { filters: 10, raw: 10.0 }),
    ] {
        let got = estimate_linear(a, b, query).map_err(|e| e.to_string())?;
        let close = match (got, want) {
            (Estimate::Accuracy { accuracy: g }, Estimate::Accuracy { accuracy: w }) => (g - w).abs() < 1e-9,
            (Estimate::Filters { filters: g, raw }, Estimate::Filters { filters: w, .. }) => {
                g == w && (raw - w as f64).abs() < 1e-6
            }
            _ => false,
        };
        if !close {
            errors.push(format!("{query:?}: got {got:?}"));
        }
    }
    let flat = estimate_linear((80, 0.97), (40, 0.97), EstimateQuery::TargetAccuracy(0.96));
    let same = estimate_linear((40, 0.98), (40, 0.97), EstimateQuery::TargetFilters(20));
    let non_informative = matches!(flat, Err(Error::NonInformativePair(_))) && matches!(same, Err(Error::NonInformativePair(_)));
    if !non_informative {
        errors.push(format!("zero slope gave {flat:?} / {same:?}"));
    }
    let ok = errors.is_empty();
    Ok((
        ok,
        if ok {
            "4 collinear queries exact after rounding; zero slope and equal filter counts rejected".into()
        } else {
            errors.join("; ")
        },
    ))
}

fn diff_conservation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 300;
    let classes = 4;
    let images = Tensor::from_fn(&[n, 1, 8, 8], |_| rng.gen_range(0.0..1.0));
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    let test = Dataset::new(
        images,
        labels,
        (0..classes).map(|c| c.to_string()).collect(),
        Split::Test,
        (0..n).map(|i| format!("test/{i:05}")).collect(),
    )
    .map_err(|e| e.to_string())?;
    let arch = Architecture {
        input_shape: [1, 8, 8],
        layers: vec![
            LayerSpec::conv(1, 4, 3),
            LayerSpec::Relu,
            LayerSpec::pool(2),
            LayerSpec::Flatten,
            LayerSpec::linear(36, classes),
        ],
        class_names: (0..classes).map(|c| c.to_string()).collect(),
    };
    let mut exact = 0;
    let mut moved = 0;
    for pair in 0..50u64 {
        let parent = build_model(arch.clone(), 2 * pair).map_err(|e| e.to_string())?;
        let child = build_model(arch.clone(), 2 * pair + 1).map_err(|e| e.to_string())?;
        let d = diff_instances(&parent, &child, &test).map_err(|e| e.to_string())?;
        let pc = evaluate(&parent, &test).map_err(|e| e.to_string())?.correct as i64;
        let cc = evaluate(&child, &test).map_err(|e| e.to_string())?.correct as i64;
        moved += d.len();
        if d.degenerated.len() as i64 - d.improved.len() as i64 == pc - cc {
            exact += 1;
        }
    }
    Ok((exact == 50, format!("{exact}/50 pairs conserve correct counts ({moved} instances changed)")))
}

fn cli_determinism(work: &Path) -> Check {
    if !mnist_dir().is_dir() {
        return Err(format!("MNIST directory {} missing", mnist_dir().display()));
    }
    let config = write_config(work, "small.toml", |cfg| {
        let t = |cfg: &mut toml::Table, k: &str| cfg[k].as_table_mut().unwrap().clone();
        let mut ds = t(cfg, "dataset");
        ds.insert("train_limit".into(), 2000.into());
        ds.insert("test_limit".into(), 500.into());
        cfg.insert("dataset".into(), ds.into());
        let mut model = t(cfg, "model");
        model.insert("width_divisor".into(), 4.into());
        cfg.insert("model".into(), model.into());
        let mut train = t(cfg, "train");
        train.insert("epochs".into(), 1.into());
        cfg.insert("train".into(), train.into());
        let mut ft = t(cfg, "finetune");
        ft.insert("max_epochs".into(), 2.into());
        ft.insert("delta_loss".into(), 10.0.into());
        ft.insert("target_accuracy".into(), 0.999.into());
        cfg.insert("finetune".into(), ft.into());
        let mut s = t(cfg, "sensitivity");
        s.insert("runs".into(), 2.into());
        s.insert("num_batches".into(), 2.into());
        s.insert("batch_size".into(), 50.into());
        cfg.insert("sensitivity".into(), s.into());
    })?;
    let mut outputs = Vec::new();
    for run in 0..2 {
        let dir = work.join(format!("det{run}"));
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let ckpt = dir.join("root.cnpm");
        let session = dir.join("session");
        run_cli(&["train", "--config", path_str(&config), "--seed", "7", "--out", path_str(&ckpt)])?;
        run_cli(&[
            "autoprune",
            "--checkpoint",
            path_str(&ckpt),
            "--config",
            path_str(&config),
            "--ratio",
            "0.5",
            "--stop-acc",
            "0.5",
            "--seed",
            "7",
            "--out",
            path_str(&session),
        ])?;
        let (exported, _) = run_cli(&["export", "--session", path_str(&session), "--format", "json"])?;
        let read = |p: PathBuf| std::fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));
        outputs.push((
            read(ckpt)?,
            read(session.join("report.json"))?,
            read(session.join("report.csv"))?,
            exported.into_bytes(),
        ));
    }
    let (a, b) = (&outputs[0], &outputs[1]);
    let nodes = serde_json::from_slice::<Value>(&a.1)
        .ok()
        .and_then(|v| v["nodes"].as_array().map(Vec::len))
        .unwrap_or(0);
    let same = (a.0 == b.0, a.1 == b.1, a.2 == b.2, a.3 == a.1);
    Ok((
        same == (true, true, true, true) && nodes >= 2,
        format!(
            "checkpoint identical {}, report.json identical {}, report.csv identical {}, export matches report {}; {nodes} nodes",
            same.0, same.1, same.2, same.3
        ),
    ))
}

fn main() -> ExitCode {
    let work = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(&str, Check)> = vec![
        ("zeroing_equivalence", zeroing_equivalence()),
        ("gradient_fidelity", gradient_fidelity()),
        ("instability_fixtures", instability_fixtures()),
        ("param_flop_accounting", accounting()),
        ("estimator", estimator()),
        ("diff_conservation", diff_conservation()),
        ("cli_determinism", cli_determinism(work.path())),
    ];
    match prepare_mnist(work.path()) {
        Ok(m) => {
            results.push(("taylor_vs_exact", taylor_vs_exact(&m)));
            results.push(("instability_tendency", instability_tendency(&m)));
            results.push(("radar_impact", radar_impact(&m)));
            results.push(("mnist_end_to_end", mnist_end_to_end(&m, work.path())));
        }
        Err(e) => {
            for name in ["taylor_vs_exact", "instability_tendency", "radar_impact", "mnist_end_to_end"] {
                results.push((name, Err(e.clone())));
            }
        }
    }
    let (mut failed, mut errored) = (0, 0);
    for (name, r) in &results {
        match r {
            Ok((true, d)) => println!("PASS {name}: {d}"),
            Ok((false, d)) => {
                failed += 1;
                println!("FAIL {name}: {d}");
            }
            Err(e) => {
                errored += 1;
                println!("FAIL {name}: error: {e}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed, {errored} could not run",
        results.len() - failed - errored
    );
    let strict = std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v == "1");
    if errored > 0 || (strict && failed > 0) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
