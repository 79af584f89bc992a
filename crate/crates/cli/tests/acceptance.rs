//! Acceptance criteria 1 to 9, one PASS/FAIL line each.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use dcsau_core::analysis::{calibrate, count_flops, count_params, depthwise_cost, reference_cost};
use dcsau_core::data::{netpbm, split, synth_dataset, write_dataset, SplitSpec};
use dcsau_core::model::{CSA_WIDTHS, PLAIN_WIDTHS};
use dcsau_core::selftest::{self, Check, Options};
use dcsau_core::train::{evaluate, smoothed_increase, train, TrainConfig};
use dcsau_core::{Model, ModelConfig, Result, Variant};

type Outcome = Result<(bool, String)>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn flop_scaling() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for v in [Variant::Dcsau, Variant::Unet] {
        let s = selftest::flop_scaling(v)?;
        ok &= s.passed();
        notes.push(format!("{v} {:.7} (area part exact: {})", s.ratio, s.area_exact));
    }
    Ok((ok, notes.join(", ")))
}

fn parameter_targets() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    let params = |v| count_params(&ModelConfig::new(v));
    for v in Variant::ALL {
        let (target, _) = reference_cost(v);
        let err = params(v) as f64 / target - 1.0;
        ok &= err.abs() <= 0.08;
        notes.push(format!("{v} {:.3}M ({:+.2}%)", params(v) as f64 / 1e6, 100.0 * err));
    }
    let [dcsau, csa, pfc, unet] = [Variant::Dcsau, Variant::UnetCsa, Variant::UnetPfc, Variant::Unet].map(params);
    ok &= dcsau < csa && csa < pfc && pfc < unet;
    ok &= (csa as f64) < 0.5 * pfc as f64;
    ok &= (pfc as f64 / unet as f64 - 1.0).abs() < 0.02;

    let plain = calibrate(&[Variant::Unet, Variant::UnetPfc], 1);
    let compact = calibrate(&[Variant::UnetCsa, Variant::Dcsau], 1);
    let frozen = plain[0].widths == PLAIN_WIDTHS && compact[0].widths == CSA_WIDTHS;
    ok &= frozen;
    notes.push(format!("schedules match calibration: {frozen}"));
    Ok((ok, notes.join(", ")))
}

fn kernel_sweep() -> Outcome {
    let base = ModelConfig::new(Variant::Dcsau);
    let c = base.stage_widths[0];
    let mut ok = true;
    let mut rows = Vec::new();
    let mut prev: Option<(usize, u64, u64)> = None;
    for k in [3, 5, 7, 9] {
        let config = base.clone().with_kernel(k);
        let (p, f) = (count_params(&config), count_flops(&config, 256, 256)?);
        if let Some((pk, pp, pf)) = prev {
            let dp = depthwise_cost(c, k, 256, 256).0 - depthwise_cost(c, pk, 256, 256).0;
            let df = depthwise_cost(c, k, 256, 256).1 - depthwise_cost(c, pk, 256, 256).1;
            ok &= p > pp && f > pf && p - pp == dp && f - pf == df;
        }
        rows.push(format!("K={k} {p} / {:.3}G", f as f64 / 1e9));
        prev = Some((k, p, f));
    }
    Ok((ok, rows.join(", ")))
}

fn summarize(checks: &[Check]) -> (bool, String) {
    match checks.iter().find(|c| !c.passed()) {
        Some(c) => (false, c.to_string()),
        None => {
            let worst = checks.iter().map(|c| c.worst).fold(0.0, f64::max);
            (true, format!("{} checks, worst {worst:.3e}", checks.len()))
        }
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let checks = selftest::gradient_checks(&Options::default());
    let seconds = start.elapsed().as_secs_f64();
    let (ok, note) = summarize(&checks);
    Ok((ok && seconds < 120.0, format!("{note}, {seconds:.1}s")))
}

fn attention() -> Outcome {
    let mut sum_err: f64 = 0.0;
    let mut identity: f64 = 0.0;
    for seed in 0..20 {
        sum_err = sum_err.max(selftest::attention_sum_error(seed)?);
        identity = identity.max(selftest::zero_branch_identity(seed)?);
    }
    Ok((
        sum_err <= 1e-6 && identity == 0.0,
        format!("max |sum - 1| {sum_err:.2e}, identity max diff {identity}"),
    ))
}

fn oracles() -> Outcome {
    Ok(summarize(&selftest::oracle_checks(&Options::default())))
}

fn dcsau_binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dcsau"))
}

fn iou(pred: &[u8], gt: &[u8]) -> f64 {
    let inter = pred.iter().zip(gt).filter(|(&p, &g)| p > 0 && g > 0).count();
    let union = pred.iter().zip(gt).filter(|(&p, &g)| p > 0 || g > 0).count();
    inter as f64 / union.max(1) as f64
}

fn convergence(dir: &Path) -> Outcome {
    let data = synth_dataset(8, 64, 64, 2, 42)?;
    let config = ModelConfig::new(Variant::Dcsau).with_widths(&[16, 32, 64]);
    let mut model = Model::build(&config, 42)?;
    let run = TrainConfig {
        epochs: usize::MAX,
        max_steps: Some(300),
        batch_size: 4,
        lr: 1e-4,
        seed: 42,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let log = train(&mut model, &data, &data, &run, Some(dir))?;
    let seconds = start.elapsed().as_secs_f64();
    let reached = log.first_step_reaching(0.95);
    let rise = smoothed_increase(&log.step_losses, 50, 50);
    let final_f1 = log.epochs.last().map_or(0.0, |r| r.valid.f1);
    let mut ok = reached.is_some_and(|s| s <= 300) && seconds <= 300.0 && rise.is_none();
    let mut note = format!(
        "Dice >= 0.95 at step {reached:?}, final {final_f1:.3}, {} steps in {seconds:.0}s, smoothed rise at {rise:?}",
        log.step_losses.len()
    );

    // The same run through the command line tools.
    std::fs::write(dir.join("config.json"), config.to_json())?;
    let manifest = write_dataset(&dir.join("synthetic"), &data)?;
    let eval = dcsau_binary()
        .args(["eval", "--checkpoint"])
        .arg(dir.join("final.ckpt"))
        .arg("--manifest")
        .arg(dir.join("synthetic/manifest.json"))
        .output()?;
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("eval.json"))?)?;
    let cli_f1 = report["f1"]["mean"].as_f64().unwrap_or(0.0);
    let entry = &manifest.samples[0];
    let predict = dcsau_binary()
        .args(["predict", "--checkpoint"])
        .arg(dir.join("final.ckpt"))
        .arg("--out")
        .arg(dir.join("pred"))
        .arg(dir.join("synthetic").join(&entry.image))
        .output()?;
    let pred = netpbm::load_pgm(&dir.join("pred").join(format!("{}.pgm", entry.id)))?;
    let overlap = iou(pred.data(), data[0].mask.data());
    ok &= eval.status.success() && predict.status.success() && cli_f1 >= 0.95 && overlap >= 0.9;
    note += &format!(", cli eval F1 {cli_f1:.3}, predict IoU {overlap:.3}");
    Ok((ok, note))
}

fn splits() -> Outcome {
    let spec = SplitSpec::default();
    let mut ok = true;
    let mut notes = Vec::new();
    for (n, want) in [(612, (441, 110, 61)), (670, (483, 120, 67))] {
        let ids: Vec<String> = (0..n).map(|i| format!("img{i:04}")).collect();
        let s = split(&ids, &spec)?;
        let got = (s.train.len(), s.valid.len(), s.test.len());
        let mut all: Vec<&String> = s.train.iter().chain(&s.valid).chain(&s.test).collect();
        all.sort();
        all.dedup();
        ok &= got == want && spec.sizes(n)? == want && all.len() == n;
        notes.push(format!("{n} -> {got:?}"));
    }
    Ok((ok, notes.join(", ")))
}

fn determinism(dir: &Path) -> Outcome {
    let data = synth_dataset(6, 32, 32, 2, 3)?;
    let config = ModelConfig::new(Variant::Dcsau).with_widths(&[8, 16]);
    let run = TrainConfig {
        epochs: 2,
        batch_size: 2,
        seed: 9,
        augment: Some(Default::default()),
        ..TrainConfig::default()
    };
    let mut trained = Vec::new();
    for name in ["a", "b"] {
        let mut model = Model::build(&config, 9)?;
        train(&mut model, &data, &data, &run, Some(&dir.join(name)))?;
        trained.push(model);
    }
    let mut identical = true;
    for file in ["best.ckpt", "final.ckpt"] {
        let bytes = |d: &str| std::fs::read(dir.join(d).join(file));
        identical &= bytes("a")? == bytes("b")?;
    }
    let before = evaluate(&mut trained[0], &data, 0.5)?;
    let mut restored = Model::build(&config, 1234)?;
    restored.load(&dir.join("a/final.ckpt"))?;
    let after = evaluate(&mut restored, &data, 0.5)?;
    let round_trip = before.to_json() == after.to_json();
    Ok((
        identical && round_trip,
        format!("checkpoints identical: {identical}, eval report preserved: {round_trip}"),
    ))
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let criteria: Vec<Criterion> = vec![
        ("cost-model spatial scaling", Box::new(flop_scaling)),
        ("parameter targets", Box::new(parameter_targets)),
        ("kernel-sweep monotonicity", Box::new(kernel_sweep)),
        ("gradient correctness", Box::new(gradients)),
        ("attention normalization and residual identity", Box::new(attention)),
        ("oracle equivalence", Box::new(oracles)),
        ("desk-scale convergence", Box::new(|| convergence(&tmp.path().join("overfit")))),
        ("split fidelity", Box::new(splits)),
        ("determinism and serialization", Box::new(|| determinism(&tmp.path().join("determinism")))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (ok, note) = check().unwrap_or_else(|e| (false, format!("error: {e}")));
        println!("{} criterion {}: {name}: {note}", if ok { "PASS" } else { "FAIL" }, i + 1);
        failed += usize::from(!ok);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
