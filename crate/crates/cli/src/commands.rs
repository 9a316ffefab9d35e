use std::io::Write;
use std::path::Path;
use std::time::Instant;

use layerstat::attack::{defend, run_attack, AttackResult};
use layerstat::dataset::validate_dataset;
use layerstat::detector::{fit_detector, DetectorModel, Task};
use layerstat::metrics::{
    average_precision, norm_sweep, pauc, pauc_name, proportion_sweep, sweep_proportions, LabeledScores,
};
use layerstat::pvalues::stream_seed;
use layerstat::synthetic::run_demo;
use layerstat::toynet::{export_representations, ToyNetwork};
use layerstat::{load_dataset, write_dataset, Error, LayerDataset, Matrix};
use rayon::prelude::*;
use serde::Serialize;

use crate::args::{Cli, Command};
use crate::config::{required, Failure, RunConfig};
use crate::report::{plot_sweep, read_scores, write_scores, write_sweep, Outputs};

/// Writes a line to stdout, ignoring a closed pipe.
fn say(text: &str) {
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{text}").and_then(|_| stdout.flush());
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = RunConfig::resolve(&cli.common)?;
    match &cli.command {
        Command::Evaluate(a) => cfg.apply_evaluate(a),
        Command::Attack(a) => cfg.apply_attack(a),
        Command::Demo(a) => cfg.apply_demo(a),
        _ => {}
    }
    cfg.validate()?;
    if let Some(n) = cfg.workers {
        // Only fails if a pool already exists, which keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Fit => fit(&cfg),
        Command::Score => score(&cfg, cli.common.alpha),
        Command::Evaluate(_) => evaluate(&cfg),
        Command::Attack(_) => attack(&cfg),
        Command::Demo(_) => demo(&cfg),
        Command::Validate => validate(&cfg),
    }
}

fn load(path: &Path) -> Result<LayerDataset, Failure> {
    Ok(load_dataset(path)?)
}

#[derive(Serialize)]
struct LayerReport {
    name: String,
    input_dim: usize,
    projected_dim: usize,
}

#[derive(Serialize)]
struct FitReport {
    num_samples: usize,
    num_classes: usize,
    k: usize,
    layers: Vec<LayerReport>,
    adversarial_threshold: f64,
    adversarial_threshold_degenerate: bool,
    adversarial_calibration_rate: f64,
    ood_threshold: f64,
    ood_threshold_degenerate: bool,
    ood_calibration_rate: f64,
}

fn flagged_rate(scores: &[f64], tau: f64) -> f64 {
    scores.iter().filter(|&&s| s >= tau).count() as f64 / scores.len() as f64
}

fn fit_report(model: &DetectorModel) -> FitReport {
    let adv = model.threshold(Task::Adversarial);
    let ood = model.threshold(Task::Ood);
    FitReport {
        num_samples: model.context.num_reference(),
        num_classes: model.num_classes,
        k: model.context.k,
        layers: model
            .layer_names
            .iter()
            .zip(&model.projections)
            .map(|(name, p)| LayerReport {
                name: name.clone(),
                input_dim: p.input_dim(),
                projected_dim: p.output_dim(),
            })
            .collect(),
        adversarial_threshold: adv.tau,
        adversarial_threshold_degenerate: adv.degenerate,
        adversarial_calibration_rate: flagged_rate(&model.calibration_adv_scores, adv.tau),
        ood_threshold: ood.tau,
        ood_threshold_degenerate: ood.degenerate,
        ood_calibration_rate: flagged_rate(&model.calibration_ood_scores, ood.tau),
    }
}

fn fit(cfg: &RunConfig) -> Result<(), Failure> {
    let dataset = required(&cfg.dataset, "--dataset")?;
    let model_dir = required(&cfg.model_dir, "--model-dir")?;
    let ds = load(dataset)?;
    let mut out = Outputs::create(&cfg.out)?;
    let model = fit_detector(&ds, &cfg.detector)?;
    model.write_to(model_dir)?;
    let report = fit_report(&model);
    say(&serde_json::to_string_pretty(&report).expect("report serializes"));
    out.json("fit_report.json", &report)?;
    out.finish("fit", cfg)
}

fn score(cfg: &RunConfig, alpha: Option<f64>) -> Result<(), Failure> {
    let dataset = required(&cfg.dataset, "--dataset")?;
    let model_dir = required(&cfg.model_dir, "--model-dir")?;
    let mut model = DetectorModel::read_from(model_dir)?;
    if let Some(a) = alpha {
        model.set_alpha(a)?;
    }
    let ds = load(dataset)?;
    let mut out = Outputs::create(&cfg.out)?;
    let scores = if ds.num_samples() == 0 {
        Vec::new()
    } else {
        model.check_compatible(&ds)?;
        model.score_dataset(&ds, cfg.task)?
    };
    write_scores(&mut out, "scores.csv", &scores, ds.true_labels(), cfg.task)?;
    let detected = scores.iter().filter(|s| s.detected).count();
    say(&format!("scored {} samples, {detected} detected", scores.len()));
    out.finish("score", cfg)
}

/// AP and pAUC on the full sets when the anomalous share is at most
/// `proportion`, otherwise medians over random subsets at `proportion`.
fn headline(ls: &LabeledScores, proportion: f64, repeats: usize, alphas: &[f64], seed: u64) -> Result<(f64, Vec<f64>), Failure> {
    let p_a = ls.num_anomalous() as f64 / ls.len() as f64;
    if p_a <= proportion {
        let ap = average_precision(ls)?;
        let paucs = alphas.iter().map(|&a| pauc(ls, a)).collect::<Result<Vec<_>, Error>>()?;
        return Ok((ap, paucs));
    }
    let pt = proportion_sweep(ls, &[proportion], repeats, alphas, seed)?.remove(0);
    Ok((pt.average_precision, pt.pauc.into_iter().map(|(_, v)| v).collect()))
}

/// Writes the metric table, sweeps and plots for one natural/anomalous
/// pair, all named with `prefix`.
fn evaluate_sets(
    out: &mut Outputs,
    prefix: &str,
    natural: &[f64],
    anomalous: &[f64],
    norms: Option<&[f64]>,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(), Failure> {
    let e = &cfg.evaluate;
    let mut scores = natural.to_vec();
    scores.extend_from_slice(anomalous);
    let mut flags = vec![false; natural.len()];
    flags.extend(std::iter::repeat_n(true, anomalous.len()));
    let all_norms = norms.map(|n| {
        let mut v = vec![f64::NAN; natural.len()];
        v.extend_from_slice(n);
        v
    });
    let ls = LabeledScores::with_norms(scores, flags, all_norms)?;
    let (ap, paucs) = headline(&ls, e.proportion, e.repeats, &e.pauc_alphas, stream_seed(seed, 1))?;
    let name = format!("{prefix}metrics.csv");
    let path = out.root().join(&name);
    let mut w = out.writer(&name)?;
    let mut rows = vec![
        ("num_natural".to_string(), natural.len() as f64),
        ("num_anomalous".to_string(), anomalous.len() as f64),
        ("proportion".to_string(), e.proportion),
        ("average_precision".to_string(), ap),
    ];
    rows.extend(e.pauc_alphas.iter().zip(paucs).map(|(&a, v)| (pauc_name(a), v)));
    rows.push(("auc".to_string(), pauc(&ls, 1.0)?));
    let mut text = String::from("metric_name,value\n");
    for (k, v) in &rows {
        text.push_str(&format!("{k},{v}\n"));
    }
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|err| Failure::io(path, err))?;
    say(text.trim_end());

    let proportions = sweep_proportions(anomalous.len(), ls.len());
    let sweep = proportion_sweep(&ls, &proportions, e.repeats, &e.pauc_alphas, stream_seed(seed, 2))?;
    write_sweep(out, &format!("{prefix}proportion_sweep.csv"), &sweep)?;
    plot_sweep(
        out,
        &format!("{prefix}proportion_sweep.svg"),
        "Detection vs anomalous proportion",
        "anomalous proportion",
        &sweep,
    )?;
    if norms.is_some() {
        let sweep = norm_sweep(&ls, &e.pauc_alphas)?;
        write_sweep(out, &format!("{prefix}norm_sweep.csv"), &sweep)?;
        plot_sweep(
            out,
            &format!("{prefix}norm_sweep.svg"),
            "Detection vs perturbation norm",
            "maximum perturbation norm",
            &sweep,
        )?;
    }
    Ok(())
}

fn evaluate(cfg: &RunConfig) -> Result<(), Failure> {
    let natural_path = required(&cfg.evaluate.natural, "--natural")?;
    let anomalous_path = required(&cfg.evaluate.anomalous, "--anomalous")?;
    let (natural, _) = read_scores(natural_path)?;
    let (anomalous, norms) = read_scores(anomalous_path)?;
    let mut out = Outputs::create(&cfg.out)?;
    evaluate_sets(&mut out, "", &natural, &anomalous, norms.as_deref(), cfg, cfg.detector.seed)?;
    out.finish("evaluate", cfg)
}

const ATTACK_HEADER: [&str; 13] = [
    "sample_id",
    "source_class",
    "target_class",
    "success",
    "fools_network",
    "network_pred",
    "score",
    "detected",
    "corrected_class",
    "norm",
    "lambda",
    "iterations",
    "timed_out",
];

fn write_attacks(out: &mut Outputs, name: &str, attacks: &[&(usize, AttackResult)]) -> Result<(), Failure> {
    let path = out.root().join(name);
    let to_io = |e: csv::Error| Failure::io(&path, std::io::Error::other(e));
    let mut w = csv::Writer::from_writer(out.writer(name)?);
    w.write_record(ATTACK_HEADER).map_err(to_io)?;
    for (i, r) in attacks {
        w.write_record([
            i.to_string(),
            r.source_class.to_string(),
            r.target_class.to_string(),
            r.success.to_string(),
            r.fools_network().to_string(),
            r.network_pred.to_string(),
            r.defense.adv_score.to_string(),
            r.defense.detected.to_string(),
            r.defense.corrected_class.to_string(),
            r.l2_norm.to_string(),
            r.lambda_used.to_string(),
            r.iterations.to_string(),
            r.timed_out.to_string(),
        ])
        .map_err(to_io)?;
    }
    w.flush().map_err(|e| Failure::io(&path, e))
}

/// Representations of the attack outputs, labelled with their source class.
fn perturbed_dataset(net: &ToyNetwork, attacks: &[&(usize, AttackResult)]) -> Result<LayerDataset, Failure> {
    let rows: Vec<&[f64]> = attacks.iter().map(|(_, r)| r.x_adv.as_slice()).collect();
    let labels: Vec<usize> = attacks.iter().map(|(_, r)| r.source_class).collect();
    let inputs = if rows.is_empty() {
        Matrix::zeros(0, net.input_dim())
    } else {
        Matrix::from_rows(&rows)?
    };
    Ok(export_representations(net, &inputs, &labels)?)
}

fn attack(cfg: &RunConfig) -> Result<(), Failure> {
    let dataset = required(&cfg.dataset, "--dataset")?;
    let model_dir = required(&cfg.model_dir, "--model-dir")?;
    let network = required(&cfg.network, "--network")?;
    let net = ToyNetwork::read_from(network)?;
    let model = DetectorModel::read_from(model_dir)?;
    let ds = load(dataset)?;
    model.check_compatible(&ds)?;
    let inputs = &ds.layer(0).matrix;
    if inputs.cols() != net.input_dim() {
        return Err(Error::DimensionMismatch {
            what: "network input (first dataset layer)".into(),
            expected: net.input_dim(),
            found: inputs.cols(),
        }
        .into());
    }
    let mut out = Outputs::create(&cfg.out)?;
    let labels = ds.true_labels();
    // Inputs both the network and the defense classify correctly.
    let clean: Vec<bool> = (0..ds.num_samples())
        .into_par_iter()
        .map(|i| {
            let (trace, s) = defend(&net, &model, inputs.row(i), i)?;
            Ok(trace.pred_class == labels[i] && s.corrected_class == labels[i])
        })
        .collect::<Result<_, Error>>()?;
    let candidates: Vec<usize> = (0..ds.num_samples()).filter(|&i| clean[i]).take(cfg.attack_limit).collect();
    let start = Instant::now();
    let results: Vec<(usize, AttackResult)> = candidates
        .par_iter()
        .map(|&i| Ok((i, run_attack(&net, &model, inputs.row(i), labels[i], i, &cfg.attack)?)))
        .collect::<Result<_, Error>>()?;
    let all: Vec<&(usize, AttackResult)> = results.iter().collect();
    let fooling: Vec<&(usize, AttackResult)> = results.iter().filter(|(_, r)| r.fools_network()).collect();
    write_attacks(&mut out, "attack.csv", &all)?;
    write_attacks(&mut out, "adversarial_scores.csv", &fooling)?;
    let perturbed = perturbed_dataset(&net, &all)?;
    write_dataset(&perturbed, out.path("perturbed"))?;
    let successes = results.iter().filter(|(_, r)| r.success).count();
    say(&format!(
        "attacked {} inputs: {successes} fooled the defense, {} fooled the network ({:.1}s)",
        results.len(),
        fooling.len(),
        start.elapsed().as_secs_f64()
    ));
    out.finish("attack", cfg)
}

fn demo(cfg: &RunConfig) -> Result<(), Failure> {
    let mut out = Outputs::create(&cfg.out)?;
    let run = run_demo(&cfg.demo)?;
    run.network.write_to(out.path("network"))?;
    write_dataset(&run.calibration, out.path("calibration"))?;
    write_dataset(&run.test, out.path("test"))?;
    run.detector.write_to(out.path("detector"))?;
    run.ood_detector.write_to(out.path("ood_detector"))?;

    let test_labels = run.test.true_labels();
    write_scores(&mut out, "natural_scores.csv", &run.natural_scores, test_labels, Task::Adversarial)?;
    write_scores(&mut out, "natural_ood_scores.csv", &run.natural_ood_scores, test_labels, Task::Ood)?;
    let noise_labels: Vec<usize> = (0..run.noise_scores.len()).map(|i| i % cfg.demo.num_classes).collect();
    write_scores(&mut out, "noise_scores.csv", &run.noise_scores, &noise_labels, Task::Ood)?;
    let all: Vec<&(usize, AttackResult)> = run.attacks.iter().collect();
    let fooling: Vec<&(usize, AttackResult)> = run.adversarial().collect();
    write_attacks(&mut out, "attack.csv", &all)?;
    write_attacks(&mut out, "adversarial_scores.csv", &fooling)?;
    write_dataset(&perturbed_dataset(&run.network, &fooling)?, out.path("adversarial"))?;

    let natural: Vec<f64> = run.natural_scores.iter().map(|s| s.adv_score).collect();
    let adversarial: Vec<f64> = fooling.iter().map(|(_, r)| r.defense.adv_score).collect();
    let norms: Vec<f64> = fooling.iter().map(|(_, r)| r.l2_norm).collect();
    let mut eval_cfg = cfg.clone();
    eval_cfg.evaluate.proportion = cfg.demo.proportion;
    if !adversarial.is_empty() {
        evaluate_sets(&mut out, "adversarial_", &natural, &adversarial, Some(&norms), &eval_cfg, cfg.demo.seed)?;
    }
    let natural_ood: Vec<f64> = run.natural_ood_scores.iter().map(|s| s.ood_score).collect();
    let noise: Vec<f64> = run.noise_scores.iter().map(|s| s.ood_score).collect();
    evaluate_sets(&mut out, "ood_", &natural_ood, &noise, None, &eval_cfg, cfg.demo.seed)?;

    // Wall-clock time is reported but kept out of the files so reruns are
    // byte-identical.
    let mut summary = serde_json::to_value(&run.summary).expect("summary serializes");
    let seconds = summary.as_object_mut().and_then(|m| m.remove("seconds"));
    out.json("summary.json", &summary)?;
    say(&serde_json::to_string_pretty(&summary).expect("summary serializes"));
    if let Some(s) = seconds.and_then(|s| s.as_f64()) {
        say(&format!("demo finished in {s:.1}s"));
    }
    out.finish("demo", cfg)
}

fn validate(cfg: &RunConfig) -> Result<(), Failure> {
    let dataset = required(&cfg.dataset, "--dataset")?;
    let ds = load(dataset)?;
    let report = validate_dataset(&ds);
    say(&serde_json::to_string_pretty(&report).expect("report serializes"));
    if report.issues.is_empty() {
        Ok(())
    } else {
        Err(Error::Manifest {
            path: dataset.to_path_buf(),
            message: format!("{} validation issue(s)", report.issues.len()),
        }
        .into())
    }
}
