use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::output::{envelope, write_atomic, write_json, write_table};
use super::{
    AuditArgs, CalibrateArgs, CliError, Command, CompareArgs, PredictArgs, PresetArg, SimulateArgs, TemperatureArg,
};
use crate::calibration::{
    fit, fit_temperature, fit_temperature_by_group, prepare_table, CalibratedPredictor, Method, Temperature,
};
use crate::data::{parse_score_table, split_calibration_test, ColumnSchema, ScoreScale, ScoreTable, SplitSpec, TableFormat};
use crate::metrics::plot::scatter_svg;
use crate::metrics::{
    audit_sets, max_softmax_prob, predictive_entropy, AuditOptions, AuditReport, DisparityNorm, MethodAudit,
};
use crate::prediction::{predict, Prediction, UnseenGroupPolicy};
use crate::scoring::{ScoreMethod, DEFAULT_RAPS_K_REG};
use crate::synth::{fitzpatrick_preset, generate, generate_logits, group_shift_preset, SynthConfig};

const PREDICTOR_PREFIX: &str = "predictor_";

pub(super) fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate(a) => simulate(&a),
        Command::Calibrate(a) => calibrate(&a),
        Command::Predict(a) => predict_cmd(&a),
        Command::Audit(a) => audit(&a),
        Command::Compare(a) => compare(&a),
    }
}

fn run_config<T: Serialize>(command: &str, args: &T) -> serde_json::Value {
    serde_json::json!({ "command": command, "args": args })
}

fn warn(message: &str) {
    eprintln!("warning: {message}");
}

fn read_table(path: &Path, scale: ScoreScale) -> Result<ScoreTable, CliError> {
    let format = TableFormat::from_path(path)
        .ok_or_else(|| CliError::Usage(format!("{}: input must end in .csv or .jsonl", path.display())))?;
    Ok(parse_score_table(path, format, &ColumnSchema::with_scale(scale))?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let mut config: SynthConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => match args.preset {
            PresetArg::Fitzpatrick => fitzpatrick_preset(args.n, args.seed),
            PresetArg::Shift => group_shift_preset(args.n, args.k, args.seed),
        },
    };
    if args.mc_samples.is_some() {
        config.t_samples = args.mc_samples;
    }
    let table = match args.scale.into() {
        ScoreScale::Probability => generate(&config)?,
        ScoreScale::Logit => generate_logits(&config)?,
        ScoreScale::Unnormalized => {
            return Err(CliError::Usage("simulate writes probability or logit tables only".into()));
        }
    };
    let path = args.out_dir.join(&args.out);
    let mut echo = run_config("simulate", args);
    echo["generator"] = serde_json::to_value(&config).map_err(|e| CliError::Internal(e.to_string()))?;
    write_table(&path, &table, &echo)?;
    println!("wrote {} records in {} groups to {}", table.len(), table.groups().len(), path.display());
    Ok(())
}

/// On-disk form of a fitted predictor.
#[derive(Debug, Serialize, Deserialize)]
struct PredictorFile {
    toolkit_version: String,
    config: serde_json::Value,
    predictor: CalibratedPredictor,
}

fn predictor_file_name(method: Method, alpha: f64) -> String {
    format!("{PREDICTOR_PREFIX}{method}_{alpha}.json")
}

fn fit_temperature_mode(cal: &ScoreTable, mode: TemperatureArg) -> Result<Option<Temperature>, CliError> {
    if mode == TemperatureArg::None {
        return Ok(None);
    }
    let fit_table = if cal.scale() == ScoreScale::Unnormalized {
        prepare_table(cal, None)?
    } else {
        cal.clone()
    };
    let global = fit_temperature(&fit_table)?;
    if !global.interior {
        warn(&format!("temperature fit hit the search boundary (beta = {})", global.beta));
    }
    Ok(Some(match mode {
        TemperatureArg::Global => Temperature::Global { beta: global.beta },
        _ => {
            let fits = fit_temperature_by_group(&fit_table)?;
            for (g, f) in &fits {
                if !f.interior {
                    warn(&format!("temperature fit for group {g:?} hit the search boundary (beta = {})", f.beta));
                }
            }
            Temperature::PerGroup {
                betas: fits.into_iter().map(|(g, f)| (g, f.beta)).collect(),
                fallback: global.beta,
            }
        }
    }))
}

fn calibrate(args: &CalibrateArgs) -> Result<(), CliError> {
    let scale: ScoreScale = args.input.scale.into();
    let table = read_table(&args.input.input, scale)?;
    let spec = SplitSpec {
        calibration_fraction: args.calibration_fraction,
        seed: args.seed,
        stratify_by_group: !args.no_stratify,
    };
    let (cal, test) = split_calibration_test(&table, &spec)?;
    let mode = args.temperature.unwrap_or(if scale == ScoreScale::Logit {
        TemperatureArg::Global
    } else {
        TemperatureArg::None
    });
    let temperature = fit_temperature_mode(&cal, mode)?;
    let cal_probs = prepare_table(&cal, temperature.as_ref())?;

    let k_reg = args.k_reg.unwrap_or(DEFAULT_RAPS_K_REG.min(table.k()));
    let mut raps = ScoreMethod::raps(args.lambda, k_reg);
    if args.randomized {
        raps = raps.randomized(args.seed);
    }
    let methods: BTreeSet<Method> = args.methods.iter().copied().collect();
    if methods.iter().any(|m| m.score_kind() == Some(crate::scoring::ScoreKind::Raps)) {
        raps.validate(table.k()).map_err(CliError::Usage)?;
    }
    let mut alphas = args.alphas.clone();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();

    let config = run_config("calibrate", args);
    let out = &args.out_dir;
    for &method in &methods {
        for &alpha in &alphas {
            let predictor = fit(&cal_probs, method, alpha, raps)?.with_input(scale, temperature.clone());
            for w in &predictor.warnings {
                warn(&format!("{method} alpha {alpha}: {w}"));
            }
            let file = PredictorFile {
                toolkit_version: crate::VERSION.to_string(),
                config: config.clone(),
                predictor,
            };
            write_json(&out.join(predictor_file_name(method, alpha)), &file)?;
        }
    }
    write_table(&out.join("calibration_split.jsonl"), &cal, &config)?;
    write_table(&out.join("test_split.jsonl"), &test, &config)?;
    println!(
        "fitted {} predictor(s) on {} calibration records; {} test records held out in {}",
        methods.len() * alphas.len(),
        cal.len(),
        test.len(),
        out.join("test_split.jsonl").display()
    );
    Ok(())
}

fn load_predictor(path: &Path) -> Result<CalibratedPredictor, CliError> {
    let file: PredictorFile = read_json(path)?;
    file.predictor
        .validate()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(file.predictor)
}

/// Predictor files named directly, or found by prefix in named directories.
fn predictor_paths(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut paths = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let entries = fs::read_dir(input).map_err(|e| CliError::Data(format!("{}: {e}", input.display())))?;
            let mut found: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with(PREDICTOR_PREFIX) && n.ends_with(".json"))
                })
                .collect();
            found.sort();
            paths.extend(found);
        } else {
            paths.push(input.clone());
        }
    }
    if paths.is_empty() {
        return Err(CliError::Data(format!("no predictor files found in {inputs:?}")));
    }
    Ok(paths)
}

fn load_predictors(inputs: &[PathBuf]) -> Result<Vec<CalibratedPredictor>, CliError> {
    let mut predictors = predictor_paths(inputs)?
        .iter()
        .map(|p| load_predictor(p))
        .collect::<Result<Vec<_>, _>>()?;
    predictors.sort_by(|a, b| a.method.cmp(&b.method).then(a.alpha.total_cmp(&b.alpha)));
    for w in predictors.windows(2) {
        if w[0].method == w[1].method && w[0].alpha == w[1].alpha {
            return Err(CliError::Data(format!(
                "two predictors for {} at alpha {}",
                w[0].method, w[0].alpha
            )));
        }
    }
    let (scale, k) = (predictors[0].input_scale, predictors[0].k);
    if predictors.iter().any(|p| p.input_scale != scale || p.k != k) {
        return Err(CliError::Data("predictors disagree on input scale or class count".into()));
    }
    Ok(predictors)
}

fn predict_all(
    predictor: &CalibratedPredictor,
    table: &ScoreTable,
    policy: UnseenGroupPolicy,
) -> Result<Vec<Prediction>, CliError> {
    let predictions = table
        .records()
        .iter()
        .map(|r| predict(predictor, r, policy))
        .collect::<Result<Vec<_>, _>>()?;
    let mut unseen: BTreeMap<&str, usize> = BTreeMap::new();
    for (p, r) in predictions.iter().zip(table.records()) {
        if p.unseen_group_policy.is_some() {
            *unseen.entry(r.group.as_str()).or_default() += 1;
        }
    }
    for (g, n) in unseen {
        warn(&format!(
            "{} alpha {}: group {g:?} was not seen at calibration; {n} record(s) used policy {policy:?}",
            predictor.method, predictor.alpha
        ));
    }
    Ok(predictions)
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    id: &'a str,
    group: &'a str,
    set: &'a [usize],
    set_size: usize,
    method: Method,
    alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    group_used: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    unseen_group_policy: Option<UnseenGroupPolicy>,
}

fn predict_cmd(args: &PredictArgs) -> Result<(), CliError> {
    let predictor = load_predictor(&args.predictor)?;
    let raw = read_table(&args.input, predictor.input_scale)?;
    let table = prepare_table(&raw, predictor.temperature.as_ref())?;
    let predictions = predict_all(&predictor, &table, args.policy.into())?;
    let mut buf = String::new();
    for (p, r) in predictions.iter().zip(table.records()) {
        let line = PredictionLine {
            id: &r.id,
            group: &r.group,
            set: &p.set.classes,
            set_size: p.set.size,
            method: predictor.method,
            alpha: predictor.alpha,
            group_used: p.set.group_used.as_deref(),
            unseen_group_policy: p.unseen_group_policy,
        };
        buf.push_str(&serde_json::to_string(&line).map_err(|e| CliError::Internal(e.to_string()))?);
        buf.push('\n');
    }
    let path = match &args.out {
        Some(p) => args.out_dir.join(p),
        None => args
            .out_dir
            .join(format!("predictions_{}_{}.jsonl", predictor.method, predictor.alpha)),
    };
    write_atomic(&path, buf.as_bytes())?;
    write_json(&super::output::sidecar_path(&path), &envelope(&run_config("predict", args)))?;
    println!("wrote {} prediction sets to {}", predictions.len(), path.display());
    Ok(())
}

struct Audited {
    report: AuditReport,
    plots: Vec<(String, String)>,
}

fn audit_predictors(
    predictors: &[CalibratedPredictor],
    args: &AuditArgs,
    config: serde_json::Value,
) -> Result<Audited, CliError> {
    let raw = read_table(&args.test, predictors[0].input_scale)?;
    let options = AuditOptions {
        critical: args.critical.iter().copied().collect(),
        normalization: if args.normalize_pairs {
            DisparityNorm::PerPair
        } else {
            DisparityNorm::PerGroup
        },
    };
    if let Some(&c) = options.critical.iter().find(|&&c| c >= raw.k()) {
        return Err(CliError::Usage(format!("critical class {c} is out of range for K = {}", raw.k())));
    }
    let mut entries: Vec<MethodAudit> = Vec::new();
    let mut plots = Vec::new();
    for predictor in predictors {
        let table = prepare_table(&raw, predictor.temperature.as_ref())?;
        let sets: Vec<_> = predict_all(predictor, &table, args.policy.into())?
            .into_iter()
            .map(|p| p.set)
            .collect();
        let entry = audit_sets(predictor.method, predictor.alpha, &table, &sets, &options)?;
        if args.svg {
            let mut by_entropy: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            let mut by_softmax: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for (r, s) in table.records().iter().zip(&sets) {
                let size = s.size as f64;
                by_entropy.entry(r.group.clone()).or_default().push((predictive_entropy(r)?, size));
                by_softmax
                    .entry(r.group.clone())
                    .or_default()
                    .push((1.0 - max_softmax_prob(r)?, size));
            }
            let tag = format!("{}_{}", predictor.method, predictor.alpha);
            let title = format!("{} alpha {}", predictor.method, predictor.alpha);
            plots.push((
                format!("scatter_{tag}_entropy.svg"),
                scatter_svg(&title, "predictive entropy", &by_entropy),
            ));
            plots.push((
                format!("scatter_{tag}_softmax.svg"),
                scatter_svg(&title, "1 - max softmax probability", &by_softmax),
            ));
        }
        entries.push(entry);
    }
    let mut notes: BTreeSet<&str> = BTreeSet::new();
    for e in &entries {
        notes.extend(e.notes.iter().map(String::as_str));
    }
    for n in notes {
        warn(n);
    }
    Ok(Audited {
        report: AuditReport::new(config, options.normalization, entries),
        plots,
    })
}

fn write_csv_report(path: &Path, report: &AuditReport) -> Result<(), CliError> {
    let mut buf = Vec::new();
    report
        .write_csv(&mut buf)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    write_atomic(path, &buf)
}

fn audit(args: &AuditArgs) -> Result<(), CliError> {
    let predictors = load_predictors(&args.predictors)?;
    let audited = audit_predictors(&predictors, args, run_config("audit", args))?;
    let out = &args.out_dir;
    write_json(&out.join("audit_report.json"), &audited.report)?;
    write_csv_report(&out.join("audit_report.csv"), &audited.report)?;
    for (name, svg) in &audited.plots {
        write_atomic(&out.join(name), svg.as_bytes())?;
    }
    println!(
        "audited {} predictor(s); report in {}",
        audited.report.entries.len(),
        out.join("audit_report.json").display()
    );
    Ok(())
}

fn compare(args: &CompareArgs) -> Result<(), CliError> {
    let wanted: BTreeSet<Method> = args.methods.iter().copied().collect();
    if wanted.len() < 2 {
        return Err(CliError::Usage(format!(
            "compare needs at least two methods, got {}",
            wanted.len()
        )));
    }
    let predictors = load_predictors(&args.audit.predictors)?;
    let available: BTreeSet<Method> = predictors.iter().map(|p| p.method).collect();
    let selected: Vec<CalibratedPredictor> = predictors.into_iter().filter(|p| wanted.contains(&p.method)).collect();
    let list = |s: &BTreeSet<Method>| s.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(", ");
    if selected.is_empty() {
        return Err(CliError::Data(format!(
            "no predictors for the requested methods ({}); available: {}",
            list(&wanted),
            list(&available)
        )));
    }
    let missing: BTreeSet<Method> = wanted.difference(&available).copied().collect();
    if !missing.is_empty() {
        warn(&format!("no predictors for {}; comparing the rest", list(&missing)));
    }
    let audited = audit_predictors(&selected, &args.audit, run_config("compare", args))?;
    let out = &args.audit.out_dir;
    write_csv_report(&out.join("compare.csv"), &audited.report)?;
    for (name, svg) in &audited.plots {
        write_atomic(&out.join(name), svg.as_bytes())?;
    }
    print!("{}", audited.report.summary_table());
    Ok(())
}
