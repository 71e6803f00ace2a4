use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use partswitch::data::{group_hypotheses, training_images, DetectionRecord, HypothesisRecord, ImageAnnotation};
use partswitch::learning::{train, LabelStats, RoundLog, TrainConfig};
use partswitch::metrics::{evaluate, EvalConfig, EvalSummary, PrPoint};
use partswitch::synthetic::{generate_dataset, SynthConfig, GENERATOR_VERSION};
use partswitch::{GraphSpec, TrainedModel};
use serde::{Deserialize, Serialize};

use crate::io::{manifest_path_for, read_json, read_jsonl, sibling, write_atomic, write_json, write_jsonl};
use crate::{CliError, Command};

/// Provenance of one command run, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub tool_version: String,
}

impl RunManifest {
    fn new(command: &str, config: Option<&Path>, inputs: &[&Path], outputs: &[&Path], seed: Option<u64>) -> Self {
        RunManifest {
            command: command.into(),
            config: config.map(Path::to_path_buf),
            inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
            outputs: outputs.iter().map(|p| p.to_path_buf()).collect(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

/// Training config file: the trainer settings plus the node order that
/// hypothesis `node` indices refer to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainFile {
    #[serde(default)]
    pub node_names: Option<Vec<String>>,
    #[serde(flatten)]
    pub train: TrainConfig,
}

/// One line of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogLine {
    Labels(LabelStats),
    Round(RoundLog),
}

fn out_line(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes()).map_err(|e| CliError::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    })
}

pub(crate) fn dispatch(cmd: &Command, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Synth { config, out: dir, seed } => synth(config.as_deref(), dir, *seed, out),
        Command::Train {
            annotations,
            hypotheses,
            config,
            out: model_path,
            seed,
        } => train_cmd(annotations, hypotheses, config.as_deref(), model_path, *seed, out),
        Command::Detect {
            model,
            hypotheses,
            out: dets,
            score_threshold,
            max_detections,
        } => detect_cmd(model, hypotheses, dets, *score_threshold, *max_detections, out),
        Command::Eval {
            detections,
            annotations,
            out: dir,
            config,
            model,
        } => eval_cmd(detections, annotations, dir, config.as_deref(), model.as_deref(), out),
        Command::Inspect { file } => inspect(file, out),
    }
}

fn synth(config: Option<&Path>, dir: &Path, seed: Option<u64>, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg: SynthConfig = match config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Err(e) = cfg.validate() {
        return Err(CliError::schema(config.unwrap_or(Path::new("<defaults>")), e));
    }
    let ds = generate_dataset(&cfg)?;
    let ann = dir.join("annotations.jsonl");
    let hyp = dir.join("hypotheses.jsonl");
    let truth = dir.join("truth.json");
    let resolved = dir.join("synth_config.json");
    write_jsonl(&ann, &ds.annotations)?;
    write_jsonl(&hyp, &ds.hypotheses)?;
    write_json(&truth, &ds.truth)?;
    write_json(&resolved, &cfg)?;
    let manifest = RunManifest::new("synth", config, &[], &[&ann, &hyp, &truth, &resolved], Some(cfg.seed));
    write_json(&dir.join("manifest.json"), &manifest)?;
    out_line(
        out,
        &format!(
            "{GENERATOR_VERSION}: {} images, {} objects, {} hypotheses -> {}\n",
            ds.annotations.len(),
            ds.truth.objects.len(),
            ds.hypotheses.len(),
            dir.display()
        ),
    )
}

/// Node names: holistic first, then every part named in the annotations.
fn spec_from_annotations(anns: &[ImageAnnotation]) -> Result<GraphSpec, partswitch::Error> {
    let parts: BTreeSet<&str> = anns
        .iter()
        .flat_map(|a| a.objects.iter().flat_map(|o| o.parts.keys().map(String::as_str)))
        .collect();
    GraphSpec::new(std::iter::once("holistic").chain(parts))
}

fn train_cmd(
    ann_path: &Path,
    hyp_path: &Path,
    config: Option<&Path>,
    model_path: &Path,
    seed: Option<u64>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let file: TrainFile = match config {
        Some(p) => read_json(p)?,
        None => TrainFile {
            node_names: None,
            train: TrainConfig::default(),
        },
    };
    let spec = match file.node_names {
        Some(names) => {
            GraphSpec::new(names).map_err(|e| CliError::schema(config.unwrap_or(Path::new("<defaults>")), e))?
        }
        None => GraphSpec::animal(),
    };
    let mut cfg = file.train;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Err(e) = cfg.validate() {
        return Err(CliError::schema(config.unwrap_or(Path::new("<defaults>")), e));
    }
    let anns: Vec<ImageAnnotation> = read_jsonl(ann_path)?;
    let hyps: Vec<HypothesisRecord> = read_jsonl(hyp_path)?;
    if cfg.class_name.is_none() {
        let classes: BTreeSet<&str> = anns
            .iter()
            .flat_map(|a| a.objects.iter().map(|o| o.class.as_str()))
            .collect();
        match classes.len() {
            1 => cfg.class_name = classes.first().map(|c| c.to_string()),
            0 => return Err(CliError::schema(ann_path, "no annotated objects")),
            _ => {
                return Err(CliError::Usage(format!(
                    "annotations contain {} classes; set class_name in the training config",
                    classes.len()
                )))
            }
        }
    }
    let images =
        training_images(&spec, &anns, &hyps, cfg.class_name.as_deref()).map_err(|e| CliError::schema(hyp_path, e))?;
    let outcome = train(&spec, &images, &cfg)?;

    let log_path = sibling(model_path, "train_log.jsonl");
    let mut log = vec![LogLine::Labels(outcome.labels.clone())];
    log.extend(outcome.rounds.iter().cloned().map(LogLine::Round));
    write_json(model_path, &outcome.model)?;
    write_jsonl(&log_path, &log)?;
    let manifest = RunManifest::new(
        "train",
        config,
        &[ann_path, hyp_path],
        &[model_path, &log_path],
        Some(cfg.seed),
    );
    write_json(&manifest_path_for(model_path), &manifest)?;

    let mut msg = format!(
        "labelled {} of {} objects; {} rounds\n",
        outcome.labels.labeled,
        outcome.labels.objects,
        outcome.rounds.len()
    );
    for r in &outcome.rounds {
        let _ = writeln!(
            msg,
            "  round {}: objective {:.6} gap {:.2e} examples {} (+{} mined)",
            r.round, r.objective, r.duality_gap, r.examples, r.new_negatives
        );
    }
    out_line(out, &msg)
}

fn load_model(path: &Path) -> Result<TrainedModel, CliError> {
    let model: TrainedModel = read_json(path)?;
    model
        .params
        .check(model.spec())
        .map_err(|e| CliError::schema(path, e))?;
    model
        .prune
        .validate(model.spec().num_nodes())
        .map_err(|e| CliError::schema(path, e))?;
    Ok(model)
}

fn detect_cmd(
    model_path: &Path,
    hyp_path: &Path,
    dets_path: &Path,
    score_threshold: Option<f64>,
    max_detections: usize,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let model = load_model(model_path)?;
    let records: Vec<HypothesisRecord> = read_jsonl(hyp_path)?;
    let stores = group_hypotheses(model.spec().num_nodes(), &records).map_err(|e| CliError::schema(hyp_path, e))?;
    let cfg = model.detect_config(score_threshold.unwrap_or(f64::NEG_INFINITY), max_detections);
    let dets = model.detect_all(&stores, &cfg)?;
    write_jsonl(dets_path, &dets)?;
    let manifest = RunManifest::new("detect", None, &[model_path, hyp_path], &[dets_path], None);
    write_json(&manifest_path_for(dets_path), &manifest)?;
    out_line(
        out,
        &format!(
            "{} detections on {} images -> {}\n",
            dets.len(),
            stores.len(),
            dets_path.display()
        ),
    )
}

fn pr_csv(curves: &BTreeMap<String, Vec<PrPoint>>) -> String {
    let mut s = String::from("class,score,precision,recall\n");
    for (class, curve) in curves {
        for p in curve {
            let _ = writeln!(s, "{class},{},{},{}", p.score, p.precision, p.recall);
        }
    }
    s
}

fn eval_cmd(
    dets_path: &Path,
    ann_path: &Path,
    dir: &Path,
    config: Option<&Path>,
    model: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let cfg: EvalConfig = match config {
        Some(p) => read_json(p)?,
        None => EvalConfig::default(),
    };
    if let Err(e) = cfg.validate() {
        return Err(CliError::schema(config.unwrap_or(Path::new("<defaults>")), e));
    }
    let dets: Vec<DetectionRecord> = read_jsonl(dets_path)?;
    let anns: Vec<ImageAnnotation> = read_jsonl(ann_path)?;
    let spec = match model {
        Some(p) => load_model(p)?.spec().clone(),
        None => spec_from_annotations(&anns).map_err(|e| CliError::schema(ann_path, e))?,
    };
    let (summary, curves) = evaluate(&dets, &anns, &spec, &cfg)?;
    let summary_path = dir.join("summary.json");
    let csv_path = dir.join("pr_curve.csv");
    write_json(&summary_path, &summary)?;
    write_atomic(&csv_path, pr_csv(&curves).as_bytes())?;
    let mut inputs = vec![dets_path, ann_path];
    inputs.extend(model);
    let manifest = RunManifest::new("eval", config, &inputs, &[&summary_path, &csv_path], None);
    write_json(&dir.join("manifest.json"), &manifest)?;
    out_line(out, &format_summary(&summary))
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.1}%"))
}

fn format_summary(s: &EvalSummary) -> String {
    let mut t = String::new();
    for (class, c) in &s.classes {
        let _ = writeln!(
            t,
            "{class}: AP {:.4} ({} detections, {} ground truth)",
            c.ap, c.num_detections, c.num_gt
        );
        for p in &c.parts {
            let _ = writeln!(
                t,
                "  {:<10} POP {:>7} PCP {:>7} over {} objects",
                p.part,
                pct(p.pop),
                pct(p.pcp),
                p.objects
            );
        }
        for (size, row) in &c.size_table {
            let _ = writeln!(
                t,
                "  {size:?}: holistic-only {} ({} of {} recalled, {} instances)",
                pct(row.rate),
                row.holistic_only,
                row.recalled,
                row.instances
            );
        }
    }
    t
}

fn pattern_label(spec: &GraphSpec, mask: u32) -> String {
    (0..spec.num_nodes())
        .filter(|n| mask >> n & 1 == 1)
        .map(|n| spec.node_name(n))
        .collect::<Vec<_>>()
        .join("+")
}

fn describe_model(m: &TrainedModel) -> String {
    let spec = m.spec();
    let p = &m.params;
    let mut t = String::new();
    let _ = writeln!(t, "class: {}", m.class_name);
    let _ = writeln!(t, "nodes: {}", spec.node_names().join(", "));
    let _ = writeln!(t, "dimension: {}  sigmoid slope: {}", spec.dim(), p.sigmoid_slope);
    if let Some(a) = &m.allowed_patterns {
        let _ = writeln!(t, "allowed patterns: {a:?}");
    }
    let _ = writeln!(t, "unary weights:");
    for (n, w) in p.unary_w.iter().enumerate() {
        let _ = writeln!(
            t,
            "  {:<10} {w:>10.4}  prune >= {:.4}, keep {}",
            spec.node_name(n),
            m.prune.unary_threshold[n],
            m.prune.max_hypotheses[n]
        );
    }
    let _ = writeln!(t, "pairwise weights (dx dy dx2 dy2 | ds dsx dsy ds2 dsx2 dsy2):");
    for ((i, j), w) in spec.edges().zip(&p.pairwise_w) {
        let cells: Vec<String> = w.iter().map(|v| format!("{v:.3}")).collect();
        let _ = writeln!(t, "  {}-{}: {}", spec.node_name(i), spec.node_name(j), cells.join(" "));
    }
    let _ = writeln!(t, "pattern biases:");
    for pat in spec.patterns() {
        let reg = m.box_regressors.get(&pat.mask());
        let reg_note = match reg {
            Some(r) if r.fallback => format!("union box ({} samples)", r.trained_on),
            Some(r) => format!("regressed ({} samples)", r.trained_on),
            None => "holistic box".into(),
        };
        let _ = writeln!(
            t,
            "  {:>3} {:<28} {:>9.4}  {reg_note}",
            pat.mask(),
            pattern_label(spec, pat.mask()),
            p.bias(pat)
        );
    }
    t
}

fn describe_detections(dets: &[DetectionRecord]) -> String {
    let mut t = String::new();
    let images: BTreeSet<&str> = dets.iter().map(|d| d.image_id.as_str()).collect();
    let _ = writeln!(t, "{} detections on {} images", dets.len(), images.len());
    let mut patterns: BTreeMap<u32, usize> = BTreeMap::new();
    for d in dets {
        *patterns.entry(d.pattern_mask).or_default() += 1;
    }
    let _ = writeln!(t, "detections per pattern mask:");
    for (m, c) in &patterns {
        let _ = writeln!(t, "  {m:>3}: {c}");
    }
    let mut top: Vec<&DetectionRecord> = dets.iter().collect();
    top.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.image_id.cmp(&b.image_id)));
    let _ = writeln!(t, "top detections:");
    for d in top.iter().take(10) {
        let parts: Vec<String> = d.assignment.iter().map(|(n, id)| format!("{n}={id}")).collect();
        let b = d.bbox;
        let _ = writeln!(
            t,
            "  {} {:.4} [{:.1} {:.1} {:.1} {:.1}] {}",
            d.image_id,
            d.score,
            b.x1,
            b.y1,
            b.x2,
            b.y2,
            parts.join(" ")
        );
    }
    t
}

fn inspect(file: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let text = if file.extension().is_some_and(|e| e == "jsonl") {
        describe_detections(&read_jsonl::<DetectionRecord>(file)?)
    } else {
        describe_model(&load_model(file)?)
    };
    out_line(out, &text)
}
