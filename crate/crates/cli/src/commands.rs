//! Command implementations. Each writes human-readable output to the given
//! streams so the binary and the tests share one code path.

use std::fmt;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use uncertainty_loop::backend::{OpenAiBackend, OpenAiConfig, ScriptedBackend, ScriptedScenario};
use uncertainty_loop::calibration::{
    bin_tokens, ece_unweighted, ece_weighted, entropy_histogram, trigger_mix, uniform_edges,
    CalibrationBin, CalibrationSample, EntropyHistogram, TriggerMix, LOW_BAND_UPPER,
    MEDIUM_BAND_UPPER,
};
use uncertainty_loop::orchestrator::{run_batch, BatchSummary, RunRecord};
use uncertainty_loop::report::render_text_with;
use uncertainty_loop::simulator::{sample_stream, SequenceLength, SyntheticProfile};
use uncertainty_loop::trace::{read_trace, TraceLine, TraceWriter};
use uncertainty_loop::{run_query, sequence_metrics, Backend};

use crate::config::{resolve, FileConfig, FlagOverrides, Settings};
use crate::{CalibrateArgs, Cli, Command, GlobalArgs, ScenarioAction, SimulateArgs};

pub const STREAM_SCHEMA_VERSION: u32 = 1;

/// A failed command. Usage errors exit with 2, everything else with 1.
#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let e = match self {
            CliError::Usage(e) | CliError::Runtime(e) => e,
        };
        if f.alternate() {
            write!(f, "{e:#}")
        } else {
            write!(f, "{e}")
        }
    }
}

impl std::error::Error for CliError {}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CmdResult = Result<(), CliError>;

pub fn execute(
    cli: &Cli,
    env: &dyn Fn(&str) -> Option<String>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> CmdResult {
    match &cli.command {
        Command::Run { query } => cmd_run(query, &cli.global, env, stdout, stderr),
        Command::Batch { file } => cmd_batch(file, &cli.global, env, stdout, stderr),
        Command::Calibrate(args) => cmd_calibrate(args, stdout),
        Command::Simulate(args) => cmd_simulate(args, &cli.global, stdout),
        Command::Scenario { action } => cmd_scenario(action, stdout),
    }
}

pub fn flag_overrides(g: &GlobalArgs) -> FlagOverrides {
    FlagOverrides {
        no_refine: g.no_refine,
        no_alternatives: g.no_alternatives,
        no_context: g.no_context,
        threshold_perplexity: g.threshold_perplexity,
        threshold_entropy: g.threshold_entropy,
        threshold_count: g.threshold_count,
        top_k: g.top_k,
        model: g.model.clone(),
        seed: g.seed,
        parallelism: g.parallelism,
    }
}

pub fn load_settings(
    g: &GlobalArgs,
    env: &dyn Fn(&str) -> Option<String>,
) -> Result<Settings, CliError> {
    let file = g
        .config
        .as_deref()
        .map(FileConfig::load)
        .transpose()
        .map_err(|e| CliError::Usage(e.into()))?;
    resolve(file, env, &flag_overrides(g)).map_err(|e| CliError::Usage(e.into()))
}

/// Resolves `--mock` to a built-in scenario or a scenario file.
pub fn load_scenario(spec: &str) -> Result<ScriptedScenario, CliError> {
    if let Some(s) = uncertainty_loop::scenarios::builtin(spec) {
        return Ok(s);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(CliError::Usage(anyhow!(
            "unknown scenario {spec:?}; built-ins are {}",
            uncertainty_loop::scenarios::BUILTIN.join(", ")
        )));
    }
    ScriptedScenario::load(path)
        .with_context(|| format!("loading scenario {}", path.display()))
        .map_err(CliError::Usage)
}

fn make_backend(g: &GlobalArgs, settings: &Settings) -> Result<Box<dyn Backend>, CliError> {
    if let Some(spec) = &g.mock {
        let backend =
            ScriptedBackend::new(load_scenario(spec)?).map_err(|e| CliError::Usage(e.into()))?;
        return Ok(Box::new(backend));
    }
    let cfg = settings.backend.openai_config();
    if cfg.api_key.is_none() && cfg.base_url == OpenAiConfig::default().base_url {
        return Err(CliError::Usage(anyhow!(
            "no API key: set ULOOP_API_KEY (or OPENAI_API_KEY), add api_key under [backend], or pass --mock"
        )));
    }
    Ok(Box::new(
        OpenAiBackend::new(cfg).context("building HTTP client")?,
    ))
}

fn append_traces(path: &Path, lines: &[TraceLine]) -> Result<(), CliError> {
    let writer =
        TraceWriter::open(path).with_context(|| format!("opening trace {}", path.display()))?;
    for line in lines {
        writer
            .append(line)
            .with_context(|| format!("writing trace {}", path.display()))?;
    }
    Ok(())
}

fn describe_run(
    record: &RunRecord,
    settings: &Settings,
    out: &mut dyn Write,
) -> std::io::Result<()> {
    let m = &record.first_pass.metrics;
    writeln!(
        out,
        "draft: perplexity {:.3}, max entropy {:.3} nats, {} low-confidence of {} tokens",
        m.perplexity, m.max_entropy, m.low_conf_count, m.token_count
    )?;
    let fired = record.decision.fired_names();
    writeln!(
        out,
        "decision: refine={} fired=[{}] cause={}",
        record.decision.refine,
        fired.join(","),
        record.decision.cause_class.as_str()
    )?;
    if let Some(report) = &record.report {
        write!(
            out,
            "{}",
            render_text_with(report, settings.run.render_options())
        )?;
    }
    if let Some(e) = &record.refinement_error {
        writeln!(out, "refinement failed, draft kept: {e}")?;
    }
    writeln!(
        out,
        "latency: {:.1} ms total, cost ${:.6}",
        record.latency.total_ms, record.cost
    )
}

fn cmd_run(
    query: &str,
    g: &GlobalArgs,
    env: &dyn Fn(&str) -> Option<String>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> CmdResult {
    let settings = load_settings(g, env)?;
    let backend = make_backend(g, &settings)?;
    let result = run_query(query, &settings.run, backend.as_ref());
    append_traces(&g.trace_out, &[TraceLine::from_result(result.clone())])?;
    let record = result.map_err(|f| CliError::Runtime(f.into()))?;
    if g.verbose {
        describe_run(&record, &settings, stderr)?;
    }
    writeln!(stdout, "{}", record.final_text)?;
    Ok(())
}

/// Non-empty lines that are not `#` comments.
pub fn read_queries(path: &Path) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(CliError::Usage)?;
    let queries: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect();
    if queries.is_empty() {
        return Err(CliError::Runtime(anyhow!(
            "no queries in {}",
            path.display()
        )));
    }
    Ok(queries)
}

pub fn render_summary(s: &BatchSummary) -> String {
    format!(
        "queries          {:>12}\n\
         succeeded        {:>12}\n\
         failed           {:>12}\n\
         refined          {:>12}\n\
         degraded         {:>12}\n\
         refinement rate  {:>11.2}%\n\
         mean latency ms  {:>12.1}\n\
         total cost ($)   {:>12.6}\n",
        s.queries,
        s.succeeded,
        s.failed,
        s.refined,
        s.degraded,
        100.0 * s.refinement_rate,
        s.mean_latency_ms,
        s.total_cost
    )
}

fn cmd_batch(
    file: &Path,
    g: &GlobalArgs,
    env: &dyn Fn(&str) -> Option<String>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> CmdResult {
    let settings = load_settings(g, env)?;
    let queries = read_queries(file)?;
    let backend = make_backend(g, &settings)?;
    let results = run_batch(
        &queries,
        &settings.run,
        backend.as_ref(),
        settings.parallelism,
    );
    let lines: Vec<TraceLine> = results
        .iter()
        .cloned()
        .map(TraceLine::from_result)
        .collect();
    append_traces(&g.trace_out, &lines)?;
    if g.verbose {
        for r in &results {
            match r {
                Ok(rec) => writeln!(
                    stderr,
                    "[{}] {} :: {}",
                    if rec.refinement_attempted() {
                        "refined"
                    } else {
                        "draft"
                    },
                    rec.query,
                    rec.decision.cause_class.as_str()
                )?,
                Err(f) => writeln!(stderr, "[failed] {f}")?,
            }
        }
    }
    let summary = BatchSummary::from_results(&results);
    write!(stdout, "{}", render_summary(&summary))?;
    if summary.failed > 0 {
        return Err(CliError::Runtime(anyhow!(
            "{} of {} queries failed",
            summary.failed,
            summary.queries
        )));
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct SampleRow {
    confidence: f64,
    correct: String,
}

fn parse_correct(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Some(true),
        "0" | "false" | "no" => Some(false),
        _ => None,
    }
}

pub fn read_samples(path: &Path) -> anyhow::Result<Vec<CalibrationSample>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<SampleRow>().enumerate() {
        let row = row.with_context(|| format!("{} row {}", path.display(), i + 2))?;
        let correct = parse_correct(&row.correct).ok_or_else(|| {
            anyhow!(
                "{} row {}: correct must be 0/1 or true/false",
                path.display(),
                i + 2
            )
        })?;
        out.push(CalibrationSample {
            confidence: row.confidence,
            correct,
        });
    }
    Ok(out)
}

/// A stream file as written by `simulate`.
#[derive(Debug, Serialize, Deserialize)]
pub struct StreamHeader {
    pub schema_version: u32,
    pub profile: SyntheticProfile,
}

pub fn read_stream_entropies(path: &Path) -> anyhow::Result<Vec<f64>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let doc: Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let tokens = uncertainty_loop::backend::parse_logprob_payload(&doc)?;
    if tokens.is_empty() {
        return Ok(Vec::new());
    }
    Ok(sequence_metrics(&tokens)?.entropies)
}

#[derive(Debug, Serialize)]
pub struct CalibrationSummary {
    pub samples: usize,
    pub bins: Vec<CalibrationBin>,
    pub ece_unweighted: Option<f64>,
    pub ece_weighted: Option<f64>,
    pub histogram: Option<EntropyHistogram>,
    pub trigger_mix: Option<TriggerMix>,
}

fn write_bins_csv(path: &Path, bins: &[CalibrationBin]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "lower_pct",
        "upper_pct",
        "predicted_confidence",
        "actual_accuracy",
        "gap",
        "token_count",
    ])?;
    for b in bins {
        w.write_record([
            b.lower.to_string(),
            b.upper.to_string(),
            b.predicted_confidence.to_string(),
            b.actual_accuracy.map(|a| a.to_string()).unwrap_or_default(),
            b.gap.to_string(),
            b.token_count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_histogram_csv(path: &Path, h: &EntropyHistogram) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lower_nats", "upper_nats", "count", "fraction"])?;
    for (i, &c) in h.counts.iter().enumerate() {
        w.write_record([
            h.bin_lower(i).to_string(),
            h.bin_lower(i + 1).to_string(),
            c.to_string(),
            (c as f64 / h.total as f64).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_bands_csv(path: &Path, h: &EntropyHistogram) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["band", "lower_nats", "upper_nats", "fraction"])?;
    let rows = [
        ("low", 0.0, Some(LOW_BAND_UPPER), h.bands.low),
        (
            "medium",
            LOW_BAND_UPPER,
            Some(MEDIUM_BAND_UPPER),
            h.bands.medium,
        ),
        ("high", MEDIUM_BAND_UPPER, None, h.bands.high),
    ];
    for (name, lo, hi, frac) in rows {
        w.write_record([
            name.to_string(),
            lo.to_string(),
            hi.map(|v| v.to_string()).unwrap_or_else(|| "inf".into()),
            frac.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_calibrate(args: &CalibrateArgs, stdout: &mut dyn Write) -> CmdResult {
    if args.samples.is_none() && args.trace.is_none() && args.stream.is_none() {
        return Err(CliError::Usage(anyhow!(
            "calibrate needs at least one of --samples, --trace or --stream"
        )));
    }
    if args.bins == 0 {
        return Err(CliError::Usage(anyhow!("--bins must be at least 1")));
    }
    if !(args.bin_width > 0.0 && args.bin_width.is_finite()) {
        return Err(CliError::Usage(anyhow!("--bin-width must be positive")));
    }

    let mut summary = CalibrationSummary {
        samples: 0,
        bins: Vec::new(),
        ece_unweighted: None,
        ece_weighted: None,
        histogram: None,
        trigger_mix: None,
    };

    if let Some(path) = &args.samples {
        let samples = read_samples(path)?;
        if samples.is_empty() {
            return Err(CliError::Runtime(anyhow!(
                "no samples in {}",
                path.display()
            )));
        }
        let bins = bin_tokens(&samples, &uniform_edges(args.bins)).map_err(anyhow::Error::from)?;
        summary.samples = samples.len();
        summary.ece_unweighted = Some(ece_unweighted(&bins));
        summary.ece_weighted = Some(ece_weighted(&bins).map_err(anyhow::Error::from)?);
        summary.bins = bins;
    }

    let mut entropies: Vec<f64> = Vec::new();
    if let Some(path) = &args.trace {
        let trace =
            read_trace(path).with_context(|| format!("reading trace {}", path.display()))?;
        let runs: Vec<RunRecord> = trace.runs().cloned().collect();
        if runs.is_empty() {
            return Err(CliError::Runtime(anyhow!(
                "trace {} has no run records",
                path.display()
            )));
        }
        for r in &runs {
            entropies.extend_from_slice(&r.first_pass.metrics.entropies);
        }
        summary.trigger_mix = Some(trigger_mix(&runs).map_err(anyhow::Error::from)?);
    }
    if let Some(path) = &args.stream {
        let e = read_stream_entropies(path)?;
        if e.is_empty() {
            return Err(CliError::Runtime(anyhow!(
                "stream {} has no tokens",
                path.display()
            )));
        }
        entropies.extend(e);
    }
    if !entropies.is_empty() {
        summary.histogram =
            Some(entropy_histogram(&entropies, args.bin_width).map_err(anyhow::Error::from)?);
    }

    let dir = &args.out_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    if !summary.bins.is_empty() {
        write_bins_csv(&dir.join("bins.csv"), &summary.bins)?;
    }
    if let Some(h) = &summary.histogram {
        write_histogram_csv(&dir.join("histogram.csv"), h)?;
        write_bands_csv(&dir.join("bands.csv"), h)?;
    }
    let json = serde_json::to_string_pretty(&summary).context("serializing summary")?;
    std::fs::write(dir.join("summary.json"), json + "\n")?;

    if let (Some(p), Some(w)) = (summary.ece_unweighted, summary.ece_weighted) {
        writeln!(stdout, "samples: {}", summary.samples)?;
        writeln!(stdout, "ECE (sum of bin gaps): {p:.4}")?;
        writeln!(stdout, "ECE (count-weighted):  {w:.4}")?;
    }
    if let Some(h) = &summary.histogram {
        writeln!(
            stdout,
            "entropy bands over {} tokens: low {:.1}% | medium {:.1}% | high {:.1}%",
            h.total,
            100.0 * h.bands.low,
            100.0 * h.bands.medium,
            100.0 * h.bands.high
        )?;
    }
    if let Some(m) = &summary.trigger_mix {
        if m.empty {
            writeln!(
                stdout,
                "trigger mix: no refinements in {} records",
                m.records
            )?;
        } else {
            let parts: Vec<String> = m
                .fractions
                .iter()
                .map(|(c, f)| format!("{} {:.1}%", c.as_str(), 100.0 * f))
                .collect();
            writeln!(
                stdout,
                "trigger mix ({} of {}): {}",
                m.triggered,
                m.records,
                parts.join(" | ")
            )?;
        }
    }
    writeln!(stdout, "wrote {}", dir.display())?;
    Ok(())
}

pub fn load_profile(args: &SimulateArgs, g: &GlobalArgs) -> Result<SyntheticProfile, CliError> {
    let mut profile = match &args.profile {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(CliError::Usage)?;
            toml::from_str(&text)
                .with_context(|| format!("parsing profile {}", path.display()))
                .map_err(CliError::Usage)?
        }
        None => SyntheticProfile::default(),
    };
    if let Some(n) = args.length {
        profile.length = SequenceLength::Fixed { tokens: n };
    }
    if let Some(seed) = g.seed {
        profile.seed = seed;
    }
    if let Some(k) = g.top_k {
        profile.top_k = k;
    }
    profile.validate().map_err(|e| CliError::Usage(e.into()))?;
    Ok(profile)
}

fn cmd_simulate(args: &SimulateArgs, g: &GlobalArgs, stdout: &mut dyn Write) -> CmdResult {
    let profile = load_profile(args, g)?;
    let tokens = sample_stream(&profile).map_err(anyhow::Error::from)?;
    let mut doc = uncertainty_loop::backend::to_logprob_payload(&tokens);
    doc["schema_version"] = json!(STREAM_SCHEMA_VERSION);
    doc["profile"] = serde_json::to_value(&profile).context("serializing profile")?;
    let text = serde_json::to_string(&doc).context("serializing stream")? + "\n";

    let Some(out) = &args.out else {
        stdout.write_all(text.as_bytes())?;
        return Ok(());
    };
    std::fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
    let m = sequence_metrics(&tokens).map_err(anyhow::Error::from)?;
    let h = entropy_histogram(&m.entropies, 0.1).map_err(anyhow::Error::from)?;
    writeln!(stdout, "tokens: {}", m.token_count)?;
    writeln!(stdout, "perplexity: {:.4}", m.perplexity)?;
    writeln!(
        stdout,
        "entropy: mean {:.4} nats, max {:.4} nats",
        m.mean_entropy, m.max_entropy
    )?;
    writeln!(
        stdout,
        "low-confidence: {} (<0.5), {} (<0.2)",
        m.low_conf_count, m.very_low_conf_count
    )?;
    writeln!(
        stdout,
        "bands: low {:.2}% | medium {:.2}% | high {:.2}%",
        100.0 * h.bands.low,
        100.0 * h.bands.medium,
        100.0 * h.bands.high
    )?;
    writeln!(stdout, "wrote {}", out.display())?;
    Ok(())
}

fn cmd_scenario(action: &ScenarioAction, stdout: &mut dyn Write) -> CmdResult {
    match action {
        ScenarioAction::List => {
            for name in uncertainty_loop::scenarios::BUILTIN {
                let s = uncertainty_loop::scenarios::builtin(name).expect("listed built-in exists");
                writeln!(stdout, "{name:<14} {}", s.description)?;
            }
            Ok(())
        }
        ScenarioAction::Export { name, out } => {
            let s = uncertainty_loop::scenarios::builtin(name)
                .ok_or_else(|| CliError::Usage(anyhow!("unknown scenario {name:?}")))?;
            save_scenario(&s, out)?;
            writeln!(stdout, "wrote {}", out.display())?;
            Ok(())
        }
    }
}

fn save_scenario(s: &ScriptedScenario, out: &Path) -> Result<(), CliError> {
    s.save(out)
        .with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}
