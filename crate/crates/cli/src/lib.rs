//! Batch front end: `sif <subcommand>`.
//!
//! Every subcommand reads an optional experiment manifest, applies flag
//! overrides, checks that its inputs exist, and writes sorted-key JSON (or
//! checkpoints and bundles) tagged with the manifest hash and tool version.
//!
//! Exit codes: 0 success, 1 input or format error, 2 verification ran but
//! the FMR is below `--min-fmr`, 3 internal invariant violation.

pub mod manifest;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Deserialize;
use serde_json::{json, Map, Value};
use sif_core::bundle::{load_set, save_set};
use sif_core::mutate::MutationSpec;
use sif_core::rfo::{rfo_distill, RfoConfig};
use sif_core::safd::{distill, sample_trigger_specs, TriggerArtifact};
use sif_core::sda::{sda_serve, FlagReason};
use sif_core::tokenizer::encode;
use sif_core::verify::{calibrate_thresholds, fmr, robustness_sweep, FmrReport, SweepRow, ThresholdTable};
use sif_core::vlm::{checkpoint_bytes, init_model, load_checkpoint, load_image, ModelParams};
use sif_core::wmark::WatermarkKey;
use sif_core::Params;

use crate::manifest::{ExperimentManifest, Layout};

pub const TOOL_VERSION: &str = concat!("sif ", env!("CARGO_PKG_VERSION"));

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NOT_MATCHED: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "sif", version, about = "Trigger-image fingerprinting workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Experiment manifest (JSON). Relative paths inside it resolve against
    /// its directory.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Model checkpoint (output of gen-model, input elsewhere).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Watermark key file.
    #[arg(long)]
    key: Option<PathBuf>,
    /// Trigger bundle directory.
    #[arg(long)]
    triggers: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the protected model, its watermark key and unrelated models.
    GenModel {
        #[command(flatten)]
        common: Common,
        /// Number of unrelated models to write.
        #[arg(long)]
        unrelated: Option<usize>,
    },
    /// Optimize trigger images against a model.
    Forge {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        epsilon: Option<f64>,
        /// Activation perturbation magnitude; enables robust optimization.
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Compute per-trigger thresholds from unrelated models.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Unrelated model checkpoints.
        #[arg(long, num_args = 1..)]
        unrelated: Vec<PathBuf>,
        /// Output threshold table.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Score a suspect model against the triggers.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        table: Option<PathBuf>,
        /// Exit with status 2 when the FMR is below this value.
        #[arg(long)]
        min_fmr: Option<f64>,
    },
    /// Apply mutations to a checkpoint.
    Mutate {
        #[command(flatten)]
        common: Common,
        /// Mutation as JSON, e.g. '{"kind":"quantize","bits":4}'. Defaults
        /// to every mutation in the manifest.
        #[arg(long)]
        mutation: Option<String>,
    },
    /// Run the divergence gateway over a query file.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Reference model; defaults to the manifest's protected model.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// JSON-lines file of {"image": path, "prompt": text}.
        #[arg(long)]
        queries: Option<PathBuf>,
    },
    /// Render a verify report or sweep as CSV.
    Report {
        #[command(flatten)]
        common: Common,
        /// Report or sweep JSON; defaults to the sweep, then the report.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn input(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_INPUT,
        message: message.into(),
    }
}

fn internal(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_INTERNAL,
        message: message.into(),
    }
}

impl From<sif_core::Error> for Failure {
    fn from(e: sif_core::Error) -> Self {
        let code = match e {
            sif_core::Error::Diverged { .. } => EXIT_INTERNAL,
            _ => EXIT_INPUT,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        input(format!("{e:#}"))
    }
}

type Outcome<T = i32> = std::result::Result<T, Failure>;

/// Parses `argv` (including the program name) and runs one subcommand.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match std::panic::catch_unwind(|| dispatch(cli.command)) {
        Ok(Ok(code)) => code,
        Ok(Err(f)) => {
            eprintln!("error: {f}");
            f.code
        }
        Err(_) => {
            eprintln!("error: internal failure");
            EXIT_INTERNAL
        }
    }
}

struct Ctx {
    manifest: ExperimentManifest,
    layout: Layout,
    common: Common,
    hash: String,
}

impl Ctx {
    fn new(common: Common) -> Outcome<Self> {
        let (mut manifest, base) = match &common.manifest {
            Some(p) => {
                require(p)?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (ExperimentManifest::load(p)?, base)
            }
            None => (ExperimentManifest::default(), PathBuf::from(".")),
        };
        if let Some(seed) = common.seed {
            manifest.seed = seed;
        }
        let out = match &common.out {
            Some(o) => o.clone(),
            None => {
                let l = Layout {
                    base: base.clone(),
                    out: PathBuf::new(),
                };
                l.resolve(&manifest.out_dir)
            }
        };
        Ok(Self {
            hash: String::new(),
            layout: Layout { base, out },
            manifest,
            common,
        })
    }

    /// Freezes the manifest after subcommand overrides.
    fn seal(&mut self) {
        self.hash = self.manifest.hash();
    }

    fn provenance(&self) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("manifest_hash".into(), Value::from(self.hash.clone()));
        m.insert("tool_version".into(), Value::from(TOOL_VERSION));
        m
    }

    fn model_path(&self) -> PathBuf {
        if let Some(p) = &self.common.model {
            return p.clone();
        }
        match &self.manifest.model.checkpoint {
            Some(c) => self.layout.resolve(c),
            None => self.layout.model(),
        }
    }

    fn key_path(&self) -> PathBuf {
        if let Some(p) = &self.common.key {
            return p.clone();
        }
        match &self.manifest.key {
            Some(k) => self.layout.resolve(k),
            None => self.layout.key(),
        }
    }

    fn triggers_path(&self) -> PathBuf {
        self.common.triggers.clone().unwrap_or_else(|| self.layout.triggers())
    }

    fn unrelated_paths(&self) -> Vec<PathBuf> {
        let listed = &self.manifest.unrelated.checkpoints;
        if !listed.is_empty() {
            return listed.iter().map(|p| self.layout.resolve(p)).collect();
        }
        (0..self.manifest.unrelated.count).map(|i| self.layout.unrelated(i)).collect()
    }

    fn load_model(&self, path: &Path) -> Outcome<Params> {
        require(path)?;
        load_checkpoint(path).map_err(|e| input(format!("{}: {e}", path.display())))
    }

    fn load_key(&self) -> Outcome<WatermarkKey> {
        let p = self.key_path();
        require(&p)?;
        WatermarkKey::load(&p).map_err(|e| input(format!("{}: {e}", p.display())))
    }

    fn load_triggers(&self) -> Outcome<Vec<TriggerArtifact<f64>>> {
        let p = self.triggers_path();
        require(&p)?;
        load_set(&p).map_err(|e| input(format!("{}: {e}", p.display())))
    }

    fn write_checkpoint(&self, params: &Params, path: &Path, extra: Value) -> Outcome<()> {
        let mut meta = self.provenance();
        if let Value::Object(m) = extra {
            meta.extend(m);
        }
        write_bytes(path, &checkpoint_bytes(params, Some(Value::Object(meta))))
    }

    fn write_json(&self, path: &Path, value: Value) -> Outcome<()> {
        let mut value = value;
        if let Value::Object(m) = &mut value {
            m.extend(self.provenance());
        }
        let text = sif_core::json::to_canonical(&value)?;
        write_bytes(path, text.as_bytes())
    }
}

fn require(path: &Path) -> Outcome<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(input(format!("{}: no such file or directory", path.display())))
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Outcome<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| input(format!("{}: {e}", dir.display())))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn dispatch(command: Command) -> Outcome {
    match command {
        Command::GenModel { common, unrelated } => gen_model(common, unrelated),
        Command::Forge {
            common,
            count,
            steps,
            epsilon,
            rho,
        } => forge(common, count, steps, epsilon, rho),
        Command::Calibrate {
            common,
            unrelated,
            table,
        } => calibrate(common, unrelated, table),
        Command::Verify { common, table, min_fmr } => verify(common, table, min_fmr),
        Command::Mutate { common, mutation } => mutate(common, mutation),
        Command::Attack {
            common,
            reference,
            queries,
        } => attack(common, reference, queries),
        Command::Report { common, input, csv } => report(common, input, csv),
    }
}

fn gen_model(common: Common, unrelated: Option<usize>) -> Outcome {
    let mut ctx = Ctx::new(common)?;
    if let Some(n) = unrelated {
        ctx.manifest.unrelated.count = n;
    }
    ctx.seal();
    let cfg = ctx.manifest.model.config;
    let seed = ctx.manifest.model_seed();
    let params: Params = init_model(seed, cfg)?;
    let model_path = ctx.common.model.clone().unwrap_or_else(|| ctx.layout.model());
    ctx.write_checkpoint(&params, &model_path, json!({ "init_seed": seed }))?;
    let key = WatermarkKey::from_seed(ctx.manifest.key_seed());
    let key_path = ctx.common.key.clone().unwrap_or_else(|| ctx.layout.key());
    write_bytes(&key_path, key.to_json().as_bytes())?;
    for i in 0..ctx.manifest.unrelated.count {
        let s = ctx.manifest.unrelated_seed(i);
        let p: Params = init_model(s, cfg)?;
        ctx.write_checkpoint(&p, &ctx.layout.unrelated(i), json!({ "init_seed": s }))?;
    }
    println!(
        "wrote {} and {} unrelated model(s) to {}",
        model_path.display(),
        ctx.manifest.unrelated.count,
        ctx.layout.out.display()
    );
    Ok(EXIT_OK)
}

fn forge(common: Common, count: Option<usize>, steps: Option<usize>, epsilon: Option<f64>, rho: Option<f64>) -> Outcome {
    let mut ctx = Ctx::new(common)?;
    let f = &mut ctx.manifest.forge;
    if let Some(c) = count {
        f.count = c;
    }
    if let Some(s) = steps {
        f.distill.steps = s;
    }
    if let Some(e) = epsilon {
        f.distill.epsilon = e;
    }
    if rho.is_some() {
        f.rho = rho;
    }
    ctx.seal();
    let params = ctx.load_model(&ctx.model_path())?;
    let key = ctx.load_key()?;
    let m = &ctx.manifest;
    let wp = m.watermark;
    m.forge.distill.validate(params.config().vocab_size)?;
    if let Some(r) = m.forge.rho {
        if !(r >= 0.0 && r.is_finite()) {
            return Err(input(format!("rho must be nonnegative, got {r}")));
        }
    }
    let specs = sample_trigger_specs(&params, &key, &wp, m.forge.count, m.spec_seed(), m.forge.response_len)?;
    log::info!("forging {} trigger(s), {} steps each", specs.len(), m.forge.distill.steps);
    let artifacts: Vec<TriggerArtifact<f64>> = specs
        .par_iter()
        .map(|s| match m.forge.rho {
            Some(rho) => rfo_distill(
                &params,
                s,
                &RfoConfig {
                    rho,
                    distill: m.forge.distill,
                },
                &key,
                &wp,
            ),
            None => distill(&params, s, &m.forge.distill, &key, &wp),
        })
        .collect::<Result<_, _>>()?;
    let violations: usize = artifacts.iter().map(|a| a.projection_violations).sum();
    if violations > 0 {
        return Err(internal(format!("{violations} projection violation(s) during optimization")));
    }
    let dir = ctx.triggers_path();
    save_set(&dir, &artifacts, &ctx.provenance())?;
    let up = artifacts
        .iter()
        .filter(|a| matches!((a.initial_z, a.final_z), (Some(i), Some(f)) if f > i))
        .count();
    println!(
        "forged {} trigger(s) into {}; greedy z increased on {up}",
        artifacts.len(),
        dir.display()
    );
    Ok(EXIT_OK)
}

fn calibrate(common: Common, unrelated: Vec<PathBuf>, table: Option<PathBuf>) -> Outcome {
    let mut ctx = Ctx::new(common)?;
    ctx.seal();
    let paths = if unrelated.is_empty() {
        ctx.unrelated_paths()
    } else {
        unrelated
    };
    if paths.is_empty() {
        return Err(input("calibration needs at least one unrelated model"));
    }
    for p in &paths {
        require(p)?;
    }
    let key = ctx.load_key()?;
    let mut triggers = ctx.load_triggers()?;
    let models = paths.iter().map(|p| ctx.load_model(p)).collect::<Outcome<Vec<_>>>()?;
    let t = calibrate_thresholds(&mut triggers, &models, &key, &ctx.manifest.watermark, &ctx.manifest.decode)?;
    // Zero false positives on the calibration pool holds by construction.
    for m in &models {
        let r = fmr(m, &triggers, &t, &key, &ctx.manifest.watermark, &ctx.manifest.decode)?;
        if r.matched != 0 {
            return Err(internal(format!("calibration model {} matches {} trigger(s)", r.suspect_digest, r.matched)));
        }
    }
    let out = table.unwrap_or_else(|| ctx.layout.table());
    ctx.write_json(&out, serde_json::to_value(&t).map_err(sif_core::Error::from)?)?;
    println!("calibrated {} trigger(s) on {} model(s) into {}", t.entries.len(), models.len(), out.display());
    Ok(EXIT_OK)
}

fn load_table(path: &Path) -> Outcome<ThresholdTable> {
    require(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
    ThresholdTable::from_json(&text).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn verify(common: Common, table: Option<PathBuf>, min_fmr: Option<f64>) -> Outcome {
    let mut ctx = Ctx::new(common)?;
    ctx.seal();
    if let Some(m) = min_fmr {
        if !(0.0..=1.0).contains(&m) {
            return Err(input(format!("--min-fmr must lie in [0, 1], got {m}")));
        }
    }
    let table = load_table(&table.unwrap_or_else(|| ctx.layout.table()))?;
    let suspect = ctx.load_model(&ctx.model_path())?;
    let key = ctx.load_key()?;
    let triggers = ctx.load_triggers()?;
    let m = &ctx.manifest;
    let report = fmr(&suspect, &triggers, &table, &key, &m.watermark, &m.decode)?;
    check_report(&report, triggers.len())?;
    ctx.write_json(&ctx.layout.report(), serde_json::to_value(&report).map_err(sif_core::Error::from)?)?;
    println!("FMR {:.3} ({}/{})", report.fmr, report.matched, report.total);
    if !m.mutations.is_empty() {
        let rows = robustness_sweep(&suspect, &triggers, &table, &m.mutations, &key, &m.watermark, &m.decode)?;
        for r in &rows {
            check_report(&r.report, triggers.len())?;
            println!("  {:<32} FMR {:.3}", r.mutation_id, r.report.fmr);
        }
        ctx.write_json(&ctx.layout.sweep(), json!({ "rows": rows }))?;
    }
    match min_fmr {
        Some(t) if report.fmr < t => {
            println!("verdict: not matched (FMR below {t})");
            Ok(EXIT_NOT_MATCHED)
        }
        Some(_) => {
            println!("verdict: matched");
            Ok(EXIT_OK)
        }
        None => Ok(EXIT_OK),
    }
}

fn check_report(r: &FmrReport, triggers: usize) -> Outcome<()> {
    let matched = r.entries.iter().filter(|e| e.matched).count();
    if r.total != triggers || r.entries.len() != triggers || matched != r.matched {
        return Err(internal("report does not cover every trigger exactly once"));
    }
    Ok(())
}

fn mutate(common: Common, mutation: Option<String>) -> Outcome {
    let mut ctx = Ctx::new(common)?;
    if let Some(text) = &mutation {
        let spec = MutationSpec::from_json(text).map_err(|e| input(format!("--mutation: {e}")))?;
        ctx.manifest.mutations = vec![spec];
    }
    ctx.seal();
    if ctx.manifest.mutations.is_empty() {
        return Err(input("no mutation given (use --mutation or list them in the manifest)"));
    }
    let source = ctx.model_path();
    let params = ctx.load_model(&source)?;
    for spec in &ctx.manifest.mutations {
        let out = spec.apply(&params)?;
        let path = ctx.layout.mutated(&spec.id());
        ctx.write_checkpoint(&out, &path, json!({ "mutation": spec }))?;
        println!("{} -> {}", spec.id(), path.display());
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Query {
    image: String,
    prompt: String,
}

fn attack(common: Common, reference: Option<PathBuf>, queries: Option<PathBuf>) -> Outcome {
    let mut ctx = Ctx::new(common)?;
    ctx.seal();
    let qpath = match (queries, &ctx.manifest.queries) {
        (Some(q), _) => q,
        (None, Some(q)) => ctx.layout.resolve(q),
        (None, None) => return Err(input("no query file given (use --queries or the manifest)")),
    };
    require(&qpath)?;
    let qbase = qpath.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = std::fs::read_to_string(&qpath).map_err(|e| input(format!("{}: {e}", qpath.display())))?;
    let mut parsed = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let q: Query =
            serde_json::from_str(line).map_err(|e| input(format!("{}:{}: {e}", qpath.display(), n + 1)))?;
        let p = qbase.join(&q.image);
        require(&p)?;
        parsed.push((q, p));
    }
    if parsed.is_empty() {
        return Err(input(format!("{}: no queries", qpath.display())));
    }
    let stolen = ctx.load_model(&ctx.model_path())?;
    let reference = match reference {
        Some(r) => ctx.load_model(&r)?,
        None => ctx.load_model(&match &ctx.manifest.model.checkpoint {
            Some(c) => ctx.layout.resolve(c),
            None => ctx.layout.model(),
        })?,
    };
    let m = &ctx.manifest;
    let decisions = parsed
        .iter()
        .map(|(q, path)| {
            let image = load_image(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
            let d = sda_serve::<f64, ModelParams<f64>>(&stolen, &reference, &image, &encode(&q.prompt), &m.sda, &m.decode)?;
            if d.flagged != (d.served_response == d.reference_response) && d.stolen_response != d.reference_response {
                return Err(internal("served response does not follow the decision"));
            }
            Ok(d)
        })
        .collect::<Outcome<Vec<_>>>()?;

    let mut lines = String::new();
    let mut by_reason: BTreeMap<String, usize> = BTreeMap::new();
    for ((q, _), d) in parsed.iter().zip(&decisions) {
        let mut v = serde_json::to_value(d).map_err(sif_core::Error::from)?;
        if let Value::Object(o) = &mut v {
            o.insert("image".into(), Value::from(q.image.clone()));
            o.insert("prompt".into(), Value::from(q.prompt.clone()));
        }
        lines.push_str(&serde_json::to_string(&v).map_err(sif_core::Error::from)?);
        lines.push('\n');
        let reason = serde_json::to_value(d.reason).map_err(sif_core::Error::from)?;
        *by_reason.entry(reason.as_str().unwrap_or("unknown").to_string()).or_default() += 1;
    }
    write_bytes(&ctx.layout.attack(), lines.as_bytes())?;
    let flagged = decisions.iter().filter(|d| d.flagged).count();
    let rate = flagged as f64 / decisions.len() as f64;
    ctx.write_json(
        &ctx.layout.attack_summary(),
        json!({ "queries": decisions.len(), "flagged": flagged, "flag_rate": rate, "by_reason": by_reason }),
    )?;
    let none = decisions.iter().filter(|d| d.reason == FlagReason::None).count();
    println!("flagged {flagged}/{} queries ({none} served from the suspect)", decisions.len());
    Ok(EXIT_OK)
}

fn report(common: Common, input_path: Option<PathBuf>, csv_path: Option<PathBuf>) -> Outcome {
    let mut ctx = Ctx::new(common)?;
    ctx.seal();
    let path = match input_path {
        Some(p) => p,
        None if ctx.layout.sweep().exists() => ctx.layout.sweep(),
        None => ctx.layout.report(),
    };
    require(&path)?;
    let text = std::fs::read_to_string(&path).map_err(|e| input(format!("{}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| input(format!("{}: {e}", path.display())))?;
    let bad = |e: serde_json::Error| input(format!("{}: {e}", path.display()));
    let rows: Vec<(String, FmrReport)> = if let Some(rows) = value.get("rows") {
        let rows: Vec<SweepRow> = serde_json::from_value(rows.clone()).map_err(bad)?;
        rows.into_iter().map(|r| (r.mutation_id, r.report)).collect()
    } else {
        let r: FmrReport = serde_json::from_value(value.clone()).map_err(bad)?;
        vec![("none".to_string(), r)]
    };
    let mut records = Vec::new();
    for (mutation, r) in &rows {
        for e in &r.entries {
            records.push((e.trigger_id.clone(), mutation.clone(), e.z, e.tau, e.matched));
        }
    }
    records.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));

    let mut w = csv::Writer::from_writer(Vec::new());
    let fmt = |v: f64| if v.is_finite() { v.to_string() } else { "inf".to_string() };
    w.write_record(["trigger_id", "mutation", "z", "tau", "matched"]).map_err(|e| internal(e.to_string()))?;
    for (id, m, z, tau, matched) in &records {
        let z = z.map(fmt).unwrap_or_default();
        w.write_record([id.as_str(), m.as_str(), &z, &fmt(*tau), if *matched { "true" } else { "false" }])
            .map_err(|e| internal(e.to_string()))?;
    }
    let body = w.into_inner().map_err(|e| internal(e.to_string()))?;
    let mut out = format!("# manifest_hash={} tool_version={}\n", ctx.hash, TOOL_VERSION).into_bytes();
    out.extend(body);
    let dest = csv_path.unwrap_or_else(|| ctx.layout.csv());
    write_bytes(&dest, &out)?;
    println!("wrote {} row(s) to {}", records.len(), dest.display());
    Ok(EXIT_OK)
}
