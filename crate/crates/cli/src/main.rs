use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use dne_core::corpus::{generate_synthetic_corpus, CorpusConfig, Manifest};
use dne_core::diagnostics::{gradient_suite, GRADIENT_TOLERANCE};
use dne_core::dne::ETA_GRID;
use dne_core::enhance::BackboneKind;
use dne_core::metrics::{evaluate_corpus, EvalReport};
use dne_core::model::{DneMode, Model, ModelConfig, Preset, Utterance};
use dne_core::trainer::{train, TrainConfig};
use dne_core::wav::{read_wav, write_wav};

/// Bad invocation that clap cannot see (paths, config keys, flag combos).
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Parser, Debug)]
#[command(name = "dne", version, about = "Speech enhancement with VAD-driven dynamic noise embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train/test corpus and its manifests.
    Mix(MixArgs),
    /// Jointly train the detector and an enhancement model.
    Train(TrainArgs),
    /// Enhance one WAV file.
    Enhance(EnhanceArgs),
    /// Print per-frame speech posteriors for one WAV file.
    Vad(VadArgs),
    /// Score a model (or the unprocessed input) on a manifest.
    Evaluate(EvaluateArgs),
    /// Train and evaluate once per confidence threshold.
    AblateEta(AblateArgs),
    /// Finite-difference check of every layer and toy-sized model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// key=value file; explicit flags win over its entries.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, value_enum, default_value_t = Backbone::Unet)]
    backbone: Backbone,
    #[arg(long, default_value = "dne", value_parser = parse_mode)]
    dne: DneMode,
    #[arg(long, default_value_t = 0.3)]
    eta: f64,
    #[arg(long, default_value = "desk", value_parser = parse_preset)]
    preset: Preset,
}

impl ModelArgs {
    fn config(&self) -> ModelConfig {
        let mut cfg = ModelConfig::new(self.backbone.into(), self.dne, self.preset);
        cfg.eta = self.eta;
        cfg
    }
}

#[derive(Args, Debug)]
struct OptimArgs {
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    /// Weight of the enhancement loss in the detector objective.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr_se: f64,
    #[arg(long, default_value_t = 1e-2)]
    lr_vad: f64,
}

impl OptimArgs {
    fn apply(&self, mut cfg: TrainConfig, seed: u64) -> TrainConfig {
        cfg.epochs = self.epochs;
        cfg.batch_size = self.batch_size;
        cfg.lambda = self.lambda;
        cfg.lr_se = self.lr_se;
        cfg.lr_vad = self.lr_vad;
        cfg.seed = seed;
        cfg
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Backbone {
    Unet,
    Ddae,
    Blstm,
}

impl From<Backbone> for BackboneKind {
    fn from(b: Backbone) -> Self {
        match b {
            Backbone::Unet => BackboneKind::Unet,
            Backbone::Ddae => BackboneKind::Ddae,
            Backbone::Blstm => BackboneKind::Blstm,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Table,
    Json,
}

fn parse_mode(s: &str) -> std::result::Result<DneMode, String> {
    s.parse().map_err(|e: dne_core::Error| e.to_string())
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse().map_err(|e: dne_core::Error| e.to_string())
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct MixArgs {
    /// Existing directory to write into.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    train_utterances: usize,
    /// Test items per (noise, SNR) cell.
    #[arg(long, default_value_t = 4)]
    test_per_cell: usize,
    #[arg(long, default_value_t = 1.0)]
    seconds: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Continue from this checkpoint and its training log.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Initialize the detector from this checkpoint.
    #[arg(long)]
    warm_start: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct EnhanceArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Trained checkpoint; without it a freshly initialized model is used.
    #[arg(long)]
    model: Option<PathBuf>,
    /// on|off|sn|cn; must agree with the checkpoint when one is given.
    #[arg(long, value_parser = parse_mode)]
    dne: Option<DneMode>,
    #[arg(long, value_enum, default_value_t = Backbone::Unet)]
    backbone: Backbone,
    /// Confident-frame threshold; defaults to the checkpoint's.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, default_value = "desk", value_parser = parse_preset)]
    preset: Preset,
    /// Force the mask to one (debugging).
    #[arg(long)]
    identity: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct VadArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Score the unprocessed noisy input.
    #[arg(long)]
    identity: bool,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct AblateArgs {
    #[arg(long)]
    train_manifest: PathBuf,
    #[arg(long)]
    test_manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = ETA_GRID.to_vec())]
    etas: Vec<f64>,
    #[arg(long, value_enum, default_value_t = Backbone::Unet)]
    backbone: Backbone,
    #[arg(long, default_value = "desk", value_parser = parse_preset)]
    preset: Preset,
    /// Restrict the grid to one noise kind.
    #[arg(long)]
    noise: Option<String>,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DNE_LOG", "info")).init();
    match run(std::env::args_os().collect()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(argv: Vec<OsString>) -> Result<ExitCode> {
    let argv = apply_config_file(argv)?;
    let matches = match Cli::command().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => e.exit(),
    };
    print_resolved(&matches);
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    match cli.command {
        Command::Mix(a) => cmd_mix(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Enhance(a) => cmd_enhance(&a),
        Command::Vad(a) => cmd_vad(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::AblateEta(a) => cmd_ablate(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

/// Expands `--config FILE` into `--key=value` arguments placed right after
/// the subcommand, so anything given explicitly later overrides them.
fn apply_config_file(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let args: Vec<String> = match argv.iter().map(|a| a.clone().into_string()).collect() {
        Ok(v) => v,
        Err(_) => return Ok(argv),
    };
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        if a == "--config" {
            path = args.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else {
        return Ok(argv);
    };
    let Some(sub_pos) = args.iter().skip(1).position(|a| !a.starts_with('-')).map(|p| p + 1) else {
        return Ok(argv);
    };
    let root = Cli::command();
    let Some(sub) = root.find_subcommand(&args[sub_pos]) else {
        return Ok(argv);
    };
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) => return usage(format!("cannot read config file {path}: {e}")),
    };
    let mut injected = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return usage(format!("{path}:{}: expected key=value", n + 1));
        };
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        let arg = sub.get_arguments().find(|a| a.get_long() == Some(key.as_str()));
        let Some(arg) = arg.filter(|_| key != "config") else {
            return usage(format!("{path}:{}: unknown key {key:?} for {}", n + 1, args[sub_pos]));
        };
        if arg.get_action().takes_values() {
            injected.push(format!("--{key}={value}"));
        } else {
            match value {
                "true" => injected.push(format!("--{key}")),
                "false" => {}
                other => return usage(format!("{path}:{}: {key} expects true or false, got {other:?}", n + 1)),
            }
        }
    }
    let mut out: Vec<OsString> = args[..=sub_pos].iter().map(OsString::from).collect();
    out.extend(injected.into_iter().map(OsString::from));
    out.extend(args[sub_pos + 1..].iter().map(OsString::from));
    Ok(out)
}

fn print_resolved(matches: &ArgMatches) {
    let Some((name, sub)) = matches.subcommand() else {
        return;
    };
    for id in sub.ids() {
        let id = id.as_str();
        // flattened structs show up as argument groups
        if id == "Common" {
            continue;
        }
        if let Ok(Some(raw)) = sub.try_get_raw(id) {
            let vals: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
            eprintln!("config {name}.{id} = {}", vals.join(","));
        }
    }
}

fn require_file(p: &Path, what: &str) -> Result<()> {
    if !p.is_file() {
        return usage(format!("{what} {} does not exist", p.display()));
    }
    Ok(())
}

fn require_dir(p: &Path, what: &str) -> Result<()> {
    if !p.is_dir() {
        return usage(format!("{what} {} is not an existing directory", p.display()));
    }
    Ok(())
}

fn cmd_mix(a: &MixArgs) -> Result<ExitCode> {
    require_dir(&a.out, "output directory")?;
    let cfg = CorpusConfig {
        train_utterances: a.train_utterances,
        test_per_cell: a.test_per_cell,
        seconds: a.seconds,
        ..CorpusConfig::default()
    };
    let corpus = generate_synthetic_corpus(&cfg, a.common.seed, &a.out).context("generating corpus")?;
    println!("{}\t{} items", corpus.train_manifest.display(), corpus.train.len());
    println!("{}\t{} items", corpus.test_manifest.display(), corpus.test.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(a: &TrainArgs) -> Result<ExitCode> {
    require_file(&a.manifest, "manifest")?;
    if let Some(p) = &a.resume {
        require_file(p, "resume checkpoint")?;
    }
    if let Some(p) = &a.warm_start {
        require_file(p, "warm-start checkpoint")?;
    }
    let mut cfg = a.optim.apply(TrainConfig::new(a.model.config()), a.common.seed);
    cfg.warm_start = a.warm_start.clone();
    if let Err(e) = cfg.validate() {
        return usage(e.to_string());
    }
    let manifest = Manifest::read(&a.manifest)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let outcome = train(&manifest, &cfg, &a.out, a.resume.as_deref()).context("training")?;
    println!("best\t{}", outcome.best.display());
    println!("last\t{}", outcome.last.display());
    println!("log\t{}", outcome.log_path.display());
    Ok(ExitCode::SUCCESS)
}

fn load_or_init(path: Option<&Path>, fresh: impl FnOnce() -> ModelConfig, seed: u64) -> Result<Model<f32>> {
    match path {
        Some(p) => {
            require_file(p, "checkpoint")?;
            Ok(Model::load(p).with_context(|| format!("loading {}", p.display()))?)
        }
        None => {
            log::warn!("no checkpoint given; using an untrained model initialized from seed {seed}");
            Ok(Model::new(fresh(), seed)?)
        }
    }
}

fn cmd_enhance(a: &EnhanceArgs) -> Result<ExitCode> {
    require_file(&a.input, "input")?;
    let dne = a.dne.unwrap_or(DneMode::Dne);
    let mut model = load_or_init(
        a.model.as_deref(),
        || ModelConfig::new(a.backbone.into(), dne, a.preset),
        a.common.seed,
    )?;
    if let (Some(want), Some(_)) = (a.dne, &a.model) {
        if want != model.cfg.dne {
            return usage(format!("--dne {want} but the checkpoint was trained with {}", model.cfg.dne));
        }
    }
    if let Some(eta) = a.eta {
        let mut cfg = model.cfg.clone();
        cfg.eta = eta;
        if let Err(e) = cfg.validate() {
            return usage(e.to_string());
        }
        model.cfg = cfg;
    }
    let noisy = read_wav(&a.input)?;
    let out = model.enhance_waveform(&noisy, a.identity, a.common.seed)?;
    write_wav(&a.output, &out)?;
    println!("{}", a.output.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_vad(a: &VadArgs) -> Result<ExitCode> {
    require_file(&a.input, "input")?;
    let model = load_or_init(
        a.model.as_deref(),
        || ModelConfig::new(BackboneKind::Unet, DneMode::Dne, Preset::Desk),
        a.common.seed,
    )?;
    let utt = Utterance::prepare("input", &read_wav(&a.input)?, None, None)?;
    let post = model.posterior(&utt)?;
    println!("frame_index\tposterior");
    for (i, p) in post.iter().enumerate() {
        println!("{i}\t{p:.6}");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<ExitCode> {
    require_file(&a.manifest, "manifest")?;
    let manifest = Manifest::read(&a.manifest)?;
    let report = if a.identity {
        evaluate_corpus(&manifest, |_, w| Ok(w.clone()))?
    } else {
        let Some(path) = &a.model else {
            return usage("evaluate needs --model or --identity");
        };
        require_file(path, "checkpoint")?;
        let model = Model::<f32>::load(path).with_context(|| format!("loading {}", path.display()))?;
        evaluate_corpus(&manifest, |_, w| model.enhance_waveform(w, false, a.common.seed))?
    };
    print_report(&report, a.format);
    if report.utterances.is_empty() {
        bail!("every item failed to evaluate");
    }
    Ok(ExitCode::SUCCESS)
}

fn print_report(report: &EvalReport, format: Format) {
    match format {
        Format::Table => {
            print!("{}", report.to_table());
            for s in &report.skipped {
                println!("# skipped {}: {}", s.id, s.error);
            }
        }
        Format::Json => println!("{}", report.to_json()),
    }
}

/// Metric × SNR rows, one column per threshold. Means run over every
/// utterance at that SNR (optionally one noise kind).
fn ablation_grid(runs: &[(f64, EvalReport)], noise: Option<&str>) -> Vec<(String, String, Vec<f64>)> {
    let keep = |k: &str| noise.is_none_or(|n| n == k);
    let mut snrs = BTreeSet::new();
    for (_, r) in runs {
        for u in r.utterances.iter().filter(|u| keep(&u.noise_kind)) {
            snrs.insert((u.snr_db * 1000.0).round() as i64);
        }
    }
    let mut rows = Vec::new();
    for metric in ["stoi", "ssnr_db"] {
        let cell = |r: &EvalReport, snr: Option<i64>| {
            let v: Vec<f64> = r
                .utterances
                .iter()
                .filter(|u| keep(&u.noise_kind))
                .filter(|u| snr.is_none_or(|s| (u.snr_db * 1000.0).round() as i64 == s))
                .map(|u| if metric == "stoi" { u.stoi } else { u.ssnr })
                .collect();
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        for &s in &snrs {
            let label = format!("{}", s as f64 / 1000.0);
            rows.push((metric.to_string(), label, runs.iter().map(|(_, r)| cell(r, Some(s))).collect()));
        }
        rows.push((metric.to_string(), "mean".into(), runs.iter().map(|(_, r)| cell(r, None)).collect()));
    }
    rows
}

fn cmd_ablate(a: &AblateArgs) -> Result<ExitCode> {
    require_file(&a.train_manifest, "train manifest")?;
    require_file(&a.test_manifest, "test manifest")?;
    if a.etas.is_empty() {
        return usage("--etas needs at least one threshold");
    }
    let train_set = Manifest::read(&a.train_manifest)?;
    let test_set = Manifest::read(&a.test_manifest)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut runs = Vec::new();
    for &eta in &a.etas {
        let mut mc = ModelConfig::new(a.backbone.into(), DneMode::Dne, a.preset);
        mc.eta = eta;
        let cfg = a.optim.apply(TrainConfig::new(mc), a.common.seed);
        if let Err(e) = cfg.validate() {
            return usage(format!("eta {eta}: {e}"));
        }
        if cfg.model.randomizes_posteriors() {
            log::info!("eta {eta}: speech posteriors are replaced by uniform random values; the detector does not steer frame selection");
        }
        let dir = a.out.join(format!("eta_{eta}"));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        log::info!("eta {eta}: training into {}", dir.display());
        let outcome = train(&train_set, &cfg, &dir, None).with_context(|| format!("training at eta {eta}"))?;
        let model = Model::<f32>::load(&outcome.best)?;
        let report = evaluate_corpus(&test_set, |_, w| model.enhance_waveform(w, false, a.common.seed))?;
        std::fs::write(dir.join("report.json"), report.to_json())?;
        runs.push((eta, report));
    }
    let grid = ablation_grid(&runs, a.noise.as_deref());
    match a.format {
        Format::Table => {
            let head: Vec<String> = a.etas.iter().map(|e| format!("eta={e}")).collect();
            println!("metric\tsnr_db\t{}", head.join("\t"));
            for (metric, snr, vals) in &grid {
                let v: Vec<String> = vals.iter().map(|x| format!("{x:.4}")).collect();
                println!("{metric}\t{snr}\t{}", v.join("\t"));
            }
        }
        Format::Json => {
            let rows: Vec<String> = grid
                .iter()
                .map(|(m, s, v)| {
                    let cells: Vec<String> = a
                        .etas
                        .iter()
                        .zip(v)
                        .map(|(e, x)| format!("\"{e}\": {}", if x.is_finite() { x.to_string() } else { "null".into() }))
                        .collect();
                    format!("  {{\"metric\": \"{m}\", \"snr_db\": \"{s}\", {}}}", cells.join(", "))
                })
                .collect();
            println!("[\n{}\n]", rows.join(",\n"));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<ExitCode> {
    let suite = gradient_suite(a.common.seed)?;
    let mut failed = 0;
    println!("check\tentries\tmax_rel_error\tstatus");
    for e in &suite {
        let ok = e.passes();
        failed += usize::from(!ok);
        println!(
            "{}\t{}\t{:.3e}\t{}",
            e.name,
            e.report.checked,
            e.report.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            println!("# worst: {}", e.report.worst);
        }
    }
    if failed > 0 {
        eprintln!("{failed} of {} checks exceed {GRADIENT_TOLERANCE:e}", suite.len());
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}
