use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use recursor::config::{hash_json, Header, RunConfig, SEED_ENV};
use recursor::cost::{cost_breakdown, FlopsOptions};
use recursor::decode::{read_trace, write_trace, DecodeSession, ExitPolicy, Sampler, ThresholdSource};
use recursor::model::checkpoint;
use recursor::scheduler::{requests_from_trace, schedule, throughput_report, CostTable, Scenario, Strategy};
use recursor::threshold::{AdaptiveThreshold, DEFAULT_CALIBRATION, DEFAULT_INITIAL, DEFAULT_ZETA};
use recursor::train::{ByteTokenizer, Trainer};
use recursor::{Error, Result};

#[derive(Parser)]
#[command(name = "recursor", version, about = "Recursive transformers with per-token depth")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML run config.
    Train {
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the router's auxiliary-loss coefficient.
        #[arg(long)]
        aux_coeff: Option<f64>,
    },
    /// Generate from a checkpoint with an exit policy.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One prompt per line.
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// none | oracle | confidence:<λ> | static:<d>
        #[arg(long, default_value = "none")]
        exit: String,
        /// greedy | topk:<k> | nucleus:<p>
        #[arg(long, default_value = "greedy")]
        sampler: String,
        /// Estimate the confidence threshold online from the first sequences.
        #[arg(long)]
        adaptive_threshold: bool,
        #[arg(long, default_value_t = DEFAULT_ZETA)]
        zeta: f64,
        #[arg(long, default_value_t = DEFAULT_CALIBRATION)]
        calibration: f64,
        /// Fill skipped deeper keys/values from the exit hidden state.
        #[arg(long)]
        state_copy: bool,
        #[arg(long, default_value_t = 32)]
        max_tokens: usize,
        /// Prompts are whitespace-separated token ids instead of text.
        #[arg(long)]
        ids: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Replay a scenario (TOML) or a decode trace (JSONL) through the batch schedulers.
    Simulate {
        input: PathBuf,
        /// vanilla | csb | cdb; repeatable. Defaults to the scenario's list.
        #[arg(long = "mode", value_delimiter = ',')]
        modes: Vec<String>,
        #[arg(long)]
        max_batch: Option<usize>,
        /// Stage count for trace input; defaults to the deepest traced exit.
        #[arg(long)]
        n_stages: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print parameter, FLOPs and KV-cache accounting for a run config.
    Flops {
        config: PathBuf,
        #[arg(long, default_value_t = 2048)]
        seq_len: usize,
        #[arg(long)]
        include_head: bool,
        #[arg(long, default_value_t = 2)]
        bytes_per_element: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Train { config, out, aux_coeff } => cmd_train(&config, out, aux_coeff),
        Command::Decode {
            checkpoint,
            prompts,
            out,
            exit,
            sampler,
            adaptive_threshold,
            zeta,
            calibration,
            state_copy,
            max_tokens,
            ids,
            seed,
        } => cmd_decode(DecodeArgs {
            checkpoint,
            prompts,
            out,
            exit,
            sampler,
            adaptive: adaptive_threshold,
            zeta,
            calibration,
            state_copy,
            max_tokens,
            ids,
            seed,
        }),
        Command::Simulate { input, modes, max_batch, n_stages, out } => cmd_simulate(&input, &modes, max_batch, n_stages, out),
        Command::Flops { config, seq_len, include_head, bytes_per_element } => cmd_flops(&config, seq_len, include_head, bytes_per_element),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn env_seed(default: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}: `{v}` is not an unsigned integer"))),
        Err(_) => Ok(default),
    }
}

/// Line-delimited output file opened with its header line.
struct Jsonl(BufWriter<File>);

impl Jsonl {
    fn create(path: &Path, header: &Header) -> Result<Self> {
        let mut w = Jsonl(BufWriter::new(File::create(path)?));
        w.write(&json!({ "header": header }))?;
        Ok(w)
    }

    fn write<T: Serialize>(&mut self, v: &T) -> Result<()> {
        let line = serde_json::to_string(v).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(self.0, "{line}")?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.0.flush()?;
        Ok(())
    }
}

fn write_manifest<T: Serialize>(dir: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(dir.join("manifest.json"), text + "\n")?;
    Ok(())
}

fn cmd_train(path: &Path, out: Option<PathBuf>, aux_coeff: Option<f64>) -> Result<()> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_seed_env()?;
    if let Some(a) = aux_coeff {
        match cfg.router.as_mut() {
            Some(r) => r.aux_coeff = a,
            None => return Err(Error::Config("--aux-coeff: the config has no router".into())),
        }
        cfg.validate()?;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    let dir = cfg.output_dir.clone();
    // Output location does not change the run, so it stays out of the hash.
    let hash = hash_json(&RunConfig { output_dir: PathBuf::new(), ..cfg.clone() });
    let header = Header { command: "train".into(), config_hash: hash.clone(), seed: cfg.seed };
    fs::create_dir_all(&dir)?;
    write_manifest(&dir, &json!({ "header": header, "config": cfg }))?;
    let mut metrics = Jsonl::create(&dir.join("metrics.jsonl"), &header)?;
    let mut trainer = Trainer::new(cfg.build_model()?, cfg.train_config())?;
    let every = cfg.checkpoint_every;
    let res = trainer.fit(&cfg.data, |t, m| {
        metrics.write(m)?;
        let done = m.step + 1;
        if every > 0 && done % every == 0 && done < t.config.steps {
            checkpoint::save(&t.model, &dir.join(format!("checkpoint-{done}")))?;
        }
        Ok(())
    });
    metrics.finish()?;
    res?;
    checkpoint::save(&trainer.model, &dir.join("checkpoint"))?;
    println!("{}", dir.join("checkpoint").display());
    Ok(())
}

struct DecodeArgs {
    checkpoint: PathBuf,
    prompts: PathBuf,
    out: PathBuf,
    exit: String,
    sampler: String,
    adaptive: bool,
    zeta: f64,
    calibration: f64,
    state_copy: bool,
    max_tokens: usize,
    ids: bool,
    seed: u64,
}

fn read_prompts(path: &Path, ids: bool, vocab: usize) -> Result<Vec<Vec<usize>>> {
    let f = File::open(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Vec<usize> = if ids {
            line.split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::Config(format!("prompt line {}: bad id `{t}`", i + 1))))
                .collect::<Result<_>>()?
        } else {
            ByteTokenizer.encode_prompt(&line)
        };
        if let Some(t) = p.iter().find(|&&t| t >= vocab) {
            return Err(Error::Config(format!("prompt line {}: token {t} outside vocab {vocab}", i + 1)));
        }
        out.push(p);
    }
    Ok(out)
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?;
    let seed = env_seed(a.seed)?;
    let prompts = read_prompts(&a.prompts, a.ids, model.spec().vocab)?;
    let sampler: Sampler = a.sampler.parse()?;
    let mut policy: ExitPolicy = a.exit.parse()?;
    if a.adaptive {
        let initial = match policy {
            ExitPolicy::Confidence(ThresholdSource::Fixed(l)) => l,
            ExitPolicy::None => DEFAULT_INITIAL,
            _ => return Err(Error::Config("--adaptive-threshold combines only with --exit=confidence:<λ> or none".into())),
        };
        policy = ExitPolicy::Confidence(ThresholdSource::Adaptive(AdaptiveThreshold::new(a.zeta, initial, prompts.len(), a.calibration)));
    }
    // The hash covers the model and seed only, so token files from
    // different exit policies stay comparable byte for byte.
    let hash = hash_json(&(checkpoint::manifest(&model)?, seed));
    let header = Header { command: "decode".into(), config_hash: hash, seed };
    fs::create_dir_all(&a.out)?;
    write_manifest(
        &a.out,
        &json!({
            "header": header,
            "checkpoint": a.checkpoint,
            "exit": a.exit,
            "sampler": a.sampler,
            "adaptive_threshold": a.adaptive,
            "state_copy": a.state_copy,
            "max_tokens": a.max_tokens,
        }),
    )?;
    let mut session = DecodeSession::new(&model, policy)?.with_state_copy(a.state_copy);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = Jsonl::create(&a.out.join("tokens.jsonl"), &header)?;
    let mut lambdas = if a.adaptive { Some(Jsonl::create(&a.out.join("thresholds.jsonl"), &header)?) } else { None };
    let mut trace = BufWriter::new(File::create(a.out.join("trace.jsonl"))?);
    writeln!(trace, "{}", json!({ "header": header }))?;
    for (i, p) in prompts.iter().enumerate() {
        let out = session.decode(i, p, a.max_tokens, sampler, &mut rng)?;
        tokens.write(&json!({ "sample_id": i, "ids": out.ids, "text": ByteTokenizer.decode(&out.ids) }))?;
        write_trace(&mut trace, &out.trace)?;
        if let Some(l) = lambdas.as_mut() {
            l.write(&json!({ "sample_id": i, "lambda": session.threshold() }))?;
        }
    }
    tokens.finish()?;
    trace.flush()?;
    if let Some(l) = lambdas {
        l.finish()?;
    }
    let s = session.stats();
    println!("{}", json!({ "sequences": prompts.len(), "steps": s.steps, "exits": s.exits, "capped": s.capped }));
    Ok(())
}

fn cmd_simulate(input: &Path, modes: &[String], max_batch: Option<usize>, n_stages: Option<usize>, out: Option<PathBuf>) -> Result<()> {
    let is_trace = input.extension().is_some_and(|e| e == "jsonl");
    let strategies: Vec<Strategy> = modes.iter().map(|m| m.parse()).collect::<Result<_>>()?;
    let (requests, mut scenario) = if is_trace {
        let f = File::open(input).map_err(|e| Error::Config(format!("{}: {e}", input.display())))?;
        let trace = read_trace(BufReader::new(f)).map_err(|e| Error::Config(e.to_string()))?;
        let stages = n_stages.or_else(|| trace.iter().map(|r| r.exit_depth).max()).unwrap_or(1);
        let reqs = requests_from_trace(&trace, stages)?;
        let sc = Scenario {
            max_batch: max_batch.unwrap_or(32),
            n_stages: stages,
            strategies: vec![Strategy::Vanilla, Strategy::Csb, Strategy::Cdb],
            cost: CostTable::unit(),
            requests: Vec::new(),
            groups: Vec::new(),
            generate: None,
            trace: None,
        };
        (reqs, sc)
    } else {
        let sc = Scenario::load(input).map_err(|e| match e {
            Error::Parse(m) | Error::Config(m) => Error::Config(format!("{}: {m}", input.display())),
            e => e,
        })?;
        (sc.build_requests()?, sc)
    };
    if let Some(b) = max_batch {
        scenario.max_batch = b;
    }
    if !strategies.is_empty() {
        scenario.strategies = strategies;
    }
    let seed = env_seed(0)?;
    let hash = hash_json(&(&scenario, &requests));
    let header = Header { command: "simulate".into(), config_hash: hash, seed };
    let mut report = match &out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            write_manifest(dir, &json!({ "header": header, "input": input, "scenario": scenario }))?;
            Some(Jsonl::create(&dir.join("report.jsonl"), &header)?)
        }
        None => None,
    };
    println!("{}", json!({ "header": header }));
    if requests.is_empty() {
        if let Some(r) = report {
            r.finish()?;
        }
        return Ok(());
    }
    for &s in &scenario.strategies {
        let tl = schedule(s, &requests, scenario.max_batch, scenario.n_stages, &scenario.cost)?;
        let rep = throughput_report(&tl);
        println!("{}", serde_json::to_string(&rep).map_err(|e| Error::Parse(e.to_string()))?);
        if let Some(r) = report.as_mut() {
            r.write(&rep)?;
        }
        if let Some(dir) = &out {
            let name = format!("timeline-{}.jsonl", format!("{s:?}").to_lowercase());
            tl.write_jsonl(BufWriter::new(File::create(dir.join(name))?))?;
        }
    }
    if let Some(r) = report {
        r.finish()?;
    }
    Ok(())
}

fn cmd_flops(path: &Path, seq_len: usize, include_head: bool, bytes_per_element: usize) -> Result<()> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_seed_env()?;
    let opts = FlopsOptions {
        router: cfg.router.as_ref().map(|r| r.kind),
        kv_mode: cfg.kv_mode,
        include_head,
        ..Default::default()
    };
    let c = cost_breakdown(&cfg.model, seq_len, &opts, bytes_per_element)?;
    let header = Header { command: "flops".into(), config_hash: cfg.hash(), seed: cfg.seed };
    println!("{}", json!({ "header": header }));
    println!("{}", serde_json::to_string_pretty(&c).map_err(|e| Error::Parse(e.to_string()))?);
    Ok(())
}
