use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use car_core::corpus::{gen_language, Corpus, LanguageSpec};
use car_core::harness::checkpoint::Checkpoint;
use car_core::harness::config::HarnessConfig;
use car_core::harness::study::{pretrain, pretrain_corpus, run_study, source_language, target_language};
use car_core::harness::train::{train, TrainConfig};
use car_core::harness::wer::evaluate_wer;
use car_core::model::{build_hooks, init_backbone};
use car_core::peft::{apply_freezing_scheme, count_params, AdaptationScheme, SchemeId};
use car_core::Result;

#[derive(Parser)]
#[command(name = "car", version, about = "Frozen conformer transducer adaptation on synthetic languages")]
struct Cli {
    /// JSON config; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Writes a synthetic corpus file.
    GenCorpus(GenArgs),
    /// Trains a backbone from scratch.
    Pretrain(PretrainArgs),
    /// Adapts a pretrained checkpoint under a scheme.
    Adapt(AdaptArgs),
    /// Greedy-decodes a corpus and prints its WER.
    Eval(EvalArgs),
    /// Prints the parameter budget of a scheme.
    Params(ParamsArgs),
    /// Runs study 1, 2 or 3 and prints its report.
    Study(StudyArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 1)]
    lang_seed: u64,
    #[arg(long, default_value_t = 100)]
    n_utts: usize,
    #[arg(long, default_value_t = 20)]
    subset_size: usize,
    #[arg(long, default_value_t = 1.0)]
    overlap: f64,
    #[arg(long, default_value_t = 1.0)]
    proto_overlap: f64,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    /// 0 for training data, 1 for held-out data.
    #[arg(long, default_value_t = 0)]
    split: u64,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 6)]
    max_len: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    /// Training corpus; defaults to the config's source language.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// Adds the self-supervised stacks and losses.
    #[arg(long)]
    ssl: bool,
    /// Writes the per-step loss trace, one value per line.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    scheme: String,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Adaptation corpus; defaults to the config's first target language.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long)]
    scheme: String,
}

#[derive(Args)]
struct StudyArgs {
    #[arg(long)]
    id: u8,
    /// Pretrained backbone for studies 1 and 3; pretrains inline when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn load_config(cli: &Cli) -> Result<HarnessConfig> {
    let mut cfg = match &cli.config {
        Some(p) => HarnessConfig::load(p)?,
        None => HarnessConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let text: String = trace.iter().map(|v| format!("{v:.9e}\n")).collect();
    fs::write(path, text)?;
    Ok(())
}

fn summarize(trace: &[f64]) -> String {
    match (trace.first(), trace.last()) {
        (Some(a), Some(b)) => format!("{} steps, loss {a:.4} -> {b:.4}", trace.len()),
        _ => "0 steps".into(),
    }
}

fn corpus_or(path: &Option<PathBuf>, spec: LanguageSpec, n: usize) -> Result<Corpus> {
    match path {
        Some(p) => Corpus::load(p),
        None => gen_language(&spec, n, spec.len_range),
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let model = cfg.model_config()?;
    match &cli.cmd {
        Cmd::GenCorpus(a) => {
            let spec = LanguageSpec {
                seed: a.lang_seed,
                subset_size: a.subset_size,
                overlap: a.overlap,
                proto_overlap: a.proto_overlap,
                sigma: a.sigma,
                split: a.split,
                ..LanguageSpec::default()
            };
            let c = gen_language(&spec, a.n_utts, (a.min_len, a.max_len))?;
            c.save(&a.out)?;
            let frames: usize = c.utterances.iter().map(|u| u.features.len()).sum();
            println!("wrote {} utterances ({frames} frames) to {}", c.len(), a.out.display());
        }
        Cmd::Pretrain(a) => {
            let mut cfg = cfg.clone();
            if let Some(s) = a.steps {
                cfg.pretrain.steps = s;
            }
            let (store, trace) = match &a.corpus {
                None => {
                    let (s, t, _) = pretrain(&cfg, &model, &[source_language(&cfg)], a.ssl)?;
                    (s, t)
                }
                Some(p) => pretrain_corpus(&cfg, &model, &Corpus::load(p)?, a.ssl)?,
            };
            Checkpoint::new(&model, None, store).save(&a.out)?;
            if let Some(t) = &a.trace {
                write_trace(t, &trace)?;
            }
            println!("pretrained: {}; checkpoint {}", summarize(&trace), a.out.display());
        }
        Cmd::Adapt(a) => {
            let scheme = AdaptationScheme::parse(&a.scheme)?;
            let base = Checkpoint::load(&a.checkpoint)?;
            if !base.digest_matches(&model) {
                log::warn!("checkpoint config digest differs from the current model config; continuing");
            }
            let data = corpus_or(&a.corpus, target_language(&cfg, 0), cfg.corpus.adapt_utts)?;
            let store = apply_freezing_scheme(&base.store, &scheme, &model, cfg.seed)?;
            let mut tc = TrainConfig {
                seed: cfg.seed ^ cfg.adapt.seed,
                ..cfg.adapt.clone()
            };
            if let Some(s) = a.steps {
                tc.steps = s;
            }
            let out = train(&tc, &model, &scheme, &data, store)?;
            let budget = count_params(&out.store)?;
            Checkpoint::new(&model, Some(scheme.id), out.store).save(&a.out)?;
            if let Some(t) = &a.trace {
                write_trace(t, &out.trace)?;
            }
            println!(
                "adapted with {}: {}; {} of {} parameters trainable; checkpoint {}",
                scheme.id,
                summarize(&out.trace),
                budget.trainable_params,
                budget.total_params,
                a.out.display()
            );
        }
        Cmd::Eval(a) => {
            let ck = Checkpoint::load(&a.checkpoint)?;
            let scheme = AdaptationScheme::from_id(ck.meta.scheme.unwrap_or(SchemeId::B0));
            let data = Corpus::load(&a.corpus)?;
            let model = ck.meta.model.clone();
            let w = evaluate_wer(&ck.store, &model, &build_hooks(&model, &scheme), &data)?;
            println!("WER {:.2}% over {} utterances", 100.0 * w, data.len());
        }
        Cmd::Params(a) => {
            let scheme = AdaptationScheme::parse(&a.scheme)?;
            let base = init_backbone(&model, scheme.ssl, 0);
            let r = count_params(&apply_freezing_scheme(&base, &scheme, &model, 0)?)?;
            println!("scheme {}", scheme.id);
            println!("total      {}", r.total_params);
            println!("backbone   {}", r.backbone_params);
            println!(
                "trainable  {} ({:.2}% of backbone)",
                r.trainable_params,
                100.0 * r.trainable_over_backbone()
            );
            for (role, c) in &r.by_role {
                println!("  role {role:<10} {:>9} total {:>9} trainable", c.total, c.trainable);
            }
            for (module, c) in &r.by_module {
                println!("  module {module:<12} {:>9} total {:>9} trainable", c.total, c.trainable);
            }
        }
        Cmd::Study(a) => {
            let base = a.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            let report = run_study(a.id, &cfg, base.as_ref())?;
            print!("{}", report.to_text());
            if let Some(p) = &a.csv {
                fs::write(p, report.to_csv())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
