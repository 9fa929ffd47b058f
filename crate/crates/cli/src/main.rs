use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use b2s_core::analysis::{
    build_mask, checkpoint_hash, compute_saliency, overlap_matrix, prune_and_retrain, random_mask, relative_change, AnalysisError,
    LayerSelector, RetrainSettings,
};
use b2s_core::corpus::{build_tiered_corpus, write_corpus, Corpus, SampleRecord};
use b2s_core::experiment::{evaluate, prepare, provenance, run_adapt, run_evaluate, run_train, ExperimentConfig, ExperimentError, Prepared};
use b2s_core::metrics::MetricReport;
use b2s_core::model::Model;
use b2s_core::sampler::compute_distribution;
use b2s_core::schedule::LrPolicy;
use b2s_core::suite::run_suite;
use b2s_core::tokenizer::{decode, encode, TokenSequence};
use clap::{Args, Parser, Subcommand};

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_SUITE: u8 = 3;

#[derive(Parser)]
#[command(name = "b2s", version, about = "Byte-input multilingual speech synthesis experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML experiment config; missing keys take their defaults.
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset (source, initial, T1, T2, T3, T2-, T3-, T3D, p0.1, mono, similar).
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Overrides `output_dir`.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic corpus operations.
    Corpus {
        #[command(subcommand)]
        command: CorpusCommand,
    },
    /// Source training, optionally resumed from a checkpoint.
    Train {
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Co-train a source checkpoint with the target language.
    Adapt {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: Option<String>,
        /// Target records; one of the configured grid.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        target_probability: Option<f64>,
    },
    /// Held-out metrics of a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated language ids; all corpus languages by default.
        #[arg(long, value_delimiter = ',')]
        languages: Vec<String>,
    },
    /// Saliency, mask overlap and prune-then-retrain.
    Analyze {
        #[command(subcommand)]
        command: AnalyzeCommand,
    },
    /// The full acceptance battery; writes suite.csv.
    Suite {
        /// Seeds of the directional experiments.
        #[arg(long, value_delimiter = ',', num_args = 0.., default_values_t = [0u64, 1, 2, 3, 4])]
        seeds: Vec<u64>,
    },
    /// Token ids of a text, or the text of comma-separated ids.
    Tokenize {
        text: String,
        #[arg(long)]
        decode: bool,
    },
    /// Language sampling distributions.
    Sampler {
        #[command(subcommand)]
        command: SamplerCommand,
    },
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Writes manifest.tsv and frame files under `<output>/corpus`.
    Generate,
}

#[derive(Subcommand)]
enum SamplerCommand {
    /// Per-language probabilities over the corpus sample counts.
    Probs {
        #[arg(long)]
        alpha: Option<f64>,
        /// Include the target language at the configured probability.
        #[arg(long)]
        with_target: bool,
    },
}

#[derive(Args)]
struct AnalysisArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    ratio: Option<f64>,
    /// Records per language, taken from the end of its data.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Writes one saliency map per language.
    Saliency {
        #[command(flatten)]
        args: AnalysisArgs,
        #[arg(long, value_delimiter = ',')]
        languages: Vec<String>,
    },
    /// Writes overlap.csv and overlap.svg.
    Overlap {
        #[command(flatten)]
        args: AnalysisArgs,
        /// Comma-separated layer-name prefixes; all layers by default.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<String>,
    },
    /// Prunes with a language's mask (or a random one) and retrains on the target.
    Retrain {
        #[command(flatten)]
        args: AnalysisArgs,
        /// Language whose mask prunes the model, or `random`.
        #[arg(long)]
        mask: String,
        #[arg(long)]
        steps: Option<u64>,
    },
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut c = match (&g.config, &g.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
            ExperimentConfig::from_toml(&text)?
        }
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(dir) = &g.output {
        c.output_dir = dir.clone();
    }
    Ok(c)
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn print_reports(reports: &[MetricReport]) {
    println!("{}", MetricReport::CSV_HEADER);
    for r in reports {
        println!("{}", r.csv_row());
    }
}

fn target_size(c: &ExperimentConfig) -> Result<usize> {
    let target = c.target_language()?;
    Ok(c.corpus.languages.iter().find(|l| l.id == target).map_or(0, |l| l.samples))
}

/// Prepared run with the target at full size, for analysis.
fn prepare_for_analysis(mut c: ExperimentConfig, args: &AnalysisArgs) -> Result<Prepared> {
    c.adapt.samples = target_size(&c)?;
    if let Some(r) = args.ratio {
        c.analysis.ratio = r;
    }
    if let Some(n) = args.samples {
        c.analysis.samples = n;
    }
    Ok(prepare(c)?)
}

fn tail_records<'a>(corpus: &'a Corpus, language: &str, n: usize) -> Result<Vec<&'a SampleRecord>> {
    let recs = corpus.records_of(language);
    if recs.is_empty() {
        return Err(ExperimentError::Config(format!("language {language} is not in the corpus")).into());
    }
    Ok(recs[recs.len().saturating_sub(n)..].to_vec())
}

fn analyze(c: ExperimentConfig, command: AnalyzeCommand) -> Result<()> {
    match command {
        AnalyzeCommand::Saliency { args, languages } => {
            let p = prepare_for_analysis(c, &args)?;
            let model = load_model(&args.checkpoint)?;
            let langs = if languages.is_empty() { p.config.model.languages.clone() } else { languages };
            let dir = &p.config.output_dir;
            fs::create_dir_all(dir)?;
            for l in &langs {
                let map = compute_saliency(&model, &tail_records(&p.corpus, l, p.config.analysis.samples)?)?;
                let path = dir.join(format!("saliency-{l}-{}-seed{}.b2ss", p.hash, p.config.seed));
                map.save(&path)?;
                let sparse = map.sparse_layers(p.config.analysis.ratio);
                println!("{l}: {} samples -> {}; sparse layers: {}", map.n_samples, path.display(), sparse.join(" "));
            }
        }
        AnalyzeCommand::Overlap { args, layers } => {
            let mut p = prepare_for_analysis(c, &args)?;
            if !layers.is_empty() {
                p.config.analysis.layers = layers;
            }
            let model = load_model(&args.checkpoint)?;
            let a = &p.config.analysis;
            let groups = p
                .config
                .model
                .languages
                .iter()
                .map(|l| Ok((l.clone(), tail_records(&p.corpus, l, a.samples)?)))
                .collect::<Result<Vec<_>>>()?;
            let m = overlap_matrix(&model, &groups, a.ratio, &LayerSelector(a.layers.clone()))?;
            let dir = &p.config.output_dir;
            fs::create_dir_all(dir)?;
            let prov = provenance(&p);
            fs::write(dir.join("overlap.csv"), format!("{prov}\n{}", m.to_csv()))?;
            let svg = m.to_svg();
            let svg = match svg.split_once('\n') {
                Some((head, rest)) => format!("{head}\n<!-- {} -->\n{rest}", prov.trim_start_matches("# ")),
                None => svg,
            };
            fs::write(dir.join("overlap.svg"), svg)?;
            print!("{}", m.to_csv());
            if !m.sparse_layers.is_empty() {
                eprintln!("sparse layers (overlap inflated by inactive neurons): {}", m.sparse_layers.join(" "));
            }
        }
        AnalyzeCommand::Retrain { args, mask, steps } => {
            let p = prepare_for_analysis(c, &args)?;
            let model = load_model(&args.checkpoint)?;
            let a = &p.config.analysis;
            let target = p.config.target_language()?;
            let m = if mask == "random" {
                let mut rng = b2s_core::rng_for(p.config.seed, &["retrain-random-mask"]);
                random_mask(model.layers(), a.ratio, &mut rng)?
            } else {
                build_mask(&compute_saliency(&model, &tail_records(&p.corpus, &mask, a.samples)?)?, a.ratio)?
            };
            let steps = steps.unwrap_or(a.retrain_steps);
            let settings = RetrainSettings {
                n_samples: a.retrain_samples,
                steps,
                lr: LrPolicy::new(a.retrain_lr0, a.retrain_lr_end, steps.max(1))?,
                train: p.config.train_settings(),
                eval: p.config.eval_settings(),
            };
            let base = evaluate(&model, &p.corpus, &target, &settings.eval)?;
            let out = prune_and_retrain(&model, m, &p.corpus, &target, &settings)?;
            let dir = &p.config.output_dir;
            fs::create_dir_all(dir)?;
            let r = &out.report;
            let row = format!(
                "{mask},{},{:.6},{},{:.6},{:.6},{:.6},{:.6}",
                checkpoint_hash(&model),
                out.final_loss,
                r.csv_row(),
                base.cer,
                base.dtw_mse,
                relative_change(r.cer, base.cer),
                relative_change(r.dtw_mse, base.dtw_mse),
            );
            let header = format!(
                "mask,checkpoint,final_loss,{},unpruned_cer,unpruned_dtw_mse,cer_change,dtw_mse_change",
                MetricReport::CSV_HEADER
            );
            fs::write(dir.join(format!("retrain-{mask}.csv")), format!("{}\n{header}\n{row}\n", provenance(&p)))?;
            println!("{header}\n{row}");
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<u8> {
    let c = load_config(&cli.global)?;
    match cli.command {
        Command::Corpus { command: CorpusCommand::Generate } => {
            let c = c.resolve()?;
            let corpus = build_tiered_corpus(&c.corpus)?;
            let path = write_corpus(&corpus, &c.output_dir.join("corpus"))?;
            println!("{} records -> {}", corpus.records.len(), path.display());
        }
        Command::Train { resume } => {
            let p = prepare(c)?;
            let model = resume.as_deref().map(load_model).transpose()?;
            let run = run_train(&p, model)?;
            let last = run.curve.last().map_or(f64::NAN, |c| c.loss.total);
            println!("{} steps, final loss {last:.4}", run.curve.len());
            if let Some(ck) = run.checkpoints.last() {
                println!("checkpoint {}", ck.display());
            }
        }
        Command::Adapt { source, target, samples, target_probability } => {
            let mut c = c;
            if target.is_some() {
                c.adapt.target = target;
            }
            if let Some(n) = samples {
                if !c.adapt.grid.contains(&n) {
                    return Err(ExperimentError::Config(format!("--samples {n} is not in adapt.grid {:?}", c.adapt.grid)).into());
                }
                c.adapt.samples = n;
            }
            if let Some(pt) = target_probability {
                c.sampler.target_probability = pt;
            }
            let p = prepare(c)?;
            let run = run_adapt(&p, load_model(&source)?)?;
            let reports: Vec<MetricReport> = run.metrics.iter().map(|(_, r)| r.clone()).collect();
            print_reports(&reports[reports.len().saturating_sub(1)..]);
        }
        Command::Evaluate { checkpoint, languages } => {
            let p = prepare(c)?;
            let langs = if languages.is_empty() { p.config.model.languages.clone() } else { languages };
            print_reports(&run_evaluate(&p, &load_model(&checkpoint)?, &langs)?);
        }
        Command::Analyze { command } => analyze(c, command)?,
        Command::Suite { seeds } => {
            let c = c.resolve()?;
            let report = run_suite(&c, &seeds, |r| {
                println!("[{}] criterion {:>2} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.id, r.name, r.detail)
            });
            fs::create_dir_all(&c.output_dir)?;
            let prov = format!("# config_hash={} seed={}", c.hash(), c.seed);
            let path = c.output_dir.join("suite.csv");
            fs::write(&path, report.to_csv(&prov))?;
            println!("{}/{} criteria passed; table in {}", report.results.iter().filter(|r| r.passed).count(), report.results.len(), path.display());
            if !report.all_passed() {
                return Ok(EXIT_SUITE);
            }
        }
        Command::Tokenize { text, decode: true } => {
            let ids = text
                .split(',')
                .map(|t| t.trim().parse::<u16>().with_context(|| format!("token id {t:?}")))
                .collect::<Result<Vec<_>>>()?;
            println!("{}", decode(&TokenSequence::from_ids(ids)?)?);
        }
        Command::Tokenize { text, decode: false } => {
            let ids: Vec<String> = encode(&text).ids().iter().map(u16::to_string).collect();
            println!("{}", ids.join(","));
        }
        Command::Sampler { command: SamplerCommand::Probs { alpha, with_target } } => {
            let c = c.resolve()?;
            let target = c.target_language()?;
            let counts: Vec<(String, usize)> = c
                .corpus
                .languages
                .iter()
                .filter(|l| with_target || l.id != target)
                .map(|l| (l.id.clone(), if l.id == target { c.adapt.samples.min(l.samples) } else { l.samples }))
                .collect();
            let over = with_target.then(|| (target.as_str(), c.sampler.target_probability));
            print!("{}", compute_distribution(&counts, alpha.unwrap_or(c.sampler.alpha), over)?.to_csv());
        }
    }
    Ok(0)
}

fn is_config_error(e: &anyhow::Error) -> bool {
    if let Some(e) = e.downcast_ref::<ExperimentError>() {
        return e.is_config();
    }
    match e.downcast_ref::<AnalysisError>() {
        Some(AnalysisError::Ratio(_)) => true,
        Some(AnalysisError::Experiment(e)) => e.is_config(),
        _ => {
            e.downcast_ref::<b2s_core::sampler::SamplerError>().is_some()
                || e.downcast_ref::<b2s_core::schedule::ScheduleError>().is_some()
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config_error(&e) { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn suite_defaults_to_five_seeds() {
        let cli = Cli::try_parse_from(["b2s", "suite"]).unwrap();
        assert!(matches!(cli.command, Command::Suite { seeds } if seeds == vec![0, 1, 2, 3, 4]));
    }

    #[test]
    fn config_and_preset_conflict() {
        assert!(Cli::try_parse_from(["b2s", "--config", "a.toml", "--preset", "T3", "train"]).is_err());
    }

    #[test]
    fn config_errors_are_classified() {
        let e: anyhow::Error = ExperimentError::Config("x".into()).into();
        assert!(is_config_error(&e));
        let e: anyhow::Error = std::io::Error::other("disk").into();
        assert!(!is_config_error(&e));
        let e: anyhow::Error = AnalysisError::Ratio(2.0).into();
        assert!(is_config_error(&e));
    }
}
