mod data;
mod manifest;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use emocvae::checkpoint::Checkpoint;
use emocvae::config::{FlatConfig, Settings};
use emocvae::decode::{read_candidates, write_candidates, GenerationCandidate};
use emocvae::latent::LatentSource;
use emocvae::latent_analysis::{
    collect_latents, pca_2d, probe_accuracy, write_dump, write_projection, ProbeConfig,
};
use emocvae::pipeline::{
    ablation_csv, ablation_table, generate_for_posts, plan_posts, score_for_posts,
    train_and_evaluate, train_scorers, PreparedData, ScorerSet, VariantEval,
};
use emocvae::rerank_eval::{
    compute_metrics, lambda_sweep, select_top1, write_sweep_csv, EvalReport, Selection,
};
use emocvae::scorers::{EmotionClassifier, EvalLm, ScorerReport, TopicCoherence};
use emocvae::training::{train, write_metrics};
use serde::{Deserialize, Serialize};

use crate::data::{check_vocab, create, data_files, open, read_data_dir, write_data_dir};
use crate::manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(
    name = "emocvae",
    version,
    about = "Emotion-conditioned response generation with latent-variable transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `key=value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for this command's randomness.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus and write train/dev/test splits with a vocabulary.
    SynthData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one generator variant.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the emotion classifier, topic-coherence scorer and evaluation language model.
    TrainScorers {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Decode candidate responses for the test posts.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Rerank candidates and report metrics and the lambda sweep.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scorers: PathBuf,
        /// Previously generated candidates; decoded afresh when absent.
        #[arg(long)]
        candidates: Option<PathBuf>,
    },
    /// Train and evaluate every configured variant over every configured seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Trained scorers; trained from the data when absent.
        #[arg(long)]
        scorers: Option<PathBuf>,
    },
    /// Write sampled latents, a 2-D projection and a linear-probe report.
    DumpLatents {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "posterior")]
        source: LatentSource,
        /// Partition whose pairs are encoded: train, dev or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthData { .. } => "synth-data",
            Command::Train { .. } => "train",
            Command::TrainScorers { .. } => "train-scorers",
            Command::Generate { .. } => "generate",
            Command::Evaluate { .. } => "evaluate",
            Command::Ablate { .. } => "ablate",
            Command::DumpLatents { .. } => "dump-latents",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::SynthData { common }
            | Command::Train { common, .. }
            | Command::TrainScorers { common, .. }
            | Command::Generate { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Ablate { common, .. }
            | Command::DumpLatents { common, .. } => common,
        }
    }

    /// Config key that `--seed` overrides.
    fn seed_key(&self) -> &'static str {
        match self {
            Command::SynthData { .. } => "corpus.seed",
            Command::Train { .. } | Command::DumpLatents { .. } => "train.seed",
            Command::TrainScorers { .. } => "scorer.seed",
            Command::Generate { .. } | Command::Evaluate { .. } => "eval.seed",
            Command::Ablate { .. } => "ablate.seeds",
        }
    }
}

/// Effective seed of a command after config and overrides are applied.
fn command_seed(cmd: &Command, s: &Settings) -> u64 {
    match cmd {
        Command::SynthData { .. } => s.corpus.seed,
        Command::Train { .. } | Command::DumpLatents { .. } => s.train.seed,
        Command::TrainScorers { .. } => s.scorers.emotion.seed,
        Command::Generate { .. } | Command::Evaluate { .. } => s.eval.seed,
        Command::Ablate { .. } => s.seeds[0],
    }
}

fn load_flat(cmd: &Command) -> Result<FlatConfig> {
    let common = cmd.common();
    let mut flat = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            FlatConfig::parse(&text)?
        }
        None => FlatConfig::default(),
    };
    if !common.overrides.is_empty() {
        flat = flat.merged(&FlatConfig::parse(&common.overrides.join("\n"))?);
    }
    if let Some(seed) = common.seed {
        flat.set(cmd.seed_key(), seed);
    }
    Ok(flat)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: &Command) -> Result<()> {
    let flat = load_flat(cmd)?;
    let settings = Settings::from_flat(&flat)?;
    let out = &cmd.common().out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut manifest = RunManifest::new(
        cmd.name(),
        command_seed(cmd, &settings),
        &settings.to_flat(),
    );
    if let Some(path) = &cmd.common().config {
        manifest.input(path)?;
    }

    match cmd {
        Command::SynthData { .. } => synth_data(&settings, out, &mut manifest)?,
        Command::Train { data, .. } => train_generator(&settings, data, out, &mut manifest)?,
        Command::TrainScorers { data, .. } => {
            train_scorer_set(&settings, data, out, &mut manifest)?
        }
        Command::Generate { data, model, .. } => {
            generate(&settings, data, model, out, &mut manifest)?
        }
        Command::Evaluate {
            data,
            model,
            scorers,
            candidates,
            ..
        } => evaluate(
            &settings,
            data,
            model,
            scorers,
            candidates.as_deref(),
            out,
            &mut manifest,
        )?,
        Command::Ablate { data, scorers, .. } => {
            ablate(&settings, data, scorers.as_deref(), out, &mut manifest)?
        }
        Command::DumpLatents {
            data,
            model,
            source,
            split,
            ..
        } => dump_latents(&settings, data, model, *source, split, out, &mut manifest)?,
    }

    let path = manifest.write(out)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_data(settings: &Settings, dir: &Path, manifest: &mut RunManifest) -> Result<PreparedData> {
    for f in data_files(dir) {
        manifest.input(&f)?;
    }
    read_data_dir(dir, settings.corpus.seed)
}

fn load_checkpoint(
    path: &Path,
    data: &PreparedData,
    manifest: &mut RunManifest,
) -> Result<Checkpoint> {
    manifest.input(path)?;
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    check_vocab(&ckpt.vocab, data, "the generator")?;
    Ok(ckpt)
}

fn write_text(path: &Path, text: &str, manifest: &mut RunManifest) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    manifest.output(path)
}

fn synth_data(settings: &Settings, out: &Path, manifest: &mut RunManifest) -> Result<()> {
    let data = PreparedData::synthetic(&settings.corpus)?;
    for path in write_data_dir(out, &data)? {
        manifest.output(&path)?;
    }
    println!(
        "{} train / {} dev / {} test pairs, vocabulary {}",
        data.train.len(),
        data.dev.len(),
        data.test.len(),
        data.vocab.len()
    );
    Ok(())
}

fn train_generator(
    settings: &Settings,
    data_dir: &Path,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<()> {
    let data = load_data(settings, data_dir, manifest)?;
    let cfg = &settings.train;
    let outcome = train(&data.train, &data.dev, data.vocab.len(), cfg, None)?;
    let ckpt = Checkpoint {
        model: outcome.model,
        vocab: data.vocab.clone(),
        train: cfg.clone(),
        step: outcome.steps,
    };
    let path = out.join("model.ckpt");
    ckpt.save(&path)?;
    manifest.output(&path)?;

    let path = out.join("metrics.csv");
    let mut w = create(&path)?;
    write_metrics(&outcome.log, &mut w)?;
    w.flush()?;
    manifest.output(&path)?;

    if let Some(last) = outcome.log.last() {
        println!(
            "{} after {} steps: nll {:.4} kl {:.4}",
            cfg.model.variant, outcome.steps, last.loss.nll, last.loss.kl
        );
    }
    Ok(())
}

const EMOTION_SCORER: &str = "emotion.ckpt";
const COHERENCE_SCORER: &str = "coherence.ckpt";
const LM_SCORER: &str = "lm.ckpt";
const SCORER_REPORT: &str = "scorers.json";

#[derive(Debug, Serialize, Deserialize)]
struct ScorerSummary {
    emotion: ScorerReport,
    coherence: ScorerReport,
    lm_dev_ppl: f64,
}

fn train_scorer_set(
    settings: &Settings,
    data_dir: &Path,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<()> {
    let data = load_data(settings, data_dir, manifest)?;
    let set = train_scorers(&data, &settings.scorers)?;
    save_scorers(&set, settings, &data, out, manifest)?;
    println!(
        "emotion classifier {:.2}% held-out, coherence {:.2}% held-out, lm dev ppl {:.3}",
        100.0 * set.emotion_report.heldout_accuracy,
        100.0 * set.coherence_report.heldout_accuracy,
        set.lm_dev_ppl
    );
    Ok(())
}

fn save_scorers(
    set: &ScorerSet,
    settings: &Settings,
    data: &PreparedData,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<()> {
    let cfg = &settings.scorers;
    let path = out.join(EMOTION_SCORER);
    set.emotion.save(&path, &cfg.emotion, &data.vocab)?;
    manifest.output(&path)?;
    let path = out.join(COHERENCE_SCORER);
    set.coherence.save(&path, &cfg.coherence, &data.vocab)?;
    manifest.output(&path)?;
    let path = out.join(LM_SCORER);
    set.lm.save(&path, &cfg.lm, &data.vocab)?;
    manifest.output(&path)?;
    let summary = ScorerSummary {
        emotion: set.emotion_report,
        coherence: set.coherence_report,
        lm_dev_ppl: set.lm_dev_ppl,
    };
    write_text(
        &out.join(SCORER_REPORT),
        &(serde_json::to_string_pretty(&summary)? + "\n"),
        manifest,
    )
}

fn load_scorers(dir: &Path, data: &PreparedData, manifest: &mut RunManifest) -> Result<ScorerSet> {
    let path = dir.join(EMOTION_SCORER);
    manifest.input(&path)?;
    let (emotion, vocab) =
        EmotionClassifier::load(&path).with_context(|| format!("loading {}", path.display()))?;
    check_vocab(&vocab, data, "the emotion classifier")?;
    let path = dir.join(COHERENCE_SCORER);
    manifest.input(&path)?;
    let (coherence, vocab) =
        TopicCoherence::load(&path).with_context(|| format!("loading {}", path.display()))?;
    check_vocab(&vocab, data, "the coherence scorer")?;
    let path = dir.join(LM_SCORER);
    manifest.input(&path)?;
    let (lm, vocab) = EvalLm::load(&path).with_context(|| format!("loading {}", path.display()))?;
    check_vocab(&vocab, data, "the evaluation language model")?;
    let path = dir.join(SCORER_REPORT);
    manifest.input(&path)?;
    let summary: ScorerSummary = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    Ok(ScorerSet {
        emotion,
        coherence,
        lm,
        emotion_report: summary.emotion,
        coherence_report: summary.coherence,
        lm_dev_ppl: summary.lm_dev_ppl,
    })
}

fn write_candidate_file(
    cands: &[GenerationCandidate],
    data: &PreparedData,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<()> {
    let path = out.join("candidates.tsv");
    let mut w = create(&path)?;
    write_candidates(cands, &data.vocab, &mut w)?;
    w.flush()?;
    manifest.output(&path)
}

fn generate(
    settings: &Settings,
    data_dir: &Path,
    model: &Path,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<()> {
    let data = load_data(settings, data_dir, manifest)?;
    let ckpt = load_checkpoint(model, &data, manifest)?;
    let posts = plan_posts(&data, &settings.eval);
    let cands = generate_for_posts(&ckpt.model, &posts, &settings.eval)?;
    write_candidate_file(&cands, &data, out, manifest)?;
    println!("{} candidates for {} posts", cands.len(), posts.len());
    Ok(())
}

fn evaluate(
    settings: &Settings,
    data_dir: &Path,
    model: &Path,
    scorer_dir: &Path,
    candidates: Option<&Path>,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<()> {
    let data = load_data(settings, data_dir, manifest)?;
    let ckpt = load_checkpoint(model, &data, manifest)?;
    let scorers = load_scorers(scorer_dir, &data, manifest)?;
    let posts = plan_posts(&data, &settings.eval);
    let cands = match candidates {
        Some(path) => {
            manifest.input(path)?;
            read_candidates(open(path)?, &data.vocab)?
        }
        None => {
            let cands = generate_for_posts(&ckpt.model, &posts, &settings.eval)?;
            write_candidate_file(&cands, &data, out, manifest)?;
            cands
        }
    };
    let scored = score_for_posts(cands, &posts, &scorers)?;
    let reranked = compute_metrics(
        &select_top1(&scored, Selection::Rerank(settings.eval.rerank)),
        &scorers.lm,
    )?;
    let likelihood = compute_metrics(&select_top1(&scored, Selection::Likelihood), &scorers.lm)?;
    let sweep = lambda_sweep(&scored, &settings.sweep_grid()?)?;
    let probe = if ckpt.model.variant().is_variational() {
        let tr = collect_latents(
            &ckpt.model,
            &data.train,
            LatentSource::Posterior,
            ckpt.seed(),
        )?;
        let dv = collect_latents(
            &ckpt.model,
            &data.dev,
            LatentSource::Posterior,
            ckpt.seed() ^ 1,
        )?;
        Some(probe_accuracy(&tr, &dv, &ProbeConfig::default())?)
    } else {
        None
    };

    let mut text = format!(
        "model {} (seed {}, {} steps), lambda {}\n\nreranked\n{}\nlikelihood only\n{}",
        ckpt.model.variant(),
        ckpt.seed(),
        ckpt.step,
        settings.eval.rerank.lambda,
        reranked.table(),
        likelihood.table()
    );
    if let Some(p) = probe {
        text += &format!(
            "\nposterior probe: train {:.2}%, held-out {:.2}%, majority {:.2}%\n",
            p.train_accuracy, p.heldout_accuracy, p.majority_baseline
        );
    }
    write_text(&out.join("report.txt"), &text, manifest)?;
    let csv = report_csv(&[("reranked", &reranked), ("likelihood", &likelihood)]);
    write_text(&out.join("report.csv"), &csv, manifest)?;

    let path = out.join("sweep.csv");
    let mut w = create(&path)?;
    write_sweep_csv(&sweep, &mut w)?;
    w.flush()?;
    manifest.output(&path)?;
    print!("{text}");
    Ok(())
}

fn report_csv(rows: &[(&str, &EvalReport)]) -> String {
    let mut s = format!("ranking,{}\n", EvalReport::csv_header());
    for (name, r) in rows {
        s += &format!("{name},{}\n", r.csv_row());
    }
    s
}

fn ablate(
    settings: &Settings,
    data_dir: &Path,
    scorer_dir: Option<&Path>,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<()> {
    let data = load_data(settings, data_dir, manifest)?;
    let scorers = match scorer_dir {
        Some(dir) => load_scorers(dir, &data, manifest)?,
        None => {
            let set = train_scorers(&data, &settings.scorers)?;
            save_scorers(&set, settings, &data, out, manifest)?;
            set
        }
    };
    let grid = settings.sweep_grid()?;
    let mut rows: Vec<VariantEval> = Vec::new();
    for &variant in &settings.variants {
        for &seed in &settings.seeds {
            let (_, eval) = train_and_evaluate(
                variant,
                seed,
                &settings.train,
                &data,
                &scorers,
                &settings.eval,
                &grid,
            )?;
            eprintln!(
                "{} seed {seed}: emotion accuracy {:.2}%",
                variant.label(),
                eval.reranked.emo_acc
            );
            rows.push(eval);
        }
    }
    let table = ablation_table(&rows);
    write_text(&out.join("ablation.txt"), &table, manifest)?;
    write_text(&out.join("ablation.csv"), &ablation_csv(&rows), manifest)?;
    write_text(
        &out.join("ablation.json"),
        &(serde_json::to_string_pretty(&rows)? + "\n"),
        manifest,
    )?;
    print!("{table}");
    Ok(())
}

fn dump_latents(
    settings: &Settings,
    data_dir: &Path,
    model: &Path,
    source: LatentSource,
    split: &str,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<()> {
    let data = load_data(settings, data_dir, manifest)?;
    let ckpt = load_checkpoint(model, &data, manifest)?;
    let pairs = match split {
        "train" => &data.train,
        "dev" => &data.dev,
        "test" => &data.test,
        other => anyhow::bail!("unknown split `{other}`; expected train, dev or test"),
    };
    let seed = settings.train.seed;
    let records = collect_latents(&ckpt.model, pairs, source, seed)?;
    let path = out.join("latents.tsv");
    let mut w = create(&path)?;
    write_dump(&records, &mut w)?;
    w.flush()?;
    manifest.output(&path)?;

    let points = pca_2d(&records)?;
    let path = out.join("projection.tsv");
    let mut w = create(&path)?;
    write_projection(&records, &points, &mut w)?;
    w.flush()?;
    manifest.output(&path)?;

    let train_records = collect_latents(&ckpt.model, &data.train, source, seed ^ 1)?;
    let probe = probe_accuracy(&train_records, &records, &ProbeConfig::default())?;
    let text = format!(
        "{source} latents of {} {split} pairs\nprobe: train {:.2}%, held-out {:.2}%, majority {:.2}%\n",
        records.len(),
        probe.train_accuracy,
        probe.heldout_accuracy,
        probe.majority_baseline
    );
    write_text(&out.join("probe.txt"), &text, manifest)?;
    print!("{text}");
    Ok(())
}
