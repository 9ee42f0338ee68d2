use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mvspoof::checkpoint::write_atomic;
use mvspoof::corpus::{generate_synth_corpus, load_manifest, read_wav};
use mvspoof::evaluation::{average_over_seeds, render_report, EvalReport};
use mvspoof::fusion::{FusionMode, View};
use mvspoof::pipeline::{
    evaluate_checkpoint, fit_duration_quantizer, train_pipeline, views_label, with_jobs, Artifacts, DetectorEcho,
    FeatureExtractor, RunConfig,
};
use mvspoof::pron::{train_recognizer, Recognizer};

#[derive(Parser)]
#[command(name = "mvspoof", version, about = "Multi-view fake audio detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Caps the number of utterances processed in parallel.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic two-class corpus and its manifest.
    SynthCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_real: Option<usize>,
        #[arg(long)]
        n_fake: Option<usize>,
        #[arg(long)]
        n_pseudo_phonemes: Option<usize>,
        #[arg(long)]
        real_jitter: Option<f64>,
        #[arg(long)]
        fake_jitter: Option<f64>,
        /// Dataset tag recorded in the manifest.
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Fit the duration quantizer on bonafide training audio.
    FitQuantizer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the phoneme recognizer behind the pron view.
    TrainPron {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy CTC transcription of WAV files.
    Decode {
        #[arg(long)]
        pron: PathBuf,
        #[arg(required = true)]
        wavs: Vec<PathBuf>,
    },
    /// Train the detector on a manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[arg(long)]
        train_manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated views, e.g. `w2v,duration,pron`.
        #[arg(long, value_delimiter = ',')]
        views: Option<Vec<View>>,
        #[arg(long)]
        fusion_mode: Option<FusionMode>,
        #[arg(long)]
        quantizer: Option<PathBuf>,
        #[arg(long)]
        pron: Option<PathBuf>,
    },
    /// Score manifests with a trained detector.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        manifests: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the quantizer path recorded in the checkpoint.
        #[arg(long)]
        quantizer: Option<PathBuf>,
        /// Overrides the recognizer path recorded in the checkpoint.
        #[arg(long)]
        pron: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Merge evaluation reports, averaging rows that share a key.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(std::path::absolute(p).with_context(|| format!("resolving {}", p.display()))?)
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<String> {
    let (text, kv) = render_report(report)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_atomic(&dir.join("report.json"), serde_json::to_string_pretty(report)?.as_bytes())?;
    write_atomic(&dir.join("report.txt"), text.as_bytes())?;
    write_atomic(&dir.join("report.kv"), kv.as_bytes())?;
    Ok(text)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthCorpus {
            common,
            out,
            n_real,
            n_fake,
            n_pseudo_phonemes,
            real_jitter,
            fake_jitter,
            dataset,
        } => {
            let mut c = common.resolve()?.corpus;
            if let Some(s) = common.seed {
                c.seed = s;
            }
            c.n_real = n_real.unwrap_or(c.n_real);
            c.n_fake = n_fake.unwrap_or(c.n_fake);
            c.n_pseudo_phonemes = n_pseudo_phonemes.unwrap_or(c.n_pseudo_phonemes);
            c.real_duration_jitter = real_jitter.unwrap_or(c.real_duration_jitter);
            c.fake_duration_jitter = fake_jitter.unwrap_or(c.fake_duration_jitter);
            if let Some(d) = dataset {
                c.dataset = d;
            }
            log::info!("corpus config: {c:?}");
            generate_synth_corpus(&c, &out)?;
            println!("{}", out.join("manifest.tsv").display());
        }
        Command::FitQuantizer { common, manifest, out } => {
            let c = common.resolve()?;
            c.validate()?;
            log::info!("resolved config:\n{}", c.to_toml());
            let m = load_manifest(&manifest)?;
            let q = fit_duration_quantizer(&m, &c)?;
            q.save(&out)?;
            println!("{}", out.display());
        }
        Command::TrainPron { common, manifest, out } => {
            let c = common.resolve()?;
            c.validate()?;
            log::info!("resolved config:\n{}", c.to_toml());
            let m = load_manifest(&manifest)?;
            let (model, report) = with_jobs(common.jobs, || {
                train_recognizer(&m, &c.pron.recognizer, &c.pron.train, c.seed)
            })??;
            model.save(&out)?;
            write_atomic(
                &out.with_extension("report.json"),
                serde_json::to_string_pretty(&report)?.as_bytes(),
            )?;
            println!(
                "held-out PER {:.4}, held-out loss {:.4} -> {:.4}",
                report.heldout_per, report.initial_heldout_loss, report.final_heldout_loss
            );
        }
        Command::Decode { pron, wavs } => {
            let model = Recognizer::load(&pron)?;
            for w in wavs {
                let ids = model.decode(&read_wav(&w)?)?;
                let ids: Vec<String> = ids.iter().map(usize::to_string).collect();
                println!("{}\t{}", w.display(), ids.join(" "));
            }
        }
        Command::Train {
            config,
            seed,
            jobs,
            train_manifest,
            out,
            views,
            fusion_mode,
            quantizer,
            pron,
        } => {
            let common = Common {
                config: Some(config),
                seed,
                jobs,
            };
            let mut c = common.resolve()?;
            if let Some(v) = views {
                c.fusion.views = v;
            }
            if let Some(m) = fusion_mode {
                c.fusion.mode = m;
            }
            c.validate()?;
            log::info!("resolved config:\n{}", c.to_toml());
            let quantizer = quantizer.as_deref().map(absolute).transpose()?;
            let pron = pron.as_deref().map(absolute).transpose()?;
            let artifacts = Artifacts::load(
                quantizer.as_deref().filter(|_| c.fusion.has(View::Duration)),
                pron.as_deref().filter(|_| c.fusion.has(View::Pron)),
            )?;
            let extractor = FeatureExtractor::new(&c, artifacts)?;
            let echo = DetectorEcho {
                run: c.clone(),
                extractor_fingerprint: extractor.fingerprint().to_string(),
                quantizer_path: quantizer.filter(|_| c.fusion.has(View::Duration)),
                pron_path: pron.filter(|_| c.fusion.has(View::Pron)),
            };
            let m = load_manifest(&train_manifest)?;
            let outcome = with_jobs(common.jobs, || train_pipeline(&c, &m, &extractor, Some((&out, &echo))))??;
            let t = &outcome.trace;
            println!(
                "{} ({}): final training loss {:.5}, best epoch {}",
                views_label(&c.fusion.views),
                c.fusion.mode,
                t.epoch_loss.last().copied().unwrap_or(f64::NAN),
                t.best_epoch
            );
            println!("{}", mvspoof::trainer::checkpoint_path(&out, true).display());
            println!("{}", mvspoof::trainer::checkpoint_path(&out, false).display());
        }
        Command::Evaluate {
            checkpoint,
            manifests,
            out,
            quantizer,
            pron,
            jobs,
        } => {
            let ms = manifests
                .iter()
                .map(|p| load_manifest(p))
                .collect::<mvspoof::Result<Vec<_>>>()?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let report = with_jobs(jobs, || {
                evaluate_checkpoint(&checkpoint, &ms, quantizer.as_deref(), pron.as_deref(), Some(&out))
            })??;
            print!("{}", write_report(&out, &report)?);
        }
        Command::Report { reports, out } => {
            let mut merged = EvalReport::default();
            let mut ids = Vec::new();
            for p in &reports {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let r: EvalReport =
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
                merged.rows.extend(r.rows);
                merged.seeds.extend(r.seeds);
                ids.push(r.checkpoint_id);
            }
            merged.rows = average_over_seeds(&merged.rows);
            merged.seeds.sort_unstable();
            merged.seeds.dedup();
            merged.checkpoint_id = ids.join(",");
            let text = match &out {
                Some(dir) => write_report(dir, &merged)?,
                None => render_report(&merged)?.0,
            };
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
