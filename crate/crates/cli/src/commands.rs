use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use mixlsq::experiments::records::{write_trials_csv, AggregateTable, OutputMeta};
use mixlsq::experiments::{
    generate_plain_corpus, run_plain_on_corpus, run_psr_experiment, LossAggregate, PlainCorpus, PlainExperimentConfig,
};
use mixlsq::scan::{scan_loss, write_scan_csv};
use mixlsq::{DcsLoss, GaussianMixture, Loss, LossKind, MixtureLoss, MixtureLossConfig};
use sha2::{Digest, Sha256};

use crate::config::{self, Experiment, Manifest, Overrides};
use crate::error::CliError;

pub const VERSION: &str = env!("MIXLSQ_VERSION");

/// Settings shared by every subcommand that writes files.
pub struct Output {
    pub dir: PathBuf,
    pub timing: bool,
}

impl Output {
    fn prepare(&self) -> Result<(), CliError> {
        if !self.dir.exists() {
            warn!("output directory {} does not exist, creating it", self.dir.display());
        }
        fs::create_dir_all(&self.dir).map_err(|e| CliError::io(format!("cannot create {}", self.dir.display()), e))
    }

    fn meta(&self, seed: u64, config_hash: String) -> OutputMeta {
        let generated_at = self.timing.then(|| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true));
        OutputMeta { seed, version: VERSION.to_string(), config_hash, generated_at }
    }

    /// Aggregates as stored in the summary; timing is zeroed like the CSV `time_us` column.
    fn summary_rows(&self, aggregates: &[LossAggregate]) -> Vec<LossAggregate> {
        let mut rows = aggregates.to_vec();
        if !self.timing {
            rows.iter_mut().for_each(|a| a.mean_time_us = 0.0);
        }
        rows
    }

    fn write(
        &self,
        name: &str,
        body: impl FnOnce(&mut BufWriter<File>) -> Result<(), CliError>,
    ) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|e| CliError::io(format!("cannot create {}", path.display()), e))?;
        let mut out = BufWriter::new(file);
        body(&mut out)?;
        out.flush().map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))?;
        info!("wrote {}", path.display());
        Ok(path)
    }

    fn write_text(&self, name: &str, text: &str) -> Result<PathBuf, CliError> {
        self.write(name, |out| {
            out.write_all(text.as_bytes()).and_then(|_| out.write_all(b"\n")).map_err(|e| CliError::io(name, e))
        })
    }
}

fn print_table(name: &str, aggregates: &[LossAggregate]) {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    let sci = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3e}"));
    println!("{name}");
    println!(
        "  {:<5} {:>7} {:>10} {:>8} {:>8} {:>8} {:>8}",
        "loss", "runs", "rmse", "success", "anees", "iters", "max_it"
    );
    for a in aggregates {
        println!(
            "  {:<5} {:>7} {:>10} {:>8} {:>8} {:>8.2} {:>8}",
            a.loss.name(),
            a.runs,
            sci(a.rmse),
            opt(a.success_rate),
            opt(a.anees.as_ref().and_then(|s| s.anees)),
            a.mean_iterations,
            a.max_iteration_runs
        );
    }
}

fn load_corpus(path: &Path) -> Result<PlainCorpus, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("cannot read {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("invalid corpus {}: {e}", path.display())))
}

pub struct PlainOptions {
    pub dump_corpus: bool,
    pub corpus: Option<PathBuf>,
}

pub fn plain(
    config: Option<&Path>,
    overrides: &Overrides,
    output: &Output,
    opts: &PlainOptions,
) -> Result<(), CliError> {
    let manifest = config::resolve(config, Experiment::Plain, overrides)?;
    let corpus = opts.corpus.as_deref().map(load_corpus).transpose()?;
    if corpus.is_some() && manifest.plain.len() != 1 {
        return Err(CliError::Config(format!(
            "--corpus needs exactly one plain experiment, the configuration has {}",
            manifest.plain.len()
        )));
    }
    output.prepare()?;
    let meta = output.meta(manifest.seed, manifest.hash());
    let mut table = AggregateTable::new(meta.clone());
    for cfg in &manifest.plain {
        let name = cfg.name();
        info!("running {name}");
        let corpus = match &corpus {
            Some(c) => check_corpus(cfg, c.clone())?,
            None => generate_plain_corpus(cfg)?,
        };
        if opts.dump_corpus {
            let json = serde_json::to_string_pretty(&corpus).map_err(|e| CliError::Run(e.into()))?;
            output.write_text(&format!("{name}_corpus.json"), &json)?;
        }
        let res = run_plain_on_corpus(cfg, corpus, &manifest.losses)?;
        output.write(&format!("{name}.csv"), |out| Ok(write_trials_csv(out, &meta, &res.records, output.timing)?))?;
        table.insert(&name, &output.summary_rows(&res.aggregates));
        print_table(&name, &res.aggregates);
    }
    finish(output, &manifest, &table, "plain")
}

fn check_corpus(cfg: &PlainExperimentConfig, corpus: PlainCorpus) -> Result<PlainCorpus, CliError> {
    match corpus.mixtures.first() {
        Some(m) if m.dimension() != cfg.dimension => Err(CliError::Config(format!(
            "corpus mixtures are {}-dimensional, the experiment is {}-dimensional",
            m.dimension(),
            cfg.dimension
        ))),
        None => Err(CliError::Config("the corpus holds no mixture".into())),
        _ => Ok(corpus),
    }
}

pub fn psr(config: Option<&Path>, overrides: &Overrides, output: &Output) -> Result<(), CliError> {
    let manifest = config::resolve(config, Experiment::Psr, overrides)?;
    output.prepare()?;
    let meta = output.meta(manifest.seed, manifest.hash());
    let mut table = AggregateTable::new(meta.clone());
    for cfg in &manifest.psr {
        let name = cfg.name();
        info!("running {name}");
        let res = run_psr_experiment(cfg, &manifest.losses)?;
        output.write(&format!("{name}.csv"), |out| Ok(write_trials_csv(out, &meta, &res.records, output.timing)?))?;
        table.insert(&name, &output.summary_rows(&res.aggregates));
        print_table(&name, &res.aggregates);
    }
    finish(output, &manifest, &table, "psr")
}

fn finish(output: &Output, manifest: &Manifest, table: &AggregateTable, prefix: &str) -> Result<(), CliError> {
    output.write_text(&format!("{prefix}_summary.json"), &table.to_json()?)?;
    output.write_text(&format!("{prefix}_manifest.json"), &manifest.to_json())?;
    Ok(())
}

pub struct ScanOptions {
    pub mixture: PathBuf,
    pub loss: LossKind,
    pub range: (f64, f64),
    pub resolution: f64,
    pub damping: f64,
    pub phi: f64,
}

/// Parses `lo:hi`.
pub fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(':').ok_or_else(|| format!("expected lo:hi, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    let (lo, hi) = (parse(lo)?, parse(hi)?);
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(format!("range must satisfy lo < hi, got {lo}:{hi}"));
    }
    Ok((lo, hi))
}

pub fn scan(opts: &ScanOptions, output: &Output) -> Result<(), CliError> {
    let path = &opts.mixture;
    let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("cannot read {}", path.display()), e))?;
    let mixture: GaussianMixture = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("invalid mixture {}: {e}", path.display())))?;
    let loss: Box<dyn Loss> = match opts.loss {
        LossKind::Dcs => {
            let scalings = mixture.scalings();
            let best = (0..scalings.len()).fold(0, |b, l| if scalings[l] > scalings[b] { l } else { b });
            let c = &mixture.components()[best];
            Box::new(DcsLoss::new(opts.phi, c.mean().clone(), c.sqrt_info().clone()).map_err(config_error)?)
        }
        kind => {
            let cfg = MixtureLossConfig { damping: opts.damping, ..MixtureLossConfig::default() };
            Box::new(MixtureLoss::new(kind, Arc::new(mixture), cfg).map_err(config_error)?)
        }
    };
    let samples = scan_loss(loss.as_ref(), opts.range.0, opts.range.1, opts.resolution).map_err(config_error)?;
    output.prepare()?;
    let settings =
        format!("{}|{}|{:?}|{}|{}|{}", text.trim(), opts.loss, opts.range, opts.resolution, opts.damping, opts.phi);
    let hash: String = Sha256::digest(settings.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect();
    let meta = output.meta(0, hash);
    let path =
        output.write(&format!("scan_{}.csv", opts.loss), |out| Ok(write_scan_csv(out, Some(&meta), &samples)?))?;
    println!("{} samples written to {}", samples.len(), path.display());
    Ok(())
}

/// Parameter problems detected by the library are reported as usage errors.
fn config_error(e: mixlsq::Error) -> CliError {
    CliError::Config(e.to_string())
}
