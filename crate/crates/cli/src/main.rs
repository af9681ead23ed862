//! Command-line driver: each subcommand runs one stage and leaves its
//! artifact in the run directory for the next one.

use std::fs;
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use nextpoi_core::config::{Ablation, ExperimentConfig};
use nextpoi_core::data::{Dataset, Split};
use nextpoi_core::eval::MetricsReport;
use nextpoi_core::pipeline::{self as pl, DeviceModel, Meta, MetricsArtifact, ModelsArtifact, NeighborsArtifact, PretrainArtifact, RunDir};
use nextpoi_core::recommender::CoreParams;

#[derive(Parser)]
#[command(name = "nextpoi", version, about = "Decentralized collaborative next-POI recommendation simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the planted-structure synthetic dataset.
    Synth(Common),
    /// Pretrain POI embeddings on distance and category prediction.
    Pretrain(Common),
    /// Identify geographical and semantic neighbors for every user.
    Neighbors(Common),
    /// Run decentralized collaborative training.
    Train(Common),
    /// Score held-out check-ins and write HR@k / NDCG@k.
    Eval(Common),
    /// Run every stage in order.
    Pipeline(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; unset keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for artifacts.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Embedding dimension.
    #[arg(long)]
    d: Option<usize>,
    /// Neighbors kept per view.
    #[arg(long)]
    q: Option<usize>,
    /// Weight on neighbor models during aggregation, in [0, 1].
    #[arg(long)]
    mu: Option<f64>,
    /// Privacy budget per perturbation.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Experiment seed; also seeds the synthetic generator.
    #[arg(long)]
    seed: Option<u64>,
    /// Disable a component: -CP -DP -AN -GN -SN -MIM -PP. Repeatable.
    #[arg(long = "ablation", value_name = "LABEL", allow_hyphen_values = true)]
    ablations: Vec<Ablation>,
    /// Worker threads for per-device work; 1 runs serially. Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Accept input artifacts produced under a different config.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                ExperimentConfig::from_toml(&text).with_context(|| format!("in {}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.d {
            cfg.d = v;
        }
        if let Some(v) = self.q {
            cfg.q = v;
        }
        if let Some(v) = self.mu {
            cfg.mu = v;
        }
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
            cfg.synth.seed = v;
        }
        cfg.ablations.extend(self.ablations.iter().copied());
        cfg.validate()?;
        Ok(cfg)
    }

    fn parallel(&self) -> bool {
        self.threads != Some(1)
    }
}

struct Stage {
    run: RunDir,
    cfg: ExperimentConfig,
    force: bool,
    parallel: bool,
}

impl Stage {
    fn split(&self) -> Result<(Dataset, Split)> {
        let d = pl::load_dataset(&self.run, &self.cfg, self.force)?;
        let split = pl::prepare_split(&d, &self.cfg)?;
        Ok((d, split))
    }

    fn synth(&self) -> Result<()> {
        let d = pl::synthesize(&self.cfg)?;
        pl::save_dataset(&self.run, &d, &self.cfg)?;
        println!("dataset: {} users, {} POIs, {} check-ins", d.n_users(), d.n_pois(), d.n_checkins());
        Ok(())
    }

    fn pretrain(&self) -> Result<()> {
        let (_, split) = self.split()?;
        let (params, report) = pl::stage_pretrain(&split, &self.cfg)?;
        let last = |c: &[f64]| c.last().copied().unwrap_or(f64::NAN);
        println!("pretrain: {} epochs, L_DP {:.4}, L_CP {:.4}", report.dp_curve.len().max(report.cp_curve.len()), last(&report.dp_curve), last(&report.cp_curve));
        let art = PretrainArtifact { meta: Meta::new("pretrain", &self.cfg), report, params };
        pl::write_json(&self.run.pretrained(), &art)?;
        Ok(())
    }

    fn neighbors(&self) -> Result<()> {
        let (_, split) = self.split()?;
        let users = pl::stage_neighbors(&split, &self.cfg)?;
        println!("neighbors: {} users", users.0.len());
        let art = NeighborsArtifact { meta: Meta::new("neighbors", &self.cfg), users };
        pl::write_json(&self.run.neighbors(), &art)?;
        Ok(())
    }

    fn train(&self) -> Result<()> {
        let (_, split) = self.split()?;
        let pre: PretrainArtifact = pl::load_checked(&self.run.pretrained(), &self.cfg, self.force, |a: &PretrainArtifact| &a.meta)?;
        let nb: NeighborsArtifact = pl::load_checked(&self.run.neighbors(), &self.cfg, self.force, |a: &NeighborsArtifact| &a.meta)?;
        let (devices, log) = pl::stage_train(&split, &pre.params, &nb.users, &self.cfg, self.parallel)?;
        pl::write_round_log(&self.run.rounds(), &log.records)?;
        println!(
            "train: {} rounds, mean local loss {:.4}{}",
            log.mean_local_loss.len(),
            log.mean_local_loss.last().copied().unwrap_or(f64::NAN),
            if log.converged { " (converged)" } else { "" }
        );
        let art = ModelsArtifact {
            meta: Meta::new("train", &self.cfg),
            mean_local_loss: log.mean_local_loss,
            converged: log.converged,
            devices: devices.into_iter().map(|d| DeviceModel { user: d.user, params: d.params }).collect(),
        };
        pl::write_json(&self.run.models(), &art)?;
        Ok(())
    }

    fn eval(&self) -> Result<()> {
        let (_, split) = self.split()?;
        let models: ModelsArtifact = pl::load_checked(&self.run.models(), &self.cfg, self.force, |a: &ModelsArtifact| &a.meta)?;
        let params: Vec<&CoreParams> = models.devices.iter().map(|d| &d.params).collect();
        let report = pl::stage_eval(&split, &params, &self.cfg)?;
        print_report(&report);
        report.write_csv(BufWriter::new(fs::File::create(self.run.metrics_csv())?))?;
        pl::write_json(&self.run.metrics_json(), &MetricsArtifact { meta: Meta::new("eval", &self.cfg), report })?;
        Ok(())
    }
}

fn print_report(r: &MetricsReport) {
    for m in &r.means {
        println!("HR@{:<2} {:.4}  NDCG@{:<2} {:.4}", m.k, m.hr, m.k, m.ndcg);
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let (Cmd::Synth(c) | Cmd::Pretrain(c) | Cmd::Neighbors(c) | Cmd::Train(c) | Cmd::Eval(c) | Cmd::Pipeline(c)) = &cli.cmd;
    if let Some(n) = c.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let stage = Stage { run: RunDir::new(&c.out), cfg: c.config()?, force: c.force, parallel: c.parallel() };
    match cli.cmd {
        Cmd::Synth(_) => stage.synth(),
        Cmd::Pretrain(_) => stage.pretrain(),
        Cmd::Neighbors(_) => stage.neighbors(),
        Cmd::Train(_) => stage.train(),
        Cmd::Eval(_) => stage.eval(),
        Cmd::Pipeline(_) => {
            stage.synth()?;
            stage.pretrain()?;
            stage.neighbors()?;
            stage.train()?;
            stage.eval()
        }
    }
}
