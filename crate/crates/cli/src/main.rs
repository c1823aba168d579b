//! Operator surface for the recommender pipeline: data generation,
//! preparation, training, evaluation, ablation sweeps, gradient checks
//! and single-query recommendation. Every run is reproducible from the
//! config file plus one master seed; all numeric output uses a fixed
//! 12-significant-digit format.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::io::Write;
use std::path::{Path, PathBuf};
use tgrec_core::config::{fmt_sig, RunConfig};
use tgrec_core::encoder::{load_checkpoint_path, save_checkpoint_path, TgnModel};
use tgrec_core::eval::{render_reports_json, render_reports_text, MetricsReport};
use tgrec_core::events::{timestamp_of_day, write_event_rows, write_split_manifest_path};
use tgrec_core::market::write_prices;
use tgrec_core::pipeline::{
    self, behavior_spec_of, encoder_config_of, gradcheck, load_prefiltered,
    load_prepared, market_spec_of, recommend, sweep_alpha, sweep_negatives, train_period,
    PreparedData, TrainedPeriod, ALPHA_GRID, GRADCHECK_TOLERANCE, NEGATIVES_GRID,
};
use tgrec_core::scenario::{gen_events, gen_prices, write_market_caps};

fn default_config_listing() -> String {
    format!(
        "Every key of the run configuration with its default value \
         (TOML, override via --config FILE and per-key flags):\n\n{}",
        RunConfig::default().to_toml()
    )
}

#[derive(Parser)]
#[command(
    name = "tgrec",
    about = "Portfolio-aware temporal graph stock recommender pipeline",
    after_long_help = default_config_listing()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by all subcommands; each maps onto one config key.
#[derive(Args, Clone)]
struct Common {
    /// TOML config file; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for generated files, checkpoints and reports.
    #[arg(long)]
    out_dir: Option<String>,
    /// Rolling period to train/evaluate on (1-based).
    #[arg(long)]
    period: Option<usize>,
    /// Loss balance between the ranking and contrastive objectives.
    #[arg(long)]
    alpha: Option<f64>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Chronological batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Ranking-loss negatives per interaction.
    #[arg(long)]
    bpr_negatives: Option<usize>,
    /// Softmax temperature of the contrastive loss.
    #[arg(long)]
    tau: Option<f64>,
    /// Optimizer learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Candidate pool size for contrastive sampling.
    #[arg(long)]
    candidate_set_size: Option<usize>,
    /// Potential positives kept per interaction.
    #[arg(long)]
    n_potential_positives: Option<usize>,
    /// Contrastive negatives kept per interaction.
    #[arg(long)]
    n_contrastive_negatives: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_toml_path(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = self.period {
            cfg.period = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.bpr_negatives {
            cfg.bpr_negatives = v;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.candidate_set_size {
            cfg.candidate_set_size = v;
        }
        if let Some(v) = self.n_potential_positives {
            cfg.n_potential_positives = v;
        }
        if let Some(v) = self.n_contrastive_negatives {
            cfg.n_contrastive_negatives = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic market: prices and market caps.
    GenMarket(Common),
    /// Generate the synthetic transaction stream (market must exist in config form).
    GenEvents(Common),
    /// Filter the dataset and write the rolling split manifest.
    Prep(Common),
    /// Train on one period; writes per-epoch checkpoints, the selected
    /// checkpoint, the training log and the selection table.
    Train {
        #[command(flatten)]
        common: Common,
        /// Also write the contrastive-sampling audit table (candidates,
        /// scores, chosen pairs per interaction and epoch).
        #[arg(long)]
        dump_pairs: bool,
    },
    /// Evaluate a checkpoint on the period's test split, with baselines.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; defaults to the period's selected one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the per-interaction verdict table.
        #[arg(long)]
        verdicts: bool,
    },
    /// Train + evaluate across the loss-balance grid and emit one table.
    SweepAlpha(Common),
    /// Train + evaluate across the negative-count grid and emit one table.
    SweepNegatives(Common),
    /// Audit analytic gradients against finite differences on a toy graph.
    Gradcheck(Common),
    /// Rank all items for one user at one time.
    Recommend {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        user: String,
        /// Query time, either seconds since the epoch or an ISO date.
        #[arg(long)]
        time: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
}

struct Paths {
    out: PathBuf,
}

impl Paths {
    fn new(cfg: &RunConfig) -> Result<Self> {
        let out = PathBuf::from(&cfg.out_dir);
        std::fs::create_dir_all(&out)
            .with_context(|| format!("creating output dir {}", out.display()))?;
        Ok(Paths { out })
    }

    fn prices(&self) -> PathBuf {
        self.out.join("prices.csv")
    }
    fn caps(&self) -> PathBuf {
        self.out.join("market_caps.csv")
    }
    fn events(&self) -> PathBuf {
        self.out.join("events.csv")
    }
    fn filtered(&self) -> PathBuf {
        self.out.join("events_filtered.csv")
    }
    fn manifest(&self) -> PathBuf {
        self.out.join("splits.csv")
    }
    fn checkpoint_dir(&self) -> PathBuf {
        self.out.join("checkpoints")
    }
    fn epoch_checkpoint(&self, period: usize, epoch: usize) -> PathBuf {
        self.checkpoint_dir().join(format!("period{period}_epoch{epoch}.json"))
    }
    fn selected_checkpoint(&self, period: usize) -> PathBuf {
        self.checkpoint_dir().join(format!("period{period}_selected.json"))
    }
    fn train_log(&self, period: usize) -> PathBuf {
        self.out.join(format!("train_log_period{period}.txt"))
    }
    fn selection(&self, period: usize) -> PathBuf {
        self.out.join(format!("selection_period{period}.csv"))
    }
    fn report_text(&self, period: usize) -> PathBuf {
        self.out.join(format!("report_period{period}.txt"))
    }
    fn report_json(&self, period: usize) -> PathBuf {
        self.out.join(format!("report_period{period}.json"))
    }
    fn sweep(&self, name: &str, period: usize) -> PathBuf {
        self.out.join(format!("sweep_{name}_period{period}.txt"))
    }
}

fn load_data_for_training(paths: &Paths) -> Result<PreparedData> {
    if paths.filtered().exists() && paths.manifest().exists() {
        Ok(load_prefiltered(&paths.prices(), &paths.filtered(), &paths.manifest())?)
    } else if paths.prices().exists() && paths.events().exists() {
        bail!(
            "found raw files but no prepared data in {}; run `tgrec prep` first",
            paths.out.display()
        );
    } else {
        bail!("no data files in {}; run `tgrec gen-market`, `tgrec gen-events` and `tgrec prep` first", paths.out.display());
    }
}

fn write_train_outputs(
    cfg: &RunConfig,
    paths: &Paths,
    data: &PreparedData,
    trained: &TrainedPeriod,
) -> Result<()> {
    std::fs::create_dir_all(paths.checkpoint_dir())?;
    let echo = cfg.to_toml();
    let names = |n| data.dataset.registry.name(n).to_string();
    for ckpt in &trained.checkpoints {
        save_checkpoint_path(
            &paths.epoch_checkpoint(cfg.period, ckpt.epoch),
            &trained.model,
            ckpt,
            names,
            &echo,
        )?;
    }
    save_checkpoint_path(
        &paths.selected_checkpoint(cfg.period),
        &trained.model,
        &trained.checkpoints[trained.selected],
        names,
        &echo,
    )?;

    let mut log = std::fs::File::create(paths.train_log(cfg.period))?;
    for l in &trained.log {
        writeln!(log, "epoch={} mean_loss={} wall_secs={:.3}", l.epoch, fmt_sig(l.mean_loss), l.wall_secs)?;
    }

    let mut sel = std::fs::File::create(paths.selection(cfg.period))?;
    writeln!(sel, "epoch,hr5,p_sr5,selected")?;
    for (i, row) in trained.selection.iter().enumerate() {
        writeln!(
            sel,
            "{},{},{},{}",
            row.epoch,
            fmt_sig(row.hr5),
            fmt_sig(row.p_sr5),
            (i == trained.selected) as u8
        )?;
    }
    Ok(())
}

fn print_report_summary(reports: &[MetricsReport]) {
    for r in reports {
        println!(
            "{:>20}  HR@5={} NDCG@5={} P(SR)@5={} dSR@5={}",
            r.label,
            fmt_sig(r.per_interaction.hr5),
            fmt_sig(r.per_interaction.ndcg5),
            fmt_sig(r.per_interaction.p_sr5),
            fmt_sig(r.per_interaction.delta_sr5),
        );
    }
}

/// Degenerate run: more than half of the interactions were excluded.
fn degenerate(report: &MetricsReport) -> bool {
    let half = report.total_interactions / 2;
    report.total_interactions > 0
        && (report.rec_excluded > half || report.inv_excluded > half)
}

fn parse_time(s: &str) -> Result<i64> {
    if let Ok(ts) = s.parse::<i64>() {
        return Ok(ts);
    }
    let date = chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .with_context(|| format!("time {s:?} is neither epoch seconds nor YYYY-MM-DD"))?;
    Ok(timestamp_of_day(date))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenMarket(common) => {
            let cfg = common.resolve()?;
            let paths = Paths::new(&cfg)?;
            let market = gen_prices(&market_spec_of(&cfg))?;
            write_prices(std::fs::File::create(paths.prices())?, &market.prices)?;
            write_market_caps(std::fs::File::create(paths.caps())?, &market)?;
            println!(
                "wrote {} assets x {} days to {} and {}",
                cfg.n_assets,
                cfg.n_days,
                paths.prices().display(),
                paths.caps().display()
            );
        }
        Command::GenEvents(common) => {
            let cfg = common.resolve()?;
            let paths = Paths::new(&cfg)?;
            let market = gen_prices(&market_spec_of(&cfg))?;
            let rows = gen_events(&behavior_spec_of(&cfg), &market)?;
            write_event_rows(std::fs::File::create(paths.events())?, &rows)?;
            println!("wrote {} events to {}", rows.len(), paths.events().display());
        }
        Command::Prep(common) => {
            let cfg = common.resolve()?;
            let paths = Paths::new(&cfg)?;
            for (path, producer) in [
                (paths.prices(), "gen-market"),
                (paths.caps(), "gen-market"),
                (paths.events(), "gen-events"),
            ] {
                if !path.exists() {
                    bail!("{} not found; run `tgrec {producer}` first", path.display());
                }
            }
            let data = load_prepared(&paths.prices(), &paths.caps(), &paths.events(), &cfg)?;
            let rows: Vec<tgrec_core::events::EventRow> = data
                .dataset
                .events
                .iter()
                .map(|e| tgrec_core::events::EventRow {
                    timestamp: e.timestamp,
                    user_id: data.dataset.registry.name(e.user).to_string(),
                    item_id: data.dataset.registry.name(e.item).to_string(),
                })
                .collect();
            write_event_rows(std::fs::File::create(paths.filtered())?, &rows)?;
            write_split_manifest_path(&paths.manifest(), &data.splits)?;
            println!(
                "kept {} of {} events (removed {} users, {} items); {} period(s) in {}",
                rows.len(),
                data.n_raw_events,
                data.removed_users,
                data.removed_items,
                data.splits.len(),
                paths.manifest().display()
            );
            for s in &data.splits {
                println!(
                    "period {} {} -> {} (train to {}, val to {})",
                    s.period_index, s.start, s.end, s.train_end, s.val_end
                );
            }
        }
        Command::Train { common, dump_pairs } => {
            let cfg = common.resolve()?;
            let paths = Paths::new(&cfg)?;
            let data = load_data_for_training(&paths)?;
            let trained = train_period(&cfg, &data)?;
            write_train_outputs(&cfg, &paths, &data, &trained)?;
            if dump_pairs {
                let dump = paths.out.join(format!("pair_dump_period{}.csv", cfg.period));
                let file = std::io::BufWriter::new(std::fs::File::create(&dump)?);
                tgrec_core::pipeline::dump_contrastive_pairs(&cfg, &data, file)?;
                println!("wrote {}", dump.display());
            }
            for l in &trained.log {
                println!("epoch={} mean_loss={} wall_secs={:.3}", l.epoch, fmt_sig(l.mean_loss), l.wall_secs);
            }
            println!(
                "selected epoch {} -> {}",
                trained.checkpoints[trained.selected].epoch,
                paths.selected_checkpoint(cfg.period).display()
            );
        }
        Command::Eval { common, checkpoint, verdicts } => {
            let cfg = common.resolve()?;
            let paths = Paths::new(&cfg)?;
            let data = load_data_for_training(&paths)?;
            let ckpt_path = checkpoint.unwrap_or_else(|| paths.selected_checkpoint(cfg.period));
            let (reports, model_verdicts) = eval_checkpoint(&cfg, &data, &ckpt_path)?;
            if verdicts {
                let table = tgrec_core::eval::render_verdicts_csv(&model_verdicts, |u| {
                    data.dataset.registry.name(u).to_string()
                });
                let path = paths.out.join(format!("verdicts_period{}.csv", cfg.period));
                std::fs::write(&path, table)?;
                println!("wrote {}", path.display());
            }
            std::fs::write(paths.report_text(cfg.period), render_reports_text(&reports))?;
            std::fs::write(paths.report_json(cfg.period), render_reports_json(&reports))?;
            print_report_summary(&reports);
            println!(
                "wrote {} and {}",
                paths.report_text(cfg.period).display(),
                paths.report_json(cfg.period).display()
            );
            if degenerate(&reports[0]) {
                bail!(
                    "degenerate run: over half of the test interactions were excluded \
                     (rec {}/{}, inv {}/{})",
                    reports[0].rec_excluded,
                    reports[0].total_interactions,
                    reports[0].inv_excluded,
                    reports[0].total_interactions
                );
            }
        }
        Command::SweepAlpha(common) => {
            let cfg = common.resolve()?;
            let paths = Paths::new(&cfg)?;
            let data = load_data_for_training(&paths)?;
            let rows = sweep_alpha(&cfg, &data, &ALPHA_GRID)?;
            let table = render_sweep_table("alpha", rows.iter().map(|(a, r)| (format!("{a}"), r)));
            std::fs::write(paths.sweep("alpha", cfg.period), &table)?;
            print!("{table}");
        }
        Command::SweepNegatives(common) => {
            let cfg = common.resolve()?;
            let paths = Paths::new(&cfg)?;
            let data = load_data_for_training(&paths)?;
            let rows = sweep_negatives(&cfg, &data, &NEGATIVES_GRID)?;
            let table =
                render_sweep_table("bpr_negatives", rows.iter().map(|(k, r)| (format!("{k}"), r)));
            std::fs::write(paths.sweep("negatives", cfg.period), &table)?;
            print!("{table}");
        }
        Command::Gradcheck(common) => {
            common.resolve()?; // validate the config even though the toy is fixed
            let report = gradcheck(tgrec_core::pipeline::GRADCHECK_SEED)?;
            println!(
                "max_relative_error={} over {} parameters ({} toy events); tolerance {}",
                fmt_sig(report.max_rel_error),
                report.n_parameters,
                report.n_events,
                fmt_sig(GRADCHECK_TOLERANCE)
            );
            if !report.passed {
                bail!("gradient check failed");
            }
            println!("gradient check passed");
        }
        Command::Recommend { common, checkpoint, user, time, k } => {
            let cfg = common.resolve()?;
            let paths = Paths::new(&cfg)?;
            let data = load_data_for_training(&paths)?;
            let ckpt_path = checkpoint.unwrap_or_else(|| paths.selected_checkpoint(cfg.period));
            let mut model = fresh_model(&cfg)?;
            let registry = &data.dataset.registry;
            load_checkpoint_path(&ckpt_path, &mut model, data.dataset.n_nodes(), |name| {
                registry.user(name).or_else(|| registry.item(name))
            })?;
            let t = parse_time(&time)?;
            let rec = recommend(&data, &model, &user, t, k, cfg.batch_size)?;
            if !rec.known_user {
                println!("warning: user {user:?} has no interaction history; ranking from the cold-start path");
            }
            for (rank, (item, score)) in rec.items.iter().enumerate() {
                println!("{:>2}. {}  score={}", rank + 1, item, fmt_sig(*score));
            }
        }
    }
    Ok(())
}

fn fresh_model(cfg: &RunConfig) -> Result<TgnModel> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(tgrec_core::config::derive_seed(
        cfg.seed,
        "model-init",
    ));
    Ok(TgnModel::new(encoder_config_of(cfg), &mut rng)?)
}

fn eval_checkpoint(
    cfg: &RunConfig,
    data: &PreparedData,
    ckpt_path: &Path,
) -> Result<(Vec<MetricsReport>, Vec<tgrec_core::eval::InteractionVerdict>)> {
    let mut model = fresh_model(cfg)?;
    let registry = &data.dataset.registry;
    let (ckpt, _echo) =
        load_checkpoint_path(ckpt_path, &mut model, data.dataset.n_nodes(), |name| {
            registry.user(name).or_else(|| registry.item(name))
        })?;
    let (split, train_range, val_range, test_range) = pipeline::period_ranges(data, cfg)?;
    let mut trained = TrainedPeriod {
        model,
        checkpoints: vec![ckpt],
        log: Vec::new(),
        selection: Vec::new(),
        selected: 0,
        split,
        train_range,
        val_range,
        test_range,
    };
    Ok(tgrec_core::pipeline::evaluate_period_detailed(cfg, data, &mut trained)?)
}

fn render_sweep_table<'a>(
    key: &str,
    rows: impl Iterator<Item = (String, &'a MetricsReport)>,
) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{key:>14} {:>18} {:>18} {:>18} {:>18} {:>18} {:>18}\n",
        "HR@3", "NDCG@3", "HR@5", "NDCG@5", "P(SR)@5", "dSR@5"
    ));
    for (label, r) in rows {
        let b = &r.per_interaction;
        out.push_str(&format!(
            "{label:>14} {:>18} {:>18} {:>18} {:>18} {:>18} {:>18}\n",
            fmt_sig(b.hr3),
            fmt_sig(b.ndcg3),
            fmt_sig(b.hr5),
            fmt_sig(b.ndcg5),
            fmt_sig(b.p_sr5),
            fmt_sig(b.delta_sr5)
        ));
    }
    out
}
