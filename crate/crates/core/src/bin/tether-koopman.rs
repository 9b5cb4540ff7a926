#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Command-line driver: each subcommand runs one experiment and writes CSV
//! results, SVG plots and a `run.json` echo of the configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use tether_koopman::dataset::{collect_dataset, Dataset};
use tether_koopman::experiments::{bench_update_timing, default_lifting, exp_mpc_dimensional, exp_online};
use tether_koopman::io::{
    cell, load_dataset, load_model, metrics_table, save_dataset, save_model, trace_plots, trace_table, CsvTable, Provenance, RunConfigFile,
};
use tether_koopman::koopman::ProxyModel;
use tether_koopman::online::UpdateSchedule;
use tether_koopman::sim::{run_deployment, ControllerKind, ProxySource, ScenarioConfig, SimLog};
use tether_koopman::training::{train_control_oriented, train_supervised, Scheme, TrainReport};
use tether_koopman::{Error, Result};

const OUT_DIR_ENV: &str = "TETHER_KOOPMAN_OUT_DIR";

#[derive(Parser)]
#[command(name = "tether-koopman", version, about = "Koopman uncertainty proxies for tethered deployment control")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Overrides the training seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run configuration; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Defaults to $TETHER_KOOPMAN_OUT_DIR, then `out`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Collect the training dataset.
    Collect,
    /// Train a proxy model.
    Train {
        #[arg(long, value_enum, default_value = "supervised")]
        scheme: SchemeArg,
        /// Dataset file; collected from the configuration when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Deploy the feedback controller with the offline proxy and report the
    /// prediction error.
    Eval {
        #[arg(long)]
        model: PathBuf,
    },
    /// Single closed-loop run.
    Deploy {
        #[arg(long, value_enum, default_value = "feedback")]
        controller: ControllerArg,
        #[arg(long, value_enum, default_value = "offline")]
        proxy: ProxyArg,
        /// Required unless `--proxy none`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Online refitting against an offline proxy.
    OnlineExp {
        #[arg(long, value_enum)]
        variant: Variant,
        /// Refit period(s); `inf` is the offline proxy.
        #[arg(long, num_args = 1.., default_values = ["inf", "1", "50", "100"])]
        period: Vec<String>,
        /// Proxy for `new-uncertainty`; trained from the configuration when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Dimensional MPC deployment, compensated against uncompensated.
    MpcExp {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Refit wall-clock for a range of window sizes.
    BenchUpdate {
        #[arg(long, num_args = 1.., default_values_t = [10, 20, 30, 40, 50])]
        windows: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        calls: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Supervised,
    Node,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ControllerArg {
    Feedback,
    Mpc,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ProxyArg {
    None,
    Offline,
    Online,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Insufficient,
    NewUncertainty,
}

struct Ctx {
    cfg: RunConfigFile,
    prov: Provenance,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_run(&self, command: &str, extra: serde_json::Value) -> Result<()> {
        let doc = json!({
            "command": command,
            "config_hash": self.prov.config_hash,
            "seed": self.prov.seed,
            "config": self.cfg,
            "result": extra,
        });
        fs::write(self.path("run.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
        Ok(())
    }

    fn write_trace(&self, stem: &str, log: &SimLog) -> Result<()> {
        trace_table(log).save(&self.path(&format!("{stem}_trace.csv")), &self.prov)?;
        let (states, err) = trace_plots(log);
        fs::write(self.path(&format!("{stem}_states.svg")), states)?;
        fs::write(self.path(&format!("{stem}_error.svg")), err)?;
        Ok(())
    }

    fn dataset(&self, data: Option<&Path>) -> Result<Dataset> {
        match data {
            Some(p) => load_dataset(p),
            None => collect_dataset(&self.cfg.collect_config()),
        }
    }

    fn model(&self, path: Option<&Path>) -> Result<ProxyModel> {
        match path {
            Some(p) => Ok(load_model(p)?.0),
            None => {
                log::info!("no model given; collecting data and training a supervised proxy");
                let ds = self.dataset(None)?;
                Ok(train_supervised(&ds, &self.cfg.train_config(Scheme::Supervised))?.0)
            }
        }
    }
}

fn curve_table(report: &TrainReport) -> Result<CsvTable> {
    let mut t = CsvTable::new(&["epoch", "total", "prediction", "reconstruction", "regularization"]);
    for e in &report.curve {
        t.push(vec![
            e.epoch.to_string(),
            cell(Some(e.total)),
            cell(Some(e.prediction)),
            cell(Some(e.reconstruction)),
            cell(Some(e.regularization)),
        ])?;
    }
    Ok(t)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.common.config {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    };
    let cfg = match cli.common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    let out = cli
        .common
        .out_dir
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out)?;
    let ctx = Ctx {
        prov: cfg.provenance(),
        cfg,
        out,
    };

    match cli.command {
        Command::Collect => {
            let ds = ctx.dataset(None)?;
            save_dataset(&ctx.path("dataset.jsonl"), &ds, &ctx.prov)?;
            ctx.write_run(
                "collect",
                json!({ "trajectories": ds.trajectories.len(), "resampled": ds.meta.resampled }),
            )?;
        }
        Command::Train { scheme, data } => {
            let ds = ctx.dataset(data.as_deref())?;
            let path = ctx.path("model.json");
            let report = match scheme {
                SchemeArg::Supervised => {
                    let (m, r) = train_supervised(&ds, &ctx.cfg.train_config(Scheme::Supervised))?;
                    save_model(&path, &m, None, Scheme::Supervised, &ctx.prov)?;
                    r
                }
                SchemeArg::Node => {
                    let (c, r) = train_control_oriented(&ds, &ctx.cfg.train_config(Scheme::ControlOriented))?;
                    save_model(&path, &c.to_discrete()?, Some(&c), Scheme::ControlOriented, &ctx.prov)?;
                    r
                }
            };
            curve_table(&report)?.save(&ctx.path("training_curve.csv"), &ctx.prov)?;
            ctx.write_run(
                "train",
                json!({ "best_epoch": report.best_epoch, "best_loss": report.best.total, "seconds": report.wall_clock_s }),
            )?;
        }
        Command::Eval { model } => {
            let m = load_model(&model)?.0;
            let log = run_deployment(&ctx.cfg.scenario(), Some(&m))?;
            metrics_table(&[("offline", &log)])?.save(&ctx.path("metrics.csv"), &ctx.prov)?;
            ctx.write_trace("eval", &log)?;
            ctx.write_run("eval", json!({ "aborted": log.aborted }))?;
        }
        Command::Deploy { controller, proxy, model } => {
            let (base, source) = match controller {
                ControllerArg::Feedback => (ctx.cfg.scenario(), ctx.cfg.online_source()),
                ControllerArg::Mpc => {
                    let sc = ctx.cfg.mpc_scenario();
                    let online = ProxySource::Online {
                        window: sc.window,
                        schedule: UpdateSchedule { period: ctx.cfg.online.period },
                    };
                    (sc.scenario(ProxySource::Offline)?, online)
                }
            };
            let scenario = ScenarioConfig {
                proxy: match proxy {
                    ProxyArg::None => ProxySource::None,
                    ProxyArg::Offline => ProxySource::Offline,
                    ProxyArg::Online => source,
                },
                ..base
            };
            let m = match proxy {
                ProxyArg::None => None,
                _ => Some(ctx.model(model.as_deref())?),
            };
            let log = run_deployment(&scenario, m.as_ref())?;
            let label = match proxy {
                ProxyArg::None => "none",
                ProxyArg::Offline => "offline",
                ProxyArg::Online => "online",
            };
            metrics_table(&[(label, &log)])?.save(&ctx.path("metrics.csv"), &ctx.prov)?;
            ctx.write_trace("deploy", &log)?;
            let kind = match &scenario.controller {
                ControllerKind::Feedback { .. } => "feedback",
                ControllerKind::Mpc { .. } => "mpc",
            };
            ctx.write_run("deploy", json!({ "controller": kind, "proxy": label, "aborted": log.aborted }))?;
        }
        Command::OnlineExp { variant, period, model } => {
            let periods = period
                .iter()
                .map(|p| UpdateSchedule::parse(p).map(|s| s.period))
                .collect::<Result<Vec<_>>>()?;
            let (m, scenario, k) = match variant {
                Variant::Insufficient => {
                    let collect = tether_koopman::dataset::CollectConfig {
                        k: ctx.cfg.online.insufficient_trajectories,
                        ..ctx.cfg.collect_config()
                    };
                    let ds = collect_dataset(&collect)?;
                    let m = train_supervised(&ds, &ctx.cfg.train_config(Scheme::Supervised))?.0;
                    (m, ctx.cfg.scenario(), collect.k)
                }
                Variant::NewUncertainty => {
                    let sc = ScenarioConfig {
                        uncertainty: ctx.cfg.uncertainty.new_condition,
                        ..ctx.cfg.scenario()
                    };
                    (ctx.model(model.as_deref())?, sc, ctx.cfg.training.trajectories)
                }
            };
            let summary = exp_online(&m, &scenario, ctx.cfg.online.window, &periods, k)?;
            let mut t = CsvTable::new(&["period", "settled", "settling_time", "rmse", "window_rms", "trailing_rms", "refits"]);
            for o in &summary.outcomes {
                t.push(vec![
                    o.period.map(|p| p.to_string()).unwrap_or_else(|| "inf".into()),
                    u8::from(o.metrics.settled).to_string(),
                    cell(o.metrics.settling_time),
                    cell(Some(o.metrics.rmse)),
                    cell(Some(o.window_rms)),
                    cell(Some(o.metrics.trailing_rms)),
                    o.updates.to_string(),
                ])?;
            }
            t.save(&ctx.path("online.csv"), &ctx.prov)?;
            ctx.write_run("online-exp", serde_json::to_value(&summary)?)?;
        }
        Command::MpcExp { model } => {
            let m = ctx.model(model.as_deref())?;
            let outcome = exp_mpc_dimensional(&m, &ctx.cfg.mpc_scenario())?;
            metrics_table(&[("compensated", &outcome.compensated), ("uncompensated", &outcome.uncompensated)])?
                .save(&ctx.path("metrics.csv"), &ctx.prov)?;
            ctx.write_trace("compensated", &outcome.compensated)?;
            ctx.write_trace("uncompensated", &outcome.uncompensated)?;
            ctx.write_run(
                "mpc-exp",
                json!({
                    "compensated": outcome.compensated_metrics,
                    "uncompensated": outcome.uncompensated_metrics,
                    "compensated_aborted": outcome.compensated.aborted,
                }),
            )?;
        }
        Command::BenchUpdate { windows, calls } => {
            if calls == 0 {
                return Err(Error::Invalid("calls must be >= 1".into()));
            }
            let lifting = default_lifting(ctx.prov.seed)?;
            let rows = bench_update_timing(&lifting, &windows, calls, ctx.prov.seed)?;
            let mut t = CsvTable::new(&["window", "mean_ms", "std_ms", "calls"]);
            for r in &rows {
                t.push(vec![r.window.to_string(), cell(Some(r.mean_ms)), cell(Some(r.std_ms)), r.calls.to_string()])?;
            }
            t.save(&ctx.path("timing.csv"), &ctx.prov)?;
            ctx.write_run("bench-update", serde_json::to_value(&rows)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
