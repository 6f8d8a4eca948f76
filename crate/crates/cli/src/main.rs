use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use splitguard::bundle::{describe_bundle, make_zero_controller_bundle};
use splitguard::controller::ControllerConfig;
use splitguard::eval::{evaluate, format_labels, generate_labeled_trace, read_labels, write_eval_csv, DEFAULT_TAUS};
use splitguard::live::{connect_with_backoff, run_switch, Backoff, ControllerServer};
use splitguard::pcap::{read_trace_all, write_trace};
use splitguard::sim::{action_counts, run_scenario, scenario_packets, write_action_summary, write_metrics, Scenario};
use splitguard::switch::precompute_thresholds;
use splitguard::{load_bundle, make_handcrafted_bundle, save_bundle, Controller, ModelBundle, SwitchState};

#[derive(Parser)]
#[command(name = "splitguard", version, about = "Split early-exit DDoS detection: switch emulator, controller and simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Run the two-switch scenario and write per-second metrics
    Simulate {
        /// Scenario TOML; the built-in default when omitted
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, value_enum)]
        mitigation: Option<OnOff>,
        /// Bundle path or "handcrafted"; overrides the scenario
        #[arg(long)]
        bundle: Option<String>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
        /// Per-flow action summary as JSON
        #[arg(long)]
        actions: Option<PathBuf>,
    },
    /// Sweep tau over a labeled trace and report per-exit accuracy as CSV
    Eval {
        #[arg(long)]
        pcap: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        bundle: Option<String>,
        /// Comma-separated tau list
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_TAUS.to_vec())]
        taus: Vec<f64>,
        /// CSV destination; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic labeled trace (pcap plus label file)
    GenTrace {
        #[arg(long)]
        pcap: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Multiplies the number of flows of each kind
        #[arg(long, default_value_t = 1)]
        scale: usize,
    },
    /// Validate a bundle and print its sections
    InspectBundle { path: PathBuf },
    /// Write the hand-crafted test bundle
    MakeTestBundle {
        #[arg(long)]
        out: PathBuf,
        /// All-zero GRU and head, so every report yields Notify
        #[arg(long)]
        zero_controller: bool,
    },
    /// Serve feature reports from any number of switches
    Controllerd {
        #[arg(long, default_value = "127.0.0.1:9500")]
        listen: String,
        #[arg(long)]
        bundle: Option<String>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        reverify_period: Option<u32>,
    },
    /// Replay packets through one switch, escalating to a controller
    Switchd {
        #[arg(long, default_value = "127.0.0.1:9500")]
        controller: String,
        #[arg(long)]
        bundle: Option<String>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        pcap: Option<PathBuf>,
        /// Generate traffic from a scenario instead of a pcap
        #[arg(long, conflicts_with = "pcap")]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        switch_id: u16,
        #[arg(long, default_value_t = 5)]
        connect_attempts: u32,
        #[arg(long, default_value_t = 2000)]
        reply_timeout_ms: u64,
    },
}

fn load_bundle_arg(arg: Option<&str>) -> Result<ModelBundle> {
    match arg {
        None | Some("handcrafted") => Ok(make_handcrafted_bundle()),
        Some(p) => load_bundle(p).with_context(|| format!("loading bundle {p}")),
    }
}

fn apply_tau(bundle: &mut ModelBundle, tau: Option<f64>) -> Result<()> {
    if let Some(t) = tau {
        bundle.thresholds = precompute_thresholds(1.0 - t, t, &bundle.linear_exit.logit_q)?;
    }
    Ok(())
}

fn controller_config(bundle: &ModelBundle) -> ControllerConfig {
    ControllerConfig {
        tau_benign: bundle.thresholds.tau_benign,
        tau_attack: bundle.thresholds.tau_attack,
        ..Default::default()
    }
}

fn cmd_simulate(
    scenario: Option<&Path>,
    mitigation: Option<OnOff>,
    bundle: Option<String>,
    tau: Option<f64>,
    seed: Option<u64>,
    out: &Path,
    actions: Option<&Path>,
) -> Result<()> {
    let mut scn = match scenario {
        Some(p) => Scenario::load(p).with_context(|| format!("loading scenario {}", p.display()))?,
        None => Scenario::default_scenario(),
    };
    if let Some(m) = mitigation {
        scn.mitigation = matches!(m, OnOff::On);
    }
    if let Some(b) = bundle {
        scn.bundle = b;
    }
    if tau.is_some() {
        scn.tau = tau;
    }
    if let Some(s) = seed {
        scn.seed = s;
    }
    let t = run_scenario(&scn)?;
    write_metrics(&t, out)?;
    if let Some(a) = actions {
        write_action_summary(&t, a)?;
    }
    let base = t.mean_goodput(2, 10);
    let late = t.mean_goodput(12, t.rows.len() as u32);
    println!(
        "mitigation={} seconds={} goodput[2,10)={:.0} goodput[12,end)={:.0} controller_messages={} actions={:?}",
        if scn.mitigation { "on" } else { "off" },
        t.rows.len(),
        base,
        late,
        t.controller_messages,
        action_counts(&t)
    );
    Ok(())
}

fn cmd_eval(pcap: &Path, labels: &Path, bundle: Option<&str>, taus: &[f64], out: Option<&Path>) -> Result<()> {
    if taus.is_empty() {
        bail!("empty tau list");
    }
    let recs = read_trace_all(pcap).with_context(|| format!("reading {}", pcap.display()))?;
    let labels = read_labels(labels)?;
    let b = Arc::new(load_bundle_arg(bundle)?);
    let rows = evaluate(&recs, &labels, b, taus)?;
    match out {
        Some(p) => write_eval_csv(&rows, File::create(p)?)?,
        None => write_eval_csv(&rows, io::stdout().lock())?,
    }
    Ok(())
}

fn cmd_controllerd(listen: &str, bundle: Option<&str>, tau: Option<f64>, reverify: Option<u32>) -> Result<()> {
    let mut b = load_bundle_arg(bundle)?;
    apply_tau(&mut b, tau)?;
    let mut cfg = controller_config(&b);
    if let Some(p) = reverify {
        cfg.reverify_period_packets = p;
    }
    let ctl = Arc::new(Controller::new(Arc::new(b), cfg)?);
    let server = ControllerServer::bind(listen, ctl).with_context(|| format!("binding {listen}"))?;
    println!("listening on {}", server.local_addr()?);
    io::stdout().flush()?;
    server.serve()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_switchd(
    controller: &str,
    bundle: Option<&str>,
    tau: Option<f64>,
    pcap: Option<&Path>,
    scenario: Option<&Path>,
    switch_id: u16,
    attempts: u32,
    reply_timeout_ms: u64,
) -> Result<()> {
    let mut b = load_bundle_arg(bundle)?;
    apply_tau(&mut b, tau)?;
    let packets = match (pcap, scenario) {
        (Some(p), _) => read_trace_all(p).with_context(|| format!("reading {}", p.display()))?,
        (None, Some(s)) => scenario_packets(&Scenario::load(s)?)?,
        (None, None) => scenario_packets(&Scenario::default_scenario())?,
    };
    let policy = Backoff {
        attempts: attempts.max(1),
        ..Default::default()
    };
    let link = match connect_with_backoff(controller, policy) {
        Ok(s) => Some(s),
        Err(e) => {
            eprintln!("warning: {e}; running without a controller");
            None
        }
    };
    let mut sw = SwitchState::new(switch_id, Arc::new(b));
    info!("replaying {} packets", packets.len());
    let st = run_switch(&mut sw, &packets, link, Duration::from_millis(reply_timeout_ms));
    println!(
        "packets={} forwarded={} dropped={} reports_sent={} actions_received={} reply_timeouts={} connected={}",
        st.packets, st.forwarded, st.dropped, st.reports_sent, st.actions_received, st.reply_timeouts, st.connected
    );
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Simulate {
            scenario,
            mitigation,
            bundle,
            tau,
            seed,
            out,
            actions,
        } => cmd_simulate(scenario.as_deref(), mitigation, bundle, tau, seed, &out, actions.as_deref()),
        Command::Eval {
            pcap,
            labels,
            bundle,
            taus,
            out,
        } => cmd_eval(&pcap, &labels, bundle.as_deref(), &taus, out.as_deref()),
        Command::GenTrace {
            pcap,
            labels,
            seed,
            scale,
        } => (|| {
            let (recs, lab) = generate_labeled_trace(seed, scale);
            write_trace(&pcap, &recs)?;
            std::fs::write(&labels, format_labels(&lab))?;
            println!("packets={} flows={}", recs.len(), lab.len());
            Ok(())
        })(),
        Command::InspectBundle { path } => load_bundle(&path)
            .with_context(|| format!("loading bundle {}", path.display()))
            .map(|b| print!("{}", describe_bundle(&b))),
        Command::MakeTestBundle { out, zero_controller } => {
            let b = if zero_controller {
                make_zero_controller_bundle()
            } else {
                make_handcrafted_bundle()
            };
            save_bundle(&b, &out).with_context(|| format!("writing {}", out.display()))
        }
        Command::Controllerd {
            listen,
            bundle,
            tau,
            reverify_period,
        } => cmd_controllerd(&listen, bundle.as_deref(), tau, reverify_period),
        Command::Switchd {
            controller,
            bundle,
            tau,
            pcap,
            scenario,
            switch_id,
            connect_attempts,
            reply_timeout_ms,
        } => cmd_switchd(
            &controller,
            bundle.as_deref(),
            tau,
            pcap.as_deref(),
            scenario.as_deref(),
            switch_id,
            connect_attempts,
            reply_timeout_ms,
        ),
    };
    if let Err(e) = res {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
