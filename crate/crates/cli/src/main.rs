use std::fs::File;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use hector_core::domain::PipelineConfig;
use hector_core::eval::{accuracy, cohen_kappa, evaluate_sessions, write_report, ConfusionMatrix};
use hector_core::inference::ModelSpec;
use hector_core::osr::{fit_temperature, mean_nll, read_validation_csv};
use hector_core::protocol::Server;
use hector_core::service::{Controller, ServiceSettings};
use hector_core::session::{export_dataset, load_sessions, MANIFEST_FILE};

#[derive(Parser)]
#[command(
    name = "hector",
    version,
    about = "Real-time endoscopic MES scoring engine"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score a video source, headless or behind the control/event sockets.
    Run {
        /// Video file, PNG directory, `synth:<spec>`, optionally prefixed `live:`.
        #[arg(long)]
        source: Option<String>,
        /// TOML pipeline config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `stub:SEED` or `remote:HOST:PORT`.
        #[arg(long, default_value = "stub:42")]
        model: ModelSpec,
        /// Control socket address. Without it the run is headless.
        #[arg(long)]
        listen: Option<SocketAddr>,
        /// Event socket address; defaults to the control port + 1.
        #[arg(long, requires = "listen")]
        events: Option<SocketAddr>,
        #[arg(long, env = "HECTOR_DATA_DIR", default_value = "hector-data")]
        data_dir: PathBuf,
    },
    /// Evaluate closed sessions that have ground-truth label files.
    Eval {
        #[arg(long)]
        sessions: PathBuf,
        /// Where auroc.csv and the ROC curves go; defaults to <sessions>/report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export selected frames and their final labels as a training set.
    Export {
        #[arg(long)]
        sessions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the softmax temperature on a held-out `l0,l1,l2,l3,label` CSV.
    Calibrate {
        #[arg(long)]
        validation: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run {
            source,
            config,
            model,
            listen,
            events,
            data_dir,
        } => run(source, config.as_deref(), model, listen, events, data_dir),
        Command::Eval { sessions, out } => {
            let out = out.unwrap_or_else(|| sessions.join("report"));
            eval(&sessions, &out)
        }
        Command::Export { sessions, out } => export(&sessions, &out),
        Command::Calibrate { validation, out } => calibrate(&validation, &out),
    }
}

fn run(
    source: Option<String>,
    config: Option<&Path>,
    model: ModelSpec,
    listen: Option<SocketAddr>,
    events: Option<SocketAddr>,
    data_dir: PathBuf,
) -> Result<()> {
    let default_config = match config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    let controller = Arc::new(Controller::new(ServiceSettings {
        data_dir,
        model,
        default_config,
    }));

    let Some(control) = listen else {
        let Some(source) = source else {
            bail!("--source is required without --listen");
        };
        controller.start(&source, None)?;
        let bundle = controller.wait_for_review()?;
        // Nobody is around to review a headless run; close it as scored.
        controller.review_submit(&[], &[])?;
        println!("{}", bundle.to_json());
        return Ok(());
    };

    let events = events.unwrap_or_else(|| {
        let mut a = control;
        // An ephemeral control port gets an ephemeral event port too.
        if control.port() != 0 {
            a.set_port(control.port().wrapping_add(1));
        }
        a
    });
    let (control, events) = Server::bind(controller.clone(), control, events)
        .context("binding sockets")?
        .spawn()?;
    println!("control {control}");
    println!("events {events}");
    if let Some(source) = source {
        let id = controller.start(&source, None)?;
        log::info!("session {id} started");
    }
    loop {
        std::thread::park();
    }
}

fn print_matrix(title: &str, cm: &ConfusionMatrix) {
    if cm.total() == 0 {
        println!("{title}: no labelled pairs");
        return;
    }
    println!("{title} (rows true, columns predicted)");
    println!("       0     1     2     3");
    for (t, row) in cm.counts.iter().enumerate() {
        println!(
            "{t} {:>5} {:>5} {:>5} {:>5}",
            row[0], row[1], row[2], row[3]
        );
    }
    let acc = accuracy(cm).expect("non-empty");
    let kappa = cohen_kappa(cm).expect("non-empty");
    println!("accuracy {acc:.4}  kappa {kappa:.4}");
}

fn eval(sessions: &Path, out: &Path) -> Result<()> {
    let report = evaluate_sessions(sessions)?;
    println!(
        "{:<10} {:>7} {:>8} {:>9} {:>6}",
        "video", "frames", "auroc", "predicted", "true"
    );
    let show =
        |m: Option<hector_core::domain::MesScore>| m.map_or("-".to_string(), |m| m.to_string());
    for v in &report.videos {
        println!(
            "{:<10} {:>7} {:>8} {:>9} {:>6}",
            format!("sess{}", v.session_id),
            v.frames,
            v.auroc.map_or("-".to_string(), |a| format!("{a:.4}")),
            show(v.predicted_mes),
            show(v.true_mes)
        );
    }
    match report.macro_auroc {
        Some(m) => println!("macro AUROC {m:.4}"),
        None => println!("macro AUROC -"),
    }
    if !report.unlabelled.is_empty() {
        println!("skipped without labels: {:?}", report.unlabelled);
    }
    print_matrix("frame MES", &report.frame_confusion);
    print_matrix("video MES", &report.video_confusion);
    write_report(&report, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn export(sessions: &Path, out: &Path) -> Result<()> {
    let loaded = load_sessions(sessions)?;
    let closed: Vec<_> = loaded.into_iter().filter(|(r, _)| r.is_closed()).collect();
    let examples = export_dataset(&closed, out)?;
    let corrected = examples
        .iter()
        .filter(|e| e.source == hector_core::session::LabelSource::ClinicianCorrected)
        .count();
    println!(
        "exported {} frames from {} sessions ({corrected} corrected) to {}",
        examples.len(),
        closed.len(),
        out.join(MANIFEST_FILE).display()
    );
    Ok(())
}

fn calibrate(validation: &Path, out: &Path) -> Result<()> {
    let set = read_validation_csv(
        File::open(validation).with_context(|| format!("opening {}", validation.display()))?,
    )?;
    let model = fit_temperature(&set)?;
    let t = model.temperature();
    std::fs::write(out, model.to_config_line())?;
    println!(
        "temperature {t:.4} on {} examples: NLL {:.4} -> {:.4}",
        set.len(),
        mean_nll(&set, 1.0),
        mean_nll(&set, t)
    );
    Ok(())
}
