use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use stgnpp::checkpoint::ModelCheckpoint;
use stgnpp::config::RunConfig;
use stgnpp::dataset::{Dataset, Split};
use stgnpp::model::Stgnpp;
use stgnpp::predict::{baseline_ha_detailed, evaluate_detailed, predict_window, ScoredPrediction};
use stgnpp::synthgen::simulate as run_simulation;
use stgnpp::train::{log_csv, train as run_training};
use stgnpp::{io, selftest as checks, Error, Result};

use crate::Common;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const MODEL_METRICS_FILE: &str = "metrics_model.txt";
pub const HA_METRICS_FILE: &str = "metrics_ha.txt";
pub const PAIRS_FILE: &str = "predictions_test.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const THREADS_ENV: &str = "STGNPP_THREADS";

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Param(_) | Error::Shape { .. } | Error::Domain(_) | Error::Index(_) => 2,
        Error::Io { .. } => 3,
        _ => 4,
    }
}

pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Param(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Param(format!("thread pool: {e}")))
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            RunConfig::parse_text(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.data {
        cfg.data = Some(d.clone());
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str, cmd: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Param(format!("{cmd} needs --{flag} (or `{flag}=` in the config)")))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_dataset(dir: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let (graph, states, events) = io::read_dataset(dir)?;
    Dataset::new(graph, events, states, cfg.window_slots, cfg.fractions())
}

fn load_checkpoint(path: &Path) -> Result<(Stgnpp, RunConfig)> {
    ModelCheckpoint::load(path)?.to_model()
}

pub fn simulate(common: &Common, links: Option<usize>, days: Option<f64>, scenario: Option<&str>) -> Result<u8> {
    let mut cfg = run_config(common)?;
    if let Some(l) = links {
        cfg.links = l;
    }
    if let Some(d) = days {
        cfg.days = d;
    }
    if let Some(s) = scenario {
        cfg.scenario = s.parse()?;
    }
    cfg.validate()?;
    let out = required(&cfg.out, "out", "simulate")?;
    let sim = run_simulation(cfg.scenario, cfg.links, cfg.days, cfg.seed)?;
    io::write_dataset(out, &sim, &cfg.scenario.to_string())?;
    let n_events: usize = sim.events.iter().map(Vec::len).sum();
    println!(
        "wrote {n_events} events on {} links over {} days to {}",
        cfg.links,
        cfg.days,
        out.display()
    );
    Ok(0)
}

pub fn train(common: &Common, epochs: Option<usize>) -> Result<u8> {
    let mut cfg = run_config(common)?;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let mut model = match &common.checkpoint {
        Some(path) => {
            let (model, saved) = load_checkpoint(path)?;
            // The architecture and windowing come from the checkpoint.
            cfg = RunConfig {
                d_model: saved.d_model,
                n_heads: saved.n_heads,
                n_stacks: saved.n_stacks,
                gcn_layers: saved.gcn_layers,
                adaptive_dim: saved.adaptive_dim,
                window_slots: saved.window_slots,
                flow_layers: saved.flow_layers,
                hazard_hidden: saved.hazard_hidden,
                ..cfg
            };
            Some(model)
        }
        None => None,
    };
    cfg.validate()?;
    let data = required(&cfg.data, "data", "train")?;
    let out = required(&cfg.out, "out", "train")?.to_path_buf();
    let dataset = load_dataset(data, &cfg)?;
    let mut model = match model.take() {
        Some(m) if m.cfg.n_links != dataset.n_links() => {
            return Err(Error::Data(format!(
                "checkpoint is for {} links, dataset has {}",
                m.cfg.n_links,
                dataset.n_links()
            )))
        }
        Some(m) => m,
        None => Stgnpp::new(cfg.model(dataset.n_links()), cfg.seed)?,
    };
    let outcome = run_training(&mut model, &dataset, &cfg.training())?;
    create_dir(&out)?;
    ModelCheckpoint::from_model(&model, &cfg).save(&out.join(CHECKPOINT_FILE))?;
    write_file(&out.join(LOG_FILE), &log_csv(&outcome.log))?;
    write_file(&out.join(CONFIG_FILE), &cfg.to_string())?;
    if outcome.skipped_windows > 0 {
        log::warn!("{} training windows had no transition", outcome.skipped_windows);
    }
    let best_nll = match outcome.best_epoch {
        0 => outcome.initial.nll,
        e => outcome.log[e - 1].val_nll,
    };
    println!(
        "best epoch {} (validation nll {best_nll}); checkpoint written to {}",
        outcome.best_epoch,
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(0)
}

fn pairs_csv(rows: &[ScoredPrediction]) -> String {
    let mut s = String::from("end_slot,link,true_t_min,pred_t_min,true_d_min,pred_d_min\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.end_slot, r.link, r.true_t, r.pred_t, r.true_d, r.pred_d
        ));
    }
    s
}

pub fn eval(common: &Common) -> Result<u8> {
    let cfg = run_config(common)?;
    let ckpt = required(&common.checkpoint, "checkpoint", "eval")?;
    let (model, saved) = load_checkpoint(ckpt)?;
    let data = required(&cfg.data, "data", "eval")?;
    let dataset = load_dataset(data, &saved)?;
    if dataset.n_links() != model.cfg.n_links {
        return Err(Error::Data(format!(
            "checkpoint is for {} links, dataset has {}",
            model.cfg.n_links,
            dataset.n_links()
        )));
    }
    let (report, rows) = evaluate_detailed(&model, &dataset, Split::Test)?;
    let (ha, _) = baseline_ha_detailed(&dataset, Split::Test)?;
    match &cfg.out {
        Some(out) => {
            create_dir(out)?;
            write_file(&out.join(MODEL_METRICS_FILE), &report.to_string())?;
            write_file(&out.join(HA_METRICS_FILE), &ha.to_string())?;
            write_file(&out.join(PAIRS_FILE), &pairs_csv(&rows))?;
            println!("model: mae_t={} mae_d={} nll={}", report.mae_t, report.mae_d, report.nll);
            println!("ha:    mae_t={} mae_d={} nll={}", ha.mae_t, ha.mae_d, ha.nll);
        }
        None => {
            print!("# model\n{report}# historical average\n{ha}");
        }
    }
    Ok(0)
}

pub fn predict(common: &Common, end_slot: Option<usize>) -> Result<u8> {
    let cfg = run_config(common)?;
    let ckpt = required(&common.checkpoint, "checkpoint", "predict")?;
    let (model, saved) = load_checkpoint(ckpt)?;
    let data = required(&cfg.data, "data", "predict")?;
    let (graph, states, events) = io::read_dataset(data)?;
    let end = end_slot.unwrap_or(states.n_slots);
    let dataset = Dataset::new(graph, events, states, saved.window_slots, saved.fractions())?;
    if dataset.n_links() != model.cfg.n_links {
        return Err(Error::Data(format!(
            "checkpoint is for {} links, dataset has {}",
            model.cfg.n_links,
            dataset.n_links()
        )));
    }
    let sample = dataset.sample(end)?;
    let preds = predict_window(&model, &dataset, &sample)?;
    if preds.is_empty() {
        return Err(Error::Data(format!("window ending at slot {end} holds no events")));
    }
    let mut csv = String::from("link,t_next_min,d_next_min\n");
    for p in &preds {
        csv.push_str(&format!("{},{},{}\n", p.link, p.t_next, p.d_next));
    }
    match &cfg.out {
        Some(out) => {
            create_dir(out)?;
            write_file(&out.join(PREDICTIONS_FILE), &csv)?;
            println!("{} predictions written to {}", preds.len(), out.join(PREDICTIONS_FILE).display());
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(csv.as_bytes())
                .map_err(|e| Error::io(Path::new("<stdout>"), e))?;
        }
    }
    Ok(0)
}

pub fn selftest(common: &Common) -> Result<u8> {
    let seed = common.seed.unwrap_or(0);
    let mut failed = 0;
    for c in checks::run_all(seed)? {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        failed += usize::from(!c.passed);
    }
    Ok(if failed == 0 { 0 } else { 1 })
}
