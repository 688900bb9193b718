//! CSV and text persistence of generated datasets.
//!
//! A dataset directory holds `graph.csv`, `speeds.csv`, `events.csv` and
//! `provenance.txt`. Rows are link-major and time-ascending; floats are
//! written in shortest round-trip form.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::synthgen::{
    CongestionEvent, DurationModel, GroundTruthIntensity, LinkEvents, RoadGraph, Simulation, TrafficStateWindow,
};

pub const GRAPH_FILE: &str = "graph.csv";
pub const SPEEDS_FILE: &str = "speeds.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const PROVENANCE_FILE: &str = "provenance.txt";

pub const GRAPH_HEADER: [&str; 3] = ["src", "dst", "weight"];
pub const SPEEDS_HEADER: [&str; 4] = ["link", "slot", "speed", "condition"];
pub const EVENTS_HEADER: [&str; 5] = ["link", "t_occ_min", "duration_min", "time_of_day", "day_of_week"];

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

fn write_rows<const K: usize>(path: &Path, header: [&str; K], rows: impl Iterator<Item = [String; K]>) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let got = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if got.iter().collect::<Vec<_>>() != header {
        return Err(Error::Data(format!(
            "{}: expected header {}, found {}",
            path.display(),
            header.join(","),
            got.iter().collect::<Vec<_>>().join(",")
        )));
    }
    r.records().map(|rec| rec.map_err(|e| csv_err(path, e))).collect()
}

fn field<T: FromStr>(path: &Path, rec: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    let raw = rec.get(i).unwrap_or("");
    raw.parse().map_err(|_| {
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        Error::Data(format!("{}:{line}: bad {name} `{raw}`", path.display()))
    })
}

pub fn write_graph(path: &Path, graph: &RoadGraph) -> Result<()> {
    let n = graph.n_links;
    let a = graph.adjacency.data();
    let rows = (0..n * n)
        .filter(|&k| a[k] > 0.0)
        .map(|k| [(k / n).to_string(), (k % n).to_string(), a[k].to_string()]);
    write_rows(path, GRAPH_HEADER, rows)
}

/// Reads the adjacency as stored; edges are its off-diagonal non-zeros.
pub fn read_graph(path: &Path) -> Result<RoadGraph> {
    let rows = read_rows(path, &GRAPH_HEADER)?;
    let mut entries = Vec::with_capacity(rows.len());
    for rec in &rows {
        let s: usize = field(path, rec, 0, "src")?;
        let d: usize = field(path, rec, 1, "dst")?;
        let w: f64 = field(path, rec, 2, "weight")?;
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::Data(format!("{}: weight {w} of ({s},{d}) is invalid", path.display())));
        }
        entries.push((s, d, w));
    }
    let n = entries.iter().map(|&(s, d, _)| s.max(d) + 1).max().unwrap_or(0);
    if n == 0 {
        return Err(Error::Data(format!("{}: empty graph", path.display())));
    }
    let mut adj = vec![0.0; n * n];
    let mut edges = Vec::new();
    for (s, d, w) in entries {
        adj[s * n + d] = w;
        if s != d && w > 0.0 {
            edges.push((s, d));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    Ok(RoadGraph {
        n_links: n,
        edges,
        adjacency: Tensor::new(&[n, n], adj)?,
    })
}

pub fn write_speeds(path: &Path, states: &TrafficStateWindow) -> Result<()> {
    let rows = (0..states.n_links).flat_map(|n| {
        (0..states.n_slots).map(move |s| {
            [
                n.to_string(),
                s.to_string(),
                states.speed(n, s).to_string(),
                states.condition(n, s).to_string(),
            ]
        })
    });
    write_rows(path, SPEEDS_HEADER, rows)
}

/// Reads a complete link × slot grid. Free-flow speeds are not stored; each
/// link's maximum observed speed stands in for it.
pub fn read_speeds(path: &Path, n_links: usize) -> Result<TrafficStateWindow> {
    let rows = read_rows(path, &SPEEDS_HEADER)?;
    if n_links == 0 || rows.len() % n_links != 0 {
        return Err(Error::Data(format!(
            "{}: {} rows do not form a grid over {n_links} links",
            path.display(),
            rows.len()
        )));
    }
    let n_slots = rows.len() / n_links;
    let mut speeds = vec![0.0f64; rows.len()];
    let mut condition = vec![0u8; rows.len()];
    for (k, rec) in rows.iter().enumerate() {
        let link: usize = field(path, rec, 0, "link")?;
        let slot: usize = field(path, rec, 1, "slot")?;
        if link != k / n_slots || slot != k % n_slots {
            return Err(Error::Data(format!(
                "{}: row {} is ({link},{slot}), expected ({},{})",
                path.display(),
                k + 2,
                k / n_slots,
                k % n_slots
            )));
        }
        speeds[k] = field(path, rec, 2, "speed")?;
        condition[k] = field(path, rec, 3, "condition")?;
        if condition[k] > 1 || !speeds[k].is_finite() {
            return Err(Error::Data(format!("{}: row {} has invalid values", path.display(), k + 2)));
        }
    }
    let free_flow = speeds
        .chunks(n_slots.max(1))
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok(TrafficStateWindow {
        n_links,
        n_slots,
        speeds,
        condition,
        free_flow,
    })
}

pub fn write_events(path: &Path, events: &[LinkEvents]) -> Result<()> {
    let rows = events.iter().flatten().map(|e| {
        [
            e.link.to_string(),
            e.t_occ.to_string(),
            e.duration.to_string(),
            e.time_of_day().to_string(),
            e.day_of_week().to_string(),
        ]
    });
    write_rows(path, EVENTS_HEADER, rows)
}

pub fn read_events(path: &Path, n_links: usize) -> Result<Vec<LinkEvents>> {
    let rows = read_rows(path, &EVENTS_HEADER)?;
    let mut events: Vec<LinkEvents> = vec![Vec::new(); n_links];
    for rec in &rows {
        let link: usize = field(path, rec, 0, "link")?;
        let t: f64 = field(path, rec, 1, "t_occ_min")?;
        let d: f64 = field(path, rec, 2, "duration_min")?;
        let tod: usize = field(path, rec, 3, "time_of_day")?;
        let dow: usize = field(path, rec, 4, "day_of_week")?;
        if link >= n_links {
            return Err(Error::Data(format!("{}: link {link} not in graph", path.display())));
        }
        let e = CongestionEvent::new(link, t, d);
        if e.time_of_day() != tod || e.day_of_week() != dow {
            return Err(Error::Data(format!(
                "{}: periodic fields of event at {t} on link {link} disagree with its time",
                path.display()
            )));
        }
        events[link].push(e);
    }
    crate::synthgen::validate_events(&events)?;
    Ok(events)
}

fn join(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

/// Seed and generator parameters of a simulated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub scenario: String,
    pub seed: u64,
    pub links: usize,
    pub days: f64,
    pub truth: GroundTruthIntensity,
}

impl Provenance {
    pub fn from_simulation(sim: &Simulation, scenario: &str) -> Self {
        Self {
            scenario: scenario.to_string(),
            seed: sim.seed,
            links: sim.graph.n_links,
            days: sim.horizon_hours / 24.0,
            truth: sim.truth.clone(),
        }
    }

    pub fn to_text(&self) -> String {
        let t = &self.truth;
        format!(
            "generator=stgnpp-synthgen\nscenario={}\nseed={}\nlinks={}\ndays={}\nbase_rates={}\nprofile={}\nbeta={}\ngamma={}\nduration_log_mean={}\nduration_log_sd={}\nduration_peak_multiplier={}\n",
            self.scenario,
            self.seed,
            self.links,
            self.days,
            join(&t.base_rates),
            join(&t.profile),
            t.beta,
            t.gamma,
            t.durations.log_mean,
            t.durations.log_sd,
            t.durations.peak_multiplier
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = std::collections::BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("bad provenance line `{line}`")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Data(format!("provenance lacks `{k}`")));
        fn num<T: FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Data(format!("bad provenance value for {k}: `{v}`")))
        }
        let list = |k: &str| -> Result<Vec<f64>> { get(k)?.split(',').map(|v| num(k, v)).collect() };
        Ok(Self {
            scenario: get("scenario")?.clone(),
            seed: num("seed", get("seed")?)?,
            links: num("links", get("links")?)?,
            days: num("days", get("days")?)?,
            truth: GroundTruthIntensity {
                base_rates: list("base_rates")?,
                profile: list("profile")?,
                beta: num("beta", get("beta")?)?,
                gamma: num("gamma", get("gamma")?)?,
                durations: DurationModel {
                    log_mean: num("duration_log_mean", get("duration_log_mean")?)?,
                    log_sd: num("duration_log_sd", get("duration_log_sd")?)?,
                    peak_multiplier: num("duration_peak_multiplier", get("duration_peak_multiplier")?)?,
                },
            },
        })
    }
}

/// Writes the four dataset files into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, sim: &Simulation, scenario: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_graph(&dir.join(GRAPH_FILE), &sim.graph)?;
    write_speeds(&dir.join(SPEEDS_FILE), &sim.states)?;
    write_events(&dir.join(EVENTS_FILE), &sim.events)?;
    let p = dir.join(PROVENANCE_FILE);
    fs::write(&p, Provenance::from_simulation(sim, scenario).to_text()).map_err(|e| Error::io(&p, e))
}

/// Graph, speeds and events stored in `dir`.
pub fn read_dataset(dir: &Path) -> Result<(RoadGraph, TrafficStateWindow, Vec<LinkEvents>)> {
    let graph = read_graph(&dir.join(GRAPH_FILE))?;
    let states = read_speeds(&dir.join(SPEEDS_FILE), graph.n_links)?;
    let events = read_events(&dir.join(EVENTS_FILE), graph.n_links)?;
    Ok((graph, states, events))
}

pub fn read_provenance(dir: &Path) -> Result<Provenance> {
    let p = dir.join(PROVENANCE_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Provenance::parse(&text)
}
