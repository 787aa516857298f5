//! Subcommand implementations. Each returns the files it wrote, primary
//! output first.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use confgen::diffcore::{read_checkpoint, write_checkpoint};
use confgen::dynamics::{DynamicsConfig, DynamicsNet};
use confgen::etm::{energy, train_etm_with, ConformationDataset, EnergyModel, EtmConfig, EtmTrainConfig};
use confgen::flow::{train_flow_with, DistanceDataset, FlowModel, FlowSettings, FlowTrainConfig, TrainReport};
use confgen::geometry::{pairwise_distances, parse_xyz, write_xyz};
use confgen::metrics::{cov_from_matrix, diversity, junk_from_matrix, mat_from_matrix, mmd_report, rmsd_matrix, Bandwidth, EdgeMmd};
use confgen::sampler::{sample_many, SampleRecord};
use confgen::synth::synthesize;
use confgen::{expand_graph, parse_dataset, rng, Conformation, Error, MolecularGraph, MoleculeRecord, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{existing, required, RunConfig};
use crate::report::{aggregate, Diversity, MmdRow, MmdSettings, MoleculeRow, Report, SweepPoint, REPORT_VERSION};

/// Seed tags for streams owned by the driver.
mod tag {
    pub const FLOW_INIT: u64 = 101;
    pub const ETM_INIT: u64 = 102;
    pub const FLOW_TRAIN: u64 = 103;
    pub const ETM_TRAIN: u64 = 104;
}

pub const FLOW_KIND: &str = "flow";
pub const ETM_KIND: &str = "etm";

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))
}

#[derive(Serialize, Deserialize)]
struct FlowHyper {
    dynamics: DynamicsConfig,
    flow: FlowSettings,
}

#[derive(Serialize, Deserialize)]
struct EtmHyper {
    etm: EtmConfig,
}

pub fn save_flow(path: &Path, m: &FlowModel, seed: u64) -> Result<()> {
    let hyper = serde_json::to_value(FlowHyper { dynamics: m.net.config, flow: m.settings })?;
    write_checkpoint(path, FLOW_KIND, hyper, seed, &m.net.params)
}

pub fn save_etm(path: &Path, m: &EnergyModel, seed: u64) -> Result<()> {
    let hyper = serde_json::to_value(EtmHyper { etm: m.config })?;
    write_checkpoint(path, ETM_KIND, hyper, seed, &m.params)
}

fn checkpoint_error(path: &Path, message: String) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), message }
}

/// Architecture and integration settings come from the checkpoint, so a
/// model is always evaluated on the grid it was trained with.
pub fn load_flow(path: &Path) -> Result<FlowModel> {
    let (manifest, params) = read_checkpoint(path)?;
    if manifest.kind != FLOW_KIND {
        return Err(checkpoint_error(path, format!("expected a {FLOW_KIND} checkpoint, found `{}`", manifest.kind)));
    }
    let h: FlowHyper = serde_json::from_value(manifest.hyperparameters).map_err(|e| checkpoint_error(path, e.to_string()))?;
    h.flow.validate()?;
    Ok(FlowModel {
        net: DynamicsNet::from_params(h.dynamics, params)?,
        settings: h.flow,
    })
}

pub fn load_etm(path: &Path) -> Result<EnergyModel> {
    let (manifest, params) = read_checkpoint(path)?;
    if manifest.kind != ETM_KIND {
        return Err(checkpoint_error(path, format!("expected an {ETM_KIND} checkpoint, found `{}`", manifest.kind)));
    }
    let h: EtmHyper = serde_json::from_value(manifest.hyperparameters).map_err(|e| checkpoint_error(path, e.to_string()))?;
    EnergyModel::from_params(h.etm, params)
}

/// Fresh flow for the configured architecture and master seed.
pub fn init_flow(cfg: &RunConfig) -> Result<FlowModel> {
    FlowModel::new(cfg.dynamics, cfg.flow, rng::derive(cfg.master_seed()?, &[tag::FLOW_INIT]))
}

pub fn init_etm(cfg: &RunConfig) -> Result<EnergyModel> {
    EnergyModel::new(cfg.etm, rng::derive(cfg.master_seed()?, &[tag::ETM_INIT]))
}

fn flow_checkpoint_path(cfg: &RunConfig) -> Result<PathBuf> {
    match (&cfg.paths.flow_checkpoint, &cfg.paths.checkpoint_dir) {
        (Some(p), _) => Ok(p.clone()),
        (None, Some(dir)) => Ok(dir.join("flow.ckpt")),
        (None, None) => Err(Error::Config("missing path: set paths.flow_checkpoint or paths.checkpoint_dir".into())),
    }
}

fn etm_checkpoint_path(cfg: &RunConfig) -> Result<PathBuf> {
    match (&cfg.paths.etm_checkpoint, &cfg.paths.checkpoint_dir) {
        (Some(p), _) => Ok(p.clone()),
        (None, Some(dir)) => Ok(dir.join("etm.ckpt")),
        (None, None) => Err(Error::Config("missing path: set paths.etm_checkpoint or paths.checkpoint_dir".into())),
    }
}

fn must_exist(path: PathBuf, what: &str) -> Result<PathBuf> {
    if !path.is_file() {
        return Err(Error::Config(format!("{what} {} does not exist", path.display())));
    }
    Ok(path)
}

pub fn synth(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let out = required(&cfg.paths.dataset, "dataset")?;
    let records = synthesize(&cfg.synth.spec(cfg.master_seed()?))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    confgen::molgraph::write_dataset(out, &records)?;
    log::info!("wrote {} molecules to {}", records.len(), out.display());
    Ok(vec![out.to_path_buf()])
}

pub fn preprocess(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let records = parse_dataset(existing(&cfg.paths.dataset, "dataset")?)?;
    let mut w = create(out)?;
    for r in &records {
        let g = expand_graph(&r.graph)?;
        let edges: Vec<_> = g
            .edges()
            .iter()
            .map(|e| json!({"u": e.u, "v": e.v, "bond": e.bond.name()}))
            .collect();
        let distances = r
            .conformations
            .iter()
            .map(|c| pairwise_distances(c, &g))
            .collect::<Result<Vec<_>>>()?;
        let atoms: Vec<&str> = g.atoms().iter().map(|a| a.symbol()).collect();
        serde_json::to_writer(&mut w, &json!({"id": r.id, "atoms": atoms, "edges": edges, "distances": distances}))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(vec![out.to_path_buf()])
}

fn write_history(path: &Path, report: &TrainReport, offset: usize) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["step", "loss"]).map_err(csv_err)?;
    for (step, loss) in &report.history {
        w.serialize((offset + step, loss)).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn finish_training(report: &TrainReport, start: usize) -> Result<()> {
    match &report.diverged {
        Some(d) => Err(Error::Diverged {
            step: start + d.step,
            reason: d.reason.clone(),
        }),
        None => Ok(()),
    }
}

pub fn train_flow(cfg: &RunConfig, resume: Option<&Path>, history: Option<&Path>) -> Result<Vec<PathBuf>> {
    let seed = cfg.master_seed()?;
    let records = parse_dataset(existing(&cfg.paths.dataset, "dataset")?)?;
    let data = DistanceDataset::from_records(&records)?;
    let dir = required(&cfg.paths.checkpoint_dir, "checkpoint_dir")?;
    fs::create_dir_all(dir)?;
    let mut model = match resume {
        Some(p) => load_flow(p)?,
        None => init_flow(cfg)?,
    };
    let start = model.net.params.step() as usize;
    let tc = FlowTrainConfig {
        batch_size: cfg.flow_train.batch_size,
        lr: cfg.flow_train.lr,
        max_steps: cfg.flow_train.max_steps,
        seed: rng::derive(seed, &[tag::FLOW_TRAIN, start as u64]),
    };
    let every = cfg.flow_train.checkpoint_every;
    let mut written = Vec::new();
    let report = train_flow_with(&mut model, &data, &tc, |step, loss, m| {
        log::debug!("flow step {} loss {loss}", start + step);
        if every > 0 && step % every == 0 {
            let p = dir.join(format!("flow_step{:06}.ckpt", start + step));
            save_flow(&p, m, seed)?;
            written.push(p);
        }
        Ok(())
    })?;
    let final_path = dir.join("flow.ckpt");
    save_flow(&final_path, &model, seed)?;
    let history = history.map_or_else(|| dir.join("flow_history.csv"), Path::to_path_buf);
    write_history(&history, &report, start)?;
    written.splice(0..0, [final_path, history]);
    finish_training(&report, start)?;
    Ok(written)
}

pub fn train_etm(cfg: &RunConfig, resume: Option<&Path>, history: Option<&Path>) -> Result<Vec<PathBuf>> {
    let seed = cfg.master_seed()?;
    let records = parse_dataset(existing(&cfg.paths.dataset, "dataset")?)?;
    let data = ConformationDataset::from_records(&records)?;
    let flow = load_flow(&must_exist(flow_checkpoint_path(cfg)?, "flow checkpoint")?)?;
    let dir = required(&cfg.paths.checkpoint_dir, "checkpoint_dir")?;
    fs::create_dir_all(dir)?;
    let mut model = match resume {
        Some(p) => load_etm(p)?,
        None => init_etm(cfg)?,
    };
    let start = model.params.step() as usize;
    let tc = EtmTrainConfig {
        batch_size: cfg.etm_train.batch_size,
        lr: cfg.etm_train.lr,
        max_steps: cfg.etm_train.max_steps,
        noise_per_data: cfg.etm_train.noise_per_data,
        seed: rng::derive(seed, &[tag::ETM_TRAIN, start as u64]),
    };
    let every = cfg.etm_train.checkpoint_every;
    let mut written = Vec::new();
    let report = train_etm_with(&mut model, &flow, &data, &cfg.sampler.assembly, &tc, |step, loss, m| {
        log::debug!("etm step {} loss {loss}", start + step);
        if every > 0 && step % every == 0 {
            let p = dir.join(format!("etm_step{:06}.ckpt", start + step));
            save_etm(&p, m, seed)?;
            written.push(p);
        }
        Ok(())
    })?;
    let final_path = dir.join("etm.ckpt");
    save_etm(&final_path, &model, seed)?;
    let history = history.map_or_else(|| dir.join("etm_history.csv"), Path::to_path_buf);
    write_history(&history, &report, start)?;
    written.splice(0..0, [final_path, history]);
    finish_training(&report, start)?;
    Ok(written)
}

fn jsonl_path(xyz: &Path) -> PathBuf {
    xyz.with_extension("diagnostics.jsonl")
}

struct MoleculeSamples<'a> {
    record: &'a MoleculeRecord,
    graph: MolecularGraph,
    seeds: Vec<u64>,
    samples: Vec<SampleRecord>,
}

pub fn sample(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let seed = cfg.master_seed()?;
    let records = parse_dataset(existing(&cfg.paths.dataset, "dataset")?)?;
    let by_id: BTreeMap<&str, &MoleculeRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let ids: BTreeSet<&str> = if cfg.sample.ids.is_empty() {
        by_id.keys().copied().collect()
    } else {
        cfg.sample.ids.iter().map(String::as_str).collect()
    };
    if let Some(unknown) = ids.iter().find(|id| !by_id.contains_key(*id)) {
        return Err(Error::InvalidArgument(format!("unknown molecule id `{unknown}`")));
    }
    let flow = load_flow(&must_exist(flow_checkpoint_path(cfg)?, "flow checkpoint")?)?;
    let etm = if cfg.sampler.use_etm {
        Some(load_etm(&must_exist(etm_checkpoint_path(cfg)?, "energy checkpoint")?)?)
    } else {
        None
    };
    let out = required(&cfg.paths.output, "output")?;
    let diag_path = cfg.paths.diagnostics.clone().unwrap_or_else(|| jsonl_path(out));

    let ids: Vec<&str> = ids.into_iter().collect();
    let work = |id: &&str| -> Result<MoleculeSamples<'_>> {
        let record = by_id[id];
        let graph = expand_graph(&record.graph)?;
        let n = cfg.sample.n_per_molecule.unwrap_or(2 * record.conformations.len());
        let seeds: Vec<u64> = (0..n).map(|i| rng::sample_seed(seed, id, i)).collect();
        let samples = if n == 0 {
            Vec::new()
        } else {
            sample_many(&flow, etm.as_ref(), &graph, &cfg.sampler, &seeds)?
        };
        Ok(MoleculeSamples { record, graph, seeds, samples })
    };
    let results: Vec<MoleculeSamples<'_>> = pool(cfg.jobs)?.install(|| ids.par_iter().map(work).collect::<Result<_>>())?;

    let mut xyz = create(out)?;
    let mut diag = create(&diag_path)?;
    let molecules: Vec<_> = results
        .iter()
        .map(|m| json!({"id": m.record.id, "n": m.samples.len()}))
        .collect();
    let header = json!({
        "record": "header",
        "format_version": 1,
        "seed": seed,
        "use_etm": cfg.sampler.use_etm,
        "langevin_steps": cfg.sampler.langevin_steps,
        "flow_step": flow.net.params.step(),
        "etm_step": etm.as_ref().map(|e| e.params.step()),
        "molecules": molecules,
    });
    serde_json::to_writer(&mut diag, &header)?;
    diag.write_all(b"\n")?;
    for m in &results {
        for (i, (s, &sd)) in m.samples.iter().zip(&m.seeds).enumerate() {
            write_xyz(&mut xyz, &m.record.id, i, &m.graph, &s.conformation)?;
            let assembled = pairwise_distances(&s.stage_one.conformation, &m.graph)?;
            let residual = assembled
                .iter()
                .zip(&s.stage_one.distances)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let final_energy = etm.as_ref().map(|e| energy(e, &m.graph, &s.conformation)).transpose()?;
            let row = json!({
                "record": "sample",
                "id": m.record.id,
                "sample": i,
                "seed": sd,
                "assembly_max_residual": residual,
                "langevin_aborted": s.langevin_aborted,
                "energy": final_energy,
            });
            serde_json::to_writer(&mut diag, &row)?;
            diag.write_all(b"\n")?;
        }
    }
    xyz.flush()?;
    diag.flush()?;
    Ok(vec![out.to_path_buf(), diag_path])
}

type Frames = BTreeMap<String, Vec<(usize, Conformation)>>;

fn read_generated(path: &Path, refs: &BTreeMap<&str, &MoleculeRecord>) -> Result<Frames> {
    let text = fs::read_to_string(path)?;
    let mut frames: Frames = BTreeMap::new();
    for (id, index, symbols, conf) in parse_xyz(&text)? {
        let Some(r) = refs.get(id.as_str()) else {
            return Err(Error::InvalidArgument(format!(
                "molecule id mismatch: `{id}` in {} is not in the reference dataset",
                path.display()
            )));
        };
        let expected: Vec<&str> = r.graph.atoms().iter().map(|a| a.symbol()).collect();
        if symbols != expected {
            return Err(Error::InvalidArgument(format!(
                "molecule `{id}` sample {index}: atoms {symbols:?} do not match the reference {expected:?}"
            )));
        }
        frames.entry(id).or_default().push((index, conf));
    }
    for (id, list) in frames.iter_mut() {
        list.sort_by_key(|f| f.0);
        if list.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidArgument(format!("molecule `{id}` has duplicate sample indices")));
        }
    }
    Ok(frames)
}

fn score(cfg: &RunConfig, r: &MoleculeRecord, generated: &[Conformation]) -> Result<(MoleculeRow, Vec<EdgeMmd>)> {
    let (ng, nr) = (generated.len(), r.conformations.len());
    if ng == 0 {
        return Ok((MoleculeRow::failed(r.id.clone(), 0, nr, "no generated conformations".into()), Vec::new()));
    }
    if ng != 2 * nr {
        log::warn!("{}: {ng} generated for {nr} reference conformations; coverage protocol expects {}", r.id, 2 * nr);
    }
    if ng < nr {
        log::warn!("{}: MMD protocol expects at least {nr} generated conformations, using {ng}", r.id);
    }
    let g = expand_graph(&r.graph)?;
    let mask = g.heavy_atom_mask();
    let m = rmsd_matrix(generated, &r.conformations, &mask)?;
    let delta = cfg.metrics.delta;
    let sweep = cfg
        .metrics
        .delta_sweep
        .iter()
        .map(|&d| {
            Ok(SweepPoint {
                delta: d,
                cov: cov_from_matrix(&m, nr, d)?,
                junk: junk_from_matrix(&m, d)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let diversity = diversity(generated, &mask).ok().map(|(mean, std)| Diversity { mean, std });
    let used = nr.min(ng);
    let (mmd, mmd_error, edges) = match mmd_report(&generated[..used], &r.conformations, &g, &cfg.metrics.mmd) {
        Ok(rep) => (
            Some(MmdRow {
                single: rep.single,
                pair: rep.pair,
                all: rep.all,
                pair_count: rep.pair_count,
                n_generated_used: used,
            }),
            None,
            rep.per_edge,
        ),
        Err(e) => (None, Some(e.to_string()), Vec::new()),
    };
    let row = MoleculeRow {
        id: r.id.clone(),
        n_generated: ng,
        n_reference: nr,
        error: None,
        cov: Some(cov_from_matrix(&m, nr, delta)?),
        mat: Some(mat_from_matrix(&m, nr)?),
        junk: Some(junk_from_matrix(&m, delta)?),
        sweep,
        diversity,
        mmd,
        mmd_error,
    };
    Ok((row, edges))
}

pub fn eval(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let refs = parse_dataset(existing(&cfg.paths.reference, "reference")?)?;
    let by_id: BTreeMap<&str, &MoleculeRecord> = refs.iter().map(|r| (r.id.as_str(), r)).collect();
    if by_id.len() != refs.len() {
        return Err(Error::InvalidArgument("reference dataset has duplicate molecule ids".into()));
    }
    let frames = read_generated(existing(&cfg.paths.generated, "generated")?, &by_id)?;
    let report_path = required(&cfg.paths.report, "report")?;

    let records: Vec<&MoleculeRecord> = by_id.values().copied().collect();
    let scored: Vec<(MoleculeRow, Vec<EdgeMmd>)> = pool(cfg.jobs)?.install(|| {
        records
            .par_iter()
            .map(|r| {
                let generated: Vec<Conformation> = frames
                    .get(&r.id)
                    .map(|f| f.iter().map(|(_, c)| c.clone()).collect())
                    .unwrap_or_default();
                score(cfg, r, &generated)
            })
            .collect::<Result<_>>()
    })?;
    let rows: Vec<MoleculeRow> = scored.iter().map(|s| s.0.clone()).collect();
    let mmd = &cfg.metrics.mmd;
    let report = Report {
        format_version: REPORT_VERSION,
        delta: cfg.metrics.delta,
        delta_sweep: cfg.metrics.delta_sweep.clone(),
        mmd_settings: MmdSettings {
            kernel: "gaussian".into(),
            bandwidth: match mmd.bandwidth {
                Bandwidth::MedianHeuristic => "median_heuristic".into(),
                Bandwidth::Fixed(s) => format!("fixed({s})"),
            },
            unbiased: mmd.unbiased,
            atom_filter: mmd.atom_filter.clone(),
        },
        aggregate: aggregate(&rows, &cfg.metrics.delta_sweep),
        molecules: rows,
    };
    let mut w = create(report_path)?;
    serde_json::to_writer_pretty(&mut w, &report)?;
    w.write_all(b"\n")?;
    w.flush()?;
    let mut written = vec![report_path.to_path_buf()];

    if let Some(csv_path) = &cfg.paths.edge_csv {
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        let mut w = csv::Writer::from_writer(create(csv_path)?);
        w.write_record(["id", "u", "v", "bond", "mmd"]).map_err(csv_err)?;
        for (row, edges) in &scored {
            for e in edges {
                w.serialize((&row.id, e.u, e.v, &e.bond, e.mmd)).map_err(csv_err)?;
            }
        }
        w.flush()?;
        written.push(csv_path.clone());
    }
    Ok(written)
}
