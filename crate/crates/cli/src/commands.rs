use std::fs;
use std::path::{Path, PathBuf};

use irpim::booster::Mode;
use irpim::engine::{simulate as run_engine, BoosterPolicy, SimConfig, SimTrace};
use irpim::error::{Error, Result};
use irpim::lhr::{finetune, Anchor, FinetuneConfig, FloatWeightLayer, HrLookup};
use irpim::mapping::{
    anneal_seeded, sequential_map, zigzag_map, AnnealConfig, FlipProfile, MappingScore, Scorer, StopReason,
};
use irpim::metrics::hamming;
use irpim::model::{
    auto_tiles, load_workload, read_json, read_topology, read_tensor, write_file, write_tensor, ChipTopology,
    QuantizedTensor, Slot, TaskMapping, Tile, Workload, DEFAULT_BANKS, DEFAULT_CELLS,
};
use irpim::report::{
    ablation_csv, compare_runs, comparison_csv, read_trace, series_csv, to_json_bytes, write_trace, RunStats,
};
use irpim::wds::shift_weights;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::manifest::{LhrSettings, RunManifest};
use crate::{Format, Setup, Strategy};

pub const MAPPING_FILE: &str = "mapping.json";
pub const STATS_FILE: &str = "stats.json";
pub const LHR_FILE: &str = "lhr.json";
pub const WDS_FILE: &str = "wds.json";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// Writes to `out`, or stdout without one.
fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => write_file(p, bytes),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(bytes).map_err(|source| Error::Io {
                path: PathBuf::from("<stdout>"),
                source,
            })
        }
    }
}

// ---- analyze ----

#[derive(Debug, Serialize)]
pub struct TileReport {
    pub rows: [usize; 2],
    pub cols: [usize; 2],
    pub hm: u64,
    pub hr: f64,
}

#[derive(Debug, Serialize)]
pub struct LayerReport {
    pub name: String,
    pub q: u8,
    pub elements: usize,
    pub hm: u64,
    pub hr: f64,
    /// Over the tiles.
    pub hr_max: f64,
    pub hr_average: f64,
    pub tiles: Vec<TileReport>,
}

#[derive(Debug, Serialize)]
pub struct AnalyzeReport {
    pub layers: Vec<LayerReport>,
    /// Over the layers.
    pub hr_max: f64,
    pub hr_average: f64,
}

fn as_matrix(t: &QuantizedTensor) -> [usize; 2] {
    let shape = t.shape();
    let cols = *shape.last().expect("tensors have at least one dimension");
    [t.len() / cols, cols]
}

fn analyze_layer(name: String, t: &QuantizedTensor, geometry: &ChipTopology) -> Result<LayerReport> {
    let h = hamming(t.values(), t.q())?;
    let dims = as_matrix(t);
    let tiles: Vec<TileReport> = auto_tiles(dims, geometry)
        .into_iter()
        .map(|Tile { rows, cols }| {
            let vals: Vec<i32> = (rows[0]..rows[1])
                .flat_map(|r| (cols[0]..cols[1]).map(move |c| t.values()[r * dims[1] + c]))
                .collect();
            hamming(&vals, t.q()).map(|th| TileReport {
                rows,
                cols,
                hm: th.hm,
                hr: th.hr,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LayerReport {
        name,
        q: t.q(),
        elements: t.len(),
        hm: h.hm,
        hr: h.hr,
        hr_max: tiles.iter().map(|x| x.hr).fold(0.0, f64::max),
        hr_average: tiles.iter().map(|x| x.hr).sum::<f64>() / tiles.len() as f64,
        tiles,
    })
}

pub fn analyze_tensors(named: &[(String, QuantizedTensor)], geometry: &ChipTopology) -> Result<AnalyzeReport> {
    let layers = named
        .iter()
        .map(|(n, t)| analyze_layer(n.clone(), t, geometry))
        .collect::<Result<Vec<_>>>()?;
    Ok(AnalyzeReport {
        hr_max: layers.iter().map(|l| l.hr).fold(0.0, f64::max),
        hr_average: layers.iter().map(|l| l.hr).sum::<f64>() / layers.len() as f64,
        layers,
    })
}

fn analyze_csv(r: &AnalyzeReport) -> String {
    let mut s = String::from("layer,tile,row_start,row_end,col_start,col_end,hm,hr\n");
    for l in &r.layers {
        s += &format!("{},all,0,,0,,{},{}\n", l.name, l.hm, l.hr);
        for (i, t) in l.tiles.iter().enumerate() {
            s += &format!(
                "{},{},{},{},{},{},{},{}\n",
                l.name, i, t.rows[0], t.rows[1], t.cols[0], t.cols[1], t.hm, t.hr
            );
        }
    }
    s
}

pub fn analyze(tensors: &[PathBuf], topology: Option<&Path>, format: Format, out: Option<&Path>) -> Result<()> {
    let geometry = match topology {
        Some(p) => read_topology(p)?,
        None => ChipTopology::new(1, 1, DEFAULT_BANKS, DEFAULT_CELLS)?,
    };
    let named = tensors
        .iter()
        .map(|p| {
            let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            read_tensor(p).map(|t| (name, t))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = analyze_tensors(&named, &geometry)?;
    match format {
        Format::Json => emit(out, &to_json_bytes(&report)),
        Format::Csv => emit(out, analyze_csv(&report).as_bytes()),
    }
}

// ---- lhr ----

#[derive(Debug, Serialize)]
pub struct LhrReport {
    pub layers: Vec<FloatWeightLayer>,
    pub hr_before: Vec<f64>,
    pub hr_after: Vec<f64>,
    pub final_loss: f64,
    pub steps_run: usize,
    pub clamped_warnings: usize,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LayerInput {
    Many(Vec<FloatWeightLayer>),
    One(FloatWeightLayer),
}

fn lut_for(layers: &[FloatWeightLayer]) -> Result<HrLookup> {
    let q = layers.first().ok_or_else(|| Error::validation("no layers given"))?.q;
    if layers.iter().any(|l| l.q != q) {
        return Err(Error::validation("all layers must share one q"));
    }
    HrLookup::new(q)
}

pub fn lhr(input: &Path, out: &Path, lambda: f64, steps: usize, lr: f64, anchor: f64) -> Result<()> {
    let layers = match read_json::<LayerInput>(input)? {
        LayerInput::Many(v) => v,
        LayerInput::One(l) => vec![l],
    };
    for l in &layers {
        l.validate()?;
    }
    let lut = lut_for(&layers)?;
    let cfg = FinetuneConfig {
        lambda,
        anchor: if anchor > 0.0 { Anchor::Quadratic { strength: anchor } } else { Anchor::None },
        steps,
        lr,
    };
    let o = finetune(&layers, &lut, &cfg)?;
    let report = LhrReport {
        layers: o.layers,
        hr_before: o.hr_before,
        hr_after: o.hr_after,
        final_loss: o.final_loss,
        steps_run: o.steps_run,
        clamped_warnings: o.clamped_warnings,
    };
    write_file(out, &to_json_bytes(&report))
}

// ---- wds ----

#[derive(Debug, Serialize)]
pub struct WdsReport {
    pub delta: u32,
    pub clamped_count: usize,
    pub hr_before: f64,
    pub hr_after: f64,
    pub overflow_warning: bool,
}

fn wds_report(t: &QuantizedTensor, delta: u32) -> Result<(WdsReport, QuantizedTensor)> {
    let s = shift_weights(t, delta)?;
    let r = WdsReport {
        delta,
        clamped_count: s.clamped_count,
        hr_before: hamming(t.values(), t.q())?.hr,
        hr_after: hamming(s.shifted.values(), t.q())?.hr,
        overflow_warning: s.overflow_warning(),
    };
    Ok((r, s.shifted))
}

pub fn wds(tensor: &Path, delta: u32, out: &Path, report: Option<&Path>) -> Result<()> {
    let t = read_tensor(tensor)?;
    let (r, shifted) = wds_report(&t, delta)?;
    write_tensor(out, &shifted)?;
    emit(report, &to_json_bytes(&r))
}

// ---- map ----

pub enum Placement {
    Strategy(Strategy),
    File(PathBuf),
}

#[derive(Debug, Serialize)]
pub struct SetDoc {
    pub operator: String,
    pub macros: Vec<usize>,
}

#[derive(Debug, Serialize)]
pub struct BaselineScores {
    pub sequential: MappingScore,
    pub zigzag: MappingScore,
}

#[derive(Debug, Serialize)]
pub struct AnnealDoc {
    pub initial_score: MappingScore,
    pub steps: usize,
    pub accepted: usize,
    pub stop: StopReason,
}

#[derive(Debug, Serialize)]
pub struct MappingDoc {
    /// `None` when read from a file.
    pub strategy: Option<Strategy>,
    pub mode: Mode,
    pub seed: u64,
    pub workload: String,
    pub assignment: Vec<Slot>,
    pub sets: Vec<SetDoc>,
    pub score: MappingScore,
    pub baseline_scores: BaselineScores,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anneal: Option<AnnealDoc>,
}

#[derive(Deserialize)]
struct MappingIn {
    assignment: Vec<Slot>,
}

pub fn load_setup(topology: &Path, workload: &Path, beta: Option<u32>, delta: Option<u32>) -> Result<(ChipTopology, Workload)> {
    let mut topo = read_topology(topology)?;
    if let Some(b) = beta {
        if b == 0 {
            return Err(Error::validation("beta must be positive"));
        }
        topo.beta = b;
    }
    let mut w = load_workload(workload, &topo)?;
    if let Some(d) = delta {
        w = w.with_wds(d)?;
    }
    Ok((topo, w))
}

pub fn place(
    topo: &ChipTopology,
    workload: &Workload,
    placement: &Placement,
    mode: Mode,
    seed: u64,
) -> Result<(TaskMapping, MappingDoc)> {
    let scorer = Scorer::new(topo, workload, FlipProfile::seeded(seed), mode)?;
    let seq = sequential_map(workload, topo)?;
    let baseline_scores = BaselineScores {
        sequential: scorer.score(&seq)?,
        zigzag: scorer.score(&zigzag_map(workload, topo)?)?,
    };
    let (mapping, strategy, anneal) = match placement {
        Placement::File(p) => {
            let m = TaskMapping::new(read_json::<MappingIn>(p)?.assignment, workload, topo)?;
            (m, None, None)
        }
        Placement::Strategy(Strategy::Sequential) => (seq, Some(Strategy::Sequential), None),
        Placement::Strategy(Strategy::Zigzag) => (zigzag_map(workload, topo)?, Some(Strategy::Zigzag), None),
        Placement::Strategy(Strategy::Anneal) => {
            let cfg = AnnealConfig {
                seed,
                ..Default::default()
            };
            let o = anneal_seeded(&seq, &scorer, topo, &cfg)?;
            let doc = AnnealDoc {
                initial_score: o.initial_score,
                steps: o.steps,
                accepted: o.accepted,
                stop: o.stop,
            };
            (o.mapping, Some(Strategy::Anneal), Some(doc))
        }
    };
    mapping.require_complete()?;
    let doc = MappingDoc {
        strategy,
        mode,
        seed,
        workload: workload.fingerprint(),
        assignment: mapping.assignment().to_vec(),
        sets: workload
            .operators
            .iter()
            .zip(mapping.sets())
            .map(|(op, s)| SetDoc {
                operator: op.name.clone(),
                macros: s.clone(),
            })
            .collect(),
        score: scorer.score(&mapping)?,
        baseline_scores,
        anneal,
    };
    Ok((mapping, doc))
}

pub fn map(setup: &Setup, strategy: Strategy, out: Option<&Path>) -> Result<()> {
    let (topo, w) = load_setup(&setup.topology, &setup.workload, setup.beta, setup.delta)?;
    let (_, doc) = place(&topo, &w, &Placement::Strategy(strategy), setup.mode, setup.seed)?;
    emit(out, &to_json_bytes(&doc))
}

// ---- simulate / report ----

fn write_stats(dir: &Path, trace: &SimTrace) -> Result<()> {
    write_file(&dir.join(irpim::report::SERIES_FILE), series_csv(trace)?.as_bytes())?;
    write_file(&dir.join(STATS_FILE), &to_json_bytes(&RunStats::of(trace)))
}

pub fn simulate(setup: &Setup, placement: &Placement, booster: BoosterPolicy, out: &Path) -> Result<()> {
    let (topo, w) = load_setup(&setup.topology, &setup.workload, setup.beta, setup.delta)?;
    let (mapping, doc) = place(&topo, &w, placement, setup.mode, setup.seed)?;
    let cfg = SimConfig {
        mode: setup.mode,
        seed: setup.seed,
        policy: booster,
        max_cycles: None,
    };
    let trace = run_engine(&topo, &w, &mapping, &cfg)?;
    create_dir(out)?;
    write_file(&out.join(MAPPING_FILE), &to_json_bytes(&doc))?;
    write_trace(out, &trace)?;
    emit(None, &to_json_bytes(&trace.summary))
}

pub fn report(traces: &[PathBuf], out: &Path) -> Result<()> {
    let loaded = traces.iter().map(|d| read_trace(d)).collect::<Result<Vec<_>>>()?;
    create_dir(out)?;
    match loaded.as_slice() {
        [t] => write_stats(out, t),
        [a, b] => {
            let c = compare_runs(a, b)?;
            write_file(&out.join("series_a.csv"), series_csv(a)?.as_bytes())?;
            write_file(&out.join("series_b.csv"), series_csv(b)?.as_bytes())?;
            write_file(&out.join("ablation.csv"), ablation_csv(a, b)?.as_bytes())?;
            write_file(&out.join("comparison.csv"), comparison_csv(&c)?.as_bytes())?;
            write_file(&out.join("comparison.json"), &to_json_bytes(&c))
        }
        _ => Err(Error::validation("report takes one or two traces")),
    }
}

// ---- run ----

#[derive(Debug, Serialize)]
pub struct LhrStageLayer {
    pub operator: String,
    pub hr_before: f64,
    pub hr_after: f64,
    pub steps_run: usize,
}

/// Float weights that round back to `t`: each integer plus a seeded offset
/// in (-0.5, 0.5), times the scale.
pub fn synthetic_anchors(t: &QuantizedTensor, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    t.values()
        .iter()
        .map(|&v| (v as f64 + rng.random_range(-0.499..0.499)) * t.scale())
        .collect()
}

/// Fine-tunes every weight-stationary operator and swaps in the
/// re-quantized weights.
pub fn lhr_stage(w: &Workload, topo: &ChipTopology, s: &LhrSettings, seed: u64) -> Result<(Workload, Vec<LhrStageLayer>)> {
    let lut = HrLookup::new(topo.q)?;
    let mut ops = w.operators.clone();
    let mut log = Vec::new();
    for (i, op) in ops.iter_mut().enumerate() {
        let Some(t) = &op.weight else { continue };
        let layer = FloatWeightLayer::new(op.name.clone(), synthetic_anchors(t, seed, i as u64), t.scale(), t.q())?;
        // One step of size `step` for a unit HR slope: the loss gradient of
        // a mean over n weights carries 1/n and one factor of the scale per
        // derivative.
        let n = t.len() as f64;
        let sc = t.scale();
        let cfg = FinetuneConfig {
            lambda: s.lambda,
            anchor: Anchor::Quadratic {
                strength: s.anchor * s.lambda / (n * sc * sc),
            },
            steps: s.steps,
            lr: s.step * n * sc * sc / s.lambda,
        };
        let o = finetune(std::slice::from_ref(&layer), &lut, &cfg)?;
        let q = o.layers[0].quantize()?;
        log.push(LhrStageLayer {
            operator: op.name.clone(),
            hr_before: o.hr_before[0],
            hr_after: o.hr_after[0],
            steps_run: o.steps_run,
        });
        op.weight = Some(QuantizedTensor::new(t.shape().to_vec(), t.q(), t.scale(), q.values().to_vec())?);
    }
    Ok((Workload::new(ops, topo)?, log))
}

#[derive(Debug, Serialize)]
pub struct WdsStageLayer {
    pub operator: String,
    #[serde(flatten)]
    pub report: WdsReport,
}

pub fn wds_stage(w: &Workload, delta: u32) -> Result<(Workload, Vec<WdsStageLayer>)> {
    let mut log = Vec::new();
    for op in &w.operators {
        if let Some(t) = &op.weight {
            log.push(WdsStageLayer {
                operator: op.name.clone(),
                report: wds_report(t, delta)?.0,
            });
        }
    }
    Ok((w.with_wds(delta)?, log))
}

pub fn run(manifest: &Path, out: Option<&Path>) -> Result<()> {
    let m = RunManifest::load(manifest)?;
    let out = out.map_or_else(|| m.out.clone(), Path::to_path_buf);
    let (topo, mut w) = load_setup(&m.topology, &m.workload, m.beta, None)?;
    create_dir(&out)?;
    if let Some(s) = m.lhr.settings() {
        let (next, log) = lhr_stage(&w, &topo, &s, m.seed)?;
        write_file(&out.join(LHR_FILE), &to_json_bytes(&log))?;
        w = next;
    }
    if let Some(d) = m.wds {
        let (next, log) = wds_stage(&w, d)?;
        write_file(&out.join(WDS_FILE), &to_json_bytes(&log))?;
        w = next;
    }
    let placement = match (&m.mapping, m.strategy) {
        (Some(p), _) => Placement::File(p.clone()),
        (None, s) => Placement::Strategy(s.unwrap_or(Strategy::Anneal)),
    };
    let (mapping, doc) = place(&topo, &w, &placement, m.mode, m.seed)?;
    write_file(&out.join(MAPPING_FILE), &to_json_bytes(&doc))?;
    let cfg = SimConfig {
        mode: m.mode,
        seed: m.seed,
        policy: m.booster,
        max_cycles: None,
    };
    let trace = run_engine(&topo, &w, &mapping, &cfg)?;
    write_trace(&out, &trace)?;
    write_stats(&out, &trace)
}
