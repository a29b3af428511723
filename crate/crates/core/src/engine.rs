//! Lockstep cycle engine.
//!
//! Every operator forms one Set. Each cycle an active Set feeds one bit-plane
//! of the current input vector to all of its macros; `R_tog` per macro drives
//! the IR monitor, and a failure stalls the Set, replays the elapsed part of
//! the current pass and snaps the failing Group to its safe level. Groups
//! that share a Set, directly or through other Groups, form a clock domain
//! running at the slowest frequency any member asks for.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::booster::{pair_for_frequency, recompute, safe_level_for, select_pair, BoosterEvent, BoosterState, Controller, Mode, RecomputeEvent};
use crate::error::{Error, Result};
use crate::metrics::{ir_drop_estimate, popcount, BitToggleFrame};
use crate::model::{int_range, ChipTopology, InputSpec, Level, OperatorKind, QuantizedTensor, TaskMapping, VfPair, Workload};

/// How Group levels are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoosterPolicy {
    /// Every Group at the 100% level.
    Dvfs,
    /// Every Group pinned at its safe level.
    SafeOnly,
    /// Safe level plus run-time a-level probing.
    #[default]
    Aggressive,
}

impl std::str::FromStr for BoosterPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dvfs" => Ok(Self::Dvfs),
            "safe-only" => Ok(Self::SafeOnly),
            "aggressive" => Ok(Self::Aggressive),
            _ => Err(Error::validation(format!("unknown booster policy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub mode: Mode,
    pub seed: u64,
    pub policy: BoosterPolicy,
    /// Abort after this many cycles. Defaults to 64 times the failure-free
    /// length plus a margin.
    pub max_cycles: Option<u64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            mode: Mode::LowPower,
            seed: 0,
            policy: BoosterPolicy::Aggressive,
            max_cycles: None,
        }
    }
}

/// Toggle frame for `bit` between two consecutive input vectors.
pub fn toggles(prev: &[i32], cur: &[i32], bit: u8) -> BitToggleFrame {
    BitToggleFrame::new(
        prev.iter()
            .zip(cur)
            .map(|(&a, &b)| ((a ^ b) >> bit) & 1 == 1)
            .collect(),
    )
}

/// Frames for a `[vectors, lines]` input, `q` per vector, LSB first. Bit `b`
/// of vector `v` toggles line `k` when bit `b` of `x[v][k]` differs from the
/// same bit of `x[v - 1][k]`; the lines start at zero.
pub fn bit_serialize(input: &QuantizedTensor) -> Result<Vec<BitToggleFrame>> {
    let (vectors, lines) = input.dims2()?;
    let q = input.q();
    let zero = vec![0; lines];
    let rows: Vec<&[i32]> = input.values().chunks(lines).collect();
    let mut frames = Vec::with_capacity(vectors * q as usize);
    for v in 0..vectors {
        let prev = if v == 0 { &zero[..] } else { rows[v - 1] };
        for b in 0..q {
            frames.push(toggles(prev, rows[v], b));
        }
    }
    Ok(frames)
}

fn sign_extend(bits: u32, q: u8) -> i32 {
    let s = 32 - q as u32;
    ((bits << s) as i32) >> s
}

/// Integer input vectors whose bit-planes flip with a per-(vector, bit)
/// probability drawn from `N(mu, sigma)` clipped to `[0, 1]`.
pub fn synthetic_inputs<R: Rng + ?Sized>(
    lines: usize,
    vectors: usize,
    mu: f64,
    sigma: f64,
    q: u8,
    rng: &mut R,
) -> Result<Vec<Vec<i32>>> {
    let normal = Normal::new(mu, sigma).map_err(|e| Error::validation(format!("synthetic input: {e}")))?;
    let mask = if q >= 32 { u32::MAX } else { (1u32 << q) - 1 };
    let mut bits = vec![0u32; lines];
    let mut out = Vec::with_capacity(vectors);
    for _ in 0..vectors {
        for b in 0..q {
            let p = normal.sample(rng).clamp(0.0, 1.0);
            for word in bits.iter_mut() {
                if rng.random::<f64>() < p {
                    *word ^= 1 << b;
                }
            }
        }
        out.push(bits.iter().map(|&w| sign_extend(w & mask, q)).collect());
    }
    Ok(out)
}

/// Inputs and resident data of every operator, as the engine sees them.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedData {
    /// Per operator, `[vectors][in]`.
    pub inputs: Vec<Vec<Vec<i32>>>,
    /// Per operator, the `[out, in]` matrix held in the macros.
    pub resident: Vec<QuantizedTensor>,
}

/// Arithmetic right shift that brings every value into the q-bit range.
fn requantize(values: &[i64], q: u8) -> Vec<i32> {
    let (_, max) = int_range(q);
    let peak = values.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0);
    let mut shift = 0;
    while (peak >> shift) > max as u64 {
        shift += 1;
    }
    values.iter().map(|&v| (v >> shift) as i32).collect()
}

fn matvec(w: &QuantizedTensor, x: &[i32]) -> Vec<i64> {
    let cols = w.shape()[1];
    w.values()
        .chunks(cols)
        .map(|row| row.iter().zip(x).map(|(&a, &b)| a as i64 * b as i64).sum())
        .collect()
}

/// Generates synthetic inputs and derives the data of input-determined
/// operators from their predecessor's outputs.
pub fn resolve_data(workload: &Workload, topo: &ChipTopology, seed: u64) -> Result<ResolvedData> {
    let q = topo.q;
    let mut inputs: Vec<Vec<Vec<i32>>> = Vec::with_capacity(workload.operators.len());
    let mut resident: Vec<QuantizedTensor> = Vec::with_capacity(workload.operators.len());
    for (i, op) in workload.operators.iter().enumerate() {
        let x = match &op.inputs {
            InputSpec::Synthetic { vectors, mu, sigma } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                synthetic_inputs(op.dims[1], *vectors, *mu, *sigma, q, &mut rng)?
            }
            InputSpec::Tensor(t) => {
                if t.q() != q {
                    return Err(Error::validation(format!("{}: input q={} but chip q={q}", op.name, t.q())));
                }
                t.values().chunks(op.dims[1]).map(<[i32]>::to_vec).collect()
            }
        };
        let data = match op.kind {
            OperatorKind::WeightStationary => op
                .in_memory()
                .cloned()
                .ok_or_else(|| Error::validation(format!("{}: missing weight", op.name)))?,
            OperatorKind::InputDetermined => {
                let prev = &workload.operators[i - 1];
                // The corrected product of a shifted layer equals the base
                // product, so the predecessor's base data is used here.
                let w = prev.weight.as_ref().unwrap_or(&resident[i - 1]);
                let outputs: Vec<i64> = inputs[i - 1].iter().flat_map(|xv| matvec(w, xv)).collect();
                let pool = requantize(&outputs, q);
                let n = op.dims[0] * op.dims[1];
                let values = pool.iter().copied().cycle().take(n).collect();
                QuantizedTensor::matrix(op.dims[0], op.dims[1], q, values)?
            }
        };
        inputs.push(x);
        resident.push(data);
    }
    Ok(ResolvedData { inputs, resident })
}

/// Per-macro static data.
#[derive(Debug, Clone)]
struct MacroPlan {
    set: usize,
    col0: usize,
    /// Set bits per tile column, summed over rows.
    colpop: Vec<u32>,
}

impl MacroPlan {
    fn rtog(&self, prev: &[i32], cur: &[i32], bit: u8, denom: f64) -> f64 {
        let hits: u64 = self
            .colpop
            .iter()
            .enumerate()
            .map(|(c, &p)| {
                let k = self.col0 + c;
                (((prev[k] ^ cur[k]) >> bit) & 1) as u64 * p as u64
            })
            .sum();
        hits as f64 / denom
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Phase {
    Run,
    /// Waiting out the pair-switch latency before a replay of bits
    /// `0..=bit`.
    Stall { remaining: u32, bit: u8, failing: Vec<usize> },
    Replay { pos: u8, bit: u8, failing: Vec<usize> },
    Done,
}

#[derive(Debug, Clone)]
struct SetState {
    macros: Vec<usize>,
    vectors: usize,
    vector: usize,
    bit: u8,
    phase: Phase,
}

impl SetState {
    fn work(&self, m: usize) -> Option<(usize, u8)> {
        match &self.phase {
            Phase::Run => Some((self.vector, self.bit)),
            Phase::Replay { pos, failing, .. } if failing.contains(&m) => Some((self.vector, *pos)),
            _ => None,
        }
    }

    fn complete_bit(&mut self, bit: u8, q: u8) {
        if bit + 1 == q {
            self.bit = 0;
            self.vector += 1;
            if self.vector == self.vectors {
                self.phase = Phase::Done;
            }
        } else {
            self.bit = bit + 1;
        }
    }
}

/// Level and operating point of one Group in one cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub level: Level,
    pub voltage: f64,
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: u64,
    /// Seconds; the slowest active clock domain sets the pace.
    pub period: f64,
    pub groups: Vec<GroupRecord>,
    /// Per macro; zero for idle or empty macros.
    pub rtog: Vec<f64>,
    pub supply: Vec<f64>,
    pub max_ir_drop: f64,
    /// Macros that raised an IR failure.
    pub failures: Vec<usize>,
    /// Sets that were stalled or replaying.
    pub stalled_sets: Vec<usize>,
    pub energy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerRecord {
    pub cycle: u64,
    pub group: usize,
    pub event: BoosterEvent,
    pub level: Level,
    pub a_level: Level,
    pub safe_counter: u32,
    pub pair: VfPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecomputeRecord {
    pub cycle: u64,
    #[serde(flatten)]
    pub event: RecomputeEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    /// Fingerprint of the simulated workload.
    pub workload: String,
    pub mode: Mode,
    pub policy: BoosterPolicy,
    pub seed: u64,
    pub total_cycles: u64,
    /// Seconds.
    pub wall_time: f64,
    /// Joules, the sum of the per-cycle energies.
    pub energy: f64,
    pub dynamic_energy: f64,
    pub leakage_energy: f64,
    pub failure_count: u64,
    pub recompute_events: u64,
    pub recompute_cycles: u64,
    pub total_macs: u64,
    pub effective_tops: f64,
    pub max_ir_drop: f64,
    pub min_supply: f64,
    /// Cycle count at which each Set finished.
    pub set_finish_cycles: Vec<u64>,
    pub safe_levels: Vec<Level>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub records: Vec<CycleRecord>,
    pub summary: SimSummary,
    pub controller_log: Vec<ControllerRecord>,
    pub recomputes: Vec<RecomputeRecord>,
}

/// Clock domains: connected components of the Group/Set incidence graph.
/// Returns each Group's domain (its lowest Group id), or `None` for Groups
/// without tasks.
fn clock_domains(topo: &ChipTopology, mapping: &TaskMapping) -> Vec<Option<usize>> {
    let n = topo.n_groups;
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut used = vec![false; n];
    for set in mapping.sets() {
        let mut groups = set.iter().map(|&m| topo.group_of(m));
        if let Some(first) = groups.next() {
            used[first] = true;
            for g in groups {
                used[g] = true;
                let (a, b) = (find(&mut parent, first), find(&mut parent, g));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    (0..n).map(|g| used[g].then(|| find(&mut parent, g))).collect()
}

fn fixed_state(group: usize, level: Level, topo: &ChipTopology, mode: Mode) -> Result<BoosterState> {
    Ok(BoosterState {
        group,
        safe_level: level,
        a_level: level,
        level,
        safe_counter: 0,
        mode,
        current_pair: select_pair(&topo.vf_table, level, mode)?,
    })
}

/// Runs the workload to completion.
pub fn simulate(topo: &ChipTopology, workload: &Workload, mapping: &TaskMapping, cfg: &SimConfig) -> Result<SimTrace> {
    topo.validate()?;
    mapping.validate()?;
    mapping.require_complete()?;
    if mapping.assignment().len() != topo.total_macros() {
        return Err(Error::Length {
            expected: topo.total_macros(),
            actual: mapping.assignment().len(),
        });
    }
    let q = topo.q;
    let table = &topo.vf_table;
    let data = resolve_data(workload, topo, cfg.seed)?;
    let denom = (topo.banks_per_macro * topo.cells_per_bank * q as usize) as f64;
    let n_macros = topo.total_macros();

    // Static per-macro data and safe levels.
    let tasks = workload.tasks();
    let mut plans: Vec<Option<MacroPlan>> = vec![None; n_macros];
    let mut safe_req: Vec<Option<Level>> = vec![None; topo.n_groups];
    for m in 0..n_macros {
        let Some(t) = mapping.slot(m).task() else { continue };
        let task = &tasks[t];
        let w = &data.resident[task.op];
        let colpop: Vec<u32> = (task.tile.cols[0]..task.tile.cols[1])
            .map(|c| (task.tile.rows[0]..task.tile.rows[1]).map(|r| popcount(w.at(r, c), q)).sum())
            .collect();
        let hr = colpop.iter().map(|&p| p as f64).sum::<f64>() / denom;
        let req = safe_level_for(workload.operators[task.op].kind, hr)?;
        let g = topo.group_of(m);
        safe_req[g] = Some(safe_req[g].map_or(req, |l: Level| l.max(req)));
        plans[m] = Some(MacroPlan {
            set: task.op,
            col0: task.tile.cols[0],
            colpop,
        });
    }

    let controller = Controller::new(table, topo.beta);
    let mut states: Vec<BoosterState> = (0..topo.n_groups)
        .map(|g| {
            let safe = table.at_or_above(safe_req[g].unwrap_or(Level::DVFS));
            match cfg.policy {
                BoosterPolicy::Aggressive if safe_req[g].is_some() => controller.init(g, safe, cfg.mode),
                BoosterPolicy::SafeOnly => fixed_state(g, safe, topo, cfg.mode),
                _ => fixed_state(g, Level::DVFS, topo, cfg.mode),
            }
        })
        .collect::<Result<_>>()?;
    let safe_levels: Vec<Level> = states.iter().map(|s| s.safe_level).collect();

    let domain = clock_domains(topo, mapping);
    let mut sets: Vec<SetState> = (0..workload.operators.len())
        .map(|op| SetState {
            macros: mapping.set(op).to_vec(),
            vectors: data.inputs[op].len(),
            vector: 0,
            bit: 0,
            phase: if data.inputs[op].is_empty() { Phase::Done } else { Phase::Run },
        })
        .collect();
    let nominal: u64 = sets.iter().map(|s| s.vectors as u64 * q as u64).max().unwrap_or(0);
    let max_cycles = cfg.max_cycles.unwrap_or(nominal * 64 + 100_000);
    let total_macs: u64 = workload
        .operators
        .iter()
        .zip(&data.inputs)
        .map(|(o, x)| (o.macs_per_vector() * x.len()) as u64)
        .sum();

    let zero_lines: Vec<Vec<i32>> = workload.operators.iter().map(|o| vec![0; o.dims[1]]).collect();
    let domain_freq = |states: &[BoosterState]| -> Result<Vec<f64>> {
        let mut f = vec![f64::INFINITY; topo.n_groups];
        for (g, d) in domain.iter().enumerate() {
            if let Some(d) = *d {
                f[d] = f[d].min(select_pair(table, states[g].level, cfg.mode)?.frequency);
            }
        }
        Ok(f)
    };

    let mut records = Vec::new();
    let mut controller_log = Vec::new();
    let mut recomputes = Vec::new();
    let mut pending_sync = vec![false; topo.n_groups];
    let mut set_finish = vec![0u64; sets.len()];
    let (mut energy, mut dynamic_energy, mut leakage_energy, mut wall_time) = (0.0, 0.0, 0.0, 0.0);
    let (mut failure_count, mut recompute_cycles) = (0u64, 0u64);
    let (mut max_ir_drop, mut min_supply) = (0.0f64, f64::INFINITY);
    let mut cycle = 0u64;

    while sets.iter().any(|s| s.phase != Phase::Done) {
        if cycle >= max_cycles {
            return Err(Error::Unrecoverable(format!("no progress after {cycle} cycles")));
        }
        for s in sets.iter_mut() {
            if let Phase::Stall { remaining: 0, bit, failing } = &s.phase {
                s.phase = Phase::Replay {
                    pos: 0,
                    bit: *bit,
                    failing: failing.clone(),
                };
            }
        }

        // Operating points.
        let f_dom = domain_freq(&states)?;
        let pairs: Vec<VfPair> = (0..topo.n_groups)
            .map(|g| match domain[g] {
                Some(d) => {
                    let f = f_dom[d];
                    pair_for_frequency(table, states[g].level, f)
                        .map(|p| VfPair { voltage: p.voltage, frequency: f })
                        .ok_or_else(|| Error::Unrecoverable(format!("group {g} has no pair at {f} Hz")))
                }
                None => Ok(states[g].current_pair),
            })
            .collect::<Result<_>>()?;

        // Per-macro activity.
        let work: Vec<Option<(usize, u8)>> = (0..n_macros)
            .map(|m| plans[m].as_ref().and_then(|p| sets[p.set].work(m)))
            .collect();
        let rtog: Vec<f64> = (0..n_macros)
            .into_par_iter()
            .with_min_len(16)
            .map(|m| match (&plans[m], work[m]) {
                (Some(p), Some((v, b))) => {
                    let x = &data.inputs[p.set];
                    let prev = if v == 0 { &zero_lines[p.set] } else { &x[v - 1] };
                    p.rtog(prev, &x[v], b, denom)
                }
                _ => 0.0,
            })
            .collect();

        let mut supply = vec![0.0; n_macros];
        let mut failures = Vec::new();
        let mut cycle_dyn = 0.0;
        let mut cycle_leak = 0.0;
        let mut cycle_max_drop = 0.0f64;
        let mut group_failed = vec![false; topo.n_groups];
        for m in 0..n_macros {
            let g = topo.group_of(m);
            let pair = pairs[g];
            let drop = ir_drop_estimate(rtog[m], &topo.ir_coeffs)?;
            supply[m] = pair.voltage - drop;
            let Some(p) = &plans[m] else { continue };
            if sets[p.set].phase == Phase::Done {
                continue;
            }
            cycle_max_drop = cycle_max_drop.max(drop);
            min_supply = min_supply.min(supply[m]);
            cycle_dyn += topo.energy.c_dyn * pair.voltage * pair.voltage * rtog[m] * denom;
            cycle_leak += topo.energy.p_leak / pair.frequency;
            if work[m].is_some() && supply[m] < topo.v_fail_threshold {
                failures.push(m);
                group_failed[g] = true;
            }
        }
        failure_count += failures.len() as u64;
        max_ir_drop = max_ir_drop.max(cycle_max_drop);

        // Recompute: stall each Set with a failing macro.
        let mut failed_sets: Vec<usize> = failures.iter().filter_map(|&m| plans[m].as_ref().map(|p| p.set)).collect();
        failed_sets.dedup();
        for &s in &failed_sets {
            let failing: Vec<usize> = failures
                .iter()
                .copied()
                .filter(|&m| plans[m].as_ref().is_some_and(|p| p.set == s))
                .collect();
            let bit = match &sets[s].phase {
                Phase::Run => sets[s].bit,
                Phase::Replay { bit, .. } => *bit,
                _ => unreachable!("only computing macros can fail"),
            };
            let mut first = None;
            for &m in &failing {
                let g = topo.group_of(m);
                let ev = recompute(s, m, pairs[g], states[g].safe_level, table, bit as u32 + 1, topo.switch_latency)?;
                first.get_or_insert(ev);
            }
            let ev = first.expect("failing macros are non-empty");
            recompute_cycles += ev.stall_cycles as u64;
            recomputes.push(RecomputeRecord { cycle, event: ev });
            let mut all_failing = failing;
            if let Phase::Replay { failing: prev, .. } = &sets[s].phase {
                all_failing.extend(prev.iter().copied());
                all_failing.sort_unstable();
                all_failing.dedup();
            }
            sets[s].phase = Phase::Stall {
                remaining: topo.switch_latency,
                bit,
                failing: all_failing,
            };
        }

        // Controllers, in Group order.
        let before: Vec<Level> = states.iter().map(|s| s.level).collect();
        for g in 0..topo.n_groups {
            let event = if group_failed[g] {
                BoosterEvent::IrFailure
            } else if pending_sync[g] {
                BoosterEvent::SetFreqSync(states[g].level)
            } else {
                BoosterEvent::None
            };
            if cfg.policy == BoosterPolicy::Aggressive && domain[g].is_some() {
                states[g] = controller.step(&states[g], event);
            }
            if event != BoosterEvent::None || states[g].level != before[g] {
                controller_log.push(ControllerRecord {
                    cycle,
                    group: g,
                    event,
                    level: states[g].level,
                    a_level: states[g].a_level,
                    safe_counter: states[g].safe_counter,
                    pair: pairs[g],
                });
            }
        }
        let f_next = domain_freq(&states)?;
        for g in 0..topo.n_groups {
            pending_sync[g] = match domain[g] {
                Some(d) => f_next[d] != f_dom[d] && states[g].level == before[g],
                None => false,
            };
        }

        // Active domains set the pace of this cycle.
        let mut period = 0.0f64;
        let mut stalled_sets = Vec::new();
        for (i, s) in sets.iter().enumerate() {
            if s.phase == Phase::Done {
                continue;
            }
            if let Some(g) = s.macros.first().map(|&m| topo.group_of(m)) {
                period = period.max(1.0 / pairs[g].frequency);
            }
            if !matches!(s.phase, Phase::Run) && !failed_sets.contains(&i) {
                stalled_sets.push(i);
            }
        }

        // Progress.
        for (i, s) in sets.iter_mut().enumerate() {
            if failed_sets.contains(&i) {
                continue;
            }
            match &mut s.phase {
                Phase::Run => s.complete_bit(s.bit, q),
                Phase::Stall { remaining, .. } => *remaining -= 1,
                Phase::Replay { pos, bit, .. } => {
                    if *pos == *bit {
                        let b = *bit;
                        s.phase = Phase::Run;
                        s.complete_bit(b, q);
                    } else {
                        *pos += 1;
                    }
                }
                Phase::Done => {}
            }
            if s.phase == Phase::Done && set_finish[i] == 0 {
                set_finish[i] = cycle + 1;
            }
        }

        let cycle_energy = cycle_dyn + cycle_leak;
        energy += cycle_energy;
        dynamic_energy += cycle_dyn;
        leakage_energy += cycle_leak;
        wall_time += period;
        records.push(CycleRecord {
            cycle,
            period,
            groups: (0..topo.n_groups)
                .map(|g| GroupRecord {
                    level: before[g],
                    voltage: pairs[g].voltage,
                    frequency: pairs[g].frequency,
                })
                .collect(),
            rtog,
            supply,
            max_ir_drop: cycle_max_drop,
            failures,
            stalled_sets,
            energy: cycle_energy,
        });
        cycle += 1;
    }

    let effective_tops = if wall_time > 0.0 {
        2.0 * total_macs as f64 / wall_time / 1e12
    } else {
        0.0
    };
    Ok(SimTrace {
        records,
        summary: SimSummary {
            workload: workload.fingerprint(),
            mode: cfg.mode,
            policy: cfg.policy,
            seed: cfg.seed,
            total_cycles: cycle,
            wall_time,
            energy,
            dynamic_energy,
            leakage_energy,
            failure_count,
            recompute_events: recomputes.len() as u64,
            recompute_cycles,
            total_macs,
            effective_tops,
            max_ir_drop,
            min_supply: if min_supply.is_finite() { min_supply } else { 0.0 },
            set_finish_cycles: set_finish,
            safe_levels,
        },
        controller_log,
        recomputes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Operator, Slot};

    #[test]
    fn serialize_examples() {
        let t = QuantizedTensor::matrix(2, 1, 4, vec![5, 3]).unwrap();
        let f = bit_serialize(&t).unwrap();
        assert_eq!(f.len(), 8);
        let second: Vec<bool> = f[4..].iter().map(|fr| fr.toggles[0]).collect();
        assert_eq!(second, vec![false, true, true, false]);

        let constant = QuantizedTensor::matrix(4, 3, 4, vec![6; 12]).unwrap();
        assert!(bit_serialize(&constant).unwrap()[4..].iter().all(|fr| fr.count() == 0));

        let alt: Vec<i32> = (0..6).flat_map(|v| [if v % 2 == 0 { -1 } else { 0 }; 2]).collect();
        let alt = QuantizedTensor::matrix(6, 2, 8, alt).unwrap();
        assert!(bit_serialize(&alt).unwrap().iter().all(|fr| fr.count() == 2));
    }

    #[test]
    fn synthetic_flip_rate_tracks_mu() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = synthetic_inputs(256, 64, 0.3, 0.0, 8, &mut rng).unwrap();
        let t = QuantizedTensor::matrix(64, 256, 8, x.concat()).unwrap();
        let frames = bit_serialize(&t).unwrap();
        let rate = frames.iter().map(|f| f.count()).sum::<usize>() as f64 / (frames.len() * 256) as f64;
        assert!((rate - 0.3).abs() < 0.01, "{rate}");
    }

    #[test]
    fn requantize_fits() {
        assert_eq!(requantize(&[300, -300, 10], 8), vec![75, -75, 2]);
        assert_eq!(requantize(&[5, -7], 4), vec![5, -7]);
    }

    fn ws(name: &str, rows: usize, cols: usize, values: Vec<i32>, vectors: usize) -> Operator {
        Operator {
            name: name.into(),
            kind: OperatorKind::WeightStationary,
            weight: Some(QuantizedTensor::matrix(rows, cols, 8, values).unwrap()),
            dims: [0, 0],
            tiles: vec![],
            inputs: InputSpec::Synthetic {
                vectors,
                mu: 0.5,
                sigma: 0.15,
            },
            shift: None,
        }
    }

    fn seq(w: &Workload, t: &ChipTopology) -> TaskMapping {
        let mut a = vec![Slot::Empty; t.total_macros()];
        for task in w.tasks() {
            a[task.id] = Slot::Task(task.id);
        }
        TaskMapping::new(a, w, t).unwrap()
    }

    #[test]
    fn zero_weights_only_leak() {
        let t = ChipTopology::new(2, 2, 2, 4).unwrap();
        let w = Workload::new(vec![ws("z", 2, 4, vec![0; 8], 3)], &t).unwrap();
        let tr = simulate(&t, &w, &seq(&w, &t), &SimConfig::default()).unwrap();
        assert_eq!(tr.summary.total_cycles, 24);
        assert_eq!(tr.summary.failure_count, 0);
        assert_eq!(tr.summary.dynamic_energy, 0.0);
        assert!(tr.records.iter().all(|r| r.rtog.iter().all(|&x| x == 0.0)));
        let expected = 24.0 * t.energy.p_leak / tr.records[0].groups[0].frequency;
        assert!((tr.summary.energy - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn saturated_weights_fail_first_cycle() {
        let t = ChipTopology::new(1, 1, 1, 4).unwrap();
        let mut op = ws("hot", 1, 4, vec![-1; 4], 2);
        op.inputs = InputSpec::Tensor(QuantizedTensor::matrix(2, 4, 8, vec![-1, -1, -1, -1, 0, 0, 0, 0]).unwrap());
        let w = Workload::new(vec![op], &t).unwrap();
        let tr = simulate(&t, &w, &seq(&w, &t), &SimConfig::default()).unwrap();
        assert_eq!(tr.records[0].rtog[0], 1.0);
        assert_eq!(tr.records[0].failures, vec![0]);
        assert_eq!(tr.records[0].groups[0].level, Level::new(60).unwrap());
        assert_eq!(tr.records[1].groups[0].level, Level::DVFS);
        let ev = tr.recomputes[0].event;
        assert_eq!(ev.stall_cycles, t.switch_latency + 1);
        // Stall, replay of bit 0, then the remaining 15 bits.
        assert_eq!(tr.summary.total_cycles, 1 + t.switch_latency as u64 + 1 + 15);
        assert_eq!(tr.summary.failure_count, 1);
    }

    #[test]
    fn summary_matches_records() {
        let t = ChipTopology::new(2, 2, 2, 4).unwrap();
        let vals: Vec<i32> = (0..16).map(|i| (i * 37 % 255) - 127).collect();
        let w = Workload::new(vec![ws("a", 4, 4, vals, 6)], &t).unwrap();
        for policy in [BoosterPolicy::Aggressive, BoosterPolicy::SafeOnly, BoosterPolicy::Dvfs] {
            let cfg = SimConfig { policy, ..Default::default() };
            let tr = simulate(&t, &w, &seq(&w, &t), &cfg).unwrap();
            let s = &tr.summary;
            assert_eq!(s.total_cycles as usize, tr.records.len());
            let e: f64 = tr.records.iter().map(|r| r.energy).sum();
            assert_eq!(e, s.energy);
            let wall: f64 = tr.records.iter().map(|r| r.period).sum();
            assert_eq!(wall, s.wall_time);
            let fails: usize = tr.records.iter().map(|r| r.failures.len()).sum();
            assert_eq!(fails as u64, s.failure_count);
            assert!(tr.records.windows(2).all(|p| p[1].cycle == p[0].cycle + 1));
        }
    }
}
