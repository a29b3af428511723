//! HR-aware placement of tasks onto macros.
//!
//! [`anneal`] searches over assignments by swapping macros across Groups and
//! accepts uphill moves with a normalized-exponential probability. Mappings
//! are ranked by [`Scorer`], a closed-form estimate of delay and energy that
//! runs every Group at the safe level of its worst task.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::booster::{safe_level_for, select_pair, Mode};
use crate::error::{Error, Result};
use crate::model::{ChipTopology, Level, OperatorKind, Slot, TaskMapping, VfPair, Workload};

/// Activity assumed for input-determined data, whose HR is unknown offline.
pub const RUNTIME_HR_ESTIMATE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealConfig {
    pub q_cool: f64,
    pub t0: f64,
    pub max_steps: usize,
    /// Consecutive rejections that end the search.
    pub reject_limit: usize,
    pub seed: u64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            q_cool: 0.95,
            t0: 1.0,
            max_steps: 500,
            reject_limit: 10,
            seed: 0,
        }
    }
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q_cool > 0.0 && self.q_cool < 1.0) {
            return Err(Error::validation(format!("q_cool {} outside (0, 1)", self.q_cool)));
        }
        if self.max_steps == 0 || self.reject_limit == 0 {
            return Err(Error::validation("max_steps and reject_limit must be at least 1"));
        }
        if !(self.t0 > 0.0 && self.t0.is_finite()) {
            return Err(Error::validation("t0 must be positive"));
        }
        Ok(())
    }
}

/// Lower is better on every field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MappingScore {
    /// Cycles of the 100% level's clock.
    pub delay: f64,
    /// Joules.
    pub energy: f64,
    pub scalar: f64,
}

/// Per-cycle input toggle probabilities, replayed cyclically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipProfile {
    pub probs: Vec<f64>,
}

impl FlipProfile {
    pub const STEPS: usize = 100;

    /// Draws `steps` values from `N(mu, sigma)` clipped to `[0, 1]`.
    pub fn sample<R: Rng + ?Sized>(mu: f64, sigma: f64, steps: usize, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(mu, sigma).map_err(|e| Error::validation(format!("flip profile: {e}")))?;
        if steps == 0 {
            return Err(Error::validation("flip profile needs at least one step"));
        }
        let probs = (0..steps).map(|_| normal.sample(rng).clamp(0.0, 1.0)).collect();
        Ok(Self { probs })
    }

    /// The default 100-step `N(0.5, 0.15)` profile for a seed.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::sample(0.5, 0.15, Self::STEPS, &mut rng).expect("default profile parameters are valid")
    }

    /// Sum of the profile over the first `cycles` cycles.
    pub fn total(&self, cycles: u64) -> f64 {
        let n = self.probs.len() as u64;
        let full: f64 = self.probs.iter().sum();
        let tail: f64 = self.probs[..(cycles % n) as usize].iter().sum();
        (cycles / n) as f64 * full + tail
    }
}

/// How one Group would run under a mapping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupPlan {
    /// `None` when the Group holds input-determined data.
    pub hr: Option<f64>,
    pub level: Level,
    pub pair: VfPair,
    /// Whether the Group has an empty macro, so its load is spread evenly.
    pub redistributed: bool,
}

/// Closed-form delay and energy estimate of a mapping.
#[derive(Debug, Clone)]
pub struct Scorer<'a> {
    topo: &'a ChipTopology,
    workload: &'a Workload,
    profile: FlipProfile,
    mode: Mode,
    task_hr: Vec<Option<f64>>,
    task_cycles: Vec<u64>,
    reference_hz: f64,
}

impl<'a> Scorer<'a> {
    pub fn new(topo: &'a ChipTopology, workload: &'a Workload, profile: FlipProfile, mode: Mode) -> Result<Self> {
        if profile.probs.is_empty() {
            return Err(Error::validation("flip profile is empty"));
        }
        let task_hr = workload.tasks().iter().map(|t| workload.task_hr(t, topo)).collect();
        let task_cycles = workload
            .tasks()
            .iter()
            .map(|t| (workload.operators[t.op].inputs.vectors() * topo.q as usize) as u64)
            .collect();
        let reference_hz = select_pair(&topo.vf_table, Level::DVFS, mode)?.frequency;
        Ok(Self {
            topo,
            workload,
            profile,
            mode,
            task_hr,
            task_cycles,
            reference_hz,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn tasks_in_group(&self, mapping: &TaskMapping, g: usize) -> Vec<usize> {
        self.topo
            .macros_in_group(g)
            .filter_map(|m| mapping.slot(m).task())
            .collect()
    }

    /// Level and pair of Group `g`, or `None` if it holds no task.
    pub fn group_plan(&self, mapping: &TaskMapping, g: usize) -> Result<Option<GroupPlan>> {
        let tasks = self.tasks_in_group(mapping, g);
        if tasks.is_empty() {
            return Ok(None);
        }
        let m = self.topo.macros_per_group;
        let redistributed = tasks.len() < m;
        let hrs: Option<Vec<f64>> = tasks.iter().map(|&t| self.task_hr[t]).collect();
        let (hr, level) = match hrs {
            None => (None, Level::DVFS),
            Some(hrs) => {
                let hr = if redistributed {
                    hrs.iter().sum::<f64>() / m as f64
                } else {
                    hrs.iter().copied().fold(0.0, f64::max)
                };
                (Some(hr), safe_level_for(OperatorKind::WeightStationary, hr.min(1.0))?)
            }
        };
        let level = self.topo.vf_table.at_or_above(level);
        let pair = select_pair(&self.topo.vf_table, level, self.mode)?;
        Ok(Some(GroupPlan {
            hr,
            level,
            pair,
            redistributed,
        }))
    }

    pub fn score(&self, mapping: &TaskMapping) -> Result<MappingScore> {
        mapping.validate()?;
        mapping.require_complete()?;
        let bits = (self.topo.banks_per_macro * self.topo.cells_per_bank * self.topo.q as usize) as f64;
        let e = &self.topo.energy;
        let mut delay: f64 = 0.0;
        let mut energy = 0.0;
        for g in 0..self.topo.n_groups {
            let Some(plan) = self.group_plan(mapping, g)? else {
                continue;
            };
            let tasks = self.tasks_in_group(mapping, g);
            let (v, f) = (plan.pair.voltage, plan.pair.frequency);
            let macro_energy = |hr: f64, cycles: u64| {
                e.c_dyn * v * v * bits * hr * self.profile.total(cycles) + e.p_leak * cycles as f64 / f
            };
            let cycles = if plan.redistributed {
                let m = self.topo.macros_per_group as u64;
                let c = tasks.iter().map(|&t| self.task_cycles[t]).sum::<u64>().div_ceil(m);
                energy += m as f64 * macro_energy(plan.hr.unwrap_or(RUNTIME_HR_ESTIMATE), c);
                c
            } else {
                for &t in &tasks {
                    energy += macro_energy(self.task_hr[t].unwrap_or(RUNTIME_HR_ESTIMATE), self.task_cycles[t]);
                }
                tasks.iter().map(|&t| self.task_cycles[t]).max().unwrap_or(0)
            };
            delay = delay.max(cycles as f64 * self.reference_hz / f);
        }
        let scalar = match self.mode {
            Mode::Sprint => delay,
            Mode::LowPower => energy,
        };
        Ok(MappingScore { delay, energy, scalar })
    }

    pub fn workload(&self) -> &Workload {
        self.workload
    }
}

/// Swaps a mapped macro with any macro of another Group. The second macro may
/// be empty, so a task can migrate and leave its source unmapped.
pub fn switch<R: Rng + ?Sized>(mapping: &TaskMapping, topo: &ChipTopology, rng: &mut R) -> Result<TaskMapping> {
    if topo.n_groups < 2 {
        return Err(Error::validation("switch needs at least two groups"));
    }
    let mapped: Vec<usize> = (0..topo.total_macros())
        .filter(|&m| !mapping.slot(m).is_empty())
        .collect();
    if mapped.is_empty() {
        return Err(Error::validation("switch needs at least one mapped macro"));
    }
    let a = mapped[rng.random_range(0..mapped.len())];
    let others = topo.total_macros() - topo.macros_per_group;
    let mut b = rng.random_range(0..others);
    // Skip over a's Group.
    if b >= topo.macros_in_group(topo.group_of(a)).start {
        b += topo.macros_per_group;
    }
    Ok(mapping.swapped(a, b))
}

/// Acceptance test of the normalized-exponential acceptor.
pub fn accept_probability(delta: f64, s0: f64, t: f64) -> f64 {
    if delta < 0.0 {
        1.0
    } else {
        (-delta / (0.5 * s0 * t)).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    Rejections,
    /// The initial mapping scored zero, which nothing can improve on.
    ZeroScore,
}

#[derive(Debug, Clone)]
pub struct AnnealOutcome {
    pub mapping: TaskMapping,
    pub score: MappingScore,
    pub initial_score: MappingScore,
    pub steps: usize,
    pub accepted: usize,
    pub stop: StopReason,
}

/// Simulated annealing from `initial`. The result never scores worse than
/// the input.
pub fn anneal<R, F>(
    initial: &TaskMapping,
    topo: &ChipTopology,
    cfg: &AnnealConfig,
    rng: &mut R,
    mut score: F,
) -> Result<AnnealOutcome>
where
    R: RngCore + ?Sized,
    F: FnMut(&TaskMapping) -> Result<MappingScore>,
{
    cfg.validate()?;
    let initial_score = score(initial)?;
    let s0 = initial_score.scalar;
    let mut out = AnnealOutcome {
        mapping: initial.clone(),
        score: initial_score,
        initial_score,
        steps: 0,
        accepted: 0,
        stop: StopReason::MaxSteps,
    };
    if s0 <= 0.0 {
        out.stop = StopReason::ZeroScore;
        return Ok(out);
    }
    let (mut cur, mut s_cur) = (initial.clone(), s0);
    let mut t = cfg.t0;
    let mut rejections = 0;
    for _ in 0..cfg.max_steps {
        out.steps += 1;
        t *= cfg.q_cool;
        let cand = switch(&cur, topo, rng)?;
        let s_new = score(&cand)?;
        let delta = s_new.scalar - s_cur;
        if delta < 0.0 || rng.random::<f64>() < accept_probability(delta, s0, t) {
            if s_new.scalar < out.score.scalar {
                out.mapping = cand.clone();
                out.score = s_new;
            }
            cur = cand;
            s_cur = s_new.scalar;
            out.accepted += 1;
            rejections = 0;
        } else {
            rejections += 1;
            if rejections >= cfg.reject_limit {
                out.stop = StopReason::Rejections;
                break;
            }
        }
    }
    Ok(out)
}

/// Convenience wrapper: seeded ChaCha8 stream and a [`Scorer`].
pub fn anneal_seeded(initial: &TaskMapping, scorer: &Scorer<'_>, topo: &ChipTopology, cfg: &AnnealConfig) -> Result<AnnealOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    anneal(initial, topo, cfg, &mut rng, |m| scorer.score(m))
}

fn place(order: impl Iterator<Item = usize>, workload: &Workload, topo: &ChipTopology) -> Result<TaskMapping> {
    let tasks = workload.tasks().len();
    let macros = topo.total_macros();
    if tasks > macros {
        return Err(Error::Capacity { tasks, macros });
    }
    let mut assignment = vec![Slot::Empty; macros];
    for (t, m) in order.take(tasks).enumerate() {
        assignment[m] = Slot::Task(t);
    }
    TaskMapping::new(assignment, workload, topo)
}

/// Task `i` on macro `i`.
pub fn sequential_map(workload: &Workload, topo: &ChipTopology) -> Result<TaskMapping> {
    place(0..topo.total_macros(), workload, topo)
}

/// Fills Groups in turn, reversing direction on every other Group.
pub fn zigzag_map(workload: &Workload, topo: &ChipTopology) -> Result<TaskMapping> {
    let order = (0..topo.n_groups).flat_map(|g| {
        let r = topo.macros_in_group(g);
        let v: Vec<usize> = if g % 2 == 0 { r.collect() } else { r.rev().collect() };
        v
    });
    place(order, workload, topo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InputSpec, Operator, QuantizedTensor};
    use approx::assert_relative_eq;

    /// One 1x1 task per entry; with q = 5 a value with `k` set bits has HR
    /// `k / 5`.
    pub(crate) fn one_cell_workload(values: &[i32], topo: &ChipTopology) -> Workload {
        let ops = values
            .iter()
            .enumerate()
            .map(|(i, &v)| Operator {
                name: format!("op{i}"),
                kind: OperatorKind::WeightStationary,
                weight: Some(QuantizedTensor::matrix(1, 1, topo.q, vec![v]).unwrap()),
                dims: [0, 0],
                tiles: vec![],
                inputs: InputSpec::Synthetic {
                    vectors: 4,
                    mu: 0.5,
                    sigma: 0.15,
                },
                shift: None,
            })
            .collect();
        Workload::new(ops, topo).unwrap()
    }

    fn topo(groups: usize, per_group: usize) -> ChipTopology {
        let mut t = ChipTopology::new(groups, per_group, 1, 1).unwrap();
        t.q = 5;
        t
    }

    fn mapping(slots: &[Option<usize>], w: &Workload, t: &ChipTopology) -> TaskMapping {
        TaskMapping::new(slots.iter().map(|&s| s.into()).collect(), w, t).unwrap()
    }

    #[test]
    fn baselines() {
        let t = topo(2, 2);
        let w = one_cell_workload(&[1, 1, 1, 1], &t);
        let seq = sequential_map(&w, &t).unwrap();
        assert_eq!(seq.assignment(), &[Slot::Task(0), Slot::Task(1), Slot::Task(2), Slot::Task(3)]);
        let zz = zigzag_map(&w, &t).unwrap();
        // Macro order m0, m1, m3, m2.
        assert_eq!(zz.assignment(), &[Slot::Task(0), Slot::Task(1), Slot::Task(3), Slot::Task(2)]);
        let w5 = one_cell_workload(&[1; 5], &t);
        assert!(matches!(sequential_map(&w5, &t), Err(Error::Capacity { tasks: 5, macros: 4 })));
    }

    #[test]
    fn single_task_symmetric() {
        let t = topo(2, 2);
        let w = one_cell_workload(&[7], &t);
        let s = Scorer::new(&t, &w, FlipProfile::seeded(1), Mode::LowPower).unwrap();
        let scores: Vec<f64> = (0..4)
            .map(|m| {
                let mut slots = vec![None; 4];
                slots[m] = Some(0);
                s.score(&mapping(&slots, &w, &t)).unwrap().scalar
            })
            .collect();
        assert!(scores.windows(2).all(|p| p[0] == p[1]), "{scores:?}");
    }

    /// Independent evaluation of one full Group for the two-task example.
    fn group_energy(t: &ChipTopology, profile: &FlipProfile, pair: VfPair, hrs: &[f64], cycles: u64) -> f64 {
        let bits = 5.0;
        hrs.iter()
            .map(|hr| {
                let sum: f64 = (0..cycles).map(|c| profile.probs[c as usize % 100]).sum();
                t.energy.c_dyn * pair.voltage.powi(2) * bits * hr * sum + t.energy.p_leak * cycles as f64 / pair.frequency
            })
            .sum()
    }

    #[test]
    fn separating_hr_classes_helps() {
        // Two full Groups of two macros; values 0b00001 (HR 0.2) and 0b00111
        // (HR 0.6), plus fillers so no Group has an empty macro.
        let t = topo(2, 2);
        let w = one_cell_workload(&[1, 7, 1, 7], &t);
        let profile = FlipProfile::seeded(3);
        for mode in [Mode::Sprint, Mode::LowPower] {
            let s = Scorer::new(&t, &w, profile.clone(), mode).unwrap();
            let apart = s.score(&mapping(&[Some(0), Some(2), Some(1), Some(3)], &w, &t)).unwrap();
            let together = s.score(&mapping(&[Some(0), Some(1), Some(2), Some(3)], &w, &t)).unwrap();
            assert!(apart.scalar <= together.scalar, "{mode:?}");

            let p20 = select_pair(&t.vf_table, Level::new(20).unwrap(), mode).unwrap();
            let p60 = select_pair(&t.vf_table, Level::new(60).unwrap(), mode).unwrap();
            let cycles = 4 * 5;
            let e_apart = group_energy(&t, &profile, p20, &[0.2, 0.2], cycles) + group_energy(&t, &profile, p60, &[0.6, 0.6], cycles);
            let e_together = 2.0 * group_energy(&t, &profile, p60, &[0.2, 0.6], cycles);
            assert_relative_eq!(apart.energy, e_apart, max_relative = 1e-12);
            assert_relative_eq!(together.energy, e_together, max_relative = 1e-12);
            let r = select_pair(&t.vf_table, Level::DVFS, mode).unwrap().frequency;
            assert_relative_eq!(apart.delay, cycles as f64 * r / p60.frequency, max_relative = 1e-12);
        }
    }

    #[test]
    fn empty_macro_lowers_group_level() {
        // Group of three: HR 0.6 + 0.4 with one empty macro spreads to 1/3.
        let t = topo(2, 3);
        let w = one_cell_workload(&[7, 3, -1], &t);
        let s = Scorer::new(&t, &w, FlipProfile::seeded(0), Mode::Sprint).unwrap();
        let full = s.group_plan(&mapping(&[Some(0), Some(1), Some(2), None, None, None], &w, &t), 0).unwrap().unwrap();
        assert_eq!(full.level, Level::DVFS);
        let spread = s.group_plan(&mapping(&[Some(0), Some(1), None, Some(2), None, None], &w, &t), 0).unwrap().unwrap();
        assert!(spread.redistributed);
        assert_relative_eq!(spread.hr.unwrap(), (0.6 + 0.4) / 3.0);
        assert_eq!(spread.level, Level::new(35).unwrap());
        let unspread = safe_level_for(OperatorKind::WeightStationary, 0.6).unwrap();
        assert!(spread.level < unspread);
    }

    #[test]
    fn switch_moves_and_preserves_tasks() {
        let t = topo(2, 2);
        let w = one_cell_workload(&[1, 3, 7], &t);
        let mut m = mapping(&[Some(0), Some(1), Some(2), None], &w, &t);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut saw_empty_move = false;
        for _ in 0..200 {
            let next = switch(&m, &t, &mut rng).unwrap();
            let diff: Vec<usize> = (0..4).filter(|&i| next.slot(i) != m.slot(i)).collect();
            if !diff.is_empty() {
                assert_eq!(diff.len(), 2);
                assert_ne!(t.group_of(diff[0]), t.group_of(diff[1]));
                saw_empty_move |= diff.iter().any(|&i| next.slot(i).is_empty());
            }
            let mut tasks: Vec<usize> = next.assignment().iter().filter_map(|s| s.task()).collect();
            tasks.sort_unstable();
            assert_eq!(tasks, vec![0, 1, 2]);
            m = next;
        }
        assert!(saw_empty_move);
        let one = topo(1, 4);
        let w1 = one_cell_workload(&[1], &one);
        assert!(switch(&mapping(&[Some(0), None, None, None], &w1, &one), &one, &mut rng).is_err());
    }

    #[test]
    fn acceptor_shape() {
        assert_eq!(accept_probability(-1.0, 10.0, 0.5), 1.0);
        assert_relative_eq!(accept_probability(1e-12, 10.0, 1.0), 1.0, epsilon = 1e-9);
        assert!(accept_probability(2.0, 10.0, 1.0) < accept_probability(1.0, 10.0, 1.0));
        assert!(accept_probability(1.0, 10.0, 0.5) < accept_probability(1.0, 10.0, 1.0));
    }

    /// Always returns the top of the range, so `random::<f64>()` is just
    /// below 1 and every uphill move is rejected.
    struct Saturated;

    impl RngCore for Saturated {
        fn next_u32(&mut self) -> u32 {
            u32::MAX
        }
        fn next_u64(&mut self) -> u64 {
            u64::MAX
        }
        fn fill_bytes(&mut self, dst: &mut [u8]) {
            dst.fill(0xff);
        }
    }

    #[test]
    fn ten_rejections_end_search() {
        let t = topo(2, 2);
        let w = one_cell_workload(&[1, 1, 7, 7], &t);
        let start = mapping(&[Some(0), Some(1), Some(2), Some(3)], &w, &t);
        let mut calls = 0;
        let out = anneal(&start, &t, &AnnealConfig::default(), &mut Saturated, |m| {
            calls += 1;
            // Any change is uphill.
            Ok(MappingScore {
                delay: 0.0,
                energy: 0.0,
                scalar: if m == &start { 1.0 } else { 2.0 },
            })
        })
        .unwrap();
        assert_eq!(out.stop, StopReason::Rejections);
        assert_eq!(out.steps, 10);
        assert_eq!(calls, 11);
        assert_eq!(out.mapping, start);
    }

    #[test]
    fn downhill_always_accepted() {
        let t = topo(2, 2);
        let w = one_cell_workload(&[1, 1, 7, 7], &t);
        let start = mapping(&[Some(0), Some(1), Some(2), Some(3)], &w, &t);
        let cfg = AnnealConfig {
            max_steps: 5,
            ..Default::default()
        };
        let mut n = 0.0;
        let out = anneal(&start, &t, &cfg, &mut Saturated, |_| {
            n += 1.0;
            Ok(MappingScore {
                delay: 0.0,
                energy: 0.0,
                scalar: 100.0 - n,
            })
        })
        .unwrap();
        assert_eq!(out.accepted, 5);
        assert_eq!(out.score.scalar, 94.0);
        assert_eq!(out.stop, StopReason::MaxSteps);
    }

    #[test]
    fn anneal_never_regresses() {
        let t = topo(2, 3);
        let w = one_cell_workload(&[1, -1, 3, 7, 15], &t);
        let start = sequential_map(&w, &t).unwrap();
        for mode in [Mode::Sprint, Mode::LowPower] {
            let s = Scorer::new(&t, &w, FlipProfile::seeded(2), mode).unwrap();
            for seed in 0..5 {
                let cfg = AnnealConfig { seed, ..Default::default() };
                let out = anneal_seeded(&start, &s, &t, &cfg).unwrap();
                assert!(out.score.scalar <= out.initial_score.scalar);
                assert_eq!(s.score(&out.mapping).unwrap(), out.score);
            }
        }
    }

    #[test]
    fn bad_config() {
        for cfg in [
            AnnealConfig { q_cool: 1.0, ..Default::default() },
            AnnealConfig { max_steps: 0, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
