//! V-f level selection and the per-Group level controller.
//!
//! Each Macro Group owns a [`BoosterState`]. The safe level comes from the
//! worst HR in the Group and is never exceeded by `R_tog`; the aggressive
//! level (a-level) starts from a fixed table and is tuned at run time by IR
//! failures: a failure snaps the Group back to its safe level, failures in
//! quick succession lower the a-level, and long quiet stretches raise it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ir_drop_estimate;
use crate::model::{IrCoefficients, Level, OperatorKind, VfPair, VfTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Highest frequency available at the level.
    Sprint,
    /// Lowest voltage available at the level.
    LowPower,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sprint" => Ok(Mode::Sprint),
            "low-power" => Ok(Mode::LowPower),
            _ => Err(Error::validation(format!("unknown mode {s:?}"))),
        }
    }
}

/// Rounds a Group's worst HR up to the next 5% level. Anything at or below
/// 20% maps to 20%, anything above 60% falls back to 100%.
pub fn safe_level(hr_group: f64) -> Result<Level> {
    if !(0.0..=1.0).contains(&hr_group) {
        return Err(Error::validation(format!("HR {hr_group} outside [0, 1]")));
    }
    // The epsilon absorbs float noise in exact multiples such as 0.55.
    let notch = (hr_group * 100.0 / Level::STEP as f64 - 1e-9).ceil().max(0.0) as u8 * Level::STEP;
    if notch > Level::MAX_AGGRESSIVE.percent() {
        return Ok(Level::DVFS);
    }
    Level::new(notch.max(Level::MIN.percent()))
}

/// Safe level for an operator: input-determined data is unknown offline and
/// always gets 100%.
pub fn safe_level_for(kind: OperatorKind, hr: f64) -> Result<Level> {
    match kind {
        OperatorKind::InputDetermined => Ok(Level::DVFS),
        OperatorKind::WeightStationary => safe_level(hr),
    }
}

/// Initial aggressive level for a safe level.
pub fn initial_a_level(safe: Level) -> Result<Level> {
    let a = match safe.percent() {
        100 => 60,
        60 => 40,
        55 | 50 | 45 => 35,
        40 | 35 => 30,
        30 => 25,
        25 | 20 => 20,
        p => return Err(Error::validation(format!("no initial a-level for safe level {p}%"))),
    };
    Level::new(a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoosterEvent {
    None,
    IrFailure,
    /// Another macro of a shared Set changed frequency.
    SetFreqSync(Level),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoosterState {
    pub group: usize,
    pub safe_level: Level,
    pub a_level: Level,
    pub level: Level,
    pub safe_counter: u32,
    pub mode: Mode,
    pub current_pair: VfPair,
}

/// Level adjustment for one Macro Group.
#[derive(Debug, Clone, Copy)]
pub struct Controller<'a> {
    pub table: &'a VfTable,
    /// Quiet-cycle window.
    pub beta: u32,
}

impl<'a> Controller<'a> {
    pub fn new(table: &'a VfTable, beta: u32) -> Self {
        Self { table, beta }
    }

    /// Starts at the initial a-level for `safe`. Both levels are snapped to
    /// levels the table actually lists.
    pub fn init(&self, group: usize, safe: Level, mode: Mode) -> Result<BoosterState> {
        let safe_level = self.table.at_or_above(safe);
        let a0 = initial_a_level(safe_level)?;
        let a_level = self.table.at_or_below(a0.min(self.ceiling(safe_level)));
        Ok(BoosterState {
            group,
            safe_level,
            a_level,
            level: a_level,
            safe_counter: 0,
            mode,
            current_pair: select_pair(self.table, a_level, mode)?,
        })
    }

    /// Highest level the a-level may climb to.
    fn ceiling(&self, safe: Level) -> Level {
        safe.min(Level::MAX_AGGRESSIVE)
    }

    fn down(&self, a: Level) -> Level {
        self.table
            .caps()
            .filter(|&c| c < a && c >= Level::MIN)
            .last()
            .unwrap_or(a)
    }

    fn up(&self, a: Level, safe: Level) -> Level {
        let ceiling = self.ceiling(safe);
        self.table.caps().find(|&c| c > a && c <= ceiling).unwrap_or(a)
    }

    /// A failure this soon after the last reset lowers the a-level.
    pub fn short_interval(&self) -> f64 {
        0.2 * self.beta as f64
    }

    /// One cycle of the level controller.
    pub fn step(&self, state: &BoosterState, event: BoosterEvent) -> BoosterState {
        let mut s = *state;
        match event {
            BoosterEvent::IrFailure => {
                s.level = s.safe_level;
                if (s.safe_counter as f64) < self.short_interval() {
                    s.safe_counter = 0;
                    s.a_level = self.down(s.a_level);
                }
                s.safe_counter = 0;
            }
            BoosterEvent::SetFreqSync(level) => {
                s.level = level;
                s.safe_counter = 0;
            }
            BoosterEvent::None => {
                s.safe_counter += 1;
                if s.safe_counter == self.beta {
                    s.level = s.a_level;
                }
                if s.safe_counter > 2 * self.beta {
                    s.a_level = self.up(s.a_level, s.safe_level);
                    s.level = s.a_level;
                    s.safe_counter = self.beta;
                }
            }
        }
        if let Ok(p) = select_pair(self.table, s.level, s.mode) {
            s.current_pair = p;
        }
        s
    }
}

/// Picks a pair from a level's subset by mode. Ties break toward lower
/// voltage, then lower frequency.
pub fn select_pair(table: &VfTable, level: Level, mode: Mode) -> Result<VfPair> {
    let subset = table
        .level(level)
        .ok_or_else(|| Error::validation(format!("level {level} not in vf_table")))?;
    let key = |p: &VfPair| match mode {
        Mode::Sprint => (-p.frequency, p.voltage),
        Mode::LowPower => (p.voltage, p.frequency),
    };
    subset
        .pairs
        .iter()
        .copied()
        .min_by(|a, b| key(a).partial_cmp(&key(b)).expect("finite pairs"))
        .ok_or_else(|| Error::validation(format!("level {level} has no pairs")))
}

/// Lowest-voltage pair of `level` rated for at least `frequency`.
pub fn pair_for_frequency(table: &VfTable, level: Level, frequency: f64) -> Option<VfPair> {
    table.level(level)?.pairs.iter().copied().filter(|p| p.frequency >= frequency).min_by(|a, b| {
        (a.voltage, a.frequency)
            .partial_cmp(&(b.voltage, b.frequency))
            .expect("finite pairs")
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorReading {
    pub supply_voltage: f64,
    pub ir_failure: bool,
}

/// Threshold comparator on the modelled supply: fails strictly below
/// `v_fail`.
pub fn monitor(rtog_macro: f64, pair: VfPair, coeffs: &IrCoefficients, v_fail: f64) -> Result<MonitorReading> {
    let supply_voltage = pair.voltage - ir_drop_estimate(rtog_macro, coeffs)?;
    Ok(MonitorReading {
        supply_voltage,
        ir_failure: supply_voltage < v_fail,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecomputeEvent {
    pub set: usize,
    pub failing_macro: usize,
    pub stall_cycles: u32,
    pub new_pair: VfPair,
    /// The frequency dropped, so the rest of the Set must follow.
    pub freq_sync: bool,
}

/// Chooses the pair a failing macro recomputes at. Raising the voltage at
/// the current frequency is preferred; otherwise the frequency drops to the
/// fastest pair the safe level offers below it.
pub fn recompute(
    set: usize,
    failing_macro: usize,
    current: VfPair,
    safe: Level,
    table: &VfTable,
    window: u32,
    latency: u32,
) -> Result<RecomputeEvent> {
    let subset = table
        .level(safe)
        .ok_or_else(|| Error::Unrecoverable(format!("safe level {safe} not in vf_table")))?;
    let event = |new_pair, freq_sync| RecomputeEvent {
        set,
        failing_macro,
        stall_cycles: window + latency,
        new_pair,
        freq_sync,
    };
    if let Some(p) = pair_for_frequency(table, safe, current.frequency) {
        if p.voltage > current.voltage {
            return Ok(event(
                VfPair {
                    voltage: p.voltage,
                    frequency: current.frequency,
                },
                false,
            ));
        }
        return Err(Error::Unrecoverable(format!(
            "macro {failing_macro} failed at {current}, already at or above safe level {safe}"
        )));
    }
    subset
        .pairs
        .iter()
        .copied()
        .filter(|p| p.frequency < current.frequency)
        .min_by(|a, b| (-a.frequency, a.voltage).partial_cmp(&(-b.frequency, b.voltage)).expect("finite pairs"))
        .map(|p| event(p, true))
        .ok_or_else(|| Error::Unrecoverable(format!("no recovery pair below {current} at level {safe}")))
}
