use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::check_q;

/// An `R_tog` level in percent: a multiple of 5 in `20..=60`, or 100 for the
/// worst-case (plain DVFS) sign-off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Level(u8);

impl Level {
    pub const MIN: Level = Level(20);
    /// Highest level an aggressive setting may reach.
    pub const MAX_AGGRESSIVE: Level = Level(60);
    pub const DVFS: Level = Level(100);
    pub const STEP: u8 = 5;

    pub fn new(percent: u8) -> Result<Self> {
        let ok = percent == 100 || ((20..=60).contains(&percent) && percent.is_multiple_of(Self::STEP));
        if ok {
            Ok(Level(percent))
        } else {
            Err(Error::validation(format!("invalid R_tog level {percent}%")))
        }
    }

    pub fn percent(self) -> u8 {
        self.0
    }

    pub fn fraction(self) -> f64 {
        self.0 as f64 / 100.0
    }

    /// Every valid level, ascending.
    pub fn all() -> impl Iterator<Item = Level> {
        (20..=60).step_by(5).chain(std::iter::once(100)).map(Level)
    }
}

impl TryFrom<u8> for Level {
    type Error = Error;
    fn try_from(p: u8) -> Result<Self> {
        Level::new(p)
    }
}

impl From<Level> for u8 {
    fn from(l: Level) -> u8 {
        l.0
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}%", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VfPair {
    /// Volts.
    pub voltage: f64,
    /// Hz.
    pub frequency: f64,
}

impl fmt::Display for VfPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}V@{:.3}GHz", self.voltage, self.frequency / 1e9)
    }
}

/// The subset of V-f pairs signed off for one `R_tog` level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VfLevel {
    pub rtog_cap: Level,
    pub pairs: Vec<VfPair>,
}

/// Parameters for [`VfTable::calibrated`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VfCalibration {
    pub base_frequency: f64,
    /// Relative spacing of the frequency grid.
    pub frequency_step: f64,
    /// Extra volts needed per unit of relative frequency above base.
    pub timing_slope: f64,
    /// Voltages are rounded up to this grid.
    pub voltage_grid: f64,
}

impl Default for VfCalibration {
    fn default() -> Self {
        Self {
            base_frequency: 1.0e9,
            frequency_step: 0.04,
            timing_slope: 0.3,
            voltage_grid: 5.0e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VfTable {
    pub levels: Vec<VfLevel>,
}

impl VfTable {
    pub fn level(&self, cap: Level) -> Option<&VfLevel> {
        self.levels.iter().find(|l| l.rtog_cap == cap)
    }

    pub fn caps(&self) -> impl Iterator<Item = Level> + '_ {
        self.levels.iter().map(|l| l.rtog_cap)
    }

    /// Lowest listed level at or above `l`. The 100% level always exists in
    /// a valid table.
    pub fn at_or_above(&self, l: Level) -> Level {
        self.caps().find(|&c| c >= l).unwrap_or(Level::DVFS)
    }

    /// Highest listed level at or below `l`, falling back to the lowest.
    pub fn at_or_below(&self, l: Level) -> Level {
        self.caps()
            .filter(|&c| c <= l)
            .last()
            .unwrap_or_else(|| self.levels[0].rtog_cap)
    }

    /// Signs off one pair per frequency grid point for every level, at the
    /// lowest grid voltage that keeps the supply at or above `v_fail` when
    /// `R_tog` equals the level's cap. Pairs above `vdd_nominal` are dropped.
    pub fn calibrated(
        coeffs: &IrCoefficients,
        v_fail: f64,
        vdd_nominal: f64,
        cal: &VfCalibration,
    ) -> Self {
        let levels = Level::all()
            .map(|cap| {
                let mut pairs = Vec::new();
                for k in 0.. {
                    let rel = cal.frequency_step * k as f64;
                    let needed = v_fail
                        + coeffs.static_drop
                        + coeffs.dynamic_slope * cap.fraction()
                        + cal.timing_slope * rel;
                    // The 1 nV guard keeps float noise from landing a pair a
                    // hair under its requirement.
                    let voltage = ((needed + 1e-9) / cal.voltage_grid).ceil() * cal.voltage_grid;
                    if voltage > vdd_nominal + 1e-12 {
                        break;
                    }
                    pairs.push(VfPair {
                        voltage,
                        frequency: cal.base_frequency * (1.0 + rel),
                    });
                }
                VfLevel {
                    rtog_cap: cap,
                    pairs,
                }
            })
            .filter(|l| !l.pairs.is_empty())
            .collect();
        VfTable { levels }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::validation("vf_table has no levels"));
        }
        for w in self.levels.windows(2) {
            if w[0].rtog_cap >= w[1].rtog_cap {
                return Err(Error::validation("vf_table rtog_cap values must be strictly increasing"));
            }
        }
        if self.level(Level::DVFS).is_none() {
            return Err(Error::validation("vf_table must contain the 100% level"));
        }
        for level in &self.levels {
            if level.pairs.is_empty() {
                return Err(Error::validation(format!("vf_table level {} has no pairs", level.rtog_cap)));
            }
            for p in &level.pairs {
                if !(p.voltage > 0.0 && p.frequency > 0.0) {
                    return Err(Error::validation(format!(
                        "vf_table level {}: non-positive pair {p}",
                        level.rtog_cap
                    )));
                }
            }
            if level.pairs.windows(2).any(|w| w[0].frequency > w[1].frequency) {
                return Err(Error::validation(format!(
                    "vf_table level {}: pairs not sorted by frequency",
                    level.rtog_cap
                )));
            }
        }
        for (i, lo) in self.levels.iter().enumerate() {
            for hi in &self.levels[i + 1..] {
                for a in &lo.pairs {
                    for b in hi.pairs.iter().filter(|b| b.frequency == a.frequency) {
                        if b.voltage < a.voltage {
                            return Err(Error::validation(format!(
                                "vf_table: level {} lists {b} below level {}'s {a}",
                                hi.rtog_cap, lo.rtog_cap
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Lumped constants of the affine IR-drop model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrCoefficients {
    /// Leakage term, volts.
    pub static_drop: f64,
    /// Short-circuit plus switching term, volts per unit `R_tog`.
    pub dynamic_slope: f64,
}

impl Default for IrCoefficients {
    /// 140 mV total drop at `R_tog` = 1.
    fn default() -> Self {
        Self {
            static_drop: 0.02,
            dynamic_slope: 0.12,
        }
    }
}

/// Two-term energy model: dynamic `c_dyn * V^2` per toggled bit plus
/// leakage power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    /// Joules per volt squared per toggled bit.
    pub c_dyn: f64,
    /// Watts per macro.
    pub p_leak: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self {
            c_dyn: 1.0e-15,
            p_leak: 3.0e-4,
        }
    }
}

pub const DEFAULT_V_FAIL: f64 = 0.6095;
pub const DEFAULT_VDD: f64 = 0.75;
/// Default macro geometry: banks per macro and cells per bank.
pub const DEFAULT_BANKS: usize = 32;
pub const DEFAULT_CELLS: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TopologyDoc")]
pub struct ChipTopology {
    pub n_groups: usize,
    pub macros_per_group: usize,
    pub banks_per_macro: usize,
    pub cells_per_bank: usize,
    pub q: u8,
    pub vf_table: VfTable,
    pub beta: u32,
    pub v_fail_threshold: f64,
    pub vdd_nominal: f64,
    pub ir_coeffs: IrCoefficients,
    /// Cycles to switch a V-f pair.
    pub switch_latency: u32,
    pub energy: EnergyModel,
}

/// Wire form of [`ChipTopology`]; everything but the group/macro counts
/// has a default.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyDoc {
    pub n_groups: usize,
    pub macros_per_group: usize,
    #[serde(default = "d_banks")]
    pub banks_per_macro: usize,
    #[serde(default = "d_cells")]
    pub cells_per_bank: usize,
    #[serde(default = "d_q")]
    pub q: u8,
    #[serde(default)]
    pub vf_table: Option<VfTable>,
    #[serde(default = "d_beta")]
    pub beta: u32,
    #[serde(default = "d_vfail")]
    pub v_fail_threshold: f64,
    #[serde(default = "d_vdd")]
    pub vdd_nominal: f64,
    #[serde(default)]
    pub ir_coeffs: IrCoefficients,
    #[serde(default = "d_latency")]
    pub switch_latency: u32,
    #[serde(default)]
    pub energy: EnergyModel,
}

fn d_banks() -> usize {
    DEFAULT_BANKS
}
fn d_cells() -> usize {
    DEFAULT_CELLS
}
fn d_q() -> u8 {
    8
}
fn d_beta() -> u32 {
    100
}
fn d_vfail() -> f64 {
    DEFAULT_V_FAIL
}
fn d_vdd() -> f64 {
    DEFAULT_VDD
}
fn d_latency() -> u32 {
    10
}

impl TryFrom<TopologyDoc> for ChipTopology {
    type Error = Error;

    fn try_from(d: TopologyDoc) -> Result<Self> {
        let vf_table = d.vf_table.unwrap_or_else(|| {
            VfTable::calibrated(&d.ir_coeffs, d.v_fail_threshold, d.vdd_nominal, &VfCalibration::default())
        });
        let t = ChipTopology {
            n_groups: d.n_groups,
            macros_per_group: d.macros_per_group,
            banks_per_macro: d.banks_per_macro,
            cells_per_bank: d.cells_per_bank,
            q: d.q,
            vf_table,
            beta: d.beta,
            v_fail_threshold: d.v_fail_threshold,
            vdd_nominal: d.vdd_nominal,
            ir_coeffs: d.ir_coeffs,
            switch_latency: d.switch_latency,
            energy: d.energy,
        };
        t.validate()?;
        Ok(t)
    }
}

impl ChipTopology {
    /// A topology with default electrical parameters and a calibrated table.
    pub fn new(n_groups: usize, macros_per_group: usize, banks_per_macro: usize, cells_per_bank: usize) -> Result<Self> {
        TopologyDoc {
            n_groups,
            macros_per_group,
            banks_per_macro,
            cells_per_bank,
            q: d_q(),
            vf_table: None,
            beta: d_beta(),
            v_fail_threshold: d_vfail(),
            vdd_nominal: d_vdd(),
            ir_coeffs: IrCoefficients::default(),
            switch_latency: d_latency(),
            energy: EnergyModel::default(),
        }
        .try_into()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_groups", self.n_groups),
            ("macros_per_group", self.macros_per_group),
            ("banks_per_macro", self.banks_per_macro),
            ("cells_per_bank", self.cells_per_bank),
        ] {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be at least 1")));
            }
        }
        check_q(self.q)?;
        if self.beta == 0 {
            return Err(Error::validation("beta must be at least 1"));
        }
        if !(self.v_fail_threshold > 0.0 && self.v_fail_threshold < self.vdd_nominal) {
            return Err(Error::validation(format!(
                "v_fail_threshold ({}) must be positive and below vdd_nominal ({})",
                self.v_fail_threshold, self.vdd_nominal
            )));
        }
        let c = &self.ir_coeffs;
        if !(c.static_drop >= 0.0 && c.dynamic_slope >= 0.0) {
            return Err(Error::validation("ir_coeffs must be non-negative"));
        }
        let e = &self.energy;
        if !(e.c_dyn >= 0.0 && e.p_leak >= 0.0) {
            return Err(Error::validation("energy coefficients must be non-negative"));
        }
        self.vf_table.validate()
    }

    pub fn total_macros(&self) -> usize {
        self.n_groups * self.macros_per_group
    }

    pub fn group_of(&self, macro_id: usize) -> usize {
        macro_id / self.macros_per_group
    }

    pub fn macros_in_group(&self, group: usize) -> std::ops::Range<usize> {
        group * self.macros_per_group..(group + 1) * self.macros_per_group
    }

    /// Weights one macro holds.
    pub fn tile_capacity(&self) -> usize {
        self.banks_per_macro * self.cells_per_bank
    }
}

/// Parses and validates a topology JSON document. Schema problems name the
/// offending field.
pub fn load_topology(doc: &str) -> Result<ChipTopology> {
    let de = &mut serde_json::Deserializer::from_str(doc);
    let raw: TopologyDoc = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::parse(path, e.into_inner().to_string())
    })?;
    raw.try_into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document() {
        let t = load_topology(r#"{"n_groups":1,"macros_per_group":1,"banks_per_macro":1,"cells_per_bank":8,"q":8}"#)
            .unwrap();
        assert_eq!(t.cells_per_bank, 8);
        assert_eq!(t.total_macros(), 1);
        assert!(t.vf_table.level(Level::DVFS).is_some());
    }

    #[test]
    fn threshold_above_vdd_rejected() {
        let err = load_topology(r#"{"n_groups":1,"macros_per_group":1,"v_fail_threshold":0.8,"vdd_nominal":0.75}"#)
            .unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn sixteen_groups_of_four() {
        let t = load_topology(r#"{"n_groups":16,"macros_per_group":4}"#).unwrap();
        assert_eq!(t.total_macros(), 64);
        assert_eq!(t.group_of(63), 15);
        assert_eq!(t.macros_in_group(2), 8..12);
    }

    #[test]
    fn parse_error_names_field() {
        let err = load_topology(r#"{"n_groups":1,"macros_per_group":"four"}"#).unwrap_err();
        match err {
            Error::Parse { field, .. } => assert_eq!(field, "macros_per_group"),
            other => panic!("unexpected {other}"),
        }
        let err = load_topology(r#"{"n_groups":1}"#).unwrap_err();
        assert!(err.to_string().contains("macros_per_group"), "{err}");
    }

    #[test]
    fn zero_counts_rejected() {
        assert!(load_topology(r#"{"n_groups":0,"macros_per_group":1}"#).is_err());
    }

    #[test]
    fn calibrated_table_is_valid_and_anchored() {
        let coeffs = IrCoefficients::default();
        let table = VfTable::calibrated(&coeffs, DEFAULT_V_FAIL, DEFAULT_VDD, &VfCalibration::default());
        table.validate().unwrap();
        assert_eq!(table.levels.len(), 10);
        // Worst-case sign-off lands on nominal vdd at base frequency.
        let dvfs = table.level(Level::DVFS).unwrap();
        assert_eq!(dvfs.pairs.len(), 1);
        assert!((dvfs.pairs[0].voltage - 0.75).abs() < 1e-12);
        // Every pair survives its own cap.
        for level in &table.levels {
            for p in &level.pairs {
                let supply = p.voltage - coeffs.static_drop - coeffs.dynamic_slope * level.rtog_cap.fraction();
                assert!(supply >= DEFAULT_V_FAIL, "{} {p}", level.rtog_cap);
            }
        }
        // Lower levels reach higher frequencies.
        let top = |l: u8| table.level(Level::new(l).unwrap()).unwrap().pairs.last().unwrap().frequency;
        assert!(top(20) > top(60));
    }

    #[test]
    fn table_rejects_unsafe_ordering() {
        let pair = |v, f| VfPair { voltage: v, frequency: f };
        let table = VfTable {
            levels: vec![
                VfLevel { rtog_cap: Level::new(20).unwrap(), pairs: vec![pair(0.70, 1e9)] },
                VfLevel { rtog_cap: Level::DVFS, pairs: vec![pair(0.65, 1e9)] },
            ],
        };
        assert!(table.validate().is_err());
        let table = VfTable {
            levels: vec![VfLevel { rtog_cap: Level::new(50).unwrap(), pairs: vec![pair(0.7, 1e9)] }],
        };
        assert!(table.validate().is_err(), "missing 100% level");
    }

    #[test]
    fn levels() {
        assert!(Level::new(45).is_ok());
        assert!(Level::new(47).is_err());
        assert!(Level::new(65).is_err());
        assert_eq!(Level::all().count(), 10);
    }
}
