use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::popcount;
use crate::wds::{shift_weights, ShiftedLayer};

use super::tensor::{read_tensor, QuantizedTensor};
use super::topology::ChipTopology;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    /// Weights are the in-memory data (conv, linear, Q/K/V generation).
    WeightStationary,
    /// In-memory data comes from an earlier operator's outputs (QK^T, SV).
    InputDetermined,
}

/// Half-open row and column ranges of an operator's `[out, in]` weight
/// matrix. Rows land on banks, columns on the cells of each bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub rows: [usize; 2],
    pub cols: [usize; 2],
}

impl Tile {
    pub fn n_rows(&self) -> usize {
        self.rows[1] - self.rows[0]
    }

    pub fn n_cols(&self) -> usize {
        self.cols[1] - self.cols[0]
    }

    pub fn area(&self) -> usize {
        self.n_rows() * self.n_cols()
    }
}

/// Where an operator's input vectors come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSpec {
    /// Generated from a per-cycle flip probability drawn from
    /// `N(mu, sigma)` clipped to `[0, 1]`.
    Synthetic {
        vectors: usize,
        #[serde(default = "d_mu")]
        mu: f64,
        #[serde(default = "d_sigma")]
        sigma: f64,
    },
    /// `[vectors, in_dim]` activations.
    Tensor(QuantizedTensor),
}

fn d_mu() -> f64 {
    0.5
}
fn d_sigma() -> f64 {
    0.15
}

impl Default for InputSpec {
    fn default() -> Self {
        InputSpec::Synthetic {
            vectors: 16,
            mu: d_mu(),
            sigma: d_sigma(),
        }
    }
}

impl InputSpec {
    pub fn vectors(&self) -> usize {
        match self {
            InputSpec::Synthetic { vectors, .. } => *vectors,
            InputSpec::Tensor(t) => t.shape()[0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Operator {
    pub name: String,
    pub kind: OperatorKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight: Option<QuantizedTensor>,
    /// `[out, in]` of the weight matrix.
    pub dims: [usize; 2],
    pub tiles: Vec<Tile>,
    pub inputs: InputSpec,
    /// Applied weight distribution shift, if any.
    #[serde(skip)]
    pub shift: Option<ShiftedLayer>,
}

impl Operator {
    /// The data actually resident in the macros: the shifted weights when a
    /// shift is applied, else the base weights. `None` for input-determined
    /// operators.
    pub fn in_memory(&self) -> Option<&QuantizedTensor> {
        match &self.shift {
            Some(s) => Some(&s.shifted),
            None => self.weight.as_ref(),
        }
    }

    pub fn macs_per_vector(&self) -> usize {
        self.dims[0] * self.dims[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Task {
    pub id: usize,
    pub op: usize,
    pub tile: Tile,
}

/// Validated list of operators and the tasks (tiles) they split into.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Workload {
    pub operators: Vec<Operator>,
    #[serde(skip)]
    tasks: Vec<Task>,
}

/// Splits an `[out, in]` matrix into macro-sized tiles, row-major.
pub fn auto_tiles(dims: [usize; 2], topo: &ChipTopology) -> Vec<Tile> {
    let mut tiles = Vec::new();
    for r in (0..dims[0]).step_by(topo.banks_per_macro) {
        for c in (0..dims[1]).step_by(topo.cells_per_bank) {
            tiles.push(Tile {
                rows: [r, (r + topo.banks_per_macro).min(dims[0])],
                cols: [c, (c + topo.cells_per_bank).min(dims[1])],
            });
        }
    }
    tiles
}

fn check_partition(op: &Operator, topo: &ChipTopology) -> Result<()> {
    let [rows, cols] = op.dims;
    let mut covered = vec![false; rows * cols];
    for t in &op.tiles {
        if t.rows[0] >= t.rows[1] || t.cols[0] >= t.cols[1] || t.rows[1] > rows || t.cols[1] > cols {
            return Err(Error::validation(format!("{}: tile {t:?} outside [{rows}, {cols}]", op.name)));
        }
        if t.n_rows() > topo.banks_per_macro || t.n_cols() > topo.cells_per_bank {
            return Err(Error::validation(format!(
                "{}: tile {t:?} exceeds a macro ({} banks x {} cells)",
                op.name, topo.banks_per_macro, topo.cells_per_bank
            )));
        }
        for r in t.rows[0]..t.rows[1] {
            for c in t.cols[0]..t.cols[1] {
                let cell = &mut covered[r * cols + c];
                if *cell {
                    return Err(Error::validation(format!("{}: tiles overlap at ({r}, {c})", op.name)));
                }
                *cell = true;
            }
        }
    }
    if covered.iter().any(|c| !c) {
        return Err(Error::validation(format!("{}: tiles do not cover the weight matrix", op.name)));
    }
    Ok(())
}

impl Workload {
    /// Validates operators against the topology. Operators with no tiles are
    /// tiled automatically.
    pub fn new(mut operators: Vec<Operator>, topo: &ChipTopology) -> Result<Self> {
        if operators.is_empty() {
            return Err(Error::validation("workload has no operators"));
        }
        for (i, op) in operators.iter_mut().enumerate() {
            match (op.kind, &op.weight) {
                (OperatorKind::WeightStationary, None) => {
                    return Err(Error::validation(format!("{}: weight-stationary operator needs a weight", op.name)))
                }
                (OperatorKind::InputDetermined, Some(_)) => {
                    return Err(Error::validation(format!("{}: input-determined operator cannot carry a weight", op.name)))
                }
                (OperatorKind::InputDetermined, None) if i == 0 => {
                    return Err(Error::validation(format!(
                        "{}: input-determined operator needs a preceding operator",
                        op.name
                    )))
                }
                _ => {}
            }
            if let Some(w) = &op.weight {
                let (r, c) = w.dims2()?;
                op.dims = [r, c];
                if w.q() != topo.q {
                    return Err(Error::validation(format!("{}: weight q={} but chip q={}", op.name, w.q(), topo.q)));
                }
            }
            if op.dims[0] == 0 || op.dims[1] == 0 {
                return Err(Error::Shape(format!("{}: dims must be positive", op.name)));
            }
            match &op.inputs {
                InputSpec::Synthetic { vectors, mu, sigma } => {
                    if *vectors == 0 || !(mu.is_finite() && *sigma >= 0.0) {
                        return Err(Error::validation(format!("{}: bad synthetic input spec", op.name)));
                    }
                }
                InputSpec::Tensor(t) => {
                    let (_, c) = t.dims2()?;
                    if c != op.dims[1] {
                        return Err(Error::Shape(format!(
                            "{}: inputs have {c} columns, operator takes {}",
                            op.name, op.dims[1]
                        )));
                    }
                }
            }
            if op.tiles.is_empty() {
                op.tiles = auto_tiles(op.dims, topo);
            }
            check_partition(op, topo)?;
        }
        let mut names: Vec<&str> = operators.iter().map(|o| o.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::validation("operator names must be unique"));
        }
        let tasks = operators
            .iter()
            .enumerate()
            .flat_map(|(op, o)| o.tiles.iter().map(move |&tile| (op, tile)))
            .enumerate()
            .map(|(id, (op, tile))| Task { id, op, tile })
            .collect();
        Ok(Self { operators, tasks })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    /// Applies the same shift to every weight-stationary operator.
    pub fn with_wds(&self, delta: u32) -> Result<Self> {
        let mut w = self.clone();
        for op in &mut w.operators {
            if let Some(base) = &op.weight {
                op.shift = Some(shift_weights(base, delta)?);
            }
        }
        Ok(w)
    }

    /// Hamming count of a task's resident data, or `None` when it is only
    /// known at run time.
    pub fn task_hm(&self, task: &Task) -> Option<u64> {
        let data = self.operators[task.op].in_memory()?;
        let q = data.q();
        let mut hm = 0u64;
        for r in task.tile.rows[0]..task.tile.rows[1] {
            for c in task.tile.cols[0]..task.tile.cols[1] {
                hm += popcount(data.at(r, c), q) as u64;
            }
        }
        Some(hm)
    }

    /// HR of a task as it sits in a macro: unused cells count as zeros.
    pub fn task_hr(&self, task: &Task, topo: &ChipTopology) -> Option<f64> {
        self.task_hm(task)
            .map(|hm| hm as f64 / (topo.tile_capacity() * topo.q as usize) as f64)
    }

    /// Fingerprint of the workload contents, stable across runs.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = serde_json::to_string(self).expect("workload serializes");
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        for op in &self.operators {
            if let Some(s) = &op.shift {
                h.update(s.delta.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// A tensor either inline or as a sidecar path relative to the workload file.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum TensorRef {
    Path { path: String },
    Inline(QuantizedTensor),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case")]
enum InputRef {
    Synthetic {
        vectors: usize,
        #[serde(default = "d_mu")]
        mu: f64,
        #[serde(default = "d_sigma")]
        sigma: f64,
    },
    Tensor(TensorRef),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct OperatorDoc {
    name: String,
    kind: OperatorKind,
    #[serde(default)]
    weight: Option<TensorRef>,
    #[serde(default)]
    dims: Option<[usize; 2]>,
    #[serde(default)]
    tiles: Vec<Tile>,
    #[serde(default)]
    inputs: Option<InputRef>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorkloadDoc {
    operators: Vec<OperatorDoc>,
}

fn resolve(r: TensorRef, base: &Path) -> Result<QuantizedTensor> {
    match r {
        TensorRef::Inline(t) => Ok(t),
        TensorRef::Path { path } => read_tensor(&base.join(path)),
    }
}

/// Parses a workload document; tensor paths resolve against `base`.
pub fn parse_workload(doc: &str, base: &Path, topo: &ChipTopology) -> Result<Workload> {
    let de = &mut serde_json::Deserializer::from_str(doc);
    let raw: WorkloadDoc = serde_path_to_error::deserialize(de)
        .map_err(|e| Error::parse(e.path().to_string(), e.into_inner().to_string()))?;
    let mut ops = Vec::with_capacity(raw.operators.len());
    for o in raw.operators {
        let weight = o.weight.map(|r| resolve(r, base)).transpose()?;
        let dims = match (&weight, o.dims) {
            (Some(w), _) => {
                let (r, c) = w.dims2()?;
                [r, c]
            }
            (None, Some(d)) => d,
            (None, None) => return Err(Error::parse(format!("operators.{}.dims", o.name), "required without a weight")),
        };
        let inputs = match o.inputs {
            None => InputSpec::default(),
            Some(InputRef::Synthetic { vectors, mu, sigma }) => InputSpec::Synthetic { vectors, mu, sigma },
            Some(InputRef::Tensor(r)) => InputSpec::Tensor(resolve(r, base)?),
        };
        ops.push(Operator {
            name: o.name,
            kind: o.kind,
            weight,
            dims,
            tiles: o.tiles,
            inputs,
            shift: None,
        });
    }
    Workload::new(ops, topo)
}

pub fn load_workload(path: &Path, topo: &ChipTopology) -> Result<Workload> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_workload(&text, path.parent().unwrap_or(Path::new(".")), topo)
}

/// Reads a topology file.
pub fn read_topology(path: &Path) -> Result<ChipTopology> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    super::topology::load_topology(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topo() -> ChipTopology {
        ChipTopology::new(2, 2, 2, 4).unwrap()
    }

    fn op(name: &str, rows: usize, cols: usize, tiles: Vec<Tile>) -> Operator {
        Operator {
            name: name.into(),
            kind: OperatorKind::WeightStationary,
            weight: Some(QuantizedTensor::matrix(rows, cols, 8, vec![1; rows * cols]).unwrap()),
            dims: [0, 0],
            tiles,
            inputs: InputSpec::default(),
            shift: None,
        }
    }

    #[test]
    fn auto_tiling_covers_matrix() {
        let w = Workload::new(vec![op("a", 3, 6, vec![])], &topo()).unwrap();
        // 3 rows over 2 banks, 6 cols over 4 cells.
        assert_eq!(w.tasks().len(), 4);
        assert_eq!(w.operators[0].tiles[3], Tile { rows: [2, 3], cols: [4, 6] });
    }

    #[test]
    fn overlapping_tiles_rejected() {
        let tiles = vec![
            Tile { rows: [0, 2], cols: [0, 4] },
            Tile { rows: [1, 2], cols: [0, 4] },
        ];
        assert!(Workload::new(vec![op("a", 2, 4, tiles)], &topo()).is_err());
    }

    #[test]
    fn uncovered_and_oversized_tiles_rejected() {
        let tiles = vec![Tile { rows: [0, 1], cols: [0, 4] }];
        assert!(Workload::new(vec![op("a", 2, 4, tiles)], &topo()).is_err());
        let tiles = vec![Tile { rows: [0, 2], cols: [0, 8] }];
        assert!(Workload::new(vec![op("a", 2, 8, tiles)], &topo()).is_err());
    }

    #[test]
    fn kind_and_weight_must_agree() {
        let mut o = op("a", 2, 4, vec![]);
        o.weight = None;
        o.dims = [2, 4];
        assert!(Workload::new(vec![o.clone()], &topo()).is_err());
        o.kind = OperatorKind::InputDetermined;
        // Needs a predecessor to draw data from.
        assert!(Workload::new(vec![o.clone()], &topo()).is_err());
        assert!(Workload::new(vec![op("b", 2, 4, vec![]), o], &topo()).is_ok());
    }

    #[test]
    fn task_hr_pads_with_zeros() {
        let w = Workload::new(vec![op("a", 1, 2, vec![])], &topo()).unwrap();
        let t = w.tasks()[0];
        assert_eq!(w.task_hm(&t), Some(2));
        // 2 set bits over 2 banks x 4 cells x 8 bits.
        assert_eq!(w.task_hr(&t, &topo()), Some(2.0 / 64.0));
    }

    #[test]
    fn parses_inline_document() {
        let doc = r#"{"operators":[
            {"name":"fc","kind":"weight_stationary",
             "weight":{"shape":[2,4],"q":8,"scale":1.0,"values":[0,1,2,3,-1,-2,-3,-4]},
             "inputs":{"synthetic":{"vectors":3}}},
            {"name":"qk","kind":"input_determined","dims":[2,4]}]}"#;
        let w = parse_workload(doc, Path::new("."), &topo()).unwrap();
        assert_eq!(w.operators.len(), 2);
        assert_eq!(w.operators[0].inputs.vectors(), 3);
        assert_eq!(w.tasks().len(), 2);
        assert_eq!(w.task_hr(&w.tasks()[1], &topo()), None);
    }
}
