//! Chip topology, workload description and the quantized-tensor data model.

mod assignment;
mod tensor;
mod topology;
mod workload;

pub use assignment::{Slot, TaskMapping};
pub use tensor::{
    element_width, encode_payload, int_range, load_tensor, read_tensor, write_tensor, QuantizedTensor, TensorHeader,
    MAX_Q,
};
pub use tensor::{read_json, write_file};
pub use topology::{
    load_topology, ChipTopology, EnergyModel, IrCoefficients, Level, TopologyDoc, VfCalibration, VfLevel, VfPair,
    VfTable, DEFAULT_BANKS, DEFAULT_CELLS, DEFAULT_V_FAIL, DEFAULT_VDD,
};
pub use workload::{
    auto_tiles, load_workload, parse_workload, read_topology, InputSpec, Operator, OperatorKind, Task, Tile, Workload,
};
