//! Synthetic end-to-end configurations shipped with the binary.

use std::path::Path;

use crate::config::{PipelineConfig, Task};
use crate::error::Result;

pub fn bundled_json(task: Task) -> &'static str {
    match task {
        Task::Strpp => include_str!("../configs/strpp.json"),
        Task::Hpp => include_str!("../configs/hpp.json"),
        Task::Cap => include_str!("../configs/cap.json"),
        Task::Tte => include_str!("../configs/tte.json"),
        Task::Hmp => include_str!("../configs/hmp.json"),
    }
}

pub fn bundled(task: Task) -> Result<PipelineConfig> {
    PipelineConfig::from_json(bundled_json(task), Path::new("."))
}
