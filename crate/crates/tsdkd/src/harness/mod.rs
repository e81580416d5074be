//! Synthetic tasks, evaluation, and analysis reproductions (entropy
//! profiles, the mode-covering vs mode-seeking demonstration).

mod eval;
mod mode_demo;
mod profile;
pub mod tasks;

pub use eval::{evaluate_exact_match, extract_answer};
pub use mode_demo::{bimodal_teacher, mode_fit_demo, write_mode_demo_csv, ModeDemoResult};
pub use profile::{entropy_profile, EntropyProfile};
pub use tasks::{generate_task_dataset, read_dataset, write_dataset, TaskInstance, TaskKind};
