//! Synthetic panorama data, experiment configuration and the staged
//! pipeline behind the command-line tool.

pub mod config;
pub mod io;
pub mod pipeline;
pub mod scene;

pub use config::{ExperimentConfig, Grid};
pub use pipeline::{
    ablate_stage, eval_stage, gen_data, generate_dataset, load_dataset, sample_stage, train_base_stage,
    train_fba_stage, SummaryRow,
};
pub use scene::{SyntheticScene, World, VOCAB};
