//! Desk-scale two-phase distillation pipeline on synthetic data.

pub mod checks;
pub mod config;
pub mod data;
pub mod demos;
pub mod metrics;
pub mod phase1;
pub mod phase2;
pub mod pipeline;
pub mod samplers;
pub mod teacher;

pub use checks::{registry, run_all_checks, run_checks, Check, CheckKind, CheckReport, CheckResult};
pub use config::ExperimentConfig;
pub use data::{synth_dataset, ImagePair};
pub use demos::{diffusion_demo, DiffusionRow};
pub use metrics::{write_records, write_table, MetricsRecord, TableFormat};
pub use phase1::{train_phase1, FeatureSet, FlowNets, Phase1Summary};
pub use phase2::{train_phase2, Phase2Summary, Restorer, RestorerModel};
pub use pipeline::{distill, run_phase1, run_phase2, sampler_experiment, write_metrics, DistillOutcome, Workspace};
pub use samplers::{compare_samplers, train_ddim, DdimBaseline, SamplerRow};
pub use teacher::{PriorFeatures, SyntheticTeacher};
