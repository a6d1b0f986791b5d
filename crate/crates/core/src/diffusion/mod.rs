//! Noise schedules, the forward process and teacher-side samplers.

mod process;
mod sampler;
mod schedule;

pub use process::{
    coefficient_columns, diffuse_node, eps_to_x0, eps_to_x0_node, forward_diffuse, forward_diffuse_rows,
};
pub use sampler::{
    ANCESTRAL_T_MAX,
    ancestral_sample, ddim_substeps, teacher_ddim_node, teacher_ddim_steps, AncestralOptions, EpsModel,
};
pub use schedule::{NoiseSchedule, ScheduleKind, TimestepSet};
