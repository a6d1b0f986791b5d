//! Loss functions and training loops.

mod add;
mod config;
mod losses;
mod run;
mod teacher;

pub use config::{sds_w, DistillConfig, FeatNorm, ScheduleSpec, StudentInit, TeacherConfig, Weighting};
pub use losses::{
    adv_loss_d, adv_loss_g, adv_loss_g_node, distill_loss, distill_loss_node, hinge_fake, hinge_real, sds_seed,
    total_loss, DistillTerm,
};
pub use teacher::{denoising_loss, train_teacher, TeacherOutcome};
pub use add::{
    add_train_step, disc_arch_for, distill, draw_step, init_student, AddState, DistillOutcome, Frozen, LossReport, Snapshot,
    StepDraws,
};
pub use run::{config_hash, run_distillation, write_losses_csv, DistillPaths, DistillRun};
