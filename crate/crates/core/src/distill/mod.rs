//! Multi-teacher distillation: losses, similarity-map fusion, orthogonal
//! patch-Gram transfer, annealing initialization, and training drivers.

pub mod losses;
pub mod train;

pub use losses::{
    kd_loss, map_mse_loss, merge_maps, multi_teacher_kd_loss, orth_loss, patch_grams,
    similarity_map, softened_probs, DistillConfig, PatchGram, SimilarityMap,
};
pub use train::{
    anneal_init, total_loss, train_student, train_teacher, EpochRecord, FeatureTransfer, History,
    LossParts, StudentOptions, TeacherContext, TrainHyper, TrainOutcome,
};
