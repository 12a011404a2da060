//! Teacher–student pre-training: paired views, multi-granularity
//! contrastive losses, cross-modal alignment and the training loop.

pub mod augment;
pub mod loss;
pub mod model;
pub mod train;

pub use augment::{augment, full_view, AugmentedSample, CropBox, View, ViewCorrespondence};
pub use loss::{
    cl_rows, cluster_objects, loss_align, loss_image, loss_mgcl, loss_object, loss_pixel, loss_pixel_logits,
    pairwise_cl_loss, Centers, ClContext, FgclTerms, ObjectClusters, ObjectParams, Temperatures,
};
pub use model::{ContrastHead, Features, ProjectionHead, SkySenseModel, Source, TeacherStudentPair, ViewBatch};
pub use train::{
    compute_loss, latest_checkpoint, pretrain_run, read_metrics, LossBreakdown, LossSettings, RunSummary, StepRecord,
    Trainer, CHECKPOINT_DIR, METRICS_FILE,
};
