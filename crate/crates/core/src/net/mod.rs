//! Reverse-mode engine, the reduced encoder/decoder, self-supervised losses
//! with grid shifting, Adam, and the training loop.

pub mod adam;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use model::{
    decoder_forward, encoder_forward, init_params, load_checkpoint, save_checkpoint, Checkpoint,
    CheckpointError, NetConfig, ParamNodes, Params, Pooling,
};
pub use tape::{Grads, NodeId, Tape};
pub use tensor::Tensor;
pub use train::{
    evaluate_self_loss, fuse_detail, grid_shift, infer, infer_from_dir, infer_with_flows,
    sample_grid_shift, self_loss_and_grads, train, training_fusion_inputs, FusionFrame, LossRow,
    TrainConfig, TrainError, TrainOutcome, UPSCALE,
};
