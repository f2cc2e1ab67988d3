//! Neural building blocks: convolutions, pooling, batch normalization,
//! channel split/concat/shuffle, drop-path and the six candidate cell
//! operations.

pub mod candidates;
pub mod conv;
pub mod droppath;
pub mod norm;
pub mod pool;
pub mod shuffle;

pub use candidates::{
    apply_candidate, factorized_reduction, op_param_count, BlockCandidates, ConvBnParams,
    FrParams, OperationId, SepParams, ALL_OPERATIONS,
};
pub use conv::{conv2d, depthwise_conv2d, global_avg_pool, same_padding, shift_one_pixel};
pub use droppath::drop_path;
pub use norm::{batch_norm, BnParams, BN_EPS, BN_MOMENTUM};
pub use pool::{pool2d, PoolMode};
pub use shuffle::{channel_concat, channel_shuffle, channel_split, shuffle_permutation};
