//! Optimization, data, checkpoints and the pretraining / fine-tuning loops.

pub mod checkpoint;
pub mod class_token;
pub mod data;
pub mod finetune;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod pretrain;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::Rng;

pub use checkpoint::Checkpoint;
pub use finetune::{finetune, FinetuneRun};
pub use gradcheck::{grad_check, GradReport};
pub use metrics::{MetricRecord, MetricsWriter};
pub use optim::{lr_at, AdamW, Ema, OptimHyper, Schedule};
pub use pretrain::{pretrain, PretrainRun};

/// Independent random streams derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Order = 2,
    Augment = 3,
    DropPath = 4,
}

/// Generator for `(seed, stream, index)`. Every step draws from its own
/// stream, so resuming needs no saved generator state.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(stream as u64).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..].copy_from_slice(b"star-rng");
    ChaCha8Rng::from_seed(key)
}

/// Visiting order of `n` items in `epoch`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        use rand::seq::SliceRandom;
        order.shuffle(&mut stream_rng(seed, Stream::Order, epoch));
    }
    order
}

/// Runs `f` on a pool with `threads` workers (0 = rayon's default pool).
pub(crate) fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    if threads == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}
