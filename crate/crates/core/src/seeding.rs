//! Independent RNG streams derived from one master seed.
//!
//! Every consumer of randomness gets its own stream so that changing, say,
//! the distillation mode never shifts the data partition or the batch order.

/// Purpose of a derived stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    TestSplit,
    Schedule,
    Partition,
    Init,
    Head,
    Client,
    Memory,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::TestSplit => 2,
            Stream::Schedule => 3,
            Stream::Partition => 4,
            Stream::Init => 5,
            Stream::Head => 6,
            Stream::Client => 7,
            Stream::Memory => 8,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for `stream`, further keyed by `indices` (client id, task, ...).
pub fn derive_seed(master: u64, stream: Stream, indices: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ splitmix64(stream.tag()));
    for &i in indices {
        h = splitmix64(h ^ splitmix64(i.wrapping_add(0x5851_f42d_4c95_7f2d)));
    }
    h
}
