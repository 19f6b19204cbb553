//! Named, mutually independent random streams.
//!
//! Each stream is a ChaCha8 generator keyed by the master seed and the
//! stream name, so drawing from one stream never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stream {
    Init,
    DataOrderSource,
    DataOrderTarget,
    MaskingSource,
    MaskingTarget,
    RehearsalSampling,
    Eval,
    Probe,
}

impl Stream {
    pub const ALL: [Stream; 8] = [
        Stream::Init,
        Stream::DataOrderSource,
        Stream::DataOrderTarget,
        Stream::MaskingSource,
        Stream::MaskingTarget,
        Stream::RehearsalSampling,
        Stream::Eval,
        Stream::Probe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stream::Init => "init",
            Stream::DataOrderSource => "data-order-source",
            Stream::DataOrderTarget => "data-order-target",
            Stream::MaskingSource => "masking-source",
            Stream::MaskingTarget => "masking-target",
            Stream::RehearsalSampling => "rehearsal-sampling",
            Stream::Eval => "eval",
            Stream::Probe => "probe",
        }
    }
}

/// Derives the 64-bit seed of a named stream.
pub fn derive_seed(master: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn stream_rng(master: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, name))
}

#[derive(Debug, Clone)]
pub struct RngStreams {
    master: u64,
    streams: Vec<ChaCha8Rng>,
}

impl RngStreams {
    pub fn new(master: u64) -> Self {
        Self {
            master,
            streams: Stream::ALL.iter().map(|s| stream_rng(master, s.name())).collect(),
        }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn get(&mut self, stream: Stream) -> &mut ChaCha8Rng {
        let i = Stream::ALL.iter().position(|&s| s == stream).expect("known stream");
        &mut self.streams[i]
    }

    /// Fresh generator for `stream`, independent of how far the live one
    /// has advanced.
    pub fn fresh(&self, stream: Stream) -> ChaCha8Rng {
        stream_rng(self.master, stream.name())
    }
}
