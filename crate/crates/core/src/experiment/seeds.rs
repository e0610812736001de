//! Named, independent random streams derived from one master seed.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stream {
    Noise,
    NetInit,
    EkiPerturbations,
    EigSampling,
}

impl Stream {
    pub const ALL: [Stream; 4] = [
        Stream::Noise,
        Stream::NetInit,
        Stream::EkiPerturbations,
        Stream::EigSampling,
    ];

    fn tag(self) -> u64 {
        match self {
            Stream::Noise => 0x6e6f697365,
            Stream::NetInit => 0x6e6574696e6974,
            Stream::EkiPerturbations => 0x656b69,
            Stream::EigSampling => 0x656967,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub master: u64,
}

impl Seeds {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    /// Root seed of a stream.
    pub fn root(&self, stream: Stream) -> u64 {
        splitmix(self.master ^ splitmix(stream.tag()))
    }

    /// Seed for position `(a, b)` within a stream, e.g. (stage, candidate).
    pub fn at(&self, stream: Stream, a: u64, b: u64) -> u64 {
        splitmix(splitmix(self.root(stream) ^ a) ^ b.wrapping_mul(0x2545_f491_4f6c_dd1d))
    }
}
