//! Deterministic synthetic speaker corpus.
//!
//! Each speaker is a fixed random direction in feature space. An utterance
//! layers that identity at per-layer gains, modulates it over time with a
//! sinusoidal envelope (so frames are not interchangeable), and adds iid
//! Gaussian noise. Identities come from one generator stream and every
//! utterance's noise from its own stream keyed by (speaker, utterance
//! index), so a given (seed, speaker, index) triple always produces the
//! same utterance no matter how large the corpus is — held-out sets use
//! the same seed with a shifted index range.

use crate::error::{Error, Result};
use crate::pooling::FeatureStack;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// Generation recipe. `snr` holds one identity gain per stack layer
/// (hidden layers plus the input layer, so `hidden_layers + 1` entries).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub speakers: usize,
    pub utts_per_speaker: usize,
    /// Index of the first utterance generated per speaker; shift it to
    /// carve out extra utterances disjoint from an earlier corpus.
    pub first_utt: usize,
    pub frames: usize,
    pub feature_dim: usize,
    pub hidden_layers: usize,
    pub snr: Vec<f64>,
    /// Frames per cycle of the temporal envelope.
    pub period: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            speakers: 20,
            utts_per_speaker: 30,
            first_utt: 0,
            frames: 50,
            feature_dim: 16,
            hidden_layers: 4,
            snr: vec![2.0, 1.6, 1.2, 0.8, 0.4],
            period: 5,
            noise_sigma: 1.0,
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("speakers", self.speakers),
            ("utts_per_speaker", self.utts_per_speaker),
            ("frames", self.frames),
            ("feature_dim", self.feature_dim),
            ("period", self.period),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.snr.len() != self.hidden_layers + 1 {
            return Err(Error::InvalidConfig(format!(
                "snr needs one gain per stack layer: {} given for {} layers",
                self.snr.len(),
                self.hidden_layers + 1
            )));
        }
        if !self.snr.iter().all(|g| g.is_finite()) {
            return Err(Error::InvalidConfig("snr gains must be finite".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        if self.speakers > u32::MAX as usize {
            return Err(Error::InvalidConfig("too many speakers".into()));
        }
        if self.first_utt + self.utts_per_speaker > u32::MAX as usize {
            return Err(Error::InvalidConfig("utterance index range too large".into()));
        }
        Ok(())
    }

    pub fn stack_layers(&self) -> usize {
        self.hidden_layers + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: u32,
    pub features: FeatureStack,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    /// Number of distinct speaker labels.
    pub fn num_speakers(&self) -> usize {
        let mut seen: Vec<u32> = self.utterances.iter().map(|u| u.speaker).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

fn speaker_identities(spec: &SynthSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);
    (0..spec.speakers)
        .map(|_| {
            (0..spec.feature_dim)
                .map(|_| rng.sample(StandardNormal))
                .collect()
        })
        .collect()
}

/// Generate the corpus described by `spec`.
pub fn generate(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let identities = speaker_identities(spec);
    let layers = spec.stack_layers();
    let plane = spec.frames * spec.feature_dim;
    let mut utterances = Vec::with_capacity(spec.speakers * spec.utts_per_speaker);
    for (spk, identity) in identities.iter().enumerate() {
        for u in 0..spec.utts_per_speaker {
            let utt_index = spec.first_utt + u;
            let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
            rng.set_stream(1 + ((spk as u64) << 32) + utt_index as u64);
            let mut data = Vec::with_capacity(layers * plane);
            for gain in &spec.snr {
                for t in 0..spec.frames {
                    // Reduce t first so the envelope is exactly periodic.
                    let phase =
                        2.0 * std::f64::consts::PI * (t % spec.period) as f64 / spec.period as f64;
                    let envelope = 1.0 + 0.5 * phase.sin();
                    for id in identity.iter() {
                        let noise: f64 = rng.sample(StandardNormal);
                        data.push(gain * envelope * id + spec.noise_sigma * noise);
                    }
                }
            }
            let features = FeatureStack::new(Tensor::new(
                vec![layers, spec.frames, spec.feature_dim],
                data,
            )?)?;
            utterances.push(Utterance {
                id: format!("s{spk:04}_u{utt_index:04}"),
                speaker: spk as u32,
                features,
            });
        }
    }
    Ok(Corpus { utterances })
}

const MAGIC: &[u8; 4] = b"CMHF";
const VERSION: u32 = 1;

/// Serialize a corpus to the feature-file format: a `CMHF` magic, format
/// version, utterance count, then per utterance the id, speaker label,
/// stack dimensions and the raw layer-major f64 data, all little-endian.
pub fn encode(corpus: &Corpus) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(corpus.utterances.len() as u32).to_le_bytes());
    for utt in &corpus.utterances {
        let id = utt.id.as_bytes();
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&utt.speaker.to_le_bytes());
        out.extend_from_slice(&(utt.features.layers() as u32).to_le_bytes());
        out.extend_from_slice(&(utt.features.frames() as u32).to_le_bytes());
        out.extend_from_slice(&(utt.features.feature_dim() as u32).to_le_bytes());
        for v in utt.features.tensor().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Byte reader that reports the offset of whatever it choked on.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn error(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.offset(),
            message: message.into(),
        }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.error(format!(
                "unexpected end of data reading {what}: need {n} bytes, have {}",
                self.remaining()
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub(crate) fn read_u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn read_u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn read_f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let found = self.take(4, "file magic")?;
        if found != magic {
            self.pos = 0;
            return Err(self.error(format!(
                "bad magic {:?}, expected {:?}",
                found,
                std::str::from_utf8(magic).unwrap()
            )));
        }
        Ok(())
    }

    pub(crate) fn expect_version(&mut self, expected: u32) -> Result<()> {
        let found = self.read_u32("format version")?;
        if found != expected {
            return Err(Error::UnsupportedVersion { found, expected });
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.error(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

/// Parse a corpus from feature-file bytes.
pub fn decode(bytes: &[u8]) -> Result<Corpus> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(MAGIC)?;
    r.expect_version(VERSION)?;
    let count = r.read_u32("utterance count")?;
    let mut utterances = Vec::new();
    for _ in 0..count {
        let id_len = r.read_u16("id length")? as usize;
        let id_offset = r.offset();
        let id_bytes = r.take(id_len, "utterance id")?;
        let id = std::str::from_utf8(id_bytes)
            .map_err(|e| Error::Parse {
                offset: id_offset,
                message: format!("utterance id is not UTF-8: {e}"),
            })?
            .to_string();
        let speaker = r.read_u32("speaker label")?;
        let layers = r.read_u32("layer count")? as usize;
        let frames = r.read_u32("frame count")? as usize;
        let feature_dim = r.read_u32("feature dim")? as usize;
        let total = layers
            .checked_mul(frames)
            .and_then(|v| v.checked_mul(feature_dim))
            .ok_or_else(|| r.error("feature dimensions overflow"))?;
        // Refuse to allocate more than the file could possibly hold.
        if total.checked_mul(8).map_or(true, |b| b > r.remaining()) {
            return Err(r.error(format!(
                "feature block of {total} values exceeds remaining {} bytes",
                r.remaining()
            )));
        }
        let mut data = Vec::with_capacity(total);
        for _ in 0..total {
            data.push(r.read_f64("feature value")?);
        }
        let features = FeatureStack::new(Tensor::new(vec![layers, frames, feature_dim], data)?)?;
        utterances.push(Utterance {
            id,
            speaker,
            features,
        });
    }
    r.finish()?;
    Ok(Corpus { utterances })
}

/// Read a corpus from a feature file.
pub fn load(path: &std::path::Path) -> Result<Corpus> {
    decode(&std::fs::read(path)?)
}
