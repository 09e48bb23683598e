//! Deterministic synthetic languages over a shared 80-grapheme vocabulary.
//!
//! Each grapheme of a language emits 2–4 frames of its 80-dim prototype plus
//! Gaussian noise. Languages differ in which graphemes they use (subset
//! overlap with a canonical core) and in how graphemes map to prototypes
//! (a `proto_overlap` fraction reuses the universal prototype table, the rest
//! get language-private prototypes).

use std::collections::BTreeSet;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conformer::FeatureSequence;
use crate::error::{Error, Result};
use crate::tensor::counter_rng::mix;
use crate::tensor::Tensor;
use crate::transducer::{Transcript, BLANK};

pub const NUM_GRAPHEMES: usize = 80;
pub const VOCAB_SIZE: usize = NUM_GRAPHEMES + 1;
pub const FEATURE_DIM: usize = 80;
/// Seed of the universal prototype table and the canonical grapheme order.
pub const WORLD_SEED: u64 = 0xCA4_2023;

/// Universal vocabulary: blank at 0, graphemes `1..=80`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphemeVocab {
    pub names: Vec<String>,
}

impl Default for GraphemeVocab {
    fn default() -> Self {
        let mut names = vec!["<blank>".to_string()];
        names.extend((1..=NUM_GRAPHEMES).map(|i| format!("g{i:02}")));
        GraphemeVocab { names }
    }
}

impl GraphemeVocab {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Membership mask over the full vocabulary.
    pub fn subset_mask(&self, subset: &[u16]) -> Vec<bool> {
        let mut m = vec![false; self.len()];
        for &g in subset {
            m[g as usize] = true;
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LanguageSpec {
    pub id: u32,
    pub seed: u64,
    pub subset_size: usize,
    /// Fraction of the subset taken from the canonical core.
    pub overlap: f64,
    /// Fraction of graphemes using the universal prototype.
    pub proto_overlap: f64,
    pub sigma: f64,
    pub emission: (usize, usize),
    /// Graphemes per utterance.
    pub len_range: (usize, usize),
    /// Explicit grapheme subset, overriding `subset_size`/`overlap`.
    pub subset: Option<Vec<u16>>,
    /// Mixed into utterance seeds so train and test splits differ.
    pub split: u64,
    pub world_seed: u64,
}

impl Default for LanguageSpec {
    fn default() -> Self {
        LanguageSpec {
            id: 0,
            seed: 1,
            subset_size: 30,
            overlap: 1.0,
            proto_overlap: 1.0,
            sigma: 0.1,
            emission: (2, 4),
            len_range: (3, 8),
            subset: None,
            split: 0,
            world_seed: WORLD_SEED,
        }
    }
}

impl LanguageSpec {
    pub fn with_split(&self, split: u64) -> Self {
        LanguageSpec {
            split,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.emission;
        if lo == 0 || lo > hi {
            return Err(Error::config(format!("bad emission range {:?}", self.emission)));
        }
        let (a, b) = self.len_range;
        if a == 0 || a > b {
            return Err(Error::config(format!("bad utterance length range {:?}", self.len_range)));
        }
        if !(0.0..=1.0).contains(&self.overlap) || !(0.0..=1.0).contains(&self.proto_overlap) {
            return Err(Error::config("overlap fractions must lie in [0, 1]"));
        }
        if self.sigma < 0.0 || !self.sigma.is_finite() {
            return Err(Error::config("sigma must be finite and >= 0"));
        }
        match &self.subset {
            Some(s) if s.is_empty() => Err(Error::config("empty grapheme subset")),
            Some(s) if s.iter().any(|&g| g == 0 || g as usize > NUM_GRAPHEMES) => {
                Err(Error::config("subset ids must lie in 1..=80"))
            }
            None if self.subset_size == 0 || self.subset_size > NUM_GRAPHEMES => {
                Err(Error::config(format!("subset size {} outside 1..=80", self.subset_size)))
            }
            _ => Ok(()),
        }
    }
}

/// Canonical grapheme order shared by every language of a world.
pub fn canonical_order(world_seed: u64) -> Vec<u16> {
    let mut ids: Vec<u16> = (1..=NUM_GRAPHEMES as u16).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[world_seed, 1])));
    ids
}

fn random_prototype(rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..FEATURE_DIM).map(|_| rng.random_range(-1.0f32..=1.0)).collect()
}

/// A language with its subset, prototypes and transition table fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct Language {
    pub spec: LanguageSpec,
    /// Sorted grapheme ids.
    pub subset: Vec<u16>,
    /// `[81 x 80]`, rows outside the subset are zero.
    pub prototypes: Tensor<f32>,
    /// Row-stochastic `[k x k]` over subset positions, zero diagonal.
    pub transitions: Vec<Vec<f64>>,
}

impl Language {
    pub fn new(spec: &LanguageSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[spec.seed, 2]));
        let subset: Vec<u16> = match &spec.subset {
            Some(s) => s.iter().copied().collect::<BTreeSet<_>>().into_iter().collect(),
            None => {
                let order = canonical_order(spec.world_seed);
                let k = spec.subset_size;
                let shared = ((spec.overlap * k as f64).round() as usize).min(k);
                let mut chosen: BTreeSet<u16> = order[..shared].iter().copied().collect();
                let rest = &order[k..];
                let extra = k - shared;
                let pool: Vec<u16> = if rest.len() >= extra {
                    rest.to_vec()
                } else {
                    order[shared..].to_vec()
                };
                for i in sample(&mut rng, pool.len(), extra) {
                    chosen.insert(pool[i]);
                }
                chosen.into_iter().collect()
            }
        };

        let mut world = ChaCha8Rng::seed_from_u64(mix(&[spec.world_seed, 3]));
        let universal: Vec<Vec<f32>> = (0..VOCAB_SIZE).map(|_| random_prototype(&mut world)).collect();
        let mut protos = Tensor::zeros(&[VOCAB_SIZE, FEATURE_DIM]);
        let n_univ = (spec.proto_overlap * subset.len() as f64).round() as usize;
        let mut positions: Vec<usize> = (0..subset.len()).collect();
        positions.shuffle(&mut rng);
        let universal_pos: BTreeSet<usize> = positions[..n_univ].iter().copied().collect();
        for (pos, &g) in subset.iter().enumerate() {
            let row = if universal_pos.contains(&pos) {
                universal[g as usize].clone()
            } else {
                random_prototype(&mut rng)
            };
            let g = g as usize;
            protos.data_mut()[g * FEATURE_DIM..(g + 1) * FEATURE_DIM].copy_from_slice(&row);
        }

        let k = subset.len();
        let transitions = (0..k)
            .map(|i| {
                if k == 1 {
                    return vec![1.0];
                }
                let mut w: Vec<f64> = (0..k)
                    .map(|j| {
                        if i == j {
                            0.0
                        } else {
                            let u: f64 = rng.random_range(0.05..1.0);
                            u * u
                        }
                    })
                    .collect();
                let s: f64 = w.iter().sum();
                w.iter_mut().for_each(|v| *v /= s);
                w
            })
            .collect();
        Ok(Language {
            spec: spec.clone(),
            subset,
            prototypes: protos,
            transitions,
        })
    }

    pub fn prototype(&self, g: u16) -> &[f32] {
        self.prototypes.row(g as usize)
    }

    /// Utterance `index` of this language's split.
    pub fn utterance(&self, index: u64) -> Utterance {
        let spec = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[spec.seed, spec.split, index]));
        let k = self.subset.len();
        let len = rng.random_range(spec.len_range.0..=spec.len_range.1);
        let mut pos = rng.random_range(0..k);
        let mut labels = Vec::with_capacity(len);
        for i in 0..len {
            if i > 0 {
                pos = pick(&self.transitions[pos], &mut rng);
            }
            labels.push(self.subset[pos]);
        }
        let noise = Normal::new(0.0, spec.sigma).expect("validated sigma");
        let mut frames = Vec::new();
        for &g in &labels {
            let reps = rng.random_range(spec.emission.0..=spec.emission.1);
            for _ in 0..reps {
                for &p in self.prototype(g) {
                    let n = if spec.sigma > 0.0 { noise.sample(&mut rng) as f32 } else { 0.0 };
                    frames.push(p + n);
                }
            }
        }
        let t = frames.len() / FEATURE_DIM;
        Utterance {
            id: format!("L{}-s{}-{index:05}", spec.id, spec.split),
            features: FeatureSequence::new(t, FEATURE_DIM, frames).expect("at least one grapheme"),
            transcript: Transcript(labels),
        }
    }
}

fn pick(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: FeatureSequence<f32>,
    pub transcript: Transcript,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Concatenation; utterance order is preserved.
    pub fn concat(parts: &[&Corpus]) -> Corpus {
        Corpus {
            utterances: parts.iter().flat_map(|c| c.utterances.iter().cloned()).collect(),
        }
    }

    /// Interleaves corpora round-robin, truncated to `n` utterances.
    pub fn interleave(parts: &[&Corpus], n: usize) -> Corpus {
        let mut out = Vec::with_capacity(n);
        let mut i = 0;
        while out.len() < n && parts.iter().any(|c| i < c.len()) {
            for c in parts {
                if out.len() < n && i < c.len() {
                    out.push(c.utterances[i].clone());
                }
            }
            i += 1;
        }
        Corpus { utterances: out }
    }

    pub fn graphemes(&self) -> BTreeSet<u16> {
        self.utterances
            .iter()
            .flat_map(|u| u.transcript.0.iter().copied())
            .filter(|&g| g as usize != BLANK)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        write_corpus(&mut f, self)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Corpus> {
        let mut f = io::BufReader::new(std::fs::File::open(path)?);
        read_corpus(&mut f)
    }
}

/// Deterministic corpus of `n_utts` utterances.
pub fn gen_language(spec: &LanguageSpec, n_utts: usize, len_range: (usize, usize)) -> Result<Corpus> {
    if n_utts == 0 {
        return Err(Error::config("n_utts must be >= 1"));
    }
    let spec = LanguageSpec {
        len_range,
        ..spec.clone()
    };
    let lang = Language::new(&spec)?;
    Ok(Corpus {
        utterances: (0..n_utts as u64).map(|i| lang.utterance(i)).collect(),
    })
}

/// Distinct graphemes (blank excluded) across all corpora.
pub fn grapheme_coverage(corpora: &[&Corpus]) -> Result<usize> {
    if corpora.is_empty() {
        return Err(Error::EmptyInput("grapheme_coverage needs a corpus"));
    }
    let all: BTreeSet<u16> = corpora.iter().flat_map(|c| c.graphemes()).collect();
    Ok(all.len())
}

pub const CORPUS_MAGIC: &[u8; 4] = b"CARC";
pub const CORPUS_VERSION: u32 = 1;

fn eof_as_truncation(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::format("file truncated")
    } else {
        Error::Io(e)
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(eof_as_truncation)?;
    Ok(u32::from_le_bytes(b))
}

fn read_vec(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::format("corpus file truncated"));
    }
    Ok(buf)
}

pub fn write_corpus(w: &mut impl Write, c: &Corpus) -> Result<()> {
    w.write_all(CORPUS_MAGIC)?;
    w.write_all(&CORPUS_VERSION.to_le_bytes())?;
    w.write_all(&(c.len() as u32).to_le_bytes())?;
    for u in &c.utterances {
        w.write_all(&(u.id.len() as u32).to_le_bytes())?;
        w.write_all(u.id.as_bytes())?;
        w.write_all(&(u.features.len() as u32).to_le_bytes())?;
        w.write_all(&(u.features.dim() as u32).to_le_bytes())?;
        for v in u.features.frames.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(u.transcript.len() as u32).to_le_bytes())?;
        for id in &u.transcript.0 {
            w.write_all(&id.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_corpus(r: &mut impl Read) -> Result<Corpus> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof_as_truncation)?;
    if &magic != CORPUS_MAGIC {
        return Err(Error::format(format!("not a corpus file (magic {magic:?})")));
    }
    let version = read_u32(r)?;
    if version != CORPUS_VERSION {
        return Err(Error::format(format!(
            "corpus format version {version}, expected {CORPUS_VERSION}"
        )));
    }
    let n = read_u32(r)? as usize;
    let mut utterances = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let id_len = read_u32(r)? as usize;
        let id = String::from_utf8(read_vec(r, id_len)?).map_err(|_| Error::format("utterance id is not UTF-8"))?;
        let t = read_u32(r)? as usize;
        let f = read_u32(r)? as usize;
        let bytes = read_vec(r, t * f * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let features = FeatureSequence::new(t, f, data).map_err(|e| Error::format(format!("utterance {id}: {e}")))?;
        let u = read_u32(r)? as usize;
        let bytes = read_vec(r, u * 2)?;
        let labels = bytes.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
        utterances.push(Utterance {
            id,
            features,
            transcript: Transcript(labels),
        });
    }
    Ok(Corpus { utterances })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> LanguageSpec {
        LanguageSpec {
            seed: 11,
            subset_size: 12,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_language(&spec(), 20, (3, 6)).unwrap();
        let b = gen_language(&spec(), 20, (3, 6)).unwrap();
        assert_eq!(a, b);
        let c = gen_language(&spec().with_split(1), 20, (3, 6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_frames_equal_prototypes() {
        let s = LanguageSpec { sigma: 0.0, ..spec() };
        let lang = Language::new(&s).unwrap();
        let c = gen_language(&s, 10, (3, 6)).unwrap();
        for u in &c.utterances {
            let fr = &u.features.frames;
            let mut t = 0;
            for &g in &u.transcript.0 {
                assert_eq!(fr.row(t), lang.prototype(g));
                while t < fr.rows() && fr.row(t) == lang.prototype(g) {
                    t += 1;
                }
            }
            assert_eq!(t, fr.rows());
        }
    }

    #[test]
    fn emission_bounds_and_subset_membership() {
        let lang = Language::new(&spec()).unwrap();
        let c = gen_language(&spec(), 50, (3, 6)).unwrap();
        for u in &c.utterances {
            let l = u.transcript.len();
            assert!((3..=6).contains(&l));
            let t = u.features.len();
            assert!(t >= 2 * l && t <= 4 * l);
            assert!(u.transcript.0.iter().all(|g| lang.subset.contains(g)));
            assert!(u.transcript.0.windows(2).all(|w| w[0] != w[1]));
        }
    }

    #[test]
    fn subset_overlap_follows_canonical_core() {
        let a = Language::new(&LanguageSpec { seed: 1, subset_size: 20, overlap: 1.0, ..Default::default() }).unwrap();
        let b = Language::new(&LanguageSpec { seed: 2, subset_size: 20, overlap: 1.0, ..Default::default() }).unwrap();
        assert_eq!(a.subset, b.subset);
        let c = Language::new(&LanguageSpec { seed: 3, subset_size: 20, overlap: 0.5, ..Default::default() }).unwrap();
        let shared = a.subset.iter().filter(|g| c.subset.contains(g)).count();
        assert_eq!(shared, 10);
        assert_eq!(c.subset.len(), 20);
    }

    #[test]
    fn proto_overlap_controls_shared_prototypes() {
        let base = LanguageSpec { subset_size: 20, ..Default::default() };
        let a = Language::new(&LanguageSpec { seed: 1, ..base.clone() }).unwrap();
        let b = Language::new(&LanguageSpec { seed: 2, ..base.clone() }).unwrap();
        let d = Language::new(&LanguageSpec { seed: 3, proto_overlap: 0.0, ..base }).unwrap();
        for &g in &a.subset {
            assert_eq!(a.prototype(g), b.prototype(g));
            assert_ne!(a.prototype(g), d.prototype(g));
        }
    }

    #[test]
    fn coverage_counts() {
        let abc = LanguageSpec {
            subset: Some(vec![1, 2, 3]),
            ..spec()
        };
        let c = gen_language(&abc, 200, (3, 6)).unwrap();
        assert_eq!(grapheme_coverage(&[&c]).unwrap(), 3);

        let a_ids: Vec<u16> = (1..=29).collect();
        let b_ids: Vec<u16> = (22..=51).collect();
        let a = gen_language(&LanguageSpec { subset: Some(a_ids), ..spec() }, 400, (6, 10)).unwrap();
        let b = gen_language(&LanguageSpec { subset: Some(b_ids), seed: 5, ..spec() }, 400, (6, 10)).unwrap();
        assert_eq!(grapheme_coverage(&[&a]).unwrap(), 29);
        assert_eq!(grapheme_coverage(&[&b]).unwrap(), 30);
        let ab = grapheme_coverage(&[&a, &b]).unwrap();
        assert_eq!(ab, 51);
        assert!(ab >= 30);
        assert!(grapheme_coverage(&[]).is_err());
    }

    #[test]
    fn corpus_round_trip_and_errors() {
        let c = gen_language(&spec(), 5, (3, 6)).unwrap();
        let mut buf = Vec::new();
        write_corpus(&mut buf, &c).unwrap();
        assert_eq!(read_corpus(&mut buf.as_slice()).unwrap(), c);

        let mut empty = Vec::new();
        write_corpus(&mut empty, &Corpus::default()).unwrap();
        assert_eq!(read_corpus(&mut empty.as_slice()).unwrap(), Corpus::default());

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_corpus(&mut bad.as_slice()), Err(Error::Format(_))));
        let mut ver = buf.clone();
        ver[4] = 9;
        assert!(matches!(read_corpus(&mut ver.as_slice()), Err(Error::Format(m)) if m.contains("version")));
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(read_corpus(&mut &cut[..]), Err(Error::Format(m)) if m.contains("truncated")));
    }

    #[test]
    fn invalid_specs() {
        assert!(gen_language(&spec(), 0, (3, 6)).is_err());
        let empty = LanguageSpec { subset: Some(vec![]), ..spec() };
        assert!(matches!(gen_language(&empty, 1, (3, 6)), Err(Error::Config(_))));
        assert!(gen_language(&spec(), 1, (0, 6)).is_err());
    }
}
