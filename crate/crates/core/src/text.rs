//! Random-embedding text encoders (plain lookup, or lookup plus scaled
//! sinusoidal positions), a fallback word tokenizer for the caption grammar,
//! and multi-hot token-group masks.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Color, RelationLabel, ShapeKind};
use crate::scene::caption::{grammar_words, paraphrases};
use crate::tensor_io::{self, DType, Tensor};

pub const EMBED_DIM: usize = 4096;
pub const EMBED_SCALE: f64 = 7.5;
pub const MAX_TOKENS: usize = 20;
pub const POS_SCALE: f32 = 1.0 / 6.0;
pub const FILLER_WORDS: [&str; 4] = ["and", "to", "the", "of"];

/// Sorted distinct ids over a batch of token sequences.
pub fn unique_ids<'a>(rows: impl IntoIterator<Item = &'a [u32]>) -> Vec<u32> {
    rows.into_iter()
        .flat_map(|r| r.iter().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Bijection between tokenizer ids and dense dictionary rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabMap {
    pub dict_ids2input_ids: Vec<u32>,
    #[serde(skip)]
    input_ids2dict_ids: BTreeMap<u32, usize>,
}

impl VocabMap {
    pub fn new(ids: &[u32]) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Input("vocabulary needs at least one id".into()));
        }
        let mut map = BTreeMap::new();
        for (row, &id) in ids.iter().enumerate() {
            if map.insert(id, row).is_some() {
                return Err(Error::Input(format!("duplicate token id {id}")));
            }
        }
        Ok(Self {
            dict_ids2input_ids: ids.to_vec(),
            input_ids2dict_ids: map,
        })
    }

    pub fn len(&self) -> usize {
        self.dict_ids2input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dict_ids2input_ids.is_empty()
    }

    pub fn dict_id(&self, input_id: u32) -> Result<usize> {
        self.input_ids2dict_ids
            .get(&input_id)
            .copied()
            .ok_or(Error::Vocabulary(input_id))
    }

    pub fn input_id(&self, dict_id: usize) -> Option<u32> {
        self.dict_ids2input_ids.get(dict_id).copied()
    }

    pub fn contains(&self, input_id: u32) -> bool {
        self.input_ids2dict_ids.contains_key(&input_id)
    }
}

/// Standard normal pairs from a ChaCha stream via Box–Muller.
struct Gaussian {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl Gaussian {
    fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng, spare: None }
    }

    fn unit(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.unit(); // (0, 1]
        let u2 = self.unit();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// `V′ × D` dictionary with rows drawn i.i.d. from `N(0, scale²/D · I)`.
///
/// Row `k` is generated from ChaCha stream `k` of `seed`, so any row can be
/// regenerated independently and the matrix does not depend on build order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDict {
    pub vocab: VocabMap,
    pub dim: usize,
    pub scale: f64,
    pub seed: u64,
    /// Row-major `V′ × D`.
    pub data: Vec<f32>,
}

pub fn build_embedding_dict(ids: &[u32], dim: usize, scale: f64, seed: u64) -> Result<EmbeddingDict> {
    let vocab = VocabMap::new(ids)?;
    if dim == 0 {
        return Err(Error::Input("embedding dimension must be positive".into()));
    }
    let sigma = scale / (dim as f64).sqrt();
    let mut data = Vec::with_capacity(vocab.len() * dim);
    for row in 0..vocab.len() {
        let mut g = Gaussian::new(seed, row as u64);
        data.extend((0..dim).map(|_| (sigma * g.next()) as f32));
    }
    Ok(EmbeddingDict {
        vocab,
        dim,
        scale,
        seed,
        data,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DictMeta {
    dim: usize,
    scale: f64,
    seed: u64,
    dict_ids2input_ids: Vec<u32>,
}

impl EmbeddingDict {
    pub fn row(&self, dict_id: usize) -> &[f32] {
        &self.data[dict_id * self.dim..(dict_id + 1) * self.dim]
    }

    pub fn lookup(&self, input_id: u32) -> Result<&[f32]> {
        Ok(self.row(self.vocab.dict_id(input_id)?))
    }

    pub fn vocab_path(path: &Path) -> PathBuf {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        path.with_file_name(format!("{stem}.vocab.json"))
    }

    /// Writes the `[V′, D]` matrix and a `<stem>.vocab.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        tensor_io::write_tensor(path, &[self.vocab.len(), self.dim], DType::F32, &self.data)?;
        let meta = DictMeta {
            dim: self.dim,
            scale: self.scale,
            seed: self.seed,
            dict_ids2input_ids: self.vocab.dict_ids2input_ids.clone(),
        };
        let vp = Self::vocab_path(path);
        fs::write(&vp, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io_at(&vp, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t = tensor_io::read_tensor(path)?;
        let vp = Self::vocab_path(path);
        let meta: DictMeta =
            serde_json::from_str(&fs::read_to_string(&vp).map_err(|e| Error::io_at(&vp, e))?)?;
        let vocab = VocabMap::new(&meta.dict_ids2input_ids)?;
        if t.dims != [vocab.len(), meta.dim] {
            return Err(Error::Input(format!(
                "dictionary tensor {:?} does not match vocabulary {}×{}",
                t.dims,
                vocab.len(),
                meta.dim
            )));
        }
        Ok(Self {
            vocab,
            dim: meta.dim,
            scale: meta.scale,
            seed: meta.seed,
            data: t.data,
        })
    }
}

/// `wpe[t, 2k] = sin(t / 10000^(2k/D))`, `wpe[t, 2k+1] = cos(·)`, as `[L, D]`.
pub fn sinusoidal_pos_encoding(len: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Input(format!("positional encoding needs an even dimension, got {dim}")));
    }
    let mut data = vec![0.0f32; len * dim];
    for t in 0..len {
        for k in 0..dim / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * k as f64 / dim as f64);
            data[t * dim + 2 * k] = angle.sin() as f32;
            data[t * dim + 2 * k + 1] = angle.cos() as f32;
        }
    }
    Tensor::new(vec![len, dim], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Rte,
    RtePos,
}

/// Maps token ids to `[L, D]` embeddings.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub dict: EmbeddingDict,
    pub kind: EncoderKind,
    pub max_len: usize,
    /// Appended up to `max_len` when a sequence is shorter.
    pub pad_id: Option<u32>,
    pos_table: Vec<f32>,
}

impl Encoder {
    pub fn new(dict: EmbeddingDict, kind: EncoderKind, max_len: usize, pad_id: Option<u32>) -> Result<Self> {
        Self::with_pos_scale(dict, kind, max_len, pad_id, POS_SCALE)
    }

    pub fn with_pos_scale(
        dict: EmbeddingDict,
        kind: EncoderKind,
        max_len: usize,
        pad_id: Option<u32>,
        pos_scale: f32,
    ) -> Result<Self> {
        let pos_table = match kind {
            EncoderKind::Rte => Vec::new(),
            EncoderKind::RtePos => sinusoidal_pos_encoding(max_len, dict.dim)?
                .data
                .into_iter()
                .map(|v| v * pos_scale)
                .collect(),
        };
        Ok(Self {
            dict,
            kind,
            max_len,
            pad_id,
            pos_table,
        })
    }

    /// Scaled positional rows added by `RtePos`, `[max_len, D]` row-major.
    pub fn position_table(&self) -> &[f32] {
        &self.pos_table
    }

    pub fn encode(&self, ids: &[u32]) -> Result<Tensor> {
        if ids.len() > self.max_len {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds the maximum {}",
                ids.len(),
                self.max_len
            )));
        }
        let mut seq = ids.to_vec();
        if seq.len() < self.max_len {
            let pad = self
                .pad_id
                .ok_or_else(|| Error::Input(format!("sequence shorter than {} and no pad id", self.max_len)))?;
            seq.resize(self.max_len, pad);
        }
        let d = self.dict.dim;
        let mut data = Vec::with_capacity(self.max_len * d);
        for (t, &id) in seq.iter().enumerate() {
            let row = self.dict.lookup(id)?;
            match self.kind {
                EncoderKind::Rte => data.extend_from_slice(row),
                EncoderKind::RtePos => {
                    let pos = &self.pos_table[t * d..(t + 1) * d];
                    data.extend(row.iter().zip(pos).map(|(e, p)| e + p));
                }
            }
        }
        Tensor::new(vec![self.max_len, d], data)
    }
}

pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;

/// Whitespace tokenizer over the closed caption vocabulary: `pad = 0`,
/// `eos = 1`, grammar words from 2. Sequences end with `eos` and are padded
/// (or truncated) to `max_len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordTokenizer {
    words: Vec<String>,
    ids: BTreeMap<String, u32>,
    pub max_len: usize,
}

impl Default for WordTokenizer {
    fn default() -> Self {
        Self::new(MAX_TOKENS)
    }
}

impl WordTokenizer {
    pub fn new(max_len: usize) -> Self {
        let mut words: Vec<String> = vec!["<pad>".into(), "</s>".into()];
        words.extend(grammar_words().into_iter().map(String::from));
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self {
            words,
            ids,
            max_len: max_len.max(1),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn all_ids(&self) -> Vec<u32> {
        (0..self.words.len() as u32).collect()
    }

    pub fn word_id(&self, word: &str) -> Result<u32> {
        self.ids
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let text = text.trim().trim_end_matches('.').to_lowercase();
        let mut ids = text
            .split_whitespace()
            .map(|w| self.word_id(w))
            .collect::<Result<Vec<_>>>()?;
        ids.truncate(self.max_len - 1);
        ids.push(EOS_ID);
        ids.resize(self.max_len, PAD_ID);
        Ok(ids)
    }

    /// Words up to (excluding) the first `eos`.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS_ID)
            .filter(|&&id| id != PAD_ID)
            .filter_map(|&id| self.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Group membership, either by token id or by position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupSpec {
    Ids(Vec<u32>),
    Positions(Vec<usize>),
}

/// Multi-hot masks over the `W` positions of one token sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenGroupMask {
    pub width: usize,
    pub groups: BTreeMap<String, Vec<f32>>,
}

impl TokenGroupMask {
    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.groups.get(name).map(Vec::as_slice)
    }
}

pub fn token_group_masks(ids: &[u32], spec: &BTreeMap<String, GroupSpec>) -> Result<TokenGroupMask> {
    let width = ids.len();
    let mut groups = BTreeMap::new();
    for (name, g) in spec {
        let mut mask = vec![0.0f32; width];
        match g {
            GroupSpec::Ids(set) => {
                let set: BTreeSet<u32> = set.iter().copied().collect();
                for (t, id) in ids.iter().enumerate() {
                    if set.contains(id) {
                        mask[t] = 1.0;
                    }
                }
            }
            GroupSpec::Positions(pos) => {
                for &p in pos {
                    if p >= width {
                        return Err(Error::Input(format!(
                            "group {name:?}: position {p} outside {width} tokens"
                        )));
                    }
                    mask[p] = 1.0;
                }
            }
        }
        groups.insert(name.clone(), mask);
    }
    Ok(TokenGroupMask { width, groups })
}

/// Standard word groups of the caption grammar: each shape and color, all
/// relation words, the filler words and the `eos` token.
pub fn caption_groups(tok: &WordTokenizer) -> Result<BTreeMap<String, GroupSpec>> {
    let mut spec = BTreeMap::new();
    let ids = |words: &[&str]| -> Result<Vec<u32>> { words.iter().map(|w| tok.word_id(w)).collect() };
    for s in ShapeKind::ALL {
        spec.insert(s.name().to_string(), GroupSpec::Ids(ids(&[s.name()])?));
    }
    for c in [Color::Red, Color::Blue] {
        spec.insert(c.name().to_string(), GroupSpec::Ids(ids(&[c.name()])?));
    }
    let mut rel: BTreeSet<&str> = BTreeSet::new();
    for r in RelationLabel::ALL {
        for p in paraphrases(r) {
            rel.extend(p.split_whitespace());
        }
    }
    let rel: Vec<&str> = rel.into_iter().filter(|w| !FILLER_WORDS.contains(w)).collect();
    spec.insert("relation".into(), GroupSpec::Ids(ids(&rel)?));
    spec.insert("filler".into(), GroupSpec::Ids(ids(&FILLER_WORDS)?));
    spec.insert("eos".into(), GroupSpec::Ids(vec![EOS_ID]));
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dict(dim: usize) -> EmbeddingDict {
        build_embedding_dict(&WordTokenizer::default().all_ids(), dim, EMBED_SCALE, 9).unwrap()
    }

    #[test]
    fn row_norms_match_scale() {
        let ids: Vec<u32> = (0..1000).collect();
        let d = build_embedding_dict(&ids, EMBED_DIM, EMBED_SCALE, 1).unwrap();
        let mean: f64 = (0..1000)
            .map(|r| d.row(r).iter().map(|&v| (v as f64).powi(2)).sum::<f64>())
            .sum::<f64>()
            / 1000.0;
        assert!((mean - 56.25).abs() / 56.25 < 0.05, "{mean}");
    }

    #[test]
    fn dict_is_deterministic() {
        let a = build_embedding_dict(&[5, 3, 9], 64, EMBED_SCALE, 42).unwrap();
        let b = build_embedding_dict(&[5, 3, 9], 64, EMBED_SCALE, 42).unwrap();
        assert_eq!(a, b);
        let c = build_embedding_dict(&[5, 3, 9], 64, EMBED_SCALE, 43).unwrap();
        assert_ne!(a.data, c.data);
        let one = build_embedding_dict(&[7], 64, EMBED_SCALE, 0).unwrap();
        assert_eq!(one.data.len(), 64);
        assert!(matches!(build_embedding_dict(&[1, 1], 8, 1.0, 0), Err(Error::Input(_))));
    }

    #[test]
    fn vocab_is_a_bijection() {
        let v = VocabMap::new(&[10, 4, 7]).unwrap();
        for (row, &id) in v.dict_ids2input_ids.iter().enumerate() {
            assert_eq!(v.dict_id(id).unwrap(), row);
            assert_eq!(v.input_id(row), Some(id));
        }
        assert!(matches!(v.dict_id(5), Err(Error::Vocabulary(5))));
        assert_eq!(unique_ids([&[3u32, 1, 3][..], &[2, 1][..]]), vec![1, 2, 3]);
    }

    #[test]
    fn positional_table() {
        let t = sinusoidal_pos_encoding(20, 8).unwrap();
        for k in 0..4 {
            assert_eq!(t.data[2 * k], 0.0);
            assert_eq!(t.data[2 * k + 1], 1.0);
        }
        assert!((t.data[8] - 1f32.sin()).abs() < 1e-7);
        let norm0: f32 = t.data[..8].iter().map(|v| v * v).sum();
        assert_eq!(norm0, 4.0);
        assert!(sinusoidal_pos_encoding(20, 7).is_err());
    }

    #[test]
    fn rte_is_permutation_equivariant_and_rte_pos_is_not() {
        let tok = WordTokenizer::default();
        let rte = Encoder::new(small_dict(32), EncoderKind::Rte, MAX_TOKENS, Some(PAD_ID)).unwrap();
        let pos = Encoder::new(small_dict(32), EncoderKind::RtePos, MAX_TOKENS, Some(PAD_ID)).unwrap();
        let ids = tok.tokenize("red square is above blue circle").unwrap();
        let mut perm = ids.clone();
        perm.swap(0, 4);
        perm.swap(1, 5);
        let (a, b) = (rte.encode(&ids).unwrap(), rte.encode(&perm).unwrap());
        let row = |t: &Tensor, i: usize| t.data[i * 32..(i + 1) * 32].to_vec();
        assert_eq!(row(&a, 0), row(&b, 4));
        assert_eq!(row(&a, 1), row(&b, 5));
        assert_eq!(row(&a, 2), row(&b, 2));
        let (pa, pb) = (pos.encode(&ids).unwrap(), pos.encode(&perm).unwrap());
        assert_ne!(row(&pa, 0), row(&pb, 4));

        let table = pos.position_table();
        for (i, (p, r)) in pa.data.iter().zip(&a.data).enumerate() {
            assert_eq!(*p, *r + table[i]);
        }
    }

    #[test]
    fn unknown_id_and_length_errors() {
        let enc = Encoder::new(small_dict(16), EncoderKind::Rte, 4, None).unwrap();
        assert!(matches!(enc.encode(&[1, 2, 3, 999]), Err(Error::Vocabulary(999))));
        assert!(enc.encode(&[1, 2]).is_err());
        assert!(enc.encode(&[1, 2, 3, 4, 5]).is_err());
        assert_eq!(enc.encode(&[1, 2, 3, 4]).unwrap().dims, vec![4, 16]);
    }

    #[test]
    fn tokenizer_round_trip() {
        let tok = WordTokenizer::default();
        let ids = tok.tokenize("square is to the lower left of blue triangle").unwrap();
        assert_eq!(ids.len(), 20);
        assert_eq!(ids[9], EOS_ID);
        assert_eq!(ids[19], PAD_ID);
        assert_eq!(tok.detokenize(&ids), "square is to the lower left of blue triangle");
        assert_eq!(tok.tokenize("").unwrap()[0], EOS_ID);
        assert!(matches!(tok.tokenize("green square"), Err(Error::UnknownWord(_))));
    }

    #[test]
    fn group_masks() {
        let tok = WordTokenizer::default();
        let spec = caption_groups(&tok).unwrap();
        let ids = tok.tokenize("red square is above blue circle").unwrap();
        let m = token_group_masks(&ids, &spec).unwrap();
        assert_eq!(m.get("square").unwrap().iter().sum::<f32>(), 1.0);
        assert_eq!(m.get("square").unwrap()[1], 1.0);
        assert_eq!(m.get("eos").unwrap()[6], 1.0);

        let ids = tok.tokenize("red square is above and to the left of blue circle").unwrap();
        let m = token_group_masks(&ids, &spec).unwrap();
        assert!(m.get("filler").unwrap().iter().sum::<f32>() >= 4.0);

        let mut custom = BTreeMap::new();
        custom.insert("none".to_string(), GroupSpec::Ids(vec![]));
        custom.insert("pos".to_string(), GroupSpec::Positions(vec![0, 3]));
        let m = token_group_masks(&ids, &custom).unwrap();
        assert!(m.get("none").unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(m.get("pos").unwrap()[3], 1.0);
        custom.insert("bad".to_string(), GroupSpec::Positions(vec![20]));
        assert!(matches!(token_group_masks(&ids, &custom), Err(Error::Input(_))));
    }

    #[test]
    fn dict_persistence() {
        let d = small_dict(8);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("dict.atns");
        d.save(&p).unwrap();
        assert_eq!(EmbeddingDict::load(&p).unwrap(), d);
    }
}
