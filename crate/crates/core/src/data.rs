//! Datasets, synthetic bars data, minibatching, and checkpoint persistence.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RwsError};
use crate::layers::{Layer, LayerFamily};
use crate::model::{GenerativeModel, InferenceModel, StackGradient};
use crate::numerics::{sample_bernoulli, RngState, RngStream};
use crate::training::{OptimizerState, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// `N × D` matrix of bits, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryDataset {
    name: String,
    split: Split,
    width: usize,
    bits: Vec<u8>,
}

impl BinaryDataset {
    pub fn new(name: impl Into<String>, split: Split, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() || width == 0 {
            return Err(RwsError::EmptyDataset);
        }
        if !bits.len().is_multiple_of(width) {
            return Err(RwsError::shape("dataset rows", width, bits.len() % width));
        }
        if let Some(pos) = bits.iter().position(|&b| b > 1) {
            return Err(RwsError::Config(format!(
                "dataset entry {pos} is {}; only 0 and 1 are allowed",
                bits[pos]
            )));
        }
        Ok(BinaryDataset {
            name: name.into(),
            split,
            width,
            bits,
        })
    }

    pub fn from_rows(name: impl Into<String>, split: Split, rows: &[Vec<u8>]) -> Result<Self> {
        let width = rows.first().map(Vec::len).ok_or(RwsError::EmptyDataset)?;
        for r in rows {
            if r.len() != width {
                return Err(RwsError::shape("dataset row", width, r.len()));
            }
        }
        BinaryDataset::new(name, split, width, rows.concat())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.bits.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.bits[i * self.width..(i + 1) * self.width]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[u8]> {
        self.bits.chunks_exact(self.width)
    }

    /// Per-column frequency of ones.
    pub fn marginals(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.width];
        for r in self.rows() {
            for (mi, &b) in m.iter_mut().zip(r) {
                *mi += b as f64;
            }
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// First `n` rows and the rest, as two datasets.
    pub fn split_at(&self, n: usize, first: Split, second: Split) -> Result<(Self, Self)> {
        let cut = n * self.width;
        if n == 0 || cut >= self.bits.len() {
            return Err(RwsError::Config(format!(
                "cannot split {} rows at {n}",
                self.len()
            )));
        }
        Ok((
            BinaryDataset::new(
                self.name.clone(),
                first,
                self.width,
                self.bits[..cut].to_vec(),
            )?,
            BinaryDataset::new(
                self.name.clone(),
                second,
                self.width,
                self.bits[cut..].to_vec(),
            )?,
        ))
    }
}

fn parse_bit(tok: &str) -> Option<u8> {
    match tok {
        "0" => Some(0),
        "1" => Some(1),
        _ => {
            // "0.0000" / "1.0000" style
            let (int, frac) = tok.split_once('.')?;
            if frac.is_empty() || !frac.bytes().all(|c| c == b'0') {
                return None;
            }
            match int {
                "0" => Some(0),
                "1" => Some(1),
                _ => None,
            }
        }
    }
}

/// Parse amat text: one example per line, whitespace-separated `0`/`1` tokens
/// (`0.0000`/`1.0000` also accepted). Blank lines are skipped.
pub fn parse_amat(text: &str, path: &Path, split: Split) -> Result<BinaryDataset> {
    let mut width = None;
    let mut bits = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut n = 0;
        for tok in line.split_whitespace() {
            let b = parse_bit(tok).ok_or_else(|| RwsError::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("token `{tok}` is not a binary value"),
            })?;
            bits.push(b);
            n += 1;
        }
        match width {
            None => width = Some(n),
            Some(w) if w != n => {
                return Err(RwsError::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("row has {n} values, expected {w}"),
                })
            }
            _ => {}
        }
    }
    let width = width.ok_or(RwsError::EmptyDataset)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    BinaryDataset::new(name, split, width, bits)
}

pub fn load_amat(path: impl AsRef<Path>, split: Split) -> Result<BinaryDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| RwsError::io(path, e))?;
    parse_amat(&text, path, split)
}

pub fn write_amat(path: impl AsRef<Path>, ds: &BinaryDataset) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(ds.len() * (ds.width() * 2 + 1));
    for r in ds.rows() {
        let line: Vec<&str> = r.iter().map(|&b| if b == 1 { "1" } else { "0" }).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| RwsError::io(path, e))
}

/// Stochastic binarization of grayscale intensities in `[0, 1]`: each pixel
/// becomes 1 with probability equal to its intensity.
///
/// Not the published fixed binarization of MNIST; results from data made
/// this way are not comparable to numbers reported on that split.
pub fn binarize_stochastic(
    name: &str,
    split: Split,
    width: usize,
    gray: &[f64],
    rng: &mut RngStream,
) -> Result<BinaryDataset> {
    let bits = gray
        .iter()
        .map(|&g| sample_bernoulli(g.clamp(0.0, 1.0), rng))
        .collect();
    BinaryDataset::new(name, split, width, bits)
}

/// The bars process on a `side × side` grid: each row bar and each column bar
/// is on independently with probability 1/2, and a pixel is lit when its row
/// or column bar is on.
#[derive(Debug, Clone)]
pub struct BarsProcess {
    side: usize,
    /// image → number of bar patterns producing it
    counts: HashMap<Vec<u8>, u32>,
}

impl BarsProcess {
    pub fn new(side: usize) -> Result<Self> {
        if !(2..=8).contains(&side) {
            return Err(RwsError::Config(format!(
                "bars side must be in 2..=8, got {side}"
            )));
        }
        let mut counts = HashMap::new();
        for pattern in 0u32..1 << (2 * side) {
            *counts.entry(Self::render(side, pattern)).or_default() += 1;
        }
        Ok(BarsProcess { side, counts })
    }

    fn render(side: usize, pattern: u32) -> Vec<u8> {
        let mut img = vec![0u8; side * side];
        for r in 0..side {
            for c in 0..side {
                let row_on = (pattern >> r) & 1 == 1;
                let col_on = (pattern >> (side + c)) & 1 == 1;
                img[r * side + c] = (row_on || col_on) as u8;
            }
        }
        img
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Number of distinct images with nonzero probability.
    pub fn support_size(&self) -> usize {
        self.counts.len()
    }

    pub fn log_prob(&self, image: &[u8]) -> f64 {
        match self.counts.get(image) {
            Some(&c) => (c as f64).ln() - (2 * self.side) as f64 * 2f64.ln(),
            None => f64::NEG_INFINITY,
        }
    }

    /// Entropy in nats; `-entropy()` is the expected log-likelihood of the
    /// process on its own samples.
    pub fn entropy(&self) -> f64 {
        let total = (1u64 << (2 * self.side)) as f64;
        self.counts
            .values()
            .map(|&c| {
                let p = c as f64 / total;
                -p * p.ln()
            })
            .sum()
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<u8> {
        let mut pattern = 0u32;
        for b in 0..2 * self.side {
            pattern |= (sample_bernoulli(0.5, rng) as u32) << b;
        }
        Self::render(self.side, pattern)
    }
}

pub fn make_bars_dataset(side: usize, n: usize, rng: &mut RngStream) -> Result<BinaryDataset> {
    let process = BarsProcess::new(side)?;
    if n == 0 {
        return Err(RwsError::EmptyDataset);
    }
    let mut bits = Vec::with_capacity(n * side * side);
    for _ in 0..n {
        bits.extend(process.sample(rng));
    }
    BinaryDataset::new(
        format!("bars{side}x{side}"),
        Split::Train,
        side * side,
        bits,
    )
}

/// One shuffled pass over a dataset in batches; the last batch may be short.
pub struct Minibatches<'a> {
    ds: &'a BinaryDataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a> Iterator for Minibatches<'a> {
    type Item = Vec<&'a [u8]>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end]
            .iter()
            .map(|&i| self.ds.row(i))
            .collect();
        self.pos = end;
        Some(batch)
    }
}

pub fn minibatches<'a>(
    ds: &'a BinaryDataset,
    batch_size: usize,
    rng: &mut RngStream,
) -> Result<Minibatches<'a>> {
    if batch_size == 0 {
        return Err(RwsError::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(rng);
    Ok(Minibatches {
        ds,
        order,
        batch_size,
        pos: 0,
    })
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub ll_estimate: f64,
    pub ess_mean: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,split,ll_estimate,ess_mean,lr,seconds";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.epoch,
            self.split.as_str(),
            self.ll_estimate,
            self.ess_mean,
            self.lr,
            self.seconds
        )
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: `manifest.json` plus one raw little-endian f64 file per block.

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to resume training bit-for-bit.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub p: GenerativeModel,
    pub q: InferenceModel,
    pub config: TrainConfig,
    pub optimizer: OptimizerState,
    pub rng: RngState,
    /// Number of completed epochs.
    pub epoch: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    shape: [usize; 2],
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    #[serde(flatten)]
    family: LayerFamily,
    d_in: usize,
    d_out: usize,
    blocks: Vec<BlockEntry>,
    velocity: Vec<BlockEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    /// Autoregressive layers factorize in this order.
    ordering: String,
    /// Generative layers are listed top first, inference layers bottom first.
    epoch: usize,
    config: TrainConfig,
    rng: RngState,
    visible: usize,
    generative: Vec<LayerEntry>,
    inference: Vec<LayerEntry>,
}

fn f64_bytes(data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 8);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| RwsError::io(path, e))?;
    f.write_all(bytes).map_err(|e| RwsError::io(path, e))
}

fn layer_entries(
    dir: &Path,
    prefix: &str,
    layers: &[Layer],
    velocity: &StackGradient,
) -> Result<Vec<LayerEntry>> {
    let mut out = Vec::new();
    for (j, (layer, vel)) in layers.iter().zip(&velocity.layers).enumerate() {
        let mut blocks = Vec::new();
        let mut vblocks = Vec::new();
        for (b, vb) in layer.blocks().iter().zip(vel.blocks()) {
            let file = format!("{prefix}{j}.{}.f64", b.name);
            write_file(&dir.join(&file), &f64_bytes(b.data))?;
            blocks.push(BlockEntry {
                name: b.name.to_string(),
                shape: b.shape,
                file,
            });
            let vfile = format!("{prefix}{j}.{}.velocity.f64", b.name);
            write_file(&dir.join(&vfile), &f64_bytes(vb))?;
            vblocks.push(BlockEntry {
                name: b.name.to_string(),
                shape: b.shape,
                file: vfile,
            });
        }
        out.push(LayerEntry {
            family: layer.family(),
            d_in: layer.d_in(),
            d_out: layer.d_out(),
            blocks,
            velocity: vblocks,
        });
    }
    Ok(out)
}

pub fn save_checkpoint(dir: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| RwsError::io(dir, e))?;
    let generative = layer_entries(dir, "p", ckpt.p.layers(), &ckpt.optimizer.p_velocity)?;
    let inference = layer_entries(dir, "q", ckpt.q.layers(), &ckpt.optimizer.q_velocity)?;
    let manifest = Manifest {
        format: "rws-checkpoint".into(),
        version: CHECKPOINT_VERSION,
        ordering: "natural-index".into(),
        epoch: ckpt.epoch,
        config: ckpt.config.clone(),
        rng: ckpt.rng.clone(),
        visible: ckpt.q.visible_width(),
        generative,
        inference,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| RwsError::CheckpointManifest(e.to_string()))?;
    write_file(&dir.join(MANIFEST_FILE), text.as_bytes())
}

fn read_block(dir: &Path, entry: &BlockEntry) -> Result<Vec<f64>> {
    let path: PathBuf = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| RwsError::io(&path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(RwsError::CheckpointTruncated {
            block: entry.file.clone(),
            bytes: bytes.len() as u64,
        });
    }
    let found = bytes.len() / 8;
    let declared = entry.shape[0] * entry.shape[1];
    if found != declared {
        return Err(RwsError::CheckpointShape {
            block: entry.file.clone(),
            declared,
            found,
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn load_layers(dir: &Path, entries: &[LayerEntry]) -> Result<(Vec<Layer>, StackGradient)> {
    let mut layers = Vec::new();
    let mut vel = Vec::new();
    for e in entries {
        let blocks = e
            .blocks
            .iter()
            .map(|b| read_block(dir, b))
            .collect::<Result<Vec<_>>>()?;
        let layer =
            Layer::from_blocks(e.family, e.d_in, e.d_out, blocks).map_err(|err| match err {
                RwsError::Shape { context, .. } => RwsError::CheckpointManifest(format!(
                    "block shapes disagree with layer family: {context}"
                )),
                other => other,
            })?;
        // declared shapes must match what the layer family implies
        for (b, entry) in layer.blocks().iter().zip(&e.blocks) {
            if b.shape != entry.shape || b.name != entry.name {
                return Err(RwsError::CheckpointManifest(format!(
                    "block {} declared as {} {:?}, expected {} {:?}",
                    entry.file, entry.name, entry.shape, b.name, b.shape
                )));
            }
        }
        let mut g = layer.zero_grad();
        if e.velocity.len() != e.blocks.len() {
            return Err(RwsError::CheckpointManifest(
                "velocity block list does not match parameters".into(),
            ));
        }
        for (gb, ve) in g.blocks_mut().iter_mut().zip(&e.velocity) {
            let data = read_block(dir, ve)?;
            if data.len() != gb.len() {
                return Err(RwsError::CheckpointShape {
                    block: ve.file.clone(),
                    declared: gb.len(),
                    found: data.len(),
                });
            }
            *gb = data;
        }
        layers.push(layer);
        vel.push(g);
    }
    Ok((layers, StackGradient { layers: vel }))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| RwsError::io(&path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| RwsError::CheckpointManifest(e.to_string()))?;
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(RwsError::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let manifest: Manifest =
        serde_json::from_value(value).map_err(|e| RwsError::CheckpointManifest(e.to_string()))?;
    let (p_layers, p_velocity) = load_layers(dir, &manifest.generative)?;
    let (q_layers, q_velocity) = load_layers(dir, &manifest.inference)?;
    let p = GenerativeModel::new(p_layers)?;
    let q = InferenceModel::new(manifest.visible, q_layers)?;
    q.check_pair(&p)?;
    Ok(Checkpoint {
        p,
        q,
        config: manifest.config,
        optimizer: OptimizerState {
            p_velocity,
            q_velocity,
        },
        rng: manifest.rng,
        epoch: manifest.epoch,
    })
}
