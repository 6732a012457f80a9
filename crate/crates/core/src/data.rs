//! Dataset ingestion: event-stream binning, raw tensor files, augmentation
//! and synthetic spatio-temporal generators.
//!
//! On-disk layout of a dataset root:
//!
//! ```text
//! root/manifest.txt          key = value manifest (see DatasetManifest)
//! root/data/<split>_x.bin    raw tensor [n, ..sample_shape]
//! root/data/<split>_y.bin    raw tensor [n] of class indices
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{join_list, KeyValues};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EVENT_MAGIC: [u8; 8] = *b"MLFEVT01";
const EVENT_HEADER: usize = 16;
const EVENT_RECORD: usize = 9;
const TENSOR_MAGIC: &str = "mlf-tensor 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub t_us: u32,
    pub x: u16,
    pub y: u16,
    pub polarity: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub height: usize,
    pub width: usize,
    pub label: usize,
}

impl EventStream {
    pub fn validate(&self) -> Result<()> {
        let mut last = 0;
        for (i, e) in self.events.iter().enumerate() {
            if e.t_us < last {
                return Err(Error::Data(format!("event {i}: timestamp {} < {last}", e.t_us)));
            }
            last = e.t_us;
            if e.x as usize >= self.width || e.y as usize >= self.height {
                return Err(Error::Data(format!(
                    "event {i}: ({}, {}) outside {}x{} sensor",
                    e.x, e.y, self.width, self.height
                )));
            }
            if e.polarity > 1 {
                return Err(Error::Data(format!("event {i}: polarity {}", e.polarity)));
            }
        }
        Ok(())
    }
}

/// Binned representation: `[T, 2, H', W']` occupancy frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub frames: Tensor,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BinStats {
    pub total: usize,
    pub mapped: usize,
    pub discarded: usize,
    pub collisions: usize,
}

/// Slices a stream into `timesteps` windows of `bin_ms` milliseconds and
/// downsamples coordinates by floor scaling. Events past the last window are
/// dropped; a cell hit more than once still reads 1 and counts as a collision.
pub fn bin_events(
    stream: &EventStream,
    target: (usize, usize),
    bin_ms: f64,
    timesteps: usize,
) -> Result<(FrameSequence, BinStats)> {
    if !(bin_ms > 0.0) || timesteps == 0 || target.0 == 0 || target.1 == 0 {
        return Err(Error::Config(format!(
            "bin_events needs bin_ms > 0, T ≥ 1 and a non-empty target, got {bin_ms} ms, T = {timesteps}, {target:?}"
        )));
    }
    stream.validate()?;
    let (th, tw) = target;
    let mut frames = Tensor::zeros(&[timesteps, 2, th, tw]);
    let mut stats = BinStats {
        total: stream.events.len(),
        ..Default::default()
    };
    let bin_us = bin_ms * 1000.0;
    for e in &stream.events {
        let slot = (e.t_us as f64 / bin_us).floor() as usize;
        if slot >= timesteps {
            stats.discarded += 1;
            continue;
        }
        let y = e.y as usize * th / stream.height;
        let x = e.x as usize * tw / stream.width;
        let idx = ((slot * 2 + e.polarity as usize) * th + y) * tw + x;
        let cell = &mut frames.data_mut()[idx];
        if *cell == 1.0 {
            stats.collisions += 1;
        } else {
            *cell = 1.0;
            stats.mapped += 1;
        }
    }
    Ok((
        FrameSequence {
            frames,
            label: stream.label,
        },
        stats,
    ))
}

pub fn encode_events(stream: &EventStream) -> Result<Vec<u8>> {
    if stream.width > u16::MAX as usize || stream.height > u16::MAX as usize {
        return Err(Error::Data("sensor size exceeds u16".into()));
    }
    let mut buf = Vec::with_capacity(EVENT_HEADER + EVENT_RECORD * stream.events.len());
    buf.extend_from_slice(&EVENT_MAGIC);
    buf.extend_from_slice(&(stream.width as u16).to_le_bytes());
    buf.extend_from_slice(&(stream.height as u16).to_le_bytes());
    buf.extend_from_slice(&(stream.events.len() as u32).to_le_bytes());
    for e in &stream.events {
        buf.extend_from_slice(&e.t_us.to_le_bytes());
        buf.extend_from_slice(&e.x.to_le_bytes());
        buf.extend_from_slice(&e.y.to_le_bytes());
        buf.push(e.polarity);
    }
    Ok(buf)
}

pub fn decode_events(bytes: &[u8], label: usize) -> Result<EventStream> {
    let fmt = |offset, message: &str| Error::Format {
        offset,
        message: message.to_string(),
    };
    if bytes.len() < EVENT_HEADER {
        return Err(fmt(bytes.len(), "truncated event header"));
    }
    if bytes[..8] != EVENT_MAGIC {
        return Err(fmt(0, "bad event file magic"));
    }
    let width = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let height = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
    let count = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let expected = EVENT_HEADER + count * EVENT_RECORD;
    if bytes.len() != expected {
        return Err(fmt(
            bytes.len().min(expected),
            &format!("header declares {count} events ({expected} bytes), file has {}", bytes.len()),
        ));
    }
    let events = bytes[EVENT_HEADER..]
        .chunks_exact(EVENT_RECORD)
        .map(|r| Event {
            t_us: u32::from_le_bytes(r[0..4].try_into().expect("4 bytes")),
            x: u16::from_le_bytes([r[4], r[5]]),
            y: u16::from_le_bytes([r[6], r[7]]),
            polarity: r[8],
        })
        .collect();
    let stream = EventStream {
        events,
        height,
        width,
        label,
    };
    stream.validate()?;
    Ok(stream)
}

pub fn read_events(path: &Path, label: usize) -> Result<EventStream> {
    decode_events(&fs::read(path)?, label)
}

pub fn write_events(path: &Path, stream: &EventStream) -> Result<()> {
    write_atomic(path, &encode_events(stream)?)
}

/// Text header (`mlf-tensor 1`, `dims`, `count`, `dtype = f64`, `end`)
/// followed by the little-endian values.
pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let header = format!(
        "{TENSOR_MAGIC}\ndims = {}\ncount = {}\ndtype = f64\nend\n",
        join_list(t.shape()),
        t.len()
    );
    let mut buf = header.into_bytes();
    buf.reserve(8 * t.len());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let fmt = |offset, message: String| Error::Format { offset, message };
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            return Err(fmt(pos, "unterminated tensor header".into()));
        };
        let line = std::str::from_utf8(&bytes[pos..pos + nl])
            .map_err(|_| fmt(pos, "non-UTF-8 header line".into()))?
            .trim()
            .to_string();
        let start = pos;
        pos += nl + 1;
        if line == "end" {
            break;
        }
        lines.push((start, line));
        if lines.len() > 16 {
            return Err(fmt(start, "tensor header too long".into()));
        }
    }
    let Some((_, magic)) = lines.first() else {
        return Err(fmt(0, "empty tensor header".into()));
    };
    if magic != TENSOR_MAGIC {
        return Err(fmt(0, format!("expected `{TENSOR_MAGIC}`, got `{magic}`")));
    }
    let (mut dims, mut count, mut dtype) = (None, None, None);
    for (off, line) in &lines[1..] {
        let Some((k, v)) = line.split_once('=') else {
            return Err(fmt(*off, format!("malformed header line `{line}`")));
        };
        let v = v.trim();
        match k.trim() {
            "dims" => {
                let d: std::result::Result<Vec<usize>, _> = if v.is_empty() {
                    Ok(vec![])
                } else {
                    v.split(',').map(|s| s.trim().parse()).collect()
                };
                dims = Some(d.map_err(|_| fmt(*off, format!("bad dims `{v}`")))?);
            }
            "count" => count = Some(v.parse::<usize>().map_err(|_| fmt(*off, format!("bad count `{v}`")))?),
            "dtype" => dtype = Some(v.to_string()),
            other => return Err(fmt(*off, format!("unknown header key `{other}`"))),
        }
    }
    let (Some(dims), Some(count)) = (dims, count) else {
        return Err(fmt(pos, "header lacks dims or count".into()));
    };
    if dtype.as_deref() != Some("f64") {
        return Err(fmt(pos, format!("unsupported dtype {dtype:?}")));
    }
    if dims.iter().product::<usize>() != count {
        return Err(fmt(pos, format!("dims {dims:?} disagree with count {count}")));
    }
    let blob = &bytes[pos..];
    if blob.len() != 8 * count {
        return Err(fmt(
            pos + blob.len().min(8 * count),
            format!("expected {} data bytes, found {}", 8 * count, blob.len()),
        ));
    }
    let data = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(dims, data)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode_tensor(t))
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Data(format!("not a file path: {}", path.display())))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Labelled samples, each `[T, C, H, W]` or a static `[C, H, W]` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.shape())
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Keeps only samples whose label is in `keep`, relabelled by position in `keep`.
    pub fn restrict_classes(&self, keep: &[usize]) -> Dataset {
        let mut out = Dataset {
            samples: Vec::new(),
            labels: Vec::new(),
            classes: keep.len(),
        };
        for (s, &l) in self.samples.iter().zip(&self.labels) {
            if let Some(pos) = keep.iter().position(|&k| k == l) {
                out.samples.push(s.clone());
                out.labels.push(pos);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.len() != self.labels.len() {
            return Err(Error::Data("sample and label counts differ".into()));
        }
        if let Some(shape) = self.sample_shape() {
            if self.samples.iter().any(|s| s.shape() != shape) {
                return Err(Error::Data("samples differ in shape".into()));
            }
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::Data(format!("label {l} outside {} classes", self.classes)));
        }
        Ok(())
    }

    pub fn stacked(&self) -> Result<Tensor> {
        let shape = self
            .sample_shape()
            .ok_or_else(|| Error::Data("empty dataset".into()))?;
        let mut dims = vec![self.len()];
        dims.extend_from_slice(shape);
        let data = self.samples.iter().flat_map(|s| s.data().iter().copied()).collect();
        Tensor::new(dims, data)
    }

    pub fn from_stacked(x: &Tensor, labels: &Tensor, classes: usize) -> Result<Dataset> {
        if x.ndim() < 2 || labels.ndim() != 1 || labels.dim(0) != x.dim(0) {
            return Err(Error::Data(format!(
                "inputs {:?} and labels {:?} do not line up",
                x.shape(),
                labels.shape()
            )));
        }
        let per = x.len() / x.dim(0).max(1);
        let shape = x.shape()[1..].to_vec();
        let samples = x
            .data()
            .chunks(per.max(1))
            .take(x.dim(0))
            .map(|c| Tensor::new(shape.clone(), c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let labels = labels
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Data(format!("label {v} is not a class index")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset {
            samples,
            labels,
            classes,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Dataset-level metadata stored as `root/manifest.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub sample_shape: Vec<usize>,
    pub splits: Vec<(String, usize)>,
    pub preprocessing: Vec<(String, String)>,
    pub fingerprint: String,
}

/// Stable digest of preprocessing parameters (order-insensitive).
pub fn fingerprint(params: &[(String, String)]) -> String {
    let mut sorted: Vec<_> = params.iter().map(|(k, v)| format!("{k}={v}")).collect();
    sorted.sort();
    let digest = Sha256::digest(sorted.join("\n").as_bytes());
    hex::encode(&digest[..8])
}

impl DatasetManifest {
    pub fn render(&self) -> String {
        let mut kv = KeyValues::default();
        kv.insert("format", "mlf-dataset-1");
        kv.insert("classes", self.class_names.join(","));
        kv.insert("sample_shape", join_list(&self.sample_shape));
        kv.insert("fingerprint", &self.fingerprint);
        for (name, n) in &self.splits {
            kv.insert(&format!("split.{name}"), n);
        }
        for (k, v) in &self.preprocessing {
            kv.insert(&format!("prep.{k}"), v);
        }
        kv.render()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text).map_err(|e| Error::Data(format!("manifest: {e}")))?;
        let data_err = |e: Error| Error::Data(format!("manifest: {e}"));
        if kv.take_str("format").as_deref() != Some("mlf-dataset-1") {
            return Err(Error::Data("manifest: missing or unknown format".into()));
        }
        let class_names: Vec<String> = kv
            .take_str("classes")
            .ok_or_else(|| Error::Data("manifest: missing classes".into()))?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let sample_shape = kv
            .take_list("sample_shape")
            .map_err(data_err)?
            .ok_or_else(|| Error::Data("manifest: missing sample_shape".into()))?;
        let fingerprint = kv.take_str("fingerprint").unwrap_or_default();
        let mut splits = Vec::new();
        for (k, v) in kv.split_section("split").render().lines().filter_map(|l| l.split_once(" = ")) {
            let n = v.parse().map_err(|_| Error::Data(format!("manifest: bad count for {k}")))?;
            splits.push((k.trim_start_matches("split.").to_string(), n));
        }
        let preprocessing = kv
            .split_section("prep")
            .render()
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.trim_start_matches("prep.").to_string(), v.to_string()))
            .collect();
        kv.finish().map_err(data_err)?;
        Ok(Self {
            class_names,
            sample_shape,
            splits,
            preprocessing,
            fingerprint,
        })
    }
}

pub fn save_dataset_dir(
    root: &Path,
    splits: &[(&str, &Dataset)],
    class_names: &[String],
    preprocessing: &[(String, String)],
) -> Result<DatasetManifest> {
    let shape = splits
        .iter()
        .find_map(|(_, d)| d.sample_shape().map(<[usize]>::to_vec))
        .ok_or_else(|| Error::Data("no samples to save".into()))?;
    for (name, d) in splits {
        d.validate()?;
        let x = d.stacked()?;
        let y = Tensor::new(vec![d.len()], d.labels.iter().map(|&l| l as f64).collect())?;
        write_tensor(&root.join("data").join(format!("{name}_x.bin")), &x)?;
        write_tensor(&root.join("data").join(format!("{name}_y.bin")), &y)?;
    }
    let manifest = DatasetManifest {
        class_names: class_names.to_vec(),
        sample_shape: shape,
        splits: splits.iter().map(|(n, d)| (n.to_string(), d.len())).collect(),
        preprocessing: {
            let mut p = preprocessing.to_vec();
            p.sort();
            p
        },
        fingerprint: fingerprint(preprocessing),
    };
    write_atomic(&root.join("manifest.txt"), manifest.render().as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.txt");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    DatasetManifest::parse(&text)
}

/// Loads one split of a dataset root.
pub fn load_raw_tensor_dataset(root: &Path, split: &str) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    if !manifest.splits.iter().any(|(s, _)| s == split) {
        return Err(Error::Data(format!("split `{split}` not in {}", root.display())));
    }
    let open = |suffix: &str| -> Result<Tensor> {
        let p = root.join("data").join(format!("{split}_{suffix}.bin"));
        let bytes = fs::read(&p).map_err(|e| Error::Data(format!("cannot read {}: {e}", p.display())))?;
        decode_tensor(&bytes)
    };
    let ds = Dataset::from_stacked(&open("x")?, &open("y")?, manifest.class_names.len())?;
    if ds.sample_shape().is_some_and(|s| s != manifest.sample_shape.as_slice()) {
        return Err(Error::Data("sample shape disagrees with manifest".into()));
    }
    Ok(ds)
}

/// Per-channel mean and standard deviation over a dataset of `[C, H, W]` images.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STANDARDIZE_EPS: f64 = 1e-8;

impl ChannelStats {
    pub fn from_images(images: &[Tensor]) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::Data("no images".into()))?;
        first.expect_ndim(3, "image")?;
        let c = first.dim(0);
        let plane = first.dim(1) * first.dim(2);
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for img in images {
            for ch in 0..c {
                for v in &img.data()[ch * plane..(ch + 1) * plane] {
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let n = (images.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt())
            .collect();
        Ok(Self { mean, std })
    }
}

/// Zero-padded crop of `[C, H, W]` at offset `(dy, dx)` within the padded image.
pub fn crop_padded(img: &Tensor, pad: usize, dy: usize, dx: usize) -> Tensor {
    let (c, h, w) = (img.dim(0), img.dim(1), img.dim(2));
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (sy, sx) = ((y + dy) as isize - pad as isize, (x + dx) as isize - pad as isize);
        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
            0.0
        } else {
            img.data()[(ch * h + sy as usize) * w + sx as usize]
        }
    })
}

pub fn flip_horizontal(img: &Tensor) -> Tensor {
    let (h, w) = (img.dim(1), img.dim(2));
    Tensor::from_fn(img.shape(), |i| {
        let (row, x) = (i / w, i % w);
        let _ = h;
        img.data()[row * w + (w - 1 - x)]
    })
}

pub fn standardize(img: &Tensor, stats: &ChannelStats) -> Tensor {
    let plane = img.dim(1) * img.dim(2);
    Tensor::from_fn(img.shape(), |i| {
        let c = i / plane;
        (img.data()[i] - stats.mean[c]) / stats.std[c].max(STANDARDIZE_EPS)
    })
}

/// Pad-4 random crop and horizontal flip (train only), then per-channel
/// standardization.
pub fn augment_image(img: &Tensor, rng: &mut impl Rng, train: bool, stats: &ChannelStats) -> Result<Tensor> {
    img.expect_ndim(3, "augment_image")?;
    if img.dim(0) != stats.mean.len() {
        return Err(Error::Dimension("channel stats do not match image".into()));
    }
    if !train {
        return Ok(standardize(img, stats));
    }
    const PAD: usize = 4;
    let dy = rng.gen_range(0..=2 * PAD);
    let dx = rng.gen_range(0..=2 * PAD);
    let mut out = crop_padded(img, PAD, dy, dx);
    if rng.gen_bool(0.5) {
        out = flip_horizontal(&out);
    }
    Ok(standardize(&out, stats))
}

/// Parameters of the synthetic spatio-temporal generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub samples: usize,
    pub timesteps: usize,
    /// Per-timestep `(C, H, W)`; `C ≥ 2`.
    pub shape: [usize; 3],
    pub seed: u64,
    pub on_prob: f64,
    pub noise_prob: f64,
}

impl SynthConfig {
    pub fn new(classes: usize, samples: usize, timesteps: usize, shape: [usize; 3], seed: u64) -> Self {
        Self {
            classes,
            samples,
            timesteps,
            shape,
            seed,
            on_prob: 0.9,
            noise_prob: 0.02,
        }
    }

    pub fn preprocessing(&self) -> Vec<(String, String)> {
        vec![
            ("generator".into(), "synth-order-pairs".into()),
            ("classes".into(), self.classes.to_string()),
            ("samples".into(), self.samples.to_string()),
            ("timesteps".into(), self.timesteps.to_string()),
            ("shape".into(), join_list(&self.shape)),
            ("seed".into(), self.seed.to_string()),
            ("on_prob".into(), self.on_prob.to_string()),
            ("noise_prob".into(), self.noise_prob.to_string()),
        ]
    }
}

/// Spatial support of pair `pair`'s two stimuli: rows of a horizontal band.
fn pair_region(pair: usize, pairs: usize, h: usize, w: usize) -> Vec<(usize, usize)> {
    let band = (h / pairs.max(1)).max(1);
    let top = (pair * band).min(h.saturating_sub(1));
    let bottom = (top + band).min(h);
    let mut cells = Vec::new();
    for y in top..bottom {
        for x in 0..w {
            cells.push((y, x));
        }
    }
    cells
}

/// Classes come in pairs `(2m, 2m+1)` that share a region and two stimuli,
/// `A` on polarity channel 0 and `B` on channel 1. Class `2m` cycles
/// `A, B, blank`, class `2m+1` cycles `B, A, blank`, each from a random phase,
/// so a single frame has the same distribution in both classes and only the
/// order tells them apart. Pattern cells fire with `on_prob`; every cell adds
/// background noise with `noise_prob`. An odd last class shows both stimuli.
pub fn synth_spatiotemporal(cfg: &SynthConfig) -> Result<Dataset> {
    let [c, h, w] = cfg.shape;
    if cfg.classes < 2 || c < 2 || h == 0 || w == 0 || cfg.timesteps == 0 {
        return Err(Error::Config(format!(
            "synthetic data needs ≥ 2 classes, ≥ 2 channels and non-empty frames, got {cfg:?}"
        )));
    }
    let pairs = cfg.classes.div_ceil(2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::with_capacity(cfg.samples);
    let mut labels = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let label = i % cfg.classes;
        let pair = label / 2;
        let region = pair_region(pair, pairs, h, w);
        let phase = rng.gen_range(0..3);
        let mut x = Tensor::zeros(&[cfg.timesteps, c, h, w]);
        for t in 0..cfg.timesteps {
            let slot = (t + phase) % 3;
            let channels: &[usize] = match (label % 2, slot, label + 1 == cfg.classes && cfg.classes % 2 == 1) {
                (_, 2, _) => &[],
                (_, _, true) => &[0, 1],
                (0, 0, _) | (1, 1, _) => &[0],
                _ => &[1],
            };
            let frame = &mut x.data_mut()[t * c * h * w..(t + 1) * c * h * w];
            for &ch in channels {
                for &(yy, xx) in &region {
                    if rng.gen_bool(cfg.on_prob) {
                        frame[(ch * h + yy) * w + xx] = 1.0;
                    }
                }
            }
            for v in frame.iter_mut() {
                if rng.gen_bool(cfg.noise_prob) {
                    *v = 1.0;
                }
            }
        }
        samples.push(x);
        labels.push(label);
    }
    let mut order: Vec<usize> = (0..cfg.samples).collect();
    order.shuffle(&mut rng);
    let ds = Dataset {
        samples,
        labels,
        classes: cfg.classes,
    };
    Ok(ds.subset(&order))
}

/// Replaces every sequence by one uniformly chosen frame `[C, H, W]`, which
/// the network then sees unchanged at every timestep.
pub fn single_frame_ablation(ds: &Dataset, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = ds
        .samples
        .iter()
        .map(|s| {
            s.expect_ndim(4, "sequence sample")?;
            let frame = s.len() / s.dim(0);
            let t = rng.gen_range(0..s.dim(0));
            Tensor::new(s.shape()[1..].to_vec(), s.data()[t * frame..(t + 1) * frame].to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        labels: ds.labels.clone(),
        classes: ds.classes,
    })
}
