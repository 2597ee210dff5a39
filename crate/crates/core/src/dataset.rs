//! Training samples and their on-disk format.
//!
//! A dataset is a directory holding `meta.json` and `samples.bin`. The binary
//! file is a sequence of records, each made of a little-endian `u64` header
//! length, a JSON header describing the arrays (name, dtype, shape, byte
//! offset), and the raw little-endian array payload.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{label_size, make_bev_gt, make_depth_labels, make_semantic_labels, LabelConfig};
use crate::scene::{generate_scene, render_views, Box3D, Scene, SceneConfig, SceneError};

pub const FORMAT_VERSION: u32 = 1;
const META_FILE: &str = "meta.json";
const RECORDS_FILE: &str = "samples.bin";
const BOX_FIELDS: usize = 11;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt dataset record {index}: {reason}")]
    Corrupt { index: usize, reason: String },
    #[error("invalid dataset metadata: {0}")]
    Meta(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Array extents shared by every sample of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleDims {
    pub num_views: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub label_height: usize,
    pub label_width: usize,
    pub semantic_channels: usize,
    pub depth_bins: usize,
    pub bev_channels: usize,
    pub bev_size: usize,
}

impl SampleDims {
    pub fn new(scene: &SceneConfig, labels: &LabelConfig) -> Self {
        let (lh, lw) = label_size(scene.image_height, scene.image_width, labels.stride);
        Self {
            num_views: scene.num_cameras,
            image_height: scene.image_height,
            image_width: scene.image_width,
            label_height: lh,
            label_width: lw,
            semantic_channels: labels.semantic_channels(),
            depth_bins: labels.num_depth_bins,
            bev_channels: labels.bev_channels(),
            bev_size: labels.bev_size,
        }
    }

    pub fn image_len(&self) -> usize {
        self.num_views * 3 * self.image_height * self.image_width
    }

    pub fn view_image_len(&self) -> usize {
        3 * self.image_height * self.image_width
    }

    pub fn label_plane(&self) -> usize {
        self.label_height * self.label_width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub dims: SampleDims,
    /// Scene seed the sample was generated from.
    pub seed: u64,
    /// `N x 3 x H_I x W_I`.
    pub images: Vec<f32>,
    /// `N x C_s x H x W`.
    pub semantic: Vec<u8>,
    /// `N x C_d x H x W`.
    pub depth: Vec<u8>,
    /// `N x H x W`.
    pub depth_mask: Vec<u8>,
    /// `C_b x H_b x W_b`.
    pub bev: Vec<u8>,
    pub boxes: Vec<Box3D>,
}

impl TrainingSample {
    /// Zeroes the images and labels of the listed views.
    pub fn drop_views(&mut self, views: &[usize]) {
        let d = self.dims;
        let plane = d.label_plane();
        for &v in views {
            self.images[v * d.view_image_len()..(v + 1) * d.view_image_len()].fill(0.0);
            self.semantic[v * d.semantic_channels * plane..(v + 1) * d.semantic_channels * plane].fill(0);
            self.depth[v * d.depth_bins * plane..(v + 1) * d.depth_bins * plane].fill(0);
            self.depth_mask[v * plane..(v + 1) * plane].fill(0);
        }
    }
}

/// Renders a scene and derives every label for it.
pub fn build_sample(scene: &Scene, scene_cfg: &SceneConfig, label_cfg: &LabelConfig) -> TrainingSample {
    let dims = SampleDims::new(scene_cfg, label_cfg);
    let rendering = render_views(scene, scene_cfg);
    let depth = make_depth_labels(scene, label_cfg);
    TrainingSample {
        dims,
        seed: scene.seed,
        images: rendering.images,
        semantic: make_semantic_labels(scene, label_cfg),
        depth: depth.one_hot,
        depth_mask: depth.mask,
        bev: make_bev_gt(scene, label_cfg),
        boxes: scene.boxes.clone(),
    }
}

pub fn generate_samples(
    scene_cfg: &SceneConfig,
    label_cfg: &LabelConfig,
    seeds: &[u64],
) -> Result<Vec<TrainingSample>, DatasetError> {
    seeds
        .iter()
        .map(|&s| {
            let scene = generate_scene(scene_cfg, s)?;
            Ok(build_sample(&scene, scene_cfg, label_cfg))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub scene: SceneConfig,
    pub labels: LabelConfig,
    pub dims: SampleDims,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct FieldHeader {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct RecordHeader {
    index: usize,
    seed: u64,
    fields: Vec<FieldHeader>,
}

enum Array<'a> {
    F32(&'a [f32]),
    F64(&'a [f64]),
    U8(&'a [u8]),
}

impl Array<'_> {
    fn dtype(&self) -> &'static str {
        match self {
            Array::F32(_) => "f32",
            Array::F64(_) => "f64",
            Array::U8(_) => "u8",
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            Array::F32(a) => a.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Array::F64(a) => a.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Array::U8(a) => out.extend_from_slice(a),
        }
    }
}

fn boxes_to_rows(boxes: &[Box3D]) -> Vec<f64> {
    boxes
        .iter()
        .flat_map(|b| {
            [
                b.center[0],
                b.center[1],
                b.center[2],
                b.size[0],
                b.size[1],
                b.size[2],
                b.yaw,
                b.velocity[0],
                b.velocity[1],
                b.class_id as f64,
                b.attribute_id as f64,
            ]
        })
        .collect()
}

fn rows_to_boxes(rows: &[f64]) -> Vec<Box3D> {
    rows.chunks_exact(BOX_FIELDS)
        .map(|r| Box3D {
            center: [r[0], r[1], r[2]],
            size: [r[3], r[4], r[5]],
            yaw: r[6],
            velocity: [r[7], r[8]],
            class_id: r[9] as usize,
            attribute_id: r[10] as usize,
        })
        .collect()
}

fn encode_record(index: usize, s: &TrainingSample) -> Vec<u8> {
    let d = s.dims;
    let (h, w) = (d.label_height, d.label_width);
    let box_rows = boxes_to_rows(&s.boxes);
    let arrays: Vec<(&str, Vec<usize>, Array)> = vec![
        (
            "images",
            vec![d.num_views, 3, d.image_height, d.image_width],
            Array::F32(&s.images),
        ),
        (
            "semantic",
            vec![d.num_views, d.semantic_channels, h, w],
            Array::U8(&s.semantic),
        ),
        ("depth", vec![d.num_views, d.depth_bins, h, w], Array::U8(&s.depth)),
        ("depth_mask", vec![d.num_views, h, w], Array::U8(&s.depth_mask)),
        ("bev", vec![d.bev_channels, d.bev_size, d.bev_size], Array::U8(&s.bev)),
        ("boxes", vec![s.boxes.len(), BOX_FIELDS], Array::F64(&box_rows)),
    ];
    let mut payload = Vec::new();
    let mut fields = Vec::with_capacity(arrays.len());
    for (name, shape, arr) in &arrays {
        let offset = payload.len();
        arr.write_le(&mut payload);
        fields.push(FieldHeader {
            name: name.to_string(),
            dtype: arr.dtype().into(),
            shape: shape.clone(),
            offset,
            nbytes: payload.len() - offset,
        });
    }
    let header = serde_json::to_vec(&RecordHeader {
        index,
        seed: s.seed,
        fields,
    })
    .expect("record header serializes");
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn write_dataset(path: &Path, meta: &DatasetMeta, samples: &[TrainingSample]) -> Result<(), DatasetError> {
    if meta.seeds.len() != samples.len() {
        return Err(DatasetError::Meta(format!(
            "{} seeds for {} samples",
            meta.seeds.len(),
            samples.len()
        )));
    }
    fs::create_dir_all(path).map_err(io_err(path))?;
    let meta_path = path.join(META_FILE);
    let meta_json = serde_json::to_string_pretty(meta).map_err(|e| DatasetError::Meta(e.to_string()))?;
    fs::write(&meta_path, meta_json).map_err(io_err(&meta_path))?;
    let rec_path = path.join(RECORDS_FILE);
    let file = File::create(&rec_path).map_err(io_err(&rec_path))?;
    let mut out = BufWriter::new(file);
    for (i, s) in samples.iter().enumerate() {
        out.write_all(&encode_record(i, s)).map_err(io_err(&rec_path))?;
    }
    out.flush().map_err(io_err(&rec_path))?;
    Ok(())
}

pub fn read_meta(path: &Path) -> Result<DatasetMeta, DatasetError> {
    let meta_path = path.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| DatasetError::Meta(e.to_string()))?;
    if meta.version != FORMAT_VERSION {
        return Err(DatasetError::Meta(format!("unsupported version {}", meta.version)));
    }
    Ok(meta)
}

fn decode_record(
    index: usize,
    header: &RecordHeader,
    payload: &[u8],
    dims: SampleDims,
) -> Result<TrainingSample, DatasetError> {
    let corrupt = |reason: String| DatasetError::Corrupt { index, reason };
    let field = |name: &str, dtype: &str, numel: Option<usize>| -> Result<&[u8], DatasetError> {
        let f = header
            .fields
            .iter()
            .find(|f| f.name == name)
            .ok_or_else(|| corrupt(format!("missing field `{name}`")))?;
        if f.dtype != dtype {
            return Err(corrupt(format!(
                "field `{name}` has dtype {} (expected {dtype})",
                f.dtype
            )));
        }
        let elem = match dtype {
            "f32" => 4,
            "f64" => 8,
            _ => 1,
        };
        let count: usize = f.shape.iter().product();
        if count * elem != f.nbytes || numel.is_some_and(|n| n != count) {
            return Err(corrupt(format!("field `{name}` has inconsistent shape {:?}", f.shape)));
        }
        payload
            .get(f.offset..f.offset + f.nbytes)
            .ok_or_else(|| corrupt(format!("field `{name}` runs past the record payload")))
    };
    let plane = dims.label_plane();
    let images = field("images", "f32", Some(dims.image_len()))?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let semantic = field("semantic", "u8", Some(dims.num_views * dims.semantic_channels * plane))?.to_vec();
    let depth = field("depth", "u8", Some(dims.num_views * dims.depth_bins * plane))?.to_vec();
    let depth_mask = field("depth_mask", "u8", Some(dims.num_views * plane))?.to_vec();
    let bev = field("bev", "u8", Some(dims.bev_channels * dims.bev_size * dims.bev_size))?.to_vec();
    let rows: Vec<f64> = field("boxes", "f64", None)?
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    Ok(TrainingSample {
        dims,
        seed: header.seed,
        images,
        semantic,
        depth,
        depth_mask,
        bev,
        boxes: rows_to_boxes(&rows),
    })
}

pub fn read_dataset(path: &Path) -> Result<(DatasetMeta, Vec<TrainingSample>), DatasetError> {
    let meta = read_meta(path)?;
    let rec_path = path.join(RECORDS_FILE);
    let file = File::open(&rec_path).map_err(io_err(&rec_path))?;
    let mut reader = BufReader::new(file);
    let mut samples = Vec::with_capacity(meta.seeds.len());
    for index in 0..meta.seeds.len() {
        let corrupt = |reason: &str| DatasetError::Corrupt {
            index,
            reason: reason.to_string(),
        };
        let mut len = [0u8; 8];
        reader
            .read_exact(&mut len)
            .map_err(|_| corrupt("truncated before header length"))?;
        let hlen = u64::from_le_bytes(len) as usize;
        if hlen > 1 << 24 {
            return Err(corrupt("implausible header length"));
        }
        let mut hbuf = vec![0u8; hlen];
        reader.read_exact(&mut hbuf).map_err(|_| corrupt("truncated header"))?;
        let header: RecordHeader =
            serde_json::from_slice(&hbuf).map_err(|e| corrupt(&format!("bad header json: {e}")))?;
        if header.index != index {
            return Err(corrupt(&format!("record claims index {}", header.index)));
        }
        let payload_len = header.fields.iter().map(|f| f.offset + f.nbytes).max().unwrap_or(0);
        let mut payload = vec![0u8; payload_len];
        reader
            .read_exact(&mut payload)
            .map_err(|_| corrupt("truncated payload"))?;
        samples.push(decode_record(index, &header, &payload, meta.dims)?);
    }
    let mut probe = [0u8; 1];
    if reader.read(&mut probe).map_err(io_err(&rec_path))? != 0 {
        return Err(DatasetError::Corrupt {
            index: meta.seeds.len(),
            reason: "trailing bytes after the last record".into(),
        });
    }
    Ok((meta, samples))
}
