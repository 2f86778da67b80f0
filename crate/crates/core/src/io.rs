//! Dataset ingestion, model serialization, certificate and metrics output.
//!
//! Model files are versioned JSON with a checksum over the body, so a
//! round trip reproduces forward outputs bit for bit. Parameters default to
//! decimal arrays (diff-friendly); base64 little-endian blobs are opt-in
//! for large models.

use std::fs;
use std::io::Write;
use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::autodual::Norm;
use crate::certifier::Certificate;
use crate::error::{Error, Result};
use crate::netgraph::{LayerKind, LayerSpec, NetworkGraph};
use crate::tensor::Tensor;
use crate::trainer::EpochMetrics;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Dataset {
    /// [n, features], features scaled to the loader's contract.
    pub xs: Tensor,
    pub ys: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn features(&self) -> usize {
        if self.xs.shape().len() == 2 {
            self.xs.shape()[1]
        } else {
            0
        }
    }

    /// First `k` examples.
    pub fn take(&self, k: usize) -> Dataset {
        let k = k.min(self.len());
        let d = self.features();
        Dataset {
            xs: Tensor::new(vec![k, d], self.xs.data()[..k * d].to_vec()).unwrap(),
            ys: self.ys[..k].to_vec(),
        }
    }

    /// Examples `from..to`.
    pub fn slice(&self, from: usize, to: usize) -> Dataset {
        let d = self.features();
        Dataset {
            xs: Tensor::new(vec![to - from, d], self.xs.data()[from * d..to * d].to_vec()).unwrap(),
            ys: self.ys[from..to].to_vec(),
        }
    }
}

// ---- IDX ------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    let b: [u8; 4] = bytes
        .get(at..at + 4)
        .ok_or_else(|| Error::Dataset(format!("truncated {what} header")))?
        .try_into()
        .unwrap();
    Ok(u32::from_be_bytes(b))
}

/// MNIST-style container: big-endian headers, one byte per pixel or label.
/// Pixels come out scaled to [0, 1].
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = fs::read(images)?;
    let lab = fs::read(labels)?;

    let magic = be_u32(&img, 0, "image")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Dataset(format!(
            "image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n_img = be_u32(&img, 4, "image")? as usize;
    let rows = be_u32(&img, 8, "image")? as usize;
    let cols = be_u32(&img, 12, "image")? as usize;

    let magic = be_u32(&lab, 0, "label")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Dataset(format!(
            "label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n_lab = be_u32(&lab, 4, "label")? as usize;

    if n_img != n_lab {
        return Err(Error::Dataset(format!("{n_img} images but {n_lab} labels")));
    }
    let pixels = n_img * rows * cols;
    if img.len() < 16 + pixels {
        return Err(Error::Dataset(format!(
            "image file truncated: {} bytes for {} pixels",
            img.len() - 16,
            pixels
        )));
    }
    if lab.len() < 8 + n_lab {
        return Err(Error::Dataset("label file truncated".into()));
    }

    let xs = Tensor::new(
        vec![n_img, rows * cols],
        img[16..16 + pixels].iter().map(|&b| b as f64 / 255.0).collect(),
    )?;
    let ys = lab[8..8 + n_lab].iter().map(|&b| b as usize).collect();
    Ok(Dataset { xs, ys })
}

// ---- CSV ------------------------------------------------------------------

/// Rows of "label, feature, feature, ...". Ragged rows are rejected with
/// their line number; an empty file is an empty dataset.
pub fn load_csv(path: &Path, has_header: bool) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        if has_header && lineno == 0 {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label_field = fields.next().unwrap().trim();
        let label: usize = label_field
            .parse()
            .map_err(|_| Error::Dataset(format!("line {}: bad label {label_field:?}", lineno + 1)))?;
        let feats: Vec<f64> = fields
            .map(|f| {
                f.trim()
                    .parse()
                    .map_err(|_| Error::Dataset(format!("line {}: bad value {:?}", lineno + 1, f.trim())))
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(feats.len()),
            Some(w) if w != feats.len() => {
                return Err(Error::Dataset(format!(
                    "line {}: {} features, expected {}",
                    lineno + 1,
                    feats.len(),
                    w
                )));
            }
            _ => {}
        }
        xs.extend(feats);
        ys.push(label);
    }
    let w = width.unwrap_or(0);
    Ok(Dataset { xs: Tensor::new(vec![ys.len(), w], xs)?, ys })
}

// ---- model files ----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TensorRepr {
    shape: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    base64: Option<String>,
}

impl TensorRepr {
    fn from(t: &Tensor, blob: bool) -> TensorRepr {
        if blob {
            let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            TensorRepr {
                shape: t.shape().to_vec(),
                data: None,
                base64: Some(base64::engine::general_purpose::STANDARD.encode(bytes)),
            }
        } else {
            TensorRepr { shape: t.shape().to_vec(), data: Some(t.data().to_vec()), base64: None }
        }
    }

    fn to_tensor(&self) -> Result<Tensor> {
        let data = match (&self.data, &self.base64) {
            (Some(d), None) => d.clone(),
            (None, Some(b)) => {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(b)
                    .map_err(|e| Error::ModelFormat(format!("bad base64 parameter: {e}")))?;
                if bytes.len() % 8 != 0 {
                    return Err(Error::ModelFormat("parameter blob not a multiple of 8 bytes".into()));
                }
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
            }
            _ => return Err(Error::ModelFormat("parameter needs exactly one of data/base64".into())),
        };
        Ok(Tensor::new(self.shape.clone(), data)?)
    }
}

#[derive(Serialize, Deserialize)]
struct LayerRepr {
    id: usize,
    kind: String,
    inputs: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    w: Option<TensorRepr>,
    #[serde(skip_serializing_if = "Option::is_none")]
    b: Option<TensorRepr>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pad: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma: Option<TensorRepr>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<TensorRepr>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean: Option<TensorRepr>,
    #[serde(skip_serializing_if = "Option::is_none")]
    var: Option<TensorRepr>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelMeta {
    pub norm: String,
    pub epsilon: f64,
    pub seed: u64,
}

impl ModelMeta {
    pub fn new(norm: Norm, epsilon: f64, seed: u64) -> ModelMeta {
        let norm = match norm {
            Norm::Linf => "linf".to_string(),
            Norm::L2 => "l2".to_string(),
        };
        ModelMeta { norm, epsilon, seed }
    }
}

#[derive(Serialize, Deserialize)]
struct ModelRepr {
    format_version: u32,
    input_shape: Vec<usize>,
    output_dim: usize,
    metadata: ModelMeta,
    layers: Vec<LayerRepr>,
    #[serde(skip_serializing_if = "Option::is_none")]
    checksum: Option<String>,
}

fn fnv64(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn layer_repr(spec: &LayerSpec, blob: bool) -> LayerRepr {
    let mut r = LayerRepr {
        id: spec.id,
        kind: spec.kind.name().to_string(),
        inputs: spec.inputs.clone(),
        w: None,
        b: None,
        stride: None,
        pad: None,
        gamma: None,
        beta: None,
        mean: None,
        var: None,
        eps: None,
    };
    match &spec.kind {
        LayerKind::Linear { w, b } => {
            r.w = Some(TensorRepr::from(w, blob));
            r.b = Some(TensorRepr::from(b, blob));
        }
        LayerKind::Conv2d { w, b, stride, pad } => {
            r.w = Some(TensorRepr::from(w, blob));
            r.b = Some(TensorRepr::from(b, blob));
            r.stride = Some(*stride);
            r.pad = Some(*pad);
        }
        LayerKind::BatchNormFixed { gamma, beta, mean, var, eps } => {
            r.gamma = Some(TensorRepr::from(gamma, blob));
            r.beta = Some(TensorRepr::from(beta, blob));
            r.mean = Some(TensorRepr::from(mean, blob));
            r.var = Some(TensorRepr::from(var, blob));
            r.eps = Some(*eps);
        }
        LayerKind::Relu | LayerKind::Hardtanh | LayerKind::Add => {}
    }
    r
}

fn need<T>(field: Option<T>, kind: &str, name: &str) -> Result<T> {
    field.ok_or_else(|| Error::ModelFormat(format!("{kind} layer missing {name}")))
}

fn layer_spec(r: &LayerRepr) -> Result<LayerSpec> {
    let kind = match r.kind.as_str() {
        "linear" => LayerKind::Linear {
            w: need(r.w.as_ref(), "linear", "w")?.to_tensor()?,
            b: need(r.b.as_ref(), "linear", "b")?.to_tensor()?,
        },
        "conv2d" => LayerKind::Conv2d {
            w: need(r.w.as_ref(), "conv2d", "w")?.to_tensor()?,
            b: need(r.b.as_ref(), "conv2d", "b")?.to_tensor()?,
            stride: need(r.stride, "conv2d", "stride")?,
            pad: need(r.pad, "conv2d", "pad")?,
        },
        "batchnorm" => LayerKind::BatchNormFixed {
            gamma: need(r.gamma.as_ref(), "batchnorm", "gamma")?.to_tensor()?,
            beta: need(r.beta.as_ref(), "batchnorm", "beta")?.to_tensor()?,
            mean: need(r.mean.as_ref(), "batchnorm", "mean")?.to_tensor()?,
            var: need(r.var.as_ref(), "batchnorm", "var")?.to_tensor()?,
            eps: need(r.eps, "batchnorm", "eps")?,
        },
        "relu" => LayerKind::Relu,
        "hardtanh" => LayerKind::Hardtanh,
        "add" => LayerKind::Add,
        other => return Err(Error::ModelFormat(format!("unknown layer kind {other:?}"))),
    };
    Ok(LayerSpec { id: r.id, kind, inputs: r.inputs.clone() })
}

/// Write a versioned, checksummed model file. `blob` switches parameters to
/// base64 little-endian encoding.
pub fn save_model(net: &NetworkGraph, meta: &ModelMeta, path: &Path, blob: bool) -> Result<()> {
    let mut repr = ModelRepr {
        format_version: MODEL_FORMAT_VERSION,
        input_shape: net.input_shape.clone(),
        output_dim: net.output_dim,
        metadata: meta.clone(),
        layers: net.layers.iter().map(|l| layer_repr(l, blob)).collect(),
        checksum: None,
    };
    let body = serde_json::to_string(&repr)?;
    repr.checksum = Some(fnv64(body.as_bytes()));
    fs::write(path, serde_json::to_string_pretty(&repr)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(NetworkGraph, ModelMeta)> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("format_version").is_none() {
        return Err(Error::ModelFormat("unversioned file".into()));
    }
    let mut repr: ModelRepr = serde_json::from_str(&text)?;
    if repr.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::ModelFormat(format!(
            "format version {} unsupported, expected {}",
            repr.format_version, MODEL_FORMAT_VERSION
        )));
    }
    let claimed = repr
        .checksum
        .take()
        .ok_or_else(|| Error::ModelFormat("missing checksum".into()))?;
    let body = serde_json::to_string(&repr)?;
    let actual = fnv64(body.as_bytes());
    if claimed != actual {
        return Err(Error::ModelFormat(format!("checksum mismatch: file {claimed}, body {actual}")));
    }
    let layers = repr.layers.iter().map(layer_spec).collect::<Result<Vec<_>>>()?;
    let net = NetworkGraph::new(layers, repr.input_shape, repr.output_dim)?;
    Ok((net, repr.metadata))
}

// ---- certificates and metrics ---------------------------------------------

/// One line per record: example id, predicted label, certified flag, minimum
/// J at 9 significant digits, mode.
pub fn write_certificates(records: &[Certificate], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "example,predicted,certified,min_j,mode")?;
    for c in records {
        writeln!(f, "{},{},{},{:.8e},{}", c.example, c.predicted, c.certified, c.min_j(), c.mode)?;
    }
    Ok(())
}

pub fn write_metrics(metrics: &[EpochMetrics], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "{}", EpochMetrics::csv_header())?;
    for m in metrics {
        writeln!(f, "{}", m.csv_row())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certifier::CertMode;
    use crate::netgraph::{conv_net, mlp};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn write_idx_pair(dir: &Path, n: usize, rows: usize, cols: usize) -> (std::path::PathBuf, std::path::PathBuf) {
        let mut img = Vec::new();
        img.extend(IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend((n as u32).to_be_bytes());
        img.extend((rows as u32).to_be_bytes());
        img.extend((cols as u32).to_be_bytes());
        for i in 0..n * rows * cols {
            img.push((i % 256) as u8);
        }
        let mut lab = Vec::new();
        lab.extend(IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend((n as u32).to_be_bytes());
        for i in 0..n {
            lab.push((i % 10) as u8);
        }
        let ip = dir.join("imgs.idx");
        let lp = dir.join("labs.idx");
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), 5, 4, 3);
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.features(), 12);
        assert_eq!(ds.ys, vec![0, 1, 2, 3, 4]);
        assert!((ds.xs.data()[1] - 1.0 / 255.0).abs() < 1e-15);
        assert!(ds.xs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn idx_count_mismatch_names_both() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, _) = write_idx_pair(dir.path(), 5, 2, 2);
        let mut lab = Vec::new();
        lab.extend(IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend(3u32.to_be_bytes());
        lab.extend([0u8, 1, 2]);
        let lp = dir.path().join("short.idx");
        fs::write(&lp, lab).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err().to_string();
        assert!(err.contains('5') && err.contains('3'), "{err}");
    }

    #[test]
    fn idx_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), 2, 2, 2);
        let mut bytes = fs::read(&ip).unwrap();
        bytes[3] = 0x99;
        fs::write(&ip, bytes).unwrap();
        assert!(load_idx(&ip, &lp).is_err());
    }

    #[test]
    fn csv_basics() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        fs::write(&p, "1,0.5,0.25\n0,-1,2\n").unwrap();
        let ds = load_csv(&p, false).unwrap();
        assert_eq!(ds.ys, vec![1, 0]);
        assert_eq!(ds.xs.data(), &[0.5, 0.25, -1.0, 2.0]);

        fs::write(&p, "").unwrap();
        let ds = load_csv(&p, false).unwrap();
        assert!(ds.is_empty());

        fs::write(&p, "1,0.5,0.5\n0,1.0\n").unwrap();
        let err = load_csv(&p, false).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for blob in [false, true] {
            let net = mlp(&[6, 9, 4], 17).unwrap();
            let meta = ModelMeta::new(Norm::Linf, 0.1, 17);
            let p = dir.path().join(format!("m{blob}.json"));
            save_model(&net, &meta, &p, blob).unwrap();
            let (back, meta2) = load_model(&p).unwrap();
            assert_eq!(meta2.epsilon, 0.1);
            for _ in 0..20 {
                let x = Tensor::new(vec![1, 6], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
                let a = net.forward(&x).unwrap();
                let b = back.forward(&x).unwrap();
                assert_eq!(a.data(), b.data());
            }
        }
    }

    #[test]
    fn conv_model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = conv_net([1, 8, 8], [2, 4], 10, 3, 5).unwrap();
        let p = dir.path().join("conv.json");
        save_model(&net, &ModelMeta::new(Norm::L2, 0.05, 5), &p, true).unwrap();
        let (back, meta) = load_model(&p).unwrap();
        assert_eq!(meta.norm, "l2");
        let x = Tensor::new(vec![1, 64], (0..64).map(|i| i as f64 / 64.0).collect()).unwrap();
        assert_eq!(net.forward(&x).unwrap().data(), back.forward(&x).unwrap().data());
    }

    #[test]
    fn model_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let net = mlp(&[3, 4, 2], 1).unwrap();
        save_model(&net, &ModelMeta::new(Norm::Linf, 0.0, 1), &p, false).unwrap();

        // tamper with the body: the checksum must catch it
        let text = fs::read_to_string(&p).unwrap();
        let tampered = text.replace("\"output_dim\": 2", "\"output_dim\": 3");
        assert_ne!(text, tampered);
        fs::write(&p, &tampered).unwrap();
        let err = load_model(&p).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");

        // unversioned
        fs::write(&p, "{\"layers\": []}").unwrap();
        let err = load_model(&p).unwrap_err().to_string();
        assert!(err.contains("unversioned"), "{err}");

        // unknown kind
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["layers"][0]["kind"] = "mystery".into();
        let repr: ModelRepr = serde_json::from_value(v).unwrap();
        let mut repr = repr;
        repr.checksum = None;
        let body = serde_json::to_string(&repr).unwrap();
        repr.checksum = Some(fnv64(body.as_bytes()));
        fs::write(&p, serde_json::to_string(&repr).unwrap()).unwrap();
        let err = load_model(&p).unwrap_err().to_string();
        assert!(err.contains("mystery"), "{err}");
    }

    #[test]
    fn certificate_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        write_certificates(&[], &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap().lines().count(), 1);

        let rec = |ex: usize, j: f64| Certificate {
            example: ex,
            label: 1,
            predicted: 1,
            targets: vec![0],
            j: vec![j],
            certified: j > 1e-6,
            mode: CertMode::Exact,
            slack: 1e-6,
        };
        write_certificates(&[rec(0, 0.123456789123), rec(7, -0.25)], &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,1,true,1.23456789e-1,exact"), "{}", lines[1]);
        assert!(lines[2].starts_with("7,1,false,-2.50000000e-1,exact"), "{}", lines[2]);
    }
}
