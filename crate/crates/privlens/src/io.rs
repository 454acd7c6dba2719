//! File formats: the portable float tensor container, the coefficient text
//! format, run configuration files, checkpoints, dataset manifests,
//! telemetry CSV, PSF previews, and provenance records.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::metrics::EvalReport;
use crate::models::{AdversaryA, ClassifierC};
use crate::optics::{OpticsConfig, PsfStack, CHANNELS};
use crate::sensor::{ImageTensor, SensorConfig, VideoTensor};
use crate::synthdata::{Action, ClipSpec, Dataset, LabeledClip, N_ATTRIBUTES};
use crate::tensor::Tensor;
use crate::trainer::{DecayMode, EpochTelemetry, TrainConfig};
use crate::zernike::ZernikeCoefficients;
use crate::{Error, Result};

// ---- portable float tensor container ------------------------------------

const TENSOR_MAGIC: &[u8; 4] = b"PLTF";
const TENSOR_VERSION: u16 = 1;

/// Serializes a tensor as magic, version (u16 LE), rank (u8), dims (u32 LE
/// each), then row-major f32 LE payload.
pub fn tensor_to_bytes(dims: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let n: usize = dims.iter().product();
    if n != data.len() {
        return Err(Error::shape("payload length does not match dims"));
    }
    if dims.len() > u8::MAX as usize {
        return Err(Error::invalid("rank too large"));
    }
    let mut out = Vec::with_capacity(4 + 2 + 1 + 4 * dims.len() + 4 * data.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(dims.len() as u8);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::invalid("dim exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    if bytes.len() < 7 || &bytes[0..4] != TENSOR_MAGIC {
        return Err(Error::Format("not a PLTF tensor file".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    let rank = bytes[6] as usize;
    let mut offset = 7;
    if bytes.len() < offset + 4 * rank {
        return Err(Error::Format("truncated dim table".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
            as usize);
        offset += 4;
    }
    let n: usize = dims.iter().product();
    if bytes.len() != offset + 4 * n {
        return Err(Error::Format(format!(
            "payload length {} does not match dims {:?}",
            bytes.len() - offset,
            dims
        )));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let at = offset + 4 * i;
        data.push(f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")));
    }
    Ok((dims, data))
}

pub fn write_tensor_file(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    let bytes = tensor_to_bytes(dims, data)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    tensor_from_bytes(&bytes)
}

pub fn write_tensor_f64(path: &Path, t: &Tensor) -> Result<()> {
    let data: Vec<f32> = t.data().iter().map(|&v| v as f32).collect();
    write_tensor_file(path, t.dims(), &data)
}

pub fn read_tensor_f64(path: &Path) -> Result<Tensor> {
    let (dims, data) = read_tensor_file(path)?;
    Tensor::from_vec(&dims, data.into_iter().map(|v| v as f64).collect())
}

/// Clips are stored as `[T, 3, H, W]` float32.
pub fn write_video(path: &Path, video: &VideoTensor) -> Result<()> {
    let (t, h, w) = (video.len(), video.height(), video.width());
    let mut data = Vec::with_capacity(t * CHANNELS * h * w);
    for frame in video.frames() {
        data.extend(frame.planes().iter().map(|&v| v as f32));
    }
    write_tensor_file(path, &[t, CHANNELS, h, w], &data)
}

pub fn read_video(path: &Path) -> Result<VideoTensor> {
    let (dims, data) = read_tensor_file(path)?;
    if dims.len() != 4 || dims[1] != CHANNELS {
        return Err(Error::Format(format!("expected [T,3,H,W] clip, got {dims:?}")));
    }
    let (t, h, w) = (dims[0], dims[2], dims[3]);
    let frame_len = CHANNELS * h * w;
    let frames = (0..t)
        .map(|i| {
            let planes = data[i * frame_len..(i + 1) * frame_len]
                .iter()
                .map(|&v| v as f64)
                .collect();
            ImageTensor::from_raw_clamped(h, w, planes)
        })
        .collect::<Result<Vec<_>>>()?;
    VideoTensor::new(frames, 12.0)
}

/// PSF stacks are stored as `[3, s, s]` float32.
pub fn write_psf_stack(path: &Path, psf: &PsfStack) -> Result<()> {
    let s = psf.size();
    let mut data = Vec::with_capacity(CHANNELS * s * s);
    for ch in 0..CHANNELS {
        data.extend(psf.kernel(ch).data().iter().map(|&v| v as f32));
    }
    write_tensor_file(path, &[CHANNELS, s, s], &data)
}

pub fn read_psf_stack(path: &Path) -> Result<PsfStack> {
    let (dims, data) = read_tensor_file(path)?;
    if dims.len() != 3 || dims[0] != CHANNELS || dims[1] != dims[2] {
        return Err(Error::Format(format!("expected [3,s,s] psf, got {dims:?}")));
    }
    let s = dims[1];
    let kernels = (0..CHANNELS)
        .map(|ch| {
            let mut k: Vec<f64> = data[ch * s * s..(ch + 1) * s * s]
                .iter()
                .map(|&v| v as f64)
                .collect();
            // renormalize the float32 rounding so the unit-sum invariant holds
            let sum: f64 = k.iter().sum();
            if sum > 0.0 {
                for v in &mut k {
                    *v /= sum;
                }
            }
            Tensor::from_vec(&[s, s], k)
        })
        .collect::<Result<Vec<_>>>()?;
    PsfStack::new(kernels)
}

// ---- coefficient text format ---------------------------------------------

/// `q=<n>` header then `j,alpha` lines, alpha printed with 9 significant
/// digits; parsing and re-printing such text is the identity.
pub fn coefficients_to_string(alpha: &ZernikeCoefficients) -> String {
    let mut out = format!("q={}\n", alpha.q());
    for (i, a) in alpha.alpha().iter().enumerate() {
        out.push_str(&format!("{},{:.8e}\n", i + 1, a));
    }
    out
}

pub fn coefficients_from_str(text: &str) -> Result<ZernikeCoefficients> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        message: "empty coefficient file".into(),
    })?;
    let q: usize = header
        .strip_prefix("q=")
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("expected `q=<int>` header, got `{header}`"),
        })?
        .trim()
        .parse()
        .map_err(|e| Error::Parse {
            line: 1,
            message: format!("bad q: {e}"),
        })?;
    let mut alpha = vec![0.0; q];
    let mut seen = vec![false; q];
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (j_str, a_str) = line.split_once(',').ok_or_else(|| Error::Parse {
            line: line_no,
            message: format!("expected `j,alpha`, got `{line}`"),
        })?;
        let j: usize = j_str.trim().parse().map_err(|e| Error::Parse {
            line: line_no,
            message: format!("bad index: {e}"),
        })?;
        if j == 0 || j > q {
            return Err(Error::Parse {
                line: line_no,
                message: format!("index {j} outside 1..={q}"),
            });
        }
        let a: f64 = a_str.trim().parse().map_err(|e| Error::Parse {
            line: line_no,
            message: format!("bad coefficient: {e}"),
        })?;
        if seen[j - 1] {
            return Err(Error::Parse {
                line: line_no,
                message: format!("duplicate index {j}"),
            });
        }
        seen[j - 1] = true;
        alpha[j - 1] = a;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::Parse {
            line: 0,
            message: format!("missing coefficient for j={}", missing + 1),
        });
    }
    ZernikeCoefficients::new(alpha)
}

pub fn write_coefficients(path: &Path, alpha: &ZernikeCoefficients) -> Result<()> {
    fs::write(path, coefficients_to_string(alpha))?;
    Ok(())
}

pub fn read_coefficients(path: &Path) -> Result<ZernikeCoefficients> {
    coefficients_from_str(&fs::read_to_string(path)?)
}

// ---- run configuration text format ----------------------------------------

/// Versioned `key = value` text; `#` starts a comment.
pub fn parse_kv_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: line_no,
            message: format!("expected `key = value`, got `{raw}`"),
        })?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty key".into(),
            });
        }
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("duplicate key `{key}`"),
            });
        }
    }
    Ok(map)
}

/// Dataset sizing carried by the run config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataParams {
    pub n_train: usize,
    pub n_test: usize,
}

fn get_parsed<T: std::str::FromStr>(
    map: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    match map.get(key) {
        None => Ok(default),
        Some(raw) => raw.parse().map_err(|e| Error::Parse {
            line: 0,
            message: format!("key `{key}`: {e}"),
        }),
    }
}

/// Parses a run config file into training + dataset parameters. Unknown keys
/// are rejected; absent keys take the desk-scale defaults.
pub fn train_config_from_str(text: &str) -> Result<(TrainConfig, DataParams)> {
    let map = parse_kv_config(text)?;
    let version: u32 = get_parsed(&map, "version", 0)?;
    if version != 1 {
        return Err(Error::Parse {
            line: 0,
            message: format!("config version must be 1, got {version}"),
        });
    }
    const KNOWN: &[&str] = &[
        "version",
        "seed",
        "data.n_train",
        "data.n_test",
        "zernike.q",
        "optics.n_samples",
        "optics.psf_size",
        "optics.wavelengths_nm",
        "optics.object_distance_m",
        "optics.propagation_distance_m",
        "optics.aperture_diameter_m",
        "optics.sensor_pitch_um",
        "sensor.noise_sigma",
        "sensor.gain",
        "sensor.offset",
        "train.beta_o",
        "train.beta_c",
        "train.beta_a",
        "train.gamma1",
        "train.gamma2",
        "train.epochs",
        "train.batch",
        "train.decay_epoch",
        "train.decay_factor",
        "train.decay_mode",
        "train.use_tsm",
        "train.adversarial",
        "train.model_width",
        "pretrain.lr",
        "pretrain.epochs",
        "pretrain.ssim_floor",
        "pretrain.alpha_init_std",
        "attack.k",
        "attack.epochs",
        "attack.lr",
    ];
    for key in map.keys() {
        if !KNOWN.contains(&key.as_str()) {
            return Err(Error::Parse {
                line: 0,
                message: format!("unknown key `{key}`"),
            });
        }
    }

    let seed: u64 = get_parsed(&map, "seed", 7)?;
    let mut cfg = TrainConfig::desk_default(seed);
    cfg.q = get_parsed(&map, "zernike.q", cfg.q)?;
    cfg.optics_n_samples = get_parsed(&map, "optics.n_samples", cfg.optics_n_samples)?;
    cfg.optics.psf_size = get_parsed(&map, "optics.psf_size", cfg.optics.psf_size)?;
    if let Some(raw) = map.get("optics.wavelengths_nm") {
        let parts: Vec<&str> = raw.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Parse {
                line: 0,
                message: "optics.wavelengths_nm needs three comma-separated values".into(),
            });
        }
        for (i, p) in parts.iter().enumerate() {
            let nm: f64 = p.trim().parse().map_err(|e| Error::Parse {
                line: 0,
                message: format!("bad wavelength: {e}"),
            })?;
            cfg.optics.wavelengths[i] = nm * 1e-9;
        }
    }
    cfg.optics.object_distance =
        get_parsed(&map, "optics.object_distance_m", cfg.optics.object_distance)?;
    cfg.optics.propagation_distance = get_parsed(
        &map,
        "optics.propagation_distance_m",
        cfg.optics.propagation_distance,
    )?;
    cfg.optics.aperture_diameter = get_parsed(
        &map,
        "optics.aperture_diameter_m",
        cfg.optics.aperture_diameter,
    )?;
    cfg.optics.sensor_pitch =
        get_parsed(&map, "optics.sensor_pitch_um", cfg.optics.sensor_pitch * 1e6)? * 1e-6;
    cfg.sensor.noise_sigma = get_parsed(&map, "sensor.noise_sigma", cfg.sensor.noise_sigma)?;
    cfg.sensor.response_gain = get_parsed(&map, "sensor.gain", cfg.sensor.response_gain)?;
    cfg.sensor.response_offset = get_parsed(&map, "sensor.offset", cfg.sensor.response_offset)?;
    cfg.beta_o = get_parsed(&map, "train.beta_o", cfg.beta_o)?;
    cfg.beta_c = get_parsed(&map, "train.beta_c", cfg.beta_c)?;
    cfg.beta_a = get_parsed(&map, "train.beta_a", cfg.beta_a)?;
    cfg.gamma1 = get_parsed(&map, "train.gamma1", cfg.gamma1)?;
    cfg.gamma2 = get_parsed(&map, "train.gamma2", cfg.gamma2)?;
    cfg.epochs = get_parsed(&map, "train.epochs", cfg.epochs)?;
    cfg.batch = get_parsed(&map, "train.batch", cfg.batch)?;
    cfg.decay_epoch = get_parsed(&map, "train.decay_epoch", cfg.decay_epoch)?;
    cfg.decay_factor = get_parsed(&map, "train.decay_factor", cfg.decay_factor)?;
    if let Some(raw) = map.get("train.decay_mode") {
        cfg.decay_mode = match raw.as_str() {
            "per_epoch" => DecayMode::PerEpoch,
            "one_shot" => DecayMode::OneShot,
            other => {
                return Err(Error::Parse {
                    line: 0,
                    message: format!("decay_mode must be per_epoch or one_shot, got `{other}`"),
                })
            }
        };
    }
    cfg.use_tsm = get_parsed(&map, "train.use_tsm", cfg.use_tsm)?;
    cfg.adversarial = get_parsed(&map, "train.adversarial", cfg.adversarial)?;
    cfg.model_width = get_parsed(&map, "train.model_width", cfg.model_width)?;
    cfg.pretrain_lr_model = get_parsed(&map, "pretrain.lr", cfg.pretrain_lr_model)?;
    cfg.pretrain_epochs = get_parsed(&map, "pretrain.epochs", cfg.pretrain_epochs)?;
    cfg.pretrain_ssim_floor =
        get_parsed(&map, "pretrain.ssim_floor", cfg.pretrain_ssim_floor)?;
    cfg.alpha_init_std = get_parsed(&map, "pretrain.alpha_init_std", cfg.alpha_init_std)?;
    cfg.attack_adversaries = get_parsed(&map, "attack.k", cfg.attack_adversaries)?;
    cfg.attack_epochs = get_parsed(&map, "attack.epochs", cfg.attack_epochs)?;
    cfg.attack_lr = get_parsed(&map, "attack.lr", cfg.attack_lr)?;
    cfg.validate()?;

    let data = DataParams {
        n_train: get_parsed(&map, "data.n_train", 512)?,
        n_test: get_parsed(&map, "data.n_test", 128)?,
    };
    Ok((cfg, data))
}

/// The shipped default run configuration.
pub fn default_config_text() -> String {
    let cfg = TrainConfig::desk_default(7);
    format!(
        "# privlens run configuration\n\
         version = 1\n\
         seed = 7\n\
         data.n_train = 512\n\
         data.n_test = 128\n\
         zernike.q = {}\n\
         optics.n_samples = {}\n\
         optics.psf_size = {}\n\
         optics.wavelengths_nm = 640,550,460\n\
         optics.object_distance_m = {}\n\
         optics.propagation_distance_m = {}\n\
         optics.aperture_diameter_m = {}\n\
         optics.sensor_pitch_um = 5\n\
         sensor.noise_sigma = {}\n\
         sensor.gain = 1.0\n\
         sensor.offset = 0.0\n\
         train.beta_o = 3e-3\n\
         train.beta_c = 1e-4\n\
         train.beta_a = 1e-4\n\
         train.gamma1 = 0.7\n\
         train.gamma2 = 0.3\n\
         train.epochs = 50\n\
         train.batch = 8\n\
         train.decay_epoch = 25\n\
         train.decay_factor = 0.1\n\
         train.decay_mode = per_epoch\n\
         train.use_tsm = true\n\
         train.adversarial = true\n\
         train.model_width = {}\n\
         attack.k = {}\n\
         attack.epochs = {}\n",
        cfg.q,
        cfg.optics_n_samples,
        cfg.optics.psf_size,
        cfg.optics.object_distance,
        cfg.optics.propagation_distance,
        cfg.optics.aperture_diameter,
        cfg.sensor.noise_sigma,
        cfg.model_width,
        cfg.attack_adversaries,
        cfg.attack_epochs,
    )
}

// ---- provenance ------------------------------------------------------------

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// Reproducibility record emitted next to every output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub git: String,
    pub command: String,
    pub seed: Option<u64>,
    /// Input name -> sha256 of its bytes.
    pub inputs: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(command: &str, seed: Option<u64>) -> Self {
        Provenance {
            tool: "privlens".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            git: git_describe(),
            command: command.into(),
            seed,
            inputs: BTreeMap::new(),
        }
    }

    pub fn with_input(mut self, name: &str, bytes: &[u8]) -> Self {
        self.inputs.insert(name.into(), sha256_hex(bytes));
        self
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("provenance serialization: {e}")))?;
        fs::write(path, json)?;
        Ok(())
    }
}

// ---- PSF preview -----------------------------------------------------------

/// 8-bit grayscale PNG with per-kernel max normalization.
pub fn write_kernel_png(path: &Path, kernel: &Tensor) -> Result<()> {
    let dims = kernel.dims();
    let (h, w) = (dims[0] as u32, dims[1] as u32);
    let peak = kernel.max_abs().max(f64::MIN_POSITIVE);
    let img = image::GrayImage::from_fn(w, h, |x, y| {
        let v = kernel.at2(y as usize, x as usize) / peak;
        image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path)
        .map_err(|e| Error::Format(format!("png write failed: {e}")))?;
    Ok(())
}

// ---- checkpoints -----------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    dims: Vec<usize>,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    layers: Vec<LayerEntry>,
}

fn save_layers(dir: &Path, names: &[&str], tensors: &[&Tensor]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut layers = Vec::with_capacity(names.len());
    for (name, tensor) in names.iter().zip(tensors) {
        let file = format!("{name}.pltf");
        write_tensor_f64(&dir.join(&file), tensor)?;
        layers.push(LayerEntry {
            name: (*name).into(),
            dims: tensor.dims().to_vec(),
            file,
        });
    }
    let manifest = CheckpointManifest { version: 1, layers };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

fn load_layers(dir: &Path, expected: &[&str]) -> Result<Vec<Tensor>> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)
            .map_err(|e| Error::Format(format!("manifest parse: {e}")))?;
    if manifest.version != 1 {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    expected
        .iter()
        .map(|name| {
            let entry = manifest
                .layers
                .iter()
                .find(|l| l.name == *name)
                .ok_or_else(|| Error::Format(format!("missing layer `{name}`")))?;
            let tensor = read_tensor_f64(&dir.join(&entry.file))?;
            if tensor.dims() != entry.dims.as_slice() {
                return Err(Error::Format(format!(
                    "layer `{name}` dims {:?} disagree with manifest {:?}",
                    tensor.dims(),
                    entry.dims
                )));
            }
            Ok(tensor)
        })
        .collect()
}

pub fn save_classifier(dir: &Path, c: &ClassifierC) -> Result<()> {
    save_layers(dir, &ClassifierC::layer_names(), &c.tensors())
}

pub fn load_classifier(dir: &Path) -> Result<ClassifierC> {
    ClassifierC::from_tensors(load_layers(dir, &ClassifierC::layer_names())?)
}

pub fn save_adversary(dir: &Path, a: &AdversaryA) -> Result<()> {
    save_layers(dir, &AdversaryA::layer_names(), &a.tensors())
}

pub fn load_adversary(dir: &Path) -> Result<AdversaryA> {
    AdversaryA::from_tensors(load_layers(dir, &AdversaryA::layer_names())?)
}

// ---- telemetry -------------------------------------------------------------

pub fn telemetry_csv(rows: &[EpochTelemetry]) -> String {
    let mut out = String::from("epoch,L_O,L_C,L_A,ssim,A_C,A_A,P\n");
    for r in rows {
        let p = r.p.map(|v| format!("{v:.6}")).unwrap_or_else(|| "nan".into());
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            r.epoch, r.l_o, r.l_c, r.l_a, r.ssim, r.a_c, r.a_a, p
        ));
    }
    out
}

// ---- dataset manifest --------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    id: u64,
    seed: u64,
    action: Action,
    attributes: [bool; N_ATTRIBUTES],
    file: String,
    split: String,
    frames: usize,
    size: usize,
}

/// Writes clips in the tensor format plus a JSON-lines manifest.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (clips, split) in [(&dataset.train, "train"), (&dataset.test, "test")] {
        for clip in clips.iter() {
            let file = format!("clip_{:06}.pltf", clip.id);
            write_video(&dir.join(&file), &clip.video)?;
            let record = ManifestRecord {
                id: clip.id,
                seed: clip.spec.seed,
                action: clip.spec.action,
                attributes: clip.spec.attributes,
                file,
                split: split.into(),
                frames: clip.spec.frames,
                size: clip.spec.size,
            };
            manifest.push_str(
                &serde_json::to_string(&record)
                    .map_err(|e| Error::Format(format!("manifest record: {e}")))?,
            );
            manifest.push('\n');
        }
    }
    fs::write(dir.join("manifest.jsonl"), manifest)?;
    Ok(())
}

/// Reads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = fs::read_to_string(dir.join("manifest.jsonl"))?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (idx, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: format!("manifest record: {e}"),
        })?;
        let video = read_video(&dir.join(&record.file))?;
        let mut spec = ClipSpec::new(record.action, record.attributes, record.seed);
        spec.frames = record.frames;
        spec.size = record.size;
        let clip = LabeledClip {
            id: record.id,
            spec,
            video,
        };
        match record.split.as_str() {
            "train" => train.push(clip),
            "test" => test.push(clip),
            other => {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!("unknown split `{other}`"),
                })
            }
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Format("dataset needs both train and test clips".into()));
    }
    Ok(Dataset {
        train,
        test,
        master_seed: 0,
    })
}

/// Writes the evaluation report as both flat key-value text and JSON.
pub fn write_eval_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.txt"), report.to_kv_text())?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Format(format!("report serialization: {e}")))?;
    fs::write(dir.join("report.json"), json)?;
    Ok(())
}

/// Convenience: full optics description for rendering commands.
#[derive(Debug, Clone)]
pub struct RenderSetup {
    pub n_samples: usize,
    pub optics: OpticsConfig,
    pub sensor: SensorConfig,
    pub q: usize,
}

impl RenderSetup {
    pub fn from_train_config(cfg: &TrainConfig) -> Self {
        RenderSetup {
            n_samples: cfg.optics_n_samples,
            optics: cfg.optics.clone(),
            sensor: cfg.sensor.clone(),
            q: cfg.q,
        }
    }
}

pub fn path_buf(path: &str) -> PathBuf {
    PathBuf::from(path)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
