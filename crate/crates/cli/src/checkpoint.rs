//! Checkpoint file format.
//!
//! Layout: magic `SPRB`, little-endian u32 format version, a
//! length-prefixed UTF-8 `key=value` header (training config, epoch,
//! generator state), then every parameter tensor in the stack's canonical
//! order, each as `u32 rank, u32 dims.., f32 data..`, and finally the
//! optimizer state per tensor (first moment, second moment, step count).
//! All multi-byte values are little-endian. Floats in the header use
//! Rust's shortest round-trip decimal form, so save/load is bit-exact.

use crate::error::{CliError, Result};
use crate::fsutil;
use socprob_core::convlstm::{ConvLstmCell, StackParams, CELL_TENSOR_NAMES};
use socprob_core::tensor::{AdamState, Tensor};
use socprob_core::training::{Checkpoint, RngState, TrainConfig, CHECKPOINT_VERSION};
use std::collections::BTreeMap;
use std::io::ErrorKind;
use std::path::Path;

const MAGIC: &[u8; 4] = b"SPRB";

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &encode(ckpt))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fsutil::read_bytes(path)?, path)
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&ckpt.version.to_le_bytes());

    let header = render_header(ckpt);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());

    for (_, tensor) in ckpt.params.tensors() {
        write_tensor(&mut out, tensor);
    }
    for state in &ckpt.adam {
        let (m, v) = state.moments();
        write_tensor(&mut out, m);
        write_tensor(&mut out, v);
        out.extend_from_slice(&state.step().to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
    let mut r = Reader {
        bytes,
        pos: 0,
        origin,
    };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(CliError::format(
            origin,
            format!("bad magic {magic:02x?}, not a checkpoint"),
        ));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CliError::Version {
            path: origin.to_path_buf(),
            got: version,
        });
    }
    let header_len = r.u32()? as usize;
    let header = core::str::from_utf8(r.take(header_len)?)
        .map_err(|e| CliError::format(origin, format!("header is not UTF-8: {e}")))?;
    let fields = parse_header(header, origin)?;
    let config = config_from(&fields, origin)?;
    config
        .validate()
        .map_err(|e| CliError::format(origin, format!("stored config is invalid: {e}")))?;
    let epoch = fields.parse("epoch", origin)?;
    let rng = RngState {
        seed: fields.seed_bytes(origin)?,
        word_pos: fields.parse("rng_word_pos", origin)?,
        stream: fields.parse("rng_stream", origin)?,
    };
    let dtype = fields.get("dtype", origin)?;
    if dtype != "f32" {
        return Err(CliError::format(origin, format!("unsupported dtype {dtype}")));
    }

    let layers = config.hidden_channels.len();
    let mut cells = Vec::with_capacity(layers);
    for _ in 0..layers {
        let mut fields: Vec<Tensor<f32>> = Vec::with_capacity(CELL_TENSOR_NAMES.len());
        for _ in CELL_TENSOR_NAMES {
            fields.push(r.tensor()?);
        }
        let mut it = fields.into_iter();
        let mut next = || it.next().unwrap();
        cells.push(ConvLstmCell {
            w_xi: next(),
            w_hi: next(),
            w_xf: next(),
            w_hf: next(),
            w_xc: next(),
            w_hc: next(),
            w_xo: next(),
            w_ho: next(),
            w_ci: next(),
            w_cf: next(),
            w_co: next(),
            b_i: next(),
            b_f: next(),
            b_c: next(),
            b_o: next(),
        });
    }
    let head_kernel = r.tensor()?;
    let head_bias = r.tensor()?;
    let params = StackParams::from_parts(cells, head_kernel, head_bias)?;

    let mut adam = Vec::with_capacity(params.tensor_count());
    for (label, tensor) in params.tensors() {
        let m = r.tensor()?;
        let v = r.tensor()?;
        if m.shape() != tensor.shape() || v.shape() != tensor.shape() {
            return Err(CliError::format(
                origin,
                format!("optimizer state shape mismatch for {label}"),
            ));
        }
        let step = r.u64()?;
        adam.push(AdamState::from_parts(m, v, step)?);
    }
    if r.pos != bytes.len() {
        return Err(CliError::format(
            origin,
            format!("{} trailing bytes after checkpoint", bytes.len() - r.pos),
        ));
    }
    Ok(Checkpoint {
        version,
        config,
        params,
        adam,
        epoch,
        rng,
    })
}

fn render_header(ckpt: &Checkpoint) -> String {
    let c = &ckpt.config;
    let channels: Vec<String> = c.hidden_channels.iter().map(|n| n.to_string()).collect();
    let seed_hex: String = ckpt.rng.seed.iter().map(|b| format!("{b:02x}")).collect();
    format!(
        "grid_width={}\ngrid_height={}\nsigma_target={}\nsigma_other={}\n\
         obs_len={}\npred_len={}\nlr={}\nbatch_size={}\nepochs={}\nseed={}\n\
         integrate_neighbors={}\nclip_norm={}\nhidden_channels={}\nkernel_size={}\n\
         epoch={}\nrng_seed={}\nrng_word_pos={}\nrng_stream={}\ndtype=f32\n",
        c.grid_width,
        c.grid_height,
        c.sigma_target,
        c.sigma_other,
        c.obs_len,
        c.pred_len,
        c.lr,
        c.batch_size,
        c.epochs,
        c.seed,
        c.integrate_neighbors,
        c.clip_norm,
        channels.join(","),
        c.kernel_size,
        ckpt.epoch,
        seed_hex,
        ckpt.rng.word_pos,
        ckpt.rng.stream,
    )
}

struct Header(BTreeMap<String, String>);

impl Header {
    fn get(&self, key: &str, origin: &Path) -> Result<&str> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CliError::format(origin, format!("header is missing {key}")))
    }

    fn parse<T: core::str::FromStr>(&self, key: &str, origin: &Path) -> Result<T> {
        let raw = self.get(key, origin)?;
        raw.parse().map_err(|_| {
            CliError::format(origin, format!("header field {key}={raw} did not parse"))
        })
    }

    fn seed_bytes(&self, origin: &Path) -> Result<[u8; 32]> {
        let hex = self.get("rng_seed", origin)?;
        let bad = || CliError::format(origin, format!("rng_seed {hex} is not 64 hex digits"));
        if hex.len() != 64 || !hex.is_ascii() {
            return Err(bad());
        }
        let mut out = [0u8; 32];
        for (i, chunk) in hex.as_bytes().chunks(2).enumerate() {
            let s = core::str::from_utf8(chunk).map_err(|_| bad())?;
            out[i] = u8::from_str_radix(s, 16).map_err(|_| bad())?;
        }
        Ok(out)
    }
}

fn parse_header(text: &str, origin: &Path) -> Result<Header> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::format(origin, format!("malformed header line {line:?}"))
        })?;
        map.insert(key.to_string(), value.to_string());
    }
    Ok(Header(map))
}

fn config_from(h: &Header, origin: &Path) -> Result<TrainConfig> {
    let channels_raw = h.get("hidden_channels", origin)?;
    let hidden_channels = channels_raw
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<core::result::Result<Vec<usize>, _>>()
        .map_err(|_| {
            CliError::format(origin, format!("hidden_channels {channels_raw} did not parse"))
        })?;
    Ok(TrainConfig {
        grid_width: h.parse("grid_width", origin)?,
        grid_height: h.parse("grid_height", origin)?,
        sigma_target: h.parse("sigma_target", origin)?,
        sigma_other: h.parse("sigma_other", origin)?,
        obs_len: h.parse("obs_len", origin)?,
        pred_len: h.parse("pred_len", origin)?,
        lr: h.parse("lr", origin)?,
        batch_size: h.parse("batch_size", origin)?,
        epochs: h.parse("epochs", origin)?,
        seed: h.parse("seed", origin)?,
        integrate_neighbors: h.parse("integrate_neighbors", origin)?,
        clip_norm: h.parse("clip_norm", origin)?,
        hidden_channels,
        kernel_size: h.parse("kernel_size", origin)?,
    })
}

fn write_tensor(out: &mut Vec<u8>, tensor: &Tensor<f32>) {
    out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let slice = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(slice)
            }
            None => Err(CliError::io(
                self.origin,
                std::io::Error::new(
                    ErrorKind::UnexpectedEof,
                    format!("checkpoint truncated at byte {}", self.pos),
                ),
            )),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(CliError::format(
                self.origin,
                format!("implausible tensor rank {rank}"),
            ));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        if len > (1 << 28) {
            return Err(CliError::format(
                self.origin,
                format!("implausible tensor shape {shape:?}"),
            ));
        }
        let raw = self.take(len * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::from_vec(&shape, data)?)
    }
}
