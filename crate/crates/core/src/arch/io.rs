//! Model persistence: little-endian binary, bit-exact round trip.
//!
//! Layout: magic "SEGD", format version u32, variant id u32, depth u32,
//! channels u32, kernel u32, K u32; then per-tensor records
//! {name_len u32, name, dtype u8, rank u8, dims u32 x rank, raw data};
//! trailing CRC32 over everything before it. Besides the parameters and
//! batch-norm running statistics, three `meta.*` records (stored as f64)
//! carry the stage schedule, the norm hyperparameters and the input
//! preprocessing.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Float};
use crate::tensor::Tensor;

use super::{build_variant_stages, ModelSpec, Preproc, StageSpec, VariantKind};

const MAGIC: &[u8; 4] = b"SEGD";
const VERSION: u32 = 1;

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_record_header(buf: &mut Vec<u8>, name: &str, dtype: Dtype, dims: &[u32]) {
    push_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    buf.push(dtype.code());
    buf.push(dims.len() as u8);
    for &d in dims {
        push_u32(buf, d);
    }
}

fn push_tensor_record<T: Float>(buf: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    let s = t.shape();
    push_record_header(buf, name, T::DTYPE, &[s.n as u32, s.c as u32, s.h as u32, s.w as u32]);
    for &v in t.data() {
        v.write_le(buf);
    }
}

fn push_vec_record<T: Float>(buf: &mut Vec<u8>, name: &str, data: &[T]) {
    push_record_header(buf, name, T::DTYPE, &[data.len() as u32]);
    for &v in data {
        v.write_le(buf);
    }
}

fn push_meta_record(buf: &mut Vec<u8>, name: &str, values: &[f64]) {
    push_record_header(buf, name, Dtype::F64, &[values.len() as u32]);
    for &v in values {
        v.write_le(buf);
    }
}

impl<T: Float> ModelSpec<T> {
    fn named_running_stats(&self) -> Vec<(String, &Vec<T>)> {
        let mut out = Vec::new();
        for (i, enc) in self.encoders.iter().enumerate() {
            for (j, layer) in enc.layers.iter().enumerate() {
                out.push((format!("enc{i}.{j}.bn.running_mean"), &layer.bn.running_mean));
                out.push((format!("enc{i}.{j}.bn.running_var"), &layer.bn.running_var));
            }
        }
        for (i, dec) in self.decoders.iter().enumerate() {
            if let super::DecoderStage::SegNet { layers, .. } = dec {
                for (j, layer) in layers.iter().enumerate() {
                    out.push((format!("dec{i}.{j}.bn.running_mean"), &layer.bn.running_mean));
                    out.push((format!("dec{i}.{j}.bn.running_var"), &layer.bn.running_var));
                }
            }
        }
        out
    }

    fn named_running_stats_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out: Vec<(String, &mut Vec<T>)> = Vec::new();
        for (i, enc) in self.encoders.iter_mut().enumerate() {
            for (j, layer) in enc.layers.iter_mut().enumerate() {
                out.push((format!("enc{i}.{j}.bn.running_mean"), &mut layer.bn.running_mean));
                out.push((format!("enc{i}.{j}.bn.running_var"), &mut layer.bn.running_var));
            }
        }
        for (i, dec) in self.decoders.iter_mut().enumerate() {
            if let super::DecoderStage::SegNet { layers, .. } = dec {
                for (j, layer) in layers.iter_mut().enumerate() {
                    out.push((format!("dec{i}.{j}.bn.running_mean"), &mut layer.bn.running_mean));
                    out.push((format!("dec{i}.{j}.bn.running_var"), &mut layer.bn.running_var));
                }
            }
        }
        out
    }
}

/// Serialize the model. The write is atomic: a sibling temp file is renamed
/// into place, so an interrupted save never leaves a corrupt model.
pub fn save_model<T: Float>(spec: &ModelSpec<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, VERSION);
    push_u32(&mut buf, spec.kind().id());
    push_u32(&mut buf, spec.depth() as u32);
    push_u32(&mut buf, spec.first_stage_channels() as u32);
    push_u32(&mut buf, spec.kernel() as u32);
    push_u32(&mut buf, spec.num_classes() as u32);

    for (name, t) in spec.named_parameters() {
        push_tensor_record(&mut buf, &name, t);
    }
    for (name, v) in spec.named_running_stats() {
        push_vec_record(&mut buf, &name, v);
    }
    let stages: Vec<f64> = spec
        .stages()
        .iter()
        .flat_map(|s| [s.channels as f64, s.convs as f64])
        .collect();
    push_meta_record(&mut buf, "meta.stages", &stages);
    push_meta_record(&mut buf, "meta.norm", &[spec.bn_epsilon, spec.bn_momentum]);
    push_meta_record(
        &mut buf,
        "meta.preproc",
        &[
            if spec.preproc.lcn { 1.0 } else { 0.0 },
            spec.preproc.lcn_window as f64,
            spec.preproc.lcn_sigma,
        ],
    );

    let crc = crc32fast::hash(&buf);
    push_u32(&mut buf, crc);

    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated {
                path: self.path.to_string(),
                needed: self.pos + n - self.buf.len(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

struct Record {
    dtype: u8,
    dims: Vec<u32>,
    payload: Vec<u8>,
}

impl Record {
    fn numel(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }

    fn as_floats<T: Float>(&self, path: &str, name: &str) -> Result<Vec<T>> {
        let dtype = Dtype::from_code(self.dtype).ok_or_else(|| Error::BadRecord {
            path: path.to_string(),
            name: name.to_string(),
            msg: format!("unknown dtype code {}", self.dtype),
        })?;
        if dtype != T::DTYPE {
            return Err(Error::DtypeMismatch {
                path: path.to_string(),
                name: name.to_string(),
                found: dtype.to_string(),
                expected: T::DTYPE.to_string(),
            });
        }
        let sz = dtype.size_bytes();
        Ok(self.payload.chunks_exact(sz).map(T::read_le).collect())
    }

    fn as_f64s(&self, path: &str, name: &str) -> Result<Vec<f64>> {
        if Dtype::from_code(self.dtype) != Some(Dtype::F64) {
            return Err(Error::BadRecord {
                path: path.to_string(),
                name: name.to_string(),
                msg: "meta records must be f64".to_string(),
            });
        }
        Ok(self.payload.chunks_exact(8).map(f64::read_le).collect())
    }
}

/// Load a model saved by [`save_model`]. The element type must match the
/// file's dtype.
pub fn load_model<T: Float>(path: impl AsRef<Path>) -> Result<ModelSpec<T>> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let buf = std::fs::read(path).map_err(|e| Error::io(&*path_str, e))?;

    if buf.len() < 4 {
        return Err(Error::Truncated { path: path_str, needed: 4 - buf.len() });
    }
    if &buf[..4] != MAGIC {
        return Err(Error::BadMagic { path: path_str });
    }
    if buf.len() < 8 + 4 {
        return Err(Error::Truncated { path: path_str, needed: 12 - buf.len() });
    }
    let body = &buf[..buf.len() - 4];
    let stored = u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch { path: path_str, stored, computed });
    }

    let mut cur = Cursor { buf: body, pos: 4, path: &path_str };
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch { path: path_str, found: version, expected: VERSION });
    }
    let variant_id = cur.u32()?;
    let depth = cur.u32()? as usize;
    let channels = cur.u32()? as usize;
    let kernel = cur.u32()? as usize;
    let num_classes = cur.u32()? as usize;
    let kind = VariantKind::from_id(variant_id).ok_or_else(|| Error::BadRecord {
        path: path_str.clone(),
        name: "header".to_string(),
        msg: format!("unknown variant id {variant_id}"),
    })?;

    let mut records: HashMap<String, Record> = HashMap::new();
    while cur.remaining() > 0 {
        let name_len = cur.u32()? as usize;
        if name_len > 4096 {
            return Err(Error::BadRecord {
                path: path_str.clone(),
                name: String::new(),
                msg: format!("implausible name length {name_len}"),
            });
        }
        let name = String::from_utf8(cur.take(name_len)?.to_vec()).map_err(|_| {
            Error::BadRecord {
                path: path_str.clone(),
                name: String::new(),
                msg: "record name is not UTF-8".to_string(),
            }
        })?;
        let dtype = cur.u8()?;
        let rank = cur.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32()?);
        }
        let dtype_size = Dtype::from_code(dtype)
            .ok_or_else(|| Error::BadRecord {
                path: path_str.clone(),
                name: name.clone(),
                msg: format!("unknown dtype code {dtype}"),
            })?
            .size_bytes();
        let count: usize = dims.iter().map(|&d| d as usize).product();
        let payload = cur.take(count * dtype_size)?.to_vec();
        records.insert(name, Record { dtype, dims, payload });
    }

    let stages_raw = records
        .remove("meta.stages")
        .ok_or_else(|| missing(&path_str, "meta.stages"))?
        .as_f64s(&path_str, "meta.stages")?;
    let stages: Vec<StageSpec> = stages_raw
        .chunks_exact(2)
        .map(|p| StageSpec { channels: p[0] as usize, convs: p[1] as usize })
        .collect();
    if stages.len() != depth || stages.first().map(|s| s.channels) != Some(channels) {
        return Err(Error::BadRecord {
            path: path_str.clone(),
            name: "meta.stages".to_string(),
            msg: "stage schedule disagrees with the header".to_string(),
        });
    }
    let norm = records
        .remove("meta.norm")
        .ok_or_else(|| missing(&path_str, "meta.norm"))?
        .as_f64s(&path_str, "meta.norm")?;
    let preproc_raw = records
        .remove("meta.preproc")
        .ok_or_else(|| missing(&path_str, "meta.preproc"))?
        .as_f64s(&path_str, "meta.preproc")?;
    if norm.len() != 2 || preproc_raw.len() != 3 {
        return Err(Error::BadRecord {
            path: path_str.clone(),
            name: "meta".to_string(),
            msg: "unexpected meta record length".to_string(),
        });
    }

    let mut spec = build_variant_stages::<T>(kind, num_classes, &stages, kernel, 0)?;
    spec.bn_epsilon = norm[0];
    spec.bn_momentum = norm[1];
    spec.preproc = Preproc {
        lcn: preproc_raw[0] != 0.0,
        lcn_window: preproc_raw[1] as usize,
        lcn_sigma: preproc_raw[2],
    };

    for (name, tensor) in spec.named_parameters_mut() {
        let rec = records.remove(&name).ok_or_else(|| missing(&path_str, &name))?;
        let shape = tensor.shape();
        if rec.dims.len() != 4
            || rec.dims
                != vec![shape.n as u32, shape.c as u32, shape.h as u32, shape.w as u32]
        {
            return Err(Error::BadRecord {
                path: path_str.clone(),
                name,
                msg: format!("shape {:?} does not match the built {shape}", rec.dims),
            });
        }
        let data = rec.as_floats::<T>(&path_str, &name)?;
        *tensor = Tensor::from_vec(data, shape)?.requires_grad(true);
    }
    for (name, buf_ref) in spec.named_running_stats_mut() {
        let rec = records.remove(&name).ok_or_else(|| missing(&path_str, &name))?;
        if rec.numel() != buf_ref.len() {
            return Err(Error::BadRecord {
                path: path_str.clone(),
                name,
                msg: "running-stat length mismatch".to_string(),
            });
        }
        *buf_ref = rec.as_floats::<T>(&path_str, &name)?;
    }
    if let Some(name) = records.keys().next() {
        return Err(Error::BadRecord {
            path: path_str.clone(),
            name: name.clone(),
            msg: "unexpected record".to_string(),
        });
    }
    Ok(spec)
}

fn missing(path: &str, name: &str) -> Error {
    Error::BadRecord {
        path: path.to_string(),
        name: name.to_string(),
        msg: "missing record".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::super::{build_variant, forward_eval};
    use super::*;
    use crate::tensor::Shape;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tmpdir();
        let path = dir.path().join("m.segd");
        for kind in VariantKind::ALL {
            let spec = build_variant::<f32>(kind, 6, 3, 8, 5, 42).unwrap();
            save_model(&spec, &path).unwrap();
            let loaded = load_model::<f32>(&path).unwrap();
            assert_eq!(loaded.kind(), kind);
            assert_eq!(loaded.count_params(), spec.count_params());
            for ((na, ta), (nb, tb)) in
                spec.named_parameters().iter().zip(loaded.named_parameters().iter())
            {
                assert_eq!(na, nb);
                assert_eq!(ta.data(), tb.data(), "{na}");
            }
            let x = Tensor::<f32>::full(Shape::new(1, 3, 16, 16), 0.3);
            let a = forward_eval(&spec, &x).unwrap();
            let b = forward_eval(&loaded, &x).unwrap();
            assert_eq!(a.logits.data(), b.logits.data(), "{}", kind.name());
        }
    }

    #[test]
    fn save_is_deterministic() {
        let dir = tmpdir();
        let p1 = dir.path().join("a.segd");
        let p2 = dir.path().join("b.segd");
        let spec = build_variant::<f32>(VariantKind::FcnBasic, 6, 2, 8, 3, 7).unwrap();
        save_model(&spec, &p1).unwrap();
        save_model(&spec, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let dir = tmpdir();
        let path = dir.path().join("m.segd");
        let spec = build_variant::<f32>(VariantKind::SegNetBasic, 4, 2, 4, 3, 1).unwrap();
        save_model(&spec, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        match load_model::<f32>(&path) {
            Err(Error::BadMagic { .. }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn flipped_payload_byte_fails_the_checksum() {
        let dir = tmpdir();
        let path = dir.path().join("m.segd");
        let spec = build_variant::<f32>(VariantKind::SegNetBasic, 4, 2, 4, 3, 1).unwrap();
        save_model(&spec, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        match load_model::<f32>(&path) {
            Err(Error::ChecksumMismatch { .. }) => {}
            other => panic!("expected ChecksumMismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tmpdir();
        let path = dir.path().join("m.segd");
        let spec = build_variant::<f32>(VariantKind::SegNetBasic, 4, 2, 4, 3, 1).unwrap();
        save_model(&spec, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        // truncation lands either as a short-read or a checksum failure
        // depending on where the cut falls; both reject the file
        match load_model::<f32>(&path) {
            Err(Error::Truncated { .. }) | Err(Error::ChecksumMismatch { .. }) => {}
            other => panic!("expected Truncated/ChecksumMismatch, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tmpdir();
        let path = dir.path().join("m.segd");
        let spec = build_variant::<f32>(VariantKind::SegNetBasic, 4, 2, 4, 3, 1).unwrap();
        save_model(&spec, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9; // version field
        let body_len = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match load_model::<f32>(&path) {
            Err(Error::VersionMismatch { found: 9, .. }) => {}
            other => panic!("expected VersionMismatch, got {other:?}"),
        }
    }

    #[test]
    fn dtype_mismatch_is_distinct() {
        let dir = tmpdir();
        let path = dir.path().join("m.segd");
        let spec = build_variant::<f64>(VariantKind::SegNetBasic, 4, 2, 4, 3, 1).unwrap();
        save_model(&spec, &path).unwrap();
        match load_model::<f32>(&path) {
            Err(Error::DtypeMismatch { .. }) => {}
            other => panic!("expected DtypeMismatch, got {other:?}"),
        }
    }
}
