//! On-disk bundled weight store.
//!
//! The unit of storage is one neuron's bundle: its up-projection column, its
//! down-projection row, and its up bias, laid out contiguously so a single
//! read fetches everything needed to run that neuron. Records are padded to
//! `record_stride` (a multiple of `record_alignment`) so every record starts
//! on an aligned boundary, which direct I/O needs.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! [magic "FNSB"][version u32][d_model u32][d_ffn u32][n_layers u32]
//! [scalar_width u32][record_alignment u32][record_stride u64]
//! [layer_offsets: n_layers x u64]
//! (zero padding up to layer_offsets[0])
//! [records: layer l, neuron i at layer_offsets[l] + i * record_stride]
//! ```
//!
//! Record payload: `d_model` up scalars, `d_model` down scalars, one bias
//! scalar, then zero padding up to `record_stride`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::os::unix::fs::FileExt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Mat;
use crate::scalar::{decode_scalar, encode_scalar, Scalar, SUPPORTED_SCALAR_WIDTHS};

pub const STORE_MAGIC: [u8; 4] = *b"FNSB";
pub const STORE_VERSION: u32 = 1;
pub const DEFAULT_RECORD_ALIGNMENT: u32 = 4096;

/// Fixed-size part of the header, before the layer offset table.
pub const HEADER_LEN: u64 = 36;

/// One neuron's bundle as read back into memory.
#[derive(Debug, Clone, PartialEq)]
pub struct BundledRecord<T> {
    pub neuron_index: u32,
    pub up_column: Vec<T>,
    pub down_row: Vec<T>,
    pub bias: T,
}

/// Header + layer table describing a store file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub version: u32,
    pub d_model: u32,
    pub d_ffn: u32,
    pub n_layers: u32,
    pub scalar_width: u32,
    pub record_alignment: u32,
    pub record_stride: u64,
    pub layer_offsets: Vec<u64>,
}

impl StoreManifest {
    /// Payload bytes of one record: `(2 d_model + 1) * scalar_width`.
    pub fn payload_bytes(&self) -> u64 {
        (2 * self.d_model as u64 + 1) * self.scalar_width as u64
    }

    /// Bytes of the bundled matrix halves alone: `2 d_model * scalar_width`.
    pub fn matrix_payload_bytes(&self) -> u64 {
        2 * self.d_model as u64 * self.scalar_width as u64
    }

    /// Header + offset table length.
    pub fn table_len(&self) -> u64 {
        HEADER_LEN + 8 * self.n_layers as u64
    }

    /// Absolute offset of record `index` of `layer`.
    pub fn record_offset(&self, layer: usize, index: u32) -> Result<u64> {
        if layer >= self.n_layers as usize {
            return Err(Error::LayerOutOfRange { layer, n_layers: self.n_layers as usize });
        }
        if index >= self.d_ffn {
            return Err(Error::IndexOutOfRange { index, d_ffn: self.d_ffn });
        }
        Ok(self.layer_offsets[layer] + index as u64 * self.record_stride)
    }

    /// Smallest file length consistent with the layout.
    pub fn min_file_len(&self) -> u64 {
        match self.layer_offsets.last() {
            Some(&last) => last + self.d_ffn as u64 * self.record_stride,
            None => self.table_len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvariantViolation(msg));
        if self.d_model == 0 || self.d_ffn == 0 || self.n_layers == 0 {
            return fail("d_model, d_ffn and n_layers must all be nonzero".into());
        }
        if !SUPPORTED_SCALAR_WIDTHS.contains(&self.scalar_width) {
            return fail(format!("scalar_width {} not in {:?}", self.scalar_width, SUPPORTED_SCALAR_WIDTHS));
        }
        if !self.record_alignment.is_power_of_two() {
            return fail(format!("record_alignment {} is not a power of two", self.record_alignment));
        }
        if self.record_alignment < self.scalar_width {
            return fail(format!(
                "record_alignment {} smaller than scalar_width {}",
                self.record_alignment, self.scalar_width
            ));
        }
        if self.record_stride < self.payload_bytes() {
            return fail(format!(
                "record_stride {} smaller than payload {}",
                self.record_stride,
                self.payload_bytes()
            ));
        }
        if self.record_stride % self.record_alignment as u64 != 0 {
            return fail(format!(
                "record_stride {} not a multiple of record_alignment {}",
                self.record_stride, self.record_alignment
            ));
        }
        if self.layer_offsets.len() != self.n_layers as usize {
            return fail(format!(
                "layer table has {} entries, expected {}",
                self.layer_offsets.len(),
                self.n_layers
            ));
        }
        if self.layer_offsets[0] < self.table_len() {
            return fail("layer_offsets[0] overlaps the header".into());
        }
        for (l, &off) in self.layer_offsets.iter().enumerate() {
            if off % self.record_alignment as u64 != 0 {
                return fail(format!("layer_offsets[{l}] = {off} not aligned"));
            }
        }
        let layer_bytes = self.d_ffn as u64 * self.record_stride;
        for w in self.layer_offsets.windows(2) {
            if w[1] <= w[0] {
                return fail("layer_offsets not strictly increasing".into());
            }
            if w[1] - w[0] < layer_bytes {
                return fail(format!(
                    "layer gap {} smaller than d_ffn * record_stride = {}",
                    w[1] - w[0],
                    layer_bytes
                ));
            }
        }
        Ok(())
    }

    fn write_header(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&STORE_MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        w.write_all(&self.d_model.to_le_bytes())?;
        w.write_all(&self.d_ffn.to_le_bytes())?;
        w.write_all(&self.n_layers.to_le_bytes())?;
        w.write_all(&self.scalar_width.to_le_bytes())?;
        w.write_all(&self.record_alignment.to_le_bytes())?;
        w.write_all(&self.record_stride.to_le_bytes())?;
        for off in &self.layer_offsets {
            w.write_all(&off.to_le_bytes())?;
        }
        Ok(())
    }

    fn read_header(r: &mut impl Read) -> Result<Self> {
        let mut head = [0u8; HEADER_LEN as usize];
        r.read_exact(&mut head)
            .map_err(|_| Error::CorruptManifest("truncated header".into()))?;
        if head[0..4] != STORE_MAGIC {
            return Err(Error::CorruptManifest("bad magic".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != STORE_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: STORE_VERSION });
        }
        let n_layers = u32_at(16);
        if n_layers == 0 || n_layers > 1 << 20 {
            return Err(Error::CorruptManifest(format!("implausible n_layers {n_layers}")));
        }
        let mut table = vec![0u8; 8 * n_layers as usize];
        r.read_exact(&mut table)
            .map_err(|_| Error::CorruptManifest("truncated layer table".into()))?;
        let layer_offsets = table
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            version,
            d_model: u32_at(8),
            d_ffn: u32_at(12),
            n_layers,
            scalar_width: u32_at(20),
            record_alignment: u32_at(24),
            record_stride: u64::from_le_bytes(head[28..36].try_into().unwrap()),
            layer_offsets,
        })
    }
}

/// One layer's weights in neuron-major orientation: row `i` of `up` (and of
/// `down`) holds the `d_model` weights belonging to neuron `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub up: Mat<T>,
    pub down: Mat<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> LayerWeights<T> {
    pub fn d_ffn(&self) -> usize {
        self.up.rows()
    }

    pub fn d_model(&self) -> usize {
        self.up.cols()
    }

    fn check_dims(&self, d_model: usize, d_ffn: usize, layer: usize) -> Result<()> {
        let ok = self.up.rows() == d_ffn
            && self.up.cols() == d_model
            && self.down.rows() == d_ffn
            && self.down.cols() == d_model
            && self.bias.len() == d_ffn;
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "layer {layer}: up {}x{}, down {}x{}, bias {} (expected {d_ffn}x{d_model})",
                self.up.rows(),
                self.up.cols(),
                self.down.rows(),
                self.down.cols(),
                self.bias.len()
            )))
        }
    }
}

fn round_up(v: u64, align: u64) -> u64 {
    v.div_ceil(align) * align
}

/// Pack per-layer weights into a store file at `path`.
///
/// Record `i` of layer `l` lands at `layer_offsets[l] + i * record_stride`;
/// reading it back reproduces the input (bit-exactly for f32 at width 4).
pub fn pack_store<T: Scalar>(
    layers: &[LayerWeights<T>],
    scalar_width: u32,
    record_alignment: u32,
    path: &Path,
) -> Result<StoreManifest> {
    if layers.is_empty() {
        return Err(Error::DimensionMismatch("no layers to pack".into()));
    }
    if !SUPPORTED_SCALAR_WIDTHS.contains(&scalar_width) {
        return Err(Error::InvalidArgument(format!(
            "scalar_width {scalar_width} not in {SUPPORTED_SCALAR_WIDTHS:?}"
        )));
    }
    if !record_alignment.is_power_of_two() || record_alignment < scalar_width {
        return Err(Error::InvalidArgument(format!(
            "record_alignment {record_alignment} must be a power of two >= scalar_width"
        )));
    }
    let d_ffn = layers[0].d_ffn();
    let d_model = layers[0].d_model();
    for (l, layer) in layers.iter().enumerate() {
        layer.check_dims(d_model, d_ffn, l)?;
    }

    let mut manifest = StoreManifest {
        version: STORE_VERSION,
        d_model: d_model as u32,
        d_ffn: d_ffn as u32,
        n_layers: layers.len() as u32,
        scalar_width,
        record_alignment,
        record_stride: 0,
        layer_offsets: Vec::with_capacity(layers.len()),
    };
    let align = record_alignment as u64;
    manifest.record_stride = round_up(manifest.payload_bytes(), align);
    let layer_bytes = d_ffn as u64 * manifest.record_stride;
    let first = round_up(manifest.table_len(), align);
    for l in 0..layers.len() as u64 {
        manifest.layer_offsets.push(first + l * layer_bytes);
    }

    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    manifest.write_header(&mut w)?;
    let mut pos = manifest.table_len();
    let pad = vec![0u8; (first - pos) as usize];
    w.write_all(&pad)?;
    pos = first;

    let mut record = Vec::with_capacity(manifest.record_stride as usize);
    for layer in layers {
        for i in 0..d_ffn {
            record.clear();
            for &v in layer.up.row(i) {
                encode_scalar(v, scalar_width, &mut record);
            }
            for &v in layer.down.row(i) {
                encode_scalar(v, scalar_width, &mut record);
            }
            encode_scalar(layer.bias[i], scalar_width, &mut record);
            record.resize(manifest.record_stride as usize, 0);
            w.write_all(&record)?;
            pos += manifest.record_stride;
        }
    }
    w.flush()?;
    debug_assert_eq!(pos, manifest.min_file_len());
    manifest.validate()?;
    Ok(manifest)
}

/// Read and validate the manifest of a store file.
pub fn read_manifest(path: &Path) -> Result<StoreManifest> {
    let mut file = File::open(path)?;
    let manifest = StoreManifest::read_header(&mut file)?;
    manifest.validate()?;
    let actual = file.metadata()?.len();
    if actual < manifest.min_file_len() {
        return Err(Error::CorruptManifest(format!(
            "file is {actual} bytes, layout requires {}",
            manifest.min_file_len()
        )));
    }
    Ok(manifest)
}

/// Decode one record's payload bytes.
pub fn decode_record<T: Scalar>(
    payload: &[u8],
    manifest: &StoreManifest,
    neuron_index: u32,
) -> BundledRecord<T> {
    let w = manifest.scalar_width as usize;
    let d = manifest.d_model as usize;
    let scalar_at = |k: usize| decode_scalar::<T>(&payload[k * w..], manifest.scalar_width);
    BundledRecord {
        neuron_index,
        up_column: (0..d).map(scalar_at).collect(),
        down_row: (d..2 * d).map(scalar_at).collect(),
        bias: scalar_at(2 * d),
    }
}

/// Plain sequential store reader, used for round-trip checks and as the
/// reference the coalescing fetch path is compared against.
pub struct StoreFile {
    file: File,
    manifest: StoreManifest,
}

impl StoreFile {
    pub fn open(path: &Path) -> Result<Self> {
        let manifest = read_manifest(path)?;
        Ok(Self { file: File::open(path)?, manifest })
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn read_record<T: Scalar>(&self, layer: usize, index: u32) -> Result<BundledRecord<T>> {
        let offset = self.manifest.record_offset(layer, index)?;
        let mut buf = vec![0u8; self.manifest.payload_bytes() as usize];
        self.file.read_exact_at(&mut buf, offset)?;
        Ok(decode_record(&buf, &self.manifest, index))
    }

    /// Read a whole layer back into neuron-major matrices.
    pub fn read_layer<T: Scalar>(&self, layer: usize) -> Result<LayerWeights<T>> {
        let d_ffn = self.manifest.d_ffn as usize;
        let d_model = self.manifest.d_model as usize;
        let mut up = Mat::zeros(d_ffn, d_model);
        let mut down = Mat::zeros(d_ffn, d_model);
        let mut bias = vec![T::zero(); d_ffn];
        for i in 0..d_ffn {
            let rec = self.read_record::<T>(layer, i as u32)?;
            up.row_mut(i).copy_from_slice(&rec.up_column);
            down.row_mut(i).copy_from_slice(&rec.down_row);
            bias[i] = rec.bias;
        }
        Ok(LayerWeights { up, down, bias })
    }
}

/// Raw per-layer matrix dump, the input format of the `pack` CLI command.
///
/// A dump directory contains `dims.json` with `{d_model, d_ffn, n_layers}`
/// and, per layer `l`, files `layer_NNN.up.f32`, `layer_NNN.down.f32` and
/// `layer_NNN.bias.f32` holding raw little-endian f32 values, row-major,
/// neuron-major rows (`d_ffn` rows of `d_model` values; bias is `d_ffn`
/// values).
pub mod raw_dump {
    use super::*;

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct DumpDims {
        pub d_model: usize,
        pub d_ffn: usize,
        pub n_layers: usize,
    }

    fn layer_file(dir: &Path, layer: usize, part: &str) -> std::path::PathBuf {
        dir.join(format!("layer_{layer:03}.{part}.f32"))
    }

    fn write_f32s(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    fn read_f32s(path: &Path, count: usize) -> Result<Vec<f32>> {
        let mut buf = Vec::new();
        File::open(path)?.read_to_end(&mut buf)?;
        if buf.len() != count * 4 {
            return Err(Error::DimensionMismatch(format!(
                "{}: {} bytes, expected {}",
                path.display(),
                buf.len(),
                count * 4
            )));
        }
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn write(dir: &Path, layers: &[LayerWeights<f32>]) -> Result<()> {
        if layers.is_empty() {
            return Err(Error::DimensionMismatch("no layers to dump".into()));
        }
        std::fs::create_dir_all(dir)?;
        let dims = DumpDims {
            d_model: layers[0].d_model(),
            d_ffn: layers[0].d_ffn(),
            n_layers: layers.len(),
        };
        std::fs::write(dir.join("dims.json"), serde_json::to_string_pretty(&dims).unwrap())?;
        for (l, layer) in layers.iter().enumerate() {
            write_f32s(&layer_file(dir, l, "up"), layer.up.as_slice().iter().copied())?;
            write_f32s(&layer_file(dir, l, "down"), layer.down.as_slice().iter().copied())?;
            write_f32s(&layer_file(dir, l, "bias"), layer.bias.iter().copied())?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Vec<LayerWeights<f32>>> {
        let dims: DumpDims = serde_json::from_str(
            &std::fs::read_to_string(dir.join("dims.json"))
                .map_err(|e| Error::InvalidArgument(format!("missing dims.json: {e}")))?,
        )
        .map_err(|e| Error::InvalidArgument(format!("bad dims.json: {e}")))?;
        let mut layers = Vec::with_capacity(dims.n_layers);
        for l in 0..dims.n_layers {
            let up = read_f32s(&layer_file(dir, l, "up"), dims.d_ffn * dims.d_model)?;
            let down = read_f32s(&layer_file(dir, l, "down"), dims.d_ffn * dims.d_model)?;
            let bias = read_f32s(&layer_file(dir, l, "bias"), dims.d_ffn)?;
            layers.push(LayerWeights {
                up: Mat::from_vec(up, dims.d_ffn, dims.d_model),
                down: Mat::from_vec(down, dims.d_ffn, dims.d_model),
                bias,
            });
        }
        Ok(layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    pub(crate) fn random_layers(
        seed: u64,
        n_layers: usize,
        d_ffn: usize,
        d_model: usize,
    ) -> Vec<LayerWeights<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_layers)
            .map(|_| LayerWeights {
                up: Mat::from_fn(d_ffn, d_model, |_, _| rng.random_range(-1.0..1.0)),
                down: Mat::from_fn(d_ffn, d_model, |_, _| rng.random_range(-1.0..1.0)),
                bias: (0..d_ffn).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect()
    }

    /// Independent reference serializer: same layout, written as one flat
    /// pass with no shared helpers, used to byte-compare pack_store output.
    fn reference_serialize(layers: &[LayerWeights<f32>], align: u64) -> Vec<u8> {
        let d_model = layers[0].d_model() as u64;
        let d_ffn = layers[0].d_ffn() as u64;
        let n_layers = layers.len() as u64;
        let payload = (2 * d_model + 1) * 4;
        let stride = payload.div_ceil(align) * align;
        let table_len = 36 + 8 * n_layers;
        let first = table_len.div_ceil(align) * align;

        let mut out = Vec::new();
        out.extend_from_slice(b"FNSB");
        for v in [1u32, d_model as u32, d_ffn as u32, n_layers as u32, 4, align as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&stride.to_le_bytes());
        for l in 0..n_layers {
            out.extend_from_slice(&(first + l * d_ffn * stride).to_le_bytes());
        }
        out.resize(first as usize, 0);
        for layer in layers {
            for i in 0..d_ffn as usize {
                let start = out.len();
                for &v in layer.up.row(i) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                for &v in layer.down.row(i) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&layer.bias[i].to_le_bytes());
                out.resize(start + stride as usize, 0);
            }
        }
        out
    }

    #[test]
    fn single_neuron_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("toy.fnsb");
        let layers = vec![LayerWeights {
            up: Mat::from_vec(vec![2.0f32], 1, 1),
            down: Mat::from_vec(vec![3.0f32], 1, 1),
            bias: vec![0.0f32],
        }];
        let manifest = pack_store(&layers, 4, 64, &path).unwrap();
        assert_eq!(manifest.payload_bytes(), 12);

        let store = StoreFile::open(&path).unwrap();
        assert_eq!(store.manifest(), &manifest);
        let rec = store.read_record::<f32>(0, 0).unwrap();
        assert_eq!(rec.up_column, vec![2.0]);
        assert_eq!(rec.down_row, vec![3.0]);
        assert_eq!(rec.bias, 0.0);
    }

    #[test]
    fn bundled_chunk_is_32kib_at_4096_width_4() {
        let manifest = StoreManifest {
            version: STORE_VERSION,
            d_model: 4096,
            d_ffn: 1,
            n_layers: 1,
            scalar_width: 4,
            record_alignment: DEFAULT_RECORD_ALIGNMENT,
            record_stride: 36864,
            layer_offsets: vec![4096],
        };
        assert_eq!(manifest.matrix_payload_bytes(), 32 * 1024);
        assert_eq!(manifest.payload_bytes(), 32 * 1024 + 4);
        // bundling doubles the contiguous unit relative to a bare row
        let bare_row = manifest.d_model as u64 * manifest.scalar_width as u64;
        assert!(manifest.payload_bytes() >= 2 * bare_row);
        manifest.validate().unwrap();
    }

    #[test]
    fn packed_bytes_match_reference_serializer() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ref.fnsb");
        let layers = random_layers(17, 2, 16, 8);
        pack_store(&layers, 4, 64, &path).unwrap();
        let packed = std::fs::read(&path).unwrap();
        let reference = reference_serialize(&layers, 64);
        assert_eq!(packed, reference);
    }

    #[test]
    fn layer_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("rt.fnsb");
        let layers = random_layers(3, 3, 24, 6);
        pack_store(&layers, 4, 128, &path).unwrap();
        let store = StoreFile::open(&path).unwrap();
        for (l, expected) in layers.iter().enumerate() {
            let got = store.read_layer::<f32>(l).unwrap();
            assert_eq!(&got, expected);
        }
    }

    #[test]
    fn manifest_round_trip_matches_pack_result() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.fnsb");
        let manifest = pack_store(&random_layers(5, 2, 8, 4), 4, 4096, &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), manifest);
    }

    #[test]
    fn truncated_header_is_corrupt() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.fnsb");
        std::fs::write(&path, b"FNSB\x01\x00").unwrap();
        match read_manifest(&path) {
            Err(Error::CorruptManifest(msg)) => assert!(msg.contains("truncated")),
            other => panic!("expected corrupt manifest, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_corrupt() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("b.fnsb");
        std::fs::write(&path, vec![0u8; 128]).unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::CorruptManifest(_))));
    }

    #[test]
    fn stride_below_payload_is_invariant_violation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.fnsb");
        pack_store(&random_layers(7, 1, 4, 4), 4, 64, &path).unwrap();
        // record_stride lives at bytes 28..36 of the header
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[28..36].copy_from_slice(&8u64.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match read_manifest(&path) {
            Err(Error::InvariantViolation(msg)) => assert!(msg.contains("smaller than payload")),
            other => panic!("expected invariant violation, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.fnsb");
        pack_store(&random_layers(9, 1, 4, 4), 4, 64, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_manifest(&path),
            Err(Error::VersionMismatch { found: 9, expected: STORE_VERSION })
        ));
    }

    #[test]
    fn bad_alignment_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.fnsb");
        let layers = random_layers(1, 1, 4, 4);
        assert!(matches!(pack_store(&layers, 4, 48, &path), Err(Error::InvalidArgument(_))));
        assert!(matches!(pack_store(&layers, 4, 2, &path), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn inconsistent_layer_dims_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.fnsb");
        let mut layers = random_layers(2, 2, 8, 4);
        layers[1].bias.pop();
        assert!(matches!(pack_store(&layers, 4, 64, &path), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn width_2_store_widens_on_load() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("h.fnsb");
        // values exactly representable in binary16
        let layers = vec![LayerWeights {
            up: Mat::from_vec(vec![0.5f32, -1.25], 2, 1),
            down: Mat::from_vec(vec![2.0f32, 0.75], 2, 1),
            bias: vec![1.0f32, -0.5],
        }];
        let manifest = pack_store(&layers, 2, 16, &path).unwrap();
        assert_eq!(manifest.payload_bytes(), 6);
        let store = StoreFile::open(&path).unwrap();
        let got = store.read_layer::<f32>(0).unwrap();
        assert_eq!(got, layers[0]);
    }

    #[test]
    fn raw_dump_round_trip() {
        let dir = tempdir().unwrap();
        let layers = random_layers(11, 2, 8, 4);
        raw_dump::write(dir.path(), &layers).unwrap();
        assert_eq!(raw_dump::read(dir.path()).unwrap(), layers);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn round_trip_any_shape(
                seed in 0u64..1000,
                n_layers in 1usize..4,
                d_ffn in 1usize..12,
                d_model in 1usize..10,
                align_pow in 2u32..9,
            ) {
                let align = 1u32 << align_pow;
                let dir = tempdir().unwrap();
                let path = dir.path().join("p.fnsb");
                let layers = random_layers(seed, n_layers, d_ffn, d_model);
                let manifest = pack_store(&layers, 4, align, &path).unwrap();

                prop_assert!(manifest.record_stride >= manifest.payload_bytes());
                prop_assert_eq!(manifest.record_stride % align as u64, 0);
                // every record offset is aligned
                for l in 0..n_layers {
                    for i in 0..d_ffn as u32 {
                        let off = manifest.record_offset(l, i).unwrap();
                        prop_assert_eq!(off % align as u64, 0);
                    }
                }

                let store = StoreFile::open(&path).unwrap();
                for (l, expected) in layers.iter().enumerate() {
                    let got = store.read_layer::<f32>(l).unwrap();
                    prop_assert_eq!(&got, expected);
                }
            }
        }
    }
}
