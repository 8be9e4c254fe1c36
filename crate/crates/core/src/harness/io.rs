//! Binary persistence of shared spaces (`CACL`) and of single-task
//! factor checkpoints (`CTSK`). All integers are little-endian u32, all
//! reals little-endian IEEE-754 binary32, matrices column by column.

use std::path::Path;

use crate::error::{Error, Result};
use crate::factorized::{
    ConvLayer, LayerFactors, LayerShape, NetworkSpec, SharedSpace, TaskFactors, TaskHead,
};
use crate::linalg::Matrix;

pub const SPACE_MAGIC: [u8; 4] = *b"CACL";
pub const TASK_MAGIC: [u8; 4] = *b"CTSK";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 16;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v)
            .map_err(|_| Error::argument(format!("{v} does not fit the u32 format field")))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn reals(&mut self, vals: &[f32]) {
        for v in vals {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn matrix(&mut self, m: &Matrix) {
        for j in 0..m.cols() {
            for i in 0..m.rows() {
                self.buf.extend_from_slice(&m.get(i, j).to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated: {what} needs {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn reals(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| self.fail(format!("{what}: length overflow")))?;
        let b = self.take(len, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| self.fail(format!("{what}: size overflow")))?;
        let colmajor = self.reals(n, what)?;
        let mut m = Matrix::zeros(rows, cols);
        for j in 0..cols {
            for i in 0..rows {
                m.set(i, j, colmajor[j * rows + i]);
            }
        }
        Ok(m)
    }

    fn header(&mut self, magic: [u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            self.pos = 0;
            return Err(self.fail(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = self.u32("version")?;
        if version != FORMAT_VERSION as usize {
            self.pos -= 4;
            return Err(self.fail(format!(
                "unsupported version {version}, expected {FORMAT_VERSION}"
            )));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

/// Serializes a shared space together with the network geometry needed to
/// run it.
pub fn encode_space(spec: &NetworkSpec, space: &SharedSpace) -> Result<Vec<u8>> {
    spec.validate()?;
    if spec.shapes() != space.shapes() {
        return Err(Error::shape("network layers do not match the shared space"));
    }
    let mut w = Writer::new();
    w.buf.extend_from_slice(&SPACE_MAGIC);
    w.u32(FORMAT_VERSION as usize)?;
    w.u32(spec.layers.len())?;
    w.u32(space.num_tasks())?;
    w.u32(spec.input_channels)?;
    w.u32(spec.input_height)?;
    w.u32(spec.input_width)?;
    for layer in &spec.layers {
        let s = layer.shape;
        for v in [s.c, s.n, s.h, s.w, layer.stride, layer.padding] {
            w.u32(v)?;
        }
    }
    for row in space.rank_table() {
        for &r in row {
            w.u32(r as usize)?;
        }
    }
    for f in space.layers() {
        w.matrix(&f.u);
        w.reals(&f.sigma);
        w.matrix(&f.v);
    }
    for head in space.heads() {
        w.u32(head.input_dim())?;
        w.u32(head.classes())?;
        w.matrix(&head.weight);
        w.reals(&head.bias);
    }
    Ok(w.buf)
}

/// Inverse of [`encode_space`]. Any defect is a format error carrying the
/// byte offset where decoding stopped; nothing is returned on failure.
pub fn decode_space(bytes: &[u8]) -> Result<(NetworkSpec, SharedSpace)> {
    let mut r = Reader::new(bytes);
    r.header(SPACE_MAGIC)?;
    let layers = r.u32("layer count")?;
    let tasks = r.u32("task count")?;
    let input_channels = r.u32("input channels")?;
    let input_height = r.u32("input height")?;
    let input_width = r.u32("input width")?;
    // Each layer record is 24 bytes; bound the count before allocating.
    if layers.saturating_mul(24) > bytes.len() {
        return Err(r.fail(format!("truncated: {layers} layer records cannot fit")));
    }
    let mut conv = Vec::with_capacity(layers);
    for _ in 0..layers {
        let c = r.u32("c")?;
        let n = r.u32("n")?;
        let h = r.u32("h")?;
        let w = r.u32("w")?;
        let stride = r.u32("stride")?;
        let padding = r.u32("padding")?;
        conv.push(ConvLayer {
            shape: LayerShape::new(c, n, h, w),
            stride,
            padding,
        });
    }
    let meta_end = r.pos;
    let spec = NetworkSpec {
        input_channels,
        input_height,
        input_width,
        layers: conv,
    };
    spec.validate().map_err(|e| Error::Format {
        offset: meta_end as u64,
        message: format!("inconsistent network: {e}"),
    })?;
    if layers.saturating_mul(tasks).saturating_mul(4) > bytes.len() {
        return Err(r.fail(format!("truncated: rank table {layers}×{tasks} cannot fit")));
    }
    let mut rank_table = Vec::with_capacity(layers);
    for _ in 0..layers {
        let row = (0..tasks)
            .map(|_| r.u32("rank table").map(|v| v as u32))
            .collect::<Result<Vec<_>>>()?;
        rank_table.push(row);
    }
    let shapes = spec.shapes();
    let mut factors = Vec::with_capacity(layers);
    for (row, s) in rank_table.iter().zip(&shapes) {
        let width = row.last().copied().unwrap_or(0) as usize;
        let u = r.matrix(s.m(), width, "U")?;
        let sigma = r.reals(width, "σ")?;
        let v = r.matrix(s.q(), width, "V")?;
        factors.push(LayerFactors { u, sigma, v });
    }
    let mut heads = Vec::with_capacity(tasks.min(bytes.len()));
    for _ in 0..tasks {
        let start = r.pos;
        let d = r.u32("head input dim")?;
        let k = r.u32("head classes")?;
        let weight = r.matrix(d, k, "head weight")?;
        let bias = r.reals(k, "head bias")?;
        if d != spec.head_input_dim() {
            return Err(Error::Format {
                offset: start as u64,
                message: format!(
                    "head input dim {d}, network gives {}",
                    spec.head_input_dim()
                ),
            });
        }
        heads.push(TaskHead::new(weight, bias)?);
    }
    r.finish()?;
    let space =
        SharedSpace::from_parts(shapes, factors, rank_table, heads).map_err(|e| Error::Format {
            offset: meta_end as u64,
            message: format!("inconsistent shared space: {e}"),
        })?;
    Ok((spec, space))
}

/// Byte size of an encoded space: header, metadata, then 4 bytes per real.
pub fn encoded_len(spec: &NetworkSpec, space: &SharedSpace) -> usize {
    let l = spec.layers.len();
    let t = space.num_tasks();
    let metadata = 12 + 24 * l + 4 * l * t + 8 * t;
    HEADER_BYTES + metadata + 4 * space.param_count()
}

/// Writes via a temporary sibling and a rename, so readers never see a
/// partially written file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_space(spec: &NetworkSpec, space: &SharedSpace, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_space(spec, space)?)
}

pub fn load_space(path: impl AsRef<Path>) -> Result<(NetworkSpec, SharedSpace)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_space(&bytes)
}

/// Serializes one task's (typically uncompressed) residual factors.
pub fn encode_task(shapes: &[LayerShape], factors: &TaskFactors) -> Result<Vec<u8>> {
    if shapes.len() != factors.layers.len() {
        return Err(Error::shape("layer count mismatch in task checkpoint"));
    }
    let mut w = Writer::new();
    w.buf.extend_from_slice(&TASK_MAGIC);
    w.u32(FORMAT_VERSION as usize)?;
    w.u32(shapes.len())?;
    w.u32(factors.task)?;
    for (s, f) in shapes.iter().zip(&factors.layers) {
        f.check_shape(*s)?;
        for v in [s.c, s.n, s.h, s.w, f.rank()] {
            w.u32(v)?;
        }
    }
    for f in &factors.layers {
        w.matrix(&f.u);
        w.reals(&f.sigma);
        w.matrix(&f.v);
    }
    Ok(w.buf)
}

pub fn decode_task(bytes: &[u8]) -> Result<(Vec<LayerShape>, TaskFactors)> {
    let mut r = Reader::new(bytes);
    r.header(TASK_MAGIC)?;
    let layers = r.u32("layer count")?;
    let task = r.u32("task index")?;
    if layers.saturating_mul(20) > bytes.len() {
        return Err(r.fail(format!("truncated: {layers} layer records cannot fit")));
    }
    let mut dims = Vec::with_capacity(layers);
    for _ in 0..layers {
        let s = LayerShape::new(r.u32("c")?, r.u32("n")?, r.u32("h")?, r.u32("w")?);
        let rank = r.u32("rank")?;
        if rank > s.m().min(s.q()) {
            return Err(r.fail(format!("rank {rank} exceeds min(c, q) of {s:?}")));
        }
        dims.push((s, rank));
    }
    let mut out = Vec::with_capacity(layers);
    for &(s, rank) in &dims {
        let u = r.matrix(s.m(), rank, "U")?;
        let sigma = r.reals(rank, "σ")?;
        let v = r.matrix(s.q(), rank, "V")?;
        out.push(LayerFactors { u, sigma, v });
    }
    r.finish()?;
    Ok((
        dims.into_iter().map(|(s, _)| s).collect(),
        TaskFactors { task, layers: out },
    ))
}

pub fn save_task(
    shapes: &[LayerShape],
    factors: &TaskFactors,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_atomic(path.as_ref(), &encode_task(shapes, factors)?)
}

pub fn load_task(path: impl AsRef<Path>) -> Result<(Vec<LayerShape>, TaskFactors)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_task(&bytes)
}
