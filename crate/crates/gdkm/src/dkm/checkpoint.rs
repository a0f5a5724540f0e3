//! Versioned binary model checkpoints with a JSON sidecar for human
//! inspection. Layout: magic `GDKC`, u32 version, dims, the nu schedule,
//! scheme descriptor, inducing inputs, all layer parameters, the head, the
//! centering parameters, then a trailing FNV-1a checksum. All integers and
//! floats are little-endian.

use super::{DkmError, DkmModel, GttMode, Nu, Result, SchemeKind, VariationalHead};
use crate::dataio::FeatureScaling;
use crate::kernels::{BaseKernel, CenteringParams};
use crate::numerics::Mat;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"GDKC";
const VERSION: u32 = 1;

/// Model state plus the scheme descriptor needed to rebuild the adjacency
/// blocks against a dataset at load time.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: DkmModel,
    pub scheme_kind: SchemeKind,
    pub intra_indices: Option<Vec<usize>>,
    /// Identity-interpolation parameter used for the adjacency.
    pub lambda: f64,
    pub feature_scaling: FeatureScaling,
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x1000_0000_01b3);
    }
    hash
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn mat(&mut self, m: &Mat) {
        self.u32(m.nrows() as u32);
        self.u32(m.ncols() as u32);
        for v in m.iter() {
            self.f64(*v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(DkmError::CorruptCheckpoint(format!(
                "unexpected end of file at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn mat(&mut self) -> Result<Mat> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        if rows.saturating_mul(cols) > 100_000_000 {
            return Err(DkmError::CorruptCheckpoint(format!(
                "implausible matrix size {rows}x{cols}"
            )));
        }
        let mut m = Mat::zeros((rows, cols));
        for v in m.iter_mut() {
            *v = self.f64()?;
        }
        Ok(m)
    }
}

#[derive(serde::Serialize)]
struct Sidecar<'a> {
    version: u32,
    depth: usize,
    num_inducing: usize,
    num_features: usize,
    num_classes: usize,
    nu: &'a [Nu],
    base_kernel: BaseKernel,
    gtt_mode: GttMode,
    scheme: SchemeKind,
    lambda: f64,
    feature_scaling: FeatureScaling,
    centering: &'a [CenteringParams],
    mc_train: usize,
    mc_eval: usize,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let m = &ckpt.model;
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u32(m.depth as u32);
    w.u32(m.num_inducing() as u32);
    w.u32(m.x_inducing.ncols() as u32);
    w.u32(m.num_classes() as u32);
    w.u8(match m.base_kernel {
        BaseKernel::Arccos => 0,
        BaseKernel::Linear => 1,
    });
    w.u8(match m.gtt_mode {
        GttMode::Nystrom => 0,
        GttMode::Exact => 1,
    });
    w.u8(match ckpt.scheme_kind {
        SchemeKind::Inter => 0,
        SchemeKind::Intra => 1,
    });
    w.u8(match ckpt.feature_scaling {
        FeatureScaling::SumSquares => 0,
        FeatureScaling::Norm => 1,
        FeatureScaling::None => 2,
    });
    w.f64(ckpt.lambda);
    w.u32(m.head.mc_train as u32);
    w.u32(m.head.mc_eval as u32);
    for nu in &m.nu {
        w.f64(nu.0);
    }
    match &ckpt.intra_indices {
        Some(idx) => {
            w.u32(idx.len() as u32);
            for &i in idx {
                w.u64(i as u64);
            }
        }
        None => w.u32(0),
    }
    w.mat(&m.x_inducing);
    for lp in &m.layer_params {
        w.mat(lp);
    }
    w.mat(&m.head.mu);
    w.mat(&m.head.sigma_chol);
    for c in &m.centering {
        w.u8(c.enabled as u8);
        w.u8(c.learn_affine as u8);
        w.f64(c.gamma);
        w.f64(c.beta);
    }
    let checksum = fnv1a(&w.buf);
    w.u64(checksum);
    std::fs::File::create(path)?.write_all(&w.buf)?;

    let sidecar = Sidecar {
        version: VERSION,
        depth: m.depth,
        num_inducing: m.num_inducing(),
        num_features: m.x_inducing.ncols(),
        num_classes: m.num_classes(),
        nu: &m.nu,
        base_kernel: m.base_kernel,
        gtt_mode: m.gtt_mode,
        scheme: ckpt.scheme_kind,
        lambda: ckpt.lambda,
        feature_scaling: ckpt.feature_scaling,
        centering: &m.centering,
        mc_train: m.head.mc_train,
        mc_eval: m.head.mc_eval,
    };
    let sidecar_path = path.with_extension("json");
    std::fs::write(
        sidecar_path,
        serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
    )?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(DkmError::CorruptCheckpoint("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a(body) != stored {
        return Err(DkmError::CorruptCheckpoint("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(DkmError::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(DkmError::CorruptCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let depth = r.u32()? as usize;
    let p_i = r.u32()? as usize;
    let nu0 = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let base_kernel = match r.u8()? {
        0 => BaseKernel::Arccos,
        1 => BaseKernel::Linear,
        other => {
            return Err(DkmError::CorruptCheckpoint(format!(
                "unknown base kernel tag {other}"
            )))
        }
    };
    let gtt_mode = match r.u8()? {
        0 => GttMode::Nystrom,
        1 => GttMode::Exact,
        other => {
            return Err(DkmError::CorruptCheckpoint(format!(
                "unknown Gtt mode tag {other}"
            )))
        }
    };
    let scheme_kind = match r.u8()? {
        0 => SchemeKind::Inter,
        1 => SchemeKind::Intra,
        other => {
            return Err(DkmError::CorruptCheckpoint(format!(
                "unknown scheme tag {other}"
            )))
        }
    };
    let feature_scaling = match r.u8()? {
        0 => FeatureScaling::SumSquares,
        1 => FeatureScaling::Norm,
        2 => FeatureScaling::None,
        other => {
            return Err(DkmError::CorruptCheckpoint(format!(
                "unknown feature scaling tag {other}"
            )))
        }
    };
    let lambda = r.f64()?;
    let mc_train = r.u32()? as usize;
    let mc_eval = r.u32()? as usize;
    let mut nu = Vec::with_capacity(depth);
    for _ in 0..depth {
        nu.push(Nu(r.f64()?));
    }
    let idx_len = r.u32()? as usize;
    let intra_indices = if idx_len > 0 {
        let mut idx = Vec::with_capacity(idx_len);
        for _ in 0..idx_len {
            idx.push(r.u64()? as usize);
        }
        Some(idx)
    } else {
        None
    };
    let expect_dims = |m: &Mat, rows: usize, cols: usize, what: &str| -> Result<()> {
        if m.nrows() != rows || m.ncols() != cols {
            return Err(DkmError::CorruptCheckpoint(format!(
                "{what} is {}x{} but header says {rows}x{cols}",
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(())
    };
    let x_inducing = r.mat()?;
    expect_dims(&x_inducing, p_i, nu0, "inducing inputs")?;
    let mut layer_params = Vec::with_capacity(depth);
    for l in 0..depth {
        let lp = r.mat()?;
        expect_dims(&lp, p_i, p_i, &format!("layer {l} parameter"))?;
        layer_params.push(lp);
    }
    let mu = r.mat()?;
    expect_dims(&mu, p_i, classes, "head mean")?;
    let sigma_chol = r.mat()?;
    expect_dims(&sigma_chol, p_i, p_i, "head covariance factor")?;
    let mut centering = Vec::with_capacity(depth);
    for _ in 0..depth {
        centering.push(CenteringParams {
            enabled: r.u8()? != 0,
            learn_affine: r.u8()? != 0,
            gamma: r.f64()?,
            beta: r.f64()?,
        });
    }
    let model = DkmModel {
        depth,
        nu,
        base_kernel,
        gtt_mode,
        x_inducing,
        layer_params,
        head: VariationalHead {
            mu,
            sigma_chol,
            mc_train,
            mc_eval,
        },
        centering,
    };
    Ok(Checkpoint {
        model,
        scheme_kind,
        intra_indices,
        lambda,
        feature_scaling,
    })
}
