//! Binary path cache and network checkpoints. All integers and floats are
//! little-endian.
//!
//! Path cache:
//!
//! ```text
//! magic  b"MNPATHS1"
//! u32    d, q, N
//! u64    M
//! f64    T
//! u64    seed
//! u32    problem id
//! f64    t_0 … t_N
//! u32    start index per path          (M)
//! f64    states     [M][N+1][d]
//! f64    increments [M][N][q]
//! ```
//!
//! Checkpoint:
//!
//! ```text
//! magic  b"MNCKPT01"
//! u32    problem id, d, m, width, depth, r
//! u8     value activation, control activation
//! u64    seed
//! f64    T
//! u64    |θ|, |α|, |η|, then the three payloads as f64
//! ```

use std::path::Path;

use martnet_core::autodiff::Activation;
use martnet_core::networks::{init_networks, Architecture, NetworkBundle};
use martnet_core::problems::ProblemSpec;
use martnet_core::sde::{PathBatch, TimeGrid};

const PATHS_MAGIC: &[u8; 8] = b"MNPATHS1";
const CKPT_MAGIC: &[u8; 8] = b"MNCKPT01";

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a {0} file")]
    BadMagic(&'static str),
    #[error("file truncated: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("{trailing} unexpected trailing bytes")]
    Trailing { trailing: usize },
    #[error("header field `{field}` is {found}, expected {expected}")]
    Mismatch { field: &'static str, expected: String, found: String },
    #[error("corrupt file: {0}")]
    Corrupt(String),
}

fn mismatch(field: &'static str, expected: impl ToString, found: impl ToString) -> FormatError {
    FormatError::Mismatch { field, expected: expected.to_string(), found: found.to_string() }
}

struct Reader<'a> {
    data: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.data.len());
        let Some(end) = end else {
            return Err(FormatError::Truncated { offset: self.at, needed: n.saturating_sub(self.data.len() - self.at) });
        };
        let s = &self.data[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let bytes = n.checked_mul(8).ok_or_else(|| FormatError::Corrupt("length overflow".into()))?;
        Ok(self.take(bytes)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>, FormatError> {
        let bytes = n.checked_mul(4).ok_or_else(|| FormatError::Corrupt("length overflow".into()))?;
        Ok(self.take(bytes)?.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn finish(&self) -> Result<(), FormatError> {
        match self.data.len() - self.at {
            0 => Ok(()),
            trailing => Err(FormatError::Trailing { trailing }),
        }
    }
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn usize_of(v: u64, what: &str) -> Result<usize, FormatError> {
    usize::try_from(v).map_err(|_| FormatError::Corrupt(format!("{what} does not fit in memory")))
}

fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    std::fs::read(path).map_err(|source| FormatError::Io { path: path.display().to_string(), source })
}

/// Writes via a sibling temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let io = |source| FormatError::Io { path: path.display().to_string(), source };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    std::fs::write(&tmp, bytes).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn encode_paths(batch: &PathBatch) -> Vec<u8> {
    let n = batch.steps();
    let mut out = Vec::with_capacity(64 + 8 * (batch.states.len() + batch.increments.len()) + 4 * batch.paths);
    out.extend_from_slice(PATHS_MAGIC);
    out.extend_from_slice(&(batch.d as u32).to_le_bytes());
    out.extend_from_slice(&(batch.d as u32).to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(batch.paths as u64).to_le_bytes());
    out.extend_from_slice(&batch.grid.horizon.to_le_bytes());
    out.extend_from_slice(&batch.seed.to_le_bytes());
    out.extend_from_slice(&batch.problem_code.to_le_bytes());
    put_f64s(&mut out, &batch.grid.nodes);
    for i in &batch.start_indices {
        out.extend_from_slice(&i.to_le_bytes());
    }
    put_f64s(&mut out, &batch.states);
    put_f64s(&mut out, &batch.increments);
    out
}

pub fn decode_paths(bytes: &[u8]) -> Result<PathBatch, FormatError> {
    let mut r = Reader { data: bytes, at: 0 };
    if r.take(8)? != PATHS_MAGIC {
        return Err(FormatError::BadMagic("path cache"));
    }
    let d = r.u32()? as usize;
    let q = r.u32()? as usize;
    let n = r.u32()? as usize;
    let m = usize_of(r.u64()?, "path count")?;
    let horizon = r.f64()?;
    let seed = r.u64()?;
    let problem_code = r.u32()?;
    if q != d {
        return Err(mismatch("q", d, q));
    }
    if n == 0 || d == 0 || m == 0 {
        return Err(FormatError::Corrupt("empty dimensions".into()));
    }
    let nodes = r.f64s(n + 1)?;
    let start_indices = r.u32s(m)?;
    let states = r.f64s(m * (n + 1) * d)?;
    let increments = r.f64s(m * n * q)?;
    r.finish()?;
    let steps: Vec<f64> = nodes.windows(2).map(|w| w[1] - w[0]).collect();
    if nodes[0] != 0.0 || nodes[n] != horizon || steps.iter().any(|s| !(*s > 0.0)) {
        return Err(FormatError::Corrupt("time grid is not increasing from 0 to T".into()));
    }
    Ok(PathBatch {
        grid: TimeGrid { horizon, nodes, steps },
        d,
        paths: m,
        seed,
        problem_code,
        start_indices,
        states,
        increments,
    })
}

pub fn save_paths(batch: &PathBatch, path: &Path) -> Result<(), FormatError> {
    write_atomic(path, &encode_paths(batch))
}

pub fn load_paths(path: &Path) -> Result<PathBatch, FormatError> {
    decode_paths(&read_file(path)?)
}

/// What a caller expects a cached batch to contain.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRequest {
    pub problem_code: u32,
    pub d: usize,
    pub steps: usize,
    pub paths: usize,
    pub horizon: f64,
    pub seed: u64,
}

impl PathRequest {
    pub fn check(&self, batch: &PathBatch) -> Result<(), FormatError> {
        if batch.problem_code != self.problem_code {
            return Err(mismatch("problem id", self.problem_code, batch.problem_code));
        }
        if batch.d != self.d {
            return Err(mismatch("d", self.d, batch.d));
        }
        if batch.steps() != self.steps {
            return Err(mismatch("N", self.steps, batch.steps()));
        }
        if batch.paths != self.paths {
            return Err(mismatch("M", self.paths, batch.paths));
        }
        if batch.grid.horizon != self.horizon {
            return Err(mismatch("T", self.horizon, batch.grid.horizon));
        }
        if batch.seed != self.seed {
            return Err(mismatch("seed", self.seed, batch.seed));
        }
        Ok(())
    }
}

/// Header of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub problem_code: u32,
    pub arch: Architecture,
    pub seed: u64,
    pub horizon: f64,
}

pub fn encode_checkpoint(nets: &NetworkBundle, header: &CheckpointHeader) -> Vec<u8> {
    let a = &header.arch;
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    for v in [header.problem_code, a.d as u32, a.m as u32, a.width as u32, a.depth as u32, a.r as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(a.value_activation.code());
    out.push(a.control_activation.code());
    out.extend_from_slice(&header.seed.to_le_bytes());
    out.extend_from_slice(&header.horizon.to_le_bytes());
    let alpha: &[f64] = nets.control.as_ref().map_or(&[], |c| &c.params.data);
    let theta = &nets.value.params.data;
    let eta = &nets.test.params.data;
    for len in [theta.len(), alpha.len(), eta.len()] {
        out.extend_from_slice(&(len as u64).to_le_bytes());
    }
    put_f64s(&mut out, theta);
    put_f64s(&mut out, alpha);
    put_f64s(&mut out, eta);
    out
}

/// Rebuilds the networks for `problem`, rejecting checkpoints written for a
/// different problem or dimension.
pub fn decode_checkpoint(bytes: &[u8], problem: &ProblemSpec) -> Result<(NetworkBundle, CheckpointHeader), FormatError> {
    let mut r = Reader { data: bytes, at: 0 };
    if r.take(8)? != CKPT_MAGIC {
        return Err(FormatError::BadMagic("checkpoint"));
    }
    let problem_code = r.u32()?;
    let mut dims = [0usize; 5];
    for v in dims.iter_mut() {
        *v = r.u32()? as usize;
    }
    let [d, m, width, depth, rr] = dims;
    let act = |code: u8| Activation::from_code(code).ok_or_else(|| FormatError::Corrupt(format!("activation code {code}")));
    let value_activation = act(r.u8()?)?;
    let control_activation = act(r.u8()?)?;
    let seed = r.u64()?;
    let horizon = r.f64()?;
    let expected_code = problem.preset.map_or(0, |p| p.code());
    if problem_code != expected_code {
        return Err(mismatch("problem id", expected_code, problem_code));
    }
    if d != problem.d {
        return Err(mismatch("d", problem.d, d));
    }
    if m != problem.control_dim() {
        return Err(mismatch("m", problem.control_dim(), m));
    }
    if horizon != problem.horizon {
        return Err(mismatch("T", problem.horizon, horizon));
    }
    let arch = Architecture { d, m, width, depth, r: rr, value_activation, control_activation };
    let mut nets = init_networks(&arch, problem.terminal, problem.horizon, problem.control.clone(), seed)
        .map_err(|e| FormatError::Corrupt(e.to_string()))?;
    let lens = [usize_of(r.u64()?, "θ length")?, usize_of(r.u64()?, "α length")?, usize_of(r.u64()?, "η length")?];
    let alpha_len = nets.control.as_ref().map_or(0, |c| c.params.len());
    let expected = [nets.value.params.len(), alpha_len, nets.test.params.len()];
    for (i, name) in ["|θ|", "|α|", "|η|"].into_iter().enumerate() {
        if lens[i] != expected[i] {
            return Err(mismatch(name, expected[i], lens[i]));
        }
    }
    nets.value.params.data = r.f64s(lens[0])?;
    let alpha = r.f64s(lens[1])?;
    if let Some(c) = nets.control.as_mut() {
        c.params.data = alpha;
    }
    nets.test.params.data = r.f64s(lens[2])?;
    r.finish()?;
    Ok((nets, CheckpointHeader { problem_code, arch, seed, horizon }))
}

pub fn save_checkpoint(nets: &NetworkBundle, header: &CheckpointHeader, path: &Path) -> Result<(), FormatError> {
    write_atomic(path, &encode_checkpoint(nets, header))
}

pub fn load_checkpoint(path: &Path, problem: &ProblemSpec) -> Result<(NetworkBundle, CheckpointHeader), FormatError> {
    decode_checkpoint(&read_file(path)?, problem)
}

#[cfg(test)]
mod tests {
    use super::*;
    use martnet_core::problems::{make_problem, Preset};
    use martnet_core::sde::{build_start_set, simulate_paths};

    fn batch() -> (ProblemSpec, PathBatch) {
        let p = make_problem(Preset::Hjb1, 3, &[]).unwrap();
        let grid = TimeGrid::uniform(p.horizon, 5).unwrap();
        let start = build_start_set(&p.start, 3, 7, 0).unwrap();
        let b = simulate_paths(&p, &grid, &start, 9, 4).unwrap();
        (p, b)
    }

    #[test]
    fn paths_round_trip_bit_identically() {
        let (_, b) = batch();
        let bytes = encode_paths(&b);
        assert_eq!(bytes.len(), 8 + 4 * 3 + 8 + 8 + 8 + 4 + 8 * 6 + 4 * 9 + 8 * (9 * 6 * 3 + 9 * 5 * 3));
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        let back = decode_paths(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(encode_paths(&back), bytes);
    }

    #[test]
    fn damaged_path_files_are_rejected() {
        let (_, b) = batch();
        let bytes = encode_paths(&b);
        assert!(matches!(decode_paths(&bytes[..bytes.len() - 3]), Err(FormatError::Truncated { .. })));
        assert!(matches!(decode_paths(&bytes[..20]), Err(FormatError::Truncated { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_paths(&extra), Err(FormatError::Trailing { trailing: 1 })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_paths(&bad), Err(FormatError::BadMagic(_))));
    }

    #[test]
    fn header_checks_name_the_field() {
        let (p, b) = batch();
        let req = PathRequest { problem_code: p.preset.unwrap().code(), d: 3, steps: 5, paths: 9, horizon: p.horizon, seed: 4 };
        req.check(&b).unwrap();
        let e = PathRequest { d: 4, ..req.clone() }.check(&b).unwrap_err();
        assert!(matches!(e, FormatError::Mismatch { field: "d", .. }));
        let e = PathRequest { steps: 6, ..req }.check(&b).unwrap_err();
        assert!(matches!(e, FormatError::Mismatch { field: "N", .. }));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (p, _) = batch();
        let mut arch = Architecture::standard(3, 3, 4);
        arch.width = 5;
        arch.depth = 2;
        let mut nets = init_networks(&arch, p.terminal, p.horizon, p.control.clone(), 8).unwrap();
        nets.value.params.data[0] = 0.125;
        nets.test.params.data[3] = -7.5;
        let header = CheckpointHeader { problem_code: p.preset.unwrap().code(), arch: arch.clone(), seed: 8, horizon: p.horizon };
        let bytes = encode_checkpoint(&nets, &header);
        let (back, h) = decode_checkpoint(&bytes, &p).unwrap();
        assert_eq!(back, nets);
        assert_eq!(h, header);
        let other = make_problem(Preset::Hjb1, 4, &[]).unwrap();
        assert!(matches!(decode_checkpoint(&bytes, &other), Err(FormatError::Mismatch { field: "d", .. })));
        let lin = make_problem(Preset::Linear, 3, &[]).unwrap();
        assert!(matches!(decode_checkpoint(&bytes, &lin), Err(FormatError::Mismatch { field: "problem id", .. })));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 8], &p), Err(FormatError::Truncated { .. })));
    }
}
