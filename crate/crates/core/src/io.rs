//! On-disk formats. All integers and floats are little-endian.
//!
//! Matrix (`GSIG` for a graph signal, `GSHF` for a shift operator):
//!
//! ```text
//! magic[4] | version u32 | rows u64 | cols u64 | rows*cols f64, row-major
//! ```
//!
//! The CSV form has a `rows,cols` header line followed by one line per row.
//!
//! Checkpoint (`GNNCKPT1`):
//!
//! ```text
//! magic[8] | version u32 | kind u8 | sigma u8 | rho u8 | 0u8
//! | f_in u32 | hidden u32 | k u32 | f_out u32 | k_out u32
//! | count u64 | count f64   (filter by filter, tap by tap, row-major)
//! ```
//!
//! Trajectory (`FLKTRAJ1`):
//!
//! ```text
//! magic[8] | version u32 | N u32 | T u32 | T_s f64 | config hash u64
//! | failed u8 [| failure time u32 | reason len u32 | reason utf8]
//! | T step blocks | final state block
//! step block  = time u32 | positions N*2 f64 | velocities N*2 f64
//!             | edge count u32 | (i u32, j u32)* | F u32 | features N*F f64
//!             | actions N*2 f64 | cost f64
//! final block = time u32 | positions N*2 f64 | velocities N*2 f64
//! ```
//!
//! Dataset (`FLKDATA1`): `magic[8] | version u32 | config len u32 | config
//! key=value utf8 | train u32 | val u32 | test u32` followed by that many
//! trajectory containers.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::arch::{Activation, ArchHyper, ArchKind, ModelParams};
use crate::config::flocking_from_kv;
use crate::error::{Error, Result};
use crate::gsp::{GraphSignal, ShiftOperator};
use crate::sim::{Failure, FlockingConfig, SwarmState, Trajectory, TrajectoryStep};
use crate::train::{Dataset, LogRow};

const VERSION: u32 = 1;
const SIGNAL_MAGIC: &[u8; 4] = b"GSIG";
const SHIFT_MAGIC: &[u8; 4] = b"GSHF";
const CHECKPOINT_MAGIC: &[u8; 8] = b"GNNCKPT1";
const TRAJECTORY_MAGIC: &[u8; 8] = b"FLKTRAJ1";
const DATASET_MAGIC: &[u8; 8] = b"FLKDATA1";

/// Column set of the training log CSV.
pub const LOG_COLUMNS: [&str; 4] = ["step", "train_mse", "val_cost", "wall_time"];

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.0.write_all(b)?;
        Ok(())
    }
    fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn matrix(&mut self, a: &Array2<f64>) -> Result<()> {
        for v in a.iter() {
            self.f64(*v)?;
        }
        Ok(())
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.0.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.f64()?);
        }
        Ok(Array2::from_shape_vec((rows, cols), data).expect("length matches shape"))
    }
    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let mut buf = vec![0u8; len];
        self.0.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
    }
    fn magic<const N: usize>(&mut self, expected: &[u8; N]) -> Result<()> {
        let got = self.bytes::<N>()?;
        if &got != expected {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(expected)
            )));
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        Ok(())
    }
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = PathBuf::from(path);
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    tmp.set_file_name(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        f(&mut w)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn encode_matrix(magic: &[u8; 4], a: &Array2<f64>) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::with_capacity(24 + 8 * a.len()));
    w.bytes(magic)?;
    w.u32(VERSION)?;
    w.u64(a.nrows() as u64)?;
    w.u64(a.ncols() as u64)?;
    w.matrix(a)?;
    Ok(w.0)
}

fn decode_matrix(magic: &[u8; 4], bytes: &[u8]) -> Result<Array2<f64>> {
    let mut r = Reader(bytes);
    r.magic(magic)?;
    let rows = r.u64()? as usize;
    let cols = r.u64()? as usize;
    if bytes.len() != 24 + 8 * rows * cols {
        return Err(Error::Format(format!(
            "{rows}x{cols} matrix needs {} bytes, got {}",
            24 + 8 * rows * cols,
            bytes.len()
        )));
    }
    r.matrix(rows, cols)
}

pub fn encode_signal(x: &GraphSignal) -> Result<Vec<u8>> {
    encode_matrix(SIGNAL_MAGIC, x.data())
}

pub fn decode_signal(bytes: &[u8]) -> Result<GraphSignal> {
    GraphSignal::new(decode_matrix(SIGNAL_MAGIC, bytes)?)
}

pub fn encode_shift(s: &ShiftOperator) -> Result<Vec<u8>> {
    encode_matrix(SHIFT_MAGIC, s.matrix())
}

pub fn decode_shift(bytes: &[u8]) -> Result<ShiftOperator> {
    ShiftOperator::from_matrix(decode_matrix(SHIFT_MAGIC, bytes)?)
}

/// `rows,cols` header, then comma-separated rows.
pub fn matrix_to_csv(a: &Array2<f64>) -> String {
    let mut out = format!("{},{}\n", a.nrows(), a.ncols());
    for row in a.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn matrix_from_csv(text: &str) -> Result<Array2<f64>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Format("empty CSV".into()))?;
    let dims: Vec<usize> = header
        .split(',')
        .map(|v| v.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format(format!("bad header `{header}`: {e}")))?;
    let [rows, cols] = dims[..] else {
        return Err(Error::Format(format!("header `{header}` must be rows,cols")));
    };
    let mut data = Vec::with_capacity(rows * cols);
    for (i, line) in lines.enumerate() {
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("row {i}: {e}")))?;
        if vals.len() != cols {
            return Err(Error::Format(format!(
                "row {i} has {} values, expected {cols}",
                vals.len()
            )));
        }
        data.extend(vals);
    }
    if data.len() != rows * cols {
        return Err(Error::Format(format!("expected {rows} rows")));
    }
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
}

pub fn signal_to_csv(x: &GraphSignal) -> String {
    matrix_to_csv(x.data())
}

pub fn signal_from_csv(text: &str) -> Result<GraphSignal> {
    GraphSignal::new(matrix_from_csv(text)?)
}

pub fn shift_to_csv(s: &ShiftOperator) -> String {
    matrix_to_csv(s.matrix())
}

pub fn shift_from_csv(text: &str) -> Result<ShiftOperator> {
    ShiftOperator::from_matrix(matrix_from_csv(text)?)
}

pub fn encode_checkpoint(params: &ModelParams) -> Result<Vec<u8>> {
    let h = params.hyper();
    let flat = params.flatten();
    let mut w = Writer(Vec::with_capacity(48 + 8 * flat.len()));
    w.bytes(CHECKPOINT_MAGIC)?;
    w.u32(VERSION)?;
    w.u8(h.kind.code())?;
    w.u8(h.sigma.code())?;
    w.u8(h.rho.code())?;
    w.u8(0)?;
    for v in [h.f_in, h.hidden, h.k, h.f_out, h.k_out] {
        w.u32(v as u32)?;
    }
    w.u64(flat.len() as u64)?;
    for v in flat {
        w.f64(v)?;
    }
    Ok(w.0)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let kind = ArchKind::from_code(r.u8()?)?;
    let sigma = Activation::from_code(r.u8()?)?;
    let rho = Activation::from_code(r.u8()?)?;
    r.u8()?;
    let hyper = ArchHyper {
        kind,
        f_in: r.u32()? as usize,
        hidden: r.u32()? as usize,
        k: r.u32()? as usize,
        f_out: r.u32()? as usize,
        k_out: r.u32()? as usize,
        sigma,
        rho,
    };
    let count = r.u64()? as usize;
    if count != crate::arch::param_count(&hyper) {
        return Err(Error::Format(format!(
            "checkpoint holds {count} values but the architecture needs {}",
            crate::arch::param_count(&hyper)
        )));
    }
    let flat: Vec<f64> = (0..count).map(|_| r.f64()).collect::<Result<_>>()?;
    if !r.0.is_empty() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    ModelParams::from_flat(hyper, &flat)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let bytes = encode_checkpoint(params)?;
    write_atomic(path, |w| Ok(w.write_all(&bytes)?))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    decode_checkpoint(&fs::read(path)?)
}

/// One line per tap coefficient: `filter,tap,row,col,value`.
pub fn checkpoint_to_csv(params: &ModelParams) -> String {
    let mut out = String::from("filter,tap,row,col,value\n");
    for (fi, f) in params.filters().iter().enumerate() {
        for (k, tap) in f.taps().iter().enumerate() {
            for ((i, j), v) in tap.indexed_iter() {
                out.push_str(&format!("{fi},{k},{i},{j},{v:?}\n"));
            }
        }
    }
    out
}

fn write_state<W: Write>(w: &mut Writer<W>, s: &SwarmState) -> Result<()> {
    w.u32(s.time_index as u32)?;
    w.matrix(&s.positions)?;
    w.matrix(&s.velocities)
}

fn read_state<R: Read>(r: &mut Reader<R>, n: usize) -> Result<SwarmState> {
    let time_index = r.u32()? as usize;
    let positions = r.matrix(n, 2)?;
    let velocities = r.matrix(n, 2)?;
    let mut s = SwarmState::new(positions, velocities)?;
    s.time_index = time_index;
    Ok(s)
}

fn write_trajectory<W: Write>(w: &mut Writer<W>, traj: &Trajectory, config_hash: u64) -> Result<()> {
    let n = traj.agents();
    w.bytes(TRAJECTORY_MAGIC)?;
    w.u32(VERSION)?;
    w.u32(n as u32)?;
    w.u32(traj.len() as u32)?;
    w.f64(traj.sampling_time)?;
    w.u64(config_hash)?;
    match &traj.failure {
        None => w.u8(0)?,
        Some(f) => {
            w.u8(1)?;
            w.u32(f.time as u32)?;
            w.u32(f.reason.len() as u32)?;
            w.bytes(f.reason.as_bytes())?;
        }
    }
    for step in &traj.steps {
        write_state(w, &step.state)?;
        w.u32(step.edges.len() as u32)?;
        for &(i, j) in &step.edges {
            w.u32(i)?;
            w.u32(j)?;
        }
        w.u32(step.features.features() as u32)?;
        w.matrix(step.features.data())?;
        w.matrix(step.actions.data())?;
        w.f64(step.cost)?;
    }
    write_state(w, &traj.final_state)
}

fn read_trajectory<R: Read>(r: &mut Reader<R>) -> Result<(Trajectory, u64)> {
    r.magic(TRAJECTORY_MAGIC)?;
    let n = r.u32()? as usize;
    let len = r.u32()? as usize;
    let sampling_time = r.f64()?;
    let hash = r.u64()?;
    let failure = match r.u8()? {
        0 => None,
        1 => Some(Failure {
            time: r.u32()? as usize,
            reason: r.string()?,
        }),
        other => return Err(Error::Format(format!("bad failure flag {other}"))),
    };
    let mut steps = Vec::with_capacity(len);
    for _ in 0..len {
        let state = read_state(r, n)?;
        let edge_count = r.u32()? as usize;
        let mut edges = Vec::with_capacity(edge_count);
        for _ in 0..edge_count {
            let (i, j) = (r.u32()?, r.u32()?);
            if i as usize >= n || j as usize >= n || i >= j {
                return Err(Error::Format(format!("bad edge ({i}, {j})")));
            }
            edges.push((i, j));
        }
        let f = r.u32()? as usize;
        let features = GraphSignal::new(r.matrix(n, f)?)?;
        let actions = GraphSignal::new(r.matrix(n, 2)?)?;
        let cost = r.f64()?;
        steps.push(TrajectoryStep {
            state,
            edges,
            features,
            actions,
            cost,
        });
    }
    let final_state = read_state(r, n)?;
    Ok((
        Trajectory {
            sampling_time,
            steps,
            final_state,
            failure,
        },
        hash,
    ))
}

pub fn encode_trajectory(traj: &Trajectory, config_hash: u64) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    write_trajectory(&mut w, traj, config_hash)?;
    Ok(w.0)
}

/// Returns the trajectory and the configuration hash stored with it.
pub fn decode_trajectory(bytes: &[u8]) -> Result<(Trajectory, u64)> {
    let mut r = Reader(bytes);
    let out = read_trajectory(&mut r)?;
    if !r.0.is_empty() {
        return Err(Error::Format("trailing bytes after trajectory".into()));
    }
    Ok(out)
}

/// Per-step, per-agent table for plotting.
pub fn trajectory_to_csv(traj: &Trajectory) -> String {
    let mut out = String::from("t,agent,px,py,vx,vy,ux,uy,degree,x0,x1,x2,x3,x4,x5,cost\n");
    for (t, step) in traj.steps.iter().enumerate() {
        let mut degree = vec![0usize; step.state.agents()];
        for &(i, j) in &step.edges {
            degree[i as usize] += 1;
            degree[j as usize] += 1;
        }
        for i in 0..step.state.agents() {
            let s = &step.state;
            let x = step.features.data().row(i);
            let feats: Vec<String> = x.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&format!(
                "{t},{i},{:?},{:?},{:?},{:?},{:?},{:?},{},{},{:?}\n",
                s.positions[[i, 0]],
                s.positions[[i, 1]],
                s.velocities[[i, 0]],
                s.velocities[[i, 1]],
                step.actions.data()[[i, 0]],
                step.actions.data()[[i, 1]],
                degree[i],
                feats.join(","),
                step.cost
            ));
        }
    }
    out
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let hash = data.flocking.hash();
    write_atomic(path, |out| {
        let mut w = Writer(out);
        w.bytes(DATASET_MAGIC)?;
        w.u32(VERSION)?;
        let cfg = data.flocking.canonical();
        w.u32(cfg.len() as u32)?;
        w.bytes(cfg.as_bytes())?;
        for split in [&data.train, &data.validation, &data.test] {
            w.u32(split.len() as u32)?;
        }
        for traj in data.train.iter().chain(&data.validation).chain(&data.test) {
            write_trajectory(&mut w, traj, hash)?;
        }
        Ok(())
    })
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut r = Reader(BufReader::new(File::open(path)?));
    r.magic(DATASET_MAGIC)?;
    let flocking: FlockingConfig = flocking_from_kv(&r.string()?)?;
    let hash = flocking.hash();
    let counts = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let mut splits: Vec<Vec<Trajectory>> = Vec::with_capacity(3);
    for count in counts {
        let mut split = Vec::with_capacity(count);
        for _ in 0..count {
            let (traj, stored) = read_trajectory(&mut r)?;
            if stored != hash {
                return Err(Error::Format(
                    "trajectory was generated under a different configuration".into(),
                ));
            }
            split.push(traj);
        }
        splits.push(split);
    }
    let test = splits.pop().expect("three splits");
    let validation = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Dataset {
        flocking,
        train,
        validation,
        test,
    })
}

pub fn log_to_csv(log: &[LogRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(LOG_COLUMNS)?;
    for row in log {
        w.write_record([
            row.step.to_string(),
            format!("{:?}", row.train_mse),
            row.val_cost.map(|v| format!("{v:?}")).unwrap_or_default(),
            format!("{:.3}", row.wall_time),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf8"))
}
