//! Interaction samples, per-user datasets and batching.
//!
//! One sample is a single timestep of a user-robot interaction:
//! task state `x_s`, robot action `x_r`, human action `x_h` and the next
//! human action `y`. Per-user files are binary (f32 records, see
//! [`save_user`]) with an optional CSV export for inspection.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"UAMPDATA";

/// Dimensionalities of the sample fields. `x_h` and `y` share the action
/// dimension by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub state: usize,
    pub robot: usize,
    pub action: usize,
}

impl Dims {
    /// 12-D state (2-D position + velocity for both paddles and the puck),
    /// 2-D robot force, 2-D human action.
    pub fn default_hockey() -> Self {
        Dims { state: 12, robot: 2, action: 2 }
    }
}

/// One timestep record of a user-robot interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionSample {
    pub x_s: Vec<f64>,
    pub x_r: Vec<f64>,
    pub x_h: Vec<f64>,
    pub y: Vec<f64>,
    pub episode_id: u32,
    pub timestep: u32,
}

impl InteractionSample {
    pub fn validate(&self, dims: Dims) -> Result<()> {
        if self.x_s.len() != dims.state
            || self.x_r.len() != dims.robot
            || self.x_h.len() != dims.action
            || self.y.len() != dims.action
        {
            return Err(Error::ShapeMismatch {
                op: "InteractionSample",
                detail: format!(
                    "dims {:?} vs lens ({},{},{},{})",
                    dims,
                    self.x_s.len(),
                    self.x_r.len(),
                    self.x_h.len(),
                    self.y.len()
                ),
            });
        }
        let all = self.x_s.iter().chain(&self.x_r).chain(&self.x_h).chain(&self.y);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "InteractionSample".to_string() });
        }
        Ok(())
    }
}

/// Episode-structured data of a single user.
#[derive(Debug, Clone)]
pub struct UserDataset {
    pub user_id: usize,
    pub dims: Dims,
    pub samples: Vec<InteractionSample>,
}

impl UserDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn episode_ids(&self) -> BTreeSet<u32> {
        self.samples.iter().map(|s| s.episode_id).collect()
    }

    pub fn n_episodes(&self) -> usize {
        self.episode_ids().len()
    }
}

/// A collection of user datasets (a meta-train or meta-test pool).
#[derive(Debug, Clone, Default)]
pub struct MetaDataset {
    pub users: Vec<UserDataset>,
}

impl MetaDataset {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn by_ids(&self, ids: &[usize]) -> MetaDataset {
        let users = ids
            .iter()
            .map(|&id| {
                self.users
                    .iter()
                    .find(|u| u.user_id == id)
                    .unwrap_or_else(|| panic!("user {} not in meta-dataset", id))
                    .clone()
            })
            .collect();
        MetaDataset { users }
    }
}

/// A batch of samples packed into rank-2 tensors, one row per sample.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x_s: Tensor,
    pub x_r: Tensor,
    pub x_h: Tensor,
    pub y: Tensor,
}

impl Batch {
    pub fn from_samples(samples: &[&InteractionSample], dims: Dims) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyBatch("Batch::from_samples"));
        }
        let n = samples.len();
        let mut xs = Vec::with_capacity(n * dims.state);
        let mut xr = Vec::with_capacity(n * dims.robot);
        let mut xh = Vec::with_capacity(n * dims.action);
        let mut y = Vec::with_capacity(n * dims.action);
        for s in samples {
            s.validate(dims)?;
            xs.extend_from_slice(&s.x_s);
            xr.extend_from_slice(&s.x_r);
            xh.extend_from_slice(&s.x_h);
            y.extend_from_slice(&s.y);
        }
        Ok(Batch {
            x_s: Tensor::new(vec![n, dims.state], xs)?,
            x_r: Tensor::new(vec![n, dims.robot], xr)?,
            x_h: Tensor::new(vec![n, dims.action], xh)?,
            y: Tensor::new(vec![n, dims.action], y)?,
        })
    }

    pub fn len(&self) -> usize {
        self.x_s.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Disjoint support/query batches for one user.
#[derive(Debug, Clone)]
pub struct SupportQueryBatch {
    pub user_id: usize,
    pub support: Batch,
    pub query: Batch,
}

/// Draw `b` samples uniformly without replacement (with replacement when the
/// user has fewer than `b`).
pub fn sample_batch(ds: &UserDataset, b: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    if ds.is_empty() {
        return Err(Error::EmptyBatch("sample_batch"));
    }
    let n = ds.len();
    let idx: Vec<usize> = if n >= b {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(rng);
        all.truncate(b);
        all
    } else {
        warn_small_dataset(ds.user_id, n, b);
        (0..b).map(|_| rng.gen_range(0..n)).collect()
    };
    let samples: Vec<&InteractionSample> = idx.iter().map(|&i| &ds.samples[i]).collect();
    Batch::from_samples(&samples, ds.dims)
}

/// Draw disjoint support and query index sets uniformly from the whole user
/// dataset (the training-time sampling regime). Falls back to sampling with
/// replacement when the user has fewer than `2b` samples.
pub fn sample_support_query(
    ds: &UserDataset,
    b: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SupportQueryBatch> {
    if ds.is_empty() {
        return Err(Error::EmptyBatch("sample_support_query"));
    }
    let n = ds.len();
    let (spt_idx, qry_idx) = if n >= 2 * b {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        (idx[..b].to_vec(), idx[b..2 * b].to_vec())
    } else {
        warn_small_dataset(ds.user_id, n, 2 * b);
        let spt = (0..b).map(|_| rng.gen_range(0..n)).collect();
        let qry = (0..b).map(|_| rng.gen_range(0..n)).collect();
        (spt, qry)
    };
    let spt: Vec<&InteractionSample> = spt_idx.iter().map(|&i| &ds.samples[i]).collect();
    let qry: Vec<&InteractionSample> = qry_idx.iter().map(|&i| &ds.samples[i]).collect();
    Ok(SupportQueryBatch {
        user_id: ds.user_id,
        support: Batch::from_samples(&spt, ds.dims)?,
        query: Batch::from_samples(&qry, ds.dims)?,
    })
}

/// Draw support and query from disjoint episode sets (the evaluation regime:
/// adapting on an episode must never see query data from the same episode).
/// Returns the batch plus the two episode-id sets for protocol assertions.
pub fn sample_episode_split(
    ds: &UserDataset,
    b: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(SupportQueryBatch, BTreeSet<u32>, BTreeSet<u32>)> {
    let episodes: Vec<u32> = ds.episode_ids().into_iter().collect();
    if episodes.len() < 2 {
        return Err(Error::InsufficientEpisodes {
            user: ds.user_id,
            needed: 2,
            got: episodes.len(),
        });
    }
    let mut shuffled = episodes.clone();
    shuffled.shuffle(rng);
    let cut = shuffled.len() / 2;
    let spt_eps: BTreeSet<u32> = shuffled[..cut.max(1)].iter().copied().collect();
    let qry_eps: BTreeSet<u32> = shuffled[cut.max(1)..].iter().copied().collect();
    assert!(
        spt_eps.is_disjoint(&qry_eps) && !qry_eps.is_empty(),
        "episode split produced overlapping or empty sets"
    );

    let draw = |pool: &BTreeSet<u32>, rng: &mut ChaCha8Rng| -> Vec<usize> {
        let idx: Vec<usize> = ds
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| pool.contains(&s.episode_id))
            .map(|(i, _)| i)
            .collect();
        if idx.len() >= b {
            let mut shuffled = idx;
            shuffled.shuffle(rng);
            shuffled.truncate(b);
            shuffled
        } else {
            warn_small_dataset(ds.user_id, idx.len(), b);
            (0..b).map(|_| idx[rng.gen_range(0..idx.len())]).collect()
        }
    };
    let spt_idx = draw(&spt_eps, rng);
    let qry_idx = draw(&qry_eps, rng);
    let spt: Vec<&InteractionSample> = spt_idx.iter().map(|&i| &ds.samples[i]).collect();
    let qry: Vec<&InteractionSample> = qry_idx.iter().map(|&i| &ds.samples[i]).collect();
    let batch = SupportQueryBatch {
        user_id: ds.user_id,
        support: Batch::from_samples(&spt, ds.dims)?,
        query: Batch::from_samples(&qry, ds.dims)?,
    };
    Ok((batch, spt_eps, qry_eps))
}

fn warn_small_dataset(user: usize, have: usize, want: usize) {
    use std::sync::atomic::{AtomicBool, Ordering};
    static WARNED: AtomicBool = AtomicBool::new(false);
    if !WARNED.swap(true, Ordering::Relaxed) {
        eprintln!(
            "warning: user {} has {} samples, fewer than the {} requested; sampling with replacement",
            user, have, want
        );
    }
}

// ── per-user binary files ───────────────────────────────────────────

pub fn user_file_name(user_id: usize) -> String {
    format!("user_{:03}.bin", user_id)
}

/// Write one user's samples. Header: magic, dims of x_s/x_r/x_h/y (u32),
/// sample count (u32), episode count (u32); then per sample the field
/// values as little-endian f32 followed by episode-id and timestep as u32.
pub fn save_user(dir: &Path, ds: &UserDataset) -> Result<PathBuf> {
    let path = dir.join(user_file_name(ds.user_id));
    let mut w = BufWriter::new(File::create(&path)?);
    w.write_all(MAGIC)?;
    for d in [ds.dims.state, ds.dims.robot, ds.dims.action, ds.dims.action] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&(ds.samples.len() as u32).to_le_bytes())?;
    w.write_all(&(ds.n_episodes() as u32).to_le_bytes())?;
    for s in &ds.samples {
        for v in s.x_s.iter().chain(&s.x_r).chain(&s.x_h).chain(&s.y) {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        w.write_all(&s.episode_id.to_le_bytes())?;
        w.write_all(&s.timestep.to_le_bytes())?;
    }
    w.flush()?;
    Ok(path)
}

pub fn load_user(path: &Path, user_id: usize) -> Result<UserDataset> {
    let mut r = BufReader::new(File::open(path)?);
    let bad = |detail: &str| Error::Format { path: path.display().to_string(), detail: detail.to_string() };

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = read_u32(&mut r)? as usize;
    }
    if dims[2] != dims[3] {
        return Err(bad("x_h and y dimensions differ"));
    }
    let n = read_u32(&mut r)? as usize;
    let n_episodes = read_u32(&mut r)? as usize;
    let dims = Dims { state: dims[0], robot: dims[1], action: dims[2] };

    let mut samples = Vec::with_capacity(n);
    let read_vec = |r: &mut BufReader<File>, len: usize| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(len);
        let mut buf = [0u8; 4];
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            out.push(f32::from_le_bytes(buf) as f64);
        }
        Ok(out)
    };
    for _ in 0..n {
        let x_s = read_vec(&mut r, dims.state)?;
        let x_r = read_vec(&mut r, dims.robot)?;
        let x_h = read_vec(&mut r, dims.action)?;
        let y = read_vec(&mut r, dims.action)?;
        let episode_id = read_u32(&mut r)?;
        let timestep = read_u32(&mut r)?;
        samples.push(InteractionSample { x_s, x_r, x_h, y, episode_id, timestep });
    }
    let ds = UserDataset { user_id, dims, samples };
    if ds.n_episodes() != n_episodes {
        return Err(bad(&format!(
            "header says {} episodes, file contains {}",
            n_episodes,
            ds.n_episodes()
        )));
    }
    Ok(ds)
}

/// Load every `user_*.bin` in a directory, ordered by user id.
pub fn load_meta_dataset(dir: &Path) -> Result<MetaDataset> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(rest) = name.strip_prefix("user_") {
            if let Some(num) = rest.strip_suffix(".bin") {
                if let Ok(id) = num.parse::<usize>() {
                    ids.push(id);
                }
            }
        }
    }
    if ids.is_empty() {
        return Err(Error::Config(format!("no user_*.bin files in {}", dir.display())));
    }
    ids.sort_unstable();
    let users = ids
        .into_iter()
        .map(|id| load_user(&dir.join(user_file_name(id)), id))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetaDataset { users })
}

pub fn export_user_csv(dir: &Path, ds: &UserDataset) -> Result<PathBuf> {
    let path = dir.join(format!("user_{:03}.csv", ds.user_id));
    let mut w = BufWriter::new(File::create(&path)?);
    let mut header = Vec::new();
    for i in 0..ds.dims.state {
        header.push(format!("xs{}", i));
    }
    for i in 0..ds.dims.robot {
        header.push(format!("xr{}", i));
    }
    for i in 0..ds.dims.action {
        header.push(format!("xh{}", i));
    }
    for i in 0..ds.dims.action {
        header.push(format!("y{}", i));
    }
    header.push("episode".to_string());
    header.push("timestep".to_string());
    writeln!(w, "{}", header.join(","))?;
    for s in &ds.samples {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        for v in s.x_s.iter().chain(&s.x_r).chain(&s.x_h).chain(&s.y) {
            row.push(format!("{:.9e}", v));
        }
        row.push(s.episode_id.to_string());
        row.push(s.timestep.to_string());
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(path)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
