//! Embedding analysis: harvest adapted user embeddings across users, project
//! them to 2-D and quantify how well users separate.

pub mod pca;
pub mod tsne;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor};
use crate::data::{sample_batch, MetaDataset};
use crate::error::{Error, Result};
use crate::exec;
use crate::meta::proposed::adapt_ue;
use crate::meta::TrainedModel;
use crate::model::net::{self, BatchNodes};
use crate::seeds;

pub use pca::pca_project;
pub use tsne::{tsne_project, TsneParams};

const EMBED_STREAM: u64 = 0x656d_6264;

/// One harvested embedding: which user and batch produced it, the adapted
/// vector, and its 2-D projection once a projection ran.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub user_id: usize,
    pub batch_index: usize,
    pub phi: Vec<f64>,
    pub projection: Option<[f64; 2]>,
}

/// For each user and batch draw: UE initialization (zero vector for kinds
/// without the initialization network) followed by UE adaptation, recording
/// the adapted embedding. The shared parameters are never touched.
pub fn collect_embeddings(
    model: &TrainedModel,
    data: &MetaDataset,
    batches_per_user: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<EmbeddingRecord>> {
    if !model.kind.uses_embedding() {
        return Err(Error::NoEmbeddings(model.kind.name().to_string()));
    }
    let params = model
        .params
        .as_ref()
        .ok_or_else(|| Error::Config(format!("{} model has no parameters", model.kind)))?;
    let hyper = &model.hyper;

    let per_user: Vec<Result<Vec<EmbeddingRecord>>> = exec::map_indexed(data.n_users(), |ui| {
        let user = &data.users[ui];
        let mut records = Vec::with_capacity(batches_per_user);
        for batch_index in 0..batches_per_user {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(&[
                seed,
                EMBED_STREAM,
                user.user_id as u64,
                batch_index as u64,
            ]));
            let support = sample_batch(user, batch_size, &mut rng)?;
            let mut g = Graph::new();
            let theta = params.insert(&mut g);
            let spt = BatchNodes::insert(&mut g, &support);
            let phi0 = if model.kind.uses_init_net() {
                net::init_embedding(&mut g, &theta, &spt)?
            } else {
                g.leaf(Tensor::zeros(&[1, params.config.embed]))
            };
            let (phi, _) = adapt_ue(
                &mut g,
                &theta,
                phi0,
                &spt,
                hyper.alpha_eval,
                hyper.decay,
                hyper.adapt_steps,
                false,
            )?;
            records.push(EmbeddingRecord {
                user_id: user.user_id,
                batch_index,
                phi: g.value(phi).data().to_vec(),
                projection: None,
            });
        }
        Ok(records)
    });

    let mut out = Vec::with_capacity(data.n_users() * batches_per_user);
    for r in per_user {
        out.extend(r?);
    }
    Ok(out)
}

/// 2-D projection method for [`project`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionMethod {
    Pca,
    Tsne,
}

impl ProjectionMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(ProjectionMethod::Pca),
            "tsne" => Ok(ProjectionMethod::Tsne),
            other => Err(Error::Config(format!("unknown projection method '{}'", other))),
        }
    }
}

/// Project the records' embeddings to 2-D, filling their `projection` field.
pub fn project(
    records: &mut [EmbeddingRecord],
    method: ProjectionMethod,
    tsne_params: &TsneParams,
    seed: u64,
) -> Result<()> {
    let matrix: Vec<Vec<f64>> = records.iter().map(|r| r.phi.clone()).collect();
    let points = match method {
        ProjectionMethod::Pca => pca_project(&matrix)?,
        ProjectionMethod::Tsne => tsne_project(&matrix, tsne_params, seed)?,
    };
    for (r, p) in records.iter_mut().zip(points) {
        r.projection = Some(p);
    }
    Ok(())
}

/// Mean silhouette of points under integer labels, in [-1, 1]. Singleton
/// clusters score 0; a point equidistant from its own and the nearest other
/// cluster (including the all-identical case) scores 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "silhouette",
            detail: format!("{} points vs {} labels", points.len(), labels.len()),
        });
    }
    if points.is_empty() {
        return Err(Error::EmptyBatch("silhouette"));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::DegenerateInput("silhouette needs at least two labels"));
    }

    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let counts: std::collections::BTreeMap<usize, usize> =
        classes.iter().map(|&c| (c, labels.iter().filter(|&&l| l == c).count())).collect();

    let mut total = 0.0;
    for (i, (p, &l)) in points.iter().zip(labels).enumerate() {
        if counts[&l] == 1 {
            continue; // singleton: contributes 0
        }
        let mut within = 0.0;
        let mut nearest_other = f64::INFINITY;
        for &c in &classes {
            if c == l {
                for (j, (q, &m)) in points.iter().zip(labels).enumerate() {
                    if m == l && j != i {
                        within += dist(p, q);
                    }
                }
                within /= (counts[&l] - 1) as f64;
            } else {
                let mut acc = 0.0;
                for (q, &m) in points.iter().zip(labels) {
                    if m == c {
                        acc += dist(p, q);
                    }
                }
                nearest_other = nearest_other.min(acc / counts[&c] as f64);
            }
        }
        let denom = within.max(nearest_other);
        if denom > 0.0 {
            total += (nearest_other - within) / denom;
        }
    }
    Ok(total / points.len() as f64)
}

// ── CSV I/O ─────────────────────────────────────────────────────────

pub fn write_embeddings_csv(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::EmptyBatch("write_embeddings_csv"));
    }
    let s = records[0].phi.len();
    let mut out = String::new();
    out.push_str("user_id,batch");
    for i in 0..s {
        out.push_str(&format!(",phi{}", i));
    }
    out.push('\n');
    for r in records {
        out.push_str(&format!("{},{}", r.user_id, r.batch_index));
        for v in &r.phi {
            out.push_str(&format!(",{:.17e}", v));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_embeddings_csv(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let text = std::fs::read_to_string(path)?;
    let bad = |detail: String| Error::Format { path: path.display().to_string(), detail };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".to_string()))?;
    let cols = header.split(',').count();
    if cols < 3 {
        return Err(bad("expected user_id,batch,phi... columns".to_string()));
    }
    let mut records = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(bad(format!("line {}: {} fields, expected {}", ln + 2, fields.len(), cols)));
        }
        let parse_err = |e: std::num::ParseFloatError| bad(format!("line {}: {}", ln + 2, e));
        records.push(EmbeddingRecord {
            user_id: fields[0].parse().map_err(|_| bad(format!("line {}: bad user id", ln + 2)))?,
            batch_index: fields[1].parse().map_err(|_| bad(format!("line {}: bad batch", ln + 2)))?,
            phi: fields[2..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(parse_err))
                .collect::<Result<Vec<f64>>>()?,
            projection: None,
        });
    }
    Ok(records)
}

pub fn write_points_csv(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let mut out = String::from("user_id,batch,px,py\n");
    for r in records {
        let p = r
            .projection
            .ok_or_else(|| Error::Config("record has no projection yet".to_string()))?;
        out.push_str(&format!("{},{},{:.17e},{:.17e}\n", r.user_id, r.batch_index, p[0], p[1]));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silhouette_on_tight_far_clusters_is_high() {
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            points.push(vec![0.0 + 0.001 * i as f64, 0.0]);
            labels.push(0);
            points.push(vec![100.0 + 0.001 * i as f64, 0.0]);
            labels.push(1);
        }
        let s = silhouette(&points, &labels).unwrap();
        assert!(s > 0.9, "{}", s);
    }

    #[test]
    fn silhouette_of_identical_points_is_zero() {
        let points = vec![vec![1.0, 2.0]; 6];
        let labels = vec![0, 0, 0, 1, 1, 1];
        assert_eq!(silhouette(&points, &labels).unwrap(), 0.0);
    }

    #[test]
    fn silhouette_matches_hand_computation() {
        // 6 points on a line, labels {0: x=0,1,2} {1: x=10,11,12}
        let xs = [0.0, 1.0, 2.0, 10.0, 11.0, 12.0];
        let points: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        let labels = vec![0, 0, 0, 1, 1, 1];
        let expect: f64 = {
            let mut acc = 0.0;
            for i in 0..6 {
                let own: Vec<usize> = (0..6).filter(|&j| labels[j] == labels[i] && j != i).collect();
                let other: Vec<usize> = (0..6).filter(|&j| labels[j] != labels[i]).collect();
                let a: f64 =
                    own.iter().map(|&j| (xs[i] - xs[j]).abs()).sum::<f64>() / own.len() as f64;
                let b: f64 =
                    other.iter().map(|&j| (xs[i] - xs[j]).abs()).sum::<f64>() / other.len() as f64;
                acc += (b - a) / a.max(b);
            }
            acc / 6.0
        };
        let got = silhouette(&points, &labels).unwrap();
        assert!((got - expect).abs() < 1e-12, "{} vs {}", got, expect);
    }

    #[test]
    fn silhouette_is_invariant_to_rotation_and_scaling() {
        let points: Vec<Vec<f64>> = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.2],
            vec![0.2, 0.9],
            vec![5.0, 5.0],
            vec![5.8, 5.2],
            vec![5.1, 6.0],
        ];
        let labels = vec![0, 0, 0, 1, 1, 1];
        let base = silhouette(&points, &labels).unwrap();
        let theta: f64 = 0.83;
        let transformed: Vec<Vec<f64>> = points
            .iter()
            .map(|p| {
                let (x, y) = (p[0], p[1]);
                vec![
                    3.5 * (x * theta.cos() - y * theta.sin()),
                    3.5 * (x * theta.sin() + y * theta.cos()),
                ]
            })
            .collect();
        let rotated = silhouette(&transformed, &labels).unwrap();
        assert!((base - rotated).abs() < 1e-12);
    }

    #[test]
    fn single_label_is_an_error() {
        let points = vec![vec![0.0], vec![1.0]];
        assert!(silhouette(&points, &[0, 0]).is_err());
    }

    #[test]
    fn embeddings_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        let records = vec![
            EmbeddingRecord { user_id: 0, batch_index: 0, phi: vec![0.25, -1.5], projection: None },
            EmbeddingRecord { user_id: 3, batch_index: 7, phi: vec![1e-8, 42.0], projection: None },
        ];
        write_embeddings_csv(&path, &records).unwrap();
        let loaded = read_embeddings_csv(&path).unwrap();
        assert_eq!(loaded, records);
    }
}
