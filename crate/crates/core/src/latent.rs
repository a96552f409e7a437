//! Latent-mean extraction from the VAE branch and a 2-D PCA projection for
//! inspection. The CSV export lets any external projector be used instead.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::data::{window_samples, Dataset};
use crate::dct::{pad_replicate, DctBasis};
use crate::error::{Error, Result};
use crate::model::HybridModel;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LatentRecord {
    pub id: String,
    pub label: String,
    /// Flattened `μ_z`, length `K · n_z`.
    pub z: Vec<f64>,
}

/// `μ_z` for every window of every sequence, in dataset order. Ids are
/// `<subject>/<action>_<trial>#<window>`.
pub fn extract_latents(
    model: &HybridModel,
    dataset: &Dataset,
    observed: usize,
    future: usize,
    stride: usize,
) -> Result<Vec<LatentRecord>> {
    if !model.has_vae() {
        return Err(Error::MissingVaeBranch);
    }
    let basis = DctBasis::new(model.config().gcn.dct_coeffs, observed + future)?;
    let mut records = Vec::new();
    for seq in &dataset.sequences {
        let windows = window_samples(seq, observed, future, stride)?;
        let inputs = windows
            .iter()
            .map(|w| basis.encode(pad_replicate(&w.observed_part(), future)?.data()))
            .collect::<Result<Vec<_>>>()?;
        let mut offset = 0;
        for chunk in inputs.chunks(128) {
            let mu = model.latent_means(&Tensor::stack(chunk)?)?;
            let width = mu.cols();
            for (i, row) in mu.data().chunks(width).enumerate() {
                records.push(LatentRecord {
                    id: format!("{}/{}_{}#{}", seq.subject, seq.action, seq.trial, offset + i),
                    label: seq.action.clone(),
                    z: row.to_vec(),
                });
            }
            offset += chunk.len();
        }
    }
    Ok(records)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedPoint {
    pub id: String,
    pub label: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub points: Vec<ProjectedPoint>,
    /// Variance along the two components, largest first.
    pub explained_variance: [f64; 2],
    /// Sum of per-dimension variances of the input.
    pub total_variance: f64,
}

/// Mean-centred projection onto the top two eigenvectors of the covariance.
/// Each component's sign is fixed so its first non-zero loading is positive.
pub fn project_pca_2d(records: &[LatentRecord]) -> Result<Projection> {
    if records.len() < 3 {
        return Err(Error::invalid(format!("PCA needs at least 3 records, got {}", records.len())));
    }
    let d = records[0].z.len();
    if d < 2 || records.iter().any(|r| r.z.len() != d) {
        return Err(Error::invalid("latent vectors must share a length of at least 2"));
    }
    let n = records.len();
    let mut mean = vec![0.0; d];
    for r in records {
        for (m, v) in mean.iter_mut().zip(&r.z) {
            *m += v / n as f64;
        }
    }
    let centred = DMatrix::from_fn(n, d, |i, j| records[i].z[j] - mean[j]);
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    let total_variance = cov.trace();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let component = |k: usize| {
        let mut v: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        v
    };
    let (c1, c2) = (component(0), component(1));
    let points = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let row = centred.row(i);
            ProjectedPoint {
                id: r.id.clone(),
                label: r.label.clone(),
                x: row.iter().zip(&c1).map(|(a, b)| a * b).sum(),
                y: row.iter().zip(&c2).map(|(a, b)| a * b).sum(),
            }
        })
        .collect();
    Ok(Projection {
        points,
        explained_variance: [eig.eigenvalues[order[0]].max(0.0), eig.eigenvalues[order[1]].max(0.0)],
        total_variance,
    })
}

fn write_file(path: &Path, text: String) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `id,label,z_0,…,z_{D−1}` with round-trip float formatting.
pub fn export_latents_csv(records: &[LatentRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::invalid("no latent records to export"));
    }
    let d = records[0].z.len();
    let mut s = String::from("id,label");
    for j in 0..d {
        write!(s, ",z_{j}").expect("string write");
    }
    s.push('\n');
    for r in records {
        write!(s, "{},{}", r.id, r.label).expect("string write");
        for v in &r.z {
            write!(s, ",{v:?}").expect("string write");
        }
        s.push('\n');
    }
    write_file(path, s)
}

pub fn read_latents_csv(path: &Path) -> Result<Vec<LatentRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse { path: path.into(), line: 1, msg: "empty file".into() })?;
    let width = header.split(',').count();
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let err = |msg: &str| Error::Parse { path: path.into(), line: i + 2, msg: msg.into() };
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != width {
                return Err(err("field count differs from header"));
            }
            let z = f[2..].iter().map(|v| v.parse::<f64>().map_err(|_| err("non-numeric latent"))).collect::<Result<_>>()?;
            Ok(LatentRecord { id: f[0].into(), label: f[1].into(), z })
        })
        .collect()
}

/// `id,label,x,y`.
pub fn export_projection_csv(p: &Projection, path: &Path) -> Result<()> {
    let mut s = String::from("id,label,x,y\n");
    for pt in &p.points {
        writeln!(s, "{},{},{:?},{:?}", pt.id, pt.label, pt.x, pt.y).expect("string write");
    }
    write_file(path, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(i: usize, z: Vec<f64>) -> LatentRecord {
        LatentRecord { id: format!("r{i}"), label: "a".into(), z }
    }

    fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
        ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
    }

    #[test]
    fn planar_cloud_keeps_pairwise_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // orthonormal basis of a tilted plane in 3-D
        let u = [1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt(), 0.0];
        let v = [1.0 / 6f64.sqrt(), -1.0 / 6f64.sqrt(), 2.0 / 6f64.sqrt()];
        let records: Vec<_> = (0..30)
            .map(|i| {
                let (a, b) = (3.0 * rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                rec(i, (0..3).map(|k| 5.0 + a * u[k] + b * v[k]).collect())
            })
            .collect();
        let p = project_pca_2d(&records).unwrap();
        for i in 0..30 {
            for j in 0..30 {
                let orig: f64 = records[i].z.iter().zip(&records[j].z).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let proj = dist((p.points[i].x, p.points[i].y), (p.points[j].x, p.points[j].y));
                assert!((orig - proj).abs() < 1e-8);
            }
        }
        assert!(p.explained_variance[0] >= p.explained_variance[1]);
        assert!((p.explained_variance[0] + p.explained_variance[1] - p.total_variance).abs() < 1e-9);
    }

    #[test]
    fn two_dimensional_data_is_recovered_up_to_rotation() {
        let records: Vec<_> = [(0.0, 0.0), (4.0, 1.0), (-1.0, 3.0), (2.0, -2.0)]
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| rec(i, vec![a, b]))
            .collect();
        let p = project_pca_2d(&records).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let o = dist((records[i].z[0], records[i].z[1]), (records[j].z[0], records[j].z[1]));
                let q = dist((p.points[i].x, p.points[i].y), (p.points[j].x, p.points[j].y));
                assert!((o - q).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn projection_variance_bounded_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let records: Vec<_> = (0..40).map(|i| rec(i, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
        let p = project_pca_2d(&records).unwrap();
        assert!(p.explained_variance.iter().sum::<f64>() <= p.total_variance + 1e-12);
        assert_eq!(p, project_pca_2d(&records).unwrap());
        assert!(project_pca_2d(&records[..2]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.csv");
        let records = vec![rec(0, vec![0.1, -2.5e-17, 3.0]), rec(1, vec![1.0 / 3.0, 2.0, f64::MIN_POSITIVE])];
        export_latents_csv(&records, &path).unwrap();
        let header = fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
        assert_eq!(header.split(',').count(), 3 + 2);
        assert_eq!(read_latents_csv(&path).unwrap(), records);
        assert!(export_latents_csv(&[], &path).is_err());
    }
}
