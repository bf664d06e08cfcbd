use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{band_perturbation, psnr, Band, BandPartition};
use crate::error::{Error, Result};
use crate::trace::{mix_seed, ForwardEngine, VelocityField};

const TAG_LATENT: u64 = 0x4C_41_54;
const DECODED_PEAK: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRow {
    pub band: Band,
    pub alpha: f64,
    pub seed: u64,
    pub psnr_db: f64,
    pub rel_l2: f64,
    /// Mean over steps of `||delta|| / ||y_dense||`.
    pub input_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub rows: Vec<PerturbationRow>,
    /// `(band, mean PSNR, mean relative L2)` over seeds.
    pub means: Vec<(Band, f64, f64)>,
    /// Bands from most to least degraded by mean relative L2.
    pub ordering: Vec<Band>,
}

/// Euler-integrates `x <- x - v_t / T` over the trajectory from a seeded
/// initial latent and decodes with `tanh`.
fn integrate(initial: &[f64], velocities: &[VelocityField]) -> Vec<f64> {
    let dt = 1.0 / velocities.len() as f64;
    let mut x = initial.to_vec();
    for v in velocities {
        for (xi, vi) in x.iter_mut().zip(&v.data) {
            *xi -= dt * vi;
        }
    }
    x.iter().map(|v| v.tanh()).collect()
}

/// Adds an equal-relative-norm perturbation confined to each band to the
/// dense velocity at every step and measures the decoded end-of-trajectory
/// degradation against the unperturbed run.
pub fn perturbation_study(
    engine: &ForwardEngine<'_>,
    partition: &BandPartition,
    alpha: f64,
    seeds: &[u64],
) -> Result<PerturbationReport> {
    if seeds.is_empty() {
        return Err(Error::Domain("perturbation study needs at least one seed".into()));
    }
    let config = engine.trace().config();
    if partition.shape() != config.velocity_shape {
        return Err(Error::Shape(format!(
            "partition {:?} does not match velocity {:?}",
            partition.shape(),
            config.velocity_shape
        )));
    }
    let dense: Vec<VelocityField> = (0..config.steps)
        .into_par_iter()
        .map(|t| engine.dense_forward(t).map(|o| o.step.velocity.clone()))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, TAG_LATENT));
    let initial: Vec<f64> = (0..config.velocity_len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let reference = integrate(&initial, &dense);
    let ref_norm = reference.iter().map(|x| x * x).sum::<f64>().sqrt();

    let jobs: Vec<(Band, u64)> = Band::ALL.iter().flat_map(|&b| seeds.iter().map(move |&s| (b, s))).collect();
    let rows = jobs
        .par_iter()
        .map(|&(band, seed)| -> Result<PerturbationRow> {
            let mut perturbed = Vec::with_capacity(dense.len());
            let mut ratio_sum = 0.0;
            for (t, y) in dense.iter().enumerate() {
                let delta = band_perturbation(y, partition, band, alpha, mix_seed(seed, t as u64))?;
                ratio_sum += delta.norm() / y.norm();
                perturbed.push(y.add(&delta)?);
            }
            let decoded = integrate(&initial, &perturbed);
            let diff = decoded.iter().zip(&reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            Ok(PerturbationRow {
                band,
                alpha,
                seed,
                psnr_db: psnr(&decoded, &reference, DECODED_PEAK)?,
                rel_l2: if ref_norm > 0.0 { diff / ref_norm } else { diff },
                input_ratio: ratio_sum / dense.len() as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let means: Vec<(Band, f64, f64)> = Band::ALL
        .iter()
        .map(|&b| {
            let mine: Vec<&PerturbationRow> = rows.iter().filter(|r| r.band == b).collect();
            let n = mine.len() as f64;
            let p = mine.iter().map(|r| r.psnr_db).sum::<f64>() / n;
            let l = mine.iter().map(|r| r.rel_l2).sum::<f64>() / n;
            (b, p, l)
        })
        .collect();
    let mut ordering = means.clone();
    ordering.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    Ok(PerturbationReport { rows, means, ordering: ordering.into_iter().map(|m| m.0).collect() })
}
